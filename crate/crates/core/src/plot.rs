//! Static SVG training curves from one or more run logs.

use std::fmt::Write as _;

use crate::{CbmtError, Result};

/// A numeric CSV table with a header row.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl CsvTable {
    /// Parses a header line followed by numeric rows (`nan` allowed).
    pub fn parse(text: &str, what: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| CbmtError::Parse {
            what: what.to_string(),
            line: 1,
            message: "missing header".into(),
        })?;
        let columns: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
        let mut rows = Vec::new();
        for (i, line) in lines {
            let err = |message: String| CbmtError::Parse {
                what: what.to_string(),
                line: i + 1,
                message,
            };
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != columns.len() {
                return Err(err(format!("{} fields, header has {}", fields.len(), columns.len())));
            }
            let row = fields
                .iter()
                .map(|f| f.parse::<f64>().map_err(|_| err(format!("`{f}` is not a number"))))
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Ok(Self { columns, rows })
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    fn first_with_prefix(&self, prefix: &str, preferred: &str) -> Option<(String, Vec<f64>)> {
        if let Some(v) = self.column(preferred) {
            return Some((preferred.to_string(), v));
        }
        let name = self.columns.iter().find(|c| c.starts_with(prefix))?.clone();
        let v = self.column(&name)?;
        Some((name, v))
    }
}

/// One labeled run log.
#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    pub table: CsvTable,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 280.0;
const MARGIN: f64 = 50.0;

struct Panel {
    title: String,
    lines: Vec<(String, Vec<(f64, f64)>)>,
}

fn finite_points(x: &[f64], y: &[f64]) -> Vec<(f64, f64)> {
    x.iter()
        .zip(y)
        .filter(|(a, b)| a.is_finite() && b.is_finite())
        .map(|(&a, &b)| (a, b))
        .collect()
}

fn draw_panel(svg: &mut String, panel: &Panel, x0: f64) {
    let pts = panel.lines.iter().flat_map(|(_, p)| p.iter());
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        ymin = ymin.min(y);
        ymax = ymax.max(y);
    }
    if xmin > xmax {
        (xmin, xmax, ymin, ymax) = (0.0, 1.0, 0.0, 1.0);
    }
    if xmax - xmin < 1e-12 {
        xmax = xmin + 1.0;
    }
    let pad = ((ymax - ymin) * 0.05).max(1e-6);
    let (ymin, ymax) = (ymin - pad, ymax + pad);
    let sx = |x: f64| x0 + MARGIN + (x - xmin) / (xmax - xmin) * (PANEL_W - 1.5 * MARGIN);
    let sy = |y: f64| PANEL_H - MARGIN + (ymin - y) / (ymax - ymin) * (PANEL_H - 1.6 * MARGIN);
    let (left, right, top, bottom) = (sx(xmin), sx(xmax), sy(ymax), sy(ymin));
    let _ = writeln!(
        svg,
        r##"<rect x="{left:.1}" y="{top:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#444"/>"##,
        right - left,
        bottom - top
    );
    let _ = writeln!(
        svg,
        r##"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="14">{}</text>"##,
        (left + right) / 2.0,
        top - 10.0,
        panel.title
    );
    let _ = writeln!(
        svg,
        r##"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="12">epoch</text>"##,
        (left + right) / 2.0,
        bottom + 32.0
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (xmin + f * (xmax - xmin), ymin + f * (ymax - ymin));
        let _ = writeln!(
            svg,
            r##"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="10">{xv:.0}</text>"##,
            sx(xv),
            bottom + 14.0
        );
        let _ = writeln!(
            svg,
            r##"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="10">{yv:.3}</text>"##,
            left - 4.0,
            sy(yv) + 3.0
        );
    }
    for (i, (label, points)) in panel.lines.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            svg,
            r##"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"##,
            path.join(" ")
        );
        let ly = top + 14.0 + 14.0 * i as f64;
        let _ = writeln!(
            svg,
            r##"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"##,
            right - 120.0,
            right - 100.0
        );
        let _ = writeln!(
            svg,
            r##"<text x="{:.1}" y="{:.1}" font-size="11">{}</text>"##,
            right - 96.0,
            ly + 4.0,
            escape(label)
        );
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders a Dice-vs-epoch panel and a predicted-foreground-fraction panel.
///
/// A panel whose column is missing from every log is left out with a warning.
/// Returns the SVG text and the titles of the panels drawn.
pub fn render_curves(series: &[Series]) -> Result<(String, Vec<String>)> {
    if series.is_empty() {
        return Err(CbmtError::Empty("run log list".into()));
    }
    let mut panels = Vec::new();
    let mut dice = Panel {
        title: "Dice".into(),
        lines: vec![],
    };
    let mut frac = Panel {
        title: "predicted foreground fraction".into(),
        lines: vec![],
    };
    for s in series {
        let epoch = s.table.column("epoch").ok_or_else(|| CbmtError::Parse {
            what: s.label.clone(),
            line: 1,
            message: "no `epoch` column".into(),
        })?;
        match s.table.first_with_prefix("dice_", "mean_dice") {
            Some((_, v)) => dice.lines.push((s.label.clone(), finite_points(&epoch, &v))),
            None => log::warn!("{}: no Dice column", s.label),
        }
        match s.table.first_with_prefix("fg_frac_", "fg_frac_cup") {
            Some((name, v)) => {
                frac.title = format!("predicted foreground fraction ({})", name.trim_start_matches("fg_frac_"));
                frac.lines.push((s.label.clone(), finite_points(&epoch, &v)));
            }
            None => log::warn!("{}: no foreground-fraction column; skipping that panel", s.label),
        }
    }
    for p in [dice, frac] {
        if p.lines.is_empty() {
            log::warn!("skipping panel `{}`: no run log has its column", p.title);
        } else {
            panels.push(p);
        }
    }
    let width = PANEL_W * panels.len().max(1) as f64;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{PANEL_H:.0}" font-family="sans-serif">"##
    );
    let _ = writeln!(svg, r##"<rect width="100%" height="100%" fill="white"/>"##);
    for (i, p) in panels.iter().enumerate() {
        draw_panel(&mut svg, p, i as f64 * PANEL_W);
    }
    svg.push_str("</svg>\n");
    Ok((svg, panels.into_iter().map(|p| p.title).collect()))
}
