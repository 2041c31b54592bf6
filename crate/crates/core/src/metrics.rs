//! Dice coefficient and average symmetric surface distance (ASSD).
//!
//! Surface pixels are mask pixels with at least one 4-neighbor outside the
//! mask; pixels on the image border count as surface. Distances are
//! Euclidean between pixel centers.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::Serialize;

use crate::{class_name, CbmtError, Result};

fn check_shapes(a: &ArrayView2<u8>, b: &ArrayView2<u8>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(CbmtError::Shape(format!("masks {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// `2|P∩T| / (|P|+|T|)`; 1 when both masks are empty.
pub fn dice(pred: ArrayView2<u8>, truth: ArrayView2<u8>) -> Result<f64> {
    check_shapes(&pred, &truth)?;
    let (mut inter, mut np, mut nt) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        let (p, t) = (p != 0, t != 0);
        np += p as usize;
        nt += t as usize;
        inter += (p && t) as usize;
    }
    if np + nt == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (np + nt) as f64)
}

/// Boundary pixels of a mask under 4-connectivity.
pub fn surface(mask: ArrayView2<u8>) -> Vec<(usize, usize)> {
    let (h, w) = mask.dim();
    let mut out = Vec::new();
    for i in 0..h {
        for j in 0..w {
            if mask[[i, j]] == 0 {
                continue;
            }
            let border = i == 0 || j == 0 || i + 1 == h || j + 1 == w;
            if border
                || mask[[i - 1, j]] == 0
                || mask[[i + 1, j]] == 0
                || mask[[i, j - 1]] == 0
                || mask[[i, j + 1]] == 0
            {
                out.push((i, j));
            }
        }
    }
    out
}

/// Exact squared Euclidean distance transform of a 1-D sampled function
/// (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        if f[q].is_infinite() {
            continue;
        }
        loop {
            let p = v[k];
            if f[p].is_infinite() {
                // an infinite parabola never wins; replace it
                v[k] = q;
                z[k + 1] = f64::INFINITY;
                break;
            }
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        *o = if f[p].is_infinite() {
            f64::INFINITY
        } else {
            let d = q as f64 - p as f64;
            d * d + f[p]
        };
    }
}

/// Squared distance from every pixel to the nearest listed point.
pub fn squared_distance_map(h: usize, w: usize, points: &[(usize, usize)]) -> Array2<f64> {
    let mut g = Array2::from_elem((h, w), f64::INFINITY);
    for &(i, j) in points {
        g[[i, j]] = 0.0;
    }
    let n = h.max(w);
    let (mut v, mut z) = (vec![0usize; n], vec![0f64; n + 1]);
    let mut col = vec![0f64; h];
    let mut out = vec![0f64; n];
    for j in 0..w {
        for i in 0..h {
            col[i] = g[[i, j]];
        }
        edt_1d(&col, &mut out[..h], &mut v, &mut z);
        for i in 0..h {
            g[[i, j]] = out[i];
        }
    }
    let mut row = vec![0f64; w];
    for i in 0..h {
        for j in 0..w {
            row[j] = g[[i, j]];
        }
        edt_1d(&row, &mut out[..w], &mut v, &mut z);
        for j in 0..w {
            g[[i, j]] = out[j];
        }
    }
    g
}

/// Average symmetric surface distance in pixels; `None` when either mask is empty.
pub fn assd(pred: ArrayView2<u8>, truth: ArrayView2<u8>) -> Result<Option<f64>> {
    check_shapes(&pred, &truth)?;
    let sp = surface(pred);
    let st = surface(truth);
    if sp.is_empty() || st.is_empty() {
        return Ok(None);
    }
    let (h, w) = pred.dim();
    let dt = squared_distance_map(h, w, &st);
    let dp = squared_distance_map(h, w, &sp);
    let a: f64 = sp.iter().map(|&(i, j)| dt[[i, j]].sqrt()).sum();
    let b: f64 = st.iter().map(|&(i, j)| dp[[i, j]].sqrt()).sum();
    Ok(Some((a + b) / (sp.len() + st.len()) as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageScore {
    pub id: String,
    pub class: usize,
    pub dice: f64,
    pub assd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassAggregate {
    pub dice_mean: f64,
    pub dice_std: f64,
    pub assd_mean: Option<f64>,
    pub assd_std: Option<f64>,
    /// Images whose ASSD was undefined (an empty mask) and left out.
    pub assd_excluded: usize,
}

/// Per-image scores plus per-class mean and population standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub num_classes: usize,
    pub per_image: Vec<ImageScore>,
    pub aggregates: Vec<ClassAggregate>,
}

fn mean_std(v: &[f64]) -> Option<(f64, f64)> {
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    Some((m, var.sqrt()))
}

/// Scores `C × H × W` predicted masks against ground truth.
pub fn evaluate_masks(ids: &[String], preds: &[Array3<u8>], truths: &[Array3<u8>]) -> Result<EvalResult> {
    if preds.is_empty() {
        return Err(CbmtError::Empty("evaluation set".into()));
    }
    if preds.len() != truths.len() || preds.len() != ids.len() {
        return Err(CbmtError::Shape(format!(
            "{} ids, {} predictions, {} ground truths",
            ids.len(),
            preds.len(),
            truths.len()
        )));
    }
    let num_classes = truths[0].dim().0;
    let mut per_image = Vec::new();
    for ((id, p), t) in ids.iter().zip(preds).zip(truths) {
        if p.dim() != t.dim() {
            return Err(CbmtError::Shape(format!("{id}: {:?} vs {:?}", p.dim(), t.dim())));
        }
        for k in 0..num_classes {
            let (pk, tk) = (p.index_axis(Axis(0), k), t.index_axis(Axis(0), k));
            let d = dice(pk, tk)?;
            let a = assd(pk, tk)?;
            if a.is_none() {
                log::warn!("{id}: ASSD undefined for class {k} (empty mask); excluded from aggregates");
            }
            per_image.push(ImageScore {
                id: id.clone(),
                class: k,
                dice: d,
                assd: a,
            });
        }
    }
    let aggregates = (0..num_classes)
        .map(|k| {
            let scores: Vec<&ImageScore> = per_image.iter().filter(|s| s.class == k).collect();
            let dices: Vec<f64> = scores.iter().map(|s| s.dice).collect();
            let assds: Vec<f64> = scores.iter().filter_map(|s| s.assd).collect();
            let (dm, ds) = mean_std(&dices).expect("nonempty");
            let a = mean_std(&assds);
            ClassAggregate {
                dice_mean: dm,
                dice_std: ds,
                assd_mean: a.map(|x| x.0),
                assd_std: a.map(|x| x.1),
                assd_excluded: scores.len() - assds.len(),
            }
        })
        .collect();
    Ok(EvalResult {
        num_classes,
        per_image,
        aggregates,
    })
}

impl EvalResult {
    pub fn mean_dice(&self) -> f64 {
        self.aggregates.iter().map(|a| a.dice_mean).sum::<f64>() / self.aggregates.len().max(1) as f64
    }

    pub fn per_image_csv(&self) -> String {
        let mut s = String::from("id,class,dice,assd\n");
        for r in &self.per_image {
            let a = r.assd.map_or_else(|| "nan".to_string(), |v| v.to_string());
            s.push_str(&format!(
                "{},{},{},{}\n",
                r.id,
                class_name(r.class, self.num_classes),
                r.dice,
                a
            ));
        }
        s
    }

    /// `{class: {dice_mean, dice_std, assd_mean, assd_std, assd_excluded}}`.
    pub fn aggregate_json(&self) -> serde_json::Value {
        let map: serde_json::Map<String, serde_json::Value> = self
            .aggregates
            .iter()
            .enumerate()
            .map(|(k, a)| {
                (
                    class_name(k, self.num_classes),
                    serde_json::to_value(a).expect("serializable"),
                )
            })
            .collect();
        serde_json::Value::Object(map)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn mask(h: usize, w: usize, cells: &[(usize, usize)]) -> Array2<u8> {
        let mut m = Array2::zeros((h, w));
        for &c in cells {
            m[c] = 1;
        }
        m
    }

    fn block(h: usize, w: usize, r: std::ops::Range<usize>, c: std::ops::Range<usize>) -> Array2<u8> {
        let mut m = Array2::zeros((h, w));
        m.slice_mut(ndarray::s![r, c]).fill(1);
        m
    }

    #[test]
    fn dice_examples() {
        let a = block(4, 4, 1..3, 0..2);
        assert_eq!(dice(a.view(), a.view()).unwrap(), 1.0);
        let b = block(4, 4, 1..3, 2..4);
        assert_eq!(dice(a.view(), b.view()).unwrap(), 0.0);
        let shifted = block(4, 4, 1..3, 1..3);
        assert_eq!(dice(a.view(), shifted.view()).unwrap(), 0.5);
        let e = Array2::<u8>::zeros((4, 4));
        assert_eq!(dice(e.view(), e.view()).unwrap(), 1.0);
        assert_eq!(dice(e.view(), a.view()).unwrap(), 0.0);
        assert!(dice(e.view(), Array2::<u8>::zeros((3, 4)).view()).is_err());
    }

    #[test]
    fn assd_examples() {
        let a = block(8, 8, 2..5, 2..5);
        assert_eq!(assd(a.view(), a.view()).unwrap(), Some(0.0));
        let p = mask(5, 8, &[(2, 1)]);
        let t = mask(5, 8, &[(2, 4)]);
        assert_eq!(assd(p.view(), t.view()).unwrap(), Some(3.0));
        let e = Array2::<u8>::zeros((8, 8));
        assert_eq!(assd(e.view(), a.view()).unwrap(), None);
    }

    #[test]
    fn square_versus_dilated_square() {
        // 3x3 square has 8 surface pixels (all but the center); the 5x5 has 16.
        // From the 3x3 ring each pixel is exactly 1 away from the 5x5 ring.
        // From the 5x5 ring: 12 edge-adjacent pixels at 1, 4 corners at sqrt(2).
        let p = block(9, 9, 3..6, 3..6);
        let t = block(9, 9, 2..7, 2..7);
        let expected = (8.0 + 12.0 + 4.0 * 2f64.sqrt()) / 24.0;
        let got = assd(p.view(), t.view()).unwrap().unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn border_pixels_are_surface() {
        let full = Array2::from_elem((3, 3), 1u8);
        assert_eq!(surface(full.view()).len(), 8);
    }

    #[test]
    fn aggregates_exclude_undefined_assd() {
        let mut t = Array3::<u8>::zeros((2, 4, 4));
        t.slice_mut(ndarray::s![0, 1..3, 1..3]).fill(1);
        let p = t.clone();
        let r = evaluate_masks(&["a".into()], &[p], &[t]).unwrap();
        assert_eq!(r.aggregates[0].dice_mean, 1.0);
        assert_eq!(r.aggregates[0].assd_mean, Some(0.0));
        assert_eq!(r.aggregates[1].dice_mean, 1.0);
        assert_eq!(r.aggregates[1].assd_mean, None);
        assert_eq!(r.aggregates[1].assd_excluded, 1);
        let json = r.aggregate_json();
        assert_eq!(json["disc"]["dice_mean"], 1.0);
        assert!(evaluate_masks(&[], &[], &[]).is_err());
    }
}
