//! Dataset-wide foreground/background loss statistics and the calibrated BCE.
//!
//! Per class `k`, the mean loss over kept foreground pixels (`eta_fg`) and over
//! kept background pixels (`eta_bg`) is accumulated across a whole epoch. Their
//! ratio `eta_fg / eta_bg` then weights the background term of the binary
//! cross entropy for the calibrated classes.

use ndarray::{Array2, Array3, Axis, Zip};

use crate::datamodel::types::check_same_dim;
use crate::datamodel::{ProbMap, PseudoLabelMap, StatsTiming};
use crate::pseudo::PixelFilterMask;
use crate::{CbmtError, Result, Scalar};

/// Probability clamp applied before taking logarithms.
pub const PROB_EPS: f64 = 1e-7;

/// Per-pixel losses and their mean over all pixels and classes.
#[derive(Clone, Debug)]
pub struct PixelLosses<F> {
    pub per_pixel: Array3<F>,
    pub mean: f64,
}

fn weighted_term<F: Scalar>(p: F, y: u8, w: F) -> F {
    let eps = F::lit(PROB_EPS);
    let p = p.max(eps).min(F::one() - eps);
    if y == 1 {
        -p.ln()
    } else {
        -w * (F::one() - p).ln()
    }
}

/// Nonnegative binary cross entropy `-(y log p + (1 - y) log(1 - p))`.
pub fn bce_loss<F: Scalar>(probs: &ProbMap<F>, labels: &PseudoLabelMap) -> Result<PixelLosses<F>> {
    let ones = vec![1.0; probs.num_classes()];
    weighted_bce_losses(&probs.values, &labels.labels, &ones)
}

/// BCE with the background term of class `k` scaled by `bg_weights[k]`.
pub fn weighted_bce_losses<F: Scalar>(
    probs: &Array3<F>,
    labels: &Array3<u8>,
    bg_weights: &[f64],
) -> Result<PixelLosses<F>> {
    check_same_dim(probs, labels, "bce")?;
    if bg_weights.len() != probs.dim().0 {
        return Err(CbmtError::Shape(format!(
            "{} background weights for {} classes",
            bg_weights.len(),
            probs.dim().0
        )));
    }
    let mut per_pixel = Array3::zeros(probs.dim());
    let mut total = 0.0f64;
    for (k, &w) in bg_weights.iter().enumerate() {
        let w = F::lit(w);
        Zip::from(per_pixel.index_axis_mut(Axis(0), k))
            .and(probs.index_axis(Axis(0), k))
            .and(labels.index_axis(Axis(0), k))
            .for_each(|l, &p, &y| {
                *l = weighted_term(p, y, w);
                total += l.as_f64();
            });
    }
    let n = probs.len().max(1) as f64;
    Ok(PixelLosses {
        per_pixel,
        mean: total / n,
    })
}

/// Gradient of the mean weighted BCE with respect to the probabilities.
///
/// Entries where the clamp is active have zero gradient.
pub fn weighted_bce_grad_probs<F: Scalar>(
    probs: &Array3<F>,
    labels: &Array3<u8>,
    bg_weights: &[f64],
) -> Result<Array3<F>> {
    check_same_dim(probs, labels, "bce gradient")?;
    let n = F::lit(probs.len().max(1) as f64);
    let eps = F::lit(PROB_EPS);
    let mut grad = Array3::zeros(probs.dim());
    for (k, &w) in bg_weights.iter().enumerate() {
        let w = F::lit(w);
        Zip::from(grad.index_axis_mut(Axis(0), k))
            .and(probs.index_axis(Axis(0), k))
            .and(labels.index_axis(Axis(0), k))
            .for_each(|g, &p, &y| {
                if p > eps && p < F::one() - eps {
                    *g = if y == 1 { -F::one() / p } else { w / (F::one() - p) } / n;
                }
            });
    }
    Ok(grad)
}

fn softplus<F: Scalar>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

/// Weighted BCE evaluated from logits, with its gradient with respect to the logits.
///
/// `pixel_mask` (`H × W`, 1 = counted) removes pixels from both the loss and
/// the mean's denominator.
pub fn weighted_bce_logits<F: Scalar>(
    logits: &Array3<F>,
    labels: &Array3<u8>,
    bg_weights: &[f64],
    pixel_mask: Option<&Array2<u8>>,
) -> Result<(f64, Array3<F>)> {
    check_same_dim(logits, labels, "bce logits")?;
    let (c, h, w) = logits.dim();
    if bg_weights.len() != c {
        return Err(CbmtError::Shape(format!(
            "{} background weights for {c} classes",
            bg_weights.len()
        )));
    }
    if let Some(m) = pixel_mask {
        if m.dim() != (h, w) {
            return Err(CbmtError::Shape(format!("pixel mask {:?} vs {h}x{w}", m.dim())));
        }
    }
    let counted = pixel_mask.map_or(h * w, |m| m.iter().filter(|&&v| v == 1).count()) * c;
    let mut grad = Array3::zeros(logits.dim());
    if counted == 0 {
        return Ok((0.0, grad));
    }
    let inv_n = F::one() / F::lit(counted as f64);
    let mut total = 0.0f64;
    for (k, &bw) in bg_weights.iter().enumerate() {
        let bw = F::lit(bw);
        for i in 0..h {
            for j in 0..w {
                if let Some(m) = pixel_mask {
                    if m[[i, j]] == 0 {
                        continue;
                    }
                }
                let z = logits[[k, i, j]];
                let p = crate::datamodel::types::sigmoid(z);
                if labels[[k, i, j]] == 1 {
                    total += softplus(-z).as_f64();
                    grad[[k, i, j]] = (p - F::one()) * inv_n;
                } else {
                    total += (bw * softplus(z)).as_f64();
                    grad[[k, i, j]] = bw * p * inv_n;
                }
            }
        }
    }
    Ok((total / counted as f64, grad))
}

/// Accumulators and derived weights for one class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassStats {
    pub sum_fg_loss: f64,
    pub count_fg: u64,
    pub sum_bg_loss: f64,
    pub count_bg: u64,
    /// Means from the last finalized epoch that had data.
    pub eta_fg: Option<f64>,
    pub eta_bg: Option<f64>,
    /// Weight applied to the background term; 1 until first calibrated.
    pub bg_weight: f64,
}

impl Default for ClassStats {
    fn default() -> Self {
        Self {
            sum_fg_loss: 0.0,
            count_fg: 0,
            sum_bg_loss: 0.0,
            count_bg: 0,
            eta_fg: None,
            eta_bg: None,
            bg_weight: 1.0,
        }
    }
}

impl ClassStats {
    /// Ratio of the running means, if both sides have data.
    fn running_weight(&self) -> Option<f64> {
        if self.count_fg == 0 || self.count_bg == 0 || self.sum_bg_loss <= 0.0 {
            return None;
        }
        let w = (self.sum_fg_loss / self.count_fg as f64) / (self.sum_bg_loss / self.count_bg as f64);
        (w.is_finite() && w > 0.0).then_some(w)
    }
}

/// One finalized line of the per-epoch statistics log.
#[derive(Clone, Debug, PartialEq)]
pub struct StatsRecord {
    pub epoch: usize,
    pub class: usize,
    pub eta_fg: f64,
    pub eta_bg: f64,
    pub bg_weight: f64,
    pub kept_fg_count: u64,
    pub kept_bg_count: u64,
    /// Weight carried over because a side had no kept pixels.
    pub carried: bool,
}

pub const STATS_CSV_HEADER: &str = "epoch,class,eta_fg,eta_bg,bg_weight,kept_fg_count,kept_bg_count";

impl StatsRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.class,
            self.eta_fg,
            self.eta_bg,
            self.bg_weight,
            self.kept_fg_count,
            self.kept_bg_count
        )
    }
}

/// Dataset-wide statistics for all classes.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationStats {
    pub classes: Vec<ClassStats>,
    /// Number of finalized epochs.
    pub epoch: usize,
}

impl CalibrationStats {
    pub fn new(num_classes: usize) -> Self {
        Self {
            classes: vec![ClassStats::default(); num_classes],
            epoch: 0,
        }
    }

    /// Adds the kept per-pixel losses to the foreground or background sums.
    pub fn accumulate_stats<F: Scalar>(
        &mut self,
        losses: &Array3<F>,
        labels: &PseudoLabelMap,
        keep: &PixelFilterMask,
    ) -> Result<()> {
        check_same_dim(losses, &labels.labels, "accumulate_stats")?;
        check_same_dim(losses, &keep.keep, "accumulate_stats")?;
        if losses.dim().0 != self.classes.len() {
            return Err(CbmtError::Shape(format!(
                "{} loss channels for {} classes",
                losses.dim().0,
                self.classes.len()
            )));
        }
        for (k, cs) in self.classes.iter_mut().enumerate() {
            Zip::from(losses.index_axis(Axis(0), k))
                .and(labels.labels.index_axis(Axis(0), k))
                .and(keep.keep.index_axis(Axis(0), k))
                .for_each(|&l, &y, &kp| {
                    if kp == 1 {
                        if y == 1 {
                            cs.sum_fg_loss += l.as_f64();
                            cs.count_fg += 1;
                        } else {
                            cs.sum_bg_loss += l.as_f64();
                            cs.count_bg += 1;
                        }
                    }
                });
        }
        Ok(())
    }

    /// Adds another partial accumulation (e.g. from a parallel worker).
    pub fn merge(&mut self, other: &CalibrationStats) {
        for (a, b) in self.classes.iter_mut().zip(&other.classes) {
            a.sum_fg_loss += b.sum_fg_loss;
            a.count_fg += b.count_fg;
            a.sum_bg_loss += b.sum_bg_loss;
            a.count_bg += b.count_bg;
        }
    }

    /// Turns the epoch's accumulators into means and weights, then resets them.
    ///
    /// A class with no kept foreground or background pixels keeps its
    /// previous weight.
    pub fn finalize_epoch(&mut self) -> Vec<StatsRecord> {
        let epoch = self.epoch;
        let mut records = Vec::with_capacity(self.classes.len());
        for (k, cs) in self.classes.iter_mut().enumerate() {
            let carried = match cs.running_weight() {
                Some(w) => {
                    cs.eta_fg = Some(cs.sum_fg_loss / cs.count_fg as f64);
                    cs.eta_bg = Some(cs.sum_bg_loss / cs.count_bg as f64);
                    cs.bg_weight = w;
                    false
                }
                None => {
                    log::warn!(
                        "epoch {epoch}: class {k} has {} kept fg and {} kept bg pixels; keeping weight {}",
                        cs.count_fg,
                        cs.count_bg,
                        cs.bg_weight
                    );
                    true
                }
            };
            let rec = StatsRecord {
                epoch,
                class: k,
                eta_fg: cs.eta_fg.unwrap_or(f64::NAN),
                eta_bg: cs.eta_bg.unwrap_or(f64::NAN),
                bg_weight: cs.bg_weight,
                kept_fg_count: cs.count_fg,
                kept_bg_count: cs.count_bg,
                carried,
            };
            log::info!(
                "epoch {epoch} class {k}: eta_fg={:.6} eta_bg={:.6} bg_weight={:.6}",
                rec.eta_fg,
                rec.eta_bg,
                rec.bg_weight
            );
            records.push(rec);
            cs.sum_fg_loss = 0.0;
            cs.count_fg = 0;
            cs.sum_bg_loss = 0.0;
            cs.count_bg = 0;
        }
        self.epoch += 1;
        records
    }

    /// Background weights to use now: the calibrated classes get their
    /// finalized (or, when streaming, running) ratio, all others get 1.
    pub fn background_weights(
        &self,
        calibrated_classes: &[usize],
        num_classes: usize,
        timing: StatsTiming,
    ) -> Result<Vec<f64>> {
        let mut w = vec![1.0; num_classes];
        for &k in calibrated_classes {
            let cs = self
                .classes
                .get(k)
                .ok_or(CbmtError::MissingStats { class: k })?;
            let v = match timing {
                StatsTiming::Frozen => cs.bg_weight,
                StatsTiming::Streaming => cs.running_weight().unwrap_or(cs.bg_weight),
            };
            if self.epoch >= 1 && !(v.is_finite() && v > 0.0) {
                return Err(CbmtError::MissingStats { class: k });
            }
            if k < num_classes {
                w[k] = v;
            }
        }
        Ok(w)
    }
}

/// Mean calibrated BCE on one map using the frozen weights in `stats`.
pub fn calibrated_bce<F: Scalar>(
    probs: &ProbMap<F>,
    labels: &PseudoLabelMap,
    stats: &CalibrationStats,
    calibrated_classes: &[usize],
) -> Result<f64> {
    let w = stats.background_weights(calibrated_classes, probs.num_classes(), StatsTiming::Frozen)?;
    Ok(weighted_bce_losses(&probs.values, &labels.labels, &w)?.mean)
}
