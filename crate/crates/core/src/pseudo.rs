//! Teacher-side pseudo-labels and the informative-pixel filter.

use ndarray::{Array3, Zip};

use crate::datamodel::{FilterMode, ProbMap, PseudoLabelMap};
use crate::datamodel::types::check_same_dim;
use crate::{CbmtError, Result, Scalar};

/// Which pixels enter the dataset-wide loss statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelFilterMask {
    pub keep: Array3<u8>,
    pub mode: FilterMode,
    pub alpha_used: f64,
}

impl PixelFilterMask {
    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&v| v == 1).count()
    }
}

/// `labels[k,i,j] = 1` iff `probs[k,i,j] > gamma` (strict).
pub fn make_pseudo_labels<F: Scalar>(probs: &ProbMap<F>, gamma: f64) -> Result<PseudoLabelMap> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(CbmtError::InvalidArgument(format!(
            "gamma {gamma} out of (0,1)"
        )));
    }
    let g = F::lit(gamma);
    Ok(PseudoLabelMap {
        labels: probs.values.mapv(|p| u8::from(p > g)),
        gamma_used: gamma,
        producer_id: probs.producer.as_str().to_string(),
    })
}

/// Selects pixels whose prediction is far enough from a confident answer.
///
/// With `alpha == 0` every pixel is kept. Ratios equal to `alpha` up to a few
/// ulps are ties and are not kept.
pub fn informative_pixel_mask<F: Scalar>(
    probs: &ProbMap<F>,
    labels: &PseudoLabelMap,
    gamma: f64,
    alpha: f64,
    mode: FilterMode,
) -> Result<PixelFilterMask> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(CbmtError::InvalidArgument(format!(
            "alpha {alpha} out of [0,1)"
        )));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(CbmtError::InvalidArgument(format!(
            "gamma {gamma} out of (0,1)"
        )));
    }
    check_same_dim(&probs.values, &labels.labels, "informative_pixel_mask")?;

    let keep = if alpha == 0.0 {
        Array3::ones(labels.dim())
    } else {
        let g = F::lit(gamma);
        let a = F::lit(alpha);
        let tie = F::epsilon() * F::lit(16.0);
        let mut keep = Array3::zeros(labels.dim());
        Zip::from(&mut keep)
            .and(&probs.values)
            .and(&labels.labels)
            .for_each(|k, &p, &y| {
                let y = if y == 1 { F::one() } else { F::zero() };
                let ratio = match mode {
                    FilterMode::DistanceFromLabel => (p - y).abs() / (g - y).abs(),
                    FilterMode::LiteralPaperFormula => (p - g).abs() / (y - g).abs(),
                };
                *k = u8::from(ratio - a > tie);
            });
        keep
    };
    Ok(PixelFilterMask {
        keep,
        mode,
        alpha_used: alpha,
    })
}
