use ndarray::Array3;

use crate::{CbmtError, Result, Scalar};

/// An RGB image with an optional multi-label mask.
///
/// Arrays are channel-first: `pixels` is `3 × H × W` and `mask` is `C × H × W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample<F> {
    pub id: String,
    pub pixels: Array3<F>,
    pub mask: Option<Array3<u8>>,
    pub domain_tag: String,
}

impl<F: Scalar> ImageSample<F> {
    pub fn new(
        id: impl Into<String>,
        pixels: Array3<F>,
        mask: Option<Array3<u8>>,
        domain_tag: impl Into<String>,
    ) -> Result<Self> {
        let id = id.into();
        if pixels.dim().0 != 3 {
            return Err(CbmtError::Shape(format!(
                "sample {id}: expected 3 channels, got {}",
                pixels.dim().0
            )));
        }
        if pixels.iter().any(|&v| !(v >= F::zero() && v <= F::one())) {
            return Err(CbmtError::InvalidArgument(format!(
                "sample {id}: pixel values must lie in [0,1]"
            )));
        }
        if let Some(m) = &mask {
            let (_, h, w) = pixels.dim();
            if (m.dim().1, m.dim().2) != (h, w) {
                return Err(CbmtError::Shape(format!(
                    "sample {id}: mask {:?} does not match image {h}x{w}",
                    m.dim()
                )));
            }
            if m.iter().any(|&v| v > 1) {
                return Err(CbmtError::InvalidArgument(format!(
                    "sample {id}: mask values must be 0 or 1"
                )));
            }
        }
        Ok(Self {
            id,
            pixels,
            mask,
            domain_tag: domain_tag.into(),
        })
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }

    /// Same sample with the pixels replaced, keeping identity and mask.
    pub fn with_pixels(&self, pixels: Array3<F>) -> Self {
        Self {
            id: self.id.clone(),
            pixels,
            mask: self.mask.clone(),
            domain_tag: self.domain_tag.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Producer {
    Teacher,
    Student,
    Source,
}

impl Producer {
    pub fn as_str(self) -> &'static str {
        match self {
            Producer::Teacher => "teacher",
            Producer::Student => "student",
            Producer::Source => "source",
        }
    }
}

/// Per-pixel, per-class sigmoid probabilities, `C × H × W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap<F> {
    pub values: Array3<F>,
    pub producer: Producer,
}

impl<F: Scalar> ProbMap<F> {
    pub fn new(values: Array3<F>, producer: Producer) -> Result<Self> {
        if values
            .iter()
            .any(|&v| !(v >= F::zero() && v <= F::one()))
        {
            return Err(CbmtError::InvalidArgument(
                "probabilities must lie in [0,1]".into(),
            ));
        }
        Ok(Self { values, producer })
    }

    pub fn from_logits(logits: &Array3<F>, producer: Producer) -> Self {
        Self {
            values: logits.mapv(sigmoid),
            producer,
        }
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.values.dim()
    }

    pub fn num_classes(&self) -> usize {
        self.values.dim().0
    }

    /// Hard prediction at probability 0.5, used for evaluation.
    pub fn binarize(&self) -> Array3<u8> {
        let half = F::lit(0.5);
        self.values.mapv(|v| u8::from(v > half))
    }
}

/// Hard labels derived from a probability map at threshold `gamma_used`.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelMap {
    pub labels: Array3<u8>,
    pub gamma_used: f64,
    pub producer_id: String,
}

impl PseudoLabelMap {
    pub fn dim(&self) -> (usize, usize, usize) {
        self.labels.dim()
    }

    /// Wraps a ground-truth mask so supervised training shares the loss path.
    pub fn from_mask(mask: &Array3<u8>, producer_id: impl Into<String>) -> Self {
        Self {
            labels: mask.clone(),
            gamma_used: f64::NAN,
            producer_id: producer_id.into(),
        }
    }

    pub fn foreground_count(&self, class: usize) -> usize {
        self.labels
            .index_axis(ndarray::Axis(0), class)
            .iter()
            .filter(|&&v| v == 1)
            .count()
    }
}

pub(crate) fn sigmoid<F: Scalar>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn check_same_dim<A, B>(
    a: &Array3<A>,
    b: &Array3<B>,
    what: &str,
) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(CbmtError::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Fraction of positive entries per class.
pub(crate) fn foreground_fraction(mask: &Array3<u8>) -> Vec<f64> {
    let (c, h, w) = mask.dim();
    (0..c)
        .map(|k| {
            let n = mask
                .index_axis(ndarray::Axis(0), k)
                .iter()
                .filter(|&&v| v != 0)
                .count();
            n as f64 / (h * w).max(1) as f64
        })
        .collect()
}
