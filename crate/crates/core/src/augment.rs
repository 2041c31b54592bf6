//! Weak (geometric) and strong (photometric/erasure) augmentation.
//!
//! The strong view is always derived from the weak view without any further
//! geometric change, so a label map computed on the weak view is valid pixel
//! for pixel on the strong view.

use ndarray::{Array2, Array3};
use rand::Rng as _;

use crate::datamodel::{AugmentConfig, ImageSample};
use crate::rng::{rng_from, Rng};
use crate::Scalar;

/// Geometric choices made by [`weak_augment`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeoRecord {
    pub hflip: bool,
    pub vflip: bool,
    /// Zoom factor about the image center; >1 crops, <1 pads with zeros.
    pub scale: f64,
}

impl GeoRecord {
    pub const IDENTITY: GeoRecord = GeoRecord {
        hflip: false,
        vflip: false,
        scale: 1.0,
    };
}

/// Axis-aligned rectangle `(row0, col0, rows, cols)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

/// Strong operations to apply; `None` skips an operation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StrongOps {
    pub erase: Option<Rect>,
    pub contrast: Option<f64>,
    /// Fraction of pixels replaced by salt-and-pepper noise.
    pub noise: Option<f64>,
}

impl StrongOps {
    pub const NONE: StrongOps = StrongOps {
        erase: None,
        contrast: None,
        noise: None,
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedPair<F> {
    pub weak_view: ImageSample<F>,
    pub strong_view: ImageSample<F>,
    pub geo_record: GeoRecord,
    pub strong_ops: StrongOps,
    pub rng_seed: u64,
}

impl<F> AugmentedPair<F> {
    /// `H × W` map with 0 on erased pixels, for excluding them from the loss.
    pub fn unerased_mask(&self) -> Option<Array2<u8>> {
        let rect = self.strong_ops.erase?;
        let (_, h, w) = self.strong_view.pixels.dim();
        let mut m = Array2::ones((h, w));
        m.slice_mut(ndarray::s![rect.row0..rect.row0 + rect.rows, rect.col0..rect.col0 + rect.cols])
            .fill(0);
        Some(m)
    }
}

fn sample_bilinear<F: Scalar>(plane: ndarray::ArrayView2<F>, sy: f64, sx: f64) -> F {
    let (h, w) = plane.dim();
    let y0 = sy.floor();
    let x0 = sx.floor();
    let fy = F::lit(sy - y0);
    let fx = F::lit(sx - x0);
    let at = |y: f64, x: f64| -> F {
        if y < 0.0 || x < 0.0 || y >= h as f64 || x >= w as f64 {
            F::zero()
        } else {
            plane[[y as usize, x as usize]]
        }
    };
    let one = F::one();
    let top = (one - fx) * at(y0, x0) + if fx > F::zero() { fx * at(y0, x0 + 1.0) } else { F::zero() };
    if fy > F::zero() {
        let bottom = (one - fx) * at(y0 + 1.0, x0)
            + if fx > F::zero() { fx * at(y0 + 1.0, x0 + 1.0) } else { F::zero() };
        (one - fy) * top + fy * bottom
    } else {
        top
    }
}

/// Applies flips and center zoom: bilinear for pixels, nearest for masks.
pub fn apply_geometry<F: Scalar>(sample: &ImageSample<F>, geo: &GeoRecord) -> ImageSample<F> {
    let (c, h, w) = sample.pixels.dim();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let src = |y: usize, x: usize| -> (f64, f64) {
        let y = if geo.vflip { h - 1 - y } else { y } as f64;
        let x = if geo.hflip { w - 1 - x } else { x } as f64;
        if geo.scale == 1.0 {
            (y, x)
        } else {
            ((y - cy) / geo.scale + cy, (x - cx) / geo.scale + cx)
        }
    };
    let mut pixels = Array3::zeros((c, h, w));
    for ch in 0..c {
        let plane = sample.pixels.index_axis(ndarray::Axis(0), ch);
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = src(y, x);
                pixels[[ch, y, x]] = sample_bilinear(plane, sy, sx).min(F::one()).max(F::zero());
            }
        }
    }
    let mask = sample.mask.as_ref().map(|m| {
        let k = m.dim().0;
        let mut out = Array3::zeros((k, h, w));
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = src(y, x);
                let (ry, rx) = (sy.round(), sx.round());
                if ry >= 0.0 && rx >= 0.0 && ry < h as f64 && rx < w as f64 {
                    for ch in 0..k {
                        out[[ch, y, x]] = m[[ch, ry as usize, rx as usize]];
                    }
                }
            }
        }
        out
    });
    ImageSample {
        id: sample.id.clone(),
        pixels,
        mask,
        domain_tag: sample.domain_tag.clone(),
    }
}

/// Random horizontal/vertical flip and center zoom.
pub fn weak_augment<F: Scalar>(
    sample: &ImageSample<F>,
    rng: &mut Rng,
    cfg: &AugmentConfig,
) -> (ImageSample<F>, GeoRecord) {
    let hflip = rng.random::<f64>() < cfg.flip_prob;
    let vflip = rng.random::<f64>() < cfg.flip_prob;
    let [lo, hi] = cfg.scale_range;
    let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let geo = GeoRecord { hflip, vflip, scale };
    (apply_geometry(sample, &geo), geo)
}

/// Draws which strong operations to apply and their magnitudes.
pub fn sample_strong_ops(h: usize, w: usize, rng: &mut Rng, cfg: &AugmentConfig) -> StrongOps {
    let p = cfg.strong_op_prob;
    let range = |rng: &mut Rng, [lo, hi]: [f64; 2]| if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let erase = (rng.random::<f64>() < p).then(|| {
        let area = range(rng, cfg.erase_area) * (h * w) as f64;
        let aspect: f64 = rng.random_range(0.5..=2.0);
        let rows = ((area * aspect).sqrt().round() as usize).clamp(1, h);
        let cols = ((area / rows as f64).round() as usize).clamp(1, w);
        let row0 = rng.random_range(0..=h - rows);
        let col0 = rng.random_range(0..=w - cols);
        Rect { row0, col0, rows, cols }
    });
    let contrast = (rng.random::<f64>() < p).then(|| range(rng, cfg.contrast_range));
    let noise = (rng.random::<f64>() < p).then(|| range(rng, cfg.noise_fraction));
    StrongOps { erase, contrast, noise }
}

/// Applies erase, contrast and impulse noise in that order. Geometry is untouched.
pub fn apply_strong_ops<F: Scalar>(
    weak_view: &ImageSample<F>,
    ops: &StrongOps,
    fill: [F; 3],
    rng: &mut Rng,
) -> ImageSample<F> {
    let mut px = weak_view.pixels.clone();
    let (c, h, w) = px.dim();
    if let Some(r) = ops.erase {
        for ch in 0..c {
            px.slice_mut(ndarray::s![ch, r.row0..r.row0 + r.rows, r.col0..r.col0 + r.cols])
                .fill(fill[ch.min(2)]);
        }
    }
    if let Some(factor) = ops.contrast {
        let f = F::lit(factor);
        for mut plane in px.outer_iter_mut() {
            let mean = plane.mean().unwrap_or(F::zero());
            plane.mapv_inplace(|v| (mean + f * (v - mean)).max(F::zero()).min(F::one()));
        }
    }
    if let Some(frac) = ops.noise {
        let count = (frac * (h * w) as f64).round() as usize;
        for _ in 0..count {
            let y = rng.random_range(0..h);
            let x = rng.random_range(0..w);
            let v = if rng.random::<bool>() { F::one() } else { F::zero() };
            for ch in 0..c {
                px[[ch, y, x]] = v;
            }
        }
    }
    weak_view.with_pixels(px)
}

/// Random strong view of an already weakly augmented sample.
pub fn strong_augment<F: Scalar>(
    weak_view: &ImageSample<F>,
    rng: &mut Rng,
    cfg: &AugmentConfig,
    fill: [F; 3],
) -> (ImageSample<F>, StrongOps) {
    let ops = sample_strong_ops(weak_view.height(), weak_view.width(), rng, cfg);
    (apply_strong_ops(weak_view, &ops, fill, rng), ops)
}

/// Weak and (optionally) strong view of one sample from one seed.
pub fn make_pair<F: Scalar>(
    sample: &ImageSample<F>,
    seed: u64,
    cfg: &AugmentConfig,
    fill: [F; 3],
    strong: bool,
) -> AugmentedPair<F> {
    let mut rng = rng_from(seed);
    let (weak_view, geo_record) = weak_augment(sample, &mut rng, cfg);
    let (strong_view, strong_ops) = if strong {
        strong_augment(&weak_view, &mut rng, cfg, fill)
    } else {
        (weak_view.clone(), StrongOps::NONE)
    };
    AugmentedPair {
        weak_view,
        strong_view,
        geo_record,
        strong_ops,
        rng_seed: seed,
    }
}

/// Per-channel mean intensity over a set of samples.
pub fn channel_means<F: Scalar>(samples: &[ImageSample<F>]) -> [F; 3] {
    let mut sums = [0.0f64; 3];
    let mut n = 0usize;
    for s in samples {
        for (ch, plane) in s.pixels.outer_iter().enumerate().take(3) {
            sums[ch] += plane.iter().map(|v| v.as_f64()).sum::<f64>();
        }
        n += s.height() * s.width();
    }
    let n = n.max(1) as f64;
    [F::lit(sums[0] / n), F::lit(sums[1] / n), F::lit(sums[2] / n)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(seed: u64, h: usize, w: usize) -> ImageSample<f64> {
        let mut rng = rng_from(seed);
        let px = Array3::from_shape_fn((3, h, w), |_| rng.random_range(0.0..=1.0));
        let mask = Array3::from_shape_fn((2, h, w), |_| u8::from(rng.random::<bool>()));
        ImageSample::new(format!("s{seed}"), px, Some(mask), "target").unwrap()
    }

    #[test]
    fn identity_geometry_is_exact() {
        let s = sample(1, 8, 10);
        assert_eq!(apply_geometry(&s, &GeoRecord::IDENTITY), s);
        let cfg = AugmentConfig {
            flip_prob: 0.0,
            scale_range: [1.0, 1.0],
            ..Default::default()
        };
        let (out, geo) = weak_augment(&s, &mut rng_from(3), &cfg);
        assert_eq!(geo, GeoRecord::IDENTITY);
        assert_eq!(out, s);
    }

    #[test]
    fn hflip_mirrors_columns() {
        let s = sample(2, 6, 7);
        let geo = GeoRecord {
            hflip: true,
            ..GeoRecord::IDENTITY
        };
        let out = apply_geometry(&s, &geo);
        for ch in 0..3 {
            for y in 0..6 {
                for x in 0..7 {
                    assert_eq!(out.pixels[[ch, y, x]], s.pixels[[ch, y, 6 - x]]);
                }
            }
        }
        let m = out.mask.unwrap();
        assert_eq!(m[[1, 2, 0]], s.mask.as_ref().unwrap()[[1, 2, 6]]);
    }

    #[test]
    fn weak_augment_is_deterministic() {
        let s = sample(4, 16, 16);
        let cfg = AugmentConfig::default();
        let a = weak_augment(&s, &mut rng_from(9), &cfg);
        let b = weak_augment(&s, &mut rng_from(9), &cfg);
        assert_eq!(a, b);
    }

    #[test]
    fn strong_no_ops_is_identity() {
        let s = sample(5, 8, 8);
        assert_eq!(apply_strong_ops(&s, &StrongOps::NONE, [0.5; 3], &mut rng_from(0)), s);
        let unit = StrongOps {
            contrast: Some(1.0),
            ..StrongOps::NONE
        };
        let out = apply_strong_ops(&s, &unit, [0.5; 3], &mut rng_from(0));
        for (a, b) in out.pixels.iter().zip(s.pixels.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
        let cfg = AugmentConfig {
            strong_op_prob: 0.0,
            ..Default::default()
        };
        let (out, ops) = strong_augment(&s, &mut rng_from(1), &cfg, [0.5; 3]);
        assert_eq!(ops, StrongOps::NONE);
        assert_eq!(out, s);
    }

    #[test]
    fn erase_changes_exactly_the_rectangle() {
        let s = ImageSample::new("c", Array3::from_elem((3, 32, 32), 0.3), None, "t").unwrap();
        let ops = StrongOps {
            erase: Some(Rect { row0: 0, col0: 0, rows: 10, cols: 10 }),
            ..StrongOps::NONE
        };
        let out = apply_strong_ops(&s, &ops, [0.7; 3], &mut rng_from(0));
        let mut changed = 0;
        for y in 0..32 {
            for x in 0..32 {
                let diff = (0..3).any(|c| out.pixels[[c, y, x]] != s.pixels[[c, y, x]]);
                if diff {
                    changed += 1;
                    assert!(y < 10 && x < 10);
                    assert!((0..3).all(|c| out.pixels[[c, y, x]] == 0.7));
                }
            }
        }
        assert_eq!(changed, 100);
    }

    #[test]
    fn unerased_mask_marks_rectangle() {
        let s = sample(6, 8, 8);
        let mut pair = make_pair(&s, 1, &AugmentConfig::default(), [0.5; 3], false);
        assert!(pair.unerased_mask().is_none());
        pair.strong_ops.erase = Some(Rect { row0: 1, col0: 2, rows: 3, cols: 2 });
        let m = pair.unerased_mask().unwrap();
        assert_eq!(m.iter().filter(|&&v| v == 0).count(), 6);
        assert_eq!(m[[1, 2]], 0);
    }

    proptest! {
        #[test]
        fn pair_is_aligned_in_range_and_deterministic(seed in any::<u64>(), img in 0u64..50) {
            let s = sample(img, 16, 24);
            let cfg = AugmentConfig { strong_op_prob: 1.0, ..Default::default() };
            let a = make_pair(&s, seed, &cfg, [0.4, 0.5, 0.6], true);
            let b = make_pair(&s, seed, &cfg, [0.4, 0.5, 0.6], true);
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.weak_view.pixels.dim(), a.strong_view.pixels.dim());
            // strong ops never move geometry: mask is carried unchanged
            prop_assert_eq!(&a.weak_view.mask, &a.strong_view.mask);
            prop_assert!(a.strong_view.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(a.weak_view.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
            if let Some(r) = a.strong_ops.erase {
                let area = (r.rows * r.cols) as f64 / (16.0 * 24.0);
                prop_assert!(area > 0.0 && area <= 0.2, "area {}", area);
            }
        }
    }
}
