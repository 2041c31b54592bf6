//! Fundus-like synthetic images with exact disc and cup masks.
//!
//! Each image has a vignetted, textured orange background, a handful of dark
//! vessels radiating from the disc, a bright elliptical disc with a crisp rim
//! and a brighter cup whose edge is deliberately soft. Target-domain images
//! come from the same anatomical process followed by a photometric shift.

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Luma};
use ndarray::{Array2, Array3};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{save_mask_png, save_rgb_png, DatasetManifest, ManifestEntry, Split};
use crate::datamodel::ImageSample;
use crate::rng::{derive_seed, rng_from, Rng};
use crate::{CbmtError, Result, Scalar};

/// Photometric change applied to target images, in this order: per-channel
/// gain and contrast about mid-gray, brightness offset, Gaussian blur.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainShift {
    pub contrast_scale: f64,
    pub brightness_shift: f64,
    pub blur_sigma: f64,
    pub color_gain: [f64; 3],
    /// Reseeds the background texture; 0 keeps the source texture stream.
    pub texture_seed: u64,
}

impl DomainShift {
    pub const IDENTITY: DomainShift = DomainShift {
        contrast_scale: 1.0,
        brightness_shift: 0.0,
        blur_sigma: 0.0,
        color_gain: [1.0; 3],
        texture_seed: 0,
    };

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    fn apply(&self, px: &mut Array3<f32>) {
        if self.is_identity() {
            return;
        }
        for (c, mut plane) in px.outer_iter_mut().enumerate() {
            let g = self.color_gain[c] as f32;
            let k = self.contrast_scale as f32;
            let b = self.brightness_shift as f32;
            plane.mapv_inplace(|v| g * ((v - 0.5) * k + 0.5) + b);
            if self.blur_sigma > 0.0 {
                let blurred = blur(&plane.to_owned(), self.blur_sigma as f32);
                plane.assign(&blurred);
            }
            plane.mapv_inplace(|v| v.clamp(0.0, 1.0));
        }
    }
}

impl Default for DomainShift {
    fn default() -> Self {
        Self::IDENTITY
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    /// Images in each training split (labeled source, unlabeled target).
    pub n_images: usize,
    /// Labeled images in the target test split.
    pub n_test: usize,
    /// `[height, width]`.
    pub image_size: [usize; 2],
    /// Disc radius in pixels.
    pub disc_radius_range: [f64; 2],
    /// Cup radius as a fraction of the disc radius.
    pub cup_ratio_range: [f64; 2],
    /// Width in pixels of the cup's soft edge.
    pub cup_edge_width: f64,
    pub domain_shift: DomainShift,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_images: 64,
            n_test: 32,
            image_size: [128, 128],
            disc_radius_range: [24.0, 34.0],
            cup_ratio_range: [0.28, 0.42],
            cup_edge_width: 2.5,
            domain_shift: DomainShift {
                contrast_scale: 1.0,
                brightness_shift: 0.0,
                blur_sigma: 0.0,
                color_gain: [0.9, 1.15, 1.25],
                texture_seed: 1,
            },
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.cup_ratio_range;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(CbmtError::config("cup_ratio_range", "must lie inside (0,1) with lo <= hi"));
        }
        let [rlo, rhi] = self.disc_radius_range;
        let [h, w] = self.image_size;
        if !(rlo > 0.0 && rlo <= rhi) {
            return Err(CbmtError::config("disc_radius_range", "must be positive with lo <= hi"));
        }
        if 2.6 * rhi >= h.min(w) as f64 {
            return Err(CbmtError::config("disc_radius_range", "disc does not fit the image"));
        }
        if self.n_images == 0 {
            return Err(CbmtError::config("n_images", "must be positive"));
        }
        if !(self.cup_edge_width > 0.0) {
            return Err(CbmtError::config("cup_edge_width", "must be positive"));
        }
        let s = &self.domain_shift;
        if !(s.contrast_scale > 0.0 && s.blur_sigma >= 0.0 && s.color_gain.iter().all(|g| *g > 0.0)) {
            return Err(CbmtError::config("domain_shift", "contrast and gains must be positive, blur nonnegative"));
        }
        Ok(())
    }
}

/// The three splits of a synthetic benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthData<F> {
    pub source_train: Vec<ImageSample<F>>,
    /// Unlabeled: masks are dropped.
    pub target_train: Vec<ImageSample<F>>,
    pub target_test: Vec<ImageSample<F>>,
}

fn blur(plane: &Array2<f32>, sigma: f32) -> Array2<f32> {
    let (h, w) = plane.dim();
    let img: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_raw(w as u32, h as u32, plane.iter().copied().collect()).expect("buffer size");
    let out = image::imageops::blur(&img, sigma);
    Array2::from_shape_vec((h, w), out.into_raw()).expect("buffer size")
}

fn gaussian_field(rng: &mut Rng, h: usize, w: usize, sigma: f32) -> Array2<f32> {
    let noise = Array2::from_shape_simple_fn((h, w), || {
        let z: f32 = StandardNormal.sample(rng);
        z
    });
    let mut field = blur(&noise, sigma);
    let sd = (field.iter().map(|v| v * v).sum::<f32>() / (h * w) as f32).sqrt().max(1e-6);
    field.mapv_inplace(|v| v / sd);
    field
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Ellipse {
    /// Approximate signed distance in pixels, negative inside.
    fn signed_distance(&self, y: f64, x: f64) -> f64 {
        let d = (((y - self.cy) / self.ry).powi(2) + ((x - self.cx) / self.rx).powi(2)).sqrt();
        (d - 1.0) * self.ry.min(self.rx)
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        ((y - self.cy) / self.ry).powi(2) + ((x - self.cx) / self.rx).powi(2) <= 1.0
    }
}

fn draw_vessels(rng: &mut Rng, shade: &mut Array2<f32>, disc: &Ellipse) {
    let (h, w) = shade.dim();
    let n = rng.random_range(5..=8);
    for i in 0..n {
        let mut angle = std::f64::consts::TAU * (i as f64 + rng.random_range(0.0..0.8)) / n as f64;
        let width: f64 = rng.random_range(0.8..1.8);
        let depth = rng.random_range(0.25..0.45) as f32;
        let (mut y, mut x) = (
            disc.cy + rng.random_range(-0.3..0.3) * disc.ry,
            disc.cx + rng.random_range(-0.3..0.3) * disc.rx,
        );
        let bend = rng.random_range(-0.01..0.01);
        for _ in 0..(h + w) {
            angle += bend + rng.random_range(-0.03..0.03);
            y += angle.sin();
            x += angle.cos();
            if y < -3.0 || x < -3.0 || y > h as f64 + 3.0 || x > w as f64 + 3.0 {
                break;
            }
            let r = width.ceil() as i64 + 1;
            for yy in (y as i64 - r)..=(y as i64 + r) {
                for xx in (x as i64 - r)..=(x as i64 + r) {
                    if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                        continue;
                    }
                    let d = ((yy as f64 - y).powi(2) + (xx as f64 - x).powi(2)).sqrt();
                    let a = (sigmoid((width - d) * 3.0) as f32) * depth;
                    let s = &mut shade[[yy as usize, xx as usize]];
                    *s = s.min(1.0 - a);
                }
            }
        }
    }
}

/// Renders one image and its `2 × H × W` mask.
fn render(spec: &SynthSpec, anatomy_seed: u64, texture_seed: u64) -> (Array3<f32>, Array3<u8>) {
    let [h, w] = spec.image_size;
    let mut rng = rng_from(anatomy_seed);
    let [rlo, rhi] = spec.disc_radius_range;
    let r = if rhi > rlo { rng.random_range(rlo..=rhi) } else { rlo };
    let margin = 1.2 * r;
    let jitter = |rng: &mut Rng, n: usize| {
        let c = n as f64 / 2.0 + rng.random_range(-0.08..0.08) * n as f64;
        c.clamp(margin, n as f64 - margin)
    };
    let disc = Ellipse {
        cy: jitter(&mut rng, h),
        cx: jitter(&mut rng, w),
        ry: r * rng.random_range(0.92..1.08),
        rx: r * rng.random_range(0.92..1.08),
    };
    let [clo, chi] = spec.cup_ratio_range;
    let ratio = if chi > clo { rng.random_range(clo..=chi) } else { clo };
    let slack = (1.0 - ratio) * 0.3;
    let cup = Ellipse {
        cy: disc.cy + rng.random_range(-slack..=slack) * disc.ry,
        cx: disc.cx + rng.random_range(-slack..=slack) * disc.rx,
        ry: ratio * disc.ry * rng.random_range(0.92..1.08),
        rx: ratio * disc.rx * rng.random_range(0.92..1.08),
    };
    let tint = [rng.random_range(-0.05..0.05), rng.random_range(-0.04..0.04), rng.random_range(-0.03..0.03)];
    let disc_color = [0.86 + tint[0], 0.60 + tint[1], 0.36 + tint[2]];
    let cup_color = [0.97, 0.84 + tint[1], 0.66 + tint[2]];
    let bg_color = [0.62 + tint[0], 0.30 + tint[1], 0.14 + tint[2]];

    let mut shade = Array2::from_elem((h, w), 1.0f32);
    draw_vessels(&mut rng, &mut shade, &disc);

    let mut trng = rng_from(texture_seed);
    let coarse = gaussian_field(&mut trng, h, w, 6.0);
    let fine = gaussian_field(&mut trng, h, w, 1.0);

    let mut px = Array3::zeros((3, h, w));
    let mut mask = Array3::zeros((2, h, w));
    let (hc, wc) = (h as f64 / 2.0, w as f64 / 2.0);
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f64, x as f64);
            let rr = ((fy - hc) / hc).powi(2) + ((fx - wc) / wc).powi(2);
            let vignette = 1.0 - 0.35 * rr.min(1.5);
            let tex = 0.06 * coarse[[y, x]] as f64 + 0.025 * fine[[y, x]] as f64;
            let a_disc = sigmoid(-disc.signed_distance(fy, fx) / 0.7);
            let a_cup = sigmoid(-cup.signed_distance(fy, fx) / (spec.cup_edge_width / 2.0)) * a_disc;
            for c in 0..3 {
                let bg = bg_color[c] * vignette * (1.0 + tex);
                let v = bg * (1.0 - a_disc) + disc_color[c] * (1.0 + 0.5 * tex) * a_disc;
                let v = v * (1.0 - a_cup) + cup_color[c] * a_cup;
                px[[c, y, x]] = (v as f32 * shade[[y, x]]).clamp(0.0, 1.0);
            }
            let in_disc = disc.contains(fy, fx);
            mask[[0, y, x]] = in_disc as u8;
            mask[[1, y, x]] = (in_disc && cup.contains(fy, fx)) as u8;
        }
    }
    (px, mask)
}

fn to_sample<F: Scalar>(id: String, px: &Array3<f32>, mask: Option<Array3<u8>>, domain: &str) -> ImageSample<F> {
    let pixels = px.mapv(|v| F::lit(v as f64));
    ImageSample::new(id, pixels, mask, domain).expect("rendered values are in range")
}

/// Renders the three splits in memory. Identical specs give identical data.
pub fn synthesize<F: Scalar>(spec: &SynthSpec) -> Result<SynthData<F>> {
    spec.validate()?;
    let shift = &spec.domain_shift;
    let make = |prefix: &str, i: usize, shifted: bool| {
        let id = format!("{prefix}_{i:04}");
        let anatomy = derive_seed(spec.seed, &id, 0);
        let texture_base = if shifted { shift.texture_seed } else { 0 };
        let texture = derive_seed(spec.seed ^ texture_base.rotate_left(17), &id, 1);
        let (mut px, mask) = render(spec, anatomy, texture);
        if shifted {
            shift.apply(&mut px);
        }
        (id, px, mask)
    };
    let source_train = (0..spec.n_images)
        .map(|i| {
            let (id, px, mask) = make("src", i, false);
            to_sample(id, &px, Some(mask), "source")
        })
        .collect();
    let target_train = (0..spec.n_images)
        .map(|i| {
            let (id, px, _) = make("tgt", i, true);
            to_sample(id, &px, None, "target")
        })
        .collect();
    let target_test = (0..spec.n_test)
        .map(|i| {
            let (id, px, mask) = make("test", i, true);
            to_sample(id, &px, Some(mask), "target")
        })
        .collect();
    Ok(SynthData {
        source_train,
        target_train,
        target_test,
    })
}

/// Manifests written by [`write_synthetic`].
#[derive(Clone, Debug, PartialEq)]
pub struct SynthManifests {
    pub source_train: DatasetManifest,
    pub target_train: DatasetManifest,
    pub target_test: DatasetManifest,
}

/// Writes PNGs and `source_train.csv`, `target_train.csv`, `target_test.csv` under `out`.
pub fn write_synthetic<F: Scalar>(data: &SynthData<F>, out: &Path) -> Result<SynthManifests> {
    let write_split = |name: &str, split: Split, samples: &[ImageSample<F>]| -> Result<DatasetManifest> {
        let dir = out.join(name);
        fs::create_dir_all(&dir).map_err(|e| CbmtError::file(&dir, e))?;
        let mut entries = Vec::new();
        for s in samples {
            let image = Path::new(name).join(format!("{}.png", s.id));
            save_rgb_png(&s.pixels, &out.join(&image))?;
            let mask = match &s.mask {
                Some(m) => {
                    let p = Path::new(name).join(format!("{}_mask.png", s.id));
                    save_mask_png(m, &out.join(&p))?;
                    Some(p)
                }
                None => None,
            };
            entries.push(ManifestEntry {
                id: s.id.clone(),
                image,
                mask,
            });
        }
        let size = samples.first().map_or([0, 0], |s| [s.height(), s.width()]);
        let manifest = DatasetManifest {
            root: out.to_path_buf(),
            split,
            entries,
            roi_size: size,
        };
        let path = out.join(format!("{name}.csv"));
        fs::write(&path, manifest.to_text()).map_err(|e| CbmtError::file(&path, e))?;
        Ok(manifest)
    };
    Ok(SynthManifests {
        source_train: write_split("source_train", Split::Train, &data.source_train)?,
        target_train: write_split("target_train", Split::Train, &data.target_train)?,
        target_test: write_split("target_test", Split::Test, &data.target_test)?,
    })
}

/// Renders a benchmark and writes it to disk.
pub fn generate_synthetic(spec: &SynthSpec, out: &Path) -> Result<SynthManifests> {
    let data = synthesize::<f32>(spec)?;
    write_synthetic(&data, out)
}
