//! Dataset manifests, image and mask decoding, and the synthetic benchmark.
//!
//! A manifest is a text file with one entry per line, `id,image_path,mask_path`,
//! where the mask path may be empty. Relative paths resolve against the
//! manifest's directory. Blank lines and lines starting with `#` are ignored.

mod synth;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{GrayImage, RgbImage};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::datamodel::ImageSample;
use crate::{CbmtError, Result, Scalar};

pub use synth::{generate_synthetic, synthesize, write_synthetic, DomainShift, SynthData, SynthManifests, SynthSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
    pub roi_size: [usize; 2],
}

impl DatasetManifest {
    pub fn parse(text: &str, root: &Path, split: Split, roi_size: [usize; 2]) -> Result<Self> {
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |message: String| CbmtError::Parse {
                what: "manifest".into(),
                line: i + 1,
                message,
            };
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if !(2..=3).contains(&fields.len()) || fields[0].is_empty() || fields[1].is_empty() {
                return Err(parse_err(format!("expected `id,image_path,mask_path?`, got `{line}`")));
            }
            if !seen.insert(fields[0].to_string()) {
                return Err(parse_err(format!("duplicate id `{}`", fields[0])));
            }
            let mask = fields.get(2).filter(|m| !m.is_empty()).map(PathBuf::from);
            entries.push(ManifestEntry {
                id: fields[0].to_string(),
                image: PathBuf::from(fields[1]),
                mask,
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            split,
            entries,
            roi_size,
        })
    }

    pub fn read(path: &Path, split: Split, roi_size: [usize; 2]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CbmtError::file(path, e))?;
        let root = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, root, split, roi_size)
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| {
                let mask = e.mask.as_ref().map(|m| m.display().to_string()).unwrap_or_default();
                format!("{},{},{}\n", e.id, e.image.display(), mask)
            })
            .collect()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Checks that every referenced file exists.
    pub fn check_files(&self) -> Result<()> {
        for e in &self.entries {
            for p in std::iter::once(&e.image).chain(e.mask.iter()) {
                let full = self.resolve(p);
                if !full.is_file() {
                    return Err(CbmtError::file(&full, "file not found"));
                }
            }
        }
        Ok(())
    }
}

/// Gray levels of the single-channel mask encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskLevels {
    pub background: u8,
    pub disc: u8,
    pub cup: u8,
}

impl Default for MaskLevels {
    fn default() -> Self {
        Self {
            background: 0,
            disc: 128,
            cup: 255,
        }
    }
}

impl MaskLevels {
    /// File name of the optional override placed next to the manifest.
    pub const SIDECAR: &'static str = "mask_levels.json";

    fn check(&self) -> Result<()> {
        let (b, d, c) = (self.background, self.disc, self.cup);
        if (b < d && d < c) || (b > d && d > c) {
            Ok(())
        } else {
            Err(CbmtError::config("mask_levels", "levels must be strictly monotone background→disc→cup"))
        }
    }

    /// Decodes a gray value into (disc, cup) membership.
    ///
    /// With increasing levels a value belongs to the disc when it is at least
    /// the disc level and to the cup when it is at least the cup level;
    /// decreasing levels mirror the comparisons.
    pub fn decode_value(&self, v: u8) -> (bool, bool) {
        if self.background < self.disc {
            (v >= self.disc, v >= self.cup)
        } else {
            (v <= self.disc, v <= self.cup)
        }
    }
}

/// `2 × H × W` disc/cup mask from gray values.
pub fn decode_mask(gray: &ndarray::Array2<u8>, levels: &MaskLevels) -> Result<Array3<u8>> {
    levels.check()?;
    let (h, w) = gray.dim();
    let mut out = Array3::zeros((2, h, w));
    for ((y, x), &v) in gray.indexed_iter() {
        let (disc, cup) = levels.decode_value(v);
        out[[0, y, x]] = disc as u8;
        out[[1, y, x]] = cup as u8;
    }
    Ok(out)
}

/// Inverse of [`decode_mask`]; requires the cup to lie inside the disc.
pub fn encode_mask(mask: &Array3<u8>, levels: &MaskLevels) -> Result<ndarray::Array2<u8>> {
    levels.check()?;
    let (c, h, w) = mask.dim();
    if c != 2 {
        return Err(CbmtError::Shape(format!("mask encoding needs 2 channels, got {c}")));
    }
    let mut out = ndarray::Array2::from_elem((h, w), levels.background);
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] = match (mask[[0, y, x]] != 0, mask[[1, y, x]] != 0) {
                (_, true) if mask[[0, y, x]] == 0 => {
                    return Err(CbmtError::InvalidArgument(format!("cup pixel ({y},{x}) outside disc")))
                }
                (_, true) => levels.cup,
                (true, false) => levels.disc,
                (false, false) => levels.background,
            };
        }
    }
    Ok(out)
}

fn fit_roi<P: image::Pixel + 'static>(
    img: image::ImageBuffer<P, Vec<P::Subpixel>>,
    roi: [usize; 2],
    filter: FilterType,
) -> image::ImageBuffer<P, Vec<P::Subpixel>> {
    let (w, h) = img.dimensions();
    let (rh, rw) = (roi[0] as u32, roi[1] as u32);
    if (w, h) == (rw, rh) {
        img
    } else if w >= rw && h >= rh {
        image::imageops::crop_imm(&img, (w - rw) / 2, (h - rh) / 2, rw, rh).to_image()
    } else {
        image::imageops::resize(&img, rw, rh, filter)
    }
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| CbmtError::file(path, e))
}

fn rgb_to_array<F: Scalar>(img: &RgbImage) -> Array3<F> {
    let (w, h) = img.dimensions();
    let scale = F::lit(1.0 / 255.0);
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        F::lit(img.get_pixel(x as u32, y as u32)[c] as f64) * scale
    })
}

fn gray_to_array(img: &GrayImage) -> ndarray::Array2<u8> {
    let (w, h) = img.dimensions();
    ndarray::Array2::from_shape_fn((h as usize, w as usize), |(y, x)| img.get_pixel(x as u32, y as u32)[0])
}

/// Reads the level override next to the manifest, if present.
pub fn read_mask_levels(root: &Path) -> Result<MaskLevels> {
    let path = root.join(MaskLevels::SIDECAR);
    if !path.is_file() {
        return Ok(MaskLevels::default());
    }
    let text = fs::read_to_string(&path).map_err(|e| CbmtError::file(&path, e))?;
    let levels: MaskLevels = serde_json::from_str(&text).map_err(|e| CbmtError::file(&path, e))?;
    levels.check()?;
    Ok(levels)
}

fn load_entry<F: Scalar>(m: &DatasetManifest, e: &ManifestEntry, levels: &MaskLevels) -> Result<ImageSample<F>> {
    let img_path = m.resolve(&e.image);
    let img = open_image(&img_path)?.to_rgb8();
    let raw_dims = img.dimensions();
    let pixels = rgb_to_array::<F>(&fit_roi(img, m.roi_size, FilterType::Triangle));
    let mask = match &e.mask {
        None => None,
        Some(p) => {
            let path = m.resolve(p);
            let gray = open_image(&path)?.to_luma8();
            if gray.dimensions() != raw_dims {
                return Err(CbmtError::file(
                    &path,
                    format!("mask is {:?} but image is {:?}", gray.dimensions(), raw_dims),
                ));
            }
            let gray = fit_roi(gray, m.roi_size, FilterType::Nearest);
            Some(decode_mask(&gray_to_array(&gray), levels)?)
        }
    };
    ImageSample::new(e.id.clone(), pixels, mask, m.split.as_str())
}

/// Lazily decodes the samples of a manifest in order.
pub fn load_dataset<F: Scalar>(manifest: &DatasetManifest) -> Result<impl Iterator<Item = Result<ImageSample<F>>> + '_> {
    manifest.check_files()?;
    let levels = read_mask_levels(&manifest.root)?;
    Ok(manifest.entries.iter().map(move |e| load_entry(manifest, e, &levels)))
}

/// Reads a manifest file and decodes every sample.
pub fn load_manifest_samples<F: Scalar>(path: &Path, split: Split, roi_size: [usize; 2]) -> Result<Vec<ImageSample<F>>> {
    let manifest = DatasetManifest::read(path, split, roi_size)?;
    let samples = load_dataset(&manifest)?.collect();
    samples
}

/// Writes pixels as an 8-bit RGB PNG.
pub fn save_rgb_png<F: Scalar>(pixels: &Array3<F>, path: &Path) -> Result<()> {
    let (_, h, w) = pixels.dim();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let q = |c: usize| (pixels[[c, y as usize, x as usize]].as_f64() * 255.0).round().clamp(0.0, 255.0) as u8;
        image::Rgb([q(0), q(1), q(2)])
    });
    img.save(path).map_err(|e| CbmtError::file(path, e))
}

/// Writes a disc/cup mask as a single-channel PNG with the default levels.
pub fn save_mask_png(mask: &Array3<u8>, path: &Path) -> Result<()> {
    let gray = encode_mask(mask, &MaskLevels::default())?;
    let (h, w) = gray.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([gray[[y as usize, x as usize]]]));
    img.save(path).map_err(|e| CbmtError::file(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn mask_codec_round_trip() {
        let gray = array![[0u8, 128, 255, 0], [128, 255, 255, 128], [0, 128, 128, 0], [0, 0, 0, 0]];
        let m = decode_mask(&gray, &MaskLevels::default()).unwrap();
        assert_eq!(m[[0, 0, 1]], 1);
        assert_eq!(m[[1, 0, 1]], 0);
        assert_eq!(m[[0, 0, 2]], 1);
        assert_eq!(m[[1, 0, 2]], 1);
        assert_eq!(m[[0, 0, 0]], 0);
        assert_eq!(encode_mask(&m, &MaskLevels::default()).unwrap(), gray);
    }

    #[test]
    fn inverted_levels() {
        let levels = MaskLevels {
            background: 255,
            disc: 128,
            cup: 0,
        };
        let gray = array![[255u8, 128, 0]];
        let m = decode_mask(&gray, &levels).unwrap();
        assert_eq!(m.index_axis(ndarray::Axis(0), 0).iter().copied().collect::<Vec<_>>(), vec![0, 1, 1]);
        assert_eq!(m.index_axis(ndarray::Axis(0), 1).iter().copied().collect::<Vec<_>>(), vec![0, 0, 1]);
        assert_eq!(encode_mask(&m, &levels).unwrap(), gray);
        let bad = MaskLevels {
            background: 0,
            disc: 255,
            cup: 128,
        };
        assert!(decode_mask(&gray, &bad).is_err());
    }

    #[test]
    fn cup_outside_disc_is_rejected() {
        let mut m = Array3::<u8>::zeros((2, 2, 2));
        m[[1, 0, 0]] = 1;
        assert!(encode_mask(&m, &MaskLevels::default()).is_err());
    }

    #[test]
    fn manifest_parsing() {
        let text = "# comment\na,img/a.png,mask/a.png\n\nb,img/b.png,\nc,img/c.png\n";
        let m = DatasetManifest::parse(text, Path::new("/data"), Split::Train, [8, 8]).unwrap();
        assert_eq!(m.entries.len(), 3);
        assert_eq!(m.entries[1].mask, None);
        assert_eq!(m.entries[2].mask, None);
        assert_eq!(m.resolve(&m.entries[0].image), PathBuf::from("/data/img/a.png"));
        let dup = DatasetManifest::parse("a,x.png\na,y.png\n", Path::new("."), Split::Test, [8, 8]);
        assert!(matches!(dup, Err(CbmtError::Parse { line: 2, .. })));
        let bad = DatasetManifest::parse("only_id\n", Path::new("."), Split::Test, [8, 8]);
        assert!(matches!(bad, Err(CbmtError::Parse { line: 1, .. })));
    }

    #[test]
    fn png_round_trip_and_roi() {
        let dir = tempfile::tempdir().unwrap();
        let px = Array3::from_shape_fn((3, 8, 8), |(c, y, x)| ((c * 64 + y * 8 + x) % 256) as f64 / 255.0);
        let mut mask = Array3::<u8>::zeros((2, 8, 8));
        mask.slice_mut(ndarray::s![0, 2..6, 2..6]).fill(1);
        mask.slice_mut(ndarray::s![1, 3..5, 3..5]).fill(1);
        save_rgb_png(&px, &dir.path().join("a.png")).unwrap();
        save_mask_png(&mask, &dir.path().join("a_mask.png")).unwrap();
        save_rgb_png(&px, &dir.path().join("b.png")).unwrap();
        let text = "a,a.png,a_mask.png\nb,b.png,\n";
        fs::write(dir.path().join("m.csv"), text).unwrap();

        let s: Vec<ImageSample<f64>> = load_manifest_samples(&dir.path().join("m.csv"), Split::Train, [8, 8]).unwrap();
        assert_eq!(s.len(), 2);
        assert!(s[0].pixels.iter().zip(px.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        assert_eq!(s[0].mask.as_ref().unwrap(), &mask);
        assert!(s[1].mask.is_none());

        let cropped: Vec<ImageSample<f64>> =
            load_manifest_samples(&dir.path().join("m.csv"), Split::Train, [4, 4]).unwrap();
        assert_eq!(cropped[0].mask.as_ref().unwrap().dim(), (2, 4, 4));
        assert_eq!(cropped[0].pixels[[0, 0, 0]], px[[0, 2, 2]]);
        assert_eq!(cropped[0].mask.as_ref().unwrap()[[1, 1, 1]], 1);

        let up: Vec<ImageSample<f64>> =
            load_manifest_samples(&dir.path().join("m.csv"), Split::Train, [16, 16]).unwrap();
        assert_eq!(up[0].pixels.dim(), (3, 16, 16));

        fs::write(dir.path().join("missing.csv"), "z,nope.png,\n").unwrap();
        let err = load_manifest_samples::<f64>(&dir.path().join("missing.csv"), Split::Test, [8, 8]).unwrap_err();
        assert!(err.to_string().contains("nope.png"));
    }

    #[test]
    fn mask_size_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        save_rgb_png(&Array3::<f64>::zeros((3, 8, 8)), &dir.path().join("a.png")).unwrap();
        save_mask_png(&Array3::<u8>::zeros((2, 4, 4)), &dir.path().join("m.png")).unwrap();
        fs::write(dir.path().join("x.csv"), "a,a.png,m.png\n").unwrap();
        assert!(load_manifest_samples::<f32>(&dir.path().join("x.csv"), Split::Test, [8, 8]).is_err());
    }

    #[test]
    fn sidecar_overrides_levels() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join(MaskLevels::SIDECAR),
            r#"{"background":255,"disc":128,"cup":0}"#,
        )
        .unwrap();
        assert_eq!(read_mask_levels(dir.path()).unwrap().cup, 0);
        assert_eq!(read_mask_levels(Path::new("/nonexistent")).unwrap(), MaskLevels::default());
    }
}
