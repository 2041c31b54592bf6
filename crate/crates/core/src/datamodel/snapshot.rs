use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};

use crate::{CbmtError, Result, Scalar};

const MAGIC: &[u8; 8] = b"CBMTCKPT";
const VERSION: u32 = 1;

/// Names ending in these suffixes are normalization buffers, not trainable weights.
const BUFFER_SUFFIXES: [&str; 2] = [".running_mean", ".running_var"];

pub fn is_buffer_key(name: &str) -> bool {
    BUFFER_SUFFIXES.iter().any(|s| name.ends_with(s))
}

/// All trainable parameters and normalization buffers of a model, keyed by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSnapshot<F> {
    pub entries: BTreeMap<String, ArrayD<F>>,
    pub step: u64,
}

impl<F: Scalar> ParamSnapshot<F> {
    pub fn new(entries: BTreeMap<String, ArrayD<F>>, step: u64) -> Self {
        Self { entries, step }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|a| a.len()).sum()
    }

    /// Checks that `other` has exactly the same keys and per-key shapes.
    pub fn check_compatible(&self, other: &ParamSnapshot<F>) -> Result<()> {
        let mut missing = Vec::new();
        let mut reshaped = Vec::new();
        for (k, v) in &self.entries {
            match other.entries.get(k) {
                None => missing.push(k.clone()),
                Some(o) if o.shape() != v.shape() => reshaped.push(k.clone()),
                Some(_) => {}
            }
        }
        let unexpected: Vec<String> = other
            .entries
            .keys()
            .filter(|k| !self.entries.contains_key(*k))
            .cloned()
            .collect();
        if missing.is_empty() && unexpected.is_empty() && reshaped.is_empty() {
            Ok(())
        } else {
            Err(CbmtError::ParamMismatch {
                missing,
                unexpected,
                reshaped,
            })
        }
    }

    /// Name of the first entry containing NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.entries
            .iter()
            .find(|(_, v)| v.iter().any(|x| !x.is_finite()))
            .map(|(k, _)| k.as_str())
    }

    /// Largest absolute elementwise difference to `other` over shared keys.
    pub fn max_abs_diff(&self, other: &ParamSnapshot<F>) -> F {
        let mut m = F::zero();
        for (k, a) in &self.entries {
            if let Some(b) = other.entries.get(k) {
                for (x, y) in a.iter().zip(b.iter()) {
                    m = m.max((*x - *y).abs());
                }
            }
        }
        m
    }

    pub fn cast<G: Scalar>(&self) -> ParamSnapshot<G> {
        ParamSnapshot {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.mapv(|x| G::lit(x.as_f64()))))
                .collect(),
            step: self.step,
        }
    }
}

/// A snapshot plus the digest of the config that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<F> {
    pub params: ParamSnapshot<F>,
    pub config_hash: u64,
}

impl<F: Scalar> Checkpoint<F> {
    /// Little-endian binary layout: magic, version, config hash, step, then
    /// each entry as name, rank, dims and `f64` values.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u64::<LittleEndian>(self.config_hash)?;
        w.write_u64::<LittleEndian>(self.params.step)?;
        w.write_u32::<LittleEndian>(self.params.entries.len() as u32)?;
        for (name, arr) in &self.params.entries {
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_u32::<LittleEndian>(arr.ndim() as u32)?;
            for &d in arr.shape() {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
            for &x in arr.iter() {
                w.write_f64::<LittleEndian>(x.as_f64())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let bad = |m: &str| CbmtError::InvalidArgument(format!("checkpoint: {m}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let config_hash = r.read_u64::<LittleEndian>()?;
        let step = r.read_u64::<LittleEndian>()?;
        let n = r.read_u32::<LittleEndian>()?;
        let mut entries = BTreeMap::new();
        for _ in 0..n {
            let len = r.read_u32::<LittleEndian>()? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| bad("non-utf8 name"))?;
            let ndim = r.read_u32::<LittleEndian>()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.read_u64::<LittleEndian>()? as usize);
            }
            let count: usize = shape.iter().product();
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                data.push(F::lit(r.read_f64::<LittleEndian>()?));
            }
            let arr = ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|e| bad(&e.to_string()))?;
            entries.insert(name, arr);
        }
        Ok(Self {
            params: ParamSnapshot { entries, step },
            config_hash,
        })
    }
}

pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    params: &ParamSnapshot<F>,
    config_hash: u64,
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| CbmtError::file(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    Checkpoint {
        params: params.clone(),
        config_hash,
    }
    .write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<Checkpoint<F>> {
    let file = std::fs::File::open(path).map_err(|e| CbmtError::file(path, e))?;
    Checkpoint::read_from(std::io::BufReader::new(file)).map_err(|e| CbmtError::file(path, e))
}
