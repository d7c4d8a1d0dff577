//! `FEMTO1\0` weight archives.
//!
//! Layout (all integers u32 little-endian, no padding):
//! magic `FEMTO1\0\0`, tensor count, then per tensor: name length, UTF-8
//! name, ndim, dims, and `product(dims)` f32 LE values.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::error::{FemtoError, Result};
use crate::layers::{ParamRole, Parameterized};
use crate::net::config::ModelConfig;
use crate::net::model::FemtoDet;
use crate::tensor::Scalar;

pub const MAGIC: &[u8; 8] = b"FEMTO1\0\0";

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightArchive {
    pub tensors: Vec<ArchiveTensor>,
}

fn err(offset: usize, msg: impl Into<String>) -> FemtoError {
    FemtoError::Archive {
        offset,
        msg: msg.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(err(self.pos, format!("truncated {what}: need {n} bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

fn to_u32(v: usize, what: &str) -> Result<[u8; 4]> {
    u32::try_from(v)
        .map(u32::to_le_bytes)
        .map_err(|_| FemtoError::InvalidArgument(format!("{what} {v} does not fit in u32")))
}

impl WeightArchive {
    /// Every named parameter and buffer of `model`, in visit order.
    pub fn from_params<T: Scalar, P: Parameterized<T> + ?Sized>(model: &P) -> Self {
        let mut tensors = Vec::new();
        model.visit("", &mut |name, dims, data, _| {
            tensors.push(ArchiveTensor {
                name: name.to_string(),
                dims: dims.to_vec(),
                values: data.iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect(),
            })
        });
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&ArchiveTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Copies values into `model`; the archive must name exactly the
    /// model's tensors with matching dims.
    pub fn apply_to<T: Scalar, P: Parameterized<T> + ?Sized>(&self, model: &mut P) -> Result<()> {
        self.validate()?;
        let mut seen = 0usize;
        let mut failure = None;
        model.visit_mut("", &mut |name, dims, data, _| {
            if failure.is_some() {
                return;
            }
            match self.get(name) {
                None => failure = Some(format!("archive has no tensor `{name}`")),
                Some(t) if t.dims != dims => {
                    failure = Some(format!("tensor `{name}`: archive dims {:?}, model dims {dims:?}", t.dims))
                }
                Some(t) => {
                    seen += 1;
                    for (d, &v) in data.iter_mut().zip(&t.values) {
                        *d = T::of(v as f64);
                    }
                }
            }
        });
        if let Some(msg) = failure {
            return Err(FemtoError::InvalidArgument(msg));
        }
        if seen != self.tensors.len() {
            return Err(FemtoError::InvalidArgument(format!(
                "archive has {} tensors, model uses {seen}",
                self.tensors.len()
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        for t in &self.tensors {
            if !names.insert(t.name.as_str()) {
                return Err(FemtoError::InvalidArgument(format!("duplicate tensor name `{}`", t.name)));
            }
            let n: usize = t.dims.iter().product();
            if n != t.values.len() {
                return Err(FemtoError::InvalidArgument(format!(
                    "tensor `{}`: dims {:?} need {n} values, have {}",
                    t.name,
                    t.dims,
                    t.values.len()
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::with_capacity(16 + self.tensors.iter().map(|t| 16 + t.name.len() + 4 * t.values.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&to_u32(self.tensors.len(), "tensor count")?);
        for t in &self.tensors {
            out.extend_from_slice(&to_u32(t.name.len(), "name length")?);
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&to_u32(t.dims.len(), "ndim")?);
            for &d in &t.dims {
                out.extend_from_slice(&to_u32(d, "dim")?);
            }
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(err(0, "bad magic, expected FEMTO1"));
        }
        r.pos = MAGIC.len();
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        let mut names = HashSet::new();
        for _ in 0..count {
            let at = r.pos;
            let len = r.u32("name length")?;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| err(at + 4, "name is not UTF-8"))?
                .to_string();
            if !names.insert(name.clone()) {
                return Err(err(at, format!("duplicate tensor name `{name}`")));
            }
            let ndim = r.u32("ndim")?;
            let mut dims = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                dims.push(r.u32("dim")?);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| err(r.pos, "tensor size overflows"))?;
            let raw = r.take(n, "values")?;
            let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push(ArchiveTensor { name, dims, values });
        }
        if r.pos != bytes.len() {
            return Err(err(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// The model config lives next to the archive with a `.toml` extension.
pub fn sidecar_path(archive: &Path) -> PathBuf {
    archive.with_extension("toml")
}

pub fn save_model<T: Scalar>(model: &FemtoDet<T>, path: &Path) -> Result<()> {
    WeightArchive::from_params(model).save(path)?;
    std::fs::write(sidecar_path(path), model.config.to_toml_string())?;
    Ok(())
}

/// Builds the skeleton described by the sidecar config and fills it from
/// the archive. Loaded models are in eval mode.
pub fn load_model(path: &Path) -> Result<FemtoDet<f32>> {
    let cfg_path = sidecar_path(path);
    let text = std::fs::read_to_string(&cfg_path)
        .map_err(|e| FemtoError::Io(format!("{}: {e}", cfg_path.display())))?;
    let config = ModelConfig::from_toml_str(&text)?;
    let archive = WeightArchive::load(path)?;
    model_from_archive(&config, &archive)
}

pub fn model_from_archive(config: &ModelConfig, archive: &WeightArchive) -> Result<FemtoDet<f32>> {
    let mut model = FemtoDet::<f32>::from_seed(config, 0)?;
    archive.apply_to(&mut model)?;
    Ok(model)
}

/// Trainable-only view, used to compare checkpoints.
pub fn trainable_values<T: Scalar, P: Parameterized<T> + ?Sized>(model: &P) -> Vec<(String, Vec<T>)> {
    let mut out = Vec::new();
    model.visit("", &mut |name, _, d, role| {
        if role == ParamRole::Trainable {
            out.push((name.to_string(), d.to_vec()));
        }
    });
    out
}
