//! On-disk formats.
//!
//! # Tensor container
//!
//! ```text
//! magic            8 bytes   "CGMFTNSR"
//! header_length    u64 LE
//! header           header_length bytes of UTF-8 JSON
//! blob             little-endian tensor payload
//! ```
//!
//! The header is a JSON object
//! `{"format_version":1,"blob_length":B,"tensors":{name:{"dtype","shape","byte_offset","byte_length"}}}`
//! with tensors listed in payload order. Offsets are relative to the start of
//! the blob, ascending and densely packed from 0; `byte_length` equals the
//! element count times 4 (`"f32"`) or 8 (`"f64"`). Writers emit compact JSON,
//! so re-serializing a loaded canonical file reproduces it byte for byte.
//!
//! # Config file
//!
//! TOML with the [`FusionConfig`] fields at the top level, an optional
//! `seed`, and an optional `[toggles]` table.
//!
//! Saving over an existing path is not synchronized; callers needing
//! concurrent writers must serialize access themselves.

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cgmf::{CgmfWeights, ConfigError, FusionConfig, FusionInputs, ModuleMut, Toggles};
use crate::tensor::{LayerNormParams, LinearMap, TokenTensor};

pub const MAGIC: &[u8; 8] = b"CGMFTNSR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt container: {0}")]
    Corrupt(String),
    #[error("unsupported container format version {0}")]
    Version(u32),
    #[error("tensor `{name}`: shape {actual:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("missing tensor `{0}`")]
    Missing(String),
    #[error("unexpected tensor(s) in container: {}", .0.join(", "))]
    Unexpected(Vec<String>),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("config syntax: {0}")]
    ConfigSyntax(String),
}

pub type Result<T, E = IoError> = std::result::Result<T, E>;

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File {
        path: path.to_owned(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Payload of one stored tensor. `f32` payloads widen exactly on read.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read_le(dtype: Dtype, bytes: &[u8]) -> Self {
        match dtype {
            Dtype::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                    .collect(),
            ),
            Dtype::F64 => TensorData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect(),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl StoredTensor {
    pub fn f64(shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self {
            shape,
            data: TensorData::F64(data),
        }
    }

    pub fn with_dtype(shape: Vec<usize>, data: &[f64], dtype: Dtype) -> Self {
        let data = match dtype {
            Dtype::F64 => TensorData::F64(data.to_vec()),
            Dtype::F32 => TensorData::F32(data.iter().map(|&x| x as f32).collect()),
        };
        Self { shape, data }
    }

    pub fn from_tokens(t: &TokenTensor, dtype: Dtype) -> Self {
        let (n, m, d) = t.shape();
        Self::with_dtype(vec![n, m, d], t.data(), dtype)
    }

    pub fn to_tokens(&self, name: &str) -> Result<TokenTensor> {
        let &[n, m, d] = self.shape.as_slice() else {
            return Err(IoError::Shape {
                name: name.into(),
                expected: vec![0, 0, 0],
                actual: self.shape.clone(),
            });
        };
        TokenTensor::new(n, m, d, self.data.to_f64())
            .map_err(|e| IoError::Corrupt(format!("tensor `{name}`: {e}")))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    dtype: Dtype,
    shape: Vec<usize>,
    byte_offset: u64,
    byte_length: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    blob_length: u64,
    tensors: IndexMap<String, Entry>,
}

/// Named tensors in payload order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorContainer {
    pub tensors: IndexMap<String, StoredTensor>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: StoredTensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.get(name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = IndexMap::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let len = (t.data.len() * t.data.dtype().size()) as u64;
            entries.insert(
                name.clone(),
                Entry {
                    dtype: t.data.dtype(),
                    shape: t.shape.clone(),
                    byte_offset: offset,
                    byte_length: len,
                },
            );
            offset += len;
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            blob_length: offset,
            tensors: entries,
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            t.data.write_le(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| IoError::Corrupt(m.to_owned());
        if bytes.len() < 16 {
            return Err(corrupt("file shorter than the fixed preamble"));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let header_end = 16u64
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len() as u64)
            .ok_or_else(|| corrupt("header extends past end of file"))? as usize;
        let header_bytes = &bytes[16..header_end];
        // Check the version before the full schema so future layouts get a
        // version error rather than a parse error.
        #[derive(Deserialize)]
        struct VersionProbe {
            format_version: Option<u64>,
        }
        let probe: VersionProbe = serde_json::from_slice(header_bytes)
            .map_err(|e| IoError::Corrupt(format!("header: {e}")))?;
        match probe.format_version {
            Some(v) if v == u64::from(FORMAT_VERSION) => {}
            Some(v) => return Err(IoError::Version(v.min(u64::from(u32::MAX)) as u32)),
            None => return Err(corrupt("header lacks format_version")),
        }
        let header: Header = serde_json::from_slice(header_bytes)
            .map_err(|e| IoError::Corrupt(format!("header: {e}")))?;
        let blob = &bytes[header_end..];
        if blob.len() as u64 != header.blob_length {
            return Err(IoError::Corrupt(format!(
                "blob is {} bytes, header declares {}",
                blob.len(),
                header.blob_length
            )));
        }
        let mut tensors = IndexMap::with_capacity(header.tensors.len());
        let mut expected_offset = 0u64;
        for (name, e) in header.tensors {
            let count = e
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .ok_or_else(|| IoError::Corrupt(format!("tensor `{name}`: shape overflows")))?;
            let len = count
                .checked_mul(e.dtype.size() as u64)
                .ok_or_else(|| IoError::Corrupt(format!("tensor `{name}`: size overflows")))?;
            if e.byte_length != len {
                return Err(IoError::Corrupt(format!(
                    "tensor `{name}`: byte_length {} but shape {:?} needs {len}",
                    e.byte_length, e.shape
                )));
            }
            if e.byte_offset != expected_offset {
                return Err(IoError::Corrupt(format!(
                    "tensor `{name}`: byte_offset {} (expected {expected_offset})",
                    e.byte_offset
                )));
            }
            let end = expected_offset + len;
            if end > header.blob_length {
                return Err(IoError::Corrupt(format!(
                    "tensor `{name}` runs past the blob"
                )));
            }
            let data = TensorData::read_le(e.dtype, &blob[expected_offset as usize..end as usize]);
            tensors.insert(
                name,
                StoredTensor {
                    shape: e.shape,
                    data,
                },
            );
            expected_offset = end;
        }
        if expected_offset != header.blob_length {
            return Err(IoError::Corrupt(format!(
                "tensors cover {expected_offset} of {} blob bytes",
                header.blob_length
            )));
        }
        Ok(Self { tensors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(file_err(path))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(file_err(path))?;
        Self::from_bytes(&bytes)
    }
}

/// Every tensor of `weights`, named `<module>.<field>`, in canonical order.
pub fn weights_to_container(weights: &CgmfWeights, dtype: Dtype) -> TensorContainer {
    let mut c = TensorContainer::new();
    for (name, module) in weights.modules() {
        match module {
            crate::cgmf::ModuleRef::Linear(map) => {
                c.insert(
                    format!("{name}.weight"),
                    StoredTensor::with_dtype(
                        vec![map.in_width(), map.out_width()],
                        map.weight(),
                        dtype,
                    ),
                );
                if let Some(b) = map.bias() {
                    c.insert(
                        format!("{name}.bias"),
                        StoredTensor::with_dtype(vec![map.out_width()], b, dtype),
                    );
                }
            }
            crate::cgmf::ModuleRef::Norm(p) => {
                c.insert(
                    format!("{name}.gain"),
                    StoredTensor::with_dtype(vec![p.width()], p.gain(), dtype),
                );
                c.insert(
                    format!("{name}.shift"),
                    StoredTensor::with_dtype(vec![p.width()], p.shift(), dtype),
                );
                c.insert(
                    format!("{name}.epsilon"),
                    StoredTensor::with_dtype(vec![], &[p.epsilon()], dtype),
                );
            }
        }
    }
    c
}

/// Validation policy for [`load_weights_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LoadMode {
    /// Unknown tensors are an error.
    #[default]
    Strict,
    /// Unknown tensors are ignored.
    Permissive,
}

/// Rebuilds weights for `config` from a container. Every expected tensor must
/// be present with the exact shape; nothing is returned unless all succeed.
pub fn weights_from_container(
    c: &TensorContainer,
    config: &FusionConfig,
    mode: LoadMode,
) -> Result<CgmfWeights> {
    let mut weights = CgmfWeights::zeros(config);
    let mut used = Vec::new();
    let mut take = |name: String, shape: Vec<usize>| -> Result<Vec<f64>> {
        let t = c.get(&name).ok_or_else(|| IoError::Missing(name.clone()))?;
        if t.shape != shape {
            return Err(IoError::Shape {
                name,
                expected: shape,
                actual: t.shape.clone(),
            });
        }
        used.push(name);
        Ok(t.data.to_f64())
    };
    for (name, module) in weights.modules_mut() {
        match module {
            ModuleMut::Linear(map) => {
                let (i, o) = (map.in_width(), map.out_width());
                let w = take(format!("{name}.weight"), vec![i, o])?;
                let b = take(format!("{name}.bias"), vec![o])?;
                *map = LinearMap::new(i, o, w, Some(b))
                    .map_err(|e| IoError::Corrupt(format!("{name}: {e}")))?;
            }
            ModuleMut::Norm(p) => {
                let w = p.width();
                let gain = take(format!("{name}.gain"), vec![w])?;
                let shift = take(format!("{name}.shift"), vec![w])?;
                let eps = take(format!("{name}.epsilon"), vec![])?[0];
                *p = LayerNormParams::new(gain, shift, eps)
                    .map_err(|e| IoError::Corrupt(format!("{name}: {e}")))?;
            }
        }
    }
    if mode == LoadMode::Strict {
        let extra: Vec<String> = c
            .tensors
            .keys()
            .filter(|k| !used.contains(k))
            .cloned()
            .collect();
        if !extra.is_empty() {
            return Err(IoError::Unexpected(extra));
        }
    }
    Ok(weights)
}

pub fn save_weights(weights: &CgmfWeights, path: impl AsRef<Path>) -> Result<()> {
    save_weights_as(weights, path, Dtype::F64)
}

/// `Dtype::F32` narrows every value; use it only where that loss is acceptable.
pub fn save_weights_as(weights: &CgmfWeights, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
    weights_to_container(weights, dtype).write(path)
}

pub fn load_weights(path: impl AsRef<Path>, expected: &FusionConfig) -> Result<CgmfWeights> {
    load_weights_with(path, expected, LoadMode::Strict)
}

pub fn load_weights_with(
    path: impl AsRef<Path>,
    expected: &FusionConfig,
    mode: LoadMode,
) -> Result<CgmfWeights> {
    weights_from_container(&TensorContainer::read(path)?, expected, mode)
}

/// Token streams as a container: `f_v`, `f_s`, `f_c` and, when present,
/// `f_register`.
pub fn inputs_to_container(inputs: &FusionInputs, dtype: Dtype) -> TensorContainer {
    let mut c = TensorContainer::new();
    c.insert("f_v", StoredTensor::from_tokens(&inputs.f_v, dtype));
    c.insert("f_s", StoredTensor::from_tokens(&inputs.f_s, dtype));
    c.insert("f_c", StoredTensor::from_tokens(&inputs.f_c, dtype));
    if let Some(r) = &inputs.f_register {
        c.insert("f_register", StoredTensor::from_tokens(r, dtype));
    }
    c
}

pub fn inputs_from_container(c: &TensorContainer) -> Result<FusionInputs> {
    let get = |name: &str| -> Result<TokenTensor> {
        c.get(name)
            .ok_or_else(|| IoError::Missing(name.to_owned()))?
            .to_tokens(name)
    };
    Ok(FusionInputs {
        f_v: get("f_v")?,
        f_s: get("f_s")?,
        f_c: get("f_c")?,
        f_register: c.get("f_register").map(|t| t.to_tokens("f_register")).transpose()?,
    })
}

/// Contents of a config file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub n_frames: usize,
    pub m_visual: usize,
    pub m_spatial: usize,
    pub d_visual: usize,
    pub d_spatial: usize,
    pub d_attn: usize,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub toggles: Toggles,
}

fn default_heads() -> usize {
    crate::cgmf::DEFAULT_HEADS
}

impl ConfigFile {
    pub fn from_config(config: &FusionConfig, seed: Option<u64>) -> Self {
        Self {
            n_frames: config.n_frames,
            m_visual: config.m_visual,
            m_spatial: config.m_spatial,
            d_visual: config.d_visual,
            d_spatial: config.d_spatial,
            d_attn: config.d_attn,
            n_heads: config.n_heads,
            seed,
            toggles: config.toggles,
        }
    }

    pub fn config(&self) -> FusionConfig {
        FusionConfig {
            n_frames: self.n_frames,
            m_visual: self.m_visual,
            m_spatial: self.m_spatial,
            d_visual: self.d_visual,
            d_spatial: self.d_spatial,
            d_attn: self.d_attn,
            n_heads: self.n_heads,
            toggles: self.toggles,
        }
    }

    /// Parses and validates; errors name the offending field.
    pub fn parse(text: &str) -> Result<Self> {
        let file: ConfigFile =
            toml::from_str(text).map_err(|e| IoError::ConfigSyntax(e.to_string()))?;
        file.config().validate()?;
        Ok(file)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(file_err(path))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_toml()).map_err(file_err(path))
    }
}
