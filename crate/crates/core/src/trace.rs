//! Trace data model and the on-disk container.
//!
//! A trace set is a directory holding `manifest.json` plus one binary tensor
//! file per sample. Tensor files start with the 8-byte magic `PRSMTRC1`,
//! followed by four little-endian `u32` fields (`T`, `L`, `d`, dtype) and
//! `T·L·d` little-endian `f32` values laid out `[t][ℓ][dim]`.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::category::Category;
use crate::parallel;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSOR_MAGIC: &[u8; 8] = b"PRSMTRC1";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 * 4;
const DTYPE_F32: u32 = 0;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("missing manifest: {0}")]
    MissingManifest(PathBuf),
    #[error("malformed manifest {path}: {message}")]
    MalformedManifest { path: PathBuf, message: String },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("bad magic in {path}: found {found:?}")]
    BadMagic { path: PathBuf, found: Vec<u8> },
    #[error("unsupported tensor dtype {dtype} in {path}")]
    UnsupportedDtype { path: PathBuf, dtype: u32 },
    #[error("truncated tensor file {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("dimension mismatch in sample {sample:?}: {detail}")]
    DimMismatch { sample: String, detail: String },
    #[error("non-finite value in sample {sample:?} at flat index {index}")]
    NonFiniteValue { sample: String, index: usize },
    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),
    #[error("unknown category string {value:?} in sample {sample:?}")]
    UnknownCategoryString { sample: String, value: String },
    #[error("invalid step indices in sample {sample:?}: {detail}")]
    BadStepIndex { sample: String, detail: String },
    #[error("unknown correctness label {0:?}")]
    UnknownCorrectness(String),
    #[error("cannot write to {path}: {source}")]
    UnwritablePath { path: PathBuf, source: io::Error },
    #[error("i/o failure on {path}: {source}")]
    IoFailure { path: PathBuf, source: io::Error },
}

/// Outcome label of a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Correctness {
    Correct,
    Incorrect,
    Unlabeled,
}

/// Whether tensors hold raw activations or already-projected features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSpace {
    #[default]
    Raw,
    /// Features are already in the projected space; preprocessing is the
    /// identity.
    Projected,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepRecord {
    /// 1-based step index.
    pub t: u32,
    pub category: Category,
    pub text: Option<String>,
}

/// `T×L×d` first-token activations, step-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenTensor {
    pub steps: usize,
    pub layers: usize,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl HiddenTensor {
    pub fn new(steps: usize, layers: usize, dim: usize, values: Vec<f32>) -> Self {
        assert_eq!(values.len(), steps * layers * dim, "tensor payload size");
        HiddenTensor {
            steps,
            layers,
            dim,
            values,
        }
    }

    pub fn vector(&self, t: usize, layer: usize) -> &[f32] {
        let start = (t * self.layers + layer) * self.dim;
        &self.values[start..start + self.dim]
    }

    /// All layer vectors of step `t`, concatenated.
    pub fn step(&self, t: usize) -> &[f32] {
        let n = self.layers * self.dim;
        &self.values[t * n..(t + 1) * n]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.values.len() * 4);
        out.extend_from_slice(TENSOR_MAGIC);
        for v in [self.steps, self.layers, self.dim] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&DTYPE_F32.to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, TraceError> {
        if bytes.len() < 8 || &bytes[..8] != TENSOR_MAGIC {
            return Err(TraceError::BadMagic {
                path: path.to_path_buf(),
                found: bytes[..bytes.len().min(8)].to_vec(),
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(TraceError::Truncated {
                path: path.to_path_buf(),
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        let field = |i: usize| {
            let o = 8 + 4 * i;
            u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]])
        };
        let (steps, layers, dim, dtype) = (field(0) as usize, field(1) as usize, field(2) as usize, field(3));
        if dtype != DTYPE_F32 {
            return Err(TraceError::UnsupportedDtype {
                path: path.to_path_buf(),
                dtype,
            });
        }
        let expected = steps
            .checked_mul(layers)
            .and_then(|n| n.checked_mul(dim))
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(HEADER_LEN))
            .unwrap_or(usize::MAX);
        if bytes.len() != expected {
            return Err(TraceError::Truncated {
                path: path.to_path_buf(),
                expected,
                found: bytes.len(),
            });
        }
        let values = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(HiddenTensor {
            steps,
            layers,
            dim,
            values,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceSample {
    pub id: String,
    pub steps: Vec<StepRecord>,
    pub tensor: HiddenTensor,
    pub correctness: Correctness,
    pub meta: BTreeMap<String, String>,
}

impl TraceSample {
    pub fn categories(&self) -> Vec<Category> {
        self.steps.iter().map(|s| s.category).collect()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceSet {
    pub version: u32,
    pub layers: usize,
    pub hidden_dim: usize,
    pub space: FeatureSpace,
    pub samples: Vec<TraceSample>,
}

impl TraceSet {
    pub fn new(layers: usize, hidden_dim: usize, samples: Vec<TraceSample>) -> Self {
        TraceSet {
            version: FORMAT_VERSION,
            layers,
            hidden_dim,
            space: FeatureSpace::Raw,
            samples,
        }
    }

    pub fn category_sequences(&self) -> Vec<Vec<Category>> {
        self.samples.iter().map(TraceSample::categories).collect()
    }

    /// Checks every container invariant.
    pub fn validate(&self) -> Result<(), TraceError> {
        if self.version != FORMAT_VERSION {
            return Err(TraceError::UnsupportedVersion(self.version));
        }
        let mut seen = HashSet::new();
        for s in &self.samples {
            if !seen.insert(s.id.as_str()) {
                return Err(TraceError::DuplicateId(s.id.clone()));
            }
            validate_sample(s, self.layers, self.hidden_dim)?;
        }
        Ok(())
    }
}

fn validate_sample(s: &TraceSample, layers: usize, dim: usize) -> Result<(), TraceError> {
    let mismatch = |detail: String| TraceError::DimMismatch {
        sample: s.id.clone(),
        detail,
    };
    let t = &s.tensor;
    if t.steps == 0 || t.layers == 0 || t.dim == 0 {
        return Err(mismatch(format!(
            "tensor dims must be positive, got T={} L={} d={}",
            t.steps, t.layers, t.dim
        )));
    }
    if t.steps != s.steps.len() {
        return Err(mismatch(format!(
            "tensor T={} but sample has {} steps",
            t.steps,
            s.steps.len()
        )));
    }
    if t.layers != layers || t.dim != dim {
        return Err(mismatch(format!(
            "tensor L={} d={} but set declares L={} d={}",
            t.layers, t.dim, layers, dim
        )));
    }
    if t.values.len() != t.steps * t.layers * t.dim {
        return Err(mismatch("payload length disagrees with header".into()));
    }
    if let Some(index) = t.values.iter().position(|v| !v.is_finite()) {
        return Err(TraceError::NonFiniteValue {
            sample: s.id.clone(),
            index,
        });
    }
    let mut prev = 0u32;
    for step in &s.steps {
        if step.t <= prev {
            return Err(TraceError::BadStepIndex {
                sample: s.id.clone(),
                detail: format!("step index {} follows {}", step.t, prev),
            });
        }
        prev = step.t;
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ManifestStep {
    t: u32,
    category: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct ManifestSample {
    id: String,
    correctness: String,
    #[serde(default)]
    meta: BTreeMap<String, String>,
    tensor: String,
    steps: Vec<ManifestStep>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    layers: usize,
    hidden_dim: usize,
    #[serde(default, skip_serializing_if = "is_raw")]
    space: FeatureSpace,
    samples: Vec<ManifestSample>,
}

fn is_raw(s: &FeatureSpace) -> bool {
    *s == FeatureSpace::Raw
}

fn parse_correctness(s: &str) -> Result<Correctness, TraceError> {
    match s {
        "correct" => Ok(Correctness::Correct),
        "incorrect" => Ok(Correctness::Incorrect),
        "unlabeled" => Ok(Correctness::Unlabeled),
        other => Err(TraceError::UnknownCorrectness(other.to_string())),
    }
}

fn correctness_str(c: Correctness) -> &'static str {
    match c {
        Correctness::Correct => "correct",
        Correctness::Incorrect => "incorrect",
        Correctness::Unlabeled => "unlabeled",
    }
}

/// Loads and fully validates a trace set directory.
pub fn load_trace_set(path: impl AsRef<Path>) -> Result<TraceSet, TraceError> {
    let root = path.as_ref();
    let manifest_path = root.join(MANIFEST_FILE);
    let text = match fs::read_to_string(&manifest_path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            return Err(TraceError::MissingManifest(manifest_path))
        }
        Err(source) => {
            return Err(TraceError::IoFailure {
                path: manifest_path,
                source,
            })
        }
    };
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| TraceError::MalformedManifest {
            path: manifest_path.clone(),
            message: e.to_string(),
        })?;
    if manifest.version != FORMAT_VERSION {
        return Err(TraceError::UnsupportedVersion(manifest.version));
    }

    let loaded = parallel::ordered_map(&manifest.samples, |_, ms| load_sample(root, ms));
    let samples = loaded.into_iter().collect::<Result<Vec<_>, _>>()?;

    let set = TraceSet {
        version: manifest.version,
        layers: manifest.layers,
        hidden_dim: manifest.hidden_dim,
        space: manifest.space,
        samples,
    };
    set.validate()?;
    Ok(set)
}

fn load_sample(root: &Path, ms: &ManifestSample) -> Result<TraceSample, TraceError> {
    let steps = ms
        .steps
        .iter()
        .map(|st| {
            let category = Category::parse(&st.category).ok_or_else(|| {
                TraceError::UnknownCategoryString {
                    sample: ms.id.clone(),
                    value: st.category.clone(),
                }
            })?;
            Ok(StepRecord {
                t: st.t,
                category,
                text: st.text.clone(),
            })
        })
        .collect::<Result<Vec<_>, TraceError>>()?;
    let tensor_path = root.join(&ms.tensor);
    let bytes = fs::read(&tensor_path).map_err(|source| TraceError::IoFailure {
        path: tensor_path.clone(),
        source,
    })?;
    let tensor = HiddenTensor::from_bytes(&bytes, &tensor_path)?;
    Ok(TraceSample {
        id: ms.id.clone(),
        steps,
        tensor,
        correctness: parse_correctness(&ms.correctness)?,
        meta: ms.meta.clone(),
    })
}

fn tensor_file_name(index: usize) -> String {
    format!("tensors/{index:06}.bin")
}

/// Writes `set` under `path`. Output bytes depend only on the set.
pub fn save_trace_set(set: &TraceSet, path: impl AsRef<Path>) -> Result<(), TraceError> {
    let root = path.as_ref();
    set.validate()?;
    let tensor_dir = root.join("tensors");
    fs::create_dir_all(&tensor_dir).map_err(|source| TraceError::UnwritablePath {
        path: tensor_dir.clone(),
        source,
    })?;

    let mut samples = Vec::with_capacity(set.samples.len());
    for (i, s) in set.samples.iter().enumerate() {
        let rel = tensor_file_name(i);
        write_file(&root.join(&rel), &s.tensor.to_bytes())?;
        samples.push(ManifestSample {
            id: s.id.clone(),
            correctness: correctness_str(s.correctness).to_string(),
            meta: s.meta.clone(),
            tensor: rel,
            steps: s
                .steps
                .iter()
                .map(|st| ManifestStep {
                    t: st.t,
                    category: st.category.name().to_string(),
                    text: st.text.clone(),
                })
                .collect(),
        });
    }
    let manifest = Manifest {
        version: set.version,
        layers: set.layers,
        hidden_dim: set.hidden_dim,
        space: set.space,
        samples,
    };
    let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    json.push('\n');
    write_file(&root.join(MANIFEST_FILE), json.as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), TraceError> {
    let mut f = fs::File::create(path).map_err(|source| TraceError::UnwritablePath {
        path: path.to_path_buf(),
        source,
    })?;
    f.write_all(bytes).map_err(|source| TraceError::IoFailure {
        path: path.to_path_buf(),
        source,
    })
}
