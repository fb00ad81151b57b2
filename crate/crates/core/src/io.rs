//! On-disk artifacts: a JSON manifest next to raw little-endian `f64` arrays.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/<array>.f64     one file per array, row-major for matrices
//! ```
//!
//! The manifest checksum is FNV-1a 64 over the concatenated array bytes in
//! manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::distill::DistilledFilters;
use crate::error::{Error, Result};
use crate::lds::DiagonalLds;
use crate::spectral_basis::SpectralBasis;
use crate::stu::{ArTerms, StuParams};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    Fnv1a::new().update(bytes).finish()
}

#[derive(Debug, Clone, Copy)]
struct Fnv1a(u64);

impl Fnv1a {
    fn new() -> Self {
        Self(FNV_OFFSET)
    }

    fn update(mut self, bytes: &[u8]) -> Self {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
        self
    }

    fn finish(self) -> u64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArtifactKind {
    Basis,
    Lds,
    Stu,
    Distilled,
    Run,
}

impl std::fmt::Display for ArtifactKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ArtifactKind::Basis => "basis",
            ArtifactKind::Lds => "lds",
            ArtifactKind::Stu => "stu",
            ArtifactKind::Distilled => "distilled",
            ArtifactKind::Run => "run",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub file: String,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub artifact_kind: ArtifactKind,
    pub dims: BTreeMap<String, u64>,
    /// Hex-encoded so that readers without 64-bit integers keep every bit.
    #[serde(with = "hex_u64")]
    pub checksum: u64,
    #[serde(default)]
    pub created_with_seed: Option<u64>,
    pub arrays: Vec<ArrayEntry>,
    /// Human-readable copies of scalar fields; never read back.
    #[serde(default)]
    pub meta: Map<String, Value>,
}

mod hex_u64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:016x}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let s = String::deserialize(d)?;
        u64::from_str_radix(&s, 16).map_err(serde::de::Error::custom)
    }
}

/// Kind-agnostic artifact contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub kind: ArtifactKind,
    pub dims: BTreeMap<String, u64>,
    pub seed: Option<u64>,
    pub meta: Map<String, Value>,
    pub arrays: Vec<(String, Vec<f64>)>,
}

impl Artifact {
    pub fn new(kind: ArtifactKind) -> Self {
        Self {
            kind,
            dims: BTreeMap::new(),
            seed: None,
            meta: Map::new(),
            arrays: Vec::new(),
        }
    }

    pub fn dim(mut self, name: &str, value: usize) -> Self {
        self.dims.insert(name.to_string(), value as u64);
        self
    }

    pub fn meta(mut self, name: &str, value: impl Into<Value>) -> Self {
        self.meta.insert(name.to_string(), value.into());
        self
    }

    pub fn array(mut self, name: &str, data: Vec<f64>) -> Self {
        self.arrays.push((name.to_string(), data));
        self
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }

    pub fn get_dim(&self, name: &str) -> Result<usize> {
        self.dims
            .get(name)
            .map(|&v| v as usize)
            .ok_or_else(|| Error::Manifest(format!("missing dimension '{name}'")))
    }

    pub fn get_array(&self, name: &str) -> Result<&[f64]> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, d)| d.as_slice())
            .ok_or_else(|| Error::Manifest(format!("missing array '{name}'")))
    }

    fn get_array_len(&self, name: &str, len: usize) -> Result<&[f64]> {
        let a = self.get_array(name)?;
        if a.len() != len {
            return Err(Error::Manifest(format!("array '{name}' has {} values, dims imply {len}", a.len())));
        }
        Ok(a)
    }
}

fn valid_array_name(name: &str) -> bool {
    !name.is_empty() && name.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

fn encode(data: &[f64]) -> Vec<u8> {
    data.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn decode(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect()
}

/// Writes `artifact` into `dir`, creating the directory if needed.
pub fn save_artifact(artifact: &Artifact, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut hash = Fnv1a::new();
    let mut entries = Vec::with_capacity(artifact.arrays.len());
    for (name, data) in &artifact.arrays {
        if !valid_array_name(name) {
            return Err(Error::InvalidArgument(format!("array name '{name}' must match [a-z0-9_]+")));
        }
        if entries.iter().any(|e: &ArrayEntry| &e.name == name) {
            return Err(Error::InvalidArgument(format!("duplicate array '{name}'")));
        }
        let bytes = encode(data);
        hash = hash.update(&bytes);
        let file = format!("{name}.f64");
        fs::write(dir.join(&file), &bytes)?;
        entries.push(ArrayEntry {
            name: name.clone(),
            file,
            len: data.len() as u64,
        });
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        artifact_kind: artifact.kind,
        dims: artifact.dims.clone(),
        checksum: hash.finish(),
        created_with_seed: artifact.seed,
        arrays: entries,
        meta: artifact.meta.clone(),
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let raw: Value = serde_json::from_str(&text)?;
    let found = raw
        .get("schema_version")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::Manifest("missing integer schema_version".into()))?;
    if found != SCHEMA_VERSION as u64 {
        return Err(Error::SchemaMismatch {
            found: u32::try_from(found).unwrap_or(u32::MAX),
            expected: SCHEMA_VERSION,
        });
    }
    Ok(serde_json::from_value(raw)?)
}

/// Reads an artifact, checking schema, kind, payload sizes and checksum in
/// that order.
pub fn load_artifact(dir: &Path, expected: Option<ArtifactKind>) -> Result<Artifact> {
    let manifest = read_manifest(dir)?;
    if let Some(kind) = expected {
        if kind != manifest.artifact_kind {
            return Err(Error::KindMismatch {
                expected: kind.to_string(),
                found: manifest.artifact_kind.to_string(),
            });
        }
    }
    let mut payloads = Vec::with_capacity(manifest.arrays.len());
    for entry in &manifest.arrays {
        if !valid_array_name(&entry.name) || entry.file != format!("{}.f64", entry.name) {
            return Err(Error::Manifest(format!("bad array entry '{}' -> '{}'", entry.name, entry.file)));
        }
        let path: PathBuf = dir.join(&entry.file);
        let bytes = fs::read(&path)?;
        let expected_len = entry.len * 8;
        if bytes.len() as u64 != expected_len {
            return Err(Error::TruncatedPayload {
                path,
                expected: expected_len,
                found: bytes.len() as u64,
            });
        }
        payloads.push(bytes);
    }
    let actual = payloads.iter().fold(Fnv1a::new(), |h, b| h.update(b)).finish();
    if actual != manifest.checksum {
        return Err(Error::ChecksumMismatch {
            expected: manifest.checksum,
            actual,
        });
    }
    let arrays = manifest
        .arrays
        .iter()
        .zip(&payloads)
        .map(|(e, b)| (e.name.clone(), decode(b)))
        .collect();
    Ok(Artifact {
        kind: manifest.artifact_kind,
        dims: manifest.dims,
        seed: manifest.created_with_seed,
        meta: manifest.meta,
        arrays,
    })
}

/// Types with an on-disk artifact representation.
pub trait Persist: Sized {
    const KIND: ArtifactKind;

    fn to_artifact(&self) -> Artifact;

    fn from_artifact(artifact: &Artifact) -> Result<Self>;

    fn save(&self, dir: &Path) -> Result<Manifest> {
        save_artifact(&self.to_artifact(), dir)
    }

    fn save_with_seed(&self, dir: &Path, seed: Option<u64>) -> Result<Manifest> {
        save_artifact(&self.to_artifact().with_seed(seed), dir)
    }

    fn load(dir: &Path) -> Result<Self> {
        Self::from_artifact(&load_artifact(dir, Some(Self::KIND))?)
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, data)
}

fn finite_or_null(x: f64) -> Value {
    serde_json::Number::from_f64(x).map_or(Value::Null, Value::Number)
}

impl Persist for SpectralBasis {
    const KIND: ArtifactKind = ArtifactKind::Basis;

    fn to_artifact(&self) -> Artifact {
        Artifact::new(Self::KIND)
            .dim("L", self.len())
            .dim("k", self.k())
            .meta("sigma", self.sigma().iter().map(|&s| finite_or_null(s)).collect::<Vec<_>>())
            .array("sigma", self.sigma().to_vec())
            .array("phi", row_major(self.phi()))
    }

    fn from_artifact(a: &Artifact) -> Result<Self> {
        let (l, k) = (a.get_dim("L")?, a.get_dim("k")?);
        let sigma = a.get_array_len("sigma", k)?.to_vec();
        let phi = from_row_major(l, k, a.get_array_len("phi", l * k)?);
        SpectralBasis::from_parts(sigma, phi)
    }
}

impl Persist for DiagonalLds {
    const KIND: ArtifactKind = ArtifactKind::Lds;

    fn to_artifact(&self) -> Artifact {
        Artifact::new(Self::KIND)
            .dim("h", self.state_dim())
            .dim("n", self.input_dim())
            .dim("m", self.output_dim())
            .array("alpha", self.alpha().to_vec())
            .array("b", row_major(self.b()))
            .array("c", row_major(self.c()))
    }

    fn from_artifact(a: &Artifact) -> Result<Self> {
        let (h, n, m) = (a.get_dim("h")?, a.get_dim("n")?, a.get_dim("m")?);
        let alpha = a.get_array_len("alpha", h)?.to_vec();
        let b = from_row_major(h, n, a.get_array_len("b", h * n)?);
        let c = from_row_major(m, h, a.get_array_len("c", m * h)?);
        DiagonalLds::new(alpha, b, c)
    }
}

fn stack(mats: &[DMatrix<f64>]) -> Vec<f64> {
    mats.iter().flat_map(row_major).collect()
}

fn unstack(data: &[f64], count: usize, rows: usize, cols: usize) -> Vec<DMatrix<f64>> {
    (0..count)
        .map(|i| from_row_major(rows, cols, &data[i * rows * cols..(i + 1) * rows * cols]))
        .collect()
}

impl Persist for StuParams {
    const KIND: ArtifactKind = ArtifactKind::Stu;

    fn to_artifact(&self) -> Artifact {
        let mut a = Artifact::new(Self::KIND)
            .dim("k", self.k())
            .dim("m", self.outputs())
            .dim("n", self.inputs())
            .dim("has_ar", self.ar().is_some() as usize)
            .array("m_plus", stack(self.m_plus()))
            .array("m_minus", stack(self.m_minus()));
        if let Some(ar) = self.ar() {
            a = a.dim("y_feedback", ar.y_feedback as usize).array("m_u", stack(&ar.m_u));
        }
        a
    }

    fn from_artifact(a: &Artifact) -> Result<Self> {
        let (k, m, n) = (a.get_dim("k")?, a.get_dim("m")?, a.get_dim("n")?);
        let size = m * n;
        let m_plus = unstack(a.get_array_len("m_plus", k * size)?, k, m, n);
        let m_minus = unstack(a.get_array_len("m_minus", k * size)?, k, m, n);
        let ar = match a.get_dim("has_ar")? {
            0 => None,
            1 => {
                let mats = unstack(a.get_array_len("m_u", 3 * size)?, 3, m, n);
                let m_u: [DMatrix<f64>; 3] = mats.try_into().expect("three AR matrices");
                Some(ArTerms {
                    m_u,
                    y_feedback: a.get_dim("y_feedback")? != 0,
                })
            }
            other => return Err(Error::Manifest(format!("has_ar must be 0 or 1, found {other}"))),
        };
        StuParams::new(m_plus, m_minus, ar)
    }
}

impl Persist for DistilledFilters {
    const KIND: ArtifactKind = ArtifactKind::Distilled;

    /// `scalars` holds `[error_fro, lambda_max]`, with NaN for an absent
    /// `lambda_max`.
    fn to_artifact(&self) -> Artifact {
        let lam = self.lambda_max();
        Artifact::new(Self::KIND)
            .dim("k", self.k())
            .dim("h", self.h())
            .dim("L", self.len())
            .meta("error_fro", finite_or_null(self.error_fro()))
            .meta("lambda_max", lam.map_or(Value::Null, finite_or_null))
            .array("alphas", self.alphas().to_vec())
            .array("mtilde", row_major(self.mtilde()))
            .array("scalars", vec![self.error_fro(), lam.unwrap_or(f64::NAN)])
    }

    fn from_artifact(a: &Artifact) -> Result<Self> {
        let (k, h, l) = (a.get_dim("k")?, a.get_dim("h")?, a.get_dim("L")?);
        let alphas = a.get_array_len("alphas", h)?.to_vec();
        let mtilde = from_row_major(k, h, a.get_array_len("mtilde", k * h)?);
        let s = a.get_array_len("scalars", 2)?;
        let lam = (!s[1].is_nan()).then_some(s[1]);
        DistilledFilters::from_parts(l, alphas, mtilde, s[0], lam)
    }
}
