//! Dense-vector primitives for the shared contrastive space.
//!
//! Values are stored as `f32`; every reduction (dot products, norms) is
//! accumulated in `f64` and only rounded when a new vector is produced.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-12;

/// Tolerance on `|‖v‖ - 1|` for a vector to count as unit norm.
pub const UNIT_NORM_TOL: f64 = 1e-5;

/// A finite, non-empty vector in the shared embedding space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct Embedding {
    values: Vec<f32>,
}

impl Embedding {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyVector);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }

    pub fn sq_norm(&self) -> f64 {
        dot(&self.values, &self.values)
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_NORM_TOL
    }
}

impl TryFrom<Vec<f32>> for Embedding {
    type Error = Error;

    fn try_from(values: Vec<f32>) -> Result<Self> {
        Embedding::new(values)
    }
}

impl From<Embedding> for Vec<f32> {
    fn from(e: Embedding) -> Self {
        e.values
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

pub(crate) fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

/// Scale `v` to unit length.
pub fn normalize(v: &[f32]) -> Result<Embedding> {
    if v.is_empty() {
        return Err(Error::EmptyVector);
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite);
    }
    let wide: Vec<f64> = v.iter().map(|&x| f64::from(x)).collect();
    normalize_f64(&wide)
}

/// Normalize a wide vector, rounding to `f32` only at the end.
pub(crate) fn normalize_f64(v: &[f64]) -> Result<Embedding> {
    if v.is_empty() {
        return Err(Error::EmptyVector);
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite);
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < ZERO_NORM {
        return Err(Error::ZeroVector);
    }
    Embedding::new(v.iter().map(|&x| (x / n) as f32).collect())
}

fn check_dims(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimMismatch { expected: a, found: b });
    }
    Ok(())
}

/// Cosine from a dot product and two squared norms, clamped to [-1, 1].
///
/// Dividing by `sqrt(|a|² |b|²)` makes the self-similarity of any vector
/// exactly 1.0, since `sqrt(x * x) == x` under correct rounding.
#[inline]
pub(crate) fn cosine_from_parts(dot: f64, sq_norm_a: f64, sq_norm_b: f64) -> f64 {
    (dot / (sq_norm_a * sq_norm_b).sqrt()).clamp(-1.0, 1.0)
}

pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64> {
    check_dims(a.dim(), b.dim())?;
    let (na, nb) = (a.sq_norm(), b.sq_norm());
    if na.sqrt() < ZERO_NORM || nb.sqrt() < ZERO_NORM {
        return Err(Error::ZeroVector);
    }
    Ok(cosine_from_parts(dot(a.as_slice(), b.as_slice()), na, nb))
}

const MAPPER_MAGIC: &[u8; 4] = b"DRM1";
const MAPPER_VERSION: u32 = 1;

/// Affine map from the contrastive space into the generator's input space.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearMapper {
    /// Row-major, `out_dim` rows of `in_dim` columns.
    weight: Vec<f32>,
    bias: Vec<f32>,
    in_dim: usize,
}

impl LinearMapper {
    pub fn new(weight: Vec<Vec<f32>>, bias: Vec<f32>) -> Result<Self> {
        let in_dim = weight.first().map(Vec::len).unwrap_or(0);
        if in_dim == 0 {
            return Err(Error::InvalidConfig("mapper weight has no columns".into()));
        }
        if let Some(row) = weight.iter().find(|r| r.len() != in_dim) {
            return Err(Error::DimMismatch {
                expected: in_dim,
                found: row.len(),
            });
        }
        check_dims(weight.len(), bias.len())?;
        Self::from_flat(weight.into_iter().flatten().collect(), bias, in_dim)
    }

    fn from_flat(weight: Vec<f32>, bias: Vec<f32>, in_dim: usize) -> Result<Self> {
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { weight, bias, in_dim })
    }

    pub fn identity(dim: usize) -> Self {
        let mut weight = vec![0.0; dim * dim];
        for i in 0..dim {
            weight[i * dim + i] = 1.0;
        }
        Self {
            weight,
            bias: vec![0.0; dim],
            in_dim: dim,
        }
    }

    /// Input (contrastive-space) dimension.
    pub fn clap_dim(&self) -> usize {
        self.in_dim
    }

    /// Output (generator-space) dimension.
    pub fn llm_dim(&self) -> usize {
        self.bias.len()
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.weight[r * self.in_dim..(r + 1) * self.in_dim]
    }

    /// Binary layout: `DRM1`, version u32, rows u32, cols u32, then
    /// rows×cols weights and rows biases, all little-endian f32.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAPPER_MAGIC)?;
        w.write_all(&MAPPER_VERSION.to_le_bytes())?;
        w.write_all(&(self.llm_dim() as u32).to_le_bytes())?;
        w.write_all(&(self.in_dim as u32).to_le_bytes())?;
        for v in self.weight.iter().chain(&self.bias) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < 16 || &bytes[..4] != MAPPER_MAGIC {
            return Err(Error::CorruptHeader("bad mapper magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        if word(4) != MAPPER_VERSION {
            return Err(Error::CorruptHeader(format!("unsupported mapper version {}", word(4))));
        }
        let (rows, cols) = (word(8) as usize, word(12) as usize);
        if rows == 0 || cols == 0 {
            return Err(Error::CorruptHeader("mapper has a zero dimension".into()));
        }
        let n = rows * cols + rows;
        if bytes.len() != 16 + 4 * n {
            return Err(Error::CorruptHeader(format!(
                "mapper body is {} bytes, expected {}",
                bytes.len() - 16,
                4 * n
            )));
        }
        let mut vals: Vec<f32> = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let bias = vals.split_off(rows * cols);
        Self::from_flat(vals, bias, cols)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(fs::File::open(path)?)
    }
}

/// `weight · e + bias`, accumulated in f64.
pub fn apply_mapper(m: &LinearMapper, e: &Embedding) -> Result<Vec<f32>> {
    check_dims(m.clap_dim(), e.dim())?;
    Ok((0..m.llm_dim())
        .map(|r| (dot(m.row(r), e.as_slice()) + f64::from(m.bias[r])) as f32)
        .collect())
}
