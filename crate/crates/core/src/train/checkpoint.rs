//! Linear embedder parameters and their binary checkpoint format.
//!
//! Layout (all little-endian):
//!
//! ```text
//! offset 0   magic  b"RDMP"
//! offset 4   version u32 (= 1)
//! offset 8   rows u32 (feature dimension)
//! offset 12  cols u32 (embedding dimension)
//! offset 16  rows·cols IEEE-754 f64 values, row-major
//! ```

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::embedding::EmbeddingMatrix;
use crate::{Error, Real, Result};

pub const MAGIC: &[u8; 4] = b"RDMP";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// `feature_dim × embed_dim` projection; an embedding is `x · W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    rows: usize,
    cols: usize,
    data: Vec<Real>,
}

impl ModelParams {
    pub fn new(rows: usize, cols: usize, data: Vec<Real>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::Shape(format!("{rows}x{cols} projection with {} values", data.len())));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { rows, cols, data })
    }

    /// Gaussian initialisation with variance `1/feature_dim`.
    pub fn random(feature_dim: usize, embed_dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (feature_dim.max(1) as Real).sqrt();
        let data = (0..feature_dim * embed_dim)
            .map(|_| scale * <StandardNormal as Distribution<Real>>::sample(&StandardNormal, &mut rng))
            .collect();
        Self::new(feature_dim, embed_dim, data)
    }

    /// Identity on the first `min(rows, cols)` coordinates.
    pub fn identity(feature_dim: usize, embed_dim: usize) -> Result<Self> {
        let mut data = vec![0.0; feature_dim * embed_dim];
        for i in 0..feature_dim.min(embed_dim) {
            data[i * embed_dim + i] = 1.0;
        }
        Self::new(feature_dim, embed_dim, data)
    }

    pub fn feature_dim(&self) -> usize {
        self.rows
    }

    pub fn embed_dim(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[Real] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn embed(&self, features: &EmbeddingMatrix<Real>) -> Result<EmbeddingMatrix<Real>> {
        if features.dim() != self.rows {
            return Err(Error::Shape(format!(
                "features have dimension {}, projection expects {}",
                features.dim(),
                self.rows
            )));
        }
        let mut out = vec![0.0; features.rows() * self.cols];
        for i in 0..features.rows() {
            let x = features.row(i);
            let o = &mut out[i * self.cols..(i + 1) * self.cols];
            for (k, &xk) in x.iter().enumerate() {
                let w = &self.data[k * self.cols..(k + 1) * self.cols];
                for (oj, &wj) in o.iter_mut().zip(w) {
                    *oj += xk * wj;
                }
            }
        }
        EmbeddingMatrix::new(features.rows(), self.cols, out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |offset: usize, reason: String| Error::Checkpoint { offset, reason };
        if bytes.len() < HEADER_LEN {
            return Err(err(bytes.len(), format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len())));
        }
        if &bytes[0..4] != MAGIC {
            return Err(err(0, "bad magic, expected \"RDMP\"".into()));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"));
        let version = word(4);
        if version != VERSION {
            return Err(err(4, format!("unsupported version {version}")));
        }
        let (rows, cols) = (word(8) as usize, word(12) as usize);
        if rows == 0 || cols == 0 {
            return Err(err(8, format!("empty shape {rows}x{cols}")));
        }
        let expected = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .and_then(|n| n.checked_add(HEADER_LEN))
            .ok_or_else(|| err(8, format!("shape {rows}x{cols} overflows")))?;
        if bytes.len() != expected {
            let at = bytes.len().min(expected);
            return Err(err(at, format!("header declares {rows}x{cols} ({expected} bytes), file has {}", bytes.len())));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for (n, chunk) in bytes[HEADER_LEN..].chunks_exact(8).enumerate() {
            let v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            if !v.is_finite() {
                return Err(err(HEADER_LEN + 8 * n, "non-finite parameter".into()));
            }
            data.push(v);
        }
        Self::new(rows, cols, data)
    }
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, params.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    ModelParams::from_bytes(&std::fs::read(path)?)
}
