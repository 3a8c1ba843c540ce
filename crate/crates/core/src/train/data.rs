//! Synthetic Gaussian-cluster datasets and their CSV form.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingMatrix, Label};
use crate::{Error, Real, Result};

/// Seed offset for the held-out draw of [`generate_synthetic_split`].
const HOLDOUT_STREAM: u64 = 0x7e57_5e7d_0000_0001;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub per_class: usize,
    pub feature_dim: usize,
    pub noise_sigma: Real,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Domain(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.per_class == 0 || self.feature_dim == 0 {
            return Err(Error::Domain("per_class and feature_dim must be at least 1".into()));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Domain(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma)));
        }
        Ok(())
    }
}

/// Feature rows with one class label each.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: EmbeddingMatrix<Real>,
    pub labels: Vec<Label>,
}

impl Dataset {
    pub fn new(features: EmbeddingMatrix<Real>, labels: Vec<Label>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Shape(format!("{} feature rows but {} labels", features.rows(), labels.len())));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.dim()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            features: self.features.select_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    /// Holds out `round(fraction · n_c)` samples of every class `c`
    /// (at least one, and never the whole class). Returns `(kept, held_out)`.
    pub fn stratified_split(&self, fraction: Real, seed: u64) -> Result<(Self, Self)> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::Domain(format!("holdout fraction must lie in (0, 1), got {fraction}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut by_class: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            by_class.entry(l).or_default().push(i);
        }
        let (mut keep, mut hold) = (Vec::new(), Vec::new());
        for members in by_class.values_mut() {
            members.shuffle(&mut rng);
            let n_hold = if members.len() < 2 {
                0
            } else {
                ((members.len() as Real * fraction).round() as usize).clamp(1, members.len() - 1)
            };
            hold.extend_from_slice(&members[..n_hold]);
            keep.extend_from_slice(&members[n_hold..]);
        }
        keep.sort_unstable();
        hold.sort_unstable();
        Ok((self.subset(&keep)?, self.subset(&hold)?))
    }

    /// Writes `label,f0,...,f{d-1}` rows. Values use the shortest decimal
    /// form that parses back to the same `f64`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["label".to_string()];
        header.extend((0..self.feature_dim()).map(|k| format!("f{k}")));
        w.write_record(&header)?;
        for (i, &l) in self.labels.iter().enumerate() {
            let mut rec = vec![l.to_string()];
            rec.extend(self.features.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
        let header = r.headers()?.clone();
        let dim = header.len().saturating_sub(1);
        let header_ok = header.get(0) == Some("label")
            && dim >= 1
            && header.iter().skip(1).enumerate().all(|(k, h)| h == format!("f{k}"));
        if !header_ok {
            return Err(Error::Dataset { line: 1, reason: "header must be label,f0,f1,...".into() });
        }
        let mut labels = Vec::new();
        let mut data = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() != dim + 1 {
                return Err(Error::Dataset { line, reason: format!("expected {} fields, found {}", dim + 1, rec.len()) });
            }
            let label: Label = rec[0]
                .trim()
                .parse()
                .map_err(|e| Error::Dataset { line, reason: format!("bad label '{}': {e}", &rec[0]) })?;
            labels.push(label);
            for field in rec.iter().skip(1) {
                let v: Real = field
                    .trim()
                    .parse()
                    .map_err(|e| Error::Dataset { line, reason: format!("bad value '{field}': {e}") })?;
                if !v.is_finite() {
                    return Err(Error::Dataset { line, reason: format!("non-finite value '{field}'") });
                }
                data.push(v);
            }
        }
        if labels.is_empty() {
            return Err(Error::Dataset { line: 1, reason: "no samples".into() });
        }
        Self::new(EmbeddingMatrix::new(labels.len(), dim, data)?, labels)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn class_means(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<Real>> {
    (0..cfg.classes)
        .map(|_| loop {
            let v: Vec<Real> = (0..cfg.feature_dim).map(|_| StandardNormal.sample(rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<Real>().sqrt();
            if n > 1e-12 {
                break v.into_iter().map(|x| x / n).collect();
            }
        })
        .collect()
}

fn draw_samples(cfg: &SyntheticConfig, means: &[Vec<Real>], rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let mut data = Vec::with_capacity(cfg.classes * cfg.per_class * cfg.feature_dim);
    let mut labels = Vec::with_capacity(cfg.classes * cfg.per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..cfg.per_class {
            for &m in mean {
                let z: Real = StandardNormal.sample(rng);
                data.push(m + cfg.noise_sigma * z);
            }
            labels.push(c as Label);
        }
    }
    Dataset::new(EmbeddingMatrix::new(labels.len(), cfg.feature_dim, data)?, labels)
}

/// Gaussian clusters around class means drawn uniformly on the unit sphere.
/// Rows are grouped by class; the output is a pure function of `cfg`.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let means = class_means(cfg, &mut rng);
    draw_samples(cfg, &means, &mut rng)
}

/// [`generate_synthetic`] plus an independent draw of the same size around
/// the same class means, for held-out evaluation.
pub fn generate_synthetic_split(cfg: &SyntheticConfig) -> Result<(Dataset, Dataset)> {
    let train = generate_synthetic(cfg)?;
    let means = class_means(cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let test = draw_samples(cfg, &means, &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ HOLDOUT_STREAM))?;
    Ok((train, test))
}
