//! Desk-scale training of a linear embedder with the ranking losses.
//!
//! Each step embeds a batch, lets every batch element query the others,
//! averages the per-query losses and back-propagates the score gradients
//! through the cosine map into the projection.

mod checkpoint;
mod data;
mod optim;
mod sampler;

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

pub use checkpoint::{load_checkpoint, save_checkpoint, ModelParams};
pub use data::{generate_synthetic, generate_synthetic_split, Dataset, SyntheticConfig};
pub use optim::{LrSchedule, OptimizerConfig, OptimizerKind, OptimizerState};
pub use sampler::{category_pair_batches, m_per_class_batches, Category, SamplerConfig};

use crate::decomp::{dataset_gap, BatchAssignment, DatasetGap};
use crate::embedding::{build_instance, cosine_similarity, cosine_similarity_backward};
use crate::metrics::{evaluate, MetricsReport};
use crate::{EmbeddingMatrix, Error, Label, LossConfig, LossKind, Real, Result, SurrogateConfig};

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub surrogate: SurrogateConfig,
    pub loss_cfg: LossConfig,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub sampler: SamplerConfig,
    pub embed_dim: usize,
    pub seed: u64,
    /// Batches of the stratified split used to measure the gap each epoch;
    /// 0 disables the probe.
    pub probe_batches: usize,
    pub eval_ks: Vec<usize>,
}

impl TrainConfig {
    /// ROADMAP with default hyperparameters, Adam at 1e-3 with step decay,
    /// batches of 32 with 4 samples per class, 16-dimensional embeddings.
    pub fn new(loss: LossKind, epochs: usize) -> Self {
        Self {
            loss,
            surrogate: SurrogateConfig::default(),
            loss_cfg: LossConfig::default(),
            optimizer: OptimizerConfig::adam(LrSchedule::step_decay(1e-3, epochs)),
            epochs,
            sampler: SamplerConfig::MPerClass { batch_size: 32, m: 4 },
            embed_dim: 16,
            seed: 0,
            probe_batches: 4,
            eval_ks: vec![1, 2, 4, 8],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Domain("epochs must be at least 1".into()));
        }
        if self.embed_dim == 0 {
            return Err(Error::Domain("embed_dim must be at least 1".into()));
        }
        if self.eval_ks.contains(&0) {
            return Err(Error::Domain("recall@k needs k >= 1".into()));
        }
        self.optimizer.validate()
    }
}

/// One completed epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: Real,
    pub mean_loss: Real,
    pub batches: usize,
    pub skipped_batches: usize,
    pub metrics: MetricsReport,
    /// Mean per-query gap on the evaluation split; `None` when disabled or
    /// when the split leaves some batch without positives.
    pub probe: Option<DatasetGap>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn losses(&self) -> Vec<Real> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }

    /// One JSON object per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for e in &self.epochs {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_jsonl(std::io::BufWriter::new(std::fs::File::create(path)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: TrainHistory,
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (epoch as u64).wrapping_add(1).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

/// Mean in-batch loss and its gradient with respect to the batch embeddings.
///
/// Returns `None` when no batch element has an in-batch positive.
pub fn batch_loss(
    embeddings: &EmbeddingMatrix,
    labels: &[Label],
    loss: LossKind,
    cfg: &SurrogateConfig,
    lcfg: &LossConfig,
) -> Result<Option<(Real, EmbeddingMatrix)>> {
    let n = embeddings.rows();
    let mut grad = EmbeddingMatrix::zeros(n, embeddings.dim())?;
    let mut total = 0.0;
    let mut valid = 0usize;
    for q in 0..n {
        let instance = build_instance(labels, q)?;
        if instance.is_flagged() {
            continue;
        }
        let query = embeddings.row(q);
        let scores = cosine_similarity(query, embeddings)?;
        let out = loss.evaluate(&scores, &instance, cfg, lcfg)?;
        let (gq, gg) = cosine_similarity_backward(query, embeddings, &out.grad)?;
        for j in 0..n {
            for (a, b) in grad.row_mut(j).iter_mut().zip(gg.row(j)) {
                *a += b;
            }
        }
        for (a, b) in grad.row_mut(q).iter_mut().zip(&gq) {
            *a += b;
        }
        total += out.value;
        valid += 1;
    }
    if valid == 0 {
        return Ok(None);
    }
    let scale = 1.0 / valid as Real;
    let data = grad.into_vec().into_iter().map(|g| g * scale).collect();
    Ok(Some((total * scale, EmbeddingMatrix::new(n, embeddings.dim(), data)?)))
}

/// `Xᵀ · dE` for a linear map `E = X · W`.
fn projection_grad(features: &EmbeddingMatrix, grad_emb: &EmbeddingMatrix) -> Vec<Real> {
    let (d, e) = (features.dim(), grad_emb.dim());
    let mut out = vec![0.0; d * e];
    for i in 0..features.rows() {
        let g = grad_emb.row(i);
        for (k, &x) in features.row(i).iter().enumerate() {
            for (o, &gj) in out[k * e..(k + 1) * e].iter_mut().zip(g) {
                *o += x * gj;
            }
        }
    }
    out
}

/// Measures the current model on `eval_set`.
pub fn evaluate_model(params: &ModelParams, eval_set: &Dataset, cfg: &TrainConfig) -> Result<(MetricsReport, Option<DatasetGap>)> {
    let emb = params.embed(&eval_set.features)?;
    let metrics = evaluate(&emb, &eval_set.labels, &cfg.eval_ks)?;
    let probe = if cfg.probe_batches == 0 {
        None
    } else {
        let assignment = BatchAssignment::stratified(&eval_set.labels, cfg.probe_batches, cfg.seed)?;
        let thresholds = Some((cfg.loss_cfg.alpha(), cfg.loss_cfg.beta()));
        match dataset_gap(&emb, &eval_set.labels, &assignment, thresholds) {
            Ok(g) => Some(g),
            Err(e) => {
                log::warn!("gap probe unavailable: {e}");
                None
            }
        }
    };
    Ok((metrics, probe))
}

/// Trains from a seeded random projection. Metrics and the gap probe are
/// measured on `eval_set` after every epoch, or on the training set when
/// none is given. The result is a pure function of the inputs.
pub fn train(train_set: &Dataset, eval_set: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let params = ModelParams::random(train_set.feature_dim(), cfg.embed_dim, cfg.seed)?;
    train_from(params, train_set, eval_set, cfg)
}

/// [`train`] starting from given parameters.
pub fn train_from(mut params: ModelParams, train_set: &Dataset, eval_set: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if params.feature_dim() != train_set.feature_dim() || params.embed_dim() != cfg.embed_dim {
        return Err(Error::Shape(format!(
            "parameters are {}x{}, run needs {}x{}",
            params.feature_dim(),
            params.embed_dim(),
            train_set.feature_dim(),
            cfg.embed_dim
        )));
    }
    let eval_set = eval_set.unwrap_or(train_set);
    let mut state = OptimizerState::new(cfg.optimizer.clone(), params.as_slice().len())?;
    let mut history = TrainHistory::default();

    for epoch in 0..cfg.epochs {
        let batches = cfg.sampler.batches(&train_set.labels, epoch_seed(cfg.seed, epoch))?;
        if batches.is_empty() {
            return Err(Error::Infeasible("sampler produced no batch".into()));
        }
        let (mut loss_sum, mut used, mut skipped) = (0.0, 0usize, 0usize);
        for (b, idx) in batches.iter().enumerate() {
            let features = train_set.features.select_rows(idx)?;
            let labels: Vec<Label> = idx.iter().map(|&i| train_set.labels[i]).collect();
            let emb = params.embed(&features)?;
            match batch_loss(&emb, &labels, cfg.loss, &cfg.surrogate, &cfg.loss_cfg)? {
                Some((value, grad_emb)) => {
                    let grad = projection_grad(&features, &grad_emb);
                    state.update(params.as_mut_slice(), &grad, epoch)?;
                    loss_sum += value;
                    used += 1;
                }
                None => {
                    log::warn!("epoch {epoch}, batch {b}: no query has an in-batch positive; skipped");
                    skipped += 1;
                }
            }
        }
        let (metrics, probe) = evaluate_model(&params, eval_set, cfg)?;
        let mean_loss = if used == 0 { Real::NAN } else { loss_sum / used as Real };
        log::info!(
            "epoch {epoch}: loss {mean_loss:.6} map@r {:.4} r@1 {:?}",
            metrics.map_at_r,
            metrics.recall(1)
        );
        history.epochs.push(EpochRecord {
            epoch,
            lr: cfg.optimizer.schedule.rate(epoch),
            mean_loss,
            batches: used,
            skipped_batches: skipped,
            metrics,
            probe,
        });
    }
    Ok(TrainOutcome { params, history })
}

/// Hyperparameter varied by [`sweep`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Lambda,
    Rho,
    /// `α − β`, with `α` held fixed.
    Margin,
    Batch,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 4] = [SweepAxis::Lambda, SweepAxis::Rho, SweepAxis::Margin, SweepAxis::Batch];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Lambda => "lambda",
            SweepAxis::Rho => "rho",
            SweepAxis::Margin => "margin",
            SweepAxis::Batch => "batch",
        }
    }

    /// `base` with this hyperparameter set to `value`.
    pub fn apply(self, base: &TrainConfig, value: Real) -> Result<TrainConfig> {
        let mut cfg = base.clone();
        match self {
            SweepAxis::Lambda => cfg.loss_cfg = cfg.loss_cfg.with_lambda(value)?,
            SweepAxis::Rho => {
                let s = &cfg.surrogate;
                cfg.surrogate = SurrogateConfig::new(s.tau(), value, s.epsilon())?;
            }
            SweepAxis::Margin => {
                if !(value > 0.0) {
                    return Err(Error::Domain(format!("margin must be > 0 (beta < alpha), got {value}")));
                }
                let l = &cfg.loss_cfg;
                cfg.loss_cfg = LossConfig::new(l.lambda(), l.alpha(), l.alpha() - value)?;
            }
            SweepAxis::Batch => {
                if !(value >= 1.0 && value.fract() == 0.0) {
                    return Err(Error::Domain(format!("batch size must be a positive integer, got {value}")));
                }
                cfg.sampler = cfg.sampler.with_batch_size(value as usize);
            }
        }
        Ok(cfg)
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SweepAxis::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Domain(format!("unknown sweep axis '{s}' (expected lambda, rho, margin or batch)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: Real,
    pub map_at_r: Real,
    pub seed: u64,
}

/// One training run per `(value, seed)` pair, in that nesting order. Every
/// grid point is validated before the first run starts.
pub fn sweep(
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    base: &TrainConfig,
    axis: SweepAxis,
    values: &[Real],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::Domain("sweep needs at least one value and one seed".into()));
    }
    let configs = values.iter().map(|&v| axis.apply(base, v)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(values.len() * seeds.len());
    for (cfg, &value) in configs.iter().zip(values) {
        for &seed in seeds {
            let run = TrainConfig { seed, probe_batches: 0, ..cfg.clone() };
            let out = train(train_set, eval_set, &run)?;
            let map_at_r = out.history.last().map_or(Real::NAN, |e| e.metrics.map_at_r);
            log::info!("{axis}={value} seed={seed}: map@r {map_at_r:.4}");
            rows.push(SweepRow { value, map_at_r, seed });
        }
    }
    Ok(rows)
}

/// Writes `value,map_at_r,seed` rows.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
