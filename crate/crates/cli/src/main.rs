//! `roadmap`: generate synthetic retrieval data, train linear embedders with
//! average-precision surrogate losses, and inspect the results.
//!
//! Exit codes: 0 on success, 1 when arguments or configuration are invalid,
//! 2 when the run itself fails (I/O, infeasible data, failed check).

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use roadmap::decomp::{analyze, dataset_gap, BatchAssignment};
use roadmap::metrics::{evaluate, exact_ap};
use roadmap::oracle::{grad_check, random_instance, three_point_toy};
use roadmap::train::{
    generate_synthetic_split, load_checkpoint, save_checkpoint, sweep, train, write_sweep_csv, Category, Dataset,
    LrSchedule, OptimizerConfig, OptimizerKind, SamplerConfig, SweepAxis, SyntheticConfig, TrainConfig,
};
use roadmap::{build_instance, cosine_similarity, Label, LossConfig, LossKind, SurrogateConfig};

#[derive(Parser, Debug)]
#[command(name = "roadmap", version, about = "Average-precision surrogate losses for metric learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic Gaussian-cluster dataset as CSV.
    Gen(GenArgs),
    /// Train a linear embedder; writes a checkpoint and a JSON-lines history.
    Train(TrainArgs),
    /// Recall@K, mAP and mAP@R of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Decomposability gap of a checkpoint under a stratified batch split.
    Dg(DgArgs),
    /// Compare analytic and finite-difference loss gradients.
    Gradcheck(GradcheckArgs),
    /// Train one model per (value, seed) and write `value,map_at_r,seed` rows.
    Sweep(SweepArgs),
    /// Scores, losses and gradients of the three-point SmoothAP/SupAP example.
    Toy(ToyArgs),
}

/// Invalid input detected before any work starts.
#[derive(Debug)]
struct Invalid(String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

fn unit_interval(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

fn positive(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{v} must be a positive finite number"))
    }
}

fn non_negative(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{v} must be a finite number >= 0"))
    }
}

fn open_half(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v < 0.5 {
        Ok(v)
    } else {
        Err(format!("{v} is outside (0, 0.5)"))
    }
}

#[derive(Args, Debug, Clone)]
struct LossArgs {
    /// Weight of the calibration term (0 = SupAP only, 1 = calibration only).
    #[arg(long, default_value_t = 0.5, value_parser = unit_interval)]
    lambda: f64,
    /// Sigmoid temperature of the smooth step.
    #[arg(long, default_value_t = 0.01, value_parser = positive)]
    tau: f64,
    /// Slope of the linear branch for negatives ranked above a positive.
    #[arg(long, default_value_t = 100.0, value_parser = non_negative)]
    rho: f64,
    /// Sigmoid gradient level at which the linear branch starts.
    #[arg(long, default_value_t = 0.01, value_parser = open_half)]
    epsilon: f64,
    /// Score positives must reach.
    #[arg(long, default_value_t = 0.9)]
    alpha: f64,
    /// Score negatives must stay under (beta < alpha).
    #[arg(long, default_value_t = 0.6)]
    beta: f64,
}

impl LossArgs {
    fn configs(&self) -> anyhow::Result<(SurrogateConfig, LossConfig)> {
        let s = SurrogateConfig::new(self.tau, self.rho, self.epsilon)
            .map_err(|e| invalid(format!("--tau/--rho/--epsilon: {e}")))?;
        let l = LossConfig::new(self.lambda, self.alpha, self.beta)
            .map_err(|e| invalid(format!("--lambda/--alpha/--beta: {e}")))?;
        Ok((s, l))
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, flag: &str) -> anyhow::Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse::<T>().map_err(|e| invalid(format!("{flag}: bad entry '{t}': {e}"))))
        .collect()
}

fn parse_ks(s: &str) -> anyhow::Result<Vec<usize>> {
    let ks: Vec<usize> = parse_list(s, "--ks")?;
    if ks.is_empty() || ks.contains(&0) {
        return Err(invalid("--ks: need one or more values >= 1"));
    }
    Ok(ks)
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    per_class: usize,
    /// Feature dimension.
    #[arg(long, default_value_t = 32)]
    dim: usize,
    /// Standard deviation of the per-coordinate Gaussian noise.
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Also write an independent draw around the same class means.
    #[arg(long)]
    test_out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct RecipeArgs {
    /// supap, smoothap, calibration or roadmap.
    #[arg(long, default_value = "roadmap")]
    loss: LossKind,
    #[command(flatten)]
    loss_args: LossArgs,
    /// Batch size.
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Samples per class in every batch.
    #[arg(long, default_value_t = 4)]
    m: usize,
    /// CSV `label,category` rows; switches to the category-pair sampler.
    #[arg(long)]
    categories: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    /// Base learning rate; decays by x0.3 at 60% and 80% of the epochs.
    #[arg(long, default_value_t = 1e-3, value_parser = non_negative)]
    lr: f64,
    /// adam or sgd (momentum 0.9).
    #[arg(long, default_value = "adam")]
    optimizer: OptimizerKind,
    #[arg(long, default_value_t = 16)]
    embed_dim: usize,
    /// Batches of the per-epoch gap probe (0 disables it).
    #[arg(long, default_value_t = 4)]
    probe_batches: usize,
    /// Recall@K cut-offs recorded in the history.
    #[arg(long, default_value = "1,2,4,8")]
    ks: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl RecipeArgs {
    fn config(&self) -> anyhow::Result<TrainConfig> {
        let (surrogate, loss_cfg) = self.loss_args.configs()?;
        if self.epochs == 0 {
            return Err(invalid("--epochs: must be at least 1"));
        }
        if self.embed_dim == 0 {
            return Err(invalid("--embed-dim: must be at least 1"));
        }
        if self.m < 2 {
            return Err(invalid(format!("--m: need at least 2 samples per class, got {}", self.m)));
        }
        if self.batch == 0 || !self.batch.is_multiple_of(self.m) {
            return Err(invalid(format!("--batch: {} is not a positive multiple of --m {}", self.batch, self.m)));
        }
        let schedule = LrSchedule::step_decay(self.lr, self.epochs);
        let optimizer = match self.optimizer {
            OptimizerKind::Adam => OptimizerConfig::adam(schedule),
            OptimizerKind::Sgd => OptimizerConfig::sgd(schedule),
        };
        let sampler = match &self.categories {
            None => SamplerConfig::MPerClass { batch_size: self.batch, m: self.m },
            Some(path) => SamplerConfig::CategoryPairs { batch_size: self.batch, m: self.m, categories: read_categories(path)? },
        };
        Ok(TrainConfig {
            loss: self.loss,
            surrogate,
            loss_cfg,
            optimizer,
            epochs: self.epochs,
            sampler,
            embed_dim: self.embed_dim,
            seed: self.seed,
            probe_batches: self.probe_batches,
            eval_ks: parse_ks(&self.ks)?,
        })
    }
}

fn read_categories(path: &Path) -> anyhow::Result<BTreeMap<Label, Category>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line.starts_with("label")) {
            continue;
        }
        let parsed = line
            .split_once(',')
            .and_then(|(l, c)| Some((l.trim().parse::<Label>().ok()?, c.trim().parse::<Category>().ok()?)));
        let (l, c) = parsed.ok_or_else(|| invalid(format!("--categories: line {}: expected 'label,category'", n + 1)))?;
        out.insert(l, c);
    }
    Ok(out)
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training CSV.
    #[arg(long)]
    data: PathBuf,
    /// CSV the history metrics are measured on (defaults to the training data).
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[command(flatten)]
    recipe: RecipeArgs,
    /// Checkpoint output path.
    #[arg(long)]
    ckpt: PathBuf,
    /// JSON-lines history output path.
    #[arg(long)]
    history: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "1,2,4,8")]
    ks: String,
    /// JSON output path (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DgArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Number of batches the retrieval set is split into.
    #[arg(long, default_value_t = 4)]
    batches: usize,
    #[arg(long, default_value_t = 0.9)]
    alpha: f64,
    #[arg(long, default_value_t = 0.6)]
    beta: f64,
    /// Seed of the stratified split.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report a single query in full instead of the dataset mean.
    #[arg(long)]
    query: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value = "supap")]
    loss: LossKind,
    #[arg(long, default_value_t = 100)]
    trials: u64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4, value_parser = positive)]
    tol: f64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-6, value_parser = positive)]
    step: f64,
    #[command(flatten)]
    loss_args: LossArgs,
    /// Include every (analytic, numeric) pair in the report.
    #[arg(long)]
    pairs: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// lambda, rho, margin (alpha - beta) or batch.
    #[arg(long)]
    axis: SweepAxis,
    /// Comma-separated grid.
    #[arg(long)]
    values: String,
    /// Comma-separated training seeds.
    #[arg(long, default_value = "1,2,3,4,5")]
    seeds: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[command(flatten)]
    recipe: RecipeArgs,
    /// CSV output path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ToyArgs {
    #[command(flatten)]
    loss_args: LossArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_dataset(path: &Path) -> anyhow::Result<Dataset> {
    Dataset::load(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn emit_json(value: &serde_json::Value, out: Option<&Path>) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match out {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn cmd_gen(a: &GenArgs) -> anyhow::Result<()> {
    let cfg = SyntheticConfig { classes: a.classes, per_class: a.per_class, feature_dim: a.dim, noise_sigma: a.sigma, seed: a.seed };
    cfg.validate().map_err(|e| invalid(format!("--classes/--per-class/--dim/--sigma: {e}")))?;
    let (train_set, test_set) = generate_synthetic_split(&cfg)?;
    train_set.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(path) = &a.test_out {
        test_set.save(path).with_context(|| format!("writing {}", path.display()))?;
    }
    log::info!("wrote {} samples to {}", train_set.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> anyhow::Result<()> {
    let cfg = a.recipe.config()?;
    let train_set = load_dataset(&a.data)?;
    let eval_set = a.eval_data.as_deref().map(load_dataset).transpose()?;
    let out = train(&train_set, eval_set.as_ref(), &cfg)?;
    save_checkpoint(&out.params, &a.ckpt).with_context(|| format!("writing {}", a.ckpt.display()))?;
    out.history.save(&a.history).with_context(|| format!("writing {}", a.history.display()))?;
    if let Some(last) = out.history.last() {
        println!(
            "epoch {}: loss {:.6}, mAP@R {:.4}, R@1 {}",
            last.epoch,
            last.mean_loss,
            last.metrics.map_at_r,
            last.metrics.recall(1).map_or("-".into(), |r| format!("{r:.4}"))
        );
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> anyhow::Result<()> {
    let ks = parse_ks(&a.ks)?;
    let data = load_dataset(&a.data)?;
    let params = load_checkpoint(&a.ckpt).with_context(|| format!("reading checkpoint {}", a.ckpt.display()))?;
    let report = evaluate(&params.embed(&data.features)?, &data.labels, &ks)?;
    emit_json(&serde_json::to_value(&report)?, a.out.as_deref())
}

fn cmd_dg(a: &DgArgs) -> anyhow::Result<()> {
    if a.batches == 0 {
        return Err(invalid("--batches: must be at least 1"));
    }
    if a.beta.partial_cmp(&a.alpha) != Some(std::cmp::Ordering::Less) {
        return Err(invalid(format!("--alpha/--beta: need beta < alpha, got {} and {}", a.alpha, a.beta)));
    }
    let data = load_dataset(&a.data)?;
    let params = load_checkpoint(&a.ckpt).with_context(|| format!("reading checkpoint {}", a.ckpt.display()))?;
    let emb = params.embed(&data.features)?;
    let assignment = BatchAssignment::stratified(&data.labels, a.batches, a.seed)?;
    let thresholds = Some((a.alpha, a.beta));
    let value = match a.query {
        Some(q) => {
            if q >= data.len() {
                return Err(invalid(format!("--query: {q} is out of range for {} samples", data.len())));
            }
            let instance = build_instance(&data.labels, q)?;
            if instance.is_flagged() {
                return Err(anyhow!("query {q} has no positive"));
            }
            let scores = cosine_similarity(emb.row(q), &emb)?;
            let report = analyze(&scores, &instance, &assignment, thresholds).map_err(|e| anyhow!("query {q}: {e}"))?;
            serde_json::to_value(report)?
        }
        None => serde_json::to_value(dataset_gap(&emb, &data.labels, &assignment, thresholds)?)?,
    };
    emit_json(&value, a.out.as_deref())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> anyhow::Result<()> {
    if a.trials == 0 {
        return Err(invalid("--trials: must be at least 1"));
    }
    let (cfg, lcfg) = a.loss_args.configs()?;
    let mut report = grad_check(a.loss, random_instance, a.trials, a.tol, &cfg, &lcfg, a.step)?;
    let passed = report.passed;
    if !a.pairs {
        report.pairs.clear();
    }
    emit_json(&serde_json::to_value(&report)?, a.out.as_deref())?;
    eprintln!(
        "{}: max relative error {:.3e} over {} coordinates ({} skipped), tolerance {:.1e}: {}",
        a.loss,
        report.max_rel_err,
        report.checked,
        report.skipped,
        a.tol,
        if passed { "pass" } else { "FAIL" }
    );
    if passed {
        Ok(())
    } else {
        Err(anyhow!("gradient check failed"))
    }
}

fn cmd_sweep(a: &SweepArgs) -> anyhow::Result<()> {
    let base = a.recipe.config()?;
    let values: Vec<f64> = parse_list(&a.values, "--values")?;
    let seeds: Vec<u64> = parse_list(&a.seeds, "--seeds")?;
    if values.is_empty() || seeds.is_empty() {
        return Err(invalid("--values/--seeds: need at least one entry each"));
    }
    for &v in &values {
        a.axis.apply(&base, v).map_err(|e| invalid(format!("--values: {e}")))?;
    }
    let train_set = load_dataset(&a.data)?;
    let eval_set = a.eval_data.as_deref().map(load_dataset).transpose()?;
    let rows = sweep(&train_set, eval_set.as_ref(), &base, a.axis, &values, &seeds)?;
    let file = std::fs::File::create(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    write_sweep_csv(&rows, std::io::BufWriter::new(file))?;
    Ok(())
}

fn cmd_toy(a: &ToyArgs) -> anyhow::Result<()> {
    let (cfg, lcfg) = a.loss_args.configs()?;
    let (scores, instance) = three_point_toy();
    let ap_loss = 1.0 - exact_ap(&scores, &instance)?;
    let mut losses = serde_json::Map::new();
    println!("scores: s1 = {}, s2 = {} (positives), s3 = {} (negative)", scores[0], scores[1], scores[2]);
    println!("exact AP loss: {ap_loss:.6}");
    for kind in [LossKind::SmoothAp, LossKind::SupAp] {
        let out = kind.evaluate(&scores, &instance, &cfg, &lcfg)?;
        let g = &out.grad;
        println!(
            "{kind:>8}: loss {:.6} ({}), dL/ds = [{:+.6e}, {:+.6e}, {:+.6e}], dL/ds1 + dL/ds2 = {:+.3e}",
            out.value,
            if out.value >= ap_loss { "upper bound holds" } else { "below the AP loss" },
            g[0],
            g[1],
            g[2],
            g[0] + g[1]
        );
        losses.insert(
            kind.name().into(),
            json!({ "loss": out.value, "grad": out.grad, "antisymmetry_residual": g[0] + g[1], "upper_bound": out.value >= ap_loss }),
        );
    }
    let value = json!({ "scores": scores, "positives": instance.positives, "negatives": instance.negatives, "exact_ap_loss": ap_loss, "losses": losses });
    if let Some(path) = &a.out {
        emit_json(&value, Some(path))?;
    }
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Dg(a) => cmd_dg(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Toy(a) => cmd_toy(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<Invalid>().is_some() => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
