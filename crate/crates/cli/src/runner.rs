//! Experiment orchestration: builds per-seed worlds, trains, and writes the
//! results directory (round CSV + JSON history per seed, an aggregate
//! summary, a heterogeneity survey, trend tables, and a manifest that pins
//! everything needed to reproduce the bytes).

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use falsim_core::adversary::{self, EvalStreams};
use falsim_core::core_math::{RngStream, StreamKey, SERVER};
use falsim_core::data::{self, Dataset, ClientPartition};
use falsim_core::federation::{self, EvalPlan, RoundRecord, TrainSetup};
use falsim_core::metrics::{
    self, BoundInputs, HeterogeneityReport, ServerAlgo, StabilityConfig, StabilityEstimate,
    TvMethod,
};
use falsim_core::models::{self, SmoothnessConstants, WidthCheck};
use falsim_core::smoothing::Method;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{invalid, runtime, CliResult, ExperimentConfig, ModelKind};

/// Fixed column order of the per-seed round table.
pub const CSV_HEADER: &str = "round,t,alpha,m_tilde,train_robust_loss,test_robust_loss,\
train_robust_acc,test_robust_acc,loss_gap,acc_gap";

/// One seed's training inputs.
pub struct SeedWorld {
    pub train: Dataset,
    pub test: Dataset,
    pub partitions: Vec<ClientPartition>,
}

/// Builds (or loads) the datasets and the client partition for one seed.
/// Generated data is redrawn per seed; CSV sources are fixed across seeds
/// and only the partition varies.
pub fn build_world(cfg: &ExperimentConfig, seed: u64) -> CliResult<SeedWorld> {
    let (train, test) = match &cfg.data.source {
        Some(src) => {
            let train = data::load_csv(src)
                .map_err(|e| invalid(format!("data.source {}: {e}", src.display())))?;
            let tsrc = cfg
                .data
                .test_source
                .as_ref()
                .ok_or_else(|| invalid("data.test_source is required when data.source is set"))?;
            let test = data::load_csv(tsrc)
                .map_err(|e| invalid(format!("data.test_source {}: {e}", tsrc.display())))?;
            if train.input_dim() != cfg.data.dim {
                return Err(invalid(format!(
                    "data.dim ({}) does not match the csv feature dimension ({})",
                    cfg.data.dim,
                    train.input_dim()
                )));
            }
            if test.input_dim() != train.input_dim() {
                return Err(invalid(format!(
                    "test csv feature dimension ({}) does not match the training csv ({})",
                    test.input_dim(),
                    train.input_dim()
                )));
            }
            match (cfg.model.kind, train.classes) {
                (ModelKind::Mlp, None) => {
                    return Err(invalid(
                        "the mlp classifier needs class labels; the csv has real-valued \
                         labels (use the shallow_net model)",
                    ))
                }
                (ModelKind::Mlp, Some(k)) if k != cfg.data.classes => {
                    return Err(invalid(format!(
                        "data.classes ({}) does not match the csv label count ({k})",
                        cfg.data.classes
                    )));
                }
                (ModelKind::ShallowNet, Some(_)) => {
                    return Err(invalid(
                        "the shallow regressor needs real-valued labels; the csv has \
                         class labels (use the mlp model)",
                    ))
                }
                _ => {}
            }
            (train, test)
        }
        None => {
            let mut gen_rng = RngStream::new(seed, &StreamKey::new(0, SERVER, "gen-train"));
            let train = data::generate_synthetic(
                cfg.data.classes,
                cfg.data.dim,
                cfg.data.per_class,
                cfg.data.separation,
                "train",
                seed,
                &mut gen_rng,
            )
            .map_err(invalid)?;
            let mut gen_rng = RngStream::new(seed, &StreamKey::new(0, SERVER, "gen-test"));
            let test = data::generate_synthetic(
                cfg.data.classes,
                cfg.data.dim,
                cfg.data.test_per_class,
                cfg.data.separation,
                "test",
                seed,
                &mut gen_rng,
            )
            .map_err(invalid)?;
            (train, test)
        }
    };
    let mut part_rng = RngStream::new(seed, &StreamKey::new(0, SERVER, "partition"));
    let partitions = data::partition_skew(&train, cfg.data.clients, cfg.data.skew, &mut part_rng)
        .map_err(invalid)?;
    Ok(SeedWorld {
        train,
        test,
        partitions,
    })
}

/// Everything measured from one seed's run.
pub struct SeedRun {
    pub seed: u64,
    pub records: Vec<RoundRecord>,
    pub warnings: Vec<String>,
    /// Robust training loss of the freshly initialized model.
    pub initial_train_loss: f64,
    /// Slack value of the final round (0 when the rule never set one).
    pub final_alpha: f64,
    pub heterogeneity: HeterogeneityReport,
    pub n_min: usize,
}

impl SeedRun {
    /// Evaluated-round metric rows, in round order.
    fn evaluated(&self) -> Vec<&RoundRecord> {
        self.records
            .iter()
            .filter(|r| r.metrics.is_some())
            .collect()
    }

    /// Measured optimization progress: initial robust training loss minus
    /// the best robust training loss seen, floored at zero. `None` without
    /// evaluated rounds.
    fn delta(&self) -> Option<f64> {
        let best = self
            .evaluated()
            .iter()
            .map(|r| r.metrics.as_ref().expect("evaluated").train_robust_loss)
            .fold(f64::INFINITY, f64::min);
        best.is_finite()
            .then(|| (self.initial_train_loss - best).max(0.0))
    }
}

/// Trains one seed end to end and measures heterogeneity under the final
/// model.
pub fn train_seed(cfg: &ExperimentConfig, seed: u64) -> CliResult<SeedRun> {
    let spec = cfg.model_spec();
    let world = build_world(cfg, seed)?;
    let smoothing = cfg.smoothing_config();
    let attack = cfg.attack_config();
    let aggregation = cfg.aggregation_config();
    let setup = TrainSetup {
        spec: &spec,
        dataset: &world.train,
        partitions: &world.partitions,
        smoothing: &smoothing,
        attack: &attack,
        aggregation: &aggregation,
        optimizer: cfg.optimizer_config(),
        batch_size: cfg.training.batch,
        root_seed: seed,
        sfal_lr_scaling: cfg.training.sfal_lr_scaling,
    };

    let init = federation::initial_params(&spec, seed).map_err(runtime)?;
    let init_eval = adversary::robust_eval(
        &attack,
        &spec,
        &init,
        &world.train.samples,
        &EvalStreams::new(seed, 0, "eval-init-train"),
    )
    .map_err(runtime)?;

    let plan = EvalPlan {
        test: &world.test,
        every: cfg.training.eval_every,
    };
    let out = federation::train(&setup, cfg.training.rounds, Some(&plan)).map_err(runtime)?;

    let tv_method = if world.train.classes.is_some() {
        TvMethod::LabelMarginal
    } else {
        TvMethod::ProjectedHistogram
    };
    let heterogeneity = metrics::heterogeneity_report(
        &attack,
        &spec,
        &out.params,
        &world.train,
        &world.partitions,
        tv_method,
        seed,
        cfg.training.rounds as u64,
    )
    .map_err(runtime)?;

    let final_alpha = out.records.last().map(|r| r.alpha).unwrap_or(0.0);
    let n_min = world
        .partitions
        .iter()
        .map(ClientPartition::len)
        .min()
        .unwrap_or(0);
    Ok(SeedRun {
        seed,
        records: out.records,
        warnings: out.warnings,
        initial_train_loss: init_eval.loss,
        final_alpha,
        heterogeneity,
        n_min,
    })
}

/// Sample mean and (n−1) standard deviation; std is 0 for fewer than two
/// points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
}

pub fn stats(xs: &[f64]) -> Stats {
    let n = xs.len();
    if n == 0 {
        return Stats { mean: 0.0, std: 0.0 };
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return Stats { mean, std: 0.0 };
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n as f64 - 1.0);
    Stats {
        mean,
        std: var.sqrt(),
    }
}

fn opt_stats(per_seed: &[Option<f64>]) -> Option<Stats> {
    let values: Option<Vec<f64>> = per_seed.iter().copied().collect();
    values.as_deref().map(stats)
}

/// Cross-seed statistics for one evaluated round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundAgg {
    pub round: u64,
    pub t: u64,
    pub train_robust_loss: Stats,
    pub test_robust_loss: Stats,
    pub train_robust_acc: Option<Stats>,
    pub test_robust_acc: Option<Stats>,
    pub loss_gap: Stats,
    pub acc_gap: Option<Stats>,
}

/// Per-seed values with their cross-seed statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapStats {
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

fn gap_stats(per_seed: Vec<f64>) -> GapStats {
    let s = stats(&per_seed);
    GapStats {
        per_seed,
        mean: s.mean,
        std: s.std,
    }
}

/// Run-level generalization gap: each seed's gap averaged over its final
/// ceil(E/4) evaluated rounds (E = number of evaluated rounds), then
/// summarized across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunGapSummary {
    /// How many trailing evaluated rounds the window covers.
    pub window_rounds: usize,
    pub loss_gap: GapStats,
    pub acc_gap: Option<GapStats>,
}

/// Bound-score block: measured inputs and the score of each trainer under
/// the configured server algorithm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundSummary {
    pub algo: ServerAlgo,
    pub inputs: BoundInputs,
    pub scores: BTreeMap<String, f64>,
}

/// The aggregate written to summary.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seeds: Vec<u64>,
    pub rounds: Vec<RoundAgg>,
    pub run_gap: Option<RunGapSummary>,
    pub bound: Option<BoundSummary>,
    pub warnings: Vec<String>,
}

fn round_aggregates(runs: &[SeedRun]) -> CliResult<Vec<RoundAgg>> {
    let first = match runs.first() {
        Some(r) => r,
        None => return Ok(Vec::new()),
    };
    let mut out = Vec::new();
    for (t, record) in first.records.iter().enumerate() {
        if record.metrics.is_none() {
            continue;
        }
        let mut train_loss = Vec::new();
        let mut test_loss = Vec::new();
        let mut train_acc = Vec::new();
        let mut test_acc = Vec::new();
        let mut loss_gap = Vec::new();
        let mut acc_gap = Vec::new();
        for run in runs {
            let rec = run.records.get(t).ok_or_else(|| {
                runtime(format!(
                    "seed {} is missing round {} present under seed {}",
                    run.seed, record.round, first.seed
                ))
            })?;
            let m = rec.metrics.as_ref().ok_or_else(|| {
                runtime(format!(
                    "seed {} did not evaluate round {} evaluated under seed {}",
                    run.seed, rec.round, first.seed
                ))
            })?;
            train_loss.push(m.train_robust_loss);
            test_loss.push(m.test_robust_loss);
            train_acc.push(m.train_robust_acc);
            test_acc.push(m.test_robust_acc);
            loss_gap.push(m.loss_gap);
            acc_gap.push(m.acc_gap);
        }
        out.push(RoundAgg {
            round: record.round,
            t: record.t,
            train_robust_loss: stats(&train_loss),
            test_robust_loss: stats(&test_loss),
            train_robust_acc: opt_stats(&train_acc),
            test_robust_acc: opt_stats(&test_acc),
            loss_gap: stats(&loss_gap),
            acc_gap: opt_stats(&acc_gap),
        });
    }
    Ok(out)
}

fn run_gap_summary(runs: &[SeedRun]) -> Option<RunGapSummary> {
    let evaluated = runs.first()?.evaluated().len();
    if evaluated == 0 {
        return None;
    }
    let window = evaluated.div_ceil(4);
    let mut loss = Vec::new();
    let mut acc = Vec::new();
    for run in runs {
        let rows = run.evaluated();
        let tail = &rows[rows.len().saturating_sub(window)..];
        let metric = |f: &dyn Fn(&falsim_core::federation::RoundMetrics) -> f64| {
            tail.iter()
                .map(|r| f(r.metrics.as_ref().expect("evaluated")))
                .sum::<f64>()
                / tail.len() as f64
        };
        loss.push(metric(&|m| m.loss_gap));
        let accs: Option<Vec<f64>> = tail
            .iter()
            .map(|r| r.metrics.as_ref().expect("evaluated").acc_gap)
            .collect();
        acc.push(accs.map(|v| v.iter().sum::<f64>() / v.len() as f64));
    }
    let acc: Option<Vec<f64>> = acc.into_iter().collect();
    Some(RunGapSummary {
        window_rounds: window,
        loss_gap: gap_stats(loss),
        acc_gap: acc.map(gap_stats),
    })
}

fn bound_summary(cfg: &ExperimentConfig, runs: &[SeedRun]) -> Option<BoundSummary> {
    if cfg.training.rounds == 0 {
        return None;
    }
    let deltas: Option<Vec<f64>> = runs.iter().map(SeedRun::delta).collect();
    let deltas = deltas?;
    let s = match cfg.model.kind {
        ModelKind::ShallowNet => cfg.model.width,
        ModelKind::Mlp => *cfg.model.hidden.first().unwrap_or(&cfg.data.classes),
    };
    let m = cfg.data.clients;
    let inputs = BoundInputs {
        rho: cfg.attack.rho,
        t_rounds: cfg.training.rounds as f64,
        m: m as f64,
        n_min: runs.iter().map(|r| r.n_min).min().unwrap_or(1).max(1) as f64,
        q: cfg.smoothing.q as f64,
        s: s.max(1) as f64,
        d_max: stats(&runs.iter().map(|r| r.heterogeneity.d_max).collect::<Vec<_>>()).mean,
        delta: stats(&deltas).mean,
        sigma: 1.0,
        alpha: stats(&runs.iter().map(|r| r.final_alpha).collect::<Vec<_>>()).mean,
        m_hat: cfg.aggregation_config().resolved_m_hat(m) as f64,
    };
    let mut scores = BTreeMap::new();
    for method in [Method::Ssa, Method::Rsa, Method::Opsa] {
        let score = metrics::bound_score(method, cfg.algo, &inputs).ok()?;
        scores.insert(method.to_string(), score);
    }
    Some(BoundSummary {
        algo: cfg.algo,
        inputs,
        scores,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Renders round records as CSV with the fixed column order.
pub fn rounds_csv(records: &[RoundRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let m = r.metrics.as_ref();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.round,
            r.t,
            r.alpha,
            r.m_tilde,
            fmt_opt(m.map(|m| m.train_robust_loss)),
            fmt_opt(m.map(|m| m.test_robust_loss)),
            fmt_opt(m.and_then(|m| m.train_robust_acc)),
            fmt_opt(m.and_then(|m| m.test_robust_acc)),
            fmt_opt(m.map(|m| m.loss_gap)),
            fmt_opt(m.and_then(|m| m.acc_gap)),
        ));
    }
    out
}

/// One row of a trend table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrendPoint {
    pub x: f64,
    pub algo: String,
    pub method: String,
    pub seeds: usize,
    pub mean_acc_gap: Option<f64>,
    pub std_acc_gap: Option<f64>,
    pub mean_loss_gap: f64,
    pub std_loss_gap: f64,
}

/// Renders trend points as CSV, sorted ascending in x (ties by series).
/// Needs at least two points, and every x must carry the same set of
/// (algo, method) series.
pub fn emit_trend(points: &[TrendPoint]) -> CliResult<String> {
    if points.len() < 2 {
        return Err(runtime(format!(
            "a trend needs at least two points, got {}",
            points.len()
        )));
    }
    for p in points {
        if !p.x.is_finite() {
            return Err(runtime(format!("trend x values must be finite, got {}", p.x)));
        }
    }
    let mut by_x: BTreeMap<u64, BTreeSet<(String, String)>> = BTreeMap::new();
    for p in points {
        by_x
            .entry(p.x.to_bits())
            .or_default()
            .insert((p.algo.clone(), p.method.clone()));
    }
    let mut shapes = by_x.values();
    let first = shapes.next().expect("at least one x");
    if shapes.any(|s| s != first) {
        return Err(runtime(
            "mismatched sweep shapes: every x must carry the same (algo, method) series",
        ));
    }
    let mut sorted: Vec<&TrendPoint> = points.iter().collect();
    sorted.sort_by(|a, b| {
        a.x.partial_cmp(&b.x)
            .expect("finite")
            .then_with(|| a.algo.cmp(&b.algo))
            .then_with(|| a.method.cmp(&b.method))
    });
    let mut out =
        String::from("x,algo,method,seeds,mean_acc_gap,std_acc_gap,mean_loss_gap,std_loss_gap\n");
    for p in sorted {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            p.x,
            p.algo,
            p.method,
            p.seeds,
            fmt_opt(p.mean_acc_gap),
            fmt_opt(p.std_acc_gap),
            p.mean_loss_gap,
            p.std_loss_gap,
        ));
    }
    Ok(out)
}

fn trend_point(cfg: &ExperimentConfig, x: f64, summary: &RunSummary) -> CliResult<TrendPoint> {
    let gap = summary
        .run_gap
        .as_ref()
        .ok_or_else(|| runtime("a trend point needs at least one evaluated round"))?;
    Ok(TrendPoint {
        x,
        algo: cfg.algo.to_string(),
        method: cfg.smoothing.method.to_string(),
        seeds: summary.seeds.len(),
        mean_acc_gap: gap.acc_gap.as_ref().map(|g| g.mean),
        std_acc_gap: gap.acc_gap.as_ref().map(|g| g.std),
        mean_loss_gap: gap.loss_gap.mean,
        std_loss_gap: gap.loss_gap.std,
    })
}

/// Reproduction pin: tool version, the fully explicit configuration, and a
/// digest of every file the command wrote. Rerunning the echoed config
/// reproduces the files byte for byte at any thread count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub command: String,
    pub config: ExperimentConfig,
    pub files: BTreeMap<String, String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for b in digest {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}

/// Collects written files: relative name (forward slashes) → content.
struct OutputSet {
    dir: PathBuf,
    files: BTreeMap<String, String>,
}

impl OutputSet {
    fn new(dir: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(dir)
            .map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))?;
        Ok(OutputSet {
            dir: dir.to_path_buf(),
            files: BTreeMap::new(),
        })
    }

    fn write(&mut self, name: &str, content: String) -> CliResult<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|e| runtime(format!("cannot create {}: {e}", parent.display())))?;
        }
        std::fs::write(&path, &content)
            .map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))?;
        self.files.insert(name.to_string(), content);
        Ok(())
    }

    fn finish(mut self, command: &str, cfg: &ExperimentConfig) -> CliResult<()> {
        let digests: BTreeMap<String, String> = self
            .files
            .iter()
            .map(|(name, content)| (name.clone(), sha256_hex(content.as_bytes())))
            .collect();
        let manifest = Manifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config: cfg.clone(),
            files: digests,
        };
        let text = to_pretty_json(&manifest)?;
        let path = self.dir.join("manifest.json");
        std::fs::write(&path, &text)
            .map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))?;
        self.files.clear();
        Ok(())
    }
}

fn to_pretty_json<T: Serialize>(value: &T) -> CliResult<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(runtime)?;
    s.push('\n');
    Ok(s)
}

#[derive(Serialize, Deserialize)]
struct SeedHeterogeneity {
    seed: u64,
    report: HeterogeneityReport,
}

/// Trains every seed under one configuration and writes the results
/// directory.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path) -> CliResult<RunSummary> {
    let mut out = OutputSet::new(dir)?;
    out.write("config.json", cfg.echo())?;

    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let run = train_seed(cfg, seed)?;
        out.write(&format!("seed_{seed}/rounds.csv"), rounds_csv(&run.records))?;
        out.write(
            &format!("seed_{seed}/history.json"),
            to_pretty_json(&run.records)?,
        )?;
        runs.push(run);
    }

    let mut warnings: BTreeSet<String> = BTreeSet::new();
    for run in &runs {
        warnings.extend(run.warnings.iter().cloned());
    }
    let summary = RunSummary {
        seeds: cfg.seeds.clone(),
        rounds: round_aggregates(&runs)?,
        run_gap: run_gap_summary(&runs),
        bound: bound_summary(cfg, &runs),
        warnings: warnings.into_iter().collect(),
    };
    out.write("summary.json", to_pretty_json(&summary)?)?;

    let heterogeneity: Vec<SeedHeterogeneity> = runs
        .iter()
        .map(|r| SeedHeterogeneity {
            seed: r.seed,
            report: r.heterogeneity.clone(),
        })
        .collect();
    out.write("heterogeneity.json", to_pretty_json(&heterogeneity)?)?;

    if summary.rounds.len() >= 2 {
        let points: Vec<TrendPoint> = summary
            .rounds
            .iter()
            .map(|agg| TrendPoint {
                x: agg.round as f64,
                algo: cfg.algo.to_string(),
                method: cfg.smoothing.method.to_string(),
                seeds: cfg.seeds.len(),
                mean_acc_gap: agg.acc_gap.map(|s| s.mean),
                std_acc_gap: agg.acc_gap.map(|s| s.std),
                mean_loss_gap: agg.loss_gap.mean,
                std_loss_gap: agg.loss_gap.std,
            })
            .collect();
        out.write("trend_rounds.csv", emit_trend(&points)?)?;
    }

    out.finish("run", cfg)?;
    Ok(summary)
}

/// A swept axis: which knob varies and the values it takes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VaryKey {
    Rho,
    Skew,
    Clients,
    Q,
    Rounds,
}

impl VaryKey {
    pub fn as_str(self) -> &'static str {
        match self {
            VaryKey::Rho => "rho",
            VaryKey::Skew => "a",
            VaryKey::Clients => "m",
            VaryKey::Q => "q",
            VaryKey::Rounds => "rounds",
        }
    }

    fn is_integral(self) -> bool {
        matches!(self, VaryKey::Clients | VaryKey::Q | VaryKey::Rounds)
    }
}

/// Parses `--vary key=v1,v2,...`. Accepts the short axis names (a, m) and
/// the config field names (skew, clients) interchangeably.
pub fn parse_vary(spec: &str) -> CliResult<(VaryKey, Vec<f64>)> {
    let (key, rest) = spec.split_once('=').ok_or_else(|| {
        invalid(format!(
            "--vary expects key=v1,v2,... (e.g. rho=0,0.25,0.5), got {spec:?}"
        ))
    })?;
    let key = match key.trim() {
        "rho" => VaryKey::Rho,
        "a" | "skew" => VaryKey::Skew,
        "m" | "clients" => VaryKey::Clients,
        "q" => VaryKey::Q,
        "rounds" | "t" => VaryKey::Rounds,
        other => {
            return Err(invalid(format!(
                "unknown sweep axis {other:?}; expected rho, a, m, q, or rounds"
            )))
        }
    };
    let mut values = Vec::new();
    for tok in rest.split(',') {
        let v: f64 = tok
            .trim()
            .parse()
            .map_err(|_| invalid(format!("--vary value {tok:?} is not a number")))?;
        if !v.is_finite() {
            return Err(invalid(format!("--vary value {v} is not finite")));
        }
        if key.is_integral() && (v.fract() != 0.0 || v < 0.0) {
            return Err(invalid(format!(
                "--vary {} takes nonnegative integers, got {v}",
                key.as_str()
            )));
        }
        values.push(v);
    }
    if values.len() < 2 {
        return Err(invalid("--vary needs at least two values"));
    }
    let mut dedup = values.clone();
    dedup.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    dedup.dedup();
    if dedup.len() != values.len() {
        return Err(invalid("--vary values must be distinct"));
    }
    Ok((key, values))
}

/// The sweep variant of the base configuration for one axis value.
pub fn apply_vary(cfg: &ExperimentConfig, key: VaryKey, value: f64) -> ExperimentConfig {
    let mut out = cfg.clone();
    match key {
        VaryKey::Rho => out.attack.rho = value,
        VaryKey::Skew => out.data.skew = value,
        VaryKey::Clients => out.data.clients = value as usize,
        VaryKey::Q => out.smoothing.q = value as usize,
        VaryKey::Rounds => out.training.rounds = value as usize,
    }
    out
}

/// Runs the configuration once per axis value (each into its own
/// subdirectory) and writes the cross-value trend table.
pub fn sweep(cfg: &ExperimentConfig, key: VaryKey, values: &[f64], dir: &Path) -> CliResult<String> {
    // every variant must be valid before any training starts
    let mut variants = Vec::with_capacity(values.len());
    for &v in values {
        let variant = apply_vary(cfg, key, v);
        variant.validate().map_err(|e| {
            invalid(format!("sweep point {}={v}: {}", key.as_str(), e.message()))
        })?;
        variant.validate_for_training().map_err(|e| {
            invalid(format!("sweep point {}={v}: {}", key.as_str(), e.message()))
        })?;
        if variant.training.rounds == 0 || variant.training.rounds < variant.training.eval_every {
            return Err(invalid(format!(
                "sweep point {}={v}: a trend needs at least one evaluated round",
                key.as_str()
            )));
        }
        variants.push((v, variant));
    }

    let mut out = OutputSet::new(dir)?;
    out.write("config.json", cfg.echo())?;
    let mut points = Vec::with_capacity(variants.len());
    for (v, variant) in &variants {
        let sub = format!("{}_{}", key.as_str(), v);
        let summary = run_experiment(variant, &dir.join(&sub))?;
        points.push(trend_point(variant, *v, &summary)?);
    }
    let trend = emit_trend(&points)?;
    out.write("trend.csv", trend.clone())?;
    out.finish("sweep", cfg)?;
    Ok(trend)
}

/// Runs the replace-one stability experiment for the configured task.
/// The dataset is fixed (drawn from the first seed); the seeds act as
/// independent draws of the training randomness.
pub fn run_stability(
    cfg: &ExperimentConfig,
    stability: &StabilityConfig,
    dir: &Path,
) -> CliResult<StabilityEstimate> {
    let data_seed = cfg.seeds[0];
    let spec = cfg.model_spec();
    let world = build_world(cfg, data_seed)?;
    if stability.client >= world.partitions.len() {
        return Err(invalid(format!(
            "stability client {} out of range (m = {})",
            stability.client,
            world.partitions.len()
        )));
    }
    let n_client = world.partitions[stability.client].len();
    if stability.indices == 0 || stability.indices > n_client {
        return Err(invalid(format!(
            "stability indices must satisfy 1 <= indices <= {n_client} (client {} holds \
             {n_client} samples), got {}",
            stability.client, stability.indices
        )));
    }
    if stability.resamples == 0 {
        return Err(invalid("stability resamples must be >= 1"));
    }

    let smoothing = cfg.smoothing_config();
    let attack = cfg.attack_config();
    let aggregation = cfg.aggregation_config();
    let setup = TrainSetup {
        spec: &spec,
        dataset: &world.train,
        partitions: &world.partitions,
        smoothing: &smoothing,
        attack: &attack,
        aggregation: &aggregation,
        optimizer: cfg.optimizer_config(),
        batch_size: cfg.training.batch,
        root_seed: data_seed,
        sfal_lr_scaling: cfg.training.sfal_lr_scaling,
    };
    let estimate =
        metrics::estimate_stability(&setup, cfg.training.rounds, stability).map_err(runtime)?;

    let mut out = OutputSet::new(dir)?;
    out.write("config.json", cfg.echo())?;
    out.write("stability.json", to_pretty_json(&estimate)?)?;
    out.finish("stability", cfg)?;
    Ok(estimate)
}

/// What `falsim check-width` prints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WidthReport {
    pub s: usize,
    pub eta0: f64,
    pub t_rounds: usize,
    pub k_epochs: usize,
    pub constants: SmoothnessConstants,
    pub width: WidthCheck,
}

/// Evaluates the shallow-net smoothness constants and the width condition
/// for the configured horizon.
pub fn check_width(cfg: &ExperimentConfig) -> CliResult<WidthReport> {
    if cfg.model.kind != ModelKind::ShallowNet {
        return Err(invalid(
            "check-width needs model.kind = \"shallow_net\" (the width condition is \
             defined for the shallow regressor)",
        ));
    }
    let spec = cfg.model_spec();
    let constants = models::compute_constants(
        &spec,
        cfg.attack.rho,
        cfg.training.k_epochs,
        cfg.training.eta0,
        cfg.constants.c_0,
        cfg.constants.c_x,
        cfg.constants.c_y,
        cfg.constants.c_w,
    )
    .map_err(invalid)?;
    let width = models::check_width_condition(
        &constants,
        cfg.model.width,
        cfg.training.eta0,
        cfg.training.rounds,
        cfg.training.k_epochs,
    )
    .map_err(invalid)?;
    Ok(WidthReport {
        s: cfg.model.width,
        eta0: cfg.training.eta0,
        t_rounds: cfg.training.rounds,
        k_epochs: cfg.training.k_epochs,
        constants,
        width,
    })
}
