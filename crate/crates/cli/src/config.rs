//! Experiment configuration: a JSON file with flag overrides on top.
//!
//! Every field has a default, so the empty config `{}` (or no file at all)
//! is runnable. Unknown keys are rejected by name. The echoed form written
//! next to results makes every default explicit and parses back to the same
//! configuration, so a results directory is self-describing.

use std::fmt::Display;
use std::path::{Path, PathBuf};

use falsim_core::adversary::{Acceptance, AttackConfig, AttackInit};
use falsim_core::core_math::NormP;
use falsim_core::data::GeneratorSpec;
use falsim_core::federation::{AggRule, AggregationConfig, AlphaMode, OptimizerConfig};
use falsim_core::metrics::ServerAlgo;
use falsim_core::models::ModelSpec;
use falsim_core::smoothing::{Method, ScheduleKind, SmoothingConfig};
use serde::{Deserialize, Serialize};

/// Errors split by exit code: configuration problems exit 2, failures
/// during an otherwise valid run exit 3.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Tags an error as a configuration problem (exit 2).
pub fn invalid(err: impl Display) -> CliError {
    CliError::Validation(err.to_string())
}

/// Tags an error as a runtime failure (exit 3).
pub fn runtime(err: impl Display) -> CliError {
    CliError::Runtime(err.to_string())
}

/// Model family and shape. `hidden` applies to the classifier, `width` to
/// the shallow regressor; the unused one is carried along so the echo stays
/// stable under kind switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// "mlp" (classifier) or "shallow_net" (scalar regressor).
    pub kind: ModelKind,
    /// Hidden layer widths for the classifier; empty means a linear model.
    pub hidden: Vec<usize>,
    /// Hidden width for the shallow regressor.
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mlp,
    ShallowNet,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            kind: ModelKind::Mlp,
            hidden: vec![32],
            width: 64,
        }
    }
}

/// Local update rule and its smoothing knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmoothingSection {
    /// "ssa", "rsa", or "opsa".
    pub method: Method,
    /// Perturbation radius for rsa.
    pub gamma: f64,
    /// Perturbation draws per step for rsa.
    pub q: usize,
}

impl Default for SmoothingSection {
    fn default() -> Self {
        SmoothingSection {
            method: Method::Ssa,
            gamma: 0.05,
            q: 4,
        }
    }
}

/// Inner-maximization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    /// Perturbation budget; 0 disables the attack.
    pub rho: f64,
    /// Ball geometry: "inf" or "l2".
    pub p: NormP,
    /// Ascent iterations.
    pub steps: usize,
    /// Step length; null means rho/4.
    pub step_size: Option<f64>,
    /// "zero" or "random_in_ball".
    pub init: AttackInit,
    /// "best_so_far" or "last_iterate".
    pub acceptance: Acceptance,
}

impl Default for AttackSection {
    fn default() -> Self {
        let d = AttackConfig::default();
        AttackSection {
            rho: d.rho,
            p: d.p,
            steps: d.steps,
            step_size: d.step_size,
            init: d.init,
            acceptance: d.acceptance,
        }
    }
}

/// Task shape: either a synthetic Gaussian-mixture classification problem
/// (the default) or CSV files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Number of classes k for the generated task.
    pub classes: usize,
    /// Feature dimension.
    pub dim: usize,
    /// Training samples generated per class.
    pub per_class: usize,
    /// Held-out samples generated per class.
    pub test_per_class: usize,
    /// Distance between adjacent class means, in noise units.
    pub separation: f64,
    /// Number of clients m.
    pub clients: usize,
    /// Label-skew percentage a: each client donates a% of its shard to
    /// every other client. 0 is maximal skew, and skew decreases as a grows
    /// toward the uniform mix.
    pub skew: f64,
    /// Optional training CSV; replaces the generator (same file for every
    /// seed, partitioning still varies).
    pub source: Option<PathBuf>,
    /// Held-out CSV; required when `source` is set.
    pub test_source: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            classes: 4,
            dim: 16,
            per_class: 200,
            test_per_class: 50,
            separation: 3.0,
            clients: 4,
            skew: 10.0,
            source: None,
            test_source: None,
        }
    }
}

/// Outer/inner loop sizes and the step-size policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    /// Communication rounds T.
    pub rounds: usize,
    /// Local epochs per round K.
    pub k_epochs: usize,
    /// Local minibatch size.
    pub batch: usize,
    /// "paper_fixed", "inv_t", or "opsa_const".
    pub schedule: ScheduleKind,
    /// Base step size.
    pub eta0: f64,
    /// Client-side momentum (0 disables).
    pub momentum: f64,
    /// Client-side weight decay (0 disables).
    pub weight_decay: f64,
    /// Scale the next round's step size by the previous round's
    /// m_tilde / m under the slack rule.
    pub sfal_lr_scaling: bool,
    /// Evaluate the global model every this many rounds (the final round is
    /// always evaluated).
    pub eval_every: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            rounds: 10,
            k_epochs: 3,
            batch: 32,
            schedule: ScheduleKind::PaperFixed,
            eta0: 0.01,
            momentum: 0.0,
            weight_decay: 0.0,
            sfal_lr_scaling: false,
            eval_every: 1,
        }
    }
}

/// Server aggregation rule and the slack/penalty knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregationSection {
    /// Explicit rule; null derives it from `algo` (vfal → uniform,
    /// sfal → alpha_slack).
    pub rule: Option<AggRule>,
    /// Head size for the slack rule; null means max(1, m/5).
    pub m_hat: Option<usize>,
    /// "auto" (from sorted losses) or "fixed".
    pub alpha_mode: AlphaMode,
    /// Slack value used when alpha_mode is "fixed".
    pub alpha_fixed: f64,
    /// Proximal pull toward a clean-trained shadow model; 0 disables,
    /// 0.1 is a reasonable strength when enabled.
    pub penalty_lambda: f64,
}

impl Default for AggregationSection {
    fn default() -> Self {
        AggregationSection {
            rule: None,
            m_hat: None,
            alpha_mode: AlphaMode::Auto,
            alpha_fixed: 0.0,
            penalty_lambda: 0.0,
        }
    }
}

/// Domain bounds fed to the smoothness constants (check-width only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstantsSection {
    /// Initial-loss bound.
    pub c_0: f64,
    /// Input-norm bound.
    pub c_x: f64,
    /// Label-magnitude bound.
    pub c_y: f64,
    /// Weight-row-norm bound.
    pub c_w: f64,
}

impl Default for ConstantsSection {
    fn default() -> Self {
        ConstantsSection {
            c_0: 1.0,
            c_x: 1.0,
            c_y: 1.0,
            c_w: 1.0,
        }
    }
}

/// The full experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Server algorithm: "vfal" (uniform) or "sfal" (slack reweighting).
    pub algo: ServerAlgo,
    pub model: ModelSection,
    pub smoothing: SmoothingSection,
    pub attack: AttackSection,
    pub data: DataSection,
    pub training: TrainingSection,
    pub aggregation: AggregationSection,
    pub constants: ConstantsSection,
    /// One independent run per seed; everything downstream is keyed on it.
    pub seeds: Vec<u64>,
    /// Output directory.
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            algo: ServerAlgo::Vfal,
            model: ModelSection::default(),
            smoothing: SmoothingSection::default(),
            attack: AttackSection::default(),
            data: DataSection::default(),
            training: TrainingSection::default(),
            aggregation: AggregationSection::default(),
            constants: ConstantsSection::default(),
            seeds: vec![1, 2, 3],
            out: PathBuf::from("falsim-out"),
        }
    }
}

/// Flag overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub rho: Option<f64>,
    pub skew: Option<f64>,
    pub clients: Option<usize>,
    pub rounds: Option<usize>,
    pub algo: Option<ServerAlgo>,
    pub smoothing: Option<Method>,
    pub q: Option<usize>,
    pub gamma: Option<f64>,
    pub aggregator: Option<AggRule>,
    pub seeds: Option<Vec<u64>>,
    pub out: Option<PathBuf>,
}

pub fn parse_algo(s: &str) -> CliResult<ServerAlgo> {
    match s {
        "vfal" => Ok(ServerAlgo::Vfal),
        "sfal" => Ok(ServerAlgo::Sfal),
        other => Err(invalid(format!(
            "unknown algo {other:?}; expected vfal or sfal"
        ))),
    }
}

pub fn parse_method(s: &str) -> CliResult<Method> {
    match s {
        "ssa" => Ok(Method::Ssa),
        "rsa" => Ok(Method::Rsa),
        "opsa" => Ok(Method::Opsa),
        other => Err(invalid(format!(
            "unknown smoothing method {other:?}; expected ssa, rsa, or opsa"
        ))),
    }
}

pub fn parse_rule(s: &str) -> CliResult<AggRule> {
    match s {
        "uniform" => Ok(AggRule::Uniform),
        "alpha_slack" => Ok(AggRule::AlphaSlack),
        "tv_weighted" => Ok(AggRule::TvWeighted),
        "tv_inverse" => Ok(AggRule::TvInverse),
        other => Err(invalid(format!(
            "unknown aggregator {other:?}; expected uniform, alpha_slack, tv_weighted, or tv_inverse"
        ))),
    }
}

impl ExperimentConfig {
    /// Reads the file (or starts from defaults when there is none) and
    /// layers the flag overrides on top. The result is validated.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> CliResult<Self> {
        let mut cfg = match path {
            None => ExperimentConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| invalid(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| invalid(format!("invalid config {}: {e}", p.display())))?
            }
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, ov: &Overrides) {
        if let Some(v) = ov.rho {
            self.attack.rho = v;
        }
        if let Some(v) = ov.skew {
            self.data.skew = v;
        }
        if let Some(v) = ov.clients {
            self.data.clients = v;
        }
        if let Some(v) = ov.rounds {
            self.training.rounds = v;
        }
        if let Some(v) = ov.algo {
            self.algo = v;
        }
        if let Some(v) = ov.smoothing {
            self.smoothing.method = v;
        }
        if let Some(v) = ov.q {
            self.smoothing.q = v;
        }
        if let Some(v) = ov.gamma {
            self.smoothing.gamma = v;
        }
        if let Some(v) = ov.aggregator {
            self.aggregation.rule = Some(v);
        }
        if let Some(v) = &ov.seeds {
            self.seeds = v.clone();
        }
        if let Some(v) = &ov.out {
            self.out = v.clone();
        }
    }

    /// The aggregation rule in effect: the explicit one, or the algo's
    /// natural rule.
    pub fn effective_rule(&self) -> AggRule {
        self.aggregation.rule.unwrap_or(match self.algo {
            ServerAlgo::Vfal => AggRule::Uniform,
            ServerAlgo::Sfal => AggRule::AlphaSlack,
        })
    }

    pub fn model_spec(&self) -> ModelSpec {
        match self.model.kind {
            ModelKind::Mlp => ModelSpec::mlp(
                self.data.dim,
                self.model.hidden.clone(),
                self.data.classes,
            ),
            ModelKind::ShallowNet => ModelSpec::shallow(self.data.dim, self.model.width),
        }
    }

    pub fn smoothing_config(&self) -> SmoothingConfig {
        SmoothingConfig {
            method: self.smoothing.method,
            gamma: self.smoothing.gamma,
            q: self.smoothing.q,
            schedule: self.training.schedule,
            eta0: self.training.eta0,
            k_epochs: self.training.k_epochs,
        }
    }

    pub fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            rho: self.attack.rho,
            p: self.attack.p,
            steps: self.attack.steps,
            step_size: self.attack.step_size,
            init: self.attack.init,
            acceptance: self.attack.acceptance,
        }
    }

    pub fn aggregation_config(&self) -> AggregationConfig {
        AggregationConfig {
            rule: self.effective_rule(),
            m_hat: self.aggregation.m_hat,
            alpha_mode: self.aggregation.alpha_mode,
            alpha_fixed: self.aggregation.alpha_fixed,
            penalty_lambda: self.aggregation.penalty_lambda,
        }
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            momentum: self.training.momentum,
            weight_decay: self.training.weight_decay,
        }
    }

    /// Checks every precondition that can be checked without touching the
    /// filesystem, so a bad configuration fails before any run starts.
    pub fn validate(&self) -> CliResult<()> {
        if self.seeds.is_empty() {
            return Err(invalid("seeds must not be empty"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(invalid("seeds must be distinct"));
        }

        let m = self.data.clients;
        if m == 0 {
            return Err(invalid("data.clients must be >= 1"));
        }
        if (m as f64 - 1.0) * self.data.skew > 100.0 + 1e-9 {
            return Err(invalid(format!(
                "infeasible skew: (m-1)*a = {} > 100 (m = {m}, a = {})",
                (m as f64 - 1.0) * self.data.skew,
                self.data.skew
            )));
        }
        if !self.data.skew.is_finite() || self.data.skew < 0.0 {
            return Err(invalid(format!(
                "data.skew must be >= 0, got {}",
                self.data.skew
            )));
        }

        if self.data.source.is_none() {
            for (label, per_class) in [
                ("data.per_class", self.data.per_class),
                ("data.test_per_class", self.data.test_per_class),
            ] {
                let gen = GeneratorSpec {
                    classes: self.data.classes,
                    dim: self.data.dim,
                    per_class,
                    separation: self.data.separation,
                    clip_radius: None,
                };
                gen.validate()
                    .map_err(|e| invalid(format!("{label}: {e}")))?;
            }
            let n = self.data.classes * self.data.per_class;
            if n < m {
                return Err(invalid(format!(
                    "dataset of {n} samples cannot serve {m} clients"
                )));
            }
        } else if self.data.test_source.is_none() {
            return Err(invalid("data.test_source is required when data.source is set"));
        }

        self.model_spec().validate().map_err(invalid)?;
        self.smoothing_config().validate().map_err(invalid)?;
        self.attack_config().validate().map_err(invalid)?;
        self.aggregation_config()
            .validate_for(m)
            .map_err(invalid)?;
        self.optimizer_config().validate().map_err(invalid)?;
        if self.training.eval_every == 0 {
            return Err(invalid("training.eval_every must be >= 1"));
        }
        for (name, v) in [
            ("constants.c_0", self.constants.c_0),
            ("constants.c_x", self.constants.c_x),
            ("constants.c_y", self.constants.c_y),
            ("constants.c_w", self.constants.c_w),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(invalid(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Extra preconditions for commands that train (run, sweep,
    /// stability). check-width skips these: it never touches data, so a
    /// shallow model paired with the class-labeled generator is fine there.
    pub fn validate_for_training(&self) -> CliResult<()> {
        if self.data.source.is_none() && self.model.kind == ModelKind::ShallowNet {
            return Err(invalid(
                "the shallow regressor needs real-valued labels; generated data is \
                 class-labeled (use the mlp model, or a csv source with real labels)",
            ));
        }
        Ok(())
    }

    /// The echo written next to results: every default made explicit.
    pub fn echo(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_the_default() {
        let cfg: ExperimentConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.algo = ServerAlgo::Sfal;
        cfg.attack.rho = 0.5;
        cfg.aggregation.m_hat = Some(2);
        cfg.seeds = vec![7, 8];
        let back: ExperimentConfig = serde_json::from_str(&cfg.echo()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = serde_json::from_str::<ExperimentConfig>("{\"atack\": {}}")
            .unwrap_err()
            .to_string();
        assert!(err.contains("atack"), "{err}");
        let err = serde_json::from_str::<ExperimentConfig>("{\"attack\": {\"rh\": 1}}")
            .unwrap_err()
            .to_string();
        assert!(err.contains("rh"), "{err}");
    }

    #[test]
    fn infeasible_skew_is_rejected_up_front() {
        let mut cfg = ExperimentConfig::default();
        cfg.data.clients = 10;
        cfg.data.skew = 25.0;
        let err = cfg.validate().unwrap_err();
        assert!(err.message().contains("(m-1)*a"), "{}", err.message());
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn oversized_head_is_rejected_with_the_constraint() {
        let mut cfg = ExperimentConfig::default();
        cfg.algo = ServerAlgo::Sfal;
        cfg.aggregation.m_hat = Some(3);
        cfg.data.clients = 4;
        let err = cfg.validate().unwrap_err();
        assert!(err.message().contains("m_hat must satisfy"), "{}", err.message());
    }

    #[test]
    fn overrides_land_in_the_right_fields() {
        let ov = Overrides {
            rho: Some(0.75),
            clients: Some(6),
            algo: Some(ServerAlgo::Sfal),
            smoothing: Some(Method::Rsa),
            q: Some(8),
            seeds: Some(vec![5]),
            ..Overrides::default()
        };
        let mut cfg = ExperimentConfig::default();
        cfg.apply(&ov);
        assert_eq!(cfg.attack.rho, 0.75);
        assert_eq!(cfg.data.clients, 6);
        assert_eq!(cfg.algo, ServerAlgo::Sfal);
        assert_eq!(cfg.smoothing.method, Method::Rsa);
        assert_eq!(cfg.smoothing.q, 8);
        assert_eq!(cfg.seeds, vec![5]);
    }

    #[test]
    fn rule_derives_from_algo_unless_pinned() {
        let mut cfg = ExperimentConfig::default();
        assert_eq!(cfg.effective_rule(), AggRule::Uniform);
        cfg.algo = ServerAlgo::Sfal;
        assert_eq!(cfg.effective_rule(), AggRule::AlphaSlack);
        cfg.aggregation.rule = Some(AggRule::TvInverse);
        assert_eq!(cfg.effective_rule(), AggRule::TvInverse);
    }

    #[test]
    fn shallow_model_on_generated_labels_cannot_train() {
        let mut cfg = ExperimentConfig::default();
        cfg.model.kind = ModelKind::ShallowNet;
        // structurally fine (check-width accepts it) ...
        cfg.validate().unwrap();
        // ... but not trainable on class-labeled generated data
        let err = cfg.validate_for_training().unwrap_err();
        assert!(err.message().contains("real-valued labels"), "{}", err.message());
    }
}
