//! The federated training loop: per-round local training on every client,
//! followed by server-side aggregation under one of four reweighting rules.
//!
//! Everything funnels through a single weighted-sum kernel that accumulates
//! client parameters in ascending client order, so that e.g. the slack rule
//! at alpha = 0 reproduces uniform averaging bit for bit. Clients train in
//! parallel but each owns a keyed random stream, which makes results
//! independent of the worker count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversary::{self, AttackConfig, EvalStreams};
use crate::core_math::{ParamVector, RngStream, StreamKey, SERVER};
use crate::data::{Dataset, Sample};
use crate::data::ClientPartition;
use crate::error::{FalError, Result};
use crate::metrics::{self, TvMethod};
use crate::models::{self, ModelSpec};
use crate::smoothing::{self, EtaContext, Method, ScheduleKind, SmoothingConfig};

/// Server-side reweighting rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggRule {
    /// Plain uniform averaging.
    Uniform,
    /// Loss-sorted two-level weights: the m_hat lowest-loss clients get
    /// (1+alpha)/m_tilde, the rest (1-alpha)/m_tilde.
    AlphaSlack,
    /// Weights proportional to each client's adversarial-shift size.
    TvWeighted,
    /// Weights proportional to the inverse shift size.
    TvInverse,
}

impl std::fmt::Display for AggRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AggRule::Uniform => write!(f, "uniform"),
            AggRule::AlphaSlack => write!(f, "alpha_slack"),
            AggRule::TvWeighted => write!(f, "tv_weighted"),
            AggRule::TvInverse => write!(f, "tv_inverse"),
        }
    }
}

/// How the slack parameter is chosen each round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    /// From the round's sorted client losses.
    Auto,
    /// A fixed value every round.
    Fixed,
}

/// Aggregation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AggregationConfig {
    pub rule: AggRule,
    /// Head size for the slack rule; None derives max(1, m/5).
    pub m_hat: Option<usize>,
    pub alpha_mode: AlphaMode,
    /// Used when alpha_mode is Fixed; must lie in [0, 1).
    pub alpha_fixed: f64,
    /// Adversarial-penalty weight for local training; 0 disables the
    /// clean-trajectory shadow model entirely. 0.1 is a reasonable value
    /// when enabling it.
    pub penalty_lambda: f64,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        AggregationConfig {
            rule: AggRule::Uniform,
            m_hat: None,
            alpha_mode: AlphaMode::Auto,
            alpha_fixed: 0.0,
            penalty_lambda: 0.0,
        }
    }
}

impl AggregationConfig {
    /// The head size actually used with `m` clients.
    pub fn resolved_m_hat(&self, m: usize) -> usize {
        self.m_hat.unwrap_or_else(|| (m / 5).max(1))
    }

    pub fn validate_for(&self, m: usize) -> Result<()> {
        if m == 0 {
            return Err(FalError::invalid("need at least one client"));
        }
        if !(0.0..1.0).contains(&self.alpha_fixed) {
            return Err(FalError::invalid(format!(
                "alpha must satisfy 0 <= alpha < 1, got {}",
                self.alpha_fixed
            )));
        }
        if !self.penalty_lambda.is_finite() || self.penalty_lambda < 0.0 {
            return Err(FalError::invalid(format!(
                "penalty_lambda must be >= 0, got {}",
                self.penalty_lambda
            )));
        }
        if self.rule == AggRule::AlphaSlack {
            let m_hat = self.resolved_m_hat(m);
            if m_hat == 0 || m_hat > m / 2 {
                return Err(FalError::invalid(format!(
                    "m_hat must satisfy 1 <= m_hat <= m/2 (m = {m}, m_hat = {m_hat})"
                )));
            }
        }
        Ok(())
    }
}

/// Client-side optimizer knobs. Defaults are plain SGD; with momentum or
/// weight decay enabled the update follows the usual torch semantics
/// (decay added to the gradient, buffer v <- mu*v + g, step theta -= eta*v).
/// Buffers reset at the start of every round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(FalError::invalid(format!(
                "momentum must satisfy 0 <= momentum < 1, got {}",
                self.momentum
            )));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(FalError::invalid(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// What one client produced in one round.
#[derive(Debug, Clone)]
pub struct ClientOutcome {
    pub client: usize,
    pub params: ParamVector,
    /// Mean adversarial loss over the final local epoch — the sort key for
    /// the slack rule.
    pub last_epoch_loss: f64,
    /// Adversarial-shift size of this client's data under its fresh local
    /// model; only computed for the tv rules.
    pub adv_tv: Option<f64>,
}

/// Per-round evaluation numbers, when an eval plan is attached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub train_robust_loss: f64,
    pub test_robust_loss: f64,
    pub train_robust_acc: Option<f64>,
    pub test_robust_acc: Option<f64>,
    /// test minus train robust loss.
    pub loss_gap: f64,
    /// train minus test robust accuracy (classifiers only).
    pub acc_gap: Option<f64>,
}

/// Everything the server recorded about one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 1-based display index.
    pub round: u64,
    /// 0-based index used by schedules.
    pub t: u64,
    /// Slack value used this round (0 for rules without one).
    pub alpha: f64,
    /// Effective client count m - alpha*(m - 2*m_hat); m for other rules.
    pub m_tilde: f64,
    /// Final-epoch mean adversarial loss per client, by client id.
    pub client_losses: Vec<f64>,
    /// Rank -> client id under the round's loss sort (identity for rules
    /// that do not sort).
    pub sort_map: Vec<usize>,
    /// Aggregation weight per client, by client id; sums to 1.
    pub weights: Vec<f64>,
    /// SHA-256 of the aggregated parameter bytes, for reproduction checks.
    pub params_digest: String,
    pub metrics: Option<RoundMetrics>,
}

/// Result of a full training run.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: ParamVector,
    pub records: Vec<RoundRecord>,
    /// Advisory messages (regime/width warnings) emitted at start.
    pub warnings: Vec<String>,
}

/// Borrowed bundle of everything a training run needs.
#[derive(Debug, Clone, Copy)]
pub struct TrainSetup<'a> {
    pub spec: &'a ModelSpec,
    pub dataset: &'a Dataset,
    pub partitions: &'a [ClientPartition],
    pub smoothing: &'a SmoothingConfig,
    pub attack: &'a AttackConfig,
    pub aggregation: &'a AggregationConfig,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub root_seed: u64,
    /// Scale each round's step size by the previous round's m_tilde/m when
    /// running the slack rule.
    pub sfal_lr_scaling: bool,
}

/// Held-out data evaluated after aggregation.
#[derive(Debug, Clone, Copy)]
pub struct EvalPlan<'a> {
    pub test: &'a Dataset,
    /// Evaluate on rounds where (t+1) is a multiple of this (and always the
    /// final round). 1 means every round.
    pub every: usize,
}

/// Slack value from client losses already sorted ascending: one minus the
/// ratio of the head-loss sum to the tail-loss sum. A zero head sum would
/// give exactly 1, which the two-level weights cannot represent, so it is
/// clamped just below.
pub fn compute_alpha(sorted_losses: &[f64], m_hat: usize) -> Result<f64> {
    let m = sorted_losses.len();
    if m == 0 {
        return Err(FalError::Empty("client losses".into()));
    }
    if m_hat == 0 || m_hat > m / 2 {
        return Err(FalError::invalid(format!(
            "m_hat must satisfy 1 <= m_hat <= m/2 (m = {m}, m_hat = {m_hat})"
        )));
    }
    for w in sorted_losses.windows(2) {
        if !(w[0].is_finite() && w[1].is_finite()) {
            return Err(FalError::NonFinite("client loss".into()));
        }
        if w[0] > w[1] {
            return Err(FalError::invalid(
                "losses must be sorted ascending before computing alpha",
            ));
        }
    }
    let head: f64 = sorted_losses[..m_hat].iter().sum();
    let tail: f64 = sorted_losses[m_hat..].iter().sum();
    if tail <= 0.0 {
        return Err(FalError::invalid(
            "tail loss sum must be positive to compute alpha",
        ));
    }
    let alpha = 1.0 - head / tail;
    if alpha >= 1.0 {
        log::warn!("alpha hit 1 (zero head loss); clamping just below");
        return Ok(1.0 - 1e-9);
    }
    debug_assert!(
        alpha >= 0.0,
        "sorted losses with m_hat <= m/2 keep alpha >= 0"
    );
    Ok(alpha)
}

/// Client ids ordered by ascending loss, ties broken by id.
fn loss_order(losses: &[f64]) -> Result<Vec<usize>> {
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(FalError::NonFinite("client loss".into()));
    }
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| {
        losses[a]
            .partial_cmp(&losses[b])
            .expect("finite losses compare totally")
            .then(a.cmp(&b))
    });
    Ok(order)
}

/// Two-level weights (by client id) for a given loss order, plus the
/// effective client count. m_tilde is computed directly in its identity
/// form m - alpha*(m - 2*m_hat).
fn slack_weights(order: &[usize], m_hat: usize, alpha: f64) -> Result<(Vec<f64>, f64)> {
    let m = order.len();
    if m_hat == 0 || m_hat > m / 2 {
        return Err(FalError::invalid(format!(
            "m_hat must satisfy 1 <= m_hat <= m/2 (m = {m}, m_hat = {m_hat})"
        )));
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(FalError::invalid(format!(
            "alpha must satisfy 0 <= alpha < 1, got {alpha}"
        )));
    }
    let m_f = m as f64;
    let m_tilde = m_f - alpha * (m_f - 2.0 * m_hat as f64);
    let w_head = (1.0 + alpha) / m_tilde;
    let w_tail = (1.0 - alpha) / m_tilde;
    let mut weights = vec![0.0; m];
    for (rank, &client) in order.iter().enumerate() {
        weights[client] = if rank < m_hat { w_head } else { w_tail };
    }
    Ok((weights, m_tilde))
}

/// Normalized weights from per-client shift sizes. Literal mode weights
/// clients proportionally to their shift (falling back to uniform when all
/// shifts are zero); inverse mode proportionally to 1/(shift + 1e-6).
fn tv_weights(tvs: &[f64], inverse: bool) -> Result<Vec<f64>> {
    if tvs.is_empty() {
        return Err(FalError::Empty("tv values".into()));
    }
    if tvs.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(FalError::invalid("tv values must be finite and >= 0"));
    }
    let raw: Vec<f64> = if inverse {
        tvs.iter().map(|v| 1.0 / (v + 1e-6)).collect()
    } else {
        tvs.to_vec()
    };
    let sum: f64 = raw.iter().sum();
    if sum <= 0.0 {
        log::warn!("all client shifts are zero; tv weighting falls back to uniform");
        return Ok(vec![1.0 / tvs.len() as f64; tvs.len()]);
    }
    Ok(raw.iter().map(|v| v / sum).collect())
}

/// The one aggregation kernel: sum of w_i * theta_i accumulated in ascending
/// client order, so every rule and every worker count produces identical
/// bytes for identical weights.
fn weighted_sum(params: &[ParamVector], weights: &[f64]) -> Result<ParamVector> {
    if params.is_empty() {
        return Err(FalError::Empty("client parameters".into()));
    }
    if params.len() != weights.len() {
        return Err(FalError::DimensionMismatch {
            expected: params.len(),
            got: weights.len(),
        });
    }
    let dim = params[0].dim();
    let mut out = ParamVector::zeros(dim);
    for (p, &w) in params.iter().zip(weights) {
        if p.dim() != dim {
            return Err(FalError::DimensionMismatch {
                expected: dim,
                got: p.dim(),
            });
        }
        out.axpy_mut(w, p);
    }
    Ok(out)
}

/// Uniform average of client parameters.
pub fn aggregate_uniform(params: &[ParamVector]) -> Result<ParamVector> {
    if params.is_empty() {
        return Err(FalError::Empty("client parameters".into()));
    }
    let w = vec![1.0 / params.len() as f64; params.len()];
    weighted_sum(params, &w)
}

/// Loss-sorted two-level aggregation. Returns the aggregate, the effective
/// client count m_tilde, and the rank -> client id sort map.
pub fn aggregate_alpha_slack(
    params: &[ParamVector],
    losses: &[f64],
    m_hat: usize,
    alpha: f64,
) -> Result<(ParamVector, f64, Vec<usize>)> {
    if params.len() != losses.len() {
        return Err(FalError::DimensionMismatch {
            expected: params.len(),
            got: losses.len(),
        });
    }
    let order = loss_order(losses)?;
    let (weights, m_tilde) = slack_weights(&order, m_hat, alpha)?;
    let agg = weighted_sum(params, &weights)?;
    Ok((agg, m_tilde, order))
}

/// Shift-proportional aggregation (literal or inverse).
pub fn aggregate_tv_weighted(
    params: &[ParamVector],
    tvs: &[f64],
    inverse: bool,
) -> Result<ParamVector> {
    if params.len() != tvs.len() {
        return Err(FalError::DimensionMismatch {
            expected: params.len(),
            got: tvs.len(),
        });
    }
    let weights = tv_weights(tvs, inverse)?;
    weighted_sum(params, &weights)
}

/// Hex SHA-256 of the parameter bytes (little-endian f64s).
pub fn params_digest(params: &ParamVector) -> String {
    let mut hasher = Sha256::new();
    for v in params.as_slice() {
        hasher.update(v.to_le_bytes());
    }
    let out = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for byte in out {
        use std::fmt::Write;
        let _ = write!(hex, "{byte:02x}");
    }
    hex
}

/// The deterministic starting point every run with this seed shares.
pub fn initial_params(spec: &ModelSpec, root_seed: u64) -> Result<ParamVector> {
    let mut rng = RngStream::new(root_seed, &StreamKey::new(0, SERVER, "model-init"));
    models::init_params(spec, &mut rng)
}

/// One optimizer step in place. The plain path (no momentum, no decay) is
/// kept branch-identical to `params - eta*grad` so it reproduces the bare
/// local-update functions bit for bit.
fn apply_step(
    params: &mut ParamVector,
    grad: &ParamVector,
    eta: f64,
    opt: &OptimizerConfig,
    velocity: &mut Option<ParamVector>,
) {
    if opt.momentum == 0.0 && opt.weight_decay == 0.0 {
        params.axpy_mut(-eta, grad);
        return;
    }
    let mut g = grad.clone();
    if opt.weight_decay > 0.0 {
        g.axpy_mut(opt.weight_decay, params);
    }
    if let Some(v) = velocity {
        v.scale_mut(opt.momentum);
        v.axpy_mut(1.0, &g);
        params.axpy_mut(-eta, v);
    } else {
        params.axpy_mut(-eta, &g);
    }
}

/// One client's local training for one round: K epochs of mini-batch steps
/// starting from the round's global parameters, with all randomness drawn
/// sequentially from the client's keyed stream. The number of draws per
/// step depends only on shapes, never on values, which keeps paired
/// neighbor runs coupled sample for sample.
fn train_client_round(
    setup: &TrainSetup<'_>,
    global: &ParamVector,
    t: u64,
    client: usize,
    eta_t: f64,
    need_tv: bool,
) -> Result<ClientOutcome> {
    let partition = &setup.partitions[client];
    let n = partition.indices.len();
    let mut stream = RngStream::new(setup.root_seed, &StreamKey::new(t, client as u64, "local"));
    let mut params = global.clone();
    let lambda = setup.aggregation.penalty_lambda;
    let mut shadow = (lambda > 0.0).then(|| global.clone());
    let mut velocity = (setup.optimizer.momentum > 0.0).then(|| ParamVector::zeros(global.dim()));
    let mut order: Vec<usize> = (0..n).collect();
    let k_epochs = setup.smoothing.k_epochs;
    let mut last_loss_sum = 0.0;

    for epoch in 0..k_epochs {
        stream.shuffle(&mut order);
        let last_epoch = epoch + 1 == k_epochs;
        for chunk in order.chunks(setup.batch_size) {
            let batch: Vec<&Sample> = chunk
                .iter()
                .map(|&pos| &setup.dataset.samples[partition.indices[pos]])
                .collect();
            let bg = smoothing::batch_gradient(
                setup.smoothing,
                setup.spec,
                &params,
                &batch,
                setup.attack,
                &mut stream,
            )?;
            if last_epoch {
                last_loss_sum += bg.loss * batch.len() as f64;
            }
            let grad = if let Some(sh) = &shadow {
                // pull toward the clean shadow trajectory; at zero distance
                // the subgradient is taken as zero
                let diff = params.sub(sh);
                let dist = diff.norm_l2();
                let mut g = bg.grad;
                if dist > 0.0 {
                    g.axpy_mut(lambda / dist, &diff);
                }
                g
            } else {
                bg.grad
            };
            apply_step(&mut params, &grad, eta_t, &setup.optimizer, &mut velocity);
            if let Some(sh) = &mut shadow {
                let clean = smoothing::clean_batch_gradient(setup.spec, sh, &batch)?;
                sh.axpy_mut(-eta_t, &clean.grad);
            }
        }
    }

    let last_epoch_loss = last_loss_sum / n as f64;
    if !last_epoch_loss.is_finite() {
        return Err(FalError::NonFinite(format!(
            "client {client} local loss at round {t}"
        )));
    }

    let adv_tv = if need_tv {
        let clean: Vec<Sample> = partition
            .indices
            .iter()
            .map(|&i| setup.dataset.samples[i].clone())
            .collect();
        let mut tv_stream =
            RngStream::new(setup.root_seed, &StreamKey::new(t, client as u64, "agg-tv"));
        let mut attacked = Vec::with_capacity(clean.len());
        for s in &clean {
            let x_adv =
                adversary::attack(setup.attack, setup.spec, &params, &s.x, s.y, &mut tv_stream)?;
            attacked.push(Sample {
                x: x_adv,
                y: s.y,
            });
        }
        Some(metrics::estimate_tv(
            &clean,
            &attacked,
            TvMethod::ProjectedHistogram,
            &mut tv_stream,
        )?)
    } else {
        None
    };

    Ok(ClientOutcome {
        client,
        params,
        last_epoch_loss,
        adv_tv,
    })
}

/// Step size for round t given the previous round's effective client count.
fn round_step_size(setup: &TrainSetup<'_>, t: u64, prev_m_tilde: f64) -> Result<f64> {
    let schedule = setup.smoothing.lr_schedule();
    let zeta_theta = if setup.smoothing.schedule == ScheduleKind::OpsaConst
        && !setup.spec.is_classifier()
    {
        Some(
            models::compute_constants(
                setup.spec,
                setup.attack.rho,
                setup.smoothing.k_epochs,
                setup.smoothing.eta0,
                1.0,
                1.0,
                1.0,
                1.0,
            )?
            .zeta_theta,
        )
    } else {
        None
    };
    let m = setup.partitions.len() as f64;
    let sfal_scale = if setup.sfal_lr_scaling && setup.aggregation.rule == AggRule::AlphaSlack {
        prev_m_tilde / m
    } else {
        1.0
    };
    let ctx = EtaContext {
        k_epochs: setup.smoothing.k_epochs,
        zeta_theta,
        sfal_scale,
    };
    Ok(smoothing::eta_at(&schedule, t, &ctx))
}

fn validate_setup(setup: &TrainSetup<'_>) -> Result<()> {
    setup.spec.validate()?;
    setup.dataset.validate()?;
    setup.smoothing.validate()?;
    setup.attack.validate()?;
    setup.optimizer.validate()?;
    let m = setup.partitions.len();
    setup.aggregation.validate_for(m)?;
    if setup.batch_size == 0 {
        return Err(FalError::invalid("batch_size must be >= 1"));
    }
    if setup.dataset.input_dim() != setup.spec.input_dim() {
        return Err(FalError::invalid(format!(
            "dataset feature dimension {} does not match the model's {}",
            setup.dataset.input_dim(),
            setup.spec.input_dim()
        )));
    }
    if setup.spec.is_classifier() != setup.dataset.classes.is_some() {
        return Err(FalError::invalid(
            "classifier models need class-labeled data and regression models real labels",
        ));
    }
    if let (Some(k_model), Some(k_data)) = (setup.spec.classes(), setup.dataset.classes) {
        if k_data > k_model {
            return Err(FalError::invalid(format!(
                "dataset has {k_data} classes but the model only {k_model}"
            )));
        }
    }
    for (i, p) in setup.partitions.iter().enumerate() {
        if p.client != i {
            return Err(FalError::invalid(format!(
                "partitions must be listed in client order (position {i} holds client {})",
                p.client
            )));
        }
        if p.indices.is_empty() {
            return Err(FalError::Empty(format!("client {i} partition")));
        }
        if let Some(&max) = p.indices.iter().max() {
            if max >= setup.dataset.len() {
                return Err(FalError::invalid(format!(
                    "client {i} references sample {max} outside the dataset"
                )));
            }
        }
    }
    Ok(())
}

/// One full round: local training on every client (in parallel), then
/// aggregation under the configured rule. Returns the new global parameters
/// and the round's record (metrics unfilled).
pub fn run_round(
    setup: &TrainSetup<'_>,
    global: &ParamVector,
    t: u64,
    prev_m_tilde: f64,
) -> Result<(ParamVector, RoundRecord)> {
    let m = setup.partitions.len();
    let eta_t = round_step_size(setup, t, prev_m_tilde)?;
    let rule = setup.aggregation.rule;
    let need_tv = matches!(rule, AggRule::TvWeighted | AggRule::TvInverse);

    let outcomes: Vec<ClientOutcome> = (0..m)
        .into_par_iter()
        .map(|client| {
            train_client_round(setup, global, t, client, eta_t, need_tv).map_err(|e| {
                FalError::ClientFailed {
                    client,
                    round: t,
                    source: Box::new(e),
                }
            })
        })
        .collect::<Result<_>>()?;

    let client_params: Vec<ParamVector> = outcomes.iter().map(|o| o.params.clone()).collect();
    let client_losses: Vec<f64> = outcomes.iter().map(|o| o.last_epoch_loss).collect();

    let (params, alpha, m_tilde, sort_map, weights) = match rule {
        AggRule::Uniform => {
            let weights = vec![1.0 / m as f64; m];
            let params = weighted_sum(&client_params, &weights)?;
            (params, 0.0, m as f64, (0..m).collect(), weights)
        }
        AggRule::AlphaSlack => {
            let m_hat = setup.aggregation.resolved_m_hat(m);
            let order = loss_order(&client_losses)?;
            let alpha = match setup.aggregation.alpha_mode {
                AlphaMode::Fixed => setup.aggregation.alpha_fixed,
                AlphaMode::Auto => {
                    let sorted: Vec<f64> = order.iter().map(|&i| client_losses[i]).collect();
                    compute_alpha(&sorted, m_hat)?
                }
            };
            let (weights, m_tilde) = slack_weights(&order, m_hat, alpha)?;
            let params = weighted_sum(&client_params, &weights)?;
            (params, alpha, m_tilde, order, weights)
        }
        AggRule::TvWeighted | AggRule::TvInverse => {
            let tvs: Vec<f64> = outcomes
                .iter()
                .map(|o| o.adv_tv.expect("tv computed for tv rules"))
                .collect();
            let weights = tv_weights(&tvs, rule == AggRule::TvInverse)?;
            let params = weighted_sum(&client_params, &weights)?;
            (params, 0.0, m as f64, (0..m).collect(), weights)
        }
    };

    let record = RoundRecord {
        round: t + 1,
        t,
        alpha,
        m_tilde,
        client_losses,
        sort_map,
        weights,
        params_digest: params_digest(&params),
        metrics: None,
    };
    Ok((params, record))
}

/// Robust train/test evaluation of the aggregated model for one round.
fn evaluate_round(
    setup: &TrainSetup<'_>,
    params: &ParamVector,
    test: &Dataset,
    t: u64,
) -> Result<RoundMetrics> {
    let train_streams = EvalStreams {
        root_seed: setup.root_seed,
        round: t,
        purpose: "eval-train",
    };
    let test_streams = EvalStreams {
        root_seed: setup.root_seed,
        round: t,
        purpose: "eval-test",
    };
    let train = adversary::robust_eval(
        setup.attack,
        setup.spec,
        params,
        &setup.dataset.samples,
        &train_streams,
    )?;
    let test = adversary::robust_eval(setup.attack, setup.spec, params, &test.samples, &test_streams)?;
    let acc_gap = match (train.accuracy, test.accuracy) {
        (Some(a), Some(b)) => Some(a - b),
        _ => None,
    };
    Ok(RoundMetrics {
        train_robust_loss: train.loss,
        test_robust_loss: test.loss,
        train_robust_acc: train.accuracy,
        test_robust_acc: test.accuracy,
        loss_gap: test.loss - train.loss,
        acc_gap,
    })
}

/// Run T rounds from a fresh seed-determined initialization. T = 0 returns
/// the initial parameters and an empty history.
pub fn train(
    setup: &TrainSetup<'_>,
    t_rounds: usize,
    eval: Option<&EvalPlan<'_>>,
) -> Result<TrainOutput> {
    validate_setup(setup)?;
    if let Some(plan) = eval {
        plan.test.validate()?;
        if plan.every == 0 {
            return Err(FalError::invalid("eval interval must be >= 1"));
        }
        if plan.test.input_dim() != setup.spec.input_dim() {
            return Err(FalError::invalid(
                "test set feature dimension does not match the model",
            ));
        }
    }

    let mut warnings = Vec::new();
    if setup.smoothing.method == Method::Opsa {
        if let Some(w) = smoothing::opsa_regime_warning(setup.spec) {
            log::warn!("{w}");
            warnings.push(w);
        } else {
            // shallow net: check the width condition with unit data bounds
            let constants = models::compute_constants(
                setup.spec,
                setup.attack.rho,
                setup.smoothing.k_epochs,
                setup.smoothing.eta0,
                1.0,
                1.0,
                1.0,
                1.0,
            )?;
            if let ModelSpec::ShallowNet { width, .. } = setup.spec {
                let check = models::check_width_condition(
                    &constants,
                    *width,
                    setup.smoothing.eta0,
                    t_rounds,
                    setup.smoothing.k_epochs,
                )?;
                if !check.satisfied {
                    let w = format!(
                        "width {} is below the {:.1} the over-parameterized analysis asks \
                         for at these settings (unit data bounds); proceeding anyway",
                        width, check.required_s
                    );
                    log::warn!("{w}");
                    warnings.push(w);
                }
            }
        }
    }

    let mut params = initial_params(setup.spec, setup.root_seed)?;
    let mut records = Vec::with_capacity(t_rounds);
    let mut prev_m_tilde = setup.partitions.len() as f64;

    for t in 0..t_rounds as u64 {
        let (next, mut record) = run_round(setup, &params, t, prev_m_tilde)?;
        params = next;
        if let Some(plan) = eval {
            let due = (t + 1) % plan.every as u64 == 0 || t as usize + 1 == t_rounds;
            if due {
                record.metrics = Some(evaluate_round(setup, &params, plan.test, t)?);
            }
        }
        prev_m_tilde = record.m_tilde;
        records.push(record);
    }

    Ok(TrainOutput {
        params,
        records,
        warnings,
    })
}
