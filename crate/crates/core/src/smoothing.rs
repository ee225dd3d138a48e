//! The three local-update strategies — SSA (gradient at the attacked point),
//! RSA (randomized parameter smoothing), OPSA (plain adversarial SGD in the
//! over-parameterized regime) — as interchangeable mini-batch trainers, plus
//! the step-size schedules.
//!
//! One call to a `local_update_*` function performs a single mini-batch
//! step; the epoch/round structure lives in the federation loop. All
//! randomness (attack initialization, smoothing noise) is drawn sequentially
//! from the caller's stream, and the number of draws per call depends only
//! on shapes — never on data values — which is what keeps paired stability
//! runs coupled.

use serde::{Deserialize, Serialize};

use crate::adversary::{self, AttackConfig};
use crate::core_math::{sample_unit_ball, ParamVector, RngStream};
use crate::data::Sample;
use crate::error::{FalError, Result};
use crate::models::{self, ModelSpec};

/// Local trainer selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Surrogate smoothness approximation: descend the gradient of the loss
    /// at the per-sample adversarial point.
    Ssa,
    /// Randomized smoothness approximation: average the adversarial-loss
    /// gradient over Q random parameter perturbations of radius gamma.
    Rsa,
    /// Over-parameterized smoothness approximation: plain adversarial SGD;
    /// the update rule coincides with SSA and the difference is the model
    /// regime (wide shallow net) and schedule.
    Opsa,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Ssa => write!(f, "ssa"),
            Method::Rsa => write!(f, "rsa"),
            Method::Opsa => write!(f, "opsa"),
        }
    }
}

/// Step-size schedule families. The decaying families carry unknowable
/// theory constants, absorbed into `eta0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Constant eta0 (the experimental protocol's fixed 0.01).
    PaperFixed,
    /// eta0 / (t + 1).
    InvT,
    /// Constant eta0, clamped to 1/(6·K·zeta_theta) when the smoothness
    /// constants are available.
    OpsaConst,
}

/// A concrete schedule: family plus base rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub eta0: f64,
}

/// Context the schedule may consult.
#[derive(Debug, Clone, Copy)]
pub struct EtaContext {
    pub k_epochs: usize,
    /// Smoothness constant for the opsa_const clamp, when known.
    pub zeta_theta: Option<f64>,
    /// Multiplier for the slack-aggregation variant (m̃/m); 1 otherwise.
    pub sfal_scale: f64,
}

impl EtaContext {
    pub fn new(k_epochs: usize) -> Self {
        EtaContext {
            k_epochs,
            zeta_theta: None,
            sfal_scale: 1.0,
        }
    }
}

/// Step size for round `t`.
pub fn eta_at(schedule: &LrSchedule, t: u64, ctx: &EtaContext) -> f64 {
    let base = match schedule.kind {
        ScheduleKind::PaperFixed => schedule.eta0,
        ScheduleKind::InvT => schedule.eta0 / (t as f64 + 1.0),
        ScheduleKind::OpsaConst => match ctx.zeta_theta {
            Some(z) if z > 0.0 => schedule.eta0.min(1.0 / (6.0 * ctx.k_epochs as f64 * z)),
            _ => schedule.eta0,
        },
    };
    if ctx.sfal_scale == 1.0 {
        base
    } else {
        base * ctx.sfal_scale
    }
}

/// Local-trainer configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmoothingConfig {
    pub method: Method,
    /// RSA smoothing radius.
    pub gamma: f64,
    /// RSA noise draws per step.
    pub q: usize,
    pub schedule: ScheduleKind,
    pub eta0: f64,
    /// Local epochs per round.
    pub k_epochs: usize,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        SmoothingConfig {
            method: Method::Ssa,
            gamma: 0.05,
            q: 4,
            schedule: ScheduleKind::PaperFixed,
            eta0: 0.01,
            k_epochs: 3,
        }
    }
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_epochs == 0 {
            return Err(FalError::invalid("k_epochs must be >= 1"));
        }
        if !self.eta0.is_finite() || self.eta0 <= 0.0 {
            return Err(FalError::invalid(format!(
                "eta0 must be > 0, got {}",
                self.eta0
            )));
        }
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(FalError::invalid(format!(
                "gamma must be >= 0, got {}",
                self.gamma
            )));
        }
        if self.method == Method::Rsa {
            if self.gamma <= 0.0 {
                return Err(FalError::invalid("rsa requires gamma > 0"));
            }
            if self.q == 0 {
                return Err(FalError::invalid("rsa requires q >= 1"));
            }
        }
        Ok(())
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule {
            kind: self.schedule,
            eta0: self.eta0,
        }
    }
}

/// Mini-batch gradient of a trainer's objective, with the batch loss it saw.
#[derive(Debug, Clone)]
pub struct BatchGradient {
    pub grad: ParamVector,
    /// Mean objective value over the batch (for RSA, also averaged over the
    /// noise draws).
    pub loss: f64,
}

/// Mean loss and parameter gradient at the per-sample adversarial points —
/// the SSA/OPSA objective, and the RSA inner evaluation.
fn adversarial_batch_gradient(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &[&Sample],
    attack_cfg: &AttackConfig,
    rng: &mut RngStream,
) -> Result<BatchGradient> {
    if batch.is_empty() {
        return Err(FalError::Empty("mini-batch".into()));
    }
    let mut grad = ParamVector::zeros(params.dim());
    let mut loss_sum = 0.0;
    for sample in batch {
        let x_adv = adversary::attack(attack_cfg, spec, params, &sample.x, sample.y, rng)?;
        let (l, g) = models::loss_grad_params(spec, params, &x_adv, sample.y)?;
        loss_sum += l;
        grad.axpy_mut(1.0, &g);
    }
    let inv = 1.0 / batch.len() as f64;
    grad.scale_mut(inv);
    Ok(BatchGradient {
        grad,
        loss: loss_sum * inv,
    })
}

/// Mean clean (unattacked) loss and gradient over a batch — used by the
/// adversarial-penalty shadow model.
pub fn clean_batch_gradient(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &[&Sample],
) -> Result<BatchGradient> {
    if batch.is_empty() {
        return Err(FalError::Empty("mini-batch".into()));
    }
    let mut grad = ParamVector::zeros(params.dim());
    let mut loss_sum = 0.0;
    for sample in batch {
        let (l, g) = models::loss_grad_params(spec, params, &sample.x, sample.y)?;
        loss_sum += l;
        grad.axpy_mut(1.0, &g);
    }
    let inv = 1.0 / batch.len() as f64;
    grad.scale_mut(inv);
    Ok(BatchGradient {
        grad,
        loss: loss_sum * inv,
    })
}

/// The RSA objective gradient: draw Q perturbations u_q from the unit l2
/// ball of parameter space, evaluate the adversarial batch gradient at each
/// θ + γ·u_q, and average. gamma = 0 short-circuits to the single
/// unperturbed evaluation, making the SSA collapse bitwise rather than
/// merely numerical.
fn rsa_batch_gradient(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &[&Sample],
    attack_cfg: &AttackConfig,
    gamma: f64,
    q: usize,
    rng: &mut RngStream,
) -> Result<BatchGradient> {
    if q == 0 {
        return Err(FalError::invalid("rsa requires q >= 1"));
    }
    if !gamma.is_finite() || gamma < 0.0 {
        return Err(FalError::invalid(format!("gamma must be >= 0, got {gamma}")));
    }
    if gamma == 0.0 {
        return adversarial_batch_gradient(spec, params, batch, attack_cfg, rng);
    }
    // fresh noise per local step, drawn before the inner evaluations
    let noise: Vec<ParamVector> = (0..q)
        .map(|_| sample_unit_ball(params.dim(), rng))
        .collect::<Result<_>>()?;
    let mut grad = ParamVector::zeros(params.dim());
    let mut loss_sum = 0.0;
    for u in &noise {
        let perturbed = params.axpy(gamma, u);
        let bg = adversarial_batch_gradient(spec, &perturbed, batch, attack_cfg, rng)?;
        grad.axpy_mut(1.0, &bg.grad);
        loss_sum += bg.loss;
    }
    let inv = 1.0 / q as f64;
    grad.scale_mut(inv);
    Ok(BatchGradient {
        grad,
        loss: loss_sum * inv,
    })
}

/// Objective gradient for the configured method on one mini-batch.
pub fn batch_gradient(
    cfg: &SmoothingConfig,
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &[&Sample],
    attack_cfg: &AttackConfig,
    rng: &mut RngStream,
) -> Result<BatchGradient> {
    match cfg.method {
        Method::Ssa | Method::Opsa => {
            adversarial_batch_gradient(spec, params, batch, attack_cfg, rng)
        }
        Method::Rsa => {
            rsa_batch_gradient(spec, params, batch, attack_cfg, cfg.gamma, cfg.q, rng)
        }
    }
}

fn sgd_step(params: &ParamVector, grad: &ParamVector, eta_t: f64) -> ParamVector {
    params.axpy(-eta_t, grad)
}

/// One SSA mini-batch step: attack each sample, descend the mean gradient at
/// the adversarial points.
pub fn local_update_ssa(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &[&Sample],
    attack_cfg: &AttackConfig,
    eta_t: f64,
    rng: &mut RngStream,
) -> Result<ParamVector> {
    let bg = adversarial_batch_gradient(spec, params, batch, attack_cfg, rng)?;
    Ok(sgd_step(params, &bg.grad, eta_t))
}

/// One RSA mini-batch step: descend the noise-averaged adversarial gradient.
#[allow(clippy::too_many_arguments)]
pub fn local_update_rsa(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &[&Sample],
    attack_cfg: &AttackConfig,
    gamma: f64,
    q: usize,
    eta_t: f64,
    rng: &mut RngStream,
) -> Result<ParamVector> {
    let bg = rsa_batch_gradient(spec, params, batch, attack_cfg, gamma, q, rng)?;
    Ok(sgd_step(params, &bg.grad, eta_t))
}

/// One OPSA mini-batch step: plain adversarial SGD. The caller is expected
/// to have checked the width condition for shallow nets (warn, not block).
pub fn local_update_opsa(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &[&Sample],
    attack_cfg: &AttackConfig,
    eta_t: f64,
    rng: &mut RngStream,
) -> Result<ParamVector> {
    let bg = adversarial_batch_gradient(spec, params, batch, attack_cfg, rng)?;
    Ok(sgd_step(params, &bg.grad, eta_t))
}

/// Advisory check for running OPSA outside its analyzed regime. Returns the
/// warning to surface, or None when the model kind fits; the width condition
/// itself is the caller's job (it needs the horizon T).
pub fn opsa_regime_warning(spec: &ModelSpec) -> Option<String> {
    if spec.is_classifier() {
        Some(
            "opsa's over-parameterized analysis covers the shallow regression net; \
             running it on an mlp classifier is a protocol extension and the width \
             condition does not apply"
                .to_string(),
        )
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core_math::{finite_diff_grad, grad_rel_error, NormP, StreamKey, Vector};
    use crate::models::{init_params, Label, SignPattern};

    fn stream(seed: u64, purpose: &'static str) -> RngStream {
        RngStream::new(seed, &StreamKey::new(0, 0, purpose))
    }

    fn classifier_batch(
        spec: &ModelSpec,
        n: usize,
        rng: &mut RngStream,
    ) -> Vec<Sample> {
        (0..n)
            .map(|i| Sample {
                x: Vector::from_raw(
                    (0..spec.input_dim()).map(|_| rng.sample_normal()).collect(),
                ),
                y: Label::Class(i % spec.classes().unwrap()),
            })
            .collect()
    }

    fn refs(samples: &[Sample]) -> Vec<&Sample> {
        samples.iter().collect()
    }

    #[test]
    fn hand_composed_ssa_step() {
        // shallow s=1 (mu=+1), w=0, x=(2), y=-1, rho=1, eta=0.1.
        // At w=0 the loss is flat in x (grad_x = 0), so the attack returns
        // x unchanged; grad_w at (x=2, y=-1) is (0+1)*phi'(0)*2 = 2,
        // giving w <- 0 - 0.1*2 = -0.2 exactly.
        let spec = ModelSpec::ShallowNet {
            input_dim: 1,
            width: 1,
            activation: crate::models::Activation::Tanh,
            signs: SignPattern::Explicit(vec![1]),
        };
        let params = ParamVector::zeros(1);
        let samples = vec![Sample {
            x: Vector::new(vec![2.0]).unwrap(),
            y: Label::Real(-1.0),
        }];
        let cfg = AttackConfig::new(1.0, NormP::LInf);
        let out = local_update_ssa(
            &spec,
            &params,
            &refs(&samples),
            &cfg,
            0.1,
            &mut stream(1, "local"),
        )
        .unwrap();
        assert_eq!(out[0], -0.2);
    }

    #[test]
    fn rho_zero_equals_plain_sgd_step() {
        let spec = ModelSpec::mlp(4, vec![5], 3);
        let mut rng = stream(3, "setup");
        let params = init_params(&spec, &mut rng).unwrap();
        let samples = classifier_batch(&spec, 8, &mut rng);
        let batch = refs(&samples);
        let cfg = AttackConfig::new(0.0, NormP::LInf);
        let eta = 0.05;
        let stepped =
            local_update_ssa(&spec, &params, &batch, &cfg, eta, &mut stream(3, "local")).unwrap();
        let clean = clean_batch_gradient(&spec, &params, &batch).unwrap();
        let expected = params.axpy(-eta, &clean.grad);
        assert_eq!(stepped, expected);
    }

    #[test]
    fn zero_step_leaves_params_unchanged() {
        let spec = ModelSpec::mlp(4, vec![5], 3);
        let mut rng = stream(4, "setup");
        let params = init_params(&spec, &mut rng).unwrap();
        let samples = classifier_batch(&spec, 6, &mut rng);
        let batch = refs(&samples);
        let cfg = AttackConfig::new(0.3, NormP::LInf);
        let a = local_update_ssa(&spec, &params, &batch, &cfg, 0.0, &mut stream(4, "l1")).unwrap();
        let b = local_update_rsa(
            &spec, &params, &batch, &cfg, 0.1, 2, 0.0, &mut stream(4, "l2"),
        )
        .unwrap();
        let c = local_update_opsa(&spec, &params, &batch, &cfg, 0.0, &mut stream(4, "l3")).unwrap();
        assert_eq!(a, params);
        assert_eq!(b, params);
        assert_eq!(c, params);
    }

    #[test]
    fn rsa_with_zero_gamma_collapses_to_ssa_bitwise() {
        let spec = ModelSpec::mlp(4, vec![6], 3);
        let mut rng = stream(5, "setup");
        let params = init_params(&spec, &mut rng).unwrap();
        let samples = classifier_batch(&spec, 10, &mut rng);
        let batch = refs(&samples);
        let cfg = AttackConfig::new(0.25, NormP::LInf);
        for q in [1, 4] {
            let ssa = local_update_ssa(&spec, &params, &batch, &cfg, 0.02, &mut stream(5, "l"))
                .unwrap();
            let rsa = local_update_rsa(
                &spec, &params, &batch, &cfg, 0.0, q, 0.02, &mut stream(5, "l"),
            )
            .unwrap();
            assert_eq!(ssa, rsa, "q={q}");
        }
    }

    #[test]
    fn opsa_step_equals_ssa_step() {
        let spec = ModelSpec::shallow(4, 8);
        let mut rng = stream(6, "setup");
        let params = init_params(&spec, &mut rng).unwrap();
        let samples: Vec<Sample> = (0..6)
            .map(|_| Sample {
                x: Vector::from_raw((0..4).map(|_| rng.sample_normal()).collect()),
                y: Label::Real(rng.sample_normal()),
            })
            .collect();
        let batch = refs(&samples);
        let cfg = AttackConfig::new(0.2, NormP::L2);
        let a = local_update_ssa(&spec, &params, &batch, &cfg, 0.05, &mut stream(6, "l")).unwrap();
        let b = local_update_opsa(&spec, &params, &batch, &cfg, 0.05, &mut stream(6, "l")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rsa_is_deterministic_given_stream() {
        let spec = ModelSpec::mlp(4, vec![5], 3);
        let mut rng = stream(7, "setup");
        let params = init_params(&spec, &mut rng).unwrap();
        let samples = classifier_batch(&spec, 5, &mut rng);
        let batch = refs(&samples);
        let cfg = AttackConfig::new(0.25, NormP::LInf);
        let a = local_update_rsa(
            &spec, &params, &batch, &cfg, 0.1, 3, 0.02, &mut stream(7, "l"),
        )
        .unwrap();
        let b = local_update_rsa(
            &spec, &params, &batch, &cfg, 0.1, 3, 0.02, &mut stream(7, "l"),
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ssa_gradient_matches_objective_finite_differences() {
        // With rho=0 the objective is the clean batch loss: exact check.
        let spec = ModelSpec::mlp(3, vec![4], 3);
        let mut rng = stream(8, "setup");
        let params = init_params(&spec, &mut rng).unwrap();
        let samples = classifier_batch(&spec, 5, &mut rng);
        let batch = refs(&samples);
        let clean_cfg = AttackConfig::new(0.0, NormP::LInf);
        let smoothing = SmoothingConfig::default();
        let bg = batch_gradient(
            &smoothing, &spec, &params, &batch, &clean_cfg, &mut stream(8, "g"),
        )
        .unwrap();
        let fd = finite_diff_grad(
            |p| {
                batch_gradient(&smoothing, &spec, p, &batch, &clean_cfg, &mut stream(8, "g"))
                    .unwrap()
                    .loss
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(grad_rel_error(&bg.grad, &fd) < 1e-5);

        // With rho>0 the attacked points respond to theta only through
        // unstable samples; at a sign-saturated linf attack the envelope
        // gradient matches finite differences closely.
        let adv_cfg = AttackConfig::new(0.1, NormP::LInf);
        let bg = batch_gradient(
            &smoothing, &spec, &params, &batch, &adv_cfg, &mut stream(8, "g"),
        )
        .unwrap();
        let fd = finite_diff_grad(
            |p| {
                batch_gradient(&smoothing, &spec, p, &batch, &adv_cfg, &mut stream(8, "g"))
                    .unwrap()
                    .loss
            },
            &params,
            1e-5,
        )
        .unwrap();
        let err = grad_rel_error(&bg.grad, &fd);
        assert!(err < 1e-3, "envelope gradient error {err}");
    }

    #[test]
    fn rsa_gradient_matches_objective_finite_differences() {
        let spec = ModelSpec::mlp(3, vec![4], 3);
        let mut rng = stream(9, "setup");
        let params = init_params(&spec, &mut rng).unwrap();
        let samples = classifier_batch(&spec, 4, &mut rng);
        let batch = refs(&samples);
        let cfg = AttackConfig::new(0.1, NormP::LInf);
        let smoothing = SmoothingConfig {
            method: Method::Rsa,
            gamma: 0.05,
            q: 2,
            ..SmoothingConfig::default()
        };
        // identical stream per evaluation: same noise draws every time, so
        // the finite difference probes the same smoothed objective
        let bg = batch_gradient(&smoothing, &spec, &params, &batch, &cfg, &mut stream(9, "g"))
            .unwrap();
        let fd = finite_diff_grad(
            |p| {
                batch_gradient(&smoothing, &spec, p, &batch, &cfg, &mut stream(9, "g"))
                    .unwrap()
                    .loss
            },
            &params,
            1e-5,
        )
        .unwrap();
        let err = grad_rel_error(&bg.grad, &fd);
        assert!(err < 1e-3, "rsa objective gradient error {err}");
    }

    #[test]
    fn schedules_evaluate_as_documented() {
        let ctx = EtaContext::new(3);
        let fixed = LrSchedule {
            kind: ScheduleKind::PaperFixed,
            eta0: 0.01,
        };
        for t in [0, 1, 10, 1000] {
            assert_eq!(eta_at(&fixed, t, &ctx), 0.01);
        }
        let inv = LrSchedule {
            kind: ScheduleKind::InvT,
            eta0: 0.3,
        };
        assert!((eta_at(&inv, 2, &ctx) - 0.1).abs() < 1e-15);

        // sfal scale of 1 changes nothing
        let scaled = EtaContext {
            sfal_scale: 1.0,
            ..ctx
        };
        assert_eq!(eta_at(&fixed, 4, &scaled), eta_at(&fixed, 4, &ctx));
        let shrunk = EtaContext {
            sfal_scale: 0.8,
            ..ctx
        };
        assert!((eta_at(&fixed, 4, &shrunk) - 0.008).abs() < 1e-15);

        // opsa clamp engages when the constant is known and binding
        let opsa = LrSchedule {
            kind: ScheduleKind::OpsaConst,
            eta0: 0.5,
        };
        let with_const = EtaContext {
            zeta_theta: Some(8.0),
            ..ctx
        };
        let clamp = 1.0 / (6.0 * 3.0 * 8.0);
        assert_eq!(eta_at(&opsa, 0, &with_const), clamp);
        assert_eq!(eta_at(&opsa, 0, &ctx), 0.5);
    }

    #[test]
    fn config_validation() {
        let ok = SmoothingConfig::default();
        ok.validate().unwrap();
        assert!(SmoothingConfig {
            k_epochs: 0,
            ..ok
        }
        .validate()
        .is_err());
        assert!(SmoothingConfig {
            eta0: 0.0,
            ..ok
        }
        .validate()
        .is_err());
        assert!(SmoothingConfig {
            method: Method::Rsa,
            gamma: 0.0,
            ..ok
        }
        .validate()
        .is_err());
        assert!(SmoothingConfig {
            method: Method::Rsa,
            q: 0,
            ..ok
        }
        .validate()
        .is_err());
        // ssa does not care about gamma/q
        SmoothingConfig {
            method: Method::Ssa,
            gamma: 0.0,
            q: 0,
            ..ok
        }
        .validate()
        .unwrap();
    }

    #[test]
    fn regime_warning_fires_for_classifiers_only() {
        assert!(opsa_regime_warning(&ModelSpec::mlp(4, vec![8], 3)).is_some());
        assert!(opsa_regime_warning(&ModelSpec::shallow(4, 64)).is_none());
    }

    #[test]
    fn empty_batch_rejected() {
        let spec = ModelSpec::mlp(2, vec![], 2);
        let params = ParamVector::zeros(spec.param_len());
        let cfg = AttackConfig::default();
        assert!(matches!(
            local_update_ssa(&spec, &params, &[], &cfg, 0.1, &mut stream(1, "l")),
            Err(FalError::Empty(_))
        ));
    }
}
