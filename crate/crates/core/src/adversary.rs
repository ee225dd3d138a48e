//! Inner maximization by projected gradient ascent on the input, and
//! dataset-level robust loss / robust accuracy evaluation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::core_math::{project_lp, NormP, ParamVector, RngStream, StreamKey, Vector, SERVER};
use crate::data::Sample;
use crate::error::{FalError, Result};
use crate::models::{self, Label, ModelSpec};

/// Starting point of the ascent inside the perturbation ball.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackInit {
    /// Start from the clean input (draws nothing from the RNG stream).
    Zero,
    /// Start from a uniform draw in the ball around the clean input.
    RandomInBall,
}

/// Which iterate the attack returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Acceptance {
    /// Track the highest-loss iterate seen (the start point included) and
    /// return it. Makes loss monotonicity in the attack literal rather than
    /// merely typical.
    BestSoFar,
    /// Return the final iterate, as PGD is usually coded in practice.
    LastIterate,
}

/// Projected-gradient attack configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Attack strength: radius of the lp ball. 0 disables the attack.
    pub rho: f64,
    /// Ball geometry.
    pub p: NormP,
    /// Ascent iterations.
    pub steps: usize,
    /// Step length; `None` means rho/4.
    pub step_size: Option<f64>,
    pub init: AttackInit,
    pub acceptance: Acceptance,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            rho: 0.25,
            p: NormP::LInf,
            steps: 10,
            step_size: None,
            init: AttackInit::Zero,
            acceptance: Acceptance::BestSoFar,
        }
    }
}

impl AttackConfig {
    pub fn new(rho: f64, p: NormP) -> Self {
        AttackConfig {
            rho,
            p,
            ..AttackConfig::default()
        }
    }

    /// Step length in effect (explicit value, or the rho/4 default).
    pub fn effective_step_size(&self) -> f64 {
        self.step_size.unwrap_or(self.rho / 4.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.rho.is_finite() || self.rho < 0.0 {
            return Err(FalError::invalid(format!(
                "attack rho must be >= 0, got {}",
                self.rho
            )));
        }
        if self.steps == 0 {
            return Err(FalError::invalid("attack steps must be >= 1"));
        }
        if let Some(s) = self.step_size {
            if !s.is_finite() || s < 0.0 {
                return Err(FalError::invalid(format!(
                    "attack step_size must be >= 0, got {s}"
                )));
            }
        }
        if self.rho > 0.0 && self.effective_step_size() <= 0.0 {
            return Err(FalError::invalid(
                "attack step_size must be > 0 when rho > 0",
            ));
        }
        Ok(())
    }
}

/// Projected gradient ascent against an arbitrary objective.
///
/// `loss_grad` returns (loss, input gradient) at a point. One lp step per
/// iteration: for p=inf the sign step, for p=2 the normalized-gradient step,
/// each followed by exact projection onto the ball around `x`. A zero
/// gradient leaves the iterate in place. Consumes `rng` only when
/// `init = random_in_ball`.
pub fn attack_with<F>(
    cfg: &AttackConfig,
    x: &Vector,
    rng: &mut RngStream,
    mut loss_grad: F,
) -> Result<Vector>
where
    F: FnMut(&Vector) -> Result<(f64, Vector)>,
{
    cfg.validate()?;
    if cfg.rho == 0.0 {
        return Ok(x.clone());
    }
    let step = cfg.effective_step_size();
    let mut current = match cfg.init {
        AttackInit::Zero => x.clone(),
        AttackInit::RandomInBall => {
            let jitter = random_in_ball(x.dim(), cfg.rho, cfg.p, rng)?;
            project_lp(&x.axpy(1.0, &jitter), x, cfg.rho, cfg.p)?
        }
    };
    let mut best = current.clone();
    let mut best_loss = f64::NEG_INFINITY;
    for step_idx in 0..cfg.steps {
        let (l, g) = loss_grad(&current)?;
        if !l.is_finite() || !g.is_finite() {
            return Err(FalError::AttackDiverged { step: step_idx });
        }
        if l > best_loss {
            best_loss = l;
            best = current.clone();
        }
        let direction = match cfg.p {
            NormP::LInf => Vector::from_raw(
                g.as_slice()
                    .iter()
                    .map(|v| {
                        if *v > 0.0 {
                            1.0
                        } else if *v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            ),
            NormP::L2 => {
                let norm = g.norm_l2();
                if norm == 0.0 {
                    Vector::zeros(g.dim())
                } else {
                    g.scale(1.0 / norm)
                }
            }
        };
        current = project_lp(&current.axpy(step, &direction), x, cfg.rho, cfg.p)?;
    }
    match cfg.acceptance {
        Acceptance::LastIterate => Ok(current),
        Acceptance::BestSoFar => {
            let (l, _) = loss_grad(&current)?;
            if l.is_finite() && l > best_loss {
                Ok(current)
            } else {
                Ok(best)
            }
        }
    }
}

fn random_in_ball(dim: usize, rho: f64, p: NormP, rng: &mut RngStream) -> Result<Vector> {
    match p {
        NormP::L2 => {
            let u = crate::core_math::sample_unit_ball(dim, rng)?;
            Ok(u.scale(rho))
        }
        NormP::LInf => Ok(Vector::from_raw(
            (0..dim)
                .map(|_| (rng.gen_range_f64() * 2.0 - 1.0) * rho)
                .collect(),
        )),
    }
}

/// Adversarial input for one sample under the given model.
pub fn attack(
    cfg: &AttackConfig,
    spec: &ModelSpec,
    params: &ParamVector,
    x: &Vector,
    y: Label,
    rng: &mut RngStream,
) -> Result<Vector> {
    attack_with(cfg, x, rng, |v| models::loss_grad_input(spec, params, v, y))
}

/// Stream context for dataset-level evaluation: every sample gets its own
/// derived stream (keyed by its index), so sharding samples across workers
/// cannot change the result.
#[derive(Debug, Clone, Copy)]
pub struct EvalStreams {
    pub root_seed: u64,
    pub round: u64,
    pub purpose: &'static str,
}

impl EvalStreams {
    pub fn new(root_seed: u64, round: u64, purpose: &'static str) -> Self {
        EvalStreams {
            root_seed,
            round,
            purpose,
        }
    }

    pub fn for_sample(&self, index: usize) -> RngStream {
        RngStream::new(
            self.root_seed,
            &StreamKey::indexed(self.round, SERVER, self.purpose, index as u64),
        )
    }
}

/// Robust loss and (for classifiers) robust accuracy over a sample set,
/// attacking each sample once.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustEval {
    pub loss: f64,
    pub accuracy: Option<f64>,
}

/// Attacks every sample and evaluates loss (and accuracy for classifiers) at
/// the adversarial points. Samples are processed independently; the
/// reduction runs in index order, so the result does not depend on worker
/// count.
pub fn robust_eval(
    cfg: &AttackConfig,
    spec: &ModelSpec,
    params: &ParamVector,
    samples: &[Sample],
    streams: &EvalStreams,
) -> Result<RobustEval> {
    if samples.is_empty() {
        return Err(FalError::Empty("robust evaluation sample set".into()));
    }
    cfg.validate()?;
    let classify = spec.is_classifier();
    let per_sample: Vec<(f64, bool)> = samples
        .par_iter()
        .enumerate()
        .map(|(idx, sample)| -> Result<(f64, bool)> {
            let mut rng = streams.for_sample(idx);
            let x_adv = attack(cfg, spec, params, &sample.x, sample.y, &mut rng)?;
            let l = models::loss(spec, params, &x_adv, sample.y)?;
            let correct = if classify {
                let predicted = models::predict_class(spec, params, &x_adv)?;
                Some(predicted) == sample.y.as_class()
            } else {
                false
            };
            Ok((l, correct))
        })
        .collect::<Result<_>>()?;
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for (l, c) in &per_sample {
        loss_sum += l;
        correct += usize::from(*c);
    }
    let n = samples.len() as f64;
    Ok(RobustEval {
        loss: loss_sum / n,
        accuracy: classify.then(|| correct as f64 / n),
    })
}

/// Mean loss at the per-sample adversarial points.
pub fn robust_loss(
    cfg: &AttackConfig,
    spec: &ModelSpec,
    params: &ParamVector,
    samples: &[Sample],
    streams: &EvalStreams,
) -> Result<f64> {
    robust_eval(cfg, spec, params, samples, streams).map(|e| e.loss)
}

/// Fraction of samples still classified correctly at their adversarial
/// points. Classifiers only.
pub fn robust_accuracy(
    cfg: &AttackConfig,
    spec: &ModelSpec,
    params: &ParamVector,
    samples: &[Sample],
    streams: &EvalStreams,
) -> Result<f64> {
    if !spec.is_classifier() {
        return Err(FalError::Unsupported(
            "robust accuracy requires a classification model".into(),
        ));
    }
    robust_eval(cfg, spec, params, samples, streams).map(|e| e.accuracy.unwrap())
}
