//! Differentiable models with analytic gradients in both parameters and
//! inputs, plus the smoothness-constant calculator for the
//! over-parameterized regime.
//!
//! Two model kinds are supported:
//!
//! * `shallow_net` — a width-`s` one-hidden-layer scalar regressor
//!   `f_W(x) = Σ_τ μ_τ φ(⟨w_τ, x⟩)` with fixed output signs
//!   `μ_τ ∈ {−1/√s, +1/√s}` and squared loss `½(f − y)²`. Only the rows
//!   `w_τ` are trainable.
//! * `mlp` — a fully-connected classifier with bounded hidden activations
//!   and linear logits, trained with softmax cross-entropy.
//!
//! Canonical parameter flattening order (version 1, used by every operation
//! and by the checkpoint format):
//!
//! * shallow_net: `params[τ·input_dim + j] = w_τ[j]` — row-major over the
//!   hidden unit index τ, then the input index j.
//! * mlp: layers in forward order; within a layer the weight matrix
//!   row-major (one row per output unit, `fan_in` entries each), followed by
//!   the bias vector.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::core_math::{ParamVector, RngStream, Vector};
use crate::error::{FalError, Result};

/// Bounded activations admissible for the smoothness theory (φ, φ′, φ″ all
/// bounded — which is why ReLU is not on offer).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn phi(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => sigmoid(z),
        }
    }

    pub fn phi_prime(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
        }
    }

    /// Uniform bounds (B_φ, B_φ′, B_φ″) on |φ|, |φ′|, |φ″|.
    ///
    /// tanh: (1, 1, 4/(3√3)); sigmoid: (1, 1/4, 1/(6√3)). The second-derivative
    /// bounds are the exact maxima of |φ″| (attained at tanh z = ±1/√3 and
    /// sigmoid z = (3±√3)/6 respectively).
    pub fn bounds(self) -> (f64, f64, f64) {
        match self {
            Activation::Tanh => (1.0, 1.0, 4.0 / (3.0 * 3.0f64.sqrt())),
            Activation::Sigmoid => (1.0, 0.25, 1.0 / (6.0 * 3.0f64.sqrt())),
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Output-sign assignment for the shallow net's fixed μ_τ.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignPattern {
    /// +,−,+,− by unit index: balanced for even widths, so the model outputs
    /// exactly 0 on symmetric hidden activations — a convenient test anchor.
    Alternating,
    /// Explicit ±1 per hidden unit.
    Explicit(Vec<i8>),
}

impl SignPattern {
    /// Sign (±1.0) of unit τ.
    pub fn sign(&self, tau: usize) -> f64 {
        match self {
            SignPattern::Alternating => {
                if tau % 2 == 0 {
                    1.0
                } else {
                    -1.0
                }
            }
            SignPattern::Explicit(v) => f64::from(v[tau]),
        }
    }

    /// Uniform random ±1 assignment drawn from `rng`.
    pub fn random(width: usize, rng: &mut RngStream) -> Self {
        SignPattern::Explicit(
            (0..width)
                .map(|_| if rng.gen_range_f64() < 0.5 { 1 } else { -1 })
                .collect(),
        )
    }
}

/// Architecture description. Parameters live separately in a flat
/// [`ParamVector`]; everything here is immutable across training — in
/// particular the shallow net's μ signs, whose magnitudes stay exactly 1/√s
/// no matter how many updates run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    ShallowNet {
        input_dim: usize,
        /// Hidden width s.
        width: usize,
        activation: Activation,
        signs: SignPattern,
    },
    Mlp {
        input_dim: usize,
        /// Hidden layer sizes; empty means a single affine layer.
        hidden: Vec<usize>,
        classes: usize,
        activation: Activation,
    },
}

impl ModelSpec {
    /// Default shallow regressor: tanh, alternating signs.
    pub fn shallow(input_dim: usize, width: usize) -> Self {
        ModelSpec::ShallowNet {
            input_dim,
            width,
            activation: Activation::Tanh,
            signs: SignPattern::Alternating,
        }
    }

    /// Default classifier: one tanh hidden layer of the given width.
    pub fn mlp(input_dim: usize, hidden: Vec<usize>, classes: usize) -> Self {
        ModelSpec::Mlp {
            input_dim,
            hidden,
            classes,
            activation: Activation::Tanh,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            ModelSpec::ShallowNet { input_dim, .. } => *input_dim,
            ModelSpec::Mlp { input_dim, .. } => *input_dim,
        }
    }

    pub fn is_classifier(&self) -> bool {
        matches!(self, ModelSpec::Mlp { .. })
    }

    /// Number of classes for classifiers, None for regressors.
    pub fn classes(&self) -> Option<usize> {
        match self {
            ModelSpec::Mlp { classes, .. } => Some(*classes),
            ModelSpec::ShallowNet { .. } => None,
        }
    }

    /// Layer sizes [input, hidden..., output] for the mlp.
    fn mlp_sizes(&self) -> Vec<usize> {
        match self {
            ModelSpec::Mlp {
                input_dim,
                hidden,
                classes,
                ..
            } => {
                let mut sizes = Vec::with_capacity(hidden.len() + 2);
                sizes.push(*input_dim);
                sizes.extend_from_slice(hidden);
                sizes.push(*classes);
                sizes
            }
            _ => unreachable!("mlp_sizes on shallow_net"),
        }
    }

    /// Length of the flat parameter vector in canonical order.
    pub fn param_len(&self) -> usize {
        match self {
            ModelSpec::ShallowNet {
                input_dim, width, ..
            } => input_dim * width,
            ModelSpec::Mlp { .. } => {
                let sizes = self.mlp_sizes();
                sizes
                    .windows(2)
                    .map(|w| (w[0] + 1) * w[1])
                    .sum()
            }
        }
    }

    /// Structural invariant check: positive dims, k ≥ 2 classes, sign vector
    /// entries ±1 and matching the width.
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::ShallowNet {
                input_dim,
                width,
                signs,
                ..
            } => {
                if *input_dim == 0 || *width == 0 {
                    return Err(FalError::invalid(
                        "shallow_net needs input_dim >= 1 and width >= 1",
                    ));
                }
                if let SignPattern::Explicit(v) = signs {
                    if v.len() != *width {
                        return Err(FalError::invalid(format!(
                            "sign vector length {} does not match width {}",
                            v.len(),
                            width
                        )));
                    }
                    if v.iter().any(|s| *s != 1 && *s != -1) {
                        return Err(FalError::invalid("sign entries must be +1 or -1"));
                    }
                }
                Ok(())
            }
            ModelSpec::Mlp {
                input_dim,
                hidden,
                classes,
                ..
            } => {
                if *input_dim == 0 {
                    return Err(FalError::invalid("mlp needs input_dim >= 1"));
                }
                if *classes < 2 {
                    return Err(FalError::invalid("mlp needs at least 2 classes"));
                }
                if hidden.iter().any(|h| *h == 0) {
                    return Err(FalError::invalid("mlp hidden layer sizes must be >= 1"));
                }
                Ok(())
            }
        }
    }
}

/// Model output: a scalar for regression, logits for classification.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Scalar(f64),
    Logits(Vec<f64>),
}

impl Prediction {
    pub fn as_scalar(&self) -> Option<f64> {
        match self {
            Prediction::Scalar(v) => Some(*v),
            Prediction::Logits(_) => None,
        }
    }

    pub fn as_logits(&self) -> Option<&[f64]> {
        match self {
            Prediction::Logits(l) => Some(l),
            Prediction::Scalar(_) => None,
        }
    }
}

/// Supervision target: a real value for regression, a class index for
/// classification.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Class(usize),
    Real(f64),
}

impl Label {
    pub fn as_class(&self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(*c),
            Label::Real(_) => None,
        }
    }
}

fn check_dims(spec: &ModelSpec, params: &ParamVector, x: &Vector) -> Result<()> {
    spec.validate()?;
    if params.dim() != spec.param_len() {
        return Err(FalError::DimensionMismatch {
            expected: spec.param_len(),
            got: params.dim(),
        });
    }
    if x.dim() != spec.input_dim() {
        return Err(FalError::DimensionMismatch {
            expected: spec.input_dim(),
            got: x.dim(),
        });
    }
    Ok(())
}

fn mu_magnitude(width: usize) -> f64 {
    1.0 / (width as f64).sqrt()
}

/// Evaluates the model at `x`.
pub fn forward(spec: &ModelSpec, params: &ParamVector, x: &Vector) -> Result<Prediction> {
    check_dims(spec, params, x)?;
    match spec {
        ModelSpec::ShallowNet {
            input_dim,
            width,
            activation,
            signs,
        } => {
            let mag = mu_magnitude(*width);
            let mut f = 0.0;
            for tau in 0..*width {
                let row = &params.as_slice()[tau * input_dim..(tau + 1) * input_dim];
                let a: f64 = row.iter().zip(x.as_slice()).map(|(w, xi)| w * xi).sum();
                f += signs.sign(tau) * mag * activation.phi(a);
            }
            Ok(Prediction::Scalar(f))
        }
        ModelSpec::Mlp { .. } => {
            let trace = mlp_forward(spec, params, x);
            Ok(Prediction::Logits(trace.activations.last().unwrap().clone()))
        }
    }
}

/// Predicted class at `x` (classifiers only). Argmax over logits; ties go to
/// the lowest class index so prediction is deterministic.
pub fn predict_class(spec: &ModelSpec, params: &ParamVector, x: &Vector) -> Result<usize> {
    let pred = forward(spec, params, x)?;
    match pred {
        Prediction::Logits(logits) => Ok(argmax_lowest(&logits)),
        Prediction::Scalar(_) => Err(FalError::Unsupported(
            "class prediction requires a classification model".into(),
        )),
    }
}

fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Loss at one sample: ½(f−y)² for the shallow regressor, softmax
/// cross-entropy for the classifier.
pub fn loss(spec: &ModelSpec, params: &ParamVector, x: &Vector, y: Label) -> Result<f64> {
    match (forward(spec, params, x)?, y) {
        (Prediction::Scalar(f), Label::Real(y)) => Ok(0.5 * (f - y) * (f - y)),
        (Prediction::Logits(logits), Label::Class(c)) => {
            if c >= logits.len() {
                return Err(FalError::LabelOutOfRange {
                    got: c,
                    classes: logits.len(),
                });
            }
            Ok(log_sum_exp(&logits) - logits[c])
        }
        (Prediction::Scalar(_), Label::Class(_)) => Err(FalError::invalid(
            "shallow_net is a regression model; got a class label",
        )),
        (Prediction::Logits(_), Label::Real(_)) => Err(FalError::invalid(
            "mlp is a classification model; got a real-valued label",
        )),
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Gradient of the loss with respect to the flat parameter vector.
pub fn grad_params(
    spec: &ModelSpec,
    params: &ParamVector,
    x: &Vector,
    y: Label,
) -> Result<ParamVector> {
    loss_grad_params(spec, params, x, y).map(|(_, g)| g)
}

/// Gradient of the loss with respect to the input.
pub fn grad_input(spec: &ModelSpec, params: &ParamVector, x: &Vector, y: Label) -> Result<Vector> {
    loss_grad_input(spec, params, x, y).map(|(_, g)| g)
}

/// Loss and parameter gradient in one backward pass (the training hot path).
pub fn loss_grad_params(
    spec: &ModelSpec,
    params: &ParamVector,
    x: &Vector,
    y: Label,
) -> Result<(f64, ParamVector)> {
    check_dims(spec, params, x)?;
    match spec {
        ModelSpec::ShallowNet { .. } => {
            let (l, g, _) = shallow_backward(spec, params, x, y, true, false)?;
            Ok((l, g.unwrap()))
        }
        ModelSpec::Mlp { .. } => {
            let (l, g, _) = mlp_backward(spec, params, x, y, true, false)?;
            Ok((l, g.unwrap()))
        }
    }
}

/// Loss and input gradient in one backward pass (the attack hot path).
pub fn loss_grad_input(
    spec: &ModelSpec,
    params: &ParamVector,
    x: &Vector,
    y: Label,
) -> Result<(f64, Vector)> {
    check_dims(spec, params, x)?;
    match spec {
        ModelSpec::ShallowNet { .. } => {
            let (l, _, g) = shallow_backward(spec, params, x, y, false, true)?;
            Ok((l, g.unwrap()))
        }
        ModelSpec::Mlp { .. } => {
            let (l, _, g) = mlp_backward(spec, params, x, y, false, true)?;
            Ok((l, g.unwrap()))
        }
    }
}

fn shallow_backward(
    spec: &ModelSpec,
    params: &ParamVector,
    x: &Vector,
    y: Label,
    want_params: bool,
    want_input: bool,
) -> Result<(f64, Option<ParamVector>, Option<Vector>)> {
    let (input_dim, width, activation, signs) = match spec {
        ModelSpec::ShallowNet {
            input_dim,
            width,
            activation,
            signs,
        } => (*input_dim, *width, *activation, signs),
        _ => unreachable!(),
    };
    let y = match y {
        Label::Real(v) => v,
        Label::Class(_) => {
            return Err(FalError::invalid(
                "shallow_net is a regression model; got a class label",
            ))
        }
    };
    let mag = mu_magnitude(width);

    // forward, keeping pre-activations
    let mut pre = vec![0.0; width];
    let mut f = 0.0;
    for tau in 0..width {
        let row = &params.as_slice()[tau * input_dim..(tau + 1) * input_dim];
        let a: f64 = row.iter().zip(x.as_slice()).map(|(w, xi)| w * xi).sum();
        pre[tau] = a;
        f += signs.sign(tau) * mag * activation.phi(a);
    }
    let r = f - y;
    let l = 0.5 * r * r;

    // dl/dw_τ = r · μ_τ · φ′(a_τ) · x ;  dl/dx = r · Σ_τ μ_τ φ′(a_τ) w_τ
    let gp = want_params.then(|| {
        let mut g = vec![0.0; width * input_dim];
        for tau in 0..width {
            let c = r * signs.sign(tau) * mag * activation.phi_prime(pre[tau]);
            for j in 0..input_dim {
                g[tau * input_dim + j] = c * x[j];
            }
        }
        ParamVector::from_raw(g)
    });
    let gx = want_input.then(|| {
        let mut g = vec![0.0; input_dim];
        for tau in 0..width {
            let c = r * signs.sign(tau) * mag * activation.phi_prime(pre[tau]);
            let row = &params.as_slice()[tau * input_dim..(tau + 1) * input_dim];
            for j in 0..input_dim {
                g[j] += c * row[j];
            }
        }
        Vector::from_raw(g)
    });
    Ok((l, gp, gx))
}

/// Forward pass bookkeeping for the mlp backward pass.
struct MlpTrace {
    /// activations[0] = x, last = logits.
    activations: Vec<Vec<f64>>,
    /// pre_activations[l] feeds activation l+1 (hidden layers only keep φ′).
    pre_activations: Vec<Vec<f64>>,
}

fn mlp_forward(spec: &ModelSpec, params: &ParamVector, x: &Vector) -> MlpTrace {
    let sizes = spec.mlp_sizes();
    let activation = match spec {
        ModelSpec::Mlp { activation, .. } => *activation,
        _ => unreachable!(),
    };
    let n_layers = sizes.len() - 1;
    let p = params.as_slice();
    let mut activations = Vec::with_capacity(n_layers + 1);
    let mut pre_activations = Vec::with_capacity(n_layers);
    activations.push(x.as_slice().to_vec());
    let mut offset = 0;
    for l in 0..n_layers {
        let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
        let weights = &p[offset..offset + fan_in * fan_out];
        let biases = &p[offset + fan_in * fan_out..offset + (fan_in + 1) * fan_out];
        offset += (fan_in + 1) * fan_out;
        let input = activations.last().unwrap();
        let mut z = vec![0.0; fan_out];
        for o in 0..fan_out {
            let row = &weights[o * fan_in..(o + 1) * fan_in];
            z[o] = biases[o] + row.iter().zip(input).map(|(w, a)| w * a).sum::<f64>();
        }
        let is_output = l == n_layers - 1;
        let a = if is_output {
            z.clone()
        } else {
            z.iter().map(|v| activation.phi(*v)).collect()
        };
        pre_activations.push(z);
        activations.push(a);
    }
    MlpTrace {
        activations,
        pre_activations,
    }
}

fn mlp_backward(
    spec: &ModelSpec,
    params: &ParamVector,
    x: &Vector,
    y: Label,
    want_params: bool,
    want_input: bool,
) -> Result<(f64, Option<ParamVector>, Option<Vector>)> {
    let y = match y {
        Label::Class(c) => c,
        Label::Real(_) => {
            return Err(FalError::invalid(
                "mlp is a classification model; got a real-valued label",
            ))
        }
    };
    let sizes = spec.mlp_sizes();
    let activation = match spec {
        ModelSpec::Mlp { activation, .. } => *activation,
        _ => unreachable!(),
    };
    let classes = *sizes.last().unwrap();
    if y >= classes {
        return Err(FalError::LabelOutOfRange {
            got: y,
            classes,
        });
    }

    let trace = mlp_forward(spec, params, x);
    let logits = trace.activations.last().unwrap();
    let lse = log_sum_exp(logits);
    let l = lse - logits[y];

    // delta at the logits: softmax − one-hot
    let mut delta: Vec<f64> = logits.iter().map(|v| (v - lse).exp()).collect();
    delta[y] -= 1.0;

    let n_layers = sizes.len() - 1;
    let p = params.as_slice();
    // per-layer parameter offsets in the flat vector
    let mut offsets = Vec::with_capacity(n_layers);
    let mut offset = 0;
    for l in 0..n_layers {
        offsets.push(offset);
        offset += (sizes[l] + 1) * sizes[l + 1];
    }

    let mut grad = want_params.then(|| vec![0.0; params.dim()]);
    for l in (0..n_layers).rev() {
        let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
        let weights = &p[offsets[l]..offsets[l] + fan_in * fan_out];
        if let Some(g) = grad.as_mut() {
            let input = &trace.activations[l];
            let gw = &mut g[offsets[l]..offsets[l] + (fan_in + 1) * fan_out];
            for o in 0..fan_out {
                for j in 0..fan_in {
                    gw[o * fan_in + j] = delta[o] * input[j];
                }
                gw[fan_in * fan_out + o] = delta[o];
            }
        }
        let backprop_further = l > 0 || want_input;
        if !backprop_further {
            break;
        }
        let mut prev = vec![0.0; fan_in];
        for o in 0..fan_out {
            let row = &weights[o * fan_in..(o + 1) * fan_in];
            for j in 0..fan_in {
                prev[j] += row[j] * delta[o];
            }
        }
        if l > 0 {
            // chain through the hidden activation
            for (v, z) in prev.iter_mut().zip(&trace.pre_activations[l - 1]) {
                *v *= activation.phi_prime(*z);
            }
        }
        delta = prev;
    }

    let gp = grad.map(ParamVector::from_raw);
    let gx = want_input.then(|| Vector::from_raw(delta));
    Ok((l, gp, gx))
}

/// Fresh parameters: weights i.i.d. Gaussian with standard deviation
/// 1/√fan_in, biases zero. Deterministic given the stream.
pub fn init_params(spec: &ModelSpec, rng: &mut RngStream) -> Result<ParamVector> {
    spec.validate()?;
    match spec {
        ModelSpec::ShallowNet {
            input_dim, width, ..
        } => {
            let sd = 1.0 / (*input_dim as f64).sqrt();
            let p: Vec<f64> = (0..input_dim * width)
                .map(|_| rng.sample_normal() * sd)
                .collect();
            Ok(ParamVector::from_raw(p))
        }
        ModelSpec::Mlp { .. } => {
            let sizes = spec.mlp_sizes();
            let mut p = Vec::with_capacity(spec.param_len());
            for w in sizes.windows(2) {
                let (fan_in, fan_out) = (w[0], w[1]);
                let sd = 1.0 / (fan_in as f64).sqrt();
                for _ in 0..fan_in * fan_out {
                    p.push(rng.sample_normal() * sd);
                }
                for _ in 0..fan_out {
                    p.push(0.0);
                }
            }
            Ok(ParamVector::from_raw(p))
        }
    }
}

/// Largest ℓ2 norm over the shallow net's weight rows — reported (not
/// enforced) because no numeric weight-domain bound is prescribed anywhere.
pub fn max_row_norm(spec: &ModelSpec, params: &ParamVector) -> Result<f64> {
    spec.validate()?;
    if params.dim() != spec.param_len() {
        return Err(FalError::DimensionMismatch {
            expected: spec.param_len(),
            got: params.dim(),
        });
    }
    match spec {
        ModelSpec::ShallowNet {
            input_dim, width, ..
        } => {
            let mut best = 0.0f64;
            for tau in 0..*width {
                let row = &params.as_slice()[tau * input_dim..(tau + 1) * input_dim];
                best = best.max(row.iter().map(|w| w * w).sum::<f64>().sqrt());
            }
            Ok(best)
        }
        ModelSpec::Mlp { .. } => Err(FalError::Unsupported(
            "row-norm reporting applies to the shallow net".into(),
        )),
    }
}

/// Smoothness and domain constants of the shallow-net adversarial objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessConstants {
    pub b_phi: f64,
    pub b_phi_prime: f64,
    pub b_phi_doubleprime: f64,
    pub c_x: f64,
    pub c_y: f64,
    pub c_w: f64,
    pub c_0: f64,
    /// Parameter-smoothness constant of the adversarial loss.
    pub zeta_theta: f64,
    /// Input-smoothness constant (read-only; informational).
    pub zeta_x: f64,
    pub b_prime: f64,
    pub h_k: f64,
}

/// Computes the smoothness constants for a shallow net:
///
/// * ζ_θ = 2(C_x² + ρ²)(B_φ′² + B_φ″·B_φ + B_φ″·C_y/√s)
/// * ζ_x = (C_x+ρ)·C_W·B_φ′² + (B_φ′ + (C_x+ρ)·C_W·B_φ″)(√s·B_φ + C_y)
/// * b′  = C_x²·B_φ″·(C_x·B_φ′ + √(2·C_0))
/// * H_K = 2√(K·η·C_0)
///
/// `c_w` (the weight-row norm bound) enters ζ_x only; pass the intended
/// domain bound or 1.0 if unconstrained.
#[allow(clippy::too_many_arguments)]
pub fn compute_constants(
    spec: &ModelSpec,
    rho: f64,
    k_epochs: usize,
    eta: f64,
    c_0: f64,
    c_x: f64,
    c_y: f64,
    c_w: f64,
) -> Result<SmoothnessConstants> {
    let (width, activation) = match spec {
        ModelSpec::ShallowNet {
            width, activation, ..
        } => (*width, *activation),
        ModelSpec::Mlp { .. } => {
            return Err(FalError::Unsupported(
                "smoothness constants are defined for the shallow net".into(),
            ))
        }
    };
    for (name, v) in [
        ("rho", rho),
        ("eta", eta),
        ("c_0", c_0),
        ("c_x", c_x),
        ("c_y", c_y),
        ("c_w", c_w),
    ] {
        if v < 0.0 || !v.is_finite() {
            return Err(FalError::invalid(format!("{name} must be >= 0, got {v}")));
        }
    }
    let (b_phi, b_phi_prime, b_phi_doubleprime) = activation.bounds();
    let sqrt_s = (width as f64).sqrt();
    let zeta_theta = 2.0
        * (c_x * c_x + rho * rho)
        * (b_phi_prime * b_phi_prime + b_phi_doubleprime * b_phi + b_phi_doubleprime * c_y / sqrt_s);
    let zeta_x = (c_x + rho) * c_w * b_phi_prime * b_phi_prime
        + (b_phi_prime + (c_x + rho) * c_w * b_phi_doubleprime) * (sqrt_s * b_phi + c_y);
    let b_prime = c_x * c_x * b_phi_doubleprime * (c_x * b_phi_prime + (2.0 * c_0).sqrt());
    let h_k = 2.0 * (k_epochs as f64 * eta * c_0).sqrt();
    Ok(SmoothnessConstants {
        b_phi,
        b_phi_prime,
        b_phi_doubleprime,
        c_x,
        c_y,
        c_w,
        c_0,
        zeta_theta,
        zeta_x,
        b_prime,
        h_k,
    })
}

/// Result of the over-parameterization width check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WidthCheck {
    pub satisfied: bool,
    pub required_s: f64,
}

/// Evaluates the width requirement
/// `s ≥ 16·η²·T²·K²·(b′·H_K)²·(1 + 2ηζ_θ)²`
/// with H_K recomputed for the given (K, η) from the constants' C_0, so the
/// check is self-consistent when probing horizons other than the one the
/// constants were built with.
pub fn check_width_condition(
    constants: &SmoothnessConstants,
    s: usize,
    eta: f64,
    t_rounds: usize,
    k_epochs: usize,
) -> Result<WidthCheck> {
    if eta < 0.0 || !eta.is_finite() {
        return Err(FalError::invalid(format!("eta must be >= 0, got {eta}")));
    }
    if s == 0 {
        return Err(FalError::invalid("width s must be >= 1"));
    }
    let h_k = 2.0 * (k_epochs as f64 * eta * constants.c_0).sqrt();
    let t = t_rounds as f64;
    let k = k_epochs as f64;
    let damp = 1.0 + 2.0 * eta * constants.zeta_theta;
    let required_s =
        16.0 * eta * eta * t * t * k * k * (constants.b_prime * h_k).powi(2) * damp * damp;
    Ok(WidthCheck {
        satisfied: s as f64 >= required_s,
        required_s,
    })
}

const CHECKPOINT_FORMAT: &str = "falsim-params";
const CHECKPOINT_ORDER_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    order_version: u32,
    spec: ModelSpec,
    param_len: usize,
}

/// Writes parameters as a little-endian f64 array behind a JSON header
/// (format tag, canonical-order version, spec, length) that is itself
/// prefixed by its little-endian u32 byte length.
pub fn save_checkpoint(path: &Path, spec: &ModelSpec, params: &ParamVector) -> Result<()> {
    spec.validate()?;
    if params.dim() != spec.param_len() {
        return Err(FalError::DimensionMismatch {
            expected: spec.param_len(),
            got: params.dim(),
        });
    }
    let header = serde_json::to_vec(&CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        order_version: CHECKPOINT_ORDER_VERSION,
        spec: spec.clone(),
        param_len: params.dim(),
    })
    .map_err(|e| FalError::invalid(format!("checkpoint header serialization: {e}")))?;
    let io_err = |source| FalError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut file = std::fs::File::create(path).map_err(io_err)?;
    file.write_all(&(header.len() as u32).to_le_bytes())
        .map_err(io_err)?;
    file.write_all(&header).map_err(io_err)?;
    let mut buf = Vec::with_capacity(params.dim() * 8);
    for v in params.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    file.write_all(&buf).map_err(io_err)?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(ModelSpec, ParamVector)> {
    let io_err = |source| FalError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut file = std::fs::File::open(path).map_err(io_err)?;
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes).map_err(io_err)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes).map_err(io_err)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| FalError::invalid(format!("checkpoint header parse: {e}")))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(FalError::invalid(format!(
            "not a parameter checkpoint (format tag {:?})",
            header.format
        )));
    }
    if header.order_version != CHECKPOINT_ORDER_VERSION {
        return Err(FalError::invalid(format!(
            "unsupported parameter order version {}",
            header.order_version
        )));
    }
    if header.param_len != header.spec.param_len() {
        return Err(FalError::invalid(format!(
            "checkpoint length {} does not match spec ({})",
            header.param_len,
            header.spec.param_len()
        )));
    }
    let mut data = vec![0u8; header.param_len * 8];
    file.read_exact(&mut data).map_err(io_err)?;
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let params = ParamVector::new(values)?;
    Ok((header.spec, params))
}
