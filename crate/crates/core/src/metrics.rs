//! Measurement: generalization gaps, replace-one stability, heterogeneity
//! via total-variation estimates, and the closed-form bound scores used to
//! rank trainer/aggregator combinations.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::{self, AttackConfig, EvalStreams, RobustEval};
use crate::core_math::{ParamVector, RngStream, StreamKey, Vector, SERVER};
use crate::data::{self, ClientPartition, Dataset, NeighborSpec, Sample};
use crate::error::{FalError, Result};
use crate::federation::{self, TrainSetup};
use crate::models::{self, Label, ModelSpec};
use crate::smoothing::Method;

/// Random projections used by the histogram TV estimator.
pub const TV_PROJECTIONS: usize = 8;
/// Bins per projection.
pub const TV_BINS: usize = 32;

/// How to estimate the total-variation distance between two sample sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TvMethod {
    /// Half-L1 distance between class-frequency vectors. Exact for the
    /// label marginal; blind to feature shifts.
    LabelMarginal,
    /// Half-L1 between per-projection feature histograms, averaged over
    /// random directions. Sees feature shifts (e.g. adversarial ones) that
    /// leave labels untouched.
    ProjectedHistogram,
}

fn label_marginal_tv(a: &[Sample], b: &[Sample]) -> Result<f64> {
    let class_of = |s: &Sample| match s.y {
        Label::Class(c) => Ok(c),
        Label::Real(_) => Err(FalError::invalid(
            "label_marginal needs class-labeled samples",
        )),
    };
    let mut k = 0usize;
    for s in a.iter().chain(b) {
        k = k.max(class_of(s)? + 1);
    }
    let mut pa = vec![0.0; k];
    let mut pb = vec![0.0; k];
    for s in a {
        pa[class_of(s)?] += 1.0 / a.len() as f64;
    }
    for s in b {
        pb[class_of(s)?] += 1.0 / b.len() as f64;
    }
    Ok(0.5 * pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).sum::<f64>())
}

fn projected_histogram_tv(a: &[Sample], b: &[Sample], rng: &mut RngStream) -> Result<f64> {
    let dim = a[0].x.dim();
    for s in a.iter().chain(b) {
        if s.x.dim() != dim {
            return Err(FalError::DimensionMismatch {
                expected: dim,
                got: s.x.dim(),
            });
        }
    }
    let mut total = 0.0;
    for _ in 0..TV_PROJECTIONS {
        // a uniform random direction
        let mut direction;
        loop {
            direction = Vector::from_raw((0..dim).map(|_| rng.sample_normal()).collect());
            let norm = direction.norm_l2();
            if norm > 0.0 {
                direction.scale_mut(1.0 / norm);
                break;
            }
        }
        let proj_a: Vec<f64> = a.iter().map(|s| s.x.dot(&direction)).collect();
        let proj_b: Vec<f64> = b.iter().map(|s| s.x.dot(&direction)).collect();
        let lo = proj_a
            .iter()
            .chain(&proj_b)
            .cloned()
            .fold(f64::INFINITY, f64::min);
        let hi = proj_a
            .iter()
            .chain(&proj_b)
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        if !(hi > lo) {
            // all projected values coincide: both sets share one bin
            continue;
        }
        let bin_of = |v: f64| {
            let raw = ((v - lo) / (hi - lo) * TV_BINS as f64) as usize;
            raw.min(TV_BINS - 1)
        };
        let mut ha = vec![0.0; TV_BINS];
        let mut hb = vec![0.0; TV_BINS];
        for &v in &proj_a {
            ha[bin_of(v)] += 1.0 / proj_a.len() as f64;
        }
        for &v in &proj_b {
            hb[bin_of(v)] += 1.0 / proj_b.len() as f64;
        }
        total += 0.5 * ha.iter().zip(&hb).map(|(x, y)| (x - y).abs()).sum::<f64>();
    }
    Ok(total / TV_PROJECTIONS as f64)
}

/// Total-variation distance estimate between two sample sets. The result
/// lies in [0, 1], is symmetric when both orders consume identically seeded
/// streams, and is exactly 0 for identical sets.
pub fn estimate_tv(
    a: &[Sample],
    b: &[Sample],
    method: TvMethod,
    rng: &mut RngStream,
) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(FalError::Empty("tv estimation sample set".into()));
    }
    match method {
        TvMethod::LabelMarginal => label_marginal_tv(a, b),
        TvMethod::ProjectedHistogram => projected_histogram_tv(a, b, rng),
    }
}

/// Robust train/test evaluation of one model, with the gaps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub train: RobustEval,
    pub test: RobustEval,
    /// test minus train robust loss.
    pub loss_gap: f64,
    /// train minus test robust accuracy (classifiers only).
    pub acc_gap: Option<f64>,
}

/// Measures the adversarial generalization gap of fixed parameters. With
/// the default zero attack initialization, evaluating the same set as both
/// train and test yields gaps of exactly zero.
#[allow(clippy::too_many_arguments)]
pub fn generalization_gap(
    cfg: &AttackConfig,
    spec: &ModelSpec,
    params: &ParamVector,
    train: &[Sample],
    test: &[Sample],
    root_seed: u64,
    round: u64,
) -> Result<GapReport> {
    let train_eval = adversary::robust_eval(
        cfg,
        spec,
        params,
        train,
        &EvalStreams::new(root_seed, round, "eval-train"),
    )?;
    let test_eval = adversary::robust_eval(
        cfg,
        spec,
        params,
        test,
        &EvalStreams::new(root_seed, round, "eval-test"),
    )?;
    let acc_gap = match (train_eval.accuracy, test_eval.accuracy) {
        (Some(a), Some(b)) => Some(a - b),
        _ => None,
    };
    Ok(GapReport {
        train: train_eval,
        test: test_eval,
        loss_gap: test_eval.loss - train_eval.loss,
        acc_gap,
    })
}

/// Replace-one stability experiment settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StabilityConfig {
    /// Which client's dataset gets the replacement.
    pub client: usize,
    /// How many sample positions to probe (J).
    pub indices: usize,
    /// Fresh replacement draws per position (R).
    pub resamples: usize,
    /// Training seeds averaged over.
    pub seeds: Vec<u64>,
    /// Diagnostic mode: "replace" each probed sample with itself. The
    /// coupled runs then see identical data and identical streams, so every
    /// delta must be exactly zero.
    pub null_replacement: bool,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        StabilityConfig {
            client: 0,
            indices: 3,
            resamples: 3,
            seeds: vec![101, 102, 103],
            null_replacement: false,
        }
    }
}

/// Stability of one probed position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexStability {
    /// Position within the client's partition.
    pub index: usize,
    pub mean_abs_delta: f64,
    /// All |loss(A(S); z') - loss(A(S'); z')| values, seed-major.
    pub deltas: Vec<f64>,
}

/// Result of a replace-one stability experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityEstimate {
    /// Max over probed positions of the mean absolute loss delta.
    pub epsilon_hat: f64,
    pub client: usize,
    pub per_index: Vec<IndexStability>,
    pub seeds: Vec<u64>,
    pub resamples: usize,
    pub t_rounds: usize,
}

/// Measures on-average replace-one stability: trains coupled runs on a
/// dataset and its one-sample neighbors (same seeds, hence identical
/// random streams), and compares the adversarial loss both final models
/// assign to the replacement sample. Needs a generated dataset unless
/// `null_replacement` is set.
pub fn estimate_stability(
    setup: &TrainSetup<'_>,
    t_rounds: usize,
    cfg: &StabilityConfig,
) -> Result<StabilityEstimate> {
    if cfg.seeds.is_empty() {
        return Err(FalError::Empty("stability seed list".into()));
    }
    if cfg.indices == 0 || cfg.resamples == 0 {
        return Err(FalError::invalid(
            "stability needs indices >= 1 and resamples >= 1",
        ));
    }
    let m = setup.partitions.len();
    if cfg.client >= m {
        return Err(FalError::invalid(format!(
            "client {} out of range (m = {m})",
            cfg.client
        )));
    }
    let n_client = setup.partitions[cfg.client].indices.len();
    let j_count = cfg.indices.min(n_client);
    let resamples = if cfg.null_replacement {
        1 // identical replacements are identical; repeating them adds nothing
    } else {
        cfg.resamples
    };

    // probe positions, drawn once so every seed sees the same grid
    let mut idx_stream = RngStream::new(
        cfg.seeds[0],
        &StreamKey::new(0, cfg.client as u64, "stability-indices"),
    );
    let mut positions = idx_stream.sample_distinct(n_client, j_count);
    positions.sort_unstable();

    // replacement draws, also shared across seeds
    let mut replacements: Vec<Vec<NeighborSpec>> = Vec::with_capacity(positions.len());
    for (slot, &j) in positions.iter().enumerate() {
        let mut specs = Vec::with_capacity(resamples);
        for r in 0..resamples {
            let spec = if cfg.null_replacement {
                NeighborSpec::identity(setup.dataset, setup.partitions, cfg.client, j)?
            } else {
                let mut draw_stream = RngStream::new(
                    cfg.seeds[0],
                    &StreamKey::indexed(
                        0,
                        cfg.client as u64,
                        "neighbor-draw",
                        (slot * resamples + r) as u64,
                    ),
                );
                data::draw_replacement(
                    setup.dataset,
                    setup.partitions,
                    cfg.client,
                    j,
                    &mut draw_stream,
                )?
            };
            specs.push(spec);
        }
        replacements.push(specs);
    }

    // |adversarial loss delta| at the replacement point, between the
    // coupled final models
    let point_delta = |params_a: &ParamVector,
                       params_b: &ParamVector,
                       z: &Sample,
                       seed: u64,
                       tag: u64|
     -> Result<f64> {
        let mut rng_a = RngStream::new(
            seed,
            &StreamKey::indexed(t_rounds as u64, SERVER, "stability-eval", tag),
        );
        let mut rng_b = rng_a.clone();
        let xa = adversary::attack(setup.attack, setup.spec, params_a, &z.x, z.y, &mut rng_a)?;
        let xb = adversary::attack(setup.attack, setup.spec, params_b, &z.x, z.y, &mut rng_b)?;
        let la = models::loss(setup.spec, params_a, &xa, z.y)?;
        let lb = models::loss(setup.spec, params_b, &xb, z.y)?;
        Ok((la - lb).abs())
    };

    let mut deltas: Vec<Vec<f64>> = vec![Vec::new(); positions.len()];
    for &seed in &cfg.seeds {
        let mut base_setup = *setup;
        base_setup.root_seed = seed;
        let base = federation::train(&base_setup, t_rounds, None)?;
        for (slot, specs) in replacements.iter().enumerate() {
            for (r, nspec) in specs.iter().enumerate() {
                let neighbor = data::make_neighbor(setup.dataset, setup.partitions, nspec)?;
                let mut neighbor_setup = base_setup;
                neighbor_setup.dataset = &neighbor;
                let coupled = federation::train(&neighbor_setup, t_rounds, None)?;
                let delta = point_delta(
                    &base.params,
                    &coupled.params,
                    &nspec.replacement,
                    seed,
                    (slot * resamples + r) as u64,
                )?;
                deltas[slot].push(delta);
            }
        }
    }

    let per_index: Vec<IndexStability> = positions
        .iter()
        .zip(deltas)
        .map(|(&index, deltas)| {
            let mean = deltas.iter().sum::<f64>() / deltas.len() as f64;
            IndexStability {
                index,
                mean_abs_delta: mean,
                deltas,
            }
        })
        .collect();
    let epsilon_hat = per_index
        .iter()
        .map(|s| s.mean_abs_delta)
        .fold(0.0, f64::max);

    Ok(StabilityEstimate {
        epsilon_hat,
        client: cfg.client,
        per_index,
        seeds: cfg.seeds.clone(),
        resamples,
        t_rounds,
    })
}

/// One client's heterogeneity components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientHeterogeneity {
    pub client: usize,
    /// Shift between the client's adversarial and clean feature views.
    pub adv_vs_clean: f64,
    /// Shift between the client's clean data and the pooled clean data.
    pub clean_vs_pool: f64,
    /// Shift between pooled adversarial and pooled clean data (shared by
    /// all clients).
    pub adv_pool_vs_pool: f64,
    /// max of the three components.
    pub d_i: f64,
}

/// Heterogeneity survey across all clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneityReport {
    pub per_client: Vec<ClientHeterogeneity>,
    /// max over clients of d_i — the D_max the bound scores consume.
    pub d_max: f64,
    pub method: TvMethod,
}

/// Measures per-client distribution drift under the current model: each
/// client's clean-vs-pool shift (using the requested method) and the
/// adversarial shifts (always via feature histograms, since attacks move
/// features, not labels). d_i is the max of the three components.
#[allow(clippy::too_many_arguments)]
pub fn heterogeneity_report(
    cfg: &AttackConfig,
    spec: &ModelSpec,
    params: &ParamVector,
    dataset: &Dataset,
    partitions: &[ClientPartition],
    method: TvMethod,
    root_seed: u64,
    round: u64,
) -> Result<HeterogeneityReport> {
    dataset.validate()?;
    if partitions.is_empty() {
        return Err(FalError::Empty("partition list".into()));
    }
    if method == TvMethod::LabelMarginal && dataset.classes.is_none() {
        return Err(FalError::invalid(
            "label_marginal needs class-labeled samples",
        ));
    }

    // adversarial snapshot of every sample, keyed by global index
    let streams = EvalStreams::new(root_seed, round, "het-attack");
    let attacked: Vec<Sample> = dataset
        .samples
        .par_iter()
        .enumerate()
        .map(|(idx, s)| -> Result<Sample> {
            let mut rng = streams.for_sample(idx);
            let x_adv = adversary::attack(cfg, spec, params, &s.x, s.y, &mut rng)?;
            Ok(Sample { x: x_adv, y: s.y })
        })
        .collect::<Result<_>>()?;

    let mut tv_stream = RngStream::new(root_seed, &StreamKey::new(round, SERVER, "het-tv"));
    let adv_pool_vs_pool = estimate_tv(
        &attacked,
        &dataset.samples,
        TvMethod::ProjectedHistogram,
        &mut tv_stream,
    )?;

    let mut per_client = Vec::with_capacity(partitions.len());
    for part in partitions {
        if part.is_empty() {
            return Err(FalError::Empty(format!("client {} partition", part.client)));
        }
        let clean: Vec<Sample> = part.indices.iter().map(|&i| dataset.samples[i].clone()).collect();
        let adv: Vec<Sample> = part.indices.iter().map(|&i| attacked[i].clone()).collect();
        let adv_vs_clean =
            estimate_tv(&adv, &clean, TvMethod::ProjectedHistogram, &mut tv_stream)?;
        let clean_vs_pool = estimate_tv(&clean, &dataset.samples, method, &mut tv_stream)?;
        let d_i = adv_vs_clean.max(clean_vs_pool).max(adv_pool_vs_pool);
        per_client.push(ClientHeterogeneity {
            client: part.client,
            adv_vs_clean,
            clean_vs_pool,
            adv_pool_vs_pool,
            d_i,
        });
    }
    let d_max = per_client.iter().map(|c| c.d_i).fold(0.0, f64::max);
    Ok(HeterogeneityReport {
        per_client,
        d_max,
        method,
    })
}

/// Server algorithm a bound score is asked for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServerAlgo {
    Vfal,
    Sfal,
}

impl std::fmt::Display for ServerAlgo {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ServerAlgo::Vfal => write!(f, "vfal"),
            ServerAlgo::Sfal => write!(f, "sfal"),
        }
    }
}

/// The slack speedup factor r_alpha = 1 + alpha/(1-alpha) * 2*m_hat/m.
pub fn r_alpha(alpha: f64, m_hat: f64, m: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(FalError::invalid(format!(
            "alpha must satisfy 0 <= alpha < 1, got {alpha}"
        )));
    }
    if m < 1.0 || m_hat < 1.0 || m_hat > m / 2.0 {
        return Err(FalError::invalid(format!(
            "m_hat must satisfy 1 <= m_hat <= m/2 (m = {m}, m_hat = {m_hat})"
        )));
    }
    Ok(1.0 + alpha / (1.0 - alpha) * (2.0 * m_hat / m))
}

/// Problem-size inputs for the bound scores. All hidden constants are 1,
/// logs are natural, and the horizon must satisfy t_rounds >= 1 so the
/// log terms stay nonnegative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundInputs {
    pub rho: f64,
    pub t_rounds: f64,
    pub m: f64,
    pub n_min: f64,
    /// RSA noise draws per step.
    pub q: f64,
    /// Shallow-net width (enters the OPSA score).
    pub s: f64,
    /// Heterogeneity level, e.g. the D_max of a heterogeneity report.
    pub d_max: f64,
    /// Optimization-quality constant (initial suboptimality scale).
    pub delta: f64,
    /// Gradient-noise level. Housed here for completeness; the score forms
    /// do not consume it.
    pub sigma: f64,
    /// Slack value (SFAL scores).
    pub alpha: f64,
    /// Slack head size (SFAL scores).
    pub m_hat: f64,
}

impl Default for BoundInputs {
    fn default() -> Self {
        BoundInputs {
            rho: 0.25,
            t_rounds: 10.0,
            m: 4.0,
            n_min: 1.0,
            q: 4.0,
            s: 64.0,
            d_max: 0.0,
            delta: 1.0,
            sigma: 1.0,
            alpha: 0.0,
            m_hat: 1.0,
        }
    }
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_rounds >= 1.0) {
            return Err(FalError::invalid(format!(
                "bound scores need t_rounds >= 1, got {}",
                self.t_rounds
            )));
        }
        if self.m < 1.0 || self.n_min < 1.0 || self.q < 1.0 || self.s < 1.0 {
            return Err(FalError::invalid(
                "bound scores need m, n_min, q, s all >= 1",
            ));
        }
        for (name, v) in [
            ("rho", self.rho),
            ("d_max", self.d_max),
            ("delta", self.delta),
            ("sigma", self.sigma),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(FalError::invalid(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(FalError::invalid(format!(
                "alpha must satisfy 0 <= alpha < 1, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Growth-rate score of the excess-risk bound for a trainer/server pair:
/// the bound's leading terms with all hidden constants set to one. Smaller
/// is better; the absolute value is meaningless, only comparisons and
/// trends in the inputs carry information. The slack algorithm divides the
/// stability-driven terms (those carrying delta and d_max) by r_alpha.
pub fn bound_score(method: Method, algo: ServerAlgo, inp: &BoundInputs) -> Result<f64> {
    inp.validate()?;
    let r = match algo {
        ServerAlgo::Vfal => 1.0,
        ServerAlgo::Sfal => r_alpha(inp.alpha, inp.m_hat, inp.m)?,
    };
    let t = inp.t_rounds;
    let ln_t = t.ln();
    let mn = inp.m * inp.n_min;
    let score = match method {
        Method::Ssa => {
            inp.rho * t * ln_t
                + t * (ln_t * inp.delta).sqrt() / mn / r
                + t * ln_t * (inp.rho + 1.0) * inp.d_max / mn / r
        }
        Method::Rsa => {
            t.powf(0.25) * ln_t / inp.q.sqrt()
                + t.powf(0.75) * inp.delta.sqrt() / mn / r
                + t * ((inp.rho + 1.0) * inp.d_max).cbrt() / mn / r
        }
        Method::Opsa => {
            t.sqrt() * inp.delta.sqrt() / mn / r
                + t * (inp.rho * inp.rho * inp.s.sqrt() + 1.0) * inp.d_max / mn / r
        }
    };
    Ok(score)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adversary::AttackConfig;
    use crate::core_math::NormP;
    use crate::data::{generate_synthetic, partition_skew};
    use crate::federation::{AggregationConfig, OptimizerConfig};
    use crate::models::init_params;
    use crate::smoothing::SmoothingConfig;

    fn stream(seed: u64, purpose: &'static str) -> RngStream {
        RngStream::new(seed, &StreamKey::new(0, 0, purpose))
    }

    fn class_set(counts: &[usize]) -> Vec<Sample> {
        let mut out = Vec::new();
        for (class, &count) in counts.iter().enumerate() {
            for i in 0..count {
                out.push(Sample {
                    x: Vector::new(vec![class as f64 + i as f64 * 1e-3]).unwrap(),
                    y: Label::Class(class),
                });
            }
        }
        out
    }

    #[test]
    fn label_marginal_hand_examples() {
        let mut rng = stream(1, "tv");
        // identical marginals
        let a = class_set(&[5, 5]);
        assert_eq!(
            estimate_tv(&a, &a.clone(), TvMethod::LabelMarginal, &mut rng).unwrap(),
            0.0
        );
        // (0.8, 0.2) vs (0.5, 0.5) -> 0.3
        let b = class_set(&[8, 2]);
        let c = class_set(&[5, 5]);
        let d = estimate_tv(&b, &c, TvMethod::LabelMarginal, &mut rng).unwrap();
        assert!((d - 0.3).abs() < 1e-15);
        // disjoint classes -> 1
        let e = class_set(&[4, 0]);
        let f = class_set(&[0, 4]);
        assert_eq!(
            estimate_tv(&e, &f, TvMethod::LabelMarginal, &mut rng).unwrap(),
            1.0
        );
    }

    #[test]
    fn label_marginal_rejects_regression_labels() {
        let mut rng = stream(2, "tv");
        let a = vec![Sample {
            x: Vector::new(vec![0.0]).unwrap(),
            y: Label::Real(1.0),
        }];
        assert!(estimate_tv(&a, &a.clone(), TvMethod::LabelMarginal, &mut rng).is_err());
    }

    fn gaussian_blob(center: f64, n: usize, dim: usize, rng: &mut RngStream) -> Vec<Sample> {
        (0..n)
            .map(|_| {
                Sample {
                    x: Vector::from_raw(
                        (0..dim).map(|_| center + 0.3 * rng.sample_normal()).collect(),
                    ),
                    y: Label::Class(0),
                }
            })
            .collect()
    }

    #[test]
    fn projected_histogram_basics() {
        let mut data_rng = stream(3, "data");
        let near = gaussian_blob(0.0, 150, 4, &mut data_rng);
        let far = gaussian_blob(10.0, 150, 4, &mut data_rng);
        let close = gaussian_blob(0.0, 150, 4, &mut data_rng);

        // identical sets are exactly zero
        let d0 = estimate_tv(
            &near,
            &near.clone(),
            TvMethod::ProjectedHistogram,
            &mut stream(4, "tv"),
        )
        .unwrap();
        assert_eq!(d0, 0.0);

        // far-apart blobs are nearly maximally distinct
        let dfar = estimate_tv(&near, &far, TvMethod::ProjectedHistogram, &mut stream(4, "tv"))
            .unwrap();
        assert!(dfar > 0.9, "far-apart tv {dfar}");

        // same-distribution resamples are much closer
        let dnear =
            estimate_tv(&near, &close, TvMethod::ProjectedHistogram, &mut stream(4, "tv"))
                .unwrap();
        assert!(dnear < dfar);
        assert!((0.0..=1.0).contains(&dnear));
    }

    #[test]
    fn projected_histogram_is_symmetric_given_equal_streams() {
        let mut data_rng = stream(5, "data");
        let a = gaussian_blob(0.0, 60, 3, &mut data_rng);
        let b = gaussian_blob(1.0, 80, 3, &mut data_rng);
        let ab = estimate_tv(&a, &b, TvMethod::ProjectedHistogram, &mut stream(6, "tv")).unwrap();
        let ba = estimate_tv(&b, &a, TvMethod::ProjectedHistogram, &mut stream(6, "tv")).unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn projected_histogram_respects_triangle_inequality_approximately() {
        let mut data_rng = stream(7, "data");
        for trial in 0..10u64 {
            let a = gaussian_blob(0.0, 70, 2, &mut data_rng);
            let b = gaussian_blob(trial as f64 * 0.3, 70, 2, &mut data_rng);
            let c = gaussian_blob(trial as f64 * 0.6, 70, 2, &mut data_rng);
            let ab =
                estimate_tv(&a, &b, TvMethod::ProjectedHistogram, &mut stream(8, "tv")).unwrap();
            let bc =
                estimate_tv(&b, &c, TvMethod::ProjectedHistogram, &mut stream(8, "tv")).unwrap();
            let ac =
                estimate_tv(&a, &c, TvMethod::ProjectedHistogram, &mut stream(8, "tv")).unwrap();
            assert!(
                ac <= ab + bc + 0.05,
                "triangle violation: {ac} > {ab} + {bc} + 0.05"
            );
        }
    }

    #[test]
    fn same_set_gap_is_exactly_zero() {
        let spec = ModelSpec::mlp(4, vec![5], 3);
        let mut rng = stream(9, "init");
        let params = init_params(&spec, &mut rng).unwrap();
        let mut data_rng = stream(10, "data");
        let data = generate_synthetic(3, 4, 15, 3.0, "d", 10, &mut data_rng).unwrap();
        let cfg = AttackConfig::new(0.2, NormP::LInf);
        let report =
            generalization_gap(&cfg, &spec, &params, &data.samples, &data.samples, 7, 0).unwrap();
        assert_eq!(report.loss_gap, 0.0);
        assert_eq!(report.acc_gap, Some(0.0));
    }

    #[test]
    fn overfit_model_shows_positive_gap() {
        // tiny training set, fresh test set, enough rounds to memorize
        let mut data_rng = stream(11, "data");
        let train = generate_synthetic(3, 4, 8, 2.0, "train", 11, &mut data_rng).unwrap();
        let mut test_rng = stream(12, "data");
        let test = generate_synthetic(3, 4, 60, 2.0, "test", 12, &mut test_rng).unwrap();
        let mut part_rng = stream(13, "part");
        let partitions = partition_skew(&train, 2, 10.0, &mut part_rng).unwrap();
        let spec = ModelSpec::mlp(4, vec![16], 3);
        let smoothing = SmoothingConfig {
            eta0: 0.1,
            ..SmoothingConfig::default()
        };
        let attack = AttackConfig::new(0.1, NormP::LInf);
        let agg = AggregationConfig::default();
        let setup = TrainSetup {
            spec: &spec,
            dataset: &train,
            partitions: &partitions,
            smoothing: &smoothing,
            attack: &attack,
            aggregation: &agg,
            optimizer: OptimizerConfig::default(),
            batch_size: 8,
            root_seed: 21,
            sfal_lr_scaling: false,
        };
        let out = federation::train(&setup, 25, None).unwrap();
        let report = generalization_gap(
            &attack,
            &spec,
            &out.params,
            &train.samples,
            &test.samples,
            21,
            25,
        )
        .unwrap();
        assert!(
            report.loss_gap > 0.0,
            "expected an overfit gap, got {}",
            report.loss_gap
        );
    }

    fn stability_harness() -> (Dataset, Vec<ClientPartition>, ModelSpec) {
        let mut data_rng = stream(14, "data");
        let dataset = generate_synthetic(2, 3, 10, 3.0, "stab", 14, &mut data_rng).unwrap();
        let mut part_rng = stream(15, "part");
        let partitions = partition_skew(&dataset, 2, 20.0, &mut part_rng).unwrap();
        let spec = ModelSpec::mlp(3, vec![4], 2);
        (dataset, partitions, spec)
    }

    #[test]
    fn null_replacement_gives_exactly_zero_stability() {
        let (dataset, partitions, spec) = stability_harness();
        let smoothing = SmoothingConfig::default();
        let attack = AttackConfig::new(0.15, NormP::LInf);
        let agg = AggregationConfig::default();
        let setup = TrainSetup {
            spec: &spec,
            dataset: &dataset,
            partitions: &partitions,
            smoothing: &smoothing,
            attack: &attack,
            aggregation: &agg,
            optimizer: OptimizerConfig::default(),
            batch_size: 4,
            root_seed: 0,
            sfal_lr_scaling: false,
        };
        let cfg = StabilityConfig {
            client: 1,
            indices: 2,
            resamples: 2,
            seeds: vec![31, 32],
            null_replacement: true,
        };
        let est = estimate_stability(&setup, 2, &cfg).unwrap();
        assert_eq!(est.epsilon_hat, 0.0);
        assert!(est.per_index.iter().all(|s| s.deltas.iter().all(|&d| d == 0.0)));
    }

    #[test]
    fn zero_rounds_give_zero_stability() {
        let (dataset, partitions, spec) = stability_harness();
        let smoothing = SmoothingConfig::default();
        let attack = AttackConfig::new(0.15, NormP::LInf);
        let agg = AggregationConfig::default();
        let setup = TrainSetup {
            spec: &spec,
            dataset: &dataset,
            partitions: &partitions,
            smoothing: &smoothing,
            attack: &attack,
            aggregation: &agg,
            optimizer: OptimizerConfig::default(),
            batch_size: 4,
            root_seed: 0,
            sfal_lr_scaling: false,
        };
        let cfg = StabilityConfig {
            client: 0,
            indices: 2,
            resamples: 1,
            seeds: vec![41],
            null_replacement: false,
        };
        let est = estimate_stability(&setup, 0, &cfg).unwrap();
        assert_eq!(est.epsilon_hat, 0.0);
    }

    #[test]
    fn real_replacements_give_finite_positive_structure() {
        let (dataset, partitions, spec) = stability_harness();
        let smoothing = SmoothingConfig::default();
        let attack = AttackConfig::new(0.15, NormP::LInf);
        let agg = AggregationConfig::default();
        let setup = TrainSetup {
            spec: &spec,
            dataset: &dataset,
            partitions: &partitions,
            smoothing: &smoothing,
            attack: &attack,
            aggregation: &agg,
            optimizer: OptimizerConfig::default(),
            batch_size: 4,
            root_seed: 0,
            sfal_lr_scaling: false,
        };
        let cfg = StabilityConfig {
            client: 0,
            indices: 2,
            resamples: 2,
            seeds: vec![51, 52],
            null_replacement: false,
        };
        let est = estimate_stability(&setup, 2, &cfg).unwrap();
        assert_eq!(est.per_index.len(), 2);
        for s in &est.per_index {
            assert_eq!(s.deltas.len(), 4, "seeds x resamples");
            assert!(s.deltas.iter().all(|d| d.is_finite() && *d >= 0.0));
        }
        assert!(est.epsilon_hat > 0.0, "coupled runs should differ a little");
        assert!(est.epsilon_hat.is_finite());

        // deterministic
        let again = estimate_stability(&setup, 2, &cfg).unwrap();
        assert_eq!(est, again);
    }

    #[test]
    fn heterogeneity_zero_radius_kills_adversarial_components() {
        let mut data_rng = stream(16, "data");
        let dataset = generate_synthetic(4, 4, 15, 3.0, "het", 16, &mut data_rng).unwrap();
        let mut part_rng = stream(17, "part");
        let partitions = partition_skew(&dataset, 4, 0.0, &mut part_rng).unwrap();
        let spec = ModelSpec::mlp(4, vec![5], 4);
        let params = init_params(&spec, &mut stream(18, "init")).unwrap();
        let cfg = AttackConfig::new(0.0, NormP::LInf);
        let report = heterogeneity_report(
            &cfg,
            &spec,
            &params,
            &dataset,
            &partitions,
            TvMethod::LabelMarginal,
            3,
            0,
        )
        .unwrap();
        for c in &report.per_client {
            assert_eq!(c.adv_vs_clean, 0.0);
            assert_eq!(c.adv_pool_vs_pool, 0.0);
            // fully skewed 4-class/4-client split: each client holds one
            // class, so the label-marginal distance to the pool is 3/4
            assert!((c.clean_vs_pool - 0.75).abs() < 1e-12);
            assert_eq!(c.d_i, c.clean_vs_pool);
        }
        assert!((report.d_max - 0.75).abs() < 1e-12);
    }

    #[test]
    fn heterogeneity_single_client_pool_distance_is_zero() {
        let mut data_rng = stream(19, "data");
        let dataset = generate_synthetic(3, 4, 10, 3.0, "het1", 19, &mut data_rng).unwrap();
        let mut part_rng = stream(20, "part");
        let partitions = partition_skew(&dataset, 1, 0.0, &mut part_rng).unwrap();
        let spec = ModelSpec::mlp(4, vec![5], 3);
        let params = init_params(&spec, &mut stream(21, "init")).unwrap();
        let cfg = AttackConfig::new(0.0, NormP::LInf);
        for method in [TvMethod::LabelMarginal, TvMethod::ProjectedHistogram] {
            let report = heterogeneity_report(
                &cfg, &spec, &params, &dataset, &partitions, method, 3, 0,
            )
            .unwrap();
            assert_eq!(report.per_client[0].clean_vs_pool, 0.0);
            assert_eq!(report.d_max, 0.0);
        }
    }

    #[test]
    fn heterogeneity_decreases_with_mixing() {
        // per_class = 16 keeps every 25% demand integral, so the a = 25
        // split can hit a perfectly uniform label mixture per client
        let mut data_rng = stream(22, "data");
        let dataset = generate_synthetic(4, 4, 16, 3.0, "hetmix", 22, &mut data_rng).unwrap();
        let spec = ModelSpec::mlp(4, vec![5], 4);
        let params = init_params(&spec, &mut stream(23, "init")).unwrap();
        let cfg = AttackConfig::new(0.0, NormP::LInf);
        let mut d_values = Vec::new();
        for a in [0.0, 25.0] {
            let mut part_rng = stream(24, "part");
            let partitions = partition_skew(&dataset, 4, a, &mut part_rng).unwrap();
            let report = heterogeneity_report(
                &cfg,
                &spec,
                &params,
                &dataset,
                &partitions,
                TvMethod::LabelMarginal,
                3,
                0,
            )
            .unwrap();
            d_values.push(report.d_max);
        }
        assert!(
            d_values[0] > d_values[1],
            "full skew {} should exceed mixed skew {}",
            d_values[0],
            d_values[1]
        );
        // a = 25 with 4 clients mixes every shard equally: uniform labels
        assert!(d_values[1] < 1e-12);
    }

    #[test]
    fn r_alpha_examples() {
        assert_eq!(r_alpha(0.0, 1.0, 4.0).unwrap(), 1.0);
        let r = r_alpha(0.5, 1.0, 5.0).unwrap();
        assert!((r - 1.4).abs() < 1e-15);
        assert!(r_alpha(1.0, 1.0, 4.0).is_err());
        assert!(r_alpha(0.5, 3.0, 4.0).is_err());
    }

    #[test]
    fn bound_scores_match_hand_computation() {
        let inp = BoundInputs {
            rho: 1.0,
            t_rounds: 100.0,
            m: 10.0,
            n_min: 50.0,
            q: 4.0,
            d_max: 0.5,
            delta: 1.0,
            ..BoundInputs::default()
        };
        let ssa = bound_score(Method::Ssa, ServerAlgo::Vfal, &inp).unwrap();
        let rsa = bound_score(Method::Rsa, ServerAlgo::Vfal, &inp).unwrap();
        // hand arithmetic: 100*ln(100) + 100*sqrt(ln 100)/500 + 100*ln(100)*2*0.5/500
        let ln100 = 100.0f64.ln();
        let expect_ssa = 100.0 * ln100 + 100.0 * ln100.sqrt() / 500.0 + 100.0 * ln100 / 500.0;
        assert!((ssa - expect_ssa).abs() < 1e-9);
        let expect_rsa = 100.0f64.powf(0.25) * ln100 / 2.0
            + 100.0f64.powf(0.75) / 500.0
            + 100.0 * 1.0 / 500.0;
        assert!((rsa - expect_rsa).abs() < 1e-9);
        // the smoothed trainer's long-horizon score is far smaller
        assert!(rsa < ssa);
        assert!((ssa - 461.86).abs() < 0.5);
        assert!((rsa - 7.54).abs() < 0.05);
    }

    #[test]
    fn opsa_score_matches_hand_computation() {
        let inp = BoundInputs {
            rho: 0.5,
            t_rounds: 16.0,
            m: 4.0,
            n_min: 25.0,
            s: 100.0,
            d_max: 0.2,
            delta: 2.0,
            ..BoundInputs::default()
        };
        let got = bound_score(Method::Opsa, ServerAlgo::Vfal, &inp).unwrap();
        // 4*sqrt(2)/100 + 16*(0.25*10 + 1)*0.2/100
        let expect = 4.0 * 2.0f64.sqrt() / 100.0 + 16.0 * 3.5 * 0.2 / 100.0;
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn sfal_at_zero_alpha_equals_vfal_bitwise() {
        let inp = BoundInputs {
            rho: 0.3,
            t_rounds: 50.0,
            m: 8.0,
            n_min: 20.0,
            d_max: 0.4,
            alpha: 0.0,
            m_hat: 2.0,
            ..BoundInputs::default()
        };
        for method in [Method::Ssa, Method::Rsa, Method::Opsa] {
            let v = bound_score(method, ServerAlgo::Vfal, &inp).unwrap();
            let s = bound_score(method, ServerAlgo::Sfal, &inp).unwrap();
            assert_eq!(v, s);
        }
    }

    #[test]
    fn sfal_slack_strictly_helps_under_heterogeneity() {
        let inp = BoundInputs {
            rho: 0.5,
            t_rounds: 64.0,
            m: 10.0,
            n_min: 30.0,
            d_max: 0.5,
            alpha: 0.6,
            m_hat: 3.0,
            ..BoundInputs::default()
        };
        for method in [Method::Ssa, Method::Rsa, Method::Opsa] {
            let v = bound_score(method, ServerAlgo::Vfal, &inp).unwrap();
            let s = bound_score(method, ServerAlgo::Sfal, &inp).unwrap();
            assert!(s < v, "{method}: sfal {s} should beat vfal {v}");
        }
    }

    #[test]
    fn bound_scores_are_monotone_smoke() {
        let mut rng = stream(25, "mono");
        for _ in 0..200 {
            let base = BoundInputs {
                rho: rng.gen_range_f64(),
                t_rounds: 1.0 + 200.0 * rng.gen_range_f64(),
                m: (2.0 + 18.0 * rng.gen_range_f64()).floor(),
                n_min: (1.0 + 99.0 * rng.gen_range_f64()).floor(),
                q: (1.0 + 15.0 * rng.gen_range_f64()).floor(),
                s: (1.0 + 255.0 * rng.gen_range_f64()).floor(),
                d_max: rng.gen_range_f64(),
                delta: 2.0 * rng.gen_range_f64(),
                alpha: 0.9 * rng.gen_range_f64(),
                m_hat: 1.0,
                ..BoundInputs::default()
            };
            for method in [Method::Ssa, Method::Rsa, Method::Opsa] {
                for algo in [ServerAlgo::Vfal, ServerAlgo::Sfal] {
                    let score = bound_score(method, algo, &base).unwrap();
                    assert!(score.is_finite() && score >= 0.0);

                    let up_t = BoundInputs {
                        t_rounds: base.t_rounds * 1.5,
                        ..base
                    };
                    assert!(bound_score(method, algo, &up_t).unwrap() >= score);

                    let up_rho = BoundInputs {
                        rho: base.rho + 0.5,
                        ..base
                    };
                    assert!(bound_score(method, algo, &up_rho).unwrap() >= score);

                    let up_m = BoundInputs {
                        m: base.m + 5.0,
                        ..base
                    };
                    assert!(bound_score(method, algo, &up_m).unwrap() <= score);

                    let up_q = BoundInputs {
                        q: base.q + 4.0,
                        ..base
                    };
                    assert!(bound_score(method, algo, &up_q).unwrap() <= score);
                }
            }
        }
    }

    #[test]
    fn bound_inputs_validation() {
        let mut bad = BoundInputs::default();
        bad.t_rounds = 0.5;
        assert!(bound_score(Method::Ssa, ServerAlgo::Vfal, &bad).is_err());
        let mut bad = BoundInputs::default();
        bad.alpha = 1.0;
        assert!(bound_score(Method::Ssa, ServerAlgo::Sfal, &bad).is_err());
        let mut bad = BoundInputs::default();
        bad.d_max = -0.1;
        assert!(bound_score(Method::Opsa, ServerAlgo::Vfal, &bad).is_err());
    }
}
