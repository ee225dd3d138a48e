//! Vector arithmetic, lp-ball projections, uniform ball sampling, keyed RNG
//! streams, and finite-difference utilities shared by every other module.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{FalError, Result};

/// Slack used when testing ball membership. Keeps lp projection exactly
/// idempotent under floating-point rounding.
pub const BALL_TOL: f64 = 1e-12;

/// Flat vector of finite f64 coordinates. Houses model parameters,
/// perturbations, and inputs alike.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vector(Vec<f64>);

/// Model parameters are exchanged as plain flat vectors.
pub type ParamVector = Vector;

impl Vector {
    /// Builds a vector, rejecting NaN/Inf coordinates.
    pub fn new(elements: Vec<f64>) -> Result<Self> {
        if let Some(pos) = elements.iter().position(|x| !x.is_finite()) {
            return Err(FalError::NonFinite(format!(
                "vector coordinate {pos} is {}",
                elements[pos]
            )));
        }
        Ok(Vector(elements))
    }

    /// Internal constructor for values produced by arithmetic that is known
    /// to preserve finiteness.
    pub(crate) fn from_raw(elements: Vec<f64>) -> Self {
        Vector(elements)
    }

    pub fn zeros(dim: usize) -> Self {
        Vector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm_l2(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn norm_linf(&self) -> f64 {
        self.0.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn norm_p(&self, p: NormP) -> f64 {
        match p {
            NormP::L2 => self.norm_l2(),
            NormP::LInf => self.norm_linf(),
        }
    }

    /// self + scale * other, allocating the result.
    pub fn axpy(&self, scale: f64, other: &Vector) -> Vector {
        debug_assert_eq!(self.dim(), other.dim());
        Vector(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| a + scale * b)
                .collect(),
        )
    }

    /// In-place self += scale * other.
    pub fn axpy_mut(&mut self, scale: f64, other: &Vector) {
        debug_assert_eq!(self.dim(), other.dim());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += scale * b;
        }
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        self.axpy(-1.0, other)
    }

    pub fn scale(&self, s: f64) -> Vector {
        Vector(self.0.iter().map(|x| x * s).collect())
    }

    pub fn scale_mut(&mut self, s: f64) {
        for x in &mut self.0 {
            *x *= s;
        }
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

/// The two lp geometries the algorithms exercise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormP {
    L2,
    #[serde(rename = "inf")]
    LInf,
}

impl std::fmt::Display for NormP {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NormP::L2 => write!(f, "2"),
            NormP::LInf => write!(f, "inf"),
        }
    }
}

/// Nearest point to `v` inside the lp ball of radius `rho` around `center`.
///
/// For p=inf this is the coordinate clamp; for p=2 the radial scaling.
/// Points already inside the ball (within [`BALL_TOL`] relative slack) are
/// returned unchanged, which makes the projection exactly idempotent.
pub fn project_lp(v: &Vector, center: &Vector, rho: f64, p: NormP) -> Result<Vector> {
    if v.dim() != center.dim() {
        return Err(FalError::DimensionMismatch {
            expected: center.dim(),
            got: v.dim(),
        });
    }
    if rho < 0.0 || !rho.is_finite() {
        return Err(FalError::invalid(format!("rho must be >= 0, got {rho}")));
    }
    match p {
        NormP::LInf => {
            let out: Vec<f64> = v
                .as_slice()
                .iter()
                .zip(center.as_slice())
                .map(|(&x, &c)| x.min(c + rho).max(c - rho))
                .collect();
            Ok(Vector(out))
        }
        NormP::L2 => {
            let diff = v.sub(center);
            let dist = diff.norm_l2();
            if dist <= rho * (1.0 + BALL_TOL) {
                return Ok(v.clone());
            }
            let s = rho / dist;
            Ok(center.axpy(s, &diff))
        }
    }
}

/// Uniform draw from the d-dimensional unit l2 ball: Gaussian direction
/// normalized, scaled by U^(1/d).
pub fn sample_unit_ball(dim: usize, rng: &mut RngStream) -> Result<Vector> {
    if dim == 0 {
        return Err(FalError::invalid("sample_unit_ball requires dim >= 1"));
    }
    loop {
        let g: Vec<f64> = (0..dim).map(|_| rng.sample_normal()).collect();
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let u: f64 = rng.gen_range_f64();
        let r = u.powf(1.0 / dim as f64);
        return Ok(Vector(g.into_iter().map(|x| x / norm * r).collect()));
    }
}

/// Central-difference gradient estimate, coordinate-wise
/// (f(x + h e_k) - f(x - h e_k)) / (2h).
pub fn finite_diff_grad<F>(mut f: F, at: &Vector, h: f64) -> Result<Vector>
where
    F: FnMut(&Vector) -> f64,
{
    if h <= 0.0 {
        return Err(FalError::invalid(format!("h must be > 0, got {h}")));
    }
    let mut grad = vec![0.0; at.dim()];
    let mut probe = at.clone();
    for k in 0..at.dim() {
        let orig = probe[k];
        probe[k] = orig + h;
        let fp = f(&probe);
        probe[k] = orig - h;
        let fm = f(&probe);
        probe[k] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(FalError::NonFinite(format!(
                "finite_diff_grad: f non-finite near coordinate {k}"
            )));
        }
        grad[k] = (fp - fm) / (2.0 * h);
    }
    Ok(Vector(grad))
}

/// Default step for finite-difference gradient checks.
pub const FD_DEFAULT_H: f64 = 1e-5;

/// Relative error metric used by gradient checks:
/// ||g_fd - g|| / (||g|| + 1e-8).
pub fn grad_rel_error(analytic: &Vector, fd: &Vector) -> f64 {
    fd.sub(analytic).norm_l2() / (analytic.norm_l2() + 1e-8)
}

/// Identifies one deterministic random stream. Streams with equal
/// (root_seed, key) produce bitwise-identical draw sequences; distinct keys
/// produce independent sequences.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamKey {
    pub round: u64,
    pub client: u64,
    pub purpose: &'static str,
    /// Extra dimension for per-sample / per-epoch substreams.
    pub index: u64,
}

impl StreamKey {
    pub fn new(round: u64, client: u64, purpose: &'static str) -> Self {
        StreamKey {
            round,
            client,
            purpose,
            index: 0,
        }
    }

    pub fn indexed(round: u64, client: u64, purpose: &'static str, index: u64) -> Self {
        StreamKey {
            round,
            client,
            purpose,
            index,
        }
    }
}

/// Sentinel client id for server-side streams (evaluation, init).
pub const SERVER: u64 = u64::MAX;

/// Seeded deterministic RNG stream. The ChaCha state is derived by hashing
/// (root_seed, key), so any worker can re-create the stream it owns without
/// coordination.
#[derive(Debug, Clone)]
pub struct RngStream {
    rng: ChaCha12Rng,
}

impl RngStream {
    pub fn new(root_seed: u64, key: &StreamKey) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(root_seed.to_le_bytes());
        hasher.update(key.round.to_le_bytes());
        hasher.update(key.client.to_le_bytes());
        hasher.update((key.purpose.len() as u64).to_le_bytes());
        hasher.update(key.purpose.as_bytes());
        hasher.update(key.index.to_le_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        RngStream {
            rng: ChaCha12Rng::from_seed(seed),
        }
    }

    pub fn sample_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform draw in [0, 1).
    pub fn gen_range_f64(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn gen_usize(&mut self, upper: usize) -> usize {
        self.rng.gen_range(0..upper)
    }

    /// Fisher-Yates shuffle driven by this stream.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.rng.gen_range(0..=i);
            items.swap(i, j);
        }
    }

    /// Draws `count` distinct values from 0..upper (partial Fisher-Yates).
    pub fn sample_distinct(&mut self, upper: usize, count: usize) -> Vec<usize> {
        let count = count.min(upper);
        let mut pool: Vec<usize> = (0..upper).collect();
        for i in 0..count {
            let j = self.rng.gen_range(i..upper);
            pool.swap(i, j);
        }
        pool.truncate(count);
        pool
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec2(a: f64, b: f64) -> Vector {
        Vector::new(vec![a, b]).unwrap()
    }

    #[test]
    fn project_linf_clamps_coordinates() {
        let out = project_lp(&vec2(0.5, -2.0), &vec2(0.0, 0.0), 1.0, NormP::LInf).unwrap();
        assert_eq!(out.as_slice(), &[0.5, -1.0]);
    }

    #[test]
    fn project_l2_scales_radially() {
        let out = project_lp(&vec2(3.0, 4.0), &vec2(0.0, 0.0), 1.0, NormP::L2).unwrap();
        assert!((out[0] - 0.6).abs() < 1e-15);
        assert!((out[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn project_interior_point_unchanged() {
        let v = vec2(0.1, 0.1);
        for p in [NormP::L2, NormP::LInf] {
            let out = project_lp(&v, &vec2(0.0, 0.0), 1.0, p).unwrap();
            assert_eq!(out, v);
        }
    }

    #[test]
    fn project_rejects_bad_inputs() {
        let v = vec2(1.0, 2.0);
        let c3 = Vector::new(vec![0.0; 3]).unwrap();
        assert!(project_lp(&v, &c3, 1.0, NormP::L2).is_err());
        assert!(project_lp(&v, &vec2(0.0, 0.0), -0.5, NormP::L2).is_err());
    }

    #[test]
    fn rng_streams_are_deterministic_and_keyed() {
        let key = StreamKey::indexed(3, 7, "attack", 11);
        let mut a = RngStream::new(42, &key);
        let mut b = RngStream::new(42, &key);
        let draws_a: Vec<u64> = (0..16).map(|_| a.next_u64()).collect();
        let draws_b: Vec<u64> = (0..16).map(|_| b.next_u64()).collect();
        assert_eq!(draws_a, draws_b);

        let mut c = RngStream::new(42, &StreamKey::indexed(3, 7, "attack", 12));
        let draws_c: Vec<u64> = (0..16).map(|_| c.next_u64()).collect();
        assert_ne!(draws_a, draws_c);
    }

    #[test]
    fn unit_ball_samples_are_members() {
        let mut rng = RngStream::new(1, &StreamKey::new(0, 0, "ball"));
        for _ in 0..200 {
            let u = sample_unit_ball(3, &mut rng).unwrap();
            assert!(u.norm_l2() <= 1.0 + 1e-12);
        }
        assert!(sample_unit_ball(0, &mut rng).is_err());
    }

    #[test]
    fn unit_ball_dim1_mean_near_zero() {
        // symmetry oracle: mean of 1e5 1-D draws within 3 standard errors of 0.
        // Var(U) for uniform on [-1,1] is 1/3, se = sqrt(1/3/n).
        let mut rng = RngStream::new(7, &StreamKey::new(0, 0, "ball-mean"));
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|_| sample_unit_ball(1, &mut rng).unwrap()[0])
            .sum::<f64>()
            / n as f64;
        let se = (1.0f64 / 3.0 / n as f64).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean} exceeds 3 se {se}");
    }

    #[test]
    fn unit_ball_dim2_radial_mass() {
        // area ratio oracle: P(||u|| <= 0.5) = 0.25 in 2-D.
        let mut rng = RngStream::new(9, &StreamKey::new(0, 0, "ball-mass"));
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| sample_unit_ball(2, &mut rng).unwrap().norm_l2() <= 0.5)
            .count();
        let frac = hits as f64 / n as f64;
        let se = (0.25f64 * 0.75 / n as f64).sqrt();
        assert!((frac - 0.25).abs() < 3.0 * se, "frac {frac}");
    }

    #[test]
    fn finite_diff_quadratic_exact() {
        let f = |v: &Vector| 0.5 * v.dot(v);
        let g = finite_diff_grad(f, &vec2(1.0, 2.0), 1e-5).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-6);
        assert!((g[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn finite_diff_constant_is_zero() {
        let g = finite_diff_grad(|_| 4.2, &vec2(3.0, -1.0), 1e-5).unwrap();
        assert!(g[0].abs() < 1e-9 && g[1].abs() < 1e-9);
    }

    #[test]
    fn finite_diff_bilinear() {
        let f = |v: &Vector| v[0] * v[1];
        let g = finite_diff_grad(f, &vec2(2.0, 3.0), 1e-5).unwrap();
        assert!((g[0] - 3.0).abs() < 1e-6);
        assert!((g[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn finite_diff_rejects_non_finite() {
        let f = |v: &Vector| 1.0 / (v[0] - 1.0);
        assert!(finite_diff_grad(f, &vec2(1.0, 0.0), 1e-5).is_err());
    }

    #[test]
    fn vector_rejects_nan() {
        assert!(Vector::new(vec![1.0, f64::NAN]).is_err());
        assert!(Vector::new(vec![1.0, f64::INFINITY]).is_err());
    }
}
