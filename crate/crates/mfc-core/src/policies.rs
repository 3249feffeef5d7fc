//! The two-level policy stack.
//!
//! The upper level is a network mapping mean-field features to a diagonal
//! Gaussian over a compact parameter space Ξ = [-1,1]^k; ONE ξ is sampled
//! per environment step and shared by every agent.  The lower level turns ξ
//! into a decentralized policy Λ(ξ): each observation anchor y_b carries a
//! small action distribution p_b built affinely from a block of ξ, and an
//! agent observing y acts from the kernel mixture
//!
//! ```text
//! π̌(u | y) = Σ_b κ(y_b, y) p_b(u) / Σ_b κ(y_b, y),
//! κ(y_b, y) = exp(-Σ_j (y_j - y_bj)² / (2 σ_j²)).
//! ```
//!
//! Two parametrizations are supported: `Discrete3` (probabilities over the
//! turn actions {-1, 0, 1}) and `ContinuousGaussian` (per-dimension action
//! mean and standard deviation, sampled then clamped into U = [-1,1]^d).
//! Blocks are per-anchor by default; a shared single block is retained as an
//! option.
//!
//! `min_bandwidth` implements the sufficient Lipschitz condition for kernel
//! mixtures: Λ(ξ) is L_Π-Lipschitz in y whenever
//! σ² · exp(-diam(Y)²/σ²) ≥ diam(Y)·diam(U)·max‖y‖ / L_Π, whose left side
//! is strictly increasing in σ², so the smallest satisfying σ² is found by
//! bisection.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::envs::{EnvConfig, EnvKind};
use crate::features::{axis_centers, angle_centers};
use crate::nn::{clamp_to_box, GaussianHead, Mlp};

/// Lower end of the affine probability/std maps: keeps every entry strictly
/// positive so log-probabilities and Lipschitz constants stay finite.
pub const XI_EPS: f64 = 1e-10 / 4.0;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("xi component {index} = {value} outside [-1, 1]")]
    XiOutOfDomain { index: usize, value: f64 },
    #[error("xi has length {got}, spec needs {want}")]
    XiLength { got: usize, want: usize },
}

// ─── Parametrization spec ──────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum XiKind {
    /// Ξ block [-1,1]³ → probability triple over turn actions {-1, 0, 1}.
    Discrete3,
    /// Ξ block [-1,1]^{2d} → action mean in U=[-1,1]^d and std in [ε, 0.5+ε].
    ContinuousGaussian { action_dim: usize },
}

/// Anchor layout plus parametrization choice for the lower level.
#[derive(Debug, Clone)]
pub struct XiSpec {
    pub kind: XiKind,
    /// One ξ block per anchor (default) or a single block shared by all.
    pub per_anchor: bool,
    /// Anchor points y_b in observation space, `n_anchors × obs_dim`.
    pub anchors: Vec<Vec<f64>>,
    /// Per-coordinate kernel bandwidths σ_j (standard deviations, not σ²).
    pub bandwidths: Vec<f64>,
}

impl XiSpec {
    pub fn new(kind: XiKind, per_anchor: bool, anchors: Vec<Vec<f64>>, bandwidths: Vec<f64>) -> Self {
        assert!(!anchors.is_empty(), "need at least one anchor");
        assert!(anchors.iter().all(|a| a.len() == bandwidths.len()), "anchor/bandwidth width mismatch");
        assert!(bandwidths.iter().all(|&s| s > 0.0), "bandwidths must be positive");
        XiSpec { kind, per_anchor, anchors, bandwidths }
    }

    /// Default parametrization for an environment: turn-action triples on a
    /// rescaled 5×5 (magnitude, bearing) grid for the heading models, and
    /// d-dimensional Gaussian moves on a rescaled position grid for
    /// Aggregation (full 5^d grid for d ≤ 2, five points per axis above
    /// that, which keeps the anchor count linear in d).
    pub fn for_env(cfg: &EnvConfig, per_anchor: bool) -> Self {
        match cfg.kind {
            EnvKind::Vicsek | EnvKind::Kuramoto => {
                let c = 0.1;
                let mags = axis_centers(5, c);
                // observation bearings live in (-π, π], so recenter the
                // [0, 2π) heading grid around zero before rescaling
                let angs: Vec<f64> =
                    angle_centers(5).into_iter().map(|a| (a - std::f64::consts::PI) * c).collect();
                let mut anchors = Vec::with_capacity(25);
                for &m in &mags {
                    for &a in &angs {
                        anchors.push(vec![m, a]);
                    }
                }
                let bandwidths = vec![0.06 * c, 0.12 * std::f64::consts::PI * c];
                let kind = if cfg.velocity_control {
                    XiKind::ContinuousGaussian { action_dim: 2 }
                } else {
                    XiKind::Discrete3
                };
                XiSpec::new(kind, per_anchor, anchors, bandwidths)
            }
            EnvKind::Aggregation => {
                let d = cfg.dim();
                let c = 0.75;
                let centers = axis_centers(5, c);
                let anchors: Vec<Vec<f64>> = if d <= 2 {
                    crate::features::grid_anchors(d, 5, c).chunks(d).map(|p| p.to_vec()).collect()
                } else {
                    let mut out = Vec::with_capacity(5 * d);
                    for axis in 0..d {
                        for &v in &centers {
                            let mut p = vec![0.0; d];
                            p[axis] = v;
                            out.push(p);
                        }
                    }
                    out
                };
                XiSpec::new(
                    XiKind::ContinuousGaussian { action_dim: d },
                    per_anchor,
                    anchors,
                    vec![0.12 * c; d],
                )
            }
        }
    }

    pub fn n_anchors(&self) -> usize {
        self.anchors.len()
    }

    /// ξ components consumed by one anchor block.
    pub fn block_dim(&self) -> usize {
        match self.kind {
            XiKind::Discrete3 => 3,
            XiKind::ContinuousGaussian { action_dim } => 2 * action_dim,
        }
    }

    /// Total dim(Ξ): one block per anchor, or a single shared block.
    pub fn xi_dim(&self) -> usize {
        if self.per_anchor {
            self.block_dim() * self.n_anchors()
        } else {
            self.block_dim()
        }
    }

    /// Width of one agent's action row produced by `act`.
    pub fn action_dim(&self) -> usize {
        match self.kind {
            XiKind::Discrete3 => 1,
            XiKind::ContinuousGaussian { action_dim } => action_dim,
        }
    }
}

// ─── Lower level: ξ → Λ(ξ) ─────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub enum LowerParams {
    /// One probability triple over {-1, 0, 1} per anchor.
    Discrete3(Vec<[f64; 3]>),
    /// Per-anchor action mean and standard deviation vectors.
    Gaussian { means: Vec<Vec<f64>>, stds: Vec<Vec<f64>> },
}

/// A concrete decentralized policy Λ(ξ): anchors plus their per-anchor
/// distributions.  Immutable once built; `act` is safe to call concurrently
/// with per-agent RNG streams.
#[derive(Debug, Clone)]
pub struct LowerPolicy {
    pub anchors: Vec<Vec<f64>>,
    pub bandwidths: Vec<f64>,
    pub params: LowerParams,
}

/// Affine [-1,1] → [ε, 0.5+ε].
fn affine_unit(v: f64) -> f64 {
    XI_EPS + (v + 1.0) / 4.0
}

/// Builds the lower-level policy from a sampled ξ.  Rejects ξ outside Ξ.
pub fn lower_from_xi(xi: &[f64], spec: &XiSpec) -> Result<LowerPolicy, PolicyError> {
    if xi.len() != spec.xi_dim() {
        return Err(PolicyError::XiLength { got: xi.len(), want: spec.xi_dim() });
    }
    for (index, &value) in xi.iter().enumerate() {
        if !(value >= -1.0 - 1e-9 && value <= 1.0 + 1e-9) {
            return Err(PolicyError::XiOutOfDomain { index, value });
        }
    }
    let m = spec.n_anchors();
    let block = spec.block_dim();
    let block_of = |b: usize| -> &[f64] {
        if spec.per_anchor {
            &xi[b * block..(b + 1) * block]
        } else {
            xi
        }
    };
    let params = match spec.kind {
        XiKind::Discrete3 => {
            let mut triples = Vec::with_capacity(m);
            for b in 0..m {
                let z = block_of(b);
                let v = [affine_unit(z[0]), affine_unit(z[1]), affine_unit(z[2])];
                let s = v[0] + v[1] + v[2];
                triples.push([v[0] / s, v[1] / s, v[2] / s]);
            }
            LowerParams::Discrete3(triples)
        }
        XiKind::ContinuousGaussian { action_dim } => {
            let mut means = Vec::with_capacity(m);
            let mut stds = Vec::with_capacity(m);
            for b in 0..m {
                let z = block_of(b);
                means.push(z[..action_dim].iter().map(|&v| v.clamp(-1.0, 1.0)).collect());
                stds.push(z[action_dim..].iter().map(|&v| affine_unit(v.clamp(-1.0, 1.0))).collect());
            }
            LowerParams::Gaussian { means, stds }
        }
    };
    Ok(LowerPolicy { anchors: spec.anchors.clone(), bandwidths: spec.bandwidths.clone(), params })
}

impl LowerPolicy {
    /// Normalized kernel weights w_b(y).  Exponents are shifted by their
    /// maximum before exponentiation so far-away observations cannot
    /// underflow the whole mixture to 0/0.
    pub fn mixture_weights(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.bandwidths.len(), "observation width mismatch");
        let mut exps = Vec::with_capacity(self.anchors.len());
        let mut max = f64::NEG_INFINITY;
        for anchor in &self.anchors {
            let mut e = 0.0;
            for j in 0..y.len() {
                let d = y[j] - anchor[j];
                e -= d * d / (2.0 * self.bandwidths[j] * self.bandwidths[j]);
            }
            max = max.max(e);
            exps.push(e);
        }
        let mut total = 0.0;
        for e in &mut exps {
            *e = (*e - max).exp();
            total += *e;
        }
        for e in &mut exps {
            *e /= total;
        }
        exps
    }

    /// Mixture distribution over {-1, 0, 1} at observation `y`
    /// (`Discrete3` policies only).
    pub fn discrete_probs(&self, y: &[f64]) -> Option<[f64; 3]> {
        let LowerParams::Discrete3(triples) = &self.params else { return None };
        let w = self.mixture_weights(y);
        let mut p = [0.0; 3];
        for (b, triple) in triples.iter().enumerate() {
            for u in 0..3 {
                p[u] += w[b] * triple[u];
            }
        }
        Some(p)
    }

    /// Samples one agent's action at observation `y`.  Returns the action
    /// row together with its L1 norm (the per-agent action-cost statistic).
    pub fn act(&self, y: &[f64], rng: &mut impl Rng) -> (Vec<f64>, f64) {
        match &self.params {
            LowerParams::Discrete3(_) => {
                let p = self.discrete_probs(y).unwrap();
                let r: f64 = rng.random();
                let u = if r < p[0] {
                    -1.0
                } else if r < p[0] + p[1] {
                    0.0
                } else {
                    1.0
                };
                (vec![u], u.abs())
            }
            LowerParams::Gaussian { means, stds } => {
                let w = self.mixture_weights(y);
                let d = means[0].len();
                let mut action = Vec::with_capacity(d);
                let mut cost = 0.0;
                for j in 0..d {
                    let mut mean = 0.0;
                    let mut std = 0.0;
                    for b in 0..w.len() {
                        mean += w[b] * means[b][j];
                        std += w[b] * stds[b][j];
                    }
                    let z: f64 = rng.sample(StandardNormal);
                    let a = (mean + std * z).clamp(-1.0, 1.0);
                    cost += a.abs();
                    action.push(a);
                }
                (action, cost)
            }
        }
    }
}

// ─── Upper level: features → Gaussian over ξ ───────────────────────────────

/// One upper-level decision: the pre-clamp Gaussian sample (whose density
/// the log-prob refers to), the clamped ξ ∈ Ξ fed to the lower level, and
/// the log-probability under the current head.
#[derive(Debug, Clone)]
pub struct UpperAction {
    pub xi_raw: Vec<f64>,
    pub xi: Vec<f64>,
    pub logprob: f64,
}

/// Samples the central action ξ for one environment step.
pub fn upper_act(policy_net: &Mlp, features: &[f64], rng: &mut impl Rng) -> UpperAction {
    let raw = policy_net.forward_one(features);
    let head = GaussianHead::from_raw(&raw);
    let xi_raw = head.sample(rng);
    let logprob = head.logprob(&xi_raw);
    let xi = clamp_to_box(&xi_raw);
    UpperAction { xi_raw, xi, logprob }
}

/// Deterministic (greedy) upper action: the Gaussian mean clamped into Ξ.
pub fn upper_greedy(policy_net: &Mlp, features: &[f64]) -> Vec<f64> {
    let raw = policy_net.forward_one(features);
    let head = GaussianHead::from_raw(&raw);
    clamp_to_box(&head.mean)
}

// ─── Lipschitz bandwidth condition ─────────────────────────────────────────

/// Left side of the sufficient condition, σ² · exp(-diam(Y)²/σ²); strictly
/// increasing in σ².
fn lipschitz_lhs(sigma_sq: f64, diam_y: f64) -> f64 {
    sigma_sq * (-diam_y * diam_y / sigma_sq).exp()
}

/// Does bandwidth σ² certify that every Λ(ξ) is L_Π-Lipschitz in y?
pub fn check_bandwidth(sigma_sq: f64, diam_y: f64, diam_u: f64, max_y_norm: f64, l_pi: f64) -> bool {
    assert!(sigma_sq > 0.0 && diam_y > 0.0 && diam_u > 0.0 && max_y_norm > 0.0 && l_pi > 0.0);
    lipschitz_lhs(sigma_sq, diam_y) >= diam_y * diam_u * max_y_norm / l_pi
}

/// Smallest σ² satisfying the condition, by bisection on the monotone left
/// side.  The returned value passes `check_bandwidth` while 0.99× of it
/// fails (the bracket is tightened far below 1%).
pub fn min_bandwidth(diam_y: f64, diam_u: f64, max_y_norm: f64, l_pi: f64) -> f64 {
    let rhs = diam_y * diam_u * max_y_norm / l_pi;
    assert!(rhs > 0.0 && rhs.is_finite());
    let mut hi = 1.0;
    while lipschitz_lhs(hi, diam_y) < rhs {
        hi *= 2.0;
    }
    let mut lo = hi / 2.0;
    while lipschitz_lhs(lo, diam_y) >= rhs {
        hi = lo;
        lo /= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if lipschitz_lhs(mid, diam_y) >= rhs {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// Exact W₁ between two distributions on the ordered support {-1, 0, 1}
/// with unit spacing: the sum of absolute CDF differences at the two cuts.
pub fn w1_discrete3(p: &[f64; 3], q: &[f64; 3]) -> f64 {
    (p[0] - q[0]).abs() + ((p[0] + p[1]) - (q[0] + q[1])).abs()
}

// ─── Tests ─────────────────────────────────────────────────────────────────
