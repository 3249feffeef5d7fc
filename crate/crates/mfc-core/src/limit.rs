//! Finite-state mean-field limit machinery.
//!
//! A [`FiniteSystem`] is a small (≤ 10 states) population model whose
//! transition and observation kernels may depend affinely on the mean field
//! μ.  The limit system evolves deterministically,
//!
//! ```text
//! μ′(x′) = Σ_x Σ_y Σ_u  P(x′ | x, u, μ) · π̌(u | y) · Pʸ(y | x, μ) · μ(x),
//! ```
//!
//! while the N-agent system simulates every agent exactly and couples them
//! only through the empirical mean field.  [`chaos_sweep`] measures how fast
//! the empirical trajectories collapse onto the deterministic one as N
//! grows; the expected decay of the mean deviation is O(1/√N), i.e. a
//! log-log slope near −1/2.

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::rng::{derive_rng, stream};

#[derive(Debug, Error)]
pub enum LimitError {
    #[error("invalid finite system: {0}")]
    Invalid(String),
}

/// Probability vector over the state set.
pub type MeanField = Vec<f64>;

/// Stationary decentralized policy as a table: row y is a probability
/// vector over actions.
pub type ObsPolicy = Vec<Vec<f64>>;

// ─── Finite systems ────────────────────────────────────────────────────────

/// A finite MFC-type population model with kernels affine in the mean field:
///
/// ```text
/// P(x′|x,u,μ)  = (1−α)·Q[x][u][x′] + α·Σ_k μ_k·R[k][x][u][x′]
/// Pʸ(y|x,μ)    = (1−β)·O[x][y]     + β·Σ_k μ_k·S[k][x][y]
/// ```
///
/// Every `Q`/`R`/`O`/`S` row is itself a probability vector, so the mixture
/// is stochastic for every μ in the simplex, and μ ↦ P is Lipschitz in L1
/// with constant at most α (resp. β for the observation kernel).
#[derive(Debug, Clone)]
pub struct FiniteSystem {
    pub n_states: usize,
    pub n_obs: usize,
    pub n_actions: usize,
    /// Q, flat `[x][u][x′]`.
    pub p_base: Vec<f64>,
    /// R, flat `[k][x][u][x′]`.
    pub p_mu: Vec<f64>,
    /// Mean-field mixing weight α of the transition kernel.
    pub alpha: f64,
    /// O, flat `[x][y]`.
    pub o_base: Vec<f64>,
    /// S, flat `[k][x][y]`.
    pub o_mu: Vec<f64>,
    /// Mean-field mixing weight β of the observation kernel.
    pub beta: f64,
    /// Per-state reward; the population reward is r·μ.
    pub rewards: Vec<f64>,
    pub mu0: Vec<f64>,
    /// Ground metric between states, flat `[x][x′]`, used by W₁.
    pub cost: Vec<f64>,
}

impl FiniteSystem {
    /// The bundled 3-state / 2-observation / 2-action test system.
    ///
    /// Exact tensors (α = 1/2, β = 0):
    ///
    /// ```text
    /// Q[0][0] = (0.80, 0.10, 0.10)   Q[0][1] = (0.05, 0.90, 0.05)
    /// Q[1][0] = (0.10, 0.80, 0.10)   Q[1][1] = (0.05, 0.05, 0.90)
    /// Q[2][0] = (0.10, 0.10, 0.80)   Q[2][1] = (0.90, 0.05, 0.05)
    /// R[k][x][u] = 0.70 on state k, 0.15 elsewhere   (all x, u)
    /// O[0] = (0.9, 0.1)   O[1] = (0.5, 0.5)   O[2] = (0.1, 0.9)
    /// r = (1, 0, 0.5)     μ₀ = (0.5, 0.3, 0.2)     cost(i,j) = |i−j|
    /// ```
    ///
    /// Action 0 mostly stays put, action 1 advances the 3-cycle, and the
    /// μ-part R drags every agent toward crowded states, so the dynamics
    /// genuinely depend on the mean field.  With α = 1/2 the transition is
    /// (1/2)-Lipschitz in μ.
    pub fn bundled_toy() -> Self {
        let q = [
            [[0.80, 0.10, 0.10], [0.05, 0.90, 0.05]],
            [[0.10, 0.80, 0.10], [0.05, 0.05, 0.90]],
            [[0.10, 0.10, 0.80], [0.90, 0.05, 0.05]],
        ];
        let mut p_base = Vec::with_capacity(18);
        for x in 0..3 {
            for u in 0..2 {
                p_base.extend_from_slice(&q[x][u]);
            }
        }
        let mut p_mu = Vec::with_capacity(54);
        for k in 0..3 {
            for _xu in 0..6 {
                for xp in 0..3 {
                    p_mu.push(if xp == k { 0.70 } else { 0.15 });
                }
            }
        }
        let o_base = vec![0.9, 0.1, 0.5, 0.5, 0.1, 0.9];
        FiniteSystem {
            n_states: 3,
            n_obs: 2,
            n_actions: 2,
            p_base,
            p_mu,
            alpha: 0.5,
            o_base: o_base.clone(),
            o_mu: o_base.repeat(3),
            beta: 0.0,
            rewards: vec![1.0, 0.0, 0.5],
            mu0: vec![0.5, 0.3, 0.2],
            cost: vec![0.0, 1.0, 2.0, 1.0, 0.0, 1.0, 2.0, 1.0, 0.0],
        }
    }

    /// Two states that swap all mass every step, any action.
    pub fn two_state_flip() -> Self {
        FiniteSystem {
            n_states: 2,
            n_obs: 1,
            n_actions: 1,
            p_base: vec![0.0, 1.0, 1.0, 0.0],
            p_mu: vec![0.5; 8],
            alpha: 0.0,
            o_base: vec![1.0, 1.0],
            o_mu: vec![1.0; 4],
            beta: 0.0,
            rewards: vec![0.0, 0.0],
            mu0: vec![0.5, 0.5],
            cost: vec![0.0, 1.0, 1.0, 0.0],
        }
    }

    /// A plain Markov chain dressed up with 3 actions and 2 observations
    /// that all lead to the same row of `p`, so any policy marginalizes out.
    pub fn markov_chain(p: &[Vec<f64>], mu0: Vec<f64>) -> Self {
        let n = mu0.len();
        assert_eq!(p.len(), n);
        let mut p_base = Vec::with_capacity(n * 3 * n);
        for row in p {
            assert_eq!(row.len(), n);
            for _u in 0..3 {
                p_base.extend_from_slice(row);
            }
        }
        let uniform_row: Vec<f64> = vec![1.0 / n as f64; n];
        let mut p_mu = Vec::with_capacity(n * n * 3 * n);
        for _k in 0..n {
            for _xu in 0..n * 3 {
                p_mu.extend_from_slice(&uniform_row);
            }
        }
        let mut o_base = Vec::with_capacity(n * 2);
        for _x in 0..n {
            o_base.extend_from_slice(&[0.6, 0.4]);
        }
        let mut cost = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                cost[i * n + j] = (i as f64 - j as f64).abs();
            }
        }
        FiniteSystem {
            n_states: n,
            n_obs: 2,
            n_actions: 3,
            p_base,
            p_mu,
            alpha: 0.0,
            o_base: o_base.clone(),
            o_mu: o_base.repeat(n),
            beta: 0.0,
            rewards: vec![0.0; n],
            mu0,
            cost,
        }
    }

    /// Fully deterministic n-cycle: every kernel is a point mass, μ₀ is a
    /// point mass at state 0, and every action advances the cycle.
    pub fn deterministic_cycle(n: usize) -> Self {
        let mut p_base = Vec::with_capacity(n * 2 * n);
        for x in 0..n {
            for _u in 0..2 {
                for xp in 0..n {
                    p_base.push(if xp == (x + 1) % n { 1.0 } else { 0.0 });
                }
            }
        }
        let uniform_row: Vec<f64> = vec![1.0 / n as f64; n];
        let mut p_mu = Vec::with_capacity(n * n * 2 * n);
        for _k in 0..n {
            for _xu in 0..n * 2 {
                p_mu.extend_from_slice(&uniform_row);
            }
        }
        let mut mu0 = vec![0.0; n];
        mu0[0] = 1.0;
        let mut cost = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                cost[i * n + j] = (i as f64 - j as f64).abs();
            }
        }
        FiniteSystem {
            n_states: n,
            n_obs: 1,
            n_actions: 2,
            p_base,
            p_mu,
            alpha: 0.0,
            o_base: vec![1.0; n],
            o_mu: vec![1.0; n * n],
            beta: 0.0,
            rewards: vec![0.0; n],
            mu0,
            cost,
        }
    }

    /// Random valid system: Dirichlet(1) rows everywhere, mixing weights in
    /// [0, 0.9], and a ground metric realized as Euclidean distances between
    /// random planar points (so the triangle inequality holds by
    /// construction).
    pub fn random(n_states: usize, n_obs: usize, n_actions: usize, rng: &mut impl Rng) -> Self {
        assert!((1..=10).contains(&n_states));
        let simplex = |k: usize, rng: &mut dyn rand::RngCore| -> Vec<f64> {
            let mut v: Vec<f64> = (0..k).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
            let s: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= s);
            v
        };
        let mut p_base = Vec::new();
        for _ in 0..n_states * n_actions {
            p_base.extend(simplex(n_states, rng));
        }
        let mut p_mu = Vec::new();
        for _ in 0..n_states * n_states * n_actions {
            p_mu.extend(simplex(n_states, rng));
        }
        let mut o_base = Vec::new();
        for _ in 0..n_states {
            o_base.extend(simplex(n_obs, rng));
        }
        let mut o_mu = Vec::new();
        for _ in 0..n_states * n_states {
            o_mu.extend(simplex(n_obs, rng));
        }
        let points: Vec<(f64, f64)> =
            (0..n_states).map(|_| (rng.random::<f64>(), rng.random::<f64>())).collect();
        let mut cost = vec![0.0; n_states * n_states];
        for i in 0..n_states {
            for j in 0..n_states {
                cost[i * n_states + j] =
                    f64::hypot(points[i].0 - points[j].0, points[i].1 - points[j].1);
            }
        }
        FiniteSystem {
            n_states,
            n_obs,
            n_actions,
            p_base,
            p_mu,
            alpha: 0.9 * rng.random::<f64>(),
            o_base,
            o_mu,
            beta: 0.9 * rng.random::<f64>(),
            rewards: (0..n_states).map(|_| rng.random_range(-1.0..1.0)).collect(),
            mu0: simplex(n_states, rng),
            cost,
        }
    }

    pub fn validate(&self) -> Result<(), LimitError> {
        let bad = |msg: String| Err(LimitError::Invalid(msg));
        let (nx, ny, nu) = (self.n_states, self.n_obs, self.n_actions);
        if nx == 0 || nx > 10 || ny == 0 || nu == 0 {
            return bad(format!("state/obs/action counts {nx}/{ny}/{nu} out of range"));
        }
        for (name, tensor, rows, width) in [
            ("Q", &self.p_base, nx * nu, nx),
            ("R", &self.p_mu, nx * nx * nu, nx),
            ("O", &self.o_base, nx, ny),
            ("S", &self.o_mu, nx * nx, ny),
        ] {
            if tensor.len() != rows * width {
                return bad(format!("{name} has {} entries, expected {}", tensor.len(), rows * width));
            }
            for (r, row) in tensor.chunks_exact(width).enumerate() {
                if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                    return bad(format!("{name} row {r} leaves [0,1]"));
                }
                if (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return bad(format!("{name} row {r} is not a probability vector"));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.beta) {
            return bad("mixing weights must lie in [0,1]".into());
        }
        if self.mu0.len() != nx
            || self.mu0.iter().any(|&v| v < 0.0)
            || (self.mu0.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return bad("μ₀ is not a probability vector".into());
        }
        if self.rewards.len() != nx {
            return bad("reward vector length differs from the state count".into());
        }
        if self.cost.len() != nx * nx {
            return bad("cost matrix must be n×n".into());
        }
        for i in 0..nx {
            if self.cost[i * nx + i] != 0.0 {
                return bad(format!("cost({i},{i}) must be 0"));
            }
            for j in 0..nx {
                let c = self.cost[i * nx + j];
                if c < 0.0 || (c - self.cost[j * nx + i]).abs() > 1e-12 {
                    return bad("cost must be symmetric and non-negative".into());
                }
                for k in 0..nx {
                    if c > self.cost[i * nx + k] + self.cost[k * nx + j] + 1e-12 {
                        return bad(format!("cost violates the triangle inequality at ({i},{k},{j})"));
                    }
                }
            }
        }
        Ok(())
    }

    /// P(· | x, u, μ).
    pub fn transition(&self, x: usize, u: usize, mu: &[f64]) -> Vec<f64> {
        let nx = self.n_states;
        let nu = self.n_actions;
        let base = (x * nu + u) * nx;
        let mut out = vec![0.0; nx];
        for xp in 0..nx {
            let mut mix = 0.0;
            for k in 0..nx {
                mix += mu[k] * self.p_mu[((k * nx + x) * nu + u) * nx + xp];
            }
            out[xp] = (1.0 - self.alpha) * self.p_base[base + xp] + self.alpha * mix;
        }
        out
    }

    /// Pʸ(· | x, μ).
    pub fn obs_probs(&self, x: usize, mu: &[f64]) -> Vec<f64> {
        let ny = self.n_obs;
        let mut out = vec![0.0; ny];
        for y in 0..ny {
            let mut mix = 0.0;
            for k in 0..self.n_states {
                mix += mu[k] * self.o_mu[(k * self.n_states + x) * ny + y];
            }
            out[y] = (1.0 - self.beta) * self.o_base[x * ny + y] + self.beta * mix;
        }
        out
    }

    /// Population reward r·μ.
    pub fn mean_reward(&self, mu: &[f64]) -> f64 {
        self.rewards.iter().zip(mu).map(|(r, m)| r * m).sum()
    }
}

/// Checks that `pi` is a valid Y → Δ(U) table for the system.
pub fn validate_policy(sys: &FiniteSystem, pi: &ObsPolicy) -> Result<(), LimitError> {
    if pi.len() != sys.n_obs {
        return Err(LimitError::Invalid(format!(
            "policy has {} rows, system has {} observations",
            pi.len(),
            sys.n_obs
        )));
    }
    for (y, row) in pi.iter().enumerate() {
        if row.len() != sys.n_actions
            || row.iter().any(|&v| v < 0.0)
            || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(LimitError::Invalid(format!("policy row {y} is not a distribution")));
        }
    }
    Ok(())
}

// ─── Limit dynamics ────────────────────────────────────────────────────────

/// One exact step of the deterministic limit system.
///
/// Factorized as: per source state x, mix the observation kernel through the
/// policy into an action distribution, then push μ(x) through the
/// μ-dependent transition.  Entries in `[-1e-15, 0)` from rounding are
/// clipped to zero; the sum stays within 1e-12 of one.
pub fn limit_step(sys: &FiniteSystem, mu: &[f64], pi: &ObsPolicy) -> MeanField {
    let nx = sys.n_states;
    let nu = sys.n_actions;
    let mut out = vec![0.0; nx];
    for x in 0..nx {
        if mu[x] == 0.0 {
            continue;
        }
        let obs = sys.obs_probs(x, mu);
        let mut act = vec![0.0; nu];
        for (y, &py) in obs.iter().enumerate() {
            for u in 0..nu {
                act[u] += py * pi[y][u];
            }
        }
        for (u, &pu) in act.iter().enumerate() {
            if pu == 0.0 {
                continue;
            }
            let trans = sys.transition(x, u, mu);
            let w = mu[x] * pu;
            for xp in 0..nx {
                out[xp] += w * trans[xp];
            }
        }
    }
    for v in &mut out {
        debug_assert!(*v >= -1e-15, "limit_step produced {v}");
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Closed-form trajectory μ₀, μ₁, …, μ_T under a per-step policy sequence.
pub fn limit_trajectory(sys: &FiniteSystem, pis: &[ObsPolicy]) -> Vec<MeanField> {
    let mut out = Vec::with_capacity(pis.len() + 1);
    out.push(sys.mu0.clone());
    for pi in pis {
        let next = limit_step(sys, out.last().unwrap(), pi);
        out.push(next);
    }
    out
}

// ─── Finite-agent simulation ───────────────────────────────────────────────

fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let v: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if v < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Empirical distribution of `states` over `n_states` states.  Integer
/// counts divided once, so a unanimous population yields exactly 1.0.
pub fn empirical_mf(states: &[usize], n_states: usize) -> MeanField {
    let mut counts = vec![0u64; n_states];
    for &x in states {
        counts[x] += 1;
    }
    counts.iter().map(|&c| c as f64 / states.len() as f64).collect()
}

/// Advances every agent one step: each observes y ~ Pʸ(·|x, μ^N), draws
/// u ~ π̌(·|y), and transitions via P(·|x, u, μ^N), all against the current
/// empirical mean field.  Returns that pre-step empirical mean field.
pub fn empirical_step(
    sys: &FiniteSystem,
    states: &mut [usize],
    pi: &ObsPolicy,
    rng: &mut impl Rng,
) -> MeanField {
    let mu = empirical_mf(states, sys.n_states);
    for x in states.iter_mut() {
        let y = sample_categorical(&sys.obs_probs(*x, &mu), rng);
        let u = sample_categorical(&pi[y], rng);
        *x = sample_categorical(&sys.transition(*x, u, &mu), rng);
    }
    mu
}

/// Simulates N agents for `pis.len()` steps from iid μ₀ draws and returns
/// the empirical mean fields μ^N_0, …, μ^N_T (one more than policy steps).
pub fn empirical_rollout(
    sys: &FiniteSystem,
    n_agents: usize,
    pis: &[ObsPolicy],
    rng: &mut impl Rng,
) -> Vec<MeanField> {
    assert!(n_agents >= 1);
    let mut states: Vec<usize> =
        (0..n_agents).map(|_| sample_categorical(&sys.mu0, rng)).collect();
    let mut out = Vec::with_capacity(pis.len() + 1);
    for pi in pis {
        out.push(empirical_step(sys, &mut states, pi, rng));
    }
    out.push(empirical_mf(&states, sys.n_states));
    out
}

// ─── Distances ─────────────────────────────────────────────────────────────

/// ‖a − b‖₁.
pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Exact 1-Wasserstein distance between distributions on the same ≤10-state
/// support under the ground metric `cost` (flat n×n).
///
/// Reduces to the net measures (a metric ground cost never moves shared
/// mass) and solves the resulting uncapacitated transportation problem by
/// successive shortest augmenting paths: Bellman–Ford on the residual
/// bipartite graph, augmenting by the bottleneck until all mass is routed.
/// Each augmentation zeroes a supply, a demand, or a flow cell, so the loop
/// terminates; with ≤10 states it takes a handful of iterations.
pub fn w1_finite(mu: &[f64], nu: &[f64], cost: &[f64]) -> f64 {
    let n = mu.len();
    assert_eq!(nu.len(), n);
    assert_eq!(cost.len(), n * n);
    let mut supply = Vec::new();
    let mut demand = Vec::new();
    for i in 0..n {
        let d = mu[i] - nu[i];
        if d > 0.0 {
            supply.push((i, d));
        } else if d < 0.0 {
            demand.push((i, -d));
        }
    }
    if supply.is_empty() || demand.is_empty() {
        return 0.0;
    }
    let (p, q) = (supply.len(), demand.len());
    let c = |i: usize, j: usize| cost[supply[i].0 * n + demand[j].0];
    let total: f64 = supply.iter().map(|s| s.1).sum();
    let mut rem_s: Vec<f64> = supply.iter().map(|s| s.1).collect();
    let mut rem_d: Vec<f64> = demand.iter().map(|d| d.1).collect();
    let mut flow = vec![0.0; p * q];
    let tol = 1e-15 * total.max(1.0);
    let mut remaining = total;
    let mut guard = 0;
    while remaining > tol {
        guard += 1;
        assert!(guard <= 10_000, "transport solver failed to converge");
        // Multi-source Bellman–Ford over supplies 0..p and demands p..p+q.
        // Relaxations must beat the incumbent by a margin well above float
        // drift: residual cycles have true cost ≥ 0, but rounding can make
        // them look ~1e-15 negative, and chasing one would braid the parent
        // pointers into a loop.
        const EPS: f64 = 1e-12;
        let m = p + q;
        let mut dist = vec![f64::INFINITY; m];
        let mut parent = vec![usize::MAX; m];
        for (i, &r) in rem_s.iter().enumerate() {
            if r > 0.0 {
                dist[i] = 0.0;
            }
        }
        for _ in 0..m {
            let mut changed = false;
            for i in 0..p {
                for j in 0..q {
                    if dist[i].is_finite() && dist[i] + c(i, j) < dist[p + j] - EPS {
                        dist[p + j] = dist[i] + c(i, j);
                        parent[p + j] = i;
                        changed = true;
                    }
                    if flow[i * q + j] > 0.0
                        && dist[p + j].is_finite()
                        && dist[p + j] - c(i, j) < dist[i] - EPS
                    {
                        dist[i] = dist[p + j] - c(i, j);
                        parent[i] = p + j;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let j0 = (0..q)
            .filter(|&j| rem_d[j] > 0.0 && dist[p + j].is_finite())
            .min_by(|&a, &b| dist[p + a].total_cmp(&dist[p + b]))
            .expect("forward edges keep every demand reachable");
        // walk the parent chain back to a source supply
        let mut edges: Vec<(usize, usize, bool)> = Vec::new();
        let mut node = p + j0;
        while parent[node] != usize::MAX {
            assert!(edges.len() <= m, "augmenting path degenerated into a cycle");
            let prev = parent[node];
            if node >= p {
                edges.push((prev, node - p, true));
            } else {
                edges.push((node, prev - p, false));
            }
            node = prev;
        }
        let start = node;
        debug_assert!(start < p && rem_s[start] > 0.0);
        let mut delta = rem_s[start].min(rem_d[j0]);
        for &(i, j, fwd) in &edges {
            if !fwd {
                delta = delta.min(flow[i * q + j]);
            }
        }
        for &(i, j, fwd) in &edges {
            if fwd {
                flow[i * q + j] += delta;
            } else {
                flow[i * q + j] -= delta;
            }
        }
        rem_s[start] -= delta;
        rem_d[j0] -= delta;
        remaining -= delta;
    }
    let mut value = 0.0;
    for i in 0..p {
        for j in 0..q {
            value += flow[i * q + j] * c(i, j);
        }
    }
    value
}

// ─── Chaos sweep ───────────────────────────────────────────────────────────

/// One aggregated row of the N-sweep.
#[derive(Debug, Clone)]
pub struct ChaosRow {
    pub n_agents: usize,
    pub t: usize,
    pub replications: usize,
    pub mean_l1: f64,
    pub mean_w1: f64,
    /// Standard error of `mean_l1` across replications.
    pub stderr: f64,
}

/// Runs `replications` empirical rollouts per agent count, compares each to
/// the deterministic limit trajectory, and aggregates per (N, t).
///
/// Replications run on independent derived streams
/// `derive_rng(seed, [CHAOS, N, rep])`, so the table is reproducible and
/// independent of thread scheduling.
pub fn chaos_sweep(
    sys: &FiniteSystem,
    pis: &[ObsPolicy],
    ns: &[usize],
    replications: usize,
    seed: u64,
) -> Vec<ChaosRow> {
    assert!(ns.windows(2).all(|w| w[0] < w[1]), "agent counts must be ascending");
    assert!(replications >= 1);
    let limit = limit_trajectory(sys, pis);
    let horizon = pis.len();
    let mut rows = Vec::with_capacity(ns.len() * (horizon + 1));
    for &n in ns {
        let devs: Vec<(Vec<f64>, Vec<f64>)> = (0..replications)
            .into_par_iter()
            .map(|rep| {
                let mut rng = derive_rng(seed, &[stream::CHAOS, n as u64, rep as u64]);
                let emp = empirical_rollout(sys, n, pis, &mut rng);
                let l1: Vec<f64> =
                    emp.iter().zip(&limit).map(|(e, m)| l1_distance(e, m)).collect();
                let w1: Vec<f64> =
                    emp.iter().zip(&limit).map(|(e, m)| w1_finite(e, m, &sys.cost)).collect();
                (l1, w1)
            })
            .collect();
        for t in 0..=horizon {
            let l1s: Vec<f64> = devs.iter().map(|d| d.0[t]).collect();
            let w1s: Vec<f64> = devs.iter().map(|d| d.1[t]).collect();
            let mean_l1 = l1s.iter().sum::<f64>() / replications as f64;
            let mean_w1 = w1s.iter().sum::<f64>() / replications as f64;
            let var =
                l1s.iter().map(|v| (v - mean_l1) * (v - mean_l1)).sum::<f64>() / replications as f64;
            rows.push(ChaosRow {
                n_agents: n,
                t,
                replications,
                mean_l1,
                mean_w1,
                stderr: (var / replications as f64).sqrt(),
            });
        }
    }
    rows
}

/// Least-squares slope of ln(mean L1 deviation) against ln N, using the
/// per-N average over all post-initial steps (t ≥ 1; falls back to t = 0
/// for horizon-0 sweeps).  Propagation of chaos at rate O(1/√N) puts this
/// near −1/2.
pub fn chaos_slope(rows: &[ChaosRow]) -> f64 {
    let has_dynamics = rows.iter().any(|r| r.t >= 1);
    let mut per_n: Vec<(usize, f64, usize)> = Vec::new();
    for r in rows {
        if has_dynamics && r.t == 0 {
            continue;
        }
        match per_n.iter_mut().find(|(n, _, _)| *n == r.n_agents) {
            Some(e) => {
                e.1 += r.mean_l1;
                e.2 += 1;
            }
            None => per_n.push((r.n_agents, r.mean_l1, 1)),
        }
    }
    assert!(per_n.len() >= 2, "slope needs at least two agent counts");
    let pts: Vec<(f64, f64)> =
        per_n.iter().map(|&(n, s, k)| ((n as f64).ln(), (s / k as f64).ln())).collect();
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
    let cov: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let var: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    cov / var
}

/// CSV for the sweep: `N,t,replication_count,mean_l1,mean_w1,stderr`.
pub fn chaos_rows_to_csv(rows: &[ChaosRow]) -> String {
    let mut out = String::from("N,t,replication_count,mean_l1,mean_w1,stderr\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.n_agents, r.t, r.replications, r.mean_l1, r.mean_w1, r.stderr
        ));
    }
    out
}

/// Reference open-loop policy sequence for the bundled toy system: shifts
/// probability toward the cycle action over time, more strongly after
/// observation 1.
pub fn toy_policy_sequence(horizon: usize) -> Vec<ObsPolicy> {
    (0..horizon)
        .map(|t| {
            let frac = (t + 1) as f64 / horizon.max(1) as f64;
            (0..2)
                .map(|y| {
                    let p1 = 0.2 + 0.6 * frac * if y == 0 { 0.5 } else { 1.0 };
                    vec![1.0 - p1, p1]
                })
                .collect()
        })
        .collect()
}

// ─── Tests ─────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent brute-force oracle: plain quadruple loop over all
    /// (x, y, u, x′) tuples, kernels recomputed from the raw tensors.
    fn brute_force_step(sys: &FiniteSystem, mu: &[f64], pi: &ObsPolicy) -> Vec<f64> {
        let (nx, ny, nu) = (sys.n_states, sys.n_obs, sys.n_actions);
        let mut out = vec![0.0; nx];
        for x in 0..nx {
            for y in 0..ny {
                for u in 0..nu {
                    for xp in 0..nx {
                        let mut trans = (1.0 - sys.alpha) * sys.p_base[(x * nu + u) * nx + xp];
                        for k in 0..nx {
                            trans += sys.alpha * mu[k] * sys.p_mu[((k * nx + x) * nu + u) * nx + xp];
                        }
                        let mut obs = (1.0 - sys.beta) * sys.o_base[x * ny + y];
                        for k in 0..nx {
                            obs += sys.beta * mu[k] * sys.o_mu[(k * nx + x) * ny + y];
                        }
                        out[xp] += mu[x] * obs * pi[y][u] * trans;
                    }
                }
            }
        }
        out
    }

    fn random_policy(n_obs: usize, n_actions: usize, rng: &mut impl Rng) -> ObsPolicy {
        (0..n_obs)
            .map(|_| {
                let mut row: Vec<f64> =
                    (0..n_actions).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
                row
            })
            .collect()
    }

    fn random_simplex(n: usize, rng: &mut impl Rng) -> Vec<f64> {
        let mut v: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
        let s: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= s);
        v
    }

    #[test]
    fn flip_chain_swaps_mass() {
        let sys = FiniteSystem::two_state_flip();
        sys.validate().unwrap();
        let out = limit_step(&sys, &[0.3, 0.7], &vec![vec![1.0]]);
        assert!((out[0] - 0.7).abs() < 1e-15);
        assert!((out[1] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn policy_marginalizes_out_for_plain_chain() {
        let p = vec![vec![0.5, 0.3, 0.2], vec![0.1, 0.6, 0.3], vec![0.25, 0.25, 0.5]];
        let sys = FiniteSystem::markov_chain(&p, vec![0.2, 0.5, 0.3]);
        sys.validate().unwrap();
        // hand matrix-vector product μ′ = μ·P
        let mu = &sys.mu0;
        let mut expect = vec![0.0; 3];
        for x in 0..3 {
            for xp in 0..3 {
                expect[xp] += mu[x] * p[x][xp];
            }
        }
        let mut rng = derive_rng(30, &[960]);
        for _ in 0..5 {
            let pi = random_policy(2, 3, &mut rng);
            let out = limit_step(&sys, mu, &pi);
            for xp in 0..3 {
                assert!((out[xp] - expect[xp]).abs() < 1e-14, "policy must not matter");
            }
        }
    }

    #[test]
    fn limit_step_matches_brute_force() {
        let mut rng = derive_rng(31, &[961]);
        for round in 0..20 {
            let nx = rng.random_range(2..=6);
            let ny = rng.random_range(1..=4);
            let nu = rng.random_range(1..=4);
            let sys = FiniteSystem::random(nx, ny, nu, &mut rng);
            sys.validate().unwrap();
            let mu = random_simplex(nx, &mut rng);
            let pi = random_policy(ny, nu, &mut rng);
            let fast = limit_step(&sys, &mu, &pi);
            let slow = brute_force_step(&sys, &mu, &pi);
            for x in 0..nx {
                assert!(
                    (fast[x] - slow[x]).abs() < 1e-14,
                    "round {round} state {x}: {} vs {}",
                    fast[x],
                    slow[x]
                );
            }
        }
    }

    #[test]
    fn limit_step_preserves_simplex() {
        let mut rng = derive_rng(32, &[962]);
        for _ in 0..50 {
            let nx = rng.random_range(2..=10);
            let sys = FiniteSystem::random(nx, 3, 2, &mut rng);
            let mu = random_simplex(nx, &mut rng);
            let pi = random_policy(3, 2, &mut rng);
            let out = limit_step(&sys, &mu, &pi);
            assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(out.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn one_agent_mean_field_is_one_hot() {
        let sys = FiniteSystem::bundled_toy();
        let pis = toy_policy_sequence(6);
        let mut rng = derive_rng(33, &[963]);
        let traj = empirical_rollout(&sys, 1, &pis, &mut rng);
        assert_eq!(traj.len(), 7);
        for mu in traj {
            assert_eq!(mu.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(mu.iter().filter(|&&v| v == 0.0).count(), 2);
        }
    }

    #[test]
    fn deterministic_system_matches_limit_exactly() {
        let sys = FiniteSystem::deterministic_cycle(4);
        sys.validate().unwrap();
        // deterministic policy: always action 1 (any action cycles anyway)
        let pis: Vec<ObsPolicy> = vec![vec![vec![0.0, 1.0]]; 6];
        let limit = limit_trajectory(&sys, &pis);
        for n in [1, 7, 100] {
            let mut rng = derive_rng(34, &[964, n as u64]);
            let emp = empirical_rollout(&sys, n, &pis, &mut rng);
            assert_eq!(emp, limit, "point-mass kernels leave nothing to average");
        }
    }

    #[test]
    fn deviation_shrinks_with_population() {
        let sys = FiniteSystem::bundled_toy();
        let pis = toy_policy_sequence(1);
        let limit = limit_trajectory(&sys, &pis);
        let mean_dev = |n: usize| {
            let mut total = 0.0;
            for rep in 0..200 {
                let mut rng = derive_rng(35, &[965, n as u64, rep]);
                let emp = empirical_rollout(&sys, n, &pis, &mut rng);
                total += l1_distance(&emp[1], &limit[1]);
            }
            total / 200.0
        };
        let (small, large) = (mean_dev(10), mean_dev(1000));
        assert!(
            large < small / 3.0,
            "E‖μ^N₁ − μ₁‖₁ should shrink markedly: {small} → {large}"
        );
    }

    #[test]
    fn w1_trivial_cases() {
        let cost = FiniteSystem::bundled_toy().cost;
        let mu = vec![0.2, 0.5, 0.3];
        assert_eq!(w1_finite(&mu, &mu, &cost), 0.0);
        // point masses at states 0 and 2 under |i−j|: distance 2
        let a = vec![1.0, 0.0, 0.0];
        let b = vec![0.0, 0.0, 1.0];
        assert!((w1_finite(&a, &b, &cost) - 2.0).abs() < 1e-15);
        // 1-D CDF formula on a hand case: μ=(0.6,0.4,0), ν=(0.1,0.4,0.5)
        // |ΔCDF| = (0.5, 0.5) → W₁ = 1.0
        let c = w1_finite(&[0.6, 0.4, 0.0], &[0.1, 0.4, 0.5], &cost);
        assert!((c - 1.0).abs() < 1e-12);
    }

    /// Exhaustive transportation-polytope vertex oracle: every basic
    /// feasible solution is a spanning forest of the supply/demand bipartite
    /// graph, so enumerate all edge subsets of size p+q−1, solve the unique
    /// tree flow, and keep the best feasible one.
    fn w1_by_basis_enumeration(supply: &[f64], demand: &[f64], cost: &[Vec<f64>]) -> f64 {
        let (p, q) = (supply.len(), demand.len());
        let edges: Vec<(usize, usize)> =
            (0..p).flat_map(|i| (0..q).map(move |j| (i, j))).collect();
        let need = p + q - 1;
        let mut best = f64::INFINITY;
        let mut pick = vec![0usize; need];
        fn rec(
            pick: &mut Vec<usize>,
            depth: usize,
            start: usize,
            edges: &[(usize, usize)],
            p: usize,
            q: usize,
            supply: &[f64],
            demand: &[f64],
            cost: &[Vec<f64>],
            best: &mut f64,
        ) {
            let need = pick.len();
            if depth == need {
                // unique flow on the candidate tree by leaf elimination
                let mut deg = vec![0usize; p + q];
                for &e in pick.iter() {
                    let (i, j) = edges[e];
                    deg[i] += 1;
                    deg[p + j] += 1;
                }
                let mut rem_s = supply.to_vec();
                let mut rem_d = demand.to_vec();
                let mut flow = vec![f64::NAN; need];
                let mut alive: Vec<bool> = vec![true; need];
                let mut total = 0.0;
                for _pass in 0..need {
                    let mut progressed = false;
                    for (slot, &e) in pick.iter().enumerate() {
                        if !alive[slot] {
                            continue;
                        }
                        let (i, j) = edges[e];
                        let f = if deg[i] == 1 {
                            rem_s[i]
                        } else if deg[p + j] == 1 {
                            rem_d[j]
                        } else {
                            continue;
                        };
                        if f < -1e-12 {
                            return; // infeasible basis
                        }
                        flow[slot] = f;
                        rem_s[i] -= f;
                        rem_d[j] -= f;
                        deg[i] -= 1;
                        deg[p + j] -= 1;
                        alive[slot] = false;
                        total += f * cost[i][j];
                        progressed = true;
                    }
                    if !progressed {
                        break;
                    }
                }
                if alive.iter().any(|&a| a) {
                    return; // not a spanning forest (contains a cycle)
                }
                if rem_s.iter().chain(rem_d.iter()).any(|&r| r.abs() > 1e-9) {
                    return; // disconnected forest with unbalanced components
                }
                if total < *best {
                    *best = total;
                }
                return;
            }
            for e in start..edges.len() {
                pick[depth] = e;
                rec(pick, depth + 1, e + 1, edges, p, q, supply, demand, cost, best);
            }
        }
        rec(&mut pick, 0, 0, &edges, p, q, supply, demand, cost, &mut best);
        best
    }

    #[test]
    fn w1_matches_basis_enumeration() {
        let mut rng = derive_rng(36, &[966]);
        for round in 0..8 {
            let n = if round == 0 { 5 } else { 4 };
            let mu = random_simplex(n, &mut rng);
            let nu = random_simplex(n, &mut rng);
            let points: Vec<(f64, f64)> =
                (0..n).map(|_| (rng.random::<f64>(), rng.random::<f64>())).collect();
            let mut cost = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    cost[i * n + j] =
                        f64::hypot(points[i].0 - points[j].0, points[i].1 - points[j].1);
                }
            }
            let fast = w1_finite(&mu, &nu, &cost);
            // oracle works on the netted problem with full (non-reduced) supports
            let mut supply = Vec::new();
            let mut demand = Vec::new();
            let mut s_idx = Vec::new();
            let mut d_idx = Vec::new();
            for i in 0..n {
                let d = mu[i] - nu[i];
                if d > 0.0 {
                    supply.push(d);
                    s_idx.push(i);
                } else if d < 0.0 {
                    demand.push(-d);
                    d_idx.push(i);
                }
            }
            let cmat: Vec<Vec<f64>> = s_idx
                .iter()
                .map(|&i| d_idx.iter().map(|&j| cost[i * n + j]).collect())
                .collect();
            let slow = w1_by_basis_enumeration(&supply, &demand, &cmat);
            assert!(
                (fast - slow).abs() < 1e-10,
                "round {round}: flow {fast} vs vertex enumeration {slow}"
            );
        }
    }

    #[test]
    fn w1_agrees_with_cdf_formula_in_one_dimension() {
        let mut rng = derive_rng(37, &[967]);
        for _ in 0..10 {
            let n = 6;
            // sorted support points on a line
            let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
            v.sort_by(f64::total_cmp);
            let mut cost = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    cost[i * n + j] = (v[i] - v[j]).abs();
                }
            }
            let mu = random_simplex(n, &mut rng);
            let nu = random_simplex(n, &mut rng);
            let mut cdf = 0.0;
            let mut expect = 0.0;
            for i in 0..n - 1 {
                cdf += mu[i] - nu[i];
                expect += cdf.abs() * (v[i + 1] - v[i]);
            }
            let got = w1_finite(&mu, &nu, &cost);
            assert!((got - expect).abs() < 1e-10, "{got} vs CDF formula {expect}");
        }
    }

    #[test]
    fn w1_satisfies_metric_axioms() {
        let mut rng = derive_rng(38, &[968]);
        for _ in 0..20 {
            let n = rng.random_range(3..=7);
            let sys = FiniteSystem::random(n, 2, 2, &mut rng);
            let a = random_simplex(n, &mut rng);
            let b = random_simplex(n, &mut rng);
            let c = random_simplex(n, &mut rng);
            let dab = w1_finite(&a, &b, &sys.cost);
            let dba = w1_finite(&b, &a, &sys.cost);
            let dac = w1_finite(&a, &c, &sys.cost);
            let dcb = w1_finite(&c, &b, &sys.cost);
            assert!(dab >= 0.0);
            assert!((dab - dba).abs() < 1e-10, "symmetry: {dab} vs {dba}");
            assert!(dab <= dac + dcb + 1e-10, "triangle: {dab} > {dac} + {dcb}");
            assert!(w1_finite(&a, &a, &sys.cost) == 0.0);
        }
    }

    #[test]
    fn open_loop_replay_reproduces_limit_trajectory_bit_exactly() {
        // mean-field feedback policy: lean on action 1 proportionally to μ₀
        let sys = FiniteSystem::bundled_toy();
        let feedback = |mu: &[f64]| -> ObsPolicy {
            (0..2)
                .map(|y| {
                    let p1 = 0.2 + 0.7 * mu[0] * if y == 0 { 1.0 } else { 0.5 };
                    vec![1.0 - p1, p1]
                })
                .collect()
        };
        let horizon = 8;
        let mut closed = vec![sys.mu0.clone()];
        let mut recorded: Vec<ObsPolicy> = Vec::new();
        for _ in 0..horizon {
            let pi = feedback(closed.last().unwrap());
            let next = limit_step(&sys, closed.last().unwrap(), &pi);
            recorded.push(pi);
            closed.push(next);
        }
        let open = limit_trajectory(&sys, &recorded);
        assert_eq!(open, closed, "open-loop replay must be bit-identical");
    }

    #[test]
    fn million_agent_step_matches_limit_within_monte_carlo_error() {
        let sys = FiniteSystem::bundled_toy();
        let pi = &toy_policy_sequence(1)[0];
        let mu = vec![0.5, 0.3, 0.2];
        let n = 1_000_000usize;
        // deterministic allocation ≈ μ: isolates transition noise
        let mut states = Vec::with_capacity(n);
        for (x, &m) in mu.iter().enumerate() {
            let count = (m * n as f64).round() as usize;
            states.extend(std::iter::repeat_n(x, count));
        }
        states.truncate(n);
        while states.len() < n {
            states.push(sys.n_states - 1);
        }
        let mut rng = derive_rng(39, &[969]);
        empirical_step(&sys, &mut states, pi, &mut rng);
        let emp = empirical_mf(&states, sys.n_states);
        let exact = limit_step(&sys, &mu, pi);
        let tol = 3.0 * (1.0f64 / n as f64).sqrt();
        for x in 0..sys.n_states {
            assert!(
                (emp[x] - exact[x]).abs() < tol,
                "coordinate {x}: {} vs {} (tol {tol})",
                emp[x],
                exact[x]
            );
        }
    }

    #[test]
    fn horizon_zero_sweep_reflects_initial_sampling_only() {
        let sys = FiniteSystem::bundled_toy();
        let rows = chaos_sweep(&sys, &[], &[10, 100], 50, 40);
        assert_eq!(rows.len(), 2, "one t=0 row per N");
        for row in &rows {
            assert_eq!(row.t, 0);
            // recompute with the same streams: deviation of μ^N₀ from μ₀
            let mut total = 0.0;
            for rep in 0..50 {
                let mut rng = derive_rng(40, &[stream::CHAOS, row.n_agents as u64, rep]);
                let states: Vec<usize> =
                    (0..row.n_agents).map(|_| sample_categorical(&sys.mu0, &mut rng)).collect();
                total += l1_distance(&empirical_mf(&states, 3), &sys.mu0);
            }
            assert!((row.mean_l1 - total / 50.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sweep_deviations_shrink_and_csv_is_well_formed() {
        let sys = FiniteSystem::bundled_toy();
        let pis = toy_policy_sequence(3);
        let rows = chaos_sweep(&sys, &pis, &[10, 1000], 100, 41);
        assert_eq!(rows.len(), 2 * 4);
        for row in &rows {
            assert!(row.mean_l1 >= 0.0 && row.mean_w1 >= 0.0 && row.stderr >= 0.0);
        }
        for t in 1..=3 {
            let small = rows.iter().find(|r| r.n_agents == 10 && r.t == t).unwrap();
            let large = rows.iter().find(|r| r.n_agents == 1000 && r.t == t).unwrap();
            assert!(
                large.mean_l1 < small.mean_l1,
                "t={t}: deviation must shrink with N ({} vs {})",
                large.mean_l1,
                small.mean_l1
            );
        }
        let csv = chaos_rows_to_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "N,t,replication_count,mean_l1,mean_w1,stderr");
        assert_eq!(lines.count(), 8);
    }

    #[test]
    fn sweep_slope_is_near_minus_half() {
        let sys = FiniteSystem::bundled_toy();
        let pis = toy_policy_sequence(5);
        let rows = chaos_sweep(&sys, &pis, &[10, 100, 1000], 150, 42);
        let slope = chaos_slope(&rows);
        assert!(
            (-0.75..=-0.3).contains(&slope),
            "log-log L1 slope {slope} strays from the O(1/√N) rate"
        );
    }

    #[test]
    fn bundled_toy_validates_and_is_half_lipschitz() {
        let sys = FiniteSystem::bundled_toy();
        sys.validate().unwrap();
        let mut rng = derive_rng(43, &[970]);
        for _ in 0..100 {
            let mu = random_simplex(3, &mut rng);
            let nu = random_simplex(3, &mut rng);
            let bound = l1_distance(&mu, &nu);
            for x in 0..3 {
                for u in 0..2 {
                    let d = l1_distance(&sys.transition(x, u, &mu), &sys.transition(x, u, &nu));
                    assert!(
                        d <= 0.5 * bound + 1e-12,
                        "kernel moved {d} for a μ-shift of {bound}"
                    );
                }
            }
        }
    }

    #[test]
    fn invalid_systems_are_rejected() {
        let mut sys = FiniteSystem::bundled_toy();
        sys.p_base[0] = 0.9; // row no longer sums to 1
        assert!(sys.validate().is_err());
        let mut sys = FiniteSystem::bundled_toy();
        sys.alpha = 1.5;
        assert!(sys.validate().is_err());
        let mut sys = FiniteSystem::bundled_toy();
        sys.cost[1] = -1.0;
        assert!(sys.validate().is_err());
        let mut sys = FiniteSystem::bundled_toy();
        sys.mu0 = vec![0.6, 0.6, -0.2];
        assert!(sys.validate().is_err());
        let sys = FiniteSystem::bundled_toy();
        assert!(validate_policy(&sys, &toy_policy_sequence(1)[0]).is_ok());
        assert!(validate_policy(&sys, &vec![vec![0.5, 0.6]; 2]).is_err());
        assert!(validate_policy(&sys, &vec![vec![1.0, 0.0]]).is_err());
    }
}
