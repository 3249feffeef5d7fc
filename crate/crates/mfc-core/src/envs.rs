//! Swarm environments with mean-field coupling.
//!
//! Three families, all exchangeable-agent systems whose reward depends on the
//! empirical distribution of agents (and on the action distribution through a
//! control cost):
//!
//! * **Aggregation** — velocity-controlled particles in `[-1,1]^d` that
//!   should gather; observations are the own position plus Gaussian noise.
//! * **Vicsek** — constant-speed particles with controlled heading on a 2-D
//!   manifold; each agent observes the resultant of relative headings of
//!   neighbors within an interaction radius.
//! * **Kuramoto** — the Vicsek model at speed zero: a random geometric graph
//!   frozen at reset, with heading (phase) control only.
//!
//! Dynamics per step for the heading models:
//!
//! ```text
//! p_{t+1} = wrap(p_t + v (sin φ_t, cos φ_t))          (heading transformed by wrap)
//! φ_{t+1} = φ_t + ω0 u_t + σ_φ z_t   mod 2π
//! ```
//!
//! The reward at a step is evaluated on the pre-transition state plus the
//! cost of the actions just taken: r(μ_t, u_t); alignment uses the mean
//! angular deviation from the swarm's mean heading direction (polarization),
//! aggregation the mean pairwise L1 distance.

use crate::manifolds::{normalize_angle, ManifoldKind};
use rand::Rng;
use rand_distr::{Beta, Distribution, Normal, StandardNormal};
use thiserror::Error;

/// The mean-heading direction is treated as undefined below this norm, in
/// which case every agent's angular deviation counts as π/2. Float slop from
/// exactly-cancelling headings (sin π ≠ 0 in f64) must trigger this too.
const DEGENERATE_MEAN_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnvKind {
    Aggregation,
    Vicsek,
    Kuramoto,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Align,
    Misalign,
    Aggregate,
}

/// Initial position distribution; headings are always uniform on [0, 2π).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitSpec {
    /// Zero-centered diagonal Gaussian with the given per-dimension
    /// variance, clipped to the domain.
    Gaussian { var: f64 },
    /// Uniform over the whole domain.
    Uniform,
    /// Independent Beta(α, β) per dimension, rescaled from [0,1] to [-1,1].
    Beta { alpha: f64, beta: f64 },
    /// Gaussian whose second-coordinate variance is divided by `squeeze`.
    SqueezedGaussian { var: f64, squeeze: f64 },
    /// Mixture of two Gaussians centered at (0.5,...,0.5) and
    /// (-0.5,...,-0.5); `weight` is the probability of the first.
    TwoGaussians { var: f64, weight: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvConfig {
    pub kind: EnvKind,
    pub manifold: ManifoldKind,
    pub n_agents: usize,
    pub horizon: usize,
    pub discount: f64,
    /// Interaction radius D (Vicsek/Kuramoto neighborhoods).
    pub interaction_radius: f64,
    /// Forward speed v0 (Vicsek) or movement speed (Aggregation); zero for
    /// Kuramoto.
    pub speed: f64,
    /// Maximum angular velocity ω0 scaling the turn action.
    pub max_turn: f64,
    /// Heading noise σ_φ.
    pub heading_noise_std: f64,
    /// Transition noise σ_x (Aggregation).
    pub position_noise_std: f64,
    /// Observation noise σ_y (Aggregation).
    pub obs_noise_std: f64,
    /// Alignment weight c_a.
    pub align_weight: f64,
    /// Disaggregation weight c_d.
    pub disaggregation_weight: f64,
    /// Action cost weight c_u.
    pub action_cost_weight: f64,
    pub objective: Objective,
    pub init: InitSpec,
    /// When set (Vicsek only), agents control forward speed in [0, v0]
    /// through a second action component.
    pub velocity_control: bool,
}

impl EnvConfig {
    /// Vicsek flocking on the torus with the reference parameter set.
    pub fn vicsek_torus() -> Self {
        EnvConfig {
            kind: EnvKind::Vicsek,
            manifold: ManifoldKind::Torus,
            n_agents: 300,
            horizon: 200,
            discount: 0.99,
            interaction_radius: 0.25,
            speed: 0.075,
            max_turn: 0.2,
            heading_noise_std: 0.02,
            position_noise_std: 0.2,
            obs_noise_std: 0.2,
            align_weight: 1.0,
            disaggregation_weight: 1.0,
            action_cost_weight: 0.1,
            objective: Objective::Align,
            init: InitSpec::Gaussian { var: 0.4 },
            velocity_control: false,
        }
    }

    /// Kuramoto phase synchronization: Vicsek at speed zero with a static
    /// interaction graph and no heading noise.
    pub fn kuramoto_torus() -> Self {
        EnvConfig {
            kind: EnvKind::Kuramoto,
            speed: 0.0,
            heading_noise_std: 0.0,
            ..EnvConfig::vicsek_torus()
        }
    }

    /// Noisy-position gathering in `[-1,1]^d`.
    pub fn aggregation_box(dim: usize) -> Self {
        EnvConfig {
            kind: EnvKind::Aggregation,
            manifold: ManifoldKind::Box(dim),
            horizon: 100,
            speed: 0.1,
            objective: Objective::Aggregate,
            ..EnvConfig::vicsek_torus()
        }
    }

    pub fn dim(&self) -> usize {
        self.manifold.dim()
    }

    /// Width of one agent's observation row.
    pub fn obs_dim(&self) -> usize {
        match self.kind {
            EnvKind::Aggregation => self.dim(),
            // Resultant magnitude and bearing of relative headings.
            EnvKind::Vicsek | EnvKind::Kuramoto => 2,
        }
    }

    /// Width of one agent's action row.
    pub fn action_dim(&self) -> usize {
        match self.kind {
            EnvKind::Aggregation => self.dim(),
            EnvKind::Vicsek | EnvKind::Kuramoto => {
                if self.velocity_control {
                    2
                } else {
                    1
                }
            }
        }
    }

    pub fn has_headings(&self) -> bool {
        matches!(self.kind, EnvKind::Vicsek | EnvKind::Kuramoto)
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |msg: String| Err(EnvError::InvalidConfig(msg));
        if self.n_agents == 0 {
            return bad("n_agents must be at least 1".into());
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return bad(format!("discount {} outside (0,1)", self.discount));
        }
        for (name, v) in [
            ("align_weight", self.align_weight),
            ("disaggregation_weight", self.disaggregation_weight),
            ("action_cost_weight", self.action_cost_weight),
            ("heading_noise_std", self.heading_noise_std),
            ("position_noise_std", self.position_noise_std),
            ("obs_noise_std", self.obs_noise_std),
            ("speed", self.speed),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} = {v} must be finite and non-negative"));
            }
        }
        match self.init {
            InitSpec::Gaussian { var } => {
                if !(var > 0.0) {
                    return bad("init variance must be positive".into());
                }
            }
            InitSpec::Uniform => {}
            InitSpec::Beta { alpha, beta } => {
                if !(alpha > 0.0 && beta > 0.0) {
                    return bad("beta init parameters must be positive".into());
                }
            }
            InitSpec::SqueezedGaussian { var, squeeze } => {
                if !(var > 0.0 && squeeze > 0.0) {
                    return bad("squeezed init parameters must be positive".into());
                }
            }
            InitSpec::TwoGaussians { var, weight } => {
                if !(var > 0.0 && weight > 0.0 && weight < 1.0) {
                    return bad("two-gaussian init needs var > 0, weight in (0,1)".into());
                }
            }
        }
        match self.kind {
            EnvKind::Aggregation => {
                if !matches!(self.manifold, ManifoldKind::Box(d) if d >= 1) {
                    return bad("aggregation runs in a box manifold".into());
                }
                if self.objective != Objective::Aggregate {
                    return bad("aggregation supports only the aggregate objective".into());
                }
                if self.velocity_control {
                    return bad("velocity control applies to heading models only".into());
                }
            }
            EnvKind::Vicsek | EnvKind::Kuramoto => {
                if self.dim() != 2 {
                    return bad("heading models need a 2-dimensional manifold".into());
                }
                if self.objective == Objective::Aggregate {
                    return bad("heading models support align/misalign objectives".into());
                }
                if !(self.interaction_radius > 0.0) {
                    return bad("interaction radius must be positive".into());
                }
                if !(self.max_turn > 0.0) {
                    return bad("max_turn must be positive".into());
                }
                if self.kind == EnvKind::Kuramoto && self.speed != 0.0 {
                    return bad("kuramoto agents are static (speed must be 0)".into());
                }
            }
        }
        Ok(())
    }
}

/// Full swarm state. Positions are row-major `n_agents × dim`; headings are
/// empty for heading-free models. The static interaction graph is present
/// exactly for Kuramoto.
#[derive(Clone, Debug, PartialEq)]
pub struct SwarmState {
    pub positions: Vec<f64>,
    pub headings: Vec<f64>,
    pub neighbors: Option<Vec<Vec<usize>>>,
    pub dim: usize,
    pub time: usize,
}

impl SwarmState {
    pub fn n_agents(&self) -> usize {
        self.positions.len() / self.dim
    }

    pub fn pos(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub state: SwarmState,
    /// Observations of the post-transition state, `n_agents × obs_dim`.
    pub observations: Vec<f64>,
    /// r(μ_t, u_t): objective on the pre-transition state plus action cost.
    pub reward: f64,
    pub done: bool,
}

// ─── Reset and observation ─────────────────────────────────────────────────

/// Sample an initial state. Positions follow `cfg.init`, headings (if any)
/// are uniform; the Kuramoto interaction graph is computed here and frozen.
pub fn reset(cfg: &EnvConfig, rng: &mut impl Rng) -> SwarmState {
    let d = cfg.dim();
    let n = cfg.n_agents;
    let mut positions = vec![0.0; n * d];
    match cfg.init {
        InitSpec::Gaussian { var } => {
            let normal = Normal::new(0.0, var.sqrt()).expect("validated");
            for p in positions.iter_mut() {
                *p = f64::clamp(normal.sample(rng), -1.0, 1.0);
            }
        }
        InitSpec::Uniform => {
            for p in positions.iter_mut() {
                *p = rng.random_range(-1.0..1.0);
            }
        }
        InitSpec::Beta { alpha, beta } => {
            let b = Beta::new(alpha, beta).expect("validated");
            for p in positions.iter_mut() {
                *p = 2.0 * b.sample(rng) - 1.0;
            }
        }
        InitSpec::SqueezedGaussian { var, squeeze } => {
            let sd = [var.sqrt(), (var / squeeze).sqrt()];
            for (idx, p) in positions.iter_mut().enumerate() {
                let k = idx % d;
                let s = if k == 1 { sd[1] } else { sd[0] };
                *p = f64::clamp(s * rng.sample::<f64, _>(StandardNormal), -1.0, 1.0);
            }
        }
        InitSpec::TwoGaussians { var, weight } => {
            let sd = var.sqrt();
            for i in 0..n {
                let center = if rng.random::<f64>() < weight { 0.5 } else { -0.5 };
                for k in 0..d {
                    let z: f64 = rng.sample(StandardNormal);
                    positions[i * d + k] = f64::clamp(center + sd * z, -1.0, 1.0);
                }
            }
        }
    }
    let headings = if cfg.has_headings() {
        (0..n)
            .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
            .collect()
    } else {
        Vec::new()
    };
    let neighbors = if cfg.kind == EnvKind::Kuramoto {
        Some(neighbor_lists(
            cfg.manifold,
            &positions,
            cfg.interaction_radius,
        ))
    } else {
        None
    };
    SwarmState {
        positions,
        headings,
        neighbors,
        dim: d,
        time: 0,
    }
}

/// Per-agent observations of a state, `n_agents × obs_dim` row-major.
///
/// Vicsek: the neighborhood resultant of relative headings,
/// y_i = (‖(x̄,ȳ)‖, atan2(x̄,ȳ)) with x̄ = Σ_j sin(φ_j−φ_i)/N,
/// ȳ = Σ_j cos(φ_j−φ_i)/N over neighbors j (self included). The magnitude is
/// bounded by the neighbor fraction; an isolated agent sees (1/N, 0).
/// Kuramoto: the same on the frozen graph. Aggregation: own position plus
/// Gaussian noise, clamped to the box.
pub fn observe(state: &SwarmState, cfg: &EnvConfig, rng: &mut impl Rng) -> Vec<f64> {
    let n = state.n_agents();
    match cfg.kind {
        EnvKind::Aggregation => {
            let mut obs = vec![0.0; n * state.dim];
            for (o, x) in obs.iter_mut().zip(&state.positions) {
                let z: f64 = rng.sample(StandardNormal);
                *o = f64::clamp(x + cfg.obs_noise_std * z, -1.0, 1.0);
            }
            obs
        }
        EnvKind::Vicsek | EnvKind::Kuramoto => {
            let owned;
            let lists = match &state.neighbors {
                Some(l) => l,
                None => {
                    owned =
                        neighbor_lists(cfg.manifold, &state.positions, cfg.interaction_radius);
                    &owned
                }
            };
            let mut obs = vec![0.0; n * 2];
            for i in 0..n {
                let phi_i = state.headings[i];
                let (mut sx, mut sy) = (0.0, 0.0);
                for &j in &lists[i] {
                    let rel = state.headings[j] - phi_i;
                    sx += rel.sin();
                    sy += rel.cos();
                }
                let xbar = sx / n as f64;
                let ybar = sy / n as f64;
                obs[2 * i] = f64::hypot(xbar, ybar);
                obs[2 * i + 1] = xbar.atan2(ybar);
            }
            obs
        }
    }
}

// ─── Transition ────────────────────────────────────────────────────────────

/// Advance the swarm one step under the given joint action
/// (`n_agents × action_dim`, row-major, each component in [-1,1]).
///
/// The returned reward is r(μ_t, u_t); `observations` describe the new
/// state. Panics on malformed actions — those are produced by our own policy
/// code, so an invalid row is a bug, not input.
pub fn step(
    state: &SwarmState,
    actions: &[f64],
    cfg: &EnvConfig,
    rng: &mut impl Rng,
) -> StepOutcome {
    let n = state.n_agents();
    let ad = cfg.action_dim();
    assert_eq!(
        actions.len(),
        n * ad,
        "step: expected {n}x{ad} actions, got {}",
        actions.len()
    );
    for (k, u) in actions.iter().enumerate() {
        assert!(
            u.is_finite() && u.abs() <= 1.0,
            "step: action component {k} = {u} outside [-1,1]"
        );
    }

    let stat = action_cost_stat(cfg, actions);
    let reward = reward(state, cfg, stat);

    let mut next = state.clone();
    next.time += 1;
    match cfg.kind {
        EnvKind::Vicsek | EnvKind::Kuramoto => {
            for i in 0..n {
                let turn = actions[i * ad];
                let speed = if cfg.velocity_control {
                    (actions[i * ad + 1] + 1.0) / 2.0 * cfg.speed
                } else {
                    cfg.speed
                };
                let mut phi = state.headings[i];
                if speed != 0.0 {
                    let p = &mut next.positions[i * 2..(i + 1) * 2];
                    p[0] = state.positions[i * 2] + speed * phi.sin();
                    p[1] = state.positions[i * 2 + 1] + speed * phi.cos();
                    let transform = cfg.manifold.wrap_in_place(p);
                    phi = transform.apply(phi);
                }
                let z: f64 = rng.sample(StandardNormal);
                next.headings[i] =
                    normalize_angle(phi + cfg.max_turn * turn + cfg.heading_noise_std * z);
            }
        }
        EnvKind::Aggregation => {
            let d = state.dim;
            for i in 0..n {
                let u = &actions[i * d..(i + 1) * d];
                let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
                let scale = cfg.speed / f64::max(1.0, norm);
                for k in 0..d {
                    let z: f64 = rng.sample(StandardNormal);
                    let raw = state.positions[i * d + k]
                        + scale * u[k]
                        + cfg.position_noise_std * z;
                    next.positions[i * d + k] = f64::clamp(raw, -1.0, 1.0);
                }
            }
        }
    }

    let observations = observe(&next, cfg, rng);
    let done = next.time >= cfg.horizon;
    StepOutcome {
        state: next,
        observations,
        reward,
        done,
    }
}

// ─── Rewards and order metrics ─────────────────────────────────────────────

/// Mean absolute action magnitude entering the control cost: mean |u| for
/// turn control, mean L1 norm of the action row for velocity control, and
/// the mean L1 norm of the clipped movement direction for Aggregation.
pub fn action_cost_stat(cfg: &EnvConfig, actions: &[f64]) -> f64 {
    let ad = cfg.action_dim();
    let n = actions.len() / ad;
    if n == 0 {
        return 0.0;
    }
    let total: f64 = match cfg.kind {
        EnvKind::Vicsek | EnvKind::Kuramoto => actions.iter().map(|u| u.abs()).sum(),
        EnvKind::Aggregation => actions
            .chunks_exact(ad)
            .map(|u| {
                let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
                u.iter().map(|v| v.abs()).sum::<f64>() / f64::max(1.0, norm)
            })
            .sum(),
    };
    total / n as f64
}

/// r(μ, u-stat) under the configured objective.
pub fn reward(state: &SwarmState, cfg: &EnvConfig, action_stat: f64) -> f64 {
    let cost = cfg.action_cost_weight * action_stat;
    match cfg.objective {
        Objective::Align => -cfg.align_weight * polarization(state) - cost,
        Objective::Misalign => cfg.align_weight * polarization(state) - cost,
        Objective::Aggregate => {
            -cfg.disaggregation_weight * mean_pairwise_l1(state) - cost
        }
    }
}

/// Polar order parameter R = |Σ_i e^{iφ_i}| / N in [0, 1]; zero for
/// heading-free swarms.
pub fn polar_order(state: &SwarmState) -> f64 {
    let n = state.headings.len();
    if n == 0 {
        return 0.0;
    }
    let (mut c, mut s) = (0.0, 0.0);
    for &phi in &state.headings {
        c += phi.cos();
        s += phi.sin();
    }
    f64::hypot(c / n as f64, s / n as f64)
}

/// Mean angular deviation from the mean heading direction,
/// pol = (1/N) Σ_i arccos((cos φ_i, sin φ_i)·x̄/‖x̄‖) in [0, π]. When the mean
/// direction degenerates (‖x̄‖ ≈ 0, e.g. two exactly opposite headings),
/// every deviation is defined as π/2.
pub fn polarization(state: &SwarmState) -> f64 {
    let n = state.headings.len();
    assert!(n > 0, "polarization needs headings");
    let (mut c, mut s) = (0.0, 0.0);
    for &phi in &state.headings {
        c += phi.cos();
        s += phi.sin();
    }
    let norm = f64::hypot(c, s);
    if norm < DEGENERATE_MEAN_EPS * n as f64 {
        return std::f64::consts::FRAC_PI_2;
    }
    let (mx, my) = (c / norm, s / norm);
    let mut total = 0.0;
    for &phi in &state.headings {
        let dot = f64::clamp(phi.cos() * mx + phi.sin() * my, -1.0, 1.0);
        total += dot.acos();
    }
    total / n as f64
}

/// Mean pairwise L1 distance (1/N²) Σ_i Σ_j ‖x_i − x_j‖₁, computed exactly
/// per dimension from sorted coordinates in O(d·N log N).
pub fn mean_pairwise_l1(state: &SwarmState) -> f64 {
    let n = state.n_agents();
    let d = state.dim;
    if n == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    let mut column = vec![0.0; n];
    for k in 0..d {
        for i in 0..n {
            column[i] = state.positions[i * d + k];
        }
        column.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // Σ_{i<j} (v_j − v_i) = Σ_j (2j − n + 1) v_j over sorted values.
        let mut dim_sum = 0.0;
        for (j, v) in column.iter().enumerate() {
            dim_sum += (2.0 * j as f64 - (n - 1) as f64) * v;
        }
        total += 2.0 * dim_sum;
    }
    total / (n * n) as f64
}

// ─── Neighbor search ───────────────────────────────────────────────────────

/// Neighbor lists (indices with quotient distance ≤ radius, self included)
/// via a uniform grid sized so one cell ring covers the radius. Quadratic
/// scan only degenerates gracefully for radii near the domain size.
pub fn neighbor_lists(kind: ManifoldKind, positions: &[f64], radius: f64) -> Vec<Vec<usize>> {
    assert_eq!(kind.dim(), 2, "neighbor search runs on 2-D manifolds");
    assert!(radius > 0.0);
    let n_agents = positions.len() / 2;
    let cells_per_axis = ((2.0 / radius).floor() as usize).max(1);
    let size = 2.0 / cells_per_axis as f64;
    let cell_of = |c: f64| -> usize {
        (((c + 1.0) / size) as usize).min(cells_per_axis - 1)
    };

    let mut cells = vec![Vec::new(); cells_per_axis * cells_per_axis];
    let mut agent_cell = Vec::with_capacity(n_agents);
    for i in 0..n_agents {
        let ci = cell_of(positions[2 * i]);
        let cj = cell_of(positions[2 * i + 1]);
        cells[ci * cells_per_axis + cj].push(i);
        agent_cell.push((ci, cj));
    }

    let mut lists = vec![Vec::new(); n_agents];
    let mut candidate_cells: Vec<usize> = Vec::with_capacity(9);
    for i in 0..n_agents {
        let (ci, cj) = agent_cell[i];
        candidate_cells.clear();
        for di in -1i64..=1 {
            for dj in -1i64..=1 {
                if let Some((ri, rj)) =
                    resolve_cell(kind, ci as i64 + di, cj as i64 + dj, cells_per_axis)
                {
                    let id = ri * cells_per_axis + rj;
                    if !candidate_cells.contains(&id) {
                        candidate_cells.push(id);
                    }
                }
            }
        }
        let pi = &positions[2 * i..2 * i + 2];
        for &cell in &candidate_cells {
            for &j in &cells[cell] {
                let pj = &positions[2 * j..2 * j + 2];
                if kind.distance(pi, pj) <= radius {
                    lists[i].push(j);
                }
            }
        }
        lists[i].sort_unstable();
    }
    lists
}

/// Map an out-of-range cell index pair to the actual cell its points wrap
/// into, mirroring the manifold's identification rules on indices
/// (reflection i → n−1−i for flip edges). `None` means a hard boundary.
fn resolve_cell(kind: ManifoldKind, i: i64, j: i64, n: usize) -> Option<(usize, usize)> {
    let n_i = n as i64;
    let in_range = |v: i64| v >= 0 && v < n_i;
    let reduce = |v: i64| v.rem_euclid(n_i) as usize;
    match kind {
        ManifoldKind::Box(_) => {
            if in_range(i) && in_range(j) {
                Some((i as usize, j as usize))
            } else {
                None
            }
        }
        ManifoldKind::Torus => Some((reduce(i), reduce(j))),
        ManifoldKind::Moebius => {
            if !in_range(i) {
                return None;
            }
            if in_range(j) {
                Some((i as usize, j as usize))
            } else {
                Some((n - 1 - i as usize, reduce(j)))
            }
        }
        ManifoldKind::KleinBottle => {
            let ri = reduce(i);
            if in_range(j) {
                Some((ri, j as usize))
            } else {
                Some((n - 1 - ri, reduce(j)))
            }
        }
        ManifoldKind::ProjectivePlane => {
            let (mut ii, mut jj) = (i, j);
            if !in_range(ii) {
                jj = n_i - 1 - jj;
                ii = ii.rem_euclid(n_i);
            }
            if !in_range(jj) {
                ii = n_i - 1 - ii;
                jj = jj.rem_euclid(n_i);
            }
            Some((ii as usize, jj as usize))
        }
    }
}

/// Quadratic reference neighbor search; the grid version must match this.
pub fn neighbor_lists_brute(
    kind: ManifoldKind,
    positions: &[f64],
    radius: f64,
) -> Vec<Vec<usize>> {
    assert_eq!(kind.dim(), 2);
    let n = positions.len() / 2;
    let mut lists = vec![Vec::new(); n];
    for i in 0..n {
        for j in 0..n {
            if kind.distance(&positions[2 * i..2 * i + 2], &positions[2 * j..2 * j + 2])
                <= radius
            {
                lists[i].push(j);
            }
        }
    }
    lists
}
