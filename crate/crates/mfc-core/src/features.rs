//! Mean-field featurization: turning a swarm state into the fixed-length
//! vector the upper-level policy and critic consume.
//!
//! Two modes over a common anchor grid:
//!
//! * **RBF** — input logits I_b = (1/N) Σ_i κ(x_i, c_b) with a Gaussian
//!   kernel per anchor c_b; distances respect the manifold, and heading
//!   models use a product kernel over (position, angle) anchor pairs.
//!   Smooth in the state, each feature in [0, 1].
//! * **Histogram** — the classical discretization: the fraction of agents
//!   per grid cell. Piecewise constant, features sum to 1.
//!
//! Anchors are the centers of an equisized gridding, `points_per_axis` per
//! dimension. The full grid has k^d position anchors; the per-axis variant
//! (RBF only) replaces the exponential grid by k marginal anchors per axis,
//! each feature summarizing one coordinate's density through a 1-D kernel —
//! k·d features instead of k^d, which is what keeps high-dimensional boxes
//! tractable. An optional trailing feature is normalized time t/T, letting
//! stationary networks represent time-dependent behavior.

use crate::envs::{EnvConfig, EnvKind, SwarmState};
use crate::manifolds::{angle_distance, ManifoldKind};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("invalid feature spec: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureMode {
    Rbf,
    Histogram,
}

/// Everything `featurize` needs, precomputed once per run.
#[derive(Clone, Debug)]
pub struct FeatureSpec {
    pub mode: FeatureMode,
    pub manifold: ManifoldKind,
    pub dim: usize,
    pub points_per_axis: usize,
    /// Marginal per-axis position anchors instead of the full grid.
    pub per_axis: bool,
    /// Flat `pos_count × dim` full-grid anchor coordinates, or the k shared
    /// per-axis centers when `per_axis` is set.
    pub pos_centers: Vec<f64>,
    /// Number of position features (k^d, or k·d per-axis).
    pub pos_count: usize,
    /// Angle anchor centers in [0, 2π); empty for heading-free models.
    pub ang_centers: Vec<f64>,
    pub pos_bandwidth: f64,
    pub ang_bandwidth: f64,
    pub include_time: bool,
    pub horizon: usize,
}

/// Centers of an equisized k-partition of [-1, 1], times `scale`:
/// c_j = scale · (-1 + (2j+1)/k).
pub fn axis_centers(points_per_axis: usize, scale: f64) -> Vec<f64> {
    (0..points_per_axis)
        .map(|j| scale * (-1.0 + (2 * j + 1) as f64 / points_per_axis as f64))
        .collect()
}

/// Full-grid anchor points for a d-dimensional box: the Cartesian product of
/// `axis_centers` with the last dimension varying fastest. Returns a flat
/// `k^d × dim` array.
pub fn grid_anchors(dim: usize, points_per_axis: usize, scale: f64) -> Vec<f64> {
    let centers = axis_centers(points_per_axis, scale);
    let count = points_per_axis.pow(dim as u32);
    let mut anchors = Vec::with_capacity(count * dim);
    for mut idx in 0..count {
        let mut coords = vec![0.0; dim];
        for k in (0..dim).rev() {
            coords[k] = centers[idx % points_per_axis];
            idx /= points_per_axis;
        }
        anchors.extend_from_slice(&coords);
    }
    anchors
}

/// Angle anchors: centers of an equisized k-partition of [0, 2π).
pub fn angle_centers(points_per_axis: usize) -> Vec<f64> {
    (0..points_per_axis)
        .map(|j| (2 * j + 1) as f64 * std::f64::consts::PI / points_per_axis as f64)
        .collect()
}

impl FeatureSpec {
    /// Build the featurization an environment uses by default: full grid
    /// unless `per_axis`, with the reference bandwidths (heading models:
    /// 0.12/√2 for positions and 0.12π for angles; boxes: 0.12/√M for M
    /// position features).
    pub fn for_env(
        cfg: &EnvConfig,
        mode: FeatureMode,
        points_per_axis: usize,
        per_axis: bool,
        include_time: bool,
    ) -> Result<Self, FeatureError> {
        if points_per_axis == 0 {
            return Err(FeatureError::Invalid("points_per_axis must be ≥ 1".into()));
        }
        if per_axis && mode == FeatureMode::Histogram {
            return Err(FeatureError::Invalid(
                "histogram features use the full grid; per-axis applies to rbf".into(),
            ));
        }
        let dim = cfg.dim();
        let (pos_centers, pos_count) = if per_axis {
            (axis_centers(points_per_axis, 1.0), points_per_axis * dim)
        } else {
            let count = points_per_axis.pow(dim as u32);
            (grid_anchors(dim, points_per_axis, 1.0), count)
        };
        let has_angle = cfg.has_headings();
        let ang_centers = if has_angle {
            angle_centers(points_per_axis)
        } else {
            Vec::new()
        };
        let (pos_bandwidth, ang_bandwidth) = match cfg.kind {
            EnvKind::Vicsek | EnvKind::Kuramoto => {
                (0.12 / 2.0_f64.sqrt(), 0.12 * std::f64::consts::PI)
            }
            EnvKind::Aggregation => (0.12 / (pos_count as f64).sqrt(), 0.0),
        };
        Ok(FeatureSpec {
            mode,
            manifold: cfg.manifold,
            dim,
            points_per_axis,
            per_axis,
            pos_centers,
            pos_count,
            ang_centers,
            pos_bandwidth,
            ang_bandwidth,
            include_time,
            horizon: cfg.horizon,
        })
    }

    /// Length of the vector `featurize` produces.
    pub fn feature_count(&self) -> usize {
        let ang = self.ang_centers.len();
        let spatial = if self.per_axis {
            self.pos_count + ang
        } else if ang > 0 {
            self.pos_count * ang
        } else {
            self.pos_count
        };
        spatial + usize::from(self.include_time)
    }
}

/// Featurize a state. Output layout: full-grid product features indexed
/// `pos_index * n_angle + ang_index` (or position-only for heading-free
/// models); per-axis features as concatenated blocks per axis followed by
/// the angle block; then the optional t/T feature.
pub fn featurize(state: &SwarmState, spec: &FeatureSpec) -> Vec<f64> {
    let n = state.n_agents();
    let mut out = vec![0.0; spec.feature_count()];
    match spec.mode {
        FeatureMode::Rbf => rbf_features(state, spec, &mut out),
        FeatureMode::Histogram => histogram_features(state, spec, &mut out),
    }
    let inv = 1.0 / n as f64;
    let spatial = spec.feature_count() - usize::from(spec.include_time);
    for v in out[..spatial].iter_mut() {
        *v *= inv;
    }
    if spec.include_time {
        let last = out.len() - 1;
        out[last] = state.time as f64 / spec.horizon as f64;
    }
    out
}

fn rbf_features(state: &SwarmState, spec: &FeatureSpec, out: &mut [f64]) {
    let n = state.n_agents();
    let inv_pos = 1.0 / (2.0 * spec.pos_bandwidth * spec.pos_bandwidth);
    let n_ang = spec.ang_centers.len();
    if spec.per_axis {
        let k = spec.points_per_axis;
        for i in 0..n {
            let p = state.pos(i);
            for (axis, &x) in p.iter().enumerate() {
                for (j, &c) in spec.pos_centers.iter().enumerate() {
                    let d = x - c;
                    out[axis * k + j] += (-d * d * inv_pos).exp();
                }
            }
            if n_ang > 0 {
                let phi = state.headings[i];
                let inv_ang = 1.0 / (2.0 * spec.ang_bandwidth * spec.ang_bandwidth);
                for (j, &a) in spec.ang_centers.iter().enumerate() {
                    let d = angle_distance(phi, a);
                    out[spec.dim * k + j] += (-d * d * inv_ang).exp();
                }
            }
        }
        return;
    }
    // Full grid: product kernel over (position anchor, angle anchor), with
    // the two kernel vectors computed once per agent and combined by outer
    // product, which is equivalent to evaluating the joint kernel at every
    // pair.
    let mut pos_k = vec![0.0; spec.pos_count];
    let mut ang_k = vec![0.0; n_ang.max(1)];
    for i in 0..n {
        let p = state.pos(i);
        for b in 0..spec.pos_count {
            let c = &spec.pos_centers[b * spec.dim..(b + 1) * spec.dim];
            let d = spec.manifold.distance(p, c);
            pos_k[b] = (-d * d * inv_pos).exp();
        }
        if n_ang == 0 {
            for b in 0..spec.pos_count {
                out[b] += pos_k[b];
            }
        } else {
            let inv_ang = 1.0 / (2.0 * spec.ang_bandwidth * spec.ang_bandwidth);
            let phi = state.headings[i];
            for (a, &center) in spec.ang_centers.iter().enumerate() {
                let d = angle_distance(phi, center);
                ang_k[a] = (-d * d * inv_ang).exp();
            }
            for b in 0..spec.pos_count {
                let base = b * n_ang;
                for a in 0..n_ang {
                    out[base + a] += pos_k[b] * ang_k[a];
                }
            }
        }
    }
}

fn histogram_features(state: &SwarmState, spec: &FeatureSpec, out: &mut [f64]) {
    let n = state.n_agents();
    let k = spec.points_per_axis;
    let n_ang = spec.ang_centers.len();
    let bin = |x: f64| -> usize {
        // x ∈ [-1, 1]; the top edge belongs to the last bin.
        (((x + 1.0) / 2.0 * k as f64) as usize).min(k - 1)
    };
    for i in 0..n {
        let mut cell = 0;
        for &x in state.pos(i) {
            cell = cell * k + bin(x);
        }
        if n_ang > 0 {
            let phi = state.headings[i];
            let a = ((phi / std::f64::consts::TAU * n_ang as f64) as usize).min(n_ang - 1);
            cell = cell * n_ang + a;
        }
        out[cell] += 1.0;
    }
}
