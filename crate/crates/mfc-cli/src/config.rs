//! Flat `key = value` run configuration.
//!
//! One documented schema covers every experiment: environment, featurizer,
//! ξ-parametrization, PPO hyperparameters, and run metadata.  Lines are
//! `dotted.key = value`, `#` starts a comment, and unknown keys are hard
//! errors so a typo cannot silently fall back to a default.  Serialization
//! is canonical (fixed key order, shortest-round-trip floats), so
//! parse → serialize → parse is the identity.

use std::fmt::Write as FmtWrite;
use std::path::PathBuf;

use mfc_core::envs::{EnvConfig, EnvKind, InitSpec, Objective};
use mfc_core::features::{FeatureMode, FeatureSpec};
use mfc_core::manifolds::ManifoldKind;
use mfc_core::policies::XiSpec;
use mfc_core::ppo::PpoConfig;
use thiserror::Error;

#[derive(Debug, Error)]
#[error("config: {0}")]
pub struct ConfigError(pub String);

/// Everything a run needs, with defaults matching the reference
/// Vicsek-on-the-torus training setup.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub feature_mode: FeatureMode,
    pub points_per_axis: usize,
    pub per_axis: bool,
    pub include_time: bool,
    pub xi_per_anchor: bool,
    pub ppo: PpoConfig,
    pub out_dir: PathBuf,
    pub eval_episodes: usize,
    pub eval_agents: Vec<usize>,
    pub chaos_ns: Vec<usize>,
    pub chaos_horizon: usize,
    pub chaos_replications: usize,
    pub bench_dims: Vec<usize>,
    pub bench_agents: usize,
    pub bench_batch_len: usize,
    pub bench_reps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            env: EnvConfig::vicsek_torus(),
            feature_mode: FeatureMode::Rbf,
            points_per_axis: 5,
            per_axis: false,
            include_time: false,
            xi_per_anchor: true,
            ppo: PpoConfig { iterations: 150, ..PpoConfig::default() },
            out_dir: PathBuf::from("out"),
            eval_episodes: 50,
            eval_agents: vec![25, 50, 100, 200],
            chaos_ns: vec![10, 100, 1000, 10000],
            chaos_horizon: 10,
            chaos_replications: 200,
            bench_dims: vec![2, 3, 4, 5],
            bench_agents: 50,
            bench_batch_len: 200,
            bench_reps: 5,
        }
    }
}

impl RunConfig {
    pub fn feat_spec(&self) -> Result<FeatureSpec, ConfigError> {
        FeatureSpec::for_env(
            &self.env,
            self.feature_mode,
            self.points_per_axis,
            self.per_axis,
            self.include_time,
        )
        .map_err(|e| ConfigError(e.to_string()))
    }

    pub fn xi_spec(&self) -> XiSpec {
        XiSpec::for_env(&self.env, self.xi_per_anchor)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.env.validate().map_err(|e| ConfigError(e.to_string()))?;
        self.ppo.validate().map_err(|e| ConfigError(e.to_string()))?;
        self.feat_spec()?;
        if self.eval_episodes == 0 || self.eval_agents.is_empty() {
            return Err(ConfigError("eval needs at least one episode and one agent count".into()));
        }
        if !self.bench_dims.iter().all(|d| (2..=5).contains(d)) {
            return Err(ConfigError("bench.dims entries must lie in 2..=5".into()));
        }
        Ok(())
    }
}

// ─── Parsing ───────────────────────────────────────────────────────────────

fn parse_f64(key: &str, v: &str) -> Result<f64, ConfigError> {
    v.parse().map_err(|_| ConfigError(format!("{key}: `{v}` is not a number")))
}

fn parse_usize(key: &str, v: &str) -> Result<usize, ConfigError> {
    v.parse().map_err(|_| ConfigError(format!("{key}: `{v}` is not a non-negative integer")))
}

fn parse_u64(key: &str, v: &str) -> Result<u64, ConfigError> {
    v.parse().map_err(|_| ConfigError(format!("{key}: `{v}` is not a non-negative integer")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(ConfigError(format!("{key}: `{v}` must be true or false"))),
    }
}

fn parse_usize_list(key: &str, v: &str) -> Result<Vec<usize>, ConfigError> {
    let items: Result<Vec<usize>, _> = v.split(',').map(|s| parse_usize(key, s.trim())).collect();
    let items = items?;
    if items.is_empty() {
        return Err(ConfigError(format!("{key}: list must not be empty")));
    }
    Ok(items)
}

/// Parses the flat config format. Unknown keys, malformed lines, and
/// invalid enum values are hard errors that name the offending line.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    // init distribution is assembled at the end from these pieces
    let mut init_kind = String::from("gaussian");
    let (mut init_var, mut init_alpha, mut init_beta) = (0.4, 2.0, 2.0);
    let (mut init_squeeze, mut init_weight) = (4.0, 0.5);
    let mut manifold_name = String::from("torus");
    let mut dim = 2usize;

    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let at = |msg: String| ConfigError(format!("line {}: {msg}", idx + 1));
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| at(format!("`{line}` is not of the form key = value")))?;
        let (key, v) = (key.trim(), value.trim());
        match key {
            "env.kind" => {
                cfg.env.kind = match v {
                    "vicsek" => EnvKind::Vicsek,
                    "kuramoto" => EnvKind::Kuramoto,
                    "aggregation" => EnvKind::Aggregation,
                    _ => return Err(at(format!("env.kind `{v}` (vicsek|kuramoto|aggregation)"))),
                }
            }
            "env.manifold" => {
                if !["torus", "moebius", "klein", "projective", "box"].contains(&v) {
                    return Err(at(format!(
                        "env.manifold `{v}` (torus|moebius|klein|projective|box)"
                    )));
                }
                manifold_name = v.to_string();
            }
            "env.dim" => dim = parse_usize(key, v).map_err(|e| at(e.0))?,
            "env.n_agents" => cfg.env.n_agents = parse_usize(key, v).map_err(|e| at(e.0))?,
            "env.horizon" => cfg.env.horizon = parse_usize(key, v).map_err(|e| at(e.0))?,
            "env.discount" => cfg.env.discount = parse_f64(key, v).map_err(|e| at(e.0))?,
            "env.interaction_radius" => {
                cfg.env.interaction_radius = parse_f64(key, v).map_err(|e| at(e.0))?
            }
            "env.speed" => cfg.env.speed = parse_f64(key, v).map_err(|e| at(e.0))?,
            "env.max_turn" => cfg.env.max_turn = parse_f64(key, v).map_err(|e| at(e.0))?,
            "env.heading_noise_std" => {
                cfg.env.heading_noise_std = parse_f64(key, v).map_err(|e| at(e.0))?
            }
            "env.position_noise_std" => {
                cfg.env.position_noise_std = parse_f64(key, v).map_err(|e| at(e.0))?
            }
            "env.obs_noise_std" => cfg.env.obs_noise_std = parse_f64(key, v).map_err(|e| at(e.0))?,
            "env.align_weight" => cfg.env.align_weight = parse_f64(key, v).map_err(|e| at(e.0))?,
            "env.disaggregation_weight" => {
                cfg.env.disaggregation_weight = parse_f64(key, v).map_err(|e| at(e.0))?
            }
            "env.action_cost_weight" => {
                cfg.env.action_cost_weight = parse_f64(key, v).map_err(|e| at(e.0))?
            }
            "env.objective" => {
                cfg.env.objective = match v {
                    "align" => Objective::Align,
                    "misalign" => Objective::Misalign,
                    "aggregate" => Objective::Aggregate,
                    _ => return Err(at(format!("env.objective `{v}` (align|misalign|aggregate)"))),
                }
            }
            "env.velocity_control" => {
                cfg.env.velocity_control = parse_bool(key, v).map_err(|e| at(e.0))?
            }
            "env.init" => {
                if !["gaussian", "uniform", "beta", "squeezed", "two_gaussians"].contains(&v) {
                    return Err(at(format!(
                        "env.init `{v}` (gaussian|uniform|beta|squeezed|two_gaussians)"
                    )));
                }
                init_kind = v.to_string();
            }
            "env.init_var" => init_var = parse_f64(key, v).map_err(|e| at(e.0))?,
            "env.init_alpha" => init_alpha = parse_f64(key, v).map_err(|e| at(e.0))?,
            "env.init_beta" => init_beta = parse_f64(key, v).map_err(|e| at(e.0))?,
            "env.init_squeeze" => init_squeeze = parse_f64(key, v).map_err(|e| at(e.0))?,
            "env.init_weight" => init_weight = parse_f64(key, v).map_err(|e| at(e.0))?,
            "features.mode" => {
                cfg.feature_mode = match v {
                    "rbf" => FeatureMode::Rbf,
                    "histogram" => FeatureMode::Histogram,
                    _ => return Err(at(format!("features.mode `{v}` (rbf|histogram)"))),
                }
            }
            "features.points_per_axis" => {
                cfg.points_per_axis = parse_usize(key, v).map_err(|e| at(e.0))?
            }
            "features.per_axis" => cfg.per_axis = parse_bool(key, v).map_err(|e| at(e.0))?,
            "features.include_time" => cfg.include_time = parse_bool(key, v).map_err(|e| at(e.0))?,
            "xi.per_anchor" => cfg.xi_per_anchor = parse_bool(key, v).map_err(|e| at(e.0))?,
            "ppo.discount" => cfg.ppo.discount = parse_f64(key, v).map_err(|e| at(e.0))?,
            "ppo.gae_lambda" => cfg.ppo.gae_lambda = parse_f64(key, v).map_err(|e| at(e.0))?,
            "ppo.kl_coeff" => cfg.ppo.kl_coeff = parse_f64(key, v).map_err(|e| at(e.0))?,
            "ppo.clip" => cfg.ppo.clip = parse_f64(key, v).map_err(|e| at(e.0))?,
            "ppo.lr" => cfg.ppo.lr = parse_f64(key, v).map_err(|e| at(e.0))?,
            "ppo.batch_len" => cfg.ppo.batch_len = parse_usize(key, v).map_err(|e| at(e.0))?,
            "ppo.minibatch_len" => {
                cfg.ppo.minibatch_len = parse_usize(key, v).map_err(|e| at(e.0))?
            }
            "ppo.n_epochs" => cfg.ppo.n_epochs = parse_usize(key, v).map_err(|e| at(e.0))?,
            "ppo.iterations" => cfg.ppo.iterations = parse_usize(key, v).map_err(|e| at(e.0))?,
            "ppo.num_parallel_envs" => {
                cfg.ppo.num_parallel_envs = parse_usize(key, v).map_err(|e| at(e.0))?
            }
            "ppo.hidden" => cfg.ppo.hidden = parse_usize_list(key, v).map_err(|e| at(e.0))?,
            "ppo.seed" => cfg.ppo.seed = parse_u64(key, v).map_err(|e| at(e.0))?,
            "ppo.checkpoint_every" => {
                cfg.ppo.checkpoint_every = parse_usize(key, v).map_err(|e| at(e.0))?
            }
            "run.out_dir" => cfg.out_dir = PathBuf::from(v),
            "run.eval_episodes" => cfg.eval_episodes = parse_usize(key, v).map_err(|e| at(e.0))?,
            "run.eval_agents" => cfg.eval_agents = parse_usize_list(key, v).map_err(|e| at(e.0))?,
            "chaos.ns" => cfg.chaos_ns = parse_usize_list(key, v).map_err(|e| at(e.0))?,
            "chaos.horizon" => cfg.chaos_horizon = parse_usize(key, v).map_err(|e| at(e.0))?,
            "chaos.replications" => {
                cfg.chaos_replications = parse_usize(key, v).map_err(|e| at(e.0))?
            }
            "bench.dims" => cfg.bench_dims = parse_usize_list(key, v).map_err(|e| at(e.0))?,
            "bench.agents" => cfg.bench_agents = parse_usize(key, v).map_err(|e| at(e.0))?,
            "bench.batch_len" => cfg.bench_batch_len = parse_usize(key, v).map_err(|e| at(e.0))?,
            "bench.reps" => cfg.bench_reps = parse_usize(key, v).map_err(|e| at(e.0))?,
            _ => return Err(at(format!("unknown key `{key}`"))),
        }
    }

    cfg.env.manifold = match manifold_name.as_str() {
        "torus" => ManifoldKind::Torus,
        "moebius" => ManifoldKind::Moebius,
        "klein" => ManifoldKind::KleinBottle,
        "projective" => ManifoldKind::ProjectivePlane,
        "box" => ManifoldKind::Box(dim),
        _ => unreachable!("validated above"),
    };
    if manifold_name != "box" && dim != 2 {
        return Err(ConfigError(format!("env.dim = {dim} applies to the box manifold only")));
    }
    cfg.env.init = match init_kind.as_str() {
        "gaussian" => InitSpec::Gaussian { var: init_var },
        "uniform" => InitSpec::Uniform,
        "beta" => InitSpec::Beta { alpha: init_alpha, beta: init_beta },
        "squeezed" => InitSpec::SqueezedGaussian { var: init_var, squeeze: init_squeeze },
        "two_gaussians" => InitSpec::TwoGaussians { var: init_var, weight: init_weight },
        _ => unreachable!("validated above"),
    };
    Ok(cfg)
}

// ─── Serialization ─────────────────────────────────────────────────────────

/// Canonical config text: every key once, fixed order, shortest
/// round-tripping float representation.
pub fn to_config_string(cfg: &RunConfig) -> String {
    let mut s = String::new();
    let kind = match cfg.env.kind {
        EnvKind::Vicsek => "vicsek",
        EnvKind::Kuramoto => "kuramoto",
        EnvKind::Aggregation => "aggregation",
    };
    let (manifold, dim) = match cfg.env.manifold {
        ManifoldKind::Torus => ("torus", 2),
        ManifoldKind::Moebius => ("moebius", 2),
        ManifoldKind::KleinBottle => ("klein", 2),
        ManifoldKind::ProjectivePlane => ("projective", 2),
        ManifoldKind::Box(d) => ("box", d),
    };
    let objective = match cfg.env.objective {
        Objective::Align => "align",
        Objective::Misalign => "misalign",
        Objective::Aggregate => "aggregate",
    };
    let _ = writeln!(s, "# environment");
    let _ = writeln!(s, "env.kind = {kind}");
    let _ = writeln!(s, "env.manifold = {manifold}");
    let _ = writeln!(s, "env.dim = {dim}");
    let _ = writeln!(s, "env.n_agents = {}", cfg.env.n_agents);
    let _ = writeln!(s, "env.horizon = {}", cfg.env.horizon);
    let _ = writeln!(s, "env.discount = {}", cfg.env.discount);
    let _ = writeln!(s, "env.interaction_radius = {}", cfg.env.interaction_radius);
    let _ = writeln!(s, "env.speed = {}", cfg.env.speed);
    let _ = writeln!(s, "env.max_turn = {}", cfg.env.max_turn);
    let _ = writeln!(s, "env.heading_noise_std = {}", cfg.env.heading_noise_std);
    let _ = writeln!(s, "env.position_noise_std = {}", cfg.env.position_noise_std);
    let _ = writeln!(s, "env.obs_noise_std = {}", cfg.env.obs_noise_std);
    let _ = writeln!(s, "env.align_weight = {}", cfg.env.align_weight);
    let _ = writeln!(s, "env.disaggregation_weight = {}", cfg.env.disaggregation_weight);
    let _ = writeln!(s, "env.action_cost_weight = {}", cfg.env.action_cost_weight);
    let _ = writeln!(s, "env.objective = {objective}");
    let _ = writeln!(s, "env.velocity_control = {}", cfg.env.velocity_control);
    match cfg.env.init {
        InitSpec::Gaussian { var } => {
            let _ = writeln!(s, "env.init = gaussian");
            let _ = writeln!(s, "env.init_var = {var}");
        }
        InitSpec::Uniform => {
            let _ = writeln!(s, "env.init = uniform");
        }
        InitSpec::Beta { alpha, beta } => {
            let _ = writeln!(s, "env.init = beta");
            let _ = writeln!(s, "env.init_alpha = {alpha}");
            let _ = writeln!(s, "env.init_beta = {beta}");
        }
        InitSpec::SqueezedGaussian { var, squeeze } => {
            let _ = writeln!(s, "env.init = squeezed");
            let _ = writeln!(s, "env.init_var = {var}");
            let _ = writeln!(s, "env.init_squeeze = {squeeze}");
        }
        InitSpec::TwoGaussians { var, weight } => {
            let _ = writeln!(s, "env.init = two_gaussians");
            let _ = writeln!(s, "env.init_var = {var}");
            let _ = writeln!(s, "env.init_weight = {weight}");
        }
    }
    let _ = writeln!(s, "\n# mean-field features");
    let mode = match cfg.feature_mode {
        FeatureMode::Rbf => "rbf",
        FeatureMode::Histogram => "histogram",
    };
    let _ = writeln!(s, "features.mode = {mode}");
    let _ = writeln!(s, "features.points_per_axis = {}", cfg.points_per_axis);
    let _ = writeln!(s, "features.per_axis = {}", cfg.per_axis);
    let _ = writeln!(s, "features.include_time = {}", cfg.include_time);
    let _ = writeln!(s, "\n# lower-level parametrization");
    let _ = writeln!(s, "xi.per_anchor = {}", cfg.xi_per_anchor);
    let _ = writeln!(s, "\n# ppo");
    let _ = writeln!(s, "ppo.discount = {}", cfg.ppo.discount);
    let _ = writeln!(s, "ppo.gae_lambda = {}", cfg.ppo.gae_lambda);
    let _ = writeln!(s, "ppo.kl_coeff = {}", cfg.ppo.kl_coeff);
    let _ = writeln!(s, "ppo.clip = {}", cfg.ppo.clip);
    let _ = writeln!(s, "ppo.lr = {}", cfg.ppo.lr);
    let _ = writeln!(s, "ppo.batch_len = {}", cfg.ppo.batch_len);
    let _ = writeln!(s, "ppo.minibatch_len = {}", cfg.ppo.minibatch_len);
    let _ = writeln!(s, "ppo.n_epochs = {}", cfg.ppo.n_epochs);
    let _ = writeln!(s, "ppo.iterations = {}", cfg.ppo.iterations);
    let _ = writeln!(s, "ppo.num_parallel_envs = {}", cfg.ppo.num_parallel_envs);
    let hidden: Vec<String> = cfg.ppo.hidden.iter().map(|h| h.to_string()).collect();
    let _ = writeln!(s, "ppo.hidden = {}", hidden.join(","));
    let _ = writeln!(s, "ppo.seed = {}", cfg.ppo.seed);
    let _ = writeln!(s, "ppo.checkpoint_every = {}", cfg.ppo.checkpoint_every);
    let _ = writeln!(s, "\n# run metadata");
    let _ = writeln!(s, "run.out_dir = {}", cfg.out_dir.display());
    let _ = writeln!(s, "run.eval_episodes = {}", cfg.eval_episodes);
    let agents: Vec<String> = cfg.eval_agents.iter().map(|n| n.to_string()).collect();
    let _ = writeln!(s, "run.eval_agents = {}", agents.join(","));
    let _ = writeln!(s, "\n# chaos sweep");
    let ns: Vec<String> = cfg.chaos_ns.iter().map(|n| n.to_string()).collect();
    let _ = writeln!(s, "chaos.ns = {}", ns.join(","));
    let _ = writeln!(s, "chaos.horizon = {}", cfg.chaos_horizon);
    let _ = writeln!(s, "chaos.replications = {}", cfg.chaos_replications);
    let _ = writeln!(s, "\n# scaling bench");
    let dims: Vec<String> = cfg.bench_dims.iter().map(|d| d.to_string()).collect();
    let _ = writeln!(s, "bench.dims = {}", dims.join(","));
    let _ = writeln!(s, "bench.agents = {}", cfg.bench_agents);
    let _ = writeln!(s, "bench.batch_len = {}", cfg.bench_batch_len);
    let _ = writeln!(s, "bench.reps = {}", cfg.bench_reps);
    s
}

// ─── Tests ─────────────────────────────────────────────────────────────────
