//! The six subcommands behind the `mfc` binary.
//!
//! Each command is a plain function over a [`RunConfig`](crate::config::RunConfig)
//! so integration tests can call them in-process; `main` only parses flags
//! and maps [`CliError`] to an exit code.  Every output is a CSV file under
//! `run.out_dir` with a documented header, and every command is
//! deterministic given (config, seed).

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use mfc_core::envs::{self, EnvConfig};
use mfc_core::features::{featurize, FeatureMode, FeatureSpec};
use mfc_core::limit;
use mfc_core::policies::{lower_from_xi, upper_greedy, XiSpec};
use mfc_core::ppo::{evaluate, record_xi_sequence, EpisodeStats, EvalMode, PpoConfig, PpoError, Trainer};
use mfc_core::rng::{derive_rng, stream};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};

// ─── Errors and exit codes ─────────────────────────────────────────────────

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad or inconsistent configuration → exit code 2.
    #[error("{0}")]
    Config(String),
    /// Failure while running: IO, corrupt checkpoint, diverged training → 3.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn ensure_out_dir(cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| runtime(format!("cannot create {}: {e}", cfg.out_dir.display())))
}

fn write_out(cfg: &RunConfig, name: &str, contents: &str) -> Result<(), CliError> {
    let path = cfg.out_dir.join(name);
    fs::write(&path, contents).map_err(|e| runtime(format!("writing {}: {e}", path.display())))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn load_trainer(cfg: &RunConfig, checkpoint: &Path) -> Result<Trainer, CliError> {
    let feat = cfg.feat_spec()?;
    let xi = cfg.xi_spec();
    Trainer::load_checkpoint(checkpoint, cfg.env.clone(), feat, xi, cfg.ppo.clone())
        .map_err(|e| runtime(format!("checkpoint {}: {e}", checkpoint.display())))
}

fn mean_and_ci95(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

// ─── train ─────────────────────────────────────────────────────────────────

pub const METRICS_HEADER: &str =
    "iteration,env_steps,mean_return,mean_final_R,policy_loss,value_loss,approx_kl,clip_frac,wall_time_s";

/// Trains until `ppo.iterations`, streaming one metrics row per iteration and
/// checkpointing every `ppo.checkpoint_every` iterations plus at the end.
/// With `resume`, training continues from the stored iteration and RNG
/// schedule; the metrics file then starts at the resumed iteration.
pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<(), CliError> {
    cfg.validate()?;
    ensure_out_dir(cfg)?;
    let mut trainer = match resume {
        Some(path) => load_trainer(cfg, path)?,
        None => Trainer::new(cfg.env.clone(), cfg.feat_spec()?, cfg.xi_spec(), cfg.ppo.clone())
            .map_err(|e| CliError::Config(e.to_string()))?,
    };
    let metrics_path = cfg.out_dir.join("metrics.csv");
    let mut metrics = fs::File::create(&metrics_path)
        .map_err(|e| runtime(format!("creating {}: {e}", metrics_path.display())))?;
    writeln!(metrics, "{METRICS_HEADER}").map_err(runtime)?;

    let checkpoint_path = cfg.out_dir.join("checkpoint.bin");
    let total = cfg.ppo.iterations as u64;
    while trainer.iteration < total {
        let m = trainer.train_iteration().map_err(|e| match e {
            PpoError::NonFinite(msg) => runtime(format!("training diverged: {msg}")),
            other => runtime(other),
        })?;
        let row = format!(
            "{},{},{},{},{},{},{},{},{}",
            m.iteration,
            m.env_steps,
            m.mean_return,
            m.mean_final_r,
            m.policy_loss,
            m.value_loss,
            m.approx_kl,
            m.clip_frac,
            m.wall_time_s
        );
        writeln!(metrics, "{row}").map_err(runtime)?;
        metrics.flush().map_err(runtime)?;
        println!("iter {:>4}  return {:>10.3}  final_R {:.3}  kl {:.5}", m.iteration, m.mean_return, m.mean_final_r, m.approx_kl);
        if cfg.ppo.checkpoint_every > 0 && trainer.iteration % cfg.ppo.checkpoint_every as u64 == 0
        {
            trainer.save_checkpoint(&checkpoint_path).map_err(runtime)?;
        }
    }
    trainer.save_checkpoint(&checkpoint_path).map_err(runtime)?;
    println!("wrote {}", metrics_path.display());
    println!("wrote {}", checkpoint_path.display());
    Ok(())
}

// ─── eval ──────────────────────────────────────────────────────────────────

pub const EVAL_HEADER: &str = "episode,return,final_r";
pub const EVAL_SUMMARY_HEADER: &str =
    "n_agents,episodes,mean_return,ci95_return,mean_final_r,ci95_final_r";

fn stats_csv(stats: &[EpisodeStats]) -> String {
    let mut s = String::from(EVAL_HEADER);
    s.push('\n');
    for (ep, st) in stats.iter().enumerate() {
        s.push_str(&format!("{ep},{},{}\n", st.episode_return, st.final_r));
    }
    let (mr, _) = mean_and_ci95(&stats.iter().map(|s| s.episode_return).collect::<Vec<_>>());
    let (mf, _) = mean_and_ci95(&stats.iter().map(|s| s.final_r).collect::<Vec<_>>());
    s.push_str(&format!("summary,{mr},{mf}\n"));
    s
}

/// Greedy closed-loop evaluation of a trained policy at each population size
/// in `run.eval_agents`.  Per size: `eval_N{N}.csv` with one row per episode
/// plus a summary row; across sizes: `eval_summary.csv` with means and 95%
/// confidence intervals.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<(), CliError> {
    cfg.validate()?;
    ensure_out_dir(cfg)?;
    let trainer = load_trainer(cfg, checkpoint)?;
    let feat = cfg.feat_spec()?;
    let xi = cfg.xi_spec();
    let mut summary = String::from(EVAL_SUMMARY_HEADER);
    summary.push('\n');
    for &n in &cfg.eval_agents {
        let env = EnvConfig { n_agents: n, ..cfg.env.clone() };
        env.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let stats = evaluate(
            &trainer.policy,
            &env,
            &feat,
            &xi,
            &EvalMode::Closed { greedy: true },
            cfg.eval_episodes,
            cfg.ppo.seed,
        )
        .map_err(runtime)?;
        write_out(cfg, &format!("eval_N{n}.csv"), &stats_csv(&stats))?;
        let returns: Vec<f64> = stats.iter().map(|s| s.episode_return).collect();
        let finals: Vec<f64> = stats.iter().map(|s| s.final_r).collect();
        let (mr, cr) = mean_and_ci95(&returns);
        let (mf, cf) = mean_and_ci95(&finals);
        summary.push_str(&format!("{n},{},{mr},{cr},{mf},{cf}\n", cfg.eval_episodes));
        println!("N = {n:>6}: return {mr:.3} ± {cr:.3}, final R {mf:.3} ± {cf:.3}");
    }
    write_out(cfg, "eval_summary.csv", &summary)
}

// ─── openloop ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpenLoopMode {
    /// Replay the ξ_t sequence recorded from one greedy closed-loop episode.
    ReplaySequence,
    /// Apply the t = 0 greedy lower-level policy for the whole episode.
    FreezeT0,
}

impl OpenLoopMode {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        match s {
            "replay_sequence" => Ok(OpenLoopMode::ReplaySequence),
            "freeze_t0" => Ok(OpenLoopMode::FreezeT0),
            _ => Err(CliError::Config(format!(
                "mode `{s}` (replay_sequence|freeze_t0)"
            ))),
        }
    }

    fn name(self) -> &'static str {
        match self {
            OpenLoopMode::ReplaySequence => "replay_sequence",
            OpenLoopMode::FreezeT0 => "freeze_t0",
        }
    }
}

pub const OPENLOOP_HEADER: &str = "mode,episodes,mean_return,mean_final_r";

/// Compares closed-loop greedy control against an open-loop variant that
/// ignores observations of the population, writing `openloop.csv` with one
/// row per mode and a `gap` row (closed minus open).
pub fn cmd_openloop(cfg: &RunConfig, checkpoint: &Path, mode: OpenLoopMode) -> Result<(), CliError> {
    cfg.validate()?;
    ensure_out_dir(cfg)?;
    let trainer = load_trainer(cfg, checkpoint)?;
    let feat = cfg.feat_spec()?;
    let xi = cfg.xi_spec();
    let run = |m: &EvalMode| {
        evaluate(&trainer.policy, &cfg.env, &feat, &xi, m, cfg.eval_episodes, cfg.ppo.seed)
            .map_err(runtime)
    };
    let closed = run(&EvalMode::Closed { greedy: true })?;
    let xi_seq;
    let open = match mode {
        OpenLoopMode::ReplaySequence => {
            xi_seq = record_xi_sequence(&trainer.policy, &cfg.env, &feat, &xi, cfg.ppo.seed);
            run(&EvalMode::ReplaySequence { xi: &xi_seq })?
        }
        OpenLoopMode::FreezeT0 => run(&EvalMode::FreezeT0)?,
    };
    let row = |name: &str, stats: &[EpisodeStats]| {
        let (mr, _) = mean_and_ci95(&stats.iter().map(|s| s.episode_return).collect::<Vec<_>>());
        let (mf, _) = mean_and_ci95(&stats.iter().map(|s| s.final_r).collect::<Vec<_>>());
        (mr, mf, format!("{name},{},{mr},{mf}\n", cfg.eval_episodes))
    };
    let (cr, cf, closed_row) = row("closed_loop", &closed);
    let (or, of, open_row) = row(mode.name(), &open);
    let mut s = String::from(OPENLOOP_HEADER);
    s.push('\n');
    s.push_str(&closed_row);
    s.push_str(&open_row);
    s.push_str(&format!("gap,{},{},{}\n", cfg.eval_episodes, cr - or, cf - of));
    println!("closed final R {cf:.3} vs {} {of:.3}", mode.name());
    write_out(cfg, "openloop.csv", &s)
}

// ─── chaos ─────────────────────────────────────────────────────────────────

/// Propagation-of-chaos sweep on the bundled finite toy system: simulates the
/// N-agent system against its mean-field limit for each population size in
/// `chaos.ns` and writes per-(N, t) deviations to `chaos.csv`.
pub fn cmd_chaos(cfg: &RunConfig) -> Result<(), CliError> {
    if cfg.chaos_ns.is_empty() || cfg.chaos_replications == 0 {
        return Err(CliError::Config("chaos needs agent counts and replications".into()));
    }
    if !cfg.chaos_ns.windows(2).all(|w| w[0] < w[1]) {
        return Err(CliError::Config("chaos.ns must be strictly ascending".into()));
    }
    ensure_out_dir(cfg)?;
    let sys = limit::FiniteSystem::bundled_toy();
    let pis = limit::toy_policy_sequence(cfg.chaos_horizon);
    let rows = limit::chaos_sweep(&sys, &pis, &cfg.chaos_ns, cfg.chaos_replications, cfg.ppo.seed);
    let slope = limit::chaos_slope(&rows);
    println!("log-log W1 slope across N: {slope:.3} (−0.5 expected)");
    write_out(cfg, "chaos.csv", &limit::chaos_rows_to_csv(&rows))
}

// ─── bench ─────────────────────────────────────────────────────────────────

pub const BENCH_HEADER: &str = "d,mode,features,mean_step_s,std_step_s";

/// Times full training steps (rollout collection, advantage estimation, and
/// the PPO update) for the aggregation task in each `bench.dims` dimension,
/// contrasting per-axis RBF features against full joint histograms.  The
/// feature count is the policy network's input width, so this measures how
/// the representation scales with d.
pub fn cmd_bench(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.validate()?;
    if cfg.bench_reps == 0 || cfg.bench_batch_len < 2 {
        return Err(CliError::Config("bench needs reps >= 1 and batch_len >= 2".into()));
    }
    ensure_out_dir(cfg)?;
    let mut s = String::from(BENCH_HEADER);
    s.push('\n');
    for &d in &cfg.bench_dims {
        for (mode_name, fmode, per_axis) in
            [("rbf_per_axis", FeatureMode::Rbf, true), ("histogram", FeatureMode::Histogram, false)]
        {
            let env = EnvConfig { n_agents: cfg.bench_agents, ..EnvConfig::aggregation_box(d) };
            let feat = FeatureSpec::for_env(&env, fmode, cfg.points_per_axis, per_axis, false)
                .map_err(|e| CliError::Config(e.to_string()))?;
            let xi = XiSpec::for_env(&env, cfg.xi_per_anchor);
            let ppo = PpoConfig {
                batch_len: cfg.bench_batch_len,
                minibatch_len: cfg.bench_batch_len / 2,
                n_epochs: 1,
                iterations: cfg.bench_reps,
                num_parallel_envs: 1,
                hidden: cfg.ppo.hidden.clone(),
                seed: cfg.ppo.seed,
                ..PpoConfig::default()
            };
            let mut trainer = Trainer::new(env, feat, xi, ppo)
                .map_err(|e| CliError::Config(e.to_string()))?;
            let mut step_times = Vec::with_capacity(cfg.bench_reps);
            for _ in 0..cfg.bench_reps {
                let start = Instant::now();
                trainer.train_iteration().map_err(runtime)?;
                step_times.push(start.elapsed().as_secs_f64() / cfg.bench_batch_len as f64);
            }
            let n = step_times.len() as f64;
            let mean = step_times.iter().sum::<f64>() / n;
            let std = if step_times.len() < 2 {
                0.0
            } else {
                (step_times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            };
            let features = trainer.feat_spec.feature_count();
            println!("d = {d}  {mode_name:<12} {features:>5} features  {mean:.2e} s/step");
            s.push_str(&format!("{d},{mode_name},{features},{mean},{std}\n"));
        }
    }
    write_out(cfg, "bench.csv", &s)
}

// ─── export-frames ─────────────────────────────────────────────────────────

/// Rolls out one greedy closed-loop episode (the same trajectory as
/// evaluation episode 0) and writes per-agent frames for plotting: positions,
/// heading, the population's polar order, and the step reward.  On curved
/// surfaces the 3-D embedding of each position is appended as X,Y,Z columns.
pub fn cmd_export_frames(cfg: &RunConfig, checkpoint: &Path) -> Result<(), CliError> {
    cfg.validate()?;
    ensure_out_dir(cfg)?;
    let trainer = load_trainer(cfg, checkpoint)?;
    let feat = cfg.feat_spec()?;
    let xi_spec = cfg.xi_spec();
    let env = &cfg.env;
    let manifold = env.manifold;
    let embeds = manifold.embed3d(&vec![0.5; env.dim()]).is_some();

    let mut s = String::from("t,agent_id,px,py,phi,R,reward");
    if embeds {
        s.push_str(",X,Y,Z");
    }
    s.push('\n');

    // Mirrors the draw order of evaluation episode 0 exactly.
    let mut rng = derive_rng(cfg.ppo.seed, &[stream::EVAL, 0]);
    let n = env.n_agents;
    let obs_dim = env.obs_dim();
    let act_dim = env.action_dim();
    let mut state = envs::reset(env, &mut rng);
    let mut obs = envs::observe(&state, env, &mut rng);
    let mut actions = vec![0.0; n * act_dim];
    let frame = |state: &envs::SwarmState, reward: f64, s: &mut String| {
        let r = envs::polar_order(state);
        for i in 0..n {
            let p = state.pos(i);
            let phi = if state.headings.is_empty() { 0.0 } else { state.headings[i] };
            s.push_str(&format!("{},{i},{},{},{phi},{r},{reward}", state.time, p[0], p[1]));
            if embeds {
                let [x, y, z] = manifold.embed3d(p).expect("surface embeds");
                s.push_str(&format!(",{x},{y},{z}"));
            }
            s.push('\n');
        }
    };
    loop {
        let f = featurize(&state, &feat);
        let lower = lower_from_xi(&upper_greedy(&trainer.policy, &f), &xi_spec)
            .expect("clamped ξ is inside Ξ");
        for i in 0..n {
            let (row, _) = lower.act(&obs[i * obs_dim..(i + 1) * obs_dim], &mut rng);
            actions[i * act_dim..(i + 1) * act_dim].copy_from_slice(&row);
        }
        let out = envs::step(&state, &actions, env, &mut rng);
        frame(&state, out.reward, &mut s);
        if out.done {
            frame(&out.state, 0.0, &mut s);
            break;
        }
        state = out.state;
        obs = out.observations;
    }
    write_out(cfg, "frames.csv", &s)
}
