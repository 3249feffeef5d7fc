//! Centralized-training PPO for the swarm environments.
//!
//! One training iteration collects a batch of `batch_len` environment steps
//! from several parallel environment instances (each with its own derived
//! RNG stream), computes GAE advantages, then runs `n_epochs` passes of
//! clipped-surrogate updates with an analytic KL(old‖new) penalty:
//!
//! ```text
//! L_policy = -mean( min(ρ·A, clip(ρ, 1-ε, 1+ε)·A) ) + kl_coeff · KL(π_old ‖ π_new)
//! ρ        = exp(logprob_new - logprob_old)
//! ```
//!
//! The critic regresses on GAE value targets with plain MSE.  Every stage is
//! a pure function of (config, seed): rollout partitions merge in partition
//! order, minibatch shuffles come from a derived stream, and the update
//! phase is a single-threaded writer over the two networks.

use std::io::{Read as IoRead, Write as IoWrite};
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use thiserror::Error;

use crate::envs::{self, EnvConfig};
use crate::features::{featurize, FeatureSpec};
use crate::nn::{Activation, Adam, Mlp, GaussianHead};
use crate::policies::{lower_from_xi, upper_act, upper_greedy, XiSpec};
use crate::rng::{derive_rng, stream};

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("invalid ppo config: {0}")]
    InvalidConfig(String),
    #[error("non-finite value in {0}; parameters restored")]
    NonFinite(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

// ─── Configuration ─────────────────────────────────────────────────────────

/// PPO hyperparameters.  Defaults follow the reference training setup:
/// γ = 0.99, GAE λ = 1, KL coefficient 0.03, clip 0.2, learning rate 5e-5,
/// batch 4000 split into minibatches of 1000, 5 epochs per iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoConfig {
    pub discount: f64,
    pub gae_lambda: f64,
    pub kl_coeff: f64,
    pub clip: f64,
    pub lr: f64,
    pub batch_len: usize,
    pub minibatch_len: usize,
    pub n_epochs: usize,
    pub iterations: usize,
    pub num_parallel_envs: usize,
    pub hidden: Vec<usize>,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            discount: 0.99,
            gae_lambda: 1.0,
            kl_coeff: 0.03,
            clip: 0.2,
            lr: 5e-5,
            batch_len: 4000,
            minibatch_len: 1000,
            n_epochs: 5,
            iterations: 100,
            num_parallel_envs: 4,
            hidden: vec![256, 256],
            seed: 0,
            checkpoint_every: 25,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        let bad = |msg: String| Err(PpoError::InvalidConfig(msg));
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return bad(format!("discount {} outside (0,1)", self.discount));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad(format!("gae_lambda {} outside [0,1]", self.gae_lambda));
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad(format!("clip {} outside (0,1)", self.clip));
        }
        if self.batch_len == 0 || self.minibatch_len == 0 || self.batch_len % self.minibatch_len != 0 {
            return bad(format!("minibatch_len {} must divide batch_len {}", self.minibatch_len, self.batch_len));
        }
        if self.num_parallel_envs == 0 || self.batch_len % self.num_parallel_envs != 0 {
            return bad(format!(
                "num_parallel_envs {} must divide batch_len {}",
                self.num_parallel_envs, self.batch_len
            ));
        }
        if !(self.lr > 0.0) || !(self.kl_coeff >= 0.0) {
            return bad("lr must be positive and kl_coeff non-negative".into());
        }
        if self.n_epochs == 0 {
            return bad("n_epochs must be at least 1".into());
        }
        Ok(())
    }
}

// ─── Rollout collection ────────────────────────────────────────────────────

/// One batch of on-policy experience.  Rows are steps; partitions are
/// contiguous slices of equal length, one per environment instance.
/// `mean_old` / `log_std_old` hold the behavior head per step (log-stds
/// post-clamp) so the update can evaluate KL(old ‖ new) analytically.
#[derive(Debug, Clone)]
pub struct RolloutBatch {
    pub features: Array2<f64>,
    pub xi_raw: Array2<f64>,
    pub mean_old: Array2<f64>,
    pub log_std_old: Array2<f64>,
    pub logprob_old: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub values_old: Vec<f64>,
    /// Critic value of the state following each partition's last step.
    pub bootstrap_values: Vec<f64>,
    pub steps_per_partition: usize,
    /// Undiscounted returns of episodes completed inside this batch.
    pub episode_returns: Vec<f64>,
    /// Polar order of the terminal state of each completed episode
    /// (heading models; empty for Aggregation).
    pub final_rs: Vec<f64>,
    /// Undiscounted reward sums of the partitions' unfinished tail episodes.
    pub partial_returns: Vec<f64>,
}

struct Partition {
    features: Vec<f64>,
    xi_raw: Vec<f64>,
    mean_old: Vec<f64>,
    log_std_old: Vec<f64>,
    logprob_old: Vec<f64>,
    rewards: Vec<f64>,
    dones: Vec<bool>,
    values_old: Vec<f64>,
    bootstrap: f64,
    episode_returns: Vec<f64>,
    final_rs: Vec<f64>,
    partial_return: f64,
}

/// Collects `cfg.batch_len` steps of experience.  Partitions run in
/// parallel; each derives its RNG from (seed, ROLLOUT, iteration, index)
/// and resets its environment at the start of the batch, so the batch is a
/// pure function of (networks, configs, seed, iteration).
pub fn collect_rollouts(
    env_cfg: &EnvConfig,
    feat_spec: &FeatureSpec,
    xi_spec: &XiSpec,
    policy: &Mlp,
    critic: &Mlp,
    cfg: &PpoConfig,
    iteration: u64,
) -> Result<RolloutBatch, PpoError> {
    let steps_per = cfg.batch_len / cfg.num_parallel_envs;
    let feat_dim = feat_spec.feature_count();
    let xi_dim = xi_spec.xi_dim();
    let k = xi_dim;
    if policy.input_dim() != feat_dim || policy.output_dim() != 2 * k {
        return Err(PpoError::Shape(format!(
            "policy net is {}→{}, features/ξ need {}→{}",
            policy.input_dim(),
            policy.output_dim(),
            feat_dim,
            2 * k
        )));
    }
    if critic.input_dim() != feat_dim || critic.output_dim() != 1 {
        return Err(PpoError::Shape("critic must map features to one value".into()));
    }

    let parts: Vec<Partition> = (0..cfg.num_parallel_envs)
        .into_par_iter()
        .map(|p| {
            let mut rng = derive_rng(cfg.seed, &[stream::ROLLOUT, iteration, p as u64]);
            let n = env_cfg.n_agents;
            let obs_dim = env_cfg.obs_dim();
            let act_dim = env_cfg.action_dim();
            let mut part = Partition {
                features: Vec::with_capacity(steps_per * feat_dim),
                xi_raw: Vec::with_capacity(steps_per * k),
                mean_old: Vec::with_capacity(steps_per * k),
                log_std_old: Vec::with_capacity(steps_per * k),
                logprob_old: Vec::with_capacity(steps_per),
                rewards: Vec::with_capacity(steps_per),
                dones: Vec::with_capacity(steps_per),
                values_old: Vec::with_capacity(steps_per),
                bootstrap: 0.0,
                episode_returns: Vec::new(),
                final_rs: Vec::new(),
                partial_return: 0.0,
            };
            let mut state = envs::reset(env_cfg, &mut rng);
            let mut obs = envs::observe(&state, env_cfg, &mut rng);
            let mut episode_return = 0.0;
            let mut actions = vec![0.0; n * act_dim];
            for _ in 0..steps_per {
                let f = featurize(&state, feat_spec);
                let raw = policy.forward_one(&f);
                let head = GaussianHead::from_raw(&raw);
                let upper = upper_act(policy, &f, &mut rng);
                let value = critic.forward_one(&f)[0];
                let lower = lower_from_xi(&upper.xi, xi_spec).expect("clamped ξ is inside Ξ");
                for i in 0..n {
                    let (row, _) = lower.act(&obs[i * obs_dim..(i + 1) * obs_dim], &mut rng);
                    actions[i * act_dim..(i + 1) * act_dim].copy_from_slice(&row);
                }
                let out = envs::step(&state, &actions, env_cfg, &mut rng);
                episode_return += out.reward;
                part.features.extend_from_slice(&f);
                part.xi_raw.extend_from_slice(&upper.xi_raw);
                part.mean_old.extend_from_slice(&head.mean);
                part.log_std_old.extend_from_slice(&head.log_std);
                part.logprob_old.push(upper.logprob);
                part.rewards.push(out.reward);
                part.dones.push(out.done);
                part.values_old.push(value);
                if out.done {
                    part.episode_returns.push(episode_return);
                    if env_cfg.has_headings() {
                        part.final_rs.push(envs::polar_order(&out.state));
                    }
                    episode_return = 0.0;
                    state = envs::reset(env_cfg, &mut rng);
                    obs = envs::observe(&state, env_cfg, &mut rng);
                } else {
                    state = out.state;
                    obs = out.observations;
                }
            }
            part.partial_return = episode_return;
            let f_next = featurize(&state, feat_spec);
            part.bootstrap = critic.forward_one(&f_next)[0];
            part
        })
        .collect();

    // merge partitions in index order
    let total = cfg.batch_len;
    let mut batch = RolloutBatch {
        features: Array2::zeros((total, feat_dim)),
        xi_raw: Array2::zeros((total, k)),
        mean_old: Array2::zeros((total, k)),
        log_std_old: Array2::zeros((total, k)),
        logprob_old: Vec::with_capacity(total),
        rewards: Vec::with_capacity(total),
        dones: Vec::with_capacity(total),
        values_old: Vec::with_capacity(total),
        bootstrap_values: Vec::with_capacity(cfg.num_parallel_envs),
        steps_per_partition: steps_per,
        episode_returns: Vec::new(),
        final_rs: Vec::new(),
        partial_returns: Vec::new(),
    };
    for (p, part) in parts.into_iter().enumerate() {
        let base = p * steps_per;
        for t in 0..steps_per {
            for j in 0..feat_dim {
                batch.features[[base + t, j]] = part.features[t * feat_dim + j];
            }
            for j in 0..k {
                batch.xi_raw[[base + t, j]] = part.xi_raw[t * k + j];
                batch.mean_old[[base + t, j]] = part.mean_old[t * k + j];
                batch.log_std_old[[base + t, j]] = part.log_std_old[t * k + j];
            }
        }
        batch.logprob_old.extend(part.logprob_old);
        batch.rewards.extend(part.rewards);
        batch.dones.extend(part.dones);
        batch.values_old.extend(part.values_old);
        batch.bootstrap_values.push(part.bootstrap);
        batch.episode_returns.extend(part.episode_returns);
        batch.final_rs.extend(part.final_rs);
        batch.partial_returns.push(part.partial_return);
    }
    for (what, ok) in [
        ("rewards", batch.rewards.iter().all(|v| v.is_finite())),
        ("features", batch.features.iter().all(|v| v.is_finite())),
        ("log-probs", batch.logprob_old.iter().all(|v| v.is_finite())),
    ] {
        if !ok {
            return Err(PpoError::NonFinite(format!("rollout {what}")));
        }
    }
    Ok(batch)
}

// ─── Advantage estimation ──────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct GaeResult {
    /// Raw GAE advantages.
    pub raw: Vec<f64>,
    /// Critic regression targets, A_raw + V.
    pub targets: Vec<f64>,
    /// Batch-normalized advantages used by the surrogate loss.
    pub normalized: Vec<f64>,
}

/// δ_t = r_t + γ·V_{t+1}·(1−done_t) − V_t accumulated backwards with factor
/// γλ inside each partition; terminals zero the bootstrap, partition ends
/// bootstrap from the recorded post-batch value.  Targets use the raw
/// advantages; the normalized copy has batch mean 0 and standard deviation 1.
pub fn compute_gae(batch: &RolloutBatch, discount: f64, lambda: f64) -> GaeResult {
    let total = batch.rewards.len();
    let steps = batch.steps_per_partition;
    let mut raw = vec![0.0; total];
    for p in 0..total / steps {
        let (s, e) = (p * steps, (p + 1) * steps);
        let mut acc = 0.0;
        for t in (s..e).rev() {
            let next_v = if batch.dones[t] {
                0.0
            } else if t + 1 < e {
                batch.values_old[t + 1]
            } else {
                batch.bootstrap_values[p]
            };
            let delta = batch.rewards[t] + discount * next_v - batch.values_old[t];
            let carry = if batch.dones[t] || t + 1 == e { 0.0 } else { acc };
            acc = delta + discount * lambda * carry;
            raw[t] = acc;
        }
    }
    let targets: Vec<f64> = raw.iter().zip(&batch.values_old).map(|(a, v)| a + v).collect();
    let mean = raw.iter().sum::<f64>() / total as f64;
    let var = raw.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / total as f64;
    let std = var.sqrt();
    let normalized = raw.iter().map(|a| (a - mean) / (std + 1e-8)).collect();
    GaeResult { raw, targets, normalized }
}

// ─── PPO update ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Default)]
pub struct UpdateDiag {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub approx_kl: f64,
    pub clip_frac: f64,
}

/// Policy loss, gradients, and diagnostics for one minibatch, given rows of
/// (features, pre-clamp ξ, behavior log-prob/head) and advantages.  Public
/// so the surrogate's identity with the plain policy-gradient estimator can
/// be checked directly.
pub fn policy_minibatch_grad(
    policy: &Mlp,
    features: ArrayView2<f64>,
    xi_raw: ArrayView2<f64>,
    mean_old: ArrayView2<f64>,
    log_std_old: ArrayView2<f64>,
    logprob_old: &[f64],
    advantages: &[f64],
    clip: f64,
    kl_coeff: f64,
) -> (Vec<f64>, UpdateDiag) {
    let mb = features.nrows();
    let k = xi_raw.ncols();
    let (raw_out, cache) = policy.forward(features);
    let mut out_grad = Array2::zeros((mb, 2 * k));
    let mut diag = UpdateDiag::default();
    let inv = 1.0 / mb as f64;
    for s in 0..mb {
        let head = GaussianHead::from_raw(raw_out.row(s).as_slice().unwrap());
        let xi = xi_raw.row(s);
        let xi = xi.as_slice().unwrap();
        let logp_new = head.logprob(xi);
        let ratio = (logp_new - logprob_old[s]).exp();
        let a = advantages[s];
        let clipped = ratio < 1.0 - clip || ratio > 1.0 + clip;
        let surrogate = (ratio * a).min(ratio.clamp(1.0 - clip, 1.0 + clip) * a);
        // gradient flows through ρ·A only when that branch attains the min
        let pass_through = ratio * a <= ratio.clamp(1.0 - clip, 1.0 + clip) * a;
        let old = GaussianHead {
            mean: mean_old.row(s).to_vec(),
            log_std: log_std_old.row(s).to_vec(),
            clamped: vec![false; k],
        };
        let kl = old.kl_to(&head);
        diag.policy_loss += (-surrogate + kl_coeff * kl) * inv;
        diag.approx_kl += kl * inv;
        diag.clip_frac += if clipped { inv } else { 0.0 };

        let (dlp_mean, dlp_ls) = head.grad_logprob(xi);
        let (dkl_mean, dkl_ls) = old.grad_kl_wrt_new(&head);
        let mut dmean = vec![0.0; k];
        let mut dls = vec![0.0; k];
        let surr_coeff = if pass_through { -a * ratio } else { 0.0 };
        for j in 0..k {
            dmean[j] = inv * (surr_coeff * dlp_mean[j] + kl_coeff * dkl_mean[j]);
            dls[j] = inv * (surr_coeff * dlp_ls[j] + kl_coeff * dkl_ls[j]);
        }
        let row = head.raw_grad(&dmean, &dls);
        for j in 0..2 * k {
            out_grad[[s, j]] = row[j];
        }
    }
    let (grads, _) = policy.backward(&cache, out_grad.view());
    (grads.to_flat(), diag)
}

/// Critic MSE loss and flat gradient for one minibatch.
fn critic_minibatch_grad(critic: &Mlp, features: ArrayView2<f64>, targets: &[f64]) -> (Vec<f64>, f64) {
    let mb = features.nrows();
    let (values, cache) = critic.forward(features);
    let inv = 1.0 / mb as f64;
    let mut loss = 0.0;
    let mut out_grad = Array2::zeros((mb, 1));
    for s in 0..mb {
        let err = values[[s, 0]] - targets[s];
        loss += err * err * inv;
        out_grad[[s, 0]] = 2.0 * err * inv;
    }
    let (grads, _) = critic.backward(&cache, out_grad.view());
    (grads.to_flat(), loss)
}

/// Runs `n_epochs` shuffled minibatch passes over the batch, updating both
/// networks through their Adam states.  On any non-finite loss or gradient
/// the networks and optimizers roll back to their pre-update snapshots.
#[allow(clippy::too_many_arguments)]
pub fn ppo_update(
    policy: &mut Mlp,
    critic: &mut Mlp,
    opt_policy: &mut Adam,
    opt_critic: &mut Adam,
    batch: &RolloutBatch,
    gae: &GaeResult,
    cfg: &PpoConfig,
    iteration: u64,
) -> Result<UpdateDiag, PpoError> {
    let total = batch.rewards.len();
    let k = batch.xi_raw.ncols();
    let snapshot = (policy.to_flat(), critic.to_flat(), opt_policy.clone(), opt_critic.clone());
    let mut diag = UpdateDiag::default();
    let mut n_minibatches = 0.0;
    let mut failed = None;

    'epochs: for epoch in 0..cfg.n_epochs {
        let mut order: Vec<usize> = (0..total).collect();
        let mut rng = derive_rng(cfg.seed, &[stream::UPDATE_SHUFFLE, iteration, epoch as u64]);
        // Fisher–Yates driven by the derived stream
        for i in (1..total).rev() {
            let j = rand::Rng::random_range(&mut rng, 0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.minibatch_len) {
            let mb = chunk.len();
            let mut feats = Array2::zeros((mb, batch.features.ncols()));
            let mut xi = Array2::zeros((mb, k));
            let mut m_old = Array2::zeros((mb, k));
            let mut ls_old = Array2::zeros((mb, k));
            let mut lp_old = Vec::with_capacity(mb);
            let mut adv = Vec::with_capacity(mb);
            let mut tgt = Vec::with_capacity(mb);
            for (row, &idx) in chunk.iter().enumerate() {
                feats.row_mut(row).assign(&batch.features.row(idx));
                xi.row_mut(row).assign(&batch.xi_raw.row(idx));
                m_old.row_mut(row).assign(&batch.mean_old.row(idx));
                ls_old.row_mut(row).assign(&batch.log_std_old.row(idx));
                lp_old.push(batch.logprob_old[idx]);
                adv.push(gae.normalized[idx]);
                tgt.push(gae.targets[idx]);
            }
            let (pgrad, mb_diag) = policy_minibatch_grad(
                policy,
                feats.view(),
                xi.view(),
                m_old.view(),
                ls_old.view(),
                &lp_old,
                &adv,
                cfg.clip,
                cfg.kl_coeff,
            );
            let (cgrad, vloss) = critic_minibatch_grad(critic, feats.view(), &tgt);
            if !mb_diag.policy_loss.is_finite()
                || !vloss.is_finite()
                || pgrad.iter().any(|g| !g.is_finite())
                || cgrad.iter().any(|g| !g.is_finite())
            {
                failed = Some(format!("update epoch {epoch}"));
                break 'epochs;
            }
            let mut pflat = policy.to_flat();
            opt_policy.step(&mut pflat, &pgrad);
            policy.set_from_flat(&pflat);
            let mut cflat = critic.to_flat();
            opt_critic.step(&mut cflat, &cgrad);
            critic.set_from_flat(&cflat);

            diag.policy_loss += mb_diag.policy_loss;
            diag.value_loss += vloss;
            diag.approx_kl += mb_diag.approx_kl;
            diag.clip_frac += mb_diag.clip_frac;
            n_minibatches += 1.0;
        }
    }
    if let Some(what) = failed {
        policy.set_from_flat(&snapshot.0);
        critic.set_from_flat(&snapshot.1);
        *opt_policy = snapshot.2;
        *opt_critic = snapshot.3;
        return Err(PpoError::NonFinite(what));
    }
    diag.policy_loss /= n_minibatches;
    diag.value_loss /= n_minibatches;
    diag.approx_kl /= n_minibatches;
    diag.clip_frac /= n_minibatches;
    Ok(diag)
}

// ─── Training loop ─────────────────────────────────────────────────────────

/// One metrics row per iteration; the CSV the driver writes mirrors these
/// fields in order.
#[derive(Debug, Clone)]
pub struct IterationMetrics {
    pub iteration: u64,
    pub env_steps: u64,
    pub mean_return: f64,
    pub mean_final_r: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub approx_kl: f64,
    pub clip_frac: f64,
    pub wall_time_s: f64,
}

/// Policy, critic, and optimizer state for one training run.
pub struct Trainer {
    pub env_cfg: EnvConfig,
    pub feat_spec: FeatureSpec,
    pub xi_spec: XiSpec,
    pub cfg: PpoConfig,
    pub policy: Mlp,
    pub critic: Mlp,
    pub opt_policy: Adam,
    pub opt_critic: Adam,
    pub iteration: u64,
}

impl Trainer {
    pub fn new(env_cfg: EnvConfig, feat_spec: FeatureSpec, xi_spec: XiSpec, cfg: PpoConfig) -> Result<Self, PpoError> {
        cfg.validate()?;
        let feat_dim = feat_spec.feature_count();
        let xi_dim = xi_spec.xi_dim();
        let mut policy_sizes = vec![feat_dim];
        policy_sizes.extend_from_slice(&cfg.hidden);
        policy_sizes.push(2 * xi_dim);
        let mut critic_sizes = vec![feat_dim];
        critic_sizes.extend_from_slice(&cfg.hidden);
        critic_sizes.push(1);
        let policy = Mlp::new(
            &policy_sizes,
            1.0,
            0.01,
            Activation::Tanh,
            &mut derive_rng(cfg.seed, &[stream::INIT_POLICY]),
        );
        let critic = Mlp::new(
            &critic_sizes,
            1.0,
            1.0,
            Activation::Tanh,
            &mut derive_rng(cfg.seed, &[stream::INIT_CRITIC]),
        );
        let opt_policy = Adam::new(policy.param_count(), cfg.lr);
        let opt_critic = Adam::new(critic.param_count(), cfg.lr);
        Ok(Trainer { env_cfg, feat_spec, xi_spec, cfg, policy, critic, opt_policy, opt_critic, iteration: 0 })
    }

    /// Collect → GAE → update, once.  Returns the metrics row.
    pub fn train_iteration(&mut self) -> Result<IterationMetrics, PpoError> {
        let start = Instant::now();
        let batch = collect_rollouts(
            &self.env_cfg,
            &self.feat_spec,
            &self.xi_spec,
            &self.policy,
            &self.critic,
            &self.cfg,
            self.iteration,
        )?;
        let gae = compute_gae(&batch, self.cfg.discount, self.cfg.gae_lambda);
        let diag = ppo_update(
            &mut self.policy,
            &mut self.critic,
            &mut self.opt_policy,
            &mut self.opt_critic,
            &batch,
            &gae,
            &self.cfg,
            self.iteration,
        )?;
        // when a batch is shorter than one episode, fall back to the running
        // partial sums so the metric stays informative in tiny test configs
        let mean_return = if batch.episode_returns.is_empty() {
            mean(&batch.partial_returns)
        } else {
            mean(&batch.episode_returns)
        };
        let mean_final_r = if batch.final_rs.is_empty() { 0.0 } else { mean(&batch.final_rs) };
        self.iteration += 1;
        Ok(IterationMetrics {
            iteration: self.iteration,
            env_steps: self.iteration * self.cfg.batch_len as u64,
            mean_return,
            mean_final_r,
            policy_loss: diag.policy_loss,
            value_loss: diag.value_loss,
            approx_kl: diag.approx_kl,
            clip_frac: diag.clip_frac,
            wall_time_s: start.elapsed().as_secs_f64(),
        })
    }

    /// Runs `n` iterations, returning one metrics row each.
    pub fn train(&mut self, n: usize) -> Result<Vec<IterationMetrics>, PpoError> {
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            rows.push(self.train_iteration()?);
        }
        Ok(rows)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

// ─── Evaluation ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct EpisodeStats {
    pub episode_return: f64,
    pub final_r: f64,
}

/// How the upper level picks ξ during evaluation.
pub enum EvalMode<'a> {
    /// Closed loop: featurize the state each step; greedy uses the Gaussian
    /// mean, otherwise ξ is sampled.
    Closed { greedy: bool },
    /// Open loop: replay a precomputed ξ_t sequence, ignoring the state.
    ReplaySequence { xi: &'a [Vec<f64>] },
    /// Open loop: compute ξ greedily once at t = 0, keep Λ(ξ₀) for the whole
    /// episode.
    FreezeT0,
}

/// Runs evaluation episodes with per-episode RNG streams (parallel over
/// episodes, deterministic given the seed).  Returns one stats row per
/// episode: undiscounted return and terminal polar order (0 for models
/// without headings).
pub fn evaluate(
    policy: &Mlp,
    env_cfg: &EnvConfig,
    feat_spec: &FeatureSpec,
    xi_spec: &XiSpec,
    mode: &EvalMode,
    episodes: usize,
    seed: u64,
) -> Result<Vec<EpisodeStats>, PpoError> {
    if let EvalMode::ReplaySequence { xi } = mode {
        if xi.len() != env_cfg.horizon {
            return Err(PpoError::Shape(format!(
                "replay sequence has {} steps, horizon is {}",
                xi.len(),
                env_cfg.horizon
            )));
        }
        if xi.iter().any(|x| x.len() != xi_spec.xi_dim()) {
            return Err(PpoError::Shape("replay ξ width differs from the parametrization".into()));
        }
    }
    (0..episodes)
        .into_par_iter()
        .map(|ep| {
            let mut rng = derive_rng(seed, &[stream::EVAL, ep as u64]);
            let n = env_cfg.n_agents;
            let obs_dim = env_cfg.obs_dim();
            let act_dim = env_cfg.action_dim();
            let mut state = envs::reset(env_cfg, &mut rng);
            let mut obs = envs::observe(&state, env_cfg, &mut rng);
            let mut actions = vec![0.0; n * act_dim];
            let mut episode_return = 0.0;
            let mut frozen = None;
            loop {
                let lower = match mode {
                    EvalMode::Closed { greedy } => {
                        let f = featurize(&state, feat_spec);
                        let xi = if *greedy {
                            upper_greedy(policy, &f)
                        } else {
                            upper_act(policy, &f, &mut rng).xi
                        };
                        lower_from_xi(&xi, xi_spec).expect("clamped ξ is inside Ξ")
                    }
                    EvalMode::ReplaySequence { xi } => {
                        lower_from_xi(&xi[state.time], xi_spec).map_err(|e| PpoError::Shape(e.to_string()))?
                    }
                    EvalMode::FreezeT0 => {
                        if frozen.is_none() {
                            let f = featurize(&state, feat_spec);
                            let xi = upper_greedy(policy, &f);
                            frozen = Some(lower_from_xi(&xi, xi_spec).expect("clamped ξ is inside Ξ"));
                        }
                        frozen.clone().unwrap()
                    }
                };
                for i in 0..n {
                    let (row, _) = lower.act(&obs[i * obs_dim..(i + 1) * obs_dim], &mut rng);
                    actions[i * act_dim..(i + 1) * act_dim].copy_from_slice(&row);
                }
                let out = envs::step(&state, &actions, env_cfg, &mut rng);
                episode_return += out.reward;
                if out.done {
                    let final_r = if env_cfg.has_headings() { envs::polar_order(&out.state) } else { 0.0 };
                    return Ok(EpisodeStats { episode_return, final_r });
                }
                state = out.state;
                obs = out.observations;
            }
        })
        .collect()
}

/// Records the greedy closed-loop ξ_t sequence of a single episode — the
/// input the replay evaluation mode feeds back without observing the state.
pub fn record_xi_sequence(
    policy: &Mlp,
    env_cfg: &EnvConfig,
    feat_spec: &FeatureSpec,
    xi_spec: &XiSpec,
    seed: u64,
) -> Vec<Vec<f64>> {
    let mut rng = derive_rng(seed, &[stream::OPENLOOP]);
    let n = env_cfg.n_agents;
    let obs_dim = env_cfg.obs_dim();
    let act_dim = env_cfg.action_dim();
    let mut state = envs::reset(env_cfg, &mut rng);
    let mut obs = envs::observe(&state, env_cfg, &mut rng);
    let mut actions = vec![0.0; n * act_dim];
    let mut sequence = Vec::with_capacity(env_cfg.horizon);
    loop {
        let f = featurize(&state, feat_spec);
        let xi = upper_greedy(policy, &f);
        sequence.push(xi.clone());
        let lower = lower_from_xi(&xi, xi_spec).expect("clamped ξ is inside Ξ");
        for i in 0..n {
            let (row, _) = lower.act(&obs[i * obs_dim..(i + 1) * obs_dim], &mut rng);
            actions[i * act_dim..(i + 1) * act_dim].copy_from_slice(&row);
        }
        let out = envs::step(&state, &actions, env_cfg, &mut rng);
        if out.done {
            return sequence;
        }
        state = out.state;
        obs = out.observations;
    }
}

// ─── Checkpoints ───────────────────────────────────────────────────────────

const CHECKPOINT_MAGIC: &[u8; 4] = b"MFCK";
const CHECKPOINT_VERSION: u32 = 1;

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_f64s(buf: &mut Vec<u8>, vs: &[f64]) {
    push_u64(buf, vs.len() as u64);
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn push_sizes(buf: &mut Vec<u8>, sizes: &[usize]) {
    push_u32(buf, sizes.len() as u32);
    for &s in sizes {
        push_u64(buf, s as u64);
    }
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PpoError> {
        if self.pos + n > self.data.len() {
            return Err(PpoError::Corrupt("unexpected end of file".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, PpoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, PpoError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self) -> Result<Vec<f64>, PpoError> {
        let n = self.u64()? as usize;
        let bytes = self.take(n * 8)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn sizes(&mut self) -> Result<Vec<usize>, PpoError> {
        let n = self.u32()? as usize;
        (0..n).map(|_| Ok(self.u64()? as usize)).collect()
    }
}

fn push_adam(buf: &mut Vec<u8>, adam: &Adam) {
    push_u64(buf, adam.t);
    push_f64s(buf, &adam.m);
    push_f64s(buf, &adam.v);
}

fn read_adam(cur: &mut Cursor, lr: f64) -> Result<Adam, PpoError> {
    let t = cur.u64()?;
    let m = cur.f64s()?;
    let v = cur.f64s()?;
    if m.len() != v.len() {
        return Err(PpoError::Corrupt("optimizer moment lengths differ".into()));
    }
    let mut adam = Adam::new(m.len(), lr);
    adam.t = t;
    adam.m = m;
    adam.v = v;
    Ok(adam)
}

impl Trainer {
    /// Serializes networks, optimizer moments, iteration counter, and seed.
    /// Little-endian 64-bit floats; round-trips bit-exactly.
    pub fn save_checkpoint(&self, path: &Path) -> Result<(), PpoError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        push_u32(&mut buf, CHECKPOINT_VERSION);
        push_sizes(&mut buf, &self.policy.sizes);
        push_sizes(&mut buf, &self.critic.sizes);
        push_f64s(&mut buf, &self.policy.to_flat());
        push_f64s(&mut buf, &self.critic.to_flat());
        push_adam(&mut buf, &self.opt_policy);
        push_adam(&mut buf, &self.opt_critic);
        push_u64(&mut buf, self.iteration);
        push_u64(&mut buf, self.cfg.seed);
        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    /// Restores a trainer from a checkpoint plus the run configuration.  The
    /// stored layer sizes must match what the configuration implies; the
    /// stored seed and iteration overwrite the config's, so resumed training
    /// continues the exact RNG schedule of the original run.
    pub fn load_checkpoint(
        path: &Path,
        env_cfg: EnvConfig,
        feat_spec: FeatureSpec,
        xi_spec: XiSpec,
        mut cfg: PpoConfig,
    ) -> Result<Self, PpoError> {
        let mut data = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut data)?;
        let mut cur = Cursor { data: &data, pos: 0 };
        if cur.take(4)? != CHECKPOINT_MAGIC {
            return Err(PpoError::Corrupt("bad magic".into()));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(PpoError::Corrupt(format!("unsupported version {version}")));
        }
        let policy_sizes = cur.sizes()?;
        let critic_sizes = cur.sizes()?;
        let policy_flat = cur.f64s()?;
        let critic_flat = cur.f64s()?;
        let opt_policy = read_adam(&mut cur, cfg.lr)?;
        let opt_critic = read_adam(&mut cur, cfg.lr)?;
        let iteration = cur.u64()?;
        let seed = cur.u64()?;
        cfg.seed = seed;
        let mut trainer = Trainer::new(env_cfg, feat_spec, xi_spec, cfg)?;
        if trainer.policy.sizes != policy_sizes || trainer.critic.sizes != critic_sizes {
            return Err(PpoError::Shape(format!(
                "checkpoint nets {policy_sizes:?}/{critic_sizes:?} do not fit configured {:?}/{:?}",
                trainer.policy.sizes, trainer.critic.sizes
            )));
        }
        if policy_flat.len() != trainer.policy.param_count()
            || critic_flat.len() != trainer.critic.param_count()
            || opt_policy.m.len() != policy_flat.len()
            || opt_critic.m.len() != critic_flat.len()
        {
            return Err(PpoError::Corrupt("parameter counts disagree with layer sizes".into()));
        }
        trainer.policy.set_from_flat(&policy_flat);
        trainer.critic.set_from_flat(&critic_flat);
        trainer.opt_policy = opt_policy;
        trainer.opt_critic = opt_critic;
        trainer.iteration = iteration;
        Ok(trainer)
    }
}

// ─── Tests ─────────────────────────────────────────────────────────────────
