//! PPO over parallel assembly environments with a two-stage curriculum.
//!
//! Stage [`Stage::LocalParts`] resets each episode with a uniform number of
//! pieces already at ground truth; [`Stage::Global`] always starts empty. The
//! switch happens once, when the per-update mean reward plateaus.

use std::collections::VecDeque;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::env::{Action, Env, NUM_PIECES};
use crate::policy::{Adam, Architecture, Input, LossTerms, PolicyNet};
use crate::targetgen::{generate, GenConfig, GenMode, TargetObject};

/// Training hyperparameters. Unknown keys in a config file are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub num_envs: usize,
    /// Episodes each environment runs per update.
    pub episodes_per_env: usize,
    pub lr: f64,
    pub clip_eps: f64,
    pub gamma: f64,
    pub epochs_per_update: usize,
    /// Samples per gradient step.
    pub minibatch: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub max_grad_norm: f64,
    pub plateau_window: usize,
    pub plateau_delta: f64,
    pub total_updates: usize,
    pub seed: u64,
    /// Stage-1 episodes end after a single placement.
    pub stage1_single_step: bool,
    /// Switch stages on plateau. When false training stays in stage 1.
    pub auto_advance: bool,
    /// Force the switch after this many stage-1 updates.
    pub stage1_max_updates: Option<usize>,
    /// Fraction of training targets made by gravity clustering.
    pub gravity_fraction: f64,
    /// Train on this one generated target instead of fresh ones.
    pub fixed_target_seed: Option<u64>,
    /// Override the stage-dependent pre-assembled count.
    pub fixed_pre_assembled: Option<usize>,
    /// Checkpoint period in updates; the final update is always saved.
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            num_envs: 16,
            episodes_per_env: 1,
            lr: 2e-4,
            clip_eps: 0.2,
            gamma: 0.99,
            epochs_per_update: 4,
            minibatch: 32,
            entropy_coef: 0.01,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            plateau_window: 50,
            plateau_delta: 0.01,
            total_updates: 3000,
            seed: 0,
            stage1_single_step: false,
            auto_advance: true,
            stage1_max_updates: None,
            gravity_fraction: 0.0,
            fixed_target_seed: None,
            fixed_pre_assembled: None,
            checkpoint_every: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config: {0}")]
    Parse(String),
    #[error("config: invalid {key}: {reason}")]
    Invalid { key: &'static str, reason: &'static str },
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let c: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.message().to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key, reason| Err(ConfigError::Invalid { key, reason });
        if !(self.lr > 0.0) {
            return bad("lr", "must be > 0");
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip_eps", "must be in (0, 1)");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma", "must be in (0, 1]");
        }
        if self.num_envs == 0 {
            return bad("num_envs", "must be >= 1");
        }
        if self.episodes_per_env == 0 {
            return bad("episodes_per_env", "must be >= 1");
        }
        if self.epochs_per_update == 0 {
            return bad("epochs_per_update", "must be >= 1");
        }
        if self.minibatch == 0 {
            return bad("minibatch", "must be >= 1");
        }
        if self.plateau_window == 0 {
            return bad("plateau_window", "must be >= 1");
        }
        if !(self.plateau_delta >= 0.0) {
            return bad("plateau_delta", "must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.gravity_fraction) {
            return bad("gravity_fraction", "must be in [0, 1]");
        }
        if self.fixed_pre_assembled.is_some_and(|k| k >= NUM_PIECES) {
            return bad("fixed_pre_assembled", "must be in 0..=6");
        }
        if self.checkpoint_every == Some(0) {
            return bad("checkpoint_every", "must be >= 1");
        }
        if !(self.entropy_coef >= 0.0 && self.value_coef >= 0.0 && self.max_grad_norm >= 0.0) {
            return bad("entropy_coef", "coefficients must be >= 0");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    LocalParts,
    Global,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::LocalParts => "local_parts",
            Stage::Global => "global",
        })
    }
}

/// Stage plus the recent reward history used for plateau detection.
#[derive(Clone, Debug)]
pub struct Curriculum {
    stage: Stage,
    window: usize,
    delta: f64,
    history: VecDeque<f64>,
    stage1_updates: usize,
    max_stage1: Option<usize>,
    auto: bool,
}

impl Curriculum {
    pub fn new(window: usize, delta: f64) -> Self {
        Self { stage: Stage::LocalParts, window, delta, history: VecDeque::new(), stage1_updates: 0, max_stage1: None, auto: true }
    }

    pub fn from_config(c: &TrainConfig) -> Self {
        Self { max_stage1: c.stage1_max_updates, auto: c.auto_advance, ..Self::new(c.plateau_window, c.plateau_delta) }
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    /// Records one update's mean reward; returns true if this update switched
    /// the stage.
    pub fn record(&mut self, mean_reward: f64) -> bool {
        if self.stage == Stage::Global {
            return false;
        }
        self.stage1_updates += 1;
        self.history.push_back(mean_reward);
        if self.history.len() > 2 * self.window {
            self.history.pop_front();
        }
        let forced = self.max_stage1.is_some_and(|m| self.stage1_updates >= m);
        if forced || (self.auto && self.plateaued()) {
            self.stage = Stage::Global;
            return true;
        }
        false
    }

    /// Best of the last `W` updates against best of the `W` before them.
    pub fn plateaued(&self) -> bool {
        let w = self.window;
        if self.history.len() < 2 * w {
            return false;
        }
        let best = |it: &mut dyn Iterator<Item = &f64>| it.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let prev = best(&mut self.history.iter().take(w));
        let recent = best(&mut self.history.iter().skip(w));
        let gain = recent - prev;
        gain <= 0.0 || gain < self.delta * prev
    }
}

/// One transition as seen by the update.
#[derive(Clone, Debug)]
pub struct Transition {
    pub input: Input,
    pub action: Action,
    pub logp: f32,
    pub value: f32,
    pub reward: f64,
    pub ret: f64,
}

#[derive(Clone, Debug)]
pub struct Episode {
    pub pre_assembled: usize,
    pub transitions: Vec<Transition>,
    pub rela: f64,
}

/// Per-episode reset parameters, drawn up front so rollouts can run in any
/// order.
#[derive(Clone, Copy, Debug)]
struct EpisodeSpec {
    target_seed: u64,
    gravity: bool,
    pre_assembled: usize,
    single_step: bool,
    action_seed: u64,
}

fn make_target(spec: &EpisodeSpec) -> Arc<TargetObject> {
    let mode = if spec.gravity { GenMode::GravityCluster } else { GenMode::RandomPlace };
    Arc::new(generate(&GenConfig::new(mode, spec.target_seed)).expect("generator succeeds within its rejection budget"))
}

fn run_episode(net: &PolicyNet<f32>, spec: &EpisodeSpec, gamma: f64, fixed: Option<&Arc<TargetObject>>) -> Episode {
    let target = fixed.cloned().unwrap_or_else(|| make_target(spec));
    let mut env = Env::new(target, spec.pre_assembled, spec.target_seed).expect("pre_assembled in range");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.action_seed);
    let mut obs = env.observation();
    let mut transitions = Vec::new();
    loop {
        let input = Input::from_observation(&obs);
        let (dist, value) = net.forward(&input);
        let (action, logp) = dist.sample(&mut rng);
        let r = env.step(action).expect("episode not finished");
        transitions.push(Transition { input, action, logp, value, reward: r.reward, ret: 0.0 });
        obs = r.observation;
        if r.done || spec.single_step {
            break;
        }
    }
    let mut g = 0.0;
    for t in transitions.iter_mut().rev() {
        g = t.reward + gamma * g;
        t.ret = g;
    }
    let rela = transitions.iter().map(|t| t.reward).sum::<f64>() / transitions.len() as f64;
    Episode { pre_assembled: spec.pre_assembled, transitions, rela }
}

/// Rollout driver: owns the sampling stream for resets.
pub struct Rollouts {
    config: TrainConfig,
    rng: ChaCha8Rng,
    fixed: Option<Arc<TargetObject>>,
}

impl Rollouts {
    pub fn new(config: &TrainConfig) -> Self {
        let fixed = config.fixed_target_seed.map(|s| make_target(&EpisodeSpec { target_seed: s, gravity: false, pre_assembled: 0, single_step: false, action_seed: 0 }));
        Self { config: config.clone(), rng: ChaCha8Rng::seed_from_u64(config.seed), fixed }
    }

    fn specs(&mut self, stage: Stage) -> Vec<EpisodeSpec> {
        let c = &self.config;
        let n = c.num_envs * c.episodes_per_env;
        (0..n)
            .map(|_| {
                let pre_assembled = match (c.fixed_pre_assembled, stage) {
                    (Some(k), _) => k,
                    (None, Stage::LocalParts) => self.rng.gen_range(0..NUM_PIECES),
                    (None, Stage::Global) => 0,
                };
                EpisodeSpec {
                    target_seed: self.rng.gen(),
                    gravity: self.rng.gen_bool(c.gravity_fraction),
                    pre_assembled,
                    single_step: c.stage1_single_step && stage == Stage::LocalParts,
                    action_seed: self.rng.gen(),
                }
            })
            .collect()
    }

    /// Runs `num_envs × episodes_per_env` complete episodes.
    pub fn collect(&mut self, net: &PolicyNet<f32>, stage: Stage) -> Vec<Episode> {
        let specs = self.specs(stage);
        let c = &self.config;
        let fixed = self.fixed.as_ref();
        specs.par_iter().map(|s| run_episode(net, s, c.gamma, fixed)).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_frac: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("non-finite loss at epoch {epoch}, minibatch {minibatch}: policy {policy}, value {value}, entropy {entropy}")]
    NonFiniteLoss { epoch: usize, minibatch: usize, policy: f64, value: f64, entropy: f64 },
    #[error("empty batch")]
    EmptyBatch,
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] crate::policy::CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-sample data fixed for the whole update.
struct Prepared<'a> {
    t: &'a Transition,
    adv: f32,
}

/// Clipped-surrogate PPO update. `parallel` enables an unordered gradient
/// reduction.
pub fn ppo_update(
    net: &mut PolicyNet<f32>,
    adam: &mut Adam<f32>,
    batch: &[&Transition],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    parallel: bool,
) -> Result<UpdateStats, PpoError> {
    if batch.is_empty() {
        return Err(PpoError::EmptyBatch);
    }
    let raw: Vec<f64> = batch.iter().map(|t| t.ret - t.value as f64).collect();
    let n = raw.len() as f64;
    let mean = raw.iter().sum::<f64>() / n;
    let var = raw.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let adv: Vec<f32> = if raw.len() > 1 && var >= 1e-8 {
        raw.iter().map(|a| ((a - mean) / var.sqrt()) as f32).collect()
    } else {
        raw.iter().map(|&a| a as f32).collect()
    };
    let prepared: Vec<Prepared> = batch.iter().zip(&adv).map(|(t, &adv)| Prepared { t, adv }).collect();

    let eps = config.clip_eps as f32;
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut totals = UpdateStats::default();
    let mut count = 0usize;
    let mut steps = 0usize;
    for epoch in 0..config.epochs_per_update {
        order.shuffle(rng);
        for (mb, chunk) in order.chunks(config.minibatch).enumerate() {
            let m = chunk.len() as f32;
            let per_sample = |p: &Prepared, g: &mut crate::policy::Params<f32>| {
                let mut s = [0f64; 5];
                net.accumulate_with(
                    &p.t.input,
                    p.t.action,
                    |dist, value| {
                        let logp = dist.log_prob(p.t.action);
                        let ratio = (logp - p.t.logp).exp();
                        let clipped = (p.adv > 0.0 && ratio > 1.0 + eps) || (p.adv < 0.0 && ratio < 1.0 - eps);
                        let surrogate = (ratio * p.adv).min(ratio.clamp(1.0 - eps, 1.0 + eps) * p.adv);
                        s = [
                            -surrogate as f64,
                            0.5 * (value as f64 - p.t.ret).powi(2),
                            dist.entropy() as f64,
                            (p.t.logp - logp) as f64,
                            clipped as u8 as f64,
                        ];
                        LossTerms {
                            logp_weight: if clipped { 0.0 } else { p.adv * ratio / m },
                            value_weight: config.value_coef as f32 / m,
                            value_target: p.t.ret as f32,
                            entropy_weight: config.entropy_coef as f32 / m,
                        }
                    },
                    g,
                );
                s
            };
            let sum5 = |a: [f64; 5], b: [f64; 5]| std::array::from_fn(|i| a[i] + b[i]);
            let (mut grads, s) = if parallel {
                chunk
                    .par_iter()
                    .fold(
                        || (net.params().zeros_like(), [0f64; 5]),
                        |(mut g, acc), &i| {
                            let s = per_sample(&prepared[i], &mut g);
                            (g, sum5(acc, s))
                        },
                    )
                    .reduce(
                        || (net.params().zeros_like(), [0f64; 5]),
                        |(mut a, sa), (b, sb)| {
                            a.add_assign(&b);
                            (a, sum5(sa, sb))
                        },
                    )
            } else {
                let mut g = net.params().zeros_like();
                let mut acc = [0f64; 5];
                for &i in chunk {
                    acc = sum5(acc, per_sample(&prepared[i], &mut g));
                }
                (g, acc)
            };
            let mf = chunk.len() as f64;
            if s.iter().any(|v| !v.is_finite()) || grads.iter().any(|g| !g.is_finite()) {
                return Err(PpoError::NonFiniteLoss { epoch, minibatch: mb, policy: s[0] / mf, value: s[1] / mf, entropy: s[2] / mf });
            }
            let norm = grads.norm() as f64;
            if config.max_grad_norm > 0.0 && norm > config.max_grad_norm {
                grads.scale((config.max_grad_norm / norm) as f32);
            }
            adam.step(net.params_mut(), &grads);
            totals.policy_loss += s[0];
            totals.value_loss += s[1];
            totals.entropy += s[2];
            totals.approx_kl += s[3];
            totals.clip_frac += s[4];
            totals.grad_norm += norm;
            count += chunk.len();
            steps += 1;
        }
    }
    let c = count as f64;
    Ok(UpdateStats {
        policy_loss: totals.policy_loss / c,
        value_loss: totals.value_loss / c,
        entropy: totals.entropy / c,
        approx_kl: totals.approx_kl / c,
        clip_frac: totals.clip_frac / c,
        grad_norm: totals.grad_norm / steps as f64,
    })
}

/// One row of the learning curve.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub update: usize,
    pub stage: String,
    pub stage_switch: bool,
    pub episodes: usize,
    pub mean_reward: f64,
    pub mean_rela: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_frac: f64,
}

pub const CSV_HEADER: &str = "update,stage,stage_switch,episodes,mean_reward,mean_rela,policy_loss,value_loss,entropy,approx_kl,clip_frac";

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.update,
            self.stage,
            self.stage_switch as u8,
            self.episodes,
            self.mean_reward,
            self.mean_rela,
            self.policy_loss,
            self.value_loss,
            self.entropy,
            self.approx_kl,
            self.clip_frac
        )
    }
}

pub struct TrainOutcome {
    pub net: PolicyNet<f32>,
    pub log: Vec<LogRow>,
    /// Update index (1-based) at which the stage switched.
    pub stage_switch: Option<usize>,
    pub checkpoints: Vec<PathBuf>,
}

/// Where training writes `train_log.csv`, `config.toml` and checkpoints.
pub struct TrainOutput<'a> {
    pub dir: &'a Path,
}

pub fn checkpoint_name(update: usize) -> String {
    format!("ckpt_{update:06}.bin")
}

/// Runs the full training loop. `deterministic` keeps every reduction in a
/// fixed order so the parameter trajectory is reproducible.
pub fn train(
    config: &TrainConfig,
    output: Option<TrainOutput>,
    deterministic: bool,
    mut progress: impl FnMut(&LogRow),
) -> Result<TrainOutcome, PpoError> {
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_1417);
    let mut net = PolicyNet::<f32>::new(Architecture::standard(), &mut init_rng);
    let mut adam = Adam::new(net.params(), config.lr as f32);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut rollouts = Rollouts::new(config);
    let mut curriculum = Curriculum::from_config(config);

    let mut csv = match &output {
        Some(o) => {
            fs::create_dir_all(o.dir)?;
            fs::write(o.dir.join("config.toml"), config.to_toml())?;
            let mut f = std::io::BufWriter::new(fs::File::create(o.dir.join("train_log.csv"))?);
            writeln!(f, "{CSV_HEADER}")?;
            Some(f)
        }
        None => None,
    };

    let mut log = Vec::with_capacity(config.total_updates);
    let mut stage_switch = None;
    let mut checkpoints = Vec::new();
    for update in 1..=config.total_updates {
        let stage = curriculum.stage();
        let episodes = rollouts.collect(&net, stage);
        let batch: Vec<&Transition> = episodes.iter().flat_map(|e| &e.transitions).collect();
        let mean_reward = batch.iter().map(|t| t.reward).sum::<f64>() / batch.len() as f64;
        let mean_rela = episodes.iter().map(|e| e.rela).sum::<f64>() / episodes.len() as f64;
        let stats = ppo_update(&mut net, &mut adam, &batch, config, &mut shuffle_rng, !deterministic)?;
        let switched = curriculum.record(mean_reward);
        if switched {
            stage_switch = Some(update);
        }
        let row = LogRow {
            update,
            stage: stage.to_string(),
            stage_switch: switched,
            episodes: episodes.len(),
            mean_reward,
            mean_rela,
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            approx_kl: stats.approx_kl,
            clip_frac: stats.clip_frac,
        };
        if let Some(f) = csv.as_mut() {
            writeln!(f, "{}", row.to_csv())?;
            f.flush()?;
        }
        progress(&row);
        log.push(row);
        let periodic = config.checkpoint_every.is_some_and(|k| update % k == 0);
        if let Some(o) = &output {
            if periodic || update == config.total_updates {
                let path = o.dir.join(checkpoint_name(update));
                net.save(std::io::BufWriter::new(fs::File::create(&path)?))?;
                checkpoints.push(path);
            }
        }
    }
    Ok(TrainOutcome { net, log, stage_switch, checkpoints })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::ConvSpec;

    #[test]
    fn config_defaults_and_validation() {
        let c = TrainConfig::default();
        assert_eq!((c.num_envs, c.lr, c.clip_eps, c.gamma, c.epochs_per_update), (16, 2e-4, 0.2, 0.99, 4));
        assert_eq!((c.entropy_coef, c.value_coef, c.plateau_window, c.plateau_delta), (0.01, 0.5, 50, 0.01));
        let parsed = TrainConfig::from_toml("num_envs = 2\ntotal_updates = 10\n").unwrap();
        assert_eq!((parsed.num_envs, parsed.total_updates, parsed.lr), (2, 10, 2e-4));
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
        let err = TrainConfig::from_toml("learning_rate = 0.1\n").unwrap_err().to_string();
        assert!(err.contains("learning_rate"), "{err}");
        assert!(matches!(TrainConfig::from_toml("lr = 0.0\n"), Err(ConfigError::Invalid { key: "lr", .. })));
        assert!(matches!(TrainConfig::from_toml("clip_eps = 1.0\n"), Err(ConfigError::Invalid { key: "clip_eps", .. })));
        assert!(matches!(TrainConfig::from_toml("gamma = 0.0\n"), Err(ConfigError::Invalid { key: "gamma", .. })));
        assert!(TrainConfig::from_toml("gamma = 1.0\n").is_ok());
        assert_ne!(c.hash(), parsed.hash());
    }

    /// Direct restatement of the plateau rule over a full history.
    fn first_switch(history: &[f64], w: usize, delta: f64) -> Option<usize> {
        (2 * w..=history.len()).find(|&n| {
            let prev = history[n - 2 * w..n - w].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let recent = history[n - w..n].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            recent - prev <= 0.0 || recent - prev < delta * prev
        })
    }

    fn run(history: &[f64], w: usize, delta: f64) -> Option<usize> {
        let mut c = Curriculum::new(w, delta);
        let mut at = None;
        for (i, &r) in history.iter().enumerate() {
            if c.record(r) {
                assert!(at.is_none());
                at = Some(i + 1);
            }
        }
        at
    }

    #[test]
    fn strictly_increasing_never_switches() {
        let h: Vec<f64> = (0..1000).map(|i| 0.1 + i as f64 * 0.001).collect();
        assert_eq!(run(&h, 50, 0.01), None);
    }

    #[test]
    fn constant_switches_at_two_windows() {
        let h = vec![0.3; 500];
        assert_eq!(run(&h, 50, 0.01), Some(100));
        let zeros = vec![0.0; 200];
        assert_eq!(run(&zeros, 50, 0.01), Some(100));
    }

    #[test]
    fn rising_then_flat_switches_where_rule_first_holds() {
        let mut h: Vec<f64> = (0..100).map(|i| i as f64 * 0.01).collect();
        h.extend(std::iter::repeat(0.99).take(50));
        h.extend(std::iter::repeat(0.99).take(100));
        let expect = first_switch(&h, 50, 0.01);
        assert_eq!(expect, Some(150));
        assert_eq!(run(&h, 50, 0.01), expect);
        // Still climbing slowly, but under 1% per window.
        let slow: Vec<f64> = (0..300).map(|i| 0.5 + i as f64 * 1e-5).collect();
        assert_eq!(run(&slow, 50, 0.01), first_switch(&slow, 50, 0.01));
        assert_eq!(run(&slow, 50, 0.01), Some(100));
    }

    #[test]
    fn stage_never_goes_back_and_forced_switch() {
        let mut c = Curriculum::new(2, 0.01);
        for _ in 0..4 {
            c.record(0.5);
        }
        assert_eq!(c.stage(), Stage::Global);
        for i in 0..20 {
            assert!(!c.record(i as f64));
        }
        assert_eq!(c.stage(), Stage::Global);

        let cfg = TrainConfig { stage1_max_updates: Some(3), auto_advance: false, ..TrainConfig::default() };
        let mut c = Curriculum::from_config(&cfg);
        assert!(!c.record(0.0));
        assert!(!c.record(0.0));
        assert!(c.record(0.0));
        let cfg = TrainConfig { auto_advance: false, ..TrainConfig::default() };
        let mut c = Curriculum::from_config(&cfg);
        assert!((0..500).all(|_| !c.record(0.1)));
    }

    fn uniform_net() -> PolicyNet<f32> {
        // Zero output layer: the policy is uniform whatever the trunk.
        let arch = Architecture {
            input: crate::raster::RASTER_SIZE,
            convs: vec![ConvSpec { out_channels: 1, kernel: 8, stride: 8 }],
            hidden: 1,
            heads: [60, 60, 8],
        };
        PolicyNet::new(arch, &mut ChaCha8Rng::seed_from_u64(0))
    }

    #[test]
    fn global_stage_episodes_have_seven_steps() {
        let cfg = TrainConfig { num_envs: 4, ..TrainConfig::default() };
        let mut r = Rollouts::new(&cfg);
        for e in r.collect(&uniform_net(), Stage::Global) {
            assert_eq!(e.pre_assembled, 0);
            assert_eq!(e.transitions.len(), 7);
        }
    }

    #[test]
    fn local_parts_pre_assembly_is_uniform() {
        let n = 10_000;
        let cfg = TrainConfig { num_envs: n, ..TrainConfig::default() };
        let mut r = Rollouts::new(&cfg);
        let mut counts = [0usize; 7];
        for s in r.specs(Stage::LocalParts) {
            counts[s.pre_assembled] += 1;
        }
        let e = n as f64 / 7.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        // 6 degrees of freedom, p = 0.01.
        assert!(chi2 < 16.81, "{chi2} {counts:?}");

        let cfg = TrainConfig { num_envs: 8, ..TrainConfig::default() };
        for e in Rollouts::new(&cfg).collect(&uniform_net(), Stage::LocalParts) {
            assert_eq!(e.transitions.len(), 7 - e.pre_assembled);
        }
    }

    #[test]
    fn uniform_policy_matches_random_placement_baseline() {
        let cfg = TrainConfig { num_envs: 400, fixed_pre_assembled: Some(0), ..TrainConfig::default() };
        let mut r = Rollouts::new(&cfg);
        let net = uniform_net();
        let mut rewards = Vec::new();
        for _ in 0..4 {
            for e in r.collect(&net, Stage::Global) {
                rewards.extend(e.transitions.iter().map(|t| t.reward));
            }
        }
        let policy_mean = rewards.iter().sum::<f64>() / rewards.len() as f64;

        // Independent estimate: uniformly drawn actions on fresh targets.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut sum = 0.0;
        let mut n = 0usize;
        for _ in 0..1600 {
            let t = Arc::new(generate(&GenConfig::new(GenMode::RandomPlace, rng.gen())).unwrap());
            let mut env = Env::new(t, 0, 0).unwrap();
            while !env.is_done() {
                let a = Action::new(rng.gen_range(0..60), rng.gen_range(0..60), rng.gen_range(0..8)).unwrap();
                sum += env.step(a).unwrap().reward;
                n += 1;
            }
        }
        let mc_mean = sum / n as f64;
        assert!((policy_mean - mc_mean).abs() <= 0.1 * mc_mean, "{policy_mean} vs {mc_mean}");
    }

    fn small_batch(rng: &mut ChaCha8Rng) -> (PolicyNet<f32>, Vec<Transition>) {
        let arch = Architecture {
            input: crate::raster::RASTER_SIZE,
            convs: vec![ConvSpec { out_channels: 2, kernel: 8, stride: 8 }],
            hidden: 8,
            heads: [60, 60, 8],
        };
        let mut net = PolicyNet::<f32>::new(arch, rng);
        net.params_mut().tensors.iter_mut().flatten().for_each(|x| *x += rng.gen_range(-0.05..0.05));
        let cfg = TrainConfig { num_envs: 4, ..TrainConfig::default() };
        let eps = Rollouts::new(&cfg).collect(&net, Stage::Global);
        (net, eps.into_iter().flat_map(|e| e.transitions).collect())
    }

    #[test]
    fn zero_advantages_leave_only_value_and_entropy_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (net, mut batch) = small_batch(&mut rng);
        for t in &mut batch {
            t.ret = t.value as f64;
        }
        // With every advantage zero the policy weight vanishes; the gradient is
        // then exactly the entropy gradient (value error is zero too).
        let with = |entropy: f32| {
            let mut g = net.params().zeros_like();
            for t in &batch {
                net.accumulate_with(&t.input, t.action, |_, _| LossTerms { logp_weight: 0.0, value_weight: 0.5, value_target: t.value, entropy_weight: entropy }, &mut g);
            }
            g
        };
        assert!(with(0.0).iter().all(|&x| x == 0.0));
        assert!(with(0.01).iter().any(|&x| x != 0.0));

        let mut n1 = net.clone();
        let mut adam = Adam::new(n1.params(), 2e-4);
        let cfg = TrainConfig { entropy_coef: 0.0, epochs_per_update: 1, ..TrainConfig::default() };
        let refs: Vec<&Transition> = batch.iter().collect();
        let stats = ppo_update(&mut n1, &mut adam, &refs, &cfg, &mut rng, false).unwrap();
        assert_eq!(stats.grad_norm, 0.0);
        assert_eq!(n1.params(), net.params());
    }

    #[test]
    fn unclipped_first_epoch_is_vanilla_policy_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (net, batch) = small_batch(&mut rng);
        let refs: Vec<&Transition> = batch.iter().collect();
        let cfg = TrainConfig {
            clip_eps: 0.999_999,
            epochs_per_update: 1,
            minibatch: batch.len(),
            entropy_coef: 0.0,
            value_coef: 0.0,
            max_grad_norm: 0.0,
            ..TrainConfig::default()
        };
        let mut n1 = net.clone();
        let mut adam = Adam::new(n1.params(), 1e-3);
        let stats = ppo_update(&mut n1, &mut adam, &refs, &cfg, &mut rng, false).unwrap();
        assert!(stats.approx_kl.abs() < 1e-6);
        assert_eq!(stats.clip_frac, 0.0);

        // Vanilla gradient of -mean(A · log π) with the same normalized advantages.
        let raw: Vec<f64> = batch.iter().map(|t| t.ret - t.value as f64).collect();
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        let sd = (raw.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / raw.len() as f64).sqrt();
        let m = batch.len() as f32;
        let mut g = net.params().zeros_like();
        for (t, a) in batch.iter().zip(&raw) {
            let adv = ((a - mean) / sd) as f32;
            net.accumulate_with(&t.input, t.action, |_, _| LossTerms { logp_weight: adv / m, ..LossTerms::zero() }, &mut g);
        }
        let mut n2 = net.clone();
        let mut adam2 = Adam::new(n2.params(), 1e-3);
        adam2.step(n2.params_mut(), &g);
        for (a, b) in n1.params().iter().zip(n2.params().iter()) {
            assert!((a - b).abs() < 1e-6, "{a} {b}");
        }
    }

    #[test]
    fn non_finite_loss_aborts_without_touching_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (net, mut batch) = small_batch(&mut rng);
        batch[0].ret = f64::NAN;
        let refs: Vec<&Transition> = batch.iter().collect();
        let mut n1 = net.clone();
        let mut adam = Adam::new(n1.params(), 2e-4);
        let err = ppo_update(&mut n1, &mut adam, &refs, &TrainConfig::default(), &mut rng, false).unwrap_err();
        assert!(matches!(err, PpoError::NonFiniteLoss { .. }));
        assert_eq!(n1.params(), net.params());
    }

    #[test]
    fn training_is_reproducible_and_logs_one_switch() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { num_envs: 2, total_updates: 4, stage1_max_updates: Some(2), minibatch: 8, epochs_per_update: 1, ..TrainConfig::default() };
        let a = train(&cfg, Some(TrainOutput { dir: dir.path() }), true, |_| {}).unwrap();
        let b = train(&cfg, None, true, |_| {}).unwrap();
        assert_eq!(a.net, b.net);
        assert_eq!(a.log, b.log);
        assert_eq!(a.stage_switch, Some(2));
        assert_eq!(a.log.iter().filter(|r| r.stage_switch).count(), 1);
        assert_eq!(a.log[2].stage, "global");
        assert_eq!(a.checkpoints.len(), 1);
        let csv = fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
        assert_eq!(csv.lines().count(), 5);
        let back = PolicyNet::<f32>::load(fs::File::open(&a.checkpoints[0]).unwrap(), Some(&Architecture::standard())).unwrap();
        assert_eq!(back, a.net);
    }

    /// One fixed target with six pieces already placed: a 28,800-arm bandit.
    /// Takes about 20 minutes at desk scale.
    #[test]
    #[ignore = "long smoke run"]
    fn fixed_target_bandit_reaches_high_reward() {
        let cfg = TrainConfig {
            total_updates: 2000,
            stage1_single_step: true,
            auto_advance: false,
            fixed_target_seed: Some(0),
            fixed_pre_assembled: Some(NUM_PIECES - 1),
            ..TrainConfig::default()
        };
        let out = train(&cfg, None, true, |_| {}).unwrap();
        let tail: Vec<f64> = out.log.iter().rev().take(50).map(|r| r.mean_rela).collect();
        let mean = tail.iter().sum::<f64>() / tail.len() as f64;
        assert!(mean >= 0.9, "mean reward over the last 50 updates {mean:.3}");
    }
}
