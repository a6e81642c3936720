use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gfn::{
    total_variation, train_policy_with, trajectory_log_prob, FilterSchedule, FnReward, GfnConfig, GfnInstance,
    GfnStepLog, RewardWeights, TabularPolicy,
};
use crate::numerics::log_sum_exp;
use crate::tasks::Token;

/// Largest trajectory space `enumerate_posterior` will visit.
pub const ENUMERATION_LIMIT: u128 = 1_000_000;

/// Exact posterior p*(Z) proportional to exp(log_reward(Z)) over every
/// sequence of actions `1..=vocab` of length `0..=max_len`.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    /// In [`TabularPolicy::state_index`] order.
    pub trajectories: Vec<Vec<Token>>,
    pub probs: Vec<f64>,
}

fn space_size(vocab: usize, max_len: usize) -> u128 {
    let mut total: u128 = 0;
    let mut layer: u128 = 1;
    for _ in 0..=max_len {
        total = total.saturating_add(layer);
        layer = layer.saturating_mul(vocab as u128);
    }
    total
}

pub fn enumerate_trajectories(vocab: usize, max_len: usize) -> Result<Vec<Vec<Token>>> {
    if vocab == 0 || vocab >= u16::MAX as usize {
        return Err(Error::arg(format!("vocabulary {vocab} out of range")));
    }
    let size = space_size(vocab, max_len);
    if size > ENUMERATION_LIMIT {
        return Err(Error::SpaceTooLarge { size, limit: ENUMERATION_LIMIT });
    }
    let mut out = vec![Vec::new()];
    let mut layer = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::with_capacity(layer.len() * vocab);
        for p in &layer {
            for a in 1..=vocab {
                let mut q: Vec<Token> = p.clone();
                q.push(Token(a as u16));
                next.push(q);
            }
        }
        out.extend(next.iter().cloned());
        layer = next;
    }
    Ok(out)
}

pub fn enumerate_posterior<F: Fn(&[Token]) -> f64>(log_reward: F, vocab: usize, max_len: usize) -> Result<Posterior> {
    let trajectories = enumerate_trajectories(vocab, max_len)?;
    let logs: Vec<f64> = trajectories.iter().map(|z| log_reward(z)).collect();
    if let Some(i) = logs.iter().position(|l| !l.is_finite()) {
        return Err(Error::Numeric(format!("non-finite log reward for trajectory {i}")));
    }
    let z = log_sum_exp(&logs);
    let probs = logs.iter().map(|l| (l - z).exp()).collect();
    Ok(Posterior { trajectories, probs })
}

/// Exact terminal distribution of a tabular policy in enumeration order.
pub fn policy_distribution(policy: &TabularPolicy) -> Result<Vec<f64>> {
    enumerate_trajectories(policy.vocab(), policy.max_len())?
        .iter()
        .map(|z| Ok(trajectory_log_prob(policy, &(), z, policy.max_len())?.exp()))
        .collect()
}

/// log R(Z) = sum over positions t of w[t][a_t]; the empty sequence has
/// reward exp(0).
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalReward {
    pub weights: Vec<Vec<f64>>,
}

impl PositionalReward {
    pub fn random(vocab: usize, max_len: usize, scale: f64, seed: u64) -> Result<Self> {
        let normal = Normal::new(0.0, scale).map_err(|e| Error::arg(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..max_len).map(|_| (0..vocab).map(|_| normal.sample(&mut rng)).collect()).collect();
        Ok(PositionalReward { weights })
    }

    pub fn log_reward(&self, z: &[Token]) -> f64 {
        z.iter().enumerate().map(|(t, a)| self.weights[t][a.id() - 1]).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub vocab: usize,
    pub max_len: usize,
    pub reward_scale: f64,
    pub seed: u64,
    pub max_steps: usize,
    pub check_every: usize,
    pub tv_target: f64,
    pub m: usize,
    pub learning_rate: f64,
    pub kappa: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            vocab: 6,
            max_len: 3,
            reward_scale: 1.0,
            seed: 0,
            max_steps: 20_000,
            check_every: 100,
            tv_target: 0.05,
            m: 16,
            learning_rate: 0.05,
            kappa: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TvPoint {
    pub step: usize,
    pub tv: f64,
}

#[derive(Clone, Debug)]
pub struct OracleOutcome {
    pub posterior: Posterior,
    pub learned: Vec<f64>,
    pub tv: f64,
    pub steps: usize,
    pub converged: bool,
    pub history: Vec<TvPoint>,
    pub log: Vec<GfnStepLog>,
}

/// Trains a tabular policy with the full stage-III loop against an exact
/// posterior and tracks total variation. Every prefix is an anchor and the
/// filter threshold is low enough to accept every candidate, so the sampler
/// is unbiased.
pub fn run_oracle(cfg: &OracleConfig) -> Result<OracleOutcome> {
    if cfg.check_every == 0 {
        return Err(Error::Config("check_every must be positive".into()));
    }
    let reward = PositionalReward::random(cfg.vocab, cfg.max_len, cfg.reward_scale, cfg.seed)?;
    let posterior = enumerate_posterior(|z| reward.log_reward(z), cfg.vocab, cfg.max_len)?;
    let gfn = GfnConfig {
        weights: RewardWeights { alpha: 1.0, gamma: 0.0 },
        lambda: 1,
        delta: FilterSchedule::Constant(1e-300),
        kappa: cfg.kappa,
        m: cfg.m,
        temperature: 1.0,
        learning_rate: cfg.learning_rate,
        weight_decay: 0.0,
        steps: cfg.max_steps,
        seed: cfg.seed,
        max_len: cfg.max_len,
        clip_norm: 0.0,
        ..GfnConfig::default()
    };
    let mut policy = TabularPolicy::new(cfg.vocab, cfg.max_len)?;
    let instances = [GfnInstance { ctx: (), y: 0, z_ref: Vec::new() }];
    let fr = FnReward(|z: &[Token]| reward.log_reward(z));
    let mut history = Vec::new();
    let mut failure = None;
    let run = train_policy_with(&gfn, &mut policy, &fr, &instances, |pol, row| {
        if (row.step + 1) % cfg.check_every != 0 {
            return true;
        }
        match policy_distribution(pol).and_then(|q| total_variation(&q, &posterior.probs)) {
            Ok(tv) => {
                history.push(TvPoint { step: row.step + 1, tv });
                tv > cfg.tv_target
            }
            Err(e) => {
                failure = Some(e);
                false
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    let learned = policy_distribution(&policy)?;
    let tv = total_variation(&learned, &posterior.probs)?;
    Ok(OracleOutcome { posterior, learned, tv, steps: run.log.len(), converged: tv <= cfg.tv_target, history, log: run.log })
}
