//! Stage III: GFlowNet fine-tuning of the rationale policy with densified
//! prefix rewards, reference-guided acceptance, and MAP answer selection.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax, prompt_for, sample_index, Bound, ModelInput, ModelState, Rationale};
use crate::numerics::{clip_global_norm, log_softmax, Adam, Tape, Tensor, Var};
use crate::sft::Scorer;
use crate::tasks::{Puzzle, Token};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    /// Weight of answer evidence.
    pub alpha: f64,
    /// Weight of LVIP grounding.
    pub gamma: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights { alpha: 1.0, gamma: 0.1 }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.gamma >= 0.0) || !(self.alpha + self.gamma > 0.0) {
            return Err(Error::Config(format!(
                "reward weights need alpha, gamma >= 0 and alpha + gamma > 0, got {} and {}",
                self.alpha, self.gamma
            )));
        }
        Ok(())
    }
}

/// alpha * r_ans + gamma * r_lvip.
pub fn combine_reward(w: &RewardWeights, r_ans: f64, r_lvip: f64) -> f64 {
    w.alpha * r_ans + w.gamma * r_lvip
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_ans: f64,
    pub r_lvip: f64,
    pub combined: f64,
}

/// Anchor stride lambda.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorSchedule {
    pub lambda: usize,
}

impl AnchorSchedule {
    pub fn new(lambda: usize) -> Result<Self> {
        if lambda < 1 {
            return Err(Error::arg("anchor stride must be at least 1"));
        }
        Ok(AnchorSchedule { lambda })
    }

    /// `0, lambda, 2 lambda, ...` below `n`, then `n` itself.
    pub fn anchors(&self, n: usize) -> Vec<usize> {
        let mut a: Vec<usize> = (0..n).step_by(self.lambda.max(1)).collect();
        a.push(n);
        a
    }
}

/// Piecewise-linear fill between anchor values. `anchor_values` must start
/// at 0, end at `n`, and be strictly increasing in position.
pub fn interpolate_anchors(anchor_values: &[(usize, f64)], n: usize) -> Result<Vec<f64>> {
    let first = anchor_values.first().map(|a| a.0);
    let last = anchor_values.last().map(|a| a.0);
    if first != Some(0) || last != Some(n) || anchor_values.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(Error::arg("anchors must run from 0 to n in increasing order"));
    }
    let mut out = vec![0.0; n + 1];
    for w in anchor_values.windows(2) {
        let ((t, rt), (tp, rp)) = (w[0], w[1]);
        let span = (tp - t) as f64;
        out[t] = rt;
        for i in 1..tp - t {
            out[t + i] = rt + (i as f64 / span) * (rp - rt);
        }
    }
    for &(t, r) in anchor_values {
        out[t] = r;
    }
    Ok(out)
}

/// Densified scores for one trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Densified {
    pub anchors: Vec<usize>,
    /// Reward breakdown at each anchor, aligned with `anchors`.
    pub breakdown: Vec<RewardBreakdown>,
    /// R~(tau_0..tau_n).
    pub values: Vec<f64>,
}

/// Evaluates `reward` on the anchor prefixes of `z` and interpolates between them.
pub fn densify_prefix_rewards<F>(z: &[Token], lambda: usize, mut reward: F) -> Result<Densified>
where
    F: FnMut(&[Token]) -> Result<RewardBreakdown>,
{
    let sched = AnchorSchedule::new(lambda)?;
    let anchors = sched.anchors(z.len());
    let breakdown = anchors.iter().map(|&t| reward(&z[..t])).collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(usize, f64)> = anchors.iter().zip(&breakdown).map(|(&t, b)| (t, b.combined)).collect();
    if let Some(bad) = pairs.iter().find(|p| !p.1.is_finite()) {
        return Err(Error::Numeric(format!("non-finite prefix reward {} at t={}", bad.1, bad.0)));
    }
    let values = interpolate_anchors(&pairs, z.len())?;
    Ok(Densified { anchors, breakdown, values })
}

/// Acceptance threshold delta_s per training step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterSchedule {
    Constant(f64),
    /// delta_0 + (1 - delta_0) * min(1, s / warm_steps).
    Warmup { delta0: f64, warm_steps: usize },
}

impl Default for FilterSchedule {
    fn default() -> Self {
        FilterSchedule::Warmup { delta0: 0.5, warm_steps: 200 }
    }
}

impl FilterSchedule {
    pub fn validate(&self) -> Result<()> {
        let d = match *self {
            FilterSchedule::Constant(d) => d,
            FilterSchedule::Warmup { delta0, .. } => delta0,
        };
        if !(d > 0.0 && d <= 1.0) {
            return Err(Error::Config(format!("delta must lie in (0, 1], got {d}")));
        }
        Ok(())
    }

    pub fn delta(&self, step: usize) -> f64 {
        match *self {
            FilterSchedule::Constant(d) => d,
            FilterSchedule::Warmup { delta0, warm_steps } => {
                let frac = if warm_steps == 0 { 1.0 } else { (step as f64 / warm_steps as f64).min(1.0) };
                delta0 + (1.0 - delta0) * frac
            }
        }
    }
}

/// R(Z_i) >= R(Z_ref) + log delta.
pub fn accept_rewards(r_candidate: f64, r_reference: f64, delta: f64) -> bool {
    r_candidate >= r_reference + delta.ln()
}

/// Reference-guided acceptance of `z` against `z_ref` under `reward`.
pub fn accept<P: Policy, R: PrefixReward<P>>(
    reward: &R,
    policy: &P,
    ctx: &P::Context,
    y: usize,
    z: &[Token],
    z_ref: &[Token],
    delta: f64,
) -> Result<bool> {
    let r = reward.prefix_reward(policy, ctx, y, z)?.combined;
    let r_ref = reward.prefix_reward(policy, ctx, y, z_ref)?.combined;
    Ok(accept_rewards(r, r_ref, delta))
}

/// A rationale policy whose every prefix may terminate with END.
pub trait Policy {
    type Context;

    fn params(&self) -> &[Tensor];
    fn params_mut(&mut self) -> &mut [Tensor];
    /// Indices of the tensors stage III updates.
    fn trainable(&self) -> Vec<usize>;
    /// Log-probabilities over all actions after `prefix`; column 0 is END.
    fn next_log_probs(&self, ctx: &Self::Context, prefix: &[Token]) -> Result<Vec<f64>>;
    /// Action logits (one row per prefix state `0..=n`) and log-flows (a
    /// column of `n + 1`), built on `tape` from the parameter leaves `vars`.
    fn trace(&self, tape: &mut Tape, vars: &[Var], ctx: &Self::Context, tokens: &[Token]) -> Result<(Var, Var)>;
}

/// Reward of the prefix state `(prefix, END)` for gold answer `y`.
pub trait PrefixReward<P: Policy> {
    fn prefix_reward(&self, policy: &P, ctx: &P::Context, y: usize, prefix: &[Token]) -> Result<RewardBreakdown>;
}

/// Ancestral sample from any policy; stops at END or after `max_len` tokens.
pub fn sample_trajectory<P: Policy, G: Rng + ?Sized>(
    policy: &P,
    ctx: &P::Context,
    max_len: usize,
    temperature: f64,
    rng: &mut G,
) -> Result<Rationale> {
    let mut tokens = Vec::new();
    while tokens.len() < max_len {
        let lp = policy.next_log_probs(ctx, &tokens)?;
        let t = Token(sample_index(&lp, temperature, rng)? as u16);
        if t == Token::END {
            return Ok(Rationale { tokens, terminated: true });
        }
        tokens.push(t);
    }
    Ok(Rationale { tokens, terminated: false })
}

/// log q(Z, END) with termination forced at `max_len`.
pub fn trajectory_log_prob<P: Policy>(policy: &P, ctx: &P::Context, z: &[Token], max_len: usize) -> Result<f64> {
    if z.len() > max_len {
        return Err(Error::Length { len: z.len(), max: max_len });
    }
    let mut total = 0.0;
    for t in 0..z.len() {
        let lp = policy.next_log_probs(ctx, &z[..t])?;
        total += lp.get(z[t].id()).ok_or_else(|| Error::arg(format!("token {} outside the action set", z[t])))?;
    }
    if z.len() < max_len {
        total += policy.next_log_probs(ctx, z)?[Token::END.id()];
    }
    Ok(total)
}

/// SubTB(kappa) on one trajectory from a policy trace.
pub fn subtb_from_trace(
    tape: &mut Tape,
    logits: Var,
    log_flow: Var,
    tokens: &[Token],
    log_reward: &[f64],
    max_len: usize,
    kappa: f64,
) -> Result<Var> {
    let n = tokens.len();
    if n > max_len {
        return Err(Error::Length { len: n, max: max_len });
    }
    let pf_picks: Vec<(usize, usize)> = tokens.iter().enumerate().map(|(t, z)| (t, z.id())).collect();
    let log_pf = tape.log_softmax_pick(logits, &pf_picks)?;
    let free = if n == max_len { n } else { n + 1 };
    let term_picks: Vec<(usize, usize)> = (0..free).map(|t| (t, Token::END.id())).collect();
    let log_term = if free == n + 1 {
        tape.log_softmax_pick(logits, &term_picks)?
    } else {
        // the last state can only terminate
        let forced = tape.leaf(Tensor::vector(vec![0.0]));
        if term_picks.is_empty() {
            forced
        } else {
            let free_part = tape.log_softmax_pick(logits, &term_picks)?;
            tape.concat_cols(&[free_part, forced])?
        }
    };
    tape.subtb(log_pf, log_flow, log_term, log_reward, kappa)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LvipBackbone {
    /// h_opt from the frozen stage-II copy: the reward is stationary.
    Frozen,
    /// h_opt from the live policy parameters.
    Live,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GfnConfig {
    pub weights: RewardWeights,
    pub lambda: usize,
    pub delta: FilterSchedule,
    pub kappa: f64,
    /// Candidates sampled per step.
    pub m: usize,
    pub temperature: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub seed: u64,
    pub max_len: usize,
    pub lvip_backbone: LvipBackbone,
    pub clip_norm: f64,
    /// Keep per-trajectory records for the debug dump.
    pub dump_trajectories: bool,
}

impl Default for GfnConfig {
    fn default() -> Self {
        GfnConfig {
            weights: RewardWeights::default(),
            lambda: 4,
            delta: FilterSchedule::default(),
            kappa: 0.9,
            m: 8,
            temperature: 1.0,
            learning_rate: 1e-5,
            weight_decay: 0.0,
            steps: 200,
            seed: 0,
            max_len: crate::sft::DEFAULT_MAX_RATIONALE,
            lvip_backbone: LvipBackbone::Frozen,
            clip_norm: 1.0,
            dump_trajectories: false,
        }
    }
}

impl GfnConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.delta.validate()?;
        if self.lambda < 1 {
            return Err(Error::Config("lambda must be at least 1".into()));
        }
        if !(self.kappa > 0.0) {
            return Err(Error::Config(format!("kappa must be positive, got {}", self.kappa)));
        }
        if self.m == 0 || self.max_len == 0 {
            return Err(Error::Config("m and max_len must be positive".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::Config(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) || !(self.clip_norm >= 0.0) {
            return Err(Error::Config("learning_rate must be > 0; weight_decay and clip_norm >= 0".into()));
        }
        Ok(())
    }
}

/// One training example for stage III.
#[derive(Clone, Debug)]
pub struct GfnInstance<C> {
    pub ctx: C,
    pub y: usize,
    pub z_ref: Vec<Token>,
}

/// Per-step training log row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GfnStepLog {
    pub step: usize,
    pub accept_rate: f64,
    #[serde(rename = "mean_R")]
    pub mean_r: f64,
    pub mean_r_ans: f64,
    pub mean_r_lvip: f64,
    /// Summed over accepted candidates; 0 on skipped steps.
    pub subtb_loss: f64,
    pub delta_s: f64,
    /// True when no candidate passed the filter and no update was made.
    pub skipped: bool,
}

/// Debug record of one sampled candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub step: usize,
    pub tokens: Vec<Token>,
    pub terminated: bool,
    pub accepted: bool,
    pub reward: RewardBreakdown,
    /// Present for accepted candidates only.
    pub densified: Option<Densified>,
}

#[derive(Clone, Debug, Default)]
pub struct GfnRun {
    pub log: Vec<GfnStepLog>,
    pub trajectories: Vec<TrajectoryRecord>,
}

/// The stage-III loop for any policy: sample m candidates, keep those within
/// log delta_s of the reference, densify their prefix rewards, and take one
/// SubTB step on the accepted set.
pub fn train_policy<P: Policy, R: PrefixReward<P>>(
    cfg: &GfnConfig,
    policy: &mut P,
    reward: &R,
    instances: &[GfnInstance<P::Context>],
) -> Result<GfnRun> {
    train_policy_with(cfg, policy, reward, instances, |_, _| true)
}

/// As [`train_policy`], calling `keep_going(policy, step_log)` after every
/// step; training stops early when it returns false.
pub fn train_policy_with<P: Policy, R: PrefixReward<P>, F: FnMut(&P, &GfnStepLog) -> bool>(
    cfg: &GfnConfig,
    policy: &mut P,
    reward: &R,
    instances: &[GfnInstance<P::Context>],
    mut keep_going: F,
) -> Result<GfnRun> {
    cfg.validate()?;
    if instances.is_empty() {
        return Err(Error::arg("no stage-III instances"));
    }
    let which = policy.trainable();
    let mut opt = Adam::new(cfg.learning_rate, cfg.weight_decay, which.iter().map(|&k| policy.params()[k].len()));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut run = GfnRun::default();

    for step in 0..cfg.steps {
        if step % instances.len() == 0 {
            order.shuffle(&mut rng);
        }
        let inst = &instances[order[step % instances.len()]];
        let delta = cfg.delta.delta(step);
        let mut memo: HashMap<Vec<Token>, RewardBreakdown> = HashMap::new();
        let mut reward_of = |policy: &P, prefix: &[Token]| -> Result<RewardBreakdown> {
            if let Some(r) = memo.get(prefix) {
                return Ok(*r);
            }
            let r = reward.prefix_reward(policy, &inst.ctx, inst.y, prefix)?;
            memo.insert(prefix.to_vec(), r);
            Ok(r)
        };
        let r_ref = reward_of(policy, &inst.z_ref)?.combined;

        let mut cands = Vec::with_capacity(cfg.m);
        let (mut sum_r, mut sum_ans, mut sum_lvip) = (0.0, 0.0, 0.0);
        for _ in 0..cfg.m {
            let z = sample_trajectory(policy, &inst.ctx, cfg.max_len, cfg.temperature, &mut rng)?;
            let full = reward_of(policy, &z.tokens)?;
            sum_r += full.combined;
            sum_ans += full.r_ans;
            sum_lvip += full.r_lvip;
            let ok = accept_rewards(full.combined, r_ref, delta);
            cands.push((z, full, ok));
        }
        let mut dens = Vec::new();
        for (z, _, ok) in &cands {
            dens.push(if *ok {
                Some(densify_prefix_rewards(&z.tokens, cfg.lambda, |p| reward_of(policy, p))?)
            } else {
                None
            });
        }
        let n_acc = cands.iter().filter(|c| c.2).count();
        let mf = cfg.m as f64;
        let mut row = GfnStepLog {
            step,
            accept_rate: n_acc as f64 / mf,
            mean_r: sum_r / mf,
            mean_r_ans: sum_ans / mf,
            mean_r_lvip: sum_lvip / mf,
            subtb_loss: 0.0,
            delta_s: delta,
            skipped: n_acc == 0,
        };
        if n_acc > 0 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = policy.params().iter().map(|p| tape.leaf(p.clone())).collect();
            let mut losses = Vec::with_capacity(n_acc);
            for ((z, _, _), d) in cands.iter().zip(&dens) {
                if let Some(d) = d {
                    let (logits, flow) = policy.trace(&mut tape, &vars, &inst.ctx, &z.tokens)?;
                    losses.push(subtb_from_trace(&mut tape, logits, flow, &z.tokens, &d.values, cfg.max_len, cfg.kappa)?);
                }
            }
            let total = tape.sum(&losses)?;
            row.subtb_loss = tape.value(total).item();
            if !row.subtb_loss.is_finite() {
                return Err(Error::Divergence(format!("non-finite SubTB loss at step {step}")));
            }
            let g = tape.backward(total)?;
            let mut grads: Vec<Tensor> = vars.iter().map(|&v| g.tensor(v)).collect();
            if cfg.clip_norm > 0.0 {
                clip_global_norm(&mut grads, cfg.clip_norm);
            }
            opt.step_subset(policy.params_mut(), &grads, &which);
        }
        if cfg.dump_trajectories {
            for ((z, full, ok), d) in cands.into_iter().zip(dens) {
                run.trajectories.push(TrajectoryRecord {
                    step,
                    tokens: z.tokens,
                    terminated: z.terminated,
                    accepted: ok,
                    reward: full,
                    densified: d,
                });
            }
        }
        run.log.push(row);
        if !keep_going(policy, &row) {
            break;
        }
    }
    Ok(run)
}

/// Tabular policy over an enumerable space: actions `1..=vocab` plus END,
/// one logit row and one log-flow per prefix state.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicy {
    vocab: usize,
    max_len: usize,
    params: Vec<Tensor>,
}

impl TabularPolicy {
    /// Uniform policy with zero log-flows.
    pub fn new(vocab: usize, max_len: usize) -> Result<Self> {
        if vocab == 0 || vocab + 1 > u16::MAX as usize {
            return Err(Error::arg(format!("tabular vocabulary {vocab} out of range")));
        }
        let states = Self::count_states(vocab, max_len).filter(|&s| s <= 10_000_000).ok_or_else(|| {
            Error::arg(format!("tabular policy with vocab {vocab} and max_len {max_len} is too large"))
        })?;
        Ok(TabularPolicy {
            vocab,
            max_len,
            params: vec![Tensor::zeros(&[states, vocab + 1]), Tensor::zeros(&[states, 1])],
        })
    }

    /// Number of prefixes of length `0..=max_len`.
    pub fn count_states(vocab: usize, max_len: usize) -> Option<usize> {
        let mut total = 0usize;
        let mut layer = 1usize;
        for _ in 0..=max_len {
            total = total.checked_add(layer)?;
            layer = layer.checked_mul(vocab)?;
        }
        Some(total)
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn state_index(&self, prefix: &[Token]) -> Result<usize> {
        if prefix.len() > self.max_len {
            return Err(Error::Length { len: prefix.len(), max: self.max_len });
        }
        let mut offset = 0;
        let mut layer = 1;
        for _ in 0..prefix.len() {
            offset += layer;
            layer *= self.vocab;
        }
        let mut code = 0;
        for t in prefix {
            let a = t.id();
            if a == 0 || a > self.vocab {
                return Err(Error::arg(format!("action {a} outside 1..={}", self.vocab)));
            }
            code = code * self.vocab + (a - 1);
        }
        Ok(offset + code)
    }
}

impl Policy for TabularPolicy {
    type Context = ();

    fn params(&self) -> &[Tensor] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    fn trainable(&self) -> Vec<usize> {
        vec![0, 1]
    }

    fn next_log_probs(&self, _: &(), prefix: &[Token]) -> Result<Vec<f64>> {
        let s = self.state_index(prefix)?;
        Ok(log_softmax(self.params[0].row(s)))
    }

    fn trace(&self, tape: &mut Tape, vars: &[Var], _: &(), tokens: &[Token]) -> Result<(Var, Var)> {
        let idx = (0..=tokens.len()).map(|t| self.state_index(&tokens[..t])).collect::<Result<Vec<_>>>()?;
        let logits = tape.gather_rows(vars[0], &idx)?;
        let flow = tape.gather_rows(vars[1], &idx)?;
        Ok((logits, flow))
    }
}

/// Reward given directly as a function of the prefix.
pub struct FnReward<F>(pub F);

impl<P: Policy, F: Fn(&[Token]) -> f64> PrefixReward<P> for FnReward<F> {
    fn prefix_reward(&self, _: &P, _: &P::Context, _: usize, prefix: &[Token]) -> Result<RewardBreakdown> {
        let r = (self.0)(prefix);
        Ok(RewardBreakdown { r_ans: r, r_lvip: 0.0, combined: r })
    }
}

/// The transformer as a rationale policy over puzzles.
#[derive(Clone, Debug)]
pub struct ModelPolicy {
    pub model: ModelState,
}

impl Policy for ModelPolicy {
    type Context = Puzzle;

    fn params(&self) -> &[Tensor] {
        self.model.params()
    }

    fn params_mut(&mut self) -> &mut [Tensor] {
        self.model.params_mut()
    }

    /// Everything except the frozen visual encoder and LVIP head.
    fn trainable(&self) -> Vec<usize> {
        let vis = self.model.visual_encoder_names();
        self.model
            .names()
            .iter()
            .enumerate()
            .filter(|(_, n)| !vis.contains(&n.as_str()) && !n.starts_with("lvip."))
            .map(|(k, _)| k)
            .collect()
    }

    fn next_log_probs(&self, p: &Puzzle, prefix: &[Token]) -> Result<Vec<f64>> {
        let prompt = prompt_for(p.rule.category);
        self.model.next_token_log_probs(&ModelInput::new(p, &prompt), prefix)
    }

    fn trace(&self, tape: &mut Tape, vars: &[Var], p: &Puzzle, tokens: &[Token]) -> Result<(Var, Var)> {
        let prompt = prompt_for(p.rule.category);
        let b = Bound { vars: vars.to_vec() };
        let tr = self.model.forward_tape(tape, &b, &ModelInput::new(p, &prompt), tokens)?;
        let start = tr.spans.last_prompt_row()?;
        let rows: Vec<usize> = (start..=start + tokens.len()).collect();
        let logits = self.model.logits_tape(tape, &b, tr.hidden, &rows)?;
        let flow = self.model.flow_tape(tape, &b, tr.hidden, &rows)?;
        Ok((logits, flow))
    }
}

/// log q_theta0(y | X, Z_prefix).
pub fn reward_ans(scorer: &Scorer, input: &ModelInput, prefix: &[Token], y: usize) -> Result<f64> {
    scorer.log_prob(input, prefix, y)
}

/// -|g_psi(h_opt) - h_y|^2 with g_psi and h_y from the frozen scorer and
/// h_opt pooled from `backbone` conditioned on `[X; Z_prefix]`.
pub fn reward_lvip(scorer: &Scorer, backbone: &ModelState, input: &ModelInput, prefix: &[Token], y: usize) -> Result<f64> {
    if input.options.is_empty() {
        return Err(Error::arg("no option spans to pool"));
    }
    if y >= input.options.len() {
        return Err(Error::arg(format!("answer {y} is not one of {} options", input.options.len())));
    }
    let out = backbone.forward(input, prefix)?;
    let pred = scorer.model().lvip_predict(&out.pooled_option)?;
    let h_y = scorer.model().target_embedding(&input.options[y])?;
    Ok(-pred.iter().zip(&h_y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
}

/// The combined prefix reward for the transformer policy.
pub struct ModelReward {
    pub scorer: Scorer,
    pub weights: RewardWeights,
    pub backbone: LvipBackbone,
}

impl PrefixReward<ModelPolicy> for ModelReward {
    fn prefix_reward(&self, policy: &ModelPolicy, p: &Puzzle, y: usize, prefix: &[Token]) -> Result<RewardBreakdown> {
        let prompt = prompt_for(p.rule.category);
        let input = ModelInput::new(p, &prompt);
        let r_ans = reward_ans(&self.scorer, &input, prefix, y)?;
        let backbone = match self.backbone {
            LvipBackbone::Frozen => self.scorer.model(),
            LvipBackbone::Live => &policy.model,
        };
        let r_lvip = reward_lvip(&self.scorer, backbone, &input, prefix, y)?;
        Ok(RewardBreakdown { r_ans, r_lvip, combined: combine_reward(&self.weights, r_ans, r_lvip) })
    }
}

#[derive(Clone, Debug)]
pub struct GfnOutcome {
    pub model: ModelState,
    pub run: GfnRun,
}

/// Stage III on puzzles, each with its stored rationale as Z_ref.
pub fn train_gfn(cfg: &GfnConfig, sft_model: &ModelState, scorer: &Scorer, dataset: &[Puzzle]) -> Result<GfnOutcome> {
    let instances: Vec<GfnInstance<Puzzle>> = dataset
        .iter()
        .map(|p| GfnInstance { ctx: p.clone(), y: p.answer_index, z_ref: p.rationale.clone() })
        .collect();
    // prompt, rationale and the END decision must fit the text positions
    let limit = sft_model.config().max_text_len;
    if cfg.max_len + 3 > limit {
        return Err(Error::Config(format!("max_len {} does not fit max_text_len {limit}", cfg.max_len)));
    }
    if let Some(p) = dataset.iter().find(|p| p.rationale.len() > cfg.max_len) {
        return Err(Error::Length { len: p.rationale.len(), max: cfg.max_len });
    }
    let mut policy = ModelPolicy { model: sft_model.clone() };
    let reward = ModelReward { scorer: scorer.clone(), weights: cfg.weights, backbone: cfg.lvip_backbone.clone() };
    let run = train_policy(cfg, &mut policy, &reward, &instances)?;
    Ok(GfnOutcome { model: policy.model, run })
}

/// A sampled rationale with its greedily decoded answer.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub rationale: Rationale,
    pub answer: usize,
}

/// N ancestral rationales, each followed by a greedy answer.
pub fn sample_rationales<G: Rng + ?Sized>(
    model: &ModelState,
    input: &ModelInput,
    n: usize,
    temperature: f64,
    max_len: usize,
    rng: &mut G,
) -> Result<Vec<Candidate>> {
    if n == 0 {
        return Err(Error::arg("need at least one sample"));
    }
    (0..n)
        .map(|_| {
            let rationale = model.sample_rationale(input, max_len, temperature, rng)?;
            let (answer, _) = model.decode_answer(input, &rationale.tokens)?;
            Ok(Candidate { rationale, answer })
        })
        .collect()
}

/// S_i = log q_theta0(y_i | X, Z_i) / (|Z_i| + 1), with |Z_i| the token count
/// before END and the answer counted as one token.
pub fn evidence_score(scorer: &Scorer, input: &ModelInput, c: &Candidate) -> Result<f64> {
    let lp = scorer.log_prob(input, &c.rationale.tokens, c.answer)?;
    Ok(lp / (c.rationale.tokens.len() + 1) as f64)
}

/// Index of the best score; ties go to the lowest index.
pub fn select_index(scores: &[f64]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::arg("no candidates"));
    }
    Ok(argmax(scores))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapChoice {
    pub answer: usize,
    pub index: usize,
    pub scores: Vec<f64>,
}

/// MAP-style selection: the answer of the candidate with the highest S_i.
pub fn map_select(scorer: &Scorer, input: &ModelInput, candidates: &[Candidate]) -> Result<MapChoice> {
    let scores = candidates.iter().map(|c| evidence_score(scorer, input, c)).collect::<Result<Vec<_>>>()?;
    let index = select_index(&scores)?;
    Ok(MapChoice { answer: candidates[index].answer, index, scores })
}

/// Half the L1 distance between two distributions on the same support.
pub fn total_variation(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::dim(format!("distributions of sizes {} and {}", p.len(), q.len())));
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}
