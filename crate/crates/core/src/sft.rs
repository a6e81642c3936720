//! Supervised fine-tuning on filtered rationale chains with the auxiliary
//! LVIP regression, and the frozen scorer handed to the GFlowNet stage.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax, prompt_for, Bound, ModelInput, ModelState};
use crate::numerics::{clip_global_norm, mse, Adam, Tape, Tensor, Var};
use crate::tasks::{filter_chain, predicted_option, Puzzle, Token};

/// Upper bound on decoded rationale length used for evaluation.
pub const DEFAULT_MAX_RATIONALE: usize = 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    /// Weight of the LVIP regression term.
    pub beta: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Drives the data order only, so runs that differ in `beta` see the
    /// same batches.
    pub seed: u64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
    /// Keeps Enc_vis fixed so the regression targets h_y do not move.
    pub freeze_visual_encoder: bool,
    pub max_rationale_len: usize,
    /// The learning rate follows a cosine from `learning_rate` down to
    /// `learning_rate * final_lr_fraction`; 1 keeps it constant.
    pub final_lr_fraction: f64,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            beta: 1.0,
            learning_rate: 3e-3,
            weight_decay: 1e-5,
            batch_size: 8,
            epochs: 20,
            seed: 0,
            clip_norm: 1.0,
            freeze_visual_encoder: false,
            max_rationale_len: DEFAULT_MAX_RATIONALE,
            final_lr_fraction: 0.1,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta must be a finite value >= 0, got {}", self.beta)));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::Config(format!("clip_norm must be >= 0, got {}", self.clip_norm)));
        }
        if !(self.final_lr_fraction >= 0.0 && self.final_lr_fraction <= 1.0) {
            return Err(Error::Config(format!("final_lr_fraction must lie in [0, 1], got {}", self.final_lr_fraction)));
        }
        if self.max_rationale_len == 0 {
            return Err(Error::Config("max_rationale_len must be positive".into()));
        }
        Ok(())
    }
}

/// Batch loss with its two terms reported separately.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SftLoss {
    pub total: f64,
    pub ce: f64,
    pub mse: f64,
}

/// One metrics row; epoch 0 is the untrained model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftMetrics {
    pub epoch: usize,
    pub ce: f64,
    pub mse: f64,
    pub total: f64,
    pub eval_accuracy: f64,
    pub eval_mse: f64,
}

/// Trained model plus its per-epoch history.
#[derive(Clone, Debug)]
pub struct SftOutcome {
    pub model: ModelState,
    pub history: Vec<SftMetrics>,
}

/// Decoder target sequence `Z END y`.
pub fn target_sequence(p: &Puzzle) -> Result<Vec<Token>> {
    let mut x = p.rationale.clone();
    x.push(Token::END);
    x.push(Token::option(p.answer_index)?);
    Ok(x)
}

/// h_y for every puzzle of a batch.
pub fn lvip_targets(model: &ModelState, batch: &[Puzzle]) -> Result<Vec<Vec<f64>>> {
    batch.iter().map(|p| model.target_embedding(p.answer_panel())).collect()
}

fn check_record(p: &Puzzle) -> Result<()> {
    match predicted_option(&p.rationale) {
        Some(pred) if filter_chain(&p.rationale, pred, p.answer_index) => Ok(()),
        _ => Err(Error::arg("training record carries a rationale that does not pass the chain filter")),
    }
}

/// Builds the batch objective on `tape`: per-sequence summed CE plus
/// `beta` times the LVIP MSE, averaged over the batch.
fn loss_on_tape(
    model: &ModelState,
    tape: &mut Tape,
    b: &Bound,
    batch: &[Puzzle],
    targets: &[Vec<f64>],
    beta: f64,
) -> Result<(Var, SftLoss)> {
    if batch.is_empty() {
        return Err(Error::arg("empty batch"));
    }
    if targets.len() != batch.len() {
        return Err(Error::dim(format!("{} targets for {} puzzles", targets.len(), batch.len())));
    }
    let mut terms = Vec::with_capacity(batch.len());
    let (mut ce_sum, mut mse_sum) = (0.0, 0.0);
    for (p, h_y) in batch.iter().zip(targets) {
        let prompt = prompt_for(p.rule.category);
        let input = ModelInput::new(p, &prompt);
        let text = target_sequence(p)?;
        let trace = model.forward_tape(tape, b, &input, &text)?;
        let start = trace.spans.last_prompt_row()?;
        let rows: Vec<usize> = (start..start + text.len()).collect();
        let logits = model.logits_tape(tape, b, trace.hidden, &rows)?;
        let picks: Vec<(usize, usize)> = text.iter().enumerate().map(|(j, t)| (j, t.id())).collect();
        let ce = tape.cross_entropy(logits, &picks)?;
        ce_sum += tape.value(ce).item();

        let pooled = model.pooled_option_tape(tape, &trace)?;
        let pred = model.lvip_tape(tape, b, pooled)?;
        if h_y.len() != tape.value(pred).len() {
            return Err(Error::dim(format!("target width {} != LVIP width {}", h_y.len(), tape.value(pred).len())));
        }
        let target = tape.leaf(Tensor::matrix(1, h_y.len(), h_y.clone())?);
        let m = tape.mse(pred, target)?;
        mse_sum += tape.value(m).item();

        if beta == 0.0 {
            terms.push(ce);
        } else {
            let weighted = tape.scale(m, beta);
            terms.push(tape.sum(&[ce, weighted])?);
        }
    }
    let total = tape.sum(&terms)?;
    let n = batch.len() as f64;
    let mean = tape.scale(total, 1.0 / n);
    let report = SftLoss { total: tape.value(mean).item(), ce: ce_sum / n, mse: mse_sum / n };
    Ok((mean, report))
}

/// L_SFT with the frozen targets h_y computed from the model's own encoder.
pub fn sft_loss(model: &ModelState, batch: &[Puzzle], beta: f64) -> Result<SftLoss> {
    let targets = lvip_targets(model, batch)?;
    sft_loss_with_targets(model, batch, &targets, beta)
}

/// L_SFT against caller-supplied regression targets.
pub fn sft_loss_with_targets(model: &ModelState, batch: &[Puzzle], targets: &[Vec<f64>], beta: f64) -> Result<SftLoss> {
    let mut tape = Tape::new();
    let b = Bound::new(&mut tape, model);
    Ok(loss_on_tape(model, &mut tape, &b, batch, targets, beta)?.1)
}

/// Loss and its gradient for every parameter tensor, in `ModelState` order.
pub fn sft_gradients(
    model: &ModelState,
    batch: &[Puzzle],
    targets: &[Vec<f64>],
    beta: f64,
) -> Result<(SftLoss, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let b = Bound::new(&mut tape, model);
    let (out, report) = loss_on_tape(model, &mut tape, &b, batch, targets, beta)?;
    let g = tape.backward(out)?;
    Ok((report, b.vars.iter().map(|&v| g.tensor(v)).collect()))
}

/// Greedy rationale then greedy option; fraction of puzzles answered correctly.
pub fn greedy_accuracy(model: &ModelState, puzzles: &[Puzzle], max_len: usize) -> Result<f64> {
    if puzzles.is_empty() {
        return Err(Error::arg("empty evaluation set"));
    }
    let mut hits = 0usize;
    for p in puzzles {
        let prompt = prompt_for(p.rule.category);
        let input = ModelInput::new(p, &prompt);
        let z = model.greedy_rationale(&input, max_len)?;
        let (y, _) = model.decode_answer(&input, &z.tokens)?;
        hits += usize::from(y == p.answer_index);
    }
    Ok(hits as f64 / puzzles.len() as f64)
}

/// Mean MSE(g_psi(h_opt), h_y) over a set. Option positions precede the text,
/// so the prediction needs no rationale.
pub fn lvip_mse(model: &ModelState, puzzles: &[Puzzle]) -> Result<f64> {
    if puzzles.is_empty() {
        return Err(Error::arg("empty evaluation set"));
    }
    let mut total = 0.0;
    for p in puzzles {
        let prompt = prompt_for(p.rule.category);
        let out = model.forward(&ModelInput::new(p, &prompt), &[])?;
        let h_y = model.target_embedding(p.answer_panel())?;
        total += mse(&Tensor::vector(out.lvip), &Tensor::vector(h_y))?;
    }
    Ok(total / puzzles.len() as f64)
}

/// Indices of the tensors stage II updates.
pub fn sft_trainable(model: &ModelState, freeze_visual_encoder: bool) -> Vec<usize> {
    let frozen = if freeze_visual_encoder { model.visual_encoder_names() } else { vec![] };
    let frozen: Vec<String> = frozen.into_iter().map(String::from).collect();
    (0..model.names().len()).filter(|&k| !frozen.contains(&model.names()[k])).collect()
}

fn epoch_row(
    cfg: &SftConfig,
    model: &ModelState,
    epoch: usize,
    loss: SftLoss,
    eval: &[Puzzle],
) -> Result<SftMetrics> {
    Ok(SftMetrics {
        epoch,
        ce: loss.ce,
        mse: loss.mse,
        total: loss.total,
        eval_accuracy: greedy_accuracy(model, eval, cfg.max_rationale_len)?,
        eval_mse: lvip_mse(model, eval)?,
    })
}

/// Cosine decay from `lr` at step 0 to `lr * final_fraction` at `total`.
pub fn cosine_lr(lr: f64, final_fraction: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return lr;
    }
    let t = (step as f64 / (total - 1) as f64).min(1.0);
    lr * (final_fraction + (1.0 - final_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Teacher-forced Adam training from `init`. Row 0 of the history describes
/// `init` itself; row e > 0 holds the mean batch loss seen during epoch e and
/// the evaluation after it.
pub fn train_sft(cfg: &SftConfig, init: ModelState, train: &[Puzzle], eval: &[Puzzle]) -> Result<SftOutcome> {
    cfg.validate()?;
    if train.is_empty() || eval.is_empty() {
        return Err(Error::arg("train and eval sets must be nonempty"));
    }
    for p in train {
        check_record(p)?;
    }
    let mut model = init;
    let which = sft_trainable(&model, cfg.freeze_visual_encoder);
    let mut opt = Adam::new(cfg.learning_rate, cfg.weight_decay, which.iter().map(|&k| model.params()[k].len()));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();

    // h_y is fixed when the encoder is frozen; otherwise refreshed per batch
    let cached = if cfg.freeze_visual_encoder { Some(lvip_targets(&model, train)?) } else { None };

    let mut start = SftLoss::default();
    for chunk in order.chunks(cfg.batch_size) {
        let batch: Vec<Puzzle> = chunk.iter().map(|&i| train[i].clone()).collect();
        let l = sft_loss(&model, &batch, cfg.beta)?;
        let w = batch.len() as f64 / train.len() as f64;
        start.total += l.total * w;
        start.ce += l.ce * w;
        start.mse += l.mse * w;
    }
    let mut history = vec![epoch_row(cfg, &model, 0, start, eval)?];

    let total_steps = cfg.epochs * train.len().div_ceil(cfg.batch_size);
    let mut global_step = 0usize;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = SftLoss::default();
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<Puzzle> = chunk.iter().map(|&i| train[i].clone()).collect();
            let targets = match &cached {
                Some(all) => chunk.iter().map(|&i| all[i].clone()).collect(),
                None => lvip_targets(&model, &batch)?,
            };
            let (l, mut grads) = sft_gradients(&model, &batch, &targets, cfg.beta)?;
            if !l.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence(format!(
                    "non-finite loss at epoch {epoch} step {step}: total {} ce {} mse {}",
                    l.total, l.ce, l.mse
                )));
            }
            if cfg.clip_norm > 0.0 {
                clip_global_norm(&mut grads, cfg.clip_norm);
            }
            opt.lr = cosine_lr(cfg.learning_rate, cfg.final_lr_fraction, global_step, total_steps);
            global_step += 1;
            opt.step_subset(model.params_mut(), &grads, &which);
            if !model.is_finite() {
                return Err(Error::Divergence(format!("non-finite parameters after epoch {epoch} step {step}")));
            }
            let w = batch.len() as f64 / train.len() as f64;
            acc.total += l.total * w;
            acc.ce += l.ce * w;
            acc.mse += l.mse * w;
        }
        history.push(epoch_row(cfg, &model, epoch, acc, eval)?);
    }
    Ok(SftOutcome { model, history })
}

/// Immutable, shareable copy of the supervised model used as q_theta0.
#[derive(Clone, Debug)]
pub struct Scorer {
    model: Arc<ModelState>,
}

/// Deep copy of `model`; later updates to `model` never reach the scorer.
pub fn freeze_scorer(model: &ModelState) -> Scorer {
    Scorer { model: Arc::new(model.clone()) }
}

impl Scorer {
    pub fn model(&self) -> &ModelState {
        &self.model
    }

    /// log q_theta0(y | X, Z) for every option y.
    pub fn answer_log_probs(&self, input: &ModelInput, rationale: &[Token]) -> Result<Vec<f64>> {
        self.model.answer_log_probs(input, rationale)
    }

    /// log q_theta0(y | X, Z) for one option.
    pub fn log_prob(&self, input: &ModelInput, rationale: &[Token], y: usize) -> Result<f64> {
        if y >= input.options.len() {
            return Err(Error::arg(format!("answer {y} is not one of {} options", input.options.len())));
        }
        Ok(self.answer_log_probs(input, rationale)?[y])
    }

    /// Greedy option under the scorer.
    pub fn decode(&self, input: &ModelInput, rationale: &[Token]) -> Result<usize> {
        Ok(argmax(&self.answer_log_probs(input, rationale)?))
    }
}
