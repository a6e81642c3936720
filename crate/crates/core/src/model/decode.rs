use rand::Rng;

use super::forward::ModelInput;
use super::state::ModelState;
use crate::error::{Error, Result};
use crate::tasks::Token;

/// A decoded rationale. `terminated` is false when the length cap forced the
/// stop instead of a sampled END.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rationale {
    pub tokens: Vec<Token>,
    pub terminated: bool,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Draws an index from log-probabilities scaled by `1 / temperature`.
/// A temperature of zero is greedy.
pub fn sample_index<R: Rng + ?Sized>(log_probs: &[f64], temperature: f64, rng: &mut R) -> Result<usize> {
    if log_probs.is_empty() {
        return Err(Error::arg("cannot sample from an empty distribution"));
    }
    if !(temperature >= 0.0) {
        return Err(Error::arg(format!("temperature must be non-negative, got {temperature}")));
    }
    if temperature == 0.0 {
        return Ok(argmax(log_probs));
    }
    let m = log_probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_probs.iter().map(|l| ((l - m) / temperature).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, wi) in w.iter().enumerate() {
        u -= wi;
        if u < 0.0 {
            return Ok(i);
        }
    }
    Ok(w.iter().rposition(|&x| x > 0.0).unwrap_or(0))
}

impl ModelState {
    /// Ancestral sampling of rationale tokens until END or `max_len` tokens.
    pub fn sample_rationale<R: Rng + ?Sized>(
        &self,
        input: &ModelInput,
        max_len: usize,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Rationale> {
        let mut tokens = Vec::new();
        while tokens.len() < max_len {
            let lp = self.next_token_log_probs(input, &tokens)?;
            let t = Token(sample_index(&lp, temperature, rng)? as u16);
            if t == Token::END {
                return Ok(Rationale { tokens, terminated: true });
            }
            tokens.push(t);
        }
        Ok(Rationale { tokens, terminated: false })
    }

    pub fn greedy_rationale(&self, input: &ModelInput, max_len: usize) -> Result<Rationale> {
        self.sample_rationale(input, max_len, 0.0, &mut rand::rngs::mock::StepRng::new(0, 0))
    }

    /// Greedy option choice after `rationale END`, with its option log-probabilities.
    pub fn decode_answer(&self, input: &ModelInput, rationale: &[Token]) -> Result<(usize, Vec<f64>)> {
        let lp = self.answer_log_probs(input, rationale)?;
        Ok((argmax(&lp), lp))
    }
}
