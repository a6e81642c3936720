use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{EvalMode, Variant};
use crate::error::{Error, Result};
use crate::gfn::{map_select, sample_rationales};
use crate::model::{prompt_for, ModelInput, ModelState};
use crate::sft::Scorer;
use crate::tasks::{Category, Puzzle};

/// Chooses an option for the `index`-th evaluation puzzle.
pub trait Answerer {
    fn answer(&self, puzzle: &Puzzle, index: usize) -> Result<usize>;
}

/// Per-puzzle sampling stream, so that results do not depend on the order
/// in which puzzles are visited.
pub fn puzzle_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub struct GreedyAnswerer<'a> {
    pub model: &'a ModelState,
    pub max_len: usize,
}

impl Answerer for GreedyAnswerer<'_> {
    fn answer(&self, p: &Puzzle, _: usize) -> Result<usize> {
        let prompt = prompt_for(p.rule.category);
        let input = ModelInput::new(p, &prompt);
        let z = self.model.greedy_rationale(&input, self.max_len)?;
        Ok(self.model.decode_answer(&input, &z.tokens)?.0)
    }
}

/// One sampled rationale, then the greedy answer.
pub struct SampleAnswerer<'a> {
    pub model: &'a ModelState,
    pub max_len: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Answerer for SampleAnswerer<'_> {
    fn answer(&self, p: &Puzzle, index: usize) -> Result<usize> {
        let prompt = prompt_for(p.rule.category);
        let input = ModelInput::new(p, &prompt);
        let mut rng = puzzle_rng(self.seed, index);
        let c = sample_rationales(self.model, &input, 1, self.temperature, self.max_len, &mut rng)?;
        Ok(c[0].answer)
    }
}

/// N sampled rationales ranked by the frozen scorer.
pub struct MapAnswerer<'a> {
    pub model: &'a ModelState,
    pub scorer: &'a Scorer,
    pub n: usize,
    pub max_len: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Answerer for MapAnswerer<'_> {
    fn answer(&self, p: &Puzzle, index: usize) -> Result<usize> {
        let prompt = prompt_for(p.rule.category);
        let input = ModelInput::new(p, &prompt);
        let mut rng = puzzle_rng(self.seed, index);
        let cands = sample_rationales(self.model, &input, self.n, self.temperature, self.max_len, &mut rng)?;
        Ok(map_select(self.scorer, &input, &cands)?.answer)
    }
}

/// Settings shared by every answerer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeSettings {
    pub max_len: usize,
    pub temperature: f64,
    pub map_n: usize,
    pub seed: u64,
}

pub fn make_answerer<'a>(
    mode: EvalMode,
    model: &'a ModelState,
    scorer: &'a Scorer,
    s: DecodeSettings,
) -> Box<dyn Answerer + 'a> {
    match mode {
        EvalMode::Greedy => Box::new(GreedyAnswerer { model, max_len: s.max_len }),
        EvalMode::Sample => Box::new(SampleAnswerer { model, max_len: s.max_len, temperature: s.temperature, seed: s.seed }),
        EvalMode::Map => Box::new(MapAnswerer {
            model,
            scorer,
            n: s.map_n,
            max_len: s.max_len,
            temperature: s.temperature,
            seed: s.seed,
        }),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub category: Category,
    pub n: usize,
    /// Absent when the category has no puzzles.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: Variant,
    pub seed: u64,
    pub n: usize,
    /// Puzzle-weighted mean of the category accuracies.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub overall: Option<f64>,
    pub categories: Vec<CategoryReport>,
}

impl EvalReport {
    /// Builds the report from per-puzzle outcomes.
    pub fn from_outcomes(variant: Variant, seed: u64, outcomes: &[(Category, bool)]) -> Self {
        let categories: Vec<CategoryReport> = Category::ALL
            .iter()
            .map(|&c| {
                let hits: Vec<bool> = outcomes.iter().filter(|o| o.0 == c).map(|o| o.1).collect();
                let n = hits.len();
                let accuracy = (n > 0).then(|| hits.iter().filter(|&&h| h).count() as f64 / n as f64);
                CategoryReport { category: c, n, accuracy }
            })
            .collect();
        let n: usize = categories.iter().map(|c| c.n).sum();
        let overall = (n > 0).then(|| {
            categories.iter().filter_map(|c| c.accuracy.map(|a| a * c.n as f64)).sum::<f64>() / n as f64
        });
        EvalReport { variant, seed, n, overall, categories }
    }

    pub fn category(&self, c: Category) -> Option<&CategoryReport> {
        self.categories.iter().find(|r| r.category == c)
    }
}

pub fn evaluate(answerer: &dyn Answerer, puzzles: &[Puzzle], variant: Variant, seed: u64) -> Result<EvalReport> {
    let mut outcomes = Vec::with_capacity(puzzles.len());
    for (i, p) in puzzles.iter().enumerate() {
        let y = answerer.answer(p, i)?;
        if y >= p.num_options() {
            return Err(Error::Evaluation(format!("answer {y} for puzzle {i} is not one of {} options", p.num_options())));
        }
        outcomes.push((p.rule.category, y == p.answer_index));
    }
    Ok(EvalReport::from_outcomes(variant, seed, &outcomes))
}

/// Fraction of puzzles whose LVIP prediction, pooled before any rationale,
/// is nearest to the gold option's embedding among all options.
pub fn lvip_retrieval(model: &ModelState, puzzles: &[Puzzle]) -> Result<f64> {
    if puzzles.is_empty() {
        return Err(Error::Evaluation("no puzzles for retrieval".into()));
    }
    let mut hits = 0usize;
    for p in puzzles {
        let prompt = prompt_for(p.rule.category);
        let out = model.forward(&ModelInput::new(p, &prompt), &[])?;
        let mut best = (f64::INFINITY, 0usize);
        for (i, op) in p.option_panels.iter().enumerate() {
            let h = model.target_embedding(op)?;
            let d: f64 = h.iter().zip(&out.lvip).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, i);
            }
        }
        hits += (best.1 == p.answer_index) as usize;
    }
    Ok(hits as f64 / puzzles.len() as f64)
}
