use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::generate::{generate_puzzle, TaskConfig};
use super::panel::{Attribute, Panel};
use super::puzzle::Puzzle;
use super::rationale::attach_rationale;
use super::rule::{sample_rule, Category, RuleDescriptor, RuleKind};
use super::vocab::Token;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetRecord {
    pub puzzle: Puzzle,
    pub split: Split,
    pub seed: u64,
}

/// One line of the dataset file.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    category: Category,
    rule_kind: RuleKind,
    attribute: Attribute,
    rule_params: Vec<i64>,
    question_panels: Vec<Panel>,
    option_panels: Vec<Panel>,
    answer_index: usize,
    rationale_tokens: Vec<Token>,
    split: Split,
    seed: u64,
}

impl DatasetRecord {
    pub fn to_json(&self) -> Result<String> {
        let p = &self.puzzle;
        let line = Line {
            category: p.rule.category,
            rule_kind: p.rule.rule_kind,
            attribute: p.rule.attribute,
            rule_params: p.rule.parameters.clone(),
            question_panels: p.question_panels.clone(),
            option_panels: p.option_panels.clone(),
            answer_index: p.answer_index,
            rationale_tokens: p.rationale.clone(),
            split: self.split,
            seed: self.seed,
        };
        Ok(serde_json::to_string(&line)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let l: Line = serde_json::from_str(s)?;
        let rule = RuleDescriptor::new(l.category, l.rule_kind, l.attribute, l.rule_params)?;
        let puzzle = Puzzle {
            question_panels: l.question_panels,
            option_panels: l.option_panels,
            answer_index: l.answer_index,
            rule,
            rationale: l.rationale_tokens,
        };
        puzzle.validate()?;
        Ok(DatasetRecord { puzzle, split: l.split, seed: l.seed })
    }
}

pub fn serialize_dataset(records: &[DatasetRecord], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::File { path: path.to_path_buf(), msg: e.to_string() })?;
    let mut w = BufWriter::new(file);
    for r in records {
        w.write_all(r.to_json()?.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<DatasetRecord>> {
    let file = File::open(path).map_err(|e| Error::File { path: path.to_path_buf(), msg: e.to_string() })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let rec = DatasetRecord::from_json(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

/// Balanced suite over the five categories. Each record's seed regenerates
/// its puzzle from the stored rule. Seeds whose generation fails or whose
/// rationale is filtered out are skipped.
pub fn generate_suite(count: usize, seed: u64, split: Split, cfg: &TaskConfig) -> Result<Vec<DatasetRecord>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut failures = 0usize;
    while out.len() < count {
        let category = Category::ALL[out.len() % Category::ALL.len()];
        let rule = sample_rule(&mut rng, category, &cfg.space, cfg.panel_cells(category));
        let puzzle_seed: u64 = rng.gen();
        match generate_puzzle(&rule, puzzle_seed, cfg).and_then(attach_rationale) {
            Ok(Some(puzzle)) => out.push(DatasetRecord { puzzle, split, seed: puzzle_seed }),
            Ok(None) | Err(Error::Generation(_)) => {
                failures += 1;
                if failures > 100 + 10 * count {
                    return Err(Error::Generation(format!("suite generation failed {failures} times")));
                }
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}
