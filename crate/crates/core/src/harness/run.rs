use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::{RunConfig, Variant};
use super::eval::{evaluate, make_answerer, DecodeSettings, EvalReport};
use super::plot::write_csv;
use crate::error::{Error, Result};
use crate::gfn::{train_gfn, GfnOutcome};
use crate::model::ModelState;
use crate::sft::{freeze_scorer, train_sft, SftConfig, SftOutcome};
use crate::tasks::{generate_suite, Puzzle, Split};

/// Puzzles monitored after every SFT epoch.
pub const MONITOR_PUZZLES: usize = 100;

const EVAL_SALT: u64 = 0x5eed_e7a1;
const GFN_SALT: u64 = 0x6f1a_0b3d;

/// The three puzzle sets of one run. The evaluation set depends on
/// `data_seed` only; the training sets also vary with `seed`.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub train: Vec<Puzzle>,
    pub eval: Vec<Puzzle>,
    pub gfn: Vec<Puzzle>,
}

pub fn eval_set(cfg: &RunConfig) -> Result<Vec<Puzzle>> {
    Ok(generate_suite(cfg.eval_count, cfg.data_seed ^ EVAL_SALT, Split::Eval, &cfg.task)?
        .into_iter()
        .map(|r| r.puzzle)
        .collect())
}

pub fn build_datasets(cfg: &RunConfig) -> Result<Datasets> {
    let base = cfg.data_seed.wrapping_add(cfg.seed);
    let train = generate_suite(cfg.train_count, base, Split::Train, &cfg.task)?;
    let gfn = generate_suite(cfg.gfn_count, base ^ GFN_SALT, Split::Train, &cfg.task)?;
    Ok(Datasets {
        train: train.into_iter().map(|r| r.puzzle).collect(),
        eval: eval_set(cfg)?,
        gfn: gfn.into_iter().map(|r| r.puzzle).collect(),
    })
}

fn monitor(eval: &[Puzzle]) -> &[Puzzle] {
    &eval[..eval.len().min(MONITOR_PUZZLES)]
}

pub fn sft_config(cfg: &RunConfig, beta: f64) -> SftConfig {
    SftConfig { beta, seed: cfg.seed, ..cfg.sft.clone() }
}

pub fn initial_model(cfg: &RunConfig) -> Result<ModelState> {
    ModelState::init(&cfg.model, cfg.seed)
}

/// Stage II from the seed's initialization.
pub fn run_sft(cfg: &RunConfig, beta: f64, data: &Datasets) -> Result<SftOutcome> {
    train_sft(&sft_config(cfg, beta), initial_model(cfg)?, &data.train, monitor(&data.eval))
}

/// Stage III on top of a supervised model, which also becomes the scorer.
pub fn run_gfn(cfg: &RunConfig, sft_model: &ModelState, data: &Datasets) -> Result<GfnOutcome> {
    let gcfg = crate::gfn::GfnConfig { seed: cfg.seed, ..cfg.gfn.clone() };
    train_gfn(&gcfg, sft_model, &freeze_scorer(sft_model), &data.gfn)
}

/// Evaluates `model` as `variant`. `scorer_model` ranks MAP candidates.
pub fn evaluate_variant(
    cfg: &RunConfig,
    variant: Variant,
    model: &ModelState,
    scorer_model: &ModelState,
    eval: &[Puzzle],
) -> Result<EvalReport> {
    let mode = if variant == Variant::SftLvipGfn { cfg.gfn_eval_mode } else { cfg.eval_mode };
    let scorer = freeze_scorer(scorer_model);
    let settings = DecodeSettings {
        max_len: cfg.sft.max_rationale_len,
        temperature: cfg.map_temperature,
        map_n: cfg.map_n,
        seed: cfg.seed,
    };
    let answerer = make_answerer(mode, model, &scorer, settings);
    evaluate(answerer.as_ref(), eval, variant, cfg.seed)
}

/// A directory holding every artifact of one run.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// Creates `out_dir/name` and writes the config echo into it.
    pub fn create(cfg: &RunConfig, name: &str) -> Result<Self> {
        let path = cfg.out_dir.join(name);
        fs::create_dir_all(&path).map_err(|e| Error::File { path: path.clone(), msg: e.to_string() })?;
        let dir = RunDir { path };
        fs::write(dir.file("config.txt"), cfg.to_text())?;
        Ok(dir)
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let p = self.file(name);
        fs::write(&p, serde_json::to_string_pretty(value)? + "\n")?;
        Ok(p)
    }

    pub fn write_csv<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<PathBuf> {
        let p = self.file(name);
        write_csv(&p, rows)?;
        Ok(p)
    }
}

/// Standard run directory name.
pub fn run_name(command: &str, variant: Variant, seed: u64) -> String {
    format!("{command}_{variant}_seed{seed}")
}

pub fn save_model(dir: &RunDir, name: &str, model: &ModelState) -> Result<PathBuf> {
    let p = dir.file(name);
    model.save(&p)?;
    Ok(p)
}

pub fn load_model(path: &Path) -> Result<ModelState> {
    ModelState::load(path)
}
