use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gfn::{FilterSchedule, GfnConfig, LvipBackbone};
use crate::model::ModelConfig;
use crate::sft::SftConfig;
use crate::tasks::TaskConfig;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "VISREASON_OUT_DIR";

/// Pipeline variants of the ablation matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Untrained initialization.
    Base,
    SftNoLvip,
    SftLvip,
    SftLvipGfn,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Base, Variant::SftNoLvip, Variant::SftLvip, Variant::SftLvipGfn];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::SftNoLvip => "sft_no_lvip",
            Variant::SftLvip => "sft_lvip",
            Variant::SftLvipGfn => "sft_lvip_gfn",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}'")))
    }
}

/// How an answer is chosen at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Greedy rationale, greedy answer.
    Greedy,
    /// One sampled rationale, greedy answer.
    Sample,
    /// N sampled rationales, MAP selection with the frozen scorer.
    Map,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Greedy => "greedy",
            EvalMode::Sample => "sample",
            EvalMode::Map => "map",
        }
    }
}

impl FromStr for EvalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(EvalMode::Greedy),
            "sample" => Ok(EvalMode::Sample),
            "map" => Ok(EvalMode::Map),
            _ => Err(Error::Config(format!("unknown eval mode '{s}'"))),
        }
    }
}

/// Every tunable of a run, read from flat `key = value` text.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub variant: Variant,
    /// Initialization, data order and sampling.
    pub seed: u64,
    /// Puzzle generation.
    pub data_seed: u64,
    pub train_count: usize,
    pub eval_count: usize,
    /// Size of the fresh puzzle pool used by stage III.
    pub gfn_count: usize,
    pub out_dir: PathBuf,
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub sft: SftConfig,
    pub gfn: GfnConfig,
    /// Mode for the base and SFT variants.
    pub eval_mode: EvalMode,
    /// Mode for the GFlowNet variant.
    pub gfn_eval_mode: EvalMode,
    pub map_n: usize,
    pub map_temperature: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            variant: Variant::SftLvipGfn,
            seed: 0,
            data_seed: 1,
            train_count: 8000,
            eval_count: 500,
            gfn_count: 500,
            out_dir: std::env::var_os(OUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs")),
            task: TaskConfig { bongard_side: 2, transform_side: 2, odd_side: 2, ..TaskConfig::default() },
            model: ModelConfig::default(),
            sft: SftConfig::default(),
            gfn: GfnConfig::default(),
            eval_mode: EvalMode::Greedy,
            gfn_eval_mode: EvalMode::Map,
            map_n: 8,
            map_temperature: 1.0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| Error::Config(format!("bad value '{value}' for {key}: {e}")))
}

fn parse_u8(key: &str, value: &str) -> Result<u8> {
    parse(key, value)
}

impl RunConfig {
    /// All keys with their current values, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (delta0, warm) = match self.gfn.delta {
            FilterSchedule::Constant(d) => (d, 0),
            FilterSchedule::Warmup { delta0, warm_steps } => (delta0, warm_steps),
        };
        let backbone = match self.gfn.lvip_backbone {
            LvipBackbone::Frozen => "frozen",
            LvipBackbone::Live => "live",
        };
        let t = &self.task;
        let m = &self.model;
        let s = &self.sft;
        let g = &self.gfn;
        vec![
            ("variant", self.variant.to_string()),
            ("seed", self.seed.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("train_count", self.train_count.to_string()),
            ("eval_count", self.eval_count.to_string()),
            ("gfn_count", self.gfn_count.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("num_options", t.num_options.to_string()),
            ("shapes", t.space.shapes.to_string()),
            ("colors", t.space.colors.to_string()),
            ("sizes", t.space.sizes.to_string()),
            ("matrix_side", t.matrix_side.to_string()),
            ("bongard_side", t.bongard_side.to_string()),
            ("bongard_positives", t.bongard_positives.to_string()),
            ("transform_side", t.transform_side.to_string()),
            ("transform_pairs", t.transform_pairs.to_string()),
            ("odd_side", t.odd_side.to_string()),
            ("d_vis", m.d_vis.to_string()),
            ("d_model", m.d_model.to_string()),
            ("n_layers", m.n_layers.to_string()),
            ("n_heads", m.n_heads.to_string()),
            ("ffn_width", m.ffn_width.to_string()),
            ("lvip_hidden", m.lvip_hidden.to_string()),
            ("max_seq_len", m.max_seq_len.to_string()),
            ("max_text_len", m.max_text_len.to_string()),
            ("beta", s.beta.to_string()),
            ("sft_learning_rate", s.learning_rate.to_string()),
            ("sft_weight_decay", s.weight_decay.to_string()),
            ("batch_size", s.batch_size.to_string()),
            ("epochs", s.epochs.to_string()),
            ("sft_clip_norm", s.clip_norm.to_string()),
            ("final_lr_fraction", s.final_lr_fraction.to_string()),
            ("freeze_visual_encoder", s.freeze_visual_encoder.to_string()),
            ("max_rationale_len", s.max_rationale_len.to_string()),
            ("alpha", g.weights.alpha.to_string()),
            ("gamma", g.weights.gamma.to_string()),
            ("lambda", g.lambda.to_string()),
            ("delta0", delta0.to_string()),
            ("delta_warm_steps", warm.to_string()),
            ("kappa", g.kappa.to_string()),
            ("m", g.m.to_string()),
            ("gfn_temperature", g.temperature.to_string()),
            ("gfn_learning_rate", g.learning_rate.to_string()),
            ("gfn_weight_decay", g.weight_decay.to_string()),
            ("gfn_steps", g.steps.to_string()),
            ("gfn_clip_norm", g.clip_norm.to_string()),
            ("lvip_backbone", backbone.to_string()),
            ("dump_trajectories", g.dump_trajectories.to_string()),
            ("eval_mode", self.eval_mode.name().to_string()),
            ("gfn_eval_mode", self.gfn_eval_mode.name().to_string()),
            ("map_n", self.map_n.to_string()),
            ("map_temperature", self.map_temperature.to_string()),
        ]
    }

    /// Sets one key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "variant" => self.variant = v.parse()?,
            "seed" => self.seed = parse(key, v)?,
            "data_seed" => self.data_seed = parse(key, v)?,
            "train_count" => self.train_count = parse(key, v)?,
            "eval_count" => self.eval_count = parse(key, v)?,
            "gfn_count" => self.gfn_count = parse(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "num_options" => self.task.num_options = parse(key, v)?,
            "shapes" => self.task.space.shapes = parse_u8(key, v)?,
            "colors" => self.task.space.colors = parse_u8(key, v)?,
            "sizes" => self.task.space.sizes = parse_u8(key, v)?,
            "matrix_side" => self.task.matrix_side = parse(key, v)?,
            "bongard_side" => self.task.bongard_side = parse(key, v)?,
            "bongard_positives" => self.task.bongard_positives = parse(key, v)?,
            "transform_side" => self.task.transform_side = parse(key, v)?,
            "transform_pairs" => self.task.transform_pairs = parse(key, v)?,
            "odd_side" => self.task.odd_side = parse(key, v)?,
            "d_vis" => self.model.d_vis = parse(key, v)?,
            "d_model" => self.model.d_model = parse(key, v)?,
            "n_layers" => self.model.n_layers = parse(key, v)?,
            "n_heads" => self.model.n_heads = parse(key, v)?,
            "ffn_width" => self.model.ffn_width = parse(key, v)?,
            "lvip_hidden" => self.model.lvip_hidden = parse(key, v)?,
            "max_seq_len" => self.model.max_seq_len = parse(key, v)?,
            "max_text_len" => self.model.max_text_len = parse(key, v)?,
            "beta" => self.sft.beta = parse(key, v)?,
            "sft_learning_rate" => self.sft.learning_rate = parse(key, v)?,
            "sft_weight_decay" => self.sft.weight_decay = parse(key, v)?,
            "batch_size" => self.sft.batch_size = parse(key, v)?,
            "epochs" => self.sft.epochs = parse(key, v)?,
            "sft_clip_norm" => self.sft.clip_norm = parse(key, v)?,
            "final_lr_fraction" => self.sft.final_lr_fraction = parse(key, v)?,
            "freeze_visual_encoder" => self.sft.freeze_visual_encoder = parse(key, v)?,
            "max_rationale_len" => {
                let n = parse(key, v)?;
                self.sft.max_rationale_len = n;
                self.gfn.max_len = n;
            }
            "alpha" => self.gfn.weights.alpha = parse(key, v)?,
            "gamma" => self.gfn.weights.gamma = parse(key, v)?,
            "lambda" => self.gfn.lambda = parse(key, v)?,
            "delta0" | "delta_warm_steps" => {
                let (mut d, mut w) = match self.gfn.delta {
                    FilterSchedule::Constant(d) => (d, 0),
                    FilterSchedule::Warmup { delta0, warm_steps } => (delta0, warm_steps),
                };
                if key == "delta0" {
                    d = parse(key, v)?;
                } else {
                    w = parse(key, v)?;
                }
                // zero warm-up steps means a constant threshold
                self.gfn.delta =
                    if w == 0 { FilterSchedule::Constant(d) } else { FilterSchedule::Warmup { delta0: d, warm_steps: w } };
            }
            "kappa" => self.gfn.kappa = parse(key, v)?,
            "m" => self.gfn.m = parse(key, v)?,
            "gfn_temperature" => self.gfn.temperature = parse(key, v)?,
            "gfn_learning_rate" => self.gfn.learning_rate = parse(key, v)?,
            "gfn_weight_decay" => self.gfn.weight_decay = parse(key, v)?,
            "gfn_steps" => self.gfn.steps = parse(key, v)?,
            "gfn_clip_norm" => self.gfn.clip_norm = parse(key, v)?,
            "lvip_backbone" => {
                self.gfn.lvip_backbone = match v {
                    "frozen" => LvipBackbone::Frozen,
                    "live" => LvipBackbone::Live,
                    _ => return Err(Error::Config(format!("lvip_backbone must be frozen or live, got '{v}'"))),
                }
            }
            "dump_trajectories" => self.gfn.dump_trajectories = parse(key, v)?,
            "eval_mode" => self.eval_mode = v.parse()?,
            "gfn_eval_mode" => self.gfn_eval_mode = v.parse()?,
            "map_n" => self.map_n = parse(key, v)?,
            "map_temperature" => self.map_temperature = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the defaults. Blank lines and
    /// `#` comments are skipped; repeated keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    pub fn apply(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse { line: i + 1, msg: format!("expected key = value, got '{line}'") })?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::Parse { line: i + 1, msg: format!("key '{k}' repeated") });
            }
            self.set(k, v).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        }
        self.validate()
    }

    /// Applies `key=value` overrides such as command-line `--set` pairs.
    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<()> {
        for p in pairs {
            let (k, v) = p.split_once('=').ok_or_else(|| Error::Config(format!("override '{p}' is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::File { path: path.to_path_buf(), msg: e.to_string() })?;
        Self::parse(&text).map_err(|e| Error::File { path: path.to_path_buf(), msg: e.to_string() })
    }

    /// Text that parses back to an equal config.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Checks cross-field consistency and every component config.
    pub fn validate(&self) -> Result<()> {
        self.task.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.model.validate()?;
        self.sft.validate()?;
        self.gfn.validate()?;
        if self.map_n == 0 {
            return Err(Error::Config("map_n must be positive".into()));
        }
        if !(self.map_temperature >= 0.0) {
            return Err(Error::Config("map_temperature must be >= 0".into()));
        }
        let s = &self.task.space;
        if (s.shapes as usize, s.colors as usize, s.sizes as usize) != (self.model.shapes, self.model.colors, self.model.sizes) {
            return Err(Error::Config("model attribute tables must match the task attribute space".into()));
        }
        if self.sft.max_rationale_len + 4 > self.model.max_text_len {
            return Err(Error::Config(format!(
                "max_rationale_len {} leaves no room for prompt, END and answer within max_text_len {}",
                self.sft.max_rationale_len, self.model.max_text_len
            )));
        }
        Ok(())
    }
}
