use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::tasks::{MAX_OPTIONS, MAX_SIDE, VOCAB_SIZE};

const CKPT_HEADER: &str = "VISREASON-CKPT v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Enc_vis embedding width; also the LVIP output width.
    pub d_vis: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_width: usize,
    pub lvip_hidden: usize,
    pub vocab_size: usize,
    /// Bound on the whole sequence (visual + prompt + rationale + END).
    pub max_seq_len: usize,
    /// Bound on the text part; sizes the text position table.
    pub max_text_len: usize,
    pub shapes: usize,
    pub colors: usize,
    pub sizes: usize,
    pub max_question_panels: usize,
    pub max_options: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_vis: 16,
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            ffn_width: 64,
            lvip_hidden: 32,
            vocab_size: VOCAB_SIZE,
            max_seq_len: 160,
            max_text_len: 48,
            shapes: 4,
            colors: 4,
            sizes: 4,
            max_question_panels: 8,
            max_options: MAX_OPTIONS,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_vis", self.d_vis),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("ffn_width", self.ffn_width),
            ("lvip_hidden", self.lvip_hidden),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("max_text_len", self.max_text_len),
            ("shapes", self.shapes),
            ("colors", self.colors),
            ("sizes", self.sizes),
            ("max_options", self.max_options),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_text_len > self.max_seq_len {
            return Err(Error::Config("max_text_len exceeds max_seq_len".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LayerIdx {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Positions of every parameter group inside `ModelState::params`.
#[derive(Clone, Debug)]
pub(crate) struct ParamIdx {
    pub vis_shape: usize,
    pub vis_color: usize,
    pub vis_size: usize,
    pub vis_row: usize,
    pub vis_col: usize,
    pub proj_w: usize,
    pub proj_b: usize,
    pub seg_question: usize,
    pub seg_option_slot: usize,
    pub seg_option_index: usize,
    pub tok_embed: usize,
    pub tok_pos: usize,
    pub layers: Vec<LayerIdx>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub head_w: usize,
    pub head_b: usize,
    pub lvip_w1: usize,
    pub lvip_b1: usize,
    pub lvip_w2: usize,
    pub lvip_b2: usize,
    pub flow_w: usize,
    pub flow_b: usize,
}

enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

/// Every learnable tensor of the model, in a fixed named order.
#[derive(Clone, Debug)]
pub struct ModelState {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    pub(crate) idx: ParamIdx,
}

impl PartialEq for ModelState {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.names == other.names && self.params == other.params
    }
}

struct Builder {
    rng: ChaCha8Rng,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl Builder {
    fn add(&mut self, name: &str, shape: &[usize], init: Init) -> usize {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| d.sample(&mut self.rng)).collect()
            }
        };
        self.names.push(name.to_string());
        self.params.push(Tensor::new(shape.to_vec(), data).expect("shape matches data"));
        self.params.len() - 1
    }
}

fn fan_in(n: usize) -> Init {
    Init::Normal(1.0 / (n as f64).sqrt())
}

impl ModelState {
    /// Fresh parameters drawn from `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut b = Builder { rng: ChaCha8Rng::seed_from_u64(seed), names: vec![], params: vec![] };
        let emb = || Init::Normal(0.5);
        // attribute tables carry one extra row used by absent cells
        let vis_shape = b.add("vis.shape", &[c.shapes + 1, c.d_vis], emb());
        let vis_color = b.add("vis.color", &[c.colors + 1, c.d_vis], emb());
        let vis_size = b.add("vis.size", &[c.sizes + 1, c.d_vis], emb());
        let vis_row = b.add("vis.row", &[MAX_SIDE, c.d_vis], emb());
        let vis_col = b.add("vis.col", &[MAX_SIDE, c.d_vis], emb());
        let proj_w = b.add("proj.w", &[c.d_vis, c.d_model], fan_in(c.d_vis));
        let proj_b = b.add("proj.b", &[c.d_model], Init::Zeros);
        let seg_question = b.add("seg.question", &[c.max_question_panels.max(1), c.d_model], emb());
        let seg_option_slot = b.add("seg.option_slot", &[1, c.d_model], emb());
        let seg_option_index = b.add("seg.option_index", &[c.max_options, c.d_model], emb());
        let tok_embed = b.add("tok.embed", &[c.vocab_size, c.d_model], emb());
        let tok_pos = b.add("tok.pos", &[c.max_text_len, c.d_model], emb());
        let mut layers = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            let p = |s: &str| format!("block{l}.{s}");
            layers.push(LayerIdx {
                ln1_g: b.add(&p("ln1.g"), &[c.d_model], Init::Ones),
                ln1_b: b.add(&p("ln1.b"), &[c.d_model], Init::Zeros),
                wq: b.add(&p("attn.wq"), &[c.d_model, c.d_model], fan_in(c.d_model)),
                wk: b.add(&p("attn.wk"), &[c.d_model, c.d_model], fan_in(c.d_model)),
                wv: b.add(&p("attn.wv"), &[c.d_model, c.d_model], fan_in(c.d_model)),
                wo: b.add(&p("attn.wo"), &[c.d_model, c.d_model], fan_in(c.d_model)),
                bo: b.add(&p("attn.bo"), &[c.d_model], Init::Zeros),
                ln2_g: b.add(&p("ln2.g"), &[c.d_model], Init::Ones),
                ln2_b: b.add(&p("ln2.b"), &[c.d_model], Init::Zeros),
                w1: b.add(&p("ffn.w1"), &[c.d_model, c.ffn_width], fan_in(c.d_model)),
                b1: b.add(&p("ffn.b1"), &[c.ffn_width], Init::Zeros),
                w2: b.add(&p("ffn.w2"), &[c.ffn_width, c.d_model], fan_in(c.ffn_width)),
                b2: b.add(&p("ffn.b2"), &[c.d_model], Init::Zeros),
            });
        }
        let lnf_g = b.add("lnf.g", &[c.d_model], Init::Ones);
        let lnf_b = b.add("lnf.b", &[c.d_model], Init::Zeros);
        let head_w = b.add("head.w", &[c.d_model, c.vocab_size], fan_in(c.d_model));
        let head_b = b.add("head.b", &[c.vocab_size], Init::Zeros);
        let lvip_w1 = b.add("lvip.w1", &[c.d_model, c.lvip_hidden], fan_in(c.d_model));
        let lvip_b1 = b.add("lvip.b1", &[c.lvip_hidden], Init::Zeros);
        let lvip_w2 = b.add("lvip.w2", &[c.lvip_hidden, c.d_vis], fan_in(c.lvip_hidden));
        let lvip_b2 = b.add("lvip.b2", &[c.d_vis], Init::Zeros);
        let flow_w = b.add("flow.w", &[c.d_model, 1], fan_in(c.d_model));
        let flow_b = b.add("flow.b", &[1], Init::Zeros);
        let idx = ParamIdx {
            vis_shape,
            vis_color,
            vis_size,
            vis_row,
            vis_col,
            proj_w,
            proj_b,
            seg_question,
            seg_option_slot,
            seg_option_index,
            tok_embed,
            tok_pos,
            layers,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
            lvip_w1,
            lvip_b1,
            lvip_w2,
            lvip_b2,
            flow_w,
            flow_b,
        };
        Ok(ModelState { config: config.clone(), names: b.names, params: b.params, idx })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.params[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    /// Names of the visual-encoder groups (frozen wherever targets are built).
    pub fn visual_encoder_names(&self) -> Vec<&str> {
        let i = &self.idx;
        [i.vis_shape, i.vis_color, i.vis_size, i.vis_row, i.vis_col].iter().map(|&k| self.names[k].as_str()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::File { path: path.to_path_buf(), msg: e.to_string() })?;
        let mut w = BufWriter::new(file);
        let manifest = Manifest {
            config: self.config.clone(),
            groups: self
                .names
                .iter()
                .zip(&self.params)
                .map(|(n, p)| Group { name: n.clone(), shape: p.shape().to_vec() })
                .collect(),
        };
        writeln!(w, "{CKPT_HEADER}")?;
        writeln!(w, "{}", serde_json::to_string(&manifest)?)?;
        for p in &self.params {
            for v in p.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::File { path: path.to_path_buf(), msg };
        let file = File::open(path).map_err(|e| bad(e.to_string()))?;
        let mut r = BufReader::new(file);
        let mut header = String::new();
        r.read_line(&mut header)?;
        if header.trim_end() != CKPT_HEADER {
            return Err(bad(format!("unrecognised header {:?}", header.trim_end())));
        }
        let mut line = String::new();
        r.read_line(&mut line)?;
        let manifest: Manifest = serde_json::from_str(&line).map_err(|e| bad(format!("manifest: {e}")))?;
        let mut state = ModelState::init(&manifest.config, 0)?;
        if manifest.groups.len() != state.params.len() {
            return Err(bad(format!("{} groups, expected {}", manifest.groups.len(), state.params.len())));
        }
        for (k, g) in manifest.groups.iter().enumerate() {
            if g.name != state.names[k] || g.shape != state.params[k].shape() {
                return Err(bad(format!("group {k} is {} {:?}, expected {} {:?}", g.name, g.shape, state.names[k], state.params[k].shape())));
            }
            let mut buf = vec![0u8; 8 * state.params[k].len()];
            r.read_exact(&mut buf).map_err(|e| bad(format!("payload for {}: {e}", g.name)))?;
            for (v, chunk) in state.params[k].data_mut().iter_mut().zip(buf.chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            }
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(bad(format!("{} trailing bytes", rest.len())));
        }
        Ok(state)
    }
}

#[derive(Serialize, Deserialize)]
struct Group {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    groups: Vec<Group>,
}
