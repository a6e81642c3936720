use std::ops::Range;

use super::state::ModelState;
use crate::error::{Error, Result};
use crate::numerics::{log_softmax, Tape, Tensor, Var};
use crate::tasks::{Category, Panel, Puzzle, Token};

/// Visual context plus prompt tokens.
#[derive(Clone, Copy, Debug)]
pub struct ModelInput<'a> {
    pub question: &'a [Panel],
    pub options: &'a [Panel],
    pub prompt: &'a [Token],
}

impl<'a> ModelInput<'a> {
    pub fn new(puzzle: &'a Puzzle, prompt: &'a [Token]) -> Self {
        ModelInput { question: &puzzle.question_panels, options: &puzzle.option_panels, prompt }
    }
}

/// Fixed prompt for a category: `CAT_x QUERY`.
pub fn prompt_for(category: Category) -> Vec<Token> {
    vec![Token::category(category), Token::QUERY]
}

/// Where each input segment sits in the flattened sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSpanMap {
    pub question: Vec<Range<usize>>,
    pub options: Vec<Range<usize>>,
    pub prompt: Range<usize>,
    pub rationale: Range<usize>,
    pub len: usize,
}

impl TokenSpanMap {
    pub fn new(input: &ModelInput, n_rationale: usize) -> Self {
        let mut pos = 0;
        let mut span = |n: usize| {
            let r = pos..pos + n;
            pos += n;
            r
        };
        let question = input.question.iter().map(|p| span(p.cells().len())).collect();
        let options = input.options.iter().map(|p| span(p.cells().len())).collect();
        let prompt = span(input.prompt.len());
        let rationale = span(n_rationale);
        TokenSpanMap { question, options, prompt, rationale, len: pos }
    }

    pub fn visual_len(&self) -> usize {
        self.prompt.start
    }

    pub fn option_positions(&self) -> Vec<usize> {
        self.options.iter().flat_map(|r| r.clone()).collect()
    }

    /// Row whose logits predict the first rationale token.
    pub fn last_prompt_row(&self) -> Result<usize> {
        self.rationale.start.checked_sub(1).ok_or_else(|| Error::arg("sequence has no prompt or visual tokens"))
    }
}

/// Parameters placed on a tape as leaves, indexed like `ModelState::params`.
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Bound {
    pub fn new(tape: &mut Tape, state: &ModelState) -> Self {
        Bound { vars: state.params().iter().map(|p| tape.leaf(p.clone())).collect() }
    }
}

/// Hidden states of one forward pass on a tape.
pub struct Trace {
    pub hidden: Var,
    pub spans: TokenSpanMap,
}

/// Per-position outputs of a plain forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub hidden: Tensor,
    pub logits: Tensor,
    pub pooled_option: Vec<f64>,
    pub lvip: Vec<f64>,
    pub spans: TokenSpanMap,
}

impl ModelState {
    fn check_panel(&self, p: &Panel) -> Result<()> {
        let c = self.config();
        for (i, x) in p.cells().iter().enumerate() {
            if x.present && (x.shape as usize >= c.shapes || x.color as usize >= c.colors || x.size as usize >= c.sizes) {
                return Err(Error::dim(format!("cell {i} has attribute ids outside the model's tables: {x:?}")));
            }
        }
        Ok(())
    }

    /// Enc_vis over the cells of several panels, row-major, concatenated.
    pub fn encode_cells_tape(&self, tape: &mut Tape, b: &Bound, panels: &[&Panel]) -> Result<Var> {
        let c = self.config();
        let (mut s, mut co, mut z, mut r, mut q) = (vec![], vec![], vec![], vec![], vec![]);
        for p in panels {
            self.check_panel(p)?;
            for row in 0..p.height() {
                for col in 0..p.width() {
                    let x = p.at(row, col);
                    s.push(if x.present { x.shape as usize } else { c.shapes });
                    co.push(if x.present { x.color as usize } else { c.colors });
                    z.push(if x.present { x.size as usize } else { c.sizes });
                    r.push(row);
                    q.push(col);
                }
            }
        }
        if s.is_empty() {
            return Err(Error::arg("no cells to encode"));
        }
        let i = &self.idx;
        let parts = [
            tape.gather_rows(b.vars[i.vis_shape], &s)?,
            tape.gather_rows(b.vars[i.vis_color], &co)?,
            tape.gather_rows(b.vars[i.vis_size], &z)?,
            tape.gather_rows(b.vars[i.vis_row], &r)?,
            tape.gather_rows(b.vars[i.vis_col], &q)?,
        ];
        let sum = tape.sum(&parts)?;
        Ok(tape.tanh(sum))
    }

    pub fn project_tape(&self, tape: &mut Tape, b: &Bound, feats: Var) -> Result<Var> {
        let y = tape.matmul(feats, b.vars[self.idx.proj_w])?;
        tape.add_row(y, b.vars[self.idx.proj_b])
    }

    fn affine_ln(&self, tape: &mut Tape, x: Var, g: Var, bias: Var) -> Result<Var> {
        let n = tape.layer_norm(x)?;
        let n = tape.mul_row(n, g)?;
        tape.add_row(n, bias)
    }

    /// Input rows before any mixing: projected cell features plus segment
    /// embeddings, then token plus text-position embeddings.
    pub fn embed_tape(&self, tape: &mut Tape, b: &Bound, input: &ModelInput, text: &[Token]) -> Result<(Var, TokenSpanMap)> {
        let c = self.config();
        let spans = TokenSpanMap::new(input, text.len());
        if spans.len > c.max_seq_len {
            return Err(Error::Length { len: spans.len, max: c.max_seq_len });
        }
        let n_text = input.prompt.len() + text.len();
        if n_text > c.max_text_len {
            return Err(Error::Length { len: n_text, max: c.max_text_len });
        }
        if input.question.len() > c.max_question_panels || input.options.len() > c.max_options {
            return Err(Error::dim(format!(
                "{} question / {} option panels exceed the model's {} / {}",
                input.question.len(),
                input.options.len(),
                c.max_question_panels,
                c.max_options
            )));
        }
        let i = &self.idx;
        let mut rows: Vec<Var> = Vec::new();

        let panels: Vec<&Panel> = input.question.iter().chain(input.options.iter()).collect();
        if !panels.is_empty() {
            let feats = self.encode_cells_tape(tape, b, &panels)?;
            let vis = self.project_tape(tape, b, feats)?;
            let mut seg = Vec::new();
            let q_idx: Vec<usize> = spans.question.iter().enumerate().flat_map(|(k, r)| std::iter::repeat(k).take(r.len())).collect();
            if !q_idx.is_empty() {
                seg.push(tape.gather_rows(b.vars[i.seg_question], &q_idx)?);
            }
            let o_idx: Vec<usize> = spans.options.iter().enumerate().flat_map(|(k, r)| std::iter::repeat(k).take(r.len())).collect();
            if !o_idx.is_empty() {
                let slot = tape.gather_rows(b.vars[i.seg_option_slot], &vec![0; o_idx.len()])?;
                let which = tape.gather_rows(b.vars[i.seg_option_index], &o_idx)?;
                seg.push(tape.add(slot, which)?);
            }
            let seg = tape.concat_rows(&seg)?;
            rows.push(tape.add(vis, seg)?);
        }
        if n_text > 0 {
            let ids: Vec<usize> = input.prompt.iter().chain(text).map(|t| t.id()).collect();
            if let Some(bad) = ids.iter().find(|&&t| t >= c.vocab_size) {
                return Err(Error::arg(format!("token id {bad} outside vocabulary of {}", c.vocab_size)));
            }
            let emb = tape.gather_rows(b.vars[i.tok_embed], &ids)?;
            let pos: Vec<usize> = (0..n_text).collect();
            let pe = tape.gather_rows(b.vars[i.tok_pos], &pos)?;
            rows.push(tape.add(emb, pe)?);
        }
        if rows.is_empty() {
            return Err(Error::arg("empty input sequence"));
        }
        Ok((tape.concat_rows(&rows)?, spans))
    }

    /// Causal transformer over `[question cells][option cells][prompt][text]`.
    pub fn forward_tape(&self, tape: &mut Tape, b: &Bound, input: &ModelInput, text: &[Token]) -> Result<Trace> {
        let c = self.config();
        let i = &self.idx;
        let (mut h, spans) = self.embed_tape(tape, b, input, text)?;

        let heads = c.n_heads;
        let dh = c.d_model / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for l in &i.layers {
            let a = self.affine_ln(tape, h, b.vars[l.ln1_g], b.vars[l.ln1_b])?;
            let q = tape.matmul(a, b.vars[l.wq])?;
            let k = tape.matmul(a, b.vars[l.wk])?;
            let v = tape.matmul(a, b.vars[l.wv])?;
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = tape.slice_cols(q, hd * dh, dh)?;
                let kh = tape.slice_cols(k, hd * dh, dh)?;
                let vh = tape.slice_cols(v, hd * dh, dh)?;
                let s = tape.matmul_nt(qh, kh)?;
                let s = tape.scale(s, scale);
                let p = tape.causal_softmax(s)?;
                outs.push(tape.matmul(p, vh)?);
            }
            let o = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
            let o = tape.matmul(o, b.vars[l.wo])?;
            let o = tape.add_row(o, b.vars[l.bo])?;
            h = tape.add(h, o)?;

            let m = self.affine_ln(tape, h, b.vars[l.ln2_g], b.vars[l.ln2_b])?;
            let f = tape.matmul(m, b.vars[l.w1])?;
            let f = tape.add_row(f, b.vars[l.b1])?;
            let f = tape.silu(f);
            let f = tape.matmul(f, b.vars[l.w2])?;
            let f = tape.add_row(f, b.vars[l.b2])?;
            h = tape.add(h, f)?;
        }
        let hidden = self.affine_ln(tape, h, b.vars[i.lnf_g], b.vars[i.lnf_b])?;
        Ok(Trace { hidden, spans })
    }

    /// Decoder logits for the selected rows of `hidden`.
    pub fn logits_tape(&self, tape: &mut Tape, b: &Bound, hidden: Var, rows: &[usize]) -> Result<Var> {
        let x = tape.select_rows(hidden, rows)?;
        let y = tape.matmul(x, b.vars[self.idx.head_w])?;
        tape.add_row(y, b.vars[self.idx.head_b])
    }

    /// Mean of final hidden states over every option-cell position.
    pub fn pooled_option_tape(&self, tape: &mut Tape, trace: &Trace) -> Result<Var> {
        let pos = trace.spans.option_positions();
        if pos.is_empty() {
            return Err(Error::arg("no option spans to pool"));
        }
        let x = tape.select_rows(trace.hidden, &pos)?;
        tape.mean_rows(x)
    }

    /// g_psi: affine, tanh, affine into the visual embedding width.
    pub fn lvip_tape(&self, tape: &mut Tape, b: &Bound, pooled: Var) -> Result<Var> {
        let i = &self.idx;
        let y = tape.matmul(pooled, b.vars[i.lvip_w1])?;
        let y = tape.add_row(y, b.vars[i.lvip_b1])?;
        let y = tape.tanh(y);
        let y = tape.matmul(y, b.vars[i.lvip_w2])?;
        tape.add_row(y, b.vars[i.lvip_b2])
    }

    /// Scalar log-flow per selected row, as a column.
    pub fn flow_tape(&self, tape: &mut Tape, b: &Bound, hidden: Var, rows: &[usize]) -> Result<Var> {
        let x = tape.select_rows(hidden, rows)?;
        let y = tape.matmul(x, b.vars[self.idx.flow_w])?;
        tape.add_row(y, b.vars[self.idx.flow_b])
    }

    /// Visual features of one panel, one row per cell.
    pub fn encode_panel(&self, panel: &Panel) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = Bound::new(&mut tape, self);
        let v = self.encode_cells_tape(&mut tape, &b, &[panel])?;
        Ok(tape.value(v).clone())
    }

    /// Affine map of visual features into the model width.
    pub fn project(&self, features: &Tensor) -> Result<Tensor> {
        if features.shape().len() != 2 || features.cols() != self.config().d_vis {
            return Err(Error::dim(format!(
                "features {:?} do not have width {}",
                features.shape(),
                self.config().d_vis
            )));
        }
        let mut tape = Tape::new();
        let b = Bound::new(&mut tape, self);
        let x = tape.leaf(features.clone());
        let y = self.project_tape(&mut tape, &b, x)?;
        Ok(tape.value(y).clone())
    }

    /// Full forward pass with every output materialised.
    pub fn forward(&self, input: &ModelInput, rationale_prefix: &[Token]) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let b = Bound::new(&mut tape, self);
        let trace = self.forward_tape(&mut tape, &b, input, rationale_prefix)?;
        let rows: Vec<usize> = (0..trace.spans.len).collect();
        let logits = self.logits_tape(&mut tape, &b, trace.hidden, &rows)?;
        let (pooled_option, lvip) = if trace.spans.options.is_empty() {
            (vec![], vec![])
        } else {
            let p = self.pooled_option_tape(&mut tape, &trace)?;
            let l = self.lvip_tape(&mut tape, &b, p)?;
            (tape.value(p).data().to_vec(), tape.value(l).data().to_vec())
        };
        Ok(ForwardOutput {
            hidden: tape.value(trace.hidden).clone(),
            logits: tape.value(logits).clone(),
            pooled_option,
            lvip,
            spans: trace.spans,
        })
    }

    /// g_psi applied to a pooled vector.
    pub fn lvip_predict(&self, pooled: &[f64]) -> Result<Vec<f64>> {
        if pooled.len() != self.config().d_model {
            return Err(Error::dim(format!("pooled width {} != d_model {}", pooled.len(), self.config().d_model)));
        }
        let mut tape = Tape::new();
        let b = Bound::new(&mut tape, self);
        let x = tape.leaf(Tensor::matrix(1, pooled.len(), pooled.to_vec())?);
        let y = self.lvip_tape(&mut tape, &b, x)?;
        Ok(tape.value(y).data().to_vec())
    }

    /// h_y: mean Enc_vis feature of a panel. Plain values, so nothing
    /// downstream can push gradient into the encoder through it.
    pub fn target_embedding(&self, panel: &Panel) -> Result<Vec<f64>> {
        let f = self.encode_panel(panel)?;
        let (n, d) = (f.rows(), f.cols());
        let mut out = vec![0.0; d];
        for r in 0..n {
            for (o, v) in out.iter_mut().zip(f.row(r)) {
                *o += v;
            }
        }
        Ok(out.into_iter().map(|v| v / n as f64).collect())
    }

    /// Log-probabilities of the next token after `prefix`, over the full vocabulary.
    pub fn next_token_log_probs(&self, input: &ModelInput, prefix: &[Token]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let b = Bound::new(&mut tape, self);
        let trace = self.forward_tape(&mut tape, &b, input, prefix)?;
        let last = trace.spans.len - 1;
        let l = self.logits_tape(&mut tape, &b, trace.hidden, &[last])?;
        Ok(log_softmax(tape.value(l).data()))
    }

    /// log q(y | X, Z) for every option y: logits read after `Z END`,
    /// normalised over the option tokens only.
    pub fn answer_log_probs(&self, input: &ModelInput, rationale: &[Token]) -> Result<Vec<f64>> {
        let mut text = rationale.to_vec();
        text.push(Token::END);
        let mut tape = Tape::new();
        let b = Bound::new(&mut tape, self);
        let trace = self.forward_tape(&mut tape, &b, input, &text)?;
        let last = trace.spans.len - 1;
        let l = self.logits_tape(&mut tape, &b, trace.hidden, &[last])?;
        answer_scores(tape.value(l).data(), input.options.len())
    }
}

/// Log-softmax over the option-token columns of one logit row.
pub fn answer_scores(logits: &[f64], k: usize) -> Result<Vec<f64>> {
    let cols = (0..k).map(|i| Token::option(i).map(|t| t.id())).collect::<Result<Vec<_>>>()?;
    if let Some(&c) = cols.iter().find(|&&c| c >= logits.len()) {
        return Err(Error::arg(format!("option token {c} outside vocabulary of {}", logits.len())));
    }
    let picked: Vec<f64> = cols.iter().map(|&c| logits[c]).collect();
    Ok(log_softmax(&picked))
}

/// Arithmetic mean of the rows of `h` at the option positions.
pub fn pool_option_hidden(h: &Tensor, spans: &TokenSpanMap) -> Result<Vec<f64>> {
    let pos = spans.option_positions();
    if pos.is_empty() || spans.options.iter().any(|r| r.is_empty()) {
        return Err(Error::arg("empty option span"));
    }
    if let Some(&p) = pos.iter().find(|&&p| p >= h.rows()) {
        return Err(Error::dim(format!("option position {p} outside {} hidden rows", h.rows())));
    }
    let mut out = vec![0.0; h.cols()];
    for &p in &pos {
        for (o, v) in out.iter_mut().zip(h.row(p)) {
            *o += v;
        }
    }
    Ok(out.into_iter().map(|v| v / pos.len() as f64).collect())
}
