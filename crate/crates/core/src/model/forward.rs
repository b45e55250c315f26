//! Encoder and decoder stacks.
//!
//! Layer order (both stacks): `x -> LN -> attention -> LN -> +x`, then
//! `x -> LN -> fc1 -> LN -> GELU -> fc2 -> +x`. Decoder layers insert a
//! cross-attention block with its own pre/post norms between the two.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Mat;

use super::attention::{attention, RelativeBias, Scores};
use super::config::MAX_SOURCE_LEN;
use super::params::{FfnIds, LnIds, ModelParams};

/// One encoder input patch: flattened pixels in `[0, 1]` and its grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub pixels: Vec<f64>,
    pub row: usize,
    pub col: usize,
    /// Masked patches contribute no pixel content.
    pub masked: bool,
}

/// Forward-pass mode. Training draws dropout and stochastic-depth decisions
/// from the supplied generator; evaluation is deterministic.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// What a residual branch does this call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BranchGate {
    Skip,
    Scale(f64),
}

/// Training: skip with probability `rate`, else run unscaled.
/// Evaluation: always run, scaled by `1 - rate`.
pub fn stochastic_depth_gate(rate: f64, mode: &mut Mode) -> BranchGate {
    if rate == 0.0 {
        return BranchGate::Scale(1.0);
    }
    match mode {
        Mode::Eval => BranchGate::Scale(1.0 - rate),
        Mode::Train(rng) => {
            if rng.gen::<f64>() < rate {
                BranchGate::Skip
            } else {
                BranchGate::Scale(1.0)
            }
        }
    }
}

/// `input + branch(input)` under stochastic depth.
pub fn apply_stochastic_depth<F>(
    branch: F,
    input: &Mat,
    rate: f64,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Mat>
where
    F: FnOnce(&Mat) -> Mat,
{
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("stochastic depth rate {rate} must lie in [0, 1)")));
    }
    let mut mode = if training { Mode::Train(rng) } else { Mode::Eval };
    let mut out = input.clone();
    match stochastic_depth_gate(rate, &mut mode) {
        BranchGate::Skip => {}
        BranchGate::Scale(s) => {
            let b = branch(input);
            if b.shape() != input.shape() {
                return Err(Error::Shape("residual branch changed the shape".into()));
            }
            crate::tensor::axpy(s, &b.data, &mut out.data);
        }
    }
    Ok(out)
}

fn rel_offset(delta: isize, buckets: usize) -> usize {
    let half = (buckets / 2) as isize;
    (delta.clamp(-half, half - 1) + half) as usize
}

pub(crate) struct Ctx<'m, 'r> {
    pub params: &'m ModelParams,
    pub mode: Mode<'r>,
    pub dropout: f64,
}

impl<'m, 'r> Ctx<'m, 'r> {
    pub fn new(params: &'m ModelParams, mode: Mode<'r>) -> Self {
        Self { params, mode, dropout: params.config.dropout }
    }

    fn ln(&self, g: &mut Graph, x: NodeId, ids: LnIds) -> NodeId {
        let (gain, bias) = (g.param(ids.gain), g.param(ids.bias));
        g.layer_norm(x, gain, bias)
    }

    fn dropout(&mut self, g: &mut Graph, x: NodeId) -> NodeId {
        let p = self.dropout;
        match &mut self.mode {
            Mode::Train(rng) if p > 0.0 => {
                let (r, c) = g.value(x).shape();
                let keep = 1.0 / (1.0 - p);
                let mask = (0..r * c).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
                g.mul_const(x, Mat::from_vec(r, c, mask))
            }
            _ => x,
        }
    }

    fn residual(&mut self, g: &mut Graph, x: NodeId, branch: impl FnOnce(&mut Self, &mut Graph) -> NodeId) -> NodeId {
        match stochastic_depth_gate(self.params.config.stochastic_depth, &mut self.mode) {
            BranchGate::Skip => x,
            BranchGate::Scale(s) => {
                let b = branch(self, g);
                let b = self.dropout(g, b);
                let b = if s == 1.0 { b } else { g.scale(b, s) };
                g.add(x, b)
            }
        }
    }

    fn ffn(&self, g: &mut Graph, x: NodeId, ids: &FfnIds) -> NodeId {
        let (w1, b1, w2, b2) = (g.param(ids.fc1_w), g.param(ids.fc1_b), g.param(ids.fc2_w), g.param(ids.fc2_b));
        let h = g.linear(x, w1, b1);
        let h = self.ln(g, h, ids.mid_ln);
        let h = g.gelu(h);
        g.linear(h, w2, b2)
    }

    /// Encoder hidden states: patch rows first, then text rows.
    pub fn encode(&mut self, g: &mut Graph, text_ids: &[u32], patches: &[Patch]) -> Result<NodeId> {
        let params = self.params;
        let c = &params.config;
        let lay = &params.layout;
        let (np, nt) = (patches.len(), text_ids.len());
        let n = np + nt;
        if n == 0 {
            return Err(Error::InvalidArgument("empty source".into()));
        }
        if n > MAX_SOURCE_LEN {
            return Err(Error::InputTooLong(n));
        }
        if nt > c.max_text_positions {
            return Err(Error::InvalidArgument(format!(
                "{nt} text tokens exceed {} positions",
                c.max_text_positions
            )));
        }
        check_ids(text_ids, c.vocab_total)?;

        let mut rows = Vec::new();
        let mut pos = Vec::new();
        if np > 0 {
            let width = c.patch_pixels();
            let mut pix = Mat::zeros(np, width);
            let mut cells = Vec::with_capacity(np);
            for (i, p) in patches.iter().enumerate() {
                if p.pixels.len() != width {
                    return Err(Error::Shape(format!("patch has {} values, expected {width}", p.pixels.len())));
                }
                if p.row >= c.max_patch_grid || p.col >= c.max_patch_grid {
                    return Err(Error::InvalidArgument(format!(
                        "patch cell ({}, {}) outside the {} grid",
                        p.row, p.col, c.max_patch_grid
                    )));
                }
                if !p.masked {
                    pix.row_mut(i).copy_from_slice(&p.pixels);
                }
                cells.push(p.row * c.max_patch_grid + p.col);
            }
            let pix = g.constant(pix);
            let (w, b) = (g.param(lay.patch_w), g.param(lay.patch_b));
            rows.push(g.linear(pix, w, b));
            let table = g.param(lay.patch_pos);
            pos.push(g.gather_rows(table, cells));
        }
        if nt > 0 {
            let embed = g.param(lay.embed);
            rows.push(g.gather_rows(embed, text_ids.iter().map(|&t| t as usize).collect()));
            let table = g.param(lay.text_pos);
            pos.push(g.gather_rows(table, (0..nt).collect()));
        }
        let mut x = g.concat_rows(rows);
        let positions = g.concat_rows(pos);

        let mut text_idx = vec![None; n * n];
        let mut patch_idx = vec![None; n * n];
        for i in 0..n {
            for j in 0..n {
                match (i < np, j < np) {
                    (false, false) => {
                        text_idx[i * n + j] = Some(rel_offset(j as isize - i as isize, c.text_rel_buckets));
                    }
                    (true, true) => {
                        let dy = patches[j].row as isize - patches[i].row as isize;
                        let dx = patches[j].col as isize - patches[i].col as isize;
                        let b = c.patch_rel_buckets;
                        patch_idx[i * n + j] = Some(rel_offset(dy, b) * b + rel_offset(dx, b));
                    }
                    _ => {}
                }
            }
        }
        let mut biases = Vec::new();
        if nt > 0 {
            biases.push(RelativeBias { table: lay.rel_text, index: Rc::new(text_idx) });
        }
        if np > 0 {
            biases.push(RelativeBias { table: lay.rel_patch, index: Rc::new(patch_idx) });
        }

        for layer in &lay.encoder {
            x = self.residual(g, x, |ctx, g| {
                let h = ctx.ln(g, x, layer.attn_ln);
                let s = Scores {
                    ids: &layer.attn,
                    heads: c.heads,
                    query_in: h,
                    key_in: h,
                    positions: Some(positions),
                    biases: &biases,
                };
                let a = attention(g, &s, None);
                ctx.ln(g, a, layer.attn_post_ln)
            });
            x = self.residual(g, x, |ctx, g| {
                let h = ctx.ln(g, x, layer.ffn_ln);
                ctx.ffn(g, h, &layer.ffn)
            });
        }
        if !lay.encoder.is_empty() {
            x = self.ln(g, x, lay.enc_final_ln);
        }
        Ok(x)
    }

    /// Final decoder hidden states for every prefix position.
    pub fn decode_hidden(&mut self, g: &mut Graph, enc: NodeId, prefix: &[u32]) -> Result<NodeId> {
        let params = self.params;
        let c = &params.config;
        let lay = &params.layout;
        let t = prefix.len();
        if t == 0 {
            return Err(Error::InvalidArgument("decoder prefix is empty".into()));
        }
        if t > c.max_text_positions {
            return Err(Error::InvalidArgument(format!(
                "decoder prefix of {t} exceeds {} positions",
                c.max_text_positions
            )));
        }
        check_ids(prefix, c.vocab_total)?;
        let embed = g.param(lay.embed);
        let mut x = g.gather_rows(embed, prefix.iter().map(|&i| i as usize).collect());
        let table = g.param(lay.text_pos);
        let positions = g.gather_rows(table, (0..t).collect());
        let mut idx = vec![None; t * t];
        let mut causal = vec![false; t * t];
        for i in 0..t {
            for j in 0..t {
                if j > i {
                    causal[i * t + j] = true;
                } else {
                    idx[i * t + j] = Some(rel_offset(j as isize - i as isize, c.text_rel_buckets));
                }
            }
        }
        let biases = [RelativeBias { table: lay.rel_text, index: Rc::new(idx) }];
        let causal = Rc::new(causal);

        for layer in &lay.decoder {
            x = self.residual(g, x, |ctx, g| {
                let h = ctx.ln(g, x, layer.self_ln);
                let s = Scores {
                    ids: &layer.self_attn,
                    heads: c.heads,
                    query_in: h,
                    key_in: h,
                    positions: Some(positions),
                    biases: &biases,
                };
                let a = attention(g, &s, Some(causal.clone()));
                ctx.ln(g, a, layer.self_post_ln)
            });
            x = self.residual(g, x, |ctx, g| {
                let h = ctx.ln(g, x, layer.cross_ln);
                let s = Scores {
                    ids: &layer.cross_attn,
                    heads: c.heads,
                    query_in: h,
                    key_in: enc,
                    positions: None,
                    biases: &[],
                };
                let a = attention(g, &s, None);
                ctx.ln(g, a, layer.cross_post_ln)
            });
            x = self.residual(g, x, |ctx, g| {
                let h = ctx.ln(g, x, layer.ffn_ln);
                ctx.ffn(g, h, &layer.ffn)
            });
        }
        if !lay.decoder.is_empty() {
            x = self.ln(g, x, lay.dec_final_ln);
        }
        Ok(x)
    }

    /// Logits over the unified vocabulary via the tied embedding table.
    pub fn logits(&self, g: &mut Graph, hidden: NodeId) -> NodeId {
        let embed = g.param(self.params.layout.embed);
        g.matmul_t(hidden, embed)
    }
}

fn check_ids(ids: &[u32], vocab: usize) -> Result<()> {
    match ids.iter().find(|&&i| i as usize >= vocab) {
        Some(bad) => Err(Error::InvalidArgument(format!("token id {bad} outside vocab of {vocab}"))),
        None => Ok(()),
    }
}

/// Encoder hidden states in evaluation mode.
pub fn encoder_forward(params: &ModelParams, text_ids: &[u32], patches: &[Patch]) -> Result<Mat> {
    let mut g = Graph::new(&params.tensors);
    let mut ctx = Ctx::new(params, Mode::Eval);
    let out = ctx.encode(&mut g, text_ids, patches)?;
    Ok(g.value(out).clone())
}

/// Logits for every prefix position, evaluation mode.
pub fn decoder_forward(params: &ModelParams, encoder_states: &Mat, prefix: &[u32]) -> Result<Mat> {
    check_encoder_states(params, encoder_states)?;
    let mut g = Graph::new(&params.tensors);
    let mut ctx = Ctx::new(params, Mode::Eval);
    let enc = g.constant(encoder_states.clone());
    let h = ctx.decode_hidden(&mut g, enc, prefix)?;
    let logits = ctx.logits(&mut g, h);
    Ok(g.value(logits).clone())
}

/// Logits for the last prefix position only.
pub fn decoder_last_logits(params: &ModelParams, encoder_states: &Mat, prefix: &[u32]) -> Result<Vec<f64>> {
    check_encoder_states(params, encoder_states)?;
    let mut g = Graph::new(&params.tensors);
    let mut ctx = Ctx::new(params, Mode::Eval);
    let enc = g.constant(encoder_states.clone());
    let h = ctx.decode_hidden(&mut g, enc, prefix)?;
    let d = g.value(h).cols;
    let last = g.value(h).row(prefix.len() - 1).to_vec();
    let last = g.constant(Mat::from_vec(1, d, last));
    let logits = ctx.logits(&mut g, last);
    Ok(g.value(logits).data.clone())
}

fn check_encoder_states(params: &ModelParams, enc: &Mat) -> Result<()> {
    if enc.cols != params.config.hidden || enc.rows == 0 {
        return Err(Error::Shape(format!(
            "encoder states are {}x{}, expected n x {}",
            enc.rows, enc.cols, params.config.hidden
        )));
    }
    Ok(())
}
