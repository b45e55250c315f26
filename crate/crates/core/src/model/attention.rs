//! Head-scaled multi-head attention with decoupled positional scores and
//! shared relative-position bias.
//!
//! Per head `h`, with `d_h` the head width:
//!
//! ```text
//! score(i, j) = (I_i Wq)(I_j Wk)^T / sqrt(d_h) + (P_i Uq)(P_j Uk)^T / sqrt(d_h) + B[j - i]
//! out         = concat_h(gamma_h * softmax(score_h) V_h) Wo + bo
//! ```

use std::rc::Rc;

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{self, Mat};

use super::params::{AttnIds, ModelParams};

/// Bias lookups into one shared table: entry `i*m + j` of `index` selects the
/// table row for query `i`, key `j`; `None` contributes no bias.
#[derive(Debug, Clone)]
pub struct RelativeBias {
    pub table: usize,
    pub index: Rc<Vec<Option<usize>>>,
}

pub(crate) struct Scores<'x> {
    pub ids: &'x AttnIds,
    pub heads: usize,
    pub query_in: NodeId,
    pub key_in: NodeId,
    /// Absolute position vectors for the (shared) query/key sequence.
    pub positions: Option<NodeId>,
    pub biases: &'x [RelativeBias],
}

/// Pre-softmax scores per head.
pub(crate) fn head_scores(g: &mut Graph, s: &Scores) -> Vec<NodeId> {
    let dh = g.value(s.query_in).cols / s.heads;
    let inv = 1.0 / (dh as f64).sqrt();
    let (wq, bq, wk, bk) = (g.param(s.ids.wq), g.param(s.ids.bq), g.param(s.ids.wk), g.param(s.ids.bk));
    let q = g.linear(s.query_in, wq, bq);
    let k = g.linear(s.key_in, wk, bk);
    let pos = match (s.positions, s.ids.pos_q, s.ids.pos_k) {
        (Some(p), Some(uq), Some(uk)) => {
            let (uq, uk) = (g.param(uq), g.param(uk));
            Some((g.matmul(p, uq), g.matmul(p, uk)))
        }
        _ => None,
    };
    let tables: Vec<(NodeId, Rc<Vec<Option<usize>>>)> =
        s.biases.iter().map(|b| (g.param(b.table), b.index.clone())).collect();
    (0..s.heads)
        .map(|h| {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let raw = g.matmul_t(qh, kh);
            let mut score = g.scale(raw, inv);
            if let Some((pq, pk)) = pos {
                let pqh = g.slice_cols(pq, h * dh, dh);
                let pkh = g.slice_cols(pk, h * dh, dh);
                let praw = g.matmul_t(pqh, pkh);
                let pscore = g.scale(praw, inv);
                score = g.add(score, pscore);
            }
            for (t, idx) in &tables {
                score = g.add_gather_bias(score, *t, idx.clone(), h);
            }
            score
        })
        .collect()
}

/// `concat_h(gamma_h * probs_h V_h) Wo + bo`
pub(crate) fn combine_heads(
    g: &mut Graph,
    probs: &[NodeId],
    v: NodeId,
    head_scale: NodeId,
    wo: NodeId,
    bo: Option<NodeId>,
) -> NodeId {
    let dh = g.value(v).cols / probs.len();
    let outs: Vec<NodeId> = probs
        .iter()
        .enumerate()
        .map(|(h, &p)| {
            let vh = g.slice_cols(v, h * dh, dh);
            let o = g.matmul(p, vh);
            g.scale_by_elem(o, head_scale, h)
        })
        .collect();
    let cat = g.concat_cols(outs);
    match bo {
        Some(b) => g.linear(cat, wo, b),
        None => g.matmul(cat, wo),
    }
}

/// Full attention sub-layer.
pub(crate) fn attention(g: &mut Graph, s: &Scores, mask: Option<Rc<Vec<bool>>>) -> NodeId {
    let scores = head_scores(g, s);
    let probs: Vec<NodeId> = scores.into_iter().map(|sc| g.softmax(sc, mask.clone())).collect();
    let (wv, bv) = (g.param(s.ids.wv), g.param(s.ids.bv));
    let v = g.linear(s.key_in, wv, bv);
    let (gamma, wo, bo) = (g.param(s.ids.head_scale), g.param(s.ids.wo), g.param(s.ids.bo));
    combine_heads(g, &probs, v, gamma, wo, Some(bo))
}

/// Attention scores of one layer for explicit content rows `I` and position
/// rows `P`. Masked entries (`true`) come back as `-inf`.
pub fn attention_scores(
    params: &ModelParams,
    attn: &AttnIds,
    content: &Mat,
    positions: &Mat,
    biases: &[RelativeBias],
    mask: Option<&[bool]>,
) -> Result<Vec<Mat>> {
    if content.rows != positions.rows {
        return Err(Error::Shape(format!(
            "content has {} rows but positions have {}",
            content.rows, positions.rows
        )));
    }
    let d = params.config.hidden;
    if content.cols != d || positions.cols != d {
        return Err(Error::Shape(format!("rows must have width {d}")));
    }
    let n = content.rows;
    if let Some(m) = mask {
        if m.len() != n * n {
            return Err(Error::Shape(format!("mask needs {} entries", n * n)));
        }
    }
    for b in biases {
        if b.index.len() != n * n {
            return Err(Error::Shape(format!("bias index needs {} entries", n * n)));
        }
    }
    let mut g = Graph::new(&params.tensors);
    let x = g.constant(content.clone());
    let p = g.constant(positions.clone());
    let s = Scores { ids: attn, heads: params.config.heads, query_in: x, key_in: x, positions: Some(p), biases };
    let heads = head_scores(&mut g, &s);
    Ok(heads
        .into_iter()
        .map(|h| {
            let mut m = g.value(h).clone();
            if let Some(mask) = mask {
                m.data.iter_mut().zip(mask).filter(|(_, &b)| b).for_each(|(v, _)| *v = f64::NEG_INFINITY);
            }
            m
        })
        .collect())
}

/// Row-wise softmax of a score matrix (`-inf` entries get zero weight).
pub fn softmax_rows(scores: &Mat) -> Mat {
    let mut out = scores.clone();
    for r in 0..out.rows {
        tensor::softmax_in_place(out.row_mut(r));
    }
    out
}

/// Combines per-head attention weights with the projected values `V`
/// (`n x d`, heads laid out contiguously along columns).
pub fn multi_head_attention(
    probs: &[Mat],
    values: &Mat,
    head_scale: &[f64],
    w_o: &Mat,
    b_o: Option<&Mat>,
) -> Result<Mat> {
    let heads = probs.len();
    if heads == 0 || head_scale.len() != heads || !values.cols.is_multiple_of(heads) {
        return Err(Error::Shape(format!(
            "{heads} heads, {} scales, value width {}",
            head_scale.len(),
            values.cols
        )));
    }
    if probs.iter().any(|p| p.cols != values.rows) || w_o.rows != values.cols {
        return Err(Error::Shape("attention weights, values and output projection disagree".into()));
    }
    let scratch: Vec<Mat> = Vec::new();
    let mut g = Graph::new(&scratch);
    let pn: Vec<NodeId> = probs.iter().map(|p| g.constant(p.clone())).collect();
    let v = g.constant(values.clone());
    let gamma = g.constant(Mat::from_vec(1, heads, head_scale.to_vec()));
    let wo = g.constant(w_o.clone());
    let bo = b_o.map(|b| g.constant(b.clone()));
    let out = combine_heads(&mut g, &pn, v, gamma, wo, bo);
    Ok(g.value(out).clone())
}
