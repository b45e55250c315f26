//! Sequence-to-sequence objective, AdamW with warmup/linear decay, and a
//! central-difference gradient checker.

use std::time::Instant;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::model::forward::Ctx;
use crate::model::{ModelParams, Mode};
use crate::tasks::Sample;
use crate::tensor::{self, Mat};
use crate::tokenization::BOS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
    /// Updates applied so far.
    pub t: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub peak_lr: f64,
    pub total_steps: usize,
    pub warmup_ratio: f64,
    pub label_smoothing: f64,
    /// Global gradient-norm clip; off when `None`.
    pub max_grad_norm: Option<f64>,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, total_steps: usize) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            peak_lr: 1e-4,
            total_steps,
            warmup_ratio: 0.01,
            label_smoothing: 0.1,
            max_grad_norm: None,
        }
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_ratio * self.total_steps as f64).round() as usize
    }
}

/// Linear ramp from 0 to the peak over the warmup steps, then linear decay to
/// 0 at `total_steps`.
pub fn lr_at(state: &OptimizerState, step: usize) -> Result<f64> {
    let total = state.total_steps;
    if step > total {
        return Err(Error::InvalidArgument(format!("step {step} is past the {total} scheduled steps")));
    }
    let warm = state.warmup_steps();
    let peak = state.peak_lr;
    Ok(if step <= warm {
        if warm == 0 {
            peak
        } else {
            peak * step as f64 / warm as f64
        }
    } else {
        peak * (total - step) as f64 / (total - warm) as f64
    })
}

/// One AdamW update at learning rate `lr`; decay is applied to the weights
/// directly, apart from the moment estimates.
pub fn adamw_step(params: &mut [Mat], grads: &[Mat], state: &mut OptimizerState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape("parameters, gradients and moments disagree".into()));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps, decay) = (state.beta1, state.beta2, state.eps, lr * state.weight_decay);
    for (((w, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        if w.shape() != g.shape() || w.shape() != m.shape() {
            return Err(Error::Shape("gradient shape does not match its parameter".into()));
        }
        for i in 0..w.data.len() {
            let gi = g.data[i];
            m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
            v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
            let mhat = m.data[i] / c1;
            let vhat = v.data[i] / c2;
            w.data[i] -= decay * w.data[i];
            w.data[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Scales gradients so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Mat], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| &g.data).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale_assign(s));
    }
    norm
}

/// Mean over non-pad rows of `(1-s)·NLL(target) + s·mean_v NLL(v)`.
/// `pad_mask[i]` marks row `i` as padding.
pub fn seq2seq_loss(logits: &Mat, target_ids: &[u32], pad_mask: &[bool], label_smoothing: f64) -> Result<f64> {
    if logits.rows != target_ids.len() || pad_mask.len() != target_ids.len() {
        return Err(Error::Shape(format!(
            "{} logit rows, {} targets, {} mask entries",
            logits.rows,
            target_ids.len(),
            pad_mask.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0;
    for (r, (&t, &pad)) in target_ids.iter().zip(pad_mask).enumerate() {
        if pad {
            continue;
        }
        let row = logits.row(r);
        let t = t as usize;
        if t >= row.len() {
            return Err(Error::InvalidArgument(format!("target {t} outside {} logits", row.len())));
        }
        let lse = tensor::log_sum_exp(row);
        let nll = lse - row[t];
        let mean_nll = lse - row.iter().sum::<f64>() / row.len() as f64;
        total += (1.0 - label_smoothing) * nll + label_smoothing * mean_nll;
        count += 1;
    }
    if count == 0 {
        return Err(Error::InvalidArgument("every target position is padding".into()));
    }
    Ok(total / count as f64)
}

/// Decoder input for teacher forcing: bos followed by all but the last target.
pub fn decoder_input(target_ids: &[u32]) -> Vec<u32> {
    let mut p = Vec::with_capacity(target_ids.len());
    p.push(BOS);
    p.extend_from_slice(&target_ids[..target_ids.len().saturating_sub(1)]);
    p
}

/// Forward-pass randomness for one batch.
pub enum Regularization<'r> {
    /// No dropout, branches scaled deterministically.
    Off,
    On { rng: &'r mut ChaCha8Rng, dropout: f64 },
}

/// Token-mean loss over the batch and its gradient for every parameter.
pub fn compute_grads(
    params: &ModelParams,
    batch: &[Sample],
    label_smoothing: f64,
    mut reg: Regularization,
) -> Result<(f64, Vec<Mat>)> {
    let total_tokens: usize = batch.iter().map(|s| s.target_ids.len()).sum();
    if batch.is_empty() || batch.iter().any(|s| s.target_ids.is_empty()) {
        return Err(Error::InvalidArgument("batch has no target tokens".into()));
    }
    let weight = 1.0 / total_tokens as f64;
    let mut grads = params.zeros_like();
    let mut loss = 0.0;
    for s in batch {
        let mut g = Graph::new(&params.tensors);
        let mut ctx = match &mut reg {
            Regularization::Off => Ctx::new(params, Mode::Eval),
            Regularization::On { rng, dropout } => {
                let mut c = Ctx::new(params, Mode::Train(rng));
                c.dropout = *dropout;
                c
            }
        };
        let enc = ctx.encode(&mut g, &s.source_text_ids, &s.source_patches)?;
        let h = ctx.decode_hidden(&mut g, enc, &decoder_input(&s.target_ids))?;
        let logits = ctx.logits(&mut g, h);
        let l = g.cross_entropy(logits, s.target_ids.clone(), label_smoothing, weight);
        let value = g.scalar(l);
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step: 0 });
        }
        loss += value;
        g.backward(l, &mut grads);
    }
    Ok((loss, grads))
}

/// Token-mean loss without gradients, deterministic mode.
pub fn batch_loss(params: &ModelParams, batch: &[Sample], label_smoothing: f64) -> Result<f64> {
    let total_tokens: usize = batch.iter().map(|s| s.target_ids.len()).sum();
    if total_tokens == 0 {
        return Err(Error::InvalidArgument("batch has no target tokens".into()));
    }
    let mut loss = 0.0;
    for s in batch {
        let mut g = Graph::new(&params.tensors);
        let mut ctx = Ctx::new(params, Mode::Eval);
        let enc = ctx.encode(&mut g, &s.source_text_ids, &s.source_patches)?;
        let h = ctx.decode_hidden(&mut g, enc, &decoder_input(&s.target_ids))?;
        let logits = ctx.logits(&mut g, h);
        let l = g.cross_entropy(logits, s.target_ids.clone(), label_smoothing, 1.0 / total_tokens as f64);
        loss += g.scalar(l);
    }
    Ok(loss)
}

/// `(L(w + h) - L(w - h)) / 2h` for one parameter entry.
pub fn numeric_grad(
    params: &ModelParams,
    batch: &[Sample],
    label_smoothing: f64,
    tensor: usize,
    entry: usize,
    h: f64,
) -> Result<f64> {
    let mut p = params.clone();
    let w = p.tensors[tensor].data[entry];
    p.tensors[tensor].data[entry] = w + h;
    let up = batch_loss(&p, batch, label_smoothing)?;
    p.tensors[tensor].data[entry] = w - h;
    let down = batch_loss(&p, batch, label_smoothing)?;
    Ok((up - down) / (2.0 * h))
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub checked: usize,
    /// `(tensor name, entry)` of the worst entry.
    pub worst: (String, usize),
    /// Analytic and numeric gradient at the worst entry.
    pub worst_values: (f64, f64),
}

/// Compares analytic gradients with central differences on `entries` random
/// parameter entries (every entry when the model has fewer).
pub fn grad_check(
    params: &ModelParams,
    batch: &[Sample],
    label_smoothing: f64,
    h: f64,
    entries: usize,
    rng: &mut impl Rng,
) -> Result<GradCheck> {
    let (_, grads) = compute_grads(params, batch, label_smoothing, Regularization::Off)?;
    let flat: Vec<(usize, usize)> =
        params.tensors.iter().enumerate().flat_map(|(t, m)| (0..m.len()).map(move |e| (t, e))).collect();
    let picks: Vec<usize> = if flat.len() <= entries {
        (0..flat.len()).collect()
    } else {
        let mut v = index::sample(rng, flat.len(), entries).into_vec();
        v.sort_unstable();
        v
    };
    let mut out =
        GradCheck { max_relative_error: 0.0, checked: 0, worst: (String::new(), 0), worst_values: (0.0, 0.0) };
    for i in picks {
        let (t, e) = flat[i];
        let numeric = numeric_grad(params, batch, label_smoothing, t, e, h)?;
        let err = relative_error(grads[t].data[e], numeric);
        if err > out.max_relative_error || out.checked == 0 {
            out.max_relative_error = err;
            out.worst = (params.names[t].clone(), e);
            out.worst_values = (grads[t].data[e], numeric);
        }
        out.checked += 1;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub seconds: f64,
}

impl TrainRecord {
    /// Log line without wall time, so logs of identical runs match byte for byte.
    pub fn log_line(&self) -> String {
        format!("step={} lr={:.6e} loss={:.6}", self.step, self.lr, self.loss)
    }
}

pub struct TrainOptions<'c> {
    pub dropout: f64,
    /// Seed for dropout and stochastic-depth draws.
    pub seed: u64,
    pub checkpoint_every: Option<usize>,
    pub on_checkpoint: Option<&'c mut dyn FnMut(usize, &ModelParams) -> Result<()>>,
    pub on_record: Option<&'c mut dyn FnMut(&TrainRecord) -> Result<()>>,
}

impl Default for TrainOptions<'_> {
    fn default() -> Self {
        Self { dropout: 0.1, seed: 0, checkpoint_every: None, on_checkpoint: None, on_record: None }
    }
}

/// Runs one optimizer update per batch.
pub fn train_epoch<I>(
    params: &mut ModelParams,
    state: &mut OptimizerState,
    batches: I,
    mut opts: TrainOptions,
) -> Result<Vec<TrainRecord>>
where
    I: IntoIterator<Item = Vec<Sample>>,
{
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (state.t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut records = Vec::new();
    let start = Instant::now();
    for batch in batches {
        let step = state.t + 1;
        let lr = lr_at(state, step)?;
        let reg = if opts.dropout > 0.0 || params.config.stochastic_depth > 0.0 {
            Regularization::On { rng: &mut rng, dropout: opts.dropout }
        } else {
            Regularization::Off
        };
        let (loss, mut grads) = match compute_grads(params, &batch, state.label_smoothing, reg) {
            Err(Error::NonFiniteLoss { .. }) => return Err(Error::NonFiniteLoss { step }),
            other => other?,
        };
        if let Some(max) = state.max_grad_norm {
            clip_grad_norm(&mut grads, max);
        }
        adamw_step(&mut params.tensors, &grads, state, lr)?;
        let rec = TrainRecord { step, lr, loss, seconds: start.elapsed().as_secs_f64() };
        if let Some(f) = opts.on_record.as_mut() {
            f(&rec)?;
        }
        records.push(rec);
        if let (Some(every), Some(f)) = (opts.checkpoint_every, opts.on_checkpoint.as_mut()) {
            if every > 0 && step.is_multiple_of(every) {
                f(step, params)?;
            }
        }
    }
    Ok(records)
}
