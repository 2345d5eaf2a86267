use rayon::prelude::*;

use super::{Head, ModelParams};
use crate::error::{Error, Result};
use crate::markov::{entropy, SequenceBatch, TaskSpec};
use crate::numerics::softmax_in_place;

/// Sequences per unit of parallel work. Partial results are reduced in index
/// order, so the result does not depend on the thread count.
const CHUNK: usize = 16;

/// Smallest probability whose logarithm is taken.
const PROB_FLOOR: f64 = 1e-300;

/// Everything the forward pass produces for a batch.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    count: usize,
    d: usize,
    t: usize,
    h: usize,
    seq_len: usize,
    // [n][k][step][key], masked keys exactly zero
    attention: Vec<f64>,
    // [n][step][token]
    logits: Vec<f64>,
    predictions: Vec<f64>,
}

impl ForwardCache {
    pub fn count(&self) -> usize {
        self.count
    }

    /// Alphabet size.
    pub fn d(&self) -> usize {
        self.d
    }

    /// Generated positions per sequence.
    pub fn t(&self) -> usize {
        self.t
    }

    /// Attention of head `k` over all `T + w` key positions when predicting
    /// generated token `step` (position `w + step`).
    pub fn attention_row(&self, n: usize, k: usize, step: usize) -> &[f64] {
        let at = ((n * self.h + k) * self.t + step) * self.seq_len;
        &self.attention[at..at + self.seq_len]
    }

    pub fn logits(&self, n: usize, step: usize) -> &[f64] {
        let at = (n * self.t + step) * self.d;
        &self.logits[at..at + self.d]
    }

    pub fn prediction(&self, n: usize, step: usize) -> &[f64] {
        let at = (n * self.t + step) * self.d;
        &self.predictions[at..at + self.d]
    }
}

fn check_batch(params: &ModelParams, batch: &SequenceBatch) -> Result<()> {
    if batch.seq_len() != params.seq_len() {
        return Err(Error::dim(format!(
            "sequences of length {} for a model of length {}",
            batch.seq_len(),
            params.seq_len()
        )));
    }
    if let Some(bad) = batch.tokens().iter().find(|t| **t as usize >= params.d()) {
        return Err(Error::domain(format!("token id {bad} outside 0..{}", params.d())));
    }
    Ok(())
}

/// Per-sequence buffers, sized once per chunk.
struct Scratch {
    // u_j = V[:, tok_j] + V[:, d + j], one row of d per key
    values: Vec<f64>,
    // head contributions to the logits, [step][k][token]
    contrib: Vec<f64>,
    attention: Vec<f64>,
    logits: Vec<f64>,
    predictions: Vec<f64>,
    sorted: Vec<f64>,
}

impl Scratch {
    fn new(p: &ModelParams) -> Self {
        let (d, t, h, len) = (p.d(), p.t(), p.h(), p.seq_len());
        Self {
            values: vec![0.0; len * d],
            contrib: vec![0.0; t * h * d],
            attention: vec![0.0; h * t * len],
            logits: vec![0.0; t * d],
            predictions: vec![0.0; t * d],
            sorted: vec![0.0; h],
        }
    }
}

fn key_range(p: &ModelParams, pos: usize) -> std::ops::Range<usize> {
    let lo = p.context_limit().map_or(0, |c| pos.saturating_sub(c));
    lo..pos
}

fn token_values(head: &Head, tokens: &[u16], d: usize, out: &mut [f64]) {
    for (j, &tok) in tokens.iter().enumerate() {
        let a = head.value.column(tok as usize);
        let b = head.value.column(d + j);
        for (r, o) in out[j * d..(j + 1) * d].iter_mut().enumerate() {
            *o = a[r] + b[r];
        }
    }
}

fn forward_sequence(p: &ModelParams, tokens: &[u16], s: &mut Scratch) {
    let (d, w, t, h, len) = (p.d(), p.w(), p.t(), p.h(), p.seq_len());
    s.attention.iter_mut().for_each(|x| *x = 0.0);
    for (k, head) in p.heads.iter().enumerate() {
        token_values(head, tokens, d, &mut s.values);
        let a = &head.attn;
        for step in 0..t {
            let pos = w + step;
            let q = pos - 1;
            let tq = tokens[q] as usize;
            let keys = key_range(p, pos);
            let row = &mut s.attention[(k * t + step) * len..(k * t + step + 1) * len];
            for j in keys.clone() {
                let tj = tokens[j] as usize;
                row[j] = a[(tj, tq)] + a[(tj, d + q)] + a[(d + j, tq)] + a[(d + j, d + q)];
            }
            softmax_in_place(&mut row[keys.clone()]);
            let c = &mut s.contrib[(step * h + k) * d..(step * h + k + 1) * d];
            c.iter_mut().for_each(|x| *x = 0.0);
            for j in keys {
                let aj = row[j];
                for (ci, u) in c.iter_mut().zip(&s.values[j * d..(j + 1) * d]) {
                    *ci += aj * u;
                }
            }
        }
    }
    // Heads are summed in sorted order so that relabeling heads leaves the
    // logits bit-identical.
    for step in 0..t {
        for r in 0..d {
            for k in 0..h {
                s.sorted[k] = s.contrib[(step * h + k) * d + r];
            }
            s.sorted.sort_by(f64::total_cmp);
            s.logits[step * d + r] = s.sorted.iter().sum();
        }
    }
    s.predictions.copy_from_slice(&s.logits);
    for step in 0..t {
        softmax_in_place(&mut s.predictions[step * d..(step + 1) * d]);
    }
}

/// Sum over generated positions of `−ln y[target]`.
fn sequence_nll(p: &ModelParams, tokens: &[u16], predictions: &[f64]) -> Result<f64> {
    let (d, w) = (p.d(), p.w());
    let mut total = 0.0;
    for step in 0..p.t() {
        let y = predictions[step * d + tokens[w + step] as usize];
        if !(y >= PROB_FLOOR) {
            return Err(Error::Numeric(format!(
                "predicted probability {y:e} of an observed token is below {PROB_FLOOR:e}"
            )));
        }
        total -= y.ln();
    }
    Ok(total)
}

struct BackScratch {
    values: Vec<f64>,
    // gradient reaching u_j, one row of d per key
    key_grad: Vec<f64>,
    dz: Vec<f64>,
    da: Vec<f64>,
}

impl BackScratch {
    fn new(p: &ModelParams) -> Self {
        let (d, t, len) = (p.d(), p.t(), p.seq_len());
        Self {
            values: vec![0.0; len * d],
            key_grad: vec![0.0; len * d],
            dz: vec![0.0; t * d],
            da: vec![0.0; len],
        }
    }
}

/// Adds the gradient of `scale · Σ_steps −ln y[target]` for one sequence.
fn backward_sequence(
    p: &ModelParams,
    tokens: &[u16],
    attention: &[f64],
    predictions: &[f64],
    scale: f64,
    grads: &mut ModelParams,
    b: &mut BackScratch,
) {
    let (d, w, t, len) = (p.d(), p.w(), p.t(), p.seq_len());
    let BackScratch {
        values,
        key_grad,
        dz,
        da,
    } = b;
    for step in 0..t {
        let z = &mut dz[step * d..(step + 1) * d];
        z.copy_from_slice(&predictions[step * d..(step + 1) * d]);
        z[tokens[w + step] as usize] -= 1.0;
        z.iter_mut().for_each(|x| *x *= scale);
    }
    for (k, head) in p.heads.iter().enumerate() {
        token_values(head, tokens, d, values);
        key_grad.iter_mut().for_each(|x| *x = 0.0);
        let g = &mut grads.heads[k];
        for step in 0..t {
            let pos = w + step;
            let q = pos - 1;
            let tq = tokens[q] as usize;
            let keys = key_range(p, pos);
            let row = &attention[(k * t + step) * len..(k * t + step + 1) * len];
            let z = &dz[step * d..(step + 1) * d];
            let mut mean = 0.0;
            for j in keys.clone() {
                let aj = row[j];
                let u = &values[j * d..(j + 1) * d];
                da[j] = z.iter().zip(u).map(|(a, b)| a * b).sum();
                mean += aj * da[j];
                for (kg, zi) in key_grad[j * d..(j + 1) * d].iter_mut().zip(z) {
                    *kg += aj * zi;
                }
            }
            for j in keys {
                let ds = row[j] * (da[j] - mean);
                if ds == 0.0 {
                    continue;
                }
                let tj = tokens[j] as usize;
                g.attn[(tj, tq)] += ds;
                g.attn[(tj, d + q)] += ds;
                g.attn[(d + j, tq)] += ds;
                g.attn[(d + j, d + q)] += ds;
            }
        }
        for (j, &tok) in tokens.iter().enumerate() {
            let kg = &key_grad[j * d..(j + 1) * d];
            for r in 0..d {
                g.value[(r, tok as usize)] += kg[r];
                g.value[(r, d + j)] += kg[r];
            }
        }
    }
}

pub fn forward(params: &ModelParams, batch: &SequenceBatch) -> Result<ForwardCache> {
    check_batch(params, batch)?;
    let (d, t, h, len) = (params.d(), params.t(), params.h(), params.seq_len());
    let n = batch.count();
    let mut cache = ForwardCache {
        count: n,
        d,
        t,
        h,
        seq_len: len,
        attention: vec![0.0; n * h * t * len],
        logits: vec![0.0; n * t * d],
        predictions: vec![0.0; n * t * d],
    };
    let att_per = h * t * len;
    let out_per = t * d;
    cache
        .attention
        .par_chunks_mut(att_per * CHUNK)
        .zip(cache.logits.par_chunks_mut(out_per * CHUNK))
        .zip(cache.predictions.par_chunks_mut(out_per * CHUNK))
        .enumerate()
        .for_each(|(c, ((att, logits), preds))| {
            let mut s = Scratch::new(params);
            for i in 0..att.len() / att_per {
                forward_sequence(params, batch.sequence(c * CHUNK + i), &mut s);
                att[i * att_per..(i + 1) * att_per].copy_from_slice(&s.attention);
                logits[i * out_per..(i + 1) * out_per].copy_from_slice(&s.logits);
                preds[i * out_per..(i + 1) * out_per].copy_from_slice(&s.predictions);
            }
        });
    Ok(cache)
}

/// Mean of `−ln y[target]` over sequences and generated positions. Seed
/// tokens are never targets.
pub fn cross_entropy(cache: &ForwardCache, batch: &SequenceBatch) -> Result<f64> {
    if cache.count != batch.count() || cache.seq_len != batch.seq_len() {
        return Err(Error::dim("cache and batch describe different inputs"));
    }
    let w = cache.seq_len - cache.t;
    let mut total = 0.0;
    for n in 0..cache.count {
        let seq = batch.sequence(n);
        for step in 0..cache.t {
            let y = cache.prediction(n, step)[seq[w + step] as usize];
            if !(y >= PROB_FLOOR) {
                return Err(Error::Numeric(format!(
                    "predicted probability {y:e} of an observed token is below {PROB_FLOOR:e}"
                )));
            }
            total -= y.ln();
        }
    }
    Ok(total / (cache.count * cache.t) as f64)
}

/// Cross-entropy minus the mean entropy of the true conditional at every
/// scored position.
pub fn excess_loss(spec: &TaskSpec, cache: &ForwardCache, batch: &SequenceBatch) -> Result<f64> {
    let ce = cross_entropy(cache, batch)?;
    let w = spec.w();
    if batch.seq_len() != spec.seq_len() {
        return Err(Error::dim("batch does not match the task"));
    }
    let mut floor = 0.0;
    for seq in batch.iter() {
        for pos in w..seq.len() {
            floor += entropy(spec.next_token_distribution(&seq[pos - w..pos])?.as_slice());
        }
    }
    Ok(ce - floor / (batch.count() * spec.t()) as f64)
}

/// Gradient of the mean cross-entropy with respect to every parameter.
/// The context limit stored in `params` is respected.
pub fn backward(params: &ModelParams, cache: &ForwardCache, batch: &SequenceBatch) -> Result<ModelParams> {
    check_batch(params, batch)?;
    if cache.count != batch.count() || cache.h != params.h() || cache.d != params.d() {
        return Err(Error::dim("cache was not produced by these parameters and batch"));
    }
    let scale = 1.0 / (batch.count() * params.t()) as f64;
    let (d, t, h, len) = (params.d(), params.t(), params.h(), params.seq_len());
    let parts: Vec<ModelParams> = (0..batch.count().div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut g = ModelParams::zeros(d, params.w(), t, h);
            let mut b = BackScratch::new(params);
            let mut att = vec![0.0; h * t * len];
            let mut preds = vec![0.0; t * d];
            for n in c * CHUNK..((c + 1) * CHUNK).min(batch.count()) {
                for k in 0..h {
                    for step in 0..t {
                        att[(k * t + step) * len..(k * t + step + 1) * len]
                            .copy_from_slice(cache.attention_row(n, k, step));
                    }
                }
                for step in 0..t {
                    preds[step * d..(step + 1) * d].copy_from_slice(cache.prediction(n, step));
                }
                backward_sequence(params, batch.sequence(n), &att, &preds, scale, &mut g, &mut b);
            }
            g
        })
        .collect();
    Ok(reduce(params, parts))
}

fn reduce(params: &ModelParams, parts: Vec<ModelParams>) -> ModelParams {
    let mut total = ModelParams::zeros(params.d(), params.w(), params.t(), params.h());
    for part in parts {
        for (acc, x) in total.slices_mut().zip(part.slices()) {
            for (a, b) in acc.iter_mut().zip(x) {
                *a += b;
            }
        }
    }
    total
}

/// Mean cross-entropy and its gradient in one pass without keeping a cache.
pub fn loss_and_grad(params: &ModelParams, batch: &SequenceBatch) -> Result<(f64, ModelParams)> {
    check_batch(params, batch)?;
    let scale = 1.0 / (batch.count() * params.t()) as f64;
    let (d, t, h) = (params.d(), params.t(), params.h());
    let parts: Vec<Result<(f64, ModelParams)>> = (0..batch.count().div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut g = ModelParams::zeros(d, params.w(), t, h);
            let mut s = Scratch::new(params);
            let mut b = BackScratch::new(params);
            let mut nll = 0.0;
            for n in c * CHUNK..((c + 1) * CHUNK).min(batch.count()) {
                let seq = batch.sequence(n);
                forward_sequence(params, seq, &mut s);
                nll += sequence_nll(params, seq, &s.predictions)?;
                backward_sequence(params, seq, &s.attention, &s.predictions, scale, &mut g, &mut b);
            }
            Ok((nll, g))
        })
        .collect();
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(parts.len());
    for part in parts {
        let (l, g) = part?;
        loss += l;
        grads.push(g);
    }
    Ok((loss * scale, reduce(params, grads)))
}

/// Mean cross-entropy without gradients, chunked like [`loss_and_grad`].
pub(crate) fn mean_loss(params: &ModelParams, batch: &SequenceBatch) -> Result<f64> {
    check_batch(params, batch)?;
    let parts: Vec<Result<f64>> = (0..batch.count().div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut s = Scratch::new(params);
            let mut nll = 0.0;
            for n in c * CHUNK..((c + 1) * CHUNK).min(batch.count()) {
                let seq = batch.sequence(n);
                forward_sequence(params, seq, &mut s);
                nll += sequence_nll(params, seq, &s.predictions)?;
            }
            Ok(nll)
        })
        .collect();
    let mut total = 0.0;
    for part in parts {
        total += part?;
    }
    Ok(total / (batch.count() * params.t()) as f64)
}

/// `−ln y[target]` for every scored position, computed from the logits as
/// `logsumexp(z) − z[target]`. Ordered by sequence, then position.
pub fn position_losses(params: &ModelParams, batch: &SequenceBatch) -> Result<Vec<f64>> {
    check_batch(params, batch)?;
    let (d, w, t) = (params.d(), params.w(), params.t());
    let mut s = Scratch::new(params);
    let mut out = Vec::with_capacity(batch.count() * t);
    for seq in batch.iter() {
        forward_sequence(params, seq, &mut s);
        for step in 0..t {
            let z = &s.logits[step * d..(step + 1) * d];
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            out.push(lse - z[seq[w + step] as usize]);
        }
    }
    Ok(out)
}

/// Largest coordinate-wise relative disagreement between [`loss_and_grad`]
/// and central differences with step `h`.
///
/// The difference quotient is assembled position by position,
/// `Σ_i (ℓ_i(x + h) − ℓ_i(x − h)) / (2h · B · T)`, so positions a coordinate
/// does not touch cancel exactly instead of contributing the rounding error
/// of the full mean. Each error is `|g − g_fd| / max(|g|, |g_fd|)`; entries
/// where both vanish count as exact.
pub fn gradient_check(params: &ModelParams, batch: &SequenceBatch, h: f64) -> Result<f64> {
    let (_, grad) = loss_and_grad(params, batch)?;
    let scale = 1.0 / (batch.count() * params.t()) as f64;
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for (i, g) in grad.flat().into_iter().enumerate() {
        let set = |p: &mut ModelParams, x: f64| {
            if let Some(slot) = p.slices_mut().flatten().nth(i) {
                *slot = x;
            }
        };
        let x0 = params.flat_at(i);
        set(&mut probe, x0 + h);
        let up = position_losses(&probe, batch)?;
        set(&mut probe, x0 - h);
        let down = position_losses(&probe, batch)?;
        set(&mut probe, x0);
        let diff: f64 = up.iter().zip(&down).map(|(a, b)| a - b).sum();
        let fd = diff / (2.0 * h) * scale;
        let denom = g.abs().max(fd.abs());
        if denom > 0.0 {
            worst = worst.max((g - fd).abs() / denom);
        }
    }
    Ok(worst)
}
