//! In-batch contrastive training shared by the retrieval encoders and the
//! evaluation feature extractors.

use promo_nn::{derive_seed, rng_from, AdamW, AdamWConfig, NnError, ParamId, ParamStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Initial softmax temperature; the learnable logit scale starts at its inverse.
pub const INIT_TEMPERATURE: f64 = 0.07;
/// Upper bound on the learned logit scale.
pub const MAX_LOGIT_SCALE: f64 = 100.0;

#[derive(Debug, Error)]
pub enum ContrastiveError {
    #[error("contrastive batch needs at least 2 pairs, got {0}")]
    BatchTooSmall(usize),
    #[error("dataset of {n} pairs is smaller than the batch size {batch}")]
    DatasetTooSmall { n: usize, batch: usize },
    #[error("non-finite contrastive loss at epoch {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig { epochs: 40, batch_size: 32, lr: 1e-3 }
    }
}

pub fn add_logit_scale(store: &mut ParamStore<f32>, name: &str) -> ParamId {
    store.add_const(name, &[1], (1.0 / INIT_TEMPERATURE).ln())
}

/// Symmetric cross-entropy of `exp(s) * a bᵀ` against the diagonal.
pub fn symmetric_loss(tape: &mut Tape<'_, f32>, a: Var, b: Var, log_scale: ParamId) -> Var {
    let n = tape.shape(a)[0];
    let s = tape.param(log_scale);
    let scale = tape.exp(s);
    let ab = tape.matmul_t(a, b, false, true);
    let ab = tape.scale_var(ab, scale);
    let ba = tape.matmul_t(b, a, false, true);
    let ba = tape.scale_var(ba, scale);
    let targets: Vec<usize> = (0..n).collect();
    let l1 = tape.cross_entropy(ab, &targets);
    let l2 = tape.cross_entropy(ba, &targets);
    let sum = tape.add(l1, l2);
    tape.scale(sum, 0.5)
}

/// Trains `store` so that the two embeddings produced by `encode` for each
/// index agree; returns the per-epoch mean loss.
pub fn train_contrastive(
    store: &mut ParamStore<f32>,
    log_scale: ParamId,
    n: usize,
    cfg: &ContrastiveConfig,
    seed: u64,
    encode: impl Fn(&mut Tape<'_, f32>, &[usize]) -> Result<(Var, Var), NnError>,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Vec<f64>, ContrastiveError> {
    if cfg.batch_size < 2 {
        return Err(ContrastiveError::BatchTooSmall(cfg.batch_size));
    }
    if n < cfg.batch_size {
        return Err(ContrastiveError::DatasetTooSmall { n, batch: cfg.batch_size });
    }
    let mut opt = AdamW::new(AdamWConfig { lr: cfg.lr, ..AdamWConfig::default() }, store);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_from(derive_seed(seed, &[epoch as u64, 0])));
        let mut total = 0.0;
        let mut batches = 0;
        // A trailing partial batch with fewer than two pairs carries no contrast.
        for (bi, chunk) in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2).enumerate() {
            let grads = {
                let mut tape = Tape::new(store, true, derive_seed(seed, &[epoch as u64, 1, bi as u64]));
                let (a, b) = encode(&mut tape, chunk)?;
                let loss = symmetric_loss(&mut tape, a, b, log_scale);
                let v = tape.value(loss).data()[0] as f64;
                if !v.is_finite() {
                    return Err(ContrastiveError::NonFinite(epoch));
                }
                total += v;
                batches += 1;
                tape.backward_scalar(loss)?
            };
            opt.step(store, &grads)?;
            let s = store.get_mut(log_scale);
            let cap = MAX_LOGIT_SCALE.ln() as f32;
            s.data_mut()[0] = s.data()[0].clamp(0.0, cap);
        }
        let mean = total / batches.max(1) as f64;
        on_epoch(epoch, mean);
        history.push(mean);
    }
    Ok(history)
}

/// Runs `encode` outside training mode and returns the rows of its output.
pub fn embed_rows(
    store: &ParamStore<f32>,
    n: usize,
    chunk: usize,
    encode: impl Fn(&mut Tape<'_, f32>, &[usize]) -> Result<Var, NnError>,
) -> Result<Vec<Vec<f32>>, NnError> {
    let mut out = Vec::with_capacity(n);
    let idx: Vec<usize> = (0..n).collect();
    for c in idx.chunks(chunk.max(1)) {
        let mut tape = Tape::new(store, false, 0);
        let v = encode(&mut tape, c)?;
        let t: &Tensor<f32> = tape.value(v);
        out.extend(t.data().chunks(t.last_dim()).map(|r| r.to_vec()));
    }
    Ok(out)
}

/// Fraction of rows of `a` whose most similar row of `b` within the same
/// consecutive batch is the matching one; ties resolve to the lower index.
pub fn in_batch_top1(a: &[Vec<f32>], b: &[Vec<f32>], batch: usize) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut hits = 0;
    let mut total = 0;
    for start in (0..a.len()).step_by(batch.max(1)) {
        let end = (start + batch).min(a.len());
        for i in start..end {
            let mut best = start;
            let mut best_s = f32::NEG_INFINITY;
            for j in start..end {
                let s: f32 = a[i].iter().zip(&b[j]).map(|(x, y)| x * y).sum();
                if s > best_s {
                    best_s = s;
                    best = j;
                }
            }
            hits += usize::from(best == i);
            total += 1;
        }
    }
    hits as f64 / total.max(1) as f64
}
