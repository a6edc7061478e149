//! Parameterized building blocks recorded onto a [`Tape`].

use rand_chacha::ChaCha8Rng;

use crate::error::{NnError, Result};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    pub fn new<E: Real>(store: &mut ParamStore<E>, name: &str, inp: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = store.add_uniform(&format!("{name}.w"), &[inp, out], inp, rng);
        let b = store.add_uniform(&format!("{name}.b"), &[out], inp, rng);
        Linear { w, b, inp, out }
    }

    /// Applies to the last dimension of an input of any rank.
    pub fn forward<E: Real>(&self, tape: &mut Tape<'_, E>, x: Var) -> Var {
        assert_eq!(*tape.shape(x).last().unwrap(), self.inp, "linear input dim");
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<E: Real>(store: &mut ParamStore<E>, name: &str, dim: usize) -> Self {
        let gamma = store.add_const(&format!("{name}.gamma"), &[dim], 1.0);
        let beta = store.add_const(&format!("{name}.beta"), &[dim], 0.0);
        LayerNorm { gamma, beta, dim }
    }

    pub fn forward<E: Real>(&self, tape: &mut Tape<'_, E>, x: Var) -> Var {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b, Self::EPS)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    /// Rows drawn from normal(0, 0.02).
    pub fn new<E: Real>(store: &mut ParamStore<E>, name: &str, vocab: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let table = store.add_normal(&format!("{name}.table"), &[vocab, dim], 0.02, rng);
        Embedding { table, vocab, dim }
    }

    pub fn lookup<E: Real>(&self, tape: &mut Tape<'_, E>, ids: &[usize]) -> Var {
        let t = tape.param(self.table);
        tape.gather(t, ids)
    }

    pub fn bag<E: Real>(&self, tape: &mut Tape<'_, E>, bags: &[Vec<usize>]) -> Var {
        let t = tape.param(self.table);
        tape.embedding_bag(t, bags)
    }
}

/// Two linear layers with a GELU in between.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
    pub dropout: f64,
}

impl FeedForward {
    pub fn new<E: Real>(
        store: &mut ParamStore<E>,
        name: &str,
        inp: usize,
        hidden: usize,
        out: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        FeedForward {
            l1: Linear::new(store, &format!("{name}.l1"), inp, hidden, rng),
            l2: Linear::new(store, &format!("{name}.l2"), hidden, out, rng),
            dropout,
        }
    }

    pub fn forward<E: Real>(&self, tape: &mut Tape<'_, E>, x: Var) -> Var {
        let h = self.l1.forward(tape, x);
        let h = tape.gelu(h);
        let h = tape.dropout(h, self.dropout);
        self.l2.forward(tape, h)
    }
}

/// Multi-head scaled dot-product attention with input and output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
    pub dropout: f64,
}

impl MultiHeadAttention {
    pub fn new<E: Real>(
        store: &mut ParamStore<E>,
        name: &str,
        dim: usize,
        heads: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(NnError::HeadSplit { dim, heads });
        }
        Ok(MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
            dim,
            dropout,
        })
    }

    /// `queries: [B, Tq, d]`, `keys_values: [B, Tk, d]`; `key_keep` has
    /// `B * Tk` flags, `false` marking padding.
    pub fn forward<E: Real>(
        &self,
        tape: &mut Tape<'_, E>,
        queries: Var,
        keys_values: Var,
        key_keep: Option<&[bool]>,
    ) -> Result<Var> {
        let b = tape.shape(queries)[0];
        let tk = tape.shape(keys_values)[1];
        let q = self.q.forward(tape, queries);
        let k = self.k.forward(tape, keys_values);
        let v = self.v.forward(tape, keys_values);
        if let Some(keep) = key_keep {
            assert_eq!(keep.len(), b * tk, "key mask length");
            if keep.chunks(tk).any(|row| !row.iter().any(|&k| k)) {
                return Err(NnError::AllMasked);
            }
        }
        let ctx = tape.attention(q, k, v, self.heads, key_keep, self.dropout);
        Ok(self.o.forward(tape, ctx))
    }
}

/// Single-layer bidirectional GRU.
#[derive(Clone, Debug)]
pub struct BiGru {
    pub fwd: GruCell,
    pub bwd: GruCell,
    pub inp: usize,
    pub hidden: usize,
}

/// Gates ordered (reset, update, candidate) along the output columns.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub w_in: Linear,
    pub w_hid: Linear,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<E: Real>(store: &mut ParamStore<E>, name: &str, inp: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        GruCell {
            w_in: Linear::new(store, &format!("{name}.in"), inp, 3 * hidden, rng),
            w_hid: Linear::new(store, &format!("{name}.hid"), hidden, 3 * hidden, rng),
            hidden,
        }
    }

    /// One step given the precomputed input projection `xp: [B, 3h]`.
    fn step<E: Real>(&self, tape: &mut Tape<'_, E>, xp: Var, h: Var) -> Var {
        let b = tape.shape(h)[0];
        let hd = self.hidden;
        let hp = self.w_hid.forward(tape, h);
        let xp3 = tape.reshape(xp, &[b, 3, hd]);
        let hp3 = tape.reshape(hp, &[b, 3, hd]);
        let x_r = tape.slice_seq(xp3, 0, 1);
        let x_z = tape.slice_seq(xp3, 1, 1);
        let x_n = tape.slice_seq(xp3, 2, 1);
        let h_r = tape.slice_seq(hp3, 0, 1);
        let h_z = tape.slice_seq(hp3, 1, 1);
        let h_n = tape.slice_seq(hp3, 2, 1);
        let r = tape.add(x_r, h_r);
        let r = tape.sigmoid(r);
        let z = tape.add(x_z, h_z);
        let z = tape.sigmoid(z);
        let rn = tape.mul(r, h_n);
        let n = tape.add(x_n, rn);
        let n = tape.tanh(n);
        let n = tape.reshape(n, &[b, hd]);
        let z = tape.reshape(z, &[b, hd]);
        // h' = n + z * (h - n)
        let diff = tape.sub(h, n);
        let zd = tape.mul(z, diff);
        tape.add(n, zd)
    }

    /// Runs over `xp: [B, T, 3h]` in the given direction. Positions with
    /// `keep == false` leave the state untouched.
    fn run<E: Real>(&self, tape: &mut Tape<'_, E>, xp: Var, keep: &[bool], reverse: bool) -> Var {
        let s = tape.shape(xp).to_vec();
        let (b, t) = (s[0], s[1]);
        let mut h = tape.leaf(Tensor::zeros(&[b, self.hidden]));
        let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
        for ti in order {
            let x = tape.slice_seq(xp, ti, 1);
            let x = tape.reshape(x, &[b, 3 * self.hidden]);
            let next = self.step(tape, x, h);
            let col: Vec<bool> = (0..b).map(|bi| keep[bi * t + ti]).collect();
            if col.iter().all(|&k| k) {
                h = next;
            } else if col.iter().any(|&k| k) {
                let m: Vec<E> = col
                    .iter()
                    .flat_map(|&k| std::iter::repeat_n(if k { E::one() } else { E::zero() }, self.hidden))
                    .collect();
                let m = tape.leaf(Tensor::new(vec![b, self.hidden], m).unwrap());
                let delta = tape.sub(next, h);
                let delta = tape.mul(m, delta);
                h = tape.add(h, delta);
            }
        }
        h
    }
}

impl BiGru {
    pub fn new<E: Real>(store: &mut ParamStore<E>, name: &str, inp: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        BiGru {
            fwd: GruCell::new(store, &format!("{name}.fwd"), inp, hidden, rng),
            bwd: GruCell::new(store, &format!("{name}.bwd"), inp, hidden, rng),
            inp,
            hidden,
        }
    }

    /// `x: [B, T, inp]` -> concatenated final states `[B, 2 * hidden]`.
    pub fn forward<E: Real>(&self, tape: &mut Tape<'_, E>, x: Var, keep: Option<&[bool]>) -> Var {
        let s = tape.shape(x).to_vec();
        let (b, t) = (s[0], s[1]);
        let all = vec![true; b * t];
        let keep = keep.unwrap_or(&all);
        let xf = self.fwd.w_in.forward(tape, x);
        let xb = self.bwd.w_in.forward(tape, x);
        let hf = self.fwd.run(tape, xf, keep, false);
        let hb = self.bwd.run(tape, xb, keep, true);
        let hf = tape.reshape(hf, &[b, 1, self.hidden]);
        let hb = tape.reshape(hb, &[b, 1, self.hidden]);
        let cat = tape.concat_seq(hf, hb);
        tape.reshape(cat, &[b, 2 * self.hidden])
    }
}

/// Interleaved sine/cosine embedding of an integer timestep:
/// `e[2i] = sin(t * w_i)`, `e[2i+1] = cos(t * w_i)`, `w_i = 10000^(-2i/dim)`.
pub fn sinusoidal_embedding<E: Real>(t: f64, dim: usize) -> Result<Vec<E>> {
    if !dim.is_multiple_of(2) {
        return Err(NnError::OddDimension(dim));
    }
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let w = 10000f64.powf(-(2.0 * i as f64) / dim as f64);
        out.push(E::c((t * w).sin()));
        out.push(E::c((t * w).cos()));
    }
    Ok(out)
}

/// Stacked sinusoidal embeddings for a batch of timesteps: `[B, dim]`.
pub fn sinusoidal_batch<E: Real>(ts: &[usize], dim: usize) -> Result<Tensor<E>> {
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend(sinusoidal_embedding::<E>(t as f64, dim)?);
    }
    Tensor::new(vec![ts.len(), dim], data)
}
