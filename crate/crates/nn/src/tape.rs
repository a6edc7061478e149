//! Reverse-mode autodiff over a closed set of primitives.
//!
//! Every primitive appends one node (value + op record) to the tape. Node ids
//! are allocated in creation order, so replaying the node list backwards is a
//! valid reverse topological order.

use crate::error::{NnError, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::real::{gemm_view, MatView, Real};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::Tensor;
use rand::Rng;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<E: Real> {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Linear { x: Var, w: Var, b: Var },
    BatchMatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddTrailing { x: Var, b: Var },
    MulTrailing { x: Var, g: Var },
    Affine { x: Var, scale: E },
    ScaleVar { x: Var, s: Var },
    Exp(Var),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<E>, rstd: Vec<E> },
    Gather { table: Var, ids: Vec<usize> },
    EmbeddingBag { table: Var, bags: Vec<Vec<usize>> },
    Dropout { x: Var, mask: Vec<E> },
    ConcatSeq { a: Var, b: Var },
    SliceSeq { x: Var, start: usize },
    SplitHeads { x: Var, heads: usize },
    MergeHeads { x: Var, heads: usize },
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    Mse { a: Var, b: Var },
    L2Normalize { x: Var, norms: Vec<E> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<E> },
    WeightedSeqSum { x: Var, weights: Vec<E> },
    Attention { q: Var, k: Var, v: Var, heads: usize, scale: E, probs: Vec<E>, mask: Option<Vec<E>> },
}

impl<E: Real> Op<E> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => Vec::new(),
            Op::MatMul { a, b, .. } | Op::BatchMatMul { a, b, .. } | Op::ConcatSeq { a, b } | Op::Mse { a, b } => {
                vec![*a, *b]
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddTrailing { x, b } => vec![*x, *b],
            Op::MulTrailing { x, g } => vec![*x, *g],
            Op::ScaleVar { x, s } => vec![*x, *s],
            Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Gather { table, .. } | Op::EmbeddingBag { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Affine { x, .. }
            | Op::Softmax { x }
            | Op::Dropout { x, .. }
            | Op::SliceSeq { x, .. }
            | Op::SplitHeads { x, .. }
            | Op::MergeHeads { x, .. }
            | Op::L2Normalize { x, .. }
            | Op::WeightedSeqSum { x, .. } => vec![*x],
            Op::Exp(x) | Op::Gelu(x) | Op::Sigmoid(x) | Op::Tanh(x) | Op::Reshape(x) | Op::SumAll(x) | Op::MeanAll(x) => {
                vec![*x]
            }
        }
    }
}

#[derive(Debug)]
struct Node<E: Real> {
    value: Tensor<E>,
    op: Op<E>,
}

/// Recording of one forward pass.
pub struct Tape<'p, E: Real = f32> {
    params: &'p ParamStore<E>,
    nodes: Vec<Node<E>>,
    param_vars: Vec<Option<Var>>,
    train: bool,
    seed: u64,
    dropout_calls: u64,
    consumed: bool,
}

fn zeros<E: Real>(n: usize) -> Vec<E> {
    vec![E::zero(); n]
}

fn gelu_parts<E: Real>(x: E) -> (E, E) {
    // tanh approximation
    let k = E::c((2.0 / std::f64::consts::PI).sqrt());
    let c = E::c(0.044715);
    let half = E::c(0.5);
    let one = E::one();
    let u = k * (x + c * x * x * x);
    // tanh(u) = 2 / (1 + e^(-2u)) - 1
    let th = E::c(2.0) / (one + (E::c(-2.0) * u).exp()) - one;
    let y = half * x * (one + th);
    let dy = half * (one + th) + half * x * (one - th * th) * k * (one + E::c(3.0) * c * x * x);
    (y, dy)
}

/// Softmax of one row over the kept entries; masked entries become 0 and a
/// row with nothing kept becomes all zeros.
fn masked_softmax_in_place<E: Real>(row: &mut [E], keep: Option<&[bool]>) {
    let kept = |j: usize| keep.is_none_or(|k| k[j]);
    let mut mx = E::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if kept(j) && v > mx {
            mx = v;
        }
    }
    if mx == E::neg_infinity() {
        row.iter_mut().for_each(|v| *v = E::zero());
        return;
    }
    let mut sum = E::zero();
    for (j, v) in row.iter_mut().enumerate() {
        *v = if kept(j) { (*v - mx).exp() } else { E::zero() };
        sum = sum + *v;
    }
    let inv = E::one() / sum;
    row.iter_mut().for_each(|v| *v = *v * inv);
}

impl<'p, E: Real> Tape<'p, E> {
    /// `train` enables dropout; all dropout masks derive from `seed`.
    pub fn new(params: &'p ParamStore<E>, train: bool, seed: u64) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            train,
            seed,
            dropout_calls: 0,
            consumed: false,
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn params(&self) -> &'p ParamStore<E> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_raw(&mut self, shape: &[usize], data: Vec<E>, op: Op<E>) -> Var {
        let value = Tensor::new(shape.to_vec(), data).expect("primitive produced inconsistent shape");
        self.push(value, op)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[E] {
        self.nodes[v.0].value.data()
    }

    pub fn leaf(&mut self, t: Tensor<E>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Parameter node; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Param(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    /// `op(a) op(b)` for 2-D operands; `ta`/`tb` transpose the stored matrix.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2, "matmul expects 2-D operands, got {sa:?} {sb:?}");
        let av = MatView::new(sa[0], sa[1], ta);
        let bv = MatView::new(sb[0], sb[1], tb);
        assert_eq!(av.cols, bv.rows, "matmul inner dimension: {sa:?} x {sb:?}");
        let (m, n) = (av.rows, bv.cols);
        let mut out = zeros(m * n);
        gemm_view(self.data(a), av, self.data(b), bv, &mut out, MatView::new(m, n, false), false);
        self.push_raw(&[m, n], out, Op::MatMul { a, b, ta, tb })
    }

    /// `x W + b` applied to the last axis of `x`; `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert!(sw.len() == 2 && sx.last() == Some(&sw[0]), "linear {sx:?} x {sw:?}");
        assert_eq!(self.shape(b), &sw[1..], "linear bias");
        let (inp, out) = (sw[0], sw[1]);
        let rows = self.value(x).len() / inp;
        let bd = self.data(b);
        let mut y = Vec::with_capacity(rows * out);
        for _ in 0..rows {
            y.extend_from_slice(bd);
        }
        gemm_view(self.data(x), MatView::new(rows, inp, false), self.data(w), MatView::new(inp, out, false), &mut y, MatView::new(rows, out, false), true);
        let mut shape = sx;
        *shape.last_mut().unwrap() = out;
        self.push_raw(&shape, y, Op::Linear { x, w, b })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// Group-wise matmul of `[G, .., ..]` operands.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "bmm shapes {sa:?} {sb:?}");
        let g = sa[0];
        let av = MatView::new(sa[1], sa[2], ta);
        let bv = MatView::new(sb[1], sb[2], tb);
        assert_eq!(av.cols, bv.rows, "bmm inner dimension: {sa:?} x {sb:?}");
        let (m, n) = (av.rows, bv.cols);
        let (na, nb) = (sa[1] * sa[2], sb[1] * sb[2]);
        let mut out = zeros(g * m * n);
        {
            let (da, db) = (self.data(a), self.data(b));
            for i in 0..g {
                gemm_view(
                    &da[i * na..(i + 1) * na],
                    av,
                    &db[i * nb..(i + 1) * nb],
                    bv,
                    &mut out[i * m * n..(i + 1) * m * n],
                    MatView::new(m, n, false),
                    false,
                );
            }
        }
        self.push_raw(&[g, m, n], out, Op::BatchMatMul { a, b, ta, tb })
    }

    fn zip_same(&mut self, a: Var, b: Var, f: impl Fn(E, E) -> E, op: Op<E>) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "elementwise operands must share a shape");
        let shape = self.shape(a).to_vec();
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        self.push_raw(&shape, out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn check_trailing(&self, x: Var, b: Var) -> usize {
        let (sx, sb) = (self.shape(x), self.shape(b));
        assert!(
            sb.len() <= sx.len() && sx[sx.len() - sb.len()..] == *sb,
            "broadcast operand {sb:?} must match trailing dims of {sx:?}"
        );
        self.value(b).len()
    }

    /// `x + b` with `b` broadcast over the leading dimensions of `x`.
    pub fn add_trailing(&mut self, x: Var, b: Var) -> Var {
        let n = self.check_trailing(x, b);
        let shape = self.shape(x).to_vec();
        let bd = self.data(b);
        let out = self.data(x).chunks(n).flat_map(|row| row.iter().zip(bd).map(|(&v, &c)| v + c)).collect();
        self.push_raw(&shape, out, Op::AddTrailing { x, b })
    }

    pub fn mul_trailing(&mut self, x: Var, g: Var) -> Var {
        let n = self.check_trailing(x, g);
        let shape = self.shape(x).to_vec();
        let gd = self.data(g);
        let out = self.data(x).chunks(n).flat_map(|row| row.iter().zip(gd).map(|(&v, &c)| v * c)).collect();
        self.push_raw(&shape, out, Op::MulTrailing { x, g })
    }

    /// `scale * x + shift` with constant scalars.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, c) = (E::c(scale), E::c(shift));
        let shape = self.shape(x).to_vec();
        let out = self.data(x).iter().map(|&v| s * v + c).collect();
        self.push_raw(&shape, out, Op::Affine { x, scale: s })
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    /// `x * s` where `s` is a one-element node.
    pub fn scale_var(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "scale_var expects a scalar");
        let sv = self.data(s)[0];
        let shape = self.shape(x).to_vec();
        let out = self.data(x).iter().map(|&v| v * sv).collect();
        self.push_raw(&shape, out, Op::ScaleVar { x, s })
    }

    fn unary(&mut self, x: Var, f: impl Fn(E) -> E, op: Op<E>) -> Var {
        let shape = self.shape(x).to_vec();
        let out = self.data(x).iter().map(|&v| f(v)).collect();
        self.push_raw(&shape, out, op)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, |v| gelu_parts(v).0, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| E::one() / (E::one() + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    /// Softmax over the last dimension. `keep[i] == false` removes entry `i`
    /// (zero weight); a row with nothing kept yields all zeros.
    pub fn softmax(&mut self, x: Var, keep: Option<&[bool]>) -> Var {
        let d = *self.shape(x).last().expect("softmax of a 0-d tensor");
        if let Some(k) = keep {
            assert_eq!(k.len(), self.value(x).len(), "softmax mask length");
        }
        self.softmax_rows(x, |r| keep.map(|k| &k[r * d..(r + 1) * d]))
    }

    /// Softmax over the last axis where every `rows_per_group` consecutive
    /// rows share one key mask from `key_keep` (`groups * d` flags).
    pub fn softmax_grouped(&mut self, x: Var, key_keep: &[bool], rows_per_group: usize) -> Var {
        let d = *self.shape(x).last().expect("softmax of a 0-d tensor");
        let rows = self.value(x).len() / d;
        assert_eq!(key_keep.len() * rows_per_group, rows * d, "grouped softmax mask length");
        self.softmax_rows(x, |r| {
            let g = r / rows_per_group;
            Some(&key_keep[g * d..(g + 1) * d])
        })
    }

    fn softmax_rows<'m>(&mut self, x: Var, mask: impl Fn(usize) -> Option<&'m [bool]>) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("softmax of a 0-d tensor");
        let xd = self.data(x);
        let mut out = zeros(xd.len());
        for (r, (row, o)) in xd.chunks(d).zip(out.chunks_mut(d)).enumerate() {
            match mask(r) {
                None => {
                    let mx = row.iter().fold(E::neg_infinity(), |m, &v| m.max(v));
                    let mut sum = E::zero();
                    for (ov, &v) in o.iter_mut().zip(row) {
                        *ov = (v - mx).exp();
                        sum = sum + *ov;
                    }
                    let inv = E::one() / sum;
                    o.iter_mut().for_each(|v| *v = *v * inv);
                }
                Some(k) => {
                    let mut mx = E::neg_infinity();
                    for (&v, &kept) in row.iter().zip(k) {
                        if kept && v > mx {
                            mx = v;
                        }
                    }
                    if mx == E::neg_infinity() {
                        continue;
                    }
                    let mut sum = E::zero();
                    for ((ov, &v), &kept) in o.iter_mut().zip(row).zip(k) {
                        if kept {
                            *ov = (v - mx).exp();
                            sum = sum + *ov;
                        }
                    }
                    let inv = E::one() / sum;
                    o.iter_mut().for_each(|v| *v = *v * inv);
                }
            }
        }
        self.push_raw(&shape, out, Op::Softmax { x })
    }

    /// Layer normalization over the last dimension with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        assert_eq!(self.value(gamma).len(), d, "layer_norm gamma");
        assert_eq!(self.value(beta).len(), d, "layer_norm beta");
        let (xd, g, b) = (self.data(x), self.data(gamma), self.data(beta));
        let rows = xd.len() / d;
        let mut xhat = zeros(xd.len());
        let mut rstd = zeros(rows);
        let mut out = zeros(xd.len());
        let dn = E::c(d as f64);
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<E>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / dn;
            let rs = E::one() / (var + E::c(eps)).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        self.push_raw(&shape, out, Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    /// Rows of `table` selected by `ids`: `[ids.len(), d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let st = self.shape(table);
        assert_eq!(st.len(), 2, "gather table must be 2-D");
        let (v, d) = (st[0], st[1]);
        let td = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            assert!(i < v, "gather index {i} out of range {v}");
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        self.push_raw(&[ids.len(), d], out, Op::Gather { table, ids: ids.to_vec() })
    }

    /// Sum of `table` rows per bag: `[bags.len(), d]`. Empty bags give zeros.
    pub fn embedding_bag(&mut self, table: Var, bags: &[Vec<usize>]) -> Var {
        let st = self.shape(table);
        assert_eq!(st.len(), 2, "embedding table must be 2-D");
        let (v, d) = (st[0], st[1]);
        let td = self.data(table);
        let mut out = zeros(bags.len() * d);
        for (b, bag) in bags.iter().enumerate() {
            let o = &mut out[b * d..(b + 1) * d];
            for &i in bag {
                assert!(i < v, "embedding index {i} out of range {v}");
                o.iter_mut().zip(&td[i * d..(i + 1) * d]).for_each(|(a, &t)| *a = *a + t);
            }
        }
        self.push_raw(&[bags.len(), d], out, Op::EmbeddingBag { table, bags: bags.to_vec() })
    }

    /// Inverted dropout; identity outside training mode or for `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if !self.train || p <= 0.0 {
            return x;
        }
        self.dropout_calls += 1;
        let mut rng = rng_from(derive_seed(self.seed, &[0xD0, self.dropout_calls]));
        let keep = E::c(1.0 / (1.0 - p));
        let n = self.value(x).len();
        let threshold = (p * 4_294_967_296.0).min(u32::MAX as f64) as u32;
        let mut draws = vec![0u32; n];
        rng.fill(&mut draws[..]);
        let mask: Vec<E> = draws.iter().map(|&r| if r < threshold { E::zero() } else { keep }).collect();
        let shape = self.shape(x).to_vec();
        let out = self.data(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        self.push_raw(&shape, out, Op::Dropout { x, mask })
    }

    /// Concatenate `[B, Ta, d]` and `[B, Tb, d]` along the sequence axis.
    pub fn concat_seq(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[2], "concat_seq {sa:?} {sb:?}");
        let (bsz, ta, tb, d) = (sa[0], sa[1], sb[1], sa[2]);
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(bsz * (ta + tb) * d);
        for i in 0..bsz {
            out.extend_from_slice(&da[i * ta * d..(i + 1) * ta * d]);
            out.extend_from_slice(&db[i * tb * d..(i + 1) * tb * d]);
        }
        self.push_raw(&[bsz, ta + tb, d], out, Op::ConcatSeq { a, b })
    }

    /// `x[:, start..start+len, :]` of a `[B, T, d]` tensor.
    pub fn slice_seq(&mut self, x: Var, start: usize, len: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(s.len() == 3 && start + len <= s[1], "slice_seq {s:?} {start}+{len}");
        let (bsz, t, d) = (s[0], s[1], s[2]);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(bsz * len * d);
        for i in 0..bsz {
            out.extend_from_slice(&xd[(i * t + start) * d..(i * t + start + len) * d]);
        }
        self.push_raw(&[bsz, len, d], out, Op::SliceSeq { x, start })
    }

    /// `[B, T, H*dh] -> [B*H, T, dh]`
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(s.len() == 3 && s[2].is_multiple_of(heads), "split_heads {s:?} / {heads}");
        let (b, t, dm) = (s[0], s[1], s[2]);
        let dh = dm / heads;
        let xd = self.data(x);
        let mut out = zeros(xd.len());
        for bi in 0..b {
            for ti in 0..t {
                for h in 0..heads {
                    let src = (bi * t + ti) * dm + h * dh;
                    let dst = ((bi * heads + h) * t + ti) * dh;
                    out[dst..dst + dh].copy_from_slice(&xd[src..src + dh]);
                }
            }
        }
        self.push_raw(&[b * heads, t, dh], out, Op::SplitHeads { x, heads })
    }

    /// `[B*H, T, dh] -> [B, T, H*dh]`
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(s.len() == 3 && s[0].is_multiple_of(heads), "merge_heads {s:?} / {heads}");
        let (bh, t, dh) = (s[0], s[1], s[2]);
        let b = bh / heads;
        let dm = dh * heads;
        let xd = self.data(x);
        let mut out = zeros(xd.len());
        for bi in 0..b {
            for ti in 0..t {
                for h in 0..heads {
                    let dst = (bi * t + ti) * dm + h * dh;
                    let src = ((bi * heads + h) * t + ti) * dh;
                    out[dst..dst + dh].copy_from_slice(&xd[src..src + dh]);
                }
            }
        }
        self.push_raw(&[b, t, dm], out, Op::MergeHeads { x, heads })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.value(x).len(), "reshape {:?} -> {shape:?}", self.shape(x));
        let data = self.data(x).to_vec();
        self.push_raw(shape, data, Op::Reshape(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum::<E>();
        self.push_raw(&[1], vec![s], Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = E::c(self.value(x).len() as f64);
        let s = self.data(x).iter().copied().sum::<E>() / n;
        self.push_raw(&[1], vec![s], Op::MeanAll(x))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mse operands");
        let n = E::c(self.value(a).len() as f64);
        let s = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| (x - y) * (x - y)).sum::<E>() / n;
        self.push_raw(&[1], vec![s], Op::Mse { a, b })
    }

    /// Rows scaled to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        let xd = self.data(x);
        let mut norms = Vec::with_capacity(xd.len() / d);
        let mut out = zeros(xd.len());
        for (r, row) in xd.chunks(d).enumerate() {
            let n = row.iter().map(|&v| v * v).sum::<E>().sqrt().max(E::c(1e-12));
            norms.push(n);
            for j in 0..d {
                out[r * d + j] = row[j] / n;
            }
        }
        self.push_raw(&shape, out, Op::L2Normalize { x, norms })
    }

    /// Mean row-wise softmax cross-entropy of `[n, c]` logits against class ids.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let s = self.shape(logits).to_vec();
        assert!(s.len() == 2 && s[0] == targets.len(), "cross_entropy {s:?} vs {} targets", targets.len());
        let c = s[1];
        let ld = self.data(logits);
        let mut probs = zeros(ld.len());
        let mut loss = E::zero();
        for (r, row) in ld.chunks(c).enumerate() {
            let mx = row.iter().copied().fold(E::neg_infinity(), E::max);
            let sum = row.iter().map(|&v| (v - mx).exp()).sum::<E>();
            for j in 0..c {
                probs[r * c + j] = (row[j] - mx).exp() / sum;
            }
            loss = loss - (row[targets[r]] - mx - sum.ln());
        }
        loss = loss / E::c(targets.len() as f64);
        self.push_raw(&[1], vec![loss], Op::CrossEntropy { logits, targets: targets.to_vec(), probs })
    }

    /// Scaled dot-product attention over `heads` slices of the model axis.
    /// `q: [B, Tq, d]`, `k`, `v: [B, Tk, d]`; `key_keep` has `B * Tk` flags.
    /// Attention weights get inverted dropout with rate `p` in training mode.
    /// A query whose keys are all masked yields zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, key_keep: Option<&[bool]>, p: f64) -> Var {
        let (sq, sk) = (self.shape(q).to_vec(), self.shape(k).to_vec());
        assert!(sq.len() == 3 && sk.len() == 3 && sq[0] == sk[0] && sq[2] == sk[2], "attention {sq:?} {sk:?}");
        assert_eq!(self.shape(v), &sk[..], "attention values");
        let (b, tq, tk, d) = (sq[0], sq[1], sk[1], sq[2]);
        assert!(heads > 0 && d % heads == 0, "attention heads");
        if let Some(keep) = key_keep {
            assert_eq!(keep.len(), b * tk, "attention mask length");
        }
        let dh = d / heads;
        let scale = E::c(1.0 / (dh as f64).sqrt());
        let mask = if self.train && p > 0.0 {
            self.dropout_calls += 1;
            let mut rng = rng_from(derive_seed(self.seed, &[0xD0, self.dropout_calls]));
            let keep = E::c(1.0 / (1.0 - p));
            let threshold = (p * 4_294_967_296.0).min(u32::MAX as f64) as u32;
            let mut draws = vec![0u32; b * heads * tq * tk];
            rng.fill(&mut draws[..]);
            Some(draws.iter().map(|&r| if r < threshold { E::zero() } else { keep }).collect::<Vec<E>>())
        } else {
            None
        };
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut probs = zeros(b * heads * tq * tk);
        let mut out: Vec<E> = zeros(b * tq * d);
        let mut w = zeros(tq * tk);
        let di = d as isize;
        for bi in 0..b {
            let keep = key_keep.map(|kk| &kk[bi * tk..(bi + 1) * tk]);
            for h in 0..heads {
                let block = (bi * heads + h) * tq * tk;
                let pr = &mut probs[block..block + tq * tk];
                // SAFETY: head `h` of batch `bi` is a [tq, dh] / [tk, dh] view with row stride d.
                unsafe {
                    E::gemm(
                        tq,
                        dh,
                        tk,
                        scale,
                        qd.as_ptr().add(bi * tq * d + h * dh),
                        di,
                        1,
                        kd.as_ptr().add(bi * tk * d + h * dh),
                        1,
                        di,
                        E::zero(),
                        pr.as_mut_ptr(),
                        tk as isize,
                        1,
                    );
                }
                for row in pr.chunks_mut(tk) {
                    masked_softmax_in_place(row, keep);
                }
                let weights: &[E] = match &mask {
                    Some(m) => {
                        w.iter_mut().zip(pr.iter().zip(&m[block..block + tq * tk])).for_each(|(o, (&p, &m))| *o = p * m);
                        &w
                    }
                    None => pr,
                };
                // SAFETY: as above; the output head slice has row stride d.
                unsafe {
                    E::gemm(
                        tq,
                        tk,
                        dh,
                        E::one(),
                        weights.as_ptr(),
                        tk as isize,
                        1,
                        vd.as_ptr().add(bi * tk * d + h * dh),
                        di,
                        1,
                        E::zero(),
                        out.as_mut_ptr().add(bi * tq * d + h * dh),
                        di,
                        1,
                    );
                }
            }
        }
        self.push_raw(&[b, tq, d], out, Op::Attention { q, k, v, heads, scale, probs, mask })
    }

    /// `y[b] = sum_t w[b, t] * x[b, t]` for `x: [B, T, d]` and constant weights.
    pub fn weighted_seq_sum(&mut self, x: Var, weights: &[E]) -> Var {
        let s = self.shape(x).to_vec();
        assert!(s.len() == 3 && weights.len() == s[0] * s[1], "weighted_seq_sum {s:?}");
        let (b, t, d) = (s[0], s[1], s[2]);
        let xd = self.data(x);
        let mut out = zeros(b * d);
        for bi in 0..b {
            for ti in 0..t {
                let w = weights[bi * t + ti];
                if w == E::zero() {
                    continue;
                }
                let row = &xd[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                out[bi * d..(bi + 1) * d].iter_mut().zip(row).for_each(|(o, &v)| *o = *o + w * v);
            }
        }
        self.push_raw(&[b, d], out, Op::WeightedSeqSum { x, weights: weights.to_vec() })
    }

    /// Backward pass from a scalar output with seed gradient 1.
    pub fn backward_scalar(&mut self, out: Var) -> Result<Gradients<E>> {
        let g = Tensor::full(self.shape(out), E::one());
        self.backward(out, &g)
    }

    pub fn backward(&mut self, out: Var, output_gradient: &Tensor<E>) -> Result<Gradients<E>> {
        Ok(self.backward_with_inputs(out, output_gradient, &[])?.0)
    }

    /// Backward pass that also returns gradients for the listed nodes.
    pub fn backward_with_inputs(
        &mut self,
        out: Var,
        output_gradient: &Tensor<E>,
        wrt: &[Var],
    ) -> Result<(Gradients<E>, Vec<Tensor<E>>)> {
        if self.consumed {
            return Err(NnError::TapeConsumed);
        }
        if output_gradient.shape() != self.shape(out) {
            return Err(NnError::Shape(format!(
                "output gradient {:?} does not match output {:?}",
                output_gradient.shape(),
                self.shape(out)
            )));
        }
        self.consumed = true;
        // Nodes that lie on a path from a parameter or a requested input.
        let mut needs = vec![false; self.nodes.len()];
        for &v in wrt {
            needs[v.0] = true;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Param(_)) || node.op.inputs().iter().any(|v| needs[v.0]) {
                needs[i] = true;
            }
        }
        let mut grads: Vec<Option<Vec<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(output_gradient.data().to_vec());
        let mut param_grads = Gradients::zeros_like(self.params);

        for i in (0..=out.0).rev() {
            if !needs[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads, &mut param_grads, &needs);
            grads[i] = Some(g);
        }
        let inputs = wrt
            .iter()
            .map(|&v| {
                let shape = self.shape(v).to_vec();
                let data = grads[v.0].clone().unwrap_or_else(|| zeros(self.value(v).len()));
                Tensor::new(shape, data).expect("gradient shape")
            })
            .collect();
        if !param_grads.is_finite() {
            return Err(NnError::NonFinite("backward".into()));
        }
        Ok((param_grads, inputs))
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &[E],
        grads: &mut [Option<Vec<E>>],
        pg: &mut Gradients<E>,
        needs: &[bool],
    ) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [E])| {
            if !needs[v.0] {
                return;
            }
            let n = nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| zeros(n));
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                pg.get_mut(*id).data_mut().iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b);
            }
            Op::MatMul { a, b, ta, tb } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let av = MatView::new(sa[0], sa[1], *ta);
                let bv = MatView::new(sb[0], sb[1], *tb);
                let gv = MatView::new(av.rows, bv.cols, false);
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |da| gemm_view(g, gv, bd, bv.t(), da, av, true));
                acc(*b, &mut |db| gemm_view(ad, av.t(), g, gv, db, bv, true));
            }
            Op::Linear { x, w, b } => {
                let (inp, out) = (self.shape(*w)[0], self.shape(*w)[1]);
                let rows = g.len() / out;
                let (xv, wv, gv) = (MatView::new(rows, inp, false), MatView::new(inp, out, false), MatView::new(rows, out, false));
                let (xd, wd) = (self.data(*x), self.data(*w));
                acc(*x, &mut |d| gemm_view(g, gv, wd, wv.t(), d, xv, true));
                acc(*w, &mut |d| gemm_view(xd, xv.t(), g, gv, d, wv, true));
                acc(*b, &mut |d| {
                    for row in g.chunks(out) {
                        d.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                    }
                });
            }
            Op::BatchMatMul { a, b, ta, tb } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let av = MatView::new(sa[1], sa[2], *ta);
                let bv = MatView::new(sb[1], sb[2], *tb);
                let gv = MatView::new(av.rows, bv.cols, false);
                let (na, nb, ng) = (sa[1] * sa[2], sb[1] * sb[2], av.rows * bv.cols);
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |da| {
                    for k in 0..sa[0] {
                        let gk = &g[k * ng..(k + 1) * ng];
                        gemm_view(gk, gv, &bd[k * nb..(k + 1) * nb], bv.t(), &mut da[k * na..(k + 1) * na], av, true);
                    }
                });
                acc(*b, &mut |db| {
                    for k in 0..sa[0] {
                        let gk = &g[k * ng..(k + 1) * ng];
                        gemm_view(&ad[k * na..(k + 1) * na], av.t(), gk, gv, &mut db[k * nb..(k + 1) * nb], bv, true);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, &v)| *x = *x + v));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, &v)| *x = *x + v));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, &v)| *x = *x + v));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, &v)| *x = *x - v));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |d| d.iter_mut().zip(g).zip(bd).for_each(|((x, &v), &o)| *x = *x + v * o));
                acc(*b, &mut |d| d.iter_mut().zip(g).zip(ad).for_each(|((x, &v), &o)| *x = *x + v * o));
            }
            Op::AddTrailing { x, b } => {
                let n = self.value(*b).len();
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(x, &v)| *x = *x + v));
                acc(*b, &mut |d| {
                    for row in g.chunks(n) {
                        d.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                    }
                });
            }
            Op::MulTrailing { x, g: gamma } => {
                let n = self.value(*gamma).len();
                let (xd, gd) = (self.data(*x), self.data(*gamma));
                acc(*x, &mut |d| {
                    for (drow, grow) in d.chunks_mut(n).zip(g.chunks(n)) {
                        drow.iter_mut().zip(grow).zip(gd).for_each(|((a, &v), &c)| *a = *a + v * c);
                    }
                });
                acc(*gamma, &mut |d| {
                    for (grow, xrow) in g.chunks(n).zip(xd.chunks(n)) {
                        d.iter_mut().zip(grow).zip(xrow).for_each(|((a, &v), &x)| *a = *a + v * x);
                    }
                });
            }
            Op::Affine { x, scale } => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(x, &v)| *x = *x + v * *scale));
            }
            Op::ScaleVar { x, s } => {
                let sv = self.data(*s)[0];
                let xd = self.data(*x);
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(x, &v)| *x = *x + v * sv));
                let ds = g.iter().zip(xd).map(|(&a, &b)| a * b).sum::<E>();
                acc(*s, &mut |d| d[0] = d[0] + ds);
            }
            Op::Exp(x) => {
                acc(*x, &mut |d| d.iter_mut().zip(g).zip(y).for_each(|((x, &v), &o)| *x = *x + v * o));
            }
            Op::Gelu(x) => {
                let xd = self.data(*x);
                acc(*x, &mut |d| {
                    d.iter_mut().zip(g).zip(xd).for_each(|((x, &v), &u)| *x = *x + v * gelu_parts(u).1)
                });
            }
            Op::Sigmoid(x) => {
                acc(*x, &mut |d| {
                    d.iter_mut().zip(g).zip(y).for_each(|((x, &v), &o)| *x = *x + v * o * (E::one() - o))
                });
            }
            Op::Tanh(x) => {
                acc(*x, &mut |d| {
                    d.iter_mut().zip(g).zip(y).for_each(|((x, &v), &o)| *x = *x + v * (E::one() - o * o))
                });
            }
            Op::Softmax { x } => {
                let dlast = *node.value.shape().last().unwrap();
                acc(*x, &mut |d| {
                    for r in 0..y.len() / dlast {
                        let (yr, gr) = (&y[r * dlast..(r + 1) * dlast], &g[r * dlast..(r + 1) * dlast]);
                        let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<E>();
                        for j in 0..dlast {
                            d[r * dlast + j] = d[r * dlast + j] + yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let dlast = *node.value.shape().last().unwrap();
                let gd = self.data(*gamma);
                let dn = E::c(dlast as f64);
                acc(*x, &mut |d| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let base = r * dlast;
                        let mut m1 = E::zero();
                        let mut m2 = E::zero();
                        for j in 0..dlast {
                            let dh = g[base + j] * gd[j];
                            m1 = m1 + dh;
                            m2 = m2 + dh * xhat[base + j];
                        }
                        m1 = m1 / dn;
                        m2 = m2 / dn;
                        for j in 0..dlast {
                            let dh = g[base + j] * gd[j];
                            d[base + j] = d[base + j] + rs * (dh - m1 - xhat[base + j] * m2);
                        }
                    }
                });
                acc(*gamma, &mut |d| {
                    for (grow, xrow) in g.chunks(dlast).zip(xhat.chunks(dlast)) {
                        d.iter_mut().zip(grow).zip(xrow).for_each(|((a, &v), &x)| *a = *a + v * x);
                    }
                });
                acc(*beta, &mut |d| {
                    for row in g.chunks(dlast) {
                        d.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                    }
                });
            }
            Op::Gather { table, ids } => {
                let dlast = self.shape(*table)[1];
                acc(*table, &mut |d| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..dlast {
                            d[id * dlast + j] = d[id * dlast + j] + g[r * dlast + j];
                        }
                    }
                });
            }
            Op::EmbeddingBag { table, bags } => {
                let dlast = self.shape(*table)[1];
                acc(*table, &mut |d| {
                    for (r, bag) in bags.iter().enumerate() {
                        for &id in bag {
                            for j in 0..dlast {
                                d[id * dlast + j] = d[id * dlast + j] + g[r * dlast + j];
                            }
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                acc(*x, &mut |d| d.iter_mut().zip(g).zip(mask).for_each(|((x, &v), &m)| *x = *x + v * m));
            }
            Op::ConcatSeq { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bsz, ta, tb, dd) = (sa[0], sa[1], sb[1], sa[2]);
                let t = ta + tb;
                acc(*a, &mut |d| {
                    for i in 0..bsz {
                        let src = &g[i * t * dd..(i * t + ta) * dd];
                        d[i * ta * dd..(i + 1) * ta * dd].iter_mut().zip(src).for_each(|(x, &v)| *x = *x + v);
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..bsz {
                        let src = &g[(i * t + ta) * dd..(i + 1) * t * dd];
                        d[i * tb * dd..(i + 1) * tb * dd].iter_mut().zip(src).for_each(|(x, &v)| *x = *x + v);
                    }
                });
            }
            Op::SliceSeq { x, start } => {
                let s = self.shape(*x);
                let (bsz, t, dd) = (s[0], s[1], s[2]);
                let len = node.value.shape()[1];
                acc(*x, &mut |d| {
                    for i in 0..bsz {
                        let dst = &mut d[(i * t + start) * dd..(i * t + start + len) * dd];
                        dst.iter_mut().zip(&g[i * len * dd..(i + 1) * len * dd]).for_each(|(x, &v)| *x = *x + v);
                    }
                });
            }
            Op::SplitHeads { x, heads } => {
                let s = self.shape(*x);
                let (b, t, dm) = (s[0], s[1], s[2]);
                let dh = dm / heads;
                acc(*x, &mut |d| {
                    for bi in 0..b {
                        for ti in 0..t {
                            for h in 0..*heads {
                                let dst = (bi * t + ti) * dm + h * dh;
                                let src = ((bi * heads + h) * t + ti) * dh;
                                for e in 0..dh {
                                    d[dst + e] = d[dst + e] + g[src + e];
                                }
                            }
                        }
                    }
                });
            }
            Op::MergeHeads { x, heads } => {
                let s = self.shape(*x);
                let (bh, t, dh) = (s[0], s[1], s[2]);
                let b = bh / heads;
                let dm = dh * heads;
                acc(*x, &mut |d| {
                    for bi in 0..b {
                        for ti in 0..t {
                            for h in 0..*heads {
                                let src = (bi * t + ti) * dm + h * dh;
                                let dst = ((bi * heads + h) * t + ti) * dh;
                                for e in 0..dh {
                                    d[dst + e] = d[dst + e] + g[src + e];
                                }
                            }
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(x, &v)| *x = *x + v));
            }
            Op::SumAll(x) => {
                acc(*x, &mut |d| d.iter_mut().for_each(|x| *x = *x + g[0]));
            }
            Op::MeanAll(x) => {
                let n = E::c(self.value(*x).len() as f64);
                acc(*x, &mut |d| d.iter_mut().for_each(|x| *x = *x + g[0] / n));
            }
            Op::Mse { a, b } => {
                let n = E::c(self.value(*a).len() as f64);
                let (ad, bd) = (self.data(*a), self.data(*b));
                let two = E::c(2.0) * g[0] / n;
                acc(*a, &mut |d| {
                    d.iter_mut().zip(ad.iter().zip(bd)).for_each(|(x, (&p, &q))| *x = *x + two * (p - q))
                });
                acc(*b, &mut |d| {
                    d.iter_mut().zip(ad.iter().zip(bd)).for_each(|(x, (&p, &q))| *x = *x - two * (p - q))
                });
            }
            Op::L2Normalize { x, norms } => {
                let dlast = *node.value.shape().last().unwrap();
                acc(*x, &mut |d| {
                    for (r, &n) in norms.iter().enumerate() {
                        let base = r * dlast;
                        let dot = (0..dlast).map(|j| y[base + j] * g[base + j]).sum::<E>();
                        for j in 0..dlast {
                            d[base + j] = d[base + j] + (g[base + j] - y[base + j] * dot) / n;
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = self.shape(*logits)[1];
                let scale = g[0] / E::c(targets.len() as f64);
                acc(*logits, &mut |d| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { E::one() } else { E::zero() };
                            d[r * c + j] = d[r * c + j] + scale * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
            Op::Attention { q, k, v, heads, scale, probs, mask } => {
                let (sq, sk) = (self.shape(*q), self.shape(*k));
                let (b, tq, tk, d) = (sq[0], sq[1], sk[1], sq[2]);
                let dh = d / heads;
                let (qd, kd, vd) = (self.data(*q), self.data(*k), self.data(*v));
                let mut dq: Vec<E> = zeros(qd.len());
                let mut dk: Vec<E> = zeros(kd.len());
                let mut dv: Vec<E> = zeros(vd.len());
                let mut dw = zeros(tq * tk);
                let mut w = zeros(tq * tk);
                let di = d as isize;
                let tki = tk as isize;
                for bi in 0..b {
                    for h in 0..*heads {
                        let block = (bi * heads + h) * tq * tk;
                        let pr = &probs[block..block + tq * tk];
                        let weights: &[E] = match mask {
                            Some(m) => {
                                w.iter_mut().zip(pr.iter().zip(&m[block..block + tq * tk])).for_each(|(o, (&p, &m))| *o = p * m);
                                &w
                            }
                            None => pr,
                        };
                        let (qo, ko) = (bi * tq * d + h * dh, bi * tk * d + h * dh);
                        // SAFETY: every view is a head slice with row stride d or a dense [tq, tk] block.
                        unsafe {
                            E::gemm(tq, dh, tk, E::one(), g.as_ptr().add(qo), di, 1, vd.as_ptr().add(ko), 1, di, E::zero(), dw.as_mut_ptr(), tki, 1);
                            E::gemm(tk, tq, dh, E::one(), weights.as_ptr(), 1, tki, g.as_ptr().add(qo), di, 1, E::one(), dv.as_mut_ptr().add(ko), di, 1);
                        }
                        if let Some(m) = mask {
                            dw.iter_mut().zip(&m[block..block + tq * tk]).for_each(|(x, &m)| *x = *x * m);
                        }
                        for (dr, prow) in dw.chunks_mut(tk).zip(pr.chunks(tk)) {
                            let dot = dr.iter().zip(prow).fold(E::zero(), |a, (&x, &p)| a + x * p);
                            dr.iter_mut().zip(prow).for_each(|(x, &p)| *x = p * (*x - dot));
                        }
                        // SAFETY: as above.
                        unsafe {
                            E::gemm(tq, tk, dh, *scale, dw.as_ptr(), tki, 1, kd.as_ptr().add(ko), di, 1, E::one(), dq.as_mut_ptr().add(qo), di, 1);
                            E::gemm(tk, tq, dh, *scale, dw.as_ptr(), 1, tki, qd.as_ptr().add(qo), di, 1, E::one(), dk.as_mut_ptr().add(ko), di, 1);
                        }
                    }
                }
                acc(*q, &mut |d| d.iter_mut().zip(&dq).for_each(|(x, &v)| *x = *x + v));
                acc(*k, &mut |d| d.iter_mut().zip(&dk).for_each(|(x, &v)| *x = *x + v));
                acc(*v, &mut |d| d.iter_mut().zip(&dv).for_each(|(x, &v)| *x = *x + v));
            }
            Op::WeightedSeqSum { x, weights } => {
                let s = self.shape(*x);
                let (b, t, dd) = (s[0], s[1], s[2]);
                acc(*x, &mut |d| {
                    for bi in 0..b {
                        for ti in 0..t {
                            let w = weights[bi * t + ti];
                            let base = (bi * t + ti) * dd;
                            for j in 0..dd {
                                d[base + j] = d[base + j] + w * g[bi * dd + j];
                            }
                        }
                    }
                });
            }
        }
    }
}
