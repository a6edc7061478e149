//! Declarative layer stacks, used where a network is a plain sequence of
//! layers and by the gradient-check harness.

use crate::error::{NnError, Result};
use crate::layers::{BiGru, Embedding, LayerNorm, Linear, MultiHeadAttention};
use crate::params::{Gradients, ParamStore};
use crate::real::Real;
use crate::rng::{derive_seed, normal_vec, rng_from};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Linear { inp: usize, out: usize },
    LayerNorm { dim: usize },
    Gelu,
    /// Self-attention over `[B, T, dim]`.
    SelfAttention { dim: usize, heads: usize },
    /// `[B, T, inp] -> [B, 2 * hidden]`
    BiGru { inp: usize, hidden: usize },
    /// Integer ids `[B, T]` (stored as floats) `-> [B, T, dim]`. First layer only.
    Embedding { vocab: usize, dim: usize },
    /// `x + f(x)` for an inner stack that preserves the dimension.
    Residual(Vec<LayerSpec>),
    Dropout { p: f64 },
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn new(layers: Vec<LayerSpec>) -> Self {
        NetworkSpec { layers }
    }

    /// Checks that adjacent layer dimensions agree; returns (input, output)
    /// feature dimensions. `None` input means the stack starts with an embedding.
    pub fn validate(&self) -> Result<(Option<usize>, usize)> {
        fn walk(layers: &[LayerSpec], mut cur: Option<usize>, top: bool) -> Result<(Option<usize>, Option<usize>)> {
            let mut first: Option<Option<usize>> = None;
            for (i, l) in layers.iter().enumerate() {
                let (inp, out) = match l {
                    LayerSpec::Linear { inp, out } => (Some(*inp), Some(*out)),
                    LayerSpec::LayerNorm { dim } => (Some(*dim), Some(*dim)),
                    LayerSpec::SelfAttention { dim, heads } => {
                        if *heads == 0 || dim % heads != 0 {
                            return Err(NnError::HeadSplit { dim: *dim, heads: *heads });
                        }
                        (Some(*dim), Some(*dim))
                    }
                    LayerSpec::BiGru { inp, hidden } => (Some(*inp), Some(2 * hidden)),
                    LayerSpec::Embedding { dim, .. } => {
                        if !(top && i == 0) {
                            return Err(NnError::Spec("embedding must be the first layer".into()));
                        }
                        (None, Some(*dim))
                    }
                    LayerSpec::Gelu | LayerSpec::Dropout { .. } => (cur, cur),
                    LayerSpec::Residual(inner) => {
                        let (i0, o) = walk(inner, cur, false)?;
                        let d = cur.or(i0);
                        if o != d {
                            return Err(NnError::Spec(format!("residual block maps {d:?} to {o:?}")));
                        }
                        (d, d)
                    }
                };
                if first.is_none() {
                    first = Some(inp);
                } else if inp.is_some() && cur.is_some() && inp != cur {
                    return Err(NnError::Spec(format!("layer {i} expects {inp:?}, previous layer gives {cur:?}")));
                }
                cur = out;
            }
            Ok((first.flatten(), cur))
        }
        if self.layers.is_empty() {
            return Err(NnError::Spec("empty network".into()));
        }
        let (inp, out) = walk(&self.layers, None, true)?;
        let out = out.ok_or_else(|| NnError::Spec("network has no output dimension".into()))?;
        Ok((inp, out))
    }
}

#[derive(Clone, Debug)]
enum Built {
    Linear(Linear),
    LayerNorm(LayerNorm),
    Gelu,
    SelfAttention(MultiHeadAttention),
    BiGru(BiGru),
    Embedding(Embedding),
    Residual(Vec<Built>),
    Dropout(f64),
}

/// A [`NetworkSpec`] with instantiated parameters.
#[derive(Clone, Debug)]
pub struct Network<E: Real = f32> {
    spec: NetworkSpec,
    params: ParamStore<E>,
    layers: Vec<Built>,
    input_dim: Option<usize>,
    output_dim: usize,
}

/// Output of [`Network::forward`]; keeps the tape for a later backward pass.
pub struct ForwardPass<'a, E: Real> {
    pub tape: Tape<'a, E>,
    pub output: Var,
}

impl<E: Real> ForwardPass<'_, E> {
    pub fn output(&self) -> &Tensor<E> {
        self.tape.value(self.output)
    }

    pub fn backward(&mut self, output_gradient: &Tensor<E>) -> Result<Gradients<E>> {
        self.tape.backward(self.output, output_gradient)
    }
}

impl<E: Real> Network<E> {
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let (input_dim, output_dim) = spec.validate()?;
        let mut params = ParamStore::new();
        let mut rng = rng_from(seed);
        fn build<E: Real>(
            specs: &[LayerSpec],
            prefix: &str,
            params: &mut ParamStore<E>,
            rng: &mut rand_chacha::ChaCha8Rng,
        ) -> Result<Vec<Built>> {
            let mut out = Vec::new();
            for (i, l) in specs.iter().enumerate() {
                let name = format!("{prefix}{i}");
                out.push(match l {
                    LayerSpec::Linear { inp, out } => Built::Linear(Linear::new(params, &name, *inp, *out, rng)),
                    LayerSpec::LayerNorm { dim } => Built::LayerNorm(LayerNorm::new(params, &name, *dim)),
                    LayerSpec::Gelu => Built::Gelu,
                    LayerSpec::SelfAttention { dim, heads } => {
                        Built::SelfAttention(MultiHeadAttention::new(params, &name, *dim, *heads, 0.0, rng)?)
                    }
                    LayerSpec::BiGru { inp, hidden } => Built::BiGru(BiGru::new(params, &name, *inp, *hidden, rng)),
                    LayerSpec::Embedding { vocab, dim } => {
                        Built::Embedding(Embedding::new(params, &name, *vocab, *dim, rng))
                    }
                    LayerSpec::Residual(inner) => Built::Residual(build(inner, &format!("{name}."), params, rng)?),
                    LayerSpec::Dropout { p } => Built::Dropout(*p),
                });
            }
            Ok(out)
        }
        let layers = build(&spec.layers, "layer", &mut params, &mut rng)?;
        Ok(Network { spec, params, layers, input_dim, output_dim })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<E> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<E> {
        &mut self.params
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    /// Same network in another element type.
    pub fn cast<F: Real>(&self) -> Network<F> {
        Network {
            spec: self.spec.clone(),
            params: self.params.cast(),
            layers: self.layers.clone(),
            input_dim: self.input_dim,
            output_dim: self.output_dim,
        }
    }

    pub fn forward(&self, input: &Tensor<E>, train: bool, seed: u64) -> Result<ForwardPass<'_, E>> {
        let shape = input.shape();
        match self.input_dim {
            Some(d) if shape.len() < 2 || *shape.last().unwrap() != d => {
                return Err(NnError::Shape(format!("network expects [.., {d}] input, got {shape:?}")));
            }
            None if shape.len() != 2 => {
                return Err(NnError::Shape(format!("embedding input must be [B, T] ids, got {shape:?}")));
            }
            _ => {}
        }
        let mut tape = Tape::new(&self.params, train, seed);
        let x = match (&self.layers[0], self.input_dim) {
            (Built::Embedding(e), None) => {
                let ids: Vec<usize> = input.data().iter().map(|v| v.as_f64().round() as usize).collect();
                if let Some(bad) = ids.iter().find(|&&i| i >= e.vocab) {
                    return Err(NnError::Shape(format!("token id {bad} outside vocabulary {}", e.vocab)));
                }
                let y = e.lookup(&mut tape, &ids);
                tape.reshape(y, &[shape[0], shape[1], e.dim])
            }
            _ => tape.leaf(input.clone()),
        };
        let skip = usize::from(self.input_dim.is_none());
        let y = run(&mut tape, &self.layers[skip..], x)?;
        tape.value(y).ensure_finite("network forward")?;
        Ok(ForwardPass { tape, output: y })
    }
}

fn run<E: Real>(tape: &mut Tape<'_, E>, layers: &[Built], mut x: Var) -> Result<Var> {
    for l in layers {
        x = match l {
            Built::Linear(l) => l.forward(tape, x),
            Built::LayerNorm(l) => l.forward(tape, x),
            Built::Gelu => tape.gelu(x),
            Built::SelfAttention(a) => {
                if tape.shape(x).len() != 3 {
                    return Err(NnError::Shape("self-attention expects [B, T, d]".into()));
                }
                a.forward(tape, x, x, None)?
            }
            Built::BiGru(g) => {
                if tape.shape(x).len() != 3 {
                    return Err(NnError::Shape("bi-GRU expects [B, T, d]".into()));
                }
                g.forward(tape, x, None)
            }
            Built::Embedding(_) => return Err(NnError::Spec("embedding must be the first layer".into())),
            Built::Residual(inner) => {
                let y = run(tape, inner, x)?;
                tape.add(x, y)
            }
            Built::Dropout(p) => tape.dropout(x, *p),
        };
    }
    Ok(x)
}

/// Maximum over parameters of `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn max_relative_error<E: Real>(analytic: &Gradients<E>, numeric: &Gradients<E>) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .flat_map(|(a, n)| a.data().iter().zip(n.data()).map(|(&a, &n)| (a.as_f64(), n.as_f64())))
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Scalar probe loss `sum(r * y)` with a fixed random `r`; returns the
/// analytic parameter gradients.
pub fn analytic_gradients(net: &Network<f64>, input: &Tensor<f64>, seed: u64) -> Result<Gradients<f64>> {
    let mut pass = net.forward(input, true, seed)?;
    let probe = probe_tensor(pass.output().shape(), seed);
    pass.backward(&probe)
}

/// Five-point central differences of the probe loss with step `1e-3`.
pub fn numeric_gradients(net: &Network<f64>, input: &Tensor<f64>, seed: u64) -> Result<Gradients<f64>> {
    const H: f64 = 1e-3;
    let mut work = net.clone();
    let probe = {
        let pass = net.forward(input, true, seed)?;
        probe_tensor(pass.output().shape(), seed)
    };
    let loss = |n: &Network<f64>| -> Result<f64> {
        let pass = n.forward(input, true, seed)?;
        Ok(pass.output().data().iter().zip(probe.data()).map(|(y, r)| y * r).sum())
    };
    let mut grads = Gradients::zeros_like(net.params());
    let ids: Vec<_> = net.params().iter().map(|(id, _, _)| id).collect();
    for id in ids {
        for k in 0..net.params().get(id).len() {
            let orig = net.params().get(id).data()[k];
            let mut eval = |delta: f64| -> Result<f64> {
                work.params_mut().get_mut(id).data_mut()[k] = orig + delta;
                loss(&work)
            };
            let (p2, p1, m1, m2) = (eval(2.0 * H)?, eval(H)?, eval(-H)?, eval(-2.0 * H)?);
            work.params_mut().get_mut(id).data_mut()[k] = orig;
            grads.get_mut(id).data_mut()[k] = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * H);
        }
    }
    Ok(grads)
}

fn probe_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let n = shape.iter().product();
    let mut rng = rng_from(derive_seed(seed, &[0x9E0BE]));
    Tensor::new(shape.to_vec(), normal_vec(&mut rng, n)).expect("probe shape")
}

/// Runs the network in `f64` (train mode, fixed dropout seed) and compares
/// analytic against finite-difference gradients for every parameter.
pub fn gradient_check<E: Real>(net: &Network<E>, input: &Tensor<E>, seed: u64) -> Result<f64> {
    let net64 = net.cast::<f64>();
    let input64 = input.cast::<f64>();
    let analytic = analytic_gradients(&net64, &input64, seed)?;
    let numeric = numeric_gradients(&net64, &input64, seed)?;
    Ok(max_relative_error(&analytic, &numeric))
}
