use promo_nn::{
    gradient_check, max_relative_error, sinusoidal_embedding, AdamW, AdamWConfig, LayerSpec, MultiHeadAttention,
    Network, NetworkSpec, NnError, ParamStore, Tape, Tensor,
};
use promo_nn::network::{analytic_gradients, numeric_gradients};
use promo_nn::rng::rng_from;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f32> {
    Tensor::from_f64(shape, data).unwrap()
}

#[test]
fn identity_linear_passes_input_through() {
    let mut net = Network::<f32>::new(NetworkSpec::new(vec![LayerSpec::Linear { inp: 3, out: 3 }]), 1).unwrap();
    let w = net.params().id("layer0.w").unwrap();
    let b = net.params().id("layer0.b").unwrap();
    *net.params_mut().get_mut(w) = t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
    *net.params_mut().get_mut(b) = Tensor::zeros(&[3]);
    let x = t(&[1, 3], &[0.5, -2.0, 3.25]);
    let pass = net.forward(&x, false, 0).unwrap();
    assert_eq!(pass.output().data(), x.data());
}

#[test]
fn softmax_rows_sum_to_one() {
    let store = ParamStore::<f32>::new();
    let mut tape = Tape::new(&store, false, 0);
    let x = tape.leaf(t(&[3, 4], &[1., 2., 3., 4., -10., 0., 10., 5., 0., 0., 0., 0.]));
    let y = tape.softmax(x, None);
    for row in tape.value(y).data().chunks(4) {
        let s: f32 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
    let keep = [true, false, true, false, true, true, true, true, false, false, false, true];
    let y = tape.softmax(x, Some(&keep));
    let v = tape.value(y).data();
    assert_eq!(v[1], 0.0);
    assert_eq!(v[3], 0.0);
    assert_eq!(v[11], 1.0);
}

fn gelu64(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

#[test]
fn two_layer_net_matches_hand_composed_chain() {
    let spec = NetworkSpec::new(vec![
        LayerSpec::Linear { inp: 4, out: 5 },
        LayerSpec::Gelu,
        LayerSpec::Linear { inp: 5, out: 2 },
    ]);
    let net = Network::<f32>::new(spec, 42).unwrap();
    let x = t(&[2, 4], &[0.1, -0.4, 0.8, 1.2, -1.0, 0.3, 0.0, 0.7]);
    let out = net.forward(&x, false, 0).unwrap().output().clone();
    let p = net.params();
    let get = |n: &str| p.get(p.id(n).unwrap()).data().iter().map(|&v| v as f64).collect::<Vec<_>>();
    let (w0, b0, w1, b1) = (get("layer0.w"), get("layer0.b"), get("layer2.w"), get("layer2.b"));
    for r in 0..2 {
        let xr: Vec<f64> = x.row(r).iter().map(|&v| v as f64).collect();
        let h: Vec<f64> = (0..5).map(|j| gelu64((0..4).map(|i| xr[i] * w0[i * 5 + j]).sum::<f64>() + b0[j])).collect();
        for k in 0..2 {
            let y = (0..5).map(|j| h[j] * w1[j * 2 + k]).sum::<f64>() + b1[k];
            assert!((y - out.row(r)[k] as f64).abs() < 1e-6, "row {r} col {k}");
        }
    }
}

#[test]
fn linear_weight_gradient_is_input_outer_product() {
    let net = Network::<f64>::new(NetworkSpec::new(vec![LayerSpec::Linear { inp: 3, out: 2 }]), 3).unwrap();
    let x = Tensor::<f64>::from_f64(&[1, 3], &[0.5, -1.5, 2.0]).unwrap();
    let mut pass = net.forward(&x, false, 0).unwrap();
    let grads = pass.backward(&Tensor::full(&[1, 2], 1.0)).unwrap();
    let gw = grads.get(net.params().id("layer0.w").unwrap()).data();
    for i in 0..3 {
        for j in 0..2 {
            assert_eq!(gw[i * 2 + j], x.data()[i]);
        }
    }
    assert_eq!(grads.get(net.params().id("layer0.b").unwrap()).data(), &[1.0, 1.0]);
}

#[test]
fn layer_norm_gradient_vanishes_at_symmetric_input() {
    let mut store = ParamStore::<f64>::new();
    let ln = promo_nn::LayerNorm::new(&mut store, "ln", 4);
    let mut tape = Tape::new(&store, false, 0);
    let x = tape.leaf(Tensor::full(&[1, 4], 0.7));
    let y = ln.forward(&mut tape, x);
    let s = tape.sum_all(y);
    let (_, inputs) = tape.backward_with_inputs(s, &Tensor::scalar(1.0), &[x]).unwrap();
    assert!(inputs[0].data().iter().all(|&g| g == 0.0), "{:?}", inputs[0]);
}

#[test]
fn backward_twice_is_an_error() {
    let store = ParamStore::<f32>::new();
    let mut tape = Tape::new(&store, false, 0);
    let x = tape.leaf(t(&[2], &[1.0, 2.0]));
    let s = tape.sum_all(x);
    tape.backward_scalar(s).unwrap();
    assert_eq!(tape.backward_scalar(s).unwrap_err(), NnError::TapeConsumed);
}

#[test]
fn backward_rejects_mismatched_output_gradient() {
    let store = ParamStore::<f32>::new();
    let mut tape = Tape::new(&store, false, 0);
    let x = tape.leaf(t(&[2], &[1.0, 2.0]));
    assert!(matches!(tape.backward(x, &Tensor::zeros(&[3])), Err(NnError::Shape(_))));
}

#[test]
fn forward_rejects_wrong_input_dim() {
    let net = Network::<f32>::new(NetworkSpec::new(vec![LayerSpec::Linear { inp: 3, out: 2 }]), 0).unwrap();
    assert!(matches!(net.forward(&Tensor::zeros(&[1, 4]), false, 0), Err(NnError::Shape(_))));
}

#[test]
fn spec_validation_catches_dimension_breaks() {
    let bad = NetworkSpec::new(vec![LayerSpec::Linear { inp: 3, out: 4 }, LayerSpec::Linear { inp: 5, out: 1 }]);
    assert!(bad.validate().is_err());
    let bad_res = NetworkSpec::new(vec![LayerSpec::Residual(vec![LayerSpec::Linear { inp: 3, out: 2 }])]);
    assert!(bad_res.validate().is_err());
    let late_embedding =
        NetworkSpec::new(vec![LayerSpec::Linear { inp: 3, out: 3 }, LayerSpec::Embedding { vocab: 4, dim: 3 }]);
    assert!(late_embedding.validate().is_err());
    let ok = NetworkSpec::new(vec![LayerSpec::Embedding { vocab: 5, dim: 4 }, LayerSpec::BiGru { inp: 4, hidden: 3 }]);
    assert_eq!(ok.validate().unwrap(), (None, 6));
}

#[test]
fn non_finite_input_is_reported() {
    let net = Network::<f32>::new(NetworkSpec::new(vec![LayerSpec::Linear { inp: 2, out: 2 }]), 0).unwrap();
    let x = Tensor::new(vec![1, 2], vec![f32::NAN, 1.0]).unwrap();
    assert!(matches!(net.forward(&x, false, 0), Err(NnError::NonFinite(_))));
}

#[test]
fn dropout_depends_only_on_seed_and_mode() {
    let net = Network::<f32>::new(
        NetworkSpec::new(vec![LayerSpec::Linear { inp: 8, out: 8 }, LayerSpec::Dropout { p: 0.5 }]),
        0,
    )
    .unwrap();
    let x = Tensor::full(&[4, 8], 1.0f32);
    let a = net.forward(&x, true, 11).unwrap().output().clone();
    let b = net.forward(&x, true, 11).unwrap().output().clone();
    let c = net.forward(&x, true, 12).unwrap().output().clone();
    let eval = net.forward(&x, false, 11).unwrap().output().clone();
    let eval2 = net.forward(&x, false, 99).unwrap().output().clone();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(eval, eval2);
    assert!(a.data().contains(&0.0));
}

#[test]
fn adamw_zero_gradient_is_identity() {
    let mut store = ParamStore::<f32>::new();
    let id = store.add("p", t(&[3], &[1.0, -2.0, 0.5]));
    let before = store.get(id).clone();
    let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, &store);
    let g = promo_nn::Gradients::zeros_like(&store);
    for _ in 0..5 {
        opt.step(&mut store, &g).unwrap();
    }
    assert_eq!(store.get(id), &before);
}

#[test]
fn adamw_single_step_closed_form() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("p", Tensor::scalar(1.0));
    let mut opt = AdamW::new(AdamWConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() }, &store);
    let mut g = promo_nn::Gradients::zeros_like(&store);
    g.get_mut(id).data_mut()[0] = 1.0;
    opt.step(&mut store, &g).unwrap();
    // m_hat = v_hat = 1 after bias correction, so the step is lr / (1 + eps)
    let expected = 1.0 - 0.1 / (1.0 + 1e-8);
    assert!((store.get(id).data()[0] - expected).abs() < 1e-12);
    assert_eq!(opt.first_moment(0).len(), 1);
}

#[test]
fn adamw_decay_only_scales_parameters() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("p", Tensor::scalar(2.0));
    let mut opt = AdamW::new(AdamWConfig { lr: 0.1, weight_decay: 0.01, ..Default::default() }, &store);
    let g = promo_nn::Gradients::zeros_like(&store);
    opt.step(&mut store, &g).unwrap();
    assert!((store.get(id).data()[0] - 2.0 * (1.0 - 0.001)).abs() < 1e-12);
}

#[test]
fn adamw_rejects_non_finite_gradients() {
    let mut store = ParamStore::<f32>::new();
    let id = store.add("p", Tensor::scalar(1.0));
    let mut opt = AdamW::new(AdamWConfig::default(), &store);
    let mut g = promo_nn::Gradients::zeros_like(&store);
    g.get_mut(id).data_mut()[0] = f32::INFINITY;
    assert!(matches!(opt.step(&mut store, &g), Err(NnError::NonFinite(_))));
}

#[test]
fn gradient_check_is_tight_for_linear_nets() {
    let net = Network::<f32>::new(
        NetworkSpec::new(vec![LayerSpec::Linear { inp: 4, out: 3 }, LayerSpec::Linear { inp: 3, out: 2 }]),
        5,
    )
    .unwrap();
    let x = Tensor::from_f64(&[3, 4], &(0..12).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>()).unwrap();
    assert!(gradient_check(&net, &x, 9).unwrap() < 1e-6);
}

#[test]
fn gradient_check_attention_layernorm_gelu() {
    let spec = NetworkSpec::new(vec![
        LayerSpec::Linear { inp: 3, out: 4 },
        LayerSpec::SelfAttention { dim: 4, heads: 2 },
        LayerSpec::LayerNorm { dim: 4 },
        LayerSpec::Gelu,
        LayerSpec::Linear { inp: 4, out: 2 },
    ]);
    let net = Network::<f32>::new(spec, 17).unwrap();
    let x = Tensor::from_f64(&[2, 3, 3], &(0..18).map(|i| (i as f64 * 0.61).cos()).collect::<Vec<_>>()).unwrap();
    assert!(gradient_check(&net, &x, 3).unwrap() < 1e-3);
}

#[test]
fn gradient_check_detects_corrupted_gradient() {
    let spec = NetworkSpec::new(vec![LayerSpec::Linear { inp: 3, out: 3 }, LayerSpec::Gelu]);
    let net = Network::<f64>::new(spec, 2).unwrap();
    let x = Tensor::<f64>::from_f64(&[2, 3], &[0.3, -0.2, 0.9, 1.1, 0.4, -0.7]).unwrap();
    let mut analytic = analytic_gradients(&net, &x, 1).unwrap();
    let numeric = numeric_gradients(&net, &x, 1).unwrap();
    assert!(max_relative_error(&analytic, &numeric) < 1e-6);
    let id = net.params().id("layer0.w").unwrap();
    let k = analytic.get(id).data().iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).unwrap().0;
    analytic.get_mut(id).data_mut()[k] *= 2.0;
    assert!(max_relative_error(&analytic, &numeric) > 0.3);
}

#[test]
fn sinusoidal_embedding_properties() {
    let e0 = sinusoidal_embedding::<f64>(0.0, 8).unwrap();
    for pair in e0.chunks(2) {
        assert_eq!(pair, &[0.0, 1.0]);
    }
    for t in [1.0, 7.0, 99.0, 1000.0] {
        assert!(sinusoidal_embedding::<f64>(t, 64).unwrap().iter().all(|v| v.abs() <= 1.0));
    }
    assert_eq!(sinusoidal_embedding::<f32>(1.0, 7), Err(NnError::OddDimension(7)));

    // |e(4) - e(3)|^2 = sum_i (2 - 2 cos(w_i)) since the pairs are rotations by t * w_i
    let (a, b) = (sinusoidal_embedding::<f64>(3.0, 64).unwrap(), sinusoidal_embedding::<f64>(4.0, 64).unwrap());
    let dist2: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum();
    let oracle: f64 = (0..32).map(|i| 2.0 - 2.0 * 10000f64.powf(-(2.0 * i as f64) / 64.0).cos()).sum();
    assert!(dist2 > 0.0);
    assert!((dist2 - oracle).abs() < 1e-12);
}

fn identity_attention(store: &mut ParamStore<f64>, dim: usize) -> MultiHeadAttention {
    let mut rng = rng_from(0);
    let mha = MultiHeadAttention::new(store, "att", dim, 1, 0.0, &mut rng).unwrap();
    let eye: Vec<f64> = (0..dim * dim).map(|i| if i % (dim + 1) == 0 { 1.0 } else { 0.0 }).collect();
    for l in [&mha.q, &mha.k, &mha.v, &mha.o] {
        *store.get_mut(l.w) = Tensor::new(vec![dim, dim], eye.clone()).unwrap();
        *store.get_mut(l.b) = Tensor::zeros(&[dim]);
    }
    mha
}

#[test]
fn attention_over_single_key_returns_projected_value() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = rng_from(4);
    let mha = MultiHeadAttention::new(&mut store, "att", 4, 2, 0.0, &mut rng).unwrap();
    let value = [0.3, -0.8, 1.5, 0.2];
    let mut outs = Vec::new();
    for q in [[1.0, 0.0, 0.0, 0.0], [-3.0, 2.0, 0.5, 9.0]] {
        let mut tape = Tape::new(&store, false, 0);
        let qv = tape.leaf(Tensor::from_f64(&[1, 1, 4], &q).unwrap());
        let kv = tape.leaf(Tensor::from_f64(&[1, 1, 4], &value).unwrap());
        let y = mha.forward(&mut tape, qv, kv, None).unwrap();
        outs.push(tape.value(y).clone());
    }
    // o(v(value)) computed directly
    let mut tape = Tape::new(&store, false, 0);
    let kv = tape.leaf(Tensor::from_f64(&[1, 4], &value).unwrap());
    let v = mha.v.forward(&mut tape, kv);
    let o = mha.o.forward(&mut tape, v);
    let expected = tape.value(o).data().to_vec();
    for out in outs {
        for (a, b) in out.data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_matches_hand_softmax() {
    let mut store = ParamStore::<f64>::new();
    let mha = identity_attention(&mut store, 2);
    let q = [[1.0, 0.0], [0.5, -1.0]];
    let k = [[1.0, 2.0], [0.0, 1.0], [-1.0, 0.5]];
    let mut tape = Tape::new(&store, false, 0);
    let qv = tape.leaf(Tensor::from_f64(&[1, 2, 2], &q.concat()).unwrap());
    let kv = tape.leaf(Tensor::from_f64(&[1, 3, 2], &k.concat()).unwrap());
    let y = mha.forward(&mut tape, qv, kv, None).unwrap();
    let got = tape.value(y).data().to_vec();
    for (i, qi) in q.iter().enumerate() {
        let s: Vec<f64> = k.iter().map(|kj| (qi[0] * kj[0] + qi[1] * kj[1]) / 2f64.sqrt()).collect();
        let z: f64 = s.iter().map(|v| v.exp()).sum();
        let w: Vec<f64> = s.iter().map(|v| v.exp() / z).collect();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for c in 0..2 {
            let expect: f64 = (0..3).map(|j| w[j] * k[j][c]).sum();
            assert!((got[i * 2 + c] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_masking_and_errors() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = rng_from(1);
    assert_eq!(
        MultiHeadAttention::new(&mut store, "bad", 6, 4, 0.0, &mut rng).unwrap_err(),
        NnError::HeadSplit { dim: 6, heads: 4 }
    );
    let mha = identity_attention(&mut store, 2);
    let mut tape = Tape::new(&store, false, 0);
    let qv = tape.leaf(Tensor::from_f64(&[1, 1, 2], &[1.0, 1.0]).unwrap());
    let kv = tape.leaf(Tensor::from_f64(&[1, 2, 2], &[5.0, 5.0, -1.0, 2.0]).unwrap());
    assert_eq!(mha.forward(&mut tape, qv, kv, Some(&[false, false])).unwrap_err(), NnError::AllMasked);
    // masking the first key leaves only the second value
    let y = mha.forward(&mut tape, qv, kv, Some(&[false, true])).unwrap();
    let got = tape.value(y).data();
    assert!((got[0] + 1.0).abs() < 1e-12 && (got[1] - 2.0).abs() < 1e-12);
}

fn fused_attention_loss(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, keep: &[bool], r: &[f64]) -> f64 {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store, true, 9);
    let (q, k, v) = (tape.leaf(q.clone()), tape.leaf(k.clone()), tape.leaf(v.clone()));
    let y = tape.attention(q, k, v, 2, Some(keep), 0.3);
    tape.value(y).data().iter().zip(r).map(|(a, b)| a * b).sum()
}

#[test]
fn fused_attention_matches_unfused_and_finite_differences() {
    use rand::Rng;
    let mut rng = rng_from(5);
    let mut rand_t = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    };
    let (q, k, v) = (rand_t(&[2, 3, 4]), rand_t(&[2, 5, 4]), rand_t(&[2, 5, 4]));
    let r = rand_t(&[2, 3, 4]).data().to_vec();
    let keep = [true, false, true, true, false, true, true, true, true, false];

    // Without dropout the fused op equals the split/bmm/softmax/merge chain.
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store, false, 0);
    let (qv, kv, vv) = (tape.leaf(q.clone()), tape.leaf(k.clone()), tape.leaf(v.clone()));
    let fused = tape.attention(qv, kv, vv, 2, Some(&keep), 0.3);
    let (qh, kh, vh) = (tape.split_heads(qv, 2), tape.split_heads(kv, 2), tape.split_heads(vv, 2));
    let s = tape.bmm(qh, kh, false, true);
    let s = tape.scale(s, 1.0 / 2f64.sqrt());
    let w = tape.softmax_grouped(s, &keep, 2 * 3);
    let ctx = tape.bmm(w, vh, false, false);
    let unfused = tape.merge_heads(ctx, 2);
    for (a, b) in tape.value(fused).data().iter().zip(tape.value(unfused).data()) {
        assert!((a - b).abs() < 1e-12);
    }

    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store, true, 9);
    let (qv, kv, vv) = (tape.leaf(q.clone()), tape.leaf(k.clone()), tape.leaf(v.clone()));
    let y = tape.attention(qv, kv, vv, 2, Some(&keep), 0.3);
    let g = Tensor::new(vec![2, 3, 4], r.clone()).unwrap();
    let (_, grads) = tape.backward_with_inputs(y, &g, &[qv, kv, vv]).unwrap();
    let h = 1e-6;
    for (which, analytic) in grads.iter().enumerate() {
        for idx in 0..analytic.len() {
            let mut inputs = [q.clone(), k.clone(), v.clone()];
            inputs[which].data_mut()[idx] += h;
            let plus = fused_attention_loss(&inputs[0], &inputs[1], &inputs[2], &keep, &r);
            inputs[which].data_mut()[idx] -= 2.0 * h;
            let minus = fused_attention_loss(&inputs[0], &inputs[1], &inputs[2], &keep, &r);
            let numeric = (plus - minus) / (2.0 * h);
            assert!((numeric - analytic.data()[idx]).abs() < 1e-7, "input {which} index {idx}");
        }
    }
}
