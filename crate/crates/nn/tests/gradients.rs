//! Finite-difference agreement for every layer type over random instances.

use proptest::prelude::*;
use promo_nn::{gradient_check, LayerSpec, Network, NetworkSpec, Tensor};
use promo_nn::rng::{normal_vec, rng_from};

pub fn layer_cases() -> Vec<(&'static str, NetworkSpec, Vec<usize>)> {
    use LayerSpec::*;
    vec![
        ("linear", NetworkSpec::new(vec![Linear { inp: 3, out: 4 }]), vec![2, 3]),
        ("layer_norm", NetworkSpec::new(vec![Linear { inp: 3, out: 4 }, LayerNorm { dim: 4 }]), vec![2, 3]),
        ("gelu", NetworkSpec::new(vec![Linear { inp: 3, out: 4 }, Gelu]), vec![2, 3]),
        ("attention", NetworkSpec::new(vec![SelfAttention { dim: 4, heads: 2 }]), vec![2, 3, 4]),
        ("bigru", NetworkSpec::new(vec![BiGru { inp: 3, hidden: 3 }]), vec![2, 4, 3]),
        ("embedding", NetworkSpec::new(vec![Embedding { vocab: 5, dim: 3 }, Linear { inp: 3, out: 2 }]), vec![2, 3]),
        (
            "residual",
            NetworkSpec::new(vec![Residual(vec![Linear { inp: 3, out: 5 }, Gelu, Linear { inp: 5, out: 3 }])]),
            vec![2, 3],
        ),
        ("dropout", NetworkSpec::new(vec![Linear { inp: 3, out: 6 }, Dropout { p: 0.3 }]), vec![2, 3]),
    ]
}

fn input_for(spec: &NetworkSpec, shape: &[usize], seed: u64) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let mut rng = rng_from(seed ^ 0xABCD);
    let data: Vec<f32> = match spec.layers[0] {
        LayerSpec::Embedding { vocab, .. } => (0..n).map(|i| ((seed as usize + 3 * i) % vocab) as f32).collect(),
        _ => normal_vec(&mut rng, n),
    };
    Tensor::new(shape.to_vec(), data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn every_layer_type_matches_finite_differences(seed in 0u64..10_000) {
        for (name, spec, shape) in layer_cases() {
            let net = Network::<f32>::new(spec.clone(), seed).unwrap_or_else(|e| panic!("{name}: {e:?}"));
            let x = input_for(&spec, &shape, seed);
            let err = gradient_check(&net, &x, seed).unwrap();
            prop_assert!(err < 1e-3, "{name}: relative error {err}");
        }
    }
}
