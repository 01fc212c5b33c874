mod support;

use proptest::prelude::*;
use support::props::{doubling_case, fold_case, quantizer_case, repeat, ternary_case};
use vitq::quantizer::{Granularity, QuantizerState, Target};
use vitq::Tensor;

#[test]
fn fold_reproduces_layer() {
    repeat(100, 1, fold_case).unwrap();
}

#[test]
fn quantizer_invariants() {
    repeat(1000, 2, quantizer_case).unwrap();
}

#[test]
fn ternary_values() {
    repeat(1000, 3, ternary_case).unwrap();
}

#[test]
fn error_shrinks_with_levels() {
    repeat(1000, 4, doubling_case).unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn any_seed_keeps_invariants(seed in any::<u64>()) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        prop_assert!(quantizer_case(&mut rng).is_ok());
        prop_assert!(fold_case(&mut rng).is_ok());
    }

    #[test]
    fn outputs_lie_on_the_grid(
        xs in prop::collection::vec(-50.0f64..50.0, 1..64),
        delta in 1e-3f64..2.0,
        zero in -5.0f64..20.0,
        levels in 2usize..64,
    ) {
        let q = QuantizerState::new(levels, Granularity::PerTensor, Target::Activations, vec![delta], vec![zero]).unwrap();
        let y = q.apply(&Tensor::from_vec(xs).unwrap()).unwrap();
        let zr = zero.round_ties_even();
        for v in y.data() {
            let k = (v / delta).round() + zr;
            prop_assert!((0.0..=(levels - 1) as f64).contains(&k));
            prop_assert!((v - (k - zr) * delta).abs() <= 1e-12 * delta.max(v.abs()));
        }
    }
}
