use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dropens::ensemble::{exact_arithmetic, exact_geometric, factorized_geometric};
use dropens::masks::MaskSpace;
use dropens::model::{output_distribution, Architecture, ModelParams, NormConstraintSet};

fn net(hidden: Vec<usize>, classes: usize, init: f64, seed: u64) -> ModelParams {
    let arch = if classes == 2 {
        Architecture::binary(3, hidden).unwrap()
    } else {
        Architecture::classifier(3, hidden, classes).unwrap()
    };
    ModelParams::init(&arch, init, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn hidden_sizes() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..=4, 1..=3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn arithmetic_mean_matches_brute_force(
        hidden in hidden_sizes(),
        classes in 2usize..=4,
        seed in any::<u64>(),
        v in prop::collection::vec(-2.0f64..2.0, 3),
    ) {
        let p = net(hidden.clone(), classes, 1.0, seed);
        let space = MaskSpace::new(hidden);
        let n = space.total_masks().unwrap() as f64;
        let mut oracle = vec![0.0; classes];
        for m in space.iter().unwrap() {
            let logits = p.forward(&v, Some(&m)).unwrap().output_logits;
            for (o, q) in oracle.iter_mut().zip(output_distribution(&logits, p.output_kind).unwrap()) {
                *o += q / n;
            }
        }
        let fast = exact_arithmetic(&p, &v, &space).unwrap().probs;
        for (a, b) in fast.iter().zip(&oracle) {
            prop_assert!((a - b).abs() < 1e-12, "{fast:?} vs {oracle:?}");
        }
    }

    #[test]
    fn factorized_geometric_matches_enumeration(
        hidden in hidden_sizes(),
        classes in 2usize..=4,
        seed in any::<u64>(),
        v in prop::collection::vec(-2.0f64..2.0, 3),
    ) {
        let p = net(hidden.clone(), classes, 2.0, seed);
        let space = MaskSpace::new(hidden);
        let a = exact_geometric(&p, &v, &space).unwrap().probs;
        let b = factorized_geometric(&p, &v, &space).unwrap().probs;
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn norm_projection_caps_rows_and_is_idempotent(
        hidden in hidden_sizes(),
        seed in any::<u64>(),
        cap in 0.05f64..2.0,
    ) {
        let mut p = net(hidden, 2, 3.0, seed);
        let caps = NormConstraintSet::new(vec![Some(cap); p.layers.len()]).unwrap();
        p.project_norms(&caps).unwrap();
        for layer in &p.layers {
            for u in 0..layer.fan_out {
                let norm = layer.row(u).iter().map(|w| w * w).sum::<f64>().sqrt();
                prop_assert!(norm <= cap * (1.0 + 1e-12));
            }
        }
        let once = p.clone();
        p.project_norms(&caps).unwrap();
        prop_assert_eq!(p, once);
    }

    #[test]
    fn model_bytes_round_trip(hidden in hidden_sizes(), classes in 2usize..=4, seed in any::<u64>()) {
        let p = net(hidden, classes, 0.5, seed);
        let back = ModelParams::from_bytes(&p.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(back, p);
    }

    #[test]
    fn mask_index_is_a_bijection(hidden in hidden_sizes()) {
        let space = MaskSpace::new(hidden);
        for (i, m) in space.iter().unwrap().enumerate() {
            prop_assert_eq!(space.index_of(&m).unwrap(), i as u64);
            prop_assert_eq!(space.mask_from_index(i as u64).unwrap(), m);
        }
    }
}
