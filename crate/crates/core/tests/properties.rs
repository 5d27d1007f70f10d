use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ssmlab::evaluator::classify_sequence;
use ssmlab::ssm::{parallel_scan, scan_combine, sequential_states, Activation, ScanElement, SsmLayerParams};

fn element(n: usize) -> impl Strategy<Value = ScanElement> {
    (prop::collection::vec(0.0..1.0f64, n), prop::collection::vec(-2.0..2.0f64, n)).prop_map(|(w, h)| ScanElement { w, h })
}

proptest! {
    #[test]
    fn combine_is_associative((a, b, c) in (1usize..6).prop_flat_map(|n| (element(n), element(n), element(n)))) {
        let l = scan_combine(&scan_combine(&a, &b).unwrap(), &c).unwrap();
        let r = scan_combine(&a, &scan_combine(&b, &c).unwrap()).unwrap();
        for (x, y) in l.w.iter().chain(&l.h).zip(r.w.iter().chain(&r.h)) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn parallel_matches_sequential(seed in any::<u64>(), t in 1usize..300, m in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = SsmLayerParams::random(m, 3, 3, 0.5, 0.999, Activation::Tanh, &mut rng);
        let xs: Vec<Vec<f64>> = (0..t).map(|k| (0..3).map(|j| ((k * 7 + j) as f64).sin()).collect()).collect();
        let h0 = vec![0.5; m];
        let a = sequential_states(&p, &xs, &h0).unwrap();
        let b = parallel_scan(&p.scan_elements(&xs), &h0).unwrap();
        for (ra, rb) in a.iter().zip(&b) {
            for (x, y) in ra.iter().zip(rb) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn classification_is_scale_free_at_zero_epsilon(ppl in prop::collection::vec(1.0..50.0f64, 2..8), k in 0.01..100.0f64) {
        let scaled: Vec<f64> = ppl.iter().map(|p| p * k).collect();
        prop_assert_eq!(classify_sequence(&ppl, 0.0).unwrap(), classify_sequence(&scaled, 0.0).unwrap());
    }
}
