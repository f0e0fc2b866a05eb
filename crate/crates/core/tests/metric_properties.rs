use hsp_core::loss_metrics::{hausdorff, metrics, overlap, LabelMap};
use hsp_core::numerics::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mask(rng: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    let density = rng.random_range(0.05..0.95);
    (0..n).map(|_| rng.random_bool(density)).collect()
}

#[test]
fn dice_iou_identity_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let n = rng.random_range(1..200);
        let (p, t) = (mask(&mut rng, n), mask(&mut rng, n));
        let (dice, iou) = overlap(&p, &t);
        assert!((dice - 2.0 * iou / (1.0 + iou)).abs() < 1e-9);
    }
}

fn label_map(h: usize, w: usize, k: u8) -> impl Strategy<Value = LabelMap> {
    proptest::collection::vec(0..k, h * w).prop_map(move |v| LabelMap::new(h, w, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_are_symmetric_and_bounded((a, b) in (label_map(6, 7, 3), label_map(6, 7, 3))) {
        let ab = metrics(&a, &b, 3).unwrap();
        let ba = metrics(&b, &a, 3).unwrap();
        prop_assert!((ab.dice - ba.dice).abs() < 1e-12);
        prop_assert!((ab.iou - ba.iou).abs() < 1e-12);
        prop_assert!((ab.hd - ba.hd).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab.dice) && (0.0..=1.0).contains(&ab.iou));
        prop_assert!(ab.iou <= ab.dice + 1e-12);
    }

    #[test]
    fn self_comparison_is_perfect(a in label_map(5, 5, 3)) {
        let r = metrics(&a, &a, 3).unwrap();
        prop_assert_eq!(r.dice, 1.0);
        prop_assert_eq!(r.iou, 1.0);
        prop_assert_eq!(r.hd, 0.0);
    }

    #[test]
    fn hausdorff_is_invariant_under_transposition(bits in proptest::collection::vec(any::<bool>(), 2 * 30)) {
        let (h, w) = (5, 6);
        let (p, t) = bits.split_at(30);
        let tr = |m: &[bool]| -> Vec<bool> { (0..w * h).map(|i| m[(i % h) * w + i / h]).collect() };
        let d = hausdorff(p, t, h, w);
        let dt = hausdorff(&tr(p), &tr(t), w, h);
        prop_assert!((d - dt).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one(v in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([3, 4], v).unwrap());
        let s = g.softmax(x, 1).unwrap();
        for row in g.value(s).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn softmax_is_shift_invariant(v in proptest::collection::vec(-5.0f64..5.0, 6), c in -10.0f64..10.0) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([2, 3], v).unwrap());
        let shifted = g.add_scalar(x, c).unwrap();
        let (a, b) = (g.softmax(x, 1).unwrap(), g.softmax(shifted, 1).unwrap());
        prop_assert!(g.value(a).max_abs_diff(g.value(b)).unwrap() < 1e-12);
    }

    #[test]
    fn layer_norm_rows_are_standardized(v in proptest::collection::vec(-10.0f64..10.0, 3 * 8)) {
        let spread = v.chunks(8).all(|r| {
            let m = r.iter().sum::<f64>() / 8.0;
            r.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 8.0 > 1e-3
        });
        prop_assume!(spread);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([3, 8], v).unwrap());
        let y = g.layer_norm(x, 1e-6).unwrap();
        for row in g.value(y).data().chunks(8) {
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 8.0;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-2);
        }
    }
}
