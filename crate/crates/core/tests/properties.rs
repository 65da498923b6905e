use proptest::prelude::*;
use rand::SeedableRng;

use owdfa::metrics::{ari, auc, hungarian, nmi};
use owdfa::pairing::{select_pairs, SimilarityTables};
use owdfa::tensor::{Graph, Tensor};

fn matrix(n: usize) -> impl Strategy<Value = Vec<Vec<i64>>> {
    prop::collection::vec(prop::collection::vec(-50i64..50, n), n)
}

fn partition(n: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0usize..5, n)
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(v in prop::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([3, 4], v).unwrap());
        let p = g.softmax(x).unwrap();
        for row in g.value(p).data().chunks(4) {
            prop_assert!(row.iter().all(|&q| q >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hungarian_beats_every_swap(m in (1usize..7).prop_flat_map(matrix)) {
        let n = m.len();
        let p = hungarian(&m);
        let mut sorted = p.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        // no pairwise exchange improves an optimal assignment
        for i in 0..n {
            for j in i + 1..n {
                prop_assert!(m[i][p[i]] + m[j][p[j]] >= m[i][p[j]] + m[j][p[i]]);
            }
        }
    }

    #[test]
    fn nmi_and_ari_ignore_label_names((a, b) in (2usize..40).prop_flat_map(|n| (partition(n), partition(n)))) {
        let renamed: Vec<usize> = a.iter().map(|&x| 10 + (x * 3) % 5).collect();
        prop_assert!((nmi(&a, &b).unwrap() - nmi(&renamed, &b).unwrap()).abs() < 1e-12);
        prop_assert!((ari(&a, &b).unwrap() - ari(&renamed, &b).unwrap()).abs() < 1e-12);
        prop_assert!((nmi(&a, &b).unwrap() - nmi(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((ari(&a, &b).unwrap() - ari(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((nmi(&a, &a).unwrap() - 1.0).abs() < 1e-12 || nmi(&a, &a).unwrap() == 0.0);
    }

    #[test]
    fn auc_flips_with_negated_scores(
        scores in prop::collection::vec(0i32..6, 2..30),
        flags in prop::collection::vec(any::<bool>(), 30),
    ) {
        let mut positive: Vec<bool> = flags[..scores.len()].to_vec();
        positive[0] = true;
        positive[1] = false;
        let s: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        let sum = auc(&s, &positive).unwrap() + auc(&neg, &positive).unwrap();
        prop_assert_eq!(sum, 1.0);
    }

    #[test]
    fn pairing_ignores_per_sample_feature_scale(
        global in prop::collection::vec(0.1f64..1.0, 6 * 3),
        local in prop::collection::vec(0.1f64..1.0, 6 * 3 * 4),
        powers in prop::collection::vec(-3i32..4, 6),
        seed in any::<u64>(),
    ) {
        let labels = [Some(0), Some(1), Some(0), None, None, None];
        let gt = Tensor::new([6, 3], global.clone()).unwrap();
        let lt = Tensor::new([6, 3, 2, 2], local.clone()).unwrap();
        // powers of two keep the rescaled cosines bit-exact
        let sg: Vec<f64> = global.iter().enumerate().map(|(i, v)| v * 2f64.powi(powers[i / 3])).collect();
        let sl: Vec<f64> = local.iter().enumerate().map(|(i, v)| v * 2f64.powi(powers[i / 12])).collect();
        let a = select_pairs(
            &labels,
            &SimilarityTables::new(&gt, &lt).unwrap(),
            &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed),
        );
        let b = select_pairs(
            &labels,
            &SimilarityTables::new(&Tensor::new([6, 3], sg).unwrap(), &Tensor::new([6, 3, 2, 2], sl).unwrap()).unwrap(),
            &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed),
        );
        prop_assert_eq!(a, b);
    }
}
