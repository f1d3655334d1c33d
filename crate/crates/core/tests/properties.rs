mod common;

use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stepfit::bootstrap::align_responsibilities;
use stepfit::em::{e_step, random_responsibilities};
use stepfit::inference::{aic, bic, mean_std, predict};
use stepfit::report::{model_from_json, model_to_json};
use stepfit::simulation::bias_rmse;
use stepfit::stepwise::{bch_adjust, confusion_from_posteriors, ImputedWeights};
use stepfit::{Family, ModelInput};

const FAMILIES: [Family; 6] = [
    Family::Binary,
    Family::Categorical,
    Family::GaussianUnit,
    Family::GaussianSpherical,
    Family::GaussianDiag,
    Family::GaussianFull,
];

fn permutation(k: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..k).collect();
    p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    p
}

fn agreement(a: &Array2<f64>, b: &Array2<f64>, perm: &[usize]) -> f64 {
    (0..a.nrows())
        .map(|i| {
            perm.iter()
                .enumerate()
                .map(|(k, &l)| a[[i, k]] * b[[i, l]])
                .sum::<f64>()
        })
        .sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn posteriors_are_distributions_and_follow_relabeling(
        family in 0usize..6, k in 2usize..5, seed in any::<u64>(), pseed in any::<u64>()
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = common::random_instance(FAMILIES[family], 60, k, &mut rng);
        let input = ModelInput::measurement(&inst.mm);
        let (resp, ll) = e_step(&inst.truth, &input).unwrap();
        for row in resp.view().outer_iter() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
        let perm = permutation(k, pseed);
        let permuted = inst.truth.permute_classes(&perm);
        let (presp, pll) = e_step(&permuted, &input).unwrap();
        prop_assert!((ll - pll).abs() < 1e-12);
        for i in 0..60 {
            for (new, &old) in perm.iter().enumerate() {
                prop_assert!((presp.view()[[i, new]] - resp.view()[[i, old]]).abs() < 1e-12);
            }
        }
        let before = predict(&inst.truth, &input).unwrap();
        let after = predict(&permuted, &input).unwrap();
        for (b, a) in before.iter().zip(&after) {
            prop_assert_eq!(perm[*a], *b);
        }
    }

    #[test]
    fn json_round_trip_is_exact(family in 0usize..6, k in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = common::random_instance(FAMILIES[family], 10, k, &mut rng);
        let back = model_from_json(&model_to_json(&inst.truth, None)).unwrap();
        prop_assert_eq!(back, inst.truth);
    }

    #[test]
    fn information_criteria_penalize_parameters(
        ll in -1e5f64..0.0, p in 1usize..200, n in 2.0f64..1e6
    ) {
        prop_assert!(aic(ll, p + 1) > aic(ll, p));
        prop_assert!(bic(ll, p + 1, n) > bic(ll, p, n));
        prop_assert!(bic(ll, p, n * 2.0) > bic(ll, p, n));
        prop_assert!(aic(ll - 1.0, p) > aic(ll, p));
    }

    #[test]
    fn rmse_bounds_absolute_bias(xs in prop::collection::vec(-10.0f64..10.0, 2..50), truth in -5.0f64..5.0) {
        let (bias, rmse) = bias_rmse(&xs, truth);
        let (mean, sd) = mean_std(&xs);
        prop_assert!((bias - (mean - truth)).abs() < 1e-9);
        prop_assert!(rmse + 1e-12 >= bias.abs());
        let m = xs.len() as f64;
        prop_assert!((rmse.powi(2) - (bias.powi(2) + sd.powi(2) * (m - 1.0) / m)).abs() < 1e-8);
    }

    #[test]
    fn alignment_never_loses_to_identity(k in 2usize..6, n in 5usize..40, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_responsibilities(n, k, &mut rng);
        let b = random_responsibilities(n, k, &mut rng);
        let w = Array1::ones(n);
        let sigma = align_responsibilities(a.view(), b.view(), w.view());
        let mut sorted = sigma.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..k).collect::<Vec<_>>());
        let identity: Vec<usize> = (0..k).collect();
        prop_assert!(agreement(&a, &b, &sigma) >= agreement(&a, &b, &identity) - 1e-12);
    }

    #[test]
    fn aligning_a_relabeled_copy_recovers_the_labels(k in 2usize..6, seed in any::<u64>(), pseed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_responsibilities(50, k, &mut rng);
        let perm = permutation(k, pseed);
        // b's column perm[j] holds a's column j
        let mut b = Array2::zeros((50, k));
        for (j, &l) in perm.iter().enumerate() {
            b.column_mut(l).assign(&a.column(j));
        }
        let sigma = align_responsibilities(a.view(), b.view(), Array1::ones(50).view());
        prop_assert_eq!(sigma, perm);
    }

    #[test]
    fn confusion_rows_and_bch_rows_sum_to_one(k in 2usize..5, n in 20usize..80, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Sharp posteriors keep D well conditioned.
        let mut post = random_responsibilities(n, k, &mut rng);
        for i in 0..n {
            post[[i, i % k]] += 4.0;
            let s = post.row(i).sum();
            post.row_mut(i).mapv_inplace(|v| v / s);
        }
        let modal: Vec<usize> = post.outer_iter().map(|r| stepfit::math::argmax(r.as_slice().unwrap())).collect();
        let w = stepfit::emission::one_hot(&modal, k);
        let d = confusion_from_posteriors(post.view(), w.view(), Array1::ones(n).view()).unwrap();
        for row in d.view().outer_iter() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        let adj = bch_adjust(&ImputedWeights { w, corrected: false }, &d).unwrap();
        for row in adj.w.outer_iter() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }
}
