//! Library results checked against direct, loop-based computations.

mod common;

use ndarray::{array, Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stepfit::em::{e_step, m_step_full};
use stepfit::emission::one_hot;
use stepfit::inference::{class_difference_test, information_criteria, score};
use stepfit::stepwise::{
    bch_adjust, confusion_from_posteriors, third_step, Correction, ImputedWeights,
};
use stepfit::{
    Block, Covariance, Dataset, EmConfig, EmissionParams, Family, FittedBlock, MixtureModel,
    ModelDescriptor, ModelInput,
};

const NAN: f64 = f64::NAN;

fn binary_model() -> MixtureModel {
    let block = Block::new("y", Family::Binary, 0..3).fiml(true);
    MixtureModel {
        n_components: 2,
        class_weights: array![0.3, 0.7],
        measurement: vec![FittedBlock {
            block,
            params: EmissionParams::Binary {
                pi: array![[0.9, 0.8, 0.3], [0.2, 0.4, 0.6]],
            },
        }],
        structural: Vec::new(),
        fit_meta: Default::default(),
    }
}

/// `sum_c rho_c prod_j pi^y (1 - pi)^(1 - y)` over observed `j`, in the linear domain.
fn binary_likelihood(rho: &[f64], pi: &Array2<f64>, y: &[f64]) -> Vec<f64> {
    (0..rho.len())
        .map(|c| {
            let mut p = rho[c];
            for (j, &v) in y.iter().enumerate() {
                if v.is_nan() {
                    continue;
                }
                p *= if v == 1.0 {
                    pi[[c, j]]
                } else {
                    1.0 - pi[[c, j]]
                };
            }
            p
        })
        .collect()
}

#[test]
fn binary_log_likelihood_and_posterior_match_direct_products() {
    let model = binary_model();
    let y = array![
        [1.0, 1.0, 0.0],
        [0.0, NAN, 1.0],
        [NAN, NAN, NAN],
        [1.0, 0.0, 1.0]
    ];
    let data = Dataset::from_values(y.clone()).unwrap();
    let input = ModelInput::measurement(&data);
    let (resp, avg) = e_step(&model, &input).unwrap();
    let EmissionParams::Binary { pi } = &model.measurement[0].params else {
        unreachable!()
    };
    let mut total = 0.0;
    for (i, row) in y.outer_iter().enumerate() {
        let joint = binary_likelihood(&[0.3, 0.7], pi, row.as_slice().unwrap());
        let s: f64 = joint.iter().sum();
        total += s.ln();
        for (c, p) in joint.iter().enumerate() {
            assert!((resp.view()[[i, c]] - p / s).abs() < 1e-14);
        }
    }
    assert!((avg - total / 4.0).abs() < 1e-14);
    assert!((score(&model, &input).unwrap() - total / 4.0).abs() < 1e-14);
    // A unit with nothing observed keeps the prior as its posterior.
    assert!((resp.view()[[2, 0]] - 0.3).abs() < 1e-15);
}

#[test]
fn diagonal_gaussian_density_matches_formula() {
    let block = Block::new("x", Family::GaussianDiag, 0..2).fiml(true);
    let means = array![[0.0, 1.0], [2.0, -1.0]];
    let vars = array![[1.0, 0.5], [2.0, 0.25]];
    let model = MixtureModel {
        n_components: 2,
        class_weights: array![0.4, 0.6],
        measurement: vec![FittedBlock {
            block,
            params: EmissionParams::Gaussian {
                means: means.clone(),
                covariance: Covariance::Diag(vars.clone()),
            },
        }],
        structural: Vec::new(),
        fit_meta: Default::default(),
    };
    let x = array![[0.5, 0.2], [1.5, NAN], [-0.3, -1.2]];
    let data = Dataset::from_values(x.clone()).unwrap();
    let (_, avg) = e_step(&model, &ModelInput::measurement(&data)).unwrap();
    let pdf = |v: f64, m: f64, s2: f64| {
        (-(v - m).powi(2) / (2.0 * s2)).exp() / (2.0 * std::f64::consts::PI * s2).sqrt()
    };
    let mut total = 0.0;
    for row in x.outer_iter() {
        let mut s = 0.0;
        for (c, rho) in [0.4, 0.6].into_iter().enumerate() {
            let mut p = rho;
            for j in 0..2 {
                if !row[j].is_nan() {
                    p *= pdf(row[j], means[[c, j]], vars[[c, j]]);
                }
            }
            s += p;
        }
        total += f64::ln(s);
    }
    assert!((avg - total / 3.0).abs() < 1e-13);
}

#[test]
fn m_step_gives_weighted_frequencies_and_means() {
    let model = binary_model();
    let y = array![
        [1.0, 0.0, 1.0],
        [0.0, NAN, 1.0],
        [1.0, 1.0, 0.0],
        [0.0, 0.0, 0.0]
    ];
    let u = array![1.0, 2.0, 0.5, 1.5];
    let data = Dataset::from_values(y.clone())
        .unwrap()
        .with_weights(u.clone())
        .unwrap();
    let resp = array![[0.9, 0.1], [0.3, 0.7], [0.6, 0.4], [0.2, 0.8]];
    let fitted = m_step_full(&model, &ModelInput::measurement(&data), resp.view(), false).unwrap();

    let total: f64 = u.sum();
    let EmissionParams::Binary { pi } = &fitted.measurement[0].params else {
        unreachable!()
    };
    for c in 0..2 {
        let mass: f64 = (0..4).map(|i| u[i] * resp[[i, c]]).sum();
        assert!((fitted.class_weights[c] - mass / total).abs() < 1e-14);
        for j in 0..3 {
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..4 {
                if !y[[i, j]].is_nan() {
                    num += u[i] * resp[[i, c]] * y[[i, j]];
                    den += u[i] * resp[[i, c]];
                }
            }
            assert!((pi[[c, j]] - num / den).abs() < 1e-12, "pi[{c},{j}]");
        }
    }
}

#[test]
fn information_criteria_follow_hand_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inst = common::random_instance(Family::Binary, 150, 3, &mut rng);
    let input = ModelInput::measurement(&inst.mm);
    let stats = information_criteria(&inst.truth, &input).unwrap();
    // 3 classes x 6 indicators plus 2 free class weights
    assert_eq!(stats.n_parameters, 20);
    let ll = score(&inst.truth, &input).unwrap() * 150.0;
    assert!((stats.total_log_likelihood - ll).abs() < 1e-9);
    assert!((stats.aic - (-2.0 * ll + 40.0)).abs() < 1e-9);
    assert!((stats.bic - (-2.0 * ll + 20.0 * 150f64.ln())).abs() < 1e-9);
}

#[test]
fn naive_third_step_means_are_modal_class_averages() {
    let z = array![[1.0], [2.0], [4.0], [-1.0], [0.5], [3.0]];
    let classes = [0, 0, 1, 2, 2, 1];
    let data = Dataset::from_values(z.clone()).unwrap();
    let w = ImputedWeights {
        w: one_hot(&classes, 3),
        corrected: false,
    };
    let desc = ModelDescriptor::new(vec![Block::new("z", Family::GaussianUnit, 0..1)]);
    let fit = third_step(
        &data,
        &w,
        None,
        Correction::None,
        &desc,
        &EmConfig::default(),
    )
    .unwrap();
    let EmissionParams::Gaussian { means, .. } = &fit.structural[0].params else {
        unreachable!()
    };
    let expected = [1.5, 3.5, -0.25];
    for c in 0..3 {
        assert!((means[[c, 0]] - expected[c]).abs() < 1e-14);
        assert!((fit.class_weights[c] - 2.0 / 6.0).abs() < 1e-14);
    }
}

#[test]
fn confusion_and_bch_by_hand() {
    let post = array![[0.8, 0.2], [0.3, 0.7], [0.6, 0.4]];
    let w = one_hot(&[0, 1, 0], 2);
    let u = Array1::from(vec![1.0, 1.0, 2.0]);
    let d = confusion_from_posteriors(post.view(), w.view(), u.view()).unwrap();
    // D[c, k] = sum_i u_i p_ic w_ik / sum_i u_i p_ic
    let m0 = 0.8 + 0.3 + 1.2;
    let m1 = 0.2 + 0.7 + 0.8;
    let expected = array![[(0.8 + 1.2) / m0, 0.3 / m0], [(0.2 + 0.8) / m1, 0.7 / m1]];
    for (a, b) in d.view().iter().zip(expected.iter()) {
        assert!((a - b).abs() < 1e-14);
    }
    let adj = bch_adjust(
        &ImputedWeights {
            w: w.clone(),
            corrected: false,
        },
        &d,
    )
    .unwrap();
    let det = expected[[0, 0]] * expected[[1, 1]] - expected[[0, 1]] * expected[[1, 0]];
    let inv = array![
        [expected[[1, 1]], -expected[[0, 1]]],
        [-expected[[1, 0]], expected[[0, 0]]]
    ] / det;
    let want = w.dot(&inv);
    for (a, b) in adj.w.iter().zip(want.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn class_difference_uses_paired_differences() {
    let reference = [1.0, 1.2, 0.9, 1.1];
    let target = [2.0, 2.1, 2.3, 1.8];
    let d: Vec<f64> = target.iter().zip(&reference).map(|(t, r)| t - r).collect();
    let mean = d.iter().sum::<f64>() / 4.0;
    let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
    let res = class_difference_test(&reference, &target).unwrap();
    assert!((res.estimate - mean).abs() < 1e-15);
    assert!((res.std_error - sd).abs() < 1e-15);
    assert!((res.z - mean / sd).abs() < 1e-12);
    assert!((res.p_value - libm::erfc(res.z.abs() / 2f64.sqrt())).abs() < 1e-12);
}
