#![allow(dead_code)]

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use stepfit::covariate::CovariateParams;
use stepfit::inference::sample_model;
use stepfit::{
    Block, Covariance, Dataset, EmissionParams, Family, FittedBlock, MixtureModel, ModelDescriptor,
    ModelSpec,
};

pub struct Instance {
    pub spec: ModelSpec,
    pub truth: MixtureModel,
    pub mm: Dataset,
    pub sm: Option<Dataset>,
    pub classes: Vec<usize>,
}

pub fn dirichlet(k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let draws: Vec<f64> = (0..k).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let s: f64 = draws.iter().sum();
    draws.into_iter().map(|v| v / s).collect()
}

/// Random parameters of `family` with `k` classes and `d` features.
pub fn random_params(family: Family, k: usize, d: usize, rng: &mut ChaCha8Rng) -> EmissionParams {
    match family {
        Family::Binary => EmissionParams::Binary {
            pi: Array2::from_shape_fn((k, d), |_| 0.1 + 0.8 * uniform(rng)),
        },
        Family::Categorical => {
            let c = 3;
            let mut probs = Array3::zeros((k, d, c));
            for a in 0..k {
                for b in 0..d {
                    let p = dirichlet(c, rng);
                    for l in 0..c {
                        probs[[a, b, l]] = 0.05 + 0.85 * p[l];
                    }
                    let s: f64 = (0..c).map(|l| probs[[a, b, l]]).sum();
                    for l in 0..c {
                        probs[[a, b, l]] /= s;
                    }
                }
            }
            EmissionParams::Categorical { probs }
        }
        Family::GaussianUnit
        | Family::GaussianSpherical
        | Family::GaussianDiag
        | Family::GaussianFull => {
            let means = Array2::from_shape_fn((k, d), |(c, _)| 2.5 * c as f64 + 0.5 * gauss(rng));
            let covariance = match family {
                Family::GaussianUnit => Covariance::Unit,
                Family::GaussianSpherical => {
                    Covariance::Spherical(Array1::from_shape_fn(k, |_| 0.5 + 1.5 * uniform(rng)))
                }
                Family::GaussianDiag => {
                    Covariance::Diag(Array2::from_shape_fn((k, d), |_| 0.5 + 1.5 * uniform(rng)))
                }
                _ => {
                    let mut cov = Array3::zeros((k, d, d));
                    for c in 0..k {
                        let a = Array2::from_shape_fn((d, d), |_| 0.7 * gauss(rng));
                        let s = a.dot(&a.t());
                        for i in 0..d {
                            for j in 0..d {
                                cov[[c, i, j]] = s[[i, j]] + if i == j { 0.5 } else { 0.0 };
                            }
                        }
                    }
                    Covariance::Full(cov)
                }
            };
            EmissionParams::Gaussian { means, covariance }
        }
        Family::Covariate => EmissionParams::Covariate(CovariateParams {
            beta: Array2::from_shape_fn((k, d), |(c, _)| if c == 0 { 0.0 } else { gauss(rng) }),
            intercept: Array1::from_shape_fn(k, |c| if c == 0 { 0.0 } else { 0.5 * gauss(rng) }),
        }),
    }
}

pub fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    rng.random()
}

pub fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn block_for(family: Family, d: usize) -> Block {
    Block::new(family.name(), family, 0..d)
}

/// Data drawn from a random model whose measurement side is one block of
/// `family`. Covariate instances use binary indicators and a two-column
/// covariate block on the structural side.
pub fn random_instance(family: Family, n: usize, k: usize, rng: &mut ChaCha8Rng) -> Instance {
    if family == Family::Covariate {
        let d_y = 6;
        let d_z = 2;
        let cov = random_params(Family::Covariate, k, d_z, rng);
        let ind = random_params(Family::Binary, k, d_y, rng);
        let z = Array2::from_shape_fn((n, d_z), |_| gauss(rng));
        let EmissionParams::Covariate(cp) = &cov else {
            unreachable!()
        };
        let log_prior = cp.log_prior(z.view());
        let mut classes = Vec::with_capacity(n);
        let mut y = Array2::zeros((n, d_y));
        for i in 0..n {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut x = k - 1;
            for c in 0..k {
                acc += log_prior[[i, c]].exp();
                if u < acc {
                    x = c;
                    break;
                }
            }
            classes.push(x);
            for (j, v) in ind.sample(x, rng).unwrap().into_iter().enumerate() {
                y[[i, j]] = v;
            }
        }
        let mm_block = block_for(Family::Binary, d_y);
        let sm_block = block_for(Family::Covariate, d_z);
        let truth = MixtureModel {
            n_components: k,
            class_weights: Array1::from_elem(k, 1.0 / k as f64),
            measurement: vec![FittedBlock {
                block: mm_block.clone(),
                params: ind,
            }],
            structural: vec![FittedBlock {
                block: sm_block.clone(),
                params: cov,
            }],
            fit_meta: Default::default(),
        };
        return Instance {
            spec: ModelSpec::new(
                k,
                ModelDescriptor::new(vec![mm_block]),
                ModelDescriptor::new(vec![sm_block]),
            ),
            truth,
            mm: Dataset::from_values(y).unwrap(),
            sm: Some(Dataset::from_values(z).unwrap()),
            classes,
        };
    }
    let d = match family {
        Family::Binary | Family::Categorical => 6,
        Family::GaussianFull => 2,
        _ => 3,
    };
    let block = block_for(family, d);
    let params = random_params(family, k, d, rng);
    let weights = dirichlet(k, rng)
        .into_iter()
        .map(|w| 0.15 / k as f64 + 0.85 * w)
        .collect::<Vec<_>>();
    let s: f64 = weights.iter().sum();
    let truth = MixtureModel {
        n_components: k,
        class_weights: Array1::from_iter(weights.iter().map(|w| w / s)),
        measurement: vec![FittedBlock {
            block: block.clone(),
            params,
        }],
        structural: Vec::new(),
        fit_meta: Default::default(),
    };
    let sample = sample_model(&truth, n, rng).unwrap();
    Instance {
        spec: ModelSpec::measurement_only(k, ModelDescriptor::new(vec![block])),
        truth,
        mm: sample.measurement.unwrap(),
        sm: None,
        classes: sample.classes,
    }
}
