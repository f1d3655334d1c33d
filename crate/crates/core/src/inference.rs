//! Predictions, scores, information criteria, sampling and class-difference tests.

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::data::Dataset;
use crate::em::{class_proportions, e_step, MixtureModel, ModelInput, Responsibilities};
use crate::error::{Error, Result};
use crate::math::two_sided_p;

/// Fit statistics of a model evaluated on a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct FitReportStats {
    pub total_log_likelihood: f64,
    pub avg_log_likelihood: f64,
    pub n_parameters: usize,
    pub aic: f64,
    pub bic: f64,
    /// Total sample weight.
    pub n: f64,
    pub n_components: usize,
    pub class_sizes: Array1<f64>,
}

pub fn predict_proba(model: &MixtureModel, input: &ModelInput<'_>) -> Result<Responsibilities> {
    e_step(model, input).map(|(r, _)| r)
}

pub fn predict(model: &MixtureModel, input: &ModelInput<'_>) -> Result<Vec<usize>> {
    Ok(predict_proba(model, input)?.modal())
}

/// Weighted average log-likelihood.
pub fn score(model: &MixtureModel, input: &ModelInput<'_>) -> Result<f64> {
    e_step(model, input).map(|(_, ll)| ll)
}

/// Free parameters: every block plus K-1 class weights unless a covariate
/// block supplies the prior.
pub fn n_parameters(model: &MixtureModel) -> usize {
    let blocks: usize = model
        .measurement
        .iter()
        .chain(&model.structural)
        .map(|b| b.params.n_parameters())
        .sum();
    if model.has_covariate() {
        blocks
    } else {
        blocks + model.n_components - 1
    }
}

pub fn aic(log_likelihood: f64, n_parameters: usize) -> f64 {
    -2.0 * log_likelihood + 2.0 * n_parameters as f64
}

pub fn bic(log_likelihood: f64, n_parameters: usize, n: f64) -> f64 {
    -2.0 * log_likelihood + n.ln() * n_parameters as f64
}

pub fn information_criteria(
    model: &MixtureModel,
    input: &ModelInput<'_>,
) -> Result<FitReportStats> {
    let (resp, avg) = e_step(model, input)?;
    let weights = input.weights();
    let n = weights.sum();
    let total = avg * n;
    let p = n_parameters(model);
    Ok(FitReportStats {
        total_log_likelihood: total,
        avg_log_likelihood: avg,
        n_parameters: p,
        aic: aic(total, p),
        bic: bic(total, p, n),
        n,
        n_components: model.n_components,
        class_sizes: class_proportions(resp.view(), weights),
    })
}

/// Draws from the generative model.
#[derive(Debug, Clone)]
pub struct Sample {
    pub classes: Vec<usize>,
    pub measurement: Option<Dataset>,
    pub structural: Option<Dataset>,
}

/// Samples `n` units: a class from the class weights, then every block
/// given that class. Models with a covariate block have no marginal over
/// the latent class and cannot be sampled.
pub fn sample_model<R: Rng + ?Sized>(
    model: &MixtureModel,
    n: usize,
    rng: &mut R,
) -> Result<Sample> {
    if model.has_covariate() {
        return Err(Error::Unsupported(
            "sampling requires an explicit marginal over the latent class; a covariate block only \
             specifies p(x | z), so the model cannot generate units"
                .into(),
        ));
    }
    let cum: Vec<f64> = model
        .class_weights
        .iter()
        .scan(0.0, |acc, &w| {
            *acc += w;
            Some(*acc)
        })
        .collect();
    let classes: Vec<usize> = (0..n)
        .map(|_| {
            let u: f64 = rng.random::<f64>() * cum[cum.len() - 1];
            cum.iter().position(|&c| u < c).unwrap_or(cum.len() - 1)
        })
        .collect();
    let mut measurement = None;
    let mut structural = None;
    for (blocks, target) in [
        (&model.measurement, &mut measurement),
        (&model.structural, &mut structural),
    ] {
        if blocks.is_empty() {
            continue;
        }
        let width = blocks
            .iter()
            .map(|b| b.block.columns.end)
            .max()
            .unwrap_or(0);
        let mut values = Array2::<f64>::from_elem((n, width), f64::NAN);
        let mut names: Vec<String> = (0..width).map(|j| format!("v{j}")).collect();
        for fb in blocks {
            for (j, col) in fb.block.columns.clone().enumerate() {
                names[col] = format!("{}_{}", fb.block.name, j);
            }
        }
        for (i, &c) in classes.iter().enumerate() {
            for fb in blocks {
                let draw = fb.params.sample(c, rng)?;
                for (v, col) in draw.into_iter().zip(fb.block.columns.clone()) {
                    values[[i, col]] = v;
                }
            }
        }
        *target = Some(Dataset::new(values, names)?);
    }
    Ok(Sample {
        classes,
        measurement,
        structural,
    })
}

/// Bootstrap test of the difference between two classes' values of one parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassDifference {
    pub estimate: f64,
    pub std_error: f64,
    pub z: f64,
    pub p_value: f64,
}

/// `reference[r]` and `target[r]` are the parameter's values for the two
/// classes in bootstrap repetition `r`. The estimate is the mean of
/// `target - reference`.
pub fn class_difference_test(reference: &[f64], target: &[f64]) -> Result<ClassDifference> {
    if reference.len() != target.len() {
        return Err(Error::Shape(format!(
            "{} reference samples and {} target samples",
            reference.len(),
            target.len()
        )));
    }
    if reference.len() < 2 {
        return Err(Error::Validation(
            "at least two bootstrap samples are required".into(),
        ));
    }
    let diffs: Vec<f64> = target.iter().zip(reference).map(|(t, r)| t - r).collect();
    let (estimate, std_error) = mean_std(&diffs);
    let z = if std_error > 0.0 {
        estimate / std_error
    } else if estimate == 0.0 {
        0.0
    } else {
        estimate.signum() * f64::INFINITY
    };
    Ok(ClassDifference {
        estimate,
        std_error,
        z,
        p_value: two_sided_p(z),
    })
}

/// Mean and standard deviation with the n-1 denominator.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
