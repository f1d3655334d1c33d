//! One-, two- and three-step estimators.
//!
//! Three-step estimation fits the measurement model alone, imputes class
//! weights for every unit (soft posteriors or modal one-hot rows), and fits
//! the structural model from those weights. BCH corrects the weights with the
//! inverse of the estimated misclassification matrix; ML instead treats the
//! predicted class as an extra indicator whose class-conditional pmf is that
//! matrix and runs a full EM on the structural model.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2};

use crate::data::{Dataset, ModelDescriptor};
use crate::em::{
    self, class_proportions, e_step, fit_em, EmConfig, FitMeta, FittedBlock, MixtureModel,
    ModelInput, ModelSpec, RunOptions,
};
use crate::emission;
use crate::error::{Error, Result};
use crate::math::{argmax, from_dmatrix, norm_1, to_dmatrix};

/// Largest condition number of D accepted by the BCH correction.
pub const MAX_BCH_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Assignment {
    Soft,
    #[default]
    Modal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Correction {
    #[default]
    None,
    Bch,
    Ml,
}

impl fmt::Display for Assignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Assignment::Soft => "soft",
            Assignment::Modal => "modal",
        })
    }
}

impl fmt::Display for Correction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Correction::None => "none",
            Correction::Bch => "bch",
            Correction::Ml => "ml",
        })
    }
}

impl FromStr for Assignment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "soft" => Ok(Assignment::Soft),
            "modal" => Ok(Assignment::Modal),
            _ => Err(Error::Validation(format!("unknown assignment '{s}'"))),
        }
    }
}

impl FromStr for Correction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Correction::None),
            "bch" => Ok(Correction::Bch),
            "ml" => Ok(Correction::Ml),
            _ => Err(Error::Validation(format!("unknown correction '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepwiseConfig {
    pub n_steps: usize,
    /// Only used when `n_steps == 3`.
    pub assignment: Assignment,
    /// Only used when `n_steps == 3`.
    pub correction: Correction,
    pub em: EmConfig,
}

impl Default for StepwiseConfig {
    fn default() -> Self {
        StepwiseConfig {
            n_steps: 1,
            assignment: Assignment::Modal,
            correction: Correction::None,
            em: EmConfig::default(),
        }
    }
}

impl StepwiseConfig {
    pub fn one_step(em: EmConfig) -> Self {
        StepwiseConfig {
            n_steps: 1,
            em,
            ..Default::default()
        }
    }

    pub fn two_step(em: EmConfig) -> Self {
        StepwiseConfig {
            n_steps: 2,
            em,
            ..Default::default()
        }
    }

    pub fn three_step(assignment: Assignment, correction: Correction, em: EmConfig) -> Self {
        StepwiseConfig {
            n_steps: 3,
            assignment,
            correction,
            em,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.n_steps) {
            return Err(Error::Validation(format!(
                "n_steps must be 1, 2 or 3 (got {})",
                self.n_steps
            )));
        }
        self.em.validate()
    }

    pub fn label(&self) -> String {
        match self.n_steps {
            3 => format!("3-step ({}, {})", self.assignment, self.correction),
            n => format!("{n}-step"),
        }
    }
}

/// Imputed class weights, one row per unit.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputedWeights {
    pub w: Array2<f64>,
    /// True once BCH-corrected; entries may then be negative.
    pub corrected: bool,
}

impl ImputedWeights {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_matrix_csv(writer, self.w.view())
    }
}

/// Estimated misclassification probabilities, `d[[c, k]] = p(W = k | X = c)`.
/// Rows sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix(pub Array2<f64>);

impl ConfusionMatrix {
    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_matrix_csv(writer, self.0.view())
    }
}

fn write_matrix_csv<W: Write>(writer: W, m: ArrayView2<'_, f64>) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record((0..m.ncols()).map(|k| format!("class_{k}")))?;
    for row in m.outer_iter() {
        wtr.write_record(row.iter().map(|v| format!("{v}")))?;
    }
    wtr.flush().map_err(|source| Error::Io {
        path: "<csv writer>".into(),
        source,
    })?;
    Ok(())
}

/// Soft posteriors or modal one-hot rows from the measurement model alone.
pub fn compute_assignments(
    mm: &MixtureModel,
    data_mm: &Dataset,
    assignment: Assignment,
) -> Result<ImputedWeights> {
    let (resp, _) = e_step(&mm.measurement_only(), &ModelInput::measurement(data_mm))?;
    let w = match assignment {
        Assignment::Soft => resp.into_inner(),
        Assignment::Modal => {
            let modal = resp.modal();
            emission::one_hot(&modal, mm.n_components)
        }
    };
    Ok(ImputedWeights {
        w,
        corrected: false,
    })
}

/// Empirical misclassification matrix over the units of `data_mm`.
pub fn compute_confusion(
    mm: &MixtureModel,
    data_mm: &Dataset,
    weights: &ImputedWeights,
) -> Result<ConfusionMatrix> {
    if weights.corrected {
        return Err(Error::Validation(
            "confusion matrix requires uncorrected weights".into(),
        ));
    }
    let (post, _) = e_step(&mm.measurement_only(), &ModelInput::measurement(data_mm))?;
    confusion_from_posteriors(post.view(), weights.w.view(), data_mm.weights())
}

/// `D[c, k] = sum_j u_j p(c | y_j) w_jk / sum_j u_j p(c | y_j)` with sample
/// weights `u`, rows renormalized.
pub fn confusion_from_posteriors(
    posterior: ArrayView2<'_, f64>,
    w: ArrayView2<'_, f64>,
    unit_weights: ndarray::ArrayView1<'_, f64>,
) -> Result<ConfusionMatrix> {
    let k = posterior.ncols();
    let mut d = Array2::<f64>::zeros((k, k));
    let mut marginal = Array1::<f64>::zeros(k);
    for ((p, wj), &u) in posterior.outer_iter().zip(w.outer_iter()).zip(unit_weights) {
        for c in 0..k {
            let pc = u * p[c];
            marginal[c] += pc;
            for kk in 0..k {
                d[[c, kk]] += pc * wj[kk];
            }
        }
    }
    for c in 0..k {
        if !(marginal[c] > 0.0) {
            return Err(Error::DegenerateClass {
                class: c,
                block: None,
            });
        }
        let mut row = d.row_mut(c);
        row /= marginal[c];
        let s = row.sum();
        row /= s;
    }
    Ok(ConfusionMatrix(d))
}

/// Right-multiplies every weight row by `D^-1`.
pub fn bch_adjust(weights: &ImputedWeights, d: &ConfusionMatrix) -> Result<ImputedWeights> {
    let dm: DMatrix<f64> = to_dmatrix(d.view());
    let inv = dm
        .clone()
        .try_inverse()
        .ok_or(Error::CorrectionInfeasible {
            condition: f64::INFINITY,
        })?;
    let condition = norm_1(&dm) * norm_1(&inv);
    if !(condition <= MAX_BCH_CONDITION) {
        return Err(Error::CorrectionInfeasible { condition });
    }
    let inv = from_dmatrix(&inv);
    Ok(ImputedWeights {
        w: weights.w.dot(&inv),
        corrected: true,
    })
}

/// Structural parameters estimated in the third step.
#[derive(Debug, Clone, PartialEq)]
pub struct ThirdStepFit {
    pub structural: Vec<FittedBlock>,
    /// Class proportions of the third-step model (ML) or of the imputed weights.
    pub class_weights: Array1<f64>,
    pub avg_log_likelihood: f64,
    pub n_iter: usize,
    pub converged: bool,
}

/// Fits the structural model from imputed class weights.
///
/// Without correction (or after BCH) the weights are the responsibilities
/// and one M-step gives the estimate. With ML, EM runs on the structural
/// model with responsibilities proportional to `(w D^T)_jk p(x = k, z_j)`,
/// starting from the uncorrected solution.
pub fn third_step(
    data_sm: &Dataset,
    weights: &ImputedWeights,
    d: Option<&ConfusionMatrix>,
    correction: Correction,
    sm_descriptor: &ModelDescriptor,
    em_config: &EmConfig,
) -> Result<ThirdStepFit> {
    let k = weights.w.ncols();
    if weights.w.nrows() != data_sm.n_units() {
        return Err(Error::Shape(format!(
            "{} weight rows for {} structural units",
            weights.w.nrows(),
            data_sm.n_units()
        )));
    }
    let input = ModelInput::structural(data_sm);
    let spec =
        ModelSpec::new(k, ModelDescriptor::default(), sm_descriptor.clone()).resolve(&input)?;
    let resp = normalized_rows(weights.w.view())?;
    let skeleton = MixtureModel {
        n_components: k,
        class_weights: Array1::from_elem(k, 1.0 / k as f64),
        measurement: Vec::new(),
        structural: spec
            .structural
            .blocks
            .iter()
            .map(|b| FittedBlock {
                block: b.clone(),
                params: placeholder(b, k),
            })
            .collect(),
        fit_meta: FitMeta::default(),
    };
    // Single M-step with responsibilities fixed to the weights.
    let mut start = em::m_step_full(&skeleton, &input, resp.view(), true)?;
    let proportions = class_proportions(resp.view(), data_sm.weights());
    match correction {
        Correction::None | Correction::Bch => {
            let ll = em::e_step(
                &MixtureModel {
                    class_weights: sanitize_proportions(&proportions),
                    ..start.clone()
                },
                &input,
            )
            .map(|(_, ll)| ll)
            .unwrap_or(f64::NAN);
            Ok(ThirdStepFit {
                structural: start.structural,
                class_weights: proportions,
                avg_log_likelihood: ll,
                n_iter: 1,
                converged: true,
            })
        }
        Correction::Ml => {
            let d = d.ok_or_else(|| {
                Error::Validation("ML correction requires a confusion matrix".into())
            })?;
            if weights.corrected {
                return Err(Error::Validation(
                    "ML correction expects uncorrected weights".into(),
                ));
            }
            let w_star = weights.w.dot(&d.0.t());
            let offset = w_star.mapv(f64::ln);
            start.class_weights = sanitize_proportions(&proportions);
            let (model, _) = em::run_em(
                start,
                &input,
                em_config,
                RunOptions {
                    freeze_measurement: false,
                    offset: Some(offset.view()),
                },
            )?;
            Ok(ThirdStepFit {
                class_weights: model.class_weights.clone(),
                avg_log_likelihood: model.fit_meta.avg_log_likelihood,
                n_iter: model.fit_meta.n_iter,
                converged: model.fit_meta.converged,
                structural: model.structural,
            })
        }
    }
}

fn sanitize_proportions(p: &Array1<f64>) -> Array1<f64> {
    let clipped = p.mapv(|v| v.max(1e-12));
    let s = clipped.sum();
    clipped / s
}

fn normalized_rows(w: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let mut out = w.to_owned();
    for (i, mut row) in out.outer_iter_mut().enumerate() {
        let s = row.sum();
        if !(s.abs() > 0.0) || !s.is_finite() {
            return Err(Error::Validation(format!(
                "imputed weights of unit {i} sum to {s}"
            )));
        }
        row /= s;
    }
    Ok(out)
}

/// Structurally valid parameters used only to carry block metadata into the
/// first M-step; never evaluated.
fn placeholder(block: &crate::data::Block, k: usize) -> emission::EmissionParams {
    use crate::data::Family;
    use emission::{Covariance, EmissionParams};
    let d = block.n_columns();
    match block.family {
        Family::Binary => EmissionParams::Binary {
            pi: Array2::from_elem((k, d), 0.5),
        },
        Family::Categorical => {
            let c = block.n_levels().unwrap_or(2);
            EmissionParams::Categorical {
                probs: ndarray::Array3::from_elem((k, d, c), 1.0 / c as f64),
            }
        }
        Family::GaussianUnit => EmissionParams::Gaussian {
            means: Array2::zeros((k, d)),
            covariance: Covariance::Unit,
        },
        Family::GaussianSpherical => EmissionParams::Gaussian {
            means: Array2::zeros((k, d)),
            covariance: Covariance::Spherical(Array1::ones(k)),
        },
        Family::GaussianDiag => EmissionParams::Gaussian {
            means: Array2::zeros((k, d)),
            covariance: Covariance::Diag(Array2::ones((k, d))),
        },
        Family::GaussianFull => EmissionParams::Gaussian {
            means: Array2::zeros((k, d)),
            covariance: Covariance::Full(ndarray::Array3::from_shape_fn((k, d, d), |(_, a, b)| {
                if a == b {
                    1.0
                } else {
                    0.0
                }
            })),
        },
        Family::Covariate => {
            EmissionParams::Covariate(crate::covariate::CovariateParams::zeros(k, d))
        }
    }
}

/// Joint EM on the complete model.
pub fn fit_one_step(
    spec: &ModelSpec,
    data_mm: &Dataset,
    data_sm: Option<&Dataset>,
    config: &StepwiseConfig,
) -> Result<MixtureModel> {
    let input = ModelInput::new(Some(data_mm), data_sm)?;
    let spec = drop_structural_without_data(spec, data_sm);
    let mut model = fit_em(&spec, &input, &config.em, None, false)?;
    model.fit_meta.method = "1-step".into();
    Ok(model)
}

fn drop_structural_without_data(spec: &ModelSpec, data_sm: Option<&Dataset>) -> ModelSpec {
    let mut spec = spec.clone();
    if data_sm.is_none() {
        spec.structural = ModelDescriptor::default();
    }
    spec
}

/// Step 1: EM on the measurement model alone.
pub fn fit_measurement(
    spec: &ModelSpec,
    data_mm: &Dataset,
    em_config: &EmConfig,
) -> Result<MixtureModel> {
    let mm_spec = ModelSpec::measurement_only(spec.n_components, spec.measurement.clone());
    fit_em(
        &mm_spec,
        &ModelInput::measurement(data_mm),
        em_config,
        None,
        false,
    )
}

/// Step 1 fits the measurement model on `data_mm_step1`; step 2 runs EM on
/// the complete model over (`data_mm`, `data_sm`) with the measurement
/// parameters held fixed.
pub fn fit_two_step(
    spec: &ModelSpec,
    data_mm_step1: &Dataset,
    data_mm: &Dataset,
    data_sm: &Dataset,
    config: &StepwiseConfig,
) -> Result<MixtureModel> {
    let step1 = fit_measurement(spec, data_mm_step1, &config.em)?;
    fit_two_step_from(&step1, spec, data_mm, data_sm, config)
}

/// Second step of [`fit_two_step`] given a fitted measurement model.
pub fn fit_two_step_from(
    step1: &MixtureModel,
    spec: &ModelSpec,
    data_mm: &Dataset,
    data_sm: &Dataset,
    config: &StepwiseConfig,
) -> Result<MixtureModel> {
    let input = ModelInput::new(Some(data_mm), Some(data_sm))?;
    let mut model = fit_em(spec, &input, &config.em, Some(step1), true)?;
    model.fit_meta.method = "2-step".into();
    model.fit_meta.n_iter += step1.fit_meta.n_iter;
    model.fit_meta.init_index = step1.fit_meta.init_index;
    Ok(model)
}

/// Intermediate products of a three-step fit.
#[derive(Debug, Clone)]
pub struct ThreeStepFit {
    pub model: MixtureModel,
    pub measurement_fit: MixtureModel,
    pub weights: ImputedWeights,
    pub confusion: Option<ConfusionMatrix>,
    pub third: ThirdStepFit,
}

/// Measurement fit on `data_mm_step1`, class weights and (for BCH/ML) the
/// confusion matrix on `data_mm`, and the structural fit on `data_sm`.
pub fn fit_three_step_detailed(
    spec: &ModelSpec,
    data_mm_step1: &Dataset,
    data_mm: &Dataset,
    data_sm: &Dataset,
    config: &StepwiseConfig,
) -> Result<ThreeStepFit> {
    let step1 = fit_measurement(spec, data_mm_step1, &config.em)?;
    fit_three_step_from(step1, spec, data_mm, data_sm, config)
}

/// Steps 2 and 3 of [`fit_three_step_detailed`] given a fitted measurement model.
pub fn fit_three_step_from(
    step1: MixtureModel,
    spec: &ModelSpec,
    data_mm: &Dataset,
    data_sm: &Dataset,
    config: &StepwiseConfig,
) -> Result<ThreeStepFit> {
    let input = ModelInput::new(Some(data_mm), Some(data_sm))?;
    let raw = compute_assignments(&step1, data_mm, config.assignment)?;
    let confusion = match config.correction {
        Correction::None => None,
        _ => Some(compute_confusion(&step1, data_mm, &raw)?),
    };
    let weights = match (config.correction, &confusion) {
        (Correction::Bch, Some(d)) => bch_adjust(&raw, d)?,
        _ => raw,
    };
    let third = third_step(
        data_sm,
        &weights,
        confusion.as_ref(),
        config.correction,
        &spec.structural,
        &config.em,
    )?;
    let mut model = MixtureModel {
        n_components: spec.n_components,
        class_weights: step1.class_weights.clone(),
        measurement: step1.measurement.clone(),
        structural: third.structural.clone(),
        fit_meta: FitMeta {
            method: config.label(),
            n_iter: step1.fit_meta.n_iter + third.n_iter,
            converged: step1.fit_meta.converged && third.converged,
            init_index: step1.fit_meta.init_index,
            seed: config.em.seed,
            avg_log_likelihood: f64::NAN,
        },
    };
    model.fit_meta.avg_log_likelihood = em::e_step(&model, &input).map(|(_, ll)| ll)?;
    Ok(ThreeStepFit {
        model,
        measurement_fit: step1,
        weights,
        confusion,
        third,
    })
}

pub fn fit_three_step(
    spec: &ModelSpec,
    data_mm_step1: &Dataset,
    data_mm: &Dataset,
    data_sm: &Dataset,
    config: &StepwiseConfig,
) -> Result<MixtureModel> {
    fit_three_step_detailed(spec, data_mm_step1, data_mm, data_sm, config).map(|f| f.model)
}

/// Dispatches on `config.n_steps` with a single sample for every step.
/// Two- and three-step estimation need structural data.
pub fn fit(
    spec: &ModelSpec,
    data_mm: &Dataset,
    data_sm: Option<&Dataset>,
    config: &StepwiseConfig,
) -> Result<MixtureModel> {
    config.validate()?;
    match (config.n_steps, data_sm) {
        (1, _) => fit_one_step(spec, data_mm, data_sm, config),
        (_, None) => {
            // Without structural data every estimator reduces to the measurement fit.
            let mut model = fit_one_step(spec, data_mm, None, config)?;
            model.fit_meta.method = config.label();
            Ok(model)
        }
        (2, Some(sm)) => fit_two_step(spec, data_mm, data_mm, sm, config),
        (_, Some(sm)) => fit_three_step(spec, data_mm, data_mm, sm, config),
    }
}

/// Index of the most probable class for each row.
pub fn modal_classes(w: ArrayView2<'_, f64>) -> Vec<usize> {
    w.outer_iter().map(|r| argmax(&r.to_vec())).collect()
}
