//! Synthetic latent class designs and replication studies.
//!
//! Every design has three classes and six binary indicators. The response
//! design adds a unit-variance Gaussian distal outcome, the covariate design
//! a discrete covariate driving class membership through a multinomial
//! logit, and the complete design both, with indicators and outcome masked
//! completely at random.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use ndarray::{array, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::bootstrap::align_classes;
use crate::data::{Block, Dataset, Family, ModelDescriptor};
use crate::em::{EmConfig, MixtureModel, ModelInput, ModelSpec};
use crate::emission::{one_hot, EmissionParams};
use crate::error::{Error, Result};
use crate::stepwise::{self, Assignment, Correction, StepwiseConfig};

pub const N_CLASSES: usize = 3;
pub const N_INDICATORS: usize = 6;
pub const CLASS_WEIGHTS: [f64; 3] = [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];
pub const OUTCOME_MEANS: [f64; 3] = [-1.0, 1.0, 0.0];
pub const COVARIATE_BETA: [f64; 3] = [0.0, -1.0, 1.0];
pub const COVARIATE_INTERCEPT: [f64; 3] = [0.0, 2.35, -3.66];
/// Number of covariate values, drawn uniformly from 1..=COVARIATE_LEVELS.
pub const COVARIATE_LEVELS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DesignKind {
    Response,
    Covariate,
    Complete,
}

impl fmt::Display for DesignKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DesignKind::Response => "response",
            DesignKind::Covariate => "covariate",
            DesignKind::Complete => "complete",
        })
    }
}

impl FromStr for DesignKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().trim_start_matches("bakk-") {
            "response" => Ok(DesignKind::Response),
            "covariate" => Ok(DesignKind::Covariate),
            "complete" => Ok(DesignKind::Complete),
            _ => Err(Error::Validation(format!("unknown design '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BakkDesign {
    pub kind: DesignKind,
    pub n: usize,
    /// Indicator separation: high indicators have probability `separation`, low ones `1 - separation`.
    pub separation: f64,
    /// Share of indicator and outcome cells masked (complete design only).
    pub missing_ratio: f64,
    pub seed: u64,
}

impl BakkDesign {
    pub fn new(kind: DesignKind, n: usize, separation: f64, seed: u64) -> Self {
        BakkDesign {
            kind,
            n,
            separation,
            missing_ratio: 0.0,
            seed,
        }
    }

    pub fn with_missing_ratio(mut self, ratio: f64) -> Self {
        self.missing_ratio = ratio;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Validation("design needs at least one unit".into()));
        }
        if !(self.separation > 0.0 && self.separation < 1.0) {
            return Err(Error::Validation(format!(
                "separation must lie in (0, 1) (got {})",
                self.separation
            )));
        }
        if !(0.0..1.0).contains(&self.missing_ratio) {
            return Err(Error::Validation(format!(
                "missing ratio must lie in [0, 1) (got {})",
                self.missing_ratio
            )));
        }
        if self.missing_ratio > 0.0 && self.kind != DesignKind::Complete {
            return Err(Error::Validation(
                "missing values are only generated by the complete design".into(),
            ));
        }
        Ok(())
    }

    /// Indicator probabilities, indicators × classes.
    pub fn indicator_probs(&self) -> Array2<f64> {
        let g = self.separation;
        let h = 1.0 - g;
        Array2::from_shape_fn((N_INDICATORS, N_CLASSES), |(d, c)| match (d < 3, c) {
            (true, 0) | (true, 1) => g,
            (true, _) => h,
            (false, 0) => g,
            (false, _) => h,
        })
    }

    /// Model specification matching the generating process.
    pub fn spec(&self) -> ModelSpec {
        let fiml = self.kind == DesignKind::Complete;
        let mm = ModelDescriptor::new(vec![Block::new(
            "indicators",
            Family::Binary,
            0..N_INDICATORS,
        )
        .fiml(fiml)]);
        let sm = match self.kind {
            DesignKind::Response => {
                ModelDescriptor::new(vec![Block::new("outcome", Family::GaussianUnit, 0..1)])
            }
            DesignKind::Covariate => {
                ModelDescriptor::new(vec![Block::new("covariate", Family::Covariate, 0..1)])
            }
            DesignKind::Complete => ModelDescriptor::new(vec![
                Block::new("covariate", Family::Covariate, 0..1),
                Block::new("outcome", Family::GaussianUnit, 1..2).fiml(true),
            ]),
        };
        ModelSpec::new(N_CLASSES, mm, sm)
    }

    /// True value of the tracked parameter.
    pub fn tracked_truth(&self) -> f64 {
        match self.kind {
            DesignKind::Covariate => COVARIATE_BETA[2] - COVARIATE_BETA[0],
            _ => OUTCOME_MEANS[1],
        }
    }

    /// Tracked parameter of a fitted model whose classes follow the
    /// generating labels: the outcome mean of class 1, or the covariate slope
    /// of class 2 relative to class 0.
    pub fn tracked_parameter(&self, model: &MixtureModel) -> Result<f64> {
        match self.kind {
            DesignKind::Covariate => match model.block("covariate").map(|b| &b.params) {
                Some(EmissionParams::Covariate(p)) => Ok(p.rebased(0).beta[[2, 0]]),
                _ => Err(Error::Validation("model has no covariate block".into())),
            },
            _ => match model.block("outcome").map(|b| &b.params) {
                Some(EmissionParams::Gaussian { means, .. }) => Ok(means[[1, 0]]),
                _ => Err(Error::Validation("model has no outcome block".into())),
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub measurement: Dataset,
    pub structural: Dataset,
    pub classes: Vec<usize>,
}

fn covariate_prior(z: f64) -> [f64; 3] {
    let logits: Vec<f64> = (0..N_CLASSES)
        .map(|k| COVARIATE_BETA[k] * z + COVARIATE_INTERCEPT[k])
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    [e[0] / s, e[1] / s, e[2] / s]
}

fn draw_class(u: f64, probs: &[f64]) -> usize {
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}

/// Draws a dataset. Each unit consumes the same random numbers in the same
/// order whatever the separation or missing ratio, so designs differing only
/// in those settings share their randomness and missing cells are nested in
/// the missing ratio.
pub fn generate(design: &BakkDesign) -> Result<SimulatedData> {
    design.validate()?;
    let n = design.n;
    let pi = design.indicator_probs();
    let mut rng = ChaCha8Rng::seed_from_u64(design.seed);
    let mut y = Array2::<f64>::zeros((n, N_INDICATORS));
    let mut outcome = Array1::<f64>::zeros(n);
    let mut zp = Array1::<f64>::zeros(n);
    let mut y_mask = Array2::from_elem((n, N_INDICATORS), true);
    let mut outcome_mask = Array1::from_elem(n, true);
    let mut classes = Vec::with_capacity(n);
    for i in 0..n {
        let u_z: f64 = rng.random();
        let u_x: f64 = rng.random();
        let u_y: [f64; N_INDICATORS] = std::array::from_fn(|_| rng.random());
        let e: f64 = rng.sample(StandardNormal);
        let u_miss: [f64; N_INDICATORS + 1] = std::array::from_fn(|_| rng.random());

        let z = 1.0 + ((u_z * COVARIATE_LEVELS as f64).floor()).min(COVARIATE_LEVELS as f64 - 1.0);
        let x = match design.kind {
            DesignKind::Response => draw_class(u_x, &CLASS_WEIGHTS),
            _ => draw_class(u_x, &covariate_prior(z)),
        };
        classes.push(x);
        zp[i] = z;
        outcome[i] = OUTCOME_MEANS[x] + e;
        for d in 0..N_INDICATORS {
            y[[i, d]] = if u_y[d] < pi[[d, x]] { 1.0 } else { 0.0 };
            y_mask[[i, d]] = !(u_miss[d] < design.missing_ratio);
        }
        outcome_mask[i] = !(u_miss[N_INDICATORS] < design.missing_ratio);
    }
    let names = (1..=N_INDICATORS).map(|d| format!("y{d}")).collect();
    let measurement = Dataset::new(y, names)?.with_mask(&y_mask)?;
    let structural = match design.kind {
        DesignKind::Response => {
            Dataset::new(outcome.insert_axis(ndarray::Axis(1)), vec!["z".into()])?
        }
        DesignKind::Covariate => Dataset::new(zp.insert_axis(ndarray::Axis(1)), vec!["zp".into()])?,
        DesignKind::Complete => {
            let mut values = Array2::zeros((n, 2));
            values.column_mut(0).assign(&zp);
            values.column_mut(1).assign(&outcome);
            let mut mask = Array2::from_elem((n, 2), true);
            mask.column_mut(1).assign(&outcome_mask);
            Dataset::new(values, vec!["zp".into(), "z".into()])?.with_mask(&mask)?
        }
    };
    Ok(SimulatedData {
        measurement,
        structural,
        classes,
    })
}

/// Estimators compared in the studies; three-step variants use modal assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Estimator {
    OneStep,
    TwoStep,
    ThreeStepNaive,
    ThreeStepBch,
    ThreeStepMl,
}

impl Estimator {
    pub const ALL: [Estimator; 5] = [
        Estimator::OneStep,
        Estimator::TwoStep,
        Estimator::ThreeStepNaive,
        Estimator::ThreeStepBch,
        Estimator::ThreeStepMl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::OneStep => "1-step",
            Estimator::TwoStep => "2-step",
            Estimator::ThreeStepNaive => "3-naive",
            Estimator::ThreeStepBch => "3-bch",
            Estimator::ThreeStepMl => "3-ml",
        }
    }

    pub fn config(self, em: EmConfig) -> StepwiseConfig {
        match self {
            Estimator::OneStep => StepwiseConfig::one_step(em),
            Estimator::TwoStep => StepwiseConfig::two_step(em),
            Estimator::ThreeStepNaive => {
                StepwiseConfig::three_step(Assignment::Modal, Correction::None, em)
            }
            Estimator::ThreeStepBch => {
                StepwiseConfig::three_step(Assignment::Modal, Correction::Bch, em)
            }
            Estimator::ThreeStepMl => {
                StepwiseConfig::three_step(Assignment::Modal, Correction::Ml, em)
            }
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Estimator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('_', "-");
        Estimator::ALL
            .into_iter()
            .find(|e| e.name() == key)
            .ok_or_else(|| Error::Validation(format!("unknown estimator '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub kind: DesignKind,
    pub sample_sizes: Vec<usize>,
    pub separations: Vec<f64>,
    /// Missing ratios (complete design); ignored by the other designs.
    pub missing_ratios: Vec<f64>,
    pub replications: usize,
    pub estimators: Vec<Estimator>,
    pub base_seed: u64,
    pub em: EmConfig,
}

impl StudyConfig {
    pub fn new(kind: DesignKind) -> Self {
        StudyConfig {
            kind,
            sample_sizes: vec![500, 1000, 2000],
            separations: vec![0.7, 0.8, 0.9],
            missing_ratios: vec![0.0],
            replications: 100,
            estimators: Estimator::ALL.to_vec(),
            base_seed: 0,
            em: EmConfig::default(),
        }
    }

    fn designs(&self) -> Vec<BakkDesign> {
        let ratios = if self.kind == DesignKind::Complete {
            self.missing_ratios.clone()
        } else {
            vec![0.0]
        };
        let mut out = Vec::new();
        for &sep in &self.separations {
            for &ratio in &ratios {
                for &n in &self.sample_sizes {
                    out.push(BakkDesign::new(self.kind, n, sep, 0).with_missing_ratio(ratio));
                }
            }
        }
        out
    }
}

/// Seed of replication `r` at sample size `n`, shared by every separation,
/// missing ratio and estimator.
pub fn replication_seed(base_seed: u64, n: usize, r: usize) -> u64 {
    let mut x = base_seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((n as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add((r as u64).wrapping_mul(0x94D0_49BB_1331_11EB));
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Aggregate over replications for one design and estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyCell {
    pub n: usize,
    pub separation: f64,
    pub missing_ratio: f64,
    pub estimator: Estimator,
    pub bias: f64,
    pub rmse: f64,
    pub n_ok: usize,
    pub n_failed: usize,
    /// Tracked-parameter estimates of the successful replications, in order.
    pub estimates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyResult {
    pub kind: DesignKind,
    pub truth: f64,
    pub estimators: Vec<Estimator>,
    pub cells: Vec<StudyCell>,
}

impl StudyResult {
    pub fn cell(
        &self,
        n: usize,
        separation: f64,
        missing_ratio: f64,
        estimator: Estimator,
    ) -> Option<&StudyCell> {
        self.cells.iter().find(|c| {
            c.n == n
                && c.separation == separation
                && c.missing_ratio == missing_ratio
                && c.estimator == estimator
        })
    }

    /// One row per design (separation, missing ratio, n), one bias and one
    /// RMSE column per estimator.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["separation".to_string(), "missing_ratio".into(), "n".into()];
        for e in &self.estimators {
            header.push(format!("{e}_bias"));
            header.push(format!("{e}_rmse"));
            header.push(format!("{e}_failed"));
        }
        wtr.write_record(&header)?;
        let mut seen: Vec<(f64, f64, usize)> = Vec::new();
        for c in &self.cells {
            let key = (c.separation, c.missing_ratio, c.n);
            if seen.contains(&key) {
                continue;
            }
            seen.push(key);
            let mut row = vec![
                c.separation.to_string(),
                c.missing_ratio.to_string(),
                c.n.to_string(),
            ];
            for &e in &self.estimators {
                match self.cell(c.n, c.separation, c.missing_ratio, e) {
                    Some(cell) => {
                        row.push(format!("{}", cell.bias));
                        row.push(format!("{}", cell.rmse));
                        row.push(cell.n_failed.to_string());
                    }
                    None => row.extend(["".into(), "".into(), "".into()]),
                }
            }
            wtr.write_record(&row)?;
        }
        wtr.flush().map_err(|source| Error::Io {
            path: "<csv writer>".into(),
            source,
        })?;
        Ok(())
    }
}

/// Tracked-parameter estimate of every estimator on one dataset, classes
/// aligned to the generating labels. The measurement fit is shared by the
/// stepwise estimators.
pub fn estimate_replication(
    design: &BakkDesign,
    data: &SimulatedData,
    estimators: &[Estimator],
    em: &EmConfig,
) -> Vec<Result<f64>> {
    let spec = design.spec();
    let input = match ModelInput::new(Some(&data.measurement), Some(&data.structural)) {
        Ok(i) => i,
        Err(e) => return estimators.iter().map(|_| Err(copy_error(&e))).collect(),
    };
    let truth = one_hot(&data.classes, N_CLASSES);
    let needs_step1 = estimators.iter().any(|e| *e != Estimator::OneStep);
    let step1 = if needs_step1 {
        Some(stepwise::fit_measurement(&spec, &data.measurement, em))
    } else {
        None
    };
    estimators
        .iter()
        .map(|&est| {
            let config = est.config(em.clone());
            let model = match est {
                Estimator::OneStep => stepwise::fit_one_step(
                    &spec,
                    &data.measurement,
                    Some(&data.structural),
                    &config,
                )?,
                Estimator::TwoStep => {
                    let s1 = step1_ref(&step1)?;
                    stepwise::fit_two_step_from(
                        s1,
                        &spec,
                        &data.measurement,
                        &data.structural,
                        &config,
                    )?
                }
                _ => {
                    let s1 = step1_ref(&step1)?.clone();
                    stepwise::fit_three_step_from(
                        s1,
                        &spec,
                        &data.measurement,
                        &data.structural,
                        &config,
                    )?
                    .model
                }
            };
            let sigma = align_classes(truth.view(), &model, &input)?;
            design.tracked_parameter(&model.permute_classes(&sigma))
        })
        .collect()
}

fn copy_error(e: &Error) -> Error {
    Error::Validation(e.to_string())
}

fn step1_ref(step1: &Option<Result<MixtureModel>>) -> Result<&MixtureModel> {
    match step1 {
        Some(Ok(m)) => Ok(m),
        Some(Err(e)) => Err(copy_error(e)),
        None => Err(Error::Validation("measurement fit unavailable".into())),
    }
}

/// Runs every design of `config` for `config.replications` datasets.
/// Datasets depend only on (base seed, n, replication), so all estimators,
/// separations and missing ratios see common random numbers.
/// Mean error and root mean squared error of `estimates` around `truth`;
/// NaN for no estimates.
pub fn bias_rmse(estimates: &[f64], truth: f64) -> (f64, f64) {
    if estimates.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = estimates.len() as f64;
    let bias = estimates.iter().map(|v| v - truth).sum::<f64>() / m;
    let mse = estimates.iter().map(|v| (v - truth).powi(2)).sum::<f64>() / m;
    (bias, mse.sqrt())
}

pub fn run_study(config: &StudyConfig) -> Result<StudyResult> {
    if config.replications == 0 {
        return Err(Error::Validation(
            "a study needs at least one replication".into(),
        ));
    }
    if config.estimators.is_empty() {
        return Err(Error::Validation(
            "a study needs at least one estimator".into(),
        ));
    }
    config.em.validate()?;
    let designs = config.designs();
    for d in &designs {
        d.validate()?;
    }
    let jobs: Vec<(usize, usize)> = (0..designs.len())
        .flat_map(|d| (0..config.replications).map(move |r| (d, r)))
        .collect();
    let outcomes: Vec<Vec<Result<f64>>> = jobs
        .par_iter()
        .map(|&(d, r)| {
            let seed = replication_seed(config.base_seed, designs[d].n, r);
            let design = BakkDesign { seed, ..designs[d] };
            match generate(&design) {
                Ok(data) => {
                    let mut em = config.em.clone();
                    em.seed = seed;
                    estimate_replication(&design, &data, &config.estimators, &em)
                }
                Err(e) => config
                    .estimators
                    .iter()
                    .map(|_| Err(copy_error(&e)))
                    .collect(),
            }
        })
        .collect();

    let truth = BakkDesign::new(config.kind, 1, 0.5, 0).tracked_truth();
    let mut cells = Vec::new();
    for (d, design) in designs.iter().enumerate() {
        for (e, &est) in config.estimators.iter().enumerate() {
            let mut estimates = Vec::new();
            let mut n_failed = 0;
            for r in 0..config.replications {
                match &outcomes[d * config.replications + r][e] {
                    Ok(v) if v.is_finite() => estimates.push(*v),
                    _ => n_failed += 1,
                }
            }
            let (bias, rmse) = bias_rmse(&estimates, truth);
            cells.push(StudyCell {
                n: design.n,
                separation: design.separation,
                missing_ratio: design.missing_ratio,
                estimator: est,
                bias,
                rmse,
                n_ok: estimates.len(),
                n_failed,
                estimates,
            });
        }
    }
    Ok(StudyResult {
        kind: config.kind,
        truth,
        estimators: config.estimators.clone(),
        cells,
    })
}

/// Generating model of the response design.
pub fn response_truth_model(separation: f64) -> MixtureModel {
    let design = BakkDesign::new(DesignKind::Response, 1, separation, 0);
    let spec = design.spec();
    let pi = design.indicator_probs().t().to_owned();
    MixtureModel {
        n_components: N_CLASSES,
        class_weights: Array1::from(CLASS_WEIGHTS.to_vec()),
        measurement: vec![crate::em::FittedBlock {
            block: spec.measurement.blocks[0].clone(),
            params: EmissionParams::Binary { pi },
        }],
        structural: vec![crate::em::FittedBlock {
            block: spec.structural.blocks[0].clone(),
            params: EmissionParams::Gaussian {
                means: array![[OUTCOME_MEANS[0]], [OUTCOME_MEANS[1]], [OUTCOME_MEANS[2]]],
                covariance: crate::emission::Covariance::Unit,
            },
        }],
        fit_meta: Default::default(),
    }
}
