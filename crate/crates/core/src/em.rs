//! EM over an assembled mixture: class prior, measurement blocks and
//! structural blocks, with multi-start initialization.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{validate_descriptor, Block, Dataset, Family, ModelDescriptor, Role};
use crate::emission::{self, EmissionParams};
use crate::error::{Error, Result};
use crate::math::softmax_in_place;

/// Fitted parameters of one descriptor block.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedBlock {
    pub block: Block,
    pub params: EmissionParams,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FitMeta {
    /// Weighted average log-likelihood of the returned parameters.
    pub avg_log_likelihood: f64,
    pub n_iter: usize,
    pub converged: bool,
    pub init_index: usize,
    pub seed: u64,
    /// Estimation procedure, e.g. "1-step" or "3-step (modal, bch)".
    pub method: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureModel {
    pub n_components: usize,
    /// Marginal class probabilities; ignored when a covariate block supplies the prior.
    pub class_weights: Array1<f64>,
    pub measurement: Vec<FittedBlock>,
    pub structural: Vec<FittedBlock>,
    pub fit_meta: FitMeta,
}

impl MixtureModel {
    pub fn covariate(&self) -> Option<&FittedBlock> {
        self.structural
            .iter()
            .find(|b| b.block.family == Family::Covariate)
    }

    pub fn has_covariate(&self) -> bool {
        self.covariate().is_some()
    }

    pub fn measurement_descriptor(&self) -> ModelDescriptor {
        ModelDescriptor::new(self.measurement.iter().map(|b| b.block.clone()).collect())
    }

    pub fn structural_descriptor(&self) -> ModelDescriptor {
        ModelDescriptor::new(self.structural.iter().map(|b| b.block.clone()).collect())
    }

    pub fn block(&self, name: &str) -> Option<&FittedBlock> {
        self.measurement
            .iter()
            .chain(&self.structural)
            .find(|b| b.block.name == name)
    }

    /// Relabels classes so that new class `k` is old class `perm[k]`.
    pub fn permute_classes(&self, perm: &[usize]) -> MixtureModel {
        let relabel = |blocks: &[FittedBlock]| {
            blocks
                .iter()
                .map(|b| FittedBlock {
                    block: b.block.clone(),
                    params: b.params.permute_classes(perm),
                })
                .collect()
        };
        MixtureModel {
            n_components: self.n_components,
            class_weights: self.class_weights.select(Axis(0), perm),
            measurement: relabel(&self.measurement),
            structural: relabel(&self.structural),
            fit_meta: self.fit_meta.clone(),
        }
    }

    /// Same model with only the measurement side (class weights and blocks).
    pub fn measurement_only(&self) -> MixtureModel {
        MixtureModel {
            structural: Vec::new(),
            ..self.clone()
        }
    }

    /// Checks the type invariants of a model.
    pub fn validate(&self) -> Result<()> {
        let k = self.n_components;
        if k == 0 {
            return Err(Error::Validation("model has zero components".into()));
        }
        if self.class_weights.len() != k {
            return Err(Error::Validation(format!(
                "{} class weights for {k} components",
                self.class_weights.len()
            )));
        }
        if self.class_weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Validation(
                "class weights must be nonnegative".into(),
            ));
        }
        let sum = self.class_weights.sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Validation(format!(
                "class weights sum to {sum}, expected 1"
            )));
        }
        for fb in self.measurement.iter().chain(&self.structural) {
            if fb.params.n_classes() != k {
                return Err(Error::Validation(format!(
                    "block '{}' has {} classes, model has {k}",
                    fb.block.name,
                    fb.params.n_classes()
                )));
            }
            if fb.params.family() != fb.block.family {
                return Err(Error::Validation(format!(
                    "block '{}' family mismatch",
                    fb.block.name
                )));
            }
            if fb.params.n_features() != fb.block.n_columns() {
                return Err(Error::Validation(format!(
                    "block '{}' column count mismatch",
                    fb.block.name
                )));
            }
        }
        if self
            .measurement
            .iter()
            .any(|b| b.block.family == Family::Covariate)
        {
            return Err(Error::Validation(
                "covariate block in measurement model".into(),
            ));
        }
        Ok(())
    }
}

/// Posterior class-membership probabilities, one row per unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities(Array2<f64>);

impl Responsibilities {
    pub fn new(tau: Array2<f64>) -> Result<Self> {
        for (i, row) in tau.outer_iter().enumerate() {
            let s = row.sum();
            if (s - 1.0).abs() > 1e-10 {
                return Err(Error::Validation(format!(
                    "responsibility row {i} sums to {s}"
                )));
            }
        }
        Ok(Responsibilities(tau))
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn n_units(&self) -> usize {
        self.0.nrows()
    }

    pub fn n_components(&self) -> usize {
        self.0.ncols()
    }

    /// Most probable class of every unit, ties toward the lowest index.
    pub fn modal(&self) -> Vec<usize> {
        self.0
            .outer_iter()
            .map(|r| crate::math::argmax(r.as_slice().expect("row-major")))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    pub max_iter: usize,
    pub abs_tol: f64,
    pub rel_tol: Option<f64>,
    pub n_init: usize,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iter: 1000,
            abs_tol: 1e-10,
            rel_tol: None,
            n_init: 1,
            seed: 0,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::Validation("max_iter must be at least 1".into()));
        }
        if self.n_init == 0 {
            return Err(Error::Validation("n_init must be at least 1".into()));
        }
        if !(self.abs_tol >= 0.0) || self.rel_tol.is_some_and(|t| !(t >= 0.0)) {
            return Err(Error::Validation("tolerances must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Which datasets feed the measurement and structural blocks. Both must
/// describe the same units in the same order and carry the same weights.
#[derive(Debug, Clone, Copy)]
pub struct ModelInput<'a> {
    pub measurement: Option<&'a Dataset>,
    pub structural: Option<&'a Dataset>,
}

impl<'a> ModelInput<'a> {
    pub fn new(measurement: Option<&'a Dataset>, structural: Option<&'a Dataset>) -> Result<Self> {
        if let (Some(mm), Some(sm)) = (measurement, structural) {
            if mm.n_units() != sm.n_units() {
                return Err(Error::Shape(format!(
                    "measurement data has {} units but structural data has {}",
                    mm.n_units(),
                    sm.n_units()
                )));
            }
            if mm.weights() != sm.weights() {
                return Err(Error::Validation(
                    "measurement and structural data carry different sample weights".into(),
                ));
            }
        }
        if measurement.is_none() && structural.is_none() {
            return Err(Error::Validation("no data supplied".into()));
        }
        Ok(ModelInput {
            measurement,
            structural,
        })
    }

    pub fn measurement(mm: &'a Dataset) -> Self {
        ModelInput {
            measurement: Some(mm),
            structural: None,
        }
    }

    pub fn structural(sm: &'a Dataset) -> Self {
        ModelInput {
            measurement: None,
            structural: Some(sm),
        }
    }

    pub fn n_units(&self) -> usize {
        self.measurement
            .or(self.structural)
            .map(Dataset::n_units)
            .unwrap_or(0)
    }

    pub fn weights(&self) -> ndarray::ArrayView1<'a, f64> {
        self.measurement
            .or(self.structural)
            .expect("at least one dataset")
            .weights()
    }

    fn measurement_data(&self) -> Result<&'a Dataset> {
        self.measurement.ok_or_else(|| {
            Error::Validation("model has measurement blocks but no measurement data".into())
        })
    }

    fn structural_data(&self) -> Result<&'a Dataset> {
        self.structural.ok_or_else(|| {
            Error::Validation("model has structural blocks but no structural data".into())
        })
    }
}

/// The blocks a model is built from.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub n_components: usize,
    pub measurement: ModelDescriptor,
    pub structural: ModelDescriptor,
}

impl ModelSpec {
    pub fn new(
        n_components: usize,
        measurement: ModelDescriptor,
        structural: ModelDescriptor,
    ) -> Self {
        ModelSpec {
            n_components,
            measurement,
            structural,
        }
    }

    pub fn measurement_only(n_components: usize, measurement: ModelDescriptor) -> Self {
        Self::new(n_components, measurement, ModelDescriptor::default())
    }

    /// Validates descriptors against the data and fixes the level count of
    /// categorical blocks that do not set one.
    pub fn resolve(&self, input: &ModelInput<'_>) -> Result<ModelSpec> {
        if self.n_components == 0 {
            return Err(Error::Validation("n_components must be at least 1".into()));
        }
        let mut out = self.clone();
        if !out.measurement.blocks.is_empty() {
            let mm = input.measurement_data()?;
            validate_descriptor(&out.measurement, mm, Role::Measurement)?;
            fix_levels(&mut out.measurement, mm);
        }
        if !out.structural.blocks.is_empty() {
            let sm = input.structural_data()?;
            validate_descriptor(&out.structural, sm, Role::Structural)?;
            fix_levels(&mut out.structural, sm);
        }
        Ok(out)
    }

    pub fn has_covariate(&self) -> bool {
        self.structural.covariate_block().is_some()
    }
}

fn fix_levels(desc: &mut ModelDescriptor, data: &Dataset) {
    for block in &mut desc.blocks {
        if block.family == Family::Categorical && block.n_levels().is_none() {
            let c = emission::resolve_levels(block, data);
            block.options.insert("n_levels".into(), c.into());
        }
    }
}

/// N×K log p(x = k, observed blocks | covariates) plus `offset` when given.
pub fn log_joint(
    model: &MixtureModel,
    input: &ModelInput<'_>,
    offset: Option<ArrayView2<'_, f64>>,
) -> Result<Array2<f64>> {
    let n = input.n_units();
    let k = model.n_components;
    let mut out = Array2::zeros((n, k));
    if !model.has_covariate() {
        let log_w = model.class_weights.mapv(f64::ln);
        out += &log_w;
    }
    if !model.measurement.is_empty() {
        let mm = input.measurement_data()?;
        for fb in &model.measurement {
            fb.params.add_log_prob(&fb.block, mm, &mut out)?;
        }
    }
    if !model.structural.is_empty() {
        let sm = input.structural_data()?;
        for fb in &model.structural {
            fb.params.add_log_prob(&fb.block, sm, &mut out)?;
        }
    }
    if let Some(off) = offset {
        out += &off;
    }
    Ok(out)
}

/// Converts log-joint rows into responsibilities in place and returns the
/// weighted average log-likelihood.
fn normalize(log_joint: &mut Array2<f64>, weights: ndarray::ArrayView1<'_, f64>) -> Result<f64> {
    let mut total = 0.0;
    for (i, mut row) in log_joint.outer_iter_mut().enumerate() {
        let lse = softmax_in_place(row.as_slice_mut().expect("row-major"));
        if !lse.is_finite() {
            return Err(Error::LikelihoodUnderflow { unit: i });
        }
        if weights[i] != 0.0 {
            total += weights[i] * lse;
        }
    }
    Ok(total / weights.sum())
}

/// Responsibilities and weighted average log-likelihood under `model`.
pub fn e_step(model: &MixtureModel, input: &ModelInput<'_>) -> Result<(Responsibilities, f64)> {
    e_step_with_offset(model, input, None)
}

pub(crate) fn e_step_with_offset(
    model: &MixtureModel,
    input: &ModelInput<'_>,
    offset: Option<ArrayView2<'_, f64>>,
) -> Result<(Responsibilities, f64)> {
    let mut lj = log_joint(model, input, offset)?;
    let ll = normalize(&mut lj, input.weights())?;
    Ok((Responsibilities(lj), ll))
}

fn fit_blocks(
    blocks: &[Block],
    warm: Option<&[FittedBlock]>,
    data: &Dataset,
    resp: ArrayView2<'_, f64>,
) -> Result<Vec<FittedBlock>> {
    blocks
        .iter()
        .enumerate()
        .map(|(b, block)| {
            let warm = warm.and_then(|w| w.get(b)).map(|fb| &fb.params);
            Ok(FittedBlock {
                block: block.clone(),
                params: emission::m_step(block, data, resp, warm)?,
            })
        })
        .collect()
}

/// Weighted class proportions `sum_i w_i tau_ik / sum_i w_i`.
pub fn class_proportions(
    resp: ArrayView2<'_, f64>,
    weights: ndarray::ArrayView1<'_, f64>,
) -> Array1<f64> {
    let total = weights.sum();
    let mut out = weights.dot(&resp) / total;
    // Absorb rounding so the proportions sum to one.
    let s = out.sum();
    if s > 0.0 {
        out /= s;
    }
    out
}

/// Full M-step. With `freeze_measurement` the class weights and measurement
/// blocks are copied from `incumbent`; class weights are also left untouched
/// when a covariate block supplies the prior.
pub fn m_step_full(
    incumbent: &MixtureModel,
    input: &ModelInput<'_>,
    resp: ArrayView2<'_, f64>,
    freeze_measurement: bool,
) -> Result<MixtureModel> {
    let measurement_blocks: Vec<Block> = incumbent
        .measurement
        .iter()
        .map(|b| b.block.clone())
        .collect();
    let structural_blocks: Vec<Block> = incumbent
        .structural
        .iter()
        .map(|b| b.block.clone())
        .collect();
    let mut model = incumbent.clone();
    if !freeze_measurement {
        if !incumbent.has_covariate() {
            check_nonempty_classes(resp, input.weights())?;
            model.class_weights = class_proportions(resp, input.weights());
        }
        if !measurement_blocks.is_empty() {
            model.measurement = fit_blocks(
                &measurement_blocks,
                Some(&incumbent.measurement),
                input.measurement_data()?,
                resp,
            )?;
        }
    }
    if !structural_blocks.is_empty() {
        model.structural = fit_blocks(
            &structural_blocks,
            Some(&incumbent.structural),
            input.structural_data()?,
            resp,
        )?;
    }
    Ok(model)
}

fn check_nonempty_classes(
    resp: ArrayView2<'_, f64>,
    weights: ndarray::ArrayView1<'_, f64>,
) -> Result<()> {
    let mass = weights.dot(&resp);
    match mass.iter().position(|m| !(m.abs() > 1e-300)) {
        Some(class) => Err(Error::DegenerateClass { class, block: None }),
        None => Ok(()),
    }
}

/// Initial model from responsibilities: one M-step over every block.
fn model_from_resp(
    spec: &ModelSpec,
    input: &ModelInput<'_>,
    resp: ArrayView2<'_, f64>,
) -> Result<MixtureModel> {
    let weights = input.weights();
    let k = spec.n_components;
    let class_weights = if spec.has_covariate() {
        Array1::from_elem(k, 1.0 / k as f64)
    } else {
        check_nonempty_classes(resp, weights)?;
        class_proportions(resp, weights)
    };
    let measurement = if spec.measurement.blocks.is_empty() {
        Vec::new()
    } else {
        fit_blocks(
            &spec.measurement.blocks,
            None,
            input.measurement_data()?,
            resp,
        )?
    };
    let structural = if spec.structural.blocks.is_empty() {
        Vec::new()
    } else {
        fit_blocks(
            &spec.structural.blocks,
            None,
            input.structural_data()?,
            resp,
        )?
    };
    Ok(MixtureModel {
        n_components: k,
        class_weights,
        measurement,
        structural,
        fit_meta: FitMeta::default(),
    })
}

/// Rows drawn from a flat Dirichlet.
pub fn random_responsibilities<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Array2<f64> {
    let mut out = Array2::zeros((n, k));
    for mut row in out.outer_iter_mut() {
        for v in row.iter_mut() {
            let u: f64 = rng.random();
            *v = -(1.0 - u).ln();
        }
        let s = row.sum();
        row /= s;
    }
    out
}

/// Options for a single EM run beyond [`EmConfig`].
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct RunOptions<'a> {
    pub freeze_measurement: bool,
    /// Fixed per-unit log term added to every E-step.
    pub offset: Option<ArrayView2<'a, f64>>,
}

/// One EM run from `model` until convergence. Returns the final model and
/// the average log-likelihood after every iteration (the first entry is the
/// starting value).
pub(crate) fn run_em(
    mut model: MixtureModel,
    input: &ModelInput<'_>,
    config: &EmConfig,
    opts: RunOptions<'_>,
) -> Result<(MixtureModel, Vec<f64>)> {
    let (mut resp, mut ll) = e_step_with_offset(&model, input, opts.offset)?;
    let mut history = vec![ll];
    let mut converged = false;
    let mut n_iter = 0;
    for it in 1..=config.max_iter {
        model = m_step_full(&model, input, resp.view(), opts.freeze_measurement)?;
        let (new_resp, new_ll) = e_step_with_offset(&model, input, opts.offset)?;
        history.push(new_ll);
        let delta = (new_ll - ll).abs();
        resp = new_resp;
        ll = new_ll;
        n_iter = it;
        let rel_hit = config
            .rel_tol
            .is_some_and(|t| delta <= t * ll.abs().max(f64::MIN_POSITIVE));
        if delta < config.abs_tol || rel_hit {
            converged = true;
            break;
        }
    }
    model.fit_meta.avg_log_likelihood = ll;
    model.fit_meta.n_iter = n_iter;
    model.fit_meta.converged = converged;
    Ok((model, history))
}

/// Fits a mixture by EM with `config.n_init` random starts and returns the
/// run with the highest final average log-likelihood.
///
/// With `init`, a single run starts from that model. With
/// `freeze_measurement`, `init` is required: its class weights and
/// measurement blocks stay fixed, and structural blocks start from `init`'s
/// structural parameters when present or else from one M-step on the
/// measurement-only posterior.
pub fn fit_em(
    spec: &ModelSpec,
    input: &ModelInput<'_>,
    config: &EmConfig,
    init: Option<&MixtureModel>,
    freeze_measurement: bool,
) -> Result<MixtureModel> {
    fit_em_traced(spec, input, config, init, freeze_measurement).map(|(m, _)| m)
}

/// [`fit_em`] that also returns the winning run's log-likelihood history.
pub fn fit_em_traced(
    spec: &ModelSpec,
    input: &ModelInput<'_>,
    config: &EmConfig,
    init: Option<&MixtureModel>,
    freeze_measurement: bool,
) -> Result<(MixtureModel, Vec<f64>)> {
    config.validate()?;
    let spec = spec.resolve(input)?;
    let opts = RunOptions {
        freeze_measurement,
        offset: None,
    };
    if let Some(init) = init {
        let start = start_from(&spec, input, init, freeze_measurement)?;
        let (mut model, history) = run_em(start, input, config, opts)?;
        model.fit_meta.seed = config.seed;
        model.fit_meta.init_index = 0;
        return Ok((model, history));
    }
    if freeze_measurement {
        return Err(Error::Validation(
            "freezing the measurement model requires an initial model".into(),
        ));
    }
    let runs: Vec<Result<(MixtureModel, Vec<f64>)>> = (0..config.n_init)
        .into_par_iter()
        .map(|j| {
            let seed = config.seed.wrapping_add(j as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let resp = random_responsibilities(input.n_units(), spec.n_components, &mut rng);
            let start = model_from_resp(&spec, input, resp.view())?;
            let (mut model, history) = run_em(start, input, config, opts)?;
            model.fit_meta.init_index = j;
            model.fit_meta.seed = config.seed;
            Ok((model, history))
        })
        .collect();
    select_best(runs)
}

fn select_best(runs: Vec<Result<(MixtureModel, Vec<f64>)>>) -> Result<(MixtureModel, Vec<f64>)> {
    let mut best: Option<(MixtureModel, Vec<f64>)> = None;
    let mut failures = Vec::new();
    for (j, run) in runs.into_iter().enumerate() {
        match run {
            Ok(candidate) => {
                let better = match &best {
                    None => true,
                    Some((b, _)) => {
                        candidate.0.fit_meta.avg_log_likelihood > b.fit_meta.avg_log_likelihood
                    }
                };
                if better {
                    best = Some(candidate);
                }
            }
            Err(e) => failures.push(format!("init {j}: {e}")),
        }
    }
    best.ok_or(Error::AllInitsFailed(failures))
}

fn start_from(
    spec: &ModelSpec,
    input: &ModelInput<'_>,
    init: &MixtureModel,
    freeze_measurement: bool,
) -> Result<MixtureModel> {
    init.validate()?;
    if init.n_components != spec.n_components {
        return Err(Error::Validation(format!(
            "initial model has {} components, expected {}",
            init.n_components, spec.n_components
        )));
    }
    if !freeze_measurement {
        return Ok(init.clone());
    }
    let mut start = init.clone();
    if init.structural.len() != spec.structural.blocks.len() {
        let mm_model = init.measurement_only();
        let (resp, _) = e_step(&mm_model, input)?;
        start.structural = if spec.structural.blocks.is_empty() {
            Vec::new()
        } else {
            fit_blocks(
                &spec.structural.blocks,
                None,
                input.structural_data()?,
                resp.view(),
            )?
        };
    }
    Ok(start)
}
