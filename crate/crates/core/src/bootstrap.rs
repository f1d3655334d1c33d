//! Nonparametric bootstrap of the stepwise estimators.

use std::collections::BTreeMap;
use std::io::Write;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::em::{e_step, MixtureModel, ModelInput, ModelSpec};
use crate::emission::flatten;
use crate::error::{Error, Result};
use crate::inference::mean_std;
use crate::stepwise::{self, StepwiseConfig};

/// Largest K for which alignment enumerates every permutation.
pub const MAX_EXACT_ALIGNMENT: usize = 8;

/// Largest tolerated share of failed repetitions.
pub const MAX_FAILURE_RATE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Resampler {
    /// Draw N indices uniformly with replacement.
    #[default]
    Uniform,
    /// Keep every unit once, in order.
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapConfig {
    pub n_repetitions: usize,
    pub seed: u64,
    pub resampler: Resampler,
}

impl BootstrapConfig {
    pub fn new(n_repetitions: usize, seed: u64) -> Self {
        BootstrapConfig {
            n_repetitions,
            seed,
            resampler: Resampler::Uniform,
        }
    }
}

/// Submodel a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Module {
    ClassWeights,
    Measurement,
    Structural,
}

impl Module {
    pub fn as_str(self) -> &'static str {
        match self {
            Module::ClassWeights => "cw",
            Module::Measurement => "mm",
            Module::Structural => "sm",
        }
    }
}

/// Identifies one scalar parameter: `param` is `block/array`, or
/// `class_weights`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub module: Module,
    pub param: String,
    pub class: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRow {
    pub rep: usize,
    pub key: ParamKey,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSummary {
    pub key: ParamKey,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    /// Long-form table over successful repetitions.
    pub samples: Vec<SampleRow>,
    /// Per-parameter mean and n-1 standard deviation, ordered by key.
    pub summary: Vec<ParamSummary>,
    pub n_repetitions: usize,
    /// Indices of failed repetitions with their error messages.
    pub failures: Vec<(usize, String)>,
}

impl BootstrapResult {
    fn module_summary(&self, module: Module) -> Vec<&ParamSummary> {
        self.summary
            .iter()
            .filter(|s| s.key.module == module)
            .collect()
    }

    pub fn cw(&self) -> Vec<&ParamSummary> {
        self.module_summary(Module::ClassWeights)
    }

    pub fn mm(&self) -> Vec<&ParamSummary> {
        self.module_summary(Module::Measurement)
    }

    pub fn sm(&self) -> Vec<&ParamSummary> {
        self.module_summary(Module::Structural)
    }

    /// Values of one parameter in repetition order.
    pub fn values(&self, module: Module, param: &str, class: usize, dim: usize) -> Vec<f64> {
        self.samples
            .iter()
            .filter(|r| {
                r.key.module == module
                    && r.key.param == param
                    && r.key.class == class
                    && r.key.dim == dim
            })
            .map(|r| r.value)
            .collect()
    }

    pub fn summary_of(
        &self,
        module: Module,
        param: &str,
        class: usize,
        dim: usize,
    ) -> Option<&ParamSummary> {
        self.summary.iter().find(|s| {
            s.key.module == module
                && s.key.param == param
                && s.key.class == class
                && s.key.dim == dim
        })
    }

    pub fn write_samples_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["rep", "module", "param", "class", "dim", "value"])?;
        for r in &self.samples {
            wtr.write_record([
                r.rep.to_string(),
                r.key.module.as_str().to_string(),
                r.key.param.clone(),
                r.key.class.to_string(),
                r.key.dim.to_string(),
                format!("{}", r.value),
            ])?;
        }
        flush(wtr)
    }

    pub fn write_summary_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["module", "param", "class", "dim", "mean", "std"])?;
        for s in &self.summary {
            wtr.write_record([
                s.key.module.as_str().to_string(),
                s.key.param.clone(),
                s.key.class.to_string(),
                s.key.dim.to_string(),
                format!("{}", s.mean),
                format!("{}", s.std),
            ])?;
        }
        flush(wtr)
    }
}

fn flush<W: Write>(mut wtr: csv::Writer<W>) -> Result<()> {
    wtr.flush().map_err(|source| Error::Io {
        path: "<csv writer>".into(),
        source,
    })
}

/// Every scalar parameter of a model, keyed and ordered by class.
pub fn model_parameters(model: &MixtureModel) -> Vec<(ParamKey, f64)> {
    let mut out: Vec<(ParamKey, f64)> = model
        .class_weights
        .iter()
        .enumerate()
        .map(|(class, &v)| {
            (
                ParamKey {
                    module: Module::ClassWeights,
                    param: "class_weights".into(),
                    class,
                    dim: 0,
                },
                v,
            )
        })
        .collect();
    for (module, blocks) in [
        (Module::Measurement, &model.measurement),
        (Module::Structural, &model.structural),
    ] {
        for fb in blocks {
            for (name, class, dim, value) in flatten(&fb.params) {
                out.push((
                    ParamKey {
                        module,
                        param: format!("{}/{}", fb.block.name, name),
                        class,
                        dim,
                    },
                    value,
                ));
            }
        }
    }
    out
}

/// Class-agreement matrix `m[k, l] = sum_i w_i a[i, k] b[i, l]`.
fn agreement(
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    weights: ArrayView1<'_, f64>,
) -> Array2<f64> {
    let k = a.ncols();
    let mut m = Array2::zeros((k, k));
    for ((ra, rb), &w) in a.outer_iter().zip(b.outer_iter()).zip(weights) {
        for i in 0..k {
            let wa = w * ra[i];
            if wa == 0.0 {
                continue;
            }
            for j in 0..k {
                m[[i, j]] += wa * rb[j];
            }
        }
    }
    m
}

/// Permutation `sigma` maximizing `sum_i w_i sum_k a[i, k] b[i, sigma[k]]`.
/// Relabeling `b`'s model with `permute_classes(&sigma)` aligns it with `a`.
/// Exhaustive for K up to [`MAX_EXACT_ALIGNMENT`], greedy beyond; ties keep
/// the lexicographically first permutation.
pub fn align_responsibilities(
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    weights: ArrayView1<'_, f64>,
) -> Vec<usize> {
    let m = agreement(a, b, weights);
    let k = m.nrows();
    if k <= MAX_EXACT_ALIGNMENT {
        best_permutation(&m)
    } else {
        greedy_permutation(&m)
    }
}

fn best_permutation(m: &Array2<f64>) -> Vec<usize> {
    let k = m.nrows();
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = perm.clone();
    let mut best_value = objective(m, &perm);
    // Lexicographic successor enumeration.
    while let Some(i) = (0..k.saturating_sub(1))
        .rev()
        .find(|&i| perm[i] < perm[i + 1])
    {
        let j = (i + 1..k).rev().find(|&j| perm[j] > perm[i]).unwrap();
        perm.swap(i, j);
        perm[i + 1..].reverse();
        let v = objective(m, &perm);
        if v > best_value {
            best_value = v;
            best = perm.clone();
        }
    }
    best
}

fn objective(m: &Array2<f64>, perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(k, &l)| m[[k, l]]).sum()
}

fn greedy_permutation(m: &Array2<f64>) -> Vec<usize> {
    let k = m.nrows();
    let mut perm = vec![usize::MAX; k];
    let mut used_rows = vec![false; k];
    let mut used_cols = vec![false; k];
    for _ in 0..k {
        let mut best = (0, 0, f64::NEG_INFINITY);
        for r in (0..k).filter(|&r| !used_rows[r]) {
            for c in (0..k).filter(|&c| !used_cols[c]) {
                if m[[r, c]] > best.2 {
                    best = (r, c, m[[r, c]]);
                }
            }
        }
        perm[best.0] = best.1;
        used_rows[best.0] = true;
        used_cols[best.1] = true;
    }
    perm
}

/// Aligns `model` to reference responsibilities over the units of `input`.
pub fn align_classes(
    reference: ArrayView2<'_, f64>,
    model: &MixtureModel,
    input: &ModelInput<'_>,
) -> Result<Vec<usize>> {
    if reference.ncols() != model.n_components {
        return Err(Error::Shape(format!(
            "reference has {} classes, model has {}",
            reference.ncols(),
            model.n_components
        )));
    }
    let (resp, _) = e_step(model, input)?;
    Ok(align_responsibilities(
        reference,
        resp.view(),
        input.weights(),
    ))
}

fn resample_indices(n: usize, resampler: Resampler, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match resampler {
        Resampler::Uniform => (0..n).map(|_| rng.random_range(0..n)).collect(),
        Resampler::Identity => (0..n).collect(),
    }
}

/// Refits `main` on resampled units with `config` and reports aligned
/// parameters. Repetition `r` resamples and refits with seed `seed + r`.
pub fn bootstrap_stats(
    main: &MixtureModel,
    data_mm: &Dataset,
    data_sm: Option<&Dataset>,
    config: &StepwiseConfig,
    boot: &BootstrapConfig,
) -> Result<BootstrapResult> {
    if boot.n_repetitions < 2 {
        return Err(Error::Validation(
            "at least two bootstrap repetitions are required".into(),
        ));
    }
    config.validate()?;
    let spec = ModelSpec::new(
        main.n_components,
        main.measurement_descriptor(),
        if data_sm.is_some() {
            main.structural_descriptor()
        } else {
            Default::default()
        },
    );
    let full_input = ModelInput::new(Some(data_mm), data_sm)?;
    let main_for_data = if data_sm.is_some() {
        main.clone()
    } else {
        main.measurement_only()
    };
    let (main_resp, _) = e_step(&main_for_data, &full_input)?;
    let n = data_mm.n_units();

    let outcomes: Vec<Result<Vec<(ParamKey, f64)>>> = (0..boot.n_repetitions)
        .into_par_iter()
        .map(|r| {
            let seed = boot.seed.wrapping_add(r as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let idx = resample_indices(n, boot.resampler, &mut rng);
            let mm = data_mm.select_rows(&idx);
            let sm = data_sm.map(|d| d.select_rows(&idx));
            let mut cfg = config.clone();
            cfg.em.seed = seed;
            let fitted = stepwise::fit(&spec, &mm, sm.as_ref(), &cfg)?;
            let input = ModelInput::new(Some(&mm), sm.as_ref())?;
            let reference = main_resp.view().select(ndarray::Axis(0), &idx);
            let sigma = align_classes(reference.view(), &fitted, &input)?;
            Ok(model_parameters(&fitted.permute_classes(&sigma)))
        })
        .collect();

    let mut samples = Vec::new();
    let mut failures = Vec::new();
    let mut grouped: BTreeMap<ParamKey, Vec<f64>> = BTreeMap::new();
    let mut n_ok = 0;
    for (rep, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(params) => {
                n_ok += 1;
                for (key, value) in params {
                    grouped.entry(key.clone()).or_default().push(value);
                    samples.push(SampleRow { rep, key, value });
                }
            }
            Err(e) => failures.push((rep, e.to_string())),
        }
    }
    if failures.len() as f64 > MAX_FAILURE_RATE * boot.n_repetitions as f64 || n_ok < 2 {
        return Err(Error::BootstrapFailed {
            failed: failures.len(),
            total: boot.n_repetitions,
        });
    }
    let summary = grouped
        .into_iter()
        .map(|(key, values)| {
            let (mean, std) = mean_std(&values);
            ParamSummary { key, mean, std }
        })
        .collect();
    Ok(BootstrapResult {
        samples,
        summary,
        n_repetitions: n_ok,
        failures,
    })
}
