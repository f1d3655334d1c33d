use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stepfit::bootstrap::{bootstrap_stats, BootstrapConfig};
use stepfit::inference::{information_criteria, predict_proba, sample_model};
use stepfit::report::{load_model, render_report, save_model};
use stepfit::simulation::{generate, run_study, BakkDesign, DesignKind, Estimator, StudyConfig};
use stepfit::stepwise::{self, Assignment, Correction};
use stepfit::{
    load_csv, Dataset, EmConfig, Error, MixtureModel, ModelDescriptor, ModelInput, ModelSpec,
    Result, StepwiseConfig,
};

use crate::{
    BootstrapArgs, Command, DataArgs, EmArgs, FitArgs, ModelArgs, PredictArgs, SampleArgs,
    SimulateArgs, StudyArgs,
};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Fit(args) => fit(args),
        Command::Predict(args) => predict(args),
        Command::Score(args) => score(args),
        Command::Bootstrap(args) => bootstrap(args),
        Command::Sample(args) => sample(args),
        Command::Simulate(args) => simulate(args),
        Command::Study(args) => study(args),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
}

/// Buffered output to a file or stdout.
fn output(path: Option<&PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn io_error(path: &str) -> impl Fn(io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.into(),
        source,
    }
}

struct Loaded {
    mm: Dataset,
    sm: Option<Dataset>,
}

impl Loaded {
    fn input(&self) -> Result<ModelInput<'_>> {
        ModelInput::new(Some(&self.mm), self.sm.as_ref())
    }
}

fn load_data(args: &DataArgs) -> Result<Loaded> {
    let mm = load_csv(&args.mm, args.weight_column.as_deref())?;
    let sm = match &args.sm {
        Some(path) => Some(load_csv(path, None)?.with_weights(mm.weights().to_owned())?),
        None => None,
    };
    Ok(Loaded { mm, sm })
}

fn read_descriptor(text: &str, n_columns: usize) -> Result<ModelDescriptor> {
    let path = Path::new(text);
    if path.is_file() {
        let contents = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        ModelDescriptor::parse(&contents, n_columns)
    } else {
        ModelDescriptor::parse(text, n_columns)
    }
}

fn em_config(args: &EmArgs) -> EmConfig {
    EmConfig {
        max_iter: args.max_iter,
        abs_tol: args.abs_tol,
        rel_tol: args.rel_tol,
        n_init: args.n_init,
        seed: args.seed,
    }
}

fn stepwise_config(args: &ModelArgs) -> Result<StepwiseConfig> {
    if args.n_steps != 3 && (args.assignment.is_some() || args.correction.is_some()) {
        return Err(Error::Validation(format!(
            "--assignment and --correction require --n-steps 3 (got --n-steps {})",
            args.n_steps
        )));
    }
    let config = StepwiseConfig {
        n_steps: args.n_steps,
        assignment: args
            .assignment
            .as_deref()
            .map(str::parse)
            .transpose()?
            .unwrap_or(Assignment::Modal),
        correction: args
            .correction
            .as_deref()
            .map(str::parse)
            .transpose()?
            .unwrap_or(Correction::None),
        em: em_config(&args.em),
    };
    config.validate()?;
    Ok(config)
}

fn model_spec(args: &ModelArgs, data: &Loaded) -> Result<ModelSpec> {
    let mm = read_descriptor(&args.mm_descriptor, data.mm.n_columns())?;
    let sm = match (&args.sm_descriptor, &data.sm) {
        (Some(d), Some(sm)) => read_descriptor(d, sm.n_columns())?,
        (None, None) => ModelDescriptor::default(),
        (Some(_), None) => {
            return Err(Error::Validation(
                "--sm-descriptor given without --sm data".into(),
            ))
        }
        (None, Some(_)) => {
            return Err(Error::Validation(
                "--sm data given without --sm-descriptor".into(),
            ))
        }
    };
    if args.n_components == 0 {
        return Err(Error::Validation(
            "--n-components must be at least 1".into(),
        ));
    }
    Ok(ModelSpec::new(args.n_components, mm, sm))
}

fn fit(args: FitArgs) -> Result<()> {
    let data = load_data(&args.data)?;
    let config = stepwise_config(&args.model)?;
    let spec = model_spec(&args.model, &data)?;
    if (args.weights_out.is_some() || args.confusion_out.is_some()) && config.n_steps != 3 {
        return Err(Error::Validation(
            "--weights-out and --confusion-out require --n-steps 3".into(),
        ));
    }
    let model = match (&data.sm, config.n_steps) {
        (Some(sm), 3) => {
            let detail = stepwise::fit_three_step_detailed(&spec, &data.mm, &data.mm, sm, &config)?;
            if let Some(path) = &args.weights_out {
                detail.weights.write_csv(create(path)?)?;
            }
            if let Some(path) = &args.confusion_out {
                match &detail.confusion {
                    Some(d) => d.write_csv(create(path)?)?,
                    None => {
                        return Err(Error::Validation(
                            "--confusion-out requires --correction bch or ml".into(),
                        ))
                    }
                }
            }
            detail.model
        }
        _ => stepwise::fit(&spec, &data.mm, data.sm.as_ref(), &config)?,
    };
    let stats = information_criteria(&model, &data.input()?)?;
    if let Some(path) = &args.model_out {
        save_model(path, &model, Some(&stats))?;
    }
    let text = render_report(&model, &stats, args.verbose);
    let mut out = output(args.report.as_ref())?;
    out.write_all(text.as_bytes()).map_err(io_error("report"))?;
    out.flush().map_err(io_error("report"))
}

/// Restricts the data to the sides the model describes.
fn model_input<'a>(model: &MixtureModel, data: &'a Loaded) -> Result<ModelInput<'a>> {
    let sm = if model.structural.is_empty() {
        None
    } else {
        data.sm.as_ref()
    };
    if !model.structural.is_empty() && sm.is_none() {
        return Err(Error::Validation(
            "the model has a structural side; pass --sm".into(),
        ));
    }
    ModelInput::new(Some(&data.mm), sm)
}

fn predict(args: PredictArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let data = load_data(&args.data)?;
    let resp = predict_proba(&model, &model_input(&model, &data)?)?;
    let classes = resp.modal();
    let mut out = output(args.output.as_ref())?;
    let err = io_error("predictions");
    let header: Vec<String> = std::iter::once("class".to_string())
        .chain((0..model.n_components).map(|k| format!("p_{k}")))
        .collect();
    writeln!(out, "{}", header.join(",")).map_err(&err)?;
    for (row, class) in resp.view().outer_iter().zip(&classes) {
        let probs: Vec<String> = row.iter().map(|p| p.to_string()).collect();
        writeln!(out, "{class},{}", probs.join(",")).map_err(&err)?;
    }
    out.flush().map_err(&err)
}

fn score(args: PredictArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let data = load_data(&args.data)?;
    let stats = information_criteria(&model, &model_input(&model, &data)?)?;
    let mut out = output(args.output.as_ref())?;
    let err = io_error("scores");
    writeln!(out, "statistic,value").map_err(&err)?;
    for (name, value) in [
        ("avg_log_likelihood", stats.avg_log_likelihood),
        ("log_likelihood", stats.total_log_likelihood),
        ("n_parameters", stats.n_parameters as f64),
        ("aic", stats.aic),
        ("bic", stats.bic),
        ("n", stats.n),
    ] {
        writeln!(out, "{name},{value}").map_err(&err)?;
    }
    out.flush().map_err(&err)
}

fn bootstrap(args: BootstrapArgs) -> Result<()> {
    let data = load_data(&args.data)?;
    let config = stepwise_config(&args.model)?;
    let spec = model_spec(&args.model, &data)?;
    let main = stepwise::fit(&spec, &data.mm, data.sm.as_ref(), &config)?;
    let result = bootstrap_stats(
        &main,
        &data.mm,
        data.sm.as_ref(),
        &config,
        &BootstrapConfig::new(args.reps, config.em.seed),
    )?;
    if let Some(path) = &args.samples_out {
        result.write_samples_csv(create(path)?)?;
    }
    result.write_summary_csv(output(args.summary_out.as_ref())?)?;
    if !result.failures.is_empty() {
        eprintln!(
            "warning: {} of {} repetitions failed and were excluded",
            result.failures.len(),
            args.reps
        );
    }
    Ok(())
}

fn write_classes(path: &Path, classes: &[usize]) -> Result<()> {
    let mut out = create(path)?;
    let err = io_error("classes");
    writeln!(out, "class").map_err(&err)?;
    for c in classes {
        writeln!(out, "{c}").map_err(&err)?;
    }
    out.flush().map_err(&err)
}

fn prefixed(prefix: &str, suffix: &str) -> PathBuf {
    PathBuf::from(format!("{prefix}_{suffix}.csv"))
}

fn sample(args: SampleArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let drawn = sample_model(&model, args.n, &mut rng)?;
    if let Some(mm) = &drawn.measurement {
        mm.save_csv(&prefixed(&args.prefix, "mm"), None)?;
    }
    if let Some(sm) = &drawn.structural {
        sm.save_csv(&prefixed(&args.prefix, "sm"), None)?;
    }
    write_classes(&prefixed(&args.prefix, "classes"), &drawn.classes)
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let kind: DesignKind = args.design.parse()?;
    let design =
        BakkDesign::new(kind, args.n, args.sep, args.seed).with_missing_ratio(args.missing);
    let data = generate(&design)?;
    data.measurement
        .save_csv(&prefixed(&args.prefix, "mm"), None)?;
    data.structural
        .save_csv(&prefixed(&args.prefix, "sm"), None)?;
    write_classes(&prefixed(&args.prefix, "classes"), &data.classes)
}

fn study(args: StudyArgs) -> Result<()> {
    let mut config = StudyConfig::new(args.design.parse()?);
    config.sample_sizes = args.n;
    config.separations = args.sep;
    config.missing_ratios = args.missing;
    config.replications = args.reps;
    config.estimators = args
        .estimators
        .iter()
        .map(|e| e.parse::<Estimator>())
        .collect::<Result<Vec<_>>>()?;
    config.base_seed = args.em.seed;
    config.em = em_config(&args.em);
    let result = run_study(&config)?;
    result.write_csv(output(args.output.as_ref())?)
}
