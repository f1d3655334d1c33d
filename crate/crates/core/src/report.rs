//! Model persistence as JSON and the plain-text model report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde_json::{json, Map, Number, Value};

use crate::data::{Block, Family};
use crate::em::{FitMeta, FittedBlock, MixtureModel};
use crate::emission::EmissionParams;
use crate::error::{Error, Result};
use crate::inference::FitReportStats;

pub const SCHEMA_VERSION: u64 = 1;

fn num(v: f64) -> Value {
    Number::from_f64(v)
        .map(Value::Number)
        .unwrap_or(Value::Null)
}

fn array_to_json(a: &ArrayD<f64>) -> Value {
    fn rec(a: ndarray::ArrayViewD<'_, f64>) -> Value {
        if a.ndim() == 0 {
            return num(a[IxDyn(&[])]);
        }
        Value::Array(a.outer_iter().map(rec).collect())
    }
    rec(a.view())
}

fn schema(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Schema {
        path: path.into(),
        message: message.into(),
    }
}

fn json_to_array(v: &Value, path: &str) -> Result<ArrayD<f64>> {
    fn shape_of(v: &Value, path: &str, shape: &mut Vec<usize>) -> Result<()> {
        if let Value::Array(items) = v {
            shape.push(items.len());
            if let Some(first) = items.first() {
                shape_of(first, &format!("{path}[0]"), shape)?;
            }
        }
        Ok(())
    }
    fn flatten(
        v: &Value,
        path: &str,
        depth: usize,
        shape: &[usize],
        out: &mut Vec<f64>,
    ) -> Result<()> {
        if depth == shape.len() {
            return match v {
                Value::Number(n) => {
                    out.push(
                        n.as_f64()
                            .ok_or_else(|| schema(path, "not a finite number"))?,
                    );
                    Ok(())
                }
                Value::Null => {
                    out.push(f64::NAN);
                    Ok(())
                }
                _ => Err(schema(path, "expected a number")),
            };
        }
        let items = v
            .as_array()
            .ok_or_else(|| schema(path, "expected an array"))?;
        if items.len() != shape[depth] {
            return Err(schema(
                path,
                format!("ragged array: expected {} entries", shape[depth]),
            ));
        }
        for (i, item) in items.iter().enumerate() {
            flatten(item, &format!("{path}[{i}]"), depth + 1, shape, out)?;
        }
        Ok(())
    }
    let mut shape = Vec::new();
    shape_of(v, path, &mut shape)?;
    let mut data = Vec::new();
    flatten(v, path, 0, &shape, &mut data)?;
    ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|e| schema(path, e.to_string()))
}

fn block_to_json(fb: &FittedBlock) -> Value {
    let mut obj = match fb.block.to_json() {
        Value::Object(m) => m,
        _ => Map::new(),
    };
    let params: Map<String, Value> = fb
        .params
        .arrays()
        .into_iter()
        .map(|(name, a)| (name.to_string(), array_to_json(&a)))
        .collect();
    obj.insert("params".into(), Value::Object(params));
    Value::Object(obj)
}

fn stats_to_json(s: &FitReportStats) -> Value {
    json!({
        "total_log_likelihood": num(s.total_log_likelihood),
        "avg_log_likelihood": num(s.avg_log_likelihood),
        "n_parameters": s.n_parameters,
        "aic": num(s.aic),
        "bic": num(s.bic),
        "n": num(s.n),
        "n_components": s.n_components,
        "class_sizes": s.class_sizes.iter().map(|&v| num(v)).collect::<Vec<_>>(),
    })
}

/// JSON document of a model, with fit statistics when given.
pub fn model_to_json(model: &MixtureModel, stats: Option<&FitReportStats>) -> Value {
    let meta = &model.fit_meta;
    let mut doc = json!({
        "schema_version": SCHEMA_VERSION,
        "n_components": model.n_components,
        "class_weights": model.class_weights.iter().map(|&v| num(v)).collect::<Vec<_>>(),
        "measurement": model.measurement.iter().map(block_to_json).collect::<Vec<_>>(),
        "structural": model.structural.iter().map(block_to_json).collect::<Vec<_>>(),
        "fit_meta": {
            "avg_log_likelihood": num(meta.avg_log_likelihood),
            "n_iter": meta.n_iter,
            "converged": meta.converged,
            "init_index": meta.init_index,
            "seed": meta.seed,
            "method": meta.method,
        },
    });
    if let Some(s) = stats {
        doc["fit_stats"] = stats_to_json(s);
    }
    doc
}

fn get<'a>(obj: &'a Map<String, Value>, key: &str, path: &str) -> Result<&'a Value> {
    obj.get(key)
        .ok_or_else(|| schema(format!("{path}.{key}"), "missing field"))
}

fn get_u64(obj: &Map<String, Value>, key: &str, path: &str) -> Result<u64> {
    get(obj, key, path)?
        .as_u64()
        .ok_or_else(|| schema(format!("{path}.{key}"), "expected a nonnegative integer"))
}

fn get_f64(obj: &Map<String, Value>, key: &str, path: &str) -> Result<f64> {
    match get(obj, key, path)? {
        Value::Null => Ok(f64::NAN),
        v => v
            .as_f64()
            .ok_or_else(|| schema(format!("{path}.{key}"), "expected a number")),
    }
}

fn block_from_json(v: &Value, index: usize, path: &str) -> Result<FittedBlock> {
    let block = Block::from_json(v, index).map_err(|e| schema(path, e.to_string()))?;
    let obj = v
        .as_object()
        .ok_or_else(|| schema(path, "expected an object"))?;
    let params_path = format!("{path}.params");
    let params = get(obj, "params", path)?
        .as_object()
        .ok_or_else(|| schema(&params_path, "expected an object"))?;
    let mut arrays = BTreeMap::new();
    for (name, a) in params {
        arrays.insert(
            name.clone(),
            json_to_array(a, &format!("{params_path}.{name}"))?,
        );
    }
    let params = EmissionParams::from_arrays(block.family, arrays)
        .map_err(|e| schema(&params_path, e.to_string()))?;
    Ok(FittedBlock { block, params })
}

/// Parses and validates a model document.
pub fn model_from_json(doc: &Value) -> Result<MixtureModel> {
    let obj = doc
        .as_object()
        .ok_or_else(|| schema("$", "expected an object"))?;
    let version = get_u64(obj, "schema_version", "$")?;
    if version != SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found: version,
            expected: SCHEMA_VERSION,
        });
    }
    let n_components = get_u64(obj, "n_components", "$")? as usize;
    let cw = json_to_array(get(obj, "class_weights", "$")?, "$.class_weights")?;
    if cw.ndim() != 1 {
        return Err(schema("$.class_weights", "expected a flat array"));
    }
    let class_weights = cw
        .into_dimensionality::<ndarray::Ix1>()
        .map_err(|e| schema("$.class_weights", e.to_string()))?;
    let mut sides = Vec::new();
    for side in ["measurement", "structural"] {
        let path = format!("$.{side}");
        let items = get(obj, side, "$")?
            .as_array()
            .ok_or_else(|| schema(&path, "expected an array"))?;
        let blocks = items
            .iter()
            .enumerate()
            .map(|(i, v)| block_from_json(v, i, &format!("{path}[{i}]")))
            .collect::<Result<Vec<_>>>()?;
        sides.push(blocks);
    }
    let structural = sides.pop().unwrap_or_default();
    let measurement = sides.pop().unwrap_or_default();
    let fit_meta = match obj.get("fit_meta") {
        Some(Value::Object(m)) => FitMeta {
            avg_log_likelihood: get_f64(m, "avg_log_likelihood", "$.fit_meta")?,
            n_iter: get_u64(m, "n_iter", "$.fit_meta")? as usize,
            converged: get(m, "converged", "$.fit_meta")?
                .as_bool()
                .ok_or_else(|| schema("$.fit_meta.converged", "expected a boolean"))?,
            init_index: get_u64(m, "init_index", "$.fit_meta")? as usize,
            seed: get_u64(m, "seed", "$.fit_meta")?,
            method: get(m, "method", "$.fit_meta")?
                .as_str()
                .ok_or_else(|| schema("$.fit_meta.method", "expected a string"))?
                .to_string(),
        },
        Some(_) => return Err(schema("$.fit_meta", "expected an object")),
        None => FitMeta::default(),
    };
    let model = MixtureModel {
        n_components,
        class_weights,
        measurement,
        structural,
        fit_meta,
    };
    model.validate().map_err(|e| schema("$", e.to_string()))?;
    Ok(model)
}

pub fn save_model(path: &Path, model: &MixtureModel, stats: Option<&FitReportStats>) -> Result<()> {
    let text =
        serde_json::to_string_pretty(&model_to_json(model, stats)).expect("JSON values serialize");
    std::fs::write(path, text + "\n").map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_model(path: &Path) -> Result<MixtureModel> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| schema("$", e.to_string()))?;
    model_from_json(&doc)
}

fn rule(out: &mut String, c: char) {
    out.push_str(&c.to_string().repeat(72));
    out.push('\n');
}

/// Labels for the entries of one class's slice of a parameter array.
fn entry_labels(name: &str, shape: &[usize]) -> Vec<String> {
    let total: usize = shape.iter().product();
    (0..total)
        .map(|flat| {
            let mut rem = flat;
            let mut idx = vec![0; shape.len()];
            for (d, &s) in shape.iter().enumerate().rev() {
                idx[d] = rem % s;
                rem /= s;
            }
            if idx.is_empty() {
                name.to_string()
            } else {
                let parts: Vec<String> = idx.iter().map(|i| i.to_string()).collect();
                format!("{name}[{}]", parts.join(","))
            }
        })
        .collect()
}

fn param_table(out: &mut String, params: &EmissionParams, k: usize) {
    let _ = write!(out, "    {:<20}", "parameter");
    for c in 0..k {
        let _ = write!(out, " {:>22}", format!("class {c}"));
    }
    out.push('\n');
    for (name, a) in params.arrays() {
        let sub_shape: Vec<usize> = a.shape()[1..].to_vec();
        let labels = entry_labels(name, &sub_shape);
        let per_class: Vec<Vec<f64>> = a
            .outer_iter()
            .map(|s| s.iter().copied().collect())
            .collect();
        for (j, label) in labels.iter().enumerate() {
            let _ = write!(out, "    {label:<20}");
            for class in per_class.iter().take(k) {
                let _ = write!(out, " {:>22}", format!("{}", class[j]));
            }
            out.push('\n');
        }
    }
}

fn blocks_section(out: &mut String, title: &str, blocks: &[FittedBlock], k: usize) {
    if blocks.is_empty() {
        return;
    }
    out.push('\n');
    let _ = writeln!(out, "{title}");
    rule(out, '-');
    for fb in blocks {
        let b = &fb.block;
        let _ = writeln!(
            out,
            "  Block '{}' ({}{}, columns {}-{})",
            b.name,
            b.family.name(),
            if b.fiml { ", FIML" } else { "" },
            b.columns.start,
            b.columns.end.saturating_sub(1)
        );
        param_table(out, &fb.params, k);
        if let (Family::Covariate, EmissionParams::Covariate(p)) = (b.family, &fb.params) {
            let _ = writeln!(out, "  Coefficients relative to class 0");
            param_table(out, &EmissionParams::Covariate(p.rebased(0)), k);
        }
    }
}

/// Plain-text report. Verbosity 0 prints the header and fit statistics;
/// 1 adds class weights and every parameter table.
pub fn render_report(model: &MixtureModel, stats: &FitReportStats, verbosity: u8) -> String {
    let mut out = String::new();
    let meta = &model.fit_meta;
    rule(&mut out, '=');
    out.push_str("Latent class model report\n");
    rule(&mut out, '=');
    let method = if meta.method.is_empty() {
        "unspecified"
    } else {
        meta.method.as_str()
    };
    let _ = writeln!(out, "Estimation method      {method}");
    let _ = writeln!(out, "Classes (K)            {}", model.n_components);
    let _ = writeln!(out, "Units (N)              {}", stats.n);
    let _ = writeln!(out, "Seed                   {}", meta.seed);
    let _ = writeln!(out, "Iterations             {}", meta.n_iter);
    let _ = writeln!(out, "Converged              {}", meta.converged);
    out.push('\n');
    out.push_str("Fit statistics\n");
    rule(&mut out, '-');
    let _ = writeln!(
        out,
        "  Log-likelihood         {}",
        stats.total_log_likelihood
    );
    let _ = writeln!(out, "  Average log-likelihood {}", stats.avg_log_likelihood);
    let _ = writeln!(out, "  Free parameters        {}", stats.n_parameters);
    let _ = writeln!(out, "  AIC                    {}", stats.aic);
    let _ = writeln!(out, "  BIC                    {}", stats.bic);
    out.push_str("  Class sizes\n");
    for (c, s) in stats.class_sizes.iter().enumerate() {
        let _ = writeln!(out, "    class {c:<3} {s}");
    }
    if verbosity == 0 {
        return out;
    }
    out.push('\n');
    out.push_str("Class weights\n");
    rule(&mut out, '-');
    if model.has_covariate() {
        out.push_str("  (given by the covariate block)\n");
    } else {
        for (c, w) in model.class_weights.iter().enumerate() {
            let _ = writeln!(out, "    class {c:<3} {w}");
        }
    }
    blocks_section(
        &mut out,
        "Measurement model",
        &model.measurement,
        model.n_components,
    );
    blocks_section(
        &mut out,
        "Structural model",
        &model.structural,
        model.n_components,
    );
    out
}
