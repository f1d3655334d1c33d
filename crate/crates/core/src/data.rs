//! Datasets with per-cell missingness and sample weights, and the block
//! descriptors that map dataset columns onto emission families.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde_json::Value;

use crate::error::{Error, Result};

/// Maximum number of distinct levels accepted in one categorical column.
pub const MAX_CATEGORICAL_LEVELS: usize = 1000;

/// An N×D table of reals with an observation mask and per-unit weights.
///
/// Missing cells hold `NaN` in `values` and `false` in the mask. A dataset is
/// immutable once built; the `with_*` methods consume and return a new one.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    values: Array2<f64>,
    observed: Array2<bool>,
    weights: Array1<f64>,
    column_names: Vec<String>,
    levels: Vec<Option<Vec<f64>>>,
}

impl Dataset {
    /// Builds a dataset from raw values. Non-finite cells are treated as missing.
    pub fn new(values: Array2<f64>, column_names: Vec<String>) -> Result<Self> {
        if column_names.len() != values.ncols() {
            return Err(Error::Shape(format!(
                "{} column names for {} columns",
                column_names.len(),
                values.ncols()
            )));
        }
        let observed = values.mapv(f64::is_finite);
        let values = values.mapv(|v| if v.is_finite() { v } else { f64::NAN });
        let n = values.nrows();
        let d = values.ncols();
        let data = Dataset {
            values,
            observed,
            weights: Array1::ones(n),
            column_names,
            levels: vec![None; d],
        };
        data.check_weights()?;
        Ok(data)
    }

    /// Builds a dataset with generated column names `x0, x1, ...`.
    pub fn from_values(values: Array2<f64>) -> Result<Self> {
        let names = (0..values.ncols()).map(|j| format!("x{j}")).collect();
        Self::new(values, names)
    }

    pub fn with_weights(mut self, weights: Array1<f64>) -> Result<Self> {
        if weights.len() != self.n_units() {
            return Err(Error::Shape(format!(
                "{} weights for {} units",
                weights.len(),
                self.n_units()
            )));
        }
        self.weights = weights;
        self.check_weights()?;
        Ok(self)
    }

    /// Marks additional cells as missing; `mask[i, j] == false` hides cell (i, j).
    pub fn with_mask(mut self, mask: &Array2<bool>) -> Result<Self> {
        if mask.dim() != self.values.dim() {
            return Err(Error::Shape(format!(
                "mask of shape {:?} for data of shape {:?}",
                mask.dim(),
                self.values.dim()
            )));
        }
        ndarray::Zip::from(&mut self.observed)
            .and(&mut self.values)
            .and(mask)
            .for_each(|obs, v, &keep| {
                if !keep {
                    *obs = false;
                    *v = f64::NAN;
                }
            });
        Ok(self)
    }

    fn check_weights(&self) -> Result<()> {
        if self.weights.is_empty() {
            return Err(Error::Validation("dataset has no rows".into()));
        }
        if let Some(i) = self.weights.iter().position(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Validation(format!(
                "weight of unit {i} is {}; weights must be finite and nonnegative",
                self.weights[i]
            )));
        }
        if !self.weights.iter().any(|w| *w > 0.0) {
            return Err(Error::Validation("all sample weights are zero".into()));
        }
        Ok(())
    }

    pub fn n_units(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_columns(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn observed(&self) -> ArrayView2<'_, bool> {
        self.observed.view()
    }

    pub fn weights(&self) -> ArrayView1<'_, f64> {
        self.weights.view()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.sum()
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    /// Original values of an encoded categorical column, indexed by code.
    pub fn levels(&self, column: usize) -> Option<&[f64]> {
        self.levels.get(column).and_then(|l| l.as_deref())
    }

    pub fn is_observed(&self, unit: usize, column: usize) -> bool {
        self.observed[[unit, column]]
    }

    pub fn has_missing(&self) -> bool {
        self.observed.iter().any(|o| !o)
    }

    pub fn has_missing_in(&self, columns: Range<usize>) -> bool {
        self.observed.slice(s![.., columns]).iter().any(|o| !o)
    }

    /// Rows `indices` in order, duplicates allowed; each unit keeps its weight.
    pub fn select_rows(&self, indices: &[usize]) -> Dataset {
        Dataset {
            values: self.values.select(Axis(0), indices),
            observed: self.observed.select(Axis(0), indices),
            weights: self.weights.select(Axis(0), indices),
            column_names: self.column_names.clone(),
            levels: self.levels.clone(),
        }
    }

    pub fn select_columns(&self, columns: Range<usize>) -> Dataset {
        Dataset {
            values: self.values.slice(s![.., columns.clone()]).to_owned(),
            observed: self.observed.slice(s![.., columns.clone()]).to_owned(),
            weights: self.weights.clone(),
            column_names: self.column_names[columns.clone()].to_vec(),
            levels: self.levels[columns].to_vec(),
        }
    }

    /// Writes the dataset as CSV. Missing cells are written empty; weights are
    /// written as an extra trailing column when `weight_column` is given.
    pub fn write_csv<W: Write>(&self, writer: W, weight_column: Option<&str>) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.column_names.iter().map(String::as_str).collect();
        if let Some(name) = weight_column {
            header.push(name);
        }
        wtr.write_record(&header)?;
        for i in 0..self.n_units() {
            let mut record: Vec<String> = (0..self.n_columns())
                .map(|j| {
                    if self.observed[[i, j]] {
                        format!("{}", self.values[[i, j]])
                    } else {
                        String::new()
                    }
                })
                .collect();
            if weight_column.is_some() {
                record.push(format!("{}", self.weights[i]));
            }
            wtr.write_record(&record)?;
        }
        wtr.flush().map_err(|source| Error::Io {
            path: "<csv writer>".into(),
            source,
        })?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path, weight_column: Option<&str>) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.write_csv(std::io::BufWriter::new(file), weight_column)
    }
}

fn is_missing_sentinel(cell: &str) -> bool {
    let cell = cell.trim();
    cell.is_empty() || cell.eq_ignore_ascii_case("nan")
}

/// Reads a CSV with a header row. Empty and `NaN` cells are missing.
pub fn read_csv<R: Read>(reader: R, weight_column: Option<&str>) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let weight_idx = match weight_column {
        Some(name) => Some(header.iter().position(|h| h == name).ok_or_else(|| {
            Error::Validation(format!("weight column '{name}' not found in header"))
        })?),
        None => None,
    };
    let names: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|(j, _)| Some(*j) != weight_idx)
        .map(|(_, h)| h.clone())
        .collect();

    let mut cells = Vec::new();
    let mut weights = Vec::new();
    let mut n_rows = 0;
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        if record.len() != header.len() {
            return Err(Error::Parse {
                row: row + 1,
                column: String::from("*"),
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        for (j, cell) in record.iter().enumerate() {
            let parsed = if is_missing_sentinel(cell) {
                f64::NAN
            } else {
                cell.trim().parse::<f64>().map_err(|_| Error::Parse {
                    row: row + 1,
                    column: header[j].clone(),
                    message: format!("'{cell}' is not a number"),
                })?
            };
            if Some(j) == weight_idx {
                if !parsed.is_finite() || parsed < 0.0 {
                    return Err(Error::Validation(format!(
                        "row {}: weight '{cell}' must be a nonnegative number",
                        row + 1
                    )));
                }
                weights.push(parsed);
            } else {
                cells.push(parsed);
            }
        }
        n_rows += 1;
    }
    let values = Array2::from_shape_vec((n_rows, names.len()), cells)
        .map_err(|e| Error::Shape(e.to_string()))?;
    let data = Dataset::new(values, names)?;
    match weight_idx {
        Some(_) => data.with_weights(Array1::from(weights)),
        None => Ok(data),
    }
}

pub fn load_csv(path: &Path, weight_column: Option<&str>) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_csv(std::io::BufReader::new(file), weight_column)
}

/// Conditional distribution families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    Binary,
    Categorical,
    GaussianUnit,
    GaussianSpherical,
    GaussianDiag,
    GaussianFull,
    Covariate,
}

impl Family {
    pub const ALL: [Family; 7] = [
        Family::Binary,
        Family::Categorical,
        Family::GaussianUnit,
        Family::GaussianSpherical,
        Family::GaussianDiag,
        Family::GaussianFull,
        Family::Covariate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Binary => "binary",
            Family::Categorical => "categorical",
            Family::GaussianUnit => "gaussian_unit",
            Family::GaussianSpherical => "gaussian_spherical",
            Family::GaussianDiag => "gaussian_diag",
            Family::GaussianFull => "gaussian_full",
            Family::Covariate => "covariate",
        }
    }

    pub fn supports_fiml(self) -> bool {
        !matches!(self, Family::GaussianFull | Family::Covariate)
    }

    pub fn is_discrete(self) -> bool {
        matches!(self, Family::Binary | Family::Categorical)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Descriptor(format!("unknown family '{s}'")))
    }
}

/// Parses a family name with optional `_nan` suffix into (family, fiml).
pub fn parse_family_tag(tag: &str) -> Result<(Family, bool)> {
    match tag.strip_suffix("_nan") {
        Some(base) => Ok((base.parse()?, true)),
        None => Ok((tag.parse()?, false)),
    }
}

/// One emission block: a family applied to a contiguous range of columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub family: Family,
    pub columns: Range<usize>,
    pub fiml: bool,
    pub options: BTreeMap<String, Value>,
}

impl Block {
    pub fn new(name: impl Into<String>, family: Family, columns: Range<usize>) -> Self {
        Block {
            name: name.into(),
            family,
            columns,
            fiml: false,
            options: BTreeMap::new(),
        }
    }

    pub fn fiml(mut self, enabled: bool) -> Self {
        self.fiml = enabled;
        self
    }

    pub fn option(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.options.insert(key.to_string(), value.into());
        self
    }

    pub fn n_columns(&self) -> usize {
        self.columns.len()
    }

    /// Explicit level count for categorical blocks, if configured.
    pub fn n_levels(&self) -> Option<usize> {
        self.options
            .get("n_levels")
            .and_then(Value::as_u64)
            .map(|v| v as usize)
    }

    pub(crate) fn to_json(&self) -> Value {
        serde_json::json!({
            "name": self.name,
            "family": self.family.name(),
            "columns": [self.columns.start, self.columns.end.saturating_sub(1)],
            "fiml": self.fiml,
            "options": self.options,
        })
    }

    pub(crate) fn from_json(value: &Value, index: usize) -> Result<Self> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Descriptor(format!("blocks[{index}] is not an object")))?;
        let family_tag = obj
            .get("family")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Descriptor(format!("blocks[{index}].family missing")))?;
        let (family, suffix_fiml) = parse_family_tag(family_tag)?;
        let name = obj
            .get("name")
            .and_then(Value::as_str)
            .map(str::to_string)
            .unwrap_or_else(|| format!("{}_{index}", family.name()));
        let cols = obj
            .get("columns")
            .and_then(Value::as_array)
            .filter(|c| c.len() == 2)
            .and_then(|c| Some((c[0].as_u64()? as usize, c[1].as_u64()? as usize)))
            .ok_or_else(|| {
                Error::Descriptor(format!("blocks[{index}].columns must be [lo, hi]"))
            })?;
        if cols.1 < cols.0 {
            return Err(Error::Descriptor(format!(
                "blocks[{index}].columns: hi {} < lo {}",
                cols.1, cols.0
            )));
        }
        let fiml = match obj.get("fiml") {
            Some(v) => v.as_bool().ok_or_else(|| {
                Error::Descriptor(format!("blocks[{index}].fiml must be a boolean"))
            })?,
            None => false,
        } || suffix_fiml;
        let options = match obj.get("options") {
            Some(Value::Object(map)) => map.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
            Some(Value::Null) | None => BTreeMap::new(),
            Some(_) => {
                return Err(Error::Descriptor(format!(
                    "blocks[{index}].options must be an object"
                )))
            }
        };
        Ok(Block {
            name,
            family,
            columns: cols.0..cols.1 + 1,
            fiml,
            options,
        })
    }
}

/// Which side of the model a descriptor describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Measurement,
    Structural,
}

/// Ordered list of blocks covering a dataset's columns.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelDescriptor {
    pub blocks: Vec<Block>,
}

impl ModelDescriptor {
    pub fn new(blocks: Vec<Block>) -> Self {
        ModelDescriptor { blocks }
    }

    /// A single block spanning all `n_columns` columns, e.g. `"binary_nan"`.
    pub fn single(tag: &str, n_columns: usize) -> Result<Self> {
        let (family, fiml) = parse_family_tag(tag)?;
        Ok(ModelDescriptor {
            blocks: vec![Block::new(family.name(), family, 0..n_columns).fiml(fiml)],
        })
    }

    pub fn covariate_block(&self) -> Option<&Block> {
        self.blocks.iter().find(|b| b.family == Family::Covariate)
    }

    /// Parses the JSON form. A bare string is shorthand for one block over all columns.
    pub fn from_json(value: &Value, n_columns: usize) -> Result<Self> {
        match value {
            Value::String(tag) => Self::single(tag, n_columns),
            Value::Object(obj) => {
                let blocks = obj
                    .get("blocks")
                    .and_then(Value::as_array)
                    .ok_or_else(|| Error::Descriptor("expected a \"blocks\" array".into()))?;
                let blocks = blocks
                    .iter()
                    .enumerate()
                    .map(|(i, b)| Block::from_json(b, i))
                    .collect::<Result<Vec<_>>>()?;
                Ok(ModelDescriptor { blocks })
            }
            _ => Err(Error::Descriptor(
                "descriptor must be a family string or an object".into(),
            )),
        }
    }

    pub fn parse(text: &str, n_columns: usize) -> Result<Self> {
        let trimmed = text.trim();
        // Accept a bare family tag without JSON quoting.
        if !trimmed.starts_with('{') && !trimmed.starts_with('"') {
            return Self::single(trimmed, n_columns);
        }
        let value: Value = serde_json::from_str(trimmed)
            .map_err(|e| Error::Descriptor(format!("invalid JSON: {e}")))?;
        Self::from_json(&value, n_columns)
    }

    pub fn to_json(&self) -> Value {
        serde_json::json!({ "blocks": self.blocks.iter().map(Block::to_json).collect::<Vec<_>>() })
    }
}

/// Checks a descriptor against a dataset. Returns the first violated invariant.
pub fn validate_descriptor(desc: &ModelDescriptor, data: &Dataset, role: Role) -> Result<()> {
    let d = data.n_columns();
    if desc.blocks.is_empty() {
        return Err(Error::Descriptor("descriptor has no blocks".into()));
    }
    let mut owner: Vec<Option<&str>> = vec![None; d];
    let mut n_covariate = 0;
    for block in &desc.blocks {
        if block.columns.is_empty() {
            return Err(Error::Descriptor(format!(
                "block '{}' has no columns",
                block.name
            )));
        }
        if block.columns.end > d {
            return Err(Error::Descriptor(format!(
                "block '{}' range {}..={} exceeds the dataset's {d} columns",
                block.name,
                block.columns.start,
                block.columns.end - 1
            )));
        }
        for j in block.columns.clone() {
            if let Some(other) = owner[j] {
                return Err(Error::Descriptor(format!(
                    "column {j} claimed by both '{other}' and '{}' (overlapping ranges)",
                    block.name
                )));
            }
            owner[j] = Some(&block.name);
        }
        if block.family == Family::Covariate {
            if role == Role::Measurement {
                return Err(Error::Descriptor(format!(
                    "covariate block '{}' is not allowed in a measurement descriptor",
                    block.name
                )));
            }
            n_covariate += 1;
        }
        if block.fiml && !block.family.supports_fiml() {
            return Err(Error::Descriptor(format!(
                "FIML unsupported for {}",
                block.family.name()
            )));
        }
        if !block.fiml {
            if let Some(j) = block
                .columns
                .clone()
                .find(|&j| data.observed.column(j).iter().any(|o| !o))
            {
                return Err(Error::MissingNotAllowed {
                    block: block.name.clone(),
                    column: j,
                });
            }
        }
        check_block_values(block, data)?;
    }
    if n_covariate > 1 {
        return Err(Error::Descriptor(
            "at most one covariate block is allowed".into(),
        ));
    }
    if let Some(j) = owner.iter().position(Option::is_none) {
        return Err(Error::Descriptor(format!(
            "column {j} ({}) is not assigned to any block",
            data.column_names[j]
        )));
    }
    Ok(())
}

fn check_block_values(block: &Block, data: &Dataset) -> Result<()> {
    let n_levels = block.n_levels();
    for j in block.columns.clone() {
        for i in 0..data.n_units() {
            if !data.observed[[i, j]] {
                continue;
            }
            let v = data.values[[i, j]];
            let ok = match block.family {
                Family::Binary => v == 0.0 || v == 1.0,
                Family::Categorical => {
                    v >= 0.0 && v.fract() == 0.0 && n_levels.is_none_or(|c| (v as usize) < c)
                }
                _ => true,
            };
            if !ok {
                return Err(Error::Validation(format!(
                    "block '{}' ({}): unit {i}, column {j} has value {v}",
                    block.name, block.family
                )));
            }
        }
    }
    Ok(())
}

/// Maps the observed values of each column in `block` to codes 0..C-1 in
/// ascending order. Columns already coded in 0..n_levels are left as-is
/// when the block sets `n_levels`.
pub fn encode_categorical(data: &Dataset, block: &Block) -> Result<Dataset> {
    let mut out = data.clone();
    for j in block.columns.clone() {
        if j >= data.n_columns() {
            return Err(Error::Descriptor(format!(
                "block '{}' column {j} out of range",
                block.name
            )));
        }
        let mut distinct: Vec<f64> = data
            .values
            .column(j)
            .iter()
            .zip(data.observed.column(j))
            .filter(|(_, &o)| o)
            .map(|(&v, _)| v)
            .collect();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        if distinct.len() > MAX_CATEGORICAL_LEVELS {
            return Err(Error::Validation(format!(
                "column {j} ({}) has {} distinct values; at most {MAX_CATEGORICAL_LEVELS} allowed for a categorical block",
                data.column_names[j],
                distinct.len()
            )));
        }
        if let Some(c) = block.n_levels() {
            if distinct
                .iter()
                .all(|v| v.fract() == 0.0 && *v >= 0.0 && (*v as usize) < c)
            {
                out.levels[j] = Some((0..c).map(|v| v as f64).collect());
                continue;
            }
        }
        for i in 0..data.n_units() {
            if data.observed[[i, j]] {
                let v = data.values[[i, j]];
                let code = distinct.partition_point(|x| *x < v);
                out.values[[i, j]] = code as f64;
            }
        }
        out.levels[j] = Some(distinct);
    }
    Ok(out)
}
