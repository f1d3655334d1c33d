//! Class-conditional emission families: log-probabilities with FIML support,
//! weighted M-steps, parameter counts and sampling.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use ndarray::{s, Array1, Array2, Array3, ArrayD, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::covariate::{self, CovariateParams, SolverOptions};
use crate::data::{Block, Dataset, Family};
use crate::error::{Error, Result};
use crate::math::LN_2PI;

/// Clamp applied to Bernoulli and categorical probabilities after an M-step.
pub const PROB_EPS: f64 = 1e-15;
/// Floor on scalar and diagonal Gaussian variances.
pub const VARIANCE_FLOOR: f64 = 1e-6;
/// Floor on the smallest eigenvalue of a full covariance matrix.
pub const EIGEN_FLOOR: f64 = 1e-6;

const ZERO_WEIGHT: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    Unit,
    /// One variance per class.
    Spherical(Array1<f64>),
    /// K×D variances.
    Diag(Array2<f64>),
    /// K×D×D matrices.
    Full(Array3<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum EmissionParams {
    /// K×D success probabilities.
    Binary {
        pi: Array2<f64>,
    },
    /// K×D×C level probabilities.
    Categorical {
        probs: Array3<f64>,
    },
    Gaussian {
        means: Array2<f64>,
        covariance: Covariance,
    },
    Covariate(CovariateParams),
}

impl EmissionParams {
    pub fn family(&self) -> Family {
        match self {
            EmissionParams::Binary { .. } => Family::Binary,
            EmissionParams::Categorical { .. } => Family::Categorical,
            EmissionParams::Gaussian { covariance, .. } => match covariance {
                Covariance::Unit => Family::GaussianUnit,
                Covariance::Spherical(_) => Family::GaussianSpherical,
                Covariance::Diag(_) => Family::GaussianDiag,
                Covariance::Full(_) => Family::GaussianFull,
            },
            EmissionParams::Covariate(_) => Family::Covariate,
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            EmissionParams::Binary { pi } => pi.nrows(),
            EmissionParams::Categorical { probs } => probs.dim().0,
            EmissionParams::Gaussian { means, .. } => means.nrows(),
            EmissionParams::Covariate(p) => p.n_classes(),
        }
    }

    /// Number of data columns the block consumes.
    pub fn n_features(&self) -> usize {
        match self {
            EmissionParams::Binary { pi } => pi.ncols(),
            EmissionParams::Categorical { probs } => probs.dim().1,
            EmissionParams::Gaussian { means, .. } => means.ncols(),
            EmissionParams::Covariate(p) => p.n_features(),
        }
    }

    /// Free parameter count. Covariate coefficients are counted with one
    /// reference class fixed.
    pub fn n_parameters(&self) -> usize {
        let k = self.n_classes();
        let d = self.n_features();
        match self {
            EmissionParams::Binary { .. } => k * d,
            EmissionParams::Categorical { probs } => k * d * (probs.dim().2 - 1),
            EmissionParams::Gaussian { covariance, .. } => match covariance {
                Covariance::Unit => k * d,
                Covariance::Spherical(_) => k * d + k,
                Covariance::Diag(_) => 2 * k * d,
                Covariance::Full(_) => k * d + k * d * (d + 1) / 2,
            },
            EmissionParams::Covariate(_) => (k - 1) * (d + 1),
        }
    }

    /// Named parameter arrays with classes on the first axis.
    pub fn arrays(&self) -> Vec<(&'static str, ArrayD<f64>)> {
        match self {
            EmissionParams::Binary { pi } => vec![("pi", pi.clone().into_dyn())],
            EmissionParams::Categorical { probs } => vec![("probs", probs.clone().into_dyn())],
            EmissionParams::Gaussian { means, covariance } => {
                let mut out = vec![("means", means.clone().into_dyn())];
                match covariance {
                    Covariance::Unit => {}
                    Covariance::Spherical(v) => out.push(("variances", v.clone().into_dyn())),
                    Covariance::Diag(v) => out.push(("variances", v.clone().into_dyn())),
                    Covariance::Full(c) => out.push(("covariances", c.clone().into_dyn())),
                }
                out
            }
            EmissionParams::Covariate(p) => vec![
                ("beta", p.beta.clone().into_dyn()),
                ("intercept", p.intercept.clone().into_dyn()),
            ],
        }
    }

    /// Inverse of [`arrays`](Self::arrays).
    pub fn from_arrays(family: Family, mut arrays: BTreeMap<String, ArrayD<f64>>) -> Result<Self> {
        fn take<D: ndarray::Dimension>(
            arrays: &mut BTreeMap<String, ArrayD<f64>>,
            name: &str,
        ) -> Result<ndarray::Array<f64, D>> {
            let a = arrays
                .remove(name)
                .ok_or_else(|| Error::Shape(format!("missing parameter array '{name}'")))?;
            a.into_dimensionality::<D>()
                .map_err(|e| Error::Shape(format!("parameter '{name}': {e}")))
        }
        let out = match family {
            Family::Binary => EmissionParams::Binary {
                pi: take(&mut arrays, "pi")?,
            },
            Family::Categorical => EmissionParams::Categorical {
                probs: take(&mut arrays, "probs")?,
            },
            Family::GaussianUnit => EmissionParams::Gaussian {
                means: take(&mut arrays, "means")?,
                covariance: Covariance::Unit,
            },
            Family::GaussianSpherical => EmissionParams::Gaussian {
                means: take(&mut arrays, "means")?,
                covariance: Covariance::Spherical(take(&mut arrays, "variances")?),
            },
            Family::GaussianDiag => EmissionParams::Gaussian {
                means: take(&mut arrays, "means")?,
                covariance: Covariance::Diag(take(&mut arrays, "variances")?),
            },
            Family::GaussianFull => EmissionParams::Gaussian {
                means: take(&mut arrays, "means")?,
                covariance: Covariance::Full(take(&mut arrays, "covariances")?),
            },
            Family::Covariate => EmissionParams::Covariate(CovariateParams {
                beta: take(&mut arrays, "beta")?,
                intercept: take(&mut arrays, "intercept")?,
            }),
        };
        out.check_shapes()?;
        Ok(out)
    }

    fn check_shapes(&self) -> Result<()> {
        let k = self.n_classes();
        let d = self.n_features();
        let ok = match self {
            EmissionParams::Gaussian { covariance, .. } => match covariance {
                Covariance::Unit => true,
                Covariance::Spherical(v) => v.len() == k,
                Covariance::Diag(v) => v.dim() == (k, d),
                Covariance::Full(c) => c.dim() == (k, d, d),
            },
            EmissionParams::Covariate(p) => p.intercept.len() == p.beta.nrows(),
            EmissionParams::Categorical { probs } => probs.dim().2 >= 1,
            EmissionParams::Binary { .. } => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "inconsistent {} parameter shapes",
                self.family()
            )))
        }
    }

    /// Reorders classes so that new class `k` is old class `perm[k]`.
    pub fn permute_classes(&self, perm: &[usize]) -> EmissionParams {
        let arrays = self
            .arrays()
            .into_iter()
            .map(|(name, a)| (name.to_string(), a.select(Axis(0), perm)))
            .collect();
        EmissionParams::from_arrays(self.family(), arrays).expect("permutation preserves shapes")
    }

    /// N×K matrix of class-conditional log-probabilities of `block`'s columns.
    ///
    /// For FIML blocks the product runs over observed dimensions only; a unit
    /// with no observed dimension contributes log 1 = 0. For the covariate
    /// family this is the log-softmax class prior.
    pub fn log_prob(&self, block: &Block, data: &Dataset) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((data.n_units(), self.n_classes()));
        self.add_log_prob(block, data, &mut out)?;
        Ok(out)
    }

    /// Adds this block's log-probabilities into `out`.
    pub fn add_log_prob(&self, block: &Block, data: &Dataset, out: &mut Array2<f64>) -> Result<()> {
        check_block(self, block, data)?;
        let y = data.values().slice_move(s![.., block.columns.clone()]);
        let obs = data.observed().slice_move(s![.., block.columns.clone()]);
        let k = self.n_classes();
        let d = self.n_features();
        match self {
            EmissionParams::Binary { pi } => {
                let log_p = pi.mapv(f64::ln);
                let log_q = pi.mapv(|p| (1.0 - p).ln());
                for i in 0..y.nrows() {
                    for c in 0..k {
                        let mut acc = 0.0;
                        for j in 0..d {
                            if obs[[i, j]] {
                                let v = y[[i, j]];
                                acc += if v == 1.0 {
                                    log_p[[c, j]]
                                } else if v == 0.0 {
                                    log_q[[c, j]]
                                } else {
                                    v * log_p[[c, j]] + (1.0 - v) * log_q[[c, j]]
                                };
                            }
                        }
                        out[[i, c]] += acc;
                    }
                }
            }
            EmissionParams::Categorical { probs } => {
                let n_levels = probs.dim().2;
                let log_p = probs.mapv(f64::ln);
                for i in 0..y.nrows() {
                    for j in 0..d {
                        if !obs[[i, j]] {
                            continue;
                        }
                        let level = y[[i, j]] as usize;
                        if level >= n_levels {
                            return Err(Error::Validation(format!(
                                "block '{}': level {level} outside 0..{n_levels}",
                                block.name
                            )));
                        }
                        for c in 0..k {
                            out[[i, c]] += log_p[[c, j, level]];
                        }
                    }
                }
            }
            EmissionParams::Gaussian { means, covariance } => match covariance {
                Covariance::Full(cov) => {
                    for c in 0..k {
                        let chol = cholesky(cov.index_axis(Axis(0), c))?;
                        let log_det: f64 = 2.0
                            * chol
                                .l_dirty()
                                .diagonal()
                                .iter()
                                .map(|v| v.ln())
                                .sum::<f64>();
                        let constant = -0.5 * (d as f64 * LN_2PI + log_det);
                        let mut diff = DVector::zeros(d);
                        for i in 0..y.nrows() {
                            for j in 0..d {
                                diff[j] = y[[i, j]] - means[[c, j]];
                            }
                            let sol = chol.l().solve_lower_triangular(&diff).expect("nonsingular");
                            out[[i, c]] += constant - 0.5 * sol.norm_squared();
                        }
                    }
                }
                _ => {
                    let variance = |c: usize, j: usize| match covariance {
                        Covariance::Unit => 1.0,
                        Covariance::Spherical(v) => v[c],
                        Covariance::Diag(v) => v[[c, j]],
                        Covariance::Full(_) => unreachable!(),
                    };
                    let mut inv_var = Array2::zeros((k, d));
                    let mut log_norm = Array2::zeros((k, d));
                    for c in 0..k {
                        for j in 0..d {
                            let v = variance(c, j);
                            inv_var[[c, j]] = 1.0 / v;
                            log_norm[[c, j]] = -0.5 * (LN_2PI + v.ln());
                        }
                    }
                    for i in 0..y.nrows() {
                        for c in 0..k {
                            let mut acc = 0.0;
                            for j in 0..d {
                                if obs[[i, j]] {
                                    let r = y[[i, j]] - means[[c, j]];
                                    acc += log_norm[[c, j]] - 0.5 * r * r * inv_var[[c, j]];
                                }
                            }
                            out[[i, c]] += acc;
                        }
                    }
                }
            },
            EmissionParams::Covariate(p) => {
                *out += &p.log_prior(y);
            }
        }
        Ok(())
    }

    /// Draws one observation of this block for a unit in class `class`.
    pub fn sample<R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> Result<Vec<f64>> {
        let d = self.n_features();
        match self {
            EmissionParams::Binary { pi } => Ok((0..d)
                .map(|j| {
                    if rng.random::<f64>() < pi[[class, j]] {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect()),
            EmissionParams::Categorical { probs } => Ok((0..d)
                .map(|j| {
                    let row = probs.slice(s![class, j, ..]);
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut level = row.len() - 1;
                    for (c, p) in row.iter().enumerate() {
                        acc += p;
                        if u < acc {
                            level = c;
                            break;
                        }
                    }
                    level as f64
                })
                .collect()),
            EmissionParams::Gaussian { means, covariance } => {
                let noise: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let mu = means.row(class);
                Ok(match covariance {
                    Covariance::Unit => (0..d).map(|j| mu[j] + noise[j]).collect(),
                    Covariance::Spherical(v) => {
                        let sd = v[class].sqrt();
                        (0..d).map(|j| mu[j] + sd * noise[j]).collect()
                    }
                    Covariance::Diag(v) => (0..d)
                        .map(|j| mu[j] + v[[class, j]].sqrt() * noise[j])
                        .collect(),
                    Covariance::Full(cov) => {
                        let chol = cholesky(cov.index_axis(Axis(0), class))?;
                        let x = chol.l() * DVector::from_vec(noise);
                        (0..d).map(|j| mu[j] + x[j]).collect()
                    }
                })
            }
            EmissionParams::Covariate(_) => Err(Error::Unsupported(
                "covariates are exogenous and have no modeled distribution to sample from".into(),
            )),
        }
    }
}

fn check_block(params: &EmissionParams, block: &Block, data: &Dataset) -> Result<()> {
    if params.family() != block.family {
        return Err(Error::Shape(format!(
            "block '{}' declares {} but parameters are {}",
            block.name,
            block.family,
            params.family()
        )));
    }
    if block.columns.len() != params.n_features() || block.columns.end > data.n_columns() {
        return Err(Error::Shape(format!(
            "block '{}' covers {} columns but parameters expect {} (dataset has {})",
            block.name,
            block.columns.len(),
            params.n_features(),
            data.n_columns()
        )));
    }
    if !block.fiml || !block.family.supports_fiml() {
        let obs = data.observed();
        for j in block.columns.clone() {
            if obs.column(j).iter().any(|o| !o) {
                return Err(Error::MissingNotAllowed {
                    block: block.name.clone(),
                    column: j,
                });
            }
        }
    }
    Ok(())
}

fn cholesky(cov: ndarray::ArrayView2<'_, f64>) -> Result<Cholesky<f64, Dyn>> {
    let m = crate::math::to_dmatrix(cov);
    m.cholesky()
        .ok_or_else(|| Error::Validation("covariance matrix is not positive definite".into()))
}

/// Number of categorical levels a block uses: the explicit `n_levels` option
/// or one more than the largest observed code.
pub fn resolve_levels(block: &Block, data: &Dataset) -> usize {
    if let Some(c) = block.n_levels() {
        return c;
    }
    let y = data.values();
    let obs = data.observed();
    let mut max = 0usize;
    for j in block.columns.clone() {
        for i in 0..data.n_units() {
            if obs[[i, j]] {
                max = max.max(y[[i, j]] as usize);
            }
        }
    }
    max + 1
}

/// Weighted complete-data maximum likelihood update of one block.
///
/// `resp` is the N×K responsibility matrix; unit weights come from `data`.
/// `warm` seeds the iterative covariate solver and is ignored otherwise.
pub fn m_step(
    block: &Block,
    data: &Dataset,
    resp: ArrayView2<'_, f64>,
    warm: Option<&EmissionParams>,
) -> Result<EmissionParams> {
    if resp.nrows() != data.n_units() {
        return Err(Error::Shape(format!(
            "{} responsibility rows for {} units",
            resp.nrows(),
            data.n_units()
        )));
    }
    if block.columns.end > data.n_columns() {
        return Err(Error::Shape(format!(
            "block '{}' exceeds the dataset's {} columns",
            block.name,
            data.n_columns()
        )));
    }
    if !block.fiml && data.has_missing_in(block.columns.clone()) {
        let j = block
            .columns
            .clone()
            .find(|&j| data.observed().column(j).iter().any(|o| !o))
            .unwrap_or(block.columns.start);
        return Err(Error::MissingNotAllowed {
            block: block.name.clone(),
            column: j,
        });
    }
    let y = data.values().slice_move(s![.., block.columns.clone()]);
    let obs = data.observed().slice_move(s![.., block.columns.clone()]);
    let w = data.weights();
    let k = resp.ncols();
    let d = block.n_columns();
    let n = data.n_units();

    if block.family == Family::Covariate {
        let options = SolverOptions::from_options(&block.options)?;
        let warm = match warm {
            Some(EmissionParams::Covariate(p)) => Some(p),
            _ => None,
        };
        let report = covariate::fit(y, w, resp, &options, warm)?;
        return Ok(EmissionParams::Covariate(report.params));
    }

    // Per class and dimension: sum of w*tau over observed cells.
    let mut denom = Array2::<f64>::zeros((k, d));
    for i in 0..n {
        for c in 0..k {
            let r = w[i] * resp[[i, c]];
            if r == 0.0 {
                continue;
            }
            for j in 0..d {
                if obs[[i, j]] {
                    denom[[c, j]] += r;
                }
            }
        }
    }
    for c in 0..k {
        if denom.row(c).iter().all(|v| v.abs() < ZERO_WEIGHT) {
            return Err(Error::DegenerateClass {
                class: c,
                block: Some(block.name.clone()),
            });
        }
    }
    let usable = |c: usize, j: usize| denom[[c, j]].abs() >= ZERO_WEIGHT;

    let mut means = Array2::<f64>::zeros((k, d));
    let weighted_mean = |means: &mut Array2<f64>| {
        for i in 0..n {
            for c in 0..k {
                let r = w[i] * resp[[i, c]];
                if r == 0.0 {
                    continue;
                }
                for j in 0..d {
                    if obs[[i, j]] {
                        means[[c, j]] += r * y[[i, j]];
                    }
                }
            }
        }
        for c in 0..k {
            for j in 0..d {
                means[[c, j]] = if usable(c, j) {
                    means[[c, j]] / denom[[c, j]]
                } else {
                    0.0
                };
            }
        }
    };

    match block.family {
        Family::Binary => {
            weighted_mean(&mut means);
            for c in 0..k {
                for j in 0..d {
                    if !usable(c, j) {
                        means[[c, j]] = 0.5;
                    }
                }
            }
            Ok(EmissionParams::Binary {
                pi: means.mapv(|p| p.clamp(PROB_EPS, 1.0 - PROB_EPS)),
            })
        }
        Family::Categorical => {
            let n_levels = resolve_levels(block, data);
            let mut probs = Array3::<f64>::zeros((k, d, n_levels));
            for i in 0..n {
                for j in 0..d {
                    if !obs[[i, j]] {
                        continue;
                    }
                    let level = y[[i, j]] as usize;
                    if level >= n_levels {
                        return Err(Error::Validation(format!(
                            "block '{}': level {level} outside 0..{n_levels}",
                            block.name
                        )));
                    }
                    for c in 0..k {
                        probs[[c, j, level]] += w[i] * resp[[i, c]];
                    }
                }
            }
            for c in 0..k {
                for j in 0..d {
                    let mut row = probs.slice_mut(s![c, j, ..]);
                    if usable(c, j) {
                        row /= denom[[c, j]];
                    } else {
                        row.fill(1.0 / n_levels as f64);
                    }
                    clamp_simplex(row.as_slice_mut().expect("contiguous"));
                }
            }
            Ok(EmissionParams::Categorical { probs })
        }
        Family::GaussianUnit | Family::GaussianSpherical | Family::GaussianDiag => {
            weighted_mean(&mut means);
            // Weighted squared deviations per class and dimension.
            let mut sq = Array2::<f64>::zeros((k, d));
            if block.family != Family::GaussianUnit {
                for i in 0..n {
                    for c in 0..k {
                        let r = w[i] * resp[[i, c]];
                        if r == 0.0 {
                            continue;
                        }
                        for j in 0..d {
                            if obs[[i, j]] {
                                let e = y[[i, j]] - means[[c, j]];
                                sq[[c, j]] += r * e * e;
                            }
                        }
                    }
                }
            }
            let covariance = match block.family {
                Family::GaussianUnit => Covariance::Unit,
                Family::GaussianSpherical => Covariance::Spherical(Array1::from_shape_fn(k, |c| {
                    let num: f64 = sq.row(c).sum();
                    let den: f64 = denom.row(c).sum();
                    (num / den).max(VARIANCE_FLOOR)
                })),
                _ => Covariance::Diag(Array2::from_shape_fn((k, d), |(c, j)| {
                    if usable(c, j) {
                        (sq[[c, j]] / denom[[c, j]]).max(VARIANCE_FLOOR)
                    } else {
                        1.0
                    }
                })),
            };
            Ok(EmissionParams::Gaussian { means, covariance })
        }
        Family::GaussianFull => {
            weighted_mean(&mut means);
            let mut cov = Array3::<f64>::zeros((k, d, d));
            for c in 0..k {
                let total = denom[[c, 0]];
                let mut m = DMatrix::<f64>::zeros(d, d);
                for i in 0..n {
                    let r = w[i] * resp[[i, c]];
                    if r == 0.0 {
                        continue;
                    }
                    for a in 0..d {
                        let ea = y[[i, a]] - means[[c, a]];
                        for b in a..d {
                            m[(a, b)] += r * ea * (y[[i, b]] - means[[c, b]]);
                        }
                    }
                }
                for a in 0..d {
                    for b in a..d {
                        m[(a, b)] /= total;
                        m[(b, a)] = m[(a, b)];
                    }
                }
                let min_eig = SymmetricEigen::new(m.clone())
                    .eigenvalues
                    .iter()
                    .copied()
                    .fold(f64::INFINITY, f64::min);
                if !(min_eig >= EIGEN_FLOOR) {
                    let shift = if min_eig.is_finite() {
                        EIGEN_FLOOR - min_eig
                    } else {
                        1.0
                    };
                    for a in 0..d {
                        m[(a, a)] += shift;
                    }
                }
                for a in 0..d {
                    for b in 0..d {
                        cov[[c, a, b]] = m[(a, b)];
                    }
                }
            }
            Ok(EmissionParams::Gaussian {
                means,
                covariance: Covariance::Full(cov),
            })
        }
        Family::Covariate => unreachable!(),
    }
}

/// Keeps a probability vector on the simplex with every entry at least
/// [`PROB_EPS`]. Vectors already satisfying the floor are only renormalized.
fn clamp_simplex(row: &mut [f64]) {
    let c = row.len() as f64;
    for v in row.iter_mut() {
        *v = v.max(0.0);
    }
    let sum: f64 = row.iter().sum();
    if sum > 0.0 {
        row.iter_mut().for_each(|v| *v /= sum);
    } else {
        row.iter_mut().for_each(|v| *v = 1.0 / c);
    }
    if row.iter().any(|v| *v < PROB_EPS) {
        for v in row.iter_mut() {
            *v = (1.0 - c * PROB_EPS) * *v + PROB_EPS;
        }
    }
}

/// Flattens parameter arrays into (name, class, flat index, value) rows.
pub fn flatten(params: &EmissionParams) -> Vec<(&'static str, usize, usize, f64)> {
    let mut out = Vec::new();
    for (name, a) in params.arrays() {
        for (c, sub) in a.outer_iter().enumerate() {
            for (idx, v) in sub.iter().enumerate() {
                out.push((name, c, idx, *v));
            }
        }
    }
    out
}

/// Builds an N×K one-hot matrix from class labels.
pub fn one_hot(labels: &[usize], k: usize) -> Array2<f64> {
    let mut out = Array2::zeros((labels.len(), k));
    for (i, &c) in labels.iter().enumerate() {
        out[[i, c]] = 1.0;
    }
    out
}
