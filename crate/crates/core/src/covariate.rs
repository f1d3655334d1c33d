//! Weighted multinomial logistic regression used as the class prior when the
//! structural model has a covariate block.
//!
//! The objective is `sum_i w_i sum_k tau_ik log softmax_k(beta_k . z_i + b_k)`.
//! Class 0 is held at its warm-start value during optimization, which removes
//! the softmax shift invariance from the Hessian; stored parameters are
//! otherwise unconstrained.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::math::logsumexp;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverMethod {
    Newton,
    Gradient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    pub method: SolverMethod,
    pub max_iter: usize,
    pub step_size: f64,
    pub tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            method: SolverMethod::Newton,
            max_iter: 100,
            step_size: 1e-3,
            tol: 1e-8,
        }
    }
}

impl SolverOptions {
    pub fn from_options(options: &BTreeMap<String, Value>) -> Result<Self> {
        let mut out = SolverOptions::default();
        for (key, value) in options {
            match key.as_str() {
                "method" => {
                    out.method = match value.as_str() {
                        Some("newton") | Some("newton-raphson") => SolverMethod::Newton,
                        Some("gradient") => SolverMethod::Gradient,
                        _ => {
                            return Err(Error::Descriptor(format!(
                                "unknown covariate solver method {value}"
                            )))
                        }
                    }
                }
                "max_iter" => {
                    out.max_iter = value.as_u64().filter(|v| *v >= 1).ok_or_else(|| {
                        Error::Descriptor("max_iter must be a positive integer".into())
                    })? as usize
                }
                "lr" | "step_size" => {
                    out.step_size = value
                        .as_f64()
                        .filter(|v| *v > 0.0)
                        .ok_or_else(|| Error::Descriptor(format!("{key} must be positive")))?
                }
                "tol" => {
                    out.tol = value
                        .as_f64()
                        .filter(|v| *v >= 0.0)
                        .ok_or_else(|| Error::Descriptor("tol must be nonnegative".into()))?
                }
                _ => {}
            }
        }
        Ok(out)
    }
}

/// Multinomial logistic coefficients: `beta` is K×D, `intercept` has length K.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateParams {
    pub beta: Array2<f64>,
    pub intercept: Array1<f64>,
}

impl CovariateParams {
    pub fn zeros(n_classes: usize, n_features: usize) -> Self {
        CovariateParams {
            beta: Array2::zeros((n_classes, n_features)),
            intercept: Array1::zeros(n_classes),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.intercept.len()
    }

    pub fn n_features(&self) -> usize {
        self.beta.ncols()
    }

    /// Coefficients relative to `reference`, whose row becomes zero.
    pub fn rebased(&self, reference: usize) -> CovariateParams {
        let beta_ref = self.beta.row(reference).to_owned();
        let b_ref = self.intercept[reference];
        CovariateParams {
            beta: &self.beta - &beta_ref,
            intercept: self.intercept.mapv(|b| b - b_ref),
        }
    }

    /// N×K matrix of log p(x = k | z).
    pub fn log_prior(&self, z: ArrayView2<'_, f64>) -> Array2<f64> {
        let k = self.n_classes();
        let mut out = Array2::zeros((z.nrows(), k));
        let mut eta = vec![0.0; k];
        for (i, zi) in z.outer_iter().enumerate() {
            self.linear_predictor(zi, &mut eta);
            let lse = logsumexp(&eta);
            for c in 0..k {
                out[[i, c]] = eta[c] - lse;
            }
        }
        out
    }

    fn linear_predictor(&self, z: ArrayView1<'_, f64>, eta: &mut [f64]) {
        for (c, e) in eta.iter_mut().enumerate() {
            *e = self.intercept[c] + self.beta.row(c).dot(&z);
        }
    }
}

/// Weighted multinomial log-likelihood and its gradient over the free classes.
pub struct Objective<'a> {
    z: ArrayView2<'a, f64>,
    weights: ArrayView1<'a, f64>,
    resp: ArrayView2<'a, f64>,
}

impl<'a> Objective<'a> {
    pub fn new(
        z: ArrayView2<'a, f64>,
        weights: ArrayView1<'a, f64>,
        resp: ArrayView2<'a, f64>,
    ) -> Self {
        Objective { z, weights, resp }
    }

    pub fn value(&self, params: &CovariateParams) -> f64 {
        let k = params.n_classes();
        let mut eta = vec![0.0; k];
        let mut total = 0.0;
        for (i, zi) in self.z.outer_iter().enumerate() {
            let w = self.weights[i];
            if w == 0.0 {
                continue;
            }
            params.linear_predictor(zi, &mut eta);
            let lse = logsumexp(&eta);
            let mut unit = 0.0;
            for (c, &e) in eta.iter().enumerate() {
                let t = self.resp[[i, c]];
                if t != 0.0 {
                    unit += t * (e - lse);
                }
            }
            total += w * unit;
        }
        total
    }

    /// Gradient with respect to every class's (beta_k, b_k), laid out as
    /// K blocks of length D+1 with the intercept last.
    pub fn gradient(&self, params: &CovariateParams) -> Vec<f64> {
        self.derivatives(params, false).0
    }

    fn derivatives(
        &self,
        params: &CovariateParams,
        hessian: bool,
    ) -> (Vec<f64>, Option<DMatrix<f64>>) {
        let k = params.n_classes();
        let d = params.n_features();
        let p1 = d + 1;
        let mut grad = vec![0.0; k * p1];
        // Hessian over classes 1..K only.
        let m = (k - 1) * p1;
        let mut hess = hessian.then(|| DMatrix::<f64>::zeros(m, m));
        let mut eta = vec![0.0; k];
        let mut zt = vec![1.0; p1];
        for (i, zi) in self.z.outer_iter().enumerate() {
            let w = self.weights[i];
            if w == 0.0 {
                continue;
            }
            params.linear_predictor(zi, &mut eta);
            let lse = logsumexp(&eta);
            let probs: Vec<f64> = eta.iter().map(|e| (e - lse).exp()).collect();
            let s: f64 = self.resp.row(i).sum();
            zt[..d].copy_from_slice(zi.as_slice().expect("standard layout"));
            for c in 0..k {
                let r = w * (self.resp[[i, c]] - s * probs[c]);
                let g = &mut grad[c * p1..(c + 1) * p1];
                for (gj, zj) in g.iter_mut().zip(&zt) {
                    *gj += r * zj;
                }
            }
            if let Some(h) = hess.as_mut() {
                for a in 1..k {
                    for b in a..k {
                        let coef = if a == b {
                            w * s * (probs[a] - probs[a] * probs[a])
                        } else {
                            -w * s * probs[a] * probs[b]
                        };
                        if coef == 0.0 {
                            continue;
                        }
                        let ro = (a - 1) * p1;
                        let co = (b - 1) * p1;
                        for u in 0..p1 {
                            for v in 0..p1 {
                                // Stores the negative Hessian.
                                h[(ro + u, co + v)] += coef * zt[u] * zt[v];
                            }
                        }
                    }
                }
            }
        }
        if let Some(h) = hess.as_mut() {
            for a in 1..k {
                for b in (a + 1)..k {
                    let ro = (a - 1) * p1;
                    let co = (b - 1) * p1;
                    for u in 0..p1 {
                        for v in 0..p1 {
                            h[(co + v, ro + u)] = h[(ro + u, co + v)];
                        }
                    }
                }
            }
        }
        (grad, hess)
    }
}

fn step(params: &CovariateParams, direction: &[f64], t: f64) -> CovariateParams {
    let d = params.n_features();
    let p1 = d + 1;
    let mut out = params.clone();
    for c in 1..params.n_classes() {
        let dir = &direction[(c - 1) * p1..c * p1];
        for (j, &v) in dir[..d].iter().enumerate() {
            out.beta[[c, j]] += t * v;
        }
        out.intercept[c] += t * dir[d];
    }
    out
}

/// Result of one solver run.
#[derive(Debug, Clone)]
pub struct SolverReport {
    pub params: CovariateParams,
    pub iterations: usize,
    pub gradient_norm: f64,
    /// Objective value at the warm start followed by one value per accepted step.
    pub objective_trace: Vec<f64>,
}

/// Maximizes the weighted multinomial log-likelihood starting from `warm`.
/// Every accepted step satisfies an Armijo condition, so the objective never
/// decreases relative to the warm start.
pub fn fit(
    z: ArrayView2<'_, f64>,
    weights: ArrayView1<'_, f64>,
    resp: ArrayView2<'_, f64>,
    options: &SolverOptions,
    warm: Option<&CovariateParams>,
) -> Result<SolverReport> {
    let k = resp.ncols();
    let d = z.ncols();
    let p1 = d + 1;
    let objective = Objective::new(z, weights, resp);
    let mut params = match warm {
        Some(w) if w.n_classes() == k && w.n_features() == d => w.clone(),
        _ => CovariateParams::zeros(k, d),
    };
    let mut value = objective.value(&params);
    if !value.is_finite() {
        return Err(Error::SolverDivergence { iteration: 0 });
    }
    let mut trace = vec![value];
    let mut grad_norm = f64::INFINITY;
    let mut iterations = 0;
    if k == 1 {
        return Ok(SolverReport {
            params,
            iterations,
            gradient_norm: 0.0,
            objective_trace: trace,
        });
    }
    for it in 0..options.max_iter {
        let want_hessian = options.method == SolverMethod::Newton;
        let (grad_full, neg_hess) = objective.derivatives(&params, want_hessian);
        let grad: Vec<f64> = grad_full[p1..].to_vec();
        grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::SolverDivergence { iteration: it });
        }
        if grad_norm <= options.tol {
            break;
        }
        let (direction, t0, newton) = match neg_hess {
            Some(h) => match h.cholesky() {
                Some(chol) => {
                    let dir = chol.solve(&DVector::from_column_slice(&grad));
                    (dir.as_slice().to_vec(), 1.0, true)
                }
                None => (grad.clone(), options.step_size, false),
            },
            None => (grad.clone(), options.step_size, false),
        };
        let slope: f64 = direction.iter().zip(&grad).map(|(a, b)| a * b).sum();
        if slope <= 0.0 {
            break;
        }
        // Half the Newton decrement predicts the remaining gain; once it is
        // below the objective's rounding level no step can be verified.
        if newton && 0.5 * slope <= 1e-13 * value.abs().max(1.0) {
            break;
        }
        let mut t = t0;
        let mut accepted = None;
        for _ in 0..60 {
            let candidate = step(&params, &direction, t);
            let cand_value = objective.value(&candidate);
            if cand_value.is_finite() && cand_value >= value + 1e-4 * t * slope {
                accepted = Some((candidate, cand_value));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((p, v)) => {
                params = p;
                value = v;
                trace.push(v);
                iterations = it + 1;
            }
            None => break,
        }
    }
    if !params
        .beta
        .iter()
        .chain(params.intercept.iter())
        .all(|v| v.is_finite())
    {
        return Err(Error::SolverDivergence {
            iteration: iterations,
        });
    }
    Ok(SolverReport {
        params,
        iterations,
        gradient_norm: grad_norm,
        objective_trace: trace,
    })
}
