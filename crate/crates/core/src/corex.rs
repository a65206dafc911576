//! Linear total-correlation explanation for Gaussian data.
//!
//! Latent factors are `z = W x + eps` with `eps ~ N(0, I_m)` and `x`
//! standardized, so every quantity needed here has a closed form in terms of
//! the correlation matrix `C`:
//!
//! ```text
//! M          = I_m + W C W^T           covariance of z
//! r_i        = W C e_i                 Cov(z, x_i)
//! Var(x_i|z) = 1 - r_i^T M^-1 r_i
//! ```
//!
//! The fitted objective is
//!
//! ```text
//! L(W) = 1/2 sum_i log Var(x_i|z) + 1/2 sum_j log M_jj + lambda sum_i Q_i
//! Q_i  = 1/2 sum_j log(M_jj - r_ij^2) - 1/2 log det M - 1/2 log Var(x_i|z)
//! ```
//!
//! i.e. `TC(X|Z) + TC(Z) + lambda * sum_i TC(Z|X_i)` without the
//! `W`-independent `-1/2 log det C` (see [`dropped_constant`]).

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ingest::{standardize, DataMatrix, Scaler};
use crate::linalg;
use crate::{Error, Result};

/// Lower clamp on the conditional variance `Var(x_i|z)`.
pub const COND_VAR_FLOOR: f64 = 1e-8;
/// Upper clamp on the squared factor/feature correlation.
pub const RHO2_CEIL: f64 = 1.0 - 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorexOptions {
    pub lr: f64,
    pub max_iter: usize,
    /// Relative objective change over `window` iterations that counts as converged.
    pub tol: f64,
    pub seed: u64,
    /// Weight of the modularity terms.
    pub lambda: f64,
    /// Ridge added to `C` when it is singular or `p > N`.
    pub ridge: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Iterations of plain Adam before steps must stop increasing the objective.
    pub burn_in: usize,
    pub window: usize,
}

impl Default for CorexOptions {
    fn default() -> Self {
        CorexOptions {
            lr: 5e-3,
            max_iter: 10_000,
            tol: 1e-7,
            seed: 0,
            lambda: 1.0,
            ridge: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            burn_in: 100,
            window: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorexModel {
    #[serde(with = "crate::serde_rows")]
    pub w: Array2<f64>,
    pub m: usize,
    pub p: usize,
    pub scaler: Scaler,
    /// Names of the `p` modelled features (after the scaler's drops).
    pub feature_names: Vec<String>,
    /// Objective value at every accepted iterate.
    pub trace: Vec<f64>,
    pub seed: u64,
    pub lambda: f64,
    /// Ridge actually applied to the correlation matrix (0 when none).
    pub ridge: f64,
    pub converged: bool,
}

/// Per-cluster factor summary: MI matrix, TC explained and factor order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorReport {
    pub cluster: usize,
    pub m: usize,
    pub tc: Vec<f64>,
    pub order: Vec<usize>,
    /// `mi[j][i] = I(X_i; Z_j)` in nats.
    #[serde(with = "crate::serde_rows")]
    pub mi: Array2<f64>,
    pub feature_names: Vec<String>,
}

impl FactorReport {
    pub fn new(cluster: usize, mi: Array2<f64>, tc: Vec<f64>, feature_names: Vec<String>) -> Self {
        let order = descending_order(&tc);
        FactorReport {
            cluster,
            m: mi.nrows(),
            tc,
            order,
            mi,
            feature_names,
        }
    }

    /// MI rows of the factors in TC order.
    pub fn ordered_mi(&self) -> Vec<Array1<f64>> {
        self.order.iter().map(|&j| self.mi.row(j).to_owned()).collect()
    }
}

/// Indices sorting `values` descending; ties keep ascending index order.
pub fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

/// `-1/2 log det C`, the constant left out of [`corex_objective`].
///
/// Adding it turns the objective into a sum of Gaussian total correlations,
/// which is nonnegative.
pub fn dropped_constant(c: ArrayView2<'_, f64>) -> Result<f64> {
    Ok(-0.5 * linalg::log_det_spd(c)?)
}

/// Shared intermediate quantities of one objective evaluation.
struct Terms {
    /// `W C`, column `i` is `r_i`.
    r: Array2<f64>,
    m_diag: Array1<f64>,
    m_inv: Array2<f64>,
    log_det_m: f64,
    /// `M^-1 W C`.
    a: Array2<f64>,
    /// Clamped conditional variances and whether the clamp was active.
    v: Vec<(f64, bool)>,
    /// `s[j][i] = M_jj - r_ij^2`.
    s: Array2<f64>,
}

fn check_shapes(w: ArrayView2<'_, f64>, c: ArrayView2<'_, f64>) -> Result<()> {
    if c.nrows() != c.ncols() || c.nrows() != w.ncols() {
        return Err(Error::invalid(format!(
            "W is {}x{} but C is {}x{}",
            w.nrows(),
            w.ncols(),
            c.nrows(),
            c.ncols()
        )));
    }
    Ok(())
}

fn terms(w: ArrayView2<'_, f64>, c: ArrayView2<'_, f64>) -> Result<Terms> {
    check_shapes(w, c)?;
    let m = w.nrows();
    let r = w.dot(&c);
    let mut mm = r.dot(&w.t());
    for j in 0..m {
        mm[[j, j]] += 1.0;
        for k in 0..j {
            let avg = 0.5 * (mm[[j, k]] + mm[[k, j]]);
            mm[[j, k]] = avg;
            mm[[k, j]] = avg;
        }
    }
    let l = linalg::cholesky(mm.view())
        .ok_or_else(|| Error::numeric("I + W C W^T is not positive definite"))?;
    let log_det_m = 2.0 * l.diag().iter().map(|d| d.ln()).sum::<f64>();
    let m_inv = linalg::spd_inverse(mm.view())?;
    let a = m_inv.dot(&r);
    let v = (0..w.ncols())
        .map(|i| {
            let q: f64 = r.column(i).dot(&a.column(i));
            let raw = 1.0 - q;
            if raw < COND_VAR_FLOOR {
                (COND_VAR_FLOOR, true)
            } else {
                (raw, false)
            }
        })
        .collect();
    let m_diag = mm.diag().to_owned();
    let mut s = r.mapv(|x| -x * x);
    for (j, mut row) in s.outer_iter_mut().enumerate() {
        row += m_diag[j];
    }
    if let Some(bad) = s.iter().find(|&&x| !(x > 0.0)) {
        return Err(Error::numeric(format!("log argument M_jj - r_ij^2 = {bad} is not positive")));
    }
    Ok(Terms {
        r,
        m_diag,
        m_inv,
        log_det_m,
        a,
        v,
        s,
    })
}

fn objective_from(t: &Terms, lambda: f64) -> f64 {
    let sum_log_v: f64 = t.v.iter().map(|(v, _)| v.ln()).sum();
    let tc_z_part: f64 = 0.5 * t.m_diag.iter().map(|d| d.ln()).sum::<f64>();
    let q: f64 = t
        .s
        .axis_iter(Axis(1))
        .zip(&t.v)
        .map(|(col, (v, _))| 0.5 * col.iter().map(|x| x.ln()).sum::<f64>() - 0.5 * t.log_det_m - 0.5 * v.ln())
        .sum();
    0.5 * sum_log_v + tc_z_part + lambda * q
}

fn gradient_from(t: &Terms, c: ArrayView2<'_, f64>, lambda: f64) -> Array2<f64> {
    let (m, p) = t.r.dim();
    // 1/2 sum_j log M_jj
    let mut g = t.r.clone();
    for (j, mut row) in g.outer_iter_mut().enumerate() {
        row /= t.m_diag[j];
    }
    // (1 - lambda)/2 sum_i log Var(x_i|z); the clamp zeroes the derivative
    let coef = 1.0 - lambda;
    if coef != 0.0 {
        let gi = Array1::from_iter(t.v.iter().map(|&(v, clamped)| if clamped { 0.0 } else { 1.0 / v }));
        let ag = &t.a * &gi.view().insert_axis(Axis(0));
        let outer = ag.dot(&t.a.t()).dot(&t.r);
        let lin = ag.dot(&c);
        g.scaled_add(coef, &(outer - lin));
    }
    // lambda/2 sum_ij log(M_jj - r_ij^2)
    let inv_s = t.s.mapv(|x| 1.0 / x);
    let row_sums = inv_s.sum_axis(Axis(1));
    let mut diag_part = t.r.clone();
    for (j, mut row) in diag_part.outer_iter_mut().enumerate() {
        row *= row_sums[j];
    }
    let weighted = (&inv_s * &t.r).dot(&c);
    g.scaled_add(lambda, &(diag_part - weighted));
    // -lambda p/2 log det M
    g.scaled_add(-lambda * p as f64, &t.m_inv.dot(&t.r));
    debug_assert_eq!(g.dim(), (m, p));
    g
}

/// The objective `L(W)` for correlation matrix `C` with modularity weight `lambda`.
pub fn corex_objective(w: ArrayView2<'_, f64>, c: ArrayView2<'_, f64>, lambda: f64) -> Result<f64> {
    Ok(objective_from(&terms(w, c)?, lambda))
}

/// Analytic gradient `dL/dW`.
pub fn corex_gradient(w: ArrayView2<'_, f64>, c: ArrayView2<'_, f64>, lambda: f64) -> Result<Array2<f64>> {
    Ok(gradient_from(&terms(w, c)?, c, lambda))
}

/// Objective and gradient from a single set of intermediates.
pub fn objective_and_gradient(
    w: ArrayView2<'_, f64>,
    c: ArrayView2<'_, f64>,
    lambda: f64,
) -> Result<(f64, Array2<f64>)> {
    let t = terms(w, c)?;
    Ok((objective_from(&t, lambda), gradient_from(&t, c, lambda)))
}

/// Sample correlation of standardized data, ridged when singular or `p > N`.
///
/// The ridge is applied as `(C + delta I) / (1 + delta)` so the diagonal stays 1.
/// Returns the matrix and the ridge applied.
pub fn correlation(z: ArrayView2<'_, f64>, ridge: f64) -> (Array2<f64>, f64) {
    let (n, p) = z.dim();
    let mut c = z.t().dot(&z) / n as f64;
    for i in 0..p {
        for j in 0..i {
            let avg = 0.5 * (c[[i, j]] + c[[j, i]]);
            c[[i, j]] = avg;
            c[[j, i]] = avg;
        }
    }
    if p <= n && linalg::cholesky(c.view()).is_some() {
        return (c, 0.0);
    }
    for i in 0..p {
        c[[i, i]] += ridge;
    }
    (c / (1.0 + ridge), ridge)
}

struct Adam {
    m: Array2<f64>,
    v: Array2<f64>,
    b1: f64,
    b2: f64,
    step: i32,
}

impl Adam {
    fn new(shape: (usize, usize), b1: f64, b2: f64) -> Self {
        Adam {
            m: Array2::zeros(shape),
            v: Array2::zeros(shape),
            b1,
            b2,
            step: 0,
        }
    }

    /// Update the moments with `grad` and return the bias-corrected direction.
    fn direction(&mut self, grad: &Array2<f64>) -> Array2<f64> {
        self.step += 1;
        let (b1, b2) = (self.b1, self.b2);
        Zip::from(&mut self.m).and(grad).for_each(|m, &g| *m = b1 * *m + (1.0 - b1) * g);
        Zip::from(&mut self.v).and(grad).for_each(|v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        Zip::from(&self.m)
            .and(&self.v)
            .map_collect(|&m, &v| (m / c1) / ((v / c2).sqrt() + 1e-8))
    }
}

/// Result of optimizing the objective for a fixed correlation matrix.
#[derive(Debug, Clone)]
pub struct Optimized {
    pub w: Array2<f64>,
    pub trace: Vec<f64>,
    pub converged: bool,
}

/// Minimize [`corex_objective`] for `m` factors.
///
/// Plain Adam for `burn_in` iterations; afterwards a step that would raise
/// the objective is retried with a halved step size, so the trace is
/// non-increasing from there on.
pub fn optimize(c: ArrayView2<'_, f64>, m: usize, opts: &CorexOptions) -> Result<Optimized> {
    let p = c.nrows();
    if m == 0 {
        return Err(Error::invalid("number of factors must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let normal = Normal::new(0.0, 1.0 / (p as f64).sqrt()).expect("valid std");
    let mut w = Array2::from_shape_simple_fn((m, p), || normal.sample(&mut rng));
    let mut adam = Adam::new((m, p), opts.beta1, opts.beta2);
    let (mut obj, mut grad) = objective_and_gradient(w.view(), c, opts.lambda)?;
    let mut trace = vec![obj];
    let mut lr = opts.lr;
    let mut converged = false;
    for iter in 0..opts.max_iter {
        let dir = adam.direction(&grad);
        if iter < opts.burn_in {
            w.scaled_add(-lr, &dir);
            (obj, grad) = objective_and_gradient(w.view(), c, opts.lambda)?;
        } else {
            let mut accepted = false;
            for _ in 0..40 {
                let cand = &w - &(&dir * lr);
                let (o, g) = objective_and_gradient(cand.view(), c, opts.lambda)?;
                if o <= obj {
                    w = cand;
                    obj = o;
                    grad = g;
                    accepted = true;
                    lr = (lr * 1.05).min(opts.lr);
                    break;
                }
                lr *= 0.5;
            }
            if !accepted {
                converged = true;
                break;
            }
        }
        if !obj.is_finite() {
            return Err(Error::numeric("objective diverged"));
        }
        trace.push(obj);
        let t = trace.len();
        if iter >= opts.burn_in && t > opts.window {
            let past = trace[t - 1 - opts.window];
            if (past - obj).abs() <= opts.tol * obj.abs().max(1e-12) {
                converged = true;
                break;
            }
        }
    }
    Ok(Optimized { w, trace, converged })
}

/// Standardize `data` and fit `m` factors.
///
/// Returns the model and the correlation matrix it was fitted on, which
/// [`factor_feature_mi`] and [`tc_explained`] take.
pub fn fit_linear_corex(data: &DataMatrix, m: usize, opts: &CorexOptions) -> Result<(CorexModel, Array2<f64>)> {
    if m == 0 {
        return Err(Error::invalid("number of factors must be at least 1"));
    }
    if data.nrows() < 2 {
        return Err(Error::invalid(format!(
            "fitting needs at least 2 samples, got {}",
            data.nrows()
        )));
    }
    let (z, scaler) = standardize(data)?;
    let (c, ridge) = correlation(z.values.view(), opts.ridge);
    let fit = optimize(c.view(), m, opts)?;
    if fit.w.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite weights"));
    }
    let model = CorexModel {
        m,
        p: fit.w.ncols(),
        w: fit.w,
        scaler,
        feature_names: z.column_names,
        trace: fit.trace,
        seed: opts.seed,
        lambda: opts.lambda,
        ridge,
        converged: fit.converged,
    };
    Ok((model, c))
}

/// `I(X_i; Z_j) = -1/2 log(1 - rho_ij^2)` with `rho_ij^2 = r_ij^2 / M_jj`, as an `m x p` matrix.
pub fn mi_matrix(w: ArrayView2<'_, f64>, c: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    check_shapes(w, c)?;
    let r = w.dot(&c);
    let m_diag = Array1::from_iter(
        w.outer_iter()
            .zip(r.outer_iter())
            .map(|(wj, rj)| 1.0 + wj.dot(&rj)),
    );
    let mut mi = r;
    for (j, mut row) in mi.outer_iter_mut().enumerate() {
        row.mapv_inplace(|x| {
            let rho2 = (x * x / m_diag[j]).clamp(0.0, RHO2_CEIL);
            -0.5 * (1.0 - rho2).ln()
        });
    }
    Ok(mi)
}

pub fn factor_feature_mi(model: &CorexModel, c: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    mi_matrix(model.w.view(), c)
}

/// Per-factor TC explained, `sum_i I(X_i;Z_j) - 1/2 log M_jj`, and the descending order.
pub fn tc_from_weights(w: ArrayView2<'_, f64>, c: ArrayView2<'_, f64>) -> Result<(Vec<f64>, Vec<usize>)> {
    let mi = mi_matrix(w, c)?;
    let wc = w.dot(&c);
    let tc: Vec<f64> = mi
        .outer_iter()
        .zip(w.outer_iter().zip(wc.outer_iter()))
        .map(|(row, (wj, rj))| row.sum() - 0.5 * (1.0 + wj.dot(&rj)).ln())
        .collect();
    let order = descending_order(&tc);
    Ok((tc, order))
}

pub fn tc_explained(model: &CorexModel, c: ArrayView2<'_, f64>) -> Result<(Vec<f64>, Vec<usize>)> {
    tc_from_weights(model.w.view(), c)
}

/// Mean latent representation `Z = standardize(X) W^T`.
pub fn transform(model: &CorexModel, x: &DataMatrix) -> Result<Array2<f64>> {
    let z = model.scaler.apply(x)?;
    if z.ncols() != model.p {
        return Err(Error::invalid(format!(
            "dimension mismatch: model has {} features, input has {}",
            model.p,
            z.ncols()
        )));
    }
    Ok(z.values.dot(&model.w.t()))
}

/// Build the [`FactorReport`] for a fitted model.
pub fn factor_report(model: &CorexModel, c: ArrayView2<'_, f64>, cluster: usize) -> Result<FactorReport> {
    let mi = factor_feature_mi(model, c)?;
    let (tc, _) = tc_explained(model, c)?;
    Ok(FactorReport::new(cluster, mi, tc, model.feature_names.clone()))
}

/// Widen an `m x p` matrix over the modelled features to the scaler's input
/// columns; columns dropped by the scaler get 0.
pub fn to_input_columns(model: &CorexModel, values: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((values.nrows(), model.scaler.input_cols));
    for (k, &col) in model.scaler.retained.iter().enumerate() {
        out.column_mut(col).assign(&values.column(k));
    }
    out
}

/// One fitted partition.
#[derive(Debug, Clone)]
pub struct ClusterFit {
    pub model: CorexModel,
    pub correlation: Array2<f64>,
    pub report: FactorReport,
}

/// Fit `m` factors inside every cluster of `members` (row indices into `data`).
///
/// Fits run on the current rayon pool; results keep cluster order. The
/// report's MI matrix spans all input columns of `data`.
pub fn fit_clusters(
    data: &DataMatrix,
    members: &[Vec<usize>],
    m: usize,
    opts: &CorexOptions,
) -> Vec<Result<ClusterFit>> {
    use rayon::prelude::*;
    members
        .par_iter()
        .enumerate()
        .map(|(cluster, rows)| {
            let sub = data.select_rows(rows);
            let (model, correlation) = fit_linear_corex(&sub, m, opts)?;
            let mi = to_input_columns(&model, &factor_feature_mi(&model, correlation.view())?);
            let (tc, _) = tc_explained(&model, correlation.view())?;
            let report = FactorReport::new(cluster, mi, tc, data.column_names.clone());
            Ok(ClusterFit {
                model,
                correlation,
                report,
            })
        })
        .collect()
}
