//! Diffusion-potential embedding used to partition the data manifold.
//!
//! Stages: adaptive alpha-decay affinity kernel, row-normalized diffusion
//! operator, diffusion time chosen at the knee of the von Neumann entropy
//! curve, log-potential distances of the `t`-step operator, and metric MDS
//! (classical initialization refined by SMACOF stress majorization).
//!
//! Large inputs go through a landmark operator: k-means centroids act as
//! landmarks, points and landmarks are linked by a rectangular kernel and
//! the landmark-to-landmark operator `P_ln * P_nl` is embedded before being
//! interpolated back to all points.

use log::warn;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::cluster;
use crate::ingest::DataMatrix;
use crate::linalg;
use crate::{Error, Result};

/// Floor added to diffused probabilities before taking logs.
pub const POTENTIAL_FLOOR: f64 = 1e-7;
/// Diffusion time used when the entropy curve has no knee.
pub const DEFAULT_T: usize = 20;
const FLAT_ENTROPY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedParams {
    /// Output dimension.
    pub d: usize,
    pub knn: usize,
    pub decay: f64,
    pub t_max: usize,
    /// Skip entropy-based selection and use this diffusion time.
    pub fixed_t: Option<usize>,
    pub n_landmark: usize,
    pub pca_dims: usize,
    pub seed: u64,
    pub mds_max_iter: usize,
    pub mds_tol: f64,
    /// Lloyd iterations spent placing landmarks.
    pub landmark_iter: usize,
}

impl Default for EmbedParams {
    fn default() -> Self {
        EmbedParams {
            d: 10,
            knn: 5,
            decay: 40.0,
            t_max: 100,
            fixed_t: None,
            n_landmark: 2000,
            pca_dims: 100,
            seed: 0,
            mds_max_iter: 300,
            mds_tol: 1e-4,
            landmark_iter: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    pub k: Array2<f64>,
    pub knn: usize,
    pub decay: f64,
}

/// Row-stochastic transition matrix together with the weights `d` that make
/// `diag(d)^(1/2) P diag(d)^(-1/2)` symmetric (the kernel degrees).
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionOperator {
    pub p: Array2<f64>,
    pub degrees: Array1<f64>,
    pub t: usize,
}

impl DiffusionOperator {
    pub fn len(&self) -> usize {
        self.p.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.p.nrows() == 0
    }

    /// Largest deviation of any row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        self.p
            .sum_axis(Axis(1))
            .iter()
            .map(|s| (s - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// The symmetric conjugate `D^(1/2) P D^(-1/2)`.
    pub fn symmetric_conjugate(&self) -> Array2<f64> {
        let sq = self.degrees.mapv(f64::sqrt);
        let n = self.len();
        let mut a = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for j in 0..=i {
                let v = 0.5 * (sq[i] * self.p[[i, j]] / sq[j] + sq[j] * self.p[[j, i]] / sq[i]);
                a[[i, j]] = v;
                a[[j, i]] = v;
            }
        }
        a
    }

    /// `P^t` by repeated squaring.
    pub fn power(&self, t: usize) -> Array2<f64> {
        let n = self.len();
        let mut result: Option<Array2<f64>> = None;
        let mut base = self.p.clone();
        let mut e = t;
        while e > 0 {
            if e & 1 == 1 {
                result = Some(match result {
                    None => base.clone(),
                    Some(r) => r.dot(&base),
                });
            }
            e >>= 1;
            if e > 0 {
                base = base.dot(&base);
            }
        }
        result.unwrap_or_else(|| Array2::eye(n))
    }
}

/// Eigendecomposition of the symmetric conjugate of a diffusion operator.
pub struct DiffusionSpectrum {
    pub values: Array1<f64>,
    pub vectors: Array2<f64>,
    degrees: Array1<f64>,
}

impl DiffusionSpectrum {
    pub fn new(op: &DiffusionOperator) -> Result<Self> {
        let (values, vectors) = linalg::sym_eigen(op.symmetric_conjugate().view())?;
        Ok(DiffusionSpectrum {
            values,
            vectors,
            degrees: op.degrees.clone(),
        })
    }

    /// `P^t = D^(-1/2) V diag(lambda^t) V^T D^(1/2)`.
    pub fn power(&self, t: usize) -> Array2<f64> {
        let lt = self.values.mapv(|l| l.powi(t as i32));
        let scaled = &self.vectors * &lt.view().insert_axis(Axis(0));
        let mut out = scaled.dot(&self.vectors.t());
        let sq = self.degrees.mapv(f64::sqrt);
        for ((i, j), v) in out.indexed_iter_mut() {
            *v *= sq[j] / sq[i];
        }
        out
    }
}

/// Affinity `K(x,y) = (exp(-(d/s_x)^a) + exp(-(d/s_y)^a)) / 2` with `s_x` the
/// distance from `x` to its `knn`-th nearest neighbor.
pub fn build_kernel(x: ArrayView2<'_, f64>, knn: usize, decay: f64) -> Result<AffinityMatrix> {
    let n = x.nrows();
    if knn == 0 || n < knn + 1 {
        return Err(Error::invalid(format!(
            "kernel needs knn >= 1 and at least knn + 1 points (knn = {knn}, N = {n})"
        )));
    }
    if !(decay > 0.0) {
        return Err(Error::invalid("kernel decay must be positive"));
    }
    let dist = linalg::pairwise_distances_exact(x);
    let sigma = bandwidths(&dist, knn, true)?;
    let mut k = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        k[[i, i]] = 1.0;
        for j in (i + 1)..n {
            let d = dist[[i, j]];
            let v = 0.5 * ((-(d / sigma[i]).powf(decay)).exp() + (-(d / sigma[j]).powf(decay)).exp());
            k[[i, j]] = v;
            k[[j, i]] = v;
        }
    }
    Ok(AffinityMatrix { k, knn, decay })
}

/// Distance from each row point to its `knn`-th nearest column point. With
/// `skip_self` the diagonal entry is ignored. A zero bandwidth falls back to
/// the smallest positive distance in the row.
fn bandwidths(dist: &Array2<f64>, knn: usize, skip_self: bool) -> Result<Array1<f64>> {
    let mut out = Array1::<f64>::zeros(dist.nrows());
    let mut buf = Vec::with_capacity(dist.ncols());
    for (i, row) in dist.outer_iter().enumerate() {
        buf.clear();
        buf.extend(
            row.iter()
                .enumerate()
                .filter(|&(j, _)| !(skip_self && i == j))
                .map(|(_, &d)| d),
        );
        let idx = (knn - 1).min(buf.len() - 1);
        let (_, kth, _) = buf.select_nth_unstable_by(idx, f64::total_cmp);
        let mut s = *kth;
        if s <= 0.0 {
            s = buf
                .iter()
                .copied()
                .filter(|&d| d > 0.0)
                .fold(f64::INFINITY, f64::min);
            if !s.is_finite() {
                return Err(Error::data(format!(
                    "point {i}: all neighbors coincide, bandwidth undefined"
                )));
            }
        }
        out[i] = s;
    }
    Ok(out)
}

fn row_normalize(k: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let sums = k.sum_axis(Axis(1));
    if let Some(i) = sums.iter().position(|&s| !(s > 0.0)) {
        return Err(Error::numeric(format!("zero row sum at row {i}")));
    }
    let p = k / &sums.view().insert_axis(Axis(1));
    Ok((p, sums))
}

/// `P = D^-1 K`.
pub fn diffusion_operator(k: &AffinityMatrix) -> Result<DiffusionOperator> {
    let (p, degrees) = row_normalize(&k.k)?;
    Ok(DiffusionOperator { p, degrees, t: 1 })
}

/// Von Neumann entropy `H(t)` for `t = 1..=t_max` from the operator's eigenvalues.
pub fn von_neumann_entropy(eigenvalues: ArrayView1<'_, f64>, t_max: usize) -> Vec<f64> {
    let abs: Vec<f64> = eigenvalues.iter().map(|l| l.abs()).collect();
    (1..=t_max)
        .map(|t| {
            let pw: Vec<f64> = abs.iter().map(|l| l.powi(t as i32)).collect();
            let total: f64 = pw.iter().sum();
            if total <= 0.0 {
                return 0.0;
            }
            -pw.iter()
                .map(|v| v / total)
                .filter(|&e| e > 0.0)
                .map(|e| e * e.ln())
                .sum::<f64>()
        })
        .collect()
}

/// Sum of squared residuals of the least-squares line through `(x, y)`.
fn line_sse(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    if sxx == 0.0 {
        return syy;
    }
    (syy - sxy * sxy / sxx).max(0.0)
}

/// Knee of an entropy curve `h[t-1] = H(t)`.
///
/// Every interior `t` splits the curve into two segments sharing that point;
/// the knee is the split whose two least-squares lines leave the smallest
/// total squared residual. `None` for a flat curve.
pub fn entropy_knee(h: &[f64]) -> Option<usize> {
    if h.len() < 5 {
        return None;
    }
    let (lo, hi) = h.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let scale = hi.abs().max(lo.abs()).max(1.0);
    if hi - lo <= FLAT_ENTROPY_TOL * scale {
        return None;
    }
    let x: Vec<f64> = (1..=h.len()).map(|t| t as f64).collect();
    let mut best = (f64::INFINITY, 0);
    for b in 2..h.len() - 2 {
        let err = line_sse(&x[..=b], &h[..=b]) + line_sse(&x[b..], &h[b..]);
        if err < best.0 {
            best = (err, b + 1);
        }
    }
    Some(best.1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TSelection {
    pub t: usize,
    pub entropy: Vec<f64>,
    pub warning: Option<String>,
}

fn select_t_from_values(values: ArrayView1<'_, f64>, t_max: usize) -> TSelection {
    let entropy = von_neumann_entropy(values, t_max);
    match entropy_knee(&entropy) {
        Some(t) => TSelection {
            t,
            entropy,
            warning: None,
        },
        None => {
            let msg = format!("flat entropy curve; using default t = {DEFAULT_T}");
            warn!("{msg}");
            TSelection {
                t: DEFAULT_T,
                entropy,
                warning: Some(msg),
            }
        }
    }
}

/// Pick the diffusion time, honoring `fixed_t` when given.
pub fn select_t(op: &DiffusionOperator, t_max: usize, fixed_t: Option<usize>) -> Result<TSelection> {
    if let Some(t) = fixed_t {
        if t == 0 {
            return Err(Error::invalid("fixed diffusion time must be >= 1"));
        }
        return Ok(TSelection {
            t,
            entropy: Vec::new(),
            warning: None,
        });
    }
    if t_max < 2 {
        return Err(Error::invalid("t_max must be at least 2"));
    }
    let values = linalg::sym_eigenvalues(op.symmetric_conjugate().view())?;
    Ok(select_t_from_values(values.view(), t_max))
}

fn potential_from_power(pt: &Array2<f64>) -> Array2<f64> {
    let u = pt.mapv(|v| -(v.max(0.0) + POTENTIAL_FLOOR).ln());
    linalg::pairwise_distances(u.view())
}

/// Euclidean distances between rows of `-log(P^t + 1e-7)`.
pub fn potential_distances(op: &DiffusionOperator, t: usize) -> Result<Array2<f64>> {
    if t == 0 {
        return Err(Error::invalid("diffusion time must be >= 1"));
    }
    Ok(potential_from_power(&op.power(t)))
}

/// Coordinates plus the diagnostics of the run that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    #[serde(with = "crate::serde_rows")]
    pub coords: Array2<f64>,
    pub d: usize,
    pub t: usize,
    pub stress: f64,
    pub params: EmbedParams,
    #[serde(default)]
    pub landmark: bool,
    #[serde(default)]
    pub stress_trace: Vec<f64>,
    #[serde(default)]
    pub entropy: Vec<f64>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl Embedding {
    pub fn n(&self) -> usize {
        self.coords.nrows()
    }
}

/// Raw stress `sum_{i<j} (D_ij - |y_i - y_j|)^2`.
pub fn raw_stress(dist: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> f64 {
    let n = y.nrows();
    let mut s = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let e = euclid(y.row(i), y.row(j));
            s += (dist[[i, j]] - e) * (dist[[i, j]] - e);
        }
    }
    s
}

fn euclid(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Classical (Torgerson) MDS: top-`d` spectral coordinates of `-J D^2 J / 2`.
pub fn classical_mds(dist: ArrayView2<'_, f64>, d: usize) -> Result<Array2<f64>> {
    let n = dist.nrows();
    let sq = dist.mapv(|v| v * v);
    let row_means = sq.mean_axis(Axis(1)).unwrap();
    let grand = row_means.mean().unwrap();
    let mut b = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let v = -0.5 * (sq[[i, j]] - row_means[i] - row_means[j] + grand);
            b[[i, j]] = v;
            b[[j, i]] = v;
        }
    }
    let (vals, vecs) = linalg::sym_eigen(b.view())?;
    let mut y = Array2::<f64>::zeros((n, d));
    for c in 0..d {
        let idx = n - 1 - c;
        let scale = vals[idx].max(0.0).sqrt();
        y.column_mut(c).assign(&(&vecs.column(idx) * scale));
    }
    Ok(y)
}

/// One Guttman transform. Returns the stress of `y` and the updated coordinates.
fn guttman_step(dist: ArrayView2<'_, f64>, y: &Array2<f64>) -> (f64, Array2<f64>) {
    let (n, d) = y.dim();
    let mut next = Array2::<f64>::zeros((n, d));
    let mut stress = 0.0;
    let mut diff = vec![0.0; d];
    for i in 0..n {
        for j in (i + 1)..n {
            let mut e2 = 0.0;
            for c in 0..d {
                diff[c] = y[[i, c]] - y[[j, c]];
                e2 += diff[c] * diff[c];
            }
            let e = e2.sqrt();
            let target = dist[[i, j]];
            stress += (target - e) * (target - e);
            if e > 0.0 {
                let w = target / e;
                for c in 0..d {
                    next[[i, c]] += w * diff[c];
                    next[[j, c]] -= w * diff[c];
                }
            }
        }
    }
    next /= n as f64;
    (stress, next)
}

/// Metric MDS: classical initialization refined by SMACOF.
///
/// Iteration stops when the relative stress decrease drops below `tol`,
/// after `max_iter` Guttman transforms, or as soon as a transform fails to
/// lower the stress (the previous coordinates are then kept).
pub fn mds_embed(dist: ArrayView2<'_, f64>, d: usize, max_iter: usize, tol: f64) -> Result<Embedding> {
    let n = dist.nrows();
    if dist.ncols() != n {
        return Err(Error::invalid("distance matrix must be square"));
    }
    if d == 0 || d >= n {
        return Err(Error::invalid(format!("need 1 <= d < N (d = {d}, N = {n})")));
    }
    let scale = dist.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for i in 0..n {
        if dist[[i, i]] != 0.0 {
            return Err(Error::invalid("distance matrix must have a zero diagonal"));
        }
        for j in (i + 1)..n {
            if (dist[[i, j]] - dist[[j, i]]).abs() > 1e-12 * scale.max(1.0) {
                return Err(Error::invalid("distance matrix is not symmetric"));
            }
        }
    }
    let mut y = classical_mds(dist, d)?;
    let mut trace = Vec::new();
    let (mut stress, mut next) = guttman_step(dist, &y);
    trace.push(stress);
    for _ in 0..max_iter {
        if stress == 0.0 {
            break;
        }
        let (s_next, after) = guttman_step(dist, &next);
        if s_next > stress {
            break;
        }
        y = next;
        next = after;
        let rel = (stress - s_next) / stress;
        stress = s_next;
        trace.push(stress);
        if rel < tol {
            break;
        }
    }
    Ok(Embedding {
        coords: y,
        d,
        t: 0,
        stress,
        params: EmbedParams {
            d,
            mds_max_iter: max_iter,
            mds_tol: tol,
            ..EmbedParams::default()
        },
        landmark: false,
        stress_trace: trace,
        entropy: Vec::new(),
        warnings: Vec::new(),
    })
}

/// Project centered data on its leading `dims` principal axes.
pub fn pca_project(x: ArrayView2<'_, f64>, dims: usize) -> Result<Array2<f64>> {
    let n = x.nrows();
    let mean = cluster::axis_means(x);
    let centered = &x - &mean.view().insert_axis(Axis(0));
    let cov = centered.t().dot(&centered) / n as f64;
    let (_, vecs) = linalg::sym_eigen(cov.view())?;
    let p = vecs.ncols();
    let dims = dims.min(p);
    let mut basis = vecs.slice(s![.., p - dims..]).to_owned();
    basis.invert_axis(Axis(1));
    Ok(centered.dot(&basis))
}

/// Landmark operator: `(P_nl, P_L = P_ln P_nl, column degrees of K)`.
pub fn landmark_operator(
    x: ArrayView2<'_, f64>,
    landmarks: ArrayView2<'_, f64>,
    knn: usize,
    decay: f64,
) -> Result<(Array2<f64>, DiffusionOperator)> {
    let (n, l) = (x.nrows(), landmarks.nrows());
    if knn == 0 || l < knn + 1 {
        return Err(Error::invalid(format!(
            "landmark kernel needs more than knn = {knn} landmarks, got {l}"
        )));
    }
    let xn = linalg::row_sq_norms(x);
    let ln = linalg::row_sq_norms(landmarks);
    let cross = x.dot(&landmarks.t());
    let dist = Array2::from_shape_fn((n, l), |(i, j)| (xn[i] + ln[j] - 2.0 * cross[[i, j]]).max(0.0).sqrt());
    let sigma_x = bandwidths(&dist, knn, false)?;
    let sigma_l = bandwidths(&linalg::pairwise_distances_exact(landmarks), knn, true)?;
    let mut k = Array2::<f64>::zeros((n, l));
    for i in 0..n {
        for j in 0..l {
            let d = dist[[i, j]];
            k[[i, j]] = 0.5 * ((-(d / sigma_x[i]).powf(decay)).exp() + (-(d / sigma_l[j]).powf(decay)).exp());
        }
    }
    let (p_nl, _) = row_normalize(&k)?;
    let col = k.sum_axis(Axis(0));
    if let Some(j) = col.iter().position(|&s| !(s > 0.0)) {
        return Err(Error::numeric(format!("landmark {j} has no affinity to any point")));
    }
    // P_L = D_l^-1 K^T P_nl, accumulated over the (sparse) nonzeros of each point's row
    let mut p_l = Array2::<f64>::zeros((l, l));
    let mut nz = Vec::new();
    for i in 0..n {
        nz.clear();
        nz.extend((0..l).filter(|&j| k[[i, j]] > 0.0));
        for &a in &nz {
            let ka = k[[i, a]] / col[a];
            for &b in &nz {
                p_l[[a, b]] += ka * p_nl[[i, b]];
            }
        }
    }
    Ok((p_nl, DiffusionOperator { p: p_l, degrees: col, t: 1 }))
}

fn embed_operator(op: &DiffusionOperator, params: &EmbedParams) -> Result<(Embedding, Vec<String>)> {
    let spectrum = DiffusionSpectrum::new(op)?;
    let mut warnings = Vec::new();
    let sel = match params.fixed_t {
        Some(t) if t >= 1 => TSelection {
            t,
            entropy: Vec::new(),
            warning: None,
        },
        Some(_) => return Err(Error::invalid("fixed diffusion time must be >= 1")),
        None => {
            if params.t_max < 2 {
                return Err(Error::invalid("t_max must be at least 2"));
            }
            select_t_from_values(spectrum.values.view(), params.t_max)
        }
    };
    warnings.extend(sel.warning.clone());
    let dist = potential_from_power(&spectrum.power(sel.t));
    let mut e = mds_embed(dist.view(), params.d, params.mds_max_iter, params.mds_tol)?;
    e.t = sel.t;
    e.entropy = sel.entropy;
    Ok((e, warnings))
}

/// Full embedding of the rows of `x`.
pub fn phate_embed(x: ArrayView2<'_, f64>, params: &EmbedParams) -> Result<Embedding> {
    let (n, p) = x.dim();
    if n < params.knn + 2 {
        return Err(Error::invalid(format!(
            "embedding needs at least knn + 2 = {} points, got {n}",
            params.knn + 2
        )));
    }
    if params.d == 0 {
        return Err(Error::invalid("embedding dimension must be >= 1"));
    }
    let reduced;
    let x = if p > params.pca_dims {
        reduced = pca_project(x, params.pca_dims)?;
        reduced.view()
    } else {
        x
    };
    let (mut e, warnings) = if n <= params.n_landmark {
        let kernel = build_kernel(x, params.knn, params.decay)?;
        let op = diffusion_operator(&kernel)?;
        embed_operator(&op, params)?
    } else {
        let marks = cluster::kmeans(x, params.n_landmark, params.seed, params.landmark_iter)?;
        let (p_nl, op) = landmark_operator(x, marks.centroids.view(), params.knn, params.decay)?;
        let (mut e, w) = embed_operator(&op, params)?;
        e.coords = p_nl.dot(&e.coords);
        e.landmark = true;
        (e, w)
    };
    e.params = params.clone();
    e.warnings = warnings;
    Ok(e)
}

/// Embed a data matrix (typically already standardized).
pub fn embed_matrix(data: &DataMatrix, params: &EmbedParams) -> Result<Embedding> {
    phate_embed(data.values.view(), params)
}
