//! Two-population synthetic data with known interaction structure, and the
//! sweep that compares a global factor model with the local (embed, cluster,
//! fit per cluster) variant on it.
//!
//! Both populations have 25 features in five blocks of five. The first
//! population uses contiguous blocks. In the `disjoint` variant the second
//! population uses strided blocks, so no pairwise interaction is shared; in
//! the `nondisjoint` variant it swaps features 19 and 20 between the last two
//! blocks and keeps the rest.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use log::info;
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{self, majority_classes};
use crate::corex::{self, CorexOptions};
use crate::embed::{self, EmbedParams};
use crate::eval::{self, GroundTruthHoi, Protocol, ScorePair};
use crate::ingest::{standardize, DataMatrix};
use crate::linalg;
use crate::{Error, Result};

/// Number of features.
pub const P: usize = 25;
const BLOCK: usize = 5;
const BASE_MEAN: [f64; 5] = [5.0, 10.0, 1.0, 10.0, 3.0];
const MEAN_OFFSET: [f64; 5] = [2.5, 4.0, -2.0, 9.0, -7.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    Disjoint,
    Nondisjoint,
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SynthKind::Disjoint => "disjoint",
            SynthKind::Nondisjoint => "nondisjoint",
        })
    }
}

impl std::str::FromStr for SynthKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disjoint" => Ok(SynthKind::Disjoint),
            "nondisjoint" => Ok(SynthKind::Nondisjoint),
            other => Err(Error::Config(format!("unknown synthetic kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub alpha: f64,
    pub n_per_cluster: usize,
    pub kind: SynthKind,
    pub seed: u64,
    #[serde(default = "default_rho")]
    pub rho: f64,
    /// Random stream within `seed`; lets sweep cells draw independent data.
    #[serde(default)]
    pub stream: u64,
}

fn default_rho() -> f64 {
    0.8
}

impl SynthConfig {
    pub fn new(kind: SynthKind, alpha: f64, n_per_cluster: usize, seed: u64) -> Self {
        SynthConfig {
            alpha,
            n_per_cluster,
            kind,
            seed,
            rho: default_rho(),
            stream: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::Config(format!("rho must lie in (0, 1), got {}", self.rho)));
        }
        if self.n_per_cluster == 0 {
            return Err(Error::Config("n_per_cluster must be at least 1".into()));
        }
        Ok(())
    }
}

/// Mean of the first population.
pub fn base_mean() -> Array1<f64> {
    Array1::from_iter(BASE_MEAN.iter().flat_map(|&v| [v; BLOCK]))
}

/// Mean of the second population, `mu1 + alpha * offset`.
pub fn shifted_mean(alpha: f64) -> Array1<f64> {
    let offset = Array1::from_iter(MEAN_OFFSET.iter().flat_map(|&v| [v; BLOCK]));
    base_mean() + &(offset * alpha)
}

/// Feature blocks of the two populations.
pub fn block_layout(kind: SynthKind) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let contiguous: Vec<Vec<usize>> = (0..BLOCK).map(|b| (b * BLOCK..(b + 1) * BLOCK).collect()).collect();
    let second = match kind {
        SynthKind::Disjoint => (0..BLOCK).map(|b| (0..BLOCK).map(|i| b + BLOCK * i).collect()).collect(),
        SynthKind::Nondisjoint => {
            let mut blocks = contiguous.clone();
            blocks[3] = vec![15, 16, 17, 18, 20];
            blocks[4] = vec![19, 21, 22, 23, 24];
            blocks
        }
    };
    (contiguous, second)
}

fn equicorrelation(blocks: &[Vec<usize>], rho: f64) -> Array2<f64> {
    let mut s = Array2::eye(P);
    for block in blocks {
        for &i in block {
            for &j in block {
                if i != j {
                    s[[i, j]] = rho;
                }
            }
        }
    }
    s
}

/// Covariances `(Sigma1, Sigma2)` of the two populations.
pub fn make_covariance_pair(kind: SynthKind, rho: f64) -> Result<(Array2<f64>, Array2<f64>)> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::Config(format!("rho must lie in (0, 1), got {rho}")));
    }
    let (a, b) = block_layout(kind);
    Ok((equicorrelation(&a, rho), equicorrelation(&b, rho)))
}

/// Ground-truth interaction sets of the two populations.
pub fn truth_sets(kind: SynthKind, rho: f64) -> Result<(Vec<GroundTruthHoi>, Vec<GroundTruthHoi>)> {
    let (s1, s2) = make_covariance_pair(kind, rho)?;
    Ok((
        eval::extract_true_hois(s1.view(), eval::DEFAULT_ZERO_TOL)?,
        eval::extract_true_hois(s2.view(), eval::DEFAULT_ZERO_TOL)?,
    ))
}

/// Distinct interactions of both populations, first population first.
pub fn union_truth(a: &[GroundTruthHoi], b: &[GroundTruthHoi]) -> Vec<GroundTruthHoi> {
    let mut out = a.to_vec();
    for g in b {
        if !out.contains(g) {
            out.push(g.clone());
        }
    }
    out
}

/// Draw `n` rows from `N(mean, L L^T)`.
fn draw(rng: &mut ChaCha8Rng, n: usize, mean: &Array1<f64>, chol: &Array2<f64>) -> Array2<f64> {
    let p = mean.len();
    let eps = Array2::from_shape_simple_fn((n, p), || StandardNormal.sample(&mut *rng));
    eps.dot(&chol.t()) + mean
}

/// `n` rows of each population (first population first) and their labels (0 or 1).
pub fn sample_synthetic(cfg: &SynthConfig) -> Result<(DataMatrix, Vec<usize>)> {
    cfg.validate()?;
    let (s1, s2) = make_covariance_pair(cfg.kind, cfg.rho)?;
    let l1 = linalg::cholesky(s1.view()).ok_or_else(|| Error::numeric("covariance not positive definite"))?;
    let l2 = linalg::cholesky(s2.view()).ok_or_else(|| Error::numeric("covariance not positive definite"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(cfg.stream);
    let n = cfg.n_per_cluster;
    let a = draw(&mut rng, n, &base_mean(), &l1);
    let b = draw(&mut rng, n, &shifted_mean(cfg.alpha), &l2);
    let values = ndarray::concatenate(ndarray::Axis(0), &[a.view(), b.view()]).expect("equal widths");
    let names = (0..P).map(|i| format!("x{i}")).collect();
    let labels = (0..2 * n).map(|i| usize::from(i >= n)).collect();
    Ok((DataMatrix::new(values, names)?, labels))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// One model on all samples.
    Linear,
    /// Embed, split with k-means, one model per cluster.
    LocalLinear,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Linear => "linear",
            Method::LocalLinear => "local_linear",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationGrid {
    pub kinds: Vec<SynthKind>,
    pub alphas: Vec<f64>,
    pub sizes: Vec<usize>,
    pub m_values: Vec<usize>,
    pub replicates: usize,
    pub methods: Vec<Method>,
    pub seed: u64,
    pub rho: f64,
    /// Clusters for the local method.
    pub k: usize,
    pub embed: EmbedParams,
    pub corex: CorexOptions,
}

impl Default for AblationGrid {
    fn default() -> Self {
        AblationGrid {
            kinds: vec![SynthKind::Disjoint, SynthKind::Nondisjoint],
            alphas: (0..=10).map(|i| i as f64 / 10.0).collect(),
            sizes: vec![10, 100, 1000, 10_000],
            m_values: (3..=7).collect(),
            replicates: 16,
            methods: vec![Method::Linear, Method::LocalLinear],
            seed: 0,
            rho: default_rho(),
            k: 2,
            embed: EmbedParams {
                d: 2,
                ..EmbedParams::default()
            },
            corex: CorexOptions::default(),
        }
    }
}

impl AblationGrid {
    fn validate(&self) -> Result<()> {
        let empty = [
            ("kinds", self.kinds.is_empty()),
            ("alphas", self.alphas.is_empty()),
            ("sizes", self.sizes.is_empty()),
            ("m_values", self.m_values.is_empty()),
            ("methods", self.methods.is_empty()),
        ];
        if let Some((name, _)) = empty.iter().find(|(_, e)| *e) {
            return Err(Error::Config(format!("ablation grid has no {name}")));
        }
        if self.replicates == 0 {
            return Err(Error::Config("ablation grid needs at least one replicate".into()));
        }
        if self.m_values.contains(&0) || self.sizes.contains(&0) || self.k == 0 {
            return Err(Error::Config("factor counts, sizes and k must be positive".into()));
        }
        if self.alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Config("alphas must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Data cells `(kind, n, alpha, replicate)` in report order.
    fn data_cells(&self) -> Vec<(SynthKind, usize, f64, usize)> {
        let mut cells = Vec::new();
        for &kind in &self.kinds {
            for &n in &self.sizes {
                for &alpha in &self.alphas {
                    for rep in 0..self.replicates {
                        cells.push((kind, n, alpha, rep));
                    }
                }
            }
        }
        cells
    }
}

/// One scored (cell, protocol) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub kind: SynthKind,
    pub n: usize,
    pub alpha: f64,
    pub method: Method,
    pub replicate: usize,
    pub m: usize,
    pub protocol: Protocol,
    pub cosine: f64,
    pub aucprc: f64,
    /// Share of samples in their cluster's majority population (local method only).
    pub purity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

/// Mean scores over replicates and factor counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub kind: SynthKind,
    pub n: usize,
    pub alpha: f64,
    pub method: Method,
    pub protocol: Protocol,
    pub cosine: f64,
    pub aucprc: f64,
    pub mean_purity: Option<f64>,
    pub cells: usize,
}

impl AblationReport {
    pub fn summary(&self) -> Vec<SummaryRow> {
        type Key = (SynthKind, usize, u64, Method, u8);
        let mut acc: BTreeMap<Key, (SummaryRow, f64, usize)> = BTreeMap::new();
        for r in &self.rows {
            let proto = match r.protocol {
                Protocol::Group => 0,
                Protocol::Topk => 1,
            };
            let key = (r.kind, r.n, r.alpha.to_bits(), r.method, proto);
            let entry = acc.entry(key).or_insert_with(|| {
                (
                    SummaryRow {
                        kind: r.kind,
                        n: r.n,
                        alpha: r.alpha,
                        method: r.method,
                        protocol: r.protocol,
                        cosine: 0.0,
                        aucprc: 0.0,
                        mean_purity: None,
                        cells: 0,
                    },
                    0.0,
                    0,
                )
            });
            entry.0.cosine += r.cosine;
            entry.0.aucprc += r.aucprc;
            entry.0.cells += 1;
            if let Some(p) = r.purity {
                entry.1 += p;
                entry.2 += 1;
            }
        }
        let mut rows: Vec<SummaryRow> = acc
            .into_values()
            .map(|(mut s, purity, count)| {
                s.cosine /= s.cells as f64;
                s.aucprc /= s.cells as f64;
                s.mean_purity = (count > 0).then(|| purity / count as f64);
                s
            })
            .collect();
        rows.sort_by(|a, b| {
            (a.kind, a.n, a.method, a.protocol as u8)
                .cmp(&(b.kind, b.n, b.method, b.protocol as u8))
                .then(a.alpha.total_cmp(&b.alpha))
        });
        rows
    }

    /// Mean score of the matching summary row.
    pub fn mean(&self, kind: SynthKind, n: usize, alpha: f64, method: Method, protocol: Protocol) -> Option<ScorePair> {
        self.summary()
            .into_iter()
            .find(|s| s.kind == kind && s.n == n && s.alpha == alpha && s.method == method && s.protocol == protocol)
            .map(|s| ScorePair {
                cosine: s.cosine,
                aucprc: s.aucprc,
            })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        for row in &self.rows {
            w.serialize(row).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_summary_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.summary())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::data(format!("{}: {other:?}", path.display())),
    }
}

/// Stable stream id for a data cell, independent of the grid's shape.
fn cell_stream(kind: SynthKind, n: usize, alpha: f64, rep: usize) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for word in [kind as u64, n as u64, alpha.to_bits(), rep as u64] {
        for byte in word.to_le_bytes() {
            h ^= u64::from(byte);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

fn ordered_predictions(report: &corex::FactorReport) -> Vec<Vec<f64>> {
    report.order.iter().map(|&j| report.mi.row(j).to_vec()).collect()
}

fn score_pairs(preds: &[Vec<f64>], truths: &[GroundTruthHoi]) -> Result<[ScorePair; 2]> {
    let group = eval::group_score(preds, truths)?;
    let (topk, _) = eval::topk_score(preds, truths)?;
    Ok([group, topk])
}

fn mean_pairs(pairs: &[[ScorePair; 2]]) -> [ScorePair; 2] {
    let n = pairs.len() as f64;
    let mut out = [ScorePair { cosine: 0.0, aucprc: 0.0 }; 2];
    for p in pairs {
        for (o, s) in out.iter_mut().zip(p) {
            o.cosine += s.cosine;
            o.aucprc += s.aucprc;
        }
    }
    for o in &mut out {
        o.cosine /= n;
        o.aucprc /= n;
    }
    out
}

fn run_cell(grid: &AblationGrid, kind: SynthKind, n: usize, alpha: f64, rep: usize) -> Result<Vec<AblationRow>> {
    let cfg = SynthConfig {
        alpha,
        n_per_cluster: n,
        kind,
        seed: grid.seed,
        rho: grid.rho,
        stream: cell_stream(kind, n, alpha, rep),
    };
    let (data, labels) = sample_synthetic(&cfg)?;
    let (t1, t2) = truth_sets(kind, grid.rho)?;
    let union = union_truth(&t1, &t2);
    let class_truth = [t1, t2];
    let mut rows = Vec::new();
    let mut push = |method, m, scores: [ScorePair; 2], purity| {
        for (protocol, s) in [Protocol::Group, Protocol::Topk].into_iter().zip(scores) {
            rows.push(AblationRow {
                kind,
                n,
                alpha,
                method,
                replicate: rep,
                m,
                protocol,
                cosine: s.cosine,
                aucprc: s.aucprc,
                purity,
            });
        }
    };
    for &method in &grid.methods {
        match method {
            Method::Linear => {
                let all = vec![(0..data.nrows()).collect::<Vec<_>>()];
                for &m in &grid.m_values {
                    let fit = corex::fit_clusters(&data, &all, m, &grid.corex).remove(0)?;
                    push(method, m, score_pairs(&ordered_predictions(&fit.report), &union)?, None);
                }
            }
            Method::LocalLinear => {
                let (z, _) = standardize(&data)?;
                let params = EmbedParams {
                    seed: grid.seed,
                    ..grid.embed.clone()
                };
                let embedding = embed::phate_embed(z.values.view(), &params)?;
                let k = grid.k.min(data.nrows());
                let assignment = cluster::kmeans_cluster(&embedding, k, grid.seed, cluster::DEFAULT_MAX_ITER)?;
                let majority = majority_classes(&assignment.labels, &labels, k);
                let sizes = assignment.sizes();
                let purity = majority.iter().zip(&sizes).map(|((_, share), &s)| share * s as f64).sum::<f64>()
                    / data.nrows() as f64;
                // clusters too small to estimate a correlation are left out
                let members: Vec<Vec<usize>> = assignment.members().into_iter().filter(|r| r.len() >= 2).collect();
                let classes: Vec<usize> = majority
                    .iter()
                    .zip(&sizes)
                    .filter(|(_, &s)| s >= 2)
                    .map(|((c, _), _)| *c)
                    .collect();
                for &m in &grid.m_values {
                    let fits = corex::fit_clusters(&data, &members, m, &grid.corex);
                    let mut per_cluster = Vec::with_capacity(fits.len());
                    for (fit, &class) in fits.into_iter().zip(&classes) {
                        let fit = fit?;
                        per_cluster.push(score_pairs(&ordered_predictions(&fit.report), &class_truth[class])?);
                    }
                    if per_cluster.is_empty() {
                        return Err(Error::data("no cluster large enough to fit"));
                    }
                    push(method, m, mean_pairs(&per_cluster), Some(purity));
                }
            }
        }
    }
    Ok(rows)
}

/// Run every cell of `grid` on a pool of `threads` workers (0 = rayon default).
///
/// Rows come back in grid order whatever the scheduling. When `out_dir` is
/// given, `ablation.csv` and `summary.json` are written there.
pub fn run_ablation(grid: &AblationGrid, out_dir: Option<&Path>, threads: usize) -> Result<AblationReport> {
    grid.validate()?;
    let cells = grid.data_cells();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<Vec<AblationRow>>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(kind, n, alpha, rep)| {
                let rows = run_cell(grid, kind, n, alpha, rep);
                info!("ablation cell {kind} n={n} alpha={alpha} rep={rep} done");
                rows
            })
            .collect()
    });
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    let report = AblationReport { rows };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        report.write_csv(dir.join("ablation.csv"))?;
        report.write_summary_json(dir.join("summary.json"))?;
    }
    Ok(report)
}
