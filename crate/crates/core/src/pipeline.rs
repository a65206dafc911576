//! End-to-end runs: ingest, standardize, embed, cluster, fit per cluster.
//!
//! Every stage writes a JSON artifact into the output directory so later
//! stages can be re-run on their own. Wall-clock timings go to a separate
//! `timing.json`; every other artifact is a pure function of the config.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cluster::{self, majority_classes, ClusterAssignment};
use crate::corex::{self, CorexModel, CorexOptions, FactorReport};
use crate::embed::{self, EmbedParams, Embedding};
use crate::ingest::{self, CsvOptions, DataMatrix, DroppedColumn};
use crate::{Error, Result, StageExt};

pub const CONFIG_FILE: &str = "config.json";
pub const EMBEDDING_FILE: &str = "embedding.json";
pub const CLUSTERS_FILE: &str = "clusters.json";
pub const FACTORS_DIR: &str = "factors";
pub const MODELS_DIR: &str = "models";
pub const REPORT_FILE: &str = "report.json";
pub const TIMING_FILE: &str = "timing.json";

pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn factor_file_name(cluster: usize) -> String {
    format!("cluster{cluster}.json")
}

/// Where the data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "kebab-case")]
pub enum InputSpec {
    Csv {
        path: PathBuf,
        #[serde(default)]
        options: CsvOptions,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
    MatrixJson {
        path: PathBuf,
    },
}

impl InputSpec {
    /// Load the matrix and, for labelled formats, the class labels.
    pub fn load(&self) -> Result<(DataMatrix, Option<Vec<u32>>)> {
        match self {
            InputSpec::Csv { path, options } => Ok((ingest::load_csv(path, options)?, None)),
            InputSpec::Idx { images, labels } => {
                let (m, l) = ingest::load_idx(images, labels)?;
                Ok((m, Some(l)))
            }
            InputSpec::MatrixJson { path } => Ok((ingest::load_matrix_json(path)?, None)),
        }
    }

    /// Guess the format from the file extension (`.json` or delimited text).
    pub fn from_path(path: impl Into<PathBuf>) -> Self {
        let path = path.into();
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => InputSpec::MatrixJson { path },
            _ => InputSpec::Csv {
                path,
                options: CsvOptions::default(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterParams {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
}

impl Default for ClusterParams {
    fn default() -> Self {
        ClusterParams {
            k: 10,
            seed: 0,
            max_iter: cluster::DEFAULT_MAX_ITER,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitParams {
    /// Latent factors per cluster.
    pub m: usize,
    #[serde(flatten)]
    pub options: CorexOptions,
}

impl Default for FitParams {
    fn default() -> Self {
        FitParams {
            m: 10,
            options: CorexOptions::default(),
        }
    }
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_min_cluster_size() -> usize {
    50
}

fn default_tc_share() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub input: InputSpec,
    #[serde(default)]
    pub embed: EmbedParams,
    #[serde(default)]
    pub cluster: ClusterParams,
    #[serde(default)]
    pub corex: FitParams,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Worker threads for per-cluster fits; 0 uses every core.
    #[serde(default)]
    pub threads: usize,
    /// Clusters smaller than this get a warning.
    #[serde(default = "default_min_cluster_size")]
    pub min_cluster_size: usize,
    /// Factors explaining less than this share of a cluster's TC get a warning.
    #[serde(default = "default_tc_share")]
    pub min_tc_share: f64,
}

impl RunConfig {
    pub fn new(input: InputSpec, out_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            input,
            embed: EmbedParams::default(),
            cluster: ClusterParams::default(),
            corex: FitParams::default(),
            out_dir: out_dir.into(),
            threads: 0,
            min_cluster_size: default_min_cluster_size(),
            min_tc_share: default_tc_share(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.embed;
        let counts = [
            ("embed.d", e.d),
            ("embed.knn", e.knn),
            ("embed.n_landmark", e.n_landmark),
            ("embed.pca_dims", e.pca_dims),
            ("embed.mds_max_iter", e.mds_max_iter),
            ("cluster.k", self.cluster.k),
            ("cluster.max_iter", self.cluster.max_iter),
            ("corex.m", self.corex.m),
            ("corex.max_iter", self.corex.options.max_iter),
            ("corex.window", self.corex.options.window),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if e.t_max < 2 {
            return Err(Error::Config("embed.t_max must be at least 2".into()));
        }
        if e.fixed_t == Some(0) {
            return Err(Error::Config("embed.fixed_t must be positive".into()));
        }
        let o = &self.corex.options;
        let positive = [("embed.decay", e.decay), ("corex.lr", o.lr), ("corex.tol", o.tol)];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("{name} must be positive, got {v}")));
        }
        if !(o.lambda >= 0.0) || !(o.ridge >= 0.0) {
            return Err(Error::Config("corex.lambda and corex.ridge must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config("corex.beta1 and corex.beta2 must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub stages: Vec<StageTiming>,
    pub total_seconds: f64,
}

struct Clock {
    start: Instant,
    lap: Instant,
    timing: Timing,
}

impl Clock {
    fn new() -> Self {
        let now = Instant::now();
        Clock {
            start: now,
            lap: now,
            timing: Timing::default(),
        }
    }

    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.timing.stages.push(StageTiming {
            stage: stage.to_string(),
            seconds: (now - self.lap).as_secs_f64(),
        });
        self.lap = now;
    }

    fn finish(mut self) -> Timing {
        self.timing.total_seconds = self.start.elapsed().as_secs_f64();
        self.timing
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSummary {
    pub rows: usize,
    pub cols: usize,
    pub column_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSummary {
    pub n: usize,
    pub d: usize,
    pub t: usize,
    pub stress: f64,
    pub landmark: bool,
    pub warnings: Vec<String>,
}

impl From<&Embedding> for EmbeddingSummary {
    fn from(e: &Embedding) -> Self {
        EmbeddingSummary {
            n: e.n(),
            d: e.d,
            t: e.t,
            stress: e.stress,
            landmark: e.landmark,
            warnings: e.warnings.clone(),
        }
    }
}

/// Majority class of a cluster when the input carries labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassShare {
    pub cluster: usize,
    pub class: usize,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub input: InputSummary,
    /// Columns removed at load time and by standardization.
    pub drop_log: Vec<DroppedColumn>,
    pub embedding: EmbeddingSummary,
    pub assignment: ClusterAssignment,
    pub cluster_sizes: Vec<usize>,
    pub factors: Vec<FactorReport>,
    #[serde(default)]
    pub majority: Option<Vec<ClassShare>>,
    pub warnings: Vec<String>,
    /// Kept out of `report.json` so reruns produce identical bytes.
    #[serde(skip)]
    pub timing: Timing,
}

impl RunReport {
    pub fn factor_report(&self, cluster: usize) -> Result<&FactorReport> {
        self.factors
            .iter()
            .find(|f| f.cluster == cluster)
            .ok_or_else(|| Error::invalid(format!("unknown cluster id {cluster}")))
    }
}

/// Warnings about factors that explain under `min_share` of the cluster's TC.
pub fn factor_warnings(report: &FactorReport, min_share: f64) -> Vec<String> {
    let total: f64 = report.tc.iter().filter(|v| **v > 0.0).sum();
    if total <= 0.0 {
        return vec![format!("cluster {}: factors explain no total correlation", report.cluster)];
    }
    report
        .order
        .iter()
        .filter(|&&j| report.tc[j] / total < min_share)
        .map(|&j| {
            format!(
                "cluster {}: factor {j} explains {:.3}% of total correlation; consider fewer factors",
                report.cluster,
                100.0 * report.tc[j].max(0.0) / total
            )
        })
        .collect()
}

/// Outcome of fitting every cluster.
#[derive(Debug, Clone)]
pub struct FitOutput {
    pub reports: Vec<FactorReport>,
    pub models: Vec<CorexModel>,
    pub warnings: Vec<String>,
}

/// Fit `params.m` factors in every cluster on a pool of `threads` workers.
pub fn fit_stage(
    data: &DataMatrix,
    assignment: &ClusterAssignment,
    params: &FitParams,
    threads: usize,
    min_cluster_size: usize,
    min_tc_share: f64,
) -> Result<FitOutput> {
    if data.nrows() != assignment.labels.len() {
        return Err(Error::invalid(format!(
            "{} rows but {} cluster labels",
            data.nrows(),
            assignment.labels.len()
        )));
    }
    let mut warnings = Vec::new();
    let members = assignment.members();
    for (c, rows) in members.iter().enumerate() {
        if rows.len() < min_cluster_size {
            warnings.push(format!(
                "cluster {c} has {} samples (< {min_cluster_size}); factor estimates may be unreliable",
                rows.len()
            ));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let fits = pool.install(|| corex::fit_clusters(data, &members, params.m, &params.options));
    let mut reports = Vec::with_capacity(fits.len());
    let mut models = Vec::with_capacity(fits.len());
    for (c, fit) in fits.into_iter().enumerate() {
        let fit = fit.map_err(|e| e.context(format!("cluster {c}")))?;
        if !fit.model.converged {
            warnings.push(format!("cluster {c}: optimizer stopped at max_iter before converging"));
        }
        warnings.extend(factor_warnings(&fit.report, min_tc_share));
        reports.push(fit.report);
        models.push(fit.model);
    }
    for w in &warnings {
        warn!("{w}");
    }
    Ok(FitOutput {
        reports,
        models,
        warnings,
    })
}

/// Write one `cluster{c}.json` per cluster into `factors_dir` (reports) and `models_dir` (models).
pub fn write_fits(factors_dir: &Path, models_dir: &Path, out: &FitOutput) -> Result<()> {
    create_dir(factors_dir)?;
    create_dir(models_dir)?;
    for (report, model) in out.reports.iter().zip(&out.models) {
        write_json(factors_dir.join(factor_file_name(report.cluster)), report)?;
        write_json(models_dir.join(factor_file_name(report.cluster)), model)?;
    }
    Ok(())
}

/// Standardize `data` and embed it; the stage behind `run_pipeline` and `embed`.
pub fn embed_stage(data: &DataMatrix, params: &EmbedParams) -> Result<(Embedding, Vec<DroppedColumn>)> {
    let (z, scaler) = ingest::standardize(data).stage("standardize")?;
    let embedding = embed::phate_embed(z.values.view(), params).stage("embed")?;
    Ok((embedding, scaler.dropped_columns))
}

/// Run every stage and persist the artifacts in `cfg.out_dir`.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    let mut clock = Clock::new();
    let out = cfg.out_dir.as_path();
    create_dir(out).stage("write")?;
    write_json(out.join(CONFIG_FILE), cfg).stage("write")?;

    let (data, labels) = cfg.input.load().stage("ingest")?;
    info!("loaded {} x {} matrix", data.nrows(), data.ncols());
    clock.lap("ingest");

    let (z, scaler) = ingest::standardize(&data).stage("standardize")?;
    clock.lap("standardize");

    let embedding = embed::phate_embed(z.values.view(), &cfg.embed).stage("embed")?;
    write_json(out.join(EMBEDDING_FILE), &embedding).stage("write")?;
    info!("embedded with t = {}", embedding.t);
    clock.lap("embed");

    let assignment =
        cluster::kmeans_cluster(&embedding, cfg.cluster.k, cfg.cluster.seed, cfg.cluster.max_iter).stage("cluster")?;
    write_json(out.join(CLUSTERS_FILE), &assignment).stage("write")?;
    clock.lap("cluster");

    let fits = fit_stage(
        &data,
        &assignment,
        &cfg.corex,
        cfg.threads,
        cfg.min_cluster_size,
        cfg.min_tc_share,
    )
    .stage("fit")?;
    write_fits(&out.join(FACTORS_DIR), &out.join(MODELS_DIR), &fits).stage("write")?;
    clock.lap("fit");

    let majority = labels.map(|l| {
        let classes: Vec<usize> = l.iter().map(|&c| c as usize).collect();
        majority_classes(&assignment.labels, &classes, assignment.k)
            .into_iter()
            .enumerate()
            .map(|(cluster, (class, share))| ClassShare { cluster, class, share })
            .collect()
    });
    let mut drop_log = data.drop_log.clone();
    drop_log.extend(scaler.dropped_columns.iter().cloned());
    let mut warnings = embedding.warnings.clone();
    warnings.extend(fits.warnings.iter().cloned());
    let mut report = RunReport {
        input: InputSummary {
            rows: data.nrows(),
            cols: data.ncols(),
            column_names: data.column_names.clone(),
        },
        drop_log,
        embedding: EmbeddingSummary::from(&embedding),
        cluster_sizes: assignment.sizes(),
        assignment,
        factors: fits.reports,
        majority,
        warnings,
        timing: Timing::default(),
    };
    write_json(out.join(REPORT_FILE), &report).stage("write")?;
    clock.lap("write");
    report.timing = clock.finish();
    write_json(out.join(TIMING_FILE), &report.timing).stage("write")?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMi {
    pub index: usize,
    pub name: String,
    pub mi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSummary {
    pub factor: usize,
    pub rank: usize,
    pub tc: f64,
    /// Every feature, MI descending (ties by feature index).
    pub features: Vec<FeatureMi>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub cluster: usize,
    pub m: usize,
    pub total_tc: f64,
    pub factors: Vec<FactorSummary>,
}

/// The `top_m` most important factors of one cluster with their features ranked by MI.
pub fn summarize_factors(report: &FactorReport, top_m: usize) -> ClusterSummary {
    let factors = report
        .order
        .iter()
        .take(top_m)
        .enumerate()
        .map(|(rank, &j)| {
            let row = report.mi.row(j).to_vec();
            let features = corex::descending_order(&row)
                .into_iter()
                .map(|i| FeatureMi {
                    index: i,
                    name: report.feature_names.get(i).cloned().unwrap_or_else(|| format!("x{i}")),
                    mi: row[i],
                })
                .collect();
            FactorSummary {
                factor: j,
                rank,
                tc: report.tc[j],
                features,
            }
        })
        .collect();
    ClusterSummary {
        cluster: report.cluster,
        m: report.m,
        total_tc: report.tc.iter().sum(),
        factors,
    }
}

pub fn emit_report(report: &RunReport, cluster: usize, top_m: usize) -> Result<ClusterSummary> {
    Ok(summarize_factors(report.factor_report(cluster)?, top_m))
}

/// Load every `cluster*.json` factor report in `dir`, ordered by cluster.
pub fn load_factor_dir(dir: impl AsRef<Path>) -> Result<Vec<FactorReport>> {
    let dir = dir.as_ref();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut reports = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("cluster") && name.ends_with(".json") {
            reports.push(read_json::<FactorReport>(&path)?);
        }
    }
    if reports.is_empty() {
        return Err(Error::data(format!("no cluster*.json factor reports in {}", dir.display())));
    }
    reports.sort_by_key(|r| r.cluster);
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(tc: Vec<f64>) -> FactorReport {
        let m = tc.len();
        FactorReport::new(
            3,
            ndarray::Array2::from_shape_fn((m, 3), |(j, i)| (j + i) as f64 * 0.1),
            tc,
            vec!["a".into(), "b".into(), "c".into()],
        )
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"input": {"format": "csv", "path": "x.csv"}, "corex": {"m": 4, "lr": 0.01}}"#).unwrap();
        assert_eq!(cfg.embed.d, 10);
        assert_eq!(cfg.cluster.k, 10);
        assert_eq!(cfg.corex.m, 4);
        assert_eq!(cfg.corex.options.lr, 0.01);
        assert_eq!(cfg.corex.options.max_iter, 10_000);
        assert_eq!(cfg.min_cluster_size, 50);
        cfg.validate().unwrap();
        let mut bad = cfg.clone();
        bad.cluster.k = 0;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let mut bad = cfg;
        bad.corex.options.lr = -1.0;
        assert!(bad.validate().is_err());
        let idx: InputSpec = serde_json::from_str(r#"{"format": "idx", "images": "i", "labels": "l"}"#).unwrap();
        assert!(matches!(idx, InputSpec::Idx { .. }));
        let mj: InputSpec = serde_json::from_str(r#"{"format": "matrix-json", "path": "m.json"}"#).unwrap();
        assert_eq!(mj, InputSpec::from_path("m.json"));
    }

    #[test]
    fn summary_orders_factors_and_features() {
        let r = report(vec![0.5, 2.0, 1.0]);
        let s = summarize_factors(&r, 8);
        assert_eq!(s.factors.len(), 3);
        assert_eq!(s.factors.iter().map(|f| f.factor).collect::<Vec<_>>(), vec![1, 2, 0]);
        for f in &s.factors {
            for w in f.features.windows(2) {
                assert!(w[0].mi > w[1].mi || (w[0].mi == w[1].mi && w[0].index < w[1].index));
            }
        }
        assert_eq!(summarize_factors(&r, 2).factors.len(), 2);
    }

    #[test]
    fn small_factor_warning() {
        let r = report(vec![10.0, 0.05, 3.0]);
        let w = factor_warnings(&r, 0.01);
        assert_eq!(w.len(), 1);
        assert!(w[0].contains("factor 1"));
        let none = report(vec![0.0, 0.0]);
        assert_eq!(factor_warnings(&none, 0.01).len(), 1);
    }
}
