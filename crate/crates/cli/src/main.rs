use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use hoi_scope::cluster::{self, ClusterAssignment};
use hoi_scope::corex::FactorReport;
use hoi_scope::embed::{EmbedParams, Embedding};
use hoi_scope::eval::{self, Protocol, TruthFile};
use hoi_scope::ingest::{CsvOptions, DataMatrix, MissingPolicy};
use hoi_scope::pipeline::{self, FitParams, InputSpec, RunConfig};
use hoi_scope::svg::{self, ColorBy, SvgKind};
use hoi_scope::synth::{self, AblationGrid, SynthConfig, SynthKind};
use hoi_scope::{Error, ErrorKind, Result};

#[derive(Parser)]
#[command(name = "hoi-scope", version, about = "Local discovery of higher-order interactions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage from a JSON config; flags override the file.
    Pipeline(PipelineArgs),
    /// Standardize and embed a data matrix.
    Embed(EmbedArgs),
    /// k-means on an embedding.
    Cluster(ClusterArgs),
    /// Fit latent factors inside every cluster.
    Fit(FitArgs),
    /// Print the most important factors of one cluster.
    Report(ReportArgs),
    /// Render a figure.
    Svg(SvgArgs),
    /// Sample the two-population synthetic data set.
    Synth(SynthArgs),
    /// Sweep global vs local fits over synthetic data.
    Ablation(AblationArgs),
    /// Score a factor report against ground-truth interactions.
    Score(ScoreArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Idx,
    MatrixJson,
}

#[derive(Clone, Copy, ValueEnum)]
enum Missing {
    DropColumn,
    Error,
}

#[derive(Args, Clone)]
struct InputArgs {
    /// Data file (CSV, IDX images, or matrix JSON).
    #[arg(long)]
    input: PathBuf,
    /// Input format; guessed from the extension when omitted.
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// IDX label file (required with --format idx).
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value = ",")]
    delimiter: char,
    #[arg(long, value_enum, default_value = "drop-column")]
    missing: Missing,
    /// Column to leave out of the analysis (repeatable).
    #[arg(long = "exclude")]
    exclude: Vec<String>,
}

impl InputArgs {
    fn spec(&self) -> Result<InputSpec> {
        let csv = || -> Result<InputSpec> {
            if !self.delimiter.is_ascii() {
                return Err(Error::Config("delimiter must be a single ASCII character".into()));
            }
            Ok(InputSpec::Csv {
                path: self.input.clone(),
                options: CsvOptions {
                    delimiter: self.delimiter as u8,
                    missing_policy: match self.missing {
                        Missing::DropColumn => MissingPolicy::DropColumn,
                        Missing::Error => MissingPolicy::Error,
                    },
                    exclude: self.exclude.clone(),
                },
            })
        };
        match self.format {
            Some(Format::Csv) => csv(),
            Some(Format::Idx) => {
                let labels = self
                    .labels
                    .clone()
                    .ok_or_else(|| Error::Config("--format idx needs --labels".into()))?;
                Ok(InputSpec::Idx {
                    images: self.input.clone(),
                    labels,
                })
            }
            Some(Format::MatrixJson) => Ok(InputSpec::MatrixJson {
                path: self.input.clone(),
            }),
            None => match InputSpec::from_path(&self.input) {
                InputSpec::Csv { .. } => csv(),
                other => Ok(other),
            },
        }
    }

    fn load(&self) -> Result<DataMatrix> {
        Ok(self.spec()?.load()?.0)
    }
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    dims: Option<usize>,
    #[arg(long)]
    knn: Option<usize>,
    #[arg(long)]
    decay: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    factors: Option<usize>,
    /// Seed for the embedding, k-means and the factor fits.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EmbedArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, default_value_t = 10)]
    dims: usize,
    #[arg(long, default_value_t = 5)]
    knn: usize,
    #[arg(long, default_value_t = 40.0)]
    decay: f64,
    #[arg(long, default_value_t = 100)]
    t_max: usize,
    /// Fixed diffusion time (skips entropy-based selection).
    #[arg(long)]
    t: Option<usize>,
    #[arg(long, default_value_t = 2000)]
    n_landmark: usize,
    #[arg(long, default_value_t = 100)]
    pca_dims: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ClusterArgs {
    #[arg(long)]
    embedding: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = cluster::DEFAULT_MAX_ITER)]
    max_iter: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long)]
    clusters: PathBuf,
    /// Latent factors per cluster.
    #[arg(long, default_value_t = 10)]
    factors: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5e-3)]
    lr: f64,
    #[arg(long, default_value_t = 10_000)]
    max_iter: usize,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 1e-4)]
    ridge: f64,
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Output directory for `cluster{c}.json` reports (models go to `models/`).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory of `cluster{c}.json` factor reports.
    #[arg(long)]
    factors: PathBuf,
    #[arg(long)]
    cluster: usize,
    #[arg(long, default_value_t = 10)]
    top: usize,
    /// Write to this file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum FigureKind {
    Scatter,
    MiHeatmap,
    TcBar,
}

#[derive(Args)]
struct SvgArgs {
    #[arg(long, value_enum)]
    kind: FigureKind,
    /// Factor report (`mi_heatmap`, `tc_bar`).
    #[arg(long)]
    factors: Option<PathBuf>,
    /// Grid shape HxW for `mi_heatmap`.
    #[arg(long)]
    shape: Option<String>,
    /// Factors shown by `mi_heatmap`.
    #[arg(long, default_value_t = 6)]
    top: usize,
    /// 2-D embedding (`scatter`).
    #[arg(long)]
    embedding: Option<PathBuf>,
    /// Cluster assignment colouring the scatter.
    #[arg(long)]
    clusters: Option<PathBuf>,
    /// Colour the scatter by this column of --input instead.
    #[arg(long)]
    feature: Option<String>,
    /// Data matrix for --feature (CSV or matrix JSON).
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    alpha: f64,
    /// Samples per population.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value = "disjoint")]
    kind: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.8)]
    rho: f64,
    #[arg(long)]
    out: PathBuf,
    /// Also write the union of both populations' interactions here.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Also write the population label of every row here.
    #[arg(long)]
    labels_out: Option<PathBuf>,
}

#[derive(Args)]
struct AblationArgs {
    /// Grid JSON; omitted fields take the full-sweep defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Group,
    Topk,
}

#[derive(Args)]
struct ScoreArgs {
    /// Factor report JSON.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, value_enum, default_value = "topk")]
    mode: Mode,
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    create_parent(path)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_artifact<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    create_parent(path)?;
    pipeline::write_json(path, value)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run_pipeline(args: PipelineArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(out) = args.out {
        cfg.out_dir = out;
    }
    if let Some(t) = args.threads {
        cfg.threads = t;
    }
    if let Some(d) = args.dims {
        cfg.embed.d = d;
    }
    if let Some(k) = args.knn {
        cfg.embed.knn = k;
    }
    if let Some(decay) = args.decay {
        cfg.embed.decay = decay;
    }
    if let Some(k) = args.k {
        cfg.cluster.k = k;
    }
    if let Some(m) = args.factors {
        cfg.corex.m = m;
    }
    if let Some(seed) = args.seed {
        cfg.embed.seed = seed;
        cfg.cluster.seed = seed;
        cfg.corex.options.seed = seed;
    }
    let report = pipeline::run_pipeline(&cfg)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    info!("wrote {} cluster reports to {}", report.factors.len(), cfg.out_dir.display());
    Ok(())
}

fn run_embed(args: EmbedArgs) -> Result<()> {
    let data = args.input.load()?;
    let params = EmbedParams {
        d: args.dims,
        knn: args.knn,
        decay: args.decay,
        t_max: args.t_max,
        fixed_t: args.t,
        n_landmark: args.n_landmark,
        pca_dims: args.pca_dims,
        seed: args.seed,
        ..EmbedParams::default()
    };
    let (embedding, dropped) = pipeline::embed_stage(&data, &params)?;
    for d in data.drop_log.iter().chain(&dropped) {
        eprintln!("dropped column {} ({}): {}", d.index, d.name, d.reason);
    }
    write_artifact(&args.out, &embedding)
}

fn run_cluster(args: ClusterArgs) -> Result<()> {
    let embedding: Embedding = pipeline::read_json(&args.embedding)?;
    let assignment = cluster::kmeans_cluster(&embedding, args.k, args.seed, args.max_iter)?;
    write_artifact(&args.out, &assignment)
}

fn run_fit(args: FitArgs) -> Result<()> {
    let data = args.input.load()?;
    let assignment: ClusterAssignment = pipeline::read_json(&args.clusters)?;
    let params = FitParams {
        m: args.factors,
        options: hoi_scope::corex::CorexOptions {
            seed: args.seed,
            lr: args.lr,
            max_iter: args.max_iter,
            lambda: args.lambda,
            ridge: args.ridge,
            ..Default::default()
        },
    };
    let out = pipeline::fit_stage(&data, &assignment, &params, args.threads, 50, 0.01)?;
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    pipeline::write_fits(&args.out, &args.out.join(pipeline::MODELS_DIR), &out)
}

fn run_report(args: ReportArgs) -> Result<()> {
    let path = args.factors.join(pipeline::factor_file_name(args.cluster));
    if !path.exists() {
        return Err(Error::invalid(format!(
            "unknown cluster id {}: {} not found",
            args.cluster,
            path.display()
        )));
    }
    let report: FactorReport = pipeline::read_json(&path)?;
    let summary = pipeline::summarize_factors(&report, args.top);
    match args.out {
        Some(out) => write_artifact(&out, &summary),
        None => print_json(&summary),
    }
}

fn run_svg(args: SvgArgs) -> Result<()> {
    let kind = match args.kind {
        FigureKind::Scatter => SvgKind::Scatter,
        FigureKind::MiHeatmap => SvgKind::MiHeatmap,
        FigureKind::TcBar => SvgKind::TcBar,
    };
    let need = |p: &Option<PathBuf>, flag: &str| -> Result<PathBuf> {
        p.clone().ok_or_else(|| Error::Config(format!("this figure needs --{flag}")))
    };
    let text = match kind {
        SvgKind::Scatter => {
            let embedding: Embedding = pipeline::read_json(need(&args.embedding, "embedding")?)?;
            match &args.feature {
                Some(name) => {
                    let data = InputSpec::from_path(need(&args.input, "input")?).load()?.0;
                    let col = data
                        .column_names
                        .iter()
                        .position(|c| c == name)
                        .ok_or_else(|| Error::invalid(format!("no column named {name:?}")))?;
                    let values = data.values.column(col).to_vec();
                    svg::scatter(embedding.coords.view(), ColorBy::Feature { values: &values, name })?
                }
                None => {
                    let assignment: ClusterAssignment = pipeline::read_json(need(&args.clusters, "clusters")?)?;
                    svg::scatter(embedding.coords.view(), ColorBy::Cluster(&assignment.labels))?
                }
            }
        }
        SvgKind::MiHeatmap => {
            let report: FactorReport = pipeline::read_json(need(&args.factors, "factors")?)?;
            let shape = args.shape.as_deref().ok_or_else(|| Error::Config("mi_heatmap needs --shape".into()))?;
            let (h, w) = svg::parse_shape(shape)?;
            svg::mi_heatmap(&report, h, w, args.top)?
        }
        SvgKind::TcBar => {
            let report: FactorReport = pipeline::read_json(need(&args.factors, "factors")?)?;
            svg::tc_bar(&report)?
        }
    };
    write_text(&args.out, &text)
}

fn run_synth(args: SynthArgs) -> Result<()> {
    let kind: SynthKind = args.kind.parse()?;
    let cfg = SynthConfig {
        rho: args.rho,
        ..SynthConfig::new(kind, args.alpha, args.n, args.seed)
    };
    let (data, labels) = synth::sample_synthetic(&cfg)?;
    create_parent(&args.out)?;
    let mut w = csv::Writer::from_path(&args.out).map_err(|e| Error::data(format!("{}: {e}", args.out.display())))?;
    let csv_err = |e: csv::Error| Error::data(format!("{}: {e}", args.out.display()));
    w.write_record(&data.column_names).map_err(csv_err)?;
    for row in data.values.outer_iter() {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&args.out, e))?;
    if let Some(path) = &args.truth {
        let (a, b) = synth::truth_sets(kind, args.rho)?;
        write_artifact(path, &TruthFile::from_hois(&synth::union_truth(&a, &b))?)?;
    }
    if let Some(path) = &args.labels_out {
        let text: String = labels.iter().map(|l| format!("{l}\n")).collect();
        write_text(path, &text)?;
    }
    Ok(())
}

fn run_ablation(args: AblationArgs) -> Result<()> {
    let grid: AblationGrid = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => AblationGrid::default(),
    };
    let report = synth::run_ablation(&grid, Some(&args.out), args.threads)?;
    print_json(&report.summary())
}

fn run_score(args: ScoreArgs) -> Result<()> {
    let report: FactorReport = pipeline::read_json(&args.pred)?;
    let truths = TruthFile::load(&args.truth)?.to_hois()?;
    let preds: Vec<Vec<f64>> = report.order.iter().map(|&j| report.mi.row(j).to_vec()).collect();
    let protocol = match args.mode {
        Mode::Group => Protocol::Group,
        Mode::Topk => Protocol::Topk,
    };
    print_json(&eval::score(protocol, &preds, &truths)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pipeline(a) => run_pipeline(a),
        Command::Embed(a) => run_embed(a),
        Command::Cluster(a) => run_cluster(a),
        Command::Fit(a) => run_fit(a),
        Command::Report(a) => run_report(a),
        Command::Svg(a) => run_svg(a),
        Command::Synth(a) => run_synth(a),
        Command::Ablation(a) => run_ablation(a),
        Command::Score(a) => run_score(a),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
