//! Command-line front end: fitting, sampling, scoring, outlier AUC, and
//! image-grid export. The binary in `src/bin/mfa.rs` is a thin wrapper
//! around [`main_dispatch`] so every subcommand is testable in-process.

use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind as ClapErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;

use crate::dataio::{
    load_csv, load_idx, load_model, read_scores, save_model, write_csv, write_image_grid, Dataset,
    ModelFile,
};
use crate::em::{fit_em, EmConfig};
use crate::error::{MfaError, Result};
use crate::model::{sample, sample_from_component, total_loglik, PsiMode};
use crate::score::{roc_auc, score_samples, ScoreSet};
use crate::sgd::{fit_sgd, SgdConfig};

#[derive(Parser)]
#[command(
    name = "mfa",
    about = "Mixture-of-factor-analyzers toolkit: EM/SGD fitting, sampling, outlier scoring",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit by batch expectation-maximization (covariance parameterization).
    FitEm(FitEmArgs),
    /// Fit by constrained two-phase SGD (precision parameterization).
    FitSgd(FitSgdArgs),
    /// Draw samples from a saved model.
    Sample(SampleArgs),
    /// Print one log-likelihood per data row.
    Score(ScoreArgs),
    /// Outlier-detection ROC-AUC from a model or from score files.
    Auc(AucArgs),
    /// Export model parameters as PGM image grids.
    Export(ExportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DataFormat {
    Csv,
    Idx,
}

#[derive(Args)]
struct DataArgs {
    /// Input data: CSV or IDX (gzip not supported; decompress first).
    #[arg(long)]
    data: PathBuf,
    /// IDX label file accompanying `--data`.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Input format; inferred from the extension when omitted.
    #[arg(long, value_enum)]
    format: Option<DataFormat>,
    /// Treat the first CSV line as a header (a final `label` column becomes
    /// labels).
    #[arg(long)]
    has_header: bool,
}

impl DataArgs {
    fn load(&self) -> Result<Dataset> {
        let format = self.format.unwrap_or_else(|| {
            match self.data.extension().and_then(|e| e.to_str()) {
                Some("csv") => DataFormat::Csv,
                _ => DataFormat::Idx,
            }
        });
        match format {
            DataFormat::Csv => load_csv(&self.data, self.has_header),
            DataFormat::Idx => load_idx(&self.data, self.labels.as_ref()),
        }
    }
}

/// Parses class lists like `0,1,2` or `0-8` or `0-3,7`.
fn parse_classes(spec: &str) -> Result<Vec<i64>> {
    let mut out = Vec::new();
    for part in spec.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        if let Some((lo, hi)) = part.split_once('-') {
            let lo: i64 = lo.trim().parse().map_err(|_| MfaError::Parse {
                line: 0,
                message: format!("bad class range {part:?}"),
            })?;
            let hi: i64 = hi.trim().parse().map_err(|_| MfaError::Parse {
                line: 0,
                message: format!("bad class range {part:?}"),
            })?;
            out.extend(lo..=hi);
        } else {
            out.push(part.parse().map_err(|_| MfaError::Parse {
                line: 0,
                message: format!("bad class {part:?}"),
            })?);
        }
    }
    Ok(out)
}

fn maybe_filter(dataset: Dataset, classes: &Option<String>) -> Result<Dataset> {
    match classes {
        None => Ok(dataset),
        Some(spec) => dataset.filter_classes(&parse_classes(spec)?),
    }
}

/// Parses an image shape like `28x28`.
fn parse_image_shape(spec: &str) -> Result<(usize, usize)> {
    let (r, c) = spec.split_once(['x', 'X']).ok_or_else(|| MfaError::Parse {
        line: 0,
        message: format!("image shape {spec:?} must look like RxC"),
    })?;
    let rows = r.trim().parse().map_err(|_| MfaError::Parse {
        line: 0,
        message: format!("bad image rows {r:?}"),
    })?;
    let cols = c.trim().parse().map_err(|_| MfaError::Parse {
        line: 0,
        message: format!("bad image cols {c:?}"),
    })?;
    Ok((rows, cols))
}

#[derive(Args)]
struct FitEmArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Number of mixture components.
    #[arg(long)]
    k: usize,
    /// Latent dimension per component (0 gives a diagonal GMM).
    #[arg(long)]
    m: usize,
    /// Noise mode: free, tied, or isotropic.
    #[arg(long, default_value = "free")]
    psi: String,
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
    /// Relative log-likelihood tolerance.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 25)]
    kmeans_iters: usize,
    /// Keep only these label classes, e.g. `0,1,2` or `0-8`.
    #[arg(long)]
    classes: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output model file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitSgdArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    m: usize,
    /// Phase-one epochs (means only).
    #[arg(long, default_value_t = 15)]
    epochs1: usize,
    /// Phase-two epochs (all parameters).
    #[arg(long, default_value_t = 50)]
    epochs2: usize,
    #[arg(long, default_value_t = 100)]
    batch: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    /// Upper clip for the precision diagonal.
    #[arg(long, default_value_t = 20.0)]
    dmax: f64,
    /// Eigenvalue floor for the small matrices M_k.
    #[arg(long, default_value_t = 1e-4)]
    mmin: f64,
    /// Initialization target: M_k = (1 - minit) I.
    #[arg(long, default_value_t = 1e-4)]
    minit: f64,
    /// Means initialize uniformly in (-init-range, init-range).
    #[arg(long, default_value_t = 0.1)]
    init_range: f64,
    #[arg(long)]
    classes: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    /// Number of samples to draw.
    #[arg(long)]
    n: usize,
    /// Draw every sample from this component instead of the mixture.
    #[arg(long)]
    component: Option<usize>,
    /// Tile shape RxC; when given, samples are written as a PGM grid
    /// instead of CSV.
    #[arg(long)]
    image_shape: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    classes: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AucArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    /// Data scored as inliers (requires --model).
    #[arg(long)]
    inlier_data: Option<PathBuf>,
    #[arg(long)]
    inlier_labels: Option<PathBuf>,
    #[arg(long)]
    inlier_classes: Option<String>,
    /// Data scored as outliers (requires --model).
    #[arg(long)]
    outlier_data: Option<PathBuf>,
    #[arg(long)]
    outlier_labels: Option<PathBuf>,
    #[arg(long)]
    outlier_classes: Option<String>,
    /// Pre-computed inlier scores, one per line (alternative to --model).
    #[arg(long)]
    scores_a: Option<PathBuf>,
    /// Pre-computed outlier scores, one per line.
    #[arg(long)]
    scores_b: Option<PathBuf>,
    #[arg(long)]
    has_header: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportWhat {
    Means,
    Loadings,
    Noise,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    model: PathBuf,
    /// Which parameters to render.
    #[arg(long, value_enum)]
    what: ExportWhat,
    /// Tile shape RxC (data dimension must equal R*C).
    #[arg(long)]
    image_shape: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Runs the CLI against explicit arguments, returning the process exit code:
/// 0 on success, 2 for usage errors (bad flags, missing files), 1 otherwise.
pub fn main_dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ClapErrorKind::DisplayHelp | ClapErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = err.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(MfaError::Io(e)) if e.kind() == ErrorKind::NotFound => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::FitEm(args) => cmd_fit_em(args),
        Command::FitSgd(args) => cmd_fit_sgd(args),
        Command::Sample(args) => cmd_sample(args),
        Command::Score(args) => cmd_score(args),
        Command::Auc(args) => cmd_auc(args),
        Command::Export(args) => cmd_export(args),
    }
}

fn cmd_fit_em(args: FitEmArgs) -> Result<()> {
    let dataset = maybe_filter(args.data.load()?, &args.classes)?;
    let config = EmConfig {
        max_iters: args.max_iters,
        rel_tol: args.tol,
        psi_mode: PsiMode::parse(&args.psi)?,
        kmeans_iters: args.kmeans_iters,
        seed: args.seed,
    };
    let (model, report) = fit_em(&dataset.data, args.k, args.m, &config)?;
    save_model(&ModelFile::Covariance(model), &args.out)?;
    println!(
        "final log-likelihood: {}",
        report.loglik_trace.last().copied().unwrap_or(f64::NAN)
    );
    println!(
        "iterations: {} converged: {} wall time: {:.2}s",
        report.iterations_run, report.converged, report.wall_time
    );
    Ok(())
}

fn cmd_fit_sgd(args: FitSgdArgs) -> Result<()> {
    let dataset = maybe_filter(args.data.load()?, &args.classes)?;
    let config = SgdConfig {
        epochs_phase1: args.epochs1,
        epochs_phase2: args.epochs2,
        batch_size: args.batch,
        learning_rate: args.lr,
        d_max: args.dmax,
        m_min: args.mmin,
        m_init: args.minit,
        centroid_init_range: (-args.init_range, args.init_range),
        seed: args.seed,
        ..SgdConfig::default()
    };
    let (model, report) = fit_sgd(&dataset.data, args.k, args.m, &config)?;
    save_model(&ModelFile::Precision(model), &args.out)?;
    println!(
        "final log-likelihood: {}",
        report.loglik_trace.last().copied().unwrap_or(f64::NAN)
    );
    println!(
        "epochs: {} wall time: {:.2}s",
        report.iterations_run, report.wall_time
    );
    Ok(())
}

fn cmd_sample(args: SampleArgs) -> Result<()> {
    let model = load_model(&args.model)?.to_generative()?;
    if let Some(k) = args.component {
        if k >= model.k() {
            return Err(MfaError::InvalidModel(format!(
                "component {k} out of range (model has {})",
                model.k()
            )));
        }
    }
    let (data, labels) = match args.component {
        Some(k) => sample_from_component(&model, k, args.n, args.seed),
        None => sample(&model, args.n, args.seed),
    };
    match &args.image_shape {
        Some(spec) => {
            let shape = parse_image_shape(spec)?;
            write_image_grid(&data, shape, &args.out, (0.0, 1.0))?;
        }
        None => {
            let dataset = Dataset {
                data,
                labels: Some(labels.into_iter().map(|k| k as i64).collect()),
                source_shape: None,
            };
            write_csv(&dataset, &args.out)?;
        }
    }
    Ok(())
}

fn cmd_score(args: ScoreArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let dataset = maybe_filter(args.data.load()?, &args.classes)?;
    let scores = score_samples(&model, &dataset.data)?;
    let mut text = String::new();
    for s in &scores {
        text.push_str(&format!("{s:?}\n"));
    }
    match &args.out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_auc(args: AucArgs) -> Result<()> {
    let (inliers, outliers) = match (&args.scores_a, &args.scores_b) {
        (Some(a), Some(b)) => (read_scores(a)?, read_scores(b)?),
        (None, None) => {
            let model_path = args.model.as_ref().ok_or_else(|| {
                MfaError::InvalidModel(
                    "auc needs either --model with data files or --scores-a/--scores-b".into(),
                )
            })?;
            let model = load_model(model_path)?;
            let load_side = |data: &Option<PathBuf>,
                             labels: &Option<PathBuf>,
                             classes: &Option<String>,
                             side: &'static str|
             -> Result<Vec<f64>> {
                let path = data.as_ref().ok_or_else(|| {
                    MfaError::InvalidModel(format!("auc: missing --{side}-data"))
                })?;
                let data_args = DataArgs {
                    data: path.clone(),
                    labels: labels.clone(),
                    format: None,
                    has_header: args.has_header,
                };
                let ds = maybe_filter(data_args.load()?, classes)?;
                score_samples(&model, &ds.data)
            };
            (
                load_side(
                    &args.inlier_data,
                    &args.inlier_labels,
                    &args.inlier_classes,
                    "inlier",
                )?,
                load_side(
                    &args.outlier_data,
                    &args.outlier_labels,
                    &args.outlier_classes,
                    "outlier",
                )?,
            )
        }
        _ => {
            return Err(MfaError::InvalidModel(
                "auc: --scores-a and --scores-b must be given together".into(),
            ))
        }
    };
    let auc = roc_auc(&ScoreSet {
        inlier_scores: inliers,
        outlier_scores: outliers,
    })?;
    println!("{auc}");
    if let Some(path) = &args.out {
        std::fs::write(path, format!("{auc}\n"))?;
    }
    Ok(())
}

/// Inserts a suffix before the file extension: `x.pgm` -> `x_0.pgm`.
fn path_with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    let ext = path.extension().and_then(|s| s.to_str());
    let name = match ext {
        Some(ext) => format!("{stem}{suffix}.{ext}"),
        None => format!("{stem}{suffix}"),
    };
    path.with_file_name(name)
}

fn cmd_export(args: ExportArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let shape = parse_image_shape(&args.image_shape)?;
    let (k, d, m) = model.dims();

    match args.what {
        ExportWhat::Means => {
            let mut rows = DMatrix::zeros(k, d);
            let means: Vec<_> = match &model {
                ModelFile::Covariance(mm) => mm.components.iter().map(|c| c.mean.clone()).collect(),
                ModelFile::Precision(pm) => pm.components.iter().map(|c| c.mean.clone()).collect(),
            };
            for (c, mean) in means.iter().enumerate() {
                for j in 0..d {
                    rows[(c, j)] = mean[j];
                }
            }
            write_image_grid(&rows, shape, &args.out, (0.0, 1.0))?;
            println!("wrote {}", args.out.display());
        }
        ExportWhat::Loadings => {
            // One grid per latent direction; each tile belongs to the
            // component at the same grid position as in the means export.
            let loadings: Vec<DMatrix<f64>> = match &model {
                ModelFile::Covariance(mm) => {
                    mm.components.iter().map(|c| c.loading.clone()).collect()
                }
                ModelFile::Precision(pm) => pm
                    .components
                    .iter()
                    .map(|c| c.prec_loading.clone())
                    .collect(),
            };
            for col in 0..m {
                let mut rows = DMatrix::zeros(k, d);
                for (c, loading) in loadings.iter().enumerate() {
                    for j in 0..d {
                        rows[(c, j)] = loading[(j, col)];
                    }
                }
                let path = path_with_suffix(&args.out, &format!("_{col}"));
                write_image_grid(&rows, shape, &path, (-1.0, 1.0))?;
                println!("wrote {}", path.display());
            }
        }
        ExportWhat::Noise => {
            let diags: Vec<_> = match &model {
                ModelFile::Covariance(mm) => {
                    mm.components.iter().map(|c| c.noise.clone()).collect()
                }
                ModelFile::Precision(pm) => {
                    pm.components.iter().map(|c| c.prec_diag()).collect()
                }
            };
            let mut rows = DMatrix::zeros(k, d);
            for (c, diag) in diags.iter().enumerate() {
                for j in 0..d {
                    rows[(c, j)] = diag[j];
                }
            }
            let lo = rows.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = rows.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let range = if hi > lo { (lo, hi) } else { (lo, lo + 1.0) };
            write_image_grid(&rows, shape, &args.out, range)?;
            println!("wrote {}", args.out.display());
        }
    }
    Ok(())
}
