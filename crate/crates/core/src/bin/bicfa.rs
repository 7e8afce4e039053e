//! Command-line pipeline: simulate benchmark data, fit the model, score a
//! fit against ground truth, build co-expression networks from one or more
//! fits, and quantile-normalize expression matrices.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error (malformed or
//! inconsistent files), 4 numerical failure.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};

use bicfa::io::{
    self, digest_file, format_value, read_checkpoint, read_labels, read_manifest, read_matrix,
    read_trace, read_truth, write_checkpoint, write_column, write_edges, write_manifest,
    write_matrix, write_trace, write_truth, Checkpoint, IoError, ManifestComponent, RunManifest,
    TruthFile,
};
use bicfa::metrics::{self, JaccardMode, MetricsError};
use bicfa::network::{
    self, run_edges_from_parts, CovariateLabels, NetType, NetworkError, NetworkSpec, RunParts,
    StabilityRule, StabilityWindow,
};
use bicfa::sim::{self, SimConfig, SimError};
use bicfa::types::{Bicluster, DataMatrix, Hyperparameters, ModelError};
use bicfa::vem::{FitConfig, FitResult, Fitter, IterationTrace, VemError};

#[derive(Parser)]
#[command(
    name = "bicfa",
    version,
    about = "Doubly sparse Bayesian factor analysis: biclustering and \
             covariate-specific co-expression networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a benchmark dataset with a known decomposition
    Simulate(SimulateArgs),
    /// Fit the model and write the decomposition, classification, and manifest
    Fit(FitArgs),
    /// Compare a fit directory against simulation ground truth
    Score(ScoreArgs),
    /// Build an edge list from one or more fit directories
    Network(NetworkArgs),
    /// Project each gene onto standard normal quantiles
    Normalize(NormalizeArgs),
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fit(#[from] VemError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

fn model_error_code(err: &ModelError) -> u8 {
    match err {
        ModelError::InvalidHyperparameter { .. } | ModelError::InvalidThreshold(_) => EXIT_USAGE,
        ModelError::DimensionMismatch { .. } | ModelError::NonFinite { .. }
        | ModelError::Invalid(_) => EXIT_DATA,
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) | CliError::Io(_) | CliError::Metrics(_) => EXIT_DATA,
            CliError::Model(err) => model_error_code(err),
            CliError::Fit(err) => match err {
                VemError::InvalidConfig(_) => EXIT_USAGE,
                VemError::Model(m) => model_error_code(m),
                VemError::WarmStart(_) | VemError::Singular { .. } | VemError::AllZeroModel => {
                    EXIT_NUMERICAL
                }
            },
            CliError::Sim(err) => match err {
                SimError::InvalidConfig(_) => EXIT_USAGE,
                SimError::Infeasible { .. } => EXIT_NUMERICAL,
                SimError::Model(m) => model_error_code(m),
            },
            CliError::Network(err) => match err {
                NetworkError::InvalidSpec(_) | NetworkError::MissingCheckpoint { .. } => {
                    EXIT_USAGE
                }
                NetworkError::LabelCount { .. }
                | NetworkError::DimensionMismatch(_)
                | NetworkError::EmptyGeneSubset
                | NetworkError::Wilcoxon(_) => EXIT_DATA,
                NetworkError::Factorization { .. } | NetworkError::PcorOutOfRange { .. } => {
                    EXIT_NUMERICAL
                }
            },
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(args) => run_simulate(args),
        Command::Fit(args) => run_fit(args),
        Command::Score(args) => run_score(args),
        Command::Network(args) => run_network(args),
        Command::Normalize(args) => run_normalize(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}

/// --threads beats BICFA_THREADS beats single-threaded.
fn resolve_threads(flag: Option<usize>) -> Result<usize, CliError> {
    let threads = match flag {
        Some(t) => t,
        None => match std::env::var("BICFA_THREADS") {
            Ok(raw) => raw.parse().map_err(|_| {
                CliError::Usage(format!("BICFA_THREADS must be a positive integer, got {raw:?}"))
            })?,
            Err(_) => 1,
        },
    };
    if threads == 0 {
        return Err(CliError::Usage("thread count must be at least 1".into()));
    }
    Ok(threads)
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|source| {
        CliError::Io(IoError::Io { path: dir.to_path_buf(), source })
    })
}

// ---------------------------------------------------------------------------
// simulate

#[derive(Args)]
struct SimulateArgs {
    /// Output directory (y.tsv, lambda_true.tsv, x_true.tsv, truth.json)
    #[arg(long)]
    out: PathBuf,
    /// Benchmark layout: sim1-ln, sim1-hn, sim2-ln, sim2-hn. sim1 is
    /// sparse-only, sim2 adds dense components; -ln and -hn pick unit or
    /// doubled noise variance. Bare sim1/sim2 mean low noise.
    #[arg(long, default_value = "sim1-ln")]
    preset: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Override the preset's gene count
    #[arg(long)]
    p: Option<usize>,
    /// Override the preset's sample count
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    k_sparse: Option<usize>,
    #[arg(long)]
    k_dense: Option<usize>,
    /// Smallest per-component support size
    #[arg(long)]
    m_min: Option<usize>,
    /// Largest per-component support size
    #[arg(long)]
    m_max: Option<usize>,
    #[arg(long)]
    value_sd: Option<f64>,
    #[arg(long)]
    max_shared: Option<usize>,
    #[arg(long)]
    noise_var: Option<f64>,
    /// Keep loading k paired with factor k instead of shuffling the pairing
    #[arg(long)]
    no_shuffle: bool,
}

fn preset_config(name: &str, seed: u64) -> Result<SimConfig, CliError> {
    let config = match name {
        "sim1" | "sim1-ln" => SimConfig::sparse_only(1.0, seed),
        "sim1-hn" => SimConfig::sparse_only(2.0, seed),
        "sim2" | "sim2-ln" => SimConfig::mixed(1.0, seed),
        "sim2-hn" => SimConfig::mixed(2.0, seed),
        other => {
            return Err(CliError::Usage(format!(
                "unknown preset {other:?} (expected sim1-ln, sim1-hn, sim2-ln, or sim2-hn)"
            )))
        }
    };
    Ok(config)
}

fn run_simulate(args: SimulateArgs) -> Result<(), CliError> {
    let mut config = preset_config(&args.preset, args.seed)?;
    if let Some(p) = args.p {
        config.p = p;
    }
    if let Some(n) = args.n {
        config.n = n;
    }
    if let Some(k) = args.k_sparse {
        config.k_sparse = k;
    }
    if let Some(k) = args.k_dense {
        config.k_dense = k;
    }
    if let Some(m) = args.m_min {
        config.m_range.0 = m;
    }
    if let Some(m) = args.m_max {
        config.m_range.1 = m;
    }
    if let Some(sd) = args.value_sd {
        config.value_sd = sd;
    }
    if let Some(s) = args.max_shared {
        config.max_shared = s;
    }
    if let Some(v) = args.noise_var {
        config.noise_var = v;
    }
    if args.no_shuffle {
        config.shuffle_pairing = false;
    }

    let (data, truth) = sim::simulate(&config)?;
    ensure_dir(&args.out)?;
    let k = truth.lambda_true.ncols();
    let comp_ids: Vec<String> = (0..k).map(|kk| format!("c{kk}")).collect();
    write_matrix(&args.out.join("y.tsv"), &data)?;
    write_matrix(
        &args.out.join("lambda_true.tsv"),
        &DataMatrix::new(truth.lambda_true.clone(), data.gene_ids.clone(), comp_ids.clone())?,
    )?;
    write_matrix(
        &args.out.join("x_true.tsv"),
        &DataMatrix::new(truth.x_true.clone(), comp_ids, data.sample_ids.clone())?,
    )?;
    write_truth(
        &args.out.join("truth.json"),
        &TruthFile {
            config,
            loading_sparse: truth.loading_sparse.clone(),
            factor_sparse: truth.factor_sparse.clone(),
            biclusters: truth.biclusters.clone(),
        },
    )?;
    println!(
        "simulated {} x {} with {} sparse + {} dense components ({} biclusters) into {}",
        config.p,
        config.n,
        config.k_sparse,
        config.k_dense,
        truth.biclusters.len(),
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// fit

#[derive(Args)]
struct HyperArgs {
    /// Loading-side shrinkage chain shapes (three-parameter beta); 0.5
    /// everywhere is the horseshoe
    #[arg(long, default_value_t = 0.5)]
    a: f64,
    #[arg(long, default_value_t = 0.5)]
    b: f64,
    #[arg(long, default_value_t = 0.5)]
    c: f64,
    #[arg(long, default_value_t = 0.5)]
    d: f64,
    #[arg(long, default_value_t = 0.5)]
    e: f64,
    #[arg(long, default_value_t = 0.5)]
    f: f64,
    /// Rate of the top-level loading-side gamma
    #[arg(long, default_value_t = 1.0)]
    nu: f64,
    #[arg(long, default_value_t = 0.5)]
    a_x: f64,
    #[arg(long, default_value_t = 0.5)]
    b_x: f64,
    #[arg(long, default_value_t = 0.5)]
    c_x: f64,
    #[arg(long, default_value_t = 0.5)]
    d_x: f64,
    #[arg(long, default_value_t = 0.5)]
    e_x: f64,
    #[arg(long, default_value_t = 0.5)]
    f_x: f64,
    /// Rate of the top-level factor-side gamma
    #[arg(long, default_value_t = 1.0)]
    xi: f64,
    /// Beta-Bernoulli pseudo-counts for the sparse/dense mixture
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 1.0)]
    alpha_x: f64,
    #[arg(long, default_value_t = 1.0)]
    beta_x: f64,
}

impl HyperArgs {
    fn build(&self) -> Hyperparameters {
        Hyperparameters {
            a: self.a,
            b: self.b,
            c: self.c,
            d: self.d,
            e: self.e,
            f: self.f,
            nu: self.nu,
            a_x: self.a_x,
            b_x: self.b_x,
            c_x: self.c_x,
            d_x: self.d_x,
            e_x: self.e_x,
            f_x: self.f_x,
            xi: self.xi,
            alpha: self.alpha,
            beta: self.beta,
            alpha_x: self.alpha_x,
            beta_x: self.beta_x,
        }
    }
}

#[derive(Args)]
struct FitArgs {
    /// Expression matrix TSV (genes x samples)
    #[arg(long)]
    input: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Initial number of components
    #[arg(long, default_value_t = 50)]
    k: usize,
    /// Variational sweeps (always run to completion)
    #[arg(long, default_value_t = 5000)]
    iterations: usize,
    /// Gibbs sweeps used to initialize
    #[arg(long, default_value_t = 100)]
    warm_start: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: BICFA_THREADS or 1)
    #[arg(long)]
    threads: Option<usize>,
    /// Component pruning threshold on the largest absolute entry
    #[arg(long, default_value_t = 1e-5)]
    prune_eps: f64,
    /// Sparse/dense classification threshold on the mixture posterior
    #[arg(long, default_value_t = 0.9)]
    class_threshold: f64,
    /// Relative residual-change tolerance (reported, never stops the run)
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// Write out/checkpoint.bin every N sweeps
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Resume from a checkpoint; configuration and hyperparameters are
    /// restored from it (only --threads still applies)
    #[arg(long, conflicts_with = "from_manifest")]
    resume: Option<PathBuf>,
    /// Re-run a recorded fit: configuration and hyperparameters come from
    /// the manifest and the input file must match its digest
    #[arg(long)]
    from_manifest: Option<PathBuf>,
    #[command(flatten)]
    hyper: HyperArgs,
}

fn component_id_strings(ids: &[u32]) -> Vec<String> {
    ids.iter().map(|id| format!("c{id}")).collect()
}

fn write_fit_outputs(
    out: &Path,
    data: &DataMatrix,
    fit: &FitResult,
    manifest: &RunManifest,
) -> Result<(), CliError> {
    let state = &fit.state;
    let k = state.n_components();
    let comp_ids = component_id_strings(&state.component_ids);

    write_matrix(
        &out.join("lambda.tsv"),
        &DataMatrix::new(state.loading.lambda.clone(), data.gene_ids.clone(), comp_ids.clone())?,
    )?;
    write_matrix(
        &out.join("x_mean.tsv"),
        &DataMatrix::new(state.factor.x_mean.clone(), comp_ids.clone(), data.sample_ids.clone())?,
    )?;

    let mut x_cov_sum = DMatrix::zeros(k, k);
    for cov in &state.factor.x_cov {
        x_cov_sum += cov;
    }
    write_matrix(
        &out.join("x_cov_sum.tsv"),
        &DataMatrix::new(x_cov_sum, comp_ids.clone(), comp_ids.clone())?,
    )?;
    let cov_traces = DVector::from_iterator(
        state.factor.x_cov.len(),
        state.factor.x_cov.iter().map(|cov| cov.trace()),
    );
    write_column(
        &out.join("x_cov_trace.tsv"),
        "sample_id",
        "posterior_variance_trace",
        &data.sample_ids,
        &cov_traces,
    )?;
    write_column(&out.join("psi.tsv"), "gene_id", "psi", &data.gene_ids, &state.noise.psi)?;

    let mut table =
        String::from("component_id\tclass\tz\to\tpve\tambiguous_loading\tambiguous_factor\n");
    for kk in 0..k {
        let class = &fit.classes[kk];
        let _ = writeln!(
            table,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            comp_ids[kk],
            class.label(),
            format_value(class.z),
            format_value(class.o),
            format_value(fit.pve[kk]),
            class.ambiguous_loading,
            class.ambiguous_factor
        );
    }
    io::write_atomic(&out.join("components.tsv"), table.as_bytes())?;

    write_trace(&out.join("trace.json"), &fit.trace)?;
    write_manifest(&out.join("manifest.json"), manifest)?;
    Ok(())
}

fn run_fit(args: FitArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let threads = resolve_threads(args.threads)?;
    let data = read_matrix(&args.input)?;
    let input_digest = digest_file(&args.input)?;

    let (hyper, config, resumed) = if let Some(ckpt_path) = &args.resume {
        let cp = read_checkpoint(ckpt_path)?;
        let config = FitConfig { threads, ..cp.config };
        (cp.hyper, config, Some(cp.snapshot))
    } else if let Some(manifest_path) = &args.from_manifest {
        let recorded = read_manifest(manifest_path)?;
        if recorded.input_digest != input_digest {
            return Err(CliError::Io(IoError::DigestMismatch {
                path: args.input.clone(),
                expected: recorded.input_digest,
                found: input_digest,
            }));
        }
        let config = FitConfig { threads, ..recorded.config };
        (recorded.hyperparameters, config, None)
    } else {
        let config = FitConfig {
            k_init: args.k,
            max_iterations: args.iterations,
            warm_start_sweeps: args.warm_start,
            prune_eps: args.prune_eps,
            classification_threshold: args.class_threshold,
            convergence_tol: args.tol,
            seed: args.seed,
            threads,
        };
        (args.hyper.build(), config, None)
    };

    ensure_dir(&args.out)?;
    let mut fitter = match resumed {
        Some(snapshot) => Fitter::resume(&data.values, &hyper, &config, snapshot)?,
        None => Fitter::new(&data.values, &hyper, &config)?,
    };
    match args.checkpoint_every {
        Some(0) => {
            return Err(CliError::Usage("--checkpoint-every must be at least 1".into()));
        }
        Some(every) => {
            let ckpt = args.out.join("checkpoint.bin");
            while fitter.step()? {
                if fitter.iteration() % every == 0 {
                    write_checkpoint(
                        &ckpt,
                        &Checkpoint { hyper, config, snapshot: fitter.snapshot() },
                    )?;
                }
            }
        }
        None => fitter.run()?,
    }
    let fit = fitter.finish()?;

    let manifest = RunManifest {
        run_id: RunManifest::derive_run_id(&input_digest, &hyper, &config),
        seed: config.seed,
        hyperparameters: hyper,
        config,
        input_path: args.input.display().to_string(),
        input_digest,
        components: (0..fit.state.n_components())
            .map(|kk| ManifestComponent {
                id: fit.state.component_ids[kk],
                class: fit.classes[kk],
                pve: fit.pve[kk],
            })
            .collect(),
        converged_at: fit.converged_at,
        elapsed_seconds: started.elapsed().as_secs_f64(),
    };
    write_fit_outputs(&args.out, &data, &fit, &manifest)?;

    let mut by_class: HashMap<&str, usize> = HashMap::new();
    for class in &fit.classes {
        *by_class.entry(class.label()).or_default() += 1;
    }
    let mut summary: Vec<String> =
        by_class.iter().map(|(label, count)| format!("{count} {label}")).collect();
    summary.sort();
    println!(
        "fit {}: {} components kept ({}), {} into {}",
        manifest.run_id,
        fit.state.n_components(),
        if summary.is_empty() { "none".to_owned() } else { summary.join(", ") },
        match fit.converged_at {
            Some(t) => format!("converged at sweep {t}"),
            None => "no convergence within tolerance".to_owned(),
        },
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// score

#[derive(Args)]
struct ScoreArgs {
    /// Simulation output directory (truth.json, lambda_true.tsv)
    #[arg(long)]
    truth: PathBuf,
    /// Fit output directory
    #[arg(long)]
    fit: PathBuf,
    /// Metrics TSV to write
    #[arg(long)]
    out: PathBuf,
    /// Support threshold on recovered loading/factor entries
    #[arg(long, default_value_t = 1e-5)]
    support_eps: f64,
}

/// Rows of components.tsv that matter to downstream commands.
struct ComponentRow {
    id_string: String,
    label: String,
}

fn read_component_table(dir: &Path) -> Result<Vec<ComponentRow>, CliError> {
    let path = dir.join("components.tsv");
    let text = std::fs::read_to_string(&path)
        .map_err(|source| CliError::Io(IoError::Io { path: path.clone(), source }))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 7 {
            return Err(CliError::Io(IoError::Parse {
                path,
                line: lineno + 1,
                message: format!("expected 7 fields, found {}", fields.len()),
            }));
        }
        rows.push(ComponentRow { id_string: fields[0].to_owned(), label: fields[1].to_owned() });
    }
    Ok(rows)
}

/// Biclusters implied by a fit directory: components labeled sparse/sparse,
/// supports read off the stored loading and factor matrices. A fit that
/// pruned everything has an empty component table and no readable matrices;
/// it scores as an empty found set.
fn biclusters_from_fit(
    dir: &Path,
    support_eps: f64,
) -> Result<(Vec<Bicluster>, Option<(DataMatrix, DataMatrix)>), CliError> {
    let components = read_component_table(dir)?;
    if components.is_empty() {
        return Ok((Vec::new(), None));
    }
    let lambda = read_matrix(&dir.join("lambda.tsv"))?;
    let x_mean = read_matrix(&dir.join("x_mean.tsv"))?;
    if lambda.sample_ids != x_mean.gene_ids {
        return Err(CliError::Data(format!(
            "{}: lambda.tsv columns and x_mean.tsv rows disagree",
            dir.display()
        )));
    }
    let mut found = Vec::new();
    for (kk, row) in components.iter().enumerate() {
        if lambda.sample_ids.get(kk) != Some(&row.id_string) {
            return Err(CliError::Data(format!(
                "{}: components.tsv row {} is {} but lambda.tsv column is {}",
                dir.display(),
                kk + 1,
                row.id_string,
                lambda.sample_ids.get(kk).map_or("missing", |s| s.as_str())
            )));
        }
        if row.label != "SS" {
            continue;
        }
        let genes: Vec<f64> = lambda.values.column(kk).iter().copied().collect();
        let samples: Vec<f64> = x_mean.values.row(kk).iter().copied().collect();
        let id = row.id_string.trim_start_matches('c').parse().unwrap_or(kk as u32);
        let bicluster = Bicluster {
            component_id: id,
            genes: bicfa::types::support(&genes, support_eps),
            samples: bicfa::types::support(&samples, support_eps),
        };
        if !bicluster.genes.is_empty() && !bicluster.samples.is_empty() {
            found.push(bicluster);
        }
    }
    Ok((found, Some((lambda, x_mean))))
}

fn run_score(args: ScoreArgs) -> Result<(), CliError> {
    let truth = read_truth(&args.truth.join("truth.json"))?;
    let lambda_true = read_matrix(&args.truth.join("lambda_true.tsv"))?;
    let (found, parts) = biclusters_from_fit(&args.fit, args.support_eps)?;

    let cells = metrics::recovery_relevance(&truth.biclusters, &found, JaccardMode::Cells)?;
    let genes = metrics::recovery_relevance(&truth.biclusters, &found, JaccardMode::Genes)?;
    let (stability, redundant) = match &parts {
        // a fit that kept nothing matches nothing
        None => (0.0, 0),
        Some((lambda_est, x_mean)) => {
            let stability = if lambda_est.values.ncols() == 0 {
                0.0
            } else {
                metrics::stability_index(&lambda_true.values, &lambda_est.values)?
            };
            let supports: Vec<(Vec<usize>, Vec<usize>)> = (0..lambda_est.values.ncols())
                .map(|kk| {
                    let genes: Vec<f64> = lambda_est.values.column(kk).iter().copied().collect();
                    let samples: Vec<f64> = x_mean.values.row(kk).iter().copied().collect();
                    (
                        bicfa::types::support(&genes, args.support_eps),
                        bicfa::types::support(&samples, args.support_eps),
                    )
                })
                .collect();
            (stability, metrics::redundancy_count(&supports))
        }
    };

    let mut table = String::from("metric\tvalue\n");
    for (name, value) in [
        ("recovery_cells", cells.recovery),
        ("relevance_cells", cells.relevance),
        ("recovery_genes", genes.recovery),
        ("relevance_genes", genes.relevance),
        ("stability_index", stability),
    ] {
        let _ = writeln!(table, "{name}\t{}", format_value(value));
    }
    let _ = writeln!(table, "redundant_pairs\t{redundant}");
    let _ = writeln!(table, "true_biclusters\t{}", truth.biclusters.len());
    let _ = writeln!(table, "found_biclusters\t{}", found.len());
    io::write_atomic(&args.out, table.as_bytes())?;
    println!(
        "scored {} against {}: cell recovery {:.3}, relevance {:.3} ({} found / {} true)",
        args.fit.display(),
        args.truth.display(),
        cells.recovery,
        cells.relevance,
        found.len(),
        truth.biclusters.len()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// network

#[derive(Args)]
struct NetworkArgs {
    /// Fit directory; repeat for an ensemble over multiple runs
    #[arg(long = "fit", required = true)]
    fits: Vec<PathBuf>,
    /// Edge list TSV to write
    #[arg(long)]
    out: PathBuf,
    /// Covariate labels (sample_id <TAB> label), required for subset types
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "ubiquitous")]
    net_type: NetTypeArg,
    /// Covariate class for --net-type specific
    #[arg(long)]
    target_class: Option<String>,
    /// Two comma-separated covariate classes for --net-type differential
    #[arg(long)]
    class_pair: Option<String>,
    /// Posterior probability an edge needs inside each run
    #[arg(long, default_value_t = 0.8)]
    edge_prob: f64,
    /// Rank-sum p-value cutoff for differential components
    #[arg(long, default_value_t = 1e-10)]
    wilcoxon_p: f64,
    /// Runs an edge must appear in (use 1 for a single fit)
    #[arg(long, default_value_t = 10)]
    replication: usize,
    /// Gene/sample support change tolerated between trace checkpoints
    #[arg(long, default_value_t = 50)]
    stability_max_change: usize,
    /// Two comma-separated sweep numbers to compare; default: half of the
    /// run's sweeps and the final sweep
    #[arg(long)]
    stability_window: Option<String>,
    /// Require both sides to exceed the change cap before discarding
    /// (default: either side suffices)
    #[arg(long)]
    and_rule: bool,
    /// Disable the stability filter
    #[arg(long)]
    no_stability: bool,
    /// Use every factor value in the rank-sum test, not just nonzero ones
    #[arg(long)]
    all_values: bool,
    /// Support threshold on loadings and factors
    #[arg(long, default_value_t = 1e-5)]
    support_eps: f64,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum NetTypeArg {
    Ubiquitous,
    Specific,
    Differential,
}

impl From<NetTypeArg> for NetType {
    fn from(v: NetTypeArg) -> Self {
        match v {
            NetTypeArg::Ubiquitous => NetType::Ubiquitous,
            NetTypeArg::Specific => NetType::SubsetSpecific,
            NetTypeArg::Differential => NetType::SubsetDifferential,
        }
    }
}

/// One fit directory loaded back for the network pipeline. `parts` is None
/// when the fit kept no components.
struct LoadedRun {
    dir: PathBuf,
    parts: Option<RunParts>,
    trace: Vec<IterationTrace>,
    gene_ids: Vec<String>,
    sample_ids: Vec<String>,
}

fn read_run(dir: &Path) -> Result<LoadedRun, CliError> {
    let components = read_component_table(dir)?;
    let trace = read_trace(&dir.join("trace.json"))?;
    let (psi_ids, psi) = io::read_column(&dir.join("psi.tsv"))?;
    let x_mean = read_matrix(&dir.join("x_mean.tsv"))?;
    if components.is_empty() {
        return Ok(LoadedRun {
            dir: dir.to_path_buf(),
            parts: None,
            trace,
            gene_ids: psi_ids,
            sample_ids: x_mean.sample_ids,
        });
    }
    let lambda = read_matrix(&dir.join("lambda.tsv"))?;
    let x_cov_sum = read_matrix(&dir.join("x_cov_sum.tsv"))?;

    let comp_ids: Vec<&String> = components.iter().map(|r| &r.id_string).collect();
    let check = |what: &str, got: &[String]| -> Result<(), CliError> {
        if got.iter().zip(&comp_ids).all(|(a, b)| a == *b) && got.len() == comp_ids.len() {
            Ok(())
        } else {
            Err(CliError::Data(format!(
                "{}: {what} component ids disagree with components.tsv",
                dir.display()
            )))
        }
    };
    check("lambda.tsv", &lambda.sample_ids)?;
    check("x_mean.tsv", &x_mean.gene_ids)?;
    check("x_cov_sum.tsv", &x_cov_sum.gene_ids)?;
    check("x_cov_sum.tsv", &x_cov_sum.sample_ids)?;
    if psi_ids != lambda.gene_ids {
        return Err(CliError::Data(format!(
            "{}: psi.tsv gene ids disagree with lambda.tsv",
            dir.display()
        )));
    }

    let component_ids = components
        .iter()
        .enumerate()
        .map(|(kk, row)| {
            row.id_string
                .strip_prefix('c')
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| {
                    CliError::Data(format!(
                        "{}: component id {:?} in row {} is not c<number>",
                        dir.display(),
                        row.id_string,
                        kk + 1
                    ))
                })
        })
        .collect::<Result<Vec<u32>, _>>()?;

    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        parts: Some(RunParts {
            lambda: lambda.values,
            x_mean: x_mean.values,
            x_cov_sum: x_cov_sum.values,
            psi,
            component_ids,
        }),
        trace,
        gene_ids: lambda.gene_ids,
        sample_ids: x_mean.sample_ids,
    })
}

/// Default stability window: compare supports halfway through against the
/// final sweep. Runs shorter than two sweeps cannot be windowed.
fn default_window(trace: &[IterationTrace], max_change: usize, rule: StabilityRule) -> Option<StabilityWindow> {
    let last = trace.last()?.iteration;
    if last < 2 {
        return None;
    }
    Some(StabilityWindow { checkpoint_a: last / 2, checkpoint_b: last, max_change, rule })
}

fn run_network(args: NetworkArgs) -> Result<(), CliError> {
    let rule = if args.and_rule { StabilityRule::BothExceed } else { StabilityRule::EitherExceeds };
    let explicit_window = match &args.stability_window {
        Some(raw) => {
            let (a, b) = raw.split_once(',').ok_or_else(|| {
                CliError::Usage(format!(
                    "--stability-window takes two comma-separated sweep numbers, got {raw:?}"
                ))
            })?;
            let parse = |s: &str| -> Result<usize, CliError> {
                s.trim().parse().map_err(|_| {
                    CliError::Usage(format!("--stability-window: {s:?} is not a sweep number"))
                })
            };
            Some(StabilityWindow {
                checkpoint_a: parse(a)?,
                checkpoint_b: parse(b)?,
                max_change: args.stability_max_change,
                rule,
            })
        }
        None => None,
    };
    let class_pair = match &args.class_pair {
        Some(raw) => {
            let (a, b) = raw.split_once(',').ok_or_else(|| {
                CliError::Usage(format!(
                    "--class-pair takes two comma-separated class names, got {raw:?}"
                ))
            })?;
            Some((a.trim().to_owned(), b.trim().to_owned()))
        }
        None => None,
    };
    let base_spec = NetworkSpec {
        net_type: args.net_type.into(),
        target_class: args.target_class.clone(),
        class_pair,
        wilcoxon_p_threshold: args.wilcoxon_p,
        use_all_factor_values: args.all_values,
        edge_prob_threshold: args.edge_prob,
        replication_threshold: args.replication,
        stability_window: None,
        support_eps: args.support_eps,
        ..NetworkSpec::default()
    };
    base_spec.validate().map_err(CliError::Network)?;

    let runs = args.fits.iter().map(|dir| read_run(dir)).collect::<Result<Vec<_>, _>>()?;
    let reference = &runs[0];
    for run in &runs[1..] {
        if run.gene_ids != reference.gene_ids || run.sample_ids != reference.sample_ids {
            return Err(CliError::Data(format!(
                "{}: gene or sample ids differ from {}; networks must come from fits of \
                 the same dataset",
                run.dir.display(),
                reference.dir.display()
            )));
        }
    }
    let labels: Option<CovariateLabels> = match &args.labels {
        Some(path) => Some(read_labels(path, &reference.sample_ids)?),
        None => None,
    };

    let mut per_run = Vec::with_capacity(runs.len());
    for run in &runs {
        let Some(parts) = &run.parts else {
            eprintln!("warning: {} kept no components; contributing no edges", run.dir.display());
            per_run.push(Vec::new());
            continue;
        };
        let window = if args.no_stability {
            None
        } else {
            match &explicit_window {
                Some(w) => Some(*w),
                None => {
                    let w = default_window(&run.trace, args.stability_max_change, rule);
                    if w.is_none() {
                        eprintln!(
                            "warning: {} has fewer than two recorded sweeps; skipping the \
                             stability filter",
                            run.dir.display()
                        );
                    }
                    w
                }
            }
        };
        let spec = NetworkSpec { stability_window: window, ..base_spec.clone() };
        let net = run_edges_from_parts(parts, &run.trace, labels.as_ref(), &spec, &run.gene_ids)?;
        for warning in &net.warnings {
            eprintln!("warning: {}: {warning}", run.dir.display());
        }
        per_run.push(net.edges);
    }

    let edges = network::ensemble_edges(&per_run, &base_spec);
    write_edges(&args.out, &edges)?;
    println!(
        "{} edges ({} runs, probability >= {}, replication >= {}) written to {}",
        edges.len(),
        runs.len(),
        args.edge_prob,
        args.replication,
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// normalize

#[derive(Args)]
struct NormalizeArgs {
    /// Expression matrix TSV (genes x samples)
    #[arg(long)]
    input: PathBuf,
    /// Normalized matrix TSV to write
    #[arg(long)]
    out: PathBuf,
}

fn run_normalize(args: NormalizeArgs) -> Result<(), CliError> {
    let data = read_matrix(&args.input)?;
    let (normalized, constant_rows) = io::quantile_normalize(&data)?;
    for &row in &constant_rows {
        eprintln!(
            "warning: gene {} is constant across samples; normalized to zeros",
            normalized.gene_ids[row]
        );
    }
    write_matrix(&args.out, &normalized)?;
    println!(
        "normalized {} genes x {} samples ({} constant) into {}",
        normalized.values.nrows(),
        normalized.values.ncols(),
        constant_rows.len(),
        args.out.display()
    );
    Ok(())
}
