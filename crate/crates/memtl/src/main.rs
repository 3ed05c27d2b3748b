//! Batch CLI tying the pipeline together: dataset generation, model
//! training, evaluation, the N x M benchmark sweep, the error-ambiguity
//! decomposition audit and the convergence comparison.
//!
//! Exit codes: 0 success, 2 validation failure, 3 unlabelable data,
//! 4 training divergence, 5 missing artifact, 1 other failure.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use memtl::analysis::{
    convergence_compare, decompose, efficiency, evaluate, BenchmarkRow, SelectionMode,
};
use memtl::config::RunConfig;
use memtl::dataset::{generate_dataset, load_dataset, save_dataset, shift_split, Dataset};
use memtl::model::{
    fnv1a_digest, load_bundle, save_bundle, train_memtl, train_mtfnn, MemtlModel, ModelKind,
    TrainingLog,
};
use memtl::nn::NnError;

const EXIT_VALIDATION: u8 = 2;
const EXIT_UNLABELABLE: u8 = 3;
const EXIT_DIVERGENCE: u8 = 4;
const EXIT_MISSING: u8 = 5;

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    fn validation(msg: impl Into<String>) -> Self {
        Self::new(EXIT_VALIDATION, msg)
    }

    fn missing(path: &Path, err: impl std::fmt::Display) -> Self {
        Self::new(EXIT_MISSING, format!("{}: {err}", path.display()))
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "memtl", about = "MEC offloading: oracle labeling, ensemble training, analysis")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Mtfnn,
    Memtl,
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectionArg {
    MinCost,
    MinMse,
}

impl From<SelectionArg> for SelectionMode {
    fn from(s: SelectionArg) -> Self {
        match s {
            SelectionArg::MinCost => SelectionMode::MinCost,
            SelectionArg::MinMse => SelectionMode::MinMse,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a default config file for a given number of terminals.
    InitConfig {
        #[arg(long, default_value_t = 2)]
        n_mts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate an oracle-labeled dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's sample count.
        #[arg(long)]
        count: Option<usize>,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model bundle on a dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum)]
        kind: KindArg,
        /// Bundle output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a trained bundle on a dataset.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "min-cost")]
        selection: SelectionArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep the N x M grid: generate, split, train both kinds, evaluate.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Error-ambiguity decomposition audit of a trained bundle.
    Decompose {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Head-only vs from-scratch convergence comparison.
    Converge {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn load_config(path: &Path) -> CliResult<RunConfig> {
    if !path.exists() {
        return Err(CliError::missing(path, "config not found"));
    }
    RunConfig::load(path).map_err(|e| CliError::validation(e.to_string()))
}

fn load_dataset_checked(path: &Path, cfg: &RunConfig) -> CliResult<Dataset> {
    if !path.exists() {
        return Err(CliError::missing(path, "dataset not found"));
    }
    let ds = load_dataset(path).map_err(|e| CliError::validation(e.to_string()))?;
    if ds.n_mts() != cfg.ranges.n_mts {
        return Err(CliError::validation(format!(
            "dataset N = {} does not match config N = {}",
            ds.n_mts(),
            cfg.ranges.n_mts
        )));
    }
    Ok(ds)
}

fn load_bundle_checked(path: &Path) -> CliResult<MemtlModel> {
    if !path.join("manifest.json").exists() {
        return Err(CliError::missing(path, "model bundle not found"));
    }
    load_bundle(path)
        .map(|(m, _)| m)
        .map_err(|e| CliError::new(EXIT_MISSING, e.to_string()))
}

fn train_error(e: memtl::model::MemtlError, log_path: &Path) -> CliError {
    if let memtl::model::MemtlError::Nn(NnError::Diverged { epoch, ref partial }) = e {
        // Retain the partial loss log for diagnosis.
        let _ = std::fs::write(
            log_path,
            serde_json::to_string_pretty(partial).unwrap_or_default(),
        );
        return CliError::new(
            EXIT_DIVERGENCE,
            format!("training diverged at epoch {epoch}; partial log at {}", log_path.display()),
        );
    }
    CliError::new(1, e.to_string())
}

fn run(cmd: Cmd) -> CliResult<()> {
    match cmd {
        Cmd::InitConfig { n_mts, seed, out } => {
            let cfg = RunConfig::default_for(n_mts, seed);
            cfg.save(&out)
                .map_err(|e| CliError::validation(e.to_string()))?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Cmd::GenData {
            config,
            count,
            seed,
            out,
        } => {
            let cfg = load_config(&config)?;
            let count = count.unwrap_or(cfg.count);
            let seed = seed.unwrap_or(cfg.seed);
            if count == 0 {
                return Err(CliError::validation("count must be >= 1"));
            }
            let ds = generate_dataset(&cfg.ranges, count, seed).map_err(|e| match e {
                memtl::dataset::DatasetError::RejectionRate { .. } => {
                    CliError::new(EXIT_UNLABELABLE, e.to_string())
                }
                _ => CliError::validation(e.to_string()),
            })?;
            save_dataset(&ds, &out).map_err(|e| CliError::new(1, e.to_string()))?;
            let total = ds.meta.rejected + count;
            println!("wrote {} ({count} samples)", out.display());
            println!(
                "rejected {} unlabelable environments ({:.2}% of draws)",
                ds.meta.rejected,
                100.0 * ds.meta.rejected as f64 / total as f64
            );
            println!("offload fraction: {:.4}", ds.offload_fraction());
            Ok(())
        }
        Cmd::Train {
            config,
            dataset,
            kind,
            out,
            seed,
        } => {
            let cfg = load_config(&config)?;
            let ds = load_dataset_checked(&dataset, &cfg)?;
            let seed = seed.unwrap_or(cfg.seed);
            let log_path = out.with_extension("partial_log.json");
            let (model, log): (MemtlModel, TrainingLog) = match kind {
                KindArg::Mtfnn => train_mtfnn(&cfg.arch, &ds, &cfg.hyper, seed),
                KindArg::Memtl => train_memtl(&cfg.arch, &ds, cfg.m_heads, &cfg.hyper, seed),
            }
            .map_err(|e| train_error(e, &log_path))?;
            let digest = fnv1a_digest(
                &std::fs::read(&dataset).map_err(|e| CliError::missing(&dataset, e))?,
            );
            save_bundle(&model, &out, &digest).map_err(|e| CliError::new(1, e.to_string()))?;
            let log_json =
                serde_json::to_string_pretty(&log).map_err(|e| CliError::new(1, e.to_string()))?;
            std::fs::write(out.join("training_log.json"), log_json + "\n")
                .map_err(|e| CliError::new(1, e.to_string()))?;
            println!(
                "trained {} bundle ({} heads) -> {}",
                match model.kind {
                    ModelKind::Mtfnn => "mtfnn",
                    ModelKind::Memtl => "memtl",
                },
                model.m_heads(),
                out.display()
            );
            if let Some(last) = log.backbone_losses.last() {
                println!("final joint-pass loss: {last:.6}");
            }
            Ok(())
        }
        Cmd::Eval {
            config,
            dataset,
            model,
            selection,
            out,
        } => {
            let cfg = load_config(&config)?;
            let ds = load_dataset_checked(&dataset, &cfg)?;
            let m = load_bundle_checked(&model)?;
            let row = evaluate(&m, &ds, selection.into(), cfg.timing_passes)
                .map_err(|e| CliError::new(1, e.to_string()))?;
            let json =
                serde_json::to_string_pretty(&row).map_err(|e| CliError::new(1, e.to_string()))?;
            std::fs::write(&out, json + "\n").map_err(|e| CliError::new(1, e.to_string()))?;
            println!(
                "mse {:.6}  accuracy {:.4}  per-mt accuracy {:.4}  {:.4} ms/sample  {} bytes",
                row.mse, row.accuracy, row.per_mt_accuracy, row.inference_time_ms, row.model_size_bytes
            );
            Ok(())
        }
        Cmd::Bench { config, out } => {
            let cfg = load_config(&config)?;
            run_bench(&cfg, &out)
        }
        Cmd::Decompose {
            config,
            dataset,
            model,
            out,
        } => {
            let cfg = load_config(&config)?;
            let ds = load_dataset_checked(&dataset, &cfg)?;
            let m = load_bundle_checked(&model)?;
            let rep = decompose(&m, &ds).map_err(|e| CliError::new(1, e.to_string()))?;
            let json =
                serde_json::to_string_pretty(&rep).map_err(|e| CliError::new(1, e.to_string()))?;
            std::fs::write(&out, json + "\n").map_err(|e| CliError::new(1, e.to_string()))?;
            println!(
                "zeta_bar {:.6}  chi_bar {:.6}  ensemble_zeta {:.6}  residual {:.3e}",
                rep.zeta_bar, rep.chi_bar, rep.ensemble_zeta, rep.residual
            );
            Ok(())
        }
        Cmd::Converge {
            config,
            dataset,
            out,
            seed,
        } => {
            let cfg = load_config(&config)?;
            let ds = load_dataset_checked(&dataset, &cfg)?;
            let seed = seed.unwrap_or(cfg.seed);
            let rep = convergence_compare(&cfg.arch, &ds, &cfg.hyper, seed)
                .map_err(|e| CliError::new(1, e.to_string()))?;
            let mut file =
                std::fs::File::create(&out).map_err(|e| CliError::new(1, e.to_string()))?;
            writeln!(file, "epoch\thead_only_loss\tfrom_scratch_loss")
                .map_err(|e| CliError::new(1, e.to_string()))?;
            for (i, (a, b)) in rep.head_only.iter().zip(&rep.from_scratch).enumerate() {
                writeln!(file, "{}\t{:.17e}\t{:.17e}", i + 1, a, b)
                    .map_err(|e| CliError::new(1, e.to_string()))?;
            }
            println!(
                "threshold {:.6}: head-only reaches it at epoch {:?}, from-scratch at {:?}",
                rep.threshold, rep.head_only_epochs_to_threshold, rep.from_scratch_epochs_to_threshold
            );
            Ok(())
        }
    }
}

fn run_bench(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let mut file = std::fs::File::create(out).map_err(|e| CliError::new(1, e.to_string()))?;
    writeln!(
        file,
        "n\tm\tmtfnn_mse\tmtfnn_accuracy\tmtfnn_time_ms\tmtfnn_size_bytes\t\
         memtl_mse\tmemtl_accuracy\tmemtl_time_ms\tmemtl_size_bytes\t\
         delta_mse\tdelta_accuracy\tpsi"
    )
    .map_err(|e| CliError::new(1, e.to_string()))?;
    for &n in &cfg.bench_n {
        let mut ranges = cfg.ranges.clone();
        ranges.n_mts = n;
        let ds = generate_dataset(&ranges, cfg.count, cfg.seed).map_err(|e| match e {
            memtl::dataset::DatasetError::RejectionRate { .. } => {
                CliError::new(EXIT_UNLABELABLE, e.to_string())
            }
            _ => CliError::validation(e.to_string()),
        })?;
        let (train_ds, test_ds) =
            shift_split(&ds, cfg.test_fraction).map_err(|e| CliError::validation(e.to_string()))?;
        let log_path = out.with_extension("partial_log.json");
        let (mtfnn, _) = train_mtfnn(&cfg.arch, &train_ds, &cfg.hyper, cfg.seed)
            .map_err(|e| train_error(e, &log_path))?;
        let mtfnn_row = evaluate(&mtfnn, &test_ds, SelectionMode::MinCost, cfg.timing_passes)
            .map_err(|e| CliError::new(1, e.to_string()))?;
        for &m in &cfg.bench_m {
            let (model, _) = train_memtl(&cfg.arch, &train_ds, m, &cfg.hyper, cfg.seed)
                .map_err(|e| train_error(e, &log_path))?;
            let row = evaluate(&model, &test_ds, SelectionMode::MinCost, cfg.timing_passes)
                .map_err(|e| CliError::new(1, e.to_string()))?;
            let (d_mse, d_acc, psi) = deltas(&mtfnn_row, &row);
            writeln!(
                file,
                "{n}\t{m}\t{:.17e}\t{:.17e}\t{:.6}\t{}\t{:.17e}\t{:.17e}\t{:.6}\t{}\t{:.17e}\t{:.17e}\t{:.6}",
                mtfnn_row.mse,
                mtfnn_row.accuracy,
                mtfnn_row.inference_time_ms,
                mtfnn_row.model_size_bytes,
                row.mse,
                row.accuracy,
                row.inference_time_ms,
                row.model_size_bytes,
                d_mse,
                d_acc,
                psi
            )
            .map_err(|e| CliError::new(1, e.to_string()))?;
            println!(
                "N={n} M={m}: mtfnn mse {:.4} acc {:.4} | memtl mse {:.4} acc {:.4} | psi {:.4}",
                mtfnn_row.mse, mtfnn_row.accuracy, row.mse, row.accuracy, psi
            );
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn deltas(mtfnn: &BenchmarkRow, memtl: &BenchmarkRow) -> (f64, f64, f64) {
    let d_mse = mtfnn.mse - memtl.mse;
    let d_acc = memtl.accuracy - mtfnn.accuracy;
    let psi = efficiency(d_mse, d_acc, memtl.inference_time_ms).unwrap_or(f64::NAN);
    (d_mse, d_acc, psi)
}
