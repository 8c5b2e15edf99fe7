use std::path::{Path, PathBuf};
use std::process::ExitCode;

use avcil_core::datasets::{generate_synthetic, load_dataset, write_dataset, GeneratorSpec, Split};
use avcil_core::diffmath::OpKind;
use avcil_core::model::load_checkpoint;
use avcil_harness::attention::{export_attention, write_attention};
use avcil_harness::compare::{compare_csv, compare_rows};
use avcil_harness::error::config_err;
use avcil_harness::experiments::{ablate, run_config, write_file};
use avcil_harness::gradsuite::{faultable_ops, run_suite, run_suite_with_fault, SuiteSpec};
use avcil_harness::results::sha256_hex;
use avcil_harness::{exit, HarnessError, Result, RunConfig};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "avcil", version, about = "Audio-visual class-incremental learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic AVCF dataset from a generator spec (JSON).
    Generate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every seed of a run config; writes result.json per seed and aggregate.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides the config and $AVCIL_OUTPUT_ROOT).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seeds trained in parallel (overrides the config).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Tabulate every result.json under a directory as CSV, best mean accuracy first.
    Compare {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Modality sweep (3 rows) and component sweep (8 rows) with shared seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Write channel-averaged spatial and temporal attention maps as CSV.
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Comma-separated sample ids.
        #[arg(long, value_delimiter = ',', required = true)]
        samples: Vec<u32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every primitive, model stage and loss.
    Gradcheck {
        /// Scale the backward rule of this primitive (test fixture).
        #[arg(long)]
        inject_fault: Option<String>,
        #[arg(long, default_value_t = 1.5)]
        fault_factor: f64,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
}

fn load_config(path: &Path, workers: Option<usize>) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_path(path)?;
    if let Some(w) = workers {
        cfg.workers = w;
        cfg.validate()?;
    }
    Ok(cfg)
}

fn core_io(path: &Path) -> impl FnOnce(avcil_core::Error) -> HarnessError + '_ {
    move |e| match e {
        avcil_core::Error::Io(source) => HarnessError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other.into(),
    }
}

fn generate(spec_path: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(spec_path).map_err(HarnessError::io(spec_path))?;
    let spec: GeneratorSpec =
        serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", spec_path.display())))?;
    spec.validate()
        .map_err(|e| config_err(format!("{}: {e}", spec_path.display())))?;
    let ds = generate_synthetic(&spec)?;
    let bytes = write_dataset(&ds)?;
    write_file(out, &bytes)?;
    let g = ds.geometry;
    println!("wrote {}", out.display());
    println!(
        "AVCF v{} classes={} d={} L={} S={} samples={} (train={} val={} test={})",
        avcil_core::datasets::FORMAT_VERSION,
        ds.num_classes,
        g.d,
        g.frames,
        g.cells,
        ds.samples.len(),
        ds.count(Split::Train),
        ds.count(Split::Val),
        ds.count(Split::Test)
    );
    println!("sha256 {}", sha256_hex(&bytes));
    Ok(())
}

fn run(config: &Path, out: Option<&Path>, workers: Option<usize>) -> Result<()> {
    let cfg = load_config(config, workers)?;
    let root = cfg.output_root(out);
    let summary = run_config(&cfg, &root)?;
    for r in &summary.runs {
        let f = r
            .result
            .average_forgetting
            .map_or("-".to_string(), |f| format!("{f:.2}"));
        println!(
            "seed {}: mean acc {:.2}  avg forget {}  hash {}",
            r.seed,
            r.result.mean_accuracy,
            f,
            &r.result.content_hash[..12]
        );
    }
    let a = &summary.aggregate;
    println!(
        "{} / {}: mean acc {:.2} ± {:.2} over {} seeds -> {}",
        a.strategy,
        a.modality.name(),
        a.mean_accuracy.mean,
        a.mean_accuracy.std,
        a.runs.len(),
        root.display()
    );
    Ok(())
}

fn compare(results: &Path, out: &Path) -> Result<()> {
    let rows = compare_rows(results)?;
    write_file(out, &compare_csv(&rows)?)?;
    println!("{} rows -> {}", rows.len(), out.display());
    Ok(())
}

fn run_ablation(config: &Path, out: Option<&Path>, workers: Option<usize>) -> Result<()> {
    let cfg = load_config(config, workers)?;
    let root = cfg.output_root(out);
    let ab = ablate(&cfg, &root)?;
    for r in &ab.rows {
        println!(
            "{:<9} {:<18} mean acc {:>6.2} ± {:.2}",
            r.sweep.name(),
            r.variant,
            r.mean_acc.mean,
            r.mean_acc.std
        );
    }
    println!("-> {}", ab.csv_path.display());
    Ok(())
}

fn export(checkpoint: &Path, dataset: &Path, samples: &[u32], out: &Path) -> Result<()> {
    let params = load_checkpoint(checkpoint).map_err(core_io(checkpoint))?;
    let ds = load_dataset(dataset).map_err(core_io(dataset))?;
    let exports = export_attention(&params, &ds, samples)?;
    let written = write_attention(out, &exports)?;
    println!("{} files -> {}", written.len(), out.display());
    Ok(())
}

fn gradcheck(fault: Option<&str>, factor: f64, seeds: u64) -> Result<()> {
    let spec = SuiteSpec {
        seeds: (0..seeds).collect(),
        ..SuiteSpec::default()
    };
    let report = match fault {
        None => run_suite(&spec)?,
        Some(name) => {
            let kind = OpKind::from_name(name)
                .filter(|k| faultable_ops().contains(k))
                .ok_or_else(|| {
                    let names: Vec<&str> = faultable_ops().iter().map(|k| k.name()).collect();
                    config_err(format!("unknown primitive `{name}`; one of: {}", names.join(", ")))
                })?;
            run_suite_with_fault(&spec, kind, factor)?
        }
    };
    print!("{}", report.render());
    let failures = report.failures();
    if failures.is_empty() {
        println!("all {} checks below {:e}", report.cases.len(), report.tolerance);
        Ok(())
    } else {
        let names: Vec<&str> = failures.iter().map(|c| c.name).collect();
        Err(HarnessError::Verification(format!(
            "gradient check failed for: {}",
            names.join(", ")
        )))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Generate { spec, out } => generate(spec, out),
        Command::Run { config, out, workers } => run(config, out.as_deref(), *workers),
        Command::Compare { results, out } => compare(results, out),
        Command::Ablate { config, out, workers } => run_ablation(config, out.as_deref(), *workers),
        Command::ExportAttention {
            checkpoint,
            dataset,
            samples,
            out,
        } => export(checkpoint, dataset, samples, out),
        Command::Gradcheck {
            inject_fault,
            fault_factor,
            seeds,
        } => gradcheck(inject_fault.as_deref(), *fault_factor, *seeds),
    };
    match outcome {
        Ok(()) => ExitCode::from(exit::SUCCESS as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
