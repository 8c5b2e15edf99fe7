//! Orchestration of multi-seed runs and ablation sweeps, plus their on-disk
//! layout:
//!
//! ```text
//! <root>/aggregate.json
//! <root>/seed_<s>/result.json      deterministic
//! <root>/seed_<s>/timing.json      wall times
//! <root>/seed_<s>/run_log.jsonl
//! <root>/seed_<s>/step_<t>.avcp    parameters after step t
//! <root>/seed_<s>/dataset.avcf     generated data (generator configs only)
//! ```

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use avcil_core::baselines::Strategy;
use avcil_core::datasets::{generate_synthetic, write_dataset, FeatureDataset};
use avcil_core::model::{encode_checkpoint, Modality};
use avcil_core::objectives::LossWeights;
use avcil_core::protocol::{events_to_jsonl, run_incremental_logged, RunOutput, TrainConfig};
use avcil_core::write_atomic;
use serde::Serialize;

use crate::config::{RunConfig, FORMAT_VERSION};
use crate::error::{HarnessError, Result};
use crate::results::{sha256_hex, Aggregate, DataEcho, MeanStd, RunEcho, RunResult, Timing};

/// Lines of the run log echoed when a run diverges.
const LOG_TAIL: usize = 8;

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(HarnessError::io(dir))?;
    }
    write_atomic(path, bytes).map_err(|e| match e {
        avcil_core::Error::Io(source) => HarnessError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other.into(),
    })
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(HarnessError::json(path))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

/// A loaded dataset file with its content hash.
#[derive(Debug, Clone)]
pub struct FixedData {
    pub dataset: FeatureDataset,
    pub echo: DataEcho,
}

impl FixedData {
    pub fn load(cfg: &RunConfig) -> Result<Option<FixedData>> {
        let Some(dataset) = cfg.load_fixed_dataset()? else {
            return Ok(None);
        };
        let path = cfg.dataset.as_ref().expect("dataset config");
        let bytes = std::fs::read(path).map_err(HarnessError::io(path))?;
        Ok(Some(FixedData {
            dataset,
            echo: DataEcho::Dataset {
                path: path.display().to_string(),
                sha256: sha256_hex(&bytes),
            },
        }))
    }
}

/// One finished seed.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub output: RunOutput,
    pub result: RunResult,
    /// The data the run used when it was generated rather than loaded.
    pub generated: Option<FeatureDataset>,
}

fn divergence(seed: u64, source: avcil_core::Error, log: &[avcil_core::protocol::RunEvent], dir: Option<&Path>) -> HarnessError {
    let lines: Vec<String> = events_to_jsonl(log)
        .unwrap_or_default()
        .lines()
        .map(str::to_string)
        .collect();
    if let Some(dir) = dir {
        let body = lines.iter().map(|l| format!("{l}\n")).collect::<String>();
        if let Err(e) = write_file(&dir.join("run_log.jsonl"), body.as_bytes()) {
            log::warn!("could not save the run log of seed {seed}: {e}");
        }
    }
    let tail = lines[lines.len().saturating_sub(LOG_TAIL)..].to_vec();
    HarnessError::Diverged { seed, source, tail }
}

/// Runs one seed with `train` (its seed is overwritten). On divergence the
/// partial log is saved under `log_dir` when given.
pub fn run_seed(cfg: &RunConfig, train: &TrainConfig, seed: u64, fixed: Option<&FixedData>, log_dir: Option<&Path>) -> Result<SeedRun> {
    let train = TrainConfig {
        seed,
        ..train.clone()
    };
    let (dataset, echo, generated) = match fixed {
        Some(f) => (None, f.echo.clone(), false),
        None => {
            let spec = cfg.generator_for(seed).expect("validated: generator present");
            let ds = generate_synthetic(&spec)?;
            (Some(ds), DataEcho::Generator { spec }, true)
        }
    };
    let ds = match (&dataset, fixed) {
        (Some(d), _) => d,
        (None, Some(f)) => &f.dataset,
        (None, None) => unreachable!(),
    };
    let sequence = cfg.sequence_for(ds, seed)?;
    let mut log = Vec::new();
    let output = match run_incremental_logged(ds, &sequence, &train, &mut log) {
        Ok(o) => o,
        Err(e @ (avcil_core::Error::Diverged { .. } | avcil_core::Error::Numeric(_))) => {
            return Err(divergence(seed, e, &log, log_dir))
        }
        Err(e) => return Err(e.into()),
    };
    let echo = RunEcho {
        data: echo,
        sequence,
        train,
    };
    let result = RunResult::new(seed, echo, output.matrix.clone(), output.loss_curves())?;
    Ok(SeedRun {
        seed,
        output,
        result,
        generated: if generated { dataset } else { None },
    })
}

/// Applies `f` to every seed on up to `workers` threads; results keep seed
/// order and the first error (in seed order) wins.
pub fn map_seeds<T: Send>(seeds: &[u64], workers: usize, f: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<T>> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<T>>>> = seeds.iter().map(|_| Mutex::new(None)).collect();
    let workers = workers.clamp(1, seeds.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= seeds.len() {
                    break;
                }
                let r = f(seeds[i]);
                *slots[i].lock().expect("no panics while holding the slot") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().expect("unpoisoned").expect("every seed visited"))
        .collect()
}

pub fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed_{seed}"))
}

/// Writes a seed's files. Checkpoints and generated data are optional since
/// sweeps rarely need them.
pub fn write_seed(dir: &Path, run: &SeedRun, artifacts: bool) -> Result<()> {
    write_file(&dir.join("result.json"), run.result.to_json()?.as_bytes())?;
    let timing = Timing {
        format_version: FORMAT_VERSION,
        seed: run.seed,
        total_seconds: run.output.step_seconds.iter().sum(),
        step_seconds: run.output.step_seconds.clone(),
    };
    write_json(&dir.join("timing.json"), &timing)?;
    write_file(&dir.join("run_log.jsonl"), events_to_jsonl(&run.output.log)?.as_bytes())?;
    if artifacts {
        for (t, params) in run.output.step_params.iter().enumerate() {
            write_file(&dir.join(format!("step_{}.avcp", t + 1)), &encode_checkpoint(params)?)?;
        }
        if let Some(ds) = &run.generated {
            write_file(&dir.join("dataset.avcf"), &write_dataset(ds)?)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub root: PathBuf,
    pub runs: Vec<SeedRun>,
    pub aggregate: Aggregate,
}

/// Trains every seed of `train` and writes the results under `root`.
pub fn run_variant(cfg: &RunConfig, train: &TrainConfig, fixed: Option<&FixedData>, root: &Path, artifacts: bool) -> Result<RunSummary> {
    let runs = map_seeds(&cfg.seeds, cfg.workers, |seed| {
        let dir = seed_dir(root, seed);
        let run = run_seed(cfg, train, seed, fixed, Some(&dir))?;
        write_seed(&dir, &run, artifacts)?;
        Ok(run)
    })?;
    let results: Vec<RunResult> = runs.iter().map(|r| r.result.clone()).collect();
    let aggregate = Aggregate::from_results(&results)?;
    write_json(&root.join("aggregate.json"), &aggregate)?;
    Ok(RunSummary {
        root: root.to_path_buf(),
        runs,
        aggregate,
    })
}

fn copy_variant(prev: &RunSummary, root: &Path) -> Result<RunSummary> {
    for run in &prev.runs {
        write_seed(&seed_dir(root, run.seed), run, false)?;
    }
    write_json(&root.join("aggregate.json"), &prev.aggregate)?;
    Ok(RunSummary {
        root: root.to_path_buf(),
        ..prev.clone()
    })
}

pub fn run_config(cfg: &RunConfig, root: &Path) -> Result<RunSummary> {
    let fixed = FixedData::load(cfg)?;
    run_variant(cfg, &cfg.train, fixed.as_ref(), root, true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    Modality,
    Component,
}

impl Sweep {
    pub fn name(self) -> &'static str {
        match self {
            Sweep::Modality => "modality",
            Sweep::Component => "component",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Variant {
    pub sweep: Sweep,
    pub name: String,
    pub train: TrainConfig,
}

/// (I-AVSS, C-AVSS, VAD) switches of the component sweep, all off first and all on last.
pub const COMPONENT_GRID: [(bool, bool, bool); 8] = [
    (false, false, false),
    (true, false, false),
    (false, true, false),
    (false, false, true),
    (true, true, false),
    (true, false, true),
    (false, true, true),
    (true, true, true),
];

fn component_name(i: bool, c: bool, v: bool) -> String {
    let parts: Vec<&str> = [(i, "i_avss"), (c, "c_avss"), (v, "vad")]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect();
    if parts.is_empty() {
        "none".into()
    } else {
        parts.join("+")
    }
}

/// Three modality rows with the configured strategy, then the eight AV-CIL
/// component combinations. Enabled components use the configured weights,
/// or the defaults where the config switches them off.
pub fn ablation_variants(base: &TrainConfig) -> Vec<Variant> {
    let mut out: Vec<Variant> = Modality::ALL
        .iter()
        .map(|&m| Variant {
            sweep: Sweep::Modality,
            name: m.name().to_string(),
            train: TrainConfig {
                modality: m,
                ..base.clone()
            },
        })
        .collect();
    let dflt = LossWeights::default();
    let pick = |v: f64, d: f64| if v > 0.0 { v } else { d };
    let lambda_i = pick(base.weights.lambda_i, dflt.lambda_i);
    let lambda_c = pick(base.weights.lambda_c, dflt.lambda_c);
    let lambda_vad = pick(base.weights.lambda_vad, dflt.lambda_vad);
    for (i, c, v) in COMPONENT_GRID {
        out.push(Variant {
            sweep: Sweep::Component,
            name: component_name(i, c, v),
            train: TrainConfig {
                strategy: Strategy::Avcil,
                modality: Modality::Audiovisual,
                weights: LossWeights {
                    lambda_i: if i { lambda_i } else { 0.0 },
                    lambda_c: if c { lambda_c } else { 0.0 },
                    lambda_vad,
                    vad: v,
                    ..base.weights
                },
                ..base.clone()
            },
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub sweep: Sweep,
    pub variant: String,
    pub strategy: Strategy,
    pub modality: Modality,
    pub i_avss: bool,
    pub c_avss: bool,
    pub vad: bool,
    pub mean_acc: MeanStd,
    pub avg_forget: Option<MeanStd>,
    pub seeds: usize,
}

#[derive(Debug, Clone)]
pub struct Ablation {
    pub rows: Vec<AblationRow>,
    /// Per-variant results in row order, seeds in config order.
    pub results: Vec<Vec<RunResult>>,
    pub csv_path: PathBuf,
}

impl Ablation {
    pub fn component_rows(&self) -> impl Iterator<Item = (&AblationRow, &Vec<RunResult>)> {
        self.rows
            .iter()
            .zip(&self.results)
            .filter(|(r, _)| r.sweep == Sweep::Component)
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "sweep",
        "variant",
        "strategy",
        "modality",
        "i_avss",
        "c_avss",
        "vad",
        "mean_acc",
        "mean_acc_std",
        "avg_forget",
        "avg_forget_std",
        "seeds",
    ])?;
    for r in rows {
        let (f, fs) = match r.avg_forget {
            Some(m) => (m.mean.to_string(), m.std.to_string()),
            None => (String::new(), String::new()),
        };
        w.write_record([
            r.sweep.name().to_string(),
            r.variant.clone(),
            r.strategy.tag().to_string(),
            r.modality.name().to_string(),
            r.i_avss.to_string(),
            r.c_avss.to_string(),
            r.vad.to_string(),
            r.mean_acc.mean.to_string(),
            r.mean_acc.std.to_string(),
            f,
            fs,
            r.seeds.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| HarnessError::Config(format!("csv buffer: {e}")))
}

/// Runs both sweeps with shared seeds, writing each variant's results under
/// `<root>/ablation/` and the combined table to `<root>/ablation.csv`.
pub fn ablate(cfg: &RunConfig, root: &Path) -> Result<Ablation> {
    let fixed = FixedData::load(cfg)?;
    let mut rows = Vec::new();
    let mut results = Vec::new();
    let mut done: Vec<(TrainConfig, RunSummary)> = Vec::new();
    for v in ablation_variants(&cfg.train) {
        let dir = root.join("ablation").join(format!("{}_{}", v.sweep.name(), v.name));
        log::info!("ablation variant {} / {}", v.sweep.name(), v.name);
        // the audiovisual modality row and the full component row often coincide
        let summary = match done.iter().find(|(t, _)| *t == v.train) {
            Some((_, prev)) => copy_variant(prev, &dir)?,
            None => run_variant(cfg, &v.train, fixed.as_ref(), &dir, false)?,
        };
        done.push((v.train.clone(), summary.clone()));
        let w = &v.train.weights;
        let avcil = v.train.strategy == Strategy::Avcil;
        rows.push(AblationRow {
            sweep: v.sweep,
            variant: v.name.clone(),
            strategy: v.train.strategy,
            modality: v.train.modality,
            i_avss: avcil && w.lambda_i > 0.0,
            c_avss: avcil && w.lambda_c > 0.0,
            vad: avcil && w.vad && w.lambda_vad > 0.0,
            mean_acc: summary.aggregate.mean_accuracy,
            avg_forget: summary.aggregate.average_forgetting,
            seeds: summary.runs.len(),
        });
        results.push(summary.runs.into_iter().map(|r| r.result).collect());
    }
    let csv_path = root.join("ablation.csv");
    write_file(&csv_path, &ablation_csv(&rows)?)?;
    Ok(Ablation { rows, results, csv_path })
}
