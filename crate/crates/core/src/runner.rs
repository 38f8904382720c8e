//! Drives the three stages end to end, writing all artifacts under one
//! output directory: a config echo, per-stage checkpoints, a line-delimited
//! metrics log, the derived-architecture report, and evaluation results.
//!
//! The monolithic `run` is literally the four stage entry points in
//! sequence, so a run resumed from any stage checkpoint continues exactly
//! like an uninterrupted one.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::checkpoint::{self, SupernetCheckpoint};
use crate::config::ExperimentConfig;
use crate::data::{generate_task, SplitData};
use crate::error::{Error, Result};
use crate::metrics::{account_memory, MemoryModel};
use crate::nn::ParamStore;
use crate::pipeline::{
    EvalOutcome, MetricsRecord, MetricsSink, Pipeline, StageKind, StageOutcome, VecSink,
};
use crate::rng::{StreamRole, StreamSeed};
use crate::scalar::Scalar;
use crate::supernet::{SampledArchitecture, SuperNetSpec, SuperNetwork};

pub const CONFIG_ECHO: &str = "config-echo.json";
pub const METRICS_LOG: &str = "metrics.jsonl";
pub const DERIVED_REPORT: &str = "derived.txt";
pub const DERIVED_SPEC: &str = "derived-spec.json";
pub const MEMORY_REPORT: &str = "memory-report.json";

pub fn checkpoint_path(out: &Path, stage: StageKind) -> PathBuf {
    let name = match stage {
        StageKind::Warmup => "checkpoint-warmup.json",
        StageKind::Search => "checkpoint-search.json",
        StageKind::Retrain => "checkpoint-retrain.json",
    };
    out.join(name)
}

/// Append-mode JSONL metrics writer.
pub struct JsonlSink {
    writer: BufWriter<File>,
}

impl JsonlSink {
    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(JsonlSink {
            writer: BufWriter::new(file),
        })
    }
}

impl MetricsSink for JsonlSink {
    fn record(&mut self, rec: &MetricsRecord) {
        if let Ok(line) = serde_json::to_string(rec) {
            let _ = writeln!(self.writer, "{}", line);
        }
    }
}

impl Drop for JsonlSink {
    fn drop(&mut self) {
        let _ = self.writer.flush();
    }
}

fn prepare_out(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let echo = serde_json::to_vec_pretty(cfg)?;
    fs::write(out.join(CONFIG_ECHO), echo)?;
    Ok(())
}

fn build_fresh<T: Scalar>(cfg: &ExperimentConfig) -> Result<(SuperNetwork, ParamStore<T>)> {
    let mut store = ParamStore::new();
    let mut rng = StreamSeed::new(cfg.seed).stream(StreamRole::ParamInit, &[0]);
    let net = SuperNetwork::build(&cfg.net, &mut store, &mut rng)?;
    Ok((net, store))
}

fn load_stage<T: Scalar>(out: &Path, stage: StageKind) -> Result<(SuperNetwork, ParamStore<T>, SupernetCheckpoint)> {
    let path = checkpoint_path(out, stage);
    if !path.exists() {
        return Err(Error::Config(format!(
            "missing checkpoint {}; run the earlier stage first",
            path.display()
        )));
    }
    let ck = checkpoint::load(&path)?;
    let (net, store) = checkpoint::restore::<T>(&ck)?;
    Ok((net, store, ck))
}

/// Stage 1 entry point: fresh super-network, warm-up, checkpoint.
pub fn run_warmup<T: Scalar>(cfg: &ExperimentConfig, out: &Path) -> Result<StageOutcome> {
    cfg.validate()?;
    prepare_out(cfg, out)?;
    let data: SplitData<T> = generate_task(&cfg.task)?;
    let (net, store) = build_fresh::<T>(cfg)?;
    let mut pipe = Pipeline::new(net, store, cfg.seed, cfg.loss_kind());
    let mut sink = JsonlSink::open(&out.join(METRICS_LOG))?;
    let outcome = pipe.warmup(&data, &cfg.warmup, &mut sink)?;
    let ck = checkpoint::capture(&cfg.net, &pipe.store, cfg.seed, Some(StageKind::Warmup));
    checkpoint::save(&ck, &checkpoint_path(out, StageKind::Warmup))?;
    Ok(outcome)
}

/// Stage 2 entry point: resume from the warm-up checkpoint and search.
pub fn run_search<T: Scalar>(cfg: &ExperimentConfig, out: &Path) -> Result<StageOutcome> {
    cfg.validate()?;
    let data: SplitData<T> = generate_task(&cfg.task)?;
    let (net, store, _) = load_stage::<T>(out, StageKind::Warmup)?;
    let mut pipe = Pipeline::new(net, store, cfg.seed, cfg.loss_kind());
    let mut sink = JsonlSink::open(&out.join(METRICS_LOG))?;
    let outcome = pipe.search(&data, &cfg.search, &cfg.estimator, &mut sink)?;
    let ck = checkpoint::capture(&cfg.net, &pipe.store, cfg.seed, Some(StageKind::Search));
    checkpoint::save(&ck, &checkpoint_path(out, StageKind::Search))?;
    Ok(outcome)
}

/// Derivation entry point: top-1 pruning of the searched super-network.
pub fn run_derive<T: Scalar>(cfg: &ExperimentConfig, out: &Path) -> Result<(SuperNetSpec, Vec<String>)> {
    cfg.validate()?;
    let (net, store, _) = load_stage::<T>(out, StageKind::Search)?;
    let (derived_spec, labels) = net.derive_top1(&store);
    let mut report = String::new();
    report.push_str("# derived architecture\n");
    for (i, label) in labels.iter().enumerate() {
        report.push_str(&format!("block {}: {}\n", i, label));
    }
    fs::write(out.join(DERIVED_REPORT), &report)?;
    fs::write(out.join(DERIVED_SPEC), serde_json::to_vec_pretty(&derived_spec)?)?;
    Ok((derived_spec, labels))
}

/// Stage 3 entry point: retrain the derived model from scratch and evaluate.
pub fn run_retrain<T: Scalar>(cfg: &ExperimentConfig, out: &Path) -> Result<(StageOutcome, EvalOutcome)> {
    cfg.validate()?;
    let spec_bytes = fs::read(out.join(DERIVED_SPEC))
        .map_err(|_| Error::Config("missing derived-spec.json; run derive first".into()))?;
    let derived_spec: SuperNetSpec = serde_json::from_slice(&spec_bytes)?;
    let mut sink = JsonlSink::open(&out.join(METRICS_LOG))?;
    let (outcome, eval, pipe) = retrain_from_spec::<T>(cfg, &derived_spec, &mut sink)?;
    let ck = checkpoint::capture(&derived_spec, &pipe.store, cfg.seed, Some(StageKind::Retrain));
    checkpoint::save(&ck, &checkpoint_path(out, StageKind::Retrain))?;
    Ok((outcome, eval))
}

/// Shared retraining core: fresh initialization of the derived topology, the
/// 5% validation re-split, training, and test evaluation.
pub fn retrain_from_spec<T: Scalar>(
    cfg: &ExperimentConfig,
    derived_spec: &SuperNetSpec,
    sink: &mut dyn MetricsSink,
) -> Result<(StageOutcome, EvalOutcome, Pipeline<T>)> {
    let data: SplitData<T> = generate_task(&cfg.task)?;
    let retrain_data = data.resplit(cfg.retrain_val_fraction);
    let mut store = ParamStore::new();
    let mut rng = StreamSeed::new(cfg.seed).stream(StreamRole::ParamInit, &[1]);
    let net = SuperNetwork::build(derived_spec, &mut store, &mut rng)?;
    let mut pipe = Pipeline::new(net, store, cfg.seed, cfg.loss_kind());
    let outcome = pipe.retrain(&retrain_data, &cfg.retrain, sink)?;
    let z = SampledArchitecture {
        selections: vec![0; pipe.net.blocks.len()],
    };
    let eval = pipe.evaluate(&retrain_data.test, cfg.retrain.minibatch, &z)?;
    sink.record(&MetricsRecord::Final {
        val_loss: outcome.final_val,
        test_loss: eval.loss,
        metric_name: eval.metric_name.to_string(),
        metric: eval.metric,
    });
    Ok((outcome, eval, pipe))
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub warmup: StageOutcome,
    pub search: StageOutcome,
    pub retrain: StageOutcome,
    pub derived_labels: Vec<String>,
    pub derived_spec: SuperNetSpec,
    pub eval: EvalOutcome,
}

/// The full pipeline: warm-up, search, top-1 derivation, retraining.
pub fn run<T: Scalar>(cfg: &ExperimentConfig, out: &Path) -> Result<RunArtifacts> {
    let warmup = run_warmup::<T>(cfg, out)?;
    let search = run_search::<T>(cfg, out)?;
    let (derived_spec, derived_labels) = run_derive::<T>(cfg, out)?;
    let (retrain, eval) = run_retrain::<T>(cfg, out)?;
    Ok(RunArtifacts {
        warmup,
        search,
        retrain,
        derived_labels,
        derived_spec,
        eval,
    })
}

/// Instrumented memory accounting over the configured topology, written as
/// JSON next to the metrics.
pub fn run_bench_memory<T: Scalar>(cfg: &ExperimentConfig, out: &Path) -> Result<MemoryModel> {
    cfg.validate()?;
    prepare_out(cfg, out)?;
    let (net, mut store) = build_fresh::<T>(cfg)?;
    let t_probe = (cfg.task.time_range.0 + cfg.task.time_range.1) / 2;
    let model = account_memory(&net, &mut store, cfg.warmup.minibatch.min(8), t_probe.max(1), cfg.seed)?;
    fs::write(out.join(MEMORY_REPORT), serde_json::to_vec_pretty(&model)?)?;
    Ok(model)
}

// ── warm-up ablation ─────────────────────────────────────────────────

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AblationArm {
    pub label: String,
    pub warmup_epochs: usize,
    pub derived_labels: Vec<String>,
    /// Retraining validation-loss curve, one point per epoch.
    pub retrain_val_curve: Vec<f64>,
    pub final_retrain_val: f64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AblationSeedResult {
    pub seed: u64,
    pub a: AblationArm,
    pub b: AblationArm,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<AblationSeedResult>,
    pub median_final_a: f64,
    pub median_final_b: f64,
}

fn retrain_curve(records: &[MetricsRecord]) -> Vec<f64> {
    records
        .iter()
        .filter_map(|r| match r {
            MetricsRecord::Epoch {
                stage: StageKind::Retrain,
                val_loss,
                ..
            } => Some(*val_loss),
            _ => None,
        })
        .collect()
}

fn ablation_arm<T: Scalar>(cfg: &ExperimentConfig, with_warmup: bool, label: &str) -> Result<AblationArm> {
    let data: SplitData<T> = generate_task(&cfg.task)?;
    let (net, store) = build_fresh::<T>(cfg)?;
    let mut pipe = Pipeline::new(net, store, cfg.seed, cfg.loss_kind());
    let mut sink = VecSink::default();
    let warmup_epochs = if with_warmup {
        pipe.warmup(&data, &cfg.warmup, &mut sink)?.epochs_run
    } else {
        0
    };
    pipe.search(&data, &cfg.search, &cfg.estimator, &mut sink)?;
    let (derived_spec, derived_labels) = pipe.net.derive_top1(&pipe.store);
    let (outcome, _eval, _pipe) = retrain_from_spec::<T>(cfg, &derived_spec, &mut sink)?;
    Ok(AblationArm {
        label: label.to_string(),
        warmup_epochs,
        derived_labels,
        retrain_val_curve: retrain_curve(&sink.0),
        final_retrain_val: outcome.final_val,
    })
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn ablation_seed<T: Scalar>(base: &ExperimentConfig, seed: u64) -> Result<AblationSeedResult> {
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg.task.seed = seed;
    let a = ablation_arm::<T>(&cfg, false, "A-no-warmup")?;
    let b = ablation_arm::<T>(&cfg, true, "B-converged-warmup")?;
    Ok(AblationSeedResult { seed, a, b })
}

/// Compare architecture search started from a randomly initialized
/// super-network (A) against one started from a converged warm-up (B),
/// over several seeds. Seeds evaluate independently and in parallel.
pub fn warmup_ablation<T: Scalar>(
    base: &ExperimentConfig,
    seeds: &[u64],
    out: &Path,
) -> Result<AblationReport> {
    base.validate()?;
    fs::create_dir_all(out)?;
    #[cfg(feature = "parallel")]
    let results: Vec<Result<AblationSeedResult>> = {
        use rayon::prelude::*;
        seeds.par_iter().map(|&s| ablation_seed::<T>(base, s)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<AblationSeedResult>> =
        seeds.iter().map(|&s| ablation_seed::<T>(base, s)).collect();
    let seeds_done: Vec<AblationSeedResult> = results.into_iter().collect::<Result<_>>()?;

    let report = AblationReport {
        median_final_a: median(seeds_done.iter().map(|s| s.a.final_retrain_val).collect()),
        median_final_b: median(seeds_done.iter().map(|s| s.b.final_retrain_val).collect()),
        seeds: seeds_done,
    };
    fs::write(out.join("ablation.json"), serde_json::to_vec_pretty(&report)?)?;
    let mut txt = String::new();
    for s in &report.seeds {
        txt.push_str(&format!(
            "seed {}: curve A ({} warmup epochs): {:?}\n",
            s.seed, s.a.warmup_epochs, s.a.retrain_val_curve
        ));
        txt.push_str(&format!(
            "seed {}: curve B ({} warmup epochs): {:?}\n",
            s.seed, s.b.warmup_epochs, s.b.retrain_val_curve
        ));
    }
    txt.push_str(&format!(
        "median final retrain val loss: A = {:.6}, B = {:.6}\n",
        report.median_final_a, report.median_final_b
    ));
    fs::write(out.join("ablation.txt"), txt)?;
    Ok(report)
}

/// Human-readable summary of an output directory.
pub fn report(out: &Path) -> Result<String> {
    let mut s = String::new();
    let derived = out.join(DERIVED_REPORT);
    if derived.exists() {
        s.push_str(&fs::read_to_string(derived)?);
    }
    let log = out.join(METRICS_LOG);
    if log.exists() {
        let content = fs::read_to_string(log)?;
        let mut finals = Vec::new();
        let mut stage_ends = Vec::new();
        for line in content.lines() {
            let rec: MetricsRecord = serde_json::from_str(line)
                .map_err(|e| Error::Serde(format!("bad metrics line: {}", e)))?;
            match rec {
                MetricsRecord::Final { .. } => finals.push(rec),
                MetricsRecord::StageEnd { .. } => stage_ends.push(rec),
                _ => {}
            }
        }
        for rec in stage_ends {
            if let MetricsRecord::StageEnd { stage, epochs, best_val } = rec {
                s.push_str(&format!("{:?}: {} epochs, best val {:.6}\n", stage, epochs, best_val));
            }
        }
        if let Some(MetricsRecord::Final {
            val_loss,
            test_loss,
            metric_name,
            metric,
        }) = finals.last()
        {
            s.push_str(&format!(
                "final: val loss {:.6}, test loss {:.6}, {} = {:.4}\n",
                val_loss, test_loss, metric_name, metric
            ));
        }
    }
    let mem = out.join(MEMORY_REPORT);
    if mem.exists() {
        let model: MemoryModel = serde_json::from_slice(&fs::read(mem)?)?;
        for line in model.summary_lines() {
            s.push_str(&line);
            s.push('\n');
        }
    }
    if s.is_empty() {
        s.push_str("no artifacts found\n");
    }
    Ok(s)
}
