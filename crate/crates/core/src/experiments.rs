//! Experiment runners behind the `vlgo` command.
//!
//! Each runner writes `config.json` (the exact configuration) into the output
//! directory before any training, then its CSVs and JSON summaries. CSVs are
//! a pure function of config and seed; with `wall_clock` off in the training
//! configs they are byte-identical across runs and worker counts.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::config::{ClrToyConfig, ExperimentKind, PathConfig, RunConfig, SemiToyConfig, SwissRollConfig};
use crate::contrastive::{linear_probe, train_manifoldclr, ClrOutput, ManifoldClrConfig};
use crate::data::{swiss_roll, synth_class_manifolds, write_points_csv, NeighborTable, SynthClassDataset};
use crate::error::{Error, Result};
use crate::gradcheck::{render_table, run_checks, CheckRow};
use crate::lie_train::{train_lie_operators, InferenceKind};
use crate::metrics::{emit, effective_rank, metrics_csv, operator_paths, paths_csv, symmetric_grid, write_text, MetricsRecord, RunSummary};
use crate::operators::{init_dictionary, OperatorDictionary};
use crate::rng::stream;
use crate::semisup::{improvement_summary, run_paired_splits, split_results_csv, LieAugmenter, SemiData, SemiMethod};

/// Epochs averaged for the reported final manifold loss.
pub const FINAL_WINDOW: usize = 20;

/// Operators whose norm exceeds this fraction of the largest count as active.
pub const ACTIVE_FRACTION: f64 = 0.1;

/// Seed offset of the held-out sample drawn from the class manifolds.
const HELDOUT_SEED_OFFSET: u64 = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub experiment: ExperimentKind,
    pub out_dir: PathBuf,
    pub summary: serde_json::Value,
    /// False when an oracle check failed.
    pub passed: bool,
}

pub fn run(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    write_text(&cfg.out_dir.join("config.json"), &cfg.to_json()?)?;
    let started = Instant::now();
    let (summary, passed) = match cfg.experiment {
        ExperimentKind::Swissroll => (run_swissroll(&cfg.swissroll, cfg.seed, &cfg.out_dir)?, true),
        ExperimentKind::ManifoldclrToy => (run_manifoldclr_toy(&cfg.manifoldclr_toy, cfg.seed, &cfg.out_dir)?, true),
        ExperimentKind::SemisupToy => (run_semisup_toy(&cfg.semisup_toy, cfg.seed, cfg.workers, &cfg.out_dir)?, true),
        ExperimentKind::CheckGrads => {
            let rows = run_checks(&cfg.check_grads, cfg.seed)?;
            eprint!("{}", render_table(&rows));
            let passed = rows.iter().all(|r| r.passed);
            write_text(&cfg.out_dir.join("check_grads.csv"), &check_rows_csv(&rows))?;
            (json!({ "checks": rows, "passed": passed }), passed)
        }
        ExperimentKind::Paths => (run_paths(cfg)?, true),
    };
    let run_summary = RunSummary {
        experiment: cfg.experiment.name().into(),
        seed: cfg.seed,
        config: serde_json::to_value(cfg)?,
        final_metrics: None,
        wall_clock_s: started.elapsed().as_secs_f64(),
        results: summary.clone(),
    };
    write_text(&cfg.out_dir.join("summary.json"), &serde_json::to_string_pretty(&run_summary)?)?;
    Ok(RunOutcome {
        experiment: cfg.experiment,
        out_dir: cfg.out_dir.clone(),
        summary,
        passed,
    })
}

fn check_rows_csv(rows: &[CheckRow]) -> String {
    let mut s = String::from("check,max_rel_error,tolerance,passed\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.name, r.max_rel_error, r.tolerance, r.passed));
    }
    s
}

/// Mean of `mse` and `l1` over the last `FINAL_WINDOW` records.
pub fn final_averages(records: &[MetricsRecord]) -> (f64, f64) {
    let tail = &records[records.len().saturating_sub(FINAL_WINDOW)..];
    let n = tail.len().max(1) as f64;
    (
        tail.iter().map(|r| r.mse).sum::<f64>() / n,
        tail.iter().map(|r| r.l1).sum::<f64>() / n,
    )
}

/// Operators with Frobenius norm above `ACTIVE_FRACTION` of the largest.
pub fn active_operators(norms: &[f64]) -> usize {
    let max = norms.iter().cloned().fold(0.0, f64::max);
    norms.iter().filter(|&&n| n > ACTIVE_FRACTION * max).count()
}

/// Result of one swiss-roll training variant.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantResult {
    pub name: String,
    pub inference: InferenceKind,
    pub samples: Option<usize>,
    pub thresholded: bool,
    pub final_mse: f64,
    pub final_l1: f64,
    pub runtime_s: f64,
    pub op_fro: Vec<f64>,
    pub active_operators: usize,
    pub final_di: Option<f64>,
}

/// Trainings in a swiss-roll sweep, in execution order.
pub fn swissroll_variants(cfg: &SwissRollConfig) -> Vec<(String, InferenceKind, Option<usize>, bool)> {
    let mut v = Vec::new();
    if cfg.run_fista {
        v.push(("fista".to_string(), InferenceKind::Fista, None, false));
    }
    for &j in &cfg.samples {
        if cfg.standard {
            v.push((format!("var_std_j{j}"), InferenceKind::Variational, Some(j), false));
        }
        if cfg.thresholded {
            v.push((format!("var_thr_j{j}"), InferenceKind::Variational, Some(j), true));
        }
    }
    v
}

/// Trains one variant. Every variant of a sweep starts from the same
/// dictionary and sees the same pair sequence.
pub fn train_swissroll_variant(
    cfg: &SwissRollConfig,
    seed: u64,
    kind: InferenceKind,
    samples: Option<usize>,
    thresholded: bool,
) -> Result<(OperatorDictionary, Vec<MetricsRecord>)> {
    let roll = swiss_roll(cfg.points, cfg.noise_sd, seed)?;
    let table = NeighborTable::build(&roll.points, cfg.k_hi)?;
    let dict = init_dictionary(cfg.n_ops, 3, 3, &cfg.init, &mut stream(seed, 50))?;
    let heldout = if cfg.heldout_pairs > 0 {
        Some(table.sample_pairs(&roll.points, cfg.k_lo, cfg.k_hi, cfg.heldout_pairs, &mut stream(seed, 52))?.0)
    } else {
        None
    };
    let mut train = cfg.train.clone();
    if let Some(j) = samples {
        train.variational.samples = j;
    }
    train.variational.use_threshold = thresholded;
    let mut pair_rng = stream(seed, 51);
    let out = train_lie_operators(
        dict,
        kind,
        &train,
        seed,
        |_| Ok(table.sample_pairs(&roll.points, cfg.k_lo, cfg.k_hi, cfg.batch_size, &mut pair_rng)?.0),
        heldout.as_ref(),
    )?;
    Ok((out.trainer.dict, out.records))
}

fn path_starts(points: &[Vec<f64>], count: usize) -> Vec<Vec<f64>> {
    let count = count.min(points.len());
    (0..count).map(|i| points[i * points.len() / count].clone()).collect()
}

fn write_paths(dict: &OperatorDictionary, starts: &[Vec<f64>], p: &PathConfig, path: &Path) -> Result<()> {
    let grid = symmetric_grid(p.n_c, p.step);
    let mut rows = Vec::new();
    for (i, s) in starts.iter().enumerate() {
        for m in 0..dict.n_ops() {
            rows.push((i, m, grid.clone(), operator_paths(dict, s, m, &grid)?));
        }
    }
    write_text(path, &paths_csv(&rows))
}

pub fn run_swissroll(cfg: &SwissRollConfig, seed: u64, out: &Path) -> Result<serde_json::Value> {
    let roll = swiss_roll(cfg.points, cfg.noise_sd, seed)?;
    write_points_csv(&out.join("swissroll_points.csv"), &roll.points, None)?;
    let starts = path_starts(&roll.points, cfg.paths.starts);
    let mut results = Vec::new();
    for (name, kind, samples, thresholded) in swissroll_variants(cfg) {
        eprintln!("swissroll: training {name}");
        let (dict, records) = train_swissroll_variant(cfg, seed, kind, samples, thresholded)?;
        let (final_mse, final_l1) = final_averages(&records);
        let op_fro = dict.operator_norms();
        let last = records.last().cloned();
        let result = VariantResult {
            name: name.clone(),
            inference: kind,
            samples,
            thresholded,
            final_mse,
            final_l1,
            runtime_s: last.as_ref().map_or(0.0, |r| r.runtime_s),
            active_operators: active_operators(&op_fro),
            op_fro,
            final_di: records.iter().rev().find_map(|r| r.di_mean),
        };
        let summary = RunSummary {
            experiment: format!("swissroll/{name}"),
            seed,
            config: serde_json::to_value(cfg)?,
            final_metrics: last,
            wall_clock_s: result.runtime_s,
            results: serde_json::to_value(&result)?,
        };
        emit(
            &records,
            dict.n_ops(),
            &out.join(format!("{name}_metrics.csv")),
            &out.join(format!("{name}_summary.json")),
            &summary,
        )?;
        Checkpoint::from_dict(&dict).save(&out.join(format!("{name}_dict.json")))?;
        write_paths(&dict, &starts, &cfg.paths, &out.join(format!("{name}_paths.csv")))?;
        eprintln!(
            "swissroll: {name} final mse {:.5} l1 {:.4} runtime {:.1}s active {}",
            result.final_mse, result.final_l1, result.runtime_s, result.active_operators
        );
        results.push(result);
    }
    Ok(json!({ "variants": results }))
}

/// Accuracy and effective rank of one trained contrastive system.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClrResult {
    pub system: String,
    pub probe_accuracy: f64,
    pub effective_rank: f64,
    pub final_contrastive: f64,
    pub final_manifold: f64,
    pub runtime_s: f64,
}

/// Trains one system and evaluates it on `probe`.
pub fn evaluate_clr_system(
    name: &str,
    data: &SynthClassDataset,
    probe: &SynthClassDataset,
    clr: &ManifoldClrConfig,
    toy: &ClrToyConfig,
    seed: u64,
) -> Result<(ClrResult, ClrOutput)> {
    let out = train_manifoldclr(data, Some(&probe.points), clr, seed)?;
    let features = out.trainer.model.features(&probe.points)?;
    let last = out.epochs.last().map(|e| e.losses).unwrap_or_default();
    let result = ClrResult {
        system: name.into(),
        probe_accuracy: linear_probe(&features, &probe.labels, &toy.probe, seed)?,
        effective_rank: effective_rank(&features)?,
        final_contrastive: last.contrastive,
        final_manifold: last.manifold,
        runtime_s: out.records.last().map_or(0.0, |r| r.runtime_s),
    };
    Ok((result, out))
}

pub fn run_manifoldclr_toy(cfg: &ClrToyConfig, seed: u64, out: &Path) -> Result<serde_json::Value> {
    let data = synth_class_manifolds(&cfg.data, seed)?;
    let probe = data.resample(cfg.probe_per_class, cfg.data.extent, seed.wrapping_add(HELDOUT_SEED_OFFSET));
    let mut systems = vec![("manifoldclr".to_string(), cfg.clr.clone())];
    if cfg.compare_simclr {
        systems.push(("simclr".to_string(), cfg.clr.clone().simclr()));
    }
    for a in &cfg.ablations {
        systems.push((format!("ablation_{}", a.name()), a.apply(cfg.clr.clone())));
    }
    let mut results = Vec::new();
    for (name, clr) in systems {
        eprintln!("manifoldclr-toy: training {name}");
        let (result, trained) = evaluate_clr_system(&name, &data, &probe, &clr, cfg, seed)?;
        write_text(&out.join(format!("{name}_metrics.csv")), &metrics_csv(&trained.records, clr.n_ops)?)?;
        write_text(&out.join(format!("{name}_losses.csv")), &clr_losses_csv(&trained))?;
        Checkpoint::from_dict(&trained.trainer.model.dict).save(&out.join(format!("{name}_dict.json")))?;
        Checkpoint::from_mlp(&trained.trainer.model.backbone).save(&out.join(format!("{name}_backbone.json")))?;
        eprintln!(
            "manifoldclr-toy: {name} probe acc {:.4} effective rank {:.2}",
            result.probe_accuracy, result.effective_rank
        );
        results.push(result);
    }
    Ok(json!({ "systems": results }))
}

fn clr_losses_csv(out: &ClrOutput) -> String {
    let mut s = String::from("epoch,total,contrastive,manifold,kl,l1\n");
    for e in &out.epochs {
        let l = e.losses;
        s.push_str(&format!("{},{},{},{},{},{}\n", e.epoch, l.total, l.contrastive, l.manifold, l.kl, l.l1));
    }
    s
}

/// Per-method improvement over the supervised baseline.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: SemiMethod,
    pub mean_accuracy: f64,
    pub mean_improvement_pct: f64,
    pub se_improvement_pct: f64,
}

pub fn run_semisup_toy(cfg: &SemiToyConfig, seed: u64, workers: usize, out: &Path) -> Result<serde_json::Value> {
    let data = synth_class_manifolds(&cfg.data, seed)?;
    let test = data.resample(cfg.test_per_class, cfg.data.extent, seed.wrapping_add(HELDOUT_SEED_OFFSET));
    eprintln!("semisup-toy: pretraining");
    let pre = train_manifoldclr(&data, None, &cfg.pretrain, seed)?;
    write_text(&out.join("pretrain_metrics.csv"), &metrics_csv(&pre.records, cfg.pretrain.n_ops)?)?;
    let model = &pre.trainer.model;
    let train_features = model.features(&data.points)?;
    let test_features = model.features(&test.points)?;
    let aug = LieAugmenter {
        dict: model.dict.clone(),
        prior: cfg.pretrain.learned_prior.then(|| model.prior.clone()),
        fixed: cfg.pretrain.warmup,
        zeta: cfg.pretrain.threshold_prior_samples.then_some(cfg.pretrain.variational.zeta),
    };
    let semi = SemiData {
        train: &train_features,
        train_labels: &data.labels,
        test: &test_features,
        test_labels: &test.labels,
        n_classes: data.n_classes(),
    };
    eprintln!("semisup-toy: {} splits on {workers} worker(s)", cfg.splits);
    let rows = run_paired_splits(
        semi,
        cfg.labels_per_class,
        cfg.splits,
        &cfg.methods,
        Some(&aug),
        &cfg.semisup,
        seed,
        workers,
    )?;
    write_text(&out.join("splits.csv"), &split_results_csv(&rows))?;
    let methods: Vec<MethodSummary> = cfg
        .methods
        .iter()
        .filter_map(|&m| {
            let (mean, se) = improvement_summary(&rows, m)?;
            let accs: Vec<f64> = rows.iter().filter(|r| r.method == m).map(|r| r.accuracy).collect();
            Some(MethodSummary {
                method: m,
                mean_accuracy: accs.iter().sum::<f64>() / accs.len() as f64,
                mean_improvement_pct: mean,
                se_improvement_pct: se,
            })
        })
        .collect();
    for m in &methods {
        eprintln!(
            "semisup-toy: {:<12} acc {:.4} improvement {:+.2}% ± {:.2}",
            m.method.name(),
            m.mean_accuracy,
            m.mean_improvement_pct,
            m.se_improvement_pct
        );
    }
    Ok(json!({
        "labels_per_class": cfg.labels_per_class,
        "splits": cfg.splits,
        "methods": methods,
        "vlgo_beats_mixup": wins(&rows, SemiMethod::Vlgo, SemiMethod::Mixup),
    }))
}

/// Splits on which `a` is strictly more accurate than `b`.
pub fn wins(rows: &[crate::semisup::SplitResult], a: SemiMethod, b: SemiMethod) -> Option<usize> {
    let acc = |m: SemiMethod| -> Vec<(usize, f64)> {
        rows.iter().filter(|r| r.method == m).map(|r| (r.split_id, r.accuracy)).collect()
    };
    let (ra, rb) = (acc(a), acc(b));
    if ra.is_empty() || rb.is_empty() {
        return None;
    }
    Some(
        ra.iter()
            .filter(|(s, x)| rb.iter().any(|(t, y)| s == t && x > y))
            .count(),
    )
}

fn run_paths(cfg: &RunConfig) -> Result<serde_json::Value> {
    let p = &cfg.paths;
    let path = p
        .dictionary
        .as_ref()
        .ok_or_else(|| Error::config("paths.dictionary", "a dictionary checkpoint is required"))?;
    let dict = Checkpoint::load(path)
        .and_then(Checkpoint::into_dict)
        .map_err(|e| Error::config("paths.dictionary", e.to_string()))?;
    let starts = if p.start_points.is_empty() {
        if dict.dim() != 3 {
            return Err(Error::config(
                "paths.start_points",
                "required when the dictionary is not three-dimensional",
            ));
        }
        path_starts(&swiss_roll(1000, 0.0, cfg.seed)?.points, p.paths.starts)
    } else {
        if p.start_points.iter().any(|s| s.len() != dict.dim()) {
            return Err(Error::config(
                "paths.start_points",
                format!("every start point needs {} coordinates", dict.dim()),
            ));
        }
        p.start_points.clone()
    };
    write_paths(&dict, &starts, &p.paths, &cfg.out_dir.join("paths.csv"))?;
    Ok(json!({ "n_ops": dict.n_ops(), "dim": dict.dim(), "starts": starts.len() }))
}
