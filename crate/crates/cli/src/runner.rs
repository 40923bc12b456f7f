//! Sweep execution: dataset generation, per-run training and artifacts,
//! worker-pool parallelism, and sweep-level aggregation.
//!
//! Each run is fully isolated: its own RNG streams, its own output
//! subdirectory, and a dataset shared read-only across the architectures
//! compared at the same sweep seed. Aggregation happens after all workers
//! finish, in deterministic run-plan order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use gatlab_core::diagnostics::{
    alpha_histogram, edge_homophily, median, smoothness_energy, PairMode,
};
use gatlab_core::synth::{
    gen_neighbor_dependent, gen_self_sufficient, gen_self_sufficient_with_labels, Dataset,
    NeighborDependentRecipe, RecipeSeeds,
};
use gatlab_core::train::{train, TrainOutcome};

use crate::config::{DatasetConfig, ExperimentConfig, LabelModeConfig, RunPlan};
use crate::formats::{
    export_dataset, fmt_f64, read_edge_list, read_labels, write_atomic, CsvDoc,
};
use crate::plots::render_run_dir;

pub const ALPHA_BINS: usize = 20;

/// One line of trace.jsonl.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
}

/// One line of alpha_hist.csv.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaHistRow {
    pub epoch: usize,
    pub layer: usize,
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: usize,
}

/// Parsed summary.csv row, used for aggregation and reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub arch: String,
    pub depth: usize,
    pub seed: u64,
    pub epochs_run: usize,
    pub diverged: bool,
    pub min_train_loss: f64,
    pub epoch_min_train_loss: usize,
    pub test_acc_at_min_train_loss: f64,
    pub train_acc_at_min_train_loss: f64,
    pub max_val_acc: f64,
    pub epoch_max_val_acc: usize,
    pub test_acc_at_max_val_acc: f64,
    pub best_train_acc: f64,
    pub best_test_acc: f64,
    pub final_loss: f64,
    pub final_train_acc: f64,
    pub final_val_acc: f64,
    pub final_test_acc: f64,
}

pub const SUMMARY_HEADER: &str = "arch,depth,seed,epochs_run,diverged,min_train_loss,\
epoch_min_train_loss,test_acc_at_min_train_loss,train_acc_at_min_train_loss,max_val_acc,\
epoch_max_val_acc,test_acc_at_max_val_acc,best_train_acc,best_test_acc,final_loss,\
final_train_acc,final_val_acc,final_test_acc";

pub fn generate_dataset(cfg: &ExperimentConfig, dataset_seed: u64) -> Result<Dataset, String> {
    match &cfg.dataset {
        DatasetConfig::SelfSufficientEr { n, p, classes, .. } => {
            let mut rng = gatlab_core::rng::SplitMix64::new(dataset_seed);
            let graph_seed = rng.next_u64();
            let label_seed = rng.next_u64();
            let g = gatlab_core::graph::Graph::erdos_renyi(*n, *p, graph_seed)
                .map_err(|e| format!("dataset: {e}"))?;
            gen_self_sufficient(&g, *classes, label_seed).map_err(|e| format!("dataset: {e}"))
        }
        DatasetConfig::NeighborDependentEr {
            n,
            p,
            dim,
            hops,
            classes,
            ..
        } => {
            let recipe = NeighborDependentRecipe {
                n: *n,
                p: *p,
                dim: *dim,
                hops: *hops,
                classes: *classes,
                seeds: RecipeSeeds::from_master(dataset_seed),
            };
            gen_neighbor_dependent(&recipe).map_err(|e| format!("dataset: {e}"))
        }
        DatasetConfig::Files {
            edge_list,
            labels,
            label_mode,
            classes,
            ..
        } => {
            let g = read_edge_list(edge_list)?;
            match label_mode {
                LabelModeConfig::Original => {
                    let path = labels.as_ref().expect("validated");
                    let labels = read_labels(path, g.num_nodes(), *classes)?;
                    gen_self_sufficient_with_labels(&g, &labels, *classes, dataset_seed)
                        .map_err(|e| format!("dataset: {e}"))
                }
                LabelModeConfig::Randomized => gen_self_sufficient(&g, *classes, dataset_seed)
                    .map_err(|e| format!("dataset: {e}")),
            }
        }
    }
}

fn write_trace_jsonl(path: &Path, outcome: &TrainOutcome) -> Result<(), String> {
    let mut buf = String::new();
    for m in &outcome.trace.epochs {
        let row = TraceRow {
            epoch: m.epoch,
            loss: m.loss,
            train_acc: m.train_acc,
            val_acc: m.val_acc,
            test_acc: m.test_acc,
        };
        buf.push_str(&serde_json::to_string(&row).map_err(|e| format!("trace json: {e}"))?);
        buf.push('\n');
    }
    write_atomic(path, &buf)
}

fn write_alpha_csvs(dir: &Path, outcome: &TrainOutcome) -> Result<(), String> {
    let mut hist = CsvDoc::new("epoch,layer,bin_lo,bin_hi,count");
    let mut summary = CsvDoc::new("epoch,layer,median,mean,min,max,frac_ge_0.99");
    for snap in &outcome.trace.alpha {
        let counts = alpha_histogram(&snap.alpha_vv, ALPHA_BINS);
        for (b, &count) in counts.iter().enumerate() {
            hist.row(&[
                snap.epoch.to_string(),
                snap.layer.to_string(),
                fmt_f64(b as f64 / ALPHA_BINS as f64),
                fmt_f64((b + 1) as f64 / ALPHA_BINS as f64),
                count.to_string(),
            ]);
        }
        let n = snap.alpha_vv.len() as f64;
        let mean = snap.alpha_vv.iter().sum::<f64>() / n;
        let min = snap.alpha_vv.iter().copied().fold(f64::INFINITY, f64::min);
        let max = snap
            .alpha_vv
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let frac = snap.alpha_vv.iter().filter(|&&a| a >= 0.99).count() as f64 / n;
        summary.row(&[
            snap.epoch.to_string(),
            snap.layer.to_string(),
            fmt_f64(median(&snap.alpha_vv)),
            fmt_f64(mean),
            fmt_f64(min),
            fmt_f64(max),
            fmt_f64(frac),
        ]);
    }
    write_atomic(&dir.join("alpha_hist.csv"), &hist.finish())?;
    write_atomic(&dir.join("alpha_summary.csv"), &summary.finish())
}

fn write_conservation_csv(path: &Path, outcome: &TrainOutcome) -> Result<(), String> {
    let mut doc = CsvDoc::new("epoch,layer,unit,law,lhs,rhs,rel_residual");
    for snap in &outcome.trace.conservation {
        for r in &snap.residuals {
            doc.row(&[
                snap.epoch.to_string(),
                r.layer.to_string(),
                r.unit.to_string(),
                r.law.name().to_string(),
                fmt_f64(r.lhs),
                fmt_f64(r.rhs),
                fmt_f64(r.relative_residual()),
            ]);
        }
        for &layer in &snap.eq8_not_applicable {
            doc.row(&[
                snap.epoch.to_string(),
                layer.to_string(),
                "na".into(),
                "gate_eq8".into(),
                "na".into(),
                "na".into(),
                "na".into(),
            ]);
        }
    }
    write_atomic(path, &doc.finish())
}

fn write_rel_change_csv(path: &Path, outcome: &TrainOutcome) -> Result<(), String> {
    let mut doc = CsvDoc::new("epoch,param,max_abs,mean_abs");
    for snap in &outcome.trace.rel_change {
        for (name, max_abs, mean_abs) in &snap.per_param {
            doc.row(&[
                snap.epoch.to_string(),
                name.clone(),
                fmt_f64(*max_abs),
                fmt_f64(*mean_abs),
            ]);
        }
    }
    write_atomic(path, &doc.finish())
}

fn write_energy_csv(path: &Path, ds: &Dataset, outcome: &TrainOutcome) -> Result<(), String> {
    let mut doc = CsvDoc::new("tag,mode,value");
    for (tag, tensor) in [("input", &ds.features), ("final_logits", &outcome.final_logits)] {
        for mode in [PairMode::AllPairs, PairMode::AdjacentPairs] {
            doc.row(&[
                tag.to_string(),
                mode.name().to_string(),
                fmt_f64(smoothness_energy(tensor, &ds.graph, mode)),
            ]);
        }
    }
    write_atomic(path, &doc.finish())
}

fn write_summary_csv(path: &Path, plan: &RunPlan, outcome: &TrainOutcome) -> Result<(), String> {
    let s = &outcome.trace.summary;
    let mut doc = CsvDoc::new(SUMMARY_HEADER);
    doc.row(&[
        plan.arch.clone(),
        plan.depth.to_string(),
        plan.seed.to_string(),
        s.epochs_run.to_string(),
        outcome.trace.diverged.to_string(),
        fmt_f64(s.min_train_loss),
        s.epoch_of_min_train_loss.to_string(),
        fmt_f64(s.test_acc_at_min_train_loss),
        fmt_f64(s.train_acc_at_min_train_loss),
        fmt_f64(s.max_val_acc),
        s.epoch_of_max_val_acc.to_string(),
        fmt_f64(s.test_acc_at_max_val_acc),
        fmt_f64(s.best_train_acc),
        fmt_f64(s.best_test_acc),
        fmt_f64(s.final_loss),
        fmt_f64(s.final_train_acc),
        fmt_f64(s.final_val_acc),
        fmt_f64(s.final_test_acc),
    ]);
    write_atomic(path, &doc.finish())
}

/// Execute one run end to end, writing all artifacts under `run_dir`.
/// The base dataset is re-split with the run's own 2:1:1 split seed.
pub fn execute_run(
    plan: &RunPlan,
    base_dataset: &Dataset,
    cfg: &ExperimentConfig,
    run_dir: &Path,
) -> Result<SummaryRow, String> {
    std::fs::create_dir_all(run_dir).map_err(|e| format!("{}: {e}", run_dir.display()))?;
    let run_meta = serde_json::json!({
        "arch": plan.arch,
        "depth": plan.depth,
        "seed": plan.seed,
        "dataset_seed": plan.dataset_seed,
        "split_seed": plan.split_seed,
        "init_seed": plan.policy.seed,
        "matrix_scheme": plan.policy.matrix,
        "attention_scheme": plan.policy.attention,
    });
    write_atomic(
        &run_dir.join("run.json"),
        &serde_json::to_string_pretty(&run_meta).expect("static shape"),
    )?;

    let mut dataset = base_dataset.clone();
    let (train_mask, val_mask, test_mask) =
        gatlab_core::synth::split_2_1_1(dataset.graph.num_nodes(), plan.split_seed);
    dataset.train_mask = train_mask;
    dataset.val_mask = val_mask;
    dataset.test_mask = test_mask;
    let dataset = &dataset;

    let outcome = train(&plan.spec, &plan.policy, dataset, &cfg.train_config())
        .map_err(|e| format!("training failed: {e}"))?;

    write_trace_jsonl(&run_dir.join("trace.jsonl"), &outcome)?;
    write_alpha_csvs(run_dir, &outcome)?;
    write_conservation_csv(&run_dir.join("conservation.csv"), &outcome)?;
    write_rel_change_csv(&run_dir.join("rel_change.csv"), &outcome)?;
    write_energy_csv(&run_dir.join("energy.csv"), dataset, &outcome)?;
    write_summary_csv(&run_dir.join("summary.csv"), plan, &outcome)?;
    render_run_dir(run_dir)?;

    let s = &outcome.trace.summary;
    Ok(SummaryRow {
        arch: plan.arch.clone(),
        depth: plan.depth,
        seed: plan.seed,
        epochs_run: s.epochs_run,
        diverged: outcome.trace.diverged,
        min_train_loss: s.min_train_loss,
        epoch_min_train_loss: s.epoch_of_min_train_loss,
        test_acc_at_min_train_loss: s.test_acc_at_min_train_loss,
        train_acc_at_min_train_loss: s.train_acc_at_min_train_loss,
        max_val_acc: s.max_val_acc,
        epoch_max_val_acc: s.epoch_of_max_val_acc,
        test_acc_at_max_val_acc: s.test_acc_at_max_val_acc,
        best_train_acc: s.best_train_acc,
        best_test_acc: s.best_test_acc,
        final_loss: s.final_loss,
        final_train_acc: s.final_train_acc,
        final_val_acc: s.final_val_acc,
        final_test_acc: s.final_test_acc,
    })
}

type RunResults = Vec<Option<Result<SummaryRow, String>>>;

pub struct SweepOutcome {
    pub output_dir: PathBuf,
    pub completed: Vec<SummaryRow>,
    pub failures: Vec<(String, String)>,
}

/// Resolve the output directory: relative paths land under the environment
/// variable `GATLAB_OUT_ROOT` when set.
pub fn resolve_output_dir(configured: &Path) -> PathBuf {
    match std::env::var_os("GATLAB_OUT_ROOT") {
        Some(root) if configured.is_relative() => PathBuf::from(root).join(configured),
        _ => configured.to_path_buf(),
    }
}

/// Run the whole sweep with up to `workers` concurrent runs.
pub fn execute_sweep(cfg: &ExperimentConfig, workers: usize) -> Result<SweepOutcome, String> {
    let runs = cfg.resolve_runs()?;
    let out_dir = resolve_output_dir(&cfg.output_dir);
    std::fs::create_dir_all(&out_dir).map_err(|e| format!("{}: {e}", out_dir.display()))?;
    write_atomic(
        &out_dir.join("config.json"),
        &serde_json::to_string_pretty(cfg).map_err(|e| format!("config json: {e}"))?,
    )?;

    // One base dataset per config, exported once; runs only re-split it.
    let mut datasets: BTreeMap<u64, Arc<Dataset>> = BTreeMap::new();
    for plan in &runs {
        if let std::collections::btree_map::Entry::Vacant(e) = datasets.entry(plan.dataset_seed) {
            let ds = generate_dataset(cfg, plan.dataset_seed)?;
            let ds_dir = out_dir.join("datasets").join("base");
            export_dataset(&ds_dir, &ds)?;
            let homophily = edge_homophily(&ds.labels, &ds.graph);
            write_atomic(
                &ds_dir.join("stats.json"),
                &serde_json::to_string_pretty(&serde_json::json!({
                    "edge_homophily": homophily.value,
                    "degenerate": homophily.degenerate,
                    "nodes": ds.graph.num_nodes(),
                    "undirected_edges": ds.graph.num_undirected_edges(),
                    "classes": ds.num_classes,
                }))
                .expect("static shape"),
            )?;
            e.insert(Arc::new(ds));
        }
    }

    let cfg = Arc::new(cfg.clone());
    let runs = Arc::new(runs);
    let datasets = Arc::new(datasets);
    let next = Arc::new(AtomicUsize::new(0));
    let results: Arc<Mutex<RunResults>> = Arc::new(Mutex::new(vec![None; runs.len()]));

    let worker_count = workers.clamp(1, runs.len());
    std::thread::scope(|scope| {
        for _ in 0..worker_count {
            let cfg = Arc::clone(&cfg);
            let runs = Arc::clone(&runs);
            let datasets = Arc::clone(&datasets);
            let next = Arc::clone(&next);
            let results = Arc::clone(&results);
            let out_dir = out_dir.clone();
            scope.spawn(move || loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                if idx >= runs.len() {
                    break;
                }
                let plan = &runs[idx];
                let run_dir = out_dir.join("runs").join(plan.dir_name());
                let dataset = &datasets[&plan.dataset_seed];
                let result = execute_run(plan, dataset, &cfg, &run_dir);
                if let Err(msg) = &result {
                    let _ = write_atomic(&run_dir.join("FAILED"), &format!("{msg}\n"));
                }
                results.lock().expect("poisoned")[idx] = Some(result);
            });
        }
    });

    let results = Arc::try_unwrap(results)
        .map_err(|_| "worker results still shared".to_string())?
        .into_inner()
        .map_err(|_| "worker mutex poisoned".to_string())?;
    let mut completed = Vec::new();
    let mut failures = Vec::new();
    for (plan, result) in runs.iter().zip(results) {
        match result {
            Some(Ok(row)) => completed.push(row),
            Some(Err(msg)) => failures.push((plan.dir_name(), msg)),
            None => failures.push((plan.dir_name(), "run never executed".into())),
        }
    }

    write_sweep_summary(&out_dir.join("sweep_summary.csv"), &completed)?;
    Ok(SweepOutcome {
        output_dir: out_dir,
        completed,
        failures,
    })
}

/// Aggregate per-(arch, depth) means with 95% confidence intervals over
/// seeds, for both reporting conventions.
pub fn write_sweep_summary(path: &Path, rows: &[SummaryRow]) -> Result<(), String> {
    let mut groups: BTreeMap<(String, usize), Vec<&SummaryRow>> = BTreeMap::new();
    for row in rows {
        groups
            .entry((row.arch.clone(), row.depth))
            .or_default()
            .push(row);
    }
    let mut doc = CsvDoc::new(
        "arch,depth,seeds,mean_test_at_max_val,ci95_test_at_max_val,\
         mean_test_at_min_loss,ci95_test_at_min_loss",
    );
    for ((arch, depth), group) in &groups {
        let at_max_val: Vec<f64> = group.iter().map(|r| r.test_acc_at_max_val_acc).collect();
        let at_min_loss: Vec<f64> = group
            .iter()
            .map(|r| r.test_acc_at_min_train_loss)
            .collect();
        let c1 = crate::report::report_confidence(&at_max_val);
        let c2 = crate::report::report_confidence(&at_min_loss);
        let ci = |c: Option<f64>| c.map(fmt_f64).unwrap_or_else(|| "na".into());
        doc.row(&[
            arch.clone(),
            depth.to_string(),
            group.len().to_string(),
            fmt_f64(c1.mean),
            ci(c1.ci95_half_width),
            fmt_f64(c2.mean),
            ci(c2.ci95_half_width),
        ]);
    }
    write_atomic(path, &doc.finish())
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>, String> {
    let file = File::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut rows = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| format!("{}: {e}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(
            serde_json::from_str(&line).map_err(|e| format!("{}: {e}", path.display()))?,
        );
    }
    Ok(rows)
}

pub fn read_alpha_hist(path: &Path) -> Result<Vec<AlphaHistRow>, String> {
    let text =
        std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(format!("{}: line {}: expected 5 fields", path.display(), i + 1));
        }
        let parse_err = |what: &str| format!("{}: line {}: bad {what}", path.display(), i + 1);
        rows.push(AlphaHistRow {
            epoch: fields[0].parse().map_err(|_| parse_err("epoch"))?,
            layer: fields[1].parse().map_err(|_| parse_err("layer"))?,
            bin_lo: fields[2].parse().map_err(|_| parse_err("bin_lo"))?,
            bin_hi: fields[3].parse().map_err(|_| parse_err("bin_hi"))?,
            count: fields[4].parse().map_err(|_| parse_err("count"))?,
        });
    }
    Ok(rows)
}

pub fn read_summary(path: &Path) -> Result<SummaryRow, String> {
    let text =
        std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| format!("{}: empty", path.display()))?;
    if header != SUMMARY_HEADER {
        return Err(format!("{}: unexpected header", path.display()));
    }
    let line = lines
        .next()
        .ok_or_else(|| format!("{}: missing data row", path.display()))?;
    let f: Vec<&str> = line.split(',').collect();
    if f.len() != 18 {
        return Err(format!("{}: expected 18 fields", path.display()));
    }
    let err = |what: &str| format!("{}: bad {what}", path.display());
    Ok(SummaryRow {
        arch: f[0].to_string(),
        depth: f[1].parse().map_err(|_| err("depth"))?,
        seed: f[2].parse().map_err(|_| err("seed"))?,
        epochs_run: f[3].parse().map_err(|_| err("epochs_run"))?,
        diverged: f[4].parse().map_err(|_| err("diverged"))?,
        min_train_loss: f[5].parse().map_err(|_| err("min_train_loss"))?,
        epoch_min_train_loss: f[6].parse().map_err(|_| err("epoch_min_train_loss"))?,
        test_acc_at_min_train_loss: f[7].parse().map_err(|_| err("test_acc"))?,
        train_acc_at_min_train_loss: f[8].parse().map_err(|_| err("train_acc"))?,
        max_val_acc: f[9].parse().map_err(|_| err("max_val_acc"))?,
        epoch_max_val_acc: f[10].parse().map_err(|_| err("epoch_max_val_acc"))?,
        test_acc_at_max_val_acc: f[11].parse().map_err(|_| err("test_at_max_val"))?,
        best_train_acc: f[12].parse().map_err(|_| err("best_train_acc"))?,
        best_test_acc: f[13].parse().map_err(|_| err("best_test_acc"))?,
        final_loss: f[14].parse().map_err(|_| err("final_loss"))?,
        final_train_acc: f[15].parse().map_err(|_| err("final_train_acc"))?,
        final_val_acc: f[16].parse().map_err(|_| err("final_val_acc"))?,
        final_test_acc: f[17].parse().map_err(|_| err("final_test_acc"))?,
    })
}

/// Gather all run summaries under `<sweep_dir>/runs/*/summary.csv`.
pub fn collect_summaries(sweep_dir: &Path) -> Result<Vec<SummaryRow>, String> {
    let runs_dir = sweep_dir.join("runs");
    let mut rows = Vec::new();
    let entries =
        std::fs::read_dir(&runs_dir).map_err(|e| format!("{}: {e}", runs_dir.display()))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    for dir in dirs {
        let summary = dir.join("summary.csv");
        if summary.exists() {
            rows.push(read_summary(&summary)?);
        }
    }
    Ok(rows)
}
