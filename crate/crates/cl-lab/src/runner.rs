//! Experiment orchestration: prepares a benchmark, trains one model per
//! seed through the task sequence, records accuracy and eRank traces
//! after every task, and exports per-seed metrics plus a seed-mean
//! aggregate.

use crate::config::{Benchmark, ExperimentConfig};
use crate::data::{
    default_data_dir, load_cifar100, load_mnist, make_split_cifar100, make_split_mnist,
    normalize_dataset, IlMode, TaskSequence,
};
use crate::error::{Error, Result};
use crate::metrics::{
    build_probe_set, evaluate_task_accuracy, export_metrics, record_erank_trace, MetricLog,
};
use crate::models::{build_model, Routing};
use crate::nn::derive_seed;
use crate::strategies::{train_task, ReplayBuffer};
use crate::tensor::Tensor;
use std::path::PathBuf;

/// Seed for the shared activation probe set; fixed so every method and
/// training seed is probed on the same inputs.
const PROBE_SEED: u64 = 0;

/// A benchmark ready to train on: task sequence plus the activation
/// probe batch.
pub struct PreparedData {
    pub seq: TaskSequence,
    pub probe: Tensor,
}

/// Loads, normalizes, splits, and (for desk-scale CIFAR) caps the
/// configured benchmark from `data_dir`-relative dataset folders.
pub fn prepare_benchmark(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let root = default_data_dir();
    let (train_raw, test_raw, n_classes) = match cfg.benchmark {
        Benchmark::SplitMnist => {
            let (tr, te) = load_mnist(&root.join("mnist"))?;
            (tr, te, 10)
        }
        Benchmark::SplitCifar100 => {
            let (tr, te) = load_cifar100(&root.join("cifar-100-binary"))?;
            (tr, te, cfg.cifar_classes())
        }
    };
    let (train, stats) = normalize_dataset(&train_raw, None);
    drop(train_raw);
    let (test, _) = normalize_dataset(&test_raw, Some(&stats));
    drop(test_raw);

    let mut seq = match cfg.benchmark {
        Benchmark::SplitMnist => make_split_mnist(&train, &test),
        Benchmark::SplitCifar100 => {
            make_split_cifar100(&train, &test, cfg.n_tasks(), n_classes, None)?
        }
    };
    if cfg.benchmark == Benchmark::SplitMnist && cfg.desk.mnist_train_per_class > 0 {
        for v in &mut seq.train {
            *v = v.capped_per_class(cfg.desk.mnist_train_per_class);
        }
    }
    if cfg.benchmark == Benchmark::SplitCifar100 && !cfg.paper_scale {
        if cfg.desk.train_per_class > 0 {
            for v in &mut seq.train {
                *v = v.capped_per_class(cfg.desk.train_per_class);
            }
        }
        if cfg.desk.eval_per_class > 0 {
            for v in &mut seq.test {
                *v = v.capped_per_class(cfg.desk.eval_per_class);
            }
        }
    }

    // Probe on the classes this experiment actually uses.
    let in_use: Vec<usize> = test
        .global_labels
        .iter()
        .enumerate()
        .filter(|(_, &y)| y < n_classes)
        .map(|(i, _)| i)
        .collect();
    let source = test.subset(&in_use);
    let probe = build_probe_set(&source, cfg.probe_size.min(source.len()), PROBE_SEED)?;
    Ok(PreparedData { seq, probe })
}

/// Trains one seed through the whole task sequence, filling a MetricLog.
pub fn run_single_seed(cfg: &ExperimentConfig, data: &PreparedData, seed: u64) -> Result<MetricLog> {
    let spec = cfg.model_spec()?;
    let n_tasks = data.seq.n_tasks();
    let mut model = build_model(&spec, derive_seed(seed, "model-init"))?;
    let mut buf = ReplayBuffer::new(cfg.strategy.buffer_capacity, derive_seed(seed, "reservoir"));
    let mut log = MetricLog::new(n_tasks, vec![seed], cfg.digest());

    for t in 1..=n_tasks {
        train_task(
            &mut model,
            &data.seq.tasks,
            t,
            &data.seq.train[t - 1],
            &cfg.strategy,
            &mut buf,
            &cfg.optimizer,
            cfg.epochs_per_task,
            cfg.batch_size,
            seed,
        )?;
        let seen = data.seq.seen_classes(t);
        for tau in 1..=t {
            let routing = match data.seq.il_mode {
                IlMode::TaskIl => Routing::TaskIl { task_id: tau },
                IlMode::ClassIl => Routing::ClassIl { seen: &seen },
            };
            let acc = evaluate_task_accuracy(&mut model, &data.seq.test[tau - 1], &routing)?;
            log.accuracy.set(t, tau, acc)?;
        }
        record_erank_trace(&mut model, t, &data.probe, &mut log)?;
        let avg = log.accuracy.average_accuracy(t)?;
        eprintln!(
            "[{} seed {seed}] task {t}/{n_tasks}: avg accuracy {avg:.4}",
            cfg.cell_name()
        );
    }
    Ok(log)
}

/// Element-wise mean of per-seed logs (all seeds share the task protocol,
/// so matrices and eRank traces are congruent).
pub fn aggregate_logs(logs: &[MetricLog], digest: String) -> Result<MetricLog> {
    let first = logs
        .first()
        .ok_or_else(|| Error::Input("no seed logs to aggregate".into()))?;
    let n_tasks = first.accuracy.n_tasks();
    let seeds: Vec<u64> = logs.iter().flat_map(|l| l.seeds.iter().copied()).collect();
    let mut out = MetricLog::new(n_tasks, seeds, digest);
    for t in 1..=n_tasks {
        for tau in 1..=t {
            let mut vals = Vec::new();
            for l in logs {
                if let Some(v) = l.accuracy.get(t, tau) {
                    vals.push(v);
                }
            }
            if vals.len() != logs.len() {
                return Err(Error::Input(format!(
                    "accuracy matrices disagree on populated entries at ({t}, {tau})"
                )));
            }
            out.accuracy
                .set(t, tau, vals.iter().sum::<f64>() / vals.len() as f64)?;
        }
    }
    for (i, rec) in first.erank.iter().enumerate() {
        let mut sum = 0.0;
        for l in logs {
            let r = l.erank.get(i).ok_or_else(|| {
                Error::Input("eRank traces have different lengths across seeds".into())
            })?;
            if r.task != rec.task || r.probe != rec.probe || r.group != rec.group {
                return Err(Error::Input("eRank traces are misaligned across seeds".into()));
            }
            sum += r.erank;
        }
        let mut mean = rec.clone();
        mean.erank = sum / logs.len() as f64;
        out.erank.push(mean);
    }
    Ok(out)
}

/// Outcome of one grid cell: where it wrote, which seeds succeeded, and
/// which failed (a failed seed aborts only itself).
pub struct RunOutcome {
    pub cell_dir: PathBuf,
    pub logs: Vec<(u64, MetricLog)>,
    pub failures: Vec<(u64, Error)>,
}

/// Runs every seed of one experiment cell, exporting per-seed metric
/// directories plus a `mean/` aggregate under `output_dir/<cell name>/`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    if cfg.paper_scale {
        eprintln!(
            "warning: paper-scale protocol (20 tasks x 5 classes, full width) \
             takes orders of magnitude longer than the desk-scale default"
        );
    }
    let data = prepare_benchmark(cfg)?;
    let cell_dir = cfg.output_dir.join(cfg.cell_name());
    let mut logs = Vec::new();
    let mut failures = Vec::new();
    for &seed in &cfg.seeds {
        match run_single_seed(cfg, &data, seed) {
            Ok(log) => {
                export_metrics(&log, &cell_dir.join(format!("seed{seed}")))?;
                logs.push((seed, log));
            }
            Err(e) => {
                eprintln!("[{} seed {seed}] failed: {e}", cfg.cell_name());
                failures.push((seed, e));
            }
        }
    }
    if logs.is_empty() {
        let (_, e) = failures
            .pop()
            .expect("at least one seed ran, since seeds must be nonempty");
        return Err(e);
    }
    let only: Vec<MetricLog> = logs.iter().map(|(_, l)| l.clone()).collect();
    let mean = aggregate_logs(&only, cfg.digest())?;
    export_metrics(&mean, &cell_dir.join("mean"))?;
    Ok(RunOutcome {
        cell_dir,
        logs,
        failures,
    })
}

/// Runs each cell of an expanded grid independently; one cell's failure
/// does not stop the others.
pub fn run_grid(cells: &[ExperimentConfig]) -> Result<Vec<RunOutcome>> {
    let mut outcomes = Vec::new();
    let mut first_err = None;
    for cfg in cells {
        match run_experiment(cfg) {
            Ok(o) => outcomes.push(o),
            Err(e) => {
                eprintln!("[{}] cell failed: {e}", cfg.cell_name());
                if first_err.is_none() {
                    first_err = Some(e);
                }
            }
        }
    }
    match (outcomes.is_empty(), first_err) {
        (true, Some(e)) => Err(e),
        _ => Ok(outcomes),
    }
}
