//! Accuracy matrix, average accuracy, forgetting, and eRank traces, plus
//! their CSV/manifest export.

use crate::data::{LabeledSet, TaskView};
use crate::error::{Error, Result};
use crate::linalg::{effective_rank, group_erank, singular_values};
use crate::models::{Model, Routing};
use crate::nn::seeded_rng;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Chunk size for evaluation forward passes.
const EVAL_BATCH: usize = 256;

/// Lower-triangular K×K accuracy matrix: entry (t, τ), τ ≤ t, is the
/// accuracy on task τ's test set after training through task t.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyMatrix {
    k: usize,
    entries: Vec<Option<f64>>,
}

impl AccuracyMatrix {
    pub fn new(k: usize) -> Self {
        AccuracyMatrix {
            k,
            entries: vec![None; k * k],
        }
    }

    pub fn n_tasks(&self) -> usize {
        self.k
    }

    /// Sets Acc(τ|t); both indices 1-based, τ ≤ t.
    pub fn set(&mut self, after_task: usize, eval_task: usize, acc: f64) -> Result<()> {
        if after_task < 1 || after_task > self.k || eval_task < 1 || eval_task > after_task {
            return Err(Error::Usage(format!(
                "accuracy entry ({after_task}, {eval_task}) outside the lower triangle of K={}",
                self.k
            )));
        }
        if !(0.0..=1.0).contains(&acc) {
            return Err(Error::Input(format!("accuracy {acc} outside [0, 1]")));
        }
        self.entries[(after_task - 1) * self.k + (eval_task - 1)] = Some(acc);
        Ok(())
    }

    pub fn get(&self, after_task: usize, eval_task: usize) -> Option<f64> {
        if after_task < 1 || after_task > self.k || eval_task < 1 || eval_task > self.k {
            return None;
        }
        self.entries[(after_task - 1) * self.k + (eval_task - 1)]
    }

    /// A(t) = mean over τ ≤ t of Acc(τ|t).
    pub fn average_accuracy(&self, t: usize) -> Result<f64> {
        let row: Vec<f64> = (1..=t)
            .map(|tau| {
                self.get(t, tau).ok_or_else(|| {
                    Error::Usage(format!("Acc({tau}|{t}) has not been recorded"))
                })
            })
            .collect::<Result<_>>()?;
        if row.is_empty() {
            return Err(Error::Usage("average_accuracy over an empty row".into()));
        }
        Ok(row.iter().sum::<f64>() / row.len() as f64)
    }

    /// F_k = max over t < T of Acc(k|t) minus Acc(k|T); unclamped.
    pub fn forgetting(&self, k: usize, final_t: usize) -> Result<f64> {
        if final_t <= k {
            return Err(Error::Input(format!(
                "forgetting of task {k} needs a later final task, got {final_t}"
            )));
        }
        let mut historical = f64::NEG_INFINITY;
        for t in k..final_t {
            let v = self
                .get(t, k)
                .ok_or_else(|| Error::Usage(format!("Acc({k}|{t}) has not been recorded")))?;
            historical = historical.max(v);
        }
        let last = self
            .get(final_t, k)
            .ok_or_else(|| Error::Usage(format!("Acc({k}|{final_t}) has not been recorded")))?;
        Ok(historical - last)
    }

    /// Mean F_k over k < t (the running definition); None at task 1.
    pub fn average_forgetting(&self, t: usize) -> Result<Option<f64>> {
        if t <= 1 {
            return Ok(None);
        }
        let vals: Vec<f64> = (1..t).map(|k| self.forgetting(k, t)).collect::<Result<_>>()?;
        Ok(Some(vals.iter().sum::<f64>() / vals.len() as f64))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Probe {
    Activation,
    Weight,
}

impl Probe {
    pub fn name(&self) -> &'static str {
        match self {
            Probe::Activation => "activation",
            Probe::Weight => "weight",
        }
    }
}

/// One eRank observation: after `task`, the given probe/group.
#[derive(Debug, Clone, PartialEq)]
pub struct ErankRecord {
    pub task: usize,
    pub probe: Probe,
    pub group: String,
    pub erank: f64,
}

/// Everything one run produces.
#[derive(Debug, Clone)]
pub struct MetricLog {
    pub accuracy: AccuracyMatrix,
    pub erank: Vec<ErankRecord>,
    pub seeds: Vec<u64>,
    pub config_digest: String,
}

impl MetricLog {
    pub fn new(n_tasks: usize, seeds: Vec<u64>, config_digest: String) -> Self {
        MetricLog {
            accuracy: AccuracyMatrix::new(n_tasks),
            erank: Vec::new(),
            seeds,
            config_digest,
        }
    }
}

/// Accuracy of the model on a task's test view: fraction of items where
/// the logits argmax equals the stored label (local under Task-IL,
/// global under Class-IL). Evaluates in chunks.
pub fn evaluate_task_accuracy(model: &mut Model, view: &TaskView, routing: &Routing) -> Result<f64> {
    if view.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty test set".into()));
    }
    let n = view.len();
    let mut correct = 0usize;
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_BATCH).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let chunk = view.inputs.subset(&idx);
        let logits = model.forward(&chunk.images, routing)?;
        let c = logits.dim(1);
        for (i, row) in logits.data.chunks(c).enumerate() {
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                .map(|(j, _)| j)
                .unwrap();
            if argmax == view.labels[start + i] {
                correct += 1;
            }
        }
        start = end;
    }
    Ok(correct as f64 / n as f64)
}

/// A fixed activation-probe batch: up to `size` samples drawn evenly
/// across classes from `set`, deterministically from `seed`.
pub fn build_probe_set(set: &LabeledSet, size: usize, seed: u64) -> Result<Tensor> {
    if set.is_empty() || size == 0 {
        return Err(Error::Input("probe set needs a nonempty source and size".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in set.global_labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let mut rng = seeded_rng(seed, "erank-probe");
    let mut pools: Vec<Vec<usize>> = by_class
        .into_values()
        .map(|mut v| {
            v.shuffle(&mut rng);
            v
        })
        .collect();
    // round-robin across classes until size is reached
    let mut chosen = Vec::with_capacity(size);
    let mut depth = 0;
    while chosen.len() < size {
        let mut any = false;
        for pool in &pools {
            if let Some(&i) = pool.get(depth) {
                chosen.push(i);
                any = true;
                if chosen.len() == size {
                    break;
                }
            }
        }
        if !any {
            break; // source exhausted
        }
        depth += 1;
    }
    pools.clear();
    chosen.sort_unstable();
    Ok(set.subset(&chosen).images)
}

/// Appends the post-task eRank observations: the penultimate-activation
/// eRank on the fixed probe set, and the mean weight eRank of every
/// layer group (matricized kernels).
pub fn record_erank_trace(
    model: &mut Model,
    task_index: usize,
    probe: &Tensor,
    log: &mut MetricLog,
) -> Result<()> {
    let acts = model.penultimate_activations(probe)?;
    let spectrum = singular_values(&acts)?;
    log.erank.push(ErankRecord {
        task: task_index,
        probe: Probe::Activation,
        group: "penultimate".to_string(),
        erank: effective_rank(&spectrum)?,
    });
    for (group, names) in model.layer_groups() {
        let mats: Vec<Tensor> = names
            .iter()
            .map(|n| model.matricized(n))
            .collect::<Result<_>>()?;
        log.erank.push(ErankRecord {
            task: task_index,
            probe: Probe::Weight,
            group: group.name().to_string(),
            erank: group_erank(&mats)?,
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------
// export

/// Peak of each (probe, group) series, for erank_pct.
fn series_peaks(records: &[ErankRecord]) -> BTreeMap<(Probe, String), f64> {
    let mut peaks: BTreeMap<(Probe, String), f64> = BTreeMap::new();
    for r in records {
        let e = peaks.entry((r.probe, r.group.clone())).or_insert(f64::MIN);
        *e = e.max(r.erank);
    }
    peaks
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config_digest: String,
    seeds: Vec<u64>,
    element_type: String,
    wall_clock_unix_seconds: u64,
}

/// Writes accuracy.csv, summary.csv, erank.csv, and manifest.json into
/// `dir`. The CSVs are pure functions of the log; only the manifest
/// carries a timestamp.
pub fn export_metrics(log: &MetricLog, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let k = log.accuracy.n_tasks();

    let mut acc = String::from("after_task,eval_task,accuracy\n");
    for t in 1..=k {
        for tau in 1..=t {
            if let Some(v) = log.accuracy.get(t, tau) {
                acc.push_str(&format!("{t},{tau},{v}\n"));
            }
        }
    }
    std::fs::write(dir.join("accuracy.csv"), acc)?;

    let mut summary = String::from("task,avg_accuracy,avg_forgetting\n");
    for t in 1..=k {
        if log.accuracy.get(t, t).is_none() {
            continue; // task not reached
        }
        let a = log.accuracy.average_accuracy(t)?;
        match log.accuracy.average_forgetting(t)? {
            Some(f) => summary.push_str(&format!("{t},{a},{f}\n")),
            None => summary.push_str(&format!("{t},{a},\n")),
        }
    }
    std::fs::write(dir.join("summary.csv"), summary)?;

    let peaks = series_peaks(&log.erank);
    let mut er = String::from("task,probe,group,erank,erank_pct\n");
    for r in &log.erank {
        let peak = peaks[&(r.probe, r.group.clone())];
        let pct = if peak > 0.0 { r.erank / peak } else { 0.0 };
        er.push_str(&format!(
            "{},{},{},{},{}\n",
            r.task,
            r.probe.name(),
            r.group,
            r.erank,
            pct
        ));
    }
    std::fs::write(dir.join("erank.csv"), er)?;

    let manifest = Manifest {
        version: 1,
        config_digest: log.config_digest.clone(),
        seeds: log.seeds.clone(),
        element_type: "f64".to_string(),
        wall_clock_unix_seconds: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// Re-reads an accuracy.csv produced by [`export_metrics`].
pub fn import_accuracy_csv(path: &Path, n_tasks: usize) -> Result<AccuracyMatrix> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != "after_task,eval_task,accuracy" {
        return Err(Error::Parse {
            offset: 0,
            message: format!("unexpected accuracy.csv header: {header}"),
        });
    }
    let mut m = AccuracyMatrix::new(n_tasks);
    for (lineno, line) in lines.enumerate() {
        let mut parts = line.split(',');
        let parse_err = |msg: String| Error::Parse {
            offset: lineno + 1,
            message: msg,
        };
        let t: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(format!("bad after_task in: {line}")))?;
        let tau: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(format!("bad eval_task in: {line}")))?;
        let v: f64 = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(format!("bad accuracy in: {line}")))?;
        m.set(t, tau, v)?;
    }
    Ok(m)
}
