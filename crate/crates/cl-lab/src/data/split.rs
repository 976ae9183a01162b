//! Split MNIST (Task-IL) and Split CIFAR-100 (Class-IL) task sequences.

use super::LabeledSet;
use crate::error::{Error, Result};
use crate::nn::seeded_rng;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IlMode {
    TaskIl,
    ClassIl,
}

/// One task: its global class set and, in Task-IL, the local remapping.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    /// 1-based task index.
    pub index: usize,
    pub global_classes: Vec<usize>,
    pub il_mode: IlMode,
    /// global -> local label map; present only in Task-IL.
    pub local_label_map: Option<BTreeMap<usize, usize>>,
}

impl TaskSpec {
    /// Training label for a sample with the given global label:
    /// local under Task-IL, global under Class-IL.
    pub fn train_label(&self, global: usize) -> usize {
        match &self.local_label_map {
            Some(map) => map[&global],
            None => global,
        }
    }
}

/// One task's data: inputs plus the labels used for training/evaluation.
#[derive(Debug, Clone)]
pub struct TaskView {
    pub inputs: LabeledSet,
    /// Local labels under Task-IL, global labels under Class-IL.
    pub labels: Vec<usize>,
}

impl TaskView {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Truncates to at most `per_class` samples of each class, keeping
    /// original order (desk-scale subsetting).
    pub fn capped_per_class(&self, per_class: usize) -> TaskView {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        let mut keep = Vec::new();
        for (i, &y) in self.inputs.global_labels.iter().enumerate() {
            let c = counts.entry(y).or_insert(0);
            if *c < per_class {
                *c += 1;
                keep.push(i);
            }
        }
        TaskView {
            inputs: self.inputs.subset(&keep),
            labels: keep.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TaskSequence {
    pub tasks: Vec<TaskSpec>,
    pub train: Vec<TaskView>,
    pub test: Vec<TaskView>,
    pub il_mode: IlMode,
}

impl TaskSequence {
    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Global classes seen once tasks 1..=t are trained.
    pub fn seen_classes(&self, t: usize) -> Vec<usize> {
        let mut seen = Vec::new();
        for task in &self.tasks[..t] {
            seen.extend(task.global_classes.iter().copied());
        }
        seen
    }
}

fn build_view(set: &LabeledSet, spec: &TaskSpec) -> TaskView {
    let indices: Vec<usize> = set
        .global_labels
        .iter()
        .enumerate()
        .filter(|(_, y)| spec.global_classes.contains(y))
        .map(|(i, _)| i)
        .collect();
    let inputs = set.subset(&indices);
    let labels = inputs
        .global_labels
        .iter()
        .map(|&y| spec.train_label(y))
        .collect();
    TaskView { inputs, labels }
}

fn build_sequence(
    train: &LabeledSet,
    test: &LabeledSet,
    class_blocks: Vec<Vec<usize>>,
    il_mode: IlMode,
) -> TaskSequence {
    let tasks: Vec<TaskSpec> = class_blocks
        .into_iter()
        .enumerate()
        .map(|(i, classes)| {
            let local_label_map = match il_mode {
                IlMode::TaskIl => Some(
                    classes
                        .iter()
                        .enumerate()
                        .map(|(local, &global)| (global, local))
                        .collect(),
                ),
                IlMode::ClassIl => None,
            };
            TaskSpec {
                index: i + 1,
                global_classes: classes,
                il_mode,
                local_label_map,
            }
        })
        .collect();
    let train_views = tasks.iter().map(|t| build_view(train, t)).collect();
    let test_views = tasks.iter().map(|t| build_view(test, t)).collect();
    TaskSequence {
        tasks,
        train: train_views,
        test: test_views,
        il_mode,
    }
}

/// Five binary Task-IL tasks: {0,1}, {2,3}, {4,5}, {6,7}, {8,9}, with
/// digits remapped to local labels {0, 1} per task.
pub fn make_split_mnist(train: &LabeledSet, test: &LabeledSet) -> TaskSequence {
    let blocks = (0..5).map(|t| vec![2 * t, 2 * t + 1]).collect();
    build_sequence(train, test, blocks, IlMode::TaskIl)
}

/// Class-IL split of CIFAR-100 into `n_tasks` consecutive class blocks
/// over `n_classes` classes (ascending by default; optionally shuffled by
/// seed before blocking).
pub fn make_split_cifar100(
    train: &LabeledSet,
    test: &LabeledSet,
    n_tasks: usize,
    n_classes: usize,
    shuffle_seed: Option<u64>,
) -> Result<TaskSequence> {
    if n_tasks == 0 || n_classes == 0 || n_classes % n_tasks != 0 {
        return Err(Error::Config(format!(
            "n_tasks {n_tasks} must divide the class count {n_classes}"
        )));
    }
    let mut order: Vec<usize> = (0..n_classes).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut seeded_rng(seed, "cifar-class-order"));
    }
    let per = n_classes / n_tasks;
    let blocks = order.chunks(per).map(|b| b.to_vec()).collect();
    Ok(build_sequence(train, test, blocks, IlMode::ClassIl))
}

/// Seeded-shuffle minibatches over a task view; the final partial batch is
/// emitted.
pub fn minibatch_iterator<'a>(
    view: &'a TaskView,
    batch_size: usize,
    epoch_seed: u64,
) -> Result<MinibatchIter<'a>> {
    if batch_size < 1 {
        return Err(Error::Parameter("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..view.len()).collect();
    order.shuffle(&mut seeded_rng(epoch_seed, "minibatch-shuffle"));
    Ok(MinibatchIter {
        view,
        order,
        batch_size,
        cursor: 0,
    })
}

pub struct MinibatchIter<'a> {
    view: &'a TaskView,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

impl Iterator for MinibatchIter<'_> {
    /// (inputs [B, C, H, W], training labels, global labels)
    type Item = (Tensor, Vec<usize>, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let idx = &self.order[self.cursor..end];
        self.cursor = end;
        let inputs = self.view.inputs.subset(idx);
        let labels = idx.iter().map(|&i| self.view.labels[i]).collect();
        let globals = idx.iter().map(|&i| self.view.inputs.global_labels[i]).collect();
        Some((inputs.images, labels, globals))
    }
}
