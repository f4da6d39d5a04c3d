//! Task scores, baselines and the per-split metrics bundle.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::ground_truth::TaskLabels;
use crate::model::Task;
use crate::numeric::{cross_entropy, pearson, Tensor};
use crate::pretrain::argmax;
use crate::rng::{derive_seed, seeded, stream};

#[derive(Debug, Clone, PartialEq)]
pub struct TaskMetrics {
    pub task: Task,
    /// Accuracy, or mean per-scene Pearson r for vagueQ.
    pub score: f64,
    pub loss: f64,
    /// `confusion[true][pred]` counts; classification tasks only.
    pub confusion: Option<Vec<Vec<u64>>>,
    pub baselines: Baselines,
}

/// Reference scores recomputed from the evaluated split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Baselines {
    /// 1/C for classification; for vagueQ the r of a uniformly random
    /// distribution.
    pub chance: f64,
    /// Always predicting the most frequent class; for vagueQ, always
    /// predicting the split's mean distribution.
    pub majority: f64,
    /// Score of a seeded uniformly random predictor.
    pub random: f64,
}

impl Baselines {
    /// The reference reported next to model scores: the better of chance
    /// and majority.
    pub fn reference(&self) -> f64 {
        self.chance.max(self.majority)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsBundle {
    pub count: usize,
    pub total_loss: f64,
    pub tasks: Vec<TaskMetrics>,
}

impl MetricsBundle {
    pub fn task(&self, task: Task) -> Option<&TaskMetrics> {
        self.tasks.iter().find(|m| m.task == task)
    }

    pub fn score(&self, task: Task) -> Option<f64> {
        self.task(task).map(|m| m.score)
    }
}

/// Accuracy of probability rows against class labels.
pub fn accuracy(task: Task, outputs: &Tensor, labels: &[&TaskLabels]) -> Result<f64> {
    check_rows(task, outputs, labels)?;
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(i, l)| Some(argmax(outputs.row(*i))) == task.class_of(l))
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Mean over scenes of pearson(predicted row, ground-truth distribution).
pub fn mean_pearson(outputs: &Tensor, labels: &[&TaskLabels]) -> Result<f64> {
    check_rows(Task::VagueQ, outputs, labels)?;
    let mut sum = 0.0;
    for (i, l) in labels.iter().enumerate() {
        sum += pearson(outputs.row(i), &l.quant_dist)?;
    }
    Ok(sum / labels.len() as f64)
}

fn check_rows(task: Task, outputs: &Tensor, labels: &[&TaskLabels]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::Eval("no scenes to evaluate".into()));
    }
    if outputs.shape() != [labels.len(), task.classes()] {
        return Err(Error::Eval(format!(
            "{} outputs have shape {:?}, expected [{}, {}]",
            task,
            outputs.shape(),
            labels.len(),
            task.classes()
        )));
    }
    Ok(())
}

pub fn task_score(task: Task, outputs: &Tensor, labels: &[&TaskLabels]) -> Result<f64> {
    if task.is_classification() {
        accuracy(task, outputs, labels)
    } else {
        mean_pearson(outputs, labels)
    }
}

pub fn confusion(task: Task, outputs: &Tensor, labels: &[&TaskLabels]) -> Result<Vec<Vec<u64>>> {
    check_rows(task, outputs, labels)?;
    let c = task.classes();
    let mut m = vec![vec![0u64; c]; c];
    for (i, l) in labels.iter().enumerate() {
        let t = task
            .class_of(l)
            .ok_or_else(|| Error::Eval(format!("{task} has no classes")))?;
        m[t][argmax(outputs.row(i))] += 1;
    }
    Ok(m)
}

/// The labels themselves as predictions: one-hot rows or the quantifier
/// distribution.
pub fn oracle_outputs(task: Task, labels: &[&TaskLabels]) -> Result<Tensor> {
    task.targets(labels)
}

pub fn baselines(task: Task, labels: &[&TaskLabels]) -> Result<Baselines> {
    let n = labels.len();
    let c = task.classes();
    let mut rng = seeded(derive_seed(0, &[stream::BASELINE, task as u64]));
    let mut random = Tensor::zeros(&[n, c]);
    for row in random.data_mut().chunks_exact_mut(c) {
        row.iter_mut().for_each(|v| *v = rng.gen_range(0.0..1.0));
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    let random_score = task_score(task, &random, labels)?;
    if task.is_classification() {
        let mut counts = vec![0usize; c];
        for l in labels {
            counts[task.class_of(l).expect("classification")] += 1;
        }
        let majority = *counts.iter().max().expect("classes") as f64 / n as f64;
        Ok(Baselines {
            chance: 1.0 / c as f64,
            majority,
            random: random_score,
        })
    } else {
        let mut mean = vec![0.0; c];
        for l in labels {
            for (m, q) in mean.iter_mut().zip(&l.quant_dist) {
                *m += q / n as f64;
            }
        }
        let rows = Tensor::from_vec(&[n, c], mean.repeat(n))?;
        Ok(Baselines {
            chance: random_score,
            majority: mean_pearson(&rows, labels)?,
            random: random_score,
        })
    }
}

/// Score model outputs (one tensor per task, in `tasks` order).
pub fn evaluate_outputs(tasks: &[Task], outputs: &[Tensor], labels: &[&TaskLabels]) -> Result<MetricsBundle> {
    if tasks.len() != outputs.len() {
        return Err(Error::Eval(format!("{} tasks but {} outputs", tasks.len(), outputs.len())));
    }
    let mut metrics = Vec::with_capacity(tasks.len());
    for (&task, out) in tasks.iter().zip(outputs) {
        check_rows(task, out, labels)?;
        metrics.push(TaskMetrics {
            task,
            score: task_score(task, out, labels)?,
            loss: cross_entropy(out, &task.targets(labels)?)?,
            confusion: if task.is_classification() {
                Some(confusion(task, out, labels)?)
            } else {
                None
            },
            baselines: baselines(task, labels)?,
        });
    }
    Ok(MetricsBundle {
        count: labels.len(),
        total_loss: metrics.iter().map(|m| m.loss).sum(),
        tasks: metrics,
    })
}
