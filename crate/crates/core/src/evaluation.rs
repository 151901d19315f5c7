//! Recall@1 retrieval evaluation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{to_matrix, TaskDataset};
use crate::error::{OdmlError, Result};
use crate::model::Embedder;
use crate::tensor::{squared_distance, Matrix};

/// Fraction of rows whose nearest other row (Euclidean, lowest index on
/// ties) carries the same label.
pub fn recall_at_1(embeddings: &Matrix, labels: &[usize]) -> Result<f64> {
    let n = embeddings.rows();
    if n < 2 {
        return Err(OdmlError::invalid(format!(
            "recall@1 needs at least 2 samples, got {n}"
        )));
    }
    if labels.len() != n {
        return Err(OdmlError::shape(format!("{} labels for {n} embeddings", labels.len())));
    }
    let hits = (0..n)
        .filter(|&q| {
            let query = embeddings.row(q);
            let mut best = (usize::MAX, f64::INFINITY);
            for j in (0..n).filter(|&j| j != q) {
                let d = squared_distance(query, embeddings.row(j));
                if d < best.1 {
                    best = (j, d);
                }
            }
            labels[best.0] == labels[q]
        })
        .count();
    Ok(hits as f64 / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// task id → Recall@1 with that task's test set as query and gallery
    pub per_task: BTreeMap<usize, f64>,
    /// Recall@1 over the union of all test sets
    pub all: f64,
    /// task id → number of test samples
    pub sizes: BTreeMap<usize, usize>,
}

/// Evaluates one model on each task and on the merged gallery.
pub fn evaluate_stages<E: Embedder + ?Sized>(model: &E, tasks: &[TaskDataset]) -> Result<EvalReport> {
    if tasks.is_empty() {
        return Err(OdmlError::invalid("no tasks to evaluate"));
    }
    let mut per_task = BTreeMap::new();
    let mut sizes = BTreeMap::new();
    let mut all_rows = Vec::new();
    let mut all_labels = Vec::new();
    for t in tasks {
        if t.test.is_empty() {
            return Err(OdmlError::invalid(format!("task {} has no test samples", t.task_id)));
        }
        let (x, labels) = to_matrix(&t.test);
        let emb = model.embed(&x)?;
        per_task.insert(t.task_id, recall_at_1(&emb, &labels)?);
        sizes.insert(t.task_id, labels.len());
        all_rows.extend_from_slice(emb.data());
        all_labels.extend(labels);
    }
    let all = if tasks.len() == 1 {
        per_task[&tasks[0].task_id]
    } else {
        let dim = model.embedding_dim();
        recall_at_1(&Matrix::new(all_labels.len(), dim, all_rows)?, &all_labels)?
    };
    Ok(EvalReport { per_task, all, sizes })
}
