//! Deterministic inputs shared by the kernel benchmarks.

use odml_core::dataset::{gen_synthetic, split_multi_task, TaskDataset};
use odml_core::drift::{offline_stage_state, StageState, TaskInputs};
use odml_core::model::{Embedder, EmbeddingModel};
use odml_core::tensor::{l2_normalize, Matrix};
use odml_core::SyntheticParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Layer sizes of the default model on 64-dim inputs.
pub const DIMS: [usize; 3] = [64, 64, 32];

pub fn inputs(n: usize, d: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::new(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("sized buffer")
}

pub fn unit_embeddings(n: usize, d: usize, seed: u64) -> Matrix {
    let raw = inputs(n, d, seed);
    let rows: Vec<Vec<f64>> = raw.iter_rows().map(l2_normalize).collect();
    Matrix::from_rows(&rows).expect("equal rows")
}

/// `p` classes of `k` consecutive samples each.
pub fn pk_labels(p: usize, k: usize) -> Vec<usize> {
    (0..p * k).map(|i| i / k).collect()
}

pub fn model(seed: u64) -> EmbeddingModel {
    EmbeddingModel::init(&DIMS, seed).expect("valid dims")
}

/// The default synthetic benchmark split into 20 + 4×5 classes.
pub fn multi_task_benchmark() -> Vec<TaskDataset> {
    let data = gen_synthetic(&SyntheticParams::default()).expect("default params");
    split_multi_task(&data, 4).expect("40 classes split")
}

/// Boundary-2 state from two random models, for virtual-target benchmarks.
pub fn stage_two_state(tasks: &[TaskDataset]) -> (EmbeddingModel, StageState) {
    let f1 = model(1);
    let f2 = model(2);
    let boundary =
        |stage: usize, current: &EmbeddingModel, prev: Option<&StageState>, past: &[&(dyn Embedder + Sync)]| {
            let task = &tasks[stage - 1];
            let (x, labels) = task.train_matrix();
            offline_stage_state(
                stage,
                current,
                TaskInputs {
                    inputs: &x,
                    labels: &labels,
                    classes: &task.classes,
                },
                prev,
                past,
            )
            .expect("valid stage state")
        };
    let s1 = boundary(1, &f1, None, &[]);
    let s2 = boundary(2, &f2, Some(&s1), &[&f1]);
    (f2, s2)
}
