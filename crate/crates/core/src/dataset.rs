//! Synthetic Gaussian clusters, CSV feature files, class-disjoint task
//! splits and class-balanced P×K batch sampling.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{OdmlError, Result};
use crate::tensor::{l2_normalize, Matrix};

/// Fraction of each class's samples assigned to the training split.
pub const TRAIN_RATIO: f64 = 0.6;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVector {
    pub features: Vec<f64>,
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    samples: Vec<LabeledVector>,
    n_classes: usize,
}

impl Dataset {
    /// Checks dims and re-indexes class ids densely in first-occurrence order.
    pub fn new(samples: Vec<LabeledVector>) -> Result<Self> {
        let dim = samples
            .first()
            .map(|s| s.features.len())
            .ok_or_else(|| OdmlError::invalid("dataset is empty"))?;
        if dim == 0 {
            return Err(OdmlError::invalid("zero-dimensional features"));
        }
        let mut remap = BTreeMap::new();
        let mut order = 0;
        let mut out = Vec::with_capacity(samples.len());
        for (i, mut s) in samples.into_iter().enumerate() {
            if s.features.len() != dim {
                return Err(OdmlError::shape(format!(
                    "sample {i} has dim {}, expected {dim}",
                    s.features.len()
                )));
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(OdmlError::NonFinite("dataset features"));
            }
            s.class_id = *remap.entry(s.class_id).or_insert_with(|| {
                order += 1;
                order - 1
            });
            out.push(s);
        }
        Ok(Self {
            dim,
            samples: out,
            n_classes: order,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn samples(&self) -> &[LabeledVector] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Writes `label,f0,...,f{d-1}` rows with shortest round-trip float formatting.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, 0, e))?;
        let mut header = vec!["label".to_string()];
        header.extend((0..self.dim).map(|i| format!("f{i}")));
        w.write_record(&header).map_err(|e| csv_err(path, 1, e))?;
        for (i, s) in self.samples.iter().enumerate() {
            let mut rec = vec![s.class_id.to_string()];
            rec.extend(s.features.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(|e| csv_err(path, i as u64 + 2, e))?;
        }
        w.flush().map_err(|e| OdmlError::io(path, e))
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| csv_err(path, 0, e))?;
        let headers = rdr.headers().map_err(|e| csv_err(path, 1, e))?.clone();
        if headers.is_empty() {
            return Err(OdmlError::Csv {
                path: path.to_path_buf(),
                line: 1,
                msg: "empty file".into(),
            });
        }
        if headers.get(0) != Some("label") || headers.len() < 2 {
            return Err(OdmlError::Csv {
                path: path.to_path_buf(),
                line: 1,
                msg: "header must be label,f0,f1,...".into(),
            });
        }
        let dim = headers.len() - 1;
        let mut samples = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                csv_err(path, line, e)
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            let bad = |msg: String| OdmlError::Csv {
                path: path.to_path_buf(),
                line,
                msg,
            };
            if rec.len() != dim + 1 {
                return Err(bad(format!("expected {} fields, found {}", dim + 1, rec.len())));
            }
            let class_id: usize = rec[0]
                .trim()
                .parse()
                .map_err(|_| bad(format!("label {:?} is not a non-negative integer", &rec[0])))?;
            let features = rec
                .iter()
                .skip(1)
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| bad(format!("field {f:?} is not a finite number")))
                })
                .collect::<Result<Vec<_>>>()?;
            samples.push(LabeledVector { features, class_id });
        }
        if samples.is_empty() {
            return Err(OdmlError::Csv {
                path: path.to_path_buf(),
                line: 2,
                msg: "no data rows".into(),
            });
        }
        Self::new(samples)
    }
}

fn csv_err(path: &Path, line: u64, e: csv::Error) -> OdmlError {
    OdmlError::Csv {
        path: path.to_path_buf(),
        line,
        msg: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticParams {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub separation: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            classes: 40,
            per_class: 30,
            dim: 64,
            separation: 10.0,
            sigma: 1.0,
            seed: 7,
        }
    }
}

/// Class centers uniform on the sphere of radius `separation`, samples
/// `center + N(0, sigma² I)`, grouped by class.
pub fn gen_synthetic(p: &SyntheticParams) -> Result<Dataset> {
    if p.classes < 2 || p.per_class < 4 || p.dim < 2 {
        return Err(OdmlError::invalid(format!(
            "need classes >= 2, per_class >= 4, dim >= 2 (got {}, {}, {})",
            p.classes, p.per_class, p.dim
        )));
    }
    if !(p.separation.is_finite() && p.separation > 0.0 && p.sigma.is_finite() && p.sigma >= 0.0) {
        return Err(OdmlError::invalid("separation must be > 0 and sigma >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let noise = Normal::new(0.0, p.sigma).map_err(|e| OdmlError::invalid(e.to_string()))?;
    let mut samples = Vec::with_capacity(p.classes * p.per_class);
    for class_id in 0..p.classes {
        let dir: Vec<f64> = (0..p.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let center: Vec<f64> = l2_normalize(&dir).into_iter().map(|v| v * p.separation).collect();
        for _ in 0..p.per_class {
            let features = center
                .iter()
                .map(|c| if p.sigma == 0.0 { *c } else { c + noise.sample(&mut rng) })
                .collect();
            samples.push(LabeledVector { features, class_id });
        }
    }
    Dataset::new(samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    OneTask,
    MultiTask,
}

/// Class partition per task (task ids are 1-based positions in `tasks`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSplitPlan {
    pub mode: SplitMode,
    pub tasks: Vec<Vec<usize>>,
}

impl TaskSplitPlan {
    /// First ⌈C/2⌉ classes form the old task, the rest the new one.
    pub fn one_task(n_classes: usize) -> Result<Self> {
        if n_classes < 4 {
            return Err(OdmlError::invalid(format!(
                "one-task split needs >= 4 classes, got {n_classes}"
            )));
        }
        let old = n_classes.div_ceil(2);
        Ok(Self {
            mode: SplitMode::OneTask,
            tasks: vec![(0..old).collect(), (old..n_classes).collect()],
        })
    }

    /// First half of classes, then the rest split evenly over `n_stages`
    /// tasks with any remainder going to the earliest ones.
    pub fn multi_task(n_classes: usize, n_stages: usize) -> Result<Self> {
        if n_stages < 1 {
            return Err(OdmlError::invalid("n_stages must be >= 1"));
        }
        let old = n_classes.div_ceil(2);
        let rest = n_classes - old;
        if old < 2 || rest < n_stages * 2 {
            return Err(OdmlError::invalid(format!(
                "{n_classes} classes cannot fill {n_stages} stages with >= 2 classes each"
            )));
        }
        let mut tasks = vec![(0..old).collect::<Vec<_>>()];
        let (base, extra) = (rest / n_stages, rest % n_stages);
        let mut next = old;
        for s in 0..n_stages {
            let size = base + usize::from(s < extra);
            tasks.push((next..next + size).collect());
            next += size;
        }
        Ok(Self {
            mode: SplitMode::MultiTask,
            tasks,
        })
    }

    pub fn for_mode(mode: SplitMode, n_classes: usize, n_stages: usize) -> Result<Self> {
        match mode {
            SplitMode::OneTask => Self::one_task(n_classes),
            SplitMode::MultiTask => Self::multi_task(n_classes, n_stages),
        }
    }

    /// Every class in exactly one task.
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        let mut seen = vec![false; n_classes];
        for task in &self.tasks {
            for &c in task {
                if c >= n_classes {
                    return Err(OdmlError::invalid(format!("class {c} out of range")));
                }
                if std::mem::replace(&mut seen[c], true) {
                    return Err(OdmlError::ClassOverlap(c));
                }
            }
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(OdmlError::invalid(format!("class {c} not assigned to any task")));
        }
        Ok(())
    }

    /// Materializes the plan; within each class the first 60% of samples
    /// (at least 2) train and the rest test.
    pub fn apply(&self, data: &Dataset) -> Result<Vec<TaskDataset>> {
        self.validate(data.n_classes())?;
        let mut by_class: Vec<Vec<&LabeledVector>> = vec![Vec::new(); data.n_classes()];
        for s in data.samples() {
            by_class[s.class_id].push(s);
        }
        let mut out = Vec::with_capacity(self.tasks.len());
        for (i, classes) in self.tasks.iter().enumerate() {
            let mut train = Vec::new();
            let mut test = Vec::new();
            for &c in classes {
                let members = &by_class[c];
                let n_train = ((members.len() as f64 * TRAIN_RATIO).floor() as usize).max(2);
                if members.len() < n_train + 1 {
                    return Err(OdmlError::invalid(format!(
                        "class {c} has {} samples; needs >= 3 for a train/test split",
                        members.len()
                    )));
                }
                train.extend(members[..n_train].iter().map(|s| (*s).clone()));
                test.extend(members[n_train..].iter().map(|s| (*s).clone()));
            }
            out.push(TaskDataset::new(i + 1, classes.clone(), train, test)?);
        }
        Ok(out)
    }
}

pub fn split_one_task(data: &Dataset) -> Result<Vec<TaskDataset>> {
    TaskSplitPlan::one_task(data.n_classes())?.apply(data)
}

pub fn split_multi_task(data: &Dataset, n_stages: usize) -> Result<Vec<TaskDataset>> {
    TaskSplitPlan::multi_task(data.n_classes(), n_stages)?.apply(data)
}

/// One task's classes with their train and test samples.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub task_id: usize,
    pub classes: Vec<usize>,
    pub train: Vec<LabeledVector>,
    pub test: Vec<LabeledVector>,
    /// class id → indices into `train`
    by_class: BTreeMap<usize, Vec<usize>>,
}

impl TaskDataset {
    pub fn new(
        task_id: usize,
        classes: Vec<usize>,
        train: Vec<LabeledVector>,
        test: Vec<LabeledVector>,
    ) -> Result<Self> {
        let mut by_class: BTreeMap<usize, Vec<usize>> = classes.iter().map(|&c| (c, Vec::new())).collect();
        for (i, s) in train.iter().enumerate() {
            by_class
                .get_mut(&s.class_id)
                .ok_or_else(|| {
                    OdmlError::invalid(format!("train sample of class {} not in task {task_id}", s.class_id))
                })?
                .push(i);
        }
        if test.iter().any(|s| !by_class.contains_key(&s.class_id)) {
            return Err(OdmlError::invalid(format!("test sample outside task {task_id}")));
        }
        Ok(Self {
            task_id,
            classes,
            train,
            test,
            by_class,
        })
    }

    /// Union of several tasks as one task (joint training).
    pub fn merge(task_id: usize, tasks: &[TaskDataset]) -> Result<Self> {
        let mut classes = Vec::new();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for t in tasks {
            classes.extend_from_slice(&t.classes);
            train.extend(t.train.iter().cloned());
            test.extend(t.test.iter().cloned());
        }
        check_disjoint(tasks)?;
        Self::new(task_id, classes, train, test)
    }

    pub fn min_train_per_class(&self) -> usize {
        self.by_class.values().map(Vec::len).min().unwrap_or(0)
    }

    pub fn train_matrix(&self) -> (Matrix, Vec<usize>) {
        to_matrix(&self.train)
    }

    pub fn test_matrix(&self) -> (Matrix, Vec<usize>) {
        to_matrix(&self.test)
    }
}

pub fn check_disjoint(tasks: &[TaskDataset]) -> Result<()> {
    let mut owner = BTreeMap::new();
    for t in tasks {
        for &c in &t.classes {
            if owner.insert(c, t.task_id).is_some() {
                return Err(OdmlError::ClassOverlap(c));
            }
        }
    }
    Ok(())
}

pub fn to_matrix(samples: &[LabeledVector]) -> (Matrix, Vec<usize>) {
    let dim = samples.first().map_or(0, |s| s.features.len());
    let data = samples.iter().flat_map(|s| s.features.iter().copied()).collect();
    let labels = samples.iter().map(|s| s.class_id).collect();
    (Matrix::new(samples.len(), dim, data).expect("consistent dims"), labels)
}

/// A P×K batch: inputs plus their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

/// Samples `p` distinct classes and `k` distinct training samples of each.
pub fn pk_batch<R: Rng + ?Sized>(task: &TaskDataset, p: usize, k: usize, rng: &mut R) -> Result<Batch> {
    if p < 2 || k < 2 {
        return Err(OdmlError::invalid(format!("P and K must be >= 2, got P={p}, K={k}")));
    }
    let eligible: Vec<usize> = task
        .by_class
        .iter()
        .filter(|(_, idx)| idx.len() >= k)
        .map(|(&c, _)| c)
        .collect();
    if eligible.len() < p {
        return Err(OdmlError::invalid(format!(
            "task {} has {} classes with >= {k} train samples, need {p}",
            task.task_id,
            eligible.len()
        )));
    }
    let classes: Vec<usize> = eligible.choose_multiple(rng, p).copied().collect();
    let mut rows = Vec::with_capacity(p * k);
    let mut labels = Vec::with_capacity(p * k);
    for c in classes {
        let mut idx = task.by_class[&c].clone();
        let (chosen, _) = idx.partial_shuffle(rng, k);
        for &i in chosen.iter() {
            rows.push(task.train[i].features.as_slice());
            labels.push(c);
        }
    }
    Ok(Batch {
        inputs: Matrix::from_rows(&rows)?,
        labels,
    })
}
