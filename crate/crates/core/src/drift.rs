//! Prototype drift between stage models and virtual features for past tasks.
//!
//! At each stage boundary the just-finished model `F_j` and every earlier
//! model `F_b` embed the stage-`j` training data once. The per-sample
//! displacements, weighted by similarity to each class prototype of task `b`,
//! give that prototype's drift `b → j`. During stage `j+1` only `F_j` is
//! loaded; the feature an earlier model would have produced is estimated by
//! subtracting a similarity-weighted mix of those drifts from the teacher
//! feature.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{OdmlError, Result};
use crate::losses::{corr_loss_sum, gram, Gram};
use crate::model::{ByteReader, Embedder};
use crate::tensor::{cosine_sim, l2_normalize, Matrix};

/// Added to every clamped cosine weight so denominators never vanish.
pub const WEIGHT_EPS: f64 = 1e-8;

const STATE_MAGIC: &[u8; 4] = b"ODST";
const STATE_VERSION: u32 = 1;

/// Centroid of one class of task `task_id`, in the feature space of stage `stage_id`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub task_id: usize,
    pub class_id: usize,
    pub stage_id: usize,
    pub centroid: Vec<f64>,
}

/// Drift of each class prototype of one task between two stages.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftTable {
    pub task_id: usize,
    pub source_stage: usize,
    pub target_stage: usize,
    /// class id → drift vector
    pub drifts: BTreeMap<usize, Vec<f64>>,
}

fn similarity_weight(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(cosine_sim(a, b)?.max(0.0) + WEIGHT_EPS)
}

/// Per-class means of feature rows. Every class in `classes` must be present.
pub fn compute_prototypes(
    features: &Matrix,
    labels: &[usize],
    classes: &[usize],
    task_id: usize,
    stage_id: usize,
) -> Result<Vec<Prototype>> {
    if labels.len() != features.rows() {
        return Err(OdmlError::shape(format!(
            "{} labels for {} feature rows",
            labels.len(),
            features.rows()
        )));
    }
    let dim = features.cols();
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = classes.iter().map(|&c| (c, (vec![0.0; dim], 0))).collect();
    for (row, &label) in features.iter_rows().zip(labels) {
        let (sum, count) = sums
            .get_mut(&label)
            .ok_or_else(|| OdmlError::invalid(format!("label {label} is not a class of task {task_id}")))?;
        sum.iter_mut().zip(row).for_each(|(s, v)| *s += v);
        *count += 1;
    }
    sums.into_iter()
        .map(|(class_id, (sum, count))| {
            if count == 0 {
                return Err(OdmlError::invalid(format!(
                    "class {class_id} of task {task_id} has no features"
                )));
            }
            Ok(Prototype {
                task_id,
                class_id,
                stage_id,
                centroid: sum.into_iter().map(|s| s / count as f64).collect(),
            })
        })
        .collect()
}

/// Weighted mean displacement `Σ w (f_cur - f_past) / Σ w`, where rows of
/// `past` and `current` are features of the same samples and
/// `w = max(cos(f_past, μ), 0) + ε`.
pub fn prototype_drift(past: &Matrix, current: &Matrix, proto: &Prototype) -> Result<Vec<f64>> {
    if past.shape() != current.shape() {
        return Err(OdmlError::shape("paired feature matrices differ in shape"));
    }
    if past.rows() == 0 {
        return Err(OdmlError::invalid("prototype drift needs at least one feature pair"));
    }
    if past.cols() != proto.centroid.len() {
        return Err(OdmlError::shape("feature dim differs from prototype dim"));
    }
    let mut acc = vec![0.0; past.cols()];
    let mut total = 0.0;
    for (fb, fc) in past.iter_rows().zip(current.iter_rows()) {
        let w = similarity_weight(fb, &proto.centroid)?;
        total += w;
        for ((a, c), b) in acc.iter_mut().zip(fc).zip(fb) {
            *a += w * (c - b);
        }
    }
    Ok(acc.into_iter().map(|a| a / total).collect())
}

/// Translates a prototype by its drift and relabels it with the target stage.
pub fn update_prototype(proto: &Prototype, drift: &[f64], target_stage: usize) -> Result<Prototype> {
    if drift.len() != proto.centroid.len() {
        return Err(OdmlError::shape("drift dim differs from prototype dim"));
    }
    Ok(Prototype {
        centroid: proto.centroid.iter().zip(drift).map(|(c, d)| c + d).collect(),
        stage_id: target_stage,
        ..proto.clone()
    })
}

/// Estimated displacement from a teacher feature back to the feature the
/// task-`b` model would have produced:
/// `-Σ_k w_k Δμ_k / Σ_k w_k` with `w_k = max(cos(f, μ_k), 0) + ε` over the
/// stage-updated prototypes `μ_k` of task `b`.
pub fn feature_drift(f_teacher: &[f64], updated: &[Prototype], drifts: &DriftTable) -> Result<Vec<f64>> {
    if updated.is_empty() {
        return Err(OdmlError::invalid("feature drift needs at least one prototype"));
    }
    let mut acc = vec![0.0; f_teacher.len()];
    let mut total = 0.0;
    for proto in updated {
        let d = drifts.drifts.get(&proto.class_id).ok_or_else(|| {
            OdmlError::invalid(format!(
                "no drift for class {} of task {}",
                proto.class_id, drifts.task_id
            ))
        })?;
        if d.len() != f_teacher.len() {
            return Err(OdmlError::shape("drift dim differs from feature dim"));
        }
        let w = similarity_weight(f_teacher, &proto.centroid)?;
        total += w;
        acc.iter_mut().zip(d).for_each(|(a, dv)| *a += w * dv);
    }
    Ok(acc.into_iter().map(|a| -a / total).collect())
}

/// `f_teacher + delta`, before normalization.
pub fn raw_virtual_feature(f_teacher: &[f64], delta: &[f64]) -> Vec<f64> {
    f_teacher.iter().zip(delta).map(|(f, d)| f + d).collect()
}

/// `f_teacher + delta`, re-normalized to unit length for Gram construction.
pub fn virtual_feature(f_teacher: &[f64], delta: &[f64]) -> Vec<f64> {
    l2_normalize(&raw_virtual_feature(f_teacher, delta))
}

/// Correlation loss summed over past-task targets, gradient into `current` only.
pub fn multi_task_corr(targets: &[Matrix], current: &Matrix, temperature: f64) -> Result<(f64, Matrix)> {
    for (t, m) in targets.iter().enumerate() {
        if m.shape() != current.shape() {
            return Err(OdmlError::shape(format!(
                "target {t} has shape {:?}, current embeddings {:?}",
                m.shape(),
                current.shape()
            )));
        }
    }
    let grams = targets.iter().map(gram).collect::<Result<Vec<Gram>>>()?;
    corr_loss_sum(&grams, &gram(current)?, temperature)
}

/// What stage `stage` leaves behind for one completed task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskMemory {
    pub task_id: usize,
    /// Prototypes in the feature space of the model that learned this task.
    pub prototypes: Vec<Prototype>,
    /// Drift from the task's own stage to the state's stage; `None` for the
    /// task learned at that stage.
    pub drift: Option<DriftTable>,
}

impl TaskMemory {
    /// Prototypes moved into the state's stage by their drift.
    pub fn updated_prototypes(&self, stage: usize) -> Result<Vec<Prototype>> {
        match &self.drift {
            None => Ok(self.prototypes.clone()),
            Some(table) => self
                .prototypes
                .iter()
                .map(|p| {
                    let d = table
                        .drifts
                        .get(&p.class_id)
                        .ok_or_else(|| OdmlError::invalid(format!("missing drift for class {}", p.class_id)))?;
                    update_prototype(p, d, stage)
                })
                .collect(),
        }
    }
}

/// Everything training at stage `stage + 1` needs besides the teacher `F_stage`.
#[derive(Debug, Clone, PartialEq)]
pub struct StageState {
    pub stage: usize,
    pub dim: usize,
    /// One entry per task `1..=stage`, ascending.
    pub tasks: Vec<TaskMemory>,
}

impl StageState {
    pub fn validate(&self) -> Result<()> {
        if self.tasks.len() != self.stage {
            return Err(OdmlError::invalid(format!(
                "stage {} state holds {} tasks",
                self.stage,
                self.tasks.len()
            )));
        }
        for (i, t) in self.tasks.iter().enumerate() {
            let expected = i + 1;
            if t.task_id != expected {
                return Err(OdmlError::invalid(format!("task chain broken at {expected}")));
            }
            if t.prototypes.is_empty() {
                return Err(OdmlError::invalid(format!("task {expected} has no prototypes")));
            }
            match (&t.drift, expected == self.stage) {
                (None, true) => {}
                (Some(d), false) if d.target_stage == self.stage && d.source_stage == expected => {
                    if d.drifts.len() != t.prototypes.len() {
                        return Err(OdmlError::invalid(format!("task {expected} drift table incomplete")));
                    }
                }
                _ => return Err(OdmlError::invalid(format!("task {expected} has inconsistent drift"))),
            }
            if t.prototypes.iter().any(|p| p.centroid.len() != self.dim) {
                return Err(OdmlError::shape(format!("task {expected} prototype dim")));
            }
        }
        Ok(())
    }

    /// Virtual embeddings of `teacher_emb` for every past task that has a
    /// drift table, ordered by task id. Each row is re-normalized.
    pub fn virtual_targets(&self, teacher_emb: &Matrix) -> Result<Vec<Matrix>> {
        let mut out = Vec::new();
        for t in &self.tasks {
            let Some(table) = &t.drift else { continue };
            let updated = t.updated_prototypes(self.stage)?;
            let rows = teacher_emb
                .iter_rows()
                .map(|f| feature_drift(f, &updated, table).map(|d| virtual_feature(f, &d)))
                .collect::<Result<Vec<_>>>()?;
            out.push(Matrix::new(teacher_emb.rows(), teacher_emb.cols(), rows.concat())?);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let count: usize = self.tasks.iter().map(|t| t.prototypes.len()).sum();
        let mut buf = Vec::with_capacity(20 + count * (8 + 16 * self.dim));
        buf.extend_from_slice(STATE_MAGIC);
        for v in [STATE_VERSION, self.stage as u32, self.dim as u32, count as u32] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let zeros = vec![0.0; self.dim];
        for t in &self.tasks {
            for p in &t.prototypes {
                buf.extend_from_slice(&(t.task_id as u32).to_le_bytes());
                buf.extend_from_slice(&(p.class_id as u32).to_le_bytes());
                let drift = t.drift.as_ref().map_or(&zeros, |d| &d.drifts[&p.class_id]);
                for v in p.centroid.iter().chain(drift) {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        fs::write(path, buf).map_err(|e| OdmlError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| OdmlError::io(path, e))?;
        let fmt = |msg: String| OdmlError::Format {
            path: path.to_path_buf(),
            msg,
        };
        let state = Self::from_bytes(&bytes).map_err(fmt)?;
        state.validate().map_err(|e| fmt(e.to_string()))?;
        Ok(state)
    }

    fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != STATE_MAGIC {
            return Err("bad magic, expected ODST".into());
        }
        let version = r.u32()?;
        if version != STATE_VERSION {
            return Err(format!("unsupported state version {version}"));
        }
        let stage = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let count = r.u32()? as usize;
        if r.remaining() != count * (8 + 16 * dim) {
            return Err(format!(
                "entry section has {} bytes, expected {}",
                r.remaining(),
                count * (8 + 16 * dim)
            ));
        }
        let mut by_task: BTreeMap<usize, TaskMemory> = BTreeMap::new();
        for _ in 0..count {
            let task_id = r.u32()? as usize;
            let class_id = r.u32()? as usize;
            let centroid = (0..dim).map(|_| r.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
            let drift = (0..dim).map(|_| r.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
            if centroid.iter().chain(&drift).any(|v| !v.is_finite()) {
                return Err(format!("non-finite entry for task {task_id} class {class_id}"));
            }
            let mem = by_task.entry(task_id).or_insert_with(|| TaskMemory {
                task_id,
                prototypes: Vec::new(),
                drift: (task_id < stage).then(|| DriftTable {
                    task_id,
                    source_stage: task_id,
                    target_stage: stage,
                    drifts: BTreeMap::new(),
                }),
            });
            mem.prototypes.push(Prototype {
                task_id,
                class_id,
                stage_id: task_id,
                centroid,
            });
            if let Some(d) = mem.drift.as_mut() {
                d.drifts.insert(class_id, drift);
            }
        }
        Ok(Self {
            stage,
            dim,
            tasks: by_task.into_values().collect(),
        })
    }
}

/// Training inputs of the task that was just learned.
pub struct TaskInputs<'a> {
    pub inputs: &'a Matrix,
    pub labels: &'a [usize],
    pub classes: &'a [usize],
}

/// Builds the state for boundary `stage` from the model just trained there.
///
/// `previous` is the state of boundary `stage - 1` (absent when `stage == 1`)
/// and supplies the original prototypes of earlier tasks. `past_models[b-1]`
/// is `F_b` for every `b < stage`. The stage-`stage` inputs are embedded by
/// every model once; nothing here touches gradients.
pub fn offline_stage_state(
    stage: usize,
    current: &(dyn Embedder + Sync),
    task: TaskInputs<'_>,
    previous: Option<&StageState>,
    past_models: &[&(dyn Embedder + Sync)],
) -> Result<StageState> {
    if stage == 0 {
        return Err(OdmlError::invalid("stages are numbered from 1"));
    }
    if past_models.len() != stage - 1 {
        return Err(OdmlError::Registry(format!(
            "stage {stage} needs {} earlier models, got {}",
            stage - 1,
            past_models.len()
        )));
    }
    let previous_tasks: &[TaskMemory] = match previous {
        Some(p) if p.stage == stage - 1 => &p.tasks,
        None if stage == 1 => &[],
        _ => return Err(OdmlError::Registry(format!("missing state for boundary {}", stage - 1))),
    };
    let current_feats = current.embed(task.inputs)?;
    let dim = current_feats.cols();

    let past_results: Vec<Result<TaskMemory>> = std::thread::scope(|scope| {
        let handles: Vec<_> = previous_tasks
            .iter()
            .zip(past_models)
            .map(|(mem, model)| {
                let current_feats = &current_feats;
                scope.spawn(move || -> Result<TaskMemory> {
                    let past_feats = model.embed(task.inputs)?;
                    let mut drifts = BTreeMap::new();
                    for proto in &mem.prototypes {
                        drifts.insert(proto.class_id, prototype_drift(&past_feats, current_feats, proto)?);
                    }
                    Ok(TaskMemory {
                        task_id: mem.task_id,
                        prototypes: mem.prototypes.clone(),
                        drift: Some(DriftTable {
                            task_id: mem.task_id,
                            source_stage: mem.task_id,
                            target_stage: stage,
                            drifts,
                        }),
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("drift worker panicked"))
            .collect()
    });

    let mut tasks = past_results.into_iter().collect::<Result<Vec<_>>>()?;
    tasks.push(TaskMemory {
        task_id: stage,
        prototypes: compute_prototypes(&current_feats, task.labels, task.classes, stage, stage)?,
        drift: None,
    });
    let state = StageState { stage, dim, tasks };
    state.validate()?;
    Ok(state)
}
