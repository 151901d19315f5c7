//! Stage-by-stage training: the initial model, the three-branch online
//! stages, offline drift computation at stage boundaries, and the baseline
//! modes used for comparison.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{check_disjoint, pk_batch, TaskDataset};
use crate::drift::{offline_stage_state, StageState, TaskInputs};
use crate::error::{OdmlError, Result};
use crate::evaluation::{evaluate_stages, EvalReport};
use crate::losses::{gram, stage_objective, Gram, LossConfig, LossWeights};
use crate::model::{AdamState, Embedder, EmbeddingModel};
use crate::registry::{Registry, StageMeta};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Teacher correlation (with virtual past-task targets) plus mutual distillation.
    Ours,
    /// Triplet-only sequential training from the previous weights.
    FineTune,
    /// Triplet training on the union of all tasks.
    Joint,
    /// Teacher correlation only; no supporting student, no virtual targets.
    TeacherOnly,
    /// Mutual distillation only; no teacher correlation.
    MutualOnly,
    /// The stage-1 model, evaluated on everything.
    Initial,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::Initial,
        Mode::FineTune,
        Mode::Joint,
        Mode::TeacherOnly,
        Mode::MutualOnly,
        Mode::Ours,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Ours => "ours",
            Mode::FineTune => "fine_tune",
            Mode::Joint => "joint",
            Mode::TeacherOnly => "teacher_only",
            Mode::MutualOnly => "mutual_only",
            Mode::Initial => "initial",
        }
    }

    fn uses_support(self) -> bool {
        matches!(self, Mode::Ours | Mode::MutualOnly)
    }

    fn uses_stage_state(self) -> bool {
        self == Mode::Ours
    }

    /// Loss weights this mode applies at stages after the first.
    fn weights(self, base: LossWeights) -> LossWeights {
        match self {
            Mode::Ours => base,
            Mode::FineTune | Mode::Joint | Mode::Initial => LossWeights {
                lambda2: 0.0,
                lambda3: 0.0,
                ..base
            },
            Mode::TeacherOnly => LossWeights { lambda3: 0.0, ..base },
            Mode::MutualOnly => LossWeights { lambda2: 0.0, ..base },
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = OdmlError;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| OdmlError::invalid(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub margin: f64,
    pub temperature: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub p: usize,
    pub k: usize,
    pub seed: u64,
    pub hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
    pub mode: Mode,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            lambda3: w.lambda3,
            margin: 0.2,
            temperature: 1.0,
            learning_rate: 1e-4,
            epochs: 60,
            p: 8,
            k: 4,
            seed: 0,
            hidden_dims: vec![64],
            embedding_dim: 32,
            mode: Mode::Ours,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights().validate()?;
        let positive = [
            ("margin", self.margin),
            ("temperature", self.temperature),
            ("learning_rate", self.learning_rate),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(OdmlError::invalid(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        if self.p < 2 || self.k < 2 {
            return Err(OdmlError::invalid("p and k must be >= 2"));
        }
        if self.embedding_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(OdmlError::invalid("layer sizes must be positive"));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
        }
    }

    pub fn with_mode(&self, mode: Mode) -> Self {
        Self { mode, ..self.clone() }
    }

    pub fn layer_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.embedding_dim);
        dims
    }

    fn loss_config(&self, weights: LossWeights) -> LossConfig {
        LossConfig {
            weights,
            margin: self.margin,
            temperature: self.temperature,
        }
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON encoding.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

const STREAM_INIT: u64 = 1;
const STREAM_SUPPORT: u64 = 2;
const STREAM_BATCHES: u64 = 3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for one random stream of one stage. Every stage draws from its own
/// streams, so a resumed run consumes exactly the randomness of a fresh one.
pub fn derive_seed(seed: u64, stage: usize, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(((stage as u64) << 8) | stream))
}

/// Per-term loss values, averaged over the iterations of one epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub triplet_p: f64,
    pub triplet_s: f64,
    pub corr: f64,
    pub mutual: f64,
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    /// The deployed model.
    pub model: EmbeddingModel,
    /// The supporting student, when the mode trains one. Discarded after the stage.
    pub support: Option<EmbeddingModel>,
    pub epoch_losses: Vec<LossTerms>,
}

impl StageOutcome {
    pub fn final_losses(&self) -> LossTerms {
        self.epoch_losses.last().copied().unwrap_or_default()
    }
}

/// Inputs of one stage's training loop.
struct StageRun<'a> {
    stage: usize,
    task: &'a TaskDataset,
    teacher: Option<&'a EmbeddingModel>,
    /// Supplies virtual past-task targets; `None` means teacher-only targets.
    memory: Option<&'a StageState>,
    student: EmbeddingModel,
    support: Option<EmbeddingModel>,
    loss: LossConfig,
}

/// P and K shrunk to what the task can supply.
fn effective_pk(task: &TaskDataset, cfg: &TrainingConfig) -> Result<(usize, usize)> {
    let p = cfg.p.min(task.classes.len());
    let k = cfg.k.min(task.min_train_per_class());
    if p < 2 || k < 2 {
        return Err(OdmlError::invalid(format!(
            "task {} cannot supply P×K batches (classes {}, min train per class {})",
            task.task_id,
            task.classes.len(),
            task.min_train_per_class()
        )));
    }
    Ok((p, k))
}

fn correlation_targets(run: &StageRun<'_>, inputs: &Matrix) -> Result<Vec<Gram>> {
    let Some(teacher) = run.teacher else {
        return Ok(Vec::new());
    };
    if run.loss.weights.lambda2 == 0.0 {
        return Ok(Vec::new());
    }
    let teacher_emb = teacher.embed(inputs)?;
    let mut targets = match run.memory {
        Some(state) => state.virtual_targets(&teacher_emb)?,
        None => Vec::new(),
    };
    targets.push(teacher_emb);
    targets.iter().map(gram).collect()
}

fn train_stage(run: StageRun<'_>, cfg: &TrainingConfig) -> Result<StageOutcome> {
    let (p, k) = effective_pk(run.task, cfg)?;
    let iterations = run.task.train.len().div_ceil(p * k);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, run.stage, STREAM_BATCHES));

    let mut student = run.student.clone_weights();
    let mut support = run.support.clone();
    let mut opt_p = AdamState::new(&student, cfg.learning_rate);
    let mut opt_s = support.as_ref().map(|s| AdamState::new(s, cfg.learning_rate));
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut acc = LossTerms::default();
        for it in 0..iterations {
            let batch = pk_batch(run.task, p, k, &mut rng)?;
            let (p_emb, p_cache) = student.forward(&batch.inputs)?;
            let s_fwd = support.as_ref().map(|s| s.forward(&batch.inputs)).transpose()?;
            let targets = correlation_targets(&run, &batch.inputs)?;
            let report = stage_objective(
                &targets,
                &p_emb,
                s_fwd.as_ref().map(|(e, _)| e),
                &batch.labels,
                &run.loss,
            )?;
            if !report.total.is_finite() {
                return Err(OdmlError::Diverged {
                    stage: run.stage,
                    iteration: epoch * iterations + it,
                });
            }
            let diverged = |_| OdmlError::Diverged {
                stage: run.stage,
                iteration: epoch * iterations + it,
            };
            let grads = student.backward(p_cache, &report.grad_p)?;
            opt_p.step(&mut student, &grads).map_err(diverged)?;
            if let (Some(s), Some(opt), Some((_, cache)), Some(g)) =
                (support.as_mut(), opt_s.as_mut(), s_fwd, report.grad_s.as_ref())
            {
                let grads = s.backward(cache, g)?;
                opt.step(s, &grads).map_err(diverged)?;
            }
            acc.total += report.total;
            acc.triplet_p += report.triplet_p;
            acc.triplet_s += report.triplet_s;
            acc.corr += report.corr;
            acc.mutual += report.mutual;
        }
        let n = iterations as f64;
        let mean = LossTerms {
            total: acc.total / n,
            triplet_p: acc.triplet_p / n,
            triplet_s: acc.triplet_s / n,
            corr: acc.corr / n,
            mutual: acc.mutual / n,
        };
        debug!("stage {} epoch {}: loss {:.6}", run.stage, epoch + 1, mean.total);
        epoch_losses.push(mean);
    }
    Ok(StageOutcome {
        model: student,
        support,
        epoch_losses,
    })
}

/// Stage 1: triplet-only training of a freshly initialized model.
pub fn train_initial(task: &TaskDataset, cfg: &TrainingConfig) -> Result<StageOutcome> {
    cfg.validate()?;
    let input_dim = task
        .train
        .first()
        .map(|s| s.features.len())
        .ok_or_else(|| OdmlError::invalid("task has no training samples"))?;
    let model = EmbeddingModel::init(&cfg.layer_dims(input_dim), derive_seed(cfg.seed, 1, STREAM_INIT))?;
    train_stage(
        StageRun {
            stage: 1,
            task,
            teacher: None,
            memory: None,
            student: model,
            support: None,
            loss: cfg.loss_config(Mode::FineTune.weights(cfg.weights())),
        },
        cfg,
    )
}

fn check_new_classes(seen: impl IntoIterator<Item = usize>, task: &TaskDataset) -> Result<()> {
    let seen: std::collections::BTreeSet<usize> = seen.into_iter().collect();
    match task.classes.iter().find(|c| seen.contains(c)) {
        Some(&c) => Err(OdmlError::ClassOverlap(c)),
        None => Ok(()),
    }
}

/// Trains stage `stage ≥ 2` from `teacher` according to `cfg.mode`.
fn train_next_stage(
    stage: usize,
    teacher: &EmbeddingModel,
    memory: Option<&StageState>,
    task: &TaskDataset,
    cfg: &TrainingConfig,
) -> Result<StageOutcome> {
    let mode = cfg.mode;
    let support = if mode.uses_support() {
        Some(EmbeddingModel::init(
            teacher.layer_dims(),
            derive_seed(cfg.seed, stage, STREAM_SUPPORT),
        )?)
    } else {
        None
    };
    train_stage(
        StageRun {
            stage,
            task,
            teacher: Some(teacher),
            memory: if mode.uses_stage_state() { memory } else { None },
            student: teacher.clone_weights(),
            support,
            loss: cfg.loss_config(mode.weights(cfg.weights())),
        },
        cfg,
    )
}

/// One-task online learning: F_p starts as a copy of the frozen teacher,
/// F_s from random weights; returns `(F_p, F_s)`.
///
/// `seen_classes` are the teacher's classes; the new task must not share any.
pub fn train_one_task(
    teacher: &EmbeddingModel,
    seen_classes: &[usize],
    new_task: &TaskDataset,
    cfg: &TrainingConfig,
) -> Result<(EmbeddingModel, EmbeddingModel)> {
    cfg.validate()?;
    check_new_classes(seen_classes.iter().copied(), new_task)?;
    let out = train_next_stage(2, teacher, None, new_task, &cfg.with_mode(Mode::Ours))?;
    Ok((out.model, out.support.expect("ours trains a supporting student")))
}

/// Multi-task stage `state.stage + 1`: teacher `F_{i-1}` plus virtual
/// features for every earlier task.
pub fn train_stage_multi(
    teacher: &EmbeddingModel,
    state: &StageState,
    new_task: &TaskDataset,
    cfg: &TrainingConfig,
) -> Result<StageOutcome> {
    cfg.validate()?;
    check_new_classes(
        state.tasks.iter().flat_map(|t| t.prototypes.iter().map(|p| p.class_id)),
        new_task,
    )?;
    train_next_stage(
        state.stage + 1,
        teacher,
        Some(state),
        new_task,
        &cfg.with_mode(Mode::Ours),
    )
}

/// Stage-boundary drift computation from registry contents: loads
/// `F_1..F_stage` and the previous boundary's state, embeds the stage's
/// training data once per model, and persists the new state.
pub fn post_stage_offline(registry: &Registry, stage: usize, task: &TaskDataset) -> Result<StageState> {
    let current = registry.load_model(stage)?;
    let past = (1..stage).map(|b| registry.load_model(b)).collect::<Result<Vec<_>>>()?;
    let previous = if stage > 1 {
        Some(
            registry
                .load_state(stage - 1)?
                .ok_or_else(|| OdmlError::Registry(format!("stage {} has no state.bin", stage - 1)))?,
        )
    } else {
        None
    };
    let state = compute_stage_state(stage, &current, &past, previous.as_ref(), task)?;
    registry.save_state(&state)?;
    Ok(state)
}

fn compute_stage_state(
    stage: usize,
    current: &EmbeddingModel,
    past: &[EmbeddingModel],
    previous: Option<&StageState>,
    task: &TaskDataset,
) -> Result<StageState> {
    let (inputs, labels) = task.train_matrix();
    let past_refs: Vec<&(dyn Embedder + Sync)> = past.iter().map(|m| m as &(dyn Embedder + Sync)).collect();
    offline_stage_state(
        stage,
        current,
        TaskInputs {
            inputs: &inputs,
            labels: &labels,
            classes: &task.classes,
        },
        previous,
        &past_refs,
    )
}

/// Evaluation after one stage, as persisted in `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    pub mode: Mode,
    pub per_task: BTreeMap<usize, f64>,
    pub all: f64,
    pub config_hash: String,
    pub final_losses: LossTerms,
    pub epoch_losses: Vec<f64>,
}

impl StageReport {
    fn new(stage: usize, cfg: &TrainingConfig, eval: EvalReport, losses: &[LossTerms]) -> Self {
        Self {
            stage,
            mode: cfg.mode,
            per_task: eval.per_task,
            all: eval.all,
            config_hash: cfg.config_hash(),
            final_losses: losses.last().copied().unwrap_or_default(),
            epoch_losses: losses.iter().map(|l| l.total).collect(),
        }
    }
}

/// Result of running one mode across a task sequence.
#[derive(Debug, Clone)]
pub struct ModeRun {
    pub mode: Mode,
    /// One report per trained stage, each over the tasks seen so far.
    pub stage_reports: Vec<StageReport>,
    /// The final deployed model evaluated on every task.
    pub final_report: EvalReport,
    pub model: EmbeddingModel,
}

fn stage_meta(stage: usize, cfg: &TrainingConfig, classes: Vec<usize>) -> StageMeta {
    StageMeta {
        stage,
        mode: cfg.mode,
        classes,
        config_hash: cfg.config_hash(),
        seed: cfg.seed,
    }
}

/// Loads a completed stage from the registry if its metadata matches.
fn resume_stage(
    registry: Option<&Registry>,
    stage: usize,
    cfg: &TrainingConfig,
    classes: &[usize],
) -> Result<Option<(EmbeddingModel, StageReport)>> {
    let Some(reg) = registry else { return Ok(None) };
    let Some(meta) = reg.load_meta(stage)? else {
        return Ok(None);
    };
    if meta.config_hash != cfg.config_hash() || meta.classes != classes || meta.mode != cfg.mode {
        return Err(OdmlError::Registry(format!(
            "stage {stage} in {} was produced by a different configuration",
            reg.root().display()
        )));
    }
    let Some(report) = reg.load_report(stage)? else {
        return Ok(None);
    };
    info!("stage {stage}: resumed from {}", reg.root().display());
    Ok(Some((reg.load_model(stage)?, report)))
}

/// Runs `cfg.mode` over `tasks` (task 1 first). With a registry, every
/// stage's model, state and report are persisted, and stages already present
/// are loaded instead of retrained.
pub fn run_mode(tasks: &[TaskDataset], cfg: &TrainingConfig, registry: Option<&Registry>) -> Result<ModeRun> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(OdmlError::invalid("no tasks"));
    }
    check_disjoint(tasks)?;

    if cfg.mode == Mode::Joint {
        let merged = TaskDataset::merge(1, tasks)?;
        let (model, report) = match resume_stage(registry, 1, cfg, &merged.classes)? {
            Some(found) => found,
            None => {
                let out = train_initial(&merged, cfg)?;
                let report = StageReport::new(1, cfg, evaluate_stages(&out.model, tasks)?, &out.epoch_losses);
                if let Some(reg) = registry {
                    reg.save_model(&out.model, &stage_meta(1, cfg, merged.classes.clone()))?;
                    reg.save_report(&report)?;
                }
                (out.model, report)
            }
        };
        let final_report = evaluate_stages(&model, tasks)?;
        return Ok(ModeRun {
            mode: cfg.mode,
            stage_reports: vec![report],
            final_report,
            model,
        });
    }

    let n_stages = if cfg.mode == Mode::Initial { 1 } else { tasks.len() };
    let mut models: Vec<EmbeddingModel> = Vec::with_capacity(n_stages);
    let mut reports = Vec::with_capacity(n_stages);
    let mut state: Option<StageState> = None;

    for stage in 1..=n_stages {
        let task = &tasks[stage - 1];
        let (model, report) = match resume_stage(registry, stage, cfg, &task.classes)? {
            Some(found) => found,
            None => {
                info!("{}: training stage {stage} on {} classes", cfg.mode, task.classes.len());
                let out = if stage == 1 {
                    train_initial(task, cfg)?
                } else {
                    train_next_stage(stage, &models[stage - 2], state.as_ref(), task, cfg)?
                };
                let eval = evaluate_stages(&out.model, &tasks[..stage])?;
                let report = StageReport::new(stage, cfg, eval, &out.epoch_losses);
                if let Some(reg) = registry {
                    reg.save_model(&out.model, &stage_meta(stage, cfg, task.classes.clone()))?;
                    reg.save_report(&report)?;
                }
                (out.model, report)
            }
        };
        models.push(model);
        reports.push(report);

        if cfg.mode.uses_stage_state() && stage < n_stages {
            let persisted = match registry {
                Some(reg) => reg.load_state(stage)?,
                None => None,
            };
            state = Some(match (persisted, registry) {
                (Some(s), _) => s,
                (None, Some(reg)) => post_stage_offline(reg, stage, task)?,
                (None, None) => {
                    compute_stage_state(stage, &models[stage - 1], &models[..stage - 1], state.as_ref(), task)?
                }
            });
        }
    }

    let model = models.pop().expect("at least one stage");
    let final_report = evaluate_stages(&model, tasks)?;
    Ok(ModeRun {
        mode: cfg.mode,
        stage_reports: reports,
        final_report,
        model,
    })
}

/// Runs a single mode without persistence.
pub fn run_baseline(mode: Mode, tasks: &[TaskDataset], cfg: &TrainingConfig) -> Result<ModeRun> {
    run_mode(tasks, &cfg.with_mode(mode), None)
}
