//! Loss terms of the three-branch objective and their gradients with respect
//! to the embedding matrices that produced them.
//!
//! Every loss returns `dL/dE` for the branch it trains; the model's
//! `backward` takes it from there.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{OdmlError, Result};
use crate::tensor::{dot, euclidean_distance, kl_rows_with_grad, softmax_rows, softmax_rows_backward, Matrix};

const UNIT_NORM_TOL: f64 = 1e-6;

/// Pairwise inner products of a batch of unit-norm embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Gram {
    g: Matrix,
    embeddings: Matrix,
}

impl Gram {
    pub fn matrix(&self) -> &Matrix {
        &self.g
    }

    pub fn n(&self) -> usize {
        self.g.rows()
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    /// Pulls `dL/dG` back to `dL/dE = (dG + dGᵀ) E`.
    pub fn backprop(&self, d_g: &Matrix) -> Result<Matrix> {
        if d_g.shape() != self.g.shape() {
            return Err(OdmlError::shape("gram backprop shape mismatch"));
        }
        let mut sym = d_g.clone();
        sym.add_scaled(&d_g.transpose(), 1.0)?;
        sym.matmul(&self.embeddings)
    }

    /// Row softmax of `G / temperature`.
    fn distribution(&self, temperature: f64) -> Result<Matrix> {
        softmax_rows(&self.g.scale(1.0 / temperature))
    }
}

pub fn gram(embeddings: &Matrix) -> Result<Gram> {
    for (row, r) in embeddings.iter_rows().enumerate() {
        let norm = dot(r, r).sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(OdmlError::NotNormalized { row, norm });
        }
    }
    Ok(Gram {
        g: embeddings.matmul_t(embeddings)?,
        embeddings: embeddings.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 10.0,
            lambda3: 8.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(OdmlError::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Weights plus the two scalar knobs shared by every loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub margin: f64,
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            margin: 0.2,
            temperature: 1.0,
        }
    }
}

/// Batch-hard triplet loss over Euclidean distances, averaged over anchors.
///
/// Hardest positive is the farthest same-class sample, hardest negative the
/// nearest other-class sample; ties go to the lowest index.
pub fn triplet_batch_hard(embeddings: &Matrix, labels: &[usize], margin: f64) -> Result<(f64, Matrix)> {
    let n = embeddings.rows();
    if labels.len() != n {
        return Err(OdmlError::shape(format!("{} labels for {n} embeddings", labels.len())));
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if let Some((&class, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(OdmlError::TripletPrecondition {
            class,
            reason: "fewer than 2 samples in batch",
        });
    }
    if counts.len() < 2 {
        return Err(OdmlError::TripletPrecondition {
            class: labels.first().copied().unwrap_or(0),
            reason: "no other class in batch",
        });
    }

    let mut dist = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = euclidean_distance(embeddings.row(i), embeddings.row(j));
            dist[(i, j)] = d;
            dist[(j, i)] = d;
        }
    }

    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(n, embeddings.cols());
    for a in 0..n {
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            let d = dist[(a, j)];
            if labels[j] == labels[a] {
                if pos.is_none_or(|(_, best)| d > best) {
                    pos = Some((j, d));
                }
            } else if neg.is_none_or(|(_, best)| d < best) {
                neg = Some((j, d));
            }
        }
        let ((p, d_ap), (q, d_an)) = (pos.unwrap(), neg.unwrap());
        let hinge = d_ap - d_an + margin;
        if hinge <= 0.0 {
            continue;
        }
        loss += hinge;
        // d‖a-b‖/da = (a-b)/‖a-b‖; coincident points contribute zero.
        if d_ap > 0.0 {
            add_direction(&mut grad, embeddings, a, p, scale / d_ap);
        }
        if d_an > 0.0 {
            add_direction(&mut grad, embeddings, a, q, -scale / d_an);
        }
    }
    Ok((loss / n as f64, grad))
}

/// grad[a] += s (e_a - e_b), grad[b] -= s (e_a - e_b)
fn add_direction(grad: &mut Matrix, e: &Matrix, a: usize, b: usize, s: f64) {
    for k in 0..e.cols() {
        let diff = e[(a, k)] - e[(b, k)];
        grad[(a, k)] += s * diff;
        grad[(b, k)] -= s * diff;
    }
}

fn check_same_n(a: &Gram, b: &Gram) -> Result<()> {
    if a.n() != b.n() {
        return Err(OdmlError::shape(format!(
            "gram matrices of batch size {} and {}",
            a.n(),
            b.n()
        )));
    }
    Ok(())
}

/// `KL(σ(G_target) ‖ σ(G_student))` averaged over rows. The target is a
/// constant; the gradient is w.r.t. the student embeddings.
pub fn corr_loss(target: &Gram, student: &Gram, temperature: f64) -> Result<(f64, Matrix)> {
    check_same_n(target, student)?;
    let p = target.distribution(temperature)?;
    let q = student.distribution(temperature)?;
    let (value, _, d_q) = kl_rows_with_grad(&p, &q)?;
    let d_logits = softmax_rows_backward(&q, &d_q)?.scale(1.0 / temperature);
    Ok((value, student.backprop(&d_logits)?))
}

/// Sum of [`corr_loss`] over several constant targets against one student.
pub fn corr_loss_sum(targets: &[Gram], student: &Gram, temperature: f64) -> Result<(f64, Matrix)> {
    let mut total = 0.0;
    let mut grad = Matrix::zeros(student.embeddings.rows(), student.embeddings.cols());
    for t in targets {
        let (v, g) = corr_loss(t, student, temperature)?;
        total += v;
        grad.add_scaled(&g, 1.0)?;
    }
    Ok((total, grad))
}

/// Symmetric mutual distillation loss
/// `½ (KL(σ(G_p) ‖ σ(G_s)) + KL(σ(G_s) ‖ σ(G_p)))`.
///
/// `grad_p` is the derivative w.r.t. the p-branch embeddings with `G_s`
/// held fixed, and vice versa for `grad_s`.
pub fn mutual_loss(g_p: &Gram, g_s: &Gram, temperature: f64) -> Result<(f64, Matrix, Matrix)> {
    check_same_n(g_p, g_s)?;
    let p = g_p.distribution(temperature)?;
    let s = g_s.distribution(temperature)?;
    let (kl_ps, dp_1, ds_1) = kl_rows_with_grad(&p, &s)?;
    let (kl_sp, ds_2, dp_2) = kl_rows_with_grad(&s, &p)?;
    let loss = 0.5 * (kl_ps + kl_sp);

    let mut d_p = dp_1;
    d_p.add_scaled(&dp_2, 1.0)?;
    let mut d_s = ds_1;
    d_s.add_scaled(&ds_2, 1.0)?;
    let k = 0.5 / temperature;
    let grad_p = g_p.backprop(&softmax_rows_backward(&p, &d_p)?.scale(k))?;
    let grad_s = g_s.backprop(&softmax_rows_backward(&s, &d_s)?.scale(k))?;
    Ok((loss, grad_p, grad_s))
}

/// Per-term values and per-branch gradients of one objective evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub triplet_p: f64,
    pub triplet_s: f64,
    pub corr: f64,
    pub mutual: f64,
    pub grad_p: Matrix,
    /// Present when a supporting branch took part.
    pub grad_s: Option<Matrix>,
}

/// The full stage objective:
/// `λ₁·T(p) + λ₁·T(s) + λ₂·Σ_t corr(G_t → p) + λ₃·mutual(p, s)`.
///
/// `targets` are the constant correlation targets (the teacher, plus virtual
/// past-task targets in later stages). With no targets or `λ₂ = 0` the
/// correlation term is skipped; without `support` the second triplet and the
/// mutual term are skipped. Terms with zero weight are never evaluated, so the
/// p-branch gradient of a triplet-only objective is bit-identical to the one
/// computed here with `λ₂ = λ₃ = 0`.
pub fn stage_objective(
    targets: &[Gram],
    p_emb: &Matrix,
    support: Option<&Matrix>,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<LossReport> {
    let w = cfg.weights;
    for t in targets {
        if t.n() != p_emb.rows() {
            return Err(OdmlError::shape("target batch size differs from student batch"));
        }
    }

    let (triplet_p, tg_p) = triplet_batch_hard(p_emb, labels, cfg.margin)?;
    let mut grad_p = tg_p.scale(w.lambda1);
    let mut total = w.lambda1 * triplet_p;

    let needs_gram_p = (w.lambda2 > 0.0 && !targets.is_empty()) || (w.lambda3 > 0.0 && support.is_some());
    let g_p = if needs_gram_p { Some(gram(p_emb)?) } else { None };

    let mut corr = 0.0;
    if w.lambda2 > 0.0 && !targets.is_empty() {
        let (v, g) = corr_loss_sum(targets, g_p.as_ref().unwrap(), cfg.temperature)?;
        corr = v;
        total += w.lambda2 * v;
        grad_p.add_scaled(&g, w.lambda2)?;
    }

    let mut triplet_s = 0.0;
    let mut mutual = 0.0;
    let mut grad_s = None;
    if let Some(s_emb) = support {
        if s_emb.shape() != p_emb.shape() {
            return Err(OdmlError::shape("support embeddings differ in shape from p-branch"));
        }
        let (ts, tg_s) = triplet_batch_hard(s_emb, labels, cfg.margin)?;
        triplet_s = ts;
        total += w.lambda1 * ts;
        let mut gs = tg_s.scale(w.lambda1);
        if w.lambda3 > 0.0 {
            let g_s = gram(s_emb)?;
            let (m, mg_p, mg_s) = mutual_loss(g_p.as_ref().unwrap(), &g_s, cfg.temperature)?;
            mutual = m;
            total += w.lambda3 * m;
            grad_p.add_scaled(&mg_p, w.lambda3)?;
            gs.add_scaled(&mg_s, w.lambda3)?;
        }
        grad_s = Some(gs);
    }

    Ok(LossReport {
        total,
        triplet_p,
        triplet_s,
        corr,
        mutual,
        grad_p,
        grad_s,
    })
}

/// One-task objective: teacher correlation, two triplet terms and mutual
/// distillation between the two students.
pub fn one_task_objective(
    teacher_emb: &Matrix,
    p_emb: &Matrix,
    s_emb: &Matrix,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<LossReport> {
    let n = p_emb.rows();
    if teacher_emb.rows() != n || s_emb.rows() != n {
        return Err(OdmlError::shape("teacher, p and s embeddings must share batch size"));
    }
    let teacher = gram(teacher_emb)?;
    stage_objective(std::slice::from_ref(&teacher), p_emb, Some(s_emb), labels, cfg)
}
