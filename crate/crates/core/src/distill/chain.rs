use rand::Rng;

use crate::distill::losses::truncate_top_k;
use crate::distill::{ConfidenceMode, DistillConfig, TeacherOutputs};
use crate::error::{MhdError, Result};
use crate::nn::{argmax, max_prob, softmax_rows, Forward, Matrix};

/// A possible distillation source for one student head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Candidate {
    /// Head `rank` of teacher number `teacher` (position in the teacher list).
    Teacher { teacher: usize, rank: usize },
    /// The student's own head one rank up the chain.
    OwnPrevious,
    /// The student's own head being trained; selecting it skips the sample.
    OwnSelf,
}

/// Candidate sources of student head `rank` (`1..=num_aux_heads`), in
/// selection-priority order.
pub fn chain_targets(
    rank: usize,
    num_aux_heads: usize,
    teachers: &[TeacherOutputs],
    cfg: &DistillConfig,
) -> Result<Vec<Candidate>> {
    if rank == 0 || rank > num_aux_heads {
        return Err(MhdError::Input(format!("head rank {rank} outside 1..={num_aux_heads}")));
    }
    let mut out = Vec::new();
    for (j, t) in teachers.iter().enumerate() {
        if t.num_heads() < rank {
            return Err(MhdError::config(
                "distill.num_aux_heads",
                format!("teacher {} has no rank-{} head for student head {rank}", t.teacher_id, rank - 1),
            ));
        }
        out.push(Candidate::Teacher { teacher: j, rank: rank - 1 });
    }
    if cfg.include_same_level {
        for (j, t) in teachers.iter().enumerate() {
            if t.num_heads() > rank {
                out.push(Candidate::Teacher { teacher: j, rank });
            }
        }
    }
    if cfg.include_own_previous {
        out.push(Candidate::OwnPrevious);
    }
    if cfg.include_self {
        out.push(Candidate::OwnSelf);
    }
    Ok(out)
}

/// Index of the chosen candidate row. `MaxSoftmax` takes the largest top-1
/// probability, ties to the lowest index.
pub fn select_teacher<R: Rng + ?Sized>(candidates: &[&[f64]], mode: ConfidenceMode, rng: &mut R) -> Result<usize> {
    if candidates.is_empty() {
        return Err(MhdError::Input("no distillation candidates".into()));
    }
    Ok(match mode {
        ConfidenceMode::MaxSoftmax => {
            let conf: Vec<f64> = candidates.iter().map(|c| max_prob(c)).collect();
            argmax(&conf)
        }
        ConfidenceMode::Random => rng.random_range(0..candidates.len()),
    })
}

/// `mask[b]` is false exactly when the student is strictly more confident.
pub fn skip_mask(student_probs: &Matrix, teacher_probs: &Matrix) -> Vec<bool> {
    student_probs.iter_rows().zip(teacher_probs.iter_rows()).map(|(s, t)| max_prob(s) <= max_prob(t)).collect()
}

/// Frozen targets for one auxiliary head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadPlan {
    pub rank: usize,
    pub candidates: Vec<Candidate>,
    /// Chosen candidate index per sample.
    pub selected: Vec<usize>,
    pub targets: Matrix,
    pub mask: Vec<bool>,
}

/// All discrete choices of one distillation step; everything in it is a
/// constant for differentiation.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillPlan {
    pub teacher_embeddings: Vec<Matrix>,
    pub heads: Vec<HeadPlan>,
}

/// Resolves candidates, per-sample selection and masks for every auxiliary
/// head of the student, given its forward pass on the public batch.
pub fn plan_distillation<R: Rng + ?Sized>(
    student: &Forward,
    teachers: &[TeacherOutputs],
    cfg: &DistillConfig,
    rng: &mut R,
) -> Result<DistillPlan> {
    let b = student.batch_size();
    for t in teachers {
        if t.embeddings.rows() != b || t.probs.iter().any(|p| p.rows() != b) {
            return Err(MhdError::Shape(format!(
                "teacher {} outputs do not cover the {b}-sample public batch",
                t.teacher_id
            )));
        }
    }
    let m = student.logits.len() - 1;
    let own: Vec<Matrix> = student.logits.iter().map(|z| softmax_rows(z, cfg.temperature)).collect();
    let mut heads = Vec::with_capacity(m);
    if cfg.nu_aux > 0.0 && !teachers.is_empty() {
        for rank in 1..=m {
            let candidates = chain_targets(rank, m, teachers, cfg)?;
            let d = own[rank].cols();
            let mut targets = Matrix::zeros(b, d);
            let mut selected = Vec::with_capacity(b);
            let mut mask = Vec::with_capacity(b);
            for r in 0..b {
                let rows: Vec<&[f64]> = candidates
                    .iter()
                    .map(|c| match *c {
                        Candidate::Teacher { teacher, rank } => teachers[teacher].probs[rank].row(r),
                        Candidate::OwnPrevious => own[rank - 1].row(r),
                        Candidate::OwnSelf => own[rank].row(r),
                    })
                    .collect();
                let pick = select_teacher(&rows, cfg.confidence_mode, rng)?;
                let target = match candidates[pick] {
                    Candidate::Teacher { .. } if cfg.top_k > 0 => truncate_top_k(rows[pick], cfg.top_k),
                    _ => rows[pick].to_vec(),
                };
                let mut keep = candidates[pick] != Candidate::OwnSelf;
                if cfg.skip_if_student_more_confident && max_prob(own[rank].row(r)) > max_prob(rows[pick]) {
                    keep = false;
                }
                targets.row_mut(r).copy_from_slice(&target);
                selected.push(pick);
                mask.push(keep);
            }
            heads.push(HeadPlan { rank, candidates, selected, targets, mask });
        }
    }
    let teacher_embeddings =
        if cfg.nu_emb > 0.0 { teachers.iter().map(|t| t.embeddings.clone()).collect() } else { Vec::new() };
    Ok(DistillPlan { teacher_embeddings, heads })
}
