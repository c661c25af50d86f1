//! Distillation losses and target selection.
//!
//! Auxiliary head `k` of a student learns from, per public sample, the most
//! confident candidate head among its teachers' rank `k-1` heads. The
//! student's own embedding is pulled toward every teacher's embedding after
//! L2 normalization. Selection is discrete and happens once per step in
//! [`plan_distillation`]; [`evaluate_plan`] is the differentiable part.

mod chain;
mod losses;
mod total;

use serde::{Deserialize, Serialize};

use crate::error::{MhdError, Result};
use crate::nn::{softmax_rows, ClientModel, Matrix};

pub use chain::{chain_targets, plan_distillation, select_teacher, skip_mask, Candidate, DistillPlan, HeadPlan};
pub use losses::{aux_prediction_loss, embedding_loss, normalize_rows, truncate_top_k};
pub use total::{distill_step, evaluate_plan, local_ce, total_distill_loss, DistillTerms, LossBreakdown, StepLoss};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceMode {
    /// Highest top-1 probability wins.
    MaxSoftmax,
    /// Uniformly random candidate per sample.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub nu_emb: f64,
    pub nu_aux: f64,
    pub num_aux_heads: usize,
    pub delta: usize,
    pub confidence_mode: ConfidenceMode,
    /// Adds the student's own rank `k-1` head to the candidates of head `k`.
    pub include_own_previous: bool,
    /// Adds the student's own rank `k` head; choosing it skips the sample.
    pub include_self: bool,
    /// Adds the teachers' rank `k` heads.
    pub include_same_level: bool,
    pub skip_if_student_more_confident: bool,
    pub temperature: f64,
    /// Classes per teacher prediction row sent over the wire; the target is
    /// the renormalized top-k. 0 sends full rows.
    pub top_k: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            nu_emb: 1.0,
            nu_aux: 3.0,
            num_aux_heads: 4,
            delta: 1,
            confidence_mode: ConfidenceMode::MaxSoftmax,
            include_own_previous: true,
            include_self: false,
            include_same_level: false,
            skip_if_student_more_confident: false,
            temperature: 1.0,
            top_k: 3,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.nu_emb >= 0.0 && self.nu_emb.is_finite()) {
            return Err(MhdError::config("distill.nu_emb", "must be finite and >= 0"));
        }
        if !(self.nu_aux >= 0.0 && self.nu_aux.is_finite()) {
            return Err(MhdError::config("distill.nu_aux", "must be finite and >= 0"));
        }
        if self.delta == 0 {
            return Err(MhdError::config("distill.delta", "must be at least 1"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(MhdError::config("distill.temperature", "must be positive and finite"));
        }
        Ok(())
    }

    /// Whether any distillation term can produce a gradient.
    pub fn is_active(&self) -> bool {
        self.nu_emb > 0.0 || (self.nu_aux > 0.0 && self.num_aux_heads > 0)
    }
}

/// What a teacher sends for one public batch: embeddings and the
/// temperature-scaled prediction of every head.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherOutputs {
    pub teacher_id: usize,
    pub embeddings: Matrix,
    /// Main head first, then auxiliary heads in chain order.
    pub probs: Vec<Matrix>,
}

impl TeacherOutputs {
    pub fn from_model(model: &ClientModel, public_batch: &Matrix, temperature: f64) -> Result<Self> {
        let fwd = model.forward(public_batch)?;
        Ok(Self {
            teacher_id: model.client_id,
            probs: fwd.logits.iter().map(|z| softmax_rows(z, temperature)).collect(),
            embeddings: fwd.embeddings,
        })
    }

    pub fn num_heads(&self) -> usize {
        self.probs.len()
    }
}
