use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distill::chain::{plan_distillation, DistillPlan};
use crate::distill::losses::{aux_prediction_loss, embedding_loss};
use crate::distill::{DistillConfig, TeacherOutputs};
use crate::error::{MhdError, Result};
use crate::nn::{cross_entropy_grad, ClientModel, Forward, Matrix, ModelGrads};

/// Distillation loss values and gradients w.r.t. the student's public-batch
/// outputs.
#[derive(Debug, Clone)]
pub struct DistillTerms {
    pub loss_emb: f64,
    /// One entry per auxiliary head, rank order.
    pub loss_aux: Vec<f64>,
    pub emb_grad: Option<Matrix>,
    /// Main head first; `None` where a head receives no distillation signal.
    pub head_grads: Vec<Option<Matrix>>,
}

/// Evaluates a frozen plan against the student's outputs.
pub fn evaluate_plan(student: &Forward, plan: &DistillPlan, cfg: &DistillConfig) -> Result<DistillTerms> {
    let teacher_refs: Vec<&Matrix> = plan.teacher_embeddings.iter().collect();
    let (loss_emb, emb_grad) = if teacher_refs.is_empty() {
        (0.0, None)
    } else {
        let (l, g) = embedding_loss(&student.embeddings, &teacher_refs, cfg.nu_emb)?;
        (l, Some(g))
    };
    let m = student.logits.len() - 1;
    let mut head_grads: Vec<Option<Matrix>> = vec![None; m + 1];
    let mut loss_aux = vec![0.0; m];
    for hp in &plan.heads {
        let (l, g) = aux_prediction_loss(&student.logits[hp.rank], &hp.targets, &hp.mask, cfg.nu_aux, cfg.temperature)?;
        loss_aux[hp.rank - 1] = l;
        head_grads[hp.rank] = Some(g);
    }
    Ok(DistillTerms { loss_emb, loss_aux, emb_grad, head_grads })
}

/// Per-term loss values of one optimizer step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub emb: f64,
    pub aux: Vec<f64>,
}

impl LossBreakdown {
    pub fn aux_total(&self) -> f64 {
        self.aux.iter().sum()
    }

    pub fn total(&self) -> f64 {
        self.ce + self.emb + self.aux_total()
    }
}

#[derive(Debug, Clone)]
pub struct StepLoss {
    pub loss: LossBreakdown,
    pub grads: ModelGrads,
}

/// Main-head cross-entropy on a private batch.
pub fn local_ce(model: &ClientModel, x: &Matrix, y: &[usize]) -> Result<StepLoss> {
    let fwd = model.forward(x)?;
    let (ce, g) = cross_entropy_grad(&fwd.logits[0], y)?;
    let mut head_grads: Vec<Option<&Matrix>> = vec![None; model.num_heads()];
    head_grads[0] = Some(&g);
    let grads = model.backward(&fwd, &head_grads, None)?;
    Ok(StepLoss { loss: LossBreakdown { ce, emb: 0.0, aux: vec![0.0; model.aux_heads.len()] }, grads })
}

/// Embedding and chained auxiliary losses on a public batch. With no
/// teachers or zero weights every term is zero and no gradient is produced.
pub fn distill_step<R: Rng + ?Sized>(
    model: &ClientModel,
    public: &Matrix,
    teachers: &[TeacherOutputs],
    cfg: &DistillConfig,
    rng: &mut R,
) -> Result<Option<StepLoss>> {
    if teachers.is_empty() || !cfg.is_active() {
        return Ok(None);
    }
    if let Some(t) = teachers.iter().find(|t| t.embeddings.cols() != model.embedding_dim()) {
        return Err(MhdError::config(
            "model.embedding_dim",
            format!(
                "teacher {} has embedding dimension {}, student {}",
                t.teacher_id,
                t.embeddings.cols(),
                model.embedding_dim()
            ),
        ));
    }
    let fwd = model.forward(public)?;
    let plan = plan_distillation(&fwd, teachers, cfg, rng)?;
    let terms = evaluate_plan(&fwd, &plan, cfg)?;
    let refs: Vec<Option<&Matrix>> = terms.head_grads.iter().map(Option::as_ref).collect();
    let grads = model.backward(&fwd, &refs, terms.emb_grad.as_ref())?;
    Ok(Some(StepLoss { loss: LossBreakdown { ce: 0.0, emb: terms.loss_emb, aux: terms.loss_aux }, grads }))
}

/// Local cross-entropy plus every distillation term, gradients summed.
pub fn total_distill_loss<R: Rng + ?Sized>(
    model: &ClientModel,
    private_x: &Matrix,
    private_y: &[usize],
    public: &Matrix,
    teachers: &[TeacherOutputs],
    cfg: &DistillConfig,
    rng: &mut R,
) -> Result<StepLoss> {
    let mut out = local_ce(model, private_x, private_y)?;
    if let Some(d) = distill_step(model, public, teachers, cfg, rng)? {
        out.grads.accumulate(&d.grads)?;
        out.loss.emb = d.loss.emb;
        out.loss.aux = d.loss.aux;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Architecture, ClientModel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (ClientModel, Matrix, Vec<usize>, Matrix) {
        let arch = Architecture { input_dim: 3, hidden: vec![5], embedding_dim: 4, num_classes: 3, num_aux_heads: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = ClientModel::init(&arch, 0, &mut rng).unwrap();
        let x = Matrix::from_vec(4, 3, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let y = vec![0, 1, 2, 1];
        let p = Matrix::from_vec(5, 3, (0..15).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        (model, x, y, p)
    }

    #[test]
    fn zero_weights_reduce_to_local_ce() {
        let (model, x, y, p) = setup(1);
        let (teacher, ..) = setup(2);
        let t = TeacherOutputs::from_model(&teacher, &p, 1.0).unwrap();
        let cfg = DistillConfig { nu_emb: 0.0, nu_aux: 0.0, num_aux_heads: 2, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let full = total_distill_loss(&model, &x, &y, &p, &[t], &cfg, &mut rng).unwrap();
        let ce = local_ce(&model, &x, &y).unwrap();
        assert_eq!(full.grads, ce.grads);
        assert_eq!(full.loss.total(), ce.loss.ce);
    }

    #[test]
    fn frozen_copy_with_matched_heads_is_a_fixed_point() {
        let (mut model, x, y, p) = setup(3);
        let main = model.main_head.clone();
        model.aux_heads.iter_mut().for_each(|h| *h = main.clone());
        let t = TeacherOutputs::from_model(&model, &p, 1.0).unwrap();
        let cfg = DistillConfig { num_aux_heads: 2, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let full = total_distill_loss(&model, &x, &y, &p, &[t], &cfg, &mut rng).unwrap();
        let ce = local_ce(&model, &x, &y).unwrap();
        assert!(full.loss.emb.abs() < 1e-28);
        for (a, b) in full.grads.tensors.iter().flatten().zip(ce.grads.tensors.iter().flatten()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn teacher_values_never_receive_gradient() {
        let (model, _, _, p) = setup(4);
        let (teacher, ..) = setup(5);
        let t = TeacherOutputs::from_model(&teacher, &p, 1.0).unwrap();
        let cfg = DistillConfig { num_aux_heads: 2, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = distill_step(&model, &p, &[t], &cfg, &mut rng).unwrap().unwrap();
        assert_eq!(d.grads.tensors.len(), model.tensor_layout().len());
    }
}
