//! The self-check suite behind `mhd verify`: finite-difference checks of
//! every loss term on random small models, and the numerical identities of
//! the analysis module.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analysis;
use crate::distill::{evaluate_plan, local_ce, plan_distillation, ConfidenceMode, DistillConfig, TeacherOutputs};
use crate::error::Result;
use crate::nn::{grad_check, Architecture, ClientModel, GradCheckConfig, Matrix, ModelGrads};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub threshold: f64,
    pub detail: String,
}

impl CheckResult {
    pub fn line(&self) -> String {
        format!(
            "[{}] {:<50} measured {:.3e} (threshold {:.1e}) {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.threshold,
            self.detail
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s: String = self.checks.iter().map(|c| c.line() + "\n").collect();
        let failed = self.failures().len();
        s.push_str(&format!("{} checks, {} failed\n", self.checks.len(), failed));
        s
    }
}

/// Settings of the gradient suite.
#[derive(Debug, Clone)]
pub struct GradientSuiteConfig {
    pub seeds: usize,
    pub check: GradCheckConfig,
    /// Scales one analytic entry of every combined-loss gradient by 1.01 (a
    /// negative control).
    pub inject_fault: bool,
}

impl Default for GradientSuiteConfig {
    fn default() -> Self {
        Self { seeds: 20, check: GradCheckConfig::default(), inject_fault: false }
    }
}

/// Which loss terms a case enables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Terms {
    Ce,
    Embedding,
    Aux,
    Combined,
}

impl Terms {
    fn name(self) -> &'static str {
        match self {
            Terms::Ce => "gradient: cross-entropy",
            Terms::Embedding => "gradient: embedding distillation",
            Terms::Aux => "gradient: auxiliary head chain",
            Terms::Combined => "gradient: combined objective",
        }
    }
}

struct Case {
    student: ClientModel,
    private_x: Matrix,
    private_y: Vec<usize>,
    public: Matrix,
    teachers: Vec<TeacherOutputs>,
    cfg: DistillConfig,
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.5..1.5)).collect()).expect("shape is consistent")
}

fn random_case(seed: u64) -> Result<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = Architecture {
        input_dim: rng.random_range(2..=4),
        hidden: vec![rng.random_range(3..=6)],
        embedding_dim: rng.random_range(3..=8),
        num_classes: rng.random_range(2..=5),
        num_aux_heads: rng.random_range(1..=3),
    };
    let mut student = ClientModel::init(&arch, 0, &mut rng)?;
    // Nonzero output biases keep every embedding row away from the origin,
    // where the normalized embedding loss is not differentiable.
    for b in student.backbone.layers.last_mut().expect("backbone has layers").bias.iter_mut() {
        *b = rng.random_range(-0.5..0.5);
    }
    let private_x = random_matrix(&mut rng, 5, arch.input_dim);
    let private_y = (0..5).map(|_| rng.random_range(0..arch.num_classes)).collect();
    let public = random_matrix(&mut rng, 6, arch.input_dim);
    let cfg = DistillConfig {
        nu_emb: 0.7,
        nu_aux: 1.3,
        num_aux_heads: arch.num_aux_heads,
        delta: 2,
        confidence_mode: ConfidenceMode::MaxSoftmax,
        include_own_previous: true,
        include_self: true,
        include_same_level: true,
        skip_if_student_more_confident: seed.is_multiple_of(2),
        temperature: if seed.is_multiple_of(3) { 2.0 } else { 1.0 },
        top_k: if arch.num_classes > 2 { 2 } else { 0 },
    };
    let teachers = (1..=2)
        .map(|id| {
            let t = ClientModel::init(&arch, id, &mut rng)?;
            TeacherOutputs::from_model(&t, &public, cfg.temperature)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Case { student, private_x, private_y, public, teachers, cfg })
}

fn scaled(cfg: &DistillConfig, terms: Terms) -> DistillConfig {
    let mut c = cfg.clone();
    if terms == Terms::Aux {
        c.nu_emb = 0.0;
    }
    if terms == Terms::Embedding {
        c.nu_aux = 0.0;
    }
    c
}

/// Loss and analytic gradient of the enabled terms under a frozen plan.
fn loss_and_grad(
    case: &Case,
    terms: Terms,
    model: &ClientModel,
    plan_cfg: &DistillConfig,
    plan: &crate::distill::DistillPlan,
) -> Result<(f64, ModelGrads)> {
    let mut loss = 0.0;
    let mut grads = ModelGrads::zeros_like(model);
    if matches!(terms, Terms::Ce | Terms::Combined) {
        let ce = local_ce(model, &case.private_x, &case.private_y)?;
        loss += ce.loss.ce;
        grads.accumulate(&ce.grads)?;
    }
    if terms != Terms::Ce {
        let fwd = model.forward(&case.public)?;
        let t = evaluate_plan(&fwd, plan, plan_cfg)?;
        loss += t.loss_emb + t.loss_aux.iter().sum::<f64>();
        let refs: Vec<Option<&Matrix>> = t.head_grads.iter().map(Option::as_ref).collect();
        grads.accumulate(&model.backward(&fwd, &refs, t.emb_grad.as_ref())?)?;
    }
    Ok((loss, grads))
}

fn check_case(seed: u64, terms: Terms, suite: &GradientSuiteConfig) -> Result<crate::nn::GradCheckReport> {
    let case = random_case(seed)?;
    let cfg = scaled(&case.cfg, terms);
    let fwd = case.student.forward(&case.public)?;
    let plan = plan_distillation(&fwd, &case.teachers, &cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let (_, mut grads) = loss_and_grad(&case, terms, &case.student, &cfg, &plan)?;
    if suite.inject_fault && terms == Terms::Combined {
        let (t, i) = grads
            .tensors
            .iter()
            .enumerate()
            .flat_map(|(t, v)| v.iter().enumerate().map(move |(i, x)| (t, i, x.abs())))
            .max_by(|a, b| a.2.total_cmp(&b.2))
            .map(|(t, i, _)| (t, i))
            .expect("model has parameters");
        grads.tensors[t][i] *= 1.01;
    }
    let kinks = [&case.private_x, &case.public];
    let check = GradCheckConfig { seed, ..suite.check.clone() };
    grad_check(&case.student, &grads, |m| Ok(loss_and_grad(&case, terms, m, &cfg, &plan)?.0), &kinks, &check)
}

/// Finite-difference checks of each loss term and of their sum over
/// `suite.seeds` random small models.
pub fn gradient_suite(suite: &GradientSuiteConfig) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for terms in [Terms::Ce, Terms::Embedding, Terms::Aux, Terms::Combined] {
        let mut worst = 0.0f64;
        let mut worst_detail = String::new();
        let mut checked = 0;
        let mut skipped = 0;
        for seed in 0..suite.seeds as u64 {
            let r = check_case(seed, terms, suite)?;
            checked += r.checked;
            skipped += r.skipped_kinks;
            if r.max_rel_error >= worst {
                worst = r.max_rel_error;
                if let Some(w) = &r.worst {
                    worst_detail = format!(
                        "worst at seed {seed} {}[{}]: analytic {:.6e} numeric {:.6e}",
                        w.tensor, w.index, w.analytic, w.numeric
                    );
                }
            }
        }
        out.push(CheckResult {
            name: terms.name().to_string(),
            passed: checked > 0 && worst < suite.check.tol,
            measured: worst,
            threshold: suite.check.tol,
            detail: format!(
                "{checked} entries over {} seeds, {skipped} kink probes skipped; {worst_detail}",
                suite.seeds
            ),
        });
    }
    Ok(out)
}

/// Gradient suite followed by the analysis checks.
pub fn run_all(suite: &GradientSuiteConfig) -> Result<VerifyReport> {
    let mut checks = gradient_suite(suite)?;
    checks.extend(analysis::run_checks()?);
    Ok(VerifyReport { checks })
}
