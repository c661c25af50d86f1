//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MhdError, Result};
use crate::nn::{ClientModel, Matrix, ModelGrads};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
    /// Denominator floor of the relative error, so that entries whose true
    /// gradient is ~0 are judged on absolute error instead.
    pub abs_floor: f64,
    /// Entries checked per tensor; `None` checks every entry.
    pub max_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { eps: 1e-4, tol: 1e-5, abs_floor: 1e-4, max_per_tensor: None, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorstEntry {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<WorstEntry>,
    pub checked: usize,
    /// Entries skipped because the ±eps probe flipped a ReLU.
    pub skipped_kinks: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < self.tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` against central differences of `loss` around `model`.
///
/// `kink_batches` are inputs whose ReLU sign pattern must not change under a
/// probe; probes that flip a unit are skipped and counted.
pub fn grad_check<F>(
    model: &ClientModel,
    analytic: &ModelGrads,
    loss: F,
    kink_batches: &[&Matrix],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&ClientModel) -> Result<f64>,
{
    let layout = model.tensor_layout();
    if analytic.tensors.len() != layout.len() {
        return Err(MhdError::Shape("analytic gradient layout mismatch".into()));
    }
    let base_patterns = kink_batches.iter().map(|b| model.relu_pattern(b)).collect::<Result<Vec<_>>>()?;
    let stable = |m: &ClientModel| -> Result<bool> {
        for (b, p) in kink_batches.iter().zip(&base_patterns) {
            if &m.relu_pattern(b)? != p {
                return Ok(false);
            }
        }
        Ok(true)
    };
    let eval = |m: &ClientModel| -> Result<f64> {
        let v = loss(m)?;
        if !v.is_finite() {
            return Err(MhdError::Verification(format!("non-finite loss {v}")));
        }
        Ok(v)
    };
    eval(model)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0, skipped_kinks: 0, tol: cfg.tol };
    let mut probe = model.clone();
    for (t, (name, _)) in layout.iter().enumerate() {
        let len = analytic.tensors[t].len();
        let indices: Vec<usize> = match cfg.max_per_tensor {
            Some(k) if k < len => {
                let mut v = sample(&mut rng, len, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        };
        for i in indices {
            let orig = model.tensors()[t][i];
            probe.tensors_mut()[t][i] = orig + cfg.eps;
            let ok_plus = stable(&probe)?;
            let f_plus = eval(&probe)?;
            probe.tensors_mut()[t][i] = orig - cfg.eps;
            let ok_minus = stable(&probe)?;
            let f_minus = eval(&probe)?;
            probe.tensors_mut()[t][i] = orig;
            if !(ok_plus && ok_minus) {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (f_plus - f_minus) / (2.0 * cfg.eps);
            let a = analytic.tensors[t][i];
            let err = relative_error(a, numeric, cfg.abs_floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some(WorstEntry { tensor: name.clone(), index: i, analytic: a, numeric });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Backbone, Dense};

    fn linear_model() -> ClientModel {
        ClientModel {
            client_id: 0,
            backbone: Backbone {
                layers: vec![Dense {
                    weight: Matrix::from_rows(&[vec![0.4, -0.3], vec![0.2, 0.9]]).unwrap(),
                    bias: vec![0.1, -0.2],
                }],
                activations: vec![Activation::Identity],
            },
            main_head: Dense::zeros(2, 2),
            aux_heads: vec![],
        }
    }

    /// ½‖embedding‖² summed over the batch; exact gradient is `e ⊗ x`.
    fn quadratic(m: &ClientModel, x: &Matrix) -> Result<(f64, ModelGrads)> {
        let fwd = m.forward(x)?;
        let loss = 0.5 * fwd.embeddings.as_slice().iter().map(|v| v * v).sum::<f64>();
        let g = m.backward(&fwd, &[None], Some(&fwd.embeddings))?;
        Ok((loss, g))
    }

    #[test]
    fn quadratic_loss_on_linear_model_is_exact() {
        let m = linear_model();
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![-0.5, 0.3]]).unwrap();
        let (_, g) = quadratic(&m, &x).unwrap();
        let cfg = GradCheckConfig { tol: 1e-8, ..Default::default() };
        let r = grad_check(&m, &g, |p| Ok(quadratic(p, &x)?.0), &[], &cfg).unwrap();
        assert!(r.passed(), "{r:?}");
        assert!(r.max_rel_error < 1e-8);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let m = linear_model();
        let x = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let (_, mut g) = quadratic(&m, &x).unwrap();
        g.tensors[0][1] *= 1.01;
        let r = grad_check(&m, &g, |p| Ok(quadratic(p, &x)?.0), &[], &Default::default()).unwrap();
        assert!(!r.passed());
        assert_eq!(r.worst.unwrap().tensor, "backbone.0.weight");
    }

    #[test]
    fn non_finite_loss_is_a_verification_error() {
        let m = linear_model();
        let g = ModelGrads::zeros_like(&m);
        let r = grad_check(&m, &g, |_| Ok(f64::NAN), &[], &Default::default());
        assert!(matches!(r, Err(MhdError::Verification(_))));
    }
}
