use crate::data::LabeledSet;
use crate::error::Result;
use crate::nn::matrix::{affine, outer_accumulate};
use crate::nn::{argmax, cross_entropy_grad, ClientModel, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    /// Full-batch gradient steps.
    pub steps: usize,
    /// `None` picks `1 / (mean ‖ξ‖² + 1)`, below the inverse curvature bound
    /// of the softmax loss.
    pub learning_rate: Option<f64>,
    pub momentum: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { steps: 2000, learning_rate: None, momentum: 0.9 }
    }
}

/// Trains a zero-initialized linear head on the frozen embeddings of
/// `train` and returns its accuracy on `eval`.
pub fn embedding_probe(model: &ClientModel, train: &LabeledSet, eval: &LabeledSet, cfg: &ProbeConfig) -> Result<f64> {
    let e_train = model.forward(&train.features)?.embeddings;
    let e_eval = model.forward(&eval.features)?.embeddings;
    let (n, e) = e_train.shape();
    let d = train.num_classes;
    let lr = cfg.learning_rate.unwrap_or_else(|| {
        let sq: f64 = e_train.as_slice().iter().map(|v| v * v).sum();
        1.0 / (sq / n.max(1) as f64 + 1.0)
    });
    let mut w = Matrix::zeros(d, e);
    let mut b = vec![0.0; d];
    let mut vw = Matrix::zeros(d, e);
    let mut vb = vec![0.0; d];
    for _ in 0..cfg.steps {
        let logits = affine(&e_train, &w, &b)?;
        let (_, g) = cross_entropy_grad(&logits, &train.labels)?;
        let (dw, db) = outer_accumulate(&g, &e_train)?;
        for ((v, p), gr) in vw.as_mut_slice().iter_mut().zip(w.as_mut_slice()).zip(dw.as_slice()) {
            *v = cfg.momentum * *v + gr;
            *p -= lr * *v;
        }
        for ((v, p), gr) in vb.iter_mut().zip(b.iter_mut()).zip(&db) {
            *v = cfg.momentum * *v + gr;
            *p -= lr * *v;
        }
    }
    let logits = affine(&e_eval, &w, &b)?;
    let correct = logits.iter_rows().zip(&eval.labels).filter(|(row, &y)| argmax(row) == y).count();
    Ok(correct as f64 / eval.len().max(1) as f64)
}
