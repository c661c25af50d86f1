use crate::error::{MhdError, Result};
use crate::nn::{log_softmax, softmax, Matrix};

const NORM_EPS: f64 = 1e-12;
const PROB_TOL: f64 = 1e-9;

/// Row-wise `x / max(‖x‖, 1e-12)` together with the clamped norms.
pub fn normalize_rows(x: &Matrix) -> (Matrix, Vec<f64>) {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
        row.iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    (out, norms)
}

/// `nu · Σ_j mean_b ‖ψ_b − φ_{j,b}‖²` over L2-normalized rows, with the
/// gradient w.r.t. the unnormalized student embeddings.
pub fn embedding_loss(student: &Matrix, teachers: &[&Matrix], nu: f64) -> Result<(f64, Matrix)> {
    let (b, e) = student.shape();
    let mut grad_psi = Matrix::zeros(b, e);
    if b == 0 || teachers.is_empty() {
        return Ok((0.0, grad_psi));
    }
    let (psi, norms) = normalize_rows(student);
    let inv_b = 1.0 / b as f64;
    let mut loss = 0.0;
    for t in teachers {
        if t.shape() != (b, e) {
            return Err(MhdError::Shape(format!("teacher embeddings {:?}, student {:?}", t.shape(), (b, e))));
        }
        let (phi, _) = normalize_rows(t);
        for r in 0..b {
            let (p, f) = (psi.row(r), phi.row(r));
            let g = grad_psi.row_mut(r);
            for c in 0..e {
                let diff = p[c] - f[c];
                loss += diff * diff * inv_b;
                g[c] += 2.0 * nu * inv_b * diff;
            }
        }
    }
    // d(x/‖x‖)/dx applied to g: (g − ψ(ψ·g)) / ‖x‖. A row at the clamp
    // has no direction and is held constant.
    let mut grad = grad_psi;
    for r in 0..b {
        let p = psi.row(r);
        let g = grad.row_mut(r);
        if norms[r] <= NORM_EPS {
            g.iter_mut().for_each(|v| *v = 0.0);
            continue;
        }
        let dot: f64 = p.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        for c in 0..e {
            g[c] = (g[c] - p[c] * dot) / norms[r];
        }
    }
    Ok((nu * loss, grad))
}

fn check_probability_row(row: &[f64], r: usize) -> Result<()> {
    let sum: f64 = row.iter().sum();
    if row.iter().any(|&v| !(0.0..=1.0 + PROB_TOL).contains(&v)) || (sum - 1.0).abs() > PROB_TOL {
        return Err(MhdError::Input(format!("teacher row {r} is not a probability vector (sum {sum})")));
    }
    Ok(())
}

/// `nu · mean over unmasked b of −Σ_k t_{b,k} log softmax(z_b / T)_k`.
///
/// Masked samples (`mask[b] == false`) contribute neither loss nor gradient.
pub fn aux_prediction_loss(
    student_logits: &Matrix,
    teacher_probs: &Matrix,
    mask: &[bool],
    nu: f64,
    temperature: f64,
) -> Result<(f64, Matrix)> {
    let (b, d) = student_logits.shape();
    if teacher_probs.shape() != (b, d) || mask.len() != b {
        return Err(MhdError::Shape(format!(
            "student {:?}, teacher {:?}, mask {}",
            (b, d),
            teacher_probs.shape(),
            mask.len()
        )));
    }
    for r in 0..b {
        check_probability_row(teacher_probs.row(r), r)?;
    }
    let mut grad = Matrix::zeros(b, d);
    let active = mask.iter().filter(|&&m| m).count();
    if active == 0 {
        return Ok((0.0, grad));
    }
    let inv_n = 1.0 / active as f64;
    let inv_t = 1.0 / temperature;
    let mut loss = 0.0;
    for r in (0..b).filter(|&r| mask[r]) {
        let scaled: Vec<f64> = student_logits.row(r).iter().map(|z| z * inv_t).collect();
        let logp = log_softmax(&scaled);
        let p = softmax(&scaled);
        let t = teacher_probs.row(r);
        loss -= t.iter().zip(&logp).map(|(a, b)| a * b).sum::<f64>();
        let g = grad.row_mut(r);
        for k in 0..d {
            g[k] = nu * inv_n * inv_t * (p[k] - t[k]);
        }
    }
    Ok((nu * inv_n * loss, grad))
}

/// Keeps the `k` largest entries of a probability row (ties to the lowest
/// index) and renormalizes them to sum to one.
pub fn truncate_top_k(row: &[f64], k: usize) -> Vec<f64> {
    if k >= row.len() {
        return row.to_vec();
    }
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    let mut out = vec![0.0; row.len()];
    let kept: f64 = order[..k].iter().map(|&i| row[i]).sum();
    for &i in &order[..k] {
        out[i] = row[i] / kept;
    }
    out
}
