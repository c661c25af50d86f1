//! Numerical identities of softmax distillation dynamics.
//!
//! * A logit perturbation `κ` moves `p = softmax(h)` by
//!   `δ = κ∘p − (κ·p) p` to first order.
//! * With mixing weights `ν` whose rows sum to zero, the stationary
//!   condition on the heads is `r_k = E_x Σ_{i,j} ν_ij Σ_m p_{j,m} (δ_mk − p_{i,k}) = 0`.
//! * One cross-entropy SGD step of rate `λ` on `(x, y)` through a logits
//!   layer changes `o_k(x')` by
//!   `λ o_k(x') (ξ·ξ') Σ_i (δ_ki − o_i(x')) (δ_yi − o_i(x))` to first order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{MhdError, Result};
use crate::nn::{softmax, Matrix};
use crate::verify::CheckResult;

/// First-order change of `softmax(h)` under logit perturbation `kappa`.
pub fn softmax_linear_term(h: &[f64], kappa: &[f64]) -> Vec<f64> {
    let p = softmax(h);
    let kp: f64 = kappa.iter().zip(&p).map(|(a, b)| a * b).sum();
    kappa.iter().zip(&p).map(|(k, pm)| k * pm - kp * pm).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationCase {
    pub h: Vec<f64>,
    pub kappa: Vec<f64>,
    /// Positive and decreasing.
    pub scales: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationReport {
    pub linear_term: Vec<f64>,
    pub linear_term_sum: f64,
    pub residuals: Vec<f64>,
    /// `residuals[i] / residuals[i + 1]`.
    pub ratios: Vec<f64>,
}

/// `‖softmax(h + εκ) − softmax(h) − ε δ‖₂` at every scale of the ladder.
pub fn softmax_perturbation_residual(case: &PerturbationCase) -> Result<PerturbationReport> {
    let d = case.h.len();
    if d < 2 || case.kappa.len() != d {
        return Err(MhdError::Input(format!("need d >= 2 and matching kappa, got {d} and {}", case.kappa.len())));
    }
    if case.scales.iter().any(|&s| s <= 0.0) || case.scales.windows(2).any(|w| w[1] >= w[0]) {
        return Err(MhdError::Input("scales must be positive and decreasing".into()));
    }
    let p = softmax(&case.h);
    let delta = softmax_linear_term(&case.h, &case.kappa);
    let residuals: Vec<f64> = case
        .scales
        .iter()
        .map(|&eps| {
            let shifted: Vec<f64> = case.h.iter().zip(&case.kappa).map(|(h, k)| h + eps * k).collect();
            let q = softmax(&shifted);
            q.iter().zip(&p).zip(&delta).map(|((q, p), dl)| (q - p - eps * dl).powi(2)).sum::<f64>().sqrt()
        })
        .collect();
    let ratios = residuals.windows(2).map(|w| w[0] / w[1]).collect();
    Ok(PerturbationReport { linear_term_sum: delta.iter().sum(), linear_term: delta, residuals, ratios })
}

/// Direct evaluation of the stationary-condition left-hand side.
///
/// `tables[i]` holds model `i`'s probability rows over the same samples;
/// every row of `nu` must sum to zero.
pub fn stationary_residual(tables: &[Matrix], nu: &Matrix) -> Result<Vec<f64>> {
    let n = tables.len();
    if nu.shape() != (n, n) {
        return Err(MhdError::Shape(format!("nu is {:?} for {n} models", nu.shape())));
    }
    for i in 0..n {
        let s: f64 = nu.row(i).iter().sum();
        if s.abs() > 1e-12 {
            return Err(MhdError::Input(format!("row {i} of nu sums to {s}, not 0")));
        }
    }
    let Some(first) = tables.first() else {
        return Ok(Vec::new());
    };
    let (samples, d) = first.shape();
    if tables.iter().any(|t| t.shape() != (samples, d)) {
        return Err(MhdError::Shape("probability tables differ in shape".into()));
    }
    let mut r = vec![0.0; d];
    for x in 0..samples {
        for i in 0..n {
            let pi = tables[i].row(x);
            for j in 0..n {
                let w = nu.get(i, j);
                let pj = tables[j].row(x);
                for (k, rk) in r.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for (m, &pjm) in pj.iter().enumerate() {
                        let kron = if m == k { 1.0 } else { 0.0 };
                        s += pjm * (kron - pi[k]);
                    }
                    *rk += w * s;
                }
            }
        }
    }
    r.iter_mut().for_each(|v| *v /= samples.max(1) as f64);
    Ok(r)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceUpdate {
    pub predicted: Vec<f64>,
    pub actual: Vec<f64>,
}

impl ConfidenceUpdate {
    pub fn error(&self) -> f64 {
        self.predicted.iter().zip(&self.actual).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    }
}

fn logits(w: &Matrix, xi: &[f64]) -> Vec<f64> {
    w.iter_rows().map(|row| row.iter().zip(xi).map(|(a, b)| a * b).sum()).collect()
}

/// Predicted and measured change of `o(x') = softmax(W ξ')` after one
/// cross-entropy SGD step of rate `lr` on `(ξ, y)`. The layer has no bias.
pub fn confidence_update_check(
    w: &Matrix,
    xi: &[f64],
    xi_prime: &[f64],
    label: usize,
    lr: f64,
) -> Result<ConfidenceUpdate> {
    let (d, e) = w.shape();
    if xi.len() != e || xi_prime.len() != e || label >= d {
        return Err(MhdError::Input("embedding or label does not fit the weight matrix".into()));
    }
    let o = softmax(&logits(w, xi));
    let o_p = softmax(&logits(w, xi_prime));
    let dot: f64 = xi.iter().zip(xi_prime).map(|(a, b)| a * b).sum();
    let predicted = (0..d)
        .map(|k| {
            let s: f64 = (0..d)
                .map(|i| {
                    let dk = if k == i { 1.0 } else { 0.0 };
                    let dy = if label == i { 1.0 } else { 0.0 };
                    (dk - o_p[i]) * (dy - o[i])
                })
                .sum();
            lr * o_p[k] * dot * s
        })
        .collect();
    let mut stepped = w.clone();
    for k in 0..d {
        let g = o[k] - if k == label { 1.0 } else { 0.0 };
        for (c, v) in stepped.row_mut(k).iter_mut().enumerate() {
            *v -= lr * g * xi[c];
        }
    }
    let o_after = softmax(&logits(&stepped, xi_prime));
    let actual = o_after.iter().zip(&o_p).map(|(a, b)| a - b).collect();
    Ok(ConfidenceUpdate { predicted, actual })
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn probability_table(rng: &mut ChaCha8Rng, samples: usize, d: usize) -> Matrix {
    let rows: Vec<Vec<f64>> = (0..samples).map(|_| softmax(&uniform_vec(rng, d, 2.0))).collect();
    Matrix::from_rows(&rows).expect("rows have equal length")
}

/// `ν` with zero row sums: random off-diagonal entries, diagonal set to
/// minus the row's off-diagonal sum.
pub fn random_zero_sum_nu(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
    let mut nu = Matrix::zeros(n, n);
    for i in 0..n {
        let mut s = 0.0;
        for j in (0..n).filter(|&j| j != i) {
            let v = rng.random_range(0.0..1.0);
            nu.set(i, j, v);
            s += v;
        }
        nu.set(i, i, -s);
    }
    nu
}

pub const HALVING_LADDER: [f64; 6] = [0.05, 0.025, 0.0125, 0.00625, 0.003125, 0.0015625];
pub const LR_LADDER: [f64; 3] = [1e-2, 1e-3, 1e-4];

/// Log-log slope of `err` against `lr` between consecutive rungs.
pub fn convergence_orders(lrs: &[f64], errs: &[f64]) -> Vec<f64> {
    lrs.windows(2).zip(errs.windows(2)).map(|(l, e)| (e[0] / e[1]).ln() / (l[0] / l[1]).ln()).collect()
}

/// Every analysis identity as a pass/fail check, over fixed random cases.
pub fn run_checks() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);

    let (mut lo, mut hi, mut max_sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
    for _ in 0..20 {
        let case = PerturbationCase {
            h: uniform_vec(&mut rng, 5, 2.0),
            kappa: uniform_vec(&mut rng, 5, 1.0),
            scales: HALVING_LADDER.to_vec(),
        };
        let r = softmax_perturbation_residual(&case)?;
        for &q in &r.ratios {
            lo = lo.min(q);
            hi = hi.max(q);
        }
        max_sum = max_sum.max(r.linear_term_sum.abs());
    }
    out.push(CheckResult {
        name: "softmax perturbation: halving ratio".into(),
        passed: lo >= 3.5 && hi <= 4.5,
        measured: hi.max(8.0 - lo) - 4.0,
        threshold: 0.5,
        detail: format!("ratios in [{lo:.4}, {hi:.4}] over 20 cases, 6-rung ladder"),
    });
    out.push(CheckResult {
        name: "softmax perturbation: linear term sums to 0".into(),
        passed: max_sum <= 1e-12,
        measured: max_sum,
        threshold: 1e-12,
        detail: String::new(),
    });

    let (mut ident, mut linear, mut closed) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..10 {
        let n = 4;
        let nu = random_zero_sum_nu(&mut rng, n);
        let shared = probability_table(&mut rng, 30, 5);
        let same = vec![shared; n];
        ident = ident.max(stationary_residual(&same, &nu)?.iter().fold(0.0, |a, v| a.max(v.abs())));
        let tables: Vec<Matrix> = (0..n).map(|_| probability_table(&mut rng, 30, 5)).collect();
        let r1 = stationary_residual(&tables, &nu)?;
        let mut nu2 = nu.clone();
        nu2.scale(2.0);
        let r2 = stationary_residual(&tables, &nu2)?;
        linear = linear.max(r1.iter().zip(&r2).fold(0.0, |a, (x, y)| a.max((y - 2.0 * x).abs())));
        for (k, &rk) in r1.iter().enumerate() {
            let mut c = 0.0;
            for x in 0..30 {
                for i in 0..n {
                    for j in 0..n {
                        c += nu.get(i, j) * (tables[j].get(x, k) - tables[i].get(x, k));
                    }
                }
            }
            closed = closed.max((rk - c / 30.0).abs());
        }
    }
    for (name, v) in [
        ("stationary residual: identical models", ident),
        ("stationary residual: linear in nu", linear),
        ("stationary residual: closed form", closed),
    ] {
        out.push(CheckResult {
            name: name.into(),
            passed: v <= 1e-12,
            measured: v,
            threshold: 1e-12,
            detail: String::new(),
        });
    }

    let (mut worst_dev, mut orders_seen) = (0.0f64, Vec::new());
    for _ in 0..10 {
        let w = Matrix::from_vec(4, 3, uniform_vec(&mut rng, 12, 1.0)).expect("4x3");
        let xi = uniform_vec(&mut rng, 3, 1.0);
        let xp = uniform_vec(&mut rng, 3, 1.0);
        let y = rng.random_range(0..4);
        let errs: Vec<f64> = LR_LADDER
            .iter()
            .map(|&lr| confidence_update_check(&w, &xi, &xp, y, lr).map(|u| u.error()))
            .collect::<Result<_>>()?;
        for q in convergence_orders(&LR_LADDER, &errs) {
            worst_dev = worst_dev.max((q - 2.0).abs());
            orders_seen.push(q);
        }
    }
    let (qlo, qhi) = orders_seen.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &q| (a.min(q), b.max(q)));
    out.push(CheckResult {
        name: "confidence update: quadratic error decay".into(),
        passed: worst_dev <= 0.2,
        measured: worst_dev,
        threshold: 0.2,
        detail: format!("log-slope in [{qlo:.4}, {qhi:.4}] over lr 1e-2, 1e-3, 1e-4"),
    });

    let w = Matrix::from_vec(3, 2, uniform_vec(&mut rng, 6, 1.0)).expect("3x2");
    let ortho = confidence_update_check(&w, &[1.0, 0.0], &[0.0, 2.0], 1, 0.1)?;
    let max_ortho = ortho.predicted.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    out.push(CheckResult {
        name: "confidence update: orthogonal embeddings".into(),
        passed: max_ortho == 0.0,
        measured: max_ortho,
        threshold: 0.0,
        detail: String::new(),
    });
    let mut min_gain = f64::INFINITY;
    for _ in 0..20 {
        let w = Matrix::from_vec(4, 3, uniform_vec(&mut rng, 12, 1.0)).expect("4x3");
        let xi = uniform_vec(&mut rng, 3, 1.0);
        let y = rng.random_range(0..4);
        min_gain = min_gain.min(confidence_update_check(&w, &xi, &xi, y, 0.01)?.predicted[y]);
    }
    out.push(CheckResult {
        name: "confidence update: seen label gains".into(),
        passed: min_gain >= 0.0,
        measured: min_gain,
        threshold: 0.0,
        detail: "smallest predicted change of o_y(x) after a step on (x, y)".into(),
    });
    Ok(out)
}
