use crate::error::{MhdError, Result};
use crate::nn::{ClientModel, OptState};

/// Replaces every parameter of every client by the cross-client mean and
/// clears momentum. The mean is accumulated as `x_0 + Σ_i (x_i − x_0) / K`
/// in client order, so identical inputs are left bit-identical.
pub fn fedavg_round(models: &mut [ClientModel], opts: &mut [OptState]) -> Result<()> {
    let Some(first) = models.first() else {
        return Ok(());
    };
    let layout = first.tensor_layout();
    let first_arch = first.architecture();
    for m in &models[1..] {
        if m.tensor_layout() != layout || m.architecture() != first_arch {
            return Err(MhdError::config(
                "model",
                format!(
                    "federated averaging needs identical architectures; client {} differs from client {}",
                    m.client_id, first.client_id
                ),
            ));
        }
    }
    let k = models.len() as f64;
    let mut mean: Vec<Vec<f64>> = first.tensors().iter().map(|t| t.to_vec()).collect();
    for (t, base) in mean.iter_mut().enumerate() {
        let mut acc = vec![0.0; base.len()];
        for m in &models[1..] {
            for ((a, &x), &x0) in acc.iter_mut().zip(m.tensors()[t]).zip(base.iter()) {
                *a += (x - x0) / k;
            }
        }
        base.iter_mut().zip(&acc).for_each(|(b, a)| *b += a);
    }
    for m in models.iter_mut() {
        for (dst, src) in m.tensors_mut().into_iter().zip(&mean) {
            dst.copy_from_slice(src);
        }
    }
    opts.iter_mut().for_each(OptState::reset_momentum);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Architecture;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arch(hidden: Vec<usize>) -> Architecture {
        Architecture { input_dim: 3, hidden, embedding_dim: 4, num_classes: 3, num_aux_heads: 1 }
    }

    fn models(k: usize, seed: u64) -> Vec<ClientModel> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..k).map(|i| ClientModel::init(&arch(vec![5]), i, &mut rng).unwrap()).collect()
    }

    #[test]
    fn matches_naive_mean_and_resets_momentum() {
        let mut ms = models(4, 1);
        let orig = ms.clone();
        let mut opts: Vec<OptState> = ms.iter().map(|m| OptState::new(m, 0.1, 0.9, 10)).collect();
        opts.iter_mut().for_each(|o| o.velocity.iter_mut().flatten().for_each(|v| *v = 1.0));
        fedavg_round(&mut ms, &mut opts).unwrap();
        for t in 0..orig[0].tensors().len() {
            for i in 0..orig[0].tensors()[t].len() {
                let naive: f64 = orig.iter().map(|m| m.tensors()[t][i]).sum::<f64>() / 4.0;
                for m in &ms {
                    assert!((m.tensors()[t][i] - naive).abs() < 1e-15);
                }
            }
        }
        assert!(opts.iter().all(|o| o.velocity.iter().flatten().all(|&v| v == 0.0)));
    }

    #[test]
    fn identical_clients_are_unchanged_and_round_is_idempotent() {
        let one = models(1, 2).remove(0);
        let mut ms = vec![one.clone(), one.clone(), one.clone()];
        let mut opts: Vec<OptState> = ms.iter().map(|m| OptState::new(m, 0.1, 0.9, 10)).collect();
        fedavg_round(&mut ms, &mut opts).unwrap();
        assert!(ms.iter().all(|m| m.tensors() == one.tensors()));

        let mut ms = models(3, 3);
        fedavg_round(&mut ms, &mut opts).unwrap();
        let once = ms.clone();
        fedavg_round(&mut ms, &mut opts).unwrap();
        assert_eq!(ms, once);
    }

    #[test]
    fn rejects_heterogeneous_backbones() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ms = vec![
            ClientModel::init(&arch(vec![5]), 0, &mut rng).unwrap(),
            ClientModel::init(&arch(vec![7]), 1, &mut rng).unwrap(),
        ];
        let mut opts: Vec<OptState> = ms.iter().map(|m| OptState::new(m, 0.1, 0.9, 10)).collect();
        assert!(matches!(fedavg_round(&mut ms, &mut opts), Err(MhdError::Config { .. })));
    }
}
