//! Accuracy accounting: per-head accuracy on the shared test split,
//! reweighting to a client's label marginal, cross-client matrices grouped
//! by graph distance, and linear probes on frozen embeddings.

mod probe;
mod record;

use crate::data::LabeledSet;
use crate::error::{MhdError, Result};
use crate::federation::Graph;
use crate::nn::{argmax, ClientModel};

pub use probe::{embedding_probe, ProbeConfig};
pub use record::{summarize, summary_csv, write_jsonl, MetricsRecord, SummaryRow};

/// Correct and total counts per class for every head; `[head][class]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassCounts {
    pub correct: Vec<Vec<usize>>,
    pub total: Vec<usize>,
}

impl ClassCounts {
    pub fn num_heads(&self) -> usize {
        self.correct.len()
    }

    /// Plain top-1 accuracy of `head`.
    pub fn accuracy(&self, head: usize) -> f64 {
        let n: usize = self.total.iter().sum();
        self.correct[head].iter().sum::<usize>() as f64 / n as f64
    }

    /// Class-conditional accuracy averaged under `marginal`. Classes with no
    /// test samples contribute nothing.
    pub fn weighted_accuracy(&self, head: usize, marginal: &[f64]) -> f64 {
        let mut acc = 0.0;
        let mut mass = 0.0;
        for (c, &w) in marginal.iter().enumerate() {
            if self.total[c] > 0 {
                acc += w * self.correct[head][c] as f64 / self.total[c] as f64;
                mass += w;
            }
        }
        if mass > 0.0 {
            acc / mass
        } else {
            0.0
        }
    }
}

pub fn class_counts(model: &ClientModel, set: &LabeledSet) -> Result<ClassCounts> {
    if set.is_empty() {
        return Err(MhdError::Input("evaluation set is empty".into()));
    }
    let fwd = model.forward(&set.features)?;
    let mut correct = vec![vec![0; set.num_classes]; fwd.logits.len()];
    let mut total = vec![0; set.num_classes];
    for &y in &set.labels {
        total[y] += 1;
    }
    for (h, logits) in fwd.logits.iter().enumerate() {
        for (row, &y) in logits.iter_rows().zip(&set.labels) {
            if argmax(row) == y {
                correct[h][y] += 1;
            }
        }
    }
    Ok(ClassCounts { correct, total })
}

/// Top-1 accuracy of every head, main head first.
pub fn evaluate(model: &ClientModel, set: &LabeledSet) -> Result<Vec<f64>> {
    let counts = class_counts(model, set)?;
    Ok((0..counts.num_heads()).map(|h| counts.accuracy(h)).collect())
}

/// `get(i, j, r)`: accuracy of client `i`'s head `r` under client `j`'s
/// label marginal.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossClientMatrix {
    pub num_clients: usize,
    pub num_heads: usize,
    data: Vec<f64>,
}

impl CrossClientMatrix {
    pub fn get(&self, i: usize, j: usize, head: usize) -> f64 {
        self.data[(i * self.num_clients + j) * self.num_heads + head]
    }
}

pub fn cross_client_matrix(
    models: &[ClientModel],
    test: &LabeledSet,
    marginals: &[Vec<f64>],
) -> Result<CrossClientMatrix> {
    let k = models.len();
    if marginals.len() != k {
        return Err(MhdError::Input(format!("{} marginals for {k} clients", marginals.len())));
    }
    let counts = models.iter().map(|m| class_counts(m, test)).collect::<Result<Vec<_>>>()?;
    let heads = counts.iter().map(ClassCounts::num_heads).min().unwrap_or(0);
    let mut data = Vec::with_capacity(k * k * heads);
    for c in &counts {
        for marginal in marginals {
            for h in 0..heads {
                data.push(c.weighted_accuracy(h, marginal));
            }
        }
    }
    Ok(CrossClientMatrix { num_clients: k, num_heads: heads, data })
}

/// Mean accuracy of one head over ordered client pairs at one distance.
#[derive(Debug, Clone, PartialEq)]
pub struct HopBucket {
    pub head: usize,
    /// `None` collects unreachable pairs.
    pub distance: Option<usize>,
    pub pairs: usize,
    pub mean_accuracy: f64,
}

/// Groups off-diagonal entries of `matrix` by the out-edge distance from
/// student `i` to data owner `j`.
pub fn hop_distance_report(matrix: &CrossClientMatrix, graph: &Graph) -> Vec<HopBucket> {
    let k = matrix.num_clients;
    let dist: Vec<Vec<Option<usize>>> = (0..k).map(|i| graph.distances_from(i)).collect();
    let mut keys: Vec<Option<usize>> = dist
        .iter()
        .enumerate()
        .flat_map(|(i, row)| row.iter().enumerate().filter(move |(j, _)| *j != i).map(|(_, d)| *d))
        .collect();
    // Reachable distances ascending, unreachable last.
    keys.sort_by_key(|d| d.map_or(usize::MAX, |v| v));
    keys.dedup();
    let mut out = Vec::new();
    for head in 0..matrix.num_heads {
        for &key in &keys {
            let mut sum = 0.0;
            let mut pairs = 0;
            for i in 0..k {
                for j in (0..k).filter(|&j| j != i && dist[i][j] == key) {
                    sum += matrix.get(i, j, head);
                    pairs += 1;
                }
            }
            out.push(HopBucket { head, distance: key, pairs, mean_accuracy: sum / pairs as f64 });
        }
    }
    out
}

pub fn hop_report_csv(buckets: &[HopBucket]) -> String {
    let mut s = String::from("head,distance,pairs,mean_accuracy\n");
    for b in buckets {
        let d = b.distance.map_or("unreachable".to_string(), |d| d.to_string());
        s.push_str(&format!("{},{},{},{:.6}\n", b.head, d, b.pairs, b.mean_accuracy));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::federation::{TopologyKind, TopologySpec};
    use crate::nn::{Architecture, Matrix};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn arch(d: usize) -> Architecture {
        Architecture { input_dim: 3, hidden: vec![6], embedding_dim: 4, num_classes: d, num_aux_heads: 1 }
    }

    fn random_set(rng: &mut ChaCha8Rng, n: usize, d: usize) -> LabeledSet {
        LabeledSet {
            features: Matrix::from_vec(n, 3, (0..3 * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
            labels: (0..n).map(|i| i % d).collect(),
            num_classes: d,
        }
    }

    #[test]
    fn constant_logits_score_one_over_d() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = ClientModel::init(&arch(4), 0, &mut rng).unwrap();
        m.main_head.weight.scale(0.0);
        let set = random_set(&mut rng, 40, 4);
        assert_eq!(evaluate(&m, &set).unwrap()[0], 0.25);
    }

    #[test]
    fn matches_brute_force_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = ClientModel::init(&arch(3), 0, &mut rng).unwrap();
        let set = random_set(&mut rng, 200, 3);
        let acc = evaluate(&m, &set).unwrap();
        for (h, &a) in acc.iter().enumerate() {
            let mut correct = 0;
            for r in 0..set.len() {
                let out = m.forward(&set.features.select_rows(&[r])).unwrap();
                let row = out.logits[h].row(0);
                let mut best = 0;
                for c in 1..row.len() {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                correct += usize::from(best == set.labels[r]);
            }
            assert_eq!(a, correct as f64 / set.len() as f64);
        }
    }

    #[test]
    fn empty_set_is_input_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = ClientModel::init(&arch(3), 0, &mut rng).unwrap();
        let set = LabeledSet { features: Matrix::zeros(0, 3), labels: vec![], num_classes: 3 };
        assert!(matches!(evaluate(&m, &set), Err(MhdError::Input(_))));
    }

    #[test]
    fn weighting_selects_classes() {
        let c = ClassCounts { correct: vec![vec![10, 0]], total: vec![10, 10] };
        assert_eq!(c.accuracy(0), 0.5);
        assert_eq!(c.weighted_accuracy(0, &[1.0, 0.0]), 1.0);
        assert_eq!(c.weighted_accuracy(0, &[0.25, 0.75]), 0.25);
    }

    fn uniform_matrix(k: usize) -> CrossClientMatrix {
        CrossClientMatrix { num_clients: k, num_heads: 1, data: vec![0.5; k * k] }
    }

    #[test]
    fn hop_buckets_follow_graph() {
        let g = TopologySpec::of(TopologyKind::Complete).build(4, 0, 0).unwrap();
        let r = hop_distance_report(&uniform_matrix(4), &g);
        assert_eq!(r.len(), 1);
        assert_eq!((r[0].distance, r[0].pairs), (Some(1), 12));

        let g = TopologySpec::of(TopologyKind::Cycle).build(4, 0, 0).unwrap();
        let r = hop_distance_report(&uniform_matrix(4), &g);
        let d: Vec<_> = r.iter().map(|b| b.distance).collect();
        assert_eq!(d, vec![Some(1), Some(2), Some(3)]);
        assert_eq!(r.iter().map(|b| b.pairs).sum::<usize>(), 12);

        let g = TopologySpec::islands(2).build(4, 0, 0).unwrap();
        let r = hop_distance_report(&uniform_matrix(4), &g);
        let d: Vec<_> = r.iter().map(|b| (b.distance, b.pairs)).collect();
        assert_eq!(d, vec![(Some(1), 4), (None, 8)]);
    }
}
