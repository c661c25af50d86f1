//! Directed communication graphs. An edge `i -> j` means client `i` may
//! pull snapshots of client `j` into its pool, so `j` is a teacher of `i`.

use std::collections::VecDeque;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{MhdError, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    Complete,
    /// `i -> (i + 1) mod K`.
    Cycle,
    /// `i -> i + 1`; the last client has no teachers.
    Chain,
    /// Complete graphs within consecutive groups of `group_size` clients.
    Islands,
    /// Explicit edge list.
    Custom,
    /// Every client draws `out_degree` distinct teachers.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TopologySpec {
    pub kind: TopologyKind,
    pub group_size: usize,
    pub edges: Vec<[usize; 2]>,
    pub out_degree: usize,
    /// Redraw a `random` graph at every step instead of once per run.
    pub dynamic: bool,
}

impl Default for TopologySpec {
    fn default() -> Self {
        Self { kind: TopologyKind::Complete, group_size: 2, edges: Vec::new(), out_degree: 1, dynamic: false }
    }
}

impl TopologySpec {
    pub fn of(kind: TopologyKind) -> Self {
        Self { kind, ..Self::default() }
    }

    pub fn islands(group_size: usize) -> Self {
        Self { kind: TopologyKind::Islands, group_size, ..Self::default() }
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        match self.kind {
            TopologyKind::Islands if self.group_size == 0 || !k.is_multiple_of(self.group_size) => {
                Err(MhdError::config("topology.group_size", format!("must be positive and divide the {k} clients")))
            }
            TopologyKind::Custom => {
                for &[a, b] in &self.edges {
                    if a >= k || b >= k {
                        return Err(MhdError::config(
                            "topology.edges",
                            format!("edge [{a}, {b}] references a client outside 0..{k}"),
                        ));
                    }
                    if a == b {
                        return Err(MhdError::config("topology.edges", format!("self-loop [{a}, {a}] is not allowed")));
                    }
                }
                Ok(())
            }
            TopologyKind::Random if self.out_degree == 0 || self.out_degree >= k.max(1) => {
                Err(MhdError::config("topology.out_degree", format!("must be in 1..{k}")))
            }
            _ if self.dynamic && self.kind != TopologyKind::Random => {
                Err(MhdError::config("topology.dynamic", "only a random topology can be dynamic"))
            }
            _ => Ok(()),
        }
    }

    /// Graph in effect at `step`. Static kinds ignore the step.
    pub fn build(&self, k: usize, seed: u64, step: usize) -> Result<Graph> {
        self.validate(k)?;
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); k];
        match self.kind {
            TopologyKind::Complete => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = (0..k).filter(|&j| j != i).collect();
                }
            }
            TopologyKind::Cycle => {
                if k > 1 {
                    for (i, o) in out.iter_mut().enumerate() {
                        o.push((i + 1) % k);
                    }
                }
            }
            TopologyKind::Chain => {
                for (i, o) in out.iter_mut().enumerate().take(k.saturating_sub(1)) {
                    o.push(i + 1);
                }
            }
            TopologyKind::Islands => {
                let g = self.group_size;
                for (i, o) in out.iter_mut().enumerate() {
                    let base = i / g * g;
                    *o = (base..base + g).filter(|&j| j != i).collect();
                }
            }
            TopologyKind::Custom => {
                for &[a, b] in &self.edges {
                    if !out[a].contains(&b) {
                        out[a].push(b);
                    }
                }
                out.iter_mut().for_each(|o| o.sort_unstable());
            }
            TopologyKind::Random => {
                let draw = if self.dynamic { step as u64 } else { 0 };
                for (i, o) in out.iter_mut().enumerate() {
                    let mut r = rng::stream(seed, "topology", draw * k as u64 + i as u64);
                    let mut picks: Vec<usize> = sample(&mut r, k - 1, self.out_degree)
                        .into_iter()
                        .map(|j| if j >= i { j + 1 } else { j })
                        .collect();
                    picks.sort_unstable();
                    *o = picks;
                }
            }
        }
        Ok(Graph { out })
    }
}

/// Adjacency lists of a directed graph without self-loops.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    out: Vec<Vec<usize>>,
}

impl Graph {
    pub fn from_out_edges(out: Vec<Vec<usize>>) -> Result<Self> {
        let k = out.len();
        for (i, o) in out.iter().enumerate() {
            if o.iter().any(|&j| j >= k || j == i) {
                return Err(MhdError::Input(format!("invalid out-edges for client {i}")));
            }
        }
        Ok(Self { out })
    }

    pub fn num_clients(&self) -> usize {
        self.out.len()
    }

    pub fn out_neighbors(&self, i: usize) -> &[usize] {
        &self.out[i]
    }

    pub fn num_edges(&self) -> usize {
        self.out.iter().map(Vec::len).sum()
    }

    /// Hop counts along out-edges from `src`; `None` where unreachable.
    pub fn distances_from(&self, src: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.out.len()];
        dist[src] = Some(0);
        let mut queue = VecDeque::from([src]);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].expect("queued nodes have a distance");
            for &v in &self.out[u] {
                if dist[v].is_none() {
                    dist[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_shapes() {
        let g = TopologySpec::of(TopologyKind::Complete).build(4, 0, 0).unwrap();
        assert_eq!(g.out_neighbors(2), &[0, 1, 3]);
        let g = TopologySpec::of(TopologyKind::Cycle).build(4, 0, 0).unwrap();
        assert_eq!(g.out_neighbors(3), &[0]);
        let g = TopologySpec::of(TopologyKind::Chain).build(3, 0, 0).unwrap();
        assert_eq!((g.out_neighbors(0), g.out_neighbors(2)), (&[1][..], &[][..]));
        let g = TopologySpec::islands(2).build(4, 0, 0).unwrap();
        assert_eq!((g.out_neighbors(0), g.out_neighbors(3)), (&[1][..], &[2][..]));
    }

    #[test]
    fn cycle_distances() {
        let g = TopologySpec::of(TopologyKind::Cycle).build(4, 0, 0).unwrap();
        assert_eq!(g.distances_from(0), vec![Some(0), Some(1), Some(2), Some(3)]);
        let g = TopologySpec::islands(2).build(4, 0, 0).unwrap();
        assert_eq!(g.distances_from(0), vec![Some(0), Some(1), None, None]);
    }

    #[test]
    fn invalid_specs_name_their_key() {
        let bad = TopologySpec { kind: TopologyKind::Custom, edges: vec![[0, 0]], ..Default::default() };
        assert!(matches!(bad.validate(3), Err(MhdError::Config { key, .. }) if key == "topology.edges"));
        assert!(matches!(
            TopologySpec::islands(3).validate(4),
            Err(MhdError::Config { key, .. }) if key == "topology.group_size"
        ));
    }

    #[test]
    fn random_graphs_have_no_self_loops_and_fixed_degree() {
        let spec = TopologySpec { kind: TopologyKind::Random, out_degree: 2, dynamic: true, ..Default::default() };
        for step in 0..20 {
            let g = spec.build(5, 3, step).unwrap();
            for i in 0..5 {
                assert_eq!(g.out_neighbors(i).len(), 2);
                assert!(!g.out_neighbors(i).contains(&i));
            }
        }
        assert_ne!(spec.build(5, 3, 0).unwrap(), spec.build(5, 3, 1).unwrap());
    }
}
