//! `sweep`: a Cartesian grid of overrides, one run directory per point.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use mhd_core::config::RunConfig;
use mhd_core::federation::RunOptions;
use mhd_core::metrics::MetricsRecord;
use mhd_core::rng::derive_config_seed;
use toml::{Table, Value};

use crate::config_file::{self, parse_value, set_key};
use crate::failure::Failure;
use crate::run::run_to_dir;

#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub key: String,
    pub values: Vec<Value>,
}

/// Splits on commas outside brackets, so `hidden=[8,8],[16,16]` has two values.
fn split_values(raw: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let (mut depth, mut start) = (0i32, 0);
    for (i, ch) in raw.char_indices() {
        match ch {
            '[' | '{' => depth += 1,
            ']' | '}' => depth -= 1,
            ',' if depth == 0 => {
                out.push(raw[start..i].trim());
                start = i + 1;
            }
            _ => {}
        }
    }
    out.push(raw[start..].trim());
    out
}

/// Parses `key=v1,v2,...`.
pub fn parse_axis(s: &str) -> Result<Axis, Failure> {
    let (key, raw) =
        s.split_once('=').ok_or_else(|| Failure::config(format!("axis `{s}` is not of the form key=v1,v2")))?;
    let key = key.trim().to_string();
    let parts = split_values(raw);
    if key.is_empty() || parts.iter().any(|p| p.is_empty()) {
        return Err(Failure::config(format!("axis `{s}` has an empty key or value")));
    }
    Ok(Axis { key, values: parts.into_iter().map(parse_value).collect() })
}

/// Every combination of axis values; the first axis varies slowest.
pub fn grid(axes: &[Axis]) -> Vec<Vec<(String, Value)>> {
    let mut points: Vec<Vec<(String, Value)>> = vec![Vec::new()];
    for axis in axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                axis.values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((axis.key.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    points
}

fn coords_label(coords: &[(String, Value)]) -> String {
    coords.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";")
}

/// Seed of a grid point: the master seed hashed with its coordinates. A
/// point without coordinates, or one that sets `seed` itself, keeps it.
pub fn point_seed(master: u64, coords: &[(String, Value)]) -> u64 {
    if coords.is_empty() || coords.iter().any(|(k, _)| k == "seed") {
        return master;
    }
    derive_config_seed(master, &format!("sweep/{}", coords_label(coords)))
}

#[derive(Debug, Clone)]
pub struct PointResult {
    pub index: usize,
    pub dir: PathBuf,
    pub coords: Vec<(String, Value)>,
    pub seed: u64,
    pub outcome: Result<Vec<MetricsRecord>, Failure>,
}

/// Grid coordinates with the config they produce.
pub type PlannedPoint = (Vec<(String, Value)>, Result<RunConfig, Failure>);

/// Builds the config of every grid point. Keys that do not exist or values
/// of the wrong type are rejected before anything runs; values that fail
/// validation become failures of their point.
pub fn plan(base: &Table, axes: &[Axis]) -> Result<Vec<PlannedPoint>, Failure> {
    let base_cfg = config_file::deserialize(base)?;
    base_cfg.validate()?;
    // Data seeds are pinned to the master seed so every point sees the
    // same dataset and partition.
    let mut pinned = base.clone();
    let r = base_cfg.resolved();
    set_key(&mut pinned, "dataset.seed", Value::Integer(seed_value(r.dataset.seed)?))?;
    set_key(&mut pinned, "partition.seed", Value::Integer(seed_value(r.partition.seed)?))?;
    for axis in axes {
        for v in &axis.values {
            let mut t = pinned.clone();
            set_key(&mut t, &axis.key, v.clone())?;
            config_file::deserialize(&t).map_err(|e| Failure::config(format!("axis `{}`: {}", axis.key, e.message)))?;
        }
    }
    grid(axes)
        .into_iter()
        .map(|coords| {
            let mut t = pinned.clone();
            for (k, v) in &coords {
                set_key(&mut t, k, v.clone())?;
            }
            let mut cfg = config_file::deserialize(&t)?;
            cfg.seed = point_seed(base_cfg.seed, &coords);
            let checked = cfg.validate().map(|_| cfg).map_err(Failure::from);
            Ok((coords, checked))
        })
        .collect()
}

fn seed_value(seed: Option<u64>) -> Result<i64, Failure> {
    let s = seed.expect("resolved config has explicit seeds");
    i64::try_from(s).map_err(|_| Failure::config(format!("seed {s} exceeds {}", i64::MAX)))
}

/// Runs every point, `jobs` at a time. Results come back in grid order.
pub fn run_sweep(
    base: &Table,
    axes: &[Axis],
    out_dir: &Path,
    opts: RunOptions,
    jobs: usize,
    mut progress: impl FnMut(&PointResult) + Send,
) -> Result<Vec<PointResult>, Failure> {
    let points = plan(base, axes)?;
    std::fs::create_dir_all(out_dir)?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<PointResult>>> = Mutex::new(vec![None; points.len()]);
    let progress = Mutex::new(&mut progress);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some((coords, cfg)) = points.get(i) else { break };
        let dir = out_dir.join(format!("point_{i:03}"));
        let (seed, outcome) = match cfg {
            Ok(cfg) => (cfg.seed, run_to_dir(cfg, &dir, opts).map(|o| o.records)),
            Err(e) => (0, Err(e.clone())),
        };
        let r = PointResult { index: i, dir, coords: coords.clone(), seed, outcome };
        (progress.lock().expect("progress lock"))(&r);
        results.lock().expect("results lock")[i] = Some(r);
    };
    std::thread::scope(|s| {
        for _ in 1..jobs.max(1).min(points.len()) {
            s.spawn(worker);
        }
        worker();
    });
    let results = results.into_inner().expect("results lock");
    Ok(results.into_iter().map(|r| r.expect("every point ran")).collect())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// One row per point with final-step accuracy of every head, averaged over
/// clients: shared-test columns first, then private-weighted ones.
pub fn aggregate_csv(axes: &[Axis], results: &[PointResult]) -> String {
    let heads = results
        .iter()
        .filter_map(|r| r.outcome.as_ref().ok())
        .flat_map(|recs| recs.iter().map(|x| x.head + 1))
        .max()
        .unwrap_or(0);
    let mut s = String::from("point");
    for a in axes {
        s.push(',');
        s.push_str(&csv_field(&a.key));
    }
    s.push_str(",seed,status");
    for h in 0..heads {
        s.push_str(&format!(",beta_sh_h{h}"));
    }
    for h in 0..heads {
        s.push_str(&format!(",beta_priv_h{h}"));
    }
    s.push('\n');
    for r in results {
        s.push_str(&format!("{}", r.index));
        for (_, v) in &r.coords {
            s.push(',');
            s.push_str(&csv_field(&v.to_string()));
        }
        s.push_str(&format!(",{}", r.seed));
        match &r.outcome {
            Ok(recs) => {
                s.push_str(",ok");
                let last = recs.iter().map(|x| x.step).max().unwrap_or(0);
                let mean = |h: usize, f: fn(&MetricsRecord) -> f64| {
                    let v: Vec<f64> = recs.iter().filter(|x| x.step == last && x.head == h).map(f).collect();
                    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
                };
                for f in [(|x: &MetricsRecord| x.beta_sh) as fn(&MetricsRecord) -> f64, |x| x.beta_priv] {
                    for h in 0..heads {
                        match mean(h, f) {
                            Some(m) => s.push_str(&format!(",{m:.6}")),
                            None => s.push(','),
                        }
                    }
                }
            }
            Err(e) => {
                s.push_str(&format!(",exit {}", e.code));
                s.push_str(&",".repeat(2 * heads));
            }
        }
        s.push('\n');
    }
    s
}

/// Failed points with their messages, empty when all succeeded.
pub fn failure_report(results: &[PointResult]) -> String {
    results
        .iter()
        .filter_map(|r| {
            r.outcome
                .as_ref()
                .err()
                .map(|e| format!("point {} [{}] exit {}: {}\n", r.index, coords_label(&r.coords), e.code, e.message))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_values_split_outside_brackets() {
        let a = parse_axis("model.hidden=[8,8],[16, 16]").unwrap();
        assert_eq!(a.values.len(), 2);
        let b = parse_axis("distill.nu_aux=0,1,3,10").unwrap();
        assert_eq!(b.values, vec![Value::Integer(0), Value::Integer(1), Value::Integer(3), Value::Integer(10)]);
        assert!(parse_axis("distill.nu_aux").is_err());
        assert!(parse_axis("distill.nu_aux=1,,2").is_err());
    }

    #[test]
    fn grid_is_the_cartesian_product_in_order() {
        let axes = vec![parse_axis("a=1,2").unwrap(), parse_axis("b=x,y,z").unwrap()];
        let g = grid(&axes);
        assert_eq!(g.len(), 6);
        assert_eq!(coords_label(&g[0]), "a=1;b=\"x\"");
        assert_eq!(coords_label(&g[5]), "a=2;b=\"z\"");
        assert_eq!(grid(&[]), vec![Vec::new()]);
    }

    #[test]
    fn point_seeds_are_distinct_and_reproducible() {
        let g = grid(&[parse_axis("distill.nu_aux=0,1,3,10").unwrap()]);
        let seeds: Vec<u64> = g.iter().map(|c| point_seed(7, c)).collect();
        let mut unique = seeds.clone();
        unique.sort_unstable();
        unique.dedup();
        assert_eq!(unique.len(), 4);
        assert_eq!(seeds, g.iter().map(|c| point_seed(7, c)).collect::<Vec<_>>());
        assert_eq!(point_seed(7, &[]), 7);
        assert_eq!(point_seed(7, &[("seed".into(), Value::Integer(3))]), 7);
    }

    #[test]
    fn unknown_axis_keys_fail_before_running() {
        let e = plan(&Table::new(), &[parse_axis("distill.bogus=1,2").unwrap()]).unwrap_err();
        assert_eq!(e.code, 2);
        assert!(e.message.contains("distill.bogus"), "{}", e.message);
    }

    #[test]
    fn invalid_values_fail_only_their_point() {
        let p = plan(&Table::new(), &[parse_axis("distill.nu_aux=1,-1").unwrap()]).unwrap();
        assert!(p[0].1.is_ok());
        assert_eq!(p[1].1.as_ref().unwrap_err().code, 2);
    }

    #[test]
    fn points_share_the_data_seeds() {
        let p = plan(&Table::new(), &[parse_axis("distill.nu_aux=1,3").unwrap()]).unwrap();
        let a = p[0].1.as_ref().unwrap();
        let b = p[1].1.as_ref().unwrap();
        assert_ne!(a.seed, b.seed);
        assert_eq!(a.dataset_spec().seed, b.dataset_spec().seed);
        assert_eq!(a.partition_spec().seed, b.partition_spec().seed);
        assert_eq!(a.dataset_spec().seed, RunConfig::default().dataset_spec().seed);
    }
}
