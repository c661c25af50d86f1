//! `partition-stats`: label-assignment histogram and shard sizes.

use mhd_core::config::RunConfig;
use mhd_core::data::{assign_primary_labels, primary_count_histogram, AssignmentMode};
use mhd_core::federation::build_dataset;

use crate::failure::Failure;

/// Histogram buckets are 0..=MAX_BUCKET, the last one open-ended.
pub const MAX_BUCKET: usize = 4;

/// Mean primary-client-count histogram over `seeds` partition seeds,
/// starting at the configured one.
pub fn mean_histogram(cfg: &RunConfig, seeds: usize) -> Result<Vec<f64>, Failure> {
    let d = cfg.dataset.num_classes;
    let mut spec = cfg.partition_spec();
    spec.validate(d)?;
    let base = spec.seed;
    let mut sum = [0.0; MAX_BUCKET + 1];
    for i in 0..seeds.max(1) {
        spec.seed = base.wrapping_add(i as u64);
        let assign = assign_primary_labels(&spec, d)?;
        for (s, h) in sum.iter_mut().zip(primary_count_histogram(&assign, d, MAX_BUCKET)) {
            *s += h as f64;
        }
    }
    Ok(sum.iter().map(|s| s / seeds.max(1) as f64).collect())
}

pub fn report(cfg: &RunConfig, seeds: usize, shards: bool) -> Result<String, Failure> {
    let p = &cfg.partition;
    let mode = match p.assignment {
        AssignmentMode::Even => "even",
        AssignmentMode::Random => "random",
    };
    let mut s = format!(
        "clients {}  classes {}  primary labels per client {}  assignment {mode}\n\
         skewness {} (shapes shard sizes only, not the label assignment)\n\n",
        p.num_clients, cfg.dataset.num_classes, p.primary_labels_per_client, p.skewness
    );
    let hist = mean_histogram(cfg, seeds)?;
    s.push_str(&format!("primary clients per label, mean over {} seed(s)\n", seeds.max(1)));
    s.push_str("clients  labels\n");
    for (c, h) in hist.iter().enumerate() {
        let label = if c == MAX_BUCKET { format!(">={c}") } else { c.to_string() };
        s.push_str(&format!("{label:>7}  {h:.1}\n"));
    }
    if shards {
        let data = build_dataset(cfg)?;
        s.push_str(&format!(
            "\nshared test {}  public {}\nclient  samples  primary_share\n",
            data.test.len(),
            data.public.len()
        ));
        for i in 0..data.num_clients() {
            let shard = data.client_shard(i);
            let primary = &data.primary_labels[i];
            let on_primary = shard.labels.iter().filter(|l| primary.binary_search(l).is_ok()).count();
            let share = on_primary as f64 / shard.len().max(1) as f64;
            s.push_str(&format!("{i:>6}  {:>7}  {share:>13.3}\n", shard.len()));
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn even_mode_is_a_single_spike() {
        let mut cfg = RunConfig::default();
        cfg.partition.num_clients = 4;
        cfg.partition.primary_labels_per_client = 5;
        let h = mean_histogram(&cfg, 3).unwrap();
        assert_eq!(h, vec![0.0, 20.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn report_lists_every_client() {
        let mut cfg = RunConfig::default();
        cfg.dataset.samples_per_class = 40;
        let r = report(&cfg, 1, true).unwrap();
        assert!(r.contains("skewness 100"));
        // Histogram rows 0..=3 and one row per client; `>=4` starts with `>`.
        assert_eq!(r.lines().filter(|l| l.trim_start().starts_with(char::is_numeric)).count(), 4 + 4);
    }
}
