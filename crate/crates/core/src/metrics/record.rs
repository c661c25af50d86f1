use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One evaluation of one head of one client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub client: usize,
    /// 0 is the main head.
    pub head: usize,
    pub beta_priv: f64,
    pub beta_sh: f64,
    /// Mean per-step losses since the previous evaluation.
    pub loss_ce: f64,
    pub loss_emb: f64,
    pub loss_aux: f64,
    pub loss_total: f64,
    /// Cumulative protocol bytes received by the client.
    pub bytes_communicated: u64,
}

pub fn write_jsonl(records: &[MetricsRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

/// Cross-client statistics of one head at the final evaluation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub step: usize,
    pub head: usize,
    pub clients: usize,
    pub beta_priv_mean: f64,
    pub beta_priv_std: f64,
    pub beta_sh_mean: f64,
    pub beta_sh_std: f64,
    pub beta_sh_min: f64,
    pub beta_sh_max: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// One row per head at the last step present in `records`.
pub fn summarize(records: &[MetricsRecord]) -> Vec<SummaryRow> {
    let Some(last) = records.iter().map(|r| r.step).max() else {
        return Vec::new();
    };
    let heads = records.iter().map(|r| r.head).max().map_or(0, |h| h + 1);
    (0..heads)
        .filter_map(|head| {
            let rows: Vec<&MetricsRecord> = records.iter().filter(|r| r.step == last && r.head == head).collect();
            if rows.is_empty() {
                return None;
            }
            let sh: Vec<f64> = rows.iter().map(|r| r.beta_sh).collect();
            let pr: Vec<f64> = rows.iter().map(|r| r.beta_priv).collect();
            let (sh_mean, sh_std) = mean_std(&sh);
            let (pr_mean, pr_std) = mean_std(&pr);
            Some(SummaryRow {
                step: last,
                head,
                clients: rows.len(),
                beta_priv_mean: pr_mean,
                beta_priv_std: pr_std,
                beta_sh_mean: sh_mean,
                beta_sh_std: sh_std,
                beta_sh_min: sh.iter().copied().fold(f64::INFINITY, f64::min),
                beta_sh_max: sh.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            })
        })
        .collect()
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from(
        "step,head,clients,beta_priv_mean,beta_priv_std,beta_sh_mean,beta_sh_std,beta_sh_min,beta_sh_max\n",
    );
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.step,
            r.head,
            r.clients,
            r.beta_priv_mean,
            r.beta_priv_std,
            r.beta_sh_mean,
            r.beta_sh_std,
            r.beta_sh_min,
            r.beta_sh_max
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(step: usize, client: usize, head: usize, sh: f64) -> MetricsRecord {
        MetricsRecord {
            step,
            client,
            head,
            beta_priv: sh,
            beta_sh: sh,
            loss_ce: 0.0,
            loss_emb: 0.0,
            loss_aux: 0.0,
            loss_total: 0.0,
            bytes_communicated: 0,
        }
    }

    #[test]
    fn summary_uses_last_step_only() {
        let r = vec![rec(10, 0, 0, 0.0), rec(20, 0, 0, 0.4), rec(20, 1, 0, 0.6), rec(20, 0, 1, 0.1)];
        let s = summarize(&r);
        assert_eq!(s.len(), 2);
        assert!((s[0].beta_sh_mean - 0.5).abs() < 1e-15);
        assert!((s[0].beta_sh_std - 0.1).abs() < 1e-15);
        assert_eq!((s[0].beta_sh_min, s[0].beta_sh_max), (0.4, 0.6));
        assert_eq!(s[1].clients, 1);
    }

    #[test]
    fn jsonl_round_trips() {
        let r = vec![rec(1, 0, 0, 0.1 + 0.2)];
        let text = write_jsonl(&r).unwrap();
        let back: MetricsRecord = serde_json::from_str(text.trim_end()).unwrap();
        assert_eq!(back, r[0]);
    }
}
