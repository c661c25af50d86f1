//! `run` and `eval`: one experiment and its artifacts.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use mhd_core::config::RunConfig;
use mhd_core::distill::LossBreakdown;
use mhd_core::federation::{build_dataset, evaluation_records, run_on_dataset_with, RunOptions, RunOutput};
use mhd_core::metrics::{
    embedding_probe, hop_report_csv, summarize, summary_csv, write_jsonl, CrossClientMatrix, MetricsRecord, ProbeConfig,
};
use mhd_core::nn::{checkpoint, ClientModel};

use crate::config_file;
use crate::failure::Failure;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CONFIG_FILE: &str = "config.toml";

pub fn checkpoint_path(dir: &Path, client: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("client_{client}.mhdc"))
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::other(format!("cannot write {}: {e}", path.display())))
}

fn cross_client_csv(m: &CrossClientMatrix) -> String {
    let mut s = String::from("student,data_owner,head,accuracy\n");
    for i in 0..m.num_clients {
        for j in 0..m.num_clients {
            for h in 0..m.num_heads {
                s.push_str(&format!("{i},{j},{h},{:.6}\n", m.get(i, j, h)));
            }
        }
    }
    s
}

/// Runs `cfg` and writes every artifact into `dir`. Metrics are streamed as
/// they are produced so a diverged run still leaves its history behind.
pub fn run_to_dir(cfg: &RunConfig, dir: &Path, opts: RunOptions) -> Result<RunOutput, Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::other(format!("cannot create {}: {e}", dir.display())))?;
    write(&dir.join(CONFIG_FILE), &config_file::to_toml(cfg)?)?;
    let data = build_dataset(cfg)?;

    let metrics_path = dir.join(METRICS_FILE);
    let mut sink = BufWriter::new(File::create(&metrics_path)?);
    let mut io_error: Option<std::io::Error> = None;
    let result = run_on_dataset_with(cfg, &data, opts, |r| {
        if io_error.is_none() {
            let line = write_jsonl(std::slice::from_ref(r)).expect("records serialize");
            if let Err(e) = sink.write_all(line.as_bytes()) {
                io_error = Some(e);
            }
        }
    });
    sink.flush()?;
    if let Some(e) = io_error {
        return Err(Failure::other(format!("cannot write {}: {e}", metrics_path.display())));
    }
    let out = result?;

    write(&dir.join(SUMMARY_FILE), &summary_csv(&summarize(&out.records)))?;
    write(&dir.join("comm_report.txt"), &out.comm.to_text())?;
    write(&dir.join("hop_report.csv"), &hop_report_csv(&out.hops))?;
    write(&dir.join("cross_client.csv"), &cross_client_csv(&out.cross))?;
    if cfg.output.write_checkpoints {
        fs::create_dir_all(dir.join("checkpoints"))?;
        for (i, m) in out.models.iter().enumerate() {
            checkpoint::save(m, &checkpoint_path(dir, i))?;
        }
    }
    if cfg.output.embedding_probe {
        let train = data.pooled_private();
        let test = data.shared_test();
        let mut s = String::from("client,probe_accuracy\n");
        for (i, m) in out.models.iter().enumerate() {
            let acc = embedding_probe(m, &train, &test, &ProbeConfig::default())?;
            s.push_str(&format!("{i},{acc:.6}\n"));
        }
        write(&dir.join("probe.csv"), &s)?;
    }
    Ok(out)
}

/// Final-step accuracy table printed after a run.
pub fn final_table(records: &[MetricsRecord]) -> String {
    let Some(last) = records.iter().map(|r| r.step).max() else {
        return String::from("no evaluations\n");
    };
    let mut s = format!("step {last}\nclient  head  beta_priv  beta_sh\n");
    for r in records.iter().filter(|r| r.step == last) {
        s.push_str(&format!("{:>6}  {:>4}  {:>9.4}  {:>7.4}\n", r.client, r.head, r.beta_priv, r.beta_sh));
    }
    s
}

/// Re-evaluates the checkpoints of a run directory against the dataset its
/// config describes. Returns one record per client and head.
pub fn eval_dir(dir: &Path, checkpoints: Option<&Path>) -> Result<Vec<MetricsRecord>, Failure> {
    let table = config_file::read_table(&dir.join(CONFIG_FILE))?;
    let cfg = config_file::to_config(&table)?;
    let data = build_dataset(&cfg)?;
    let ckpt_dir = checkpoints.map_or_else(|| dir.to_path_buf(), Path::to_path_buf);
    let k = cfg.partition.num_clients;
    let models = (0..k)
        .map(|i| {
            let p = if checkpoints.is_some() {
                ckpt_dir.join(format!("client_{i}.mhdc"))
            } else {
                checkpoint_path(&ckpt_dir, i)
            };
            checkpoint::load(&p).map_err(|e| Failure::other(format!("{}: {e}", p.display())))
        })
        .collect::<Result<Vec<ClientModel>, Failure>>()?;
    for (i, m) in models.iter().enumerate() {
        if m.architecture() != cfg.architecture(i) {
            return Err(Failure::config(format!(
                "checkpoint of client {i} does not match the architecture in {}",
                dir.join(CONFIG_FILE).display()
            )));
        }
    }
    let refs: Vec<&ClientModel> = models.iter().collect();
    let losses = vec![LossBreakdown { aux: vec![0.0; cfg.distill.num_aux_heads], ..Default::default() }; k];
    Ok(evaluation_records(&refs, &data, cfg.training.total_steps, &losses, &vec![0; k])?)
}
