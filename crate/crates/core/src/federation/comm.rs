//! Byte accounting of what clients exchange. Values travel as f32, sample
//! ids as u32 and class indices of a top-k row as u16.

use serde::{Deserialize, Serialize};

use crate::distill::DistillConfig;
use crate::nn::Architecture;

const VALUE_BYTES: usize = 4;
const SAMPLE_ID_BYTES: usize = 4;
const CLASS_INDEX_BYTES: usize = 2;

/// Heads a student of `arch` needs from each teacher.
pub fn heads_needed(arch: &Architecture, cfg: &DistillConfig) -> usize {
    if cfg.nu_aux == 0.0 || arch.num_aux_heads == 0 {
        return 0;
    }
    let extra = usize::from(cfg.include_same_level);
    (arch.num_aux_heads + extra).min(arch.num_heads())
}

/// Bytes one teacher sends for one public sample.
pub fn mhd_bytes_per_sample(arch: &Architecture, cfg: &DistillConfig) -> usize {
    let emb = if cfg.nu_emb > 0.0 { arch.embedding_dim * VALUE_BYTES } else { 0 };
    let row = match cfg.top_k {
        k if k > 0 && k < arch.num_classes => k * (CLASS_INDEX_BYTES + VALUE_BYTES),
        _ => arch.num_classes * VALUE_BYTES,
    };
    let preds = heads_needed(arch, cfg) * row;
    if emb + preds == 0 {
        0
    } else {
        SAMPLE_ID_BYTES + emb + preds
    }
}

/// Bytes received by one client in one distillation step from `teachers`
/// teachers on a `public_batch`-sample batch.
pub fn mhd_bytes_per_step(arch: &Architecture, cfg: &DistillConfig, public_batch: usize, teachers: usize) -> usize {
    teachers * public_batch * mhd_bytes_per_sample(arch, cfg)
}

/// Upload plus download of the full parameter vector.
pub fn fedavg_bytes_per_round(arch: &Architecture) -> usize {
    2 * arch.num_params() * VALUE_BYTES
}

/// Per-exchange costs and realized tallies of one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CommReport {
    pub mode: String,
    pub num_params: usize,
    pub mhd_bytes_per_sample: usize,
    /// One client, one step, `delta` teachers.
    pub mhd_bytes_per_step: usize,
    /// One client, one averaging round.
    pub fedavg_bytes_per_round: usize,
    /// Prediction and embedding traffic, summed over clients.
    pub total_bytes: u64,
    /// Serialized snapshots moved into pools, summed over clients. This is
    /// simulation transport, not protocol traffic.
    pub snapshot_bytes: u64,
}

impl CommReport {
    pub fn new(mode: &str, arch: &Architecture, cfg: &DistillConfig, public_batch: usize) -> Self {
        Self {
            mode: mode.to_string(),
            num_params: arch.num_params(),
            mhd_bytes_per_sample: mhd_bytes_per_sample(arch, cfg),
            mhd_bytes_per_step: mhd_bytes_per_step(arch, cfg, public_batch, cfg.delta),
            fedavg_bytes_per_round: fedavg_bytes_per_round(arch),
            total_bytes: 0,
            snapshot_bytes: 0,
        }
    }

    /// FedAvg round cost over one MHD step cost; infinite when MHD sends
    /// nothing.
    pub fn ratio(&self) -> f64 {
        self.fedavg_bytes_per_round as f64 / self.mhd_bytes_per_step as f64
    }

    pub fn to_text(&self) -> String {
        format!(
            "mode                       {}\n\
             parameters per model       {}\n\
             mhd bytes per sample       {}\n\
             mhd bytes per step         {}\n\
             fedavg bytes per round     {}\n\
             fedavg/mhd per exchange    {:.2}\n\
             total protocol bytes       {}\n\
             snapshot transport bytes   {}\n",
            self.mode,
            self.num_params,
            self.mhd_bytes_per_sample,
            self.mhd_bytes_per_step,
            self.fedavg_bytes_per_round,
            self.ratio(),
            self.total_bytes,
            self.snapshot_bytes,
        )
    }
}
