use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, TrainingMode};
use crate::data::{generate_dataset, partition, LabeledSet, PartitionedDataset};
use crate::distill::{distill_step, local_ce, DistillConfig, LossBreakdown, StepLoss, TeacherOutputs};
use crate::error::{MhdError, Result};
use crate::federation::comm::{self, CommReport};
use crate::federation::fedavg::fedavg_round;
use crate::federation::pool::CheckpointPool;
use crate::federation::topology::Graph;
use crate::metrics::{
    class_counts, cross_client_matrix, hop_distance_report, CrossClientMatrix, HopBucket, MetricsRecord,
};
use crate::nn::{checkpoint, sgd_step, ClientModel, Matrix, OptState};
use crate::rng;

pub fn build_dataset(cfg: &RunConfig) -> Result<PartitionedDataset> {
    let source = generate_dataset(&cfg.dataset_spec())?;
    let data = partition(source, &cfg.partition_spec())?;
    if let Some(i) = data.private.iter().position(Vec::is_empty) {
        return Err(MhdError::config("partition.num_clients", format!("client {i} received no private samples")));
    }
    if data.public.is_empty() {
        return Err(MhdError::config("partition.public_fraction", "public split is empty"));
    }
    Ok(data)
}

/// Mutable state of one participant.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub model: ClientModel,
    pub opt: OptState,
    pub pool: CheckpointPool,
    pub shard: LabeledSet,
    pub bytes_received: u64,
    private_rng: ChaCha8Rng,
    public_rng: ChaCha8Rng,
    teacher_rng: ChaCha8Rng,
    select_rng: ChaCha8Rng,
    pool_rng: ChaCha8Rng,
    loss_sum: LossBreakdown,
    loss_steps: usize,
}

impl ClientState {
    fn new(cfg: &RunConfig, id: usize, shard: LabeledSet, opt_steps: usize) -> Result<Self> {
        let seed = cfg.seed;
        let stream = |purpose: &str| rng::stream(seed, purpose, id as u64);
        let model = ClientModel::init(&cfg.architecture(id), id, &mut stream("init"))?;
        let o = &cfg.optimizer;
        let opt = OptState::new(&model, o.learning_rate, o.momentum, opt_steps);
        Ok(Self {
            pool: CheckpointPool::new(id, cfg.pool_size(), cfg.training.pool_interval),
            loss_sum: LossBreakdown { aux: vec![0.0; model.aux_heads.len()], ..Default::default() },
            model,
            opt,
            shard,
            bytes_received: 0,
            private_rng: stream("private"),
            public_rng: stream("public"),
            teacher_rng: stream("teachers"),
            select_rng: stream("select"),
            pool_rng: stream("pool"),
            loss_steps: 0,
        })
    }

    fn record_loss(&mut self, l: &LossBreakdown) {
        self.loss_sum.ce += l.ce;
        self.loss_sum.emb += l.emb;
        for (a, b) in self.loss_sum.aux.iter_mut().zip(&l.aux) {
            *a += b;
        }
        self.loss_steps += 1;
    }

    fn take_mean_loss(&mut self) -> LossBreakdown {
        let n = self.loss_steps.max(1) as f64;
        let zero = LossBreakdown { aux: vec![0.0; self.loss_sum.aux.len()], ..Default::default() };
        let s = std::mem::replace(&mut self.loss_sum, zero);
        self.loss_steps = 0;
        LossBreakdown { ce: s.ce / n, emb: s.emb / n, aux: s.aux.iter().map(|a| a / n).collect() }
    }
}

fn sample_rows<R: Rng + ?Sized>(n: usize, count: usize, rng: &mut R) -> Vec<usize> {
    (0..count).map(|_| rng.random_range(0..n)).collect()
}

fn check_finite(l: &StepLoss, client: usize, step: usize) -> Result<()> {
    if l.loss.total().is_finite() && l.grads.tensors.iter().flatten().all(|g| g.is_finite()) {
        Ok(())
    } else {
        Err(MhdError::Divergence { client, step, detail: format!("non-finite loss or gradient ({:?})", l.loss) })
    }
}

/// Batches and teacher outputs consumed by one local step.
#[derive(Debug, Clone, Copy)]
pub struct StepInputs<'a> {
    pub private_x: &'a Matrix,
    pub private_y: &'a [usize],
    pub public: &'a Matrix,
    pub teachers: &'a [TeacherOutputs],
    pub step: usize,
}

/// One local step of an MHD client: private cross-entropy plus distillation
/// from the teachers on the public batch.
pub fn train_step<R: Rng + ?Sized>(
    model: &mut ClientModel,
    opt: &mut OptState,
    inputs: &StepInputs<'_>,
    cfg: &DistillConfig,
    interleave: bool,
    select_rng: &mut R,
) -> Result<LossBreakdown> {
    let step = inputs.step;
    let mut ce = local_ce(model, inputs.private_x, inputs.private_y)?;
    check_finite(&ce, model.client_id, step)?;
    if interleave {
        sgd_step(model, &ce.grads, opt)?;
        if let Some(d) = distill_step(model, inputs.public, inputs.teachers, cfg, select_rng)? {
            check_finite(&d, model.client_id, step)?;
            sgd_step(model, &d.grads, opt)?;
            ce.loss.emb = d.loss.emb;
            ce.loss.aux = d.loss.aux;
        }
    } else {
        if let Some(d) = distill_step(model, inputs.public, inputs.teachers, cfg, select_rng)? {
            check_finite(&d, model.client_id, step)?;
            ce.grads.accumulate(&d.grads)?;
            ce.loss.emb = d.loss.emb;
            ce.loss.aux = d.loss.aux;
        }
        sgd_step(model, &ce.grads, opt)?;
    }
    Ok(ce.loss)
}

/// Execution options that never change results.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Steps clients on scoped threads. Within a global step clients share
    /// no mutable state, so the output equals sequential execution.
    pub parallel_clients: bool,
}

struct StepContext<'a> {
    cfg: &'a RunConfig,
    public: &'a Matrix,
    batch_size: usize,
    step: usize,
}

/// Advances one client by a single local step and returns the bytes it received.
fn client_step(c: &mut ClientState, ctx: &StepContext<'_>) -> Result<u64> {
    let cfg = ctx.cfg;
    let dcfg = &cfg.distill;
    let rows = sample_rows(c.shard.len(), ctx.batch_size, &mut c.private_rng);
    let x = c.shard.features.select_rows(&rows);
    let y: Vec<usize> = rows.iter().map(|&r| c.shard.labels[r]).collect();
    let mut sent = 0;
    let loss = if cfg.training.mode == TrainingMode::Mhd && dcfg.is_active() && !c.pool.is_empty() {
        let picks: Vec<ClientModel> =
            c.pool.sample_teachers(dcfg.delta, &mut c.teacher_rng).into_iter().map(|e| e.model.clone()).collect();
        let rows = sample_rows(ctx.public.rows(), cfg.optimizer.public_batch_size, &mut c.public_rng);
        let pub_x = ctx.public.select_rows(&rows);
        let teachers = picks
            .iter()
            .map(|m| TeacherOutputs::from_model(m, &pub_x, dcfg.temperature))
            .collect::<Result<Vec<_>>>()?;
        sent = comm::mhd_bytes_per_step(&c.model.architecture(), dcfg, rows.len(), teachers.len()) as u64;
        let inputs = StepInputs { private_x: &x, private_y: &y, public: &pub_x, teachers: &teachers, step: ctx.step };
        train_step(&mut c.model, &mut c.opt, &inputs, dcfg, cfg.training.interleave, &mut c.select_rng)?
    } else {
        let l = local_ce(&c.model, &x, &y)?;
        check_finite(&l, c.model.client_id, ctx.step)?;
        sgd_step(&mut c.model, &l.grads, &mut c.opt)?;
        l.loss
    };
    c.bytes_received += sent;
    c.record_loss(&loss);
    Ok(sent)
}

fn step_all(clients: &mut [ClientState], ctx: &StepContext<'_>, parallel: bool) -> Result<u64> {
    let sent: Vec<u64> = if parallel && clients.len() > 1 {
        std::thread::scope(|s| {
            let handles: Vec<_> = clients.iter_mut().map(|c| s.spawn(move || client_step(c, ctx))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|e| std::panic::resume_unwind(e)))
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        clients.iter_mut().map(|c| client_step(c, ctx)).collect::<Result<Vec<_>>>()?
    };
    Ok(sent.iter().sum())
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<MetricsRecord>,
    pub models: Vec<ClientModel>,
    pub comm: CommReport,
    pub cross: CrossClientMatrix,
    pub hops: Vec<HopBucket>,
}

impl RunOutput {
    /// Mean shared accuracy of `head` across clients at the final step.
    pub fn final_beta_sh(&self, head: usize) -> f64 {
        let last = self.records.iter().map(|r| r.step).max().unwrap_or(0);
        let v: Vec<f64> = self.records.iter().filter(|r| r.step == last && r.head == head).map(|r| r.beta_sh).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }
}

/// Metrics of every head of every client. `models[i]` is evaluated as
/// client `i`; pass the same model repeatedly for pooled training.
pub fn evaluation_records(
    models: &[&ClientModel],
    data: &PartitionedDataset,
    step: usize,
    losses: &[LossBreakdown],
    bytes: &[u64],
) -> Result<Vec<MetricsRecord>> {
    let test = data.shared_test();
    let mut out = Vec::new();
    for (i, model) in models.iter().enumerate() {
        let counts = class_counts(model, &test)?;
        let marginal = data.label_marginal(i);
        let l = &losses[i];
        for head in 0..counts.num_heads() {
            out.push(MetricsRecord {
                step,
                client: i,
                head,
                beta_priv: counts.weighted_accuracy(head, &marginal),
                beta_sh: counts.accuracy(head),
                loss_ce: l.ce,
                loss_emb: l.emb,
                loss_aux: l.aux_total(),
                loss_total: l.total(),
                bytes_communicated: bytes[i],
            });
        }
    }
    Ok(out)
}

pub fn run_experiment(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let data = build_dataset(cfg)?;
    run_on_dataset(cfg, &data, |_| {})
}

/// Runs the configured mode sequentially on a prepared dataset.
pub fn run_on_dataset(
    cfg: &RunConfig,
    data: &PartitionedDataset,
    on_record: impl FnMut(&MetricsRecord),
) -> Result<RunOutput> {
    run_on_dataset_with(cfg, data, RunOptions::default(), on_record)
}

/// Runs the configured mode on a prepared dataset, calling `on_record` for
/// each metrics record as soon as it is produced.
pub fn run_on_dataset_with(
    cfg: &RunConfig,
    data: &PartitionedDataset,
    opts: RunOptions,
    mut on_record: impl FnMut(&MetricsRecord),
) -> Result<RunOutput> {
    cfg.validate()?;
    let k = cfg.partition.num_clients;
    if data.num_clients() != k {
        return Err(MhdError::Input(format!("dataset has {} clients, config {k}", data.num_clients())));
    }
    let t_total = cfg.training.total_steps;
    let mode = cfg.training.mode;
    let opt_steps = if cfg.training.interleave && mode == TrainingMode::Mhd { 2 * t_total } else { t_total };
    let mut clients = (0..k)
        .map(|i| {
            let shard =
                if mode == TrainingMode::PooledSupervised { data.pooled_private() } else { data.client_shard(i) };
            ClientState::new(cfg, i, shard, opt_steps)
        })
        .collect::<Result<Vec<_>>>()?;
    // Pooled training uses only the first state; its shard is the union.
    if mode == TrainingMode::PooledSupervised {
        clients.truncate(1);
    }
    // Pooled training sees the samples of all clients per step.
    let batch_size =
        if mode == TrainingMode::PooledSupervised { k * cfg.optimizer.batch_size } else { cfg.optimizer.batch_size };
    let public = data.public_features();
    let mut comm = CommReport::new(mode.as_str(), &cfg.architecture(0), &cfg.distill, cfg.optimizer.public_batch_size);
    let mut records = Vec::new();
    let mut graph: Graph = cfg.topology.build(k, cfg.seed, 0)?;

    for t in 0..t_total {
        if mode == TrainingMode::Mhd && t > 0 && t % cfg.training.pool_interval == 0 {
            if cfg.topology.dynamic {
                graph = cfg.topology.build(k, cfg.seed, t)?;
            }
            let snapshots: Vec<Vec<u8>> = clients.iter().map(|c| checkpoint::encode(&c.model)).collect();
            for c in clients.iter_mut() {
                if let Some(b) = c.pool.update(&graph, &snapshots, t, &mut c.pool_rng)? {
                    comm.snapshot_bytes += b as u64;
                }
            }
        }
        let ctx = StepContext { cfg, public: &public, batch_size, step: t };
        comm.total_bytes += step_all(&mut clients, &ctx, opts.parallel_clients)?;
        if mode == TrainingMode::Fedavg && (t + 1) % cfg.training.fedavg_interval == 0 {
            let (mut models, mut opts): (Vec<ClientModel>, Vec<OptState>) =
                clients.iter().map(|c| (c.model.clone(), c.opt.clone())).unzip();
            fedavg_round(&mut models, &mut opts)?;
            let per_round = comm::fedavg_bytes_per_round(&models[0].architecture()) as u64;
            for ((c, m), o) in clients.iter_mut().zip(models).zip(opts) {
                c.model = m;
                c.opt = o;
                c.bytes_received += per_round;
                comm.total_bytes += per_round;
            }
        }
        let done = t + 1;
        if done % cfg.training.eval_interval == 0 || done == t_total {
            let losses: Vec<LossBreakdown> = clients.iter_mut().map(ClientState::take_mean_loss).collect();
            let bytes: Vec<u64> = clients.iter().map(|c| c.bytes_received).collect();
            let (models, losses, bytes) = expand_pooled(&clients, losses, bytes, k);
            for r in evaluation_records(&models, data, done, &losses, &bytes)? {
                on_record(&r);
                records.push(r);
            }
        }
    }

    let models: Vec<ClientModel> = if mode == TrainingMode::PooledSupervised {
        (0..k).map(|i| ClientModel { client_id: i, ..clients[0].model.clone() }).collect()
    } else {
        clients.into_iter().map(|c| c.model).collect()
    };
    let marginals: Vec<Vec<f64>> = (0..k).map(|i| data.label_marginal(i)).collect();
    let cross = cross_client_matrix(&models, &data.shared_test(), &marginals)?;
    let hops = hop_distance_report(&cross, &graph);
    Ok(RunOutput { records, models, comm, cross, hops })
}

fn expand_pooled(
    clients: &[ClientState],
    losses: Vec<LossBreakdown>,
    bytes: Vec<u64>,
    k: usize,
) -> (Vec<&ClientModel>, Vec<LossBreakdown>, Vec<u64>) {
    if clients.len() == k {
        return (clients.iter().map(|c| &c.model).collect(), losses, bytes);
    }
    (vec![&clients[0].model; k], vec![losses[0].clone(); k], vec![bytes[0]; k])
}
