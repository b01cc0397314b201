//! The federated round engine.
//!
//! Two protocol modes:
//! - relay: L independent model lineages; each round pairs lineage i with the
//!   i-th selected client and trains it there. Lineages never exchange or
//!   average parameters, so a serial and a parallel execution of a round are
//!   bitwise identical.
//! - fedavg: one global model broadcast to the selected clients each round,
//!   then replaced by the (optionally sample-count-weighted) mean of the
//!   client results. Optimizer moments reset each round; averaging would
//!   invalidate them.
//!
//! All randomness is derived from (seed, round, lineage/client) so results
//! are independent of worker scheduling.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::config::{take_parse, KvMap};
use crate::data::{patchify, ImageBatch, PatchSequence};
use crate::error::{Error, Result};
use crate::mae::{train_step, MaeDims, MaeParams};
use crate::optim::{AdamConfig, OptimizerState};
use crate::param::{NamedParams, ParamStore};
use crate::partition::ClientShard;
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FedMode {
    Relay,
    FedAvg,
}

impl std::str::FromStr for FedMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relay" => Ok(FedMode::Relay),
            "fedavg" => Ok(FedMode::FedAvg),
            other => Err(Error::Config(format!("unknown mode {other:?} (relay|fedavg)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FedRunConfig {
    pub clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub clients_per_round: usize,
    pub mode: FedMode,
    pub lineages: usize,
    pub batch_size: usize,
    pub mask_ratio: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Write checkpoints every this many rounds (0: only after the last).
    pub checkpoint_every: usize,
    /// Train the units of a round on rayon workers.
    pub parallel: bool,
    /// FedAvg: weight the average by shard sample counts.
    pub weighted_average: bool,
    pub patch: usize,
    pub d_enc: usize,
    pub d_dec: usize,
    pub n_heads: usize,
}

impl Default for FedRunConfig {
    fn default() -> Self {
        FedRunConfig {
            clients: 8,
            rounds: 20,
            local_epochs: 2,
            clients_per_round: 5,
            mode: FedMode::Relay,
            lineages: 5,
            batch_size: 16,
            mask_ratio: 0.75,
            adam: AdamConfig::default(),
            seed: 0,
            checkpoint_every: 0,
            parallel: false,
            weighted_average: false,
            patch: 4,
            d_enc: 64,
            d_dec: 32,
            n_heads: 4,
        }
    }
}

impl FedRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 || self.clients_per_round == 0 {
            return Err(Error::Config("clients and clients_per_round must be >= 1".into()));
        }
        if self.clients_per_round > self.clients {
            return Err(Error::Config(format!(
                "clients_per_round {} exceeds clients {}",
                self.clients_per_round, self.clients
            )));
        }
        if self.mode == FedMode::Relay && self.lineages != self.clients_per_round {
            return Err(Error::Config(format!(
                "relay mode pairs one lineage per selected client: lineages {} != clients_per_round {}",
                self.lineages, self.clients_per_round
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask_ratio {} outside [0, 1)", self.mask_ratio)));
        }
        if self.d_enc % self.n_heads != 0 || self.d_dec % self.n_heads != 0 {
            return Err(Error::Config("n_heads must divide d_enc and d_dec".into()));
        }
        Ok(())
    }

    /// Consume this config's keys from a parsed key=value map.
    pub fn from_kv(map: &mut KvMap) -> Result<Self> {
        let d = FedRunConfig::default();
        let mode = match map.remove("mode") {
            None => d.mode,
            Some(v) => v.parse()?,
        };
        let cfg = FedRunConfig {
            clients: take_parse(map, "clients", d.clients)?,
            rounds: take_parse(map, "rounds", d.rounds)?,
            local_epochs: take_parse(map, "local_epochs", d.local_epochs)?,
            clients_per_round: take_parse(map, "clients_per_round", d.clients_per_round)?,
            mode,
            lineages: take_parse(map, "lineages", d.lineages)?,
            batch_size: take_parse(map, "batch_size", d.batch_size)?,
            mask_ratio: take_parse(map, "mask_ratio", d.mask_ratio)?,
            adam: AdamConfig {
                lr: take_parse(map, "lr", d.adam.lr)?,
                beta1: take_parse(map, "beta1", d.adam.beta1)?,
                beta2: take_parse(map, "beta2", d.adam.beta2)?,
                eps: take_parse(map, "adam_eps", d.adam.eps)?,
                weight_decay: take_parse(map, "weight_decay", d.adam.weight_decay)?,
            },
            seed: take_parse(map, "seed", d.seed)?,
            checkpoint_every: take_parse(map, "checkpoint_every", d.checkpoint_every)?,
            parallel: take_parse(map, "parallel", d.parallel)?,
            weighted_average: take_parse(map, "weighted_average", d.weighted_average)?,
            patch: take_parse(map, "patch", d.patch)?,
            d_enc: take_parse(map, "d_enc", d.d_enc)?,
            d_dec: take_parse(map, "d_dec", d.d_dec)?,
            n_heads: take_parse(map, "n_heads", d.n_heads)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn mae_dims(&self, images: &ImageBatch) -> MaeDims {
        let b = (images.height / self.patch) * (images.width / self.patch);
        MaeDims {
            patch_dim: images.channels * self.patch * self.patch,
            num_patches: b,
            d_enc: self.d_enc,
            d_dec: self.d_dec,
            n_heads_enc: self.n_heads,
            n_heads_dec: self.n_heads,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VisitRecord {
    pub round: usize,
    pub client: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct LineageState {
    pub id: usize,
    pub model: MaeParams,
    pub opt: OptimizerState,
    pub visits: Vec<VisitRecord>,
}

#[derive(Debug, Clone, Default)]
pub struct MetricsLog {
    rows: Vec<MetricsRow>,
}

#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub round: usize,
    pub unit: usize,
    pub client: usize,
    pub loss: f64,
    pub seconds: f64,
}

impl MetricsLog {
    pub fn push(&mut self, row: MetricsRow) {
        self.rows.push(row);
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    /// Equality of everything except wall time.
    pub fn same_results(&self, other: &MetricsLog) -> bool {
        self.rows.len() == other.rows.len()
            && self.rows.iter().zip(&other.rows).all(|(a, b)| {
                a.round == b.round
                    && a.unit == b.unit
                    && a.client == b.client
                    && a.loss.to_bits() == b.loss.to_bits()
            })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,unit_id,client_id,loss,seconds\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{:.3}\n",
                r.round, r.unit, r.client, r.loss, r.seconds
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn mean_loss_of_round(&self, round: usize) -> Option<f64> {
        let losses: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.round == round)
            .map(|r| r.loss)
            .collect();
        (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64)
    }
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub mode: FedMode,
    pub lineages: Vec<LineageState>,
    pub round: usize,
    pub metrics: MetricsLog,
}

impl ServerState {
    pub fn init(cfg: &FedRunConfig, dims: MaeDims) -> Self {
        // The server hands every replica the same patch embedding and
        // positional tables, so the blocks they train stay mutually
        // compatible for cascading; each replica's transformer blocks and
        // decoder are independently initialized, so the cascade stacks
        // genuinely distinct blocks. FedAvg keeps a single global model.
        let mut shared_rng = RngStream::new(cfg.seed).derive("init-shared", 0);
        let shared = MaeParams::init(dims, &mut shared_rng);
        let units = match cfg.mode {
            FedMode::Relay => cfg.lineages,
            FedMode::FedAvg => 1,
        };
        let lineages = (0..units)
            .map(|id| {
                let mut init_rng = RngStream::new(cfg.seed).derive("init", id as u64);
                let mut model = MaeParams::init(dims, &mut init_rng);
                model.embed_w = shared.embed_w.clone();
                model.embed_b = shared.embed_b.clone();
                model.enc_pos = shared.enc_pos.clone();
                model.dec_pos = shared.dec_pos.clone();
                LineageState {
                    id,
                    model,
                    opt: OptimizerState::new(cfg.adam),
                    visits: Vec::new(),
                }
            })
            .collect();
        ServerState {
            mode: cfg.mode,
            lineages,
            round: 0,
            metrics: MetricsLog::default(),
        }
    }
}

/// C distinct clients, uniform without replacement, deterministic per
/// (seed, round) and independent of everything else.
pub fn select_clients(cfg: &FedRunConfig, round: usize) -> Vec<usize> {
    let mut rng = RngStream::new(cfg.seed).derive("select", round as u64);
    rng.choose_k(cfg.clients, cfg.clients_per_round)
}

/// E epochs over the shard in rng-shuffled batch order, masks resampled
/// every batch. Returns the mean loss of the final epoch (None when E = 0).
pub fn local_train(
    model: &mut MaeParams,
    opt: &mut OptimizerState,
    shard: &PatchSequence,
    epochs: usize,
    batch_size: usize,
    mask_ratio: f64,
    rng: &RngStream,
) -> Result<Option<f64>> {
    if shard.n == 0 {
        return Err(Error::Invalid("local_train on an empty shard".into()));
    }
    let mut final_epoch_mean = None;
    for epoch in 0..epochs {
        let mut epoch_rng = rng.derive("epoch", epoch as u64);
        let order = epoch_rng.permutation(shard.n);
        let mut losses = Vec::new();
        for (bi, chunk) in order.chunks(batch_size).enumerate() {
            let batch = shard.subset(chunk);
            let mut batch_rng = epoch_rng.derive("batch", bi as u64);
            let loss = train_step(model, opt, &batch, mask_ratio, &mut batch_rng)?;
            losses.push(loss);
        }
        final_epoch_mean = Some(losses.iter().sum::<f64>() / losses.len() as f64);
    }
    Ok(final_epoch_mean)
}

/// Elementwise mean of identically shaped models.
pub fn average_params(models: &[&MaeParams]) -> Result<MaeParams> {
    let stores: Vec<ParamStore> = models.iter().map(|m| m.to_store()).collect();
    let refs: Vec<&ParamStore> = stores.iter().collect();
    let avg = ParamStore::average(&refs)?;
    let mut out = models[0].clone();
    out.load_store(&avg)?;
    Ok(out)
}

/// Sample-count-weighted mean.
pub fn weighted_average_params(models: &[&MaeParams], weights: &[f64]) -> Result<MaeParams> {
    if models.is_empty() || models.len() != weights.len() {
        return Err(Error::Invalid("weighted average needs one weight per model".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::Invalid("weights must sum to a positive value".into()));
    }
    let mut acc = models[0].to_store();
    for (_, p) in acc.iter_mut() {
        p.value.fill(0.0);
    }
    for (m, &w) in models.iter().zip(weights) {
        let s = m.to_store();
        for ((_, out), (_, src)) in acc.iter_mut().zip(s.iter()) {
            for (o, &v) in out.value.data_mut().iter_mut().zip(src.value.data()) {
                *o += v * w / total;
            }
        }
    }
    let mut out = models[0].clone();
    out.load_store(&acc)?;
    Ok(out)
}

fn unit_rng(cfg: &FedRunConfig, round: usize, unit: usize) -> RngStream {
    RngStream::new(cfg.seed)
        .derive("round", round as u64)
        .derive("unit", unit as u64)
}

/// One relay round: lineage i trains on the i-th selected client. No
/// parameter ever crosses between lineages.
pub fn run_round_relay(
    state: &mut ServerState,
    shards: &[PatchSequence],
    cfg: &FedRunConfig,
    round: usize,
) -> Result<()> {
    debug_assert_eq!(state.mode, FedMode::Relay);
    let selected = select_clients(cfg, round);
    let jobs: Vec<(usize, usize)> = selected.iter().copied().enumerate().collect();

    let run_one = |lineage: &mut LineageState, client: usize| -> Result<(f64, f64)> {
        let started = Instant::now();
        let rng = unit_rng(cfg, round, lineage.id);
        let loss = local_train(
            &mut lineage.model,
            &mut lineage.opt,
            &shards[client],
            cfg.local_epochs,
            cfg.batch_size,
            cfg.mask_ratio,
            &rng,
        )?
        .unwrap_or(f64::NAN);
        Ok((loss, started.elapsed().as_secs_f64()))
    };

    let results: Vec<Result<(f64, f64)>> = if cfg.parallel {
        state
            .lineages
            .par_iter_mut()
            .zip(jobs.par_iter())
            .map(|(lineage, &(_, client))| run_one(lineage, client))
            .collect()
    } else {
        state
            .lineages
            .iter_mut()
            .zip(jobs.iter())
            .map(|(lineage, &(_, client))| run_one(lineage, client))
            .collect()
    };

    for ((lineage_id, client), result) in jobs.into_iter().zip(results) {
        let (loss, seconds) = result?;
        state.lineages[lineage_id].visits.push(VisitRecord {
            round,
            client,
            loss,
        });
        state.metrics.push(MetricsRow {
            round,
            unit: lineage_id,
            client,
            loss,
            seconds,
        });
    }
    state.round = round;
    Ok(())
}

/// One fedavg round: broadcast, local training on C clients, then replace the
/// global model with the mean of the results.
pub fn run_round_fedavg(
    state: &mut ServerState,
    shards: &[PatchSequence],
    cfg: &FedRunConfig,
    round: usize,
) -> Result<()> {
    debug_assert_eq!(state.mode, FedMode::FedAvg);
    let selected = select_clients(cfg, round);
    let global = state.lineages[0].model.clone();

    let run_one = |slot: usize, client: usize| -> Result<(MaeParams, f64, f64)> {
        let started = Instant::now();
        let mut model = global.clone();
        // Fresh moments per round: averaging invalidates optimizer state.
        let mut opt = OptimizerState::new(cfg.adam);
        let rng = unit_rng(cfg, round, slot).derive("client", client as u64);
        let loss = local_train(
            &mut model,
            &mut opt,
            &shards[client],
            cfg.local_epochs,
            cfg.batch_size,
            cfg.mask_ratio,
            &rng,
        )?
        .unwrap_or(f64::NAN);
        Ok((model, loss, started.elapsed().as_secs_f64()))
    };

    let results: Vec<Result<(MaeParams, f64, f64)>> = if cfg.parallel {
        selected
            .par_iter()
            .enumerate()
            .map(|(slot, &client)| run_one(slot, client))
            .collect()
    } else {
        selected
            .iter()
            .enumerate()
            .map(|(slot, &client)| run_one(slot, client))
            .collect()
    };

    let mut models = Vec::with_capacity(results.len());
    for ((slot, &client), result) in selected.iter().enumerate().zip(&results) {
        let (model, loss, seconds) = match result {
            Ok(x) => x,
            Err(e) => return Err(Error::Job(format!("round {round} client {client}: {e}"))),
        };
        let _ = slot;
        models.push(model.clone());
        state.metrics.push(MetricsRow {
            round,
            unit: 0,
            client,
            loss: *loss,
            seconds: *seconds,
        });
    }
    let refs: Vec<&MaeParams> = models.iter().collect();
    state.lineages[0].model = if cfg.weighted_average {
        let weights: Vec<f64> = selected.iter().map(|&c| shards[c].n as f64).collect();
        weighted_average_params(&refs, &weights)?
    } else {
        average_params(&refs)?
    };
    state.lineages[0].visits.push(VisitRecord {
        round,
        client: usize::MAX,
        loss: f64::NAN,
    });
    state.round = round;
    Ok(())
}

/// R rounds of the configured mode with optional checkpointing.
/// Deterministic given (cfg, dataset, partition).
pub fn run_pretraining(
    cfg: &FedRunConfig,
    dataset: &ImageBatch,
    partition: &[ClientShard],
    out_dir: Option<&Path>,
) -> Result<ServerState> {
    cfg.validate()?;
    if partition.len() != cfg.clients {
        return Err(Error::Config(format!(
            "config says {} clients but partition has {} shards",
            cfg.clients,
            partition.len()
        )));
    }
    let patches = patchify(dataset, cfg.patch)?;
    let shards: Vec<PatchSequence> = partition.iter().map(|s| patches.subset(&s.indices)).collect();
    if let Some(empty) = shards.iter().position(|s| s.n == 0) {
        return Err(Error::Invalid(format!("client {empty} has an empty shard")));
    }

    let dims = cfg.mae_dims(dataset);
    let mut state = ServerState::init(cfg, dims);
    for round in 1..=cfg.rounds {
        match cfg.mode {
            FedMode::Relay => run_round_relay(&mut state, &shards, cfg, round)?,
            FedMode::FedAvg => run_round_fedavg(&mut state, &shards, cfg, round)?,
        }
        let due = cfg.checkpoint_every > 0 && round % cfg.checkpoint_every == 0;
        if let Some(dir) = out_dir {
            if due || round == cfg.rounds {
                write_round_checkpoints(&state, dims, dir, round)
                    .map_err(|e| Error::Job(format!("checkpoint at round {round}: {e}")))?;
            }
        }
    }
    Ok(state)
}

pub fn mae_checkpoint_meta(dims: &MaeDims) -> std::collections::BTreeMap<String, String> {
    let mut meta = std::collections::BTreeMap::new();
    meta.insert("patch_dim".into(), dims.patch_dim.to_string());
    meta.insert("num_patches".into(), dims.num_patches.to_string());
    meta.insert("d_enc".into(), dims.d_enc.to_string());
    meta.insert("d_dec".into(), dims.d_dec.to_string());
    meta.insert("n_heads_enc".into(), dims.n_heads_enc.to_string());
    meta.insert("n_heads_dec".into(), dims.n_heads_dec.to_string());
    meta
}

pub fn mae_from_checkpoint(ckpt: &Checkpoint) -> Result<MaeParams> {
    if ckpt.kind != "mae" {
        return Err(Error::Parse(format!("expected a mae checkpoint, found {}", ckpt.kind)));
    }
    let dims = MaeDims {
        patch_dim: ckpt.meta_usize("patch_dim")?,
        num_patches: ckpt.meta_usize("num_patches")?,
        d_enc: ckpt.meta_usize("d_enc")?,
        d_dec: ckpt.meta_usize("d_dec")?,
        n_heads_enc: ckpt.meta_usize("n_heads_enc")?,
        n_heads_dec: ckpt.meta_usize("n_heads_dec")?,
    };
    let mut model = MaeParams::init(dims, &mut RngStream::new(0));
    ckpt.load_into(&mut model)?;
    Ok(model)
}

fn write_round_checkpoints(state: &ServerState, dims: MaeDims, dir: &Path, round: usize) -> Result<()> {
    for lineage in &state.lineages {
        let path = dir
            .join(format!("round_{round}"))
            .join(format!("lineage_{}.ckpt", lineage.id));
        let ckpt = Checkpoint::from_model("mae", mae_checkpoint_meta(&dims), &lineage.model);
        save_checkpoint(&ckpt, &path)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;
    use crate::partition::{partition, PartitionSpec};

    fn toy_setup(seed: u64) -> (FedRunConfig, ImageBatch, Vec<ClientShard>) {
        let mut rng = RngStream::new(seed);
        let dataset = synth_dataset(16, 4, 8, 8, 0.3, &mut rng).unwrap();
        let cfg = FedRunConfig {
            clients: 4,
            rounds: 3,
            local_epochs: 1,
            clients_per_round: 2,
            lineages: 2,
            batch_size: 8,
            seed,
            patch: 4,
            d_enc: 16,
            d_dec: 8,
            n_heads: 2,
            ..FedRunConfig::default()
        };
        let shards = partition(
            dataset.labels.as_ref().unwrap(),
            4,
            &PartitionSpec { clients: 4, alpha: 0.0, seed },
        )
        .unwrap();
        (cfg, dataset, shards)
    }

    #[test]
    fn select_clients_distinct_and_deterministic() {
        let cfg = FedRunConfig {
            clients: 100,
            clients_per_round: 5,
            lineages: 5,
            ..FedRunConfig::default()
        };
        let a = select_clients(&cfg, 3);
        let b = select_clients(&cfg, 3);
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 5);

        let full = FedRunConfig {
            clients: 6,
            clients_per_round: 6,
            lineages: 6,
            ..FedRunConfig::default()
        };
        let mut everyone = select_clients(&full, 9);
        everyone.sort_unstable();
        assert_eq!(everyone, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn selection_marginals_are_uniform() {
        let cfg = FedRunConfig {
            clients: 100,
            clients_per_round: 5,
            lineages: 5,
            ..FedRunConfig::default()
        };
        let mut counts = vec![0usize; 100];
        let rounds = 2000; // 10_000 selections
        for r in 0..rounds {
            for c in select_clients(&cfg, r) {
                counts[c] += 1;
            }
        }
        let p = 0.05;
        let sigma = (rounds as f64 * p * (1.0 - p)).sqrt();
        for (c, &count) in counts.iter().enumerate() {
            let dev = (count as f64 - rounds as f64 * p).abs();
            assert!(dev <= 3.0 * sigma, "client {c}: {count} selections, dev {dev}");
        }
    }

    #[test]
    fn local_train_zero_epochs_is_identity() {
        let (cfg, dataset, _) = toy_setup(1);
        let dims = cfg.mae_dims(&dataset);
        let mut rng = RngStream::new(2);
        let mut model = MaeParams::init(dims, &mut rng);
        let before = model.to_store();
        let mut opt = OptimizerState::new(cfg.adam);
        let patches = patchify(&dataset, cfg.patch).unwrap();
        let loss = local_train(&mut model, &mut opt, &patches, 0, 8, 0.75, &rng).unwrap();
        assert!(loss.is_none());
        assert!(before.bitwise_eq(&model.to_store()));
    }

    #[test]
    fn local_train_learns() {
        let (cfg, dataset, _) = toy_setup(3);
        let dims = cfg.mae_dims(&dataset);
        let mut rng = RngStream::new(4);
        let mut model = MaeParams::init(dims, &mut rng);
        let mut opt = OptimizerState::new(cfg.adam);
        let patches = patchify(&dataset, cfg.patch).unwrap();
        let shard = patches.subset(&(0..32).collect::<Vec<_>>());
        let first = local_train(&mut model, &mut opt, &shard, 1, 8, 0.75, &rng.derive("e", 0))
            .unwrap()
            .unwrap();
        let mut last = first;
        for e in 1..10 {
            last = local_train(&mut model, &mut opt, &shard, 1, 8, 0.75, &rng.derive("e", e))
                .unwrap()
                .unwrap();
        }
        assert!(last < first, "no improvement: first {first}, last {last}");
    }

    #[test]
    fn relay_serial_and_parallel_agree_bitwise() {
        let (cfg, dataset, shards) = toy_setup(5);
        let serial = run_pretraining(&cfg, &dataset, &shards, None).unwrap();
        let par_cfg = FedRunConfig {
            parallel: true,
            ..cfg.clone()
        };
        let parallel = run_pretraining(&par_cfg, &dataset, &shards, None).unwrap();
        for (a, b) in serial.lineages.iter().zip(&parallel.lineages) {
            assert!(a.model.to_store().bitwise_eq(&b.model.to_store()));
        }
        assert!(serial.metrics.same_results(&parallel.metrics));
    }

    #[test]
    fn relay_runs_are_reproducible() {
        let (cfg, dataset, shards) = toy_setup(6);
        let a = run_pretraining(&cfg, &dataset, &shards, None).unwrap();
        let b = run_pretraining(&cfg, &dataset, &shards, None).unwrap();
        for (x, y) in a.lineages.iter().zip(&b.lineages) {
            assert!(x.model.to_store().bitwise_eq(&y.model.to_store()));
        }
        assert!(a.metrics.same_results(&b.metrics));
    }

    #[test]
    fn relay_lineages_diverge() {
        let (cfg, dataset, shards) = toy_setup(7);
        let state = run_pretraining(&cfg, &dataset, &shards, None).unwrap();
        let a = state.lineages[0].model.to_store();
        let b = state.lineages[1].model.to_store();
        assert!(a.max_abs_diff(&b).unwrap() > 0.0, "lineages did not diverge");
    }

    #[test]
    fn fedavg_average_is_entrywise_mean() {
        let (mut cfg, dataset, shards) = toy_setup(8);
        cfg.mode = FedMode::FedAvg;
        cfg.lineages = 1;
        cfg.rounds = 1;
        let state = run_pretraining(&cfg, &dataset, &shards, None).unwrap();

        // Recompute by hand: broadcast the init model, train each selected
        // client, average.
        let dims = cfg.mae_dims(&dataset);
        let init = ServerState::init(&cfg, dims).lineages[0].model.clone();
        let patches = patchify(&dataset, cfg.patch).unwrap();
        let selected = select_clients(&cfg, 1);
        let mut trained = Vec::new();
        for (slot, &client) in selected.iter().enumerate() {
            let mut m = init.clone();
            let mut opt = OptimizerState::new(cfg.adam);
            let rng = unit_rng(&cfg, 1, slot).derive("client", client as u64);
            let shard = patches.subset(&shards[client].indices);
            local_train(&mut m, &mut opt, &shard, cfg.local_epochs, cfg.batch_size, cfg.mask_ratio, &rng).unwrap();
            trained.push(m);
        }
        let refs: Vec<&MaeParams> = trained.iter().collect();
        let expect = average_params(&refs).unwrap();
        let diff = expect
            .to_store()
            .max_abs_diff(&state.lineages[0].model.to_store())
            .unwrap();
        assert!(diff <= 1e-15, "diff {diff}");
    }

    #[test]
    fn fedavg_zero_epochs_is_identity() {
        let (mut cfg, dataset, shards) = toy_setup(9);
        cfg.mode = FedMode::FedAvg;
        cfg.lineages = 1;
        cfg.local_epochs = 0;
        let dims = cfg.mae_dims(&dataset);
        let init = ServerState::init(&cfg, dims).lineages[0].model.to_store();
        let state = run_pretraining(&cfg, &dataset, &shards, None).unwrap();
        let diff = init
            .max_abs_diff(&state.lineages[0].model.to_store())
            .unwrap();
        assert!(diff <= 1e-15, "diff {diff}");
    }

    #[test]
    fn identical_clients_make_averaging_a_noop() {
        // Symmetry: same data, same stream => identical client results, so
        // the average equals any single result.
        let (cfg, dataset, _) = toy_setup(10);
        let dims = cfg.mae_dims(&dataset);
        let patches = patchify(&dataset, cfg.patch).unwrap();
        let mut rng = RngStream::new(11);
        let init = MaeParams::init(dims, &mut rng);
        let stream = RngStream::new(12).derive("shared", 0);
        let mut models = Vec::new();
        for _ in 0..3 {
            let mut m = init.clone();
            let mut opt = OptimizerState::new(cfg.adam);
            local_train(&mut m, &mut opt, &patches, 1, 8, 0.5, &stream).unwrap();
            models.push(m);
        }
        let refs: Vec<&MaeParams> = models.iter().collect();
        let avg = average_params(&refs).unwrap();
        let diff = avg.to_store().max_abs_diff(&models[0].to_store()).unwrap();
        assert!(diff <= 1e-15, "diff {diff}");
    }

    #[test]
    fn zero_rounds_returns_initialized_models() {
        let (mut cfg, dataset, shards) = toy_setup(13);
        cfg.rounds = 0;
        let dims = cfg.mae_dims(&dataset);
        let state = run_pretraining(&cfg, &dataset, &shards, None).unwrap();
        let init = ServerState::init(&cfg, dims);
        for (a, b) in state.lineages.iter().zip(&init.lineages) {
            assert!(a.model.to_store().bitwise_eq(&b.model.to_store()));
        }
        assert!(state.metrics.rows().is_empty());
    }

    #[test]
    fn pretraining_loss_improves() {
        let (mut cfg, dataset, shards) = toy_setup(14);
        cfg.rounds = 20;
        cfg.local_epochs = 2;
        let state = run_pretraining(&cfg, &dataset, &shards, None).unwrap();
        let first = state.metrics.mean_loss_of_round(1).unwrap();
        let last = state.metrics.mean_loss_of_round(20).unwrap();
        assert!(last < first, "first {first}, last {last}");
    }

    #[test]
    fn checkpoints_written_at_cadence() {
        let (mut cfg, dataset, shards) = toy_setup(15);
        cfg.checkpoint_every = 2;
        cfg.rounds = 3;
        let dir = tempfile::tempdir().unwrap();
        run_pretraining(&cfg, &dataset, &shards, Some(dir.path())).unwrap();
        assert!(dir.path().join("round_2/lineage_0.ckpt").exists());
        assert!(dir.path().join("round_3/lineage_1.ckpt").exists());
        assert!(!dir.path().join("round_1").exists());

        let ckpt = crate::checkpoint::load_checkpoint(&dir.path().join("round_3/lineage_0.ckpt")).unwrap();
        let model = mae_from_checkpoint(&ckpt).unwrap();
        assert_eq!(model.dims.d_enc, cfg.d_enc);
    }

    #[test]
    fn config_parsing_rejects_unknown_keys() {
        let mut map = crate::config::parse_kv("mode=relay\nclients=4\nclients_per_round=2\nlineages=2\n").unwrap();
        let cfg = FedRunConfig::from_kv(&mut map).unwrap();
        crate::config::reject_unknown(&map).unwrap();
        assert_eq!(cfg.clients, 4);

        let mut bad = crate::config::parse_kv("clienst=4").unwrap();
        let _ = FedRunConfig::from_kv(&mut bad).unwrap();
        assert!(crate::config::reject_unknown(&bad).is_err());
    }
}
