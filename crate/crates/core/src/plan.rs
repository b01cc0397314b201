//! Experiment plans: a named experiment kind, a parameter grid, and a seed
//! list. Every (grid point, seed) pair runs as an isolated deterministic job
//! that writes one CSV row; completed jobs are skipped on re-run, and the
//! summarizer reports medians and interquartile ranges per grid point.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::cascade::{
    assemble_multiblock_mae, cascade_assemble, classifier_from_multiblock, evaluate, finetune,
    multiblock_eval_loss, reconstruct_dump, server_refine, CascadeSource, CascadeSpec,
    MultiBlockMae,
};
use crate::config::{reject_unknown, take_parse, take_string, KvMap};
use crate::data::{load_dataset, stratified_split, synth_dataset, ImageBatch, MaskSemantics};
use crate::error::{Error, Result};
use crate::fed::{run_pretraining, FedMode, FedRunConfig};
use crate::mae::MaeParams;
use crate::optim::AdamConfig;
use crate::oracle::{run_oracle_case, oracle_csv_header, CorruptionSpec};
use crate::partition::{export_partition, partition, PartitionSpec};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanKind {
    Pretrain,
    CascadeFinetune,
    AblationDepth,
    AblationPpre,
    SweepAlpha,
    SweepClients,
    SweepEpochs,
    SweepRatio,
    SweepRounds,
    ServerData,
    LinearOracle,
    Reconstruct,
}

impl std::str::FromStr for PlanKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "pretrain" => PlanKind::Pretrain,
            "cascade-finetune" => PlanKind::CascadeFinetune,
            "ablation-depth" => PlanKind::AblationDepth,
            "ablation-ppre" => PlanKind::AblationPpre,
            "sweep-alpha" => PlanKind::SweepAlpha,
            "sweep-clients" => PlanKind::SweepClients,
            "sweep-epochs" => PlanKind::SweepEpochs,
            "sweep-ratio" => PlanKind::SweepRatio,
            "sweep-rounds" => PlanKind::SweepRounds,
            "server-data" => PlanKind::ServerData,
            "linear-oracle" => PlanKind::LinearOracle,
            "reconstruct" => PlanKind::Reconstruct,
            other => return Err(Error::Config(format!("unknown experiment kind {other:?}"))),
        })
    }
}

impl PlanKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PlanKind::Pretrain => "pretrain",
            PlanKind::CascadeFinetune => "cascade-finetune",
            PlanKind::AblationDepth => "ablation-depth",
            PlanKind::AblationPpre => "ablation-ppre",
            PlanKind::SweepAlpha => "sweep-alpha",
            PlanKind::SweepClients => "sweep-clients",
            PlanKind::SweepEpochs => "sweep-epochs",
            PlanKind::SweepRatio => "sweep-ratio",
            PlanKind::SweepRounds => "sweep-rounds",
            PlanKind::ServerData => "server-data",
            PlanKind::LinearOracle => "linear-oracle",
            PlanKind::Reconstruct => "reconstruct",
        }
    }
}

/// Knobs shared by every job; grid points override individual fields.
#[derive(Debug, Clone)]
pub struct JobConfig {
    pub data_path: Option<PathBuf>,
    pub n_per_class: usize,
    pub n_classes: usize,
    pub height: usize,
    pub width: usize,
    pub noise: f64,
    pub test_fraction: f64,
    pub alpha: f64,
    pub fed: FedRunConfig,
    pub depth: usize,
    pub p_pre: usize,
    pub label_fraction: f64,
    pub finetune_epochs: usize,
    pub finetune_batch: usize,
    pub finetune_lr: f64,
    pub server_images: usize,
    pub refine_epochs: usize,
    pub oracle_clients: usize,
    pub oracle_d: usize,
    pub oracle_n: usize,
    pub oracle_m: usize,
    pub oracle_p: f64,
    pub lambda: f64,
    pub gd_steps: usize,
    pub dump_rows: usize,
}

impl Default for JobConfig {
    fn default() -> Self {
        JobConfig {
            data_path: None,
            n_per_class: 64,
            n_classes: 4,
            height: 16,
            width: 16,
            noise: 0.5,
            test_fraction: 0.25,
            alpha: 0.0,
            fed: FedRunConfig::default(),
            depth: 3,
            p_pre: 3,
            label_fraction: 1.0,
            finetune_epochs: 8,
            finetune_batch: 32,
            finetune_lr: 1e-3,
            server_images: 256,
            refine_epochs: 5,
            oracle_clients: 2,
            oracle_d: 8,
            oracle_n: 8,
            oracle_m: 20,
            oracle_p: 0.75,
            lambda: 0.0,
            gd_steps: 2000,
            dump_rows: 4,
        }
    }
}

impl JobConfig {
    pub fn from_kv(map: &mut KvMap) -> Result<Self> {
        let d = JobConfig::default();
        let cfg = JobConfig {
            data_path: take_string(map, "data").map(PathBuf::from),
            n_per_class: take_parse(map, "n_per_class", d.n_per_class)?,
            n_classes: take_parse(map, "n_classes", d.n_classes)?,
            height: take_parse(map, "height", d.height)?,
            width: take_parse(map, "width", d.width)?,
            noise: take_parse(map, "noise", d.noise)?,
            test_fraction: take_parse(map, "test_fraction", d.test_fraction)?,
            alpha: take_parse(map, "alpha", d.alpha)?,
            fed: FedRunConfig::from_kv(map)?,
            depth: take_parse(map, "depth", d.depth)?,
            p_pre: take_parse(map, "p_pre", d.p_pre)?,
            label_fraction: take_parse(map, "label_fraction", d.label_fraction)?,
            finetune_epochs: take_parse(map, "finetune_epochs", d.finetune_epochs)?,
            finetune_batch: take_parse(map, "finetune_batch", d.finetune_batch)?,
            finetune_lr: take_parse(map, "finetune_lr", d.finetune_lr)?,
            server_images: take_parse(map, "server_images", d.server_images)?,
            refine_epochs: take_parse(map, "refine_epochs", d.refine_epochs)?,
            oracle_clients: take_parse(map, "oracle_clients", d.oracle_clients)?,
            oracle_d: take_parse(map, "oracle_d", d.oracle_d)?,
            oracle_n: take_parse(map, "oracle_n", d.oracle_n)?,
            oracle_m: take_parse(map, "oracle_m", d.oracle_m)?,
            oracle_p: take_parse(map, "oracle_p", d.oracle_p)?,
            lambda: take_parse(map, "lambda", d.lambda)?,
            gd_steps: take_parse(map, "gd_steps", d.gd_steps)?,
            dump_rows: take_parse(map, "dump_rows", d.dump_rows)?,
        };
        Ok(cfg)
    }

    pub fn finetune_adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.finetune_lr,
            ..AdamConfig::default()
        }
    }

    /// Apply one grid override.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Config(format!("bad grid value {value:?} for {key}"));
        match key {
            "depth" => self.depth = value.parse().map_err(|_| bad())?,
            "p_pre" => self.p_pre = value.parse().map_err(|_| bad())?,
            "alpha" => self.alpha = value.parse().map_err(|_| bad())?,
            "clients" => self.fed.clients = value.parse().map_err(|_| bad())?,
            "local_epochs" => self.fed.local_epochs = value.parse().map_err(|_| bad())?,
            "clients_per_round" => {
                self.fed.clients_per_round = value.parse().map_err(|_| bad())?;
                if self.fed.mode == FedMode::Relay {
                    self.fed.lineages = self.fed.clients_per_round;
                }
            }
            "rounds" => self.fed.rounds = value.parse().map_err(|_| bad())?,
            "server_images" => self.server_images = value.parse().map_err(|_| bad())?,
            "oracle_p" => self.oracle_p = value.parse().map_err(|_| bad())?,
            "label_fraction" => self.label_fraction = value.parse().map_err(|_| bad())?,
            other => return Err(Error::Config(format!("unknown grid key {other}"))),
        }
        Ok(())
    }
}

pub type GridPoint = Vec<(String, String)>;

pub fn grid_id(point: &GridPoint) -> String {
    if point.is_empty() {
        return "default".to_string();
    }
    point
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(";")
}

#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    pub kind: PlanKind,
    pub grid: Vec<GridPoint>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub base: JobConfig,
}

fn parse_list<T: std::str::FromStr>(map: &mut KvMap, key: &str, default: &[T]) -> Result<Vec<T>>
where
    T: Clone,
{
    match map.remove(key) {
        None => Ok(default.to_vec()),
        Some(v) => v
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad list entry {tok:?} for {key}")))
            })
            .collect(),
    }
}

impl ExperimentPlan {
    pub fn from_kv(mut map: KvMap, out_dir: &Path) -> Result<Self> {
        let kind: PlanKind = map
            .remove("kind")
            .ok_or_else(|| Error::Config("plan needs kind=<experiment>".into()))?
            .parse()?;
        let seeds: Vec<u64> = parse_list(&mut map, "seeds", &[0u64])?;

        let grid: Vec<GridPoint> = match kind {
            PlanKind::Pretrain | PlanKind::CascadeFinetune | PlanKind::Reconstruct => {
                vec![Vec::new()]
            }
            PlanKind::AblationDepth => {
                let depths: Vec<usize> = parse_list(&mut map, "depths", &[1usize, 2, 3])?;
                depths
                    .iter()
                    .flat_map(|&d| {
                        [0usize, d].into_iter().map(move |p| {
                            vec![
                                ("depth".to_string(), d.to_string()),
                                ("p_pre".to_string(), p.to_string()),
                            ]
                        })
                    })
                    .collect()
            }
            PlanKind::AblationPpre => {
                let depth: usize = take_parse(&mut map, "ablation_depth", 3usize)?;
                let default: Vec<usize> = (0..=depth).collect();
                let ppres: Vec<usize> = parse_list(&mut map, "p_pres", &default)?;
                ppres
                    .iter()
                    .map(|&p| {
                        vec![
                            ("depth".to_string(), depth.to_string()),
                            ("p_pre".to_string(), p.to_string()),
                        ]
                    })
                    .collect()
            }
            PlanKind::SweepAlpha => {
                let alphas: Vec<f64> = parse_list(&mut map, "alphas", &[0.0, 1e-1, 1e-3])?;
                alphas
                    .iter()
                    .map(|a| vec![("alpha".to_string(), a.to_string())])
                    .collect()
            }
            PlanKind::SweepClients => {
                let list: Vec<usize> = parse_list(&mut map, "clients_list", &[8usize, 16, 32])?;
                list.iter()
                    .map(|c| vec![("clients".to_string(), c.to_string())])
                    .collect()
            }
            PlanKind::SweepEpochs => {
                let list: Vec<usize> = parse_list(&mut map, "epochs_list", &[1usize, 5, 10])?;
                list.iter()
                    .map(|e| vec![("local_epochs".to_string(), e.to_string())])
                    .collect()
            }
            PlanKind::SweepRatio => {
                let list: Vec<usize> = parse_list(&mut map, "ratio_list", &[1usize, 2, 5])?;
                list.iter()
                    .map(|c| vec![("clients_per_round".to_string(), c.to_string())])
                    .collect()
            }
            PlanKind::SweepRounds => {
                let list: Vec<usize> = parse_list(&mut map, "rounds_list", &[5usize, 10, 20])?;
                list.iter()
                    .map(|r| vec![("rounds".to_string(), r.to_string())])
                    .collect()
            }
            PlanKind::ServerData => {
                let list: Vec<usize> = parse_list(&mut map, "server_images_list", &[0usize, 256])?;
                list.iter()
                    .map(|s| vec![("server_images".to_string(), s.to_string())])
                    .collect()
            }
            PlanKind::LinearOracle => {
                let list: Vec<f64> = parse_list(&mut map, "oracle_p_list", &[0.25, 0.5, 0.75])?;
                list.iter()
                    .map(|p| vec![("oracle_p".to_string(), p.to_string())])
                    .collect()
            }
        };

        let base = JobConfig::from_kv(&mut map)?;
        reject_unknown(&map)?;

        let plan = ExperimentPlan {
            kind,
            grid,
            seeds,
            out_dir: out_dir.to_path_buf(),
            base,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::Config("plan has an empty grid".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("plan has no seeds".into()));
        }
        self.base.fed.validate()?;
        Ok(())
    }

    pub fn job_ids(&self) -> Vec<String> {
        let mut ids = Vec::new();
        for point in &self.grid {
            for &seed in &self.seeds {
                ids.push(format!("{}__{}__s{}", self.kind.as_str(), grid_id(point), seed));
            }
        }
        ids
    }
}

#[derive(Debug, Clone)]
pub struct JobResult {
    pub metric: &'static str,
    pub value: f64,
    /// Optional accuracy-report row: (depth, p_pre, seed, label_fraction, accuracy).
    pub accuracy_row: Option<(usize, usize, u64, f64, f64)>,
}

fn job_dataset(cfg: &JobConfig, seed: u64) -> Result<(ImageBatch, ImageBatch)> {
    let full = match &cfg.data_path {
        Some(path) => load_dataset(path)?,
        None => {
            let mut rng = RngStream::new(seed).derive("data", 0);
            synth_dataset(cfg.n_per_class, cfg.n_classes, cfg.height, cfg.width, cfg.noise, &mut rng)?
        }
    };
    let mut split_rng = RngStream::new(seed).derive("split", 0);
    stratified_split(&full, cfg.test_fraction, &mut split_rng)
}

/// Pretrain per the fed config and return the lineage models in id order.
fn pretrain_models(cfg: &JobConfig, train: &ImageBatch, seed: u64, out: Option<&Path>) -> Result<(Vec<MaeParams>, f64)> {
    let mut fed = cfg.fed.clone();
    fed.seed = seed;
    let labels = train
        .labels
        .as_ref()
        .ok_or_else(|| Error::Invalid("pretraining data needs labels for partitioning".into()))?;
    let shards = partition(
        labels,
        train.n_classes,
        &PartitionSpec {
            clients: fed.clients,
            alpha: cfg.alpha,
            seed,
        },
    )?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        export_partition(&shards, &dir.join("partition.tsv"))?;
    }
    let state = run_pretraining(&fed, train, &shards, out)?;
    let final_loss = state.metrics.mean_loss_of_round(fed.rounds).unwrap_or(f64::NAN);
    if let Some(dir) = out {
        state.metrics.write_csv(&dir.join("metrics.csv"))?;
    }
    Ok((state.lineages.into_iter().map(|l| l.model).collect(), final_loss))
}

/// Sources for the cascade: trained lineages when blocks are pretrained, an
/// untrained template (dims only) otherwise.
fn cascade_sources(cfg: &JobConfig, train: &ImageBatch, seed: u64, job_dir: Option<&Path>) -> Result<(Vec<MaeParams>, f64)> {
    if cfg.p_pre == 0 {
        let mut fed = cfg.fed.clone();
        fed.seed = seed;
        let dims = fed.mae_dims(train);
        let template = MaeParams::init(dims, &mut RngStream::new(seed).derive("template", 0));
        return Ok((vec![template], f64::NAN));
    }
    let (models, loss) = pretrain_models(cfg, train, seed, job_dir)?;
    if cfg.fed.mode == FedMode::Relay && models.len() < cfg.p_pre {
        return Err(Error::Config(format!(
            "cascade wants {} pretrained blocks but the run has {} lineages",
            cfg.p_pre,
            models.len()
        )));
    }
    Ok((models, loss))
}

fn cascade_spec(cfg: &JobConfig, seed: u64, available: usize) -> CascadeSpec {
    let source = if available >= cfg.p_pre {
        CascadeSource::Lineages((0..cfg.p_pre).collect())
    } else {
        CascadeSource::Replicate(0)
    };
    CascadeSpec {
        depth: cfg.depth,
        pretrained: cfg.p_pre,
        source,
        init_seed: seed,
    }
}

fn assemble_refined_multiblock(
    cfg: &JobConfig,
    sources: &[MaeParams],
    seed: u64,
) -> Result<MultiBlockMae> {
    let refs: Vec<&MaeParams> = sources.iter().collect();
    let mb = assemble_multiblock_mae(&refs, cfg.depth, seed)?;
    if cfg.server_images == 0 || cfg.refine_epochs == 0 {
        return Ok(mb);
    }
    let mut server_rng = RngStream::new(seed).derive("server-data", 0);
    let per_class = cfg.server_images.div_ceil(cfg.n_classes);
    let server = synth_dataset(per_class, cfg.n_classes, cfg.height, cfg.width, cfg.noise, &mut server_rng)?;
    let keep: Vec<usize> = (0..cfg.server_images.min(server.n)).collect();
    let server = server.subset(&keep);
    server_refine(
        &mb,
        &server,
        cfg.refine_epochs,
        cfg.fed.batch_size,
        cfg.fed.mask_ratio,
        cfg.finetune_adam(),
        &RngStream::new(seed).derive("refine", 0),
    )
}

/// Run one job of the plan. `job_dir` receives artifacts for kinds that
/// produce more than a metric row.
pub fn run_job(
    kind: PlanKind,
    cfg: &JobConfig,
    seed: u64,
    job_dir: Option<&Path>,
) -> Result<JobResult> {
    match kind {
        PlanKind::Pretrain => {
            let (train, _) = job_dataset(cfg, seed)?;
            let (_, loss) = pretrain_models(cfg, &train, seed, job_dir)?;
            Ok(JobResult {
                metric: "final_loss",
                value: loss,
                accuracy_row: None,
            })
        }
        PlanKind::CascadeFinetune
        | PlanKind::AblationDepth
        | PlanKind::AblationPpre
        | PlanKind::SweepAlpha
        | PlanKind::SweepClients
        | PlanKind::SweepEpochs
        | PlanKind::SweepRatio
        | PlanKind::SweepRounds => {
            let (train, test) = job_dataset(cfg, seed)?;
            let (sources, _) = cascade_sources(cfg, &train, seed, None)?;
            let refs: Vec<&MaeParams> = sources.iter().collect();
            let spec = cascade_spec(cfg, seed, sources.len());
            let clf = cascade_assemble(&refs, &spec, train.n_classes)?;
            let (trained, _) = finetune(
                &clf,
                &train,
                cfg.fed.patch,
                cfg.label_fraction,
                cfg.finetune_epochs,
                cfg.finetune_batch,
                cfg.finetune_adam(),
                &RngStream::new(seed).derive("finetune", 0),
            )?;
            let acc = evaluate(&trained, &test, cfg.fed.patch)?;
            Ok(JobResult {
                metric: "accuracy",
                value: acc,
                accuracy_row: Some((cfg.depth, cfg.p_pre, seed, cfg.label_fraction, acc)),
            })
        }
        PlanKind::ServerData => {
            let (train, test) = job_dataset(cfg, seed)?;
            let (sources, _) = pretrain_models(cfg, &train, seed, None)?;
            let mb = assemble_refined_multiblock(cfg, &sources, seed)?;
            let clf = classifier_from_multiblock(&mb, train.n_classes, seed);
            let (trained, _) = finetune(
                &clf,
                &train,
                cfg.fed.patch,
                cfg.label_fraction,
                cfg.finetune_epochs,
                cfg.finetune_batch,
                cfg.finetune_adam(),
                &RngStream::new(seed).derive("finetune", 0),
            )?;
            let acc = evaluate(&trained, &test, cfg.fed.patch)?;
            Ok(JobResult {
                metric: "accuracy",
                value: acc,
                accuracy_row: Some((cfg.depth, cfg.depth, seed, cfg.label_fraction, acc)),
            })
        }
        PlanKind::LinearOracle => {
            let lambda = if cfg.lambda > 0.0 { cfg.lambda } else { 1e-8 };
            let spec = CorruptionSpec {
                semantics: MaskSemantics::Bernoulli,
                p: cfg.oracle_p,
                num_patches: cfg.oracle_d,
            };
            let row = run_oracle_case(
                cfg.oracle_clients,
                cfg.oracle_d,
                cfg.oracle_n,
                cfg.oracle_m,
                spec,
                lambda,
                cfg.gd_steps,
                &mut RngStream::new(seed).derive("oracle", 0),
            )?;
            if let Some(dir) = job_dir {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("oracle.csv");
                let text = format!("{}\n{}\n", oracle_csv_header(), row.to_csv());
                std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            }
            Ok(JobResult {
                metric: "residual_gap",
                value: row.gap,
                accuracy_row: None,
            })
        }
        PlanKind::Reconstruct => {
            let (train, test) = job_dataset(cfg, seed)?;
            let (sources, _) = pretrain_models(cfg, &train, seed, None)?;
            let mb = assemble_refined_multiblock(cfg, &sources, seed)?;
            let rows: Vec<usize> = (0..cfg.dump_rows.min(test.n)).collect();
            let sample = test.subset(&rows);
            let dir = job_dir.ok_or_else(|| Error::Invalid("reconstruct needs an output directory".into()))?;
            reconstruct_dump(
                &mb,
                &sample,
                cfg.fed.mask_ratio,
                &mut RngStream::new(seed).derive("dump", 0),
                &dir.join("grid.ppm"),
            )?;
            let loss = multiblock_eval_loss(
                &mb,
                &test,
                cfg.fed.patch,
                cfg.fed.mask_ratio,
                &mut RngStream::new(seed).derive("eval-mask", 0),
            )?;
            Ok(JobResult {
                metric: "recon_loss",
                value: loss,
                accuracy_row: None,
            })
        }
    }
}

/// Execute every (grid point, seed) job, skipping completed ones, then merge
/// a summary. Any job failure is recorded and turned into an error after the
/// rest of the plan has run.
pub fn run_plan(plan: &ExperimentPlan) -> Result<()> {
    plan.validate()?;
    let jobs_dir = plan.out_dir.join("jobs");
    std::fs::create_dir_all(&jobs_dir).map_err(|e| Error::io(&jobs_dir, e))?;

    // Manifest of expected jobs, for the summarizer's missing-row report.
    let manifest_path = plan.out_dir.join("plan_manifest.txt");
    let manifest = plan.job_ids().join("\n") + "\n";
    std::fs::write(&manifest_path, &manifest).map_err(|e| Error::io(&manifest_path, e))?;

    let mut failures: Vec<String> = Vec::new();
    for point in &plan.grid {
        for &seed in &plan.seeds {
            let id = format!("{}__{}__s{}", plan.kind.as_str(), grid_id(point), seed);
            let row_path = jobs_dir.join(format!("{id}.csv"));
            if row_path.exists() {
                continue;
            }
            let mut cfg = plan.base.clone();
            let mut bad_override = None;
            for (k, v) in point {
                if let Err(e) = cfg.apply(k, v) {
                    bad_override = Some(e);
                }
            }
            if let Some(e) = bad_override {
                return Err(e);
            }
            let job_dir = plan.out_dir.join("artifacts").join(&id);
            match run_job(plan.kind, &cfg, seed, Some(&job_dir)) {
                Ok(result) => {
                    let mut text = format!(
                        "grid,seed,metric,value\n{},{},{},{}\n",
                        grid_id(point),
                        seed,
                        result.metric,
                        result.value
                    );
                    if let Some((depth, p_pre, s, frac, acc)) = result.accuracy_row {
                        text.push_str(&format!("# accuracy,{depth},{p_pre},{s},{frac},{acc}\n"));
                    }
                    let tmp = row_path.with_extension("csv.tmp");
                    std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
                    std::fs::rename(&tmp, &row_path).map_err(|e| Error::io(&row_path, e))?;
                }
                Err(e) => failures.push(format!("{id}: {e}")),
            }
        }
    }

    if !failures.is_empty() {
        let fail_path = plan.out_dir.join("failures.txt");
        std::fs::write(&fail_path, failures.join("\n") + "\n").map_err(|e| Error::io(&fail_path, e))?;
        return Err(Error::Job(format!(
            "{} of {} jobs failed; see failures.txt",
            failures.len(),
            plan.job_ids().len()
        )));
    }
    summarize(&plan.out_dir)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SummaryGroup {
    pub grid: String,
    pub count: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

/// Median and Tukey-hinge quartiles.
fn median_of(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn quartiles(values: &mut Vec<f64>) -> (f64, f64, f64) {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite metrics"));
    let n = values.len();
    let med = median_of(values);
    if n == 1 {
        return (med, med, med);
    }
    let half = n / 2;
    let lower = &values[..half];
    let upper = &values[n - half..];
    (median_of(lower), med, median_of(upper))
}

/// Merge job rows into summary.csv and a plain-text table, grouped by grid
/// point in lexicographic order. Missing jobs (per the manifest) are listed,
/// never fabricated.
pub fn summarize(dir: &Path) -> Result<Vec<SummaryGroup>> {
    let jobs_dir = dir.join("jobs");
    let mut rows: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut metric_name = String::from("value");
    let mut acc_rows: Vec<String> = Vec::new();
    let mut seen_jobs: Vec<String> = Vec::new();

    let entries = std::fs::read_dir(&jobs_dir).map_err(|e| Error::io(&jobs_dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    for path in &paths {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        seen_jobs.push(
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
        );
        for line in text.lines().skip(1) {
            if let Some(acc) = line.strip_prefix("# accuracy,") {
                acc_rows.push(acc.to_string());
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(Error::Parse(format!("{}: bad row {line:?}", path.display())));
            }
            metric_name = fields[2].to_string();
            let value: f64 = fields[3]
                .parse()
                .map_err(|_| Error::Parse(format!("{}: bad value {line:?}", path.display())))?;
            rows.entry(fields[0].to_string()).or_default().push(value);
        }
    }

    let mut groups = Vec::new();
    let mut summary = format!("grid,count,{metric_name}_median,q1,q3\n");
    for (grid, mut values) in rows {
        let count = values.len();
        let (q1, median, q3) = quartiles(&mut values);
        summary.push_str(&format!("{grid},{count},{median},{q1},{q3}\n"));
        groups.push(SummaryGroup {
            grid,
            count,
            median,
            q1,
            q3,
        });
    }
    let summary_path = dir.join("summary.csv");
    std::fs::write(&summary_path, &summary).map_err(|e| Error::io(&summary_path, e))?;

    // Missing jobs per the manifest.
    let mut missing: Vec<String> = Vec::new();
    let manifest_path = dir.join("plan_manifest.txt");
    if manifest_path.exists() {
        let manifest = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        for expected in manifest.lines().filter(|l| !l.is_empty()) {
            if !seen_jobs.iter().any(|s| s == expected) {
                missing.push(expected.to_string());
            }
        }
    }

    let mut table = String::new();
    table.push_str(&format!(
        "{:<40} {:>5} {:>12} {:>12} {:>12}\n",
        "grid", "n", "median", "q1", "q3"
    ));
    for g in &groups {
        table.push_str(&format!(
            "{:<40} {:>5} {:>12.6} {:>12.6} {:>12.6}\n",
            g.grid, g.count, g.median, g.q1, g.q3
        ));
    }
    if !missing.is_empty() {
        table.push_str("\nmissing jobs:\n");
        for m in &missing {
            table.push_str(&format!("  {m}\n"));
        }
    }
    let table_path = dir.join("table.txt");
    std::fs::write(&table_path, &table).map_err(|e| Error::io(&table_path, e))?;

    if !acc_rows.is_empty() {
        let mut acc = String::from("depth,p_pre,seed,label_fraction,accuracy\n");
        acc_rows.sort();
        for r in &acc_rows {
            acc.push_str(r);
            acc.push('\n');
        }
        let acc_path = dir.join("accuracy.csv");
        std::fs::write(&acc_path, &acc).map_err(|e| Error::io(&acc_path, e))?;
    }
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_kv;

    fn quick_base() -> String {
        // Tiny everything so plan tests stay fast.
        "n_per_class=12\nn_classes=2\nheight=8\nwidth=8\nnoise=0.3\n\
         clients=2\nrounds=2\nlocal_epochs=1\nclients_per_round=1\nlineages=1\n\
         batch_size=8\nd_enc=16\nd_dec=8\nn_heads=2\npatch=4\n\
         depth=1\np_pre=1\nfinetune_epochs=2\nfinetune_batch=8\n"
            .to_string()
    }

    #[test]
    fn plan_parses_and_expands_grids() {
        let text = format!("kind=ablation-depth\nseeds=1,2\ndepths=1,2\n{}", quick_base());
        let map = parse_kv(&text).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let plan = ExperimentPlan::from_kv(map, dir.path()).unwrap();
        // depths {1,2} x p_pre {0,D} = 4 grid points, 2 seeds = 8 jobs
        assert_eq!(plan.grid.len(), 4);
        assert_eq!(plan.job_ids().len(), 8);
    }

    #[test]
    fn plan_rejects_unknown_keys_and_empty_grid() {
        let dir = tempfile::tempdir().unwrap();
        let map = parse_kv("kind=sweep-alpha\nbogus_key=1\n").unwrap();
        assert!(ExperimentPlan::from_kv(map, dir.path()).is_err());

        let map = parse_kv("kind=sweep-alpha\nalphas=\n").unwrap();
        assert!(ExperimentPlan::from_kv(map, dir.path()).is_err());
    }

    #[test]
    fn oracle_plan_runs_end_to_end() {
        let text = "kind=linear-oracle\nseeds=1,2\noracle_p_list=0.25,0.5\n\
                    oracle_d=4\noracle_n=4\noracle_m=5\ngd_steps=300\noracle_clients=1\n";
        let map = parse_kv(text).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let plan = ExperimentPlan::from_kv(map, dir.path()).unwrap();
        run_plan(&plan).unwrap();
        assert!(dir.path().join("summary.csv").exists());
        assert!(dir.path().join("table.txt").exists());
        let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert_eq!(summary.lines().count(), 3, "{summary}");

        // All gaps should be non-negative up to GD tolerance.
        for line in summary.lines().skip(1) {
            let median: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
            assert!(median >= -1e-6);
        }
    }

    #[test]
    fn rerun_skips_completed_jobs() {
        let text = "kind=linear-oracle\nseeds=3\noracle_p_list=0.5\n\
                    oracle_d=4\noracle_n=4\noracle_m=4\ngd_steps=200\noracle_clients=1\n";
        let map = parse_kv(text).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let plan = ExperimentPlan::from_kv(map, dir.path()).unwrap();
        run_plan(&plan).unwrap();
        let job = dir
            .path()
            .join("jobs")
            .join("linear-oracle__oracle_p=0.5__s3.csv");
        let before = std::fs::metadata(&job).unwrap().modified().unwrap();
        run_plan(&plan).unwrap();
        let after = std::fs::metadata(&job).unwrap().modified().unwrap();
        assert_eq!(before, after, "job was re-run");
    }

    #[test]
    fn cascade_finetune_job_produces_accuracy() {
        let text = format!("kind=cascade-finetune\nseeds=5\n{}", quick_base());
        let map = parse_kv(&text).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let plan = ExperimentPlan::from_kv(map, dir.path()).unwrap();
        run_plan(&plan).unwrap();
        let acc = std::fs::read_to_string(dir.path().join("accuracy.csv")).unwrap();
        assert!(acc.starts_with("depth,p_pre,seed,label_fraction,accuracy\n"));
        assert_eq!(acc.lines().count(), 2);
        let row: Vec<&str> = acc.lines().nth(1).unwrap().split(',').collect();
        let accuracy: f64 = row[4].parse().unwrap();
        assert!((0.0..=1.0).contains(&accuracy));
    }

    #[test]
    fn summarize_medians_match_by_hand() {
        let dir = tempfile::tempdir().unwrap();
        let jobs = dir.path().join("jobs");
        std::fs::create_dir_all(&jobs).unwrap();
        for (i, v) in [0.6, 0.7, 0.8, 0.9, 1.0].iter().enumerate() {
            std::fs::write(
                jobs.join(format!("k__g=1__s{i}.csv")),
                format!("grid,seed,metric,value\ng=1,{i},accuracy,{v}\n"),
            )
            .unwrap();
        }
        let groups = summarize(dir.path()).unwrap();
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].median, 0.8);
        assert_eq!(groups[0].count, 5);
        // groups in the summary CSV are sorted lexicographically
        std::fs::write(
            jobs.join("k__a=2__s0.csv"),
            "grid,seed,metric,value\na=2,0,accuracy,0.5\n",
        )
        .unwrap();
        let groups = summarize(dir.path()).unwrap();
        assert_eq!(groups[0].grid, "a=2");
        assert_eq!(groups[1].grid, "g=1");
    }

    #[test]
    fn summarize_lists_missing_jobs() {
        let dir = tempfile::tempdir().unwrap();
        let jobs = dir.path().join("jobs");
        std::fs::create_dir_all(&jobs).unwrap();
        std::fs::write(
            jobs.join("k__g=1__s0.csv"),
            "grid,seed,metric,value\ng=1,0,accuracy,0.5\n",
        )
        .unwrap();
        std::fs::write(
            dir.path().join("plan_manifest.txt"),
            "k__g=1__s0\nk__g=1__s1\n",
        )
        .unwrap();
        summarize(dir.path()).unwrap();
        let table = std::fs::read_to_string(dir.path().join("table.txt")).unwrap();
        assert!(table.contains("missing jobs"));
        assert!(table.contains("k__g=1__s1"));
    }
}
