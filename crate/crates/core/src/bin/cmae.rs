//! Command-line entry points: federated pre-training, cascade assembly,
//! fine-tuning, the linear-reconstruction oracle, reconstruction dumps,
//! experiment plans and summaries.
//!
//! Exit codes: 0 success, 1 validation, 2 job failure, 3 I/O.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cmae::cascade::{
    assemble_multiblock_mae, cascade_assemble, classifier_checkpoint_meta,
    classifier_from_checkpoint, evaluate, finetune, multiblock_checkpoint_meta,
    multiblock_from_checkpoint, reconstruct_dump, CascadeSource, CascadeSpec,
};
use cmae::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use cmae::config::{parse_kv, read_kv_file, reject_unknown, KvMap};
use cmae::data::{load_dataset, stratified_split, MaskSemantics};
use cmae::error::{Error, Result};
use cmae::fed::mae_from_checkpoint;
use cmae::mae::MaeParams;
use cmae::oracle::{oracle_csv_header, run_oracle_case, CorruptionSpec};
use cmae::plan::{run_job, run_plan, summarize, ExperimentPlan, JobConfig, PlanKind};
use cmae::rng::RngStream;

#[derive(Parser)]
#[command(name = "cmae", about = "Federated one-block MAE pre-training with cascade assembly")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Federated pre-training; writes checkpoints, metrics.csv, partition.tsv.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset file (overrides the config's `data` key; defaults to the
        /// synthetic generator).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Assemble pre-trained one-block checkpoints into a deeper model.
    Cascade {
        /// Comma-separated mae checkpoint paths, lineage order.
        #[arg(long, value_delimiter = ',')]
        sources: Vec<PathBuf>,
        #[arg(long)]
        depth: usize,
        /// Number of pretrained blocks (defaults to depth).
        #[arg(long)]
        p_pre: Option<usize>,
        /// Fill every pretrained slot from this source index instead of
        /// using them in order.
        #[arg(long)]
        replicate: Option<usize>,
        #[arg(long, default_value_t = 4)]
        n_classes: usize,
        /// classifier | mae
        #[arg(long, default_value = "classifier")]
        kind: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fine-tune a classifier checkpoint on a labeled dataset.
    Finetune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        label_fraction: f64,
        #[arg(long, default_value_t = 8)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0.25)]
        test_fraction: f64,
        #[arg(long, default_value_t = 4)]
        patch: usize,
        /// Reported in the accuracy row; how many blocks were pretrained.
        #[arg(long)]
        p_pre: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Closed-form vs gradient-descent reconstruction residuals.
    Oracle {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Masked/fresh/model/ground-truth reconstruction grid (PPM).
    Reconstruct {
        /// multiblock-mae or mae checkpoint
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.75)]
        ratio: f64,
        #[arg(long, default_value_t = 4)]
        rows: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a full experiment plan (grid x seeds) with a merged summary.
    Plan {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute summary.csv and table.txt from completed jobs.
    Summarize {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<KvMap> {
    match path {
        Some(p) => read_kv_file(p),
        None => parse_kv(""),
    }
}

fn cmd_pretrain(config: Option<PathBuf>, data: Option<PathBuf>, out: PathBuf, seed: Option<u64>) -> Result<()> {
    let mut map = load_config(&config)?;
    let mut cfg = JobConfig::from_kv(&mut map)?;
    reject_unknown(&map)?;
    if let Some(d) = data {
        cfg.data_path = Some(d);
    }
    let seed = seed.unwrap_or(cfg.fed.seed);
    // Always leave final-round checkpoints behind.
    if cfg.fed.checkpoint_every == 0 {
        cfg.fed.checkpoint_every = cfg.fed.rounds.max(1);
    }
    let result = run_job(PlanKind::Pretrain, &cfg, seed, Some(&out))?;
    println!("pretrain done: final mean loss {}", result.value);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_cascade(
    sources: Vec<PathBuf>,
    depth: usize,
    p_pre: Option<usize>,
    replicate: Option<usize>,
    n_classes: usize,
    kind: String,
    out: PathBuf,
    seed: u64,
) -> Result<()> {
    if sources.is_empty() {
        return Err(Error::Invalid("cascade needs at least one source checkpoint".into()));
    }
    let models: Vec<MaeParams> = sources
        .iter()
        .map(|p| mae_from_checkpoint(&load_checkpoint(p)?))
        .collect::<Result<_>>()?;
    let refs: Vec<&MaeParams> = models.iter().collect();
    let pretrained = p_pre.unwrap_or(depth);
    match kind.as_str() {
        "classifier" => {
            let source = match replicate {
                Some(l) => CascadeSource::Replicate(l),
                None => CascadeSource::Lineages((0..pretrained).collect()),
            };
            let spec = CascadeSpec {
                depth,
                pretrained,
                source,
                init_seed: seed,
            };
            let clf = cascade_assemble(&refs, &spec, n_classes)?;
            let ckpt = Checkpoint::from_model("classifier", classifier_checkpoint_meta(&clf.dims), &clf);
            save_checkpoint(&ckpt, &out)?;
            println!("classifier written to {}", out.display());
        }
        "mae" => {
            let mb = assemble_multiblock_mae(&refs, depth, seed)?;
            let ckpt = Checkpoint::from_model("multiblock-mae", multiblock_checkpoint_meta(&mb), &mb);
            save_checkpoint(&ckpt, &out)?;
            println!("multi-block MAE written to {}", out.display());
        }
        other => return Err(Error::Invalid(format!("unknown cascade kind {other:?} (classifier|mae)"))),
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_finetune(
    model: PathBuf,
    data: PathBuf,
    label_fraction: f64,
    epochs: usize,
    batch: usize,
    lr: f64,
    test_fraction: f64,
    patch: usize,
    p_pre: Option<usize>,
    out: PathBuf,
    seed: u64,
) -> Result<()> {
    let clf = classifier_from_checkpoint(&load_checkpoint(&model)?)?;
    let full = load_dataset(&data)?;
    let mut split_rng = RngStream::new(seed).derive("split", 0);
    let (train, test) = stratified_split(&full, test_fraction, &mut split_rng)?;
    let adam = cmae::optim::AdamConfig {
        lr,
        ..Default::default()
    };
    let (trained, curve) = finetune(
        &clf,
        &train,
        patch,
        label_fraction,
        epochs,
        batch,
        adam,
        &RngStream::new(seed).derive("finetune", 0),
    )?;
    let accuracy = evaluate(&trained, &test, patch)?;

    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let ckpt = Checkpoint::from_model("classifier", classifier_checkpoint_meta(&trained.dims), &trained);
    save_checkpoint(&ckpt, &out.join("model.ckpt"))?;
    let acc_path = out.join("accuracy.csv");
    let row = format!(
        "depth,p_pre,seed,label_fraction,accuracy\n{},{},{},{},{}\n",
        trained.dims.depth,
        p_pre.unwrap_or(trained.dims.depth),
        seed,
        label_fraction,
        accuracy
    );
    std::fs::write(&acc_path, row).map_err(|e| Error::io(&acc_path, e))?;
    let curve_text = curve
        .iter()
        .enumerate()
        .map(|(e, l)| format!("{e},{l}"))
        .collect::<Vec<_>>()
        .join("\n");
    let curve_path = out.join("loss_curve.csv");
    std::fs::write(&curve_path, format!("epoch,loss\n{curve_text}\n")).map_err(|e| Error::io(&curve_path, e))?;
    println!("fine-tune done: test accuracy {accuracy}");
    Ok(())
}

fn cmd_oracle(config: Option<PathBuf>, out: PathBuf, seed: Option<u64>) -> Result<()> {
    let mut map = load_config(&config)?;
    let p_list: Vec<f64> = match map.remove("oracle_p_list") {
        None => vec![0.25, 0.5, 0.75],
        Some(v) => v
            .split(',')
            .map(|t| t.trim().parse().map_err(|_| Error::Config(format!("bad p {t:?}"))))
            .collect::<Result<_>>()?,
    };
    let seeds: Vec<u64> = match map.remove("seeds") {
        None => vec![seed.unwrap_or(0)],
        Some(v) => v
            .split(',')
            .map(|t| t.trim().parse().map_err(|_| Error::Config(format!("bad seed {t:?}"))))
            .collect::<Result<_>>()?,
    };
    let cfg = JobConfig::from_kv(&mut map)?;
    reject_unknown(&map)?;

    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut csv = format!("{}\n", oracle_csv_header());
    for &p in &p_list {
        for &s in &seeds {
            let lambda = if cfg.lambda > 0.0 { cfg.lambda } else { 1e-8 };
            let spec = CorruptionSpec {
                semantics: MaskSemantics::Bernoulli,
                p,
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
                &mut RngStream::new(s).derive("oracle", 0),
            )?;
            csv.push_str(&row.to_csv());
            csv.push('\n');
        }
    }
    let path = out.join("oracle.csv");
    std::fs::write(&path, &csv).map_err(|e| Error::io(&path, e))?;
    println!("oracle report written to {}", path.display());
    Ok(())
}

fn cmd_reconstruct(model: PathBuf, data: PathBuf, ratio: f64, rows: usize, out: PathBuf, seed: u64) -> Result<()> {
    let ckpt = load_checkpoint(&model)?;
    let mb = match ckpt.kind.as_str() {
        "multiblock-mae" => multiblock_from_checkpoint(&ckpt)?,
        "mae" => {
            let mae = mae_from_checkpoint(&ckpt)?;
            assemble_multiblock_mae(&[&mae], 1, seed)?
        }
        other => {
            return Err(Error::Parse(format!(
                "reconstruct expects a mae or multiblock-mae checkpoint, found {other}"
            )))
        }
    };
    let images = load_dataset(&data)?;
    let keep: Vec<usize> = (0..rows.min(images.n)).collect();
    let sample = images.subset(&keep);
    let mut rng = RngStream::new(seed).derive("dump", 0);
    reconstruct_dump(&mb, &sample, ratio, &mut rng, &out)?;
    println!("reconstruction grid written to {}", out.display());
    Ok(())
}

fn cmd_plan(config: PathBuf, out: PathBuf) -> Result<()> {
    let map = read_kv_file(&config)?;
    let plan = ExperimentPlan::from_kv(map, &out)?;
    run_plan(&plan)?;
    println!("plan complete; summary at {}", out.join("summary.csv").display());
    Ok(())
}

fn run() -> Result<()> {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            let _ = e.print();
            return Ok(());
        }
        Err(e) => {
            // clap's own message, our validation exit code
            let _ = e.print();
            return Err(Error::Invalid("argument parsing failed".into()));
        }
    };
    match cli.command {
        Command::Pretrain { config, data, out, seed } => cmd_pretrain(config, data, out, seed),
        Command::Cascade {
            sources,
            depth,
            p_pre,
            replicate,
            n_classes,
            kind,
            out,
            seed,
        } => cmd_cascade(sources, depth, p_pre, replicate, n_classes, kind, out, seed),
        Command::Finetune {
            model,
            data,
            label_fraction,
            epochs,
            batch,
            lr,
            test_fraction,
            patch,
            p_pre,
            out,
            seed,
        } => cmd_finetune(
            model,
            data,
            label_fraction,
            epochs,
            batch,
            lr,
            test_fraction,
            patch,
            p_pre,
            out,
            seed,
        ),
        Command::Oracle { config, out, seed } => cmd_oracle(config, out, seed),
        Command::Reconstruct {
            model,
            data,
            ratio,
            rows,
            out,
            seed,
        } => cmd_reconstruct(model, data, ratio, rows, out, seed),
        Command::Plan { config, out } => cmd_plan(config, out),
        Command::Summarize { dir } => summarize(&dir).map(|_| ()),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
