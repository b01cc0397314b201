//! Probe: semi-supervised regime (10% labels), larger pretrain pool.

use std::time::Instant;

use cmae::cascade::{cascade_assemble, evaluate, finetune, CascadeSpec};
use cmae::data::{stratified_split, synth_dataset, ImageBatch};
use cmae::fed::run_pretraining;
use cmae::mae::MaeParams;
use cmae::optim::AdamConfig;
use cmae::partition::{partition, PartitionSpec};
use cmae::plan::JobConfig;
use cmae::rng::RngStream;

struct Fixture {
    train: ImageBatch,
    test: ImageBatch,
    sources: Vec<MaeParams>,
}

fn cfg() -> JobConfig {
    let mut cfg = JobConfig::default();
    cfg.fed.clients = 8;
    cfg.fed.rounds = 60;
    cfg.fed.local_epochs = 2;
    cfg.fed.clients_per_round = 3;
    cfg.fed.lineages = 3;
    cfg.fed.batch_size = 16;
    cfg.fed.d_enc = 32;
    cfg.fed.d_dec = 16;
    cfg.fed.n_heads = 4;
    cfg.n_per_class = 96;
    cfg.noise = 0.5;
    cfg.label_fraction = 0.1;
    cfg.finetune_epochs = 60;
    cfg.finetune_batch = 16;
    cfg
}

fn build_fixture(seed: u64, cfg: &JobConfig) -> Fixture {
    let mut rng = RngStream::new(seed).derive("data", 0);
    let full = synth_dataset(cfg.n_per_class, cfg.n_classes, cfg.height, cfg.width, cfg.noise, &mut rng).unwrap();
    let mut split_rng = RngStream::new(seed).derive("split", 0);
    let (train, test) = stratified_split(&full, cfg.test_fraction, &mut split_rng).unwrap();
    let mut fed = cfg.fed.clone();
    fed.seed = seed;
    let shards = partition(
        train.labels.as_ref().unwrap(),
        train.n_classes,
        &PartitionSpec { clients: fed.clients, alpha: 0.0, seed },
    ).unwrap();
    let t0 = Instant::now();
    let state = run_pretraining(&fed, &train, &shards, None).unwrap();
    println!("  seed {seed}: pretrain {:.1}s loss {:.4} -> {:.4}",
        t0.elapsed().as_secs_f64(),
        state.metrics.mean_loss_of_round(1).unwrap(),
        state.metrics.mean_loss_of_round(fed.rounds).unwrap());
    Fixture { train, test, sources: state.lineages.into_iter().map(|l| l.model).collect() }
}

fn arm(fix: &Fixture, cfg: &JobConfig, seed: u64, depth: usize, p_pre: usize) -> (f64, f64, f64) {
    let template;
    let refs: Vec<&MaeParams> = if p_pre == 0 {
        let dims = cfg.fed.mae_dims(&fix.train);
        template = MaeParams::init(dims, &mut RngStream::new(seed).derive("template", 0));
        vec![&template]
    } else {
        fix.sources.iter().collect()
    };
    let spec = CascadeSpec::new(depth, p_pre, seed);
    let clf = cascade_assemble(&refs, &spec, fix.train.n_classes).unwrap();
    let t0 = Instant::now();
    let (trained, curve) = finetune(
        &clf, &fix.train, cfg.fed.patch, cfg.label_fraction,
        cfg.finetune_epochs, cfg.finetune_batch,
        AdamConfig { lr: cfg.finetune_lr, ..Default::default() },
        &RngStream::new(seed).derive("finetune", 0),
    ).unwrap();
    (evaluate(&trained, &fix.test, cfg.fed.patch).unwrap(), *curve.last().unwrap(), t0.elapsed().as_secs_f64())
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_seeds: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(2);
    let cfg = cfg();
    let seeds: Vec<u64> = (0..n_seeds as u64).map(|i| 101 + 101 * i).collect();
    let fixtures: Vec<Fixture> = seeds.iter().map(|&s| build_fixture(s, &cfg)).collect();

    for (depth, p_pre) in [(1, 0), (1, 1), (2, 0), (2, 2), (3, 0), (3, 1), (3, 2), (3, 3)] {
        let results: Vec<(f64, f64, f64)> = fixtures.iter().zip(&seeds)
            .map(|(f, &s)| arm(f, &cfg, s, depth, p_pre)).collect();
        let accs: Vec<f64> = results.iter().map(|r| r.0).collect();
        let losses: Vec<f64> = results.iter().map(|r| r.1).collect();
        let time: f64 = results.iter().map(|r| r.2).sum();
        let mut sorted = accs.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        println!(
            "D={depth} P={p_pre}: median {:.4} accs {:?} end-losses {:?} ({time:.1}s)",
            sorted[sorted.len() / 2],
            accs.iter().map(|a| (a * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            losses.iter().map(|l| (l * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        );
    }
}
