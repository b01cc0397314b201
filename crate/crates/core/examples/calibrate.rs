//! Calibration harness for the directional experiments: prints per-seed
//! accuracies for (depth, p_pre) arms plus wall times, so the acceptance
//! scales can be pinned with comfortable margins.

use std::time::Instant;

use cmae::cascade::{
    assemble_multiblock_mae, cascade_assemble, classifier_from_multiblock, evaluate, finetune,
    multiblock_eval_loss, server_refine, CascadeSpec, MultiBlockMae,
};
use cmae::data::{stratified_split, synth_dataset, ImageBatch};
use cmae::fed::{run_pretraining, FedRunConfig};
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
    )
    .unwrap();
    let t0 = Instant::now();
    let state = run_pretraining(&fed, &train, &shards, None).unwrap();
    println!(
        "  seed {seed}: pretrain {:.1}s, loss {:.4} -> {:.4}",
        t0.elapsed().as_secs_f64(),
        state.metrics.mean_loss_of_round(1).unwrap(),
        state.metrics.mean_loss_of_round(fed.rounds).unwrap()
    );
    Fixture {
        train,
        test,
        sources: state.lineages.into_iter().map(|l| l.model).collect(),
    }
}

fn arm(fix: &Fixture, cfg: &JobConfig, seed: u64, depth: usize, p_pre: usize) -> f64 {
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
    let (trained, _) = finetune(
        &clf,
        &fix.train,
        cfg.fed.patch,
        cfg.label_fraction,
        cfg.finetune_epochs,
        cfg.finetune_batch,
        AdamConfig { lr: cfg.finetune_lr, ..Default::default() },
        &RngStream::new(seed).derive("finetune", 0),
    )
    .unwrap();
    evaluate(&trained, &fix.test, cfg.fed.patch).unwrap()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_seeds: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(2);

    let mut cfg = JobConfig::default();
    cfg.fed.clients = 8;
    cfg.fed.rounds = 30;
    cfg.fed.local_epochs = 2;
    cfg.fed.clients_per_round = 3;
    cfg.fed.lineages = 3;
    cfg.fed.batch_size = 16;
    cfg.n_per_class = 64;
    cfg.noise = 0.5;
    cfg.finetune_epochs = 8;
    cfg.finetune_batch = 32;

    let seeds: Vec<u64> = (0..n_seeds as u64).map(|i| 101 + 101 * i).collect();
    println!("pretraining fixtures ({} seeds)...", seeds.len());
    let t_all = Instant::now();
    let fixtures: Vec<Fixture> = seeds.iter().map(|&s| build_fixture(s, &cfg)).collect();

    for depth in [1usize, 2, 3] {
        for p_pre in [0usize, 1, 2, 3] {
            if p_pre > depth {
                continue;
            }
            if depth < 3 && p_pre != 0 && p_pre != depth {
                continue;
            }
            let t0 = Instant::now();
            let accs: Vec<f64> = fixtures
                .iter()
                .zip(&seeds)
                .map(|(f, &s)| arm(f, &cfg, s, depth, p_pre))
                .collect();
            let mut sorted = accs.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let median = sorted[sorted.len() / 2];
            println!(
                "D={depth} P={p_pre}: median {median:.4} accs {:?} ({:.1}s)",
                accs.iter().map(|a| (a * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
                t0.elapsed().as_secs_f64()
            );
        }
    }

    // Server refinement and reconstruction-loss directions at depth 3.
    for (fix, &seed) in fixtures.iter().zip(&seeds) {
        let refs: Vec<&MaeParams> = fix.sources.iter().collect();
        let mb = assemble_multiblock_mae(&refs, 3, seed).unwrap();
        let fresh = MultiBlockMae::fresh(mb.dims, 3, &mut RngStream::new(seed).derive("fresh", 0));
        let lp = multiblock_eval_loss(&mb, &fix.test, 4, 0.75, &mut RngStream::new(7).derive("m", 0)).unwrap();
        let lf = multiblock_eval_loss(&fresh, &fix.test, 4, 0.75, &mut RngStream::new(7).derive("m", 0)).unwrap();

        let mut srv_rng = RngStream::new(seed).derive("server", 0);
        let server = synth_dataset(64, 4, 16, 16, cfg.noise, &mut srv_rng).unwrap();
        let t0 = Instant::now();
        let refined = server_refine(&mb, &server, 3, 32, 0.75, AdamConfig::default(), &RngStream::new(seed).derive("r", 0)).unwrap();
        let refine_time = t0.elapsed().as_secs_f64();

        let clf_ref = classifier_from_multiblock(&refined, 4, seed);
        let clf_unref = classifier_from_multiblock(&mb, 4, seed);
        let ft = |clf: &cmae::cascade::ViTClassifier| {
            let (m, _) = finetune(
                clf, &fix.train, 4, 1.0, cfg.finetune_epochs, cfg.finetune_batch,
                AdamConfig::default(), &RngStream::new(seed).derive("ft2", 0),
            ).unwrap();
            evaluate(&m, &fix.test, 4).unwrap()
        };
        let t1 = Instant::now();
        let acc_ref = ft(&clf_ref);
        let acc_unref = ft(&clf_unref);
        println!(
            "seed {seed}: recon pre {lp:.4} fresh {lf:.4} | refine {refine_time:.1}s acc refined {acc_ref:.4} unrefined {acc_unref:.4} ({:.1}s)",
            t1.elapsed().as_secs_f64()
        );
    }
    println!("total {:.1}s", t_all.elapsed().as_secs_f64());
}
