//! Direction probe: (depth, p_pre) arms under candidate fixture settings.

use std::time::Instant;
use cmae::cascade::{cascade_assemble, evaluate, finetune, CascadeSpec};
use cmae::data::{stratified_split, synth_dataset, ImageBatch};
use cmae::fed::run_pretraining;
use cmae::mae::MaeParams;
use cmae::optim::AdamConfig;
use cmae::partition::{partition, PartitionSpec};
use cmae::plan::JobConfig;
use cmae::rng::RngStream;

struct Fix { train: ImageBatch, test: ImageBatch, sources: Vec<MaeParams> }

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_seeds: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(2);
    let pre_lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(3e-4);
    let noise: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.5);
    let ft_epochs: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(150);
    let label_frac: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(0.1);
    let rounds: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(60);

    let mut cfg = JobConfig::default();
    cfg.fed.clients = 8;
    cfg.fed.rounds = rounds;
    cfg.fed.local_epochs = 2;
    cfg.fed.clients_per_round = 3;
    cfg.fed.lineages = 3;
    cfg.fed.batch_size = 16;
    cfg.fed.d_enc = 32;
    cfg.fed.d_dec = 16;
    cfg.fed.adam.lr = pre_lr;
    cfg.n_per_class = 96;
    cfg.noise = noise;
    cfg.label_fraction = label_frac;
    cfg.finetune_epochs = ft_epochs;
    cfg.finetune_batch = 16;
    println!("pre_lr={pre_lr} noise={noise} ft={ft_epochs} lf={label_frac} R={rounds}");

    let seeds: Vec<u64> = (0..n_seeds as u64).map(|i| 101 + 101 * i).collect();
    let t0 = Instant::now();
    let fixtures: Vec<Fix> = seeds.iter().map(|&seed| {
        let mut rng = RngStream::new(seed).derive("data", 0);
        let full = synth_dataset(cfg.n_per_class, 4, 16, 16, noise, &mut rng).unwrap();
        let mut srng = RngStream::new(seed).derive("split", 0);
        let (train, test) = stratified_split(&full, 0.25, &mut srng).unwrap();
        let mut fed = cfg.fed.clone();
        fed.seed = seed;
        let shards = partition(train.labels.as_ref().unwrap(), 4,
            &PartitionSpec { clients: 8, alpha: 0.0, seed }).unwrap();
        let state = run_pretraining(&fed, &train, &shards, None).unwrap();
        Fix { train, test, sources: state.lineages.into_iter().map(|l| l.model).collect() }
    }).collect();
    println!("fixtures {:.1}s", t0.elapsed().as_secs_f64());

    for (depth, p_pre) in [(1, 0), (1, 1), (2, 0), (2, 2), (3, 0), (3, 1), (3, 2), (3, 3)] {
        let t0 = Instant::now();
        let mut accs = Vec::new();
        let mut ends = Vec::new();
        for (fix, &seed) in fixtures.iter().zip(&seeds) {
            let template;
            let refs: Vec<&MaeParams> = if p_pre == 0 {
                template = MaeParams::init(cfg.fed.mae_dims(&fix.train), &mut RngStream::new(seed).derive("template", 0));
                vec![&template]
            } else { fix.sources.iter().collect() };
            let clf = cascade_assemble(&refs, &CascadeSpec::new(depth, p_pre, seed), 4).unwrap();
            let (trained, curve) = finetune(&clf, &fix.train, 4, label_frac, ft_epochs, 16,
                AdamConfig::default(), &RngStream::new(seed).derive("finetune", 0)).unwrap();
            accs.push(evaluate(&trained, &fix.test, 4).unwrap());
            ends.push(*curve.last().unwrap());
        }
        let mut sorted = accs.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = if sorted.len() % 2 == 1 { sorted[sorted.len()/2] }
                     else { 0.5 * (sorted[sorted.len()/2 - 1] + sorted[sorted.len()/2]) };
        println!("D={depth} P={p_pre}: median {median:.4} accs {:?} end-loss {:?} ({:.1}s)",
            accs.iter().map(|a| (a*1000.0).round()/1000.0).collect::<Vec<_>>(),
            ends.iter().map(|l| (l*100.0).round()/100.0).collect::<Vec<_>>(),
            t0.elapsed().as_secs_f64());
    }
}
