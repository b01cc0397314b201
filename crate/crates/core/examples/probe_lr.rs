//! Probe pretraining learning rate vs downstream direction.

use cmae::cascade::{cascade_assemble, evaluate, finetune, CascadeSpec};
use cmae::data::{stratified_split, synth_dataset, ImageBatch};
use cmae::fed::run_pretraining;
use cmae::mae::MaeParams;
use cmae::optim::AdamConfig;
use cmae::param::NamedParams;
use cmae::partition::{partition, PartitionSpec};
use cmae::plan::JobConfig;
use cmae::rng::RngStream;

fn main() {
    let seeds: Vec<u64> = vec![101, 202];
    for pre_lr in [1e-3, 3e-4, 1e-4] {
        println!("== pretrain lr {pre_lr}");
        for &seed in &seeds {
            let mut cfg = JobConfig::default();
            cfg.fed.clients = 8;
            cfg.fed.rounds = 60;
            cfg.fed.local_epochs = 2;
            cfg.fed.clients_per_round = 3;
            cfg.fed.lineages = 3;
            cfg.fed.batch_size = 16;
            cfg.fed.d_enc = 32;
            cfg.fed.d_dec = 16;
            cfg.fed.adam.lr = pre_lr;
            cfg.n_per_class = 96;
            cfg.noise = 0.5;
            cfg.label_fraction = 0.1;
            cfg.finetune_epochs = 60;
            cfg.finetune_batch = 16;

            let mut rng = RngStream::new(seed).derive("data", 0);
            let full = synth_dataset(cfg.n_per_class, 4, 16, 16, cfg.noise, &mut rng).unwrap();
            let mut srng = RngStream::new(seed).derive("split", 0);
            let (train, test) = stratified_split(&full, 0.25, &mut srng).unwrap();
            let mut fed = cfg.fed.clone();
            fed.seed = seed;
            let shards = partition(train.labels.as_ref().unwrap(), 4,
                &PartitionSpec { clients: 8, alpha: 0.0, seed }).unwrap();
            let state = run_pretraining(&fed, &train, &shards, None).unwrap();
            let sources: Vec<MaeParams> = state.lineages.into_iter().map(|l| l.model).collect();
            // weight magnitude diagnostic
            let mut maxw = 0.0f64;
            sources[0].enc_block.visit("b", &mut |_, t| {
                for &v in t.data() { maxw = maxw.max(v.abs()); }
            });
            let arm = |p_pre: usize, depth: usize| -> (f64, f64) {
                let template;
                let refs: Vec<&MaeParams> = if p_pre == 0 {
                    template = MaeParams::init(fed.mae_dims(&train), &mut RngStream::new(seed).derive("template", 0));
                    vec![&template]
                } else { sources.iter().collect() };
                let clf = cascade_assemble(&refs, &CascadeSpec::new(depth, p_pre, seed), 4).unwrap();
                let (trained, curve) = finetune(&clf, &train, 4, cfg.label_fraction,
                    cfg.finetune_epochs, cfg.finetune_batch,
                    AdamConfig::default(), &RngStream::new(seed).derive("finetune", 0)).unwrap();
                (evaluate(&trained, &test, 4).unwrap(), *curve.last().unwrap())
            };
            let (a10, l10) = arm(0, 1);
            let (a11, l11) = arm(1, 1);
            let (a30, l30) = arm(0, 3);
            let (a33, l33) = arm(3, 3);
            println!("  seed {seed}: maxw {maxw:.3} | D1: fresh {a10:.3}/{l10:.2} pre {a11:.3}/{l11:.2} | D3: fresh {a30:.3}/{l30:.2} pre {a33:.3}/{l33:.2}");
        }
    }
}
