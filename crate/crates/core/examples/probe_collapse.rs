//! Diagnose representation collapse: across-sample variance of pooled
//! encoder features, fresh vs pretrained, plus direction at lower noise.

use cmae::cascade::{cascade_assemble, classifier_forward, evaluate, finetune, CascadeSpec, ViTClassifier};
use cmae::data::{patchify, stratified_split, synth_dataset};
use cmae::fed::run_pretraining;
use cmae::mae::MaeParams;
use cmae::optim::AdamConfig;
use cmae::partition::{partition, PartitionSpec};
use cmae::plan::JobConfig;
use cmae::rng::RngStream;

// across-sample std of the logits-input features via a probe classifier fwd
fn pooled_spread(clf: &ViTClassifier, images: &cmae::data::ImageBatch) -> f64 {
    let patches = patchify(images, 4).unwrap();
    let idx: Vec<usize> = (0..images.n.min(64)).collect();
    let sub = patches.subset(&idx);
    let fwd = classifier_forward(clf, &sub).unwrap();
    // logits spread across samples, averaged over classes
    let n = idx.len();
    let c = clf.dims.n_classes;
    let mut total = 0.0;
    for j in 0..c {
        let vals: Vec<f64> = (0..n).map(|i| fwd.logits[i * c + j]).collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        total += var.sqrt();
    }
    total / c as f64
}

fn main() {
    for noise in [0.5, 0.25] {
        println!("== noise {noise}");
        for &seed in &[101u64, 202] {
            let mut cfg = JobConfig::default();
            cfg.fed.clients = 8;
            cfg.fed.rounds = 60;
            cfg.fed.local_epochs = 2;
            cfg.fed.clients_per_round = 3;
            cfg.fed.lineages = 3;
            cfg.fed.batch_size = 16;
            cfg.fed.d_enc = 32;
            cfg.fed.d_dec = 16;
            cfg.fed.adam.lr = 3e-4;
            cfg.n_per_class = 96;
            cfg.noise = noise;
            cfg.label_fraction = 0.1;
            cfg.finetune_epochs = 60;
            cfg.finetune_batch = 16;

            let mut rng = RngStream::new(seed).derive("data", 0);
            let full = synth_dataset(96, 4, 16, 16, noise, &mut rng).unwrap();
            let mut srng = RngStream::new(seed).derive("split", 0);
            let (train, test) = stratified_split(&full, 0.25, &mut srng).unwrap();
            let mut fed = cfg.fed.clone();
            fed.seed = seed;
            let shards = partition(train.labels.as_ref().unwrap(), 4,
                &PartitionSpec { clients: 8, alpha: 0.0, seed }).unwrap();
            let state = run_pretraining(&fed, &train, &shards, None).unwrap();
            let pre_loss = state.metrics.mean_loss_of_round(fed.rounds).unwrap();
            let sources: Vec<MaeParams> = state.lineages.into_iter().map(|l| l.model).collect();

            let build = |p_pre: usize, depth: usize| {
                let template;
                let refs: Vec<&MaeParams> = if p_pre == 0 {
                    template = MaeParams::init(fed.mae_dims(&train), &mut RngStream::new(seed).derive("template", 0));
                    vec![&template]
                } else { sources.iter().collect() };
                cascade_assemble(&refs, &CascadeSpec::new(depth, p_pre, seed), 4).unwrap()
            };
            let fresh1 = build(0, 1);
            let pre1 = build(1, 1);
            println!("  seed {seed}: pre-loss {pre_loss:.4} | spread fresh {:.4} pretrained {:.4}",
                pooled_spread(&fresh1, &test), pooled_spread(&pre1, &test));

            let arm = |clf: &ViTClassifier| -> (f64, f64) {
                let (trained, curve) = finetune(clf, &train, 4, 0.1, 60, 16,
                    AdamConfig::default(), &RngStream::new(seed).derive("ft", 0)).unwrap();
                (evaluate(&trained, &test, 4).unwrap(), *curve.last().unwrap())
            };
            let (af1, lf1) = arm(&fresh1);
            let (ap1, lp1) = arm(&pre1);
            let fresh3 = build(0, 3);
            let pre3 = build(3, 3);
            let (af3, lf3) = arm(&fresh3);
            let (ap3, lp3) = arm(&pre3);
            println!("    D1 fresh {af1:.3}/{lf1:.2} pre {ap1:.3}/{lp1:.2} | D3 fresh {af3:.3}/{lf3:.2} pre {ap3:.3}/{lp3:.2}");
        }
    }
}
