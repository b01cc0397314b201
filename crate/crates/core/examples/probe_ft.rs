//! Quick probe of fine-tuning dynamics: loss curves and accuracy for a few
//! (width, epochs, lr) combinations.

use std::time::Instant;

use cmae::cascade::{evaluate, finetune, ClassifierDims, ViTClassifier};
use cmae::data::{stratified_split, synth_dataset};
use cmae::optim::AdamConfig;
use cmae::rng::RngStream;

fn main() {
    let mut rng = RngStream::new(11).derive("data", 0);
    let full = synth_dataset(64, 4, 16, 16, 0.5, &mut rng).unwrap();
    let mut srng = RngStream::new(11).derive("split", 0);
    let (train, test) = stratified_split(&full, 0.25, &mut srng).unwrap();
    println!("train {} test {}", train.n, test.n);

    for (d_model, depth, epochs, lr, batch) in [
        (32usize, 1usize, 20usize, 1e-3, 32usize),
        (32, 1, 40, 1e-3, 32),
        (32, 1, 20, 3e-3, 32),
        (64, 1, 20, 1e-3, 32),
        (32, 3, 20, 1e-3, 32),
        (32, 3, 20, 3e-3, 32),
        (32, 3, 40, 1e-3, 16),
    ] {
        let dims = ClassifierDims {
            patch_dim: 16,
            num_patches: 16,
            d_model,
            n_heads: 4,
            depth,
            n_classes: 4,
        };
        let clf = ViTClassifier::init(dims, &mut RngStream::new(5).derive("init", 0));
        let t0 = Instant::now();
        let (trained, curve) = finetune(
            &clf,
            &train,
            4,
            1.0,
            epochs,
            batch,
            AdamConfig { lr, ..Default::default() },
            &RngStream::new(7).derive("ft", 0),
        )
        .unwrap();
        let acc = evaluate(&trained, &test, 4).unwrap();
        let train_acc = evaluate(&trained, &train, 4).unwrap();
        let pick = |i: usize| curve.get(i).copied().unwrap_or(f64::NAN);
        println!(
            "d={d_model} D={depth} ep={epochs} lr={lr} b={batch}: test {acc:.3} train {train_acc:.3} loss[0]={:.3} loss[{}]={:.3} loss[end]={:.3} ({:.1}s)",
            pick(0),
            epochs / 2,
            pick(epochs / 2),
            curve.last().unwrap(),
            t0.elapsed().as_secs_f64()
        );
    }
}
