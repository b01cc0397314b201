use cmae::data::{nearest_template_accuracy, synth_dataset, synth_templates};
use cmae::rng::RngStream;

fn main() {
    let templates = synth_templates(4, 16, 16);
    // pairwise template distances
    for i in 0..4 {
        for j in (i + 1)..4 {
            let d: f64 = templates[i].iter().zip(&templates[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            print!("d({i},{j})={d:.2} ");
        }
    }
    println!();
    for noise in [0.0, 0.3, 0.4, 0.5, 0.6] {
        let mut rng = RngStream::new(13);
        let ds = synth_dataset(100, 4, 16, 16, noise, &mut rng).unwrap();
        println!("noise {noise}: NT acc {:.4}", nearest_template_accuracy(&ds, &templates));
    }
}
