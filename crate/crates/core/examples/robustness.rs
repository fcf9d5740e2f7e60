//! Noise robustness of the full model against the interaction-only variant.
//!
//! Usage: cargo run --release --example robustness -- [seeds] [noise]

use disengcd::dataset::{generate_synthetic, split, SplitSpec, SyntheticSpec};
use disengcd::evaluation::robustness_experiment;
use disengcd::model::Variant;
use disengcd::trainer::TrainConfig;

fn main() -> disengcd::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seeds: u64 = args.first().and_then(|s| s.parse().ok()).unwrap_or(3);
    let noise: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let (dataset, _) = generate_synthetic(&SyntheticSpec::default())?;
    let splits = split(&dataset, &SplitSpec::default())?;

    for variant in [Variant::Full, Variant::Interaction] {
        let mut drops = Vec::new();
        for seed in 0..seeds {
            let config = TrainConfig {
                lr: 0.003,
                layers: 1,
                seed,
                variant,
                ..Default::default()
            };
            let out = robustness_experiment(&splits, &config, &[0.0, noise])?;
            let auc: Vec<f64> = out.rows.iter().map(|r| r.auc.unwrap_or(f64::NAN)).collect();
            println!("{:<18} seed {seed}  auc {:.4} -> {:.4}", variant.label(), auc[0], auc[1]);
            drops.push(auc[0] - auc[1]);
        }
        let mean = drops.iter().sum::<f64>() / drops.len() as f64;
        println!("{:<18} mean auc drop {mean:.4}", variant.label());
    }
    Ok(())
}
