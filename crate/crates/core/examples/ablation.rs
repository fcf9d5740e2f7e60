//! The graph-assignment variants and student-module modes on a small
//! synthetic dataset, written as a report.
//!
//! Usage: cargo run --release --example ablation -- [out_dir]

use disengcd::dataset::{generate_synthetic, split, SplitSpec, SyntheticSpec};
use disengcd::evaluation::{ablation_experiment, config_digest, write_report};
use disengcd::trainer::TrainConfig;

fn main() -> disengcd::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "ablation_report".into());
    let spec = SyntheticSpec {
        n_students: 100,
        n_exercises: 50,
        n_concepts: 5,
        logs_per_student: 30,
        seed: 2,
    };
    let (dataset, _) = generate_synthetic(&spec)?;
    let splits = split(&dataset, &SplitSpec::default())?;
    let config = TrainConfig {
        lr: 0.003,
        layers: 1,
        max_epochs: 30,
        ..Default::default()
    };
    let outcome = ablation_experiment(&splits, &config)?;
    println!("{:<18} {:<16} {:>7} {:>7} {:>7}", "variant", "student module", "acc", "rmse", "auc");
    for row in &outcome.rows {
        println!(
            "{:<18} {:<16} {:>7.4} {:>7.4} {:>7.4}",
            row.variant,
            row.student_mode,
            row.acc,
            row.rmse,
            row.auc.unwrap_or(f64::NAN)
        );
    }
    let (csv, _) = write_report(std::path::Path::new(&out), "ablation", &config_digest(&config), &outcome.rows)?;
    println!("written to {}", csv.display());
    Ok(())
}
