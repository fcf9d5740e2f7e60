//! Trains the full model on generated data and compares the diagnosed
//! mastery with the generator's ground truth.
//!
//! Usage: cargo run --release --example train_synthetic -- [lr] [epochs] [seed]

use std::time::Instant;

use disengcd::dataset::{generate_synthetic, split, SplitSpec, SyntheticSpec};
use disengcd::evaluation::{metrics, spearman};
use disengcd::graphs::GraphSet;
use disengcd::trainer::{train_bilevel, TrainConfig};

fn main() -> disengcd::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, default: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(default);
    let (dataset, truth) = generate_synthetic(&SyntheticSpec::default())?;
    let splits = split(&dataset, &SplitSpec::default())?;
    let config = TrainConfig {
        lr: arg(0, 0.003),
        max_epochs: arg(1, 100.0) as usize,
        seed: arg(2, 0.0) as u64,
        layers: 1,
        ..Default::default()
    };

    let start = Instant::now();
    let out = train_bilevel(&splits.train, &splits.val, &config)?;
    let graphs = GraphSet::build(&splits.train)?;
    let preds = out.model.predict(&graphs, &splits.test)?;
    let report = metrics(&preds, &splits.test.labels())?;

    let students: Vec<usize> = (0..dataset.n_students()).collect();
    let reports = out.model.diagnose(&graphs, &dataset, &students)?;
    let estimated: Vec<f64> = reports.iter().flat_map(|r| r.mastery.iter().copied()).collect();
    let rho = spearman(&estimated, truth.mastery.values());

    println!("epochs run      {}", out.history.epochs.len());
    println!("best epoch      {}", out.best_epoch);
    println!("test acc        {:.4}", report.acc);
    println!("test rmse       {:.4}", report.rmse);
    println!("test auc        {:.4}", report.auc.unwrap_or(f64::NAN));
    println!("mastery rho     {:.4}", rho.unwrap_or(f64::NAN));
    println!("seconds         {:.1}", start.elapsed().as_secs_f64());
    Ok(())
}
