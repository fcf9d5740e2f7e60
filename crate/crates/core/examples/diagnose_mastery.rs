//! Trains briefly, then prints per-concept mastery for a few students next
//! to the generator's ground truth.

use disengcd::dataset::{generate_synthetic, split, SplitSpec, SyntheticSpec};
use disengcd::graphs::GraphSet;
use disengcd::trainer::{train_bilevel, TrainConfig};

fn main() -> disengcd::Result<()> {
    let (dataset, truth) = generate_synthetic(&SyntheticSpec::default())?;
    let splits = split(&dataset, &SplitSpec::default())?;
    let config = TrainConfig {
        lr: 0.003,
        layers: 1,
        ..Default::default()
    };
    let out = train_bilevel(&splits.train, &splits.val, &config)?;
    let graphs = GraphSet::build(&splits.train)?;
    let reports = out.model.diagnose(&graphs, &dataset, &[0, 1, 2])?;
    for (i, r) in reports.iter().enumerate() {
        println!("student {}", r.student_id);
        for (k, m) in r.mastery.iter().enumerate() {
            println!("  {:<4} diagnosed {m:.3}  true {:.3}", dataset.ids().concepts[k], truth.mastery.get(i, k));
        }
        if !r.flags.is_empty() {
            println!("  flags: {}", r.flags.join("; "));
        }
    }
    Ok(())
}
