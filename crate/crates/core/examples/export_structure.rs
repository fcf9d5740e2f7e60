//! Trains the student module's path weights and prints the learned
//! structure as JSON and DOT.

use disengcd::dataset::{generate_synthetic, split, SplitSpec, SyntheticSpec};
use disengcd::trainer::{train_bilevel, TrainConfig};

fn main() -> disengcd::Result<()> {
    let spec = SyntheticSpec {
        n_students: 80,
        n_exercises: 40,
        n_concepts: 5,
        logs_per_student: 20,
        seed: 5,
    };
    let (dataset, _) = generate_synthetic(&spec)?;
    let splits = split(&dataset, &SplitSpec::default())?;
    let config = TrainConfig {
        lr: 0.01,
        hyper_nodes: 4,
        layers: 1,
        max_epochs: 20,
        ..Default::default()
    };
    let out = train_bilevel(&splits.train, &splits.val, &config)?;
    let structure = out.model.structure().expect("meta-multigraph mode has a structure");
    println!("{}", structure.to_json());
    println!("{}", structure.to_dot());
    Ok(())
}
