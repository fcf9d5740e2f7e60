//! Central-difference check of the full training loss, for the network
//! weights and for the path weights.

use disengcd::dataset::{generate_synthetic, SyntheticSpec};
use disengcd::graphs::GraphSet;
use disengcd::model::{DisenGcd, Dims, ModelConfig, Trainable};
use disengcd::numeric::finite_difference_check;

fn main() -> disengcd::Result<()> {
    let spec = SyntheticSpec {
        n_students: 4,
        n_exercises: 3,
        n_concepts: 2,
        logs_per_student: 3,
        seed: 1,
    };
    let (dataset, _) = generate_synthetic(&spec)?;
    let config = ModelConfig {
        hyper_nodes: 3,
        layers: 1,
        ..Default::default()
    };
    let model = DisenGcd::new(config, Dims::of(&dataset), 5)?;
    let graphs = GraphSet::build(&dataset)?;
    let batch: Vec<(usize, usize, f64)> = dataset
        .logs()
        .iter()
        .map(|l| (l.student, l.exercise, f64::from(l.response)))
        .collect();
    let point = model.bindings();
    for trainable in [Trainable::Weights, Trainable::Alpha] {
        let (graph, _) = model.build_loss(&graphs, dataset.q_matrix(), &batch, trainable)?;
        let report = finite_difference_check(&graph, &point, 1e-6)?;
        println!(
            "{trainable:?}: {} entries, max relative error {:.2e}, worst {:?}",
            report.entries_checked, report.max_relative_error, report.worst
        );
    }
    Ok(())
}
