//! Builds the interaction graph and the two graphs disentangled from it,
//! then shows that noisy logs leave the relation and dependency graphs
//! unchanged.

use disengcd::dataset::{generate_synthetic, inject_noise, SyntheticSpec};
use disengcd::graphs::GraphSet;

fn main() -> disengcd::Result<()> {
    let spec = SyntheticSpec {
        n_students: 50,
        n_exercises: 30,
        n_concepts: 6,
        logs_per_student: 12,
        seed: 2,
    };
    let (dataset, _) = generate_synthetic(&spec)?;
    let graphs = GraphSet::build(&dataset)?;
    let g = &graphs.interaction;
    println!("answered edges        {}", g.student_from_exercise.nnz());
    println!("exercise-concept      {}", g.exercise_from_concept.nnz());
    println!("concept dependencies  {}", g.concept_from_concept.nnz());
    println!("dependency graph used {}", graphs.dependency.available);

    let (noisy, _) = inject_noise(&dataset, 0.5, 7)?;
    let noisy_graphs = GraphSet::build(&noisy)?;
    println!(
        "after 50% noise: answered edges {} -> {}",
        g.student_from_exercise.nnz(),
        noisy_graphs.interaction.student_from_exercise.nnz()
    );
    println!("relation graph unchanged   {}", noisy_graphs.relation == graphs.relation);
    println!("dependency graph unchanged {}", noisy_graphs.dependency == graphs.dependency);
    Ok(())
}
