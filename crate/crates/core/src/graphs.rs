//! The interaction graph and the two graphs disentangled from it.
//!
//! Every adjacency is stored as a row-normalized "target from source"
//! matrix: row `r` lists the neighbors whose messages node `r` averages.

use std::sync::Arc;

use crate::dataset::Dataset;
use crate::numeric::SparseAdjacency;
use crate::Result;

/// Students, exercises and concepts with answered / involves / relies-on
/// edges.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionGraph {
    /// `N×M`: students aggregate the exercises they answered (path `A_es`).
    pub student_from_exercise: Arc<SparseAdjacency>,
    /// `M×N`: exercises aggregate the students who answered them (path `A_se`).
    pub exercise_from_student: Arc<SparseAdjacency>,
    /// `K×M`: concepts aggregate the exercises involving them (path `A_ek`).
    pub concept_from_exercise: Arc<SparseAdjacency>,
    /// `M×K`: exercises aggregate their concepts (path `A_ke`).
    pub exercise_from_concept: Arc<SparseAdjacency>,
    /// `K×K`: concepts aggregate their prerequisites (path `A_kk`).
    pub concept_from_concept: Arc<SparseAdjacency>,
}

/// Exercise–concept structure with all student data removed.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationGraph {
    pub exercise_from_concept: Arc<SparseAdjacency>,
    pub concept_from_exercise: Arc<SparseAdjacency>,
    pub concept_from_concept: Arc<SparseAdjacency>,
}

/// Concept dependencies only.
#[derive(Clone, Debug, PartialEq)]
pub struct DependencyGraph {
    pub concept_from_concept: Arc<SparseAdjacency>,
    pub available: bool,
}

impl InteractionGraph {
    pub fn n_students(&self) -> usize {
        self.student_from_exercise.rows()
    }

    pub fn n_exercises(&self) -> usize {
        self.exercise_from_concept.rows()
    }

    pub fn n_concepts(&self) -> usize {
        self.concept_from_concept.rows()
    }
}

/// Builds all five typed adjacencies from the dataset's logs, Q-matrix and
/// dependency matrix. Repeated (student, exercise) pairs collapse to one
/// unweighted edge.
pub fn build_interaction_graph(dataset: &Dataset) -> Result<InteractionGraph> {
    let (n, m) = (dataset.n_students(), dataset.n_exercises());
    let answered = SparseAdjacency::from_pattern(n, m, dataset.logs().iter().map(|l| (l.student, l.exercise)))?;
    let q = dataset.q_matrix();
    let relation = disentangled_parts(q, dataset.dependency());
    Ok(InteractionGraph {
        student_from_exercise: Arc::new(answered.row_normalized()),
        exercise_from_student: Arc::new(answered.transpose().row_normalized()),
        concept_from_exercise: relation.concept_from_exercise,
        exercise_from_concept: relation.exercise_from_concept,
        concept_from_concept: relation.concept_from_concept,
    })
}

fn disentangled_parts(q: &SparseAdjacency, dependency: &SparseAdjacency) -> RelationGraph {
    let unit = |a: &SparseAdjacency| {
        SparseAdjacency::from_pattern(a.rows(), a.cols(), a.iter().map(|(r, c, _)| (r, c)))
            .expect("pattern of a valid adjacency")
    };
    let q = unit(q);
    RelationGraph {
        exercise_from_concept: Arc::new(q.row_normalized()),
        concept_from_exercise: Arc::new(q.transpose().row_normalized()),
        concept_from_concept: Arc::new(unit(dependency).row_normalized()),
    }
}

/// Drops students and student–exercise edges.
pub fn disentangle_relation_graph(interaction: &InteractionGraph) -> RelationGraph {
    RelationGraph {
        exercise_from_concept: Arc::clone(&interaction.exercise_from_concept),
        concept_from_exercise: Arc::clone(&interaction.concept_from_exercise),
        concept_from_concept: Arc::clone(&interaction.concept_from_concept),
    }
}

/// Drops exercises and exercise–concept edges.
pub fn disentangle_dependency_graph(relation: &RelationGraph) -> DependencyGraph {
    DependencyGraph {
        available: !relation.concept_from_concept.is_empty(),
        concept_from_concept: Arc::clone(&relation.concept_from_concept),
    }
}

/// All three graphs for one dataset split.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphSet {
    pub interaction: InteractionGraph,
    pub relation: RelationGraph,
    pub dependency: DependencyGraph,
}

impl GraphSet {
    pub fn build(dataset: &Dataset) -> Result<Self> {
        let interaction = build_interaction_graph(dataset)?;
        let relation = disentangle_relation_graph(&interaction);
        let dependency = disentangle_dependency_graph(&relation);
        Ok(Self {
            interaction,
            relation,
            dependency,
        })
    }
}
