//! Response logs, Q-matrix and concept dependencies: loading, validation,
//! splitting, perturbation and synthetic generation.

mod io;
mod perturb;
mod split;
mod synthetic;

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::numeric::SparseAdjacency;
use crate::{Error, Result};

pub use io::{load_dataset, write_dataset, LoadOptions};
pub use perturb::{delete_records, inject_noise};
pub use split::{split, SplitSpec, Splits};
pub use synthetic::{generate_synthetic, simulate_logs, SyntheticSpec, SyntheticTruth};

/// One response: student `student` answered exercise `exercise`, correctly
/// when `response == 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Log {
    pub student: usize,
    pub exercise: usize,
    pub response: u8,
}

impl Log {
    pub fn new(student: usize, exercise: usize, response: u8) -> Self {
        Self {
            student,
            exercise,
            response,
        }
    }
}

/// External ids for each dense index.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IdMap {
    pub students: Vec<String>,
    pub exercises: Vec<String>,
    pub concepts: Vec<String>,
}

impl IdMap {
    /// Ids of the form `s0`, `e0`, `k0`.
    pub fn synthetic(n_students: usize, n_exercises: usize, n_concepts: usize) -> Self {
        Self {
            students: (0..n_students).map(|i| format!("s{i}")).collect(),
            exercises: (0..n_exercises).map(|j| format!("e{j}")).collect(),
            concepts: (0..n_concepts).map(|k| format!("k{k}")).collect(),
        }
    }

    pub fn student_index(&self) -> HashMap<&str, usize> {
        self.students.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect()
    }
}

/// A validated cognitive-diagnosis dataset.
///
/// Splits derived from one dataset share the Q-matrix, dependency matrix and
/// id map by reference.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    n_students: usize,
    n_exercises: usize,
    n_concepts: usize,
    logs: Vec<Log>,
    q_matrix: Arc<SparseAdjacency>,
    dependency: Arc<SparseAdjacency>,
    ids: Arc<IdMap>,
}

impl Dataset {
    pub fn new(
        n_students: usize,
        n_exercises: usize,
        n_concepts: usize,
        logs: Vec<Log>,
        q_matrix: Arc<SparseAdjacency>,
        dependency: Arc<SparseAdjacency>,
        ids: Arc<IdMap>,
    ) -> Result<Self> {
        if q_matrix.rows() != n_exercises || q_matrix.cols() != n_concepts {
            return Err(Error::Validation(format!(
                "Q-matrix is {}x{}, expected {n_exercises}x{n_concepts}",
                q_matrix.rows(),
                q_matrix.cols()
            )));
        }
        if dependency.rows() != n_concepts || dependency.cols() != n_concepts {
            return Err(Error::Validation(format!(
                "dependency matrix is {}x{}, expected {n_concepts}x{n_concepts}",
                dependency.rows(),
                dependency.cols()
            )));
        }
        if ids.students.len() != n_students
            || ids.exercises.len() != n_exercises
            || ids.concepts.len() != n_concepts
        {
            return Err(Error::Validation("id map sizes disagree with counts".into()));
        }
        if let Some(k) = (0..n_concepts).find(|&k| dependency.contains(k, k)) {
            return Err(Error::Validation(format!(
                "concept {} depends on itself",
                ids.concepts[k]
            )));
        }
        let dataset = Self {
            n_students,
            n_exercises,
            n_concepts,
            logs: Vec::new(),
            q_matrix,
            dependency,
            ids,
        };
        dataset.with_logs(logs)
    }

    /// Same Q, D and ids with a different set of logs.
    pub fn with_logs(&self, logs: Vec<Log>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(logs.len());
        let mut no_concept = Vec::new();
        for log in &logs {
            if log.student >= self.n_students || log.exercise >= self.n_exercises {
                return Err(Error::Validation(format!(
                    "log ({}, {}) out of range for {} students, {} exercises",
                    log.student, log.exercise, self.n_students, self.n_exercises
                )));
            }
            if log.response > 1 {
                return Err(Error::Validation(format!(
                    "response {} for student {} on exercise {} is not 0 or 1",
                    log.response, self.ids.students[log.student], self.ids.exercises[log.exercise]
                )));
            }
            if !seen.insert((log.student, log.exercise)) {
                return Err(Error::Validation(format!(
                    "duplicate log for student {} on exercise {}",
                    self.ids.students[log.student], self.ids.exercises[log.exercise]
                )));
            }
            if self.q_matrix.degree(log.exercise) == 0 {
                no_concept.push(self.ids.exercises[log.exercise].clone());
            }
        }
        if !no_concept.is_empty() {
            no_concept.sort();
            no_concept.dedup();
            return Err(Error::Validation(format!(
                "exercises without any concept: {}",
                no_concept.join(", ")
            )));
        }
        Ok(Self {
            logs,
            ..self.clone_shell()
        })
    }

    fn clone_shell(&self) -> Self {
        Self {
            n_students: self.n_students,
            n_exercises: self.n_exercises,
            n_concepts: self.n_concepts,
            logs: Vec::new(),
            q_matrix: Arc::clone(&self.q_matrix),
            dependency: Arc::clone(&self.dependency),
            ids: Arc::clone(&self.ids),
        }
    }

    pub fn n_students(&self) -> usize {
        self.n_students
    }

    pub fn n_exercises(&self) -> usize {
        self.n_exercises
    }

    pub fn n_concepts(&self) -> usize {
        self.n_concepts
    }

    pub fn logs(&self) -> &[Log] {
        &self.logs
    }

    pub fn q_matrix(&self) -> &Arc<SparseAdjacency> {
        &self.q_matrix
    }

    pub fn dependency(&self) -> &Arc<SparseAdjacency> {
        &self.dependency
    }

    pub fn ids(&self) -> &Arc<IdMap> {
        &self.ids
    }

    /// Logs grouped by student, in log order.
    pub fn logs_by_student(&self) -> Vec<Vec<Log>> {
        let mut out = vec![Vec::new(); self.n_students];
        for log in &self.logs {
            out[log.student].push(*log);
        }
        out
    }

    pub fn labels(&self) -> Vec<f64> {
        self.logs.iter().map(|l| f64::from(l.response)).collect()
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// Two students, three exercises, two concepts, one dependency edge.
    pub fn tiny() -> Dataset {
        let q = SparseAdjacency::from_pattern(3, 2, [(0, 0), (1, 0), (1, 1), (2, 1)]).unwrap();
        let d = SparseAdjacency::from_pattern(2, 2, [(1, 0)]).unwrap();
        Dataset::new(
            2,
            3,
            2,
            vec![
                Log::new(0, 0, 1),
                Log::new(0, 1, 0),
                Log::new(1, 1, 1),
                Log::new(1, 2, 1),
            ],
            Arc::new(q),
            Arc::new(d),
            Arc::new(IdMap::synthetic(2, 3, 2)),
        )
        .unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_dataset_is_valid() {
        let q = SparseAdjacency::from_pattern(1, 1, [(0, 0)]).unwrap();
        let ds = Dataset::new(
            1,
            1,
            1,
            vec![Log::new(0, 0, 1)],
            Arc::new(q),
            Arc::new(SparseAdjacency::empty(1, 1)),
            Arc::new(IdMap::synthetic(1, 1, 1)),
        )
        .unwrap();
        assert_eq!(ds.logs().len(), 1);
    }

    #[test]
    fn rejects_bad_logs() {
        let ds = fixtures::tiny();
        assert!(ds.with_logs(vec![Log::new(0, 0, 2)]).is_err());
        assert!(ds.with_logs(vec![Log::new(0, 5, 1)]).is_err());
        assert!(ds
            .with_logs(vec![Log::new(0, 0, 1), Log::new(0, 0, 0)])
            .is_err());
    }

    #[test]
    fn rejects_exercise_without_concept() {
        let q = SparseAdjacency::from_pattern(2, 1, [(0, 0)]).unwrap();
        let err = Dataset::new(
            1,
            2,
            1,
            vec![Log::new(0, 1, 1)],
            Arc::new(q),
            Arc::new(SparseAdjacency::empty(1, 1)),
            Arc::new(IdMap::synthetic(1, 2, 1)),
        )
        .unwrap_err();
        assert!(err.to_string().contains("e1"), "{err}");
    }

    #[test]
    fn rejects_self_dependency() {
        let q = SparseAdjacency::from_pattern(1, 2, [(0, 0)]).unwrap();
        let d = SparseAdjacency::from_pattern(2, 2, [(1, 1)]).unwrap();
        assert!(Dataset::new(
            1,
            1,
            2,
            vec![],
            Arc::new(q),
            Arc::new(d),
            Arc::new(IdMap::synthetic(1, 1, 2)),
        )
        .is_err());
    }
}
