use std::sync::Arc;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, IdMap, Log};
use crate::numeric::{sigmoid, DenseMatrix, SparseAdjacency};
use crate::{Error, Result};

/// Slope of the generating response curve.
const RESPONSE_SLOPE: f64 = 5.0;
const DEPENDENCY_EDGE_PROBABILITY: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_students: usize,
    pub n_exercises: usize,
    pub n_concepts: usize,
    pub logs_per_student: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_students: 200,
            n_exercises: 100,
            n_concepts: 10,
            logs_per_student: 50,
            seed: 0,
        }
    }
}

/// Ground truth behind a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    /// `N×K`, entries in `[0, 1]`.
    pub mastery: DenseMatrix,
    /// `M×K`, entries in `[0, 1]`.
    pub difficulty: DenseMatrix,
}

impl SyntheticTruth {
    /// `σ(5 · mean_{k ∈ Q_j}(mastery_ik − difficulty_jk))`.
    pub fn probability(&self, q: &SparseAdjacency, student: usize, exercise: usize) -> f64 {
        let concepts = q.row_cols(exercise);
        let gap: f64 = concepts
            .iter()
            .map(|&k| self.mastery.get(student, k) - self.difficulty.get(exercise, k))
            .sum::<f64>()
            / concepts.len() as f64;
        sigmoid(RESPONSE_SLOPE * gap)
    }
}

/// Draws responses for `logs_per_student` distinct exercises per student
/// (capped at the number of exercises).
pub fn simulate_logs(
    truth: &SyntheticTruth,
    q: &SparseAdjacency,
    logs_per_student: usize,
    rng: &mut impl Rng,
) -> Vec<Log> {
    let (n, m) = (truth.mastery.rows(), q.rows());
    let per = logs_per_student.min(m);
    let mut logs = Vec::with_capacity(n * per);
    for i in 0..n {
        let mut picks = index::sample(rng, m, per).into_vec();
        picks.sort_unstable();
        for j in picks {
            let p = truth.probability(q, i, j);
            logs.push(Log::new(i, j, u8::from(rng.gen_bool(p))));
        }
    }
    logs
}

/// Generates a dataset from a known mastery/difficulty model.
///
/// Each exercise covers 1–3 distinct concepts; concept `k` depends on each
/// lower-indexed concept independently with probability 0.1, which makes
/// the dependency graph acyclic.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, SyntheticTruth)> {
    let SyntheticSpec {
        n_students: n,
        n_exercises: m,
        n_concepts: k,
        logs_per_student,
        seed,
    } = *spec;
    if n == 0 || m == 0 || k == 0 || logs_per_student == 0 {
        return Err(Error::Config("synthetic counts must all be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let uniform = |rows, cols, rng: &mut ChaCha8Rng| {
        DenseMatrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen::<f64>()).collect())
    };
    let mastery = uniform(n, k, &mut rng)?;
    let difficulty = uniform(m, k, &mut rng)?;

    let mut q_pairs = Vec::new();
    for j in 0..m {
        let count = rng.gen_range(1..=3usize).min(k);
        for c in index::sample(&mut rng, k, count) {
            q_pairs.push((j, c));
        }
    }
    let q = SparseAdjacency::from_pattern(m, k, q_pairs)?;

    let mut d_pairs = Vec::new();
    for a in 0..k {
        for b in 0..a {
            if rng.gen_bool(DEPENDENCY_EDGE_PROBABILITY) {
                d_pairs.push((a, b));
            }
        }
    }
    let d = SparseAdjacency::from_pattern(k, k, d_pairs)?;

    let truth = SyntheticTruth {
        mastery,
        difficulty,
    };
    let logs = simulate_logs(&truth, &q, logs_per_student, &mut rng);
    let dataset = Dataset::new(
        n,
        m,
        k,
        logs,
        Arc::new(q),
        Arc::new(d),
        Arc::new(IdMap::synthetic(n, m, k)),
    )?;
    Ok((dataset, truth))
}
