//! Diagnostic head, loss and per-concept mastery reports.
//!
//! For student `i` and exercise `j` with concept set `Q_j`:
//! `c̄ = mean_{k∈Q_j} C̄_k`, `h_s = F_s(S̄_i + c̄)`, `h_e = F_e(Ē_j + c̄)`,
//! `h = σ(F_sim(h_s ⊙ h_e))`, and `r̂ = mean_{k∈Q_j} h_k`. The Q-masked
//! average requires the hidden width to equal the concept count.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::numeric::{sigmoid, DenseMatrix, ExpressionGraph, NodeId, SparseAdjacency, BCE_CLAMP};
use crate::{Error, Result};

/// `d → d` fully connected layer, `y = x·W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: DenseMatrix,
    pub bias: DenseMatrix,
}

impl Linear {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let row = DenseMatrix::from_raw(1, x.len(), x.to_vec());
        let mut y = row.matmul(&self.weight);
        y.add_assign(&self.bias);
        y.into_values()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosisParams {
    pub student: Linear,
    pub exercise: Linear,
    pub similarity: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Probability of a correct response, in `(0, 1)`.
    pub probability: f64,
    /// `F_s(S̄_i + c̄)`.
    pub student_hidden: Vec<f64>,
    /// `σ(F_sim(h_s ⊙ h_e))`, one entry per concept.
    pub similarity: Vec<f64>,
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Per-concept similarity vector for one (student, exercise, concept mean)
/// triple.
fn similarity(student: &[f64], exercise: &[f64], concept_mean: &[f64], params: &DiagnosisParams) -> (Vec<f64>, Vec<f64>) {
    let h_s = params.student.apply(&add(student, concept_mean));
    let h_e = params.exercise.apply(&add(exercise, concept_mean));
    let product: Vec<f64> = h_s.iter().zip(&h_e).map(|(a, b)| a * b).collect();
    let h = params.similarity.apply(&product).into_iter().map(sigmoid).collect();
    (h_s, h)
}

/// Predicts one response. `concepts` lists the exercise's Q-matrix row.
pub fn predict(
    student: &[f64],
    exercise: &[f64],
    concept_repr: &DenseMatrix,
    concepts: &[usize],
    params: &DiagnosisParams,
) -> Result<Prediction> {
    if concepts.is_empty() {
        return Err(Error::Validation("exercise has an empty Q-matrix row".into()));
    }
    let d = concept_repr.cols();
    if d != concept_repr.rows() {
        return Err(Error::Config(format!(
            "hidden width {d} must equal the concept count {}",
            concept_repr.rows()
        )));
    }
    let mut mean = vec![0.0; d];
    for &k in concepts {
        for (m, v) in mean.iter_mut().zip(concept_repr.row(k)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= concepts.len() as f64);
    let (student_hidden, similarity) = similarity(student, exercise, &mean, params);
    let probability = concepts.iter().map(|&k| similarity[k]).sum::<f64>() / concepts.len() as f64;
    Ok(Prediction {
        probability,
        student_hidden,
        similarity,
    })
}

/// Mean binary cross-entropy with probabilities clamped `1e-7` away from
/// 0 and 1.
pub fn bce_loss(predictions: &[f64], labels: &[f64]) -> f64 {
    assert_eq!(predictions.len(), labels.len(), "bce length");
    predictions
        .iter()
        .zip(labels)
        .map(|(&p, &r)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            -(r * p.ln() + (1.0 - r) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / predictions.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MasteryReport {
    pub student_id: String,
    pub mastery: Vec<f64>,
    pub flags: Vec<String>,
}

/// Per-concept mastery of one student: entry `k` is the similarity output
/// at index `k` for concept `k` paired with the mean representation of the
/// exercises involving it.
pub fn mastery_report(
    student_id: &str,
    student: &[f64],
    exercise_repr: &DenseMatrix,
    concept_repr: &DenseMatrix,
    q_matrix: &SparseAdjacency,
    concept_ids: &[String],
    params: &DiagnosisParams,
) -> MasteryReport {
    let k_count = concept_repr.rows();
    let by_concept = q_matrix.transpose();
    let mut mastery = Vec::with_capacity(k_count);
    let mut flags = Vec::new();
    for k in 0..k_count {
        let exercises = by_concept.row_cols(k);
        if exercises.is_empty() {
            mastery.push(0.5);
            flags.push(format!("concept {} has no exercises", concept_ids[k]));
            continue;
        }
        let mut mean_e = vec![0.0; exercise_repr.cols()];
        for &j in exercises {
            for (m, v) in mean_e.iter_mut().zip(exercise_repr.row(j)) {
                *m += v;
            }
        }
        mean_e.iter_mut().for_each(|m| *m /= exercises.len() as f64);
        let (_, h) = similarity(student, &mean_e, concept_repr.row(k), params);
        mastery.push(h[k]);
    }
    MasteryReport {
        student_id: student_id.to_string(),
        mastery,
        flags,
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearIds {
    pub weight: NodeId,
    pub bias: NodeId,
}

#[derive(Clone, Copy, Debug)]
pub struct DiagnosisIds {
    pub student: LinearIds,
    pub exercise: LinearIds,
    pub similarity: LinearIds,
}

fn linear(g: &mut ExpressionGraph, x: NodeId, ids: LinearIds) -> Result<NodeId> {
    let y = g.matmul(x, ids.weight)?;
    Ok(g.add_row(y, ids.bias)?)
}

/// Adds batched predictions for `(student, exercise)` pairs and returns the
/// `B×1` probability column.
pub fn build_predictions(
    g: &mut ExpressionGraph,
    students: NodeId,
    exercises: NodeId,
    concepts: NodeId,
    q_matrix: &SparseAdjacency,
    pairs: &[(usize, usize)],
    params: DiagnosisIds,
) -> Result<NodeId> {
    let (k, d) = g.shape(concepts);
    if k != d {
        return Err(Error::Config(format!("hidden width {d} must equal the concept count {k}")));
    }
    // row t of the batch Q: exercise pairs[t].1's concepts, each 1/|Q_j|
    let mut entries = Vec::new();
    for (t, &(_, j)) in pairs.iter().enumerate() {
        let cols = q_matrix.row_cols(j);
        if cols.is_empty() {
            return Err(Error::Validation(format!("exercise {j} has an empty Q-matrix row")));
        }
        let w = 1.0 / cols.len() as f64;
        entries.extend(cols.iter().map(|&c| (t, c, w)));
    }
    let batch_q = SparseAdjacency::from_entries(pairs.len(), k, entries)?;
    let mask = batch_q.to_dense();

    let s_idx = Arc::new(pairs.iter().map(|p| p.0).collect::<Vec<_>>());
    let e_idx = Arc::new(pairs.iter().map(|p| p.1).collect::<Vec<_>>());
    let s = g.gather_rows(students, s_idx)?;
    let e = g.gather_rows(exercises, e_idx)?;
    let c_mean = g.sparse_matmul(Arc::new(batch_q), concepts)?;

    let s_in = g.add(s, c_mean)?;
    let e_in = g.add(e, c_mean)?;
    let h_s = linear(g, s_in, params.student)?;
    let h_e = linear(g, e_in, params.exercise)?;
    let prod = g.mul(h_s, h_e)?;
    let logits = linear(g, prod, params.similarity)?;
    let h = g.sigmoid(logits);
    let mask = g.constant(mask);
    let masked = g.mul(h, mask)?;
    let probs = g.row_sum(masked);
    g.label(probs, "predicted probabilities");
    Ok(probs)
}
