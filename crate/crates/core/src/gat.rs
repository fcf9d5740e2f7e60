//! Graph-attention exercise module (relation graph) and concept module
//! (dependency graph).
//!
//! Each layer adds an attention-weighted neighbor sum to a node's previous
//! representation. Attention over the neighbors of a center node is the
//! softmax of a linear score `F([center, neighbor])` with no nonlinearity.

use std::sync::Arc;

use crate::graphs::{DependencyGraph, RelationGraph};
use crate::numeric::{softmax, DenseMatrix, ExpressionGraph, NodeId, SparseAdjacency};
use crate::Result;

pub const DEFAULT_LAYERS: usize = 2;

/// `2d → 1` linear attention map.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    /// `2d×1`; the first `d` rows score the center, the rest the neighbor.
    pub weight: DenseMatrix,
    /// `1×1`.
    pub bias: DenseMatrix,
}

impl AttentionParams {
    fn score(&self, center: &[f64], neighbor: &[f64]) -> f64 {
        let w = self.weight.values();
        let d = center.len();
        center.iter().zip(&w[..d]).map(|(a, b)| a * b).sum::<f64>()
            + neighbor.iter().zip(&w[d..]).map(|(a, b)| a * b).sum::<f64>()
            + self.bias.get(0, 0)
    }
}

/// Attention contexts of one exercise-module layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ExerciseLayer {
    pub exercise_from_concept: AttentionParams,
    pub concept_from_exercise: AttentionParams,
    pub concept_from_concept: AttentionParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExerciseModuleParams {
    /// `M×d`.
    pub exercise: DenseMatrix,
    /// `K×d`.
    pub concept: DenseMatrix,
    pub layers: Vec<ExerciseLayer>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptModuleParams {
    /// `K×d`.
    pub concept: DenseMatrix,
    pub layers: Vec<AttentionParams>,
}

/// Softmax over neighbors of `F([center, neighbor])`. Empty neighborhoods
/// yield empty weights.
pub fn attention_row(center: &[f64], neighbors: &[&[f64]], params: &AttentionParams) -> Vec<f64> {
    if neighbors.is_empty() {
        return Vec::new();
    }
    let logits: Vec<f64> = neighbors.iter().map(|n| params.score(center, n)).collect();
    softmax(&logits)
}

/// `out[r] = Σ_{c ∈ N(r)} a_rc · neighbors[c] + centers[r]`.
fn attend_dense(
    pattern: &SparseAdjacency,
    centers: &DenseMatrix,
    neighbors: &DenseMatrix,
    params: &AttentionParams,
) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(centers.rows(), centers.cols());
    for r in 0..pattern.rows() {
        let cols = pattern.row_cols(r);
        let rows: Vec<&[f64]> = cols.iter().map(|&c| neighbors.row(c)).collect();
        let weights = attention_row(centers.row(r), &rows, params);
        let target = out.row_mut(r);
        for (w, n) in weights.iter().zip(&rows) {
            for (t, v) in target.iter_mut().zip(n.iter()) {
                *t += w * v;
            }
        }
    }
    out
}

/// Exercise and concept representations after `L` layers on the relation
/// graph. Returns `(Ē, c^(L))`.
pub fn exercise_forward_full(graph: &RelationGraph, params: &ExerciseModuleParams) -> (DenseMatrix, DenseMatrix) {
    let mut e = params.exercise.clone();
    let mut c = params.concept.clone();
    for layer in &params.layers {
        let mut e_next = attend_dense(&graph.exercise_from_concept, &e, &c, &layer.exercise_from_concept);
        e_next.add_assign(&e);
        let mut c_next = attend_dense(&graph.concept_from_exercise, &c, &e, &layer.concept_from_exercise);
        c_next.add_assign(&attend_dense(
            &graph.concept_from_concept,
            &c,
            &c,
            &layer.concept_from_concept,
        ));
        c_next.add_assign(&c);
        e = e_next;
        c = c_next;
    }
    (e, c)
}

pub fn exercise_forward(graph: &RelationGraph, params: &ExerciseModuleParams) -> DenseMatrix {
    exercise_forward_full(graph, params).0
}

/// Concept representation on the dependency graph, or the initial embedding
/// when the dependency graph is unavailable.
pub fn concept_forward(graph: &DependencyGraph, params: &ConceptModuleParams) -> DenseMatrix {
    let mut c = params.concept.clone();
    if !graph.available {
        return c;
    }
    for layer in &params.layers {
        let mut next = attend_dense(&graph.concept_from_concept, &c, &c, layer);
        next.add_assign(&c);
        c = next;
    }
    c
}

/// Node ids of one attention map.
#[derive(Clone, Copy, Debug)]
pub struct AttentionIds {
    pub weight: NodeId,
    pub bias: NodeId,
}

/// Adds `Σ_{c ∈ N(r)} a_rc · neighbors[c]` (without the residual).
pub fn build_attention(
    g: &mut ExpressionGraph,
    pattern: &Arc<SparseAdjacency>,
    centers: NodeId,
    neighbors: NodeId,
    att: AttentionIds,
) -> Result<NodeId> {
    let d = g.shape(centers).1;
    let w_center = g.slice_rows(att.weight, 0, d)?;
    let w_neighbor = g.slice_rows(att.weight, d, d)?;
    let row_scores = g.matmul(centers, w_center)?;
    let col_scores = g.matmul(neighbors, w_neighbor)?;
    let scores = g.edge_scores(Arc::clone(pattern), row_scores, col_scores, att.bias)?;
    let weights = g.edge_softmax(Arc::clone(pattern), scores)?;
    Ok(g.edge_aggregate(Arc::clone(pattern), weights, neighbors)?)
}

#[derive(Clone, Copy, Debug)]
pub struct ExerciseLayerIds {
    pub exercise_from_concept: AttentionIds,
    pub concept_from_exercise: AttentionIds,
    pub concept_from_concept: AttentionIds,
}

/// Graph version of [`exercise_forward_full`]; returns `(e^(L), c^(L))`.
pub fn build_exercise_forward(
    g: &mut ExpressionGraph,
    graph: &RelationGraph,
    exercise: NodeId,
    concept: NodeId,
    layers: &[ExerciseLayerIds],
) -> Result<(NodeId, NodeId)> {
    let (mut e, mut c) = (exercise, concept);
    for (l, layer) in layers.iter().enumerate() {
        let agg = build_attention(g, &graph.exercise_from_concept, e, c, layer.exercise_from_concept)?;
        let e_next = g.add(agg, e)?;
        let from_e = build_attention(g, &graph.concept_from_exercise, c, e, layer.concept_from_exercise)?;
        let from_c = build_attention(g, &graph.concept_from_concept, c, c, layer.concept_from_concept)?;
        let c_next = g.add_all(&[from_e, from_c, c])?;
        g.label(e_next, format!("exercise gat layer {}", l + 1));
        g.label(c_next, format!("relation concept gat layer {}", l + 1));
        e = e_next;
        c = c_next;
    }
    Ok((e, c))
}

/// Graph version of [`concept_forward`].
pub fn build_concept_forward(
    g: &mut ExpressionGraph,
    graph: &DependencyGraph,
    concept: NodeId,
    layers: &[AttentionIds],
) -> Result<NodeId> {
    if !graph.available {
        return Ok(concept);
    }
    let mut c = concept;
    for (l, att) in layers.iter().enumerate() {
        let agg = build_attention(g, &graph.concept_from_concept, c, c, *att)?;
        c = g.add(agg, c)?;
        g.label(c, format!("concept gat layer {}", l + 1));
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
        DenseMatrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn att(d: usize, rng: &mut ChaCha8Rng) -> AttentionParams {
        AttentionParams {
            weight: random(2 * d, 1, rng),
            bias: random(1, 1, rng),
        }
    }

    fn relation(q: &[(usize, usize)], m: usize, k: usize, dep: &[(usize, usize)]) -> RelationGraph {
        let q = SparseAdjacency::from_pattern(m, k, q.iter().copied()).unwrap();
        RelationGraph {
            exercise_from_concept: Arc::new(q.row_normalized()),
            concept_from_exercise: Arc::new(q.transpose().row_normalized()),
            concept_from_concept: Arc::new(
                SparseAdjacency::from_pattern(k, k, dep.iter().copied()).unwrap().row_normalized(),
            ),
        }
    }

    #[test]
    fn attention_row_examples() {
        let p = AttentionParams {
            weight: DenseMatrix::from_vec(2, 1, vec![0.0, 1.0]).unwrap(),
            bias: DenseMatrix::scalar(0.3),
        };
        assert_eq!(attention_row(&[5.0], &[&[2.0]], &p), vec![1.0]);
        let same = attention_row(&[5.0], &[&[2.0], &[2.0], &[2.0]], &p);
        assert!(same.iter().all(|w| (w - 1.0 / 3.0).abs() < 1e-15));
        let two = attention_row(&[0.0], &[&[1.0], &[0.0]], &p);
        let e = std::f64::consts::E;
        assert!((two[0] - e / (1.0 + e)).abs() < 1e-15);
        assert!((two[0] - 0.731).abs() < 1e-3 && (two[1] - 0.269).abs() < 1e-3);
        assert!(attention_row(&[0.0], &[], &p).is_empty());
    }

    #[test]
    fn zero_layers_and_zero_concepts() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = relation(&[(0, 0), (1, 0), (1, 1)], 2, 2, &[]);
        let params = ExerciseModuleParams {
            exercise: random(2, 2, &mut rng),
            concept: random(2, 2, &mut rng),
            layers: vec![],
        };
        assert_eq!(exercise_forward(&g, &params), params.exercise);

        let params = ExerciseModuleParams {
            concept: DenseMatrix::zeros(2, 2),
            layers: vec![ExerciseLayer {
                exercise_from_concept: att(2, &mut rng),
                concept_from_exercise: att(2, &mut rng),
                concept_from_concept: att(2, &mut rng),
            }],
            ..params
        };
        let out = exercise_forward(&g, &params);
        assert_eq!(out.row(0), params.exercise.row(0));
    }

    /// Hand-rolled dense reference for one layer on a 2×2 toy graph.
    #[test]
    fn one_layer_matches_dense_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 3;
        let g = relation(&[(0, 0), (0, 1), (1, 1)], 2, 2, &[(1, 0)]);
        let layer = ExerciseLayer {
            exercise_from_concept: att(d, &mut rng),
            concept_from_exercise: att(d, &mut rng),
            concept_from_concept: att(d, &mut rng),
        };
        let params = ExerciseModuleParams {
            exercise: random(2, d, &mut rng),
            concept: random(2, d, &mut rng),
            layers: vec![layer.clone()],
        };
        let (e, c) = (&params.exercise, &params.concept);
        let dot = |a: &[f64], w: &[f64]| a.iter().zip(w).map(|(x, y)| x * y).sum::<f64>();
        let logit = |p: &AttentionParams, center: &[f64], nb: &[f64]| {
            let w = p.weight.values();
            dot(center, &w[..d]) + dot(nb, &w[d..]) + p.bias.get(0, 0)
        };
        // exercise 0 has concepts {0, 1}; exercise 1 has {1}
        let l0 = logit(&layer.exercise_from_concept, e.row(0), c.row(0));
        let l1 = logit(&layer.exercise_from_concept, e.row(0), c.row(1));
        let a0 = l0.exp() / (l0.exp() + l1.exp());
        let mut want_e0 = vec![0.0; d];
        for t in 0..d {
            want_e0[t] = a0 * c.get(0, t) + (1.0 - a0) * c.get(1, t) + e.get(0, t);
        }
        let want_e1: Vec<f64> = (0..d).map(|t| c.get(1, t) + e.get(1, t)).collect();
        // concept 1: exercises {0, 1} plus prerequisite concept 0
        let m0 = logit(&layer.concept_from_exercise, c.row(1), e.row(0));
        let m1 = logit(&layer.concept_from_exercise, c.row(1), e.row(1));
        let b0 = m0.exp() / (m0.exp() + m1.exp());
        let want_c1: Vec<f64> = (0..d)
            .map(|t| b0 * e.get(0, t) + (1.0 - b0) * e.get(1, t) + c.get(0, t) + c.get(1, t))
            .collect();

        let (out_e, out_c) = exercise_forward_full(&g, &params);
        for (got, want) in [(out_e.row(0), &want_e0), (out_e.row(1), &want_e1), (out_c.row(1), &want_c1)] {
            for (a, b) in got.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-14, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn concept_module_fallback_and_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = ConceptModuleParams {
            concept: random(3, 2, &mut rng),
            layers: vec![att(2, &mut rng), att(2, &mut rng)],
        };
        let unavailable = DependencyGraph {
            concept_from_concept: Arc::new(SparseAdjacency::empty(3, 3)),
            available: false,
        };
        assert_eq!(concept_forward(&unavailable, &params), params.concept);

        // concept 1 relies on concept 0, whose embedding is zero
        let mut zeroed = params.clone();
        zeroed.concept.row_mut(0).fill(0.0);
        let chain = DependencyGraph {
            concept_from_concept: Arc::new(SparseAdjacency::from_pattern(3, 3, [(1, 0)]).unwrap()),
            available: true,
        };
        let out = concept_forward(&chain, &zeroed);
        assert_eq!(out.row(1), zeroed.concept.row(1));
        assert_eq!(out.row(2), zeroed.concept.row(2));
    }

    #[test]
    fn empty_pattern_makes_each_layer_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = RelationGraph {
            exercise_from_concept: Arc::new(SparseAdjacency::empty(2, 2)),
            concept_from_exercise: Arc::new(SparseAdjacency::empty(2, 2)),
            concept_from_concept: Arc::new(SparseAdjacency::empty(2, 2)),
        };
        let params = ExerciseModuleParams {
            exercise: random(2, 2, &mut rng),
            concept: random(2, 2, &mut rng),
            layers: vec![ExerciseLayer {
                exercise_from_concept: att(2, &mut rng),
                concept_from_exercise: att(2, &mut rng),
                concept_from_concept: att(2, &mut rng),
            }],
        };
        let (e, c) = exercise_forward_full(&g, &params);
        assert_eq!(e, params.exercise);
        assert_eq!(c, params.concept);
    }

    #[test]
    fn graph_builders_match_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = 2;
        let g = relation(&[(0, 0), (0, 1), (1, 1), (2, 0)], 3, 2, &[(1, 0), (0, 1)]);
        let layers: Vec<ExerciseLayer> = (0..2)
            .map(|_| ExerciseLayer {
                exercise_from_concept: att(d, &mut rng),
                concept_from_exercise: att(d, &mut rng),
                concept_from_concept: att(d, &mut rng),
            })
            .collect();
        let params = ExerciseModuleParams {
            exercise: random(3, d, &mut rng),
            concept: random(2, d, &mut rng),
            layers: layers.clone(),
        };
        let mut bindings: HashMap<String, DenseMatrix> = HashMap::new();
        let mut eg = ExpressionGraph::new();
        let e = eg.input("e", 3, d);
        let c = eg.input("c", 2, d);
        bindings.insert("e".into(), params.exercise.clone());
        bindings.insert("c".into(), params.concept.clone());
        let mut ids = Vec::new();
        for (l, layer) in layers.iter().enumerate() {
            let mut bind = |name: String, p: &AttentionParams, eg: &mut ExpressionGraph| {
                let w = eg.input(format!("{name}.w"), 2 * d, 1);
                let b = eg.input(format!("{name}.b"), 1, 1);
                bindings.insert(format!("{name}.w"), p.weight.clone());
                bindings.insert(format!("{name}.b"), p.bias.clone());
                AttentionIds { weight: w, bias: b }
            };
            ids.push(ExerciseLayerIds {
                exercise_from_concept: bind(format!("{l}.ec"), &layer.exercise_from_concept, &mut eg),
                concept_from_exercise: bind(format!("{l}.ce"), &layer.concept_from_exercise, &mut eg),
                concept_from_concept: bind(format!("{l}.cc"), &layer.concept_from_concept, &mut eg),
            });
        }
        let (oe, oc) = build_exercise_forward(&mut eg, &g, e, c, &ids).unwrap();
        let vals = eg.evaluate(&bindings).unwrap();
        let (de, dc) = exercise_forward_full(&g, &params);
        for (a, b) in vals.get(oe).values().iter().zip(de.values()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in vals.get(oc).values().iter().zip(dc.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
