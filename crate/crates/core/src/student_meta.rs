//! Meta-multigraph student module.
//!
//! A meta multigraph is a DAG over `P` hyper-nodes `H(1) … H(P)`; each
//! hyper-node holds a latent matrix for every student, exercise and concept.
//! `H(1)` is the initial embedding. Every edge `(u, v)` with `u < v` carries
//! seven candidate propagation paths with learnable raw weights `alpha`.
//! On each forward pass the softmaxed weights of an edge are pruned by the
//! routing threshold `τ = λ·max + (1 − λ)·min`, and
//! `H(v) = Σ_{u<v} f(kept paths of (u, v), H(u))`. The student block of
//! `H(P)` is the student representation.
//!
//! Hyper-nodes are numbered from 1, matching the exported structure format.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graphs::InteractionGraph;
use crate::numeric::{softmax, DenseMatrix, ExpressionGraph, NodeId, NumericError, SparseAdjacency};
use crate::{Error, Result};

pub const DEFAULT_HYPER_NODES: usize = 5;
pub const DEFAULT_LAMBDA: f64 = 0.8;
pub const PATH_COUNT: usize = 7;
const ALPHA_INIT_RANGE: f64 = 0.01;

/// Candidate propagation paths. The `A_xy` names read "from x to y": `A_se`
/// updates exercises from the students who answered them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PathType {
    #[serde(rename = "A_se")]
    StudentToExercise,
    #[serde(rename = "A_es")]
    ExerciseToStudent,
    #[serde(rename = "A_ek")]
    ExerciseToConcept,
    #[serde(rename = "A_ke")]
    ConceptToExercise,
    #[serde(rename = "A_kk")]
    ConceptToConcept,
    #[serde(rename = "I")]
    Identity,
    #[serde(rename = "zero")]
    Zero,
}

/// Node type of a hyper-node block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    Student,
    Exercise,
    Concept,
}

const BLOCKS: [Block; 3] = [Block::Student, Block::Exercise, Block::Concept];

impl PathType {
    pub const ALL: [PathType; PATH_COUNT] = [
        PathType::StudentToExercise,
        PathType::ExerciseToStudent,
        PathType::ExerciseToConcept,
        PathType::ConceptToExercise,
        PathType::ConceptToConcept,
        PathType::Identity,
        PathType::Zero,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PathType::StudentToExercise => "A_se",
            PathType::ExerciseToStudent => "A_es",
            PathType::ExerciseToConcept => "A_ek",
            PathType::ConceptToExercise => "A_ke",
            PathType::ConceptToConcept => "A_kk",
            PathType::Identity => "I",
            PathType::Zero => "zero",
        }
    }

    /// `(target, source)` blocks of a relation path.
    pub fn relation(self) -> Option<(Block, Block)> {
        match self {
            PathType::StudentToExercise => Some((Block::Exercise, Block::Student)),
            PathType::ExerciseToStudent => Some((Block::Student, Block::Exercise)),
            PathType::ExerciseToConcept => Some((Block::Concept, Block::Exercise)),
            PathType::ConceptToExercise => Some((Block::Exercise, Block::Concept)),
            PathType::ConceptToConcept => Some((Block::Concept, Block::Concept)),
            PathType::Identity | PathType::Zero => None,
        }
    }

    fn adjacency(self, graph: &InteractionGraph) -> Option<&std::sync::Arc<SparseAdjacency>> {
        match self {
            PathType::StudentToExercise => Some(&graph.exercise_from_student),
            PathType::ExerciseToStudent => Some(&graph.student_from_exercise),
            PathType::ExerciseToConcept => Some(&graph.concept_from_exercise),
            PathType::ConceptToExercise => Some(&graph.exercise_from_concept),
            PathType::ConceptToConcept => Some(&graph.concept_from_concept),
            PathType::Identity | PathType::Zero => None,
        }
    }
}

impl fmt::Display for PathType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PathType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PathType::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown path type `{s}`")))
    }
}

/// Latent matrices stored in one hyper-node.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperNodeState {
    pub s: DenseMatrix,
    pub e: DenseMatrix,
    pub c: DenseMatrix,
}

impl HyperNodeState {
    pub fn zeros_like(other: &Self) -> Self {
        Self {
            s: DenseMatrix::zeros(other.s.rows(), other.s.cols()),
            e: DenseMatrix::zeros(other.e.rows(), other.e.cols()),
            c: DenseMatrix::zeros(other.c.rows(), other.c.cols()),
        }
    }

    pub fn block(&self, b: Block) -> &DenseMatrix {
        match b {
            Block::Student => &self.s,
            Block::Exercise => &self.e,
            Block::Concept => &self.c,
        }
    }

    fn block_mut(&mut self, b: Block) -> &mut DenseMatrix {
        match b {
            Block::Student => &mut self.s,
            Block::Exercise => &mut self.e,
            Block::Concept => &mut self.c,
        }
    }

    fn is_finite(&self) -> bool {
        self.s.is_finite() && self.e.is_finite() && self.c.is_finite()
    }
}

/// Trainable initial embeddings of the student module.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentModuleParams {
    pub student: DenseMatrix,
    pub exercise: DenseMatrix,
    pub concept: DenseMatrix,
}

/// `H(1)`: a one-hot row times an embedding matrix selects that row, so the
/// full blocks are the embedding matrices themselves.
pub fn init_embeddings(params: &StudentModuleParams) -> HyperNodeState {
    HyperNodeState {
        s: params.student.clone(),
        e: params.exercise.clone(),
        c: params.concept.clone(),
    }
}

/// Hyper-node count, raw path weights and routing coefficient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaMultigraph {
    hyper_nodes: usize,
    /// One row of `PATH_COUNT` raw weights per edge, edges ordered by
    /// [`edge_index`].
    alpha: DenseMatrix,
    lambda: f64,
}

/// Row of edge `(u, v)` in the alpha table (`1 ≤ u < v`): edges are ordered
/// by target, then source.
pub fn edge_index(u: usize, v: usize) -> usize {
    debug_assert!(1 <= u && u < v);
    (v - 1) * (v - 2) / 2 + (u - 1)
}

pub fn edge_count(hyper_nodes: usize) -> usize {
    hyper_nodes * hyper_nodes.saturating_sub(1) / 2
}

/// All edges `(u, v)` in alpha-row order.
pub fn edges(hyper_nodes: usize) -> impl Iterator<Item = (usize, usize)> {
    (2..=hyper_nodes).flat_map(|v| (1..v).map(move |u| (u, v)))
}

impl MetaMultigraph {
    pub fn new(hyper_nodes: usize, alpha: DenseMatrix, lambda: f64) -> Result<Self> {
        if hyper_nodes < 2 {
            return Err(Error::Config(format!("need at least 2 hyper-nodes, got {hyper_nodes}")));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Config(format!("lambda {lambda} is not in [0, 1]")));
        }
        if alpha.shape() != (edge_count(hyper_nodes), PATH_COUNT) {
            return Err(Error::FieldShape {
                field: "alpha".into(),
                detail: format!(
                    "{:?}, expected {:?}",
                    alpha.shape(),
                    (edge_count(hyper_nodes), PATH_COUNT)
                ),
            });
        }
        if !alpha.is_finite() {
            return Err(NumericError::NonFinite("alpha".into()).into());
        }
        Ok(Self {
            hyper_nodes,
            alpha,
            lambda,
        })
    }

    /// Raw weights drawn uniformly from `[−0.01, 0.01]`.
    pub fn random(hyper_nodes: usize, lambda: f64, rng: &mut impl Rng) -> Result<Self> {
        let n = edge_count(hyper_nodes) * PATH_COUNT;
        let alpha = DenseMatrix::from_vec(
            edge_count(hyper_nodes),
            PATH_COUNT,
            (0..n).map(|_| rng.gen_range(-ALPHA_INIT_RANGE..=ALPHA_INIT_RANGE)).collect(),
        )?;
        Self::new(hyper_nodes, alpha, lambda)
    }

    pub fn uniform(hyper_nodes: usize, lambda: f64) -> Result<Self> {
        Self::new(
            hyper_nodes,
            DenseMatrix::zeros(edge_count(hyper_nodes), PATH_COUNT),
            lambda,
        )
    }

    pub fn hyper_nodes(&self) -> usize {
        self.hyper_nodes
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn alpha(&self) -> &DenseMatrix {
        &self.alpha
    }

    pub fn set_alpha(&mut self, alpha: DenseMatrix) -> Result<()> {
        *self = Self::new(self.hyper_nodes, alpha, self.lambda)?;
        Ok(())
    }

    /// Softmax of the seven raw weights of edge `(u, v)`.
    pub fn path_softmax(&self, u: usize, v: usize) -> [f64; PATH_COUNT] {
        let s = softmax(self.alpha.row(edge_index(u, v)));
        s.try_into().expect("seven weights")
    }

    /// Kept paths per edge under the given routing rule.
    pub fn route(&self, routing: Routing) -> MetaGraphExport {
        let edges = edges(self.hyper_nodes)
            .map(|(u, v)| {
                let weights = self.path_softmax(u, v);
                let tau = match routing {
                    Routing::Threshold => routing_threshold(&weights, self.lambda),
                    Routing::TopOne => weights.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                };
                let mut paths = select_paths(&weights, tau);
                if routing == Routing::TopOne {
                    paths.truncate(1);
                }
                RoutedEdge { u, v, tau, paths }
            })
            .collect();
        MetaGraphExport {
            hyper_nodes: self.hyper_nodes,
            lambda: self.lambda,
            edges,
        }
    }

    /// Structure export under threshold routing.
    pub fn export_structure(&self) -> MetaGraphExport {
        self.route(Routing::Threshold)
    }
}

/// How kept paths are chosen on each edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    /// Keep paths at or above `λ·max + (1 − λ)·min`.
    Threshold,
    /// Keep only the highest-weight path (a meta graph).
    TopOne,
}

pub fn routing_threshold(weights: &[f64], lambda: f64) -> f64 {
    let max = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = weights.iter().copied().fold(f64::INFINITY, f64::min);
    lambda * max + (1.0 - lambda) * min
}

/// Paths whose weight is at least `tau`, highest weight first (ties in path
/// order).
pub fn select_paths(weights: &[f64], tau: f64) -> Vec<KeptPath> {
    let mut kept: Vec<KeptPath> = PathType::ALL
        .into_iter()
        .zip(weights)
        .filter(|(_, &w)| w >= tau)
        .map(|(path, &weight)| KeptPath { path, weight })
        .collect();
    kept.sort_by(|a, b| b.weight.total_cmp(&a.weight).then(a.path.cmp(&b.path)));
    kept
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeptPath {
    #[serde(rename = "type")]
    pub path: PathType,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutedEdge {
    pub u: usize,
    pub v: usize,
    pub tau: f64,
    pub paths: Vec<KeptPath>,
}

/// Kept propagation paths of every edge, with their softmax weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaGraphExport {
    #[serde(rename = "P")]
    pub hyper_nodes: usize,
    pub lambda: f64,
    pub edges: Vec<RoutedEdge>,
}

impl MetaGraphExport {
    /// A hand-specified structure with equal weights on each listed edge.
    /// Edges not listed carry no paths.
    pub fn fixed(hyper_nodes: usize, spec: &[FixedEdge]) -> Result<Self> {
        let mut edges = Vec::new();
        for (u, v) in self::edges(hyper_nodes) {
            let paths: Vec<KeptPath> = match spec.iter().find(|e| e.u == u && e.v == v) {
                Some(e) => {
                    let w = 1.0 / e.paths.len() as f64;
                    e.paths.iter().map(|&path| KeptPath { path, weight: w }).collect()
                }
                None => Vec::new(),
            };
            edges.push(RoutedEdge {
                u,
                v,
                tau: 0.0,
                paths,
            });
        }
        let out = Self {
            hyper_nodes,
            lambda: 0.0,
            edges,
        };
        out.validate()?;
        if let Some(bad) = spec.iter().find(|e| e.u < 1 || e.u >= e.v || e.v > hyper_nodes || e.paths.is_empty()) {
            return Err(Error::Config(format!(
                "fixed path edge ({}, {}) is invalid for {hyper_nodes} hyper-nodes",
                bad.u, bad.v
            )));
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hyper_nodes < 2 {
            return Err(Error::Config("structure needs at least 2 hyper-nodes".into()));
        }
        for e in &self.edges {
            if e.u < 1 || e.u >= e.v || e.v > self.hyper_nodes {
                return Err(Error::Config(format!(
                    "edge ({}, {}) is invalid for {} hyper-nodes",
                    e.u, e.v, self.hyper_nodes
                )));
            }
            if e.paths.iter().any(|p| !p.weight.is_finite()) {
                return Err(Error::Config(format!("non-finite weight on edge ({}, {})", e.u, e.v)));
            }
        }
        Ok(())
    }

    pub fn edge(&self, u: usize, v: usize) -> Option<&RoutedEdge> {
        self.edges.iter().find(|e| e.u == u && e.v == v)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("export serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let out: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("metagraph JSON: {e}")))?;
        out.validate()?;
        Ok(out)
    }

    /// Graphviz rendering, one line per kept path.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph meta_multigraph {\n  rankdir=LR;\n");
        for p in 1..=self.hyper_nodes {
            let _ = writeln!(out, "  H{p} [shape=circle];");
        }
        for e in &self.edges {
            for p in &e.paths {
                let _ = writeln!(
                    out,
                    "  H{} -> H{} [label=\"{} {:.4}\"];",
                    e.u, e.v, p.path, p.weight
                );
            }
        }
        out.push_str("}\n");
        out
    }
}

/// One edge of a hand-specified path structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedEdge {
    pub u: usize,
    pub v: usize,
    pub paths: Vec<PathType>,
}

/// Predefined meta-path chain: concepts → exercises → students → exercises
/// → students, one relation per consecutive hyper-node pair.
pub fn default_fixed_paths(hyper_nodes: usize) -> Vec<FixedEdge> {
    let cycle = [
        PathType::ConceptToExercise,
        PathType::ExerciseToStudent,
        PathType::StudentToExercise,
        PathType::ExerciseToStudent,
    ];
    (2..=hyper_nodes)
        .map(|v| FixedEdge {
            u: v - 1,
            v,
            paths: vec![cycle[(v - 2) % cycle.len()]],
        })
        .collect()
}

/// Contribution of one path applied to `H(u)`, with `Up(a, b) = a + b` and
/// mean-normalized messages. Relation paths fill only their target block.
pub fn apply_path(path: PathType, state: &HyperNodeState, graph: &InteractionGraph) -> HyperNodeState {
    match path {
        PathType::Identity => state.clone(),
        PathType::Zero => HyperNodeState::zeros_like(state),
        _ => {
            let (target, source) = path.relation().expect("relation path");
            let adj = path.adjacency(graph).expect("relation path");
            let mut out = HyperNodeState::zeros_like(state);
            let mut updated = adj.matmul_dense(state.block(source));
            updated.add_assign(state.block(target));
            *out.block_mut(target) = updated;
            out
        }
    }
}

/// Kept weights rescaled to sum to one.
pub fn renormalized(kept: &[KeptPath]) -> Vec<KeptPath> {
    let total: f64 = kept.iter().map(|p| p.weight).sum();
    kept.iter()
        .map(|p| KeptPath {
            path: p.path,
            weight: p.weight / total,
        })
        .collect()
}

/// Combines the kept paths of one edge, each weighted by its share of the
/// edge's kept weight. A block receives the weighted sum of
/// the kept relation paths targeting it; when no kept relation path targets
/// a block, the identity path (if kept) carries that block through.
pub fn edge_contribution(kept: &[KeptPath], state: &HyperNodeState, graph: &InteractionGraph) -> HyperNodeState {
    let kept = &renormalized(kept);
    let mut out = HyperNodeState::zeros_like(state);
    let identity = kept.iter().find(|p| p.path == PathType::Identity);
    for block in BLOCKS {
        let relations: Vec<&KeptPath> = kept
            .iter()
            .filter(|p| p.path.relation().is_some_and(|(t, _)| t == block))
            .collect();
        if relations.is_empty() {
            if let Some(id) = identity {
                *out.block_mut(block) = state.block(block).scale(id.weight);
            }
            continue;
        }
        let target = out.block_mut(block);
        for p in relations {
            let contribution = apply_path(p.path, state, graph);
            target.add_assign(&contribution.block(block).scale(p.weight));
        }
    }
    out
}

/// Dense forward pass over a fixed structure. Returns every hyper-node state
/// `H(1) … H(P)`.
pub fn forward_states(
    graph: &InteractionGraph,
    structure: &MetaGraphExport,
    params: &StudentModuleParams,
) -> Result<Vec<HyperNodeState>> {
    structure.validate()?;
    let mut states = vec![init_embeddings(params)];
    for v in 2..=structure.hyper_nodes {
        let mut next = HyperNodeState::zeros_like(&states[0]);
        for u in 1..v {
            let Some(edge) = structure.edge(u, v) else { continue };
            let c = edge_contribution(&edge.paths, &states[u - 1], graph);
            if !c.is_finite() {
                return Err(NumericError::Overflow(format!("meta edge ({u}, {v})")).into());
            }
            next.s.add_assign(&c.s);
            next.e.add_assign(&c.e);
            next.c.add_assign(&c.c);
        }
        states.push(next);
    }
    Ok(states)
}

/// Student representation: the student block of `H(P)`.
pub fn forward_meta_multigraph(
    graph: &InteractionGraph,
    structure: &MetaGraphExport,
    params: &StudentModuleParams,
) -> Result<DenseMatrix> {
    Ok(forward_states(graph, structure, params)?.pop().expect("P ≥ 1").s)
}

/// Graph node ids of one hyper-node's blocks.
#[derive(Clone, Copy, Debug)]
pub struct HyperNodeIds {
    pub s: NodeId,
    pub e: NodeId,
    pub c: NodeId,
}

impl HyperNodeIds {
    fn block(&self, b: Block) -> NodeId {
        match b {
            Block::Student => self.s,
            Block::Exercise => self.e,
            Block::Concept => self.c,
        }
    }
}

/// Source of kept-path weights in the expression graph.
#[derive(Clone, Copy, Debug)]
pub enum PathWeights {
    /// Softmax of the `alpha` node over each edge's kept paths; the pruning
    /// mask is taken from the structure and stays constant during the pass.
    Alpha(NodeId),
    /// The structure's own weights, renormalized, as constants.
    Fixed,
}

/// Adds the meta-multigraph forward pass to `g` and returns `H(P)`.
pub fn build_forward(
    g: &mut ExpressionGraph,
    graph: &InteractionGraph,
    structure: &MetaGraphExport,
    init: HyperNodeIds,
    weights: PathWeights,
) -> Result<HyperNodeIds> {
    structure.validate()?;
    let alpha = match weights {
        PathWeights::Alpha(alpha) => {
            if g.shape(alpha) != (edge_count(structure.hyper_nodes), PATH_COUNT) {
                return Err(Error::FieldShape {
                    field: "alpha".into(),
                    detail: format!("{:?}", g.shape(alpha)),
                });
            }
            Some(alpha)
        }
        PathWeights::Fixed => None,
    };
    let shapes = [g.shape(init.s), g.shape(init.e), g.shape(init.c)];
    let mut states = vec![init];
    for v in 2..=structure.hyper_nodes {
        let mut terms: [Vec<NodeId>; 3] = Default::default();
        for u in 1..v {
            let Some(edge) = structure.edge(u, v) else { continue };
            let src = states[u - 1];
            // softmax over the kept raw weights equals the renormalized
            // softmax over all seven
            let kept_softmax = match alpha {
                Some(a) => {
                    let raw = edge
                        .paths
                        .iter()
                        .map(|p| g.element(a, edge_index(u, v), p.path.index()))
                        .collect::<std::result::Result<Vec<_>, _>>()?;
                    let row = g.concat_cols(&raw)?;
                    Some(g.row_softmax(row))
                }
                None => None,
            };
            let fixed = renormalized(&edge.paths);
            let weight_of = |g: &mut ExpressionGraph, p: &KeptPath| -> Result<NodeId> {
                let slot = edge.paths.iter().position(|q| q.path == p.path).expect("kept path");
                Ok(match kept_softmax {
                    Some(sm) => g.element(sm, 0, slot)?,
                    None => g.constant(DenseMatrix::scalar(fixed[slot].weight)),
                })
            };
            let identity = edge.paths.iter().find(|p| p.path == PathType::Identity);
            for (bi, block) in BLOCKS.into_iter().enumerate() {
                let relations: Vec<&KeptPath> = edge
                    .paths
                    .iter()
                    .filter(|p| p.path.relation().is_some_and(|(t, _)| t == block))
                    .collect();
                if relations.is_empty() {
                    if let Some(id) = identity {
                        let w = weight_of(g, id)?;
                        let term = g.scale_by(src.block(block), w)?;
                        terms[bi].push(term);
                    }
                    continue;
                }
                for p in relations {
                    let (_, source) = p.path.relation().expect("relation");
                    let adj = p.path.adjacency(graph).expect("relation").clone();
                    let message = g.sparse_matmul(adj, src.block(source))?;
                    let updated = g.add(src.block(block), message)?;
                    let w = weight_of(g, p)?;
                    let term = g.scale_by(updated, w)?;
                    g.label(term, format!("meta edge ({u}, {v}) path {}", p.path));
                    terms[bi].push(term);
                }
            }
        }
        let mut ids = [init.s; 3];
        for (bi, t) in terms.iter().enumerate() {
            ids[bi] = if t.is_empty() {
                g.constant(DenseMatrix::zeros(shapes[bi].0, shapes[bi].1))
            } else {
                g.add_all(t)?
            };
        }
        states.push(HyperNodeIds {
            s: ids[0],
            e: ids[1],
            c: ids[2],
        });
    }
    Ok(*states.last().expect("at least H(1)"))
}
