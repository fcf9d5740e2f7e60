//! The assembled model: parameters, variant wiring and forward passes.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::diagnosis::{self, DiagnosisIds, DiagnosisParams, Linear, LinearIds, MasteryReport};
use crate::gat::{self, AttentionIds, ExerciseLayerIds};
use crate::graphs::GraphSet;
use crate::numeric::{DenseMatrix, ExpressionGraph, NodeId};
use crate::student_meta::{
    build_forward, default_fixed_paths, FixedEdge, HyperNodeIds, MetaGraphExport, MetaMultigraph, PathWeights, Routing,
    DEFAULT_HYPER_NODES, DEFAULT_LAMBDA,
};
use crate::{Error, Result};

pub const ALPHA: &str = "alpha";

/// Graph-assignment variants of the full model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Students on G_I, exercises on G_R, concepts on G_D.
    #[default]
    #[serde(rename = "full", alias = "disengcd")]
    Full,
    /// All three representations from the interaction graph.
    #[serde(rename = "disengcd_i", alias = "I")]
    Interaction,
    /// Students on G_I; exercises and concepts on G_R.
    #[serde(rename = "disengcd_is_rec", alias = "Is+Rec")]
    IsRec,
    /// Students and exercises on G_I; concepts on G_R.
    #[serde(rename = "disengcd_ise_rc", alias = "Ise+Rc")]
    IseRc,
    /// Students and concepts on G_I; exercises on G_R.
    #[serde(rename = "disengcd_isc_re", alias = "Isc+Re")]
    IscRe,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::Interaction,
        Variant::IsRec,
        Variant::IseRc,
        Variant::IscRe,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Interaction => "disengcd_i",
            Variant::IsRec => "disengcd_is_rec",
            Variant::IseRc => "disengcd_ise_rc",
            Variant::IscRe => "disengcd_isc_re",
        }
    }

    /// Table label, e.g. `DisenGCD(Is+Rec)`.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "DisenGCD",
            Variant::Interaction => "DisenGCD(I)",
            Variant::IsRec => "DisenGCD(Is+Rec)",
            Variant::IseRc => "DisenGCD(Ise+Rc)",
            Variant::IscRe => "DisenGCD(Isc+Re)",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    /// Accepts `full`, `disengcd_i`, `I`, `Is+Rec`, `disengcd_ise_rc`, ...
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .to_ascii_lowercase()
            .replace("disengcd", "")
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect();
        match key.as_str() {
            "" | "full" => Ok(Variant::Full),
            "i" => Ok(Variant::Interaction),
            "isrec" => Ok(Variant::IsRec),
            "iserc" => Ok(Variant::IseRc),
            "iscre" => Ok(Variant::IscRe),
            _ => Err(Error::Config(format!(
                "unknown variant `{s}` (expected full, disengcd_i, disengcd_is_rec, disengcd_ise_rc or disengcd_isc_re)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentMode {
    #[default]
    MetaMultigraph,
    /// Top-1 path per edge.
    MetaGraph,
    /// Predefined meta-paths.
    FixedPaths,
    /// `S̄ = W_S`, no graph.
    Naive,
}

impl StudentMode {
    pub const ALL: [StudentMode; 4] = [
        StudentMode::MetaMultigraph,
        StudentMode::MetaGraph,
        StudentMode::FixedPaths,
        StudentMode::Naive,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StudentMode::MetaMultigraph => "meta_multigraph",
            StudentMode::MetaGraph => "meta_graph",
            StudentMode::FixedPaths => "fixed_paths",
            StudentMode::Naive => "naive",
        }
    }
}

impl fmt::Display for StudentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StudentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "meta_multigraph" | "mmg" => Ok(StudentMode::MetaMultigraph),
            "meta_graph" | "mg" => Ok(StudentMode::MetaGraph),
            "fixed_paths" | "mp" => Ok(StudentMode::FixedPaths),
            "naive" => Ok(StudentMode::Naive),
            _ => Err(Error::Config(format!(
                "unknown student mode `{s}` (expected meta_multigraph, meta_graph, fixed_paths or naive)"
            ))),
        }
    }
}

/// Graph a representation is learned on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphSource {
    Interaction,
    Relation,
    Dependency,
    /// The initial embedding, unchanged.
    Naive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub student: GraphSource,
    pub exercise: GraphSource,
    pub concept: GraphSource,
    pub student_mode: StudentMode,
}

impl VariantSpec {
    pub fn new(variant: Variant, student_mode: StudentMode) -> Self {
        use GraphSource::*;
        let (exercise, concept) = match variant {
            Variant::Full => (Relation, Dependency),
            Variant::Interaction => (Interaction, Interaction),
            Variant::IsRec => (Relation, Relation),
            Variant::IseRc => (Interaction, Relation),
            Variant::IscRe => (Relation, Interaction),
        };
        let student = if student_mode == StudentMode::Naive {
            Naive
        } else {
            Interaction
        };
        Self {
            student,
            exercise,
            concept,
            student_mode,
        }
    }

    /// Rejects assignments a graph cannot provide.
    pub fn validate(&self) -> Result<()> {
        use GraphSource::*;
        let bad = |what: &str, src: GraphSource| {
            Err(Error::Config(format!("{what} representation cannot be learned on {src:?}")))
        };
        match (self.student, self.student_mode) {
            (Interaction, m) if m != StudentMode::Naive => {}
            (Naive, StudentMode::Naive) => {}
            (s, m) => return Err(Error::Config(format!("student source {s:?} does not fit student mode {m}"))),
        }
        if self.exercise == Dependency {
            return bad("exercise", Dependency);
        }
        let uses_hyper = self.exercise == Interaction || self.concept == Interaction;
        if uses_hyper && self.student_mode == StudentMode::Naive {
            return Err(Error::Config(
                "interaction-graph exercise/concept representations need a meta-multigraph student module".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hyper_nodes: usize,
    pub layers: usize,
    pub lambda: f64,
    pub variant: Variant,
    pub student_mode: StudentMode,
    /// Paths for `fixed_paths` mode; a default chain when absent.
    pub fixed_paths: Option<Vec<FixedEdge>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hyper_nodes: DEFAULT_HYPER_NODES,
            layers: gat::DEFAULT_LAYERS,
            lambda: DEFAULT_LAMBDA,
            variant: Variant::Full,
            student_mode: StudentMode::MetaMultigraph,
            fixed_paths: None,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self) -> VariantSpec {
        VariantSpec::new(self.variant, self.student_mode)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hyper_nodes < 2 {
            return Err(Error::Config(format!("P must be at least 2, got {}", self.hyper_nodes)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} is not in [0, 1]", self.lambda)));
        }
        self.spec().validate()?;
        if self.student_mode == StudentMode::FixedPaths {
            MetaGraphExport::fixed(self.hyper_nodes, &self.fixed_path_list())?;
        }
        Ok(())
    }

    fn fixed_path_list(&self) -> Vec<FixedEdge> {
        self.fixed_paths
            .clone()
            .unwrap_or_else(|| default_fixed_paths(self.hyper_nodes))
    }
}

/// Entity counts; the hidden width equals the concept count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n_students: usize,
    pub n_exercises: usize,
    pub n_concepts: usize,
}

impl Dims {
    pub fn of(dataset: &Dataset) -> Self {
        Self {
            n_students: dataset.n_students(),
            n_exercises: dataset.n_exercises(),
            n_concepts: dataset.n_concepts(),
        }
    }

    pub fn hidden(&self) -> usize {
        self.n_concepts
    }
}

/// Which parameter group receives gradients in a pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    /// Network weights ω.
    Weights,
    /// Path weights α.
    Alpha,
    Nothing,
}

/// Final representations `(S̄, Ē, C̄)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Representations {
    pub student: DenseMatrix,
    pub exercise: DenseMatrix,
    pub concept: DenseMatrix,
}

#[derive(Clone, Copy, Debug)]
pub struct RepresentationIds {
    pub student: NodeId,
    pub exercise: NodeId,
    pub concept: NodeId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DisenGcd {
    config: ModelConfig,
    dims: Dims,
    weights: BTreeMap<String, DenseMatrix>,
    meta: MetaMultigraph,
}

fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> DenseMatrix {
    DenseMatrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect())
        .expect("finite init")
}

/// Names and shapes of every weight, in initialization order.
fn weight_layout(config: &ModelConfig, dims: Dims) -> Vec<(String, usize, usize)> {
    let (n, m, k) = (dims.n_students, dims.n_exercises, dims.n_concepts);
    let d = dims.hidden();
    let mut out = vec![
        ("student.W_S".to_string(), n, d),
        ("student.W_E".to_string(), m, d),
        ("student.W_C".to_string(), k, d),
        ("exercise.W_E".to_string(), m, d),
        ("exercise.W_C".to_string(), k, d),
    ];
    for l in 0..config.layers {
        for ctx in ["ec", "ce", "cc"] {
            out.push((format!("exercise.layer{l}.{ctx}.weight"), 2 * d, 1));
            out.push((format!("exercise.layer{l}.{ctx}.bias"), 1, 1));
        }
    }
    out.push(("concept.W_C".to_string(), k, d));
    for l in 0..config.layers {
        out.push((format!("concept.layer{l}.weight"), 2 * d, 1));
        out.push((format!("concept.layer{l}.bias"), 1, 1));
    }
    for f in ["F_si", "F_ej", "F_simi"] {
        out.push((format!("diag.{f}.weight"), d, d));
        out.push((format!("diag.{f}.bias"), 1, d));
    }
    out
}

impl DisenGcd {
    /// Fresh model. Weights are uniform in `±1/√fan_in`, biases zero, and
    /// path weights uniform in `±0.01`.
    pub fn new(config: ModelConfig, dims: Dims, seed: u64) -> Result<Self> {
        config.validate()?;
        if dims.n_students == 0 || dims.n_exercises == 0 || dims.n_concepts == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = BTreeMap::new();
        for (name, rows, cols) in weight_layout(&config, dims) {
            let value = if name.ends_with(".bias") {
                DenseMatrix::zeros(rows, cols)
            } else if name.contains(".W_") {
                uniform(rows, cols, 1.0 / (cols as f64).sqrt(), &mut rng)
            } else {
                uniform(rows, cols, 1.0 / (rows as f64).sqrt(), &mut rng)
            };
            weights.insert(name, value);
        }
        // Equal α keeps every path on every edge until the first α-step;
        // random α would prune a random subset before any data is seen.
        let meta = MetaMultigraph::uniform(config.hyper_nodes, config.lambda)?;
        Ok(Self {
            config,
            dims,
            weights,
            meta,
        })
    }

    /// Rebuilds a model from stored parts, checking every shape.
    pub fn from_parts(
        config: ModelConfig,
        dims: Dims,
        weights: BTreeMap<String, DenseMatrix>,
        alpha: DenseMatrix,
    ) -> Result<Self> {
        config.validate()?;
        let layout = weight_layout(&config, dims);
        if layout.len() != weights.len() {
            return Err(Error::FieldShape {
                field: "weights".into(),
                detail: format!("{} matrices, expected {}", weights.len(), layout.len()),
            });
        }
        for (name, rows, cols) in layout {
            let w = weights.get(&name).ok_or_else(|| Error::FieldShape {
                field: name.clone(),
                detail: "missing".into(),
            })?;
            if w.shape() != (rows, cols) {
                return Err(Error::FieldShape {
                    field: name,
                    detail: format!("{:?}, expected {:?}", w.shape(), (rows, cols)),
                });
            }
        }
        let meta = MetaMultigraph::new(config.hyper_nodes, alpha, config.lambda)?;
        Ok(Self {
            config,
            dims,
            weights,
            meta,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn weights(&self) -> &BTreeMap<String, DenseMatrix> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut BTreeMap<String, DenseMatrix> {
        &mut self.weights
    }

    pub fn meta(&self) -> &MetaMultigraph {
        &self.meta
    }

    pub fn alpha(&self) -> &DenseMatrix {
        self.meta.alpha()
    }

    pub fn set_alpha(&mut self, alpha: DenseMatrix) -> Result<()> {
        self.meta.set_alpha(alpha)
    }

    /// Whether α influences the forward pass.
    pub fn uses_alpha(&self) -> bool {
        matches!(
            self.config.student_mode,
            StudentMode::MetaMultigraph | StudentMode::MetaGraph
        )
    }

    /// Current student-module structure; `None` for the naive student mode.
    pub fn structure(&self) -> Option<MetaGraphExport> {
        match self.config.student_mode {
            StudentMode::MetaMultigraph => Some(self.meta.route(Routing::Threshold)),
            StudentMode::MetaGraph => Some(self.meta.route(Routing::TopOne)),
            StudentMode::FixedPaths => Some(
                MetaGraphExport::fixed(self.config.hyper_nodes, &self.config.fixed_path_list())
                    .expect("validated with the config"),
            ),
            StudentMode::Naive => None,
        }
    }

    /// Checks that a dataset has the counts this model was built for.
    pub fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        let other = Dims::of(dataset);
        for (field, a, b) in [
            ("n_students", self.dims.n_students, other.n_students),
            ("n_exercises", self.dims.n_exercises, other.n_exercises),
            ("n_concepts", self.dims.n_concepts, other.n_concepts),
        ] {
            if a != b {
                return Err(Error::FieldShape {
                    field: field.into(),
                    detail: format!("model has {a}, dataset has {b}"),
                });
            }
        }
        Ok(())
    }

    /// Values bound to the graph inputs declared by [`Self::build_representations`].
    pub fn bindings(&self) -> BTreeMap<String, DenseMatrix> {
        let mut b = self.weights.clone();
        b.insert(ALPHA.to_string(), self.meta.alpha().clone());
        b
    }

    /// Adds the three representation modules to `g`.
    pub fn build_representations(
        &self,
        g: &mut ExpressionGraph,
        graphs: &GraphSet,
        trainable: Trainable,
    ) -> Result<RepresentationIds> {
        let spec = self.config.spec();
        let mut declared: HashMap<String, NodeId> = HashMap::new();
        let mut w = |g: &mut ExpressionGraph, name: &str| -> NodeId {
            if let Some(&id) = declared.get(name) {
                return id;
            }
            let (rows, cols) = if name == ALPHA {
                self.meta.alpha().shape()
            } else {
                self.weights[name].shape()
            };
            let train = match trainable {
                Trainable::Weights => name != ALPHA,
                Trainable::Alpha => name == ALPHA,
                Trainable::Nothing => false,
            };
            let id = if train {
                g.parameter(name, rows, cols)
            } else {
                g.input(name, rows, cols)
            };
            declared.insert(name.to_string(), id);
            id
        };

        let hyper = match self.structure() {
            None => None,
            Some(structure) => {
                let init = HyperNodeIds {
                    s: w(g, "student.W_S"),
                    e: w(g, "student.W_E"),
                    c: w(g, "student.W_C"),
                };
                let weights = if self.uses_alpha() {
                    PathWeights::Alpha(w(g, ALPHA))
                } else {
                    PathWeights::Fixed
                };
                Some(build_forward(g, &graphs.interaction, &structure, init, weights)?)
            }
        };
        let student = match hyper {
            Some(h) => h.s,
            None => w(g, "student.W_S"),
        };

        let relation = if spec.exercise == GraphSource::Relation || spec.concept == GraphSource::Relation {
            let layers: Vec<ExerciseLayerIds> = (0..self.config.layers)
                .map(|l| {
                    let mut att = |ctx: &str| AttentionIds {
                        weight: w(g, &format!("exercise.layer{l}.{ctx}.weight")),
                        bias: w(g, &format!("exercise.layer{l}.{ctx}.bias")),
                    };
                    ExerciseLayerIds {
                        exercise_from_concept: att("ec"),
                        concept_from_exercise: att("ce"),
                        concept_from_concept: att("cc"),
                    }
                })
                .collect();
            let e0 = w(g, "exercise.W_E");
            let c0 = w(g, "exercise.W_C");
            Some(gat::build_exercise_forward(g, &graphs.relation, e0, c0, &layers)?)
        } else {
            None
        };

        let hyper_block = |which: fn(&HyperNodeIds) -> NodeId| which(&hyper.expect("validated: meta-multigraph present"));
        let exercise = match spec.exercise {
            GraphSource::Relation => relation.expect("built above").0,
            GraphSource::Interaction => hyper_block(|h| h.e),
            GraphSource::Naive => w(g, "exercise.W_E"),
            GraphSource::Dependency => unreachable!("rejected by validate"),
        };
        let concept = match spec.concept {
            GraphSource::Relation => relation.expect("built above").1,
            GraphSource::Interaction => hyper_block(|h| h.c),
            GraphSource::Dependency => {
                let layers: Vec<AttentionIds> = (0..self.config.layers)
                    .map(|l| AttentionIds {
                        weight: w(g, &format!("concept.layer{l}.weight")),
                        bias: w(g, &format!("concept.layer{l}.bias")),
                    })
                    .collect();
                let c0 = w(g, "concept.W_C");
                gat::build_concept_forward(g, &graphs.dependency, c0, &layers)?
            }
            GraphSource::Naive => w(g, "concept.W_C"),
        };
        g.label(student, "student representation");
        g.label(exercise, "exercise representation");
        g.label(concept, "concept representation");
        Ok(RepresentationIds {
            student,
            exercise,
            concept,
        })
    }

    fn diagnosis_ids(&self, g: &mut ExpressionGraph, trainable: bool) -> DiagnosisIds {
        let mut lin = |f: &str| {
            let mut decl = |suffix: &str| {
                let name = format!("diag.{f}.{suffix}");
                let (r, c) = self.weights[&name].shape();
                if trainable {
                    g.parameter(name, r, c)
                } else {
                    g.input(name, r, c)
                }
            };
            LinearIds {
                weight: decl("weight"),
                bias: decl("bias"),
            }
        };
        DiagnosisIds {
            student: lin("F_si"),
            exercise: lin("F_ej"),
            similarity: lin("F_simi"),
        }
    }

    /// Graph computing the mean BCE loss over `(student, exercise, label)`
    /// triples. Returns the graph and the probability node.
    pub fn build_loss(
        &self,
        graphs: &GraphSet,
        q_matrix: &crate::numeric::SparseAdjacency,
        batch: &[(usize, usize, f64)],
        trainable: Trainable,
    ) -> Result<(ExpressionGraph, NodeId)> {
        let mut g = ExpressionGraph::new();
        let reps = self.build_representations(&mut g, graphs, trainable)?;
        let diag = self.diagnosis_ids(&mut g, trainable == Trainable::Weights);
        let pairs: Vec<(usize, usize)> = batch.iter().map(|b| (b.0, b.1)).collect();
        let probs = diagnosis::build_predictions(
            &mut g,
            reps.student,
            reps.exercise,
            reps.concept,
            q_matrix,
            &pairs,
            diag,
        )?;
        let labels = std::sync::Arc::new(batch.iter().map(|b| b.2).collect::<Vec<_>>());
        let loss = g.binary_cross_entropy(probs, labels)?;
        g.label(loss, "loss");
        g.set_loss(loss)?;
        Ok((g, probs))
    }

    pub fn representations(&self, graphs: &GraphSet) -> Result<Representations> {
        let mut g = ExpressionGraph::new();
        let ids = self.build_representations(&mut g, graphs, Trainable::Nothing)?;
        let bindings = self.bindings();
        let values = g.evaluate(&bindings)?;
        Ok(Representations {
            student: values.get(ids.student).clone(),
            exercise: values.get(ids.exercise).clone(),
            concept: values.get(ids.concept).clone(),
        })
    }

    pub fn diagnosis_params(&self) -> DiagnosisParams {
        let lin = |f: &str| Linear {
            weight: self.weights[&format!("diag.{f}.weight")].clone(),
            bias: self.weights[&format!("diag.{f}.bias")].clone(),
        };
        DiagnosisParams {
            student: lin("F_si"),
            exercise: lin("F_ej"),
            similarity: lin("F_simi"),
        }
    }

    /// Response probabilities for every log of `dataset`, in log order.
    pub fn predict(&self, graphs: &GraphSet, dataset: &Dataset) -> Result<Vec<f64>> {
        let pairs: Vec<(usize, usize)> = dataset.logs().iter().map(|l| (l.student, l.exercise)).collect();
        self.predict_pairs(graphs, dataset.q_matrix(), &pairs)
    }

    pub fn predict_pairs(
        &self,
        graphs: &GraphSet,
        q_matrix: &crate::numeric::SparseAdjacency,
        pairs: &[(usize, usize)],
    ) -> Result<Vec<f64>> {
        let reps = self.representations(graphs)?;
        let params = self.diagnosis_params();
        pairs
            .iter()
            .map(|&(i, j)| {
                diagnosis::predict(
                    reps.student.row(i),
                    reps.exercise.row(j),
                    &reps.concept,
                    q_matrix.row_cols(j),
                    &params,
                )
                .map(|p| p.probability)
            })
            .collect()
    }

    /// Mastery reports for the given student indices.
    pub fn diagnose(&self, graphs: &GraphSet, dataset: &Dataset, students: &[usize]) -> Result<Vec<MasteryReport>> {
        let reps = self.representations(graphs)?;
        let params = self.diagnosis_params();
        let ids = dataset.ids();
        Ok(students
            .iter()
            .map(|&i| {
                diagnosis::mastery_report(
                    &ids.students[i],
                    reps.student.row(i),
                    &reps.exercise,
                    &reps.concept,
                    dataset.q_matrix(),
                    &ids.concepts,
                    &params,
                )
            })
            .collect())
    }
}
