//! Bi-directional message passing over the language scene graph, producing
//! per-node beliefs and match confidences, with a replayable program trace.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::beliefcore::{
    aggregate, classify, gate_beta, gate_input, gate_input_dim, gate_prod, gate_sum, sim_ent, sim_rel, topk_positions,
    Belief, Classifier, EntitySim, GateSumParams, RelationSim,
};
use crate::error::{Error, Result};
use crate::features::{visual_relation_feature, CandidateFeatures, VisualRelationParams};
use crate::graphs::{LanguageSceneGraph, VisualScene};
use crate::params::{Linear, ParamGroup, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Grounding,
    Matching,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    BottomUp,
    TopDown,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropagationConfig {
    pub task: Task,
    pub k: usize,
    /// When false every node keeps its local belief (the "w/o MP" ablation).
    pub message_passing: bool,
}

impl PropagationConfig {
    pub fn new(task: Task, k: usize) -> Self {
        Self { task, k: k.max(1), message_passing: true }
    }

    pub fn directions(&self) -> &'static [Direction] {
        match self.task {
            Task::Grounding => &[Direction::BottomUp],
            Task::Matching => &[Direction::BottomUp, Direction::TopDown],
        }
    }
}

/// Relation gates, one independent parameter set per pass.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RelationGates {
    pub grounding_bp: Linear,
    pub matching_bp: Linear,
    pub matching_td: Linear,
}

impl RelationGates {
    pub fn get(&self, task: Task, dir: Direction) -> &Linear {
        match (task, dir) {
            (Task::Grounding, _) => &self.grounding_bp,
            (Task::Matching, Direction::BottomUp) => &self.matching_bp,
            (Task::Matching, Direction::TopDown) => &self.matching_td,
        }
    }
}

/// Sizes of the reasoning component.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReasoningDims {
    pub dim: usize,
    pub hidden: usize,
    pub trf: usize,
    pub sim: usize,
    pub match_hidden: usize,
    pub k: usize,
}

/// Every parameterized module used between candidate features and the
/// confidence scores.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReasoningParams {
    pub app: EntitySim,
    pub pos: EntitySim,
    pub rel: RelationSim,
    pub gate_sum: GateSumParams,
    pub gates: RelationGates,
    pub classifier: Classifier,
    pub visual_relation: VisualRelationParams,
    pub k: usize,
}

impl ReasoningParams {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, d: ReasoningDims) -> Self {
        let gdim = gate_input_dim(d.hidden, d.k);
        let gate = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str| {
            Linear::new(store, rng, name, gdim, 1, true, ParamGroup::Reasoning)
        };
        Self {
            app: EntitySim::new(store, rng, "sim.app", d.dim, d.trf, d.sim),
            pos: EntitySim::new(store, rng, "sim.pos", 5, d.trf, d.sim),
            rel: RelationSim::new(store, rng, "sim.rel", d.dim, d.trf),
            gate_sum: GateSumParams::new(store, rng, "gate.sum", gdim, 2),
            gates: RelationGates {
                grounding_bp: gate(store, rng, "gate.rel.grounding_bp"),
                matching_bp: gate(store, rng, "gate.rel.matching_bp"),
                matching_td: gate(store, rng, "gate.rel.matching_td"),
            },
            classifier: Classifier::new(store, rng, "classify", d.k, d.match_hidden),
            visual_relation: VisualRelationParams::new(store, rng, d.dim),
            k: d.k,
        }
    }
}

/// Node schedule: leaves first for bottom-up, root first for top-down.
pub fn propagation_order(graph: &LanguageSceneGraph, dir: Direction) -> Vec<usize> {
    let mut order = graph.preorder();
    if dir == Direction::BottomUp {
        order.reverse();
    }
    order
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Module {
    Sim,
    GateSum,
    Select,
    Aggregate,
    GateProd,
    Classify,
    Locate,
    Compare,
    And,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimKind {
    App,
    Pos,
    Rel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Node(usize),
    Edge(usize),
    Graph,
}

/// One executed module with its exact inputs and output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub module: Module,
    pub target: Target,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<Task>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<Direction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim: Option<SimKind>,
    pub inputs: Vec<Tensor>,
    pub output: Tensor,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub indices: Vec<usize>,
}

impl TraceStep {
    pub fn new(module: Module, target: Target, inputs: Vec<Tensor>, output: Tensor) -> Self {
        Self { module, target, task: None, direction: None, sim: None, inputs, output, indices: Vec::new() }
    }

    fn pass(mut self, task: Task, dir: Option<Direction>) -> Self {
        self.task = Some(task);
        self.direction = dir;
        self
    }
}

/// Ordered record of the modules run for one prediction.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProgramTrace {
    pub steps: Vec<TraceStep>,
}

/// Optional sink for trace steps; recording costs nothing when disabled.
pub struct Tracer<'a>(Option<&'a mut ProgramTrace>);

impl<'a> Tracer<'a> {
    pub fn new(trace: Option<&'a mut ProgramTrace>) -> Self {
        Self(trace)
    }

    pub fn off() -> Self {
        Self(None)
    }

    pub fn record(&mut self, step: impl FnOnce() -> TraceStep) {
        if let Some(t) = self.0.as_mut() {
            t.steps.push(step());
        }
    }
}

/// `a - b`.
pub fn compare(a: f64, b: f64) -> f64 {
    a - b
}

/// Position of the largest value; ties go to the lowest position.
pub fn locate(values: &[f64]) -> Option<usize> {
    Belief::full(values.to_vec()).argmax()
}

/// Minimum of the values.
pub fn and(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::INFINITY, f64::min)
}

impl ProgramTrace {
    /// Recompute every step from its recorded inputs and require bit-equal
    /// outputs.
    pub fn replay(&self, store: &ParamStore, params: &ReasoningParams) -> Result<()> {
        for (i, step) in self.steps.iter().enumerate() {
            let got = replay_step(step, store, params)
                .map_err(|e| Error::TraceMismatch { step: i, reason: e.to_string() })?;
            if got.shape() != step.output.shape()
                || got.data.iter().zip(&step.output.data).any(|(a, b)| a.to_bits() != b.to_bits())
            {
                return Err(Error::TraceMismatch { step: i, reason: format!("{:?} output differs", step.module) });
            }
        }
        Ok(())
    }

    pub fn count(&self, module: Module) -> usize {
        self.steps.iter().filter(|s| s.module == module).count()
    }
}

fn replay_step(step: &TraceStep, store: &ParamStore, p: &ReasoningParams) -> Result<Tensor> {
    let tape = Tape::new();
    let input = |i: usize| -> Result<Var<'_>> {
        step.inputs
            .get(i)
            .map(|t| tape.constant(t.clone()))
            .ok_or_else(|| Error::InvalidGraph(format!("missing input {i}")))
    };
    let out = match step.module {
        Module::Sim => match step.sim {
            Some(SimKind::App) => sim_ent(&tape, store, &p.app, input(0)?, input(1)?)?.value(),
            Some(SimKind::Pos) => sim_ent(&tape, store, &p.pos, input(0)?, input(1)?)?.value(),
            Some(SimKind::Rel) => {
                let (r, c) = step.output.shape();
                sim_rel(&tape, store, &p.rel, input(0)?, input(1)?)?.reshape(r, c).value()
            }
            None => return Err(Error::InvalidGraph("similarity kind missing".into())),
        },
        Module::GateSum => gate_sum(&tape, store, &p.gate_sum, input(0)?, &[input(1)?, input(2)?])?.value(),
        Module::Select => input(0)?.gather_cols(step.indices.iter().map(|&i| Some(i)).collect()).value(),
        Module::Aggregate => {
            let pairs = (0..step.inputs.len() / 2).map(|c| Ok((input(2 * c)?, input(2 * c + 1)?))).collect::<Result<Vec<_>>>()?;
            aggregate(&pairs)?.value()
        }
        Module::GateProd => {
            let (task, dir) = match (step.task, step.direction) {
                (Some(t), Some(d)) => (t, d),
                _ => return Err(Error::InvalidGraph("gated product without pass".into())),
            };
            let beta = gate_beta(&tape, store, p.gates.get(task, dir), input(2)?);
            gate_prod(input(0)?, input(1)?, beta)?.value()
        }
        Module::Classify => classify(&tape, store, &p.classifier, input(0)?).value(),
        Module::Locate => {
            let v = &step.inputs.first().ok_or(Error::EmptyDataset)?.data;
            Tensor::scalar(locate(v).ok_or(Error::EmptyDataset)? as f64)
        }
        Module::Compare => {
            let v = &step.inputs.first().ok_or(Error::EmptyDataset)?.data;
            Tensor::scalar(compare(v[0], v[1]) + compare(v[2], v[3]))
        }
        Module::And => Tensor::scalar(and(&step.inputs.first().ok_or(Error::EmptyDataset)?.data)),
    };
    Ok(out)
}

/// Local correspondences shared by both tasks.
pub struct LocalBeliefs<'t> {
    /// `N_e x N_o` appearance similarities.
    pub app: Var<'t>,
    /// `N_e x N_o` location similarities.
    pub pos: Var<'t>,
    /// Fused `1 x N_o` belief per entity.
    pub local: Vec<Var<'t>>,
    /// Detached gate features per entity.
    pub gates: Vec<Var<'t>>,
}

/// Appearance and location similarities for every entity/proposal pair and
/// their gated fusion into one local belief per entity.
pub fn local_beliefs<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    p: &ReasoningParams,
    feats: &CandidateFeatures<'t>,
    tracer: &mut Tracer<'_>,
) -> Result<LocalBeliefs<'t>> {
    let app = sim_ent(tape, store, &p.app, feats.e, feats.o)?;
    tracer.record(|| {
        let mut s = TraceStep::new(Module::Sim, Target::Graph, vec![feats.e.value(), feats.o.value()], app.value());
        s.sim = Some(SimKind::App);
        s
    });
    let pos = sim_ent(tape, store, &p.pos, feats.le, feats.lo)?;
    tracer.record(|| {
        let mut s = TraceStep::new(Module::Sim, Target::Graph, vec![feats.le.value(), feats.lo.value()], pos.value());
        s.sim = Some(SimKind::Pos);
        s
    });
    let n = feats.num_entities();
    let mut local = Vec::with_capacity(n);
    let mut gates = Vec::with_capacity(n);
    for i in 0..n {
        let a = app.gather_rows(vec![i]);
        let b = pos.gather_rows(vec![i]);
        let g = gate_input(tape, feats.he.gather_rows(vec![i]), a, b, p.k);
        let loc = gate_sum(tape, store, &p.gate_sum, g, &[a, b])?;
        tracer.record(|| TraceStep::new(Module::GateSum, Target::Node(i), vec![g.value(), a.value(), b.value()], loc.value()));
        local.push(loc);
        gates.push(g);
    }
    Ok(LocalBeliefs { app, pos, local, gates })
}

/// Beliefs of one node after a pass.
pub struct NodeState<'t> {
    /// Proposal ids the beliefs range over.
    pub index: Vec<usize>,
    /// Local belief restricted to `index`.
    pub local: Var<'t>,
    pub bp: Var<'t>,
    pub td: Option<Var<'t>>,
    pub p_bp: Option<Var<'t>>,
    pub p_td: Option<Var<'t>>,
}

/// Relation alignment between a parent's and a child's index sets.
pub struct EdgeState<'t> {
    pub relation: usize,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub alignment: Var<'t>,
}

pub struct Propagation<'t> {
    pub config: PropagationConfig,
    pub nodes: Vec<NodeState<'t>>,
    pub edges: Vec<EdgeState<'t>>,
}

/// Relation alignment `A` over `rows x cols` for relation `rel`.
#[allow(clippy::too_many_arguments)]
pub fn alignment<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    p: &ReasoningParams,
    feats: &CandidateFeatures<'t>,
    scene: &VisualScene,
    rel: usize,
    rows: &[usize],
    cols: &[usize],
    tracer: &mut Tracer<'_>,
) -> Result<Var<'t>> {
    let re = feats.re.ok_or(Error::NoRelations)?.gather_rows(vec![rel]);
    let pairs: Vec<(usize, usize)> = rows.iter().flat_map(|&k| cols.iter().map(move |&l| (k, l))).collect();
    let ro = visual_relation_feature(tape, store, &p.visual_relation, feats.o, scene, &pairs)?;
    let a = sim_rel(tape, store, &p.rel, re, ro)?.reshape(rows.len(), cols.len());
    tracer.record(|| {
        let mut s = TraceStep::new(Module::Sim, Target::Edge(rel), vec![re.value(), ro.value()], a.value());
        s.sim = Some(SimKind::Rel);
        s
    });
    Ok(a)
}

/// Top-K positions of `b` in ascending order, the gathered belief, and a
/// trace record.
fn select<'t>(b: Var<'t>, k: usize, node: usize, task: Task, tracer: &mut Tracer<'_>) -> (Vec<usize>, Var<'t>) {
    let mut pos = b.with_value(|v| topk_positions(&v.data, k));
    pos.sort_unstable();
    let out = b.gather_cols(pos.iter().map(|&i| Some(i)).collect());
    tracer.record(|| {
        let mut s = TraceStep::new(Module::Select, Target::Node(node), vec![b.value()], out.value()).pass(task, None);
        s.indices = pos.clone();
        s
    });
    (pos, out)
}

#[allow(clippy::too_many_arguments)]
fn gated<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    p: &ReasoningParams,
    node: usize,
    task: Task,
    dir: Direction,
    local: Var<'t>,
    children: &[(Var<'t>, Var<'t>)],
    gate: Var<'t>,
    tracer: &mut Tracer<'_>,
) -> Result<Var<'t>> {
    let agg = aggregate(children)?;
    tracer.record(|| {
        let inputs = children.iter().flat_map(|(a, b)| [a.value(), b.value()]).collect();
        TraceStep::new(Module::Aggregate, Target::Node(node), inputs, agg.value()).pass(task, Some(dir))
    });
    let beta = gate_beta(tape, store, p.gates.get(task, dir), gate);
    let out = gate_prod(local, agg, beta)?;
    tracer.record(|| {
        TraceStep::new(Module::GateProd, Target::Node(node), vec![local.value(), agg.value(), gate.value()], out.value())
            .pass(task, Some(dir))
    });
    Ok(out)
}

/// Run the passes required by `config` over the tree.
///
/// Grounding keeps full-resolution beliefs at every node and prunes only
/// the child messages to `K` columns. Matching restricts each node to the
/// top-`K` of its local belief, reuses one `K x K` alignment per relation in
/// both directions and scores every node's belief per direction.
#[allow(clippy::too_many_arguments)]
pub fn propagate<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    p: &ReasoningParams,
    graph: &LanguageSceneGraph,
    scene: &VisualScene,
    feats: &CandidateFeatures<'t>,
    local: &LocalBeliefs<'t>,
    config: PropagationConfig,
    tracer: &mut Tracer<'_>,
) -> Result<Propagation<'t>> {
    let n = graph.num_entities();
    let k = config.k;
    let task = config.task;
    let mp = config.message_passing;
    let mut edges = Vec::new();
    match task {
        Task::Grounding => {
            let all: Vec<usize> = (0..scene.len()).collect();
            let mut fin: Vec<Option<Var<'t>>> = vec![None; n];
            for i in propagation_order(graph, Direction::BottomUp) {
                let kids: Vec<_> = graph.child_relations(i).collect();
                if kids.is_empty() || !mp {
                    fin[i] = Some(local.local[i]);
                    continue;
                }
                let mut msgs = Vec::with_capacity(kids.len());
                for r in kids {
                    let child = fin[r.obj].expect("children are scheduled first");
                    let (cols, b_sel) = select(child, k, r.obj, task, tracer);
                    let a = alignment(tape, store, p, feats, scene, r.id, &all, &cols, tracer)?;
                    msgs.push((a, b_sel));
                    edges.push(EdgeState { relation: r.id, rows: all.clone(), cols, alignment: a });
                }
                let b = gated(tape, store, p, i, task, Direction::BottomUp, local.local[i], &msgs, local.gates[i], tracer)?;
                fin[i] = Some(b);
            }
            let nodes = (0..n)
                .map(|i| NodeState {
                    index: all.clone(),
                    local: local.local[i],
                    bp: fin[i].expect("every node visited"),
                    td: None,
                    p_bp: None,
                    p_td: None,
                })
                .collect();
            Ok(Propagation { config, nodes, edges })
        }
        Task::Matching => {
            let mut index = Vec::with_capacity(n);
            let mut restricted = Vec::with_capacity(n);
            for i in 0..n {
                let (pos, b) = select(local.local[i], k, i, task, tracer);
                index.push(pos);
                restricted.push(b);
            }
            let mut align: Vec<Option<Var<'t>>> = vec![None; graph.num_relations()];
            if mp {
                for r in &graph.relations {
                    let a = alignment(tape, store, p, feats, scene, r.id, &index[r.sub], &index[r.obj], tracer)?;
                    align[r.id] = Some(a);
                    edges.push(EdgeState { relation: r.id, rows: index[r.sub].clone(), cols: index[r.obj].clone(), alignment: a });
                }
            }
            let mut bp: Vec<Option<Var<'t>>> = vec![None; n];
            for i in propagation_order(graph, Direction::BottomUp) {
                let kids: Vec<_> = graph.child_relations(i).collect();
                bp[i] = Some(if kids.is_empty() || !mp {
                    restricted[i]
                } else {
                    let msgs: Vec<_> = kids
                        .iter()
                        .map(|r| (align[r.id].expect("alignment built"), bp[r.obj].expect("children first")))
                        .collect();
                    gated(tape, store, p, i, task, Direction::BottomUp, restricted[i], &msgs, local.gates[i], tracer)?
                });
            }
            let mut td: Vec<Option<Var<'t>>> = vec![None; n];
            for i in propagation_order(graph, Direction::TopDown) {
                td[i] = Some(match graph.parent_relation(i) {
                    Some(r) if mp => {
                        let msg = (align[r.id].expect("alignment built").transpose(), td[r.sub].expect("parent first"));
                        gated(tape, store, p, i, task, Direction::TopDown, restricted[i], &[msg], local.gates[i], tracer)?
                    }
                    _ => restricted[i],
                });
            }
            let mut nodes = Vec::with_capacity(n);
            for i in 0..n {
                let (b, t) = (bp[i].expect("visited"), td[i].expect("visited"));
                let mut conf = |dir: Direction, v: Var<'t>| {
                    let c = classify(tape, store, &p.classifier, v);
                    tracer.record(|| {
                        TraceStep::new(Module::Classify, Target::Node(i), vec![v.value()], c.value()).pass(task, Some(dir))
                    });
                    c
                };
                let p_bp = conf(Direction::BottomUp, b);
                let p_td = conf(Direction::TopDown, t);
                nodes.push(NodeState {
                    index: index[i].clone(),
                    local: restricted[i],
                    bp: b,
                    td: Some(t),
                    p_bp: Some(p_bp),
                    p_td: Some(p_td),
                });
            }
            Ok(Propagation { config, nodes, edges })
        }
    }
}

/// Value snapshot of a node after propagation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeResult {
    pub local: Belief,
    pub bp: Belief,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub td: Option<Belief>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_bp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_td: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeResult {
    pub relation: usize,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub alignment: Tensor,
}

/// Value snapshot of a [`Propagation`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropagationResult {
    pub task: Task,
    pub nodes: Vec<NodeResult>,
    pub edges: Vec<EdgeResult>,
}

impl Propagation<'_> {
    pub fn result(&self) -> PropagationResult {
        let belief = |v: Var<'_>, index: &[usize]| Belief { values: v.to_vec(), index: index.to_vec() };
        PropagationResult {
            task: self.config.task,
            nodes: self
                .nodes
                .iter()
                .map(|s| NodeResult {
                    local: belief(s.local, &s.index),
                    bp: belief(s.bp, &s.index),
                    td: s.td.map(|v| belief(v, &s.index)),
                    p_bp: s.p_bp.map(|v| v.scalar()),
                    p_td: s.p_td.map(|v| v.scalar()),
                })
                .collect(),
            edges: self
                .edges
                .iter()
                .map(|e| EdgeResult { relation: e.relation, rows: e.rows.clone(), cols: e.cols.clone(), alignment: e.alignment.value() })
                .collect(),
        }
    }
}

impl PropagationResult {
    pub fn bp_confidences(&self) -> Vec<f64> {
        self.nodes.iter().map(|n| n.p_bp.unwrap_or(f64::NAN)).collect()
    }

    pub fn td_confidences(&self) -> Vec<f64> {
        self.nodes.iter().map(|n| n.p_td.unwrap_or(f64::NAN)).collect()
    }
}
