//! Task heads: image-text matching score, referent grounding with box
//! refinement, and localization of the mismatched relation.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::features::CandidateFeatures;
use crate::graphs::{BBox, LanguageSceneGraph, Sample};
use crate::model::{ForwardOptions, Rcrn, Regress};
use crate::params::{Mlp, ParamGroup, ParamStore};
use crate::propagate::{and, compare, locate, Module, ProgramTrace, Propagation, PropagationResult, Target, TraceStep, Tracer};

/// Decision threshold on the match probability.
pub const MATCH_THRESHOLD: f64 = 0.5;

/// Minimum over nodes of `min(p_bp, p_td)`.
pub fn itm_score(result: &PropagationResult) -> f64 {
    let all: Vec<f64> = result.bp_confidences().into_iter().chain(result.td_confidences()).collect();
    and(&all)
}

/// Tape version of [`itm_score`] for a matching pass.
pub fn itm_score_var<'t>(prop: &Propagation<'t>) -> Var<'t> {
    let parts: Vec<Var<'t>> = prop
        .nodes
        .iter()
        .flat_map(|n| [n.p_bp.expect("matching pass confidence"), n.p_td.expect("matching pass confidence")])
        .collect();
    let tape = parts[0].tape();
    tape.concat_cols(&parts).min()
}

/// Proposal id with the largest root belief; ties go to the lowest id.
pub fn ground_referent(result: &PropagationResult, root: usize) -> usize {
    result.nodes[root].bp.argmax().unwrap_or(0)
}

/// `(p_bp_i - p_bp_j) + (p_td_j - p_td_i)` for every relation `i -> j`.
pub fn edge_scores(result: &PropagationResult, graph: &LanguageSceneGraph) -> Vec<f64> {
    let (bp, td) = (result.bp_confidences(), result.td_confidences());
    graph.relations.iter().map(|r| compare(bp[r.sub], bp[r.obj]) + compare(td[r.obj], td[r.sub])).collect()
}

/// Relation with the most negative edge score; ties go to the lowest id.
pub fn mismatched_relation(result: &PropagationResult, graph: &LanguageSceneGraph) -> Result<usize> {
    let neg: Vec<f64> = edge_scores(result, graph).iter().map(|d| -d).collect();
    locate(&neg).ok_or(Error::NoRelations)
}

/// Box offset head.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Regressor {
    pub mlp: Mlp,
}

impl Regressor {
    /// The output layer starts at zero so initial offsets are zero.
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, dim: usize, hidden: usize) -> Self {
        let mlp = Mlp::new(store, rng, "regress", &[2 * dim + 5, hidden, 4], ParamGroup::Reasoning);
        let last = mlp.last().clone();
        store.value_mut(last.weight).data.fill(0.0);
        Self { mlp }
    }
}

/// `MLP([o_i, l_i, f_global])` where `f_global` is the mean SPO embedding,
/// or the root appearance embedding when there are no relations.
pub fn regression_delta<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    reg: &Regressor,
    feats: &CandidateFeatures<'t>,
    root: usize,
    proposal: usize,
) -> Var<'t> {
    let global = match feats.re {
        Some(re) => re.mean_rows(),
        None => feats.e.gather_rows(vec![root]),
    };
    let x = tape.concat_cols(&[feats.o.gather_rows(vec![proposal]), feats.lo.gather_rows(vec![proposal]), global]);
    reg.mlp.forward(tape, store, x)
}

/// Proposal box shifted by `delta` and clamped to the image.
pub fn refine_box(bbox: &BBox, delta: &[f64]) -> BBox {
    bbox.offset_clamped([delta[0], delta[1], delta[2], delta[3]])
}

/// Offsets that move `from` onto `to`.
pub fn regression_target(from: &BBox, to: &BBox) -> [f64; 4] {
    [to.x - from.x, to.y - from.y, to.w - from.w, to.h - from.h]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Ground when matched, otherwise localize the mismatch.
    Joint,
    /// Produce both outputs regardless of the match decision.
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub match_prob: f64,
    #[serde(rename = "match")]
    pub matched: bool,
    pub grounded_id: Option<usize>,
    #[serde(rename = "box")]
    pub bbox: Option<BBox>,
    pub mismatched_relation_id: Option<usize>,
    pub mode: Mode,
}

impl Prediction {
    /// The joint-mode view of an oracle prediction.
    pub fn to_joint(&self) -> Prediction {
        let mut p = self.clone();
        p.mode = Mode::Joint;
        if p.matched {
            p.mismatched_relation_id = None;
        } else {
            p.grounded_id = None;
            p.bbox = None;
        }
        p
    }
}

pub fn predict(model: &Rcrn, sample: &Sample, mode: Mode, trace: Option<&mut ProgramTrace>) -> Result<Prediction> {
    predict_with(model, sample, mode, true, trace)
}

/// [`predict`] with message passing optionally disabled. The mismatch
/// field stays empty for graphs without relations.
pub fn predict_with(
    model: &Rcrn,
    sample: &Sample,
    mode: Mode,
    message_passing: bool,
    trace: Option<&mut ProgramTrace>,
) -> Result<Prediction> {
    let mut tracer = Tracer::new(trace);
    let tape = Tape::new();
    let opts = ForwardOptions { message_passing, regress: Regress::Predicted, ..ForwardOptions::inference() };
    let fwd = model.forward(&tape, sample, &opts, &mut tracer)?;
    let graph = &sample.graph;
    let matching = fwd.matching.as_ref().expect("matching pass requested").result();
    let grounding = fwd.grounding.as_ref().expect("grounding pass requested").result();

    let confidences: Vec<f64> = matching.bp_confidences().into_iter().chain(matching.td_confidences()).collect();
    let match_prob = itm_score(&matching);
    tracer.record(|| TraceStep::new(Module::And, Target::Graph, vec![Tensor::row(confidences.clone())], Tensor::scalar(match_prob)));

    let root = &grounding.nodes[graph.root].bp;
    let grounded_id = ground_referent(&grounding, graph.root);
    tracer.record(|| {
        TraceStep::new(Module::Locate, Target::Node(graph.root), vec![Tensor::row(root.values.clone())], Tensor::scalar(grounded_id as f64))
    });
    let (_, delta) = fwd.delta.expect("regression requested");
    let bbox = refine_box(&sample.scene.proposals[grounded_id].bbox, &delta.to_vec());

    let mismatched_relation_id = if graph.num_relations() == 0 {
        None
    } else {
        let (bp, td) = (matching.bp_confidences(), matching.td_confidences());
        let scores = edge_scores(&matching, graph);
        for (r, &d) in graph.relations.iter().zip(&scores) {
            tracer.record(|| {
                TraceStep::new(
                    Module::Compare,
                    Target::Edge(r.id),
                    vec![Tensor::row(vec![bp[r.sub], bp[r.obj], td[r.obj], td[r.sub]])],
                    Tensor::scalar(d),
                )
            });
        }
        let id = mismatched_relation(&matching, graph)?;
        tracer.record(|| {
            TraceStep::new(Module::Locate, Target::Graph, vec![Tensor::row(scores.iter().map(|d| -d).collect())], Tensor::scalar(id as f64))
        });
        Some(id)
    };

    let oracle = Prediction {
        match_prob,
        matched: match_prob >= MATCH_THRESHOLD,
        grounded_id: Some(grounded_id),
        bbox: Some(bbox),
        mismatched_relation_id,
        mode: Mode::Oracle,
    };
    Ok(match mode {
        Mode::Oracle => oracle,
        Mode::Joint => oracle.to_joint(),
    })
}
