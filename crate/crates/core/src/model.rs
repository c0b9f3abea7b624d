//! The assembled network: token encoder, phrase encoder, reasoning modules
//! and box regressor over one shared parameter store.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::features::{build_candidate_features, CandidateFeatures, LearnedEncoder, PhraseEncoder, PrecomputedEncoder, TokenEncoder, Vocab};
use crate::graphs::Sample;
use crate::params::ParamStore;
use crate::propagate::{
    local_beliefs, propagate, LocalBeliefs, Propagation, PropagationConfig, ReasoningDims, ReasoningParams, Task, Tracer,
};
use crate::readout::{itm_score_var, regression_delta, Regressor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Token and object embedding size `d`.
    pub dim: usize,
    /// Phrase state size `h` (both directions together).
    pub hidden: usize,
    /// Output size of the feature transformations.
    pub trf_dim: usize,
    /// Width of the entity-similarity projection.
    pub sim_dim: usize,
    pub match_hidden: usize,
    pub regress_hidden: usize,
    /// Pruning size.
    pub k: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { dim: 32, hidden: 128, trf_dim: 32, sim_dim: 16, match_hidden: 16, regress_hidden: 32, k: 5 }
    }
}

/// Which proposal the box regressor refines.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regress {
    None,
    /// A fixed proposal, e.g. the training label.
    Proposal(usize),
    /// The argmax of the grounding root belief.
    Predicted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    pub grounding: bool,
    pub matching: bool,
    pub message_passing: bool,
    pub regress: Regress,
}

impl ForwardOptions {
    /// Both passes and regression of the predicted referent.
    pub fn inference() -> Self {
        Self { grounding: true, matching: true, message_passing: true, regress: Regress::Predicted }
    }
}

/// Everything one forward pass produced on the tape.
pub struct Forward<'t> {
    pub feats: CandidateFeatures<'t>,
    pub local: LocalBeliefs<'t>,
    pub grounding: Option<Propagation<'t>>,
    pub matching: Option<Propagation<'t>>,
    pub p_match: Option<Var<'t>>,
    /// Refined proposal and its `1 x 4` offsets.
    pub delta: Option<(usize, Var<'t>)>,
}

impl Forward<'_> {
    /// Root belief of the grounding pass.
    pub fn root_belief(&self, root: usize) -> Option<Vec<f64>> {
        self.grounding.as_ref().map(|g| g.nodes[root].bp.to_vec())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Rcrn {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: LearnedEncoder,
    pub phrase: PhraseEncoder,
    pub reasoning: ReasoningParams,
    pub regressor: Regressor,
    /// Replaces the learned token encoder when set.
    #[serde(skip)]
    pub external: Option<Arc<PrecomputedEncoder>>,
}

impl Rcrn {
    pub fn new(config: ModelConfig, vocab: Vocab, feat_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let encoder = LearnedEncoder::new(&mut store, &mut rng, vocab, feat_dim, config.dim);
        let phrase = PhraseEncoder::new(&mut store, &mut rng, config.dim, config.hidden);
        let dims = ReasoningDims {
            dim: config.dim,
            hidden: config.hidden,
            trf: config.trf_dim,
            sim: config.sim_dim,
            match_hidden: config.match_hidden,
            k: config.k,
        };
        let reasoning = ReasoningParams::new(&mut store, &mut rng, dims);
        let regressor = Regressor::new(&mut store, &mut rng, config.dim, config.regress_hidden);
        Self { config, store, encoder, phrase, reasoning, regressor, external: None }
    }

    pub fn with_store(&self, store: ParamStore) -> Self {
        Self { store, ..self.clone() }
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        sample: &Sample,
        opts: &ForwardOptions,
        tracer: &mut Tracer<'_>,
    ) -> Result<Forward<'t>> {
        let store = &self.store;
        let tokens = sample.graph.layout().tokens;
        let enc = match &self.external {
            Some(e) => e.encode(tape, store, &sample.id, &tokens, &sample.scene)?,
            None => self.encoder.encode(tape, store, &sample.id, &tokens, &sample.scene)?,
        };
        let feats = build_candidate_features(tape, store, &self.phrase, &sample.graph, &sample.scene, &enc)?;
        let local = local_beliefs(tape, store, &self.reasoning, &feats, tracer)?;
        let run = |task: Task, tracer: &mut Tracer<'_>| {
            let mut cfg = PropagationConfig::new(task, self.config.k);
            cfg.message_passing = opts.message_passing;
            propagate(tape, store, &self.reasoning, &sample.graph, &sample.scene, &feats, &local, cfg, tracer)
        };
        let grounding = if opts.grounding { Some(run(Task::Grounding, tracer)?) } else { None };
        let matching = if opts.matching { Some(run(Task::Matching, tracer)?) } else { None };
        let p_match = matching.as_ref().map(itm_score_var);
        let target = match opts.regress {
            Regress::None => None,
            Regress::Proposal(i) => Some(i),
            Regress::Predicted => grounding
                .as_ref()
                .and_then(|g| crate::beliefcore::Belief::full(g.nodes[sample.graph.root].bp.to_vec()).argmax()),
        };
        let delta = target.map(|i| (i, regression_delta(tape, store, &self.regressor, &feats, sample.graph.root, i)));
        Ok(Forward { feats, local, grounding, matching, p_match, delta })
    }
}
