//! Candidate representations for both modalities: token encoders, the
//! bidirectional phrase encoder with its three attention heads, and visual
//! location and pairwise relation features.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graphs::{location_vector, relative_spatial, LanguageSceneGraph, VisualScene};
use crate::params::{xavier, Linear, ParamGroup, ParamId, ParamStore};

pub const UNK: &str = "<unk>";

/// Word list with `<unk>` at index 0.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        Self::from_words(words)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

impl Vocab {
    /// Sorted, deduplicated vocabulary over `words`.
    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<&str> = words.into_iter().filter(|w| *w != UNK).collect();
        let mut all = vec![UNK.to_string()];
        all.extend(set.into_iter().map(str::to_string));
        Self::from_words(all)
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

/// Word vectors `N_w x d` and object vectors `N_o x d`.
#[derive(Clone, Copy, Debug)]
pub struct TokenEncoding<'t> {
    pub words: Var<'t>,
    pub objects: Var<'t>,
}

/// Source of per-token features for both modalities.
pub trait TokenEncoder: Send + Sync {
    fn dim(&self) -> usize;

    fn encode<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        key: &str,
        tokens: &[String],
        scene: &VisualScene,
    ) -> Result<TokenEncoding<'t>>;
}

/// Trainable word table and object projection followed by one mixing layer
/// shared by both modalities.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LearnedEncoder {
    pub vocab: Vocab,
    pub table: ParamId,
    pub object_proj: Linear,
    pub mix: Linear,
    pub dim: usize,
    pub feat_dim: usize,
}

impl LearnedEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, vocab: Vocab, feat_dim: usize, dim: usize) -> Self {
        let g = ParamGroup::Encoder;
        let table = store.add("encoder.words", xavier(rng, vocab.len(), dim), g);
        let object_proj = Linear::new(store, rng, "encoder.objects", feat_dim, dim, true, g);
        let mix = Linear::new(store, rng, "encoder.mix", dim, dim, true, g);
        Self { vocab, table, object_proj, mix, dim, feat_dim }
    }
}

impl TokenEncoder for LearnedEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        _key: &str,
        tokens: &[String],
        scene: &VisualScene,
    ) -> Result<TokenEncoding<'t>> {
        if scene.feature_dim() != self.feat_dim && !scene.is_empty() {
            return Err(Error::DimensionMismatch { expected: self.feat_dim, actual: scene.feature_dim() });
        }
        let words = if tokens.is_empty() {
            tape.constant(Tensor::zeros(0, self.dim))
        } else {
            let ids = tokens.iter().map(|w| self.vocab.id(w)).collect();
            let raw = tape.param(store, self.table).gather_rows(ids);
            self.mix.forward(tape, store, raw).tanh()
        };
        let feats = Tensor::from_rows(&scene.proposals.iter().map(|p| p.feat.clone()).collect::<Vec<_>>());
        let feats = if scene.is_empty() { Tensor::zeros(0, self.feat_dim) } else { feats };
        let objects = self.object_proj.forward(tape, store, tape.constant(feats));
        let objects = self.mix.forward(tape, store, objects).tanh();
        Ok(TokenEncoding { words, objects })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecomputedEntry {
    pub words: Vec<Vec<f64>>,
    pub objects: Vec<Vec<f64>>,
}

/// Externally computed token and object features keyed by sample id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrecomputedEncoder {
    pub dim: usize,
    pub entries: HashMap<String, PrecomputedEntry>,
}

impl PrecomputedEncoder {
    /// Check every vector against `dim`.
    pub fn new(dim: usize, entries: HashMap<String, PrecomputedEntry>) -> Result<Self> {
        for e in entries.values() {
            for v in e.words.iter().chain(&e.objects) {
                if v.len() != dim {
                    return Err(Error::DimensionMismatch { expected: dim, actual: v.len() });
                }
            }
        }
        Ok(Self { dim, entries })
    }

    /// Read a JSON object `{sample_id: {words: [[..]], objects: [[..]]}}`.
    pub fn load(path: &Path, dim: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let entries: HashMap<String, PrecomputedEntry> = serde_json::from_str(&text)?;
        Self::new(dim, entries)
    }
}

impl TokenEncoder for PrecomputedEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode<'t>(
        &self,
        tape: &'t Tape,
        _store: &ParamStore,
        key: &str,
        tokens: &[String],
        scene: &VisualScene,
    ) -> Result<TokenEncoding<'t>> {
        let e = self.entries.get(key).ok_or_else(|| Error::UnknownSample(key.to_string()))?;
        if e.words.len() != tokens.len() {
            return Err(Error::DimensionMismatch { expected: tokens.len(), actual: e.words.len() });
        }
        if e.objects.len() != scene.len() {
            return Err(Error::DimensionMismatch { expected: scene.len(), actual: e.objects.len() });
        }
        let mat = |rows: &[Vec<f64>]| {
            if rows.is_empty() {
                Tensor::zeros(0, self.dim)
            } else {
                Tensor::from_rows(rows)
            }
        };
        Ok(TokenEncoding { words: tape.constant(mat(&e.words)), objects: tape.constant(mat(&e.objects)) })
    }
}

/// Single LSTM direction with gate order input, forget, cell, output.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LstmCell {
    pub w: Linear,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, input: usize, hidden: usize) -> Self {
        let w = Linear::new(store, rng, name, input + hidden, 4 * hidden, true, ParamGroup::Encoder);
        let b = store.value_mut(w.bias.expect("lstm bias"));
        for j in hidden..2 * hidden {
            b.data[j] = 1.0;
        }
        Self { w, hidden }
    }

    fn step<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>, h: Var<'t>, c: Var<'t>) -> (Var<'t>, Var<'t>) {
        let hh = self.hidden;
        let z = self.w.forward(tape, store, tape.concat_cols(&[x, h]));
        let i = z.slice_cols(0, hh).sigmoid();
        let f = z.slice_cols(hh, hh).sigmoid();
        let g = z.slice_cols(2 * hh, hh).tanh();
        let o = z.slice_cols(3 * hh, hh).sigmoid();
        let c2 = f.mul(c).add(i.mul(g));
        let h2 = o.mul(c2.tanh());
        (h2, c2)
    }
}

/// Bidirectional LSTM run over a batch of variable-length sequences.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BiLstm {
    pub fwd: LstmCell,
    pub bwd: LstmCell,
}

/// Per-position hidden states and final states of a [`BiLstm`] batch.
pub struct BiLstmOutput<'t> {
    /// `steps[t]` is `P x 2H`: forward and backward state at position `t`.
    pub steps: Vec<Var<'t>>,
    /// `P x 2H`: last forward state and first backward state of each row.
    pub last: Var<'t>,
}

impl BiLstm {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, input: usize, hidden: usize) -> Self {
        assert!(hidden >= 2 && hidden.is_multiple_of(2), "bidirectional hidden size must be even");
        Self {
            fwd: LstmCell::new(store, rng, &format!("{name}.fwd"), input, hidden / 2),
            bwd: LstmCell::new(store, rng, &format!("{name}.bwd"), input, hidden / 2),
        }
    }

    pub fn hidden(&self) -> usize {
        self.fwd.hidden + self.bwd.hidden
    }

    /// Run over sequences of row indices into `words`. Shorter rows are
    /// masked so their states stay frozen past their end (forward) or at
    /// the initial state until their last token (backward).
    pub fn run<'t>(&self, tape: &'t Tape, store: &ParamStore, words: Var<'t>, seqs: &[Vec<usize>]) -> BiLstmOutput<'t> {
        let p = seqs.len();
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let d = words.shape().1;
        let pad = words.shape().0;
        let padded = tape.concat_rows(&[words, tape.constant(Tensor::zeros(1, d))]);
        let inputs: Vec<Var<'t>> = (0..len)
            .map(|t| padded.gather_rows(seqs.iter().map(|s| s.get(t).copied().unwrap_or(pad)).collect()))
            .collect();
        let mask = |t: usize, hh: usize| -> Option<Var<'t>> {
            if seqs.iter().all(|s| t < s.len()) {
                return None;
            }
            let mut m = Tensor::zeros(p, hh);
            for (r, s) in seqs.iter().enumerate() {
                if t < s.len() {
                    m.data[r * hh..(r + 1) * hh].fill(1.0);
                }
            }
            Some(tape.constant(m))
        };
        let run_dir = |cell: &LstmCell, order: Vec<usize>| -> Vec<Option<Var<'t>>> {
            let hh = cell.hidden;
            let mut h = tape.constant(Tensor::zeros(p, hh));
            let mut c = tape.constant(Tensor::zeros(p, hh));
            let mut out = vec![None; len];
            for t in order {
                let (h2, c2) = cell.step(tape, store, inputs[t], h, c);
                match mask(t, hh) {
                    None => {
                        h = h2;
                        c = c2;
                    }
                    Some(m) => {
                        h = h.add(m.mul(h2.sub(h)));
                        c = c.add(m.mul(c2.sub(c)));
                    }
                }
                out[t] = Some(h);
            }
            out
        };
        let hf = run_dir(&self.fwd, (0..len).collect());
        let hb = run_dir(&self.bwd, (0..len).rev().collect());
        let steps: Vec<Var<'t>> = (0..len)
            .map(|t| tape.concat_cols(&[hf[t].expect("forward state"), hb[t].expect("backward state")]))
            .collect();
        let last = if len == 0 {
            tape.constant(Tensor::zeros(p, self.hidden()))
        } else {
            tape.concat_cols(&[hf[len - 1].expect("forward state"), hb[0].expect("backward state")])
        };
        BiLstmOutput { steps, last }
    }
}

/// Attention head selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    App,
    Pos,
    Spo,
}

impl Head {
    pub const ALL: [Head; 3] = [Head::App, Head::Pos, Head::Spo];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// `softmax_i(h_i . w) w_i` over one phrase: `words` is `L x d`, `hidden`
/// is `L x H`, `w` is `H x 1`. Returns the `1 x d` summary and the weights.
pub fn phrase_attention<'t>(words: Var<'t>, hidden: Var<'t>, w: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let (l, _) = words.shape();
    if l == 0 {
        return Err(Error::EmptyPhrase);
    }
    if hidden.shape().0 != l {
        return Err(Error::DimensionMismatch { expected: l, actual: hidden.shape().0 });
    }
    let weights = hidden.matmul(w).transpose().softmax_rows();
    Ok((weights.matmul(words), weights))
}

/// Recurrent phrase encoder, its attention heads and the location head.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PhraseEncoder {
    pub lstm: BiLstm,
    /// `H x 3`, one column per [`Head`].
    pub attention: ParamId,
    /// Projects the pos-head summary into location space.
    pub location: Linear,
}

impl PhraseEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, dim: usize, hidden: usize) -> Self {
        let lstm = BiLstm::new(store, rng, "phrase.lstm", dim, hidden);
        let attention = store.add("phrase.attention", xavier(rng, hidden, 3), ParamGroup::Encoder);
        let location = Linear::new(store, rng, "phrase.location", dim, 5, true, ParamGroup::Encoder);
        Self { lstm, attention, location }
    }

    pub fn head_weight<'t>(&self, tape: &'t Tape, store: &ParamStore, head: Head) -> Var<'t> {
        tape.param(store, self.attention).slice_cols(head.index(), 1)
    }
}

/// Per-object location and pairwise relation projections.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VisualRelationParams {
    /// Spatial part, `5 -> d/2`.
    pub w_l: Linear,
    /// Appearance part, `2d -> d - d/2`.
    pub w_e: Linear,
}

impl VisualRelationParams {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, dim: usize) -> Self {
        let g = ParamGroup::Reasoning;
        let half = dim / 2;
        Self {
            w_l: Linear::new(store, rng, "visual_relation.spatial", 5, half, false, g),
            w_e: Linear::new(store, rng, "visual_relation.appearance", 2 * dim, dim - half, false, g),
        }
    }
}

/// Relation features `[W_l^T s_kl, W_e^T [o_k, o_l]]` for the given ordered
/// proposal pairs, one row per pair.
pub fn visual_relation_feature<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    params: &VisualRelationParams,
    objects: Var<'t>,
    scene: &VisualScene,
    pairs: &[(usize, usize)],
) -> Result<Var<'t>> {
    let mut s = Vec::with_capacity(pairs.len() * 5);
    for &(k, l) in pairs {
        s.extend(relative_spatial(&scene.proposals[k].bbox, &scene.proposals[l].bbox)?);
    }
    let spatial = params.w_l.forward(tape, store, tape.constant(Tensor::from_vec(pairs.len(), 5, s)));
    let ok = objects.gather_rows(pairs.iter().map(|p| p.0).collect());
    let ol = objects.gather_rows(pairs.iter().map(|p| p.1).collect());
    let app = params.w_e.forward(tape, store, tape.concat_cols(&[ok, ol]));
    Ok(tape.concat_cols(&[spatial, app]))
}

/// Features of every entity, linguistic relation and proposal of one sample.
pub struct CandidateFeatures<'t> {
    /// `N_e x d` appearance embeddings.
    pub e: Var<'t>,
    /// `N_e x 5` location embeddings.
    pub le: Var<'t>,
    /// `N_e x H` phrase states.
    pub he: Var<'t>,
    /// `N_r x d` SPO embeddings, absent when there are no relations.
    pub re: Option<Var<'t>>,
    /// `N_o x d` object embeddings.
    pub o: Var<'t>,
    /// `N_o x 5` location vectors.
    pub lo: Var<'t>,
    /// Attention weights per entity (app, pos) and per relation (spo).
    pub attention: Vec<Vec<f64>>,
}

impl CandidateFeatures<'_> {
    pub fn num_entities(&self) -> usize {
        self.e.shape().0
    }

    pub fn num_objects(&self) -> usize {
        self.o.shape().0
    }
}

/// Token sequence of every entity phrase, then every SPO phrase (subject
/// words, predicate words, object words), as indices into the layout.
pub fn phrase_sequences(graph: &LanguageSceneGraph) -> Result<Vec<Vec<usize>>> {
    let layout = graph.layout();
    let span = |(a, b): (usize, usize)| (a..b).collect::<Vec<usize>>();
    let mut seqs = Vec::with_capacity(graph.num_entities() + graph.num_relations());
    for (i, e) in graph.entities.iter().enumerate() {
        if e.words.is_empty() {
            return Err(Error::EmptyPhrase);
        }
        seqs.push(span(layout.entity_spans[i]));
    }
    for (i, r) in graph.relations.iter().enumerate() {
        if r.words.is_empty() {
            return Err(Error::EmptyPhrase);
        }
        let mut s = span(layout.entity_spans[r.sub]);
        s.extend(span(layout.relation_spans[i]));
        s.extend(span(layout.entity_spans[r.obj]));
        seqs.push(s);
    }
    Ok(seqs)
}

/// Encode all phrases of `graph` and collect the proposal-side features.
/// The word rows of `encoding` follow `graph.layout()` token order.
pub fn build_candidate_features<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    encoder: &PhraseEncoder,
    graph: &LanguageSceneGraph,
    scene: &VisualScene,
    encoding: &TokenEncoding<'t>,
) -> Result<CandidateFeatures<'t>> {
    let seqs = phrase_sequences(graph)?;
    let n_e = graph.num_entities();
    let out = encoder.lstm.run(tape, store, encoding.words, &seqs);
    let heads: Vec<Var<'t>> = Head::ALL.iter().map(|&h| encoder.head_weight(tape, store, h)).collect();

    let mut app = Vec::with_capacity(n_e);
    let mut pos = Vec::with_capacity(n_e);
    let mut spo = Vec::with_capacity(seqs.len() - n_e);
    let mut attention = Vec::with_capacity(seqs.len());
    for (p, seq) in seqs.iter().enumerate() {
        let words = encoding.words.gather_rows(seq.clone());
        let hidden = tape.concat_rows(&(0..seq.len()).map(|t| out.steps[t].gather_rows(vec![p])).collect::<Vec<_>>());
        if p < n_e {
            let (a, wa) = phrase_attention(words, hidden, heads[Head::App.index()])?;
            let (l, wl) = phrase_attention(words, hidden, heads[Head::Pos.index()])?;
            app.push(a);
            pos.push(l);
            attention.push(wa.to_vec());
            attention.push(wl.to_vec());
        } else {
            let (r, wr) = phrase_attention(words, hidden, heads[Head::Spo.index()])?;
            spo.push(r);
            attention.push(wr.to_vec());
        }
    }
    let e = tape.concat_rows(&app);
    let le = encoder.location.forward(tape, store, tape.concat_rows(&pos));
    let he = out.last.gather_rows((0..n_e).collect());
    let re = (!spo.is_empty()).then(|| tape.concat_rows(&spo));
    let lo_rows: Vec<Vec<f64>> = scene.proposals.iter().map(|p| location_vector(&p.bbox).to_vec()).collect();
    let lo = tape.constant(if lo_rows.is_empty() { Tensor::zeros(0, 5) } else { Tensor::from_rows(&lo_rows) });
    Ok(CandidateFeatures { e, le, he, re, o: encoding.objects, lo, attention })
}
