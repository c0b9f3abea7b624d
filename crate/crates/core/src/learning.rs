//! Multitask objective, training loop, checkpoints and finite-difference
//! gradient checks.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{smooth_l1_term, ParamGrads, Tape, Tensor, Var};
use crate::beliefcore::EPS;
use crate::error::{Error, Result};
use crate::graphs::{iou, BBox, BoxProposal, EntityPhrase, LanguageSceneGraph, MatchLabel, RelationPhrase, Sample, VisualScene};
use crate::model::{ForwardOptions, ModelConfig, Rcrn, Regress};
use crate::params::{Adam, AdamConfig};
use crate::propagate::Tracer;
use crate::readout::regression_target;

/// Proposals at or above this IoU with the target train the box regressor.
pub const REGRESSION_IOU: f64 = 0.5;

/// Index of the proposal with the largest IoU against `gt` (ties go to the
/// lowest id) and that IoU.
pub fn grounding_label(scene: &VisualScene, gt: &BBox) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, p) in scene.proposals.iter().enumerate() {
        let v = iou(&p.bbox, gt);
        if v > best.1 {
            best = (i, v);
        }
    }
    (best.0, best.1.max(0.0))
}

/// Summed smooth-L1 distance.
pub fn smooth_l1(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::DimensionMismatch { expected: target.len(), actual: pred.len() });
    }
    Ok(pred.iter().zip(target).map(|(p, t)| smooth_l1_term(p - t)).sum())
}

/// Binary cross-entropy with a log floor.
pub fn bce(p: f64, y: bool) -> f64 {
    if y {
        -p.max(EPS).ln()
    } else {
        -(1.0 - p).max(EPS).ln()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub grd: f64,
    #[serde(rename = "match")]
    pub matching: f64,
    pub reg: f64,
    pub total: f64,
    pub mu: f64,
    pub omega: f64,
}

impl LossBundle {
    pub fn new(grd: f64, matching: f64, reg: f64, mu: f64, omega: f64) -> Self {
        Self { grd, matching, reg, total: grd + mu * matching + omega * reg, mu, omega }
    }

    pub fn is_finite(&self) -> bool {
        [self.grd, self.matching, self.reg, self.total].iter().all(|x| x.is_finite())
    }

    fn accumulate(&mut self, other: &LossBundle, w: f64) {
        self.grd += w * other.grd;
        self.matching += w * other.matching;
        self.reg += w * other.reg;
        self.total += w * other.total;
        self.mu = other.mu;
        self.omega = other.omega;
    }
}

/// Which terms are optimized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Grounding loss only.
    Warmup,
    Full,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mu: f64,
    pub omega: f64,
    pub k: usize,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub iterations: usize,
    /// Share of iterations spent in [`Stage::Warmup`].
    pub warmup_fraction: f64,
    /// Softmax temperature of the grounding cross-entropy.
    pub grounding_temperature: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mu: 3.0,
            omega: 1.0,
            k: 5,
            adam: AdamConfig::default(),
            batch_size: 32,
            iterations: 5000,
            warmup_fraction: 0.1,
            grounding_temperature: 1.0,
            seed: 0,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn warmup_iterations(&self) -> usize {
        ((self.iterations as f64) * self.warmup_fraction.clamp(0.0, 1.0)).round() as usize
    }

    pub fn stage(&self, iteration: usize) -> Stage {
        if iteration < self.warmup_iterations() {
            Stage::Warmup
        } else {
            Stage::Full
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.mu >= 0.0
            && self.omega >= 0.0
            && self.k >= 1
            && self.batch_size >= 1
            && self.grounding_temperature > 0.0
            && self.adam.lr_reasoning > 0.0
            && self.adam.lr_encoder > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidGraph("training configuration has a non-positive setting".into()))
        }
    }
}

/// Loss of one sample on the tape, with its value breakdown.
pub fn sample_loss<'t>(
    tape: &'t Tape,
    model: &Rcrn,
    sample: &Sample,
    config: &TrainConfig,
    stage: Stage,
) -> Result<Option<(Var<'t>, LossBundle)>> {
    let matched = sample.label.matched;
    let gt = sample.label.referent_box.filter(|_| matched);
    let label = gt.map(|b| grounding_label(&sample.scene, &b));
    let full = stage == Stage::Full;
    let regress = match (label, full) {
        (Some((i, v)), true) if v >= REGRESSION_IOU => Regress::Proposal(i),
        _ => Regress::None,
    };
    let opts = ForwardOptions { grounding: label.is_some(), matching: full, message_passing: true, regress };
    if !opts.grounding && !opts.matching {
        return Ok(None);
    }
    let fwd = model.forward(tape, sample, &opts, &mut Tracer::off())?;

    let mut terms: Vec<Var<'t>> = Vec::new();
    let mut grd = 0.0;
    if let (Some((i, _)), Some(g)) = (label, &fwd.grounding) {
        let b = g.nodes[sample.graph.root].bp;
        let ce = b.scale(1.0 / config.grounding_temperature).log_softmax_rows().gather_cols(vec![Some(i)]).scale(-1.0);
        grd = ce.scalar();
        terms.push(ce);
    }
    let mut matching = 0.0;
    if let Some(p) = fwd.p_match {
        let ll = if matched { p.ln_floor(EPS) } else { p.scale(-1.0).offset(1.0).ln_floor(EPS) };
        let l = ll.scale(-config.mu);
        matching = bce(p.scalar(), matched);
        terms.push(l);
    }
    let mut reg = 0.0;
    if let (Some((i, delta)), Some(gt)) = (fwd.delta, gt) {
        let target = regression_target(&sample.scene.proposals[i].bbox, &gt);
        let l = delta.smooth_l1(Tensor::row(target.to_vec()));
        reg = l.scalar();
        terms.push(l.scale(config.omega));
    }
    let total = terms.iter().skip(1).fold(terms[0], |a, &t| a.add(t));
    let bundle = LossBundle::new(grd, matching, reg, config.mu, config.omega);
    Ok(Some((total, bundle)))
}

/// Gradients and losses of one sample.
pub fn sample_gradients(model: &Rcrn, sample: &Sample, config: &TrainConfig, stage: Stage) -> Result<(ParamGrads, LossBundle)> {
    let tape = Tape::new();
    let mut grads = ParamGrads::zeros_like(&model.store);
    let Some((loss, bundle)) = sample_loss(&tape, model, sample, config, stage)? else {
        return Ok((grads, LossBundle::new(0.0, 0.0, 0.0, config.mu, config.omega)));
    };
    tape.backward(loss).accumulate_into(&mut grads, 1.0);
    Ok((grads, bundle))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: usize,
    pub stage: Stage,
    #[serde(flatten)]
    pub loss: LossBundle,
    pub grad_norm: f64,
    pub lr_reasoning: f64,
    pub lr_encoder: f64,
}

/// Per-iteration batch losses.
#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub history: Vec<LogEntry>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.history.last().map(|e| e.loss.total)
    }
}

/// Trailing moving average with the given window, one value per full window.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    let mut sum: f64 = values[..window].iter().sum();
    let mut out = vec![sum / window as f64];
    for i in window..values.len() {
        sum += values[i] - values[i - window];
        out.push(sum / window as f64);
    }
    out
}

/// Optimize `model` on `data`. `on_iteration` sees every iteration's entry;
/// the report keeps all of them.
pub fn train(
    model: &mut Rcrn,
    data: &[Sample],
    config: &TrainConfig,
    mut on_iteration: impl FnMut(&LogEntry),
) -> Result<TrainReport> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    model.config.k = config.k;
    model.reasoning.k = config.k;
    let mut adam = Adam::new(&model.store, config.adam.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut report = TrainReport::default();
    for it in 0..config.iterations {
        let stage = config.stage(it);
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size.min(data.len()) {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let frozen: &Rcrn = model;
        let results: Vec<Result<(ParamGrads, LossBundle)>> =
            batch.par_iter().map(|&i| sample_gradients(frozen, &data[i], config, stage)).collect();
        let w = 1.0 / batch.len() as f64;
        let mut grads = ParamGrads::zeros_like(&model.store);
        let mut loss = LossBundle::default();
        for r in results {
            let (g, l) = r?;
            for (a, b) in grads.grads.iter_mut().zip(&g.grads) {
                for (x, y) in a.data.iter_mut().zip(&b.data) {
                    *x += w * y;
                }
            }
            loss.accumulate(&l, w);
        }
        let grad_norm = adam.step(&mut model.store, &grads);
        let entry = LogEntry {
            iteration: it,
            stage,
            loss,
            grad_norm,
            lr_reasoning: config.adam.lr_reasoning,
            lr_encoder: config.adam.lr_encoder,
        };
        on_iteration(&entry);
        report.history.push(entry);
    }
    if !model.store.all_finite() {
        return Err(Error::Checkpoint("training produced non-finite parameters".into()));
    }
    Ok(report)
}

/// Append-only JSON-lines writer for [`LogEntry`] records.
pub struct JsonlLog<W: Write> {
    out: W,
}

impl<W: Write> JsonlLog<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn write(&mut self, entry: &LogEntry) -> Result<()> {
        serde_json::to_writer(&mut self.out, entry)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }
}

pub fn read_log(reader: impl BufRead) -> Result<Vec<LogEntry>> {
    reader
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}

pub const CHECKPOINT_FORMAT: &str = "relground-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    pub model: Rcrn,
}

impl Checkpoint {
    pub fn new(model: &Rcrn, train: Option<&TrainConfig>) -> Self {
        Self { format: CHECKPOINT_FORMAT.into(), version: CHECKPOINT_VERSION, train: train.cloned(), model: model.clone() }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let ck: Checkpoint = serde_json::from_reader(f)?;
        ck.check()?;
        Ok(ck)
    }

    fn check(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint {} v{}", self.format, self.version)));
        }
        let fresh = Rcrn::new(self.model.config, self.model.encoder.vocab.clone(), self.model.encoder.feat_dim, 0);
        if fresh.store.len() != self.model.store.len() {
            return Err(Error::Checkpoint("parameter manifest does not match the configuration".into()));
        }
        for ((_, a), (_, b)) in fresh.store.iter().zip(self.model.store.iter()) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Checkpoint(format!("parameter {} does not match the configuration", b.name)));
            }
        }
        if !self.model.store.all_finite() {
            return Err(Error::Checkpoint("non-finite parameter values".into()));
        }
        Ok(())
    }
}

/// Scalar differentiated by [`gradcheck`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradTarget {
    /// The match probability.
    Match,
    /// The grounding cross-entropy against the sample's label.
    Grounding,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub target: GradTarget,
    pub step: f64,
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Floor of [`relative_error`] used by [`gradcheck`].
pub const GRADCHECK_FLOOR: f64 = 1e-4;

fn target_value<'t>(tape: &'t Tape, model: &Rcrn, sample: &Sample, target: GradTarget) -> Result<Var<'t>> {
    let opts = ForwardOptions {
        grounding: target == GradTarget::Grounding,
        matching: target == GradTarget::Match,
        message_passing: true,
        regress: Regress::None,
    };
    let fwd = model.forward(tape, sample, &opts, &mut Tracer::off())?;
    Ok(match target {
        GradTarget::Match => fwd.p_match.expect("matching pass"),
        GradTarget::Grounding => {
            let gt = sample.label.referent_box.unwrap_or(sample.scene.proposals[0].bbox);
            let (i, _) = grounding_label(&sample.scene, &gt);
            let b = fwd.grounding.as_ref().expect("grounding pass").nodes[sample.graph.root].bp;
            b.log_softmax_rows().gather_cols(vec![Some(i)]).scale(-1.0)
        }
    })
}

/// Compare analytic gradients of `target` against central differences for
/// every parameter entry. Stop-gradient nodes replay their unperturbed
/// values on both sides so the gate inputs stay constant.
pub fn gradcheck(model: &Rcrn, sample: &Sample, target: GradTarget, step: f64) -> Result<GradcheckReport> {
    let tape = Tape::new();
    let out = target_value(&tape, model, sample, target)?;
    let mut analytic = ParamGrads::zeros_like(&model.store);
    tape.backward(out).accumulate_into(&mut analytic, 1.0);
    let frozen = tape.stopped_values();

    let eval = |m: &Rcrn| -> Result<f64> {
        let t = Tape::with_frozen(frozen.clone());
        Ok(target_value(&t, m, sample, target)?.scalar())
    };
    let mut probe = model.clone();
    let mut params = Vec::new();
    for (id, p) in model.store.iter() {
        let mut worst: f64 = 0.0;
        for j in 0..p.value.data.len() {
            let x = p.value.data[j];
            probe.store.value_mut(id).data[j] = x + step;
            let up = eval(&probe)?;
            probe.store.value_mut(id).data[j] = x - step;
            let down = eval(&probe)?;
            probe.store.value_mut(id).data[j] = x;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(analytic.get(id).data[j], numeric, GRADCHECK_FLOOR));
        }
        params.push(ParamCheck { name: p.name.clone(), entries: p.value.data.len(), max_rel_err: worst });
    }
    let max_rel_err = params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport { target, step, params, max_rel_err })
}

/// Small model settings suited to exhaustive gradient checks.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig { dim: 6, hidden: 6, trf_dim: 5, sim_dim: 4, match_hidden: 4, regress_hidden: 4, k: 3 }
}

/// A seeded three-entity chain over four random proposals, with a model of
/// [`gradcheck_config`] size.
pub fn gradcheck_fixture(seed: u64) -> (Rcrn, Sample) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let feat_dim = 6;
    let proposals = (0..4)
        .map(|id| {
            let (w, h) = (rng.random_range(0.05..0.3), rng.random_range(0.05..0.3));
            let bbox = BBox::new(rng.random_range(0.0..1.0 - w), rng.random_range(0.0..1.0 - h), w, h);
            BoxProposal { id, bbox, score: 1.0, feat: (0..feat_dim).map(|_| rng.random_range(-1.0..1.0)).collect() }
        })
        .collect();
    let scene = VisualScene::new(proposals);
    let words = |w: &[&str]| w.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let graph = LanguageSceneGraph {
        entities: vec![
            EntityPhrase { id: 0, words: words(&["red", "cube"]) },
            EntityPhrase { id: 1, words: words(&["sphere"]) },
            EntityPhrase { id: 2, words: words(&["small", "cone"]) },
        ],
        relations: vec![
            RelationPhrase { id: 0, sub: 0, obj: 1, words: words(&["left", "of"]) },
            RelationPhrase { id: 1, sub: 1, obj: 2, words: words(&["above"]) },
        ],
        root: 0,
    };
    let label = MatchLabel { matched: true, referent_box: Some(scene.proposals[0].bbox), mismatched_relation: None };
    let sample = Sample { id: format!("gradcheck-{seed}"), scene, graph, label, split: None };
    let model = Rcrn::new(gradcheck_config(), crate::synthgen::vocabulary(), feat_dim, seed.wrapping_add(1));
    (model, sample)
}
