//! Metrics, oracle-mode evaluation and intermediate diagnosis.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::beliefcore::topk_positions;
use crate::error::{Error, Result};
use crate::graphs::{iou, match_subgraph, CorrespondenceLabel, MatchLabel, Sample, Split, SubgraphMatch};
use crate::model::{ForwardOptions, Rcrn, Regress};
use crate::propagate::{alignment, Tracer};
use crate::readout::{predict_with, Mode, Prediction};
use crate::synthgen::{Predicates, SynthSample};

pub const REPORT_VERSION: u32 = 1;

/// IoU needed for a grounding to count as correct.
pub const GROUNDING_IOU: f64 = 0.5;

pub const RECALL_KS: [usize; 3] = [1, 3, 5];

/// A count-based accuracy; `value()` is `None` when nothing was counted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Ratio {
    pub correct: usize,
    pub total: usize,
}

impl Ratio {
    pub fn add(&mut self, correct: bool) {
        self.total += 1;
        self.correct += correct as usize;
    }

    pub fn value(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }

    pub fn merge(&mut self, other: &Ratio) {
        self.correct += other.correct;
        self.total += other.total;
    }

    fn cell(&self) -> String {
        match self.value() {
            Some(v) => format!("{:.2} ({}/{})", 100.0 * v, self.correct, self.total),
            None => "-".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub samples: usize,
    pub match_accuracy: Ratio,
    /// Accuracy on matched samples only.
    pub match_accuracy_matched: Ratio,
    /// Accuracy on mismatched samples only.
    pub match_accuracy_mismatched: Ratio,
    pub grounding_joint: Ratio,
    pub grounding_oracle: Ratio,
    pub mrr_joint: Ratio,
    pub mrr_oracle: Ratio,
}

impl SplitMetrics {
    /// Score one oracle-mode prediction against its label.
    pub fn add(&mut self, label: &MatchLabel, p: &Prediction) {
        self.samples += 1;
        let match_ok = p.matched == label.matched;
        self.match_accuracy.add(match_ok);
        if label.matched {
            self.match_accuracy_matched.add(match_ok);
            let grounded = match (p.bbox, label.referent_box) {
                (Some(b), Some(gt)) => iou(&b, &gt) >= GROUNDING_IOU,
                _ => false,
            };
            self.grounding_oracle.add(grounded);
            self.grounding_joint.add(grounded && p.matched);
        } else {
            self.match_accuracy_mismatched.add(match_ok);
            let located = p.mismatched_relation_id.is_some() && p.mismatched_relation_id == label.mismatched_relation;
            self.mrr_oracle.add(located);
            self.mrr_joint.add(located && !p.matched);
        }
    }

    pub fn merge(&mut self, o: &SplitMetrics) {
        self.samples += o.samples;
        for (a, b) in [
            (&mut self.match_accuracy, &o.match_accuracy),
            (&mut self.match_accuracy_matched, &o.match_accuracy_matched),
            (&mut self.match_accuracy_mismatched, &o.match_accuracy_mismatched),
            (&mut self.grounding_joint, &o.grounding_joint),
            (&mut self.grounding_oracle, &o.grounding_oracle),
            (&mut self.mrr_joint, &o.mrr_joint),
            (&mut self.mrr_oracle, &o.mrr_oracle),
        ] {
            a.merge(b);
        }
    }
}

/// A cached oracle-mode prediction with what is needed to score it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrediction {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    pub label: MatchLabel,
    pub prediction: Prediction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub version: u32,
    pub message_passing: bool,
    /// Keyed by `full`, `in_dist` and `ood`; `full` covers every sample.
    pub splits: BTreeMap<String, SplitMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnosis: Option<Diagnosis>,
}

/// Build the report from cached predictions. Joint-mode numbers are derived
/// from the oracle predictions, so the report depends only on its inputs.
pub fn score(predictions: &[ScoredPrediction], message_passing: bool) -> Result<MetricsReport> {
    if predictions.is_empty() {
        return Err(Error::InsufficientSamples("nothing to evaluate".into()));
    }
    let mut splits: BTreeMap<String, SplitMetrics> = BTreeMap::new();
    splits.insert("full".into(), SplitMetrics::default());
    for p in predictions {
        if p.prediction.mode != Mode::Oracle {
            return Err(Error::InvalidGraph(format!("prediction for {} is not oracle-mode", p.id)));
        }
        splits.get_mut("full").expect("present").add(&p.label, &p.prediction);
        if let Some(s) = p.split.filter(|s| *s != Split::Train) {
            splits.entry(s.name().into()).or_default().add(&p.label, &p.prediction);
        }
    }
    Ok(MetricsReport { version: REPORT_VERSION, message_passing, splits, diagnosis: None })
}

/// Oracle-mode predictions for every sample, in input order.
pub fn predict_all(model: &Rcrn, samples: &[Sample], message_passing: bool) -> Result<Vec<ScoredPrediction>> {
    samples
        .par_iter()
        .map(|s| {
            Ok(ScoredPrediction {
                id: s.id.clone(),
                split: s.split,
                label: s.label.clone(),
                prediction: predict_with(model, s, Mode::Oracle, message_passing, None)?,
            })
        })
        .collect()
}

pub fn evaluate(model: &Rcrn, samples: &[Sample], message_passing: bool) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::InsufficientSamples("nothing to evaluate".into()));
    }
    score(&predict_all(model, samples, message_passing)?, message_passing)
}

/// Recall counters at each of [`RECALL_KS`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    pub at_1: Ratio,
    pub at_3: Ratio,
    pub at_5: Ratio,
}

impl Recall {
    /// Count whether `gt` is among the top-k of `belief` (ties to the lower id).
    pub fn add(&mut self, belief: &[f64], gt: usize) {
        let top = topk_positions(belief, RECALL_KS[2]);
        for (k, r) in RECALL_KS.iter().zip([&mut self.at_1, &mut self.at_3, &mut self.at_5]) {
            r.add(top.iter().take(*k).any(|&i| i == gt));
        }
    }

    pub fn merge(&mut self, o: &Recall) {
        self.at_1.merge(&o.at_1);
        self.at_3.merge(&o.at_3);
        self.at_5.merge(&o.at_5);
    }

    fn ratios(&self) -> [&Ratio; 3] {
        [&self.at_1, &self.at_3, &self.at_5]
    }
}

/// Running mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Mean {
    pub sum: f64,
    pub count: usize,
}

impl Mean {
    pub fn add(&mut self, v: f64) {
        self.sum += v;
        self.count += 1;
    }

    pub fn value(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }

    pub fn merge(&mut self, o: &Mean) {
        self.sum += o.sum;
        self.count += o.count;
    }
}

/// Relation correspondence scores: at the annotated pair, averaged over all
/// ordered proposal pairs, and the per-edge maximum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RelationScores {
    pub gt: Mean,
    pub mean: Mean,
    pub max: Mean,
}

impl RelationScores {
    /// Add one edge given its `N_o x N_o` alignment (diagonal ignored).
    pub fn add(&mut self, alignment: &[Vec<f64>], gt: (usize, usize)) {
        let mut all = Mean::default();
        let mut max = f64::NEG_INFINITY;
        for (k, row) in alignment.iter().enumerate() {
            for (l, &v) in row.iter().enumerate() {
                if k != l {
                    all.add(v);
                    max = max.max(v);
                }
            }
        }
        if let Some(m) = all.value() {
            self.gt.add(alignment[gt.0][gt.1]);
            self.mean.add(m);
            self.max.add(max);
        }
    }

    pub fn merge(&mut self, o: &RelationScores) {
        self.gt.merge(&o.gt);
        self.mean.merge(&o.mean);
        self.max.merge(&o.max);
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnosis {
    /// Entity recall from the local beliefs.
    pub entity_recall_local: Recall,
    /// Entity recall after propagation.
    pub entity_recall_propagated: Recall,
    pub referent_recall: Recall,
    pub relation_scores: RelationScores,
    pub evaluated: usize,
    /// Samples without a unique annotated correspondence.
    pub skipped: usize,
}

impl Diagnosis {
    /// Count one sample's beliefs. `local` and `propagated` are full
    /// `N_o`-length beliefs per entity.
    pub fn add_beliefs(&mut self, label: &CorrespondenceLabel, root: usize, local: &[Vec<f64>], propagated: &[Vec<f64>]) {
        self.evaluated += 1;
        for (i, &gt) in label.entities.iter().enumerate() {
            self.entity_recall_local.add(&local[i], gt);
            self.entity_recall_propagated.add(&propagated[i], gt);
        }
        self.referent_recall.add(&propagated[root], label.entities[root]);
    }

    pub fn merge(&mut self, o: &Diagnosis) {
        self.entity_recall_local.merge(&o.entity_recall_local);
        self.entity_recall_propagated.merge(&o.entity_recall_propagated);
        self.referent_recall.merge(&o.referent_recall);
        self.relation_scores.merge(&o.relation_scores);
        self.evaluated += o.evaluated;
        self.skipped += o.skipped;
    }
}

/// Annotated correspondence of a generated matched sample, recovered by
/// subgraph matching against every true relation of its scene. Ids are
/// proposal ids.
pub fn synthetic_correspondence(s: &SynthSample, predicates: Predicates) -> Result<SubgraphMatch> {
    let Some(referent) = s.sample.label.referent_box else {
        return Ok(SubgraphMatch::NotFound);
    };
    let gt = s.provenance.world(predicates).annotated_graph(&s.provenance.object_proposals);
    match_subgraph(&s.sample.graph, &gt, &referent)
}

fn diagnose_one(model: &Rcrn, sample: &Sample, label: &CorrespondenceLabel) -> Result<Diagnosis> {
    let tape = Tape::new();
    let opts = ForwardOptions { matching: false, regress: Regress::None, ..ForwardOptions::inference() };
    let mut tracer = Tracer::off();
    let fwd = model.forward(&tape, sample, &opts, &mut tracer)?;
    let local: Vec<Vec<f64>> = fwd.local.local.iter().map(|v| v.to_vec()).collect();
    let grounding = fwd.grounding.as_ref().expect("grounding pass requested");
    let propagated: Vec<Vec<f64>> = grounding.nodes.iter().map(|n| n.bp.to_vec()).collect();
    let mut d = Diagnosis::default();
    d.add_beliefs(label, sample.graph.root, &local, &propagated);
    let n = sample.scene.len();
    if n > 1 {
        let all: Vec<usize> = (0..n).collect();
        for r in &sample.graph.relations {
            let a = alignment(&tape, &model.store, &model.reasoning, &fwd.feats, &sample.scene, r.id, &all, &all, &mut tracer)?
                .value();
            let rows: Vec<Vec<f64>> = a.data.chunks(a.cols).map(<[f64]>::to_vec).collect();
            d.relation_scores.add(&rows, label.relations[r.id]);
        }
    }
    Ok(d)
}

/// Diagnosis over samples paired with their correspondence search result.
pub fn diagnose(model: &Rcrn, items: &[(Sample, SubgraphMatch)]) -> Result<Diagnosis> {
    let parts: Vec<Diagnosis> = items
        .par_iter()
        .map(|(s, m)| match m {
            SubgraphMatch::Unique(label) => diagnose_one(model, s, label),
            _ => Ok(Diagnosis { skipped: 1, ..Diagnosis::default() }),
        })
        .collect::<Result<_>>()?;
    let mut out = Diagnosis::default();
    for p in &parts {
        out.merge(p);
    }
    Ok(out)
}

/// Diagnose the matched samples of a generated corpus.
pub fn diagnose_synthetic(model: &Rcrn, samples: &[SynthSample], predicates: Predicates) -> Result<Diagnosis> {
    let items = samples
        .iter()
        .filter(|s| s.sample.label.matched)
        .map(|s| Ok((s.sample.clone(), synthetic_correspondence(s, predicates)?)))
        .collect::<Result<Vec<_>>>()?;
    if items.is_empty() {
        return Err(Error::InsufficientSamples("no matched samples to diagnose".into()));
    }
    diagnose(model, &items)
}

fn table(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols).map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for r in rows {
        let line: Vec<String> = r.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    out
}

fn mean_cell(m: &Mean) -> String {
    m.value().map_or("-".into(), |v| format!("{v:.4}"))
}

impl Diagnosis {
    pub fn to_text(&self) -> String {
        let mut rows = vec![vec!["recall".to_string(), "@1".into(), "@3".into(), "@5".into()]];
        for (name, r) in [
            ("entity w/o MP", &self.entity_recall_local),
            ("entity", &self.entity_recall_propagated),
            ("referent", &self.referent_recall),
        ] {
            rows.push(std::iter::once(name.to_string()).chain(r.ratios().iter().map(|x| x.cell())).collect());
        }
        let mut out = table(&rows);
        let rs = &self.relation_scores;
        out.push('\n');
        out.push_str(&table(&[
            vec!["relation score".into(), "gt".into(), "mean".into(), "max".into()],
            vec![String::new(), mean_cell(&rs.gt), mean_cell(&rs.mean), mean_cell(&rs.max)],
        ]));
        let _ = writeln!(out, "\nevaluated {}  skipped {}", self.evaluated, self.skipped);
        out
    }
}

impl MetricsReport {
    /// Aligned text table, one row per split.
    pub fn to_text(&self) -> String {
        let mut rows = vec![["split", "n", "match", "match(+)", "match(-)", "grd joint", "grd oracle", "mrr joint", "mrr oracle"]
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()];
        for name in ["full", "in_dist", "ood"] {
            if let Some(m) = self.splits.get(name) {
                rows.push(vec![
                    name.to_string(),
                    m.samples.to_string(),
                    m.match_accuracy.cell(),
                    m.match_accuracy_matched.cell(),
                    m.match_accuracy_mismatched.cell(),
                    m.grounding_joint.cell(),
                    m.grounding_oracle.cell(),
                    m.mrr_joint.cell(),
                    m.mrr_oracle.cell(),
                ]);
            }
        }
        let mut out = format!("metrics v{} (message passing {})\n", self.version, if self.message_passing { "on" } else { "off" });
        out.push_str(&table(&rows));
        if let Some(d) = &self.diagnosis {
            out.push('\n');
            out.push_str(&d.to_text());
        }
        out
    }

    /// One CSV row per split and metric.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("split,metric,correct,total,value\n");
        for (name, m) in &self.splits {
            for (metric, r) in [
                ("match_accuracy", &m.match_accuracy),
                ("match_accuracy_matched", &m.match_accuracy_matched),
                ("match_accuracy_mismatched", &m.match_accuracy_mismatched),
                ("grounding_joint", &m.grounding_joint),
                ("grounding_oracle", &m.grounding_oracle),
                ("mrr_joint", &m.mrr_joint),
                ("mrr_oracle", &m.mrr_oracle),
            ] {
                let v = r.value().map_or(String::new(), |v| v.to_string());
                let _ = writeln!(out, "{name},{metric},{},{},{v}", r.correct, r.total);
            }
        }
        out
    }
}
