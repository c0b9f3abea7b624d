mod common;

use std::time::Instant;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relground::autodiff::Tape;
use relground::features::Vocab;
use relground::graphs::{BBox, BoxProposal, LanguageSceneGraph, MatchLabel, Sample, VisualScene};
use relground::learning::{
    gradcheck, gradcheck_config, moving_average, read_log, sample_loss, train, Checkpoint, GradTarget, JsonlLog, Stage,
    TrainConfig,
};
use relground::model::Rcrn;
use relground::Error;

fn gradcheck_model(seed: u64) -> Rcrn {
    Rcrn::new(gradcheck_config(), vocab(), FEAT_DIM, seed)
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let start = Instant::now();
    let s = sample(chain(3), 4, 31);
    let m = gradcheck_model(7);
    for target in [GradTarget::Match, GradTarget::Grounding] {
        let r = gradcheck(&m, &s, target, 1e-6).unwrap();
        let worst = r.params.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err)).unwrap();
        assert!(r.max_rel_err < 1e-4, "{target:?}: {} at {}", r.max_rel_err, worst.name);
    }
    assert!(start.elapsed().as_secs() < 60);
}

const COLORS: [&str; 3] = ["red", "green", "blue"];

/// Three proposals with one-hot features; the phrase names the referent's
/// color.
fn separable(n: usize, seed: u64) -> (Vec<Sample>, Vocab) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let boxes = [BBox::new(0.05, 0.1, 0.2, 0.3), BBox::new(0.4, 0.1, 0.2, 0.3), BBox::new(0.7, 0.5, 0.2, 0.3)];
    let samples = (0..n)
        .map(|i| {
            let mut colors = [0, 1, 2];
            for j in (1..3).rev() {
                colors.swap(j, rng.random_range(0..=j));
            }
            let proposals = (0..3)
                .map(|p| {
                    let mut feat = vec![0.0; FEAT_DIM];
                    feat[colors[p]] = 1.0;
                    BoxProposal { id: p, bbox: boxes[p], score: 1.0, feat }
                })
                .collect();
            let target = rng.random_range(0..3);
            let graph = LanguageSceneGraph { entities: vec![entity(0, &[COLORS[colors[target]], "cup"])], relations: vec![], root: 0 };
            Sample {
                id: format!("sep{i}"),
                scene: VisualScene::new(proposals),
                graph,
                label: MatchLabel { matched: true, referent_box: Some(boxes[target]), mismatched_relation: None },
                split: None,
            }
        })
        .collect();
    (samples, Vocab::build(COLORS.iter().copied().chain(["cup"])))
}

fn separability_holds(data: &[Sample]) -> bool {
    // exactly one proposal carries the named color
    data.iter().all(|s| {
        let c = COLORS.iter().position(|w| *w == s.graph.entities[0].words[0]).unwrap();
        s.scene.proposals.iter().filter(|p| p.feat[c] == 1.0).count() == 1
    })
}

#[test]
fn separable_grounding_is_learned() {
    let (data, vocab) = separable(64, 1);
    assert!(separability_holds(&data));
    let mut m = Rcrn::new(small_config(3), vocab, FEAT_DIM, 2);
    let mut cfg = TrainConfig { iterations: 500, warmup_fraction: 1.0, batch_size: 16, k: 3, grounding_temperature: 0.1, ..Default::default() };
    cfg.adam.lr_reasoning = 5e-3;
    cfg.adam.lr_encoder = 5e-3;
    let report = train(&mut m, &data, &cfg, |_| {}).unwrap();
    let grd: Vec<f64> = report.history.iter().map(|e| e.loss.grd).collect();
    let tail = grd[grd.len() - 20..].iter().sum::<f64>() / 20.0;
    assert!(tail < 0.1, "final grounding loss {tail}");
    let ma = moving_average(&grd, 200);
    assert!(ma.windows(2).all(|w| w[1] <= w[0] + 1e-12), "moving average increased");
}

fn mixed_data() -> Vec<Sample> {
    let mut out = Vec::new();
    for i in 0..6u64 {
        let mut s = sample(if i % 2 == 0 { chain(2) } else { star(3) }, 5, 100 + i);
        if i % 3 == 2 {
            s.label = MatchLabel { matched: false, referent_box: None, mismatched_relation: Some(0) };
        }
        out.push(s);
    }
    out
}

#[test]
fn training_is_deterministic() {
    let data = mixed_data();
    let cfg = TrainConfig { iterations: 6, batch_size: 4, k: 3, seed: 5, ..Default::default() };
    let run = || {
        let mut m = model(3, 9);
        let r = train(&mut m, &data, &cfg, |_| {}).unwrap();
        (r.final_loss().unwrap(), serde_json::to_string(&m.store).unwrap())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert_eq!(a.1, b.1);
}

#[test]
fn warmup_leaves_the_matching_head_untouched() {
    let data = mixed_data();
    let mut m = model(3, 9);
    let before = m.store.clone();
    let cfg = TrainConfig { iterations: 4, warmup_fraction: 1.0, batch_size: 4, k: 3, ..Default::default() };
    let report = train(&mut m, &data, &cfg, |_| {}).unwrap();
    assert!(report.history.iter().all(|e| e.stage == Stage::Warmup && e.loss.matching == 0.0));
    for ((_, a), (_, b)) in before.iter().zip(m.store.iter()) {
        let frozen = a.name.starts_with("classify") || a.name.starts_with("gate.rel.matching") || a.name.starts_with("regress");
        if frozen {
            assert_eq!(a.value, b.value, "{} moved", a.name);
        }
    }
    assert_ne!(before.value(before.find("gate.sum.weight").unwrap()), m.store.value(m.store.find("gate.sum.weight").unwrap()));
}

#[test]
fn regression_loss_is_gated_by_iou() {
    let m = model(3, 4);
    let cfg = TrainConfig { k: 3, ..Default::default() };
    let mut s = sample(chain(2), 5, 9);
    // the labeled proposal covers less than half of the target
    let b = s.scene.proposals[0].bbox;
    s.label.referent_box = Some(BBox::new(b.x, b.y, b.w * 0.45, b.h));
    let tape = Tape::new();
    let (_, l) = sample_loss(&tape, &m, &s, &cfg, Stage::Full).unwrap().unwrap();
    assert_eq!(l.reg, 0.0);
    // a close box contributes, and the mismatched twin has only the match term
    s.label.referent_box = Some(BBox::new(b.x + 0.01, b.y, b.w, b.h));
    let tape = Tape::new();
    let (_, l) = sample_loss(&tape, &m, &s, &cfg, Stage::Full).unwrap().unwrap();
    assert!(l.reg > 0.0 && l.grd > 0.0);
    s.label = MatchLabel { matched: false, referent_box: None, mismatched_relation: Some(0) };
    let tape = Tape::new();
    let (_, l) = sample_loss(&tape, &m, &s, &cfg, Stage::Full).unwrap().unwrap();
    assert_eq!((l.grd, l.reg), (0.0, 0.0));
    assert!(l.matching > 0.0 && l.is_finite());
    assert!((l.total - 3.0 * l.matching).abs() < 1e-12);
}

#[test]
fn empty_dataset_is_rejected() {
    let mut m = model(3, 1);
    assert!(matches!(train(&mut m, &[], &TrainConfig::default(), |_| {}), Err(Error::EmptyDataset)));
}

#[test]
fn checkpoint_and_log_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = mixed_data();
    let mut m = model(3, 2);
    let cfg = TrainConfig { iterations: 3, batch_size: 2, k: 3, ..Default::default() };
    let mut buf = Vec::new();
    {
        let mut log = JsonlLog::new(&mut buf);
        train(&mut m, &data, &cfg, |e| log.write(e).unwrap()).unwrap();
    }
    let entries = read_log(&buf[..]).unwrap();
    assert_eq!(entries.len(), 3);
    assert!(entries.iter().all(|e| e.loss.is_finite()));

    let path = dir.path().join("model.json");
    Checkpoint::new(&m, Some(&cfg)).save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(serde_json::to_string(&back.model.store).unwrap(), serde_json::to_string(&m.store).unwrap());

    let mut bad = Checkpoint::new(&m, None);
    bad.version = 99;
    bad.save(&path).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
}
