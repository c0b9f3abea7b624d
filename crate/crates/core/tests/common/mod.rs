#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relground::features::Vocab;
use relground::graphs::{BBox, BoxProposal, EntityPhrase, LanguageSceneGraph, MatchLabel, RelationPhrase, Sample, VisualScene};
use relground::model::{ModelConfig, Rcrn};

pub const FEAT_DIM: usize = 6;

pub fn entity(id: usize, words: &[&str]) -> EntityPhrase {
    EntityPhrase { id, words: words.iter().map(|w| w.to_string()).collect() }
}

pub fn relation(id: usize, sub: usize, obj: usize, words: &[&str]) -> RelationPhrase {
    RelationPhrase { id, sub, obj, words: words.iter().map(|w| w.to_string()).collect() }
}

/// Chain `0 -> 1 -> ... -> n-1`.
pub fn chain(n: usize) -> LanguageSceneGraph {
    let nouns = ["cup", "book", "lamp", "pen", "box", "mug"];
    LanguageSceneGraph {
        entities: (0..n).map(|i| entity(i, &["red", nouns[i % nouns.len()]])).collect(),
        relations: (1..n).map(|i| relation(i - 1, i - 1, i, &["left", "of"])).collect(),
        root: 0,
    }
}

/// Root with children `1..n`.
pub fn star(n: usize) -> LanguageSceneGraph {
    LanguageSceneGraph {
        entities: (0..n).map(|i| entity(i, &["blue", if i == 0 { "cup" } else { "book" }])).collect(),
        relations: (1..n).map(|i| relation(i - 1, 0, i, &["near"])).collect(),
        root: 0,
    }
}

pub fn scene(n: usize, seed: u64) -> VisualScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    VisualScene::new(
        (0..n)
            .map(|id| {
                let (w, h) = (rng.random_range(0.05..0.3), rng.random_range(0.05..0.3));
                let bbox = BBox::new(rng.random_range(0.0..1.0 - w), rng.random_range(0.0..1.0 - h), w, h);
                let feat = (0..FEAT_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
                BoxProposal { id, bbox, score: 1.0, feat }
            })
            .collect(),
    )
}

pub fn sample(graph: LanguageSceneGraph, n_objects: usize, seed: u64) -> Sample {
    let scene = scene(n_objects, seed);
    let referent_box = Some(scene.proposals[0].bbox);
    Sample {
        id: format!("s{seed}"),
        scene,
        graph,
        label: MatchLabel { matched: true, referent_box, mismatched_relation: None },
        split: None,
    }
}

pub fn small_config(k: usize) -> ModelConfig {
    ModelConfig { dim: 8, hidden: 8, trf_dim: 6, sim_dim: 4, match_hidden: 4, regress_hidden: 6, k }
}

pub fn vocab() -> Vocab {
    Vocab::build(["red", "blue", "cup", "book", "lamp", "pen", "box", "mug", "left", "of", "near"])
}

pub fn model(k: usize, seed: u64) -> Rcrn {
    Rcrn::new(small_config(k), vocab(), FEAT_DIM, seed)
}
