//! Synthetic benchmark: abstract scenes of attributed objects, tree-shaped
//! referring expressions with unique referents, mismatched twins made by
//! relation substitution, and length-based splits.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Vocab;
use crate::graphs::{
    iou, AnnotatedEdge, AnnotatedNode, AnnotatedSceneGraph, BBox, BoxProposal, EntityPhrase, LanguageSceneGraph,
    MatchLabel, RelationPhrase, Sample, Split, VisualScene,
};

pub const COLORS: [&str; 6] = ["red", "green", "blue", "yellow", "purple", "gray"];
pub const SHAPES: [&str; 4] = ["cube", "sphere", "cylinder", "cone"];
pub const SIZES: [&str; 3] = ["small", "medium", "large"];

/// Largest expression the exhaustive oracle accepts.
pub const ORACLE_MAX_ENTITIES: usize = 8;

pub const CORPUS_VERSION: u32 = 1;

/// Every word the generator can emit.
pub fn vocabulary() -> Vocab {
    let rel_words = Rel::ALL.iter().flat_map(|r| r.words().iter().copied());
    Vocab::build(SIZES.iter().chain(&COLORS).chain(&SHAPES).copied().chain(rel_words))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rel {
    LeftOf,
    RightOf,
    Above,
    Below,
    Inside,
    Near,
    Larger,
    Smaller,
}

impl Rel {
    pub const ALL: [Rel; 8] = [Rel::LeftOf, Rel::RightOf, Rel::Above, Rel::Below, Rel::Inside, Rel::Near, Rel::Larger, Rel::Smaller];

    pub fn words(self) -> &'static [&'static str] {
        match self {
            Rel::LeftOf => &["left", "of"],
            Rel::RightOf => &["right", "of"],
            Rel::Above => &["above"],
            Rel::Below => &["below"],
            Rel::Inside => &["inside"],
            Rel::Near => &["near"],
            Rel::Larger => &["larger", "than"],
            Rel::Smaller => &["smaller", "than"],
        }
    }

    pub fn phrase(self) -> String {
        self.words().join(" ")
    }

    pub fn from_words<S: AsRef<str>>(words: &[S]) -> Option<Rel> {
        Rel::ALL.into_iter().find(|r| r.words().len() == words.len() && r.words().iter().zip(words).all(|(a, b)| *a == b.as_ref()))
    }

    /// Replacement candidates. Every relation is the target of exactly two
    /// substitutions, which keeps substitution flows roughly balanced. "near"
    /// is not a candidate for "inside" since containment implies nearness.
    pub fn substitutes(self) -> [Rel; 2] {
        match self {
            Rel::LeftOf => [Rel::RightOf, Rel::Near],
            Rel::RightOf => [Rel::LeftOf, Rel::Below],
            Rel::Above => [Rel::Below, Rel::RightOf],
            Rel::Below => [Rel::Above, Rel::LeftOf],
            Rel::Inside => [Rel::Larger, Rel::Above],
            Rel::Near => [Rel::Inside, Rel::Smaller],
            Rel::Larger => [Rel::Smaller, Rel::Inside],
            Rel::Smaller => [Rel::Larger, Rel::Near],
        }
    }
}

/// Crisp truth conditions of the relations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Predicates {
    /// Minimum center offset for the directional relations.
    pub margin: f64,
    /// Center distance below which objects are near.
    pub near: f64,
    /// Share of the subject covered by the object for "inside".
    pub inside_ioa: f64,
}

impl Default for Predicates {
    fn default() -> Self {
        Self { margin: 0.05, near: 0.2, inside_ioa: 0.9 }
    }
}

impl Predicates {
    /// Whether `a rel b` holds.
    pub fn holds(&self, rel: Rel, a: &WorldObject, b: &WorldObject) -> bool {
        let ((ax, ay), (bx, by)) = (a.bbox.center(), b.bbox.center());
        match rel {
            Rel::LeftOf => ax < bx - self.margin,
            Rel::RightOf => ax > bx + self.margin,
            Rel::Above => ay < by - self.margin,
            Rel::Below => ay > by + self.margin,
            Rel::Inside => a.bbox.ioa(&b.bbox) > self.inside_ioa,
            Rel::Near => ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt() < self.near,
            Rel::Larger => a.size > b.size,
            Rel::Smaller => a.size < b.size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldObject {
    pub id: usize,
    pub color: usize,
    pub shape: usize,
    pub size: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

impl WorldObject {
    /// Attribute words in phrase order.
    pub fn words(&self) -> [&'static str; 3] {
        [SIZES[self.size], COLORS[self.color], SHAPES[self.shape]]
    }

    pub fn satisfies(&self, phrase: &EntityPhrase) -> bool {
        let own = self.words();
        phrase.words.iter().all(|w| own.contains(&w.as_str()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthWorld {
    pub objects: Vec<WorldObject>,
    pub predicates: Predicates,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub seed: u64,
    pub train_pairs: usize,
    pub in_dist_pairs: usize,
    pub ood_pairs: usize,
    pub min_entities: usize,
    /// Largest entity count of the training distribution.
    pub train_max_entities: usize,
    pub max_entities: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Jittered non-object proposals per scene.
    pub distractors: usize,
    pub max_proposals: usize,
    /// Chance that a new object is placed inside an existing larger one.
    pub containment: f64,
    pub feature_noise: f64,
    /// Extra pure-noise feature dimensions.
    pub noise_dims: usize,
    pub predicates: Predicates,
    /// Bound on the matched/mismatched relation-frequency total variation.
    pub tv_bound: f64,
    pub bias_control: bool,
    /// World draws per pair before giving up.
    pub attempts: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_pairs: 1000,
            in_dist_pairs: 250,
            ood_pairs: 250,
            min_entities: 2,
            train_max_entities: 3,
            max_entities: 5,
            min_objects: 6,
            max_objects: 9,
            distractors: 2,
            max_proposals: 100,
            containment: 0.3,
            feature_noise: 0.05,
            noise_dims: 3,
            predicates: Predicates::default(),
            tv_bound: 0.05,
            bias_control: true,
            attempts: 200,
        }
    }
}

impl GenConfig {
    pub fn feature_dim(&self) -> usize {
        COLORS.len() + SHAPES.len() + SIZES.len() + self.noise_dims
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.min_entities >= 1
            && self.min_entities <= self.train_max_entities
            && self.train_max_entities <= self.max_entities
            && self.max_entities <= ORACLE_MAX_ENTITIES
            && self.max_entities <= self.min_objects
            && self.min_objects <= self.max_objects
            && self.max_objects + self.distractors <= self.max_proposals;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidGraph("inconsistent generator configuration".into()))
        }
    }
}

fn size_extent(size: usize, rng: &mut ChaCha8Rng) -> f64 {
    match size {
        0 => rng.random_range(0.06..0.1),
        1 => rng.random_range(0.12..0.18),
        _ => rng.random_range(0.22..0.32),
    }
}

impl SynthWorld {
    pub fn generate(config: &GenConfig, rng: &mut ChaCha8Rng) -> Self {
        let n = rng.random_range(config.min_objects..=config.max_objects);
        let mut objects: Vec<WorldObject> = Vec::with_capacity(n);
        for id in 0..n {
            let (color, shape, size) = (rng.random_range(0..COLORS.len()), rng.random_range(0..SHAPES.len()), rng.random_range(0..SIZES.len()));
            let (w, h) = (size_extent(size, rng), size_extent(size, rng));
            let hosts: Vec<&WorldObject> = objects.iter().filter(|o| o.bbox.w > w + 0.02 && o.bbox.h > h + 0.02).collect();
            let bbox = if !hosts.is_empty() && rng.random_bool(config.containment) {
                let host = hosts[rng.random_range(0..hosts.len())].bbox;
                BBox::new(host.x + rng.random_range(0.0..host.w - w), host.y + rng.random_range(0.0..host.h - h), w, h)
            } else {
                BBox::new(rng.random_range(0.0..1.0 - w), rng.random_range(0.0..1.0 - h), w, h)
            };
            objects.push(WorldObject { id, color, shape, size, bbox });
        }
        Self { objects, predicates: config.predicates }
    }

    pub fn holds(&self, rel: Rel, a: usize, b: usize) -> bool {
        self.predicates.holds(rel, &self.objects[a], &self.objects[b])
    }

    /// Every true relation over ordered object pairs, with attribute
    /// annotations, keyed by the given proposal ids.
    pub fn annotated_graph(&self, object_proposals: &[usize]) -> AnnotatedSceneGraph {
        let nodes = self
            .objects
            .iter()
            .map(|o| AnnotatedNode {
                id: object_proposals[o.id],
                bbox: o.bbox,
                words: o.words().iter().map(|w| w.to_string()).collect(),
            })
            .collect();
        let mut edges = Vec::new();
        for a in 0..self.objects.len() {
            for b in 0..self.objects.len() {
                if a == b {
                    continue;
                }
                for rel in Rel::ALL {
                    if self.holds(rel, a, b) {
                        let words = rel.words().iter().map(|w| w.to_string()).collect();
                        edges.push(AnnotatedEdge { id: edges.len(), sub: a, obj: b, words });
                    }
                }
            }
        }
        AnnotatedSceneGraph { nodes, edges }
    }
}

fn parse_relations(graph: &LanguageSceneGraph) -> Result<Vec<Rel>> {
    graph
        .relations
        .iter()
        .map(|r| Rel::from_words(&r.words).ok_or_else(|| Error::InvalidGraph(format!("unknown relation phrase {:?}", r.words.join(" ")))))
        .collect()
}

/// Injective assignments (entity id -> object id) under which every phrase
/// and relation holds, stopping after `limit` of them.
pub fn oracle_search(graph: &LanguageSceneGraph, world: &SynthWorld, limit: usize) -> Result<Vec<Vec<usize>>> {
    if graph.num_entities() > ORACLE_MAX_ENTITIES {
        return Err(Error::BudgetExceeded(format!("{} entities exceed {ORACLE_MAX_ENTITIES}", graph.num_entities())));
    }
    let rels = parse_relations(graph)?;
    let order = graph.preorder();
    let domains: Vec<Vec<usize>> =
        graph.entities.iter().map(|e| world.objects.iter().filter(|o| o.satisfies(e)).map(|o| o.id).collect()).collect();
    let parent: Vec<Option<(usize, Rel)>> =
        (0..graph.num_entities()).map(|i| graph.parent_relation(i).map(|r| (r.sub, rels[r.id]))).collect();

    struct Search<'a> {
        order: &'a [usize],
        domains: &'a [Vec<usize>],
        parent: &'a [Option<(usize, Rel)>],
        world: &'a SynthWorld,
        limit: usize,
        current: Vec<usize>,
        used: Vec<bool>,
        found: Vec<Vec<usize>>,
    }

    impl Search<'_> {
        fn run(&mut self, depth: usize) {
            if self.found.len() >= self.limit {
                return;
            }
            if depth == self.order.len() {
                self.found.push(self.current.clone());
                return;
            }
            let e = self.order[depth];
            for &o in &self.domains[e] {
                if self.used[o] {
                    continue;
                }
                if let Some((p, rel)) = self.parent[e] {
                    if !self.world.holds(rel, self.current[p], o) {
                        continue;
                    }
                }
                self.current[e] = o;
                self.used[o] = true;
                self.run(depth + 1);
                self.used[o] = false;
            }
        }
    }

    let mut s = Search {
        order: &order,
        domains: &domains,
        parent: &parent,
        world,
        limit,
        current: vec![usize::MAX; graph.num_entities()],
        used: vec![false; world.objects.len()],
        found: Vec::new(),
    };
    s.run(0);
    let mut found = s.found;
    found.sort();
    Ok(found)
}

/// All satisfying assignments.
pub fn oracle_match(graph: &LanguageSceneGraph, world: &SynthWorld) -> Result<Vec<Vec<usize>>> {
    oracle_search(graph, world, usize::MAX)
}

/// A generated expression and the objects its entities denote.
#[derive(Clone, Debug, PartialEq)]
pub struct Expression {
    pub graph: LanguageSceneGraph,
    /// Entity id -> object id.
    pub assignment: Vec<usize>,
}

impl Expression {
    pub fn referent(&self) -> usize {
        self.assignment[self.graph.root]
    }
}

fn phrase_words(obj: &WorldObject, attrs: [bool; 2]) -> Vec<String> {
    let w = obj.words();
    let mut out = Vec::with_capacity(3);
    if attrs[0] {
        out.push(w[0].to_string());
    }
    if attrs[1] {
        out.push(w[1].to_string());
    }
    out.push(w[2].to_string());
    out
}

/// Grow a tree over distinct objects, then add attributes until exactly one
/// assignment satisfies the expression.
pub fn sample_expression(world: &SynthWorld, entity_count: usize, rng: &mut ChaCha8Rng, tries: usize) -> Result<Expression> {
    if entity_count == 0 || entity_count > world.objects.len() || entity_count > ORACLE_MAX_ENTITIES {
        return Err(Error::GenerationFailed(entity_count));
    }
    'attempt: for _ in 0..tries.max(1) {
        let mut assignment = vec![rng.random_range(0..world.objects.len())];
        let mut used = vec![false; world.objects.len()];
        used[assignment[0]] = true;
        let mut relations: Vec<(usize, usize, Rel)> = Vec::new();
        for child in 1..entity_count {
            let parent = rng.random_range(0..child);
            let a = assignment[parent];
            let options: Vec<(Rel, Vec<usize>)> = Rel::ALL
                .into_iter()
                .map(|rel| (rel, (0..world.objects.len()).filter(|&b| !used[b] && world.holds(rel, a, b)).collect::<Vec<_>>()))
                .filter(|(_, objs)| !objs.is_empty())
                .collect();
            if options.is_empty() {
                continue 'attempt;
            }
            let (rel, objs) = &options[rng.random_range(0..options.len())];
            let b = objs[rng.random_range(0..objs.len())];
            used[b] = true;
            assignment.push(b);
            relations.push((parent, child, *rel));
        }
        let mut attrs = vec![[false; 2]; entity_count];
        loop {
            let graph = LanguageSceneGraph {
                entities: (0..entity_count)
                    .map(|i| EntityPhrase { id: i, words: phrase_words(&world.objects[assignment[i]], attrs[i]) })
                    .collect(),
                relations: relations
                    .iter()
                    .enumerate()
                    .map(|(id, &(sub, obj, rel))| RelationPhrase {
                        id,
                        sub,
                        obj,
                        words: rel.words().iter().map(|w| w.to_string()).collect(),
                    })
                    .collect(),
                root: 0,
            };
            let found = oracle_search(&graph, world, 2)?;
            if found.len() == 1 {
                debug_assert_eq!(found[0], assignment);
                return Ok(Expression { graph, assignment });
            }
            let open: Vec<(usize, usize)> =
                (0..entity_count).flat_map(|e| (0..2).map(move |a| (e, a))).filter(|&(e, a)| !attrs[e][a]).collect();
            if open.is_empty() {
                continue 'attempt;
            }
            let (e, a) = open[rng.random_range(0..open.len())];
            attrs[e][a] = true;
        }
    }
    Err(Error::GenerationFailed(entity_count))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Substitution {
    pub relation: usize,
    pub original: String,
    pub replacement: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Seed of the pair's random stream.
    pub seed: u64,
    pub pair: usize,
    pub twin: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub substitution: Option<Substitution>,
    pub objects: Vec<WorldObject>,
    /// Object id -> proposal id.
    pub object_proposals: Vec<usize>,
    /// Entity id -> object id for the matched expression.
    pub assignment: Vec<usize>,
}

impl Provenance {
    pub fn world(&self, predicates: Predicates) -> SynthWorld {
        SynthWorld { objects: self.objects.clone(), predicates }
    }

    /// Entity id -> proposal id for the matched expression.
    pub fn entity_proposals(&self) -> Vec<usize> {
        self.assignment.iter().map(|&o| self.object_proposals[o]).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSample {
    #[serde(flatten)]
    pub sample: Sample,
    pub provenance: Provenance,
}

/// Proposals for a world: every object's box plus jittered distractors, in
/// shuffled order. Returns the scene and the object -> proposal map.
pub fn build_scene(world: &SynthWorld, config: &GenConfig, rng: &mut ChaCha8Rng) -> (VisualScene, Vec<usize>) {
    let noise = Normal::new(0.0, config.feature_noise.max(0.0)).expect("finite noise scale");
    let dims = config.feature_dim();
    let base = |o: &WorldObject, scale: f64, rng: &mut ChaCha8Rng| {
        let mut f: Vec<f64> = (0..dims).map(|_| noise.sample(rng)).collect();
        f[o.color] += scale;
        f[COLORS.len() + o.shape] += scale;
        f[COLORS.len() + SHAPES.len() + o.size] += scale;
        f
    };
    let mut items: Vec<(BBox, Vec<f64>, Option<usize>)> =
        world.objects.iter().map(|o| (o.bbox, base(o, 1.0, rng), Some(o.id))).collect();
    for _ in 0..config.distractors {
        let src = &world.objects[rng.random_range(0..world.objects.len())];
        let b = src.bbox;
        let (sw, sh) = (rng.random_range(0.7..1.3), rng.random_range(0.7..1.3));
        let (w, h) = ((b.w * sw).min(1.0), (b.h * sh).min(1.0));
        let x = (b.x + rng.random_range(-0.5..0.5) * b.w).clamp(0.0, 1.0 - w);
        let y = (b.y + rng.random_range(-0.5..0.5) * b.h).clamp(0.0, 1.0 - h);
        items.push((BBox::new(x, y, w, h), base(src, 0.5, rng), None));
    }
    items.shuffle(rng);
    let mut object_proposals = vec![0; world.objects.len()];
    let proposals = items
        .into_iter()
        .enumerate()
        .map(|(id, (bbox, feat, obj))| {
            if let Some(o) = obj {
                object_proposals[o] = id;
            }
            BoxProposal { id, bbox, score: if obj.is_some() { 1.0 } else { 0.5 }, feat }
        })
        .collect();
    (VisualScene::new(proposals), object_proposals)
}

/// Substitute one uniformly chosen relation with one of its candidates; the
/// result is kept only if no assignment satisfies it anywhere in the scene.
pub fn make_mismatch(matched: &SynthSample, world: &SynthWorld, rng: &mut ChaCha8Rng) -> Result<SynthSample> {
    let graph = &matched.sample.graph;
    if graph.num_relations() == 0 {
        return Err(Error::NoRelations);
    }
    let rels = parse_relations(graph)?;
    let r = rng.random_range(0..graph.num_relations());
    let cands = rels[r].substitutes();
    let replacement = cands[rng.random_range(0..cands.len())];
    let mut g = graph.clone();
    g.relations[r].words = replacement.words().iter().map(|w| w.to_string()).collect();
    if !oracle_search(&g, world, 1)?.is_empty() {
        return Err(Error::Rejected);
    }
    let mut sample = matched.sample.clone();
    sample.id = matched.provenance.twin.clone();
    sample.graph = g;
    sample.label = MatchLabel { matched: false, referent_box: None, mismatched_relation: Some(r) };
    let mut provenance = matched.provenance.clone();
    provenance.twin = matched.sample.id.clone();
    provenance.substitution = Some(Substitution { relation: r, original: rels[r].phrase(), replacement: replacement.phrase() });
    Ok(SynthSample { sample, provenance })
}

fn pair_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Outcome counters of pair generation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GenCounters {
    pub false_mismatches: usize,
    pub generation_failures: usize,
    pub bias_rejections: usize,
    /// Pairs dropped by an external [`PairFilter`].
    #[serde(default)]
    pub filter_rejections: usize,
}

/// External plausibility check on a candidate pair, e.g. a language-model
/// perplexity comparison between the two expressions. Off unless passed to
/// [`generate_corpus_filtered`].
pub trait PairFilter: Sync {
    fn accept(&self, matched: &Sample, mismatched: &Sample) -> bool;
}

/// One matched sample and its mismatched twin over a shared scene.
pub fn generate_pair(
    config: &GenConfig,
    pair: usize,
    stream: u64,
    entities: (usize, usize),
    counters: &mut GenCounters,
) -> Result<(SynthSample, SynthSample)> {
    let mut rng = pair_rng(config.seed, stream);
    let entity_count = rng.random_range(entities.0..=entities.1);
    for _ in 0..config.attempts {
        let world = SynthWorld::generate(config, &mut rng);
        let expr = match sample_expression(&world, entity_count, &mut rng, 20) {
            Ok(e) => e,
            Err(Error::GenerationFailed(_)) => {
                counters.generation_failures += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let (scene, object_proposals) = build_scene(&world, config, &mut rng);
        let id = format!("p{pair:05}-m");
        let twin = format!("p{pair:05}-x");
        let matched = SynthSample {
            sample: Sample {
                id,
                label: MatchLabel { matched: true, referent_box: Some(world.objects[expr.referent()].bbox), mismatched_relation: None },
                scene,
                graph: expr.graph.clone(),
                split: None,
            },
            provenance: Provenance {
                seed: stream,
                pair,
                twin,
                substitution: None,
                objects: world.objects.clone(),
                object_proposals,
                assignment: expr.assignment.clone(),
            },
        };
        match make_mismatch(&matched, &world, &mut rng) {
            Ok(mismatched) => return Ok((matched, mismatched)),
            Err(Error::Rejected) => counters.false_mismatches += 1,
            Err(e) => return Err(e),
        }
    }
    Err(Error::GenerationFailed(entity_count))
}

/// Net substitution flow per relation across the kept pairs.
#[derive(Clone, Debug, Default)]
struct FlowTracker {
    net: BTreeMap<Rel, i64>,
    relations: usize,
}

impl FlowTracker {
    fn imbalance(&self) -> i64 {
        self.net.values().map(|v| v.abs()).sum()
    }

    fn with(&self, from: Rel, to: Rel, relations: usize) -> FlowTracker {
        let mut next = self.clone();
        *next.net.entry(from).or_default() -= 1;
        *next.net.entry(to).or_default() += 1;
        next.relations += relations;
        next
    }
}

fn substitution_rels(m: &SynthSample) -> (Rel, Rel) {
    let s = m.provenance.substitution.as_ref().expect("mismatched sample records its substitution");
    let parse = |p: &str| Rel::from_words(&p.split(' ').collect::<Vec<_>>()).expect("known relation");
    (parse(&s.original), parse(&s.replacement))
}

/// `count` pairs with entity counts in `entities`, streams starting at
/// `stream_base`. With bias control on, a pair whose substitution would push
/// the relation-frequency imbalance past the bound is skipped.
pub fn generate_pairs(
    config: &GenConfig,
    count: usize,
    entities: (usize, usize),
    stream_base: u64,
    counters: &mut GenCounters,
) -> Result<Vec<(SynthSample, SynthSample)>> {
    filtered_pairs(config, count, entities, stream_base, counters, None)
}

fn filtered_pairs(
    config: &GenConfig,
    count: usize,
    entities: (usize, usize),
    stream_base: u64,
    counters: &mut GenCounters,
    filter: Option<&dyn PairFilter>,
) -> Result<Vec<(SynthSample, SynthSample)>> {
    let mut out = Vec::with_capacity(count);
    let mut flow = FlowTracker::default();
    let mut index = 0u64;
    let budget = (count as u64 + 10) * 20;
    while out.len() < count {
        if index > budget {
            return Err(Error::InsufficientSamples(format!("only {} of {count} pairs after {index} draws", out.len())));
        }
        let (m, x) = generate_pair(config, out.len(), stream_base + index, entities, counters)?;
        index += 1;
        if filter.is_some_and(|f| !f.accept(&m.sample, &x.sample)) {
            counters.filter_rejections += 1;
            continue;
        }
        let (from, to) = substitution_rels(&x);
        let next = flow.with(from, to, m.sample.graph.num_relations());
        let allowed = (1.6 * config.tv_bound * next.relations as f64).max(4.0) as i64;
        if config.bias_control && next.imbalance() > flow.imbalance() && next.imbalance() > allowed {
            counters.bias_rejections += 1;
            continue;
        }
        flow = next;
        out.push((m, x));
    }
    Ok(out)
}

/// Entity-count thresholds of the split rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitThresholds {
    /// Largest entity count in the training distribution.
    pub train_max: usize,
    /// Largest entity count kept at all.
    pub max: usize,
}

/// Tag pairs by entity count: up to `train_max` entities go to train,
/// except the last `in_dist_pairs` such pairs, which are held out as the
/// in-distribution test; counts in `(train_max, max]` form the OOD test.
/// Twins always share a split.
pub fn build_splits(
    pairs: Vec<(SynthSample, SynthSample)>,
    thresholds: SplitThresholds,
    in_dist_pairs: usize,
) -> Result<Vec<SynthSample>> {
    let in_range = pairs.iter().filter(|(m, _)| m.sample.entity_count() <= thresholds.train_max).count();
    if in_range <= in_dist_pairs {
        return Err(Error::InsufficientSamples(format!("{in_range} in-range pairs cannot hold out {in_dist_pairs}")));
    }
    let mut seen = 0;
    let mut out = Vec::with_capacity(pairs.len() * 2);
    for (mut m, mut x) in pairs {
        let n = m.sample.entity_count();
        let split = if n <= thresholds.train_max {
            seen += 1;
            if seen > in_range - in_dist_pairs {
                Split::InDist
            } else {
                Split::Train
            }
        } else if n <= thresholds.max {
            Split::Ood
        } else {
            continue;
        };
        m.sample.split = Some(split);
        x.sample.split = Some(split);
        out.push(m);
        out.push(x);
    }
    Ok(out)
}

/// Relative frequency of each relation phrase among `samples`.
pub fn relation_frequencies<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<String, f64> = Rel::ALL.iter().map(|r| (r.phrase(), 0.0)).collect();
    let mut total = 0.0;
    for s in samples {
        for r in &s.graph.relations {
            *counts.entry(r.words.join(" ")).or_default() += 1.0;
            total += 1.0;
        }
    }
    if total > 0.0 {
        counts.values_mut().for_each(|v| *v /= total);
    }
    counts
}

pub fn total_variation(p: &BTreeMap<String, f64>, q: &BTreeMap<String, f64>) -> f64 {
    let keys: std::collections::BTreeSet<&String> = p.keys().chain(q.keys()).collect();
    0.5 * keys.into_iter().map(|k| (p.get(k).unwrap_or(&0.0) - q.get(k).unwrap_or(&0.0)).abs()).sum::<f64>()
}

/// Matched-vs-mismatched relation-frequency total variation.
pub fn relation_tv<'a>(samples: impl IntoIterator<Item = &'a Sample> + Clone) -> f64 {
    let m = relation_frequencies(samples.clone().into_iter().filter(|s| s.label.matched));
    let x = relation_frequencies(samples.into_iter().filter(|s| !s.label.matched));
    total_variation(&m, &x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub pairs: usize,
    pub matched: usize,
    pub mismatched: usize,
    pub entity_histogram: BTreeMap<usize, usize>,
    pub length_histogram: BTreeMap<usize, usize>,
    pub relation_tv: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub version: u32,
    pub seed: u64,
    pub feature_dim: usize,
    pub splits: BTreeMap<String, SplitStats>,
    pub relation_frequency_matched: BTreeMap<String, f64>,
    pub relation_frequency_mismatched: BTreeMap<String, f64>,
    pub relation_tv: f64,
    pub tv_bound: f64,
    pub counters: GenCounters,
}

pub fn corpus_stats(samples: &[SynthSample], config: &GenConfig, counters: GenCounters) -> CorpusStats {
    let plain: Vec<&Sample> = samples.iter().map(|s| &s.sample).collect();
    let mut splits = BTreeMap::new();
    for split in Split::ALL {
        let part: Vec<&Sample> = plain.iter().copied().filter(|s| s.split == Some(split)).collect();
        let mut entity_histogram = BTreeMap::new();
        let mut length_histogram = BTreeMap::new();
        for s in &part {
            *entity_histogram.entry(s.entity_count()).or_insert(0) += 1;
            *length_histogram.entry(s.word_count()).or_insert(0) += 1;
        }
        let matched = part.iter().filter(|s| s.label.matched).count();
        splits.insert(
            split.name().to_string(),
            SplitStats {
                pairs: part.len() / 2,
                matched,
                mismatched: part.len() - matched,
                entity_histogram,
                length_histogram,
                relation_tv: relation_tv(part.iter().copied()),
            },
        );
    }
    CorpusStats {
        version: CORPUS_VERSION,
        seed: config.seed,
        feature_dim: config.feature_dim(),
        splits,
        relation_frequency_matched: relation_frequencies(plain.iter().copied().filter(|s| s.label.matched)),
        relation_frequency_mismatched: relation_frequencies(plain.iter().copied().filter(|s| !s.label.matched)),
        relation_tv: relation_tv(plain.iter().copied()),
        tv_bound: config.tv_bound,
        counters,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: GenConfig,
    pub samples: Vec<SynthSample>,
    pub stats: CorpusStats,
}

impl Corpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SynthSample> {
        self.samples.iter().filter(move |s| s.sample.split == Some(split))
    }

    pub fn plain(&self, split: Option<Split>) -> Vec<Sample> {
        self.samples.iter().filter(|s| split.is_none() || s.sample.split == split).map(|s| s.sample.clone()).collect()
    }
}

/// Generate the full corpus: in-range pairs for train and in-dist test,
/// out-of-range pairs for the OOD test.
pub fn generate_corpus(config: &GenConfig) -> Result<Corpus> {
    generate_corpus_filtered(config, None)
}

/// [`generate_corpus`] with an optional extra pair filter.
pub fn generate_corpus_filtered(config: &GenConfig, filter: Option<&dyn PairFilter>) -> Result<Corpus> {
    config.validate()?;
    let mut counters = GenCounters::default();
    let mut pairs = filtered_pairs(
        config,
        config.train_pairs + config.in_dist_pairs,
        (config.min_entities, config.train_max_entities),
        0,
        &mut counters,
        filter,
    )?;
    if config.ood_pairs > 0 {
        let ood_range = (config.train_max_entities + 1, config.max_entities);
        let ood = filtered_pairs(config, config.ood_pairs, ood_range, 1 << 32, &mut counters, filter)?;
        let offset = pairs.len();
        pairs.extend(ood.into_iter().map(|(m, x)| renumber(m, x, offset)));
    }
    let thresholds = SplitThresholds { train_max: config.train_max_entities, max: config.max_entities };
    let samples = build_splits(pairs, thresholds, config.in_dist_pairs)?;
    let stats = corpus_stats(&samples, config, counters);
    Ok(Corpus { config: config.clone(), samples, stats })
}

fn renumber(mut m: SynthSample, mut x: SynthSample, offset: usize) -> (SynthSample, SynthSample) {
    let pair = m.provenance.pair + offset;
    let (mid, xid) = (format!("p{pair:05}-m"), format!("p{pair:05}-x"));
    m.sample.id = mid.clone();
    m.provenance.pair = pair;
    m.provenance.twin = xid.clone();
    x.sample.id = xid;
    x.provenance.pair = pair;
    x.provenance.twin = mid;
    (m, x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitIndex {
    pub version: u32,
    pub train: Vec<String>,
    pub in_dist: Vec<String>,
    pub ood: Vec<String>,
}

/// Write `samples.jsonl`, `splits.json`, `stats.json` and `config.json`.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut out = BufWriter::new(std::fs::File::create(dir.join("samples.jsonl"))?);
    for s in &corpus.samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    let ids = |split| corpus.split(split).map(|s| s.sample.id.clone()).collect();
    let index = SplitIndex { version: CORPUS_VERSION, train: ids(Split::Train), in_dist: ids(Split::InDist), ood: ids(Split::Ood) };
    std::fs::write(dir.join("splits.json"), serde_json::to_string_pretty(&index)?)?;
    std::fs::write(dir.join("stats.json"), serde_json::to_string_pretty(&corpus.stats)?)?;
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&corpus.config)?)?;
    Ok(())
}

/// Read `samples.jsonl` from a corpus directory.
pub fn read_samples(dir: &Path) -> Result<Vec<SynthSample>> {
    let f = BufReader::new(std::fs::File::open(dir.join("samples.jsonl"))?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Read the generator configuration stored with a corpus, if present.
pub fn read_config(dir: &Path) -> Result<Option<GenConfig>> {
    let path = dir.join("config.json");
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_str(&std::fs::read_to_string(path)?)?))
}

/// Re-run the oracle on every sample: matched samples must have the labeled
/// assignment as their only solution, mismatched ones none.
pub fn verify_sample(s: &SynthSample, predicates: Predicates) -> Result<bool> {
    let world = s.provenance.world(predicates);
    let found = oracle_search(&s.sample.graph, &world, 2)?;
    Ok(if s.sample.label.matched {
        let referent = s.sample.label.referent_box.map(|b| iou(&b, &world.objects[s.provenance.assignment[s.sample.graph.root]].bbox) == 1.0);
        found.len() == 1 && found[0] == s.provenance.assignment && referent == Some(true)
    } else {
        found.is_empty()
    })
}
