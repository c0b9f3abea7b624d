//! Language scene graphs, visual scenes, box geometry, and recovery of
//! ground-truth phrase/box correspondences by subgraph search.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box `[x, y, w, h]` in image-fraction units, top-left origin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        Self { x: v[0], y: v[1], w: v[2], h: v[3] }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    /// Inside the unit square with non-negative extent.
    pub fn is_valid(&self) -> bool {
        let tol = 1e-12;
        self.x >= -tol
            && self.y >= -tol
            && self.w >= 0.0
            && self.h >= 0.0
            && self.x + self.w <= 1.0 + tol
            && self.y + self.h <= 1.0 + tol
            && [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite())
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        overlap(self.x, self.w, other.x, other.w) * overlap(self.y, self.h, other.y, other.h)
    }

    /// Fraction of `self` covered by `other`.
    pub fn ioa(&self, other: &BBox) -> f64 {
        let a = self.area();
        if a <= 0.0 {
            0.0
        } else {
            self.intersection(other) / a
        }
    }

    /// Add coordinate offsets, then clamp back into the unit square.
    pub fn offset_clamped(&self, delta: [f64; 4]) -> BBox {
        let x = (self.x + delta[0]).clamp(0.0, 1.0);
        let y = (self.y + delta[1]).clamp(0.0, 1.0);
        let w = (self.w + delta[2]).clamp(0.0, 1.0 - x);
        let h = (self.h + delta[3]).clamp(0.0, 1.0 - y);
        BBox { x, y, w, h }
    }
}

/// Length of `[a, a + aw] ∩ [b, b + bw]`. A nested interval yields its own
/// length exactly, so a box overlaps itself by its full area.
fn overlap(a: f64, aw: f64, b: f64, bw: f64) -> f64 {
    let (ea, eb) = (a + aw, b + bw);
    if a >= b && ea <= eb {
        aw
    } else if b >= a && eb <= ea {
        bw
    } else {
        (ea.min(eb) - a.max(b)).max(0.0)
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Relative spatial feature of box `j` seen from box `i`.
pub fn relative_spatial(bi: &BBox, bj: &BBox) -> Result<[f64; 5]> {
    if bi.w <= 0.0 || bi.h <= 0.0 {
        return Err(Error::DegenerateBox);
    }
    let (xc, yc) = bi.center();
    Ok([
        (bj.x - xc) / bi.w,
        (bj.y - yc) / bi.h,
        (bj.x + bj.w - xc) / bi.w,
        (bj.y + bj.h - yc) / bi.h,
        (bj.w * bj.h) / (bi.w * bi.h),
    ])
}

/// `[x, y, w, h, w*h]`.
pub fn location_vector(b: &BBox) -> [f64; 5] {
    [b.x, b.y, b.w, b.h, b.w * b.h]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityPhrase {
    pub id: usize,
    pub words: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationPhrase {
    pub id: usize,
    /// Subject entity id (the parent, closer to the root).
    pub sub: usize,
    /// Object entity id (the child).
    pub obj: usize,
    pub words: Vec<String>,
}

/// Rooted tree of entity phrases joined by relation phrases.
///
/// Entity and relation ids are their positions in the respective lists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageSceneGraph {
    pub entities: Vec<EntityPhrase>,
    pub relations: Vec<RelationPhrase>,
    pub root: usize,
}

/// Half-open token range `[start, end)` in the laid-out sentence.
pub type Span = (usize, usize);

/// The sentence a graph serializes to, and where each phrase sits in it.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub tokens: Vec<String>,
    pub entity_spans: Vec<Span>,
    pub relation_spans: Vec<Span>,
}

impl LanguageSceneGraph {
    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    /// Relations whose subject is `entity`, in id order.
    pub fn child_relations(&self, entity: usize) -> impl Iterator<Item = &RelationPhrase> {
        self.relations.iter().filter(move |r| r.sub == entity)
    }

    /// The relation linking `entity` to its parent, if any.
    pub fn parent_relation(&self, entity: usize) -> Option<&RelationPhrase> {
        self.relations.iter().find(|r| r.obj == entity)
    }

    /// Entities in depth-first pre-order from the root.
    pub fn preorder(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.entities.len());
        let mut stack = vec![self.root];
        while let Some(e) = stack.pop() {
            out.push(e);
            let kids: Vec<usize> = self.child_relations(e).map(|r| r.obj).collect();
            stack.extend(kids.into_iter().rev());
        }
        out
    }

    /// Sentence obtained by reading each entity phrase followed by its
    /// child relations and their subtrees.
    pub fn layout(&self) -> Layout {
        let mut tokens = Vec::new();
        let mut entity_spans = vec![(0, 0); self.entities.len()];
        let mut relation_spans = vec![(0, 0); self.relations.len()];
        self.layout_entity(self.root, &mut tokens, &mut entity_spans, &mut relation_spans);
        Layout { tokens, entity_spans, relation_spans }
    }

    fn layout_entity(&self, e: usize, tokens: &mut Vec<String>, es: &mut [Span], rs: &mut [Span]) {
        let start = tokens.len();
        tokens.extend(self.entities[e].words.iter().cloned());
        es[e] = (start, tokens.len());
        for r in self.child_relations(e) {
            let start = tokens.len();
            tokens.extend(r.words.iter().cloned());
            rs[r.id] = (start, tokens.len());
            self.layout_entity(r.obj, tokens, es, rs);
        }
    }

    pub fn sentence(&self) -> String {
        self.layout().tokens.join(" ")
    }

    pub fn word_count(&self) -> usize {
        self.entities.iter().map(|e| e.words.len()).sum::<usize>()
            + self.relations.iter().map(|r| r.words.len()).sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        validate_tree(self)
    }
}

/// Check that the graph is a tree rooted at `root` with parent-to-child
/// relation orientation.
pub fn validate_tree(g: &LanguageSceneGraph) -> Result<()> {
    let n = g.entities.len();
    if n == 0 {
        return Err(Error::MultiRoot("graph has no entities".into()));
    }
    for (i, e) in g.entities.iter().enumerate() {
        if e.id != i {
            return Err(Error::InvalidGraph(format!("entity at position {i} has id {}", e.id)));
        }
    }
    for (i, r) in g.relations.iter().enumerate() {
        if r.id != i {
            return Err(Error::InvalidGraph(format!("relation at position {i} has id {}", r.id)));
        }
        if r.sub >= n || r.obj >= n {
            return Err(Error::InvalidGraph(format!("relation {i} references a missing entity")));
        }
    }
    if g.root >= n {
        return Err(Error::InvalidGraph(format!("root {} is not an entity", g.root)));
    }
    if g.relations.len() > n - 1 {
        return Err(Error::Cycle);
    }
    // union-find over the undirected view
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for r in &g.relations {
        let (a, b) = (find(&mut parent, r.sub), find(&mut parent, r.obj));
        if a == b {
            return Err(Error::Cycle);
        }
        parent[a] = b;
    }
    if g.relations.len() < n - 1 {
        return Err(Error::Disconnected);
    }
    // undirected depth from the root
    let mut depth = vec![usize::MAX; n];
    depth[g.root] = 0;
    let mut queue = VecDeque::from([g.root]);
    while let Some(u) = queue.pop_front() {
        for r in &g.relations {
            let v = if r.sub == u {
                r.obj
            } else if r.obj == u {
                r.sub
            } else {
                continue;
            };
            if depth[v] == usize::MAX {
                depth[v] = depth[u] + 1;
                queue.push_back(v);
            }
        }
    }
    for r in &g.relations {
        if depth[r.sub] >= depth[r.obj] {
            return Err(Error::MultiRoot(format!(
                "relation {} points from entity {} towards the root",
                r.id, r.sub
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxProposal {
    pub id: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(default)]
    pub score: f64,
    pub feat: Vec<f64>,
}

/// Object proposals of one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisualScene {
    pub proposals: Vec<BoxProposal>,
    #[serde(default = "default_image_size")]
    pub image_size: [u32; 2],
}

fn default_image_size() -> [u32; 2] {
    [640, 480]
}

impl VisualScene {
    pub fn new(proposals: Vec<BoxProposal>) -> Self {
        Self { proposals, image_size: default_image_size() }
    }

    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }

    pub fn validate(&self, max_proposals: usize) -> Result<()> {
        if self.proposals.len() > max_proposals {
            return Err(Error::InvalidGraph(format!(
                "{} proposals exceed the maximum of {max_proposals}",
                self.proposals.len()
            )));
        }
        let dim = self.proposals.first().map_or(0, |p| p.feat.len());
        for (i, p) in self.proposals.iter().enumerate() {
            if p.id != i {
                return Err(Error::InvalidGraph(format!("proposal at position {i} has id {}", p.id)));
            }
            if !p.bbox.is_valid() {
                return Err(Error::InvalidGraph(format!("proposal {i} has an invalid box")));
            }
            if p.feat.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, actual: p.feat.len() });
            }
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.proposals.first().map_or(0, |p| p.feat.len())
    }
}

/// Scene graph with phrase annotations on both objects and relations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedSceneGraph {
    pub nodes: Vec<AnnotatedNode>,
    pub edges: Vec<AnnotatedEdge>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedNode {
    pub id: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub words: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedEdge {
    pub id: usize,
    pub sub: usize,
    pub obj: usize,
    pub words: Vec<String>,
}

/// Correspondence from graph phrases to target ids (annotated nodes or
/// proposals).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrespondenceLabel {
    /// Indexed by entity id.
    pub entities: Vec<usize>,
    /// Indexed by relation id: (subject target, object target).
    pub relations: Vec<(usize, usize)>,
    pub unique: bool,
}

impl CorrespondenceLabel {
    pub fn from_entities(graph: &LanguageSceneGraph, entities: Vec<usize>, unique: bool) -> Self {
        let relations = graph.relations.iter().map(|r| (entities[r.sub], entities[r.obj])).collect();
        Self { entities, relations, unique }
    }

    pub fn map_targets(&self, f: impl Fn(usize) -> usize) -> Self {
        Self {
            entities: self.entities.iter().map(|&t| f(t)).collect(),
            relations: self.relations.iter().map(|&(a, b)| (f(a), f(b))).collect(),
            unique: self.unique,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SubgraphMatch {
    Unique(CorrespondenceLabel),
    NotFound,
    /// Number of distinct node mappings found.
    Ambiguous(usize),
}

/// Box-equality threshold used to seed the search.
pub const SEED_IOU: f64 = 0.99;

/// Every parsed word appears in the node annotation.
pub fn entity_consistent(parsed: &EntityPhrase, node: &AnnotatedNode) -> bool {
    parsed.words.iter().all(|w| node.words.contains(w))
}

/// Stack-driven search for the annotated subgraph matching `parsed`, seeded
/// at the nodes whose box equals `referent`. Partial subgraphs are grown one
/// entity at a time along edges whose phrases agree with the parsed graph;
/// all complete embeddings are collected so ambiguity can be reported.
pub fn match_subgraph(
    parsed: &LanguageSceneGraph,
    gt: &AnnotatedSceneGraph,
    referent: &BBox,
) -> Result<SubgraphMatch> {
    validate_tree(parsed)?;
    let order = parsed.preorder();
    let n = parsed.num_entities();

    #[derive(Clone)]
    struct Partial {
        nodes: Vec<Option<usize>>,
        used: Vec<bool>,
        depth: usize,
    }

    let mut stack: Vec<Partial> = gt
        .nodes
        .iter()
        .enumerate()
        .filter(|(_, v)| iou(&v.bbox, referent) >= SEED_IOU && entity_consistent(&parsed.entities[parsed.root], v))
        .map(|(i, _)| {
            let mut nodes = vec![None; n];
            nodes[parsed.root] = Some(i);
            let mut used = vec![false; gt.nodes.len()];
            used[i] = true;
            Partial { nodes, used, depth: 1 }
        })
        .collect();

    let mut found: BTreeSet<Vec<usize>> = BTreeSet::new();
    while let Some(g) = stack.pop() {
        if g.depth == n {
            found.insert(g.nodes.iter().map(|x| x.expect("complete mapping")).collect());
            continue;
        }
        let entity = order[g.depth];
        let rel = parsed.parent_relation(entity).expect("non-root entity has a parent");
        let anchor = g.nodes[rel.sub].expect("parent mapped before child");
        for edge in &gt.edges {
            if edge.sub != anchor || edge.words != rel.words || g.used[edge.obj] {
                continue;
            }
            if !entity_consistent(&parsed.entities[entity], &gt.nodes[edge.obj]) {
                continue;
            }
            let mut next = g.clone();
            next.nodes[entity] = Some(edge.obj);
            next.used[edge.obj] = true;
            next.depth += 1;
            stack.push(next);
        }
    }

    Ok(match found.len() {
        0 => SubgraphMatch::NotFound,
        1 => {
            let nodes = found.into_iter().next().expect("one mapping");
            let ids = nodes.iter().map(|&i| gt.nodes[i].id).collect();
            SubgraphMatch::Unique(CorrespondenceLabel::from_entities(parsed, ids, true))
        }
        k => SubgraphMatch::Ambiguous(k),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    InDist,
    Ood,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::InDist, Split::Ood];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::InDist => "in_dist",
            Split::Ood => "ood",
        }
    }
}

/// Supervision attached to a sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchLabel {
    pub matched: bool,
    /// Referent box, given for matched samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub referent_box: Option<BBox>,
    /// Replaced relation id, given for mismatched samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mismatched_relation: Option<usize>,
}

/// One image/expression pair with its labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub scene: VisualScene,
    pub graph: LanguageSceneGraph,
    pub label: MatchLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl Sample {
    pub fn validate(&self, max_proposals: usize) -> Result<()> {
        validate_tree(&self.graph)?;
        self.scene.validate(max_proposals)?;
        if self.scene.is_empty() {
            return Err(Error::InvalidGraph(format!("sample {} has no proposals", self.id)));
        }
        if let Some(r) = self.label.mismatched_relation {
            if r >= self.graph.num_relations() {
                return Err(Error::InvalidGraph(format!("sample {} labels a missing relation", self.id)));
            }
        }
        Ok(())
    }

    pub fn entity_count(&self) -> usize {
        self.graph.num_entities()
    }

    pub fn word_count(&self) -> usize {
        self.graph.word_count()
    }
}
