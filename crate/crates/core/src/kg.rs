//! Toy knowledge graph, entity linking and per-candidate subgraph retrieval.

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};
use std::io::{BufRead, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type EntityId = usize;
pub type RelationId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triplet {
    pub head: EntityId,
    pub rel: RelationId,
    pub tail: EntityId,
}

/// Entity and relation tables plus a duplicate-free triplet list.
///
/// Surfaces are stored case-folded; ids are dense and assigned in
/// registration order. One extra relation id, [`KnowledgeGraph::interaction_relation`],
/// is reserved past the last registered relation for interaction-node edges.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KnowledgeGraph {
    entities: Vec<String>,
    relations: Vec<String>,
    triplets: Vec<Triplet>,
    triplet_set: HashSet<Triplet>,
    entity_index: HashMap<String, EntityId>,
    relation_index: HashMap<String, RelationId>,
    out_edges: Vec<Vec<(RelationId, EntityId)>>,
    in_edges: Vec<Vec<(RelationId, EntityId)>>,
    max_surface_len: usize,
}

pub fn case_fold(s: &str) -> String {
    s.trim().to_lowercase()
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the id of `surface`, registering it if unseen.
    pub fn intern_entity(&mut self, surface: &str) -> EntityId {
        let key = case_fold(surface);
        if let Some(&id) = self.entity_index.get(&key) {
            return id;
        }
        let id = self.entities.len();
        self.max_surface_len = self.max_surface_len.max(key.split_whitespace().count());
        self.entity_index.insert(key.clone(), id);
        self.entities.push(key);
        self.out_edges.push(Vec::new());
        self.in_edges.push(Vec::new());
        id
    }

    pub fn intern_relation(&mut self, name: &str) -> RelationId {
        let key = case_fold(name);
        if let Some(&id) = self.relation_index.get(&key) {
            return id;
        }
        let id = self.relations.len();
        self.relation_index.insert(key.clone(), id);
        self.relations.push(key);
        id
    }

    pub fn add_triplet(&mut self, head: EntityId, rel: RelationId, tail: EntityId) -> Result<()> {
        self.check_entity(head)?;
        self.check_entity(tail)?;
        if rel >= self.relations.len() {
            return Err(Error::IdNotFound {
                kind: "relation",
                id: rel,
            });
        }
        let t = Triplet { head, rel, tail };
        if !self.triplet_set.insert(t) {
            return Err(Error::DuplicateTriplet(head, rel, tail));
        }
        self.triplets.push(t);
        self.out_edges[head].push((rel, tail));
        self.in_edges[tail].push((rel, head));
        Ok(())
    }

    pub fn check_entity(&self, id: EntityId) -> Result<()> {
        if id < self.entities.len() {
            Ok(())
        } else {
            Err(Error::IdNotFound { kind: "entity", id })
        }
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    /// Reserved relation id used for edges touching the interaction node.
    pub fn interaction_relation(&self) -> RelationId {
        self.relations.len()
    }

    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }

    pub fn contains(&self, t: &Triplet) -> bool {
        self.triplet_set.contains(t)
    }

    pub fn surface(&self, id: EntityId) -> &str {
        &self.entities[id]
    }

    pub fn relation_name(&self, id: RelationId) -> &str {
        &self.relations[id]
    }

    pub fn relation_names(&self) -> &[String] {
        &self.relations
    }

    pub fn surfaces(&self) -> &[String] {
        &self.entities
    }

    pub fn entity_by_surface(&self, surface: &str) -> Option<EntityId> {
        self.entity_index.get(&case_fold(surface)).copied()
    }

    pub fn relation_by_name(&self, name: &str) -> Option<RelationId> {
        self.relation_index.get(&case_fold(name)).copied()
    }

    pub fn out_edges(&self, id: EntityId) -> &[(RelationId, EntityId)] {
        &self.out_edges[id]
    }

    pub fn in_edges(&self, id: EntityId) -> &[(RelationId, EntityId)] {
        &self.in_edges[id]
    }

    /// In-degree plus out-degree.
    pub fn degree(&self, id: EntityId) -> Result<usize> {
        self.check_entity(id)?;
        Ok(self.out_edges[id].len() + self.in_edges[id].len())
    }

    /// Neighbors ignoring edge direction; may repeat under parallel edges.
    pub fn undirected_neighbors(&self, id: EntityId) -> impl Iterator<Item = EntityId> + '_ {
        self.out_edges[id]
            .iter()
            .chain(&self.in_edges[id])
            .map(|&(_, e)| e)
    }

    /// Hop distances (ignoring direction) from the nearest source, up to `hops`.
    pub fn hop_distances(
        &self,
        sources: &[EntityId],
        hops: usize,
    ) -> Result<HashMap<EntityId, usize>> {
        let mut dist = HashMap::new();
        let mut queue = VecDeque::new();
        for &s in sources {
            self.check_entity(s)?;
            if dist.insert(s, 0).is_none() {
                queue.push_back(s);
            }
        }
        while let Some(e) = queue.pop_front() {
            let d = dist[&e];
            if d == hops {
                continue;
            }
            for n in self.undirected_neighbors(e) {
                if let std::collections::hash_map::Entry::Vacant(v) = dist.entry(n) {
                    v.insert(d + 1);
                    queue.push_back(n);
                }
            }
        }
        Ok(dist)
    }

    /// Parses `head<TAB>relation<TAB>tail` lines, registering entities and
    /// relations in order of first appearance. Blank lines are skipped.
    pub fn read_tsv<R: BufRead>(reader: R, path: &Path) -> Result<Self> {
        let mut kg = KnowledgeGraph::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 || fields.iter().any(|f| f.trim().is_empty()) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    msg: "expected head<TAB>relation<TAB>tail".into(),
                });
            }
            let h = kg.intern_entity(fields[0]);
            let r = kg.intern_relation(fields[1]);
            let t = kg.intern_entity(fields[2]);
            kg.add_triplet(h, r, t)?;
        }
        Ok(kg)
    }

    pub fn write_tsv<W: Write>(&self, w: &mut W) -> Result<()> {
        for t in &self.triplets {
            writeln!(
                w,
                "{}\t{}\t{}",
                self.entities[t.head], self.relations[t.rel], self.entities[t.tail]
            )?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    /// Token index range in the sequence that was linked.
    pub span: Range<usize>,
    pub entity: EntityId,
}

/// Greedy left-to-right longest-match linking of entity surfaces against
/// token n-grams (case-folded). Matches never overlap.
pub fn link_entities(kg: &KnowledgeGraph, tokens: &[String]) -> Vec<Mention> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let longest = kg.max_surface_len.min(tokens.len() - i);
        let hit = (1..=longest).rev().find_map(|n| {
            let gram = tokens[i..i + n]
                .iter()
                .map(|t| case_fold(t))
                .collect::<Vec<_>>()
                .join(" ");
            kg.entity_index.get(&gram).map(|&e| (n, e))
        });
        match hit {
            Some((n, entity)) => {
                out.push(Mention {
                    span: i..i + n,
                    entity,
                });
                i += n;
            }
            None => i += 1,
        }
    }
    out
}

/// Structural relevance of an entity at `hop_distance` from the nearest
/// mention: `2^-hop + 0.1 * ln(1 + degree)`.
pub fn relevance_score(kg: &KnowledgeGraph, entity: EntityId, hop_distance: usize) -> Result<f64> {
    let degree = kg.degree(entity)?;
    Ok(0.5f64.powi(hop_distance as i32) + 0.1 * (1.0 + degree as f64).ln())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum SourceLabel {
    QuestionLinked = 1,
    AnswerLinked = 2,
    Neighbor = 3,
    Irrelevant = 4,
}

impl SourceLabel {
    pub fn code(self) -> u8 {
        self as u8
    }

    /// Zero-based class index for the 4-way classifier.
    pub fn class(self) -> usize {
        self as usize - 1
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(SourceLabel::QuestionLinked),
            2 => Some(SourceLabel::AnswerLinked),
            3 => Some(SourceLabel::Neighbor),
            4 => Some(SourceLabel::Irrelevant),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubNode {
    /// `None` only for the interaction node.
    pub entity: Option<EntityId>,
    pub label: Option<SourceLabel>,
    pub relevance: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SubEdge {
    pub head: usize,
    pub rel: RelationId,
    pub tail: usize,
}

/// Retrieved neighborhood for one question/candidate pair. Node 0 is the
/// interaction node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubGraph {
    pub nodes: Vec<SubNode>,
    pub edges: Vec<SubEdge>,
    pub interaction_relation: RelationId,
}

pub const INTERACTION_NODE: usize = 0;

impl SubGraph {
    pub fn interaction_only(interaction_relation: RelationId) -> Self {
        SubGraph {
            nodes: vec![SubNode {
                entity: None,
                label: None,
                relevance: 0.0,
            }],
            edges: Vec::new(),
            interaction_relation,
        }
    }

    pub fn num_entity_nodes(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn entity_ids(&self) -> impl Iterator<Item = EntityId> + '_ {
        self.nodes.iter().filter_map(|n| n.entity)
    }

    /// Local index of the node holding `entity`.
    pub fn local_index(&self, entity: EntityId) -> Option<usize> {
        self.nodes.iter().position(|n| n.entity == Some(entity))
    }

    /// Edges that came from the knowledge graph (interaction edges excluded).
    pub fn kg_edges(&self) -> impl Iterator<Item = &SubEdge> {
        let inter = self.interaction_relation;
        self.edges.iter().filter(move |e| e.rel != inter)
    }

    fn connect_interaction(&mut self, node: usize) {
        let rel = self.interaction_relation;
        self.edges.push(SubEdge {
            head: INTERACTION_NODE,
            rel,
            tail: node,
        });
        self.edges.push(SubEdge {
            head: node,
            rel,
            tail: INTERACTION_NODE,
        });
    }

    /// Checks the structural invariants. Used by tests and loaders.
    pub fn validate(&self) -> Result<()> {
        let first = self
            .nodes
            .first()
            .ok_or_else(|| Error::Shape("subgraph without nodes".into()))?;
        if first.entity.is_some() || first.label.is_some() {
            return Err(Error::Shape(
                "node 0 must be the unlabeled interaction node".into(),
            ));
        }
        let mut seen = HashSet::new();
        for (i, n) in self.nodes.iter().enumerate().skip(1) {
            let e = n
                .entity
                .ok_or_else(|| Error::Shape(format!("node {i} has no entity")))?;
            if !seen.insert(e) {
                return Err(Error::Shape(format!("entity {e} appears twice")));
            }
            if n.label.is_none() {
                return Err(Error::LabelMissing(i));
            }
        }
        for e in &self.edges {
            if e.head >= self.nodes.len() || e.tail >= self.nodes.len() {
                return Err(Error::Shape(format!(
                    "edge {e:?} out of {} nodes",
                    self.nodes.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub hops: usize,
    /// Cap on retrieved nodes, counting the interaction node.
    pub max_nodes: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            hops: 1,
            max_nodes: 16,
        }
    }
}

/// Breadth-first retrieval around the mentioned entities, ranked by
/// [`relevance_score`] with ties broken by entity id. Mentioned entities are
/// always kept.
pub fn retrieve_subgraph(
    kg: &KnowledgeGraph,
    question_entities: &[EntityId],
    answer_entities: &[EntityId],
    cfg: RetrievalConfig,
) -> Result<SubGraph> {
    if cfg.hops == 0 {
        return Err(Error::Config("retrieval hops must be at least 1".into()));
    }
    let mentioned: BTreeSet<EntityId> = question_entities
        .iter()
        .chain(answer_entities)
        .copied()
        .collect();
    if cfg.max_nodes < mentioned.len() + 1 {
        return Err(Error::Config(format!(
            "max_nodes {} cannot hold {} mentions plus the interaction node",
            cfg.max_nodes,
            mentioned.len()
        )));
    }
    let seeds: Vec<EntityId> = mentioned.iter().copied().collect();
    let dist = kg.hop_distances(&seeds, cfg.hops)?;

    let mut ranked: Vec<(bool, f64, EntityId)> = dist
        .iter()
        .map(|(&e, &d)| Ok((!mentioned.contains(&e), relevance_score(kg, e, d)?, e)))
        .collect::<Result<_>>()?;
    ranked.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.total_cmp(&a.1)).then(a.2.cmp(&b.2)));
    ranked.truncate(cfg.max_nodes - 1);

    let mut sg = SubGraph::interaction_only(kg.interaction_relation());
    let mut local = HashMap::new();
    for &(_, score, e) in &ranked {
        local.insert(e, sg.nodes.len());
        sg.nodes.push(SubNode {
            entity: Some(e),
            label: None,
            relevance: score,
        });
    }
    for t in kg.triplets() {
        if let (Some(&h), Some(&tl)) = (local.get(&t.head), local.get(&t.tail)) {
            sg.edges.push(SubEdge {
                head: h,
                rel: t.rel,
                tail: tl,
            });
        }
    }
    label_sources(&mut sg, question_entities, answer_entities);
    let linked: Vec<usize> = (1..sg.nodes.len())
        .filter(|&i| {
            matches!(
                sg.nodes[i].label,
                Some(SourceLabel::QuestionLinked | SourceLabel::AnswerLinked)
            )
        })
        .collect();
    for i in linked {
        sg.connect_interaction(i);
    }
    Ok(sg)
}

/// Assigns source labels to every entity node that is not an injected
/// irrelevant node.
///
/// Mentioned entities take the label of their own side (answer side when
/// mentioned on both). Other nodes sharing a knowledge-graph edge with a
/// mention are linked to that side, answer side first; everything else is
/// a multi-hop neighbor.
pub fn label_sources(
    sg: &mut SubGraph,
    question_entities: &[EntityId],
    answer_entities: &[EntityId],
) {
    let q: HashSet<EntityId> = question_entities.iter().copied().collect();
    let a: HashSet<EntityId> = answer_entities.iter().copied().collect();
    let n = sg.nodes.len();
    let mut near_q = vec![false; n];
    let mut near_a = vec![false; n];
    for e in sg.kg_edges() {
        for (x, y) in [(e.head, e.tail), (e.tail, e.head)] {
            if let Some(ent) = sg.nodes[y].entity {
                near_q[x] |= q.contains(&ent);
                near_a[x] |= a.contains(&ent);
            }
        }
    }
    for (i, node) in sg.nodes.iter_mut().enumerate() {
        let Some(ent) = node.entity else { continue };
        if node.label == Some(SourceLabel::Irrelevant) {
            continue;
        }
        node.label = Some(if a.contains(&ent) {
            SourceLabel::AnswerLinked
        } else if q.contains(&ent) {
            SourceLabel::QuestionLinked
        } else if near_a[i] {
            SourceLabel::AnswerLinked
        } else if near_q[i] {
            SourceLabel::QuestionLinked
        } else {
            SourceLabel::Neighbor
        });
    }
}

/// Appends `k_irr` entities drawn uniformly from outside the `hops`
/// neighborhood of the mentions. They get label 4, no knowledge-graph
/// edges, and a two-way edge to the interaction node.
pub fn inject_irrelevant(
    sg: &SubGraph,
    kg: &KnowledgeGraph,
    mentioned: &[EntityId],
    hops: usize,
    k_irr: usize,
    seed: u64,
) -> Result<SubGraph> {
    let mut out = sg.clone();
    if k_irr == 0 {
        return Ok(out);
    }
    let mut relevant: HashSet<EntityId> = kg.hop_distances(mentioned, hops)?.into_keys().collect();
    relevant.extend(sg.entity_ids());
    let candidates: Vec<EntityId> = (0..kg.num_entities())
        .filter(|e| !relevant.contains(e))
        .collect();
    if candidates.len() < k_irr {
        return Err(Error::NotEnoughIrrelevant {
            needed: k_irr,
            available: candidates.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for pick in sample(&mut rng, candidates.len(), k_irr).into_iter() {
        let idx = out.nodes.len();
        out.nodes.push(SubNode {
            entity: Some(candidates[pick]),
            label: Some(SourceLabel::Irrelevant),
            relevance: 0.0,
        });
        out.connect_interaction(idx);
    }
    Ok(out)
}
