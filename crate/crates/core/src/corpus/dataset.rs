use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vocab::{Vocab, INT, SEP};
use crate::error::{Error, Result};
use crate::kg::{
    link_entities, retrieve_subgraph, EntityId, KnowledgeGraph, Mention, RetrievalConfig,
    SourceLabel, SubEdge, SubGraph, SubNode,
};

/// One multiple-choice question with a retrieved subgraph per candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct McqaExample {
    pub id: u64,
    pub context: Vec<String>,
    pub question: Vec<String>,
    pub candidates: Vec<Vec<String>>,
    pub correct: usize,
    pub subgraphs: Vec<SubGraph>,
}

/// Encoder-ready view of one candidate: `[INT] context [SEP] question [SEP] answer`.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateInput {
    pub ids: Vec<usize>,
    /// Spans index into `ids`, so they line up with encoder rows.
    pub mentions: Vec<Mention>,
    pub question_entities: Vec<EntityId>,
    pub answer_entities: Vec<EntityId>,
}

fn distinct(mentions: &[Mention]) -> Vec<EntityId> {
    let set: BTreeSet<EntityId> = mentions.iter().map(|m| m.entity).collect();
    set.into_iter().collect()
}

impl McqaExample {
    pub fn num_candidates(&self) -> usize {
        self.candidates.len()
    }

    pub fn merged_tokens(&self, cand: usize) -> Vec<String> {
        let mut out = vec!["[INT]".to_string()];
        out.extend(self.context.iter().cloned());
        out.push("[SEP]".into());
        out.extend(self.question.iter().cloned());
        out.push("[SEP]".into());
        out.extend(self.candidates[cand].iter().cloned());
        out
    }

    /// Links each text segment separately so no mention straddles a separator.
    pub fn candidate_input(
        &self,
        kg: &KnowledgeGraph,
        vocab: &Vocab,
        cand: usize,
    ) -> CandidateInput {
        let mut ids = vec![INT];
        let mut q_mentions = Vec::new();
        let mut a_mentions = Vec::new();
        let segments: [(&[String], bool); 3] = [
            (&self.context, false),
            (&self.question, false),
            (&self.candidates[cand], true),
        ];
        for (k, (seg, answer_side)) in segments.into_iter().enumerate() {
            if k > 0 {
                ids.push(SEP);
            }
            let offset = ids.len();
            let linked = link_entities(kg, seg).into_iter().map(|m| Mention {
                span: m.span.start + offset..m.span.end + offset,
                entity: m.entity,
            });
            if answer_side {
                a_mentions.extend(linked);
            } else {
                q_mentions.extend(linked);
            }
            ids.extend(vocab.encode(seg));
        }
        let question_entities = distinct(&q_mentions);
        let answer_entities = distinct(&a_mentions);
        q_mentions.extend(a_mentions);
        CandidateInput {
            ids,
            mentions: q_mentions,
            question_entities,
            answer_entities,
        }
    }

    /// Retrieves one subgraph per candidate from the linked mentions.
    pub fn attach_subgraphs(&mut self, kg: &KnowledgeGraph, cfg: RetrievalConfig) -> Result<()> {
        let mut graphs = Vec::with_capacity(self.candidates.len());
        for cand in 0..self.candidates.len() {
            let mut q = link_entities(kg, &self.context);
            q.extend(link_entities(kg, &self.question));
            let a = link_entities(kg, &self.candidates[cand]);
            graphs.push(retrieve_subgraph(kg, &distinct(&q), &distinct(&a), cfg)?);
        }
        self.subgraphs = graphs;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.candidates.is_empty() || self.correct >= self.candidates.len() {
            return Err(Error::Shape(format!(
                "example {}: correct index {} outside {} candidates",
                self.id,
                self.correct,
                self.candidates.len()
            )));
        }
        if self.subgraphs.len() != self.candidates.len() {
            return Err(Error::Shape(format!(
                "example {}: {} subgraphs for {} candidates",
                self.id,
                self.subgraphs.len(),
                self.candidates.len()
            )));
        }
        self.subgraphs.iter().try_for_each(SubGraph::validate)
    }
}

#[derive(Serialize, Deserialize)]
struct NodeJson {
    entity: i64,
    label: u8,
    #[serde(default)]
    relevance: f64,
}

#[derive(Serialize, Deserialize)]
struct SubGraphJson {
    nodes: Vec<NodeJson>,
    edges: Vec<[usize; 3]>,
}

#[derive(Serialize, Deserialize)]
struct ExampleJson {
    id: u64,
    context: String,
    question: String,
    candidates: Vec<String>,
    correct: usize,
    subgraphs: Vec<SubGraphJson>,
}

fn subgraph_to_json(sg: &SubGraph) -> SubGraphJson {
    SubGraphJson {
        nodes: sg
            .nodes
            .iter()
            .map(|n| NodeJson {
                entity: n.entity.map_or(-1, |e| e as i64),
                label: n.label.map_or(0, SourceLabel::code),
                relevance: n.relevance,
            })
            .collect(),
        edges: sg.edges.iter().map(|e| [e.head, e.rel, e.tail]).collect(),
    }
}

fn subgraph_from_json(j: SubGraphJson, kg: &KnowledgeGraph) -> Result<SubGraph> {
    let inter = kg.interaction_relation();
    let mut nodes = Vec::with_capacity(j.nodes.len());
    for (i, n) in j.nodes.into_iter().enumerate() {
        let entity = if n.entity < 0 {
            None
        } else {
            let e = n.entity as usize;
            kg.check_entity(e)?;
            Some(e)
        };
        let label = match n.label {
            0 => None,
            c => Some(
                SourceLabel::from_code(c)
                    .ok_or_else(|| Error::Shape(format!("node {i}: label {c}")))?,
            ),
        };
        nodes.push(SubNode {
            entity,
            label,
            relevance: n.relevance,
        });
    }
    let mut edges = Vec::with_capacity(j.edges.len());
    for [head, rel, tail] in j.edges {
        if rel > inter {
            return Err(Error::IdNotFound {
                kind: "relation",
                id: rel,
            });
        }
        edges.push(SubEdge { head, rel, tail });
    }
    let sg = SubGraph {
        nodes,
        edges,
        interaction_relation: inter,
    };
    sg.validate()?;
    Ok(sg)
}

/// Canonical JSON text of one subgraph; equal graphs give equal bytes.
pub fn subgraph_json(sg: &SubGraph) -> String {
    serde_json::to_string(&subgraph_to_json(sg)).expect("subgraph serializes")
}

pub fn example_to_json(ex: &McqaExample) -> String {
    let j = ExampleJson {
        id: ex.id,
        context: ex.context.join(" "),
        question: ex.question.join(" "),
        candidates: ex.candidates.iter().map(|c| c.join(" ")).collect(),
        correct: ex.correct,
        subgraphs: ex.subgraphs.iter().map(subgraph_to_json).collect(),
    };
    serde_json::to_string(&j).expect("example serializes")
}

fn split_tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

pub fn write_jsonl<W: Write>(w: &mut W, examples: &[McqaExample]) -> Result<()> {
    for ex in examples {
        writeln!(w, "{}", example_to_json(ex))?;
    }
    Ok(())
}

/// Reads one example per non-blank line. Relation and entity ids are checked
/// against `kg`.
pub fn read_jsonl<R: BufRead>(
    reader: R,
    path: &Path,
    kg: &KnowledgeGraph,
) -> Result<Vec<McqaExample>> {
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg,
        };
        let j: ExampleJson = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let subgraphs = j
            .subgraphs
            .into_iter()
            .map(|s| subgraph_from_json(s, kg))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| parse_err(e.to_string()))?;
        let ex = McqaExample {
            id: j.id,
            context: split_tokens(&j.context),
            question: split_tokens(&j.question),
            candidates: j.candidates.iter().map(|c| split_tokens(c)).collect(),
            correct: j.correct,
            subgraphs,
        };
        ex.validate().map_err(|e| parse_err(e.to_string()))?;
        out.push(ex);
    }
    Ok(out)
}

pub fn read_jsonl_file(path: &Path, kg: &KnowledgeGraph) -> Result<Vec<McqaExample>> {
    let f = std::fs::File::open(path)?;
    read_jsonl(std::io::BufReader::new(f), path, kg)
}

pub fn write_jsonl_file(path: &Path, examples: &[McqaExample]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_jsonl(&mut f, examples)?;
    f.flush()?;
    Ok(())
}
