//! Read-only analyses of a model: text/graph entity agreement, a joint PCA
//! of both modalities, interaction-node attention and accuracy.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::encoder::{interaction_attention, pool_text_entities};
use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph, SourceLabel, INTERACTION_NODE};
use crate::numerics::{pca_project, pearson_r, Graph, Tensor};
use crate::objectives::predict;
use crate::trainer::{candidate_graph, score_candidates, Model, Prepared, TrainConfig};

/// Text-side and graph-side representation of one entity mentioned in an
/// input and present in its subgraph.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedPair {
    pub entity: EntityId,
    pub text: Vec<f64>,
    pub graph: Vec<f64>,
}

/// Encodes every candidate of `examples` and collects the aligned pairs
/// from the final text and node rows.
pub fn collect_aligned_pairs(model: &Model, examples: &[Prepared]) -> Result<Vec<AlignedPair>> {
    let mut out = Vec::new();
    for p in examples {
        for (c, input) in p.inputs.iter().enumerate() {
            let sg = &p.example.subgraphs[c];
            let mut g = Graph::new(&model.params);
            let enc = model.encoder.encode(&mut g, &input.ids, sg)?;
            let aligned: Vec<(usize, usize)> = input
                .mentions
                .iter()
                .enumerate()
                .filter_map(|(i, m)| sg.local_index(m.entity).map(|n| (i, n)))
                .collect();
            if aligned.is_empty() {
                continue;
            }
            let pooled = pool_text_entities(&mut g, enc.h, &input.mentions)?;
            let (pooled, nodes) = (g.value(pooled), g.value(enc.e));
            for (mi, ni) in aligned {
                out.push(AlignedPair {
                    entity: input.mentions[mi].entity,
                    text: pooled.row(mi).to_vec(),
                    graph: nodes.row(ni).to_vec(),
                });
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlignmentReport {
    /// Common width the two sides were truncated to.
    pub width: usize,
    pub same_mean: f64,
    pub same_std: f64,
    pub same_count: usize,
    pub mismatched_mean: f64,
    pub mismatched_std: f64,
    pub mismatched_count: usize,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Pearson r between the two sides of each aligned pair, against one
/// mismatched pair per aligned pair: the same text row with the graph row of
/// a uniformly drawn pair about a different entity.
pub fn alignment_from_pairs(pairs: &[AlignedPair], seed: u64) -> Result<AlignmentReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyReport("no aligned entities".into()));
    }
    let width = pairs
        .iter()
        .map(|p| p.text.len().min(p.graph.len()))
        .min()
        .unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut same = Vec::with_capacity(pairs.len());
    let mut mismatched = Vec::with_capacity(pairs.len());
    for p in pairs {
        same.push(pearson_r(&p.text[..width], &p.graph[..width])?);
        let others: Vec<&AlignedPair> = pairs.iter().filter(|o| o.entity != p.entity).collect();
        if others.is_empty() {
            continue;
        }
        let o = others[rng.random_range(0..others.len())];
        mismatched.push(pearson_r(&p.text[..width], &o.graph[..width])?);
    }
    if mismatched.is_empty() {
        return Err(Error::EmptyReport(
            "every aligned pair is about the same entity".into(),
        ));
    }
    let (same_mean, same_std) = mean_std(&same);
    let (mismatched_mean, mismatched_std) = mean_std(&mismatched);
    Ok(AlignmentReport {
        width,
        same_mean,
        same_std,
        same_count: same.len(),
        mismatched_mean,
        mismatched_std,
        mismatched_count: mismatched.len(),
    })
}

pub fn entity_alignment_correlation(
    model: &Model,
    examples: &[Prepared],
    seed: u64,
) -> Result<AlignmentReport> {
    alignment_from_pairs(&collect_aligned_pairs(model, examples)?, seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Modality {
    Text,
    Graph,
}

impl Modality {
    pub fn tag(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Graph => "graph",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModalityPca {
    pub width: usize,
    pub points: Vec<(Modality, f64, f64)>,
}

impl ModalityPca {
    fn centroid(&self, m: Modality) -> (f64, f64) {
        let pts: Vec<_> = self.points.iter().filter(|p| p.0 == m).collect();
        let n = pts.len().max(1) as f64;
        (
            pts.iter().map(|p| p.1).sum::<f64>() / n,
            pts.iter().map(|p| p.2).sum::<f64>() / n,
        )
    }

    /// Euclidean distance between the text and graph centroids.
    pub fn centroid_distance(&self) -> f64 {
        let (a, b) = (
            self.centroid(Modality::Text),
            self.centroid(Modality::Graph),
        );
        ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!("# width={}\nmodality\tx\ty\n", self.width);
        for (m, x, y) in &self.points {
            writeln!(s, "{}\t{x}\t{y}", m.tag()).expect("write to string");
        }
        s
    }
}

/// Two-component PCA over all text rows followed by all graph rows,
/// truncated to their common width.
pub fn pca_from_pairs(pairs: &[AlignedPair]) -> Result<ModalityPca> {
    let distinct: std::collections::BTreeSet<EntityId> = pairs.iter().map(|p| p.entity).collect();
    if distinct.len() < 3 {
        return Err(Error::DegenerateInput(format!(
            "PCA needs at least 3 entities, got {}",
            distinct.len()
        )));
    }
    let width = pairs
        .iter()
        .map(|p| p.text.len().min(p.graph.len()))
        .min()
        .unwrap_or(0);
    let rows: Vec<Vec<f64>> = pairs
        .iter()
        .map(|p| p.text[..width].to_vec())
        .chain(pairs.iter().map(|p| p.graph[..width].to_vec()))
        .collect();
    let pca = pca_project(&Tensor::from_rows(&rows), 2)?;
    let points = (0..rows.len())
        .map(|i| {
            let m = if i < pairs.len() {
                Modality::Text
            } else {
                Modality::Graph
            };
            (m, pca.projected.get(i, 0), pca.projected.get(i, 1))
        })
        .collect();
    Ok(ModalityPca { width, points })
}

pub fn modality_pca(model: &Model, examples: &[Prepared]) -> Result<ModalityPca> {
    pca_from_pairs(&collect_aligned_pairs(model, examples)?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CandidateAttention {
    pub candidate: usize,
    /// (entity surface, weight), heaviest first.
    pub weights: Vec<(String, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionReport {
    pub example: u64,
    pub candidates: Vec<CandidateAttention>,
}

/// Last fusion layer's attention from entity nodes into the interaction
/// node, per candidate. Injected irrelevant nodes are left out.
pub fn attention_report(
    model: &Model,
    kg: &KnowledgeGraph,
    p: &Prepared,
    cfg: &TrainConfig,
) -> Result<AttentionReport> {
    let mut candidates = Vec::with_capacity(p.inputs.len());
    for (c, input) in p.inputs.iter().enumerate() {
        let sg = candidate_graph(kg, p, c, cfg, cfg.eval_inject_irrelevant, 0)?;
        let mut g = Graph::new(&model.params);
        let enc = model.encoder.encode(&mut g, &input.ids, &sg)?;
        let mut weights: Vec<(String, f64)> = interaction_attention(&g, &enc, &sg)
            .into_iter()
            .filter(|&(n, _)| {
                n != INTERACTION_NODE && sg.nodes[n].label != Some(SourceLabel::Irrelevant)
            })
            .filter_map(|(n, w)| sg.nodes[n].entity.map(|e| (kg.surface(e).to_string(), w)))
            .collect();
        weights.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        candidates.push(CandidateAttention {
            candidate: c,
            weights,
        });
    }
    Ok(AttentionReport {
        example: p.example.id,
        candidates,
    })
}

/// Fraction of `(candidate scores, correct index)` rows whose top score is
/// the correct one. No rows score 0.
pub fn accuracy_from_scores(rows: &[(Vec<f64>, usize)]) -> Result<f64> {
    if rows.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for (scores, gold) in rows {
        correct += (predict(scores)? == *gold) as usize;
    }
    Ok(correct as f64 / rows.len() as f64)
}

/// Fraction of examples whose top-scoring candidate is the labelled one.
pub fn evaluate_accuracy(
    model: &Model,
    kg: &KnowledgeGraph,
    examples: &[Prepared],
    cfg: &TrainConfig,
) -> Result<f64> {
    let rows = examples
        .iter()
        .map(|p| Ok((score_candidates(model, kg, p, cfg)?, p.example.correct)))
        .collect::<Result<Vec<_>>>()?;
    accuracy_from_scores(&rows)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::corpus::{generate_synthetic_dataset, GenConfig};
    use crate::kg::{SubEdge, SubGraph, SubNode};
    use crate::trainer::{ModelShape, TaskData};

    fn setup(seed: u64) -> (TaskData, Model, TrainConfig) {
        let gen = GenConfig {
            n_entities: 16,
            n_relations: 2,
            n_examples: 20,
            n_candidates: 4,
            seed,
            ..GenConfig::default()
        };
        let d = generate_synthetic_dataset(&gen).unwrap();
        let data = TaskData::new(d.kg, &d.train, &d.dev, &d.test).unwrap();
        let cfg = TrainConfig {
            model: ModelShape {
                d_l: 8,
                d_g: 8,
                ff_width: 8,
                ..ModelShape::default()
            },
            ..TrainConfig::default()
        };
        let model = Model::init(data.encoder_config(&cfg.model), cfg.model.ka_init, seed).unwrap();
        (data, model, cfg)
    }

    /// Interaction node wired both ways to each of `entities`.
    fn star(kg: &KnowledgeGraph, entities: &[EntityId]) -> SubGraph {
        let int = kg.interaction_relation();
        let mut sg = SubGraph::interaction_only(int);
        for (i, &e) in entities.iter().enumerate() {
            sg.nodes.push(SubNode {
                entity: Some(e),
                label: Some(SourceLabel::Neighbor),
                relevance: 0.0,
            });
            sg.edges.push(SubEdge {
                head: 0,
                rel: int,
                tail: i + 1,
            });
            sg.edges.push(SubEdge {
                head: i + 1,
                rel: int,
                tail: 0,
            });
        }
        sg
    }

    fn with_graphs(p: &Prepared, sg: &SubGraph) -> Prepared {
        let mut q = p.clone();
        for s in &mut q.example.subgraphs {
            *s = sg.clone();
        }
        q
    }

    #[test]
    fn singleton_subgraph_gets_all_attention() {
        let (data, model, cfg) = setup(1);
        let p = with_graphs(&data.test[0], &star(&data.kg, &[3]));
        let r = attention_report(&model, &data.kg, &p, &cfg).unwrap();
        assert_eq!(r.candidates.len(), 4);
        for c in &r.candidates {
            assert_eq!(c.weights.len(), 1);
            assert_eq!(c.weights[0].0, data.kg.surface(3));
            assert!((c.weights[0].1 - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_ranking_matches_buffer_readback() {
        let (data, model, cfg) = setup(2);
        let sg = star(&data.kg, &[2, 5, 7]);
        let p = with_graphs(&data.test[0], &sg);
        let r = attention_report(&model, &data.kg, &p, &cfg).unwrap();
        let mut g = Graph::new(&model.params);
        let enc = model.encoder.encode(&mut g, &p.inputs[1].ids, &sg).unwrap();
        let attn = enc.gat.last().unwrap().unwrap();
        let group = g.attention_group(attn, INTERACTION_NODE).unwrap().to_vec();
        let weights = g.attention_weights(attn, INTERACTION_NODE).unwrap();
        let mut direct: Vec<(String, f64)> = group
            .iter()
            .zip(weights)
            .map(|(&edge, w)| {
                (
                    data.kg
                        .surface(sg.nodes[sg.edges[edge].head].entity.unwrap())
                        .to_string(),
                    w,
                )
            })
            .collect();
        direct.sort_by(|a, b| b.1.total_cmp(&a.1));
        assert_eq!(r.candidates[1].weights, direct);
        let total: f64 = direct.iter().map(|x| x.1).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn injected_nodes_are_left_out_of_attention() {
        let (data, model, mut cfg) = setup(3);
        cfg.eval_inject_irrelevant = true;
        let p = &data.test[0];
        let r = attention_report(&model, &data.kg, p, &cfg).unwrap();
        for (c, cand) in r.candidates.iter().enumerate() {
            let total: f64 = cand.weights.iter().map(|x| x.1).sum();
            assert!(total <= 1.0 + 1e-12 && total > 0.0);
            assert!(cand.weights.iter().all(|w| (0.0..=1.0).contains(&w.1)));
            let linked = p.example.subgraphs[c]
                .nodes
                .iter()
                .filter(|n| {
                    matches!(
                        n.label,
                        Some(SourceLabel::QuestionLinked | SourceLabel::AnswerLinked)
                    )
                })
                .count();
            assert_eq!(cand.weights.len(), linked);
            assert!(cand.weights.windows(2).all(|w| w[0].1 >= w[1].1));
        }
    }

    #[test]
    fn accuracy_is_candidate_order_invariant() {
        let (data, model, cfg) = setup(4);
        let base = evaluate_accuracy(&model, &data.kg, &data.train, &cfg).unwrap();
        let rotated: Vec<Prepared> = data
            .train
            .iter()
            .map(|p| {
                let mut q = p.clone();
                q.example.candidates.rotate_left(1);
                q.example.subgraphs.rotate_left(1);
                q.inputs.rotate_left(1);
                q.example.correct = (p.example.correct + 3) % 4;
                q
            })
            .collect();
        assert_eq!(
            evaluate_accuracy(&model, &data.kg, &rotated, &cfg).unwrap(),
            base
        );
    }

    #[test]
    fn untrained_alignment_report_is_well_formed() {
        let (data, model, _) = setup(5);
        let r = entity_alignment_correlation(&model, &data.train, 0).unwrap();
        assert_eq!(r.width, 8);
        assert!(r.same_count > 0 && r.mismatched_count > 0);
        assert!((-1.0..=1.0).contains(&r.same_mean) && (-1.0..=1.0).contains(&r.mismatched_mean));
        assert_eq!(
            r,
            entity_alignment_correlation(&model, &data.train, 0).unwrap()
        );
    }

    #[test]
    fn oracle_and_chance_accuracy() {
        let rows: Vec<(Vec<f64>, usize)> = (0..50)
            .map(|i| ((0..4).map(|c| (c == i % 4) as u8 as f64).collect(), i % 4))
            .collect();
        assert_eq!(accuracy_from_scores(&rows).unwrap(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<(Vec<f64>, usize)> = (0..4000)
            .map(|_| {
                (
                    (0..4).map(|_| rng.random::<f64>()).collect(),
                    rng.random_range(0..4),
                )
            })
            .collect();
        let acc = accuracy_from_scores(&rows).unwrap();
        assert!((acc - 0.25).abs() < 0.03, "{acc}");
    }

    proptest! {
        #[test]
        fn accuracy_ignores_candidate_order(
            rows in prop::collection::vec((prop::collection::vec(-5.0f64..5.0, 4), 0usize..4, 0usize..4), 1..30)
        ) {
            let plain: Vec<(Vec<f64>, usize)> = rows.iter().map(|(s, g, _)| (s.clone(), *g)).collect();
            let turned: Vec<(Vec<f64>, usize)> = rows
                .iter()
                .map(|(s, g, k)| {
                    let mut s = s.clone();
                    s.rotate_left(*k);
                    (s, (g + 4 - k) % 4)
                })
                .collect();
            let a = accuracy_from_scores(&plain).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert_eq!(a, accuracy_from_scores(&turned).unwrap());
        }
    }

    fn pair(entity: EntityId, text: Vec<f64>, graph: Vec<f64>) -> AlignedPair {
        AlignedPair {
            entity,
            text,
            graph,
        }
    }

    #[test]
    fn identical_sides_correlate_perfectly() {
        let pairs: Vec<AlignedPair> = (0..5)
            .map(|e| {
                let v: Vec<f64> = (0..6).map(|i| ((e * 7 + i * 3) % 11) as f64).collect();
                pair(e, v.clone(), v)
            })
            .collect();
        let r = alignment_from_pairs(&pairs, 1).unwrap();
        assert!((r.same_mean - 1.0).abs() < 1e-12);
        assert!(r.same_std < 1e-12);
        assert_eq!(r.same_count, 5);
        assert_eq!(r.mismatched_count, 5);
        assert!(r.mismatched_mean < 1.0);
    }

    #[test]
    fn alignment_truncates_to_common_width() {
        // graph side is the text side's first three values plus noise past the cut
        let pairs = vec![
            pair(0, vec![1.0, 2.0, 4.0, 0.0], vec![1.0, 2.0, 4.0]),
            pair(1, vec![3.0, 1.0, 0.0, 9.0], vec![3.0, 1.0, 0.0]),
        ];
        let r = alignment_from_pairs(&pairs, 0).unwrap();
        assert_eq!(r.width, 3);
        assert!((r.same_mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_and_single_entity_reports_fail() {
        assert!(matches!(
            alignment_from_pairs(&[], 0),
            Err(Error::EmptyReport(_))
        ));
        let one = vec![pair(3, vec![1.0, 2.0, 3.0], vec![3.0, 1.0, 2.0])];
        assert!(matches!(
            alignment_from_pairs(&one, 0),
            Err(Error::EmptyReport(_))
        ));
    }

    #[test]
    fn pca_row_count_and_determinism() {
        let pairs: Vec<AlignedPair> = (0..6)
            .map(|e| {
                let t: Vec<f64> = (0..4).map(|i| ((e * 5 + i * 2) % 7) as f64).collect();
                let g: Vec<f64> = t.iter().map(|x| x * 0.5 + 3.0).collect();
                pair(e, t, g)
            })
            .collect();
        let a = pca_from_pairs(&pairs).unwrap();
        let b = pca_from_pairs(&pairs).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.points.len(), 12);
        assert_eq!(a.points.iter().filter(|p| p.0 == Modality::Text).count(), 6);
        assert!(a.to_tsv().lines().count() == 14);
    }

    #[test]
    fn pca_centroid_distance_tracks_offset() {
        // graph rows are the text rows shifted by a constant vector orthogonal
        // to the within-cloud spread; both directions survive two components
        // so the centroid gap is the shift's length
        let shift = [6.0, -6.0, 6.0];
        let pairs: Vec<AlignedPair> = (0..4)
            .map(|e| {
                let t = vec![e as f64 * 0.1, e as f64 * 0.1, 0.0];
                let g = t.iter().zip(shift).map(|(x, s)| x + s).collect();
                pair(e, t, g)
            })
            .collect();
        let pca = pca_from_pairs(&pairs).unwrap();
        let norm = shift.iter().map(|s| s * s).sum::<f64>().sqrt();
        assert!(
            (pca.centroid_distance() - norm).abs() < 1e-9,
            "{}",
            pca.centroid_distance()
        );
    }

    #[test]
    fn pca_needs_three_entities() {
        let pairs = vec![
            pair(0, vec![1.0, 0.0], vec![0.0, 1.0]),
            pair(1, vec![2.0, 1.0], vec![1.0, 3.0]),
        ];
        assert!(matches!(
            pca_from_pairs(&pairs),
            Err(Error::DegenerateInput(_))
        ));
    }
}
