use std::collections::HashSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::McqaExample;
use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph, RelationId, RetrievalConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_examples: usize,
    pub n_candidates: usize,
    pub chain_hops: usize,
    pub seed: u64,
    pub retrieval: RetrievalConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_entities: 60,
            n_relations: 6,
            n_examples: 300,
            n_candidates: 4,
            chain_hops: 1,
            seed: 42,
            retrieval: RetrievalConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub kg: KnowledgeGraph,
    pub train: Vec<McqaExample>,
    pub dev: Vec<McqaExample>,
    pub test: Vec<McqaExample>,
}

const RELATION_NAMES: [&str; 12] = [
    "has_part",
    "is_a",
    "located_at",
    "made_of",
    "used_for",
    "causes",
    "part_of",
    "capable_of",
    "desires",
    "related_to",
    "opposite_of",
    "similar_to",
];

const TEMPLATE_WORDS: [&str; 8] = ["recall", "facts", "about", "what", "is", "the", "of", "?"];

const ONSETS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

fn relation_name(i: usize) -> String {
    RELATION_NAMES
        .get(i)
        .map_or_else(|| format!("relation_{i}"), |s| s.to_string())
}

fn surface(rng: &mut ChaCha8Rng) -> String {
    let mut s = String::with_capacity(6);
    for _ in 0..3 {
        s.push(ONSETS[rng.random_range(0..ONSETS.len())] as char);
        s.push(VOWELS[rng.random_range(0..VOWELS.len())] as char);
    }
    s
}

/// Builds a random graph where every entity has exactly one outgoing edge per
/// relation, so following a relation chain from any source ends at a unique
/// entity. Each example asks for that endpoint among `n_candidates` options.
pub fn generate_synthetic_dataset(cfg: &GenConfig) -> Result<SyntheticData> {
    if cfg.n_entities < 4 * cfg.n_candidates {
        return Err(Error::Config(format!(
            "n_entities {} must be at least 4 * n_candidates ({})",
            cfg.n_entities, cfg.n_candidates
        )));
    }
    if cfg.n_relations < 2 || cfg.chain_hops == 0 || cfg.n_candidates < 2 {
        return Err(Error::Config(
            "need n_relations >= 2, chain_hops >= 1, n_candidates >= 2".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let reserved: HashSet<String> = TEMPLATE_WORDS.iter().map(|s| s.to_string()).collect();
    let mut used = HashSet::new();
    let mut surfaces = Vec::with_capacity(cfg.n_entities);
    let mut attempts = 0;
    while surfaces.len() < cfg.n_entities {
        attempts += 1;
        if attempts > 1000 * cfg.n_entities {
            return Err(Error::GenerationFailed(
                "could not draw distinct entity surfaces".into(),
            ));
        }
        let s = surface(&mut rng);
        if !reserved.contains(&s) && used.insert(s.clone()) {
            surfaces.push(s);
        }
    }

    // Register through surfaces in triplet order so ids match a TSV reload.
    let mut kg = KnowledgeGraph::new();
    for s in 0..cfg.n_entities {
        for r in 0..cfg.n_relations {
            let mut t = rng.random_range(0..cfg.n_entities - 1);
            if t >= s {
                t += 1;
            }
            let h = kg.intern_entity(&surfaces[s]);
            let rel = kg.intern_relation(&relation_name(r));
            let tail = kg.intern_entity(&surfaces[t]);
            kg.add_triplet(h, rel, tail)?;
        }
    }

    let follow = |kg: &KnowledgeGraph, mut e: EntityId, chain: &[RelationId]| {
        for &r in chain {
            e = kg
                .out_edges(e)
                .iter()
                .find(|&&(rel, _)| rel == r)
                .map(|&(_, t)| t)
                .expect("one edge per relation");
        }
        e
    };

    let mut seen = HashSet::new();
    let mut examples = Vec::with_capacity(cfg.n_examples);
    let mut attempts = 0;
    while examples.len() < cfg.n_examples {
        attempts += 1;
        if attempts > 50 * cfg.n_examples.max(1) {
            return Err(Error::GenerationFailed(format!(
                "only {} distinct questions found after {} draws",
                examples.len(),
                attempts - 1
            )));
        }
        let source = rng.random_range(0..kg.num_entities());
        let chain: Vec<RelationId> = (0..cfg.chain_hops)
            .map(|_| rng.random_range(0..cfg.n_relations))
            .collect();
        let answer = follow(&kg, source, &chain);
        if answer == source || !seen.insert((source, chain.clone())) {
            continue;
        }
        let pool: Vec<EntityId> = (0..kg.num_entities())
            .filter(|&e| e != answer && e != source)
            .collect();
        let mut candidates: Vec<EntityId> = sample(&mut rng, pool.len(), cfg.n_candidates - 1)
            .into_iter()
            .map(|i| pool[i])
            .collect();
        let correct = rng.random_range(0..cfg.n_candidates);
        candidates.insert(correct, answer);

        let src = kg.surface(source).to_string();
        let context = ["recall", "facts", "about", &src]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut question: Vec<String> = vec!["what".into(), "is".into()];
        for &r in chain.iter().rev() {
            question.extend([
                "the".to_string(),
                kg.relation_name(r).to_string(),
                "of".to_string(),
            ]);
        }
        question.extend([src, "?".to_string()]);
        let mut ex = McqaExample {
            id: examples.len() as u64,
            context,
            question,
            candidates: candidates
                .iter()
                .map(|&e| vec![kg.surface(e).to_string()])
                .collect(),
            correct,
            subgraphs: Vec::new(),
        };
        ex.attach_subgraphs(&kg, cfg.retrieval)?;
        examples.push(ex);
    }

    let n_train = cfg.n_examples * 8 / 10;
    let n_dev = cfg.n_examples / 10;
    let test = examples.split_off(n_train + n_dev);
    let dev = examples.split_off(n_train);
    Ok(SyntheticData {
        kg,
        train: examples,
        dev,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::dataset::write_jsonl;
    use crate::kg::Triplet;

    fn small() -> GenConfig {
        GenConfig {
            n_entities: 20,
            n_relations: 3,
            n_examples: 30,
            ..GenConfig::default()
        }
    }

    #[test]
    fn answers_are_direct_edges() {
        let data = generate_synthetic_dataset(&small()).unwrap();
        for ex in data.train.iter().chain(&data.dev).chain(&data.test) {
            assert_eq!(ex.candidates.len(), 4);
            let src = data.kg.entity_by_surface(&ex.context[3]).unwrap();
            let rel = data.kg.relation_by_name(&ex.question[3]).unwrap();
            assert!(ex.question.contains(&data.kg.surface(src).to_string()));
            let ans = data
                .kg
                .entity_by_surface(&ex.candidates[ex.correct][0])
                .unwrap();
            assert!(data.kg.contains(&Triplet {
                head: src,
                rel,
                tail: ans
            }));
            for (i, c) in ex.candidates.iter().enumerate() {
                let e = data.kg.entity_by_surface(&c[0]).unwrap();
                assert_eq!(
                    i == ex.correct,
                    data.kg.contains(&Triplet {
                        head: src,
                        rel,
                        tail: e
                    })
                );
            }
            ex.validate().unwrap();
        }
    }

    #[test]
    fn splits_are_disjoint_and_sized() {
        let data = generate_synthetic_dataset(&small()).unwrap();
        assert_eq!(
            (data.train.len(), data.dev.len(), data.test.len()),
            (24, 3, 3)
        );
        let mut ids = HashSet::new();
        for ex in data.train.iter().chain(&data.dev).chain(&data.test) {
            assert!(ids.insert(ex.id));
        }
    }

    #[test]
    fn same_seed_gives_identical_jsonl() {
        let cfg = GenConfig { seed: 7, ..small() };
        let dump = |d: &SyntheticData| {
            let mut out = Vec::new();
            write_jsonl(&mut out, &d.train).unwrap();
            write_jsonl(&mut out, &d.test).unwrap();
            d.kg.write_tsv(&mut out).unwrap();
            out
        };
        let a = generate_synthetic_dataset(&cfg).unwrap();
        let b = generate_synthetic_dataset(&cfg).unwrap();
        assert_eq!(dump(&a), dump(&b));
        let c = generate_synthetic_dataset(&GenConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(dump(&a), dump(&c));
    }

    #[test]
    fn impossible_requests_fail() {
        let too_many = GenConfig {
            n_entities: 16,
            n_relations: 2,
            n_examples: 40,
            ..GenConfig::default()
        };
        assert!(matches!(
            generate_synthetic_dataset(&too_many),
            Err(Error::GenerationFailed(_))
        ));
        let too_few = GenConfig {
            n_entities: 10,
            ..GenConfig::default()
        };
        assert!(matches!(
            generate_synthetic_dataset(&too_few),
            Err(Error::Config(_))
        ));
    }
}
