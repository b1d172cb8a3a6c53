use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kg::{Mention, SubGraph};

/// `2k` (mention index, subgraph node index) pairs: each positive is
/// followed by its negative.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EntityPairBatch {
    pub pairs: Vec<(usize, usize)>,
    pub labels: Vec<u8>,
}

impl EntityPairBatch {
    pub fn k(&self) -> usize {
        self.labels.len() / 2
    }
}

/// Positives pair a mention with the node holding the same entity; each
/// negative keeps the positive's mention and swaps in a different node.
pub fn sample_entity_pairs(
    mentions: &[Mention],
    sg: &SubGraph,
    k: usize,
    seed: u64,
) -> Result<EntityPairBatch> {
    let entity_nodes: Vec<usize> = (0..sg.nodes.len())
        .filter(|&i| sg.nodes[i].entity.is_some())
        .collect();
    let aligned: Vec<(usize, usize)> = mentions
        .iter()
        .enumerate()
        .filter_map(|(mi, m)| sg.local_index(m.entity).map(|ni| (mi, ni)))
        .collect();
    if aligned.is_empty() || entity_nodes.len() < 2 || k == 0 {
        return Err(Error::NoAlignablePair);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positives: Vec<(usize, usize)> = if aligned.len() >= k {
        sample(&mut rng, aligned.len(), k)
            .into_iter()
            .map(|i| aligned[i])
            .collect()
    } else {
        (0..k)
            .map(|_| aligned[rng.random_range(0..aligned.len())])
            .collect()
    };
    let mut pairs = Vec::with_capacity(2 * k);
    let mut labels = Vec::with_capacity(2 * k);
    for (mi, ni) in positives {
        let others: Vec<usize> = entity_nodes.iter().copied().filter(|&n| n != ni).collect();
        let neg = others[rng.random_range(0..others.len())];
        pairs.extend([(mi, ni), (mi, neg)]);
        labels.extend([1, 0]);
    }
    Ok(EntityPairBatch { pairs, labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{SourceLabel, SubNode};

    fn graph(entities: &[usize]) -> SubGraph {
        let mut sg = SubGraph::interaction_only(9);
        for &e in entities {
            sg.nodes.push(SubNode {
                entity: Some(e),
                label: Some(SourceLabel::Neighbor),
                relevance: 0.0,
            });
        }
        sg
    }

    fn mention(entity: usize, at: usize) -> Mention {
        Mention {
            span: at..at + 1,
            entity,
        }
    }

    #[test]
    fn single_alignment_forces_the_other_node() {
        let sg = graph(&[4, 7]);
        let b = sample_entity_pairs(&[mention(4, 1)], &sg, 1, 3).unwrap();
        // only possible batch: (m0, node of 4) positive, (m0, node of 7) negative
        assert_eq!(b.pairs, vec![(0, 1), (0, 2)]);
        assert_eq!(b.labels, vec![1, 0]);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(
            sample_entity_pairs(&[mention(4, 1)], &graph(&[4]), 1, 0),
            Err(Error::NoAlignablePair)
        ));
        assert!(matches!(
            sample_entity_pairs(&[mention(5, 1)], &graph(&[4, 7]), 1, 0),
            Err(Error::NoAlignablePair)
        ));
    }

    #[test]
    fn resamples_positives_with_replacement() {
        let sg = graph(&[4, 7, 8]);
        let b = sample_entity_pairs(&[mention(4, 1), mention(7, 3)], &sg, 3, 11).unwrap();
        assert_eq!(b.labels.iter().filter(|&&y| y == 1).count(), 3);
        assert_eq!(b.labels.len(), 6);
    }

    proptest::proptest! {
        #[test]
        fn labels_balance_and_match_entities(
            ents in proptest::collection::btree_set(0usize..30, 2..8),
            picks in proptest::collection::vec(0usize..30, 1..6),
            k in 1usize..6,
            seed in 0u64..500,
        ) {
            let ents: Vec<usize> = ents.into_iter().collect();
            let sg = graph(&ents);
            let mentions: Vec<Mention> = picks.iter().enumerate().map(|(i, &e)| mention(e, i + 1)).collect();
            match sample_entity_pairs(&mentions, &sg, k, seed) {
                Err(Error::NoAlignablePair) => {
                    proptest::prop_assert!(picks.iter().all(|p| !ents.contains(p)));
                }
                Err(e) => panic!("{e}"),
                Ok(b) => {
                    proptest::prop_assert_eq!(b.labels.iter().map(|&y| y as usize).sum::<usize>(), k);
                    proptest::prop_assert_eq!(b.pairs.len(), 2 * k);
                    for (&(mi, ni), &y) in b.pairs.iter().zip(&b.labels) {
                        let same = sg.nodes[ni].entity == Some(mentions[mi].entity);
                        proptest::prop_assert_eq!(same, y == 1);
                    }
                }
            }
        }
    }
}
