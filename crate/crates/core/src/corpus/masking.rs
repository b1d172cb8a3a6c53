use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::vocab::{is_special, MASK};
use crate::error::{Error, Result};

pub const MASK_RATE: f64 = 0.15;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedBatch {
    pub input: Vec<usize>,
    /// Ascending, distinct.
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
}

pub fn mask_count(maskable: usize) -> usize {
    ((MASK_RATE * maskable as f64).round() as usize).max(1)
}

/// Replaces a uniformly drawn 15% (at least one) of the non-reserved tokens
/// with `[MASK]`.
pub fn mask_tokens(ids: &[usize], seed: u64) -> Result<MaskedBatch> {
    let maskable: Vec<usize> = (0..ids.len()).filter(|&i| !is_special(ids[i])).collect();
    if maskable.is_empty() {
        return Err(Error::NothingToMask);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions: Vec<usize> = sample(&mut rng, maskable.len(), mask_count(maskable.len()))
        .into_iter()
        .map(|i| maskable[i])
        .collect();
    positions.sort_unstable();
    let mut input = ids.to_vec();
    let targets = positions
        .iter()
        .map(|&p| std::mem::replace(&mut input[p], MASK))
        .collect();
    Ok(MaskedBatch {
        input,
        positions,
        targets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::vocab::{INT, NUM_SPECIAL, PAD, SEP};

    #[test]
    fn counts_follow_rate_with_floor() {
        let ids: Vec<usize> = (0..20).map(|i| NUM_SPECIAL + i).collect();
        assert_eq!(mask_tokens(&ids, 1).unwrap().positions.len(), 3);
        assert_eq!(mask_tokens(&[INT, 9, SEP], 1).unwrap().positions, vec![1]);
        assert!(matches!(
            mask_tokens(&[INT, SEP, PAD], 1),
            Err(Error::NothingToMask)
        ));
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let ids: Vec<usize> = (0..30).map(|i| NUM_SPECIAL + i % 7).collect();
        assert_eq!(
            mask_tokens(&ids, 99).unwrap(),
            mask_tokens(&ids, 99).unwrap()
        );
    }

    #[test]
    fn forty_tokens_always_mask_six() {
        let mut ids = vec![INT];
        ids.extend((0..40).map(|i| NUM_SPECIAL + i));
        ids.push(SEP);
        for seed in 0..1000 {
            let b = mask_tokens(&ids, seed).unwrap();
            assert_eq!(b.positions.len(), 6);
        }
    }

    proptest::proptest! {
        #[test]
        fn masks_only_regular_tokens(ids in proptest::collection::vec(0usize..12, 1..40), seed in 0u64..1000) {
            match mask_tokens(&ids, seed) {
                Err(Error::NothingToMask) => proptest::prop_assert!(ids.iter().all(|&i| is_special(i))),
                Err(e) => panic!("{e}"),
                Ok(b) => {
                    let maskable = ids.iter().filter(|&&i| !is_special(i)).count();
                    proptest::prop_assert_eq!(b.positions.len(), mask_count(maskable));
                    proptest::prop_assert!(b.positions.windows(2).all(|w| w[0] < w[1]));
                    for (&p, &t) in b.positions.iter().zip(&b.targets) {
                        proptest::prop_assert!(!is_special(ids[p]));
                        proptest::prop_assert_eq!(t, ids[p]);
                        proptest::prop_assert_eq!(b.input[p], MASK);
                    }
                    let changed = (0..ids.len()).filter(|&i| ids[i] != b.input[i]).count();
                    proptest::prop_assert_eq!(changed, b.positions.len());
                }
            }
        }
    }
}
