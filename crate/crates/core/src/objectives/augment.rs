//! Sequence augmentations for contrastive views. Both operate on the real
//! (mask == 1) positions of a left-padded sequence and leave the mask alone.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::PAD;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentKind {
    Mask,
    Reorder,
}

fn real_positions(mask: &[u8]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter(|(_, &m)| m == 1)
        .map(|(i, _)| i)
        .collect()
}

/// Number of positions [`augment_mask`] replaces in a sequence of `len` real
/// tokens.
pub fn mask_count(len: usize, ratio: f64) -> usize {
    if len == 0 {
        return 0;
    }
    ((ratio * len as f64).floor() as usize).min(len - 1)
}

/// Replaces `floor(ratio * L)` uniformly chosen real positions by the mask id,
/// keeping at least one real token.
pub fn augment_mask<R: Rng>(ids: &[usize], mask: &[u8], ratio: f64, rng: &mut R) -> Vec<usize> {
    let real = real_positions(mask);
    let n = mask_count(real.len(), ratio);
    let mut out = ids.to_vec();
    if n == 0 {
        return out;
    }
    for k in index::sample(rng, real.len(), n) {
        out[real[k]] = PAD;
    }
    out
}

/// Shuffles one contiguous window of the real tokens. The window size is
/// uniform in `[2, L]` and its start uniform over valid offsets.
pub fn augment_reorder<R: Rng>(ids: &[usize], mask: &[u8], rng: &mut R) -> Vec<usize> {
    let real = real_positions(mask);
    let mut out = ids.to_vec();
    let len = real.len();
    if len < 2 {
        return out;
    }
    let size = rng.random_range(2..=len);
    let start = rng.random_range(0..=len - size);
    let mut window: Vec<usize> = real[start..start + size].iter().map(|&p| ids[p]).collect();
    window.shuffle(rng);
    for (&p, v) in real[start..start + size].iter().zip(window) {
        out[p] = v;
    }
    out
}

/// Applies `kind` to one sequence.
pub fn augment<R: Rng>(
    kind: AugmentKind,
    ids: &[usize],
    mask: &[u8],
    ratio: f64,
    rng: &mut R,
) -> Vec<usize> {
    match kind {
        AugmentKind::Mask => augment_mask(ids, mask, ratio, rng),
        AugmentKind::Reorder => augment_reorder(ids, mask, rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn full(n: usize) -> (Vec<usize>, Vec<u8>) {
        ((1..=n).collect(), vec![1; n])
    }

    #[test]
    fn zero_ratio_is_identity() {
        let (ids, mask) = full(8);
        let mut r = rng::from_seed(1);
        assert_eq!(augment_mask(&ids, &mask, 0.0, &mut r), ids);
    }

    #[test]
    fn cap_leaves_one_survivor() {
        let (ids, mask) = full(3);
        let out = augment_mask(&ids, &mask, 0.99, &mut rng::from_seed(1));
        assert_eq!(out.iter().filter(|&&x| x == PAD).count(), 2);
    }

    #[test]
    fn padding_is_never_touched() {
        let ids = vec![0, 0, 4, 5, 6];
        let mask = vec![0, 0, 1, 1, 1];
        for s in 0..50 {
            let m = augment_mask(&ids, &mask, 0.5, &mut rng::from_seed(s));
            assert_eq!(&m[..2], &[0, 0]);
            let r = augment_reorder(&ids, &mask, &mut rng::from_seed(s));
            assert_eq!(&r[..2], &[0, 0]);
        }
    }

    #[test]
    fn seeded_mask_replay() {
        let (ids, mask) = full(10);
        let out = augment_mask(&ids, &mask, 0.3, &mut rng::from_seed(7));
        let masked: Vec<usize> = (0..10).filter(|&i| out[i] == PAD).collect();
        assert_eq!(masked.len(), 3);
        let again = augment_mask(&ids, &mask, 0.3, &mut rng::from_seed(7));
        assert_eq!(out, again);
        assert_eq!(masked, FROZEN_MASK_SEED7);
    }

    #[test]
    fn seeded_reorder_replay() {
        let (ids, mask) = full(6);
        let out = augment_reorder(&ids, &mask, &mut rng::from_seed(7));
        assert_eq!(out, augment_reorder(&ids, &mask, &mut rng::from_seed(7)));
        assert_eq!(out, FROZEN_REORDER_SEED7);
    }

    #[test]
    fn length_two_is_original_or_swap() {
        let (ids, mask) = full(2);
        for s in 0..20 {
            let out = augment_reorder(&ids, &mask, &mut rng::from_seed(s));
            assert!(out == vec![1, 2] || out == vec![2, 1]);
        }
        let one = augment_reorder(&[9], &[1], &mut rng::from_seed(0));
        assert_eq!(one, vec![9]);
    }

    const FROZEN_MASK_SEED7: [usize; 3] = [1, 8, 9];
    // the seed-7 draw shuffles its window back into the original order
    const FROZEN_REORDER_SEED7: [usize; 6] = [1, 2, 3, 4, 5, 6];
}
