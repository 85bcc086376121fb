//! Uniform head-or-tail corruption with positive filtering.

use std::collections::HashSet;

use rand::Rng;

use crate::error::{Error, Result};
use crate::kg::{EntityId, Triple};

/// Draws before giving up on finding a corruption outside the positives.
pub const MAX_RETRIES: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Head,
    Tail,
}

/// Corrupts the head or the tail (probability one half each) with an entity
/// drawn uniformly from `candidates`. Draws landing on a known positive are
/// retried; after [`MAX_RETRIES`] draws the last one is kept.
pub fn sample_negative<R: Rng + ?Sized>(
    triple: &Triple,
    candidates: &[EntityId],
    known_positives: &HashSet<Triple>,
    rng: &mut R,
) -> Result<Triple> {
    let side = if rng.random_bool(0.5) {
        Side::Head
    } else {
        Side::Tail
    };
    corrupt(triple, side, candidates, known_positives, rng)
}

/// Like [`sample_negative`] with the corrupted side fixed.
pub fn corrupt<R: Rng + ?Sized>(
    triple: &Triple,
    side: Side,
    candidates: &[EntityId],
    known_positives: &HashSet<Triple>,
    rng: &mut R,
) -> Result<Triple> {
    if candidates.len() < 2 {
        return Err(Error::TooFewEntities(candidates.len()));
    }
    let mut out = *triple;
    for _ in 0..MAX_RETRIES {
        let e = candidates[rng.random_range(0..candidates.len())];
        out = match side {
            Side::Head => Triple::new(e, triple.relation, triple.tail),
            Side::Tail => Triple::new(triple.head, triple.relation, e),
        };
        if !known_positives.contains(&out) {
            break;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forced_head_corruption_picks_only_free_candidate() {
        // candidates {0, 1, 2}; (0,r,1) and (1,r,1) are positives
        let t = Triple::new(0, 0, 1);
        let positives: HashSet<_> = [t, Triple::new(1, 0, 1)].into_iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let neg = corrupt(&t, Side::Head, &[0, 1, 2], &positives, &mut rng).unwrap();
            assert_eq!(neg, Triple::new(2, 0, 1));
        }
    }

    #[test]
    fn positives_are_resampled() {
        let t = Triple::new(0, 0, 1);
        let positives: HashSet<_> = (0..10).map(|e| Triple::new(0, 0, e)).collect();
        let candidates: Vec<_> = (0..11).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let neg = corrupt(&t, Side::Tail, &candidates, &positives, &mut rng).unwrap();
            assert_eq!(neg, Triple::new(0, 0, 10));
        }
    }

    #[test]
    fn gives_up_after_retries() {
        let t = Triple::new(0, 0, 1);
        let positives: HashSet<_> = [Triple::new(0, 0, 0), t].into_iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let neg = corrupt(&t, Side::Tail, &[0, 1], &positives, &mut rng).unwrap();
        assert!(positives.contains(&neg));
    }

    #[test]
    fn too_few_candidates() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = sample_negative(&Triple::new(0, 0, 0), &[0], &HashSet::new(), &mut rng);
        assert!(matches!(err, Err(Error::TooFewEntities(1))));
    }

    #[test]
    fn head_tail_balance() {
        let t = Triple::new(0, 0, 1);
        let candidates: Vec<_> = (0..50).collect();
        let positives: HashSet<_> = [t].into_iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 10_000;
        let mut heads = 0usize;
        for _ in 0..n {
            let neg = sample_negative(&t, &candidates, &positives, &mut rng).unwrap();
            if neg.tail == t.tail && neg.head != t.head {
                heads += 1;
            }
        }
        // tail corruptions that redraw the original tail are impossible here
        // (it would be a positive), so every head-side draw is distinguishable
        let freq = heads as f64 / n as f64;
        assert!((freq - 0.5).abs() <= 0.02, "head frequency {freq}");
    }
}
