use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::mask::{check_rate, retain_count, top_k, FixedMask};

/// Exactly `round(d_tar·N·C)` positions, uniform without replacement.
pub fn random_mask<R: Rng>(n: usize, c: usize, d_tar: f64, rng: &mut R) -> Result<FixedMask> {
    check_rate(d_tar)?;
    let k = retain_count(d_tar, n, c);
    if k == 0 {
        return Err(Error::invalid("mask would retain no positions"));
    }
    let mut bits = vec![false; n * c];
    for i in sample(rng, n * c, k) {
        bits[i] = true;
    }
    FixedMask::new(n, c, bits)
}

/// Top-k positions by mean absolute activation `stats[N×C]`.
pub fn magnitude_mask(stats: &[f64], n: usize, c: usize, d_tar: f64) -> Result<FixedMask> {
    check_rate(d_tar)?;
    top_k(stats, n, c, retain_count(d_tar, n, c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn random_mask_rate_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(random_mask(196, 768, 0.05, &mut rng).unwrap().count(), 7526);
        assert_eq!(random_mask(9, 192, 1.0, &mut rng).unwrap().count(), 9 * 192);
    }

    #[test]
    fn random_mask_seeding() {
        let a = random_mask(9, 32, 0.1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = random_mask(9, 32, 0.1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let c = random_mask(9, 32, 0.1, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn magnitude_single_peak() {
        let mut stats = vec![0.5; 12];
        stats[7] = 3.0;
        let m = magnitude_mask(&stats, 3, 4, 1.0 / 12.0).unwrap();
        assert_eq!(m.count(), 1);
        assert!(m.bits()[7]);
    }

    #[test]
    fn magnitude_ties_are_lexicographic() {
        let m = magnitude_mask(&[1.0; 12], 3, 4, 0.5).unwrap();
        assert_eq!(m.bits(), &[true, true, true, true, true, true, false, false, false, false, false, false]);
    }
}
