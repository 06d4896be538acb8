//! Seeded space-filling designs on the unit cube.
//!
//! Latin hypercube sampling seeds the initial evaluation batch;
//! a shifted Halton sequence provides the quasi-random restart points
//! for acquisition maximization. Both are deterministic per seed.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` Latin hypercube points in `[0, 1]^dim`.
///
/// Each dimension is split into `n` equal strata; every stratum is hit
/// exactly once at a uniform position, and strata are paired across
/// dimensions by independent shuffles.
pub fn latin_hypercube(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = vec![vec![0.0; dim]; n];
    for d in 0..dim {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(&mut rng);
        for (i, point) in points.iter_mut().enumerate() {
            let u: f64 = rng.gen();
            point[d] = (strata[i] as f64 + u) / n as f64;
        }
    }
    points
}

/// Maps unit-cube coordinates onto `bounds` given as `(lo, hi)` pairs.
pub fn scale_to_bounds(unit: &[f64], bounds: &[(f64, f64)]) -> Vec<f64> {
    unit.iter()
        .zip(bounds)
        .map(|(u, (lo, hi))| lo + u * (hi - lo))
        .collect()
}

const PRIMES: [usize; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

/// The radical-inverse of `index` in the given base.
fn radical_inverse(mut index: usize, base: usize) -> f64 {
    let mut fraction = 1.0;
    let mut result = 0.0;
    while index > 0 {
        fraction /= base as f64;
        result += fraction * (index % base) as f64;
        index /= base;
    }
    result
}

/// `n` points of a randomly shifted Halton sequence in `[0, 1]^dim`.
///
/// The Cranley-Patterson shift (one uniform offset per dimension,
/// wrapped modulo 1) decorrelates runs with different seeds while
/// keeping the low-discrepancy structure. Supports up to 16 dimensions
/// with distinct prime bases; higher dimensions reuse bases.
pub fn shifted_halton(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>()).collect();
    (0..n)
        .map(|i| {
            (0..dim)
                .map(|d| {
                    // Index offset skips the degenerate all-zeros point.
                    let h = radical_inverse(i + 1, PRIMES[d % PRIMES.len()]);
                    (h + shift[d]).fract()
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lhs_hits_every_stratum_once_per_dimension() {
        for seed in [0, 1, 99] {
            let n = 16;
            let points = latin_hypercube(n, 3, seed);
            assert_eq!(points.len(), n);
            for d in 0..3 {
                let mut counts = vec![0usize; n];
                for p in &points {
                    assert!((0.0..1.0).contains(&p[d]));
                    counts[(p[d] * n as f64) as usize] += 1;
                }
                assert!(counts.iter().all(|&c| c == 1), "dim {d} seed {seed}");
            }
        }
    }

    #[test]
    fn lhs_is_deterministic_per_seed() {
        assert_eq!(latin_hypercube(8, 4, 7), latin_hypercube(8, 4, 7));
        assert_ne!(latin_hypercube(8, 4, 7), latin_hypercube(8, 4, 8));
    }

    #[test]
    fn halton_is_deterministic_and_in_range() {
        let a = shifted_halton(64, 5, 3);
        let b = shifted_halton(64, 5, 3);
        assert_eq!(a, b);
        for p in &a {
            for &x in p {
                assert!((0.0..1.0).contains(&x));
            }
        }
        assert_ne!(a, shifted_halton(64, 5, 4));
    }

    #[test]
    fn halton_covers_the_cube_reasonably() {
        // Crude discrepancy check: each half of each dimension gets
        // roughly half the points.
        let points = shifted_halton(128, 2, 11);
        for d in 0..2 {
            let low = points.iter().filter(|p| p[d] < 0.5).count();
            assert!((48..=80).contains(&low), "dim {d}: {low}");
        }
    }

    #[test]
    fn scaling_maps_unit_interval_to_bounds() {
        let scaled = scale_to_bounds(&[0.0, 0.5, 1.0], &[(1.0, 3.0), (-2.0, 2.0), (10.0, 20.0)]);
        assert_eq!(scaled, vec![1.0, 0.0, 20.0]);
    }
}
