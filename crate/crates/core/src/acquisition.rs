//! Acquisition functions over the fitted surrogate: upper confidence
//! bound for ranking externally proposed candidates, and expected
//! improvement (analytic and Monte Carlo batch) for proposing the
//! surrogate's own next point.
//!
//! Candidate ranking happens on the standardized posterior. The
//! standardization is a fixed positive-affine map, so the induced
//! order is the same as in original units; standardized scores keep
//! traces comparable across circuits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::surrogate::GpModel;

/// Tuning knobs for acquisition optimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionConfig {
    /// Exploration weight of the upper confidence bound.
    pub kappa: f64,
    /// Quasi-random restarts for expected-improvement maximization.
    pub n_restarts: usize,
    /// Refinement rounds per restart.
    pub refine_steps: usize,
    /// Monte Carlo draws for batch expected improvement.
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        AcquisitionConfig {
            kappa: 1.0,
            n_restarts: 16,
            refine_steps: 100,
            mc_samples: 256,
            seed: 0,
        }
    }
}

/// Upper confidence bound `mu + kappa * sigma`.
pub fn ucb(mean: f64, sd: f64, kappa: f64) -> f64 {
    mean + kappa * sd
}

/// Ranks posterior `(mean, sd)` pairs by UCB, best first.
///
/// Returns candidate indices with their scores; equal scores keep
/// input order, so the result is always a permutation of `0..n`.
pub fn rank_by_ucb_stats(stats: &[(f64, f64)], kappa: f64) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> = stats
        .iter()
        .enumerate()
        .map(|(i, (mean, sd))| (i, ucb(*mean, *sd, kappa)))
        .collect();
    ranked.sort_by(|(ia, a), (ib, b)| {
        b.partial_cmp(a)
            .expect("UCB scores are finite")
            .then(ia.cmp(ib))
    });
    ranked
}

/// Ranks candidate points (original coordinates) under the model's
/// standardized posterior UCB, best first.
pub fn rank_by_ucb(model: &GpModel, candidates: &[Vec<f64>], kappa: f64) -> Vec<(usize, f64)> {
    let stats: Vec<(f64, f64)> = candidates
        .iter()
        .map(|x| {
            let p = model.predict_standardized(x);
            (p.mean, p.sd)
        })
        .collect();
    rank_by_ucb_stats(&stats, kappa)
}

/// Analytic expected improvement of a Gaussian `N(mean, sd^2)` over
/// `best`, for maximization. Zero-variance posteriors degrade to the
/// deterministic improvement `max(mean - best, 0)`.
pub fn expected_improvement(mean: f64, sd: f64, best: f64) -> f64 {
    if sd <= 0.0 {
        return (mean - best).max(0.0);
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let z = (mean - best) / sd;
    let ei = (mean - best) * normal.cdf(z) + sd * normal.pdf(z);
    ei.max(0.0)
}

/// Expected improvement of the model posterior at `x` (original
/// coordinates) over the incumbent `best` (original units).
pub fn ei_at(model: &GpModel, x: &[f64], best: f64) -> f64 {
    let p = model.predict(x);
    expected_improvement(p.mean, p.sd, best)
}

/// A proposed point with its acquisition value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    /// Original-coordinate values in the model's dimension order.
    pub x: Vec<f64>,
    pub ei: f64,
}

/// Greedy coordinate refinement of `u` (unit cube) under `score`,
/// probing +/- step per dimension and halving the step on stall.
fn refine_pattern(
    score: &impl Fn(&[f64]) -> f64,
    mut u: Vec<f64>,
    mut value: f64,
    rounds: usize,
) -> (Vec<f64>, f64) {
    let dim = u.len();
    let mut step = 0.25;
    for _ in 0..rounds {
        let mut best_cand: Option<(Vec<f64>, f64)> = None;
        for d in 0..dim {
            for sign in [-1.0, 1.0] {
                let mut cand = u.clone();
                cand[d] = (cand[d] + sign * step).clamp(0.0, 1.0);
                let v = score(&cand);
                if v > best_cand.as_ref().map_or(value, |(_, bv)| *bv) {
                    best_cand = Some((cand, v));
                }
            }
        }
        match best_cand {
            Some((cand, v)) => {
                u = cand;
                value = v;
            }
            None => {
                step *= 0.5;
                if step < 1e-4 {
                    break;
                }
            }
        }
    }
    (u, value)
}

/// Proposes the next point by maximizing expected improvement over the
/// incumbent (the model's best training target).
///
/// Restarts come from a seeded shifted Halton set over the unit cube;
/// each is refined by bounded pattern search. Deterministic for a given
/// model and config; the result always lies inside the model's box and
/// its coordinates are always finite.
pub fn propose_bo_point(model: &GpModel, cfg: &AcquisitionConfig) -> Proposal {
    let dim = model.dim();
    let best = model.best_y();
    let bounds = model.bounds().to_vec();
    let to_orig = |u: &[f64]| -> Vec<f64> {
        u.iter()
            .zip(&bounds)
            .map(|(v, (lo, hi))| lo + v * (hi - lo))
            .collect()
    };
    let score = |u: &[f64]| -> f64 {
        let x = u
            .iter()
            .zip(&bounds)
            .map(|(v, (lo, hi))| lo + v * (hi - lo))
            .collect::<Vec<f64>>();
        ei_at(model, &x, best)
    };

    let starts = crate::sampling::shifted_halton(cfg.n_restarts.max(1), dim, cfg.seed);
    let mut best_u: Option<(Vec<f64>, f64)> = None;
    for u0 in starts {
        let v0 = score(&u0);
        let (u, v) = refine_pattern(&score, u0, v0, cfg.refine_steps);
        // Strictly-greater keeps the earliest restart on ties, making
        // the winner independent of restart evaluation order.
        if best_u.as_ref().map_or(true, |(_, bv)| v > *bv) {
            best_u = Some((u, v));
        }
    }
    let (u, ei) = best_u.expect("at least one restart");
    let x = to_orig(&u);
    debug_assert!(x.iter().all(|v| v.is_finite()));
    Proposal { x, ei }
}

/// Monte Carlo estimate of batch expected improvement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QeiEstimate {
    pub value: f64,
    /// Standard error of the estimate.
    pub se: f64,
    pub samples: usize,
}

/// Batch expected improvement `E[max_i max(f(x_i) - best, 0)]` by Monte
/// Carlo over the joint posterior of the batch.
///
/// Draws are seeded and the estimate is deterministic per config. For a
/// batch of one this converges to [`expected_improvement`]; duplicated
/// batch members add nothing because their draws are perfectly
/// correlated.
pub fn qei_mc(model: &GpModel, batch: &[Vec<f64>], best: f64, cfg: &AcquisitionConfig) -> QeiEstimate {
    assert!(!batch.is_empty(), "batch must hold at least one point");
    let q = batch.len();
    let n = cfg.mc_samples.max(64);

    // Joint standardized posterior of the batch.
    let means: Vec<f64> = batch.iter().map(|x| model.predict_standardized(x).mean).collect();
    let cov = model.posterior_cov_standardized(batch);

    // Cholesky with an escalating ridge: duplicated batch points make
    // the covariance singular by construction.
    let mut l = None;
    let mut ridge = 0.0;
    loop {
        let mut c = cov.clone();
        for i in 0..q {
            c[(i, i)] += ridge;
        }
        if let Some(chol) = nalgebra::Cholesky::new(c) {
            l = Some(chol);
            break;
        }
        ridge = if ridge == 0.0 { 1e-12 } else { ridge * 100.0 };
        if ridge > 1e-4 {
            break;
        }
    }

    let y_mean = model.y_mean();
    let y_scale = model.y_scale();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut z = nalgebra::DVector::zeros(q);
    for _ in 0..n {
        for zi in z.iter_mut() {
            let draw: f64 = StandardNormal.sample(&mut rng);
            *zi = draw;
        }
        let draw_improvement = match &l {
            Some(chol) => {
                let corr = chol.l_dirty();
                let mut best_draw = f64::NEG_INFINITY;
                for i in 0..q {
                    let mut v = means[i];
                    for j in 0..=i {
                        v += corr[(i, j)] * z[j];
                    }
                    best_draw = best_draw.max(v);
                }
                (y_mean + y_scale * best_draw - best).max(0.0)
            }
            // Degenerate covariance beyond repair: treat the batch as
            // deterministic at its means.
            None => {
                let best_mean = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (y_mean + y_scale * best_mean - best).max(0.0)
            }
        };
        sum += draw_improvement;
        sum_sq += draw_improvement * draw_improvement;
    }
    let mean = sum / n as f64;
    let var = (sum_sq / n as f64 - mean * mean).max(0.0);
    QeiEstimate {
        value: mean,
        se: (var / n as f64).sqrt(),
        samples: n,
    }
}
