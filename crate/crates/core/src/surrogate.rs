//! Gaussian-process regression over the design box.
//!
//! Inputs are normalized to the unit cube and targets standardized to
//! zero mean and unit variance before fitting, so kernel lengthscales
//! are comparable across problems. The kernel is squared-exponential
//! with one lengthscale per dimension (automatic relevance
//! determination) plus observation noise:
//!
//! ```text
//! k(x, x') = sf2 * exp(-1/2 * sum_d ((x_d - x'_d) / ls_d)^2) + sn2 * [x == x']
//! ```
//!
//! Hyperparameters are chosen by maximizing the log marginal likelihood
//! from several seeded starting points, each refined by a projected
//! L-BFGS ascent in log-parameter space with analytic gradients.
//! Factorizations go through Cholesky with an escalating jitter ladder;
//! posterior variance excludes observation noise.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Observation-noise variance is never allowed below this floor; it
/// doubles as the first rung of the jitter ladder.
pub const NOISE_FLOOR: f64 = 1e-8;

/// Last rung of the jitter ladder; factorization failures beyond this
/// point are reported instead of papered over.
pub const MAX_JITTER: f64 = 1e-4;

/// RBF kernel hyperparameters. All values are strictly positive and the
/// noise variance respects [`NOISE_FLOOR`]. Lengthscales are expressed
/// in unit-cube coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    lengthscales: Vec<f64>,
    signal_variance: f64,
    noise_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GpError {
    #[error("kernel parameters must be positive and finite")]
    BadParams,
    #[error("need at least {needed} training points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("training data contains non-finite values")]
    NonFiniteInput,
    #[error("Cholesky factorization failed even with jitter {max_jitter}")]
    CholeskyFailure { max_jitter: f64 },
    #[error("point dimension {got} does not match model dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

impl KernelParams {
    pub fn new(
        lengthscales: Vec<f64>,
        signal_variance: f64,
        noise_variance: f64,
    ) -> Result<Self, GpError> {
        let ok = !lengthscales.is_empty()
            && lengthscales.iter().all(|l| l.is_finite() && *l > 0.0)
            && signal_variance.is_finite()
            && signal_variance > 0.0
            && noise_variance.is_finite()
            && noise_variance >= NOISE_FLOOR;
        if ok {
            Ok(KernelParams {
                lengthscales,
                signal_variance,
                noise_variance,
            })
        } else {
            Err(GpError::BadParams)
        }
    }

    /// Isotropic unit parameters: all lengthscales 1, unit signal
    /// variance, and the given noise variance.
    pub fn unit(dim: usize, noise_variance: f64) -> Self {
        KernelParams::new(vec![1.0; dim], 1.0, noise_variance.max(NOISE_FLOOR))
            .expect("unit parameters are valid")
    }

    pub fn lengthscales(&self) -> &[f64] {
        &self.lengthscales
    }

    pub fn signal_variance(&self) -> f64 {
        self.signal_variance
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    /// Noiseless kernel value between two points in unit coordinates.
    fn k(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut dist2 = 0.0;
        for d in 0..self.dim() {
            let z = (a[d] - b[d]) / self.lengthscales[d];
            dist2 += z * z;
        }
        self.signal_variance * (-0.5 * dist2).exp()
    }
}

/// Noiseless kernel matrix over rows of `xs` (unit coordinates).
fn kernel_matrix(xs: &[Vec<f64>], params: &KernelParams) -> DMatrix<f64> {
    let n = xs.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = params.k(&xs[i], &xs[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Cholesky of `K_f + (noise + jitter) I`, escalating jitter by factors
/// of 10 from [`NOISE_FLOOR`] to [`MAX_JITTER`] until the factorization
/// succeeds. Returns the factor and the jitter that was needed (0 when
/// none was).
fn chol_with_jitter(
    k_f: &DMatrix<f64>,
    noise: f64,
) -> Result<(nalgebra::Cholesky<f64, nalgebra::Dyn>, f64), GpError> {
    let n = k_f.nrows();
    let mut jitter = 0.0;
    loop {
        let mut k = k_f.clone();
        for i in 0..n {
            k[(i, i)] += noise + jitter;
        }
        if let Some(chol) = nalgebra::Cholesky::new(k) {
            return Ok((chol, jitter));
        }
        jitter = if jitter == 0.0 {
            NOISE_FLOOR
        } else {
            jitter * 10.0
        };
        if jitter > MAX_JITTER {
            return Err(GpError::CholeskyFailure {
                max_jitter: MAX_JITTER,
            });
        }
    }
}

/// Log marginal likelihood of targets `ys` at inputs `xs_unit` (unit
/// coordinates, no further standardization applied) under `params`:
///
/// ```text
/// -1/2 y' K^-1 y - 1/2 log|K| - n/2 log(2 pi)
/// ```
pub fn log_marginal_likelihood(
    xs_unit: &[Vec<f64>],
    ys: &[f64],
    params: &KernelParams,
) -> Result<f64, GpError> {
    assert_eq!(xs_unit.len(), ys.len(), "point and target counts differ");
    let k_f = kernel_matrix(xs_unit, params);
    let (chol, _) = chol_with_jitter(&k_f, params.noise_variance)?;
    let y = DVector::from_column_slice(ys);
    let alpha = chol.solve(&y);
    let n = ys.len() as f64;
    let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
    Ok(-0.5 * y.dot(&alpha) - 0.5 * log_det - 0.5 * n * (2.0 * std::f64::consts::PI).ln())
}

/// LML and its gradient with respect to the log-parameters
/// `[log ls_1 .. log ls_d, log sf2, log sn2]`.
fn lml_and_grad(
    xs_unit: &[Vec<f64>],
    y: &DVector<f64>,
    params: &KernelParams,
) -> Result<(f64, Vec<f64>), GpError> {
    let n = xs_unit.len();
    let d = params.dim();
    let k_f = kernel_matrix(xs_unit, params);
    let (chol, _) = chol_with_jitter(&k_f, params.noise_variance)?;
    let alpha = chol.solve(y);
    let log_det: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
    let lml = -0.5 * y.dot(&alpha)
        - 0.5 * log_det
        - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();

    // A = alpha alpha' - K^-1; dLML/dtheta = 1/2 tr(A dK/dtheta).
    let k_inv = chol.inverse();
    let mut grad = vec![0.0; d + 2];
    for dd in 0..d {
        let ls = params.lengthscales[dd];
        let mut tr = 0.0;
        for i in 0..n {
            for j in 0..n {
                let a_ij = alpha[i] * alpha[j] - k_inv[(i, j)];
                let diff = (xs_unit[i][dd] - xs_unit[j][dd]) / ls;
                tr += a_ij * k_f[(i, j)] * diff * diff;
            }
        }
        grad[dd] = 0.5 * tr;
    }
    let mut tr_sf = 0.0;
    let mut tr_sn = 0.0;
    for i in 0..n {
        for j in 0..n {
            let a_ij = alpha[i] * alpha[j] - k_inv[(i, j)];
            tr_sf += a_ij * k_f[(i, j)];
            if i == j {
                tr_sn += a_ij;
            }
        }
    }
    grad[d] = 0.5 * tr_sf;
    grad[d + 1] = 0.5 * tr_sn * params.noise_variance;
    Ok((lml, grad))
}

/// Search box for the log-parameters during refinement.
const LOG_LS_RANGE: (f64, f64) = (-6.9077552789821368, 4.6051701859880918); // [1e-3, 1e2]
const LOG_SF_RANGE: (f64, f64) = (-18.420680743952367, 9.2103403719761836); // [1e-8, 1e4]
const LOG_SN_RANGE: (f64, f64) = (-18.420680743952367, 4.6051701859880918); // [1e-8, 1e2]

fn clamp_theta(theta: &mut [f64]) {
    let d = theta.len() - 2;
    for t in theta.iter_mut().take(d) {
        *t = t.clamp(LOG_LS_RANGE.0, LOG_LS_RANGE.1);
    }
    theta[d] = theta[d].clamp(LOG_SF_RANGE.0, LOG_SF_RANGE.1);
    theta[d + 1] = theta[d + 1].clamp(LOG_SN_RANGE.0, LOG_SN_RANGE.1);
}

fn theta_to_params(theta: &[f64]) -> KernelParams {
    let d = theta.len() - 2;
    KernelParams {
        lengthscales: theta[..d].iter().map(|t| t.exp()).collect(),
        signal_variance: theta[d].exp(),
        noise_variance: theta[d + 1].exp().max(NOISE_FLOOR),
    }
}

fn params_to_theta(params: &KernelParams) -> Vec<f64> {
    let mut theta: Vec<f64> = params.lengthscales.iter().map(|l| l.ln()).collect();
    theta.push(params.signal_variance.ln());
    theta.push(params.noise_variance.ln());
    theta
}

/// Maximizes the LML from `theta0` by projected L-BFGS with Armijo
/// backtracking. Returns the best parameters and LML seen; never worse
/// than the starting point. Factorization failures during the search
/// count as negative infinity, so the search backs away from them.
fn refine_lbfgs(
    xs_unit: &[Vec<f64>],
    y: &DVector<f64>,
    theta0: Vec<f64>,
    max_iters: usize,
) -> (KernelParams, f64) {
    const MEMORY: usize = 5;
    const ARMIJO_C1: f64 = 1e-4;
    const GRAD_TOL: f64 = 1e-5;

    let eval = |theta: &[f64]| -> Option<(f64, Vec<f64>)> {
        lml_and_grad(xs_unit, y, &theta_to_params(theta)).ok()
    };

    let mut theta = theta0;
    clamp_theta(&mut theta);
    let Some((mut lml, mut grad)) = eval(&theta) else {
        // Unusable start; report it as-is with a floor value so the
        // multistart dismisses it unless every start is unusable.
        return (theta_to_params(&theta), f64::NEG_INFINITY);
    };
    let mut best_theta = theta.clone();
    let mut best_lml = lml;

    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();

    for _ in 0..max_iters {
        if grad.iter().all(|g| g.abs() < GRAD_TOL) {
            break;
        }
        // Two-loop recursion on the ascent problem (gradients of LML).
        let mut q = grad.clone();
        let mut alphas = vec![0.0; s_hist.len()];
        for i in (0..s_hist.len()).rev() {
            let rho = 1.0
                / s_hist[i]
                    .iter()
                    .zip(&y_hist[i])
                    .map(|(s, y)| s * y)
                    .sum::<f64>();
            let a = rho * s_hist[i].iter().zip(&q).map(|(s, q)| s * q).sum::<f64>();
            alphas[i] = a;
            for (qk, yk) in q.iter_mut().zip(&y_hist[i]) {
                *qk -= a * yk;
            }
        }
        let gamma = match (s_hist.last(), y_hist.last()) {
            (Some(s), Some(yv)) => {
                let sy: f64 = s.iter().zip(yv).map(|(a, b)| a * b).sum();
                let yy: f64 = yv.iter().map(|v| v * v).sum();
                if yy > 0.0 && sy > 0.0 {
                    sy / yy
                } else {
                    1.0
                }
            }
            _ => 1.0,
        };
        for qk in q.iter_mut() {
            *qk *= gamma;
        }
        for i in 0..s_hist.len() {
            let rho = 1.0
                / s_hist[i]
                    .iter()
                    .zip(&y_hist[i])
                    .map(|(s, y)| s * y)
                    .sum::<f64>();
            let b = rho * y_hist[i].iter().zip(&q).map(|(y, q)| y * q).sum::<f64>();
            for (qk, sk) in q.iter_mut().zip(&s_hist[i]) {
                *qk += (alphas[i] - b) * sk;
            }
        }
        let mut direction = q;
        let mut slope: f64 = direction.iter().zip(&grad).map(|(p, g)| p * g).sum();
        if !slope.is_finite() || slope <= 0.0 {
            // Curvature went bad; fall back to steepest ascent.
            direction = grad.clone();
            slope = grad.iter().map(|g| g * g).sum();
            s_hist.clear();
            y_hist.clear();
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..25 {
            let mut cand: Vec<f64> = theta
                .iter()
                .zip(&direction)
                .map(|(t, p)| t + step * p)
                .collect();
            clamp_theta(&mut cand);
            if let Some((cand_lml, cand_grad)) = eval(&cand) {
                if cand_lml >= lml + ARMIJO_C1 * step * slope {
                    accepted = Some((cand, cand_lml, cand_grad));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((new_theta, new_lml, new_grad)) = accepted else {
            break;
        };

        let s: Vec<f64> = new_theta.iter().zip(&theta).map(|(a, b)| a - b).collect();
        // Ascent convention: curvature pairs store the gradient change
        // negated so the standard descent recursion applies.
        let yv: Vec<f64> = grad.iter().zip(&new_grad).map(|(g0, g1)| g0 - g1).collect();
        let sy: f64 = s.iter().zip(&yv).map(|(a, b)| a * b).sum();
        if sy > 1e-12 {
            s_hist.push(s);
            y_hist.push(yv);
            if s_hist.len() > MEMORY {
                s_hist.remove(0);
                y_hist.remove(0);
            }
        } else {
            s_hist.clear();
            y_hist.clear();
        }

        theta = new_theta;
        lml = new_lml;
        grad = new_grad;
        if lml > best_lml {
            best_lml = lml;
            best_theta = theta.clone();
        }
        if s_hist
            .last()
            .map(|s| s.iter().all(|v| v.abs() < 1e-10))
            .unwrap_or(false)
        {
            break;
        }
    }
    (theta_to_params(&best_theta), best_lml)
}

/// The seeded multistart initializations used by [`GpModel::fit`]: the
/// fixed anchor (all lengthscales 0.5) plus seven random draws with
/// lengthscales log-uniform in [0.05, 2].
pub fn multistart_inits(dim: usize, seed: u64) -> Vec<KernelParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inits = vec![KernelParams::new(vec![0.5; dim], 1.0, 1e-4).expect("anchor is valid")];
    let log_uniform = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| -> f64 {
        (rng.gen::<f64>() * (hi.ln() - lo.ln()) + lo.ln()).exp()
    };
    for _ in 0..7 {
        let ls: Vec<f64> = (0..dim).map(|_| log_uniform(&mut rng, 0.05, 2.0)).collect();
        let sf2 = log_uniform(&mut rng, 0.25, 4.0);
        let sn2 = log_uniform(&mut rng, 1e-6, 1e-2);
        inits.push(KernelParams::new(ls, sf2, sn2).expect("sampled parameters are valid"));
    }
    inits
}

/// Posterior at one query point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Posterior {
    pub mean: f64,
    pub sd: f64,
}

/// A fitted Gaussian-process model.
#[derive(Debug, Clone)]
pub struct GpModel {
    bounds: Vec<(f64, f64)>,
    xs_unit: Vec<Vec<f64>>,
    /// Standardized targets.
    y_std_vec: DVector<f64>,
    y_mean: f64,
    y_scale: f64,
    best_y_orig: f64,
    params: KernelParams,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    alpha: DVector<f64>,
    jitter: f64,
    lml: f64,
    degenerate: bool,
}

impl GpModel {
    /// Fits hyperparameters by seeded multistart LML maximization.
    ///
    /// `xs` are points in original coordinates within `bounds`; `ys`
    /// their targets. Needs at least two points. If all targets are
    /// equal the data carries no signal; the model is returned with
    /// default hyperparameters and flagged [`GpModel::degenerate`],
    /// predicting the constant mean with positive uncertainty.
    pub fn fit(
        bounds: &[(f64, f64)],
        xs: &[Vec<f64>],
        ys: &[f64],
        seed: u64,
    ) -> Result<GpModel, GpError> {
        Self::fit_inner(bounds, xs, ys, None, seed)
    }

    /// Fits the model at fixed, caller-chosen hyperparameters.
    pub fn fit_with_params(
        bounds: &[(f64, f64)],
        xs: &[Vec<f64>],
        ys: &[f64],
        params: KernelParams,
    ) -> Result<GpModel, GpError> {
        Self::fit_inner(bounds, xs, ys, Some(params), 0)
    }

    fn fit_inner(
        bounds: &[(f64, f64)],
        xs: &[Vec<f64>],
        ys: &[f64],
        fixed: Option<KernelParams>,
        seed: u64,
    ) -> Result<GpModel, GpError> {
        if xs.len() < 2 {
            return Err(GpError::TooFewPoints {
                needed: 2,
                got: xs.len(),
            });
        }
        assert_eq!(xs.len(), ys.len(), "point and target counts differ");
        let dim = bounds.len();
        for x in xs {
            if x.len() != dim {
                return Err(GpError::DimensionMismatch {
                    expected: dim,
                    got: x.len(),
                });
            }
        }
        if let Some(p) = &fixed {
            if p.dim() != dim {
                return Err(GpError::DimensionMismatch {
                    expected: dim,
                    got: p.dim(),
                });
            }
        }
        let finite = xs.iter().flatten().all(|v| v.is_finite())
            && ys.iter().all(|v| v.is_finite())
            && bounds
                .iter()
                .all(|(lo, hi)| lo.is_finite() && hi.is_finite() && lo < hi);
        if !finite {
            return Err(GpError::NonFiniteInput);
        }

        let xs_unit: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| {
                x.iter()
                    .zip(bounds)
                    .map(|(v, (lo, hi))| (v - lo) / (hi - lo))
                    .collect()
            })
            .collect();

        let n = ys.len() as f64;
        let y_mean = ys.iter().sum::<f64>() / n;
        let var = ys.iter().map(|y| (y - y_mean).powi(2)).sum::<f64>() / n;
        let y_scale = var.sqrt();
        let degenerate = y_scale < 1e-12;
        let scale = if degenerate { 1.0 } else { y_scale };
        let y_std: Vec<f64> = ys.iter().map(|y| (y - y_mean) / scale).collect();
        let y_vec = DVector::from_column_slice(&y_std);

        let (params, lml) = match fixed {
            Some(p) => {
                let lml = log_marginal_likelihood(&xs_unit, &y_std, &p)?;
                (p, lml)
            }
            None if degenerate => {
                // No signal to fit to; any hyperparameters predict the
                // constant mean. Moderate noise keeps sigma positive.
                let p = KernelParams::new(vec![0.5; dim], 1.0, 1e-2).expect("valid");
                let lml = log_marginal_likelihood(&xs_unit, &y_std, &p)?;
                (p, lml)
            }
            None => {
                let mut best: Option<(KernelParams, f64)> = None;
                for init in multistart_inits(dim, seed) {
                    let theta0 = params_to_theta(&init);
                    let (cand, cand_lml) = refine_lbfgs(&xs_unit, &y_vec, theta0, 50);
                    if best.as_ref().map_or(true, |(_, b)| cand_lml > *b) {
                        best = Some((cand, cand_lml));
                    }
                }
                let (p, lml) = best.expect("at least one multistart init");
                if lml == f64::NEG_INFINITY {
                    return Err(GpError::CholeskyFailure {
                        max_jitter: MAX_JITTER,
                    });
                }
                (p, lml)
            }
        };

        let k_f = kernel_matrix(&xs_unit, &params);
        let (chol, jitter) = chol_with_jitter(&k_f, params.noise_variance)?;
        let alpha = chol.solve(&y_vec);
        let best_y_orig = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);

        Ok(GpModel {
            bounds: bounds.to_vec(),
            xs_unit,
            y_std_vec: y_vec,
            y_mean,
            y_scale: scale,
            best_y_orig,
            params,
            chol,
            alpha,
            jitter,
            lml,
            degenerate,
        })
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn n_train(&self) -> usize {
        self.xs_unit.len()
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    /// Jitter the final factorization needed beyond the noise term.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// LML of the fitted hyperparameters on the standardized targets.
    pub fn lml(&self) -> f64 {
        self.lml
    }

    pub fn degenerate(&self) -> bool {
        self.degenerate
    }

    /// Largest training target, in original units.
    pub fn best_y(&self) -> f64 {
        self.best_y_orig
    }

    pub fn y_mean(&self) -> f64 {
        self.y_mean
    }

    pub fn y_scale(&self) -> f64 {
        self.y_scale
    }

    /// Training inputs in unit-cube coordinates.
    pub fn xs_unit(&self) -> &[Vec<f64>] {
        &self.xs_unit
    }

    /// LML of this model's (standardized) training data at arbitrary
    /// hyperparameters; used to compare candidate fits.
    pub fn lml_at(&self, params: &KernelParams) -> Result<f64, GpError> {
        let ys: Vec<f64> = self.y_std_vec.iter().copied().collect();
        log_marginal_likelihood(&self.xs_unit, &ys, params)
    }

    fn to_unit(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.bounds)
            .map(|(v, (lo, hi))| (v - lo) / (hi - lo))
            .collect()
    }

    /// Posterior in standardized target units at a point given in
    /// original coordinates. The variance is the latent-function
    /// variance: observation noise is not added back.
    pub fn predict_standardized(&self, x: &[f64]) -> Posterior {
        assert_eq!(x.len(), self.dim(), "query dimension mismatch");
        let xu = self.to_unit(x);
        let k_star =
            DVector::from_iterator(self.n_train(), self.xs_unit.iter().map(|r| self.params.k(r, &xu)));
        let mean = k_star.dot(&self.alpha);
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&k_star)
            .expect("Cholesky factor has positive diagonal");
        let mut var = self.params.signal_variance - v.dot(&v);
        debug_assert!(var > -1e-10, "posterior variance {var} below tolerance");
        if var < 0.0 {
            var = 0.0;
        }
        Posterior {
            mean,
            sd: var.sqrt(),
        }
    }

    /// Posterior in original target units.
    pub fn predict(&self, x: &[f64]) -> Posterior {
        let p = self.predict_standardized(x);
        Posterior {
            mean: self.y_mean + self.y_scale * p.mean,
            sd: self.y_scale * p.sd,
        }
    }

    /// Joint latent-function posterior covariance of a batch of points
    /// (original coordinates), in standardized target units. Symmetric
    /// positive semidefinite; duplicated points make it singular.
    pub fn posterior_cov_standardized(&self, batch: &[Vec<f64>]) -> DMatrix<f64> {
        let q = batch.len();
        let us: Vec<Vec<f64>> = batch
            .iter()
            .map(|x| {
                assert_eq!(x.len(), self.dim(), "query dimension mismatch");
                self.to_unit(x)
            })
            .collect();
        let mut prior = DMatrix::zeros(q, q);
        for i in 0..q {
            for j in 0..=i {
                let k = self.params.k(&us[i], &us[j]);
                prior[(i, j)] = k;
                prior[(j, i)] = k;
            }
        }
        let n = self.n_train();
        let mut k_star = DMatrix::zeros(n, q);
        for (j, u) in us.iter().enumerate() {
            for (i, r) in self.xs_unit.iter().enumerate() {
                k_star[(i, j)] = self.params.k(r, u);
            }
        }
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&k_star)
            .expect("Cholesky factor has positive diagonal");
        let mut cov = prior - v.transpose() * v;
        // Symmetrize away round-off so downstream factorizations see
        // exactly what the math promises.
        for i in 0..q {
            for j in 0..i {
                let s = 0.5 * (cov[(i, j)] + cov[(j, i)]);
                cov[(i, j)] = s;
                cov[(j, i)] = s;
            }
        }
        cov
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn toy_data(
        n: usize,
        dim: usize,
        seed: u64,
        f: impl Fn(&[f64]) -> f64,
    ) -> (Vec<(f64, f64)>, Vec<Vec<f64>>, Vec<f64>) {
        let bounds = vec![(0.0, 1.0); dim];
        let xs = crate::sampling::latin_hypercube(n, dim, seed);
        let ys: Vec<f64> = xs.iter().map(|x| f(x)).collect();
        (bounds, xs, ys)
    }

    /// Brute-force posterior via explicit matrix inverse, standardizing
    /// internally the same way the contract specifies.
    fn oracle_predict(
        bounds: &[(f64, f64)],
        xs: &[Vec<f64>],
        ys: &[f64],
        params: &KernelParams,
        query: &[f64],
    ) -> (f64, f64) {
        let to_unit = |x: &[f64]| -> Vec<f64> {
            x.iter()
                .zip(bounds)
                .map(|(v, (lo, hi))| (v - lo) / (hi - lo))
                .collect()
        };
        let xs_unit: Vec<Vec<f64>> = xs.iter().map(|x| to_unit(x)).collect();
        let n = xs.len();
        let mean = ys.iter().sum::<f64>() / n as f64;
        let scale = (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        let y_std: Vec<f64> = ys.iter().map(|y| (y - mean) / scale).collect();

        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                k[(i, j)] = params.k(&xs_unit[i], &xs_unit[j]);
            }
            k[(i, i)] += params.noise_variance();
        }
        let k_inv = k.try_inverse().expect("oracle inverse");
        let qu = to_unit(query);
        let k_star = DVector::from_iterator(n, xs_unit.iter().map(|r| params.k(r, &qu)));
        let y = DVector::from_column_slice(&y_std);
        let mu = k_star.dot(&(&k_inv * &y));
        let var = params.signal_variance() - k_star.dot(&(&k_inv * &k_star));
        (mean + scale * mu, scale * var.max(0.0).sqrt())
    }

    #[test]
    fn posterior_matches_dense_inverse_oracle() {
        let (bounds, xs, ys) = toy_data(10, 3, 42, |x| {
            (3.0 * x[0]).sin() + x[1] * x[1] - 0.5 * x[2]
        });
        let params = KernelParams::new(vec![0.4, 0.6, 0.8], 1.5, 1e-4).unwrap();
        let model = GpModel::fit_with_params(&bounds, &xs, &ys, params.clone()).unwrap();
        for q in crate::sampling::latin_hypercube(6, 3, 1) {
            let got = model.predict(&q);
            let (mu, sd) = oracle_predict(&bounds, &xs, &ys, &params, &q);
            assert_relative_eq!(got.mean, mu, max_relative = 1e-8, epsilon = 1e-10);
            assert_relative_eq!(got.sd, sd, max_relative = 1e-8, epsilon = 1e-10);
        }
    }

    #[test]
    fn lml_single_point_closed_form() {
        // One training point with y = 0 and unit parameters:
        // LML = -1/2 log(1 + sn2) - 1/2 log(2 pi).
        for sn2 in [1e-8, 1e-4, 0.5] {
            let params = KernelParams::unit(2, sn2);
            let got = log_marginal_likelihood(&[vec![0.3, 0.7]], &[0.0], &params).unwrap();
            let expected = -0.5 * (1.0 + sn2).ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
            assert_relative_eq!(got, expected, max_relative = 1e-10);
        }
    }

    #[test]
    fn interpolates_training_points_at_tiny_noise() {
        let (bounds, xs, ys) = toy_data(12, 2, 7, |x| 2.0 + (4.0 * x[0]).cos() + x[1]);
        let model = GpModel::fit(&bounds, &xs, &ys, 0).unwrap();
        let y_scale = model.y_scale();
        // Refit at the found lengthscales but pinned tiny noise.
        let tight = KernelParams::new(
            model.params().lengthscales().to_vec(),
            model.params().signal_variance(),
            NOISE_FLOOR,
        )
        .unwrap();
        let model = GpModel::fit_with_params(&bounds, &xs, &ys, tight).unwrap();
        let signal_sd = model.params().signal_variance().sqrt() * y_scale;
        for (x, y) in xs.iter().zip(&ys) {
            let p = model.predict(x);
            assert!(
                (p.mean - y).abs() <= 1e-4 * y_scale,
                "mean {} vs target {y}",
                p.mean
            );
            assert!(p.sd <= 1e-3 * signal_sd, "sd {} too large", p.sd);
        }
    }

    #[test]
    fn reverts_to_prior_far_from_data() {
        let bounds = vec![(0.0, 100.0)];
        let xs: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64 * 0.1]).collect();
        let ys = vec![3.0, 3.5, 2.5, 3.2, 2.9];
        let params = KernelParams::new(vec![0.01], 1.0, 1e-6).unwrap();
        let model = GpModel::fit_with_params(&bounds, &xs, &ys, params).unwrap();
        // Query more than 10 lengthscales from every training point.
        let p = model.predict(&[50.0]);
        let y_mean = model.y_mean();
        let prior_sd = model.y_scale() * model.params().signal_variance().sqrt();
        assert!((p.mean - y_mean).abs() < 1e-6 * model.y_scale());
        assert!((p.sd - prior_sd).abs() < 1e-6 * prior_sd);
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let (_, xs, ys) = toy_data(8, 2, 3, |x| (5.0 * x[0]).sin() * x[1]);
        let n = ys.len() as f64;
        let mean = ys.iter().sum::<f64>() / n;
        let scale = (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n).sqrt();
        let y_std: Vec<f64> = ys.iter().map(|y| (y - mean) / scale).collect();
        let y_vec = DVector::from_column_slice(&y_std);

        let theta = vec![0.3f64.ln(), 0.9f64.ln(), 1.4f64.ln(), 1e-3f64.ln()];
        let (_, grad) = lml_and_grad(&xs, &y_vec, &theta_to_params(&theta)).unwrap();
        let h = 1e-6;
        for k in 0..theta.len() {
            let mut up = theta.clone();
            up[k] += h;
            let mut dn = theta.clone();
            dn[k] -= h;
            let (lu, _) = lml_and_grad(&xs, &y_vec, &theta_to_params(&up)).unwrap();
            let (ld, _) = lml_and_grad(&xs, &y_vec, &theta_to_params(&dn)).unwrap();
            let fd = (lu - ld) / (2.0 * h);
            assert_relative_eq!(grad[k], fd, max_relative = 1e-4, epsilon = 1e-8);
        }
    }

    #[test]
    fn fitted_lml_dominates_every_multistart_init() {
        let (bounds, xs, ys) = toy_data(15, 2, 9, |x| x[0] * x[0] - x[1]);
        for seed in [0u64, 5, 21] {
            let model = GpModel::fit(&bounds, &xs, &ys, seed).unwrap();
            for init in multistart_inits(2, seed) {
                let init_lml = model.lml_at(&init).unwrap();
                assert!(
                    model.lml() >= init_lml - 1e-9,
                    "seed {seed}: fitted {} < init {init_lml}",
                    model.lml()
                );
            }
        }
    }

    #[test]
    fn fit_is_deterministic_per_seed() {
        let (bounds, xs, ys) = toy_data(10, 2, 13, |x| x[0] + 2.0 * x[1]);
        let m1 = GpModel::fit(&bounds, &xs, &ys, 4).unwrap();
        let m2 = GpModel::fit(&bounds, &xs, &ys, 4).unwrap();
        assert_eq!(m1.params(), m2.params());
        assert_eq!(m1.lml(), m2.lml());
    }

    #[test]
    fn constant_targets_fit_degenerate_but_usable() {
        let bounds = vec![(0.0, 1.0); 2];
        let xs = crate::sampling::latin_hypercube(6, 2, 2);
        let ys = vec![5.0; 6];
        let model = GpModel::fit(&bounds, &xs, &ys, 0).unwrap();
        assert!(model.degenerate());
        let p = model.predict(&[0.5, 0.5]);
        assert_relative_eq!(p.mean, 5.0, epsilon = 1e-9);
        assert!(p.sd > 0.0, "degenerate model must keep sigma positive");
    }

    #[test]
    fn too_few_points_is_an_error() {
        let bounds = vec![(0.0, 1.0)];
        assert!(matches!(
            GpModel::fit(&bounds, &[vec![0.5]], &[1.0], 0),
            Err(GpError::TooFewPoints { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn duplicate_points_survive_via_jitter() {
        let bounds = vec![(0.0, 1.0)];
        let xs = vec![vec![0.4], vec![0.4], vec![0.9]];
        let ys = vec![1.0, 1.0, 2.0];
        let params = KernelParams::new(vec![0.5], 1.0, NOISE_FLOOR).unwrap();
        let model = GpModel::fit_with_params(&bounds, &xs, &ys, params).unwrap();
        let p = model.predict(&[0.4]);
        assert!(p.mean.is_finite() && p.sd.is_finite());
    }

    #[test]
    fn duplicating_a_training_pair_never_raises_sigma() {
        let (bounds, xs, ys) = toy_data(9, 2, 17, |x| x[0] - x[1] * x[1]);
        let params = KernelParams::new(vec![0.5, 0.5], 1.0, 1e-4).unwrap();
        let base = GpModel::fit_with_params(&bounds, &xs, &ys, params.clone()).unwrap();
        let mut xs2 = xs.clone();
        let mut ys2 = ys.clone();
        xs2.push(xs[3].clone());
        ys2.push(ys[3]);
        let grown = GpModel::fit_with_params(&bounds, &xs2, &ys2, params).unwrap();
        for q in crate::sampling::latin_hypercube(20, 2, 5) {
            let s0 = base.predict(&q).sd;
            let s1 = grown.predict(&q).sd;
            assert!(s1 <= s0 + 1e-6, "sigma grew from {s0} to {s1} at {q:?}");
        }
    }

    #[test]
    fn cholesky_reconstruction_is_tight() {
        let (bounds, xs, ys) = toy_data(10, 2, 23, |x| x[0] * x[1]);
        let model = GpModel::fit(&bounds, &xs, &ys, 1).unwrap();
        let n = model.n_train();
        let mut k = kernel_matrix(model.xs_unit(), model.params());
        for i in 0..n {
            k[(i, i)] += model.params().noise_variance() + model.jitter();
        }
        let l = model.chol.l();
        let rebuilt = &l * l.transpose();
        let err = (&rebuilt - &k).norm() / k.norm();
        assert!(err <= 1e-8, "reconstruction error {err}");
    }

    #[test]
    fn affine_target_shift_transforms_posterior_exactly() {
        let (bounds, xs, ys) = toy_data(8, 2, 29, |x| x[0] + x[1]);
        let (a, b) = (3.5, -2.0);
        let ys2: Vec<f64> = ys.iter().map(|y| a * y + b).collect();
        let m1 = GpModel::fit(&bounds, &xs, &ys, 6).unwrap();
        let m2 = GpModel::fit(&bounds, &xs, &ys2, 6).unwrap();
        for q in crate::sampling::latin_hypercube(10, 2, 8) {
            let p1 = m1.predict(&q);
            let p2 = m2.predict(&q);
            assert_relative_eq!(p2.mean, a * p1.mean + b, max_relative = 1e-8, epsilon = 1e-9);
            assert_relative_eq!(p2.sd, a * p1.sd, max_relative = 1e-8, epsilon = 1e-9);
        }
    }

    #[test]
    fn box_rescaling_leaves_predictions_unchanged() {
        let (_, xs, ys) = toy_data(8, 2, 31, |x| (x[0] - 0.3).powi(2) + x[1]);
        // Snap inputs to a dyadic grid so their images under the
        // power-of-two affine map below are exactly representable; the
        // multistart fit's argmax is sensitive at the last ulp, so the
        // full-fit comparison needs bit-exact coordinates.
        let xs: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| x.iter().map(|v| (v * 1024.0).round() / 1024.0).collect())
            .collect();
        let bounds1 = vec![(0.0, 1.0), (0.0, 1.0)];
        let bounds2 = vec![(-8.0, 24.0), (-1.0, 3.0)];
        let rescale =
            |x: &[f64]| -> Vec<f64> { vec![-8.0 + x[0] * 32.0, -1.0 + x[1] * 4.0] };
        let xs2: Vec<Vec<f64>> = xs.iter().map(|x| rescale(x)).collect();
        let m1 = GpModel::fit(&bounds1, &xs, &ys, 12).unwrap();
        let m2 = GpModel::fit(&bounds2, &xs2, &ys, 12).unwrap();
        for q in crate::sampling::latin_hypercube(10, 2, 14) {
            let q: Vec<f64> = q.iter().map(|v| (v * 1024.0).round() / 1024.0).collect();
            let p1 = m1.predict(&q);
            let p2 = m2.predict(&rescale(&q));
            assert_relative_eq!(p1.mean, p2.mean, max_relative = 1e-8, epsilon = 1e-9);
            assert_relative_eq!(p1.sd, p2.sd, max_relative = 1e-8, epsilon = 1e-9);
        }

        // At fixed hyperparameters the equivariance is mathematical and
        // holds for maps that round in the last ulp too.
        let bounds3 = vec![(-10.0, 30.0), (5.0, 6.0)];
        let rescale3 = |x: &[f64]| -> Vec<f64> { vec![-10.0 + x[0] * 40.0, 5.0 + x[1]] };
        let xs3: Vec<Vec<f64>> = xs.iter().map(|x| rescale3(x)).collect();
        let params = KernelParams::new(vec![0.4, 0.7], 1.2, 1e-5).unwrap();
        let f1 = GpModel::fit_with_params(&bounds1, &xs, &ys, params.clone()).unwrap();
        let f3 = GpModel::fit_with_params(&bounds3, &xs3, &ys, params).unwrap();
        for q in crate::sampling::latin_hypercube(10, 2, 14) {
            let p1 = f1.predict(&q);
            let p3 = f3.predict(&rescale3(&q));
            assert_relative_eq!(p1.mean, p3.mean, max_relative = 1e-8, epsilon = 1e-9);
            assert_relative_eq!(p1.sd, p3.sd, max_relative = 1e-8, epsilon = 1e-9);
        }
    }
}
