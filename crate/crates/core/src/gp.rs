//! One-dimensional Gaussian process regression with a squared-exponential
//! kernel plus nugget, shared by the flooding-probability curve and the
//! parameter emulators.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest absolute nugget ever placed on the covariance diagonal.
pub const MIN_NUGGET: f64 = 1e-10;

/// Floor for the profiled signal variance when the data are constant.
const MIN_VARIANCE: f64 = 1e-12;

/// Kernel hyperparameters: `k(x, x') = variance * exp(-(x - x')^2 / (2 lengthscale^2))`,
/// with `nugget` added on the diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeHyper {
    pub variance: f64,
    pub lengthscale: f64,
    pub nugget: f64,
}

impl SeHyper {
    fn kernel(&self, a: f64, b: f64) -> f64 {
        let d = (a - b) / self.lengthscale;
        self.variance * (-0.5 * d * d).exp()
    }
}

/// A conditioned GP over a scalar input.
#[derive(Debug, Clone)]
pub struct Gp1d {
    xs: Vec<f64>,
    offset: f64,
    hyper: SeHyper,
    chol: Option<Cholesky<f64, Dyn>>,
    alpha: DVector<f64>,
}

impl Gp1d {
    /// Conditions a GP on `(xs, ys)` with fixed hyperparameters. When
    /// `center` is set the sample mean of `ys` is removed before
    /// conditioning and added back to predictions.
    pub fn fit(xs: &[f64], ys: &[f64], hyper: SeHyper, center: bool) -> Result<Self> {
        if xs.len() != ys.len() || xs.is_empty() {
            return Err(Error::invalid("GP needs equally many inputs and outputs, at least one"));
        }
        if xs.iter().chain(ys).any(|v| !v.is_finite()) {
            return Err(Error::invalid("GP training data must be finite"));
        }
        if !(hyper.lengthscale > 0.0) || !(hyper.nugget >= 0.0) || !(hyper.variance >= 0.0) {
            return Err(Error::invalid(format!("invalid GP hyperparameters {hyper:?}")));
        }
        let offset = if center {
            ys.iter().sum::<f64>() / ys.len() as f64
        } else {
            0.0
        };
        let centered = DVector::from_iterator(ys.len(), ys.iter().map(|y| y - offset));

        if hyper.variance == 0.0 {
            // constant prior: predictions reduce to the offset
            return Ok(Gp1d {
                xs: xs.to_vec(),
                offset,
                hyper,
                chol: None,
                alpha: DVector::zeros(xs.len()),
            });
        }
        let chol = Cholesky::new(covariance(xs, &hyper)).ok_or_else(|| {
            Error::Numerical(format!("GP covariance is not positive definite for {hyper:?}"))
        })?;
        let alpha = chol.solve(&centered);
        Ok(Gp1d {
            xs: xs.to_vec(),
            offset,
            hyper,
            chol: Some(chol),
            alpha,
        })
    }

    pub fn hyper(&self) -> SeHyper {
        self.hyper
    }

    /// Value added back to predictions (training mean when centred).
    pub fn offset(&self) -> f64 {
        self.offset
    }

    fn cross(&self, x: f64) -> DVector<f64> {
        DVector::from_iterator(self.xs.len(), self.xs.iter().map(|&xi| self.hyper.kernel(x, xi)))
    }

    /// Posterior mean at `x`.
    pub fn mean(&self, x: f64) -> f64 {
        if self.chol.is_none() {
            return self.offset;
        }
        self.offset + self.cross(x).dot(&self.alpha)
    }

    /// Posterior mean and latent (noise-free) variance at `x`.
    pub fn predict(&self, x: f64) -> (f64, f64) {
        let Some(chol) = &self.chol else {
            return (self.offset, 0.0);
        };
        let k = self.cross(x);
        let mean = self.offset + k.dot(&self.alpha);
        let v = chol.l().solve_lower_triangular(&k).unwrap_or_else(|| DVector::zeros(k.len()));
        let var = (self.hyper.variance - v.dot(&v)).max(0.0);
        (mean, var)
    }

    /// Posterior mean and the variance of a new noisy observation at `x`.
    pub fn predict_observation(&self, x: f64) -> (f64, f64) {
        let (m, v) = self.predict(x);
        (m, v + self.hyper.nugget)
    }
}

fn covariance(xs: &[f64], hyper: &SeHyper) -> DMatrix<f64> {
    let n = xs.len();
    DMatrix::from_fn(n, n, |i, j| {
        hyper.kernel(xs[i], xs[j]) + if i == j { hyper.nugget } else { 0.0 }
    })
}

/// Search box for maximum-likelihood fitting, as multiples of the input span.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MleBounds {
    pub lengthscale_lo: f64,
    pub lengthscale_hi: f64,
    /// Nugget relative to the signal variance.
    pub rel_nugget_lo: f64,
    pub rel_nugget_hi: f64,
    /// Grid points per axis for the initial log-grid scan.
    pub grid: usize,
    /// Local refinements started from the best grid points.
    pub starts: usize,
}

impl Default for MleBounds {
    fn default() -> Self {
        MleBounds {
            lengthscale_lo: 0.02,
            lengthscale_hi: 10.0,
            rel_nugget_lo: 1e-10,
            rel_nugget_hi: 1.0,
            grid: 20,
            starts: 3,
        }
    }
}

/// Profile negative log marginal likelihood of centred `ys` with the signal
/// variance maximised out; returns `(nll, variance)`.
fn profile_nll(xs: &[f64], ys: &DVector<f64>, lengthscale: f64, rel_nugget: f64) -> Option<(f64, f64)> {
    let unit = SeHyper {
        variance: 1.0,
        lengthscale,
        nugget: rel_nugget,
    };
    let chol = Cholesky::new(covariance(xs, &unit))?;
    let n = xs.len() as f64;
    let quad = ys.dot(&chol.solve(ys));
    let variance = (quad / n).max(MIN_VARIANCE);
    let log_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    let nll = 0.5 * n * variance.ln() + 0.5 * log_det + 0.5 * quad / variance;
    nll.is_finite().then_some((nll, variance))
}

/// Fits a centred GP by maximising the marginal likelihood over
/// `(log lengthscale, log nugget)`, with the signal variance profiled out.
///
/// A log-grid scan seeds several Nelder-Mead refinements; if every
/// refinement fails the best grid point is kept.
pub fn fit_mle(xs: &[f64], ys: &[f64], bounds: &MleBounds) -> Result<Gp1d> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::invalid("maximum-likelihood GP fit needs at least two points"));
    }
    let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) {
        return Err(Error::invalid("GP inputs must not all coincide"));
    }
    let offset = ys.iter().sum::<f64>() / ys.len() as f64;
    let centered = DVector::from_iterator(ys.len(), ys.iter().map(|y| y - offset));

    let box_lo = [(bounds.lengthscale_lo * span).ln(), bounds.rel_nugget_lo.ln()];
    let box_hi = [(bounds.lengthscale_hi * span).ln(), bounds.rel_nugget_hi.ln()];
    let objective = |p: &[f64; 2]| -> f64 {
        let p = clamp_box(*p, box_lo, box_hi);
        profile_nll(xs, &centered, p[0].exp(), p[1].exp()).map_or(f64::INFINITY, |(nll, _)| nll)
    };

    let g = bounds.grid.max(2);
    let mut scan = Vec::with_capacity(g * g);
    for i in 0..g {
        for j in 0..g {
            let t = |k: usize, a: usize| box_lo[a] + (box_hi[a] - box_lo[a]) * k as f64 / (g - 1) as f64;
            let p = [t(i, 0), t(j, 1)];
            scan.push((objective(&p), p));
        }
    }
    scan.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (mut best_val, mut best) = scan[0];
    if !best_val.is_finite() {
        return Err(Error::Numerical("GP likelihood is not finite anywhere on the search grid".into()));
    }
    let step = [
        (box_hi[0] - box_lo[0]) / (g - 1) as f64,
        (box_hi[1] - box_lo[1]) / (g - 1) as f64,
    ];
    for &(_, start) in scan.iter().take(bounds.starts.max(1)) {
        let (p, v) = nelder_mead(&objective, start, step, 200);
        let p = clamp_box(p, box_lo, box_hi);
        if v.is_finite() && v < best_val {
            best_val = v;
            best = p;
        }
    }

    let (lengthscale, rel_nugget) = (best[0].exp(), best[1].exp());
    let (_, variance) = profile_nll(xs, &centered, lengthscale, rel_nugget)
        .ok_or_else(|| Error::Numerical("GP refit at the optimum failed".into()))?;
    let hyper = SeHyper {
        variance,
        lengthscale,
        nugget: (variance * rel_nugget).max(MIN_NUGGET),
    };
    Gp1d::fit(xs, ys, hyper, true)
}

fn clamp_box(p: [f64; 2], lo: [f64; 2], hi: [f64; 2]) -> [f64; 2] {
    [p[0].clamp(lo[0], hi[0]), p[1].clamp(lo[1], hi[1])]
}

/// Two-dimensional Nelder-Mead minimiser.
fn nelder_mead(f: &dyn Fn(&[f64; 2]) -> f64, start: [f64; 2], step: [f64; 2], max_iter: usize) -> ([f64; 2], f64) {
    let mut simplex = [
        start,
        [start[0] + step[0], start[1]],
        [start[0], start[1] + step[1]],
    ];
    let mut vals = simplex.map(|p| f(&p));
    let lerp = |a: [f64; 2], b: [f64; 2], t: f64| [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];

    for _ in 0..max_iter {
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        simplex = order.map(|k| simplex[k]);
        vals = order.map(|k| vals[k]);
        if (vals[2] - vals[0]).abs() <= 1e-10 * (1.0 + vals[0].abs()) {
            break;
        }
        let centroid = lerp(simplex[0], simplex[1], 0.5);
        let reflected = lerp(centroid, simplex[2], -1.0);
        let fr = f(&reflected);
        if fr < vals[0] {
            let expanded = lerp(centroid, simplex[2], -2.0);
            let fe = f(&expanded);
            if fe < fr {
                simplex[2] = expanded;
                vals[2] = fe;
            } else {
                simplex[2] = reflected;
                vals[2] = fr;
            }
        } else if fr < vals[1] {
            simplex[2] = reflected;
            vals[2] = fr;
        } else {
            let contracted = lerp(centroid, simplex[2], 0.5);
            let fc = f(&contracted);
            if fc < vals[2] {
                simplex[2] = contracted;
                vals[2] = fc;
            } else {
                for k in 1..3 {
                    simplex[k] = lerp(simplex[0], simplex[k], 0.5);
                    vals[k] = f(&simplex[k]);
                }
            }
        }
    }
    let best = (0..3).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap_or(0);
    (simplex[best], vals[best])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn interpolates_with_tiny_nugget() {
        let xs = [0.0, 1.0, 2.0, 3.5];
        let ys = [1.0, -0.5, 0.25, 2.0];
        let gp = Gp1d::fit(&xs, &ys, SeHyper { variance: 1.0, lengthscale: 1.0, nugget: 1e-12 }, true).unwrap();
        for (x, y) in xs.iter().zip(ys) {
            assert_abs_diff_eq!(gp.mean(*x), y, epsilon = 1e-8);
            assert!(gp.predict(*x).1 < 1e-8);
        }
        // far from data the centred GP reverts to the sample mean
        assert_abs_diff_eq!(gp.mean(100.0), 0.6875, epsilon = 1e-12);
    }

    #[test]
    fn zero_variance_is_constant() {
        let gp = Gp1d::fit(&[0.0, 1.0], &[3.0, 3.0], SeHyper { variance: 0.0, lengthscale: 1.0, nugget: 0.0 }, true).unwrap();
        assert_eq!(gp.mean(0.3), 3.0);
        assert_eq!(gp.predict(7.0), (3.0, 0.0));
    }

    #[test]
    fn mle_recovers_smooth_function() {
        let xs: Vec<f64> = (0..12).map(|k| k as f64 / 11.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| (3.0 * x).sin()).collect();
        let gp = fit_mle(&xs, &ys, &MleBounds::default()).unwrap();
        for k in 0..50 {
            let x = k as f64 / 49.0;
            assert_abs_diff_eq!(gp.mean(x), (3.0 * x).sin(), epsilon = 1e-3);
        }
        assert!(gp.hyper().nugget < 1e-6);
    }

    #[test]
    fn mle_handles_constant_data() {
        let xs = [0.0, 0.5, 1.0, 1.5];
        let gp = fit_mle(&xs, &[2.0; 4], &MleBounds::default()).unwrap();
        for k in 0..20 {
            let (m, v) = gp.predict_observation(k as f64 * 0.1);
            assert_abs_diff_eq!(m, 2.0, epsilon = 1e-9);
            assert!(v <= gp.hyper().nugget + 1e-8);
        }
    }

    #[test]
    fn nelder_mead_finds_quadratic_minimum() {
        let f = |p: &[f64; 2]| (p[0] - 1.0).powi(2) + 3.0 * (p[1] + 2.0).powi(2);
        let (p, v) = nelder_mead(&f, [0.0, 0.0], [0.5, 0.5], 500);
        assert!(v < 1e-9);
        assert_abs_diff_eq!(p[0], 1.0, epsilon = 1e-4);
        assert_abs_diff_eq!(p[1], -2.0, epsilon = 1e-4);
    }
}
