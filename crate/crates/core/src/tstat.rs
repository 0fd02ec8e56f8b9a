//! Student-t kernel and the two predictive laws built on it: a shifted and
//! scaled t clamped at zero, and a zero-inflated mixture of that law with a
//! point mass at zero.

use serde::{Deserialize, Serialize};
use statrs::function::beta::{beta_reg, inv_beta_reg};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Density of the standard Student-t with `dof` degrees of freedom.
pub fn t_pdf(x: f64, dof: u32) -> f64 {
    let nu = f64::from(dof);
    let ln_norm = ln_gamma(0.5 * (nu + 1.0)) - ln_gamma(0.5 * nu) - 0.5 * (nu * std::f64::consts::PI).ln();
    (ln_norm - 0.5 * (nu + 1.0) * (x * x / nu).ln_1p()).exp()
}

/// Lower-tail probability of `x <= -|x|`, evaluated without cancellation.
fn lower_tail(x: f64, nu: f64) -> f64 {
    0.5 * beta_reg(0.5 * nu, 0.5, nu / (nu + x * x))
}

fn check_dof(dof: u32) -> Result<f64> {
    if dof < 1 {
        return Err(Error::invalid("t distribution needs dof >= 1"));
    }
    Ok(f64::from(dof))
}

/// CDF of the standard Student-t.
pub fn t_cdf(x: f64, dof: u32) -> Result<f64> {
    let nu = check_dof(dof)?;
    Ok(cdf_unchecked(x, nu))
}

/// Upper tail `1 - F(x)`, accurate far into the right tail.
pub fn t_sf(x: f64, dof: u32) -> Result<f64> {
    let nu = check_dof(dof)?;
    Ok(cdf_unchecked(-x, nu))
}

fn cdf_unchecked(x: f64, nu: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x == f64::INFINITY {
        return 1.0;
    }
    if x == f64::NEG_INFINITY {
        return 0.0;
    }
    let tail = lower_tail(x, nu);
    if x <= 0.0 {
        tail
    } else {
        1.0 - tail
    }
}

/// Quantile of the standard Student-t, polished so that
/// `t_cdf(t_quantile(p)) == p` to about 1e-12.
pub fn t_quantile(p: f64, dof: u32) -> Result<f64> {
    let nu = check_dof(dof)?;
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!("quantile probability must lie in (0, 1), got {p}")));
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    // solve in the lower tail, then reflect
    let q = if p < 0.5 { p } else { 1.0 - p };
    let x = lower_quantile(q, nu);
    Ok(if p < 0.5 { x } else { -x })
}

/// Solves `F(x) = q` for `q < 0.5`, returning `x < 0`.
fn lower_quantile(q: f64, nu: f64) -> f64 {
    let y = inv_beta_reg(0.5 * nu, 0.5, 2.0 * q);
    let mut x = -(nu * (1.0 - y) / y).sqrt();

    let mut lo = -1.0;
    while lower_tail(lo, nu) > q {
        lo *= 2.0;
        if !lo.is_finite() {
            return f64::NEG_INFINITY;
        }
    }
    let mut hi = 0.0;
    if !(x.is_finite() && x > lo && x < hi) {
        x = 0.5 * (lo + hi);
    }
    let dof = nu as u32;
    for _ in 0..100 {
        let f = lower_tail(x, nu) - q;
        if f == 0.0 {
            break;
        }
        if f > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let dens = t_pdf(x, dof);
        let mut next = x - f / dens;
        if !(next.is_finite() && next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 1e-15 * x.abs().max(1.0) {
            x = next;
            break;
        }
        x = next;
    }
    x
}

/// `location + scale * T(dof)`, with negative outcomes read as zero depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TPredictive {
    pub location: f64,
    pub scale: f64,
    pub dof: u32,
}

impl TPredictive {
    pub fn new(location: f64, scale: f64, dof: u32) -> Result<Self> {
        if !location.is_finite() {
            return Err(Error::invalid(format!("location must be finite, got {location}")));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::invalid(format!("scale must be > 0, got {scale}")));
        }
        if dof < 2 {
            return Err(Error::invalid(format!("dof must be >= 2, got {dof}")));
        }
        Ok(TPredictive { location, scale, dof })
    }

    /// `E[max(location + scale T, 0)]`.
    ///
    /// With `a = -location/scale`:
    /// `location (1 - F(a)) + scale f(a) (nu + a^2) / (nu - 1)`.
    pub fn clamped_mean(&self) -> f64 {
        let nu = f64::from(self.dof);
        let a = -self.location / self.scale;
        let survival = cdf_unchecked(-a, nu);
        let partial = t_pdf(a, self.dof) * (nu + a * a) / (nu - 1.0);
        (self.location * survival + self.scale * partial).max(0.0)
    }

    /// `P(max(location + scale T, 0) <= q)`.
    pub fn cdf(&self, q: f64) -> f64 {
        if q < 0.0 {
            0.0
        } else {
            cdf_unchecked((q - self.location) / self.scale, f64::from(self.dof))
        }
    }

    /// Quantile of the clamped law.
    pub fn quantile(&self, p: f64) -> Result<f64> {
        let z = t_quantile(p, self.dof)?;
        Ok((self.location + self.scale * z).max(0.0))
    }

    /// `P(max(location + scale T, 0) > d)` for a strictly positive depth `d`.
    pub fn exceed_prob(&self, d: f64) -> Result<f64> {
        check_threshold(d)?;
        Ok(cdf_unchecked(
            (self.location - d) / self.scale,
            f64::from(self.dof),
        ))
    }
}

fn check_threshold(d: f64) -> Result<()> {
    if d.is_finite() && d > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "exceedance depth must be finite and > 0, got {d}"
        )))
    }
}

/// `(1 - pi) I(0) + pi (location + scale T)`, the t part clamped at zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixturePredictive {
    pub pi: f64,
    pub t: TPredictive,
}

impl MixturePredictive {
    pub fn new(pi: f64, t: TPredictive) -> Result<Self> {
        if !(0.0..=1.0).contains(&pi) {
            return Err(Error::invalid(format!("mixture weight must lie in [0, 1], got {pi}")));
        }
        Ok(MixturePredictive { pi, t })
    }

    pub fn mean(&self) -> f64 {
        if self.pi == 0.0 {
            0.0
        } else {
            self.pi * self.t.clamped_mean()
        }
    }

    /// Mixture CDF; zero for `q < 0`.
    pub fn cdf(&self, q: f64) -> f64 {
        if q < 0.0 {
            0.0
        } else {
            (1.0 - self.pi) + self.pi * self.t.cdf(q)
        }
    }

    /// Smallest `q >= 0` with `F(q) >= p`.
    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::invalid(format!("quantile probability must lie in (0, 1), got {p}")));
        }
        if p <= self.cdf(0.0) {
            return Ok(0.0);
        }
        let target = ((p - (1.0 - self.pi)) / self.pi).min(1.0 - f64::EPSILON);
        let z = t_quantile(target, self.t.dof)?;
        Ok((self.t.location + self.t.scale * z).max(0.0))
    }

    /// `pi * P(t part > d)` for `d > 0`.
    pub fn exceed_prob(&self, d: f64) -> Result<f64> {
        Ok(self.pi * self.t.exceed_prob(d)?)
    }
}
