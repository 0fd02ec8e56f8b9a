//! Probability that a cell is flooded given its elevation.
//!
//! Coarse cells between the lowest dry elevation and the highest wet
//! elevation are grouped into equal-width elevation bins; the wet proportion
//! of each bin is interpolated across bin midpoints with a centred GP. Below
//! the range the probability is one, above it zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{fit_mle, Gp1d, MleBounds, SeHyper};
use crate::raster::Grid;

/// Wet proportions of coarse cells grouped by elevation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElevationBins {
    /// Lowest elevation of any dry cell.
    pub e_lo: f64,
    /// Highest elevation of any wet cell.
    pub e_hi: f64,
    pub k: usize,
    pub midpoints: Vec<f64>,
    /// Wet fraction per bin; `NaN` for empty bins.
    pub proportions: Vec<f64>,
    pub counts: Vec<usize>,
}

impl ElevationBins {
    pub fn width(&self) -> f64 {
        (self.e_hi - self.e_lo) / self.k as f64
    }

    /// `(midpoint, proportion)` for every bin with at least one cell.
    pub fn conditioned(&self) -> (Vec<f64>, Vec<f64>) {
        self.midpoints
            .iter()
            .zip(&self.proportions)
            .zip(&self.counts)
            .filter(|(_, &n)| n > 0)
            .map(|((&m, &p), _)| (m, p))
            .unzip()
    }
}

fn cells<'a>(depth: &'a Grid, elev: &'a Grid) -> impl Iterator<Item = (f64, f64)> + 'a {
    (0..depth.len()).filter_map(move |k| Some((depth.valid(k)?, elev.valid(k)?)))
}

/// `(e_lo, e_hi)`: minimum elevation of a dry cell and maximum elevation of
/// a wet cell, where wet means `depth > wet_threshold`.
pub fn elevation_range(depth: &Grid, elev: &Grid, wet_threshold: f64) -> Result<(f64, f64)> {
    depth.require_same_lattice(elev, "depth vs elevation")?;
    let mut e_lo = f64::INFINITY;
    let mut e_hi = f64::NEG_INFINITY;
    for (d, e) in cells(depth, elev) {
        if d > wet_threshold {
            e_hi = e_hi.max(e);
        } else {
            e_lo = e_lo.min(e);
        }
    }
    if e_hi == f64::NEG_INFINITY {
        return Err(Error::invalid("no wet cells to estimate flooding probability from"));
    }
    if e_lo == f64::INFINITY {
        return Err(Error::invalid("no dry cells to estimate flooding probability from"));
    }
    Ok((e_lo, e_hi))
}

/// Wet proportions on `k` equal-width bins spanning `[e_lo, e_hi]`.
pub fn bin_in_range(
    depth: &Grid,
    elev: &Grid,
    e_lo: f64,
    e_hi: f64,
    k: usize,
    wet_threshold: f64,
) -> Result<ElevationBins> {
    depth.require_same_lattice(elev, "depth vs elevation")?;
    if k < 2 {
        return Err(Error::invalid(format!("need at least 2 elevation bins, got {k}")));
    }
    if !(e_lo < e_hi) {
        return Err(Error::invalid(format!(
            "degenerate elevation range [{e_lo}, {e_hi}]: wet and dry cells are separable"
        )));
    }
    let width = (e_hi - e_lo) / k as f64;
    let mut counts = vec![0usize; k];
    let mut wet = vec![0usize; k];
    for (d, e) in cells(depth, elev) {
        if e < e_lo || e > e_hi {
            continue;
        }
        let b = (((e - e_lo) / width).floor() as usize).min(k - 1);
        counts[b] += 1;
        if d > wet_threshold {
            wet[b] += 1;
        }
    }
    let midpoints = (0..k).map(|b| e_lo + (b as f64 + 0.5) * width).collect();
    let proportions = counts
        .iter()
        .zip(&wet)
        .map(|(&n, &w)| if n == 0 { f64::NAN } else { w as f64 / n as f64 })
        .collect();
    Ok(ElevationBins {
        e_lo,
        e_hi,
        k,
        midpoints,
        proportions,
        counts,
    })
}

/// Bins coarse cells between the lowest dry and highest wet elevation.
pub fn build_bins(coarse_depth: &Grid, coarse_elev: &Grid, k: usize, wet_threshold: f64) -> Result<ElevationBins> {
    let (e_lo, e_hi) = elevation_range(coarse_depth, coarse_elev, wet_threshold)?;
    bin_in_range(coarse_depth, coarse_elev, e_lo, e_hi, k, wet_threshold)
}

/// GP settings for the flooding-probability curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PiConfig {
    /// Number of elevation bins.
    pub bins: usize,
    /// Kernel lengthscale as a multiple of the bin width.
    pub lengthscale_factor: f64,
    /// Signal variance; `None` uses the sample variance of the proportions.
    pub variance: Option<f64>,
    pub nugget: f64,
    /// Refine hyperparameters by maximum likelihood.
    pub mle: bool,
}

impl Default for PiConfig {
    fn default() -> Self {
        PiConfig {
            bins: 8,
            lengthscale_factor: 2.0,
            variance: None,
            nugget: 1e-4,
            mle: false,
        }
    }
}

#[derive(Debug, Clone)]
enum PiModel {
    /// Wet and dry elevations do not overlap: `1{E < e_lo}`.
    Step,
    Gp { bins: ElevationBins, gp: Gp1d },
}

/// Flooding probability as a function of elevation.
#[derive(Debug, Clone)]
pub struct PiCurve {
    e_lo: f64,
    e_hi: f64,
    model: PiModel,
}

/// Serializable description of a fitted [`PiCurve`].
#[derive(Debug, Clone, Serialize)]
pub struct PiSummary {
    pub kind: &'static str,
    pub e_lo: f64,
    pub e_hi: f64,
    pub bins: Option<ElevationBins>,
    pub gp: Option<SeHyper>,
}

impl PiCurve {
    /// Pure step at `e_lo`, used when wet and dry elevations are separable.
    pub fn step(e_lo: f64) -> Self {
        PiCurve {
            e_lo,
            e_hi: e_lo,
            model: PiModel::Step,
        }
    }

    pub fn e_lo(&self) -> f64 {
        self.e_lo
    }

    pub fn e_hi(&self) -> f64 {
        self.e_hi
    }

    pub fn bins(&self) -> Option<&ElevationBins> {
        match &self.model {
            PiModel::Gp { bins, .. } => Some(bins),
            PiModel::Step => None,
        }
    }

    pub fn hyper(&self) -> Option<SeHyper> {
        match &self.model {
            PiModel::Gp { gp, .. } => Some(gp.hyper()),
            PiModel::Step => None,
        }
    }

    pub fn summary(&self) -> PiSummary {
        PiSummary {
            kind: match self.model {
                PiModel::Step => "step",
                PiModel::Gp { .. } => "gp",
            },
            e_lo: self.e_lo,
            e_hi: self.e_hi,
            bins: self.bins().cloned(),
            gp: self.hyper(),
        }
    }

    /// Probability of flooding at `elevation`, always within `[0, 1]`.
    pub fn pi_at(&self, elevation: f64) -> f64 {
        match &self.model {
            PiModel::Step => {
                if elevation < self.e_lo {
                    1.0
                } else {
                    0.0
                }
            }
            PiModel::Gp { gp, .. } => {
                if elevation <= self.e_lo {
                    1.0
                } else if elevation >= self.e_hi {
                    0.0
                } else {
                    let p = gp.mean(elevation);
                    if p.is_nan() {
                        0.0
                    } else {
                        p.clamp(0.0, 1.0)
                    }
                }
            }
        }
    }
}

/// Interpolates bin proportions with a centred squared-exponential GP.
/// Empty bins are left out of the conditioning set.
pub fn fit_pi(bins: &ElevationBins, config: &PiConfig) -> Result<PiCurve> {
    let (xs, ys) = bins.conditioned();
    if xs.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 non-empty elevation bins, found {}",
            xs.len()
        )));
    }
    let gp = if config.mle {
        let span = xs[xs.len() - 1] - xs[0];
        let width = bins.width();
        let bounds = MleBounds {
            lengthscale_lo: 0.5 * width / span,
            lengthscale_hi: 4.0 * (bins.e_hi - bins.e_lo) / span,
            rel_nugget_lo: 1e-8,
            rel_nugget_hi: 1.0,
            ..MleBounds::default()
        };
        fit_mle(&xs, &ys, &bounds)?
    } else {
        let variance = match config.variance {
            Some(v) => v,
            None => {
                let n = ys.len() as f64;
                let mean = ys.iter().sum::<f64>() / n;
                ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1.0)
            }
        };
        let hyper = SeHyper {
            variance,
            lengthscale: config.lengthscale_factor * bins.width(),
            nugget: config.nugget,
        };
        Gp1d::fit(&xs, &ys, hyper, true)?
    };
    Ok(PiCurve {
        e_lo: bins.e_lo,
        e_hi: bins.e_hi,
        model: PiModel::Gp {
            bins: bins.clone(),
            gp,
        },
    })
}

/// Builds the flooding-probability curve from a coarse projection, falling
/// back to a step function when wet and dry elevations do not overlap.
pub fn estimate_pi(coarse_depth: &Grid, coarse_elev: &Grid, wet_threshold: f64, config: &PiConfig) -> Result<PiCurve> {
    let (e_lo, e_hi) = elevation_range(coarse_depth, coarse_elev, wet_threshold)?;
    if e_lo >= e_hi {
        return Ok(PiCurve::step(e_lo));
    }
    let bins = bin_in_range(coarse_depth, coarse_elev, e_lo, e_hi, config.bins, wet_threshold)?;
    fit_pi(&bins, config)
}
