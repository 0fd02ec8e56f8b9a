//! The probabilistic downscaling pipeline and the deterministic
//! cost-growing baseline.
//!
//! Fine cells inside a wet coarse cell get `Y_D + sigma T(n - 1)` where
//! `Y_D` is the bilinearly interpolated coarse water surface minus the fine
//! elevation, clamped at zero. Fine cells inside a dry coarse cell get a
//! mixture of a point mass at zero and `Y_A + sigma T(n - 1)`, where `Y_A`
//! shifts the depth of the least-cost source cell by the elevation rise and
//! the mixture weight comes from the elevation-conditioned flooding
//! probability. `sigma` is estimated from high-water marks.

use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::costdist::{cost_distance_with, flood_sources, CostField, CostOptions};
use crate::error::{Error, Result};
use crate::floodprob::{estimate_pi, PiCurve, PiConfig};
use crate::raster::{bilinear_with, Grid, GridPair, NodataPolicy};
use crate::tstat::{t_quantile, MixturePredictive, TPredictive};

/// Default depth above which a cell counts as flooded in evaluation, metres.
pub const DEFAULT_THRESHOLD: f64 = 0.3;

/// Observed maximum flood depth at a point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HighWaterMark {
    pub x: f64,
    pub y: f64,
    #[serde(rename = "depth_m")]
    pub depth: f64,
}

/// Reads high-water marks from a CSV file with header `x,y,depth_m`.
pub fn read_hwms(path: impl AsRef<Path>) -> Result<Vec<HighWaterMark>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut marks = Vec::new();
    for record in reader.deserialize::<HighWaterMark>() {
        let mark = record.map_err(|e| csv_error(path, e))?;
        if !(mark.x.is_finite() && mark.y.is_finite() && mark.depth.is_finite() && mark.depth >= 0.0) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: marks.len() + 2,
                message: format!("invalid high-water mark {mark:?}"),
            });
        }
        marks.push(mark);
    }
    Ok(marks)
}

/// Writes high-water marks as CSV with header `x,y,depth_m`.
pub fn write_hwms(marks: &[HighWaterMark], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for m in marks {
        writer.serialize(m).map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        kind => Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("{kind:?}"),
        },
    }
}

/// Pipeline settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PdFloodConfig {
    /// Depth threshold for exceedance probabilities, metres.
    pub threshold: f64,
    /// Coarse cells with depth strictly above this are wet.
    pub wet_threshold: f64,
    pub pi: PiConfig,
    /// Lower bound applied to the estimated sigma; off by default so that a
    /// zero estimate fails loudly.
    pub sigma_floor: Option<f64>,
    pub nodata_policy: NodataPolicy,
    /// Added to fine elevations before cost routing.
    pub cost_offset: Option<f64>,
    /// Central prediction interval level.
    pub interval: f64,
}

impl Default for PdFloodConfig {
    fn default() -> Self {
        PdFloodConfig {
            threshold: DEFAULT_THRESHOLD,
            wet_threshold: 0.0,
            pi: PiConfig::default(),
            sigma_floor: None,
            nodata_policy: NodataPolicy::Error,
            cost_offset: None,
            interval: 0.95,
        }
    }
}

impl PdFloodConfig {
    fn validate(&self) -> Result<()> {
        if !(self.threshold.is_finite() && self.threshold > 0.0) {
            return Err(Error::invalid(format!("threshold must be > 0, got {}", self.threshold)));
        }
        if !(self.wet_threshold >= 0.0) {
            return Err(Error::invalid("wet threshold must be >= 0"));
        }
        if !(self.interval > 0.0 && self.interval < 1.0) {
            return Err(Error::invalid("interval level must lie in (0, 1)"));
        }
        if let Some(f) = self.sigma_floor {
            if !(f > 0.0) {
                return Err(Error::invalid("sigma floor must be > 0"));
            }
        }
        Ok(())
    }
}

/// Coarse water-surface elevation `Y_L + E_L`.
fn water_surface(pair: &GridPair, coarse_depth: &Grid) -> Result<Grid> {
    coarse_depth.require_same_lattice(&pair.coarse, "coarse depth vs coarse elevation")?;
    let values = (0..coarse_depth.len())
        .map(|k| match (coarse_depth.valid(k), pair.coarse.valid(k)) {
            (Some(d), Some(e)) => d + e,
            _ => coarse_depth.nodata(),
        })
        .collect();
    coarse_depth.with_values(values)
}

fn downscaled_depth_at(pair: &GridPair, wse: &Grid, idx: usize, policy: NodataPolicy) -> Result<f64> {
    let e = pair.fine.valid(idx).ok_or_else(|| {
        let (r, c) = pair.fine.row_col(idx);
        Error::invalid(format!("fine elevation is nodata at row {r}, col {c}"))
    })?;
    let (r, c) = pair.fine.row_col(idx);
    let (x, y) = pair.fine.center(r, c);
    Ok((bilinear_with(wse, x, y, policy)? - e).max(0.0))
}

fn downscale_masked(
    pair: &GridPair,
    coarse_depth: &Grid,
    policy: NodataPolicy,
    mask: Option<&[bool]>,
) -> Result<Grid> {
    let wse = water_surface(pair, coarse_depth)?;
    let nodata = pair.fine.nodata();
    let values = (0..pair.fine.len())
        .into_par_iter()
        .map(|idx| {
            if pair.fine.is_nodata(idx) || mask.is_some_and(|m| !m[idx]) {
                Ok(nodata)
            } else {
                downscaled_depth_at(pair, &wse, idx, policy)
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    pair.fine.with_values(values)
}

/// `Y_D(v) = max(bilinear(Y_L + E_L)(v) - E_H(v), 0)` for every valid fine cell.
pub fn downscale_deterministic(pair: &GridPair, coarse_depth: &Grid) -> Result<Grid> {
    downscale_masked(pair, coarse_depth, NodataPolicy::Error, None)
}

/// Estimated residual scale and the t degrees of freedom it implies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaEstimate {
    pub sigma: f64,
    pub dof: u32,
    pub n: usize,
    /// `Z(u_i) - Y_D(u_i)` for each mark used.
    pub residuals: Vec<f64>,
}

/// `sigma^2 = sum (Z - Y_D)^2 / (n - 1)`; no mean-centring since `Y_D` is
/// the model mean.
pub fn estimate_sigma(fine_y_d: &Grid, hwms: &[HighWaterMark]) -> Result<SigmaEstimate> {
    if hwms.len() < 3 {
        return Err(Error::invalid(format!(
            "need at least 3 high-water marks to estimate sigma, got {}",
            hwms.len()
        )));
    }
    let residuals = hwms
        .iter()
        .map(|m| {
            let (r, c) = fine_y_d.cell_of(m.x, m.y)?;
            let y_d = fine_y_d.valid(fine_y_d.index(r, c)).ok_or_else(|| {
                Error::invalid(format!("high-water mark at ({}, {}) falls on a nodata cell", m.x, m.y))
            })?;
            Ok(m.depth - y_d)
        })
        .collect::<Result<Vec<f64>>>()?;
    sigma_from_residuals(&residuals)
}

/// The estimator on precomputed residuals.
pub fn sigma_from_residuals(residuals: &[f64]) -> Result<SigmaEstimate> {
    let n = residuals.len();
    if n < 3 {
        return Err(Error::invalid(format!("need at least 3 residuals, got {n}")));
    }
    let ss: f64 = residuals.iter().map(|r| r * r).sum();
    let sigma = (ss / (n - 1) as f64).sqrt();
    if !(sigma > 0.0) {
        return Err(Error::Numerical(
            "all high-water mark residuals are zero; sigma would be 0 (enable a sigma floor)".into(),
        ));
    }
    Ok(SigmaEstimate {
        sigma,
        dof: (n - 1) as u32,
        n,
        residuals: residuals.to_vec(),
    })
}

/// `Y_A(v) = max(Y_D(v') - (E_H(v) - E_H(v')), 0)` with `v'` the least-cost
/// source of `v`.
pub fn downscale_dry_mean(cost_field: &CostField, fine_y_d: &Grid, fine_elev: &Grid, v: usize) -> Result<f64> {
    let src = cost_field.source(v).ok_or_else(|| {
        let (r, c) = fine_elev.row_col(v);
        Error::invalid(format!("cell (row {r}, col {c}) is unreachable from any source"))
    })?;
    let missing = |what: &str| Error::invalid(format!("{what} is nodata at a cost-distance cell"));
    let y_src = fine_y_d.valid(src).ok_or_else(|| missing("source depth"))?;
    let e_v = fine_elev.valid(v).ok_or_else(|| missing("destination elevation"))?;
    let e_src = fine_elev.valid(src).ok_or_else(|| missing("source elevation"))?;
    Ok((y_src - (e_v - e_src)).max(0.0))
}

/// Predictive law attached to one fine cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CellLaw {
    /// Outside the domain.
    Nodata,
    /// Inside a wet coarse cell.
    Wet(TPredictive),
    /// Inside a dry coarse cell; unreachable cells carry `pi = 0`.
    Dry(MixturePredictive),
}

impl CellLaw {
    pub fn mean(&self) -> Option<f64> {
        match self {
            CellLaw::Nodata => None,
            CellLaw::Wet(t) => Some(t.clamped_mean()),
            CellLaw::Dry(m) => Some(m.mean()),
        }
    }

    pub fn quantile(&self, p: f64) -> Result<Option<f64>> {
        Ok(match self {
            CellLaw::Nodata => None,
            CellLaw::Wet(t) => Some(t.quantile(p)?),
            CellLaw::Dry(m) => Some(m.quantile(p)?),
        })
    }

    pub fn exceed_prob(&self, d: f64) -> Result<Option<f64>> {
        Ok(match self {
            CellLaw::Nodata => None,
            CellLaw::Wet(t) => Some(t.exceed_prob(d)?),
            CellLaw::Dry(m) => Some(m.exceed_prob(d)?),
        })
    }
}

/// Everything the pipeline produces.
#[derive(Debug, Clone)]
pub struct DownscaleResult {
    pub mean: Grid,
    pub lower95: Grid,
    pub upper95: Grid,
    pub prob_exceed: Grid,
    pub laws: Vec<CellLaw>,
    pub sigma: SigmaEstimate,
    pub cost_field: CostField,
    /// Flooding-probability curve; `None` when no coarse cell is dry.
    pub pi: Option<PiCurve>,
    /// Deterministic downscaled depth inside wet coarse cells.
    pub y_d: Grid,
    /// Adjusted depth inside dry coarse cells (0 where unreachable).
    pub y_a: Grid,
    /// Indices into the input marks that were left out of the sigma estimate.
    pub excluded_marks: Vec<usize>,
    pub threshold: f64,
}

/// How the dry-cell mixture weight is chosen.
#[derive(Debug, Clone, Default)]
pub enum PiOverride {
    /// Estimate the curve from the coarse projection.
    #[default]
    Estimate,
    /// Use a previously fitted curve.
    Curve(PiCurve),
    /// `1{Y_A > 0}`, which reduces the mixture to the baseline in the
    /// small-sigma limit.
    PositiveAdjusted,
}

/// Hooks for holding pipeline components fixed across runs.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub sigma: Option<SigmaEstimate>,
    pub pi: PiOverride,
}

/// Intermediate products shared by the pipeline and the baseline.
struct Stages {
    wet_parent: Vec<bool>,
    domain: Vec<bool>,
    y_d: Grid,
    y_a: Grid,
    cost_field: CostField,
}

fn prepare(pair: &GridPair, coarse_depth: &Grid, config: &PdFloodConfig) -> Result<Stages> {
    coarse_depth.require_same_lattice(&pair.coarse, "coarse depth vs coarse elevation")?;
    let sources = flood_sources(pair, coarse_depth, config.wet_threshold)?;
    if sources.is_empty() {
        return Err(Error::invalid("coarse projection has no wet cells"));
    }
    let n = pair.fine.len();
    let mut wet_parent = vec![false; n];
    for &s in &sources {
        wet_parent[s] = true;
    }
    let domain: Vec<bool> = (0..n)
        .map(|k| !pair.fine.is_nodata(k) && !coarse_depth.is_nodata(pair.parent(k)))
        .collect();

    let y_d = downscale_masked(pair, coarse_depth, config.nodata_policy, Some(&wet_parent))?;
    let cost_field = cost_distance_with(
        &pair.fine,
        &sources,
        CostOptions {
            offset: config.cost_offset,
        },
    )?;
    let nodata = pair.fine.nodata();
    let y_a_values = (0..n)
        .into_par_iter()
        .map(|v| {
            if !domain[v] || wet_parent[v] {
                Ok(nodata)
            } else if cost_field.reachable(v) {
                downscale_dry_mean(&cost_field, &y_d, &pair.fine, v)
            } else {
                Ok(0.0)
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    let y_a = pair.fine.with_values(y_a_values)?;
    Ok(Stages {
        wet_parent,
        domain,
        y_d,
        y_a,
        cost_field,
    })
}

/// Marks inside the fine grid whose coarse parent is wet, and the indices
/// of those that were dropped.
fn usable_marks(
    pair: &GridPair,
    stages: &Stages,
    hwms: &[HighWaterMark],
) -> Result<(Vec<HighWaterMark>, Vec<usize>)> {
    let mut kept = Vec::new();
    let mut excluded = Vec::new();
    for (i, m) in hwms.iter().enumerate() {
        let (r, c) = pair.fine.cell_of(m.x, m.y).map_err(|_| {
            Error::invalid(format!("high-water mark {i} at ({}, {}) lies outside the fine grid", m.x, m.y))
        })?;
        if stages.wet_parent[pair.fine.index(r, c)] {
            kept.push(*m);
        } else {
            warn!(
                "high-water mark {i} at ({}, {}) lies in a dry coarse cell; excluded from sigma",
                m.x, m.y
            );
            excluded.push(i);
        }
    }
    Ok((kept, excluded))
}

/// Runs the full probabilistic pipeline.
pub fn run_pdflood(
    pair: &GridPair,
    coarse_depth: &Grid,
    hwms: &[HighWaterMark],
    config: &PdFloodConfig,
) -> Result<DownscaleResult> {
    run_pdflood_with(pair, coarse_depth, hwms, config, &Overrides::default())
}

/// Runs the pipeline, optionally holding sigma or the flooding-probability
/// curve fixed.
pub fn run_pdflood_with(
    pair: &GridPair,
    coarse_depth: &Grid,
    hwms: &[HighWaterMark],
    config: &PdFloodConfig,
    overrides: &Overrides,
) -> Result<DownscaleResult> {
    config.validate()?;
    let stages = prepare(pair, coarse_depth, config)?;

    let (sigma, excluded_marks) = match &overrides.sigma {
        Some(s) => (s.clone(), Vec::new()),
        None => {
            let (marks, excluded) = usable_marks(pair, &stages, hwms)?;
            if marks.len() < 3 {
                return Err(Error::invalid(format!(
                    "only {} high-water marks fall in wet coarse cells; at least 3 are needed",
                    marks.len()
                )));
            }
            let mut est = match estimate_sigma(&stages.y_d, &marks) {
                Err(Error::Numerical(_)) if config.sigma_floor.is_some() => SigmaEstimate {
                    sigma: 0.0,
                    dof: (marks.len() - 1) as u32,
                    n: marks.len(),
                    residuals: vec![0.0; marks.len()],
                },
                other => other?,
            };
            if let Some(floor) = config.sigma_floor {
                est.sigma = est.sigma.max(floor);
            }
            (est, excluded)
        }
    };
    if !(sigma.sigma > 0.0) || sigma.dof < 2 {
        return Err(Error::invalid(format!(
            "sigma {} with dof {} does not define a t law",
            sigma.sigma, sigma.dof
        )));
    }

    let any_dry = (0..pair.fine.len()).any(|k| stages.domain[k] && !stages.wet_parent[k]);
    let pi = match &overrides.pi {
        PiOverride::Curve(c) => Some(c.clone()),
        PiOverride::Estimate if any_dry => Some(estimate_pi(
            coarse_depth,
            &pair.coarse,
            config.wet_threshold,
            &config.pi,
        )?),
        _ => None,
    };
    let indicator = matches!(overrides.pi, PiOverride::PositiveAdjusted);

    let tail = 0.5 * (1.0 - config.interval);
    let (p_lo, p_hi) = (tail, 1.0 - tail);
    let z_lo = t_quantile(p_lo, sigma.dof)?;
    let z_hi = t_quantile(p_hi, sigma.dof)?;
    let s = sigma.sigma;
    let dof = sigma.dof;
    let threshold = config.threshold;

    let cells = (0..pair.fine.len())
        .into_par_iter()
        .map(|v| -> Result<(CellLaw, [f64; 4])> {
            if !stages.domain[v] {
                return Ok((CellLaw::Nodata, [f64::NAN; 4]));
            }
            if stages.wet_parent[v] {
                let t = TPredictive::new(stages.y_d.value(v), s, dof)?;
                let lo = (t.location + s * z_lo).max(0.0);
                let hi = (t.location + s * z_hi).max(0.0);
                return Ok((CellLaw::Wet(t), [t.clamped_mean(), lo, hi, t.exceed_prob(threshold)?]));
            }
            let y_a = stages.y_a.value(v);
            let weight = if !stages.cost_field.reachable(v) {
                0.0
            } else if indicator {
                if y_a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                pi.as_ref().map_or(0.0, |c| c.pi_at(pair.fine.value(v)))
            };
            let m = MixturePredictive::new(weight, TPredictive::new(y_a, s, dof)?)?;
            Ok((
                CellLaw::Dry(m),
                [m.mean(), m.quantile(p_lo)?, m.quantile(p_hi)?, m.exceed_prob(threshold)?],
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let nodata = pair.fine.nodata();
    let column = |j: usize| -> Result<Grid> {
        pair.fine.with_values(
            cells
                .iter()
                .map(|(law, vals)| if matches!(law, CellLaw::Nodata) { nodata } else { vals[j] })
                .collect(),
        )
    };
    let mean = column(0)?;
    let lower95 = column(1)?;
    let upper95 = column(2)?;
    let prob_exceed = column(3)?;
    let laws = cells.into_iter().map(|(law, _)| law).collect();

    Ok(DownscaleResult {
        mean,
        lower95,
        upper95,
        prob_exceed,
        laws,
        sigma,
        cost_field: stages.cost_field,
        pi,
        y_d: stages.y_d,
        y_a: stages.y_a,
        excluded_marks,
        threshold,
    })
}

/// Deterministic cost-growing baseline: `Y_D` inside wet coarse cells,
/// `Y_A` outside, 0 where no source can reach.
pub fn run_costgrow_baseline(pair: &GridPair, coarse_depth: &Grid, config: &PdFloodConfig) -> Result<Grid> {
    config.validate()?;
    let stages = prepare(pair, coarse_depth, config)?;
    let nodata = pair.fine.nodata();
    let values = (0..pair.fine.len())
        .map(|v| {
            if !stages.domain[v] {
                nodata
            } else if stages.wet_parent[v] {
                stages.y_d.value(v)
            } else {
                stages.y_a.value(v)
            }
        })
        .collect();
    pair.fine.with_values(values)
}
