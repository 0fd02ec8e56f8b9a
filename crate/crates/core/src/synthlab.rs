//! Synthetic floodplains with a known answer.
//!
//! Terrain is a V-shaped valley around a straight channel row with smooth
//! seeded undulations. The truth oracle is a connected bathtub: every cell
//! reachable from the channel through cells below the water surface is
//! flooded to that surface. A coarse projection is produced by running the
//! same bathtub on block-averaged terrain, optionally with a smooth error on
//! the coarse water surface.

use std::collections::VecDeque;
use std::f64::consts::PI;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::downscale::HighWaterMark;
use crate::emucal::DesignSet;
use crate::error::{Error, Result};
use crate::raster::{aggregate, Grid, GridPair};

/// Number of sinusoids summed into the terrain noise.
const NOISE_WAVES: usize = 5;

/// Parameters of a synthetic valley.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValleySpec {
    pub nrows: usize,
    pub ncols: usize,
    pub cellsize: f64,
    pub channel_row: usize,
    /// Elevation gain per row away from the channel, metres.
    pub cross_slope: f64,
    pub base_elev: f64,
    /// Bound on the absolute terrain noise, metres.
    pub noise_amp: f64,
    pub seed: u64,
}

impl ValleySpec {
    fn validate(&self) -> Result<()> {
        if self.nrows == 0 || self.ncols == 0 {
            return Err(Error::invalid("valley dimensions must be positive"));
        }
        if !(self.cellsize > 0.0) {
            return Err(Error::invalid("valley cellsize must be > 0"));
        }
        if self.channel_row >= self.nrows {
            return Err(Error::invalid(format!(
                "channel row {} outside {} rows",
                self.channel_row, self.nrows
            )));
        }
        if !(self.noise_amp >= 0.0) || !self.cross_slope.is_finite() || !self.base_elev.is_finite() {
            return Err(Error::invalid("valley slope, base and noise must be finite, noise >= 0"));
        }
        Ok(())
    }

    /// Linear indices of the channel row.
    pub fn channel_cells(&self) -> Vec<usize> {
        (0..self.ncols).map(|c| self.channel_row * self.ncols + c).collect()
    }
}

/// Smooth seeded field bounded by `amp`: a convex combination of plane
/// sinusoids with wavelengths of 12 to 60 cells.
fn smooth_field(seed: u64, amp: f64) -> impl Fn(usize, usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<(f64, f64, f64, f64)> = (0..NOISE_WAVES)
        .map(|_| {
            let wavelength: f64 = rng.random_range(12.0..60.0);
            let angle: f64 = rng.random_range(0.0..PI);
            let phase: f64 = rng.random_range(0.0..2.0 * PI);
            let weight: f64 = rng.random_range(0.5..1.0);
            let k = 2.0 * PI / wavelength;
            (k * angle.cos(), k * angle.sin(), phase, weight)
        })
        .collect();
    let total: f64 = waves.iter().map(|w| w.3).sum();
    move |r, c| {
        if amp == 0.0 {
            return 0.0;
        }
        let s: f64 = waves
            .iter()
            .map(|&(kx, ky, phase, w)| w * (kx * c as f64 + ky * r as f64 + phase).sin())
            .sum();
        amp * s / total
    }
}

/// `E(r, c) = base + cross_slope |r - channel_row| + noise(r, c)`.
pub fn make_valley(spec: &ValleySpec) -> Result<Grid> {
    spec.validate()?;
    let noise = smooth_field(spec.seed, spec.noise_amp);
    Grid::from_fn(spec.nrows, spec.ncols, spec.cellsize, 0.0, 0.0, -9999.0, |r, c| {
        spec.base_elev + spec.cross_slope * (r as f64 - spec.channel_row as f64).abs() + noise(r, c)
    })
}

/// Bathtub flood truth.
#[derive(Debug, Clone)]
pub struct FloodTruth {
    pub water_surface: f64,
    pub depth: Grid,
    pub wet_mask: Vec<bool>,
}

/// Floods every cell 8-connected to a channel cell through cells with
/// `E < W`, to depth `W - E`.
pub fn bathtub_flood(elev: &Grid, channel_cells: &[usize], water_surface: f64) -> Result<FloodTruth> {
    if !water_surface.is_finite() {
        return Err(Error::invalid("water surface must be finite"));
    }
    let below = |k: usize| elev.valid(k).is_some_and(|e| e < water_surface);
    let n = elev.len();
    let mut wet = vec![false; n];
    let mut queue = VecDeque::new();
    for &k in channel_cells {
        if k >= n {
            return Err(Error::invalid(format!("channel cell {k} outside grid")));
        }
        if below(k) && !wet[k] {
            wet[k] = true;
            queue.push_back(k);
        }
    }
    if queue.is_empty() {
        return Err(Error::invalid(format!(
            "no channel cell lies below the water surface {water_surface}"
        )));
    }
    let (nrows, ncols) = (elev.nrows() as isize, elev.ncols() as isize);
    while let Some(k) = queue.pop_front() {
        let (r, c) = elev.row_col(k);
        for dr in -1..=1isize {
            for dc in -1..=1isize {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if (dr == 0 && dc == 0) || nr < 0 || nc < 0 || nr >= nrows || nc >= ncols {
                    continue;
                }
                let next = (nr * ncols + nc) as usize;
                if !wet[next] && below(next) {
                    wet[next] = true;
                    queue.push_back(next);
                }
            }
        }
    }
    let values = (0..n)
        .map(|k| match elev.valid(k) {
            None => elev.nodata(),
            Some(e) if wet[k] => water_surface - e,
            Some(_) => 0.0,
        })
        .collect();
    Ok(FloodTruth {
        water_surface,
        depth: elev.with_values(values)?,
        wet_mask: wet,
    })
}

/// Coarse projection: bathtub on block-averaged terrain seeded from the
/// coarse cells containing the fine channel. All-dry when no coarse channel
/// cell lies below `W`.
pub fn coarse_flood(fine_elev: &Grid, factor: usize, channel: &[usize], water_surface: f64) -> Result<Grid> {
    let coarse_elev = if factor == 1 {
        fine_elev.clone()
    } else {
        aggregate(fine_elev, factor)?
    };
    let mut coarse_channel: Vec<usize> = channel
        .iter()
        .map(|&k| {
            let (r, c) = fine_elev.row_col(k);
            coarse_elev.index(r / factor, c / factor)
        })
        .collect();
    coarse_channel.sort_unstable();
    coarse_channel.dedup();
    let seeded = coarse_channel
        .iter()
        .any(|&k| coarse_elev.valid(k).is_some_and(|e| e < water_surface));
    if !seeded {
        return coarse_elev.map(|_| 0.0);
    }
    Ok(bathtub_flood(&coarse_elev, &coarse_channel, water_surface)?.depth)
}

/// Draws `k` distinct wet cells uniformly and reports their truth depth
/// plus Gaussian noise, clamped at zero.
pub fn sample_hwms(truth: &FloodTruth, k: usize, noise_sd: f64, seed: u64) -> Result<Vec<HighWaterMark>> {
    if !(noise_sd >= 0.0) {
        return Err(Error::invalid("noise sd must be >= 0"));
    }
    let wet: Vec<usize> = (0..truth.wet_mask.len()).filter(|&i| truth.wet_mask[i]).collect();
    if wet.len() < k {
        return Err(Error::invalid(format!(
            "asked for {k} marks but only {} cells are wet",
            wet.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sd).map_err(|e| Error::invalid(e.to_string()))?;
    let mut picks: Vec<usize> = sample(&mut rng, wet.len(), k).into_iter().map(|i| wet[i]).collect();
    picks.sort_unstable();
    Ok(picks
        .into_iter()
        .map(|cell| {
            let (r, c) = truth.depth.row_col(cell);
            let (x, y) = truth.depth.center(r, c);
            let eps = if noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            HighWaterMark {
                x,
                y,
                depth: (truth.depth.value(cell) + eps).max(0.0),
            }
        })
        .collect())
}

/// Analytic forward model `depth_i = alpha_i + beta_i ln(theta)` standing in
/// for a hydraulic model run at roughness `theta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Admissible roughness range.
pub const THETA_RANGE: (f64, f64) = (0.01, 0.1);

impl ToyModel {
    /// Five observation locations with fixed constants.
    pub fn fixture() -> Self {
        ToyModel {
            alpha: vec![2.0, 2.5, 3.1, 1.8, 2.2],
            beta: vec![0.40, 0.50, 0.60, 0.35, 0.45],
        }
    }

    pub fn locations(&self) -> usize {
        self.alpha.len()
    }

    pub fn eval(&self, theta: f64) -> Result<Vec<f64>> {
        toy_forward_model(theta, &self.alpha, &self.beta)
    }

    /// Design runs at `thetas` and observations generated at `theta0` with
    /// Gaussian noise of sd `noise_sd`.
    pub fn design(&self, thetas: &[f64], theta0: f64, noise_sd: f64, seed: u64) -> Result<DesignSet> {
        let outputs = thetas.iter().map(|&t| self.eval(t)).collect::<Result<Vec<_>>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, noise_sd).map_err(|e| Error::invalid(e.to_string()))?;
        let obs = self
            .eval(theta0)?
            .into_iter()
            .map(|y| if noise_sd > 0.0 { y + noise.sample(&mut rng) } else { y })
            .collect();
        DesignSet::new(thetas.to_vec(), outputs, obs)
    }
}

/// `alpha_i + beta_i ln(theta)` for `theta` strictly inside the roughness range.
pub fn toy_forward_model(theta: f64, alpha: &[f64], beta: &[f64]) -> Result<Vec<f64>> {
    if !(theta > THETA_RANGE.0 && theta < THETA_RANGE.1) {
        return Err(Error::invalid(format!(
            "theta {theta} outside ({}, {})",
            THETA_RANGE.0, THETA_RANGE.1
        )));
    }
    if alpha.len() != beta.len() {
        return Err(Error::invalid("alpha and beta lengths differ"));
    }
    let lt = theta.ln();
    Ok(alpha.iter().zip(beta).map(|(a, b)| a + b * lt).collect())
}

/// Full description of a synthetic downscaling case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub valley: ValleySpec,
    pub water_surface: f64,
    pub factor: usize,
    pub hwm_count: usize,
    pub hwm_noise_sd: f64,
    pub hwm_seed: u64,
    /// Bound on a smooth error added to the coarse water surface in wet
    /// coarse cells, standing in for coarse-model bias.
    #[serde(default)]
    pub coarse_error_amp: f64,
    #[serde(default)]
    pub coarse_error_seed: u64,
}

impl Scenario {
    /// 200x200 fine cells of 5 m, coarsened by 2, five noisy marks and up to
    /// 0.1 m of coarse water-surface error.
    pub fn benchmark() -> Self {
        Scenario {
            valley: ValleySpec {
                nrows: 200,
                ncols: 200,
                cellsize: 5.0,
                channel_row: 100,
                cross_slope: 0.05,
                base_elev: 20.0,
                noise_amp: 0.4,
                seed: 11,
            },
            water_surface: 22.0,
            factor: 2,
            hwm_count: 5,
            hwm_noise_sd: 0.05,
            hwm_seed: 7,
            coarse_error_amp: 0.1,
            coarse_error_seed: 5,
        }
    }
}

/// Inputs and truth generated from a [`Scenario`].
#[derive(Debug, Clone)]
pub struct SyntheticCase {
    pub pair: GridPair,
    pub coarse_depth: Grid,
    pub truth: FloodTruth,
    pub hwms: Vec<HighWaterMark>,
}

/// Adds a smooth error bounded by `amp` to the depth of wet cells, clamping
/// at zero. Dry cells are left untouched.
pub fn perturb_wet(depth: &Grid, amp: f64, seed: u64) -> Result<Grid> {
    if !(amp >= 0.0) {
        return Err(Error::invalid("coarse error amplitude must be >= 0"));
    }
    let err = smooth_field(seed, amp);
    let values = (0..depth.len())
        .map(|k| match depth.valid(k) {
            Some(d) if d > 0.0 => {
                let (r, c) = depth.row_col(k);
                (d + err(r, c)).max(0.0)
            }
            Some(d) => d,
            None => depth.nodata(),
        })
        .collect();
    depth.with_values(values)
}

pub fn generate(scenario: &Scenario) -> Result<SyntheticCase> {
    let fine = make_valley(&scenario.valley)?;
    let channel = scenario.valley.channel_cells();
    let truth = bathtub_flood(&fine, &channel, scenario.water_surface)?;
    let coarse_depth = coarse_flood(&fine, scenario.factor, &channel, scenario.water_surface)?;
    let coarse_depth = perturb_wet(&coarse_depth, scenario.coarse_error_amp, scenario.coarse_error_seed)?;
    let coarse_elev = if scenario.factor == 1 {
        fine.clone()
    } else {
        aggregate(&fine, scenario.factor)?
    };
    let hwms = sample_hwms(&truth, scenario.hwm_count, scenario.hwm_noise_sd, scenario.hwm_seed)?;
    let pair = GridPair::with_factor(fine, coarse_elev, scenario.factor)?;
    Ok(SyntheticCase {
        pair,
        coarse_depth,
        truth,
        hwms,
    })
}
