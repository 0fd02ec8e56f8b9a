//! Two-stage calibration of a scalar model parameter (channel roughness).
//!
//! Stage one fits an independent GP emulator over `theta` at every
//! observation location. Stage two fixes the discrepancy at the average
//! residual of the best few design runs and samples the posterior of
//! `(theta, sigma_eps)` by random-walk Metropolis.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::downscale::csv_error;
use crate::error::{Error, Result};
use crate::gp::{fit_mle, Gp1d, MleBounds, SeHyper};
use crate::synthlab::THETA_RANGE;

/// Number of best design runs averaged into the discrepancy.
const BEST_DESIGNS: usize = 3;

/// Model projections at `p` roughness values and observations at `n` locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSet {
    pub thetas: Vec<f64>,
    /// `outputs[j][i]`: model depth at location `i` for design `j`.
    pub outputs: Vec<Vec<f64>>,
    pub obs: Vec<f64>,
}

impl DesignSet {
    /// Validates shapes and values. At least three runs are required here;
    /// emulator fitting asks for four.
    pub fn new(thetas: Vec<f64>, outputs: Vec<Vec<f64>>, obs: Vec<f64>) -> Result<Self> {
        let (lo, hi) = THETA_RANGE;
        if thetas.len() < BEST_DESIGNS {
            return Err(Error::invalid(format!(
                "design needs at least {BEST_DESIGNS} runs, got {}",
                thetas.len()
            )));
        }
        if outputs.len() != thetas.len() {
            return Err(Error::invalid("one output row per design theta required"));
        }
        if obs.is_empty() {
            return Err(Error::invalid("at least one observation location required"));
        }
        if let Some(t) = thetas.iter().find(|&&t| !(t > lo && t < hi)) {
            return Err(Error::invalid(format!("design theta {t} outside ({lo}, {hi})")));
        }
        let mut sorted = thetas.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("design thetas must be distinct"));
        }
        if outputs.iter().any(|row| row.len() != obs.len()) {
            return Err(Error::invalid("every design row needs one value per observation"));
        }
        if outputs.iter().flatten().chain(&obs).any(|v| !v.is_finite()) {
            return Err(Error::invalid("design outputs and observations must be finite"));
        }
        Ok(DesignSet { thetas, outputs, obs })
    }

    pub fn runs(&self) -> usize {
        self.thetas.len()
    }

    pub fn locations(&self) -> usize {
        self.obs.len()
    }

    /// Outputs at location `i` across designs.
    pub fn column(&self, i: usize) -> Vec<f64> {
        self.outputs.iter().map(|row| row[i]).collect()
    }

    /// Mean absolute error of design `j` against the observations.
    pub fn mae(&self, j: usize) -> f64 {
        let n = self.obs.len() as f64;
        self.outputs[j].iter().zip(&self.obs).map(|(y, z)| (y - z).abs()).sum::<f64>() / n
    }
}

/// Reads a design CSV (`theta,loc_1,...,loc_n`) and an observation CSV
/// (`z_1,...,z_n`, one row).
pub fn read_design(design_path: &Path, obs_path: &Path) -> Result<DesignSet> {
    let mut reader = csv::Reader::from_path(design_path).map_err(|e| csv_error(design_path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(design_path, e))?.clone();
    if headers.get(0).map(str::trim) != Some("theta") || headers.len() < 2 {
        return Err(parse_error(design_path, 1, "expected header theta,loc_1,..."));
    }
    let mut thetas = Vec::new();
    let mut outputs = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(design_path, e))?;
        let row = parse_row(&record, design_path, k + 2)?;
        if row.len() != headers.len() {
            return Err(parse_error(design_path, k + 2, "wrong number of fields"));
        }
        thetas.push(row[0]);
        outputs.push(row[1..].to_vec());
    }

    let mut reader = csv::Reader::from_path(obs_path).map_err(|e| csv_error(obs_path, e))?;
    let mut rows = reader.records();
    let record = match rows.next() {
        Some(r) => r.map_err(|e| csv_error(obs_path, e))?,
        None => return Err(parse_error(obs_path, 2, "no observation row")),
    };
    let obs = parse_row(&record, obs_path, 2)?;
    if rows.next().is_some() {
        return Err(parse_error(obs_path, 3, "expected a single observation row"));
    }
    DesignSet::new(thetas, outputs, obs)
}

pub fn write_design(design: &DesignSet, design_path: &Path, obs_path: &Path) -> Result<()> {
    let n = design.locations();
    let mut w = csv::Writer::from_path(design_path).map_err(|e| csv_error(design_path, e))?;
    let header: Vec<String> = std::iter::once("theta".to_string())
        .chain((1..=n).map(|i| format!("loc_{i}")))
        .collect();
    w.write_record(&header).map_err(|e| csv_error(design_path, e))?;
    for (t, row) in design.thetas.iter().zip(&design.outputs) {
        let rec: Vec<String> = std::iter::once(t).chain(row).map(|v| v.to_string()).collect();
        w.write_record(&rec).map_err(|e| csv_error(design_path, e))?;
    }
    w.flush().map_err(|e| Error::io(design_path, e))?;

    let mut w = csv::Writer::from_path(obs_path).map_err(|e| csv_error(obs_path, e))?;
    let header: Vec<String> = (1..=n).map(|i| format!("z_{i}")).collect();
    w.write_record(&header).map_err(|e| csv_error(obs_path, e))?;
    let rec: Vec<String> = design.obs.iter().map(|v| v.to_string()).collect();
    w.write_record(&rec).map_err(|e| csv_error(obs_path, e))?;
    w.flush().map_err(|e| Error::io(obs_path, e))
}

fn parse_row(record: &csv::StringRecord, path: &Path, line: usize) -> Result<Vec<f64>> {
    record
        .iter()
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| parse_error(path, line, &format!("not a number: {s:?}")))
        })
        .collect()
}

fn parse_error(path: &Path, line: usize, message: &str) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.to_string(),
    }
}

/// GP emulator of the model output at one location as a function of `theta`.
#[derive(Debug, Clone)]
pub struct Emulator1D {
    gp: Gp1d,
}

impl Emulator1D {
    pub fn fit(thetas: &[f64], outputs: &[f64], bounds: &MleBounds) -> Result<Self> {
        Ok(Emulator1D {
            gp: fit_mle(thetas, outputs, bounds)?,
        })
    }

    pub fn hyper(&self) -> SeHyper {
        self.gp.hyper()
    }

    pub fn mean(&self, theta: f64) -> f64 {
        self.gp.mean(theta)
    }

    /// Predictive mean and variance of a model run at `theta`, nugget included.
    pub fn predict(&self, theta: f64) -> (f64, f64) {
        self.gp.predict_observation(theta)
    }
}

pub fn fit_emulators(design: &DesignSet) -> Result<Vec<Emulator1D>> {
    if design.runs() < 4 {
        return Err(Error::invalid(format!(
            "emulators need at least 4 design runs, got {}",
            design.runs()
        )));
    }
    let bounds = MleBounds::default();
    (0..design.locations())
        .into_par_iter()
        .map(|i| Emulator1D::fit(&design.thetas, &design.column(i), &bounds))
        .collect()
}

/// Indices of the design runs with the smallest MAE, ties to the lower index.
pub fn best_designs(design: &DesignSet, count: usize) -> Vec<usize> {
    let maes: Vec<f64> = (0..design.runs()).map(|j| design.mae(j)).collect();
    let mut order: Vec<usize> = (0..design.runs()).collect();
    order.sort_by(|&a, &b| maes[a].total_cmp(&maes[b]).then(a.cmp(&b)));
    order.truncate(count);
    order
}

/// Per-location discrepancy `mean_j (Z_i - Y_ji)` over the three best runs,
/// so that `Z = eta(theta) + delta + eps`.
pub fn estimate_discrepancy(design: &DesignSet) -> Result<Vec<f64>> {
    if design.runs() < BEST_DESIGNS {
        return Err(Error::invalid(format!("discrepancy needs at least {BEST_DESIGNS} runs")));
    }
    let best = best_designs(design, BEST_DESIGNS);
    Ok((0..design.locations())
        .map(|i| {
            best.iter().map(|&j| design.obs[i] - design.outputs[j][i]).sum::<f64>() / best.len() as f64
        })
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub target_acceptance: f64,
    pub seed: u64,
    /// Add emulator predictive variance to the likelihood.
    pub emulator_variance: bool,
    /// Half-normal scale for `sigma_eps`; derived from the data when absent.
    pub sigma_prior_scale: Option<f64>,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            iterations: 20_000,
            burn_in: 5_000,
            target_acceptance: 0.35,
            seed: 1,
            emulator_variance: true,
            sigma_prior_scale: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PosteriorSummary {
    pub theta_star: f64,
    pub credible_interval: [f64; 2],
    pub acceptance_rate: f64,
    pub mc_standard_error: f64,
    pub sigma_eps: f64,
    pub delta_hat: Vec<f64>,
    pub seed: u64,
    pub samples: usize,
}

#[derive(Debug, Clone)]
pub struct CalibrationRun {
    pub design: DesignSet,
    pub emulators: Vec<Emulator1D>,
    pub delta_hat: Vec<f64>,
    /// Post burn-in draws of `theta`.
    pub posterior_samples: Vec<f64>,
    pub sigma_samples: Vec<f64>,
    pub theta_star: f64,
    pub sigma_eps: f64,
    pub acceptance_rate: f64,
    pub seed: u64,
}

fn to_theta(u: f64) -> f64 {
    let (lo, hi) = THETA_RANGE;
    let s = 1.0 / (1.0 + (-u).exp());
    lo + (hi - lo) * s
}

fn to_unconstrained(theta: f64) -> f64 {
    let (lo, hi) = THETA_RANGE;
    let s = (theta - lo) / (hi - lo);
    (s / (1.0 - s)).ln()
}

/// Log posterior in `(u, w) = (logit theta, ln sigma_eps)`, Jacobians included.
fn log_posterior(
    u: f64,
    w: f64,
    emulators: &[Emulator1D],
    target: &[f64],
    prior_scale: f64,
    emulator_variance: bool,
) -> f64 {
    let theta = to_theta(u);
    let sigma = w.exp();
    let mut ll = 0.0;
    for (em, z) in emulators.iter().zip(target) {
        let (m, v) = em.predict(theta);
        let var = sigma * sigma + if emulator_variance { v } else { 0.0 };
        ll -= 0.5 * (var.ln() + (z - m).powi(2) / var);
    }
    // uniform prior on theta: d theta / du is proportional to s (1 - s)
    let log_jac_u = -u.abs() - 2.0 * (1.0 + (-u.abs()).exp()).ln();
    let log_prior_sigma = -0.5 * (sigma / prior_scale).powi(2) + w;
    ll + log_jac_u + log_prior_sigma
}

pub fn calibrate(design: &DesignSet, config: &McmcConfig) -> Result<CalibrationRun> {
    let delta_hat = estimate_discrepancy(design)?;
    calibrate_with_discrepancy(design, delta_hat, config)
}

/// As [`calibrate`] with a caller-supplied discrepancy.
pub fn calibrate_with_discrepancy(design: &DesignSet, delta_hat: Vec<f64>, config: &McmcConfig) -> Result<CalibrationRun> {
    if config.iterations <= config.burn_in || !(config.target_acceptance > 0.0 && config.target_acceptance < 1.0) {
        return Err(Error::invalid("need iterations > burn_in and target acceptance in (0, 1)"));
    }
    if delta_hat.len() != design.locations() {
        return Err(Error::invalid("one discrepancy value per observation location required"));
    }
    let emulators = fit_emulators(design)?;
    if delta_hat.iter().any(|d| !d.is_finite()) {
        return Err(Error::Numerical("discrepancy is not finite".into()));
    }
    let target: Vec<f64> = design.obs.iter().zip(&delta_hat).map(|(z, d)| z - d).collect();

    // start and prior scale come from the discrepancy-corrected target, so
    // shifting observations and discrepancy together leaves the chain alone
    let corrected = DesignSet {
        obs: target.clone(),
        ..design.clone()
    };
    let best = best_designs(&corrected, 1)[0];
    let residuals: Vec<f64> = target.iter().zip(&design.outputs[best]).map(|(z, y)| z - y).collect();
    let prior_scale = match config.sigma_prior_scale {
        Some(s) if s > 0.0 => s,
        Some(s) => return Err(Error::invalid(format!("sigma prior scale must be > 0, got {s}"))),
        None => sample_sd(&residuals).max(1e-3),
    };

    let lp = |u: f64, w: f64| log_posterior(u, w, &emulators, &target, prior_scale, config.emulator_variance);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let unit = Uniform::new(0.0f64, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    let mut u = to_unconstrained(design.thetas[best]);
    let mut w = (0.5 * prior_scale).ln();
    let mut current = lp(u, w);
    if !current.is_finite() {
        return Err(Error::Numerical("log posterior is not finite at the starting point".into()));
    }
    let mut log_step = (0.5f64).ln();
    const BATCH: usize = 50;
    let mut batch_accepts = 0usize;
    let mut accepted_after = 0usize;
    let kept = config.iterations - config.burn_in;
    let mut thetas = Vec::with_capacity(kept);
    let mut sigmas = Vec::with_capacity(kept);

    for it in 0..config.iterations {
        let step = log_step.exp();
        let du: f64 = StandardNormal.sample(&mut rng);
        let dw: f64 = StandardNormal.sample(&mut rng);
        let (pu, pw) = (u + step * du, w + 0.5 * step * dw);
        let proposed = lp(pu, pw);
        let accept = proposed.is_finite() && unit.sample(&mut rng).ln() < proposed - current;
        if accept {
            u = pu;
            w = pw;
            current = proposed;
        }
        if it < config.burn_in {
            batch_accepts += accept as usize;
            if (it + 1) % BATCH == 0 {
                let rate = batch_accepts as f64 / BATCH as f64;
                let gain = (10.0 / (((it + 1) / BATCH) as f64).sqrt()).min(1.0);
                log_step += gain * (rate - config.target_acceptance);
                batch_accepts = 0;
            }
        } else {
            accepted_after += accept as usize;
            thetas.push(to_theta(u));
            sigmas.push(w.exp());
        }
    }

    let acceptance_rate = accepted_after as f64 / kept as f64;
    if !(0.05..=0.95).contains(&acceptance_rate) {
        return Err(Error::Numerical(format!(
            "MCMC acceptance rate {acceptance_rate:.3} outside [0.05, 0.95]"
        )));
    }
    let theta_star = thetas.iter().sum::<f64>() / kept as f64;
    let sigma_eps = sigmas.iter().sum::<f64>() / kept as f64;
    Ok(CalibrationRun {
        design: design.clone(),
        emulators,
        delta_hat,
        posterior_samples: thetas,
        sigma_samples: sigmas,
        theta_star,
        sigma_eps,
        acceptance_rate,
        seed: config.seed,
    })
}

fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return xs.first().map_or(0.0, |x| x.abs());
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Empirical quantile by linear interpolation between order statistics.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Monte-Carlo standard error of the mean by non-overlapping batch means.
pub fn batch_means_se(samples: &[f64]) -> f64 {
    let size = (samples.len() as f64).sqrt().floor().max(1.0) as usize;
    let batches: Vec<f64> = samples
        .chunks_exact(size)
        .map(|c| c.iter().sum::<f64>() / size as f64)
        .collect();
    if batches.len() < 2 {
        return f64::NAN;
    }
    sample_sd(&batches) / (batches.len() as f64).sqrt()
}

impl CalibrationRun {
    pub fn summary(&self) -> PosteriorSummary {
        let mut sorted = self.posterior_samples.clone();
        sorted.sort_by(f64::total_cmp);
        PosteriorSummary {
            theta_star: self.theta_star,
            credible_interval: [quantile(&sorted, 0.025), quantile(&sorted, 0.975)],
            acceptance_rate: self.acceptance_rate,
            mc_standard_error: batch_means_se(&self.posterior_samples),
            sigma_eps: self.sigma_eps,
            delta_hat: self.delta_hat.clone(),
            seed: self.seed,
            samples: self.posterior_samples.len(),
        }
    }
}
