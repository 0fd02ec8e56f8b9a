//! Subcommand implementations and the JSON run configuration.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use pdflood::downscale::{read_hwms, run_costgrow_baseline, run_pdflood, write_hwms, PdFloodConfig};
use pdflood::emucal::{calibrate as run_calibration, read_design, write_design, McmcConfig};
use pdflood::evalharness::{compare, evaluate as score, EvalOptions, MaeRegion, Prediction};
use pdflood::floodprob::PiSummary;
use pdflood::raster::{read_ascii_grid, write_ascii_grid, write_ascii_grid_with_precision};
use pdflood::synthlab::{generate, Scenario, ToyModel};
use pdflood::{Grid, GridPair};
use serde::{Deserialize, Serialize};

use crate::{CalibrateArgs, EvaluateArgs, RunArgs, SynthArgs};

#[derive(Debug)]
pub enum CliError {
    Input(String),
    Align(String),
    Numeric(String),
}

impl CliError {
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Input(_) => "E_INPUT",
            CliError::Align(_) => "E_ALIGN",
            CliError::Numeric(_) => "E_NUMERIC",
        }
    }

    pub fn exit_status(&self) -> u8 {
        match self {
            CliError::Input(_) | CliError::Align(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) | CliError::Align(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<pdflood::Error> for CliError {
    fn from(e: pdflood::Error) -> Self {
        let msg = e.to_string();
        match e {
            pdflood::Error::Alignment(_) => CliError::Align(msg),
            pdflood::Error::Numerical(_) => CliError::Numeric(msg),
            _ => CliError::Input(msg),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn input(msg: impl Into<String>) -> CliError {
    CliError::Input(msg.into())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProductRef {
    pub name: String,
    pub path: PathBuf,
}

/// Contents of `--config`. Relative paths resolve against the config file's
/// directory.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub fine_dem: Option<PathBuf>,
    pub coarse_dem: Option<PathBuf>,
    pub coarse_depth: Option<PathBuf>,
    pub hwm: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub factor: Option<usize>,
    pub precision: Option<usize>,
    pub seed: Option<u64>,
    pub pdflood: PdFloodConfig,
    pub mcmc: McmcConfig,
    pub design: Option<PathBuf>,
    pub observations: Option<PathBuf>,
    pub scenario: Option<Scenario>,
    pub truth: Option<PathBuf>,
    pub products: Vec<ProductRef>,
    pub eval: EvalOptions,
}

impl RunConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| input(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| input(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut Option<PathBuf>| {
            if let Some(inner) = p.as_mut() {
                if inner.is_relative() {
                    *inner = base.join(&*inner);
                }
            }
        };
        for p in [
            &mut cfg.fine_dem,
            &mut cfg.coarse_dem,
            &mut cfg.coarse_depth,
            &mut cfg.hwm,
            &mut cfg.output_dir,
            &mut cfg.design,
            &mut cfg.observations,
            &mut cfg.truth,
        ] {
            rebase(p);
        }
        for prod in cfg.products.iter_mut() {
            if prod.path.is_relative() {
                prod.path = base.join(&prod.path);
            }
        }
        Ok(cfg)
    }
}

fn override_with<T>(slot: &mut Option<T>, flag: Option<T>) {
    if flag.is_some() {
        *slot = flag;
    }
}

fn existing(path: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    let path = path.ok_or_else(|| input(format!("no {what} given")))?;
    if !path.is_file() {
        return Err(input(format!("{what} not found: {}", path.display())));
    }
    Ok(path)
}

fn output_dir(path: Option<PathBuf>) -> Result<PathBuf> {
    let dir = path.ok_or_else(|| input("no output directory given"))?;
    fs::create_dir_all(&dir).map_err(|e| input(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| input(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| input(format!("cannot write {}: {e}", path.display())))
}

struct RunInputs {
    pair: GridPair,
    coarse_depth: Grid,
    out: PathBuf,
    precision: Option<usize>,
    config: PdFloodConfig,
    hwm: Option<PathBuf>,
}

fn run_inputs(args: RunArgs, need_hwm: bool) -> Result<RunInputs> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    override_with(&mut cfg.fine_dem, args.fine_dem);
    override_with(&mut cfg.coarse_dem, args.coarse_dem);
    override_with(&mut cfg.coarse_depth, args.coarse_depth);
    override_with(&mut cfg.hwm, args.hwm);
    override_with(&mut cfg.output_dir, args.out);
    override_with(&mut cfg.factor, args.factor);
    override_with(&mut cfg.precision, args.precision);
    if let Some(t) = args.threshold {
        cfg.pdflood.threshold = t;
    }
    if let Some(t) = args.wet_threshold {
        cfg.pdflood.wet_threshold = t;
    }
    if let Some(k) = args.bins {
        cfg.pdflood.pi.bins = k;
    }
    if cfg.factor == Some(0) {
        return Err(input("factor must be >= 1"));
    }
    if !(cfg.pdflood.threshold > 0.0) {
        return Err(input("threshold must be > 0"));
    }

    let fine_path = existing(cfg.fine_dem, "fine DEM")?;
    let coarse_path = existing(cfg.coarse_dem, "coarse DEM")?;
    let depth_path = existing(cfg.coarse_depth, "coarse depth")?;
    let hwm = if need_hwm {
        Some(existing(cfg.hwm, "high-water mark file")?)
    } else {
        None
    };
    let fine = read_ascii_grid(&fine_path)?;
    let coarse = read_ascii_grid(&coarse_path)?;
    let pair = match cfg.factor {
        Some(f) => GridPair::with_factor(fine, coarse, f)?,
        None => GridPair::new(fine, coarse)?,
    };
    Ok(RunInputs {
        pair,
        coarse_depth: read_ascii_grid(&depth_path)?,
        out: output_dir(cfg.output_dir)?,
        precision: cfg.precision,
        config: cfg.pdflood,
        hwm,
    })
}

#[derive(Serialize)]
struct Metrics {
    sigma_hat: f64,
    dof: u32,
    marks_used: usize,
    excluded_marks: Vec<usize>,
    residuals: Vec<f64>,
    threshold: f64,
    interval: f64,
    pi: Option<PiSummary>,
    fine_cells: usize,
    cells_flagged: usize,
}

pub fn downscale(args: RunArgs) -> Result<()> {
    let inputs = run_inputs(args, true)?;
    let hwms = read_hwms(inputs.hwm.as_ref().expect("marks required"))?;
    let result = run_pdflood(&inputs.pair, &inputs.coarse_depth, &hwms, &inputs.config)?;
    for (name, grid) in [
        ("mean.asc", &result.mean),
        ("lower95.asc", &result.lower95),
        ("upper95.asc", &result.upper95),
        ("prob_exceed.asc", &result.prob_exceed),
    ] {
        write_ascii_grid_with_precision(grid, inputs.out.join(name), inputs.precision)?;
    }
    let flagged = (0..result.prob_exceed.len())
        .filter(|&k| result.prob_exceed.valid(k).is_some_and(|p| p > 0.5))
        .count();
    let metrics = Metrics {
        sigma_hat: result.sigma.sigma,
        dof: result.sigma.dof,
        marks_used: result.sigma.n,
        excluded_marks: result.excluded_marks.clone(),
        residuals: result.sigma.residuals.clone(),
        threshold: result.threshold,
        interval: inputs.config.interval,
        pi: result.pi.as_ref().map(|p| p.summary()),
        fine_cells: result.mean.len(),
        cells_flagged: flagged,
    };
    write_json(&metrics, &inputs.out.join("metrics.json"))?;
    println!(
        "downscaled {} cells: sigma_hat {:.4} m from {} marks, {} cells with P(depth > {} m) > 0.5; outputs in {}",
        metrics.fine_cells,
        metrics.sigma_hat,
        metrics.marks_used,
        flagged,
        metrics.threshold,
        inputs.out.display()
    );
    Ok(())
}

pub fn baseline(args: RunArgs) -> Result<()> {
    let inputs = run_inputs(args, false)?;
    let grid = run_costgrow_baseline(&inputs.pair, &inputs.coarse_depth, &inputs.config)?;
    let path = inputs.out.join("baseline.asc");
    write_ascii_grid_with_precision(&grid, &path, inputs.precision)?;
    println!("baseline depth written to {}", path.display());
    Ok(())
}

pub fn calibrate(args: CalibrateArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    override_with(&mut cfg.design, args.design);
    override_with(&mut cfg.observations, args.obs);
    override_with(&mut cfg.output_dir, args.out);
    override_with(&mut cfg.seed, args.seed);
    let mut mcmc = cfg.mcmc;
    mcmc.seed = cfg.seed.ok_or_else(|| input("calibration needs a seed (--seed or config \"seed\")"))?;
    if let Some(n) = args.iterations {
        mcmc.iterations = n;
    }
    if let Some(n) = args.burn_in {
        mcmc.burn_in = n;
    }
    let design = read_design(&existing(cfg.design, "design file")?, &existing(cfg.observations, "observation file")?)?;
    let out = output_dir(cfg.output_dir)?;
    let run = run_calibration(&design, &mcmc)?;
    let summary = run.summary();
    write_json(&summary, &out.join("posterior.json"))?;
    println!(
        "theta* {:.5} (95% interval {:.5} to {:.5}), acceptance {:.3}, seed {}",
        summary.theta_star, summary.credible_interval[0], summary.credible_interval[1], summary.acceptance_rate, summary.seed
    );
    Ok(())
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    override_with(&mut cfg.output_dir, args.out);
    override_with(&mut cfg.seed, args.seed);
    let scenario = match (cfg.scenario, cfg.seed) {
        (Some(mut s), seed) => {
            if let Some(seed) = seed {
                reseed(&mut s, seed);
            }
            s
        }
        (None, Some(seed)) => {
            let mut s = Scenario::benchmark();
            reseed(&mut s, seed);
            s
        }
        (None, None) => return Err(input("synth needs a seed (--seed or config \"seed\") or a config scenario")),
    };
    let seed = scenario.valley.seed;
    let out = output_dir(cfg.output_dir)?;
    let case = generate(&scenario)?;
    write_ascii_grid(&case.pair.fine, out.join("fine_dem.asc"))?;
    write_ascii_grid(&case.pair.coarse, out.join("coarse_dem.asc"))?;
    write_ascii_grid(&case.coarse_depth, out.join("coarse_depth.asc"))?;
    write_ascii_grid(&case.truth.depth, out.join("truth_depth.asc"))?;
    write_hwms(&case.hwms, out.join("hwm.csv"))?;

    let thetas: Vec<f64> = (0..10).map(|j| 0.0145 + 0.009 * j as f64).collect();
    let design = ToyModel::fixture().design(&thetas, 0.05, 0.01, seed)?;
    write_design(&design, &out.join("design.csv"), &out.join("obs.csv"))?;

    let run = RunConfig {
        fine_dem: Some("fine_dem.asc".into()),
        coarse_dem: Some("coarse_dem.asc".into()),
        coarse_depth: Some("coarse_depth.asc".into()),
        hwm: Some("hwm.csv".into()),
        output_dir: Some("run".into()),
        factor: Some(scenario.factor),
        seed: Some(seed),
        design: Some("design.csv".into()),
        observations: Some("obs.csv".into()),
        truth: Some("truth_depth.asc".into()),
        products: vec![
            ProductRef {
                name: "pdflood".into(),
                path: "run".into(),
            },
            ProductRef {
                name: "baseline".into(),
                path: "run/baseline.asc".into(),
            },
        ],
        scenario: Some(scenario.clone()),
        ..RunConfig::default()
    };
    write_json(&run, &out.join("run.json"))?;
    let wet = case.truth.wet_mask.iter().filter(|&&w| w).count();
    println!(
        "synthetic case in {}: {}x{} fine cells ({} wet), factor {}, {} marks; run config run.json",
        out.display(),
        case.pair.fine.nrows(),
        case.pair.fine.ncols(),
        wet,
        scenario.factor,
        case.hwms.len()
    );
    Ok(())
}

fn reseed(s: &mut Scenario, seed: u64) {
    s.valley.seed = seed;
    s.hwm_seed = seed.wrapping_add(1);
    s.coarse_error_seed = seed.wrapping_add(2);
}

enum Product {
    Probabilistic([Grid; 4]),
    Deterministic(Grid),
}

fn load_product(path: &Path) -> Result<Product> {
    if path.is_dir() {
        let read = |name: &str| -> Result<Grid> {
            let p = path.join(name);
            if !p.is_file() {
                return Err(input(format!("product grid not found: {}", p.display())));
            }
            Ok(read_ascii_grid(&p)?)
        };
        Ok(Product::Probabilistic([
            read("mean.asc")?,
            read("lower95.asc")?,
            read("upper95.asc")?,
            read("prob_exceed.asc")?,
        ]))
    } else if path.is_file() {
        Ok(Product::Deterministic(read_ascii_grid(path)?))
    } else {
        Err(input(format!("product not found: {}", path.display())))
    }
}

pub fn evaluate(args: EvaluateArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    override_with(&mut cfg.truth, args.truth);
    if let Some(t) = args.threshold {
        cfg.eval.threshold = t;
    }
    if args.wet_union {
        cfg.eval.mae_region = MaeRegion::WetUnion;
    }
    if !args.products.is_empty() {
        cfg.products = args
            .products
            .iter()
            .map(|spec| {
                let (name, path) = spec
                    .split_once('=')
                    .ok_or_else(|| input(format!("product must be NAME=PATH, got {spec:?}")))?;
                Ok(ProductRef {
                    name: name.to_string(),
                    path: path.into(),
                })
            })
            .collect::<Result<_>>()?;
    }
    if cfg.products.is_empty() {
        return Err(input("no product to evaluate"));
    }
    let truth = read_ascii_grid(existing(cfg.truth, "truth grid")?)?;
    let mut reports = Vec::new();
    for p in &cfg.products {
        let product = load_product(&p.path)?;
        let prediction = match &product {
            Product::Probabilistic([mean, lower, upper, prob]) => Prediction::Probabilistic {
                mean,
                lower,
                upper,
                prob_exceed: prob,
            },
            Product::Deterministic(g) => Prediction::Deterministic(g),
        };
        reports.push((p.name.clone(), score(prediction, &truth, &cfg.eval)?));
    }
    let text = if reports.len() == 1 {
        serde_json::to_string_pretty(&reports[0].1).map_err(|e| input(e.to_string()))?
    } else {
        compare(&reports)?.to_json()
    };
    match args.out {
        Some(path) => {
            fs::write(&path, text + "\n").map_err(|e| input(format!("cannot write {}: {e}", path.display())))?;
            for (name, r) in &reports {
                println!(
                    "{name}: mae {:.4} m, accuracy {:.4}, coverage {}",
                    r.mae,
                    r.accuracy,
                    r.coverage95.map_or("NA".into(), |c| format!("{c:.4}"))
                );
            }
        }
        None => println!("{text}"),
    }
    Ok(())
}
