//! Skill metrics of a downscaled product against a fine-resolution truth.

use serde::{Deserialize, Serialize};

use crate::downscale::DownscaleResult;
use crate::error::{Error, Result};
use crate::raster::Grid;

/// A product to score: either a full predictive distribution or a single
/// depth grid.
#[derive(Debug, Clone, Copy)]
pub enum Prediction<'a> {
    Probabilistic {
        mean: &'a Grid,
        lower: &'a Grid,
        upper: &'a Grid,
        prob_exceed: &'a Grid,
    },
    Deterministic(&'a Grid),
}

impl<'a> From<&'a DownscaleResult> for Prediction<'a> {
    fn from(r: &'a DownscaleResult) -> Self {
        Prediction::Probabilistic {
            mean: &r.mean,
            lower: &r.lower95,
            upper: &r.upper95,
            prob_exceed: &r.prob_exceed,
        }
    }
}

impl<'a> From<&'a Grid> for Prediction<'a> {
    fn from(g: &'a Grid) -> Self {
        Prediction::Deterministic(g)
    }
}

impl Prediction<'_> {
    fn mean(&self) -> &Grid {
        match self {
            Prediction::Probabilistic { mean, .. } => mean,
            Prediction::Deterministic(g) => g,
        }
    }

    fn grids(&self) -> Vec<&Grid> {
        match self {
            Prediction::Probabilistic {
                mean,
                lower,
                upper,
                prob_exceed,
            } => vec![mean, lower, upper, prob_exceed],
            Prediction::Deterministic(g) => vec![g],
        }
    }
}

/// Cells entering the mean absolute error.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaeRegion {
    #[default]
    All,
    /// Only cells with positive depth in the truth or the prediction.
    WetUnion,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub threshold: f64,
    /// Exceedance probability above which a cell counts as flooded.
    pub cutoff: f64,
    pub mae_region: MaeRegion,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            threshold: crate::downscale::DEFAULT_THRESHOLD,
            cutoff: 0.5,
            mae_region: MaeRegion::All,
        }
    }
}

/// Evaluation metrics. Recalls are `None` when the truth has no cell of
/// that class; coverage is `None` for deterministic products.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae: f64,
    pub coverage95: Option<f64>,
    pub accuracy: f64,
    pub recall_flooded: Option<f64>,
    pub recall_dry: Option<f64>,
    pub n_cells: usize,
    pub threshold: f64,
}

pub fn evaluate(prediction: Prediction<'_>, truth: &Grid, opts: &EvalOptions) -> Result<EvalReport> {
    if !(opts.threshold > 0.0) || !(0.0..=1.0).contains(&opts.cutoff) {
        return Err(Error::invalid("threshold must be > 0 and cutoff in [0, 1]"));
    }
    let grids = prediction.grids();
    for g in &grids {
        truth.require_same_lattice(g, "prediction and truth")?;
    }
    let mean = prediction.mean();

    let (mut n, mut abs_sum, mut mae_n, mut covered) = (0usize, 0.0, 0usize, 0usize);
    let (mut tp, mut fn_, mut tn, mut fp) = (0usize, 0usize, 0usize, 0usize);
    for k in 0..truth.len() {
        let Some(t) = truth.valid(k) else { continue };
        if grids.iter().any(|g| g.is_nodata(k)) {
            continue;
        }
        n += 1;
        let m = mean.value(k);
        if opts.mae_region == MaeRegion::All || t > 0.0 || m > 0.0 {
            abs_sum += (m - t).abs();
            mae_n += 1;
        }
        let flagged = match prediction {
            Prediction::Probabilistic {
                lower,
                upper,
                prob_exceed,
                ..
            } => {
                if lower.value(k) <= t && t <= upper.value(k) {
                    covered += 1;
                }
                prob_exceed.value(k) > opts.cutoff
            }
            Prediction::Deterministic(_) => m > opts.threshold,
        };
        match (t > opts.threshold, flagged) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, false) => tn += 1,
            (false, true) => fp += 1,
        }
    }
    if n == 0 {
        return Err(Error::invalid("no cell is valid in both prediction and truth"));
    }
    let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    Ok(EvalReport {
        mae: if mae_n > 0 { abs_sum / mae_n as f64 } else { 0.0 },
        coverage95: match prediction {
            Prediction::Probabilistic { .. } => ratio(covered, n),
            Prediction::Deterministic(_) => None,
        },
        accuracy: (tp + tn) as f64 / n as f64,
        recall_flooded: ratio(tp, tp + fn_),
        recall_dry: ratio(tn, tn + fp),
        n_cells: n,
        threshold: opts.threshold,
    })
}

/// Nominal level against which coverage is judged.
const NOMINAL_COVERAGE: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub name: String,
    #[serde(flatten)]
    pub report: EvalReport,
    /// Metrics on which this row is best or tied for best.
    pub best: Vec<&'static str>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("comparison serialises")
    }
}

/// Flags the best value of each metric across named reports. Lower MAE,
/// coverage closer to 0.95 and higher accuracy and recalls are better;
/// ties flag every tied row; absent values are never best.
pub fn compare(reports: &[(String, EvalReport)]) -> Result<Comparison> {
    if reports.len() < 2 {
        return Err(Error::invalid("comparison needs at least two reports"));
    }
    type Score = fn(&EvalReport) -> Option<f64>;
    let metrics: [(&'static str, Score); 5] = [
        ("mae", |r| Some(-r.mae)),
        ("coverage95", |r| r.coverage95.map(|c| -(c - NOMINAL_COVERAGE).abs())),
        ("accuracy", |r| Some(r.accuracy)),
        ("recall_flooded", |r| r.recall_flooded),
        ("recall_dry", |r| r.recall_dry),
    ];
    let mut rows: Vec<ComparisonRow> = reports
        .iter()
        .map(|(name, report)| ComparisonRow {
            name: name.clone(),
            report: report.clone(),
            best: Vec::new(),
        })
        .collect();
    for (key, score) in metrics {
        let top = reports
            .iter()
            .filter_map(|(_, r)| score(r))
            .fold(f64::NEG_INFINITY, f64::max);
        for row in rows.iter_mut() {
            if score(&row.report) == Some(top) {
                row.best.push(key);
            }
        }
    }
    Ok(Comparison { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(v: &[f64]) -> Grid {
        Grid::new(3, 3, 1.0, 0.0, 0.0, -9999.0, v.to_vec()).unwrap()
    }

    #[test]
    fn identity_scores_perfectly() {
        let t = grid(&[0.0, 0.1, 0.5, 1.0, 2.0, 0.0, 0.0, 0.4, 0.2]);
        let r = evaluate((&t).into(), &t, &EvalOptions::default()).unwrap();
        assert_eq!(r.mae, 0.0);
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.coverage95, None);
        assert_eq!(r.n_cells, 9);
    }

    #[test]
    fn hand_counted_confusion() {
        // truth flooded in the first five cells
        let t = grid(&[1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        // flags: TP x4, FN x1, FP x1, TN x3
        let p = grid(&[1.0, 1.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let r = evaluate((&p).into(), &t, &EvalOptions::default()).unwrap();
        assert!((r.accuracy - 7.0 / 9.0).abs() < 1e-15);
        assert_eq!(r.recall_flooded, Some(4.0 / 5.0));
        assert_eq!(r.recall_dry, Some(3.0 / 4.0));
        let exact = (r.recall_flooded.unwrap() * 5.0 + r.recall_dry.unwrap() * 4.0) / 9.0;
        assert!((r.accuracy - exact).abs() < 1e-15);
    }

    #[test]
    fn vacuous_intervals_cover_everything() {
        let t = grid(&[0.0, 0.1, 0.5, 1.0, 2.0, 0.0, 0.0, 0.4, 0.2]);
        let lower = t.map(|_| 0.0).unwrap();
        let upper = t.map(|_| f64::MAX).unwrap();
        let prob = t.map(|v| if v > 0.3 { 0.9 } else { 0.1 }).unwrap();
        let pred = Prediction::Probabilistic {
            mean: &t,
            lower: &lower,
            upper: &upper,
            prob_exceed: &prob,
        };
        let r = evaluate(pred, &t, &EvalOptions::default()).unwrap();
        assert_eq!(r.coverage95, Some(1.0));
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn nodata_and_wet_union() {
        let t = grid(&[-9999.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let p = grid(&[5.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -9999.0]);
        let r = evaluate((&p).into(), &t, &EvalOptions::default()).unwrap();
        assert_eq!(r.n_cells, 7);
        assert!((r.mae - 1.0 / 7.0).abs() < 1e-15);
        let opts = EvalOptions {
            mae_region: MaeRegion::WetUnion,
            ..Default::default()
        };
        let r = evaluate((&p).into(), &t, &opts).unwrap();
        assert_eq!(r.mae, 1.0);
    }

    #[test]
    fn misaligned_grids_fail() {
        let t = grid(&[0.0; 9]);
        let p = Grid::filled(3, 4, 1.0, 0.0, 0.0, 0.0).unwrap();
        assert!(matches!(
            evaluate((&p).into(), &t, &EvalOptions::default()),
            Err(Error::Alignment(_))
        ));
    }

    fn report(mae: f64, coverage95: Option<f64>, accuracy: f64) -> EvalReport {
        EvalReport {
            mae,
            coverage95,
            accuracy,
            recall_flooded: Some(0.9),
            recall_dry: None,
            n_cells: 10,
            threshold: 0.3,
        }
    }

    #[test]
    fn comparison_flags_best_and_ties() {
        let c = compare(&[
            ("pdflood".into(), report(0.13, Some(0.98), 0.96)),
            ("baseline".into(), report(0.14, None, 0.96)),
        ])
        .unwrap();
        assert_eq!(
            c.rows[0].best,
            vec!["mae", "coverage95", "accuracy", "recall_flooded"]
        );
        assert_eq!(c.rows[1].best, vec!["accuracy", "recall_flooded"]);
        let json = c.to_json();
        assert!(json.contains("\"coverage95\": null"));
        assert_eq!(json, c.to_json());
        assert!(compare(&[("only".into(), report(0.1, None, 1.0))]).is_err());
    }
}
