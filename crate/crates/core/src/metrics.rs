//! Scenario-set evaluation: autocorrelation, interval coverage, interval
//! width and average Euclidean distance to the realized day.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::exec::Exec;

/// Confidence levels reported by default, in percent.
pub const DEFAULT_LEVELS: [f64; 4] = [100.0, 90.0, 80.0, 60.0];
/// Largest ACF lag reported, in hours.
pub const MAX_REPORT_LAG: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Units {
    Normalized,
    Mw,
}

impl Units {
    pub fn as_str(self) -> &'static str {
        match self {
            Units::Normalized => "normalized",
            Units::Mw => "mw",
        }
    }
}

/// `W` trajectories of equal length generated for one condition.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioSet {
    trajectories: Vec<Vec<f64>>,
    pub units: Units,
    pub condition: Option<Vec<f64>>,
    pub seed: Option<u64>,
    pub model_id: Option<String>,
}

impl ScenarioSet {
    pub fn new(trajectories: Vec<Vec<f64>>, units: Units) -> Result<Self> {
        let Some(first) = trajectories.first() else {
            return Err(Error::Invalid("scenario set needs at least one trajectory".into()));
        };
        let len = first.len();
        if len == 0 {
            return Err(Error::Invalid("scenario trajectories are empty".into()));
        }
        if let Some((i, t)) = trajectories.iter().enumerate().find(|(_, t)| t.len() != len) {
            return Err(Error::Invalid(format!("scenario {i} has {} points, expected {len}", t.len())));
        }
        Ok(Self { trajectories, units, condition: None, seed: None, model_id: None })
    }

    pub fn trajectories(&self) -> &[Vec<f64>] {
        &self.trajectories
    }

    pub fn into_trajectories(self) -> Vec<Vec<f64>> {
        self.trajectories
    }

    /// Number of scenarios `W`.
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Points per trajectory.
    pub fn horizon(&self) -> usize {
        self.trajectories[0].len()
    }

    /// Values of every scenario at time step `n`.
    pub fn column(&self, n: usize) -> Vec<f64> {
        self.trajectories.iter().map(|t| t[n]).collect()
    }

    /// Applies `f` to every value, keeping metadata.
    pub fn map_values(&self, units: Units, f: impl Fn(f64) -> f64) -> Self {
        Self {
            trajectories: self.trajectories.iter().map(|t| t.iter().map(|&v| f(v)).collect()).collect(),
            units,
            condition: self.condition.clone(),
            seed: self.seed,
            model_id: self.model_id.clone(),
        }
    }

    /// Pointwise mean trajectory.
    pub fn mean_trajectory(&self) -> Vec<f64> {
        let w = self.len() as f64;
        (0..self.horizon()).map(|n| self.trajectories.iter().map(|t| t[n]).sum::<f64>() / w).collect()
    }
}

/// Biased autocorrelation estimate at lag `tau`:
/// `(1/L) Σ_{t<L-τ} (S_t - μ)(S_{t+τ} - μ) / σ²` with the biased variance.
pub fn acf(series: &[f64], tau: usize) -> Result<f64> {
    let len = series.len();
    if tau >= len {
        return Err(Error::Invalid(format!("lag {tau} must be below series length {len}")));
    }
    if series.iter().all(|&v| v == series[0]) {
        return Err(Error::ZeroVariance);
    }
    let n = len as f64;
    let mean = series.iter().sum::<f64>() / n;
    let var = series.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var <= 0.0 {
        return Err(Error::ZeroVariance);
    }
    if tau == 0 {
        return Ok(1.0);
    }
    let cov = (0..len - tau).map(|t| (series[t] - mean) * (series[t + tau] - mean)).sum::<f64>() / n;
    Ok(cov / var)
}

/// `acf(series, τ)` for `τ = 0..=max_lag`.
pub fn acf_profile(series: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    (0..=max_lag).map(|tau| acf(series, tau)).collect()
}

/// Linear interpolation between order statistics of `sorted` at
/// probability `p ∈ [0, 1]`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

/// Per-time-step envelope of a scenario set at one confidence level.
#[derive(Clone, Debug, PartialEq)]
pub struct Interval {
    pub theta: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Envelope at confidence `theta` percent.
///
/// `theta = 100` is the pointwise min/max over scenarios; lower levels use
/// the central empirical quantiles `(1 ∓ θ)/2`.
pub fn interval(set: &ScenarioSet, theta: f64) -> Result<Interval> {
    if !(theta > 0.0 && theta <= 100.0) {
        return Err(Error::Invalid(format!("confidence level must be in (0, 100], got {theta}")));
    }
    if theta < 100.0 && set.len() < 2 {
        return Err(Error::Invalid("quantile intervals need at least two scenarios".into()));
    }
    let frac = theta / 100.0;
    let (p_lo, p_hi) = ((1.0 - frac) / 2.0, (1.0 + frac) / 2.0);
    let mut lower = Vec::with_capacity(set.horizon());
    let mut upper = Vec::with_capacity(set.horizon());
    for n in 0..set.horizon() {
        let col = sorted(set.column(n));
        if theta == 100.0 {
            lower.push(col[0]);
            upper.push(col[col.len() - 1]);
        } else {
            lower.push(quantile_sorted(&col, p_lo));
            upper.push(quantile_sorted(&col, p_hi));
        }
    }
    Ok(Interval { theta, lower, upper })
}

fn check_actual(set: &ScenarioSet, actual: &[f64]) -> Result<()> {
    if actual.len() != set.horizon() {
        return Err(Error::Invalid(format!(
            "actual day has {} points, scenarios have {}",
            actual.len(),
            set.horizon()
        )));
    }
    Ok(())
}

impl Interval {
    /// Percentage of `actual` points inside `[lower, upper]`.
    pub fn coverage(&self, actual: &[f64]) -> f64 {
        let hits = actual
            .iter()
            .enumerate()
            .filter(|&(n, &p)| self.lower[n] <= p && p <= self.upper[n])
            .count();
        100.0 * hits as f64 / actual.len() as f64
    }

    /// Mean of `upper - lower` over time steps.
    pub fn mean_width(&self) -> f64 {
        self.upper.iter().zip(&self.lower).map(|(u, l)| u - l).sum::<f64>() / self.lower.len() as f64
    }
}

pub fn coverage_rate(set: &ScenarioSet, actual: &[f64], theta: f64) -> Result<f64> {
    check_actual(set, actual)?;
    Ok(interval(set, theta)?.coverage(actual))
}

pub fn piw(set: &ScenarioSet, theta: f64) -> Result<f64> {
    Ok(interval(set, theta)?.mean_width())
}

/// Mean over scenarios of the Euclidean distance to `actual`.
pub fn aed(set: &ScenarioSet, actual: &[f64]) -> Result<f64> {
    check_actual(set, actual)?;
    let total: f64 = set
        .trajectories()
        .iter()
        .map(|s| s.iter().zip(actual).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .sum();
    Ok(total / set.len() as f64)
}

/// Coverage and width at one confidence level.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelRow {
    pub theta: f64,
    pub coverage_pct: f64,
    pub piw: f64,
    pub interval: Interval,
}

/// Distribution of per-scenario ACF at one lag.
#[derive(Clone, Debug, PartialEq)]
pub struct AcfLag {
    pub lag: usize,
    pub actual: Option<f64>,
    pub min: f64,
    pub q05: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub q95: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AcfSummary {
    pub lags: Vec<AcfLag>,
    /// Scenarios skipped because they are constant.
    pub undefined: usize,
}

/// Per-scenario ACF over lags `0..=max_lag`, summarized by quantiles.
///
/// Constant scenarios have no autocorrelation; they are counted in
/// `undefined` rather than scored. Fails if every scenario is constant.
pub fn acf_summary(set: &ScenarioSet, actual: Option<&[f64]>, max_lag: usize) -> Result<AcfSummary> {
    let mut profiles = Vec::with_capacity(set.len());
    let mut undefined = 0;
    for s in set.trajectories() {
        match acf_profile(s, max_lag) {
            Ok(p) => profiles.push(p),
            Err(Error::ZeroVariance) => undefined += 1,
            Err(e) => return Err(e),
        }
    }
    if profiles.is_empty() {
        return Err(Error::ZeroVariance);
    }
    let actual_profile = match actual {
        Some(a) => match acf_profile(a, max_lag) {
            Ok(p) => Some(p),
            Err(Error::ZeroVariance) => None,
            Err(e) => return Err(e),
        },
        None => None,
    };
    let lags = (0..=max_lag)
        .map(|lag| {
            let col = sorted(profiles.iter().map(|p| p[lag]).collect());
            AcfLag {
                lag,
                actual: actual_profile.as_ref().map(|p| p[lag]),
                min: col[0],
                q05: quantile_sorted(&col, 0.05),
                q25: quantile_sorted(&col, 0.25),
                median: quantile_sorted(&col, 0.5),
                q75: quantile_sorted(&col, 0.75),
                q95: quantile_sorted(&col, 0.95),
                max: col[col.len() - 1],
            }
        })
        .collect();
    Ok(AcfSummary { lags, undefined })
}

/// Everything reported for one scenario set against its realized day.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub levels: Vec<LevelRow>,
    pub aed: f64,
    pub aed_units: Units,
    pub acf: Option<AcfSummary>,
}

/// Scores `set` against `actual` at each level in `levels`.
///
/// `aed_set`/`aed_actual` let the distance be computed in other units
/// (normalized) than the intervals (usually MW).
pub fn evaluate(
    set: &ScenarioSet,
    actual: &[f64],
    levels: &[f64],
    aed_inputs: Option<(&ScenarioSet, &[f64])>,
) -> Result<MetricReport> {
    check_actual(set, actual)?;
    let rows = levels
        .iter()
        .map(|&theta| {
            let iv = interval(set, theta)?;
            Ok(LevelRow { theta, coverage_pct: iv.coverage(actual), piw: iv.mean_width(), interval: iv })
        })
        .collect::<Result<Vec<_>>>()?;
    let (aed_set, aed_actual) = aed_inputs.unwrap_or((set, actual));
    let acf = match acf_summary(set, Some(actual), MAX_REPORT_LAG.min(set.horizon() - 1)) {
        Ok(s) => Some(s),
        Err(Error::ZeroVariance) => {
            log::warn!("every scenario is constant; autocorrelation undefined");
            None
        }
        Err(e) => return Err(e),
    };
    Ok(MetricReport { levels: rows, aed: aed(aed_set, aed_actual)?, aed_units: aed_set.units, acf })
}

/// Evaluates many `(scenario set, actual day)` pairs, one report each, in
/// input order.
pub fn evaluate_many(days: &[(ScenarioSet, Vec<f64>)], levels: &[f64], exec: Exec) -> Result<Vec<MetricReport>> {
    exec.try_map(days.len(), |i| evaluate(&days[i].0, &days[i].1, levels, None))
}

impl MetricReport {
    /// Level rows, then a `metric,value` block with AED and the median
    /// scenario ACF per lag.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("theta,coverage_pct,piw\n");
        for r in &self.levels {
            let _ = writeln!(out, "{},{:.6},{:.6}", fmt_level(r.theta), r.coverage_pct, r.piw);
        }
        out.push_str("\nmetric,value\n");
        let _ = writeln!(out, "aed,{:.6}", self.aed);
        let _ = writeln!(out, "aed_units,{}", self.aed_units.as_str());
        if let Some(acf) = &self.acf {
            for l in &acf.lags {
                let _ = writeln!(out, "acf_lag{},{:.6}", l.lag, l.median);
            }
            for l in &acf.lags {
                match l.actual {
                    Some(v) => {
                        let _ = writeln!(out, "actual_acf_lag{},{:.6}", l.lag, v);
                    }
                    None => {
                        let _ = writeln!(out, "actual_acf_lag{},", l.lag);
                    }
                }
            }
            let _ = writeln!(out, "acf_undefined_scenarios,{}", acf.undefined);
        }
        out
    }

    /// Box-plot statistics of per-scenario ACF, one row per lag.
    pub fn acf_csv(&self) -> Option<String> {
        let acf = self.acf.as_ref()?;
        let mut out = String::from("lag,actual,min,q05,q25,median,q75,q95,max\n");
        for l in &acf.lags {
            let actual = l.actual.map(|v| format!("{v:.6}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{actual},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                l.lag, l.min, l.q05, l.q25, l.median, l.q75, l.q95, l.max
            );
        }
        Some(out)
    }
}

fn fmt_level(theta: f64) -> String {
    if theta.fract() == 0.0 {
        format!("{theta:.0}")
    } else {
        format!("{theta}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(rows: Vec<Vec<f64>>) -> ScenarioSet {
        ScenarioSet::new(rows, Units::Normalized).unwrap()
    }

    #[test]
    fn acf_examples() {
        let s: Vec<f64> = (0..24).map(|i| ((i * 7) % 5) as f64).collect();
        assert_eq!(acf(&s, 0).unwrap(), 1.0);

        let alt: Vec<f64> = (0..24).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert!((acf(&alt, 1).unwrap() + 23.0 / 24.0).abs() < 1e-12);

        assert!(matches!(acf(&[0.3; 24], 1), Err(Error::ZeroVariance)));
        assert!(acf(&s, 24).is_err());
    }

    #[test]
    fn acf_of_white_noise_is_small() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let s: Vec<f64> = (0..1000).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        assert!(acf(&s, 1).unwrap().abs() < 0.1);
    }

    #[test]
    fn interval_examples() {
        let same = set(vec![vec![1.0, 2.0, 3.0]; 4]);
        for theta in [100.0, 90.0, 60.0, 10.0] {
            let iv = interval(&same, theta).unwrap();
            assert_eq!(iv.lower, vec![1.0, 2.0, 3.0]);
            assert_eq!(iv.upper, vec![1.0, 2.0, 3.0]);
            assert_eq!(piw(&same, theta).unwrap(), 0.0);
            assert_eq!(coverage_rate(&same, &[1.0, 2.0, 3.0], theta).unwrap(), 100.0);
        }

        let two = set(vec![vec![0.0], vec![10.0]]);
        let iv = interval(&two, 100.0).unwrap();
        assert_eq!((iv.lower[0], iv.upper[0]), (0.0, 10.0));

        // values 1..=10, θ = 60 → p = 0.2, 0.8 → h = 1.8, 7.2
        let ten = set((1..=10).map(|v| vec![v as f64]).collect());
        let iv = interval(&ten, 60.0).unwrap();
        assert!((iv.lower[0] - 2.8).abs() < 1e-12);
        assert!((iv.upper[0] - 8.2).abs() < 1e-12);

        assert!(interval(&set(vec![vec![1.0]]), 90.0).is_err());
        assert!(interval(&ten, 0.0).is_err());
        assert!(interval(&ten, 101.0).is_err());
    }

    #[test]
    fn coverage_and_width_examples() {
        let s = set(vec![vec![0.0; 24], vec![2.0; 24]]);
        assert_eq!(piw(&s, 100.0).unwrap(), 2.0);
        assert_eq!(coverage_rate(&s, &[3.0; 24], 100.0).unwrap(), 0.0);
        assert_eq!(coverage_rate(&s, &[2.0; 24], 100.0).unwrap(), 100.0);
        assert!(coverage_rate(&s, &[2.0; 23], 100.0).is_err());
    }

    #[test]
    fn aed_examples() {
        let actual: Vec<f64> = (0..24).map(|i| i as f64 / 24.0).collect();
        assert_eq!(aed(&set(vec![actual.clone(); 3]), &actual).unwrap(), 0.0);
        let shifted: Vec<f64> = actual.iter().map(|v| v + 1.0).collect();
        assert!((aed(&set(vec![shifted]), &actual).unwrap() - 24f64.sqrt()).abs() < 1e-12);
        assert!(aed(&set(vec![actual.clone()]), &actual[..10]).is_err());
    }

    #[test]
    fn report_csv_layout() {
        let actual: Vec<f64> = (0..24).map(|i| (i as f64 / 4.0).sin()).collect();
        let s = set(vec![actual.clone(); 5]);
        let r = evaluate(&s, &actual, &DEFAULT_LEVELS, None).unwrap();
        let csv = r.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("theta,coverage_pct,piw"));
        assert_eq!(lines.next(), Some("100,100.000000,0.000000"));
        assert!(csv.contains("\naed,0.000000\n"));
        assert!(csv.contains("acf_lag6,"));
        assert_eq!(r.acf_csv().unwrap().lines().count(), 8);
    }

    #[test]
    fn constant_scenarios_are_counted_not_scored() {
        let actual: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let s = set(vec![vec![0.0; 24], actual.clone()]);
        let summary = acf_summary(&s, Some(&actual), 3).unwrap();
        assert_eq!(summary.undefined, 1);
        assert!(acf_summary(&set(vec![vec![0.0; 24]]), None, 3).is_err());
    }

    fn arb_set() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
        (2usize..12, 2usize..10).prop_flat_map(|(w, n)| {
            (
                prop::collection::vec(prop::collection::vec(-5.0f64..5.0, n), w),
                prop::collection::vec(-5.0f64..5.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn intervals_nest((rows, actual) in arb_set(), a in 1.0f64..100.0, b in 1.0f64..100.0) {
            let s = set(rows);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (i1, i2) = (interval(&s, lo).unwrap(), interval(&s, hi).unwrap());
            for n in 0..s.horizon() {
                prop_assert!(i1.lower[n] <= i1.upper[n]);
                prop_assert!(i2.lower[n] <= i1.lower[n] + 1e-12 && i1.upper[n] <= i2.upper[n] + 1e-12);
            }
            prop_assert!(i1.mean_width() <= i2.mean_width() + 1e-12);
            prop_assert!(i1.coverage(&actual) <= i2.coverage(&actual));
        }

        #[test]
        fn including_actual_gives_full_coverage((mut rows, actual) in arb_set()) {
            rows.push(actual.clone());
            prop_assert_eq!(coverage_rate(&set(rows), &actual, 100.0).unwrap(), 100.0);
        }

        #[test]
        fn aed_is_shift_invariant((rows, actual) in arb_set(), shift in -10.0f64..10.0) {
            let s = set(rows);
            let moved = s.map_values(Units::Normalized, |v| v + shift);
            let moved_actual: Vec<f64> = actual.iter().map(|v| v + shift).collect();
            prop_assert!((aed(&s, &actual).unwrap() - aed(&moved, &moved_actual).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn acf_is_affine_invariant(series in prop::collection::vec(-3.0f64..3.0, 6..30), a in 0.1f64..5.0, neg in any::<bool>(), b in -4.0f64..4.0, lag in 0usize..5) {
            let scale = if neg { -a } else { a };
            prop_assume!(lag < series.len());
            let base = acf(&series, lag);
            prop_assume!(base.is_ok());
            let moved: Vec<f64> = series.iter().map(|v| scale * v + b).collect();
            prop_assert!((base.unwrap() - acf(&moved, lag).unwrap()).abs() < 1e-9);
        }
    }
}
