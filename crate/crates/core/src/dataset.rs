//! Hourly forecast/actual ingestion, day segmentation, train/test split
//! and min-max normalization.

use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use chrono::{Duration, NaiveDateTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::denoiser::ConditionVector;
use crate::error::{Error, Result};
use crate::SEQ_LEN;

const TIMESTAMP_FORMATS: [&str; 4] = ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M", "%Y-%m-%dT%H:%M"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Source {
    Pv,
    Wind,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Pv => "pv",
            Source::Wind => "wind",
        }
    }

    /// Default number of diffusion steps for this source.
    pub fn default_steps(self) -> usize {
        match self {
            Source::Pv => 250,
            Source::Wind => 200,
        }
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pv" => Ok(Source::Pv),
            "wind" => Ok(Source::Wind),
            other => Err(Error::Config(format!("unknown source '{other}', expected pv or wind"))),
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HourlyRow {
    pub timestamp: NaiveDateTime,
    pub forecast_mw: f64,
    pub actual_mw: Option<f64>,
}

/// Validated, hourly-contiguous series whose length is a multiple of 24.
#[derive(Clone, Debug, PartialEq)]
pub struct HourlySeries {
    pub source: Source,
    pub rows: Vec<HourlyRow>,
}

/// One day in MW, before normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct RawDay {
    pub date: String,
    pub forecast_mw: Vec<f64>,
    pub actual_mw: Option<Vec<f64>>,
}

/// One normalized day: target `actual` and condition `forecast`.
#[derive(Clone, Debug, PartialEq)]
pub struct DaySample {
    pub date: String,
    pub actual: Vec<f64>,
    pub forecast: ConditionVector,
    pub source: Source,
}

pub fn parse_timestamp(s: &str) -> Result<NaiveDateTime> {
    let s = s.trim();
    TIMESTAMP_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .ok_or_else(|| Error::Data(format!("unparseable timestamp '{s}'")))
}

fn parse_power(cell: &str, column: &str, line: u64) -> Result<f64> {
    let v: f64 = cell
        .trim()
        .parse()
        .map_err(|_| Error::Data(format!("line {line}: {column} '{cell}' is not numeric")))?;
    if !v.is_finite() {
        return Err(Error::Data(format!("line {line}: {column} is not finite")));
    }
    if v < 0.0 {
        return Err(Error::Data(format!("line {line}: {column} {v} is negative")));
    }
    Ok(v)
}

/// Reads `timestamp,forecast_mw,actual_mw` rows.
///
/// With `require_actual = false` the `actual_mw` column may be absent
/// (forecast-only input for sampling).
pub fn read_csv<R: Read>(reader: R, source: Source, require_actual: bool) -> Result<HourlySeries> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let ts_col = col("timestamp").ok_or_else(|| Error::Data("missing column 'timestamp'".into()))?;
    let fc_col = col("forecast_mw").ok_or_else(|| Error::Data("missing column 'forecast_mw'".into()))?;
    let act_col = col("actual_mw");
    if require_actual && act_col.is_none() {
        return Err(Error::Data("missing column 'actual_mw'".into()));
    }

    let mut rows: Vec<HourlyRow> = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let cell = |i: usize, name: &str| {
            record
                .get(i)
                .filter(|c| !c.is_empty())
                .ok_or_else(|| Error::Data(format!("line {line}: missing {name}")))
        };
        let timestamp = parse_timestamp(cell(ts_col, "timestamp")?)
            .map_err(|e| Error::Data(format!("line {line}: {e}")))?;
        if let Some(prev) = rows.last() {
            let expected = prev.timestamp + Duration::hours(1);
            if timestamp != expected {
                return Err(Error::Data(format!("line {line}: gap in timestamps, expected {expected}, found {timestamp}")));
            }
        }
        let forecast_mw = parse_power(cell(fc_col, "forecast_mw")?, "forecast_mw", line)?;
        let actual_mw = match act_col {
            Some(i) => Some(parse_power(cell(i, "actual_mw")?, "actual_mw", line)?),
            None => None,
        };
        rows.push(HourlyRow { timestamp, forecast_mw, actual_mw });
    }
    if rows.is_empty() {
        return Err(Error::Data("no data rows".into()));
    }
    if !rows.len().is_multiple_of(SEQ_LEN) {
        return Err(Error::Data(format!("{} rows cannot be segmented into {SEQ_LEN}-hour days", rows.len())));
    }
    Ok(HourlySeries { source, rows })
}

pub fn load_csv(path: &Path, source: Source) -> Result<HourlySeries> {
    read_csv(std::fs::File::open(path)?, source, true)
}

/// Like [`load_csv`] but `actual_mw` is optional.
pub fn load_forecast_csv(path: &Path, source: Source) -> Result<HourlySeries> {
    read_csv(std::fs::File::open(path)?, source, false)
}

impl HourlySeries {
    /// Consecutive 24-row days in file order.
    pub fn days(&self) -> Vec<RawDay> {
        self.rows
            .chunks_exact(SEQ_LEN)
            .map(|chunk| RawDay {
                date: chunk[0].timestamp.format("%Y-%m-%d").to_string(),
                forecast_mw: chunk.iter().map(|r| r.forecast_mw).collect(),
                actual_mw: chunk.iter().map(|r| r.actual_mw).collect(),
            })
            .collect()
    }
}

/// First `n_train` items for training, the rest for testing, order kept.
pub fn split<T>(mut days: Vec<T>, n_train: usize) -> Result<(Vec<T>, Vec<T>)> {
    if n_train == 0 {
        return Err(Error::Data("training split is empty".into()));
    }
    if n_train >= days.len() {
        return Err(Error::Data(format!("n_train {n_train} leaves no test days out of {}", days.len())));
    }
    let test = days.split_off(n_train);
    Ok((days, test))
}

/// Affine map from `[min, max]` MW onto `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalizer {
    min: f64,
    max: f64,
}

impl Normalizer {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite()) {
            return Err(Error::Data("normalizer bounds must be finite".into()));
        }
        if max <= min {
            return Err(Error::Data(format!("degenerate normalizer range [{min}, {max}]")));
        }
        Ok(Self { min, max })
    }

    /// Joint range of forecasts and actuals over `days`.
    pub fn fit(days: &[RawDay]) -> Result<Self> {
        let values = days
            .iter()
            .flat_map(|d| d.forecast_mw.iter().chain(d.actual_mw.iter().flatten()));
        let (min, max) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if min > max {
            return Err(Error::Data("cannot fit normalizer on no data".into()));
        }
        Self::new(min, max)
    }

    pub fn min(&self) -> f64 {
        self.min
    }

    pub fn max(&self) -> f64 {
        self.max
    }

    pub fn normalize_value(&self, v: f64) -> f64 {
        (v - self.min) / (self.max - self.min)
    }

    pub fn denormalize_value(&self, v: f64) -> f64 {
        self.min + v * (self.max - self.min)
    }

    /// Normalizes, clamping out-of-range values to `[0, 1]` with a warning.
    pub fn normalize(&self, values: &[f64]) -> Vec<f64> {
        let mut clamped = 0;
        let out = values
            .iter()
            .map(|&v| {
                let n = self.normalize_value(v);
                if !(0.0..=1.0).contains(&n) {
                    clamped += 1;
                }
                n.clamp(0.0, 1.0)
            })
            .collect();
        if clamped > 0 {
            log::warn!("{clamped} value(s) outside normalizer range [{}, {}] clamped", self.min, self.max);
        }
        out
    }

    pub fn denormalize(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|&v| self.denormalize_value(v)).collect()
    }

    /// Normalized training sample; the day must carry actuals.
    pub fn sample(&self, day: &RawDay, source: Source) -> Result<DaySample> {
        let actual = day
            .actual_mw
            .as_ref()
            .ok_or_else(|| Error::Data(format!("day {} has no actuals", day.date)))?;
        Ok(DaySample {
            date: day.date.clone(),
            actual: self.normalize(actual),
            forecast: self.condition(&day.forecast_mw)?,
            source,
        })
    }

    pub fn condition(&self, forecast_mw: &[f64]) -> Result<ConditionVector> {
        ConditionVector::new(self.normalize(forecast_mw))
    }

    /// `min,max` in shortest round-trip form.
    pub fn to_meta(&self) -> String {
        format!("{},{}", self.min, self.max)
    }

    pub fn from_meta(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once(',')
            .ok_or_else(|| Error::Format(format!("normalizer '{s}' is not 'min,max'")))?;
        let parse = |x: &str| x.trim().parse::<f64>().map_err(|_| Error::Format(format!("bad normalizer bound '{x}'")));
        Self::new(parse(a)?, parse(b)?)
    }
}

/// Train/test samples plus the normalizer fit on the training days only.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub normalizer: Normalizer,
    pub train: Vec<DaySample>,
    pub test: Vec<DaySample>,
}

pub fn prepare(series: &HourlySeries, n_train: usize) -> Result<Prepared> {
    let (train_raw, test_raw) = split(series.days(), n_train)?;
    let normalizer = Normalizer::fit(&train_raw)?;
    let convert = |days: &[RawDay]| days.iter().map(|d| normalizer.sample(d, series.source)).collect::<Result<Vec<_>>>();
    Ok(Prepared { normalizer, train: convert(&train_raw)?, test: convert(&test_raw)? })
}

/// `sin(π (h + 0.5) / 24)` for `h = 0..24`: a daylight bump peaking mid-day.
pub fn half_sine() -> Vec<f64> {
    (0..SEQ_LEN)
        .map(|h| (std::f64::consts::PI * (h as f64 + 0.5) / SEQ_LEN as f64).sin())
        .collect()
}

/// Synthetic normalized day: forecast `a·shape`, actual the same plus
/// Gaussian noise, clipped to `[0, 1]`.
pub fn synthetic_day(amplitude: f64, noise_sd: f64, rng: &mut impl Rng) -> Result<DaySample> {
    let noise = Normal::new(0.0, noise_sd).map_err(|e| Error::Config(e.to_string()))?;
    let forecast: Vec<f64> = half_sine().iter().map(|s| amplitude * s).collect();
    let actual = forecast.iter().map(|&f| (f + noise.sample(rng)).clamp(0.0, 1.0)).collect();
    Ok(DaySample {
        date: String::new(),
        actual,
        forecast: ConditionVector::new(forecast)?,
        source: Source::Pv,
    })
}

/// `count` synthetic days with amplitudes uniform in `[a_min, a_max]`.
pub fn synthetic_days(count: usize, a_min: f64, a_max: f64, noise_sd: f64, seed: u64) -> Result<Vec<DaySample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let a = rng.random_range(a_min..=a_max);
            let mut day = synthetic_day(a, noise_sd, &mut rng)?;
            day.date = format!("synthetic-{i:03}");
            Ok(day)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fmt::Write as _;

    fn csv_text(hours: usize, f: impl Fn(usize) -> (f64, f64)) -> String {
        let start = parse_timestamp("2020-01-01 00:00:00").unwrap();
        let mut s = String::from("timestamp,forecast_mw,actual_mw\n");
        for h in 0..hours {
            let (fc, act) = f(h);
            let ts = start + Duration::hours(h as i64);
            let _ = writeln!(s, "{},{fc},{act}", ts.format("%Y-%m-%d %H:%M:%S"));
        }
        s
    }

    fn read(text: &str) -> Result<HourlySeries> {
        read_csv(text.as_bytes(), Source::Pv, true)
    }

    #[test]
    fn full_year_segments_into_days() {
        let series = read(&csv_text(8760, |h| ((h % 24) as f64, (h % 24) as f64 + 0.5))).unwrap();
        let days = series.days();
        assert_eq!(days.len(), 365);
        assert_eq!(days[0].date, "2020-01-01");
        assert_eq!(days[364].date, "2020-12-30");
        let flat: Vec<f64> = days.iter().flat_map(|d| d.forecast_mw.clone()).collect();
        let rows: Vec<f64> = series.rows.iter().map(|r| r.forecast_mw).collect();
        assert_eq!(flat, rows);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(read(&csv_text(25, |_| (1.0, 1.0))).is_err());
        assert!(read(&csv_text(24, |h| (1.0, if h == 5 { -0.1 } else { 1.0 }))).is_err());
        assert!(read("timestamp,forecast_mw\n2020-01-01 00:00:00,1\n").is_err());
        assert!(read("forecast_mw,actual_mw\n1,1\n").is_err());

        let bad_cell = csv_text(24, |_| (1.0, 1.0)).replacen(",1,1\n", ",abc,1\n", 1);
        assert!(matches!(read(&bad_cell), Err(Error::Data(m)) if m.contains("not numeric")));

        let text = csv_text(49, |_| (1.0, 1.0));
        let mut lines: Vec<&str> = text.lines().collect();
        lines.remove(3);
        let gapped = lines.join("\n") + "\n";
        assert!(matches!(read(&gapped), Err(Error::Data(m)) if m.contains("gap")));
    }

    #[test]
    fn forecast_only_input() {
        let text = "timestamp,forecast_mw\n".to_string()
            + &(0..24).map(|h| format!("2021-06-01T{h:02}:00:00,{h}\n")).collect::<String>();
        let series = read_csv(text.as_bytes(), Source::Wind, false).unwrap();
        let days = series.days();
        assert_eq!(days.len(), 1);
        assert_eq!(days[0].actual_mw, None);
        assert_eq!(days[0].forecast_mw[23], 23.0);
    }

    #[test]
    fn split_examples() {
        let (tr, te) = split((0..365).collect::<Vec<_>>(), 315).unwrap();
        assert_eq!((tr.len(), te.len()), (315, 50));
        let (tr, te) = split((0..10).collect::<Vec<_>>(), 7).unwrap();
        assert_eq!(tr, vec![0, 1, 2, 3, 4, 5, 6]);
        assert_eq!(te, vec![7, 8, 9]);
        assert!(split((0..10).collect::<Vec<_>>(), 0).is_err());
        assert!(split((0..10).collect::<Vec<_>>(), 10).is_err());
    }

    #[test]
    fn normalizer_examples() {
        let n = Normalizer::new(0.0, 10.0).unwrap();
        assert_eq!(n.normalize(&[0.0, 5.0, 10.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(n.normalize(&[12.0]), vec![1.0]);
        assert!(Normalizer::new(3.0, 3.0).is_err());
        assert_eq!(Normalizer::from_meta(&n.to_meta()).unwrap(), n);
        let odd = Normalizer::new(0.1, 1.0 / 3.0).unwrap();
        assert_eq!(Normalizer::from_meta(&odd.to_meta()).unwrap(), odd);
    }

    #[test]
    fn normalizer_ignores_test_days() {
        let series = read(&csv_text(72, |h| if h >= 48 { (500.0, 900.0) } else { ((h % 24) as f64, 2.0) })).unwrap();
        let p = prepare(&series, 2).unwrap();
        assert_eq!((p.normalizer.min(), p.normalizer.max()), (0.0, 23.0));
        assert_eq!(p.test[0].actual, vec![1.0; 24]);
    }

    #[test]
    fn synthetic_days_are_valid_and_seeded() {
        let a = synthetic_days(20, 0.3, 1.0, 0.05, 4).unwrap();
        assert_eq!(a, synthetic_days(20, 0.3, 1.0, 0.05, 4).unwrap());
        for d in &a {
            assert_eq!(d.actual.len(), SEQ_LEN);
            assert!(d.actual.iter().all(|v| (0.0..=1.0).contains(v)));
            let peak = d.forecast.values().iter().cloned().fold(0.0, f64::max);
            assert!((0.3 * 0.99..=1.0).contains(&peak));
        }
    }

    proptest::proptest! {
        #[test]
        fn round_trip(min in -1e3f64..1e3, width in 1e-3f64..1e4, u in 0.0f64..=1.0) {
            let n = Normalizer::new(min, min + width).unwrap();
            let x = min + u * width;
            let back = n.denormalize_value(n.normalize(&[x])[0]);
            proptest::prop_assert!((back - x).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }
}
