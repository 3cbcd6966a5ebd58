//! `key = value` run configuration, merged with command-line flags.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use icgdm::dataset::Source;
use icgdm::metrics::DEFAULT_LEVELS;
use icgdm::trainer::TrainConfig;

/// Days held out for testing unless configured otherwise.
pub const DEFAULT_TEST_DAYS: usize = 50;
pub const DEFAULT_NUM_SCENARIOS: usize = 100;

/// Parses `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("config line {}: expected 'key = value', got '{line}'", i + 1);
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            bail!("config line {}: empty key", i + 1);
        }
        if out.iter().any(|(seen, _)| seen == k) {
            bail!("config line {}: duplicate key '{k}'", i + 1);
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub source: Source,
    pub data: Option<PathBuf>,
    pub test_days: usize,
    pub num: usize,
    pub levels: Vec<f64>,
}

impl RunConfig {
    /// Defaults for `source`, then every pair applied in order.
    pub fn from_pairs(pairs: &[(String, String)], source_override: Option<Source>) -> Result<Self> {
        let from_file = pairs.iter().find(|(k, _)| k == "source").map(|(_, v)| v.parse::<Source>()).transpose()?;
        let source = source_override.or(from_file).unwrap_or(Source::Pv);
        let mut cfg = Self {
            train: TrainConfig::for_source(source),
            source,
            data: None,
            test_days: DEFAULT_TEST_DAYS,
            num: DEFAULT_NUM_SCENARIOS,
            levels: DEFAULT_LEVELS.to_vec(),
        };
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.source = source;
        Ok(cfg)
    }

    pub fn load(path: Option<&PathBuf>, source_override: Option<Source>) -> Result<Self> {
        let pairs = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                parse_pairs(&text).with_context(|| format!("in {}", p.display()))?
            }
            None => Vec::new(),
        };
        Self::from_pairs(&pairs, source_override)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "source" => self.source = value.parse()?,
            "data" => self.data = Some(PathBuf::from(value)),
            "test_days" => self.test_days = value.parse().with_context(|| format!("invalid test_days '{value}'"))?,
            "num" => self.num = value.parse().with_context(|| format!("invalid num '{value}'"))?,
            "levels" => self.levels = parse_levels(value)?,
            _ => self.train.set(key, value)?,
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.test_days == 0 {
            bail!("test_days must be at least 1");
        }
        if self.num == 0 {
            bail!("num must be at least 1");
        }
        check_levels(&self.levels)
    }

    /// Manifest body: every setting as `key = value`, sorted by key.
    pub fn manifest_lines(&self) -> Vec<String> {
        let mut pairs: Vec<(String, String)> =
            self.train.pairs().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        pairs.push(("source".into(), self.source.as_str().into()));
        if let Some(d) = &self.data {
            pairs.push(("data".into(), d.display().to_string()));
        }
        pairs.push(("test_days".into(), self.test_days.to_string()));
        pairs.sort();
        pairs.into_iter().map(|(k, v)| format!("{k} = {v}")).collect()
    }
}

pub fn parse_levels(s: &str) -> Result<Vec<f64>> {
    let levels = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().with_context(|| format!("invalid level '{p}'")))
        .collect::<Result<Vec<_>>>()?;
    check_levels(&levels)?;
    Ok(levels)
}

pub fn check_levels(levels: &[f64]) -> Result<()> {
    if levels.is_empty() {
        bail!("at least one confidence level is required");
    }
    if let Some(l) = levels.iter().find(|&&l| !(l > 0.0 && l <= 100.0)) {
        bail!("confidence level {l} is outside (0, 100]");
    }
    Ok(())
}
