//! `scenario_id,hour,power_mw` files.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};

pub const HEADER: &str = "scenario_id,hour,power_mw";

pub fn to_csv(trajectories: &[Vec<f64>]) -> String {
    let mut out = String::with_capacity(trajectories.len() * 24 * 24);
    out.push_str(HEADER);
    out.push('\n');
    for (id, traj) in trajectories.iter().enumerate() {
        for (hour, v) in traj.iter().enumerate() {
            let _ = writeln!(out, "{id},{hour},{v}");
        }
    }
    out
}

/// Reads scenarios back; ids must run 0.. and every scenario must list
/// hours 0..len in order.
pub fn read(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != HEADER.split(',').collect::<Vec<_>>() {
        bail!("{}: expected header '{HEADER}'", path.display());
    }
    let mut out: Vec<Vec<f64>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize| rec.get(i).unwrap_or("");
        let id: usize = field(0).parse().with_context(|| format!("line {line}: bad scenario_id"))?;
        let hour: usize = field(1).parse().with_context(|| format!("line {line}: bad hour"))?;
        let v: f64 = field(2).parse().with_context(|| format!("line {line}: bad power_mw"))?;
        if !v.is_finite() {
            bail!("line {line}: power_mw is not finite");
        }
        if id == out.len() {
            out.push(Vec::new());
        } else if id + 1 != out.len() {
            bail!("line {line}: scenario_id {id} out of order");
        }
        let traj = out.last_mut().expect("pushed above");
        if hour != traj.len() {
            bail!("line {line}: scenario {id} hour {hour} out of order");
        }
        traj.push(v);
    }
    if out.is_empty() {
        bail!("{}: no scenarios", path.display());
    }
    let len = out[0].len();
    if let Some(i) = out.iter().position(|t| t.len() != len) {
        bail!("scenario {i} has {} hours, scenario 0 has {len}", out[i].len());
    }
    Ok(out)
}
