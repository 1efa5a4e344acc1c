//! Plain-text trajectory files: a `t,x1,...,xd` header then one row per stamp.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::odeint::Trajectory;

pub fn trajectory_to_csv(traj: &Trajectory) -> String {
    let mut s = String::from("t");
    for k in 1..=traj.dim() {
        write!(s, ",x{k}").unwrap();
    }
    s.push('\n');
    for (t, x) in traj.times().iter().zip(traj.states()) {
        write!(s, "{t:.16e}").unwrap();
        for v in x {
            write!(s, ",{v:.16e}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn trajectory_from_csv(text: &str) -> Result<Trajectory> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty trajectory file".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.first() != Some(&"t") || cols.len() < 2 {
        return Err(Error::Parse(format!("bad header `{header}`")));
    }
    let mut times = Vec::new();
    let mut states = Vec::new();
    for (row, line) in lines.enumerate() {
        let vals = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse(format!("row {}: {e}", row + 1)))?;
        if vals.len() != cols.len() {
            return Err(Error::Parse(format!(
                "row {} has {} fields, header has {}",
                row + 1,
                vals.len(),
                cols.len()
            )));
        }
        times.push(vals[0]);
        states.push(vals[1..].to_vec());
    }
    Trajectory::new(times, states)
}

pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    std::fs::write(path, trajectory_to_csv(traj))?;
    Ok(())
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    trajectory_from_csv(&std::fs::read_to_string(path)?)
}
