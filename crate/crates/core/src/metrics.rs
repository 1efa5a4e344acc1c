//! Forecast error metrics.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::odeint::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Mse,
    RelL2Terminal,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Mse => "mse",
            Metric::RelL2Terminal => "rel_l2_terminal",
        }
    }

    pub fn eval(self, pred: &Trajectory, truth: &Trajectory) -> Result<f64> {
        match self {
            Metric::Mse => mse(pred, truth),
            Metric::RelL2Terminal => rel_l2_terminal(pred, truth),
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(Metric::Mse),
            "rel_l2_terminal" => Ok(Metric::RelL2Terminal),
            _ => Err(Error::InvalidConfig(format!("unknown metric `{s}`"))),
        }
    }
}

fn check_shapes(pred: &Trajectory, truth: &Trajectory) -> Result<()> {
    check_len("trajectory length", truth.len(), pred.len())?;
    check_len("state dimension", truth.dim(), pred.dim())
}

/// Mean over every stamp and component of the squared error.
pub fn mse(pred: &Trajectory, truth: &Trajectory) -> Result<f64> {
    check_shapes(pred, truth)?;
    let mut sum = 0.0;
    for (p, q) in pred.states().iter().zip(truth.states()) {
        sum += p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(sum / (truth.len() * truth.dim()) as f64)
}

/// `‖pred_N − truth_N‖ / ‖truth_N‖` at the final stamp.
pub fn rel_l2_terminal(pred: &Trajectory, truth: &Trajectory) -> Result<f64> {
    check_shapes(pred, truth)?;
    let p = pred.states().last().ok_or(Error::TooShort { needed: 1, have: 0 })?;
    let q = truth.states().last().unwrap();
    let num: f64 = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
    let den: f64 = q.iter().map(|b| b * b).sum();
    if den == 0.0 {
        return Err(Error::DegenerateData(0.0));
    }
    Ok((num / den).sqrt())
}
