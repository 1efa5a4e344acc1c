//! JSON checkpoints of trained models. Floats are written in shortest
//! round-trip form, so a reload reproduces the parameters bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::VectorField;
use crate::odeint::SolverConfig;
use crate::pde::PdeModel;

const FORMAT: &str = "neupde-checkpoint-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Model {
    Ode(VectorField),
    Pde(PdeModel),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub model: Model,
    pub solver: SolverConfig,
    pub iterations: usize,
    #[serde(default)]
    pub final_full_mse: Option<f64>,
}

impl Checkpoint {
    pub fn new(model: Model, solver: SolverConfig, iterations: usize, final_full_mse: Option<f64>) -> Self {
        Self {
            format: FORMAT.to_string(),
            model,
            solver,
            iterations,
            final_full_mse: final_full_mse.filter(|v| v.is_finite()),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(text)?;
        if c.format != FORMAT {
            return Err(Error::Parse(format!("unsupported checkpoint format `{}`", c.format)));
        }
        match &c.model {
            Model::Ode(f) => f.validate()?,
            Model::Pde(m) => m.validate()?,
        }
        c.solver.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
