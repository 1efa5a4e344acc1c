//! Reference systems used to generate training data.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::odeint::{integrate, linspace, Dynamics, Scheme, SolverConfig, Trajectory};

pub fn lorenz_rhs(x: &[f64]) -> [f64; 3] {
    [
        10.0 * (x[1] - x[0]),
        x[0] * (28.0 - x[2]) - x[1],
        x[0] * x[1] - 8.0 * x[2] / 3.0,
    ]
}

pub fn spiral_rhs(t: f64, x: &[f64]) -> [f64; 3] {
    [
        2.0 * x[1].powi(3),
        -2.0 * x[0].powi(3),
        0.25 + 0.5 * (std::f64::consts::PI * t).sin(),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum System {
    Lorenz,
    Spiral,
}

impl System {
    pub fn is_autonomous(self) -> bool {
        self == System::Lorenz
    }
}

impl Dynamics for System {
    fn dim(&self) -> usize {
        3
    }

    fn rhs(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let v = match self {
            System::Lorenz => lorenz_rhs(x),
            System::Spiral => spiral_rhs(t, x),
        };
        out.copy_from_slice(&v);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub system: System,
    pub x0: Vec<f64>,
    pub t0: f64,
    pub t_end: f64,
    /// Number of stamps, endpoints included.
    pub stamps: usize,
    #[serde(default = "default_fine_substeps")]
    pub fine_substeps: usize,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_fine_substeps() -> usize {
    100
}

impl GeneratorConfig {
    pub fn lorenz() -> Self {
        Self {
            system: System::Lorenz,
            x0: vec![-8.0, 7.0, 27.0],
            t0: 0.0,
            t_end: 2.5,
            stamps: 250,
            fine_substeps: default_fine_substeps(),
            noise_sigma: 0.0,
            seed: 0,
        }
    }

    pub fn spiral() -> Self {
        Self {
            system: System::Spiral,
            x0: vec![1.0, 0.0, 0.0],
            t0: 0.0,
            t_end: 6.0,
            stamps: 300,
            fine_substeps: default_fine_substeps(),
            noise_sigma: 0.05,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.x0.len() != 3 {
            return bad(format!("x0 must have 3 components, got {}", self.x0.len()));
        }
        if !(self.t_end > self.t0) {
            return bad("t_end must exceed t0".into());
        }
        if self.stamps < 2 {
            return bad("at least 2 stamps are required".into());
        }
        if self.fine_substeps == 0 {
            return bad("fine_substeps must be >= 1".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be >= 0".into());
        }
        Ok(())
    }

    pub fn times(&self) -> Vec<f64> {
        linspace(self.t0, self.t_end, self.stamps)
    }
}

/// Clean and noisy trajectories. Noise is added to every state except the
/// first.
pub fn generate(config: &GeneratorConfig) -> Result<(Trajectory, Trajectory)> {
    config.validate()?;
    let solver = SolverConfig::new(Scheme::Rk4, config.fine_substeps);
    let clean = integrate(&config.system, &config.x0, &config.times(), &solver)?;
    let noisy = add_noise(&clean, config.noise_sigma, config.seed)?;
    Ok((clean, noisy))
}

/// Adds i.i.d. `N(0, sigma²)` to every component of every non-initial state.
pub fn add_noise(clean: &Trajectory, sigma: f64, seed: u64) -> Result<Trajectory> {
    if sigma == 0.0 {
        return Ok(clean.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states = clean.states().to_vec();
    for s in states.iter_mut().skip(1) {
        for v in s.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    Trajectory::new(clean.times().to_vec(), states)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lorenz_values() {
        assert_eq!(lorenz_rhs(&[0.0; 3]), [0.0; 3]);
        assert_eq!(lorenz_rhs(&[1.0, 1.0, 1.0]), [0.0, 26.0, 1.0 - 8.0 / 3.0]);
        let r = 72f64.sqrt();
        let f = lorenz_rhs(&[r, r, 27.0]);
        assert!(f.iter().all(|v| v.abs() < 1e-12), "{f:?}");
    }

    #[test]
    fn spiral_values() {
        assert_eq!(spiral_rhs(0.3, &[0.0, 0.0, 5.0])[..2], [0.0, 0.0]);
        assert!((spiral_rhs(0.5, &[0.0; 3])[2] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn spiral_conserves_quartic() {
        let cfg = GeneratorConfig {
            noise_sigma: 0.0,
            ..GeneratorConfig::spiral()
        };
        let (clean, noisy) = generate(&cfg).unwrap();
        assert_eq!(clean, noisy);
        let q0 = 1.0;
        for s in clean.states() {
            let q = s[0].powi(4) + s[1].powi(4);
            assert!((q - q0).abs() / q0 < 1e-6, "{q}");
        }
    }

    #[test]
    fn noise_is_seeded_and_spares_initial_state() {
        let cfg = GeneratorConfig::spiral();
        let (clean, a) = generate(&cfg).unwrap();
        let (_, b) = generate(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.times(), clean.times());
        assert_eq!(a.initial(), clean.initial());
        assert_ne!(a.states()[1], clean.states()[1]);
    }

    #[test]
    fn lorenz_fine_substeps_converge_at_fourth_order() {
        let base = GeneratorConfig {
            t_end: 0.5,
            stamps: 11,
            ..GeneratorConfig::lorenz()
        };
        let end = |s: usize| {
            let (c, _) = generate(&GeneratorConfig {
                fine_substeps: s,
                ..base.clone()
            })
            .unwrap();
            c.states().last().unwrap().clone()
        };
        let exact = end(400);
        let e = |s| {
            end(s)
                .iter()
                .zip(&exact)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        };
        let ratio = e(10) / e(20);
        assert!((12.0..20.0).contains(&ratio), "{ratio}");
    }
}
