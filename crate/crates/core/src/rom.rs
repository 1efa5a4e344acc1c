//! Reduced-order models: truncated SVD bases, projection of snapshots onto
//! them, and learned dynamics `α̇ = A0 α + F(D(N(α)), θ)` for the coefficients.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dictionary::{DictionarySpec, FeatureMap, NormalizationBounds};
use crate::error::{check_len, Error, Result};
use crate::field::{LinearPart, VectorField};
use crate::network::{Activation, MlpParams};
use crate::odeint::{integrate, linspace, Scheme, SolverConfig, Trajectory};
use crate::pde::{read_fields, write_fields, FieldSeries, Grid2D};
use crate::train::{train, TrainConfig, TrainReport};

/// Leading left singular vectors of a snapshot matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RomBasis {
    /// `m × r`, orthonormal columns.
    pub modes: DMatrix<f64>,
    /// Non-increasing.
    pub singular_values: Vec<f64>,
    pub grid: Option<Grid2D>,
}

impl RomBasis {
    pub fn rank(&self) -> usize {
        self.modes.ncols()
    }
}

/// Snapshots as columns.
pub fn snapshot_matrix(traj: &Trajectory) -> DMatrix<f64> {
    let m = traj.dim();
    let n = traj.len();
    DMatrix::from_iterator(m, n, traj.values())
}

/// Top-`r` left singular vectors and values of `x`.
pub fn svd_truncate(x: &DMatrix<f64>, r: usize) -> Result<RomBasis> {
    let (rows, cols) = x.shape();
    if r == 0 || r > rows.min(cols) {
        return Err(Error::RankTooLarge { rank: r, rows, cols });
    }
    let svd = x.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let keep = &order[..r];
    let modes = DMatrix::from_fn(rows, r, |i, j| u[(i, keep[j])]);
    Ok(RomBasis {
        modes,
        singular_values: keep.iter().map(|&k| svd.singular_values[k]).collect(),
        grid: None,
    })
}

/// Coefficients `α̃(t_i) = Urᵀ x_i` with the source stamps.
pub fn project(basis: &RomBasis, snapshots: &Trajectory) -> Result<Trajectory> {
    check_len("snapshot length", basis.modes.nrows(), snapshots.dim())?;
    let states = snapshots
        .states()
        .iter()
        .map(|s| {
            let v = basis.modes.tr_mul(&DMatrix::from_column_slice(s.len(), 1, s));
            v.as_slice().to_vec()
        })
        .collect();
    Trajectory::new(snapshots.times().to_vec(), states)
}

/// `Ur α(t_i)` for every stamp.
pub fn reconstruct(basis: &RomBasis, alpha: &Trajectory) -> Result<Trajectory> {
    check_len("coefficient length", basis.rank(), alpha.dim())?;
    let states = alpha
        .states()
        .iter()
        .map(|a| {
            (&basis.modes * DMatrix::from_column_slice(a.len(), 1, a))
                .as_slice()
                .to_vec()
        })
        .collect();
    Trajectory::new(alpha.times().to_vec(), states)
}

/// [`reconstruct`] de-vectorized onto the basis grid.
pub fn reconstruct_fields(basis: &RomBasis, alpha: &Trajectory) -> Result<FieldSeries> {
    let grid = basis
        .grid
        .ok_or_else(|| Error::InvalidConfig("basis has no grid metadata".into()))?;
    FieldSeries::new(grid, reconstruct(basis, alpha)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BasisMeta {
    rank: usize,
    rows: usize,
    singular_values: Vec<f64>,
}

/// Stores the modes as fields (one stamp per mode) in `<stem>.bin` and the
/// singular values in `<stem>.json`.
pub fn write_basis(dir: &Path, stem: &str, basis: &RomBasis) -> Result<()> {
    let grid = basis
        .grid
        .ok_or_else(|| Error::InvalidConfig("basis has no grid metadata".into()))?;
    let modes = (0..basis.rank())
        .map(|j| basis.modes.column(j).iter().copied().collect())
        .collect();
    let traj = Trajectory::new(linspace(0.0, (basis.rank() - 1) as f64, basis.rank()), modes)?;
    write_fields(&dir.join(format!("{stem}.bin")), &[FieldSeries::new(grid, traj)?])?;
    let meta = BasisMeta {
        rank: basis.rank(),
        rows: basis.modes.nrows(),
        singular_values: basis.singular_values.clone(),
    };
    std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn read_basis(dir: &Path, stem: &str) -> Result<RomBasis> {
    let meta: BasisMeta = serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
    let series = read_fields(&dir.join(format!("{stem}.bin")))?;
    let s = series
        .first()
        .ok_or_else(|| Error::Parse("basis file holds no record".into()))?;
    check_len("basis rank", meta.rank, s.len())?;
    check_len("basis rows", meta.rows, s.grid.len())?;
    let modes = DMatrix::from_iterator(meta.rows, meta.rank, s.trajectory.values());
    Ok(RomBasis {
        modes,
        singular_values: meta.singular_values,
        grid: Some(s.grid),
    })
}

/// Hyperparameters of the coefficient dynamics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RomModelConfig {
    pub rank: usize,
    pub degree: u32,
    pub hidden: usize,
    pub activation: Activation,
    /// Train the network closure alongside `A0`; otherwise `A0` alone.
    pub closure: bool,
    pub seed: u64,
}

impl Default for RomModelConfig {
    fn default() -> Self {
        Self {
            rank: 2,
            degree: 3,
            hidden: 8,
            activation: Activation::Elu,
            closure: true,
            seed: 0,
        }
    }
}

impl RomModelConfig {
    /// Zero `A0`, plus a freshly initialized closure when enabled.
    pub fn build(&self, alpha: &Trajectory) -> Result<VectorField> {
        let r = alpha.dim();
        let spec = DictionarySpec::new(r, self.degree, false)?;
        let bounds = NormalizationBounds::fit(alpha.values())?;
        let mlp = if self.closure {
            Some(MlpParams::init(spec.len(), self.hidden, r, self.activation, self.seed)?)
        } else {
            None
        };
        let features = FeatureMap::new(spec, bounds, None)?;
        VectorField::new(features, mlp, Some(LinearPart::zeros(r)))
    }
}

/// Trains the coefficient dynamics on projected series.
pub fn train_rom(
    alpha: &[Trajectory],
    model: &RomModelConfig,
    config: &TrainConfig,
) -> Result<(VectorField, TrainReport)> {
    let first = alpha.first().ok_or(Error::TooShort { needed: 1, have: 0 })?;
    let mut field = model.build(first)?;
    let report = train(&mut field, alpha, config)?;
    Ok((field, report))
}

/// Synthetic snapshots: a cubic oscillator `ä = −a − a³` driving two fixed
/// spatial patterns on a periodic grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RomSynthConfig {
    pub n: usize,
    pub stamps: usize,
    pub t_end: f64,
    pub a0: [f64; 2],
    /// Relative random perturbation of interior stamps (0 keeps them uniform).
    pub jitter: f64,
    pub seed: u64,
}

impl Default for RomSynthConfig {
    fn default() -> Self {
        Self {
            n: 16,
            stamps: 200,
            t_end: 10.0,
            a0: [1.5, 0.0],
            jitter: 0.0,
            seed: 0,
        }
    }
}

pub fn cubic_oscillator(_t: f64, a: &[f64], out: &mut [f64]) {
    out[0] = a[1];
    out[1] = -a[0] - a[0].powi(3);
}

pub fn synthetic_snapshots(cfg: &RomSynthConfig) -> Result<FieldSeries> {
    use rand::{Rng, SeedableRng};
    if cfg.stamps < 3 || !(cfg.t_end > 0.0) {
        return Err(Error::InvalidConfig("need >= 3 stamps and t_end > 0".into()));
    }
    let grid = Grid2D::unit_square(cfg.n)?;
    let mut times = linspace(0.0, cfg.t_end, cfg.stamps);
    if cfg.jitter > 0.0 {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
        let dt = times[1] - times[0];
        let n = times.len();
        for t in &mut times[1..n - 1] {
            *t += cfg.jitter.min(0.45) * dt * rng.random_range(-1.0..1.0);
        }
    }
    let coeffs = integrate(
        &(2, cubic_oscillator),
        &cfg.a0,
        &times,
        &SolverConfig::new(Scheme::Rk4, 20),
    )?;
    let tau = 2.0 * std::f64::consts::PI;
    let p1: Vec<f64> = (0..grid.len())
        .map(|p| (tau * grid.x(p / grid.ny)).sin() * (tau * grid.y(p % grid.ny)).cos())
        .collect();
    let p2: Vec<f64> = (0..grid.len())
        .map(|p| (2.0 * tau * grid.x(p / grid.ny)).cos() + 0.5 * (tau * grid.y(p % grid.ny)).sin())
        .collect();
    let states = coeffs
        .states()
        .iter()
        .map(|a| p1.iter().zip(&p2).map(|(u, v)| a[0] * u + a[1] * v).collect())
        .collect();
    FieldSeries::new(grid, Trajectory::new(times, states)?)
}

/// Mean-squared misfit between the rollout of `field` from the first
/// coefficient state and the projected series.
pub fn rollout_misfit(field: &VectorField, alpha: &Trajectory, solver: &SolverConfig) -> Result<f64> {
    let pred = integrate(field, alpha.initial(), alpha.times(), solver)?;
    crate::metrics::mse(&pred, alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn exact_low_rank_is_reproduced() {
        let x = random(30, 3, 1) * random(3, 20, 2);
        let b = svd_truncate(&x, 3).unwrap();
        let rec = &b.modes * b.modes.transpose() * &x;
        assert!((rec - &x).amax() < 1e-10);
        let gram = b.modes.transpose() * &b.modes;
        assert!((gram - DMatrix::identity(3, 3)).amax() < 1e-10);
    }

    #[test]
    fn diagonal_singular_values_are_sorted_magnitudes() {
        let x = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, -5.0, 3.0, 0.5]));
        let b = svd_truncate(&x, 4).unwrap();
        assert_eq!(b.singular_values.len(), 4);
        for (a, e) in b.singular_values.iter().zip([5.0, 3.0, 2.0, 0.5]) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_bounds() {
        let x = random(4, 3, 3);
        assert!(matches!(svd_truncate(&x, 4), Err(Error::RankTooLarge { .. })));
        assert!(matches!(svd_truncate(&x, 0), Err(Error::RankTooLarge { .. })));
    }

    #[test]
    fn projection_is_non_expansive_and_round_trips_in_span() {
        let x = random(12, 2, 4) * random(2, 9, 5);
        let traj = Trajectory::new(
            linspace(0.0, 1.0, 9),
            (0..9).map(|j| x.column(j).iter().copied().collect()).collect(),
        )
        .unwrap();
        let b = svd_truncate(&x, 2).unwrap();
        let a = project(&b, &traj).unwrap();
        for (ai, xi) in a.states().iter().zip(traj.states()) {
            let na: f64 = ai.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nx: f64 = xi.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(na <= nx + 1e-12);
        }
        let back = reconstruct(&b, &a).unwrap();
        for (p, q) in back.values().zip(traj.values()) {
            assert!((p - q).abs() < 1e-10);
        }
    }

    #[test]
    fn basis_file_round_trip() {
        let s = synthetic_snapshots(&RomSynthConfig {
            n: 6,
            stamps: 20,
            ..Default::default()
        })
        .unwrap();
        let mut b = svd_truncate(&snapshot_matrix(&s.trajectory), 2).unwrap();
        b.grid = Some(s.grid);
        let dir = tempfile::tempdir().unwrap();
        write_basis(dir.path(), "modes", &b).unwrap();
        let back = read_basis(dir.path(), "modes").unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn zero_coefficients_give_zero_fields() {
        let s = synthetic_snapshots(&RomSynthConfig {
            n: 5,
            stamps: 10,
            ..Default::default()
        })
        .unwrap();
        let mut b = svd_truncate(&snapshot_matrix(&s.trajectory), 2).unwrap();
        b.grid = Some(s.grid);
        let zero = Trajectory::new(vec![0.0, 1.0], vec![vec![0.0; 2]; 2]).unwrap();
        let f = reconstruct_fields(&b, &zero).unwrap();
        assert!(f.trajectory.values().all(|v| v == 0.0));
    }
}
