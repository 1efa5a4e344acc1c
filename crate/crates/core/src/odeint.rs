//! Explicit Runge-Kutta integration with sub-grid stepping between data stamps.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Right-hand side `ẋ = g(t, x)` of an ODE system.
pub trait Dynamics: Sync {
    fn dim(&self) -> usize;
    fn rhs(&self, t: f64, x: &[f64], out: &mut [f64]);
}

impl<F> Dynamics for (usize, F)
where
    F: Fn(f64, &[f64], &mut [f64]) + Sync,
{
    fn dim(&self) -> usize {
        self.0
    }
    fn rhs(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.1)(t, x, out)
    }
}

/// Time stamps with one state vector per stamp.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    times: Vec<f64>,
    states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn new(times: Vec<f64>, states: Vec<Vec<f64>>) -> Result<Self> {
        check_len("trajectory states", times.len(), states.len())?;
        if times.is_empty() {
            return Err(Error::TooShort { needed: 1, have: 0 });
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidConfig("time stamps must be strictly increasing".into()));
        }
        let d = states[0].len();
        if d == 0 {
            return Err(Error::InvalidConfig("states must have at least one component".into()));
        }
        for s in &states {
            check_len("trajectory state", d, s.len())?;
        }
        Ok(Self { times, states })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states[0].len()
    }

    pub fn initial(&self) -> &[f64] {
        &self.states[0]
    }

    /// Stamps `start..=end` as a new trajectory.
    pub fn window(&self, start: usize, end: usize) -> Result<Trajectory> {
        if end >= self.len() || start > end {
            return Err(Error::TooShort {
                needed: end + 1,
                have: self.len(),
            });
        }
        Ok(Trajectory {
            times: self.times[start..=end].to_vec(),
            states: self.states[start..=end].to_vec(),
        })
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.states.iter().flatten().copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Euler,
    #[default]
    Rk4,
    Rk45,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub scheme: Scheme,
    /// Uniform internal steps per data interval (initial guess for `rk45`).
    pub substeps: usize,
    /// Error tolerance for `rk45`.
    pub rk45_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Rk4,
            substeps: 1,
            rk45_tol: 1e-6,
        }
    }
}

impl SolverConfig {
    pub fn new(scheme: Scheme, substeps: usize) -> Self {
        Self {
            scheme,
            substeps,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.substeps == 0 {
            return Err(Error::InvalidConfig("substeps must be >= 1".into()));
        }
        if !(self.rk45_tol > 0.0) {
            return Err(Error::InvalidConfig("rk45_tol must be > 0".into()));
        }
        Ok(())
    }
}

/// Butcher tableau of an explicit method. `a` is strictly lower triangular,
/// stored row by row (`a[s]` has `s` entries).
#[derive(Debug)]
pub(crate) struct Tableau {
    pub a: &'static [&'static [f64]],
    pub b: &'static [f64],
    pub c: &'static [f64],
    /// Embedded lower-order weights, for error control.
    pub b_low: Option<&'static [f64]>,
}

impl Tableau {
    pub fn stages(&self) -> usize {
        self.b.len()
    }
}

pub(crate) static EULER: Tableau = Tableau {
    a: &[&[]],
    b: &[1.0],
    c: &[0.0],
    b_low: None,
};

pub(crate) static RK4: Tableau = Tableau {
    a: &[&[], &[0.5], &[0.0, 0.5], &[0.0, 0.0, 1.0]],
    b: &[1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
    c: &[0.0, 0.5, 0.5, 1.0],
    b_low: None,
};

pub(crate) static DOPRI5: Tableau = Tableau {
    a: &[
        &[],
        &[1.0 / 5.0],
        &[3.0 / 40.0, 9.0 / 40.0],
        &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
        &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
        &[
            9017.0 / 3168.0,
            -355.0 / 33.0,
            46732.0 / 5247.0,
            49.0 / 176.0,
            -5103.0 / 18656.0,
        ],
        &[
            35.0 / 384.0,
            0.0,
            500.0 / 1113.0,
            125.0 / 192.0,
            -2187.0 / 6784.0,
            11.0 / 84.0,
        ],
    ],
    b: &[
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
        0.0,
    ],
    c: &[0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0],
    b_low: Some(&[
        5179.0 / 57600.0,
        0.0,
        7571.0 / 16695.0,
        393.0 / 640.0,
        -92097.0 / 339200.0,
        187.0 / 2100.0,
        1.0 / 40.0,
    ]),
};

pub(crate) fn tableau(scheme: Scheme) -> &'static Tableau {
    match scheme {
        Scheme::Euler => &EULER,
        Scheme::Rk4 => &RK4,
        Scheme::Rk45 => &DOPRI5,
    }
}

/// Stage workspace for one explicit step.
pub(crate) struct StepWork {
    pub k: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

impl StepWork {
    pub fn new(stages: usize, dim: usize) -> Self {
        Self {
            k: vec![vec![0.0; dim]; stages],
            y: vec![0.0; dim],
        }
    }
}

/// One explicit step. Stage inputs are appended to `record` when given
/// (`stages * dim` values, stage-major).
pub(crate) fn explicit_step<D: Dynamics + ?Sized>(
    field: &D,
    tab: &Tableau,
    t: f64,
    x: &[f64],
    h: f64,
    work: &mut StepWork,
    mut record: Option<&mut Vec<f64>>,
    out: &mut [f64],
) {
    let StepWork { k, y } = work;
    for s in 0..tab.stages() {
        y.copy_from_slice(x);
        for (j, &a) in tab.a[s].iter().enumerate() {
            if a != 0.0 {
                let ha = h * a;
                for (yi, kj) in y.iter_mut().zip(&k[j]) {
                    *yi += ha * kj;
                }
            }
        }
        if let Some(r) = record.as_deref_mut() {
            r.extend_from_slice(y);
        }
        field.rhs(t + tab.c[s] * h, y, &mut k[s]);
    }
    out.copy_from_slice(x);
    for (s, &b) in tab.b.iter().enumerate() {
        if b != 0.0 {
            let hb = h * b;
            for (o, ks) in out.iter_mut().zip(&k[s]) {
                *o += hb * ks;
            }
        }
    }
}

/// A single explicit step of `scheme` from `(t, x)` with step `h`.
pub fn rk_step<D: Dynamics + ?Sized>(field: &D, t: f64, x: &[f64], h: f64, scheme: Scheme) -> Result<Vec<f64>> {
    check_len("rk_step state", field.dim(), x.len())?;
    if !(h > 0.0) {
        return Err(Error::InvalidConfig(format!("step size must be > 0, got {h}")));
    }
    let tab = tableau(scheme);
    let mut work = StepWork::new(tab.stages(), x.len());
    let mut out = vec![0.0; x.len()];
    explicit_step(field, tab, t, x, h, &mut work, None, &mut out);
    if out.iter().all(|v| v.is_finite()) {
        Ok(out)
    } else {
        Err(Error::NonFiniteState { interval: 0, time: t })
    }
}

/// One recorded internal step: start time, step size and stage inputs.
#[derive(Debug, Clone)]
pub(crate) struct StepRecord {
    pub t: f64,
    pub h: f64,
    pub stages: Vec<f64>,
}

/// Forward pass with everything reverse mode needs.
#[derive(Debug, Clone)]
pub(crate) struct Rollout {
    pub states: Vec<Vec<f64>>,
    /// Steps per data interval.
    pub steps: Vec<Vec<StepRecord>>,
    pub scheme: Scheme,
}

pub(crate) fn rollout<D: Dynamics + ?Sized>(
    field: &D,
    x0: &[f64],
    times: &[f64],
    solver: &SolverConfig,
    record: bool,
) -> Result<Rollout> {
    solver.validate()?;
    check_len("initial state", field.dim(), x0.len())?;
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidConfig("time stamps must be strictly increasing".into()));
    }
    let dim = x0.len();
    let tab = tableau(solver.scheme);
    let mut work = StepWork::new(tab.stages(), dim);
    let mut states = Vec::with_capacity(times.len());
    states.push(x0.to_vec());
    let mut steps = Vec::with_capacity(times.len().saturating_sub(1));
    let mut x = x0.to_vec();
    let mut next = vec![0.0; dim];
    for (i, w) in times.windows(2).enumerate() {
        let (t0, t1) = (w[0], w[1]);
        let mut recs = Vec::new();
        match solver.scheme {
            Scheme::Euler | Scheme::Rk4 => {
                let h = (t1 - t0) / solver.substeps as f64;
                for j in 0..solver.substeps {
                    let t = t0 + j as f64 * h;
                    let mut rec = record.then(|| Vec::with_capacity(tab.stages() * dim));
                    explicit_step(field, tab, t, &x, h, &mut work, rec.as_mut(), &mut next);
                    if !next.iter().all(|v| v.is_finite()) {
                        return Err(Error::NonFiniteState { interval: i, time: t });
                    }
                    std::mem::swap(&mut x, &mut next);
                    if let Some(stages) = rec {
                        recs.push(StepRecord { t, h, stages });
                    }
                }
            }
            Scheme::Rk45 => {
                adaptive_interval(field, t0, t1, &mut x, solver, &mut work, record.then_some(&mut recs))
                    .map_err(|t| Error::NonFiniteState { interval: i, time: t })?;
            }
        }
        states.push(x.clone());
        steps.push(recs);
    }
    Ok(Rollout {
        states,
        steps,
        scheme: solver.scheme,
    })
}

/// Dormand–Prince stepping across `[t0, t1]`, landing exactly on `t1`.
/// Returns the failing time on blow-up.
fn adaptive_interval<D: Dynamics + ?Sized>(
    field: &D,
    t0: f64,
    t1: f64,
    x: &mut [f64],
    solver: &SolverConfig,
    work: &mut StepWork,
    mut recs: Option<&mut Vec<StepRecord>>,
) -> std::result::Result<(), f64> {
    let tab = &DOPRI5;
    let b_low = tab.b_low.expect("dopri5 has an embedded pair");
    let span = t1 - t0;
    let min_step = span * 1e-12;
    let tol = solver.rk45_tol;
    let dim = x.len();
    let mut h = span / solver.substeps as f64;
    let mut t = t0;
    let mut next = vec![0.0; dim];
    let mut stage_buf = Vec::with_capacity(tab.stages() * dim);
    while t < t1 {
        let last = t + h >= t1 - 1e-12 * span.abs().max(t1.abs());
        let step = if last { t1 - t } else { h };
        stage_buf.clear();
        explicit_step(field, tab, t, x, step, work, Some(&mut stage_buf), &mut next);
        if !next.iter().all(|v| v.is_finite()) {
            if step <= min_step {
                return Err(t);
            }
            h = step * 0.2;
            continue;
        }
        let mut err: f64 = 0.0;
        for i in 0..dim {
            let mut e = 0.0;
            for s in 0..tab.stages() {
                e += (tab.b[s] - b_low[s]) * work.k[s][i];
            }
            let scale = tol * (1.0 + x[i].abs().max(next[i].abs()));
            err = err.max((step * e).abs() / scale);
        }
        if err <= 1.0 {
            if let Some(r) = recs.as_deref_mut() {
                r.push(StepRecord {
                    t,
                    h: step,
                    stages: stage_buf.clone(),
                });
            }
            x.copy_from_slice(&next);
            t = if last { t1 } else { t + step };
            let grow = if err == 0.0 {
                5.0
            } else {
                (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
            };
            if !last {
                h = step * grow;
            }
        } else {
            if step <= min_step {
                return Err(t);
            }
            h = step * (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
        }
    }
    Ok(())
}

/// Integrates `field` from `x0` and reports the state at every stamp.
pub fn integrate<D: Dynamics + ?Sized>(
    field: &D,
    x0: &[f64],
    times: &[f64],
    solver: &SolverConfig,
) -> Result<Trajectory> {
    if times.is_empty() {
        return Err(Error::TooShort { needed: 1, have: 0 });
    }
    let r = rollout(field, x0, times, solver, false)?;
    Trajectory::new(times.to_vec(), r.states)
}

/// `n` evenly spaced stamps on `[t0, t1]`, endpoints included.
pub fn linspace(t0: f64, t1: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![t0],
        _ => {
            let dt = (t1 - t0) / (n - 1) as f64;
            (0..n)
                .map(|i| if i == n - 1 { t1 } else { t0 + i as f64 * dt })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn growth() -> (usize, impl Fn(f64, &[f64], &mut [f64]) + Sync) {
        (1, |_t: f64, x: &[f64], o: &mut [f64]| o[0] = x[0])
    }

    fn decay() -> (usize, impl Fn(f64, &[f64], &mut [f64]) + Sync) {
        (1, |_t: f64, x: &[f64], o: &mut [f64]| o[0] = -x[0])
    }

    #[test]
    fn zero_field_is_identity() {
        let f = (2, |_t: f64, _x: &[f64], o: &mut [f64]| o.fill(0.0));
        for s in [Scheme::Euler, Scheme::Rk4, Scheme::Rk45] {
            assert_eq!(rk_step(&f, 0.0, &[1.0, -2.0], 0.1, s).unwrap(), vec![1.0, -2.0]);
        }
        let tr = integrate(&f, &[3.0, 4.0], &[0.0, 1.0, 2.0], &SolverConfig::default()).unwrap();
        assert!(tr.states().iter().all(|s| s == &vec![3.0, 4.0]));
    }

    #[test]
    fn single_steps_on_exponential() {
        let f = growth();
        let e = rk_step(&f, 0.0, &[1.0], 0.1, Scheme::Euler).unwrap()[0];
        assert!((e - 1.1).abs() < 1e-15);
        let r = rk_step(&f, 0.0, &[1.0], 0.1, Scheme::Rk4).unwrap()[0];
        let taylor = 1.0 + 0.1 + 0.01 / 2.0 + 0.001 / 6.0 + 0.0001 / 24.0;
        assert!((r - taylor).abs() < 1e-15);
    }

    #[test]
    fn substeps_compose_bitwise() {
        let f = (2, |t: f64, x: &[f64], o: &mut [f64]| {
            o[0] = x[1] * t.cos();
            o[1] = -x[0] + 0.1 * x[1] * x[1];
        });
        let times = [0.0, 0.3, 0.7, 1.0];
        for scheme in [Scheme::Euler, Scheme::Rk4] {
            let solver = SolverConfig::new(scheme, 3);
            let tr = integrate(&f, &[1.0, 0.5], &times, &solver).unwrap();
            let mut x = vec![1.0, 0.5];
            for (i, w) in times.windows(2).enumerate() {
                let h = (w[1] - w[0]) / 3.0;
                for j in 0..3 {
                    x = rk_step(&f, w[0] + j as f64 * h, &x, h, scheme).unwrap();
                }
                let got = &tr.states()[i + 1];
                assert!(got.iter().zip(&x).all(|(a, b)| a.to_bits() == b.to_bits()));
            }
        }
    }

    #[test]
    fn rk45_lands_on_stamps() {
        let f = decay();
        let times = [0.0, 0.25, 1.0, 3.0];
        let solver = SolverConfig {
            scheme: Scheme::Rk45,
            substeps: 1,
            rk45_tol: 1e-9,
        };
        let tr = integrate(&f, &[1.0], &times, &solver).unwrap();
        for (t, s) in times.iter().zip(tr.states()) {
            assert!((s[0] - (-t).exp()).abs() < 1e-7, "t={t} {}", s[0]);
        }
    }

    #[test]
    fn non_finite_reports_interval() {
        let f = (1, |_t: f64, x: &[f64], o: &mut [f64]| o[0] = x[0] * x[0]);
        let err = integrate(&f, &[1.0], &[0.0, 0.5, 2.0, 3.0], &SolverConfig::new(Scheme::Euler, 50));
        match err {
            Err(Error::NonFiniteState { interval, .. }) => assert!(interval >= 1),
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn invalid_inputs() {
        let f = decay();
        assert!(rk_step(&f, 0.0, &[1.0], 0.0, Scheme::Rk4).is_err());
        assert!(rk_step(&f, 0.0, &[1.0, 2.0], 0.1, Scheme::Rk4).is_err());
        assert!(integrate(&f, &[1.0], &[0.0, 0.0], &SolverConfig::default()).is_err());
        assert!(integrate(&f, &[1.0], &[0.0, 1.0], &SolverConfig::new(Scheme::Rk4, 0)).is_err());
        assert!(Trajectory::new(vec![0.0, 1.0], vec![vec![1.0]]).is_err());
    }

    #[test]
    fn linspace_endpoints() {
        let t = linspace(0.0, 2.5, 250);
        assert_eq!(t.len(), 250);
        assert_eq!(t[0], 0.0);
        assert_eq!(t[249], 2.5);
    }
}
