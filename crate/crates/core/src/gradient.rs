//! Gradients of the windowed training objective: reverse mode through the
//! Runge-Kutta stages, the continuous adjoint with stamp jumps, and a
//! central-difference checker.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::odeint::{rollout, tableau, Dynamics, Rollout, SolverConfig, Trajectory};

/// A vector field with trainable parameters and the derivative products the
/// gradient engines need.
pub trait Differentiable: Dynamics {
    fn param_count(&self) -> usize;
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, theta: &[f64]) -> Result<()>;
    /// Accumulates `wᵀ ∂g/∂x` into `x_bar` and `wᵀ ∂g/∂θ` into `theta_bar`.
    fn vjp(&self, t: f64, x: &[f64], w: &[f64], x_bar: &mut [f64], theta_bar: &mut [f64]);
    /// Writes `∂g/∂x · v + ∂g/∂t` into `out`.
    fn jvp_time(&self, t: f64, x: &[f64], v: &[f64], out: &mut [f64]);
}

/// Regularization weights of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSpec {
    /// Weight of `‖θ‖₁`.
    pub l1_weight: f64,
    /// Weight of `½ Σ ‖x_{i+1} − x_i‖²` over predicted states.
    pub smooth_weight: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            l1_weight: 1e-4,
            smooth_weight: 1e-5,
        }
    }
}

impl LossSpec {
    pub const NONE: LossSpec = LossSpec {
        l1_weight: 0.0,
        smooth_weight: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.l1_weight >= 0.0 && self.smooth_weight >= 0.0) {
            return Err(Error::InvalidConfig(
                "regularization weights must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    #[default]
    Bptt,
    Adjoint,
}

impl Engine {
    pub fn name(self) -> &'static str {
        match self {
            Engine::Bptt => "bptt",
            Engine::Adjoint => "adjoint",
        }
    }
}

impl std::str::FromStr for Engine {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bptt" => Ok(Engine::Bptt),
            "adjoint" => Ok(Engine::Adjoint),
            other => Err(Error::InvalidConfig(format!("unknown engine `{other}`"))),
        }
    }
}

/// Objective value split into parts, with the gradient when requested.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Full objective: misfit plus both regularizers.
    pub loss: f64,
    /// `Σ_{i≥1} ‖x_i − x̃_i‖²`.
    pub misfit: f64,
    pub grad: Vec<f64>,
}

fn check_window<D: Dynamics + ?Sized>(field: &D, window: &Trajectory) -> Result<()> {
    if window.len() < 2 {
        return Err(Error::TooShort {
            needed: 2,
            have: window.len(),
        });
    }
    check_len("window state", field.dim(), window.dim())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn l1(theta: &[f64]) -> f64 {
    theta.iter().map(|v| v.abs()).sum()
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `(misfit, smoothness sum)` of predicted states against the window.
fn loss_parts(states: &[Vec<f64>], window: &Trajectory) -> (f64, f64) {
    let misfit = states
        .iter()
        .zip(window.states())
        .skip(1)
        .map(|(x, y)| sq_dist(x, y))
        .sum();
    let smooth = states.windows(2).map(|w| sq_dist(&w[1], &w[0])).sum();
    (misfit, smooth)
}

/// Discrete objective on one window. The window's first state is the initial
/// condition. Returns the loss and the predicted trajectory.
pub fn objective<D: Differentiable + ?Sized>(
    field: &D,
    window: &Trajectory,
    solver: &SolverConfig,
    loss: &LossSpec,
) -> Result<(f64, Trajectory)> {
    check_window(field, window)?;
    let r = rollout(field, window.initial(), window.times(), solver, false)?;
    let (misfit, smooth) = loss_parts(&r.states, window);
    let value = misfit + loss.l1_weight * l1(&field.params()) + 0.5 * loss.smooth_weight * smooth;
    Ok((value, Trajectory::new(window.times().to_vec(), r.states)?))
}

fn add_l1_subgradient(theta: &[f64], weight: f64, grad: &mut [f64]) {
    if weight != 0.0 {
        for (g, &p) in grad.iter_mut().zip(theta) {
            *g += weight * sign(p);
        }
    }
}

/// Exact gradient of [`objective`] by reverse accumulation through every
/// stage of every internal step.
pub fn bptt_gradient<D: Differentiable + ?Sized>(
    field: &D,
    window: &Trajectory,
    solver: &SolverConfig,
    loss: &LossSpec,
) -> Result<Evaluation> {
    check_window(field, window)?;
    let r = rollout(field, window.initial(), window.times(), solver, true)?;
    let theta = field.params();
    let mut grad = vec![0.0; theta.len()];
    let (misfit, smooth) = loss_parts(&r.states, window);
    backprop(field, &r, window, loss.smooth_weight, &mut grad);
    add_l1_subgradient(&theta, loss.l1_weight, &mut grad);
    Ok(Evaluation {
        loss: misfit + loss.l1_weight * l1(&theta) + 0.5 * loss.smooth_weight * smooth,
        misfit,
        grad,
    })
}

fn backprop<D: Differentiable + ?Sized>(
    field: &D,
    r: &Rollout,
    window: &Trajectory,
    smooth_weight: f64,
    grad: &mut [f64],
) {
    let tab = tableau(r.scheme);
    let ns = tab.stages();
    let dim = field.dim();
    let n = r.states.len() - 1;
    let targets = window.states();
    let mut abar = vec![0.0; dim];
    let mut kbar = vec![vec![0.0; dim]; ns];
    let mut ybar = vec![0.0; dim];
    for i in (1..=n).rev() {
        let x = &r.states[i];
        for d in 0..dim {
            let mut g = 2.0 * (x[d] - targets[i][d]);
            g += smooth_weight * (x[d] - r.states[i - 1][d]);
            if i < n {
                g -= smooth_weight * (r.states[i + 1][d] - x[d]);
            }
            abar[d] += g;
        }
        for step in r.steps[i - 1].iter().rev() {
            let h = step.h;
            for (kb, &b) in kbar.iter_mut().zip(tab.b) {
                for (k, a) in kb.iter_mut().zip(&abar) {
                    *k = h * b * a;
                }
            }
            for s in (0..ns).rev() {
                if kbar[s].iter().all(|&v| v == 0.0) {
                    continue;
                }
                ybar.fill(0.0);
                let y = &step.stages[s * dim..(s + 1) * dim];
                field.vjp(step.t + tab.c[s] * h, y, &kbar[s], &mut ybar, grad);
                for (a, yb) in abar.iter_mut().zip(&ybar) {
                    *a += yb;
                }
                for (j, &a) in tab.a[s].iter().enumerate() {
                    if a != 0.0 {
                        let ha = h * a;
                        for (k, yb) in kbar[j].iter_mut().zip(&ybar) {
                            *k += ha * yb;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint gradient plus the costate `λ` reached at each stamp, after that
/// stamp's jump has been applied.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointEvaluation {
    pub evaluation: Evaluation,
    pub lambda: Vec<Vec<f64>>,
}

/// Gradient from the continuous adjoint. The costate is integrated backward
/// with classical RK4 using `adjoint_substeps` steps per interval, the state
/// restarts from the stored forward value at every stamp, and the smoothness
/// term is taken in its continuous form `½ β2 ∫ ‖ẋ‖²` with
/// `β2 = smooth_weight · mean Δt`.
pub fn adjoint_gradient<D: Differentiable + ?Sized>(
    field: &D,
    window: &Trajectory,
    solver: &SolverConfig,
    loss: &LossSpec,
    adjoint_substeps: usize,
) -> Result<AdjointEvaluation> {
    check_window(field, window)?;
    if adjoint_substeps == 0 {
        return Err(Error::InvalidConfig("adjoint_substeps must be >= 1".into()));
    }
    let times = window.times();
    let r = rollout(field, window.initial(), times, solver, false)?;
    let theta = field.params();
    let np = theta.len();
    let dim = field.dim();
    let n = times.len() - 1;
    let beta2 = loss.smooth_weight * (times[n] - times[0]) / n as f64;
    let targets = window.states();

    let aug = Augmented { field, beta2, np };
    let mut state = vec![0.0; 2 * dim + np];
    let mut lambda = vec![Vec::new(); n + 1];
    let mut g = vec![0.0; dim];
    for i in (1..=n).rev() {
        state[..dim].copy_from_slice(&r.states[i]);
        for d in 0..dim {
            state[dim + d] += 2.0 * (r.states[i][d] - targets[i][d]);
        }
        if i == n && beta2 != 0.0 {
            field.rhs(times[n], &r.states[n], &mut g);
            for d in 0..dim {
                state[dim + d] += beta2 * g[d];
            }
        }
        lambda[i] = state[dim..2 * dim].to_vec();
        let h = (times[i - 1] - times[i]) / adjoint_substeps as f64;
        for j in 0..adjoint_substeps {
            let t = times[i] + j as f64 * h;
            aug.rk4(t, h, &mut state);
            if !state.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteState {
                    interval: i - 1,
                    time: t,
                });
            }
        }
    }
    lambda[0] = state[dim..2 * dim].to_vec();
    let mut grad = state[2 * dim..].to_vec();
    add_l1_subgradient(&theta, loss.l1_weight, &mut grad);
    let (misfit, smooth) = loss_parts(&r.states, window);
    Ok(AdjointEvaluation {
        evaluation: Evaluation {
            loss: misfit + loss.l1_weight * l1(&theta) + 0.5 * loss.smooth_weight * smooth,
            misfit,
            grad,
        },
        lambda,
    })
}

/// The augmented system `(x, λ, μ)` integrated in reverse time, where
/// `μ̇ = −λᵀ g_θ` so that `μ(t₀) = ∫ λᵀ g_θ dτ`.
struct Augmented<'a, D: ?Sized> {
    field: &'a D,
    beta2: f64,
    np: usize,
}

impl<D: Differentiable + ?Sized> Augmented<'_, D> {
    fn eval(&self, t: f64, s: &[f64], out: &mut [f64]) {
        let dim = self.field.dim();
        let (x, lam) = (&s[..dim], &s[dim..2 * dim]);
        let (dx, rest) = out.split_at_mut(dim);
        let (dlam, dmu) = rest.split_at_mut(dim);
        self.field.rhs(t, x, dx);
        dlam.fill(0.0);
        dmu.fill(0.0);
        self.field.vjp(t, x, lam, dlam, dmu);
        for v in dlam.iter_mut() {
            *v = -*v;
        }
        for v in dmu.iter_mut() {
            *v = -*v;
        }
        if self.beta2 != 0.0 {
            let mut acc = vec![0.0; dim];
            self.field.jvp_time(t, x, dx, &mut acc);
            for (l, a) in dlam.iter_mut().zip(acc) {
                *l += self.beta2 * a;
            }
        }
    }

    fn rk4(&self, t: f64, h: f64, s: &mut [f64]) {
        let len = s.len();
        debug_assert_eq!(len, 2 * self.field.dim() + self.np);
        let mut k1 = vec![0.0; len];
        let mut k2 = vec![0.0; len];
        let mut k3 = vec![0.0; len];
        let mut k4 = vec![0.0; len];
        let mut y = vec![0.0; len];
        self.eval(t, s, &mut k1);
        axpy(&mut y, s, 0.5 * h, &k1);
        self.eval(t + 0.5 * h, &y, &mut k2);
        axpy(&mut y, s, 0.5 * h, &k2);
        self.eval(t + 0.5 * h, &y, &mut k3);
        axpy(&mut y, s, h, &k3);
        self.eval(t + h, &y, &mut k4);
        for i in 0..len {
            s[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
}

fn axpy(out: &mut [f64], x: &[f64], a: f64, y: &[f64]) {
    for ((o, xi), yi) in out.iter_mut().zip(x).zip(y) {
        *o = xi + a * yi;
    }
}

/// Loss and gradient with the chosen engine.
pub fn evaluate<D: Differentiable + ?Sized>(
    field: &D,
    window: &Trajectory,
    solver: &SolverConfig,
    loss: &LossSpec,
    engine: Engine,
    adjoint_substeps: usize,
) -> Result<Evaluation> {
    match engine {
        Engine::Bptt => bptt_gradient(field, window, solver, loss),
        Engine::Adjoint => adjoint_gradient(field, window, solver, loss, adjoint_substeps).map(|a| a.evaluation),
    }
}

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub engine: Engine,
    pub worst_rel_err: f64,
    pub index: usize,
    pub step: f64,
}

/// Worst componentwise relative error of `analytic` against `reference` and
/// its index. Each difference is scaled by the larger of the two magnitudes,
/// floored at `1e-3 · ‖reference‖∞` so that near-zero components are judged
/// against the gradient's overall size.
pub fn relative_error(analytic: &[f64], reference: &[f64]) -> (f64, usize) {
    let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    let mut worst = (0.0, 0);
    for (i, (a, f)) in analytic.iter().zip(reference).enumerate() {
        let err = (a - f).abs() / a.abs().max(f.abs()).max(floor);
        if err > worst.0 || err.is_nan() {
            worst = (err, i);
        }
    }
    worst
}

/// Central-difference gradient of [`objective`] with respect to every
/// parameter.
pub fn finite_difference_gradient<D: Differentiable + Clone>(
    field: &D,
    window: &Trajectory,
    solver: &SolverConfig,
    loss: &LossSpec,
    step: f64,
) -> Result<Vec<f64>> {
    let theta = field.params();
    let mut probe = field.clone();
    let mut p = theta.clone();
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        p[i] = theta[i] + step;
        probe.set_params(&p)?;
        let up = objective(&probe, window, solver, loss)?.0;
        p[i] = theta[i] - step;
        probe.set_params(&p)?;
        let down = objective(&probe, window, solver, loss)?.0;
        p[i] = theta[i];
        out.push((up - down) / (2.0 * step));
    }
    Ok(out)
}

/// Compares the engine's gradient with central differences of step `step`.
pub fn grad_check<D: Differentiable + Clone>(
    field: &D,
    window: &Trajectory,
    solver: &SolverConfig,
    loss: &LossSpec,
    engine: Engine,
    adjoint_substeps: usize,
    step: f64,
) -> Result<GradCheckReport> {
    if !(step > 0.0) {
        return Err(Error::InvalidConfig(format!("step must be > 0, got {step}")));
    }
    let analytic = evaluate(field, window, solver, loss, engine, adjoint_substeps)?.grad;
    let fd = finite_difference_gradient(field, window, solver, loss, step)?;
    let (worst_rel_err, index) = relative_error(&analytic, &fd);
    Ok(GradCheckReport {
        engine,
        worst_rel_err,
        index,
        step,
    })
}
