//! Sparse-regression baselines on finite-difference derivative estimates:
//! sequentially thresholded least squares and a debiased LASSO.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dictionary::DictionarySpec;
use crate::error::{Error, Result};
use crate::odeint::Trajectory;

/// Second-order derivative estimates on a possibly non-uniform grid: central
/// three-point formulas inside, one-sided three-point formulas at the ends.
pub fn estimate_derivatives(traj: &Trajectory) -> Result<Vec<Vec<f64>>> {
    let n = traj.len();
    if n < 3 {
        return Err(Error::TooShort { needed: 3, have: n });
    }
    let t = traj.times();
    let x = traj.states();
    let d = traj.dim();
    let combine = |w: [f64; 3], i: [usize; 3]| -> Vec<f64> {
        (0..d)
            .map(|k| w[0] * x[i[0]][k] + w[1] * x[i[1]][k] + w[2] * x[i[2]][k])
            .collect()
    };
    let mut out = Vec::with_capacity(n);
    let (h1, h2) = (t[1] - t[0], t[2] - t[1]);
    out.push(combine(
        [
            -(2.0 * h1 + h2) / (h1 * (h1 + h2)),
            (h1 + h2) / (h1 * h2),
            -h1 / (h2 * (h1 + h2)),
        ],
        [0, 1, 2],
    ));
    for i in 1..n - 1 {
        let (h1, h2) = (t[i] - t[i - 1], t[i + 1] - t[i]);
        out.push(combine(
            [-h2 / (h1 * (h1 + h2)), (h2 - h1) / (h1 * h2), h1 / (h2 * (h1 + h2))],
            [i - 1, i, i + 1],
        ));
    }
    let (h1, h2) = (t[n - 2] - t[n - 3], t[n - 1] - t[n - 2]);
    out.push(combine(
        [
            h2 / (h1 * (h1 + h2)),
            -(h1 + h2) / (h1 * h2),
            (h1 + 2.0 * h2) / (h2 * (h1 + h2)),
        ],
        [n - 3, n - 2, n - 1],
    ));
    Ok(out)
}

/// `Θ ξ ≈ Ẋ` with unnormalized monomial columns.
#[derive(Debug, Clone)]
pub struct RegressionProblem {
    /// `N × n` library matrix.
    pub library: DMatrix<f64>,
    /// `N × d` derivative estimates.
    pub targets: DMatrix<f64>,
    pub term_names: Vec<String>,
}

impl RegressionProblem {
    pub fn terms(&self) -> usize {
        self.library.ncols()
    }

    pub fn components(&self) -> usize {
        self.targets.ncols()
    }
}

/// Evaluates the dictionary on the raw samples. With `include_constant` a
/// leading column of ones named `1` is added.
pub fn build_problem(traj: &Trajectory, spec: &DictionarySpec, include_constant: bool) -> Result<RegressionProblem> {
    crate::error::check_len("dictionary dimension", traj.dim(), spec.dim())?;
    let deriv = estimate_derivatives(traj)?;
    let offset = usize::from(include_constant);
    let cols = spec.len() + offset;
    let mut library = DMatrix::zeros(traj.len(), cols);
    for (i, (t, x)) in traj.times().iter().zip(traj.states()).enumerate() {
        let phi = spec.eval(spec.include_time().then_some(*t), x)?;
        if include_constant {
            library[(i, 0)] = 1.0;
        }
        for (j, v) in phi.into_iter().enumerate() {
            library[(i, j + offset)] = v;
        }
    }
    let targets = DMatrix::from_fn(traj.len(), traj.dim(), |i, k| deriv[i][k]);
    let names = spec.default_var_names();
    let mut term_names: Vec<String> = include_constant.then(|| "1".to_string()).into_iter().collect();
    term_names.extend((0..spec.len()).map(|j| spec.term_name(j, &names)));
    Ok(RegressionProblem {
        library,
        targets,
        term_names,
    })
}

/// Minimum-norm least squares. The flag is set when `a` is rank deficient.
fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, bool) {
    if a.ncols() == 0 {
        return (DVector::zeros(0), false);
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let eps = smax * a.nrows().max(a.ncols()) as f64 * f64::EPSILON;
    let rank = svd.rank(eps);
    let x = svd.solve(b, eps).expect("both factors computed");
    (x, rank < a.ncols())
}

fn solve_on_support(lib: &DMatrix<f64>, y: &DVector<f64>, support: &[bool]) -> (DVector<f64>, bool) {
    let idx: Vec<usize> = (0..support.len()).filter(|&j| support[j]).collect();
    let sub = lib.select_columns(&idx);
    let (x, singular) = lstsq(&sub, y);
    let mut full = DVector::zeros(support.len());
    for (k, &j) in idx.iter().enumerate() {
        full[j] = x[k];
    }
    (full, singular)
}

/// Coefficients laid out `terms × components`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseFit {
    pub coefficients: DMatrix<f64>,
    /// Some least-squares subproblem was rank deficient.
    pub singular: bool,
    pub iterations: usize,
}

impl SparseFit {
    pub fn nonzeros(&self, component: usize) -> usize {
        self.coefficients
            .column(component)
            .iter()
            .filter(|v| **v != 0.0)
            .count()
    }
}

/// Sequentially thresholded least squares: zero every coefficient below
/// `threshold` in magnitude, refit the rest, repeat until the support settles.
pub fn stlsq(problem: &RegressionProblem, threshold: f64, max_iters: usize) -> Result<SparseFit> {
    if !(threshold >= 0.0) {
        return Err(Error::InvalidConfig("threshold must be >= 0".into()));
    }
    let n = problem.terms();
    let mut coefficients = DMatrix::zeros(n, problem.components());
    let mut singular = false;
    let mut iterations = 0;
    for k in 0..problem.components() {
        let y = problem.targets.column(k).into_owned();
        let mut support = vec![true; n];
        let (mut xi, s) = solve_on_support(&problem.library, &y, &support);
        singular |= s;
        for it in 1..=max_iters {
            iterations = iterations.max(it);
            let next: Vec<bool> = xi.iter().map(|v| v.abs() >= threshold).collect();
            if next == support {
                break;
            }
            support = next;
            let (x, s) = solve_on_support(&problem.library, &y, &support);
            singular |= s;
            xi = x;
        }
        for j in 0..n {
            coefficients[(j, k)] = if support[j] { xi[j] } else { 0.0 };
        }
    }
    Ok(SparseFit {
        coefficients,
        singular,
        iterations,
    })
}

/// One output component of a LASSO fit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LassoComponent {
    /// Shrunken coefficients in the original column units.
    pub coefficients: Vec<f64>,
    /// Least-squares refit on the selected support.
    pub debiased: Vec<f64>,
    /// Objective value after every iteration (scaled problem).
    pub objective: Vec<f64>,
    pub duality_gap: f64,
    pub converged: bool,
    pub singular: bool,
}

impl LassoComponent {
    pub fn nonzeros(&self) -> usize {
        self.coefficients.iter().filter(|v| **v != 0.0).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LassoConfig {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for LassoConfig {
    fn default() -> Self {
        Self {
            max_iters: 200_000,
            tol: 1e-10,
        }
    }
}

/// Gram form of the column-scaled problem for one component:
/// `min ½ ξᵀGξ − cᵀξ + ‖y‖²/(2N) + λ‖ξ‖₁`.
struct Scaled {
    gram: DMatrix<f64>,
    c: DVector<f64>,
    yy: f64,
    n_rows: f64,
    scale: Vec<f64>,
    lipschitz: f64,
}

impl Scaled {
    fn new(problem: &RegressionProblem, k: usize) -> Result<Self> {
        let lib = &problem.library;
        let n_rows = lib.nrows() as f64;
        let scale: Vec<f64> = lib.column_iter().map(|c| (c.norm_squared() / n_rows).sqrt()).collect();
        if let Some(j) = scale.iter().position(|s| *s == 0.0) {
            return Err(Error::InvalidConfig(format!(
                "library column `{}` is identically zero",
                problem.term_names[j]
            )));
        }
        let mut xs = lib.clone();
        for (j, s) in scale.iter().enumerate() {
            xs.column_mut(j).unscale_mut(*s);
        }
        let y = problem.targets.column(k);
        let gram = xs.tr_mul(&xs) / n_rows;
        let c = xs.tr_mul(&y) / n_rows;
        let lipschitz = gram.clone().symmetric_eigenvalues().max().max(f64::MIN_POSITIVE);
        Ok(Self {
            gram,
            c,
            yy: y.norm_squared(),
            n_rows,
            scale,
            lipschitz,
        })
    }

    fn lambda_max(&self) -> f64 {
        self.c.amax()
    }

    fn primal(&self, xi: &DVector<f64>, lambda: f64) -> f64 {
        0.5 * xi.dot(&(&self.gram * xi)) - self.c.dot(xi) + self.yy / (2.0 * self.n_rows) + lambda * xi.lp_norm(1)
    }

    fn gap(&self, xi: &DVector<f64>, lambda: f64) -> f64 {
        let gx = &self.gram * xi;
        let corr = (&self.c - &gx).amax();
        let s = if corr == 0.0 { 1.0 } else { (lambda / corr).min(1.0) };
        let n = self.n_rows;
        // ‖r‖² and yᵀr from the Gram form.
        let rr = self.yy - 2.0 * n * self.c.dot(xi) + n * xi.dot(&gx);
        let yr = self.yy - n * self.c.dot(xi);
        let dual = (2.0 * s * yr - s * s * rr) / (2.0 * n);
        self.primal(xi, lambda) - dual
    }
}

/// Smallest `λ` for which the LASSO solution of `component` is zero.
/// Columns are scaled to unit RMS, so `λ` is in those units.
pub fn lambda_max(problem: &RegressionProblem, component: usize) -> Result<f64> {
    Ok(Scaled::new(problem, component)?.lambda_max())
}

/// Proximal gradient on `(1/2N)‖y − Θ D⁻¹ ξ‖² + λ‖ξ‖₁` with `D` the column
/// RMS, then a least-squares refit on the support.
pub fn lasso_component(
    problem: &RegressionProblem,
    component: usize,
    lambda: f64,
    cfg: &LassoConfig,
) -> Result<LassoComponent> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidConfig("lambda must be >= 0".into()));
    }
    let sc = Scaled::new(problem, component)?;
    let n = problem.terms();
    let step = 1.0 / sc.lipschitz;
    let mut xi = DVector::zeros(n);
    let mut objective = Vec::new();
    let mut converged = false;
    for _ in 0..cfg.max_iters {
        let grad = &sc.gram * &xi - &sc.c;
        let mut next = &xi - grad * step;
        for v in next.iter_mut() {
            *v = v.signum() * (v.abs() - lambda * step).max(0.0);
        }
        let moved = (&next - &xi).amax();
        xi = next;
        objective.push(sc.primal(&xi, lambda));
        if moved <= cfg.tol * xi.amax().max(1.0) {
            converged = true;
            break;
        }
    }
    let duality_gap = sc.gap(&xi, lambda);
    let coefficients: Vec<f64> = xi.iter().zip(&sc.scale).map(|(v, s)| v / s).collect();
    let support: Vec<bool> = coefficients.iter().map(|v| *v != 0.0).collect();
    let y = problem.targets.column(component).into_owned();
    let (deb, singular) = solve_on_support(&problem.library, &y, &support);
    Ok(LassoComponent {
        coefficients,
        debiased: deb.iter().copied().collect(),
        objective,
        duality_gap,
        converged,
        singular,
    })
}

/// Every component with the same `λ`, solved concurrently.
pub fn lasso_debias(problem: &RegressionProblem, lambda: f64, cfg: &LassoConfig) -> Result<Vec<LassoComponent>> {
    (0..problem.components())
        .into_par_iter()
        .map(|k| lasso_component(problem, k, lambda, cfg))
        .collect()
}

/// Geometric bisection on `λ ∈ (0, λ_max]` for a fit with exactly `target`
/// nonzeros. Returns the closest fit found when no `λ` hits the target.
pub fn tune_lambda(
    problem: &RegressionProblem,
    component: usize,
    target: usize,
    cfg: &LassoConfig,
) -> Result<(f64, LassoComponent)> {
    let hi0 = lambda_max(problem, component)?;
    let (mut lo, mut hi) = (hi0 * 1e-8, hi0);
    let mut best: Option<(f64, LassoComponent)> = None;
    for _ in 0..60 {
        let mid = (lo * hi).sqrt();
        let fit = lasso_component(problem, component, mid, cfg)?;
        let nnz = fit.nonzeros();
        let closer = best
            .as_ref()
            .map_or(true, |(_, b)| nnz.abs_diff(target) < b.nonzeros().abs_diff(target));
        if closer {
            best = Some((mid, fit));
        }
        match nnz.cmp(&target) {
            std::cmp::Ordering::Greater => lo = mid,
            std::cmp::Ordering::Less => hi = mid,
            std::cmp::Ordering::Equal => break,
        }
    }
    Ok(best.expect("at least one bisection step"))
}

/// `term,<component names...>` then one row per library term.
pub fn coefficients_csv(term_names: &[String], components: &[String], coeffs: &DMatrix<f64>) -> String {
    let mut s = String::from("term");
    for c in components {
        write!(s, ",{c}").unwrap();
    }
    s.push('\n');
    for (j, name) in term_names.iter().enumerate() {
        s.push_str(name);
        for k in 0..coeffs.ncols() {
            write!(s, ",{:.16e}", coeffs[(j, k)]).unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn write_coefficients(path: &Path, problem: &RegressionProblem, coeffs: &DMatrix<f64>) -> Result<()> {
    let comps: Vec<String> = (1..=problem.components()).map(|k| format!("dx{k}/dt")).collect();
    std::fs::write(path, coefficients_csv(&problem.term_names, &comps, coeffs))?;
    Ok(())
}

/// Collects per-component LASSO results into a `terms × components` matrix.
pub fn lasso_matrix(fits: &[LassoComponent], debiased: bool) -> DMatrix<f64> {
    let n = fits.first().map_or(0, |f| f.coefficients.len());
    DMatrix::from_fn(n, fits.len(), |j, k| {
        if debiased {
            fits[k].debiased[j]
        } else {
            fits[k].coefficients[j]
        }
    })
}
