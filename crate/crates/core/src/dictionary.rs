//! Normalized monomial feature maps.
//!
//! A state `x` is first sent through the uniform affine map
//! `N(x) = 2 (x - m) / (M - m) - 1`, using a single `(m, M)` pair fitted over
//! every component of every sample, and then expanded into all monomials of
//! total degree `1..=p` in the normalized components (and optionally a
//! rescaled time variable). There is no constant term: the first layer of the
//! network carries its own bias.
//!
//! Terms are stored explicitly, in graded lexicographic order with the time
//! variable first, so a serialized spec reproduces its features exactly.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Global bounds used by the uniform normalization layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBounds")]
pub struct NormalizationBounds {
    pub min: f64,
    pub max: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBounds {
    min: f64,
    max: f64,
}

impl TryFrom<RawBounds> for NormalizationBounds {
    type Error = Error;
    fn try_from(raw: RawBounds) -> Result<Self> {
        NormalizationBounds::new(raw.min, raw.max)
    }
}

impl NormalizationBounds {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "normalization bounds must be finite, got [{min}, {max}]"
            )));
        }
        if max <= min {
            return Err(Error::DegenerateData(min));
        }
        Ok(Self { min, max })
    }

    /// Scans every value and returns the global minimum and maximum.
    pub fn fit<I>(values: I) -> Result<Self>
    where
        I: IntoIterator<Item = f64>,
    {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut seen = false;
        for v in values {
            seen = true;
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !seen {
            return Err(Error::InvalidConfig("cannot fit bounds on empty data".into()));
        }
        Self::new(lo, hi)
    }

    /// `dN/dx`, identical for every component.
    #[inline]
    pub fn slope(&self) -> f64 {
        2.0 / (self.max - self.min)
    }

    #[inline]
    pub fn normalize_value(&self, v: f64) -> f64 {
        2.0 * (v - self.min) / (self.max - self.min) - 1.0
    }

    /// Applies `N` componentwise. Values outside `[min, max]` extrapolate linearly.
    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|&v| self.normalize_value(v)).collect()
    }

    pub fn denormalize_value(&self, z: f64) -> f64 {
        (z + 1.0) * 0.5 * (self.max - self.min) + self.min
    }
}

/// Affine map of the time axis from `[start, end]` onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeScale {
    pub start: f64,
    pub end: f64,
}

impl TimeScale {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(end > start) || !start.is_finite() || !end.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "time scale needs end > start, got [{start}, {end}]"
            )));
        }
        Ok(Self { start, end })
    }

    #[inline]
    pub fn apply(&self, t: f64) -> f64 {
        (t - self.start) / (self.end - self.start)
    }

    #[inline]
    pub fn slope(&self) -> f64 {
        1.0 / (self.end - self.start)
    }
}

/// Exponent multi-indices defining a monomial dictionary.
///
/// Each term has `dim + include_time` exponents; when time is included its
/// exponent comes first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec", into = "RawSpec")]
pub struct DictionarySpec {
    dim: usize,
    degree: u32,
    include_time: bool,
    terms: Vec<Vec<u32>>,
    // Nonzero (variable, exponent) pairs per term; derived from `terms`.
    factors: Vec<Vec<(usize, u32)>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    dim: usize,
    degree: u32,
    include_time: bool,
    terms: Vec<Vec<u32>>,
}

impl From<DictionarySpec> for RawSpec {
    fn from(s: DictionarySpec) -> Self {
        RawSpec {
            dim: s.dim,
            degree: s.degree,
            include_time: s.include_time,
            terms: s.terms,
        }
    }
}

impl TryFrom<RawSpec> for DictionarySpec {
    type Error = Error;
    fn try_from(raw: RawSpec) -> Result<Self> {
        DictionarySpec::from_terms(raw.dim, raw.degree, raw.include_time, raw.terms)
    }
}

/// `C(n, k)` without overflow for the sizes used here.
pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc as usize
}

/// Number of non-constant monomials of total degree at most `degree` in
/// `dim` state variables (plus time when `include_time`).
pub fn term_count(dim: usize, degree: u32, include_time: bool) -> usize {
    let vars = dim + usize::from(include_time);
    binomial(vars + degree as usize, degree as usize) - 1
}

impl DictionarySpec {
    /// Builds the canonical graded-lex dictionary.
    pub fn new(dim: usize, degree: u32, include_time: bool) -> Result<Self> {
        if dim == 0 || degree == 0 {
            return Err(Error::InvalidConfig(format!(
                "dictionary needs dim >= 1 and degree >= 1 (got dim {dim}, degree {degree})"
            )));
        }
        let vars = dim + usize::from(include_time);
        let mut terms = Vec::with_capacity(term_count(dim, degree, include_time));
        for deg in 1..=degree as usize {
            // Non-decreasing variable index sequences enumerate the degree-`deg`
            // monomials in descending lexicographic order of their exponents.
            let mut idx = vec![0usize; deg];
            loop {
                let mut e = vec![0u32; vars];
                for &i in &idx {
                    e[i] += 1;
                }
                terms.push(e);
                let mut pos = deg;
                while pos > 0 && idx[pos - 1] == vars - 1 {
                    pos -= 1;
                }
                if pos == 0 {
                    break;
                }
                idx[pos - 1] += 1;
                let v = idx[pos - 1];
                for slot in idx.iter_mut().skip(pos) {
                    *slot = v;
                }
            }
        }
        Self::from_terms(dim, degree, include_time, terms)
    }

    /// Builds a spec from an explicit term list, validating every exponent vector.
    pub fn from_terms(dim: usize, degree: u32, include_time: bool, terms: Vec<Vec<u32>>) -> Result<Self> {
        let vars = dim + usize::from(include_time);
        if dim == 0 || degree == 0 || terms.is_empty() {
            return Err(Error::InvalidConfig("empty dictionary".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for t in &terms {
            if t.len() != vars {
                return Err(Error::InvalidConfig(format!(
                    "term {t:?} has {} exponents, expected {vars}",
                    t.len()
                )));
            }
            let total: u32 = t.iter().sum();
            if total == 0 || total > degree {
                return Err(Error::InvalidConfig(format!(
                    "term {t:?} has total degree {total}, expected 1..={degree}"
                )));
            }
            if !seen.insert(t.clone()) {
                return Err(Error::InvalidConfig(format!("duplicate term {t:?}")));
            }
        }
        let factors = terms
            .iter()
            .map(|t| {
                t.iter()
                    .enumerate()
                    .filter(|(_, &e)| e > 0)
                    .map(|(i, &e)| (i, e))
                    .collect()
            })
            .collect();
        Ok(Self {
            dim,
            degree,
            include_time,
            terms,
            factors,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn degree(&self) -> u32 {
        self.degree
    }

    pub fn include_time(&self) -> bool {
        self.include_time
    }

    pub fn terms(&self) -> &[Vec<u32>] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Number of variables the monomials range over (`dim`, plus one for time).
    pub fn vars(&self) -> usize {
        self.dim + usize::from(self.include_time)
    }

    fn pack_vars(&self, t: Option<f64>, z: &[f64]) -> Result<Vec<f64>> {
        check_len("dictionary input", self.dim, z.len())?;
        let mut vars = Vec::with_capacity(self.vars());
        match (self.include_time, t) {
            (true, Some(t)) => vars.push(t),
            (false, None) => {}
            (true, None) => {
                return Err(Error::InvalidConfig(
                    "dictionary includes time but no time was supplied".into(),
                ))
            }
            (false, Some(_)) => {
                return Err(Error::InvalidConfig(
                    "dictionary has no time variable but a time was supplied".into(),
                ))
            }
        }
        vars.extend_from_slice(z);
        Ok(vars)
    }

    /// Evaluates every monomial at normalized state `z` (and time `t`).
    pub fn eval(&self, t: Option<f64>, z: &[f64]) -> Result<Vec<f64>> {
        let vars = self.pack_vars(t, z)?;
        let mut out = vec![0.0; self.len()];
        self.eval_vars(&vars, &mut out);
        Ok(out)
    }

    /// Jacobian of the features: `dz` is `len() x dim` row-major, `dt` is the
    /// column for the time variable when present.
    pub fn jacobian(&self, t: Option<f64>, z: &[f64]) -> Result<DictionaryJacobian> {
        let vars = self.pack_vars(t, z)?;
        let nv = self.vars();
        let offset = usize::from(self.include_time);
        let mut dz = vec![0.0; self.len() * self.dim];
        let mut dt = self.include_time.then(|| vec![0.0; self.len()]);
        let mut dir = vec![0.0; nv];
        let mut col = vec![0.0; self.len()];
        for v in 0..nv {
            dir.iter_mut().for_each(|d| *d = 0.0);
            dir[v] = 1.0;
            self.jvp_vars(&vars, &dir, &mut col);
            if v < offset {
                if let Some(dt) = dt.as_mut() {
                    dt.copy_from_slice(&col);
                }
            } else {
                for (j, c) in col.iter().enumerate() {
                    dz[j * self.dim + (v - offset)] = *c;
                }
            }
        }
        Ok(DictionaryJacobian {
            rows: self.len(),
            cols: self.dim,
            dz,
            dt,
        })
    }

    /// Feature evaluation on the packed variable vector `[t?, z..]`.
    pub(crate) fn eval_vars(&self, vars: &[f64], out: &mut [f64]) {
        for (o, fac) in out.iter_mut().zip(&self.factors) {
            let mut p = 1.0;
            for &(i, e) in fac {
                p *= powi(vars[i], e);
            }
            *o = p;
        }
    }

    /// Directional derivative of the features along `dir` (packed variables).
    pub(crate) fn jvp_vars(&self, vars: &[f64], dir: &[f64], out: &mut [f64]) {
        for (o, fac) in out.iter_mut().zip(&self.factors) {
            let mut acc = 0.0;
            for (a, &(i, e)) in fac.iter().enumerate() {
                if dir[i] == 0.0 {
                    continue;
                }
                let mut p = e as f64 * powi(vars[i], e - 1) * dir[i];
                for (b, &(r, er)) in fac.iter().enumerate() {
                    if a != b {
                        p *= powi(vars[r], er);
                    }
                }
                acc += p;
            }
            *o = acc;
        }
    }

    /// Accumulates `cotᵀ dD/dvars` into `out` (packed variables).
    pub(crate) fn vjp_vars(&self, vars: &[f64], cot: &[f64], out: &mut [f64]) {
        for (&c, fac) in cot.iter().zip(&self.factors) {
            if c == 0.0 {
                continue;
            }
            for (a, &(i, e)) in fac.iter().enumerate() {
                let mut p = e as f64 * powi(vars[i], e - 1);
                for (b, &(r, er)) in fac.iter().enumerate() {
                    if a != b {
                        p *= powi(vars[r], er);
                    }
                }
                out[i] += c * p;
            }
        }
    }

    /// Human-readable name of term `j`, e.g. `t x1^2 x3`.
    pub fn term_name(&self, j: usize, names: &[String]) -> String {
        let mut parts = Vec::new();
        for &(i, e) in &self.factors[j] {
            if e == 1 {
                parts.push(names[i].clone());
            } else {
                parts.push(format!("{}^{}", names[i], e));
            }
        }
        parts.join(" ")
    }

    /// Default variable names: `t` (if present) then `x1..xd`.
    pub fn default_var_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.vars());
        if self.include_time {
            names.push("t".to_string());
        }
        names.extend((1..=self.dim).map(|i| format!("x{i}")));
        names
    }
}

#[inline]
fn powi(x: f64, e: u32) -> f64 {
    match e {
        0 => 1.0,
        1 => x,
        2 => x * x,
        3 => x * x * x,
        _ => x.powi(e as i32),
    }
}

/// Dense Jacobian of a dictionary evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct DictionaryJacobian {
    pub rows: usize,
    pub cols: usize,
    /// `rows x cols`, row-major.
    pub dz: Vec<f64>,
    pub dt: Option<Vec<f64>>,
}

impl DictionaryJacobian {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.dz[row * self.cols + col]
    }
}

/// Normalization and dictionary bundled: `z -> D(N(x), tau(t))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureMap {
    pub dictionary: DictionarySpec,
    pub bounds: NormalizationBounds,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_scale: Option<TimeScale>,
}

impl FeatureMap {
    pub fn new(dictionary: DictionarySpec, bounds: NormalizationBounds, time_scale: Option<TimeScale>) -> Result<Self> {
        if dictionary.include_time() != time_scale.is_some() {
            return Err(Error::InvalidConfig(
                "a time scale is required exactly when the dictionary includes time".into(),
            ));
        }
        Ok(Self {
            dictionary,
            bounds,
            time_scale,
        })
    }

    pub fn len(&self) -> usize {
        self.dictionary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dictionary.is_empty()
    }

    /// Writes the packed normalized variables for `(t, x)` into `vars`.
    pub(crate) fn pack(&self, t: f64, x: &[f64], vars: &mut [f64]) {
        let off = match self.time_scale {
            Some(ts) => {
                vars[0] = ts.apply(t);
                1
            }
            None => 0,
        };
        for (v, &xi) in vars[off..].iter_mut().zip(x) {
            *v = self.bounds.normalize_value(xi);
        }
    }

    /// Features of the raw state `x` at time `t`.
    pub fn features(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        check_len("feature map input", self.dictionary.dim(), x.len())?;
        let mut vars = vec![0.0; self.dictionary.vars()];
        self.pack(t, x, &mut vars);
        let mut out = vec![0.0; self.len()];
        self.dictionary.eval_vars(&vars, &mut out);
        Ok(out)
    }
}
