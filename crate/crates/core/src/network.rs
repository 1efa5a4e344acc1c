//! Two-layer perceptron `F(z) = A2 σ(A1 z + b1) + b2` with analytic
//! input Jacobians and parameter vector-Jacobian products.
//!
//! Parameters flatten as `vec(A1), vec(A2), b1, b2`, matrices row-major.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    /// Standard ELU: `x` for `x >= 0`, `e^x - 1` otherwise.
    #[default]
    Elu,
    /// ELU with the branches swapped: `e^x - 1` for `x >= 0`, `x` otherwise.
    SwappedElu,
}

impl Activation {
    /// Returns `(σ(x), σ'(x))`.
    #[inline]
    pub fn eval(self, x: f64) -> (f64, f64) {
        match self {
            Activation::Tanh => {
                let s = x.tanh();
                (s, 1.0 - s * s)
            }
            Activation::Elu => {
                if x >= 0.0 {
                    (x, 1.0)
                } else {
                    let e = x.exp();
                    (e - 1.0, e)
                }
            }
            Activation::SwappedElu => {
                if x >= 0.0 {
                    let e = x.exp();
                    (e - 1.0, e)
                } else {
                    (x, 1.0)
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Elu => "elu",
            Activation::SwappedElu => "swapped_elu",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "elu" => Ok(Activation::Elu),
            "swapped_elu" => Ok(Activation::SwappedElu),
            other => Err(Error::InvalidConfig(format!("unknown activation `{other}`"))),
        }
    }
}

/// Number of scalars in an `n -> h -> o` perceptron.
pub fn param_count(n: usize, h: usize, o: usize) -> usize {
    h * n + h + o * h + o
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMlp")]
pub struct MlpParams {
    pub inputs: usize,
    pub hidden: usize,
    pub outputs: usize,
    pub activation: Activation,
    /// `hidden x inputs`, row-major.
    pub a1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `outputs x hidden`, row-major.
    pub a2: Vec<f64>,
    pub b2: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMlp {
    inputs: usize,
    hidden: usize,
    outputs: usize,
    activation: Activation,
    a1: Vec<f64>,
    b1: Vec<f64>,
    a2: Vec<f64>,
    b2: Vec<f64>,
}

impl TryFrom<RawMlp> for MlpParams {
    type Error = Error;
    fn try_from(r: RawMlp) -> Result<Self> {
        let p = MlpParams {
            inputs: r.inputs,
            hidden: r.hidden,
            outputs: r.outputs,
            activation: r.activation,
            a1: r.a1,
            b1: r.b1,
            a2: r.a2,
            b2: r.b2,
        };
        p.validate()?;
        Ok(p)
    }
}

/// Reusable buffers for forward/backward passes.
#[derive(Debug, Clone)]
pub struct MlpScratch {
    act: Vec<f64>,
    dact: Vec<f64>,
    delta: Vec<f64>,
}

impl MlpScratch {
    pub fn new(p: &MlpParams) -> Self {
        Self {
            act: vec![0.0; p.hidden],
            dact: vec![0.0; p.hidden],
            delta: vec![0.0; p.hidden],
        }
    }
}

impl MlpParams {
    /// Uniform fan-in initialization, zero biases, deterministic in `seed`.
    pub fn init(n: usize, h: usize, o: usize, activation: Activation, seed: u64) -> Result<Self> {
        if n == 0 || h == 0 || o == 0 {
            return Err(Error::InvalidConfig(format!(
                "perceptron dimensions must be positive, got ({n}, {h}, {o})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r1 = (1.0 / n as f64).sqrt();
        let r2 = (1.0 / h as f64).sqrt();
        let a1 = (0..h * n).map(|_| rng.random_range(-r1..=r1)).collect();
        let a2 = (0..o * h).map(|_| rng.random_range(-r2..=r2)).collect();
        Ok(Self {
            inputs: n,
            hidden: h,
            outputs: o,
            activation,
            a1,
            b1: vec![0.0; h],
            a2,
            b2: vec![0.0; o],
        })
    }

    /// All-zero parameters; the network is then identically zero.
    pub fn zeros(n: usize, h: usize, o: usize, activation: Activation) -> Self {
        Self {
            inputs: n,
            hidden: h,
            outputs: o,
            activation,
            a1: vec![0.0; h * n],
            b1: vec![0.0; h],
            a2: vec![0.0; o * h],
            b2: vec![0.0; o],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (n, h, o) = (self.inputs, self.hidden, self.outputs);
        if n == 0 || h == 0 || o == 0 {
            return Err(Error::InvalidConfig("perceptron dimensions must be positive".into()));
        }
        check_len("A1", h * n, self.a1.len())?;
        check_len("b1", h, self.b1.len())?;
        check_len("A2", o * h, self.a2.len())?;
        check_len("b2", o, self.b2.len())?;
        if !self.flat().iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidConfig("perceptron has non-finite parameters".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        param_count(self.inputs, self.hidden, self.outputs)
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        v.extend_from_slice(&self.a1);
        v.extend_from_slice(&self.a2);
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(&self.b2);
        v
    }

    pub fn set_flat(&mut self, theta: &[f64]) -> Result<()> {
        check_len("perceptron parameters", self.param_count(), theta.len())?;
        let (n, h, o) = (self.inputs, self.hidden, self.outputs);
        let (a1, rest) = theta.split_at(h * n);
        let (a2, rest) = rest.split_at(o * h);
        let (b1, b2) = rest.split_at(h);
        self.a1.copy_from_slice(a1);
        self.a2.copy_from_slice(a2);
        self.b1.copy_from_slice(b1);
        self.b2.copy_from_slice(b2);
        Ok(())
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let a2 = self.hidden * self.inputs;
        let b1 = a2 + self.outputs * self.hidden;
        let b2 = b1 + self.hidden;
        (a2, b1, b2)
    }

    /// Forward pass; leaves activations and their derivatives in `s`.
    pub(crate) fn forward_into(&self, z: &[f64], s: &mut MlpScratch, out: &mut [f64]) {
        let n = self.inputs;
        for k in 0..self.hidden {
            let row = &self.a1[k * n..(k + 1) * n];
            let mut acc = self.b1[k];
            for (w, x) in row.iter().zip(z) {
                acc += w * x;
            }
            let (a, da) = self.activation.eval(acc);
            s.act[k] = a;
            s.dact[k] = da;
        }
        let h = self.hidden;
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.a2[i * h..(i + 1) * h];
            let mut acc = self.b2[i];
            for (w, a) in row.iter().zip(&s.act) {
                acc += w * a;
            }
            *o = acc;
        }
    }

    /// Reverse pass after `forward_into` at the same `z`. Accumulates
    /// `wᵀ ∂F/∂z` into `z_bar` and `wᵀ ∂F/∂θ` into `theta_bar` (flat layout).
    pub(crate) fn backward_into(
        &self,
        z: &[f64],
        s: &mut MlpScratch,
        w: &[f64],
        z_bar: Option<&mut [f64]>,
        theta_bar: Option<&mut [f64]>,
    ) {
        let (n, h) = (self.inputs, self.hidden);
        for k in 0..h {
            let mut acc = 0.0;
            for (i, wi) in w.iter().enumerate() {
                acc += self.a2[i * h + k] * wi;
            }
            s.delta[k] = acc * s.dact[k];
        }
        if let Some(zb) = z_bar {
            for k in 0..h {
                let d = s.delta[k];
                if d == 0.0 {
                    continue;
                }
                let row = &self.a1[k * n..(k + 1) * n];
                for (acc, a) in zb.iter_mut().zip(row) {
                    *acc += d * a;
                }
            }
        }
        if let Some(tb) = theta_bar {
            let (oa2, ob1, ob2) = self.offsets();
            for k in 0..h {
                let d = s.delta[k];
                if d != 0.0 {
                    let row = &mut tb[k * n..(k + 1) * n];
                    for (acc, x) in row.iter_mut().zip(z) {
                        *acc += d * x;
                    }
                }
                tb[ob1 + k] += d;
            }
            for (i, wi) in w.iter().enumerate() {
                let row = &mut tb[oa2 + i * h..oa2 + (i + 1) * h];
                for (acc, a) in row.iter_mut().zip(&s.act) {
                    *acc += wi * a;
                }
                tb[ob2 + i] += wi;
            }
        }
    }

    /// `∂F/∂z · v` after `forward_into` at the same `z`.
    pub(crate) fn jvp_into(&self, s: &mut MlpScratch, v: &[f64], out: &mut [f64]) {
        let (n, h) = (self.inputs, self.hidden);
        for k in 0..h {
            let row = &self.a1[k * n..(k + 1) * n];
            let mut acc = 0.0;
            for (a, x) in row.iter().zip(v) {
                acc += a * x;
            }
            s.delta[k] = acc * s.dact[k];
        }
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.a2[i * h..(i + 1) * h];
            *o = row.iter().zip(&s.delta).map(|(a, d)| a * d).sum();
        }
    }

    pub fn forward(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_len("perceptron input", self.inputs, z.len())?;
        let mut s = MlpScratch::new(self);
        let mut out = vec![0.0; self.outputs];
        self.forward_into(z, &mut s, &mut out);
        Ok(out)
    }

    /// `∂F/∂z = A2 diag(σ'(A1 z + b1)) A1`, shape `outputs x inputs`.
    pub fn jacobian_input(&self, z: &[f64]) -> Result<DMatrix<f64>> {
        check_len("perceptron input", self.inputs, z.len())?;
        let mut s = MlpScratch::new(self);
        let mut out = vec![0.0; self.outputs];
        self.forward_into(z, &mut s, &mut out);
        let a1 = DMatrix::from_row_slice(self.hidden, self.inputs, &self.a1);
        let a2 = DMatrix::from_row_slice(self.outputs, self.hidden, &self.a2);
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&s.dact));
        Ok(a2 * d * a1)
    }

    /// Gradient of `wᵀ F(z, θ)` with respect to θ, in flat layout.
    pub fn vjp_params(&self, z: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        check_len("perceptron input", self.inputs, z.len())?;
        check_len("perceptron cotangent", self.outputs, w.len())?;
        let mut s = MlpScratch::new(self);
        let mut out = vec![0.0; self.outputs];
        self.forward_into(z, &mut s, &mut out);
        let mut g = vec![0.0; self.param_count()];
        self.backward_into(z, &mut s, w, None, Some(&mut g));
        Ok(g)
    }

    pub fn l1_norm(&self) -> f64 {
        self.a1
            .iter()
            .chain(&self.a2)
            .chain(&self.b1)
            .chain(&self.b2)
            .map(|v| v.abs())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_param_counts() {
        assert_eq!(param_count(9, 20, 3), 263);
        assert_eq!(param_count(3, 38, 3), 269);
        assert_eq!(param_count(3, 100, 3), 703);
        assert_eq!(param_count(4, 46, 3), 371);
        assert_eq!(param_count(69, 4, 3), 295);
        assert_eq!(param_count(69, 5, 3), 368);
    }

    #[test]
    fn init_shapes_and_determinism() {
        let p = MlpParams::init(9, 20, 3, Activation::Tanh, 0).unwrap();
        assert_eq!((p.a1.len(), p.b1.len(), p.a2.len(), p.b2.len()), (180, 20, 60, 3));
        assert_eq!(p.flat().len(), 263);
        let q = MlpParams::init(9, 20, 3, Activation::Tanh, 0).unwrap();
        assert!(p.flat().iter().zip(q.flat()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let r = (1.0f64 / 9.0).sqrt();
        assert!(p.a1.iter().all(|v| v.abs() <= r));

        let tiny = MlpParams::init(1, 1, 1, Activation::Elu, 7).unwrap();
        assert_eq!(tiny.param_count(), 4);
        assert_eq!(tiny.b1, vec![0.0]);
        assert_eq!(tiny.b2, vec![0.0]);
    }

    #[test]
    fn activations_at_known_points() {
        for a in [Activation::Tanh, Activation::Elu, Activation::SwappedElu] {
            assert_eq!(a.eval(0.0).0, 0.0);
            assert_eq!(a.eval(0.0).1, 1.0);
        }
        let ln2 = std::f64::consts::LN_2;
        assert!((Activation::Elu.eval(-ln2).0 + 0.5).abs() < 1e-15);
        assert!((Activation::SwappedElu.eval(ln2).0 - 1.0).abs() < 1e-15);
        for x in [-1.3f64, -0.2, 0.4, 2.0] {
            let h = 1e-6;
            let fd = ((x + h).tanh() - (x - h).tanh()) / (2.0 * h);
            let (_, d) = Activation::Tanh.eval(x);
            assert!((fd - d).abs() / d.abs() < 1e-8);
        }
    }

    #[test]
    fn constant_output_from_bias() {
        let mut p = MlpParams::zeros(3, 4, 2, Activation::Tanh);
        p.b2 = vec![1.5, -2.0];
        assert_eq!(p.forward(&[0.3, 0.1, 9.0]).unwrap(), vec![1.5, -2.0]);
    }

    #[test]
    fn scalar_chain_rule() {
        let p = MlpParams {
            inputs: 1,
            hidden: 1,
            outputs: 1,
            activation: Activation::Tanh,
            a1: vec![0.7],
            b1: vec![-0.2],
            a2: vec![1.3],
            b2: vec![0.1],
        };
        let z = 0.4;
        let pre: f64 = 0.7 * z - 0.2;
        let expect = 1.3 * (1.0 - pre.tanh().powi(2)) * 0.7;
        let j = p.jacobian_input(&[z]).unwrap();
        assert!((j[(0, 0)] - expect).abs() < 1e-15);
    }

    #[test]
    fn shape_errors() {
        let p = MlpParams::init(3, 4, 2, Activation::Elu, 1).unwrap();
        assert!(p.forward(&[1.0]).is_err());
        assert!(p.vjp_params(&[1.0, 2.0, 3.0], &[1.0]).is_err());
        let mut bad = p.clone();
        bad.b1.pop();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_cotangent_gives_zero_gradient() {
        let p = MlpParams::init(3, 4, 2, Activation::Elu, 1).unwrap();
        let g = p.vjp_params(&[0.1, 0.2, 0.3], &[0.0, 0.0]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        let g = p.vjp_params(&[0.1, 0.2, 0.3], &[0.25, -4.0]).unwrap();
        let b2 = &g[g.len() - 2..];
        assert_eq!(b2, &[0.25, -4.0]);
    }

    #[test]
    fn flat_round_trip() {
        let p = MlpParams::init(5, 3, 2, Activation::Tanh, 4).unwrap();
        let mut q = MlpParams::zeros(5, 3, 2, Activation::Tanh);
        q.set_flat(&p.flat()).unwrap();
        assert_eq!(p, q);
        let json = serde_json::to_string(&p).unwrap();
        let back: MlpParams = serde_json::from_str(&json).unwrap();
        assert_eq!(p, back);
    }
}
