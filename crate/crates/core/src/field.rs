//! The learned vector field `g(t, x) = [A0 x +] F(D(N(x), τ(t)), θ)`.

use serde::{Deserialize, Serialize};

use crate::dictionary::{DictionarySpec, FeatureMap, NormalizationBounds, TimeScale};
use crate::error::{check_len, Error, Result};
use crate::gradient::Differentiable;
use crate::network::{Activation, MlpParams, MlpScratch};
use crate::odeint::Dynamics;

/// Trainable square matrix added in front of the network (`A0 x`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearPart {
    pub dim: usize,
    /// `dim x dim`, row-major.
    pub matrix: Vec<f64>,
}

impl LinearPart {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            matrix: vec![0.0; dim * dim],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VectorField {
    pub features: FeatureMap,
    /// `None` disables the network term entirely.
    #[serde(default)]
    pub mlp: Option<MlpParams>,
    #[serde(default)]
    pub linear: Option<LinearPart>,
}

impl VectorField {
    pub fn new(features: FeatureMap, mlp: Option<MlpParams>, linear: Option<LinearPart>) -> Result<Self> {
        let f = Self { features, mlp, linear };
        f.validate()?;
        Ok(f)
    }

    /// Dictionary plus a freshly initialized perceptron with `hidden` units.
    pub fn with_network(
        dictionary: DictionarySpec,
        bounds: NormalizationBounds,
        time_scale: Option<TimeScale>,
        hidden: usize,
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        let dim = dictionary.dim();
        let n = dictionary.len();
        let features = FeatureMap::new(dictionary, bounds, time_scale)?;
        let mlp = MlpParams::init(n, hidden, dim, activation, seed)?;
        Self::new(features, Some(mlp), None)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.features.dictionary.dim();
        if let Some(m) = &self.mlp {
            m.validate()?;
            check_len("network inputs", self.features.len(), m.inputs)?;
            check_len("network outputs", d, m.outputs)?;
        }
        if let Some(l) = &self.linear {
            check_len("linear part dimension", d, l.dim)?;
            check_len("linear part entries", d * d, l.matrix.len())?;
        }
        if self.mlp.is_none() && self.linear.is_none() {
            return Err(Error::InvalidConfig(
                "vector field needs a network, a linear part, or both".into(),
            ));
        }
        Ok(())
    }

    fn mlp_len(&self) -> usize {
        self.mlp.as_ref().map_or(0, |m| m.param_count())
    }

    /// Network evaluation and reverse pass at `(t, x)`; shared by vjp/jvp.
    fn with_network_pass<R>(
        &self,
        t: f64,
        x: &[f64],
        f: impl FnOnce(&MlpParams, &[f64], &[f64], &mut MlpScratch) -> R,
    ) -> Option<R> {
        let mlp = self.mlp.as_ref()?;
        let dict = &self.features.dictionary;
        let mut vars = vec![0.0; dict.vars()];
        self.features.pack(t, x, &mut vars);
        let mut feats = vec![0.0; dict.len()];
        dict.eval_vars(&vars, &mut feats);
        let mut scratch = MlpScratch::new(mlp);
        let mut out = vec![0.0; mlp.outputs];
        mlp.forward_into(&feats, &mut scratch, &mut out);
        Some(f(mlp, &vars, &feats, &mut scratch))
    }
}

impl Dynamics for VectorField {
    fn dim(&self) -> usize {
        self.features.dictionary.dim()
    }

    fn rhs(&self, t: f64, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        if let Some(l) = &self.linear {
            let d = l.dim;
            for (i, o) in out.iter_mut().enumerate() {
                *o = l.matrix[i * d..(i + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum();
            }
        }
        if let Some(mlp) = &self.mlp {
            let dict = &self.features.dictionary;
            let mut vars = vec![0.0; dict.vars()];
            self.features.pack(t, x, &mut vars);
            let mut feats = vec![0.0; dict.len()];
            dict.eval_vars(&vars, &mut feats);
            let mut scratch = MlpScratch::new(mlp);
            let mut net = vec![0.0; mlp.outputs];
            mlp.forward_into(&feats, &mut scratch, &mut net);
            for (o, v) in out.iter_mut().zip(net) {
                *o += v;
            }
        }
    }
}

impl Differentiable for VectorField {
    fn param_count(&self) -> usize {
        self.mlp_len() + self.linear.as_ref().map_or(0, |l| l.matrix.len())
    }

    fn params(&self) -> Vec<f64> {
        let mut p = self.mlp.as_ref().map(|m| m.flat()).unwrap_or_default();
        if let Some(l) = &self.linear {
            p.extend_from_slice(&l.matrix);
        }
        p
    }

    fn set_params(&mut self, theta: &[f64]) -> Result<()> {
        check_len("vector field parameters", self.param_count(), theta.len())?;
        let k = self.mlp_len();
        if let Some(m) = self.mlp.as_mut() {
            m.set_flat(&theta[..k])?;
        }
        if let Some(l) = self.linear.as_mut() {
            l.matrix.copy_from_slice(&theta[k..]);
        }
        Ok(())
    }

    fn vjp(&self, t: f64, x: &[f64], w: &[f64], x_bar: &mut [f64], theta_bar: &mut [f64]) {
        let k = self.mlp_len();
        if let Some(l) = &self.linear {
            let d = l.dim;
            for i in 0..d {
                for j in 0..d {
                    x_bar[j] += l.matrix[i * d + j] * w[i];
                    theta_bar[k + i * d + j] += w[i] * x[j];
                }
            }
        }
        let slope = self.features.bounds.slope();
        let off = usize::from(self.features.time_scale.is_some());
        self.with_network_pass(t, x, |mlp, vars, feats, scratch| {
            let dict = &self.features.dictionary;
            let mut feats_bar = vec![0.0; dict.len()];
            mlp.backward_into(feats, scratch, w, Some(&mut feats_bar), Some(&mut theta_bar[..k]));
            let mut vars_bar = vec![0.0; dict.vars()];
            dict.vjp_vars(vars, &feats_bar, &mut vars_bar);
            for (xb, vb) in x_bar.iter_mut().zip(&vars_bar[off..]) {
                *xb += vb * slope;
            }
        });
    }

    fn jvp_time(&self, t: f64, x: &[f64], v: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        if let Some(l) = &self.linear {
            let d = l.dim;
            for (i, o) in out.iter_mut().enumerate() {
                *o = l.matrix[i * d..(i + 1) * d].iter().zip(v).map(|(a, b)| a * b).sum();
            }
        }
        let slope = self.features.bounds.slope();
        let ts = self.features.time_scale;
        self.with_network_pass(t, x, |mlp, vars, _feats, scratch| {
            let dict = &self.features.dictionary;
            let mut dir = Vec::with_capacity(dict.vars());
            if let Some(ts) = ts {
                dir.push(ts.slope());
            }
            dir.extend(v.iter().map(|vi| vi * slope));
            let mut dfeat = vec![0.0; dict.len()];
            dict.jvp_vars(vars, &dir, &mut dfeat);
            let mut net = vec![0.0; mlp.outputs];
            mlp.jvp_into(scratch, &dfeat, &mut net);
            for (o, n) in out.iter_mut().zip(net) {
                *o += n;
            }
        });
    }
}
