//! Adam on randomly sampled temporal windows.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::VectorField;
use crate::gradient::{evaluate, Differentiable, Engine, LossSpec};
use crate::odeint::{integrate, SolverConfig, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub l1_weight: f64,
    pub smooth_weight: f64,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    /// Intervals per window; each window holds `window_length + 1` stamps.
    pub window_length: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub engine: Engine,
    /// Backward RK4 steps per interval for the adjoint engine.
    pub adjoint_substeps: usize,
    pub solver: SolverConfig,
    /// Allow windows in one minibatch to share stamps.
    pub overlap: bool,
    /// Full-data loss is recorded every this many iterations (0 disables).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            l1_weight: 1e-4,
            smooth_weight: 1e-5,
            learning_rate: 1e-2,
            adam: AdamConfig::default(),
            window_length: 5,
            batch_size: 16,
            iterations: 1000,
            seed: 0,
            engine: Engine::Bptt,
            adjoint_substeps: 10,
            solver: SolverConfig::default(),
            overlap: true,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn loss_spec(&self) -> LossSpec {
        LossSpec {
            l1_weight: self.l1_weight,
            smooth_weight: self.smooth_weight,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_spec().validate()?;
        self.solver.validate()?;
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.window_length == 0 {
            return bad("window_length must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if self.engine == Engine::Adjoint && self.adjoint_substeps == 0 {
            return bad("adjoint_substeps must be >= 1");
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad("adam parameters out of range");
        }
        Ok(())
    }
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `theta` in place.
pub fn adam_step(theta: &mut [f64], grad: &[f64], state: &mut AdamState, lr: f64, cfg: &AdamConfig) {
    state.step += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for i in 0..theta.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        theta[i] -= lr * mh / (vh.sqrt() + cfg.eps);
    }
}

/// A window of `len` consecutive stamps of series `series` starting at `start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowRef {
    pub series: usize,
    pub start: usize,
    pub len: usize,
}

impl WindowRef {
    pub fn extract(&self, data: &[Trajectory]) -> Result<Trajectory> {
        data[self.series].window(self.start, self.start + self.len - 1)
    }
}

/// Draws `batch_size` windows of `k + 1` stamps. With `overlap`, each window
/// picks a series and then a start uniformly. Without, windows are first
/// assigned to series with spare room, and each series' windows are placed
/// uniformly among all disjoint arrangements.
pub fn sample_minibatch<R: Rng + ?Sized>(
    rng: &mut R,
    data: &[Trajectory],
    k: usize,
    batch_size: usize,
    overlap: bool,
) -> Result<Vec<WindowRef>> {
    let len = k + 1;
    let longest = data.iter().map(Trajectory::len).max().unwrap_or(0);
    let usable: Vec<usize> = (0..data.len()).filter(|&s| data[s].len() >= len).collect();
    if usable.is_empty() {
        return Err(Error::TooShort {
            needed: len,
            have: longest,
        });
    }
    if overlap {
        return Ok((0..batch_size)
            .map(|_| {
                let series = usable[rng.random_range(0..usable.len())];
                let start = rng.random_range(0..=data[series].len() - len);
                WindowRef { series, start, len }
            })
            .collect());
    }
    let mut room: Vec<usize> = data.iter().map(|t| t.len() / len).collect();
    let total: usize = room.iter().sum();
    if total < batch_size {
        return Err(Error::InvalidConfig(format!(
            "cannot place {batch_size} disjoint windows of {len} stamps; room for {total}"
        )));
    }
    let mut counts = vec![0usize; data.len()];
    for _ in 0..batch_size {
        let open: Vec<usize> = (0..data.len()).filter(|&s| room[s] > 0).collect();
        let s = open[rng.random_range(0..open.len())];
        room[s] -= 1;
        counts[s] += 1;
    }
    let mut out = Vec::with_capacity(batch_size);
    for (series, &c) in counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let slack = data[series].len() - c * len;
        let mut picks = sample(rng, slack + c, c).into_vec();
        picks.sort_unstable();
        for (j, p) in picks.into_iter().enumerate() {
            out.push(WindowRef {
                series,
                start: p + j * k,
                len,
            });
        }
    }
    Ok(out)
}

/// Splits every series into back-to-back windows of `k` intervals (the last
/// may be shorter), so each stamp except the first is predicted exactly once.
pub fn tile_windows(data: &[Trajectory], k: usize) -> Vec<WindowRef> {
    let mut out = Vec::new();
    for (series, t) in data.iter().enumerate() {
        let mut start = 0;
        while start + 1 < t.len() {
            let end = (start + k).min(t.len() - 1);
            out.push(WindowRef {
                series,
                start,
                len: end - start + 1,
            });
            start = end;
        }
    }
    out
}

/// Mean-squared misfit of `k`-interval predictions restarted from the data at
/// every tile start. Infinite if any tile blows up.
pub fn windowed_mse<D: Differentiable + ?Sized>(
    model: &D,
    data: &[Trajectory],
    k: usize,
    solver: &SolverConfig,
) -> Result<f64> {
    let tiles = tile_windows(data, k);
    let parts: Vec<Option<(f64, usize)>> = tiles
        .par_iter()
        .map(|w| -> Result<Option<(f64, usize)>> {
            let win = w.extract(data)?;
            match integrate(model, win.initial(), win.times(), solver) {
                Ok(p) => Ok(Some((sq_misfit(&p, &win), (win.len() - 1) * win.dim()))),
                Err(e) if e.is_numerical() => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let mut sum = 0.0;
    let mut count = 0;
    for p in parts {
        match p {
            Some((s, c)) => {
                sum += s;
                count += c;
            }
            None => return Ok(f64::INFINITY),
        }
    }
    Ok(sum / count.max(1) as f64)
}

/// Mean-squared misfit of a single rollout from each series' first state.
pub fn rollout_mse<D: Differentiable + ?Sized>(model: &D, data: &[Trajectory], solver: &SolverConfig) -> Result<f64> {
    windowed_mse(model, data, usize::MAX - 1, solver)
}

fn sq_misfit(pred: &Trajectory, truth: &Trajectory) -> f64 {
    pred.states()
        .iter()
        .zip(truth.states())
        .skip(1)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    /// Mean-squared misfit over the minibatch (NaN when the step was skipped).
    pub minibatch_mse: f64,
    /// Windowed full-data mean-squared misfit, when evaluated.
    pub full_mse: Option<f64>,
    pub learning_rate: f64,
    pub failed_windows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_full_mse: f64,
    pub final_full_mse: f64,
    pub history: Vec<LossRecord>,
    pub skipped_steps: usize,
}

const DIVERGENCE_SPAN: usize = 100;

/// Runs `config.iterations` Adam steps on `model`, each on a fresh minibatch.
/// Windows whose rollout blows up are dropped; when any window of a step
/// fails the step uses half the learning rate, and when all fail it is
/// skipped. More than half of the last 100 steps skipped is divergence.
pub fn train<D>(model: &mut D, data: &[Trajectory], config: &TrainConfig) -> Result<TrainReport>
where
    D: Differentiable + Clone + Send,
{
    config.validate()?;
    if data.is_empty() {
        return Err(Error::TooShort { needed: 1, have: 0 });
    }
    let k = config.window_length;
    let solver = &config.solver;
    let window_loss = LossSpec {
        l1_weight: 0.0,
        smooth_weight: config.smooth_weight,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut theta = model.params();
    let mut adam = AdamState::new(theta.len());
    let initial_full_mse = windowed_mse(model, data, k, solver)?;
    let mut history = Vec::with_capacity(config.iterations);
    let mut skipped_recent = std::collections::VecDeque::with_capacity(DIVERGENCE_SPAN);
    let mut skipped_steps = 0;

    for it in 0..config.iterations {
        let batch = sample_minibatch(&mut rng, data, k, config.batch_size, config.overlap)?;
        let windows: Vec<Trajectory> = batch.iter().map(|w| w.extract(data)).collect::<Result<_>>()?;
        let results: Vec<Option<_>> = {
            let m = &*model;
            windows
                .par_iter()
                .map(
                    |w| match evaluate(m, w, solver, &window_loss, config.engine, config.adjoint_substeps) {
                        Ok(e) => Ok(Some(e)),
                        Err(e) if e.is_numerical() => Ok(None),
                        Err(e) => Err(e),
                    },
                )
                .collect::<Result<_>>()?
        };
        let failed = results.iter().filter(|r| r.is_none()).count();
        let mut grad = vec![0.0; theta.len()];
        let mut misfit = 0.0;
        let mut count = 0;
        for (e, w) in results.iter().zip(&windows) {
            if let Some(e) = e {
                misfit += e.misfit;
                count += (w.len() - 1) * w.dim();
                for (g, v) in grad.iter_mut().zip(&e.grad) {
                    *g += v;
                }
            }
        }
        let skipped = failed == results.len();
        let lr = if failed > 0 {
            0.5 * config.learning_rate
        } else {
            config.learning_rate
        };
        if !skipped {
            for (g, &p) in grad.iter_mut().zip(&theta) {
                if p > 0.0 {
                    *g += config.l1_weight;
                } else if p < 0.0 {
                    *g -= config.l1_weight;
                }
            }
            adam_step(&mut theta, &grad, &mut adam, lr, &config.adam);
            model.set_params(&theta)?;
        }
        if skipped_recent.len() == DIVERGENCE_SPAN {
            skipped_recent.pop_front();
        }
        skipped_recent.push_back(skipped);
        if skipped {
            skipped_steps += 1;
        }
        let recent = skipped_recent.iter().filter(|&&s| s).count();
        if recent * 2 > DIVERGENCE_SPAN {
            return Err(Error::Diverged {
                iteration: it,
                skipped: recent,
                span: DIVERGENCE_SPAN,
            });
        }
        let full_mse = (config.eval_every > 0 && (it + 1) % config.eval_every == 0)
            .then(|| windowed_mse(model, data, k, solver))
            .transpose()?;
        history.push(LossRecord {
            iteration: it,
            minibatch_mse: if skipped { f64::NAN } else { misfit / count as f64 },
            full_mse,
            learning_rate: lr,
            failed_windows: failed,
        });
    }
    let final_full_mse = match history.last().and_then(|r| r.full_mse) {
        Some(v) => v,
        None => windowed_mse(model, data, k, solver)?,
    };
    Ok(TrainReport {
        initial_full_mse,
        final_full_mse,
        history,
        skipped_steps,
    })
}

/// [`train`] specialized to the dictionary vector field.
pub fn train_ode(field: &mut VectorField, data: &[Trajectory], config: &TrainConfig) -> Result<TrainReport> {
    train(field, data, config)
}
