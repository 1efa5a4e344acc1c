//! Experiment configurations and the runners behind the command-line tool.
//! Every run is fully determined by its configuration.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    build_problem, lasso_component, lasso_matrix, stlsq, tune_lambda, write_coefficients, LassoConfig,
    RegressionProblem,
};
use crate::checkpoint::{Checkpoint, Model};
use crate::dictionary::{DictionarySpec, NormalizationBounds, TimeScale};
use crate::error::{Error, Result};
use crate::field::{LinearPart, VectorField};
use crate::gradient::{grad_check, Differentiable, Engine, GradCheckReport, LossSpec};
use crate::io::{read_trajectory, write_trajectory};
use crate::metrics::mse;
use crate::network::Activation;
use crate::odeint::{integrate, SolverConfig, Trajectory};
use crate::pde::{make_burgers_dataset, read_fields, write_fields, BurgersDatasetConfig, FieldSeries, PdeModelConfig};
use crate::rom::{
    project, snapshot_matrix, svd_truncate, synthetic_snapshots, train_rom, RomModelConfig, RomSynthConfig,
};
use crate::systems::{generate, GeneratorConfig};
use crate::train::{rollout_mse, train, LossRecord, TrainConfig, TrainReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "snake_case")]
pub enum ExperimentConfig {
    Ode(OdeExperiment),
    Burgers(BurgersExperiment),
    Rom(RomExperiment),
    GradCheck(GradCheckExperiment),
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn name(&self) -> &str {
        match self {
            Self::Ode(e) => &e.name,
            Self::Burgers(e) => &e.name,
            Self::Rom(e) => &e.name,
            Self::GradCheck(e) => &e.name,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name().is_empty() || self.name().contains(['/', '\\']) {
            return Err(Error::InvalidConfig(format!("bad experiment name `{}`", self.name())));
        }
        match self {
            Self::Ode(e) => {
                e.data.validate()?;
                e.train.validate()
            }
            Self::Burgers(e) => e.train.validate(),
            Self::Rom(e) => e.train.validate(),
            Self::GradCheck(e) => {
                e.data.validate()?;
                e.solver.validate()?;
                e.loss.validate()
            }
        }
    }

    /// Overrides every seed in the configuration.
    pub fn set_seed(&mut self, seed: u64) {
        match self {
            Self::Ode(e) => {
                e.data.seed = seed;
                e.model.seed = seed;
                e.train.seed = seed;
            }
            Self::Burgers(e) => {
                e.data.seed = seed;
                e.model.seed = seed;
                e.train.seed = seed;
            }
            Self::Rom(e) => {
                e.data.seed = seed;
                e.model.seed = seed;
                e.train.seed = seed;
            }
            Self::GradCheck(e) => {
                e.data.seed = seed;
                e.model.seed = seed;
            }
        }
    }

    pub fn set_engine(&mut self, engine: Engine) {
        match self {
            Self::Ode(e) => e.train.engine = engine,
            Self::Burgers(e) => e.train.engine = engine,
            Self::Rom(e) => e.train.engine = engine,
            Self::GradCheck(e) => e.engine = engine,
        }
    }
}

/// Network architecture for low-dimensional systems.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OdeModelConfig {
    pub degree: u32,
    pub include_time: bool,
    pub hidden: usize,
    pub activation: Activation,
    /// Add a trainable `A0 x` term.
    pub linear: bool,
    pub seed: u64,
}

impl Default for OdeModelConfig {
    fn default() -> Self {
        Self {
            degree: 2,
            include_time: false,
            hidden: 20,
            activation: Activation::Elu,
            linear: false,
            seed: 0,
        }
    }
}

impl OdeModelConfig {
    /// Bounds are fitted over every state value and the time scale spans the
    /// union of the series' stamps.
    pub fn build(&self, data: &[Trajectory]) -> Result<VectorField> {
        let first = data.first().ok_or(Error::TooShort { needed: 1, have: 0 })?;
        let spec = DictionarySpec::new(first.dim(), self.degree, self.include_time)?;
        let bounds = NormalizationBounds::fit(data.iter().flat_map(|d| d.values()))?;
        let time_scale = if self.include_time {
            let t0 = data.iter().map(|d| d.times()[0]).fold(f64::INFINITY, f64::min);
            let t1 = data
                .iter()
                .map(|d| *d.times().last().unwrap())
                .fold(f64::NEG_INFINITY, f64::max);
            Some(TimeScale::new(t0, t1)?)
        } else {
            None
        };
        let mut field = VectorField::with_network(spec, bounds, time_scale, self.hidden, self.activation, self.seed)?;
        if self.linear {
            field.linear = Some(LinearPart::zeros(first.dim()));
        }
        Ok(field)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    Stlsq,
    Lasso,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub method: BaselineMethod,
    pub degree: u32,
    #[serde(default)]
    pub include_time: bool,
    #[serde(default)]
    pub include_constant: bool,
    /// STLSQ cut-off.
    #[serde(default)]
    pub threshold: f64,
    #[serde(default = "default_stlsq_iters")]
    pub max_iters: usize,
    /// Fixed LASSO penalty (unit-RMS column units).
    #[serde(default)]
    pub lambda: Option<f64>,
    /// Nonzeros per component; `λ` is then tuned by bisection.
    #[serde(default)]
    pub target_sparsity: Option<Vec<usize>>,
    #[serde(default)]
    pub lasso: LassoConfig,
    /// Data for the regression; defaults to the experiment's training data.
    #[serde(default)]
    pub data: Option<GeneratorConfig>,
}

fn default_stlsq_iters() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OdeExperiment {
    pub name: String,
    pub data: GeneratorConfig,
    #[serde(default)]
    pub model: OdeModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub baseline: Option<BaselineConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BurgersExperiment {
    pub name: String,
    #[serde(default)]
    pub data: BurgersDatasetConfig,
    #[serde(default)]
    pub model: PdeModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RomExperiment {
    pub name: String,
    #[serde(default)]
    pub data: RomSynthConfig,
    #[serde(default)]
    pub model: RomModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

/// Gradient check of a freshly initialized model on the first
/// `window_stamps` stamps of a generated series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCheckExperiment {
    pub name: String,
    pub data: GeneratorConfig,
    #[serde(default)]
    pub model: OdeModelConfig,
    pub window_stamps: usize,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub loss: LossSpec,
    #[serde(default)]
    pub engine: Engine,
    #[serde(default = "default_adjoint_substeps")]
    pub adjoint_substeps: usize,
    #[serde(default = "default_fd_step")]
    pub step: f64,
}

fn default_adjoint_substeps() -> usize {
    10
}

fn default_fd_step() -> f64 {
    1e-6
}

impl OdeExperiment {
    /// Clean and noisy series.
    pub fn dataset(&self) -> Result<(Trajectory, Trajectory)> {
        generate(&self.data)
    }

    pub fn fit(&self, data: &Trajectory) -> Result<(VectorField, TrainReport)> {
        let mut field = self.model.build(std::slice::from_ref(data))?;
        let report = train(&mut field, std::slice::from_ref(data), &self.train)?;
        Ok((field, report))
    }

    pub fn clean_path(&self, dir: &Path) -> PathBuf {
        dir.join(format!("{}_clean.csv", self.name))
    }

    pub fn noisy_path(&self, dir: &Path) -> PathBuf {
        dir.join(format!("{}_noisy.csv", self.name))
    }
}

impl BurgersExperiment {
    pub fn train_path(&self, dir: &Path) -> PathBuf {
        dir.join(format!("{}_train.bin", self.name))
    }

    pub fn test_path(&self, dir: &Path) -> PathBuf {
        dir.join(format!("{}_test.bin", self.name))
    }

    pub fn fit(&self, train_data: &[FieldSeries]) -> Result<(crate::pde::PdeModel, TrainReport)> {
        let mut model = self.model.build(train_data)?;
        let report = crate::pde::train_burgers(train_data, &mut model, &self.train)?;
        Ok((model, report))
    }
}

/// A fitted reduced model together with its basis and projected data.
#[derive(Debug, Clone)]
pub struct RomFit {
    pub basis: crate::rom::RomBasis,
    pub alpha: Trajectory,
    pub field: VectorField,
    pub report: TrainReport,
}

impl RomExperiment {
    pub fn snapshots_path(&self, dir: &Path) -> PathBuf {
        dir.join(format!("{}_snapshots.bin", self.name))
    }

    pub fn fit(&self, snapshots: &FieldSeries) -> Result<RomFit> {
        let mut basis = svd_truncate(&snapshot_matrix(&snapshots.trajectory), self.model.rank)?;
        basis.grid = Some(snapshots.grid);
        let alpha = project(&basis, &snapshots.trajectory)?;
        let (field, report) = train_rom(std::slice::from_ref(&alpha), &self.model, &self.train)?;
        Ok(RomFit {
            basis,
            alpha,
            field,
            report,
        })
    }
}

impl GradCheckExperiment {
    pub fn setup(&self) -> Result<(VectorField, Trajectory)> {
        let (_, noisy) = generate(&self.data)?;
        if self.window_stamps < 2 || self.window_stamps > noisy.len() {
            return Err(Error::InvalidConfig(format!(
                "window_stamps must lie in [2, {}]",
                noisy.len()
            )));
        }
        let window = noisy.window(0, self.window_stamps - 1)?;
        let field = self.model.build(std::slice::from_ref(&noisy))?;
        Ok((field, window))
    }

    pub fn run(&self) -> Result<GradCheckReport> {
        let (field, window) = self.setup()?;
        grad_check(
            &field,
            &window,
            &self.solver,
            &self.loss,
            self.engine,
            self.adjoint_substeps,
            self.step,
        )
    }
}

/// Writes the experiment's dataset files into `dir`, plus a
/// `<name>.meta.json` sidecar holding the full configuration.
pub fn run_generate(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut files = write_dataset(cfg, dir)?;
    let meta = dir.join(format!("{}.meta.json", cfg.name()));
    let names: Vec<String> = files
        .iter()
        .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
        .collect();
    let doc = serde_json::json!({ "config": cfg, "files": names });
    std::fs::write(&meta, serde_json::to_string_pretty(&doc)?)?;
    files.push(meta);
    Ok(files)
}

fn write_dataset(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    match cfg {
        ExperimentConfig::Ode(e) => {
            let (clean, noisy) = e.dataset()?;
            write_trajectory(&e.clean_path(dir), &clean)?;
            write_trajectory(&e.noisy_path(dir), &noisy)?;
            Ok(vec![e.clean_path(dir), e.noisy_path(dir)])
        }
        ExperimentConfig::Burgers(e) => {
            let (train_data, test) = make_burgers_dataset(&e.data)?;
            write_fields(&e.train_path(dir), &train_data)?;
            write_fields(&e.test_path(dir), &[test])?;
            Ok(vec![e.train_path(dir), e.test_path(dir)])
        }
        ExperimentConfig::Rom(e) => {
            let s = synthetic_snapshots(&e.data)?;
            write_fields(&e.snapshots_path(dir), &[s])?;
            Ok(vec![e.snapshots_path(dir)])
        }
        ExperimentConfig::GradCheck(e) => {
            let (_, window) = e.setup()?;
            let path = dir.join(format!("{}_window.csv", e.name));
            write_trajectory(&path, &window)?;
            Ok(vec![path])
        }
    }
}

/// What a training run produced.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub name: String,
    pub param_count: usize,
    pub iterations: usize,
    pub initial_full_mse: f64,
    pub final_full_mse: f64,
    pub skipped_steps: usize,
    /// Rollout over the training data (or the held-out series for Burgers).
    pub forecast_mse: Option<f64>,
    pub checkpoint: PathBuf,
}

fn losses_csv(history: &[LossRecord]) -> String {
    let mut s = String::from("iteration,minibatch_mse,full_mse,learning_rate,failed_windows\n");
    for r in history {
        let full = r.full_mse.map_or(String::new(), |v| format!("{v:.10e}"));
        s.push_str(&format!(
            "{},{:.10e},{},{:e},{}\n",
            r.iteration, r.minibatch_mse, full, r.learning_rate, r.failed_windows
        ));
    }
    s
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} not found; run `generate` first", path.display()),
        )))
    }
}

fn finite_or_none(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        Ok(_) => Ok(None),
        Err(e) if e.is_numerical() => Ok(None),
        Err(e) => Err(e),
    }
}

/// Trains on the dataset previously written by [`run_generate`] and writes
/// the checkpoint, loss history and a forecast into `dir`.
pub fn run_train(cfg: &ExperimentConfig, dir: &Path) -> Result<TrainSummary> {
    let name = cfg.name().to_string();
    let ckpt_path = dir.join(format!("{name}.ckpt.json"));
    let (summary, history) = match cfg {
        ExperimentConfig::Ode(e) => {
            require(&e.noisy_path(dir))?;
            let data = read_trajectory(&e.noisy_path(dir))?;
            let (field, report) = e.fit(&data)?;
            let forecast = finite_or_none(rollout_mse(&field, std::slice::from_ref(&data), &e.train.solver))?;
            if let Ok(pred) = integrate(&field, data.initial(), data.times(), &e.train.solver) {
                write_trajectory(&dir.join(format!("{name}_forecast.csv")), &pred)?;
            }
            let param_count = field.param_count();
            Checkpoint::new(
                Model::Ode(field),
                e.train.solver,
                e.train.iterations,
                Some(report.final_full_mse),
            )
            .save(&ckpt_path)?;
            (
                summarize(&name, param_count, e.train.iterations, &report, forecast, &ckpt_path),
                report.history,
            )
        }
        ExperimentConfig::Burgers(e) => {
            require(&e.train_path(dir))?;
            require(&e.test_path(dir))?;
            let train_data = read_fields(&e.train_path(dir))?;
            let test = read_fields(&e.test_path(dir))?
                .into_iter()
                .next()
                .ok_or_else(|| Error::Parse("test file holds no record".into()))?;
            let (model, report) = e.fit(&train_data)?;
            let forecast = match integrate(&model, test.trajectory.initial(), test.times(), &e.train.solver) {
                Ok(pred) => {
                    let m = mse(&pred, &test.trajectory)?;
                    write_fields(
                        &dir.join(format!("{name}_forecast.bin")),
                        &[FieldSeries::new(test.grid, pred)?],
                    )?;
                    Some(m).filter(|v| v.is_finite())
                }
                Err(err) if err.is_numerical() => None,
                Err(err) => return Err(err),
            };
            let param_count = model.param_count();
            Checkpoint::new(
                Model::Pde(model),
                e.train.solver,
                e.train.iterations,
                Some(report.final_full_mse),
            )
            .save(&ckpt_path)?;
            (
                summarize(&name, param_count, e.train.iterations, &report, forecast, &ckpt_path),
                report.history,
            )
        }
        ExperimentConfig::Rom(e) => {
            require(&e.snapshots_path(dir))?;
            let s = read_fields(&e.snapshots_path(dir))?
                .into_iter()
                .next()
                .ok_or_else(|| Error::Parse("snapshot file holds no record".into()))?;
            let fit = e.fit(&s)?;
            crate::rom::write_basis(dir, &format!("{name}_basis"), &fit.basis)?;
            write_trajectory(&dir.join(format!("{name}_coefficients.csv")), &fit.alpha)?;
            let forecast = finite_or_none(crate::rom::rollout_misfit(&fit.field, &fit.alpha, &e.train.solver))?;
            let param_count = fit.field.param_count();
            Checkpoint::new(
                Model::Ode(fit.field),
                e.train.solver,
                e.train.iterations,
                Some(fit.report.final_full_mse),
            )
            .save(&ckpt_path)?;
            (
                summarize(
                    &name,
                    param_count,
                    e.train.iterations,
                    &fit.report,
                    forecast,
                    &ckpt_path,
                ),
                fit.report.history,
            )
        }
        ExperimentConfig::GradCheck(_) => {
            return Err(Error::InvalidConfig("grad-check experiments are not trainable".into()))
        }
    };
    std::fs::write(dir.join(format!("{name}_losses.csv")), losses_csv(&history))?;
    std::fs::write(
        dir.join(format!("{name}_summary.json")),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(summary)
}

fn summarize(
    name: &str,
    param_count: usize,
    iterations: usize,
    report: &TrainReport,
    forecast_mse: Option<f64>,
    checkpoint: &Path,
) -> TrainSummary {
    TrainSummary {
        name: name.to_string(),
        param_count,
        iterations,
        initial_full_mse: report.initial_full_mse,
        final_full_mse: report.final_full_mse,
        skipped_steps: report.skipped_steps,
        forecast_mse,
        checkpoint: checkpoint.to_path_buf(),
    }
}

/// Sparse-regression fit.
#[derive(Debug, Clone)]
pub struct BaselineOutcome {
    pub problem: RegressionProblem,
    /// `terms × components`; debiased for LASSO.
    pub coefficients: DMatrix<f64>,
    pub singular: bool,
    /// Penalty used per component (LASSO only).
    pub lambdas: Vec<f64>,
}

pub fn fit_baseline(data: &Trajectory, cfg: &BaselineConfig) -> Result<BaselineOutcome> {
    let spec = DictionarySpec::new(data.dim(), cfg.degree, cfg.include_time)?;
    let problem = build_problem(data, &spec, cfg.include_constant)?;
    match cfg.method {
        BaselineMethod::Stlsq => {
            let fit = stlsq(&problem, cfg.threshold, cfg.max_iters)?;
            Ok(BaselineOutcome {
                problem,
                coefficients: fit.coefficients,
                singular: fit.singular,
                lambdas: Vec::new(),
            })
        }
        BaselineMethod::Lasso => {
            let mut fits = Vec::with_capacity(problem.components());
            let mut lambdas = Vec::with_capacity(problem.components());
            for k in 0..problem.components() {
                let (lambda, fit) = match (&cfg.target_sparsity, cfg.lambda) {
                    (Some(t), _) => {
                        let target = *t.get(k).ok_or_else(|| {
                            Error::InvalidConfig("target_sparsity needs one entry per component".into())
                        })?;
                        tune_lambda(&problem, k, target, &cfg.lasso)?
                    }
                    (None, Some(l)) => (l, lasso_component(&problem, k, l, &cfg.lasso)?),
                    (None, None) => {
                        return Err(Error::InvalidConfig(
                            "lasso needs either lambda or target_sparsity".into(),
                        ))
                    }
                };
                fits.push(fit);
                lambdas.push(lambda);
            }
            Ok(BaselineOutcome {
                singular: fits.iter().any(|f| f.singular),
                coefficients: lasso_matrix(&fits, true),
                problem,
                lambdas,
            })
        }
    }
}

/// Runs the configured baseline and writes `<name>_coefficients.csv`.
pub fn run_baseline(cfg: &ExperimentConfig, dir: &Path) -> Result<(BaselineOutcome, PathBuf)> {
    let ExperimentConfig::Ode(e) = cfg else {
        return Err(Error::InvalidConfig("baselines apply to ODE experiments only".into()));
    };
    let b = e
        .baseline
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("configuration has no `baseline` section".into()))?;
    let data = match &b.data {
        Some(g) => generate(g)?.1,
        None => e.dataset()?.1,
    };
    let out = fit_baseline(&data, b)?;
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("{}_coefficients.csv", e.name));
    write_coefficients(&path, &out.problem, &out.coefficients)?;
    Ok((out, path))
}

/// A model rebuilt from a checkpoint, ready to integrate.
pub fn forecast(ckpt: &Checkpoint, x0: &[f64], times: &[f64]) -> Result<Trajectory> {
    match &ckpt.model {
        Model::Ode(f) => integrate(f, x0, times, &ckpt.solver),
        Model::Pde(m) => integrate(m, x0, times, &ckpt.solver),
    }
}

/// Parameters of a model from a checkpoint (for reporting).
pub fn checkpoint_params(ckpt: &Checkpoint) -> Vec<f64> {
    match &ckpt.model {
        Model::Ode(f) => f.params(),
        Model::Pde(m) => m.params(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_fields_are_rejected() {
        let ok =
            r#"{"experiment":"ode","name":"l","data":{"system":"lorenz","x0":[1,1,1],"t0":0,"t_end":1,"stamps":10}}"#;
        assert!(ExperimentConfig::from_json(ok).is_ok());
        let bad = ok.replace(r#""name":"l""#, r#""name":"l","bogus":1"#);
        assert!(ExperimentConfig::from_json(&bad).is_err());
        let bad = ok.replace(r#""stamps":10"#, r#""stamps":10,"sigma":1"#);
        assert!(ExperimentConfig::from_json(&bad).is_err());
        let bad = ok.replace(r#""name":"l""#, r#""name":"l","train":{"lr":1}"#);
        assert!(ExperimentConfig::from_json(&bad).is_err());
    }

    #[test]
    fn seed_override_reaches_every_section() {
        let mut c = ExperimentConfig::Burgers(BurgersExperiment {
            name: "b".into(),
            data: Default::default(),
            model: Default::default(),
            train: Default::default(),
        });
        c.set_seed(9);
        let ExperimentConfig::Burgers(e) = &c else {
            unreachable!()
        };
        assert_eq!((e.data.seed, e.model.seed, e.train.seed), (9, 9, 9));
    }

    #[test]
    fn model_builder_respects_options() {
        let t = Trajectory::new(
            vec![1.0, 2.0, 4.0],
            vec![vec![0.0, 1.0], vec![2.0, 3.0], vec![-1.0, 0.5]],
        )
        .unwrap();
        let f = OdeModelConfig {
            include_time: true,
            linear: true,
            ..Default::default()
        }
        .build(std::slice::from_ref(&t))
        .unwrap();
        assert_eq!(f.features.bounds, NormalizationBounds::new(-1.0, 3.0).unwrap());
        assert_eq!(f.features.time_scale, Some(TimeScale::new(1.0, 4.0).unwrap()));
        assert_eq!(f.linear.as_ref().unwrap().matrix, vec![0.0; 4]);
    }
}
