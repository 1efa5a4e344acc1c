use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use neupde_core::checkpoint::{Checkpoint, Model};
use neupde_core::experiment::{self, ExperimentConfig};
use neupde_core::io::{read_trajectory, write_trajectory};
use neupde_core::metrics::Metric;
use neupde_core::odeint::linspace;
use neupde_core::pde::{read_fields, write_fields, write_stamp_csv, FieldSeries};
use neupde_core::{Engine, Error, Trajectory};

/// Learn governing equations from time series with dictionary-fed networks.
#[derive(Parser)]
#[command(name = "neupde", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the dataset described by a configuration.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Train on a generated dataset; writes a checkpoint and a loss log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        engine: Option<Engine>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Integrate a checkpointed model.
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Take the initial state and stamps from this trajectory (.csv) or
        /// field file (.bin).
        #[arg(long, conflicts_with_all = ["x0", "times"])]
        data: Option<PathBuf>,
        /// Comma-separated initial state.
        #[arg(long, requires = "times", allow_hyphen_values = true)]
        x0: Option<String>,
        /// Uniform stamps as `t0:t1:count`.
        #[arg(long, requires = "x0", allow_hyphen_values = true)]
        times: Option<String>,
        /// Record index inside a multi-record field file.
        #[arg(long, default_value_t = 0)]
        record: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a prediction with the truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value = "mse")]
        metric: Metric,
        #[arg(long, default_value_t = 0)]
        record: usize,
    },
    /// Sparse-regression baseline; writes a coefficient table.
    Baseline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Check analytic gradients against finite differences.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        engine: Option<Engine>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Write one stamp of a field file as an `x,y,u` table.
    Export {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        record: usize,
        /// Defaults to the last stamp.
        #[arg(long)]
        stamp: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Path, seed: Option<u64>, engine: Option<Engine>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    if let Some(e) = engine {
        cfg.set_engine(e);
    }
    Ok(cfg)
}

fn is_fields(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "bin")
}

fn read_record(path: &Path, record: usize) -> Result<FieldSeries> {
    let mut all = read_fields(path)?;
    let n = all.len();
    if record >= n {
        bail!("{} holds {n} records, asked for record {record}", path.display());
    }
    Ok(all.swap_remove(record))
}

fn parse_times(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let [t0, t1, n] = parts[..] else {
        bail!("--times must look like t0:t1:count, got `{spec}`");
    };
    let n: usize = n.parse().context("stamp count")?;
    if n < 2 {
        bail!("--times needs at least 2 stamps");
    }
    Ok(linspace(t0.parse()?, t1.parse()?, n))
}

fn parse_state(spec: &str) -> Result<Vec<f64>> {
    spec.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| anyhow!("bad state entry `{v}`: {e}"))
        })
        .collect()
}

fn forecast(
    checkpoint: &Path,
    data: Option<&Path>,
    x0: Option<&str>,
    times: Option<&str>,
    record: usize,
    out: &Path,
) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let grid = match &ckpt.model {
        Model::Pde(m) => Some(m.grid),
        Model::Ode(_) => None,
    };
    let (x0, times) = match (data, x0, times) {
        (Some(p), _, _) if is_fields(p) => {
            let s = read_record(p, record)?;
            (s.trajectory.initial().to_vec(), s.times().to_vec())
        }
        (Some(p), _, _) => {
            let t = read_trajectory(p)?;
            (t.initial().to_vec(), t.times().to_vec())
        }
        (None, Some(x), Some(t)) => (parse_state(x)?, parse_times(t)?),
        _ => bail!("forecast needs --data or both --x0 and --times"),
    };
    let pred = experiment::forecast(&ckpt, &x0, &times)?;
    match grid {
        Some(g) => write_fields(out, &[FieldSeries::new(g, pred)?])?,
        None => write_trajectory(out, &pred)?,
    }
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn load_series(path: &Path, record: usize) -> Result<Trajectory> {
    if is_fields(path) {
        Ok(read_record(path, record)?.trajectory)
    } else {
        Ok(read_trajectory(path)?)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, seed, out } => {
            let cfg = load_config(&config, seed, None)?;
            for f in experiment::run_generate(&cfg, &out)? {
                println!("{}", f.display());
            }
        }
        Command::Train {
            config,
            seed,
            engine,
            out,
        } => {
            let cfg = load_config(&config, seed, engine)?;
            let summary = experiment::run_train(&cfg, &out)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Forecast {
            checkpoint,
            data,
            x0,
            times,
            record,
            out,
        } => forecast(
            &checkpoint,
            data.as_deref(),
            x0.as_deref(),
            times.as_deref(),
            record,
            &out,
        )?,
        Command::Eval {
            pred,
            truth,
            metric,
            record,
        } => {
            let p = load_series(&pred, record)?;
            let t = load_series(&truth, record)?;
            let value = metric.eval(&p, &t)?;
            println!("{}", serde_json::json!({ "metric": metric.name(), "value": value }));
        }
        Command::Baseline { config, seed, out } => {
            let cfg = load_config(&config, seed, None)?;
            let (outcome, path) = experiment::run_baseline(&cfg, &out)?;
            if outcome.singular {
                eprintln!("warning: a least-squares subproblem was rank deficient");
            }
            println!("{}", path.display());
        }
        Command::Gradcheck {
            config,
            seed,
            engine,
            out,
        } => {
            let cfg = load_config(&config, seed, engine)?;
            let ExperimentConfig::GradCheck(e) = &cfg else {
                return Err(Error::InvalidConfig("gradcheck needs a grad_check experiment".into()).into());
            };
            let report = e.run()?;
            let text = serde_json::to_string_pretty(&report)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join(format!("{}_gradcheck.json", e.name)), &text)?;
            println!("{text}");
        }
        Command::Export {
            data,
            record,
            stamp,
            out,
        } => {
            if !is_fields(&data) {
                bail!("export expects a .bin field file");
            }
            let s = read_record(&data, record)?;
            let i = stamp.unwrap_or(s.len() - 1);
            if i >= s.len() {
                bail!("stamp {i} out of range (series has {} stamps)", s.len());
            }
            write_stamp_csv(&out, &s.field(i))?;
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_numerical() => 2,
        _ => 1,
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("NEUPDE_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().with_context(|| format!("NEUPDE_THREADS=`{v}`"))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match init_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
