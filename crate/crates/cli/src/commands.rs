//! The simulate / train / predict / evaluate workflows.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dsarf::forecast::{
    long_term, nrmse, short_term_rolling, state_accuracy, ForecastResult, ForecastState, LongTermOptions,
    RollingOptions,
};
use dsarf::numerics::derive_seed;
use dsarf::synthgen::{gen_toy, lorenz_bundle, lorenz_burn_in, pendulum_bundle, SyntheticBundle};
use dsarf::{Dataset64, Model64, StateBelief, Tensor64, Trainer64};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::dataset::{load_dataset, load_series, numbered, save_dataset, save_series, DatasetFile};

#[derive(Debug, Parser)]
#[command(name = "dsarf", version, about = "Deep switching auto-regressive factorization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Flat TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set lags=[1,2]`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    fn overrides(&self) -> Vec<String> {
        let mut out = self.set.clone();
        if let Some(s) = self.seed {
            out.push(format!("seed={s}"));
        }
        out
    }

    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Short,
    Long,
    Both,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with ground-truth sidecars.
    Simulate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Shorthand for `--set system=NAME` (toy, lorenz, pendulum).
        #[arg(long)]
        system: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a model; writes a checkpoint, the ELBO curve and the state path.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint up to the configured epoch count.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Forecast the held-out part of a dataset.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Short)]
        mode: Mode,
        /// Override forecasting keys, e.g. `--set rollouts=100`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a forecast CSV (and optionally a state path) against the truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        states: Option<PathBuf>,
        #[arg(long)]
        true_states: Option<PathBuf>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { config, system, out } => {
            let mut overrides = config.overrides();
            if let Some(s) = system {
                overrides.push(format!("system={s}"));
            }
            simulate(&RunConfig::load(config.config.as_deref(), &overrides)?, &out)
        }
        Command::Train {
            config,
            data,
            out,
            resume,
        } => train(&config.load()?, &data, &out, resume.as_deref()).map(|_| ()),
        Command::Predict {
            checkpoint,
            data,
            mode,
            set,
            out,
        } => predict(&checkpoint, &data, mode, &set, &out).map(|_| ()),
        Command::Evaluate {
            pred,
            truth,
            states,
            true_states,
            out,
        } => {
            let report = evaluate(&pred, &truth, states.as_deref().zip(true_states.as_deref()))?;
            print!("{report}");
            if let Some(path) = out {
                std::fs::write(&path, &report).with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(())
        }
    }
}

fn create_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

pub fn simulate_bundle(cfg: &RunConfig) -> Result<SyntheticBundle<f64>> {
    Ok(match cfg.system.as_str() {
        "toy" => gen_toy(cfg.sim_sequences, cfg.sim_steps.unwrap_or(200), cfg.sim_dim, cfg.seed)?,
        "lorenz" => {
            let p = cfg.lorenz();
            let init = [cfg.lorenz_init[0], cfg.lorenz_init[1], cfg.lorenz_init[2]];
            let w0 = if cfg.lorenz_burn_in > 0 { lorenz_burn_in(cfg.lorenz_burn_in, &p, init)? } else { init };
            lorenz_bundle(cfg.sim_steps.unwrap_or(2000), &p, w0, cfg.sim_dim, cfg.projection_noise, cfg.seed)?
        }
        "pendulum" => {
            let v = &cfg.pendulum_init;
            let init = [v[0], v[1], v[2], v[3]];
            pendulum_bundle(cfg.sim_steps.unwrap_or(20_000), &cfg.pendulum(), init, cfg.sim_dim, cfg.projection_noise, cfg.seed)?
        }
        other => bail!("unknown system {other:?} (toy, lorenz, pendulum)"),
    })
}

/// Writes `data.csv`, `weights.csv`, `factors.csv`, `meta.toml` and, for
/// systems with regimes, `states.csv` under `out`.
pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let bundle = simulate_bundle(cfg)?;
    create_dir(out)?;
    let k = bundle.factor_count();
    let states = bundle.states.as_ref().map(|s| s.iter().flatten().max().map_or(1, |m| m + 1));
    let file = DatasetFile {
        data: bundle.observations.clone(),
        true_factors: states.map(|_| k),
        true_states: states,
    };
    save_dataset(&out.join("data.csv"), &file)?;
    let blocks: Vec<_> = bundle.weights.iter().enumerate().map(|(n, w)| (n, 0, w)).collect();
    save_series(&out.join("weights.csv"), &numbered("w", k), &blocks)?;
    if let Some(labels) = &bundle.states {
        let blocks: Vec<_> = labels.iter().enumerate().map(|(n, l)| (n, 0, l.as_slice(), None)).collect();
        save_states(&out.join("states.csv"), 0, &blocks)?;
    }
    let d = bundle.factors.cols();
    let mut text = numbered("f", d).join(",") + "\n";
    for r in 0..bundle.factors.rows() {
        let row: Vec<String> = bundle.factors.row_slice(r).iter().map(|v| format!("{v:?}")).collect();
        text += &(row.join(",") + "\n");
    }
    std::fs::write(out.join("factors.csv"), text)?;
    let mut meta = toml::Table::new();
    meta.insert("system".into(), bundle.meta.system.clone().into());
    meta.insert("seed".into(), toml::Value::Integer(bundle.meta.seed as i64));
    for (name, v) in &bundle.meta.params {
        meta.insert(name.clone(), (*v).into());
    }
    std::fs::write(out.join("meta.toml"), toml::to_string(&meta)?)?;
    let data = &bundle.observations;
    eprintln!(
        "simulated {}: N = {}, T = {}, D = {} -> {}",
        bundle.meta.system,
        data.sequences(),
        data.steps(),
        data.dim(),
        out.display()
    );
    Ok(())
}

/// `seq,t,state[,p1..pS]` rows; `t` counts from `t0` within each block.
fn save_states(path: &Path, states: usize, blocks: &[(usize, usize, &[usize], Option<&[StateBelief<f64>]>)]) -> Result<()> {
    let mut text = String::from("seq,t,state");
    for c in numbered("p", states) {
        text += ",";
        text += &c;
    }
    text += "\n";
    for &(seq, t0, labels, probs) in blocks {
        for (i, l) in labels.iter().enumerate() {
            write!(text, "{seq},{},{l}", t0 + i)?;
            if let Some(p) = probs {
                for v in &p[i].probs {
                    write!(text, ",{v:?}")?;
                }
            }
            text += "\n";
        }
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Training sequences and, for each, the `(sequence, first step)` it was
/// cut from in the source dataset.
pub struct TrainView {
    pub data: Dataset64,
    pub origin: Vec<(usize, usize)>,
}

/// The training part of `data` under the configured split and chunking.
pub fn training_view(cfg: &RunConfig, data: &Dataset64) -> Result<TrainView> {
    let (n, t) = (data.sequences(), data.steps());
    let (base, seqs) = if cfg.holdout_sequences > 0 {
        (data.split_sequences(cfg.holdout_sequences)?.0, n - cfg.holdout_sequences)
    } else if cfg.holdout_steps > 0 {
        ensure!(cfg.holdout_steps < t, "holdout_steps = {} leaves no training steps", cfg.holdout_steps);
        (data.split_time(t - cfg.holdout_steps)?.0, n)
    } else {
        (data.clone(), n)
    };
    let steps = base.steps();
    let Some(chunk) = cfg.train_chunk else {
        return Ok(TrainView {
            data: base,
            origin: (0..seqs).map(|s| (s, 0)).collect(),
        });
    };
    ensure!(chunk <= steps, "train_chunk = {chunk} exceeds the {steps} training steps");
    let pieces = steps / chunk;
    let start = steps - pieces * chunk;
    let d = base.dim();
    let (mut values, mut mask, mut origin) = (Vec::new(), Vec::new(), Vec::new());
    for s in 0..seqs {
        let (v, m) = base.sequence(s);
        for p in 0..pieces {
            let t0 = start + p * chunk;
            values.extend_from_slice(&v[t0 * d..(t0 + chunk) * d]);
            mask.extend_from_slice(&m[t0 * d..(t0 + chunk) * d]);
            origin.push((s, t0));
        }
    }
    Ok(TrainView {
        data: Dataset64::new(origin.len(), chunk, d, values, mask)?,
        origin,
    })
}

fn load_data(path: &Path) -> Result<DatasetFile> {
    let file = load_dataset(path).with_context(|| format!("loading {}", path.display()))?;
    let d = &file.data;
    eprintln!(
        "loaded {}: N = {}, T = {}, D = {}, {:.2}% missing",
        path.display(),
        d.sequences(),
        d.steps(),
        d.dim(),
        100.0 * d.missing_fraction()
    );
    Ok(file)
}

fn write_curve(path: &Path, trainer: &Trainer64) -> Result<()> {
    let mut text = String::from("epoch,beta,objective,elbo\n");
    for r in &trainer.curve {
        writeln!(text, "{},{:?},{:?},{:?}", r.epoch, r.beta, r.objective, r.elbo)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Trains (or resumes) and writes `checkpoint.bin`, `elbo.csv`,
/// `states.csv` and the resolved `config.toml` under `out`.
pub fn train(cfg: &RunConfig, data_path: &Path, out: &Path, resume: Option<&Path>) -> Result<Trainer64> {
    let file = load_data(data_path)?;
    let view = training_view(cfg, &file.data)?;
    let mut trainer = match resume {
        Some(path) => {
            let ck = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
            let mut expected = ck.config.clone();
            expected.epochs = cfg.epochs;
            ensure!(
                &expected == cfg,
                "configuration differs from the checkpoint's in more than `epochs`; resume needs the same run"
            );
            let mut trainer = ck.trainer;
            trainer.config.epochs = cfg.epochs;
            trainer
        }
        None => {
            let mut model_cfg = cfg.model_config()?;
            model_cfg.dim = file.data.dim();
            Trainer64::new(&model_cfg, &view.data, cfg.train_config()?)?
        }
    };
    let every = (cfg.epochs / 10).max(1);
    while !trainer.is_done() {
        let r = trainer.step_epoch(&view.data)?;
        if r.epoch % every == 0 || trainer.is_done() {
            eprintln!("epoch {:>5}  beta {:.3}  elbo {:.4e}", r.epoch, r.beta, r.elbo);
        }
    }
    create_dir(out)?;
    let ck = Checkpoint {
        config: cfg.clone(),
        trainer,
    };
    save_checkpoint(&out.join("checkpoint.bin"), &ck)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml())?;
    write_curve(&out.join("elbo.csv"), &ck.trainer)?;
    let model = &ck.trainer.model;
    let lag = model.config().max_lag();
    let paths = model
        .variational
        .sequences
        .iter()
        .map(|p| model.state_path(p))
        .collect::<dsarf::Result<Vec<_>>>()?;
    let labels: Vec<Vec<usize>> = paths.iter().map(|p| p.iter().map(StateBelief::argmax).collect()).collect();
    let blocks: Vec<_> = view
        .origin
        .iter()
        .zip(labels.iter().zip(&paths))
        .map(|(&(s, t0), (l, p))| (s, t0, l.as_slice(), Some(p.as_slice())))
        .collect();
    save_states(&out.join("states.csv"), model.config().states, &blocks)?;
    debug_assert!(paths.iter().all(|p| p.len() + lag == model.variational.sequences[0].w_mean.rows()));
    eprintln!("wrote {}", out.display());
    Ok(ck.trainer)
}

/// One forecast per held-out block.
struct Target {
    seq: usize,
    /// First predicted step in the source dataset.
    t0: usize,
    state: ForecastState<f64>,
    values: Vec<f64>,
    mask: Vec<bool>,
}

fn targets(cfg: &RunConfig, model: &Model64, data: &Dataset64) -> Result<Vec<Target>> {
    let (n, t, d) = (data.sequences(), data.steps(), data.dim());
    let lag = model.config().max_lag();
    let mut out = Vec::new();
    if cfg.holdout_sequences > 0 {
        ensure!(t > lag, "held-out sequences need more than {lag} steps");
        for seq in n - cfg.holdout_sequences..n {
            let (v, m) = data.sequence(seq);
            out.push(Target {
                seq,
                t0: lag,
                state: ForecastState::warm_up(model, v, m)?,
                values: v[lag * d..].to_vec(),
                mask: m[lag * d..].to_vec(),
            });
        }
    } else if cfg.holdout_steps > 0 {
        let view = training_view(cfg, data)?;
        for seq in 0..n {
            // The last training piece of this sequence ends where the test starts.
            let piece = view
                .origin
                .iter()
                .rposition(|&(s, _)| s == seq)
                .ok_or_else(|| anyhow!("sequence {seq} has no training piece"))?;
            let (v, m) = data.sequence(seq);
            let t0 = t - cfg.holdout_steps;
            out.push(Target {
                seq,
                t0,
                state: ForecastState::from_posterior(model, &model.variational.sequences[piece])?,
                values: v[t0 * d..].to_vec(),
                mask: m[t0 * d..].to_vec(),
            });
        }
    } else {
        bail!("nothing is held out: set holdout_sequences or holdout_steps");
    }
    Ok(out)
}

/// Forecasts of every held-out block for one mode plus the pooled NRMSE.
pub struct Forecasts {
    pub results: Vec<(usize, usize, ForecastResult<f64>)>,
    pub nrmse: f64,
}

pub fn forecast(cfg: &RunConfig, model: &Model64, data: &Dataset64, long: bool) -> Result<Forecasts> {
    let d = data.dim();
    let assimilation = cfg.assimilation()?;
    let (mut pred, mut truth, mut mask) = (Vec::new(), Vec::new(), Vec::new());
    let mut results = Vec::new();
    for target in targets(cfg, model, data)? {
        let seed = derive_seed(cfg.forecast_seed, &[target.seq as u64]);
        let r = if long {
            let opts = LongTermOptions {
                rollouts: cfg.rollouts,
                sample_noise: cfg.rollouts > 0,
                seed,
            };
            long_term(model, target.state, target.values.len() / d, Some((&target.values, &target.mask)), &opts)?
        } else {
            let opts = RollingOptions { assimilation, seed };
            short_term_rolling(model, target.state, &target.values, &target.mask, &opts)?
        };
        pred.extend_from_slice(r.predicted.data());
        truth.extend_from_slice(&target.values);
        mask.extend_from_slice(&target.mask);
        results.push((target.seq, target.t0, r));
    }
    Ok(Forecasts {
        nrmse: nrmse(&pred, &truth, &mask)?,
        results,
    })
}

/// Writes `forecast_<mode>.csv`, `forecast_<mode>_std.csv`,
/// `states_<mode>.csv` and `report.toml` under `out`; returns the report.
pub fn predict(checkpoint: &Path, data_path: &Path, mode: Mode, overrides: &[String], out: &Path) -> Result<toml::Table> {
    let ck = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let cfg = ck.config.with_overrides(overrides)?;
    ensure!(
        cfg.model_config()? == ck.config.model_config()?
            && (cfg.holdout_sequences, cfg.holdout_steps, cfg.train_chunk)
                == (ck.config.holdout_sequences, ck.config.holdout_steps, ck.config.train_chunk),
        "predict may only override forecasting keys"
    );
    let file = load_data(data_path)?;
    let model = &ck.trainer.model;
    ensure!(
        file.data.dim() == model.config().dim,
        "dataset has D = {}, model was trained with D = {}",
        file.data.dim(),
        model.config().dim
    );
    create_dir(out)?;
    let modes: &[(&str, bool)] = match mode {
        Mode::Short => &[("short", false)],
        Mode::Long => &[("long", true)],
        Mode::Both => &[("short", false), ("long", true)],
    };
    let mut report = toml::Table::new();
    for &(name, long) in modes {
        let f = forecast(&cfg, model, &file.data, long)?;
        let d = file.data.dim();
        let pick = |get: fn(&ForecastResult<f64>) -> &Tensor64| -> Vec<(usize, usize, &Tensor64)> {
            f.results.iter().map(|(s, t0, r)| (*s, *t0, get(r))).collect()
        };
        save_series(&out.join(format!("forecast_{name}.csv")), &numbered("x", d), &pick(|r| &r.predicted))?;
        save_series(&out.join(format!("forecast_{name}_std.csv")), &numbered("x", d), &pick(|r| &r.std))?;
        let labels: Vec<Vec<usize>> = f.results.iter().map(|(_, _, r)| r.state_labels()).collect();
        let blocks: Vec<_> = f
            .results
            .iter()
            .zip(&labels)
            .map(|((s, t0, r), l)| (*s, *t0, l.as_slice(), Some(r.states.as_slice())))
            .collect();
        save_states(&out.join(format!("states_{name}.csv")), model.config().states, &blocks)?;
        let label = if long { "long-term" } else { "short-term" };
        println!("{label} NRMSE: {:.4}%", f.nrmse);
        report.insert(format!("{name}_nrmse"), f.nrmse.into());
    }
    std::fs::write(out.join("report.toml"), toml::to_string(&report)?)?;
    Ok(report)
}

/// NRMSE of the forecast rows against the matching truth rows (observed
/// entries only) and, given both state files, the state accuracy under
/// the best relabeling.
pub fn evaluate(pred: &Path, truth: &Path, states: Option<(&Path, &Path)>) -> Result<String> {
    let forecast = load_series(pred).with_context(|| format!("loading {}", pred.display()))?;
    let file = load_dataset(truth).with_context(|| format!("loading {}", truth.display()))?;
    let data = &file.data;
    let d = data.dim();
    ensure!(forecast.columns.len() == d, "forecast has {} columns, truth has D = {d}", forecast.columns.len());
    let (mut p, mut x, mut m) = (Vec::new(), Vec::new(), Vec::new());
    for (&(seq, t), row) in forecast.keys.iter().zip(&forecast.rows) {
        ensure!(seq < data.sequences() && t < data.steps(), "forecast row (seq {seq}, t {t}) is not in the truth file");
        ensure!(row.iter().all(|v| v.is_finite()), "forecast row (seq {seq}, t {t}) has a missing value");
        let (v, mk) = data.sequence(seq);
        p.extend_from_slice(row);
        x.extend_from_slice(&v[t * d..(t + 1) * d]);
        m.extend_from_slice(&mk[t * d..(t + 1) * d]);
    }
    let mut report = format!("rows = {}\nnrmse = {:?}\n", forecast.keys.len(), nrmse(&p, &x, &m)?);
    if let Some((inferred, reference)) = states {
        let inferred = load_series(inferred)?;
        let reference = load_series(reference)?;
        let label = |s: &crate::dataset::Series, i: usize| -> Result<usize> {
            let v = s.rows[i].first().copied().unwrap_or(f64::NAN);
            ensure!(v >= 0.0 && v.fract() == 0.0, "state label {v} is not a nonnegative integer");
            Ok(v as usize)
        };
        let lookup: HashMap<(usize, usize), usize> = (0..reference.keys.len())
            .map(|i| Ok((reference.keys[i], label(&reference, i)?)))
            .collect::<Result<_>>()?;
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for i in 0..inferred.keys.len() {
            if let Some(&r) = lookup.get(&inferred.keys[i]) {
                a.push(label(&inferred, i)?);
                b.push(r);
            }
        }
        ensure!(!a.is_empty(), "no state rows in common");
        let s = a.iter().chain(&b).max().map_or(1, |m| m + 1);
        let align = state_accuracy(&a, &b, s)?;
        writeln!(report, "state_rows = {}\nstate_accuracy = {:?}", a.len(), align.accuracy)?;
    }
    Ok(report)
}
