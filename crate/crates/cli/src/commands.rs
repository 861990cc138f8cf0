use std::f64::consts::PI;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use metatpp_core::eval::{self, EvalOptions, MetricReport};
use metatpp_core::synth::{self, SinusoidalConfig};
use metatpp_core::train::{self, TrainOutcome, LR_GRID, WD_GRID};
use metatpp_core::{checkpoint, data, Dataset, Model, ModelConfig};

use crate::config::{Overrides, RunConfig, SEED_ENV};
use crate::{
    CliError, DriftArgs, EvalArgs, EvalCommon, GenerateArgs, GridArgs, ImputeArgs, Kind, NaiveArgs,
    PlotArgs, TrainArgs,
};

type Res<T = ()> = Result<T, CliError>;

pub const CONFIG_FILE: &str = "config.resolved";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const BINS_FILE: &str = "bins.csv";
pub const LEADERBOARD_FILE: &str = "leaderboard.csv";

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn resolve(config: Option<&Path>, o: &Overrides) -> Res<RunConfig> {
    let text = match config {
        Some(p) => Some(
            fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?,
        ),
        None => None,
    };
    let env = std::env::var(SEED_ENV).ok();
    RunConfig::resolve(env.as_deref(), text.as_deref(), o)
}

/// Creates the output directory and writes the resolved config into it.
fn prepare_out(out: &Path, cfg: &RunConfig, args: &[String], inputs: &[&Path]) -> Res {
    fs::create_dir_all(out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    let mut comments = vec![format!("command: metatpp {}", args.join(" "))];
    comments.extend(inputs.iter().map(|p| format!("input: {}", p.display())));
    fs::write(out.join(CONFIG_FILE), cfg.to_text(&comments)).map_err(runtime)
}

fn load_data(path: &Path) -> Res<Dataset> {
    let ds = Dataset::load_jsonl(path)?;
    if ds.is_empty() {
        return Err(CliError::Usage(format!("{}: no sequences", path.display())));
    }
    Ok(ds)
}

fn load_model(path: &Path) -> Res<Model> {
    if !path.is_file() {
        return Err(CliError::Usage(format!(
            "checkpoint {} not found",
            path.display()
        )));
    }
    checkpoint::load(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn check_marks(model: &Model, data: &Dataset, path: &Path) -> Res {
    if model.config.num_marks != data.num_marks {
        return Err(CliError::Usage(format!(
            "checkpoint has {} marks but {} has {}",
            model.config.num_marks,
            path.display(),
            data.num_marks
        )));
    }
    Ok(())
}

fn eval_options(cfg: &RunConfig) -> Res<EvalOptions> {
    if cfg.eval_samples == 0 {
        return Err(CliError::Usage("samples must be positive".into()));
    }
    Ok(EvalOptions {
        samples: cfg.eval_samples,
        seed: cfg.seed,
        ..Default::default()
    })
}

fn emit<T: serde::Serialize>(out: &Path, value: &T) -> Res {
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    fs::write(out.join(METRICS_FILE), format!("{text}\n")).map_err(runtime)?;
    // A closed pipe on stdout is not a failure, the report is on disk.
    let _ = writeln!(std::io::stdout().lock(), "{text}");
    Ok(())
}

pub fn generate(a: &GenerateArgs) -> Res {
    let seed = match a.seed {
        Some(s) => s,
        None => resolve(None, &Overrides::default())?.seed,
    };
    let n = a.n as usize;
    if let Some(h) = a.horizon {
        if !(h > 0.0 && h.is_finite()) {
            return Err(CliError::Usage(format!("horizon {h} must be positive")));
        }
    }
    let ds = match a.kind {
        Kind::Sinusoidal => {
            let cfg = SinusoidalConfig {
                n_sequences: n,
                phase: a.phase,
                horizon: a.horizon.unwrap_or(32.0 * PI),
                ..Default::default()
            };
            synth::generate_sinusoidal(&cfg, seed)
        }
        Kind::Poisson => {
            if !(a.rate > 0.0 && a.rate.is_finite()) || a.marks == 0 {
                return Err(CliError::Usage(
                    "rate must be positive and marks at least 1".into(),
                ));
            }
            synth::generate_poisson(n, a.rate, a.horizon.unwrap_or(50.0), a.marks, seed)
        }
    };
    ds.save_jsonl(&a.out).map_err(runtime)?;
    let lens: Vec<usize> = ds.sequences.iter().map(|s| s.len()).collect();
    println!(
        "wrote {} sequences to {} (events {}, length min {} max {})",
        ds.len(),
        a.out.display(),
        ds.num_events(),
        lens.iter().min().unwrap(),
        lens.iter().max().unwrap()
    );
    Ok(())
}

struct Prepared {
    cfg: RunConfig,
    model_cfg: ModelConfig,
    split: data::Split,
}

/// Resolves the config, splits the data 60/20/20 and writes the splits and
/// the config snapshot under `out`.
fn prepare_training(
    data_path: &Path,
    out: &Path,
    cfg_args: &crate::ConfigArgs,
    args: &[String],
) -> Res<Prepared> {
    let cfg = resolve(cfg_args.config.as_deref(), &cfg_args.overrides())?;
    cfg.train_config().validate()?;
    let ds = load_data(data_path)?;
    let split = data::split(&ds, [0.6, 0.2, 0.2], cfg.seed)?;
    let empty = split.empty_parts();
    if !empty.is_empty() {
        return Err(CliError::Usage(format!(
            "{} sequences are too few to split, empty: {}",
            ds.len(),
            empty.join(", ")
        )));
    }
    let model_cfg = ModelConfig::for_variant(cfg.variant, ds.num_marks);
    prepare_out(out, &cfg, args, &[data_path])?;
    for (name, part) in [
        ("train", &split.train),
        ("val", &split.val),
        ("test", &split.test),
    ] {
        part.save_jsonl(out.join(format!("{name}.jsonl")))
            .map_err(runtime)?;
    }
    let params = Model::new(model_cfg.clone(), cfg.seed)?.num_params();
    println!("variant {} parameters {params}", cfg.variant);
    println!(
        "split train {} val {} test {}",
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    Ok(Prepared {
        cfg,
        model_cfg,
        split,
    })
}

fn save_outcome(out: &Path, outcome: &TrainOutcome) -> Res {
    checkpoint::save(&outcome.model, out.join(CHECKPOINT_FILE)).map_err(runtime)?;
    train::write_history(out.join(HISTORY_FILE), &outcome.history).map_err(runtime)
}

pub fn train(a: &TrainArgs, args: &[String]) -> Res {
    let p = prepare_training(&a.data, &a.out, &a.cfg, args)?;
    let on_epoch = |r: &train::EpochRecord| {
        eprintln!(
            "epoch {:>3} loss {:.5} nll {:.5} kl {:.5} val_nll {:.5}",
            r.epoch, r.train_loss, r.train_nll, r.train_kl, r.val_nll
        )
    };
    match train::train(
        &p.model_cfg,
        &p.cfg.train_config(),
        &p.split.train,
        &p.split.val,
        on_epoch,
    ) {
        Ok(outcome) => {
            save_outcome(&a.out, &outcome)?;
            println!(
                "best epoch {} val_nll {:.6}, wrote {}",
                outcome.best_epoch,
                outcome.best_val_nll,
                a.out.join(CHECKPOINT_FILE).display()
            );
            Ok(())
        }
        Err(d) => {
            if !d.partial.history.is_empty() {
                save_outcome(&a.out, &d.partial)?;
            }
            Err(runtime(d.error))
        }
    }
}

pub fn grid_search(a: &GridArgs, args: &[String]) -> Res {
    let p = prepare_training(&a.data, &a.out, &a.cfg, args)?;
    let or_default = |v: &[f64], d: &[f64]| if v.is_empty() { d.to_vec() } else { v.to_vec() };
    let (lrs, wds) = (or_default(&a.lrs, &LR_GRID), or_default(&a.wds, &WD_GRID));
    if lrs.iter().chain(&wds).any(|v| !(*v >= 0.0)) || lrs.iter().any(|v| *v <= 0.0) {
        return Err(CliError::Usage(
            "learning rates must be positive and weight decays non-negative".into(),
        ));
    }
    let res = train::grid_search(
        &p.model_cfg,
        &p.cfg.train_config(),
        &lrs,
        &wds,
        &p.split.train,
        &p.split.val,
    )
    .map_err(|e| match e {
        metatpp_core::Error::Config(m) if m.contains("diverged") => CliError::Runtime(m),
        e => e.into(),
    })?;
    train::write_leaderboard(a.out.join(LEADERBOARD_FILE), &res.rows).map_err(runtime)?;
    save_outcome(&a.out, &res.outcome)?;
    let best = &res.rows[res.best];
    let resolved = RunConfig {
        lr: best.lr,
        weight_decay: best.weight_decay,
        ..p.cfg
    };
    prepare_out(&a.out, &resolved, args, &[&a.data])?;
    for r in &res.rows {
        println!(
            "lr {:e} wd {:e} val_nll {:.6} epochs {}{}",
            r.lr,
            r.weight_decay,
            r.best_val_nll,
            r.epochs,
            if r.diverged { " (diverged)" } else { "" }
        );
    }
    println!(
        "best lr {:e} wd {:e} val_nll {:.6}",
        best.lr, best.weight_decay, best.best_val_nll
    );
    Ok(())
}

/// Loads the checkpoint and resolves the config for an evaluation command.
fn prepare_eval(
    c: &EvalCommon,
    args: &[String],
    inputs: &[&Path],
) -> Res<(Model, RunConfig, EvalOptions)> {
    let model = load_model(&c.ckpt)?;
    let cfg = resolve(c.config.as_deref(), &c.overrides())?;
    let cfg = RunConfig {
        variant: model.variant(),
        ..cfg
    };
    let opts = eval_options(&cfg)?;
    let mut all = vec![c.ckpt.as_path()];
    all.extend_from_slice(inputs);
    prepare_out(&c.out, &cfg, args, &all)?;
    Ok((model, cfg, opts))
}

fn check_resamples(n: usize) -> Res {
    if n == 0 {
        return Err(CliError::Usage("bootstrap must be at least 1".into()));
    }
    Ok(())
}

pub fn evaluate(a: &EvalArgs, args: &[String]) -> Res {
    check_resamples(a.bootstrap)?;
    let data = load_data(&a.data)?;
    let (model, _, opts) = prepare_eval(&a.common, args, &[&a.data])?;
    check_marks(&model, &data, &a.data)?;
    let report = eval::evaluate(&model, &data, &opts, a.bootstrap)?;
    emit(&a.common.out, &report)
}

pub fn naive(a: &NaiveArgs, args: &[String]) -> Res {
    check_resamples(a.bootstrap)?;
    let data = load_data(&a.data)?;
    let o = Overrides {
        seed: a.seed,
        ..Default::default()
    };
    let cfg = resolve(a.config.as_deref(), &o)?;
    prepare_out(&a.out, &cfg, args, &[&a.data])?;
    let report: MetricReport = eval::naive_report(&data, a.bootstrap, cfg.seed);
    emit(&a.out, &report)
}

pub fn impute(a: &ImputeArgs, args: &[String]) -> Res {
    check_resamples(a.bootstrap)?;
    let data = load_data(&a.data)?;
    let (model, _, opts) = prepare_eval(&a.common, args, &[&a.data])?;
    check_marks(&model, &data, &a.data)?;
    let report = eval::imputation_eval(&model, &data, a.drop, &opts, a.bootstrap)?;
    emit(&a.common.out, &report)
}

pub fn drift(a: &DriftArgs, args: &[String]) -> Res {
    check_resamples(a.bootstrap)?;
    let sets = a
        .data
        .iter()
        .map(|p| load_data(p))
        .collect::<Res<Vec<_>>>()?;
    let paths: Vec<&Path> = a.data.iter().map(|p| p.as_path()).collect();
    let (model, _, opts) = prepare_eval(&a.common, args, &paths)?;
    for (d, p) in sets.iter().zip(&paths) {
        check_marks(&model, d, p)?;
    }
    let reports = eval::drift_eval(&model, &sets, &opts, a.bootstrap)?;
    emit(&a.common.out, &reports)
}

pub fn export_plot(a: &PlotArgs, args: &[String]) -> Res {
    let data = load_data(&a.data)?;
    let (model, _, opts) = prepare_eval(&a.common, args, &[&a.data])?;
    check_marks(&model, &data, &a.data)?;
    let (target, predicted) = eval::predicted_times(&model, &data, &opts)?;
    let rows = eval::binned_counts(&target, &predicted, a.bin_width);
    let path = a.common.out.join(BINS_FILE);
    eval::write_bins_csv(&path, &rows).map_err(runtime)?;
    println!(
        "wrote {} bins ({} target, {} predicted events) to {}",
        rows.len(),
        target.len(),
        predicted.len(),
        path.display()
    );
    Ok(())
}
