//! Minibatch training with early stopping, and the hyperparameter grid.

use std::path::Path;

use metatpp_autograd::{AdamConfig, AdamState, Graph, ParamStore, Rng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{bucket_batches, make_batch, Dataset};
use crate::error::{Error, Result};
use crate::eval::eval_nll;
use crate::model::{Model, ModelConfig};
use crate::objective::{loss, LossOptions};

pub const LR_GRID: [f64; 4] = [1e-2, 1e-3, 1e-4, 1e-5];
pub const WD_GRID: [f64; 4] = [1e-2, 1e-3, 1e-4, 1e-5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Latent samples per training step.
    pub train_samples: usize,
    /// Latent samples for the per-epoch validation NLL.
    pub val_samples: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub survival: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 16,
            train_samples: 32,
            val_samples: 32,
            max_epochs: 200,
            patience: 20,
            seed: 0,
            survival: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "lr must be positive and weight_decay non-negative".into(),
            ));
        }
        if self.batch_size == 0
            || self.train_samples == 0
            || self.val_samples == 0
            || self.max_epochs == 0
        {
            return Err(Error::Config(
                "batch_size, train_samples, val_samples and max_epochs must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One row of `history.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_nll: f64,
    pub train_kl: f64,
    pub train_mark: f64,
    pub val_nll: f64,
}

pub struct TrainOutcome {
    /// Weights with the best validation NLL.
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_nll: f64,
}

/// Training stopped on a non-finite loss or gradient. `partial` holds the
/// best weights seen before the failure.
pub struct Diverged {
    pub error: Error,
    pub partial: TrainOutcome,
}

impl std::fmt::Debug for Diverged {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Diverged({})", self.error)
    }
}

pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train_data: &Dataset,
    val_data: &Dataset,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> std::result::Result<TrainOutcome, Box<Diverged>> {
    let fail = |error: Error, model: Model| {
        Box::new(Diverged {
            error,
            partial: TrainOutcome {
                model,
                history: Vec::new(),
                best_epoch: 0,
                best_val_nll: f64::NAN,
            },
        })
    };
    let mut model = match Model::new(model_cfg.clone(), cfg.seed) {
        Ok(m) => m,
        Err(e) => {
            let m = Model::new(ModelConfig::for_variant(model_cfg.variant, 1), 0).unwrap();
            return Err(fail(e, m));
        }
    };
    if let Err(e) = cfg.validate() {
        return Err(fail(e, model));
    }
    if train_data.is_empty() || val_data.is_empty() {
        return Err(fail(
            Error::Config("training and validation sets must be non-empty".into()),
            model,
        ));
    }
    let mut adam = AdamState::new(AdamConfig::new(cfg.lr, cfg.weight_decay), &model.params);
    let mut rng = Rng::stream(cfg.seed, 1);
    let lens: Vec<usize> = train_data.sequences.iter().map(|s| s.len()).collect();
    let opts = LossOptions {
        survival: cfg.survival,
        objective: None,
    };
    let mut best: ParamStore = model.params.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut history = Vec::new();
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        let mut sums = [0.0; 4];
        let mut events = 0usize;
        for (step, idx) in bucket_batches(&lens, cfg.batch_size, &mut rng)
            .into_iter()
            .enumerate()
        {
            let step_result = (|| -> Result<()> {
                let seqs: Vec<_> = idx.iter().map(|&i| &train_data.sequences[i]).collect();
                let batch = make_batch(&seqs, None)?;
                let mut g = Graph::new();
                let p = model.params.bind(&mut g, true);
                let l = loss(
                    &model,
                    &mut g,
                    &p,
                    &batch,
                    cfg.train_samples,
                    &mut rng,
                    &opts,
                )
                .map_err(|e| match e {
                    Error::Diverged { .. } => Error::Diverged { epoch, step },
                    e => e,
                })?;
                let grads = g.backward(l.var)?;
                let grads = model.params.gradients(&p, &grads);
                adam.step(&mut model.params, &grads)?;
                let r = &l.report;
                let n = r.events as f64;
                sums[0] += r.total * n;
                sums[1] += r.nll * n;
                sums[2] += r.kl * n;
                sums[3] += r.mark * n;
                events += r.events;
                Ok(())
            })();
            if let Err(error) = step_result {
                model.params.copy_from(&best);
                return Err(Box::new(Diverged {
                    error,
                    partial: TrainOutcome {
                        model,
                        history,
                        best_epoch,
                        best_val_nll: best_val,
                    },
                }));
            }
        }
        let val = match eval_nll(&model, val_data, cfg.val_samples, cfg.seed) {
            Ok(v) => v,
            Err(error) => {
                model.params.copy_from(&best);
                return Err(Box::new(Diverged {
                    error,
                    partial: TrainOutcome {
                        model,
                        history,
                        best_epoch,
                        best_val_nll: best_val,
                    },
                }));
            }
        };
        let n = events.max(1) as f64;
        let rec = EpochRecord {
            epoch,
            train_loss: sums[0] / n,
            train_nll: sums[1] / n,
            train_kl: sums[2] / n,
            train_mark: sums[3] / n,
            val_nll: val,
        };
        on_epoch(&rec);
        history.push(rec);
        if val < best_val {
            best_val = val;
            best_epoch = epoch;
            best = model.params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    model.params.copy_from(&best);
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_val_nll: best_val,
    })
}

pub fn write_history(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub lr: f64,
    pub weight_decay: f64,
    pub best_val_nll: f64,
    pub best_epoch: usize,
    pub epochs: usize,
    pub diverged: bool,
}

pub struct GridResult {
    pub rows: Vec<GridRow>,
    /// Index of the selected row.
    pub best: usize,
    pub outcome: TrainOutcome,
}

/// Trains one model per `(lr, weight_decay)` pair with the template's
/// other settings and keeps the one with the lowest validation NLL.
/// Diverged cells are ranked by the best NLL they reached.
pub fn grid_search(
    model_cfg: &ModelConfig,
    template: &TrainConfig,
    lrs: &[f64],
    wds: &[f64],
    train_data: &Dataset,
    val_data: &Dataset,
) -> Result<GridResult> {
    let cells: Vec<(f64, f64)> = lrs
        .iter()
        .flat_map(|&lr| wds.iter().map(move |&wd| (lr, wd)))
        .collect();
    if cells.is_empty() {
        return Err(Error::Config("empty hyperparameter grid".into()));
    }
    let results: Vec<(GridRow, TrainOutcome)> = cells
        .par_iter()
        .map(|&(lr, wd)| {
            let cfg = TrainConfig {
                lr,
                weight_decay: wd,
                ..template.clone()
            };
            let (outcome, diverged) = match train(model_cfg, &cfg, train_data, val_data, |_| {}) {
                Ok(o) => (o, false),
                Err(d) => (d.partial, true),
            };
            let row = GridRow {
                lr,
                weight_decay: wd,
                best_val_nll: outcome.best_val_nll,
                best_epoch: outcome.best_epoch,
                epochs: outcome.history.len(),
                diverged,
            };
            (row, outcome)
        })
        .collect();
    let best = results
        .iter()
        .enumerate()
        .filter(|(_, (r, _))| r.best_val_nll.is_finite())
        .min_by(|a, b| a.1 .0.best_val_nll.total_cmp(&b.1 .0.best_val_nll))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::Config("every grid cell diverged".into()))?;
    let mut rows = Vec::with_capacity(results.len());
    let mut chosen = None;
    for (i, (row, outcome)) in results.into_iter().enumerate() {
        rows.push(row);
        if i == best {
            chosen = Some(outcome);
        }
    }
    Ok(GridResult {
        rows,
        best,
        outcome: chosen.unwrap(),
    })
}

pub fn write_leaderboard(path: impl AsRef<Path>, rows: &[GridRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
