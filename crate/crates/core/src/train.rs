//! Per-bag training with early stopping, and split evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Event, InstanceBag, Target};
use crate::mil::{accuracy, c_index, per_class_auc, MetricsReport};
use crate::model::{
    eval_seed, forward_prepared, loss_and_gradients, BagOutput, BagTopology, Model, ModelConfig, Prediction, Task,
};
use crate::optim::{RAdam, RAdamConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    #[default]
    ValLoss,
    ValCIndex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub monitor: Monitor,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            weight_decay: 0.05,
            max_epochs: 250,
            early_stop_patience: 20,
            monitor: Monitor::ValLoss,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |why: String| Err(Error::Config(why));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!(
                "weight decay {} must be finite and non-negative",
                self.weight_decay
            ));
        }
        if self.max_epochs == 0 || self.early_stop_patience >= self.max_epochs {
            return bad(format!(
                "patience {} must be below max epochs {}",
                self.early_stop_patience, self.max_epochs
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad("moment decays must lie in [0, 1) and eps be positive".into());
        }
        Ok(())
    }

    fn optimizer(&self) -> RAdamConfig {
        RAdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Configuration file for a training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Observation {
    Improved,
    Stale,
    Stop,
}

/// Tracks the best monitored value; lower is better. NaN never improves.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: None,
            stale: 0,
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }

    pub fn observe(&mut self, epoch: usize, value: f64) -> Observation {
        let improved = match self.best {
            None => !value.is_nan(),
            Some((_, b)) => value < b,
        };
        if improved {
            self.best = Some((epoch, value));
            self.stale = 0;
            Observation::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                Observation::Stop
            } else {
                Observation::Stale
            }
        }
    }
}

/// A bag with its graph and forest computed once.
#[derive(Debug, Clone)]
pub struct PreparedBag {
    pub bag: InstanceBag,
    pub topo: BagTopology,
}

pub fn prepare(bags: Vec<InstanceBag>, model: &Model) -> Result<Vec<PreparedBag>> {
    bags.into_iter()
        .map(|bag| {
            if bag.feature_dim() != model.config.input_dim {
                return Err(Error::dim("prepare", &[model.config.input_dim], &[bag.feature_dim()]));
            }
            let topo = BagTopology::build(&bag, &model.config)?;
            Ok(PreparedBag { bag, topo })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    /// Per-bag outputs sorted by bag id.
    pub outputs: Vec<(String, BagOutput)>,
}

/// Runs every bag with its id-derived rng and aggregates metrics.
/// Undefined metrics are left absent.
pub fn evaluate_prepared(model: &Model, bags: &[PreparedBag]) -> Result<Evaluation> {
    if bags.is_empty() {
        return Err(Error::Validation("cannot evaluate an empty split".into()));
    }
    let mut rows = Vec::with_capacity(bags.len());
    for pb in bags {
        let mut rng = ChaCha8Rng::seed_from_u64(eval_seed(&pb.bag.bag_id));
        let out = forward_prepared(model, &pb.bag, &pb.topo, &mut rng)?;
        let loss = out.loss(pb.bag.target)?;
        rows.push((pb.bag.bag_id.clone(), pb.bag.target, out, loss));
    }
    rows.sort_by(|a, b| a.0.cmp(&b.0));
    let mut report = MetricsReport {
        bags: rows.len(),
        loss: Some(rows.iter().map(|r| r.3).sum::<f64>() / rows.len() as f64),
        ..Default::default()
    };
    match model.config.task {
        Task::Classification { .. } => {
            let mut probs = Vec::new();
            let mut labels = Vec::new();
            for (_, target, out, _) in &rows {
                if let (Target::Class(y), Prediction::Class { probs: p }) = (target, &out.prediction) {
                    probs.push(p.clone());
                    labels.push(*y);
                }
            }
            report.accuracy = Some(accuracy(&probs, &labels)?);
            if let Ok(per) = per_class_auc(&probs, &labels) {
                report.auc = Some(per.iter().sum::<f64>() / per.len() as f64);
                report.class_auc = per;
            }
        }
        Task::Survival { .. } => {
            let mut risks = Vec::new();
            let mut times = Vec::new();
            let mut events: Vec<Event> = Vec::new();
            for (_, target, out, _) in &rows {
                if let (Target::Survival { time_bin, event }, Prediction::Survival { risk, .. }) =
                    (target, &out.prediction)
                {
                    risks.push(*risk);
                    times.push(*time_bin as f64);
                    events.push(*event);
                }
            }
            report.c_index = c_index(&risks, &times, &events).ok();
        }
    }
    Ok(Evaluation {
        report,
        outputs: rows.into_iter().map(|(id, _, out, _)| (id, out)).collect(),
    })
}

pub fn evaluate(model: &Model, bags: Vec<InstanceBag>) -> Result<Evaluation> {
    evaluate_prepared(model, &prepare(bags, model)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub val_auc: Option<f64>,
    pub val_c_index: Option<f64>,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (1-based).
    pub best_epoch: usize,
    pub best_value: f64,
    pub steps: u64,
}

fn monitored(monitor: Monitor, report: &MetricsReport) -> f64 {
    match monitor {
        Monitor::ValLoss => report.loss.unwrap_or(f64::NAN),
        Monitor::ValCIndex => report.c_index.map_or(f64::NAN, |c| -c),
    }
}

pub fn train(
    model: &mut Model,
    train_set: &[PreparedBag],
    val_set: &[PreparedBag],
    cfg: &TrainConfig,
) -> Result<History> {
    train_with(model, train_set, val_set, cfg, |_| {})
}

/// One bag per optimiser step, bag order reshuffled each epoch. After each
/// epoch the monitor is evaluated on `val_set`; the best parameters are
/// restored before returning.
pub fn train_with(
    model: &mut Model,
    train_set: &[PreparedBag],
    val_set: &[PreparedBag],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<History> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Validation("train and val splits must be non-empty".into()));
    }
    if cfg.monitor == Monitor::ValCIndex && !matches!(model.config.task, Task::Survival { .. }) {
        return Err(Error::Config("val_c_index needs a survival task".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = RAdam::new(cfg.optimizer(), model.params.values());
    let mut stopper = EarlyStopper::new(cfg.early_stop_patience);
    let mut best_params = model.params.clone();
    let mut epochs = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let pb = &train_set[i];
            let (loss, grads) = loss_and_gradients(model, &pb.bag, &pb.topo, &mut rng).map_err(|e| match e {
                Error::Numeric { op, .. } => Error::Numeric {
                    op,
                    step: opt.steps_taken() as usize,
                },
                other => other,
            })?;
            opt.step(model.params.values_mut(), &grads);
            total += loss;
        }
        let report = evaluate_prepared(model, val_set)?.report;
        let observation = stopper.observe(epoch, monitored(cfg.monitor, &report));
        if observation == Observation::Improved {
            best_params = model.params.clone();
        }
        let record = EpochRecord {
            epoch,
            train_loss: total / train_set.len() as f64,
            val_loss: report.loss,
            val_accuracy: report.accuracy,
            val_auc: report.auc,
            val_c_index: report.c_index,
            improved: observation == Observation::Improved,
        };
        on_epoch(&record);
        epochs.push(record);
        if observation == Observation::Stop {
            break;
        }
    }
    model.params = best_params;
    let (best_epoch, best_value) = stopper.best().unwrap_or((0, f64::NAN));
    Ok(History {
        epochs,
        best_epoch,
        best_value,
        steps: opt.steps_taken(),
    })
}
