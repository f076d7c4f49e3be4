//! Minibatch Adam training with early stopping.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Gradients, InputScaling, NetworkArchitecture, NetworkModel};
use crate::error::{Result, ScreenError};
use crate::seed::rng_from_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub validation_fraction: f64,
    pub rng_seed: u64,
    /// Map every input column onto `[-1, 1]` before fitting; the map is
    /// folded back into the first layer afterwards.
    #[serde(default = "default_true")]
    pub standardize: bool,
}

fn default_true() -> bool {
    true
}

impl TrainConfig {
    /// Regression fit: 800 epochs, batch 256, learning rate 0.005, patience 20.
    pub fn regressor_default() -> Self {
        Self {
            epochs: 800,
            batch_size: 256,
            learning_rate: 0.005,
            patience: 20,
            validation_fraction: 0.2,
            rng_seed: 0,
            standardize: true,
        }
    }

    /// Score fit: 400 epochs, batch 64, otherwise as the regressor.
    pub fn score_default() -> Self {
        Self {
            epochs: 400,
            batch_size: 64,
            ..Self::regressor_default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    /// Validation row count for `n` samples; errors unless both sides of the
    /// split are non-empty.
    pub fn validation_count(&self, n: usize) -> Result<usize> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(ScreenError::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(ScreenError::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(ScreenError::Config(format!(
                "validation_fraction must lie in (0, 1), got {}",
                self.validation_fraction
            )));
        }
        if n < 2 {
            return Err(ScreenError::Config(format!("need at least 2 samples to train, got {n}")));
        }
        let n_val = ((self.validation_fraction * n as f64).round() as usize).clamp(1, n - 1);
        Ok(n_val)
    }
}

/// A loss over a fixed sample indexed by row.
pub(crate) trait Objective {
    fn sample_count(&self) -> usize;
    fn batch_gradient(&self, model: &NetworkModel, rows: &[usize]) -> Result<(f64, Gradients)>;
    fn loss(&self, model: &NetworkModel, rows: &[usize]) -> Result<f64>;
}

pub(crate) struct TrainOutcome {
    pub model: NetworkModel,
    pub best_epoch: usize,
    pub train_trace: Vec<f64>,
    pub val_trace: Vec<f64>,
}

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Gradients,
    v: Gradients,
}

impl Adam {
    fn new(model: &NetworkModel, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Gradients::zeros_like(model),
            v: Gradients::zeros_like(model),
        }
    }

    fn update(&mut self, model: &mut NetworkModel, g: &Gradients) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let (lr, eps) = (self.lr, self.eps);
        let step_of = |m: &mut f64, v: &mut f64, g: f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            lr * (*m / c1) / ((*v / c2).sqrt() + eps)
        };
        for l in 0..model.weights.len() {
            ndarray::Zip::from(&mut model.weights[l])
                .and(&mut self.m.weights[l])
                .and(&mut self.v.weights[l])
                .and(&g.weights[l])
                .for_each(|w, m, v, &gr| *w -= step_of(m, v, gr));
            ndarray::Zip::from(&mut model.biases[l])
                .and(&mut self.m.biases[l])
                .and(&mut self.v.biases[l])
                .and(&g.biases[l])
                .for_each(|b, m, v, &gr| *b -= step_of(m, v, gr));
        }
    }
}

/// Runs minibatch Adam on `objective` from `init` and returns the checkpoint
/// with the lowest validation loss.
///
/// The initial model is itself a checkpoint candidate (epoch 0). With
/// `exact_train_loss`, the training loss is recomputed on the full training
/// split each epoch and a checkpoint is only accepted if that loss does not
/// exceed the initial one; otherwise the running minibatch average is traced.
pub(crate) fn fit_objective<O: Objective>(
    init: NetworkModel,
    objective: &O,
    cfg: &TrainConfig,
    exact_train_loss: bool,
) -> Result<TrainOutcome> {
    let n = objective.sample_count();
    let n_val = cfg.validation_count(n)?;
    let mut rng = rng_from_seed(cfg.rng_seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let val_rows: Vec<usize> = order[n - n_val..].to_vec();
    let mut train_rows: Vec<usize> = order[..n - n_val].to_vec();

    let mut model = init;
    let initial_train = objective.loss(&model, &train_rows)?;
    let initial_val = objective.loss(&model, &val_rows)?;
    if !initial_train.is_finite() || !initial_val.is_finite() {
        return Err(ScreenError::DivergedTraining { epoch: 0 });
    }
    let mut best = model.clone();
    let mut best_val = initial_val;
    let mut best_epoch = 0;
    let mut train_trace = vec![initial_train];
    let mut val_trace = vec![initial_val];
    let mut adam = Adam::new(&model, cfg.learning_rate);

    for epoch in 1..=cfg.epochs {
        train_rows.shuffle(&mut rng);
        let mut running = 0.0;
        for batch in train_rows.chunks(cfg.batch_size) {
            let (loss, grad) = objective.batch_gradient(&model, batch)?;
            if !loss.is_finite() || !grad.is_finite() {
                return Err(ScreenError::DivergedTraining { epoch });
            }
            running += loss * batch.len() as f64;
            adam.update(&mut model, &grad);
        }
        let train_loss = if exact_train_loss {
            objective.loss(&model, &train_rows)?
        } else {
            running / train_rows.len() as f64
        };
        let val_loss = objective.loss(&model, &val_rows)?;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(ScreenError::DivergedTraining { epoch });
        }
        train_trace.push(train_loss);
        val_trace.push(val_loss);

        let admissible = !exact_train_loss || train_loss <= initial_train;
        if val_loss < best_val && admissible {
            best_val = val_loss;
            best = model.clone();
            best_epoch = epoch;
        } else if epoch - best_epoch > cfg.patience {
            break;
        }
    }
    Ok(TrainOutcome {
        model: best,
        best_epoch,
        train_trace,
        val_trace,
    })
}

struct SquaredError<'a> {
    inputs: ArrayView2<'a, f64>,
    targets: ArrayView1<'a, f64>,
}

impl SquaredError<'_> {
    fn gather(&self, rows: &[usize]) -> (Array2<f64>, Array1<f64>) {
        (
            self.inputs.select(Axis(0), rows),
            self.targets.select(Axis(0), rows),
        )
    }
}

impl Objective for SquaredError<'_> {
    fn sample_count(&self) -> usize {
        self.targets.len()
    }

    fn batch_gradient(&self, model: &NetworkModel, rows: &[usize]) -> Result<(f64, Gradients)> {
        let (x, y) = self.gather(rows);
        model.parameter_gradient(x.view(), y.view())
    }

    fn loss(&self, model: &NetworkModel, rows: &[usize]) -> Result<f64> {
        let (x, y) = self.gather(rows);
        let pred = model.predict(x.view())?;
        Ok(pred
            .iter()
            .zip(y.iter())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / rows.len() as f64)
    }
}

/// A fitted regression network with its training history.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressionFit {
    /// Network acting on raw (unstandardised) inputs.
    pub model: NetworkModel,
    pub scaling: InputScaling,
    pub best_epoch: usize,
    pub train_trace: Vec<f64>,
    pub val_trace: Vec<f64>,
}

/// Least-squares fit of a truncated ReLU network; see [`train_regressor_with_trace`].
pub fn train_regressor(
    inputs: ArrayView2<'_, f64>,
    targets: ArrayView1<'_, f64>,
    arch: NetworkArchitecture,
    cfg: &TrainConfig,
) -> Result<NetworkModel> {
    Ok(train_regressor_with_trace(inputs, targets, arch, cfg)?.model)
}

/// Least-squares fit returning the early-stopping checkpoint and loss traces.
pub fn train_regressor_with_trace(
    inputs: ArrayView2<'_, f64>,
    targets: ArrayView1<'_, f64>,
    arch: NetworkArchitecture,
    cfg: &TrainConfig,
) -> Result<RegressionFit> {
    arch.validate()?;
    if inputs.ncols() != arch.input_dim {
        return Err(ScreenError::Shape {
            expected: arch.input_dim,
            got: inputs.ncols(),
        });
    }
    if inputs.nrows() != targets.len() {
        return Err(ScreenError::Shape {
            expected: inputs.nrows(),
            got: targets.len(),
        });
    }
    if let Some(bad) = targets.iter().position(|v| !v.is_finite()) {
        return Err(ScreenError::DegenerateInput(format!("target {bad} is not finite")));
    }
    cfg.validation_count(inputs.nrows())?;

    let scaling = if cfg.standardize {
        InputScaling::fit(inputs)
    } else {
        InputScaling::identity(inputs.ncols())
    };
    let scaled = scaling.apply(inputs);
    let objective = SquaredError {
        inputs: scaled.view(),
        targets,
    };
    let mut rng = rng_from_seed(cfg.rng_seed ^ 0xA5A5_5A5A_0F0F_F0F0);
    let init = NetworkModel::init(arch, &mut rng)?;
    let outcome = fit_objective(init, &objective, cfg, true)?;
    let mut model = outcome.model;
    model.fold_input_scaling(&scaling)?;
    Ok(RegressionFit {
        model,
        scaling,
        best_epoch: outcome.best_epoch,
        train_trace: outcome.train_trace,
        val_trace: outcome.val_trace,
    })
}
