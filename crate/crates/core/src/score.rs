//! Score-function estimation by minimising the empirical null loss
//!
//! `R(α) = (1/n) Σ_i α(x_i)^2 - (2/n) Σ_{i ∈ I_h} α^s_j(x_i)`,
//!
//! where `α^s_j` is the smoothed derivative of `α` in the screened column and
//! `I_h` the interior rows. The loss involves neither the response nor `t`.
//! Inputs are laid out as `[conditioning..., x_j]`: the screened
//! coordinate is always the last column.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScreenError};
use crate::nn::{
    fit_objective, Gradients, InputScaling, NetworkArchitecture, NetworkModel, Objective,
    TrainConfig,
};
use crate::seed::rng_from_seed;
use crate::smoothing::{RiemannGrid, SmoothingSpec};

/// Rows of shifted inputs evaluated per forward pass when computing losses.
const LOSS_CHUNK_ROWS: usize = 256;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreFit {
    pub model: NetworkModel,
    pub spec: SmoothingSpec,
    /// Epoch-average minibatch loss; entry 0 is the initial model on the training split.
    pub loss_trace: Vec<f64>,
    pub validation_trace: Vec<f64>,
    pub best_epoch: usize,
}

/// Evaluates the null loss of `alpha` on `inputs` using the factored
/// midpoint form `(1/(nNh)) Σ_l K'(a_l) Σ_{i∈I_h} α(z_i, x_i - a_l h)`.
pub fn rnull_loss(alpha: &NetworkModel, inputs: ArrayView2<'_, f64>, spec: &SmoothingSpec) -> Result<f64> {
    let n = inputs.nrows();
    if n == 0 {
        return Err(ScreenError::Config("null loss needs at least one sample".into()));
    }
    if inputs.ncols() != alpha.input_dim() {
        return Err(ScreenError::Shape {
            expected: alpha.input_dim(),
            got: inputs.ncols(),
        });
    }
    let coord = inputs.ncols() - 1;
    let values = alpha.predict(inputs)?;
    let square_term = values.iter().map(|v| v * v).sum::<f64>() / n as f64;

    let interior: Vec<usize> = (0..n).filter(|&i| spec.is_interior(inputs[(i, coord)])).collect();
    let grid = spec.grid();
    let mut per_node = vec![0.0; grid.len()];
    for chunk in interior.chunks(LOSS_CHUNK_ROWS) {
        let base = inputs.select(Axis(0), chunk);
        for (l, &a) in grid.nodes.iter().enumerate() {
            let mut shifted = base.clone();
            shifted.column_mut(coord).mapv_inplace(|x| x - a * spec.bandwidth);
            per_node[l] += alpha.predict(shifted.view())?.sum();
        }
    }
    let derivative_term: f64 = per_node
        .iter()
        .zip(&grid.weights)
        .map(|(s, w)| s * w)
        .sum::<f64>()
        / n as f64;
    Ok(square_term - 2.0 * derivative_term)
}

/// Null loss over rows of standardised inputs, where a shift of `a h` in
/// original units is `a h / scale` in the last column.
struct NullLoss<'a> {
    inputs: ArrayView2<'a, f64>,
    interior: Vec<bool>,
    shifts: Vec<f64>,
    weights: Vec<f64>,
}

impl NullLoss<'_> {
    /// Stacks the base rows followed by every shifted copy of the interior rows.
    fn expand(&self, rows: &[usize]) -> (Array2<f64>, usize) {
        let coord = self.inputs.ncols() - 1;
        let interior: Vec<usize> = rows.iter().copied().filter(|&i| self.interior[i]).collect();
        let g = self.shifts.len();
        let mut stacked = Array2::zeros((rows.len() + interior.len() * g, self.inputs.ncols()));
        for (r, &i) in rows.iter().enumerate() {
            stacked.row_mut(r).assign(&self.inputs.row(i));
        }
        let mut r = rows.len();
        for &i in &interior {
            let base = self.inputs.row(i);
            for &shift in &self.shifts {
                let mut row = stacked.row_mut(r);
                row.assign(&base);
                row[coord] -= shift;
                r += 1;
            }
        }
        (stacked, interior.len())
    }

    fn loss_and_output_grad(&self, outputs: &Array1<f64>, m: usize, q: usize) -> (f64, Array1<f64>) {
        let g = self.weights.len();
        let inv = 1.0 / m as f64;
        let mut grad = Array1::zeros(outputs.len());
        let mut square = 0.0;
        for r in 0..m {
            square += outputs[r] * outputs[r];
            grad[r] = 2.0 * outputs[r] * inv;
        }
        let mut deriv = 0.0;
        for c in 0..q {
            for (l, &w) in self.weights.iter().enumerate() {
                let r = m + c * g + l;
                deriv += w * outputs[r];
                grad[r] = -2.0 * w * inv;
            }
        }
        ((square - 2.0 * deriv) * inv, grad)
    }
}

impl Objective for NullLoss<'_> {
    fn sample_count(&self) -> usize {
        self.inputs.nrows()
    }

    fn batch_gradient(&self, model: &NetworkModel, rows: &[usize]) -> Result<(f64, Gradients)> {
        let (stacked, q) = self.expand(rows);
        let cache = model.forward_cache(stacked.view())?;
        let level = model.truncation_level();
        let outputs = cache.raw_output().mapv(|v| v.clamp(-level, level));
        let (loss, grad) = self.loss_and_output_grad(&outputs, rows.len(), q);
        Ok((loss, model.backward(&cache, grad.view())))
    }

    fn loss(&self, model: &NetworkModel, rows: &[usize]) -> Result<f64> {
        let mut total = 0.0;
        for chunk in rows.chunks(LOSS_CHUNK_ROWS) {
            let (stacked, q) = self.expand(chunk);
            let outputs = model.predict(stacked.view())?;
            let (loss, _) = self.loss_and_output_grad(&outputs, chunk.len(), q);
            total += loss * chunk.len() as f64;
        }
        Ok(total / rows.len() as f64)
    }
}

/// Fits the score network `α̂` by minimising the null loss.
///
/// Returns the checkpoint with the lowest null loss on the validation split.
pub fn train_score(
    inputs: ArrayView2<'_, f64>,
    arch: NetworkArchitecture,
    cfg: &TrainConfig,
    spec: &SmoothingSpec,
) -> Result<ScoreFit> {
    arch.validate()?;
    if inputs.ncols() != arch.input_dim {
        return Err(ScreenError::Shape {
            expected: arch.input_dim,
            got: inputs.ncols(),
        });
    }
    cfg.validation_count(inputs.nrows())?;
    let coord = inputs.ncols() - 1;

    let scaling = if cfg.standardize {
        InputScaling::fit(inputs)
    } else {
        InputScaling::identity(inputs.ncols())
    };
    let scaled = scaling.apply(inputs);
    let grid = RiemannGrid::new(spec.grid_size, spec.bandwidth);
    let col_scale = scaling.scale[coord];
    let objective = NullLoss {
        inputs: scaled.view(),
        interior: inputs.column(coord).iter().map(|&x| spec.is_interior(x)).collect(),
        shifts: grid.nodes.iter().map(|a| a * spec.bandwidth / col_scale).collect(),
        weights: grid.weights.clone(),
    };
    let mut rng = rng_from_seed(cfg.rng_seed ^ 0x5C0E_5C0E_5C0E_5C0E);
    let init = NetworkModel::init(arch, &mut rng)?;
    let outcome = fit_objective(init, &objective, cfg, false)?;
    let mut model = outcome.model;
    model.fold_input_scaling(&scaling)?;
    Ok(ScoreFit {
        model,
        spec: *spec,
        loss_trace: outcome.train_trace,
        validation_trace: outcome.val_trace,
        best_epoch: outcome.best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smoothing::{smoothed_partial, smoothed_partials};
    use ndarray::array;
    use rand::Rng;

    fn constant_net(dim: usize, c: f64) -> NetworkModel {
        let arch = NetworkArchitecture::new(dim, 1, 2, 100.0).unwrap();
        let mut m = NetworkModel::zeros(arch).unwrap();
        m.biases[1][0] = c;
        m
    }

    /// `α(z, x) = x` for `|x| < 10`: relu(x + 10) - 10.
    fn linear_net() -> NetworkModel {
        let arch = NetworkArchitecture::new(2, 1, 1, 100.0).unwrap();
        NetworkModel::from_layers(
            arch,
            vec![array![[0.0, 1.0]], array![[1.0]]],
            vec![array![10.0], array![-10.0]],
        )
        .unwrap()
    }

    #[test]
    fn zero_and_constant_networks() {
        let spec = SmoothingSpec::new(0.2, 50, 1.0).unwrap();
        let x = array![[0.1, 0.2], [0.3, -0.5], [0.0, 0.95]];
        assert_eq!(rnull_loss(&constant_net(2, 0.0), x.view(), &spec).unwrap(), 0.0);
        let l = rnull_loss(&constant_net(2, 1.5), x.view(), &spec).unwrap();
        assert!((l - 2.25).abs() < 1e-12, "{l}");
    }

    #[test]
    fn linear_score_monte_carlo() {
        let mut rng = rng_from_seed(21);
        let x = Array2::from_shape_fn((10_000, 2), |_| rng.random_range(-1.0..1.0));
        let spec = SmoothingSpec::new(0.2, 50, 1.0).unwrap();
        let l = rnull_loss(&linear_net(), x.view(), &spec).unwrap();
        // E[x^2] - 2 P(|x| <= 1 - h) * 1
        let oracle = 1.0 / 3.0 - 2.0 * 0.8;
        assert!((l - oracle).abs() < 0.05, "{l} vs {oracle}");
    }

    #[test]
    fn factored_form_matches_per_sample_smoothing() {
        let arch = NetworkArchitecture::new(3, 2, 8, 100.0).unwrap();
        let alpha = NetworkModel::init(arch, &mut rng_from_seed(4)).unwrap();
        let mut rng = rng_from_seed(5);
        let x = Array2::from_shape_fn((200, 3), |_| rng.random_range(-1.0..1.0));
        let spec = SmoothingSpec::new(0.3, 50, 1.0).unwrap();
        let factored = rnull_loss(&alpha, x.view(), &spec).unwrap();

        let n = x.nrows() as f64;
        let mut square = 0.0;
        let mut deriv = 0.0;
        for row in x.rows() {
            let v = alpha.forward(row.as_slice().unwrap()).unwrap();
            square += v * v;
            if spec.is_interior(row[2]) {
                deriv += smoothed_partial(
                    |z, t| alpha.forward(&[z[0], z[1], t]).unwrap(),
                    &[row[0], row[1]],
                    row[2],
                    &spec,
                )
                .unwrap();
            }
        }
        let per_sample = square / n - 2.0 * deriv / n;
        assert!((factored - per_sample).abs() < 1e-10, "{factored} vs {per_sample}");
    }

    #[test]
    fn batch_objective_matches_public_loss() {
        let arch = NetworkArchitecture::new(2, 2, 6, 100.0).unwrap();
        let alpha = NetworkModel::init(arch, &mut rng_from_seed(6)).unwrap();
        let mut rng = rng_from_seed(7);
        let x = Array2::from_shape_fn((90, 2), |_| rng.random_range(-1.0..1.0));
        let spec = SmoothingSpec::new(0.25, 50, 1.0).unwrap();
        let grid = spec.grid();
        let objective = NullLoss {
            inputs: x.view(),
            interior: x.column(1).iter().map(|&v| spec.is_interior(v)).collect(),
            shifts: grid.nodes.iter().map(|a| a * spec.bandwidth).collect(),
            weights: grid.weights.clone(),
        };
        let rows: Vec<usize> = (0..90).collect();
        let via_objective = objective.loss(&alpha, &rows).unwrap();
        let direct = rnull_loss(&alpha, x.view(), &spec).unwrap();
        assert!((via_objective - direct).abs() < 1e-12);
    }

    #[test]
    fn score_loss_gradient_matches_finite_differences() {
        let arch = NetworkArchitecture::new(2, 2, 4, 100.0).unwrap();
        let alpha = NetworkModel::init(arch, &mut rng_from_seed(8)).unwrap();
        let mut rng = rng_from_seed(9);
        let x = Array2::from_shape_fn((20, 2), |_| rng.random_range(-1.0..1.0));
        let spec = SmoothingSpec::new(0.3, 10, 1.0).unwrap();
        let grid = spec.grid();
        let objective = NullLoss {
            inputs: x.view(),
            interior: x.column(1).iter().map(|&v| spec.is_interior(v)).collect(),
            shifts: grid.nodes.iter().map(|a| a * spec.bandwidth).collect(),
            weights: grid.weights.clone(),
        };
        let rows: Vec<usize> = (0..20).collect();
        let (_, grad) = objective.batch_gradient(&alpha, &rows).unwrap();
        let eps = 1e-5;
        for l in 0..alpha.weights.len() {
            for idx in 0..alpha.weights[l].len() {
                let (r, c) = (idx / alpha.weights[l].ncols(), idx % alpha.weights[l].ncols());
                let mut plus = alpha.clone();
                plus.weights[l][(r, c)] += eps;
                let mut minus = alpha.clone();
                minus.weights[l][(r, c)] -= eps;
                let fd = (objective.loss(&plus, &rows).unwrap() - objective.loss(&minus, &rows).unwrap())
                    / (2.0 * eps);
                let g = grad.weights[l][(r, c)];
                assert!((fd - g).abs() <= (1e-4 * g.abs()).max(1e-6), "layer {l} ({r},{c}): {fd} vs {g}");
            }
        }
    }

    #[test]
    fn degenerate_constant_column_still_trains() {
        let mut rng = rng_from_seed(10);
        let x = Array2::from_shape_fn((60, 2), |(_, c)| if c == 1 { 0.0 } else { rng.random_range(-1.0..1.0) });
        let spec = SmoothingSpec::new(1.0, 50, 1.0).unwrap();
        let arch = NetworkArchitecture::new(2, 2, 8, 100.0).unwrap();
        let cfg = TrainConfig {
            epochs: 10,
            ..TrainConfig::score_default()
        };
        let fit = train_score(x.view(), arch, &cfg, &spec).unwrap();
        assert!(fit.loss_trace.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn training_is_reproducible_and_response_free() {
        let mut rng = rng_from_seed(11);
        let x = Array2::from_shape_fn((120, 2), |_| rng.random_range(-1.0..1.0));
        let spec = SmoothingSpec::new(0.3, 20, 1.0).unwrap();
        let arch = NetworkArchitecture::new(2, 2, 8, 100.0).unwrap();
        let cfg = TrainConfig {
            epochs: 15,
            ..TrainConfig::score_default()
        }
        .with_seed(3);
        let a = train_score(x.view(), arch, &cfg, &spec).unwrap();
        let b = train_score(x.view(), arch, &cfg, &spec).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.loss_trace, b.loss_trace);
        let rows: Vec<usize> = (0..120).filter(|&i| spec.is_interior(x[(i, 1)])).collect();
        assert!(smoothed_partials(&a.model, x.view(), 1, &rows, &spec).is_ok());
    }
}
