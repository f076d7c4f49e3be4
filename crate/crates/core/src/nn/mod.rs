//! Fully connected ReLU networks with a truncated scalar output.
//!
//! A network with `L` hidden layers of common width `k` maps `R^d -> R` as
//! `T_M(W_{L+1} relu(... relu(W_1 x + b_1) ...) + b_{L+1})`, where
//! `T_M(v) = sign(v) min(|v|, M)`. Evaluation is batched: rows of an input
//! matrix are samples.

mod sawtooth;
mod train;

pub use sawtooth::{build_sawtooth, sawtooth_norms, SawtoothNorms};
pub use train::{train_regressor, train_regressor_with_trace, RegressionFit, TrainConfig};
pub(crate) use train::{fit_objective, Objective};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScreenError};

/// Shape and output truncation of a network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkArchitecture {
    pub input_dim: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub truncation_level: f64,
}

impl NetworkArchitecture {
    pub fn new(
        input_dim: usize,
        hidden_layers: usize,
        hidden_width: usize,
        truncation_level: f64,
    ) -> Result<Self> {
        let arch = Self {
            input_dim,
            hidden_layers,
            hidden_width,
            truncation_level,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_layers == 0 || self.hidden_width == 0 {
            return Err(ScreenError::Config(format!(
                "architecture needs positive input_dim, hidden_layers and hidden_width, got {self:?}"
            )));
        }
        if !(self.truncation_level > 0.0) {
            return Err(ScreenError::Config(format!(
                "truncation level must be positive, got {}",
                self.truncation_level
            )));
        }
        Ok(())
    }

    /// `(rows, cols)` of every weight matrix, input layer first.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.hidden_layers + 1);
        shapes.push((self.hidden_width, self.input_dim));
        for _ in 1..self.hidden_layers {
            shapes.push((self.hidden_width, self.hidden_width));
        }
        shapes.push((1, self.hidden_width));
        shapes
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_shapes().iter().map(|(r, c)| r * c + r).sum()
    }
}

/// `T_M(v) = sign(v) min(|v|, M)`.
#[inline]
pub fn truncate(v: f64, level: f64) -> f64 {
    v.clamp(-level, level)
}

/// Trained (or constructed) network weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "NetworkModelRepr", try_from = "NetworkModelRepr")]
pub struct NetworkModel {
    pub architecture: NetworkArchitecture,
    /// Layer `l` maps `cols -> rows`; stored `(out, in)`.
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

/// Intermediate values kept from a batched forward pass.
pub struct ForwardCache {
    /// `activations[0]` is the input batch; `activations[l]` the output of hidden layer `l`.
    activations: Vec<Array2<f64>>,
    raw_output: Array1<f64>,
}

impl ForwardCache {
    /// Network output before truncation.
    pub fn raw_output(&self) -> ArrayView1<'_, f64> {
        self.raw_output.view()
    }
}

/// Parameter gradient with the same layout as [`NetworkModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &NetworkModel) -> Self {
        Self {
            weights: model.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: model.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

impl NetworkModel {
    /// All-zero weights and biases; evaluates to 0 everywhere.
    pub fn zeros(architecture: NetworkArchitecture) -> Result<Self> {
        architecture.validate()?;
        let shapes = architecture.layer_shapes();
        Ok(Self {
            architecture,
            weights: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            biases: shapes.iter().map(|&(r, _)| Array1::zeros(r)).collect(),
        })
    }

    /// Gaussian fan-in initialisation with variance `2 / fan_in`, zero biases.
    pub fn init<R: Rng + ?Sized>(architecture: NetworkArchitecture, rng: &mut R) -> Result<Self> {
        let mut model = Self::zeros(architecture)?;
        for w in model.weights.iter_mut() {
            let sd = (2.0 / w.ncols() as f64).sqrt();
            w.mapv_inplace(|_| sd * rng.sample::<f64, _>(StandardNormal));
        }
        Ok(model)
    }

    /// Builds a model from explicit layers, checking the shape chain.
    pub fn from_layers(
        architecture: NetworkArchitecture,
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
    ) -> Result<Self> {
        let model = Self {
            architecture,
            weights,
            biases,
        };
        model.shape_audit()?;
        Ok(model)
    }

    /// Verifies that every layer matches the architecture.
    pub fn shape_audit(&self) -> Result<()> {
        self.architecture.validate()?;
        let shapes = self.architecture.layer_shapes();
        if self.weights.len() != shapes.len() || self.biases.len() != shapes.len() {
            return Err(ScreenError::Shape {
                expected: shapes.len(),
                got: self.weights.len().min(self.biases.len()),
            });
        }
        for ((w, b), &(rows, cols)) in self.weights.iter().zip(&self.biases).zip(&shapes) {
            if w.dim() != (rows, cols) {
                return Err(ScreenError::Shape {
                    expected: rows * cols,
                    got: w.len(),
                });
            }
            if b.len() != rows {
                return Err(ScreenError::Shape {
                    expected: rows,
                    got: b.len(),
                });
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.architecture.input_dim
    }

    pub fn truncation_level(&self) -> f64 {
        self.architecture.truncation_level
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.input_dim() {
            return Err(ScreenError::Shape {
                expected: self.input_dim(),
                got: len,
            });
        }
        Ok(())
    }

    /// Untruncated output for a single input.
    pub fn forward_raw(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x.len())?;
        let mut act: Vec<f64> = x.to_vec();
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut next = b.to_vec();
            for (r, out) in next.iter_mut().enumerate() {
                let row = w.row(r);
                let mut acc = 0.0;
                for (wv, av) in row.iter().zip(&act) {
                    acc += wv * av;
                }
                *out += acc;
                if l < last && *out < 0.0 {
                    *out = 0.0;
                }
            }
            act = next;
        }
        Ok(act[0])
    }

    /// Truncated network output for a single input.
    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        Ok(truncate(self.forward_raw(x)?, self.truncation_level()))
    }

    /// Batched forward pass that keeps what backpropagation needs.
    pub fn forward_cache(&self, inputs: ArrayView2<'_, f64>) -> Result<ForwardCache> {
        self.check_input(inputs.ncols())?;
        let last = self.weights.len() - 1;
        let mut activations = Vec::with_capacity(self.weights.len());
        activations.push(inputs.to_owned());
        for l in 0..last {
            let mut z = activations[l].dot(&self.weights[l].t());
            z += &self.biases[l];
            z.mapv_inplace(|v| v.max(0.0));
            activations.push(z);
        }
        let out = activations[last].dot(&self.weights[last].t());
        let raw_output = out.column(0).mapv(|v| v + self.biases[last][0]);
        Ok(ForwardCache {
            activations,
            raw_output,
        })
    }

    /// Batched untruncated outputs, without retaining intermediates.
    pub fn predict_raw(&self, inputs: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        self.check_input(inputs.ncols())?;
        let last = self.weights.len() - 1;
        let mut act = inputs.dot(&self.weights[0].t());
        act += &self.biases[0];
        act.mapv_inplace(|v| v.max(0.0));
        for l in 1..last {
            let mut z = act.dot(&self.weights[l].t());
            z += &self.biases[l];
            z.mapv_inplace(|v| v.max(0.0));
            act = z;
        }
        let out = act.dot(&self.weights[last].t());
        Ok(out.column(0).mapv(|v| v + self.biases[last][0]))
    }

    /// Batched truncated outputs.
    pub fn predict(&self, inputs: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        let level = self.truncation_level();
        Ok(self.predict_raw(inputs)?.mapv(|v| truncate(v, level)))
    }

    /// Backpropagates `d loss / d output` (per row, w.r.t. the truncated
    /// output) to the parameters.
    ///
    /// Truncation passes gradients straight through inside `(-M, M)` and
    /// blocks them outside.
    pub fn backward(&self, cache: &ForwardCache, output_grad: ArrayView1<'_, f64>) -> Gradients {
        let level = self.truncation_level();
        let last = self.weights.len() - 1;
        let delta_out: Array1<f64> = Zip::from(&cache.raw_output)
            .and(&output_grad)
            .map_collect(|&raw, &g| if raw.abs() < level { g } else { 0.0 });

        let mut grads = Gradients::zeros_like(self);
        // output layer
        let a_last = &cache.activations[last];
        grads.weights[last]
            .row_mut(0)
            .assign(&a_last.t().dot(&delta_out));
        grads.biases[last][0] = delta_out.sum();

        // delta for the last hidden layer: (n x k)
        let w_out = self.weights[last].row(0);
        let mut delta = Array2::from_shape_fn(a_last.raw_dim(), |(i, k)| {
            if a_last[(i, k)] > 0.0 {
                delta_out[i] * w_out[k]
            } else {
                0.0
            }
        });
        for l in (0..last).rev() {
            let a_prev = &cache.activations[l];
            grads.weights[l] = delta.t().dot(a_prev);
            grads.biases[l] = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut next = delta.dot(&self.weights[l]);
                Zip::from(&mut next).and(a_prev).for_each(|d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = next;
            }
        }
        grads
    }

    /// Mean squared error over a batch and its exact parameter gradient.
    pub fn parameter_gradient(
        &self,
        inputs: ArrayView2<'_, f64>,
        targets: ArrayView1<'_, f64>,
    ) -> Result<(f64, Gradients)> {
        if inputs.nrows() == 0 {
            return Err(ScreenError::Config("empty batch".into()));
        }
        if inputs.nrows() != targets.len() {
            return Err(ScreenError::Shape {
                expected: inputs.nrows(),
                got: targets.len(),
            });
        }
        let cache = self.forward_cache(inputs)?;
        let level = self.truncation_level();
        let n = targets.len() as f64;
        let residual: Array1<f64> = Zip::from(&cache.raw_output)
            .and(&targets)
            .map_collect(|&raw, &y| truncate(raw, level) - y);
        let loss = residual.iter().map(|r| r * r).sum::<f64>() / n;
        let output_grad = residual.mapv(|r| 2.0 * r / n);
        Ok((loss, self.backward(&cache, output_grad.view())))
    }

    /// Partial derivative of the (truncated) output with respect to input
    /// coordinate `coord`.
    ///
    /// ReLU uses the convention `relu'(0) = 0`; the result is 0 whenever the
    /// untruncated output lies outside `(-M, M)`.
    pub fn input_partial(&self, x: &[f64], coord: usize) -> Result<f64> {
        if coord >= self.input_dim() {
            return Err(ScreenError::Shape {
                expected: self.input_dim(),
                got: coord + 1,
            });
        }
        Ok(self.input_gradient(x)?[coord])
    }

    /// Gradient of the truncated output with respect to the whole input.
    pub fn input_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x.len())?;
        let last = self.weights.len() - 1;
        let mut masks: Vec<Vec<bool>> = Vec::with_capacity(last);
        let mut act: Vec<f64> = x.to_vec();
        for l in 0..last {
            let w = &self.weights[l];
            let mut next = self.biases[l].to_vec();
            for (r, out) in next.iter_mut().enumerate() {
                *out += w.row(r).iter().zip(&act).map(|(a, b)| a * b).sum::<f64>();
            }
            masks.push(next.iter().map(|&v| v > 0.0).collect());
            for v in next.iter_mut() {
                *v = v.max(0.0);
            }
            act = next;
        }
        let raw = self.biases[last][0]
            + self.weights[last]
                .row(0)
                .iter()
                .zip(&act)
                .map(|(a, b)| a * b)
                .sum::<f64>();
        if raw.abs() > self.truncation_level() {
            return Ok(vec![0.0; self.input_dim()]);
        }
        let mut g: Vec<f64> = self.weights[last].row(0).to_vec();
        for l in (0..last).rev() {
            let w = &self.weights[l];
            let mut prev = vec![0.0; w.ncols()];
            for (r, (&gr, &on)) in g.iter().zip(&masks[l]).enumerate() {
                if on && gr != 0.0 {
                    for (p, &wv) in prev.iter_mut().zip(w.row(r).iter()) {
                        *p += gr * wv;
                    }
                }
            }
            g = prev;
        }
        Ok(g)
    }

    /// Rewrites the first layer so that the model evaluated on raw inputs `x`
    /// equals the current model evaluated on `(x - center) / scale`.
    pub fn fold_input_scaling(&mut self, scaling: &InputScaling) -> Result<()> {
        self.check_input(scaling.center.len())?;
        self.check_input(scaling.scale.len())?;
        let w = &mut self.weights[0];
        for (c, &s) in scaling.scale.iter().enumerate() {
            w.column_mut(c).mapv_inplace(|v| v / s);
        }
        let shift = w.dot(&Array1::from(scaling.center.clone()));
        self.biases[0] -= &shift;
        Ok(())
    }
}

/// Per-column affine map `x -> (x - center) / scale` taking each column's
/// empirical range onto `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputScaling {
    pub fn identity(dim: usize) -> Self {
        Self {
            center: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Mid-range centring and half-range scaling; constant columns keep scale 1.
    pub fn fit(inputs: ArrayView2<'_, f64>) -> Self {
        let mut center = Vec::with_capacity(inputs.ncols());
        let mut scale = Vec::with_capacity(inputs.ncols());
        for col in inputs.columns() {
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let half = 0.5 * (hi - lo);
            if half > 0.0 && half.is_finite() {
                center.push(0.5 * (hi + lo));
                scale.push(half);
            } else {
                center.push(if lo.is_finite() { lo } else { 0.0 });
                scale.push(1.0);
            }
        }
        Self { center, scale }
    }

    pub fn apply(&self, inputs: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = inputs.to_owned();
        for (c, mut col) in out.columns_mut().into_iter().enumerate() {
            let (m, s) = (self.center[c], self.scale[c]);
            col.mapv_inplace(|v| (v - m) / s);
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct NetworkModelRepr {
    architecture: NetworkArchitecture,
    weights: Vec<Vec<Vec<f64>>>,
    biases: Vec<Vec<f64>>,
}

impl From<NetworkModel> for NetworkModelRepr {
    fn from(m: NetworkModel) -> Self {
        Self {
            architecture: m.architecture,
            weights: m
                .weights
                .iter()
                .map(|w| w.rows().into_iter().map(|r| r.to_vec()).collect())
                .collect(),
            biases: m.biases.iter().map(|b| b.to_vec()).collect(),
        }
    }
}

impl TryFrom<NetworkModelRepr> for NetworkModel {
    type Error = ScreenError;

    fn try_from(repr: NetworkModelRepr) -> Result<Self> {
        let mut weights = Vec::with_capacity(repr.weights.len());
        for rows in repr.weights {
            let nrows = rows.len();
            let ncols = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|r| r.len() != ncols) {
                return Err(ScreenError::Schema("ragged weight matrix".into()));
            }
            let flat: Vec<f64> = rows.into_iter().flatten().collect();
            weights.push(
                Array2::from_shape_vec((nrows, ncols), flat)
                    .map_err(|e| ScreenError::Schema(e.to_string()))?,
            );
        }
        let biases = repr.biases.into_iter().map(Array1::from).collect();
        NetworkModel::from_layers(repr.architecture, weights, biases)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;
    use ndarray::array;

    fn relu_net(level: f64) -> NetworkModel {
        let arch = NetworkArchitecture::new(1, 1, 1, level).unwrap();
        NetworkModel::from_layers(
            arch,
            vec![array![[1.0]], array![[1.0]]],
            vec![array![0.0], array![0.0]],
        )
        .unwrap()
    }

    #[test]
    fn zero_network_is_zero() {
        let arch = NetworkArchitecture::new(3, 2, 4, 5.0).unwrap();
        let model = NetworkModel::zeros(arch).unwrap();
        assert_eq!(model.forward(&[1.0, -2.0, 3.0]).unwrap(), 0.0);
        for c in 0..3 {
            assert_eq!(model.input_partial(&[0.3, 0.1, -0.7], c).unwrap(), 0.0);
        }
    }

    #[test]
    fn single_relu() {
        let model = relu_net(10.0);
        assert_eq!(model.forward(&[-3.0]).unwrap(), 0.0);
        assert_eq!(model.forward(&[4.0]).unwrap(), 4.0);
        assert_eq!(model.input_partial(&[4.0], 0).unwrap(), 1.0);
        assert_eq!(model.input_partial(&[-3.0], 0).unwrap(), 0.0);
    }

    #[test]
    fn truncation_caps_output_and_kills_derivative() {
        let model = relu_net(2.5);
        assert_eq!(model.forward(&[4.0]).unwrap(), 2.5);
        assert_eq!(model.input_partial(&[4.0], 0).unwrap(), 0.0);
    }

    #[test]
    fn wrong_input_length_is_a_shape_error() {
        let model = relu_net(1.0);
        assert!(matches!(
            model.forward(&[1.0, 2.0]),
            Err(ScreenError::Shape { expected: 1, got: 2 })
        ));
        assert!(model.input_partial(&[1.0], 1).is_err());
    }

    #[test]
    fn architecture_invariants() {
        assert!(NetworkArchitecture::new(0, 1, 1, 1.0).is_err());
        assert!(NetworkArchitecture::new(1, 0, 1, 1.0).is_err());
        assert!(NetworkArchitecture::new(1, 1, 0, 1.0).is_err());
        assert!(NetworkArchitecture::new(1, 1, 1, 0.0).is_err());
        let arch = NetworkArchitecture::new(5, 3, 16, 1.0).unwrap();
        assert_eq!(arch.layer_shapes(), vec![(16, 5), (16, 16), (16, 16), (1, 16)]);
    }

    #[test]
    fn zero_residual_gives_zero_output_bias_gradient() {
        let arch = NetworkArchitecture::new(2, 2, 3, 5.0).unwrap();
        let model = NetworkModel::zeros(arch).unwrap();
        let (loss, g) = model
            .parameter_gradient(array![[0.4, -1.0]].view(), array![0.0].view())
            .unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(g.biases[2][0], 0.0);
    }

    #[test]
    fn hand_differentiated_linear_model() {
        // out = w * relu(x) with w = 0; loss (1 - 2w)^2 at x = 2
        let arch = NetworkArchitecture::new(1, 1, 1, 100.0).unwrap();
        let model = NetworkModel::from_layers(
            arch,
            vec![array![[1.0]], array![[0.0]]],
            vec![array![0.0], array![0.0]],
        )
        .unwrap();
        let (loss, g) = model
            .parameter_gradient(array![[2.0]].view(), array![1.0].view())
            .unwrap();
        assert_eq!(loss, 1.0);
        assert_eq!(g.weights[1][(0, 0)], -4.0);
    }

    #[test]
    fn batched_and_scalar_forward_agree() {
        let arch = NetworkArchitecture::new(3, 3, 8, 0.7).unwrap();
        let model = NetworkModel::init(arch, &mut rng_from_seed(5)).unwrap();
        let inputs = array![[0.1, 0.2, 0.3], [-1.0, 0.5, 2.0], [3.0, -2.0, 0.0]];
        let batch = model.predict(inputs.view()).unwrap();
        for (i, row) in inputs.rows().into_iter().enumerate() {
            let single = model.forward(row.as_slice().unwrap()).unwrap();
            assert!((single - batch[i]).abs() < 1e-12);
            assert!(single.abs() <= 0.7);
        }
    }

    #[test]
    fn folding_scaling_preserves_function() {
        let arch = NetworkArchitecture::new(2, 2, 6, 50.0).unwrap();
        let model = NetworkModel::init(arch, &mut rng_from_seed(9)).unwrap();
        let raw = array![[3.0, -10.0], [5.0, 20.0], [4.0, 0.0]];
        let scaling = InputScaling::fit(raw.view());
        let scaled = scaling.apply(raw.view());
        let mut folded = model.clone();
        folded.fold_input_scaling(&scaling).unwrap();
        let a = model.predict(scaled.view()).unwrap();
        let b = folded.predict(raw.view()).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn json_round_trip_uses_nested_arrays() {
        let arch = NetworkArchitecture::new(2, 1, 2, 3.0).unwrap();
        let model = NetworkModel::init(arch, &mut rng_from_seed(1)).unwrap();
        let json = serde_json::to_value(&model).unwrap();
        assert_eq!(json["weights"][0].as_array().unwrap().len(), 2);
        assert_eq!(json["weights"][0][0].as_array().unwrap().len(), 2);
        let back: NetworkModel = serde_json::from_value(json).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn malformed_json_model_fails_shape_audit() {
        let json = serde_json::json!({
            "architecture": {"input_dim": 2, "hidden_layers": 1, "hidden_width": 2, "truncation_level": 1.0},
            "weights": [[[1.0, 2.0]], [[1.0, 1.0]]],
            "biases": [[0.0, 0.0], [0.0]]
        });
        assert!(serde_json::from_value::<NetworkModel>(json).is_err());
    }
}
