//! One-step centering of the regression fit along the estimated score.

use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScreenError};
use crate::nn::NetworkModel;
use crate::smoothing::BatchFunction;

/// `δ̂ = Σ r_i s_i / Σ s_i^2`, the least-squares step along the score values.
///
/// Fails with [`ScreenError::DegenerateScore`] when every score value is zero.
pub fn delta_hat(residuals: ArrayView1<'_, f64>, score_values: ArrayView1<'_, f64>) -> Result<f64> {
    if residuals.len() != score_values.len() {
        return Err(ScreenError::Shape {
            expected: residuals.len(),
            got: score_values.len(),
        });
    }
    let denom = score_values.dot(&score_values);
    if denom <= 0.0 || !denom.is_finite() {
        return Err(ScreenError::DegenerateScore);
    }
    let delta = residuals.dot(&score_values) / denom;
    if !delta.is_finite() {
        return Err(ScreenError::DegenerateInput("centering step is not finite".into()));
    }
    Ok(delta)
}

/// `ǧ = ĝ + δ̂ α̂`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenteredEstimator {
    pub base: NetworkModel,
    pub score: NetworkModel,
    pub delta: f64,
    /// Set when the score vanished on the sample and `delta` was forced to 0.
    pub degenerate_score: bool,
}

/// Composes the centred estimator; a degenerate score yields `δ̂ = 0` and a flag.
pub fn center(base: NetworkModel, score: NetworkModel, delta: Result<f64>) -> Result<CenteredEstimator> {
    if base.input_dim() != score.input_dim() {
        return Err(ScreenError::Shape {
            expected: base.input_dim(),
            got: score.input_dim(),
        });
    }
    let (delta, degenerate_score) = match delta {
        Ok(d) => (d, false),
        Err(ScreenError::DegenerateScore) => (0.0, true),
        Err(e) => return Err(e),
    };
    Ok(CenteredEstimator {
        base,
        score,
        delta,
        degenerate_score,
    })
}

impl CenteredEstimator {
    /// Fits `δ̂` on `(inputs, targets)` and composes the estimator.
    pub fn fit(
        base: NetworkModel,
        score: NetworkModel,
        inputs: ArrayView2<'_, f64>,
        targets: ArrayView1<'_, f64>,
    ) -> Result<Self> {
        let residuals = &targets - &base.predict(inputs)?;
        let scores = score.predict(inputs)?;
        let delta = delta_hat(residuals.view(), scores.view());
        center(base, score, delta)
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        Ok(self.base.forward(x)? + self.delta * self.score.forward(x)?)
    }

    pub fn predict(&self, inputs: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        let mut out = self.base.predict(inputs)?;
        out.scaled_add(self.delta, &self.score.predict(inputs)?);
        Ok(out)
    }
}

impl BatchFunction for CenteredEstimator {
    fn input_dim(&self) -> usize {
        self.base.input_dim()
    }

    fn eval_batch(&self, inputs: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        self.predict(inputs)
    }
}
