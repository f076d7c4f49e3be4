//! Moment-generating-function statistics and the three screening tests.

mod quantile;

pub use quantile::{chi2_1_critical, normal_quantile, two_sided_critical};

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScreenError};

/// Smallest linear half-length of Ψ.
pub const GAMMA_FLOOR: f64 = 5.0;

/// Bounded, continuously differentiable truncation that is the identity on `[-γ, γ]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationPsi {
    pub gamma: f64,
}

impl TruncationPsi {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(ScreenError::Config(format!("psi gamma must be positive, got {gamma}")));
        }
        Ok(Self { gamma })
    }

    /// `max(5, 4 max_i |d_i|)`.
    pub fn from_derivatives(derivs: &[f64]) -> Self {
        let peak = derivs.iter().fold(0.0f64, |a, d| a.max(d.abs()));
        let gamma = if peak.is_finite() { (4.0 * peak).max(GAMMA_FLOOR) } else { GAMMA_FLOOR };
        Self { gamma }
    }

    pub fn eval(&self, t: f64) -> f64 {
        if t.abs() <= self.gamma {
            return t;
        }
        let edge = self.gamma.copysign(t);
        edge - 0.5 + 1.0 / (1.0 + (-4.0 * (t - edge)).exp())
    }

    pub fn deriv(&self, t: f64) -> f64 {
        if t.abs() <= self.gamma {
            return 1.0;
        }
        let s = 1.0 / (1.0 + (-4.0 * (t - self.gamma.copysign(t))).exp());
        4.0 * s * (1.0 - s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TestConfig {
    /// `t` of the fixed-t test.
    pub t: f64,
    pub t_set: Vec<f64>,
    pub alpha: f64,
    /// Weights of the square statistic, one per element of `t_set`.
    pub weights: Vec<f64>,
}

impl Default for TestConfig {
    fn default() -> Self {
        Self {
            t: 1.0,
            t_set: vec![-1.25, -0.5, 0.5, 1.25],
            alpha: 0.05,
            weights: vec![1.0; 4],
        }
    }
}

impl TestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t == 0.0 || !self.t.is_finite() {
            return Err(ScreenError::Config("fixed t must be finite and nonzero".into()));
        }
        if self.t_set.is_empty() || self.t_set.iter().any(|&t| t == 0.0 || !t.is_finite()) {
            return Err(ScreenError::Config("t set must be non-empty and exclude 0".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(ScreenError::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.weights.len() != self.t_set.len() || self.weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
            return Err(ScreenError::Config("weights must be non-negative, one per t".into()));
        }
        if self.weights.iter().sum::<f64>() <= 0.0 {
            return Err(ScreenError::Config("weights must not all be zero".into()));
        }
        Ok(())
    }
}

/// `(1/n) Σ_i [exp(t Ψ(d_i)) - 1]` over the interior derivatives `derivs`; the divisor is the full `n`.
pub fn eta_check(derivs: &[f64], n: usize, t: f64, psi: &TruncationPsi) -> f64 {
    derivs.iter().map(|&d| (t * psi.eval(d)).exp_m1()).sum::<f64>() / n as f64
}

/// Root mean square of `residual_i * score_i`.
pub fn variance_est(residuals: ArrayView1<'_, f64>, score_values: ArrayView1<'_, f64>) -> Result<f64> {
    if residuals.len() != score_values.len() {
        return Err(ScreenError::Shape {
            expected: residuals.len(),
            got: score_values.len(),
        });
    }
    if residuals.is_empty() {
        return Err(ScreenError::Config("variance needs at least one sample".into()));
    }
    let ss: f64 = residuals.iter().zip(score_values).map(|(r, s)| (r * s).powi(2)).sum();
    Ok((ss / residuals.len() as f64).sqrt())
}

/// One test: its statistic, the normalised interval endpoint, and the decision.
///
/// `ratio` and `reject` are `None` when the variance estimate is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub statistic: f64,
    pub ratio: Option<f64>,
    pub reject: Option<bool>,
}

impl TestOutcome {
    fn from_ratio(statistic: f64, ratio: Option<f64>) -> Self {
        Self {
            statistic,
            ratio,
            reject: ratio.map(|r| r > 1.0),
        }
    }
}

/// Fixed-t test: `z = sqrt(n) η / (t σ)`, ratio `|z| / z_{1-α/2}`.
///
/// With `σ = 0` the statistic is reported as 0 and no decision is made.
pub fn fixed_t_decision(eta: f64, variance: f64, t: f64, n: usize, alpha: f64) -> TestOutcome {
    if variance <= 0.0 {
        return TestOutcome::from_ratio(0.0, None);
    }
    let z = (n as f64).sqrt() * eta / (t * variance);
    TestOutcome::from_ratio(z, Some(z.abs() / two_sided_critical(alpha)))
}

/// Sup test: `Ẑ = sqrt(n) max_t |η_t / t|`, rejecting when `Ẑ / σ > z_{1-α/2}`.
pub fn sup_decision(etas: &[(f64, f64)], variance: f64, n: usize, alpha: f64) -> TestOutcome {
    let peak = etas.iter().fold(0.0f64, |a, &(t, eta)| a.max((eta / t).abs()));
    let stat = (n as f64).sqrt() * peak;
    let ratio = (variance > 0.0).then(|| stat / (two_sided_critical(alpha) * variance));
    TestOutcome::from_ratio(stat, ratio)
}

/// Weighted mean `n Σ w (η_t/t)^2 / Σ w` and the unnormalised sum `n Σ w (η_t/t)^2`.
pub fn square_statistic(etas: &[(f64, f64)], weights: &[f64], n: usize) -> (f64, f64) {
    let sum: f64 = etas
        .iter()
        .zip(weights)
        .map(|(&(t, eta), w)| w * (eta / t).powi(2))
        .sum::<f64>()
        * n as f64;
    (sum / weights.iter().sum::<f64>(), sum)
}

/// Square test: rejects when `χ² / σ^2 > χ²_{1,1-α}`; ratio `sqrt(χ²) / (z_{1-α/2} σ)`.
pub fn square_decision(etas: &[(f64, f64)], weights: &[f64], variance: f64, n: usize, alpha: f64) -> TestOutcome {
    let (stat, _) = square_statistic(etas, weights, n);
    let ratio = (variance > 0.0).then(|| stat.sqrt() / (two_sided_critical(alpha) * variance));
    TestOutcome::from_ratio(stat, ratio)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaEntry {
    pub t: f64,
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub alpha: f64,
    pub critical_value: f64,
    pub psi_gamma: f64,
    /// `η̌_t` at the fixed `t`.
    pub fixed_eta: EtaEntry,
    pub etas: Vec<EtaEntry>,
    pub variance: f64,
    pub degenerate_variance: bool,
    pub fixed_t: TestOutcome,
    pub sup: TestOutcome,
    pub square: TestOutcome,
    /// `n Σ_t w (η_t/t)^2` without division by `Σ w`.
    pub square_unnormalized: f64,
}

impl TestReport {
    /// Interval endpoints in the order fixed-t, sup, square.
    pub fn intervals(&self) -> [Option<f64>; 3] {
        [self.fixed_t.ratio, self.sup.ratio, self.square.ratio]
    }
}

/// Evaluates all three tests from the interior smoothed derivatives of the
/// centred fit, its residuals and the score values on the full sample.
pub fn evaluate_tests(
    derivs: &[f64],
    n: usize,
    residuals: ArrayView1<'_, f64>,
    score_values: ArrayView1<'_, f64>,
    cfg: &TestConfig,
    psi: &TruncationPsi,
) -> Result<TestReport> {
    cfg.validate()?;
    if derivs.len() > n {
        return Err(ScreenError::Config(format!("{} interior derivatives for n = {n}", derivs.len())));
    }
    let variance = variance_est(residuals, score_values)?;
    let fixed_eta = EtaEntry {
        t: cfg.t,
        eta: eta_check(derivs, n, cfg.t, psi),
    };
    let pairs: Vec<(f64, f64)> = cfg.t_set.iter().map(|&t| (t, eta_check(derivs, n, t, psi))).collect();
    let (_, square_unnormalized) = square_statistic(&pairs, &cfg.weights, n);
    Ok(TestReport {
        alpha: cfg.alpha,
        critical_value: two_sided_critical(cfg.alpha),
        psi_gamma: psi.gamma,
        fixed_t: fixed_t_decision(fixed_eta.eta, variance, cfg.t, n, cfg.alpha),
        sup: sup_decision(&pairs, variance, n, cfg.alpha),
        square: square_decision(&pairs, &cfg.weights, variance, n, cfg.alpha),
        fixed_eta,
        etas: pairs.into_iter().map(|(t, eta)| EtaEntry { t, eta }).collect(),
        variance,
        degenerate_variance: variance <= 0.0,
        square_unnormalized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn psi_examples() {
        let psi = TruncationPsi::new(2.0).unwrap();
        assert_eq!(psi.eval(1.5), 1.5);
        assert_eq!(psi.eval(2.0), 2.0);
        assert_eq!(psi.deriv(2.0), 1.0);
        assert!((psi.eval(1e6) - 2.5).abs() < 1e-12);
        assert!((psi.eval(-1e6) + 2.5).abs() < 1e-12);
        let eps = 1e-7;
        for edge in [2.0, -2.0] {
            let right = (psi.eval(edge + eps) - psi.eval(edge)) / eps;
            let left = (psi.eval(edge) - psi.eval(edge - eps)) / eps;
            assert!((right - 1.0).abs() < 1e-5 && (left - 1.0).abs() < 1e-5);
            assert!((psi.eval(edge + 1e-12) - psi.eval(edge - 1e-12)).abs() < 1e-11);
        }
    }

    #[test]
    fn gamma_rule() {
        assert_eq!(TruncationPsi::from_derivatives(&[0.1, -0.3]).gamma, 5.0);
        assert_eq!(TruncationPsi::from_derivatives(&[2.0, -3.0]).gamma, 12.0);
    }

    #[test]
    fn eta_examples() {
        let psi = TruncationPsi::new(1e6).unwrap();
        assert_eq!(eta_check(&[0.0, 0.0], 5, 1.0, &psi), 0.0);
        let e = eta_check(&[0.1, -0.2], 4, 1.0, &psi);
        let oracle = (0.1f64.exp() + (-0.2f64).exp() - 2.0) / 4.0;
        assert!((e - oracle).abs() < 1e-15);
        let c = 0.7;
        assert!((eta_check(&[c; 10], 10, -0.5, &psi) - ((-0.5 * c).exp() - 1.0)).abs() < 1e-14);
    }

    #[test]
    fn variance_examples() {
        assert_eq!(variance_est(array![1.0, 1.0].view(), array![1.0, 1.0].view()).unwrap(), 1.0);
        assert_eq!(variance_est(array![1.0, 2.0].view(), array![2.0, 1.0].view()).unwrap(), 2.0);
        assert_eq!(variance_est(array![0.0, 0.0].view(), array![2.0, 1.0].view()).unwrap(), 0.0);
    }

    #[test]
    fn fixed_t_examples() {
        let acc = fixed_t_decision(0.0, 1.0, 1.0, 100, 0.05);
        assert_eq!((acc.statistic, acc.reject), (0.0, Some(false)));
        let rej = fixed_t_decision(0.25, 1.0, 1.0, 100, 0.05);
        assert!((rej.statistic - 2.5).abs() < 1e-12);
        assert_eq!(rej.reject, Some(true));
        assert!((rej.ratio.unwrap() - 2.5 / 1.959_963_984_540_054).abs() < 1e-12);
        assert!((rej.ratio.unwrap() - 1.2755).abs() < 1e-4);
        let degenerate = fixed_t_decision(0.25, 0.0, 1.0, 100, 0.05);
        assert_eq!((degenerate.ratio, degenerate.reject), (None, None));
    }

    #[test]
    fn sup_examples() {
        let out = sup_decision(&[(0.5, 0.1), (1.25, 0.2)], 1.0, 100, 0.05);
        assert!((out.statistic - 2.0).abs() < 1e-12);
        assert_eq!(out.reject, Some(true));
        assert_eq!(sup_decision(&[(0.5, 0.0)], 1.0, 100, 0.05).reject, Some(false));
        let single = sup_decision(&[(-0.5, 0.03)], 1.0, 64, 0.05);
        assert!((single.statistic - 8.0 * (0.03f64 / 0.5)).abs() < 1e-12);
    }

    #[test]
    fn square_examples() {
        let out = square_decision(&[(1.0, 0.3)], &[1.0], 1.0, 100, 0.05);
        assert!((out.statistic - 9.0).abs() < 1e-12);
        assert_eq!(out.reject, Some(true));
        assert_eq!(square_decision(&[(1.0, 0.0)], &[1.0], 1.0, 100, 0.05).statistic, 0.0);
        let pairs = [(-1.25, 0.1), (-0.5, 0.0), (0.5, 0.05), (1.25, 0.0)];
        let (norm, raw) = square_statistic(&pairs, &[1.0; 4], 50);
        assert!((raw - 4.0 * norm).abs() < 1e-12);
    }

    #[test]
    fn boundary_ratio_is_one() {
        let z = two_sided_critical(0.05);
        let out = fixed_t_decision(z / 10.0, 1.0, 1.0, 100, 0.05);
        assert!((out.ratio.unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn psi_is_neutral_inside_linear_segment() {
        let derivs = [0.3, -1.2, 2.5, 0.0];
        let r = array![0.5, -0.2, 1.0, 0.3, -0.7];
        let s = array![1.0, 2.0, -0.5, 0.1, 0.4];
        let cfg = TestConfig::default();
        let a = evaluate_tests(&derivs, 5, r.view(), s.view(), &cfg, &TruncationPsi::from_derivatives(&derivs)).unwrap();
        let b = evaluate_tests(&derivs, 5, r.view(), s.view(), &cfg, &TruncationPsi::new(f64::MAX).unwrap()).unwrap();
        assert_eq!(a.etas, b.etas);
        assert_eq!(a.fixed_t, b.fixed_t);
        assert_eq!(a.sup, b.sup);
        assert_eq!(a.square, b.square);
    }

    #[test]
    fn all_zero_statistics() {
        let r = array![1.0, -1.0];
        let rep = evaluate_tests(&[0.0, 0.0], 2, r.view(), r.view(), &TestConfig::default(), &TruncationPsi::new(5.0).unwrap())
            .unwrap();
        assert_eq!(rep.intervals(), [Some(0.0), Some(0.0), Some(0.0)]);
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = TestConfig::default();
        cfg.t_set.push(0.0);
        cfg.weights.push(1.0);
        assert!(cfg.validate().is_err());
        let cfg = TestConfig {
            alpha: 1.0,
            ..TestConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn decisions_agree_with_ratios(
            derivs in prop::collection::vec(-3.0f64..3.0, 1..30),
            extra in 0usize..20,
            resid in prop::collection::vec(-2.0f64..2.0, 50),
            score in prop::collection::vec(-2.0f64..2.0, 50),
            alpha in 0.001f64..0.5,
        ) {
            let n = derivs.len() + extra;
            let r = ndarray::Array1::from(resid[..n.min(50)].to_vec());
            let s = ndarray::Array1::from(score[..n.min(50)].to_vec());
            let cfg = TestConfig { alpha, ..TestConfig::default() };
            let psi = TruncationPsi::from_derivatives(&derivs);
            let rep = evaluate_tests(&derivs, n, r.view(), s.view(), &cfg, &psi).unwrap();
            let zc = two_sided_critical(alpha);
            for out in [rep.fixed_t, rep.sup, rep.square] {
                prop_assert_eq!(out.ratio.map(|q| q > 1.0), out.reject);
            }
            if rep.variance > 0.0 {
                // direct criteria away from rounding ties
                let zf = rep.fixed_t.statistic.abs();
                if (zf - zc).abs() > 1e-9 {
                    prop_assert_eq!(rep.fixed_t.reject, Some(zf > zc));
                }
                let zs = rep.sup.statistic / rep.variance;
                if (zs - zc).abs() > 1e-9 {
                    prop_assert_eq!(rep.sup.reject, Some(zs > zc));
                }
                let chi = rep.square.statistic / rep.variance.powi(2);
                if (chi - zc * zc).abs() > 1e-9 {
                    prop_assert_eq!(rep.square.reject, Some(chi > chi2_1_critical(alpha)));
                }
            }
            prop_assert!(rep.square.statistic <= rep.sup.statistic.powi(2) * (1.0 + 1e-12) + 1e-300);
        }
    }
}
