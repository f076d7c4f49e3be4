//! Quartic-kernel smoothing of partial derivatives.
//!
//! For a function `g(z, x)` the smoothed derivative in `x` at bandwidth `h`
//! is `(1/h) ∫_{-1}^{1} g(z, x - a h) K'(a) da`. It is evaluated with the
//! midpoint rule on `2N` nodes `a_l = -1 - 1/(2N) + l/N`, `l = 1..2N`, each
//! carrying weight `1/N`.

mod cv;

pub use cv::{cv_bandwidth, select_bandwidth, CvConfig, CvResult, CvRow};

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScreenError};
use crate::nn::NetworkModel;

/// Grid size used unless configured otherwise.
pub const DEFAULT_GRID_SIZE: usize = 50;

/// Quartic (biweight) kernel `(15/16)(1 - u^2)^2` on `[-1, 1]`.
#[inline]
pub fn kernel(u: f64) -> f64 {
    if u.abs() <= 1.0 {
        let s = 1.0 - u * u;
        0.9375 * s * s
    } else {
        0.0
    }
}

/// Derivative of [`kernel`]: `-(15/4) u (1 - u^2)` on `[-1, 1]`.
#[inline]
pub fn kernel_deriv(u: f64) -> f64 {
    if u.abs() <= 1.0 {
        -3.75 * u * (1.0 - u * u)
    } else {
        0.0
    }
}

/// Bandwidth, Riemann grid size and support half-width for one screened coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothingSpec {
    pub bandwidth: f64,
    pub grid_size: usize,
    pub half_width: f64,
}

impl SmoothingSpec {
    pub fn new(bandwidth: f64, grid_size: usize, half_width: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(ScreenError::Config(format!("bandwidth must be positive, got {bandwidth}")));
        }
        if grid_size == 0 {
            return Err(ScreenError::Config("Riemann grid size must be positive".into()));
        }
        if !(half_width > 0.0 && half_width.is_finite()) {
            return Err(ScreenError::Config(format!("half-width must be positive, got {half_width}")));
        }
        if bandwidth > half_width {
            return Err(ScreenError::Config(format!(
                "bandwidth {bandwidth} exceeds the support half-width {half_width}"
            )));
        }
        Ok(Self {
            bandwidth,
            grid_size,
            half_width,
        })
    }

    /// `[-b + h, b - h]`.
    pub fn interior_bounds(&self) -> (f64, f64) {
        (-self.half_width + self.bandwidth, self.half_width - self.bandwidth)
    }

    pub fn is_interior(&self, x: f64) -> bool {
        let (lo, hi) = self.interior_bounds();
        lo <= x && x <= hi
    }

    pub fn check_interior(&self, x: f64) -> Result<()> {
        if self.is_interior(x) {
            Ok(())
        } else {
            let (lo, hi) = self.interior_bounds();
            Err(ScreenError::BoundaryViolation { x, lo, hi })
        }
    }

    pub fn grid(&self) -> RiemannGrid {
        RiemannGrid::new(self.grid_size, self.bandwidth)
    }
}

/// Midpoint nodes `a_l` with their derivative weights `K'(a_l) / (N h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RiemannGrid {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl RiemannGrid {
    pub fn new(grid_size: usize, bandwidth: f64) -> Self {
        let nodes = grid_nodes(grid_size);
        let scale = 1.0 / (grid_size as f64 * bandwidth);
        let weights = nodes.iter().map(|&a| kernel_deriv(a) * scale).collect();
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// The `2N` midpoints of an equal partition of `[-1, 1]`.
pub fn grid_nodes(grid_size: usize) -> Vec<f64> {
    let n = grid_size as f64;
    (1..=2 * grid_size)
        .map(|l| -1.0 - 1.0 / (2.0 * n) + l as f64 / n)
        .collect()
}

/// Smoothed partial derivative of an arbitrary `f(z, x_j)` at `(z, x_j)`.
pub fn smoothed_partial<F>(f: F, z: &[f64], xj: f64, spec: &SmoothingSpec) -> Result<f64>
where
    F: Fn(&[f64], f64) -> f64,
{
    spec.check_interior(xj)?;
    let grid = spec.grid();
    Ok(grid
        .nodes
        .iter()
        .zip(&grid.weights)
        .map(|(&a, &w)| w * f(z, xj - a * spec.bandwidth))
        .sum())
}

/// Indices `i` with `-b + h <= x_i <= b - h`. Accepts `h = 0`.
pub fn interior_indices(x_col: &[f64], half_width: f64, bandwidth: f64) -> Vec<usize> {
    let (lo, hi) = (-half_width + bandwidth, half_width - bandwidth);
    x_col
        .iter()
        .enumerate()
        .filter(|(_, &x)| lo <= x && x <= hi)
        .map(|(i, _)| i)
        .collect()
}

/// Largest absolute value in a column; the default support half-width.
pub fn empirical_half_width(x_col: &[f64]) -> f64 {
    x_col.iter().fold(0.0, |acc: f64, &v| acc.max(v.abs()))
}

/// Anything that can be evaluated on a batch of input rows.
pub trait BatchFunction {
    fn input_dim(&self) -> usize;
    fn eval_batch(&self, inputs: ArrayView2<'_, f64>) -> Result<Array1<f64>>;
}

impl BatchFunction for NetworkModel {
    fn input_dim(&self) -> usize {
        NetworkModel::input_dim(self)
    }

    fn eval_batch(&self, inputs: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        self.predict(inputs)
    }
}

const SHIFT_CHUNK_ROWS: usize = 128;

/// Smoothed partial derivatives of `f` in column `coord`, at the given rows
/// of `inputs`. Every requested row must be interior.
pub fn smoothed_partials<F: BatchFunction + ?Sized>(
    f: &F,
    inputs: ArrayView2<'_, f64>,
    coord: usize,
    rows: &[usize],
    spec: &SmoothingSpec,
) -> Result<Vec<f64>> {
    if inputs.ncols() != f.input_dim() {
        return Err(ScreenError::Shape {
            expected: f.input_dim(),
            got: inputs.ncols(),
        });
    }
    if coord >= inputs.ncols() {
        return Err(ScreenError::Shape {
            expected: inputs.ncols(),
            got: coord + 1,
        });
    }
    for &i in rows {
        spec.check_interior(inputs[(i, coord)])?;
    }
    let grid = spec.grid();
    let g = grid.len();
    let p = inputs.ncols();
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(SHIFT_CHUNK_ROWS) {
        let mut shifted = Array2::zeros((chunk.len() * g, p));
        for (c, &i) in chunk.iter().enumerate() {
            let base = inputs.row(i);
            for (l, &a) in grid.nodes.iter().enumerate() {
                let mut row = shifted.row_mut(c * g + l);
                row.assign(&base);
                row[coord] -= a * spec.bandwidth;
            }
        }
        let values = f.eval_batch(shifted.view())?;
        for c in 0..chunk.len() {
            let block = values.slice(ndarray::s![c * g..(c + 1) * g]);
            out.push(block.iter().zip(&grid.weights).map(|(v, w)| v * w).sum());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_sawtooth, NetworkArchitecture};
    use crate::seed::rng_from_seed;
    use proptest::prelude::*;
    use rand::Rng;

    /// Midpoint quadrature oracle with `m` cells for `(1/h) ∫ f(x - a h) K'(a) da`.
    fn quadrature_oracle(f: impl Fn(f64) -> f64, x: f64, h: f64, m: usize) -> f64 {
        let step = 2.0 / m as f64;
        (0..m)
            .map(|i| {
                let a = -1.0 + (i as f64 + 0.5) * step;
                f(x - a * h) * kernel_deriv(a) * step
            })
            .sum::<f64>()
            / h
    }

    #[test]
    fn kernel_values() {
        assert_eq!(kernel(0.0), 0.9375);
        assert_eq!(kernel(1.0), 0.0);
        assert_eq!(kernel(-1.0), 0.0);
        assert_eq!(kernel(1.5), 0.0);
        assert_eq!(kernel_deriv(0.0), 0.0);
        assert!((kernel_deriv(0.5) + 1.40625).abs() < 1e-15);
        assert_eq!(kernel_deriv(-2.0), 0.0);
    }

    #[test]
    fn kernel_integrates_to_one() {
        let m = 10_000;
        let step = 2.0 / m as f64;
        let total: f64 = (0..m).map(|i| kernel(-1.0 + (i as f64 + 0.5) * step) * step).sum();
        assert!((total - 1.0).abs() < 1e-7, "{total}");
    }

    #[test]
    fn grid_nodes_are_interior_midpoints() {
        let nodes = grid_nodes(50);
        assert_eq!(nodes.len(), 100);
        assert!((nodes[0] + 0.99).abs() < 1e-15);
        assert!((nodes[99] - 0.99).abs() < 1e-15);
        assert!(nodes.iter().all(|a| a.abs() < 1.0));
    }

    #[test]
    fn constant_has_zero_smoothed_derivative() {
        let spec = SmoothingSpec::new(0.3, 50, 1.0).unwrap();
        let d = smoothed_partial(|_, _| 4.2, &[], 0.1, &spec).unwrap();
        assert!(d.abs() < 1e-12, "{d}");
    }

    /// Closed-form midpoint sum of `-a K'(a)` on the `2N` grid (Euler-Maclaurin is exact for quartics).
    fn midpoint_identity(n: usize) -> f64 {
        let n2 = (n * n) as f64;
        1.0 + 0.625 / n2 - 0.21875 / (n2 * n2)
    }

    #[test]
    fn identity_matches_closed_form_midpoint_sum() {
        for &n in &[10, 50, 200] {
            for &h in &[0.05, 0.2, 0.5, 1.0] {
                let spec = SmoothingSpec::new(h, n, 2.0).unwrap();
                let d = smoothed_partial(|_, x| x, &[], 0.4, &spec).unwrap();
                assert!((d - midpoint_identity(n)).abs() < 1e-12, "N={n} h={h}: {d}");
            }
        }
    }

    #[test]
    fn identity_converges_to_one() {
        let spec = SmoothingSpec::new(0.3, 1000, 1.0).unwrap();
        let d = smoothed_partial(|_, x| x, &[], 0.1, &spec).unwrap();
        assert!((d - 1.0).abs() < 1e-6, "{d}");
    }

    #[test]
    fn square_matches_quadrature() {
        let spec = SmoothingSpec::new(0.2, 50, 1.0).unwrap();
        let d = smoothed_partial(|_, x| x * x, &[], 0.3, &spec).unwrap();
        let oracle = quadrature_oracle(|x| x * x, 0.3, 0.2, 100_000);
        assert!((oracle - 0.6).abs() < 1e-8);
        assert!((d - 0.6 * midpoint_identity(50)).abs() < 1e-12, "{d}");
    }

    #[test]
    fn quartic_polynomials_match_quadrature() {
        let mut rng = rng_from_seed(42);
        for _ in 0..20 {
            let c: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let poly = |x: f64| c[0] + c[1] * x + c[2] * x * x + c[3] * x.powi(3) + c[4] * x.powi(4);
            let h = rng.random_range(0.05..0.5);
            let x = rng.random_range(-0.4..0.4);
            let oracle = quadrature_oracle(poly, x, h, 100_000);
            let coarse = SmoothingSpec::new(h, 50, 1.0).unwrap();
            let d = smoothed_partial(|_, x| poly(x), &[], x, &coarse).unwrap();
            assert!(
                (d - oracle).abs() <= 1e-3 * oracle.abs().max(1.0),
                "N=50: riemann {d} vs oracle {oracle}"
            );
            let fine = SmoothingSpec::new(h, 2000, 1.0).unwrap();
            let d = smoothed_partial(|_, x| poly(x), &[], x, &fine).unwrap();
            assert!(
                (d - oracle).abs() <= 1e-5 * oracle.abs().max(1.0),
                "N=2000: riemann {d} vs oracle {oracle}"
            );
        }
    }

    #[test]
    fn boundary_points_rejected() {
        let spec = SmoothingSpec::new(0.5, 50, 1.0).unwrap();
        assert!(matches!(
            smoothed_partial(|_, x| x, &[], 0.9, &spec),
            Err(ScreenError::BoundaryViolation { .. })
        ));
        assert!(SmoothingSpec::new(1.5, 50, 1.0).is_err());
        assert!(SmoothingSpec::new(0.0, 50, 1.0).is_err());
    }

    #[test]
    fn interior_index_examples() {
        assert_eq!(interior_indices(&[-0.9, 0.0, 0.9], 1.0, 0.5), vec![1]);
        assert_eq!(interior_indices(&[-1.0, 0.3, 1.0], 1.0, 0.0), vec![0, 1, 2]);
        let mut rng = rng_from_seed(3);
        let x: Vec<f64> = (0..10_000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let frac = interior_indices(&x, 1.0, 0.1).len() as f64 / 1e4;
        assert!((0.88..=0.92).contains(&frac), "{frac}");
    }

    #[test]
    fn batched_network_path_matches_closure_path() {
        let arch = NetworkArchitecture::new(3, 2, 8, 100.0).unwrap();
        let model = NetworkModel::init(arch, &mut rng_from_seed(12)).unwrap();
        let mut rng = rng_from_seed(13);
        let inputs = Array2::from_shape_fn((300, 3), |_| rng.random_range(-0.5..0.5));
        let spec = SmoothingSpec::new(0.2, 50, 1.0).unwrap();
        let rows: Vec<usize> = (0..300).collect();
        let batched = smoothed_partials(&model, inputs.view(), 2, &rows, &spec).unwrap();
        for &i in rows.iter().step_by(37) {
            let z = [inputs[(i, 0)], inputs[(i, 1)]];
            let single = smoothed_partial(
                |z, x| model.forward(&[z[0], z[1], x]).unwrap(),
                &z,
                inputs[(i, 2)],
                &spec,
            )
            .unwrap();
            assert!((single - batched[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn smoothing_flattens_a_deep_sawtooth() {
        // domain [0, 1] is [-b, b] shifted by 1/2 with b = 1/2
        let net = build_sawtooth(8).unwrap();
        let h = 0.2;
        let spec = SmoothingSpec::new(h, 2000, 0.5).unwrap();
        let m = 2000;
        let (lo, hi) = (h, 1.0 - h);
        let step = (hi - lo) / m as f64;
        let mut sq = 0.0;
        for i in 0..m {
            let x = lo + (i as f64 + 0.5) * step;
            let d = smoothed_partial(|_, t| net.forward(&[t + 0.5]).unwrap(), &[], x - 0.5, &spec)
                .unwrap();
            sq += d * d * step;
        }
        assert!(sq.sqrt() < 0.1, "{}", sq.sqrt());
    }

    proptest! {
        #[test]
        fn smoothing_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, x in -0.5f64..0.5, h in 0.05f64..0.5) {
            let spec = SmoothingSpec::new(h, 50, 1.0).unwrap();
            let f = |_: &[f64], x: f64| (3.0 * x).sin();
            let g = |_: &[f64], x: f64| x.powi(3) - x;
            let lhs = smoothed_partial(|z, x| a * f(z, x) + b * g(z, x), &[], x, &spec).unwrap();
            let rhs = a * smoothed_partial(f, &[], x, &spec).unwrap()
                + b * smoothed_partial(g, &[], x, &spec).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        }
    }
}
