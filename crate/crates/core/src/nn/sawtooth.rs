use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{NetworkArchitecture, NetworkModel};
use crate::error::{Result, ScreenError};
use crate::smoothing::RiemannGrid;

/// The triangle map `zeta(t) = 2 relu(t) - 4 relu(t - 1/2) + 2 relu(t - 1)`
/// iterated `depth` times and scaled by `2 / 2^depth`, as a ReLU network
/// with `depth` hidden layers of three units.
///
/// On `[0, 1]` the result has `2^depth` linear pieces of slope `±2` and
/// vanishes at both endpoints.
pub fn build_sawtooth(depth: usize) -> Result<NetworkModel> {
    if depth == 0 {
        return Err(ScreenError::Config("sawtooth depth must be at least 1".into()));
    }
    let arch = NetworkArchitecture::new(1, depth, 3, 10.0)?;
    let offsets = Array1::from(vec![0.0, -0.5, -1.0]);
    let mut weights = Vec::with_capacity(depth + 1);
    let mut biases = Vec::with_capacity(depth + 1);

    weights.push(Array2::from_elem((3, 1), 1.0));
    biases.push(offsets.clone());
    // each later layer first recombines the previous units into zeta(.)
    let recombine = [2.0, -4.0, 2.0];
    for _ in 1..depth {
        weights.push(Array2::from_shape_fn((3, 3), |(_, c)| recombine[c]));
        biases.push(offsets.clone());
    }
    let scale = 2.0 / 2f64.powi(depth as i32);
    weights.push(Array2::from_shape_fn((1, 3), |(_, c)| scale * recombine[c]));
    biases.push(Array1::zeros(1));
    NetworkModel::from_layers(arch, weights, biases)
}

const SMOOTHED_CELLS: usize = 2_000;

/// L2 norms on `[0, 1]` of the sawtooth, its derivative, and its smoothed
/// derivative (the latter over the interior `[h, 1 - h]`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SawtoothNorms {
    pub depth: usize,
    pub bandwidth: f64,
    pub value_norm: f64,
    pub derivative_norm: f64,
    pub smoothed_derivative_norm: f64,
}

impl SawtoothNorms {
    /// `(2 / sqrt 3) 2^-depth`, the closed form of `value_norm`.
    pub fn expected_value_norm(depth: usize) -> f64 {
        2.0 / 3f64.sqrt() * 2f64.powi(-(depth as i32))
    }
}

/// Rectangle quadrature with `points` cells (at most `SMOOTHED_CELLS` for
/// the smoothed derivative, which is itself an integral). The kernel grid has
/// `kernel_grid` nodes per half and must be fine enough to resolve every
/// linear piece.
pub fn sawtooth_norms(depth: usize, bandwidth: f64, points: usize, kernel_grid: usize) -> Result<SawtoothNorms> {
    if !(bandwidth > 0.0 && bandwidth < 0.5) {
        return Err(ScreenError::Config(format!("sawtooth bandwidth must lie in (0, 0.5), got {bandwidth}")));
    }
    if points == 0 || kernel_grid == 0 {
        return Err(ScreenError::Config("quadrature sizes must be positive".into()));
    }
    let net = build_sawtooth(depth)?;
    let cell = 1.0 / points as f64;
    let mut value_sq = 0.0;
    let mut deriv_sq = 0.0;
    for i in 0..points {
        let t = (i as f64 + 0.5) * cell;
        value_sq += net.forward(&[t])?.powi(2);
        // an offset of 1/3 never lands on a dyadic kink
        let u = (i as f64 + 1.0 / 3.0) * cell;
        deriv_sq += net.input_partial(&[u], 0)?.powi(2);
    }

    let grid = RiemannGrid::new(kernel_grid, bandwidth);
    let inner = 1.0 - 2.0 * bandwidth;
    let smooth_points = points.min(SMOOTHED_CELLS);
    let inner_cell = inner / smooth_points as f64;
    let mut smooth_sq = 0.0;
    for i in 0..smooth_points {
        let x = bandwidth + (i as f64 + 0.5) * inner_cell;
        let mut s = 0.0;
        for (&a, &w) in grid.nodes.iter().zip(&grid.weights) {
            s += w * net.forward(&[x - a * bandwidth])?;
        }
        smooth_sq += s * s;
    }
    Ok(SawtoothNorms {
        depth,
        bandwidth,
        value_norm: (value_sq * cell).sqrt(),
        derivative_norm: (deriv_sq * cell).sqrt(),
        smoothed_derivative_norm: (smooth_sq * inner_cell).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zeta(t: f64) -> f64 {
        if (0.0..0.5).contains(&t) {
            2.0 * t
        } else if (0.5..=1.0).contains(&t) {
            2.0 * (1.0 - t)
        } else {
            0.0
        }
    }

    #[test]
    fn single_layer_values() {
        let net = build_sawtooth(1).unwrap();
        assert_eq!(net.forward(&[0.25]).unwrap(), 0.5);
        assert_eq!(net.forward(&[0.5]).unwrap(), 1.0);
    }

    #[test]
    fn two_layer_value() {
        let net = build_sawtooth(2).unwrap();
        assert_eq!(net.forward(&[0.25]).unwrap(), 0.5);
    }

    #[test]
    fn endpoints_vanish() {
        for depth in 1..=12 {
            let net = build_sawtooth(depth).unwrap();
            assert_eq!(net.forward(&[0.0]).unwrap(), 0.0);
            assert_eq!(net.forward(&[1.0]).unwrap(), 0.0);
        }
    }

    #[test]
    fn matches_iterated_triangle_map() {
        for depth in 1..=6 {
            let net = build_sawtooth(depth).unwrap();
            let scale = 2.0 / 2f64.powi(depth as i32);
            for i in 0..=200 {
                let t = i as f64 / 200.0 + 1e-4;
                let mut v = t;
                for _ in 0..depth {
                    v = zeta(v);
                }
                assert!((net.forward(&[t]).unwrap() - scale * v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn slope_has_magnitude_two() {
        let net = build_sawtooth(3).unwrap();
        assert_eq!(net.input_partial(&[0.1], 0).unwrap().abs(), 2.0);
    }

    #[test]
    fn norms_match_closed_forms() {
        for depth in [1, 4, 8] {
            let norms = sawtooth_norms(depth, 0.2, 20_000, 50).unwrap();
            let expected = SawtoothNorms::expected_value_norm(depth);
            assert!((norms.value_norm / expected - 1.0).abs() < 1e-3, "{norms:?}");
            assert!((norms.derivative_norm - 2.0).abs() < 1e-9, "{norms:?}");
        }
    }

    #[test]
    fn smoothing_flattens_deep_sawtooth() {
        let norms = sawtooth_norms(8, 0.2, 2_000, 4_000).unwrap();
        assert!(norms.smoothed_derivative_norm < 0.1, "{norms:?}");
        let shallow = sawtooth_norms(1, 0.2, 2_000, 4_000).unwrap();
        assert!(shallow.smoothed_derivative_norm > 0.5, "{shallow:?}");
    }

    #[test]
    fn zero_depth_rejected() {
        assert!(build_sawtooth(0).is_err());
    }
}
