//! Diversified factor projection.
//!
//! A reserved block of rows is used once to estimate the top principal
//! directions of `X`. The projector `W = sqrt(d) U` then maps every other
//! row to `F = W^T x / d`.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScreenError};

/// Ambient dimension above which the `m x m` Gram matrix is decomposed instead.
pub const DUAL_PCA_THRESHOLD: usize = 2000;

/// Number of reserved rows: `override` if given, else `min(100, ceil(5 ln n) * rbar)`.
pub fn reserved_count(n: usize, rbar: usize, override_count: Option<usize>) -> usize {
    override_count.unwrap_or_else(|| {
        let per_factor = (5.0 * (n.max(1) as f64).ln()).ceil() as usize;
        (per_factor.max(1) * rbar).min(100)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ProjectorRepr", try_from = "ProjectorRepr")]
pub struct DiversifiedProjector {
    /// `d x rbar`.
    pub w: Array2<f64>,
    pub ambient_dim: usize,
    pub factor_bound: usize,
    pub reserved_count: usize,
}

impl DiversifiedProjector {
    pub fn from_matrix(w: Array2<f64>, reserved_count: usize) -> Result<Self> {
        let (d, r) = w.dim();
        if d == 0 || r == 0 || r > d {
            return Err(ScreenError::Config(format!("projector must be d x r with 1 <= r <= d, got {d} x {r}")));
        }
        Ok(Self {
            w,
            ambient_dim: d,
            factor_bound: r,
            reserved_count,
        })
    }

    /// `W^T x / d` for a single row.
    pub fn diversify(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        if x.len() != self.ambient_dim {
            return Err(ScreenError::Shape {
                expected: self.ambient_dim,
                got: x.len(),
            });
        }
        Ok(self.w.t().dot(&x) / self.ambient_dim as f64)
    }

    /// Row-wise [`diversify`](Self::diversify): `X W / d`, shape `n x rbar`.
    pub fn diversify_rows(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.ambient_dim {
            return Err(ScreenError::Shape {
                expected: self.ambient_dim,
                got: x.ncols(),
            });
        }
        Ok(x.dot(&self.w) / self.ambient_dim as f64)
    }
}

/// Estimates `W` from the reserved rows `x_reserved` (`m x d`).
pub fn pretrain_projector(x_reserved: ArrayView2<'_, f64>, rbar: usize) -> Result<DiversifiedProjector> {
    pretrain_with_threshold(x_reserved, rbar, DUAL_PCA_THRESHOLD)
}

fn pretrain_with_threshold(
    x_reserved: ArrayView2<'_, f64>,
    rbar: usize,
    dual_threshold: usize,
) -> Result<DiversifiedProjector> {
    let (m, d) = x_reserved.dim();
    if rbar == 0 {
        return Err(ScreenError::Config("factor bound must be positive".into()));
    }
    if m < rbar {
        return Err(ScreenError::InsufficientPretraining { required: rbar, got: m });
    }
    if d < rbar {
        return Err(ScreenError::Config(format!("factor bound {rbar} exceeds dimension {d}")));
    }
    if x_reserved.iter().any(|v| !v.is_finite()) {
        return Err(ScreenError::DegenerateInput("reserved rows contain non-finite values".into()));
    }
    let mean = x_reserved.mean_axis(Axis(0)).expect("m >= 1");
    let centered = &x_reserved - &mean;
    if centered.iter().all(|&v| v == 0.0) {
        return Err(ScreenError::DegenerateInput("reserved rows have zero covariance".into()));
    }
    let xc = DMatrix::from_fn(m, d, |i, j| centered[(i, j)]);
    let denom = (m.max(2) - 1) as f64;

    let mut u = if d <= dual_threshold {
        let cov = xc.transpose() * &xc / denom;
        top_eigenvectors(cov, rbar)
    } else {
        let gram = &xc * xc.transpose() / denom;
        let eig = SymmetricEigen::new(gram);
        let order = descending(eig.eigenvalues.as_slice());
        let top = eig.eigenvalues[order[0]];
        let mut u = Array2::zeros((d, rbar));
        for (c, &k) in order.iter().take(rbar).enumerate() {
            let lambda = eig.eigenvalues[k];
            if lambda <= top * 1e-12 {
                return Err(ScreenError::DegenerateInput(format!(
                    "reserved rows have rank below the factor bound {rbar}"
                )));
            }
            let dir = xc.transpose() * eig.eigenvectors.column(k);
            let norm = dir.norm();
            for r in 0..d {
                u[(r, c)] = dir[r] / norm;
            }
        }
        u
    };
    for mut col in u.columns_mut() {
        let pivot = col.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
        if pivot < 0.0 {
            col.mapv_inplace(|v| -v);
        }
    }
    u *= (d as f64).sqrt();
    DiversifiedProjector::from_matrix(u, m)
}

fn descending(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

fn top_eigenvectors(cov: DMatrix<f64>, rbar: usize) -> Array2<f64> {
    let d = cov.nrows();
    let eig = SymmetricEigen::new(cov);
    let order = descending(eig.eigenvalues.as_slice());
    Array2::from_shape_fn((d, rbar), |(r, c)| eig.eigenvectors[(r, order[c])])
}

#[derive(Serialize, Deserialize)]
struct ProjectorRepr {
    ambient_dim: usize,
    factor_bound: usize,
    reserved_count: usize,
    /// Row-major `d x rbar`.
    w: Vec<Vec<f64>>,
}

impl From<DiversifiedProjector> for ProjectorRepr {
    fn from(p: DiversifiedProjector) -> Self {
        Self {
            ambient_dim: p.ambient_dim,
            factor_bound: p.factor_bound,
            reserved_count: p.reserved_count,
            w: p.w.rows().into_iter().map(|r| r.to_vec()).collect(),
        }
    }
}

impl TryFrom<ProjectorRepr> for DiversifiedProjector {
    type Error = ScreenError;

    fn try_from(repr: ProjectorRepr) -> Result<Self> {
        if repr.w.len() != repr.ambient_dim || repr.w.iter().any(|r| r.len() != repr.factor_bound) {
            return Err(ScreenError::Schema(format!(
                "projector matrix does not have shape {} x {}",
                repr.ambient_dim, repr.factor_bound
            )));
        }
        let flat: Vec<f64> = repr.w.into_iter().flatten().collect();
        let w = Array2::from_shape_vec((repr.ambient_dim, repr.factor_bound), flat)
            .map_err(|e| ScreenError::Schema(e.to_string()))?;
        DiversifiedProjector::from_matrix(w, repr.reserved_count)
    }
}
