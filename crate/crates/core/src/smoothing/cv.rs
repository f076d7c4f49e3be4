//! K-fold cross-validation of the smoothing bandwidth.
//!
//! For fold `k`, a model fitted without the fold supplies smoothed
//! derivatives at bandwidth `h`, and a model fitted on the fold alone
//! supplies raw derivatives. `CV(h)` sums their squared differences over
//! the fold points that are interior for `h`.

use ndarray::{ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{interior_indices, smoothed_partials, SmoothingSpec};
use crate::error::{Result, ScreenError};
use crate::nn::{train_regressor, NetworkArchitecture, NetworkModel, TrainConfig};
use crate::seed::{derive_seed, rng_from_seed};

/// Smallest fold that is still fitted on its own.
pub const MIN_FOLD_SIZE: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub candidates: Vec<f64>,
    pub folds: usize,
    pub grid_size: usize,
    /// Support half-width of the screened column; `None` uses `max |x_j|`.
    pub half_width: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub bandwidth: f64,
    /// `+inf` when no fold point is interior.
    pub cv: f64,
    /// Number of interior fold points that contributed.
    pub terms: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub rows: Vec<CvRow>,
    pub best: f64,
    pub half_width: f64,
}

/// Minimiser of the CV table; ties go to the larger bandwidth.
pub fn select_bandwidth(rows: &[CvRow]) -> Option<f64> {
    let mut best: Option<CvRow> = None;
    for row in rows {
        best = match best {
            None => Some(*row),
            Some(b) if row.cv < b.cv || (row.cv == b.cv && row.bandwidth > b.bandwidth) => Some(*row),
            keep => keep,
        };
    }
    best.map(|r| r.bandwidth)
}

fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(seed));
    let base = n / folds;
    let extra = n % folds;
    let mut out = Vec::with_capacity(folds);
    let mut start = 0;
    for k in 0..folds {
        let len = base + usize::from(k < extra);
        let mut fold = order[start..start + len].to_vec();
        fold.sort_unstable();
        out.push(fold);
        start += len;
    }
    out
}

/// Cross-validates the smoothing bandwidth for input column `coord`.
pub fn cv_bandwidth(
    inputs: ArrayView2<'_, f64>,
    targets: ArrayView1<'_, f64>,
    coord: usize,
    arch: NetworkArchitecture,
    train: &TrainConfig,
    cfg: &CvConfig,
) -> Result<CvResult> {
    if cfg.candidates.is_empty() {
        return Err(ScreenError::Config("bandwidth candidate list is empty".into()));
    }
    if cfg.folds < 2 {
        return Err(ScreenError::Config(format!("need at least 2 folds, got {}", cfg.folds)));
    }
    if coord >= inputs.ncols() {
        return Err(ScreenError::Shape {
            expected: inputs.ncols(),
            got: coord + 1,
        });
    }
    let n = inputs.nrows();
    let folds = fold_assignment(n, cfg.folds, derive_seed(cfg.seed, "cv-folds", 0));
    for (k, fold) in folds.iter().enumerate() {
        if fold.len() < MIN_FOLD_SIZE {
            return Err(ScreenError::FoldTooSmall {
                fold: k,
                size: fold.len(),
                min: MIN_FOLD_SIZE,
            });
        }
    }
    let x_col: Vec<f64> = inputs.column(coord).to_vec();
    let half_width = cfg
        .half_width
        .unwrap_or_else(|| super::empirical_half_width(&x_col));

    let fold_models: Vec<(NetworkModel, NetworkModel)> = (0..cfg.folds)
        .into_par_iter()
        .map(|k| -> Result<(NetworkModel, NetworkModel)> {
            let fold = &folds[k];
            let rest: Vec<usize> = (0..n).filter(|i| fold.binary_search(i).is_err()).collect();
            let out_cfg = train.clone().with_seed(derive_seed(cfg.seed, "cv-leave-out", k as u64));
            let in_cfg = train.clone().with_seed(derive_seed(cfg.seed, "cv-within", k as u64));
            let leave_out = train_regressor(
                inputs.select(Axis(0), &rest).view(),
                targets.select(Axis(0), &rest).view(),
                arch,
                &out_cfg,
            )?;
            let within = train_regressor(
                inputs.select(Axis(0), fold).view(),
                targets.select(Axis(0), fold).view(),
                arch,
                &in_cfg,
            )?;
            Ok((leave_out, within))
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(cfg.candidates.len());
    for &h in &cfg.candidates {
        let spec = match SmoothingSpec::new(h, cfg.grid_size, half_width) {
            Ok(spec) => spec,
            Err(_) => {
                rows.push(CvRow {
                    bandwidth: h,
                    cv: f64::INFINITY,
                    terms: 0,
                });
                continue;
            }
        };
        let mut total = 0.0;
        let mut terms = 0;
        for (fold, (leave_out, within)) in folds.iter().zip(&fold_models) {
            let fold_x: Vec<f64> = fold.iter().map(|&i| x_col[i]).collect();
            let interior: Vec<usize> = interior_indices(&fold_x, half_width, h)
                .into_iter()
                .map(|p| fold[p])
                .collect();
            if interior.is_empty() {
                continue;
            }
            let smooth = smoothed_partials(leave_out, inputs, coord, &interior, &spec)?;
            for (&i, s) in interior.iter().zip(smooth) {
                let row = inputs.row(i).to_vec();
                let raw = within.input_partial(&row, coord)?;
                total += (s - raw) * (s - raw);
            }
            terms += interior.len();
        }
        rows.push(CvRow {
            bandwidth: h,
            cv: if terms == 0 { f64::INFINITY } else { total },
            terms,
        });
    }
    let best = select_bandwidth(&rows).expect("candidate list is non-empty");
    Ok(CvResult {
        rows,
        best,
        half_width,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array2};
    use rand::Rng;

    fn row(h: f64, cv: f64) -> CvRow {
        CvRow {
            bandwidth: h,
            cv,
            terms: 1,
        }
    }

    #[test]
    fn ties_prefer_larger_bandwidth() {
        assert_eq!(select_bandwidth(&[row(0.5, 1.0), row(1.0, 1.0)]), Some(1.0));
        assert_eq!(select_bandwidth(&[row(1.0, 1.0), row(0.5, 1.0)]), Some(1.0));
        assert_eq!(select_bandwidth(&[row(0.5, 0.9), row(1.0, 1.0)]), Some(0.5));
        assert_eq!(select_bandwidth(&[row(0.5, f64::INFINITY), row(2.0, 3.0)]), Some(2.0));
        assert_eq!(select_bandwidth(&[]), None);
    }

    #[test]
    fn folds_partition_the_sample() {
        let folds = fold_assignment(23, 5, 4);
        let mut all: Vec<usize> = folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        assert!(folds.iter().all(|f| f.len() == 4 || f.len() == 5));
    }

    fn linear_data(n: usize, seed: u64) -> (Array2<f64>, Array1<f64>) {
        let mut rng = rng_from_seed(seed);
        let x = Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.0..1.0));
        let y = x
            .rows()
            .into_iter()
            .map(|r| r[0] + 0.5 * r[1] + 0.1 * rng.random_range(-1.0..1.0))
            .collect();
        (x, y)
    }

    fn quick_train() -> TrainConfig {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            ..TrainConfig::regressor_default()
        }
    }

    #[test]
    fn single_candidate_is_returned() {
        let (x, y) = linear_data(80, 1);
        let arch = NetworkArchitecture::new(2, 2, 8, 20.0).unwrap();
        let cfg = CvConfig {
            candidates: vec![0.3],
            folds: 3,
            grid_size: 20,
            half_width: None,
            seed: 1,
        };
        let res = cv_bandwidth(x.view(), y.view(), 1, arch, &quick_train(), &cfg).unwrap();
        assert_eq!(res.best, 0.3);
        assert_eq!(res.rows.len(), 1);
        assert!(res.rows[0].cv.is_finite());
    }

    #[test]
    fn fully_masked_candidate_loses() {
        let (x, y) = linear_data(80, 2);
        let arch = NetworkArchitecture::new(2, 2, 8, 20.0).unwrap();
        let cfg = CvConfig {
            candidates: vec![5.0, 0.3],
            folds: 3,
            grid_size: 20,
            half_width: Some(1.0),
            seed: 2,
        };
        let res = cv_bandwidth(x.view(), y.view(), 1, arch, &quick_train(), &cfg).unwrap();
        assert!(res.rows[0].cv.is_infinite());
        assert_eq!(res.best, 0.3);
    }

    #[test]
    fn tiny_folds_rejected() {
        let (x, y) = linear_data(20, 3);
        let arch = NetworkArchitecture::new(2, 1, 4, 20.0).unwrap();
        let cfg = CvConfig {
            candidates: vec![0.3],
            folds: 5,
            grid_size: 20,
            half_width: None,
            seed: 3,
        };
        assert!(matches!(
            cv_bandwidth(x.view(), y.view(), 1, arch, &quick_train(), &cfg),
            Err(ScreenError::FoldTooSmall { .. })
        ));
    }
}
