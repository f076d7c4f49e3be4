//! End-to-end screening of one or more candidate coordinates.
//!
//! High-dimensional mode reserves the leading rows to pretrain a diversified
//! projector and conditions on the resulting factors. Low-dimensional mode
//! conditions directly on the remaining predictors.
//!
//! Network inputs are laid out as `[conditioning..., x_j]`.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::debias::{delta_hat, center, CenteredEstimator};
use crate::error::{Result, ScreenError, StageExt};
use crate::factor::{pretrain_projector, reserved_count, DiversifiedProjector};
use crate::nn::{train_regressor_with_trace, InputScaling, NetworkArchitecture, NetworkModel, TrainConfig};
use crate::score::train_score;
use crate::seed::derive_seed;
use crate::smoothing::{cv_bandwidth, empirical_half_width, smoothed_partials, CvConfig, CvResult, SmoothingSpec, DEFAULT_GRID_SIZE};
use crate::stats::{evaluate_tests, TestConfig, TestReport, TruncationPsi};

/// Minimum estimation rows left after the reserved block in high-dimensional mode.
pub const MIN_ESTIMATION_ROWS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    HighDim,
    LowDim,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub hidden_layers: usize,
    pub hidden_width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthChoice {
    Fixed(f64),
    CrossValidated { candidates: Vec<f64>, folds: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub mode: Mode,
    /// Number of diversified factors; ignored in low-dimensional mode.
    pub rbar: usize,
    /// Reserved pretraining rows; `None` applies `min(100, ceil(5 ln n) rbar)`.
    pub reserved_rows: Option<usize>,
    /// Bandwidth in the original units of `x_j`.
    pub bandwidth: BandwidthChoice,
    pub grid_size: usize,
    /// Support half-width of `x_j`; `None` uses `max |x_j|` over the estimation rows.
    pub half_width: Option<f64>,
    pub regressor_arch: ArchConfig,
    pub regressor: TrainConfig,
    /// Output truncation of the regressor; `None` uses `10 max |y|` (at least 1).
    pub regressor_truncation: Option<f64>,
    pub score_arch: ArchConfig,
    pub score: TrainConfig,
    pub score_truncation: f64,
    pub tests: TestConfig,
    pub seed: u64,
    /// Keep fitted networks and the projector in each report.
    pub keep_models: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: Mode::HighDim,
            rbar: 4,
            reserved_rows: None,
            bandwidth: BandwidthChoice::Fixed(1.0),
            grid_size: DEFAULT_GRID_SIZE,
            half_width: None,
            regressor_arch: ArchConfig {
                hidden_layers: 5,
                hidden_width: 16,
            },
            regressor: TrainConfig::regressor_default(),
            regressor_truncation: None,
            score_arch: ArchConfig {
                hidden_layers: 2,
                hidden_width: 16,
            },
            score: TrainConfig::score_default(),
            score_truncation: 1e3,
            tests: TestConfig::default(),
            seed: 0,
            keep_models: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mode == Mode::HighDim && self.rbar == 0 {
            return Err(ScreenError::Config("high-dimensional mode needs rbar >= 1".into()));
        }
        if self.grid_size == 0 {
            return Err(ScreenError::Config("grid_size must be positive".into()));
        }
        match &self.bandwidth {
            BandwidthChoice::Fixed(h) if !(*h > 0.0 && h.is_finite()) => {
                return Err(ScreenError::Config(format!("bandwidth must be positive, got {h}")));
            }
            BandwidthChoice::CrossValidated { candidates, folds } if candidates.is_empty() || *folds < 2 => {
                return Err(ScreenError::Config("bandwidth grid needs candidates and at least 2 folds".into()));
            }
            _ => {}
        }
        if !(self.score_truncation > 0.0) {
            return Err(ScreenError::Config("score truncation must be positive".into()));
        }
        self.tests.validate()
    }
}

/// Seeds used by each random stage of one coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub regressor: u64,
    pub score: u64,
    pub cv: u64,
}

impl StageSeeds {
    pub fn derive(master: u64, coord: usize) -> Self {
        let j = coord as u64;
        Self {
            regressor: derive_seed(master, "regressor", j),
            score: derive_seed(master, "score", j),
            cv: derive_seed(master, "cv", j),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub final_train_loss: f64,
    pub best_validation_loss: f64,
}

impl FitSummary {
    fn new(best_epoch: usize, train: &[f64], val: &[f64]) -> Self {
        Self {
            best_epoch,
            epochs_run: train.len().saturating_sub(1),
            final_train_loss: train.get(best_epoch).copied().unwrap_or(f64::NAN),
            best_validation_loss: val.get(best_epoch).copied().unwrap_or(f64::NAN),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportModels {
    pub regressor: NetworkModel,
    pub score: NetworkModel,
    /// Standardisation applied during regression training (already folded into the networks).
    pub regressor_scaling: InputScaling,
    pub projector: Option<DiversifiedProjector>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinateReport {
    /// 0-based predictor index.
    pub coordinate: usize,
    pub column_name: String,
    pub mode: Mode,
    pub n_total: usize,
    /// Rows used for training and statistics.
    pub n_estimation: usize,
    /// Leading rows consumed by projector pretraining.
    pub reserved_rows: usize,
    pub conditioning_dim: usize,
    pub bandwidth: f64,
    pub half_width: f64,
    pub grid_size: usize,
    pub interior_count: usize,
    pub delta: f64,
    pub degenerate_score: bool,
    pub regressor_truncation: f64,
    pub centered: TestReport,
    /// Same tests built on the unadjusted regression fit.
    pub noncentered: TestReport,
    pub cv: Option<CvResult>,
    pub seeds: StageSeeds,
    pub regressor_fit: FitSummary,
    pub score_fit: FitSummary,
    pub models: Option<ReportModels>,
    pub config: PipelineConfig,
}

/// Conditioning design shared by every coordinate of one dataset.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub projector: Option<DiversifiedProjector>,
    /// Diversified factors of the estimation rows (high-dimensional mode).
    pub factors: Option<Array2<f64>>,
    pub estimation_rows: std::ops::Range<usize>,
    pub reserved_rows: std::ops::Range<usize>,
}

/// Splits off the reserved rows and pretrains the projector (high-dimensional mode).
pub fn prepare(data: &Dataset, cfg: &PipelineConfig) -> Result<Prepared> {
    cfg.validate()?;
    let n = data.n();
    match cfg.mode {
        Mode::LowDim => Ok(Prepared {
            projector: None,
            factors: None,
            estimation_rows: 0..n,
            reserved_rows: 0..0,
        }),
        Mode::HighDim => {
            let m = reserved_count(n, cfg.rbar, cfg.reserved_rows);
            if n < m + MIN_ESTIMATION_ROWS {
                return Err(ScreenError::Config(format!(
                    "{n} rows leave fewer than {MIN_ESTIMATION_ROWS} after reserving {m} for pretraining"
                )))
                .stage("projector");
            }
            let projector = pretrain_projector(data.x.slice(s![..m, ..]), cfg.rbar).stage("projector")?;
            let factors = projector.diversify_rows(data.x.slice(s![m.., ..])).stage("projector")?;
            Ok(Prepared {
                projector: Some(projector),
                factors: Some(factors),
                estimation_rows: m..n,
                reserved_rows: 0..m,
            })
        }
    }
}

impl Prepared {
    /// `[conditioning..., x_j]` on the estimation rows.
    pub fn inputs(&self, data: &Dataset, coord: usize) -> Result<Array2<f64>> {
        if coord >= data.d() {
            return Err(ScreenError::Shape {
                expected: data.d(),
                got: coord + 1,
            });
        }
        assert!(
            self.reserved_rows.end <= self.estimation_rows.start,
            "reserved and estimation rows overlap"
        );
        let rows = s![self.estimation_rows.clone(), ..];
        let x = data.x.slice(rows);
        let xj = x.column(coord).insert_axis(Axis(1));
        let cond = match &self.factors {
            Some(f) => f.clone(),
            None => {
                let keep: Vec<usize> = (0..data.d()).filter(|&c| c != coord).collect();
                x.select(Axis(1), &keep)
            }
        };
        Ok(concatenate(Axis(1), &[cond.view(), xj]).expect("row counts agree"))
    }
}

fn regressor_level(y: ArrayView1<'_, f64>, cfg: &PipelineConfig) -> f64 {
    cfg.regressor_truncation.unwrap_or_else(|| {
        let peak = y.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        (10.0 * peak).max(1.0)
    })
}

/// Screens coordinate `coord` at its configured bandwidth.
pub fn screen_coordinate(data: &Dataset, coord: usize, cfg: &PipelineConfig) -> Result<CoordinateReport> {
    let prepared = prepare(data, cfg)?;
    screen_prepared(data, &prepared, coord, cfg)
}

fn screen_prepared(data: &Dataset, prepared: &Prepared, coord: usize, cfg: &PipelineConfig) -> Result<CoordinateReport> {
    let hs = match &cfg.bandwidth {
        BandwidthChoice::Fixed(h) => vec![BandwidthSource::Fixed(*h)],
        BandwidthChoice::CrossValidated { .. } => vec![BandwidthSource::Cv],
    };
    let mut reports = screen_with(data, prepared, coord, &hs, cfg)?;
    Ok(reports.remove(0))
}

/// Screens coordinate `coord` at several bandwidths, fitting the regression once.
pub fn screen_coordinate_multi(
    data: &Dataset,
    coord: usize,
    bandwidths: &[f64],
    cfg: &PipelineConfig,
) -> Result<Vec<CoordinateReport>> {
    let prepared = prepare(data, cfg)?;
    let hs: Vec<BandwidthSource> = bandwidths.iter().map(|&h| BandwidthSource::Fixed(h)).collect();
    screen_with(data, &prepared, coord, &hs, cfg)
}

/// Screens every coordinate in `coords` (input order), sharing one projector.
pub fn screen_all(data: &Dataset, coords: &[usize], cfg: &PipelineConfig) -> Result<Vec<CoordinateReport>> {
    if coords.is_empty() {
        return Ok(Vec::new());
    }
    let prepared = prepare(data, cfg)?;
    coords
        .par_iter()
        .map(|&j| screen_prepared(data, &prepared, j, cfg))
        .collect()
}

/// Cross-validates the bandwidth of coordinate `coord` without running the tests.
pub fn cross_validate(
    data: &Dataset,
    coord: usize,
    candidates: &[f64],
    folds: usize,
    cfg: &PipelineConfig,
) -> Result<CvResult> {
    let prepared = prepare(data, cfg)?;
    let inputs = prepared.inputs(data, coord).stage("inputs")?;
    let y = data.y.slice(s![prepared.estimation_rows.clone()]);
    let last = inputs.ncols() - 1;
    let x_col: Vec<f64> = inputs.column(last).to_vec();
    let half_width = cfg.half_width.unwrap_or_else(|| empirical_half_width(&x_col));
    let arch = NetworkArchitecture::new(
        inputs.ncols(),
        cfg.regressor_arch.hidden_layers,
        cfg.regressor_arch.hidden_width,
        regressor_level(y, cfg),
    )
    .stage("bandwidth")?;
    let cv_cfg = CvConfig {
        candidates: candidates.to_vec(),
        folds,
        grid_size: cfg.grid_size,
        half_width: Some(half_width),
        seed: StageSeeds::derive(cfg.seed, coord).cv,
    };
    cv_bandwidth(inputs.view(), y, last, arch, &cfg.regressor, &cv_cfg).stage("bandwidth")
}

#[derive(Debug, Clone, Copy)]
enum BandwidthSource {
    Fixed(f64),
    Cv,
}

struct RegressionStage {
    model: NetworkModel,
    scaling: InputScaling,
    summary: FitSummary,
    level: f64,
}

fn screen_with(
    data: &Dataset,
    prepared: &Prepared,
    coord: usize,
    bandwidths: &[BandwidthSource],
    cfg: &PipelineConfig,
) -> Result<Vec<CoordinateReport>> {
    let inputs = prepared.inputs(data, coord).stage("inputs")?;
    let y = data.y.slice(s![prepared.estimation_rows.clone()]);
    let dim = inputs.ncols();
    let last = dim - 1;
    let seeds = StageSeeds::derive(cfg.seed, coord);

    let level = regressor_level(y, cfg);
    let reg_arch = NetworkArchitecture::new(dim, cfg.regressor_arch.hidden_layers, cfg.regressor_arch.hidden_width, level)
        .stage("regressor")?;
    let reg_cfg = cfg.regressor.clone().with_seed(seeds.regressor);
    let fit = train_regressor_with_trace(inputs.view(), y, reg_arch, &reg_cfg).stage("regressor")?;
    let regression = RegressionStage {
        summary: FitSummary::new(fit.best_epoch, &fit.train_trace, &fit.val_trace),
        model: fit.model,
        scaling: fit.scaling,
        level,
    };

    let x_col: Vec<f64> = inputs.column(last).to_vec();
    let half_width = match cfg.half_width {
        Some(b) => b,
        None => empirical_half_width(&x_col),
    };

    bandwidths
        .iter()
        .map(|source| {
            let (h, cv) = match *source {
                BandwidthSource::Fixed(h) => (h, None),
                BandwidthSource::Cv => {
                    let BandwidthChoice::CrossValidated { candidates, folds } = &cfg.bandwidth else {
                        unreachable!("cv source implies a cv configuration")
                    };
                    let cv_cfg = CvConfig {
                        candidates: candidates.clone(),
                        folds: *folds,
                        grid_size: cfg.grid_size,
                        half_width: Some(half_width),
                        seed: seeds.cv,
                    };
                    let res = cv_bandwidth(inputs.view(), y, last, reg_arch, &cfg.regressor, &cv_cfg).stage("bandwidth")?;
                    (res.best, Some(res))
                }
            };
            finish_bandwidth(data, prepared, coord, inputs.view(), y, &regression, h, half_width, cv, seeds, cfg)
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn finish_bandwidth(
    data: &Dataset,
    prepared: &Prepared,
    coord: usize,
    inputs: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    regression: &RegressionStage,
    h: f64,
    half_width: f64,
    cv: Option<CvResult>,
    seeds: StageSeeds,
    cfg: &PipelineConfig,
) -> Result<CoordinateReport> {
    let n = inputs.nrows();
    let last = inputs.ncols() - 1;
    let spec = SmoothingSpec::new(h, cfg.grid_size, half_width).stage("bandwidth")?;

    let score_arch = NetworkArchitecture::new(
        inputs.ncols(),
        cfg.score_arch.hidden_layers,
        cfg.score_arch.hidden_width,
        cfg.score_truncation,
    )
    .stage("score")?;
    let score_cfg = cfg.score.clone().with_seed(seeds.score);
    let score_fit = train_score(inputs, score_arch, &score_cfg, &spec).stage("score")?;
    let score_summary = FitSummary::new(score_fit.best_epoch, &score_fit.loss_trace, &score_fit.validation_trace);

    let fitted = regression.model.predict(inputs).stage("centering")?;
    let score_values = score_fit.model.predict(inputs).stage("centering")?;
    let raw_residuals: Array1<f64> = &y - &fitted;
    let delta = delta_hat(raw_residuals.view(), score_values.view());
    let centered: CenteredEstimator =
        center(regression.model.clone(), score_fit.model.clone(), delta).stage("centering")?;
    let centered_residuals = &y - &centered.predict(inputs).stage("centering")?;

    let interior: Vec<usize> = (0..n).filter(|&i| spec.is_interior(inputs[(i, last)])).collect();
    let d_centered = smoothed_partials(&centered, inputs, last, &interior, &spec).stage("smoothing")?;
    let d_raw = smoothed_partials(&regression.model, inputs, last, &interior, &spec).stage("smoothing")?;

    let centered_report = evaluate_tests(
        &d_centered,
        n,
        centered_residuals.view(),
        score_values.view(),
        &cfg.tests,
        &TruncationPsi::from_derivatives(&d_centered),
    )
    .stage("tests")?;
    let noncentered_report = evaluate_tests(
        &d_raw,
        n,
        raw_residuals.view(),
        score_values.view(),
        &cfg.tests,
        &TruncationPsi::from_derivatives(&d_raw),
    )
    .stage("tests")?;

    let models = cfg.keep_models.then(|| ReportModels {
        regressor: regression.model.clone(),
        score: score_fit.model.clone(),
        regressor_scaling: regression.scaling.clone(),
        projector: prepared.projector.clone(),
    });
    Ok(CoordinateReport {
        coordinate: coord,
        column_name: data.column_names[coord].clone(),
        mode: cfg.mode,
        n_total: data.n(),
        n_estimation: n,
        reserved_rows: prepared.reserved_rows.len(),
        conditioning_dim: inputs.ncols() - 1,
        bandwidth: h,
        half_width,
        grid_size: cfg.grid_size,
        interior_count: interior.len(),
        delta: centered.delta,
        degenerate_score: centered.degenerate_score,
        regressor_truncation: regression.level,
        centered: centered_report,
        noncentered: noncentered_report,
        cv,
        seeds,
        regressor_fit: regression.summary.clone(),
        score_fit: score_summary,
        models,
        config: cfg.clone(),
    })
}
