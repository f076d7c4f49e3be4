//! Synthetic factor-model designs and Monte Carlo size/power studies.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Result, ScreenError};
use crate::pipeline::{screen_coordinate_multi, CoordinateReport, PipelineConfig};
use crate::seed::{derive_seed, rng_from_seed};
use crate::stats::TestReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    Nonlinear,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hypothesis {
    Null,
    Alternative,
}

/// How the second parameter of `N(0, s)` is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpreadReading {
    Variance,
    StandardDeviation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub model: Model,
    pub hypothesis: Hypothesis,
    /// Estimation sample size.
    pub n: usize,
    pub d: usize,
    /// Extra rows generated ahead of the sample for projector pretraining.
    pub reserved: usize,
    pub factor_spread: f64,
    pub idiosyncratic_spread: f64,
    pub noise_spread: f64,
    pub spread_reading: SpreadReading,
    pub seed: u64,
}

impl DgpSpec {
    /// The simulation design with `n` estimation rows and dimension `d`.
    pub fn standard(model: Model, hypothesis: Hypothesis, n: usize, d: usize, seed: u64) -> Self {
        Self {
            model,
            hypothesis,
            n,
            d,
            reserved: 100,
            factor_spread: 0.6,
            idiosyncratic_spread: 0.6,
            noise_spread: 0.3,
            spread_reading: SpreadReading::Variance,
            seed,
        }
    }

    /// Number of latent factors.
    pub fn factors(&self) -> usize {
        match self.model {
            Model::Nonlinear => 4,
            Model::Linear => 5,
        }
    }

    /// 0-based index of the screened predictor `X_3`.
    pub const SCREENED: usize = 2;

    fn sd(&self, spread: f64) -> f64 {
        match self.spread_reading {
            SpreadReading::Variance => spread.sqrt(),
            SpreadReading::StandardDeviation => spread,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 3 || self.d < self.factors() {
            return Err(ScreenError::Config(format!("dimension {} is too small for the design", self.d)));
        }
        if self.n < 2 {
            return Err(ScreenError::Config("n must be at least 2".into()));
        }
        for v in [self.factor_spread, self.idiosyncratic_spread, self.noise_spread] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ScreenError::Config("spreads must be non-negative".into()));
            }
        }
        Ok(())
    }
}

/// Mean of `Y` under the null for factor row `f` and idiosyncratic `u_1`.
pub fn null_mean(model: Model, f: &[f64], u1: f64) -> f64 {
    match model {
        Model::Nonlinear => {
            (f[0] + u1).sin() + (8.0 + f[1]).ln() * (8.0 + f[2]).ln() + (-f[3] * f[3] / 2.0).exp()
        }
        Model::Linear => f[0] - f[1] + f[2] + f[3] - f[4],
    }
}

/// Signal added under the alternative as a function of `X_3`.
pub fn alternative_signal(model: Model, x3: f64) -> f64 {
    match model {
        Model::Nonlinear => x3 * x3 / 4.0,
        Model::Linear => x3 / 16.0,
    }
}

pub fn regression_mean(model: Model, hypothesis: Hypothesis, f: &[f64], u1: f64, x3: f64) -> f64 {
    let base = null_mean(model, f, u1);
    match hypothesis {
        Hypothesis::Null => base,
        Hypothesis::Alternative => base + alternative_signal(model, x3),
    }
}

/// A generated design with its latent components. Rows `0..reserved` come first.
#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub dataset: Dataset,
    /// Loadings, `d x r`.
    pub loadings: Array2<f64>,
    pub factors: Array2<f64>,
    pub idiosyncratic: Array2<f64>,
    pub noise: Array1<f64>,
}

impl GeneratedData {
    /// `X_1 - B_1 F` for every row.
    pub fn u1_from_x(&self) -> Array1<f64> {
        let bf = self.factors.dot(&self.loadings.row(0));
        &self.dataset.x.column(0) - &bf
    }
}

pub fn gen_dgp(spec: &DgpSpec) -> Result<GeneratedData> {
    spec.validate()?;
    let r = spec.factors();
    let rows = spec.n + spec.reserved;
    let d = spec.d;
    let bound = 3f64.sqrt();

    let mut rng = rng_from_seed(derive_seed(spec.seed, "loadings", 0));
    let loadings = Array2::from_shape_fn((d, r), |_| rng.random_range(-bound..=bound));
    let mut rng = rng_from_seed(derive_seed(spec.seed, "factors", 0));
    let f_sd = spec.sd(spec.factor_spread);
    let factors = Array2::from_shape_fn((rows, r), |_| f_sd * rng.sample::<f64, _>(StandardNormal));
    let mut rng = rng_from_seed(derive_seed(spec.seed, "idiosyncratic", 0));
    let u_sd = spec.sd(spec.idiosyncratic_spread);
    let idiosyncratic = Array2::from_shape_fn((rows, d), |_| u_sd * rng.sample::<f64, _>(StandardNormal));
    let mut rng = rng_from_seed(derive_seed(spec.seed, "noise", 0));
    let e_sd = spec.sd(spec.noise_spread);
    let noise: Array1<f64> = (0..rows).map(|_| e_sd * rng.sample::<f64, _>(StandardNormal)).collect();

    let x = factors.dot(&loadings.t()) + &idiosyncratic;
    let mut generated = GeneratedData {
        dataset: Dataset::new(
            Array1::zeros(rows),
            x,
            (1..=d).map(|k| format!("X{k}")).collect(),
            "Y",
        )?,
        loadings,
        factors,
        idiosyncratic,
        noise,
    };
    let u1 = generated.u1_from_x();
    let x3 = generated.dataset.x.column(DgpSpec::SCREENED).to_owned();
    let y: Array1<f64> = (0..rows)
        .map(|i| {
            let f = generated.factors.row(i).to_vec();
            regression_mean(spec.model, spec.hypothesis, &f, u1[i], x3[i]) + generated.noise[i]
        })
        .collect();
    generated.dataset.y = y;
    Ok(generated)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    FixedT,
    Sup,
    Square,
}

impl TestKind {
    pub const ALL: [TestKind; 3] = [TestKind::FixedT, TestKind::Sup, TestKind::Square];

    pub fn label(self) -> &'static str {
        match self {
            TestKind::FixedT => "fixed-t test",
            TestKind::Sup => "sup test",
            TestKind::Square => "square test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    NonCentered,
    Centered,
}

impl Variant {
    pub const ALL: [Variant; 2] = [Variant::NonCentered, Variant::Centered];

    pub fn label(self) -> &'static str {
        match self {
            Variant::NonCentered => "Non-centered",
            Variant::Centered => "Centered",
        }
    }
}

/// One test decision of one replication.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub test: TestKind,
    pub variant: Variant,
    pub bandwidth: f64,
    /// `None` when the test could not decide (zero variance estimate).
    pub reject: Option<bool>,
}

/// Extracts the six decisions of one coordinate report.
pub fn decisions_of(report: &CoordinateReport) -> Vec<Decision> {
    let mut out = Vec::with_capacity(6);
    for variant in Variant::ALL {
        let tests: &TestReport = match variant {
            Variant::Centered => &report.centered,
            Variant::NonCentered => &report.noncentered,
        };
        for (test, outcome) in TestKind::ALL.into_iter().zip([tests.fixed_t, tests.sup, tests.square]) {
            out.push(Decision {
                test,
                variant,
                bandwidth: report.bandwidth,
                reject: outcome.reject,
            });
        }
    }
    out
}

/// Produces the decisions of replication `rep`.
pub trait ReplicationRunner: Sync {
    fn run(&self, hypothesis: Hypothesis, rep: usize) -> Result<Vec<Decision>>;
}

/// Generates a fresh design per replication and runs the full pipeline on it.
#[derive(Debug, Clone)]
pub struct PipelineRunner {
    pub dgp: DgpSpec,
    pub pipeline: PipelineConfig,
    pub bandwidths: Vec<f64>,
    pub master_seed: u64,
}

impl PipelineRunner {
    /// Design and pipeline settings for replication `rep`.
    pub fn replication(&self, hypothesis: Hypothesis, rep: usize) -> (DgpSpec, PipelineConfig) {
        let dgp = DgpSpec {
            hypothesis,
            seed: derive_seed(self.master_seed, "replication-data", rep as u64),
            ..self.dgp.clone()
        };
        let pipeline = PipelineConfig {
            rbar: self.dgp.factors(),
            reserved_rows: Some(self.dgp.reserved),
            seed: derive_seed(self.master_seed, "replication-fit", rep as u64),
            keep_models: false,
            ..self.pipeline.clone()
        };
        (dgp, pipeline)
    }
}

impl ReplicationRunner for PipelineRunner {
    fn run(&self, hypothesis: Hypothesis, rep: usize) -> Result<Vec<Decision>> {
        let (dgp, cfg) = self.replication(hypothesis, rep);
        let data = gen_dgp(&dgp)?;
        let reports = screen_coordinate_multi(&data.dataset, DgpSpec::SCREENED, &self.bandwidths, &cfg)?;
        Ok(reports.iter().flat_map(decisions_of).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub hypothesis: Hypothesis,
    pub test: TestKind,
    pub variant: Variant,
    pub bandwidth: f64,
    pub rejections: usize,
    /// Replications that produced a decision for this cell.
    pub decided: usize,
    pub rate: f64,
    /// `2 sqrt(p (1 - p) / R)`.
    pub band: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloResult {
    pub replications: usize,
    pub bandwidths: Vec<f64>,
    pub cells: Vec<Cell>,
    /// Failed replications per hypothesis, with their error messages.
    pub failures: Vec<ReplicationFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationFailure {
    pub hypothesis: Hypothesis,
    pub replication: usize,
    pub message: String,
}

impl MonteCarloResult {
    pub fn cell(&self, hypothesis: Hypothesis, test: TestKind, variant: Variant, bandwidth: f64) -> Option<&Cell> {
        self.cells
            .iter()
            .find(|c| c.hypothesis == hypothesis && c.test == test && c.variant == variant && c.bandwidth == bandwidth)
    }

    pub fn failure_count(&self, hypothesis: Hypothesis) -> usize {
        self.failures.iter().filter(|f| f.hypothesis == hypothesis).count()
    }

    /// Size (power) table: one row per test and variant, one column per bandwidth.
    pub fn table_csv(&self) -> String {
        let mut out = String::from("test,variant");
        for h in &self.bandwidths {
            write!(out, ",h={h}").unwrap();
        }
        out.push('\n');
        for test in TestKind::ALL {
            for variant in Variant::ALL {
                write!(out, "{},{}", test.label(), variant.label()).unwrap();
                for &h in &self.bandwidths {
                    let size = self.cell(Hypothesis::Null, test, variant, h);
                    let power = self.cell(Hypothesis::Alternative, test, variant, h);
                    let entry = match (size, power) {
                        (Some(s), Some(p)) => format!("{:.2} ({:.2})", s.rate, p.rate),
                        (Some(s), None) => format!("{:.2}", s.rate),
                        (None, Some(p)) => format!("({:.2})", p.rate),
                        (None, None) => String::new(),
                    };
                    write!(out, ",{entry}").unwrap();
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn write(&self, csv_path: &Path, json_path: &Path, metadata: serde_json::Value) -> Result<()> {
        std::fs::write(csv_path, self.table_csv())?;
        let sidecar = serde_json::json!({ "metadata": metadata, "result": self });
        std::fs::write(json_path, serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }
}

/// Runs `replications` replications under each hypothesis and tallies every cell.
///
/// Replications run in parallel and are reduced in index order; a failed
/// replication is excluded from the rates and listed in `failures`.
pub fn run_monte_carlo<R: ReplicationRunner>(
    runner: &R,
    hypotheses: &[Hypothesis],
    bandwidths: &[f64],
    replications: usize,
) -> Result<MonteCarloResult> {
    if replications == 0 {
        return Err(ScreenError::Config("at least one replication is required".into()));
    }
    let mut cells = Vec::new();
    let mut failures = Vec::new();
    for &hypothesis in hypotheses {
        let outcomes: Vec<Result<Vec<Decision>>> =
            (0..replications).into_par_iter().map(|rep| runner.run(hypothesis, rep)).collect();
        let mut tallies: Vec<Cell> = Vec::new();
        for test in TestKind::ALL {
            for variant in Variant::ALL {
                for &h in bandwidths {
                    tallies.push(Cell {
                        hypothesis,
                        test,
                        variant,
                        bandwidth: h,
                        rejections: 0,
                        decided: 0,
                        rate: 0.0,
                        band: 0.0,
                    });
                }
            }
        }
        for (rep, outcome) in outcomes.into_iter().enumerate() {
            match outcome {
                Ok(decisions) => {
                    for dec in decisions {
                        let Some(reject) = dec.reject else { continue };
                        if let Some(cell) = tallies
                            .iter_mut()
                            .find(|c| c.test == dec.test && c.variant == dec.variant && c.bandwidth == dec.bandwidth)
                        {
                            cell.decided += 1;
                            cell.rejections += usize::from(reject);
                        }
                    }
                }
                Err(e) => failures.push(ReplicationFailure {
                    hypothesis,
                    replication: rep,
                    message: e.to_string(),
                }),
            }
        }
        for cell in &mut tallies {
            if cell.decided > 0 {
                let p = cell.rejections as f64 / cell.decided as f64;
                cell.rate = p;
                cell.band = 2.0 * (p * (1.0 - p) / cell.decided as f64).sqrt();
            } else {
                cell.rate = f64::NAN;
            }
        }
        cells.extend(tallies);
    }
    cells.retain(|c| c.decided > 0);
    Ok(MonteCarloResult {
        replications,
        bandwidths: bandwidths.to_vec(),
        cells,
        failures,
    })
}
