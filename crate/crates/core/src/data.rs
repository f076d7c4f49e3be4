//! Tabular datasets: a response column and a matrix of predictors.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};

use crate::error::{Result, ScreenError};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub y: Array1<f64>,
    /// `n x d`, columns in file order with the target removed.
    pub x: Array2<f64>,
    pub column_names: Vec<String>,
    pub target_name: String,
    pub source_path: Option<PathBuf>,
}

impl Dataset {
    pub fn new(y: Array1<f64>, x: Array2<f64>, column_names: Vec<String>, target_name: impl Into<String>) -> Result<Self> {
        if y.len() != x.nrows() {
            return Err(ScreenError::Shape {
                expected: x.nrows(),
                got: y.len(),
            });
        }
        if column_names.len() != x.ncols() {
            return Err(ScreenError::Shape {
                expected: x.ncols(),
                got: column_names.len(),
            });
        }
        if y.len() < 2 {
            return Err(ScreenError::Schema(format!("need at least 2 rows, got {}", y.len())));
        }
        if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
            return Err(ScreenError::DegenerateInput("dataset contains non-finite values".into()));
        }
        Ok(Self {
            y,
            x,
            column_names,
            target_name: target_name.into(),
            source_path: None,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    /// Resolves a predictor by name, or by 1-based position when the token is an integer.
    pub fn resolve_column(&self, token: &str) -> Result<usize> {
        if let Some(pos) = self.column_names.iter().position(|c| c == token) {
            return Ok(pos);
        }
        match token.parse::<usize>() {
            Ok(k) if (1..=self.d()).contains(&k) => Ok(k - 1),
            _ => Err(ScreenError::Schema(format!("unknown predictor column '{token}'"))),
        }
    }

    /// Writes the dataset with the target as the first column.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(File::create(path)?);
        let mut header = vec![self.target_name.as_str()];
        header.extend(self.column_names.iter().map(String::as_str));
        writeln!(out, "{}", header.join(","))?;
        for (i, row) in self.x.rows().into_iter().enumerate() {
            write!(out, "{}", self.y[i])?;
            for v in row {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Reads a headed CSV file. Parse errors report the 1-based file line and the column name.
pub fn load_csv(path: &Path, target: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let target_pos = headers
        .iter()
        .position(|h| h == target)
        .ok_or_else(|| ScreenError::Schema(format!("target column '{target}' not found")))?;
    let column_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|&(c, _)| c != target_pos)
        .map(|(_, h)| h.clone())
        .collect();

    let mut y = Vec::new();
    let mut x = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let line = r + 2;
        if record.len() != headers.len() {
            return Err(ScreenError::Parse {
                row: line,
                column: String::new(),
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        for (c, cell) in record.iter().enumerate() {
            let value: f64 = cell.parse().map_err(|_| ScreenError::Parse {
                row: line,
                column: headers[c].clone(),
                message: format!("'{cell}' is not a number"),
            })?;
            if !value.is_finite() {
                return Err(ScreenError::Parse {
                    row: line,
                    column: headers[c].clone(),
                    message: format!("'{cell}' is not finite"),
                });
            }
            if c == target_pos {
                y.push(value);
            } else {
                x.push(value);
            }
        }
    }
    let n = y.len();
    let x = Array2::from_shape_vec((n, column_names.len()), x).map_err(|e| ScreenError::Schema(e.to_string()))?;
    let mut data = Dataset::new(Array1::from(y), x, column_names, target)?;
    data.source_path = Some(path.to_path_buf());
    Ok(data)
}
