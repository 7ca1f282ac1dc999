//! Structural connectivity matrices: ingestion, log-normalization and
//! decomposition into per-region sub-networks.
//!
//! A connectome is an `N x N` symmetric matrix of nonnegative fiber counts.
//! Row `i` is the sub-network of region `i`: its connection strengths to
//! every region. Counts are heavily skewed, so each matrix is mapped through
//! `log2(v + 1)` and then z-scored with its own mean and population standard
//! deviation before it reaches the model.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Absolute tolerance for the symmetry check on raw counts.
pub const SYMMETRY_TOLERANCE: f64 = 1e-9;

/// On-disk text layouts accepted by [`load_matrix`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixFormat {
    /// Comma separated rows, optional header row of region labels.
    Csv,
    /// Whitespace separated rows, optional header row of region labels.
    DenseText,
}

impl MatrixFormat {
    /// Picks a format from a file extension (`.csv` is CSV, anything else dense text).
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => MatrixFormat::Csv,
            _ => MatrixFormat::DenseText,
        }
    }

    fn split<'a>(&self, line: &'a str) -> Vec<&'a str> {
        match self {
            MatrixFormat::Csv => line.split(',').map(str::trim).collect(),
            MatrixFormat::DenseText => line.split_whitespace().collect(),
        }
    }
}

/// Default label for region `i`: `R000`, `R001`, ...
pub fn default_label(i: usize) -> String {
    format!("R{i:03}")
}

/// Symmetric nonnegative fiber-count matrix with region labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectivityMatrix {
    n_regions: usize,
    values: Vec<f64>,
    region_labels: Vec<String>,
}

impl ConnectivityMatrix {
    /// Validates and wraps a row-major `n x n` matrix.
    ///
    /// When `labels` is `None` the regions are named `R000..`.
    pub fn new(rows: Vec<Vec<f64>>, labels: Option<Vec<String>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::shape("connectivity matrix is empty"));
        }
        let mut values = Vec::with_capacity(n * n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::shape(format!(
                    "matrix is not square: row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            values.extend_from_slice(row);
        }
        Self::from_flat(n, values, labels)
    }

    /// Same as [`ConnectivityMatrix::new`] for an already flattened row-major buffer.
    pub fn from_flat(n: usize, values: Vec<f64>, labels: Option<Vec<String>>) -> Result<Self> {
        if n == 0 || values.len() != n * n {
            return Err(Error::shape(format!(
                "expected {} entries for a {n}x{n} matrix, found {}",
                n * n,
                values.len()
            )));
        }
        for (idx, &v) in values.iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Value(format!(
                    "entry [{}][{}] = {v} is not a finite nonnegative count",
                    idx / n,
                    idx % n
                )));
            }
        }
        let mut worst = (0usize, 0usize, 0.0f64);
        for i in 0..n {
            for j in (i + 1)..n {
                let diff = (values[i * n + j] - values[j * n + i]).abs();
                if diff > worst.2 {
                    worst = (i, j, diff);
                }
            }
        }
        if worst.2 > SYMMETRY_TOLERANCE {
            return Err(Error::Symmetry {
                row: worst.0,
                col: worst.1,
                diff: worst.2,
                tol: SYMMETRY_TOLERANCE,
            });
        }
        let region_labels = match labels {
            Some(labels) => {
                validate_labels(&labels, n)?;
                labels
            }
            None => (0..n).map(default_label).collect(),
        };
        Ok(Self {
            n_regions: n,
            values,
            region_labels,
        })
    }

    pub fn n_regions(&self) -> usize {
        self.n_regions
    }

    /// Row-major entries.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.n_regions + col]
    }

    pub fn region_labels(&self) -> &[String] {
        &self.region_labels
    }

    /// Serializes as CSV with a header row of region labels.
    ///
    /// Integral counts are written without a fractional part; the output
    /// parses back to the identical matrix through [`load_matrix`].
    pub fn to_csv(&self) -> String {
        let n = self.n_regions;
        let mut out = self.region_labels.join(",");
        out.push('\n');
        for i in 0..n {
            for j in 0..n {
                if j > 0 {
                    out.push(',');
                }
                let v = self.values[i * n + j];
                if v.fract() == 0.0 && v.abs() < 1e15 {
                    let _ = write!(out, "{}", v as i64);
                } else {
                    let _ = write!(out, "{v:?}");
                }
            }
            out.push('\n');
        }
        out
    }
}

fn validate_labels(labels: &[String], n: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::shape(format!(
            "{} region labels supplied for {n} regions",
            labels.len()
        )));
    }
    let mut seen = std::collections::HashSet::with_capacity(n);
    for label in labels {
        if label.is_empty() {
            return Err(Error::Value("empty region label".into()));
        }
        if !seen.insert(label.as_str()) {
            return Err(Error::Value(format!("duplicate region label {label:?}")));
        }
    }
    Ok(())
}

fn parse_fields(text: &str, format: MatrixFormat) -> Result<(Option<Vec<String>>, Vec<Vec<f64>>), String> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty()).peekable();
    let mut labels = None;
    if let Some(first) = lines.peek() {
        let fields = format.split(first);
        if fields.iter().any(|f| f.parse::<f64>().is_err()) {
            labels = Some(fields.iter().map(|s| s.to_string()).collect());
            lines.next();
        }
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let row = format
            .split(line)
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| format!("data row {lineno}: cannot parse {f:?} as a number"))
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    Ok((labels, rows))
}

/// Parses a connectivity matrix from text.
///
/// If any field of the first non-empty line fails to parse as a number, that
/// line is taken as the header of region labels.
pub fn parse_matrix(text: &str, format: MatrixFormat) -> Result<ConnectivityMatrix> {
    let (labels, rows) = parse_fields(text, format).map_err(|msg| Error::Parse {
        path: "<string>".into(),
        msg,
    })?;
    ConnectivityMatrix::new(rows, labels)
}

/// Reads and validates a connectivity matrix file.
pub fn load_matrix(path: impl AsRef<Path>, format: MatrixFormat) -> Result<ConnectivityMatrix> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (labels, rows) = parse_fields(&text, format).map_err(|msg| Error::Parse {
        path: path.to_path_buf(),
        msg,
    })?;
    ConnectivityMatrix::new(rows, labels)
}

/// Log-transformed, z-scored connectome.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedConnectome {
    n_regions: usize,
    values: Vec<f64>,
    mu: f64,
    sigma: f64,
    region_labels: Vec<String>,
}

impl NormalizedConnectome {
    pub fn n_regions(&self) -> usize {
        self.n_regions
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.n_regions + col]
    }

    /// Mean of the log-transformed entries.
    pub fn mu(&self) -> f64 {
        self.mu
    }

    /// Population standard deviation of the log-transformed entries.
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn region_labels(&self) -> &[String] {
        &self.region_labels
    }
}

/// Maps every entry through `log2(v + 1)` and standardizes the whole matrix
/// with the mean and population standard deviation of the transformed values.
pub fn log_normalize(sc: &ConnectivityMatrix) -> Result<NormalizedConnectome> {
    let logged: Vec<f64> = sc.values.iter().map(|&v| (v + 1.0).log2()).collect();
    let count = logged.len() as f64;
    let mu = logged.iter().sum::<f64>() / count;
    let var = logged.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / count;
    let sigma = var.sqrt();
    if sigma == 0.0 || !sigma.is_finite() {
        return Err(Error::DegenerateInput(
            "log-transformed matrix has zero variance".into(),
        ));
    }
    let values = logged.iter().map(|v| (v - mu) / sigma).collect();
    Ok(NormalizedConnectome {
        n_regions: sc.n_regions,
        values,
        mu,
        sigma,
        region_labels: sc.region_labels.clone(),
    })
}

/// One subject's sequence of sub-networks: row `i` is region `i`'s
/// normalized connectivity to all regions.
#[derive(Debug, Clone, PartialEq)]
pub struct SubNetworkBatch {
    pub subject_id: String,
    pub rows: Vec<Vec<f64>>,
}

impl SubNetworkBatch {
    pub fn n_regions(&self) -> usize {
        self.rows.len()
    }

    /// Re-stacks the rows into a row-major matrix.
    pub fn to_flat(&self) -> Vec<f64> {
        self.rows.iter().flatten().copied().collect()
    }
}

/// Splits a normalized connectome into its per-region sub-networks.
pub fn to_subnetworks(nc: &NormalizedConnectome, subject_id: impl Into<String>) -> SubNetworkBatch {
    let n = nc.n_regions;
    SubNetworkBatch {
        subject_id: subject_id.into(),
        rows: nc.values.chunks(n).map(<[f64]>::to_vec).collect(),
    }
}
