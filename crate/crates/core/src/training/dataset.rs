use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::Hyper;
use crate::systems::{System, SystemError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset must contain at least one sample")]
    Empty,
    #[error("sample {row}: {source}")]
    System { row: usize, source: SystemError },
    #[error("sample {row} holds a non-finite entry")]
    NonFinite { row: usize },
    #[error("sample {row} lies outside the sampling box")]
    OutOfBounds { row: usize },
    #[error("inconsistent shapes: {0}")]
    Shape(String),
    #[error("bad CSV header: {0}")]
    Header(String),
    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("row {row}: cannot parse {value:?} as a number")]
    Parse { row: usize, value: String },
}

/// Provenance of a sampled dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub system: String,
    pub seed: u64,
    pub count: usize,
    pub x_lb: Vec<f64>,
    pub x_ub: Vec<f64>,
    pub u_lim: Vec<f64>,
}

/// Tuples `(x, u, ẋ)` stored column-wise: row `i` of each matrix is sample `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub states: Array2<f64>,
    pub inputs: Array2<f64>,
    pub derivs: Array2<f64>,
    pub meta: Option<DatasetMeta>,
}

impl Dataset {
    pub fn new(states: Array2<f64>, inputs: Array2<f64>, derivs: Array2<f64>) -> Result<Self, DatasetError> {
        let rows = states.nrows();
        if rows == 0 {
            return Err(DatasetError::Empty);
        }
        if inputs.nrows() != rows || derivs.nrows() != rows || derivs.ncols() != states.ncols() {
            return Err(DatasetError::Shape(format!(
                "states {:?}, inputs {:?}, derivatives {:?}",
                states.dim(),
                inputs.dim(),
                derivs.dim()
            )));
        }
        for i in 0..rows {
            let finite = states.row(i).iter().chain(inputs.row(i)).chain(derivs.row(i)).all(|v| v.is_finite());
            if !finite {
                return Err(DatasetError::NonFinite { row: i });
            }
        }
        Ok(Dataset { states, inputs, derivs, meta: None })
    }

    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn state_dim(&self) -> usize {
        self.states.ncols()
    }

    pub fn control_dim(&self) -> usize {
        self.inputs.ncols()
    }

    /// Samples at the given row indices, in that order.
    pub fn select(&self, rows: &[usize]) -> Dataset {
        let take = |a: &Array2<f64>| a.select(ndarray::Axis(0), rows);
        Dataset { states: take(&self.states), inputs: take(&self.inputs), derivs: take(&self.derivs), meta: None }
    }

    /// `[x, u]` per row.
    pub fn joint(&self) -> Array2<f64> {
        ndarray::concatenate(ndarray::Axis(1), &[self.states.view(), self.inputs.view()]).expect("equal rows")
    }

    /// Checks every sample against the boxes recorded in `meta`.
    pub fn check_bounds(&self) -> Result<(), DatasetError> {
        let Some(meta) = &self.meta else { return Ok(()) };
        for i in 0..self.len() {
            let x_ok = self.states.row(i).iter().zip(meta.x_lb.iter().zip(&meta.x_ub)).all(|(x, (l, u))| l <= x && x <= u);
            let u_ok = self.inputs.row(i).iter().zip(&meta.u_lim).all(|(u, lim)| u.abs() <= *lim);
            if !(x_ok && u_ok) {
                return Err(DatasetError::OutOfBounds { row: i });
            }
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), DatasetError> {
        let file = std::fs::File::create(path).map_err(|e| DatasetError::Io { path: path.display().to_string(), source: e })?;
        self.write_csv_to(file)
    }

    /// Same layout as [`Dataset::write_csv`] into any writer, after whatever
    /// the writer already holds. Lines starting with `#` are skipped on read.
    pub fn write_csv_to<W: std::io::Write>(&self, out: W) -> Result<(), DatasetError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(header(self.state_dim(), self.control_dim()))?;
        for i in 0..self.len() {
            let row: Vec<String> =
                self.states.row(i).iter().chain(self.inputs.row(i)).chain(self.derivs.row(i)).map(|v| format_float(*v)).collect();
            w.write_record(&row)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Dataset, DatasetError> {
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
        let head: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let (n, m) = parse_header(&head)?;
        let mut values = Vec::new();
        let mut rows = 0;
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            if rec.len() != 2 * n + m {
                return Err(DatasetError::Shape(format!("row {i} has {} fields, expected {}", rec.len(), 2 * n + m)));
            }
            for field in rec.iter() {
                let v: f64 = field.trim().parse().map_err(|_| DatasetError::Parse { row: i, value: field.to_string() })?;
                values.push(v);
            }
            rows += 1;
        }
        if rows == 0 {
            return Err(DatasetError::Empty);
        }
        let all = Array2::from_shape_vec((rows, 2 * n + m), values).expect("row lengths checked");
        let cols = |a: usize, b: usize| all.slice(ndarray::s![.., a..b]).to_owned();
        Dataset::new(cols(0, n), cols(n, n + m), cols(n + m, 2 * n + m))
    }
}

/// Seventeen significant digits, enough to round-trip any `f64`.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

pub(crate) fn header(n: usize, m: usize) -> Vec<String> {
    (1..=n).map(|i| format!("x{i}")).chain((1..=m).map(|i| format!("u{i}"))).chain((1..=n).map(|i| format!("xdot{i}"))).collect()
}

fn parse_header(head: &[String]) -> Result<(usize, usize), DatasetError> {
    let n = head.iter().filter(|h| h.starts_with('x') && !h.starts_with("xdot")).count();
    let m = head.iter().filter(|h| h.starts_with('u')).count();
    if n == 0 || m == 0 || header(n, m) != head {
        return Err(DatasetError::Header(head.join(",")));
    }
    Ok((n, m))
}

/// Draws `count` i.i.d. uniform `(x, u)` pairs over the boxes in `hyper` and
/// labels them with the exact derivative of `system`.
pub fn sample_dataset(system: &System, hyper: &Hyper, count: usize, seed: u64) -> Result<Dataset, DatasetError> {
    if count == 0 {
        return Err(DatasetError::Empty);
    }
    let (n, m) = (hyper.state_dim(), hyper.control_dim());
    if n != system.state_dim() || m != system.control_dim() {
        return Err(DatasetError::Shape(format!(
            "box is {n}×{m}, {system} needs {}×{}",
            system.state_dim(),
            system.control_dim()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states = Array2::zeros((count, n));
    let mut inputs = Array2::zeros((count, m));
    for i in 0..count {
        for j in 0..n {
            states[[i, j]] = rng.random_range(hyper.x_lb[j]..=hyper.x_ub[j]);
        }
        for k in 0..m {
            let lim = hyper.u_lim[k];
            inputs[[i, k]] = if lim > 0.0 { rng.random_range(-lim..=lim) } else { 0.0 };
        }
    }
    let derivs = label(system, states.view(), inputs.view())?;
    let mut data = Dataset::new(states, inputs, derivs)?;
    data.meta = Some(DatasetMeta {
        system: system.name().to_string(),
        seed,
        count,
        x_lb: hyper.x_lb.clone(),
        x_ub: hyper.x_ub.clone(),
        u_lim: hyper.u_lim.clone(),
    });
    Ok(data)
}

fn label(system: &System, xs: ArrayView2<f64>, us: ArrayView2<f64>) -> Result<Array2<f64>, DatasetError> {
    let mut out = Array2::zeros(xs.raw_dim());
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let d = system.dynamics(xs.row(i), us.row(i)).map_err(|source| DatasetError::System { row: i, source })?;
        row.assign(&d);
    }
    Ok(out)
}
