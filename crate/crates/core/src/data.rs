//! Datasets: synthetic generators, CSV ingestion, standardization and splitting.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{FsviError, Result};
use crate::objective::Targets;

/// Per-column affine statistics: `z = (v − mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Columns with zero spread; their `std` is stored as 1 so they are only centred.
    pub constant: Vec<bool>,
}

impl Standardization {
    /// Column means and population standard deviations.
    pub fn fit(values: ArrayView2<f64>) -> Result<Self> {
        if values.nrows() == 0 {
            return Err(FsviError::EmptyInput("cannot standardize an empty split".into()));
        }
        let mean = values.mean_axis(Axis(0)).unwrap();
        let std = values.std_axis(Axis(0), 0.0);
        let constant: Vec<bool> = std.iter().map(|s| !(*s > 0.0)).collect();
        let std = std.iter().zip(&constant).map(|(s, c)| if *c { 1.0 } else { *s }).collect();
        Ok(Self { mean: mean.to_vec(), std, constant })
    }

    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim], constant: vec![false; dim] }
    }

    pub fn apply(&self, values: ArrayView2<f64>) -> Array2<f64> {
        let mut out = values.to_owned();
        for mut row in out.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        out
    }

    pub fn invert(&self, values: ArrayView2<f64>) -> Array2<f64> {
        let mut out = values.to_owned();
        for mut row in out.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * s + m;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub y: Targets,
    pub feature_stats: Option<Standardization>,
    pub target_stats: Option<Standardization>,
}

impl Dataset {
    pub fn new(x: Array2<f64>, y: Targets) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(crate::error::dim_mismatch("target rows", x.nrows(), y.len()));
        }
        Ok(Self { x, y, feature_stats: None, target_stats: None })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select(Axis(0), idx),
            y: self.y.select(idx),
            feature_stats: self.feature_stats.clone(),
            target_stats: self.target_stats.clone(),
        }
    }

    /// Reinterprets a single real target column holding non-negative integers as labels.
    pub fn into_classification(self) -> Result<Dataset> {
        let labels = match &self.y {
            Targets::Class(_) => return Ok(self),
            Targets::Real(y) if y.ncols() == 1 => y
                .column(0)
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    if *v >= 0.0 && v.fract() == 0.0 {
                        Ok(*v as usize)
                    } else {
                        Err(FsviError::InvalidParameter(format!(
                            "row {i}: class label {v} is not a non-negative integer"
                        )))
                    }
                })
                .collect::<Result<Vec<_>>>()?,
            Targets::Real(y) => {
                return Err(FsviError::InvalidParameter(format!(
                    "classification needs one label column, found {}",
                    y.ncols()
                )))
            }
        };
        Ok(Dataset { y: Targets::Class(labels), target_stats: None, ..self })
    }
}

/// Two interleaved half-circles: the upper moon is `(cos t, sin t)` and the lower one is
/// `(1 − cos t, 0.5 − sin t)` for `t` evenly spaced on `[0, π]`, labelled 0 and 1. Noise is
/// added before shuffling.
pub fn two_moons<R: Rng + ?Sized>(n: usize, noise_sd: f64, rng: &mut R) -> Result<Dataset> {
    if n < 2 {
        return Err(FsviError::InvalidParameter("two_moons needs n >= 2".into()));
    }
    let n_out = n / 2;
    let n_in = n - n_out;
    let t = |i: usize, m: usize| {
        if m == 1 {
            0.0
        } else {
            std::f64::consts::PI * i as f64 / (m - 1) as f64
        }
    };
    let mut rows: Vec<([f64; 2], usize)> = Vec::with_capacity(n);
    for i in 0..n_out {
        let a = t(i, n_out);
        rows.push(([a.cos(), a.sin()], 0));
    }
    for i in 0..n_in {
        let a = t(i, n_in);
        rows.push(([1.0 - a.cos(), 0.5 - a.sin()], 1));
    }
    for (p, _) in rows.iter_mut() {
        for v in p.iter_mut() {
            *v += noise_sd * rng.sample::<f64, _>(StandardNormal);
        }
    }
    rows.shuffle(rng);
    let x = Array2::from_shape_fn((n, 2), |(i, j)| rows[i].0[j]);
    Dataset::new(x, Targets::Class(rows.iter().map(|r| r.1).collect()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// `y = sin(x) + noise` with `x` uniform on `[−4, −1] ∪ [1, 4]`.
    GapSine,
}

/// The gap left empty by [`SyntheticKind::GapSine`].
pub const GAP_SINE_GAP: (f64, f64) = (-1.0, 1.0);

pub fn synthetic_1d<R: Rng + ?Sized>(
    kind: SyntheticKind,
    n: usize,
    noise_sd: f64,
    rng: &mut R,
) -> Result<Dataset> {
    if n < 2 {
        return Err(FsviError::InvalidParameter("synthetic_1d needs n >= 2".into()));
    }
    match kind {
        SyntheticKind::GapSine => {
            let mut x = Array2::<f64>::zeros((n, 1));
            let mut y = Array2::<f64>::zeros((n, 1));
            for i in 0..n {
                let u: f64 = rng.random_range(1.0..4.0);
                let v = if i % 2 == 0 { -u } else { u };
                x[[i, 0]] = v;
                y[[i, 0]] = v.sin() + noise_sd * rng.sample::<f64, _>(StandardNormal);
            }
            Dataset::new(x, Targets::Real(y))
        }
    }
}

/// Reads a numeric table; `target_columns` become real targets and the remaining columns,
/// in order, become features.
pub fn load_csv(path: &Path, target_columns: &[usize], has_header: bool) -> Result<Dataset> {
    let (cols, rows) = read_table(path, has_header)?;
    for &t in target_columns {
        if t >= cols {
            return Err(FsviError::InvalidParameter(format!(
                "target column {t} out of range for {cols} columns in {}",
                path.display()
            )));
        }
    }
    let feature_columns: Vec<usize> = (0..cols).filter(|c| !target_columns.contains(c)).collect();
    let n = rows.len();
    let x = Array2::from_shape_fn((n, feature_columns.len()), |(i, j)| rows[i][feature_columns[j]]);
    let y = Array2::from_shape_fn((n, target_columns.len()), |(i, j)| rows[i][target_columns[j]]);
    Dataset::new(x, Targets::Real(y))
}

/// Reads a numeric table as one matrix (e.g. auxiliary context or OOD inputs).
pub fn load_matrix(path: &Path, has_header: bool) -> Result<Array2<f64>> {
    let (cols, rows) = read_table(path, has_header)?;
    Ok(Array2::from_shape_fn((rows.len(), cols), |(i, j)| rows[i][j]))
}

fn read_table(path: &Path, has_header: bool) -> Result<(usize, Vec<Vec<f64>>)> {
    let file = std::fs::File::open(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut expected = None;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| FsviError::Parse {
            path: path.to_path_buf(),
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        let width = *expected.get_or_insert(record.len());
        if record.len() != width {
            return Err(FsviError::RaggedRows {
                path: path.to_path_buf(),
                line,
                expected: width,
                found: record.len(),
            });
        }
        let row = record
            .iter()
            .map(|cell| {
                cell.parse::<f64>().map_err(|_| FsviError::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("cell {cell:?} is not a number"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let cols =
        expected.ok_or_else(|| FsviError::EmptyInput(format!("{} has no data rows", path.display())))?;
    Ok((cols, rows))
}

/// Fits feature (and, for real targets, target) statistics on `train` and applies them to
/// every split.
pub fn standardize(train: &Dataset, others: &[Dataset]) -> Result<(Dataset, Vec<Dataset>)> {
    let fs = Standardization::fit(train.x.view())?;
    let ts = match &train.y {
        Targets::Real(y) => Some(Standardization::fit(y.view())?),
        Targets::Class(_) => None,
    };
    let apply = |d: &Dataset| -> Result<Dataset> {
        if d.x.ncols() != train.x.ncols() {
            return Err(crate::error::dim_mismatch("feature columns", train.x.ncols(), d.x.ncols()));
        }
        let y = match (&d.y, &ts) {
            (Targets::Real(y), Some(s)) => Targets::Real(s.apply(y.view())),
            (y, _) => y.clone(),
        };
        Ok(Dataset { x: fs.apply(d.x.view()), y, feature_stats: Some(fs.clone()), target_stats: ts.clone() })
    };
    let t = apply(train)?;
    let o = others.iter().map(apply).collect::<Result<Vec<_>>>()?;
    Ok((t, o))
}

/// Seeded shuffle followed by contiguous pieces with sizes `round(cumsum(fractions)·N)`.
pub fn split<R: Rng + ?Sized>(dataset: &Dataset, fractions: &[f64], rng: &mut R) -> Result<Vec<Dataset>> {
    let sum: f64 = fractions.iter().sum();
    if fractions.is_empty() || fractions.iter().any(|f| !(*f >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(FsviError::InvalidFractions(sum));
    }
    let n = dataset.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut out = Vec::with_capacity(fractions.len());
    let mut cum = 0.0;
    let mut start = 0;
    for (i, f) in fractions.iter().enumerate() {
        cum += f;
        let end = if i + 1 == fractions.len() { n } else { ((cum * n as f64).round() as usize).min(n) };
        out.push(dataset.select(&idx[start..end]));
        start = end;
    }
    Ok(out)
}

/// Column of real targets as a vector, for single-output regression.
pub fn target_column(y: &Targets) -> Option<Array1<f64>> {
    match y {
        Targets::Real(m) if m.ncols() == 1 => Some(m.column(0).to_owned()),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::io::Write;

    #[test]
    fn noiseless_moons_lie_on_circles() {
        let d = two_moons(101, 0.0, &mut crate::seeded_rng(0)).unwrap();
        let Targets::Class(labels) = &d.y else { panic!() };
        let ones = labels.iter().filter(|l| **l == 1).count();
        assert!((ones as i64 - (101 - ones) as i64).abs() <= 1);
        for (row, l) in d.x.rows().into_iter().zip(labels) {
            let (cx, cy) = if *l == 0 { (0.0, 0.0) } else { (1.0, 0.5) };
            let r = ((row[0] - cx).powi(2) + (row[1] - cy).powi(2)).sqrt();
            assert_abs_diff_eq!(r, 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn generators_are_seeded() {
        let a = two_moons(50, 0.1, &mut crate::seeded_rng(3)).unwrap();
        let b = two_moons(50, 0.1, &mut crate::seeded_rng(3)).unwrap();
        assert_eq!(a, b);
        let c = synthetic_1d(SyntheticKind::GapSine, 40, 0.1, &mut crate::seeded_rng(3)).unwrap();
        let d = synthetic_1d(SyntheticKind::GapSine, 40, 0.1, &mut crate::seeded_rng(3)).unwrap();
        assert_eq!(c, d);
        assert!(two_moons(1, 0.0, &mut crate::seeded_rng(0)).is_err());
    }

    #[test]
    fn gap_sine_leaves_gap_empty_and_sits_on_curve() {
        let d = synthetic_1d(SyntheticKind::GapSine, 500, 0.0, &mut crate::seeded_rng(1)).unwrap();
        let Targets::Real(y) = &d.y else { panic!() };
        for (x, y) in d.x.column(0).iter().zip(y.column(0)) {
            assert!(*x <= GAP_SINE_GAP.0 || *x >= GAP_SINE_GAP.1);
            assert_eq!(*y, x.sin());
        }
    }

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn csv_round_trip_with_header() {
        let f = write("\"a\",\"b\",\"y\"\n1,2,3\n4.5,-6,7e-1\n");
        let d = load_csv(f.path(), &[2], true).unwrap();
        assert_eq!(d.x, ndarray::array![[1.0, 2.0], [4.5, -6.0]]);
        assert_eq!(d.y, Targets::Real(ndarray::array![[3.0], [0.7]]));
        let raw = load_matrix(f.path(), true).unwrap();
        assert_eq!(raw.dim(), (2, 3));
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let f = write("1,2\n3,x\n");
        match load_csv(f.path(), &[1], false) {
            Err(FsviError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let f = write("1,2\n3,4\n5\n");
        match load_csv(f.path(), &[1], false) {
            Err(FsviError::RaggedRows { line, expected, found, .. }) => {
                assert_eq!((line, expected, found), (3, 2, 1))
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(load_csv(Path::new("/nonexistent/file.csv"), &[0], false), Err(FsviError::Io(_))));
        assert!(load_csv(write("1,2\n").path(), &[5], false).is_err());
    }

    #[test]
    fn standardize_round_trip_and_constant_columns() {
        let x = ndarray::array![[1.0, 5.0], [3.0, 5.0], [8.0, 5.0]];
        let d = Dataset::new(x.clone(), Targets::Real(ndarray::array![[1.0], [2.0], [6.0]])).unwrap();
        let (t, _) = standardize(&d, &[]).unwrap();
        let fs = t.feature_stats.as_ref().unwrap();
        assert_eq!(fs.constant, vec![false, true]);
        assert!(t.x.column(1).iter().all(|v| *v == 0.0));
        assert_abs_diff_eq!(fs.invert(t.x.view()), x, epsilon = 1e-10);
        assert_abs_diff_eq!(t.x.column(0).mean().unwrap(), 0.0, epsilon = 1e-12);
        let (t2, _) = standardize(&t, &[]).unwrap();
        assert_abs_diff_eq!(t2.x, t.x, epsilon = 1e-10);
    }

    #[test]
    fn split_sizes_are_exact_and_disjoint() {
        let d =
            Dataset::new(Array2::from_shape_fn((100, 1), |(i, _)| i as f64), Targets::Class(vec![0; 100]))
                .unwrap();
        let parts = split(&d, &[0.9, 0.1], &mut crate::seeded_rng(0)).unwrap();
        assert_eq!((parts[0].len(), parts[1].len()), (90, 10));
        let mut all: Vec<f64> = parts.iter().flat_map(|p| p.x.column(0).to_vec()).collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, (0..100).map(|i| i as f64).collect::<Vec<_>>());
        let whole = split(&d, &[1.0], &mut crate::seeded_rng(0)).unwrap();
        assert_eq!(whole[0].len(), 100);
        assert!(matches!(
            split(&d, &[0.5, 0.4], &mut crate::seeded_rng(0)),
            Err(FsviError::InvalidFractions(_))
        ));
    }

    #[test]
    fn classification_conversion() {
        let d = Dataset::new(ndarray::array![[0.0], [1.0]], Targets::Real(ndarray::array![[1.0], [0.0]]))
            .unwrap()
            .into_classification()
            .unwrap();
        assert_eq!(d.y, Targets::Class(vec![1, 0]));
        let bad = Dataset::new(ndarray::array![[0.0]], Targets::Real(ndarray::array![[0.5]])).unwrap();
        assert!(bad.into_classification().is_err());
    }
}
