//! CSV helpers shared by the subcommands.

use std::fs;
use std::path::Path;

use fsvi::predictive::{write_atomic, PredictiveOutput};
use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{CliError, CliResult};

/// A header is assumed when some cell in the first non-empty line is not a number.
pub fn sniff_header(path: &Path) -> CliResult<bool> {
    let text = fs::read_to_string(path).map_err(|e| CliError::user(format!("{}: {e}", path.display())))?;
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    Ok(first.split(',').any(|c| c.trim().parse::<f64>().is_err()))
}

pub fn header_for(path: &Path, explicit: Option<bool>) -> CliResult<bool> {
    match explicit {
        Some(h) => Ok(h),
        None => sniff_header(path),
    }
}

pub fn load_matrix(path: &Path, header: Option<bool>) -> CliResult<Array2<f64>> {
    Ok(fsvi::data::load_matrix(path, header_for(path, header)?)?)
}

/// Feature columns of `table`: all of them when the width already matches, otherwise the
/// table minus `target_columns`.
pub fn features_of(table: Array2<f64>, input_dim: usize, target_columns: &[usize]) -> CliResult<Array2<f64>> {
    if table.ncols() == input_dim {
        return Ok(table);
    }
    if table.ncols() == input_dim + target_columns.len() && target_columns.iter().all(|c| *c < table.ncols())
    {
        let keep: Vec<usize> = (0..table.ncols()).filter(|c| !target_columns.contains(c)).collect();
        return Ok(table.select(Axis(1), &keep));
    }
    Err(CliError::user(format!(
        "input has {} columns, the model expects {input_dim} features (or {} with targets)",
        table.ncols(),
        input_dim + target_columns.len()
    )))
}

pub fn csv_of(header: &[String], rows: ArrayView2<f64>) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for row in rows.rows() {
        push_row(&mut s, row);
    }
    s
}

fn push_row(s: &mut String, row: ArrayView1<f64>) {
    let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
    s.push_str(&cells.join(","));
    s.push('\n');
}

/// Per-row predictive summary: mean and variance per output, or class probabilities,
/// followed by the entropy.
pub fn predictive_csv(pred: &PredictiveOutput) -> String {
    let entropy = pred.entropy();
    let (mut header, body) = match pred {
        PredictiveOutput::Regression { mean, variance } => {
            let q = mean.ncols();
            let mut h: Vec<String> = (0..q).map(|j| format!("mean_{j}")).collect();
            h.extend((0..q).map(|j| format!("variance_{j}")));
            (h, ndarray::concatenate(Axis(1), &[mean.view(), variance.view()]).expect("same rows"))
        }
        PredictiveOutput::Classification { probs } => {
            ((0..probs.ncols()).map(|j| format!("p_{j}")).collect(), probs.clone())
        }
    };
    header.push("entropy".into());
    let e = entropy.insert_axis(Axis(1));
    let all = ndarray::concatenate(Axis(1), &[body.view(), e.view()]).expect("same rows");
    csv_of(&header, all.view())
}

pub fn entropy_csv<'a>(x: ArrayView2<'a, f64>, entropy: ArrayView1<'a, f64>) -> String {
    let mut header: Vec<String> = (0..x.ncols()).map(|j| format!("x{j}")).collect();
    header.push("entropy".into());
    let e = entropy.insert_axis(Axis(1));
    let all = ndarray::concatenate(Axis(1), &[x, e]).expect("same rows");
    csv_of(&header, all.view())
}

/// Writes every file atomically after all contents are known, so a failure earlier in a
/// command leaves nothing behind.
pub fn write_all(dir: &Path, files: &[(&str, String)]) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::user(format!("{}: {e}", dir.display())))?;
    for (name, contents) in files {
        write_atomic(&dir.join(name), contents.as_bytes())?;
    }
    Ok(())
}
