//! Context distributions: where the function-space KL is evaluated.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, FsviError, Result};

/// Per-dimension closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

pub fn validate_bounds(bounds: &[Interval]) -> Result<()> {
    if bounds.is_empty() {
        return Err(FsviError::EmptyInput("context bounds".into()));
    }
    for (d, b) in bounds.iter().enumerate() {
        if !b.lo.is_finite() || !b.hi.is_finite() || b.lo > b.hi {
            return Err(FsviError::InvalidParameter(format!(
                "bounds for dimension {d} must be finite with lo <= hi, got [{}, {}]",
                b.lo, b.hi
            )));
        }
    }
    Ok(())
}

/// Column-wise min and max of the training inputs.
pub fn empirical_bounds(x: ArrayView2<f64>) -> Result<Vec<Interval>> {
    if x.nrows() == 0 {
        return Err(FsviError::EmptyInput("empirical_bounds needs at least one row".into()));
    }
    Ok(x.axis_iter(Axis(1))
        .map(|col| Interval {
            lo: col.iter().copied().fold(f64::INFINITY, f64::min),
            hi: col.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
        .collect())
}

/// Widens every interval symmetrically by `factor`·width (at least `factor` when the width
/// is zero).
pub fn expand_bounds(bounds: &[Interval], factor: f64) -> Vec<Interval> {
    bounds
        .iter()
        .map(|b| {
            let pad = factor * (b.hi - b.lo).max(1.0);
            Interval { lo: b.lo - pad, hi: b.hi + pad }
        })
        .collect()
}

pub fn sample_uniform_box<R: Rng + ?Sized>(bounds: &[Interval], k: usize, rng: &mut R) -> Array2<f64> {
    let d = bounds.len();
    let mut out = Array2::<f64>::zeros((k, d));
    for mut row in out.rows_mut() {
        for (v, b) in row.iter_mut().zip(bounds) {
            *v = if b.lo == b.hi { b.lo } else { b.lo + (b.hi - b.lo) * rng.random::<f64>() };
        }
    }
    out
}

/// Per-channel pixel-value pools for monochrome context images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonochromePool {
    pub channels: Vec<Vec<f64>>,
    /// Pixels per channel (height × width).
    pub pixels_per_channel: usize,
}

impl MonochromePool {
    /// Collects every pixel value of each channel from channel-major flattened images.
    pub fn from_images(x: ArrayView2<f64>, channels: usize) -> Result<Self> {
        if channels == 0 || x.ncols() % channels != 0 {
            return Err(FsviError::InvalidParameter(format!(
                "{} columns cannot be split into {channels} channels",
                x.ncols()
            )));
        }
        let per = x.ncols() / channels;
        let mut pools = vec![Vec::with_capacity(x.nrows() * per); channels];
        for row in x.rows() {
            for (c, pool) in pools.iter_mut().enumerate() {
                pool.extend(row.iter().skip(c * per).take(per));
            }
        }
        Ok(Self { channels: pools, pixels_per_channel: per })
    }

    pub fn dim(&self) -> usize {
        self.channels.len() * self.pixels_per_channel
    }
}

/// Images whose channels are each filled with one value drawn from that channel's pool.
pub fn sample_monochrome<R: Rng + ?Sized>(
    pool: &MonochromePool,
    k: usize,
    rng: &mut R,
) -> Result<Array2<f64>> {
    if let Some(c) = pool.channels.iter().position(|p| p.is_empty()) {
        return Err(FsviError::EmptyPool(c));
    }
    let per = pool.pixels_per_channel;
    let mut out = Array2::<f64>::zeros((k, pool.dim()));
    for mut row in out.rows_mut() {
        for (c, values) in pool.channels.iter().enumerate() {
            let v = values[rng.random_range(0..values.len())];
            row.slice_mut(ndarray::s![c * per..(c + 1) * per]).fill(v);
        }
    }
    Ok(out)
}

/// Rows drawn uniformly with replacement from an auxiliary dataset.
pub fn sample_auxiliary<R: Rng + ?Sized>(
    data: ArrayView2<f64>,
    k: usize,
    rng: &mut R,
) -> Result<Array2<f64>> {
    if data.nrows() == 0 {
        return Err(FsviError::EmptyInput("auxiliary context dataset".into()));
    }
    let idx: Vec<usize> = (0..k).map(|_| rng.random_range(0..data.nrows())).collect();
    Ok(data.select(Axis(0), &idx))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextSource {
    UniformBox { bounds: Vec<Interval> },
    Monochrome { pool: MonochromePool },
    Auxiliary { data: Array2<f64> },
}

impl ContextSource {
    pub fn dim(&self) -> usize {
        match self {
            ContextSource::UniformBox { bounds } => bounds.len(),
            ContextSource::Monochrome { pool } => pool.dim(),
            ContextSource::Auxiliary { data } => data.ncols(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<Array2<f64>> {
        match self {
            ContextSource::UniformBox { bounds } => Ok(sample_uniform_box(bounds, k, rng)),
            ContextSource::Monochrome { pool } => sample_monochrome(pool, k, rng),
            ContextSource::Auxiliary { data } => sample_auxiliary(data.view(), k, rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextConfig {
    pub source: ContextSource,
    /// Number of context sets per step.
    pub sets: usize,
    /// Points per context set.
    pub points: usize,
    /// Fraction of each set taken from the current minibatch.
    pub minibatch_mix: f64,
}

impl ContextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sets == 0 || self.points == 0 {
            return Err(FsviError::InvalidParameter(
                "context sets and points per set must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.minibatch_mix) {
            return Err(FsviError::InvalidParameter(format!(
                "minibatch mix fraction {} outside [0, 1]",
                self.minibatch_mix
            )));
        }
        if let ContextSource::UniformBox { bounds } = &self.source {
            validate_bounds(bounds)?;
        }
        if let ContextSource::Monochrome { pool } = &self.source {
            if let Some(c) = pool.channels.iter().position(|p| p.is_empty()) {
                return Err(FsviError::EmptyPool(c));
            }
        }
        Ok(())
    }

    /// Rows per set taken from the minibatch: `mix·K` rounded half up.
    pub fn minibatch_rows(&self) -> usize {
        ((self.minibatch_mix * self.points as f64) + 0.5).floor() as usize
    }
}

/// `S` context sets of `K` points each.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextBatch {
    sets: Vec<Array2<f64>>,
}

impl ContextBatch {
    pub fn new(sets: Vec<Array2<f64>>) -> Result<Self> {
        let first = sets
            .first()
            .ok_or_else(|| FsviError::EmptyInput("a context batch needs at least one set".into()))?;
        let (k, d) = first.dim();
        if k == 0 {
            return Err(FsviError::EmptyInput("context sets need at least one point".into()));
        }
        for s in &sets {
            if s.dim() != (k, d) {
                return Err(FsviError::DimensionMismatch(format!(
                    "context set is {:?}, expected ({k}, {d})",
                    s.dim()
                )));
            }
        }
        Ok(Self { sets })
    }

    /// A batch holding one fixed set.
    pub fn single(set: Array2<f64>) -> Result<Self> {
        Self::new(vec![set])
    }

    pub fn sets(&self) -> &[Array2<f64>] {
        &self.sets
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn points_per_set(&self) -> usize {
        self.sets[0].nrows()
    }

    pub fn dim(&self) -> usize {
        self.sets[0].ncols()
    }

    pub fn push(&mut self, set: Array2<f64>) -> Result<()> {
        if set.dim() != self.sets[0].dim() {
            return Err(dim_mismatch("context set rows", self.points_per_set(), set.nrows()));
        }
        self.sets.push(set);
        Ok(())
    }
}

/// Draws the context batch for one optimizer step.
///
/// Minibatch rows are drawn without replacement when the minibatch is large enough and
/// with replacement otherwise; the minibatch rows come first in each set.
pub fn assemble_contexts<R: Rng + ?Sized>(
    config: &ContextConfig,
    minibatch_x: ArrayView2<f64>,
    rng: &mut R,
) -> Result<ContextBatch> {
    config.validate()?;
    let from_batch = config.minibatch_rows();
    let from_source = config.points - from_batch;
    let d = config.source.dim();
    if from_batch > 0 {
        if minibatch_x.nrows() == 0 {
            return Err(FsviError::EmptyInput("minibatch mixing requested with an empty minibatch".into()));
        }
        if minibatch_x.ncols() != d {
            return Err(dim_mismatch("minibatch columns", d, minibatch_x.ncols()));
        }
    }
    let mut sets = Vec::with_capacity(config.sets);
    for _ in 0..config.sets {
        let mut set = Array2::<f64>::zeros((config.points, d));
        if from_batch > 0 {
            let n = minibatch_x.nrows();
            let idx: Vec<usize> = if from_batch <= n {
                index::sample(rng, n, from_batch).into_vec()
            } else {
                (0..from_batch).map(|_| rng.random_range(0..n)).collect()
            };
            for (r, &i) in idx.iter().enumerate() {
                set.row_mut(r).assign(&minibatch_x.row(i));
            }
        }
        if from_source > 0 {
            let drawn = config.source.sample(from_source, rng)?;
            set.slice_mut(ndarray::s![from_batch.., ..]).assign(&drawn);
        }
        sets.push(set);
    }
    ContextBatch::new(sets)
}
