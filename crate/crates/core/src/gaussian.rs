//! Dense Gaussian primitives: jittered Cholesky, KL divergences and sampling.
//!
//! All computations are in `f64`. Log-determinants come from the Cholesky diagonal.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, FsviError, Result};

/// Negative KL values down to this are treated as round-off and clamped to zero.
pub const KL_NEGATIVE_TOLERANCE: f64 = 1e-8;

/// Absolute tolerance used when checking covariance symmetry.
pub const SYMMETRY_TOLERANCE: f64 = 1e-8;

/// Pivots at or below this fraction of the largest diagonal entry count as a failed
/// factorization.
const PIVOT_RELATIVE_TOLERANCE: f64 = 1e-12;

/// Increasing diagonal jitter levels tried by [`cholesky`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JitterSchedule(Vec<f64>);

impl JitterSchedule {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(FsviError::InvalidParameter("jitter schedule is empty".into()));
        }
        if levels.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(FsviError::InvalidParameter("jitter levels must be finite and nonnegative".into()));
        }
        if levels.windows(2).any(|w| w[1] < w[0]) {
            return Err(FsviError::InvalidParameter("jitter levels must be nondecreasing".into()));
        }
        Ok(Self(levels))
    }

    /// A schedule with a single level.
    pub fn only(level: f64) -> Result<Self> {
        Self::new(vec![level])
    }

    pub fn levels(&self) -> &[f64] {
        &self.0
    }

    fn max(&self) -> f64 {
        *self.0.last().expect("schedule is nonempty")
    }
}

impl Default for JitterSchedule {
    fn default() -> Self {
        Self(vec![0.0, 1e-10, 1e-8, 1e-6, 1e-4])
    }
}

/// Lower-triangular factor `L` with `L Lᵀ = A + jitter·I`.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    pub lower: Array2<f64>,
    pub jitter: f64,
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    /// `ln det(A + jitter·I)`.
    pub fn log_det(&self) -> f64 {
        2.0 * self.lower.diag().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Solves `L x = b` in place.
    pub fn forward_substitute(&self, b: &mut [f64]) {
        let l = &self.lower;
        let n = self.dim();
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= l[[i, k]] * b[k];
            }
            b[i] = s / l[[i, i]];
        }
    }

    /// Solves `Lᵀ x = b` in place.
    pub fn back_substitute(&self, b: &mut [f64]) {
        let l = &self.lower;
        let n = self.dim();
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in i + 1..n {
                s -= l[[k, i]] * b[k];
            }
            b[i] = s / l[[i, i]];
        }
    }

    /// Solves `(A + jitter·I) x = b`.
    pub fn solve(&self, b: ArrayView1<f64>) -> Array1<f64> {
        let mut x = b.to_vec();
        self.forward_substitute(&mut x);
        self.back_substitute(&mut x);
        Array1::from(x)
    }

    /// `L⁻¹ B`, column by column.
    pub fn solve_lower_matrix(&self, b: ArrayView2<f64>) -> Array2<f64> {
        let mut out = b.to_owned();
        for mut col in out.axis_iter_mut(Axis(1)) {
            let mut buf = col.to_vec();
            self.forward_substitute(&mut buf);
            col.assign(&Array1::from(buf));
        }
        out
    }

    /// `(A + jitter·I)⁻¹`, symmetrized.
    pub fn inverse(&self) -> Array2<f64> {
        let n = self.dim();
        let mut inv = Array2::<f64>::zeros((n, n));
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            self.forward_substitute(&mut e);
            self.back_substitute(&mut e);
            for i in 0..n {
                inv[[i, j]] = e[i];
            }
        }
        symmetrize(&mut inv);
        inv
    }
}

fn try_cholesky(a: ArrayView2<f64>, jitter: f64) -> Option<Array2<f64>> {
    let n = a.nrows();
    let max_diag = (0..n).map(|i| a[[i, i]] + jitter).fold(0.0_f64, f64::max);
    let tol = PIVOT_RELATIVE_TOLERANCE * max_diag;
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]] + jitter;
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !d.is_finite() || d <= tol {
            return None;
        }
        let d = d.sqrt();
        l[[j, j]] = d;
        for i in j + 1..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / d;
        }
    }
    Some(l)
}

/// Factors `matrix + λI` for the first `λ` in `schedule` that succeeds.
pub fn cholesky(matrix: ArrayView2<f64>, schedule: &JitterSchedule) -> Result<CholeskyFactor> {
    if matrix.nrows() != matrix.ncols() {
        return Err(FsviError::DimensionMismatch(format!(
            "cholesky needs a square matrix, got {}x{}",
            matrix.nrows(),
            matrix.ncols()
        )));
    }
    for &jitter in schedule.levels() {
        if let Some(lower) = try_cholesky(matrix, jitter) {
            return Ok(CholeskyFactor { lower, jitter });
        }
    }
    Err(FsviError::FactorizationFailed { max_jitter: schedule.max() })
}

/// Factors several matrices with one shared jitter level: the first level at which every
/// matrix factorizes.
pub fn cholesky_shared(
    matrices: &[ArrayView2<f64>],
    schedule: &JitterSchedule,
) -> Result<Vec<CholeskyFactor>> {
    for &jitter in schedule.levels() {
        let factors: Option<Vec<_>> = matrices
            .iter()
            .map(|m| try_cholesky(*m, jitter).map(|lower| CholeskyFactor { lower, jitter }))
            .collect();
        if let Some(f) = factors {
            return Ok(f);
        }
    }
    Err(FsviError::FactorizationFailed { max_jitter: schedule.max() })
}

pub(crate) fn symmetrize(m: &mut Array2<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (m[[i, j]] + m[[j, i]]);
            m[[i, j]] = v;
            m[[j, i]] = v;
        }
    }
}

/// Mean-field Gaussian over a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalGaussian {
    mean: Vec<f64>,
    variance: Vec<f64>,
}

impl DiagonalGaussian {
    /// Variances must be finite and nonnegative. A zero variance pins that coordinate.
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        if mean.len() != variance.len() {
            return Err(dim_mismatch("diagonal gaussian variance length", mean.len(), variance.len()));
        }
        if variance.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(FsviError::InvalidParameter("variances must be finite and nonnegative".into()));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(FsviError::InvalidParameter("means must be finite".into()));
        }
        Ok(Self { mean, variance })
    }

    /// `N(mean, variance·I)`.
    pub fn isotropic(mean: Vec<f64>, variance: f64) -> Result<Self> {
        let n = mean.len();
        Self::new(mean, vec![variance; n])
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> &[f64] {
        &self.variance
    }

    /// `count` draws, one per row.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Array2<f64> {
        let p = self.len();
        let mut out = Array2::<f64>::zeros((count, p));
        for mut row in out.axis_iter_mut(Axis(0)) {
            for j in 0..p {
                let eps: f64 = rng.sample(StandardNormal);
                row[j] = self.mean[j] + self.variance[j].sqrt() * eps;
            }
        }
        out
    }
}

/// Multivariate Gaussian over network outputs at a finite evaluation set.
///
/// Entries are ordered point-major: index `i * Q + q` holds output `q` at point `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionGaussian {
    pub mean: Array1<f64>,
    pub covariance: Array2<f64>,
}

impl FunctionGaussian {
    pub fn new(mean: Array1<f64>, covariance: Array2<f64>) -> Result<Self> {
        let n = mean.len();
        if covariance.dim() != (n, n) {
            return Err(FsviError::DimensionMismatch(format!(
                "covariance is {:?}, mean has length {n}",
                covariance.dim()
            )));
        }
        for i in 0..n {
            for j in i + 1..n {
                if (covariance[[i, j]] - covariance[[j, i]]).abs() > SYMMETRY_TOLERANCE {
                    return Err(FsviError::InvalidParameter(format!(
                        "covariance not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self { mean, covariance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `count` draws, one per row. A covariance of exact zeros skips factorization and
    /// returns the mean.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        count: usize,
        schedule: &JitterSchedule,
    ) -> Result<Array2<f64>> {
        let n = self.dim();
        let mut out = Array2::<f64>::zeros((count, n));
        if self.covariance.iter().all(|v| *v == 0.0) {
            for mut row in out.axis_iter_mut(Axis(0)) {
                row.assign(&self.mean);
            }
            return Ok(out);
        }
        let chol = cholesky(self.covariance.view(), schedule)?;
        let mut eps = vec![0.0; n];
        for mut row in out.axis_iter_mut(Axis(0)) {
            eps.iter_mut().for_each(|e| *e = rng.sample(StandardNormal));
            for i in 0..n {
                let mut s = self.mean[i];
                for (k, e) in eps.iter().enumerate().take(i + 1) {
                    s += chol.lower[[i, k]] * e;
                }
                row[i] = s;
            }
        }
        Ok(out)
    }
}

pub(crate) fn clamp_kl(kl: f64) -> Result<f64> {
    if kl.is_nan() {
        return Err(FsviError::NegativeKl(f64::NAN));
    }
    if kl < 0.0 {
        if kl < -KL_NEGATIVE_TOLERANCE {
            return Err(FsviError::NegativeKl(kl));
        }
        return Ok(0.0);
    }
    Ok(kl)
}

/// Unclamped KL from factors, with `diff = μp − μq`.
fn kl_from_factors(
    diff: ArrayView1<f64>,
    cov_q: ArrayView2<f64>,
    lq: &CholeskyFactor,
    lp: &CholeskyFactor,
) -> f64 {
    let k = diff.len();
    // tr(Σp⁻¹ Σq) with the jitter folded into Σq as well
    let mut jittered_q = cov_q.to_owned();
    for i in 0..k {
        jittered_q[[i, i]] += lq.jitter;
    }
    let mut trace = 0.0;
    for i in 0..k {
        let col: Vec<f64> = (0..k).map(|r| jittered_q[[r, i]]).collect();
        let x = lp.solve(Array1::from(col).view());
        trace += x[i];
    }
    let mut z = diff.to_vec();
    lp.forward_substitute(&mut z);
    let mahalanobis: f64 = z.iter().map(|v| v * v).sum();
    0.5 * (trace + mahalanobis - k as f64 + lp.log_det() - lq.log_det())
}

/// `KL(q ‖ p)` between two multivariate Gaussians, in nats.
///
/// Both covariances are factored with one shared jitter level so that a common null
/// space contributes nothing.
pub fn gaussian_kl(q: &FunctionGaussian, p: &FunctionGaussian, schedule: &JitterSchedule) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(dim_mismatch("gaussian_kl dimension", q.dim(), p.dim()));
    }
    let factors = cholesky_shared(&[q.covariance.view(), p.covariance.view()], schedule)?;
    let diff = &p.mean - &q.mean;
    clamp_kl(kl_from_factors(diff.view(), q.covariance.view(), &factors[0], &factors[1]))
}

/// `KL(q ‖ p)` for two mean-field Gaussians: the sum of per-coordinate closed forms.
pub fn diag_gaussian_kl(q: &DiagonalGaussian, p: &DiagonalGaussian) -> Result<f64> {
    if q.len() != p.len() {
        return Err(dim_mismatch("diag_gaussian_kl length", q.len(), p.len()));
    }
    if p.variance.iter().any(|v| *v <= 0.0) {
        return Err(FsviError::InvalidParameter(
            "reference distribution needs strictly positive variances".into(),
        ));
    }
    if q.variance.iter().any(|v| *v <= 0.0) {
        return Ok(f64::INFINITY);
    }
    let kl = q
        .mean
        .iter()
        .zip(&q.variance)
        .zip(p.mean.iter().zip(&p.variance))
        .map(|((mq, vq), (mp, vp))| 0.5 * (vq / vp + (mp - mq) * (mp - mq) / vp - 1.0 + vp.ln() - vq.ln()))
        .sum();
    clamp_kl(kl)
}

/// Gradient of a block-diagonal Gaussian KL with respect to its inputs.
///
/// For each block `b`: `cov_q[b]` is `∂KL/∂Σq`, `cov_p[b]` is `∂KL/∂Σp` and `mean_q[b]` is
/// `∂KL/∂μq` (the gradient with respect to `μp` is its negation).
#[derive(Debug, Clone)]
pub struct BlockKlGradient {
    pub mean_q: Vec<Array1<f64>>,
    pub cov_q: Vec<Array2<f64>>,
    pub cov_p: Vec<Array2<f64>>,
}

/// KL between two Gaussians whose covariances share a block-diagonal structure.
///
/// `diff[b]` is `μq − μp` restricted to block `b`. One jitter level is shared across every
/// block of both distributions, so the value equals [`gaussian_kl`] on the assembled
/// matrices.
pub fn block_gaussian_kl(
    diff: &[Array1<f64>],
    cov_q: &[Array2<f64>],
    cov_p: &[Array2<f64>],
    schedule: &JitterSchedule,
    with_gradient: bool,
) -> Result<(f64, Option<BlockKlGradient>)> {
    let blocks = diff.len();
    if cov_q.len() != blocks || cov_p.len() != blocks {
        return Err(dim_mismatch("block count", blocks, cov_q.len().min(cov_p.len())));
    }
    let mut views = Vec::with_capacity(2 * blocks);
    for b in 0..blocks {
        let k = diff[b].len();
        if cov_q[b].dim() != (k, k) || cov_p[b].dim() != (k, k) {
            return Err(dim_mismatch("block covariance size", k, cov_q[b].nrows()));
        }
        views.push(cov_q[b].view());
        views.push(cov_p[b].view());
    }
    let factors = cholesky_shared(&views, schedule)?;
    let mut total = 0.0;
    for b in 0..blocks {
        let neg = diff[b].mapv(|v| -v);
        total += kl_from_factors(neg.view(), cov_q[b].view(), &factors[2 * b], &factors[2 * b + 1]);
    }
    let value = clamp_kl(total)?;
    if !with_gradient {
        return Ok((value, None));
    }
    let mut grad = BlockKlGradient {
        mean_q: Vec::with_capacity(blocks),
        cov_q: Vec::with_capacity(blocks),
        cov_p: Vec::with_capacity(blocks),
    };
    for b in 0..blocks {
        let q_inv = factors[2 * b].inverse();
        let p_inv = factors[2 * b + 1].inverse();
        let a = p_inv.dot(&diff[b]);
        grad.cov_q.push(0.5 * (&p_inv - &q_inv));
        // ½(Σp⁻¹ − Σp⁻¹ (Σq + δδᵀ) Σp⁻¹)
        let mut sq = cov_q[b].clone();
        let k = sq.nrows();
        for i in 0..k {
            sq[[i, i]] += factors[2 * b].jitter;
        }
        let mut inner = p_inv.dot(&sq).dot(&p_inv);
        for i in 0..k {
            for j in 0..k {
                inner[[i, j]] += a[i] * a[j];
            }
        }
        let mut gp = 0.5 * (&p_inv - &inner);
        symmetrize(&mut gp);
        grad.cov_p.push(gp);
        grad.mean_q.push(a);
    }
    Ok((value, Some(grad)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn cholesky_identity_needs_no_jitter() {
        let eye = Array2::<f64>::eye(3);
        let f = cholesky(eye.view(), &JitterSchedule::only(0.0).unwrap()).unwrap();
        assert_eq!(f.jitter, 0.0);
        assert_abs_diff_eq!(f.lower, eye, epsilon = 1e-15);
    }

    #[test]
    fn cholesky_hand_expanded_2x2() {
        let a = array![[4.0, 2.0], [2.0, 3.0]];
        let f = cholesky(a.view(), &JitterSchedule::default()).unwrap();
        assert_eq!(f.jitter, 0.0);
        let expected = array![[2.0, 0.0], [1.0, 2.0_f64.sqrt()]];
        assert_abs_diff_eq!(f.lower, expected, epsilon = 1e-14);
    }

    #[test]
    fn cholesky_rank_one_escalates_jitter() {
        let v = array![1.0, 2.0, 3.0];
        let a = Array2::from_shape_fn((3, 3), |(i, j)| v[i] * v[j]);
        let schedule = JitterSchedule::new(vec![0.0, 1e-8]).unwrap();
        let f = cholesky(a.view(), &schedule).unwrap();
        assert_eq!(f.jitter, 1e-8);
        let rebuilt = f.lower.dot(&f.lower.t());
        let mut target = a.clone();
        for i in 0..3 {
            target[[i, i]] += 1e-8;
        }
        assert_abs_diff_eq!(rebuilt, target, epsilon = 1e-12);
    }

    #[test]
    fn cholesky_indefinite_fails() {
        let a = array![[1.0, 0.0], [0.0, -1.0]];
        let err = cholesky(a.view(), &JitterSchedule::default()).unwrap_err();
        assert!(matches!(err, FsviError::FactorizationFailed { .. }));
        assert!(err.is_numerical());
    }

    #[test]
    fn jitter_schedule_rejects_bad_levels() {
        assert!(JitterSchedule::new(vec![]).is_err());
        assert!(JitterSchedule::new(vec![1e-6, 0.0]).is_err());
        assert!(JitterSchedule::new(vec![-1.0]).is_err());
    }

    #[test]
    fn kl_scalar_closed_form() {
        let q = FunctionGaussian::new(array![1.0], array![[1.0]]).unwrap();
        let p = FunctionGaussian::new(array![0.0], array![[1.0]]).unwrap();
        let kl = gaussian_kl(&q, &p, &JitterSchedule::default()).unwrap();
        assert_abs_diff_eq!(kl, 0.5, epsilon = 1e-14);
    }

    #[test]
    fn kl_identical_is_zero() {
        let q = FunctionGaussian::new(array![0.3, -1.0], array![[2.0, 0.4], [0.4, 1.0]]).unwrap();
        let kl = gaussian_kl(&q, &q, &JitterSchedule::default()).unwrap();
        assert!(kl.abs() <= 1e-12);
    }

    #[test]
    fn kl_dimension_mismatch() {
        let q = FunctionGaussian::new(array![0.0], array![[1.0]]).unwrap();
        let p = FunctionGaussian::new(array![0.0, 0.0], Array2::eye(2)).unwrap();
        assert!(matches!(
            gaussian_kl(&q, &p, &JitterSchedule::default()),
            Err(FsviError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn diag_kl_scalar_value() {
        let q = DiagonalGaussian::new(vec![0.0], vec![2.0]).unwrap();
        let p = DiagonalGaussian::new(vec![0.0], vec![1.0]).unwrap();
        let expected = 0.5 * (2.0 - 1.0 - 2.0_f64.ln());
        assert_abs_diff_eq!(diag_gaussian_kl(&q, &p).unwrap(), expected, epsilon = 1e-15);
        assert_abs_diff_eq!(expected, 0.15343, epsilon = 1e-5);
    }

    #[test]
    fn diag_kl_is_additive() {
        let q = DiagonalGaussian::new(vec![0.5, -1.0], vec![0.3, 2.0]).unwrap();
        let p = DiagonalGaussian::new(vec![0.0, 1.0], vec![1.0, 0.5]).unwrap();
        let one = |i: usize| {
            diag_gaussian_kl(
                &DiagonalGaussian::new(vec![q.mean[i]], vec![q.variance[i]]).unwrap(),
                &DiagonalGaussian::new(vec![p.mean[i]], vec![p.variance[i]]).unwrap(),
            )
            .unwrap()
        };
        assert_abs_diff_eq!(diag_gaussian_kl(&q, &p).unwrap(), one(0) + one(1), epsilon = 1e-14);
        assert_eq!(diag_gaussian_kl(&q, &q).unwrap(), 0.0);
    }

    #[test]
    fn diag_kl_length_mismatch() {
        let q = DiagonalGaussian::new(vec![0.0], vec![1.0]).unwrap();
        let p = DiagonalGaussian::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        assert!(matches!(diag_gaussian_kl(&q, &p), Err(FsviError::DimensionMismatch(_))));
    }

    #[test]
    fn negative_kl_beyond_tolerance_is_an_error() {
        assert_eq!(clamp_kl(-1e-10).unwrap(), 0.0);
        assert!(matches!(clamp_kl(-1e-6), Err(FsviError::NegativeKl(_))));
    }

    #[test]
    fn zero_covariance_samples_equal_mean() {
        let g = FunctionGaussian::new(array![1.0, -2.0], Array2::zeros((2, 2))).unwrap();
        let mut rng = crate::seeded_rng(3);
        let draws = g.sample(&mut rng, 5, &JitterSchedule::only(0.0).unwrap()).unwrap();
        for row in draws.rows() {
            assert_eq!(row.to_vec(), vec![1.0, -2.0]);
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let g = DiagonalGaussian::new(vec![0.0, 1.0], vec![1.0, 4.0]).unwrap();
        let a = g.sample(&mut crate::seeded_rng(11), 7);
        let b = g.sample(&mut crate::seeded_rng(11), 7);
        assert_eq!(a, b);
        let f = FunctionGaussian::new(array![0.0, 1.0], array![[1.0, 0.5], [0.5, 2.0]]).unwrap();
        let s = JitterSchedule::default();
        assert_eq!(
            f.sample(&mut crate::seeded_rng(5), 4, &s).unwrap(),
            f.sample(&mut crate::seeded_rng(5), 4, &s).unwrap()
        );
    }

    #[test]
    fn standard_normal_sample_mean_within_clt_bound() {
        let g = DiagonalGaussian::new(vec![0.0], vec![1.0]).unwrap();
        let n = 100_000;
        let draws = g.sample(&mut crate::seeded_rng(2024), n);
        let mean = draws.sum() / n as f64;
        assert!(mean.abs() < 4.0 / (n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn asymmetric_covariance_rejected() {
        assert!(FunctionGaussian::new(array![0.0, 0.0], array![[1.0, 0.1], [0.0, 1.0]]).is_err());
    }

    #[test]
    fn block_kl_matches_assembled_kl() {
        let cq = [array![[1.0, 0.2], [0.2, 0.5]], array![[0.3, 0.0], [0.0, 0.7]]];
        let cp = [array![[2.0, 0.1], [0.1, 1.5]], array![[1.0, 0.4], [0.4, 1.0]]];
        let diff = [array![0.3, -0.2], array![1.0, 0.5]];
        let (block, _) = block_gaussian_kl(&diff, &cq, &cp, &JitterSchedule::default(), false).unwrap();
        let assemble = |b: &[Array2<f64>]| {
            let mut m = Array2::zeros((4, 4));
            for (k, blk) in b.iter().enumerate() {
                for i in 0..2 {
                    for j in 0..2 {
                        m[[2 * k + i, 2 * k + j]] = blk[[i, j]];
                    }
                }
            }
            m
        };
        let q_mean = array![0.3, -0.2, 1.0, 0.5];
        let q = FunctionGaussian::new(q_mean, assemble(&cq)).unwrap();
        let p = FunctionGaussian::new(Array1::zeros(4), assemble(&cp)).unwrap();
        let full = gaussian_kl(&q, &p, &JitterSchedule::default()).unwrap();
        assert_abs_diff_eq!(block, full, epsilon = 1e-13);
    }

    #[test]
    fn block_kl_gradient_matches_finite_differences() {
        let cq = array![[1.0, 0.2], [0.2, 0.5]];
        let cp = array![[2.0, 0.1], [0.1, 1.5]];
        let diff = array![0.3, -0.2];
        let s = JitterSchedule::default();
        let f = |d: &Array1<f64>, q: &Array2<f64>, p: &Array2<f64>| {
            block_gaussian_kl(
                std::slice::from_ref(d),
                std::slice::from_ref(q),
                std::slice::from_ref(p),
                &s,
                false,
            )
            .unwrap()
            .0
        };
        let (_, g) = block_gaussian_kl(
            std::slice::from_ref(&diff),
            std::slice::from_ref(&cq),
            std::slice::from_ref(&cp),
            &s,
            true,
        )
        .unwrap();
        let g = g.unwrap();
        let h = 1e-6;
        for i in 0..2 {
            let mut dp = diff.clone();
            let mut dm = diff.clone();
            dp[i] += h;
            dm[i] -= h;
            let fd = (f(&dp, &cq, &cp) - f(&dm, &cq, &cp)) / (2.0 * h);
            assert_abs_diff_eq!(g.mean_q[0][i], fd, epsilon = 1e-7);
        }
        // symmetric perturbation of the (0, 1) entry counts both triangle entries
        let bump = |m: &Array2<f64>, sgn: f64| {
            let mut m = m.clone();
            m[[0, 1]] += sgn * h;
            m[[1, 0]] += sgn * h;
            m
        };
        let fd_q = (f(&diff, &bump(&cq, 1.0), &cp) - f(&diff, &bump(&cq, -1.0), &cp)) / (2.0 * h);
        assert_abs_diff_eq!(2.0 * g.cov_q[0][[0, 1]], fd_q, epsilon = 1e-7);
        let fd_p = (f(&diff, &cq, &bump(&cp, 1.0)) - f(&diff, &cq, &bump(&cp, -1.0))) / (2.0 * h);
        assert_abs_diff_eq!(2.0 * g.cov_p[0][[0, 1]], fd_p, epsilon = 1e-7);
    }
}
