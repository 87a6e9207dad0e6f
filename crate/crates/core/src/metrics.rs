//! RMSE×100, Gaussian Fréchet distance over flattened sequences, and the
//! copy-last / constant-velocity baselines. All arithmetic is `f64`.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::dataset::{Frame, Window};
use crate::error::{dim_err, param_err, Error, Result};
use crate::models::{COORDS, JOINTS, T_OUT};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Tolerated asymmetry in [`sqrtm_psd`], relative to the largest entry.
pub const SYMMETRY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricsReport {
    pub rmse_x100: f64,
    pub fid: f64,
    pub n: usize,
}

/// Running sum of squared errors.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SquaredError {
    pub sum: f64,
    pub count: usize,
}

impl SquaredError {
    pub fn add<T: Scalar>(&mut self, preds: &[T], targets: &[T]) -> Result<()> {
        if preds.len() != targets.len() {
            return Err(dim_err!(
                "{} predictions vs {} targets",
                preds.len(),
                targets.len()
            ));
        }
        self.sum += preds
            .iter()
            .zip(targets)
            .map(|(&p, &t)| {
                let d = p.to_f64_lossy() - t.to_f64_lossy();
                d * d
            })
            .sum::<f64>();
        self.count += preds.len();
        Ok(())
    }

    pub fn rmse_x100(&self) -> Result<f64> {
        if self.count == 0 {
            return Err(Error::InsufficientSamples { needed: 1, got: 0 });
        }
        Ok(100.0 * libm::sqrt(self.sum / self.count as f64))
    }
}

/// `100 * sqrt(mean((preds - targets)^2))` over every element.
pub fn rmse_x100<T: Scalar>(preds: &Tensor<T>, targets: &Tensor<T>) -> Result<f64> {
    if preds.shape() != targets.shape() {
        return Err(dim_err!(
            "rmse shapes differ: {:?} vs {:?}",
            preds.shape(),
            targets.shape()
        ));
    }
    let mut acc = SquaredError::default();
    acc.add(preds.data(), targets.data())?;
    acc.rmse_x100()
}

/// Sample mean and unbiased covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Moments of `n` row-major samples with `f` features each.
pub fn gaussian_stats(samples: &[f64], n: usize, f: usize) -> Result<GaussianStats> {
    if samples.len() != n * f {
        return Err(dim_err!(
            "{} values are not {n} samples of {f} features",
            samples.len()
        ));
    }
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let mut mean = vec![0.0; f];
    for row in samples.chunks_exact(f) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut centered = samples.to_vec();
    for row in centered.chunks_exact_mut(f) {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    // cov = X^T X / (n - 1), written column-major into nalgebra storage.
    let mut cov = vec![0.0; f * f];
    f64::gemm(
        f,
        n,
        f,
        1.0 / (n - 1) as f64,
        &centered,
        (1, f as isize),
        &centered,
        (f as isize, 1),
        0.0,
        &mut cov,
        (1, f as isize),
    );
    let mut cov = DMatrix::from_vec(f, f, cov);
    symmetrize(&mut cov);
    Ok(GaussianStats {
        mean: DVector::from_vec(mean),
        cov,
    })
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Principal square root of a symmetric positive semi-definite matrix.
///
/// Negative eigenvalues are clamped to zero.
pub fn sqrtm_psd(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !s.is_square() {
        return Err(dim_err!(
            "sqrtm needs a square matrix, got {}x{}",
            s.nrows(),
            s.ncols()
        ));
    }
    let scale = s.amax().max(1.0);
    let asym = (s - s.transpose()).amax();
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::Contract(alloc::format!(
            "matrix is not symmetric (max |S - S^T| = {asym:e})"
        )));
    }
    let mut sym = s.clone();
    symmetrize(&mut sym);
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| libm::sqrt(l.max(0.0)));
    let v = &eig.eigenvectors;
    let scaled = DMatrix::from_fn(v.nrows(), v.ncols(), |i, j| v[(i, j)] * roots[j]);
    let mut out = &scaled * v.transpose();
    symmetrize(&mut out);
    Ok(out)
}

/// Diagonal loading used for a near-singular covariance: `1e-6 * max(1, tr/F)`.
pub fn regularization(cov: &DMatrix<f64>) -> f64 {
    1e-6 * (cov.trace() / cov.nrows().max(1) as f64).max(1.0)
}

/// `cov + eps I` when the smallest eigenvalue of `cov` is at most `eps`,
/// otherwise `cov` unchanged.
pub fn regularized(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let eps = regularization(cov);
    let mut shifted = cov.clone();
    for i in 0..cov.nrows() {
        shifted[(i, i)] -= eps;
    }
    if shifted.cholesky().is_some() {
        return cov.clone();
    }
    let mut out = cov.clone();
    for i in 0..cov.nrows() {
        out[(i, i)] += eps;
    }
    out
}

/// `|mu_a - mu_b|^2 + Tr(Sa + Sb - 2 sqrt(Sa^1/2 Sb Sa^1/2))`, clamped at 0.
///
/// Near-singular covariances are loaded with [`regularization`] first.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() || a.cov.nrows() != a.dim() || b.cov.nrows() != b.dim() {
        return Err(dim_err!(
            "Fréchet distance between {} and {} features",
            a.dim(),
            b.dim()
        ));
    }
    let (sa, sb) = (regularized(&a.cov), regularized(&b.cov));
    let root_a = sqrtm_psd(&sa)?;
    let mut inner = &root_a * &sb * &root_a;
    symmetrize(&mut inner);
    let cross = sqrtm_psd(&inner)?;
    let diff = &a.mean - &b.mean;
    let d = diff.dot(&diff) + sa.trace() + sb.trace() - 2.0 * cross.trace();
    Ok(d.max(0.0))
}

fn flatten_sequences<T: Scalar>(t: &Tensor<T>) -> Result<(Vec<f64>, usize, usize)> {
    if t.rank() < 2 {
        return Err(dim_err!("expected [N, ...] sequences, got {:?}", t.shape()));
    }
    let n = t.shape()[0];
    let f = t.shape()[1..].iter().product();
    Ok((t.to_f64_vec(), n, f))
}

/// Fréchet distance between Gaussians fitted to flattened sequences
/// (`[N, 30, 17, 2]` gives 1020 features).
pub fn motion_fid<T: Scalar>(preds: &Tensor<T>, refs: &Tensor<T>) -> Result<f64> {
    if preds.shape().get(1..) != refs.shape().get(1..) {
        return Err(dim_err!(
            "fid shapes differ: {:?} vs {:?}",
            preds.shape(),
            refs.shape()
        ));
    }
    let (p, n, f) = flatten_sequences(preds)?;
    let (r, m, _) = flatten_sequences(refs)?;
    frechet_distance(&gaussian_stats(&p, n, f)?, &gaussian_stats(&r, m, f)?)
}

/// RMSE×100 and FID of predictions against targets.
pub fn report<T: Scalar>(preds: &Tensor<T>, targets: &Tensor<T>) -> Result<MetricsReport> {
    Ok(MetricsReport {
        rmse_x100: rmse_x100(preds, targets)?,
        fid: motion_fid(preds, targets)?,
        n: preds.shape().first().copied().unwrap_or(0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    /// Repeat the last observed frame.
    CopyLast,
    /// Extrapolate each joint with the last frame-to-frame velocity.
    ConstVelocity,
}

/// Forecast [`T_OUT`] frames from an observation of at least one frame.
pub fn baseline_forecast(input: &[Frame], kind: Baseline) -> Result<Vec<Frame>> {
    let last = *input
        .last()
        .ok_or_else(|| param_err!("baseline needs at least one frame"))?;
    let velocity: Frame = match (kind, input.len()) {
        (Baseline::ConstVelocity, n) if n >= 2 => {
            let prev = input[n - 2];
            core::array::from_fn(|j| core::array::from_fn(|c| last[j][c] - prev[j][c]))
        }
        _ => [[0.0; COORDS]; JOINTS],
    };
    Ok((1..=T_OUT)
        .map(|k| {
            core::array::from_fn(|j| {
                core::array::from_fn(|c| last[j][c] + k as f32 * velocity[j][c])
            })
        })
        .collect())
}

/// Baseline forecasts for a set of windows as `[N, 30, 17, 2]`.
pub fn baseline_predict(windows: &[Window], kind: Baseline) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(windows.len() * T_OUT * JOINTS * COORDS);
    for w in windows {
        data.extend(
            baseline_forecast(&w.input, kind)?
                .iter()
                .flatten()
                .flatten(),
        );
    }
    Tensor::new(&[windows.len(), T_OUT, JOINTS, COORDS], data)
}
