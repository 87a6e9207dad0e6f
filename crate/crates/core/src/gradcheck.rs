//! Finite-difference verification of reverse-mode gradients.
//!
//! The analytic side is the backward pass of the graph, run at the configured
//! precision (`f64` by default, since an `f32` pass leaves rounding noise of
//! order 1e-8 on gradients that are exactly zero, such as attention key
//! biases). The reference side evaluates the same graph in `f64` with central
//! differences. Coordinates
//! whose perturbation moves any relu input across zero (or off exactly zero)
//! are excluded, since the function is not differentiable there.

use alloc::vec::Vec;

use crate::autodiff::{Graph, Mode, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A scalar-valued function of tensors, evaluable at any precision.
pub trait GradFn {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<Var>;
}

/// Precision of the analytic backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Central-difference half step, applied in `f64`.
    pub step: f64,
    /// Pass threshold on the max relative error.
    pub tol: f64,
    pub mode: Mode,
    pub precision: Precision,
    /// Dropout stream used when `mode` is train; fixed so the function is deterministic.
    pub dropout_seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tol: 1e-3,
            mode: Mode::Eval,
            precision: Precision::F64,
            dropout_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max of `|a - b| / max(|a|, |b|, 1e-8)` over compared coordinates.
    pub max_rel_error: f64,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
    /// Coordinates skipped because a perturbation crossed a relu kink.
    pub excluded: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

struct Eval {
    loss: f64,
    kinks: Vec<i8>,
}

fn eval_f64<F: GradFn>(f: &F, inputs: &[Tensor<f64>], cfg: &GradCheckConfig) -> Result<Eval> {
    let mut g = Graph::<f64>::new(cfg.mode).with_dropout_stream(cfg.dropout_seed, 0);
    g.trace_kinks();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let out = f.eval(&mut g, &vars)?;
    let value = g.value(out);
    if value.len() != 1 {
        return Err(Error::Contract(alloc::format!(
            "gradient check needs a scalar function, got shape {:?}",
            value.shape()
        )));
    }
    Ok(Eval {
        loss: value.data()[0],
        kinks: g.kink_signature().unwrap_or_default().to_vec(),
    })
}

fn analytic_grads<F: GradFn, T: Scalar>(
    f: &F,
    inputs: &[Tensor<T>],
    cfg: &GradCheckConfig,
) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::<T>::new(cfg.mode).with_dropout_stream(cfg.dropout_seed, 0);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f.eval(&mut g, &vars)?;
    let grads = g.backward(out)?;
    Ok(vars
        .iter()
        .map(|&v| grads.tensor(&g, v).to_f64_vec())
        .collect())
}

/// Compare backward gradients of `f` at `inputs` with `f64` central
/// differences.
pub fn grad_check<F: GradFn>(
    f: &F,
    inputs: &[Tensor<f64>],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    // Both precisions see the same point: the f32-representable one.
    let inputs32: Vec<Tensor<f32>> = inputs.iter().map(Tensor::cast).collect();
    let inputs64: Vec<Tensor<f64>> = inputs32.iter().map(Tensor::cast).collect();

    let analytic = match cfg.precision {
        Precision::F32 => analytic_grads(f, &inputs32, cfg)?,
        Precision::F64 => analytic_grads(f, &inputs64, cfg)?,
    };

    let base = eval_f64(f, &inputs64, cfg)?;
    let again = eval_f64(f, &inputs64, cfg)?;
    if base.loss.to_bits() != again.loss.to_bits() {
        return Err(Error::Contract(
            "gradient check needs a deterministic function".into(),
        ));
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
        excluded: 0,
        tol: cfg.tol,
    };
    let mut probe = inputs64.clone();
    for (i, grad) in analytic.iter().enumerate() {
        #[allow(clippy::needless_range_loop)]
        for j in 0..inputs64[i].len() {
            let x0 = inputs64[i].data()[j];
            probe[i].data_mut()[j] = x0 + cfg.step;
            let plus = eval_f64(f, &probe, cfg)?;
            probe[i].data_mut()[j] = x0 - cfg.step;
            let minus = eval_f64(f, &probe, cfg)?;
            probe[i].data_mut()[j] = x0;
            if plus.kinks != base.kinks || minus.kinks != base.kinks {
                report.excluded += 1;
                continue;
            }
            let numeric = (plus.loss - minus.loss) / (2.0 * cfg.step);
            let a = grad[j];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((i, j));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::cell::Cell;

    struct Identity;
    impl GradFn for Identity {
        fn eval<T: Scalar>(&self, _g: &mut Graph<T>, inputs: &[Var]) -> Result<Var> {
            Ok(inputs[0])
        }
    }

    struct ReluSum;
    impl GradFn for ReluSum {
        fn eval<T: Scalar>(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<Var> {
            let r = g.relu(inputs[0])?;
            let zero = g.constant(Tensor::zeros(g.shape(r)));
            let sq = g.mse_loss(r, zero)?;
            Ok(sq)
        }
    }

    struct Drifting(Cell<u32>);
    impl GradFn for Drifting {
        fn eval<T: Scalar>(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<Var> {
            self.0.set(self.0.get() + 1);
            g.scale(inputs[0], self.0.get() as f64)
        }
    }

    #[test]
    fn identity_has_zero_error() {
        // binary step keeps the difference quotient exact
        let cfg = GradCheckConfig {
            step: 1.0 / 1024.0,
            ..GradCheckConfig::default()
        };
        let x = Tensor::<f64>::scalar(0.75);
        let r = grad_check(&Identity, &[x], &cfg).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(r.checked, 1);
    }

    #[test]
    fn relu_kink_is_excluded() {
        let x = Tensor::<f64>::new(&[3], alloc::vec![-0.5, 0.0, 0.5]).unwrap();
        let r = grad_check(&ReluSum, &[x], &GradCheckConfig::default()).unwrap();
        assert_eq!(r.excluded, 1);
        assert_eq!(r.checked, 2);
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn nondeterministic_function_is_rejected() {
        let x = Tensor::<f64>::scalar(1.0);
        let err = grad_check(&Drifting(Cell::new(0)), &[x], &GradCheckConfig::default());
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
    }
}

pub mod suite;
