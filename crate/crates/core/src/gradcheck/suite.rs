//! Fixed gradient-check cases: every autodiff primitive and every
//! architecture at reduced size.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{grad_check, GradCheckConfig, GradCheckReport, GradFn, Precision};
use crate::autodiff::{AttentionParams, Graph, LstmParams, Mode, Var};
use crate::error::{Error, Result};
use crate::models::{build_model_with, ArchKind, Hyper, Model};
use crate::rng::{self, Domain};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `scale * N(0, 1)` from the test stream, keyed by seed and size.
pub fn randn(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = rng::stream(seed, Domain::Test, shape.iter().product::<usize>() as u64);
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Every differentiable primitive, wrapped into a scalar loss against a fixed target.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpCase {
    Linear,
    Activations,
    BatchNormTrain,
    BatchNormEval,
    Conv1d,
    Lstm,
    Attention,
    LayerNorm,
    Shapes,
    Mul,
    DropoutTrain,
}

impl OpCase {
    pub const ALL: [OpCase; 11] = [
        OpCase::Linear,
        OpCase::Activations,
        OpCase::BatchNormTrain,
        OpCase::BatchNormEval,
        OpCase::Conv1d,
        OpCase::Lstm,
        OpCase::Attention,
        OpCase::LayerNorm,
        OpCase::Shapes,
        OpCase::Mul,
        OpCase::DropoutTrain,
    ];

    /// Graph mode the case is checked in.
    pub fn mode(self) -> Mode {
        match self {
            OpCase::BatchNormTrain | OpCase::DropoutTrain => Mode::Train,
            _ => Mode::Eval,
        }
    }
}

struct OpLoss {
    case: OpCase,
    target: Tensor<f64>,
}

impl OpCase {
    pub fn inputs(self, seed: u64) -> Vec<Tensor<f64>> {
        let s = seed * 100;
        match self {
            OpCase::Linear => vec![
                randn(&[3, 4], s, 1.0),
                randn(&[4, 5], s + 1, 0.5),
                randn(&[5], s + 2, 0.5),
            ],
            OpCase::Activations | OpCase::Mul | OpCase::Shapes | OpCase::DropoutTrain => {
                vec![randn(&[2, 3, 4], s, 1.0), randn(&[2, 3, 4], s + 1, 1.0)]
            }
            OpCase::BatchNormTrain => vec![
                randn(&[4, 3, 5], s, 2.0),
                randn(&[3], s + 1, 1.0),
                randn(&[3], s + 2, 1.0),
            ],
            OpCase::BatchNormEval => vec![
                randn(&[4, 3], s, 2.0),
                randn(&[3], s + 1, 1.0),
                randn(&[3], s + 2, 1.0),
            ],
            OpCase::Conv1d => vec![
                randn(&[2, 3, 7], s, 1.0),
                randn(&[4, 3, 3], s + 1, 0.5),
                randn(&[4], s + 2, 0.5),
            ],
            OpCase::Lstm => vec![
                randn(&[2, 4, 3], s, 1.0),
                randn(&[20, 3], s + 1, 0.5),
                randn(&[20, 5], s + 2, 0.5),
                randn(&[20], s + 3, 0.5),
                randn(&[20], s + 4, 0.5),
            ],
            OpCase::Attention => vec![
                randn(&[2, 3, 8], s, 1.0),
                randn(&[24, 8], s + 1, 0.4),
                randn(&[24], s + 2, 0.2),
                randn(&[8, 8], s + 3, 0.4),
                randn(&[8], s + 4, 0.2),
            ],
            OpCase::LayerNorm => vec![
                randn(&[3, 6], s, 2.0),
                randn(&[6], s + 1, 1.0),
                randn(&[6], s + 2, 1.0),
            ],
        }
    }
}

impl GradFn for OpLoss {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
        let out = match self.case {
            OpCase::Linear => g.linear(v[0], v[1], v[2])?,
            OpCase::Activations => {
                let a = g.tanh(v[0])?;
                let b = g.sigmoid(v[1])?;
                let c = g.relu(v[1])?;
                let ab = g.add(a, b)?;
                g.sub(ab, c)?
            }
            OpCase::BatchNormTrain | OpCase::BatchNormEval => {
                let c = g.shape(v[1])[0];
                let mut rm = Tensor::from_f64(&[c], &[0.3, -0.2, 0.1]).unwrap();
                let mut rv = Tensor::from_f64(&[c], &[1.5, 0.7, 2.0]).unwrap();
                g.batchnorm1d(v[0], v[1], v[2], &mut rm, &mut rv)?
            }
            OpCase::Conv1d => g.conv1d(v[0], v[1], v[2], 1)?,
            OpCase::Lstm => {
                let p = LstmParams {
                    w_ih: v[1],
                    w_hh: v[2],
                    b_ih: v[3],
                    b_hh: v[4],
                };
                let out = g.lstm_layer(v[0], &p, None, None, true)?;
                let outputs = out.outputs.unwrap();
                let c = g.reshape(out.c, &[2, 1, 5])?;
                g.concat(&[outputs, c], 1)?
            }
            OpCase::Attention => {
                let p = AttentionParams {
                    in_w: v[1],
                    in_b: v[2],
                    out_w: v[3],
                    out_b: v[4],
                };
                let full = g.multihead_self_attention(v[0], &p, 2)?;
                let q = g.narrow(v[0], 1, 2, 1)?;
                let last = g.multihead_attention(q, v[0], &p, 2)?;
                g.concat(&[full, last], 1)?
            }
            OpCase::LayerNorm => g.layer_norm(v[0], v[1], v[2])?,
            OpCase::Shapes => {
                let p = g.permute(v[0], &[2, 0, 1])?;
                let n = g.narrow(p, 0, 1, 2)?;
                let r = g.reshape(n, &[2, 2, 3])?;
                let q = g.permute(v[1], &[2, 0, 1])?;
                let m = g.narrow(q, 0, 0, 2)?;
                let m = g.reshape(m, &[2, 2, 3])?;
                let c = g.concat(&[r, m], 2)?;
                let s = g.softmax(c)?;
                g.scale(s, 3.0)?
            }
            OpCase::Mul => {
                let a = g.mul(v[0], v[1])?;
                g.add_suffix(a, v[1])?
            }
            OpCase::DropoutTrain => {
                let d = g.dropout(v[0], 0.3)?;
                g.mul(d, v[1])?
            }
        };
        let target = g.constant(Tensor::from_f64(self.target.shape(), self.target.data())?);
        if g.shape(out) != g.shape(target) {
            return Err(Error::Dimension(alloc::format!("{:?}", g.shape(out))));
        }
        g.mse_loss(out, target)
    }
}

fn output_shape(case: OpCase) -> Vec<usize> {
    match case {
        OpCase::Linear => vec![3, 5],
        OpCase::Activations | OpCase::Mul | OpCase::DropoutTrain => vec![2, 3, 4],
        OpCase::BatchNormTrain => vec![4, 3, 5],
        OpCase::BatchNormEval => vec![4, 3],
        OpCase::Conv1d => vec![2, 4, 7],
        OpCase::Lstm => vec![2, 5, 5],
        OpCase::Attention => vec![2, 4, 8],
        OpCase::LayerNorm => vec![3, 6],
        OpCase::Shapes => vec![2, 2, 6],
    }
}

/// Check one primitive at `seed` with the given backward precision and tolerance.
pub fn check_op_with(
    case: OpCase,
    seed: u64,
    precision: Precision,
    tol: f64,
) -> Result<GradCheckReport> {
    let f = OpLoss {
        case,
        target: randn(&output_shape(case), seed * 100 + 99, 1.0),
    };
    let cfg = GradCheckConfig {
        mode: case.mode(),
        dropout_seed: seed,
        precision,
        tol,
        ..GradCheckConfig::default()
    };
    grad_check(&f, &case.inputs(seed), &cfg)
}

pub fn check_op(case: OpCase, seed: u64) -> Result<GradCheckReport> {
    check_op_with(case, seed, Precision::F64, GradCheckConfig::default().tol)
}

/// MSE of a model's forecast against a fixed target; inputs are the
/// observation followed by every parameter tensor.
struct ModelLoss {
    model: Model<f64>,
    target: Tensor<f64>,
}

impl GradFn for ModelLoss {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<Var> {
        let mut m = self.model.cast::<T>();
        let y = m.forward_with(g, &inputs[1..], inputs[0])?;
        let t = g.constant(self.target.cast());
        g.mse_loss(y, t)
    }
}

/// Check a full reduced-size model on a 2-sample batch, with respect to the
/// input and every parameter.
pub fn check_model(kind: ArchKind, mode: Mode, seed: u64) -> Result<GradCheckReport> {
    let hyper = Hyper::reduced();
    let model = build_model_with::<f64>(kind, hyper.clone(), seed)?;
    let mut rng = rng::stream(seed, Domain::Test, 1);
    let mut uniform = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    };
    let target = uniform(&hyper.output_shape(2))?;
    let x = uniform(&hyper.input_shape(2))?;
    let mut inputs: Vec<Tensor<f64>> = vec![x];
    inputs.extend(model.params().tensors().cloned());
    let f = ModelLoss { model, target };
    let cfg = GradCheckConfig {
        mode,
        dropout_seed: seed,
        step: 1e-4,
        ..GradCheckConfig::default()
    };
    grad_check(&f, &inputs, &cfg)
}
