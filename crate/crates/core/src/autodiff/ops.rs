//! Forward rules. Each method computes its output eagerly and records what the
//! matching rule in `backward.rs` needs.

use alloc::vec;
use alloc::vec::Vec;
use rand::RngCore;

use super::{Graph, Mode, NormKind, Op, Var};
use crate::error::{dim_err, param_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub(crate) const NORM_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;

/// Elementwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// `(batch, m, k)` of a rank-2 or rank-3 matmul operand.
fn matmul_dims(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match *shape {
        [m, k] => Some((1, m, k)),
        [b, m, k] => Some((b, m, k)),
        _ => None,
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

impl<T: Scalar> Graph<T> {
    /// Matrix product over the last two axes, batched over a leading axis for
    /// rank-3 operands. With `trans_b` the right operand is stored `[.., N, K]`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        self.matmul_bias(a, b, trans_b, None)
    }

    /// [`Graph::matmul`] followed by adding `bias: [N]` to every output row.
    pub fn matmul_bias(&mut self, a: Var, b: Var, trans_b: bool, bias: Option<Var>) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (Some((ba, m, k)), Some((bb, r0, r1))) = (matmul_dims(sa), matmul_dims(sb)) else {
            return Err(dim_err!(
                "matmul needs rank 2 or 3 operands, got {sa:?} x {sb:?}"
            ));
        };
        let (kb, n) = if trans_b { (r1, r0) } else { (r0, r1) };
        if sa.len() != sb.len() || ba != bb || k != kb {
            return Err(dim_err!(
                "matmul shapes {sa:?} x {sb:?} (trans_b = {trans_b}) do not agree"
            ));
        }
        let mut out = match bias {
            Some(bias) => {
                let bv = self.value(bias);
                if bv.shape() != [n] {
                    return Err(dim_err!("matmul bias must be [{n}], got {:?}", bv.shape()));
                }
                bv.data().repeat(ba * m)
            }
            None => vec![T::zero(); ba * m * n],
        };
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            let b_strides = if trans_b {
                (1, k as isize)
            } else {
                (n as isize, 1)
            };
            for i in 0..ba {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    &av[i * m * k..(i + 1) * m * k],
                    (k as isize, 1),
                    &bv[i * k * n..(i + 1) * k * n],
                    b_strides,
                    beta,
                    &mut out[i * m * n..(i + 1) * m * n],
                    (n as isize, 1),
                );
            }
        }
        let shape = if sa.len() == 3 {
            vec![ba, m, n]
        } else {
            vec![m, n]
        };
        let op = Op::MatMul {
            a,
            b,
            trans_b,
            bias,
        };
        match bias {
            Some(bias) => self.push(Tensor::from_parts(shape, out), op, &[a, b, bias]),
            None => self.push(Tensor::from_parts(shape, out), op, &[a, b]),
        }
    }

    /// `x + y` where `y`'s shape equals the trailing axes of `x` (bias or
    /// positional-table broadcast).
    pub fn add_suffix(&mut self, x: Var, y: Var) -> Result<Var> {
        let (sx, sy) = (self.shape(x), self.shape(y));
        if sy.len() > sx.len() || sx[sx.len() - sy.len()..] != *sy {
            return Err(dim_err!("cannot broadcast {sy:?} over {sx:?}"));
        }
        let yv = self.value(y).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(yv.len()) {
            for (a, &b) in row.iter_mut().zip(yv) {
                *a += b;
            }
        }
        let shape = sx.to_vec();
        self.push(
            Tensor::from_parts(shape, out),
            Op::AddSuffix { x, y },
            &[x, y],
        )
    }

    fn zip_same(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(dim_err!("elementwise shapes differ: {sa:?} vs {sb:?}"));
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = sa.to_vec();
        self.push(Tensor::from_parts(shape, out), op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::from_f64_lossy(c);
        let v = self.value(x);
        let out = v.data().iter().map(|&a| a * c).collect();
        let shape = v.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Scale { x, c }, &[x])
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        if kind == Activation::Relu {
            let input = self.value(x).clone();
            self.record_kinks(input.data());
        }
        let v = self.value(x);
        let out: Vec<T> = match kind {
            Activation::Relu => v.data().iter().map(|&a| a.max(T::zero())).collect(),
            Activation::Tanh => v.data().iter().map(|&a| a.tanh()).collect(),
            Activation::Sigmoid => v.data().iter().map(|&a| sigmoid(a)).collect(),
        };
        let shape = v.shape().to_vec();
        let op = match kind {
            Activation::Relu => Op::Relu { x },
            Activation::Tanh => Op::Tanh { x },
            Activation::Sigmoid => Op::Sigmoid { x },
        };
        self.push(Tensor::from_parts(shape, out), op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    /// Inverted dropout: identity in eval mode, otherwise zero each element
    /// with probability `p` and scale survivors by `1 / (1 - p)`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(param_err!(
                "dropout probability must lie in [0, 1), got {p}"
            ));
        }
        if self.mode() == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let mut rng = self.next_dropout_rng();
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        // Drop when a uniform 32-bit draw falls below p * 2^32.
        let threshold = libm::round(p * 4_294_967_296.0) as u64;
        let v = self.value(x);
        let mask: Vec<T> = (0..v.len())
            .map(|_| {
                if u64::from(rng.next_u32()) < threshold {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out = v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let shape = v.shape().to_vec();
        self.push(
            Tensor::from_parts(shape, out),
            Op::Dropout { x, mask },
            &[x],
        )
    }

    /// Batch normalization over `[B, C]` or `[B, C, L]` with per-channel
    /// affine `gamma`/`beta`. Train mode normalizes with batch statistics and
    /// folds them into the running estimates; eval mode uses the estimates.
    pub fn batchnorm1d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut Tensor<T>,
        running_var: &mut Tensor<T>,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (batch, channels, inner) = match *shape.as_slice() {
            [b, c] => (b, c, 1),
            [b, c, l] => (b, c, l),
            _ => {
                return Err(dim_err!(
                    "batchnorm1d needs [B, C] or [B, C, L], got {shape:?}"
                ))
            }
        };
        for (name, t) in [
            ("gamma", self.value(gamma)),
            ("beta", self.value(beta)),
            ("running mean", &*running_mean),
            ("running var", &*running_var),
        ] {
            if t.shape() != [channels] {
                return Err(dim_err!(
                    "batchnorm {name} must be [{channels}], got {:?}",
                    t.shape()
                ));
            }
        }
        let train = self.mode() == Mode::Train;
        if train && batch < 2 {
            return Err(Error::DegenerateBatch(batch));
        }
        let eps = T::from_f64_lossy(NORM_EPS);
        let xv = self.value(x).data();
        let count = batch * inner;
        let (mean, var): (Vec<T>, Vec<T>) = if train {
            let n = T::from_usize(count).unwrap();
            (0..channels)
                .map(|c| {
                    let vals = || {
                        (0..batch).flat_map(move |b| {
                            let off = (b * channels + c) * inner;
                            xv[off..off + inner].iter().copied()
                        })
                    };
                    let mean = vals().sum::<T>() / n;
                    let var = vals().map(|v| (v - mean) * (v - mean)).sum::<T>() / n;
                    (mean, var)
                })
                .unzip()
        } else {
            (running_mean.data().to_vec(), running_var.data().to_vec())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for (i, (&v, (h, o))) in xv
            .iter()
            .zip(xhat.iter_mut().zip(out.iter_mut()))
            .enumerate()
        {
            let c = (i / inner) % channels;
            *h = (v - mean[c]) * inv_std[c];
            *o = gv[c] * *h + bv[c];
        }
        if train {
            let m = T::from_f64_lossy(BN_MOMENTUM);
            let unbias = T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap();
            for (r, &b) in running_mean.data_mut().iter_mut().zip(&mean) {
                *r = (T::one() - m) * *r + m * b;
            }
            for (r, &b) in running_var.data_mut().iter_mut().zip(&var) {
                *r = (T::one() - m) * *r + m * b * unbias;
            }
        }
        let kind = if train {
            NormKind::BatchTrain { channels, inner }
        } else {
            NormKind::BatchEval { channels, inner }
        };
        self.push(
            Tensor::from_parts(shape, out),
            Op::Norm {
                x,
                gamma,
                beta,
                kind,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Normalize over the last axis, then apply `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let dim = *shape.last().unwrap();
        if self.shape(gamma) != [dim] || self.shape(beta) != [dim] {
            return Err(dim_err!(
                "layer norm affine must be [{dim}], got {:?} / {:?}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let eps = T::from_f64_lossy(NORM_EPS);
        let n = T::from_usize(dim).unwrap();
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_std = Vec::with_capacity(xv.len() / dim);
        for ((row, hrow), orow) in xv
            .chunks_exact(dim)
            .zip(xhat.chunks_exact_mut(dim))
            .zip(out.chunks_exact_mut(dim))
        {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..dim {
                hrow[j] = (row[j] - mean) * is;
                orow[j] = gv[j] * hrow[j] + bv[j];
            }
        }
        self.push(
            Tensor::from_parts(shape, out),
            Op::Norm {
                x,
                gamma,
                beta,
                kind: NormKind::Layer { dim },
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Stride-1 cross-correlation of `x: [B, Cin, L]` with `w: [Cout, Cin, K]`,
    /// zero padded by `padding` on both ends.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, padding: usize) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        let ([batch, cin, len], [cout, cin_w, k]) = (sx, sw) else {
            return Err(dim_err!(
                "conv1d needs x [B, Cin, L] and w [Cout, Cin, K], got {sx:?} / {sw:?}"
            ));
        };
        let (batch, cin, len, cout, k) = (*batch, *cin, *len, *cout, *k);
        if cin != *cin_w || sb != [cout] {
            return Err(dim_err!(
                "conv1d channel mismatch: x {sx:?}, w {sw:?}, b {sb:?}"
            ));
        }
        if k > len + 2 * padding {
            return Err(dim_err!(
                "conv1d kernel {k} exceeds padded length {}",
                len + 2 * padding
            ));
        }
        let out_len = len + 2 * padding - k + 1;
        let (xv, wv, bv) = (
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let mut cols = vec![T::zero(); cin * k * out_len];
        let mut out = vec![T::zero(); batch * cout * out_len];
        for bi in 0..batch {
            im2col(
                &xv[bi * cin * len..(bi + 1) * cin * len],
                cin,
                len,
                k,
                padding,
                &mut cols,
            );
            let y = &mut out[bi * cout * out_len..(bi + 1) * cout * out_len];
            for (row, &bias) in y.chunks_exact_mut(out_len).zip(bv) {
                row.fill(bias);
            }
            T::gemm(
                cout,
                cin * k,
                out_len,
                T::one(),
                wv,
                ((cin * k) as isize, 1),
                &cols,
                (out_len as isize, 1),
                T::one(),
                y,
                (out_len as isize, 1),
            );
        }
        self.push(
            Tensor::from_parts(vec![batch, cout, out_len], out),
            Op::Conv1d { x, w, b, padding },
            &[x, w, b],
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let dim = *v.shape().last().unwrap();
        let mut out = v.data().to_vec();
        for row in out.chunks_exact_mut(dim) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for e in row.iter_mut() {
                *e = (*e - max).exp();
                total += *e;
            }
            for e in row.iter_mut() {
                *e /= total;
            }
        }
        let shape = v.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Softmax { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push(out, Op::Reshape { x }, &[x])
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || core::mem::replace(&mut seen[p], true))
        {
            return Err(dim_err!("invalid permutation {perm:?} for shape {shape:?}"));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = permute_data(self.value(x).data(), &shape, perm);
        self.push(
            Tensor::from_parts(out_shape, out),
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        )
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(dim_err!(
                "narrow({axis}, {start}, {len}) out of range for {shape:?}"
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        self.push(
            Tensor::from_parts(out_shape, out),
            Op::Narrow { x, axis, start },
            &[x],
        )
    }

    /// Join tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(dim_err!("concat of zero tensors"));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(dim_err!("concat axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(dim_err!("concat shapes disagree: {base:?} vs {s:?}"));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * n..(o + 1) * n]);
            }
        }
        let mut out_shape = base;
        out_shape[axis] = total;
        self.push(
            Tensor::from_parts(out_shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    /// Mean squared error over all elements, as a `[1]` tensor.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (sp, st) = (self.shape(pred), self.shape(target));
        if sp != st {
            return Err(dim_err!("mse shapes differ: {sp:?} vs {st:?}"));
        }
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let total = p.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>();
        let loss = total / T::from_usize(p.len()).unwrap();
        self.push(
            Tensor::scalar(loss),
            Op::Mse { pred, target },
            &[pred, target],
        )
    }
}

/// Unfold one sample `[Cin, L]` into `[Cin * K, L']` columns.
pub(crate) fn im2col<T: Scalar>(
    x: &[T],
    cin: usize,
    len: usize,
    k: usize,
    padding: usize,
    cols: &mut [T],
) {
    let out_len = len + 2 * padding - k + 1;
    for c in 0..cin {
        for kk in 0..k {
            let row = &mut cols[(c * k + kk) * out_len..(c * k + kk + 1) * out_len];
            for (t, slot) in row.iter_mut().enumerate() {
                let src = t + kk;
                *slot = if src >= padding && src - padding < len {
                    x[c * len + src - padding]
                } else {
                    T::zero()
                };
            }
        }
    }
}

/// Scatter-add columns back onto one sample `[Cin, L]`.
pub(crate) fn col2im<T: Scalar>(
    cols: &[T],
    cin: usize,
    len: usize,
    k: usize,
    padding: usize,
    dx: &mut [T],
) {
    let out_len = len + 2 * padding - k + 1;
    for c in 0..cin {
        for kk in 0..k {
            let row = &cols[(c * k + kk) * out_len..(c * k + kk + 1) * out_len];
            for (t, &g) in row.iter().enumerate() {
                let src = t + kk;
                if src >= padding && src - padding < len {
                    dx[c * len + src - padding] += g;
                }
            }
        }
    }
}

pub(crate) fn permute_data<T: Copy>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    // Trailing axes that stay in place form contiguous runs.
    let mut fixed = 0;
    while fixed < perm.len() && perm[perm.len() - 1 - fixed] == perm.len() - 1 - fixed {
        fixed += 1;
    }
    let rank = perm.len() - fixed;
    let run: usize = shape[rank..].iter().product();
    if rank == 0 {
        return data.to_vec();
    }
    let in_strides = row_major_strides(&shape[..rank]);
    let out_shape: Vec<usize> = perm[..rank].iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm[..rank].iter().map(|&p| in_strides[p] * run).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() / run {
        out.extend_from_slice(&data[offset..offset + run]);
        // odometer increment over output indices
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}
