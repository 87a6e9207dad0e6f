//! Backward rules, one per [`Op`] variant.

use alloc::vec;
use alloc::vec::Vec;

use super::ops::{col2im, im2col, permute_data};
use super::{Graph, NormKind, Op, Var};
use crate::scalar::Scalar;

/// Gradient slot of `v`, allocated on first use; `None` for constants.
fn slot<'a, T: Scalar>(
    graph: &Graph<T>,
    grads: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut [T]> {
    let node = &graph.nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(
        grads[v.0]
            .get_or_insert_with(|| vec![T::zero(); node.value.len()])
            .as_mut_slice(),
    )
}

fn add_into<T: Scalar>(dst: &mut [T], src: impl IntoIterator<Item = T>) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Add an elementwise contribution to the gradient of `v`; the first one is
/// stored directly instead of being added onto zeros.
fn accumulate<T: Scalar>(
    graph: &Graph<T>,
    grads: &mut [Option<Vec<T>>],
    v: Var,
    src: impl IntoIterator<Item = T>,
) {
    if !graph.nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(dst) => add_into(dst, src),
        empty => *empty = Some(src.into_iter().collect()),
    }
}

/// Like [`accumulate`] for an owned buffer, which is moved when possible.
fn accumulate_owned<T: Scalar>(
    graph: &Graph<T>,
    grads: &mut [Option<Vec<T>>],
    v: Var,
    src: Vec<T>,
) {
    if !graph.nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(dst) => add_into(dst, src),
        empty => *empty = Some(src),
    }
}

pub(super) fn propagate<T: Scalar>(
    graph: &Graph<T>,
    node: usize,
    gy_owned: Vec<T>,
    grads: &mut [Option<Vec<T>>],
) {
    let gy = gy_owned.as_slice();
    let out = &graph.nodes[node].value;
    let val = |v: Var| graph.nodes[v.0].value.data();
    match &graph.nodes[node].op {
        Op::Leaf => {}
        &Op::MatMul {
            a,
            b,
            trans_b,
            bias,
        } => {
            let sa = graph.shape(a);
            let (batch, m, k) = match *sa {
                [m, k] => (1, m, k),
                [bt, m, k] => (bt, m, k),
                _ => unreachable!(),
            };
            let n = *out.shape().last().unwrap();
            let (av, bv) = (val(a), val(b));
            if let Some(da) = slot(graph, grads, a) {
                // op(B)^T as an n x k view
                let bt_strides = if trans_b {
                    (k as isize, 1)
                } else {
                    (1, n as isize)
                };
                for i in 0..batch {
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        &gy[i * m * n..(i + 1) * m * n],
                        (n as isize, 1),
                        &bv[i * k * n..(i + 1) * k * n],
                        bt_strides,
                        T::one(),
                        &mut da[i * m * k..(i + 1) * m * k],
                        (k as isize, 1),
                    );
                }
            }
            if let Some(db) = slot(graph, grads, b) {
                for i in 0..batch {
                    let (gy_i, a_i) = (
                        &gy[i * m * n..(i + 1) * m * n],
                        &av[i * m * k..(i + 1) * m * k],
                    );
                    let db_i = &mut db[i * k * n..(i + 1) * k * n];
                    if trans_b {
                        // dB[n, k] = gy^T a
                        T::gemm(
                            n,
                            m,
                            k,
                            T::one(),
                            gy_i,
                            (1, n as isize),
                            a_i,
                            (k as isize, 1),
                            T::one(),
                            db_i,
                            (k as isize, 1),
                        );
                    } else {
                        // dB[k, n] = a^T gy
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            a_i,
                            (1, k as isize),
                            gy_i,
                            (n as isize, 1),
                            T::one(),
                            db_i,
                            (n as isize, 1),
                        );
                    }
                }
            }
            if let Some(dbias) = bias.and_then(|v| slot(graph, grads, v)) {
                for row in gy.chunks_exact(n) {
                    add_into(dbias, row.iter().copied());
                }
            }
        }
        &Op::AddSuffix { x, y } => {
            if let Some(dy) = slot(graph, grads, y) {
                let width = dy.len();
                for row in gy.chunks_exact(width) {
                    add_into(dy, row.iter().copied());
                }
            }
            accumulate_owned(graph, grads, x, gy_owned);
        }
        &Op::Add { a, b } => {
            accumulate(graph, grads, a, gy.iter().copied());
            accumulate_owned(graph, grads, b, gy_owned);
        }
        &Op::Sub { a, b } => {
            accumulate(graph, grads, a, gy.iter().copied());
            accumulate(graph, grads, b, gy.iter().map(|&g| -g));
        }
        &Op::Mul { a, b } => {
            let (av, bv) = (val(a), val(b));
            accumulate(graph, grads, a, gy.iter().zip(bv).map(|(&g, &y)| g * y));
            accumulate(graph, grads, b, gy.iter().zip(av).map(|(&g, &x)| g * x));
        }
        &Op::Scale { x, c } => {
            accumulate(graph, grads, x, gy.iter().map(|&g| g * c));
        }
        &Op::Relu { x } => {
            let xv = val(x);
            accumulate(
                graph,
                grads,
                x,
                gy.iter()
                    .zip(xv)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() }),
            );
        }
        &Op::Tanh { x } => {
            let y = out.data();
            accumulate(
                graph,
                grads,
                x,
                gy.iter().zip(y).map(|(&g, &t)| g * (T::one() - t * t)),
            );
        }
        &Op::Sigmoid { x } => {
            let y = out.data();
            accumulate(
                graph,
                grads,
                x,
                gy.iter().zip(y).map(|(&g, &s)| g * s * (T::one() - s)),
            );
        }
        Op::Dropout { x, mask } => {
            accumulate(graph, grads, *x, gy.iter().zip(mask).map(|(&g, &m)| g * m));
        }
        Op::Norm {
            x,
            gamma,
            beta,
            kind,
            xhat,
            inv_std,
        } => norm_backward(graph, grads, gy, (*x, *gamma, *beta), *kind, xhat, inv_std),
        &Op::Conv1d { x, w, b, padding } => {
            let (batch, cin, len) = match *graph.shape(x) {
                [bt, c, l] => (bt, c, l),
                _ => unreachable!(),
            };
            let (cout, k) = (graph.shape(w)[0], graph.shape(w)[2]);
            let out_len = out.shape()[2];
            let ck = cin * k;
            let (xv, wv) = (val(x), val(w));
            let mut cols = vec![T::zero(); ck * out_len];
            if slot(graph, grads, w).is_some() {
                for bi in 0..batch {
                    im2col(
                        &xv[bi * cin * len..(bi + 1) * cin * len],
                        cin,
                        len,
                        k,
                        padding,
                        &mut cols,
                    );
                    let dw = slot(graph, grads, w).unwrap();
                    T::gemm(
                        cout,
                        out_len,
                        ck,
                        T::one(),
                        &gy[bi * cout * out_len..(bi + 1) * cout * out_len],
                        (out_len as isize, 1),
                        &cols,
                        (1, out_len as isize),
                        T::one(),
                        dw,
                        (ck as isize, 1),
                    );
                }
            }
            if let Some(dx) = slot(graph, grads, x) {
                for bi in 0..batch {
                    T::gemm(
                        ck,
                        cout,
                        out_len,
                        T::one(),
                        wv,
                        (1, ck as isize),
                        &gy[bi * cout * out_len..(bi + 1) * cout * out_len],
                        (out_len as isize, 1),
                        T::zero(),
                        &mut cols,
                        (out_len as isize, 1),
                    );
                    col2im(
                        &cols,
                        cin,
                        len,
                        k,
                        padding,
                        &mut dx[bi * cin * len..(bi + 1) * cin * len],
                    );
                }
            }
            if let Some(db) = slot(graph, grads, b) {
                for (i, row) in gy.chunks_exact(out_len).enumerate() {
                    db[i % cout] += row.iter().copied().sum::<T>();
                }
            }
        }
        &Op::Softmax { x } => {
            let y = out.data();
            let dim = *out.shape().last().unwrap();
            if let Some(dx) = slot(graph, grads, x) {
                for ((drow, grow), yrow) in dx
                    .chunks_exact_mut(dim)
                    .zip(gy.chunks_exact(dim))
                    .zip(y.chunks_exact(dim))
                {
                    let dot = grow.iter().zip(yrow).map(|(&g, &s)| g * s).sum::<T>();
                    for j in 0..dim {
                        drow[j] += yrow[j] * (grow[j] - dot);
                    }
                }
            }
        }
        &Op::Reshape { x } => accumulate_owned(graph, grads, x, gy_owned),
        Op::Permute { x, perm } => {
            if !graph.requires_grad(*x) {
                return;
            }
            let mut inverse = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            let back = permute_data(gy, out.shape(), &inverse);
            accumulate_owned(graph, grads, *x, back);
        }
        &Op::Narrow { x, axis, start } => {
            let full = graph.shape(x);
            let outer: usize = full[..axis].iter().product();
            let inner: usize = full[axis + 1..].iter().product();
            let (extent, len) = (full[axis], out.shape()[axis]);
            if let Some(dx) = slot(graph, grads, x) {
                for o in 0..outer {
                    let base = (o * extent + start) * inner;
                    let src = &gy[o * len * inner..(o + 1) * len * inner];
                    add_into(&mut dx[base..base + len * inner], src.iter().copied());
                }
            }
        }
        Op::Concat { parts, axis } => {
            let shape = out.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[*axis + 1..].iter().product();
            let row = shape[*axis] * inner;
            let mut offset = 0;
            for &p in parts {
                let n = graph.shape(p)[*axis] * inner;
                if let Some(dp) = slot(graph, grads, p) {
                    for o in 0..outer {
                        let src = &gy[o * row + offset..o * row + offset + n];
                        add_into(&mut dp[o * n..(o + 1) * n], src.iter().copied());
                    }
                }
                offset += n;
            }
        }
        &Op::Mse { pred, target } => {
            let (p, t) = (val(pred), val(target));
            let scale = T::from_f64_lossy(2.0) * gy[0] / T::from_usize(p.len()).unwrap();
            if let Some(dp) = slot(graph, grads, pred) {
                add_into(dp, p.iter().zip(t).map(|(&a, &b)| scale * (a - b)));
            }
            if let Some(dt) = slot(graph, grads, target) {
                add_into(dt, p.iter().zip(t).map(|(&a, &b)| -scale * (a - b)));
            }
        }
    }
}

fn norm_backward<T: Scalar>(
    graph: &Graph<T>,
    grads: &mut [Option<Vec<T>>],
    gy: &[T],
    (x, gamma, beta): (Var, Var, Var),
    kind: NormKind,
    xhat: &[T],
    inv_std: &[T],
) {
    let gv = graph.value(gamma).data().to_vec();
    match kind {
        NormKind::Layer { dim } => {
            if let Some(dg) = slot(graph, grads, gamma) {
                for (grow, hrow) in gy.chunks_exact(dim).zip(xhat.chunks_exact(dim)) {
                    for ((d, &g), &h) in dg.iter_mut().zip(grow).zip(hrow) {
                        *d += g * h;
                    }
                }
            }
            if let Some(db) = slot(graph, grads, beta) {
                for grow in gy.chunks_exact(dim) {
                    add_into(db, grow.iter().copied());
                }
            }
            let Some(dx) = slot(graph, grads, x) else {
                return;
            };
            let n = T::from_usize(dim).unwrap();
            let mut d = vec![T::zero(); dim];
            for (((drow, grow), hrow), &is) in dx
                .chunks_exact_mut(dim)
                .zip(gy.chunks_exact(dim))
                .zip(xhat.chunks_exact(dim))
                .zip(inv_std)
            {
                let (mut sum_d, mut sum_dh) = (T::zero(), T::zero());
                for j in 0..dim {
                    d[j] = grow[j] * gv[j];
                    sum_d += d[j];
                    sum_dh += d[j] * hrow[j];
                }
                let scale = is / n;
                for j in 0..dim {
                    drow[j] += scale * (n * d[j] - sum_d - hrow[j] * sum_dh);
                }
            }
        }
        NormKind::BatchTrain { channels, inner } | NormKind::BatchEval { channels, inner } => {
            // Blocks of `inner` contiguous elements share one channel.
            let blocks = || {
                gy.chunks_exact(inner)
                    .zip(xhat.chunks_exact(inner))
                    .enumerate()
            };
            if let Some(dg) = slot(graph, grads, gamma) {
                for (i, (g, h)) in blocks() {
                    dg[i % channels] += g.iter().zip(h).map(|(&g, &h)| g * h).sum::<T>();
                }
            }
            if let Some(db) = slot(graph, grads, beta) {
                for (i, g) in gy.chunks_exact(inner).enumerate() {
                    db[i % channels] += g.iter().copied().sum::<T>();
                }
            }
            let Some(dx) = slot(graph, grads, x) else {
                return;
            };
            if let NormKind::BatchEval { .. } = kind {
                for (i, (drow, grow)) in dx
                    .chunks_exact_mut(inner)
                    .zip(gy.chunks_exact(inner))
                    .enumerate()
                {
                    let c = i % channels;
                    let f = gv[c] * inv_std[c];
                    add_into(drow, grow.iter().map(|&g| g * f));
                }
                return;
            }
            // Batch statistics: every element of a channel feeds its mean and variance.
            let mut sum_d = vec![T::zero(); channels];
            let mut sum_dh = vec![T::zero(); channels];
            for (i, (g, h)) in blocks() {
                let c = i % channels;
                for (&g, &h) in g.iter().zip(h) {
                    let d = g * gv[c];
                    sum_d[c] += d;
                    sum_dh[c] += d * h;
                }
            }
            let n = T::from_usize(gy.len() / channels).unwrap();
            for (i, ((drow, grow), hrow)) in dx
                .chunks_exact_mut(inner)
                .zip(gy.chunks_exact(inner))
                .zip(xhat.chunks_exact(inner))
                .enumerate()
            {
                let c = i % channels;
                let scale = inv_std[c] / n;
                for ((dst, &g), &h) in drow.iter_mut().zip(grow).zip(hrow) {
                    *dst += scale * (n * g * gv[c] - sum_d[c] - h * sum_dh[c]);
                }
            }
        }
    }
}
