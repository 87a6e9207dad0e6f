//! Composite layers assembled from primitive tape operations.

use alloc::vec::Vec;

use super::{Graph, Var};
use crate::error::{dim_err, param_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Gate weights of one LSTM layer, gate order (input, forget, cell, output).
#[derive(Debug, Clone, Copy)]
pub struct LstmParams {
    /// `[4H, I]`
    pub w_ih: Var,
    /// `[4H, H]`
    pub w_hh: Var,
    /// `[4H]`
    pub b_ih: Var,
    /// `[4H]`
    pub b_hh: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct LstmOutput {
    /// `[B, T, H]`, present when requested.
    pub outputs: Option<Var>,
    pub h: Var,
    pub c: Var,
}

/// Fused-projection multi-head attention weights.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    /// `[3D, D]`, rows ordered query, key, value.
    pub in_w: Var,
    /// `[3D]`
    pub in_b: Var,
    /// `[D, D]`
    pub out_w: Var,
    /// `[D]`
    pub out_b: Var,
}

impl<T: Scalar> Graph<T> {
    fn flatten_rows(&mut self, x: Var) -> Result<(Var, Vec<usize>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(dim_err!("expected at least a rank-2 input, got {shape:?}"));
        }
        if shape.len() == 2 {
            return Ok((x, shape));
        }
        let last = shape[shape.len() - 1];
        let rows = shape.iter().product::<usize>() / last;
        Ok((self.reshape(x, &[rows, last])?, shape))
    }

    fn project(&mut self, x: Var, w: Var, b: Var, trans: bool) -> Result<Var> {
        let (flat, shape) = self.flatten_rows(x)?;
        let y = self.matmul_bias(flat, w, trans, Some(b))?;
        if shape.len() == 2 {
            return Ok(y);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.shape(y)[1];
        self.reshape(y, &out_shape)
    }

    /// `x · w + b` for `w: [I, O]`, applied over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.project(x, w, b, false)
    }

    /// `x · wᵀ + b` for `w: [O, I]`.
    pub fn linear_t(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.project(x, w, b, true)
    }

    /// Run one LSTM layer over `x: [B, T, I]`.
    ///
    /// Missing `h0`/`c0` mean zero initial state.
    pub fn lstm_layer(
        &mut self,
        x: Var,
        p: &LstmParams,
        h0: Option<Var>,
        c0: Option<Var>,
        keep_outputs: bool,
    ) -> Result<LstmOutput> {
        let [batch, steps, input] = *self.shape(x) else {
            return Err(dim_err!(
                "lstm input must be [B, T, I], got {:?}",
                self.shape(x)
            ));
        };
        let gates4 = self.shape(p.w_ih)[0];
        let hidden = gates4 / 4;
        if gates4 % 4 != 0
            || self.shape(p.w_ih) != [gates4, input]
            || self.shape(p.w_hh) != [gates4, hidden]
            || self.shape(p.b_ih) != [gates4]
            || self.shape(p.b_hh) != [gates4]
        {
            return Err(dim_err!(
                "lstm weights do not match input width {input}: w_ih {:?}, w_hh {:?}",
                self.shape(p.w_ih),
                self.shape(p.w_hh)
            ));
        }
        for s in [h0, c0].into_iter().flatten() {
            if self.shape(s) != [batch, hidden] {
                return Err(dim_err!(
                    "lstm state must be [{batch}, {hidden}], got {:?}",
                    self.shape(s)
                ));
            }
        }
        // Input projections for all steps at once.
        let xp = self.linear_t(x, p.w_ih, p.b_ih)?;
        let xp = self.add_suffix(xp, p.b_hh)?;
        let (mut h, mut c) = (h0, c0);
        let mut outputs = Vec::with_capacity(if keep_outputs { steps } else { 0 });
        for t in 0..steps {
            let xt = self.narrow(xp, 1, t, 1)?;
            let mut gates = self.reshape(xt, &[batch, gates4])?;
            if let Some(h_prev) = h {
                let rec = self.matmul(h_prev, p.w_hh, true)?;
                gates = self.add(gates, rec)?;
            }
            let i = self.narrow(gates, 1, 0, hidden)?;
            let i = self.sigmoid(i)?;
            let f = self.narrow(gates, 1, hidden, hidden)?;
            let f = self.sigmoid(f)?;
            let g = self.narrow(gates, 1, 2 * hidden, hidden)?;
            let g = self.tanh(g)?;
            let o = self.narrow(gates, 1, 3 * hidden, hidden)?;
            let o = self.sigmoid(o)?;
            let mut c_new = self.mul(i, g)?;
            if let Some(c_prev) = c {
                let kept = self.mul(f, c_prev)?;
                c_new = self.add(kept, c_new)?;
            }
            let squashed = self.tanh(c_new)?;
            let h_new = self.mul(o, squashed)?;
            if keep_outputs {
                outputs.push(self.reshape(h_new, &[batch, 1, hidden])?);
            }
            h = Some(h_new);
            c = Some(c_new);
        }
        let outputs = if keep_outputs {
            Some(self.concat(&outputs, 1)?)
        } else {
            None
        };
        Ok(LstmOutput {
            outputs,
            h: h.expect("at least one step"),
            c: c.expect("at least one step"),
        })
    }

    /// Unmasked scaled dot-product self-attention over `x: [B, T, D]`.
    pub fn multihead_self_attention(
        &mut self,
        x: Var,
        p: &AttentionParams,
        heads: usize,
    ) -> Result<Var> {
        self.multihead_attention(x, x, p, heads)
    }

    /// Attention of `query: [B, Tq, D]` over the keys and values of
    /// `x: [B, T, D]`. Equals rows of the self-attention of `x` when the query
    /// rows are rows of `x`.
    pub fn multihead_attention(
        &mut self,
        query: Var,
        x: Var,
        p: &AttentionParams,
        heads: usize,
    ) -> Result<Var> {
        let [batch, steps, dim] = *self.shape(x) else {
            return Err(dim_err!(
                "attention input must be [B, T, D], got {:?}",
                self.shape(x)
            ));
        };
        let [qb, q_steps, qd] = *self.shape(query) else {
            return Err(dim_err!(
                "attention query must be [B, T, D], got {:?}",
                self.shape(query)
            ));
        };
        if (qb, qd) != (batch, dim) {
            return Err(dim_err!(
                "query {:?} does not match input {:?}",
                self.shape(query),
                self.shape(x)
            ));
        }
        if heads == 0 || dim % heads != 0 {
            return Err(param_err!(
                "model width {dim} is not divisible by {heads} heads"
            ));
        }
        let head_dim = dim / heads;
        let split_heads = |g: &mut Self, t: Var, parts: usize, len: usize| -> Result<Var> {
            let t = g.reshape(t, &[batch, len, parts, heads, head_dim])?;
            let t = g.permute(t, &[2, 0, 3, 1, 4])?;
            g.reshape(t, &[parts, batch * heads, len, head_dim])
        };
        let part = |g: &mut Self, t: Var, i: usize, len: usize| -> Result<Var> {
            let t = g.narrow(t, 0, i, 1)?;
            g.reshape(t, &[batch * heads, len, head_dim])
        };
        let (q, k, v) = if query == x {
            let qkv = self.linear_t(x, p.in_w, p.in_b)?;
            let qkv = split_heads(self, qkv, 3, steps)?;
            (
                part(self, qkv, 0, steps)?,
                part(self, qkv, 1, steps)?,
                part(self, qkv, 2, steps)?,
            )
        } else {
            let wq = self.narrow(p.in_w, 0, 0, dim)?;
            let bq = self.narrow(p.in_b, 0, 0, dim)?;
            let wkv = self.narrow(p.in_w, 0, dim, 2 * dim)?;
            let bkv = self.narrow(p.in_b, 0, dim, 2 * dim)?;
            let q = self.linear_t(query, wq, bq)?;
            let q = split_heads(self, q, 1, q_steps)?;
            let kv = self.linear_t(x, wkv, bkv)?;
            let kv = split_heads(self, kv, 2, steps)?;
            (
                part(self, q, 0, q_steps)?,
                part(self, kv, 0, steps)?,
                part(self, kv, 1, steps)?,
            )
        };
        let scores = self.matmul(q, k, true)?;
        let scores = self.scale(scores, 1.0 / libm::sqrt(head_dim as f64))?;
        let weights = self.softmax(scores)?;
        let ctx = self.matmul(weights, v, false)?;
        let ctx = self.reshape(ctx, &[batch, heads, q_steps, head_dim])?;
        let ctx = self.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = self.reshape(ctx, &[batch, q_steps, dim])?;
        self.linear_t(ctx, p.out_w, p.out_b)
    }
}

/// Fixed sinusoidal table `PE[t, 2i] = sin(t / 10000^(2i/D))`,
/// `PE[t, 2i+1] = cos(t / 10000^(2i/D))`.
pub fn positional_encoding<T: Scalar>(steps: usize, dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || dim % 2 != 0 || steps == 0 {
        return Err(param_err!(
            "positional encoding needs a positive even width and length, got T={steps}, D={dim}"
        ));
    }
    let mut data = Vec::with_capacity(steps * dim);
    for t in 0..steps {
        for i in 0..dim / 2 {
            let angle = t as f64 / libm::pow(10000.0, (2 * i) as f64 / dim as f64);
            data.push(T::from_f64_lossy(libm::sin(angle)));
            data.push(T::from_f64_lossy(libm::cos(angle)));
        }
    }
    Tensor::new(&[steps, dim], data)
}
