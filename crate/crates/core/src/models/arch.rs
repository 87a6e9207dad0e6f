use alloc::format;

use super::{Hyper, ParamStore};
use crate::autodiff::{positional_encoding, AttentionParams, Graph, LstmParams, Var};
use crate::error::Result;
use crate::scalar::Scalar;

pub(super) struct Scope<'a, T: Scalar> {
    pub g: &'a mut Graph<T>,
    pub vars: &'a [Var],
    pub params: &'a ParamStore<T>,
    pub buffers: &'a mut ParamStore<T>,
    pub hyper: &'a Hyper,
}

impl<T: Scalar> Scope<'_, T> {
    fn var(&self, name: &str) -> Var {
        let i = self
            .params
            .position(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        self.vars[i]
    }

    fn linear(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let (w, b) = (
            self.var(&format!("{prefix}.weight")),
            self.var(&format!("{prefix}.bias")),
        );
        self.g.linear(x, w, b)
    }

    fn batchnorm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.var(&format!("{prefix}.gamma"));
        let beta = self.var(&format!("{prefix}.beta"));
        let mean_key = format!("{prefix}.running_mean");
        let var_key = format!("{prefix}.running_var");
        let mut mean = self.buffers.get(&mean_key).expect("running mean").clone();
        let mut var = self.buffers.get(&var_key).expect("running var").clone();
        let y = self.g.batchnorm1d(x, gamma, beta, &mut mean, &mut var)?;
        *self.buffers.get_mut(&mean_key).unwrap() = mean;
        *self.buffers.get_mut(&var_key).unwrap() = var;
        Ok(y)
    }

    fn layer_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.var(&format!("{prefix}.gamma"));
        let beta = self.var(&format!("{prefix}.beta"));
        self.g.layer_norm(x, gamma, beta)
    }

    /// Stacked LSTM over `[B, T, I]`; returns the top layer's final hidden state.
    fn lstm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let layers = self.hyper.lstm_layers;
        let mut seq = x;
        let mut last = x;
        for l in 0..layers {
            let p = format!("{prefix}.l{l}");
            let params = LstmParams {
                w_ih: self.var(&format!("{p}.w_ih")),
                w_hh: self.var(&format!("{p}.w_hh")),
                b_ih: self.var(&format!("{p}.b_ih")),
                b_hh: self.var(&format!("{p}.b_hh")),
            };
            let top = l + 1 == layers;
            let out = self.g.lstm_layer(seq, &params, None, None, !top)?;
            last = out.h;
            if !top {
                seq = self
                    .g
                    .dropout(out.outputs.expect("kept outputs"), self.hyper.lstm_dropout)?;
            }
        }
        Ok(last)
    }
}

pub(super) fn mlp<T: Scalar>(s: &mut Scope<'_, T>, x: Var) -> Result<Var> {
    let batch = s.g.shape(x)[0];
    let mut h =
        s.g.reshape(x, &[batch, s.hyper.t_in * s.hyper.frame_dim()])?;
    for i in 0..s.hyper.mlp_hidden.len() {
        h = s.linear(&format!("fc{i}"), h)?;
        h = s.g.relu(h)?;
        h = s.g.dropout(h, s.hyper.mlp_dropout)?;
        h = s.batchnorm(&format!("bn{i}"), h)?;
    }
    s.linear("head", h)
}

pub(super) fn lstm<T: Scalar>(s: &mut Scope<'_, T>, x: Var) -> Result<Var> {
    let [batch, steps, ..] = *s.g.shape(x) else {
        unreachable!()
    };
    let seq = s.g.reshape(x, &[batch, steps, s.hyper.frame_dim()])?;
    let h = s.lstm("lstm", seq)?;
    s.linear("head", h)
}

pub(super) fn cnn_lstm<T: Scalar>(s: &mut Scope<'_, T>, x: Var) -> Result<Var> {
    let [batch, steps, ..] = *s.g.shape(x) else {
        unreachable!()
    };
    let seq = s.g.reshape(x, &[batch, steps, s.hyper.frame_dim()])?;
    let mut h = s.g.permute(seq, &[0, 2, 1])?;
    for i in 0..s.hyper.conv_channels.len() {
        let w = s.var(&format!("conv{i}.weight"));
        let b = s.var(&format!("conv{i}.bias"));
        h = s.g.conv1d(h, w, b, s.hyper.conv_padding)?;
        h = s.g.relu(h)?;
        h = s.batchnorm(&format!("bn{i}"), h)?;
        h = s.g.dropout(h, s.hyper.conv_dropout)?;
    }
    let seq = s.g.permute(h, &[0, 2, 1])?;
    let h = s.lstm("lstm", seq)?;
    s.linear("head", h)
}

pub(super) fn transformer<T: Scalar>(s: &mut Scope<'_, T>, x: Var) -> Result<Var> {
    let [batch, steps, ..] = *s.g.shape(x) else {
        unreachable!()
    };
    let d = s.hyper.d_model;
    let seq = s.g.reshape(x, &[batch, steps, s.hyper.frame_dim()])?;
    let mut h = s.linear("input", seq)?;
    let pe = s.g.constant(positional_encoding(steps, d)?);
    h = s.g.add_suffix(h, pe)?;
    let layers = s.hyper.encoder_layers;
    for l in 0..layers {
        let p = format!("enc{l}");
        let attn = AttentionParams {
            in_w: s.var(&format!("{p}.attn.in_proj_weight")),
            in_b: s.var(&format!("{p}.attn.in_proj_bias")),
            out_w: s.var(&format!("{p}.attn.out_proj_weight")),
            out_b: s.var(&format!("{p}.attn.out_proj_bias")),
        };
        // Only the last timestep reaches the head, so the final layer
        // computes its outputs for that row alone.
        let query = if l + 1 == layers {
            s.g.narrow(h, 1, steps - 1, 1)?
        } else {
            h
        };
        let a = s.g.multihead_attention(query, h, &attn, s.hyper.heads)?;
        let a = s.g.dropout(a, s.hyper.encoder_dropout)?;
        let r = s.g.add(query, a)?;
        h = s.layer_norm(&format!("{p}.norm1"), r)?;
        let f = s.linear(&format!("{p}.ffn1"), h)?;
        let f = s.g.relu(f)?;
        let f = s.linear(&format!("{p}.ffn2"), f)?;
        let f = s.g.dropout(f, s.hyper.encoder_dropout)?;
        let r = s.g.add(h, f)?;
        h = s.layer_norm(&format!("{p}.norm2"), r)?;
    }
    let last = s.g.reshape(h, &[batch, d])?;
    s.linear("head", last)
}
