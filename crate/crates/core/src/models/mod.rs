//! The four forecasters. Each maps a normalized `[B, 60, 17, 2]` observation
//! to a `[B, 30, 17, 2]` forecast with one application of a linear head.

mod arch;
mod params;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;

pub use params::ParamStore;

use crate::autodiff::{Gradients, Graph, Mode, Var};
use crate::error::{dim_err, param_err, Error, Result};
use crate::rng::{self, Domain};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const T_IN: usize = 60;
pub const T_OUT: usize = 30;
pub const JOINTS: usize = 17;
pub const COORDS: usize = 2;
pub const FRAME_DIM: usize = JOINTS * COORDS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(
    feature = "serde",
    derive(serde::Serialize, serde::Deserialize),
    serde(rename_all = "kebab-case")
)]
pub enum ArchKind {
    Mlp,
    Lstm,
    CnnLstm,
    Transformer,
}

impl ArchKind {
    pub const ALL: [ArchKind; 4] = [
        ArchKind::Mlp,
        ArchKind::Lstm,
        ArchKind::CnnLstm,
        ArchKind::Transformer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ArchKind::Mlp => "mlp",
            ArchKind::Lstm => "lstm",
            ArchKind::CnnLstm => "cnn-lstm",
            ArchKind::Transformer => "transformer",
        }
    }

    /// Display label used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            ArchKind::Mlp => "MLP",
            ArchKind::Lstm => "LSTM",
            ArchKind::CnnLstm => "CNN-LSTM",
            ArchKind::Transformer => "Transformer",
        }
    }
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ArchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mlp" => Ok(ArchKind::Mlp),
            "lstm" => Ok(ArchKind::Lstm),
            "cnn-lstm" | "cnnlstm" | "cnn_lstm" => Ok(ArchKind::CnnLstm),
            "transformer" => Ok(ArchKind::Transformer),
            other => Err(param_err!(
                "unknown architecture {other:?} (expected mlp, lstm, cnn-lstm, transformer)"
            )),
        }
    }
}

/// Architecture constants. Only the fields of the model's kind are used.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(
    feature = "serde",
    derive(serde::Serialize, serde::Deserialize),
    serde(default, deny_unknown_fields)
)]
pub struct Hyper {
    pub t_in: usize,
    pub t_out: usize,
    pub joints: usize,
    pub coords: usize,
    pub mlp_hidden: Vec<usize>,
    pub mlp_dropout: f64,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub lstm_dropout: f64,
    pub conv_channels: Vec<usize>,
    pub conv_kernel: usize,
    pub conv_padding: usize,
    pub conv_dropout: f64,
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub ffn_dim: usize,
    pub encoder_dropout: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            t_in: T_IN,
            t_out: T_OUT,
            joints: JOINTS,
            coords: COORDS,
            mlp_hidden: vec![1024, 512, 256, 128],
            mlp_dropout: 0.3,
            lstm_hidden: 128,
            lstm_layers: 2,
            lstm_dropout: 0.2,
            conv_channels: vec![64, 128, 256],
            conv_kernel: 3,
            conv_padding: 1,
            conv_dropout: 0.2,
            d_model: 256,
            heads: 8,
            encoder_layers: 4,
            ffn_dim: 1024,
            encoder_dropout: 0.1,
        }
    }
}

impl Hyper {
    /// Same topology with tiny widths and horizons, for gradient checks.
    pub fn reduced() -> Self {
        Self {
            t_in: 6,
            t_out: 3,
            joints: 3,
            coords: 2,
            mlp_hidden: vec![8, 6, 5, 4],
            lstm_hidden: 4,
            conv_channels: vec![3, 4, 5],
            d_model: 8,
            heads: 2,
            encoder_layers: 2,
            ffn_dim: 12,
            ..Self::default()
        }
    }

    pub fn frame_dim(&self) -> usize {
        self.joints * self.coords
    }

    pub fn input_shape(&self, batch: usize) -> [usize; 4] {
        [batch, self.t_in, self.joints, self.coords]
    }

    pub fn output_shape(&self, batch: usize) -> [usize; 4] {
        [batch, self.t_out, self.joints, self.coords]
    }

    fn head_out(&self) -> usize {
        self.t_out * self.frame_dim()
    }

    fn validate(&self, kind: ArchKind) -> Result<()> {
        let positive = [self.t_in, self.t_out, self.joints, self.coords];
        if positive.contains(&0) {
            return Err(param_err!("window and frame extents must be positive"));
        }
        for p in [
            self.mlp_dropout,
            self.lstm_dropout,
            self.conv_dropout,
            self.encoder_dropout,
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(param_err!("dropout {p} outside [0, 1)"));
            }
        }
        match kind {
            ArchKind::Mlp if self.mlp_hidden.contains(&0) => {
                Err(param_err!("mlp hidden widths must be positive"))
            }
            ArchKind::Lstm | ArchKind::CnnLstm
                if self.lstm_hidden == 0 || self.lstm_layers == 0 =>
            {
                Err(param_err!(
                    "lstm needs a positive hidden size and layer count"
                ))
            }
            ArchKind::CnnLstm
                if self.conv_channels.is_empty()
                    || self.conv_kernel == 0
                    || self.conv_kernel > self.t_in + 2 * self.conv_padding =>
            {
                Err(param_err!("invalid conv stack"))
            }
            ArchKind::Transformer
                if self.heads == 0
                    || self.d_model % self.heads != 0
                    || self.d_model % 2 != 0
                    || self.encoder_layers == 0
                    || self.ffn_dim == 0 =>
            {
                Err(param_err!(
                    "transformer needs an even d_model divisible by the head count"
                ))
            }
            _ => Ok(()),
        }
    }
}

/// An architecture with its parameters, running statistics and accumulated
/// gradients.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar = f32> {
    kind: ArchKind,
    hyper: Hyper,
    params: ParamStore<T>,
    grads: Vec<Tensor<T>>,
    buffers: ParamStore<T>,
    mode: Mode,
}

#[derive(Clone, Copy)]
enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    Uniform {
        fan_in: usize,
    },
    Zeros,
    Ones,
}

struct Builder<T: Scalar> {
    seed: u64,
    params: ParamStore<T>,
    buffers: ParamStore<T>,
}

impl<T: Scalar> Builder<T> {
    fn param(&mut self, name: &str, shape: &[usize], init: Init) {
        let n: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::Uniform { fan_in } => {
                let bound = 1.0 / libm::sqrt(fan_in as f64);
                // One stream per tensor, addressed by its position.
                let mut rng = rng::stream(self.seed, Domain::Init, self.params.len() as u64);
                (0..n)
                    .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
                    .collect()
            }
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
        };
        self.params
            .insert(name, Tensor::from_parts(shape.to_vec(), data));
    }

    fn linear(&mut self, prefix: &str, input: usize, output: usize) {
        self.param(
            &format!("{prefix}.weight"),
            &[input, output],
            Init::Uniform { fan_in: input },
        );
        self.param(&format!("{prefix}.bias"), &[output], Init::Zeros);
    }

    fn batchnorm(&mut self, prefix: &str, channels: usize) {
        self.param(&format!("{prefix}.gamma"), &[channels], Init::Ones);
        self.param(&format!("{prefix}.beta"), &[channels], Init::Zeros);
        self.buffers.insert(
            &format!("{prefix}.running_mean"),
            Tensor::zeros(&[channels]),
        );
        self.buffers
            .insert(&format!("{prefix}.running_var"), Tensor::ones(&[channels]));
    }

    fn layer_norm(&mut self, prefix: &str, dim: usize) {
        self.param(&format!("{prefix}.gamma"), &[dim], Init::Ones);
        self.param(&format!("{prefix}.beta"), &[dim], Init::Zeros);
    }

    fn lstm(&mut self, prefix: &str, input: usize, hidden: usize, layers: usize) {
        for l in 0..layers {
            let inp = if l == 0 { input } else { hidden };
            let p = format!("{prefix}.l{l}");
            self.param(
                &format!("{p}.w_ih"),
                &[4 * hidden, inp],
                Init::Uniform { fan_in: inp },
            );
            self.param(
                &format!("{p}.w_hh"),
                &[4 * hidden, hidden],
                Init::Uniform { fan_in: hidden },
            );
            self.param(&format!("{p}.b_ih"), &[4 * hidden], Init::Zeros);
            self.param(&format!("{p}.b_hh"), &[4 * hidden], Init::Zeros);
        }
    }
}

/// Build `kind` with the published architecture constants.
pub fn build_model(kind: ArchKind, seed: u64) -> Result<Model<f32>> {
    build_model_with(kind, Hyper::default(), seed)
}

pub fn build_model_with<T: Scalar>(kind: ArchKind, hyper: Hyper, seed: u64) -> Result<Model<T>> {
    hyper.validate(kind)?;
    let mut b = Builder {
        seed,
        params: ParamStore::new(),
        buffers: ParamStore::new(),
    };
    let frame = hyper.frame_dim();
    let head_in = match kind {
        ArchKind::Mlp => {
            let mut width = hyper.t_in * frame;
            for (i, &h) in hyper.mlp_hidden.iter().enumerate() {
                b.linear(&format!("fc{i}"), width, h);
                b.batchnorm(&format!("bn{i}"), h);
                width = h;
            }
            width
        }
        ArchKind::Lstm => {
            b.lstm("lstm", frame, hyper.lstm_hidden, hyper.lstm_layers);
            hyper.lstm_hidden
        }
        ArchKind::CnnLstm => {
            let mut cin = frame;
            for (i, &cout) in hyper.conv_channels.iter().enumerate() {
                let k = hyper.conv_kernel;
                b.param(
                    &format!("conv{i}.weight"),
                    &[cout, cin, k],
                    Init::Uniform { fan_in: cin * k },
                );
                b.param(&format!("conv{i}.bias"), &[cout], Init::Zeros);
                b.batchnorm(&format!("bn{i}"), cout);
                cin = cout;
            }
            b.lstm("lstm", cin, hyper.lstm_hidden, hyper.lstm_layers);
            hyper.lstm_hidden
        }
        ArchKind::Transformer => {
            let d = hyper.d_model;
            b.linear("input", frame, d);
            for l in 0..hyper.encoder_layers {
                let p = format!("enc{l}");
                b.param(
                    &format!("{p}.attn.in_proj_weight"),
                    &[3 * d, d],
                    Init::Uniform { fan_in: d },
                );
                b.param(&format!("{p}.attn.in_proj_bias"), &[3 * d], Init::Zeros);
                b.param(
                    &format!("{p}.attn.out_proj_weight"),
                    &[d, d],
                    Init::Uniform { fan_in: d },
                );
                b.param(&format!("{p}.attn.out_proj_bias"), &[d], Init::Zeros);
                b.linear(&format!("{p}.ffn1"), d, hyper.ffn_dim);
                b.linear(&format!("{p}.ffn2"), hyper.ffn_dim, d);
                b.layer_norm(&format!("{p}.norm1"), d);
                b.layer_norm(&format!("{p}.norm2"), d);
            }
            d
        }
    };
    b.linear("head", head_in, hyper.head_out());
    Ok(Model::from_parts(kind, hyper, b.params, b.buffers))
}

/// Closed-form parameter count of `kind` under `hyper`.
pub fn expected_param_count(kind: ArchKind, hyper: &Hyper) -> usize {
    let linear = |i: usize, o: usize| i * o + o;
    let lstm = |input: usize, h: usize, layers: usize| {
        (0..layers)
            .map(|l| {
                let i = if l == 0 { input } else { h };
                4 * h * (i + h) + 8 * h
            })
            .sum::<usize>()
    };
    let frame = hyper.frame_dim();
    let head_in = match kind {
        ArchKind::Mlp => hyper
            .mlp_hidden
            .last()
            .copied()
            .unwrap_or(hyper.t_in * frame),
        ArchKind::Lstm | ArchKind::CnnLstm => hyper.lstm_hidden,
        ArchKind::Transformer => hyper.d_model,
    };
    let body = match kind {
        ArchKind::Mlp => {
            let mut width = hyper.t_in * frame;
            let mut total = 0;
            for &h in &hyper.mlp_hidden {
                total += linear(width, h) + 2 * h;
                width = h;
            }
            total
        }
        ArchKind::Lstm => lstm(frame, hyper.lstm_hidden, hyper.lstm_layers),
        ArchKind::CnnLstm => {
            let mut cin = frame;
            let mut total = 0;
            for &cout in &hyper.conv_channels {
                total += cin * cout * hyper.conv_kernel + cout + 2 * cout;
                cin = cout;
            }
            total + lstm(cin, hyper.lstm_hidden, hyper.lstm_layers)
        }
        ArchKind::Transformer => {
            let d = hyper.d_model;
            let attention = 4 * d * d + 4 * d;
            let ffn = linear(d, hyper.ffn_dim) + linear(hyper.ffn_dim, d);
            linear(frame, d) + hyper.encoder_layers * (attention + ffn + 4 * d)
        }
    };
    body + linear(head_in, hyper.head_out())
}

impl<T: Scalar> Model<T> {
    fn from_parts(
        kind: ArchKind,
        hyper: Hyper,
        params: ParamStore<T>,
        buffers: ParamStore<T>,
    ) -> Self {
        let grads = params.tensors().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            kind,
            hyper,
            params,
            grads,
            buffers,
            mode: Mode::Eval,
        }
    }

    /// Reassemble a model from stored tensors; names and shapes must match a
    /// freshly built model of the same kind and hyperparameters.
    pub fn from_stores(
        kind: ArchKind,
        hyper: Hyper,
        params: ParamStore<T>,
        buffers: ParamStore<T>,
    ) -> Result<Self> {
        let template = build_model_with::<T>(kind, hyper.clone(), 0)?;
        for (what, have, want) in [
            ("parameter", &params, &template.params),
            ("buffer", &buffers, &template.buffers),
        ] {
            let names_match = have.len() == want.len()
                && have
                    .iter()
                    .zip(want.iter())
                    .all(|((n1, t1), (n2, t2))| n1 == n2 && t1.shape() == t2.shape());
            if !names_match {
                return Err(dim_err!("{what} layout does not match a {kind} model"));
            }
        }
        Ok(Self::from_parts(kind, hyper, params, buffers))
    }

    pub fn kind(&self) -> ArchKind {
        self.kind
    }

    pub fn hyper(&self) -> &Hyper {
        &self.hyper
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn buffers(&self) -> &ParamStore<T> {
        &self.buffers
    }

    /// Accumulated gradients, parallel to [`Model::params`].
    pub fn grads(&self) -> &[Tensor<T>] {
        &self.grads
    }

    pub(crate) fn params_and_grads_mut(&mut self) -> (&mut ParamStore<T>, &mut [Tensor<T>]) {
        (&mut self.params, &mut self.grads)
    }

    /// Number of learnable scalars (running statistics excluded).
    pub fn count_params(&self) -> usize {
        self.params.numel()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            kind: self.kind,
            hyper: self.hyper.clone(),
            params: self.params.cast(),
            grads: self.grads.iter().map(Tensor::cast).collect(),
            buffers: self.buffers.cast(),
            mode: self.mode,
        }
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(T::zero());
        }
    }

    /// Add the gradients of `vars` (as returned by [`Model::forward_graph`]) into
    /// the accumulated buffers.
    pub fn accumulate_grads(&mut self, grads: &Gradients<T>, vars: &[Var]) -> Result<()> {
        if vars.len() != self.grads.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter handles, got {}",
                self.grads.len(),
                vars.len()
            )));
        }
        for (acc, &v) in self.grads.iter_mut().zip(vars) {
            if let Some(g) = grads.get(v) {
                for (a, &b) in acc.data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
        Ok(())
    }

    /// Record the forward pass on `g`. Parameters become leaves (tracked when
    /// `track_grads`); their handles are returned in store order.
    pub fn forward_graph(
        &mut self,
        g: &mut Graph<T>,
        x: Var,
        track_grads: bool,
    ) -> Result<(Var, Vec<Var>)> {
        let vars: Vec<Var> = self
            .params
            .tensors()
            .map(|t| g.leaf(t.clone(), track_grads))
            .collect();
        let out = self.forward_with(g, &vars, x)?;
        Ok((out, vars))
    }

    /// Forward pass with caller-supplied parameter handles (in store order).
    pub fn forward_with(&mut self, g: &mut Graph<T>, params: &[Var], x: Var) -> Result<Var> {
        let batch = g.shape(x).first().copied().unwrap_or(0);
        if g.shape(x) != self.hyper.input_shape(batch) {
            return Err(dim_err!(
                "model input must be {:?}, got {:?}",
                self.hyper.input_shape(batch),
                g.shape(x)
            ));
        }
        if params.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter handles, got {}",
                self.params.len(),
                params.len()
            )));
        }
        let mut scope = arch::Scope {
            g,
            vars: params,
            params: &self.params,
            buffers: &mut self.buffers,
            hyper: &self.hyper,
        };
        let head = match self.kind {
            ArchKind::Mlp => arch::mlp(&mut scope, x)?,
            ArchKind::Lstm => arch::lstm(&mut scope, x)?,
            ArchKind::CnnLstm => arch::cnn_lstm(&mut scope, x)?,
            ArchKind::Transformer => arch::transformer(&mut scope, x)?,
        };
        g.reshape(head, &self.hyper.output_shape(batch))
    }

    /// Untracked forward pass of `x: [B, t_in, joints, coords]` in the current mode.
    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new(self.mode);
        let xv = g.constant(x.clone());
        let (out, _) = self.forward_graph(&mut g, xv, false)?;
        let y = g.value(out).clone();
        y.ensure_finite("model output")?;
        Ok(y)
    }

    /// Parameter names in store order.
    pub fn param_names(&self) -> Vec<String> {
        self.params.names().map(String::from).collect()
    }
}
