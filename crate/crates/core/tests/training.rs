use kpfc_core::dataset::{DenormParams, Frame, Window};
use kpfc_core::models::{build_model_with, ArchKind, Hyper, Model};
use kpfc_core::rng::{self, Domain};
use kpfc_core::training::*;
use kpfc_core::{Error, Mode, Tensor};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;

fn plain(lr: f64) -> TrainConfig {
    TrainConfig {
        lr,
        weight_decay: 0.0,
        ..TrainConfig::for_arch(ArchKind::Lstm)
    }
}

fn scalar(v: f64) -> Tensor<f64> {
    Tensor::from_f64(&[1], &[v]).unwrap()
}

#[test]
fn default_learning_rates() {
    assert_eq!(TrainConfig::for_arch(ArchKind::Mlp).lr, 2e-3);
    assert_eq!(TrainConfig::for_arch(ArchKind::Lstm).lr, 1e-3);
    assert_eq!(TrainConfig::for_arch(ArchKind::CnnLstm).lr, 1e-3);
    let t = TrainConfig::for_arch(ArchKind::Transformer);
    assert_eq!(
        (t.lr, t.epochs, t.batch_size, t.weight_decay),
        (5e-4, 200, 32, 1e-4)
    );
    assert!(TrainConfig {
        batch_size: 0,
        ..t.clone()
    }
    .validate()
    .is_err());
    assert!(TrainConfig {
        beta2: 1.0,
        ..t.clone()
    }
    .validate()
    .is_err());
    assert!(TrainConfig { lr: f64::NAN, ..t }.validate().is_err());
}

#[test]
fn first_step_moves_by_lr_against_the_gradient() {
    for g in [3.0, -0.02, 1e-3] {
        let mut w = vec![scalar(1.0)];
        let mut state = AdamState::new(&w);
        adam_step(&mut w, &[scalar(g)], &mut state, &plain(0.01)).unwrap();
        let delta = w[0].data()[0] - 1.0;
        assert_eq!(delta.signum(), -g.signum());
        assert!(
            delta.abs() <= 0.01 && delta.abs() >= 0.01 * (1.0 - 1e-4),
            "{delta}"
        );
        assert_eq!(state.t, 1);
    }
}

#[test]
fn zero_gradient_leaves_parameters() {
    let mut w = vec![Tensor::<f32>::full(&[3], 0.7)];
    let mut state = AdamState::new(&w);
    for _ in 0..5 {
        adam_step(&mut w, &[Tensor::zeros(&[3])], &mut state, &plain(0.1)).unwrap();
    }
    assert!(w[0].data().iter().all(|&v| v == 0.7));
}

#[test]
fn mismatched_gradients_break_the_contract() {
    let mut w = vec![scalar(1.0), scalar(2.0)];
    let mut state = AdamState::new(&w);
    let cfg = plain(0.1);
    assert!(matches!(
        adam_step(&mut w, &[scalar(1.0)], &mut state, &cfg),
        Err(Error::Contract(_))
    ));
    let wrong = Tensor::zeros(&[2]);
    assert!(matches!(
        adam_step(&mut w, &[scalar(1.0), wrong], &mut state, &cfg),
        Err(Error::Contract(_))
    ));
    assert_eq!(state.t, 0);
}

/// Reference Adam on one scalar with coupled weight decay.
fn scalar_adam(w0: f64, steps: usize, cfg: &TrainConfig, grad: impl Fn(f64) -> f64) -> f64 {
    let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
    for t in 1..=steps {
        let g = grad(w) + cfg.weight_decay * w;
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
        let m_hat = m / (1.0 - cfg.beta1.powi(t as i32));
        let v_hat = v / (1.0 - cfg.beta2.powi(t as i32));
        w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    w
}

#[test]
fn quadratic_converges_like_the_scalar_recurrence() {
    for cfg in [
        plain(0.1),
        TrainConfig {
            lr: 0.1,
            ..TrainConfig::for_arch(ArchKind::Mlp)
        },
    ] {
        let mut w = vec![scalar(0.0)];
        let mut state = AdamState::new(&w);
        for _ in 0..200 {
            let g = scalar(w[0].data()[0] - 5.0);
            adam_step(&mut w, &[g], &mut state, &cfg).unwrap();
        }
        let got = w[0].data()[0];
        let want = scalar_adam(0.0, 200, &cfg, |w| w - 5.0);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        assert!((got - 5.0).abs() < 0.5, "{got}");
    }
}

proptest! {
    #[test]
    fn zero_learning_rate_is_identity(values in proptest::collection::vec(-10.0f32..10.0, 1..20), seed in any::<u64>()) {
        let n = values.len();
        let mut w = vec![Tensor::new(&[n], values.clone()).unwrap()];
        let mut rng = rng::stream(seed, Domain::Test, 0);
        let g = Tensor::new(&[n], (0..n).map(|_| rng.random_range(-5.0f32..5.0)).collect()).unwrap();
        let mut state = AdamState::new(&w);
        let cfg = TrainConfig { lr: 0.0, ..TrainConfig::for_arch(ArchKind::Mlp) };
        for _ in 0..3 {
            adam_step(&mut w, std::slice::from_ref(&g), &mut state, &cfg).unwrap();
        }
        prop_assert_eq!(w[0].data(), &values[..]);
    }
}

fn frames(values: &[f32], len: usize) -> Vec<Frame> {
    assert_eq!(values.len(), len * 34);
    values
        .chunks_exact(34)
        .map(|c| core::array::from_fn(|j| [c[2 * j], c[2 * j + 1]]))
        .collect()
}

fn window(input: &[f32], target: &[f32], t_in: usize, t_out: usize, start: usize) -> Window {
    Window {
        input: frames(input, t_in),
        target: frames(target, t_out),
        denorm: DenormParams {
            centroids: vec![[0.0, 0.0]; t_in + t_out],
            scales: vec![1.0; t_in + t_out],
        },
        clip_id: "toy".into(),
        start,
    }
}

fn small_hyper() -> Hyper {
    Hyper {
        mlp_hidden: vec![16],
        lstm_hidden: 8,
        conv_channels: vec![4],
        d_model: 8,
        heads: 2,
        encoder_layers: 1,
        ffn_dim: 16,
        ..Hyper::default()
    }
}

fn random_windows(n: usize, seed: u64) -> Vec<Window> {
    let mut rng = rng::stream(seed, Domain::Test, 0);
    (0..n)
        .map(|i| {
            let x: Vec<f32> = (0..60 * 34).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f32> = (0..30 * 34).map(|_| rng.random_range(-1.0..1.0)).collect();
            window(&x, &y, 60, 30, i)
        })
        .collect()
}

struct Recorder(Vec<(usize, bool, u64)>);

impl EpochHook for Recorder {
    fn epoch_end(
        &mut self,
        _: &Model<f32>,
        state: &AdamState<f32>,
        r: &EpochRecord,
        checkpoint: bool,
    ) -> Result<(), Error> {
        self.0.push((r.epoch, checkpoint, state.t));
        Ok(())
    }
}

struct StepClock(std::cell::Cell<f64>);

impl Clock for StepClock {
    fn now(&self) -> f64 {
        let t = self.0.get();
        self.0.set(t + 1.5);
        t
    }
}

#[test]
fn one_epoch_of_64_windows_takes_two_steps() {
    let data = random_windows(64, 0);
    let mut model = build_model_with::<f32>(ArchKind::Lstm, small_hyper(), 0).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        checkpoint_every: 2,
        ..TrainConfig::for_arch(ArchKind::Lstm)
    };
    let mut state = AdamState::for_model(&model);
    let mut hook = Recorder(Vec::new());
    let clock = StepClock(std::cell::Cell::new(0.0));
    let h = train_with(
        &mut model,
        &data,
        &data[..10],
        &cfg,
        &mut state,
        &clock,
        &mut hook,
    )
    .unwrap();
    assert_eq!(hook.0, [(1, false, 2), (2, true, 4), (3, false, 6)]);
    assert_eq!(h.len(), 3);
    assert!(h
        .epochs
        .iter()
        .all(|e| e.seconds == 1.5 && e.eval_rmse_x100.is_some()));
    assert_eq!(model.mode(), Mode::Eval);

    let mut model = build_model_with::<f32>(ArchKind::Lstm, small_hyper(), 0).unwrap();
    let h = train(
        &mut model,
        &data[..33],
        &[],
        &TrainConfig { epochs: 1, ..cfg },
    )
    .unwrap();
    assert_eq!(h.epochs[0].steps, 2);
    assert_eq!(h.epochs[0].eval_rmse_x100, None);
}

#[test]
fn training_is_bitwise_deterministic() {
    let data = random_windows(40, 1);
    for kind in ArchKind::ALL {
        let run = |seed| {
            let mut m = build_model_with::<f32>(kind, small_hyper(), 3).unwrap();
            let cfg = TrainConfig {
                epochs: 2,
                batch_size: 16,
                seed,
                ..TrainConfig::for_arch(kind)
            };
            train(&mut m, &data, &[], &cfg).unwrap();
            m
        };
        let (a, b, c) = (run(5), run(5), run(6));
        assert!(
            a.params()
                .tensors()
                .zip(b.params().tensors())
                .all(|(x, y)| x.bitwise_eq(y)),
            "{kind}"
        );
        assert!(a.params() != c.params(), "{kind}");
    }
}

#[test]
fn non_finite_loss_reports_divergence() {
    let mut data = random_windows(8, 2);
    data[5].input[3][4][1] = f32::NAN;
    let mut m = build_model_with::<f32>(ArchKind::Lstm, small_hyper(), 0).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        ..TrainConfig::for_arch(ArchKind::Lstm)
    };
    let err = train(&mut m, &data, &[], &cfg).unwrap_err();
    assert!(
        matches!(
            err,
            Error::Diverged {
                epoch: 1,
                step: 0,
                ..
            }
        ),
        "{err:?}"
    );
    assert!(train(&mut m, &[], &[], &cfg).is_err());
}

#[test]
fn zero_pretraining_equals_scratch() {
    let synth = random_windows(20, 3);
    let (real, eval) = (random_windows(24, 4), random_windows(6, 5));
    let fine = TrainConfig {
        epochs: 2,
        batch_size: 8,
        seed: 9,
        ..TrainConfig::for_arch(ArchKind::Lstm)
    };
    let pre = TrainConfig {
        epochs: 0,
        ..fine.clone()
    };
    let run = pretrain_finetune(ArchKind::Lstm, &synth, &real, &eval, &pre, &fine).unwrap();
    assert_eq!((run.pretrain.len(), run.finetune.len()), (0, 2));
    let mut scratch = kpfc_core::models::build_model(ArchKind::Lstm, 9).unwrap();
    let h = train(&mut scratch, &real, &eval, &fine).unwrap();
    assert_eq!(
        h.epochs.iter().map(|e| e.train_loss).collect::<Vec<_>>(),
        run.finetune
            .epochs
            .iter()
            .map(|e| e.train_loss)
            .collect::<Vec<_>>()
    );
    assert!(scratch
        .params()
        .tensors()
        .zip(run.model.params().tensors())
        .all(|(x, y)| x.bitwise_eq(y)));

    let pre = TrainConfig {
        epochs: 1,
        ..fine.clone()
    };
    let run = pretrain_finetune(ArchKind::Lstm, &synth, &real, &eval, &pre, &fine).unwrap();
    assert_eq!((run.pretrain.len(), run.finetune.len()), (1, 2));
}

/// Linear targets with small noise, fit by a hidden-free MLP (a single
/// affine map) and by the normal equations.
#[test]
fn linear_toy_problem_matches_least_squares() {
    let (t_in, t_out, n) = (2, 1, 512);
    let (fin, fout) = (t_in * 34, t_out * 34);
    let mut rng = rng::stream(6, Domain::Test, 0);
    let a = DMatrix::<f64>::from_fn(fout, fin, |_, _| {
        rng.random_range(-1.0..1.0) / (fin as f64).sqrt()
    });
    let xs = DMatrix::<f64>::from_fn(n, fin, |_, _| rng.random_range(-1.0..1.0));
    let noise = DMatrix::<f64>::from_fn(n, fout, |_, _| rng.random_range(-0.015..0.015));
    let ys = &xs * a.transpose() + noise;
    let windows: Vec<Window> = (0..n)
        .map(|i| {
            let x: Vec<f32> = xs.row(i).iter().map(|&v| v as f32).collect();
            let y: Vec<f32> = ys.row(i).iter().map(|&v| v as f32).collect();
            window(&x, &y, t_in, t_out, i)
        })
        .collect();

    let mut design = DMatrix::<f64>::from_element(n, fin + 1, 1.0);
    design.view_mut((0, 0), (n, fin)).copy_from(&xs);
    let gram = design.transpose() * &design;
    let coef = gram.cholesky().unwrap().solve(&(design.transpose() * &ys));
    let resid = &design * coef - &ys;
    let ls_mse = resid.norm_squared() / (n * fout) as f64;

    let hyper = Hyper {
        t_in,
        t_out,
        mlp_hidden: vec![],
        ..Hyper::default()
    };
    let mut model = build_model_with::<f32>(ArchKind::Mlp, hyper, 0).unwrap();
    let cfg = TrainConfig {
        lr: 3e-3,
        epochs: 150,
        weight_decay: 0.0,
        ..TrainConfig::for_arch(ArchKind::Mlp)
    };
    train(&mut model, &windows, &[], &cfg).unwrap();
    let rmse = evaluate_rmse(&mut model, &windows, 64).unwrap();
    let mse = (rmse / 100.0).powi(2);
    assert!(mse < 1e-3, "train mse {mse}");
    assert!(
        mse <= 10.0 * ls_mse && mse >= ls_mse * (1.0 - 1e-3),
        "train mse {mse} vs least squares {ls_mse}"
    );
}

#[test]
fn predictions_cover_every_window() {
    let data = random_windows(7, 7);
    let mut m = build_model_with::<f32>(ArchKind::Mlp, small_hyper(), 0).unwrap();
    m.set_mode(Mode::Train);
    let p = predict(&mut m, &data, 3).unwrap();
    assert_eq!(p.shape(), [7, 30, 17, 2]);
    assert_eq!(m.mode(), Mode::Train);
    let refs: Vec<&Window> = data[..3].iter().collect();
    let (x, _) = kpfc_core::dataset::batch_tensors::<f32>(&refs).unwrap();
    m.set_mode(Mode::Eval);
    let first = m.forward(&x).unwrap();
    assert_eq!(first.data(), &p.data()[..first.len()]);
}
