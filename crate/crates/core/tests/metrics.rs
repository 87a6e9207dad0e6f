use kpfc_core::dataset::{batch_tensors, make_windows, windows_for_clips, MotionClip, Window};
use kpfc_core::metrics::*;
use kpfc_core::rng::{self, Domain};
use kpfc_core::synthgen::{generate_set, Flavor, SetSpec};
use kpfc_core::{Error, Tensor};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn stats(mean: Vec<f64>, cov: DMatrix<f64>) -> GaussianStats {
    GaussianStats {
        mean: DVector::from_vec(mean),
        cov,
    }
}

fn random_psd(f: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = rng::stream(seed, Domain::Test, 0);
    let m = DMatrix::from_fn(f, f, |_, _| rng.random_range(-1.0..1.0));
    m.transpose() * m
}

fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

#[test]
fn rmse_examples() {
    let t = Tensor::<f32>::from_f64(&[2, 3], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
    assert_eq!(rmse_x100(&t, &t).unwrap(), 0.0);
    let z = Tensor::<f64>::zeros(&[4, 30, 17, 2]);
    let shifted = Tensor::full(&[4, 30, 17, 2], 0.05);
    assert!((rmse_x100(&shifted, &z).unwrap() - 5.0).abs() < 1e-12);
    let other = Tensor::<f32>::zeros(&[3, 2]);
    assert!(matches!(rmse_x100(&t, &other), Err(Error::Dimension(_))));
}

#[test]
fn rmse_ignores_sample_order() {
    let mut rng = rng::stream(0, Domain::Test, 0);
    let mut values = |n| {
        (0..n)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect::<Vec<f64>>()
    };
    let (p, t) = (values(5 * 6), values(5 * 6));
    let a = rmse_x100(
        &Tensor::from_f64(&[5, 6], &p).unwrap(),
        &Tensor::<f64>::from_f64(&[5, 6], &t).unwrap(),
    )
    .unwrap();
    let order = [3, 0, 4, 1, 2];
    let perm = |v: &[f64]| {
        order
            .iter()
            .flat_map(|&i| v[i * 6..(i + 1) * 6].to_vec())
            .collect::<Vec<_>>()
    };
    let b = rmse_x100(
        &Tensor::from_f64(&[5, 6], &perm(&p)).unwrap(),
        &Tensor::<f64>::from_f64(&[5, 6], &perm(&t)).unwrap(),
    )
    .unwrap();
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn gaussian_stats_examples() {
    let s = gaussian_stats(&[0.0, 2.0], 2, 1).unwrap();
    assert_eq!(s.mean[0], 1.0);
    assert_eq!(s.cov[(0, 0)], 2.0);
    let s = gaussian_stats(&[1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 1.0, 2.0, 3.0], 3, 3).unwrap();
    assert!(s.cov.iter().all(|&v| v == 0.0));
    assert!(matches!(
        gaussian_stats(&[1.0, 2.0], 1, 2),
        Err(Error::InsufficientSamples { needed: 2, got: 1 })
    ));
    assert!(gaussian_stats(&[1.0, 2.0, 3.0], 2, 2).is_err());
}

#[test]
fn gaussian_stats_match_a_direct_sum() {
    let (n, f) = (37, 5);
    let mut rng = rng::stream(4, Domain::Test, 0);
    let x: Vec<f64> = (0..n * f).map(|_| rng.random_range(-3.0..3.0)).collect();
    let s = gaussian_stats(&x, n, f).unwrap();
    for i in 0..f {
        let mi = (0..n).map(|r| x[r * f + i]).sum::<f64>() / n as f64;
        assert!((s.mean[i] - mi).abs() < 1e-12);
        for j in 0..f {
            let mj = (0..n).map(|r| x[r * f + j]).sum::<f64>() / n as f64;
            let c = (0..n)
                .map(|r| (x[r * f + i] - mi) * (x[r * f + j] - mj))
                .sum::<f64>()
                / (n - 1) as f64;
            assert!((s.cov[(i, j)] - c).abs() < 1e-12);
        }
    }
}

/// 5-sigma Monte-Carlo bounds for N = 1e5 standard-normal draws in 3 dims.
#[test]
fn gaussian_stats_of_standard_normal_draws() {
    let (n, f) = (100_000, 3);
    let mut rng = rng::stream(5, Domain::Test, 0);
    let x: Vec<f64> = (0..n * f).map(|_| rng.sample(StandardNormal)).collect();
    let s = gaussian_stats(&x, n, f).unwrap();
    assert!(s.mean.iter().all(|m| m.abs() < 0.02));
    let err = &s.cov - DMatrix::identity(f, f);
    assert!(err.amax() < 0.03, "{err}");
}

#[test]
fn sqrtm_examples() {
    let i = DMatrix::<f64>::identity(4, 4);
    assert!(rel_frobenius(&sqrtm_psd(&i).unwrap(), &i) < 1e-12);
    let d = sqrtm_psd(&DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]))).unwrap();
    assert!(
        rel_frobenius(
            &d,
            &DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]))
        ) < 1e-12
    );
    let a = random_psd(8, 1);
    let r = sqrtm_psd(&a).unwrap();
    assert!(rel_frobenius(&(&r * &r), &a) < 1e-8);
}

#[test]
fn sqrtm_rejects_asymmetry() {
    let mut a = DMatrix::<f64>::identity(3, 3);
    a[(0, 1)] = 1e-6;
    assert!(matches!(sqrtm_psd(&a), Err(Error::Contract(_))));
    a[(0, 1)] = 1e-12;
    assert!(sqrtm_psd(&a).is_ok());
}

#[test]
fn sqrtm_reconstructs_up_to_64_dims() {
    for (f, seed) in [(2, 0), (16, 1), (33, 2), (64, 3)] {
        let a = random_psd(f, seed) + DMatrix::identity(f, f) * 1e-3;
        let r = sqrtm_psd(&a).unwrap();
        assert!(rel_frobenius(&(&r * &r), &a) < 1e-8, "F = {f}");
    }
}

#[test]
fn frechet_analytic_cases() {
    let f = 6;
    let a = stats(vec![0.3; f], random_psd(f, 7));
    assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-9);

    let d = [0.5, -1.0, 2.0, 0.0, 0.25, 3.0];
    let i = DMatrix::identity(f, f);
    let fd = frechet_distance(
        &stats(vec![0.0; f], i.clone()),
        &stats(d.to_vec(), i.clone()),
    )
    .unwrap();
    let norm2: f64 = d.iter().map(|v| v * v).sum();
    assert!((fd - norm2).abs() < 1e-9, "{fd} vs {norm2}");

    let fd = frechet_distance(
        &stats(vec![1.0; f], &i * 4.0),
        &stats(vec![1.0; f], &i * 9.0),
    )
    .unwrap();
    assert!((fd - f as f64).abs() < 1e-9, "{fd}");

    assert!(matches!(
        frechet_distance(&a, &stats(vec![0.0; 2], DMatrix::identity(2, 2))),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn frechet_is_symmetric() {
    let a = stats(vec![0.1, 0.2, 0.3, 0.4], random_psd(4, 8));
    let b = stats(vec![-0.1, 0.0, 0.5, 0.4], random_psd(4, 9));
    let (ab, ba) = (
        frechet_distance(&a, &b).unwrap(),
        frechet_distance(&b, &a).unwrap(),
    );
    assert!((ab - ba).abs() < 1e-9);
    assert!(ab > 0.0);
}

fn random_sequences(n: usize, seed: u64) -> Tensor<f64> {
    let mut rng = rng::stream(seed, Domain::Test, 0);
    let per = 30 * 17 * 2;
    Tensor::new(
        &[n, 30, 17, 2],
        (0..n * per).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

#[test]
fn motion_fid_self_and_shift() {
    let refs = random_sequences(40, 0);
    assert!(motion_fid(&refs, &refs).unwrap().abs() < 1e-6);
    let shifted = Tensor::new(refs.shape(), refs.data().iter().map(|v| v + 0.1).collect()).unwrap();
    let fd = motion_fid(&shifted, &refs).unwrap();
    assert!((fd - 10.2).abs() < 1e-3, "{fd}");
    assert!(matches!(
        motion_fid(&random_sequences(1, 0), &refs),
        Err(Error::InsufficientSamples { .. })
    ));
}

#[test]
fn motion_fid_between_halves_of_synthetic_windows() {
    let corpus = generate_set(
        &SetSpec {
            flavor: Flavor::Pretrain,
            clips: 4_000,
            length: 90,
            prefix: "h".into(),
        },
        11,
    )
    .unwrap();
    let clips: Vec<_> = corpus.into_iter().map(|c| c.clip).collect();
    let windows = windows_for_clips(&clips, 1).unwrap();
    let targets = |ws: &[Window]| {
        batch_tensors::<f64>(&ws.iter().collect::<Vec<_>>())
            .unwrap()
            .1
    };
    let (a, b) = windows.split_at(2_000);
    let fd = motion_fid(&targets(a), &targets(b)).unwrap();
    assert!(fd < 0.5, "{fd}");
}

fn window_from(input: Vec<[[f32; 2]; 17]>, target: Vec<[[f32; 2]; 17]>) -> Window {
    let mut frames = input;
    frames.extend(target);
    let clip = MotionClip::new("b", frames).unwrap();
    make_windows(&clip, 60, 30, 1).unwrap().remove(0)
}

#[test]
fn baselines_on_static_and_linear_motion() {
    let pose: [[f32; 2]; 17] = core::array::from_fn(|j| [j as f32 * 0.1, (j % 3) as f32 * 0.2]);
    let still = window_from(vec![pose; 60], vec![pose; 30]);
    for kind in [Baseline::CopyLast, Baseline::ConstVelocity] {
        let p = baseline_predict(std::slice::from_ref(&still), kind).unwrap();
        assert_eq!(p.shape(), [1, 30, 17, 2]);
        let f = baseline_forecast(&still.input, kind).unwrap();
        assert!(f.iter().all(|g| *g == still.input[59]));
    }
    let line: Vec<[[f32; 2]; 17]> = (0..90)
        .map(|t| {
            core::array::from_fn(|j| [j as f32 + 0.25 * t as f32, 2.0 * j as f32 - 0.5 * t as f32])
        })
        .collect();
    let cv = baseline_forecast(&line[..60], Baseline::ConstVelocity).unwrap();
    let target = Tensor::new(
        &[30, 17, 2],
        line[60..].iter().flatten().flatten().copied().collect(),
    )
    .unwrap();
    let as_tensor = |f: &[[[f32; 2]; 17]]| {
        Tensor::new(
            &[30, 17, 2],
            f.iter().flatten().flatten().copied().collect(),
        )
        .unwrap()
    };
    assert_eq!(rmse_x100(&as_tensor(&cv), &target).unwrap(), 0.0);
    let cl = baseline_forecast(&line[..60], Baseline::CopyLast).unwrap();
    assert!(rmse_x100(&as_tensor(&cl), &target).unwrap() > 0.0);
    assert!(cl.iter().all(|g| *g == cl[0]));
}

#[test]
fn report_fields() {
    let r = report(&random_sequences(10, 3), &random_sequences(10, 4)).unwrap();
    assert_eq!(r.n, 10);
    assert!(r.rmse_x100 > 0.0 && r.fid > 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn sqrtm_squares_back(f in 1usize..12, seed in any::<u64>()) {
        let a = random_psd(f, seed) + DMatrix::identity(f, f) * 1e-4;
        let r = sqrtm_psd(&a).unwrap();
        prop_assert!(rel_frobenius(&(&r * &r), &a) < 1e-8);
    }
}
