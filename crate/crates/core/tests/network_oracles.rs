mod common;

use common::*;
use nalgebra::{DVector, Matrix3xX};
use prn::geometry::{Shape3D, ShapeBatch};
use prn::loss::{pr_loss_and_grad_warm, pr_loss_value, LossConfig};
use prn::network::*;
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn random_inputs(rng: &mut ChaCha8Rng, b: usize, width: usize) -> Vec<DVector<f64>> {
    (0..b)
        .map(|_| DVector::from_fn(width, |_, _| rng.random_range(-1.0..1.0)))
        .collect()
}

/// Central differences of `f` over every trainable parameter, in tensor order.
fn param_fd(params: &NetworkParams, h: f64, mut f: impl FnMut(&NetworkParams) -> f64) -> Vec<Vec<f64>> {
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let mut out = Vec::new();
    for (t, &n) in sizes.iter().enumerate() {
        let mut g = vec![0.0; n];
        for (k, gk) in g.iter_mut().enumerate() {
            let mut p = params.clone();
            p.tensors_mut()[t][k] += h;
            let mut m = params.clone();
            m.tensors_mut()[t][k] -= h;
            *gk = (f(&p) - f(&m)) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

fn rel_err(analytic: &ParamGrads, fd: &[Vec<f64>]) -> f64 {
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (a, f) in analytic.0.iter().zip(fd) {
        assert_eq!(a.len(), f.len());
        for (x, y) in a.iter().zip(f) {
            diff = diff.max((x - y).abs());
            scale = scale.max(y.abs());
        }
    }
    diff / scale
}

fn inner(ell: &[Matrix3xX<f64>], shapes: &[Shape3D]) -> f64 {
    ell.iter().zip(shapes).map(|(l, s)| l.dot(s.points())).sum()
}

fn linear_probe(cfg: &NetworkConfig, frozen: bool) -> f64 {
    let mut r = rng(if frozen { 2 } else { 1 });
    let mut params = NetworkParams::init(cfg, 11).unwrap();
    let x = random_inputs(&mut r, 6, cfg.input_width());
    if frozen {
        let (_, t) = forward(&params, cfg, &x, Mode::Train).unwrap();
        params.update_running_stats(&t, 0.5);
        params = freeze_batch_norm(params);
    }
    let ell: Vec<Matrix3xX<f64>> = (0..6)
        .map(|_| Matrix3xX::from_fn(cfg.n_p, |_, _| r.random_range(-1.0..1.0)))
        .collect();
    let (_, trace) = forward(&params, cfg, &x, Mode::Train).unwrap();
    let g = backward(&params, cfg, &trace, &ell).unwrap();
    let fd = param_fd(&params, 1e-6, |p| {
        let (out, _) = forward(p, cfg, &x, Mode::Train).unwrap();
        inner(&ell, &out)
    });
    rel_err(&g, &fd)
}

#[test]
fn linear_functional_gradients_match_finite_differences() {
    let cfg = NetworkConfig {
        n_p: 4,
        hidden: 8,
        ..Default::default()
    };
    let err = linear_probe(&cfg, false);
    assert!(err <= 1e-5, "batch statistics: {err}");
    let err = linear_probe(&cfg, true);
    assert!(err <= 1e-5, "running statistics: {err}");
    let plain = NetworkConfig {
        use_batch_norm: false,
        ..cfg
    };
    let err = linear_probe(&plain, false);
    assert!(err <= 1e-5, "no batch norm: {err}");
}

#[test]
fn network_plus_loss_gradients_match_finite_differences() {
    let cfg = NetworkConfig {
        n_p: 5,
        hidden: 16,
        ..Default::default()
    };
    let mut r = rng(3);
    let params = NetworkParams::init(&cfg, 4).unwrap();
    let x = random_inputs(&mut r, 4, cfg.input_width());
    let obs = random_obs(&mut r, 4, 5);
    let loss_cfg = LossConfig::default();

    let (out, trace) = forward(&params, &cfg, &x, Mode::Train).unwrap();
    let batch = ShapeBatch::new(out).unwrap();
    let (lg, state) = pr_loss_and_grad_warm(&batch, &obs, &loss_cfg, None).unwrap();
    let warm = state.unwrap().rotations;
    let g = backward(&params, &cfg, &trace, &lg.grad).unwrap();

    let tight = tight_config(loss_cfg.lambda);
    let fd = param_fd(&params, 1e-5, |p| {
        let (out, _) = forward(p, &cfg, &x, Mode::Train).unwrap();
        pr_loss_value(&ShapeBatch::new(out).unwrap(), &obs, &tight, Some(&warm)).unwrap()
    });
    let err = rel_err(&g, &fd);
    assert!(err <= 1e-3, "relative error {err}");
}

#[test]
fn freezing_changes_train_mode_output() {
    let cfg = NetworkConfig {
        n_p: 4,
        hidden: 8,
        ..Default::default()
    };
    let mut r = rng(5);
    let params = NetworkParams::init(&cfg, 6).unwrap();
    let x: Vec<DVector<f64>> = random_inputs(&mut r, 5, 8).into_iter().map(|v| v * 3.0).collect();
    let (live, _) = forward(&params, &cfg, &x, Mode::Train).unwrap();
    let (frozen, _) = forward(&freeze_batch_norm(params), &cfg, &x, Mode::Train).unwrap();
    assert_ne!(live, frozen);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn z_head_never_moves_xy(seed in any::<u64>(), k in 0usize..32, delta in -1.0f64..1.0) {
        let cfg = NetworkConfig { n_p: 4, hidden: 8, ..Default::default() };
        let mut r = rng(seed);
        let params = NetworkParams::init(&cfg, seed).unwrap();
        let x = random_inputs(&mut r, 3, 8);
        let mut moved = params.clone();
        if k < 32 { moved.head_z.w.as_mut_slice()[k] += delta; }
        moved.head_z.b[k % 4] += delta;
        for mode in [Mode::Train, Mode::Eval] {
            let (a, _) = forward(&params, &cfg, &x, mode).unwrap();
            let (b, _) = forward(&moved, &cfg, &x, mode).unwrap();
            for (sa, sb) in a.iter().zip(&b) {
                prop_assert_eq!(sa.points().rows(0, 2), sb.points().rows(0, 2));
            }
        }
    }

    #[test]
    fn eval_forward_leaves_params_untouched(seed in any::<u64>()) {
        let cfg = NetworkConfig { n_p: 4, hidden: 8, ..Default::default() };
        let mut r = rng(seed);
        let params = NetworkParams::init(&cfg, seed).unwrap();
        let before = params.clone();
        let _ = forward(&params, &cfg, &random_inputs(&mut r, 4, 8), Mode::Eval).unwrap();
        prop_assert_eq!(params, before);
    }
}
