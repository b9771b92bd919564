use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voltvar::icnn::{IcnnConfig, IcnnModel, Layer};

fn random_model(d: usize, hidden: Vec<usize>, seed: u64) -> IcnnModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = IcnnConfig { hidden, ..IcnnConfig::default() };
    let mut m = IcnnModel::init(d, &cfg, &mut rng).unwrap();
    // push biases around so units sit in different softplus regimes
    for l in m.layers_mut() {
        l.b.apply(|b| *b += rng.gen_range(-0.3..0.3));
    }
    m
}

fn random_v(d: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.gen_range(0.9..1.1))
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[test]
fn hand_built_single_unit_matches_scalar_softplus() {
    // g(x) = softplus_β(x − 1) with input_scale 1
    let layers = vec![
        Layer { w_z: None, w_x: Some(DMatrix::from_element(1, 1, 1.0)), b: DVector::from_element(1, 0.0) },
        Layer {
            w_z: Some(DMatrix::from_element(1, 1, 1.0)),
            w_x: Some(DMatrix::zeros(1, 1)),
            b: DVector::zeros(1),
        },
    ];
    let m = IcnnModel::from_layers(1, layers, 10.0, 1.0, 1.0).unwrap();
    for &x in &[0.9, 0.97, 1.0, 1.03, 1.1] {
        let expected = (1.0f64 + (10.0 * (x - 1.0f64)).exp()).ln() / 10.0;
        let got = m.forward(&DVector::from_element(1, x)).unwrap();
        assert!((got - expected).abs() < 1e-12, "x={x}: {got} vs {expected}");
    }
}

#[test]
fn input_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for seed in 0..10 {
        let d = 1 + seed as usize % 5;
        let m = random_model(d, vec![8, 6], seed);
        let x = random_v(d, &mut rng);
        let g = m.input_gradient(&x).unwrap();
        let h = 1e-5;
        for i in 0..d {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (m.forward(&xp).unwrap() - m.forward(&xm).unwrap()) / (2.0 * h);
            assert!(rel_err(g[i], fd) <= 1e-5, "seed {seed} coord {i}: {} vs {fd}", g[i]);
        }
    }
}

#[test]
fn scalar_param_gradient_matches_finite_differences() {
    let m = random_model(3, vec![3, 2], 5);
    let x = DVector::from_vec(vec![0.96, 1.02, 1.07]);
    let grad = m.param_gradient(&x, 1.0).unwrap().flatten();
    let theta = m.params();
    let h = 1e-6;
    for k in 0..theta.len() {
        let mut mp = m.clone();
        let mut mm = m.clone();
        let mut tp = theta.clone();
        let mut tm = theta.clone();
        tp[k] += h;
        tm[k] -= h;
        mp.set_params(&tp).unwrap();
        mm.set_params(&tm).unwrap();
        let fd = (mp.forward(&x).unwrap() - mm.forward(&x).unwrap()) / (2.0 * h);
        assert!(rel_err(grad[k], fd) <= 1e-4, "param {k}: {} vs {fd}", grad[k]);
    }
}

#[test]
fn second_order_param_gradient_matches_finite_differences() {
    for (seed, hidden, skip) in [(1u64, vec![3, 2], true), (2, vec![2, 3, 2], false), (3, vec![3], true)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = IcnnConfig { hidden, skip_connections: skip, ..IcnnConfig::default() };
        let m = IcnnModel::init(3, &cfg, &mut rng).unwrap();
        let x = random_v(3, &mut rng);
        let c = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
        let grad = m.input_gradient_vjp(&x, &c).unwrap().flatten();
        let theta = m.params();
        let h = 1e-5;
        let h_of = |model: &IcnnModel| model.input_gradient(&x).unwrap().dot(&c);
        for k in 0..theta.len() {
            let mut mp = m.clone();
            let mut mm = m.clone();
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[k] += h;
            tm[k] -= h;
            mp.set_params(&tp).unwrap();
            mm.set_params(&tm).unwrap();
            let fd = (h_of(&mp) - h_of(&mm)) / (2.0 * h);
            assert!(rel_err(grad[k], fd) <= 1e-4, "seed {seed} param {k}: {} vs {fd}", grad[k]);
        }
    }
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let m = random_model(4, vec![5, 5], 9);
    let x = DVector::from_element(4, 1.01);
    assert!(m.param_gradient(&x, 0.0).unwrap().is_zero());
    assert!(m.input_gradient_vjp(&x, &DVector::zeros(4)).unwrap().is_zero());
}

#[test]
fn gradient_step_reduces_fit_loss() {
    let mut m = random_model(2, vec![6, 6], 21);
    let x = DVector::from_vec(vec![1.03, 0.98]);
    let target = DVector::from_vec(vec![-0.2, 0.1]);
    // loss = ‖q* + ∇g(x)‖², upstream on φ = −∇g is 2(φ − q*)
    let loss = |m: &IcnnModel| (target.clone() + m.input_gradient(&x).unwrap()).norm_squared();
    let before = loss(&m);
    let phi = -m.input_gradient(&x).unwrap();
    let upstream = (&phi - &target) * 2.0;
    let grad = m.input_gradient_vjp(&x, &(-upstream)).unwrap().flatten();
    let theta: Vec<f64> = m.params().iter().zip(&grad).map(|(t, g)| t - 1e-4 * g).collect();
    m.set_params(&theta).unwrap();
    assert!(loss(&m) < before);
}

#[test]
fn sampled_midpoint_convexity_and_monotone_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let m = random_model(5, vec![16, 16], 31);
    assert!(m.is_convex_by_construction());
    for _ in 0..10_000 {
        let x = random_v(5, &mut rng);
        let y = random_v(5, &mut rng);
        let mid = (&x + &y) * 0.5;
        let gx = m.forward(&x).unwrap();
        let gy = m.forward(&y).unwrap();
        assert!(m.forward(&mid).unwrap() <= 0.5 * (gx + gy) + 1e-9);
        let s = (m.input_gradient(&x).unwrap() - m.input_gradient(&y).unwrap()).dot(&(&x - &y));
        assert!(s >= -1e-9, "{s}");
    }
}

#[test]
fn projection_restores_convexity() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut m = random_model(3, vec![8, 8], 41);
    for l in m.layers_mut().iter_mut().skip(1) {
        l.w_z.as_mut().unwrap().apply(|w| *w -= 0.5);
    }
    let p = m.project_params_nonneg();
    assert!(p.is_convex_by_construction());
    for _ in 0..2_000 {
        let x = random_v(3, &mut rng);
        let y = random_v(3, &mut rng);
        let mid = (&x + &y) * 0.5;
        assert!(p.forward(&mid).unwrap() <= 0.5 * (p.forward(&x).unwrap() + p.forward(&y).unwrap()) + 1e-9);
    }
    let again = p.project_params_nonneg();
    assert_eq!(again, p);
}

#[test]
fn analytic_lipschitz_bound_dominates_difference_quotients() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    for seed in 0..5 {
        let m = random_model(4, vec![16, 16], 100 + seed);
        let bound = m.lipschitz_bound(0.9, 1.1);
        let global = m.lipschitz_bound_global();
        assert!(bound <= global * (1.0 + 1e-12));
        let mut worst: f64 = 0.0;
        for _ in 0..5_000 {
            let x = random_v(4, &mut rng);
            let dir = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0)) * 1e-3;
            let y = (&x + dir).map(|v: f64| v.clamp(0.9, 1.1));
            let dx = (&x - &y).norm();
            if dx == 0.0 {
                continue;
            }
            let q = (m.input_gradient(&x).unwrap() - m.input_gradient(&y).unwrap()).norm() / dx;
            worst = worst.max(q);
        }
        assert!(worst <= bound, "sampled {worst} above bound {bound}");
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let m = random_model(4, vec![7, 5], 61);
    let text = m.to_json();
    let back = IcnnModel::from_json(&text).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.to_json(), text);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.json");
    m.save(&path).unwrap();
    assert_eq!(IcnnModel::load(&path).unwrap(), m);
}

#[test]
fn lipschitz_bound_of_non_finite_weights_is_infinite() {
    let mut m = random_model(3, vec![8, 8], 71);
    m.layers_mut()[1].w_z.as_mut().unwrap()[(0, 0)] = f64::NAN;
    assert_eq!(m.lipschitz_bound(0.9, 1.1), f64::INFINITY);
    let mut m = random_model(3, vec![8, 8], 72);
    m.layers_mut()[0].w_x.as_mut().unwrap()[(2, 1)] = f64::INFINITY;
    assert_eq!(m.lipschitz_bound(0.9, 1.1), f64::INFINITY);
}
