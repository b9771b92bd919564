use approx::assert_abs_diff_eq;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voltvar::controller::ReactiveBox;
use voltvar::grid::{Grid, GridNetwork, Line, PowerFlowModel, PowerScenario};
use voltvar::opf::{cost, cost_of, read_labels, solve_opf, write_labels, CostWeights, LabelRow, OpfOptions, OpfProblem};

fn random_grid(rng: &mut ChaCha8Rng, buses: usize) -> Grid {
    let lines = (1..buses)
        .map(|b| Line { from: rng.gen_range(0..b), to: b, r_ohm: rng.gen_range(0.05..0.5), x_ohm: rng.gen_range(0.05..0.5) })
        .collect();
    Grid::new(GridNetwork::new("rand", 1.0, 1.0, lines, (1..buses).collect()).unwrap()).unwrap()
}

fn random_scenario(grid: &Grid, rng: &mut ChaCha8Rng, scale: f64) -> PowerScenario {
    let n = grid.mat.n();
    let nu = grid.index().uncontrollable().len();
    PowerScenario::new(
        DVector::from_fn(n, |_, _| rng.gen_range(-scale..=scale)),
        DVector::from_fn(nu, |_, _| rng.gen_range(-scale..=scale)),
        "rand",
    )
}

#[test]
fn cost_of_flat_profile_is_zero_and_hand_case() {
    let w = CostWeights::new(100.0, nalgebra::DMatrix::identity(2, 2)).unwrap();
    let c = cost_of(&DVector::from_element(2, 1.0), &DVector::zeros(2), &w);
    assert_eq!((c.volt, c.loss), (0.0, 0.0));
    let c = cost_of(&DVector::from_vec(vec![1.01, 0.99]), &DVector::zeros(2), &w);
    assert_abs_diff_eq!(c.volt, 0.02, epsilon = 1e-15);
    assert_eq!(c.loss, 0.0);
}

#[test]
fn cost_uses_full_reactive_vector() {
    let grid = Grid::ucsd49();
    let w = CostWeights::standard(&grid.mat);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let scen = random_scenario(&grid, &mut rng, 0.01);
    let qc = DVector::from_fn(13, |_, _| rng.gen_range(-0.01..=0.01));
    let c = cost(&grid, PowerFlowModel::Linear, &scen, &qc, &w).unwrap();
    let q = grid.index().assemble_q(&scen.q_uncontrolled, &qc).unwrap();
    assert_abs_diff_eq!(c.loss, q.dot(&(&grid.mat.r * &q)), epsilon = 1e-15);
}

#[test]
fn singleton_box_pins_the_solution() {
    let grid = Grid::ucsd49();
    let w = CostWeights::standard(&grid.mat);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let scen = random_scenario(&grid, &mut rng, 0.02);
    let bx = ReactiveBox::new(DVector::zeros(13), DVector::zeros(13)).unwrap();
    let sol = solve_opf(&grid.mat, &scen, &bx, &w).unwrap();
    assert_eq!(sol.q_star, DVector::zeros(13));
}

#[test]
fn scalar_case_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let (r, x) = (rng.gen_range(0.01..0.5), rng.gen_range(0.01..0.5));
        let net = GridNetwork::new("one", 1.0, 1.0, vec![Line { from: 0, to: 1, r_ohm: r, x_ohm: x }], vec![1]).unwrap();
        let grid = Grid::new(net).unwrap();
        let p = rng.gen_range(-0.2..0.2);
        let scen = PowerScenario::new(DVector::from_element(1, p), DVector::zeros(0), "s");
        let w = CostWeights::standard(&grid.mat);
        let bx = ReactiveBox::symmetric(DVector::from_element(1, 100.0)).unwrap();
        let sol = solve_opf(&grid.mat, &scen, &bx, &w).unwrap();
        let expect = -100.0 * x * (r * p) / (100.0 * x * x + r);
        assert_abs_diff_eq!(sol.q_star[0], expect, epsilon = 1e-8);
    }
}

#[test]
fn random_instances_beat_random_feasible_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..5 {
        let grid = random_grid(&mut rng, 6);
        let scen = random_scenario(&grid, &mut rng, 0.3);
        let w = CostWeights::standard(&grid.mat);
        let bx = ReactiveBox::symmetric(DVector::from_element(5, 0.1)).unwrap();
        let prob = OpfProblem::new(&grid.mat, &scen, &bx, &w, None).unwrap();
        let sol = prob.solve(&OpfOptions::default()).unwrap();
        assert!(sol.kkt_residual < 1e-8);
        for _ in 0..10_000 {
            let q = bx.sample(&mut rng);
            assert!(sol.objective <= prob.objective(&q) + 1e-12);
        }
    }
}

#[test]
fn restarts_agree_and_complementarity_holds() {
    let grid = Grid::ucsd49();
    let w = CostWeights::standard(&grid.mat);
    let bx = ReactiveBox::ucsd49(10.0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // large enough that some setpoints sit on their limits
    let scen = random_scenario(&grid, &mut rng, 0.05);
    let prob = OpfProblem::new(&grid.mat, &scen, &bx, &w, None).unwrap();
    let base = prob.solve(&OpfOptions::default()).unwrap();
    for _ in 0..5 {
        let q0 = bx.sample(&mut rng);
        let s = prob.solve_from(&q0, &OpfOptions::default()).unwrap();
        assert_abs_diff_eq!(s.q_star, base.q_star, epsilon = 1e-6);
    }
    let g = prob.gradient(&base.q_star);
    for i in 0..13 {
        let q = base.q_star[i];
        let at_lo = (q - bx.q_min()[i]).abs() < 1e-9;
        let at_hi = (q - bx.q_max()[i]).abs() < 1e-9;
        if at_lo {
            assert!(g[i] >= -1e-7);
        } else if at_hi {
            assert!(g[i] <= 1e-7);
        } else {
            assert!(g[i].abs() < 1e-7, "bus {i}: {}", g[i]);
        }
    }
}

#[test]
fn plain_projected_gradient_never_raises_the_objective() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let grid = random_grid(&mut rng, 5);
    let scen = random_scenario(&grid, &mut rng, 0.3);
    let w = CostWeights::standard(&grid.mat);
    let bx = ReactiveBox::symmetric(DVector::from_element(4, 0.05)).unwrap();
    let prob = OpfProblem::new(&grid.mat, &scen, &bx, &w, None).unwrap();
    let mut q = bx.sample(&mut rng);
    let mut f = prob.objective(&q);
    for _ in 0..500 {
        q = bx.clamp(&(&q - prob.gradient(&q) / prob.curvature()));
        let next = prob.objective(&q);
        assert!(next <= f + 1e-14 * f.abs().max(1.0));
        f = next;
    }
}

#[test]
fn iteration_cap_is_reported() {
    let grid = Grid::ucsd49();
    let w = CostWeights::standard(&grid.mat);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let scen = random_scenario(&grid, &mut rng, 0.05);
    let prob = OpfProblem::new(&grid.mat, &scen, &ReactiveBox::ucsd49(10.0), &w, None).unwrap();
    let opts = OpfOptions { tolerance: 1e-12, max_iterations: 3, polish_every: 0 };
    assert!(prob.solve(&opts).is_err());
}

#[test]
fn label_file_round_trips() {
    let c = [14, 15];
    let rows = vec![
        LabelRow { label: "a".into(), v_c: DVector::from_vec(vec![1.01, 0.99]), q_star: DVector::from_vec(vec![0.1, -0.2]) },
        LabelRow { label: "b".into(), v_c: DVector::from_vec(vec![1.0, 1.02]), q_star: DVector::from_vec(vec![0.0, 0.3]) },
    ];
    let mut buf = Vec::new();
    write_labels(&mut buf, &c, 10.0, &rows, &[("model".into(), "linear".into())]).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let (back, meta) = read_labels(&text, &c).unwrap();
    assert_eq!(back, rows);
    assert!(meta.iter().any(|(k, v)| k == "model" && v == "linear"));
}
