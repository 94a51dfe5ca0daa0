//! Acceptance criteria, one test each. Every test writes a single
//! `PASS`/`FAIL` line to stderr (bypassing output capture) before asserting.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shjb_core::*;

fn report(id: u32, name: &str, pass: bool, detail: String) {
    let line = format!(
        "acceptance {id:>2} {} {name}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut err = std::io::stderr().lock();
    let _ = err.write_all(line.as_bytes());
    let _ = err.flush();
    assert!(pass, "{}", line.trim_end());
}

fn tree(m: usize, n: usize) -> PathTree64 {
    PathTree::build(m, TimeGrid::new(1.0, n).unwrap(), DEFAULT_NODE_BUDGET).unwrap()
}

fn five_bases() -> Vec<Vec<f64>> {
    vec![vec![-1.0], vec![-0.5], vec![0.0], vec![0.5], vec![1.0]]
}

#[test]
fn criterion_01_oracle_equivalence() {
    let start = Instant::now();
    let spec = builtin_problem::<f64>("two_control_1d").unwrap();
    let t = tree(1, 3);
    let bases = five_bases();
    let v = value_backward(&spec, &spec.controls, &t, &bases).unwrap();
    let brute = value_bruteforce(&spec, &spec.controls, &t, &bases, DEFAULT_STRATEGY_BUDGET).unwrap();
    let diff = v.max_abs_diff(&brute).unwrap();
    let secs = start.elapsed().as_secs_f64();
    report(
        1,
        "backward recursion equals brute force over 128 strategies",
        diff <= 1e-12 && secs < 10.0,
        format!("max diff {diff:.3e} (tol 1e-12), {secs:.2} s (limit 10 s)"),
    );
}

#[test]
fn criterion_02_gaussian_benchmark() {
    let start = Instant::now();
    let exact = 0.5f64.sqrt();
    let grid = TimeGrid::new(1.0, 200).unwrap();
    let single = builtin_problem::<f64>("gaussian_terminal").unwrap();
    let v = value_markov(&single, &single.controls, &grid, &[vec![0.0]]).unwrap();
    let tree_err = (v.root(0) - exact).abs();

    let scheme = FdScheme::new(8.0, 0.02, 1.0, 2500, single.controls.clone()).unwrap().with_stride(1250);
    let fd = hjb_fd_solve(&single, &scheme).unwrap();
    let fd_err = (fd.eval(0.0, 0.0).unwrap() - exact).abs();

    let two = builtin_problem::<f64>("two_control_1d").unwrap();
    let bases = five_bases();
    let tv = value_markov(&two, &two.controls, &grid, &bases).unwrap();
    let scheme = FdScheme::new(8.0, 0.02, 1.0, 2500, two.controls.clone()).unwrap().with_stride(1250);
    let fd2 = hjb_fd_solve(&two, &scheme).unwrap();
    let mut rel = 0.0f64;
    for (b, x) in bases.iter().enumerate() {
        for (k, t) in [(0usize, 0.0), (100, 0.5)] {
            let a = tv.at_base(b, k, 0);
            let p = fd2.eval(t, x[0]).unwrap();
            rel = rel.max((a - p).abs() / p.abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        2,
        "Gaussian closed form, FD reference and tree-vs-FD agreement",
        tree_err <= 5e-3 && fd_err <= 1e-3 && rel <= 2e-2 && secs < 60.0,
        format!(
            "tree {tree_err:.3e} (tol 5e-3), fd {fd_err:.3e} (tol 1e-3), two-control relative {rel:.3e} (tol 2e-2), {secs:.2} s (limit 60 s)"
        ),
    );
}

#[test]
fn criterion_03_supermartingale_residuals() {
    let t = tree(1, 3);
    let bases = five_bases();
    let mut worst = f64::INFINITY;
    let mut strategies_run = 0usize;
    for name in BUILTIN_NAMES {
        let spec = builtin_problem::<f64>(name).unwrap();
        if spec.m != 1 {
            continue;
        }
        let v = value_backward(&spec, &spec.controls, &t, &bases).unwrap();
        let all = enumerate_strategies(&t, &spec.controls, StrategyKind::OpenLoop, DEFAULT_STRATEGY_BUDGET).unwrap();
        strategies_run += all.len();
        let r = supermartingale_residual(&spec, &spec.controls, &t, &v, all).unwrap();
        worst = worst.min(r.value);
    }
    // The two-dimensional problem has 2^21 open-loop tables at N = 3; use
    // the constants and each base point's optimal feedback.
    let spec = builtin_problem::<f64>("partial_nonmarkov").unwrap();
    let t2 = tree(2, 3);
    let v = value_backward(&spec, &spec.controls, &t2, &bases).unwrap();
    let mut tables: Vec<OpenLoop> = enumerate_strategies(&t2, &spec.controls, StrategyKind::Constant, 16).unwrap().collect();
    for (b, x) in bases.iter().enumerate() {
        tables.push(optimal_feedback(&v, b).unwrap().resolve(&t2, &spec.controls, Some(x)).unwrap());
    }
    strategies_run += tables.len();
    let r = supermartingale_residual(&spec, &spec.controls, &t2, &v, tables).unwrap();
    worst = worst.min(r.value);
    report(
        3,
        "value along every strategy is a supermartingale after adding running cost",
        worst >= -1e-10,
        format!("min residual {worst:.3e} (tol -1e-10) over {strategies_run} strategies"),
    );
}

#[test]
fn criterion_04_dpp_consistency() {
    let spec = builtin_problem::<f64>("two_control_1d").unwrap();
    let t = tree(1, 4);
    let v = value_backward(&spec, &spec.controls, &t, &five_bases()).unwrap();
    let gap = dpp_two_step_gap(&spec, &spec.controls, &t, &v).unwrap();
    report(
        4,
        "one-step and two-step minimization agree",
        gap.value <= 1e-12,
        format!("max gap {:.3e} (tol 1e-12) at {}", gap.value, gap.location),
    );
}

#[test]
fn criterion_05_holder_bound() {
    let spec = builtin_problem::<f64>("gaussian_terminal").unwrap();
    let t = tree(1, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let bases: Vec<Vec<f64>> = (0..200).map(|_| vec![rng.gen_range(-3.0..3.0)]).collect();
    let pairs: Vec<(usize, usize)> = (0..1000)
        .map(|_| {
            let i = rng.gen_range(0..200);
            let mut j = rng.gen_range(0..200);
            if j == i {
                j = (i + 1) % 200;
            }
            (i, j)
        })
        .collect();
    let v = value_backward(&spec, &spec.controls, &t, &bases).unwrap();
    let l1 = spec.value_holder_constant(1.0);
    let r = holder_check(&v, &pairs, l1, spec.alpha);
    report(
        5,
        "sampled Hölder bound L(1+T)|x-y|^alpha",
        r.max_excess.value <= 1e-10,
        format!(
            "max excess {:.3e} (tol 1e-10), max ratio {:.3e}, {} comparisons",
            r.max_excess.value, r.max_ratio, r.comparisons
        ),
    );
}

#[test]
fn criterion_06_energy_identity() {
    let spec = builtin_problem::<f64>("two_control_1d").unwrap();
    let t = tree(1, 3);
    let space = SpatialGrid::new(1, 6.0, 0.05).unwrap();
    let v = value_backward(&spec, &spec.controls, &t, &space.point_list()).unwrap();
    let mut worst = 0.0f64;
    for u in 0..spec.controls.len() {
        let paths = cost_gap_potential(&spec, &spec.controls, &Strategy::Constant(u), &t, &v).unwrap();
        let pot = decompose_potential(&t, paths, space.weight(), Provenance::CostGap, 1e-10).unwrap();
        worst = worst.max(pot.energy.residual);
    }
    report(
        6,
        "energy identity for the J - V potential",
        worst <= 1e-10,
        format!("residual {worst:.3e} (tol 1e-10) on {} base points", space.len()),
    );
}

#[test]
fn criterion_07_penalization() {
    let spec = builtin_problem::<f64>("two_control_1d").unwrap();
    let t = tree(1, 8);
    let bases = five_bases();
    let v = value_backward(&spec, &spec.controls, &t, &bases).unwrap();
    let mut min_step = f64::INFINITY;
    let mut worst_rel = 0.0f64;
    for u in 0..spec.controls.len() {
        let paths = cost_gap_potential(&spec, &spec.controls, &Strategy::Constant(u), &t, &v).unwrap();
        for y in &paths.values {
            let sup = y.max_abs();
            let mut prev: Option<AdaptedProcess64> = None;
            let mut last = None;
            for e in 0..=12 {
                let n = (1u32 << e) as f64;
                let p = penalize_potential(&t, y, n).unwrap();
                let below = y.zip_with(&p.u_n, |a, b| a - b);
                min_step = min_step.min(below.levels().iter().flatten().copied().fold(f64::INFINITY, f64::min));
                if let Some(q) = &prev {
                    let inc = p.u_n.zip_with(q, |a, b| a - b);
                    min_step = min_step.min(inc.levels().iter().flatten().copied().fold(f64::INFINITY, f64::min));
                }
                last = Some(below.max_abs());
                prev = Some(p.u_n);
            }
            if sup > 0.0 {
                worst_rel = worst_rel.max(last.unwrap() / sup);
            }
        }
    }
    report(
        7,
        "penalized potentials increase to the potential",
        min_step >= -1e-12 && worst_rel <= 1e-3,
        format!("min increment {min_step:.3e} (tol -1e-12), sup|u - u_4096| / sup u = {worst_rel:.3e} (tol 1e-3)"),
    );
}

#[test]
fn criterion_08_snell_oracle() {
    let t = tree(1, 3);
    let unit = ControlSet::scalars(&[1.0]).unwrap();
    let mut oracle_diff = 0.0f64;
    let mut skorohod = 0.0f64;
    for seed in 0..10 {
        let obs = ObstacleSpec::stopping(random_obstacle(&t, seed, 1.0));
        let s = snell_backward(&Strategy::Constant(0), &unit, &obs, &t, &[vec![0.2]]).unwrap();
        let o = stopping_rule_oracle(&t, &s.obstacle[0], DEFAULT_STOPPING_BUDGET).unwrap();
        oracle_diff = oracle_diff.max(o.zip_with(&s.potential.paths.values[0], |a, b| a - b).max_abs());
        skorohod = skorohod.max(s.skorohod[0].abs());
    }
    // Random supermartingale obstacle `(T - t) M_t` with `M` a positive
    // martingale on the tree.
    let a = 0.7;
    let dt = t.dt();
    let sqrt_dt = t.sqrt_dt();
    let shape = t.clone();
    let xi: NodeField<f64> = Arc::new(move |k, i, _| {
        let w = shape.position(k, i)[0];
        (1.0 - k as f64 * dt) * (a * w).exp() / (a * sqrt_dt).cosh().powi(k as i32)
    });
    let s = snell_backward(&Strategy::Constant(0), &unit, &ObstacleSpec::stopping(xi), &t, &[vec![0.0]]).unwrap();
    let own = s.potential.paths.values[0].zip_with(&s.obstacle[0], |a, b| a - b).max_abs();
    report(
        8,
        "Snell envelope equals exhaustive stopping-rule maximization",
        oracle_diff <= 1e-12 && skorohod <= 1e-10 && own <= 1e-12,
        format!("oracle diff {oracle_diff:.3e} (tol 1e-12), Skorohod {skorohod:.3e} (tol 1e-10), own envelope {own:.3e} (tol 1e-12)"),
    );
}

#[test]
fn criterion_09_reflected_bspde() {
    let t = tree(1, 4);
    let unit = ControlSet::scalars(&[1.0]).unwrap();
    let bases = five_bases();
    let gauss: LeafField<f64> = Arc::new(|_, y| (-y[0] * y[0] / 2.0).exp());
    let h: NodeField<f64> = Arc::new(|_, _, y| 0.3 * (-y[0] * y[0]).exp());
    let obs = ObstacleSpec::reflected(random_obstacle(&t, 21, 1.5), h.clone(), gauss.clone());
    let r = reflected_bspde_solve(&Strategy::Constant(0), &unit, &obs, &t, &bases).unwrap();
    let skorohod = r.skorohod.iter().fold(0.0f64, |a, s| a.max(s.abs()));
    let mass: f64 = r.correction.total_mass(&t).iter().sum();
    let loose = ObstacleSpec::reflected(Arc::new(|_, _, _| -1e6), h, gauss);
    let free = reflected_bspde_solve(&Strategy::Constant(0), &unit, &loose, &t, &bases).unwrap();
    let lin = solve_linear_shifted(&Strategy::Constant(0), &unit, &*loose.running, &*loose.terminal, &t, &bases).unwrap();
    let reduce = free.u.max_abs_diff(&lin.u).unwrap();
    report(
        9,
        "reflected solution dominates the obstacle with Skorohod contact",
        r.min_excess >= -1e-12 && skorohod <= 1e-10 && reduce <= 1e-12,
        format!(
            "min(u - xi) {:.3e}, Skorohod {skorohod:.3e} (tol 1e-10), non-binding diff {reduce:.3e} (tol 1e-12), reflection mass {mass:.3e}",
            r.min_excess
        ),
    );
}

#[test]
fn criterion_10_vanishing_infimum_certificate() {
    let spec = builtin_problem::<f64>("two_control_1d").unwrap();
    let t = tree(1, 8);
    let space = SpatialGrid::new(1, 2.0, 0.05).unwrap();
    let exact = measure_infimum_certificate(&spec, &spec.controls, &t, &space, 0.4, CertificateMode::ExactFeedback).unwrap();
    let mut masses = Vec::new();
    let mut ratios = Vec::new();
    for eps in [0.4, 0.2, 0.1] {
        let r = measure_infimum_certificate(&spec, &spec.controls, &t, &space, eps, CertificateMode::Degraded { control: 1 }).unwrap();
        masses.push(r.mass);
        ratios.push(r.bound_ratio);
    }
    let decreasing = masses.windows(2).all(|w| w[1] < w[0]);
    let c = ratios.iter().copied().fold(0.0f64, f64::max);
    report(
        10,
        "measure mass vanishes for optimal controls and decreases with eps",
        exact.mass.abs() <= 1e-10 && decreasing && c.is_finite() && c <= 1.0,
        format!(
            "exact mass {:.3e} (tol 1e-10), degraded masses {:?} for eps 0.4/0.2/0.1, empirical constant {c:.3e}",
            exact.mass,
            masses.iter().map(|m| format!("{m:.4e}")).collect::<Vec<_>>()
        ),
    );
}

#[test]
fn criterion_11_partial_nonmarkov() {
    let spec = builtin_problem::<f64>("partial_nonmarkov").unwrap();
    let t = tree(2, 4);
    let coarse = SpatialGrid::new(1, 2.0, 0.05).unwrap();
    let fine = SpatialGrid::new(1, 2.0, 0.025).unwrap();
    let v = value_backward(&spec, &spec.controls, &t, &coarse.point_list()).unwrap();
    let spread = filtration_spread(&v, spec.m0).unwrap();
    let mut literal = 0.0f64;
    let mut frozen = 0.0f64;
    for u in 0..spec.controls.len() {
        let split = psi_split(&v, &Strategy::Constant(u), &spec.controls, &t, &coarse).unwrap();
        literal = literal.max(split.central_difference[1]);
        frozen = frozen.max(split.frozen_point[1]);
    }
    let vf = value_backward(&spec, &spec.controls, &t, &fine.point_list()).unwrap();
    let sigma_bar = [spec.controls.get(0)[1]];
    let g0 = gradient_norm(&v, &sigma_bar, &coarse).unwrap();
    let g1 = gradient_norm(&vf, &sigma_bar, &fine).unwrap();
    let drift = (g1 - g0).abs() / g0.abs();
    // Refinement trend of the central-difference residual on a three-point grid.
    let triple = SpatialGrid::new(1, 0.075, 0.05).unwrap();
    let trend: Vec<String> = [2usize, 4, 8]
        .iter()
        .map(|n| {
            let tn = tree(2, *n);
            let vn = value_backward(&spec, &spec.controls, &tn, &triple.point_list()).unwrap();
            let r = (0..spec.controls.len())
                .map(|u| psi_split(&vn, &Strategy::Constant(u), &spec.controls, &tn, &triple).unwrap().central_difference[1])
                .fold(0.0f64, f64::max);
            format!("N={n}: {r:.3e}")
        })
        .collect();
    report(
        11,
        "value ignores unobserved branches and its second psi component vanishes",
        spread.value <= 1e-12 && literal <= 1e-8 && g0.is_finite() && drift <= 0.05,
        format!(
            "branch spread {:.3e} (tol 1e-12), |Z_2 - (Du sigma)_2| {literal:.3e} (tol 1e-8), frozen-point psi_2 {frozen:.3e}, residual trend [{}], gradient norm {g0:.5e} -> {g1:.5e} ({:.2}% change, tol 5%)",
            spread.value,
            trend.join(", "),
            100.0 * drift
        ),
    );
}

#[test]
fn criterion_12_semigroup() {
    let controls = builtin_problem::<f64>("two_control_1d").unwrap().controls;
    let t = tree(1, 8);
    let space = SpatialGrid::new(1, 3.0, 0.05).unwrap();
    let points = space.point_list();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..20 {
        let values: Vec<f64> = (0..space.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let field = GridField::new(space.clone(), values).unwrap();
        let u = rng.gen_range(0..controls.len());
        let k0 = rng.gen_range(0..8usize);
        let s = rng.gen_range(0..=(8 - k0)) as f64 / 8.0;
        let t0 = k0 as f64 / 8.0;
        let f = |_: usize, y: &[f64]| field.eval(y);
        let out = semigroup_apply(&Strategy::Constant(u), &controls, &f, t0, s, &t, &points).unwrap();
        let bound = field.l2_norm();
        for row in &out {
            worst = worst.max(l2_norm(row, &space).unwrap() - bound);
        }
    }
    let smooth = |t: f64, y: &[f64]| (1.0 + t) * (-2.0 * y[0] * y[0]).exp() * (1.5 * y[0]).cos();
    let wide = SpatialGrid::new(1, 4.0, 0.05).unwrap();
    let mut decreasing = true;
    let mut stats = Vec::new();
    for n in [16usize, 32] {
        let grid = TimeGrid::new(1.0, n).unwrap();
        let row: Vec<f64> = [4usize, 2, 1]
            .iter()
            .map(|j| strong_continuity_statistic(&controls, 1, &grid, &wide, &smooth, *j).unwrap())
            .collect();
        decreasing &= row.windows(2).all(|w| w[1] < w[0]);
        stats.push(row);
    }
    report(
        12,
        "semigroup contraction and strong continuity",
        worst <= 1e-12 && decreasing,
        format!("max ||P u|| - ||u|| {worst:.3e} (tol 1e-12), statistics over s = 4dt/2dt/dt: {stats:?}"),
    );
}
