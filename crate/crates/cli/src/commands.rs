//! One function per subcommand, each producing CSV tables.

use std::str::FromStr;
use std::sync::Arc;

use shjb_core::{
    cost_gap_potential, decompose_potential, hjb_fd_solve, measure_eval, measure_infimum_certificate, path_history,
    random_obstacle, reflected_bspde_solve, snell_backward, snell_penalized, value_backward, value_markov,
    CertificateMode, CostSpec64, FdScheme64, Layout, LeafField, NodeField, ObservedPath, ObstacleSpec64, PathTree64,
    Provenance, Strategy, ValueField64,
};

use crate::config::{CertificateModeName, ExperimentConfig, ObstacleKind};
use crate::error::CliError;
use crate::report::{num, Table};
use crate::verify::{a1_checks, checks_table, run_suite};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Validate,
    Value,
    Potential,
    Certificate,
    Snell,
    Reflected,
    Pde,
    Verify,
}

impl Command {
    pub const ALL: [Command; 8] = [
        Command::Validate,
        Command::Value,
        Command::Potential,
        Command::Certificate,
        Command::Snell,
        Command::Reflected,
        Command::Pde,
        Command::Verify,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::Value => "value",
            Command::Potential => "potential",
            Command::Certificate => "certificate",
            Command::Snell => "snell",
            Command::Reflected => "reflected",
            Command::Pde => "pde",
            Command::Verify => "verify",
        }
    }
}

impl FromStr for Command {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| CliError::UnknownCommand(s.to_string()))
    }
}

/// Tables to write, human-readable summary lines and the overall verdict.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub command: Command,
    pub tables: Vec<Table>,
    pub summary: Vec<String>,
    pub passed: bool,
}

impl Outcome {
    fn ok(command: Command, table: Table, summary: Vec<String>) -> Self {
        Self {
            command,
            tables: vec![table],
            summary,
            passed: true,
        }
    }
}

/// Runs `command` on the configured problem. `tolerance_scale` multiplies
/// the config's own tolerance scale.
pub fn run_experiment(cfg: &ExperimentConfig, command: Command, tolerance_scale: f64) -> Result<Outcome, CliError> {
    if !(tolerance_scale > 0.0 && tolerance_scale.is_finite()) {
        return Err(CliError::Config {
            field: "--tolerance-scale".into(),
            message: format!("must be positive and finite, got {tolerance_scale}"),
        });
    }
    let scale = tolerance_scale * cfg.tolerances.scale;
    match command {
        Command::Validate => validate(cfg, scale),
        Command::Value => value(cfg),
        Command::Potential => potential(cfg),
        Command::Certificate => certificate(cfg),
        Command::Snell => snell(cfg),
        Command::Reflected => reflected(cfg),
        Command::Pde => pde(cfg),
        Command::Verify => {
            let (checks, notes) = run_suite(cfg, scale)?;
            let passed = checks.iter().all(|c| c.passed());
            let mut summary = notes;
            summary.extend(checks.iter().map(|c| c.line()));
            Ok(Outcome {
                command,
                tables: vec![checks_table("verify", &checks)],
                summary,
                passed,
            })
        }
    }
}

fn x_header(d: usize) -> Vec<String> {
    if d == 1 {
        vec!["x".into()]
    } else {
        (1..=d).map(|i| format!("x{i}")).collect()
    }
}

fn header(d: usize, before: &[&str], after: &[&str]) -> Vec<String> {
    let mut h: Vec<String> = before.iter().map(|s| s.to_string()).collect();
    h.extend(x_header(d));
    h.extend(after.iter().map(|s| s.to_string()));
    h
}

fn coords(p: &[f64]) -> impl Iterator<Item = String> + '_ {
    p.iter().map(|v| num(*v))
}

fn validate(cfg: &ExperimentConfig, scale: f64) -> Result<Outcome, CliError> {
    let spec = cfg.spec()?;
    let layout = match cfg.layout() {
        Layout::Tree => format!("tree of {} nodes", cfg.path_tree(&spec)?.total_nodes()),
        Layout::Markov => format!("recombining layout with {} steps", cfg.tree.steps),
    };
    let checks = a1_checks(&spec, cfg, scale);
    let passed = checks.iter().all(|c| c.passed());
    let mut summary = vec![format!(
        "problem {} (d = {}, m = {}, m0 = {}), {} controls, {layout}",
        spec.name,
        spec.d,
        spec.m,
        spec.m0,
        spec.controls.len(),
    )];
    summary.extend(checks.iter().map(|c| c.line()));
    Ok(Outcome {
        command: Command::Validate,
        tables: vec![checks_table("validate", &checks)],
        summary,
        passed,
    })
}

fn value_field(cfg: &ExperimentConfig, spec: &CostSpec64, bases: &[Vec<f64>]) -> Result<ValueField64, CliError> {
    Ok(match cfg.layout() {
        Layout::Tree => value_backward(spec, &spec.controls, &cfg.path_tree(spec)?, bases)?,
        Layout::Markov => value_markov(spec, &spec.controls, &cfg.time_grid()?, bases)?,
    })
}

fn value(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let spec = cfg.spec()?;
    let space = cfg.spatial_grid(spec.d)?;
    let bases = space.point_list();
    let v = value_field(cfg, &spec, &bases)?;
    let mut table = Table::with_header("value", header(spec.d, &["t", "node"], &["V", "argmin"]));
    for k in 0..=v.steps() {
        let t = v.grid().time(k);
        for node in 0..v.nodes(k) {
            for (b, x) in bases.iter().enumerate() {
                let argmin = if k < v.steps() {
                    v.argmin(b, k, node, v.center(k)).map(|a| a.to_string()).unwrap_or_default()
                } else {
                    String::new()
                };
                let mut row = vec![num(t), node.to_string()];
                row.extend(coords(x));
                row.push(num(v.at_base(b, k, node)));
                row.push(argmin);
                table.push(row);
            }
        }
    }
    let roots = v.roots();
    let lo = roots.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = roots.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let summary = vec![format!("V(0, x) over {} grid points: min {lo}, max {hi}", bases.len())];
    Ok(Outcome::ok(Command::Value, table, summary))
}

fn potential(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let spec = cfg.spec()?;
    let tree = cfg.path_tree(&spec)?;
    let space = cfg.spatial_grid(spec.d)?;
    let bases = space.point_list();
    let v = value_backward(&spec, &spec.controls, &tree, &bases)?;
    let u = cfg.strategy_control(&spec);
    let paths = cost_gap_potential(&spec, &spec.controls, &Strategy::Constant(u), &tree, &v)?;
    let pot = decompose_potential(&tree, paths, space.weight(), Provenance::CostGap, 1e-10)?;
    let mass = pot.total_mass(&tree);
    let mut table = Table::with_header("potential", header(spec.d, &[], &["u0", "EK_T", "energy_residual"]));
    for (b, x) in bases.iter().enumerate() {
        let mut row: Vec<String> = coords(x).collect();
        row.push(num(pot.paths.values[b].level(0)[0]));
        row.push(num(mass[b]));
        row.push(num(pot.energy.residual));
        table.push(row);
    }
    let total = measure_eval(&tree, &pot, &|_, _| 1.0, 0.0)?;
    let summary = vec![
        format!("potential J - V of constant control {u}"),
        format!("measure mass {}, energy residual {}", num(total), num(pot.energy.residual)),
    ];
    Ok(Outcome::ok(Command::Potential, table, summary))
}

fn certificate(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let spec = cfg.spec()?;
    let tree = cfg.path_tree(&spec)?;
    let space = cfg.spatial_grid(spec.d)?;
    let control = cfg.certificate_control(&spec);
    let mode = match cfg.certificate.mode {
        CertificateModeName::Exact => CertificateMode::ExactFeedback,
        CertificateModeName::Constant => CertificateMode::Constant { control },
        CertificateModeName::Degraded => CertificateMode::Degraded { control },
    };
    let mut eps = cfg.certificate.eps.clone();
    eps.sort_by(|a, b| b.total_cmp(a));
    let mut table = Table::new("certificate", &["cell", "gap", "mass", "eps"]);
    let mut summary = Vec::new();
    for e in eps {
        let r = measure_infimum_certificate(&spec, &spec.controls, &tree, &space, e, mode)?;
        for c in &r.cells {
            table.push(vec![c.cell.to_string(), num(c.gap), num(c.mass), num(e)]);
        }
        summary.push(format!("eps {e}: mass {}, bound ratio {}", r.mass, r.bound_ratio));
    }
    Ok(Outcome::ok(Command::Certificate, table, summary))
}

/// Obstacle process chosen by `[obstacle]`.
pub(crate) fn obstacle_field(cfg: &ExperimentConfig, tree: &PathTree64) -> NodeField<f64> {
    let o = &cfg.obstacle;
    match o.kind {
        ObstacleKind::Random => random_obstacle(tree, o.seed, o.scale),
        ObstacleKind::Linear => {
            let (slope, horizon, dt) = (o.slope, tree.grid().horizon(), tree.dt());
            Arc::new(move |k, _, _| slope * (horizon - k as f64 * dt))
        }
        ObstacleKind::None => Arc::new(|_, _, _| -1.0),
    }
}

/// Reflected problem: the configured obstacle, constant `H` and the
/// problem's terminal cost.
pub(crate) fn reflected_obstacle(cfg: &ExperimentConfig, spec: &CostSpec64, tree: &PathTree64) -> ObstacleSpec64 {
    let running = cfg.obstacle.running;
    let h: NodeField<f64> = Arc::new(move |_, _, _| running);
    let (g, shape, m0) = (spec.clone(), tree.clone(), spec.m0);
    let psi: LeafField<f64> = Arc::new(move |i, y| {
        let n = shape.steps();
        let history = path_history(&shape, m0, n, i);
        g.g_terminal(y, &ObservedPath::new(m0, n, &history))
    });
    ObstacleSpec64::reflected(obstacle_field(cfg, tree), h, psi)
}

fn per_base_sup(a: &ValueField64, b: &ValueField64, base: usize) -> f64 {
    (0..=a.steps())
        .flat_map(|k| a.level(base, k).iter().zip(b.level(base, k)).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

fn snell(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let spec = cfg.spec()?;
    let tree = cfg.path_tree(&spec)?;
    let space = cfg.spatial_grid(spec.d)?;
    let bases = space.point_list();
    let sigma = Strategy::Constant(cfg.strategy_control(&spec));
    let obs = ObstacleSpec64::stopping(obstacle_field(cfg, &tree));
    let s = snell_backward(&sigma, &spec.controls, &obs, &tree, &bases)?;
    let mass = s.potential.total_mass(&tree);
    let mut penalized = Vec::new();
    for n in &cfg.penalty.schedule {
        penalized.push(snell_penalized(&sigma, &spec.controls, &obs, *n, &tree, &bases)?);
    }
    let mut names: Vec<String> = x_header(spec.d);
    names.extend(["envelope", "mass", "skorohod"].map(String::from));
    names.extend(cfg.penalty.schedule.iter().map(|n| format!("penalized_err_n{n}")));
    let mut table = Table::with_header("snell", names);
    for (b, x) in bases.iter().enumerate() {
        let mut row: Vec<String> = coords(x).collect();
        row.push(num(s.field.root(b)));
        row.push(num(mass[b]));
        row.push(num(s.skorohod[b]));
        row.extend(penalized.iter().map(|p| num(per_base_sup(p, &s.field, b))));
        table.push(row);
    }
    let worst = s.skorohod.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let summary = vec![format!("max |Skorohod residual| {worst}")];
    Ok(Outcome::ok(Command::Snell, table, summary))
}

fn reflected(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let spec = cfg.spec()?;
    let tree = cfg.path_tree(&spec)?;
    let space = cfg.spatial_grid(spec.d)?;
    let bases = space.point_list();
    let sigma = Strategy::Constant(cfg.strategy_control(&spec));
    let obs = reflected_obstacle(cfg, &spec, &tree);
    let r = reflected_bspde_solve(&sigma, &spec.controls, &obs, &tree, &bases)?;
    let mass = r.correction.total_mass(&tree);
    let mut table = Table::with_header("reflected", header(spec.d, &[], &["u0", "linear0", "mass", "skorohod"]));
    for (b, x) in bases.iter().enumerate() {
        let mut row: Vec<String> = coords(x).collect();
        row.push(num(r.u.root(b)));
        row.push(num(r.linear.u.root(b)));
        row.push(num(mass[b]));
        row.push(num(r.skorohod[b]));
        table.push(row);
    }
    let summary = vec![format!("min (u - xi) {}", r.min_excess)];
    Ok(Outcome::ok(Command::Reflected, table, summary))
}

pub(crate) fn fd_scheme(cfg: &ExperimentConfig, spec: &CostSpec64) -> Result<FdScheme64, CliError> {
    let p = &cfg.pde;
    let scheme = match p.steps {
        Some(n) => FdScheme64::new(p.radius, p.spacing, cfg.tree.horizon, n, spec.controls.clone())?,
        None => FdScheme64::with_cfl_steps(p.radius, p.spacing, cfg.tree.horizon, spec.controls.clone())?,
    };
    scheme.check_cfl()?;
    Ok(scheme.with_stride(p.stride))
}

fn pde(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let spec = cfg.spec()?;
    let scheme = fd_scheme(cfg, &spec)?;
    let sol = hjb_fd_solve(&spec, &scheme)?;
    let mut table = Table::new("pde", &["t", "x", "u"]);
    for (t, row) in sol.times.iter().zip(&sol.values) {
        for (x, u) in sol.x.iter().zip(row) {
            table.push(vec![num(*t), num(*x), num(*u)]);
        }
    }
    let summary = vec![format!(
        "{} steps of dt {} (stability bound {}), {} stored levels",
        scheme.steps,
        scheme.dt(),
        scheme.cfl_bound(),
        sol.times.len()
    )];
    Ok(Outcome::ok(Command::Pde, table, summary))
}
