//! Problem data `(f, G, g, L, alpha)`, the Hölder/domination assumption
//! check, and the built-in example problems.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::control::ControlSet;
use crate::error::{Error, Result};
use crate::lattice::PathTree;
use crate::scalar::Real;

/// Names accepted by [`builtin_problem`].
pub const BUILTIN_NAMES: [&str; 5] = [
    "zero",
    "constant_running",
    "gaussian_terminal",
    "two_control_1d",
    "partial_nonmarkov",
];

/// The part of a Wiener path a cost function may look at: positions of the
/// first `m0` coordinates at levels `0..=level`.
#[derive(Debug, Clone, Copy)]
pub struct ObservedPath<'a, S> {
    m0: usize,
    level: usize,
    history: &'a [S],
}

impl<'a, S: Real> ObservedPath<'a, S> {
    /// `history` holds `(level + 1) * m0` positions, level-major.
    pub fn new(m0: usize, level: usize, history: &'a [S]) -> Self {
        debug_assert_eq!(history.len(), (level + 1) * m0);
        Self { m0, level, history }
    }

    /// A path with no observable coordinates.
    pub fn deterministic(level: usize) -> Self {
        Self {
            m0: 0,
            level,
            history: &[],
        }
    }

    pub fn m0(&self) -> usize {
        self.m0
    }

    pub fn level(&self) -> usize {
        self.level
    }

    /// Observed coordinates at the current level.
    pub fn w(&self) -> &'a [S] {
        self.w_at(self.level)
    }

    pub fn w_at(&self, level: usize) -> &'a [S] {
        assert!(level <= self.level, "path prefix ends at level {}", self.level);
        &self.history[level * self.m0..(level + 1) * self.m0]
    }
}

/// Observed history of node `(k, index)`, the layout [`ObservedPath::new`] takes.
pub fn path_history<S: Real>(tree: &PathTree<S>, m0: usize, k: usize, index: usize) -> Vec<S> {
    let mut out = Vec::with_capacity((k + 1) * m0);
    for j in 0..=k {
        let a = tree.ancestor(k, index, j);
        out.extend_from_slice(&tree.position(j, a)[..m0]);
    }
    out
}

/// `f(t, x, control entries, path)`.
pub type RunningCost<S> = Arc<dyn Fn(S, &[S], &[S], &ObservedPath<'_, S>) -> S + Send + Sync>;
/// `G(x, path)`.
pub type TerminalCost<S> = Arc<dyn Fn(&[S], &ObservedPath<'_, S>) -> S + Send + Sync>;
/// `g(t, x)`.
pub type Dominating<S> = Arc<dyn Fn(S, &[S]) -> S + Send + Sync>;

/// Cost data of a control problem together with its default control set.
#[derive(Clone)]
pub struct CostSpec<S> {
    pub name: String,
    pub d: usize,
    pub m: usize,
    /// Number of leading Wiener coordinates `f` and `G` may depend on.
    pub m0: usize,
    pub running: RunningCost<S>,
    pub terminal: TerminalCost<S>,
    pub dominating: Dominating<S>,
    pub holder_l: S,
    pub alpha: S,
    pub controls: ControlSet<S>,
}

impl<S> fmt::Debug for CostSpec<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CostSpec")
            .field("name", &self.name)
            .field("d", &self.d)
            .field("m", &self.m)
            .field("m0", &self.m0)
            .finish_non_exhaustive()
    }
}

impl<S: Real> CostSpec<S> {
    #[inline]
    pub fn f(&self, t: S, x: &[S], control: &[S], path: &ObservedPath<'_, S>) -> S {
        (self.running)(t, x, control, path)
    }

    #[inline]
    pub fn g_terminal(&self, x: &[S], path: &ObservedPath<'_, S>) -> S {
        (self.terminal)(x, path)
    }

    pub fn is_markovian(&self) -> bool {
        self.m0 == 0
    }

    /// Hölder constant of `V`, `L (1 + T)`.
    pub fn value_holder_constant(&self, horizon: S) -> S {
        self.holder_l * (S::one() + horizon)
    }

    /// Checks dimensions against a control set and a tree.
    pub fn check_compatible(&self, controls: &ControlSet<S>, m: usize) -> Result<()> {
        if controls.d() != self.d || controls.m() != self.m {
            return Err(Error::config(
                "controls",
                format!(
                    "control matrices are {}x{}, problem `{}` needs {}x{}",
                    controls.d(),
                    controls.m(),
                    self.name,
                    self.d,
                    self.m
                ),
            ));
        }
        if m != self.m {
            return Err(Error::config(
                "m",
                format!("tree dimension {m} differs from the problem's m = {}", self.m),
            ));
        }
        Ok(())
    }

    /// Same problem, different control set.
    pub fn with_controls(mut self, controls: ControlSet<S>) -> Result<Self> {
        self.check_compatible(&controls, self.m)?;
        self.controls = controls;
        Ok(self)
    }
}

fn gaussian<S: Real>(x: &[S]) -> S {
    (-x.iter().map(|v| *v * *v).sum::<S>() / S::lit(2.0)).exp()
}

/// Built-in problem by name.
pub fn builtin_problem<S: Real>(name: &str) -> Result<CostSpec<S>> {
    let zero_f: RunningCost<S> = Arc::new(|_, _, _, _| S::zero());
    let zero_g: TerminalCost<S> = Arc::new(|_, _| S::zero());
    let gauss_g: TerminalCost<S> = Arc::new(|x, _| gaussian(x));
    let one_control = ControlSet::scalars(&[S::one()])?;
    let spec = match name {
        "zero" => CostSpec {
            name: name.into(),
            d: 1,
            m: 1,
            m0: 0,
            running: zero_f,
            terminal: zero_g,
            dominating: Arc::new(|_, _| S::zero()),
            holder_l: S::one(),
            alpha: S::one(),
            controls: one_control,
        },
        "constant_running" => CostSpec {
            name: name.into(),
            d: 1,
            m: 1,
            m0: 0,
            running: Arc::new(|_, _, _, _| S::one()),
            terminal: zero_g,
            dominating: Arc::new(|_, _| S::one()),
            holder_l: S::one(),
            alpha: S::one(),
            controls: one_control,
        },
        "gaussian_terminal" => CostSpec {
            name: name.into(),
            d: 1,
            m: 1,
            m0: 0,
            running: zero_f,
            terminal: gauss_g,
            dominating: Arc::new(|_, _| S::zero()),
            holder_l: S::lit(0.61),
            alpha: S::one(),
            controls: one_control,
        },
        // Quadratic control cost against a Gaussian reward for diffusing.
        "two_control_1d" => CostSpec {
            name: name.into(),
            d: 1,
            m: 1,
            m0: 0,
            running: Arc::new(|_, _, v, _| v.iter().map(|s| *s * *s).sum()),
            terminal: gauss_g,
            dominating: Arc::new(|_, _| S::one()),
            holder_l: S::lit(0.61),
            alpha: S::one(),
            controls: ControlSet::scalars(&[S::lit(0.5), S::one()])?,
        },
        // Running cost modulated by the first Wiener coordinate only.
        "partial_nonmarkov" => CostSpec {
            name: name.into(),
            d: 1,
            m: 2,
            m0: 1,
            running: Arc::new(|_, x: &[S], _, path: &ObservedPath<'_, S>| {
                gaussian(x) * (S::one() + path.w()[0].tanh())
            }),
            terminal: gauss_g,
            dominating: Arc::new(|_, x| S::lit(2.0) * gaussian(x)),
            holder_l: S::lit(1.85),
            alpha: S::one(),
            controls: ControlSet::new(
                1,
                2,
                vec![vec![S::one(), S::lit(0.5)], vec![S::lit(0.5), S::one()]],
            )?,
        },
        other => return Err(Error::UnknownProblem(other.to_string())),
    };
    Ok(spec)
}

/// Random draws for [`validate_assumption_a1`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingPlan<S> {
    pub samples: usize,
    pub seed: u64,
    /// `x` drawn uniformly from `[-radius, radius]^d`.
    pub radius: S,
    pub horizon: S,
    /// Length of the random observed path prefixes.
    pub path_steps: usize,
}

impl<S: Real> Default for SamplingPlan<S> {
    fn default() -> Self {
        Self {
            samples: 10_000,
            seed: 7,
            radius: S::lit(6.0),
            horizon: S::one(),
            path_steps: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub kind: &'static str,
    pub amount: f64,
    pub at: String,
}

/// Worst-case findings of the assumption check.
#[derive(Debug, Clone, PartialEq)]
pub struct A1Report {
    /// Most negative value of `f` or `G` seen (0 if none).
    pub min_value: f64,
    /// Largest `f - g` seen.
    pub max_domination_excess: f64,
    /// Largest `(|df| + |dG|) / |dx|^alpha`.
    pub max_holder_ratio: f64,
    pub violations: Vec<Violation>,
}

impl A1Report {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Samples nonnegativity, domination `f <= g` and the combined Hölder
/// condition `|f(x1) - f(x2)| + |G(x1) - G(x2)| <= L |x1 - x2|^alpha`.
pub fn validate_assumption_a1<S: Real>(spec: &CostSpec<S>, plan: &SamplingPlan<S>) -> A1Report {
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let d = spec.d;
    let m0 = spec.m0;
    let steps = plan.path_steps.max(1);
    let sqrt_dt = (plan.horizon / S::from_count(steps)).sqrt();
    let mut min_value = 0.0f64;
    let mut max_excess = f64::NEG_INFINITY;
    let mut max_ratio = 0.0f64;
    let mut violations = Vec::new();
    let mut worst_neg: Option<Violation> = None;
    let mut worst_dom: Option<Violation> = None;
    let mut worst_hold: Option<Violation> = None;
    let controls = &spec.controls;
    let radius = plan.radius.as_f64();
    for s in 0..plan.samples {
        let level = rng.gen_range(0..=steps);
        let t = sqrt_dt * sqrt_dt * S::from_count(level);
        let mut history = vec![S::zero(); (level + 1) * m0];
        for l in 1..=level {
            for j in 0..m0 {
                let step = if rng.gen::<bool>() { sqrt_dt } else { -sqrt_dt };
                history[l * m0 + j] = history[(l - 1) * m0 + j] + step;
            }
        }
        let path = ObservedPath::new(m0, level, &history);
        let x1: Vec<S> = (0..d).map(|_| S::lit(rng.gen_range(-radius..=radius))).collect();
        let x2: Vec<S> = if rng.gen_bool(0.5) {
            // Nearby pairs probe the local Lipschitz constant.
            x1.iter().map(|v| *v + S::lit(rng.gen_range(-1e-3..=1e-3))).collect()
        } else {
            (0..d).map(|_| S::lit(rng.gen_range(-radius..=radius))).collect()
        };
        let u = rng.gen_range(0..controls.len());
        let v = controls.get(u);
        let f1 = spec.f(t, &x1, v, &path);
        let f2 = spec.f(t, &x2, v, &path);
        let g1 = spec.g_terminal(&x1, &path);
        let g2 = spec.g_terminal(&x2, &path);
        let at = format!("sample {s}: t={t}, x1={x1:?}, x2={x2:?}, control {u}");
        let lowest = f1.min(f2).min(g1).min(g2).as_f64();
        if lowest < min_value {
            min_value = lowest;
            worst_neg = Some(Violation {
                kind: "nonnegativity",
                amount: -lowest,
                at: at.clone(),
            });
        }
        let excess = (f1 - (spec.dominating)(t, &x1)).max(f2 - (spec.dominating)(t, &x2)).as_f64();
        if excess > max_excess {
            max_excess = excess;
            if excess > 0.0 {
                worst_dom = Some(Violation {
                    kind: "domination",
                    amount: excess,
                    at: at.clone(),
                });
            }
        }
        let dist = x1
            .iter()
            .zip(&x2)
            .map(|(a, b)| (*a - *b) * (*a - *b))
            .sum::<S>()
            .sqrt();
        if dist > S::zero() {
            let ratio = (((f1 - f2).abs() + (g1 - g2).abs()) / dist.powf(spec.alpha)).as_f64();
            if ratio > max_ratio {
                max_ratio = ratio;
                if ratio > spec.holder_l.as_f64() {
                    worst_hold = Some(Violation {
                        kind: "holder",
                        amount: ratio - spec.holder_l.as_f64(),
                        at,
                    });
                }
            }
        }
    }
    violations.extend(worst_neg);
    violations.extend(worst_dom);
    violations.extend(worst_hold);
    A1Report {
        min_value,
        max_domination_excess: if max_excess.is_finite() { max_excess } else { 0.0 },
        max_holder_ratio: max_ratio,
        violations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{TimeGrid, DEFAULT_NODE_BUDGET};

    #[test]
    fn zero_problem_passes() {
        let spec = builtin_problem::<f64>("zero").unwrap();
        assert!(validate_assumption_a1(&spec, &SamplingPlan::default()).passed());
    }

    #[test]
    fn negative_running_cost_fails() {
        let mut spec = builtin_problem::<f64>("zero").unwrap();
        spec.running = Arc::new(|_, _, _, _| -1.0);
        let report = validate_assumption_a1(&spec, &SamplingPlan::default());
        assert!(!report.passed());
        assert!(report.violations.iter().any(|v| v.kind == "nonnegativity"));
    }

    #[test]
    fn gaussian_holder_ratio_below_half_root_e() {
        let spec = builtin_problem::<f64>("gaussian_terminal").unwrap();
        let report = validate_assumption_a1(&spec, &SamplingPlan::default());
        assert!(report.passed(), "{report:?}");
        assert!(report.max_holder_ratio <= (-0.5f64).exp() + 1e-9);
        assert!(report.max_holder_ratio > 0.55);
    }

    #[test]
    fn too_small_constant_is_flagged() {
        let mut spec = builtin_problem::<f64>("gaussian_terminal").unwrap();
        spec.holder_l = 0.5;
        let report = validate_assumption_a1(&spec, &SamplingPlan::default());
        assert!(report.violations.iter().any(|v| v.kind == "holder"));
    }

    #[test]
    fn every_builtin_passes() {
        for name in BUILTIN_NAMES {
            let spec = builtin_problem::<f64>(name).unwrap();
            let report = validate_assumption_a1(&spec, &SamplingPlan::default());
            assert!(report.passed(), "{name}: {report:?}");
        }
    }

    #[test]
    fn unknown_name() {
        assert!(matches!(builtin_problem::<f64>("nope"), Err(Error::UnknownProblem(_))));
    }

    #[test]
    fn partial_nonmarkov_ignores_second_coordinate() {
        let spec = builtin_problem::<f64>("partial_nonmarkov").unwrap();
        let tree = PathTree::build(2, TimeGrid::new(1.0, 3).unwrap(), DEFAULT_NODE_BUDGET).unwrap();
        // Nodes with equal first-coordinate bits at every step.
        for k in 0..=3 {
            for a in 0..tree.level_len(k) {
                for b in 0..tree.level_len(k) {
                    let mask: usize = (0..k).map(|s| 1usize << (2 * s)).sum();
                    if a & mask != b & mask {
                        continue;
                    }
                    let ha = path_history(&tree, 1, k, a);
                    let hb = path_history(&tree, 1, k, b);
                    let pa = ObservedPath::new(1, k, &ha);
                    let pb = ObservedPath::new(1, k, &hb);
                    for x in [-1.0, 0.0, 0.7] {
                        let v = spec.controls.get(0);
                        assert_eq!(spec.f(0.0, &[x], v, &pa), spec.f(0.0, &[x], v, &pb));
                        assert_eq!(spec.g_terminal(&[x], &pa), spec.g_terminal(&[x], &pb));
                    }
                }
            }
        }
    }
}
