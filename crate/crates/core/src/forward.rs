//! Solution of the six-component state system and cost evaluation.

use crate::assembly::{apply_trace_consistency, cost_nodes, cost_view, rhs_bundle, Fields, Snapshot};
use crate::error::{Error, Result};
use crate::jacobian::rhs_state_jacobian;
use crate::kernels::{CostId, Problem};
use crate::mesh::Mesh;
use crate::state::{sup_distance, ControlBundle, StateBundle};

/// Nonlinear solver used for the state (and co-state) systems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolverMethod {
    /// Relaxed Jacobi fixed-point sweeps.
    Picard,
    /// Newton on the residual with the analytic Jacobian; direct linear
    /// solve for the co-state.
    #[default]
    Newton,
}

impl SolverMethod {
    pub fn parse(s: &str) -> Option<SolverMethod> {
        match s {
            "picard" => Some(SolverMethod::Picard),
            "newton" => Some(SolverMethod::Newton),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SolverMethod::Picard => "picard",
            SolverMethod::Newton => "newton",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub tol: f64,
    pub relax: f64,
    pub max_iter: usize,
    pub divergence_guard: f64,
    pub method: SolverMethod,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tol: 1e-10,
            relax: 1.0,
            max_iter: 500,
            divergence_guard: 1e8,
            method: SolverMethod::Newton,
        }
    }
}

impl SolverConfig {
    pub fn picard() -> SolverConfig {
        SolverConfig {
            method: SolverMethod::Picard,
            ..SolverConfig::default()
        }
    }

    pub fn with_tol(mut self, tol: f64) -> SolverConfig {
        self.tol = tol;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.relax > 0.0 && self.relax <= 1.0) {
            return Err(Error::Config(format!("relax must lie in (0, 1], got {}", self.relax)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iter < 1 {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        if !(self.divergence_guard > 0.0) {
            return Err(Error::Config("divergence_guard must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    pub final_residual: f64,
    pub converged: bool,
    pub residual_history: Vec<f64>,
}

impl SolveReport {
    pub(crate) fn from_history(history: Vec<f64>, tol: f64) -> SolveReport {
        let final_residual = *history.last().unwrap_or(&f64::INFINITY);
        SolveReport {
            iterations: history.len(),
            final_residual,
            converged: final_residual <= tol,
            residual_history: history,
        }
    }
}

fn check_inputs(problem: &Problem, mesh: &Mesh, state: &StateBundle, controls: &ControlBundle) -> Result<()> {
    state.check_shape(mesh, problem.n)?;
    controls.check_shape(mesh, problem.m_u, problem.m_w)
}

pub(crate) fn guard(state: &StateBundle, limit: f64) -> Result<()> {
    if let Some(b) = state.first_non_finite() {
        return Err(Error::Divergence {
            block: b.name().to_string(),
            value: f64::NAN,
            guard: limit,
        });
    }
    let (mut worst, mut name) = (0.0f64, "phi");
    for b in crate::state::StateBlock::ALL {
        let m = state.block(b).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if m > worst {
            worst = m;
            name = b.name();
        }
    }
    if worst > limit {
        return Err(Error::Divergence {
            block: name.to_string(),
            value: worst,
            guard: limit,
        });
    }
    Ok(())
}

/// Assembled right-hand side of all six equations at `state`.
pub fn rhs_all(problem: &Problem, mesh: &Mesh, state: &StateBundle, controls: &ControlBundle) -> Result<StateBundle> {
    check_inputs(problem, mesh, state, controls)?;
    rhs_bundle(problem, mesh, &Snapshot::new(mesh, state, controls)?)
}

/// One relaxed Jacobi sweep. Returns the new state and the pre-relaxation
/// residual `sup |RHS(state) - state|`.
pub fn picard_step(
    problem: &Problem,
    mesh: &Mesh,
    state: &StateBundle,
    controls: &ControlBundle,
    cfg: &SolverConfig,
) -> Result<(StateBundle, f64)> {
    let rhs = rhs_all(problem, mesh, state, controls)?;
    guard(&rhs, f64::INFINITY)?;
    let residual = sup_distance(&rhs, state)?;
    let mut next = if cfg.relax == 1.0 {
        rhs
    } else {
        let mut s = state.clone();
        s.scale(1.0 - cfg.relax);
        s.axpy(cfg.relax, &rhs);
        s
    };
    apply_trace_consistency(mesh, &mut next);
    Ok((next, residual))
}

/// Solves the state system from the zero bundle.
pub fn solve_forward(
    problem: &Problem,
    mesh: &Mesh,
    controls: &ControlBundle,
    cfg: &SolverConfig,
) -> Result<(StateBundle, SolveReport)> {
    cfg.validate()?;
    let zero = StateBundle::zeros(mesh, problem.n);
    check_inputs(problem, mesh, &zero, controls)?;
    match cfg.method {
        SolverMethod::Picard => solve_picard(problem, mesh, controls, cfg, zero),
        SolverMethod::Newton => solve_newton(problem, mesh, controls, cfg, zero),
    }
}

fn solve_picard(
    problem: &Problem,
    mesh: &Mesh,
    controls: &ControlBundle,
    cfg: &SolverConfig,
    mut state: StateBundle,
) -> Result<(StateBundle, SolveReport)> {
    let mut history = Vec::new();
    for _ in 0..cfg.max_iter {
        let (next, res) = picard_step(problem, mesh, &state, controls, cfg)?;
        guard(&next, cfg.divergence_guard)?;
        history.push(res);
        state = next;
        if res <= cfg.tol {
            break;
        }
    }
    Ok((state, SolveReport::from_history(history, cfg.tol)))
}

fn residual_of(problem: &Problem, mesh: &Mesh, state: &StateBundle, controls: &ControlBundle) -> Result<(StateBundle, f64)> {
    let rhs = rhs_bundle(problem, mesh, &Snapshot::new(mesh, state, controls)?)?;
    guard(&rhs, f64::INFINITY)?;
    let r = sup_distance(&rhs, state)?;
    Ok((rhs, r))
}

fn solve_newton(
    problem: &Problem,
    mesh: &Mesh,
    controls: &ControlBundle,
    cfg: &SolverConfig,
    mut state: StateBundle,
) -> Result<(StateBundle, SolveReport)> {
    let (mut rhs, mut res) = residual_of(problem, mesh, &state, controls)?;
    let mut history = vec![res];
    while res > cfg.tol && history.len() < cfg.max_iter {
        let snap = Snapshot::new(mesh, &state, controls)?;
        let mut jac = rhs_state_jacobian(problem, mesh, &snap, false)?;
        jac.add_identity(-1.0);
        let r: Vec<f64> = rhs.pack().iter().zip(state.pack()).map(|(a, b)| b - a).collect();
        let delta = StateBundle::unpack(mesh, problem.n, &jac.solve(&r)?)?;
        let mut step = 1.0;
        loop {
            let mut trial = state.clone();
            trial.axpy(step, &delta);
            guard(&trial, cfg.divergence_guard)?;
            let (trial_rhs, trial_res) = residual_of(problem, mesh, &trial, controls)?;
            history.push(trial_res);
            let improved = trial_res < res;
            if improved || step < 1.0 / 64.0 || history.len() >= cfg.max_iter {
                let stalled = !improved;
                state = trial;
                rhs = trial_rhs;
                res = trial_res;
                if stalled && step < 1.0 / 64.0 {
                    return Ok((state, SolveReport::from_history(history, cfg.tol)));
                }
                break;
            }
            step *= 0.5;
        }
    }
    Ok((state, SolveReport::from_history(history, cfg.tol)))
}

/// Discrete cost functional at a state.
pub fn eval_cost(problem: &Problem, mesh: &Mesh, state: &StateBundle, controls: &ControlBundle) -> Result<f64> {
    check_inputs(problem, mesh, state, controls)?;
    let snap = Snapshot::new(mesh, state, controls)?;
    eval_cost_snapshot(problem, mesh, &snap)
}

pub(crate) fn eval_cost_snapshot(problem: &Problem, mesh: &Mesh, snap: &Snapshot) -> Result<f64> {
    let fields = Fields::new(snap);
    let mut total = 0.0;
    for id in CostId::ALL {
        let Some(cf) = problem.cost(id) else { continue };
        for node in cost_nodes(mesh, id) {
            let v = cf.eval(&node.coords, &cost_view(&fields, id, &node));
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    source_name: format!("cost {}", id.name()),
                    node: format!("(k={}, l={})", node.k, node.l),
                });
            }
            total += node.weight * v;
        }
    }
    Ok(total)
}

/// `pack(RHS(state)) - pack(state)`.
pub fn residual_flat(problem: &Problem, mesh: &Mesh, state: &StateBundle, controls: &ControlBundle) -> Result<Vec<f64>> {
    let rhs = rhs_all(problem, mesh, state, controls)?;
    Ok(rhs.pack().iter().zip(state.pack()).map(|(a, b)| a - b).collect())
}

/// Convenience: forward solve followed by cost evaluation.
pub fn cost_of_controls(problem: &Problem, mesh: &Mesh, controls: &ControlBundle, cfg: &SolverConfig) -> Result<(f64, StateBundle, SolveReport)> {
    let (state, report) = solve_forward(problem, mesh, controls, cfg)?;
    if !report.converged {
        return Err(Error::NotConverged(format!(
            "residual {:e} after {} iterations",
            report.final_residual, report.iterations
        )));
    }
    let j = eval_cost(problem, mesh, &state, controls)?;
    Ok((j, state, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{make_model, CostFn, KernelFn, KernelId, ModelParams, Slot};
    use crate::mesh::build_mesh;
    use crate::state::StateBlock;

    fn zero_controls(mesh: &Mesh) -> ControlBundle {
        ControlBundle::zeros(mesh, 1, 1)
    }

    fn model(name: &str) -> Problem {
        make_model(&ModelParams::new(name)).unwrap()
    }

    /// Sup error of the interior columns against `exact(t, x)`.
    fn interior_error(mesh: &Mesh, s: &StateBundle, exact: impl Fn(f64, f64) -> f64) -> f64 {
        let mut e = 0.0f64;
        for i in 0..=mesh.nt {
            for j in 1..mesh.nx {
                e = e.max((s.phi[[i, j, 0]] - exact(mesh.t(i), mesh.x(j))).abs());
            }
        }
        e
    }

    #[test]
    fn zero_problem_converges_immediately() {
        let mesh = build_mesh(1.0, 6, 0.0, 1.0, 6).unwrap();
        let p = Problem::new("zero", 1, 1, 1);
        for cfg in [SolverConfig::default(), SolverConfig::picard()] {
            let (s, r) = solve_forward(&p, &mesh, &zero_controls(&mesh), &cfg).unwrap();
            assert_eq!(r.iterations, 1);
            assert!(r.converged);
            assert_eq!(s.sup_norm(), 0.0);
        }
        let zero = StateBundle::zeros(&mesh, 1);
        let (next, res) = picard_step(&p, &mesh, &zero, &zero_controls(&mesh), &SolverConfig::picard()).unwrap();
        assert_eq!(res, 0.0);
        assert_eq!(next, zero);
        assert!(residual_flat(&p, &mesh, &zero, &zero_controls(&mesh)).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn first_sweep_of_volterra_exp() {
        let mesh = build_mesh(1.0, 8, 0.0, 1.0, 5).unwrap();
        let p = model("volterra_exp");
        let zero = StateBundle::zeros(&mesh, 1);
        let (next, res) = picard_step(&p, &mesh, &zero, &zero_controls(&mesh), &SolverConfig::picard()).unwrap();
        assert_eq!(res, 1.0);
        assert_eq!(interior_error(&mesh, &next, |_, _| 1.0), 0.0);
    }

    #[test]
    fn relaxation_blends_iterates() {
        let mesh = build_mesh(1.0, 8, 0.0, 1.0, 5).unwrap();
        let p = model("volterra_exp");
        let zero = StateBundle::zeros(&mesh, 1);
        let cfg = SolverConfig { relax: 0.25, ..SolverConfig::picard() };
        let (next, _) = picard_step(&p, &mesh, &zero, &zero_controls(&mesh), &cfg).unwrap();
        assert_eq!(interior_error(&mesh, &next, |_, _| 0.25), 0.0);
    }

    #[test]
    fn volterra_exp_matches_exponential() {
        let mesh = build_mesh(1.0, 200, 0.0, 1.0, 4).unwrap();
        let p = model("volterra_exp");
        for cfg in [SolverConfig::default(), SolverConfig::picard()] {
            let (s, r) = solve_forward(&p, &mesh, &zero_controls(&mesh), &cfg).unwrap();
            assert!(r.converged, "{r:?}");
            let e = interior_error(&mesh, &s, |t, _| t.exp());
            assert!(e <= 1e-4, "error {e}");
        }
    }

    #[test]
    fn residual_at_sampled_exponential_is_quadrature_error() {
        let mesh = build_mesh(1.0, 200, 0.0, 1.0, 4).unwrap();
        let p = model("volterra_exp");
        let mut s = StateBundle::zeros(&mesh, 1);
        for i in 0..=mesh.nt {
            for j in 1..mesh.nx {
                s.phi[[i, j, 0]] = mesh.t(i).exp();
            }
        }
        let r = residual_flat(&p, &mesh, &s, &zero_controls(&mesh)).unwrap();
        let sup = r.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(sup <= 1e-4, "{sup}");
        assert!(sup > 0.0);
    }

    #[test]
    fn heat_matches_separable_solution() {
        let p = model("heat");
        let exact = |t: f64, x: f64| (-std::f64::consts::PI.powi(2) * t).exp() * (std::f64::consts::PI * x).sin();
        let mut errs = Vec::new();
        for n in [32, 64] {
            let mesh = build_mesh(1.0, n, 0.0, 1.0, n).unwrap();
            let (s, r) = solve_forward(&p, &mesh, &zero_controls(&mesh), &SolverConfig::default()).unwrap();
            assert!(r.converged, "{r:?}");
            errs.push(interior_error(&mesh, &s, exact));
        }
        assert!(errs[1] <= 2e-2, "{errs:?}");
        assert!(errs[0] / errs[1] >= 1.8, "{errs:?}");
    }

    #[test]
    fn converged_residual_is_below_tolerance() {
        let mesh = build_mesh(1.0, 8, 0.0, 1.0, 8).unwrap();
        let p = model("biload_demo");
        let controls = ControlBundle::from_fn(&mesh, 1, 1, |_, t, x, _| 0.2 * (t - x).sin());
        let cfg = SolverConfig::default().with_tol(1e-12);
        let (s, r) = solve_forward(&p, &mesh, &controls, &cfg).unwrap();
        assert!(r.converged);
        let sup = residual_flat(&p, &mesh, &s, &controls).unwrap().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(sup <= 1e-10, "{sup}");
    }

    #[test]
    fn picard_and_newton_agree() {
        let mesh = build_mesh(1.0, 8, 0.0, 1.0, 8).unwrap();
        let p = model("lq_volterra");
        let controls = ControlBundle::from_fn(&mesh, 1, 1, |_, t, x, _| 0.2 * (t + x).cos());
        let (a, ra) = solve_forward(&p, &mesh, &controls, &SolverConfig::default()).unwrap();
        let (b, rb) = solve_forward(&p, &mesh, &controls, &SolverConfig::picard()).unwrap();
        assert!(ra.converged && rb.converged);
        assert!(sup_distance(&a, &b).unwrap() <= 1e-9);
    }

    #[test]
    fn cost_of_unit_state_is_domain_measure() {
        let mesh = build_mesh(1.0, 7, 0.0, 1.0, 5).unwrap();
        let p = Problem::new("c", 1, 1, 1).with_cost(CostId::F1, CostFn::squared(Slot::Phi));
        let mut s = StateBundle::zeros(&mesh, 1);
        s.phi.fill(1.0);
        let j = eval_cost(&p, &mesh, &s, &zero_controls(&mesh)).unwrap();
        assert!((j - 1.0).abs() <= 1e-14, "{j}");
        let none = Problem::new("z", 1, 1, 1);
        assert_eq!(eval_cost(&none, &mesh, &s, &zero_controls(&mesh)).unwrap(), 0.0);
    }

    #[test]
    fn final_slice_cost_of_sine() {
        let mesh = build_mesh(1.0, 4, 0.0, 1.0, 64).unwrap();
        let p = Problem::new("c", 1, 1, 1).with_cost(CostId::F0, CostFn::squared(Slot::PhiT));
        let mut s = StateBundle::zeros(&mesh, 1);
        for j in 0..=mesh.nx {
            s.phi_t[[j, 0]] = (std::f64::consts::PI * mesh.x(j)).sin();
        }
        let j = eval_cost(&p, &mesh, &s, &zero_controls(&mesh)).unwrap();
        assert!((j - 0.5).abs() <= 5e-4, "{j}");
    }

    #[test]
    fn causality_of_volterra_problem() {
        let mesh = build_mesh(1.0, 20, 0.0, 1.0, 4).unwrap();
        let base = || {
            Problem::new("v", 1, 1, 1).with_kernel(
                KernelId::F1,
                KernelFn::scalar(|c, v| 0.5 * v.s(Slot::Phi) * (1.0 + c.s)).d(Slot::Phi, |c, _| 0.5 * (1.0 + c.s)),
            )
        };
        let a = base().with_kernel(KernelId::F0, KernelFn::scalar(|_, _| 1.0));
        let b = base().with_kernel(KernelId::F0, KernelFn::scalar(|c, _| 1.0 + if c.t > 0.5 { (c.t - 0.5) * 3.0 } else { 0.0 }));
        let cfg = SolverConfig::default();
        let (sa, _) = solve_forward(&a, &mesh, &zero_controls(&mesh), &cfg).unwrap();
        let (sb, _) = solve_forward(&b, &mesh, &zero_controls(&mesh), &cfg).unwrap();
        for i in 0..=mesh.nt {
            let d = (sa.phi[[i, 2, 0]] - sb.phi[[i, 2, 0]]).abs();
            if mesh.t(i) <= 0.5 {
                assert!(d <= 1e-14, "row {i} changed by {d}");
            } else {
                assert!(d > 0.0);
            }
        }
    }

    #[test]
    fn biloaded_couplings_are_live() {
        let mesh = build_mesh(1.0, 8, 0.0, 1.0, 8).unwrap();
        let full = model("biload_demo");
        let controls = ControlBundle::from_fn(&mesh, 1, 1, |_, t, x, _| 0.3 + 0.1 * (t * x).sin());
        let cfg = SolverConfig::default();
        let (s, _) = solve_forward(&full, &mesh, &controls, &cfg).unwrap();
        let mut no_f4 = full.clone();
        no_f4.set_kernel(KernelId::F4, None);
        let (s4, _) = solve_forward(&no_f4, &mesh, &controls, &cfg).unwrap();
        let d4 = s.block(StateBlock::Phi).iter().zip(s4.block(StateBlock::Phi).iter()).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        assert!(d4 > 1e-6, "{d4}");
        let mut no_g2 = full.clone();
        no_g2.set_kernel(KernelId::G2, None);
        let (s2, _) = solve_forward(&no_g2, &mesh, &controls, &cfg).unwrap();
        let d2 = s.phi_bd.iter().zip(s2.phi_bd.iter()).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        assert!(d2 > 1e-6, "{d2}");
    }

    #[test]
    fn forward_solve_is_bitwise_deterministic() {
        let mesh = build_mesh(1.0, 10, 0.0, 1.0, 10).unwrap();
        let p = model("forest_fire_minimal");
        let controls = ControlBundle::from_fn(&mesh, 1, 1, |_, t, x, _| 0.1 * (t + 2.0 * x).sin());
        let a = solve_forward(&p, &mesh, &controls, &SolverConfig::default()).unwrap().0.pack();
        let b = solve_forward(&p, &mesh, &controls, &SolverConfig::default()).unwrap().0.pack();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn invalid_config_and_shapes_are_rejected() {
        let mesh = build_mesh(1.0, 6, 0.0, 1.0, 6).unwrap();
        let p = model("volterra_exp");
        let bad = SolverConfig { relax: 0.0, ..SolverConfig::default() };
        assert!(matches!(solve_forward(&p, &mesh, &zero_controls(&mesh), &bad), Err(Error::Config(_))));
        let other = build_mesh(1.0, 7, 0.0, 1.0, 6).unwrap();
        assert!(matches!(solve_forward(&p, &mesh, &zero_controls(&other), &SolverConfig::default()), Err(Error::Shape { .. })));
    }

    #[test]
    fn blowup_hits_divergence_guard() {
        let mesh = build_mesh(1.0, 6, 0.0, 1.0, 6).unwrap();
        let p = Problem::new("blow", 1, 1, 1)
            .with_kernel(KernelId::F0, KernelFn::scalar(|_, v| 1.0 + 10.0 * v.s(Slot::Phi)).d(Slot::Phi, |_, _| 10.0));
        let err = solve_forward(&p, &mesh, &zero_controls(&mesh), &SolverConfig::picard()).unwrap_err();
        assert!(matches!(err, Error::Divergence { ref block, .. } if block == "phi"), "{err:?}");
    }

    #[test]
    fn nonfinite_kernel_is_named() {
        let mesh = build_mesh(1.0, 6, 0.0, 1.0, 6).unwrap();
        let p = Problem::new("nan", 1, 1, 1).with_kernel(KernelId::G0, KernelFn::scalar(|_, _| f64::NAN));
        let err = solve_forward(&p, &mesh, &zero_controls(&mesh), &SolverConfig::picard()).unwrap_err();
        assert!(err.to_string().contains("g0"), "{err}");
    }
}
