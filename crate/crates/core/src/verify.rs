//! Gradient oracles and discrete identity checks.
//!
//! * [`fd_directional`]: central differences of the reduced cost.
//! * [`dto_gradient`]: exact gradient of the discrete problem through the
//!   transposed state Jacobian.
//! * [`gradient_check`]: compares the co-state gradient with both.
//! * [`ibp_residual`], [`skew_adjoint_residual`]: summation-by-parts
//!   identities.
//! * [`refinement_study`]: observed orders of any of the above metrics.

use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adjoint::{adjoint_gradient, ControlGradient};
use crate::assembly::Snapshot;
use crate::error::{Error, Result};
use crate::forward::{cost_of_controls, solve_forward, SolverConfig};
use crate::jacobian::{cost_gradients, rhs_control_jacobian, rhs_state_jacobian};
use crate::kernels::{Problem, Slot};
use crate::linalg::solve_transposed;
use crate::mesh::{apply_stencil, curve_diff, CurveMesh, Mesh, Side, StencilKind};
use crate::state::{CoStateBundle, ControlBlock, ControlBundle, FlatIndex, StateBlock, StateBundle};

/// Largest flat state size for which the dense oracle is assembled.
pub const DTO_MAX_UNKNOWNS: usize = 1500;
/// Default central-difference step.
pub const FD_EPS: f64 = 1e-5;
/// Forward tolerance used inside finite differences.
pub const FD_TOL: f64 = 1e-12;
/// Absolute gap treated as agreement regardless of magnitude; covers the
/// roundoff floor of central differences when the derivative vanishes.
pub const ABS_FLOOR: f64 = 1e-10;

/// `|a - reference| / max(|reference|, 1e-12)`.
pub fn rel_gap(a: f64, reference: f64) -> f64 {
    (a - reference).abs() / reference.abs().max(1e-12)
}

fn agrees(a: f64, reference: f64, tol: f64) -> bool {
    rel_gap(a, reference) <= tol || (a - reference).abs() <= ABS_FLOOR
}

fn fd_config(cfg: &SolverConfig) -> SolverConfig {
    SolverConfig {
        tol: cfg.tol.min(FD_TOL),
        ..*cfg
    }
}

/// The control slot through which a block enters the problem.
pub fn control_slot(blk: ControlBlock) -> Slot {
    match blk {
        ControlBlock::U => Slot::U,
        ControlBlock::W => Slot::W,
        ControlBlock::U0 => Slot::U0,
        ControlBlock::UT => Slot::UT,
        ControlBlock::W0 => Slot::W0,
        ControlBlock::WT => Slot::WT,
    }
}

/// Blocks read by at least one kernel or cost integrand.
pub fn active_blocks(problem: &Problem) -> Vec<ControlBlock> {
    ControlBlock::ALL.into_iter().filter(|&b| problem.reads_slot(control_slot(b))).collect()
}

/// `[J(u + eps d) - J(u - eps d)] / (2 eps)` along `direction` in `blk`.
pub fn fd_directional(
    problem: &Problem,
    mesh: &Mesh,
    controls: &ControlBundle,
    blk: ControlBlock,
    direction: &ArrayView3<f64>,
    eps: f64,
    cfg: &SolverConfig,
) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    if direction.dim() != controls.block(blk).dim() {
        let (a, b, c) = controls.block(blk).dim();
        let (x, y, z) = direction.dim();
        return Err(Error::Shape {
            what: format!("direction for block {}", blk.name()),
            expected: vec![a, b, c],
            found: vec![x, y, z],
        });
    }
    let cfg = fd_config(cfg);
    let shifted = |s: f64| -> Result<f64> {
        let mut c = controls.clone();
        c.block_mut(blk).scaled_add(s, direction);
        Ok(cost_of_controls(problem, mesh, &c, &cfg)?.0)
    };
    let (jp, jm) = rayon::join(|| shifted(eps), || shifted(-eps));
    Ok((jp? - jm?) / (2.0 * eps))
}

/// Forward state and multipliers `Λ` of the discrete Lagrangian, solving
/// `(∂RHS/∂Φ - I)^T Λ = -∂J/∂Φ` densely.
fn dto_multipliers(problem: &Problem, mesh: &Mesh, controls: &ControlBundle, cfg: &SolverConfig) -> Result<(StateBundle, Vec<f64>)> {
    let size = FlatIndex::new(mesh, problem.n).len();
    if size > DTO_MAX_UNKNOWNS {
        return Err(Error::SizeLimit { size, limit: DTO_MAX_UNKNOWNS });
    }
    let cfg = fd_config(cfg);
    let (state, report) = solve_forward(problem, mesh, controls, &cfg)?;
    if !report.converged {
        return Err(Error::NotConverged(format!("forward residual {:e}", report.final_residual)));
    }
    let snap = Snapshot::new(mesh, &state, controls)?;
    let mut jr = rhs_state_jacobian(problem, mesh, &snap, true)?;
    jr.add_identity(-1.0);
    let (dj_ds, _) = cost_gradients(problem, mesh, &snap)?;
    let rhs: Vec<f64> = dj_ds.iter().map(|v| -v).collect();
    let lambda = solve_transposed(&jr.to_dense(), &rhs)?;
    Ok((state, lambda))
}

/// Discretize-then-optimize gradient: exact derivative of the discrete
/// reduced cost, returned as densities with respect to the block weights.
pub fn dto_gradient(problem: &Problem, mesh: &Mesh, controls: &ControlBundle, cfg: &SolverConfig) -> Result<ControlGradient> {
    let (state, lambda) = dto_multipliers(problem, mesh, controls, cfg)?;
    let snap = Snapshot::new(mesh, &state, controls)?;
    let (_, mut g) = cost_gradients(problem, mesh, &snap)?;
    let ju = rhs_control_jacobian(problem, mesh, &snap)?;
    for (c, gc) in g.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (r, l) in lambda.iter().enumerate() {
            acc += ju[(r, c)] * l;
        }
        *gc += acc;
    }
    let mut out = ControlBundle::unpack_like(controls, &g)?;
    for blk in ControlBlock::ALL {
        let mut v = out.block_mut(blk);
        for ((r, c, _), x) in v.indexed_iter_mut() {
            *x /= blk.weight(mesh, r, c);
        }
    }
    Ok(ControlGradient::from_controls(out))
}

/// Discrete multipliers as co-state densities. Multipliers of the boundary
/// columns of x-indexed blocks are folded into the boundary blocks, which
/// is where the co-state solver places them.
pub fn dto_costate(problem: &Problem, mesh: &Mesh, controls: &ControlBundle, cfg: &SolverConfig) -> Result<CoStateBundle> {
    let (_, lambda) = dto_multipliers(problem, mesh, controls, cfg)?;
    let n = problem.n;
    let idx = FlatIndex::new(mesh, n);
    let mut co = CoStateBundle::zeros(mesh, n);
    for (f, l) in lambda.iter().enumerate() {
        let (blk, r, c, a) = idx.locate(f);
        let bd = match blk {
            StateBlock::Phi => Some(StateBlock::PhiBd),
            StateBlock::Phi0 => Some(StateBlock::Phi0Bd),
            StateBlock::PhiT => Some(StateBlock::PhiTBd),
            _ => None,
        };
        match bd {
            Some(bd) if c == 0 || c == mesh.nx => {
                let side = usize::from(c != 0);
                co.block_mut(bd)[[r, side, a]] += l / bd.weight(mesh, r, side);
            }
            _ => co.block_mut(blk)[[r, c, a]] += l / blk.weight(mesh, r, c),
        }
    }
    Ok(co)
}

/// Residuals of the two summation-by-parts identities for a first-order
/// spatial slot and its time derivative.
///
/// With `a = grad_p`, `b = grad_pdot`, `v = delta_phi`, `n = -1, +1`:
///
/// ```text
/// r1 = ∫∫ a·v_x − ∫ Σ n·a·v + ∫∫ a_x·v
/// r2 = ∫∫ b·v_tx − [Σ n·b·v]_0^T + [∫ b_x·v]_0^T + ∫ Σ n·b_t·v − ∫∫ b_tx·v
/// ```
///
/// All integrals use the mesh trapezoid rules and all derivatives the mesh
/// stencils.
pub fn ibp_residual(mesh: &Mesh, grad_p: &ArrayView2<f64>, grad_pdot: &ArrayView2<f64>, delta_phi: &ArrayView2<f64>) -> Result<(f64, f64)> {
    let shape = (mesh.nt + 1, mesh.nx + 1);
    for (name, f) in [("grad_p", grad_p), ("grad_pdot", grad_pdot), ("delta_phi", delta_phi)] {
        if f.dim() != shape {
            return Err(Error::Shape {
                what: name.into(),
                expected: vec![shape.0, shape.1],
                found: vec![f.nrows(), f.ncols()],
            });
        }
    }
    let lift = |f: &ArrayView2<f64>| f.to_owned().insert_axis(ndarray::Axis(2));
    let d = |f: &Array3<f64>, k| -> Result<Array2<f64>> { Ok(apply_stencil(mesh, k, f)?.remove_axis(ndarray::Axis(2))) };
    let (a, b, v) = (lift(grad_p), lift(grad_pdot), lift(delta_phi));
    let (a, b, v2) = (a, b, v.clone());
    let vx = d(&v, StencilKind::Dx)?;
    let vtx = d(&v, StencilKind::Dtx)?;
    let ax = d(&a, StencilKind::Dx)?;
    let bx = d(&b, StencilKind::Dx)?;
    let bt = d(&b, StencilKind::Dt)?;
    let btx = d(&b, StencilKind::Dtx)?;
    let (a, b, v) = (a.remove_axis(ndarray::Axis(2)), b.remove_axis(ndarray::Axis(2)), v2.remove_axis(ndarray::Axis(2)));
    let qq = |f: &dyn Fn(usize, usize) -> f64| -> f64 {
        let mut s = 0.0;
        for i in 0..=mesh.nt {
            for j in 0..=mesh.nx {
                s += mesh.wt(i) * mesh.wx(j) * f(i, j);
            }
        }
        s
    };
    let qx = |i: usize, f: &dyn Fn(usize, usize) -> f64| -> f64 { (0..=mesh.nx).map(|j| mesh.wx(j) * f(i, j)).sum() };
    let bsum = |i: usize, f: &dyn Fn(usize, usize) -> f64| -> f64 {
        Side::BOTH.iter().map(|&s| s.normal() * f(i, mesh.boundary_column(s))).sum()
    };
    let qt = |f: &dyn Fn(usize) -> f64| -> f64 { (0..=mesh.nt).map(|i| mesh.wt(i) * f(i)).sum() };

    let r1 = qq(&|i, j| a[[i, j]] * vx[[i, j]]) - qt(&|i| bsum(i, &|i, j| a[[i, j]] * v[[i, j]]))
        + qq(&|i, j| ax[[i, j]] * v[[i, j]]);
    let nt = mesh.nt;
    let r2 = qq(&|i, j| b[[i, j]] * vtx[[i, j]]) - (bsum(nt, &|i, j| b[[i, j]] * v[[i, j]]) - bsum(0, &|i, j| b[[i, j]] * v[[i, j]]))
        + (qx(nt, &|i, j| bx[[i, j]] * v[[i, j]]) - qx(0, &|i, j| bx[[i, j]] * v[[i, j]]))
        + qt(&|i| bsum(i, &|i, j| bt[[i, j]] * v[[i, j]]))
        - qq(&|i, j| btx[[i, j]] * v[[i, j]]);
    Ok((r1, r2))
}

/// `Σ_k [psi_k (D phi)_k + (D psi)_k phi_k] ds` on a closed curve.
pub fn skew_adjoint_residual(curve: &CurveMesh, psi: &[f64], phi: &[f64]) -> Result<f64> {
    let dphi = curve_diff(curve, phi)?;
    let dpsi = curve_diff(curve, psi)?;
    Ok((0..curve.m).map(|k| psi[k] * dphi[k] + dpsi[k] * phi[k]).sum::<f64>() * curve.ds)
}

/// Smooth pseudorandom field: a sum of three damped cosine modes with
/// seeded amplitudes, frequencies and phases.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothDirection {
    modes: Vec<[f64; 4]>,
}

impl SmoothDirection {
    pub fn new(seed: u64) -> SmoothDirection {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let modes = (1..=3)
            .map(|m| {
                [
                    rng.random_range(-1.0..1.0) / m as f64,
                    m as f64 * std::f64::consts::PI * rng.random_range(0.5..1.0),
                    rng.random_range(0.0..3.0),
                    rng.random_range(0.0..std::f64::consts::TAU),
                ]
            })
            .collect();
        SmoothDirection { modes }
    }

    pub fn eval(&self, t: f64, x: f64) -> f64 {
        self.modes.iter().map(|[a, kx, kt, ph]| a * (kx * x + kt * t + ph).cos()).sum()
    }

    /// The field sampled on the nodes of `blk`.
    pub fn sample(&self, mesh: &Mesh, blk: ControlBlock, dim: usize) -> Array3<f64> {
        let (rows, cols) = blk.grid(mesh);
        Array3::from_shape_fn((rows, cols, dim), |(r, c, k)| {
            let (t, x) = blk.coords(mesh, r, c);
            self.eval(t, x + 0.37 * k as f64)
        })
    }
}

/// Seed of direction `d` for block `blk`.
pub fn direction_seed(seed: u64, blk: ControlBlock, d: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(97 * blk as u64 + 7919 * d as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    pub n_dirs: usize,
    pub seed: u64,
    pub eps: f64,
    /// Relative adjoint-vs-FD threshold.
    pub adjoint_tol: f64,
    /// Relative DTO-vs-FD threshold.
    pub dto_tol: f64,
    /// Whether to run the DTO oracle when the mesh is small enough.
    pub use_dto: bool,
    pub solver: SolverConfig,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            n_dirs: 5,
            seed: 0,
            eps: FD_EPS,
            adjoint_tol: 1e-2,
            dto_tol: 1e-5,
            use_dto: true,
            solver: SolverConfig::default(),
        }
    }
}

/// One direction of one control block.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckRow {
    pub block: ControlBlock,
    pub direction: usize,
    pub seed: u64,
    pub fd: f64,
    pub adjoint: f64,
    pub dto: Option<f64>,
    pub rel_adjoint: f64,
    pub rel_dto: Option<f64>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub nt: usize,
    pub nx: usize,
    pub adjoint_tol: f64,
    pub dto_tol: f64,
    pub rows: Vec<GradCheckRow>,
    pub passed: bool,
}

impl GradCheckReport {
    /// Blocks with at least one failing direction.
    pub fn failing_blocks(&self) -> Vec<ControlBlock> {
        let mut v: Vec<ControlBlock> = self.rows.iter().filter(|r| !r.pass).map(|r| r.block).collect();
        v.dedup();
        v
    }

    pub fn max_rel_adjoint(&self) -> f64 {
        self.rows.iter().fold(0.0, |m, r| m.max(r.rel_adjoint))
    }

    pub fn max_rel_dto(&self) -> Option<f64> {
        self.rows.iter().filter_map(|r| r.rel_dto).reduce(f64::max)
    }
}

/// Co-state gradient vs finite differences vs (when small) the DTO oracle
/// along `n_dirs` seeded smooth directions per active block.
pub fn gradient_check(problem: &Problem, mesh: &Mesh, controls: &ControlBundle, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    if opts.n_dirs < 1 {
        return Err(Error::Config("n_dirs must be at least 1".into()));
    }
    let adj = adjoint_gradient(problem, mesh, controls, &opts.solver)?;
    let small = FlatIndex::new(mesh, problem.n).len() <= DTO_MAX_UNKNOWNS;
    let dto = if opts.use_dto && small {
        Some(dto_gradient(problem, mesh, controls, &opts.solver)?)
    } else {
        None
    };
    let mut rows = Vec::new();
    for blk in active_blocks(problem) {
        let dim = controls.block(blk).dim().2;
        for d in 0..opts.n_dirs {
            let seed = direction_seed(opts.seed, blk, d);
            let dir = SmoothDirection::new(seed).sample(mesh, blk, dim);
            let fd = fd_directional(problem, mesh, controls, blk, &dir.view(), opts.eps, &opts.solver)?;
            let adjoint = adj.gradient.pairing(mesh, blk, &dir.view());
            let dto_val = dto.as_ref().map(|g| g.pairing(mesh, blk, &dir.view()));
            let rel_adjoint = rel_gap(adjoint, fd);
            let rel_dto = dto_val.map(|v| rel_gap(v, fd));
            let pass = agrees(adjoint, fd, opts.adjoint_tol) && dto_val.is_none_or(|v| agrees(v, fd, opts.dto_tol));
            rows.push(GradCheckRow {
                block: blk,
                direction: d,
                seed,
                fd,
                adjoint,
                dto: dto_val,
                rel_adjoint,
                rel_dto,
                pass,
            });
        }
    }
    let passed = rows.iter().all(|r| r.pass);
    Ok(GradCheckReport {
        nt: mesh.nt,
        nx: mesh.nx,
        adjoint_tol: opts.adjoint_tol,
        dto_tol: opts.dto_tol,
        rows,
        passed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefinementMetric {
    ForwardError,
    GradientGap,
    IbpResidual,
}

impl RefinementMetric {
    pub fn parse(s: &str) -> Option<RefinementMetric> {
        match s {
            "forward_error" => Some(RefinementMetric::ForwardError),
            "gradient_gap" => Some(RefinementMetric::GradientGap),
            "ibp_residual" => Some(RefinementMetric::IbpResidual),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RefinementMetric::ForwardError => "forward_error",
            RefinementMetric::GradientGap => "gradient_gap",
            RefinementMetric::IbpResidual => "ibp_residual",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementRow {
    pub nt: usize,
    pub nx: usize,
    pub error: f64,
    /// `log2(e_{k-1} / e_k)`; absent on the first row.
    pub order: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementTable {
    pub metric: RefinementMetric,
    pub rows: Vec<RefinementRow>,
}

impl RefinementTable {
    pub fn from_errors(metric: RefinementMetric, levels: &[(usize, usize, f64)]) -> RefinementTable {
        let mut rows: Vec<RefinementRow> = Vec::new();
        for &(nt, nx, error) in levels {
            let order = rows.last().map(|r| (r.error / error).log2());
            rows.push(RefinementRow { nt, nx, error, order });
        }
        RefinementTable { metric, rows }
    }

    pub fn min_order(&self) -> Option<f64> {
        self.rows.iter().filter_map(|r| r.order).reduce(f64::min)
    }

    /// Whether the metric decreases monotonically across all levels.
    pub fn decreasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].error < w[0].error)
    }
}

pub type FieldFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
pub type ControlFn = Arc<dyn Fn(ControlBlock, f64, f64, usize) -> f64 + Send + Sync>;

/// Inputs shared by every level of a refinement study.
#[derive(Clone)]
pub struct StudySetup {
    /// Control profile evaluated at each level's nodes.
    pub controls: ControlFn,
    /// Exact first state component, for `ForwardError`.
    pub reference: Option<FieldFn>,
    pub check: GradCheckOptions,
}

impl Default for StudySetup {
    fn default() -> Self {
        StudySetup {
            controls: Arc::new(|_, _, _, _| 0.0),
            reference: None,
            check: GradCheckOptions {
                use_dto: false,
                ..GradCheckOptions::default()
            },
        }
    }
}

/// Largest adjoint-vs-FD relative gap over all active blocks and directions.
pub fn gradient_gap(problem: &Problem, mesh: &Mesh, controls: &ControlBundle, opts: &GradCheckOptions) -> Result<f64> {
    let opts = GradCheckOptions { use_dto: false, ..opts.clone() };
    Ok(gradient_check(problem, mesh, controls, &opts)?.max_rel_adjoint())
}

/// Smooth fields used by the integration-by-parts metric.
pub fn ibp_fields(mesh: &Mesh) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let f = |g: &dyn Fn(f64, f64) -> f64| Array2::from_shape_fn((mesh.nt + 1, mesh.nx + 1), |(i, j)| g(mesh.t(i), mesh.x(j)));
    (
        f(&|t, x| (1.3 * x + 0.4).cos() * (1.0 + 0.5 * t)),
        f(&|t, x| (0.9 * x - 0.7 * t).sin() + 0.3 * x * t),
        f(&|t, x| (2.0 * x + t).sin() + 0.5 * (x - 0.2 * t).cos()),
    )
}

/// Sup error of the interior columns of the first state component.
fn forward_error(problem: &Problem, mesh: &Mesh, controls: &ControlBundle, cfg: &SolverConfig, exact: &FieldFn) -> Result<f64> {
    let (_, state, _) = cost_of_controls(problem, mesh, controls, cfg)?;
    let mut e = 0.0f64;
    for i in 0..=mesh.nt {
        for j in 1..mesh.nx {
            e = e.max((state.phi[[i, j, 0]] - exact(mesh.t(i), mesh.x(j))).abs());
        }
    }
    Ok(e)
}

/// Runs `metric` on `base`, `base` refined twice as fine, and so on.
pub fn refinement_study(problem: &Problem, base: &Mesh, levels: usize, metric: RefinementMetric, setup: &StudySetup) -> Result<RefinementTable> {
    if levels < 3 {
        return Err(Error::Config(format!("refinement needs at least 3 levels, got {levels}")));
    }
    if metric == RefinementMetric::ForwardError && setup.reference.is_none() {
        return Err(Error::Config("forward_error needs an analytic reference".into()));
    }
    let mut errors = Vec::new();
    for lvl in 0..levels {
        let mesh = base.refined(1 << lvl)?;
        let ctrl = setup.controls.clone();
        let controls = ControlBundle::from_fn(&mesh, problem.m_u, problem.m_w, move |b, t, x, k| ctrl(b, t, x, k));
        let e = match metric {
            RefinementMetric::ForwardError => forward_error(problem, &mesh, &controls, &setup.check.solver, setup.reference.as_ref().unwrap())?,
            RefinementMetric::GradientGap => gradient_gap(problem, &mesh, &controls, &setup.check)?,
            RefinementMetric::IbpResidual => {
                let (a, b, v) = ibp_fields(&mesh);
                let (r1, r2) = ibp_residual(&mesh, &a.view(), &b.view(), &v.view())?;
                r1.abs().max(r2.abs())
            }
        };
        errors.push((mesh.nt, mesh.nx, e));
    }
    Ok(RefinementTable::from_errors(metric, &errors))
}

/// Closed-form first state component of the builtin models that have one,
/// at their default parameters and zero controls.
pub fn analytic_reference(model: &str) -> Option<FieldFn> {
    use std::f64::consts::PI;
    match model {
        "volterra_exp" => Some(Arc::new(|t: f64, _x: f64| t.exp())),
        "heat" => Some(Arc::new(|t: f64, x: f64| (-PI * PI * t).exp() * (PI * x).sin())),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{make_model, CostFn, CostId, KernelFn, KernelId, ModelParams};
    use crate::mesh::build_mesh;

    fn model(name: &str) -> Problem {
        make_model(&ModelParams::new(name)).unwrap()
    }

    fn controls(mesh: &Mesh) -> ControlBundle {
        ControlBundle::from_fn(mesh, 1, 1, |_, t, x, _| 0.3 * (1.5 * t - x).cos())
    }

    #[test]
    fn rel_gap_and_floor() {
        assert_eq!(rel_gap(1.1, 1.0), 0.10000000000000009);
        assert_eq!(rel_gap(1e-13, 0.0), 1e-13 / 1e-12);
        assert!(agrees(3e-11, 0.0, 1e-6));
        assert!(!agrees(1.0, 2.0, 0.1));
    }

    #[test]
    fn fd_of_quadratic_control_cost() {
        let mesh = build_mesh(1.0, 6, 0.0, 1.0, 6).unwrap();
        let p = Problem::new("reg", 1, 1, 1).with_cost(CostId::F1, CostFn::squared(Slot::U));
        let u = controls(&mesh);
        let dir = SmoothDirection::new(4).sample(&mesh, ControlBlock::U, 1);
        let fd = fd_directional(&p, &mesh, &u, ControlBlock::U, &dir.view(), FD_EPS, &SolverConfig::default()).unwrap();
        let two_u = u.u.mapv(|v| 2.0 * v);
        let exact = ControlGradient::from_controls(ControlBundle { u: two_u, ..u.clone() }).pairing(&mesh, ControlBlock::U, &dir.view());
        assert!((fd - exact).abs() <= 1e-9 * exact.abs().max(1.0), "{fd} vs {exact}");
    }

    #[test]
    fn fd_rejects_bad_input() {
        let mesh = build_mesh(1.0, 4, 0.0, 1.0, 4).unwrap();
        let p = model("lq_volterra");
        let u = controls(&mesh);
        let dir = Array3::zeros((5, 5, 1));
        let cfg = SolverConfig::default();
        assert!(matches!(fd_directional(&p, &mesh, &u, ControlBlock::U, &dir.view(), 0.0, &cfg), Err(Error::Config(_))));
        let wrong = Array3::zeros((2, 2, 1));
        assert!(matches!(fd_directional(&p, &mesh, &u, ControlBlock::U, &wrong.view(), 1e-5, &cfg), Err(Error::Shape { .. })));
    }

    fn dto_vs_fd(name: &str, n: usize) -> f64 {
        let mesh = build_mesh(1.0, n, 0.0, 1.0, n).unwrap();
        let p = model(name);
        let u = controls(&mesh);
        let cfg = SolverConfig::default();
        let g = dto_gradient(&p, &mesh, &u, &cfg).unwrap();
        let mut worst = 0.0f64;
        for blk in active_blocks(&p) {
            for d in 0..2 {
                let dir = SmoothDirection::new(direction_seed(1, blk, d)).sample(&mesh, blk, 1);
                let fd = fd_directional(&p, &mesh, &u, blk, &dir.view(), FD_EPS, &cfg).unwrap();
                let a = g.pairing(&mesh, blk, &dir.view());
                if (a - fd).abs() > ABS_FLOOR {
                    worst = worst.max(rel_gap(a, fd));
                }
            }
        }
        worst
    }

    #[test]
    fn dto_matches_fd_on_volterra() {
        let gap = dto_vs_fd("volterra_exp", 8);
        assert!(gap <= 1e-6, "{gap:e}");
    }

    #[test]
    fn dto_matches_fd_on_biload() {
        let gap = dto_vs_fd("biload_demo", 8);
        assert!(gap <= 1e-5, "{gap:e}");
    }

    #[test]
    fn dto_refuses_large_meshes() {
        let mesh = build_mesh(1.0, 40, 0.0, 1.0, 40).unwrap();
        let p = model("lq_volterra");
        let r = dto_gradient(&p, &mesh, &controls(&mesh), &SolverConfig::default());
        assert!(matches!(r, Err(Error::SizeLimit { .. })));
    }

    #[test]
    fn ibp_residual_cases() {
        let mesh = build_mesh(1.0, 10, 0.0, 2.0, 12).unwrap();
        let z = Array2::zeros((11, 13));
        assert_eq!(ibp_residual(&mesh, &z.view(), &z.view(), &z.view()).unwrap(), (0.0, 0.0));
        let a = Array2::from_elem((11, 13), 1.7);
        let v = Array2::from_shape_fn((11, 13), |(i, j)| 0.5 + 2.0 * mesh.x(j) - mesh.t(i));
        let (r1, r2) = ibp_residual(&mesh, &a.view(), &z.view(), &v.view()).unwrap();
        assert!(r1.abs() <= 1e-13 && r2 == 0.0, "{r1:e} {r2:e}");
        let bad = Array2::zeros((3, 3));
        assert!(ibp_residual(&mesh, &bad.view(), &z.view(), &z.view()).is_err());
    }

    #[test]
    fn ibp_residual_converges() {
        let p = Problem::new("none", 1, 1, 1);
        let base = build_mesh(1.0, 8, 0.0, 1.0, 8).unwrap();
        let t = refinement_study(&p, &base, 4, RefinementMetric::IbpResidual, &StudySetup::default()).unwrap();
        assert!(t.decreasing(), "{t:?}");
        assert!(t.min_order().unwrap() >= 1.0, "{t:?}");
    }

    #[test]
    fn skew_adjointness_on_closed_curve() {
        use rand::{Rng, SeedableRng};
        let c = CurveMesh::new(64, 2.5).unwrap();
        let ones = vec![1.0; 64];
        assert!(skew_adjoint_residual(&c, &ones, &ones).unwrap().abs() <= 1e-13);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        assert!(skew_adjoint_residual(&c, &a, &b).unwrap().abs() <= 1e-13);
        let w = std::f64::consts::TAU / c.length;
        let f: Vec<f64> = (0..64).map(|k| (3.0 * w * k as f64 * c.ds).sin()).collect();
        let g: Vec<f64> = (0..64).map(|k| (5.0 * w * k as f64 * c.ds).cos()).collect();
        assert!(skew_adjoint_residual(&c, &f, &g).unwrap().abs() <= 1e-13);
        assert!(skew_adjoint_residual(&c, &f[..10], &g).is_err());
    }

    #[test]
    fn smooth_directions_are_seeded() {
        let mesh = build_mesh(1.0, 4, 0.0, 1.0, 4).unwrap();
        let a = SmoothDirection::new(3).sample(&mesh, ControlBlock::W, 1);
        assert_eq!(a, SmoothDirection::new(3).sample(&mesh, ControlBlock::W, 1));
        assert_ne!(a, SmoothDirection::new(4).sample(&mesh, ControlBlock::W, 1));
        assert_ne!(direction_seed(0, ControlBlock::U, 0), direction_seed(0, ControlBlock::U, 1));
    }

    #[test]
    fn gradient_check_passes_on_lq_volterra() {
        let mesh = build_mesh(1.0, 8, 0.0, 1.0, 8).unwrap();
        let p = model("lq_volterra");
        let rep = gradient_check(&p, &mesh, &controls(&mesh), &GradCheckOptions::default()).unwrap();
        assert!(rep.passed, "{rep:?}");
        assert_eq!(rep.rows.len(), 5 * active_blocks(&p).len());
        assert!(rep.max_rel_dto().unwrap() <= 1e-5);
        assert!(rep.failing_blocks().is_empty());
    }

    /// A kernel whose declared partial in `w` is off by a factor must be
    /// caught, and the report must name the block.
    #[test]
    fn gradient_check_flags_wrong_partial() {
        let mesh = build_mesh(1.0, 6, 0.0, 1.0, 6).unwrap();
        let p = Problem::new("broken", 1, 1, 1)
            .with_kernel(KernelId::F0, KernelFn::scalar(|_, v| v.s(Slot::U)).d(Slot::U, |_, _| 1.0))
            .with_kernel(KernelId::G0, KernelFn::scalar(|_, v| v.s(Slot::W).sin()).d(Slot::W, |_, v| 1.5 * v.s(Slot::W).cos()))
            .with_cost(CostId::F1, CostFn::squared(Slot::Phi))
            .with_cost(CostId::G1, CostFn::squared(Slot::PhiBd));
        let opts = GradCheckOptions { use_dto: false, n_dirs: 2, ..GradCheckOptions::default() };
        let rep = gradient_check(&p, &mesh, &controls(&mesh), &opts).unwrap();
        assert!(!rep.passed);
        assert_eq!(rep.failing_blocks(), vec![ControlBlock::W]);
    }

    #[test]
    fn gradient_check_rejects_zero_directions() {
        let mesh = build_mesh(1.0, 4, 0.0, 1.0, 4).unwrap();
        let opts = GradCheckOptions { n_dirs: 0, ..GradCheckOptions::default() };
        assert!(gradient_check(&model("lq_volterra"), &mesh, &controls(&mesh), &opts).is_err());
    }

    #[test]
    fn refinement_table_orders() {
        let t = RefinementTable::from_errors(RefinementMetric::ForwardError, &[(8, 8, 4e-2), (16, 16, 1e-2), (32, 32, 2.5e-3)]);
        assert_eq!(t.rows[0].order, None);
        assert!((t.min_order().unwrap() - 2.0).abs() < 1e-12);
        assert!(t.decreasing());
        for m in [RefinementMetric::ForwardError, RefinementMetric::GradientGap, RefinementMetric::IbpResidual] {
            assert_eq!(RefinementMetric::parse(m.name()), Some(m));
        }
        assert_eq!(RefinementMetric::parse("bogus"), None);
    }

    #[test]
    fn refinement_study_validates_input() {
        let p = model("volterra_exp");
        let base = build_mesh(1.0, 4, 0.0, 1.0, 4).unwrap();
        let s = StudySetup::default();
        assert!(refinement_study(&p, &base, 2, RefinementMetric::IbpResidual, &s).is_err());
        assert!(refinement_study(&p, &base, 3, RefinementMetric::ForwardError, &s).is_err());
    }

    #[test]
    fn forward_orders_of_reference_models() {
        let base = build_mesh(1.0, 8, 0.0, 1.0, 4).unwrap();
        let setup = StudySetup {
            reference: analytic_reference("volterra_exp"),
            ..StudySetup::default()
        };
        let t = refinement_study(&model("volterra_exp"), &base, 3, RefinementMetric::ForwardError, &setup).unwrap();
        assert!(t.min_order().unwrap() >= 1.8, "{t:?}");

        let base = build_mesh(1.0, 8, 0.0, 1.0, 8).unwrap();
        let setup = StudySetup {
            reference: analytic_reference("heat"),
            ..StudySetup::default()
        };
        let t = refinement_study(&model("heat"), &base, 3, RefinementMetric::ForwardError, &setup).unwrap();
        assert!(t.min_order().unwrap() >= 1.0, "{t:?}");
        assert!(analytic_reference("biload_demo").is_none());
    }
}
