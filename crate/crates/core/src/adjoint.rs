//! Hamiltonian slot-partials, the co-state operators, the co-state solve
//! and the control gradient (optimize-then-discretize route).

use ndarray::{Array2, Array3, ArrayView3};

use crate::assembly::{cost_nodes, cost_view, eq_coords, eq_nodes, for_each_pair, registered, rhs_at, slot_grid, slot_taps, theta_taps, EqNode, Fields, Snapshot, FAMILIES};
use crate::error::{Error, Result};
use crate::forward::{SolveReport, SolverConfig, SolverMethod};
use crate::jacobian::{active_nodes, scatter};
use crate::kernels::{Bundle, CostId, Problem, Slot, N_SLOTS};
use crate::linalg::Assembler;
use crate::mesh::{Mesh, Side};
use crate::state::{ControlBlock, ControlBundle, CoStateBundle, FlatIndex, StateBlock};

/// Flat layout of all slot-partial arrays.
#[derive(Debug, Clone, PartialEq)]
struct HLayout {
    offsets: [usize; N_SLOTS + 1],
    rows: [usize; N_SLOTS],
    cols: [usize; N_SLOTS],
    dims: [usize; N_SLOTS],
}

impl HLayout {
    fn new(problem: &Problem, mesh: &Mesh) -> HLayout {
        let mut l = HLayout {
            offsets: [0; N_SLOTS + 1],
            rows: [0; N_SLOTS],
            cols: [0; N_SLOTS],
            dims: [0; N_SLOTS],
        };
        for s in Slot::ALL {
            let (r, c) = slot_grid(mesh, s);
            let i = s.index();
            l.rows[i] = r;
            l.cols[i] = c;
            l.dims[i] = problem.slot_dim(s);
            l.offsets[i + 1] = l.offsets[i] + r * c * l.dims[i];
        }
        l
    }

    /// Node index (component stride excluded) of `(slot, k, l)`.
    #[inline]
    fn node(&self, slot: Slot, k: usize, l: usize) -> usize {
        let i = slot.index();
        self.node_offset(i) + k * self.cols[i] + l
    }

    fn node_offset(&self, i: usize) -> usize {
        (0..i).map(|s| self.rows[s] * self.cols[s]).sum()
    }

    #[inline]
    fn flat(&self, slot: Slot, k: usize, l: usize) -> usize {
        let i = slot.index();
        self.offsets[i] + (k * self.cols[i] + l) * self.dims[i]
    }

    fn len(&self) -> usize {
        self.offsets[N_SLOTS]
    }
}

/// Per-node partial derivatives of the Hamiltonian density with respect to
/// every slot. Slice slots are stored with a leading axis of length 1.
#[derive(Debug, Clone, PartialEq)]
pub struct HPartials {
    layout: HLayout,
    data: Vec<f64>,
}

impl HPartials {
    pub fn zeros(problem: &Problem, mesh: &Mesh) -> HPartials {
        let layout = HLayout::new(problem, mesh);
        HPartials {
            data: vec![0.0; layout.len()],
            layout,
        }
    }

    pub fn get(&self, slot: Slot) -> ArrayView3<'_, f64> {
        let i = slot.index();
        let l = &self.layout;
        ArrayView3::from_shape((l.rows[i], l.cols[i], l.dims[i]), &self.data[l.offsets[i]..l.offsets[i + 1]]).expect("layout")
    }

    /// Sets the partials of `slot` from an array of matching shape.
    pub fn set(&mut self, slot: Slot, values: &ArrayView3<f64>) -> Result<()> {
        let i = slot.index();
        let l = &self.layout;
        let shape = (l.rows[i], l.cols[i], l.dims[i]);
        if values.dim() != shape {
            let (a, b, c) = values.dim();
            return Err(Error::Shape {
                what: format!("partials of {}", slot.name()),
                expected: vec![shape.0, shape.1, shape.2],
                found: vec![a, b, c],
            });
        }
        for (dst, v) in self.data[l.offsets[i]..l.offsets[i + 1]].iter_mut().zip(values.iter()) {
            *dst = *v;
        }
        Ok(())
    }

    #[inline]
    fn at(&self, slot: Slot, k: usize, l: usize, b: usize) -> f64 {
        self.data[self.layout.flat(slot, k, l) + b]
    }

    fn dim_of(&self, slot: Slot) -> usize {
        self.layout.dims[slot.index()]
    }
}

/// Selects one of the six co-state operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThetaKind {
    Theta,
    Theta0,
    ThetaT,
    G,
    G0,
    GT,
}

impl ThetaKind {
    pub const ALL: [ThetaKind; 6] = [ThetaKind::Theta, ThetaKind::G, ThetaKind::Theta0, ThetaKind::ThetaT, ThetaKind::G0, ThetaKind::GT];

    /// Co-state block produced by the operator.
    pub fn block(self) -> StateBlock {
        match self {
            ThetaKind::Theta => StateBlock::Phi,
            ThetaKind::G => StateBlock::PhiBd,
            ThetaKind::Theta0 => StateBlock::Phi0,
            ThetaKind::ThetaT => StateBlock::PhiT,
            ThetaKind::G0 => StateBlock::Phi0Bd,
            ThetaKind::GT => StateBlock::PhiTBd,
        }
    }
}

/// Functional gradient of the cost with respect to each control block.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlGradient {
    pub g_u: Array3<f64>,
    pub g_w: Array3<f64>,
    pub g_u0: Array2<f64>,
    pub g_ut: Array2<f64>,
    pub g_w0: Array2<f64>,
    pub g_wt: Array2<f64>,
}

impl ControlGradient {
    pub fn from_controls(c: ControlBundle) -> ControlGradient {
        ControlGradient {
            g_u: c.u,
            g_w: c.w,
            g_u0: c.u0,
            g_ut: c.u_t,
            g_w0: c.w0,
            g_wt: c.w_t,
        }
    }

    /// The gradient as a control-shaped bundle.
    pub fn as_controls(&self) -> ControlBundle {
        ControlBundle {
            u: self.g_u.clone(),
            w: self.g_w.clone(),
            u0: self.g_u0.clone(),
            u_t: self.g_ut.clone(),
            w0: self.g_w0.clone(),
            w_t: self.g_wt.clone(),
        }
    }

    /// Quadrature pairing `<g, delta>` restricted to one block.
    pub fn pairing(&self, mesh: &Mesh, blk: ControlBlock, delta: &ArrayView3<f64>) -> f64 {
        let c = self.as_controls();
        ControlBundle::pairing_block(mesh, blk, &c.block(blk), delta)
    }

    /// `sqrt(<g, g>)` over all blocks.
    pub fn norm(&self, mesh: &Mesh) -> f64 {
        let c = self.as_controls();
        ControlBundle::pairing(mesh, &c, &c).sqrt()
    }
}

fn co_node_values<'a>(co: &'a CoStateBundle, e: EqNode) -> ArrayView3<'a, f64> {
    co.block(e.family.state_block())
}

/// Entries `(h_flat, eq node, component a, value)` of the linear map from
/// co-states to Hamiltonian partials, produced per equation node.
fn kernel_accumulation(
    problem: &Problem,
    mesh: &Mesh,
    fields: &Fields,
    layout: &HLayout,
    e: EqNode,
    out: &mut Vec<(usize, usize, f64)>,
) -> Result<()> {
    let n = problem.n;
    for (id, sig, k) in registered(problem).into_iter().filter(|x| x.1.equation == e.family) {
        for &slot in k.slots() {
            let dim = problem.slot_dim(slot);
            let mut jac = vec![0.0; n * dim];
            let mut bad = false;
            for_each_pair(mesh, sig, e, |p| {
                if p.w_hel == 0.0 {
                    return;
                }
                k.partial(slot, &p.coords, &fields.view(sig.reads, p.k, p.l), &mut jac);
                bad |= jac.iter().any(|v| !v.is_finite());
                let h = layout.flat(slot, p.k, p.l);
                for b in 0..dim {
                    for a in 0..n {
                        out.push((h + b, a, p.w_hel * jac[a * dim + b]));
                    }
                }
            });
            if bad {
                let (t, x) = eq_coords(mesh, e);
                return Err(Error::NonFinite {
                    source_name: format!("partial of kernel {} in slot {}", id.name(), slot.name()),
                    node: format!("t={t}, x={x}"),
                });
            }
        }
    }
    Ok(())
}

fn add_cost_partials(problem: &Problem, mesh: &Mesh, fields: &Fields, h: &mut HPartials) -> Result<()> {
    for id in CostId::ALL {
        let Some(cf) = problem.cost(id) else { continue };
        for node in cost_nodes(mesh, id) {
            let view = cost_view(fields, id, &node);
            for &slot in cf.slots() {
                let dim = problem.slot_dim(slot);
                let mut g = vec![0.0; dim];
                cf.partial(slot, &node.coords, &view, &mut g);
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        source_name: format!("partial of cost {} in slot {}", id.name(), slot.name()),
                        node: format!("(k={}, l={})", node.k, node.l),
                    });
                }
                let base = h.layout.flat(slot, node.k, node.l);
                for b in 0..dim {
                    h.data[base + b] += g[b];
                }
            }
        }
    }
    Ok(())
}

/// Accumulates every Hamiltonian term reading each slot, weighted by the
/// co-state of the equation it appears in, plus the cost partials.
pub fn assemble_h_partials(problem: &Problem, mesh: &Mesh, snap: &Snapshot, costate: &CoStateBundle) -> Result<HPartials> {
    costate.check_shape(mesh, problem.n)?;
    let fields = Fields::new(snap);
    let mut h = HPartials::zeros(problem, mesh);
    add_cost_partials(problem, mesh, &fields, &mut h)?;
    let layout = h.layout.clone();
    let nodes = active_nodes(problem, mesh);
    let mut data = std::mem::take(&mut h.data);
    scatter(
        &nodes,
        |e, out: &mut Vec<(usize, f64)>| {
            let co = co_node_values(costate, e);
            let mut tmp = Vec::new();
            kernel_accumulation(problem, mesh, &fields, &layout, e, &mut tmp)?;
            out.extend(tmp.into_iter().map(|(hf, a, v)| (hf, v * co[[e.i, e.c, a]])));
            Ok(())
        },
        |(hf, v)| data[hf] += v,
    )?;
    h.data = data;
    if let Some(k) = h.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            source_name: "Hamiltonian partials".into(),
            node: format!("flat entry {k}"),
        });
    }
    Ok(h)
}

/// Applies one co-state operator to the slot-partials. Slice results carry
/// a leading axis of length 1. In one space dimension the tangential
/// boundary operators vanish; the normal contractions use `n = -1, +1`.
pub fn apply_theta(mesh: &Mesh, kind: ThetaKind, partials: &HPartials) -> Result<Array3<f64>> {
    let blk = kind.block();
    let n = partials.dim_of(Slot::Phi);
    let expected = slot_grid(mesh, Slot::Phi);
    let got = (partials.layout.rows[Slot::Phi.index()], partials.layout.cols[Slot::Phi.index()]);
    if expected != got {
        return Err(Error::Shape {
            what: "Hamiltonian partials".into(),
            expected: vec![expected.0, expected.1],
            found: vec![got.0, got.1],
        });
    }
    let (rows, cols) = blk.grid(mesh);
    let mut out = Array3::zeros((rows, cols, n));
    for i in 0..rows {
        for c in 0..cols {
            theta_taps(mesh, blk, i, c, |slot, k, l, coef| {
                for b in 0..n {
                    out[[i, c, b]] += coef * partials.at(slot, k, l, b);
                }
            });
        }
    }
    Ok(out)
}

/// Applies all six operators and packs the result as a co-state bundle.
pub fn apply_all(mesh: &Mesh, partials: &HPartials) -> Result<CoStateBundle> {
    let n = partials.dim_of(Slot::Phi);
    let mut co = CoStateBundle::zeros(mesh, n);
    for kind in ThetaKind::ALL {
        let v = apply_theta(mesh, kind, partials)?;
        co.block_mut(kind.block()).assign(&v);
    }
    Ok(co)
}

/// One evaluation of the co-state fixed-point map: Hamiltonian partials at
/// `costate`, then the closed co-state operator.
pub fn costate_map(problem: &Problem, mesh: &Mesh, snap: &Snapshot, costate: &CoStateBundle) -> Result<CoStateBundle> {
    let h = assemble_h_partials(problem, mesh, snap, costate)?;
    let op = CostateOperator::new(mesh, &FlatIndex::new(mesh, problem.n), &h.layout);
    op.apply(mesh, &h.layout, &h)
}

/// The affine co-state map `co -> c + M co` in assembled form.
pub(crate) struct CostateSystem {
    pub c: Vec<f64>,
    pub m: Assembler,
}

/// Measure in which the Hamiltonian partials of `slot` are densities.
fn slot_weight(mesh: &Mesh, slot: Slot, k: usize, l: usize) -> f64 {
    match slot.bundle() {
        Bundle::Interior => mesh.wt(k) * mesh.wx(l),
        Bundle::Boundary => mesh.wt(k),
        Bundle::Initial | Bundle::Final => mesh.wx(l),
        Bundle::InitialBd | Bundle::FinalBd => 1.0,
    }
}

/// Scatter form of the co-state operator used by the solver: for every
/// state-slot partial node, the co-state rows (component 0) it feeds.
///
/// Entries are the quadrature-weighted transpose of the derived-slot
/// stencils, which coincides with the stencil form of [`apply_theta`] away
/// from the first and last rows and columns and supplies the summation-by-
/// parts closure there. Deposits on boundary columns of x-indexed blocks
/// are passed to the boundary co-state through the trace relation.
pub(crate) struct CostateOperator {
    scatter: Vec<Vec<(usize, f64)>>,
}

impl CostateOperator {
    fn new(mesh: &Mesh, idx: &FlatIndex, layout: &HLayout) -> CostateOperator {
        let n_nodes: usize = (0..N_SLOTS).map(|i| layout.rows[i] * layout.cols[i]).sum();
        let mut scatter = vec![Vec::new(); n_nodes];
        for slot in Slot::ALL.into_iter().filter(|s| s.control_block().is_none()) {
            let (rows, cols) = slot_grid(mesh, slot);
            for k in 0..rows {
                for l in 0..cols {
                    let ws = slot_weight(mesh, slot, k, l);
                    let list = &mut scatter[layout.node(slot, k, l)];
                    slot_taps(mesh, idx, slot, k, l, |col, coef| {
                        let (blk, r, c, _) = idx.locate(col);
                        let v = coef * ws / blk.weight(mesh, r, c);
                        let bd = match blk {
                            StateBlock::Phi => Some(StateBlock::PhiBd),
                            StateBlock::Phi0 => Some(StateBlock::Phi0Bd),
                            StateBlock::PhiT => Some(StateBlock::PhiTBd),
                            _ => None,
                        };
                        match bd {
                            Some(bd) if c == 0 || c == mesh.nx => {
                                let side = if c == 0 { Side::Left } else { Side::Right };
                                let w = blk.weight(mesh, r, c) / bd.weight(mesh, r, side.index());
                                list.push((idx.base(bd, r, side.index()), v * w));
                            }
                            _ => list.push((col, v)),
                        }
                    });
                }
            }
        }
        CostateOperator { scatter }
    }

    /// `co = T h` for slot partials `h`.
    fn apply(&self, mesh: &Mesh, layout: &HLayout, partials: &HPartials) -> Result<CoStateBundle> {
        let n = partials.dim_of(Slot::Phi);
        let mut flat = vec![0.0; FlatIndex::new(mesh, n).len()];
        for slot in Slot::ALL.into_iter().filter(|s| s.control_block().is_none()) {
            let i = slot.index();
            for k in 0..layout.rows[i] {
                for l in 0..layout.cols[i] {
                    let node = layout.node(slot, k, l);
                    for &(row, coef) in &self.scatter[node] {
                        for b in 0..n {
                            flat[row + b] += coef * partials.at(slot, k, l, b);
                        }
                    }
                }
            }
        }
        CoStateBundle::unpack(mesh, n, &flat)
    }
}

pub(crate) fn assemble_costate_system(problem: &Problem, mesh: &Mesh, snap: &Snapshot) -> Result<CostateSystem> {
    let n = problem.n;
    let idx = FlatIndex::new(mesh, n);
    let fields = Fields::new(snap);
    let mut h0 = HPartials::zeros(problem, mesh);
    add_cost_partials(problem, mesh, &fields, &mut h0)?;
    let layout = h0.layout.clone();
    let op = CostateOperator::new(mesh, &idx, &layout);
    let c = op.apply(mesh, &layout, &h0)?.pack();
    // inverse of HLayout::flat for state slots
    let slot_of_flat = |hf: usize| -> (usize, usize) {
        let i = (0..N_SLOTS).find(|&i| hf < layout.offsets[i + 1]).unwrap();
        let dim = layout.dims[i].max(1);
        let rel = hf - layout.offsets[i];
        let node = layout.node_offset(i) + rel / dim;
        (node, rel % dim)
    };
    let nodes = active_nodes(problem, mesh);
    let estimate = crate::jacobian::estimate_nnz(problem, mesh);
    let mut m = Assembler::new(idx.len(), estimate, false);
    scatter(
        &nodes,
        |e, out: &mut Vec<(usize, usize, f64)>| {
            let mut tmp = Vec::new();
            kernel_accumulation(problem, mesh, &fields, &layout, e, &mut tmp)?;
            let col0 = idx.base(e.family.state_block(), e.i, e.c);
            for (hf, a, v) in tmp {
                let (node, b) = slot_of_flat(hf);
                for &(row, coef) in &op.scatter[node] {
                    out.push((row + b, col0 + a, coef * v));
                }
            }
            Ok(())
        },
        |(r, col, v)| m.add(r, col, v),
    )?;
    Ok(CostateSystem { c, m })
}

/// Solves the co-state system at a (converged) state.
pub fn solve_costate(problem: &Problem, mesh: &Mesh, snap: &Snapshot, cfg: &SolverConfig) -> Result<(CoStateBundle, SolveReport)> {
    cfg.validate()?;
    let n = problem.n;
    match cfg.method {
        SolverMethod::Picard => {
            let mut co = CoStateBundle::zeros(mesh, n);
            let mut history = Vec::new();
            for _ in 0..cfg.max_iter {
                let next = costate_map(problem, mesh, snap, &co)?;
                let res = co_distance(&next, &co);
                let mut relaxed = co.clone();
                relaxed.scale(1.0 - cfg.relax);
                relaxed.axpy(cfg.relax, &next);
                co = if cfg.relax == 1.0 { next } else { relaxed };
                check_guard(&co, cfg.divergence_guard)?;
                history.push(res);
                if res <= cfg.tol {
                    break;
                }
            }
            Ok((co, SolveReport::from_history(history, cfg.tol)))
        }
        SolverMethod::Newton => {
            let sys = assemble_costate_system(problem, mesh, snap)?;
            let co = if sys.c.iter().all(|v| *v == 0.0) {
                CoStateBundle::zeros(mesh, n)
            } else {
                let mut a = sys.m;
                a.scale(-1.0);
                a.add_identity(1.0);
                CoStateBundle::unpack(mesh, n, &a.solve(&sys.c)?)?
            };
            check_guard(&co, cfg.divergence_guard)?;
            // roundoff of the direct solve scales with the co-state size
            let scale = co.sup_norm().max(1.0);
            let res = co_distance(&costate_map(problem, mesh, snap, &co)?, &co) / scale;
            Ok((co, SolveReport::from_history(vec![res], cfg.tol)))
        }
    }
}

fn co_distance(a: &CoStateBundle, b: &CoStateBundle) -> f64 {
    a.pack().iter().zip(b.pack()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

fn check_guard(co: &CoStateBundle, limit: f64) -> Result<()> {
    for blk in StateBlock::ALL {
        let worst = co.block(blk).iter().fold(0.0f64, |a, v| if v.is_finite() { a.max(v.abs()) } else { f64::NAN });
        if !(worst <= limit) {
            return Err(Error::Divergence {
                block: format!("co-state of {}", blk.name()),
                value: worst,
                guard: limit,
            });
        }
    }
    Ok(())
}

/// Control-slot partials of the Hamiltonian: the functional gradient.
pub fn control_gradient(problem: &Problem, mesh: &Mesh, snap: &Snapshot, costate: &CoStateBundle) -> Result<ControlGradient> {
    let h = assemble_h_partials(problem, mesh, snap, costate)?;
    let mut g = ControlBundle::zeros(mesh, problem.m_u, problem.m_w);
    for (slot, blk) in [
        (Slot::U, ControlBlock::U),
        (Slot::W, ControlBlock::W),
        (Slot::U0, ControlBlock::U0),
        (Slot::UT, ControlBlock::UT),
        (Slot::W0, ControlBlock::W0),
        (Slot::WT, ControlBlock::WT),
    ] {
        g.block_mut(blk).assign(&h.get(slot));
    }
    Ok(ControlGradient::from_controls(g))
}

/// Per-node Hamiltonian density, split by where each summand lives.
#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianField {
    /// `F1 + <psi, RHS_interior>` over `(t, x)`.
    pub interior: Array2<f64>,
    /// `G1 + <omega, RHS_boundary>` over `(t, side)`.
    pub boundary: Array2<f64>,
    /// `F0 + <psi0, RHS_0> + <psiT, RHS_T>` over `x`.
    pub slices: Vec<f64>,
    /// `G0 + <omega0, RHS_0bd> + <omegaT, RHS_Tbd>` over sides.
    pub slices_bd: Vec<f64>,
}

/// Diagnostic evaluation of the Hamiltonian density at every node.
pub fn hamiltonian_report(problem: &Problem, mesh: &Mesh, snap: &Snapshot, costate: &CoStateBundle) -> Result<HamiltonianField> {
    let fields = Fields::new(snap);
    let n = problem.n;
    let mut hf = HamiltonianField {
        interior: Array2::zeros((mesh.nt + 1, mesh.nx + 1)),
        boundary: Array2::zeros((mesh.nt + 1, 2)),
        slices: vec![0.0; mesh.nx + 1],
        slices_bd: vec![0.0; 2],
    };
    for id in CostId::ALL {
        let Some(cf) = problem.cost(id) else { continue };
        for node in cost_nodes(mesh, id) {
            let v = cf.eval(&node.coords, &cost_view(&fields, id, &node));
            match id {
                CostId::F1 => hf.interior[[node.k, node.l]] += v,
                CostId::G1 => hf.boundary[[node.k, node.l]] += v,
                CostId::F0 => hf.slices[node.l] += v,
                CostId::G0 => hf.slices_bd[node.l] += v,
            }
        }
    }
    let mut rhs = vec![0.0; n];
    for fam in FAMILIES {
        if problem.kernels_for(fam).next().is_none() {
            continue;
        }
        let co = costate.block(fam.state_block());
        for e in eq_nodes(mesh, fam) {
            rhs_at(problem, mesh, &fields, e, &mut rhs)?;
            let dot: f64 = (0..n).map(|a| co[[e.i, e.c, a]] * rhs[a]).sum();
            match fam {
                Bundle::Interior => hf.interior[[e.i, e.c]] += dot,
                Bundle::Boundary => hf.boundary[[e.i, e.c]] += dot,
                Bundle::Initial | Bundle::Final => hf.slices[e.c] += dot,
                Bundle::InitialBd | Bundle::FinalBd => hf.slices_bd[e.c] += dot,
            }
        }
    }
    let all = hf.interior.iter().chain(hf.boundary.iter()).chain(&hf.slices).chain(&hf.slices_bd);
    if all.into_iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            source_name: "Hamiltonian density".into(),
            node: "report".into(),
        });
    }
    Ok(hf)
}

/// Normal of a boundary column, exposed for diagnostics.
pub fn normal(side: Side) -> f64 {
    side.normal()
}

/// Sup-distance between co-state bundles.
pub fn costate_distance(a: &CoStateBundle, b: &CoStateBundle) -> f64 {
    co_distance(a, b)
}

/// Result of the full optimize-then-discretize gradient evaluation.
#[derive(Debug, Clone)]
pub struct AdjointSolution {
    pub cost: f64,
    pub state: crate::state::StateBundle,
    pub costate: CoStateBundle,
    pub gradient: ControlGradient,
    pub forward: SolveReport,
    pub backward: SolveReport,
}

/// Forward solve, co-state solve and control gradient at `controls`.
pub fn adjoint_gradient(problem: &Problem, mesh: &Mesh, controls: &ControlBundle, cfg: &SolverConfig) -> Result<AdjointSolution> {
    let (cost, state, forward) = crate::forward::cost_of_controls(problem, mesh, controls, cfg)?;
    let snap = Snapshot::new(mesh, &state, controls)?;
    let (costate, backward) = solve_costate(problem, mesh, &snap, cfg)?;
    if !backward.converged {
        return Err(Error::NotConverged(format!(
            "co-state residual {:e} after {} iterations",
            backward.final_residual, backward.iterations
        )));
    }
    let gradient = control_gradient(problem, mesh, &snap, &costate)?;
    Ok(AdjointSolution {
        cost,
        state,
        costate,
        gradient,
        forward,
        backward,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::solve_forward;
    use crate::jacobian::rhs_state_jacobian;
    use crate::kernels::{make_model, CostFn, KernelFn, KernelId, ModelParams};
    use crate::mesh::build_mesh;
    use crate::state::StateBundle;
    use crate::verify::dto_costate;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(name: &str) -> Problem {
        make_model(&ModelParams::new(name)).unwrap()
    }

    fn random_state(mesh: &Mesh, seed: u64) -> StateBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flat: Vec<f64> = (0..FlatIndex::new(mesh, 1).len()).map(|_| rng.random_range(-0.5..0.5)).collect();
        StateBundle::unpack(mesh, 1, &flat).unwrap()
    }

    fn random_costate(mesh: &Mesh, seed: u64) -> CoStateBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flat: Vec<f64> = (0..FlatIndex::new(mesh, 1).len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        CoStateBundle::unpack(mesh, 1, &flat).unwrap()
    }

    fn controls(mesh: &Mesh) -> ControlBundle {
        ControlBundle::from_fn(mesh, 1, 1, |_, t, x, _| 0.2 * (t + 2.0 * x).sin())
    }

    fn max_abs(a: &[f64]) -> f64 {
        a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    #[test]
    fn zero_cost_gives_zero_costate() {
        let mesh = build_mesh(1.0, 6, 0.0, 1.0, 6).unwrap();
        let mut p = model("biload_demo");
        for id in CostId::ALL {
            p.set_cost(id, None);
        }
        let u = controls(&mesh);
        let (state, _) = solve_forward(&p, &mesh, &u, &SolverConfig::default()).unwrap();
        let snap = Snapshot::new(&mesh, &state, &u).unwrap();
        for cfg in [SolverConfig::default(), SolverConfig::picard()] {
            let (co, rep) = solve_costate(&p, &mesh, &snap, &cfg).unwrap();
            assert_eq!(rep.iterations, 1);
            assert_eq!(co.sup_norm(), 0.0);
        }
        let sol = adjoint_gradient(&p, &mesh, &u, &SolverConfig::default()).unwrap();
        assert_eq!(sol.gradient.norm(&mesh), 0.0);
    }

    #[test]
    fn squared_cost_partial_is_twice_phi() {
        let mesh = build_mesh(1.0, 5, 0.0, 1.0, 7).unwrap();
        let p = Problem::new("cost_only", 1, 1, 1).with_cost(CostId::F1, CostFn::squared(Slot::Phi));
        let state = random_state(&mesh, 1);
        let u = controls(&mesh);
        let snap = Snapshot::new(&mesh, &state, &u).unwrap();
        let h = assemble_h_partials(&p, &mesh, &snap, &CoStateBundle::zeros(&mesh, 1)).unwrap();
        let expected = state.phi.mapv(|v| 2.0 * v);
        assert_eq!(h.get(Slot::Phi), expected.view());
        for s in Slot::ALL.into_iter().filter(|&s| s != Slot::Phi) {
            assert!(h.get(s).iter().all(|v| *v == 0.0), "slot {}", s.name());
        }
    }

    /// Interior `∂H/∂φ` of a Volterra model equals the transposed state
    /// Jacobian applied to the weighted co-state, column by column.
    #[test]
    fn phi_partial_matches_transposed_jacobian() {
        let mesh = build_mesh(1.0, 6, 0.0, 1.0, 6).unwrap();
        let mut p = model("volterra_exp");
        p.set_cost(CostId::F1, None);
        let state = random_state(&mesh, 2);
        let u = controls(&mesh);
        let snap = Snapshot::new(&mesh, &state, &u).unwrap();
        let mut co = random_costate(&mesh, 3);
        for blk in StateBlock::ALL.into_iter().filter(|&b| b != StateBlock::Phi) {
            co.block_mut(blk).fill(0.0);
        }
        co.psi.index_axis_mut(ndarray::Axis(1), 0).fill(0.0);
        co.psi.index_axis_mut(ndarray::Axis(1), mesh.nx).fill(0.0);
        let h = assemble_h_partials(&p, &mesh, &snap, &co).unwrap();
        let idx = FlatIndex::new(&mesh, 1);
        let jac = rhs_state_jacobian(&p, &mesh, &snap, true).unwrap().to_dense();
        let blk = StateBlock::Phi;
        for i in 0..=mesh.nt {
            for j in 0..=mesh.nx {
                let col = idx.base(blk, i, j);
                let mut acc = 0.0;
                for r in 0..=mesh.nt {
                    for c in 1..mesh.nx {
                        acc += jac[(idx.base(blk, r, c), col)] * blk.weight(&mesh, r, c) * co.psi[[r, c, 0]];
                    }
                }
                let expected = acc / blk.weight(&mesh, i, j);
                let got = h.get(Slot::Phi)[[i, j, 0]];
                assert!((got - expected).abs() <= 1e-12 * (1.0 + expected.abs()), "({i},{j}): {got} vs {expected}");
            }
        }
    }

    fn partials_from(mesh: &Mesh, slot: Slot, f: impl Fn(f64, f64) -> f64) -> HPartials {
        let p = Problem::new("grid", 1, 1, 1);
        let mut h = HPartials::zeros(&p, mesh);
        let (rows, cols) = slot_grid(mesh, slot);
        let v = Array3::from_shape_fn((rows, cols, 1), |(i, j, _)| f(mesh.t(i), mesh.x(j)));
        h.set(slot, &v.view()).unwrap();
        h
    }

    #[test]
    fn theta_examples() {
        let mesh = build_mesh(1.0, 7, 0.0, 2.0, 9).unwrap();
        let check = |h: &HPartials, expected: &dyn Fn(f64, f64) -> f64| {
            let out = apply_theta(&mesh, ThetaKind::Theta, h).unwrap();
            for i in 0..=mesh.nt {
                for j in 1..mesh.nx {
                    let e = expected(mesh.t(i), mesh.x(j));
                    assert!((out[[i, j, 0]] - e).abs() <= 1e-11, "({i},{j}): {} vs {e}", out[[i, j, 0]]);
                }
            }
        };
        let h = partials_from(&mesh, Slot::Phi, |t, x| t * t + x.sin());
        check(&h, &|t, x| t * t + x.sin());
        let h = partials_from(&mesh, Slot::P, |_, x| x);
        check(&h, &|_, _| -1.0);
        let h = partials_from(&mesh, Slot::QDot, |t, x| t * x * x);
        check(&h, &|_, _| -2.0);
    }

    #[test]
    fn theta_rejects_foreign_mesh() {
        let a = build_mesh(1.0, 4, 0.0, 1.0, 4).unwrap();
        let b = build_mesh(1.0, 5, 0.0, 1.0, 4).unwrap();
        let h = HPartials::zeros(&Problem::new("z", 1, 1, 1), &a);
        assert!(matches!(apply_theta(&b, ThetaKind::Theta, &h), Err(Error::Shape { .. })));
        let bad = Array3::zeros((2, 2, 1));
        let mut h = h;
        assert!(h.set(Slot::Phi, &bad.view()).is_err());
    }

    /// Away from the time and space edges the closed operator reduces to
    /// the plain stencil form.
    #[test]
    fn closed_operator_matches_plain_stencils_inside() {
        let mesh = build_mesh(1.0, 10, 0.0, 1.0, 10).unwrap();
        let p = Problem::new("grid", 1, 1, 1);
        let mut h = HPartials::zeros(&p, &mesh);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        h.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let plain = apply_all(&mesh, &h).unwrap();
        let op = CostateOperator::new(&mesh, &FlatIndex::new(&mesh, 1), &h.layout);
        let closed = op.apply(&mesh, &h.layout, &h).unwrap();
        // one-sided second-difference rows reach three nodes inward
        for i in 3..mesh.nt - 2 {
            for j in 4..mesh.nx - 3 {
                let (a, b) = (plain.psi[[i, j, 0]], closed.psi[[i, j, 0]]);
                assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()), "({i},{j}): {a} vs {b}");
            }
        }
    }

    #[test]
    fn assembled_system_matches_map() {
        let mesh = build_mesh(1.0, 5, 0.0, 1.0, 5).unwrap();
        let p = model("biload_demo");
        let state = random_state(&mesh, 4);
        let u = controls(&mesh);
        let snap = Snapshot::new(&mesh, &state, &u).unwrap();
        let sys = assemble_costate_system(&p, &mesh, &snap).unwrap();
        for seed in 0..3 {
            let co = random_costate(&mesh, 10 + seed);
            let mapped = costate_map(&p, &mesh, &snap, &co).unwrap().pack();
            let lin: Vec<f64> = sys.m.matvec(&co.pack()).iter().zip(&sys.c).map(|(a, b)| a + b).collect();
            let diff: Vec<f64> = mapped.iter().zip(&lin).map(|(a, b)| a - b).collect();
            assert!(max_abs(&diff) <= 1e-10 * (1.0 + max_abs(&mapped)));
        }
    }

    #[test]
    fn control_identity_gives_twice_phi() {
        let mesh = build_mesh(1.0, 6, 0.0, 1.0, 6).unwrap();
        let p = Problem::new("identity", 1, 1, 1)
            .with_kernel(KernelId::F0, KernelFn::scalar(|_, v| v.s(Slot::U)).d(Slot::U, |_, _| 1.0))
            .with_cost(CostId::F1, CostFn::squared(Slot::Phi));
        let u = controls(&mesh);
        let sol = adjoint_gradient(&p, &mesh, &u, &SolverConfig::default()).unwrap();
        for i in 0..=mesh.nt {
            for j in 1..mesh.nx {
                assert!((sol.costate.psi[[i, j, 0]] - 2.0 * sol.state.phi[[i, j, 0]]).abs() <= 1e-12);
                assert!((sol.gradient.g_u[[i, j, 0]] - 2.0 * u.u[[i, j, 0]]).abs() <= 1e-12);
            }
        }
        for blk in StateBlock::ALL.into_iter().filter(|&b| b != StateBlock::Phi) {
            assert!(sol.costate.block(blk).iter().all(|v| v.abs() <= 1e-14), "{}", blk.name());
        }
    }

    #[test]
    fn control_only_cost_gradient() {
        let mesh = build_mesh(1.0, 4, 0.0, 1.0, 5).unwrap();
        let p = Problem::new("reg", 1, 1, 1).with_cost(CostId::F1, CostFn::squared(Slot::U));
        let u = controls(&mesh);
        let sol = adjoint_gradient(&p, &mesh, &u, &SolverConfig::default()).unwrap();
        assert_eq!(sol.gradient.g_u, u.u.mapv(|v| 2.0 * v));
        assert_eq!(sol.gradient.g_w.iter().map(|v| v.abs()).sum::<f64>(), 0.0);
    }

    #[test]
    fn costate_matches_discrete_multipliers() {
        let mesh = build_mesh(1.0, 6, 0.0, 1.0, 6).unwrap();
        let cfg = SolverConfig::default().with_tol(1e-12);
        for name in ["lq_volterra", "biload_demo", "heat"] {
            let p = model(name);
            let u = controls(&mesh);
            let sol = adjoint_gradient(&p, &mesh, &u, &cfg).unwrap();
            let dto = dto_costate(&p, &mesh, &u, &cfg).unwrap();
            let scale = dto.sup_norm().max(1.0);
            let d = costate_distance(&sol.costate, &dto);
            assert!(d <= 1e-8 * scale, "{name}: distance {d:e}");
        }
    }

    #[test]
    fn picard_and_direct_costates_agree() {
        let mesh = build_mesh(1.0, 8, 0.0, 1.0, 4).unwrap();
        let p = model("lq_volterra");
        let u = controls(&mesh);
        let (state, _) = solve_forward(&p, &mesh, &u, &SolverConfig::default()).unwrap();
        let snap = Snapshot::new(&mesh, &state, &u).unwrap();
        let (a, ra) = solve_costate(&p, &mesh, &snap, &SolverConfig::picard().with_tol(1e-13)).unwrap();
        let (b, rb) = solve_costate(&p, &mesh, &snap, &SolverConfig::default()).unwrap();
        assert!(ra.converged && rb.converged);
        assert!(costate_distance(&a, &b) <= 1e-11);
    }

    #[test]
    fn costate_is_linear_in_cost() {
        let mesh = build_mesh(1.0, 6, 0.0, 1.0, 5).unwrap();
        let base = || {
            let mut p = model("lq_volterra");
            p.set_cost(CostId::F1, None);
            p
        };
        let quad = || CostFn::squared(Slot::Phi);
        let lin = || CostFn::new(|_, v| v.s(Slot::Phi)).d(Slot::Phi, |_, _| 1.0);
        let (c1, c2) = (0.7, -1.3);
        let both = base().with_cost(
            CostId::F1,
            CostFn::sum(vec![
                CostFn::new(move |_, v| c1 * v.s(Slot::Phi).powi(2)).d(Slot::Phi, move |_, v| 2.0 * c1 * v.s(Slot::Phi)),
                CostFn::new(move |_, v| c2 * v.s(Slot::Phi)).d(Slot::Phi, move |_, _| c2),
            ]),
        );
        let u = controls(&mesh);
        let cfg = SolverConfig::default();
        let co = |p: &Problem| adjoint_gradient(p, &mesh, &u, &cfg).unwrap().costate;
        let mut combo = co(&base().with_cost(CostId::F1, quad()));
        combo.scale(c1);
        combo.axpy(c2, &co(&base().with_cost(CostId::F1, lin())));
        assert!(costate_distance(&combo, &co(&both)) <= 1e-12);
    }

    #[test]
    fn hamiltonian_report_cases() {
        let mesh = build_mesh(1.0, 5, 0.0, 1.0, 5).unwrap();
        let u = controls(&mesh);
        let state = random_state(&mesh, 5);
        let snap = Snapshot::new(&mesh, &state, &u).unwrap();
        let zero = CoStateBundle::zeros(&mesh, 1);
        let hf = hamiltonian_report(&Problem::new("z", 1, 1, 1), &mesh, &snap, &zero).unwrap();
        assert!(hf.interior.iter().chain(hf.boundary.iter()).all(|v| *v == 0.0));
        let p = Problem::new("c", 1, 1, 1).with_cost(CostId::F1, CostFn::squared(Slot::Phi));
        let hf = hamiltonian_report(&p, &mesh, &snap, &zero).unwrap();
        assert_eq!(hf.interior, state.phi.index_axis(ndarray::Axis(2), 0).mapv(|v| v * v));
        let p = model("biload_demo");
        let hf = hamiltonian_report(&p, &mesh, &snap, &random_costate(&mesh, 6)).unwrap();
        assert!(hf.slices.iter().chain(&hf.slices_bd).all(|v| v.is_finite()));
    }

    #[test]
    fn gradient_pairing_and_norm() {
        let mesh = build_mesh(1.0, 4, 0.0, 1.0, 4).unwrap();
        let g = ControlGradient::from_controls(ControlBundle::from_fn(&mesh, 1, 1, |_, _, _, _| 1.0));
        let ones = Array3::ones(g.g_u.dim());
        assert!((g.pairing(&mesh, ControlBlock::U, &ones.view()) - 1.0).abs() <= 1e-14);
        assert!(g.norm(&mesh) > 0.0);
        assert_eq!(normal(Side::Left), -1.0);
        assert_eq!(g.as_controls().pack(), ControlBundle::from_fn(&mesh, 1, 1, |_, _, _, _| 1.0).pack());
    }
}
