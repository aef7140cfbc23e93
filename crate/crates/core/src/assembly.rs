//! Quadrature pair enumeration shared by the residual, its Jacobian, the
//! Hamiltonian partials and the co-state operator.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::{Bundle, Coords, CostId, Kernel, KernelId, Problem, Signature, Slot, SlotView, SpaceCoupling, TimeCoupling, N_SLOTS};
use crate::mesh::{trap_weight, DiffOrder, Mesh, Side, Taps};
use crate::state::{derive_slots, ControlBundle, DerivedSlots, FlatIndex, StateBlock, StateBundle};

/// A state with its derived slots and the controls it was computed for.
#[derive(Debug, Clone)]
pub struct Snapshot<'a> {
    pub state: &'a StateBundle,
    pub slots: DerivedSlots,
    pub controls: &'a ControlBundle,
}

impl<'a> Snapshot<'a> {
    pub fn new(mesh: &Mesh, state: &'a StateBundle, controls: &'a ControlBundle) -> Result<Snapshot<'a>> {
        Ok(Snapshot {
            slots: derive_slots(mesh, state)?,
            state,
            controls,
        })
    }
}

#[derive(Clone, Copy)]
struct FieldRef<'a> {
    data: &'a [f64],
    cols: usize,
    dim: usize,
}

/// Raw slices of every slot array, indexable by `(slot, k, l)`.
pub(crate) struct Fields<'a> {
    refs: [FieldRef<'a>; N_SLOTS],
}

fn raw3(a: &ndarray::Array3<f64>) -> FieldRef<'_> {
    let (_, cols, dim) = a.dim();
    FieldRef {
        data: a.as_slice().expect("standard layout"),
        cols,
        dim,
    }
}

fn raw2(a: &ndarray::Array2<f64>) -> FieldRef<'_> {
    let (cols, dim) = a.dim();
    FieldRef {
        data: a.as_slice().expect("standard layout"),
        cols,
        dim,
    }
}

impl<'a> Fields<'a> {
    pub fn new(snap: &'a Snapshot<'a>) -> Fields<'a> {
        let s = snap.state;
        let d = &snap.slots;
        let c = snap.controls;
        let mut refs = [FieldRef {
            data: &[],
            cols: 1,
            dim: 0,
        }; N_SLOTS];
        let mut put = |slot: Slot, r: FieldRef<'a>| refs[slot.index()] = r;
        put(Slot::Phi, raw3(&s.phi));
        put(Slot::P, raw3(&d.p));
        put(Slot::Q, raw3(&d.q));
        put(Slot::PhiDot, raw3(&d.phi_dot));
        put(Slot::PDot, raw3(&d.p_dot));
        put(Slot::QDot, raw3(&d.q_dot));
        put(Slot::U, raw3(&c.u));
        put(Slot::PhiBd, raw3(&s.phi_bd));
        put(Slot::PhiBdDot, raw3(&d.phi_bd_dot));
        put(Slot::PBd, raw3(&d.p_bd));
        put(Slot::PBdDot, raw3(&d.p_bd_dot));
        put(Slot::W, raw3(&c.w));
        put(Slot::Phi0, raw2(&s.phi0));
        put(Slot::P0, raw2(&d.p0));
        put(Slot::Q0, raw2(&d.q0));
        put(Slot::U0, raw2(&c.u0));
        put(Slot::PhiT, raw2(&s.phi_t));
        put(Slot::PT, raw2(&d.p_t));
        put(Slot::QT, raw2(&d.q_t));
        put(Slot::UT, raw2(&c.u_t));
        put(Slot::Phi0Bd, raw2(&s.phi0_bd));
        put(Slot::P0Bd, raw2(&d.p0_bd));
        put(Slot::W0, raw2(&c.w0));
        put(Slot::PhiTBd, raw2(&s.phi_t_bd));
        put(Slot::PTBd, raw2(&d.p_t_bd));
        put(Slot::WT, raw2(&c.w_t));
        Fields { refs }
    }

    #[inline]
    fn at(&self, slot: Slot, k: usize, l: usize) -> &'a [f64] {
        let r = self.refs[slot.index()];
        let o = (k * r.cols + l) * r.dim;
        &r.data[o..o + r.dim]
    }

    /// Slot values of `bundle` at sample node `(k, l)`.
    #[inline]
    pub fn view(&self, bundle: Bundle, k: usize, l: usize) -> SlotView<'a> {
        let mut v = SlotView::default();
        for &s in bundle.slots() {
            v.set(s, self.at(s, k, l));
        }
        v
    }

    /// Combined view of two slice bundles at the same location.
    pub fn view2(&self, a: Bundle, b: Bundle, l: usize) -> SlotView<'a> {
        let mut v = self.view(a, 0, l);
        for &s in b.slots() {
            v.set(s, self.at(s, 0, l));
        }
        v
    }
}

/// An equation location: family, time row (0 for slices) and column or side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct EqNode {
    pub family: Bundle,
    pub i: usize,
    pub c: usize,
}

/// All nodes at which the equations of `family` are posed. Interior and
/// slice equations are posed at interior columns only.
pub(crate) fn eq_nodes(mesh: &Mesh, family: Bundle) -> Vec<EqNode> {
    let mut out = Vec::new();
    let rows = if family.has_time() { mesh.nt + 1 } else { 1 };
    let cols: Vec<usize> = if family.on_boundary() { vec![0, 1] } else { (1..mesh.nx).collect() };
    for i in 0..rows {
        for &c in &cols {
            out.push(EqNode { family, i, c });
        }
    }
    out
}

/// Equation time and location of a node.
#[inline]
pub(crate) fn eq_coords(mesh: &Mesh, e: EqNode) -> (f64, f64) {
    let t = match e.family {
        Bundle::Interior | Bundle::Boundary => mesh.t(e.i),
        Bundle::Initial | Bundle::InitialBd => 0.0,
        Bundle::Final | Bundle::FinalBd => mesh.t_final,
    };
    let x = if e.family.on_boundary() { mesh.xi(Side::from_index(e.c)) } else { mesh.x(e.c) };
    (t, x)
}

/// Weight of an equation location in the Hamiltonian's spatial measure.
#[inline]
fn eq_space_weight(mesh: &Mesh, e: EqNode) -> f64 {
    if e.family.on_boundary() {
        1.0
    } else {
        mesh.wx(e.c)
    }
}

/// One quadrature sample of a kernel at an equation node.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Pair {
    /// Sample time row (0 for slice bundles).
    pub k: usize,
    /// Sample column or side.
    pub l: usize,
    /// Weight in the discretized state equation.
    pub w_fwd: f64,
    /// Weight in the discretized Hamiltonian accumulation.
    pub w_hel: f64,
    pub coords: Coords,
}

/// Enumerates the samples of a kernel with signature `sig` at equation
/// node `e`.
///
/// The Hamiltonian weight of a Volterra pair is the forward trapezoid
/// weight rescaled by `wt(i) / wt(k)`, so that the co-state equations are the
/// exact transpose of the discrete state equations.
#[inline]
pub(crate) fn for_each_pair(mesh: &Mesh, sig: Signature, e: EqNode, mut f: impl FnMut(&Pair)) {
    let (t, x) = eq_coords(mesh, e);
    let nt = mesh.nt;
    let (k_lo, k_hi) = match sig.time {
        TimeCoupling::Instant => (e.i, e.i),
        TimeCoupling::Volterra => (0, e.i),
        TimeCoupling::Whole => (0, nt),
        TimeCoupling::None => (0, 0),
    };
    let (l_lo, l_hi) = match sig.space {
        SpaceCoupling::Local => (e.c, e.c),
        SpaceCoupling::Domain => (0, mesh.nx),
        SpaceCoupling::Boundary => (0, 1),
    };
    let hel_space = match sig.space {
        SpaceCoupling::Local => 1.0,
        _ => eq_space_weight(mesh, e),
    };
    for k in k_lo..=k_hi {
        let (wt_f, wt_h, s) = match sig.time {
            TimeCoupling::Instant | TimeCoupling::None => (1.0, 1.0, t),
            TimeCoupling::Volterra => {
                let w = trap_weight(k, 0, e.i, mesh.dt);
                (w, w * mesh.wt(e.i) / mesh.wt(k), mesh.t(k))
            }
            TimeCoupling::Whole => (mesh.wt(k), 1.0, mesh.t(k)),
        };
        for l in l_lo..=l_hi {
            let (ws_f, y) = match sig.space {
                SpaceCoupling::Local => (1.0, x),
                SpaceCoupling::Domain => (mesh.wx(l), mesh.x(l)),
                SpaceCoupling::Boundary => (1.0, mesh.xi(Side::from_index(l))),
            };
            f(&Pair {
                k,
                l,
                w_fwd: wt_f * ws_f,
                w_hel: wt_h * hel_space,
                coords: Coords { t, x, s, y },
            });
        }
    }
}

fn node_label(mesh: &Mesh, e: EqNode) -> String {
    let (t, x) = eq_coords(mesh, e);
    format!("{:?} node (i={}, col={}, t={t}, x={x})", e.family, e.i, e.c)
}

/// Sum of all registered kernels of `e.family` at equation node `e`.
pub(crate) fn rhs_at(problem: &Problem, mesh: &Mesh, fields: &Fields, e: EqNode, out: &mut [f64]) -> Result<()> {
    out.fill(0.0);
    let n = problem.n;
    let mut buf = vec![0.0; n];
    for (id, k) in problem.kernels_for(e.family) {
        let sig = id.signature();
        let mut bad = false;
        for_each_pair(mesh, sig, e, |p| {
            if p.w_fwd == 0.0 {
                return;
            }
            k.eval(&p.coords, &fields.view(sig.reads, p.k, p.l), &mut buf);
            for a in 0..n {
                out[a] += p.w_fwd * buf[a];
            }
            bad |= buf.iter().any(|v| !v.is_finite());
        });
        if bad {
            return Err(Error::NonFinite {
                source_name: format!("kernel {}", id.name()),
                node: node_label(mesh, e),
            });
        }
    }
    Ok(())
}

/// Which of the four slice equations to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SliceKind {
    Initial,
    Final,
    InitialBd,
    FinalBd,
}

impl SliceKind {
    fn family(self) -> Bundle {
        match self {
            SliceKind::Initial => Bundle::Initial,
            SliceKind::Final => Bundle::Final,
            SliceKind::InitialBd => Bundle::InitialBd,
            SliceKind::FinalBd => Bundle::FinalBd,
        }
    }
}

fn rhs_single(problem: &Problem, mesh: &Mesh, snap: &Snapshot, e: EqNode) -> Result<Vec<f64>> {
    let mut out = vec![0.0; problem.n];
    rhs_at(problem, mesh, &Fields::new(snap), e, &mut out)?;
    Ok(out)
}

fn check_row(mesh: &Mesh, i: usize) -> Result<()> {
    if i > mesh.nt {
        return Err(Error::Index(format!("time row {i} outside 0..={}", mesh.nt)));
    }
    Ok(())
}

/// Right-hand side of the interior equation at `(t_i, x_j)`, `1 <= j < Nx`.
pub fn rhs_interior(problem: &Problem, mesh: &Mesh, snap: &Snapshot, i: usize, j: usize) -> Result<Vec<f64>> {
    check_row(mesh, i)?;
    if j == 0 || j >= mesh.nx {
        return Err(Error::Index(format!("interior equation needs 1 <= j < {}, got {j}", mesh.nx)));
    }
    rhs_single(problem, mesh, snap, EqNode { family: Bundle::Interior, i, c: j })
}

/// Right-hand side of the boundary equation at `(t_i, side)`.
pub fn rhs_boundary(problem: &Problem, mesh: &Mesh, snap: &Snapshot, i: usize, side: Side) -> Result<Vec<f64>> {
    check_row(mesh, i)?;
    rhs_single(problem, mesh, snap, EqNode { family: Bundle::Boundary, i, c: side.index() })
}

/// Right-hand side of a slice equation. `location` is an interior column
/// for `Initial`/`Final` and a side index (0 left, 1 right) otherwise.
pub fn rhs_slice(problem: &Problem, mesh: &Mesh, snap: &Snapshot, which: SliceKind, location: usize) -> Result<Vec<f64>> {
    let family = which.family();
    let ok = if family.on_boundary() { location < 2 } else { location >= 1 && location < mesh.nx };
    if !ok {
        return Err(Error::Index(format!("location {location} invalid for {which:?} slice")));
    }
    rhs_single(problem, mesh, snap, EqNode { family, i: 0, c: location })
}

/// All equation families in assembly order.
pub(crate) const FAMILIES: [Bundle; 6] = Bundle::ALL;

/// Evaluates the right-hand side of every equation and returns it as a
/// state bundle, applying trace consistency on boundary columns.
pub(crate) fn rhs_bundle(problem: &Problem, mesh: &Mesh, snap: &Snapshot) -> Result<StateBundle> {
    let fields = Fields::new(snap);
    let n = problem.n;
    let mut out = StateBundle::zeros(mesh, n);
    for fam in FAMILIES {
        if problem.kernels_for(fam).next().is_none() {
            continue;
        }
        let nodes = eq_nodes(mesh, fam);
        let vals: Vec<Vec<f64>> = nodes
            .par_iter()
            .map(|&e| {
                let mut v = vec![0.0; n];
                rhs_at(problem, mesh, &fields, e, &mut v).map(|_| v)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut blk = out.block_mut(fam.state_block());
        for (e, v) in nodes.iter().zip(vals) {
            for a in 0..n {
                blk[[e.i, e.c, a]] = v[a];
            }
        }
    }
    apply_trace_consistency(mesh, &mut out);
    Ok(out)
}

/// Copies boundary values into the boundary columns of the x-indexed blocks.
pub(crate) fn apply_trace_consistency(mesh: &Mesh, s: &mut StateBundle) {
    let n = s.dim();
    for side in Side::BOTH {
        let b = mesh.boundary_column(side);
        for i in 0..=mesh.nt {
            for a in 0..n {
                s.phi[[i, b, a]] = s.phi_bd[[i, side.index(), a]];
            }
        }
        for a in 0..n {
            s.phi0[[b, a]] = s.phi0_bd[[side.index(), a]];
            s.phi_t[[b, a]] = s.phi_t_bd[[side.index(), a]];
        }
    }
}

/// Flat output rows (component 0) written by an equation node: its own
/// unknown plus, for boundary families, the mirrored boundary column.
pub(crate) fn output_rows(mesh: &Mesh, idx: &FlatIndex, e: EqNode) -> ([usize; 2], usize) {
    let own = idx.base(e.family.state_block(), e.i, e.c);
    let mirror = match e.family {
        Bundle::Boundary => Some(idx.base(StateBlock::Phi, e.i, mesh.boundary_column(Side::from_index(e.c)))),
        Bundle::InitialBd => Some(idx.base(StateBlock::Phi0, 0, mesh.boundary_column(Side::from_index(e.c)))),
        Bundle::FinalBd => Some(idx.base(StateBlock::PhiT, 0, mesh.boundary_column(Side::from_index(e.c)))),
        _ => None,
    };
    match mirror {
        Some(m) => ([own, m], 2),
        None => ([own, 0], 1),
    }
}

/// Enumerates the flat state unknowns (component 0 offsets) a state slot
/// at sample node `(k, l)` depends on, with stencil coefficients.
pub(crate) fn slot_taps(mesh: &Mesh, idx: &FlatIndex, slot: Slot, k: usize, l: usize, mut f: impl FnMut(usize, f64)) {
    let dt = mesh.time_stencil(DiffOrder::First);
    let dx = mesh.space_stencil(DiffOrder::First);
    let dxx = mesh.space_stencil(DiffOrder::Second);
    let one = |blk: StateBlock, r: usize, c: usize, f: &mut dyn FnMut(usize, f64)| f(idx.base(blk, r, c), 1.0);
    // boundary trace of Dx with the boundary entry read from `bd_blk`
    let trace = |blk: StateBlock, bd_blk: StateBlock, r: usize, side: usize, scale: f64, f: &mut dyn FnMut(usize, f64)| {
        let s = Side::from_index(side);
        let b = mesh.boundary_column(s);
        for (j, w) in dx.taps(b).iter() {
            if j == b {
                f(idx.base(bd_blk, r, side), scale * w);
            } else {
                f(idx.base(blk, r, j), scale * w);
            }
        }
    };
    let f: &mut dyn FnMut(usize, f64) = &mut f;
    match slot {
        Slot::Phi => one(StateBlock::Phi, k, l, f),
        Slot::P => emit(&dx.taps(l), |j, w| f(idx.base(StateBlock::Phi, k, j), w)),
        Slot::Q => emit(&dxx.taps(l), |j, w| f(idx.base(StateBlock::Phi, k, j), w)),
        Slot::PhiDot => emit(&dt.taps(k), |r, w| f(idx.base(StateBlock::Phi, r, l), w)),
        Slot::PDot => emit(&dt.taps(k), |r, wt| emit(&dx.taps(l), |j, w| f(idx.base(StateBlock::Phi, r, j), wt * w))),
        Slot::QDot => emit(&dt.taps(k), |r, wt| emit(&dxx.taps(l), |j, w| f(idx.base(StateBlock::Phi, r, j), wt * w))),
        Slot::PhiBd => one(StateBlock::PhiBd, k, l, f),
        Slot::PhiBdDot => emit(&dt.taps(k), |r, w| f(idx.base(StateBlock::PhiBd, r, l), w)),
        Slot::PBd => trace(StateBlock::Phi, StateBlock::PhiBd, k, l, 1.0, f),
        Slot::PBdDot => {
            for (r, wt) in dt.taps(k).iter() {
                trace(StateBlock::Phi, StateBlock::PhiBd, r, l, wt, f);
            }
        }
        Slot::Phi0 => one(StateBlock::Phi0, 0, l, f),
        Slot::P0 => emit(&dx.taps(l), |j, w| f(idx.base(StateBlock::Phi0, 0, j), w)),
        Slot::Q0 => emit(&dxx.taps(l), |j, w| f(idx.base(StateBlock::Phi0, 0, j), w)),
        Slot::PhiT => one(StateBlock::PhiT, 0, l, f),
        Slot::PT => emit(&dx.taps(l), |j, w| f(idx.base(StateBlock::PhiT, 0, j), w)),
        Slot::QT => emit(&dxx.taps(l), |j, w| f(idx.base(StateBlock::PhiT, 0, j), w)),
        Slot::Phi0Bd => one(StateBlock::Phi0Bd, 0, l, f),
        Slot::P0Bd => trace(StateBlock::Phi0, StateBlock::Phi0Bd, 0, l, 1.0, f),
        Slot::PhiTBd => one(StateBlock::PhiTBd, 0, l, f),
        Slot::PTBd => trace(StateBlock::PhiT, StateBlock::PhiTBd, 0, l, 1.0, f),
        Slot::U | Slot::W | Slot::U0 | Slot::UT | Slot::W0 | Slot::WT => {}
    }
}

#[inline]
fn emit(t: &Taps, mut f: impl FnMut(usize, f64)) {
    for (m, w) in t.iter() {
        f(m, w);
    }
}

/// Gather form of the co-state operators: the slot-partial entries
/// `(slot, k, l, coef)` combined into the co-state of block `blk` at node
/// `(i, c)`. Boundary columns of x-indexed co-states receive nothing.
pub(crate) fn theta_taps(mesh: &Mesh, blk: StateBlock, i: usize, c: usize, mut f: impl FnMut(Slot, usize, usize, f64)) {
    let dt = mesh.time_stencil(DiffOrder::First);
    let dx = mesh.space_stencil(DiffOrder::First);
    let dxx = mesh.space_stencil(DiffOrder::Second);
    let interior_col = c >= 1 && c < mesh.nx;
    match blk {
        StateBlock::Phi => {
            if !interior_col {
                return;
            }
            f(Slot::Phi, i, c, 1.0);
            emit(&dt.taps(i), |k, w| f(Slot::PhiDot, k, c, -w));
            emit(&dx.taps(c), |l, w| f(Slot::P, i, l, -w));
            emit(&dt.taps(i), |k, wt| emit(&dx.taps(c), |l, w| f(Slot::PDot, k, l, wt * w)));
            emit(&dxx.taps(c), |l, w| f(Slot::Q, i, l, w));
            emit(&dt.taps(i), |k, wt| emit(&dxx.taps(c), |l, w| f(Slot::QDot, k, l, -wt * w)));
        }
        StateBlock::PhiBd => {
            let side = Side::from_index(c);
            let nrm = side.normal();
            let b = mesh.boundary_column(side);
            f(Slot::PhiBd, i, c, 1.0);
            emit(&dt.taps(i), |k, w| f(Slot::PhiBdDot, k, c, -w));
            f(Slot::PBd, i, c, nrm);
            emit(&dt.taps(i), |k, w| f(Slot::PBdDot, k, c, -nrm * w));
            // normal traces of the interior flux partials
            f(Slot::P, i, b, nrm);
            emit(&dt.taps(i), |k, w| f(Slot::PDot, k, b, -nrm * w));
            emit(&dx.taps(b), |l, w| f(Slot::Q, i, l, -nrm * w));
            emit(&dt.taps(i), |k, wt| emit(&dx.taps(b), |l, w| f(Slot::QDot, k, l, nrm * wt * w)));
        }
        StateBlock::Phi0 | StateBlock::PhiT => {
            if !interior_col {
                return;
            }
            let (phi, p, q) = if blk == StateBlock::Phi0 {
                (Slot::Phi0, Slot::P0, Slot::Q0)
            } else {
                (Slot::PhiT, Slot::PT, Slot::QT)
            };
            f(phi, 0, c, 1.0);
            emit(&dx.taps(c), |l, w| f(p, 0, l, -w));
            emit(&dxx.taps(c), |l, w| f(q, 0, l, w));
        }
        StateBlock::Phi0Bd | StateBlock::PhiTBd => {
            let side = Side::from_index(c);
            let nrm = side.normal();
            let b = mesh.boundary_column(side);
            let (phi_bd, p_bd, p, q) = if blk == StateBlock::Phi0Bd {
                (Slot::Phi0Bd, Slot::P0Bd, Slot::P0, Slot::Q0)
            } else {
                (Slot::PhiTBd, Slot::PTBd, Slot::PT, Slot::QT)
            };
            f(phi_bd, 0, c, 1.0);
            f(p_bd, 0, c, nrm);
            f(p, 0, b, nrm);
            emit(&dx.taps(b), |l, w| f(q, 0, l, -nrm * w));
        }
    }
}

/// Quadrature weight and coordinates of the cost integrand nodes.
pub(crate) struct CostNode {
    pub k: usize,
    pub l: usize,
    pub weight: f64,
    pub coords: Coords,
}

pub(crate) fn cost_nodes(mesh: &Mesh, id: CostId) -> Vec<CostNode> {
    let mut out = Vec::new();
    let tf = mesh.t_final;
    match id {
        CostId::F0 => {
            for l in 0..=mesh.nx {
                let x = mesh.x(l);
                out.push(CostNode { k: 0, l, weight: mesh.wx(l), coords: Coords { t: 0.0, x, s: tf, y: x } });
            }
        }
        CostId::G0 => {
            for side in Side::BOTH {
                let x = mesh.xi(side);
                out.push(CostNode { k: 0, l: side.index(), weight: 1.0, coords: Coords { t: 0.0, x, s: tf, y: x } });
            }
        }
        CostId::F1 => {
            for k in 0..=mesh.nt {
                for l in 0..=mesh.nx {
                    let (t, x) = (mesh.t(k), mesh.x(l));
                    out.push(CostNode { k, l, weight: mesh.wt(k) * mesh.wx(l), coords: Coords { t, x, s: t, y: x } });
                }
            }
        }
        CostId::G1 => {
            for k in 0..=mesh.nt {
                for side in Side::BOTH {
                    let (t, x) = (mesh.t(k), mesh.xi(side));
                    out.push(CostNode { k, l: side.index(), weight: mesh.wt(k), coords: Coords { t, x, s: t, y: x } });
                }
            }
        }
    }
    out
}

/// Slot view of a cost integrand at a cost node.
pub(crate) fn cost_view<'a>(fields: &Fields<'a>, id: CostId, node: &CostNode) -> SlotView<'a> {
    match id {
        CostId::F0 => fields.view2(Bundle::Initial, Bundle::Final, node.l),
        CostId::G0 => fields.view2(Bundle::InitialBd, Bundle::FinalBd, node.l),
        CostId::F1 => fields.view(Bundle::Interior, node.k, node.l),
        CostId::G1 => fields.view(Bundle::Boundary, node.k, node.l),
    }
}

/// Grid of the array storing slot-partials of `slot`: `(rows, cols)`.
pub(crate) fn slot_grid(mesh: &Mesh, slot: Slot) -> (usize, usize) {
    let b = slot.bundle();
    let rows = if b.has_time() { mesh.nt + 1 } else { 1 };
    let cols = if b.on_boundary() { 2 } else { mesh.nx + 1 };
    (rows, cols)
}

/// Registered kernels of every family, with their signatures.
pub(crate) fn registered(problem: &Problem) -> Vec<(KernelId, Signature, &dyn Kernel)> {
    KernelId::ALL
        .into_iter()
        .filter_map(|id| problem.kernel(id).map(|k| (id, id.signature(), k.as_ref())))
        .collect()
}
