//! Exact derivatives of the discrete residual and cost with respect to the
//! flat state and the controls.

use faer::Mat;
use rayon::prelude::*;

use crate::assembly::{cost_nodes, cost_view, eq_nodes, for_each_pair, output_rows, registered, slot_taps, EqNode, Fields, Snapshot, FAMILIES};
use crate::error::{Error, Result};
use crate::kernels::{CostId, KernelId, Problem, SlotKind, SpaceCoupling, TimeCoupling};
use crate::linalg::Assembler;
use crate::mesh::Mesh;
use crate::state::{ControlBlock, ControlBundle, FlatIndex};

const CHUNK: usize = 512;

/// Runs `per_node` over `nodes` in parallel chunks and feeds the produced
/// items to `sink` in node order.
pub(crate) fn scatter<T: Send>(
    nodes: &[EqNode],
    per_node: impl Fn(EqNode, &mut Vec<T>) -> Result<()> + Sync,
    mut sink: impl FnMut(T),
) -> Result<()> {
    for chunk in nodes.chunks(CHUNK) {
        let parts: Vec<Vec<T>> = chunk
            .par_iter()
            .map(|&e| {
                let mut v = Vec::new();
                per_node(e, &mut v).map(|_| v)
            })
            .collect::<Result<Vec<_>>>()?;
        for part in parts {
            for item in part {
                sink(item);
            }
        }
    }
    Ok(())
}

/// All equation nodes of families with at least one registered kernel.
pub(crate) fn active_nodes(problem: &Problem, mesh: &Mesh) -> Vec<EqNode> {
    FAMILIES
        .iter()
        .filter(|&&f| problem.kernels_for(f).next().is_some())
        .flat_map(|&f| eq_nodes(mesh, f))
        .collect()
}

/// Rough entry count of the state Jacobian, used to choose storage.
pub(crate) fn estimate_nnz(problem: &Problem, mesh: &Mesh) -> usize {
    let mut total = 0usize;
    for (id, k) in KernelId::ALL.iter().filter_map(|&id| problem.kernel(id).map(|k| (id, k))) {
        let sig = id.signature();
        let nodes = eq_nodes(mesh, sig.equation).len();
        let t = match sig.time {
            TimeCoupling::Instant | TimeCoupling::None => 1,
            TimeCoupling::Volterra => mesh.nt / 2 + 1,
            TimeCoupling::Whole => mesh.nt + 1,
        };
        let s = match sig.space {
            SpaceCoupling::Local => 1,
            SpaceCoupling::Domain => mesh.nx + 1,
            SpaceCoupling::Boundary => 2,
        };
        let slots = k.slots().iter().filter(|s| s.kind() == SlotKind::State).count();
        total = total.saturating_add(nodes * t * s * slots * 6 * problem.n * problem.n);
    }
    total
}

/// Jacobian of the assembled right-hand side with respect to the flat
/// state, in [`FlatIndex`] ordering (mirrored boundary-column rows
/// included).
pub(crate) fn rhs_state_jacobian(problem: &Problem, mesh: &Mesh, snap: &Snapshot, force_dense: bool) -> Result<Assembler> {
    let n = problem.n;
    let idx = FlatIndex::new(mesh, n);
    let fields = Fields::new(snap);
    let kernels = registered(problem);
    let mut acc = Assembler::new(idx.len(), estimate_nnz(problem, mesh), force_dense);
    let nodes = active_nodes(problem, mesh);
    scatter(
        &nodes,
        |e, out: &mut Vec<(usize, usize, f64)>| {
            let (rows, nrows) = output_rows(mesh, &idx, e);
            for &(id, sig, k) in kernels.iter().filter(|x| x.1.equation == e.family) {
                for &slot in k.slots().iter().filter(|s| s.kind() == SlotKind::State) {
                    let mut jac = vec![0.0; n * n];
                    let mut bad = false;
                    for_each_pair(mesh, sig, e, |p| {
                        if p.w_fwd == 0.0 {
                            return;
                        }
                        k.partial(slot, &p.coords, &fields.view(sig.reads, p.k, p.l), &mut jac);
                        bad |= jac.iter().any(|v| !v.is_finite());
                        slot_taps(mesh, &idx, slot, p.k, p.l, |col, coef| {
                            let w = p.w_fwd * coef;
                            for &row in &rows[..nrows] {
                                for a in 0..n {
                                    for b in 0..n {
                                        out.push((row + a, col + b, w * jac[a * n + b]));
                                    }
                                }
                            }
                        });
                    });
                    if bad {
                        return Err(Error::NonFinite {
                            source_name: format!("partial of kernel {} in slot {}", id.name(), slot.name()),
                            node: format!("{:?} (i={}, col={})", e.family, e.i, e.c),
                        });
                    }
                }
            }
            Ok(())
        },
        |(r, c, v)| acc.add(r, c, v),
    )?;
    Ok(acc)
}

/// Flat control index of component 0 at node `(k, l)` of `blk`, in
/// [`ControlBundle::pack`] order.
pub(crate) fn control_base(controls: &ControlBundle, blk: ControlBlock, k: usize, l: usize) -> usize {
    let v = controls.block(blk);
    let (_, cols, dim) = v.dim();
    controls.block_offset(blk) + (k * cols + l) * dim
}

/// Dense Jacobian of the right-hand side with respect to the packed
/// controls: `N_flat x N_controls`.
pub(crate) fn rhs_control_jacobian(problem: &Problem, mesh: &Mesh, snap: &Snapshot) -> Result<Mat<f64>> {
    let n = problem.n;
    let idx = FlatIndex::new(mesh, n);
    let fields = Fields::new(snap);
    let kernels = registered(problem);
    let n_ctrl = snap.controls.pack().len();
    let mut m = Mat::zeros(idx.len(), n_ctrl);
    let nodes = active_nodes(problem, mesh);
    scatter(
        &nodes,
        |e, out: &mut Vec<(usize, usize, f64)>| {
            let (rows, nrows) = output_rows(mesh, &idx, e);
            for &(_, sig, k) in kernels.iter().filter(|x| x.1.equation == e.family) {
                for &slot in k.slots() {
                    let Some(blk) = slot.control_block() else { continue };
                    let dim = problem.slot_dim(slot);
                    let mut jac = vec![0.0; n * dim];
                    for_each_pair(mesh, sig, e, |p| {
                        if p.w_fwd == 0.0 {
                            return;
                        }
                        k.partial(slot, &p.coords, &fields.view(sig.reads, p.k, p.l), &mut jac);
                        let col = control_base(snap.controls, blk, p.k, p.l);
                        for &row in &rows[..nrows] {
                            for a in 0..n {
                                for b in 0..dim {
                                    out.push((row + a, col + b, p.w_fwd * jac[a * dim + b]));
                                }
                            }
                        }
                    });
                }
            }
            Ok(())
        },
        |(r, c, v)| m[(r, c)] += v,
    )?;
    Ok(m)
}

/// Gradients of the discrete cost with respect to the flat state and the
/// packed controls.
pub(crate) fn cost_gradients(problem: &Problem, mesh: &Mesh, snap: &Snapshot) -> Result<(Vec<f64>, Vec<f64>)> {
    let idx = FlatIndex::new(mesh, problem.n);
    let fields = Fields::new(snap);
    let mut gs = vec![0.0; idx.len()];
    let mut gu = vec![0.0; snap.controls.pack().len()];
    for id in CostId::ALL {
        let Some(cf) = problem.cost(id) else { continue };
        for node in cost_nodes(mesh, id) {
            let view = cost_view(&fields, id, &node);
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
                match slot.control_block() {
                    Some(blk) => {
                        let col = control_base(snap.controls, blk, node.k, node.l);
                        for b in 0..dim {
                            gu[col + b] += node.weight * g[b];
                        }
                    }
                    None => slot_taps(mesh, &idx, slot, node.k, node.l, |col, coef| {
                        for b in 0..dim {
                            gs[col + b] += node.weight * coef * g[b];
                        }
                    }),
                }
            }
        }
    }
    Ok((gs, gu))
}
