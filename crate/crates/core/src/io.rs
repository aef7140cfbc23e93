//! CSV artifacts. Field files use `t,x,k,value`, boundary files
//! `t,side,k,value`; reports are named-column tables. Floats are written in
//! shortest round-trip scientific form so identical inputs give identical
//! bytes.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use ndarray::ArrayView3;

use crate::error::{Error, Result};
use crate::forward::SolveReport;
use crate::mesh::{Mesh, Side};
use crate::optimize::OptimizeHistory;
use crate::state::{ControlBlock, ControlBundle, StateBlock, StateBundle};
use crate::verify::{GradCheckReport, RefinementTable};

/// Formats a float for CSV output.
pub fn fmt(v: f64) -> String {
    format!("{v:e}")
}

fn io_err(e: impl std::fmt::Display) -> Error {
    Error::Config(format!("I/O failure: {e}"))
}

/// A header plus rows of already formatted cells.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Table {
        Table {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(&self.header).map_err(io_err)?;
        for r in &self.rows {
            wr.write_record(r).map_err(io_err)?;
        }
        wr.flush().map_err(io_err)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(File::create(path).map_err(|e| io_err(format!("{}: {e}", path.display())))?)
    }

    pub fn to_string_csv(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        String::from_utf8(buf).map_err(io_err)
    }
}

/// Rows of a node-indexed block. `boundary` selects the side-column schema;
/// `coords` maps `(row, col)` to `(t, x)`.
fn block_table(data: &ArrayView3<f64>, boundary: bool, coords: impl Fn(usize, usize) -> (f64, f64)) -> Table {
    let mut t = Table::new(if boundary { &["t", "side", "k", "value"] } else { &["t", "x", "k", "value"] });
    for ((r, c, k), v) in data.indexed_iter() {
        let (time, x) = coords(r, c);
        let loc = if boundary { Side::from_index(c).name().to_string() } else { fmt(x) };
        t.push(vec![fmt(time), loc, k.to_string(), fmt(*v)]);
    }
    t
}

pub fn state_table(mesh: &Mesh, state: &StateBundle, blk: StateBlock) -> Table {
    let boundary = matches!(blk, StateBlock::PhiBd | StateBlock::Phi0Bd | StateBlock::PhiTBd);
    block_table(&state.block(blk), boundary, |r, c| {
        let t = match blk {
            StateBlock::Phi | StateBlock::PhiBd => mesh.t(r),
            StateBlock::Phi0 | StateBlock::Phi0Bd => 0.0,
            StateBlock::PhiT | StateBlock::PhiTBd => mesh.t_final,
        };
        (t, if boundary { 0.0 } else { mesh.x(c) })
    })
}

pub fn control_table(mesh: &Mesh, controls: &ControlBundle, blk: ControlBlock) -> Table {
    block_table(&controls.block(blk), blk.is_boundary(), |r, c| blk.coords(mesh, r, c))
}

/// Writes `<prefix><block>.csv` for all six state blocks.
pub fn save_state(dir: &Path, prefix: &str, mesh: &Mesh, state: &StateBundle) -> Result<()> {
    for blk in StateBlock::ALL {
        state_table(mesh, state, blk).save(&dir.join(format!("{prefix}{}.csv", blk.name())))?;
    }
    Ok(())
}

/// Writes `<prefix><block>.csv` for all six control blocks.
pub fn save_controls(dir: &Path, prefix: &str, mesh: &Mesh, controls: &ControlBundle) -> Result<()> {
    for blk in ControlBlock::ALL {
        control_table(mesh, controls, blk).save(&dir.join(format!("{prefix}{}.csv", blk.name())))?;
    }
    Ok(())
}

pub fn solve_report_table(r: &SolveReport) -> Table {
    let mut t = Table::new(&["iteration", "residual", "converged"]);
    for (i, v) in r.residual_history.iter().enumerate() {
        t.push(vec![(i + 1).to_string(), fmt(*v), (r.converged && i + 1 == r.iterations).to_string()]);
    }
    t
}

pub fn grad_check_table(r: &GradCheckReport) -> Table {
    let mut t = Table::new(&["block", "direction", "seed", "fd", "adjoint", "dto", "rel_adjoint", "rel_dto", "pass"]);
    let opt = |v: Option<f64>| v.map(fmt).unwrap_or_default();
    for row in &r.rows {
        t.push(vec![
            row.block.name().to_string(),
            row.direction.to_string(),
            row.seed.to_string(),
            fmt(row.fd),
            fmt(row.adjoint),
            opt(row.dto),
            fmt(row.rel_adjoint),
            opt(row.rel_dto),
            row.pass.to_string(),
        ]);
    }
    t
}

pub fn refinement_table(r: &RefinementTable) -> Table {
    let mut t = Table::new(&["metric", "nt", "nx", "error", "order"]);
    for row in &r.rows {
        t.push(vec![
            r.metric.name().to_string(),
            row.nt.to_string(),
            row.nx.to_string(),
            fmt(row.error),
            row.order.map(fmt).unwrap_or_default(),
        ]);
    }
    t
}

pub fn history_table(h: &OptimizeHistory) -> Table {
    let mut t = Table::new(&["iteration", "J", "gnorm", "step", "forward_iters"]);
    for r in &h.rows {
        t.push(vec![r.iteration.to_string(), fmt(r.cost), fmt(r.gnorm), fmt(r.step), r.forward_iters.to_string()]);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_mesh;

    #[test]
    fn field_and_boundary_schemas() {
        let mesh = build_mesh(1.0, 4, 0.0, 1.0, 4).unwrap();
        let mut s = StateBundle::zeros(&mesh, 1);
        s.phi[[4, 2, 0]] = 0.25;
        s.phi_bd[[0, 1, 0]] = -1.5;
        let f = state_table(&mesh, &s, StateBlock::Phi).to_string_csv().unwrap();
        assert!(f.starts_with("t,x,k,value\n"));
        assert!(f.contains("1e0,5e-1,0,2.5e-1\n"), "{f}");
        assert_eq!(f.lines().count(), 1 + 25);
        let b = state_table(&mesh, &s, StateBlock::PhiBd).to_string_csv().unwrap();
        assert!(b.starts_with("t,side,k,value\n"));
        assert!(b.contains("0e0,right,0,-1.5e0\n"), "{b}");
        let c = control_table(&mesh, &ControlBundle::zeros(&mesh, 1, 1), ControlBlock::WT).to_string_csv().unwrap();
        assert_eq!(c, "t,side,k,value\n1e0,left,0,0e0\n1e0,right,0,0e0\n");
    }

    #[test]
    fn floats_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 6.02e23] {
            assert_eq!(fmt(v).parse::<f64>().unwrap(), v);
        }
    }
}
