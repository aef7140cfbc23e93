//! Projected gradient descent with Armijo backtracking on the reduced cost.

use crate::adjoint::{adjoint_gradient, AdjointSolution};
use crate::error::{Error, Result};
use crate::forward::{cost_of_controls, SolverConfig};
use crate::kernels::Problem;
use crate::mesh::Mesh;
use crate::state::{ControlBlock, ControlBundle};

/// Smallest step tried before the line search gives up.
pub const MIN_STEP: f64 = 1e-12;

/// Componentwise box `[lo, hi]` per control block; `None` leaves a block free.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Bounds {
    boxes: [Option<(f64, f64)>; 6],
}

impl Bounds {
    pub fn new() -> Bounds {
        Bounds::default()
    }

    pub fn with(mut self, blk: ControlBlock, lo: f64, hi: f64) -> Result<Bounds> {
        self.set(blk, lo, hi)?;
        Ok(self)
    }

    pub fn set(&mut self, blk: ControlBlock, lo: f64, hi: f64) -> Result<()> {
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return Err(Error::Config(format!("bounds for {} are not ordered: [{lo}, {hi}]", blk.name())));
        }
        self.boxes[blk as usize] = Some((lo, hi));
        Ok(())
    }

    pub fn get(&self, blk: ControlBlock) -> Option<(f64, f64)> {
        self.boxes[blk as usize]
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.iter().all(Option::is_none)
    }

    /// Whether every component of `c` lies inside its box.
    pub fn contains(&self, c: &ControlBundle) -> bool {
        ControlBlock::ALL.into_iter().all(|blk| match self.get(blk) {
            Some((lo, hi)) => c.block(blk).iter().all(|v| (lo..=hi).contains(v)),
            None => true,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeOptions {
    pub max_outer: usize,
    pub armijo_c: f64,
    pub backtrack: f64,
    pub step0: f64,
    pub gtol: f64,
    pub bounds: Bounds,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        OptimizeOptions {
            max_outer: 50,
            armijo_c: 1e-4,
            backtrack: 0.5,
            step0: 1.0,
            gtol: 1e-8,
            bounds: Bounds::new(),
        }
    }
}

impl OptimizeOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.armijo_c > 0.0 && self.armijo_c < 1.0) {
            return Err(Error::Config(format!("armijo_c must lie in (0, 1), got {}", self.armijo_c)));
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return Err(Error::Config(format!("backtrack must lie in (0, 1), got {}", self.backtrack)));
        }
        if !(self.step0 > 0.0 && self.step0.is_finite()) {
            return Err(Error::Config(format!("step0 must be positive, got {}", self.step0)));
        }
        if !(self.gtol >= 0.0) {
            return Err(Error::Config(format!("gtol must be non-negative, got {}", self.gtol)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizeStatus {
    Converged,
    MaxIterations,
    LineSearchFailed,
}

impl OptimizeStatus {
    pub fn name(self) -> &'static str {
        match self {
            OptimizeStatus::Converged => "converged",
            OptimizeStatus::MaxIterations => "max_iterations",
            OptimizeStatus::LineSearchFailed => "line_search_failed",
        }
    }
}

/// One accepted iterate. Row 0 is the starting point with step 0.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub iteration: usize,
    pub cost: f64,
    pub gnorm: f64,
    pub step: f64,
    /// Forward iterations spent reaching this iterate, line search included.
    pub forward_iters: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeHistory {
    pub rows: Vec<HistoryRow>,
    pub status: OptimizeStatus,
}

impl OptimizeHistory {
    pub fn initial_cost(&self) -> f64 {
        self.rows[0].cost
    }

    pub fn final_cost(&self) -> f64 {
        self.rows.last().map(|r| r.cost).unwrap_or(f64::NAN)
    }

    pub fn monotone(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].cost <= w[0].cost)
    }
}

/// Componentwise clamp into the boxes; blocks without a box are copied.
pub fn project(controls: &ControlBundle, bounds: &Bounds) -> ControlBundle {
    let mut out = controls.clone();
    for blk in ControlBlock::ALL {
        if let Some((lo, hi)) = bounds.get(blk) {
            out.block_mut(blk).mapv_inplace(|v| v.clamp(lo, hi));
        }
    }
    out
}

/// Forward failures that reject a trial step instead of aborting the run.
fn rejectable(e: &Error) -> bool {
    matches!(e, Error::NotConverged(_) | Error::Divergence { .. } | Error::NonFinite { .. } | Error::Singular(_))
}

/// `u - P(u - g)`: equal to `g` without bounds.
fn projected_gradient(u: &ControlBundle, g: &ControlBundle, bounds: &Bounds) -> ControlBundle {
    let mut trial = u.clone();
    trial.axpy(-1.0, g);
    let mut pg = u.clone();
    pg.axpy(-1.0, &project(&trial, bounds));
    pg
}

/// Projected gradient descent. Trial steps start at `step0` every outer
/// iteration and shrink by `backtrack` until the projected Armijo condition
/// `J(u+) <= J(u) - c/step * |u+ - u|^2` holds; without active bounds this
/// is `J(u) - c * step * <g, g>`.
pub fn run_gd(
    problem: &Problem,
    mesh: &Mesh,
    controls0: &ControlBundle,
    opts: &OptimizeOptions,
    solver_cfg: &SolverConfig,
) -> Result<(ControlBundle, OptimizeHistory)> {
    opts.validate()?;
    let mut u = project(controls0, &opts.bounds);
    let mut sol: AdjointSolution = adjoint_gradient(problem, mesh, &u, solver_cfg)?;
    let mut gnorm = pg_norm(mesh, &u, &sol, &opts.bounds);
    let mut rows = vec![HistoryRow {
        iteration: 0,
        cost: sol.cost,
        gnorm,
        step: 0.0,
        forward_iters: sol.forward.iterations,
    }];
    let mut status = OptimizeStatus::MaxIterations;
    for it in 1..=opts.max_outer {
        if gnorm <= opts.gtol {
            status = OptimizeStatus::Converged;
            break;
        }
        let g = sol.gradient.as_controls();
        let mut step = opts.step0;
        let mut spent = 0;
        let accepted = loop {
            if step < MIN_STEP {
                break None;
            }
            let mut trial = u.clone();
            trial.axpy(-step, &g);
            let trial = project(&trial, &opts.bounds);
            let mut delta = trial.clone();
            delta.axpy(-1.0, &u);
            let moved = ControlBundle::pairing(mesh, &delta, &delta);
            match cost_of_controls(problem, mesh, &trial, solver_cfg) {
                Ok((cost, _, rep)) => {
                    spent += rep.iterations;
                    if moved > 0.0 && cost <= sol.cost - opts.armijo_c / step * moved {
                        break Some((trial, step));
                    }
                }
                Err(e) if rejectable(&e) => {}
                Err(e) => return Err(e),
            }
            step *= opts.backtrack;
        };
        let Some((next, step)) = accepted else {
            status = OptimizeStatus::LineSearchFailed;
            break;
        };
        u = next;
        sol = adjoint_gradient(problem, mesh, &u, solver_cfg)?;
        gnorm = pg_norm(mesh, &u, &sol, &opts.bounds);
        rows.push(HistoryRow {
            iteration: it,
            cost: sol.cost,
            gnorm,
            step,
            forward_iters: spent + sol.forward.iterations,
        });
    }
    if status == OptimizeStatus::MaxIterations && gnorm <= opts.gtol {
        status = OptimizeStatus::Converged;
    }
    Ok((u, OptimizeHistory { rows, status }))
}

fn pg_norm(mesh: &Mesh, u: &ControlBundle, sol: &AdjointSolution, bounds: &Bounds) -> f64 {
    let pg = projected_gradient(u, &sol.gradient.as_controls(), bounds);
    ControlBundle::pairing(mesh, &pg, &pg).sqrt()
}
