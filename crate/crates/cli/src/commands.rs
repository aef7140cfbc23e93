//! Subcommand implementations. Each writes its CSV artifacts into the
//! output directory and returns the lines to print plus an exit code.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use biload_core::forward::{cost_of_controls, solve_forward};
use biload_core::io::{self, fmt, Table};
use biload_core::kernels::{make_model, Problem};
use biload_core::mesh::{build_mesh, CurveMesh, Mesh};
use biload_core::optimize::run_gd;
use biload_core::verify::{gradient_check, ibp_fields, ibp_residual, refinement_study, skew_adjoint_residual, RefinementTable};

use crate::config::{ConfigError, RunSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Solve,
    Cost,
    GradCheck,
    Optimize,
    IbpDemo,
    CurveDemo,
    Refine,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Cost => "cost",
            Command::GradCheck => "grad-check",
            Command::Optimize => "optimize",
            Command::IbpDemo => "ibp-demo",
            Command::CurveDemo => "curve-demo",
            Command::Refine => "refine",
        }
    }

    /// Whether the command needs a model and therefore a config file.
    pub fn needs_config(self) -> bool {
        !matches!(self, Command::IbpDemo | Command::CurveDemo)
    }
}

#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    Core(biload_core::Error),
    Io(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Core(e) => e.kind(),
            CliError::Io(_) => "io",
        }
    }

    /// One line: `error kind=<kind> message="<escaped text>"`.
    pub fn machine_line(&self) -> String {
        let msg = match self {
            CliError::Config(e) => e.to_string(),
            CliError::Core(e) => e.to_string(),
            CliError::Io(e) => e.clone(),
        };
        format!("error kind={} message={:?}", self.kind(), msg)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<biload_core::Error> for CliError {
    fn from(e: biload_core::Error) -> Self {
        CliError::Core(e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub exit_code: i32,
    pub lines: Vec<String>,
}

impl Outcome {
    fn ok(lines: Vec<String>) -> Outcome {
        Outcome { exit_code: 0, lines }
    }
}

/// Curve sizes used by `curve-demo`.
pub const CURVE_SIZES: [usize; 6] = [8, 16, 32, 64, 128, 256];
/// Threshold for the discrete skew-adjoint identity.
pub const CURVE_TOL: f64 = 1e-13;

pub fn run(spec: Option<&RunSpec>, cmd: Command, out: &Path, seed: u64) -> Result<Outcome, CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    if cmd == Command::CurveDemo {
        return curve_demo(out, seed);
    }
    if cmd == Command::IbpDemo {
        let default_mesh;
        let (mesh, levels) = match spec {
            Some(s) => (&s.mesh, s.verify.levels),
            None => {
                default_mesh = build_mesh(1.0, 8, 0.0, 1.0, 8)?;
                (&default_mesh, 3)
            }
        };
        return ibp_demo(mesh, levels, out);
    }
    let spec = spec.ok_or_else(|| CliError::Config(ConfigError { line: None, key: None, message: format!("{} needs --config", cmd.name()) }))?;
    let problem = make_model(&spec.model)?;
    match cmd {
        Command::Solve => solve(spec, &problem, out),
        Command::Cost => cost(spec, &problem, out),
        Command::GradCheck => grad_check(spec, &problem, out),
        Command::Optimize => optimize(spec, &problem, out),
        Command::Refine => refine(spec, &problem, out),
        Command::IbpDemo | Command::CurveDemo => unreachable!(),
    }
}

fn solve(spec: &RunSpec, p: &Problem, out: &Path) -> Result<Outcome, CliError> {
    let controls = spec.initial_controls(&spec.mesh, p.m_u, p.m_w);
    let (state, rep) = solve_forward(p, &spec.mesh, &controls, &spec.solver)?;
    io::save_state(out, "", &spec.mesh, &state)?;
    io::solve_report_table(&rep).save(&out.join("solve_report.csv"))?;
    let line = format!("solve model={} iterations={} residual={} converged={}", p.name, rep.iterations, fmt(rep.final_residual), rep.converged);
    Ok(Outcome { exit_code: if rep.converged { 0 } else { 1 }, lines: vec![line] })
}

fn cost(spec: &RunSpec, p: &Problem, out: &Path) -> Result<Outcome, CliError> {
    let controls = spec.initial_controls(&spec.mesh, p.m_u, p.m_w);
    let (j, _, rep) = cost_of_controls(p, &spec.mesh, &controls, &spec.solver)?;
    let mut t = Table::new(&["model", "J", "forward_iters", "residual"]);
    t.push(vec![p.name.clone(), fmt(j), rep.iterations.to_string(), fmt(rep.final_residual)]);
    t.save(&out.join("cost.csv"))?;
    Ok(Outcome::ok(vec![format!("J = {}", fmt(j))]))
}

fn grad_check(spec: &RunSpec, p: &Problem, out: &Path) -> Result<Outcome, CliError> {
    let controls = spec.initial_controls(&spec.mesh, p.m_u, p.m_w);
    let rep = gradient_check(p, &spec.mesh, &controls, &spec.grad_check_options())?;
    io::grad_check_table(&rep).save(&out.join("grad_check.csv"))?;
    let mut lines = vec![format!(
        "grad-check model={} nt={} nx={} rows={} max_rel_adjoint={} max_rel_dto={} pass={}",
        p.name,
        rep.nt,
        rep.nx,
        rep.rows.len(),
        fmt(rep.max_rel_adjoint()),
        rep.max_rel_dto().map(fmt).unwrap_or_else(|| "n/a".into()),
        rep.passed
    )];
    for b in rep.failing_blocks() {
        lines.push(format!("failing block {}", b.name()));
    }
    Ok(Outcome { exit_code: if rep.passed { 0 } else { 1 }, lines })
}

fn optimize(spec: &RunSpec, p: &Problem, out: &Path) -> Result<Outcome, CliError> {
    let controls = spec.initial_controls(&spec.mesh, p.m_u, p.m_w);
    let (best, hist) = run_gd(p, &spec.mesh, &controls, &spec.optimize, &spec.solver)?;
    io::history_table(&hist).save(&out.join("history.csv"))?;
    io::save_controls(out, "control_", &spec.mesh, &best)?;
    let first = &hist.rows[0];
    let last = hist.rows.last().expect("history has a first row");
    let line = format!(
        "optimize model={} status={} iterations={} J0={} J={} gnorm0={} gnorm={}",
        p.name,
        hist.status.name(),
        last.iteration,
        fmt(first.cost),
        fmt(last.cost),
        fmt(first.gnorm),
        fmt(last.gnorm)
    );
    Ok(Outcome::ok(vec![line]))
}

fn refine(spec: &RunSpec, p: &Problem, out: &Path) -> Result<Outcome, CliError> {
    let t = refinement_study(p, &spec.mesh, spec.verify.levels, spec.verify.metric, &spec.study_setup())?;
    io::refinement_table(&t).save(&out.join("refine.csv"))?;
    Ok(Outcome::ok(table_lines(&t)))
}

fn table_lines(t: &RefinementTable) -> Vec<String> {
    t.rows
        .iter()
        .map(|r| {
            let order = r.order.map(|o| format!("{o:.3}")).unwrap_or_else(|| "-".into());
            format!("{} nt={} nx={} error={} order={}", t.metric.name(), r.nt, r.nx, fmt(r.error), order)
        })
        .collect()
}

fn ibp_demo(base: &Mesh, levels: usize, out: &Path) -> Result<Outcome, CliError> {
    let mut t = Table::new(&["nt", "nx", "r1", "r2", "r1_p_independent", "r2_p_independent"]);
    let mut lines = Vec::new();
    let mut prev: Option<f64> = None;
    let mut ok = true;
    for lvl in 0..levels {
        let mesh = base.refined(1 << lvl)?;
        let (a, b, v) = ibp_fields(&mesh);
        let (r1, r2) = ibp_residual(&mesh, &a.view(), &b.view(), &v.view())?;
        let zero = ndarray::Array2::zeros(a.dim());
        let (z1, z2) = ibp_residual(&mesh, &zero.view(), &zero.view(), &v.view())?;
        ok &= z1 == 0.0 && z2 == 0.0;
        let e = r1.abs().max(r2.abs());
        let order = prev.map(|p| (p / e).log2());
        ok &= order.is_none_or(|o| o >= 1.0);
        prev = Some(e);
        t.push(vec![mesh.nt.to_string(), mesh.nx.to_string(), fmt(r1), fmt(r2), fmt(z1), fmt(z2)]);
        lines.push(format!(
            "ibp nt={} nx={} r1={} r2={} order={} p_independent=({}, {})",
            mesh.nt,
            mesh.nx,
            fmt(r1),
            fmt(r2),
            order.map(|o| format!("{o:.3}")).unwrap_or_else(|| "-".into()),
            fmt(z1),
            fmt(z2)
        ));
    }
    t.save(&out.join("ibp.csv"))?;
    lines.push(format!("ibp-demo pass={ok}"));
    Ok(Outcome { exit_code: if ok { 0 } else { 1 }, lines })
}

fn curve_demo(out: &Path, seed: u64) -> Result<Outcome, CliError> {
    let mut t = Table::new(&["m", "pair", "residual"]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for m in CURVE_SIZES {
        let c = CurveMesh::new(m, 1.0)?;
        let tau = std::f64::consts::TAU;
        let s = |k: usize| k as f64 * c.ds;
        let pairs: Vec<(&str, Vec<f64>, Vec<f64>)> = vec![
            ("constant", vec![1.0; m], vec![-2.0; m]),
            ("random", (0..m).map(|_| rng.random_range(-1.0..1.0)).collect(), (0..m).map(|_| rng.random_range(-1.0..1.0)).collect()),
            ("fourier", (0..m).map(|k| (tau * s(k)).sin()).collect(), (0..m).map(|k| (2.0 * tau * s(k)).cos()).collect()),
        ];
        for (name, psi, phi) in pairs {
            let r = skew_adjoint_residual(&c, &psi, &phi)?;
            worst = worst.max(r.abs());
            t.push(vec![m.to_string(), name.to_string(), fmt(r)]);
        }
    }
    t.save(&out.join("curve.csv"))?;
    let pass = worst <= CURVE_TOL;
    Ok(Outcome {
        exit_code: if pass { 0 } else { 1 },
        lines: vec![format!("curve-demo max_residual={} pass={pass}", fmt(worst))],
    })
}

/// Full example configuration for a builtin model, used by the README and
/// the tests.
pub fn example_config(model: &str, nt: usize, nx: usize) -> String {
    format!(
        "[mesh]\nT_final = 1.0\nNt = {nt}\nx_a = 0.0\nx_b = 1.0\nNx = {nx}\n\n[model]\nname = {model}\n\n[solver]\ntol = 1e-10\nmethod = newton\n\n[controls]\nu = sine * 0.3\nw = 0.1\n\n[verify]\nseed = 0\nn_dirs = 5\n"
    )
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
