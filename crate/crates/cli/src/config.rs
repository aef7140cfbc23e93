//! Line-oriented run configuration.
//!
//! ```text
//! # comment
//! [section]
//! key = value   # trailing comment
//! ```
//!
//! Sections: `mesh`, `model`, `solver`, `optimize`, `controls`, `verify`,
//! `output`. Unknown sections, unknown keys, repeated keys and malformed
//! lines are rejected with their line number before anything runs.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use biload_core::forward::{SolverConfig, SolverMethod};
use biload_core::kernels::ModelParams;
use biload_core::mesh::{build_mesh, Mesh};
use biload_core::optimize::{Bounds, OptimizeOptions};
use biload_core::state::{ControlBlock, ControlBundle};
use biload_core::verify::{GradCheckOptions, RefinementMetric, SmoothDirection, StudySetup, FD_EPS};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub key: Option<String>,
    pub message: String,
}

impl ConfigError {
    fn at(line: usize, message: impl Into<String>) -> ConfigError {
        ConfigError { line: Some(line), key: None, message: message.into() }
    }

    fn key(line: Option<usize>, key: &str, message: impl Into<String>) -> ConfigError {
        ConfigError { line, key: Some(key.to_string()), message: message.into() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(l) = self.line {
            write!(f, "line {l}: ")?;
        }
        if let Some(k) = &self.key {
            write!(f, "{k}: ")?;
        }
        f.write_str(&self.message)
    }
}

impl std::error::Error for ConfigError {}

/// Initial value of one control block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ControlInit {
    Constant(f64),
    /// `sin(pi (x - x_a) / (x_b - x_a))`, scaled.
    Sine(f64),
    /// Seeded smooth pseudorandom field, scaled.
    Smooth(f64),
}

impl ControlInit {
    fn parse(s: &str) -> Option<ControlInit> {
        if let Ok(v) = s.parse::<f64>() {
            return v.is_finite().then_some(ControlInit::Constant(v));
        }
        let (name, scale) = match s.split_once('*') {
            Some((a, b)) => (a.trim(), b.trim().parse::<f64>().ok().filter(|v| v.is_finite())?),
            None => (s, 1.0),
        };
        match name {
            "sine" => Some(ControlInit::Sine(scale)),
            "smooth" => Some(ControlInit::Smooth(scale)),
            _ => None,
        }
    }

    pub fn eval(self, mesh: &Mesh, blk: ControlBlock, seed: u64, t: f64, x: f64, k: usize) -> f64 {
        match self {
            ControlInit::Constant(v) => v,
            ControlInit::Sine(a) => a * (std::f64::consts::PI * (x - mesh.x_a) / (mesh.x_b - mesh.x_a)).sin(),
            ControlInit::Smooth(a) => a * SmoothDirection::new(seed ^ (0x5eed_0000 + blk as u64)).eval(t, x + 0.37 * k as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifySpec {
    pub seed: u64,
    pub n_dirs: usize,
    pub eps: f64,
    pub adjoint_tol: f64,
    pub dto_tol: f64,
    pub use_dto: bool,
    pub levels: usize,
    pub metric: RefinementMetric,
}

impl Default for VerifySpec {
    fn default() -> Self {
        let g = GradCheckOptions::default();
        VerifySpec {
            seed: 0,
            n_dirs: g.n_dirs,
            eps: FD_EPS,
            adjoint_tol: g.adjoint_tol,
            dto_tol: g.dto_tol,
            use_dto: true,
            levels: 3,
            metric: RefinementMetric::GradientGap,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub model: ModelParams,
    pub mesh: Mesh,
    pub solver: SolverConfig,
    pub optimize: OptimizeOptions,
    pub controls: [ControlInit; 6],
    pub verify: VerifySpec,
    pub out_dir: PathBuf,
}

impl RunSpec {
    pub fn initial_controls(&self, mesh: &Mesh, m_u: usize, m_w: usize) -> ControlBundle {
        let (inits, seed) = (self.controls, self.verify.seed);
        ControlBundle::from_fn(mesh, m_u, m_w, |blk, t, x, k| inits[blk as usize].eval(mesh, blk, seed, t, x, k))
    }

    pub fn grad_check_options(&self) -> GradCheckOptions {
        GradCheckOptions {
            n_dirs: self.verify.n_dirs,
            seed: self.verify.seed,
            eps: self.verify.eps,
            adjoint_tol: self.verify.adjoint_tol,
            dto_tol: self.verify.dto_tol,
            use_dto: self.verify.use_dto,
            solver: self.solver,
        }
    }

    /// Refinement inputs; controls are re-sampled on every level.
    pub fn study_setup(&self) -> StudySetup {
        let inits = self.controls;
        let seed = self.verify.seed;
        let base = self.mesh.clone();
        StudySetup {
            controls: std::sync::Arc::new(move |blk, t, x, k| inits[blk as usize].eval(&base, blk, seed, t, x, k)),
            reference: biload_core::verify::analytic_reference(&self.model.name),
            check: GradCheckOptions { use_dto: false, ..self.grad_check_options() },
        }
    }
}

const SECTIONS: [&str; 7] = ["mesh", "model", "solver", "optimize", "controls", "verify", "output"];

struct Entry {
    line: usize,
    value: String,
}

type Sections = BTreeMap<String, BTreeMap<String, Entry>>;

fn tokenize(text: &str) -> Result<Sections, ConfigError> {
    let mut out: Sections = BTreeMap::new();
    let mut current: Option<String> = None;
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        if let Some(rest) = body.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| ConfigError::at(line, format!("malformed section header '{body}'")))?
                .trim();
            if !SECTIONS.contains(&name) {
                return Err(ConfigError::at(line, format!("unknown section [{name}]")));
            }
            if out.contains_key(name) {
                return Err(ConfigError::at(line, format!("section [{name}] appears twice")));
            }
            out.insert(name.to_string(), BTreeMap::new());
            current = Some(name.to_string());
            continue;
        }
        let Some((k, v)) = body.split_once('=') else {
            return Err(ConfigError::at(line, format!("expected 'key = value', got '{body}'")));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(ConfigError::at(line, format!("expected 'key = value', got '{body}'")));
        }
        let Some(sec) = &current else {
            return Err(ConfigError::at(line, format!("key '{k}' outside any section")));
        };
        let map = out.get_mut(sec).expect("section inserted");
        if map.contains_key(k) {
            return Err(ConfigError::key(Some(line), k, "repeated key"));
        }
        map.insert(k.to_string(), Entry { line, value: v.to_string() });
    }
    Ok(out)
}

/// Typed reader over one section that remembers which keys were consumed.
struct Section<'a> {
    name: &'a str,
    entries: Option<&'a BTreeMap<String, Entry>>,
    used: Vec<&'a str>,
}

impl<'a> Section<'a> {
    fn new(all: &'a Sections, name: &'a str) -> Section<'a> {
        Section { name, entries: all.get(name), used: Vec::new() }
    }

    fn raw(&mut self, key: &'a str) -> Option<&'a Entry> {
        self.used.push(key);
        self.entries.and_then(|m| m.get(key))
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &'a str, default: T) -> Result<T, ConfigError> {
        match self.raw(key) {
            None => Ok(default),
            Some(e) => e
                .value
                .parse::<T>()
                .map_err(|_| ConfigError::key(Some(e.line), key, format!("cannot parse '{}'", e.value))),
        }
    }

    fn float(&mut self, key: &'a str, default: f64) -> Result<f64, ConfigError> {
        let v = self.parse(key, default)?;
        if !v.is_finite() {
            let line = self.raw(key).map(|e| e.line);
            return Err(ConfigError::key(line, key, "must be finite"));
        }
        Ok(v)
    }

    fn line_of(&self, key: &str) -> Option<usize> {
        self.entries.and_then(|m| m.get(key)).map(|e| e.line)
    }

    /// Rejects keys that no reader asked for.
    fn finish(&self) -> Result<(), ConfigError> {
        if let Some(m) = self.entries {
            if let Some((k, e)) = m.iter().filter(|(k, _)| !self.used.contains(&k.as_str())).min_by_key(|(_, e)| e.line) {
                return Err(ConfigError::key(Some(e.line), k, format!("unknown key in [{}]", self.name)));
            }
        }
        Ok(())
    }
}

fn range_error(sec: &Section, key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::key(sec.line_of(key), key, message)
}

fn parse_mesh(all: &Sections) -> Result<Mesh, ConfigError> {
    if !all.contains_key("mesh") {
        return Err(ConfigError { line: None, key: None, message: "missing required section [mesh]".into() });
    }
    let mut s = Section::new(all, "mesh");
    let t_final = s.float("T_final", 1.0)?;
    let nt: usize = s.parse("Nt", 32)?;
    let x_a = s.float("x_a", 0.0)?;
    let x_b = s.float("x_b", 1.0)?;
    let nx: usize = s.parse("Nx", 32)?;
    s.finish()?;
    if nt < 4 {
        return Err(range_error(&s, "Nt", format!("must be at least 4, got {nt}")));
    }
    if nx < 4 {
        return Err(range_error(&s, "Nx", format!("must be at least 4, got {nx}")));
    }
    if t_final <= 0.0 {
        return Err(range_error(&s, "T_final", format!("must be positive, got {t_final}")));
    }
    if x_a >= x_b {
        return Err(range_error(&s, "x_b", format!("must exceed x_a = {x_a}, got {x_b}")));
    }
    build_mesh(t_final, nt, x_a, x_b, nx).map_err(|e| ConfigError { line: None, key: None, message: e.to_string() })
}

fn parse_model(all: &Sections) -> Result<ModelParams, ConfigError> {
    let Some(entries) = all.get("model") else {
        return Err(ConfigError { line: None, key: None, message: "missing required section [model]".into() });
    };
    let name = entries
        .get("name")
        .ok_or_else(|| ConfigError { line: None, key: Some("name".into()), message: "[model] needs a name".into() })?;
    let Some(defaults) = ModelParams::defaults(&name.value) else {
        return Err(ConfigError::key(Some(name.line), "name", format!("unknown model '{}'", name.value)));
    };
    let mut p = ModelParams::new(&name.value);
    for (k, e) in entries.iter().filter(|(k, _)| k.as_str() != "name") {
        if !defaults.iter().any(|(d, _)| d == k) {
            return Err(ConfigError::key(Some(e.line), k, format!("unknown key in [model] for '{}'", name.value)));
        }
        let v: f64 = e
            .value
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| ConfigError::key(Some(e.line), k, format!("cannot parse '{}'", e.value)))?;
        p = p.with(k, v);
    }
    Ok(p)
}

fn parse_solver(all: &Sections) -> Result<SolverConfig, ConfigError> {
    let mut s = Section::new(all, "solver");
    let d = SolverConfig::default();
    let method = match s.raw("method") {
        None => d.method,
        Some(e) => match e.value.as_str() {
            "newton" => SolverMethod::Newton,
            "picard" => SolverMethod::Picard,
            other => return Err(ConfigError::key(Some(e.line), "method", format!("expected newton or picard, got '{other}'"))),
        },
    };
    let cfg = SolverConfig {
        tol: s.float("tol", d.tol)?,
        relax: s.float("relax", d.relax)?,
        max_iter: s.parse("max_iter", d.max_iter)?,
        divergence_guard: s.float("divergence_guard", d.divergence_guard)?,
        method,
    };
    s.finish()?;
    if !(cfg.tol > 0.0) {
        return Err(range_error(&s, "tol", format!("must be positive, got {}", cfg.tol)));
    }
    if !(cfg.relax > 0.0 && cfg.relax <= 1.0) {
        return Err(range_error(&s, "relax", format!("must lie in (0, 1], got {}", cfg.relax)));
    }
    if cfg.max_iter < 1 {
        return Err(range_error(&s, "max_iter", "must be at least 1"));
    }
    if !(cfg.divergence_guard > 0.0) {
        return Err(range_error(&s, "divergence_guard", "must be positive"));
    }
    Ok(cfg)
}

fn parse_optimize(all: &Sections) -> Result<OptimizeOptions, ConfigError> {
    let mut s = Section::new(all, "optimize");
    let d = OptimizeOptions::default();
    let mut bounds = Bounds::new();
    const BOUND_KEYS: [&str; 6] = ["bounds.u", "bounds.w", "bounds.u0", "bounds.uT", "bounds.w0", "bounds.wT"];
    for (key, blk) in BOUND_KEYS.into_iter().zip(ControlBlock::ALL) {
        if let Some(e) = s.raw(key) {
            let parts: Vec<Option<f64>> = e.value.split(',').map(|p| p.trim().parse::<f64>().ok()).collect();
            let (lo, hi) = match parts.as_slice() {
                [Some(lo), Some(hi)] => (*lo, *hi),
                _ => return Err(ConfigError::key(Some(e.line), key, format!("expected 'lo, hi', got '{}'", e.value))),
            };
            bounds.set(blk, lo, hi).map_err(|err| ConfigError::key(Some(e.line), key, err.to_string()))?;
        }
    }
    let o = OptimizeOptions {
        max_outer: s.parse("max_outer", d.max_outer)?,
        armijo_c: s.float("armijo_c", d.armijo_c)?,
        backtrack: s.float("backtrack", d.backtrack)?,
        step0: s.float("step0", d.step0)?,
        gtol: s.float("gtol", d.gtol)?,
        bounds,
    };
    s.finish()?;
    for (key, ok) in [
        ("armijo_c", o.armijo_c > 0.0 && o.armijo_c < 1.0),
        ("backtrack", o.backtrack > 0.0 && o.backtrack < 1.0),
        ("step0", o.step0 > 0.0),
        ("gtol", o.gtol >= 0.0),
    ] {
        if !ok {
            return Err(range_error(&s, key, "out of range"));
        }
    }
    Ok(o)
}

fn parse_controls(all: &Sections) -> Result<[ControlInit; 6], ConfigError> {
    let mut s = Section::new(all, "controls");
    let mut out = [ControlInit::Constant(0.0); 6];
    for blk in ControlBlock::ALL {
        if let Some(e) = s.raw(blk.name()) {
            out[blk as usize] = ControlInit::parse(&e.value).ok_or_else(|| {
                ConfigError::key(Some(e.line), blk.name(), format!("expected a number, 'sine' or 'smooth' (optionally '* scale'), got '{}'", e.value))
            })?;
        }
    }
    s.finish()?;
    Ok(out)
}

fn parse_verify(all: &Sections) -> Result<VerifySpec, ConfigError> {
    let mut s = Section::new(all, "verify");
    let d = VerifySpec::default();
    let metric = match s.raw("metric") {
        None => d.metric,
        Some(e) => RefinementMetric::parse(&e.value).ok_or_else(|| {
            ConfigError::key(Some(e.line), "metric", format!("expected forward_error, gradient_gap or ibp_residual, got '{}'", e.value))
        })?,
    };
    let v = VerifySpec {
        seed: s.parse("seed", d.seed)?,
        n_dirs: s.parse("n_dirs", d.n_dirs)?,
        eps: s.float("eps", d.eps)?,
        adjoint_tol: s.float("adjoint_tol", d.adjoint_tol)?,
        dto_tol: s.float("dto_tol", d.dto_tol)?,
        use_dto: s.parse("use_dto", d.use_dto)?,
        levels: s.parse("levels", d.levels)?,
        metric,
    };
    s.finish()?;
    for (key, ok) in [
        ("n_dirs", v.n_dirs >= 1),
        ("eps", v.eps > 0.0),
        ("adjoint_tol", v.adjoint_tol > 0.0),
        ("dto_tol", v.dto_tol > 0.0),
        ("levels", (3..=8).contains(&v.levels)),
    ] {
        if !ok {
            return Err(range_error(&s, key, "out of range"));
        }
    }
    Ok(v)
}

fn parse_output(all: &Sections) -> Result<PathBuf, ConfigError> {
    let mut s = Section::new(all, "output");
    let dir = s.raw("dir").map(|e| PathBuf::from(&e.value)).unwrap_or_else(|| PathBuf::from("out"));
    s.finish()?;
    Ok(dir)
}

/// Parses and validates a configuration document.
pub fn parse_config(text: &str) -> Result<RunSpec, ConfigError> {
    let all = tokenize(text)?;
    Ok(RunSpec {
        mesh: parse_mesh(&all)?,
        model: parse_model(&all)?,
        solver: parse_solver(&all)?,
        optimize: parse_optimize(&all)?,
        controls: parse_controls(&all)?,
        verify: parse_verify(&all)?,
        out_dir: parse_output(&all)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[mesh]\n[model]\nname = volterra_exp\n";

    #[test]
    fn minimal_document_uses_defaults() {
        let s = parse_config(MINIMAL).unwrap();
        assert_eq!(s.model, ModelParams::new("volterra_exp"));
        assert_eq!(s.solver, SolverConfig::default());
        assert_eq!(s.optimize, OptimizeOptions::default());
        assert_eq!(s.verify, VerifySpec::default());
        assert_eq!((s.mesh.nt, s.mesh.nx), (32, 32));
        assert_eq!(s.controls, [ControlInit::Constant(0.0); 6]);
    }

    #[test]
    fn small_nt_names_the_key() {
        let e = parse_config("[mesh]\nNt = 3\n[model]\nname = heat\n").unwrap_err();
        assert_eq!(e.key.as_deref(), Some("Nt"));
        assert_eq!(e.line, Some(2));
        assert!(e.to_string().contains("Nt"));
    }

    #[test]
    fn unknown_key_reports_line() {
        let text = "[mesh]\n[model]\nname = heat\n[solver]\n# typo below\nrelaxx = 0.5\n";
        let e = parse_config(text).unwrap_err();
        assert_eq!(e.line, Some(6));
        assert_eq!(e.key.as_deref(), Some("relaxx"));
        assert!(e.to_string().starts_with("line 6:"));
    }

    #[test]
    fn malformed_input_is_rejected() {
        for (text, line) in [
            ("[mesh\n", 1),
            ("Nt = 4\n", 1),
            ("[mesh]\nNt 4\n", 2),
            ("[mesh]\n[bogus]\n", 2),
            ("[mesh]\nNt = 8\nNt = 8\n", 3),
            ("[mesh]\n[mesh]\n", 2),
            ("[mesh]\n[model]\nname = heat\nfoo = 1\n", 4),
            ("[mesh]\n[model]\nname = nothing\n", 3),
            ("[mesh]\n[model]\nname = heat\n[controls]\nu = banana\n", 5),
        ] {
            let e = parse_config(text).unwrap_err();
            assert_eq!(e.line, Some(line), "{text:?}: {e}");
        }
        assert!(parse_config("[mesh]\n").is_err());
    }

    #[test]
    fn full_document_round_trip() {
        let text = "
            [mesh]
            T_final = 2.0
            Nt = 10   # steps
            Nx = 6
            x_a = -1
            x_b = 1
            [model]
            name = lq_volterra
            beta = 0.5
            [solver]
            method = picard
            relax = 0.5
            [optimize]
            max_outer = 7
            bounds.u = -1, 1
            [controls]
            u = sine * 0.5
            w = smooth
            u0 = 0.25
            [verify]
            seed = 9
            metric = ibp_residual
            use_dto = false
            [output]
            dir = results
        ";
        let s = parse_config(text).unwrap();
        assert_eq!(s.mesh.t_final, 2.0);
        assert_eq!(s.model.values.get("beta"), Some(&0.5));
        assert_eq!(s.solver.method, SolverMethod::Picard);
        assert_eq!(s.optimize.bounds.get(ControlBlock::U), Some((-1.0, 1.0)));
        assert_eq!(s.controls[ControlBlock::U as usize], ControlInit::Sine(0.5));
        assert_eq!(s.controls[ControlBlock::W as usize], ControlInit::Smooth(1.0));
        assert_eq!(s.verify.metric, RefinementMetric::IbpResidual);
        assert_eq!(s.out_dir, PathBuf::from("results"));
        let c = s.initial_controls(&s.mesh, 1, 1);
        assert_eq!(c.u0[[3, 0]], 0.25);
        assert!((c.u[[0, 3, 0]] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn range_errors_name_their_key() {
        for (text, key) in [
            ("[mesh]\nNx = 2\n[model]\nname = heat\n", "Nx"),
            ("[mesh]\n[model]\nname = heat\n[solver]\nrelax = 1.5\n", "relax"),
            ("[mesh]\n[model]\nname = heat\n[optimize]\nbacktrack = 1\n", "backtrack"),
            ("[mesh]\n[model]\nname = heat\n[verify]\nlevels = 2\n", "levels"),
            ("[mesh]\n[model]\nname = heat\n[optimize]\nbounds.w = 1, 0\n", "bounds.w"),
        ] {
            assert_eq!(parse_config(text).unwrap_err().key.as_deref(), Some(key), "{text:?}");
        }
    }

    proptest::proptest! {
        /// Any key outside the documented set aborts parsing at its line.
        #[test]
        fn unknown_keys_fail_closed(key in "[a-z_]{1,12}", pad in 0usize..5, sec in 0usize..4) {
            let section = ["mesh", "solver", "optimize", "verify"][sec];
            let known = ["T_final", "Nt", "x_a", "x_b", "Nx", "tol", "relax", "max_iter", "method", "divergence_guard",
                "max_outer", "armijo_c", "backtrack", "step0", "gtol", "seed", "n_dirs", "eps", "adjoint_tol", "dto_tol",
                "use_dto", "levels", "metric"];
            proptest::prop_assume!(!known.contains(&key.as_str()));
            let mut text = String::from("[model]\nname = heat\n");
            if section != "mesh" {
                text.push_str("[mesh]\n");
            }
            text.push_str(&format!("[{section}]\n"));
            text.push_str(&"# filler\n".repeat(pad));
            text.push_str(&format!("{key} = 1\n"));
            let line = text.lines().count();
            let e = parse_config(&text).unwrap_err();
            proptest::prop_assert_eq!(e.line, Some(line));
            proptest::prop_assert_eq!(e.key.as_deref(), Some(key.as_str()));
        }
    }
}
