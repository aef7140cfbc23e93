//! Builtin models recast into the integral state system. All are scalar
//! (n = 1) with one distributed and one boundary control component.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use super::{CostFn, CostId, KernelFn, KernelId, Problem, Slot};
use crate::error::{Error, Result};

pub const MODEL_NAMES: [&str; 8] = [
    "volterra_exp",
    "heat",
    "barenblatt",
    "integral_cv",
    "integral_cv_barenblatt",
    "forest_fire_minimal",
    "lq_volterra",
    "biload_demo",
];

/// Model name plus scalar parameter overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub name: String,
    pub values: BTreeMap<String, f64>,
}

impl ModelParams {
    pub fn new(name: &str) -> ModelParams {
        ModelParams {
            name: name.to_string(),
            values: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, v: f64) -> ModelParams {
        self.values.insert(key.to_string(), v);
        self
    }

    /// Parameter names accepted by a model, with defaults.
    pub fn defaults(name: &str) -> Option<&'static [(&'static str, f64)]> {
        Some(match name {
            "volterra_exp" => &[("b", 1.0), ("alpha", 1.0), ("beta", 0.1), ("target", 0.5)],
            "heat" => &HEAT,
            "barenblatt" => &BARENBLATT,
            "integral_cv" => &INTEGRAL_CV,
            "integral_cv_barenblatt" => &INTEGRAL_CV_B,
            "forest_fire_minimal" => &FOREST,
            "lq_volterra" => &[("c0", 1.0), ("a", 1.0), ("mu", 1.0), ("b", 1.0), ("beta", 0.1), ("target", 0.5)],
            "biload_demo" => &[
                ("eps", 0.2),
                ("K", 0.2),
                ("amp", 1.0),
                ("b", 1.0),
                ("beta", 0.05),
                ("gamma", 0.05),
                ("kappa", 0.5),
                ("target", 0.2),
                ("target_bd", 0.1),
                ("target_T", 0.0),
            ],
            _ => return None,
        })
    }

    fn resolve(&self) -> Result<Params> {
        let defaults = ModelParams::defaults(&self.name).ok_or_else(|| Error::UnknownModel(self.name.clone()))?;
        let mut map: BTreeMap<&'static str, f64> = defaults.iter().copied().collect();
        for (k, v) in &self.values {
            let Some((key, _)) = defaults.iter().find(|(d, _)| d == k) else {
                let known: Vec<&str> = defaults.iter().map(|d| d.0).collect();
                return Err(Error::Config(format!(
                    "model '{}' has no parameter '{k}' (known: {})",
                    self.name,
                    known.join(", ")
                )));
            };
            if !v.is_finite() {
                return Err(Error::Config(format!("parameter '{k}' must be finite")));
            }
            map.insert(key, *v);
        }
        Ok(Params(map))
    }
}

const HEAT: [(&str, f64); 9] = [
    ("K", 1.0),
    ("amp", 1.0),
    ("b", 1.0),
    ("alpha", 1.0),
    ("beta", 0.01),
    ("gamma", 0.01),
    ("alpha_T", 1.0),
    ("target", 0.0),
    ("target_T", 0.0),
];

const BARENBLATT: [(&str, f64); 10] = [
    ("K", 1.0),
    ("L", 0.05),
    ("amp", 1.0),
    ("b", 1.0),
    ("alpha", 1.0),
    ("beta", 0.01),
    ("gamma", 0.01),
    ("alpha_T", 1.0),
    ("target", 0.0),
    ("target_T", 0.0),
];

const INTEGRAL_CV: [(&str, f64); 11] = [
    ("K", 1.0),
    ("A", 2.0),
    ("v0", 0.0),
    ("amp", 1.0),
    ("b", 1.0),
    ("alpha", 1.0),
    ("beta", 0.01),
    ("gamma", 0.01),
    ("alpha_T", 1.0),
    ("target", 0.0),
    ("target_T", 0.0),
];

const INTEGRAL_CV_B: [(&str, f64); 12] = [
    ("K", 1.0),
    ("A", 2.0),
    ("L", 0.05),
    ("v0", 0.0),
    ("amp", 1.0),
    ("b", 1.0),
    ("alpha", 1.0),
    ("beta", 0.01),
    ("gamma", 0.01),
    ("alpha_T", 1.0),
    ("target", 0.0),
    ("target_T", 0.0),
];

const FOREST: [(&str, f64); 19] = [
    ("K", 1.0),
    ("A", 2.0),
    ("L", 0.02),
    ("v0", 0.0),
    ("c", 0.5),
    ("r", 0.5),
    ("rho", 0.2),
    ("ell", 0.3),
    ("eps", 0.1),
    ("amp", 1.0),
    ("b", 1.0),
    ("alpha", 1.0),
    ("beta", 0.01),
    ("gamma", 0.01),
    ("alpha_T", 1.0),
    ("target", 0.0),
    ("target_T", 0.0),
    ("x_src", 0.5),
    ("src", 0.0),
];

struct Params(BTreeMap<&'static str, f64>);

impl Params {
    fn get(&self, k: &str) -> f64 {
        self.0[k]
    }
}

/// Builds a builtin model.
pub fn make_model(params: &ModelParams) -> Result<Problem> {
    let p = params.resolve()?;
    Ok(match params.name.as_str() {
        "volterra_exp" => volterra_exp(&p),
        "heat" => diffusion(&p, "heat", Memory::None, false),
        "barenblatt" => diffusion(&p, "barenblatt", Memory::None, true),
        "integral_cv" => diffusion(&p, "integral_cv", Memory::Exponential, false),
        "integral_cv_barenblatt" => diffusion(&p, "integral_cv_barenblatt", Memory::Exponential, true),
        "forest_fire_minimal" => forest_fire(&p),
        "lq_volterra" => lq_volterra(&p),
        "biload_demo" => biload_demo(&p),
        other => return Err(Error::UnknownModel(other.to_string())),
    })
}

/// Tracking plus control regularization: `alpha/2 (slot - target)^2 + beta/2 ctrl^2`.
fn tracking(state: Slot, ctrl: Option<Slot>, alpha: f64, target: f64, beta: f64) -> CostFn {
    let mut c = CostFn::new(move |_, v| 0.5 * alpha * (v.s(state) - target).powi(2))
        .d(state, move |_, v| alpha * (v.s(state) - target));
    if let Some(u) = ctrl {
        c = CostFn::sum(vec![
            c,
            CostFn::new(move |_, v| 0.5 * beta * v.s(u).powi(2)).d(u, move |_, v| beta * v.s(u)),
        ]);
    }
    c
}

fn volterra_exp(p: &Params) -> Problem {
    let b = p.get("b");
    Problem::new("volterra_exp", 1, 1, 1)
        .with_kernel(KernelId::F0, KernelFn::scalar(|_, _| 1.0))
        .with_kernel(
            KernelId::F1,
            KernelFn::scalar(move |_, v| v.s(Slot::Phi) + b * v.s(Slot::U))
                .d(Slot::Phi, |_, _| 1.0)
                .d(Slot::U, move |_, _| b),
        )
        .with_cost(CostId::F1, tracking(Slot::Phi, Some(Slot::U), p.get("alpha"), p.get("target"), p.get("beta")))
}

fn lq_volterra(p: &Params) -> Problem {
    let (c0, a, mu, b) = (p.get("c0"), p.get("a"), p.get("mu"), p.get("b"));
    Problem::new("lq_volterra", 1, 1, 1)
        .with_kernel(KernelId::F0, KernelFn::scalar(move |_, _| c0))
        .with_kernel(
            KernelId::F1,
            KernelFn::scalar(move |c, v| -a * (-mu * (c.t - c.s)).exp() * v.s(Slot::Phi) + b * v.s(Slot::U))
                .d(Slot::Phi, move |c, _| -a * (-mu * (c.t - c.s)).exp())
                .d(Slot::U, move |_, _| b),
        )
        .with_cost(CostId::F1, tracking(Slot::Phi, Some(Slot::U), 1.0, p.get("target"), p.get("beta")))
}

#[derive(Clone, Copy)]
enum Memory {
    /// Fourier flux: weight 1.
    None,
    /// Integrated relaxation: weight `(1 - exp(-A (t - s))) / A`.
    Exponential,
}

fn memory_weight(mem: Memory, a: f64) -> impl Fn(f64, f64) -> f64 + Copy + Send + Sync {
    move |t: f64, s: f64| match mem {
        Memory::None => 1.0,
        Memory::Exponential => {
            if a == 0.0 {
                t - s
            } else {
                -(-a * (t - s)).exp_m1() / a
            }
        }
    }
}

/// Flux part of the Volterra kernel: `m(t,s) (K q + L q_dot)`.
fn flux_kernel(
    k_cond: f64,
    l_bar: f64,
    mem: Memory,
    a: f64,
    extra: impl Fn(&super::Coords, &super::SlotView) -> f64 + Send + Sync + Copy + 'static,
    extra_partials: Vec<(Slot, fn(&Params, &super::Coords, &super::SlotView) -> f64)>,
    p: &Params,
) -> KernelFn {
    let m = memory_weight(mem, a);
    let mut k = KernelFn::scalar(move |c, v| {
        let mut flux = k_cond * v.s(Slot::Q);
        if l_bar != 0.0 {
            flux += l_bar * v.s(Slot::QDot);
        }
        m(c.t, c.s) * flux + extra(c, v)
    })
    .d(Slot::Q, move |c, _| m(c.t, c.s) * k_cond);
    if l_bar != 0.0 {
        k = k.d(Slot::QDot, move |c, _| m(c.t, c.s) * l_bar);
    }
    for (slot, f) in extra_partials {
        let pp = Params(p.0.clone());
        k = k.d(slot, move |c, v| f(&pp, c, v));
    }
    k
}

fn initial_profile(amp: f64) -> KernelFn {
    KernelFn::scalar(move |c, _| amp * (PI * c.x).sin())
}

/// Shared structure of the heat-type models: sine initial data, Dirichlet
/// boundary control, distributed source control, tracking costs.
fn diffusion(p: &Params, name: &str, mem: Memory, barenblatt: bool) -> Problem {
    let k_cond = p.get("K");
    let l_bar = if barenblatt { p.get("L") } else { 0.0 };
    let a = if matches!(mem, Memory::Exponential) { p.get("A") } else { 0.0 };
    let v0 = if matches!(mem, Memory::Exponential) { p.get("v0") } else { 0.0 };
    let b = p.get("b");
    let amp = p.get("amp");
    let vol = || {
        flux_kernel(
            k_cond,
            l_bar,
            mem,
            a,
            move |_, v| -v0 + b * v.s(Slot::U),
            vec![(Slot::U, |p, _, _| p.get("b"))],
            p,
        )
    };
    Problem::new(name, 1, 1, 1)
        .with_kernel(KernelId::F0, initial_profile(amp))
        .with_kernel(KernelId::F1, vol())
        .with_kernel(KernelId::G0, KernelFn::scalar(|_, v| v.s(Slot::W)).d(Slot::W, |_, _| 1.0))
        .with_kernel(KernelId::F00, initial_profile(amp))
        .with_kernel(KernelId::FT0, initial_profile(amp))
        .with_kernel(KernelId::FT1, vol())
        .with_cost(CostId::F1, tracking(Slot::Phi, Some(Slot::U), p.get("alpha"), p.get("target"), p.get("beta")))
        .with_cost(CostId::G1, tracking(Slot::PhiBd, Some(Slot::W), 0.0, 0.0, p.get("gamma")))
        .with_cost(CostId::F0, tracking(Slot::PhiT, None, p.get("alpha_T"), p.get("target_T"), 0.0))
}

fn forest_fire(p: &Params) -> Problem {
    let k_cond = p.get("K");
    let l_bar = p.get("L");
    let a = p.get("A");
    let amp = p.get("amp");
    let (v0, conv, r, b) = (p.get("v0"), p.get("c"), p.get("r"), p.get("b"));
    let (src, x_src) = (p.get("src"), p.get("x_src"));
    let vol = || {
        flux_kernel(
            k_cond,
            l_bar,
            Memory::Exponential,
            a,
            move |c, v| {
                let phi = v.s(Slot::Phi);
                -v0 - conv * v.s(Slot::P)
                    + r * phi / (1.0 + phi * phi)
                    + src * (-(c.x - x_src).powi(2) / 0.02).exp()
                    + b * v.s(Slot::U)
            },
            vec![
                (Slot::P, |p, _, _| -p.get("c")),
                (Slot::Phi, |p, _, v| {
                    let phi = v.s(Slot::Phi);
                    p.get("r") * (1.0 - phi * phi) / (1.0 + phi * phi).powi(2)
                }),
                (Slot::U, |p, _, _| p.get("b")),
            ],
            p,
        )
    };
    let (rho, ell, eps) = (p.get("rho"), p.get("ell"), p.get("eps"));
    let g = move |c: &super::Coords| rho * (-((c.x - c.y) / ell).powi(2)).exp();
    let radiation = move || {
        KernelFn::scalar(move |c, v| g(c) * (v.s(Slot::Phi).tanh() + eps * v.s(Slot::P)))
            .d(Slot::Phi, move |c, v| g(c) / v.s(Slot::Phi).cosh().powi(2))
            .d(Slot::P, move |c, _| g(c) * eps)
    };
    Problem::new("forest_fire_minimal", 1, 1, 1)
        .with_kernel(KernelId::F0, initial_profile(amp))
        .with_kernel(KernelId::F1, vol())
        .with_kernel(KernelId::F3, radiation())
        .with_kernel(KernelId::G0, KernelFn::scalar(|_, v| v.s(Slot::W)).d(Slot::W, |_, _| 1.0))
        .with_kernel(KernelId::F00, initial_profile(amp))
        .with_kernel(KernelId::FT0, initial_profile(amp))
        .with_kernel(KernelId::FT1, vol())
        .with_kernel(KernelId::FT3, radiation())
        .with_cost(CostId::F1, tracking(Slot::Phi, Some(Slot::U), p.get("alpha"), p.get("target"), p.get("beta")))
        .with_cost(CostId::G1, tracking(Slot::PhiBd, Some(Slot::W), 0.0, 0.0, p.get("gamma")))
        .with_cost(CostId::F0, tracking(Slot::PhiT, None, p.get("alpha_T"), p.get("target_T"), 0.0))
}

/// `e * s` with partial `e` in `slot`.
fn lin(slot: Slot, e: impl Fn(&super::Coords) -> f64 + Copy + Send + Sync + 'static) -> KernelFn {
    KernelFn::scalar(move |c, v| e(c) * v.s(slot)).d(slot, move |c, _| e(c))
}

/// `e * tanh(s)`.
fn sat(slot: Slot, e: impl Fn(&super::Coords) -> f64 + Copy + Send + Sync + 'static) -> KernelFn {
    KernelFn::scalar(move |c, v| e(c) * v.s(slot).tanh()).d(slot, move |c, v| e(c) / v.s(slot).cosh().powi(2))
}

/// `ctrl + e * tanh(state)`.
fn driven(ctrl: Slot, state: Slot, e: f64) -> KernelFn {
    KernelFn::scalar(move |_, v| v.s(ctrl) + e * v.s(state).tanh())
        .d(ctrl, |_, _| 1.0)
        .d(state, move |_, v| e / v.s(state).cosh().powi(2))
}

/// All thirty kernels and four costs active, with weak couplings.
fn biload_demo(p: &Params) -> Problem {
    let eps = p.get("eps");
    let k_cond = p.get("K");
    let amp = p.get("amp");
    let b = p.get("b");
    let (beta, gamma, kappa) = (p.get("beta"), p.get("gamma"), p.get("kappa"));
    let (target, target_bd, target_t) = (p.get("target"), p.get("target_bd"), p.get("target_T"));
    let gauss = move |c: &super::Coords| eps * (-(c.x - c.y).powi(2)).exp();
    let wave = move |c: &super::Coords| eps * (c.x - c.y).cos();
    let half = move |_: &super::Coords| 0.5 * eps;
    let sine = move |x: f64| amp * (PI * x).sin();
    let vol = move || {
        KernelFn::scalar(move |_, v| k_cond * v.s(Slot::Q) + b * v.s(Slot::U) - eps * v.s(Slot::Phi))
            .d(Slot::Q, move |_, _| k_cond)
            .d(Slot::U, move |_, _| b)
            .d(Slot::Phi, move |_, _| -eps)
    };
    let f4 = KernelFn::scalar(move |c, v| gauss(c) * (v.s(Slot::PhiBd) + 0.5 * v.s(Slot::W)))
        .d(Slot::PhiBd, move |c, _| gauss(c))
        .d(Slot::W, move |c, _| 0.5 * gauss(c));
    let f00 = KernelFn::scalar(move |c, v| sine(c.x) + b * v.s(Slot::U0)).d(Slot::U0, move |_, _| b);
    let ft0 = KernelFn::scalar(move |c, v| sine(c.x) + b * v.s(Slot::UT) + 0.5 * eps * v.s(Slot::PhiT).tanh())
        .d(Slot::UT, move |_, _| b)
        .d(Slot::PhiT, move |_, v| 0.5 * eps / v.s(Slot::PhiT).cosh().powi(2));

    let sq = |slot: Slot, w: f64, t: f64| CostFn::new(move |_, v| 0.5 * w * (v.s(slot) - t).powi(2)).d(slot, move |_, v| w * (v.s(slot) - t));

    Problem::new("biload_demo", 1, 1, 1)
        .with_kernel(
            KernelId::F0,
            KernelFn::scalar(move |c, v| sine(c.x) + 0.5 * eps * v.s(Slot::Phi).tanh())
                .d(Slot::Phi, move |_, v| 0.5 * eps / v.s(Slot::Phi).cosh().powi(2)),
        )
        .with_kernel(KernelId::F1, vol())
        .with_kernel(KernelId::F2, lin(Slot::Phi, gauss))
        .with_kernel(KernelId::F3, sat(Slot::Phi, wave))
        .with_kernel(KernelId::F4, f4)
        .with_kernel(KernelId::F5, lin(Slot::PhiBd, wave))
        .with_kernel(KernelId::G0, driven(Slot::W, Slot::PhiBd, 0.5 * eps))
        .with_kernel(KernelId::G1, lin(Slot::PhiBd, move |_| -eps))
        .with_kernel(KernelId::G2, lin(Slot::Phi, gauss))
        .with_kernel(KernelId::G3, lin(Slot::Phi, wave))
        .with_kernel(KernelId::G4, lin(Slot::PhiBd, move |c| 0.5 * wave(c)))
        .with_kernel(KernelId::G5, lin(Slot::PhiBd, half))
        .with_kernel(KernelId::F00, f00)
        .with_kernel(KernelId::F02, lin(Slot::Phi0, gauss))
        .with_kernel(KernelId::F04, lin(Slot::Phi0Bd, move |_| eps))
        .with_kernel(KernelId::FT0, ft0)
        .with_kernel(KernelId::FT1, vol())
        .with_kernel(KernelId::FT2, lin(Slot::PhiT, gauss))
        .with_kernel(KernelId::FT3, sat(Slot::Phi, wave))
        .with_kernel(KernelId::FT4, lin(Slot::PhiTBd, move |_| eps))
        .with_kernel(KernelId::FT5, lin(Slot::PhiBd, wave))
        .with_kernel(KernelId::G00, driven(Slot::W0, Slot::Phi0Bd, 0.5 * eps))
        .with_kernel(KernelId::G02, lin(Slot::Phi0, gauss))
        .with_kernel(KernelId::G04, lin(Slot::Phi0Bd, half))
        .with_kernel(KernelId::GT0, driven(Slot::WT, Slot::PhiTBd, 0.5 * eps))
        .with_kernel(KernelId::GT1, lin(Slot::PhiBd, move |_| eps))
        .with_kernel(KernelId::GT2, lin(Slot::PhiT, gauss))
        .with_kernel(KernelId::GT3, lin(Slot::Phi, wave))
        .with_kernel(KernelId::GT4, lin(Slot::PhiTBd, half))
        .with_kernel(KernelId::GT5, lin(Slot::PhiBd, half))
        .with_cost(CostId::F1, tracking(Slot::Phi, Some(Slot::U), 1.0, target, beta))
        .with_cost(CostId::G1, tracking(Slot::PhiBd, Some(Slot::W), 1.0, target_bd, gamma))
        .with_cost(
            CostId::F0,
            CostFn::sum(vec![
                sq(Slot::PhiT, 1.0, target_t),
                sq(Slot::Phi0, kappa, 0.0),
                sq(Slot::U0, beta, 0.0),
                sq(Slot::UT, beta, 0.0),
            ]),
        )
        .with_cost(
            CostId::G0,
            CostFn::sum(vec![
                sq(Slot::PhiTBd, 1.0, 0.0),
                sq(Slot::Phi0Bd, kappa, 0.0),
                sq(Slot::W0, gamma, 0.0),
                sq(Slot::WT, gamma, 0.0),
            ]),
        )
}
