//! Problem definition: kernel tables, cost integrands, slot signatures and
//! the builtin model library.

mod models;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use models::{make_model, ModelParams, MODEL_NAMES};
pub use crate::assembly::{rhs_boundary, rhs_interior, rhs_slice, SliceKind};

/// Slot families. Each kernel reads its arguments from exactly one bundle
/// (cost integrands `F0`/`G0` read two).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Bundle {
    Interior,
    Boundary,
    Initial,
    Final,
    InitialBd,
    FinalBd,
}

impl Bundle {
    pub const ALL: [Bundle; 6] = [
        Bundle::Interior,
        Bundle::Boundary,
        Bundle::Initial,
        Bundle::Final,
        Bundle::InitialBd,
        Bundle::FinalBd,
    ];

    /// Bundles whose nodes are indexed by side rather than by x-column.
    pub fn on_boundary(self) -> bool {
        matches!(self, Bundle::Boundary | Bundle::InitialBd | Bundle::FinalBd)
    }

    /// Bundles carrying a time index.
    pub fn has_time(self) -> bool {
        matches!(self, Bundle::Interior | Bundle::Boundary)
    }

    pub fn slots(self) -> &'static [Slot] {
        use Slot::*;
        match self {
            Bundle::Interior => &[Phi, P, Q, PhiDot, PDot, QDot, U],
            Bundle::Boundary => &[PhiBd, PhiBdDot, PBd, PBdDot, W],
            Bundle::Initial => &[Phi0, P0, Q0, U0],
            Bundle::Final => &[PhiT, PT, QT, UT],
            Bundle::InitialBd => &[Phi0Bd, P0Bd, W0],
            Bundle::FinalBd => &[PhiTBd, PTBd, WT],
        }
    }

    pub fn state_block(self) -> crate::state::StateBlock {
        use crate::state::StateBlock;
        match self {
            Bundle::Interior => StateBlock::Phi,
            Bundle::Boundary => StateBlock::PhiBd,
            Bundle::Initial => StateBlock::Phi0,
            Bundle::Final => StateBlock::PhiT,
            Bundle::InitialBd => StateBlock::Phi0Bd,
            Bundle::FinalBd => StateBlock::PhiTBd,
        }
    }
}

/// Every argument slot a kernel or cost integrand may consume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Slot {
    Phi,
    P,
    Q,
    PhiDot,
    PDot,
    QDot,
    U,
    PhiBd,
    PhiBdDot,
    PBd,
    PBdDot,
    W,
    Phi0,
    P0,
    Q0,
    U0,
    PhiT,
    PT,
    QT,
    UT,
    Phi0Bd,
    P0Bd,
    W0,
    PhiTBd,
    PTBd,
    WT,
}

/// Number of slots.
pub const N_SLOTS: usize = 26;

/// Which dimension a slot carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    State,
    DistributedControl,
    BoundaryControl,
}

impl Slot {
    pub const ALL: [Slot; N_SLOTS] = [
        Slot::Phi,
        Slot::P,
        Slot::Q,
        Slot::PhiDot,
        Slot::PDot,
        Slot::QDot,
        Slot::U,
        Slot::PhiBd,
        Slot::PhiBdDot,
        Slot::PBd,
        Slot::PBdDot,
        Slot::W,
        Slot::Phi0,
        Slot::P0,
        Slot::Q0,
        Slot::U0,
        Slot::PhiT,
        Slot::PT,
        Slot::QT,
        Slot::UT,
        Slot::Phi0Bd,
        Slot::P0Bd,
        Slot::W0,
        Slot::PhiTBd,
        Slot::PTBd,
        Slot::WT,
    ];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn bundle(self) -> Bundle {
        use Slot::*;
        match self {
            Phi | P | Q | PhiDot | PDot | QDot | U => Bundle::Interior,
            PhiBd | PhiBdDot | PBd | PBdDot | W => Bundle::Boundary,
            Phi0 | P0 | Q0 | U0 => Bundle::Initial,
            PhiT | PT | QT | UT => Bundle::Final,
            Phi0Bd | P0Bd | W0 => Bundle::InitialBd,
            PhiTBd | PTBd | WT => Bundle::FinalBd,
        }
    }

    pub fn kind(self) -> SlotKind {
        use Slot::*;
        match self {
            U | U0 | UT => SlotKind::DistributedControl,
            W | W0 | WT => SlotKind::BoundaryControl,
            _ => SlotKind::State,
        }
    }

    /// Control block fed by this slot, if it is a control slot.
    pub fn control_block(self) -> Option<crate::state::ControlBlock> {
        use crate::state::ControlBlock;
        match self {
            Slot::U => Some(ControlBlock::U),
            Slot::W => Some(ControlBlock::W),
            Slot::U0 => Some(ControlBlock::U0),
            Slot::UT => Some(ControlBlock::UT),
            Slot::W0 => Some(ControlBlock::W0),
            Slot::WT => Some(ControlBlock::WT),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        use Slot::*;
        match self {
            Phi => "phi",
            P => "p",
            Q => "q",
            PhiDot => "phi_dot",
            PDot => "p_dot",
            QDot => "q_dot",
            U => "u",
            PhiBd => "phi_bd",
            PhiBdDot => "phi_bd_dot",
            PBd => "p_bd",
            PBdDot => "p_bd_dot",
            W => "w",
            Phi0 => "phi0",
            P0 => "p0",
            Q0 => "q0",
            U0 => "u0",
            PhiT => "phiT",
            PT => "pT",
            QT => "qT",
            UT => "uT",
            Phi0Bd => "phi0_bd",
            P0Bd => "p0_bd",
            W0 => "w0",
            PhiTBd => "phiT_bd",
            PTBd => "pT_bd",
            WT => "wT",
        }
    }
}

/// How a kernel integrates over time relative to its equation time `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeCoupling {
    /// Sample at `s = t`.
    Instant,
    /// Integral over `s` in `[0, t]`.
    Volterra,
    /// Integral over `s` in `[0, T]`.
    Whole,
    /// Slice bundle; no time argument.
    None,
}

/// How a kernel integrates over space relative to its equation location.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpaceCoupling {
    /// Sample at the equation's own location.
    Local,
    /// Integral over the domain.
    Domain,
    /// Sum over the two boundary points.
    Boundary,
}

/// Signature of a kernel: the equation it feeds and where it samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Signature {
    pub equation: Bundle,
    pub reads: Bundle,
    pub time: TimeCoupling,
    pub space: SpaceCoupling,
}

/// The thirty kernels of the state system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum KernelId {
    F0,
    F1,
    F2,
    F3,
    F4,
    F5,
    G0,
    G1,
    G2,
    G3,
    G4,
    G5,
    F00,
    F02,
    F04,
    FT0,
    FT1,
    FT2,
    FT3,
    FT4,
    FT5,
    G00,
    G02,
    G04,
    GT0,
    GT1,
    GT2,
    GT3,
    GT4,
    GT5,
}

pub const N_KERNELS: usize = 30;

impl KernelId {
    pub const ALL: [KernelId; N_KERNELS] = [
        KernelId::F0,
        KernelId::F1,
        KernelId::F2,
        KernelId::F3,
        KernelId::F4,
        KernelId::F5,
        KernelId::G0,
        KernelId::G1,
        KernelId::G2,
        KernelId::G3,
        KernelId::G4,
        KernelId::G5,
        KernelId::F00,
        KernelId::F02,
        KernelId::F04,
        KernelId::FT0,
        KernelId::FT1,
        KernelId::FT2,
        KernelId::FT3,
        KernelId::FT4,
        KernelId::FT5,
        KernelId::G00,
        KernelId::G02,
        KernelId::G04,
        KernelId::GT0,
        KernelId::GT1,
        KernelId::GT2,
        KernelId::GT3,
        KernelId::GT4,
        KernelId::GT5,
    ];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        use KernelId::*;
        match self {
            F0 => "f0",
            F1 => "f1",
            F2 => "f2",
            F3 => "f3",
            F4 => "f4",
            F5 => "f5",
            G0 => "g0",
            G1 => "g1",
            G2 => "g2",
            G3 => "g3",
            G4 => "g4",
            G5 => "g5",
            F00 => "f00",
            F02 => "f02",
            F04 => "f04",
            FT0 => "fT0",
            FT1 => "fT1",
            FT2 => "fT2",
            FT3 => "fT3",
            FT4 => "fT4",
            FT5 => "fT5",
            G00 => "g00",
            G02 => "g02",
            G04 => "g04",
            GT0 => "gT0",
            GT1 => "gT1",
            GT2 => "gT2",
            GT3 => "gT3",
            GT4 => "gT4",
            GT5 => "gT5",
        }
    }

    pub fn signature(self) -> Signature {
        use Bundle as B;
        use KernelId::*;
        use SpaceCoupling as Sp;
        use TimeCoupling as Tc;
        let (equation, reads, time, space) = match self {
            F0 => (B::Interior, B::Interior, Tc::Instant, Sp::Local),
            F1 => (B::Interior, B::Interior, Tc::Volterra, Sp::Local),
            F2 => (B::Interior, B::Interior, Tc::Instant, Sp::Domain),
            F3 => (B::Interior, B::Interior, Tc::Volterra, Sp::Domain),
            F4 => (B::Interior, B::Boundary, Tc::Instant, Sp::Boundary),
            F5 => (B::Interior, B::Boundary, Tc::Volterra, Sp::Boundary),
            G0 => (B::Boundary, B::Boundary, Tc::Instant, Sp::Local),
            G1 => (B::Boundary, B::Boundary, Tc::Volterra, Sp::Local),
            G2 => (B::Boundary, B::Interior, Tc::Instant, Sp::Domain),
            G3 => (B::Boundary, B::Interior, Tc::Volterra, Sp::Domain),
            G4 => (B::Boundary, B::Boundary, Tc::Instant, Sp::Boundary),
            G5 => (B::Boundary, B::Boundary, Tc::Volterra, Sp::Boundary),
            F00 => (B::Initial, B::Initial, Tc::None, Sp::Local),
            F02 => (B::Initial, B::Initial, Tc::None, Sp::Domain),
            F04 => (B::Initial, B::InitialBd, Tc::None, Sp::Boundary),
            FT0 => (B::Final, B::Final, Tc::None, Sp::Local),
            FT1 => (B::Final, B::Interior, Tc::Whole, Sp::Local),
            FT2 => (B::Final, B::Final, Tc::None, Sp::Domain),
            FT3 => (B::Final, B::Interior, Tc::Whole, Sp::Domain),
            FT4 => (B::Final, B::FinalBd, Tc::None, Sp::Boundary),
            FT5 => (B::Final, B::Boundary, Tc::Whole, Sp::Boundary),
            G00 => (B::InitialBd, B::InitialBd, Tc::None, Sp::Local),
            G02 => (B::InitialBd, B::Initial, Tc::None, Sp::Domain),
            G04 => (B::InitialBd, B::InitialBd, Tc::None, Sp::Boundary),
            GT0 => (B::FinalBd, B::FinalBd, Tc::None, Sp::Local),
            GT1 => (B::FinalBd, B::Boundary, Tc::Whole, Sp::Local),
            GT2 => (B::FinalBd, B::Final, Tc::None, Sp::Domain),
            GT3 => (B::FinalBd, B::Interior, Tc::Whole, Sp::Domain),
            GT4 => (B::FinalBd, B::FinalBd, Tc::None, Sp::Boundary),
            GT5 => (B::FinalBd, B::Boundary, Tc::Whole, Sp::Boundary),
        };
        Signature {
            equation,
            reads,
            time,
            space,
        }
    }

    pub fn parse(name: &str) -> Option<KernelId> {
        KernelId::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// Cost integrands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CostId {
    /// `F0(x, S0, ST)` over the domain.
    F0,
    /// `G0(xi, S0bd, STbd)` over the boundary.
    G0,
    /// `F1(t, x, S)` over space-time.
    F1,
    /// `G1(t, xi, Sbd)` over time and boundary.
    G1,
}

impl CostId {
    pub const ALL: [CostId; 4] = [CostId::F0, CostId::G0, CostId::F1, CostId::G1];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            CostId::F0 => "F0",
            CostId::G0 => "G0",
            CostId::F1 => "F1",
            CostId::G1 => "G1",
        }
    }

    /// Bundles readable by this integrand.
    pub fn reads(self) -> &'static [Bundle] {
        match self {
            CostId::F0 => &[Bundle::Initial, Bundle::Final],
            CostId::G0 => &[Bundle::InitialBd, Bundle::FinalBd],
            CostId::F1 => &[Bundle::Interior],
            CostId::G1 => &[Bundle::Boundary],
        }
    }
}

/// Arguments of a kernel: equation time `t` and location `x`, sample time
/// `s` and sample location `y`. Unused coordinates repeat the equation's.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Coords {
    pub t: f64,
    pub x: f64,
    pub s: f64,
    pub y: f64,
}

/// Slot values at one sample node. Slots outside the sampled bundle(s) are
/// empty slices.
#[derive(Debug, Clone, Copy)]
pub struct SlotView<'a> {
    vals: [&'a [f64]; N_SLOTS],
}

impl Default for SlotView<'_> {
    fn default() -> Self {
        SlotView {
            vals: [&[]; N_SLOTS],
        }
    }
}

impl<'a> SlotView<'a> {
    #[inline]
    pub fn set(&mut self, slot: Slot, v: &'a [f64]) {
        self.vals[slot.index()] = v;
    }

    #[inline]
    pub fn get(&self, slot: Slot) -> &'a [f64] {
        self.vals[slot.index()]
    }

    /// First component of a slot; convenient for scalar models.
    #[inline]
    pub fn s(&self, slot: Slot) -> f64 {
        self.vals[slot.index()][0]
    }
}

/// A kernel: an n-vector valued function of coordinates and slot values,
/// with analytic slot-partials.
pub trait Kernel: Send + Sync {
    fn eval(&self, c: &Coords, v: &SlotView, out: &mut [f64]);
    /// Slots with a (possibly) nonzero partial.
    fn slots(&self) -> &[Slot];
    /// Jacobian block `d out / d slot`, row-major `n x dim(slot)`.
    fn partial(&self, slot: Slot, c: &Coords, v: &SlotView, out: &mut [f64]);
}

/// A scalar cost integrand with analytic slot-partials.
pub trait CostIntegrand: Send + Sync {
    fn eval(&self, c: &Coords, v: &SlotView) -> f64;
    fn slots(&self) -> &[Slot];
    /// Gradient with respect to `slot`, length `dim(slot)`.
    fn partial(&self, slot: Slot, c: &Coords, v: &SlotView, out: &mut [f64]);
}

type EvalFn = Arc<dyn Fn(&Coords, &SlotView, &mut [f64]) + Send + Sync>;
type ScalarFn = Arc<dyn Fn(&Coords, &SlotView) -> f64 + Send + Sync>;

/// Closure-backed [`Kernel`].
#[derive(Clone)]
pub struct KernelFn {
    eval: EvalFn,
    slots: Vec<Slot>,
    partials: Vec<EvalFn>,
}

impl KernelFn {
    pub fn new(eval: impl Fn(&Coords, &SlotView, &mut [f64]) + Send + Sync + 'static) -> KernelFn {
        KernelFn {
            eval: Arc::new(eval),
            slots: Vec::new(),
            partials: Vec::new(),
        }
    }

    /// Scalar kernel (n = 1).
    pub fn scalar(f: impl Fn(&Coords, &SlotView) -> f64 + Send + Sync + 'static) -> KernelFn {
        KernelFn::new(move |c, v, out| out[0] = f(c, v))
    }

    pub fn with_partial(
        mut self,
        slot: Slot,
        d: impl Fn(&Coords, &SlotView, &mut [f64]) + Send + Sync + 'static,
    ) -> KernelFn {
        self.slots.push(slot);
        self.partials.push(Arc::new(d));
        self
    }

    /// Scalar partial for n = 1 and a one-dimensional slot.
    pub fn d(self, slot: Slot, d: impl Fn(&Coords, &SlotView) -> f64 + Send + Sync + 'static) -> KernelFn {
        self.with_partial(slot, move |c, v, out| out[0] = d(c, v))
    }

    /// The zero kernel.
    pub fn zero() -> KernelFn {
        KernelFn::new(|_, _, out| out.fill(0.0))
    }
}

impl Kernel for KernelFn {
    fn eval(&self, c: &Coords, v: &SlotView, out: &mut [f64]) {
        (self.eval)(c, v, out)
    }

    fn slots(&self) -> &[Slot] {
        &self.slots
    }

    fn partial(&self, slot: Slot, c: &Coords, v: &SlotView, out: &mut [f64]) {
        match self.slots.iter().position(|&s| s == slot) {
            Some(k) => (self.partials[k])(c, v, out),
            None => out.fill(0.0),
        }
    }
}

/// Closure-backed [`CostIntegrand`].
#[derive(Clone)]
pub struct CostFn {
    eval: ScalarFn,
    slots: Vec<Slot>,
    partials: Vec<EvalFn>,
}

impl CostFn {
    pub fn new(eval: impl Fn(&Coords, &SlotView) -> f64 + Send + Sync + 'static) -> CostFn {
        CostFn {
            eval: Arc::new(eval),
            slots: Vec::new(),
            partials: Vec::new(),
        }
    }

    pub fn with_partial(
        mut self,
        slot: Slot,
        d: impl Fn(&Coords, &SlotView, &mut [f64]) + Send + Sync + 'static,
    ) -> CostFn {
        self.slots.push(slot);
        self.partials.push(Arc::new(d));
        self
    }

    /// Partial for a one-dimensional slot.
    pub fn d(self, slot: Slot, d: impl Fn(&Coords, &SlotView) -> f64 + Send + Sync + 'static) -> CostFn {
        self.with_partial(slot, move |c, v, out| out[0] = d(c, v))
    }

    /// `|slot|^2` summed over components.
    pub fn squared(slot: Slot) -> CostFn {
        CostFn::new(move |_, v| v.get(slot).iter().map(|a| a * a).sum()).with_partial(
            slot,
            move |_, v, out| {
                for (o, a) in out.iter_mut().zip(v.get(slot)) {
                    *o = 2.0 * a;
                }
            },
        )
    }

    /// Sum of several integrands.
    pub fn sum(parts: Vec<CostFn>) -> CostFn {
        let parts = Arc::new(parts);
        let mut slots: Vec<Slot> = parts.iter().flat_map(|p| p.slots.clone()).collect();
        slots.sort();
        slots.dedup();
        let p_eval = parts.clone();
        let mut out = CostFn::new(move |c, v| p_eval.iter().map(|p| (p.eval)(c, v)).sum());
        for slot in slots {
            let ps = parts.clone();
            out = out.with_partial(slot, move |c, v, o| {
                o.fill(0.0);
                let mut tmp = vec![0.0; o.len()];
                for p in ps.iter() {
                    p.partial(slot, c, v, &mut tmp);
                    for (a, b) in o.iter_mut().zip(&tmp) {
                        *a += b;
                    }
                }
            });
        }
        out
    }
}

impl CostIntegrand for CostFn {
    fn eval(&self, c: &Coords, v: &SlotView) -> f64 {
        (self.eval)(c, v)
    }

    fn slots(&self) -> &[Slot] {
        &self.slots
    }

    fn partial(&self, slot: Slot, c: &Coords, v: &SlotView, out: &mut [f64]) {
        match self.slots.iter().position(|&s| s == slot) {
            Some(k) => (self.partials[k])(c, v, out),
            None => out.fill(0.0),
        }
    }
}

/// Per-block scalar box constraints on the controls.
pub type Bounds = std::collections::BTreeMap<crate::state::ControlBlock, (f64, f64)>;

/// A complete optimal-control problem.
#[derive(Clone)]
pub struct Problem {
    pub name: String,
    /// State dimension.
    pub n: usize,
    /// Distributed-control dimension.
    pub m_u: usize,
    /// Boundary-control dimension.
    pub m_w: usize,
    kernels: Vec<Option<Arc<dyn Kernel>>>,
    costs: Vec<Option<Arc<dyn CostIntegrand>>>,
    pub bounds: Option<Bounds>,
}

impl std::fmt::Debug for Problem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let ks: Vec<&str> = KernelId::ALL
            .iter()
            .filter(|k| self.kernel(**k).is_some())
            .map(|k| k.name())
            .collect();
        let cs: Vec<&str> = CostId::ALL
            .iter()
            .filter(|c| self.cost(**c).is_some())
            .map(|c| c.name())
            .collect();
        f.debug_struct("Problem")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("m_u", &self.m_u)
            .field("m_w", &self.m_w)
            .field("kernels", &ks)
            .field("costs", &cs)
            .finish()
    }
}

impl Problem {
    /// A problem with every kernel and cost absent.
    pub fn new(name: &str, n: usize, m_u: usize, m_w: usize) -> Problem {
        Problem {
            name: name.to_string(),
            n,
            m_u,
            m_w,
            kernels: vec![None; N_KERNELS],
            costs: vec![None; 4],
            bounds: None,
        }
    }

    pub fn with_kernel(mut self, id: KernelId, k: impl Kernel + 'static) -> Problem {
        self.set_kernel(id, Some(Arc::new(k)));
        self
    }

    pub fn with_cost(mut self, id: CostId, c: impl CostIntegrand + 'static) -> Problem {
        self.set_cost(id, Some(Arc::new(c)));
        self
    }

    pub fn set_kernel(&mut self, id: KernelId, k: Option<Arc<dyn Kernel>>) {
        self.kernels[id.index()] = k;
    }

    pub fn set_cost(&mut self, id: CostId, c: Option<Arc<dyn CostIntegrand>>) {
        self.costs[id.index()] = c;
    }

    #[inline]
    pub fn kernel(&self, id: KernelId) -> Option<&Arc<dyn Kernel>> {
        self.kernels[id.index()].as_ref()
    }

    #[inline]
    pub fn cost(&self, id: CostId) -> Option<&Arc<dyn CostIntegrand>> {
        self.costs[id.index()].as_ref()
    }

    /// Registered kernels feeding the equation of `family`.
    pub fn kernels_for(&self, family: Bundle) -> impl Iterator<Item = (KernelId, &Arc<dyn Kernel>)> {
        KernelId::ALL
            .into_iter()
            .filter(move |k| k.signature().equation == family)
            .filter_map(move |k| self.kernel(k).map(|f| (k, f)))
    }

    /// Dimension of a slot for this problem.
    pub fn slot_dim(&self, slot: Slot) -> usize {
        match slot.kind() {
            SlotKind::State => self.n,
            SlotKind::DistributedControl => self.m_u,
            SlotKind::BoundaryControl => self.m_w,
        }
    }

    /// Whether some registered kernel or cost declares a partial in `slot`.
    pub fn reads_slot(&self, slot: Slot) -> bool {
        self.kernels.iter().flatten().any(|k| k.slots().contains(&slot))
            || self.costs.iter().flatten().any(|c| c.slots().contains(&slot))
    }

    /// True when all four cost integrands are absent.
    pub fn cost_free(&self) -> bool {
        self.costs.iter().all(|c| c.is_none())
    }
}

/// Outcome of [`validate_partials`].
#[derive(Debug, Clone, PartialEq)]
pub struct PartialReport {
    /// `(source, slot, max relative error)` for every checked pair.
    pub entries: Vec<(String, Slot, f64)>,
    pub max_error: f64,
    pub passed: bool,
}

impl PartialReport {
    pub fn failures(&self, tol: f64) -> Vec<&(String, Slot, f64)> {
        self.entries.iter().filter(|e| e.2 > tol).collect()
    }
}

/// Tolerance used by [`validate_partials`].
pub const PARTIAL_TOL: f64 = 1e-6;

const FD_STEP: f64 = 1e-5;

fn probe_values(problem: &Problem, bundles: &[Bundle], rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut vals = vec![Vec::new(); N_SLOTS];
    for b in bundles {
        for &s in b.slots() {
            vals[s.index()] = (0..problem.slot_dim(s)).map(|_| rng.random_range(-1.0..1.0)).collect();
        }
    }
    vals
}

fn view_of(vals: &[Vec<f64>]) -> SlotView<'_> {
    let mut v = SlotView::default();
    for s in Slot::ALL {
        v.set(s, &vals[s.index()]);
    }
    v
}

fn rel_err(a: f64, fd: f64) -> f64 {
    (a - fd).abs() / fd.abs().max(1.0)
}

/// Compares every slot-partial (declared or implied zero) of every
/// registered kernel and cost against central finite differences at
/// `probes` random points.
pub fn validate_partials(problem: &Problem, probes: usize, seed: u64) -> PartialReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries: Vec<(String, Slot, f64)> = Vec::new();
    let n = problem.n;
    let record = |entries: &mut Vec<(String, Slot, f64)>, name: &str, slot: Slot, e: f64| {
        match entries.iter_mut().find(|x| x.0 == name && x.1 == slot) {
            Some(x) => x.2 = x.2.max(e),
            None => entries.push((name.to_string(), slot, e)),
        }
    };
    for _ in 0..probes.max(1) {
        let c = Coords {
            t: rng.random_range(0.0..1.0),
            x: rng.random_range(0.0..1.0),
            s: rng.random_range(0.0..1.0),
            y: rng.random_range(0.0..1.0),
        };
        for id in KernelId::ALL {
            let Some(k) = problem.kernel(id) else { continue };
            let reads = [id.signature().reads];
            let base = probe_values(problem, &reads, &mut rng);
            for &slot in reads[0].slots() {
                let dim = problem.slot_dim(slot);
                let mut jac = vec![0.0; n * dim];
                k.partial(slot, &c, &view_of(&base), &mut jac);
                let mut err: f64 = 0.0;
                for b in 0..dim {
                    let (mut plus, mut minus) = (base.clone(), base.clone());
                    plus[slot.index()][b] += FD_STEP;
                    minus[slot.index()][b] -= FD_STEP;
                    let (mut fp, mut fm) = (vec![0.0; n], vec![0.0; n]);
                    k.eval(&c, &view_of(&plus), &mut fp);
                    k.eval(&c, &view_of(&minus), &mut fm);
                    for a in 0..n {
                        let fd = (fp[a] - fm[a]) / (2.0 * FD_STEP);
                        err = err.max(rel_err(jac[a * dim + b], fd));
                    }
                }
                record(&mut entries, id.name(), slot, err);
            }
        }
        for id in CostId::ALL {
            let Some(cf) = problem.cost(id) else { continue };
            let base = probe_values(problem, id.reads(), &mut rng);
            for &bundle in id.reads() {
                for &slot in bundle.slots() {
                    let dim = problem.slot_dim(slot);
                    let mut g = vec![0.0; dim];
                    cf.partial(slot, &c, &view_of(&base), &mut g);
                    let mut err: f64 = 0.0;
                    for b in 0..dim {
                        let (mut plus, mut minus) = (base.clone(), base.clone());
                        plus[slot.index()][b] += FD_STEP;
                        minus[slot.index()][b] -= FD_STEP;
                        let fd = (cf.eval(&c, &view_of(&plus)) - cf.eval(&c, &view_of(&minus)))
                            / (2.0 * FD_STEP);
                        err = err.max(rel_err(g[b], fd));
                    }
                    record(&mut entries, id.name(), slot, err);
                }
            }
        }
    }
    let max_error = entries.iter().map(|e| e.2).fold(0.0, f64::max);
    PartialReport {
        passed: max_error <= PARTIAL_TOL,
        max_error,
        entries,
    }
}
