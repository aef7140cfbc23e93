//! State, control and co-state containers, derived slot fields, and the
//! flat ordering used by the dense oracles.

use ndarray::{Array2, Array3, ArrayView3, ArrayViewMut3, Axis};

use crate::error::{Error, Result};
use crate::mesh::{DiffOrder, Mesh, Side};

/// The six blocks of a state (or co-state) bundle, in flattening order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StateBlock {
    /// Trajectory over `(t, x)`.
    Phi,
    /// Boundary trajectory over `(t, side)`.
    PhiBd,
    /// Initial interior slice.
    Phi0,
    /// Final interior slice.
    PhiT,
    /// Initial boundary values.
    Phi0Bd,
    /// Final boundary values.
    PhiTBd,
}

impl StateBlock {
    pub const ALL: [StateBlock; 6] = [
        StateBlock::Phi,
        StateBlock::PhiBd,
        StateBlock::Phi0,
        StateBlock::PhiT,
        StateBlock::Phi0Bd,
        StateBlock::PhiTBd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StateBlock::Phi => "phi",
            StateBlock::PhiBd => "phi_bd",
            StateBlock::Phi0 => "phi0",
            StateBlock::PhiT => "phiT",
            StateBlock::Phi0Bd => "phi0_bd",
            StateBlock::PhiTBd => "phiT_bd",
        }
    }

    /// `(rows, cols)` of the block; rows index time, cols index space or side.
    pub fn grid(self, mesh: &Mesh) -> (usize, usize) {
        match self {
            StateBlock::Phi => (mesh.nt + 1, mesh.nx + 1),
            StateBlock::PhiBd => (mesh.nt + 1, 2),
            StateBlock::Phi0 | StateBlock::PhiT => (1, mesh.nx + 1),
            StateBlock::Phi0Bd | StateBlock::PhiTBd => (1, 2),
        }
    }

    /// Lagrangian quadrature weight of a node of this block.
    pub fn weight(self, mesh: &Mesh, row: usize, col: usize) -> f64 {
        match self {
            StateBlock::Phi => mesh.wt(row) * mesh.wx(col),
            StateBlock::PhiBd => mesh.wt(row),
            StateBlock::Phi0 | StateBlock::PhiT => mesh.wx(col),
            StateBlock::Phi0Bd | StateBlock::PhiTBd => 1.0,
        }
    }
}

/// The six control blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ControlBlock {
    U,
    W,
    U0,
    UT,
    W0,
    WT,
}

impl ControlBlock {
    pub const ALL: [ControlBlock; 6] = [
        ControlBlock::U,
        ControlBlock::W,
        ControlBlock::U0,
        ControlBlock::UT,
        ControlBlock::W0,
        ControlBlock::WT,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ControlBlock::U => "u",
            ControlBlock::W => "w",
            ControlBlock::U0 => "u0",
            ControlBlock::UT => "uT",
            ControlBlock::W0 => "w0",
            ControlBlock::WT => "wT",
        }
    }

    pub fn parse(name: &str) -> Option<ControlBlock> {
        ControlBlock::ALL.into_iter().find(|b| b.name() == name)
    }

    pub fn is_boundary(self) -> bool {
        matches!(self, ControlBlock::W | ControlBlock::W0 | ControlBlock::WT)
    }

    pub fn is_time_dependent(self) -> bool {
        matches!(self, ControlBlock::U | ControlBlock::W)
    }

    pub fn grid(self, mesh: &Mesh) -> (usize, usize) {
        match self {
            ControlBlock::U => (mesh.nt + 1, mesh.nx + 1),
            ControlBlock::W => (mesh.nt + 1, 2),
            ControlBlock::U0 | ControlBlock::UT => (1, mesh.nx + 1),
            ControlBlock::W0 | ControlBlock::WT => (1, 2),
        }
    }

    /// Quadrature weight of a node; gradients are densities with respect
    /// to these weights.
    pub fn weight(self, mesh: &Mesh, row: usize, col: usize) -> f64 {
        match self {
            ControlBlock::U => mesh.wt(row) * mesh.wx(col),
            ControlBlock::W => mesh.wt(row),
            ControlBlock::U0 | ControlBlock::UT => mesh.wx(col),
            ControlBlock::W0 | ControlBlock::WT => 1.0,
        }
    }

    /// Time and location of a node, for evaluating profiles.
    pub fn coords(self, mesh: &Mesh, row: usize, col: usize) -> (f64, f64) {
        let t = match self {
            ControlBlock::U | ControlBlock::W => mesh.t(row),
            ControlBlock::U0 | ControlBlock::W0 => 0.0,
            ControlBlock::UT | ControlBlock::WT => mesh.t_final,
        };
        let x = if self.is_boundary() {
            mesh.xi(Side::from_index(col))
        } else {
            mesh.x(col)
        };
        (t, x)
    }
}

fn slice3(a: &Array2<f64>) -> ArrayView3<'_, f64> {
    a.view().insert_axis(Axis(0))
}

fn slice3_mut(a: &mut Array2<f64>) -> ArrayViewMut3<'_, f64> {
    a.view_mut().insert_axis(Axis(0))
}

fn check3(what: &str, a: &ArrayView3<f64>, rows: usize, cols: usize, dim: usize) -> Result<()> {
    let (r, c, d) = a.dim();
    if (r, c, d) != (rows, cols, dim) {
        return Err(Error::Shape {
            what: what.to_string(),
            expected: vec![rows, cols, dim],
            found: vec![r, c, d],
        });
    }
    Ok(())
}

macro_rules! six_block_bundle {
    ($(#[$meta:meta])* $name:ident { $f0:ident, $f1:ident, $f2:ident, $f3:ident, $f4:ident, $f5:ident }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            pub $f0: Array3<f64>,
            pub $f1: Array3<f64>,
            pub $f2: Array2<f64>,
            pub $f3: Array2<f64>,
            pub $f4: Array2<f64>,
            pub $f5: Array2<f64>,
        }

        impl $name {
            pub fn zeros(mesh: &Mesh, n: usize) -> Self {
                let (nt, nx) = (mesh.nt + 1, mesh.nx + 1);
                $name {
                    $f0: Array3::zeros((nt, nx, n)),
                    $f1: Array3::zeros((nt, 2, n)),
                    $f2: Array2::zeros((nx, n)),
                    $f3: Array2::zeros((nx, n)),
                    $f4: Array2::zeros((2, n)),
                    $f5: Array2::zeros((2, n)),
                }
            }

            /// Component count.
            pub fn dim(&self) -> usize {
                self.$f0.dim().2
            }

            pub fn block(&self, b: StateBlock) -> ArrayView3<'_, f64> {
                match b {
                    StateBlock::Phi => self.$f0.view(),
                    StateBlock::PhiBd => self.$f1.view(),
                    StateBlock::Phi0 => slice3(&self.$f2),
                    StateBlock::PhiT => slice3(&self.$f3),
                    StateBlock::Phi0Bd => slice3(&self.$f4),
                    StateBlock::PhiTBd => slice3(&self.$f5),
                }
            }

            pub fn block_mut(&mut self, b: StateBlock) -> ArrayViewMut3<'_, f64> {
                match b {
                    StateBlock::Phi => self.$f0.view_mut(),
                    StateBlock::PhiBd => self.$f1.view_mut(),
                    StateBlock::Phi0 => slice3_mut(&mut self.$f2),
                    StateBlock::PhiT => slice3_mut(&mut self.$f3),
                    StateBlock::Phi0Bd => slice3_mut(&mut self.$f4),
                    StateBlock::PhiTBd => slice3_mut(&mut self.$f5),
                }
            }

            pub fn check_shape(&self, mesh: &Mesh, n: usize) -> Result<()> {
                for b in StateBlock::ALL {
                    let (r, c) = b.grid(mesh);
                    check3(b.name(), &self.block(b), r, c, n)?;
                }
                Ok(())
            }

            /// Flattens the bundle in [`FlatIndex`] order.
            pub fn pack(&self) -> Vec<f64> {
                let mut out = Vec::with_capacity(self.flat_len());
                for b in StateBlock::ALL {
                    out.extend(self.block(b).iter());
                }
                out
            }

            /// Inverse of [`Self::pack`], using `like` for the shapes.
            pub fn unpack_like(like: &Self, flat: &[f64]) -> Result<Self> {
                if flat.len() != like.flat_len() {
                    return Err(Error::Shape {
                        what: "flat vector".into(),
                        expected: vec![like.flat_len()],
                        found: vec![flat.len()],
                    });
                }
                let mut out = like.clone();
                let mut k = 0;
                for b in StateBlock::ALL {
                    for v in out.block_mut(b).iter_mut() {
                        *v = flat[k];
                        k += 1;
                    }
                }
                Ok(out)
            }

            pub fn unpack(mesh: &Mesh, n: usize, flat: &[f64]) -> Result<Self> {
                Self::unpack_like(&Self::zeros(mesh, n), flat)
            }

            pub fn flat_len(&self) -> usize {
                StateBlock::ALL.iter().map(|&b| self.block(b).len()).sum()
            }

            /// `self += a * other`
            pub fn axpy(&mut self, a: f64, other: &Self) {
                for b in StateBlock::ALL {
                    self.block_mut(b).scaled_add(a, &other.block(b));
                }
            }

            pub fn scale(&mut self, a: f64) {
                for b in StateBlock::ALL {
                    self.block_mut(b).mapv_inplace(|v| a * v);
                }
            }

            /// Largest absolute entry over all six blocks.
            pub fn sup_norm(&self) -> f64 {
                StateBlock::ALL
                    .iter()
                    .map(|&b| self.block(b).iter().fold(0.0f64, |m, v| m.max(v.abs())))
                    .fold(0.0, f64::max)
            }

            /// First block containing a NaN or infinity.
            pub fn first_non_finite(&self) -> Option<StateBlock> {
                StateBlock::ALL
                    .into_iter()
                    .find(|&b| self.block(b).iter().any(|v| !v.is_finite()))
            }
        }
    };
}

six_block_bundle!(
    /// The six state components. Boundary columns of `phi` mirror `phi_bd`,
    /// and boundary columns of `phi0`/`phi_t` mirror `phi0_bd`/`phi_t_bd`,
    /// once the forward solver has run.
    StateBundle { phi, phi_bd, phi0, phi_t, phi0_bd, phi_t_bd }
);

six_block_bundle!(
    /// The six co-state fields, laid out like [`StateBundle`].
    CoStateBundle { psi, omega, psi0, psi_t, omega0, omega_t }
);

impl CoStateBundle {
    pub fn from_flat(mesh: &Mesh, n: usize, flat: &[f64]) -> Result<Self> {
        Self::unpack(mesh, n, flat)
    }
}

/// Maximum absolute componentwise difference over all six blocks.
pub fn sup_distance(a: &StateBundle, b: &StateBundle) -> Result<f64> {
    let mut d = 0.0f64;
    for blk in StateBlock::ALL {
        let (x, y) = (a.block(blk), b.block(blk));
        if x.dim() != y.dim() {
            let (r, c, k) = y.dim();
            let (r0, c0, k0) = x.dim();
            return Err(Error::Shape {
                what: blk.name().into(),
                expected: vec![r0, c0, k0],
                found: vec![r, c, k],
            });
        }
        for (u, v) in x.iter().zip(y.iter()) {
            d = d.max((u - v).abs());
        }
    }
    Ok(d)
}

/// Controls on the interior, the boundary, and the four slices.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlBundle {
    pub u: Array3<f64>,
    pub w: Array3<f64>,
    pub u0: Array2<f64>,
    pub u_t: Array2<f64>,
    pub w0: Array2<f64>,
    pub w_t: Array2<f64>,
}

impl ControlBundle {
    pub fn zeros(mesh: &Mesh, m_u: usize, m_w: usize) -> ControlBundle {
        let (nt, nx) = (mesh.nt + 1, mesh.nx + 1);
        ControlBundle {
            u: Array3::zeros((nt, nx, m_u)),
            w: Array3::zeros((nt, 2, m_w)),
            u0: Array2::zeros((nx, m_u)),
            u_t: Array2::zeros((nx, m_u)),
            w0: Array2::zeros((2, m_w)),
            w_t: Array2::zeros((2, m_w)),
        }
    }

    /// Fills every block from a profile `(block, t, x, component) -> value`.
    pub fn from_fn(
        mesh: &Mesh,
        m_u: usize,
        m_w: usize,
        f: impl Fn(ControlBlock, f64, f64, usize) -> f64,
    ) -> ControlBundle {
        let mut c = ControlBundle::zeros(mesh, m_u, m_w);
        for b in ControlBlock::ALL {
            let mut blk = c.block_mut(b);
            for ((r, col, k), v) in blk.indexed_iter_mut() {
                let (t, x) = b.coords(mesh, r, col);
                *v = f(b, t, x, k);
            }
        }
        c
    }

    pub fn m_u(&self) -> usize {
        self.u.dim().2
    }

    pub fn m_w(&self) -> usize {
        self.w.dim().2
    }

    pub fn block(&self, b: ControlBlock) -> ArrayView3<'_, f64> {
        match b {
            ControlBlock::U => self.u.view(),
            ControlBlock::W => self.w.view(),
            ControlBlock::U0 => slice3(&self.u0),
            ControlBlock::UT => slice3(&self.u_t),
            ControlBlock::W0 => slice3(&self.w0),
            ControlBlock::WT => slice3(&self.w_t),
        }
    }

    pub fn block_mut(&mut self, b: ControlBlock) -> ArrayViewMut3<'_, f64> {
        match b {
            ControlBlock::U => self.u.view_mut(),
            ControlBlock::W => self.w.view_mut(),
            ControlBlock::U0 => slice3_mut(&mut self.u0),
            ControlBlock::UT => slice3_mut(&mut self.u_t),
            ControlBlock::W0 => slice3_mut(&mut self.w0),
            ControlBlock::WT => slice3_mut(&mut self.w_t),
        }
    }

    pub fn check_shape(&self, mesh: &Mesh, m_u: usize, m_w: usize) -> Result<()> {
        for b in ControlBlock::ALL {
            let (r, c) = b.grid(mesh);
            let d = if b.is_boundary() { m_w } else { m_u };
            check3(b.name(), &self.block(b), r, c, d)?;
            if self.block(b).iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    source_name: format!("control block {}", b.name()),
                    node: "input".into(),
                });
            }
        }
        Ok(())
    }

    /// Flattened controls, blocks in [`ControlBlock::ALL`] order.
    pub fn pack(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for b in ControlBlock::ALL {
            out.extend(self.block(b).iter());
        }
        out
    }

    pub fn unpack_like(like: &ControlBundle, flat: &[f64]) -> Result<ControlBundle> {
        let len: usize = ControlBlock::ALL.iter().map(|&b| like.block(b).len()).sum();
        if flat.len() != len {
            return Err(Error::Shape {
                what: "flat control vector".into(),
                expected: vec![len],
                found: vec![flat.len()],
            });
        }
        let mut out = like.clone();
        let mut k = 0;
        for b in ControlBlock::ALL {
            for v in out.block_mut(b).iter_mut() {
                *v = flat[k];
                k += 1;
            }
        }
        Ok(out)
    }

    /// Offset of the first entry of `b` in [`Self::pack`] order.
    pub fn block_offset(&self, b: ControlBlock) -> usize {
        ControlBlock::ALL
            .iter()
            .take_while(|&&x| x != b)
            .map(|&x| self.block(x).len())
            .sum()
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: f64, other: &ControlBundle) {
        for b in ControlBlock::ALL {
            self.block_mut(b).scaled_add(a, &other.block(b));
        }
    }

    /// Quadrature pairing of one block: `sum_nodes weight * <a, b>`.
    pub fn pairing_block(
        mesh: &Mesh,
        blk: ControlBlock,
        a: &ArrayView3<f64>,
        b: &ArrayView3<f64>,
    ) -> f64 {
        let mut acc = 0.0;
        for ((r, c, k), va) in a.indexed_iter() {
            acc += blk.weight(mesh, r, c) * va * b[[r, c, k]];
        }
        acc
    }

    /// Quadrature pairing summed over all blocks.
    pub fn pairing(mesh: &Mesh, a: &ControlBundle, b: &ControlBundle) -> f64 {
        ControlBlock::ALL
            .iter()
            .map(|&blk| Self::pairing_block(mesh, blk, &a.block(blk), &b.block(blk)))
            .sum()
    }
}

/// Derived slot fields: spatial derivatives, time derivatives and boundary
/// traces of a [`StateBundle`].
#[derive(Debug, Clone, PartialEq)]
pub struct DerivedSlots {
    pub p: Array3<f64>,
    pub q: Array3<f64>,
    pub phi_dot: Array3<f64>,
    pub p_dot: Array3<f64>,
    pub q_dot: Array3<f64>,
    pub phi_bd_dot: Array3<f64>,
    pub p_bd: Array3<f64>,
    pub p_bd_dot: Array3<f64>,
    pub p0: Array2<f64>,
    pub q0: Array2<f64>,
    pub p_t: Array2<f64>,
    pub q_t: Array2<f64>,
    pub p0_bd: Array2<f64>,
    pub p_t_bd: Array2<f64>,
}

/// One-sided trace of the spatial derivative at a boundary point, reading
/// the boundary value from `bd` and the neighbouring columns from `row`.
fn boundary_gradient(mesh: &Mesh, row: &ndarray::ArrayView2<f64>, bd: &[f64], side: Side) -> Vec<f64> {
    let taps = mesh
        .space_stencil(DiffOrder::First)
        .taps(mesh.boundary_column(side));
    let b = mesh.boundary_column(side);
    (0..bd.len())
        .map(|k| {
            taps.iter()
                .map(|(j, w)| w * if j == b { bd[k] } else { row[[j, k]] })
                .sum()
        })
        .collect()
}

/// Computes all derived slots of `state`.
pub fn derive_slots(mesh: &Mesh, state: &StateBundle) -> Result<DerivedSlots> {
    let n = state.dim();
    state.check_shape(mesh, n)?;
    let dt = mesh.time_stencil(DiffOrder::First);
    let dx = mesh.space_stencil(DiffOrder::First);
    let dxx = mesh.space_stencil(DiffOrder::Second);

    let phi = state.phi.view();
    let p = dx.apply_along(&phi, Axis(1));
    let q = dxx.apply_along(&phi, Axis(1));
    let phi_dot = dt.apply_along(&phi, Axis(0));
    let p_dot = dt.apply_along(&p.view(), Axis(0));
    let q_dot = dt.apply_along(&q.view(), Axis(0));
    let phi_bd_dot = dt.apply_along(&state.phi_bd.view(), Axis(0));

    let mut p_bd = Array3::zeros((mesh.nt + 1, 2, n));
    for i in 0..=mesh.nt {
        let row = state.phi.index_axis(Axis(0), i);
        for side in Side::BOTH {
            let bd: Vec<f64> = state.phi_bd.slice(ndarray::s![i, side.index(), ..]).to_vec();
            let g = boundary_gradient(mesh, &row, &bd, side);
            for k in 0..n {
                p_bd[[i, side.index(), k]] = g[k];
            }
        }
    }
    let p_bd_dot = dt.apply_along(&p_bd.view(), Axis(0));

    let slice_bd = |sl: &Array2<f64>, bd: &Array2<f64>| {
        let mut out = Array2::zeros((2, n));
        for side in Side::BOTH {
            let g = boundary_gradient(mesh, &sl.view(), &bd.row(side.index()).to_vec(), side);
            for k in 0..n {
                out[[side.index(), k]] = g[k];
            }
        }
        out
    };

    Ok(DerivedSlots {
        p0: dx.apply_along(&state.phi0.view(), Axis(0)),
        q0: dxx.apply_along(&state.phi0.view(), Axis(0)),
        p_t: dx.apply_along(&state.phi_t.view(), Axis(0)),
        q_t: dxx.apply_along(&state.phi_t.view(), Axis(0)),
        p0_bd: slice_bd(&state.phi0, &state.phi0_bd),
        p_t_bd: slice_bd(&state.phi_t, &state.phi_t_bd),
        p,
        q,
        phi_dot,
        p_dot,
        q_dot,
        phi_bd_dot,
        p_bd,
        p_bd_dot,
    })
}

/// Deterministic bijection between bundle entries and flat coordinates:
/// `phi` (time-major, then space, then component), `phi_bd`, `phi0`,
/// `phiT`, `phi0_bd`, `phiT_bd`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlatIndex {
    pub nt: usize,
    pub nx: usize,
    pub n: usize,
    offsets: [usize; 7],
}

impl FlatIndex {
    pub fn new(mesh: &Mesh, n: usize) -> FlatIndex {
        let mut offsets = [0usize; 7];
        for (k, b) in StateBlock::ALL.iter().enumerate() {
            let (r, c) = b.grid(mesh);
            offsets[k + 1] = offsets[k] + r * c * n;
        }
        FlatIndex {
            nt: mesh.nt,
            nx: mesh.nx,
            n,
            offsets,
        }
    }

    pub fn len(&self) -> usize {
        self.offsets[6]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn block_range(&self, b: StateBlock) -> std::ops::Range<usize> {
        let k = StateBlock::ALL.iter().position(|&x| x == b).unwrap();
        self.offsets[k]..self.offsets[k + 1]
    }

    /// Flat index of component 0 at node `(row, col)` of block `b`.
    #[inline]
    pub fn base(&self, b: StateBlock, row: usize, col: usize) -> usize {
        let cols = match b {
            StateBlock::Phi | StateBlock::Phi0 | StateBlock::PhiT => self.nx + 1,
            _ => 2,
        };
        let k = match b {
            StateBlock::Phi => 0,
            StateBlock::PhiBd => 1,
            StateBlock::Phi0 => 2,
            StateBlock::PhiT => 3,
            StateBlock::Phi0Bd => 4,
            StateBlock::PhiTBd => 5,
        };
        self.offsets[k] + (row * cols + col) * self.n
    }

    /// Inverse of [`Self::base`]: `(block, row, col, component)`.
    pub fn locate(&self, flat: usize) -> (StateBlock, usize, usize, usize) {
        let k = (0..6).find(|&k| flat < self.offsets[k + 1]).expect("flat index in range");
        let b = StateBlock::ALL[k];
        let cols = match b {
            StateBlock::Phi | StateBlock::Phi0 | StateBlock::PhiT => self.nx + 1,
            _ => 2,
        };
        let rel = flat - self.offsets[k];
        let node = rel / self.n;
        (b, node / cols, node % cols, rel % self.n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_mesh;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_state(mesh: &Mesh, n: usize, seed: u64) -> StateBundle {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut s = StateBundle::zeros(mesh, n);
        for b in StateBlock::ALL {
            s.block_mut(b)
                .mapv_inplace(|_| rng.random_range(-1.0..1.0));
        }
        s
    }

    fn fill(mesh: &Mesh, f: impl Fn(f64, f64) -> f64) -> StateBundle {
        let mut s = StateBundle::zeros(mesh, 1);
        for i in 0..=mesh.nt {
            for j in 0..=mesh.nx {
                s.phi[[i, j, 0]] = f(mesh.t(i), mesh.x(j));
            }
            for side in Side::BOTH {
                s.phi_bd[[i, side.index(), 0]] = f(mesh.t(i), mesh.xi(side));
            }
        }
        s
    }

    #[test]
    fn slots_of_linear_field() {
        let m = build_mesh(1.0, 6, 0.0, 1.0, 5).unwrap();
        let d = derive_slots(&m, &fill(&m, |_, x| x)).unwrap();
        assert!(d.p.iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!(d.q.iter().all(|v| v.abs() < 1e-10));
        assert!(d.phi_dot.iter().all(|v| v.abs() < 1e-12));
        assert!(d.p_bd.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn slots_of_bilinear_quadratic_field() {
        let m = build_mesh(1.0, 6, 0.0, 1.0, 5).unwrap();
        let d = derive_slots(&m, &fill(&m, |t, x| t * x * x)).unwrap();
        for i in 0..=m.nt {
            for j in 0..=m.nx {
                assert!((d.q[[i, j, 0]] - 2.0 * m.t(i)).abs() < 1e-10);
                assert!((d.p_dot[[i, j, 0]] - 2.0 * m.x(j)).abs() < 1e-10);
                assert!((d.q_dot[[i, j, 0]] - 2.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gradient_of_heat_mode() {
        let pi = std::f64::consts::PI;
        let m = build_mesh(1.0, 64, 0.0, 1.0, 64).unwrap();
        let d = derive_slots(&m, &fill(&m, |t, x| (-pi * pi * t).exp() * (pi * x).sin())).unwrap();
        let mut err: f64 = 0.0;
        for i in 0..=m.nt {
            for j in 0..=m.nx {
                let exact = pi * (-pi * pi * m.t(i)).exp() * (pi * m.x(j)).cos();
                err = err.max((d.p[[i, j, 0]] - exact).abs());
            }
        }
        assert!(err < 5e-3, "sup error {err}");
    }

    #[test]
    fn pack_roundtrip_and_lengths() {
        let m = build_mesh(1.0, 5, 0.0, 1.0, 4).unwrap();
        for n in 1..=3 {
            let s = random_state(&m, n, 3);
            let flat = s.pack();
            let idx = FlatIndex::new(&m, n);
            let expected = 6 * 5 * n + 2 * 6 * n + 2 * 5 * n + 4 * n;
            assert_eq!(flat.len(), expected);
            assert_eq!(idx.len(), expected);
            assert_eq!(StateBundle::unpack(&m, n, &flat).unwrap(), s);
            assert!(StateBundle::zeros(&m, n).pack().iter().all(|v| *v == 0.0));
            assert!(matches!(
                StateBundle::unpack(&m, n, &flat[1..]),
                Err(Error::Shape { .. })
            ));
            for b in StateBlock::ALL {
                let blk = s.block(b);
                for ((r, c, k), v) in blk.indexed_iter() {
                    let f = idx.base(b, r, c) + k;
                    assert_eq!(flat[f], *v);
                    assert_eq!(idx.locate(f), (b, r, c, k));
                }
            }
        }
    }

    #[test]
    fn sup_distance_examples() {
        let m = build_mesh(1.0, 4, 0.0, 1.0, 4).unwrap();
        let s = random_state(&m, 2, 1);
        assert_eq!(sup_distance(&s, &s).unwrap(), 0.0);
        let z = StateBundle::zeros(&m, 2);
        let mut one = z.clone();
        one.phi_t_bd[[1, 0]] = 3.0;
        assert_eq!(sup_distance(&z, &one).unwrap(), 3.0);
        let t = random_state(&m, 2, 2);
        let d = sup_distance(&s, &t).unwrap();
        let (mut s2, mut t2) = (s.clone(), t.clone());
        s2.scale(-2.5);
        t2.scale(-2.5);
        assert!((sup_distance(&s2, &t2).unwrap() - 2.5 * d).abs() < 1e-14);
        assert!(sup_distance(&s, &StateBundle::zeros(&m, 1)).is_err());
    }

    proptest! {
        #[test]
        fn derive_slots_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let m = build_mesh(0.8, 5, -0.2, 0.9, 6).unwrap();
            let s1 = random_state(&m, 2, seed);
            let s2 = random_state(&m, 2, seed + 1);
            let mut comb = s1.clone();
            comb.scale(a);
            comb.axpy(b, &s2);
            let d = derive_slots(&m, &comb).unwrap();
            let d1 = derive_slots(&m, &s1).unwrap();
            let d2 = derive_slots(&m, &s2).unwrap();
            let pairs = [
                (&d.q_dot, &d1.q_dot, &d2.q_dot),
                (&d.p_bd_dot, &d1.p_bd_dot, &d2.p_bd_dot),
                (&d.p, &d1.p, &d2.p),
            ];
            for (x, x1, x2) in pairs {
                for ((v, v1), v2) in x.iter().zip(x1.iter()).zip(x2.iter()) {
                    let scale = 1.0 + (a * v1).abs() + (b * v2).abs();
                    prop_assert!((v - (a * v1 + b * v2)).abs() <= 1e-12 * scale);
                }
            }
            for ((v, v1), v2) in d.p0_bd.iter().zip(d1.p0_bd.iter()).zip(d2.p0_bd.iter()) {
                prop_assert!((v - (a * v1 + b * v2)).abs() <= 1e-12 * (1.0 + v.abs()));
            }
        }

        #[test]
        fn sup_distance_is_a_metric(s1 in 0u64..500) {
            let m = build_mesh(1.0, 4, 0.0, 1.0, 4).unwrap();
            let (a, b, c) = (random_state(&m, 1, s1), random_state(&m, 1, s1 + 7), random_state(&m, 1, s1 + 13));
            let ab = sup_distance(&a, &b).unwrap();
            prop_assert_eq!(ab, sup_distance(&b, &a).unwrap());
            let ac = sup_distance(&a, &c).unwrap();
            let cb = sup_distance(&c, &b).unwrap();
            prop_assert!(ab <= ac + cb + 1e-15);
        }
    }
}
