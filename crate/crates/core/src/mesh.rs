//! Uniform space-time grid over `Q = (x_a, x_b) x (0, T)`, trapezoidal
//! quadrature, second-order difference stencils, and a periodic curve mesh
//! used to exercise the tangential derivative on a closed boundary.

use ndarray::{Array, Array1, Array3, ArrayView, ArrayView1, Axis, Dimension};

use crate::error::{Error, Result};

/// One of the two boundary points of the 1-D spatial interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Left, Side::Right];

    /// Column index of this side in `(.., 2, ..)` boundary arrays.
    pub fn index(self) -> usize {
        match self {
            Side::Left => 0,
            Side::Right => 1,
        }
    }

    pub fn from_index(i: usize) -> Side {
        if i == 0 {
            Side::Left
        } else {
            Side::Right
        }
    }

    /// Outward unit normal.
    pub fn normal(self) -> f64 {
        match self {
            Side::Left => -1.0,
            Side::Right => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }
}

/// Uniform grid on `[0, T] x [x_a, x_b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub t_final: f64,
    pub nt: usize,
    pub x_a: f64,
    pub x_b: f64,
    pub nx: usize,
    pub dt: f64,
    pub dx: f64,
}

impl Mesh {
    pub fn new(t_final: f64, nt: usize, x_a: f64, x_b: f64, nx: usize) -> Result<Mesh> {
        build_mesh(t_final, nt, x_a, x_b, nx)
    }

    #[inline]
    pub fn t(&self, i: usize) -> f64 {
        if i == self.nt {
            self.t_final
        } else {
            i as f64 * self.dt
        }
    }

    #[inline]
    pub fn x(&self, j: usize) -> f64 {
        if j == self.nx {
            self.x_b
        } else {
            self.x_a + j as f64 * self.dx
        }
    }

    /// Coordinate of a boundary point.
    #[inline]
    pub fn xi(&self, side: Side) -> f64 {
        match side {
            Side::Left => self.x_a,
            Side::Right => self.x_b,
        }
    }

    /// Grid column holding the given boundary point.
    #[inline]
    pub fn boundary_column(&self, side: Side) -> usize {
        match side {
            Side::Left => 0,
            Side::Right => self.nx,
        }
    }

    pub fn t_nodes(&self) -> Array1<f64> {
        Array1::from_iter((0..=self.nt).map(|i| self.t(i)))
    }

    pub fn x_nodes(&self) -> Array1<f64> {
        Array1::from_iter((0..=self.nx).map(|j| self.x(j)))
    }

    /// Trapezoidal weight of time node `i` over the full interval `[0, T]`.
    #[inline]
    pub fn wt(&self, i: usize) -> f64 {
        trap_weight(i, 0, self.nt, self.dt)
    }

    /// Trapezoidal weight of space node `j` over `[x_a, x_b]`.
    #[inline]
    pub fn wx(&self, j: usize) -> f64 {
        trap_weight(j, 0, self.nx, self.dx)
    }

    pub fn time_stencil(&self, kind: DiffOrder) -> Stencil1d {
        Stencil1d::new(kind, self.nt + 1, self.dt)
    }

    pub fn space_stencil(&self, kind: DiffOrder) -> Stencil1d {
        Stencil1d::new(kind, self.nx + 1, self.dx)
    }

    /// Mesh with both step counts multiplied by `factor`.
    pub fn refined(&self, factor: usize) -> Result<Mesh> {
        build_mesh(
            self.t_final,
            self.nt * factor,
            self.x_a,
            self.x_b,
            self.nx * factor,
        )
    }
}

/// Validating constructor for [`Mesh`].
pub fn build_mesh(t_final: f64, nt: usize, x_a: f64, x_b: f64, nx: usize) -> Result<Mesh> {
    if !t_final.is_finite() || t_final <= 0.0 {
        return Err(Error::Config(format!(
            "T_final must be finite and positive, got {t_final}"
        )));
    }
    if !x_a.is_finite() || !x_b.is_finite() || x_a >= x_b {
        return Err(Error::Config(format!(
            "spatial interval must satisfy x_a < x_b, got [{x_a}, {x_b}]"
        )));
    }
    if nt < 4 {
        return Err(Error::Config(format!("Nt must be at least 4, got {nt}")));
    }
    if nx < 4 {
        return Err(Error::Config(format!("Nx must be at least 4, got {nx}")));
    }
    Ok(Mesh {
        t_final,
        nt,
        x_a,
        x_b,
        nx,
        dt: t_final / nt as f64,
        dx: (x_b - x_a) / nx as f64,
    })
}

/// Trapezoidal weight of node `m` for the sub-interval `[lo, hi]` of a
/// uniform axis with spacing `h`. Zero outside the interval and for an
/// empty interval.
#[inline]
pub fn trap_weight(m: usize, lo: usize, hi: usize, h: f64) -> f64 {
    if lo >= hi || m < lo || m > hi {
        0.0
    } else if m == lo || m == hi {
        0.5 * h
    } else {
        h
    }
}

/// Trapezoidal rule over time nodes `i_lo..=i_hi`.
pub fn quad_time(mesh: &Mesh, samples: &[f64], i_lo: usize, i_hi: usize) -> Result<f64> {
    if samples.len() != mesh.nt + 1 {
        return Err(Error::Index(format!(
            "time samples have length {}, mesh has {} time nodes",
            samples.len(),
            mesh.nt + 1
        )));
    }
    if i_lo > i_hi || i_hi > mesh.nt {
        return Err(Error::Index(format!(
            "time range [{i_lo}, {i_hi}] outside [0, {}]",
            mesh.nt
        )));
    }
    Ok((i_lo..=i_hi)
        .map(|i| trap_weight(i, i_lo, i_hi, mesh.dt) * samples[i])
        .sum())
}

/// Trapezoidal rule over all space nodes.
pub fn quad_space(mesh: &Mesh, samples: &[f64]) -> Result<f64> {
    if samples.len() != mesh.nx + 1 {
        return Err(Error::Index(format!(
            "space samples have length {}, mesh has {} space nodes",
            samples.len(),
            mesh.nx + 1
        )));
    }
    Ok(samples
        .iter()
        .enumerate()
        .map(|(j, v)| mesh.wx(j) * v)
        .sum())
}

/// Counting-measure integral over the two boundary points.
pub fn quad_boundary(_mesh: &Mesh, left: f64, right: f64) -> f64 {
    left + right
}

/// Order of a one-dimensional difference operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiffOrder {
    First,
    Second,
}

/// Up to four `(index, weight)` pairs of a difference stencil row.
#[derive(Debug, Clone, Copy)]
pub struct Taps {
    idx: [usize; 4],
    w: [f64; 4],
    len: usize,
}

impl Taps {
    fn from_slice(entries: &[(usize, f64)]) -> Taps {
        let mut t = Taps {
            idx: [0; 4],
            w: [0.0; 4],
            len: entries.len(),
        };
        for (k, &(i, w)) in entries.iter().enumerate() {
            t.idx[k] = i;
            t.w[k] = w;
        }
        t
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.len).map(move |k| (self.idx[k], self.w[k]))
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Applies the row to a contiguous lane.
    #[inline]
    pub fn apply(&self, lane: &ArrayView1<f64>) -> f64 {
        let mut acc = 0.0;
        for k in 0..self.len {
            acc += self.w[k] * lane[self.idx[k]];
        }
        acc
    }
}

/// Second-order finite-difference operator along one axis: centred in the
/// interior, one-sided at the two ends.
#[derive(Debug, Clone, Copy)]
pub struct Stencil1d {
    pub order: DiffOrder,
    pub points: usize,
    pub h: f64,
}

impl Stencil1d {
    pub fn new(order: DiffOrder, points: usize, h: f64) -> Stencil1d {
        assert!(points >= 4, "difference stencils need at least 4 points");
        Stencil1d { order, points, h }
    }

    pub fn taps(&self, m: usize) -> Taps {
        let last = self.points - 1;
        let h = self.h;
        match self.order {
            DiffOrder::First => {
                let c = 0.5 / h;
                if m == 0 {
                    Taps::from_slice(&[(0, -3.0 * c), (1, 4.0 * c), (2, -c)])
                } else if m == last {
                    Taps::from_slice(&[(last, 3.0 * c), (last - 1, -4.0 * c), (last - 2, c)])
                } else {
                    Taps::from_slice(&[(m - 1, -c), (m + 1, c)])
                }
            }
            DiffOrder::Second => {
                let c = 1.0 / (h * h);
                if m == 0 {
                    Taps::from_slice(&[(0, 2.0 * c), (1, -5.0 * c), (2, 4.0 * c), (3, -c)])
                } else if m == last {
                    Taps::from_slice(&[
                        (last, 2.0 * c),
                        (last - 1, -5.0 * c),
                        (last - 2, 4.0 * c),
                        (last - 3, -c),
                    ])
                } else {
                    Taps::from_slice(&[(m - 1, c), (m, -2.0 * c), (m + 1, c)])
                }
            }
        }
    }

    /// Applies the operator along `axis` of an arbitrary-rank array.
    pub fn apply_along<D: Dimension>(&self, a: &ArrayView<f64, D>, axis: Axis) -> Array<f64, D> {
        assert_eq!(a.len_of(axis), self.points, "stencil length mismatch");
        let mut out = Array::zeros(a.raw_dim());
        let rows: Vec<Taps> = (0..self.points).map(|m| self.taps(m)).collect();
        for (lane_in, mut lane_out) in a.lanes(axis).into_iter().zip(out.lanes_mut(axis)) {
            for (m, taps) in rows.iter().enumerate() {
                lane_out[m] = taps.apply(&lane_in);
            }
        }
        out
    }
}

/// Difference operators appearing in the co-state operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StencilKind {
    Dt,
    Dx,
    Dxx,
    Dtx,
    Dtxx,
}

/// Applies a space-time difference operator to a field shaped
/// `(Nt+1, Nx+1, n)`. Mixed operators are evaluated as the spatial pass
/// followed by the time pass.
pub fn apply_stencil(mesh: &Mesh, kind: StencilKind, field: &Array3<f64>) -> Result<Array3<f64>> {
    let (rows, cols, _) = field.dim();
    if rows != mesh.nt + 1 || cols != mesh.nx + 1 {
        return Err(Error::Shape {
            what: "apply_stencil field".into(),
            expected: vec![mesh.nt + 1, mesh.nx + 1],
            found: vec![rows, cols],
        });
    }
    let dt = mesh.time_stencil(DiffOrder::First);
    let dx = mesh.space_stencil(DiffOrder::First);
    let dxx = mesh.space_stencil(DiffOrder::Second);
    let v = field.view();
    Ok(match kind {
        StencilKind::Dt => dt.apply_along(&v, Axis(0)),
        StencilKind::Dx => dx.apply_along(&v, Axis(1)),
        StencilKind::Dxx => dxx.apply_along(&v, Axis(1)),
        StencilKind::Dtx => dt.apply_along(&dx.apply_along(&v, Axis(1)).view(), Axis(0)),
        StencilKind::Dtxx => dt.apply_along(&dxx.apply_along(&v, Axis(1)).view(), Axis(0)),
    })
}

/// Periodic mesh on a closed curve of circumference `length`.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveMesh {
    pub m: usize,
    pub length: f64,
    pub ds: f64,
}

impl CurveMesh {
    pub fn new(m: usize, length: f64) -> Result<CurveMesh> {
        if m < 8 {
            return Err(Error::Config(format!(
                "curve mesh needs at least 8 nodes, got {m}"
            )));
        }
        if !length.is_finite() || length <= 0.0 {
            return Err(Error::Config(format!(
                "curve length must be finite and positive, got {length}"
            )));
        }
        Ok(CurveMesh {
            m,
            length,
            ds: length / m as f64,
        })
    }

    #[inline]
    pub fn next(&self, k: usize) -> usize {
        (k + 1) % self.m
    }

    #[inline]
    pub fn prev(&self, k: usize) -> usize {
        (k + self.m - 1) % self.m
    }

    /// Arclength coordinate of node `k`.
    pub fn s(&self, k: usize) -> f64 {
        k as f64 * self.ds
    }
}

/// Periodic centred arclength derivative.
pub fn curve_diff(curve: &CurveMesh, field: &[f64]) -> Result<Vec<f64>> {
    if field.len() != curve.m {
        return Err(Error::Shape {
            what: "curve field".into(),
            expected: vec![curve.m],
            found: vec![field.len()],
        });
    }
    let c = 0.5 / curve.ds;
    Ok((0..curve.m)
        .map(|k| c * (field[curve.next(k)] - field[curve.prev(k)]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn field(mesh: &Mesh, f: impl Fn(f64, f64) -> f64) -> Array3<f64> {
        Array3::from_shape_fn((mesh.nt + 1, mesh.nx + 1, 1), |(i, j, _)| {
            f(mesh.t(i), mesh.x(j))
        })
    }

    #[test]
    fn unit_mesh_spacing() {
        let m = build_mesh(1.0, 4, 0.0, 1.0, 4).unwrap();
        assert_eq!(m.dt, 0.25);
        assert_eq!(m.dx, 0.25);
        assert_eq!(m.t_nodes().to_vec(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn symmetric_interval_normals() {
        let m = build_mesh(2.0, 8, -1.0, 1.0, 8).unwrap();
        assert_eq!(m.dx, 0.25);
        assert_eq!(m.xi(Side::Left), -1.0);
        assert_eq!(Side::Left.normal(), -1.0);
        assert_eq!(m.xi(Side::Right), 1.0);
        assert_eq!(Side::Right.normal(), 1.0);
    }

    #[test]
    fn rejects_bad_meshes() {
        assert!(matches!(build_mesh(1.0, 3, 0.0, 1.0, 4), Err(Error::Config(_))));
        assert!(build_mesh(1.0, 4, 0.0, 1.0, 3).is_err());
        assert!(build_mesh(0.0, 4, 0.0, 1.0, 4).is_err());
        assert!(build_mesh(f64::NAN, 4, 0.0, 1.0, 4).is_err());
        assert!(build_mesh(1.0, 4, 1.0, 1.0, 4).is_err());
        assert!(build_mesh(1.0, 4, 0.0, f64::INFINITY, 4).is_err());
    }

    #[test]
    fn grid_lengths_are_exact() {
        let m = build_mesh(0.7, 13, -0.3, 2.9, 11).unwrap();
        assert!((m.dt * 13.0 - 0.7).abs() < 1e-15);
        assert!((m.dx * 11.0 - 3.2).abs() < 1e-15);
        assert_eq!(m.t(m.nt), 0.7);
        assert_eq!(m.x(m.nx), 2.9);
    }

    #[test]
    fn trapezoid_weights_sum_to_length() {
        let m = build_mesh(1.0, 16, 0.0, 2.0, 8).unwrap();
        let st: f64 = (0..=m.nt).map(|i| m.wt(i)).sum();
        let sx: f64 = (0..=m.nx).map(|j| m.wx(j)).sum();
        assert_eq!(st, 1.0);
        assert_eq!(sx, 2.0);
    }

    #[test]
    fn quad_time_examples() {
        let m = build_mesh(1.0, 4, 0.0, 1.0, 4).unwrap();
        let ones = vec![1.0; 5];
        assert_eq!(quad_time(&m, &ones, 0, 4).unwrap(), 1.0);
        let lin: Vec<f64> = (0..=4).map(|i| m.t(i)).collect();
        assert_eq!(quad_time(&m, &lin, 0, 4).unwrap(), 0.5);
        assert_eq!(quad_time(&m, &lin, 2, 2).unwrap(), 0.0);
        assert!(matches!(quad_time(&m, &lin, 3, 5), Err(Error::Index(_))));
        assert!(quad_time(&m, &lin, 3, 2).is_err());

        let m = build_mesh(1.0, 100, 0.0, 1.0, 4).unwrap();
        let e: Vec<f64> = (0..=100).map(|i| m.t(i).exp()).collect();
        let q = quad_time(&m, &e, 0, 100).unwrap();
        assert!((q - (1f64.exp() - 1.0)).abs() < 2e-5);
    }

    #[test]
    fn quad_space_examples() {
        let m = build_mesh(1.0, 4, 0.0, 1.0, 64).unwrap();
        assert_eq!(quad_space(&m, &vec![1.0; 65]).unwrap(), 1.0);
        let s: Vec<f64> = (0..=64)
            .map(|j| (std::f64::consts::PI * m.x(j)).sin())
            .collect();
        let q = quad_space(&m, &s).unwrap();
        assert!((q - 2.0 / std::f64::consts::PI).abs() < 5e-4);
        assert!(matches!(quad_space(&m, &[1.0]), Err(Error::Index(_))));
    }

    #[test]
    fn boundary_counting_measure() {
        let m = build_mesh(1.0, 4, 0.0, 1.0, 4).unwrap();
        assert_eq!(quad_boundary(&m, 1.0, 1.0), 2.0);
        assert_eq!(quad_boundary(&m, 0.0, 0.0), 0.0);
        assert_eq!(quad_boundary(&m, 3.0, -3.0), 0.0);
    }

    #[test]
    fn stencils_exact_on_polynomials() {
        let m = build_mesh(1.0, 6, 0.0, 1.0, 7).unwrap();
        let d = apply_stencil(&m, StencilKind::Dx, &field(&m, |_, x| x)).unwrap();
        assert!(d.iter().all(|v| (v - 1.0).abs() < 1e-12));
        let d = apply_stencil(&m, StencilKind::Dxx, &field(&m, |_, x| x * x)).unwrap();
        assert!(d.iter().all(|v| (v - 2.0).abs() < 1e-10));
        let d = apply_stencil(&m, StencilKind::Dtxx, &field(&m, |t, x| t * x * x)).unwrap();
        assert!(d.iter().all(|v| (v - 2.0).abs() < 1e-9));
        let d = apply_stencil(&m, StencilKind::Dtx, &field(&m, |t, x| t * x)).unwrap();
        assert!(d.iter().all(|v| (v - 1.0).abs() < 1e-11));
    }

    #[test]
    fn dt_of_sine_matches_cosine() {
        let m = build_mesh(1.0, 200, 0.0, 1.0, 4).unwrap();
        let d = apply_stencil(&m, StencilKind::Dt, &field(&m, |t, _| t.sin())).unwrap();
        let err = (0..=m.nt)
            .map(|i| (d[[i, 2, 0]] - m.t(i).cos()).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-3, "sup error {err}");
    }

    #[test]
    fn mixed_stencils_are_compositions() {
        let m = build_mesh(1.3, 9, -0.5, 0.8, 7).unwrap();
        let f = field(&m, |t, x| (3.0 * t).sin() * (x * x + 0.3).ln() + t * t * x);
        let dtx = apply_stencil(&m, StencilKind::Dtx, &f).unwrap();
        let seq = apply_stencil(
            &m,
            StencilKind::Dt,
            &apply_stencil(&m, StencilKind::Dx, &f).unwrap(),
        )
        .unwrap();
        assert_eq!(dtx, seq);
        let dtxx = apply_stencil(&m, StencilKind::Dtxx, &f).unwrap();
        let seq = apply_stencil(
            &m,
            StencilKind::Dt,
            &apply_stencil(&m, StencilKind::Dxx, &f).unwrap(),
        )
        .unwrap();
        assert_eq!(dtxx, seq);
    }

    #[test]
    fn stencil_shape_mismatch() {
        let m = build_mesh(1.0, 4, 0.0, 1.0, 4).unwrap();
        let bad = Array3::<f64>::zeros((4, 5, 1));
        assert!(matches!(
            apply_stencil(&m, StencilKind::Dx, &bad),
            Err(Error::Shape { .. })
        ));
    }

    /// Three-level ratio test: errors shrink by at least ~4x per halving.
    #[test]
    fn stencils_converge_at_second_order() {
        let f = |t: f64, x: f64| (2.0 * t).sin() * (1.5 * x).cos();
        let fx = |t: f64, x: f64| -1.5 * (2.0 * t).sin() * (1.5 * x).sin();
        let fxx = |t: f64, x: f64| -2.25 * f(t, x);
        let ft = |t: f64, x: f64| 2.0 * (2.0 * t).cos() * (1.5 * x).cos();
        let cases: [(StencilKind, &dyn Fn(f64, f64) -> f64); 3] = [
            (StencilKind::Dx, &fx),
            (StencilKind::Dxx, &fxx),
            (StencilKind::Dt, &ft),
        ];
        for (kind, exact) in cases {
            let errs: Vec<f64> = [8usize, 16, 32]
                .iter()
                .map(|&n| {
                    let m = build_mesh(1.0, n, 0.0, 1.0, n).unwrap();
                    let d = apply_stencil(&m, kind, &field(&m, f)).unwrap();
                    let mut e: f64 = 0.0;
                    for i in 0..=n {
                        for j in 0..=n {
                            e = e.max((d[[i, j, 0]] - exact(m.t(i), m.x(j))).abs());
                        }
                    }
                    e
                })
                .collect();
            for w in errs.windows(2) {
                assert!((w[0] / w[1]).log2() >= 1.9, "{kind:?}: {errs:?}");
            }
        }
    }

    #[test]
    fn curve_diff_examples() {
        let c = CurveMesh::new(16, 1.0).unwrap();
        assert!(curve_diff(&c, &[2.5; 16])
            .unwrap()
            .iter()
            .all(|v| *v == 0.0));
        assert!(matches!(CurveMesh::new(2, 1.0), Err(Error::Config(_))));
        assert!(curve_diff(&c, &[1.0; 3]).is_err());

        let tau = 2.0 * std::f64::consts::PI;
        let c = CurveMesh::new(64, tau).unwrap();
        let f: Vec<f64> = (0..64).map(|k| (tau * k as f64 / 64.0).sin()).collect();
        let d = curve_diff(&c, &f).unwrap();
        let err = (0..64)
            .map(|k| (d[k] - (tau * k as f64 / 64.0).cos()).abs())
            .fold(0.0, f64::max);
        assert!(err < 2e-3, "err {err}");
    }

    #[test]
    fn curve_summation_by_parts() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for m in [8usize, 33, 64, 200] {
            let c = CurveMesh::new(m, 3.7).unwrap();
            let psi: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let phi: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let dphi = curve_diff(&c, &phi).unwrap();
            let dpsi = curve_diff(&c, &psi).unwrap();
            let s: f64 = (0..m)
                .map(|k| (psi[k] * dphi[k] + dpsi[k] * phi[k]) * c.ds)
                .sum();
            assert!(s.abs() < 1e-13, "M={m}: {s}");
        }
    }
}
