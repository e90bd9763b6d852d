//! Finite-difference derivatives built from padded 3x3 stencils.
//!
//! Planes are `[h, w] = [ny, nx]`: columns run along x, rows along y.
//! Every operator exists twice: as a graph op (differentiable, used during
//! training) and as a plain function that evaluates the same graph ops on
//! constants, so both paths produce identical numbers.

use crate::error::{Error, Result};
use crate::field::FieldSequence;
use crate::{Graph, Padding, Tensor, Var};

/// Halo rule used by the stencils.
pub type PadMode = Padding;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Boundary {
    Periodic,
    Dirichlet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

/// Grid geometry and time discretization.
///
/// Periodic grids hold `n` cells with spacing `L / n`; Dirichlet grids hold
/// `n` nodes including both boundaries with spacing `L / (n - 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DomainSpec {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
    pub nt: usize,
    pub dt: f64,
    pub x0: f64,
    pub y0: f64,
    pub boundary: Boundary,
}

impl DomainSpec {
    /// Square `[0, length]^2` grid over `t in [0, horizon]`.
    pub fn square(n: usize, length: f64, nt: usize, horizon: f64, boundary: Boundary) -> Result<Self> {
        if n < 3 || nt < 3 {
            return Err(Error::Config(format!(
                "grid extents must be >= 3 (n = {n}, nt = {nt})"
            )));
        }
        let d = match boundary {
            Boundary::Periodic => length / n as f64,
            Boundary::Dirichlet => length / (n - 1) as f64,
        };
        let spec = Self {
            nx: n,
            ny: n,
            dx: d,
            dy: d,
            nt,
            dt: horizon / (nt - 1) as f64,
            x0: 0.0,
            y0: 0.0,
            boundary,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < 3 || self.ny < 3 || self.nt < 3 {
            return Err(Error::Config(format!(
                "grid extents must be >= 3, got {}x{}x{}",
                self.nx, self.ny, self.nt
            )));
        }
        if !(self.dx > 0.0 && self.dy > 0.0 && self.dt > 0.0) {
            return Err(Error::Config("grid steps must be positive".into()));
        }
        Ok(())
    }

    pub fn x(&self, j: usize) -> f64 {
        self.x0 + j as f64 * self.dx
    }

    pub fn y(&self, i: usize) -> f64 {
        self.y0 + i as f64 * self.dy
    }

    pub fn t(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    pub fn horizon(&self) -> f64 {
        self.t(self.nt - 1)
    }

    /// Physical extent along x (closed interval for Dirichlet, period for
    /// periodic grids).
    pub fn length_x(&self) -> f64 {
        match self.boundary {
            Boundary::Periodic => self.nx as f64 * self.dx,
            Boundary::Dirichlet => (self.nx - 1) as f64 * self.dx,
        }
    }

    pub fn length_y(&self) -> f64 {
        match self.boundary {
            Boundary::Periodic => self.ny as f64 * self.dy,
            Boundary::Dirichlet => (self.ny - 1) as f64 * self.dy,
        }
    }

    pub fn plane_len(&self) -> usize {
        self.nx * self.ny
    }

    /// Samples `f(x, y)` on the grid as a `[ny, nx]` plane.
    pub fn sample(&self, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor::from_fn(&[self.ny, self.nx], |ix| f(self.x(ix[1]), self.y(ix[0])))
    }

    /// Halo values of `f` on the padding lattice around the grid, in the
    /// order [`Padding::Halo`] expects.
    pub fn halo(&self, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (h, w) = (self.ny, self.nx);
        let xs = |pj: usize| self.x0 + (pj as f64 - 1.0) * self.dx;
        let ys = |pi: usize| self.y0 + (pi as f64 - 1.0) * self.dy;
        let mut v = Vec::with_capacity(Padding::halo_len(h, w));
        for pj in 0..w + 2 {
            v.push(f(xs(pj), ys(0)));
        }
        for pj in 0..w + 2 {
            v.push(f(xs(pj), ys(h + 1)));
        }
        for pi in 1..=h {
            v.push(f(xs(0), ys(pi)));
        }
        for pi in 1..=h {
            v.push(f(xs(w + 1), ys(pi)));
        }
        v
    }

    /// Natural padding for the grid's boundary topology.
    pub fn default_pad(&self) -> PadMode {
        match self.boundary {
            Boundary::Periodic => Padding::Periodic,
            Boundary::Dirichlet => Padding::Zero,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimeOrder {
    First,
    Second,
}

fn step(spec: &DomainSpec, axis: Axis) -> f64 {
    match axis {
        Axis::X => spec.dx,
        Axis::Y => spec.dy,
    }
}

/// Windows of a padded plane shifted by -1 and +1 along `axis`.
fn neighbours(g: &mut Graph, padded: Var, axis: Axis, h: usize, w: usize) -> Result<(Var, Var)> {
    match axis {
        Axis::X => Ok((g.window(padded, 1, 0, h, w)?, g.window(padded, 1, 2, h, w)?)),
        Axis::Y => Ok((g.window(padded, 0, 1, h, w)?, g.window(padded, 2, 1, h, w)?)),
    }
}

fn plane_dims(g: &Graph, f: Var) -> Result<(usize, usize)> {
    match g.shape(f) {
        [h, w] => Ok((*h, *w)),
        s => Err(Error::Dimension(format!("expected a plane, got {:?}", s))),
    }
}

/// Graph ops on `[h, w]` planes.
pub mod ops {
    use super::*;

    /// Central first difference `(f[i+1] - f[i-1]) / (2 d)`.
    pub fn d1(g: &mut Graph, f: Var, axis: Axis, spec: &DomainSpec, mode: &PadMode) -> Result<Var> {
        let (h, w) = plane_dims(g, f)?;
        let p = g.pad(f, mode.clone())?;
        d1_padded(g, p, axis, spec, h, w)
    }

    pub(crate) fn d1_padded(g: &mut Graph, p: Var, axis: Axis, spec: &DomainSpec, h: usize, w: usize) -> Result<Var> {
        let (lo, hi) = neighbours(g, p, axis, h, w)?;
        let diff = g.sub(hi, lo)?;
        Ok(g.scale(diff, 0.5 / step(spec, axis)))
    }

    /// Central second difference `(f[i+1] + f[i-1] - 2 f[i]) / d^2`.
    pub fn d2(g: &mut Graph, f: Var, axis: Axis, spec: &DomainSpec, mode: &PadMode) -> Result<Var> {
        let (h, w) = plane_dims(g, f)?;
        let p = g.pad(f, mode.clone())?;
        d2_padded(g, p, axis, spec, h, w)
    }

    pub(crate) fn d2_padded(g: &mut Graph, p: Var, axis: Axis, spec: &DomainSpec, h: usize, w: usize) -> Result<Var> {
        let (lo, hi) = neighbours(g, p, axis, h, w)?;
        let mid = g.window(p, 1, 1, h, w)?;
        let s = g.add(hi, lo)?;
        let two_mid = g.scale(mid, 2.0);
        let num = g.sub(s, two_mid)?;
        let d = step(spec, axis);
        Ok(g.scale(num, 1.0 / (d * d)))
    }

    /// Five-point Laplacian as the sum of the two second differences.
    pub fn laplacian(g: &mut Graph, f: Var, spec: &DomainSpec, mode: &PadMode) -> Result<Var> {
        let (h, w) = plane_dims(g, f)?;
        let p = g.pad(f, mode.clone())?;
        let xx = d2_padded(g, p, Axis::X, spec, h, w)?;
        let yy = d2_padded(g, p, Axis::Y, spec, h, w)?;
        g.add(xx, yy)
    }

    /// Both first derivatives and the Laplacian from one padding.
    pub fn gradient_and_laplacian(
        g: &mut Graph,
        f: Var,
        spec: &DomainSpec,
        mode: &PadMode,
    ) -> Result<(Var, Var, Var)> {
        let (h, w) = plane_dims(g, f)?;
        let p = g.pad(f, mode.clone())?;
        let fx = d1_padded(g, p, Axis::X, spec, h, w)?;
        let fy = d1_padded(g, p, Axis::Y, spec, h, w)?;
        let xx = d2_padded(g, p, Axis::X, spec, h, w)?;
        let yy = d2_padded(g, p, Axis::Y, spec, h, w)?;
        let lap = g.add(xx, yy)?;
        Ok((fx, fy, lap))
    }

    /// Three-row smoothed (Prewitt) first derivative, scaled by `1 / (6 d)`.
    pub fn d1_prewitt(g: &mut Graph, f: Var, axis: Axis, spec: &DomainSpec, mode: &PadMode) -> Result<Var> {
        let (h, w) = plane_dims(g, f)?;
        let field = g.reshape(f, &[1, h, w])?;
        let k = g.constant(&prewitt_kernel(axis));
        let out = g.conv2d(field, k, Some(mode.clone()))?;
        let out = g.reshape(out, &[h, w])?;
        Ok(g.scale(out, 1.0 / (6.0 * step(spec, axis))))
    }

    /// Laplacian through the single 3x3 `[[0,1,0],[1,-4,1],[0,1,0]]` filter.
    /// Requires `dx == dy`.
    pub fn laplacian_kernel(g: &mut Graph, f: Var, spec: &DomainSpec, mode: &PadMode) -> Result<Var> {
        if spec.dx != spec.dy {
            return Err(Error::Config(
                "single-kernel Laplacian needs dx == dy; use laplacian".into(),
            ));
        }
        let (h, w) = plane_dims(g, f)?;
        let field = g.reshape(f, &[1, h, w])?;
        let k = g.constant(&laplace_kernel());
        let out = g.conv2d(field, k, Some(mode.clone()))?;
        let out = g.reshape(out, &[h, w])?;
        Ok(g.scale(out, 1.0 / (spec.dx * spec.dx)))
    }

    /// `(next - prev) / (2 dt)`.
    pub fn ddt(g: &mut Graph, prev: Var, next: Var, dt: f64) -> Result<Var> {
        let d = g.sub(next, prev)?;
        Ok(g.scale(d, 0.5 / dt))
    }

    /// `(next + prev - 2 cur) / dt^2`.
    pub fn ddt2(g: &mut Graph, prev: Var, cur: Var, next: Var, dt: f64) -> Result<Var> {
        let s = g.add(next, prev)?;
        let two = g.scale(cur, 2.0);
        let d = g.sub(s, two)?;
        Ok(g.scale(d, 1.0 / (dt * dt)))
    }
}

pub fn laplace_kernel() -> Tensor {
    Tensor::new(
        &[1, 1, 3, 3],
        vec![0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0],
    )
    .unwrap()
}

/// Prewitt kernel oriented so that it differentiates towards increasing
/// column (x) or row (y) index.
pub fn prewitt_kernel(axis: Axis) -> Tensor {
    let k = match axis {
        Axis::X => vec![-1.0, 0.0, 1.0, -1.0, 0.0, 1.0, -1.0, 0.0, 1.0],
        Axis::Y => vec![-1.0, -1.0, -1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0],
    };
    Tensor::new(&[1, 1, 3, 3], k).unwrap()
}

fn with_plane(f: &Tensor, op: impl FnOnce(&mut Graph, Var) -> Result<Var>) -> Result<Tensor> {
    if f.rank() != 2 {
        return Err(Error::Dimension(format!(
            "expected a [h, w] plane, got {:?}",
            f.shape()
        )));
    }
    let mut g = Graph::new();
    let v = g.constant(f);
    let out = op(&mut g, v)?;
    Ok(g.tensor(out))
}

/// Plane with a one-cell halo filled per `mode`.
pub fn pad_field(f: &Tensor, mode: &PadMode) -> Result<Tensor> {
    with_plane(f, |g, v| g.pad(v, mode.clone()))
}

pub fn d1(f: &Tensor, axis: Axis, spec: &DomainSpec, mode: &PadMode) -> Result<Tensor> {
    with_plane(f, |g, v| ops::d1(g, v, axis, spec, mode))
}

pub fn d2(f: &Tensor, axis: Axis, spec: &DomainSpec, mode: &PadMode) -> Result<Tensor> {
    with_plane(f, |g, v| ops::d2(g, v, axis, spec, mode))
}

pub fn d1_prewitt(f: &Tensor, axis: Axis, spec: &DomainSpec, mode: &PadMode) -> Result<Tensor> {
    with_plane(f, |g, v| ops::d1_prewitt(g, v, axis, spec, mode))
}

pub fn laplacian(f: &Tensor, spec: &DomainSpec, mode: &PadMode) -> Result<Tensor> {
    with_plane(f, |g, v| ops::laplacian(g, v, spec, mode))
}

pub fn laplacian_kernel(f: &Tensor, spec: &DomainSpec, mode: &PadMode) -> Result<Tensor> {
    with_plane(f, |g, v| ops::laplacian_kernel(g, v, spec, mode))
}

/// Central time derivative over interior time indices `1..nt-1`; the
/// result has `nt - 2` slices.
pub fn ddt(seq: &FieldSequence, spec: &DomainSpec, order: TimeOrder) -> Result<FieldSequence> {
    let nt = seq.nt();
    if nt < 3 {
        return Err(Error::Degenerate(format!(
            "time derivative needs at least 3 slices, got {nt}"
        )));
    }
    let mut out = FieldSequence::zeros(nt - 2, seq.channels(), seq.h(), seq.w());
    let mut g = Graph::new();
    for t in 1..nt - 1 {
        for c in 0..seq.channels() {
            let prev = g.constant(&seq.plane_tensor(t - 1, c));
            let next = g.constant(&seq.plane_tensor(t + 1, c));
            let v = match order {
                TimeOrder::First => ops::ddt(&mut g, prev, next, spec.dt)?,
                TimeOrder::Second => {
                    let cur = g.constant(&seq.plane_tensor(t, c));
                    ops::ddt2(&mut g, prev, cur, next, spec.dt)?
                }
            };
            out.plane_mut(t - 1, c).copy_from_slice(g.value(v));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn periodic(n: usize) -> DomainSpec {
        DomainSpec::square(n, 1.0, 5, 1.0, Boundary::Periodic).unwrap()
    }

    fn interior_max(a: &Tensor, b: &Tensor) -> f64 {
        let (h, w) = (a.shape()[0], a.shape()[1]);
        let mut m = 0.0f64;
        for i in 1..h - 1 {
            for j in 1..w - 1 {
                m = m.max((a.at(&[i, j]) - b.at(&[i, j])).abs());
            }
        }
        m
    }

    #[test]
    fn constants_are_annihilated() {
        let spec = periodic(8);
        let f = Tensor::full(&[8, 8], 3.25);
        for mode in [Padding::Periodic, Padding::Replicate] {
            for axis in [Axis::X, Axis::Y] {
                assert!(d1(&f, axis, &spec, &mode).unwrap().data().iter().all(|&v| v == 0.0));
            }
            assert!(laplacian(&f, &spec, &mode).unwrap().data().iter().all(|&v| v == 0.0));
            assert!(laplacian_kernel(&f, &spec, &mode).unwrap().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn d1_exact_on_linear_ramp() {
        let spec = DomainSpec::square(9, 2.0, 3, 1.0, Boundary::Dirichlet).unwrap();
        let f = spec.sample(|x, _| x);
        let d = d1(&f, Axis::X, &spec, &Padding::Replicate).unwrap();
        let ones = Tensor::full(&[9, 9], 1.0);
        assert!(interior_max(&d, &ones) < 1e-14);
        let fy = spec.sample(|_, y| 2.0 * y - 1.0);
        let dy = d1(&fy, Axis::Y, &spec, &Padding::Replicate).unwrap();
        assert!(interior_max(&dy, &Tensor::full(&[9, 9], 2.0)) < 1e-14);
    }

    #[test]
    fn laplacian_exact_on_quadratic() {
        let spec = DomainSpec::square(11, 1.0, 3, 1.0, Boundary::Dirichlet).unwrap();
        let f = spec.sample(|x, y| x * x + y * y);
        let l = laplacian(&f, &spec, &Padding::Replicate).unwrap();
        assert!(interior_max(&l, &Tensor::full(&[11, 11], 4.0)) <= 1e-10);
        // exact Dirichlet halo makes the boundary ring exact too
        let halo = spec.halo(|x, y| x * x + y * y);
        let lh = laplacian(&f, &spec, &Padding::Halo(halo)).unwrap();
        assert!(lh.data().iter().all(|v| (v - 4.0).abs() <= 1e-10));
    }

    #[test]
    fn laplacian_is_sum_of_second_differences_bitwise() {
        let spec = periodic(12);
        let f = spec.sample(|x, y| (3.0 * x).sin() * (x + 2.0 * y).cos() + x * y);
        let mode = Padding::Periodic;
        let l = laplacian(&f, &spec, &mode).unwrap();
        let xx = d2(&f, Axis::X, &spec, &mode).unwrap();
        let yy = d2(&f, Axis::Y, &spec, &mode).unwrap();
        let sum = xx.zip_map(&yy, |a, b| a + b).unwrap();
        assert_eq!(l.data(), sum.data());
        let lk = laplacian_kernel(&f, &spec, &mode).unwrap();
        for (a, b) in l.data().iter().zip(lk.data()) {
            assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }
    }

    fn sin_err(n: usize) -> f64 {
        let spec = periodic(n);
        let f = spec.sample(|x, _| (2.0 * PI * x).sin());
        let exact = spec.sample(|x, _| 2.0 * PI * (2.0 * PI * x).cos());
        let d = d1(&f, Axis::X, &spec, &Padding::Periodic).unwrap();
        d.zip_map(&exact, |a, b| (a - b).abs()).unwrap().max_abs()
    }

    #[test]
    fn d1_second_order_on_sine() {
        let ratio = sin_err(16) / sin_err(32);
        assert!((ratio - 4.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn laplacian_of_sine_product() {
        let err = |n: usize| {
            let spec = periodic(n);
            let f = spec.sample(|x, y| (2.0 * PI * x).sin() * (2.0 * PI * y).sin());
            let l = laplacian(&f, &spec, &Padding::Periodic).unwrap();
            l.zip_map(&f, |a, b| (a + 8.0 * PI * PI * b).abs()).unwrap().max_abs()
        };
        let ratio = err(16) / err(32);
        assert!((ratio - 4.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn prewitt_matches_central_on_linear() {
        let spec = periodic(8);
        let f = spec.sample(|x, y| 3.0 * x - y);
        let px = d1_prewitt(&f, Axis::X, &spec, &Padding::Replicate).unwrap();
        let py = d1_prewitt(&f, Axis::Y, &spec, &Padding::Replicate).unwrap();
        assert!(interior_max(&px, &Tensor::full(&[8, 8], 3.0)) < 1e-12);
        assert!(interior_max(&py, &Tensor::full(&[8, 8], -1.0)) < 1e-12);
    }

    #[test]
    fn ddt_examples() {
        let spec = DomainSpec::square(3, 1.0, 6, 0.5, Boundary::Periodic).unwrap();
        let mk = |f: &dyn Fn(f64) -> f64| {
            let slices: Vec<Tensor> = (0..6)
                .map(|k| Tensor::full(&[1, 3, 3], f(spec.t(k))))
                .collect();
            FieldSequence::from_slices(&slices).unwrap()
        };
        let c = ddt(&mk(&|_| 2.0), &spec, TimeOrder::First).unwrap();
        assert_eq!(c.nt(), 4);
        assert!(c.tensor().data().iter().all(|&v| v == 0.0));
        let r = ddt(&mk(&|t| t), &spec, TimeOrder::First).unwrap();
        assert!(r.tensor().data().iter().all(|&v| (v - 1.0).abs() < 1e-13));
        let q = ddt(&mk(&|t| t * t), &spec, TimeOrder::Second).unwrap();
        assert!(q.tensor().data().iter().all(|&v| (v - 2.0).abs() < 1e-10));

        let two = FieldSequence::zeros(2, 1, 3, 3);
        assert!(matches!(
            ddt(&two, &spec, TimeOrder::First),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn ddt_second_order_on_cosine() {
        let omega = 3.0;
        let err = |nt: usize| {
            let spec = DomainSpec::square(3, 1.0, nt, 1.0, Boundary::Periodic).unwrap();
            let slices: Vec<Tensor> = (0..nt)
                .map(|k| Tensor::full(&[1, 3, 3], (omega * spec.t(k)).cos()))
                .collect();
            let seq = FieldSequence::from_slices(&slices).unwrap();
            let d = ddt(&seq, &spec, TimeOrder::First).unwrap();
            (1..nt - 1)
                .map(|k| (d.at(k - 1, 0, 1, 1) + omega * (omega * spec.t(k)).sin()).abs())
                .fold(0.0, f64::max)
        };
        let ratio = err(41) / err(81);
        assert!((ratio - 4.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn square_rejects_small_grids() {
        assert!(DomainSpec::square(2, 1.0, 5, 1.0, Boundary::Periodic).is_err());
        assert!(DomainSpec::square(5, 1.0, 2, 1.0, Boundary::Periodic).is_err());
    }
}
