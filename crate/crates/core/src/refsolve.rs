//! Fine-grid reference solvers.
//!
//! Periodic problems are stepped pseudo-spectrally with FFTs, the Dirichlet
//! Klein-Gordon problem with a 5-point Laplacian. Snapshots are taken at the
//! training time levels and point-sampled down to the training grid.
//!
//! Step bounds (fine step `h`, effective diffusion `nu`):
//! * Allen-Cahn semi-implicit: `dt <= 0.01 eps^2`, so the explicit reaction
//!   term has `dt |f'| / eps^2 <= 0.02`. A stabilizing shift would allow
//!   larger steps but slows the interface by `1/(1 + S dt)`.
//! * Allen-Cahn RK4: `dt <= 2.5 / (phi k_max^2 + 2/eps^2)`.
//! * Klein-Gordon leapfrog: `dt <= 1 / sqrt(lambda_max)` with
//!   `lambda_max = 4/hx^2 + 4/hy^2 + m^2` (half the CFL limit).
//! * Navier-Stokes: `dt <= 0.4 h / max|u|`, plus `dt <= 2.5 / (nu k_max^2)`
//!   for RK4.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::fdops::{self, Axis, Boundary, DomainSpec};
use crate::field::FieldSequence;
use crate::problems::{ACParams, Equation, PDEProblem, ProblemName};
use crate::Tensor;

type C64 = Complex<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stepper {
    /// Semi-implicit for Allen-Cahn and Navier-Stokes, leapfrog for
    /// Klein-Gordon.
    SemiImplicit,
    Rk4,
}

impl Stepper {
    pub fn as_str(self) -> &'static str {
        match self {
            Stepper::SemiImplicit => "semi-implicit",
            Stepper::Rk4 => "rk4",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ReferenceRun {
    pub problem: ProblemName,
    pub fine: DomainSpec,
    pub stepper: Stepper,
    /// Fine steps between consecutive snapshots.
    pub stride: usize,
    pub fine_dt: f64,
    /// Snapshots on the training grid.
    pub output: FieldSequence,
    /// Snapshots on the fine grid.
    pub fine_output: FieldSequence,
    /// Per-snapshot conserved or dissipated quantity: Ginzburg-Landau energy
    /// (Allen-Cahn), discrete leapfrog energy (Klein-Gordon), kinetic energy
    /// (Navier-Stokes).
    pub energy: Vec<f64>,
}

/// Fine grid with `factor` times the resolution of `coarse`, sharing its
/// nodes.
pub fn fine_domain(coarse: &DomainSpec, factor: usize) -> Result<DomainSpec> {
    if factor == 0 {
        return Err(Error::Config("refinement factor must be >= 1".into()));
    }
    let mut f = *coarse;
    match coarse.boundary {
        Boundary::Periodic => {
            f.nx = coarse.nx * factor;
            f.ny = coarse.ny * factor;
        }
        Boundary::Dirichlet => {
            f.nx = (coarse.nx - 1) * factor + 1;
            f.ny = (coarse.ny - 1) * factor + 1;
        }
    }
    f.dx = coarse.dx / factor as f64;
    f.dy = coarse.dy / factor as f64;
    Ok(f)
}

fn refinement(coarse: &DomainSpec, fine: &DomainSpec) -> Result<usize> {
    let bad = || {
        Error::Config(format!(
            "fine grid {}x{} is not a refinement of {}x{}",
            fine.ny, fine.nx, coarse.ny, coarse.nx
        ))
    };
    if fine.boundary != coarse.boundary || fine.nt != coarse.nt {
        return Err(bad());
    }
    if (fine.dt - coarse.dt).abs() > 1e-12 * coarse.dt.abs().max(1.0) {
        return Err(bad());
    }
    let ratio = |c: usize, f: usize| -> Option<usize> {
        let (c, f) = match coarse.boundary {
            Boundary::Periodic => (c, f),
            Boundary::Dirichlet => (c - 1, f - 1),
        };
        (f % c == 0).then_some(f / c)
    };
    let rx = ratio(coarse.nx, fine.nx).ok_or_else(bad)?;
    let ry = ratio(coarse.ny, fine.ny).ok_or_else(bad)?;
    if rx != ry || rx == 0 {
        return Err(bad());
    }
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs());
    if !close(fine.length_x(), coarse.length_x()) || !close(fine.length_y(), coarse.length_y()) {
        return Err(bad());
    }
    Ok(rx)
}

/// Runs the reference solver on `fine` and samples the result back onto the
/// problem's own grid.
pub fn solve_reference(prob: &PDEProblem, fine: DomainSpec, stepper: Stepper) -> Result<ReferenceRun> {
    let factor = refinement(&prob.domain, &fine)?;
    let fine_prob = prob.on_domain(fine)?;
    let (fine_output, fine_dt, stride, energy) = match prob.equation {
        Equation::AllenCahn(p) => allen_cahn(&fine_prob, p, stepper)?,
        Equation::KleinGordon(p) => klein_gordon(&fine_prob, p.m, stepper)?,
        Equation::NavierStokes(p) => navier_stokes(&fine_prob, p.rho, p.diffusion(), stepper)?,
    };
    let output = downsample(&fine_output, factor, &prob.domain);
    Ok(ReferenceRun {
        problem: prob.name(),
        fine,
        stepper,
        stride,
        fine_dt,
        output,
        fine_output,
        energy,
    })
}

fn downsample(fine: &FieldSequence, factor: usize, coarse: &DomainSpec) -> FieldSequence {
    let (nt, nc) = (fine.nt(), fine.channels());
    let mut out = FieldSequence::zeros(nt, nc, coarse.ny, coarse.nx);
    let fw = fine.w();
    for t in 0..nt {
        for c in 0..nc {
            let src = fine.plane(t, c).to_vec();
            let dst = out.plane_mut(t, c);
            for i in 0..coarse.ny {
                for j in 0..coarse.nx {
                    dst[i * coarse.nx + j] = src[i * factor * fw + j * factor];
                }
            }
        }
    }
    out
}

/// `E = sum [phi |grad c|^2 / 2 + (c^2 - 1)^2 / (4 eps^2)] dx dy` with
/// central differences for the gradient.
pub fn ginzburg_landau_energy(c: &Tensor, p: ACParams, spec: &DomainSpec) -> Result<f64> {
    let plane = match c.rank() {
        2 => c.clone(),
        3 if c.shape()[0] == 1 => c.clone().reshape(&c.shape()[1..])?,
        _ => {
            return Err(crate::error::dim_err(format!(
                "energy needs a single-channel plane, got {:?}",
                c.shape()
            )))
        }
    };
    let mode = spec.default_pad();
    let cx = fdops::d1(&plane, Axis::X, spec, &mode)?;
    let cy = fdops::d1(&plane, Axis::Y, spec, &mode)?;
    let e2 = 4.0 * p.eps * p.eps;
    let total: f64 = plane
        .data()
        .iter()
        .zip(cx.data().iter().zip(cy.data()))
        .map(|(&v, (&gx, &gy))| 0.5 * p.phi * (gx * gx + gy * gy) + (v * v - 1.0).powi(2) / e2)
        .sum();
    Ok(total * spec.dx * spec.dy)
}

/// Radius of the zero level set of a centred circular phase, averaged over
/// the four axis rays from the node nearest the domain centre. Crossings are
/// located by linear interpolation. Returns `None` when a ray never crosses.
pub fn interface_radius(c: &[f64], spec: &DomainSpec) -> Option<f64> {
    let (h, w) = (spec.ny, spec.nx);
    let (ci, cj) = (h / 2, w / 2);
    let ray = |di: isize, dj: isize, step: f64| -> Option<f64> {
        let at = |k: isize| {
            let i = ci as isize + di * k;
            let j = cj as isize + dj * k;
            (i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < w).then(|| c[i as usize * w + j as usize])
        };
        let mut k = 0;
        let mut prev = at(0)?;
        loop {
            let next = at(k + 1)?;
            if (prev > 0.0) != (next > 0.0) {
                return Some((k as f64 + prev / (prev - next)) * step);
            }
            prev = next;
            k += 1;
        }
    };
    let r = [
        ray(0, 1, spec.dx)?,
        ray(0, -1, spec.dx)?,
        ray(1, 0, spec.dy)?,
        ray(-1, 0, spec.dy)?,
    ];
    Some(r.iter().sum::<f64>() / 4.0)
}

/// Number of fine steps per snapshot for a step bound.
fn substeps(snapshot_dt: f64, bound: f64) -> usize {
    ((snapshot_dt / bound).ceil() as usize).max(1)
}

fn check_finite(v: &[f64], step: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("reference solution blew up at fine step {step}")))
    }
}

/// 2-D FFT helper for an `ny x nx` periodic grid of physical size
/// `lx x ly`.
struct Spectral {
    nx: usize,
    ny: usize,
    fx: Arc<dyn Fft<f64>>,
    ix: Arc<dyn Fft<f64>>,
    fy: Arc<dyn Fft<f64>>,
    iy: Arc<dyn Fft<f64>>,
    kx: Vec<f64>,
    ky: Vec<f64>,
    /// Wavenumbers with the Nyquist mode zeroed, for odd derivatives.
    kx_odd: Vec<f64>,
    ky_odd: Vec<f64>,
    /// Two-thirds dealiasing mask.
    keep: Vec<bool>,
    scratch: Vec<C64>,
}

fn wavenumbers(n: usize, length: f64) -> (Vec<f64>, Vec<f64>) {
    let base = 2.0 * std::f64::consts::PI / length;
    let k: Vec<f64> = (0..n)
        .map(|j| {
            let m = if j <= n / 2 { j as f64 } else { j as f64 - n as f64 };
            base * m
        })
        .collect();
    let mut odd = k.clone();
    if n % 2 == 0 {
        odd[n / 2] = 0.0;
    }
    (k, odd)
}

impl Spectral {
    fn new(spec: &DomainSpec) -> Self {
        let mut planner = FftPlanner::new();
        let (nx, ny) = (spec.nx, spec.ny);
        let (kx, kx_odd) = wavenumbers(nx, spec.length_x());
        let (ky, ky_odd) = wavenumbers(ny, spec.length_y());
        let mut keep = vec![false; nx * ny];
        let (cx, cy) = (nx as f64 / 3.0, ny as f64 / 3.0);
        for i in 0..ny {
            let mi = if i <= ny / 2 { i as f64 } else { ny as f64 - i as f64 };
            for j in 0..nx {
                let mj = if j <= nx / 2 { j as f64 } else { nx as f64 - j as f64 };
                keep[i * nx + j] = mi < cy && mj < cx;
            }
        }
        Self {
            nx,
            ny,
            fx: planner.plan_fft_forward(nx),
            ix: planner.plan_fft_inverse(nx),
            fy: planner.plan_fft_forward(ny),
            iy: planner.plan_fft_inverse(ny),
            kx,
            ky,
            kx_odd,
            ky_odd,
            keep,
            scratch: vec![C64::default(); nx * ny],
        }
    }

    fn k2(&self, i: usize, j: usize) -> f64 {
        self.kx[j] * self.kx[j] + self.ky[i] * self.ky[i]
    }

    fn transpose(src: &[C64], dst: &mut [C64], rows: usize, cols: usize) {
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }

    fn forward(&mut self, real: &[f64]) -> Vec<C64> {
        let mut buf: Vec<C64> = real.iter().map(|&v| C64::new(v, 0.0)).collect();
        self.fx.process(&mut buf);
        Self::transpose(&buf, &mut self.scratch, self.ny, self.nx);
        self.fy.process(&mut self.scratch);
        Self::transpose(&self.scratch, &mut buf, self.nx, self.ny);
        buf
    }

    fn inverse(&mut self, spec: &[C64]) -> Vec<f64> {
        let mut buf = spec.to_vec();
        self.ix.process(&mut buf);
        Self::transpose(&buf, &mut self.scratch, self.ny, self.nx);
        self.iy.process(&mut self.scratch);
        Self::transpose(&self.scratch, &mut buf, self.nx, self.ny);
        let s = 1.0 / (self.nx * self.ny) as f64;
        buf.iter().map(|z| z.re * s).collect()
    }

    fn dx(&self, h: &[C64]) -> Vec<C64> {
        let nx = self.nx;
        h.iter()
            .enumerate()
            .map(|(o, &z)| z * C64::new(0.0, self.kx_odd[o % nx]))
            .collect()
    }

    fn dy(&self, h: &[C64]) -> Vec<C64> {
        let nx = self.nx;
        h.iter()
            .enumerate()
            .map(|(o, &z)| z * C64::new(0.0, self.ky_odd[o / nx]))
            .collect()
    }

    fn dealias(&self, h: &mut [C64]) {
        for (z, &k) in h.iter_mut().zip(&self.keep) {
            if !k {
                *z = C64::default();
            }
        }
    }
}

fn rk4(y: &mut [f64], dt: f64, f: &mut dyn FnMut(&[f64]) -> Vec<f64>) {
    let n = y.len();
    let k1 = f(y);
    let stage = |k: &[f64], a: f64| -> Vec<f64> { (0..n).map(|i| y[i] + a * dt * k[i]).collect() };
    let k2 = f(&stage(&k1, 0.5));
    let k3 = f(&stage(&k2, 0.5));
    let k4 = f(&stage(&k3, 1.0));
    for i in 0..n {
        y[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

type Solved = (FieldSequence, f64, usize, Vec<f64>);

fn allen_cahn(prob: &PDEProblem, p: ACParams, stepper: Stepper) -> Result<Solved> {
    let spec = prob.domain;
    if spec.boundary != Boundary::Periodic {
        return Err(Error::Unsupported("Allen-Cahn reference needs a periodic grid".into()));
    }
    let mut sp = Spectral::new(&spec);
    let (n, nt) = (spec.plane_len(), spec.nt);
    let inv_e2 = 1.0 / (p.eps * p.eps);
    let kmax2 = sp.kx.iter().fold(0.0f64, |m, k| m.max(k * k)) + sp.ky.iter().fold(0.0f64, |m, k| m.max(k * k));
    let bound = match stepper {
        Stepper::SemiImplicit => 0.01 * p.eps * p.eps,
        Stepper::Rk4 => 2.5 / (p.phi * kmax2 + 2.0 * inv_e2),
    };
    let stride = substeps(spec.dt, bound);
    let dt = spec.dt / stride as f64;

    let mut c = prob.ic.data().to_vec();
    let mut out = FieldSequence::zeros(nt, 1, spec.ny, spec.nx);
    out.plane_mut(0, 0).copy_from_slice(&c);
    let mut step = 0;
    for k in 1..nt {
        for _ in 0..stride {
            step += 1;
            match stepper {
                Stepper::SemiImplicit => {
                    let react: Vec<f64> = c.iter().map(|&v| (v * v * v - v) * inv_e2).collect();
                    let ch = sp.forward(&c);
                    let rh = sp.forward(&react);
                    let mut next = vec![C64::default(); n];
                    for i in 0..spec.ny {
                        for j in 0..spec.nx {
                            let o = i * spec.nx + j;
                            let denom = 1.0 + dt * p.phi * sp.k2(i, j);
                            next[o] = (ch[o] - rh[o] * dt) / denom;
                        }
                    }
                    c = sp.inverse(&next);
                }
                Stepper::Rk4 => {
                    let mut rhs = |y: &[f64]| -> Vec<f64> {
                        let yh = sp.forward(y);
                        let lap: Vec<C64> = yh
                            .iter()
                            .enumerate()
                            .map(|(o, &z)| -z * sp.k2(o / spec.nx, o % spec.nx))
                            .collect();
                        let lap = sp.inverse(&lap);
                        y.iter()
                            .zip(lap)
                            .map(|(&v, l)| p.phi * l - (v * v * v - v) * inv_e2)
                            .collect()
                    };
                    rk4(&mut c, dt, &mut rhs);
                }
            }
            check_finite(&c, step)?;
        }
        out.plane_mut(k, 0).copy_from_slice(&c);
    }
    let energy = (0..nt)
        .map(|k| ginzburg_landau_energy(&out.plane_tensor(k, 0), p, &spec))
        .collect::<Result<Vec<_>>>()?;
    Ok((out, dt, stride, energy))
}

/// `A u = -lap_h u + m^2 u` on interior nodes with the boundary held fixed.
fn kg_operator(u: &[f64], m2: f64, spec: &DomainSpec) -> Vec<f64> {
    let (h, w) = (spec.ny, spec.nx);
    let (ax, ay) = (1.0 / (spec.dx * spec.dx), 1.0 / (spec.dy * spec.dy));
    let mut out = vec![0.0; h * w];
    for i in 1..h - 1 {
        for j in 1..w - 1 {
            let o = i * w + j;
            let lap = ax * (u[o - 1] - 2.0 * u[o] + u[o + 1]) + ay * (u[o - w] - 2.0 * u[o] + u[o + w]);
            out[o] = m2 * u[o] - lap;
        }
    }
    out
}

fn kg_energy(prev: &[f64], next: &[f64], dt: f64, m2: f64, spec: &DomainSpec) -> f64 {
    let a = kg_operator(prev, m2, spec);
    let kin: f64 = prev.iter().zip(next).map(|(p, n)| ((n - p) / dt).powi(2)).sum();
    let pot: f64 = next.iter().zip(&a).map(|(n, a)| n * a).sum();
    0.5 * (kin + pot) * spec.dx * spec.dy
}

fn klein_gordon(prob: &PDEProblem, m: f64, stepper: Stepper) -> Result<Solved> {
    let spec = prob.domain;
    if spec.boundary != Boundary::Dirichlet {
        return Err(Error::Unsupported("Klein-Gordon reference needs a Dirichlet grid".into()));
    }
    let m2 = m * m;
    let lmax = 4.0 / (spec.dx * spec.dx) + 4.0 / (spec.dy * spec.dy) + m2;
    let bound = match stepper {
        Stepper::SemiImplicit => 1.0 / lmax.sqrt(),
        Stepper::Rk4 => 2.5 / lmax.sqrt(),
    };
    let stride = substeps(spec.dt, bound);
    let dt = spec.dt / stride as f64;
    let (n, nt) = (spec.plane_len(), spec.nt);
    let u0 = prob.ic.data().to_vec();
    let v0 = prob.v0.as_ref().map_or(vec![0.0; n], |v| v.data().to_vec());
    let mut out = FieldSequence::zeros(nt, 1, spec.ny, spec.nx);
    out.plane_mut(0, 0).copy_from_slice(&u0);
    let mut energy = Vec::with_capacity(nt);

    match stepper {
        Stepper::SemiImplicit => {
            let a0 = kg_operator(&u0, m2, &spec);
            let mut prev = u0.clone();
            let mut cur: Vec<f64> = (0..n).map(|o| u0[o] + dt * v0[o] - 0.5 * dt * dt * a0[o]).collect();
            restore_ring(&mut cur, &u0, &spec);
            energy.push(kg_energy(&prev, &cur, dt, m2, &spec));
            let mut step = 1;
            for k in 1..nt {
                let target = k * stride;
                while step < target {
                    let a = kg_operator(&cur, m2, &spec);
                    let next: Vec<f64> = (0..n).map(|o| 2.0 * cur[o] - prev[o] - dt * dt * a[o]).collect();
                    let mut next = next;
                    restore_ring(&mut next, &cur, &spec);
                    prev = cur;
                    cur = next;
                    step += 1;
                    check_finite(&cur, step)?;
                }
                out.plane_mut(k, 0).copy_from_slice(&cur);
                // energy of the step pair starting at the snapshot
                let a = kg_operator(&cur, m2, &spec);
                let mut next: Vec<f64> = (0..n).map(|o| 2.0 * cur[o] - prev[o] - dt * dt * a[o]).collect();
                restore_ring(&mut next, &cur, &spec);
                energy.push(kg_energy(&cur, &next, dt, m2, &spec));
            }
        }
        Stepper::Rk4 => {
            let mut y: Vec<f64> = u0.iter().chain(&v0).copied().collect();
            let total = |y: &[f64]| -> f64 {
                let a = kg_operator(&y[..n], m2, &spec);
                let s: f64 = (0..n).map(|o| y[n + o] * y[n + o] + y[o] * a[o]).sum();
                0.5 * s * spec.dx * spec.dy
            };
            energy.push(total(&y));
            let mut step = 0;
            for k in 1..nt {
                for _ in 0..stride {
                    step += 1;
                    let mut rhs = |s: &[f64]| -> Vec<f64> {
                        let a = kg_operator(&s[..n], m2, &spec);
                        let mut d = vec![0.0; 2 * n];
                        d[..n].copy_from_slice(&s[n..]);
                        for o in 0..n {
                            d[n + o] = -a[o];
                        }
                        zero_ring(&mut d[..n], &spec);
                        zero_ring(&mut d[n..], &spec);
                        d
                    };
                    rk4(&mut y, dt, &mut rhs);
                    check_finite(&y, step)?;
                }
                out.plane_mut(k, 0).copy_from_slice(&y[..n]);
                energy.push(total(&y));
            }
        }
    }
    Ok((out, dt, stride, energy))
}

fn restore_ring(dst: &mut [f64], src: &[f64], spec: &DomainSpec) {
    for (i, j) in crate::problems::ring(spec.ny, spec.nx) {
        dst[i * spec.nx + j] = src[i * spec.nx + j];
    }
}

fn zero_ring(dst: &mut [f64], spec: &DomainSpec) {
    for (i, j) in crate::problems::ring(spec.ny, spec.nx) {
        dst[i * spec.nx + j] = 0.0;
    }
}

/// Velocity `(U + psi_y, V - psi_x)` from vorticity, `-lap psi = omega`.
fn ns_velocity(sp: &Spectral, wh: &[C64]) -> (Vec<C64>, Vec<C64>) {
    let mut psi = vec![C64::default(); wh.len()];
    for i in 0..sp.ny {
        for j in 0..sp.nx {
            let o = i * sp.nx + j;
            let k2 = sp.k2(i, j);
            if k2 > 0.0 {
                psi[o] = wh[o] / k2;
            }
        }
    }
    let u = sp.dy(&psi);
    let v: Vec<C64> = sp.dx(&psi).into_iter().map(|z| -z).collect();
    (u, v)
}

fn navier_stokes(prob: &PDEProblem, rho: f64, nu: f64, stepper: Stepper) -> Result<Solved> {
    let spec = prob.domain;
    if spec.boundary != Boundary::Periodic {
        return Err(Error::Unsupported("Navier-Stokes reference needs a periodic grid".into()));
    }
    let mut sp = Spectral::new(&spec);
    let (n, nt) = (spec.plane_len(), spec.nt);
    let u0 = &prob.ic.data()[..n];
    let v0 = &prob.ic.data()[n..2 * n];
    let mean_u = u0.iter().sum::<f64>() / n as f64;
    let mean_v = v0.iter().sum::<f64>() / n as f64;
    let uh = sp.forward(u0);
    let vh = sp.forward(v0);
    let mut wh: Vec<C64> = sp.dx(&vh).iter().zip(sp.dy(&uh)).map(|(a, b)| a - b).collect();

    let umax = u0.iter().chain(v0).fold(0.0f64, |m, v| m.max(v.abs())) + mean_u.abs().max(mean_v.abs());
    let h = spec.dx.min(spec.dy);
    let kmax2 = sp.kx.iter().fold(0.0f64, |m, k| m.max(k * k)) + sp.ky.iter().fold(0.0f64, |m, k| m.max(k * k));
    let mut bound = 0.4 * h / umax.max(1e-12);
    if stepper == Stepper::Rk4 {
        bound = bound.min(2.5 / (nu * kmax2));
    }
    let stride = substeps(spec.dt, bound);
    let dt = spec.dt / stride as f64;

    // physical fields (u, v, omega) from the vorticity spectrum
    let fields = |sp: &mut Spectral, wh: &[C64]| -> (Vec<f64>, Vec<f64>, Vec<C64>, Vec<C64>) {
        let (uh, vh) = ns_velocity(sp, wh);
        let u: Vec<f64> = sp.inverse(&uh).into_iter().map(|x| x + mean_u).collect();
        let v: Vec<f64> = sp.inverse(&vh).into_iter().map(|x| x + mean_v).collect();
        (u, v, uh, vh)
    };
    // spectrum of -(u . grad omega)
    let advection = |sp: &mut Spectral, wh: &[C64]| -> Vec<C64> {
        let (u, v, _, _) = fields(sp, wh);
        let wx = sp.inverse(&sp.dx(wh));
        let wy = sp.inverse(&sp.dy(wh));
        let adv: Vec<f64> = (0..u.len()).map(|o| -(u[o] * wx[o] + v[o] * wy[o])).collect();
        let mut a = sp.forward(&adv);
        sp.dealias(&mut a);
        a
    };
    let snapshot = |sp: &mut Spectral, wh: &[C64]| -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (u, v, uh, vh) = fields(sp, wh);
        let ux = sp.inverse(&sp.dx(&uh));
        let uy = sp.inverse(&sp.dy(&uh));
        let vx = sp.inverse(&sp.dx(&vh));
        let vy = sp.inverse(&sp.dy(&vh));
        let src: Vec<f64> = (0..u.len())
            .map(|o| rho * (ux[o] * ux[o] + 2.0 * uy[o] * vx[o] + vy[o] * vy[o]))
            .collect();
        let sh = sp.forward(&src);
        let mut ph = vec![C64::default(); sh.len()];
        for i in 0..sp.ny {
            for j in 0..sp.nx {
                let o = i * sp.nx + j;
                let k2 = sp.k2(i, j);
                if k2 > 0.0 {
                    ph[o] = sh[o] / k2;
                }
            }
        }
        (u, v, sp.inverse(&ph))
    };

    let mut out = FieldSequence::zeros(nt, 3, spec.ny, spec.nx);
    let mut energy = Vec::with_capacity(nt);
    let mut record = |sp: &mut Spectral, wh: &[C64], k: usize, out: &mut FieldSequence| {
        let (u, v, p) = snapshot(sp, wh);
        energy.push(0.5 * u.iter().zip(&v).map(|(a, b)| a * a + b * b).sum::<f64>() * spec.dx * spec.dy);
        out.plane_mut(k, 0).copy_from_slice(&u);
        out.plane_mut(k, 1).copy_from_slice(&v);
        out.plane_mut(k, 2).copy_from_slice(&p);
    };
    record(&mut sp, &wh, 0, &mut out);

    let implicit: Vec<f64> = (0..n)
        .map(|o| 1.0 / (1.0 + dt * nu * sp.k2(o / spec.nx, o % spec.nx)))
        .collect();
    let mut step = 0;
    for k in 1..nt {
        for _ in 0..stride {
            step += 1;
            match stepper {
                Stepper::SemiImplicit => {
                    let a0 = advection(&mut sp, &wh);
                    let w1: Vec<C64> = (0..n).map(|o| (wh[o] + a0[o] * dt) * implicit[o]).collect();
                    let a1 = advection(&mut sp, &w1);
                    wh = (0..n)
                        .map(|o| (wh[o] + (a0[o] + a1[o]) * (0.5 * dt)) * implicit[o])
                        .collect();
                }
                Stepper::Rk4 => {
                    let mut y: Vec<f64> = wh.iter().flat_map(|z| [z.re, z.im]).collect();
                    let mut rhs = |s: &[f64]| -> Vec<f64> {
                        let z: Vec<C64> = s.chunks(2).map(|c| C64::new(c[0], c[1])).collect();
                        let a = advection(&mut sp, &z);
                        (0..n)
                            .flat_map(|o| {
                                let d = a[o] - z[o] * (nu * sp.k2(o / spec.nx, o % spec.nx));
                                [d.re, d.im]
                            })
                            .collect()
                    };
                    rk4(&mut y, dt, &mut rhs);
                    wh = y.chunks(2).map(|c| C64::new(c[0], c[1])).collect();
                }
            }
            if !wh.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
                return Err(Error::Numeric(format!("reference solution blew up at fine step {step}")));
            }
        }
        record(&mut sp, &wh, k, &mut out);
    }
    Ok((out, dt, stride, energy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{KGParams, NSParams};

    fn rel_mse(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        num / b.iter().map(|y| y * y).sum::<f64>()
    }

    #[test]
    fn klein_gordon_matches_analytic() {
        let coarse = DomainSpec::square(16, 1.0, 9, 0.5, Boundary::Dirichlet).unwrap();
        let prob = PDEProblem::klein_gordon(coarse, KGParams { m: 3.0 }).unwrap();
        let run = solve_reference(&prob, fine_domain(&coarse, 4).unwrap(), Stepper::SemiImplicit).unwrap();
        let exact = prob.analytic_sequence().unwrap();
        let e = rel_mse(run.output.tensor().data(), exact.tensor().data());
        assert!(e <= 1e-4, "{e}");
        assert_eq!(run.fine.nx, 61);
    }

    #[test]
    fn klein_gordon_energy_conserved() {
        let prob = PDEProblem::klein_gordon_desk().unwrap();
        let run = solve_reference(&prob, fine_domain(&prob.domain, 2).unwrap(), Stepper::SemiImplicit).unwrap();
        let e0 = run.energy[0];
        for e in &run.energy {
            assert!(((e - e0) / e0).abs() < 1e-3);
        }
    }

    #[test]
    fn klein_gordon_zero_ic_stays_zero() {
        let coarse = DomainSpec::square(8, 1.0, 5, 0.2, Boundary::Dirichlet).unwrap();
        let mut prob = PDEProblem::klein_gordon(coarse, KGParams { m: 3.0 }).unwrap();
        prob.ic = Tensor::zeros(prob.ic.shape());
        let (out, _, _, _) = klein_gordon(&prob, 3.0, Stepper::SemiImplicit).unwrap();
        assert!(out.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rk4_agrees_with_leapfrog() {
        let coarse = DomainSpec::square(12, 1.0, 5, 0.2, Boundary::Dirichlet).unwrap();
        let prob = PDEProblem::klein_gordon(coarse, KGParams { m: 1.0 }).unwrap();
        let fine = fine_domain(&coarse, 2).unwrap();
        let a = solve_reference(&prob, fine, Stepper::SemiImplicit).unwrap();
        let b = solve_reference(&prob, fine, Stepper::Rk4).unwrap();
        assert!(rel_mse(a.output.tensor().data(), b.output.tensor().data()) < 1e-6);
    }

    #[test]
    fn taylor_green_decay() {
        let prob = PDEProblem::navier_stokes_desk().unwrap();
        let run = solve_reference(&prob, fine_domain(&prob.domain, 2).unwrap(), Stepper::SemiImplicit).unwrap();
        let spec = run.fine;
        let n = spec.plane_len();
        let peak = |k: usize| {
            let s = run.fine_output.slice(k);
            let u = Tensor::new(&[spec.ny, spec.nx], s.data()[..n].to_vec()).unwrap();
            let v = Tensor::new(&[spec.ny, spec.nx], s.data()[n..2 * n].to_vec()).unwrap();
            crate::problems::vorticity(&u, &v, &spec).unwrap().max_abs()
        };
        let ratio = peak(spec.nt - 1) / peak(0);
        let expect = (-2.0f64 / 100.0).exp();
        assert!((ratio / expect - 1.0).abs() < 0.01, "{ratio} {expect}");
        let exact = prob.analytic_sequence().unwrap();
        assert!(rel_mse(run.output.tensor().data(), exact.tensor().data()) < 1e-6);
    }

    #[test]
    fn taylor_green_rk4() {
        let d = DomainSpec::square(16, 2.0 * std::f64::consts::PI, 4, 0.3, Boundary::Periodic).unwrap();
        let prob = PDEProblem::navier_stokes(d, NSParams { re: 10.0, rho: 1.0, nu: 1.0 }).unwrap();
        let run = solve_reference(&prob, d, Stepper::Rk4).unwrap();
        let exact = prob.analytic_sequence().unwrap();
        assert!(rel_mse(run.output.tensor().data(), exact.tensor().data()) < 1e-8);
    }

    #[test]
    fn energy_examples() {
        let spec = DomainSpec::square(16, 1.0, 3, 0.1, Boundary::Periodic).unwrap();
        let p = ACParams { eps: 0.1, phi: 1.0 };
        let one = Tensor::full(&[16, 16], 1.0);
        assert_eq!(ginzburg_landau_energy(&one, p, &spec).unwrap(), 0.0);
        let zero = Tensor::zeros(&[1, 16, 16]);
        let e = ginzburg_landau_energy(&zero, p, &spec).unwrap();
        assert!((e - 1.0 / (4.0 * 0.01)).abs() < 1e-9);

        // brute-force loop oracle
        let c = spec.sample(|x, y| 0.3 * (2.0 * std::f64::consts::PI * x).sin() * (2.0 * std::f64::consts::PI * y).cos());
        let n = 16usize;
        let h = spec.dx;
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                let v = c.at(&[i, j]);
                let gx = (c.at(&[i, (j + 1) % n]) - c.at(&[i, (j + n - 1) % n])) / (2.0 * h);
                let gy = (c.at(&[(i + 1) % n, j]) - c.at(&[(i + n - 1) % n, j])) / (2.0 * h);
                acc += (0.5 * (gx * gx + gy * gy) + (v * v - 1.0).powi(2) / (4.0 * 0.01)) * h * h;
            }
        }
        assert!((ginzburg_landau_energy(&c, p, &spec).unwrap() - acc).abs() < 1e-10);
    }

    #[test]
    fn allen_cahn_energy_decreases_and_reproducible() {
        let prob = PDEProblem::allen_cahn_desk().unwrap();
        let fine = fine_domain(&prob.domain, 2).unwrap();
        let a = solve_reference(&prob, fine, Stepper::SemiImplicit).unwrap();
        for w in a.energy.windows(2) {
            assert!(w[1] <= w[0]);
        }
        let b = solve_reference(&prob, fine, Stepper::SemiImplicit).unwrap();
        assert_eq!(a.output, b.output);
    }

    #[test]
    fn rejects_non_refinement() {
        let prob = PDEProblem::klein_gordon_desk().unwrap();
        let mut fine = fine_domain(&prob.domain, 2).unwrap();
        fine.nx += 1;
        assert!(matches!(
            solve_reference(&prob, fine, Stepper::SemiImplicit),
            Err(Error::Config(_))
        ));
    }
}
