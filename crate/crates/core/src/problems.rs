//! Benchmark equations: residual operators, hard constraints and closed-form
//! solutions.
//!
//! Residuals use the sign convention `R = (temporal term) - (right-hand
//! side)` and are evaluated on interior time indices `1..nt-1`. On Dirichlet
//! grids the residual of the boundary ring is defined as zero because those
//! nodes are fixed by the hard constraint.

use std::f64::consts::PI;

use crate::error::{dim_err, Error, Result};
use crate::fdops::{ops, Axis, Boundary, DomainSpec, PadMode};
use crate::field::{FieldSequence, SeqVars};
use crate::{Graph, Tensor, Var};

/// Allen-Cahn constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ACParams {
    /// Interface width.
    pub eps: f64,
    /// Diffusion coefficient.
    pub phi: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KGParams {
    pub m: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NSParams {
    pub re: f64,
    pub rho: f64,
    /// Viscosity factor; the effective diffusion is `nu / re`.
    pub nu: f64,
}

impl NSParams {
    pub fn diffusion(&self) -> f64 {
        self.nu / self.re
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Equation {
    AllenCahn(ACParams),
    KleinGordon(KGParams),
    NavierStokes(NSParams),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ProblemName {
    AllenCahn,
    KleinGordon,
    NavierStokes,
}

impl ProblemName {
    pub fn as_str(self) -> &'static str {
        match self {
            ProblemName::AllenCahn => "allen-cahn",
            ProblemName::KleinGordon => "klein-gordon",
            ProblemName::NavierStokes => "navier-stokes",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "allen-cahn" => Ok(ProblemName::AllenCahn),
            "klein-gordon" => Ok(ProblemName::KleinGordon),
            "navier-stokes" => Ok(ProblemName::NavierStokes),
            other => Err(Error::Config(format!("unknown problem '{other}'"))),
        }
    }
}

/// One benchmark instance: equation, grid, initial and boundary data.
#[derive(Clone, Debug, PartialEq)]
pub struct PDEProblem {
    pub equation: Equation,
    pub domain: DomainSpec,
    /// `[channels, ny, nx]` initial field.
    pub ic: Tensor,
    /// Initial velocity `[1, ny, nx]` (Klein-Gordon only).
    pub v0: Option<Tensor>,
    /// `[channels, ny, nx]` boundary values (Dirichlet grids only; only the
    /// outer ring is read).
    pub bc: Option<Tensor>,
    /// Initial circle radius for the Allen-Cahn configuration.
    pub radius: Option<f64>,
}

impl PDEProblem {
    pub fn name(&self) -> ProblemName {
        match self.equation {
            Equation::AllenCahn(_) => ProblemName::AllenCahn,
            Equation::KleinGordon(_) => ProblemName::KleinGordon,
            Equation::NavierStokes(_) => ProblemName::NavierStokes,
        }
    }

    pub fn channels(&self) -> usize {
        match self.equation {
            Equation::NavierStokes(_) => 3,
            _ => 1,
        }
    }

    /// Number of residual components per time slice.
    pub fn residual_channels(&self) -> usize {
        self.channels()
    }

    /// Shrinking circle `c = tanh((R0 - r) / (sqrt(2) eps))` on a periodic
    /// `[0, length]^2`.
    pub fn allen_cahn(domain: DomainSpec, params: ACParams, radius: f64) -> Result<Self> {
        if !(params.eps > 0.0 && params.phi > 0.0) {
            return Err(Error::Config("Allen-Cahn needs eps > 0 and phi > 0".into()));
        }
        if domain.dx.min(domain.dy) > params.eps {
            return Err(Error::Config(format!(
                "grid step {} does not resolve interface width {}",
                domain.dx.min(domain.dy),
                params.eps
            )));
        }
        let cx = domain.x0 + 0.5 * domain.length_x();
        let cy = domain.y0 + 0.5 * domain.length_y();
        let ic = domain
            .sample(|x, y| {
                let r = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                ((radius - r) / (std::f64::consts::SQRT_2 * params.eps)).tanh()
            })
            .reshape(&[1, domain.ny, domain.nx])?;
        Ok(Self {
            equation: Equation::AllenCahn(params),
            domain,
            ic,
            v0: None,
            bc: None,
            radius: Some(radius),
        })
    }

    /// `u0 = sin(pi x) sin(pi y)`, `v0 = 0`, zero Dirichlet data on the unit
    /// square.
    pub fn klein_gordon(domain: DomainSpec, params: KGParams) -> Result<Self> {
        if params.m < 0.0 {
            return Err(Error::Config("Klein-Gordon mass must be >= 0".into()));
        }
        if domain.boundary != Boundary::Dirichlet {
            return Err(Error::Config("Klein-Gordon runs on a Dirichlet grid".into()));
        }
        let (kx, ky) = (PI / domain.length_x(), PI / domain.length_y());
        let ic = domain
            .sample(|x, y| (kx * x).sin() * (ky * y).sin())
            .reshape(&[1, domain.ny, domain.nx])?;
        let ic = snap_ring(ic, 0.0);
        Ok(Self {
            equation: Equation::KleinGordon(params),
            domain,
            ic,
            v0: Some(Tensor::zeros(&[1, domain.ny, domain.nx])),
            bc: Some(Tensor::zeros(&[1, domain.ny, domain.nx])),
            radius: None,
        })
    }

    /// Taylor-Green vortex on a periodic `[0, 2 pi]^2`.
    pub fn navier_stokes(domain: DomainSpec, params: NSParams) -> Result<Self> {
        if !(params.re > 0.0 && params.rho > 0.0 && params.nu > 0.0) {
            return Err(Error::Config("Navier-Stokes needs re, rho, nu > 0".into()));
        }
        let mut p = Self {
            equation: Equation::NavierStokes(params),
            domain,
            ic: Tensor::zeros(&[3, domain.ny, domain.nx]),
            v0: None,
            bc: None,
            radius: None,
        };
        p.ic = p.taylor_green(0.0);
        Ok(p)
    }

    pub fn allen_cahn_desk() -> Result<Self> {
        let d = DomainSpec::square(32, 1.0, 16, 0.016, Boundary::Periodic)?;
        Self::allen_cahn(d, ACParams { eps: 0.1, phi: 1.0 }, 0.25)
    }

    pub fn klein_gordon_desk() -> Result<Self> {
        let d = DomainSpec::square(32, 1.0, 16, 0.3, Boundary::Dirichlet)?;
        Self::klein_gordon(d, KGParams { m: 3.0 })
    }

    pub fn navier_stokes_desk() -> Result<Self> {
        let d = DomainSpec::square(32, 2.0 * PI, 12, 1.0, Boundary::Periodic)?;
        Self::navier_stokes(d, NSParams { re: 100.0, rho: 1.0, nu: 1.0 })
    }

    pub fn desk(name: ProblemName) -> Result<Self> {
        match name {
            ProblemName::AllenCahn => Self::allen_cahn_desk(),
            ProblemName::KleinGordon => Self::klein_gordon_desk(),
            ProblemName::NavierStokes => Self::navier_stokes_desk(),
        }
    }

    /// Same equation and initial data on another grid.
    pub fn on_domain(&self, domain: DomainSpec) -> Result<Self> {
        match self.equation {
            Equation::AllenCahn(p) => Self::allen_cahn(domain, p, self.radius.unwrap_or(0.25)),
            Equation::KleinGordon(p) => Self::klein_gordon(domain, p),
            Equation::NavierStokes(p) => Self::navier_stokes(domain, p),
        }
    }

    fn taylor_green(&self, t: f64) -> Tensor {
        let Equation::NavierStokes(p) = self.equation else {
            unreachable!()
        };
        let d = &self.domain;
        let f = (-2.0 * p.diffusion() * t).exp();
        let u = d.sample(|x, y| -x.cos() * y.sin() * f);
        let v = d.sample(|x, y| x.sin() * y.cos() * f);
        let pr = d.sample(|x, y| -0.25 * p.rho * ((2.0 * x).cos() + (2.0 * y).cos()) * f * f);
        Tensor::stack(&[u, v, pr])
            .unwrap()
    }

    pub fn has_analytic(&self) -> bool {
        !matches!(self.equation, Equation::AllenCahn(_))
    }

    /// Angular frequency of the Klein-Gordon standing wave.
    pub fn kg_omega(&self) -> Option<f64> {
        match self.equation {
            Equation::KleinGordon(p) => {
                let (kx, ky) = (PI / self.domain.length_x(), PI / self.domain.length_y());
                Some((kx * kx + ky * ky + p.m * p.m).sqrt())
            }
            _ => None,
        }
    }

    /// Closed-form `[channels, ny, nx]` field at time `t`.
    pub fn analytic_solution(&self, t: f64) -> Result<Tensor> {
        match self.equation {
            Equation::AllenCahn(_) => Err(Error::Unsupported(
                "Allen-Cahn has no closed form; use refsolve::solve_reference".into(),
            )),
            Equation::KleinGordon(_) => {
                let w = self.kg_omega().unwrap();
                Ok(self.ic.map(|v| v * (w * t).cos()))
            }
            Equation::NavierStokes(_) => Ok(self.taylor_green(t)),
        }
    }

    /// Closed-form solution on every time slice of the grid.
    pub fn analytic_sequence(&self) -> Result<FieldSequence> {
        let slices = (0..self.domain.nt)
            .map(|k| self.analytic_solution(self.domain.t(k)))
            .collect::<Result<Vec<_>>>()?;
        FieldSequence::from_slices(&slices)
    }

    /// Initial data for time slice 1 when it is fixed by the constraint
    /// (Klein-Gordon: `u0 + dt v0`).
    pub fn second_slice(&self) -> Option<Tensor> {
        let v0 = self.v0.as_ref()?;
        self.ic.zip_map(v0, |u, v| u + self.domain.dt * v).ok()
    }

    /// Time indices whose content is fully prescribed.
    pub fn fixed_slices(&self) -> usize {
        if self.v0.is_some() {
            2
        } else {
            1
        }
    }

    fn check_seq_shape(&self, seq_c: usize, h: usize, w: usize) -> Result<()> {
        if seq_c != self.channels() || h != self.domain.ny || w != self.domain.nx {
            return Err(dim_err(format!(
                "sequence [{}, {}, {}] does not match problem [{}, {}, {}]",
                seq_c,
                h,
                w,
                self.channels(),
                self.domain.ny,
                self.domain.nx
            )));
        }
        Ok(())
    }

    /// Hard-constrained version of a raw sequence.
    pub fn apply_hard_constraints(&self, raw: &FieldSequence) -> Result<FieldSequence> {
        self.check_seq_shape(raw.channels(), raw.h(), raw.w())?;
        if raw.nt() == 0 {
            return Err(Error::Degenerate("empty sequence".into()));
        }
        let mut out = raw.clone();
        out.set_slice(0, &self.ic)?;
        if raw.nt() > 1 {
            if let Some(s1) = self.second_slice() {
                out.set_slice(1, &s1)?;
            }
        }
        if let Some(bc) = &self.bc {
            let (h, w) = (raw.h(), raw.w());
            for t in 0..raw.nt() {
                for c in 0..raw.channels() {
                    let src = &bc.data()[c * h * w..(c + 1) * h * w];
                    let dst = out.plane_mut(t, c);
                    for (i, j) in ring(h, w) {
                        dst[i * w + j] = src[i * w + j];
                    }
                }
            }
        }
        Ok(out)
    }

    /// Graph form of the hard constraint for one time slice.
    pub fn constrain_step(&self, g: &mut Graph, t: usize, planes: &[Var]) -> Result<Vec<Var>> {
        let (h, w) = (self.domain.ny, self.domain.nx);
        if planes.len() != self.channels() {
            return Err(dim_err(format!(
                "{} planes for {} channels",
                planes.len(),
                self.channels()
            )));
        }
        let fixed = match t {
            0 => Some(self.ic.clone()),
            1 => self.second_slice(),
            _ => None,
        };
        if let Some(f) = fixed {
            return Ok((0..self.channels())
                .map(|c| g.constant(&Tensor::new(&[h, w], f.data()[c * h * w..(c + 1) * h * w].to_vec()).unwrap()))
                .collect());
        }
        let Some(bc) = &self.bc else {
            return Ok(planes.to_vec());
        };
        let mask = g.constant(&interior_mask(h, w));
        let mut out = Vec::with_capacity(planes.len());
        for (c, &p) in planes.iter().enumerate() {
            let mut ringv = vec![0.0; h * w];
            for (i, j) in ring(h, w) {
                ringv[i * w + j] = bc.data()[c * h * w + i * w + j];
            }
            let kept = g.mul(p, mask)?;
            let rv = g.constant_from(&[h, w], ringv)?;
            out.push(g.add(kept, rv)?);
        }
        Ok(out)
    }

    /// Zero-mean pressure gauge (Navier-Stokes only; identity otherwise).
    pub fn gauge_step(&self, g: &mut Graph, planes: &[Var]) -> Result<Vec<Var>> {
        if !matches!(self.equation, Equation::NavierStokes(_)) {
            return Ok(planes.to_vec());
        }
        let p = planes[2];
        let (h, w) = (self.domain.ny, self.domain.nx);
        let mean = g.mean(p)?;
        let ones = g.constant(&Tensor::full(&[h, w], 1.0));
        let mean_s = g.reshape(mean, &[1, 1])?;
        let row = g.reshape(ones, &[h * w, 1])?;
        let spread = g.matmul(row, mean_s)?;
        let spread = g.reshape(spread, &[h, w])?;
        let centered = g.sub(p, spread)?;
        Ok(vec![planes[0], planes[1], centered])
    }

    fn pad_mode(&self) -> PadMode {
        self.domain.default_pad()
    }

    /// Residual planes for interior time indices `1..nt-1`.
    pub fn residual_vars(&self, g: &mut Graph, seq: &SeqVars) -> Result<SeqVars> {
        self.check_seq_shape(seq.channels(), seq.h, seq.w)?;
        let nt = seq.nt();
        if nt < 3 {
            return Err(Error::Degenerate(format!(
                "residual needs at least 3 time slices, got {nt}"
            )));
        }
        let spec = self.domain;
        let mode = self.pad_mode();
        let dt = spec.dt;
        let mask = match spec.boundary {
            Boundary::Dirichlet => Some(g.constant(&interior_mask(seq.h, seq.w))),
            Boundary::Periodic => None,
        };
        let mut planes = Vec::with_capacity(nt - 2);
        for t in 1..nt - 1 {
            let (prev, cur, next) = (&seq.planes[t - 1], &seq.planes[t], &seq.planes[t + 1]);
            let res = match self.equation {
                Equation::AllenCahn(p) => {
                    let ut = ops::ddt(g, prev[0], next[0], dt)?;
                    let lap = ops::laplacian(g, cur[0], &spec, &mode)?;
                    let sq = g.square(cur[0]);
                    let cube = g.mul(sq, cur[0])?;
                    let react = g.sub(cube, cur[0])?;
                    let react = g.scale(react, 1.0 / (p.eps * p.eps));
                    let diff = g.scale(lap, p.phi);
                    let a = g.add(ut, react)?;
                    vec![g.sub(a, diff)?]
                }
                Equation::KleinGordon(p) => {
                    let utt = ops::ddt2(g, prev[0], cur[0], next[0], dt)?;
                    let lap = ops::laplacian(g, cur[0], &spec, &mode)?;
                    let mass = g.scale(cur[0], p.m * p.m);
                    let a = g.sub(utt, lap)?;
                    vec![g.add(a, mass)?]
                }
                Equation::NavierStokes(p) => {
                    let (u, v, pr) = (cur[0], cur[1], cur[2]);
                    let ut = ops::ddt(g, prev[0], next[0], dt)?;
                    let vt = ops::ddt(g, prev[1], next[1], dt)?;
                    let (ux, uy, ulap) = ops::gradient_and_laplacian(g, u, &spec, &mode)?;
                    let (vx, vy, vlap) = ops::gradient_and_laplacian(g, v, &spec, &mode)?;
                    let px = ops::d1(g, pr, Axis::X, &spec, &mode)?;
                    let py = ops::d1(g, pr, Axis::Y, &spec, &mode)?;
                    let nu = p.diffusion();
                    let inv_rho = 1.0 / p.rho;
                    let momentum = |g: &mut Graph, dt_term: Var, fx: Var, fy: Var, grad_p: Var, lap: Var| -> Result<Var> {
                        let a1 = g.mul(u, fx)?;
                        let a2 = g.mul(v, fy)?;
                        let adv = g.add(a1, a2)?;
                        let gp = g.scale(grad_p, inv_rho);
                        let visc = g.scale(lap, nu);
                        let s = g.add(dt_term, adv)?;
                        let s = g.add(s, gp)?;
                        g.sub(s, visc)
                    };
                    let ru = momentum(g, ut, ux, uy, px, ulap)?;
                    let rv = momentum(g, vt, vx, vy, py, vlap)?;
                    let rc = g.add(ux, vy)?;
                    vec![ru, rv, rc]
                }
            };
            let res = match mask {
                Some(m) => res
                    .into_iter()
                    .map(|r| g.mul(r, m))
                    .collect::<Result<Vec<_>>>()?,
                None => res,
            };
            planes.push(res);
        }
        Ok(SeqVars {
            planes,
            h: seq.h,
            w: seq.w,
        })
    }

    /// Plain residual of a whole sequence.
    pub fn residual(&self, seq: &FieldSequence) -> Result<FieldSequence> {
        let mut g = Graph::new();
        let vars = SeqVars::constant(&mut g, seq);
        let r = self.residual_vars(&mut g, &vars)?;
        r.values(&g)
    }
}

fn snap_ring(mut t: Tensor, value: f64) -> Tensor {
    let s = t.shape().to_vec();
    let (c, h, w) = (s[0], s[1], s[2]);
    for ci in 0..c {
        for (i, j) in ring(h, w) {
            t.data_mut()[ci * h * w + i * w + j] = value;
        }
    }
    t
}

/// Indices of the outer ring of an `h x w` plane.
pub fn ring(h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..h).flat_map(move |i| {
        (0..w).filter_map(move |j| (i == 0 || j == 0 || i == h - 1 || j == w - 1).then_some((i, j)))
    })
}

/// 1 on interior cells, 0 on the outer ring.
pub fn interior_mask(h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[h, w], |ix| {
        if ix[0] == 0 || ix[1] == 0 || ix[0] == h - 1 || ix[1] == w - 1 {
            0.0
        } else {
            1.0
        }
    })
}

pub fn allen_cahn_residual(seq: &FieldSequence, p: ACParams, spec: &DomainSpec) -> Result<FieldSequence> {
    if spec.dx.min(spec.dy) > p.eps {
        return Err(Error::Config(format!(
            "grid step {} does not resolve interface width {}",
            spec.dx.min(spec.dy),
            p.eps
        )));
    }
    if seq.channels() != 1 {
        return Err(dim_err("Allen-Cahn residual needs one channel"));
    }
    let prob = PDEProblem {
        equation: Equation::AllenCahn(p),
        domain: *spec,
        ic: seq.slice(0),
        v0: None,
        bc: None,
        radius: None,
    };
    prob.residual(seq)
}

pub fn klein_gordon_residual(seq: &FieldSequence, p: KGParams, spec: &DomainSpec) -> Result<FieldSequence> {
    if seq.channels() != 1 {
        return Err(dim_err("Klein-Gordon residual needs one channel"));
    }
    let prob = PDEProblem {
        equation: Equation::KleinGordon(p),
        domain: *spec,
        ic: seq.slice(0),
        v0: None,
        bc: None,
        radius: None,
    };
    prob.residual(seq)
}

pub fn navier_stokes_residual(seq: &FieldSequence, p: NSParams, spec: &DomainSpec) -> Result<FieldSequence> {
    if seq.channels() != 3 {
        return Err(dim_err("Navier-Stokes residual needs channels u, v, p"));
    }
    let prob = PDEProblem {
        equation: Equation::NavierStokes(p),
        domain: *spec,
        ic: seq.slice(0),
        v0: None,
        bc: None,
        radius: None,
    };
    prob.residual(seq)
}

/// `omega = dv/dx - du/dy`.
pub fn vorticity(u: &Tensor, v: &Tensor, spec: &DomainSpec) -> Result<Tensor> {
    if u.shape() != v.shape() || u.rank() != 2 {
        return Err(dim_err(format!(
            "vorticity of {:?} and {:?}",
            u.shape(),
            v.shape()
        )));
    }
    let mode = spec.default_pad();
    let mut g = Graph::new();
    let (uv, vv) = (g.constant(u), g.constant(v));
    let vx = ops::d1(&mut g, vv, Axis::X, spec, &mode)?;
    let uy = ops::d1(&mut g, uv, Axis::Y, spec, &mode)?;
    let w = g.sub(vx, uy)?;
    Ok(g.tensor(w))
}
