//! Loss assembly: per-slice PDE losses, the causal mask and penalty, the
//! generated-point loss and the weighted total.

use crate::error::{dim_err, Error, Result};
use crate::fdops::{Boundary, DomainSpec};
use crate::field::{FieldSequence, SeqVars};
use crate::problems::{ring, PDEProblem};
use crate::sampler::PointBatch;
use crate::{Graph, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub w_i: f64,
    pub w_b: f64,
    pub w_f: f64,
    pub lambda_causal: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Fixed mask threshold; `None` selects the adaptive rule
    /// `max(5 * min per-step loss, 1e-6)`.
    pub epsilon_causal: Option<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_i: 1.0,
            w_b: 1.0,
            w_f: 1.0,
            lambda_causal: 0.1,
            alpha: 1.0,
            beta: 0.5,
            epsilon_causal: None,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_i, self.w_b, self.w_f, self.lambda_causal, self.alpha];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::Config(format!("beta {} outside (0, 1)", self.beta)));
        }
        if let Some(e) = self.epsilon_causal {
            if !(e > 0.0) {
                return Err(Error::Config("epsilon_causal must be > 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CausalState {
    pub per_step_loss: Vec<f64>,
    pub mask: Vec<u8>,
    pub epsilon: f64,
    pub penalty: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PinnMse {
    pub mse_i: f64,
    pub mse_b: f64,
    pub mse_f: f64,
    pub total: f64,
}

/// Spatial mean of squared residuals per slice, summed over residual
/// components.
pub fn per_step_pde_loss(residuals: &FieldSequence) -> Result<Vec<f64>> {
    let n = residuals.plane_len();
    if n == 0 {
        return Err(Error::Degenerate("residual slice has no cells".into()));
    }
    Ok((0..residuals.nt())
        .map(|t| {
            (0..residuals.channels())
                .map(|c| residuals.plane(t, c).iter().map(|r| r * r).sum::<f64>() / n as f64)
                .sum()
        })
        .collect())
}

/// Graph form of [`per_step_pde_loss`]; one scalar per slice.
pub fn per_step_vars(g: &mut Graph, res: &SeqVars) -> Result<Vec<Var>> {
    if res.h * res.w == 0 {
        return Err(Error::Degenerate("residual slice has no cells".into()));
    }
    let mut out = Vec::with_capacity(res.nt());
    for slice in &res.planes {
        let mut acc: Option<Var> = None;
        for &p in slice {
            let sq = g.square(p);
            let m = g.mean(sq)?;
            acc = Some(match acc {
                Some(a) => g.add(a, m)?,
                None => m,
            });
        }
        out.push(acc.ok_or_else(|| Error::Degenerate("residual slice has no channels".into()))?);
    }
    Ok(out)
}

/// Initial, boundary and PDE mean-squared errors of a predicted sequence.
pub fn pinn_mse(pred: &FieldSequence, prob: &PDEProblem, w: &LossWeights) -> Result<PinnMse> {
    if pred.channels() != prob.channels() || pred.h() != prob.domain.ny || pred.w() != prob.domain.nx {
        return Err(dim_err("prediction does not match the problem grid"));
    }
    let ic = prob.ic.data();
    let first = pred.slice(0);
    let mse_i = first.data().iter().zip(ic).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / ic.len() as f64;
    let mse_b = match (&prob.bc, prob.domain.boundary) {
        (Some(bc), Boundary::Dirichlet) => {
            let (h, wd) = (pred.h(), pred.w());
            let (mut s, mut n) = (0.0, 0usize);
            for t in 0..pred.nt() {
                for c in 0..pred.channels() {
                    let plane = pred.plane(t, c);
                    for (i, j) in ring(h, wd) {
                        s += (plane[i * wd + j] - bc.data()[c * h * wd + i * wd + j]).powi(2);
                        n += 1;
                    }
                }
            }
            s / n as f64
        }
        _ => 0.0,
    };
    let per_step = per_step_pde_loss(&prob.residual(pred)?)?;
    let mse_f = per_step.iter().sum::<f64>() / per_step.len() as f64;
    Ok(PinnMse {
        mse_i,
        mse_b,
        mse_f,
        total: w.w_i * mse_i + w.w_b * mse_b + w.w_f * mse_f,
    })
}

pub fn causal_mask(per_step: &[f64], epsilon: f64) -> Result<Vec<u8>> {
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("mask threshold {epsilon} must be > 0")));
    }
    Ok(per_step.iter().map(|&l| u8::from(l < epsilon)).collect())
}

pub fn adaptive_epsilon(per_step: &[f64]) -> f64 {
    let min = per_step.iter().copied().fold(f64::INFINITY, f64::min);
    if min.is_finite() {
        (5.0 * min).max(1e-6)
    } else {
        1e-6
    }
}

/// Number of pairs `t < t'` with `M_t = 0` and `M_t' = 1`.
pub fn causal_penalty(mask: &[u8]) -> u64 {
    let mut zeros = 0u64;
    let mut total = 0u64;
    for &m in mask {
        if m == 0 {
            zeros += 1;
        } else {
            total += zeros;
        }
    }
    total
}

pub fn causal_state(per_step: &[f64], w: &LossWeights) -> Result<CausalState> {
    let epsilon = w.epsilon_causal.unwrap_or_else(|| adaptive_epsilon(per_step));
    let mask = causal_mask(per_step, epsilon)?;
    let penalty = causal_penalty(&mask);
    Ok(CausalState {
        per_step_loss: per_step.to_vec(),
        mask,
        epsilon,
        penalty,
    })
}

/// Per-slice weights for the differentiable PDE term: `1 + lambda` on
/// unsatisfied slices that precede a satisfied one, `1` elsewhere.
pub fn causal_slice_weights(mask: &[u8], lambda: f64) -> Vec<f64> {
    let mut later_ok = false;
    let mut out = vec![1.0; mask.len()];
    for t in (0..mask.len()).rev() {
        if mask[t] == 0 && later_ok {
            out[t] = 1.0 + lambda;
        }
        later_ok |= mask[t] == 1;
    }
    out
}

/// Flat-index interpolation stencils into a residual sequence of
/// `nt_res = nt - 2` slices for each point, one stencil per component.
/// Space is bilinear (wrapping on periodic grids, clamped on Dirichlet
/// grids); time snaps to the nearest interior slice.
pub fn interpolation_entries(
    coords: &[(f64, f64, f64)],
    spec: &DomainSpec,
    channels: usize,
) -> Vec<Vec<(usize, f64)>> {
    let (h, w) = (spec.ny, spec.nx);
    let nt_res = spec.nt - 2;
    let axis = |v: f64, origin: f64, step: f64, n: usize| -> (usize, usize, f64) {
        let f = (v - origin) / step;
        match spec.boundary {
            Boundary::Periodic => {
                let f = f.rem_euclid(n as f64);
                let i0 = (f.floor() as usize).min(n - 1);
                (i0, (i0 + 1) % n, f - i0 as f64)
            }
            Boundary::Dirichlet => {
                let f = f.clamp(0.0, (n - 1) as f64);
                let i0 = (f.floor() as usize).min(n - 2);
                (i0, i0 + 1, f - i0 as f64)
            }
        }
    };
    let mut out = Vec::with_capacity(coords.len() * channels);
    for &(t, x, y) in coords {
        let k = (t / spec.dt).round().clamp(1.0, (nt_res) as f64) as usize;
        let r = k - 1;
        let (j0, j1, fx) = axis(x, spec.x0, spec.dx, w);
        let (i0, i1, fy) = axis(y, spec.y0, spec.dy, h);
        for c in 0..channels {
            let base = (r * channels + c) * h * w;
            out.push(vec![
                (base + i0 * w + j0, (1.0 - fx) * (1.0 - fy)),
                (base + i0 * w + j1, fx * (1.0 - fy)),
                (base + i1 * w + j0, (1.0 - fx) * fy),
                (base + i1 * w + j1, fx * fy),
            ]);
        }
    }
    out
}

/// Mean over accepted points of the squared interpolated residual (summed
/// over components). Returns `None` when no point is accepted.
pub fn gen_point_vars(
    g: &mut Graph,
    res: &SeqVars,
    points: &PointBatch,
    spec: &DomainSpec,
) -> Result<Option<Var>> {
    let coords: Vec<_> = points.accepted_coords();
    if coords.is_empty() {
        return Ok(None);
    }
    let flat: Vec<Var> = res.planes.iter().flatten().copied().collect();
    let total = flat.len() * res.h * res.w;
    let all = g.concat(&flat, &[total])?;
    let entries = interpolation_entries(&coords, spec, res.channels());
    let vals = g.gather(all, entries)?;
    let sq = g.square(vals);
    let s = g.sum(sq);
    Ok(Some(g.scale(s, 1.0 / coords.len() as f64)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenLoss {
    pub value: f64,
    /// Set when no point was accepted and the loss defaulted to zero.
    pub empty: bool,
}

pub fn gen_point_loss(pred: &FieldSequence, points: &PointBatch, prob: &PDEProblem) -> Result<GenLoss> {
    let res = prob.residual(pred)?;
    let mut g = Graph::new();
    let rv = SeqVars::constant(&mut g, &res);
    Ok(match gen_point_vars(&mut g, &rv, points, &prob.domain)? {
        Some(v) => GenLoss {
            value: g.scalar(v),
            empty: false,
        },
        None => {
            log::warn!("no accepted generated points; generated-point loss set to 0");
            GenLoss {
                value: 0.0,
                empty: true,
            }
        }
    })
}

/// `lambda_gen = alpha * mean(d_scores)`, zero for an empty score list.
pub fn lambda_gen(alpha: f64, d_scores: &[f64]) -> f64 {
    if d_scores.is_empty() {
        0.0
    } else {
        alpha * d_scores.iter().sum::<f64>() / d_scores.len() as f64
    }
}

pub fn assemble_total(
    pinn: &PinnMse,
    causal: &CausalState,
    gen: f64,
    w: &LossWeights,
    d_scores: &[f64],
) -> Result<f64> {
    let named = [
        ("mse_i", pinn.mse_i),
        ("mse_b", pinn.mse_b),
        ("mse_f", pinn.mse_f),
        ("gen", gen),
        ("penalty", causal.penalty as f64),
    ];
    for (name, v) in named {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss component {name} is not finite")));
        }
    }
    if d_scores.iter().any(|d| !d.is_finite()) {
        return Err(Error::Numeric("loss component d_scores is not finite".into()));
    }
    Ok(w.w_i * pinn.mse_i
        + w.w_b * pinn.mse_b
        + w.w_f * pinn.mse_f
        + w.lambda_causal * causal.penalty as f64
        + lambda_gen(w.alpha, d_scores) * gen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::PointBatch;
    use crate::Tensor;

    #[test]
    fn per_step_examples() {
        let z = FieldSequence::zeros(3, 1, 4, 4);
        assert_eq!(per_step_pde_loss(&z).unwrap(), vec![0.0; 3]);
        let two = FieldSequence::from_tensor(Tensor::full(&[2, 1, 3, 3], 2.0)).unwrap();
        assert_eq!(per_step_pde_loss(&two).unwrap(), vec![4.0, 4.0]);
        let empty = FieldSequence::zeros(2, 1, 0, 3);
        assert!(matches!(per_step_pde_loss(&empty), Err(Error::Degenerate(_))));
    }

    #[test]
    fn per_step_graph_matches_plain() {
        let seq = FieldSequence::from_tensor(Tensor::from_fn(&[3, 2, 4, 5], |i| {
            ((i[0] * 40 + i[1] * 20 + i[2] * 5 + i[3]) as f64 * 0.77).sin()
        }))
        .unwrap();
        let mut g = Graph::new();
        let sv = SeqVars::constant(&mut g, &seq);
        let vars = per_step_vars(&mut g, &sv).unwrap();
        let plain = per_step_pde_loss(&seq).unwrap();
        for (v, p) in vars.iter().zip(&plain) {
            assert!((g.scalar(*v) - p).abs() < 1e-14);
        }
    }

    #[test]
    fn mask_examples() {
        assert_eq!(causal_mask(&[0.1, 0.5, 0.01], 0.2).unwrap(), vec![1, 0, 1]);
        assert_eq!(causal_mask(&[0.1, 0.1], 1.0).unwrap(), vec![1, 1]);
        assert_eq!(causal_mask(&[2.0, 3.0], 1.0).unwrap(), vec![0, 0]);
        assert!(causal_mask(&[1.0], 0.0).is_err());
    }

    #[test]
    fn penalty_examples() {
        assert_eq!(causal_penalty(&[1, 1, 1]), 0);
        assert_eq!(causal_penalty(&[0, 0, 0]), 0);
        assert_eq!(causal_penalty(&[0, 1, 1]), 2);
        assert_eq!(causal_penalty(&[1, 0, 1, 0, 1]), 3);
    }

    #[test]
    fn slice_weights() {
        assert_eq!(causal_slice_weights(&[1, 0, 1, 0], 0.5), vec![1.0, 1.5, 1.0, 1.0]);
        assert_eq!(causal_slice_weights(&[0, 0], 0.5), vec![1.0, 1.0]);
    }

    #[test]
    fn adaptive_threshold() {
        assert_eq!(adaptive_epsilon(&[0.2, 0.1, 0.4]), 0.5);
        assert_eq!(adaptive_epsilon(&[0.0, 1.0]), 1e-6);
    }

    #[test]
    fn totals() {
        let w = LossWeights::default();
        let pinn = PinnMse {
            mse_i: 1.0,
            mse_b: 2.0,
            mse_f: 3.0,
            total: 6.0,
        };
        let mut causal = CausalState {
            per_step_loss: vec![],
            mask: vec![],
            epsilon: 1.0,
            penalty: 0,
        };
        assert_eq!(assemble_total(&pinn, &causal, 5.0, &w, &[]).unwrap(), 6.0);
        let gen_part = assemble_total(&pinn, &causal, 2.0, &w, &[0.6, 0.8]).unwrap() - 6.0;
        assert!((gen_part - 1.4).abs() < 1e-12);
        causal.penalty = 3;
        let c = assemble_total(&pinn, &causal, 0.0, &w, &[]).unwrap() - 6.0;
        assert!((c - 0.3).abs() < 1e-12);
        let bad = PinnMse { mse_f: f64::NAN, ..pinn };
        match assemble_total(&bad, &causal, 0.0, &w, &[]) {
            Err(Error::Numeric(m)) => assert!(m.contains("mse_f")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pinn_mse_under_hard_constraints() {
        let prob = PDEProblem::klein_gordon_desk().unwrap();
        let d = prob.domain;
        let raw = FieldSequence::from_tensor(Tensor::from_fn(&[d.nt, 1, d.ny, d.nx], |i| {
            ((i[0] + i[2] * 3 + i[3]) as f64).cos()
        }))
        .unwrap();
        let c = prob.apply_hard_constraints(&raw).unwrap();
        let m = pinn_mse(&c, &prob, &LossWeights::default()).unwrap();
        assert_eq!(m.mse_i, 0.0);
        assert_eq!(m.mse_b, 0.0);
        assert_eq!(m.total, m.mse_f);

        let exact = prob.analytic_sequence().unwrap();
        let e = pinn_mse(&exact, &prob, &LossWeights::default()).unwrap();
        assert!(e.mse_f < 1e-2 * m.mse_f);
    }

    fn residual_oracle(res: &FieldSequence, spec: &DomainSpec, t: f64, x: f64, y: f64) -> f64 {
        let k = ((t / spec.dt).round() as usize).clamp(1, spec.nt - 2) - 1;
        let fx = x / spec.dx;
        let fy = y / spec.dy;
        let (j0, i0) = (fx.floor() as usize % spec.nx, fy.floor() as usize % spec.ny);
        let (j1, i1) = ((j0 + 1) % spec.nx, (i0 + 1) % spec.ny);
        let (ax, ay) = (fx - fx.floor(), fy - fy.floor());
        let v = |i, j| res.at(k, 0, i, j);
        let r = v(i0, j0) * (1.0 - ax) * (1.0 - ay)
            + v(i0, j1) * ax * (1.0 - ay)
            + v(i1, j0) * (1.0 - ax) * ay
            + v(i1, j1) * ax * ay;
        r * r
    }

    #[test]
    fn gen_loss_matches_interpolation_oracle() {
        let prob = PDEProblem::allen_cahn_desk().unwrap();
        let d = prob.domain;
        let pred = FieldSequence::from_tensor(Tensor::from_fn(&[d.nt, 1, d.ny, d.nx], |i| {
            ((i[0] * 7 + i[2] * 3 + i[3]) as f64 * 0.1).sin()
        }))
        .unwrap();
        let res = prob.residual(&pred).unwrap();
        let coords: Vec<(f64, f64, f64)> = (0..9)
            .map(|k| {
                let s = k as f64;
                (
                    d.horizon() * (0.05 + 0.1 * s),
                    (0.13 + 0.091 * s) % 1.0,
                    (0.71 + 0.37 * s) % 1.0,
                )
            })
            .collect();
        let batch = PointBatch::accepted_from(&coords);
        let got = gen_point_loss(&pred, &batch, &prob).unwrap();
        let want: f64 = coords.iter().map(|&(t, x, y)| residual_oracle(&res, &d, t, x, y)).sum::<f64>() / 9.0;
        assert!((got.value - want).abs() < 1e-9 * want.max(1.0));
        assert!(!got.empty);

        // all points on one cell
        let cell = (2.0 * d.dt, 5.0 * d.dx, 7.0 * d.dy);
        let same = PointBatch::accepted_from(&[cell; 4]);
        let v = gen_point_loss(&pred, &same, &prob).unwrap().value;
        assert!((v - res.at(1, 0, 7, 5).powi(2)).abs() < 1e-9);

        let none = PointBatch::accepted_from(&[]);
        let e = gen_point_loss(&pred, &none, &prob).unwrap();
        assert!(e.empty && e.value == 0.0);
    }
}
