use std::collections::VecDeque;

use super::params::ParamSet;
use super::{Real, Tensor};
use crate::error::{dim_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig<T: Real = f64> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Real> Default for AdamConfig<T> {
    fn default() -> Self {
        Self {
            lr: T::lit(1e-3),
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
        }
    }
}

/// Bias-corrected Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Real = f64> {
    pub config: AdamConfig<T>,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig<T>) -> Self {
        Self {
            config,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update from the gradients stored on `params`. Parameters without
    /// a gradient are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, t)| vec![T::zero(); t.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(dim_err(format!(
                "optimizer tracks {} tensors, parameter set has {}",
                self.m.len(),
                params.len()
            )));
        }
        for (k, (name, t)) in params.iter().enumerate() {
            if t.len() != self.m[k].len() {
                return Err(dim_err(format!("moment buffer size differs for {}", name)));
            }
            if let Some(g) = &t.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!("gradient of parameter {}", name)));
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let t_step = self.step as i32;
        let bc1 = T::one() - c.beta1.powi(t_step);
        let bc2 = T::one() - c.beta2.powi(t_step);
        let (ib1, ib2) = (T::one() / bc1, T::one() / bc2);
        let (b1, b2) = (c.beta1, c.beta2);
        let (a1, a2) = (T::one() - b1, T::one() - b2);
        for (k, (_, t)) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let Some(g) = t.grad.take() else {
                // zero gradient still decays the moments
                m.iter_mut().for_each(|x| *x *= b1);
                v.iter_mut().for_each(|x| *x *= b2);
                continue;
            };
            for (((p, m), v), &g) in t.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(&g) {
                *m = b1 * *m + a1 * g;
                *v = b2 * *v + a2 * g * g;
                *p -= c.lr * (*m * ib1) / ((*v * ib2).sqrt() + c.eps);
            }
            t.grad = Some(g);
        }
        Ok(())
    }

    pub fn export(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![(
            format!("{prefix}.step"),
            Tensor::scalar(T::from_u64(self.step).unwrap()),
        )];
        for (k, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            out.push((
                format!("{prefix}.m.{k}"),
                Tensor::new(&[m.len()], m.clone()).unwrap(),
            ));
            out.push((
                format!("{prefix}.v.{k}"),
                Tensor::new(&[v.len()], v.clone()).unwrap(),
            ));
        }
        out
    }

    pub fn import(&mut self, prefix: &str, find: &dyn Fn(&str) -> Option<Tensor<T>>) -> Result<()> {
        let step = find(&format!("{prefix}.step"))
            .ok_or_else(|| Error::Config(format!("missing optimizer state {prefix}.step")))?;
        self.step = step.data()[0].to_f64_lossy() as u64;
        self.m.clear();
        self.v.clear();
        let mut k = 0;
        while let Some(m) = find(&format!("{prefix}.m.{k}")) {
            let v = find(&format!("{prefix}.v.{k}"))
                .ok_or_else(|| Error::Config(format!("missing {prefix}.v.{k}")))?;
            self.m.push(m.into_data());
            self.v.push(v.into_data());
            k += 1;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LbfgsConfig<T: Real = f64> {
    pub memory: usize,
    pub max_line_search: usize,
    /// Sufficient-decrease constant.
    pub c1: T,
    /// Upper bound on the length of the first (unscaled) step.
    pub initial_step: T,
}

impl<T: Real> Default for LbfgsConfig<T> {
    fn default() -> Self {
        Self {
            memory: 10,
            max_line_search: 25,
            c1: T::lit(1e-4),
            initial_step: T::one(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LbfgsOutcome<T: Real = f64> {
    Accepted { loss_before: T, loss_after: T, step_size: T },
    /// Gradient is exactly zero; parameters were not touched.
    Stationary { loss: T },
}

/// Limited-memory BFGS with two-loop recursion and Armijo backtracking.
#[derive(Clone, Debug, PartialEq)]
pub struct Lbfgs<T: Real = f64> {
    pub config: LbfgsConfig<T>,
    s: VecDeque<Vec<T>>,
    y: VecDeque<Vec<T>>,
    step: u64,
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

impl<T: Real> Lbfgs<T> {
    pub fn new(config: LbfgsConfig<T>) -> Self {
        Self {
            config,
            s: VecDeque::new(),
            y: VecDeque::new(),
            step: 0,
        }
    }

    pub fn history_len(&self) -> usize {
        self.s.len()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn clear_history(&mut self) {
        self.s.clear();
        self.y.clear();
    }

    fn direction(&self, g: &[T]) -> Vec<T> {
        let n = self.s.len();
        let mut q = g.to_vec();
        let mut alpha = vec![T::zero(); n];
        let mut rho = vec![T::zero(); n];
        for i in (0..n).rev() {
            rho[i] = T::one() / dot(&self.y[i], &self.s[i]);
            alpha[i] = rho[i] * dot(&self.s[i], &q);
            for (qj, &yj) in q.iter_mut().zip(&self.y[i]) {
                *qj -= alpha[i] * yj;
            }
        }
        let gamma = match (self.s.back(), self.y.back()) {
            (Some(s), Some(y)) => dot(s, y) / dot(y, y),
            _ => {
                let gn = dot(g, g).sqrt();
                self.config.initial_step / gn.max(self.config.initial_step)
            }
        };
        q.iter_mut().for_each(|v| *v *= gamma);
        for i in 0..n {
            let beta = rho[i] * dot(&self.y[i], &q);
            for (qj, &sj) in q.iter_mut().zip(&self.s[i]) {
                *qj += (alpha[i] - beta) * sj;
            }
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }

    /// One quasi-Newton step on `x`. `eval` returns the loss and gradient.
    ///
    /// On line-search failure `x` is left unchanged, the curvature history is
    /// cleared and [`Error::LineSearch`] is returned.
    pub fn step<F>(&mut self, x: &mut [T], mut eval: F) -> Result<LbfgsOutcome<T>>
    where
        F: FnMut(&[T]) -> Result<(T, Vec<T>)>,
    {
        let (f0, g0) = eval(x)?;
        if g0.len() != x.len() {
            return Err(dim_err("gradient length differs from parameter length"));
        }
        if !f0.is_finite() || g0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("L-BFGS start point".into()));
        }
        if g0.iter().all(|&v| v == T::zero()) {
            return Ok(LbfgsOutcome::Stationary { loss: f0 });
        }
        let mut d = self.direction(&g0);
        let mut slope = dot(&g0, &d);
        if !(slope < T::zero()) {
            self.clear_history();
            d = self.direction(&g0);
            slope = dot(&g0, &d);
        }
        let mut alpha = T::one();
        let mut trial = x.to_vec();
        for _ in 0..self.config.max_line_search {
            for j in 0..x.len() {
                trial[j] = x[j] + alpha * d[j];
            }
            let (f1, g1) = eval(&trial)?;
            if f1.is_finite() && f1 <= f0 + self.config.c1 * alpha * slope {
                let s: Vec<T> = d.iter().map(|&v| alpha * v).collect();
                let y: Vec<T> = g1.iter().zip(&g0).map(|(&a, &b)| a - b).collect();
                if dot(&s, &y) > T::zero() {
                    self.s.push_back(s);
                    self.y.push_back(y);
                    while self.s.len() > self.config.memory {
                        self.s.pop_front();
                        self.y.pop_front();
                    }
                }
                x.copy_from_slice(&trial);
                self.step += 1;
                return Ok(LbfgsOutcome::Accepted {
                    loss_before: f0,
                    loss_after: f1,
                    step_size: alpha,
                });
            }
            alpha *= T::lit(0.5);
        }
        self.clear_history();
        Err(Error::LineSearch(self.config.max_line_search))
    }

    pub fn export(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![(
            format!("{prefix}.step"),
            Tensor::scalar(T::from_u64(self.step).unwrap()),
        )];
        for (k, (s, y)) in self.s.iter().zip(&self.y).enumerate() {
            out.push((format!("{prefix}.s.{k}"), Tensor::new(&[s.len()], s.clone()).unwrap()));
            out.push((format!("{prefix}.y.{k}"), Tensor::new(&[y.len()], y.clone()).unwrap()));
        }
        out
    }

    pub fn import(&mut self, prefix: &str, find: &dyn Fn(&str) -> Option<Tensor<T>>) -> Result<()> {
        let step = find(&format!("{prefix}.step"))
            .ok_or_else(|| Error::Config(format!("missing optimizer state {prefix}.step")))?;
        self.step = step.data()[0].to_f64_lossy() as u64;
        self.clear_history();
        let mut k = 0;
        while let Some(s) = find(&format!("{prefix}.s.{k}")) {
            let y = find(&format!("{prefix}.y.{k}"))
                .ok_or_else(|| Error::Config(format!("missing {prefix}.y.{k}")))?;
            self.s.push_back(s.into_data());
            self.y.push_back(y.into_data());
            k += 1;
        }
        Ok(())
    }
}

/// State of either optimizer, tagged by variant.
#[derive(Clone, Debug, PartialEq)]
pub enum OptimizerState<T: Real = f64> {
    Adam(Adam<T>),
    Lbfgs(Lbfgs<T>),
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64, grad: f64) -> ParamSet {
        let mut p = ParamSet::new();
        let mut t = Tensor::new(&[1], vec![value]).unwrap().with_grad();
        t.grad = Some(vec![grad]);
        p.push("w", t);
        p
    }

    #[test]
    fn adam_zero_grad_is_noop() {
        let mut p = single(1.5, 0.0);
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut p).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.5]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = single(0.0, 1.0);
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            ..Default::default()
        });
        opt.step(&mut p).unwrap();
        // m_hat / sqrt(v_hat) == 1, so the move is lr / (1 + eps)
        let moved = p.get("w").unwrap().data()[0];
        assert!((moved + 0.1).abs() < 1e-8, "{moved}");
    }

    #[test]
    fn adam_constant_gradient_drifts_monotonically() {
        let mut p = single(0.0, 0.5);
        let mut opt = Adam::new(AdamConfig::default());
        let mut prev = 0.0;
        for _ in 0..50 {
            opt.step(&mut p).unwrap();
            let now = p.get("w").unwrap().data()[0];
            assert!(now < prev);
            prev = now;
            p.iter_mut().for_each(|(_, t)| t.grad = Some(vec![0.5]));
        }
    }

    #[test]
    fn adam_rejects_nan_with_name() {
        let mut p = single(0.0, f64::NAN);
        let mut opt = Adam::new(AdamConfig::default());
        match opt.step(&mut p) {
            Err(Error::Numeric(msg)) => assert!(msg.contains('w')),
            other => panic!("{other:?}"),
        }
    }

    fn quad(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((0.5 * dot(x, x), x.to_vec()))
    }

    #[test]
    fn lbfgs_quadratic_converges() {
        let mut x = vec![3.0, 4.0];
        let mut opt = Lbfgs::new(LbfgsConfig::default());
        for _ in 0..20 {
            match opt.step(&mut x, quad).unwrap() {
                LbfgsOutcome::Stationary { .. } => break,
                LbfgsOutcome::Accepted { .. } => {}
            }
        }
        assert!(dot(&x, &x).sqrt() <= 1e-8, "{x:?}");
        assert!(opt.history_len() <= 10);
    }

    #[test]
    fn lbfgs_stationary_does_not_move() {
        let mut x = vec![0.0, 0.0];
        let mut opt = Lbfgs::new(LbfgsConfig::default());
        let out = opt.step(&mut x, quad).unwrap();
        assert!(matches!(out, LbfgsOutcome::Stationary { .. }));
        assert_eq!(x, vec![0.0, 0.0]);
    }

    #[test]
    fn lbfgs_rosenbrock_monotone() {
        let rosen = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let (a, b) = (x[0], x[1]);
            let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![
                -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                200.0 * (b - a * a),
            ];
            Ok((f, g))
        };
        let mut x = vec![-1.2, 1.0];
        let mut opt = Lbfgs::new(LbfgsConfig::default());
        let mut last = rosen(&x).unwrap().0;
        for _ in 0..200 {
            match opt.step(&mut x, rosen) {
                Ok(LbfgsOutcome::Accepted { loss_after, .. }) => {
                    assert!(loss_after <= last);
                    last = loss_after;
                }
                Ok(LbfgsOutcome::Stationary { .. }) => break,
                Err(Error::LineSearch(_)) => break,
                Err(e) => panic!("{e}"),
            }
        }
        assert!(last < 1e-8, "final {last} at {x:?}");
    }

    #[test]
    fn lbfgs_line_search_failure_clears_history() {
        // loss that never decreases along any direction
        let bad = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let moved = x.iter().any(|&v| v != 1.0);
            Ok((if moved { 10.0 } else { 1.0 }, vec![1.0; x.len()]))
        };
        let mut x = vec![1.0, 1.0];
        let mut opt = Lbfgs::new(LbfgsConfig {
            max_line_search: 5,
            ..Default::default()
        });
        assert!(matches!(opt.step(&mut x, bad), Err(Error::LineSearch(5))));
        assert_eq!(x, vec![1.0, 1.0]);
        assert_eq!(opt.history_len(), 0);
    }
}
