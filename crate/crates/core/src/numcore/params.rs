use super::{Graph, Real, Tensor, Var};
use crate::error::{dim_err, Result};

/// Ordered set of named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T: Real = f64> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.entries.push((name.into(), tensor.with_grad()));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Records every tensor as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.entries.iter().map(|(_, t)| g.leaf(t)).collect()
    }

    /// Records every tensor as a constant (no gradient flows back).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.entries.iter().map(|(_, t)| g.constant(t)).collect()
    }

    /// Accumulates the leaf gradients of `vars` (from [`ParamSet::bind`]).
    pub fn collect_grads(&mut self, g: &Graph<T>, vars: &[Var]) -> Result<()> {
        if vars.len() != self.entries.len() {
            return Err(dim_err("bound variable count differs from parameter count"));
        }
        for ((_, t), &v) in self.entries.iter_mut().zip(vars) {
            match g.grad(v) {
                Some(gr) => t.accumulate_grad(gr)?,
                None => t.accumulate_grad(&vec![T::zero(); t.len()])?,
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.entries.iter_mut().for_each(|(_, t)| t.zero_grad());
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.numel());
        for (_, t) in &self.entries {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn flat_grad(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.numel());
        for (_, t) in &self.entries {
            match &t.grad {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat_n(T::zero(), t.len())),
            }
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(dim_err(format!(
                "flat vector of {} for {} parameters",
                flat.len(),
                self.numel()
            )));
        }
        let mut off = 0;
        for (_, t) in &mut self.entries {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}
