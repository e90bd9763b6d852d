//! Space-time field containers, both as plain data and as graph handles.

use crate::error::{dim_err, Error, Result};
use crate::{Graph, Tensor, Var};

/// Dense `[time, channel, y, x]` array of solution snapshots.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSequence {
    data: Tensor,
}

impl FieldSequence {
    pub fn zeros(nt: usize, channels: usize, h: usize, w: usize) -> Self {
        Self {
            data: Tensor::zeros(&[nt, channels, h, w]),
        }
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        if t.rank() != 4 {
            return Err(dim_err(format!(
                "field sequence needs rank 4, got {:?}",
                t.shape()
            )));
        }
        Ok(Self { data: t })
    }

    /// Builds a sequence from `[channel, y, x]` snapshots.
    pub fn from_slices(slices: &[Tensor]) -> Result<Self> {
        let t = Tensor::stack(slices)?;
        Self::from_tensor(t)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn nt(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn h(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn w(&self) -> usize {
        self.data.shape()[3]
    }

    pub fn plane_len(&self) -> usize {
        self.h() * self.w()
    }

    fn plane_offset(&self, t: usize, c: usize) -> usize {
        (t * self.channels() + c) * self.plane_len()
    }

    pub fn plane(&self, t: usize, c: usize) -> &[f64] {
        let o = self.plane_offset(t, c);
        &self.data.data()[o..o + self.plane_len()]
    }

    pub fn plane_mut(&mut self, t: usize, c: usize) -> &mut [f64] {
        let o = self.plane_offset(t, c);
        let n = self.plane_len();
        &mut self.data.data_mut()[o..o + n]
    }

    pub fn plane_tensor(&self, t: usize, c: usize) -> Tensor {
        Tensor::new(&[self.h(), self.w()], self.plane(t, c).to_vec()).unwrap()
    }

    /// `[channel, y, x]` snapshot at time index `t`.
    pub fn slice(&self, t: usize) -> Tensor {
        self.data.index_first(t).unwrap()
    }

    pub fn set_slice(&mut self, t: usize, snapshot: &Tensor) -> Result<()> {
        let n = self.channels() * self.plane_len();
        if snapshot.len() != n {
            return Err(dim_err(format!(
                "snapshot of {} values for slices of {}",
                snapshot.len(),
                n
            )));
        }
        let o = t * n;
        self.data.data_mut()[o..o + n].copy_from_slice(snapshot.data());
        Ok(())
    }

    pub fn at(&self, t: usize, c: usize, i: usize, j: usize) -> f64 {
        self.plane(t, c)[i * self.w() + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.is_finite()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.data.shape() == other.data.shape()
    }
}

/// Graph handles for a sequence: `planes[t][c]` is a `[h, w]` node.
#[derive(Clone, Debug)]
pub struct SeqVars {
    pub planes: Vec<Vec<Var>>,
    pub h: usize,
    pub w: usize,
}

impl SeqVars {
    pub fn nt(&self) -> usize {
        self.planes.len()
    }

    pub fn channels(&self) -> usize {
        self.planes.first().map_or(0, |s| s.len())
    }

    /// Records every plane of `seq` as a constant.
    pub fn constant(g: &mut Graph, seq: &FieldSequence) -> Self {
        let planes = (0..seq.nt())
            .map(|t| {
                (0..seq.channels())
                    .map(|c| g.constant(&seq.plane_tensor(t, c)))
                    .collect()
            })
            .collect();
        Self {
            planes,
            h: seq.h(),
            w: seq.w(),
        }
    }

    /// Reads the current values back into a plain sequence.
    pub fn values(&self, g: &Graph) -> Result<FieldSequence> {
        let (nt, nc) = (self.nt(), self.channels());
        if nt == 0 {
            return Err(Error::Degenerate("empty sequence".into()));
        }
        let mut out = FieldSequence::zeros(nt, nc, self.h, self.w);
        for t in 0..nt {
            for c in 0..nc {
                out.plane_mut(t, c).copy_from_slice(g.value(self.planes[t][c]));
            }
        }
        Ok(out)
    }
}
