//! Decoder-only transformer over whole-field tokens.
//!
//! Each time slice is flattened and projected to one token. A stack of
//! pre-norm blocks with causal multi-head attention maps the token history to
//! the next slice. [`Model::rollout_vars`] runs the autoregressive loop
//! incrementally, caching each layer's keys and values; because position `k`
//! only ever attends to positions `<= k` this is the same computation as
//! re-decoding the full prefix every step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::field::{FieldSequence, SeqVars};
use crate::problems::PDEProblem;
use crate::{Graph, ParamSet, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_steps: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    /// Predict `u_{t+1} - u_t` instead of `u_{t+1}`.
    pub increment: bool,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults for a problem's field shape.
    pub fn for_problem(prob: &PDEProblem) -> Self {
        Self {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            max_steps: prob.domain.nt,
            channels: prob.channels(),
            h: prob.domain.ny,
            w: prob.domain.nx,
            increment: false,
            seed: 0,
        }
    }

    pub fn field_len(&self) -> usize {
        self.channels * self.h * self.w
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.d_ff,
            self.max_steps,
            self.channels,
            self.h,
            self.w,
        ];
        if positive.contains(&0) {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Tokens `[steps, d_model]` and the time index of each row.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub times: Vec<usize>,
}

#[derive(Clone, Copy, Debug)]
struct LayerVars {
    ln1_g: Var,
    ln1_b: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    bo: Var,
    ln2_g: Var,
    ln2_b: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

/// Parameters recorded on a graph.
#[derive(Clone, Debug)]
pub struct ModelVars {
    /// In [`ParamSet`] order, for gradient collection.
    pub all: Vec<Var>,
    embed: Var,
    pos: Var,
    layers: Vec<LayerVars>,
    ln_g: Var,
    ln_b: Var,
    head_w: Var,
    head_b: Var,
}

/// Additive perturbations injected into the raw prediction of given steps.
pub type Overrides = [(usize, Vec<Var>)];

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
}

const LAYER_PARAMS: usize = 13;

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (d, f, p) = (cfg.d_model, cfg.d_ff, cfg.field_len());
        let mut params = ParamSet::new();
        let mut uniform = |shape: &[usize], fan_in: usize| {
            let a = 1.0 / (fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-a..a)).collect();
            Tensor::new(shape, data).unwrap()
        };
        params.push("embed.w", uniform(&[p, d], p));
        params.push("embed.pos", uniform(&[cfg.max_steps, d], d));
        for l in 0..cfg.n_layers {
            let name = |s: &str| format!("layer{l}.{s}");
            params.push(name("ln1.g"), Tensor::full(&[d], 1.0));
            params.push(name("ln1.b"), Tensor::zeros(&[d]));
            params.push(name("wq"), uniform(&[d, d], d));
            params.push(name("wk"), uniform(&[d, d], d));
            params.push(name("wv"), uniform(&[d, d], d));
            params.push(name("wo"), uniform(&[d, d], d));
            params.push(name("bo"), Tensor::zeros(&[d]));
            params.push(name("ln2.g"), Tensor::full(&[d], 1.0));
            params.push(name("ln2.b"), Tensor::zeros(&[d]));
            params.push(name("w1"), uniform(&[d, f], d));
            params.push(name("b1"), Tensor::zeros(&[f]));
            params.push(name("w2"), uniform(&[f, d], f));
            params.push(name("b2"), Tensor::zeros(&[d]));
        }
        params.push("head.ln.g", Tensor::full(&[d], 1.0));
        params.push("head.ln.b", Tensor::zeros(&[d]));
        params.push("head.w", uniform(&[d, p], d));
        params.push("head.b", Tensor::zeros(&[p]));
        Ok(Self { cfg, params })
    }

    /// Records the parameters on `g`; `trainable` controls whether they
    /// receive gradients.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ModelVars {
        let all = if trainable {
            self.params.bind(g)
        } else {
            self.params.bind_frozen(g)
        };
        let layers = (0..self.cfg.n_layers)
            .map(|l| {
                let v = &all[2 + l * LAYER_PARAMS..2 + (l + 1) * LAYER_PARAMS];
                LayerVars {
                    ln1_g: v[0],
                    ln1_b: v[1],
                    wq: v[2],
                    wk: v[3],
                    wv: v[4],
                    wo: v[5],
                    bo: v[6],
                    ln2_g: v[7],
                    ln2_b: v[8],
                    w1: v[9],
                    b1: v[10],
                    w2: v[11],
                    b2: v[12],
                }
            })
            .collect();
        let t = 2 + self.cfg.n_layers * LAYER_PARAMS;
        ModelVars {
            embed: all[0],
            pos: all[1],
            layers,
            ln_g: all[t],
            ln_b: all[t + 1],
            head_w: all[t + 2],
            head_b: all[t + 3],
            all,
        }
    }

    fn check_field(&self, c: usize, h: usize, w: usize) -> Result<()> {
        let cfg = &self.cfg;
        if (c, h, w) != (cfg.channels, cfg.h, cfg.w) {
            return Err(dim_err(format!(
                "field [{c}, {h}, {w}] does not match model [{}, {}, {}]",
                cfg.channels, cfg.h, cfg.w
            )));
        }
        Ok(())
    }

    /// Token for one flattened slice `[1, P]` at time index `k`.
    fn embed_var(&self, g: &mut Graph, mv: &ModelVars, flat: Var, k: usize) -> Result<Var> {
        let d = self.cfg.d_model;
        let x = g.matmul(flat, mv.embed)?;
        let pos = g.slice(mv.pos, k * d, &[1, d])?;
        g.add(x, pos)
    }

    pub fn embed_fields(&self, seq: &FieldSequence) -> Result<TokenSequence> {
        self.check_field(seq.channels(), seq.h(), seq.w())?;
        if seq.nt() > self.cfg.max_steps {
            return Err(Error::Capacity(format!(
                "{} slices exceed max_steps {}",
                seq.nt(),
                self.cfg.max_steps
            )));
        }
        let mut g = Graph::new();
        let mv = self.bind(&mut g, false);
        let p = self.cfg.field_len();
        let mut rows = Vec::with_capacity(seq.nt());
        for k in 0..seq.nt() {
            let flat = g.constant(&seq.slice(k).reshape(&[1, p])?);
            rows.push(self.embed_var(&mut g, &mv, flat, k)?);
        }
        let tokens = g.concat_rows(&rows)?;
        Ok(TokenSequence {
            tokens: g.tensor(tokens),
            times: (0..seq.nt()).collect(),
        })
    }

    /// Attention of `q [m, d]` against `k, v [n, d]` with the causal offset
    /// rule of [`Graph::softmax_rows`]. Returns the mixed values and the
    /// per-head weight matrices.
    fn attention(&self, g: &mut Graph, q: Var, k: Var, v: Var) -> Result<(Var, Vec<Var>)> {
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.n_heads);
        let mut weights = Vec::with_capacity(self.cfg.n_heads);
        for h in 0..self.cfg.n_heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let s = g.matmul(qh, kt)?;
            let s = g.scale(s, scale);
            let a = g.softmax_rows(s, true)?;
            heads.push(g.matmul(a, vh)?);
            weights.push(a);
        }
        Ok((g.concat_cols(&heads)?, weights))
    }

    fn feed_forward(&self, g: &mut Graph, lv: &LayerVars, x: Var) -> Result<Var> {
        let h = g.layer_norm(x, lv.ln2_g, lv.ln2_b)?;
        let h = g.matmul(h, lv.w1)?;
        let h = g.add_row(h, lv.b1)?;
        let h = g.tanh(h);
        let h = g.matmul(h, lv.w2)?;
        let h = g.add_row(h, lv.b2)?;
        g.add(x, h)
    }

    fn check_finite(g: &Graph, x: Var, layer: usize) -> Result<()> {
        if g.value(x).iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite activation after layer {layer}")))
        }
    }

    fn head(&self, g: &mut Graph, mv: &ModelVars, last: Var) -> Result<Var> {
        let h = g.layer_norm(last, mv.ln_g, mv.ln_b)?;
        let o = g.matmul(h, mv.head_w)?;
        g.add_row(o, mv.head_b)
    }

    /// Full causal decode of `tokens [s, d]`. Returns the flattened
    /// prediction for the slice after the last token `[1, P]` and the
    /// attention weights `[layer][head]`.
    pub fn decode_vars(&self, g: &mut Graph, mv: &ModelVars, tokens: Var) -> Result<(Var, Vec<Vec<Var>>)> {
        let s = g.shape(tokens).to_vec();
        if s.len() != 2 || s[1] != self.cfg.d_model || s[0] == 0 {
            return Err(dim_err(format!("tokens {:?} for d_model {}", s, self.cfg.d_model)));
        }
        if s[0] > self.cfg.max_steps {
            return Err(Error::Capacity(format!(
                "{} tokens exceed max_steps {}",
                s[0], self.cfg.max_steps
            )));
        }
        let mut x = tokens;
        let mut all_w = Vec::with_capacity(self.cfg.n_layers);
        for (l, lv) in mv.layers.iter().enumerate() {
            let h = g.layer_norm(x, lv.ln1_g, lv.ln1_b)?;
            let q = g.matmul(h, lv.wq)?;
            let k = g.matmul(h, lv.wk)?;
            let v = g.matmul(h, lv.wv)?;
            let (a, w) = self.attention(g, q, k, v)?;
            let a = g.matmul(a, lv.wo)?;
            let a = g.add_row(a, lv.bo)?;
            x = g.add(x, a)?;
            x = self.feed_forward(g, lv, x)?;
            Self::check_finite(g, x, l)?;
            all_w.push(w);
        }
        let last = g.slice(x, (s[0] - 1) * self.cfg.d_model, &[1, self.cfg.d_model])?;
        Ok((self.head(g, mv, last)?, all_w))
    }

    /// Next-slice prediction `[channels, h, w]` from a token sequence.
    pub fn decode_step(&self, tokens: &TokenSequence) -> Result<Tensor> {
        let mut g = Graph::new();
        let mv = self.bind(&mut g, false);
        let t = g.constant(&tokens.tokens);
        let (out, _) = self.decode_vars(&mut g, &mv, t)?;
        g.tensor(out).reshape(&[self.cfg.channels, self.cfg.h, self.cfg.w])
    }

    fn split_planes(&self, g: &mut Graph, flat: Var) -> Result<Vec<Var>> {
        let hw = self.cfg.h * self.cfg.w;
        (0..self.cfg.channels)
            .map(|c| g.slice(flat, c * hw, &[self.cfg.h, self.cfg.w]))
            .collect()
    }

    /// Autoregressive rollout from the problem's initial data for `n_steps`
    /// steps. Each predicted slice is gauged, hard-constrained and fed back
    /// as the next token. Returns `n_steps + 1` slices.
    pub fn rollout_vars(
        &self,
        g: &mut Graph,
        mv: &ModelVars,
        prob: &PDEProblem,
        n_steps: usize,
        overrides: &Overrides,
    ) -> Result<SeqVars> {
        let cfg = &self.cfg;
        self.check_field(prob.channels(), prob.domain.ny, prob.domain.nx)?;
        if n_steps + 1 > cfg.max_steps {
            return Err(Error::Capacity(format!(
                "rollout of {} steps needs max_steps >= {}",
                n_steps,
                n_steps + 1
            )));
        }
        let (d, p) = (cfg.d_model, cfg.field_len());
        let raw0: Vec<Var> = {
            let zero = g.constant(&Tensor::zeros(&[cfg.h, cfg.w]));
            vec![zero; cfg.channels]
        };
        let first = prob.constrain_step(g, 0, &raw0)?;
        let mut planes = vec![first];
        let mut keys: Vec<Vec<Var>> = vec![Vec::new(); cfg.n_layers];
        let mut values: Vec<Vec<Var>> = vec![Vec::new(); cfg.n_layers];
        for k in 0..n_steps {
            let flat = g.concat(&planes[k], &[1, p])?;
            let mut x = self.embed_var(g, mv, flat, k)?;
            for (l, lv) in mv.layers.iter().enumerate() {
                let h = g.layer_norm(x, lv.ln1_g, lv.ln1_b)?;
                let q = g.matmul(h, lv.wq)?;
                keys[l].push(g.matmul(h, lv.wk)?);
                values[l].push(g.matmul(h, lv.wv)?);
                let kc = g.concat_rows(&keys[l])?;
                let vc = g.concat_rows(&values[l])?;
                let (a, _) = self.attention(g, q, kc, vc)?;
                let a = g.matmul(a, lv.wo)?;
                let a = g.add_row(a, lv.bo)?;
                x = g.add(x, a)?;
                x = self.feed_forward(g, lv, x)?;
                Self::check_finite(g, x, l)?;
            }
            debug_assert_eq!(g.shape(x), &[1, d]);
            let out = self.head(g, mv, x)?;
            let mut pred = self.split_planes(g, out)?;
            if cfg.increment {
                for (c, v) in pred.iter_mut().enumerate() {
                    *v = g.add(*v, planes[k][c])?;
                }
            }
            for (step, delta) in overrides {
                if *step == k + 1 {
                    if delta.len() != cfg.channels {
                        return Err(dim_err("override plane count differs from channels"));
                    }
                    for (c, v) in pred.iter_mut().enumerate() {
                        *v = g.add(*v, delta[c])?;
                    }
                }
            }
            let pred = prob.gauge_step(g, &pred)?;
            planes.push(prob.constrain_step(g, k + 1, &pred)?);
        }
        Ok(SeqVars {
            planes,
            h: cfg.h,
            w: cfg.w,
        })
    }

    /// Plain rollout with frozen parameters.
    pub fn rollout(&self, prob: &PDEProblem, n_steps: usize) -> Result<FieldSequence> {
        let mut g = Graph::new();
        let mv = self.bind(&mut g, false);
        let seq = self.rollout_vars(&mut g, &mv, prob, n_steps, &[])?;
        seq.values(&g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdops::{Boundary, DomainSpec};
    use crate::problems::{ACParams, NSParams};

    fn tiny_problem() -> PDEProblem {
        let d = DomainSpec::square(6, 1.0, 6, 0.01, Boundary::Periodic).unwrap();
        PDEProblem::allen_cahn(d, ACParams { eps: 0.3, phi: 1.0 }, 0.3).unwrap()
    }

    fn tiny_model(prob: &PDEProblem, seed: u64) -> Model {
        let cfg = ModelConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 12,
            seed,
            ..ModelConfig::for_problem(prob)
        };
        Model::new(cfg).unwrap()
    }

    #[test]
    fn config_validation() {
        let prob = tiny_problem();
        let mut cfg = ModelConfig::for_problem(&prob);
        cfg.n_heads = 3;
        assert!(matches!(Model::new(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn embedding_linearity() {
        let prob = tiny_problem();
        let mut m = tiny_model(&prob, 1);
        let seq = FieldSequence::from_tensor(Tensor::from_fn(&[2, 1, 6, 6], |i| {
            (i[0] + 1) as f64 * ((i[2] * 6 + i[3]) as f64).sin()
        }))
        .unwrap();
        let a = m.embed_fields(&seq).unwrap();
        assert_ne!(a.tokens.index_first(0).unwrap(), a.tokens.index_first(1).unwrap());

        let pos = m.params.get("embed.pos").unwrap().clone();
        let zeros = FieldSequence::zeros(2, 1, 6, 6);
        let z = m.embed_fields(&zeros).unwrap();
        assert_eq!(z.tokens.data(), &pos.data()[..16]);

        let scaled = FieldSequence::from_tensor(seq.tensor().map(|v| 3.0 * v)).unwrap();
        let b = m.embed_fields(&scaled).unwrap();
        for i in 0..16 {
            let pre_a = a.tokens.data()[i] - pos.data()[i];
            let pre_b = b.tokens.data()[i] - pos.data()[i];
            assert!((pre_b - 3.0 * pre_a).abs() < 1e-12);
        }

        m.params.get_mut("embed.w").unwrap().data_mut().fill(0.0);
        let t = m.embed_fields(&seq).unwrap();
        assert_eq!(t.tokens.data(), &pos.data()[..16]);
    }

    #[test]
    fn capacity_error() {
        let prob = tiny_problem();
        let m = tiny_model(&prob, 0);
        let long = FieldSequence::zeros(7, 1, 6, 6);
        assert!(matches!(m.embed_fields(&long), Err(Error::Capacity(_))));
        assert!(matches!(m.rollout(&prob, 6), Err(Error::Capacity(_))));
    }

    #[test]
    fn attention_rows_normalized_and_masked() {
        let prob = tiny_problem();
        let m = tiny_model(&prob, 2);
        let mut g = Graph::new();
        let mv = m.bind(&mut g, false);
        let tokens = g.constant(&Tensor::from_fn(&[4, 8], |i| ((i[0] * 8 + i[1]) as f64 * 0.37).cos()));
        let (_, w) = m.decode_vars(&mut g, &mv, tokens).unwrap();
        for layer in &w {
            for &a in layer {
                let v = g.value(a);
                for i in 0..4 {
                    let row = &v[i * 4..(i + 1) * 4];
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    assert!(row[i + 1..].iter().all(|&x| x == 0.0));
                }
            }
        }
    }

    #[test]
    fn single_token_ignores_mask() {
        let prob = tiny_problem();
        let m = tiny_model(&prob, 3);
        let mut g = Graph::new();
        let mv = m.bind(&mut g, false);
        let t = g.constant(&Tensor::from_fn(&[1, 8], |i| i[1] as f64 * 0.1));
        let (_, w) = m.decode_vars(&mut g, &mv, t).unwrap();
        for a in w.iter().flatten() {
            assert_eq!(g.value(*a), &[1.0]);
        }
    }

    #[test]
    fn incremental_rollout_matches_full_decode() {
        let prob = tiny_problem();
        let m = tiny_model(&prob, 4);
        let seq = m.rollout(&prob, 5).unwrap();
        assert_eq!(seq.tensor().shape(), &[6, 1, 6, 6]);
        for k in 1..6 {
            let prefix = FieldSequence::from_slices(&(0..k).map(|t| seq.slice(t)).collect::<Vec<_>>()).unwrap();
            let next = m.decode_step(&m.embed_fields(&prefix).unwrap()).unwrap();
            for (a, b) in next.data().iter().zip(seq.slice(k).data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert_eq!(m.rollout(&prob, 5).unwrap(), seq);
    }

    #[test]
    fn zero_step_rollout_is_initial_slice() {
        let prob = tiny_problem();
        let m = tiny_model(&prob, 5);
        let seq = m.rollout(&prob, 0).unwrap();
        assert_eq!(seq.nt(), 1);
        assert_eq!(seq.slice(0), prob.ic);
    }

    #[test]
    fn navier_stokes_pressure_is_gauged() {
        let d = DomainSpec::square(4, 6.0, 4, 0.1, Boundary::Periodic).unwrap();
        let prob = PDEProblem::navier_stokes(d, NSParams { re: 10.0, rho: 1.0, nu: 1.0 }).unwrap();
        let cfg = ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 8,
            ..ModelConfig::for_problem(&prob)
        };
        let m = Model::new(cfg).unwrap();
        let seq = m.rollout(&prob, 3).unwrap();
        for t in 1..4 {
            let mean: f64 = seq.plane(t, 2).iter().sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-14);
        }
    }
}
