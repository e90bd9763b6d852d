//! Collocation point samplers: the residual-guided GAN, the labeling
//! strategies that define its "real" points, and non-adversarial baselines.
//!
//! Residual cells are the nodes of the interior time slices `1..nt-1`; cell
//! `(r, i, j)` sits at `(t_{r+1}, x_j, y_i)`.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::fdops::{Boundary, DomainSpec};
use crate::field::FieldSequence;
use crate::numcore::{Adam, AdamConfig};
use crate::{Graph, ParamSet, Tensor, Var};

pub type Coord = (f64, f64, f64);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointBatch {
    pub coords: Vec<Coord>,
    pub residual: Vec<f64>,
    pub label: Vec<f64>,
    pub d_score: Vec<f64>,
    pub accepted: Vec<bool>,
}

impl PointBatch {
    /// Coordinates only; every other field zeroed and nothing accepted.
    pub fn from_coords(coords: Vec<Coord>) -> Self {
        let n = coords.len();
        Self {
            coords,
            residual: vec![0.0; n],
            label: vec![0.0; n],
            d_score: vec![0.0; n],
            accepted: vec![false; n],
        }
    }

    /// Batch whose points are all accepted with score 1.
    pub fn accepted_from(coords: &[Coord]) -> Self {
        let mut b = Self::from_coords(coords.to_vec());
        b.d_score.fill(1.0);
        b.accepted.fill(true);
        b
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn accepted_count(&self) -> usize {
        self.accepted.iter().filter(|&&a| a).count()
    }

    pub fn accepted_coords(&self) -> Vec<Coord> {
        self.coords
            .iter()
            .zip(&self.accepted)
            .filter(|(_, &a)| a)
            .map(|(c, _)| *c)
            .collect()
    }

    pub fn accepted_scores(&self) -> Vec<f64> {
        self.d_score
            .iter()
            .zip(&self.accepted)
            .filter(|(_, &a)| a)
            .map(|(d, _)| *d)
            .collect()
    }

    /// Fills `residual` and `label` from the nearest residual cell.
    pub fn annotate(&mut self, mags: &[f64], labels: Option<&[f64]>, spec: &DomainSpec) {
        for (k, c) in self.coords.iter().enumerate() {
            let idx = cell_index(*c, spec);
            self.residual[k] = mags[idx];
            self.label[k] = labels.map_or(0.0, |l| l[idx]);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LabelStrategy {
    Random,
    Uniform,
    Normalization,
    MultiLabel,
    Sparse,
}

impl LabelStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelStrategy::Random => "random",
            LabelStrategy::Uniform => "uniform",
            LabelStrategy::Normalization => "normalization",
            LabelStrategy::MultiLabel => "multi-label",
            LabelStrategy::Sparse => "sparse",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "random" => LabelStrategy::Random,
            "uniform" => LabelStrategy::Uniform,
            "normalization" => LabelStrategy::Normalization,
            "multi-label" => LabelStrategy::MultiLabel,
            "sparse" => LabelStrategy::Sparse,
            other => return Err(Error::Config(format!("unknown label strategy '{other}'"))),
        })
    }

    /// Strategies that label cells and train the GAN.
    pub fn uses_gan(self) -> bool {
        matches!(
            self,
            LabelStrategy::Normalization | LabelStrategy::MultiLabel | LabelStrategy::Sparse
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    Random,
    Uniform,
    Rar,
}

/// Per-cell residual magnitude `sqrt(sum_c r_c^2)`, flattened `[r, i, j]`.
pub fn residual_magnitude(res: &FieldSequence) -> Vec<f64> {
    let n = res.plane_len();
    let mut out = vec![0.0; res.nt() * n];
    for t in 0..res.nt() {
        for c in 0..res.channels() {
            for (o, v) in res.plane(t, c).iter().enumerate() {
                out[t * n + o] += v * v;
            }
        }
    }
    out.iter_mut().for_each(|v| *v = v.sqrt());
    out
}

pub const FEATURE_SPACE_BINS: usize = 8;
pub const FEATURE_TIME_BINS: usize = 4;
pub const FEATURE_LEN: usize = FEATURE_SPACE_BINS * FEATURE_SPACE_BINS * FEATURE_TIME_BINS;

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualFeatures {
    pub values: Vec<f64>,
}

fn bin_range(b: usize, bins: usize, n: usize) -> std::ops::Range<usize> {
    (b * n / bins)..((b + 1) * n / bins)
}

/// Mean-pooled `|r|` on a `time x 8 x 8` grid, divided by its maximum.
pub fn residual_features(res: &FieldSequence) -> Result<ResidualFeatures> {
    if !res.is_finite() {
        return Err(Error::Numeric("non-finite residual field".into()));
    }
    let mags = residual_magnitude(res);
    let (nt, h, w) = (res.nt(), res.h(), res.w());
    let (sb, tb) = (FEATURE_SPACE_BINS, FEATURE_TIME_BINS);
    let mut values = vec![0.0; FEATURE_LEN];
    for bt in 0..tb {
        for bi in 0..sb {
            for bj in 0..sb {
                let (mut s, mut n) = (0.0, 0usize);
                for t in bin_range(bt, tb, nt) {
                    for i in bin_range(bi, sb, h) {
                        for j in bin_range(bj, sb, w) {
                            s += mags[(t * h + i) * w + j];
                            n += 1;
                        }
                    }
                }
                if n > 0 {
                    values[(bt * sb + bi) * sb + bj] = s / n as f64;
                }
            }
        }
    }
    let max = values.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        values.iter_mut().for_each(|v| *v /= max);
    }
    Ok(ResidualFeatures { values })
}

/// Sparse-label threshold: the largest-residual 5% of cells (fewer on ties),
/// expressed as `tau = mean * c`; `mean + 2 std` when the mean is not
/// positive or the field has fewer than 20 cells.
pub fn sparse_threshold(mags: &[f64]) -> f64 {
    let n = mags.len() as f64;
    let mean = mags.iter().sum::<f64>() / n;
    let std = (mags.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    let k = (0.05 * n).floor() as usize;
    if !(mean > 0.0) || k == 0 {
        return mean + 2.0 * std;
    }
    let mut sorted = mags.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    // `mean * (sorted[k] / mean)` can round below `sorted[k]` and admit one
    // extra cell
    sorted[k]
}

/// Labels per cell, or `None` for strategies that do not use labels.
pub fn label_points(mags: &[f64], strategy: LabelStrategy) -> Result<Option<Vec<f64>>> {
    if mags.is_empty() {
        return Err(Error::Degenerate("no residual cells to label".into()));
    }
    Ok(match strategy {
        LabelStrategy::Random | LabelStrategy::Uniform => None,
        LabelStrategy::Normalization => {
            let lo = mags.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = mags.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                Some(mags.iter().map(|r| (r - lo) / (hi - lo)).collect())
            } else {
                Some(vec![0.0; mags.len()])
            }
        }
        LabelStrategy::MultiLabel => {
            let mut order: Vec<usize> = (0..mags.len()).collect();
            order.sort_by(|&a, &b| mags[a].total_cmp(&mags[b]).then(a.cmp(&b)));
            let n = mags.len();
            let mut out = vec![0.0; n];
            for (rank, &idx) in order.iter().enumerate() {
                out[idx] = (5 * rank / n) as f64 * 0.25;
            }
            Some(out)
        }
        LabelStrategy::Sparse => {
            let tau = sparse_threshold(mags);
            Some(mags.iter().map(|&r| if r > tau { 1.0 } else { 0.0 }).collect())
        }
    })
}

/// Cells treated as problematic for the discriminator.
pub fn real_cells(labels: &[f64], strategy: LabelStrategy) -> Vec<usize> {
    labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| match strategy {
            LabelStrategy::Sparse => l == 1.0,
            _ => l > 0.5,
        })
        .map(|(i, _)| i)
        .collect()
}

/// Number of interior residual slices.
fn res_slices(spec: &DomainSpec) -> usize {
    spec.nt - 2
}

/// Coordinates of a residual cell.
pub fn cell_coord(idx: usize, spec: &DomainSpec) -> Coord {
    let (h, w) = (spec.ny, spec.nx);
    let r = idx / (h * w);
    let i = (idx / w) % h;
    let j = idx % w;
    (spec.t(r + 1), spec.x(j), spec.y(i))
}

/// Nearest residual cell of a point (time snapped to interior slices,
/// space wrapped or clamped by boundary type).
pub fn cell_index(c: Coord, spec: &DomainSpec) -> usize {
    let (h, w) = (spec.ny, spec.nx);
    let k = (c.0 / spec.dt).round().clamp(1.0, res_slices(spec) as f64) as usize;
    let axis = |v: f64, o: f64, d: f64, n: usize| -> usize {
        let f = ((v - o) / d).round();
        match spec.boundary {
            Boundary::Periodic => f.rem_euclid(n as f64) as usize % n,
            Boundary::Dirichlet => f.clamp(0.0, (n - 1) as f64) as usize,
        }
    };
    let j = axis(c.1, spec.x0, spec.dx, w);
    let i = axis(c.2, spec.y0, spec.dy, h);
    ((k - 1) * h + i) * w + j
}

/// Boolean mask of the `frac` highest-magnitude cells (ties by index).
pub fn top_cells(mags: &[f64], frac: f64) -> Vec<bool> {
    let k = ((frac * mags.len() as f64).round() as usize).min(mags.len());
    let mut mask = vec![false; mags.len()];
    for idx in rar_order(mags).into_iter().take(k) {
        mask[idx] = true;
    }
    mask
}

/// Fraction of accepted points whose nearest cell is in `mask`.
pub fn fraction_in(batch: &PointBatch, mask: &[bool], spec: &DomainSpec) -> f64 {
    let acc = batch.accepted_coords();
    if acc.is_empty() {
        return 0.0;
    }
    acc.iter().filter(|&&c| mask[cell_index(c, spec)]).count() as f64 / acc.len() as f64
}

fn rar_order(mags: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..mags.len()).collect();
    order.sort_by(|&a, &b| mags[b].total_cmp(&mags[a]).then(a.cmp(&b)));
    order
}

/// Lattice counts `(nt, nx, ny)` whose product is closest to `n`, most
/// balanced on ties.
pub fn lattice_shape(n: usize) -> (usize, usize, usize) {
    let mut best = (1, 1, n.max(1));
    let mut key = (usize::MAX, usize::MAX);
    for a in 1..=n.max(1) {
        for b in 1..=n.max(1) / a {
            let c = ((n as f64) / (a * b) as f64).round().max(1.0) as usize;
            let prod = a * b * c;
            let diff = prod.abs_diff(n);
            let spread = a.max(b).max(c) - a.min(b).min(c);
            if (diff, spread) < key {
                key = (diff, spread);
                best = (a, b, c);
            }
        }
    }
    best
}

fn box_extent(spec: &DomainSpec) -> (f64, f64, f64) {
    (spec.horizon(), spec.length_x(), spec.length_y())
}

pub fn baseline_sample(
    strategy: Baseline,
    mags: &[f64],
    spec: &DomainSpec,
    n: usize,
    seed: u64,
) -> Result<PointBatch> {
    if n == 0 {
        return Err(Error::Degenerate("baseline sample of zero points".into()));
    }
    let (lt, lx, ly) = box_extent(spec);
    let coords: Vec<Coord> = match strategy {
        Baseline::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n)
                .map(|_| {
                    let (a, b, c): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
                    (a * lt, spec.x0 + b * lx, spec.y0 + c * ly)
                })
                .collect()
        }
        Baseline::Uniform => {
            let (a, b, c) = lattice_shape(n);
            let mut v = Vec::with_capacity(a * b * c);
            for k in 0..a {
                for i in 0..c {
                    for j in 0..b {
                        v.push((
                            lt * (k as f64 + 0.5) / a as f64,
                            spec.x0 + lx * (j as f64 + 0.5) / b as f64,
                            spec.y0 + ly * (i as f64 + 0.5) / c as f64,
                        ));
                    }
                }
            }
            v
        }
        Baseline::Rar => rar_order(mags)
            .into_iter()
            .take(n)
            .map(|idx| cell_coord(idx, spec))
            .collect(),
    };
    let mut b = PointBatch::accepted_from(&coords);
    if mags.len() == res_slices(spec) * spec.plane_len() {
        b.annotate(mags, None, spec);
    }
    Ok(b)
}

/// Binary cross-entropy of the discriminator from raw scores.
pub fn disc_loss_from_scores(real: &[f64], fake: &[f64]) -> Result<f64> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::Degenerate("discriminator loss needs both batches".into()));
    }
    let lo = 1e-7;
    let cl = |d: f64| d.clamp(lo, 1.0 - lo);
    let r = real.iter().map(|&d| cl(d).ln()).sum::<f64>() / real.len() as f64;
    let f = fake.iter().map(|&d| (1.0 - cl(d)).ln()).sum::<f64>() / fake.len() as f64;
    Ok(-r - f)
}

pub fn gen_loss_from_scores(fake: &[f64]) -> Result<f64> {
    if fake.is_empty() {
        return Err(Error::Degenerate("generator loss needs a batch".into()));
    }
    let lo = 1e-7;
    Ok(-fake.iter().map(|&d| d.clamp(lo, 1.0 - lo).ln()).sum::<f64>() / fake.len() as f64)
}

/// Marks points with `d_score > beta` as accepted.
pub fn filter_by_scores(mut batch: PointBatch, scores: &[f64], beta: f64) -> PointBatch {
    batch.d_score = scores.to_vec();
    batch.accepted = scores.iter().map(|&d| d > beta).collect();
    batch
}

/// `(max ||f(z1) - f(z2)|| / ||z1 - z2||, min pairwise output distance)`
/// over `n_pairs` Gaussian pairs.
pub fn lipschitz_diagnostics(f: &dyn Fn(&[f64]) -> Vec<f64>, dim: usize, n_pairs: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || -> Vec<f64> { (0..dim).map(|_| rng.sample(StandardNormal)).collect() };
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let mut lip: f64 = 0.0;
    let mut outs = Vec::with_capacity(2 * n_pairs);
    for _ in 0..n_pairs {
        let (z1, z2) = (draw(), draw());
        let (o1, o2) = (f(&z1), f(&z2));
        let dz = dist(&z1, &z2);
        if dz > 0.0 {
            lip = lip.max(dist(&o1, &o2) / dz);
        }
        outs.push(o1);
        outs.push(o2);
    }
    let mut min_d = f64::INFINITY;
    for a in 0..outs.len() {
        for b in a + 1..outs.len() {
            min_d = min_d.min(dist(&outs[a], &outs[b]));
        }
    }
    (lip, if min_d.is_finite() { min_d } else { 0.0 })
}

/// Fully connected tanh network; parameters are named `{prefix}.w{l}` and
/// `{prefix}.b{l}`.
#[derive(Clone, Debug)]
struct Mlp {
    sizes: Vec<usize>,
}

impl Mlp {
    fn init(&self, prefix: &str, params: &mut ParamSet, rng: &mut ChaCha8Rng) {
        for l in 0..self.sizes.len() - 1 {
            let (i, o) = (self.sizes[l], self.sizes[l + 1]);
            let a = 1.0 / (i as f64).sqrt();
            let w = (0..i * o).map(|_| rng.random_range(-a..a)).collect();
            params.push(format!("{prefix}.w{l}"), Tensor::new(&[i, o], w).unwrap());
            params.push(format!("{prefix}.b{l}"), Tensor::zeros(&[o]));
        }
    }

    /// Pre-activation output of the last layer; `vars` holds `(w, b)` per
    /// layer.
    fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        let layers = self.sizes.len() - 1;
        let mut h = x;
        for l in 0..layers {
            h = g.matmul(h, vars[2 * l])?;
            h = g.add_row(h, vars[2 * l + 1])?;
            if l + 1 < layers {
                h = g.tanh(h);
            }
        }
        Ok(h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GanConfig {
    pub noise_dim: usize,
    pub width: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    /// Generated points per round.
    pub n_points: usize,
    /// Adam first-moment decay for both networks.
    pub beta1: f64,
    /// Init scale of the generator's last layer; larger spreads the initial
    /// samples over more of the box.
    pub out_gain: f64,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            noise_dim: 32,
            width: 64,
            lr_g: 1e-3,
            lr_d: 1e-3,
            n_points: 156,
            beta1: 0.5,
            out_gain: 4.0,
            seed: 0,
        }
    }
}

/// Generator, discriminator and their optimizers.
#[derive(Clone, Debug)]
pub struct Gan {
    pub cfg: GanConfig,
    /// `proj` followed by the generator layers.
    pub gen: ParamSet,
    pub disc: ParamSet,
    pub gen_opt: Adam<f64>,
    pub disc_opt: Adam<f64>,
    g_net: Mlp,
    d_net: Mlp,
}

#[derive(Clone, Debug)]
pub struct GanRound {
    pub batch: PointBatch,
    pub l_d: f64,
    pub l_g: f64,
    pub n_real: usize,
    /// No cell qualified as problematic, so no update happened.
    pub skipped: bool,
}

impl Gan {
    pub fn new(cfg: GanConfig) -> Result<Self> {
        if cfg.noise_dim == 0 || cfg.width == 0 || cfg.n_points == 0 {
            return Err(Error::Config("GAN sizes must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let g_net = Mlp {
            sizes: vec![cfg.noise_dim, cfg.width, cfg.width, 3],
        };
        let d_net = Mlp {
            sizes: vec![3, cfg.width, cfg.width, 1],
        };
        let mut gen = ParamSet::new();
        let a = 1.0 / (FEATURE_LEN as f64).sqrt();
        let proj = (0..FEATURE_LEN * cfg.noise_dim).map(|_| rng.random_range(-a..a)).collect();
        gen.push("gen.proj", Tensor::new(&[FEATURE_LEN, cfg.noise_dim], proj)?);
        g_net.init("gen", &mut gen, &mut rng);
        let last = format!("gen.w{}", g_net.sizes.len() - 2);
        if let Some(w) = gen.get_mut(&last) {
            w.data_mut().iter_mut().for_each(|v| *v *= cfg.out_gain);
        }
        let mut disc = ParamSet::new();
        d_net.init("disc", &mut disc, &mut rng);
        let adam = |lr| {
            Adam::new(AdamConfig {
                lr,
                beta1: cfg.beta1,
                ..AdamConfig::default()
            })
        };
        Ok(Self {
            gen_opt: adam(cfg.lr_g),
            disc_opt: adam(cfg.lr_d),
            cfg,
            gen,
            disc,
            g_net,
            d_net,
        })
    }

    pub fn noise(&self, n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.cfg.noise_dim;
        Tensor::new(&[n, d], (0..n * d).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
    }

    /// Generator output in the unit cube `(0, 1)^3`, as a graph node.
    fn gen_unit(&self, g: &mut Graph, gv: &[Var], z: &Tensor, feats: &ResidualFeatures) -> Result<Var> {
        let zv = g.constant(z);
        let fv = g.constant_from(&[1, FEATURE_LEN], feats.values.clone())?;
        let shift = g.matmul(fv, gv[0])?;
        let shift = g.reshape(shift, &[self.cfg.noise_dim])?;
        let znew = g.add_row(zv, shift)?;
        let out = self.g_net.forward(g, &gv[1..], znew)?;
        Ok(g.sigmoid(out))
    }

    /// Discriminator scores for unit-cube inputs `[n, 3]`.
    fn disc_scores(&self, g: &mut Graph, dv: &[Var], unit: Var) -> Result<Var> {
        let x = g.scale(unit, 2.0);
        let x = g.offset(x, -1.0);
        let o = self.d_net.forward(g, dv, x)?;
        Ok(g.sigmoid(o))
    }

    fn to_coords(unit: &[f64], spec: &DomainSpec) -> Vec<Coord> {
        let (lt, lx, ly) = box_extent(spec);
        unit.chunks(3)
            .map(|u| {
                let (a, b, c) = (u[0].clamp(0.0, 1.0), u[1].clamp(0.0, 1.0), u[2].clamp(0.0, 1.0));
                (a * lt, spec.x0 + b * lx, spec.y0 + c * ly)
            })
            .collect()
    }

    fn to_unit(c: &[Coord], spec: &DomainSpec) -> Tensor {
        let (lt, lx, ly) = box_extent(spec);
        let data = c
            .iter()
            .flat_map(|&(t, x, y)| [t / lt, (x - spec.x0) / lx, (y - spec.y0) / ly])
            .collect();
        Tensor::new(&[c.len(), 3], data).unwrap()
    }

    /// `n` generated points for the given features; deterministic in
    /// `(parameters, features, noise_seed)`.
    pub fn generate_points(&self, feats: &ResidualFeatures, n: usize, noise_seed: u64, spec: &DomainSpec) -> Result<PointBatch> {
        if n == 0 {
            return Err(Error::Degenerate("cannot generate zero points".into()));
        }
        let z = self.noise(n, noise_seed);
        let mut g = Graph::new();
        let gv = self.gen.bind_frozen(&mut g);
        let u = self.gen_unit(&mut g, &gv, &z, feats)?;
        Ok(PointBatch::from_coords(Self::to_coords(g.value(u), spec)))
    }

    /// Discriminator scores of arbitrary points.
    pub fn score(&self, coords: &[Coord], spec: &DomainSpec) -> Result<Vec<f64>> {
        if coords.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let dv = self.disc.bind_frozen(&mut g);
        let u = g.constant(&Self::to_unit(coords, spec));
        let s = self.disc_scores(&mut g, &dv, u)?;
        Ok(g.value(s).to_vec())
    }

    pub fn disc_loss(&self, problematic: &PointBatch, generated: &PointBatch, spec: &DomainSpec) -> Result<f64> {
        disc_loss_from_scores(&self.score(&problematic.coords, spec)?, &self.score(&generated.coords, spec)?)
    }

    pub fn gen_loss(&self, generated: &PointBatch, spec: &DomainSpec) -> Result<f64> {
        gen_loss_from_scores(&self.score(&generated.coords, spec)?)
    }

    pub fn filter_points(&self, batch: PointBatch, beta: f64, spec: &DomainSpec) -> Result<PointBatch> {
        let s = self.score(&batch.coords, spec)?;
        Ok(filter_by_scores(batch, &s, beta))
    }

    /// Lipschitz estimate and diversity of the noise-to-unit-cube map with
    /// zero residual features.
    pub fn generator_diagnostics(&self, n_pairs: usize, seed: u64) -> (f64, f64) {
        let feats = ResidualFeatures {
            values: vec![0.0; FEATURE_LEN],
        };
        let f = |z: &[f64]| -> Vec<f64> {
            let mut g = Graph::new();
            let gv = self.gen.bind_frozen(&mut g);
            let zt = Tensor::new(&[1, z.len()], z.to_vec()).unwrap();
            let u = self.gen_unit(&mut g, &gv, &zt, &feats).unwrap();
            g.value(u).to_vec()
        };
        lipschitz_diagnostics(&f, self.cfg.noise_dim, n_pairs, seed)
    }

    /// One adversarial round: a discriminator step, a generator step, then
    /// generation and screening of the training batch.
    pub fn round(
        &mut self,
        res: &FieldSequence,
        spec: &DomainSpec,
        strategy: LabelStrategy,
        beta: f64,
        seed: u64,
    ) -> Result<GanRound> {
        if !strategy.uses_gan() {
            return Err(Error::Contract(format!(
                "strategy {} does not train a GAN",
                strategy.as_str()
            )));
        }
        let mags = residual_magnitude(res);
        let feats = residual_features(res)?;
        let labels = label_points(&mags, strategy)?.expect("GAN strategies label cells");
        let real = real_cells(&labels, strategy);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise_seed = rng.next_u64();
        let n = self.cfg.n_points;
        let z = self.noise(n, noise_seed);

        let (mut l_d, mut l_g) = (0.0, 0.0);
        let skipped = real.is_empty();
        if !skipped {
            let picks: Vec<Coord> = (0..n)
                .map(|_| cell_coord(real[rng.random_range(0..real.len())], spec))
                .collect();
            let fake_unit = {
                let mut g = Graph::new();
                let gv = self.gen.bind_frozen(&mut g);
                let u = self.gen_unit(&mut g, &gv, &z, &feats)?;
                g.tensor(u)
            };

            // discriminator step
            let mut g = Graph::new();
            let dv = self.disc.bind(&mut g);
            let ru = g.constant(&Self::to_unit(&picks, spec));
            let fu = g.constant(&fake_unit);
            let ds_r = self.disc_scores(&mut g, &dv, ru)?;
            let ds_f = self.disc_scores(&mut g, &dv, fu)?;
            let lr = g.log_clamped(ds_r, 1e-7, 1.0 - 1e-7);
            let one_minus = g.scale(ds_f, -1.0);
            let one_minus = g.offset(one_minus, 1.0);
            let lf = g.log_clamped(one_minus, 1e-7, 1.0 - 1e-7);
            let mr = g.mean(lr)?;
            let mf = g.mean(lf)?;
            let s = g.add(mr, mf)?;
            let loss = g.neg(s);
            l_d = g.scalar(loss);
            g.backward(loss)?;
            self.disc.zero_grad();
            self.disc.collect_grads(&g, &dv)?;
            self.disc_opt.step(&mut self.disc)?;

            // generator step
            let mut g = Graph::new();
            let gv = self.gen.bind(&mut g);
            let dv = self.disc.bind_frozen(&mut g);
            let u = self.gen_unit(&mut g, &gv, &z, &feats)?;
            let ds = self.disc_scores(&mut g, &dv, u)?;
            let lg = g.log_clamped(ds, 1e-7, 1.0 - 1e-7);
            let m = g.mean(lg)?;
            let loss = g.neg(m);
            l_g = g.scalar(loss);
            g.backward(loss)?;
            self.gen.zero_grad();
            self.gen.collect_grads(&g, &gv)?;
            self.gen_opt.step(&mut self.gen)?;
        }

        let batch = self.generate_points(&feats, n, noise_seed, spec)?;
        let mut batch = self.filter_points(batch, beta, spec)?;
        batch.annotate(&mags, Some(&labels), spec);
        Ok(GanRound {
            batch,
            l_d,
            l_g,
            n_real: real.len(),
            skipped,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdops::Boundary;

    fn spec() -> DomainSpec {
        DomainSpec::square(16, 1.0, 10, 0.5, Boundary::Periodic).unwrap()
    }

    #[test]
    fn features_examples() {
        let z = FieldSequence::zeros(8, 1, 16, 16);
        assert!(residual_features(&z).unwrap().values.iter().all(|&v| v == 0.0));
        let mut hot = FieldSequence::zeros(8, 1, 16, 16);
        hot.plane_mut(3, 0)[5 * 16 + 9] = -4.0;
        let f = residual_features(&hot).unwrap().values;
        assert_eq!(f.iter().filter(|&&v| v != 0.0).count(), 1);
        assert_eq!(f.iter().copied().fold(0.0, f64::max), 1.0);
        // time bin 1 (slices 2..4), row bin 2, column bin 4
        assert_eq!(f[(8 + 2) * 8 + 4], 1.0);
    }

    #[test]
    fn labels() {
        assert_eq!(
            label_points(&[1.0, 3.0], LabelStrategy::Normalization).unwrap().unwrap(),
            vec![0.0, 1.0]
        );
        assert_eq!(
            label_points(&[2.0, 2.0], LabelStrategy::Normalization).unwrap().unwrap(),
            vec![0.0, 0.0]
        );
        let groups: Vec<f64> = (0..10).map(|i| (9 - i) as f64).collect();
        let m = label_points(&groups, LabelStrategy::MultiLabel).unwrap().unwrap();
        for (i, &l) in m.iter().enumerate() {
            assert_eq!(l, ((9 - i) / 2) as f64 * 0.25);
        }
        assert!(label_points(&[1.0], LabelStrategy::Random).unwrap().is_none());
    }

    #[test]
    fn sparse_labels_are_rare() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let mags: Vec<f64> = (0..1000).map(|_| rng.random::<f64>().powi(3)).collect();
            let l = label_points(&mags, LabelStrategy::Sparse).unwrap().unwrap();
            let frac = l.iter().sum::<f64>() / 1000.0;
            assert!(frac <= 0.05 && frac > 0.0);
        }
    }

    #[test]
    fn bce_examples() {
        let l = disc_loss_from_scores(&[0.5; 3], &[0.5; 4]).unwrap();
        assert!((l - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!(disc_loss_from_scores(&[1.0], &[0.0]).unwrap() < 1e-6);
        let l = disc_loss_from_scores(&[0.9, 0.6], &[0.2]).unwrap();
        let want = -(0.9f64.ln() + 0.6f64.ln()) / 2.0 - 0.8f64.ln();
        assert!((l - want).abs() < 1e-12);
        assert!(disc_loss_from_scores(&[], &[0.5]).is_err());
        assert!(gen_loss_from_scores(&[1.0]).unwrap() < 1e-6);
        assert!((gen_loss_from_scores(&[0.5]).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn filter_examples() {
        let b = PointBatch::from_coords(vec![(0.0, 0.0, 0.0); 3]);
        let f = filter_by_scores(b.clone(), &[0.2, 0.6, 0.9], 0.5);
        assert_eq!(f.accepted, vec![false, true, true]);
        let all = filter_by_scores(b, &[0.2, 0.6, 0.9], 0.0);
        assert_eq!(all.accepted_count(), 3);
    }

    #[test]
    fn baselines() {
        let s = spec();
        let n_cells = 8 * 16 * 16;
        let mut mags = vec![0.0; n_cells];
        mags[1234] = 5.0;
        let r = baseline_sample(Baseline::Rar, &mags, &s, 3, 0).unwrap();
        assert_eq!(cell_index(r.coords[0], &s), 1234);
        assert_eq!(cell_index(r.coords[1], &s), 0);

        let u = baseline_sample(Baseline::Uniform, &mags, &s, 8, 0).unwrap();
        assert_eq!(u.len(), 8);
        assert_eq!(u.coords[0], (0.125, 0.25, 0.25));
        assert_eq!(lattice_shape(156).0 * lattice_shape(156).1 * lattice_shape(156).2, 156);

        let a = baseline_sample(Baseline::Random, &mags, &s, 50, 7).unwrap();
        let b = baseline_sample(Baseline::Random, &mags, &s, 50, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.coords.iter().all(|&(t, x, y)| (0.0..=0.5).contains(&t) && (0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y)));
    }

    #[test]
    fn generator_determinism_and_count() {
        let gan = Gan::new(GanConfig::default()).unwrap();
        let s = spec();
        let feats = ResidualFeatures {
            values: (0..FEATURE_LEN).map(|i| (i % 7) as f64 / 7.0).collect(),
        };
        let a = gan.generate_points(&feats, 156, 11, &s).unwrap();
        assert_eq!(a.len(), 156);
        assert_eq!(a, gan.generate_points(&feats, 156, 11, &s).unwrap());
        let (lip, div) = gan.generator_diagnostics(20, 1);
        assert!(lip > 0.0 && div > 0.0);
    }

    #[test]
    fn affine_lipschitz() {
        let f = |z: &[f64]| vec![2.0 * z[0] + 1.0, 0.5 * z[1]];
        let (lip, _) = lipschitz_diagnostics(&f, 2, 200, 0);
        assert!(lip <= 2.0 + 1e-12 && lip > 1.9);
        let c = |_: &[f64]| vec![1.0, 1.0];
        assert_eq!(lipschitz_diagnostics(&c, 2, 10, 0), (0.0, 0.0));
    }

    #[test]
    fn round_runs_and_screens() {
        let s = spec();
        let res = FieldSequence::from_tensor(Tensor::from_fn(&[8, 1, 16, 16], |i| {
            (-(((i[2] as f64 - 4.0).powi(2) + (i[3] as f64 - 11.0).powi(2)) / 6.0)).exp()
        }))
        .unwrap();
        let mut gan = Gan::new(GanConfig::default()).unwrap();
        let r = gan.round(&res, &s, LabelStrategy::Sparse, 0.5, 1).unwrap();
        assert!(!r.skipped && r.n_real > 0);
        for (d, a) in r.batch.d_score.iter().zip(&r.batch.accepted) {
            assert_eq!(*a, *d > 0.5);
        }
        assert!(gan.round(&res, &s, LabelStrategy::Random, 0.5, 1).is_err());
    }
}
