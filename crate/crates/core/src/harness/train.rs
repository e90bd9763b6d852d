//! Pretraining, the alternating GAN/PINN loop, the skip-step variant and the
//! terminal L-BFGS phase, all driven by one step counter so that a run can
//! stop and resume anywhere.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::field::{FieldSequence, SeqVars};
use crate::losses::{
    assemble_total, causal_slice_weights, causal_state, gen_point_vars, lambda_gen, per_step_vars,
    pinn_mse, CausalState,
};
use crate::model::{Model, ModelVars};
use crate::numcore::{Adam, AdamConfig, Lbfgs, LbfgsConfig};
use crate::problems::PDEProblem;
use crate::refsolve::{fine_domain, solve_reference};
use crate::sampler::{baseline_sample, residual_magnitude, Baseline, Gan, PointBatch};
use crate::{Graph, Tensor, Var};

use super::config::{Sampling, TrainConfig};
use super::io::{atomic_write, fmt_f64, Checkpoint};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Adam,
    Lbfgs,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Adam => "adam",
            Phase::Lbfgs => "lbfgs",
        }
    }

    fn code(self) -> f64 {
        match self {
            Phase::Pretrain => 0.0,
            Phase::Adam => 1.0,
            Phase::Lbfgs => 2.0,
        }
    }

    fn from_code(c: f64) -> Result<Self> {
        Ok(match c as i64 {
            0 => Phase::Pretrain,
            1 => Phase::Adam,
            2 => Phase::Lbfgs,
            _ => return Err(Error::Config(format!("unknown phase code {c}"))),
        })
    }
}

/// One logged row, taken before the update of its iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    /// 1-based within the phase.
    pub iteration: usize,
    pub phase: Phase,
    pub mse_i: f64,
    pub mse_b: f64,
    pub mse_f: f64,
    pub step_min: f64,
    pub step_max: f64,
    pub step_mean: f64,
    pub p_causal: u64,
    pub loss: f64,
    pub l_d: f64,
    pub l_g: f64,
    pub accepted: usize,
    /// Cumulative.
    pub gan_rounds: usize,
    /// Cumulative count of iterations whose sampled batch had no accepted
    /// point.
    pub empty_batches: usize,
    pub rel_mse: f64,
}

const HEADER: &str = "iteration,phase,mse_i,mse_b,mse_f,step_min,step_max,step_mean,p_causal,loss,l_d,l_g,accepted,gan_rounds,empty_batches,rel_mse";
const ROW_LEN: usize = 16;

impl ReportRow {
    fn to_vec(&self) -> Vec<f64> {
        vec![
            self.iteration as f64,
            self.phase.code(),
            self.mse_i,
            self.mse_b,
            self.mse_f,
            self.step_min,
            self.step_max,
            self.step_mean,
            self.p_causal as f64,
            self.loss,
            self.l_d,
            self.l_g,
            self.accepted as f64,
            self.gan_rounds as f64,
            self.empty_batches as f64,
            self.rel_mse,
        ]
    }

    fn from_slice(v: &[f64]) -> Result<Self> {
        Ok(Self {
            iteration: v[0] as usize,
            phase: Phase::from_code(v[1])?,
            mse_i: v[2],
            mse_b: v[3],
            mse_f: v[4],
            step_min: v[5],
            step_max: v[6],
            step_mean: v[7],
            p_causal: v[8] as u64,
            loss: v[9],
            l_d: v[10],
            l_g: v[11],
            accepted: v[12] as usize,
            gan_rounds: v[13] as usize,
            empty_batches: v[14] as usize,
            rel_mse: v[15],
        })
    }

    pub fn losses_finite(&self) -> bool {
        [
            self.mse_i,
            self.mse_b,
            self.mse_f,
            self.step_min,
            self.step_max,
            self.step_mean,
            self.loss,
            self.l_d,
            self.l_g,
            self.rel_mse,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunReport {
    pub rows: Vec<ReportRow>,
}

impl RunReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(HEADER);
        s.push('\n');
        for r in &self.rows {
            let f = [
                r.mse_i, r.mse_b, r.mse_f, r.step_min, r.step_max, r.step_mean,
            ]
            .map(fmt_f64)
            .join(",");
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.iteration,
                r.phase.as_str(),
                f,
                r.p_causal,
                fmt_f64(r.loss),
                fmt_f64(r.l_d),
                fmt_f64(r.l_g),
                r.accepted,
                r.gan_rounds,
                r.empty_batches,
                fmt_f64(r.rel_mse)
            ));
        }
        s
    }

    pub fn last(&self) -> Option<&ReportRow> {
        self.rows.last()
    }

    fn to_tensor(&self) -> Tensor {
        let data = self.rows.iter().flat_map(|r| r.to_vec()).collect();
        Tensor::new(&[self.rows.len(), ROW_LEN], data).unwrap()
    }

    fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.rank() != 2 || t.shape()[1] != ROW_LEN {
            return Err(Error::Config("report block has the wrong shape".into()));
        }
        let rows = t
            .data()
            .chunks(ROW_LEN)
            .map(ReportRow::from_slice)
            .collect::<Result<_>>()?;
        Ok(Self { rows })
    }
}

/// `sum (pred - ref)^2 / sum ref^2` over every cell.
pub fn relative_mse(pred: &FieldSequence, reference: &FieldSequence) -> Result<f64> {
    if !pred.same_shape(reference) {
        return Err(Error::Dimension(format!(
            "prediction {:?} vs reference {:?}",
            pred.tensor().shape(),
            reference.tensor().shape()
        )));
    }
    let den: f64 = reference.tensor().data().iter().map(|r| r * r).sum();
    if den == 0.0 {
        return Err(Error::Degenerate("reference is identically zero".into()));
    }
    let num: f64 = pred
        .tensor()
        .data()
        .iter()
        .zip(reference.tensor().data())
        .map(|(p, r)| (p - r).powi(2))
        .sum();
    Ok(num / den)
}

/// Ground truth on the training grid: the closed form where one exists,
/// otherwise a fine-grid reference solve.
pub fn reference_for(prob: &PDEProblem, cfg: &TrainConfig) -> Result<FieldSequence> {
    if prob.has_analytic() {
        prob.analytic_sequence()
    } else {
        let fine = fine_domain(&prob.domain, cfg.reference_factor)?;
        Ok(solve_reference(prob, fine, cfg.reference_stepper)?.output)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-iteration seed.
fn step_seed(seed: u64, step: usize) -> u64 {
    splitmix(splitmix(seed) ^ step as u64)
}

/// Forward pass shared by every phase.
struct Forward {
    res: SeqVars,
    per_step: Vec<f64>,
    causal: CausalState,
    /// Weighted PDE term.
    pde: Var,
}

/// `weights` pins the causal slice weights; otherwise they follow the mask
/// of this pass.
fn forward(
    g: &mut Graph,
    model: &Model,
    mv: &ModelVars,
    prob: &PDEProblem,
    cfg: &TrainConfig,
    weights: Option<&[f64]>,
) -> Result<(SeqVars, Forward, Vec<f64>)> {
    let seq = model.rollout_vars(g, mv, prob, prob.domain.nt - 1, &[])?;
    let res = prob.residual_vars(g, &seq)?;
    let ps = per_step_vars(g, &res)?;
    let per_step: Vec<f64> = ps.iter().map(|&v| g.scalar(v)).collect();
    let causal = causal_state(&per_step, &cfg.weights)?;
    let cw = match weights {
        Some(w) => w.to_vec(),
        None => causal_slice_weights(&causal.mask, cfg.weights.lambda_causal),
    };
    let mut acc: Option<Var> = None;
    for (&v, &c) in ps.iter().zip(&cw) {
        let t = g.scale(v, c);
        acc = Some(match acc {
            Some(a) => g.add(a, t)?,
            None => t,
        });
    }
    let acc = acc.ok_or_else(|| Error::Degenerate("no residual slices".into()))?;
    let pde = g.scale(acc, cfg.weights.w_f / per_step.len() as f64);
    Ok((
        seq,
        Forward {
            res,
            per_step,
            causal,
            pde,
        },
        cw,
    ))
}

/// Adds `lam * L_gen` when the batch has accepted points. Returns the new
/// loss node, the plain `L_gen` value and whether the batch was empty.
fn add_gen(
    g: &mut Graph,
    loss: Var,
    fw: &Forward,
    batch: Option<&PointBatch>,
    prob: &PDEProblem,
    alpha: f64,
) -> Result<(Var, f64, bool)> {
    let Some(b) = batch else {
        return Ok((loss, 0.0, false));
    };
    match gen_point_vars(g, &fw.res, b, &prob.domain)? {
        Some(v) => {
            let lam = lambda_gen(alpha, &b.accepted_scores());
            let gv = g.scalar(v);
            let t = g.scale(v, lam);
            Ok((g.add(loss, t)?, gv, false))
        }
        None => {
            log::warn!("no accepted generated points; generated-point loss set to 0");
            Ok((loss, 0.0, true))
        }
    }
}

/// `n_pretrain` Adam steps on the PDE loss and the causal terms, without
/// any sampler. Returns the per-step loss profile of the final model.
pub fn pretrain(model: &mut Model, prob: &PDEProblem, cfg: &TrainConfig) -> Result<Vec<f64>> {
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    for j in 1..=cfg.n_pretrain {
        let mut g = Graph::new();
        let mv = model.bind(&mut g, true);
        let (_, fw, _) = forward(&mut g, model, &mv, prob, cfg, None)?;
        let loss = g.scalar(fw.pde);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "pretraining loss at iteration {j}; per-step losses {:?}",
                fw.per_step
            )));
        }
        g.backward(fw.pde)?;
        model.params.zero_grad();
        model.params.collect_grads(&g, &mv.all)?;
        opt.step(&mut model.params)?;
    }
    let mut g = Graph::new();
    let mv = model.bind(&mut g, false);
    let (_, fw, _) = forward(&mut g, model, &mv, prob, cfg, None)?;
    if fw.per_step.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("per-step loss after pretraining".into()));
    }
    Ok(fw.per_step)
}

/// Final metrics of a finished run.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub rel_mse: f64,
    /// Relative MSE right after pretraining.
    pub pretrain_rel_mse: f64,
    pub mse_f: f64,
    pub p_causal: u64,
    pub gan_rounds: usize,
    pub empty_batches: usize,
    pub line_search_failures: usize,
}

impl Summary {
    pub fn to_csv(&self) -> String {
        format!(
            "rel_mse,pretrain_rel_mse,mse_f,p_causal,gan_rounds,empty_batches,line_search_failures\n{},{},{},{},{},{},{}\n",
            fmt_f64(self.rel_mse),
            fmt_f64(self.pretrain_rel_mse),
            fmt_f64(self.mse_f),
            self.p_causal,
            self.gan_rounds,
            self.empty_batches,
            self.line_search_failures
        )
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub gan: Option<Gan>,
    pub report: RunReport,
    pub prediction: FieldSequence,
    pub summary: Summary,
}

/// Training state. `step` counts completed iterations over all phases.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub prob: PDEProblem,
    pub model: Model,
    pub gan: Option<Gan>,
    opt: Adam<f64>,
    lbfgs: Lbfgs<f64>,
    batch: Option<PointBatch>,
    pub step: usize,
    gan_rounds: usize,
    empty_batches: usize,
    line_search_failures: usize,
    l_d: f64,
    l_g: f64,
    pretrain_rel_mse: f64,
    pub report: RunReport,
    timing: Vec<(usize, Phase, f64)>,
    reference: FieldSequence,
    /// Period of sampler refreshes; 1 for the alternating loop.
    period: usize,
    /// Write outputs under `cfg.out_dir`.
    pub persist: bool,
}

impl Trainer {
    /// Fresh run; `skip` overrides the configured refresh period.
    pub fn new(cfg: TrainConfig, skip: usize) -> Result<Self> {
        let prob = cfg.problem.build()?;
        let reference = reference_for(&prob, &cfg)?;
        Self::with_reference(cfg, skip, reference)
    }

    pub fn with_reference(cfg: TrainConfig, skip: usize, reference: FieldSequence) -> Result<Self> {
        cfg.validate()?;
        if skip == 0 {
            return Err(Error::Config("skip must be >= 1".into()));
        }
        let prob = cfg.problem.build()?;
        let model = Model::new(cfg.model_config(&prob))?;
        let gan = match cfg.sampling {
            Sampling::Gan(_) => Some(Gan::new(cfg.gan_config())?),
            _ => None,
        };
        if reference.nt() != prob.domain.nt
            || reference.channels() != prob.channels()
            || reference.h() != prob.domain.ny
            || reference.w() != prob.domain.nx
        {
            return Err(Error::Dimension("reference does not match the training grid".into()));
        }
        Ok(Self {
            opt: Adam::new(AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            }),
            lbfgs: Lbfgs::new(LbfgsConfig {
                memory: cfg.lbfgs_memory,
                ..LbfgsConfig::default()
            }),
            cfg,
            prob,
            model,
            gan,
            batch: None,
            step: 0,
            gan_rounds: 0,
            empty_batches: 0,
            line_search_failures: 0,
            l_d: 0.0,
            l_g: 0.0,
            pretrain_rel_mse: f64::NAN,
            report: RunReport::default(),
            timing: Vec::new(),
            reference,
            period: skip,
            persist: true,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.n_pretrain + self.cfg.n_iterations + self.cfg.lbfgs_steps
    }

    pub fn reference(&self) -> &FieldSequence {
        &self.reference
    }

    /// Phase and 1-based in-phase index of global step `s` (0-based).
    fn locate(&self, s: usize) -> (Phase, usize, usize) {
        let (p, n) = (self.cfg.n_pretrain, self.cfg.n_iterations);
        if s < p {
            (Phase::Pretrain, s + 1, p)
        } else if s < p + n {
            (Phase::Adam, s - p + 1, n)
        } else {
            (Phase::Lbfgs, s - p - n + 1, self.cfg.lbfgs_steps)
        }
    }

    fn logs(&self, j: usize, len: usize) -> bool {
        j == 1 || j == len || j % self.cfg.log_every == 0
    }

    pub fn checkpoint_path(&self, step: Option<usize>) -> PathBuf {
        match step {
            Some(s) => self.cfg.out_dir.join(format!("checkpoint-{s:06}.pckp")),
            None => self.cfg.out_dir.join("checkpoint.pckp"),
        }
    }

    /// Runs to the end and returns the final model and report.
    pub fn run(mut self) -> Result<TrainOutcome> {
        let start = Instant::now();
        while self.step < self.total_steps() {
            let (phase, j, len) = self.locate(self.step);
            let row = match phase {
                Phase::Pretrain | Phase::Adam => self.adam_step(phase, j, len)?,
                Phase::Lbfgs => self.lbfgs_step(j, len)?,
            };
            if let Some(r) = row {
                self.timing.push((r.iteration, r.phase, start.elapsed().as_secs_f64()));
                log::info!(
                    "{} {} loss {:.4e} rel_mse {:.4e} p_causal {}",
                    r.phase.as_str(),
                    r.iteration,
                    r.loss,
                    r.rel_mse,
                    r.p_causal
                );
                self.report.rows.push(r);
            }
            self.step += 1;
            if self.step == self.cfg.n_pretrain && self.pretrain_rel_mse.is_nan() {
                self.pretrain_rel_mse = self.evaluate()?.0;
            }
            let every = self.cfg.checkpoint_every;
            if self.persist && every > 0 && self.step % every == 0 && self.step < self.total_steps() {
                self.checkpoint().save(&self.checkpoint_path(Some(self.step)))?;
            }
        }
        if self.pretrain_rel_mse.is_nan() {
            // zero pretraining iterations: the untrained model
            self.pretrain_rel_mse = self.report_pretrain_fallback()?;
        }
        let (rel_mse, pred, mse_f, p_causal) = self.evaluate()?;
        let summary = Summary {
            rel_mse,
            pretrain_rel_mse: self.pretrain_rel_mse,
            mse_f,
            p_causal,
            gan_rounds: self.gan_rounds,
            empty_batches: self.empty_batches,
            line_search_failures: self.line_search_failures,
        };
        if self.persist {
            self.write_outputs(&summary)?;
        }
        Ok(TrainOutcome {
            model: self.model,
            gan: self.gan,
            report: self.report,
            prediction: pred,
            summary,
        })
    }

    fn report_pretrain_fallback(&self) -> Result<f64> {
        let init = Model::new(self.cfg.model_config(&self.prob))?;
        relative_mse(&init.rollout(&self.prob, self.prob.domain.nt - 1)?, &self.reference)
    }

    /// Relative MSE, prediction, mean PDE loss and causal penalty of the
    /// current model.
    pub fn evaluate(&self) -> Result<(f64, FieldSequence, f64, u64)> {
        let pred = self.model.rollout(&self.prob, self.prob.domain.nt - 1)?;
        let per_step = crate::losses::per_step_pde_loss(&self.prob.residual(&pred)?)?;
        let causal = causal_state(&per_step, &self.cfg.weights)?;
        let mse_f = per_step.iter().sum::<f64>() / per_step.len() as f64;
        Ok((relative_mse(&pred, &self.reference)?, pred, mse_f, causal.penalty))
    }

    fn write_outputs(&self, summary: &Summary) -> Result<()> {
        let d = &self.cfg.out_dir;
        atomic_write(&d.join("config.ini"), self.cfg.to_text().as_bytes())?;
        atomic_write(&d.join("report.csv"), self.report.to_csv().as_bytes())?;
        atomic_write(&d.join("summary.csv"), summary.to_csv().as_bytes())?;
        let mut t = String::from("iteration,phase,wall_s\n");
        for (i, p, w) in &self.timing {
            t.push_str(&format!("{i},{},{}\n", p.as_str(), fmt_f64(*w)));
        }
        atomic_write(&d.join("timing.csv"), t.as_bytes())?;
        self.checkpoint().save(&self.checkpoint_path(None))
    }

    /// Refreshes the sampled batch from the current residual field.
    fn sample(&mut self, res: &FieldSequence) -> Result<()> {
        let seed = step_seed(self.cfg.seed, self.step);
        let spec = &self.prob.domain;
        let n = self.cfg.gan.n_points;
        let baseline = |b| baseline_sample(b, &residual_magnitude(res), spec, n, seed);
        self.batch = match self.cfg.sampling {
            Sampling::None => None,
            Sampling::Random => Some(baseline(Baseline::Random)?),
            Sampling::Uniform => Some(baseline(Baseline::Uniform)?),
            Sampling::Rar => Some(baseline(Baseline::Rar)?),
            Sampling::Gan(strategy) => {
                let gan = self.gan.as_mut().expect("GAN sampling builds a GAN");
                let r = gan.round(res, spec, strategy, self.cfg.weights.beta, seed)?;
                self.l_d = r.l_d;
                self.l_g = r.l_g;
                Some(r.batch)
            }
        };
        self.gan_rounds += 1;
        Ok(())
    }

    fn row(
        &self,
        phase: Phase,
        j: usize,
        pred: &FieldSequence,
        fw: &Forward,
        gen: f64,
    ) -> Result<ReportRow> {
        let pinn = pinn_mse(pred, &self.prob, &self.cfg.weights)?;
        let scores = match (phase, &self.batch) {
            (Phase::Pretrain, _) | (_, None) => Vec::new(),
            (_, Some(b)) => b.accepted_scores(),
        };
        let loss = assemble_total(&pinn, &fw.causal, gen, &self.cfg.weights, &scores)?;
        let ps = &fw.per_step;
        Ok(ReportRow {
            iteration: j,
            phase,
            mse_i: pinn.mse_i,
            mse_b: pinn.mse_b,
            mse_f: pinn.mse_f,
            step_min: ps.iter().copied().fold(f64::INFINITY, f64::min),
            step_max: ps.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            step_mean: ps.iter().sum::<f64>() / ps.len() as f64,
            p_causal: fw.causal.penalty,
            loss,
            l_d: self.l_d,
            l_g: self.l_g,
            accepted: if phase == Phase::Pretrain {
                0
            } else {
                self.batch.as_ref().map_or(0, |b| b.accepted_count())
            },
            gan_rounds: self.gan_rounds,
            empty_batches: self.empty_batches,
            rel_mse: relative_mse(pred, &self.reference)?,
        })
    }

    fn abort(&self, what: &str) -> Error {
        if self.persist {
            let p = self.cfg.out_dir.join("checkpoint-abort.pckp");
            if let Err(e) = self.checkpoint().save(&p) {
                log::error!("could not write abort checkpoint: {e}");
            }
        }
        Error::Numeric(format!("{what} at global step {}", self.step + 1))
    }

    fn adam_step(&mut self, phase: Phase, j: usize, len: usize) -> Result<Option<ReportRow>> {
        let mut g = Graph::new();
        let mv = self.model.bind(&mut g, true);
        let (seq, fw, _) = forward(&mut g, &self.model, &mv, &self.prob, &self.cfg, None)?;
        let mut loss = fw.pde;
        let mut gen = 0.0;
        if phase == Phase::Adam && self.cfg.sampling != Sampling::None {
            if (j - 1) % self.period == 0 {
                let res = fw.res.values(&g)?;
                self.sample(&res)?;
            }
            let (l, gv, empty) = add_gen(
                &mut g,
                loss,
                &fw,
                self.batch.as_ref(),
                &self.prob,
                self.cfg.weights.alpha,
            )?;
            loss = l;
            gen = gv;
            self.empty_batches += usize::from(empty);
        }
        if !g.scalar(loss).is_finite() {
            return Err(self.abort("training loss"));
        }
        let row = if self.logs(j, len) {
            let pred = seq.values(&g)?;
            Some(self.row(phase, j, &pred, &fw, gen)?)
        } else {
            None
        };
        g.backward(loss)?;
        self.model.params.zero_grad();
        self.model.params.collect_grads(&g, &mv.all)?;
        self.opt.step(&mut self.model.params)?;
        Ok(row)
    }

    fn lbfgs_step(&mut self, j: usize, len: usize) -> Result<Option<ReportRow>> {
        let mut x = self.model.params.flatten();
        let mut probe = self.model.clone();
        let mut first: Option<(FieldSequence, Forward, f64)> = None;
        let mut empty_first = false;
        let batch = self.batch.clone();
        let (prob, cfg) = (&self.prob, &self.cfg);
        // slice weights stay at their start-point values so that the line
        // search sees a smooth objective
        let mut pinned: Option<Vec<f64>> = None;
        let out = self.lbfgs.step(&mut x, |flat| {
            probe.params.assign_flat(flat)?;
            let mut g = Graph::new();
            let mv = probe.bind(&mut g, true);
            let (seq, fw, cw) = forward(&mut g, &probe, &mv, prob, cfg, pinned.as_deref())?;
            pinned.get_or_insert(cw);
            let (loss, gv, empty) = add_gen(&mut g, fw.pde, &fw, batch.as_ref(), prob, cfg.weights.alpha)?;
            let value = g.scalar(loss);
            g.backward(loss)?;
            probe.params.zero_grad();
            probe.params.collect_grads(&g, &mv.all)?;
            if first.is_none() {
                empty_first = empty;
                first = Some((seq.values(&g)?, fw, gv));
            }
            Ok((value, probe.params.flat_grad()))
        });
        self.empty_batches += usize::from(empty_first);
        let row = match (&first, self.logs(j, len)) {
            (Some((pred, fw, gen)), true) => Some(self.row(Phase::Lbfgs, j, pred, fw, *gen)?),
            _ => None,
        };
        match out {
            Ok(_) => self.model.params.assign_flat(&x)?,
            Err(Error::LineSearch(n)) => {
                log::warn!("L-BFGS line search failed after {n} trials; history cleared");
                self.line_search_failures += 1;
            }
            Err(Error::Numeric(_)) => return Err(self.abort("L-BFGS loss")),
            Err(e) => return Err(e),
        }
        Ok(row)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut t: Vec<(String, Tensor)> = Vec::new();
        for (n, v) in self.model.params.iter() {
            t.push((format!("model.{n}"), plain(v)));
        }
        if let Some(gan) = &self.gan {
            for (n, v) in gan.gen.iter().chain(gan.disc.iter()) {
                t.push((n.to_string(), plain(v)));
            }
        }
        let meta = [
            ("meta.step", self.step as f64),
            ("meta.gan_rounds", self.gan_rounds as f64),
            ("meta.empty_batches", self.empty_batches as f64),
            ("meta.line_search_failures", self.line_search_failures as f64),
            ("meta.l_d", self.l_d),
            ("meta.l_g", self.l_g),
            ("meta.pretrain_rel_mse", self.pretrain_rel_mse),
            ("meta.period", self.period as f64),
        ];
        for (n, v) in meta {
            t.push((n.into(), Tensor::scalar(v)));
        }
        if let Some(b) = &self.batch {
            let n = b.len();
            let coords = b.coords.iter().flat_map(|&(a, x, y)| [a, x, y]).collect();
            t.push(("points.coords".into(), Tensor::new(&[n, 3], coords).unwrap()));
            t.push(("points.residual".into(), Tensor::new(&[n], b.residual.clone()).unwrap()));
            t.push(("points.label".into(), Tensor::new(&[n], b.label.clone()).unwrap()));
            t.push(("points.d_score".into(), Tensor::new(&[n], b.d_score.clone()).unwrap()));
            let acc = b.accepted.iter().map(|&a| f64::from(u8::from(a))).collect();
            t.push(("points.accepted".into(), Tensor::new(&[n], acc).unwrap()));
        }
        t.push(("report.rows".into(), self.report.to_tensor()));
        let mut o = self.opt.export("opt.model");
        if let Some(gan) = &self.gan {
            o.extend(gan.gen_opt.export("opt.gen"));
            o.extend(gan.disc_opt.export("opt.disc"));
        }
        o.extend(self.lbfgs.export("opt.lbfgs"));
        Checkpoint {
            config_hash: self.cfg.hash(),
            tensors: t,
            optimizer: o,
        }
    }

    /// Restores a run from `path`; the checkpoint must come from the same
    /// config.
    pub fn resume(cfg: TrainConfig, path: &Path) -> Result<Self> {
        let c = Checkpoint::load_for(path, cfg.hash())?;
        let period = c.require("meta.period")?.data()[0] as usize;
        let mut tr = Self::new(cfg, period)?;
        tr.restore(&c)?;
        Ok(tr)
    }

    pub fn restore(&mut self, c: &Checkpoint) -> Result<()> {
        if c.config_hash != self.cfg.hash() {
            return Err(Error::Config("checkpoint config hash differs from the current config".into()));
        }
        let load = |set: &mut crate::ParamSet, prefix: &str| -> Result<()> {
            let names: Vec<String> = set.iter().map(|(n, _)| n.to_string()).collect();
            for n in names {
                let key = format!("{prefix}{n}");
                let src = c.require(&key)?;
                let dst = set.get_mut(&n).unwrap();
                if src.shape() != dst.shape() {
                    return Err(Error::Dimension(format!("checkpoint tensor {key} has shape {:?}", src.shape())));
                }
                dst.data_mut().copy_from_slice(src.data());
            }
            Ok(())
        };
        load(&mut self.model.params, "model.")?;
        let find = |n: &str| c.get(n).cloned();
        self.opt.import("opt.model", &find)?;
        if let Some(gan) = &mut self.gan {
            load(&mut gan.gen, "")?;
            load(&mut gan.disc, "")?;
            gan.gen_opt.import("opt.gen", &find)?;
            gan.disc_opt.import("opt.disc", &find)?;
        }
        self.lbfgs.import("opt.lbfgs", &find)?;
        let scalar = |n: &str| -> Result<f64> { Ok(c.require(n)?.data()[0]) };
        self.step = scalar("meta.step")? as usize;
        self.gan_rounds = scalar("meta.gan_rounds")? as usize;
        self.empty_batches = scalar("meta.empty_batches")? as usize;
        self.line_search_failures = scalar("meta.line_search_failures")? as usize;
        self.l_d = scalar("meta.l_d")?;
        self.l_g = scalar("meta.l_g")?;
        self.pretrain_rel_mse = scalar("meta.pretrain_rel_mse")?;
        self.period = scalar("meta.period")? as usize;
        self.batch = match c.get("points.coords") {
            None => None,
            Some(coords) => Some(PointBatch {
                coords: coords.data().chunks(3).map(|v| (v[0], v[1], v[2])).collect(),
                residual: c.require("points.residual")?.data().to_vec(),
                label: c.require("points.label")?.data().to_vec(),
                d_score: c.require("points.d_score")?.data().to_vec(),
                accepted: c.require("points.accepted")?.data().iter().map(|&a| a != 0.0).collect(),
            }),
        };
        self.report = RunReport::from_tensor(c.require("report.rows")?)?;
        Ok(())
    }
}

fn plain(t: &Tensor) -> Tensor {
    Tensor::new(t.shape(), t.data().to_vec()).unwrap()
}

/// Alternating loop: sampler refresh on every iteration.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    Trainer::new(cfg.clone(), 1)?.run()
}

/// Skip-step loop: sampler refresh when `(j - 1) mod M == 0`, reusing the
/// last batch in between.
pub fn train_skip(cfg: &TrainConfig) -> Result<TrainOutcome> {
    Trainer::new(cfg.clone(), cfg.skip)?.run()
}
