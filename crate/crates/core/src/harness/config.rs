//! Run configuration and its `key = value` text form.
//!
//! ```text
//! [problem]
//! name = klein-gordon
//! n = 32
//!
//! [train]
//! n_iterations = 2000
//! ```
//!
//! Unset keys take the desk defaults; unknown keys and keys that do not
//! apply to the selected problem are rejected.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fdops::{Boundary, DomainSpec};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::problems::{ACParams, KGParams, NSParams, PDEProblem, ProblemName};
use crate::refsolve::Stepper;
use crate::sampler::{GanConfig, LabelStrategy};

/// Where collocation points for the generated-point loss come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    /// Transformer alone, no extra points.
    None,
    Random,
    Uniform,
    Rar,
    Gan(LabelStrategy),
}

impl Sampling {
    pub fn as_str(self) -> &'static str {
        match self {
            Sampling::None => "none",
            Sampling::Random => "random",
            Sampling::Uniform => "uniform",
            Sampling::Rar => "rar",
            Sampling::Gan(s) => s.as_str(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => Sampling::None,
            "random" => Sampling::Random,
            "uniform" => Sampling::Uniform,
            "rar" => Sampling::Rar,
            other => {
                let l = LabelStrategy::parse(other)?;
                if !l.uses_gan() {
                    unreachable!("random and uniform are matched above");
                }
                Sampling::Gan(l)
            }
        })
    }
}

/// Equation, grid and coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct ProblemConfig {
    pub name: ProblemName,
    pub n: usize,
    pub nt: usize,
    pub horizon: f64,
    pub length: f64,
    pub eps: f64,
    pub phi: f64,
    pub radius: f64,
    pub m: f64,
    pub re: f64,
    pub rho: f64,
    pub nu: f64,
}

impl ProblemConfig {
    pub fn desk(name: ProblemName) -> Self {
        let base = Self {
            name,
            n: 32,
            nt: 16,
            horizon: 0.3,
            length: 1.0,
            eps: 0.1,
            phi: 1.0,
            radius: 0.25,
            m: 3.0,
            re: 100.0,
            rho: 1.0,
            nu: 1.0,
        };
        match name {
            ProblemName::AllenCahn => Self { horizon: 0.016, ..base },
            ProblemName::KleinGordon => base,
            ProblemName::NavierStokes => Self {
                nt: 12,
                horizon: 1.0,
                length: 2.0 * PI,
                ..base
            },
        }
    }

    fn keys(name: ProblemName) -> &'static [&'static str] {
        match name {
            ProblemName::AllenCahn => &["eps", "phi", "radius"],
            ProblemName::KleinGordon => &["m"],
            ProblemName::NavierStokes => &["re", "rho", "nu"],
        }
    }

    pub fn build(&self) -> Result<PDEProblem> {
        let boundary = match self.name {
            ProblemName::KleinGordon => Boundary::Dirichlet,
            _ => Boundary::Periodic,
        };
        let d = DomainSpec::square(self.n, self.length, self.nt, self.horizon, boundary)?;
        match self.name {
            ProblemName::AllenCahn => PDEProblem::allen_cahn(
                d,
                ACParams {
                    eps: self.eps,
                    phi: self.phi,
                },
                self.radius,
            ),
            ProblemName::KleinGordon => PDEProblem::klein_gordon(d, KGParams { m: self.m }),
            ProblemName::NavierStokes => PDEProblem::navier_stokes(
                d,
                NSParams {
                    re: self.re,
                    rho: self.rho,
                    nu: self.nu,
                },
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub problem: ProblemConfig,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub increment: bool,
    pub weights: LossWeights,
    pub sampling: Sampling,
    pub gan: GanConfig,
    pub seed: u64,
    pub n_pretrain: usize,
    pub n_iterations: usize,
    /// GAN refresh period `M`.
    pub skip: usize,
    pub lr: f64,
    pub lbfgs_steps: usize,
    pub lbfgs_memory: usize,
    pub log_every: usize,
    /// Write an intermediate checkpoint every this many iterations (0: only
    /// at the end).
    pub checkpoint_every: usize,
    pub reference_factor: usize,
    pub reference_stepper: Stepper,
    /// Not part of the config text or its hash.
    pub out_dir: PathBuf,
}

impl TrainConfig {
    pub fn desk(name: ProblemName) -> Self {
        Self {
            problem: ProblemConfig::desk(name),
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            increment: false,
            weights: LossWeights::default(),
            sampling: Sampling::Gan(LabelStrategy::Sparse),
            gan: GanConfig::default(),
            seed: 0,
            n_pretrain: 300,
            n_iterations: 2000,
            skip: 1,
            lr: 1e-3,
            lbfgs_steps: 200,
            lbfgs_memory: 10,
            log_every: 50,
            checkpoint_every: 0,
            reference_factor: 4,
            reference_stepper: Stepper::SemiImplicit,
            out_dir: PathBuf::from("out"),
        }
    }

    pub fn model_config(&self, prob: &PDEProblem) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            increment: self.increment,
            seed: self.seed,
            ..ModelConfig::for_problem(prob)
        }
    }

    pub fn gan_config(&self) -> GanConfig {
        GanConfig {
            seed: self.seed ^ 0x9e37_79b9_7f4a_7c15,
            ..self.gan.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_iterations == 0 {
            return Err(Error::Config("n_iterations must be >= 1".into()));
        }
        if self.skip == 0 {
            return Err(Error::Config("skip must be >= 1".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be > 0".into()));
        }
        if self.lbfgs_memory == 0 {
            return Err(Error::Config("lbfgs_memory must be >= 1".into()));
        }
        if self.reference_factor == 0 {
            return Err(Error::Config("reference_factor must be >= 1".into()));
        }
        self.weights.validate()
    }

    /// Canonical text form; parsing it gives back an equal config.
    pub fn to_text(&self) -> String {
        let p = &self.problem;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        let f = |v: f64| format!("{v:?}");
        kv("[problem]", String::new());
        kv("name", p.name.as_str().into());
        kv("n", p.n.to_string());
        kv("nt", p.nt.to_string());
        kv("horizon", f(p.horizon));
        kv("length", f(p.length));
        for &k in ProblemConfig::keys(p.name) {
            let v = match k {
                "eps" => p.eps,
                "phi" => p.phi,
                "radius" => p.radius,
                "m" => p.m,
                "re" => p.re,
                "rho" => p.rho,
                _ => p.nu,
            };
            kv(k, f(v));
        }
        kv("[model]", String::new());
        kv("d_model", self.d_model.to_string());
        kv("n_layers", self.n_layers.to_string());
        kv("n_heads", self.n_heads.to_string());
        kv("d_ff", self.d_ff.to_string());
        kv("increment", self.increment.to_string());
        let w = &self.weights;
        kv("[loss]", String::new());
        kv("w_i", f(w.w_i));
        kv("w_b", f(w.w_b));
        kv("w_f", f(w.w_f));
        kv("lambda_causal", f(w.lambda_causal));
        kv("alpha", f(w.alpha));
        kv("beta", f(w.beta));
        kv(
            "epsilon_causal",
            w.epsilon_causal.map_or("adaptive".into(), f),
        );
        let g = &self.gan;
        kv("[gan]", String::new());
        kv("sampling", self.sampling.as_str().into());
        kv("noise_dim", g.noise_dim.to_string());
        kv("width", g.width.to_string());
        kv("lr_g", f(g.lr_g));
        kv("lr_d", f(g.lr_d));
        kv("n_points", g.n_points.to_string());
        kv("beta1", f(g.beta1));
        kv("out_gain", f(g.out_gain));
        kv("[train]", String::new());
        kv("seed", self.seed.to_string());
        kv("n_pretrain", self.n_pretrain.to_string());
        kv("n_iterations", self.n_iterations.to_string());
        kv("skip", self.skip.to_string());
        kv("lr", f(self.lr));
        kv("lbfgs_steps", self.lbfgs_steps.to_string());
        kv("lbfgs_memory", self.lbfgs_memory.to_string());
        kv("log_every", self.log_every.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("reference_factor", self.reference_factor.to_string());
        kv("reference_stepper", self.reference_stepper.as_str().into());
        // section headers were written as "key = "; tidy them
        s.lines()
            .map(|l| {
                if l.starts_with('[') {
                    l.trim_end_matches(" = ").to_string()
                } else {
                    l.to_string()
                }
            })
            .collect::<Vec<_>>()
            .join("\n")
            + "\n"
    }

    /// First 8 bytes of the SHA-256 of [`TrainConfig::to_text`].
    pub fn hash(&self) -> [u8; 8] {
        let d = Sha256::digest(self.to_text().as_bytes());
        let mut h = [0u8; 8];
        h.copy_from_slice(&d[..8]);
        h
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: BTreeMap<String, Vec<(usize, String, String)>> = BTreeMap::new();
        let mut current: Option<String> = None;
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim().to_string();
                if !["problem", "model", "loss", "gan", "train"].contains(&name.as_str()) {
                    return Err(Error::Config(format!("line {}: unknown section [{name}]", ln + 1)));
                }
                current = Some(name);
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", ln + 1)))?;
            let sec = current
                .clone()
                .ok_or_else(|| Error::Config(format!("line {}: key outside a section", ln + 1)))?;
            sections
                .entry(sec)
                .or_default()
                .push((ln + 1, k.trim().to_string(), v.trim().to_string()));
        }

        let name = sections
            .get("problem")
            .and_then(|kvs| kvs.iter().find(|(_, k, _)| k == "name"))
            .map(|(_, _, v)| ProblemName::parse(v))
            .transpose()?
            .unwrap_or(ProblemName::KleinGordon);
        let mut cfg = Self::desk(name);

        for (sec, kvs) in &sections {
            for (ln, k, v) in kvs {
                cfg.apply(sec, k, v)
                    .map_err(|e| Error::Config(format!("line {ln}: [{sec}] {k}: {e}")))?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, sec: &str, k: &str, v: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("cannot parse '{v}'")))
        }
        let unknown = || Err(Error::Config("unknown key".into()));
        match sec {
            "problem" => {
                let p = &mut self.problem;
                if ProblemConfig::keys(ProblemName::AllenCahn)
                    .iter()
                    .chain(ProblemConfig::keys(ProblemName::KleinGordon))
                    .chain(ProblemConfig::keys(ProblemName::NavierStokes))
                    .any(|&x| x == k)
                    && !ProblemConfig::keys(p.name).contains(&k)
                {
                    return Err(Error::Config(format!(
                        "not a parameter of {}",
                        p.name.as_str()
                    )));
                }
                match k {
                    "name" => {}
                    "n" => p.n = num(v)?,
                    "nt" => p.nt = num(v)?,
                    "horizon" => p.horizon = num(v)?,
                    "length" => p.length = num(v)?,
                    "eps" => p.eps = num(v)?,
                    "phi" => p.phi = num(v)?,
                    "radius" => p.radius = num(v)?,
                    "m" => p.m = num(v)?,
                    "re" => p.re = num(v)?,
                    "rho" => p.rho = num(v)?,
                    "nu" => p.nu = num(v)?,
                    _ => return unknown(),
                }
            }
            "model" => match k {
                "d_model" => self.d_model = num(v)?,
                "n_layers" => self.n_layers = num(v)?,
                "n_heads" => self.n_heads = num(v)?,
                "d_ff" => self.d_ff = num(v)?,
                "increment" => self.increment = num(v)?,
                _ => return unknown(),
            },
            "loss" => {
                let w = &mut self.weights;
                match k {
                    "w_i" => w.w_i = num(v)?,
                    "w_b" => w.w_b = num(v)?,
                    "w_f" => w.w_f = num(v)?,
                    "lambda_causal" => w.lambda_causal = num(v)?,
                    "alpha" => w.alpha = num(v)?,
                    "beta" => w.beta = num(v)?,
                    "epsilon_causal" => {
                        w.epsilon_causal = if v == "adaptive" { None } else { Some(num(v)?) }
                    }
                    _ => return unknown(),
                }
            }
            "gan" => {
                let g = &mut self.gan;
                match k {
                    "sampling" => self.sampling = Sampling::parse(v)?,
                    "noise_dim" => g.noise_dim = num(v)?,
                    "width" => g.width = num(v)?,
                    "lr_g" => g.lr_g = num(v)?,
                    "lr_d" => g.lr_d = num(v)?,
                    "n_points" => g.n_points = num(v)?,
                    "beta1" => g.beta1 = num(v)?,
                    "out_gain" => g.out_gain = num(v)?,
                    _ => return unknown(),
                }
            }
            "train" => match k {
                "seed" => self.seed = num(v)?,
                "n_pretrain" => self.n_pretrain = num(v)?,
                "n_iterations" => self.n_iterations = num(v)?,
                "skip" => self.skip = num(v)?,
                "lr" => self.lr = num(v)?,
                "lbfgs_steps" => self.lbfgs_steps = num(v)?,
                "lbfgs_memory" => self.lbfgs_memory = num(v)?,
                "log_every" => self.log_every = num(v)?,
                "checkpoint_every" => self.checkpoint_every = num(v)?,
                "reference_factor" => self.reference_factor = num(v)?,
                "reference_stepper" => {
                    self.reference_stepper = match v {
                        "semi-implicit" => Stepper::SemiImplicit,
                        "rk4" => Stepper::Rk4,
                        _ => return Err(Error::Config(format!("unknown stepper '{v}'"))),
                    }
                }
                _ => return unknown(),
            },
            _ => return unknown(),
        }
        Ok(())
    }
}
