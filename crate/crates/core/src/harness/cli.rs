//! `phytf` subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::FieldSequence;
use crate::model::Model;
use crate::problems::ProblemName;
use crate::refsolve::{fine_domain, solve_reference};
use crate::sampler::{baseline_sample, residual_magnitude, Baseline, Gan, LabelStrategy};

use super::config::{Sampling, TrainConfig};
use super::io::{atomic_write, fmt_f64, read_grid, write_grid, Checkpoint};
use super::train::{pretrain, relative_mse, Trainer};

#[derive(Parser, Debug)]
#[command(name = "phytf", version, about = "Physics-informed transformer training with adversarial collocation sampling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Config file; unset keys take the desk defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Adam iterations after pretraining.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Sampler refresh period.
    #[arg(long)]
    pub skip: Option<usize>,
    /// allen-cahn, klein-gordon or navier-stokes; overrides the config.
    #[arg(long)]
    pub problem: Option<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Alternating GAN/PINN training.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint written by the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Cached reference grid.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Skip-step training with the configured or given period.
    TrainSkip {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Solves the reference and caches it as `reference.pgrd`.
    Reference {
        #[command(flatten)]
        common: Common,
    },
    /// Relative MSE of a prediction grid or a checkpointed model.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        reference: PathBuf,
    },
    /// One sampler round on the model's residual, dumped as CSV.
    SampleMap {
        #[command(flatten)]
        common: Common,
        /// Model (and GAN) to sample from; otherwise a freshly pretrained
        /// model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Trains every sampling strategy and tabulates the results.
    CompareStrategies {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        reference: Option<PathBuf>,
    },
}

fn load_config(c: &Common) -> Result<TrainConfig> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            if let Some(name) = &c.problem {
                // the problem must be chosen before its keys are checked
                let name = ProblemName::parse(name)?;
                let head = format!("[problem]\nname = {}\n", name.as_str());
                TrainConfig::parse(&(head + &strip_name(&text)))?
            } else {
                TrainConfig::parse(&text)?
            }
        }
        None => TrainConfig::desk(match &c.problem {
            Some(n) => ProblemName::parse(n)?,
            None => ProblemName::KleinGordon,
        }),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(n) = c.iterations {
        cfg.n_iterations = n;
    }
    if let Some(m) = c.skip {
        cfg.skip = m;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn strip_name(text: &str) -> String {
    text.lines()
        .filter(|l| !l.split('#').next().unwrap_or("").trim().starts_with("name"))
        .map(|l| format!("{l}\n"))
        .collect()
}

fn load_reference(path: &Path) -> Result<FieldSequence> {
    if !path.exists() {
        return Err(Error::Config(format!("reference cache {} not found", path.display())));
    }
    FieldSequence::from_tensor(read_grid(path)?)
}

fn trainer(cfg: TrainConfig, skip: usize, resume: Option<&Path>, reference: Option<&Path>) -> Result<Trainer> {
    match (resume, reference) {
        (Some(p), _) => Trainer::resume(cfg, p),
        (None, Some(r)) => Trainer::with_reference(cfg, skip, load_reference(r)?),
        (None, None) => Trainer::new(cfg, skip),
    }
}

/// Table rows in the order of the strategy comparison.
pub fn strategy_rows() -> [(&'static str, Sampling); 6] {
    [
        ("without-GAN", Sampling::None),
        ("Random", Sampling::Random),
        ("Uniform", Sampling::Uniform),
        ("Normalization", Sampling::Gan(LabelStrategy::Normalization)),
        ("Multi-Labels", Sampling::Gan(LabelStrategy::MultiLabel)),
        ("Sparse-Labels", Sampling::Gan(LabelStrategy::Sparse)),
    ]
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, resume, reference } => {
            let cfg = load_config(&common)?;
            let out = trainer(cfg, 1, resume.as_deref(), reference.as_deref())?.run()?;
            println!("{}", fmt_f64(out.summary.rel_mse));
        }
        Command::TrainSkip { common, resume, reference } => {
            let cfg = load_config(&common)?;
            let skip = cfg.skip;
            let out = trainer(cfg, skip, resume.as_deref(), reference.as_deref())?.run()?;
            println!("{}", fmt_f64(out.summary.rel_mse));
        }
        Command::Reference { common } => {
            let cfg = load_config(&common)?;
            let prob = cfg.problem.build()?;
            let fine = fine_domain(&prob.domain, cfg.reference_factor)?;
            let run = solve_reference(&prob, fine, cfg.reference_stepper)?;
            write_grid(&cfg.out_dir.join("reference.pgrd"), run.output.tensor())?;
            let mut e = String::from("snapshot,energy\n");
            for (k, v) in run.energy.iter().enumerate() {
                e.push_str(&format!("{k},{}\n", fmt_f64(*v)));
            }
            atomic_write(&cfg.out_dir.join("reference_energy.csv"), e.as_bytes())?;
            if prob.has_analytic() {
                let exact = prob.analytic_sequence()?;
                println!("{}", fmt_f64(relative_mse(&run.output, &exact)?));
            }
        }
        Command::Eval {
            common,
            pred,
            checkpoint,
            reference,
        } => {
            let reference = load_reference(&reference)?;
            let pred = match (pred, checkpoint) {
                (Some(p), None) => FieldSequence::from_tensor(read_grid(&p)?)?,
                (None, Some(c)) => {
                    let cfg = load_config(&common)?;
                    let mut t = Trainer::with_reference(cfg.clone(), cfg.skip, reference.clone())?;
                    t.restore(&Checkpoint::load_for(&c, cfg.hash())?)?;
                    t.evaluate()?.1
                }
                _ => return Err(Error::Config("eval needs exactly one of --pred and --checkpoint".into())),
            };
            println!("{}", fmt_f64(relative_mse(&pred, &reference)?));
        }
        Command::SampleMap { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let prob = cfg.problem.build()?;
            let (model, gan) = match checkpoint {
                Some(c) => {
                    let mut t = Trainer::with_reference(cfg.clone(), cfg.skip, FieldSequence::zeros(prob.domain.nt, prob.channels(), prob.domain.ny, prob.domain.nx))?;
                    t.persist = false;
                    t.restore(&Checkpoint::load_for(&c, cfg.hash())?)?;
                    (t.model, t.gan)
                }
                None => {
                    let mut m = Model::new(cfg.model_config(&prob))?;
                    pretrain(&mut m, &prob, &cfg)?;
                    (m, None)
                }
            };
            let res = prob.residual(&model.rollout(&prob, prob.domain.nt - 1)?)?;
            let mags = residual_magnitude(&res);
            let spec = &prob.domain;
            let n = cfg.gan.n_points;
            let batch = match cfg.sampling {
                Sampling::Gan(s) => {
                    let mut gan = match gan {
                        Some(g) => g,
                        None => Gan::new(cfg.gan_config())?,
                    };
                    gan.round(&res, spec, s, cfg.weights.beta, cfg.seed)?.batch
                }
                Sampling::Random => baseline_sample(Baseline::Random, &mags, spec, n, cfg.seed)?,
                Sampling::Uniform | Sampling::None => baseline_sample(Baseline::Uniform, &mags, spec, n, cfg.seed)?,
                Sampling::Rar => baseline_sample(Baseline::Rar, &mags, spec, n, cfg.seed)?,
            };
            let mut s = String::from("t,x,y,residual,label,d_score,accepted\n");
            for k in 0..batch.len() {
                let (t, x, y) = batch.coords[k];
                s.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    fmt_f64(t),
                    fmt_f64(x),
                    fmt_f64(y),
                    fmt_f64(batch.residual[k]),
                    fmt_f64(batch.label[k]),
                    fmt_f64(batch.d_score[k]),
                    u8::from(batch.accepted[k])
                ));
            }
            atomic_write(&cfg.out_dir.join("sample_map.csv"), s.as_bytes())?;
            println!("{} points, {} accepted", batch.len(), batch.accepted_count());
        }
        Command::CompareStrategies { common, reference } => {
            let base = load_config(&common)?;
            let reference = match reference {
                Some(r) => load_reference(&r)?,
                None => super::train::reference_for(&base.problem.build()?, &base)?,
            };
            let rows: Vec<Result<String>> = strategy_rows()
                .par_iter()
                .map(|(label, sampling)| {
                    let mut cfg = base.clone();
                    cfg.sampling = *sampling;
                    cfg.out_dir = base.out_dir.join(label);
                    let skip = cfg.skip;
                    let out = Trainer::with_reference(cfg, skip, reference.clone())?.run()?;
                    let s = out.summary;
                    Ok(format!(
                        "{label},{},{},{},{}\n",
                        fmt_f64(s.rel_mse),
                        fmt_f64(s.mse_f),
                        s.p_causal,
                        s.gan_rounds
                    ))
                })
                .collect();
            let mut csv = String::from("strategy,rel_mse,mse_f,p_causal,gan_rounds\n");
            for r in rows {
                csv.push_str(&r?);
            }
            atomic_write(&base.out_dir.join("compare.csv"), csv.as_bytes())?;
            print!("{csv}");
        }
    }
    Ok(())
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = std::env::var("PHYTF_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // a pool may already exist when called repeatedly in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
