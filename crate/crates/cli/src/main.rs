use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use twmark::attacks::AttackConfig;
use twmark::experiments::{self, ExperimentConfig, ExperimentError, Lab};
use twmark::flsim::MlpShape;
use twmark::par;
use twmark::verify::{VerificationReport, VerifyError};

#[derive(Parser)]
#[command(name = "twmark", version, about = "Threshold watermarking for federated learning")]
struct Cli {
    /// Worker threads (overrides TWMARK_WORKERS).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment config (TOML); defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set protocol.c=0.05`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn lab(&self) -> Result<Lab> {
        let mut cfg = ExperimentConfig::load_with_overrides(self.config.as_deref(), &self.overrides)?;
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        log::info!("config hash {}", cfg.hash());
        Ok(Lab::new(cfg)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train unwatermarked models and write the null-distribution table.
    Calibrate(ConfigArgs),
    /// Run the watermarked protocol and write checkpoints, key files and metrics.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Seed to train (defaults to every configured seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Apply one removal attack to a watermarked run.
    Attack {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Inline TOML, e.g. `kind = "prune_magnitude", ratio = 0.5`.
        #[arg(long)]
        spec: String,
    },
    /// Coalition verification of a model checkpoint.
    Verify {
        #[arg(long)]
        model: PathBuf,
        /// Key files of the coalition members.
        #[arg(long = "key", required = true, num_args = 1..)]
        keys: Vec<PathBuf>,
        #[arg(long)]
        calibration: PathBuf,
        #[arg(long, default_value_t = 32)]
        inputs: usize,
        #[arg(long, default_value_t = 128)]
        hidden: usize,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = twmark::verify::DEFAULT_Z_STAR)]
        z_star: f64,
        /// Also open the setup commitment with the supplied shares.
        #[arg(long)]
        check_commitment: bool,
    },
    /// Sweep the client count for both methods.
    Scalability(ConfigArgs),
    /// Sweep the embedding strength.
    Fidelity(ConfigArgs),
    /// Run the configured attack grid.
    Robustness(ConfigArgs),
    /// Collect summaries from an output directory.
    Report {
        #[arg(long, default_value = "out")]
        dir: PathBuf,
    },
}

fn parse_attack(spec: &str) -> Result<AttackConfig> {
    #[derive(serde::Deserialize)]
    struct Wrap {
        v: AttackConfig,
    }
    let w: Wrap = toml::from_str(&format!("v = {{ {spec} }}"))
        .with_context(|| format!("cannot parse attack spec '{spec}'"))?;
    Ok(w.v)
}

fn print_verify(r: &VerificationReport) {
    println!("cosine {:.6}", r.cosine);
    println!("z {:.4}", r.z);
    println!("z_star {}", r.z_star);
    println!("coalition {}", r.coalition_size);
    if let Some(ok) = r.commitment_ok {
        println!("commitment {}", if ok { "ok" } else { "mismatch" });
    }
    println!("decision {}", r.decision());
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Calibrate(c) => {
            let t = c.lab()?.cmd_calibrate()?;
            println!("mu {:.6e} sigma {:.6e} samples {}", t.mu, t.sigma, t.n_models * t.n_keys_per_model);
            if t.normality_warning {
                eprintln!("warning: null distribution deviates from normal");
            }
        }
        Command::Train { cfg, seed } => {
            let lab = cfg.lab()?;
            let seeds = seed.map_or_else(|| lab.config.seeds.clone(), |s| vec![s]);
            for s in seeds {
                let rows = lab.cmd_train(s)?;
                let last = rows.last().context("empty run")?;
                println!(
                    "seed {s}: accuracy {:.4} z {:.2}",
                    last.accuracy,
                    last.z.unwrap_or(f64::NAN)
                );
            }
        }
        Command::Attack { cfg, seed, spec } => {
            let attack = parse_attack(&spec)?;
            for r in cfg.lab()?.cmd_attack(seed, &attack)? {
                println!("{} {} step {} accuracy {:.4} z {:.2} {}", r.attack, r.params, r.step, r.accuracy, r.z, r.decision);
            }
        }
        Command::Verify { model, keys, calibration, inputs, hidden, classes, z_star, check_commitment } => {
            let shape = MlpShape { inputs, hidden, classes };
            let r = experiments::cmd_verify(&model, &keys, &calibration, &shape, z_star, check_commitment)?;
            print_verify(&r);
            let ok = r.accept && r.commitment_ok != Some(false);
            return Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) });
        }
        Command::Scalability(c) => {
            let s = c.lab()?.cmd_scalability()?;
            for p in &s.points {
                println!(
                    "K {:>4}: threshold z {:.2} (cv {:.3})  baseline z {:.2}",
                    p.k, p.threshold_z_mean, p.threshold_z_cv, p.baseline_z_mean
                );
            }
            println!("baseline exponent {:.3}", s.baseline_exponent);
        }
        Command::Fidelity(c) => {
            let s = c.lab()?.cmd_fidelity()?;
            for (r, drop) in s.rows.iter().zip(&s.accuracy_drop_pp) {
                println!(
                    "c {:.3}: accuracy {:.4} ± {:.4} (drop {:.2} pp)  z {:.2} ± {:.2}",
                    r.c, r.accuracy_mean, r.accuracy_std, drop, r.z_mean, r.z_std
                );
            }
        }
        Command::Robustness(c) => {
            let s = c.lab()?.cmd_robustness()?;
            for f in &s.frontiers {
                println!("{}: {} frontier points", f.budget, f.points.len());
            }
        }
        Command::Report { dir } => print!("{}", experiments::cmd_report(&dir)?),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let workers = cli.workers.or_else(par::workers_from_env);
    match par::with_workers(workers, || run(cli.command)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if let Some(ExperimentError::Verify(VerifyError::BelowThreshold { have, need })) = e.downcast_ref() {
                eprintln!("coalition has {have} shares, {need} required");
            }
            ExitCode::from(2)
        }
    }
}
