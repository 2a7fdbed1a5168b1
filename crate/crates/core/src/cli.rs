//! Command-line front end. `run_command` returns the process exit code:
//! 0 on success, 1 when a run fails, 2 for usage and configuration errors.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::checkpoint::{
    get_reference, has_reference, load_checkpoint, policy_from_checkpoint, put_critic,
    put_reference, robust_checkpoint, save_checkpoint, Checkpoint,
};
use crate::config::RunConfig;
use crate::env::{sample_dynamics, DynamicsParams};
use crate::error::{Error, Result};
use crate::eval::{
    ablation_matrix, correlation_report, correlation_rows, correlation_summary, payload_sweep,
    push_grid, randomized_suite, run_trials, write_ablation, write_correlation,
    write_correlation_summary, write_curves, write_push_trials, MetricsRow, Scenario,
};
use crate::pipeline::{train_reference, train_robust, Variant};
use crate::rng::{derive_seed, stream_rng};

/// Environment variable that overrides the default output directory.
pub const OUT_DIR_ENV: &str = "REFTRACK_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "reftrack", version, about = "Reference-guided velocity tracking on a planar rigid body")]
struct Cli {
    /// TOML run configuration; defaults apply to every omitted key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: $REFTRACK_OUT_DIR, else `runs`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Load checkpoints even when their config fingerprint differs.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the ideal policy, dynamics model and sigma statistics on fixed dynamics.
    TrainReference,
    /// Train a robust policy under randomized dynamics.
    TrainPolicy {
        #[arg(long)]
        variant: String,
        /// Reference checkpoint; required by every variant except A.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Evaluate a trained policy.
    Eval {
        #[arg(value_enum)]
        protocol: Protocol,
        /// Policy checkpoint (robust or reference).
        #[arg(long)]
        policy: PathBuf,
    },
    /// Train and evaluate the variant matrix over the configured seeds.
    Ablate {
        /// Variant letters, e.g. `ABF` (default from config).
        #[arg(long)]
        variants: Option<String>,
        /// Comma-separated seeds (default from config).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Roll out one deterministic episode and dump the trajectory.
    Replay {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, default_value_t = 500)]
        steps: u32,
        /// Body-frame command `vx,vy,wz`.
        #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [1.0, 0.0, 0.0])]
        command: Vec<f64>,
        /// Sample randomized dynamics instead of the nominal plant.
        #[arg(long)]
        randomized: bool,
        /// Payload override (kg).
        #[arg(long)]
        payload: Option<f64>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Protocol {
    Tracking,
    Payload,
    Push,
    Correlation,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::UnknownVariant(_)
        | Error::InvalidArgument(_)
        | Error::MissingReference(_)
        | Error::FingerprintMismatch { .. } => 2,
        _ => 1,
    }
}

pub fn run_command<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let out = out_dir(cli.out);
    std::fs::create_dir_all(&out)?;
    let fp = cfg.fingerprint();
    let load = |p: &Path| load_checkpoint(p, Some(&fp), cli.force);

    match cli.cmd {
        Command::TrainReference => {
            let r = train_reference(&cfg, cfg.seed, |row| {
                eprintln!("iter {:>4} lin {:.3} ang {:.3} level {}", row.iter, row.lin_score, row.ang_score, row.level)
            })?;
            let mut ck = Checkpoint::new(&fp, "reference");
            ck.iteration = r.iterations as u64;
            ck.rng = Some(r.rng);
            ck.set_meta("seed", cfg.seed);
            ck.set_meta("level", r.level);
            ck.set_meta("eval_score", r.eval_score);
            put_reference(&mut ck, &r.reference);
            put_critic(&mut ck, "critic", &r.critic);
            save_checkpoint(&out.join("reference.ckpt"), &ck)?;
            write_curves(&out.join("curves_reference.csv"), &r.curves)?;
            eprintln!("reference: {} iterations, eval lin score {:.4}", r.iterations, r.eval_score);
        }
        Command::TrainPolicy { variant, reference } => {
            let v = Variant::from_tag(&variant)?;
            let reference = match (&reference, v.needs_reference()) {
                (Some(p), true) => Some(get_reference(&load(p)?)?),
                (None, true) => return Err(Error::MissingReference(v.tag)),
                _ => None,
            };
            let r = train_robust(&cfg, reference.as_ref(), v, cfg.seed, |row| {
                eprintln!("iter {:>4} lin {:.3} ang {:.3} level {}", row.iter, row.lin_score, row.ang_score, row.level)
            })?;
            let mut ck = robust_checkpoint(&fp, &r.actor, &r.critic, &r.wiring);
            ck.iteration = r.curves.len() as u64;
            ck.rng = Some(r.rng);
            ck.set_meta("seed", cfg.seed);
            ck.set_meta("level", r.level);
            if let Some(d) = &r.diverged {
                ck.set_meta("diverged", d.replace('\n', " "));
                eprintln!("warning: run flagged: {d}");
            }
            save_checkpoint(&out.join(format!("policy_{}.ckpt", v.tag)), &ck)?;
            write_curves(&out.join(format!("curves_{}.csv", v.tag)), &r.curves)?;
        }
        Command::Eval { protocol, policy } => {
            let ck = load(&policy)?;
            let seed = derive_seed(cfg.seed, "evaluation");
            match protocol {
                Protocol::Tracking => {
                    let (actor, wiring) = policy_from_checkpoint(&ck)?;
                    let row = randomized_suite(&cfg, &actor, &wiring, seed)?;
                    write_metrics(&out.join("tracking.csv"), &[row])?;
                }
                Protocol::Payload => {
                    let (actor, wiring) = policy_from_checkpoint(&ck)?;
                    let rows = payload_sweep(&cfg, &actor, &wiring, seed)?;
                    write_metrics(&out.join("payload.csv"), &rows)?;
                }
                Protocol::Push => {
                    let (actor, wiring) = policy_from_checkpoint(&ck)?;
                    let (records, bins) = push_grid(&cfg, &actor, &wiring, seed)?;
                    write_push_trials(&out.join("push_trials.csv"), wiring.variant.tag, cfg.seed, &records)?;
                    let mut w = csv::Writer::from_path(out.join("push.csv"))?;
                    for b in &bins {
                        w.serialize(b)?;
                    }
                    w.flush()?;
                }
                Protocol::Correlation => {
                    if !has_reference(&ck) {
                        return Err(Error::InvalidArgument(
                            "correlation needs a checkpoint that carries a dynamics model".into(),
                        ));
                    }
                    let report = correlation_report(&cfg, &get_reference(&ck)?, cfg.seed)?;
                    write_correlation(&out.join("correlation.csv"), &correlation_rows(cfg.seed, &report.series))?;
                    let summary = correlation_summary(cfg.seed, &report);
                    write_correlation_summary(&out.join("correlation_summary.csv"), &[summary.clone()])?;
                    match summary.pearson_r {
                        Some(r) => eprintln!("pearson r = {r:.4}"),
                        None => eprintln!("pearson r undefined (constant series)"),
                    }
                }
            }
        }
        Command::Ablate { variants, seeds } => {
            if let Some(v) = variants {
                cfg.eval.ablation_variants = v;
            }
            if let Some(s) = seeds {
                cfg.eval.ablation_seeds = s;
            }
            cfg.validate()?;
            let result = ablation_matrix(&cfg, &cfg.eval.variants()?, &cfg.eval.ablation_seeds, |m| {
                eprintln!("{m}")
            })?;
            write_ablation(&out, &result)?;
            for (v, s, msg) in &result.failures {
                eprintln!("failed: variant {v} seed {s}: {msg}");
            }
        }
        Command::Replay {
            policy,
            steps,
            command,
            randomized,
            payload,
        } => {
            let ck = load(&policy)?;
            let (actor, wiring) = policy_from_checkpoint(&ck)?;
            let mut rng = stream_rng(derive_seed(cfg.seed, "replay"), 0);
            let mut params = if randomized {
                sample_dynamics(&cfg.randomization, &cfg.env, &mut rng, false)?
            } else {
                DynamicsParams::nominal(&cfg.env)
            };
            if let Some(p) = payload {
                params.payload = p;
            }
            let noise = if randomized {
                cfg.randomization.noise.clone()
            } else {
                crate::env::NoiseConfig::off()
            };
            let scenario = Scenario {
                params,
                command: [command[0], command[1], command[2]],
                steps,
                push: None,
            };
            let trial = run_trials(
                &actor,
                &wiring,
                &cfg.env,
                &noise,
                cfg.lit.k,
                &[scenario],
                derive_seed(cfg.seed, "replay-episode"),
            )?
            .remove(0);
            let mut w = csv::Writer::from_path(out.join("replay.csv"))?;
            w.write_record(["step", "vx", "vy", "wz", "cmd_vx", "cmd_vy", "cmd_wz"])?;
            for (t, (v, c)) in trial.velocity.iter().zip(&trial.commands).enumerate() {
                w.serialize((t, v[0], v[1], v[2], c[0], c[1], c[2]))?;
            }
            w.flush()?;
            eprintln!("survived {} after {} steps", trial.survived, trial.steps);
        }
    }
    Ok(())
}

fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
