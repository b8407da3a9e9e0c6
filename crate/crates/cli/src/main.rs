mod run;
mod samples;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use lcm_lora::checkpoint::{load_adapter, load_net, save_adapter, save_net, SaveOptions};
use lcm_lora::lora::merge;
use lcm_lora::training::lcd_grad_check_random;
use lcm_lora::{AdapterBundle, DenoiserNet, Pipeline, Role, RunConfig, SampleRequest};
use serde_json::json;

use run::{RunDir, RunObserver, RUN_ROOT_ENV};
use samples::{read_samples, sidecar_path, write_samples, Sidecar};

#[derive(Debug, Parser)]
#[command(name = "lcm-lora", version, about = "Train, distill, combine and sample LoRA consistency models")]
struct Cli {
    /// Run configuration (JSON). Omitted sections take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root directory holding run directories.
    #[arg(long, global = true, env = RUN_ROOT_ENV, default_value = "runs")]
    run_root: PathBuf,

    /// Name of the run directory under the root.
    #[arg(long, global = true, default_value = "default")]
    run: String,

    /// Print training progress to stderr.
    #[arg(long, short, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the conditional ε-prediction teacher.
    TrainTeacher {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Distill the teacher into an acceleration adapter.
    DistillLcm {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune a style adapter on the rotated dataset.
    FinetuneStyle {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Weighted combination of a style and an acceleration adapter.
    CombineLora {
        #[arg(long)]
        style: PathBuf,
        #[arg(long)]
        accel: PathBuf,
        /// Style weight (defaults to combine.lambda1).
        #[arg(long)]
        l1: Option<f64>,
        /// Acceleration weight (defaults to combine.lambda2).
        #[arg(long)]
        l2: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fold an adapter into its base weights.
    MergeLora {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        adapter: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw samples to CSV with a JSON sidecar.
    Sample {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        adapter: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        omega: Option<f64>,
        #[arg(long)]
        count: Option<usize>,
        /// Sampling seed (defaults to the run seed).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// MMD² between a sample dump and held-out data.
    Eval {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long, value_enum, default_value_t = Reference::Base)]
        reference: Reference,
    },
    /// Trainable scalars of an adapter, or all scalars of a network.
    ParamCount {
        #[arg(long, conflicts_with = "net", required_unless_present = "net")]
        adapter: Option<PathBuf>,
        #[arg(long)]
        net: Option<PathBuf>,
    },
    /// Finite-difference check of the distillation loss gradient.
    Gradcheck {
        #[arg(long, value_delimiter = ',', default_value = "64,64")]
        hidden: Vec<usize>,
        #[arg(long, default_value_t = 4)]
        rank: usize,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Reference {
    Base,
    Style,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            if !p.exists() {
                bail!("config file {} not found", p.display());
            }
            RunConfig::load(p).with_context(|| format!("invalid config {}", p.display()))
        }
    }
}

fn apply_overrides(cfg: &mut RunConfig, cmd: &Command) {
    match *cmd {
        Command::CombineLora { l1, l2, .. } => {
            cfg.combine.lambda1 = l1.unwrap_or(cfg.combine.lambda1);
            cfg.combine.lambda2 = l2.unwrap_or(cfg.combine.lambda2);
        }
        Command::Sample { steps, omega, count, .. } => {
            cfg.sample.steps = steps.unwrap_or(cfg.sample.steps);
            cfg.sample.omega = omega.unwrap_or(cfg.sample.omega);
            cfg.sample.count = count.unwrap_or(cfg.sample.count);
        }
        _ => {}
    }
}

fn echo(cfg: &RunConfig) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(&cfg.effective())?);
    Ok(())
}

fn report(value: serde_json::Value) {
    println!("{value}");
}

fn save_opts(cfg: &RunConfig) -> SaveOptions {
    SaveOptions {
        schedule: Some(cfg.schedule),
        config: cfg.effective(),
    }
}

fn load_teacher(path: &Path) -> Result<(DenoiserNet, String)> {
    let (net, m) = load_net(path).with_context(|| format!("loading teacher {}", path.display()))?;
    Ok((net, m.sha256))
}

fn load_bundle(path: &Path) -> Result<(AdapterBundle, String)> {
    let (b, m) = load_adapter(path).with_context(|| format!("loading adapter {}", path.display()))?;
    Ok((b, m.sha256))
}

fn execute(cli: Cli) -> Result<()> {
    let needs_config = !matches!(
        cli.command,
        Command::MergeLora { .. } | Command::ParamCount { .. } | Command::Gradcheck { .. }
    );
    let mut cfg = load_config(cli.config.as_deref())?;
    apply_overrides(&mut cfg, &cli.command);
    cfg.validate()?;
    if needs_config {
        echo(&cfg)?;
    }
    let open_run = |stage: &str| RunDir::open(&cli.run_root, &cli.run, stage, &cfg);
    match cli.command {
        Command::TrainTeacher { out } => {
            let run = open_run("teacher")?;
            let p = Pipeline::new(cfg.clone())?;
            let mut obs = RunObserver::new(&run, "teacher", save_opts(&cfg), cli.verbose)?;
            let (net, rep) = p.train_teacher(&mut obs)?;
            obs.finish()?;
            let dir = out.unwrap_or_else(|| run.checkpoint("teacher"));
            let m = save_net(&dir, &net, &save_opts(&cfg))?;
            report(json!({
                "checkpoint": dir, "sha256": m.sha256, "metrics": run.metrics("teacher"),
                "final_loss": rep.rows.last().map(|r| r.ema_loss),
            }));
        }
        Command::DistillLcm { teacher, out } => {
            let run = open_run("distill")?;
            let (net, _) = load_teacher(&teacher)?;
            let p = Pipeline::new(cfg.clone())?;
            let mut obs = RunObserver::new(&run, "distill", save_opts(&cfg), cli.verbose)?;
            let (bundle, rep) = p.distill(&net, &mut obs)?;
            obs.finish()?;
            let dir = out.unwrap_or_else(|| run.checkpoint("acceleration"));
            let m = save_adapter(&dir, &bundle, &save_opts(&cfg))?;
            report(json!({
                "checkpoint": dir, "sha256": m.sha256, "metrics": run.metrics("distill"),
                "trainable": bundle.adapter.count_trainable(),
                "final_loss": rep.rows.last().map(|r| r.ema_loss),
            }));
        }
        Command::FinetuneStyle { teacher, out } => {
            let run = open_run("style")?;
            let (net, _) = load_teacher(&teacher)?;
            let p = Pipeline::new(cfg.clone())?;
            let mut obs = RunObserver::new(&run, "style", save_opts(&cfg), cli.verbose)?;
            let (bundle, rep) = p.finetune_style(&net, &mut obs)?;
            obs.finish()?;
            let dir = out.unwrap_or_else(|| run.checkpoint("style"));
            let m = save_adapter(&dir, &bundle, &save_opts(&cfg))?;
            report(json!({
                "checkpoint": dir, "sha256": m.sha256, "metrics": run.metrics("style"),
                "final_loss": rep.rows.last().map(|r| r.ema_loss),
            }));
        }
        Command::CombineLora { style, accel, out, .. } => {
            let (mut s, _) = load_bundle(&style)?;
            let (mut a, _) = load_bundle(&accel)?;
            s.name = style.display().to_string();
            a.name = accel.display().to_string();
            let p = Pipeline::new(cfg.clone())?;
            let combined = p.combine(&s, &a)?;
            let dir = match out {
                Some(d) => d,
                None => open_run("combine")?.checkpoint("combined"),
            };
            let m = save_adapter(&dir, &combined, &save_opts(&cfg))?;
            report(json!({
                "checkpoint": dir, "sha256": m.sha256,
                "provenance": combined.provenance,
                "trainable": combined.adapter.count_trainable(),
            }));
        }
        Command::MergeLora { base, adapter, out } => {
            let (net, _) = load_teacher(&base)?;
            let (b, _) = load_bundle(&adapter)?;
            let merged = merge(&net, &b.adapter)?;
            let m = save_net(&out, &merged, &SaveOptions::default())?;
            report(json!({ "checkpoint": out, "sha256": m.sha256 }));
        }
        Command::Sample { teacher, adapter, seed, out, .. } => {
            let seed = seed.unwrap_or(cfg.seed);
            let (net, teacher_hash) = load_teacher(&teacher)?;
            let bundle = adapter.as_deref().map(load_bundle).transpose()?;
            let p = Pipeline::new(cfg.clone())?;
            let req: SampleRequest = p.default_request(seed);
            let (x, cond) = p.sample(&net, bundle.as_ref().map(|(b, _)| b), &req)?;
            let path = match out {
                Some(o) => o,
                None => open_run("sample")?.samples(&format!("samples-s{}-seed{seed}", req.steps)),
            };
            let prov = bundle.as_ref().and_then(|(b, _)| b.provenance.clone());
            let sidecar = Sidecar {
                steps: req.steps,
                omega: req.omega,
                count: req.count,
                seed,
                lambda1: prov.as_ref().map(|p| p.lambda_style),
                lambda2: prov.as_ref().map(|p| p.lambda_accel),
                teacher_sha256: teacher_hash,
                adapter_sha256: bundle.as_ref().map(|(_, h)| h.clone()),
                adapter_role: bundle.as_ref().map(|(b, _)| role_name(b.role).to_string()),
            };
            write_samples(&path, &x, &cond, &sidecar)?;
            report(json!({ "samples": path, "sidecar": sidecar_path(&path), "rows": x.rows() }));
        }
        Command::Eval { samples, reference } => {
            let x = read_samples(&samples)?;
            let p = Pipeline::new(cfg)?;
            let r = p.reference(reference == Reference::Style)?;
            let v = p.mmd(&x, &r)?;
            report(json!({ "mmd2": v, "reference": format!("{reference:?}").to_lowercase(), "rows": x.rows() }));
        }
        Command::ParamCount { adapter, net } => {
            if let Some(a) = adapter {
                let (b, _) = load_bundle(&a)?;
                println!("{}", b.adapter.count_trainable());
            } else if let Some(n) = net {
                let (net, _) = load_teacher(&n)?;
                println!("{}", net.num_params());
            }
        }
        Command::Gradcheck { hidden, rank, batch, seed, h, tol } => {
            let r = lcd_grad_check_random(&hidden, rank, batch, seed, h)?;
            report(json!({ "max_rel_error": r.max_rel_error, "checked": r.checked, "tolerance": tol }));
            if r.max_rel_error >= tol || r.max_rel_error.is_nan() {
                bail!("gradient check failed: max relative error {:e} ≥ {tol:e}", r.max_rel_error);
            }
        }
    }
    Ok(())
}

fn role_name(r: Role) -> &'static str {
    match r {
        Role::Acceleration => "acceleration",
        Role::Style => "style",
        Role::Combined => "combined",
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
