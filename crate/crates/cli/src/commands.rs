//! Subcommand implementations.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use ccnet::backbone::{
    build_model, count_macs, count_parameters, BlockKind, Profile, Task, BASELINE_REFERENCE_PARAMS,
    DEHAZE_REFERENCE_MACS, DEHAZE_REFERENCE_PARAMS, REFERENCE_BAND,
};
use ccnet::checkpoint;
use ccnet::data::{make_dataset, CleanSource, Dataset, DegradationKind};
use ccnet::eval::{evaluate, run_ablation, AblationTable, ABLATION_ROWS};
use ccnet::gradcheck::{grad_check, matching_ops, DEFAULT_SHAPE, DEFAULT_TOL, OPS};
use ccnet::train::{LogRecord, Trainer};
use clap::Args;

use crate::config::{parse_name, Overrides, RunConfig};
use crate::plot;
use crate::{Cli, Command, GlobalArgs};

pub const LOG_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Number of pairs (default from the config).
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    /// haze, motion_blur or snow (default follows the task).
    #[arg(long, value_parser = parse_name::<DegradationKind>)]
    pub kind: Option<DegradationKind>,
    /// Directory of clean PNGs to degrade instead of procedural images.
    #[arg(long)]
    pub clean_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset root (overrides `data.train`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Continue from a checkpoint directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Total iterations (overrides `train.iterations`).
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Checkpoint and exit once this many iterations are done.
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint directory to evaluate.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset root (overrides `data.eval`).
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Number of seeds, counted up from `--seed`.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    /// Total iterations per run (overrides `train.iterations`).
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Op name or family prefix (e.g. `strip_apply`); all ops when absent.
    #[arg(long)]
    pub op: Option<String>,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    pub tol: f64,
    /// Input shape as N,C,H,W.
    #[arg(long, value_delimiter = ',', num_args = 4)]
    pub shape: Option<Vec<usize>>,
}

#[derive(Args, Debug)]
pub struct ComplexityArgs {
    #[arg(long, default_value_t = 256)]
    pub height: usize,
    #[arg(long, default_value_t = 256)]
    pub width: usize,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// Metrics logs (JSON lines); one curve per file.
    #[arg(long)]
    pub log: Vec<PathBuf>,
    /// Ablation table written by `ablate`.
    #[arg(long)]
    pub ablation: Option<PathBuf>,
    /// Iterations per point of the smoothed curves.
    #[arg(long, default_value_t = 50)]
    pub window: usize,
}

fn out_dir(global: &GlobalArgs, command: &str) -> PathBuf {
    if let Some(out) = &global.out {
        return out.clone();
    }
    let root = std::env::var_os("CCNET_OUT").map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    root.join(command)
}

fn command_name(command: &Command) -> &'static str {
    match command {
        Command::Synth(_) => "synth",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Ablate(_) => "ablate",
        Command::Gradcheck(_) => "gradcheck",
        Command::Complexity(_) => "complexity",
        Command::Plot(_) => "plot",
    }
}

pub fn dispatch(cli: Cli) -> Result<ExitCode> {
    let overrides = Overrides {
        profile: cli.global.profile,
        task: cli.global.task,
        seed: cli.global.seed,
    };
    let mut cfg = RunConfig::resolve(cli.global.config.as_deref(), &overrides)?;
    apply_command_overrides(&mut cfg, &cli.command);
    cfg.model.validate()?;
    cfg.train.validate()?;
    let out = out_dir(&cli.global, command_name(&cli.command));

    if cli.global.dry_run {
        println!("# ccnet {} (dry run), output {}", command_name(&cli.command), out.display());
        print!("{}", cfg.to_toml()?);
        return Ok(ExitCode::SUCCESS);
    }
    cfg.check_paths()?;
    match &cli.command {
        Command::Synth(args) => synth(&cfg, args, &out),
        Command::Train(args) => train(&cfg, args, &out),
        Command::Eval(args) => eval(&cfg, args, &out),
        Command::Ablate(args) => ablate(&cfg, args, cli.global.seed.unwrap_or(cfg.train.seed), &out),
        Command::Gradcheck(args) => gradcheck(args, cli.global.seed.unwrap_or(0)),
        Command::Complexity(args) => complexity(&cfg, args),
        Command::Plot(args) => plot_cmd(&cfg, args, &out),
    }
}

/// Subcommand flags that stand in for config fields.
fn apply_command_overrides(cfg: &mut RunConfig, command: &Command) {
    match command {
        Command::Synth(a) => {
            if let Some(n) = a.count {
                cfg.data.count = n;
            }
            if let Some(h) = a.height {
                cfg.data.height = h;
            }
            if let Some(w) = a.width {
                cfg.data.width = w;
            }
            if a.kind.is_some() {
                cfg.data.degradation = a.kind;
            }
        }
        Command::Train(a) => {
            if a.data.is_some() {
                cfg.data.train = a.data.clone();
            }
            if let Some(n) = a.iterations {
                cfg.train.iterations = n;
            }
        }
        Command::Eval(a) => {
            if a.data.is_some() {
                cfg.data.eval = a.data.clone();
            }
        }
        Command::Ablate(a) => {
            if let Some(n) = a.iterations {
                cfg.train.iterations = n;
            }
        }
        _ => {}
    }
}

fn training_set(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data.train {
        Some(root) => Dataset::load(root).with_context(|| format!("loading {}", root.display())),
        None => Ok(Dataset::synthesize(
            cfg.degradation(),
            cfg.data.height,
            cfg.data.width,
            cfg.data.count,
            cfg.data.seed,
        )?),
    }
}

fn eval_set(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data.eval {
        Some(root) => Dataset::load(root).with_context(|| format!("loading {}", root.display())),
        None => training_set(cfg),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn synth(cfg: &RunConfig, args: &SynthArgs, out: &Path) -> Result<ExitCode> {
    cfg.echo(out)?;
    let source = match &args.clean_dir {
        Some(dir) => CleanSource::Directory(dir.clone()),
        None => CleanSource::Procedural {
            height: cfg.data.height,
            width: cfg.data.width,
        },
    };
    let manifest = make_dataset(&source, cfg.degradation(), out, cfg.data.count, cfg.data.seed)?;
    println!(
        "wrote {} {:?} pairs to {}",
        manifest.len(),
        cfg.degradation(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

/// Keeps the records of iterations before `start` and reopens for append.
fn open_log(path: &Path, start: usize) -> Result<BufWriter<fs::File>> {
    let kept: Vec<LogRecord> = if start > 0 && path.exists() {
        plot::read_log(path)?
            .into_iter()
            .filter(|r| r.iteration < start)
            .collect()
    } else {
        Vec::new()
    };
    let mut out = BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for r in &kept {
        writeln!(out, "{}", serde_json::to_string(r)?)?;
    }
    Ok(out)
}

fn train(cfg: &RunConfig, args: &TrainArgs, out: &Path) -> Result<ExitCode> {
    cfg.echo(out)?;
    let dataset = training_set(cfg)?;
    let mut trainer = match &args.resume {
        Some(dir) => checkpoint::load(dir, Some((&cfg.model, &cfg.train)))
            .with_context(|| format!("resuming from {}", dir.display()))?,
        None => Trainer::new(build_model(&cfg.model, cfg.train.seed)?, cfg.train.clone())?,
    };
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    let log_path = out.join(LOG_FILE);
    let mut log = open_log(&log_path, trainer.iteration)?;
    println!(
        "training {} parameters on {} pairs, iterations {}..{}",
        count_parameters(&trainer.model),
        dataset.len(),
        trainer.iteration,
        cfg.train.iterations
    );
    let stop = args.stop_after.unwrap_or(cfg.train.iterations).min(cfg.train.iterations);
    while trainer.iteration < stop {
        let record = trainer.step(&dataset)?;
        writeln!(log, "{}", serde_json::to_string(&record)?)?;
        if let Some(eval_psnr) = record.eval_psnr {
            log.flush()?;
            checkpoint::save(&trainer, &ckpt_dir)?;
            println!(
                "iter {:>6}  lr {:.3e}  loss {:.5}  batch psnr {:.2}  train psnr {:.2}",
                record.iteration + 1,
                record.lr,
                record.total,
                record.psnr,
                eval_psnr
            );
        }
    }
    log.flush()?;
    checkpoint::save(&trainer, &ckpt_dir)?;
    if !trainer.is_done() {
        println!("stopped at iteration {}; checkpoint {}", trainer.iteration, ckpt_dir.display());
        return Ok(ExitCode::SUCCESS);
    }
    let report = evaluate(&trainer.model, &dataset)?;
    write_json(&out.join("eval.json"), &report)?;
    println!(
        "done: train-set psnr {:.3} dB, ssim {:.4}; checkpoint {}",
        report.mean_psnr,
        report.mean_ssim,
        ckpt_dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn eval(cfg: &RunConfig, args: &EvalArgs, out: &Path) -> Result<ExitCode> {
    cfg.echo(out)?;
    let trainer = checkpoint::load(&args.checkpoint, None)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let dataset = eval_set(cfg)?;
    let report = evaluate(&trainer.model, &dataset)?;
    write_json(&out.join("eval.json"), &report)?;
    println!(
        "{} images: psnr {:.3} dB, ssim {:.4}",
        report.images.len(),
        report.mean_psnr,
        report.mean_ssim
    );
    Ok(ExitCode::SUCCESS)
}

fn ablation_markdown(table: &AblationTable) -> String {
    let mut s = String::from("| variant | block | LDIM | params | MACs/patch | PSNR | SSIM |\n|---|---|---|---|---|---|---|\n");
    for r in &table.rows {
        s += &format!(
            "| {} | {:?} | {} | {} | {} | {:.3} | {:.4} |\n",
            r.name, r.block, r.use_ldim, r.params, r.macs, r.psnr, r.ssim
        );
    }
    s
}

fn ablate(cfg: &RunConfig, args: &AblateArgs, seed: u64, out: &Path) -> Result<ExitCode> {
    if args.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    cfg.echo(out)?;
    let dataset = training_set(cfg)?;
    let seeds: Vec<u64> = (seed..seed + args.seeds).collect();
    let logs = out.join("logs");
    fs::create_dir_all(&logs)?;
    let mut io_error = None;
    let table = run_ablation(&cfg.model, &cfg.train, &dataset, &seeds, &ABLATION_ROWS, |v, s, log| {
        let path = logs.join(format!("{}_seed{s}.jsonl", v.name.replace('+', "plus_")));
        let text: String = log
            .iter()
            .map(|r| serde_json::to_string(r).map(|l| l + "\n"))
            .collect::<serde_json::Result<_>>()
            .unwrap_or_default();
        if let Err(e) = fs::write(&path, text) {
            io_error.get_or_insert(e);
        }
        let last = log.last();
        println!(
            "{:<12} seed {s}: final loss {:.5}, batch psnr {:.2}",
            v.name,
            last.map_or(f64::NAN, |r| r.total),
            last.map_or(f64::NAN, |r| r.psnr)
        );
    })?;
    if let Some(e) = io_error {
        return Err(e).context("writing ablation logs");
    }
    write_json(&out.join("ablation.json"), &table)?;
    let markdown = ablation_markdown(&table);
    fs::write(out.join("ablation.md"), &markdown)?;
    print!("{markdown}");
    let inversions = table.inversions();
    if inversions.is_empty() {
        println!("ordering: all expected orderings hold");
    }
    for inv in &inversions {
        println!(
            "ordering inversion: {} {:.3} dB < {} {:.3} dB (per-run logs in {})",
            inv.better,
            inv.psnr_better,
            inv.worse,
            inv.psnr_worse,
            logs.display()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(args: &GradcheckArgs, seed: u64) -> Result<ExitCode> {
    let ops: Vec<&str> = match &args.op {
        Some(pattern) => {
            let ops = matching_ops(pattern);
            if ops.is_empty() {
                bail!("unknown op `{pattern}`; known ops: {}", OPS.join(", "));
            }
            ops
        }
        None => OPS.to_vec(),
    };
    let shape = match &args.shape {
        Some(s) => [s[0], s[1], s[2], s[3]],
        None => DEFAULT_SHAPE,
    };
    let mut failed = 0;
    for op in ops {
        let op_shape = if op == "model" { [shape[0], 3, shape[2], shape[3]] } else { shape };
        let r = grad_check(op, op_shape, seed, args.tol)?;
        println!(
            "{} {:<24} max rel err {:.3e}  max abs err {:.3e}  ({} of {} coordinates)",
            if r.passed { "PASS" } else { "FAIL" },
            r.op,
            r.max_rel_error,
            r.max_abs_error,
            r.checked,
            r.total
        );
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        eprintln!("error: {failed} op(s) exceeded tolerance {:e}", args.tol);
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn band(value: f64, reference: f64) -> String {
    let rel = value / reference - 1.0;
    format!(
        "reference {:.2} ±{:.0}% [{:.2}, {:.2}], deviation {:+.1}% ({})",
        reference,
        REFERENCE_BAND * 100.0,
        reference * (1.0 - REFERENCE_BAND),
        reference * (1.0 + REFERENCE_BAND),
        rel * 100.0,
        if rel.abs() <= REFERENCE_BAND { "within band" } else { "outside band" }
    )
}

fn complexity(cfg: &RunConfig, args: &ComplexityArgs) -> Result<ExitCode> {
    let model = build_model(&cfg.model, cfg.train.seed)?;
    let params = count_parameters(&model) as f64;
    let macs = count_macs(&model, args.height, args.width)? as f64;
    println!(
        "{:?} {:?}: C = {}, N = {}, block {:?}, LDIM {}",
        cfg.profile, cfg.task, cfg.model.base_channels, cfg.model.blocks_per_scale, cfg.model.block, cfg.model.use_ldim
    );
    let reference = cfg.profile == Profile::Paper && cfg.task == Task::Dehaze && (args.height, args.width) == (256, 256);
    let full = cfg.model.block == BlockKind::Ersm && cfg.model.use_ldim;
    let baseline = cfg.model.block == BlockKind::Plain && !cfg.model.use_ldim;
    let mut line = format!("params {:.3} M", params / 1e6);
    if reference && full {
        line += &format!("  {}", band(params / 1e6, DEHAZE_REFERENCE_PARAMS / 1e6));
    } else if reference && baseline {
        line += &format!("  {}", band(params / 1e6, BASELINE_REFERENCE_PARAMS / 1e6));
    }
    println!("{line}");
    let mut line = format!("MACs {:.3} G at {}x{}", macs / 1e9, args.height, args.width);
    if reference && full {
        line += &format!("  {}", band(macs / 1e9, DEHAZE_REFERENCE_MACS / 1e9));
    }
    println!("{line}");
    Ok(ExitCode::SUCCESS)
}

fn plot_cmd(cfg: &RunConfig, args: &PlotArgs, out: &Path) -> Result<ExitCode> {
    if args.log.is_empty() && args.ablation.is_none() {
        bail!("nothing to plot: pass --log and/or --ablation");
    }
    for path in args.log.iter().chain(&args.ablation) {
        if !path.exists() {
            bail!("{} does not exist", path.display());
        }
    }
    cfg.echo(out)?;
    let mut written = Vec::new();
    if !args.log.is_empty() {
        let logs = args
            .log
            .iter()
            .map(|p| {
                let name = p
                    .parent()
                    .and_then(|d| d.file_name())
                    .map(|d| format!("{}/{}", d.to_string_lossy(), p.file_stem().unwrap_or_default().to_string_lossy()))
                    .unwrap_or_else(|| p.display().to_string());
                Ok((name, plot::read_log(p)?))
            })
            .collect::<Result<Vec<_>>>()?;
        written.extend(plot::training_curves(&logs, out, args.window)?);
    }
    if let Some(path) = &args.ablation {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let table: AblationTable = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        written.extend(plot::ablation_charts(&table, out)?);
    }
    for path in written {
        println!("wrote {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}
