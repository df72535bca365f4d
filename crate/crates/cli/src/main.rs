use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crossmodal_core::config::{RunConfig, SEED_ENV};
use crossmodal_core::error::Error;
use crossmodal_core::eval::{evaluate_model, run_ablation, run_projection_baseline, optimisation_variants};
use crossmodal_core::persist::{
    load_checkpoint, load_scenes, loss_log_lines, save_checkpoint, save_scenes, write_file, RunManifest,
    ABLATION_FILE, BASELINE_FILE, CHECKPOINT_FILE, EVAL_DIR, LOSS_LOG_FILE, METRICS_FILE, TRAIN_DIR,
};
use crossmodal_core::scenegen::{make_dataset_parallel, SyntheticScene};
use crossmodal_core::trainer::prepare;

#[derive(Parser)]
#[command(name = "crossmodal", version, about = "Point-cloud open-vocabulary segmentation by cross-modal distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train and eval scene sets
    Gen(Common),
    /// Train a model with the two-stage schedule
    Train(Common),
    /// Evaluate a trained run
    Eval(EvalArgs),
    /// Score the direct 2D-to-3D label projection
    Baseline(Common),
    /// Train and evaluate every optimisation variant
    Ablate(Common),
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON)
    #[arg(long)]
    config: PathBuf,
    /// Scene directory written by `gen`; scenes are generated in memory when omitted
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory (falls back to the config's output_dir)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides CROSSMODAL_SEED and the config
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for generation and evaluation
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory written by `train`
    #[arg(long)]
    run: PathBuf,
    /// Scene directory; defaults to the one recorded by `train`
    #[arg(long)]
    data: Option<PathBuf>,
    /// Where to write metrics.json; defaults to the run directory
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
}

/// Exit status 1 for configuration and usage problems, 2 for failures while running.
struct Failure {
    code: u8,
    error: Error,
}

fn usage(error: Error) -> Failure {
    Failure { code: 1, error }
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        let code = if error.is_config() { 1 } else { 2 };
        Failure { code, error }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

struct Context {
    config: RunConfig,
    out: PathBuf,
    workers: usize,
}

impl Common {
    fn context(&self) -> CliResult<Context> {
        let env = std::env::var(SEED_ENV).ok();
        let config = RunConfig::load(&self.config)
            .and_then(|c| c.with_seed_override(self.seed, env.as_deref()))
            .map_err(usage)?;
        let out = self
            .out
            .clone()
            .or_else(|| config.output_dir.clone())
            .ok_or_else(|| usage(Error::Config("no output directory: pass --out or set output_dir".into())))?;
        let workers = self.workers.unwrap_or(config.eval.workers).max(1);
        Ok(Context { config, out, workers })
    }
}

fn generate(config: &RunConfig, seeds: &[u64], workers: usize) -> CliResult<Vec<SyntheticScene>> {
    let vocab = config.vocabulary()?;
    Ok(make_dataset_parallel(
        &config.scene,
        &config.noise,
        &vocab,
        config.data.mode,
        seeds,
        workers,
    )?)
}

fn scenes(ctx: &Context, data: Option<&Path>, split: &str) -> CliResult<Vec<SyntheticScene>> {
    match data {
        Some(dir) => Ok(load_scenes(&dir.join(split))?),
        None => {
            let seeds = if split == TRAIN_DIR {
                ctx.config.train_seeds()
            } else {
                ctx.config.eval_seeds()
            };
            generate(&ctx.config, &seeds, ctx.workers)
        }
    }
}

fn cmd_gen(args: &Common) -> CliResult<()> {
    let ctx = args.context()?;
    let train = generate(&ctx.config, &ctx.config.train_seeds(), ctx.workers)?;
    save_scenes(&ctx.out.join(TRAIN_DIR), &train)?;
    let eval = generate(&ctx.config, &ctx.config.eval_seeds(), ctx.workers)?;
    save_scenes(&ctx.out.join(EVAL_DIR), &eval)?;
    write_file(&ctx.out.join("config.json"), &ctx.config.to_json())?;
    println!(
        "wrote {} train and {} eval scenes to {}",
        train.len(),
        eval.len(),
        ctx.out.display()
    );
    Ok(())
}

fn cmd_train(args: &Common) -> CliResult<()> {
    let ctx = args.context()?;
    let vocab = ctx.config.vocabulary()?;
    let train = scenes(&ctx, args.data.as_deref(), TRAIN_DIR)?;
    let data = prepare(&train, ctx.config.scene.extent, &vocab)?;
    let (model, state) = ctx.config.setup().train(&data, &vocab, ctx.config.seed)?;
    let hash = ctx.config.hash();
    save_checkpoint(&ctx.out.join(CHECKPOINT_FILE), &model, &vocab, &hash)?;
    write_file(&ctx.out.join(LOSS_LOG_FILE), &loss_log_lines(&state.log))?;
    let data_dir = match &args.data {
        Some(d) => Some(std::fs::canonicalize(d).map_err(|e| Error::Io {
            path: d.display().to_string(),
            source: e,
        })?),
        None => None,
    };
    RunManifest::new(&ctx.config, data_dir.as_deref()).save(&ctx.out)?;
    println!("trained {} steps; run written to {}", state.step, ctx.out.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> CliResult<()> {
    let manifest = RunManifest::load(&args.run).map_err(usage)?;
    let ckpt = load_checkpoint(&args.run.join(CHECKPOINT_FILE))?;
    if ckpt.config_hash != manifest.config_hash {
        return Err(Error::Data(format!(
            "checkpoint config hash {} does not match run manifest {}",
            ckpt.config_hash, manifest.config_hash
        ))
        .into());
    }
    let config = manifest.config;
    let ctx = Context {
        workers: args.workers.unwrap_or(config.eval.workers).max(1),
        out: args.out.clone().unwrap_or_else(|| args.run.clone()),
        config,
    };
    let data = args.data.clone().or(manifest.data_dir);
    let eval = scenes(&ctx, data.as_deref(), EVAL_DIR)?;
    let run_id = args
        .run
        .file_name()
        .map_or_else(|| "run".to_string(), |n| n.to_string_lossy().into_owned());
    let report = evaluate_model(&ckpt.model, &eval, ctx.config.scene.extent, &ckpt.vocab, ctx.workers)?
        .with_meta(ctx.config.meta(&run_id));
    write_file(&ctx.out.join(METRICS_FILE), &report.to_json())?;
    println!(
        "mIoU base {:.4} novel {:.4} hIoU {:.4}",
        report.miou_base, report.miou_novel, report.hiou
    );
    Ok(())
}

fn cmd_baseline(args: &Common) -> CliResult<()> {
    let ctx = args.context()?;
    let vocab = ctx.config.vocabulary()?;
    let eval = scenes(&ctx, args.data.as_deref(), EVAL_DIR)?;
    let report = run_projection_baseline(&eval, &vocab, ctx.workers)?.with_meta(ctx.config.meta("projection-baseline"));
    write_file(&ctx.out.join(BASELINE_FILE), &report.to_json())?;
    println!(
        "projection baseline: mIoU base {:.4} novel {:.4} hIoU {:.4}",
        report.miou_base, report.miou_novel, report.hiou
    );
    Ok(())
}

fn cmd_ablate(args: &Common) -> CliResult<()> {
    let ctx = args.context()?;
    let vocab = ctx.config.vocabulary()?;
    let train = scenes(&ctx, args.data.as_deref(), TRAIN_DIR)?;
    let eval = scenes(&ctx, args.data.as_deref(), EVAL_DIR)?;
    let table = run_ablation(
        &train,
        &eval,
        &ctx.config.setup(),
        &optimisation_variants(),
        &ctx.config.eval.ablation_seeds,
        &vocab,
        &ctx.config.meta("ablation"),
        ctx.workers,
    )?;
    write_file(&ctx.out.join(ABLATION_FILE), &table.to_json())?;
    println!("{:<28} {:>16} {:>16}", "variant", "mIoU base", "mIoU novel");
    for row in &table.rows {
        println!(
            "{:<28} {:>7.4} ± {:<6.4} {:>7.4} ± {:<6.4}",
            row.variant.name, row.miou_base_mean, row.miou_base_std, row.miou_novel_mean, row.miou_novel_std
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Baseline(a) => cmd_baseline(a),
        Command::Ablate(a) => cmd_ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.error);
            ExitCode::from(f.code)
        }
    }
}
