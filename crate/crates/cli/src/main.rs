use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use siamtrack_core::config::RunConfig;
use siamtrack_core::data::{list_frames, load_sequence, load_sequence_set, write_sequence, FrameSource, SequenceRecord};
use siamtrack_core::eval::{evaluate_model, run_ablation, synthetic_sets, new_trainer};
use siamtrack_core::geometry::{BBox, GridSpec};
use siamtrack_core::labels::{assign, LabelVariant};
use siamtrack_core::model::checkpoint::Checkpoint;
use siamtrack_core::model::{ModelConfig, SiameseModel};
use siamtrack_core::track::Tracker;
use siamtrack_core::Error;

/// Anchor-free Siamese tracker: training, tracking and evaluation.
#[derive(Parser, Debug)]
#[command(name = "siamtrack", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// TOML run configuration; every field has a default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted override such as `train.batch_size=4`; repeatable, applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Root seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoints plus a JSON-lines log.
    Train {
        /// Train on generated sequences instead of a directory.
        #[arg(long)]
        synthetic: bool,
        /// Directory of training sequences.
        #[arg(long, env = "SIAMTRACK_DATA")]
        data: Option<PathBuf>,
        /// Total optimizer steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Track one sequence and write per-frame boxes and a summary.
    Track {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sequence directory with a `frames/` subdirectory.
        #[arg(long)]
        sequence: PathBuf,
        /// First-frame box `x,y,w,h`; defaults to the first ground-truth line.
        #[arg(long)]
        init: Option<BBox>,
        /// Output directory; boxes go to stdout without it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a sequence set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of evaluation sequences.
        #[arg(long)]
        sequences: Option<PathBuf>,
        /// Evaluate on the generated evaluation set.
        #[arg(long)]
        synthetic: bool,
        /// Directory for `results.json` and per-frame boxes.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate one model per label variant.
    Ablate {
        /// Comma-separated variants; defaults to `eval.variants`.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<LabelVariant>,
        #[arg(long)]
        synthetic: bool,
        #[arg(long, env = "SIAMTRACK_DATA")]
        data: Option<PathBuf>,
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        /// Write the table JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a generated dataset in the on-disk sequence layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Which generated split to write.
        #[arg(long, default_value = "train", value_parser = ["train", "eval"])]
        split: String,
    },
    /// Print the label map of a box on the canonical grid.
    Labels {
        /// Box `x,y,w,h` in search-patch pixels.
        #[arg(long = "box")]
        bbox: BBox,
        #[arg(long)]
        variant: Option<LabelVariant>,
    },
    /// Print the resolved configuration.
    Config,
}

/// Bad arguments or configuration; exits with status 1.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let config_error = err.chain().any(|e| {
        e.is::<UsageError>() || matches!(e.downcast_ref::<Error>(), Some(Error::Config(_)))
    });
    if config_error {
        1
    } else {
        2
    }
}

fn resolve_config(g: &GlobalArgs) -> anyhow::Result<RunConfig> {
    let base = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut cfg = base.with_overrides(&g.overrides)?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn with_steps(cfg: RunConfig, steps: Option<usize>) -> anyhow::Result<RunConfig> {
    match steps {
        Some(n) => Ok(cfg.with_overrides(&[format!("train.steps={n}")])?),
        None => Ok(cfg),
    }
}

fn echo_config(cfg: &RunConfig) {
    println!("# resolved configuration");
    print!("{}", cfg.to_toml_string());
    println!("# end configuration");
}

fn output_dir(explicit: Option<PathBuf>, cfg: &RunConfig, fallback: &str) -> PathBuf {
    explicit
        .or_else(|| cfg.paths.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(fallback))
}

fn training_data(cfg: &RunConfig, synthetic: bool, data: Option<PathBuf>) -> anyhow::Result<Vec<SequenceRecord>> {
    if synthetic {
        return Ok(synthetic_sets(cfg)?.0);
    }
    let root = data.or_else(|| cfg.paths.train_data.clone()).ok_or_else(|| {
        usage("paths.train_data is not set; pass --data, set SIAMTRACK_DATA or use --synthetic")
    })?;
    load_sequence_set(&root).with_context(|| format!("loading training data from {}", root.display()))
}

fn evaluation_data(cfg: &RunConfig, synthetic: bool, dir: Option<PathBuf>) -> anyhow::Result<Vec<SequenceRecord>> {
    if synthetic {
        return Ok(synthetic_sets(cfg)?.1);
    }
    let root = dir
        .or_else(|| cfg.paths.eval_data.clone())
        .ok_or_else(|| usage("paths.eval_data is not set; pass --sequences or use --synthetic"))?;
    load_sequence_set(&root).with_context(|| format!("loading evaluation data from {}", root.display()))
}

/// The checkpoint's own architecture, unless the run configuration names a
/// different one, in which case the weights must fit it.
fn load_model(path: &Path, cfg: &RunConfig) -> anyhow::Result<SiameseModel> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if cfg.model == ck.model || cfg.model == ModelConfig::default() {
        return Ok(ck.to_model()?);
    }
    let mut model = SiameseModel::new(cfg.model.clone(), 0)?;
    ck.load_into(&mut model)
        .with_context(|| format!("checkpoint {} does not match the configured model", path.display()))?;
    Ok(model)
}

fn cmd_train(
    cfg: RunConfig,
    synthetic: bool,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    resume: Option<PathBuf>,
) -> anyhow::Result<()> {
    let out = output_dir(out, &cfg, "runs/train");
    let dataset = training_data(&cfg, synthetic, data)?;
    let mut trainer = match &resume {
        Some(p) => siamtrack_core::train::Trainer::resume(&Checkpoint::load(p)?)
            .with_context(|| format!("resuming from {}", p.display()))?,
        None => new_trainer(&cfg)?,
    };
    echo_config(&cfg);
    println!("parameters {}", trainer.model.num_params());
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.toml"), cfg.to_toml_string())?;

    let mut log = String::new();
    let total = trainer.cfg.total_steps();
    let report = trainer.run(&dataset, Some(&out), |s| {
        log.push_str(&s.to_json_line());
        log.push('\n');
        if s.step + 1 == total || (s.step + 1) % 100 == 0 {
            eprintln!("step {}/{total} loss {:.4} lr {:.6}", s.step + 1, s.loss.total, s.lr);
        }
    })?;
    fs::write(out.join("train_log.jsonl"), log)?;
    match report.steps.last() {
        Some(last) => println!(
            "final loss {:.6} (cls {:.6}, reg {:.6}) after {} steps in {:.1}s",
            last.loss.total,
            last.loss.cls_loss,
            last.loss.reg_loss,
            last.step + 1,
            report.wall_seconds
        ),
        None => println!("no steps to run"),
    }
    if let Some(p) = report.final_checkpoint {
        println!("checkpoint {}", p.display());
    }
    Ok(())
}

fn cmd_track(
    cfg: RunConfig,
    checkpoint: PathBuf,
    sequence: PathBuf,
    init: Option<BBox>,
    out: Option<PathBuf>,
) -> anyhow::Result<()> {
    let model = load_model(&checkpoint, &cfg)?;
    let (frames, init) = match init {
        Some(b) => (list_frames(&sequence)?, b),
        None => {
            let seq = load_sequence(&sequence)
                .with_context(|| format!("{}: no --init given and no usable ground truth", sequence.display()))?;
            let first = seq.boxes[0];
            let files = seq
                .frames
                .into_iter()
                .map(|f| match f {
                    FrameSource::File(p) => p,
                    FrameSource::Memory(_) => unreachable!("sequences on disk load from files"),
                })
                .collect();
            (files, first)
        }
    };
    if frames.is_empty() {
        bail!("{}: no frames", sequence.display());
    }

    let mut tracker = Tracker::new(&model, cfg.postprocess, cfg.crop)?;
    let load = |p: &PathBuf| FrameSource::File(p.clone()).load();
    let start = Instant::now();
    tracker.init(&*load(&frames[0])?, &init)?;
    let mut boxes = vec![init];
    let mut scores = vec![1.0];
    for f in &frames[1..] {
        let o = tracker.track_frame(&*load(f)?)?;
        boxes.push(o.bbox);
        scores.push(o.score);
    }
    let secs = start.elapsed().as_secs_f64();
    let fps = if secs > 0.0 { frames.len() as f64 / secs } else { 0.0 };

    let text: String = boxes.iter().map(|b| b.to_xywh_line() + "\n").collect();
    let summary = serde_json::json!({
        "sequence": sequence.display().to_string(),
        "frames": frames.len(),
        "fps": fps,
        "seconds": secs,
        "scores": scores,
    });
    match out {
        Some(dir) => {
            fs::create_dir_all(&dir)?;
            fs::write(dir.join("boxes.txt"), text)?;
            fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
            println!("{} frames at {fps:.1} fps; wrote {}", frames.len(), dir.display());
        }
        None => {
            print!("{text}");
            eprintln!("{} frames at {fps:.1} fps", frames.len());
        }
    }
    Ok(())
}

fn cmd_eval(
    cfg: RunConfig,
    checkpoint: PathBuf,
    sequences: Option<PathBuf>,
    synthetic: bool,
    out: Option<PathBuf>,
) -> anyhow::Result<()> {
    let model = load_model(&checkpoint, &cfg)?;
    let seqs = evaluation_data(&cfg, synthetic, sequences)?;
    let bench = evaluate_model(&model, &cfg, &seqs, out.as_deref())?;
    print!("{}", bench.to_json());
    if !bench.overall.failed.is_empty() {
        eprintln!("failed sequences: {}", bench.overall.failed.join(", "));
    }
    Ok(())
}

fn cmd_ablate(
    cfg: RunConfig,
    variants: Vec<LabelVariant>,
    synthetic: bool,
    data: Option<PathBuf>,
    eval_data: Option<PathBuf>,
    out: Option<PathBuf>,
) -> anyhow::Result<()> {
    let variants = if variants.is_empty() { cfg.eval.variants.clone() } else { variants };
    let train = training_data(&cfg, synthetic, data)?;
    let eval = evaluation_data(&cfg, synthetic, eval_data)?;
    let table = run_ablation(&cfg, &variants, &train, &eval)?;
    eprint!("{}", table.to_text());
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(&p, table.to_json())?;
        }
        None => print!("{}", table.to_json()),
    }
    Ok(())
}

fn cmd_synth(cfg: RunConfig, out: PathBuf, split: &str) -> anyhow::Result<()> {
    let (train, eval) = synthetic_sets(&cfg)?;
    let seqs = if split == "eval" { eval } else { train };
    for s in &seqs {
        write_sequence(&out.join(&s.name), s).with_context(|| format!("writing {}", s.name))?;
    }
    println!("wrote {} sequences to {}", seqs.len(), out.display());
    Ok(())
}

fn cmd_labels(cfg: RunConfig, bbox: BBox, variant: Option<LabelVariant>) {
    let mut labels = cfg.labels;
    if let Some(v) = variant {
        labels.variant = v;
    }
    print!("{}", assign(&bbox, &GridSpec::canonical(), &labels).render());
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = resolve_config(&cli.global)?;
    match cli.command {
        Command::Train {
            synthetic,
            data,
            steps,
            out,
            resume,
        } => cmd_train(with_steps(cfg, steps)?, synthetic, data, out, resume),
        Command::Track {
            checkpoint,
            sequence,
            init,
            out,
        } => cmd_track(cfg, checkpoint, sequence, init, out),
        Command::Eval {
            checkpoint,
            sequences,
            synthetic,
            out,
        } => cmd_eval(cfg, checkpoint, sequences, synthetic, out),
        Command::Ablate {
            variants,
            synthetic,
            data,
            eval_data,
            steps,
            out,
        } => cmd_ablate(with_steps(cfg, steps)?, variants, synthetic, data, eval_data, out),
        Command::Synth { out, split } => cmd_synth(cfg, out, &split),
        Command::Labels { bbox, variant } => {
            cmd_labels(cfg, bbox, variant);
            Ok(())
        }
        Command::Config => {
            print!("{}", cfg.to_toml_string());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
