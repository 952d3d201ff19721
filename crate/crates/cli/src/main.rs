use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pixelsail::data::{
    generate_synthetic_dataset, prompts_from_json, referenced_prompts, save_jsonl, Image, ImageSource, Task,
};
use pixelsail::eval::{pca_feature_image, run_benchmark};
use pixelsail::mask::BinaryMask;
use pixelsail::model::PixelSail;
use pixelsail::train::{
    checkpoint_config, load_params, load_records, synth_config, Archive, RunConfig, Trainer, CSV_HEADER, SEED_ENV,
};
use pixelsail::Error;

#[derive(Parser)]
#[command(name = "pixelsail", version, about = "Single-transformer pixel-grounded vision-language model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train and write a CSV loss log plus checkpoints.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory.
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a model on a dataset and write a JSON report.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Model checkpoint; a freshly initialised model is used without it.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// JSONL dataset; defaults to the configured data source.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
    },
    /// Answer one instruction about one image.
    Infer {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// PPM (P6) image.
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        instruction: String,
        /// JSON list of visual prompts.
        #[arg(long)]
        prompts: Option<PathBuf>,
        /// Emit a mask even when the answer has no [SEG].
        #[arg(long)]
        force_seg: bool,
        #[arg(long, default_value_t = 32)]
        max_new: usize,
        /// Directory for mask images.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Write a synthetic benchmark set (region captions, MCQs, V-T RES) as
    /// JSONL with PPM images.
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 30)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value = "bench")]
        out: PathBuf,
    },
    /// PCA renderings of the backbone and upsampled feature maps.
    Viz {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn load_config(args: &ConfigArgs, base: Option<RunConfig>) -> Result<RunConfig> {
    let env_seed = std::env::var(SEED_ENV).ok();
    let Some(base) = base else {
        return Ok(RunConfig::load(args.config.as_deref(), &args.set, env_seed.as_deref())?);
    };
    let mut cfg = base;
    if let Some(p) = &args.config {
        let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
        cfg.apply_text(&text)?;
    }
    for o in &args.set {
        let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(s) = env_seed {
        cfg.set("train.seed", &s)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn open_checkpoint(path: &Path) -> Result<Archive> {
    Archive::load(path).map_err(|e| match e {
        Error::Io(io) => Error::Checkpoint(format!("{}: {io}", path.display())).into(),
        other => anyhow::Error::from(other).context(format!("loading {}", path.display())),
    })
}

/// Model and config from a checkpoint; the stored config is the base for
/// `--config`/`--set`.
fn checkpoint_model(path: &Path, args: &ConfigArgs) -> Result<(PixelSail, RunConfig)> {
    let archive = open_checkpoint(path)?;
    let cfg = load_config(args, Some(checkpoint_config(&archive)?))?;
    let params = load_params(&archive, &cfg)?;
    Ok((PixelSail::from_params(cfg.model.clone(), params)?, cfg))
}

fn read_image(path: &Path) -> Result<Image> {
    Image::read_ppm(path).map_err(|e| match e {
        Error::Io(io) => Error::Data(format!("{}: {io}", path.display())).into(),
        other => anyhow::Error::from(other),
    })
}

fn image_grid(model: &PixelSail, image: &Image) -> Result<()> {
    model.grid_for(&image.to_tensor()).map_err(|e| Error::Data(e.to_string()))?;
    Ok(())
}

fn mask_image(m: &BinaryMask) -> Image {
    let mut img = Image::filled(m.height(), m.width(), [0, 0, 0]);
    for y in 0..m.height() {
        for x in 0..m.width() {
            if m.get(y, x) {
                img.set(y, x, [255, 255, 255]);
            }
        }
    }
    img
}

fn train(args: &ConfigArgs, out: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = load_config(args, None)?;
    let (records, base) = load_records(&cfg)?;
    let mut trainer = match resume {
        Some(p) => {
            if !p.exists() {
                return Err(Error::Checkpoint(format!("{}: no such file", p.display())).into());
            }
            Trainer::resume(cfg.clone(), &records, base.as_deref(), p)?
        }
        None => Trainer::new(cfg.clone(), &records, base.as_deref())?,
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    let log_path = out.join("loss.csv");
    let mut log = if resume.is_some() && log_path.exists() {
        fs::OpenOptions::new().append(true).open(&log_path)?
    } else {
        let mut f = fs::File::create(&log_path)?;
        writeln!(f, "{CSV_HEADER}")?;
        f
    };
    let every = cfg.train.checkpoint_every;
    trainer.run(None, |step, t| {
        writeln!(log, "{}", step.csv_line())?;
        let done = step.step + 1;
        if every > 0 && done % every == 0 {
            t.save(&out.join(format!("step-{done:06}.ckpt")))?;
        }
        Ok(())
    })?;
    log.flush()?;
    let last = out.join("final.ckpt");
    trainer.save(&last)?;
    eprintln!("wrote {} and {}", log_path.display(), last.display());
    Ok(())
}

fn eval(args: &ConfigArgs, checkpoint: Option<&Path>, data: Option<&Path>, out: &Path) -> Result<()> {
    let (model, mut cfg) = match checkpoint {
        Some(p) => checkpoint_model(p, args)?,
        None => {
            let cfg = load_config(args, None)?;
            (PixelSail::new(cfg.model.clone())?, cfg)
        }
    };
    if let Some(d) = data {
        cfg.data.path = Some(d.to_path_buf());
    }
    let (records, base) = load_records(&cfg)?;
    let report = run_benchmark(&model, &records, &cfg.eval.tasks, base.as_deref())?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join("report.json");
    fs::write(&path, report.to_json()?)?;
    print!("{}", report.table());
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    eprintln!("wrote {}", path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn infer(
    args: &ConfigArgs,
    checkpoint: &Path,
    image: &Path,
    instruction: &str,
    prompts: Option<&Path>,
    force_seg: bool,
    max_new: usize,
    out: &Path,
) -> Result<()> {
    let (model, _) = checkpoint_model(checkpoint, args)?;
    let img = read_image(image)?;
    image_grid(&model, &img)?;
    let prompts = match prompts {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
            prompts_from_json(&text).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?
        }
        None => {
            let refs = referenced_prompts(instruction);
            if !refs.is_empty() {
                eprintln!("warning: instruction refers to <VP_{}> but no prompts file was given", refs[0]);
            }
            Vec::new()
        }
    };
    let (g, masks) = model.answer(&img.to_tensor(), instruction, &prompts, max_new, force_seg)?;
    println!("{}", g.text);
    if !masks.is_empty() {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    }
    for (k, m) in masks.iter().enumerate() {
        let p = out.join(format!("mask-{}.ppm", k + 1));
        mask_image(m).write_ppm(&p)?;
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

fn bench(args: &ConfigArgs, n: usize, seed: u64, out: &Path) -> Result<()> {
    let cfg = load_config(args, None)?;
    let mut sc = synth_config(&cfg);
    sc.tasks = vec![Task::RegionCaption, Task::Mcq, Task::VtRes];
    sc.mix_plain_vqa = false;
    let mut records = generate_synthetic_dataset(n, &sc, seed)?;
    fs::create_dir_all(out.join("images")).with_context(|| format!("creating {}", out.display()))?;
    for r in &mut records {
        if let ImageSource::Inline(img) = &r.image {
            let rel = format!("images/{}.ppm", r.id);
            img.write_ppm(&out.join(&rel))?;
            r.image = ImageSource::Path(rel);
        }
    }
    let path = out.join("bench.jsonl");
    save_jsonl(&path, &records)?;
    eprintln!("wrote {} records to {}", records.len(), path.display());
    Ok(())
}

fn viz(args: &ConfigArgs, checkpoint: &Path, image: &Path, out: &Path) -> Result<()> {
    let (model, _) = checkpoint_model(checkpoint, args)?;
    let img = read_image(image)?;
    image_grid(&model, &img)?;
    let (f_l, f_h) = model.features(&img.to_tensor())?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (name, f) in [("features.ppm", &f_l), ("mask_features.ppm", &f_h)] {
        let p = out.join(name);
        pca_feature_image(f)?.write_ppm(&p)?;
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { cfg, out, resume } => train(&cfg, &out, resume.as_deref()),
        Command::Eval { cfg, checkpoint, data, out } => eval(&cfg, checkpoint.as_deref(), data.as_deref(), &out),
        Command::Infer { cfg, checkpoint, image, instruction, prompts, force_seg, max_new, out } => {
            if max_new == 0 {
                bail!(Error::Config("--max-new must be at least 1".into()));
            }
            infer(&cfg, &checkpoint, &image, &instruction, prompts.as_deref(), force_seg, max_new, &out)
        }
        Command::Bench { cfg, n, seed, out } => bench(&cfg, n, seed, &out),
        Command::Viz { cfg, checkpoint, image, out } => viz(&cfg, &checkpoint, &image, &out),
    }
}

/// 2 config, 3 checkpoint, 4 data, 1 anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config(_)) => 2,
        Some(Error::Checkpoint(_)) => 3,
        Some(Error::Data(_) | Error::Json(_) | Error::Shape { .. }) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
