use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pyramidfill_core::data::{load_rgb, save_rgb, ImageDataset};
use pyramidfill_core::mask::load_mask_file;
use pyramidfill_core::metrics::{emit_table, evaluate, write_report, MaskSource, TableFormat};
use pyramidfill_core::trainer::{train_all, train_level, PyramidModel, TrainConfig};
use pyramidfill_service::pipeline::inpaint_raster;
use pyramidfill_service::ServiceConfig;

#[derive(Parser)]
#[command(name = "pyramidfill", version, about = "Progressive pyramid inpainting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every level bottom-up, or a single level.
    Train(TrainArgs),
    /// Inpaint one image with a trained pyramid.
    Infer(InferArgs),
    /// Compute L1, PSNR and SSIM over a dataset.
    Eval(EvalArgs),
    /// Run the HTTP inpainting service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Train only this level; lower levels must already be trained.
    #[arg(long)]
    level: Option<usize>,
    /// Override a config value, e.g. `--set optimizer.lr_g=2e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override)]
    overrides: Vec<(String, String)>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    image: PathBuf,
    /// Grayscale mask, 255 = hole.
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    checkpoints: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write the composited result of every level here.
    #[arg(long)]
    intermediates: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    checkpoints: PathBuf,
    /// `center`, `freeform` or a directory of mask files.
    #[arg(long, default_value = "center")]
    masks: String,
    /// Seed of generated free-form masks.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Evaluation resolution; defaults to the checkpoints' full resolution.
    #[arg(long)]
    resolution: Option<usize>,
    /// Write report.{txt,csv,json} here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "text")]
    format: TableFormat,
}

#[derive(Args)]
struct ServeArgs {
    /// Overrides PYRAMIDFILL_PORT.
    #[arg(long)]
    port: Option<u16>,
    /// Overrides PYRAMIDFILL_REGISTRY.
    #[arg(long)]
    registry: Option<PathBuf>,
    /// Overrides PYRAMIDFILL_PAYLOAD_LIMIT (bytes).
    #[arg(long)]
    payload_limit: Option<usize>,
    /// Overrides PYRAMIDFILL_MAX_CONCURRENCY.
    #[arg(long)]
    max_concurrency: Option<usize>,
}

fn parse_override(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(format!("empty key in {s:?}"));
    }
    Ok((k.to_string(), v.trim().to_string()))
}

type CliResult = Result<(), Box<dyn std::error::Error>>;

fn train(args: TrainArgs) -> CliResult {
    let config = TrainConfig::load(&args.config, &args.overrides)?;
    match args.level {
        Some(level) => {
            let out = train_level(level, &config)?;
            let (first, last) = (out.first_eval(), out.last_eval());
            println!("level {level} written to {}", out.dir.display());
            if let (Some(a), Some(b)) = (first, last) {
                println!("masked L1: {a:.4} -> {b:.4}");
            }
        }
        None => {
            for dir in train_all(&config)? {
                println!("{}", dir.display());
            }
        }
    }
    Ok(())
}

fn infer(args: InferArgs) -> CliResult {
    let model = PyramidModel::load(&args.checkpoints)?;
    let image = load_rgb(&args.image)?;
    let mask = load_mask_file(&args.mask)?;
    let result = inpaint_raster(&model, &image, &mask, args.intermediates.is_some())?;
    let adj = result.adjustment;
    if !adj.is_identity() {
        eprintln!(
            "input {}x{} adjusted to {}x{} ({}, offset {},{})",
            adj.original_width,
            adj.original_height,
            adj.width,
            adj.height,
            adj.mode(),
            adj.offset_x,
            adj.offset_y
        );
    }
    save_rgb(&result.image, &args.out)?;
    if let Some(dir) = args.intermediates {
        std::fs::create_dir_all(&dir)?;
        for (i, img) in result.intermediates.iter().enumerate() {
            save_rgb(img, dir.join(format!("level_{i}.png")))?;
        }
    }
    println!("{}", args.out.display());
    Ok(())
}

fn eval(args: EvalArgs) -> CliResult {
    let model = PyramidModel::load(&args.checkpoints)?;
    let dataset = ImageDataset::open(&args.dataset)?;
    let masks = match args.masks.as_str() {
        "center" => MaskSource::Center,
        "freeform" => MaskSource::Freeform { seed: args.seed },
        dir => MaskSource::Directory { path: dir.into() },
    };
    let resolution = args
        .resolution
        .or_else(|| model.full_resolution())
        .ok_or("pass --resolution; the checkpoints do not record one")?;
    let report = evaluate(&dataset, &masks, &model, resolution)?;
    println!("{}", emit_table(&report, args.format)?);
    if let Some(dir) = args.out {
        for p in write_report(&report, &dir)? {
            eprintln!("wrote {}", p.display());
        }
    }
    Ok(())
}

fn serve(args: ServeArgs) -> CliResult {
    let mut config = ServiceConfig::from_env()?;
    if let Some(p) = args.port {
        config.port = p;
    }
    if let Some(r) = args.registry {
        config.registry_path = Some(r);
    }
    if let Some(l) = args.payload_limit {
        config.payload_limit = l;
    }
    if let Some(c) = args.max_concurrency {
        config.max_concurrency = c.max(1);
    }
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(pyramidfill_service::serve(config))?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Serve(a) => serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
