//! `cataract`: batch front end over the segmentation and classification
//! library. Exit codes: 0 success, 1 runtime failure, 2 bad flags.

mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use cataract_core::classifier::Backbone;
use clap::{Args, Parser, Subcommand};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Overrides the default output directory.
pub const OUT_DIR_ENV: &str = "CATARACT_OUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "cataract", version, about = "Iris segmentation and multitask cataract classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic eye corpus with masks, labels and a manifest.
    GenData(GenDataArgs),
    /// Train the segmentation network.
    TrainSeg(TrainSegArgs),
    /// Segmentation error over a manifest split.
    EvalSeg(EvalSegArgs),
    /// Train the multitask classifier on ground-truth ROIs.
    TrainCls(TrainClsArgs),
    /// Classification metrics over a manifest split.
    EvalCls(EvalClsArgs),
    /// Train one segmentation model per structural level and tabulate errors.
    Ablate(AblateArgs),
    /// Segment, post-process and classify one image.
    Infer(InferArgs),
    /// Charts and a summary table from run histories.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, value_parser = parse_positive)]
    pub n_per_class: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Canvas as HEIGHTxWIDTH.
    #[arg(long, default_value = "240x320", value_parser = parse_canvas)]
    pub canvas: (usize, usize),
}

#[derive(Args, Debug)]
pub struct TrainCommon {
    #[arg(long)]
    pub manifest: PathBuf,
    /// JSON training configuration; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_positive)]
    pub epochs: Option<usize>,
    #[arg(long, value_parser = parse_positive_real)]
    pub lr: Option<f64>,
    #[arg(long, value_parser = parse_positive)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train on the originals only.
    #[arg(long)]
    pub no_augment: bool,
    /// Output directory; defaults to $CATARACT_OUT_DIR/<command> or runs/<command>.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainSegArgs {
    #[command(flatten)]
    pub common: TrainCommon,
    /// JSON network configuration.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    #[arg(long)]
    pub levels: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalSegArgs {
    /// Checkpoint directory to predict with.
    #[arg(long, required_unless_present = "pred_dir", conflicts_with = "pred_dir")]
    pub ckpt: Option<PathBuf>,
    /// Directory of predicted mask PNGs named `<sample id>.png`.
    #[arg(long)]
    pub pred_dir: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test", value_parser = ["train", "test"])]
    pub split: String,
    /// Also write the predicted masks here.
    #[arg(long)]
    pub save_masks: Option<PathBuf>,
    /// JSON result path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainClsArgs {
    #[command(flatten)]
    pub common: TrainCommon,
    #[arg(long, value_parser = parse_non_negative_real)]
    pub lambda: Option<f64>,
    #[arg(long, default_value = "small_scratch", value_parser = parse_backbone)]
    pub backbone: Backbone,
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    #[arg(long, default_value_t = 28)]
    pub base_width: usize,
    #[arg(long, default_value_t = 224)]
    pub input_size: usize,
    /// Comma-separated hidden widths of each head.
    #[arg(long, value_delimiter = ',')]
    pub head_widths: Vec<usize>,
}

#[derive(Args, Debug)]
pub struct EvalClsArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test", value_parser = ["train", "test"])]
    pub split: String,
    /// JSON result path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Pooled features and labels, for `report --features`.
    #[arg(long)]
    pub features: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: TrainCommon,
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "2,3,4,5")]
    pub levels: Vec<usize>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub seg_ckpt: PathBuf,
    #[arg(long)]
    pub cls_ckpt: PathBuf,
    /// Structuring element radius of the closing.
    #[arg(long, default_value_t = 2, value_parser = parse_positive)]
    pub close_radius: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Run history JSON files (repeatable).
    #[arg(long, num_args = 1..)]
    pub history: Vec<PathBuf>,
    /// Feature file written by `eval-cls --features`.
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20.0, value_parser = parse_positive_real)]
    pub perplexity: f64,
}

fn parse_canvas(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HEIGHTxWIDTH, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    let (h, w) = (parse(h)?, parse(w)?);
    if h < 32 || w < 32 {
        return Err(format!("canvas {h}x{w} is smaller than 32x32"));
    }
    Ok((h, w))
}

fn parse_positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

fn parse_positive_real(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v > 0.0 => Ok(v),
        Ok(v) => Err(format!("{v} is not a positive number")),
        Err(e) => Err(e.to_string()),
    }
}

fn parse_non_negative_real(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v >= 0.0 => Ok(v),
        Ok(v) => Err(format!("{v} is negative or not finite")),
        Err(e) => Err(e.to_string()),
    }
}

fn parse_backbone(s: &str) -> Result<Backbone, String> {
    s.parse().map_err(|_| {
        let names: Vec<&str> = Backbone::ALL.iter().map(|b| b.name()).collect();
        format!("unknown backbone `{s}`; expected one of {}", names.join(", "))
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::TrainSeg(a) => commands::train_seg(a),
        Command::EvalSeg(a) => commands::eval_seg(a),
        Command::TrainCls(a) => commands::train_cls(a),
        Command::EvalCls(a) => commands::eval_cls(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Infer(a) => commands::infer(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
