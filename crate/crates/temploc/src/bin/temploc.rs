//! Command-line surface tying the modules into reproducible experiments.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use temploc::formats::{
    config_digest, read_jsonl, write_jsonl, FormatError, ItemRecord,
};
use temploc::head::SoiConfig;
use temploc::metrics::{ap_csv, ar_an_csv, EvalConfig};
use temploc::pipeline::{FusionMode, FusionModel, ModelConfig, TrainConfig};
use temploc::rf::derive_rates;
use temploc::segments::{Segment, ScoredSegment};
use temploc::spn::{SpnConfig, Variant};
use temploc::synth::{generate, read_split, write_dataset, SynthConfig, SynthError, VideoSample};

// exit codes: 2 usage (clap), 3 missing file, 4 format error, 5 digest
// mismatch, 6 invalid or infeasible config
const EXIT_MISSING_FILE: u8 = 3;
const EXIT_FORMAT: u8 = 4;
const EXIT_DIGEST: u8 = 5;
const EXIT_CONFIG: u8 = 6;

#[derive(Parser)]
#[command(name = "temploc", about = "Temporal action localization experiments", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-stream dataset.
    Synth {
        /// JSON file with generator settings; defaults are used if omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a detector on a dataset split.
    Train(TrainArgs),
    /// Write proposals for every video in a split.
    Propose {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write detections for every video in a split.
    Detect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// AR-AN table from a proposals file.
    EvalProposals {
        #[arg(long)]
        proposals: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-class AP table from a detections file.
    EvalDetections {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the tower hyperparameter table for a list of anchor scales.
    Rf {
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,8,11,16")]
        scales: Vec<usize>,
        #[arg(long, default_value = "off")]
        context: String,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "single")]
    mode: String,
    #[arg(long, default_value = "multi-dilated")]
    variant: String,
    #[arg(long, default_value = "off")]
    context: String,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 256)]
    hidden: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// Number of action classes; inferred from the data when omitted.
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config_digest: String,
    seed: Option<u64>,
    started_unix: u64,
    finished_unix: u64,
    metrics: serde_json::Value,
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).unwrap().as_secs()
}

fn write_manifest(out: &Path, manifest: &RunManifest) -> Result<(), CliError> {
    let path = out.with_extension(format!(
        "{}manifest.json",
        out.extension().map(|e| format!("{}.", e.to_string_lossy())).unwrap_or_default()
    ));
    fs::write(&path, serde_json::to_string_pretty(manifest).unwrap())
        .map_err(|e| CliError::Io(path.display().to_string(), e))?;
    Ok(())
}

enum CliError {
    Io(String, std::io::Error),
    Format(FormatError),
    Synth(SynthError),
    Config(String),
    Other(String),
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        CliError::Format(e)
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Synth(e)
    }
}

impl CliError {
    fn report(&self) -> (u8, String) {
        match self {
            CliError::Io(path, e) if e.kind() == std::io::ErrorKind::NotFound => {
                (EXIT_MISSING_FILE, format!("missing file: {path}"))
            }
            CliError::Io(path, e) => (EXIT_FORMAT, format!("io error on {path}: {e}")),
            CliError::Format(FormatError::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => {
                (EXIT_MISSING_FILE, format!("missing file: {e}"))
            }
            CliError::Format(FormatError::DigestMismatch { expected, found }) => {
                (EXIT_DIGEST, format!("config digest mismatch: expected {expected}, found {found}"))
            }
            CliError::Format(e) => (EXIT_FORMAT, e.to_string()),
            CliError::Synth(SynthError::Format(e)) => CliError::Format(FormatError::Invalid {
                file: String::new(),
                reason: e.to_string(),
            })
            .report(),
            CliError::Synth(e) => (EXIT_CONFIG, e.to_string()),
            CliError::Config(msg) => (EXIT_CONFIG, msg.clone()),
            CliError::Other(msg) => (EXIT_FORMAT, msg.clone()),
        }
    }
}

fn parse_flag(s: &str, what: &str) -> Result<bool, CliError> {
    match s {
        "on" => Ok(true),
        "off" => Ok(false),
        _ => Err(CliError::Config(format!("{what} must be `on` or `off`, got `{s}`"))),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, msg) = e.report();
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { config, out } => cmd_synth(config.as_deref(), &out),
        Command::Train(args) => cmd_train(&args),
        Command::Propose { ckpt, data, out } => cmd_propose(&ckpt, &data, &out),
        Command::Detect { ckpt, data, out } => cmd_detect(&ckpt, &data, &out),
        Command::EvalProposals { proposals, data, out } => cmd_eval_proposals(&proposals, &data, &out),
        Command::EvalDetections { detections, data, out } => {
            cmd_eval_detections(&detections, &data, &out)
        }
        Command::Rf { scales, context } => cmd_rf(&scales, &context),
    }
}

fn cmd_synth(config: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let cfg = match config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Io(path.display().to_string(), e))?;
            serde_json::from_str::<SynthConfig>(&text)
                .map_err(|e| CliError::Config(format!("bad synth config: {e}")))?
        }
        None => SynthConfig::default(),
    };
    let started = now_unix();
    let dataset = generate::<f32>(&cfg)?;
    fs::create_dir_all(out).map_err(|e| CliError::Io(out.display().to_string(), e))?;
    write_dataset(out, &dataset)?;
    let cfg_json = serde_json::to_string(&cfg).unwrap();
    write_manifest(
        &out.join("dataset"),
        &RunManifest {
            command: "synth".into(),
            config_digest: config_digest(&cfg_json),
            seed: Some(cfg.seed),
            started_unix: started,
            finished_unix: now_unix(),
            metrics: serde_json::json!({
                "train_videos": dataset.train.len(),
                "test_videos": dataset.test.len(),
            }),
        },
    )?;
    println!("wrote {} train / {} test videos to {}", dataset.train.len(), dataset.test.len(), out.display());
    Ok(())
}

fn load_split(dir: &Path) -> Result<Vec<VideoSample<f32>>, CliError> {
    Ok(read_split::<f32>(dir)?)
}

fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let mode = FusionMode::parse(&args.mode)
        .ok_or_else(|| CliError::Config(format!("unknown mode `{}`", args.mode)))?;
    let variant = Variant::parse(&args.variant)
        .ok_or_else(|| CliError::Config(format!("unknown variant `{}`", args.variant)))?;
    let context = parse_flag(&args.context, "--context")?;
    let videos = load_split(&args.data)?;
    if videos.is_empty() {
        return Err(CliError::Config("training split is empty".into()));
    }
    let num_classes = match args.classes {
        Some(c) => c,
        None => videos
            .iter()
            .flat_map(|v| v.annotations.iter().map(|(_, c)| *c))
            .max()
            .ok_or_else(|| CliError::Config("no annotations to infer class count from".into()))?,
    };
    let model_config = ModelConfig {
        mode,
        spn: SpnConfig { hidden_width: args.hidden, context, variant, ..SpnConfig::default() },
        soi: SoiConfig { context, hidden_width: args.hidden, num_classes, ..SoiConfig::default() },
        d_per_stream: videos[0].stream_a.dim(),
    };
    let train_config = TrainConfig {
        learning_rate: args.lr,
        steps: args.steps,
        seed: args.seed,
        ..TrainConfig::default()
    };
    let started = now_unix();
    let mut model = FusionModel::<f32>::new(model_config, args.seed)
        .map_err(|e| CliError::Other(e.to_string()))?;
    let history = model.train(&videos, &train_config).map_err(|e| CliError::Other(e.to_string()))?;
    model.save(&args.out)?;
    let config_json = serde_json::to_string(&model.config).unwrap();
    let first = history.first().map(|l| l.proposal + l.classification).unwrap_or(0.0);
    let last_window: Vec<f64> = history
        .iter()
        .rev()
        .take(20)
        .map(|l| l.proposal + l.classification)
        .collect();
    let last = last_window.iter().sum::<f64>() / last_window.len().max(1) as f64;
    write_manifest(
        &args.out,
        &RunManifest {
            command: "train".into(),
            config_digest: config_digest(&config_json),
            seed: Some(args.seed),
            started_unix: started,
            finished_unix: now_unix(),
            metrics: serde_json::json!({
                "steps": args.steps,
                "first_total_loss": first,
                "final_total_loss_avg20": last,
            }),
        },
    )?;
    println!("trained {} steps; loss {first:.4} -> {last:.4}; checkpoint {}", args.steps, args.out.display());
    Ok(())
}

fn cmd_propose(ckpt: &Path, data: &Path, out: &Path) -> Result<(), CliError> {
    let model = FusionModel::<f32>::load(ckpt)?;
    let videos = load_split(data)?;
    let mut items = Vec::new();
    for v in &videos {
        let proposals = model.propose_video(v).map_err(|e| CliError::Other(e.to_string()))?;
        for p in proposals {
            items.push(ItemRecord {
                video: v.id.clone(),
                start: p.segment.start,
                end: p.segment.end,
                score: p.score,
                label: None,
            });
        }
    }
    write_jsonl(out, &items)?;
    println!("wrote {} proposals to {}", items.len(), out.display());
    Ok(())
}

fn cmd_detect(ckpt: &Path, data: &Path, out: &Path) -> Result<(), CliError> {
    let model = FusionModel::<f32>::load(ckpt)?;
    let videos = load_split(data)?;
    let mut items = Vec::new();
    for v in &videos {
        let detections = model.detect_video(v).map_err(|e| CliError::Other(e.to_string()))?;
        for d in detections {
            items.push(ItemRecord {
                video: v.id.clone(),
                start: d.segment.start,
                end: d.segment.end,
                score: d.score,
                label: Some(d.class_label),
            });
        }
    }
    write_jsonl(out, &items)?;
    println!("wrote {} detections to {}", items.len(), out.display());
    Ok(())
}

fn video_index(videos: &[VideoSample<f32>]) -> std::collections::HashMap<&str, usize> {
    videos.iter().enumerate().map(|(i, v)| (v.id.as_str(), i)).collect()
}

fn cmd_eval_proposals(proposals: &Path, data: &Path, out: &Path) -> Result<(), CliError> {
    let videos = load_split(data)?;
    let items = read_jsonl(proposals)?;
    let index = video_index(&videos);
    let mut per_video: Vec<Vec<ScoredSegment>> = vec![Vec::new(); videos.len()];
    for item in &items {
        let &vi = index.get(item.video.as_str()).ok_or_else(|| {
            CliError::Format(FormatError::Invalid {
                file: proposals.display().to_string(),
                reason: format!("unknown video `{}`", item.video),
            })
        })?;
        per_video[vi].push(ScoredSegment {
            segment: Segment::new(item.start, item.end),
            score: item.score,
        });
    }
    let gts: Vec<Vec<Segment>> =
        videos.iter().map(|v| v.annotations.iter().map(|(s, _)| *s).collect()).collect();
    let cfg = EvalConfig::default();
    let curve = temploc::metrics::ar_an_curve(&per_video, &gts, &cfg);
    let started = now_unix();
    fs::write(out, ar_an_csv(&curve)).map_err(|e| CliError::Io(out.display().to_string(), e))?;
    let summary: Vec<_> = cfg
        .an_grid
        .iter()
        .map(|&an| {
            let ar = temploc::metrics::average_recall(&per_video, &gts, an, &cfg);
            serde_json::json!({ "an": an, "ar": ar })
        })
        .collect();
    write_manifest(
        out,
        &RunManifest {
            command: "eval-proposals".into(),
            config_digest: config_digest(&format!("{:?}", cfg.an_grid)),
            seed: None,
            started_unix: started,
            finished_unix: now_unix(),
            metrics: serde_json::json!({ "ar_an": summary }),
        },
    )?;
    println!("wrote AR-AN table to {}", out.display());
    Ok(())
}

fn cmd_eval_detections(detections: &Path, data: &Path, out: &Path) -> Result<(), CliError> {
    let videos = load_split(data)?;
    let items = read_jsonl(detections)?;
    let index = video_index(&videos);
    let mut flat = Vec::new();
    for item in &items {
        let &vi = index.get(item.video.as_str()).ok_or_else(|| {
            CliError::Format(FormatError::Invalid {
                file: detections.display().to_string(),
                reason: format!("unknown video `{}`", item.video),
            })
        })?;
        let label = item.label.ok_or_else(|| {
            CliError::Format(FormatError::Invalid {
                file: detections.display().to_string(),
                reason: "detection line missing label".into(),
            })
        })?;
        flat.push(temploc::metrics::EvalDetection {
            video: vi,
            segment: Segment::new(item.start, item.end),
            class_label: label,
            score: item.score,
        });
    }
    let gts: Vec<Vec<(Segment, usize)>> = videos.iter().map(|v| v.annotations.clone()).collect();
    let cfg = EvalConfig::default();
    let table = temploc::metrics::ap_table(&flat, &gts, &cfg);
    let started = now_unix();
    fs::write(out, ap_csv(&table)).map_err(|e| CliError::Io(out.display().to_string(), e))?;
    let summary: Vec<_> = cfg
        .detection_tiou_thresholds
        .iter()
        .map(|&thr| {
            let map = temploc::metrics::mean_ap(&flat, &gts, thr);
            serde_json::json!({ "tiou": thr, "map": map })
        })
        .collect();
    write_manifest(
        out,
        &RunManifest {
            command: "eval-detections".into(),
            config_digest: config_digest(&format!("{:?}", cfg.detection_tiou_thresholds)),
            seed: None,
            started_unix: started,
            finished_unix: now_unix(),
            metrics: serde_json::json!({ "map": summary }),
        },
    )?;
    println!("wrote AP table to {}", out.display());
    Ok(())
}

fn cmd_rf(scales: &[usize], context: &str) -> Result<(), CliError> {
    let context = parse_flag(context, "--context")?;
    println!("scale,pool,r1,r2,rf");
    for &s in scales {
        let spec = derive_rates(s, context);
        println!(
            "{},{},{},{},{}",
            s, spec.pool_kernel, spec.dilation1, spec.dilation2, spec.receptive_field
        );
    }
    Ok(())
}
