use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};
use serde_json::json;

use lambda_kws::alloc::TrackingAllocator;
use lambda_kws::config::RunConfig;
use lambda_kws::dataset::{build_manifest, fetch, synth, Split, Subtask};
use lambda_kws::error::KwsError;
use lambda_kws::frontend::{decode_wav, features_csv, fit_length, mel_spectrogram, AudioClip, CLIP_SAMPLES};
use lambda_kws::model::checkpoint;
use lambda_kws::scaling::{scaling_benchmark, LayerKind};
use lambda_kws::train::{self, Evaluation};

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

#[derive(Parser, Debug)]
#[command(name = "lambda-kws", version, about = "Lambda-layer keyword spotting: data, features, training, evaluation and cost accounting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (key=value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for every artifact of this run.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// lambda-resnet18 or lambda-resnet18-2.
    #[arg(long, global = true)]
    model: Option<String>,
    /// 10, 20 or 35.
    #[arg(long, global = true)]
    subtask: Option<Subtask>,
    /// Extracted Speech Commands directory.
    #[arg(long, global = true)]
    dataset_root: Option<PathBuf>,
    /// Config overrides such as train.lr0=0.05.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Download and extract the dataset into --dataset-root.
    Fetch {
        /// Write a synthetic corpus in the same layout instead of downloading.
        #[arg(long)]
        synthetic: bool,
        #[arg(long, default_value_t = 40)]
        clips_per_keyword: usize,
        #[arg(long, default_value_t = 60)]
        speakers: usize,
        #[arg(long, default_value = fetch::DEFAULT_URL)]
        url: String,
        /// Expected archive size in bytes.
        #[arg(long)]
        expected_bytes: Option<u64>,
    },
    /// Write the 40×100 log-mel features of a WAV file as CSV.
    Features {
        #[arg(long)]
        input: PathBuf,
    },
    /// Train a model; writes metrics, checkpoints and the test ROC.
    Train,
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Parameter and multiply counts of a model.
    Count {
        /// Number of output classes; defaults to the subtask's.
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Time one layer over a sweep of sequence lengths.
    Bench {
        #[arg(long)]
        layer: LayerKind,
        #[arg(long, value_delimiter = ',', default_value = "64,128,256,512")]
        n: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        reps: usize,
    },
}

enum Failure {
    Usage(String),
    Domain(KwsError),
}

impl From<KwsError> for Failure {
    fn from(e: KwsError) -> Self {
        Failure::Domain(e)
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n");
            eprintln!("{}", Cli::command().render_usage());
            ExitCode::from(2)
        }
        Err(Failure::Domain(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

/// Config file, then flags, then `--set` overrides.
fn resolve(cli: &Cli) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) if !p.is_file() => return Err(Failure::Usage(format!("config file {} not found", p.display()))),
        Some(p) => RunConfig::load(p).map_err(|e| Failure::Usage(e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(m) = &cli.model {
        cfg.set("model.name", m).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    if let Some(s) = cli.subtask {
        cfg.data.subtask = s;
    }
    if let Some(r) = &cli.dataset_root {
        cfg.data.root = Some(r.clone());
    }
    cfg.apply_overrides(&cli.overrides).map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn dataset_root(cfg: &RunConfig) -> std::result::Result<PathBuf, Failure> {
    cfg.data.root.clone().ok_or_else(|| Failure::Usage("--dataset-root (or data.root) is required".into()))
}

fn out_dir(path: &Path, cfg: &RunConfig) -> lambda_kws::error::Result<()> {
    fs::create_dir_all(path).map_err(|e| KwsError::Io { path: path.into(), source: e })?;
    cfg.write_snapshot(&path.join("config.txt"))
}

fn write(path: &Path, text: &str) -> lambda_kws::error::Result<()> {
    fs::write(path, text).map_err(|e| KwsError::Io { path: path.into(), source: e })
}

fn write_eval(dir: &Path, prefix: &str, e: &Evaluation, classes: &[String]) -> lambda_kws::error::Result<()> {
    write(&dir.join(format!("{prefix}_roc.csv")), &e.roc.to_csv())?;
    let mut conf = format!("true\\pred,{}\n", classes.join(","));
    for (name, row) in classes.iter().zip(&e.confusion) {
        let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        conf.push_str(&format!("{name},{}\n", cells.join(",")));
    }
    write(&dir.join(format!("{prefix}_confusion.csv")), &conf)?;
    let summary = json!({
        "accuracy": e.accuracy,
        "loss": e.loss,
        "samples": e.samples,
        "auc": e.roc.auc(),
        "equal_error_rate": e.roc.equal_error_rate(),
    });
    write(&dir.join(format!("{prefix}.json")), &format!("{summary:#}\n"))
}

fn run(cli: Cli) -> Outcome {
    let cfg = resolve(&cli)?;
    match &cli.command {
        Command::Fetch { synthetic, clips_per_keyword, speakers, url, expected_bytes } => {
            let root = dataset_root(&cfg)?;
            if *synthetic {
                let sc = synth::SynthConfig {
                    clips_per_keyword: *clips_per_keyword,
                    speakers: *speakers,
                    seed: cfg.seed,
                    ..synth::SynthConfig::default()
                };
                let s = synth::generate(&root, &sc)?;
                println!("synthetic corpus: {} clips ({} validation, {} test), {} noise files", s.clips, s.validation, s.test, s.noise_files);
            } else {
                let opts = fetch::FetchOptions { url: url.clone(), expected_bytes: *expected_bytes };
                let archive = fetch::fetch(&root, &opts)?;
                println!("extracted {} into {}", archive.display(), root.display());
            }
        }
        Command::Features { input } => {
            let bytes = fs::read(input).map_err(|e| KwsError::Io { path: input.clone(), source: e })?;
            let clip = decode_wav(&bytes)?;
            let clip = AudioClip { samples: fit_length(clip.samples, CLIP_SAMPLES), ..clip };
            let f = mel_spectrogram(&clip)?;
            out_dir(&cli.out, &cfg)?;
            let path = cli.out.join("features.csv");
            write(&path, &features_csv(&f))?;
            println!("{}×{} features written to {}", f.shape()[0], f.shape()[1], path.display());
        }
        Command::Train => {
            let root = dataset_root(&cfg)?;
            let mut manifest = build_manifest(&root, cfg.data.subtask)?;
            if cfg.data.clips_per_class > 0 {
                manifest = manifest.subsample(cfg.data.clips_per_class, cfg.seed);
            }
            out_dir(&cli.out, &cfg)?;
            manifest.write_csv(&cli.out.join("manifest.csv"))?;
            println!(
                "training on {} clips ({} validation, {} test), {} classes",
                manifest.count(Split::Train),
                manifest.count(Split::Validation),
                manifest.count(Split::Test),
                manifest.num_classes()
            );
            let (_, report) = train::train(&cfg, &manifest, Some(&cli.out))?;
            println!("{:>5} {:>9} {:>10} {:>9} {:>9} {:>8}", "epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc");
            for m in &report.epochs {
                println!(
                    "{:>5} {:>9.5} {:>10.4} {:>9.3} {:>9.4} {:>8.3}",
                    m.epoch, m.lr, m.train_loss, m.train_acc, m.val_loss, m.val_acc
                );
            }
            println!("best epoch {} (validation loss {:.4})", report.best_epoch, report.best_val_loss);
            if let Some(t) = &report.test {
                write_eval(&cli.out, "test", t, &manifest.class_names())?;
                println!("test accuracy {:.4} over {} clips", t.accuracy, t.samples);
            }
        }
        Command::Eval { checkpoint: ckpt, split } => {
            let root = dataset_root(&cfg)?;
            let manifest = build_manifest(&root, cfg.data.subtask)?;
            let (model, _) = checkpoint::load(ckpt)?;
            let e = train::evaluate(&model, &manifest, *split, cfg.data.composition, cfg.seed, cfg.train.batch_size)?;
            out_dir(&cli.out, &cfg)?;
            write_eval(&cli.out, split.name(), &e, &manifest.class_names())?;
            println!("{split} accuracy {:.4} over {} clips, ROC AUC {:.4}", e.accuracy, e.samples, e.roc.auc());
        }
        Command::Count { classes } => {
            let spec = match classes {
                Some(k) => cfg.model_spec_with_classes(*k)?,
                None => cfg.model_spec(cfg.data.subtask)?,
            };
            let f = spec.count_flops(spec.n_frames);
            let params = spec.count_params();
            println!("model        {}", cfg.model_name);
            println!("classes      {}", spec.num_classes);
            println!("parameters   {params}");
            println!("multiplies   {}", f.total());
            for (name, v) in [
                ("stem", f.stem),
                ("block convs", f.block_convs),
                ("shortcuts", f.shortcuts),
                ("lambda proj", f.lambda_projections),
                ("lambda cont", f.lambda_content),
                ("lambda pos", f.lambda_position),
                ("lambda apply", f.lambda_apply),
                ("classifier", f.classifier),
            ] {
                println!("  {name:<12} {v}");
            }
            out_dir(&cli.out, &cfg)?;
            let j = json!({ "model": cfg.model_name, "classes": spec.num_classes, "parameters": params, "multiplies": f.total() });
            write(&cli.out.join("count.json"), &format!("{j:#}\n"))?;
        }
        Command::Bench { layer, n, reps } => {
            let r = scaling_benchmark(*layer, n, *reps)?;
            out_dir(&cli.out, &cfg)?;
            let path = cli.out.join(format!("scaling_{}.csv", layer.name()));
            r.write_csv(&path)?;
            println!("{:>6} {:>14} {:>12} {:>12}", "n", "mean_ns", "stderr_ns", "peak_bytes");
            for p in &r.points {
                println!("{:>6} {:>14.0} {:>12.0} {:>12}", p.n, p.mean_ns, p.stderr_ns, p.peak_bytes);
            }
            println!(
                "{} time slope {:.3} ± {:.3}{}",
                layer.name(),
                r.slope,
                r.slope_stderr,
                if r.unreliable { " (unreliable: high timing variance)" } else { "" }
            );
        }
    }
    Ok(())
}
