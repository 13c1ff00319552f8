use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use kbcnet::annotation::{
    evaluate_predictions, read_annotations, read_jsonl, write_jsonl, PredictionRecord,
};
use kbcnet::batch::predict_pairs;
use kbcnet::bench::{bench_conv4d, BenchConfig};
use kbcnet::config::{Dataset, RunConfig};
use kbcnet::extract::ToyExtractor;
use kbcnet::grad::{gradcheck, GradcheckConfig};
use kbcnet::pipeline::{FeatureCache, FeatureProvider, InferenceConfig, KbcMode, Model};
use kbcnet::selftest::run_selftest;
use kbcnet::synthetic::{small_object_pair, SmallObjectConfig};
use kbcnet::tensorfile::{read_tensor, write_tensor};
use kbcnet::Tensor;

#[derive(Parser)]
#[command(
    name = "kbcnet",
    version,
    about = "Small-object semantic correspondence toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Predict target keypoints for annotated pairs.
    Infer(InferArgs),
    /// Score predictions against annotations.
    Evaluate(EvaluateArgs),
    /// Time dense against center-pivot 4D convolution.
    #[command(name = "bench-conv4d")]
    BenchConv4d(BenchArgs),
    /// Compare analytic decoder gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Run the built-in example checks.
    Selftest,
    /// Write the synthetic small-object benchmark.
    #[command(name = "make-synthetic")]
    MakeSynthetic(SyntheticArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Preset for the KBC gate threshold.
    #[arg(long)]
    dataset: Option<Dataset>,
    #[arg(long)]
    threshold: Option<f64>,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = self.dataset {
            cfg.dataset = d;
        }
        if self.threshold.is_some() {
            cfg.threshold = self.threshold;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct InferArgs {
    /// Pair annotations, one JSON record per line.
    #[arg(long)]
    pairs: PathBuf,
    /// Directory of `<image id>.kbct` tensors, `[3, H, W]` in [0, 1].
    #[arg(long)]
    images: PathBuf,
    /// Read pre-extracted features from this cache instead of running the
    /// toy extractor.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Weight bundle directory; seeded untrained weights when absent.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value = "off")]
    kbc: KbcMode,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    pairs: PathBuf,
    /// One or more prediction files; each gets its own footer.
    #[arg(long, required = true, num_args = 1..)]
    predictions: Vec<PathBuf>,
    /// Comma-separated PCK alphas; the configured list when absent.
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    /// Report destination; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 16)]
    size: usize,
    #[arg(long, default_value_t = 6)]
    in_channels: usize,
    #[arg(long, default_value_t = 16)]
    out_channels: usize,
    #[arg(long, default_value_t = 21)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Exit nonzero when the largest relative error reaches this value.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args)]
struct SyntheticArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn image_loader(dir: &Path) -> impl Fn(&str) -> kbcnet::Result<Tensor<f32>> + Sync + '_ {
    move |id: &str| {
        if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
            return Err(kbcnet::Error::Config(format!("invalid image id {id:?}")));
        }
        let path = dir.join(format!("{id}.kbct"));
        if !path.is_file() {
            let msg = format!("image file {} not found", path.display());
            return Err(io::Error::new(io::ErrorKind::NotFound, msg).into());
        }
        Ok(read_tensor(path)?.to::<f32>())
    }
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn open(path: &Path) -> anyhow::Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

fn infer(args: &InferArgs) -> anyhow::Result<()> {
    let cfg = args.cfg.resolve()?;
    let pairs = read_annotations(open(&args.pairs)?)?;
    let model = match &args.model {
        Some(dir) => Model::load(dir, cfg.base_channels, cfg.temperature)?,
        None => Model::untrained(
            cfg.base_channels,
            cfg.seed.wrapping_add(1),
            cfg.block_gain,
            cfg.temperature,
        )?,
    };
    let extractor;
    let cache;
    let provider: &dyn FeatureProvider = match &args.features {
        Some(dir) => {
            cache = FeatureCache::new(dir);
            &cache
        }
        None => {
            extractor = ToyExtractor::<f32>::new(cfg.base_channels, cfg.seed)?;
            &extractor
        }
    };
    let icfg = InferenceConfig {
        mode: args.kbc,
        threshold: cfg.kbc_threshold(),
        kbc: cfg.kbc(),
    };
    let records = predict_pairs(provider, &model, &pairs, image_loader(&args.images), &icfg)?;
    write_jsonl(create(&args.out)?, &records)?;
    log::info!(
        "wrote {} predictions to {}",
        records.len(),
        args.out.display()
    );
    Ok(())
}

fn evaluate(args: &EvaluateArgs) -> anyhow::Result<()> {
    let cfg = args.cfg.resolve()?;
    let alphas = args.alphas.clone().unwrap_or_else(|| cfg.alphas.clone());
    if alphas.iter().any(|a| !(*a > 0.0)) {
        bail!(kbcnet::Error::Config("alphas must be positive".into()));
    }
    let pairs = read_annotations(open(&args.pairs)?)?;
    let mut out: Box<dyn Write> = match &args.out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    };
    for path in &args.predictions {
        let preds: Vec<PredictionRecord> = read_jsonl(open(path)?)?;
        let (lines, footer) = evaluate_predictions(&pairs, &preds, &alphas)?;
        write_jsonl(&mut out, &lines)?;
        write_jsonl(&mut out, &[footer])?;
    }
    out.flush()?;
    Ok(())
}

fn bench(args: &BenchArgs) -> anyhow::Result<()> {
    let report = bench_conv4d(&BenchConfig {
        in_channels: args.in_channels,
        out_channels: args.out_channels,
        size: args.size,
        kernel: 3,
        runs: args.runs,
        seed: args.seed,
    })?;
    if args.json {
        println!("{}", serde_json::to_string(&report)?);
        return Ok(());
    }
    let n = args.size;
    println!(
        "volume 1x{}x{n}x{n}x{n}x{n}, {} output channels, 3x3x3x3 kernels, {} runs",
        args.in_channels, args.out_channels, args.runs
    );
    println!("{:<14} {:>12} {:>12}", "method", "median_ms", "min_ms");
    for row in &report.rows {
        println!(
            "{:<14} {:>12.3} {:>12.3}",
            row.method, row.median_ms, row.min_ms
        );
    }
    println!("speedup {:.2}x", report.speedup);
    Ok(())
}

fn run_gradcheck(args: &GradcheckArgs) -> anyhow::Result<()> {
    let report = gradcheck(&GradcheckConfig {
        seed: args.seed,
        step: args.step,
        temperature: args.temperature,
        ..GradcheckConfig::default()
    })?;
    for p in &report.params {
        println!(
            "{:<28} checked {:>3} skipped {:>2} max_rel_error {:.3e}",
            p.name, p.checked, p.skipped_nonsmooth, p.max_rel_error
        );
    }
    println!("max_rel_error {:.3e}", report.max_rel_error);
    if !(report.max_rel_error < args.tolerance) {
        bail!(kbcnet::Error::Config(format!(
            "gradient check failed: {:.3e} >= {:.1e}",
            report.max_rel_error, args.tolerance
        )));
    }
    Ok(())
}

fn selftest() -> anyhow::Result<()> {
    let results = run_selftest();
    let failed = results.iter().filter(|r| !r.passed).count();
    for r in &results {
        match &r.detail {
            None => println!("PASS {}", r.name),
            Some(d) => println!("FAIL {}: {d}", r.name),
        }
    }
    println!("{} checks, {} failed", results.len(), failed);
    if failed > 0 {
        bail!(kbcnet::Error::Config(format!(
            "{failed} self-test checks failed"
        )));
    }
    Ok(())
}

fn make_synthetic(args: &SyntheticArgs) -> anyhow::Result<()> {
    let cfg = SmallObjectConfig {
        seed: args.seed,
        ..SmallObjectConfig::default()
    };
    let images = args.out.join("images");
    fs::create_dir_all(&images)?;
    let mut anns = Vec::with_capacity(args.pairs);
    for i in 0..args.pairs {
        let p = small_object_pair(&cfg, i)?;
        write_tensor(images.join(format!("{}.kbct", p.src_id)), &p.src_image)?;
        write_tensor(images.join(format!("{}.kbct", p.trg_id)), &p.trg_image)?;
        anns.push(p.annotation());
    }
    write_jsonl(create(&args.out.join("pairs.jsonl"))?, &anns)?;
    log::info!("wrote {} pairs to {}", anns.len(), args.out.display());
    Ok(())
}

fn error_line(err: &anyhow::Error) -> serde_json::Value {
    let message = format!("{err:#}");
    match err.downcast_ref::<kbcnet::Error>() {
        Some(e) => {
            let mut body = json!({ "code": e.code(), "message": message });
            if let Some(stage) = e.stage() {
                body["stage"] = json!(stage);
            }
            json!({ "error": body })
        }
        None if err.downcast_ref::<io::Error>().is_some() => {
            json!({ "error": { "code": "E_IO", "message": message } })
        }
        None => json!({ "error": { "code": "E_CLI", "message": message } }),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Infer(a) => infer(a),
        Command::Evaluate(a) => evaluate(a),
        Command::BenchConv4d(a) => bench(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Selftest => selftest(),
        Command::MakeSynthetic(a) => make_synthetic(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
