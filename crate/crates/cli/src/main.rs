//! `panofill` command line: dataset generation, training, inference,
//! evaluation and experiments.
//!
//! Exit codes: 0 success, 1 internal error, 2 configuration or usage error,
//! 3 I/O error, 4 checkpoint mismatch or corruption, 5 numerical abort.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use panofill::error::Error;
use panofill::geometry::CornerLayout;
use panofill::losses::{FeatureExtractor, RandomPyramid};
use panofill::metrics::{default_buckets, format_table};
use panofill::raster::{BinaryMask, Panorama};
use panofill::synth::{generate_dataset, read_layout, Dataset, MANIFEST_FILE};
use panofill::training::{
    evaluate_model, inpaint, load_checkpoint, load_samples, run_experiment, train, FixedProvider, OracleProvider,
    Prepared, Protocol, TrainConfig, TrainData,
};

#[derive(Parser)]
#[command(name = "panofill", version, about = "Layout-guided panorama inpainting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML configuration file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set generator.base_channels=32`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model; checkpoints and logs go to a new run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from this checkpoint, inside its own run directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, default_value = "runs")]
        runs: PathBuf,
    },
    /// Inpaint one image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// Layout JSON; a fixed cylindrical layout is used when omitted.
        #[arg(long)]
        layout: Option<PathBuf>,
        #[arg(long, default_value = "runs")]
        runs: PathBuf,
    },
    /// Score a checkpoint on a dataset, stratified by hole size.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "runs")]
        runs: PathBuf,
    },
    /// Run an experiment protocol: ablation, mask_size or layout_sensitivity.
    Ablate {
        #[arg(long)]
        protocol: String,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "runs")]
        runs: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::InconsistentLayout(_) | Error::ShapeMismatch { .. } => 2,
        Error::NonBinaryMask(_) | Error::EmptyDataset | Error::InvalidRoom(_) => 2,
        Error::Io { .. } | Error::Image { .. } | Error::Json { .. } => 3,
        Error::CheckpointMismatch(_) | Error::CheckpointFormat(_) => 4,
        Error::NumericalAbort { .. } | Error::NonFinite(_) => 5,
        _ => 1,
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), Error> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| Error::Config(format!("override {spec:?} is not KEY=VALUE")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::Config(format!("override key {key}: {part} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

fn load_config(args: &ConfigArgs) -> Result<TrainConfig, Error> {
    let mut table = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| Error::Io { path: p.clone(), source })?;
            toml::from_str::<toml::Table>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for o in &args.overrides {
        apply_override(&mut table, o)?;
    }
    let text = toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?;
    TrainConfig::from_toml(&text)
}

/// `<runs>/<UTC timestamp>-seed<seed>`, with a numeric suffix on collision.
fn run_dir(runs: &Path, seed: u64) -> Result<PathBuf, Error> {
    let stamp = chrono::Utc::now().format("%Y%m%d-%H%M%S");
    let base = format!("{stamp}-seed{seed}");
    let mut dir = runs.join(&base);
    let mut k = 2;
    while dir.exists() {
        dir = runs.join(format!("{base}-{k}"));
        k += 1;
    }
    std::fs::create_dir_all(&dir).map_err(|source| Error::Io { path: dir.clone(), source })?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData { cfg, out, n, seed } => {
            let cfg = load_config(&cfg)?;
            if n == 0 {
                return Err(Error::Config("--n must be positive".into()));
            }
            let manifest = generate_dataset(n, seed, &cfg.data_config(), &out)?;
            let path = out.join(MANIFEST_FILE);
            eprintln!("gen-data: {} samples at {}x{}", manifest.samples.len(), cfg.width, cfg.height);
            println!("{}", path.display());
        }
        Command::Train { cfg, resume, runs } => {
            let cfg = load_config(&cfg)?;
            let dir = match &resume {
                Some(ckpt) => ckpt
                    .parent()
                    .and_then(Path::parent)
                    .map(Path::to_path_buf)
                    .ok_or_else(|| Error::Config(format!("cannot find the run directory of {}", ckpt.display())))?,
                None => run_dir(&runs, cfg.seed)?,
            };
            write_text(&dir.join("config.toml"), &cfg.to_toml())?;
            let data = TrainData::split(load_samples(&cfg)?, &OracleProvider)?;
            let outcome = train(&cfg, &data, &dir, resume.as_deref())?;
            let last = outcome.last_report.map_or("no new steps".to_string(), |r| format!("L_total {:.4}", r.total));
            eprintln!("train: {} steps, {last}, log {}", outcome.state.step, outcome.log.display());
            println!("{}", outcome.final_checkpoint.display());
        }
        Command::Infer { ckpt, image, mask, layout, runs } => {
            let (state, meta) = load_checkpoint(&ckpt, None)?;
            let cfg = meta.config;
            let img = Panorama::load_png(&image)?;
            let m = BinaryMask::load_mask_png(&mask)?;
            if img.dims() != (cfg.height, cfg.width) {
                return Err(Error::Config(format!(
                    "image is {}x{}, the checkpoint expects {}x{}",
                    img.width(),
                    img.height(),
                    cfg.width,
                    cfg.height
                )));
            }
            let lay: CornerLayout = match &layout {
                Some(p) => read_layout(p)?,
                None => {
                    log::warn!("no layout given; using a fixed cylindrical layout");
                    FixedProvider::fallback(cfg.height, cfg.width).layout
                }
            };
            let out = inpaint(&state.generator, cfg.variant, &img, &m, &lay)?;
            let dir = run_dir(&runs, cfg.seed)?;
            out.output.save_png(&dir.join("output.png"))?;
            let comp = dir.join("composite.png");
            out.composite.save_png(&comp)?;
            eprintln!("infer: {} hole pixels filled with the {} model", m.count_nonzero(), cfg.variant.name());
            println!("{}", comp.display());
        }
        Command::Eval { ckpt, data, runs } => {
            let (state, meta) = load_checkpoint(&ckpt, None)?;
            let cfg = meta.config;
            let ds = Dataset::load(&data)?;
            let items = ds.samples.into_iter().map(|s| Prepared::new(s, &OracleProvider)).collect::<Result<Vec<_>, _>>()?;
            let refs: Vec<&Prepared> = items.iter().collect();
            let fx = RandomPyramid::<f64>::new(&cfg.features);
            let fx_ref: Option<&dyn FeatureExtractor<f64>> = if cfg.experiment.fid { Some(&fx) } else { None };
            let reports = evaluate_model(&state.generator, cfg.variant, &refs, &default_buckets(), fx_ref, cfg.batch_size)?;
            let dir = run_dir(&runs, cfg.seed)?;
            let path = dir.join("metrics.json");
            write_text(&path, &serde_json::to_string_pretty(&reports).expect("reports serialize"))?;
            eprintln!("eval: {} samples, metrics at {}", refs.len(), path.display());
            print!("{}", format_table(&reports));
        }
        Command::Ablate { protocol, cfg, runs } => {
            let protocol: Protocol = protocol.parse()?;
            let cfg = load_config(&cfg)?;
            let dir = run_dir(&runs, cfg.seed)?;
            write_text(&dir.join("config.toml"), &cfg.to_toml())?;
            let table = run_experiment(protocol, &cfg, load_samples(&cfg)?, &dir)?;
            write_text(&dir.join("table.json"), &serde_json::to_string_pretty(&table).expect("table serializes"))?;
            write_text(&dir.join("table.txt"), &table.format())?;
            eprintln!("ablate: {} rows for {}, written to {}", table.rows.len(), protocol.name(), dir.display());
            print!("{}", table.format());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
