use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use mstformer::config::{apply_pairs, parse_override, parse_value, read_pairs, Configurable};
use mstformer::data::{
    extract_all, generate, load_dataset, read_manifest, save_dataset, split_sequences, write_manifest,
    Clip, Dataset, GenConfig, Split, Splits,
};
use mstformer::loss::{ClassCounts, LossKind};
use mstformer::metrics::MetricReport;
use mstformer::model::{Ablation, ModelConfig, ModelParams};
use mstformer::trainer::{
    check_loss_gradients, evaluate, random_batch, train_and_test, train_to_dir, TrainConfig,
};
use mstformer::{Error, Result};

const DATASET_FILE: &str = "dataset.mstd";
const MANIFEST_FILE: &str = "splits.txt";

#[derive(Parser)]
#[command(name = "mstformer", version, about = "Next-visit label forecasting for irregular image sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Settings {
    /// `key = value` configuration file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set d_model=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its split manifest.
    GenData {
        #[command(flatten)]
        settings: Settings,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoints and logs into `--out`.
    Train {
        #[command(flatten)]
        settings: Settings,
        /// Directory produced by `gen-data`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[command(flatten)]
        settings: Settings,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Append the report to this metric log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Check loss gradients against finite differences on a toy model.
    Gradcheck {
        #[command(flatten)]
        settings: Settings,
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Run the component ablation grid and the tau sweep.
    Ablate {
        #[command(flatten)]
        settings: Settings,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated training seeds.
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        #[arg(long)]
        skip_components: bool,
        #[arg(long)]
        skip_tau: bool,
    },
}

/// Split proportions used by `gen-data`.
struct SplitConfig {
    weights: [f64; 3],
    seed: Option<u64>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            weights: [300.0, 35.0, 70.0],
            seed: None,
        }
    }
}

impl Configurable for SplitConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "split_train" => self.weights[0] = parse_value(key, value)?,
            "split_val" => self.weights[1] = parse_value(key, value)?,
            "split_test" => self.weights[2] = parse_value(key, value)?,
            "split_seed" => self.seed = Some(parse_value(key, value)?),
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Default)]
struct Configs {
    model: ModelConfig,
    train: TrainConfig,
    gen: GenConfig,
    split: SplitConfig,
}

impl Settings {
    fn load(&self) -> Result<Configs> {
        self.load_onto(Configs::default())
    }

    /// File values first, then command-line overrides.
    fn load_onto(&self, mut c: Configs) -> Result<Configs> {
        let mut targets: [&mut dyn Configurable; 4] = [&mut c.model, &mut c.train, &mut c.gen, &mut c.split];
        if let Some(path) = &self.config {
            let pairs = read_pairs(path)?;
            apply_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())), &mut targets)?;
        }
        let overrides = self
            .overrides
            .iter()
            .map(|o| parse_override(o))
            .collect::<Result<Vec<_>>>()?;
        apply_pairs(overrides.iter().map(|(k, v)| (k.as_str(), v.as_str())), &mut targets)?;
        Ok(c)
    }
}

fn load_data(dir: &Path) -> Result<(Dataset, Splits)> {
    let ds = load_dataset(&dir.join(DATASET_FILE))?;
    let splits = read_manifest(&dir.join(MANIFEST_FILE))?;
    if let Some(&bad) = Split::ALL
        .iter()
        .flat_map(|&s| splits.get(s))
        .find(|&&i| i >= ds.sequences.len())
    {
        return Err(Error::Data(format!("manifest names sequence {bad}, dataset has {}", ds.sequences.len())));
    }
    Ok((ds, splits))
}

fn check_dims(ds: &Dataset, cfg: &ModelConfig) -> Result<()> {
    if (ds.height, ds.width, ds.channels) != (cfg.image_height, cfg.image_width, cfg.channels) {
        return Err(Error::Config(format!(
            "dataset images are {}x{}x{}, model expects {}x{}x{}",
            ds.height, ds.width, ds.channels, cfg.image_height, cfg.image_width, cfg.channels
        )));
    }
    Ok(())
}

fn clips_of(ds: &Dataset, splits: &Splits, split: Split, length: usize) -> Result<Vec<Clip>> {
    Ok(extract_all(ds, splits.get(split), length, 1)?.clips)
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{line}")?;
    Ok(())
}

fn gen_data(settings: &Settings, out: &Path) -> Result<()> {
    let c = settings.load()?;
    let ds = generate(&c.gen)?;
    let splits = split_sequences(&ds, c.split.weights, c.split.seed.unwrap_or(c.gen.seed))?;
    std::fs::create_dir_all(out)?;
    save_dataset(&out.join(DATASET_FILE), &ds)?;
    write_manifest(&out.join(MANIFEST_FILE), &splits)?;
    for s in Split::ALL {
        let clips = clips_of(&ds, &splits, s, c.gen.clip_length)?;
        let pos = clips.iter().filter(|k| k.final_target(&ds) == 1).count();
        println!(
            "{s}: {} sequences, {} clips, {pos} positive",
            splits.get(s).len(),
            clips.len()
        );
    }
    Ok(())
}

fn train(settings: &Settings, data: &Path, out: &Path) -> Result<()> {
    let c = settings.load()?;
    let (ds, splits) = load_data(data)?;
    check_dims(&ds, &c.model)?;
    let train = clips_of(&ds, &splits, Split::Train, c.gen.clip_length)?;
    let val = clips_of(&ds, &splits, Split::Val, c.gen.clip_length)?;
    let (outcome, files) = train_to_dir(&c.model, &c.train, &ds, &train, &val, out)?;
    println!(
        "{} steps, final loss {:.6}",
        outcome.losses.len(),
        outcome.losses.last().map_or(f64::NAN, |l| l.loss)
    );
    if let Some((epoch, auc, _)) = &outcome.best {
        println!("best validation auc {auc:.4} at epoch {epoch}");
    }
    println!("checkpoints: {} {}", files.best_checkpoint.display(), files.final_checkpoint.display());
    Ok(())
}

fn eval(settings: &Settings, data: &Path, checkpoint: &Path, split: &str, log: Option<&Path>) -> Result<()> {
    let c = settings.load()?;
    let (ds, splits) = load_data(data)?;
    check_dims(&ds, &c.model)?;
    let which: Split = split.parse().map_err(|_| Error::Config(format!("unknown split `{split}`")))?;
    let clips = clips_of(&ds, &splits, which, c.gen.clip_length)?;
    let report = evaluate(checkpoint, &c.model, &ds, &clips, split)?;
    let line = report.to_line();
    println!("{line}");
    if let Some(path) = log {
        append_line(path, &line)?;
    }
    Ok(())
}

/// The small configuration used for gradient checks unless overridden.
fn toy_model() -> Vec<(&'static str, &'static str)> {
    vec![
        ("image_size", "16"),
        ("patch_size", "8"),
        ("d_model", "8"),
        ("heads", "2"),
        ("scales", "2"),
    ]
}

fn gradcheck(settings: &Settings, eps: f64, tolerance: f64) -> Result<()> {
    let mut base = Configs::default();
    apply_pairs(toy_model(), &mut [&mut base.model])?;
    let c = settings.load_onto(base)?;
    let params = ModelParams::init(&c.model, c.train.seed)?;
    let batch = random_batch(&c.model, 1, 2, c.train.seed)?;
    let counts = match c.train.loss {
        LossKind::Balanced => Some(ClassCounts::new(vec![19, 1], c.train.tau)?),
        LossKind::Ce => None,
    };
    let report = check_loss_gradients(&c.model, &params, &batch, counts.as_ref(), eps)?;
    println!(
        "{} gradients checked, max relative error {:.3e}, max absolute error {:.3e}",
        report.checked, report.max_rel_error, report.max_abs_error
    );
    if report.max_rel_error >= tolerance {
        return Err(Error::Numeric {
            step: 0,
            msg: format!("relative error {:.3e} exceeds {tolerance:.1e}", report.max_rel_error),
        });
    }
    Ok(())
}

#[derive(Serialize)]
struct AblationRecord<'a> {
    group: &'a str,
    variant: String,
    seed: u64,
    report: &'a MetricReport,
}

fn ablate(
    settings: &Settings,
    data: &Path,
    out: &Path,
    seeds: &str,
    skip_components: bool,
    skip_tau: bool,
) -> Result<()> {
    let c = settings.load()?;
    let seeds: Vec<u64> = seeds
        .split(',')
        .map(|s| parse_value("seeds", s))
        .collect::<Result<_>>()?;
    let (ds, splits) = load_data(data)?;
    check_dims(&ds, &c.model)?;
    let train = clips_of(&ds, &splits, Split::Train, c.gen.clip_length)?;
    let val = clips_of(&ds, &splits, Split::Val, c.gen.clip_length)?;
    let test = clips_of(&ds, &splits, Split::Test, c.gen.clip_length)?;
    std::fs::create_dir_all(out)?;
    let log_path = out.join("ablation.jsonl");
    File::create(&log_path)?;

    let mut runs: Vec<(&str, String, ModelConfig, TrainConfig)> = Vec::new();
    if !skip_components {
        for a in Ablation::ALL {
            runs.push(("components", a.name().to_string(), c.model.with_ablation(a), c.train.clone()));
        }
    }
    if !skip_tau {
        let ce = TrainConfig {
            loss: LossKind::Ce,
            ..c.train.clone()
        };
        runs.push(("tau", "ce".into(), c.model.clone(), ce));
        for i in 0..7 {
            let tau = 1.0 + 0.25 * i as f64;
            let t = TrainConfig {
                loss: LossKind::Balanced,
                tau,
                ..c.train.clone()
            };
            runs.push(("tau", format!("tau={tau:.2}"), c.model.clone(), t));
        }
    }

    println!("{:<12} {:<10} {:>8} {:>8} {:>8} {:>8}", "group", "variant", "auc", "acc", "sen", "spe");
    for (group, variant, model, base) in &runs {
        let mut sums = [0.0; 4];
        for &seed in &seeds {
            let tcfg = TrainConfig { seed, ..base.clone() };
            let mut report = train_and_test(model, &tcfg, &ds, &train, &val, &test)?;
            report.split = "test".into();
            let record = AblationRecord {
                group,
                variant: variant.clone(),
                seed,
                report: &report,
            };
            append_line(&log_path, &serde_json::to_string(&record).expect("record serializes"))?;
            for (s, v) in sums.iter_mut().zip([report.auc, report.acc, report.sen, report.spe]) {
                *s += v;
            }
        }
        let n = seeds.len() as f64;
        println!(
            "{group:<12} {variant:<10} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            sums[0] / n,
            sums[1] / n,
            sums[2] / n,
            sums[3] / n
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { settings, out } => gen_data(&settings, &out),
        Command::Train { settings, data, out } => train(&settings, &data, &out),
        Command::Eval {
            settings,
            data,
            checkpoint,
            split,
            log,
        } => eval(&settings, &data, &checkpoint, &split, log.as_deref()),
        Command::Gradcheck {
            settings,
            eps,
            tolerance,
        } => gradcheck(&settings, eps, tolerance),
        Command::Ablate {
            settings,
            data,
            out,
            seeds,
            skip_components,
            skip_tau,
        } => ablate(&settings, &data, &out, &seeds, skip_components, skip_tau),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
