use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use darc_core::checkpoint;
use darc_core::config::RunConfig;
use darc_core::data::{load_dataset, load_domains, synth_generate, write_synth, Sample};
use darc_core::infer::{evaluate, extract_instances, two_pass_infer};
use darc_core::io::{read_image, write_image, write_labels, write_probability};
use darc_core::metrics::{domain_mean, format_report, write_scores_csv, ReportRow};
use darc_core::network::Model;
use darc_core::recolor::recolor;
use darc_core::stress::{run_stress, write_stress};
use darc_core::train::{run_training, Trainer, TrainOutputs};
use darc_core::ImagePlane;

#[derive(Parser)]
#[command(name = "darc", version, about = "Nucleus instance segmentation with re-coloring and distribution-aware normalization")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set model.width=16`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for every stage; overrides the file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-domain dataset.
    Synth,
    /// Train a model on one domain directory.
    Train {
        /// Domain directory with images/ and labels/, or a root when --domain is given.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        domain: Option<String>,
    },
    /// Score a checkpoint on held-out domains.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset roots (`<root>/<domain>/...`) or single domain directories.
        #[arg(long, num_args = 1.., required = true)]
        data: Vec<PathBuf>,
        /// Domain the model was trained on; excluded from the average.
        #[arg(long)]
        train_domain: String,
    },
    /// Predict maps and instances for an image or a directory of images.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Re-color an image or a directory of images.
    Recolor {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Re-score after expanding the background of every image.
    Stress {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated expansion factors; defaults to the config.
        #[arg(long = "B", value_delimiter = ',')]
        factors: Vec<f64>,
    },
}

/// Errors reported with exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = if cli.global.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if e.is::<UsageError>() { 2 } else { 1 })
        }
    }
}

fn load_config(g: &Global) -> Result<RunConfig> {
    if let Some(p) = &g.config {
        if !p.is_file() {
            return Err(UsageError(format!("config file {} not found", p.display())).into());
        }
    }
    let mut overrides = g.overrides.clone();
    if let Some(seed) = g.seed {
        overrides.push(format!("seed={seed}"));
    }
    RunConfig::load(g.config.as_deref(), &overrides).map_err(|e| UsageError(e.to_string()).into())
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Synth => "synth",
        Command::Train { .. } => "train",
        Command::Eval { .. } => "eval",
        Command::Infer { .. } => "infer",
        Command::Recolor { .. } => "recolor",
        Command::Stress { .. } => "stress",
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    let out = &cli.global.out;
    cfg.echo(out, command_name(&cli.command))?;
    match cli.command {
        Command::Synth => {
            let set = synth_generate(&cfg.synth)?;
            write_synth(out, &set)?;
            println!(
                "wrote {} training and {} validation images to {}",
                set.train.len(),
                set.val.len(),
                out.display()
            );
        }
        Command::Train { data, domain } => {
            let (dir, name) = match domain {
                Some(d) => (data.join(&d), d),
                None => (data.clone(), dir_name(&data)),
            };
            let samples = load_dataset(&dir, &name)?;
            if samples.is_empty() {
                bail!("no training images under {}", dir.join("images").display());
            }
            let model = Model::<f32>::new(cfg.model.clone())?;
            log::info!("{} with {} parameters", model.variant(), model.param_count());
            let mut trainer = Trainer::new(model, cfg.train.clone())?;
            let outputs = TrainOutputs {
                checkpoint: Some(out.join("model.ckpt")),
                loss_log: Some(out.join("loss.csv")),
            };
            run_training(&mut trainer, &samples, &outputs)?;
            println!("trained {} iterations; checkpoint {}", trainer.iteration(), out.join("model.ckpt").display());
        }
        Command::Eval {
            checkpoint,
            data,
            train_domain,
        } => {
            let model = load_model(&checkpoint)?;
            let mut domains = std::collections::BTreeMap::<String, Vec<Sample>>::new();
            for d in &data {
                for (name, samples) in load_any(d)? {
                    domains.entry(name).or_default().extend(samples);
                }
            }
            let mut records = Vec::new();
            for samples in domains.values() {
                records.extend(evaluate(&model, samples, &cfg.infer)?);
            }
            write_scores_csv(&out.join("scores.csv"), &records)?;
            let held_out: Vec<String> = domains.keys().filter(|d| **d != train_domain).cloned().collect();
            if held_out.is_empty() {
                bail!("no held-out domains besides {train_domain}");
            }
            let row = ReportRow::from_records(&model.variant().to_string(), &records, &held_out)?;
            let table = format_report(&train_domain, &held_out, &[row]);
            std::fs::write(out.join("summary.md"), &table).context("writing summary")?;
            print!("{table}");
            if domains.contains_key(&train_domain) {
                let (a, d) = domain_mean(&records, &train_domain)?;
                println!("{train_domain} (seen): AJI {:.2} Dice {:.2}", a * 100.0, d * 100.0);
            }
        }
        Command::Infer { checkpoint, input } => {
            let model = load_model(&checkpoint)?;
            let c = &model.config;
            for (id, img) in load_images(&input)? {
                let maps = two_pass_infer(&model, &img.to_rgb(), &cfg.infer)?;
                let inst = extract_instances(&maps, c.tau_seg, c.tau_cnt, c.min_area);
                write_probability(&out.join(format!("{id}_seg.png")), maps.height, maps.width, &maps.seg)?;
                write_probability(&out.join(format!("{id}_contour.png")), maps.height, maps.width, &maps.contour)?;
                write_labels(&out.join(format!("{id}_instances.png")), &inst)?;
                match maps.rho {
                    Some(r) => println!("{id}: {} instances, predicted ratio {r:.4}", inst.instance_count()),
                    None => println!("{id}: {} instances", inst.instance_count()),
                }
            }
        }
        Command::Recolor { checkpoint, input } => {
            let model = load_model(&checkpoint)?;
            if model.recolor_net().is_none() {
                log::warn!("{} has no color module; images are copied unchanged", model.variant());
            }
            for (id, img) in load_images(&input)? {
                write_image(&out.join(format!("{id}_recolored.png")), &recolor(&model, &img.to_rgb())?)?;
            }
        }
        Command::Stress {
            checkpoint,
            data,
            factors,
        } => {
            let model = load_model(&checkpoint)?;
            let samples = load_dataset(&data, &dir_name(&data))?;
            let factors = if factors.is_empty() { cfg.stress.factors.clone() } else { factors };
            if factors.iter().any(|&b| !(b >= 1.0)) {
                return Err(UsageError("expansion factors must be >= 1".into()).into());
            }
            let rows = run_stress(&model, &samples, &factors, cfg.model.seed, &cfg.infer)?;
            write_stress(out, &rows)?;
            println!("| B | AJI | Dice |\n|---|---|---|");
            for r in &rows {
                println!("| {} | {:.2} | {:.2} |", r.b, r.aji * 100.0, r.dice * 100.0);
            }
        }
    }
    Ok(())
}

fn dir_name(p: &Path) -> String {
    p.file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("data")
        .to_string()
}

fn load_model(path: &Path) -> Result<Model<f32>> {
    Ok(checkpoint::load::<f32>(path)?.model)
}

/// A single domain directory or a root of domains.
fn load_any(dir: &Path) -> Result<Vec<(String, Vec<Sample>)>> {
    if !dir.is_dir() {
        bail!("{} is not a directory", dir.display());
    }
    if dir.join("images").is_dir() {
        let name = dir_name(dir);
        return Ok(vec![(name.clone(), load_dataset(dir, &name)?)]);
    }
    Ok(load_domains(dir)?.into_iter().collect())
}

fn load_images(input: &Path) -> Result<Vec<(String, ImagePlane)>> {
    let stem = |p: &Path| p.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
    if input.is_file() {
        return Ok(vec![(stem(input), read_image(input)?)]);
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(input)
        .with_context(|| format!("reading {}", input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    paths.iter().map(|p| Ok((stem(p), read_image(p)?))).collect()
}
