//! `hdml` command-line harness.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use hdml::checkpoint::{embeddings_to_csv, manifest_json, Checkpoint};
use hdml::config::{config_to_string, load_config};
use hdml::data::{load_dataset, save_dataset, split_zero_shot, synth_gaussian_dataset};
use hdml::error::{Error, Result, EXIT_NUMERICAL, EXIT_USAGE};
use hdml::eval::evaluate;
use hdml::train::{curves_to_csv, run_training, TrainConfig};
use hdml::verify::{run_suite, DEFAULT_INSTANCES, DEFAULT_TOLERANCE, FRAGMENTS};

#[derive(Debug, Parser)]
#[command(name = "hdml", version, about = "Hardness-aware deep metric learning on dense feature vectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a Gaussian-blob dataset as `label,f_0,…` CSV.
    SynthData {
        #[arg(long, default_value_t = 20)]
        classes: usize,
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        /// Standard deviation of the per-sample noise.
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        /// Side of the hypercube the class centers are drawn from.
        #[arg(long, default_value_t = 10.0)]
        center_scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the training classes; writes checkpoint.json, curves.csv, manifest.json and config.txt.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// `key = value` file; omitted keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Embed the held-out classes; writes metrics.json and embeddings.csv.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Class split seed; defaults to the one used in training.
        #[arg(long)]
        split_seed: Option<u64>,
        /// Comma-separated Recall@K cut-offs.
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Finite-difference check of every trained gradient path.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_INSTANCES)]
        instances: usize,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
    },
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn synth_data(classes: usize, per_class: usize, dim: usize, sigma: f64, center_scale: f64, seed: u64, out: &Path) -> Result<()> {
    let ds = synth_gaussian_dataset(classes, per_class, dim, center_scale, sigma, seed)?;
    save_dataset(&ds, out)?;
    println!("wrote {} samples of dimension {} to {}", ds.len(), dim, out.display());
    Ok(())
}

fn train(data: &Path, config: Option<&Path>, out_dir: &Path) -> Result<()> {
    let config = match config {
        Some(path) => load_config(path)?,
        None => TrainConfig::default(),
    };
    let ds = load_dataset(data)?;
    std::fs::create_dir_all(out_dir).map_err(|source| Error::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let started = Instant::now();
    let outcome = run_training(&ds, &config)?;
    log::info!("trained in {:.1}s", started.elapsed().as_secs_f64());

    Checkpoint::new(&config, &outcome.models, &outcome.split.train_classes).save(&out_dir.join("checkpoint.json"))?;
    write(&out_dir.join("curves.csv"), curves_to_csv(&outcome.history))?;
    let manifest = manifest_json(&config, &outcome, ds.len(), ds.input_dim());
    write(&out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    write(&out_dir.join("config.txt"), config_to_string(&config))?;

    match &outcome.final_report {
        Some(r) => println!("{}", serde_json::to_string(&r.to_json())?),
        None => println!("no epochs run; wrote the initial model"),
    }
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path, split_seed: Option<u64>, ks: Option<Vec<usize>>, out_dir: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let ds = load_dataset(data)?;
    if ds.input_dim() != ckpt.input_dim {
        return Err(Error::Input(format!(
            "dataset has dimension {} but the checkpoint expects {}",
            ds.input_dim(),
            ckpt.input_dim
        )));
    }
    let split_seed = split_seed.unwrap_or(ckpt.config.split_seed);
    let ks = ks.unwrap_or_else(|| ckpt.config.ks.clone());
    let split = split_zero_shot(&ds, ckpt.config.train_fraction, split_seed)?;
    let leaked = split
        .test_classes
        .iter()
        .filter(|c| ckpt.train_classes.contains(c))
        .count();
    if leaked > 0 {
        log::warn!("{leaked} evaluation classes were seen in training; results are not zero-shot");
    }
    let test = ds.subset(&split.test_classes);
    let z = ckpt.models.embedder.embed(&test.samples)?;
    let report = evaluate(&z, &test.labels, &ks, ckpt.config.seed)?;

    std::fs::create_dir_all(out_dir).map_err(|source| Error::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let metrics = report.to_json();
    write(&out_dir.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
    write(
        &out_dir.join("embeddings.csv"),
        embeddings_to_csv(&test.sample_ids, &test.labels, &z)?,
    )?;
    println!("{}", serde_json::to_string(&metrics)?);
    Ok(())
}

/// Returns whether every instance passed.
fn gradcheck(seed: u64, instances: usize, tolerance: f64) -> Result<bool> {
    if instances == 0 {
        return Err(Error::Usage("--instances must be positive".into()));
    }
    let started = Instant::now();
    let suite = run_suite(seed, instances, tolerance)?;
    for name in FRAGMENTS {
        let cases: Vec<_> = suite.cases.iter().filter(|c| c.fragment == name).collect();
        let failed = cases.iter().filter(|c| !c.report.passed).count();
        let checked: usize = cases.iter().map(|c| c.report.checked()).sum();
        println!(
            "{:<18} {} instances, {} entries checked, max rel dev {:.3e}, {}",
            name,
            cases.len(),
            checked,
            suite.max_rel_dev(name),
            if failed == 0 { "PASS".to_string() } else { format!("FAIL ({failed} instances)") }
        );
        for c in cases.iter().filter(|c| !c.report.passed) {
            let worst = c.report.groups.iter().max_by(|a, b| a.max_rel_dev.total_cmp(&b.max_rel_dev));
            if let Some(g) = worst {
                println!("  seed {}: {} max rel dev {:.3e}", c.seed, g.name, g.max_rel_dev);
            }
        }
    }
    println!(
        "gradcheck {} at tolerance {:e} in {:.2}s",
        if suite.passed { "PASS" } else { "FAIL" },
        tolerance,
        started.elapsed().as_secs_f64()
    );
    Ok(suite.passed)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::SynthData {
            classes,
            per_class,
            dim,
            sigma,
            center_scale,
            seed,
            out,
        } => synth_data(classes, per_class, dim, sigma, center_scale, seed, &out)?,
        Command::Train { data, config, out_dir } => train(&data, config.as_deref(), &out_dir)?,
        Command::Eval {
            checkpoint,
            data,
            split_seed,
            ks,
            out_dir,
        } => eval(&checkpoint, &data, split_seed, ks, &out_dir)?,
        Command::Gradcheck { seed, instances, tolerance } => {
            if !gradcheck(seed, instances, tolerance)? {
                return Ok(ExitCode::from(EXIT_NUMERICAL as u8));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE as u8)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
