use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use vtff::encoder::attention_rollout;
use vtff::io::{export_heatmap, load_manifest, load_weights, read_pnm, save_weights, worker_threads, RunConfig};
use vtff::train::{evaluate, mcnemar_test, predict_dataset, preprocess, run_ablation, train, Dataset};
use vtff::{Variant, Vtff};

const CONFIG_FILE: &str = "config.json";

#[derive(Parser)]
#[command(name = "vtff", version, about = "Train and inspect LBP/RGB fusion Transformer expression classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write weights, a per-step log and the resolved config.
    Train {
        /// JSON run config; missing keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset root (class subdirectories or manifest.tsv).
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate trained weights and print an accuracy report as JSON.
    Eval {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to config.json next to the weights.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write predicted class indices as a JSON array.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Write true class indices as a JSON array.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Train and evaluate model variants over several seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Comma-separated variant names; all seven by default.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write attention-rollout heatmaps (binary PGM) for the given images.
    Attn {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Nearest-neighbor upscale factor; defaults to the backbone downsampling.
        #[arg(long)]
        upscale: Option<usize>,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Compare two prediction files with McNemar's test.
    Mcnemar {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        labels: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, data, out } => cmd_train(config.as_deref(), &data, &out),
        Command::Eval {
            weights,
            data,
            config,
            out,
            predictions,
            labels,
        } => cmd_eval(&weights, &data, config.as_deref(), out.as_deref(), predictions.as_deref(), labels.as_deref()),
        Command::Ablate {
            config,
            train,
            test,
            variants,
            seeds,
            out,
        } => cmd_ablate(config.as_deref(), &train, &test, &variants, &seeds, out.as_deref()),
        Command::Attn {
            weights,
            config,
            out,
            upscale,
            images,
        } => cmd_attn(&weights, config.as_deref(), &out, upscale, &images),
        Command::Mcnemar { a, b, labels } => cmd_mcnemar(&a, &b, &labels),
    }
}

fn read_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn config_for_weights(weights: &Path, explicit: Option<&Path>) -> Result<RunConfig> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => weights.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE),
    };
    read_config(Some(&path)).with_context(|| format!("reading model config {}", path.display()))
}

fn load_data(root: &Path, cfg: &RunConfig) -> Result<Dataset<f32>> {
    let mut manifest = load_manifest(root)?;
    if let Some(names) = &cfg.class_names {
        manifest = manifest.with_class_names(names)?;
    }
    Ok(manifest.load(cfg.image_size, worker_threads())?)
}

fn load_model(weights: &Path, cfg: &RunConfig) -> Result<Vtff<f32>> {
    let mut model = Vtff::new(&cfg.model(), cfg.seed)?;
    load_weights(&mut model, weights)?;
    Ok(model)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_indices(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{}: expected a JSON array of class indices", path.display()))
}

fn cmd_train(config: Option<&Path>, data: &Path, out: &Path) -> Result<()> {
    let mut cfg = read_config(config)?;
    let dataset = load_data(data, &cfg)?;
    cfg.class_names = Some(dataset.class_names.clone());
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut model = Vtff::new(&cfg.model(), cfg.seed)?;
    let log_path = out.join("log.txt");
    let mut log = BufWriter::new(fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let mut write_err = None;
    let total = cfg.total_steps;
    train(&mut model, &dataset, &cfg.train(), |s| {
        if let Err(e) = writeln!(log, "{} {:e} {}", s.step, s.lr, s.loss) {
            write_err.get_or_insert(e);
        }
        if s.step % 100 == 0 || s.step == total {
            eprintln!("step {}/{total} lr {:.3e} loss {:.4}", s.step, s.lr, s.loss);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e).with_context(|| format!("writing {}", log_path.display()));
    }
    log.flush()?;
    save_weights(&model, &out.join("weights.vtff"))?;
    cfg.save(&out.join(CONFIG_FILE))?;
    Ok(())
}

fn cmd_eval(
    weights: &Path,
    data: &Path,
    config: Option<&Path>,
    out: Option<&Path>,
    predictions: Option<&Path>,
    labels: Option<&Path>,
) -> Result<()> {
    let cfg = config_for_weights(weights, config)?;
    let model = load_model(weights, &cfg)?;
    let dataset = load_data(data, &cfg)?;
    let report = evaluate(&model, &dataset, cfg.batch_size)?;
    if let Some(p) = predictions {
        write_json(p, &predict_dataset(&model, &dataset, cfg.batch_size)?)?;
    }
    if let Some(p) = labels {
        write_json(p, &dataset.labels())?;
    }
    match out {
        Some(p) => write_json(p, &report),
        None => {
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
    }
}

fn cmd_ablate(
    config: Option<&Path>,
    train_root: &Path,
    test_root: &Path,
    variants: &[String],
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<()> {
    let cfg = read_config(config)?;
    let variants: Vec<Variant> = if variants.is_empty() {
        Variant::ALL.to_vec()
    } else {
        variants.iter().map(|v| v.parse()).collect::<vtff::Result<_>>()?
    };
    let train_data = load_data(train_root, &cfg)?;
    let cfg = RunConfig {
        class_names: Some(train_data.class_names.clone()),
        ..cfg
    };
    let test_data = load_data(test_root, &cfg)?;
    let mut table = format!("{:<15} {:>17} {:>12}\n", "variant", "accuracy", "mean class");
    for v in variants {
        eprintln!("training {v} on {} seeds", seeds.len());
        let r = run_ablation(v, &cfg.model(), &cfg.train(), &train_data, &test_data, seeds)?;
        let row = format!(
            "{:<15} {:>8.2} ± {:<6.2} {:>12.2}\n",
            v.name(),
            100.0 * r.mean_accuracy,
            100.0 * r.std_accuracy,
            100.0 * r.mean_class_accuracy
        );
        print!("{row}");
        table += &row;
    }
    if let Some(p) = out {
        fs::write(p, table).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn cmd_attn(weights: &Path, config: Option<&Path>, out: &Path, upscale: Option<usize>, images: &[PathBuf]) -> Result<()> {
    let cfg = config_for_weights(weights, config)?;
    if !cfg.use_encoder {
        bail!("attention maps need a model with the Transformer encoder (use_encoder = true)");
    }
    let model = load_model(weights, &cfg)?;
    let model_cfg = model.config().clone();
    let grid = model_cfg.grid();
    let upscale = upscale.unwrap_or(model_cfg.backbone.downsampling());
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for path in images {
        let img = read_pnm(path)?;
        let (rgb, lbp) = preprocess::<f32>(&img, cfg.image_size)?;
        let shape = [1, cfg.image_size, cfg.image_size, 3];
        let maps = model.attention(&rgb.reshape(shape)?, &lbp.reshape(shape)?)?;
        let rollout = attention_rollout(&maps.sample(0)?, (grid, grid))?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let dest = out.join(format!("{stem}.attn.pgm"));
        export_heatmap(&rollout, &dest, upscale)?;
        println!("{}", dest.display());
    }
    Ok(())
}

fn cmd_mcnemar(a: &Path, b: &Path, labels: &Path) -> Result<()> {
    let result = mcnemar_test(&read_indices(a)?, &read_indices(b)?, &read_indices(labels)?)?;
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(())
}
