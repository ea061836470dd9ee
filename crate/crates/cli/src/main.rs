use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use dbvae::checkpoint::Checkpoint;
use dbvae::data::{build_dataset, export_dataset, load_image_dir, Dataset, GroupTag};
use dbvae::eval::{compare, evaluate, GroupAccuracyTable};
use dbvae::models::{ModelBundle, ModelKind};
use dbvae::resample::{compute_weights, estimate_histograms, inspect};
use dbvae::train::{history_csv, train_observed, train_standard_observed, TrainEvent, TrainOutcome};
use serde::Serialize;

mod config;

use config::{RunConfig, Split};

#[derive(Parser)]
#[command(name = "dbvae", version, about = "Debiasing VAE face detection on synthetic or image-folder data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset as PNGs plus manifest.csv.
    GenData {
        #[arg(long, value_enum, default_value_t = SplitArg::Train)]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model; writes model.ckpt, history.csv and config.toml.
    Train {
        #[arg(long, value_enum)]
        mode: Mode,
        /// Dataset directory (faces/<group>/*.png, nonfaces/*.png).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Per-group accuracy of one model; writes group_accuracy.csv.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Standard vs DB-VAE side by side; writes comparison.csv and comparison_plot.csv.
    Compare {
        #[arg(long)]
        standard: PathBuf,
        #[arg(long)]
        dbvae: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Latent histograms and extreme resampling weights over a dataset's faces;
    /// writes histograms.csv and extreme_weights.csv.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        bins: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Standard,
    Dbvae,
}

/// Marks failures caused by the invocation rather than the run.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(e: anyhow::Error) -> anyhow::Error {
    UsageError(format!("{e:#}").trim_end().to_string()).into()
}

fn is_usage(e: &anyhow::Error) -> bool {
    e.downcast_ref::<UsageError>().is_some()
        || e.chain()
            .any(|c| matches!(c.downcast_ref::<dbvae::Error>(), Some(dbvae::Error::InvalidArgument(_))))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_usage(&e) { 1 } else { 2 })
        }
    }
}

fn load_config(common: &Common) -> anyhow::Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path).map_err(usage)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    config.validate().map_err(usage)?;
    Ok(config)
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::GenData { split, out, common } => gen_data(&load_config(&common)?, split, &out),
        Command::Train { mode, data, out, common } => train(&load_config(&common)?, mode, &data, &out),
        Command::Eval {
            checkpoint,
            data,
            out,
            threshold,
            common,
        } => {
            let config = load_config(&common)?;
            let threshold = threshold_or(&config, threshold)?;
            let Loaded { model, seed } = load_model(&checkpoint, &common, &config)?;
            let test = load_data(&data, model.config().channels)?;
            let table = evaluate(&model, &test, threshold)?;
            create_dir(&out)?;
            let header = config.header(&format!("model={} model_seed={seed} threshold={threshold}", model.kind));
            write(&out.join("group_accuracy.csv"), &table.to_csv(Some(&header))?)?;
            print_table(&table);
            Ok(())
        }
        Command::Compare {
            standard,
            dbvae,
            data,
            out,
            threshold,
            common,
        } => {
            let config = load_config(&common)?;
            let threshold = threshold_or(&config, threshold)?;
            let (a, b) = (load_model(&standard, &common, &config)?, load_model(&dbvae, &common, &config)?);
            let seeds = format!("standard_seed={} dbvae_seed={}", a.seed, b.seed);
            let (a, b) = (a.model, b.model);
            if a.config().channels != b.config().channels {
                return Err(usage(anyhow::anyhow!(
                    "checkpoints disagree on image channels ({} vs {})",
                    a.config().channels,
                    b.config().channels
                )));
            }
            let test = load_data(&data, a.config().channels)?;
            let (ta, tb) = (evaluate(&a, &test, threshold)?, evaluate(&b, &test, threshold)?);
            let report = compare(&ta, &tb)?;
            create_dir(&out)?;
            let header = config.header(&format!("{seeds} threshold={threshold}"));
            write(&out.join("comparison.csv"), &report.to_csv(Some(&header))?)?;
            write(&out.join("comparison_plot.csv"), &report.plot_csv(Some(&header))?)?;
            println!("{:<10} {:>9} {:>9} {:>9}", "row", "standard", "dbvae", "delta");
            for r in &report.rows {
                println!("{:<10} {:>9.4} {:>9.4} {:>+9.4}", r.row, r.standard, r.dbvae, r.delta);
            }
            Ok(())
        }
        Command::Inspect {
            checkpoint,
            data,
            out,
            bins,
            alpha,
            common,
        } => {
            let config = load_config(&common)?;
            let bins = bins.unwrap_or(config.train.debias.bins);
            let alpha = alpha.unwrap_or(config.train.debias.alpha);
            if bins < 2 || !(alpha > 0.0) {
                return Err(usage(anyhow::anyhow!("need bins >= 2 and alpha > 0")));
            }
            let Loaded { model, seed } = load_model(&checkpoint, &common, &config)?;
            let ds = load_data(&data, model.config().channels)?;
            let faces = ds.face_indices();
            let (hist, mus) = estimate_histograms(&model.encoder, &ds.stack(&faces), bins)?;
            let weights = compute_weights(&hist, &mus, alpha)?;
            let groups: Vec<Option<GroupTag>> = faces.iter().map(|&i| ds.examples[i].group).collect();
            let report = inspect(&hist, &weights, &groups)?;
            create_dir(&out)?;
            let header = config.header(&format!("model={} model_seed={seed} bins={bins} alpha={alpha}", model.kind));
            write(&out.join("histograms.csv"), &report.histograms_csv(Some(&header))?)?;
            write(&out.join("extreme_weights.csv"), &report.extremes_csv(Some(&header))?)?;
            println!("{} latent histograms over {} faces", hist.latent_dim(), faces.len());
            for r in report.top().take(3) {
                let g = r.group.map_or("-".to_string(), |g| g.to_string());
                println!("top {}: face {} ({g}) weight {:.4e}", r.rank, r.index, r.weight);
            }
            Ok(())
        }
    }
}

fn threshold_or(config: &RunConfig, flag: Option<f64>) -> anyhow::Result<f64> {
    let t = flag.unwrap_or(config.eval.threshold);
    if !(t > 0.0 && t < 1.0) {
        return Err(usage(anyhow::anyhow!("threshold must be in (0, 1), got {t}")));
    }
    Ok(t)
}

fn gen_data(config: &RunConfig, split: SplitArg, out: &Path) -> anyhow::Result<()> {
    let (split, name) = match split {
        SplitArg::Train => (Split::Train, "train"),
        SplitArg::Test => (Split::Test, "test"),
    };
    let spec = config.split(split);
    let ds = build_dataset(&spec)?;
    export_dataset(&ds, out, Some(&config.header(&format!("split={name}"))))?;
    println!("{}", ds.summary());
    Ok(())
}

#[derive(Serialize)]
struct GroupWeightRow {
    epoch: usize,
    group: String,
    faces: usize,
    mean_weight: f64,
    /// `(sum w)^2 / sum w^2` within the group: how many distinct faces the
    /// group's draws effectively come from.
    effective_faces: f64,
}

fn group_weights(ds: &Dataset, outcome: &TrainOutcome) -> Vec<GroupWeightRow> {
    let mut rows = Vec::new();
    for w in &outcome.sample_weights {
        // group -> (faces, sum w, sum w^2)
        let mut sums: BTreeMap<String, (usize, f64, f64)> = BTreeMap::new();
        for (&face, &weight) in outcome.weighted_faces.iter().zip(&w.weights) {
            let name = ds.examples[face].group.map_or("ungrouped".to_string(), |g| g.to_string());
            let s = sums.entry(name).or_default();
            s.0 += 1;
            s.1 += weight;
            s.2 += weight * weight;
        }
        rows.extend(sums.into_iter().map(|(group, (faces, total, squares))| GroupWeightRow {
            epoch: w.epoch.unwrap_or(0),
            group,
            faces,
            mean_weight: total / faces as f64,
            effective_faces: if squares > 0.0 { total * total / squares } else { 0.0 },
        }));
    }
    rows
}

fn train(config: &RunConfig, mode: Mode, data: &Path, out: &Path) -> anyhow::Result<()> {
    let ds = load_data(data, config.train_data.channels)?;
    let (tc, kind) = match mode {
        Mode::Standard => (config.training().standard(), ModelKind::Standard),
        Mode::Dbvae => (config.training(), ModelKind::Dbvae),
    };
    tc.validate().map_err(|e| usage(e.into()))?;
    create_dir(out)?;
    let header = config.header(&format!("mode={kind}"));
    let meta = |epoch: usize| {
        vec![("seed", config.seed.to_string()), ("epoch", epoch.to_string())]
    };

    let every = config.checkpoint_every;
    let mut save_error = None;
    let mut observer = |event: TrainEvent<'_>| {
        if let TrainEvent::Epoch { record, encoder, decoder, weights } = event {
            if every > 0 && record.epoch % every == 0 && save_error.is_none() {
                let bundle = ModelBundle {
                    kind,
                    encoder: encoder.clone(),
                    decoder: decoder.cloned(),
                };
                let dir = out.join("checkpoints");
                let path = dir.join(format!("epoch-{:03}.ckpt", record.epoch));
                let saved = fs::create_dir_all(&dir)
                    .map_err(anyhow::Error::from)
                    .and_then(|_| Ok(bundle.to_checkpoint(&meta(record.epoch)).save(&path)?));
                if let Err(e) = saved {
                    save_error = Some(e.context(format!("saving {}", path.display())));
                }
            }
            let drawn = weights.map_or(String::new(), |w| {
                format!("  effective faces {:.1}", 1.0 / w.weights.iter().map(|v| v * v).sum::<f64>())
            });
            eprintln!(
                "epoch {:>3}  total {:.5}  class {:.5}  kl {:.5}  recon {:.5}  acc {:.4}{drawn}",
                record.epoch, record.total, record.classification, record.kl, record.reconstruction, record.train_accuracy
            );
        }
    };
    let outcome = match mode {
        Mode::Standard => train_standard_observed(&tc, &ds, &mut observer)?,
        Mode::Dbvae => train_observed(&tc, &ds, &mut observer)?,
    };
    if let Some(e) = save_error {
        return Err(e);
    }

    let last = outcome.history.last().expect("at least one epoch");
    outcome
        .bundle
        .to_checkpoint(&meta(last.epoch))
        .save(&out.join("model.ckpt"))?;
    write(&out.join("history.csv"), &history_csv(&outcome.history, Some(&header))?)?;
    let mut effective = config.clone();
    if mode == Mode::Standard {
        effective.train = config.train.standard();
    }
    write(&out.join("config.toml"), &format!("# {header}\n{}", effective.to_toml()))?;
    if !outcome.sample_weights.is_empty() {
        let rows = group_weights(&ds, &outcome);
        write(&out.join("group_weights.csv"), &dbvae::report::to_csv_with_header(&rows, Some(&header))?)?;
    }
    println!(
        "final epoch {}: total {:.6} classification {:.6} kl {:.6} reconstruction {:.6} accuracy {:.4}",
        last.epoch, last.total, last.classification, last.kl, last.reconstruction, last.train_accuracy
    );
    Ok(())
}

struct Loaded {
    model: ModelBundle,
    seed: String,
}

fn load_model(path: &Path, common: &Common, config: &RunConfig) -> anyhow::Result<Loaded> {
    let ck = Checkpoint::load(path)?;
    let seed = ck.metadata.get("seed").cloned().unwrap_or_else(|| "unknown".into());
    let model = ModelBundle::from_checkpoint(&ck).with_context(|| format!("checkpoint {}", path.display()))?;
    // An explicit config describes the model it expects.
    if common.config.is_some() {
        let (m, t) = (model.config(), &config.train);
        if m.arch != t.arch || m.latent_dim != t.latent_dim {
            return Err(usage(anyhow::anyhow!(
                "checkpoint {} holds an {} model with k={}, config expects {} with k={}",
                path.display(),
                m.arch,
                m.latent_dim,
                t.arch,
                t.latent_dim
            )));
        }
    }
    Ok(Loaded { model, seed })
}

fn load_data(dir: &Path, channels: usize) -> anyhow::Result<Dataset> {
    load_image_dir(dir, channels).with_context(|| format!("loading dataset {}", dir.display()))
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn print_table(t: &GroupAccuracyTable) {
    println!("{:<10} {:>5} {:>8} {:>9} {:>9}", "group", "n", "correct", "accuracy", "mean_p");
    for r in t.rows() {
        println!("{:<10} {:>5} {:>8} {:>9.4} {:>9.4}", r.group, r.n, r.correct, r.accuracy, r.mean_prob);
    }
}
