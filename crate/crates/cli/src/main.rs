use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use memefuse::bundle::{write_atomic, ModelBundle};
use memefuse::metrics::evaluate;
use memefuse::synthetic::{SyntheticSet, SyntheticSpec};
use memefuse::trainer::gradcheck::{gradient_suite, TOLERANCE};
use memefuse::trainer::{grid_search, split_train_dev, train_ensemble, GridSpec};
use memefuse::{Config, Error, ErrorKind, Result, Sample};
use serde_json::json;

mod pipeline;

use pipeline::{load_config, load_records, require_labels, StorePaths, Stores};

#[derive(Parser)]
#[command(name = "memefuse", version, about = "Meme sentiment classifier: train, predict, evaluate")]
struct Cli {
    /// Overrides train.seed (and MEMEFUSE_SEED).
    #[arg(long, global = true, env = "MEMEFUSE_SEED")]
    seed: Option<u64>,

    /// Suppress progress lines on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct StoreArgs {
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    sentence_vectors: Option<PathBuf>,
    #[arg(long)]
    image_features: Option<PathBuf>,
}

impl From<StoreArgs> for StorePaths {
    fn from(a: StoreArgs) -> Self {
        StorePaths {
            embeddings: a.embeddings,
            sentence_vectors: a.sentence_vectors,
            image_features: a.image_features,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train an ensemble and write a model bundle plus `<out>.history.csv`.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        stores: StoreArgs,
    },
    /// Write one JSON line of class probabilities per record.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        stores: StoreArgs,
    },
    /// Score a labelled file: JSON report on stdout, table on stderr.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        stores: StoreArgs,
    },
    /// Train every grid combination and print a CSV of dev macro-F1.
    Gridsearch {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        stores: StoreArgs,
    },
    /// Compare analytic and numeric gradients for every layer type.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: usize,
    },
    /// Write a small synthetic dataset directory with a matching config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        records: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
    },
}

struct Ctx {
    seed: Option<u64>,
    quiet: bool,
}

impl Ctx {
    fn progress(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn config(&self, path: Option<&Path>, stores: StoreArgs) -> Result<Config> {
        let mut cfg = load_config(path)?;
        StorePaths::from(stores).apply(&mut cfg)?;
        if let Some(seed) = self.seed {
            cfg.train_seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn labelled_samples(ctx: &Ctx, cfg: &Config, stores: &Stores, data: &Path) -> Result<Vec<Sample>> {
    let dataset = load_records(data, cfg.model_classes)?;
    let samples = stores.samples(cfg, &dataset)?;
    require_labels(&samples)?;
    ctx.progress(format!("loaded {} records from {}", samples.len(), data.display()));
    Ok(samples)
}

fn train(ctx: &Ctx, data: &Path, config: Option<&Path>, out: &Path, stores: StoreArgs) -> Result<()> {
    let cfg = ctx.config(config, stores)?;
    let loaded = Stores::load(&cfg)?;
    let (e, s, i) = loaded.input_dims();
    let cfg = cfg.with_input_dims(e, s, i);
    let dims = cfg.model_dims()?;
    let samples = labelled_samples(ctx, &cfg, &loaded, data)?;
    let tc = cfg.train_config();
    let (train_set, dev_set) = split_train_dev(&samples, tc.dev_fraction, tc.seed)?;
    ctx.progress(format!(
        "training {} members on {} records, {} held out, seed {}",
        cfg.ensemble_members.len(),
        train_set.len(),
        dev_set.len(),
        tc.seed
    ));
    let run = train_ensemble(&cfg.ensemble_members, &dims, &train_set, &dev_set, &tc, cfg.ensemble_weights.clone())?;
    for (spec, history) in &run.member_histories {
        if let Some(last) = history.last() {
            ctx.progress(format!(
                "member {}: loss {:.4}, dev macro-F1 {:.4}",
                spec.label(),
                last.train_loss,
                last.dev_macro_f1
            ));
        }
    }
    let (best_f1, best_epoch) = run.best_epoch();
    let final_f1 = run.ensemble_dev_f1.last().copied().unwrap_or(0.0);
    ctx.progress(format!("ensemble dev macro-F1 {final_f1:.4} (best {best_f1:.4} at epoch {best_epoch})"));

    let bundle = ModelBundle {
        config: cfg,
        lexicon_digest: loaded.lexicon.digest(),
        embedding_dim: e,
        ensemble: run.ensemble.clone(),
    };
    bundle.save(out)?;
    let history = PathBuf::from(format!("{}.history.csv", out.display()));
    write_atomic(&history, run.history_csv().as_bytes())?;
    println!(
        "{}",
        json!({
            "model": out.display().to_string(),
            "history": history.display().to_string(),
            "dev_macro_f1": final_f1,
            "best_dev_macro_f1": best_f1,
            "best_epoch": best_epoch,
        })
    );
    Ok(())
}

/// Loads a bundle and the stores it was trained with, refusing inputs whose
/// schema differs from the model's.
fn load_model(ctx: &Ctx, model: &Path, stores: StoreArgs) -> Result<(ModelBundle, Stores)> {
    let mut bundle = ModelBundle::load(model)?;
    StorePaths::from(stores).apply(&mut bundle.config)?;
    let loaded = Stores::load(&bundle.config)?;
    if loaded.lexicon.digest() != bundle.lexicon_digest {
        return Err(Error::Config("replacement lexicon differs from the one the model was trained with".into()));
    }
    let (e, s, i) = loaded.input_dims();
    let cfg = &bundle.config;
    let mismatch = |what: &str, want: Option<usize>, got: usize| match want {
        Some(w) if w != got => Err(Error::Config(format!("{what} width is {got}, model expects {w}"))),
        _ => Ok(()),
    };
    mismatch("embedding", Some(bundle.embedding_dim), e)?;
    let needs = memefuse::dataset::Needs::of(&cfg.ensemble_members);
    if needs.sentence {
        mismatch("sentence vector", cfg.model_sentence_dim, s)?;
    }
    if needs.image_vector {
        mismatch("image feature", cfg.model_image_feature_dim, i)?;
    }
    ctx.progress(format!("loaded model {} ({} members)", model.display(), bundle.ensemble.members.len()));
    Ok((bundle, loaded))
}

fn predict_samples(bundle: &ModelBundle, samples: &[Sample]) -> Result<Vec<memefuse::Prediction>> {
    samples.iter().map(|s| bundle.ensemble.predict(s)).collect()
}

fn predict(ctx: &Ctx, model: &Path, data: &Path, out: &Path, stores: StoreArgs) -> Result<()> {
    let (bundle, loaded) = load_model(ctx, model, stores)?;
    let dataset = load_records(data, bundle.config.model_classes)?;
    let samples = loaded.samples(&bundle.config, &dataset)?;
    let preds = predict_samples(&bundle, &samples)?;
    let mut text = String::new();
    for (s, p) in samples.iter().zip(&preds) {
        text.push_str(&json!({"id": s.id, "probs": p.probs(), "label": p.label()}).to_string());
        text.push('\n');
    }
    write_atomic(out, text.as_bytes())?;
    ctx.progress(format!("wrote {} predictions to {}", preds.len(), out.display()));
    Ok(())
}

fn eval(ctx: &Ctx, model: &Path, data: &Path, stores: StoreArgs) -> Result<()> {
    let (bundle, loaded) = load_model(ctx, model, stores)?;
    let dataset = load_records(data, bundle.config.model_classes)?;
    let samples = loaded.samples(&bundle.config, &dataset)?;
    let truth = require_labels(&samples)?;
    let preds: Vec<usize> = predict_samples(&bundle, &samples)?.iter().map(|p| p.label()).collect();
    let report = evaluate(&truth, &preds, bundle.config.model_classes)?;
    println!("{}", report.to_json());
    if !ctx.quiet {
        eprint!("{}", report.table());
    }
    Ok(())
}

fn gridsearch(
    ctx: &Ctx,
    grid: &Path,
    data: &Path,
    config: Option<&Path>,
    out: Option<&Path>,
    stores: StoreArgs,
) -> Result<()> {
    let grid = GridSpec::load(grid)?;
    let cfg = ctx.config(config, stores)?;
    let loaded = Stores::load(&cfg)?;
    let (e, s, i) = loaded.input_dims();
    let cfg = cfg.with_input_dims(e, s, i);
    let samples = labelled_samples(ctx, &cfg, &loaded, data)?;
    let (train_set, dev_set) = split_train_dev(&samples, cfg.train_dev_fraction, cfg.train_seed)?;
    ctx.progress(format!("searching {} combinations", grid.size()));
    let outcome = grid_search(&grid, &cfg, &train_set, &dev_set)?;
    let csv = outcome.to_csv();
    print!("{csv}");
    if let Some(out) = out {
        write_atomic(out, csv.as_bytes())?;
    }
    let best = outcome.best_row();
    ctx.progress(format!(
        "best: {} = {} (dev macro-F1 {:.4})",
        outcome.names.join(","),
        best.values.join(","),
        best.dev_macro_f1
    ));
    Ok(())
}

fn gradcheck(ctx: &Ctx, seeds: usize) -> bool {
    let first = ctx.seed.unwrap_or(0);
    let reports = gradient_suite(first, seeds);
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "{:<12} {:>6} {:>14}  {:<6} worst", "layer", "seeds", "max_rel_error", "status");
    for r in &reports {
        let _ = writeln!(
            stdout,
            "{:<12} {:>6} {:>14.3e}  {:<6} {}",
            r.layer,
            r.seeds,
            r.max_rel_error,
            if r.passed { "ok" } else { "FAIL" },
            r.worst
        );
    }
    let ok = reports.iter().all(|r| r.passed);
    if !ok {
        ctx.progress(format!("gradient check failed: some layer exceeds {TOLERANCE:e}"));
    }
    ok
}

fn synth(ctx: &Ctx, out: &Path, records: usize, classes: usize) -> Result<()> {
    let spec = SyntheticSpec {
        records,
        classes,
        seed: ctx.seed.unwrap_or(0),
        ..SyntheticSpec::default()
    };
    SyntheticSet::generate(spec)?.write_to(out)?;
    ctx.progress(format!("wrote {records} records to {}", out.display()));
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Divergence => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ctx = Ctx {
        seed: cli.seed,
        quiet: cli.quiet,
    };
    let result = match cli.command {
        Command::Train { data, config, out, stores } => train(&ctx, &data, config.as_deref(), &out, stores),
        Command::Predict { model, data, out, stores } => predict(&ctx, &model, &data, &out, stores),
        Command::Eval { model, data, stores } => eval(&ctx, &model, &data, stores),
        Command::Gridsearch { grid, data, config, out, stores } => {
            gridsearch(&ctx, &grid, &data, config.as_deref(), out.as_deref(), stores)
        }
        Command::Gradcheck { seeds } => {
            return if gradcheck(&ctx, seeds) { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
        Command::Synth { out, records, classes } => synth(&ctx, &out, records, classes),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("memefuse: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
