//! `cdp`: distort images, synthesize corpora, build manifests, train,
//! evaluate and export embeddings.
//!
//! Every run prints one JSON summary line on stdout. Exit codes: 0 success,
//! 1 usage error, 2 data error, 3 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

use cdp_core::corpus::{
    build_manifest, scan_corpus, synth_corpus, write_corpus, Corpus, Manifest, Split,
    SplitFractions,
};
use cdp_core::net::{init_params, Checkpoint, NetConfig};
use cdp_core::trainer::{
    self, embeddings_csv, evaluate, evaluate_main, export_embeddings, metrics_jsonl,
    split_main_labels, LabeledSet, LrSchedule, Mode, TrainConfig, TrainOutcome,
};
use cdp_core::{
    decode_ppm, distort, encode_ppm, DistortionKind, DistortionParams, Error, SamplerConfig,
};

#[derive(Parser)]
#[command(name = "cdp", version, about = "Color-distortion prediction toolkit")]
struct Cli {
    /// Worker threads for batch rendering and gradients; 0 uses one per core.
    /// Results do not depend on this value.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// Log per-epoch progress to stderr.
    #[arg(long, short, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Apply one distortion (plus optional noise) to a PPM image.
    Distort(DistortArgs),
    /// Write a synthetic swatch corpus (PPM files plus labels.csv).
    Synth(SynthArgs),
    /// Build the seeded pseudo-label manifest for a corpus.
    Manifest(ManifestArgs),
    /// Train in pretext or multitask mode.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one manifest split.
    Eval(EvalArgs),
    /// Export embedding vectors as CSV.
    Embed(EmbedArgs),
    /// Write a freshly initialized (untrained) checkpoint.
    Init(InitArgs),
}

#[derive(Args)]
struct DistortArgs {
    /// Input PPM (P6, maxval 255).
    #[arg(long)]
    input: PathBuf,
    /// color, contrast, sharpness or brightness.
    #[arg(long, value_parser = parse_kind)]
    kind: DistortionKind,
    /// Blend factor.
    #[arg(long)]
    alpha: f64,
    /// Noise scale; 0 disables noise.
    #[arg(long, default_value_t = 0.0)]
    beta: f64,
    /// Noise seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output PPM.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Number of swatches.
    #[arg(long, default_value_t = 1000)]
    count: usize,
    /// Edge length in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ManifestArgs {
    /// Corpus directory.
    #[arg(long)]
    corpus: PathBuf,
    /// Alpha range `lo,hi`.
    #[arg(long, value_parser = parse_pair, default_value = "0.5,1.5")]
    alpha_range: (f64, f64),
    /// Half-width of the excluded band around alpha = 1.
    #[arg(long, default_value_t = 0.01)]
    alpha_exclude: f64,
    /// Beta range `lo,hi`.
    #[arg(long, value_parser = parse_pair, default_value = "0.02,0.05")]
    beta_range: (f64, f64),
    /// Train, val and test fractions.
    #[arg(long, value_parser = parse_split, default_value = "0.8,0.1,0.1")]
    split: SplitFractions,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output manifest (JSON Lines).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Manifest (JSON Lines).
    #[arg(long)]
    manifest: PathBuf,
    /// Corpus directory the manifest was built from.
    #[arg(long)]
    corpus: PathBuf,
    /// pretext or multitask.
    #[arg(long, value_parser = parse_mode, default_value = "pretext")]
    mode: Mode,
    /// Pretext loss weight in multitask mode.
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    /// Distorted samples per minibatch (a multiple of 4).
    #[arg(long, default_value_t = 64)]
    batch: usize,
    /// Peak learning rate.
    #[arg(long, default_value_t = 0.03)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    /// constant or cosine.
    #[arg(long, value_parser = parse_schedule, default_value = "cosine")]
    schedule: LrSchedule,
    /// Seed for initialization, shuffling and labeled-subset selection.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Embedding width.
    #[arg(long, default_value_t = 32)]
    embedding: usize,
    /// Output channels of each conv block.
    #[arg(long, value_parser = parse_channels, default_value = "16,32")]
    channels: Channels,
    /// Fraction of train images whose main labels are used (multitask).
    #[arg(long, default_value_t = 0.1)]
    labeled_fraction: f64,
    /// Main-head classes (multitask); defaults to 1 + the largest label.
    #[arg(long)]
    main_classes: Option<usize>,
    /// Output checkpoint (best validation epoch).
    #[arg(long)]
    out: PathBuf,
    /// Output metrics log (JSON Lines, one line per epoch).
    #[arg(long)]
    log: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// train, val or test.
    #[arg(long, value_parser = parse_split_name, default_value = "val")]
    split: Split,
    /// Optional JSON report file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Restrict to one split of this manifest (all corpus images otherwise).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Split used with `--manifest`.
    #[arg(long, value_parser = parse_split_name, default_value = "test")]
    split: Split,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InitArgs {
    #[arg(long, default_value_t = 64)]
    input_size: usize,
    #[arg(long, value_parser = parse_channels, default_value = "16,32")]
    channels: Channels,
    #[arg(long, default_value_t = 32)]
    embedding: usize,
    #[arg(long)]
    main_classes: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Debug)]
struct Channels(Vec<usize>);

fn parse_kind(s: &str) -> Result<DistortionKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_schedule(s: &str) -> Result<LrSchedule, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_split_name(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_reals(s: &str, n: usize) -> Result<Vec<f64>, String> {
    let v = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| format!("`{p}` is not a number"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if v.len() != n {
        return Err(format!(
            "expected {n} comma-separated numbers, got {}",
            v.len()
        ));
    }
    Ok(v)
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let v = parse_reals(s, 2)?;
    Ok((v[0], v[1]))
}

fn parse_split(s: &str) -> Result<SplitFractions, String> {
    let v = parse_reals(s, 3)?;
    let f = SplitFractions {
        train: v[0],
        val: v[1],
        test: v[2],
    };
    f.validate().map_err(|e| e.to_string())?;
    Ok(f)
}

fn parse_channels(s: &str) -> Result<Channels, String> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| format!("`{p}` is not a channel count"))
        })
        .collect::<Result<Vec<_>, _>>()
        .map(Channels)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_owned(),
        source,
    }
}

fn read(path: &Path) -> Result<Vec<u8>, Error> {
    fs::read(path).map_err(io_err(path))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Error> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn open_corpus(dir: &Path) -> Result<(Corpus, usize), Error> {
    let report = scan_corpus(dir)?;
    let skipped = report.skipped;
    Ok((Corpus::new(report.items)?.into_resident()?, skipped))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Error> {
    Checkpoint::from_bytes(&read(path)?)
}

/// Side length shared by every corpus image.
fn input_size(corpus: &Corpus) -> Result<usize, Error> {
    let first = corpus
        .items()
        .first()
        .ok_or_else(|| Error::InvalidArgument("corpus is empty".into()))?;
    let img = corpus.image(&first.image_id)?;
    if img.width() != img.height() {
        return Err(Error::Dimension(format!(
            "`{}` is {}x{}; training needs square images",
            first.image_id,
            img.width(),
            img.height()
        )));
    }
    Ok(img.width())
}

fn check_manifest(manifest: &Manifest, corpus: &Corpus) -> Result<(), Error> {
    if manifest.header.corpus_hash != corpus.content_hash()? {
        return Err(Error::Manifest(
            "manifest was built from a different corpus (content hash mismatch)".into(),
        ));
    }
    Ok(())
}

type Summary = Map<String, Value>;

fn summary(pairs: Value) -> Summary {
    match pairs {
        Value::Object(m) => m,
        _ => unreachable!("summary built from an object literal"),
    }
}

fn cmd_distort(a: &DistortArgs) -> Result<Summary, Error> {
    let img = decode_ppm(&read(&a.input)?)?;
    let params = DistortionParams {
        kind: a.kind,
        alpha: a.alpha,
        beta: a.beta,
        noise_seed: a.seed,
    };
    let out = distort(&img, &params)?;
    write(&a.output, encode_ppm(&out))?;
    Ok(summary(json!({
        "output": a.output,
        "kind": a.kind.name(),
        "alpha": a.alpha,
        "beta": a.beta,
        "seed": a.seed,
        "width": out.width(),
        "height": out.height(),
    })))
}

fn cmd_synth(a: &SynthArgs) -> Result<Summary, Error> {
    let swatches = synth_corpus(a.count, a.size, a.seed)?;
    write_corpus(&a.out, &swatches)?;
    Ok(summary(json!({
        "out": a.out,
        "count": a.count,
        "size": a.size,
        "seed": a.seed,
    })))
}

fn cmd_manifest(a: &ManifestArgs) -> Result<Summary, Error> {
    let sampler = SamplerConfig {
        alpha_lo: a.alpha_range.0,
        alpha_hi: a.alpha_range.1,
        alpha_exclusion_halfwidth: a.alpha_exclude,
        beta_lo: a.beta_range.0,
        beta_hi: a.beta_range.1,
    };
    sampler.validate()?;
    let (corpus, skipped) = open_corpus(&a.corpus)?;
    let manifest = build_manifest(&corpus, &sampler, &a.split, a.seed)?;
    manifest.write(&a.out)?;
    let [train, val, test] = manifest.split_counts();
    Ok(summary(json!({
        "out": a.out,
        "images": corpus.len(),
        "skipped": skipped,
        "samples": manifest.samples.len(),
        "train": train,
        "val": val,
        "test": test,
        "seed": a.seed,
    })))
}

fn cmd_train(a: &TrainArgs) -> Result<Summary, Error> {
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        lr: a.lr,
        schedule: a.schedule,
        momentum: a.momentum,
        lambda: a.lambda,
        seed: a.seed,
        mode: a.mode,
    };
    cfg.validate()?;
    let (corpus, _) = open_corpus(&a.corpus)?;
    let manifest = Manifest::read(&a.manifest)?;
    check_manifest(&manifest, &corpus)?;
    let mut net = NetConfig {
        input_size: input_size(&corpus)?,
        conv_channels: a.channels.0.clone(),
        embedding_dim: a.embedding,
        main_classes: None,
    };
    net.validate()?;

    let mut extra = Map::new();
    let outcome: TrainOutcome = match a.mode {
        Mode::Pretext => trainer::train_pretext(&manifest, &corpus, &net, &cfg)?,
        Mode::Multitask => {
            let labeled = LabeledSet::select(&manifest, &corpus, a.labeled_fraction, a.seed)?;
            let classes = match a.main_classes {
                Some(k) => k,
                None => {
                    let mut max = 0;
                    for item in corpus.items() {
                        max = max.max(corpus.main_label(&item.image_id)? as usize);
                    }
                    max + 1
                }
            };
            net.main_classes = Some(classes);
            extra.insert("labeled".into(), json!(labeled.len()));
            extra.insert("main_classes".into(), json!(classes));
            trainer::train_multitask(&labeled, &manifest, &corpus, &net, &cfg)?
        }
    };
    write(&a.out, outcome.checkpoint.to_bytes())?;
    write(&a.log, metrics_jsonl(&outcome.log))?;
    let best = &outcome.log[outcome.best_epoch - 1];
    let mut s = summary(json!({
        "out": a.out,
        "log": a.log,
        "mode": a.mode.name(),
        "epochs": outcome.log.len(),
        "best_epoch": outcome.best_epoch,
        "initial_val_loss": outcome.initial_val_loss,
        "val_loss": best.val_loss,
        "val_acc": best.val_acc,
        "main_val_acc": best.main_val_acc,
        "parameters": outcome.checkpoint.params.parameter_count(),
    }));
    s.append(&mut extra);
    Ok(s)
}

fn cmd_eval(a: &EvalArgs) -> Result<Summary, Error> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let (corpus, _) = open_corpus(&a.corpus)?;
    let manifest = Manifest::read(&a.manifest)?;
    check_manifest(&manifest, &corpus)?;
    let report = evaluate(&ck.params, &manifest, a.split, &corpus)?;
    let mut value = serde_json::to_value(&report)?;
    if ck.params.config().main_classes.is_some() {
        if let Ok(labeled) = split_main_labels(&manifest, a.split, &corpus) {
            let main = evaluate_main(&ck.params, &labeled, &corpus)?;
            value["main_accuracy"] = json!(main.accuracy);
            value["main_loss"] = json!(main.mean_loss);
        }
    }
    if let Some(out) = &a.out {
        write(out, serde_json::to_string(&value)? + "\n")?;
    }
    Ok(summary(value))
}

fn cmd_embed(a: &EmbedArgs) -> Result<Summary, Error> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let (corpus, _) = open_corpus(&a.corpus)?;
    let ids: Vec<String> = match &a.manifest {
        Some(path) => {
            let manifest = Manifest::read(path)?;
            check_manifest(&manifest, &corpus)?;
            manifest
                .image_ids(a.split)
                .into_iter()
                .map(str::to_owned)
                .collect()
        }
        None => corpus.items().iter().map(|i| i.image_id.clone()).collect(),
    };
    let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
    let rows = export_embeddings(&ck.params, &refs, &corpus)?;
    let dim = ck.params.config().embedding_dim;
    write(&a.out, embeddings_csv(&rows, dim))?;
    Ok(summary(json!({
        "out": a.out,
        "rows": rows.len(),
        "dim": dim,
    })))
}

fn cmd_init(a: &InitArgs) -> Result<Summary, Error> {
    let net = NetConfig {
        input_size: a.input_size,
        conv_channels: a.channels.0.clone(),
        embedding_dim: a.embedding,
        main_classes: a.main_classes,
    };
    let params = init_params::<f32>(&net, a.seed)?;
    let count = params.parameter_count();
    write(&a.out, Checkpoint::new(params, None).to_bytes())?;
    Ok(summary(json!({
        "out": a.out,
        "parameters": count,
        "seed": a.seed,
    })))
}

fn name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Distort(_) => "distort",
        Command::Synth(_) => "synth",
        Command::Manifest(_) => "manifest",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Embed(_) => "embed",
        Command::Init(_) => "init",
    }
}

fn run(cmd: &Command) -> Result<Summary, Error> {
    match cmd {
        Command::Distort(a) => cmd_distort(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Manifest(a) => cmd_manifest(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Embed(a) => cmd_embed(a),
        Command::Init(a) => cmd_init(a),
    }
}

fn exit_code(err: &Error) -> u8 {
    if err.is_numeric() {
        3
    } else if matches!(err, Error::Config(_)) {
        1
    } else {
        2
    }
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
    if cli.verbose {
        env_logger::Builder::new()
            .filter_level(log::LevelFilter::Info)
            .init();
    }
    let start = Instant::now();
    let result = if cli.threads > 0 {
        match rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build()
        {
            Ok(pool) => pool.install(|| run(&cli.command)),
            Err(e) => Err(Error::Config(format!(
                "cannot start {} threads: {e}",
                cli.threads
            ))),
        }
    } else {
        run(&cli.command)
    };
    let wall_ms = start.elapsed().as_millis() as u64;
    let (mut line, code) = match result {
        Ok(s) => (s, 0),
        Err(e) => {
            eprintln!("error: {e}");
            let code = exit_code(&e);
            (
                summary(json!({ "status": "error", "error": e.to_string(), "exit_code": code })),
                code,
            )
        }
    };
    line.insert("command".into(), json!(name(&cli.command)));
    line.entry("status").or_insert(json!("ok"));
    line.insert("wall_ms".into(), json!(wall_ms));
    println!("{}", Value::Object(line));
    ExitCode::from(code)
}
