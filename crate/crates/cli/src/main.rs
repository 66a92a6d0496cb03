//! `vcmr` — train, index, search, and evaluate a moment-retrieval model.
//!
//! Every command prints a single JSON summary line on stdout and writes any
//! larger artifacts (checkpoints, indexes, reports, logs) to the paths given
//! by its flags. The exit code is 0 only when the command fully succeeded.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use vcmr_cli::config::{Gates, RunConfig};
use vcmr_cli::diagnostics::{
    full_loss_grad_check, small_grad_corpus, small_run_config, GRAD_CHECK_STEP,
};
use vcmr_cli::eval::{evaluate_split, EvalParams};
use vcmr_cli::trainer::train;
use vcmr_engine::bench::bench_retrieval;
use vcmr_engine::data::{generate_synthetic_corpus, Corpus, SyntheticSpec};
use vcmr_engine::formats::{load_corpus, save_corpus};
use vcmr_engine::index::{build_corpus_index, checkpoint_fingerprint, CorpusIndex};
use vcmr_engine::retrieval::{encode_query_vectors, vcmr_rank, Localizer, RankParams};
use vcmr_model::Model;

// ------------------------------------------------------------- CLI surface

#[derive(Parser)]
#[command(
    name = "vcmr",
    version,
    about = "Video corpus moment retrieval: synthetic data, training, indexing, search, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic planted-signal corpus on disk.
    GenData(GenDataArgs),
    /// Train a model and write checkpoint, log, and resolved config.
    Train(TrainArgs),
    /// Encode corpus videos into a retrieval index for one checkpoint.
    EncodeCorpus(EncodeCorpusArgs),
    /// Run corpus search for queries against a prebuilt index.
    Retrieve(RetrieveArgs),
    /// Compute the full recall report for a corpus split.
    Eval(EvalArgs),
    /// Benchmark precomputed-index retrieval against per-pair re-encoding.
    Bench(BenchArgs),
    /// Check full-loss analytic gradients against central differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory for feature, annotation, and split files.
    #[arg(long)]
    out: PathBuf,
    /// JSON file holding a full corpus spec; flags below override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Number of videos.
    #[arg(long)]
    m: Option<usize>,
    /// Fraction of videos assigned to the train split.
    #[arg(long)]
    train_fraction: Option<f64>,
    /// Skip the subtitle stream.
    #[arg(long)]
    no_subtitles: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Profile {
    /// Small dimensions suitable for CPU experiments.
    Desk,
    /// Full-scale dimensions (d=384, 128 clip units, batch 128).
    Paper,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum GateSet {
    /// All four objectives.
    Full,
    /// Retrieval + localization only.
    Base,
    /// Base plus the video-level contrastive objective.
    BaseVideoCl,
    /// Base plus the frame-level contrastive objective.
    BaseFrameCl,
}

impl GateSet {
    fn gates(self) -> Gates {
        match self {
            GateSet::Full => Gates::default(),
            GateSet::Base => Gates::base(),
            GateSet::BaseVideoCl => Gates { video_cl: true, ..Gates::base() },
            GateSet::BaseFrameCl => Gates { frame_cl: true, ..Gates::base() },
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus directory produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoint.bin, train_log.jsonl, run_config.json.
    #[arg(long)]
    out: PathBuf,
    /// Run configuration JSON; defaults come from the chosen profile.
    #[arg(long, conflicts_with = "profile")]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Profile::Desk)]
    profile: Profile,
    /// Objective selection override.
    #[arg(long, value_enum)]
    gates: Option<GateSet>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Overrides both the run seed and the model init seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    All,
}

#[derive(Args)]
struct EncodeCorpusArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output index file.
    #[arg(long)]
    out: PathBuf,
    /// Which videos to index.
    #[arg(long, value_enum, default_value_t = SplitArg::All)]
    split: SplitArg,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Videos to retrieve per query before localization.
    #[arg(long, default_value_t = 100)]
    k: usize,
    /// Spans kept per retrieved video.
    #[arg(long, default_value_t = 10)]
    top_n: usize,
    /// Longest allowed span, in clip units.
    #[arg(long, default_value_t = 16)]
    l_max: usize,
    /// Retrieval sharpness; defaults to the checkpoint's value.
    #[arg(long)]
    gamma: Option<f64>,
    /// Queries to run (repeatable); all annotations when omitted.
    #[arg(long = "query-id")]
    query_ids: Vec<String>,
    /// JSON-lines output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    split: SplitArg,
    #[arg(long, default_value_t = 100)]
    k: usize,
    #[arg(long, default_value_t = 10)]
    top_n: usize,
    #[arg(long, default_value_t = 16)]
    l_max: usize,
    #[arg(long)]
    gamma: Option<f64>,
    /// Report JSON path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write recall-vs-IoU-threshold curves as CSV.
    #[arg(long)]
    curves: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Number of benchmark queries.
    #[arg(long, default_value_t = 100)]
    queries: usize,
    /// Number of indexed videos.
    #[arg(long, default_value_t = 500)]
    videos: usize,
    #[arg(long, default_value_t = 100)]
    k: usize,
    /// Run configuration JSON giving the model dimensions.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Report JSON path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Central-difference step.
    #[arg(long, default_value_t = GRAD_CHECK_STEP)]
    h: f64,
    /// Maximum allowed relative error.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 11)]
    seed: u64,
    /// Summary JSON path; stdout always gets the summary too.
    #[arg(long)]
    out: Option<PathBuf>,
}

// ----------------------------------------------------------------- helpers

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {what} {path:?}"))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {what} {path:?}"))
}

fn load_model_and_fingerprint(path: &Path) -> Result<(Model<f32>, [u8; 32])> {
    let bytes = fs::read(path).with_context(|| format!("reading checkpoint {path:?}"))?;
    let model = Model::from_checkpoint_bytes(&bytes)
        .with_context(|| format!("decoding checkpoint {path:?}"))?;
    Ok((model, checkpoint_fingerprint(&bytes)))
}

fn check_fingerprint(index: &CorpusIndex, fingerprint: [u8; 32]) -> Result<()> {
    if index.fingerprint != fingerprint {
        bail!(
            "index was built with checkpoint {}, got {}; re-run encode-corpus",
            hex(&index.fingerprint),
            hex(&fingerprint)
        );
    }
    Ok(())
}

fn split_ids(corpus: &Corpus, split: SplitArg) -> Vec<String> {
    match split {
        SplitArg::Train => corpus.splits.train.clone(),
        SplitArg::Val => corpus.splits.val.clone(),
        SplitArg::All => corpus.videos.iter().map(|v| v.id.clone()).collect(),
    }
}

fn write_or_print(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(path) => {
            fs::write(path, text).with_context(|| format!("writing {path:?}"))?;
        }
        None if text.ends_with('\n') => print!("{text}"),
        None => println!("{text}"),
    }
    Ok(())
}

// ---------------------------------------------------------------- commands

fn run_gen_data(args: GenDataArgs) -> Result<()> {
    let mut spec: SyntheticSpec = match &args.spec {
        Some(path) => read_json(path, "corpus spec")?,
        None => SyntheticSpec::default(),
    };
    if let Some(m) = args.m {
        spec.m = m;
    }
    if let Some(f) = args.train_fraction {
        spec.train_fraction = f;
    }
    if args.no_subtitles {
        spec.subtitles = false;
    }
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }

    let generated = generate_synthetic_corpus(&spec)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {:?}", args.out))?;
    save_corpus(&args.out, &generated.corpus)?;

    let summary = json!({
        "dir": args.out,
        "videos": generated.corpus.videos.len(),
        "annotations": generated.corpus.annotations.len(),
        "train_videos": generated.corpus.splits.train.len(),
        "val_videos": generated.corpus.splits.val.len(),
        "oracle_vr_r1": generated.oracle_vr_r1,
        "fg_bg_margin": generated.fg_bg_margin,
    });
    println!("{summary}");
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<()> {
    let mut cfg: RunConfig = match &args.config {
        Some(path) => read_json(path, "run config")?,
        None => match args.profile {
            Profile::Desk => RunConfig::default(),
            Profile::Paper => RunConfig::paper(),
        },
    };
    if let Some(g) = args.gates {
        cfg.gates = g.gates();
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = args.lr {
        cfg.lr = lr;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
        cfg.model.seed = seed;
    }

    let corpus = load_corpus(&args.data)?;
    let outcome = train(&cfg, &corpus)?;

    fs::create_dir_all(&args.out).with_context(|| format!("creating {:?}", args.out))?;
    fs::write(args.out.join("run_config.json"), cfg.to_json()?)?;
    fs::write(args.out.join("train_log.jsonl"), outcome.log.join("\n") + "\n")?;
    outcome.model.save(&args.out.join("checkpoint.bin"))?;

    let summary = json!({
        "out": args.out,
        "epochs_run": outcome.epochs_run,
        "best_epoch": outcome.best_epoch,
        "best_val_vcmr_r1_iou05": outcome.best_val,
        "aborted": outcome.aborted,
    });
    fs::write(args.out.join("outcome.json"), summary.to_string())?;
    println!("{summary}");
    if let Some(msg) = outcome.aborted {
        bail!("training aborted: {msg}");
    }
    Ok(())
}

fn run_encode_corpus(args: EncodeCorpusArgs) -> Result<()> {
    let corpus = load_corpus(&args.data)?;
    let (model, fingerprint) = load_model_and_fingerprint(&args.checkpoint)?;
    let ids = split_ids(&corpus, args.split);
    let videos: Vec<_> = corpus
        .videos
        .iter()
        .filter(|v| ids.iter().any(|id| id == &v.id))
        .cloned()
        .collect();
    if videos.is_empty() {
        bail!("split {:?} selects no videos", args.split);
    }
    let index = build_corpus_index(&model, fingerprint, &videos)?;
    index.save(&args.out)?;
    let summary = json!({
        "out": args.out,
        "videos": index.entries.len(),
        "d": index.d,
        "subtitles": index.subtitles,
        "fingerprint": hex(&index.fingerprint),
    });
    println!("{summary}");
    Ok(())
}

fn run_retrieve(args: RetrieveArgs) -> Result<()> {
    let corpus = load_corpus(&args.data)?;
    let (model, fingerprint) = load_model_and_fingerprint(&args.checkpoint)?;
    let index = CorpusIndex::load(&args.index)?;
    check_fingerprint(&index, fingerprint)?;

    let selected: Vec<_> = if args.query_ids.is_empty() {
        corpus.annotations.iter().collect()
    } else {
        let mut picked = Vec::with_capacity(args.query_ids.len());
        for id in &args.query_ids {
            let ann = corpus
                .annotations
                .iter()
                .find(|a| &a.query_id == id)
                .with_context(|| format!("query {id} not found in {:?}", args.data))?;
            picked.push(ann);
        }
        picked
    };

    let localizer = Localizer::from_model(&model);
    let params = RankParams {
        k: args.k.min(index.entries.len()),
        top_n: args.top_n,
        l_max: args.l_max,
        gamma: args.gamma.unwrap_or(model.cfg.gamma),
    };
    let mut lines = Vec::with_capacity(selected.len());
    for ann in selected {
        let mask = vec![true; ann.n_q()];
        let query = encode_query_vectors(&model, &ann.word_feats, &mask)?;
        let videos = vcmr_engine::retrieve_videos(&query, &index, params.k)?;
        let moments = vcmr_rank(&query, &index, &localizer, params)?;
        let line = json!({
            "query_id": ann.query_id,
            "videos": videos
                .iter()
                .map(|&(i, phi)| json!({ "id": index.entries[i].id, "phi": phi }))
                .collect::<Vec<_>>(),
            "moments": moments,
        });
        lines.push(line.to_string());
    }
    write_or_print(&args.out, &(lines.join("\n") + "\n"))?;
    if let Some(path) = &args.out {
        println!("{}", json!({ "out": path, "queries": lines.len() }));
    }
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let corpus = load_corpus(&args.data)?;
    let (model, fingerprint) = load_model_and_fingerprint(&args.checkpoint)?;
    let index = CorpusIndex::load(&args.index)?;
    check_fingerprint(&index, fingerprint)?;

    let ids = split_ids(&corpus, args.split);
    let params = EvalParams {
        k: args.k,
        top_n: args.top_n,
        l_max: args.l_max,
        gamma: args.gamma.unwrap_or(model.cfg.gamma),
    };
    let report = evaluate_split(&model, &index, &corpus, &ids, &params)?;
    if let Some(path) = &args.curves {
        fs::write(path, report.curves_csv()).with_context(|| format!("writing {path:?}"))?;
    }
    let text = serde_json::to_string_pretty(&report)?;
    write_or_print(&args.out, &text)?;
    if let Some(path) = &args.out {
        println!(
            "{}",
            json!({
                "out": path,
                "queries": report.queries,
                "vcmr_r1_iou05": report.vcmr_r1_iou05(),
            })
        );
    }
    Ok(())
}

fn run_bench(args: BenchArgs) -> Result<()> {
    let cfg: RunConfig = match &args.config {
        Some(path) => read_json(path, "run config")?,
        None => {
            // Index-throughput default: a lean single-stream encoder.
            let mut cfg = RunConfig::default();
            cfg.model.d = 32;
            cfg.model.d_v = 48;
            cfg.model.d_w = 32;
            cfg.model.heads = 2;
            cfg.model.d_ff = 128;
            cfg.model.n_v_max = 16;
            cfg.model.subtitles = false;
            cfg
        }
    };
    cfg.validate()?;
    let m = &cfg.model;
    let spec = SyntheticSpec {
        m: args.videos,
        n_v: (m.n_v_max.saturating_sub(4).max(4), m.n_v_max),
        n_q: (4, m.n_q_max.min(12)),
        d_v: m.d_v,
        d_w: m.d_w,
        latent_dim: m.d_v,
        moments_per_video: (1, 1),
        subtitles: m.subtitles,
        train_fraction: 1.0,
        seed: args.seed,
        ..SyntheticSpec::default()
    };
    let corpus = generate_synthetic_corpus(&spec)?.corpus;
    if corpus.annotations.len() < args.queries {
        bail!(
            "{} videos yield only {} queries, need {}",
            args.videos,
            corpus.annotations.len(),
            args.queries
        );
    }

    let model: Model<f32> = Model::new(m.clone())?;
    let fingerprint = checkpoint_fingerprint(&model.to_checkpoint_bytes()?);
    let mut queries = Vec::with_capacity(args.queries);
    for ann in corpus.annotations.iter().take(args.queries) {
        let mask = vec![true; ann.n_q()];
        queries.push(encode_query_vectors(&model, &ann.word_feats, &mask)?);
    }

    let report = bench_retrieval(&model, fingerprint, &corpus.videos, &queries, args.k)?;
    let text = serde_json::to_string_pretty(&report)?;
    write_or_print(&args.out, &text)?;
    if args.out.is_some() {
        println!(
            "{}",
            json!({ "speedup": report.speedup, "rankings_identical": report.rankings_identical })
        );
    }
    if !report.rankings_identical {
        bail!("precomputed and re-encode modes disagreed on rankings");
    }
    Ok(())
}

fn run_grad_check(args: GradCheckArgs) -> Result<()> {
    let cfg = small_run_config(args.seed);
    let corpus = small_grad_corpus(args.seed)?;
    let summary = full_loss_grad_check(&cfg, &corpus, args.h, args.tol)?;
    let text = serde_json::to_string(&summary)?;
    if let Some(path) = &args.out {
        fs::write(path, &text).with_context(|| format!("writing {path:?}"))?;
    }
    println!("{text}");
    if !summary.pass {
        bail!(
            "gradient check failed: max relative error {} exceeds {}",
            summary.max_rel_err,
            summary.tolerance
        );
    }
    Ok(())
}

// ------------------------------------------------------------------- entry

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => run_gen_data(args),
        Command::Train(args) => run_train(args),
        Command::EncodeCorpus(args) => run_encode_corpus(args),
        Command::Retrieve(args) => run_retrieve(args),
        Command::Eval(args) => run_eval(args),
        Command::Bench(args) => run_bench(args),
        Command::GradCheck(args) => run_grad_check(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
