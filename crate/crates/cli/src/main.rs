//! `styf`: corpus generation, the three training phases, generation and
//! evaluation. Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use styf::checkpoint::Checkpoint;
use styf::corpus::{default_specs, detokenize, synth_corpus, tokenize, Corpus, Splits, StyleSpec};
use styf::metrics::MetricsReport;
use styf::models::{GeneratorBundle, Sampling};
use styf::pipeline::{fit_evaluators, DeskPlan};
use styf::trainer::{pretrain_comparator, pretrain_lm, train_generator, Phase, TrainConfig};
use styf::transformer::Variant;

use manifest::RunManifest;

const LM_FILE: &str = "lm.ckpt";
const COMPARATOR_FILE: &str = "comparator.ckpt";
const GENERATOR_FILE: &str = "generator.ckpt";

#[derive(Parser, Debug)]
#[command(name = "styf", version, about = "Style-example-guided paragraph generation")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write a deterministic synthetic JSONL corpus.
    MakeCorpus {
        /// JSON array of style specs; the three built-in styles when absent.
        #[arg(long)]
        specs: Option<PathBuf>,
        #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u64).range(1..))]
        docs_per_style: u64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the frozen language model H.
    PretrainLm(PhaseArgs),
    /// Pretrain the style comparator C on frozen H features.
    PretrainComparator(PhaseArgs),
    /// Train the style encoder and decoder with both data streams.
    Train {
        #[command(flatten)]
        phase: PhaseArgs,
        #[arg(long, value_enum, ignore_case = true)]
        variant: Option<VariantArg>,
    },
    /// Continue a context in the style of a reference paragraph.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Context text, or a path to a file holding it.
        #[arg(long)]
        context: String,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u64).range(1..))]
        n_tokens: u64,
        /// 1 selects greedy decoding.
        #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(1..))]
        top_k: u64,
        #[arg(long, default_value_t = 1.0)]
        temperature: f32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write frozen-LM features of the generated tokens as JSON.
        #[arg(long)]
        emit_features: Option<PathBuf>,
        /// Language model for --emit-features; defaults to lm.ckpt beside the checkpoint.
        #[arg(long)]
        lm: Option<PathBuf>,
    },
    /// Score a trained generator and write a JSON report plus scatter CSV.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 150, value_parser = clap::value_parser!(u64).range(1..))]
        n_samples: u64,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to lm.ckpt beside the checkpoint.
        #[arg(long)]
        lm: Option<PathBuf>,
        /// Retrain without one loss term and report the deltas.
        #[arg(long, value_enum)]
        drop_loss: Option<LossTerm>,
    },
}

#[derive(clap::Args, Debug)]
struct PhaseArgs {
    /// TOML run configuration; the compact desk settings when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariantArg {
    A,
    B,
    C,
    D,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::A => Variant::A,
            VariantArg::B => Variant::B,
            VariantArg::C => Variant::C,
            VariantArg::D => Variant::D,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum LossTerm {
    Dist,
    Style,
    Gan,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("styf: {e}");
            match e {
                styf::Error::Usage(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn run(cmd: Cmd) -> styf::Result<()> {
    match cmd {
        Cmd::MakeCorpus { specs, docs_per_style, seed, out } => make_corpus(specs.as_deref(), docs_per_style, seed, &out),
        Cmd::PretrainLm(args) => run_pretrain_lm(&args),
        Cmd::PretrainComparator(args) => run_pretrain_comparator(&args),
        Cmd::Train { phase, variant } => run_train(&phase, variant.map(Variant::from)),
        Cmd::Generate { checkpoint, context, reference, n_tokens, top_k, temperature, seed, emit_features, lm } => {
            let sampling = if top_k == 1 { Sampling::Greedy } else { Sampling::TopK { k: top_k as usize, temperature } };
            let request = GenerateRequest {
                checkpoint: &checkpoint,
                context: &context,
                reference: &reference,
                n_tokens: n_tokens as usize,
                sampling,
                seed,
                emit_features: emit_features.as_deref(),
                lm: lm.as_deref(),
            };
            generate(&request)
        }
        Cmd::Evaluate { checkpoint, corpus, n_samples, out, lm, drop_loss } => {
            evaluate(&checkpoint, &corpus, n_samples as usize, &out, lm.as_deref(), drop_loss)
        }
    }
}

fn make_corpus(specs: Option<&Path>, docs_per_style: u64, seed: u64, out: &Path) -> styf::Result<()> {
    let specs = match specs {
        Some(p) => StyleSpec::load_all(p)?,
        None => default_specs(),
    };
    let corpus = synth_corpus(&specs, docs_per_style as usize, seed)?;
    let bytes = corpus.to_jsonl();
    let config = serde_json::json!({ "specs": specs, "docs_per_style": docs_per_style, "seed": seed });
    let mut manifest = RunManifest::begin("make-corpus", config, bytes.as_bytes(), seed);
    std::fs::write(out, &bytes)?;
    manifest.outputs.push(out.to_path_buf());
    manifest.finish(&sidecar(out, "manifest.json"))?;
    eprintln!("wrote {} documents to {}", corpus.len(), out.display());
    Ok(())
}

/// `corpus.jsonl` → `corpus.jsonl.manifest.json`.
fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(suffix);
    path.with_file_name(name)
}

/// Corpus bytes, parsed corpus and the train/validation/test split shared by
/// every phase.
fn load_corpus(path: &Path) -> styf::Result<(Vec<u8>, Splits)> {
    if !path.exists() {
        return Err(styf::Error::MissingArtifact(format!(
            "corpus {} not found; create it with `styf make-corpus`",
            path.display()
        )));
    }
    let bytes = std::fs::read(path)?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|_| styf::Error::Config(format!("corpus {} is not UTF-8", path.display())))?;
    let corpus = Corpus::from_jsonl(&text)?;
    let splits = corpus.split(DeskPlan::compact().split_seed)?;
    Ok((bytes, splits))
}

/// The phase config from `--config` or the compact desk defaults, with the
/// phase fixed by the command and `STYF_SEED` applied.
fn phase_config(args: &PhaseArgs, phase: Phase) -> styf::Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(p) => TrainConfig::parse_toml(&std::fs::read_to_string(p)?)?,
        None => {
            let plan = DeskPlan::compact();
            match phase {
                Phase::PretrainLm => plan.lm,
                Phase::PretrainComparator => plan.comparator,
                Phase::TrainGenerator => plan.generator,
            }
        }
    };
    cfg.phase = phase;
    if phase != Phase::TrainGenerator {
        cfg.model.variant = Variant::None;
    }
    cfg.with_env_seed()
}

/// A checkpoint produced by an earlier phase, or an error naming that phase.
fn prerequisite(explicit: Option<&Path>, dir: &Path, file: &str, producer: &str) -> styf::Result<PathBuf> {
    let path = explicit.map(Path::to_path_buf).unwrap_or_else(|| dir.join(file));
    if !path.exists() {
        return Err(styf::Error::MissingArtifact(format!(
            "{} not found; run `styf {producer} --out {}` first",
            path.display(),
            dir.display()
        )));
    }
    Ok(path)
}

/// Writes the config snapshot, then the manifest once `body` succeeds.
fn phase_run(
    name: &str,
    args: &PhaseArgs,
    cfg: &TrainConfig,
    corpus_bytes: &[u8],
    body: impl FnOnce(&mut Vec<PathBuf>) -> styf::Result<()>,
) -> styf::Result<()> {
    cfg.validate()?;
    std::fs::create_dir_all(&args.out)?;
    let mut manifest = RunManifest::begin(name, serde_json::to_value(cfg)?, corpus_bytes, cfg.seed);
    let snapshot = args.out.join(format!("{name}.config.toml"));
    std::fs::write(&snapshot, cfg.to_toml())?;
    manifest.outputs.push(snapshot);
    body(&mut manifest.outputs)?;
    manifest.finish(&args.out.join(format!("{name}.manifest.json")))
}

fn run_pretrain_lm(args: &PhaseArgs) -> styf::Result<()> {
    let cfg = phase_config(args, Phase::PretrainLm)?;
    let (bytes, splits) = load_corpus(&args.corpus)?;
    phase_run("pretrain-lm", args, &cfg, &bytes, |outputs| {
        let (lm, log) = pretrain_lm(&splits, &cfg)?;
        let ckpt = args.out.join(LM_FILE);
        Checkpoint::from_lm(&lm).save(&ckpt)?;
        let log_path = args.out.join("lm_log.jsonl");
        log.save(&log_path)?;
        eprintln!("language model: final loss {:.4}", log.losses().last().copied().unwrap_or(f32::NAN));
        outputs.extend([ckpt, log_path]);
        Ok(())
    })
}

fn run_pretrain_comparator(args: &PhaseArgs) -> styf::Result<()> {
    let mut cfg = phase_config(args, Phase::PretrainComparator)?;
    let lm_path = prerequisite(cfg.lm_checkpoint.as_deref(), &args.out, LM_FILE, "pretrain-lm")?;
    cfg.lm_checkpoint = Some(lm_path.clone());
    let (bytes, splits) = load_corpus(&args.corpus)?;
    phase_run("pretrain-comparator", args, &cfg, &bytes, |outputs| {
        let lm = Checkpoint::load(&lm_path)?.to_lm()?;
        let run = pretrain_comparator(&splits, &lm, &cfg)?;
        let ckpt = args.out.join(COMPARATOR_FILE);
        Checkpoint::from_comparator(&run.comparator).save(&ckpt)?;
        let log_path = args.out.join("comparator_log.jsonl");
        run.log.save(&log_path)?;
        eprintln!(
            "comparator: held-out accuracy {:.3} (stopped at step {})",
            run.test_accuracy, run.stopped_at
        );
        outputs.extend([ckpt, log_path]);
        Ok(())
    })
}

fn run_train(args: &PhaseArgs, variant: Option<Variant>) -> styf::Result<()> {
    let mut cfg = phase_config(args, Phase::TrainGenerator)?;
    if let Some(v) = variant {
        cfg.model.variant = v;
    }
    let lm_path = prerequisite(cfg.lm_checkpoint.as_deref(), &args.out, LM_FILE, "pretrain-lm")?;
    let cmp_path =
        prerequisite(cfg.comparator_checkpoint.as_deref(), &args.out, COMPARATOR_FILE, "pretrain-comparator")?;
    cfg.lm_checkpoint = Some(lm_path.clone());
    cfg.comparator_checkpoint = Some(cmp_path.clone());
    let (bytes, splits) = load_corpus(&args.corpus)?;
    phase_run("train", args, &cfg, &bytes, |outputs| {
        let lm = Checkpoint::load(&lm_path)?.to_lm()?;
        let comparator = Checkpoint::load(&cmp_path)?.to_comparator()?;
        let run = train_generator(&splits, &lm, &comparator, &cfg)?;
        let ckpt = args.out.join(GENERATOR_FILE);
        Checkpoint::from_generator(&run.bundle).save(&ckpt)?;
        let disc = args.out.join("discriminator.ckpt");
        Checkpoint::from_discriminator(&run.discriminator).save(&disc)?;
        let log_path = args.out.join("generator_log.jsonl");
        run.log.save(&log_path)?;
        eprintln!(
            "generator {}: final loss {:.4}",
            cfg.model.variant,
            run.log.losses().last().copied().unwrap_or(f32::NAN)
        );
        outputs.extend([ckpt, disc, log_path]);
        Ok(())
    })
}

struct GenerateRequest<'a> {
    checkpoint: &'a Path,
    context: &'a str,
    reference: &'a Path,
    n_tokens: usize,
    sampling: Sampling,
    seed: u64,
    emit_features: Option<&'a Path>,
    lm: Option<&'a Path>,
}

#[derive(Serialize)]
struct EmittedFeatures {
    tokens: Vec<u32>,
    text: String,
    /// One row of final-layer frozen-LM features per generated token.
    features: Vec<Vec<f32>>,
}

fn sibling_dir(checkpoint: &Path) -> PathBuf {
    checkpoint.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn generate(req: &GenerateRequest) -> styf::Result<()> {
    let bundle = Checkpoint::load(req.checkpoint)?.to_generator()?;
    let max_len = bundle.config().max_len;
    if req.n_tokens >= max_len {
        return Err(styf::Error::Usage(format!("--n-tokens must be below the model length {max_len}")));
    }
    let context_text = match Path::new(req.context) {
        p if p.is_file() => std::fs::read_to_string(p)?,
        _ => req.context.to_string(),
    };
    let mut context = tokenize(&context_text);
    if context.is_empty() {
        return Err(styf::Error::Usage("--context is empty".into()));
    }
    // Keep the most recent tokens that still leave room for the continuation.
    let keep = max_len - req.n_tokens;
    if context.len() > keep {
        context.drain(..context.len() - keep);
    }
    let mut reference = tokenize(&std::fs::read_to_string(req.reference)?);
    if reference.is_empty() {
        return Err(styf::Error::Usage("--reference file is empty".into()));
    }
    reference.truncate(max_len);
    let generated = bundle.generate(&context, &reference, req.n_tokens, req.sampling, req.seed)?;
    let text = detokenize(&generated);
    println!("{text}");
    if let Some(path) = req.emit_features {
        let lm_path = prerequisite(req.lm, &sibling_dir(req.checkpoint), LM_FILE, "pretrain-lm")?;
        let lm = Checkpoint::load(&lm_path)?.to_lm()?;
        let rows = lm.feature_rows(&generated)?;
        let features = (0..generated.len()).map(|r| rows.row_slice(r).to_vec()).collect();
        let out = EmittedFeatures { tokens: generated, text, features };
        std::fs::write(path, serde_json::to_string(&out)? + "\n")?;
    }
    Ok(())
}

#[derive(Serialize)]
struct Deltas {
    fluency: f64,
    style_score: f64,
    diversity: f64,
    novelty: f64,
}

#[derive(Serialize)]
struct AblationReport {
    dropped: LossTerm,
    full: MetricsReport,
    ablated: MetricsReport,
    /// `ablated − full` for each headline metric.
    delta: Deltas,
}

fn evaluate(
    checkpoint: &Path,
    corpus: &Path,
    n_samples: usize,
    out: &Path,
    lm: Option<&Path>,
    drop_loss: Option<LossTerm>,
) -> styf::Result<()> {
    let dir = sibling_dir(checkpoint);
    let bundle = Checkpoint::load(checkpoint)?.to_generator()?;
    let lm_path = prerequisite(lm, &dir, LM_FILE, "pretrain-lm")?;
    let lm = Checkpoint::load(&lm_path)?.to_lm()?;
    let (_, splits) = load_corpus(corpus)?;
    if splits.test.is_empty() || splits.train.is_empty() {
        return Err(styf::Error::Config("corpus split is empty".into()));
    }
    let mut plan = DeskPlan::compact();
    plan.eval.n_samples = n_samples;
    plan.eval.reference_len = plan.eval.reference_len.min(bundle.config().max_len);
    if let Ok(v) = std::env::var("STYF_SEED") {
        plan.eval.seed = v
            .trim()
            .parse()
            .map_err(|_| styf::Error::Config(format!("STYF_SEED={v:?} is not an integer")))?;
    }
    let (classifiers, _, diversity, novelty) = fit_evaluators(&plan, &splits, &lm)?;
    let score = |b: &GeneratorBundle| {
        styf::metrics::evaluate(b, &lm, &classifiers, &splits.test, &plan.eval, diversity, novelty)
    };
    let full = score(&bundle)?.report;
    let csv_path = out.with_extension("csv");
    let Some(term) = drop_loss else {
        std::fs::write(out, serde_json::to_string_pretty(&full)? + "\n")?;
        std::fs::write(&csv_path, full.scatter_csv("full"))?;
        print_summary("full", &full);
        return Ok(());
    };

    let cfg_path = prerequisite(None, &dir, "train.config.toml", "train")?;
    let mut cfg = TrainConfig::load(&cfg_path)?.with_env_seed()?;
    // Snapshot paths are relative to wherever `train` ran; the sibling file is not.
    let cmp_path = prerequisite(None, &dir, COMPARATOR_FILE, "pretrain-comparator")?;
    let comparator = Checkpoint::load(&cmp_path)?.to_comparator()?;
    let mut weights = cfg.loss_weights();
    match term {
        LossTerm::Dist => weights.dist = 0.0,
        LossTerm::Style => weights.style = 0.0,
        LossTerm::Gan => weights.gan = 0.0,
    }
    cfg.weights = Some(weights);
    eprintln!("retraining without the {term:?} term");
    let run = train_generator(&splits, &lm, &comparator, &cfg)?;
    let ablated = score(&run.bundle)?.report;
    let delta = Deltas {
        fluency: ablated.fluency - full.fluency,
        style_score: ablated.style_score - full.style_score,
        diversity: ablated.diversity.value - full.diversity.value,
        novelty: ablated.novelty.value - full.novelty.value,
    };
    let label = format!("without-{}", format!("{term:?}").to_lowercase());
    let mut csv = full.scatter_csv("full");
    csv.push_str(ablated.scatter_csv(&label).split_once('\n').map_or("", |(_, rows)| rows));
    print_summary("full", &full);
    print_summary(&label, &ablated);
    std::fs::write(&csv_path, csv)?;
    let report = AblationReport { dropped: term, full, ablated, delta };
    std::fs::write(out, serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(())
}

fn print_summary(label: &str, r: &MetricsReport) {
    println!(
        "{label}: fluency {:.3}  style {:.3}  diversity {:.3} [{:.3}, {:.3}]  novelty {:.3} [{:.3}, {:.3}]",
        r.fluency,
        r.style_score,
        r.diversity.value,
        r.diversity.lower,
        r.diversity.upper,
        r.novelty.value,
        r.novelty.lower,
        r.novelty.upper
    );
}
