//! The `adk` command-line tool.
//!
//! Every command writes JSON: to `--out` when given, otherwise to stdout.
//! Errors go to stderr as `{"error": <kind>, "message": <text>}` with exit
//! code 2 for bad input and 3 for internal invariant failures.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::classifier::{classify_batch, PredictionRecord};
use crate::diagnostics::{
    diagnose, inference_cost, rank_weights, CostModelParams, CountConvention, Method, TextEncoding, TopDescriptions,
};
use crate::error::{AdkError, Result};
use crate::eval::{run_scenario, SplitManifest};
use crate::io::{
    bank_from_cache, encode, hand_from_cache, images_from_cache, knowledge_bank_to_json, load_descriptions,
    read_cache, read_json, read_knowledge_bank, synthesize_dataset, DescriptionManifest, SynthParams,
};
use crate::knowledge::{subset_descriptions, DescriptorBank, KnowledgeBank};
use crate::math::Temperature;
use crate::par::{self, Execution};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_INVARIANT: i32 = 3;

/// Environment variable capping the worker pool.
pub const THREADS_ENV: &str = "ADK_THREADS";

#[derive(Debug, Parser)]
#[command(name = "adk", version, about = "Descriptor-augmented zero-shot classification", allow_negative_numbers = true)]
pub struct Cli {
    #[command(flatten)]
    pub config: CliConfig,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Args)]
pub struct CliConfig {
    /// Softmax temperature (CLIP logit scale 100).
    #[arg(long, global = true, default_value_t = 0.01)]
    pub tau: f64,
    /// Keep only this many descriptions per class.
    #[arg(long, global = true)]
    pub m_keep: Option<usize>,
    /// Seed for every random choice. Without it, `--m-keep` keeps the first
    /// descriptions of each class.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Operation counting convention for `cost`.
    #[arg(long, global = true, value_enum, default_value_t = Convention::Mac)]
    pub convention: Convention,
    /// Output file (a directory for `synth`). Defaults to stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Convention {
    Mac,
    Flop2,
}

impl From<Convention> for CountConvention {
    fn from(c: Convention) -> Self {
        match c {
            Convention::Mac => CountConvention::Mac,
            Convention::Flop2 => CountConvention::Flop2,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic fixture into the `--out` directory.
    Synth(SynthArgs),
    /// Build a knowledge bank from description and handcrafted caches.
    BuildKnowledge(BuildArgs),
    /// Per-image predictions as JSON lines.
    Classify(ClassifyArgs),
    /// Accuracy report for a split manifest.
    Eval(EvalArgs),
    /// Similarity-map KL diagnostics.
    Diagnose(DiagnoseArgs),
    /// Per-image inference cost table.
    Cost(CostArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    #[arg(long, default_value_t = 20)]
    pub descriptors: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 32)]
    pub images_per_class: usize,
    #[arg(long, default_value_t = 0.9)]
    pub separation: f64,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// Shots recorded in the emitted split manifests.
    #[arg(long, default_value_t = 16)]
    pub shots: usize,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[arg(long)]
    pub desc: PathBuf,
    #[arg(long)]
    pub hand: PathBuf,
    /// Optional description manifest that must agree with the cache.
    #[arg(long)]
    pub descriptions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub kb: PathBuf,
    #[arg(long)]
    pub desc: PathBuf,
    /// Descriptions reported per predicted class.
    #[arg(long, default_value_t = 4)]
    pub top_k: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub kb: PathBuf,
    #[arg(long)]
    pub desc: PathBuf,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub kb: PathBuf,
    /// Needed only with `--m-keep`, to rebuild the compositional vectors.
    #[arg(long)]
    pub desc: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    #[arg(long)]
    pub classes: usize,
    #[arg(long, default_value_t = 20)]
    pub descriptions: usize,
    #[arg(long, default_value_t = 512)]
    pub dim: usize,
    #[arg(long)]
    pub image_gflops: f64,
    /// Text-encoder cost per prompt.
    #[arg(long)]
    pub text_gflops: f64,
    /// Charge offline prompt encoding, spread over this many images.
    #[arg(long)]
    pub amortize_text_over: Option<u64>,
}

/// Parses `std::env::args` and runs; returns the process exit code.
pub fn run() -> i32 {
    run_from(std::env::args_os())
}

pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            report_error(&e);
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &AdkError) -> i32 {
    match e {
        AdkError::Invariant(_) => EXIT_INVARIANT,
        _ => EXIT_INPUT,
    }
}

fn report_error(e: &AdkError) {
    let body = json!({ "error": e.kind(), "message": e.to_string() });
    eprintln!("{body}");
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| AdkError::Schema(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    par::init_threads(n);
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    configure_threads()?;
    let cfg = &cli.config;
    let tau = Temperature::new(cfg.tau)?;
    if cfg.m_keep == Some(0) {
        return Err(AdkError::Schema("--m-keep must be positive".into()));
    }
    match &cli.command {
        Command::Synth(a) => cmd_synth(cfg, a),
        Command::BuildKnowledge(a) => cmd_build_knowledge(cfg, tau, a),
        Command::Classify(a) => cmd_classify(cfg, tau, a),
        Command::Eval(a) => cmd_eval(cfg, tau, a),
        Command::Diagnose(a) => cmd_diagnose(cfg, tau, a),
        Command::Cost(a) => cmd_cost(cfg, a),
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(AdkError::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")))
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| AdkError::io(path, e)),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| AdkError::io("<stdout>", e))
        }
    }
}

fn pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable report") + "\n"
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<String> {
    std::fs::write(path, bytes).map_err(|e| AdkError::io(path, e))?;
    Ok(sha256_hex(bytes))
}

pub fn cmd_synth(cfg: &CliConfig, a: &SynthArgs) -> Result<()> {
    let dir = cfg
        .out
        .as_deref()
        .ok_or_else(|| AdkError::Schema("synth needs --out <directory>".into()))?;
    std::fs::create_dir_all(dir).map_err(|e| AdkError::io(dir, e))?;
    let seed = cfg.seed.unwrap_or(0);
    let ds = synthesize_dataset(SynthParams {
        classes: a.classes,
        descriptors: a.descriptors,
        dim: a.dim,
        images_per_class: a.images_per_class,
        separation: a.separation,
        noise: a.noise,
        seed,
    })?;

    let mut files = serde_json::Map::new();
    let mut put = |name: &str, bytes: Vec<u8>| -> Result<()> {
        let digest = write_bytes(&dir.join(name), &bytes)?;
        files.insert(name.to_string(), json!(digest));
        Ok(())
    };
    put("hand.adkf", encode(&ds.hand_cache()?)?)?;
    put("desc.adkf", encode(&ds.desc_cache())?)?;
    put("images.adkf", encode(&ds.image_cache())?)?;
    put("descriptions.json", ds.description_manifest().to_json().into_bytes())?;
    put("split_all_to_all.json", pretty(&ds.all_to_all_manifest(a.shots, seed)).into_bytes())?;
    if a.classes >= 2 {
        put("split_base_to_novel.json", pretty(&ds.base_to_novel_manifest(a.shots, seed)?).into_bytes())?;
    }
    let summary = json!({
        "params": ds.params,
        "classes": ds.bank.num_classes(),
        "descriptors": ds.bank.descriptors_per_class(),
        "dim": ds.bank.dim(),
        "images": ds.images.len(),
        "files": files,
    });
    emit(None, &pretty(&summary))
}

fn check_manifest_matches(manifest: &DescriptionManifest, bank: &DescriptorBank) -> Result<()> {
    let names: Vec<&str> = manifest.classes.iter().map(|(n, _)| n.as_str()).collect();
    let bank_names: Vec<&str> = bank.class_names().iter().map(String::as_str).collect();
    if names != bank_names {
        return Err(AdkError::Schema(format!(
            "description manifest classes {names:?} differ from cache classes {bank_names:?}"
        )));
    }
    for (c, (name, texts)) in manifest.classes.iter().enumerate() {
        if texts.as_slice() != bank.descriptions(c) {
            return Err(AdkError::Schema(format!(
                "descriptions of class {name:?} differ between manifest and cache"
            )));
        }
    }
    Ok(())
}

fn maybe_subset(cfg: &CliConfig, bank: DescriptorBank) -> Result<DescriptorBank> {
    match cfg.m_keep {
        Some(m) => subset_descriptions(&bank, m, cfg.seed),
        None => Ok(bank),
    }
}

pub fn cmd_build_knowledge(cfg: &CliConfig, tau: Temperature, a: &BuildArgs) -> Result<()> {
    require_file(&a.hand)?;
    require_file(&a.desc)?;
    let out = cfg
        .out
        .as_deref()
        .ok_or_else(|| AdkError::Schema("build-knowledge needs --out <kb file>".into()))?;
    let (names, hand) = hand_from_cache(&read_cache(&a.hand)?)?;
    let bank = bank_from_cache(&read_cache(&a.desc)?, &names, tau)?;
    if let Some(path) = &a.descriptions {
        check_manifest_matches(&load_descriptions(path)?, &bank)?;
    }
    let bank = maybe_subset(cfg, bank)?;
    let kb = KnowledgeBank::build(&names, hand, &bank)?;
    emit(Some(out), &knowledge_bank_to_json(&kb))?;
    let summary = json!({
        "classes": kb.num_classes(),
        "descriptors": kb.descriptors_per_class,
        "dim": kb.dim(),
        "checksum": kb.source_bank_checksum,
    });
    emit(None, &(summary.to_string() + "\n"))
}

/// Loads a knowledge bank and the descriptor bank it was built from. With
/// `--m-keep` the descriptor bank is subset and the compositional vectors
/// rebuilt from what remains.
fn load_model(cfg: &CliConfig, tau: Temperature, kb_path: &Path, desc_path: &Path) -> Result<(KnowledgeBank, DescriptorBank)> {
    require_file(kb_path)?;
    require_file(desc_path)?;
    let kb = read_knowledge_bank(kb_path)?;
    let bank = bank_from_cache(&read_cache(desc_path)?, &kb.class_names, tau)?;
    match cfg.m_keep {
        None => {
            kb.check_compatible(&bank)?;
            Ok((kb, bank))
        }
        Some(_) => {
            let bank = maybe_subset(cfg, bank)?;
            let kb = KnowledgeBank::build(&kb.class_names, kb.hand, &bank)?;
            Ok((kb, bank))
        }
    }
}

#[derive(Serialize)]
struct ClassifyLine<'a> {
    image: &'a str,
    label: Option<usize>,
    predicted: usize,
    predicted_class: &'a str,
    #[serde(flatten)]
    record: &'a PredictionRecord,
    top_descriptions: TopDescriptions,
}

pub fn cmd_classify(cfg: &CliConfig, tau: Temperature, a: &ClassifyArgs) -> Result<()> {
    require_file(&a.images)?;
    let (kb, bank) = load_model(cfg, tau, &a.kb, &a.desc)?;
    let images = images_from_cache(&read_cache(&a.images)?)?;
    let k = a.top_k.min(bank.descriptors_per_class());
    let results = classify_batch(&images.features, &kb, &bank, Execution::Parallel)?;
    let mut text = String::new();
    for (i, (record, attention)) in results.iter().enumerate() {
        let c = record.predicted;
        let line = ClassifyLine {
            image: &images.names[i],
            label: images.labels[i],
            predicted: c,
            predicted_class: &kb.class_names[c],
            record,
            top_descriptions: rank_weights(&attention.weights[c], bank.descriptions(c), c, k)?,
        };
        text.push_str(&serde_json::to_string(&line).expect("serializable record"));
        text.push('\n');
    }
    emit(cfg.out.as_deref(), &text)
}

pub fn cmd_eval(cfg: &CliConfig, tau: Temperature, a: &EvalArgs) -> Result<()> {
    require_file(&a.manifest)?;
    require_file(&a.images)?;
    let manifest: SplitManifest = read_json(&a.manifest)?;
    let (kb, bank) = load_model(cfg, tau, &a.kb, &a.desc)?;
    let images = images_from_cache(&read_cache(&a.images)?)?;
    let labels = images.require_labels(kb.num_classes())?;
    let report = run_scenario(&manifest, &images.features, &labels, &kb, &bank, Execution::Parallel)?;
    emit(cfg.out.as_deref(), &pretty(&report))
}

pub fn cmd_diagnose(cfg: &CliConfig, tau: Temperature, a: &DiagnoseArgs) -> Result<()> {
    require_file(&a.images)?;
    let kb = match (&a.desc, cfg.m_keep) {
        (Some(desc), _) => load_model(cfg, tau, &a.kb, desc)?.0,
        (None, None) => {
            require_file(&a.kb)?;
            read_knowledge_bank(&a.kb)?
        }
        (None, Some(_)) => return Err(AdkError::Schema("--m-keep with diagnose needs --desc".into())),
    };
    let images = images_from_cache(&read_cache(&a.images)?)?;
    let labels = images.require_labels(kb.num_classes())?;
    let report = diagnose(&images.features, &labels, &kb, Execution::Parallel)?;
    emit(cfg.out.as_deref(), &pretty(&report))
}

pub fn cmd_cost(cfg: &CliConfig, a: &CostArgs) -> Result<()> {
    let params = CostModelParams {
        image_encoder_gflops: a.image_gflops,
        text_encoder_gflops_per_prompt: a.text_gflops,
        dim: a.dim,
        classes: a.classes,
        descriptors: cfg.m_keep.unwrap_or(a.descriptions),
        convention: cfg.convention.into(),
        text_encoding: match a.amortize_text_over {
            Some(images) => TextEncoding::Amortized { images },
            None => TextEncoding::Excluded,
        },
    };
    let rows = Method::ALL
        .iter()
        .map(|&m| inference_cost(&params, m))
        .collect::<Result<Vec<_>>>()?;
    let (clip, cocoop, adk) = (rows[0].total, rows[1].total, rows[2].total);
    let report = json!({
        "params": params,
        "methods": rows,
        "adk_delta_gflops": adk - clip,
        "cocoop_over_adk": cocoop / adk,
    });
    emit(cfg.out.as_deref(), &pretty(&report))
}
