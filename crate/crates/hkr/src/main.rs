//! `hkr` — experiment driver for key-protected captioning models.
//!
//! One binary, seven subcommands: gen-data, keygen, train, eval, verify,
//! attack, repro. All randomness flows from explicit --seed flags; the
//! same flags always produce byte-identical artifacts. Every artifact
//! directory gets a manifest.json (timestamp kept out of it, in
//! wallclock.txt, so manifests stay reproducible).
//!
//! Exit codes: 0 success / verification pass, 2 verification fail,
//! 3 invalid flag combination, 4 missing input file, 5 dimension
//! mismatch, 1 any other error.

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use hkr::attacks::{self, EvalContext};
use hkr::capmetrics::{median_ms, Tokens};
use hkr::datagen::{
    load_corpus, make_trigger_set, save_corpus, synth_corpus, Corpus, GrammarConfig, ToySample,
};
use hkr::error::{HkrError, Result};
use hkr::evalrun::evaluate_model;
use hkr::keying::{generate_key, KeyVariant, SecretKey};
use hkr::seqmodel::{Checkpoint, DecoderModel, EmbedOp};
use hkr::training::{self, SignatureSpec, TrainingConfig};
use hkr::verification::{self, FunctionalityFloor};

const EXIT_VERIFY_FAIL: u8 = 2;
const EXIT_BAD_FLAGS: u8 = 3;
const EXIT_MISSING_FILE: u8 = 4;
const EXIT_DIM_MISMATCH: u8 = 5;
const EXIT_ERROR: u8 = 1;

#[derive(Parser)]
#[command(name = "hkr", version, about = "Key-based IP protection for captioning models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OpFlag {
    Add,
    Mul,
    None,
}

impl From<OpFlag> for EmbedOp {
    fn from(f: OpFlag) -> EmbedOp {
        match f {
            OpFlag::Add => EmbedOp::Add,
            OpFlag::Mul => EmbedOp::Mul,
            OpFlag::None => EmbedOp::None,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VariantFlag {
    Binary,
    Float,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SchemeFlag {
    V1Public,
    V1Private,
    V2,
    V3,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AttackKind {
    ForgedKey,
    SigToggle,
    Prune,
    KeyPrune,
    Finetune,
    FinetuneKeysig,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Figure {
    Fig5,
    Fig7,
    Fig9,
    Table3,
    Table4,
    Table6,
    Table7,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProfileFlag {
    Desk,
    Paper,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus plus a trigger set.
    GenData {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Corpus size (80/10/10 split downstream).
        #[arg(long, default_value_t = 625)]
        n: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        trigger_k: usize,
        #[arg(long, default_value_t = 1.0)]
        trigger_scale: f64,
    },
    /// Generate an owner key.
    Keygen {
        #[arg(long)]
        owner: String,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Key length (= hidden size N).
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, value_enum, default_value_t = VariantFlag::Binary)]
        variant: VariantFlag,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model on the train split of a corpus.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        key: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = OpFlag::None)]
        embed_op: OpFlag,
        /// Plant a signature drawn from this seed (omit for no sign loss).
        #[arg(long)]
        signature_seed: Option<u64>,
        #[arg(long, default_value_t = 0.1)]
        gamma: f64,
        #[arg(long, default_value_t = 1.0)]
        lambda_sign: f64,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, value_enum, default_value_t = ProfileFlag::Desk)]
        profile: ProfileFlag,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Trigger-set corpus file to interleave during training.
        #[arg(long)]
        trigger: Option<PathBuf>,
        /// Do not store the key fingerprint in the checkpoint
        /// (public-key deployment).
        #[arg(long, default_value_t = false)]
        public: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        key: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 3)]
        beam: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Run an ownership-verification protocol; exit 0 = pass, 2 = fail.
    Verify {
        #[arg(long, value_enum)]
        scheme: SchemeFlag,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        key: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Trigger-set corpus file (v3).
        #[arg(long)]
        trigger: Option<PathBuf>,
        /// Signature JSON file (v2); defaults to the one in the checkpoint.
        #[arg(long)]
        signature: Option<PathBuf>,
        #[arg(long, default_value_t = 0.05)]
        margin: f64,
        /// Recorded clean baseline score for the functionality floor (v1-public).
        #[arg(long, default_value_t = 0.0)]
        baseline_score: f64,
        #[arg(long, default_value_t = 0.1)]
        floor_tolerance: f64,
        /// Detection-rate pass threshold (v2).
        #[arg(long, default_value_t = 0.9)]
        threshold: f64,
        #[arg(long, default_value_t = 3)]
        beam: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Run an attack sweep and emit its CSV.
    Attack {
        #[arg(long, value_enum)]
        kind: AttackKind,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        key: Option<PathBuf>,
        #[arg(long)]
        signature: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        /// Sweep grid in percent, comma-separated.
        #[arg(long, default_value = "0,10,20,30,40,50,60,70,80,90,100")]
        xs: String,
        #[arg(long, default_value_t = 3)]
        trials: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        beam: usize,
        /// Fine-tuning epochs (finetune kinds only).
        #[arg(long, default_value_t = 2)]
        epochs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One-command recipes for the figure/table analogs.
    Repro {
        #[arg(long, value_enum)]
        figure: Figure,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Corpus size override.
        #[arg(long, default_value_t = 625)]
        n: usize,
        /// Training epochs override.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct RunManifest {
    tool_version: &'static str,
    command: String,
    args: Vec<String>,
    outputs: Vec<String>,
}

fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.unwrap_or_else(|| {
        std::env::var("HKR_OUT_DIR").map(PathBuf::from).unwrap_or_else(|_| PathBuf::from("."))
    })
}

fn write_manifest(dir: &Path, command: &str, outputs: &[String]) -> Result<()> {
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION"),
        command: command.to_string(),
        args: std::env::args().skip(1).collect(),
        outputs: outputs.to_vec(),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    // Wall clock lives outside the manifest so reruns stay byte-identical.
    std::fs::write(
        dir.join("wallclock.txt"),
        format!(
            "{}\n",
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0)
        ),
    )?;
    Ok(())
}

fn require_file(path: &Path) -> std::result::Result<(), CliError> {
    if !path.exists() {
        return Err(CliError {
            code: EXIT_MISSING_FILE,
            message: format!("missing input file: {}", path.display()),
        });
    }
    Ok(())
}

struct CliError {
    code: u8,
    message: String,
}

impl From<HkrError> for CliError {
    fn from(e: HkrError) -> CliError {
        let code = match &e {
            HkrError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING_FILE,
            HkrError::ShapeMismatch(_) => EXIT_DIM_MISMATCH,
            HkrError::Key(msg) if msg.contains("length") => EXIT_DIM_MISMATCH,
            _ => EXIT_ERROR,
        };
        CliError { code, message: e.to_string() }
    }
}

fn bad_flags(message: &str) -> CliError {
    CliError { code: EXIT_BAD_FLAGS, message: message.to_string() }
}

type CliResult = std::result::Result<u8, CliError>;

fn load_model_file(path: &Path) -> std::result::Result<(Checkpoint, DecoderModel), CliError> {
    require_file(path)?;
    let ckpt = Checkpoint::load(path)?;
    let model = ckpt.to_model()?;
    Ok((ckpt, model))
}

fn load_key_file(path: &Path) -> std::result::Result<SecretKey, CliError> {
    require_file(path)?;
    Ok(SecretKey::load(path)?)
}

fn load_corpus_file(path: &Path) -> std::result::Result<Corpus, CliError> {
    require_file(path)?;
    Ok(load_corpus(path)?)
}

fn load_signature(
    flag: Option<&PathBuf>,
    ckpt: &Checkpoint,
) -> std::result::Result<SignatureSpec, CliError> {
    match flag {
        Some(path) => {
            require_file(path)?;
            let text = std::fs::read_to_string(path).map_err(HkrError::from)?;
            Ok(serde_json::from_str(&text).map_err(HkrError::from)?)
        }
        None => match (&ckpt.signature, ckpt.gamma) {
            (Some(g), Some(gamma)) => Ok(SignatureSpec { g: g.clone(), gamma }),
            _ => Err(bad_flags("no --signature given and checkpoint carries none")),
        },
    }
}

fn split_corpus(corpus: &Corpus, seed: u64) -> (Vec<ToySample>, Vec<ToySample>, Vec<ToySample>) {
    let (tr, va, te) = corpus.split(seed);
    (corpus.gather(&tr), corpus.gather(&va), corpus.gather(&te))
}

fn cmd_gen_data(
    seed: u64,
    n: usize,
    out: Option<PathBuf>,
    trigger_k: usize,
    trigger_scale: f64,
) -> CliResult {
    let dir = out_dir(out);
    std::fs::create_dir_all(&dir).map_err(HkrError::from)?;
    let grammar = GrammarConfig::default();
    let corpus = synth_corpus(seed, n, &grammar)?;
    save_corpus(&corpus, &dir.join("corpus.jsonl"))?;
    let triggers = make_trigger_set(&corpus, trigger_k, trigger_scale, seed, &grammar)?;
    let trigger_corpus = Corpus {
        r: corpus.r,
        d: corpus.d,
        vocab: corpus.vocab.clone(),
        samples: triggers.iter().map(|t| t.to_sample()).collect(),
    };
    save_corpus(&trigger_corpus, &dir.join("trigger.jsonl"))?;
    write_manifest(&dir, "gen-data", &["corpus.jsonl".into(), "trigger.jsonl".into()])?;
    println!("wrote corpus ({} samples) and trigger set ({}) to {}", n, trigger_k, dir.display());
    Ok(0)
}

fn cmd_keygen(
    owner: String,
    seed: u64,
    n: usize,
    variant: VariantFlag,
    out: Option<PathBuf>,
) -> CliResult {
    let variant = match variant {
        VariantFlag::Binary => KeyVariant::Binary,
        VariantFlag::Float => KeyVariant::Float,
    };
    let key = generate_key(&owner, seed, n, variant)?;
    let path = out.unwrap_or_else(|| out_dir(None).join("key.json"));
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(HkrError::from)?;
        }
    }
    key.save(&path)?;
    println!("wrote {} key (n={}) to {}", owner, n, path.display());
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    corpus_path: PathBuf,
    key_path: Option<PathBuf>,
    embed_op: OpFlag,
    signature_seed: Option<u64>,
    gamma: f64,
    lambda_sign: f64,
    epochs: Option<usize>,
    profile: ProfileFlag,
    seed: u64,
    trigger: Option<PathBuf>,
    public: bool,
    out: Option<PathBuf>,
) -> CliResult {
    if key_path.is_some() && embed_op == OpFlag::None {
        return Err(bad_flags("--key makes no sense with --embed-op none"));
    }
    if key_path.is_none() && embed_op != OpFlag::None {
        return Err(bad_flags("--embed-op add/mul requires --key"));
    }
    let corpus = load_corpus_file(&corpus_path)?;
    let key = key_path.map(|p| load_key_file(&p)).transpose()?;
    let mut config = match profile {
        ProfileFlag::Desk => TrainingConfig::desk(seed),
        ProfileFlag::Paper => TrainingConfig::paper(seed),
    };
    config.gamma = gamma;
    config.lambda_sign = lambda_sign;
    if let Some(e) = epochs {
        config.epochs = e;
    }
    let sig = signature_seed.map(|s| SignatureSpec::random(s, config.hidden_n, gamma));
    let trigger_samples: Option<Vec<ToySample>> = trigger
        .map(|p| load_corpus_file(&p).map(|c| c.samples))
        .transpose()?;
    let (train_split, _, _) = split_corpus(&corpus, seed);
    let (model, logs) = training::train(
        &train_split,
        corpus.vocab.len(),
        (corpus.r, corpus.d),
        embed_op.into(),
        &config,
        key.as_ref(),
        sig.as_ref(),
        trigger_samples.as_deref(),
    )?;
    let dir = out_dir(out);
    std::fs::create_dir_all(&dir).map_err(HkrError::from)?;
    let ckpt = Checkpoint::from_model(
        &model,
        if public { None } else { key.as_ref() },
        sig.as_ref().map(|s| (s.g.as_slice(), s.gamma)),
    );
    ckpt.save(&dir.join("checkpoint.json"))?;
    std::fs::write(dir.join("train_log.csv"), training::logs_to_csv(&logs))
        .map_err(HkrError::from)?;
    let mut outputs = vec!["checkpoint.json".to_string(), "train_log.csv".to_string()];
    if let Some(sig) = &sig {
        std::fs::write(
            dir.join("signature.json"),
            serde_json::to_string_pretty(sig).map_err(HkrError::from)?,
        )
        .map_err(HkrError::from)?;
        outputs.push("signature.json".into());
    }
    write_manifest(&dir, "train", &outputs)?;
    if let Some(last) = logs.last() {
        println!(
            "trained {} epochs: loss {:.4}, token_acc {:.4}, sign_detect {:.4}",
            logs.len(),
            last.loss,
            last.token_acc,
            last.sign_detect
        );
    }
    println!("checkpoint hash {}", ckpt.content_hash());
    Ok(0)
}

fn cmd_eval(
    checkpoint: PathBuf,
    key: Option<PathBuf>,
    corpus_path: PathBuf,
    beam: usize,
    seed: u64,
) -> CliResult {
    let (_, model) = load_model_file(&checkpoint)?;
    let key = key.map(|p| load_key_file(&p)).transpose()?;
    let corpus = load_corpus_file(&corpus_path)?;
    let (train_split, _, test_split) = split_corpus(&corpus, seed);
    let train_captions: Vec<Tokens> = train_split.iter().map(|s| s.caption.clone()).collect();
    let summary = evaluate_model(&model, key.as_ref(), &test_split, &train_captions, beam, None)?;
    println!("{}", serde_json::to_string_pretty(&summary).map_err(HkrError::from)?);
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
fn cmd_verify(
    scheme: SchemeFlag,
    checkpoint: PathBuf,
    key: Option<PathBuf>,
    corpus: Option<PathBuf>,
    trigger: Option<PathBuf>,
    signature: Option<PathBuf>,
    margin: f64,
    baseline_score: f64,
    floor_tolerance: f64,
    threshold: f64,
    beam: usize,
    seed: u64,
) -> CliResult {
    let (ckpt, model) = load_model_file(&checkpoint)?;
    let key = key.map(|p| load_key_file(&p)).transpose()?;
    let report = match scheme {
        SchemeFlag::V1Public => {
            let key = key.ok_or_else(|| bad_flags("v1-public requires --key"))?;
            let corpus = corpus.ok_or_else(|| bad_flags("v1-public requires --corpus"))?;
            let corpus = load_corpus_file(&corpus)?;
            let (_, _, test_split) = split_corpus(&corpus, seed);
            let floor = FunctionalityFloor { baseline_score, tolerance: floor_tolerance };
            verification::verify_key_public(&model, &key, &test_split, margin, floor, seed)?
        }
        SchemeFlag::V1Private => {
            let key = key.ok_or_else(|| bad_flags("v1-private requires --key"))?;
            verification::verify_key_private(&ckpt, &key)?
        }
        SchemeFlag::V2 => {
            let corpus = corpus.ok_or_else(|| bad_flags("v2 requires --corpus"))?;
            let corpus = load_corpus_file(&corpus)?;
            let (_, _, test_split) = split_corpus(&corpus, seed);
            let sig = load_signature(signature.as_ref(), &ckpt)?;
            verification::verify_signature(&model, key.as_ref(), &test_split, &sig.g, threshold)?
        }
        SchemeFlag::V3 => {
            let trigger = trigger.ok_or_else(|| bad_flags("v3 requires --trigger"))?;
            let trigger_corpus = load_corpus_file(&trigger)?;
            let clean = corpus
                .map(|p| load_corpus_file(&p).map(|c| c.samples))
                .transpose()?
                .unwrap_or_default();
            verification::verify_trigger(
                &model,
                key.as_ref(),
                &trigger_corpus.samples,
                &clean,
                beam,
            )?
        }
    };
    println!("{}", report.to_json());
    Ok(if report.passed { 0 } else { EXIT_VERIFY_FAIL })
}

fn parse_xs(xs: &str) -> std::result::Result<Vec<f64>, CliError> {
    xs.split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<f64>, _>>()
        .map_err(|e| bad_flags(&format!("bad --xs grid: {e}")))
}

#[allow(clippy::too_many_arguments)]
fn cmd_attack(
    kind: AttackKind,
    checkpoint: PathBuf,
    key: Option<PathBuf>,
    signature: Option<PathBuf>,
    corpus_path: PathBuf,
    xs: String,
    trials: usize,
    seed: u64,
    beam: usize,
    epochs: usize,
    out: Option<PathBuf>,
) -> CliResult {
    let (ckpt, model) = load_model_file(&checkpoint)?;
    let key = key.map(|p| load_key_file(&p)).transpose()?;
    let corpus = load_corpus_file(&corpus_path)?;
    let (train_split, _, test_split) = split_corpus(&corpus, seed);
    let train_captions: Vec<Tokens> = train_split.iter().map(|s| s.caption.clone()).collect();
    let ctx = EvalContext { eval_samples: &test_split, train_captions: &train_captions, beam };
    let xs = parse_xs(&xs)?;
    let sig = match (&signature, &ckpt.signature) {
        (None, None) => None,
        _ => Some(load_signature(signature.as_ref(), &ckpt)?),
    };
    let report = match kind {
        AttackKind::ForgedKey => {
            let key = key.as_ref().ok_or_else(|| bad_flags("forged-key requires --key"))?;
            attacks::forged_key_sweep(&model, key, sig.as_ref(), &ctx, &xs, trials, seed)?
        }
        AttackKind::SigToggle => {
            let sig = sig.ok_or_else(|| bad_flags("sig-toggle requires a signature"))?;
            attacks::signature_toggle_sweep(&model, key.as_ref(), &sig, &ctx, &xs, trials, seed)?
        }
        AttackKind::Prune => {
            attacks::prune_sweep(&model, key.as_ref(), sig.as_ref(), &ctx, &xs, seed)?
        }
        AttackKind::KeyPrune => {
            let key = key.as_ref().ok_or_else(|| bad_flags("key-prune requires --key"))?;
            attacks::key_prune_sweep(&model, key, sig.as_ref(), &ctx, &xs, seed)?
        }
        AttackKind::Finetune | AttackKind::FinetuneKeysig => {
            let mut config = TrainingConfig::desk(seed ^ 0xF17E);
            config.epochs = epochs;
            config.hidden_n = model.dims.n;
            config.embed_e = model.dims.e;
            config.att_a = model.dims.a;
            if kind == AttackKind::Finetune {
                let (r, _) =
                    attacks::finetune_attack(&model, key.as_ref(), sig.as_ref(), &ctx, &train_split, &config)?;
                r
            } else {
                let sig = sig.ok_or_else(|| bad_flags("finetune-keysig requires a signature"))?;
                let attacker_key = key
                    .as_ref()
                    .map(|k| hkr::keying::forge_key(k, 1.0, seed ^ 0xA77))
                    .transpose()?;
                let attacker_sig = SignatureSpec::random(seed ^ 0x516, model.dims.n, sig.gamma);
                let (r, _) = attacks::finetune_key_sig_attack(
                    &model,
                    key.as_ref(),
                    &sig,
                    &ctx,
                    &train_split,
                    &config,
                    attacker_key.as_ref(),
                    &attacker_sig,
                )?;
                r
            }
        }
    };
    let dir = out_dir(out);
    std::fs::create_dir_all(&dir).map_err(HkrError::from)?;
    let file = format!("{}.csv", report.kind);
    std::fs::write(dir.join(&file), report.to_csv()).map_err(HkrError::from)?;
    write_manifest(&dir, "attack", &[file.clone()])?;
    println!("wrote {}", dir.join(&file).display());
    Ok(0)
}

/// Shared scaffolding for the repro recipes: corpus, key, signature, and
/// one protected training run per embed op.
struct ReproContext {
    corpus: Corpus,
    train_split: Vec<ToySample>,
    test_split: Vec<ToySample>,
    train_captions: Vec<Tokens>,
    key: SecretKey,
    sig: SignatureSpec,
    config: TrainingConfig,
}

impl ReproContext {
    fn new(seed: u64, n: usize, epochs: Option<usize>) -> Result<ReproContext> {
        let grammar = GrammarConfig::default();
        let corpus = synth_corpus(seed, n, &grammar)?;
        let (tr, _, te) = corpus.split(seed);
        let train_split = corpus.gather(&tr);
        let test_split = corpus.gather(&te);
        let train_captions = train_split.iter().map(|s| s.caption.clone()).collect();
        let mut config = TrainingConfig::desk(seed);
        if let Some(e) = epochs {
            config.epochs = e;
        }
        let key = generate_key("Alice", seed, config.hidden_n, KeyVariant::Binary)?;
        let sig = SignatureSpec::random(seed ^ 0x51, config.hidden_n, config.gamma);
        Ok(ReproContext { corpus, train_split, test_split, train_captions, key, sig, config })
    }

    fn train(&self, op: EmbedOp) -> Result<DecoderModel> {
        let key = if op == EmbedOp::None { None } else { Some(&self.key) };
        let sig = if op == EmbedOp::None { None } else { Some(&self.sig) };
        let (model, _) = training::train(
            &self.train_split,
            self.corpus.vocab.len(),
            (self.corpus.r, self.corpus.d),
            op,
            &self.config,
            key,
            sig,
            None,
        )?;
        Ok(model)
    }

    fn eval_ctx(&self) -> EvalContext<'_> {
        EvalContext {
            eval_samples: &self.test_split,
            train_captions: &self.train_captions,
            beam: 1,
        }
    }
}

fn cmd_repro(
    figure: Figure,
    seed: u64,
    n: usize,
    epochs: Option<usize>,
    out: Option<PathBuf>,
) -> CliResult {
    let dir = out_dir(out);
    std::fs::create_dir_all(&dir).map_err(HkrError::from)?;
    let ctx = ReproContext::new(seed, n, epochs)?;
    let grid: Vec<f64> = (0..=10).map(|i| 10.0 * i as f64).collect();
    let mut outputs: Vec<String> = Vec::new();
    let mut hashes: Vec<String> = Vec::new();
    let mut write_csv = |name: &str, body: String| -> Result<()> {
        std::fs::write(dir.join(name), body)?;
        outputs.push(name.to_string());
        Ok(())
    };
    match figure {
        Figure::Fig5 => {
            for (tag, op) in [("add", EmbedOp::Add), ("mul", EmbedOp::Mul)] {
                let model = ctx.train(op)?;
                let ckpt = Checkpoint::from_model(&model, Some(&ctx.key), Some((&ctx.sig.g, ctx.sig.gamma)));
                hashes.push(format!("{tag} {}", ckpt.content_hash()));
                let forged = attacks::forged_key_sweep(
                    &model, &ctx.key, Some(&ctx.sig), &ctx.eval_ctx(), &grid, 3, seed,
                )?;
                write_csv(&format!("fig5_{tag}_forged_key.csv"), forged.to_csv())?;
                let toggled = attacks::signature_toggle_sweep(
                    &model, Some(&ctx.key), &ctx.sig, &ctx.eval_ctx(), &grid, 3, seed,
                )?;
                write_csv(&format!("fig5_{tag}_sig_toggle.csv"), toggled.to_csv())?;
            }
            std::fs::write(dir.join("checkpoint_hashes.txt"), hashes.join("\n") + "\n")
                .map_err(HkrError::from)?;
            outputs.push("checkpoint_hashes.txt".into());
        }
        Figure::Fig7 => {
            let model = ctx.train(EmbedOp::Add)?;
            let report = attacks::prune_sweep(
                &model, Some(&ctx.key), Some(&ctx.sig), &ctx.eval_ctx(), &grid, seed,
            )?;
            write_csv("fig7_prune.csv", report.to_csv())?;
        }
        Figure::Fig9 => {
            let model = ctx.train(EmbedOp::Add)?;
            let report = attacks::key_prune_sweep(
                &model, &ctx.key, Some(&ctx.sig), &ctx.eval_ctx(), &grid, seed,
            )?;
            write_csv("fig9_key_prune.csv", report.to_csv())?;
        }
        Figure::Table3 => {
            let model = ctx.train(EmbedOp::Add)?;
            // Fine-tune on a fresh corpus (different generation seed).
            let grammar = GrammarConfig::default();
            let fresh = synth_corpus(seed ^ 0xDA7A, n, &grammar)?;
            let (tr, _, _) = fresh.split(seed);
            let mut config = ctx.config.clone();
            config.epochs = epochs.unwrap_or(2);
            let (report, _) = attacks::finetune_attack(
                &model,
                Some(&ctx.key),
                Some(&ctx.sig),
                &ctx.eval_ctx(),
                &fresh.gather(&tr),
                &config,
            )?;
            write_csv("table3_finetune.csv", report.to_csv())?;
        }
        Figure::Table4 => {
            let model = ctx.train(EmbedOp::Add)?;
            let summary = evaluate_model(
                &model,
                Some(&ctx.key),
                &ctx.test_split,
                &ctx.train_captions,
                3,
                None,
            )?;
            write_csv(
                "table4_uniqueness.csv",
                format!(
                    "uniqueness,avg_len,cider\n{},{},{}\n",
                    summary.uniqueness, summary.avg_len, summary.metrics.cider_d
                ),
            )?;
        }
        Figure::Table6 => {
            let model = ctx.train(EmbedOp::Add)?;
            let mut config = ctx.config.clone();
            config.epochs = epochs.unwrap_or(2);
            let attacker_key = hkr::keying::forge_key(&ctx.key, 1.0, seed ^ 0xA77)?;
            let attacker_sig =
                SignatureSpec::random(seed ^ 0x516, ctx.config.hidden_n, ctx.sig.gamma);
            let (report, _) = attacks::finetune_key_sig_attack(
                &model,
                Some(&ctx.key),
                &ctx.sig,
                &ctx.eval_ctx(),
                &ctx.train_split,
                &config,
                Some(&attacker_key),
                &attacker_sig,
            )?;
            write_csv("table6_finetune_keysig.csv", report.to_csv())?;
        }
        Figure::Table7 => {
            // Timing: one epoch of baseline vs. protected training.
            let mut config = ctx.config.clone();
            config.epochs = 1;
            let time_of = |op: EmbedOp| -> f64 {
                median_ms(3, || {
                    let key = if op == EmbedOp::None { None } else { Some(&ctx.key) };
                    let sig = if op == EmbedOp::None { None } else { Some(&ctx.sig) };
                    training::train(
                        &ctx.train_split,
                        ctx.corpus.vocab.len(),
                        (ctx.corpus.r, ctx.corpus.d),
                        op,
                        &config,
                        key,
                        sig,
                        None,
                    )
                    .expect("training run");
                })
            };
            let base = time_of(EmbedOp::None);
            let add = time_of(EmbedOp::Add);
            let mul = time_of(EmbedOp::Mul);
            write_csv(
                "table7_timing.csv",
                format!(
                    "variant,ms_per_epoch,overhead_pct\nbaseline,{},0\nadd,{},{}\nmul,{},{}\n",
                    base,
                    add,
                    100.0 * (add - base) / base,
                    mul,
                    100.0 * (mul - base) / base,
                ),
            )?;
        }
    }
    write_manifest(&dir, "repro", &outputs)?;
    println!("wrote {} artifacts to {}", outputs.len(), dir.display());
    Ok(0)
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::GenData { seed, n, out, trigger_k, trigger_scale } => {
            cmd_gen_data(seed, n, out, trigger_k, trigger_scale)
        }
        Command::Keygen { owner, seed, n, variant, out } => {
            cmd_keygen(owner, seed, n, variant, out)
        }
        Command::Train {
            corpus,
            key,
            embed_op,
            signature_seed,
            gamma,
            lambda_sign,
            epochs,
            profile,
            seed,
            trigger,
            public,
            out,
        } => cmd_train(
            corpus,
            key,
            embed_op,
            signature_seed,
            gamma,
            lambda_sign,
            epochs,
            profile,
            seed,
            trigger,
            public,
            out,
        ),
        Command::Eval { checkpoint, key, corpus, beam, seed } => {
            cmd_eval(checkpoint, key, corpus, beam, seed)
        }
        Command::Verify {
            scheme,
            checkpoint,
            key,
            corpus,
            trigger,
            signature,
            margin,
            baseline_score,
            floor_tolerance,
            threshold,
            beam,
            seed,
        } => cmd_verify(
            scheme,
            checkpoint,
            key,
            corpus,
            trigger,
            signature,
            margin,
            baseline_score,
            floor_tolerance,
            threshold,
            beam,
            seed,
        ),
        Command::Attack {
            kind,
            checkpoint,
            key,
            signature,
            corpus,
            xs,
            trials,
            seed,
            beam,
            epochs,
            out,
        } => cmd_attack(
            kind, checkpoint, key, signature, corpus, xs, trials, seed, beam, epochs, out,
        ),
        Command::Repro { figure, seed, n, epochs, out } => {
            cmd_repro(figure, seed, n, epochs, out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
