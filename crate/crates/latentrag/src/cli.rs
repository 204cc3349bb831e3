//! The experiment driver: one binary covering the whole desk-scale
//! pipeline — synthetic-world generation, reference-encoder pretraining and
//! indexing, teacher runs, joint training, evaluation, token sweeps,
//! offline analyses, and report merging.
//!
//! Commands communicate exclusively through files in a run directory, each
//! stamped with the hash of the canonicalized config that produced it.
//! Every command is deterministic given its config and seeds; the latency
//! sidecar is the only artifact allowed to differ between reruns.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::agent::{run_question, LoopConfig};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::decode::{decode_trajectory, LatentDecoder};
use crate::error::{Error, Result};
use crate::eval::{
    em_score, forward_pass_summary, max_length_ratio, retrieval_overlap,
    simulate_explicit_teacher, EvalReport, RetrievalOutcome,
};
use crate::formats::{
    parse_stamp, read_jsonl, render_latency_table, stamp, write_jsonl, TrajectoryDump,
    CORPUS_ARTIFACT, QA_ARTIFACT, TEACHER_ARTIFACT, TRAJECTORY_ARTIFACT,
};
use crate::infer::LlmSession;
use crate::kernels::Mat;
use crate::ledger::{ForwardPassLedger, Stage};
use crate::model::{LlmModel, ModelConfig};
use crate::params::ParamStore;
use crate::retrieval::{anisotropy_report, build_index, CorpusIndex, Document, Retriever};
use crate::synth::{
    generate, pretraining_pairs_for, retrieval_validation, teacher_run, PoolSizes, QAItem,
    TeacherTrajectory,
};
use crate::train::{
    build_training_example, pretrain_reference_encoder, render_loss_log,
    train as run_training, BypassHead, LossLogLine, PretrainConfig, TrainArm, TrainConfig,
};
use crate::vocab::Vocabulary;

// ── artifact names ─────────────────────────────────────────────────────────

const CORPUS_FILE: &str = "corpus.jsonl";
const QA_TRAIN_FILE: &str = "qa-train.jsonl";
const QA_TEST_FILE: &str = "qa-test.jsonl";
const VOCAB_FILE: &str = "vocab.json";
const TEACHER_FILE: &str = "teacher.jsonl";
const INDEX_FILE: &str = "index.bin";
const INIT_CHECKPOINT_FILE: &str = "init-checkpoint.bin";
const PRETRAIN_LOSS_FILE: &str = "pretrain-loss.tsv";
const CHECKPOINT_FILE: &str = "checkpoint.bin";
const EPOCH_DIR: &str = "checkpoints";
const LOSS_LOG_FILE: &str = "loss-log.tsv";
const EVAL_REPORT_FILE: &str = "eval-report.tsv";
const EVAL_SERIES_FILE: &str = "eval-series.tsv";
const EVAL_TRAJECTORIES_FILE: &str = "eval-trajectories.jsonl";
const EVAL_LATENCY_FILE: &str = "eval-latency.tsv";
const SWEEP_FILE: &str = "sweep-grid.tsv";
const ANISOTROPY_FILE: &str = "anisotropy.tsv";
const RATIO_FILE: &str = "ratio-stats.tsv";
const LENS_FILE: &str = "logit-lens.tsv";
const REPORT_FILE: &str = "report.tsv";

const VOCAB_ARTIFACT: &str = "vocab";
/// Nearest vocabulary tokens listed per latent token in the lens table.
const LENS_TOP_K: usize = 5;
/// Questions re-run for the logit-lens table.
const LENS_QUESTIONS: usize = 3;

// ── argument surface ───────────────────────────────────────────────────────

#[derive(Debug, Parser)]
#[command(
    name = "latentrag",
    version,
    about = "Latent agentic RAG on a synthetic world: generate, train, evaluate, analyze"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Config file of `key = value` lines; defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key, repeatable: `--set train.arm=cosine`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Directory all artifacts are read from and written to.
    #[arg(long, global = true, default_value = "run", value_name = "DIR")]
    dir: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic world: corpus, QA splits, and vocabulary.
    GenData {
        /// Keep only questions with this hop count.
        #[arg(long)]
        hops: Option<usize>,
    },
    /// Pretrain the reference encoder, embed the corpus, and save the
    /// initial checkpoint.
    BuildIndex,
    /// Run the rule-based teacher over the training questions.
    Teach,
    /// Jointly train the latent agent on the teacher trajectories.
    Train,
    /// Evaluate a checkpoint on the test questions.
    Eval {
        /// Decode latent thoughts and subqueries into text.
        #[arg(long)]
        decode: bool,
        /// Checkpoint to evaluate; defaults to `<dir>/checkpoint.bin`.
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate one cell per (m, n) slot-count pair.
    SweepTokens,
    /// Offline analyses of built artifacts.
    Analyze {
        #[command(subcommand)]
        target: AnalyzeTarget,
    },
    /// Merge evaluation reports into one side-by-side table.
    Report {
        /// `name=path` pairs of eval reports, in column order.
        #[arg(required = true, value_name = "NAME=PATH")]
        inputs: Vec<String>,
    },
}

#[derive(Debug, Subcommand)]
enum AnalyzeTarget {
    /// Embedding-geometry diagnostics of the corpus index.
    Index,
    /// Decoded-length ratios and logit-lens tables from dumped
    /// trajectories.
    Trajectories,
}

/// Entry point; returns the process exit code: 0 success, 1 usage,
/// 2 data/format error, 3 numeric failure.
pub fn run() -> i32 {
    run_from(std::env::args_os())
}

/// `run` over explicit arguments, for tests and embedding.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return i32::from(usage);
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for flag in &cli.common.set {
        cfg.apply_override(flag)?;
    }
    cfg.validate()?;
    let ws = Workspace::create(&cli.common.dir)?;
    match cli.command {
        Command::GenData { hops } => cmd_gen_data(&cfg, &ws, hops),
        Command::BuildIndex => cmd_build_index(&cfg, &ws),
        Command::Teach => cmd_teach(&cfg, &ws),
        Command::Train => cmd_train(&cfg, &ws),
        Command::Eval { decode, checkpoint } => {
            cmd_eval(&cfg, &ws, decode, checkpoint.as_deref())
        }
        Command::SweepTokens => cmd_sweep_tokens(&cfg, &ws),
        Command::Analyze { target } => match target {
            AnalyzeTarget::Index => cmd_analyze_index(&cfg, &ws),
            AnalyzeTarget::Trajectories => cmd_analyze_trajectories(&cfg, &ws),
        },
        Command::Report { inputs } => cmd_report(&cfg, &ws, &inputs),
    }
}

// ── workspace and shared assembly ──────────────────────────────────────────

/// The run directory all artifacts live in.
struct Workspace {
    dir: PathBuf,
}

impl Workspace {
    fn create(dir: &Path) -> Result<Workspace> {
        fs::create_dir_all(dir)?;
        Ok(Workspace { dir: dir.to_path_buf() })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

/// The model vocabulary: every word in the world plus the decoder's fixed
/// prompt words.
fn build_vocab(cfg: &RunConfig, world: &crate::synth::SynthWorld) -> Result<Vocabulary> {
    let words: Vec<String> = world
        .vocabulary_words()
        .into_iter()
        .chain(crate::decode::prompt_words().into_iter().map(str::to_string))
        .collect();
    Vocabulary::build(cfg.get_usize("latent.m")?, cfg.get_usize("latent.n")?, &words)
}

fn write_vocab(ws: &Workspace, config_hash: &str, vocab: &Vocabulary) -> Result<()> {
    let value: serde_json::Value = serde_json::from_str(&vocab.to_json())
        .expect("vocabulary serialization is well-formed JSON");
    write_jsonl(&ws.path(VOCAB_FILE), VOCAB_ARTIFACT, config_hash, &[value])
}

/// Load the vocabulary and check its slot counts against the config —
/// token ids shift with m and n, so a mismatch silently corrupts
/// everything downstream.
fn load_vocab(ws: &Workspace, cfg: &RunConfig) -> Result<Vocabulary> {
    let file = read_jsonl::<serde_json::Value>(&ws.path(VOCAB_FILE), VOCAB_ARTIFACT)?;
    let record = file
        .items
        .first()
        .ok_or_else(|| Error::Format(format!("{VOCAB_FILE} has no vocabulary record")))?;
    let vocab = Vocabulary::from_json(&record.to_string())?;
    let (m, n) = (cfg.get_usize("latent.m")?, cfg.get_usize("latent.n")?);
    if vocab.think_slots().len() != m || vocab.query_slots().len() != n {
        return Err(Error::Data(format!(
            "vocabulary was built with m={} n={} but the config says m={m} n={n} — \
             regenerate the data",
            vocab.think_slots().len(),
            vocab.query_slots().len()
        )));
    }
    Ok(vocab)
}

/// The language model, retriever, and decoder registered in one store —
/// everything the pipeline commands share.
struct ModelStack {
    model: LlmModel,
    retriever: Retriever,
    decoder: LatentDecoder,
    bypass: Option<BypassHead>,
    store: ParamStore,
}

/// Register all components, optionally load a checkpoint over them, and
/// optionally add the bypass head (registered after loading because
/// checkpoints from other arms do not carry it).
fn build_stack(
    cfg: &RunConfig,
    vocab: &Vocabulary,
    checkpoint: Option<&Path>,
    with_bypass: bool,
) -> Result<ModelStack> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.get_u64("seed")?);
    let model_cfg = ModelConfig::from_run(cfg, vocab.len())?;
    let model = LlmModel::new(model_cfg, &mut store, &mut rng)?;
    let retriever = Retriever::new(cfg, &model.cfg, vocab.len(), &mut store, &mut rng)?;
    let decoder = LatentDecoder::new(cfg, &model.cfg, &mut store, &mut rng)?;
    if let Some(path) = checkpoint {
        store.load_checkpoint(&Checkpoint::load(path)?)?;
    }
    let bypass = if with_bypass {
        let d_ret = cfg.get_usize("retrieval.d_ret")?;
        Some(BypassHead::new(model.cfg.d_model, d_ret, &mut store, &mut rng)?)
    } else {
        None
    };
    Ok(ModelStack { model, retriever, decoder, bypass, store })
}

/// The index is only valid under the encoder that embedded it.
fn verify_index_encoder(index: &CorpusIndex, stack: &ModelStack) -> Result<()> {
    let current = stack.retriever.reference.weights_hash(&stack.store);
    if index.encoder_hash != current {
        return Err(Error::Data(format!(
            "index was embedded by encoder {} but the loaded reference encoder is {} — \
             rebuild the index",
            &index.encoder_hash[..8],
            &current[..8]
        )));
    }
    Ok(())
}

// ── gen-data ───────────────────────────────────────────────────────────────

fn cmd_gen_data(cfg: &RunConfig, ws: &Workspace, hops: Option<usize>) -> Result<()> {
    let sizes = PoolSizes::from_run(cfg)?;
    let world = generate(&sizes, cfg.get_u64("seed")?)?;
    // The vocabulary always covers the full world so that token ids do not
    // depend on the hop filter.
    let vocab = build_vocab(cfg, &world)?;
    let keep = |items: &[QAItem]| -> Vec<QAItem> {
        match hops {
            Some(h) => items.iter().filter(|q| q.hops == h).cloned().collect(),
            None => items.to_vec(),
        }
    };
    let (train, test) = (keep(&world.train), keep(&world.test));
    if train.is_empty() || test.is_empty() {
        return Err(Error::Data(format!(
            "no questions left after filtering to {} hops",
            hops.unwrap_or_default()
        )));
    }
    let hash = cfg.hash();
    write_jsonl(&ws.path(CORPUS_FILE), CORPUS_ARTIFACT, &hash, &world.corpus)?;
    write_jsonl(&ws.path(QA_TRAIN_FILE), QA_ARTIFACT, &hash, &train)?;
    write_jsonl(&ws.path(QA_TEST_FILE), QA_ARTIFACT, &hash, &test)?;
    write_vocab(ws, &hash, &vocab)?;
    // Self-check: everything just written must parse back under its schema.
    read_jsonl::<Document>(&ws.path(CORPUS_FILE), CORPUS_ARTIFACT)?;
    read_jsonl::<QAItem>(&ws.path(QA_TRAIN_FILE), QA_ARTIFACT)?;
    read_jsonl::<QAItem>(&ws.path(QA_TEST_FILE), QA_ARTIFACT)?;
    load_vocab(ws, cfg)?;
    println!(
        "wrote {} documents, {} train / {} test questions, {} vocabulary tokens  [{hash}]",
        world.corpus.len(),
        train.len(),
        test.len(),
        vocab.len()
    );
    Ok(())
}

// ── build-index ────────────────────────────────────────────────────────────

fn cmd_build_index(cfg: &RunConfig, ws: &Workspace) -> Result<()> {
    let corpus = read_jsonl::<Document>(&ws.path(CORPUS_FILE), CORPUS_ARTIFACT)?.items;
    let train = read_jsonl::<QAItem>(&ws.path(QA_TRAIN_FILE), QA_ARTIFACT)?.items;
    let test = read_jsonl::<QAItem>(&ws.path(QA_TEST_FILE), QA_ARTIFACT)?.items;
    let vocab = load_vocab(ws, cfg)?;
    let mut stack = build_stack(cfg, &vocab, None, false)?;

    let pairs = pretraining_pairs_for(&[&train, &test]);
    let pcfg = PretrainConfig::from_run(cfg)?;
    let losses = pretrain_reference_encoder(
        &stack.retriever,
        &mut stack.store,
        &vocab,
        &corpus,
        &pairs,
        &pcfg,
    )?;
    stack.retriever.sync_reference(&mut stack.store)?;
    let index = build_index(&corpus, &stack.retriever, &stack.store, &vocab)?;

    let hash = cfg.hash();
    index.save(&ws.path(INDEX_FILE))?;
    stack.store.to_checkpoint(&hash).save(&ws.path(INIT_CHECKPOINT_FILE))?;
    let mut tsv = stamp("pretrain-loss", &hash);
    tsv.push_str("step\tloss\n");
    for (step, loss) in losses.iter().enumerate() {
        tsv.push_str(&format!("{step}\t{loss:.6}\n"));
    }
    fs::write(ws.path(PRETRAIN_LOSS_FILE), tsv)?;

    let validation = retrieval_validation(&train, &index, stack.retriever.top_k, |s| {
        stack.retriever.embed_reference_subquery(&stack.store, &vocab, s)
    })?;
    println!(
        "indexed {} documents (encoder {}), pretraining loss {:.4} → {:.4}, \
         validation@{} {:.3}  [{hash}]",
        index.len(),
        &index.encoder_hash[..8],
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN),
        stack.retriever.top_k,
        validation
    );
    Ok(())
}

// ── teach ──────────────────────────────────────────────────────────────────

fn cmd_teach(cfg: &RunConfig, ws: &Workspace) -> Result<()> {
    let train = read_jsonl::<QAItem>(&ws.path(QA_TRAIN_FILE), QA_ARTIFACT)?.items;
    if train.is_empty() {
        return Err(Error::Data(format!("{QA_TRAIN_FILE} has no questions")));
    }
    let vocab = load_vocab(ws, cfg)?;
    let index = CorpusIndex::load(&ws.path(INDEX_FILE))?;
    let stack = build_stack(cfg, &vocab, Some(&ws.path(INIT_CHECKPOINT_FILE)), false)?;
    verify_index_encoder(&index, &stack)?;

    let mut trajectories = Vec::with_capacity(train.len());
    for item in &train {
        trajectories.push(teacher_run(item, &index, stack.retriever.top_k, |s| {
            stack.retriever.embed_reference_subquery(&stack.store, &vocab, s)
        })?);
    }
    let correct = trajectories.iter().filter(|t| t.correct).count();
    let hash = cfg.hash();
    write_jsonl(&ws.path(TEACHER_FILE), TEACHER_ARTIFACT, &hash, &trajectories)?;
    println!(
        "taught {} trajectories, {} correct (teacher em {:.4})  [{hash}]",
        trajectories.len(),
        correct,
        correct as f64 / trajectories.len() as f64
    );
    Ok(())
}

// ── train ──────────────────────────────────────────────────────────────────

fn cmd_train(cfg: &RunConfig, ws: &Workspace) -> Result<()> {
    let vocab = load_vocab(ws, cfg)?;
    let index = CorpusIndex::load(&ws.path(INDEX_FILE))?;
    let teacher =
        read_jsonl::<TeacherTrajectory>(&ws.path(TEACHER_FILE), TEACHER_ARTIFACT)?.items;
    let tcfg = TrainConfig::from_run(cfg)?;
    let with_bypass = matches!(tcfg.arm, TrainArm::NoRetriever);
    let mut stack =
        build_stack(cfg, &vocab, Some(&ws.path(INIT_CHECKPOINT_FILE)), with_bypass)?;
    verify_index_encoder(&index, &stack)?;

    let mut examples = Vec::new();
    let (mut incorrect, mut overlong) = (0usize, 0usize);
    for trajectory in &teacher {
        if !trajectory.correct {
            incorrect += 1;
            continue;
        }
        match build_training_example(
            trajectory,
            &stack.retriever,
            &index,
            &stack.store,
            &vocab,
            tcfg.max_seq,
        ) {
            Ok(example) => examples.push(example),
            Err(Error::Capacity(_)) => overlong += 1,
            Err(e) => return Err(e),
        }
    }
    if examples.is_empty() {
        return Err(Error::Data(format!(
            "no usable training examples ({incorrect} incorrect, {overlong} over \
             {} tokens)",
            tcfg.max_seq
        )));
    }
    if incorrect + overlong > 0 {
        eprintln!("note: skipped {incorrect} incorrect and {overlong} overlong trajectories");
    }

    let hash = cfg.hash();
    let epoch_dir = ws.path(EPOCH_DIR);
    fs::create_dir_all(&epoch_dir)?;
    println!(
        "training {} examples, arm {}, {} epochs  [{hash}]",
        examples.len(),
        tcfg.arm.as_str(),
        tcfg.epochs
    );
    let log = run_training(
        &stack.model,
        &mut stack.store,
        &stack.retriever,
        &stack.decoder,
        stack.bypass.as_ref(),
        &index,
        &vocab,
        &examples,
        &tcfg,
        |epoch, store| {
            store.to_checkpoint(&hash).save(&epoch_dir.join(format!("epoch-{epoch}.bin")))
        },
    )?;

    let checkpoint = stack.store.to_checkpoint(&hash);
    checkpoint.save(&ws.path(CHECKPOINT_FILE))?;
    let log_every = cfg.get_usize("train.log_every")?.max(1);
    let kept: Vec<LossLogLine> = log
        .iter()
        .enumerate()
        .filter(|(i, line)| line.step % log_every == 0 || *i + 1 == log.len())
        .map(|(_, line)| *line)
        .collect();
    let mut out = stamp("loss-log", &hash);
    out.push_str(&format!("# arm {}\n", tcfg.arm.as_str()));
    out.push_str(&render_loss_log(&kept));
    fs::write(ws.path(LOSS_LOG_FILE), out)?;
    println!(
        "loss {:.4} → {:.4} over {} steps; checkpoint hash {}",
        log.first().map(|l| l.total).unwrap_or(f64::NAN),
        log.last().map(|l| l.total).unwrap_or(f64::NAN),
        log.len(),
        checkpoint.content_hash()
    );
    Ok(())
}

// ── eval ───────────────────────────────────────────────────────────────────

/// Everything the per-question workers share.
struct EvalContext<'a> {
    stack: &'a ModelStack,
    index: &'a CorpusIndex,
    vocab: &'a Vocabulary,
    loop_cfg: &'a LoopConfig,
    decode: bool,
}

/// One question's complete evaluation record.
struct QuestionResult {
    id: String,
    answer: String,
    golds: Vec<String>,
    ledger: ForwardPassLedger,
    step_doc_texts: Vec<Vec<String>>,
    our_ids: BTreeSet<String>,
    teacher_ids: BTreeSet<String>,
    explicit_passes: Option<usize>,
    decoded_lengths: Vec<usize>,
    dump: TrajectoryDump,
}

fn evaluate_question(ctx: &EvalContext, item: &QAItem) -> Result<QuestionResult> {
    let stack = ctx.stack;
    let trajectory = run_question(
        &item.question,
        &stack.model,
        &stack.store,
        &stack.retriever,
        ctx.index,
        ctx.vocab,
        ctx.loop_cfg,
    )?;
    let mut ledger = trajectory.ledger.clone();
    let mut decoded_lengths = Vec::new();
    let decoded = if ctx.decode {
        let steps = decode_trajectory(
            &stack.model,
            &stack.store,
            &stack.decoder,
            ctx.vocab,
            &mut ledger,
            &trajectory,
        )?;
        for step in &steps {
            decoded_lengths.push(step.thought.tokens.len());
            if let Some(subquery) = &step.subquery {
                decoded_lengths.push(subquery.tokens.len());
            }
        }
        Some(steps)
    } else {
        None
    };
    let mut dump = TrajectoryDump::from_latent(&item.id, &trajectory, decoded.as_deref())?;
    dump.ledger = ledger.clone();

    // The teacher run on the same question anchors the overlap metric and
    // the explicit-mode cost simulation.
    let teacher = teacher_run(item, ctx.index, stack.retriever.top_k, |s| {
        stack.retriever.embed_reference_subquery(&stack.store, ctx.vocab, s)
    })?;
    let teacher_ids = teacher
        .steps
        .iter()
        .filter_map(|s| s.retrieved.as_ref())
        .flat_map(|docs| docs.iter().map(|d| d.id.clone()))
        .collect();
    let explicit_passes = if teacher.correct {
        let replay = simulate_explicit_teacher(&stack.model, &stack.store, ctx.vocab, &teacher)?;
        Some(forward_pass_summary(&replay).total_passes)
    } else {
        None
    };
    Ok(QuestionResult {
        id: item.id.clone(),
        answer: trajectory.answer.clone().unwrap_or_default(),
        golds: item.answers.clone(),
        step_doc_texts: trajectory.retrieved_texts(),
        our_ids: trajectory.retrieved_ids(),
        teacher_ids,
        explicit_passes,
        decoded_lengths,
        dump,
        ledger,
    })
}

/// Evaluate all questions across worker threads, preserving input order.
fn run_parallel(ctx: &EvalContext, items: &[QAItem]) -> Result<Vec<QuestionResult>> {
    let slots: Vec<OnceLock<Result<QuestionResult>>> =
        items.iter().map(|_| OnceLock::new()).collect();
    let next = AtomicUsize::new(0);
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .clamp(1, items.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let _ = slots[i].set(evaluate_question(ctx, &items[i]));
            });
        }
    });
    let mut out = Vec::with_capacity(items.len());
    for slot in slots {
        out.push(slot.into_inner().expect("every question index is claimed")?);
    }
    Ok(out)
}

/// Remove lines mentioning the latent-decode stage unless decoding ran.
fn strip_latent_decode(text: &str, keep: bool) -> String {
    if keep {
        return text.to_string();
    }
    text.lines().filter(|l| !l.contains("latent-decode")).map(|l| format!("{l}\n")).collect()
}

fn fmt_opt(value: Option<f64>) -> String {
    value.map_or_else(|| "absent".to_string(), |v| format!("{v:.4}"))
}

fn cmd_eval(
    cfg: &RunConfig,
    ws: &Workspace,
    decode_flag: bool,
    checkpoint: Option<&Path>,
) -> Result<()> {
    let vocab = load_vocab(ws, cfg)?;
    let index = CorpusIndex::load(&ws.path(INDEX_FILE))?;
    let default_checkpoint = ws.path(CHECKPOINT_FILE);
    let stack = build_stack(
        cfg,
        &vocab,
        Some(checkpoint.unwrap_or(default_checkpoint.as_path())),
        false,
    )?;
    verify_index_encoder(&index, &stack)?;
    let test = read_jsonl::<QAItem>(&ws.path(QA_TEST_FILE), QA_ARTIFACT)?.items;
    if test.is_empty() {
        return Err(Error::Data(format!("{QA_TEST_FILE} has no questions")));
    }
    let cap = cfg.get_usize("eval.max_questions")?;
    let items: Vec<QAItem> =
        if cap == 0 { test } else { test.into_iter().take(cap).collect() };
    let decode = decode_flag || cfg.get_bool("eval.decode")?;
    let loop_cfg = LoopConfig::from_run(cfg)?;

    let ctx = EvalContext { stack: &stack, index: &index, vocab: &vocab, loop_cfg: &loop_cfg, decode };
    let results = run_parallel(&ctx, &items)?;

    let answers: Vec<(String, Vec<String>)> =
        results.iter().map(|r| (r.answer.clone(), r.golds.clone())).collect();
    let ledgers: Vec<&ForwardPassLedger> = results.iter().map(|r| &r.ledger).collect();
    let outcomes: Vec<RetrievalOutcome> = results
        .iter()
        .map(|r| RetrievalOutcome {
            step_doc_texts: r.step_doc_texts.clone(),
            gold_answers: r.golds.clone(),
        })
        .collect();
    let ours: BTreeMap<String, BTreeSet<String>> =
        results.iter().map(|r| (r.id.clone(), r.our_ids.clone())).collect();
    let reference: BTreeMap<String, BTreeSet<String>> =
        results.iter().map(|r| (r.id.clone(), r.teacher_ids.clone())).collect();
    let overlap = Some(retrieval_overlap(&ours, &reference)?);
    let flat_lengths: Vec<usize> =
        results.iter().flat_map(|r| r.decoded_lengths.iter().copied()).collect();
    let lengths = if decode && !flat_lengths.is_empty() {
        Some(flat_lengths.as_slice())
    } else {
        None
    };
    let report = EvalReport::compute(&answers, &ledgers, &outcomes, overlap, lengths)?;

    // The report file: deterministic rows only — wall-clock means live in
    // the latency sidecar and on stdout.
    let hash = cfg.hash();
    let mut body: String = report
        .to_tsv()
        .lines()
        .filter(|line| !line.starts_with("latency_ms"))
        .filter(|line| decode || !line.contains("latent-decode"))
        .map(|line| format!("{line}\n"))
        .collect();
    for (stage, passes) in &report.stage_mean_passes {
        if !decode && *stage == Stage::LatentDecode {
            continue;
        }
        body.push_str(&format!(
            "passes_percent.{}\t{:.2}\n",
            stage.name(),
            100.0 * passes / report.mean_passes
        ));
    }
    let explicit: Vec<usize> = results.iter().filter_map(|r| r.explicit_passes).collect();
    if explicit.is_empty() {
        body.push_str("explicit_mean_passes\tabsent\n");
    } else {
        body.push_str(&format!(
            "explicit_mean_passes\t{:.2}\n",
            explicit.iter().sum::<usize>() as f64 / explicit.len() as f64
        ));
    }
    body.push_str(if decode { "decode\ton\n" } else { "decode\toff\n" });
    fs::write(ws.path(EVAL_REPORT_FILE), stamp("eval-report", &hash) + &body)?;

    let method = if decode { "latent+decode" } else { "latent" };
    let mut series = stamp("eval-series", &hash);
    series.push_str("stage\tmethod\tmean_passes\n");
    series.push_str(&strip_latent_decode(&report.series(method), decode));
    fs::write(ws.path(EVAL_SERIES_FILE), series)?;

    let entries: Vec<(String, &ForwardPassLedger)> =
        results.iter().map(|r| (r.id.clone(), &r.ledger)).collect();
    let latency = strip_latent_decode(&render_latency_table(&hash, &entries), decode);
    fs::write(ws.path(EVAL_LATENCY_FILE), latency)?;

    println!(
        "evaluated {} questions (decode {})  [{hash}]",
        results.len(),
        if decode { "on" } else { "off" }
    );
    println!(
        "em {:.4}, mean passes {:.2}, retrieval success {}, overlap {}",
        report.em,
        report.mean_passes,
        fmt_opt(report.retrieval_success),
        fmt_opt(report.retrieval_overlap)
    );
    if let Some(latency) = &report.latency {
        let shares: Vec<String> = latency
            .stage_percent
            .iter()
            .filter(|(stage, _)| decode || *stage != Stage::LatentDecode)
            .map(|(stage, pct)| format!("{} {pct:.1}%", stage.name()))
            .collect();
        println!("latency {:.2} ms/question ({})", latency.mean_total_ms, shares.join(", "));
    }

    let dumps: Vec<TrajectoryDump> = results.into_iter().map(|r| r.dump).collect();
    write_jsonl(&ws.path(EVAL_TRAJECTORIES_FILE), TRAJECTORY_ARTIFACT, &hash, &dumps)?;
    println!(
        "wrote {EVAL_REPORT_FILE}, {EVAL_SERIES_FILE}, {EVAL_TRAJECTORIES_FILE}, \
         {EVAL_LATENCY_FILE}"
    );
    Ok(())
}

// ── sweep-tokens ───────────────────────────────────────────────────────────

struct CellOutcome {
    questions: usize,
    em: f64,
    teacher_em: f64,
    mean_passes: f64,
}

/// One self-contained pipeline — world, pretraining, teacher, training,
/// evaluation — entirely in memory, under the cell's own config and seed.
fn run_cell(cfg: &RunConfig, train_cap: usize) -> Result<CellOutcome> {
    let sizes = PoolSizes::from_run(cfg)?;
    let world = generate(&sizes, cfg.get_u64("seed")?)?;
    let vocab = build_vocab(cfg, &world)?;
    let tcfg = TrainConfig::from_run(cfg)?;
    let mut stack =
        build_stack(cfg, &vocab, None, matches!(tcfg.arm, TrainArm::NoRetriever))?;
    let pairs = pretraining_pairs_for(&[&world.train, &world.test]);
    pretrain_reference_encoder(
        &stack.retriever,
        &mut stack.store,
        &vocab,
        &world.corpus,
        &pairs,
        &PretrainConfig::from_run(cfg)?,
    )?;
    stack.retriever.sync_reference(&mut stack.store)?;
    let index = build_index(&world.corpus, &stack.retriever, &stack.store, &vocab)?;

    let cap = train_cap.clamp(1, world.train.len());
    let mut teacher = Vec::with_capacity(cap);
    for item in &world.train[..cap] {
        teacher.push(teacher_run(item, &index, stack.retriever.top_k, |s| {
            stack.retriever.embed_reference_subquery(&stack.store, &vocab, s)
        })?);
    }
    let teacher_em = teacher.iter().filter(|t| t.correct).count() as f64 / teacher.len() as f64;
    let mut examples = Vec::new();
    for trajectory in teacher.iter().filter(|t| t.correct) {
        match build_training_example(
            trajectory,
            &stack.retriever,
            &index,
            &stack.store,
            &vocab,
            tcfg.max_seq,
        ) {
            Ok(example) => examples.push(example),
            Err(Error::Capacity(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if examples.is_empty() {
        return Err(Error::Data("sweep cell produced no usable training examples".into()));
    }
    run_training(
        &stack.model,
        &mut stack.store,
        &stack.retriever,
        &stack.decoder,
        stack.bypass.as_ref(),
        &index,
        &vocab,
        &examples,
        &tcfg,
        |_, _| Ok(()),
    )?;

    let cap_q = cfg.get_usize("eval.max_questions")?;
    let eval_items: &[QAItem] = if cap_q == 0 {
        &world.test
    } else {
        &world.test[..cap_q.min(world.test.len())]
    };
    let loop_cfg = LoopConfig::from_run(cfg)?;
    let mut em_sum = 0u32;
    let mut passes = 0usize;
    for item in eval_items {
        let trajectory = run_question(
            &item.question,
            &stack.model,
            &stack.store,
            &stack.retriever,
            &index,
            &vocab,
            &loop_cfg,
        )?;
        em_sum += em_score(&trajectory.answer.unwrap_or_default(), &item.answers)?;
        passes += forward_pass_summary(&trajectory.ledger).total_passes;
    }
    Ok(CellOutcome {
        questions: eval_items.len(),
        em: f64::from(em_sum) / eval_items.len() as f64,
        teacher_em,
        mean_passes: passes as f64 / eval_items.len() as f64,
    })
}

fn cmd_sweep_tokens(cfg: &RunConfig, ws: &Workspace) -> Result<()> {
    let m_values = cfg.get_usize_list("sweep.m_values")?;
    let n_values = cfg.get_usize_list("sweep.n_values")?;
    if m_values.is_empty() || n_values.is_empty() {
        return Err(Error::Usage("sweep needs at least one m and one n value".into()));
    }
    let base_seed = cfg.get_u64("seed")?;
    let epochs = cfg.get_usize("sweep.epochs")?;
    let train_cap = cfg.get_usize("sweep.train_questions")?;
    let hash = cfg.hash();
    let mut out = stamp("sweep-grid", &hash);
    out.push_str("m\tn\tquestions\tem\tteacher_em\tmean_passes\n");
    for &m in &m_values {
        for &n in &n_values {
            let mut cell = cfg.clone();
            cell.set("latent.m", &m.to_string())?;
            cell.set("latent.n", &n.to_string())?;
            cell.set("train.epochs", &epochs.to_string())?;
            let cell_seed = base_seed.wrapping_add((m * 10_000 + n) as u64);
            cell.set("seed", &cell_seed.to_string())?;
            let outcome = run_cell(&cell, train_cap)?;
            println!(
                "m={m} n={n} (seed {cell_seed}): em {:.4}, teacher em {:.4}, \
                 mean passes {:.2}",
                outcome.em, outcome.teacher_em, outcome.mean_passes
            );
            out.push_str(&format!(
                "{m}\t{n}\t{}\t{:.4}\t{:.4}\t{:.2}\n",
                outcome.questions, outcome.em, outcome.teacher_em, outcome.mean_passes
            ));
        }
    }
    fs::write(ws.path(SWEEP_FILE), out)?;
    println!("wrote {SWEEP_FILE} ({} cells)  [{hash}]", m_values.len() * n_values.len());
    Ok(())
}

// ── analyze ────────────────────────────────────────────────────────────────

fn cmd_analyze_index(cfg: &RunConfig, ws: &Workspace) -> Result<()> {
    let index = CorpusIndex::load(&ws.path(INDEX_FILE))?;
    let report = anisotropy_report(&index)?;
    let hash = cfg.hash();
    let mut out = stamp("anisotropy", &hash);
    out.push_str("statistic\tcosine\tangle_deg\n");
    for (i, name) in ["min", "q25", "median", "q75", "max"].into_iter().enumerate() {
        out.push_str(&format!(
            "{name}\t{:.4}\t{:.2}\n",
            report.cosine_quantiles[i], report.angle_quantiles[i]
        ));
    }
    fs::write(ws.path(ANISOTROPY_FILE), out)?;
    println!(
        "anisotropy over {} documents: median cosine {:.4}, median angle {:.2} deg  [{hash}]",
        index.len(),
        report.cosine_quantiles[2],
        report.angle_quantiles[2]
    );
    println!("wrote {ANISOTROPY_FILE}");
    Ok(())
}

fn lens_rows(
    out: &mut String,
    session: &LlmSession,
    vocab: &Vocabulary,
    item: &str,
    step: usize,
    block: &str,
    hiddens: &Mat,
) -> Result<()> {
    for (slot, entries) in session.logit_lens(hiddens, LENS_TOP_K).iter().enumerate() {
        out.push_str(&format!("{item}\t{step}\t{block}\t{slot}"));
        for &(id, logit) in entries {
            out.push_str(&format!("\t{}:{logit:.2}", vocab.token(id)?));
        }
        out.push('\n');
    }
    Ok(())
}

fn cmd_analyze_trajectories(cfg: &RunConfig, ws: &Workspace) -> Result<()> {
    let dumps =
        read_jsonl::<TrajectoryDump>(&ws.path(EVAL_TRAJECTORIES_FILE), TRAJECTORY_ARTIFACT)?
            .items;
    if dumps.is_empty() {
        return Err(Error::Data(format!("{EVAL_TRAJECTORIES_FILE} has no trajectories")));
    }
    let hash = cfg.hash();

    // Decoded-length ratios from the dumps themselves.
    let mut rows = Vec::new();
    let mut ratios = Vec::new();
    for dump in &dumps {
        let lengths: Vec<usize> = dump
            .steps
            .iter()
            .flat_map(|s| s.thought_len.into_iter().chain(s.subquery_len))
            .collect();
        if lengths.is_empty() {
            continue;
        }
        let ratio = max_length_ratio(&lengths)?;
        let max = *lengths.iter().max().expect("lengths are nonempty");
        let total: usize = lengths.iter().sum();
        rows.push(format!(
            "{}\t{}\t{max}\t{total}\t{ratio:.4}",
            dump.item_id,
            lengths.len()
        ));
        ratios.push(ratio);
    }
    if ratios.is_empty() {
        return Err(Error::Data(
            "trajectories carry no decoded lengths — rerun eval with --decode".into(),
        ));
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let mut out = stamp("ratio-stats", &hash);
    out.push_str("item\tblocks\tmax_len\ttotal_len\tmax_length_ratio\n");
    for row in &rows {
        out.push_str(row);
        out.push('\n');
    }
    out.push_str(&format!("mean\t-\t-\t-\t{mean:.4}\n"));
    fs::write(ws.path(RATIO_FILE), out)?;

    // Logit-lens tables over re-runs of the first few dumped questions.
    let vocab = load_vocab(ws, cfg)?;
    let index = CorpusIndex::load(&ws.path(INDEX_FILE))?;
    let stack = build_stack(cfg, &vocab, Some(&ws.path(CHECKPOINT_FILE)), false)?;
    verify_index_encoder(&index, &stack)?;
    let loop_cfg = LoopConfig::from_run(cfg)?;
    let session = LlmSession::new(&stack.model, &stack.store);
    let mut lens = stamp("logit-lens", &hash);
    lens.push_str("item\tstep\tblock\tslot");
    for rank in 1..=LENS_TOP_K {
        lens.push_str(&format!("\ttop{rank}"));
    }
    lens.push('\n');
    for dump in dumps.iter().take(LENS_QUESTIONS) {
        let trajectory = run_question(
            &dump.question,
            &stack.model,
            &stack.store,
            &stack.retriever,
            &index,
            &vocab,
            &loop_cfg,
        )?;
        for (si, step) in trajectory.steps.iter().enumerate() {
            lens_rows(&mut lens, &session, &vocab, &dump.item_id, si, "thought", &step.latent_thought)?;
            if let Some(subquery) = &step.latent_subquery {
                lens_rows(&mut lens, &session, &vocab, &dump.item_id, si, "subquery", subquery)?;
            }
        }
    }
    fs::write(ws.path(LENS_FILE), lens)?;
    println!(
        "analyzed {} decoded trajectories: mean max-length ratio {mean:.4}  [{hash}]",
        ratios.len()
    );
    println!(
        "wrote {RATIO_FILE}, {LENS_FILE} ({} questions, top-{LENS_TOP_K} per latent token)",
        dumps.len().min(LENS_QUESTIONS)
    );
    Ok(())
}

// ── report ─────────────────────────────────────────────────────────────────

fn cmd_report(cfg: &RunConfig, ws: &Workspace, inputs: &[String]) -> Result<()> {
    let mut names: Vec<String> = Vec::new();
    let mut hashes: Vec<String> = Vec::new();
    let mut tables: Vec<BTreeMap<String, String>> = Vec::new();
    let mut metric_order: Vec<String> = Vec::new();
    for spec in inputs {
        let (name, path) = spec
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("expected name=path, got '{spec}'")))?;
        if name.is_empty() || names.iter().any(|n| n == name) {
            return Err(Error::Usage(format!("report name '{name}' is empty or repeated")));
        }
        let text = fs::read_to_string(path)?;
        let (artifact, file_hash) = parse_stamp(&text)?;
        if artifact != "eval-report" {
            return Err(Error::Format(format!(
                "'{path}' is a '{artifact}' file, expected 'eval-report'"
            )));
        }
        let mut table = BTreeMap::new();
        for line in text.lines().filter(|l| !l.starts_with('#')) {
            let (metric, value) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("'{path}': bad report line '{line}'")))?;
            if !metric_order.iter().any(|m| m == metric) {
                metric_order.push(metric.to_string());
            }
            table.insert(metric.to_string(), value.to_string());
        }
        names.push(name.to_string());
        hashes.push(file_hash);
        tables.push(table);
    }
    let mut out = stamp("report", &cfg.hash());
    out.push_str(&format!("metric\t{}\n", names.join("\t")));
    out.push_str(&format!("config\t{}\n", hashes.join("\t")));
    for metric in &metric_order {
        let row: Vec<&str> = tables
            .iter()
            .map(|t| t.get(metric).map(String::as_str).unwrap_or("-"))
            .collect();
        out.push_str(&format!("{metric}\t{}\n", row.join("\t")));
    }
    fs::write(ws.path(REPORT_FILE), &out)?;
    print!("{out}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formats;

    fn write_micro_config(dir: &Path) -> PathBuf {
        let path = dir.join("micro.cfg");
        fs::write(
            &path,
            "\
seed = 11
model.d_model = 16
model.layers = 1
model.heads = 2
model.d_ff = 32
model.max_ctx = 256
model.dropout = 0.0
latent.m = 2
latent.n = 4
retrieval.d_ret = 8
retrieval.enc_layers = 1
retrieval.enc_heads = 2
retrieval.enc_ff = 16
retrieval.enc_ctx = 16
retrieval.pseudo_top = 8
loop.max_answer_tokens = 4
decode.max_len = 12
train.epochs = 1
train.batch_size = 8
train.bins = 2
train.max_seq = 300
train.log_every = 5
pretrain.epochs = 40
data.persons_train = 80
data.persons_test = 20
data.fathers_train = 20
data.fathers_test = 8
data.cities_train = 10
data.cities_test = 5
data.countries_train = 3
data.countries_test = 2
eval.max_questions = 6
sweep.m_values = 2
sweep.n_values = 4
sweep.train_questions = 12
sweep.epochs = 1
",
        )
        .unwrap();
        path
    }

    fn run_ok(args: &[&str]) {
        assert_eq!(run_from(args.iter().copied()), 0, "command failed: {args:?}");
    }

    #[test]
    fn usage_errors_exit_one_and_missing_inputs_exit_two() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().to_str().unwrap();
        assert_eq!(run_from(["latentrag", "bogus"]), 1);
        assert_eq!(run_from(["latentrag", "--dir", dir, "gen-data", "--set", "latent.q=3"]), 1);
        assert_eq!(run_from(["latentrag", "--dir", dir, "gen-data", "--set", "noequals"]), 1);
        assert_eq!(run_from(["latentrag", "--help"]), 0);
        assert_eq!(run_from(["latentrag", "--config", "/nonexistent.cfg", "gen-data"]), 2);
        assert_eq!(run_from(["latentrag", "--dir", dir, "build-index"]), 2);
        assert_eq!(run_from(["latentrag", "--dir", dir, "report", "a=missing.tsv"]), 2);
        assert_eq!(run_from(["latentrag", "--dir", dir, "report", "nopath"]), 1);
    }

    #[test]
    fn gen_data_writes_deterministic_schema_valid_artifacts() {
        let tmp = tempfile::tempdir().unwrap();
        let config = write_micro_config(tmp.path());
        let c = config.to_str().unwrap();
        let a = tmp.path().join("a");
        let b = tmp.path().join("b");
        run_ok(&["latentrag", "--config", c, "--dir", a.to_str().unwrap(), "gen-data"]);
        run_ok(&["latentrag", "--config", c, "--dir", b.to_str().unwrap(), "gen-data"]);
        for name in [CORPUS_FILE, QA_TRAIN_FILE, QA_TEST_FILE, VOCAB_FILE] {
            let left = fs::read(a.join(name)).unwrap();
            let right = fs::read(b.join(name)).unwrap();
            assert_eq!(left, right, "{name} differs between identical runs");
        }
        let cfg = RunConfig::load(&config).unwrap();
        let corpus =
            read_jsonl::<Document>(&a.join(CORPUS_FILE), CORPUS_ARTIFACT).unwrap();
        assert_eq!(corpus.config_hash, cfg.hash());
        assert!(corpus.items.len() >= 100);
        let qa = read_jsonl::<QAItem>(&a.join(QA_TRAIN_FILE), QA_ARTIFACT).unwrap();
        assert!(qa.items.iter().any(|q| q.hops == 1) && qa.items.iter().any(|q| q.hops == 2));

        // The hop filter keeps only the requested depth.
        let h = tmp.path().join("h");
        run_ok(&[
            "latentrag", "--config", c, "--dir", h.to_str().unwrap(), "gen-data", "--hops", "2",
        ]);
        let filtered = read_jsonl::<QAItem>(&h.join(QA_TRAIN_FILE), QA_ARTIFACT).unwrap();
        assert!(!filtered.items.is_empty());
        assert!(filtered.items.iter().all(|q| q.hops == 2));
    }

    #[test]
    fn micro_pipeline_covers_every_command() {
        let tmp = tempfile::tempdir().unwrap();
        let config = write_micro_config(tmp.path());
        let c = config.to_str().unwrap();
        let run_dir = tmp.path().join("run");
        let d = run_dir.to_str().unwrap();
        run_ok(&["latentrag", "--config", c, "--dir", d, "gen-data"]);
        run_ok(&["latentrag", "--config", c, "--dir", d, "build-index"]);
        run_ok(&["latentrag", "--config", c, "--dir", d, "teach"]);
        let teacher = read_jsonl::<TeacherTrajectory>(
            &run_dir.join(TEACHER_FILE),
            TEACHER_ARTIFACT,
        )
        .unwrap();
        let correct = teacher.items.iter().filter(|t| t.correct).count();
        assert!(correct >= 20, "teacher solved only {correct} questions");

        run_ok(&["latentrag", "--config", c, "--dir", d, "train"]);
        let log = fs::read_to_string(run_dir.join(LOSS_LOG_FILE)).unwrap();
        assert!(log.starts_with("# artifact loss-log\n"));
        assert!(log.contains("# arm kl\n"), "arm missing from the log header");
        assert!(log.contains("step\tepoch\tloss"));
        assert!(run_dir.join(CHECKPOINT_FILE).exists());
        assert!(run_dir.join(EPOCH_DIR).join("epoch-0.bin").exists());

        // Without decoding: no latent-decode rows, no wall-clock rows.
        run_ok(&["latentrag", "--config", c, "--dir", d, "eval"]);
        let report = fs::read_to_string(run_dir.join(EVAL_REPORT_FILE)).unwrap();
        assert!(!report.contains("latent-decode"));
        assert!(!report.contains("latency_ms"), "wall-clock rows leak into the report");
        assert!(report.contains("decode\toff"));
        let (artifact, hash) = parse_stamp(&report).unwrap();
        assert_eq!(artifact, "eval-report");
        assert_eq!(hash, RunConfig::load(&config).unwrap().hash());
        let percent_sum: f64 = report
            .lines()
            .filter(|l| l.starts_with("passes_percent."))
            .map(|l| l.split('\t').nth(1).unwrap().parse::<f64>().unwrap())
            .sum();
        assert!((percent_sum - 100.0).abs() < 0.1, "percentages sum to {percent_sum}");
        let series = fs::read_to_string(run_dir.join(EVAL_SERIES_FILE)).unwrap();
        assert!(series.contains("\tlatent\t"));
        assert!(!series.contains("latent-decode"));

        // With decoding: latent-decode rows appear, dumps carry lengths.
        run_ok(&["latentrag", "--config", c, "--dir", d, "eval", "--decode"]);
        let report = fs::read_to_string(run_dir.join(EVAL_REPORT_FILE)).unwrap();
        assert!(report.contains("passes.latent-decode"));
        assert!(report.contains("decode\ton"));
        let dumps = read_jsonl::<TrajectoryDump>(
            &run_dir.join(EVAL_TRAJECTORIES_FILE),
            TRAJECTORY_ARTIFACT,
        )
        .unwrap();
        assert!(dumps
            .items
            .iter()
            .any(|t| t.steps.iter().any(|s| s.thought_len.is_some())));

        run_ok(&["latentrag", "--config", c, "--dir", d, "analyze", "index"]);
        let aniso = fs::read_to_string(run_dir.join(ANISOTROPY_FILE)).unwrap();
        assert!(aniso.contains("median\t"));

        run_ok(&["latentrag", "--config", c, "--dir", d, "analyze", "trajectories"]);
        let ratio = fs::read_to_string(run_dir.join(RATIO_FILE)).unwrap();
        assert!(ratio.lines().last().unwrap().starts_with("mean\t"));
        let lens = fs::read_to_string(run_dir.join(LENS_FILE)).unwrap();
        let mut lens_lines = lens.lines().skip(2);
        let header = lens_lines.next().unwrap();
        assert_eq!(header.split('\t').count(), 4 + LENS_TOP_K);
        let first_row = lens_lines.next().unwrap();
        assert_eq!(first_row.split('\t').count(), 4 + LENS_TOP_K, "k columns per token");

        let spec = format!("latent={}", run_dir.join(EVAL_REPORT_FILE).display());
        run_ok(&["latentrag", "--config", c, "--dir", d, "report", spec.as_str()]);
        let merged = fs::read_to_string(run_dir.join(REPORT_FILE)).unwrap();
        assert!(merged.contains("metric\tlatent"));
        assert!(merged.contains("\nem\t"));
    }

    #[test]
    fn sweep_emits_one_row_per_grid_cell() {
        let tmp = tempfile::tempdir().unwrap();
        let config = write_micro_config(tmp.path());
        let c = config.to_str().unwrap();
        let run_dir = tmp.path().join("run");
        run_ok(&["latentrag", "--config", c, "--dir", run_dir.to_str().unwrap(), "sweep-tokens"]);
        let grid = fs::read_to_string(run_dir.join(SWEEP_FILE)).unwrap();
        let rows: Vec<&str> = grid.lines().skip(3).collect();
        assert_eq!(rows.len(), 1, "one m value and one n value give one cell");
        assert!(rows[0].starts_with("2\t4\t"));
        let (artifact, _) = formats::parse_stamp(&grid).unwrap();
        assert_eq!(artifact, "sweep-grid");
    }

    #[test]
    fn report_merges_named_eval_reports_by_metric() {
        let tmp = tempfile::tempdir().unwrap();
        let a = tmp.path().join("a.tsv");
        fs::write(
            &a,
            "# artifact eval-report\n# config aaaa\nem\t0.8000\nmean_passes\t11.00\n",
        )
        .unwrap();
        let b = tmp.path().join("b.tsv");
        fs::write(
            &b,
            "# artifact eval-report\n# config bbbb\nem\t0.6000\nretrieval_success\t0.5000\n",
        )
        .unwrap();
        let out_dir = tmp.path().join("out");
        let dir = out_dir.to_str().unwrap();
        let sa = format!("kl={}", a.display());
        let sb = format!("cosine={}", b.display());
        run_ok(&["latentrag", "--dir", dir, "report", sa.as_str(), sb.as_str()]);
        let merged = fs::read_to_string(out_dir.join(REPORT_FILE)).unwrap();
        let lines: Vec<&str> = merged.lines().collect();
        assert_eq!(lines[2], "metric\tkl\tcosine");
        assert_eq!(lines[3], "config\taaaa\tbbbb");
        assert!(lines.contains(&"em\t0.8000\t0.6000"));
        assert!(lines.contains(&"mean_passes\t11.00\t-"));
        assert!(lines.contains(&"retrieval_success\t-\t0.5000"));
        // Duplicate names and missing '=' are usage errors.
        assert_eq!(run_from(["latentrag", "--dir", dir, "report", sa.as_str(), sa.as_str()]), 1);
    }
}
