//! Command-line front end: train / generate / score / compare-decoders /
//! bench-latency, plus a synthetic-data generator. Every run writes a
//! `manifest.json` echoing the resolved config, and every CSV row carries
//! the manifest hash. Wall-clock columns are left empty unless `--timing`
//! is passed, so that fixed seed + config reproduces every CSV byte for
//! byte.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::bench::bench_forward;
use crate::config::ModelConfig;
use crate::engine::baselines::{ar_generate, blockdiff_generate, BlockStrategy};
use crate::engine::{GenerationStats, HybridDecoder, VerifierConfig};
use crate::error::{Error, Result};
use crate::eval::score_loglik;
use crate::training::checkpoint::{load_checkpoint, save_checkpoint};
use crate::training::corpus::{
    bytes_to_tokens, chunk_corpus, grammar_corpus, grammar_tasks, tokens_to_string,
};
use crate::training::{train, TrainConfig, TrainLogRow};

#[derive(Parser)]
#[command(name = "selfspec", about = "Hybrid draft-and-verify language model toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum DecoderKind {
    Hybrid,
    Ar,
    Blockdiff,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum StrategyKind {
    Confmax,
    L2r,
    Threshold,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic grammar corpus and task set.
    MakeData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 240)]
        docs: usize,
        #[arg(long, default_value_t = 100)]
        tasks: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and write a checkpoint plus a loss-curve CSV.
    Train {
        /// TOML run config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus file, one document per line; a built-in grammar corpus is
        /// used when omitted.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides both model init and batch-sampling seeds.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Decode a completion for one prompt.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, value_enum, default_value_t = DecoderKind::Hybrid)]
        decoder: DecoderKind,
        #[arg(long, default_value_t = 1.0)]
        beta: f32,
        #[arg(long, default_value_t = 4)]
        block_len: usize,
        #[arg(long, value_enum, default_value_t = StrategyKind::Threshold)]
        strategy: StrategyKind,
        #[arg(long, default_value_t = 0.9)]
        tau: f64,
        #[arg(long, default_value_t = 64)]
        max_new: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        timing: bool,
    },
    /// Log-likelihood of a continuation given a prompt (causal, 1 forward).
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        continuation: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy/throughput grid across decoders on a task set.
    CompareDecoders {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Tab-separated prompt/expected pairs; built-in grammar tasks when
        /// omitted.
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        n_tasks: usize,
        #[arg(long, default_value_t = 16)]
        max_new: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        timing: bool,
    },
    /// Forward-latency grid over (prefix length, token slots).
    BenchLatency {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "16,32,64")]
        prefixes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,20")]
        slots: Vec<usize>,
        #[arg(long, default_value_t = 21)]
        reps: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        timing: bool,
    },
}

/// Writes `manifest.json` under `out` and returns a short hash every CSV
/// row carries.
fn write_manifest<T: Serialize>(out: &Path, manifest: &T) -> Result<String> {
    fs::create_dir_all(out)?;
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
    fs::write(out.join("manifest.json"), &json)?;
    let digest = Sha256::digest(json.as_bytes());
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    Ok(hex[..16].to_string())
}

fn fmt_seconds(seconds: f64, timing: bool) -> String {
    if timing {
        format!("{seconds:.6}")
    } else {
        String::new()
    }
}

#[derive(Serialize, serde::Deserialize, Debug, Clone)]
#[serde(default)]
struct ModelSection {
    d_model: usize,
    n_layers: usize,
    n_heads: usize,
    seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            seed: 0,
        }
    }
}

#[derive(Serialize, serde::Deserialize, Debug, Clone, Default)]
#[serde(default)]
struct TrainRunConfig {
    model: ModelSection,
    training: TrainConfigToml,
}

/// TrainConfig with TOML defaults field by field.
#[derive(Serialize, serde::Deserialize, Debug, Clone)]
#[serde(default)]
struct TrainConfigToml {
    steps: usize,
    batch_size: usize,
    seq_len: usize,
    block_len: usize,
    peak_lr: f32,
    min_lr: f32,
    warmup_frac: f64,
    beta1: f32,
    beta2: f32,
    eps_adam: f32,
    alpha: f64,
    masking: crate::training::MaskingMode,
    seed: u64,
}

impl Default for TrainConfigToml {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainConfigToml {
            steps: d.steps,
            batch_size: d.batch_size,
            seq_len: d.seq_len,
            block_len: d.block_len,
            peak_lr: d.peak_lr,
            min_lr: d.min_lr,
            warmup_frac: d.warmup_frac,
            beta1: d.beta1,
            beta2: d.beta2,
            eps_adam: d.eps_adam,
            alpha: d.alpha,
            masking: d.masking,
            seed: d.seed,
        }
    }
}

impl TrainConfigToml {
    fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            seq_len: self.seq_len,
            block_len: self.block_len,
            peak_lr: self.peak_lr,
            min_lr: self.min_lr,
            warmup_frac: self.warmup_frac,
            beta1: self.beta1,
            beta2: self.beta2,
            eps_adam: self.eps_adam,
            alpha: self.alpha,
            masking: self.masking,
            seed: self.seed,
        }
    }
}

fn cmd_make_data(out: &Path, docs: usize, tasks: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("corpus.txt"), grammar_corpus(docs, seed))?;
    let mut tsv = String::new();
    for (prompt, expected) in grammar_tasks(tasks, seed.wrapping_add(1)) {
        tsv.push_str(&prompt);
        tsv.push('\t');
        tsv.push_str(&expected);
        tsv.push('\n');
    }
    fs::write(out.join("tasks.tsv"), tsv)?;
    println!("wrote corpus.txt ({docs} docs) and tasks.tsv ({tasks} tasks)");
    Ok(())
}

fn cmd_train(
    config: Option<&Path>,
    corpus: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let mut run: TrainRunConfig = match config {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("config parse: {e}")))?
        }
        None => TrainRunConfig::default(),
    };
    if let Some(seed) = seed {
        run.model.seed = seed;
        run.training.seed = seed;
    }
    let model_cfg = ModelConfig::byte_level(
        run.model.d_model,
        run.model.n_layers,
        run.model.n_heads,
        run.model.seed,
    );
    let train_cfg = run.training.to_train_config();

    let corpus_text = match corpus {
        Some(path) => fs::read_to_string(path)?,
        None => grammar_corpus(240, run.training.seed),
    };
    let seqs = chunk_corpus(&corpus_text, train_cfg.seq_len, &model_cfg)?;

    #[derive(Serialize)]
    struct Manifest<'a> {
        command: &'a str,
        model: &'a ModelConfig,
        training: &'a TrainConfig,
        n_sequences: usize,
    }
    let hash = write_manifest(
        out,
        &Manifest {
            command: "train",
            model: &model_cfg,
            training: &train_cfg,
            n_sequences: seqs.len(),
        },
    )?;

    let mut log: Vec<TrainLogRow> = Vec::new();
    let backbone = train(&model_cfg, &train_cfg, &seqs, Some(&mut log))?;
    save_checkpoint(&backbone, &out.join("model.sspc"))?;

    let mut w = csv::Writer::from_path(out.join("train_log.csv"))?;
    w.write_record(["step", "lr", "l_ar", "l_diff", "l_total", "manifest_hash"])?;
    for row in &log {
        w.write_record([
            row.step.to_string(),
            format!("{:e}", row.lr),
            format!("{:.6}", row.l_ar),
            format!("{:.6}", row.l_diff),
            format!("{:.6}", row.l_total),
            hash.clone(),
        ])?;
    }
    w.flush()?;
    let last = log.last().map(|r| r.l_total).unwrap_or(f64::NAN);
    println!("trained {} steps, final loss {last:.4}", train_cfg.steps);
    Ok(())
}

fn prompt_tokens(cfg: &ModelConfig, prompt: &str) -> Vec<u32> {
    let mut toks = vec![cfg.bos_token_id];
    toks.extend(bytes_to_tokens(prompt));
    toks
}

fn strip_eos(cfg: &ModelConfig, out: &[u32]) -> String {
    let body: Vec<u32> = out
        .iter()
        .copied()
        .take_while(|&t| t != cfg.eos_token_id)
        .collect();
    tokens_to_string(&body)
}

#[allow(clippy::too_many_arguments)]
fn cmd_generate(
    checkpoint: &Path,
    prompt: &str,
    decoder: DecoderKind,
    beta: f32,
    block_len: usize,
    strategy: StrategyKind,
    tau: f64,
    max_new: usize,
    seed: u64,
    out: &Path,
    timing: bool,
) -> Result<()> {
    let backbone = load_checkpoint(checkpoint)?;
    let cfg = backbone.config().clone();
    let vcfg = VerifierConfig {
        beta,
        temperature: 0.0,
        max_new_tokens: max_new,
        stop_on_eos: true,
    };
    let block_strategy = match strategy {
        StrategyKind::Confmax => BlockStrategy::ConfidenceMax { k: 1 },
        StrategyKind::L2r => BlockStrategy::LeftToRight { k: 1 },
        StrategyKind::Threshold => BlockStrategy::Threshold { tau },
    };

    #[derive(Serialize)]
    struct Manifest<'a> {
        command: &'a str,
        checkpoint: String,
        prompt: &'a str,
        decoder: String,
        beta: f32,
        block_len: usize,
        strategy: String,
        tau: f64,
        max_new: usize,
        seed: u64,
    }
    let hash = write_manifest(
        out,
        &Manifest {
            command: "generate",
            checkpoint: checkpoint.display().to_string(),
            prompt,
            decoder: format!("{decoder:?}").to_lowercase(),
            beta,
            block_len,
            strategy: format!("{strategy:?}").to_lowercase(),
            tau,
            max_new,
            seed,
        },
    )?;

    let toks = prompt_tokens(&cfg, prompt);
    let (name, mode, output, stats): (String, String, Vec<u32>, GenerationStats) = match decoder {
        DecoderKind::Hybrid => {
            let mode = if beta == 1.0 {
                "trust_ar"
            } else if beta == 0.0 {
                "trust_diff"
            } else {
                "mixed"
            };
            let dec = HybridDecoder::new(&backbone, block_len, vcfg)?;
            let (o, s) = dec.generate(&toks)?;
            (format!("hybrid_b{block_len}"), mode.to_string(), o, s)
        }
        DecoderKind::Ar => {
            let (o, s) = ar_generate(&backbone, &toks, &vcfg)?;
            ("ar".to_string(), "-".to_string(), o, s)
        }
        DecoderKind::Blockdiff => {
            let (o, s) = blockdiff_generate(&backbone, &toks, block_len, block_strategy, &vcfg)?;
            ("blockdiff".to_string(), "-".to_string(), o, s)
        }
    };

    let text = strip_eos(&cfg, &output);
    let mut w = csv::Writer::from_path(out.join("generate.csv"))?;
    w.write_record([
        "decoder",
        "mode",
        "prompt",
        "output",
        "tokens",
        "nfe",
        "t_per_nfe",
        "seconds",
        "manifest_hash",
    ])?;
    w.write_record([
        name,
        mode,
        prompt.to_string(),
        text.clone(),
        stats.committed_tokens.to_string(),
        stats.nfe.to_string(),
        format!("{:.4}", stats.tokens_per_nfe()),
        fmt_seconds(stats.wall_time.as_secs_f64(), timing),
        hash,
    ])?;
    w.flush()?;
    println!("{prompt}{text}");
    Ok(())
}

fn cmd_score(checkpoint: &Path, prompt: &str, continuation: &str, out: &Path) -> Result<()> {
    let backbone = load_checkpoint(checkpoint)?;
    let cfg = backbone.config().clone();

    #[derive(Serialize)]
    struct Manifest<'a> {
        command: &'a str,
        checkpoint: String,
        prompt: &'a str,
        continuation: &'a str,
    }
    let hash = write_manifest(
        out,
        &Manifest {
            command: "score",
            checkpoint: checkpoint.display().to_string(),
            prompt,
            continuation,
        },
    )?;

    let p = prompt_tokens(&cfg, prompt);
    let mut c = bytes_to_tokens(continuation);
    c.push(cfg.eos_token_id);
    let report = score_loglik(&backbone, &p, &c)?;

    let mut w = csv::Writer::from_path(out.join("score.csv"))?;
    w.write_record(["token_index", "token_id", "logprob", "manifest_hash"])?;
    for (i, (&t, lp)) in c.iter().zip(&report.token_logprobs).enumerate() {
        w.write_record([
            i.to_string(),
            t.to_string(),
            format!("{lp:.6}"),
            hash.clone(),
        ])?;
    }
    w.write_record([
        "total".to_string(),
        String::new(),
        format!("{:.6}", report.total_loglik),
        hash.clone(),
    ])?;
    w.flush()?;
    println!(
        "loglik {:.4} over {} tokens ({} forward)",
        report.total_loglik,
        c.len(),
        report.nfe_used
    );
    Ok(())
}

fn load_tasks(path: Option<&Path>, n: usize, seed: u64) -> Result<Vec<(String, String)>> {
    let mut tasks = match path {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            let mut out = Vec::new();
            for line in text.lines() {
                if line.is_empty() {
                    continue;
                }
                let (prompt, expected) = line
                    .split_once('\t')
                    .ok_or_else(|| Error::Corpus("task line missing tab separator".into()))?;
                out.push((prompt.to_string(), expected.to_string()));
            }
            if out.is_empty() {
                return Err(Error::Corpus("empty task file".into()));
            }
            out
        }
        None => grammar_tasks(n, seed),
    };
    tasks.truncate(n);
    Ok(tasks)
}

fn cmd_compare(
    checkpoint: &Path,
    tasks_path: Option<&Path>,
    n_tasks: usize,
    max_new: usize,
    seed: u64,
    out: &Path,
    timing: bool,
) -> Result<()> {
    let backbone = load_checkpoint(checkpoint)?;
    let cfg = backbone.config().clone();
    let tasks = load_tasks(tasks_path, n_tasks, seed)?;
    let vcfg = VerifierConfig {
        beta: 1.0,
        temperature: 0.0,
        max_new_tokens: max_new,
        stop_on_eos: true,
    };

    #[derive(Serialize)]
    struct Manifest<'a> {
        command: &'a str,
        checkpoint: String,
        n_tasks: usize,
        max_new: usize,
        seed: u64,
        hybrid_drafts: Vec<usize>,
        thresholds: Vec<f64>,
    }
    let drafts = vec![4usize, 8, 16];
    let taus = vec![0.9f64, 0.8, 0.7, 0.6];
    let hash = write_manifest(
        out,
        &Manifest {
            command: "compare-decoders",
            checkpoint: checkpoint.display().to_string(),
            n_tasks: tasks.len(),
            max_new,
            seed,
            hybrid_drafts: drafts.clone(),
            thresholds: taus.clone(),
        },
    )?;

    struct Row {
        decoder: String,
        correct: bool,
        tokens: usize,
        nfe: usize,
        seconds: f64,
    }
    let mut task_rows: Vec<(usize, Row)> = Vec::new();
    let mut summary: Vec<(String, usize, usize, usize, f64)> = Vec::new();

    let mut run_decoder = |name: String,
                           decode: &mut dyn FnMut(&[u32]) -> Result<(Vec<u32>, GenerationStats)>|
     -> Result<()> {
        let mut n_exact = 0;
        let mut tot_tokens = 0;
        let mut tot_nfe = 0;
        let mut tot_secs = 0.0;
        for (task_id, (prompt, expected)) in tasks.iter().enumerate() {
            let toks = prompt_tokens(&cfg, prompt);
            let (output, stats) = decode(&toks)?;
            let correct = strip_eos(&cfg, &output) == *expected;
            n_exact += correct as usize;
            tot_tokens += stats.committed_tokens;
            tot_nfe += stats.nfe;
            tot_secs += stats.wall_time.as_secs_f64();
            task_rows.push((
                task_id,
                Row {
                    decoder: name.clone(),
                    correct,
                    tokens: stats.committed_tokens,
                    nfe: stats.nfe,
                    seconds: stats.wall_time.as_secs_f64(),
                },
            ));
        }
        summary.push((name, n_exact, tot_tokens, tot_nfe, tot_secs));
        Ok(())
    };

    run_decoder("ar".to_string(), &mut |toks| {
        ar_generate(&backbone, toks, &vcfg)
    })?;
    for &b in &drafts {
        let dec = HybridDecoder::new(&backbone, b, vcfg.clone())?;
        run_decoder(format!("hybrid_b{b}_trust_ar"), &mut |toks| {
            dec.generate(toks)
        })?;
    }
    for &tau in &taus {
        run_decoder(format!("blockdiff_threshold_{tau}"), &mut |toks| {
            blockdiff_generate(
                &backbone,
                toks,
                cfg.block_len,
                BlockStrategy::Threshold { tau },
                &vcfg,
            )
        })?;
    }

    let mut w = csv::Writer::from_path(out.join("compare_tasks.csv"))?;
    w.write_record([
        "task_id",
        "decoder",
        "correct",
        "tokens",
        "nfe",
        "t_per_nfe",
        "seconds",
        "manifest_hash",
    ])?;
    for (task_id, row) in &task_rows {
        w.write_record([
            task_id.to_string(),
            row.decoder.clone(),
            (row.correct as u8).to_string(),
            row.tokens.to_string(),
            row.nfe.to_string(),
            format!("{:.4}", row.tokens as f64 / row.nfe as f64),
            fmt_seconds(row.seconds, timing),
            hash.clone(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join("compare.csv"))?;
    w.write_record([
        "decoder",
        "accuracy",
        "tokens",
        "nfe",
        "t_per_nfe",
        "seconds",
        "manifest_hash",
    ])?;
    for (name, n_exact, tokens, nfe, secs) in &summary {
        w.write_record([
            name.clone(),
            format!("{:.4}", *n_exact as f64 / tasks.len() as f64),
            tokens.to_string(),
            nfe.to_string(),
            format!("{:.4}", *tokens as f64 / *nfe as f64),
            fmt_seconds(*secs, timing),
            hash.clone(),
        ])?;
    }
    w.flush()?;
    for (name, n_exact, tokens, nfe, _) in &summary {
        println!(
            "{name}: accuracy {:.3}, T/NFE {:.3}",
            *n_exact as f64 / tasks.len() as f64,
            *tokens as f64 / *nfe as f64
        );
    }
    Ok(())
}

fn cmd_bench_latency(
    checkpoint: &Path,
    prefixes: &[usize],
    slots: &[usize],
    reps: usize,
    out: &Path,
    timing: bool,
) -> Result<()> {
    let backbone = load_checkpoint(checkpoint)?;

    #[derive(Serialize)]
    struct Manifest<'a> {
        command: &'a str,
        checkpoint: String,
        prefixes: &'a [usize],
        slots: &'a [usize],
        reps: usize,
    }
    let hash = write_manifest(
        out,
        &Manifest {
            command: "bench-latency",
            checkpoint: checkpoint.display().to_string(),
            prefixes,
            slots,
            reps,
        },
    )?;

    let mut w = csv::Writer::from_path(out.join("bench_latency.csv"))?;
    w.write_record([
        "prefix_len",
        "n_token_slots",
        "reps",
        "median_forward_seconds",
        "tokens_per_second",
        "relative_throughput",
        "manifest_hash",
    ])?;
    for &prefix in prefixes {
        // The slots=1 row anchors relative throughput at the AR point.
        let base = bench_forward(&backbone, prefix, 1, reps)?;
        let base_tps = 1.0 / base.median_seconds;
        for &q in slots {
            let row = if q == 1 {
                base.clone()
            } else {
                bench_forward(&backbone, prefix, q, reps)?
            };
            let tps = q as f64 / row.median_seconds;
            w.write_record([
                prefix.to_string(),
                q.to_string(),
                reps.to_string(),
                fmt_seconds(row.median_seconds, timing),
                if timing {
                    format!("{tps:.2}")
                } else {
                    String::new()
                },
                if timing {
                    format!("{:.3}", tps / base_tps)
                } else {
                    String::new()
                },
                hash.clone(),
            ])?;
        }
    }
    w.flush()?;
    println!(
        "bench grid: {} prefixes x {} slot counts, {reps} reps each",
        prefixes.len(),
        slots.len()
    );
    Ok(())
}

pub fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Command::MakeData {
            out,
            docs,
            tasks,
            seed,
        } => cmd_make_data(&out, docs, tasks, seed),
        Command::Train {
            config,
            corpus,
            out,
            seed,
        } => cmd_train(config.as_deref(), corpus.as_deref(), &out, seed),
        Command::Generate {
            checkpoint,
            prompt,
            decoder,
            beta,
            block_len,
            strategy,
            tau,
            max_new,
            seed,
            out,
            timing,
        } => cmd_generate(
            &checkpoint,
            &prompt,
            decoder,
            beta,
            block_len,
            strategy,
            tau,
            max_new,
            seed,
            &out,
            timing,
        ),
        Command::Score {
            checkpoint,
            prompt,
            continuation,
            out,
        } => cmd_score(&checkpoint, &prompt, &continuation, &out),
        Command::CompareDecoders {
            checkpoint,
            tasks,
            n_tasks,
            max_new,
            seed,
            out,
            timing,
        } => cmd_compare(
            &checkpoint,
            tasks.as_deref(),
            n_tasks,
            max_new,
            seed,
            &out,
            timing,
        ),
        Command::BenchLatency {
            checkpoint,
            prefixes,
            slots,
            reps,
            out,
            timing,
        } => cmd_bench_latency(&checkpoint, &prefixes, &slots, reps, &out, timing),
    }
}
