use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hashmoe::analysis;
use hashmoe::corpus::{synthetic_corpus, SyntheticKind, SyntheticSpec, Tokenizer, Vocab};
use hashmoe::hashing::{self, HashRoutingTable, KMeansConfig, TableKind};
use hashmoe::model::{count_params, flops_per_token, ModelConfig, Precision};
use hashmoe::trainer::{self, FinetuneConfig, RunSummary, TrainConfig};

#[derive(Parser)]
#[command(name = "hashmoe", version, about = "Hash-routed mixture-of-experts language model experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Corpus generation.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Vocabulary construction.
    #[command(subcommand)]
    Vocab(VocabCmd),
    /// Routing tables.
    #[command(subcommand)]
    Hash(HashCmd),
    /// Train a model from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides both the data-order and the initialization seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a run directory on a corpus.
    Eval(EvalArgs),
    /// Continue training a run on a new corpus with fresh optimizer state.
    Finetune {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Reports over traces and metrics.
    #[command(subcommand)]
    Analyze(AnalyzeCmd),
    /// Parameter and FLOP counts of a model or training config.
    Params {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Subcommand)]
enum CorpusCmd {
    Synth {
        #[arg(long, value_parser = parse_kind)]
        kind: SyntheticKind,
        #[arg(long)]
        vocab: usize,
        #[arg(long)]
        length: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.07)]
        exponent: f64,
        #[arg(long, default_value_t = 8)]
        branching: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum VocabCmd {
    Build {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "word", value_parser = parse_tokenizer)]
        tokenizer: Tokenizer,
        #[arg(long, default_value_t = 8008)]
        max_size: usize,
        /// Count only this many leading tokens.
        #[arg(long)]
        freq_sample_tokens: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum HashCmd {
    Build {
        #[arg(long, value_parser = parse_table_kind)]
        kind: TableKind,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        vocab: PathBuf,
        /// Run directory or checkpoint whose embeddings are clustered.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long, default_value = "tok_emb")]
        embedding_tensor: String,
        /// Cluster count for dispersed tables (defaults to K).
        #[arg(long)]
        clusters: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    Stats {
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
    },
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    allow_oracle: bool,
    /// Vocabulary to check against the run's recorded digest.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    /// Context length; defaults to the model's maximum.
    #[arg(long)]
    seq: Option<usize>,
    #[arg(long, default_value_t = 0)]
    max_batches: usize,
}

#[derive(Subcommand)]
enum AnalyzeCmd {
    Balance {
        #[arg(long, num_args = 1.., required = true)]
        trace: Vec<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        /// Layer written to the CSV (defaults to the first traced layer).
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        labels: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Throughput {
        #[arg(long, num_args = 1.., required = true)]
        metrics: Vec<PathBuf>,
        /// Train rows up to this step are ignored.
        #[arg(long, default_value_t = 0)]
        skip_steps: u64,
    },
}

fn parse_kind(s: &str) -> Result<SyntheticKind, String> {
    s.parse().map_err(|e: hashmoe::Error| e.to_string())
}

fn parse_tokenizer(s: &str) -> Result<Tokenizer, String> {
    s.parse().map_err(|e: hashmoe::Error| e.to_string())
}

fn parse_table_kind(s: &str) -> Result<TableKind, String> {
    s.parse().map_err(|e: hashmoe::Error| e.to_string())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    configure_threads()?;
    match cli.command {
        Command::Corpus(CorpusCmd::Synth { kind, vocab, length, seed, exponent, branching, out }) => {
            let spec = SyntheticSpec { kind, vocab, length, seed, exponent, branching };
            fs::write(&out, synthetic_corpus(&spec)?).with_context(|| format!("writing {}", out.display()))?;
        }
        Command::Vocab(VocabCmd::Build { corpus, tokenizer, max_size, freq_sample_tokens, out }) => {
            let text = read(&corpus)?;
            let v = Vocab::build(&text, tokenizer, max_size, freq_sample_tokens)?;
            fs::write(&out, v.to_tsv()).with_context(|| format!("writing {}", out.display()))?;
            println!("{}", serde_json::json!({ "size": v.len(), "tokens": v.total(), "digest": v.digest() }));
        }
        Command::Hash(HashCmd::Build { kind, k, seed, vocab, embeddings, embedding_tensor, clusters, out }) => {
            let vocab = load_vocab(&vocab)?;
            let table = build_table(kind, k, seed, &vocab, embeddings.as_deref(), &embedding_tensor, clusters)?;
            fs::write(&out, table.to_json()).with_context(|| format!("writing {}", out.display()))?;
            println!("{}", serde_json::to_string_pretty(&hashing::balance_stats(&table, &vocab)?)?);
        }
        Command::Hash(HashCmd::Stats { table, vocab }) => {
            let t = HashRoutingTable::load(&table)?;
            let v = load_vocab(&vocab)?;
            t.check_vocab(&v)?;
            println!("{}", serde_json::to_string_pretty(&hashing::balance_stats(&t, &v)?)?);
        }
        Command::Train { config, seed } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
                cfg.model.seed = s;
            }
            let summary = match cfg.model.precision {
                Precision::F32 => trainer::run_config::<f32>(&cfg)?,
                Precision::F64 => trainer::run_config::<f64>(&cfg)?,
            };
            report(&summary, &cfg.out_dir)?;
        }
        Command::Eval(args) => eval(args)?,
        Command::Finetune { ckpt, config } => {
            let cfg = FinetuneConfig::load(&config)?;
            let summary = trainer::fine_tune_run::<f32>(&ckpt, &cfg)?;
            report(&summary, &cfg.out_dir)?;
        }
        Command::Analyze(cmd) => analyze(cmd)?,
        Command::Params { config } => {
            let text = read(&config)?;
            let model: ModelConfig = match serde_json::from_str::<TrainConfig>(&text) {
                Ok(_) => {
                    let t = TrainConfig::load(&config)?;
                    let mut model = t.model;
                    if model.vocab == 0 {
                        // sized from the data, as training would
                        model.vocab = match &t.data.vocab {
                            Some(p) => load_vocab(p)?.len(),
                            None => Vocab::build(&read(&t.data.train)?, t.data.tokenizer, t.data.vocab_size, t.data.freq_sample_tokens)?.len(),
                        };
                    }
                    model
                }
                Err(_) => serde_json::from_str(&text).with_context(|| format!("{} is neither a model nor a training config", config.display()))?,
            };
            model.validate()?;
            let c = count_params(&model);
            println!(
                "{}",
                serde_json::to_string_pretty(&serde_json::json!({
                    "shared": c.shared,
                    "per_expert": c.per_expert,
                    "total": c.total,
                    "flops_per_token": flops_per_token(&model),
                }))?
            );
        }
    }
    Ok(())
}

/// `HASHMOE_THREADS` sizes the worker pool; 1 gives fully deterministic runs.
fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("HASHMOE_THREADS") {
        let n: usize = v.parse().with_context(|| format!("HASHMOE_THREADS={v:?} is not a number"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    hashmoe_tensor::flush_denormals();
    Ok(())
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_vocab(path: &Path) -> Result<Vocab> {
    Ok(Vocab::from_tsv(&read(path)?).with_context(|| format!("parsing {}", path.display()))?)
}

fn build_table(
    kind: TableKind,
    k: usize,
    seed: u64,
    vocab: &Vocab,
    embeddings: Option<&Path>,
    tensor: &str,
    clusters: Option<usize>,
) -> Result<HashRoutingTable> {
    Ok(match kind {
        TableKind::Random => hashing::build_random_table(vocab, k, seed)?,
        TableKind::Balanced => hashing::build_balanced_table(vocab, k)?,
        TableKind::Clustered | TableKind::Dispersed => {
            let Some(ckpt) = embeddings else { bail!("{kind} tables need --embeddings") };
            let run = trainer::load_run::<f64>(ckpt)?;
            trainer::check_vocab(&run.manifest, vocab)?;
            let p = run.model.params.by_name(tensor).with_context(|| format!("no tensor {tensor:?} in {}", ckpt.display()))?;
            let shape = p.value.shape();
            if shape.len() != 2 || shape[0] != vocab.len() {
                bail!("tensor {tensor:?} has shape {shape:?}; expected [{}, d]", vocab.len());
            }
            let n_clusters = if kind == TableKind::Clustered { k } else { clusters.unwrap_or(k) };
            let model = hashing::kmeans(p.value.data(), shape[1], n_clusters, seed, KMeansConfig::default())?;
            if kind == TableKind::Clustered {
                hashing::build_clustered_table(&model, k, vocab, seed)?
            } else {
                hashing::build_dispersed_table(&model, k, vocab, seed)?
            }
        }
    })
}

fn eval(a: EvalArgs) -> Result<()> {
    let run = trainer::load_run::<f32>(&a.ckpt)?;
    let vocab = match &a.vocab {
        Some(p) => {
            let v = load_vocab(p)?;
            trainer::check_vocab(&run.manifest, &v)?;
            v
        }
        None => run.vocab.clone().with_context(|| format!("{} has no vocabulary; pass --vocab", a.ckpt.display()))?,
    };
    let tokenizer = run.manifest.tokenizer.unwrap_or_default();
    let ids = vocab.encode(&read(&a.corpus)?, tokenizer);
    let seq = a.seq.unwrap_or(run.model.config.max_seq);
    let report = trainer::evaluate(&run.model, &ids, a.batch, seq, a.allow_oracle, a.max_batches)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn analyze(cmd: AnalyzeCmd) -> Result<()> {
    match cmd {
        AnalyzeCmd::Balance { trace, k, layer, out } => {
            let mut rows = Vec::new();
            for t in &trace {
                rows.extend(analysis::read_trace(t)?);
            }
            let hists = analysis::balance_report(&rows, k)?;
            let chosen = match layer {
                Some(l) => hists.iter().find(|h| h.layer == l).with_context(|| format!("layer {l} not in trace"))?,
                None => &hists[0],
            };
            fs::write(&out, chosen.to_csv()).with_context(|| format!("writing {}", out.display()))?;
            println!("{}", serde_json::to_string_pretty(&hists)?);
        }
        AnalyzeCmd::Compare { metrics, labels, out } => {
            let labels = if labels.is_empty() {
                metrics.iter().map(|m| m.display().to_string()).collect()
            } else {
                labels
            };
            if labels.len() != metrics.len() {
                bail!("{} labels for {} metrics files", labels.len(), metrics.len());
            }
            let runs: Vec<(String, PathBuf)> = labels.into_iter().zip(metrics).collect();
            let rows = analysis::compare(&runs)?;
            print!("{}", analysis::comparison_table(&rows));
            if let Some(out) = out {
                fs::write(&out, analysis::comparison_csv(&rows)).with_context(|| format!("writing {}", out.display()))?;
            }
        }
        AnalyzeCmd::Throughput { metrics, skip_steps } => {
            let r = analysis::throughput_report(&metrics, skip_steps)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
    }
    Ok(())
}

fn report(summary: &RunSummary, out_dir: &Path) -> Result<()> {
    let mut line = serde_json::json!({ "out_dir": out_dir, "steps_per_sec": summary.steps_per_sec });
    if let Some(last) = summary.records.iter().rev().find(|r| r.kind == trainer::RecordKind::Train) {
        line["final_train_nll"] = last.nll.into();
    }
    if let Some((valid, test)) = &summary.final_eval {
        line["valid_ppl"] = valid.ppl.into();
        if let Some(t) = test {
            line["test_ppl"] = t.ppl.into();
        }
    }
    println!("{}", serde_json::to_string_pretty(&line)?);
    Ok(())
}
