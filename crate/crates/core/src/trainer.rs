//! Training, evaluation, fine-tuning and run directories.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use hashmoe_tensor::checkpoint;
use hashmoe_tensor::{grad_norm, lr_schedule, Adam, AdamConfig, Graph, Real};
use serde::{Deserialize, Serialize};

use crate::corpus::{eval_batches, make_batches, TokenBatch, Tokenizer, Vocab};
use crate::error::{read_file, Error, Result};
use crate::model::{count_params, matches_pattern, LayerTrace, Model, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub steps: u64,
    pub batch: usize,
    pub seq: usize,
    pub accum: usize,
    pub max_lr: f64,
    pub warmup: u64,
    pub clip: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Steps between train metric rows.
    pub log_interval: u64,
    /// Steps between validation rows; 0 evaluates only at the end.
    pub eval_interval: u64,
    /// Cap on evaluation batches per split; 0 means the whole split.
    pub eval_batches: usize,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
    /// Parameter name patterns to freeze.
    pub freeze: Vec<String>,
    /// Routing traces are kept for this many final steps.
    pub trace_last: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            steps: 1000,
            batch: 16,
            seq: 64,
            accum: 1,
            max_lr: 0.002,
            warmup: 100,
            clip: 1.0,
            seed: 0,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            log_interval: 1,
            eval_interval: 0,
            eval_batches: 0,
            checkpoint_interval: 0,
            freeze: Vec::new(),
            trace_last: 0,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.accum == 0 || self.batch == 0 || self.seq == 0 {
            return Err(Error::Config("steps, accum, batch and seq must be at least 1".into()));
        }
        if !(self.max_lr >= 0.0) || !(self.clip > 0.0) {
            return Err(Error::Config("max_lr must be >= 0 and clip > 0".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Train,
    Eval,
}

/// Identifies a run in eval rows so reports need only the metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub router: String,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub alpha: f64,
    pub params: u64,
}

impl RunInfo {
    pub fn of(cfg: &ModelConfig) -> Self {
        let r = cfg.primary_router();
        Self { router: r.name().into(), k: r.experts(), n: r.hashes(), alpha: r.alpha(), params: count_params(cfg).total }
    }
}

/// One metrics row. Train rows describe a single update; eval rows describe
/// held-out splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub kind: RecordKind,
    pub step: u64,
    pub loss: f64,
    pub nll: f64,
    pub aux_loss: f64,
    pub lr: f64,
    pub ppl: f64,
    pub tokens_per_sec: f64,
    #[serde(default)]
    pub updates_per_sec: f64,
    pub expert_load: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid_ppl: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_ppl: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<RunInfo>,
}

impl MetricsRecord {
    /// Copy with wall-clock fields zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> Self {
        Self { tokens_per_sec: 0.0, updates_per_sec: 0.0, ..self.clone() }
    }
}

/// Routing trace export row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub layer: usize,
    pub position: usize,
    pub feature_id: usize,
    pub expert: usize,
    pub gate: f64,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub segment: usize,
}

fn is_zero(x: &usize) -> bool {
    *x == 0
}

pub fn trace_rows(step: u64, t: &LayerTrace) -> impl Iterator<Item = TraceRow> + '_ {
    (0..t.experts.len()).map(move |i| {
        let p = i / t.segments;
        TraceRow { step, layer: t.layer, position: p, feature_id: t.features[p], expert: t.experts[i], gate: t.gates[p], segment: i % t.segments }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub nll: f64,
    pub ppl: f64,
    pub tokens: usize,
    /// Realized routing shares per sparse layer.
    pub expert_load: Vec<Vec<f64>>,
    pub tokens_per_sec: f64,
}

/// Per-step values of one update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub nll: f64,
    pub aux: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub traces: Vec<LayerTrace>,
}

/// Summed routing counts of traced steps, one entry per sparse layer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadCounts {
    pub layers: Vec<(usize, Vec<u64>)>,
}

impl LoadCounts {
    fn add(&mut self, traces: &[LayerTrace]) {
        if self.layers.is_empty() {
            self.layers = traces.iter().map(|t| (t.layer, vec![0; t.k])).collect();
        }
        for (slot, t) in self.layers.iter_mut().zip(traces) {
            for (a, b) in slot.1.iter_mut().zip(t.loads()) {
                *a += b;
            }
        }
    }
}

pub struct RunSummary {
    pub records: Vec<MetricsRecord>,
    pub final_eval: Option<(EvalReport, Option<EvalReport>)>,
    pub traced_loads: LoadCounts,
    pub steps_per_sec: f64,
}

/// Token streams of one experiment.
pub struct Splits<'a> {
    pub train: &'a [usize],
    pub valid: Option<&'a [usize]>,
    pub test: Option<&'a [usize]>,
}

/// Destinations for run artifacts; all optional.
#[derive(Default)]
pub struct Sinks<'w> {
    pub metrics: Option<&'w mut dyn Write>,
    pub trace: Option<&'w mut dyn Write>,
    pub checkpoint_dir: Option<PathBuf>,
    pub vocab: Option<(&'w Vocab, Tokenizer)>,
}

fn shares(loads: &[u64]) -> Vec<f64> {
    let total: u64 = loads.iter().sum();
    loads.iter().map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 }).collect()
}

/// Freezes every parameter matched by a pattern. Patterns matching nothing are errors.
pub fn apply_freeze<F: Real>(model: &mut Model<F>, patterns: &[String]) -> Result<usize> {
    let ids: Vec<_> = model.params.ids().collect();
    let mut frozen = 0;
    for pat in patterns {
        let hits: Vec<_> = ids.iter().copied().filter(|&id| matches_pattern(pat, &model.params.get(id).name)).collect();
        if hits.is_empty() {
            return Err(Error::Config(format!("freeze pattern {pat:?} matches no parameter")));
        }
        for id in hits {
            if model.params.is_trainable(id) {
                model.params.set_trainable(id, false);
                frozen += 1;
            }
        }
    }
    Ok(frozen)
}

/// One optimizer update over `micro` batches with gradients averaged.
pub fn train_step<F: Real>(
    model: &mut Model<F>,
    adam: &mut Adam,
    micro: &[TokenBatch],
    step: u64,
    s: &TrainSettings,
) -> Result<StepStats> {
    let single = micro.len() == 1;
    if !single {
        model.params.zero_grads();
    }
    let scale = F::from_f64(1.0 / micro.len() as f64);
    let (mut loss, mut nll, mut aux) = (0.0, 0.0, 0.0);
    let mut traces = Vec::new();
    for b in micro {
        let (grads, parts) = {
            let mut g = Graph::new(&model.params);
            let out = model.loss(&mut g, b, true)?;
            let vals = (
                g.value(out.total).item().as_f64(),
                g.value(out.nll).item().as_f64(),
                out.aux.map_or(0.0, |a| g.value(a).item().as_f64()),
            );
            if let Some(f) = g.fault() {
                return Err(Error::NonFinite { step, op: f.op.to_string() });
            }
            if !vals.0.is_finite() {
                return Err(Error::NonFinite { step, op: "loss".into() });
            }
            traces = merge_traces(traces, out.traces);
            (g.backward(out.total)?, vals)
        };
        if single {
            model.params.set_grads(grads);
        } else {
            model.params.accumulate(&grads, scale);
        }
        loss += parts.0 / micro.len() as f64;
        nll += parts.1 / micro.len() as f64;
        aux += parts.2 / micro.len() as f64;
    }
    let norm = grad_norm(&model.params);
    if !norm.is_finite() {
        return Err(Error::NonFinite { step, op: "backward".into() });
    }
    // clipping is folded into the update; the stored gradients stay unclipped
    let clip = if norm > s.clip && norm > 0.0 { s.clip / norm } else { 1.0 };
    let lr = lr_schedule(step, s.max_lr, s.warmup);
    adam.step_scaled(&mut model.params, lr, clip);
    Ok(StepStats { loss, nll, aux, lr, grad_norm: norm, traces })
}

fn merge_traces(mut acc: Vec<LayerTrace>, new: Vec<LayerTrace>) -> Vec<LayerTrace> {
    if acc.is_empty() {
        return new;
    }
    for (a, b) in acc.iter_mut().zip(new) {
        a.experts.extend(b.experts);
        a.gates.extend(b.gates);
        a.features.extend(b.features);
    }
    acc
}

/// Teacher-forced NLL over consecutive windows of `ids`. No parameters change.
pub fn evaluate<F: Real>(
    model: &Model<F>,
    ids: &[usize],
    batch: usize,
    seq: usize,
    oracle_allowed: bool,
    max_batches: usize,
) -> Result<EvalReport> {
    let start = Instant::now();
    let mut batches = eval_batches(ids, batch, seq)?;
    if max_batches > 0 {
        batches.truncate(max_batches);
    }
    let mut total = 0.0;
    let mut tokens = 0;
    let mut loads = LoadCounts::default();
    for b in &batches {
        let mut g = Graph::inference(&model.params);
        let out = model.loss(&mut g, b, oracle_allowed)?;
        let nll = g.value(out.nll).item().as_f64();
        if !nll.is_finite() {
            return Err(Error::NonFinite { step: 0, op: g.fault().map_or("loss", |f| f.op).to_string() });
        }
        total += nll * b.len() as f64;
        tokens += b.len();
        loads.add(&out.traces);
    }
    let nll = total / tokens as f64;
    Ok(EvalReport {
        nll,
        ppl: nll.exp(),
        tokens,
        expert_load: loads.layers.iter().map(|(_, l)| shares(l)).collect(),
        tokens_per_sec: tokens as f64 / start.elapsed().as_secs_f64().max(1e-9),
    })
}

fn write_json_line<T: Serialize>(w: &mut dyn Write, v: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, v)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Trains `model` in place. The learning-rate schedule counts from `adam.step + 1`.
pub fn train<F: Real>(model: &mut Model<F>, adam: &mut Adam, data: &Splits<'_>, s: &TrainSettings, sinks: &mut Sinks<'_>) -> Result<RunSummary> {
    s.validate()?;
    hashmoe_tensor::flush_denormals();
    apply_freeze(model, &s.freeze)?;
    let mut stream = make_batches(data.train, s.batch, s.seq, s.seed)?;
    let run = RunInfo::of(&model.config);
    let mut records = Vec::new();
    let mut traced = LoadCounts::default();
    let mut final_eval = None;
    let begin = Instant::now();
    let first = adam.step + 1;
    let last = adam.step + s.steps;
    for step in first..=last {
        let t0 = Instant::now();
        let micro: Vec<TokenBatch> = (0..s.accum).map(|_| stream.next().expect("batch stream is endless")).collect();
        let stats = train_step(model, adam, &micro, step, s)?;
        let elapsed = t0.elapsed().as_secs_f64().max(1e-9);
        let tokens = (s.accum * s.batch * s.seq) as f64;
        if step + s.trace_last > last {
            traced.add(&stats.traces);
            if let Some(w) = sinks.trace.as_deref_mut() {
                for t in &stats.traces {
                    for row in trace_rows(step, t) {
                        write_json_line(w, &row)?;
                    }
                }
            }
        }
        if s.log_interval > 0 && (step % s.log_interval == 0 || step == last) {
            let rec = MetricsRecord {
                kind: RecordKind::Train,
                step,
                loss: stats.loss,
                nll: stats.nll,
                aux_loss: stats.aux,
                lr: stats.lr,
                ppl: stats.nll.exp(),
                tokens_per_sec: tokens / elapsed,
                updates_per_sec: 1.0 / elapsed,
                expert_load: stats.traces.iter().map(|t| shares(&t.loads())).collect(),
                valid_ppl: None,
                test_ppl: None,
                run: None,
            };
            if let Some(w) = sinks.metrics.as_deref_mut() {
                write_json_line(w, &rec)?;
            }
            records.push(rec);
        }
        let eval_now = step == last || (s.eval_interval > 0 && step % s.eval_interval == 0);
        if eval_now {
            if let Some(valid) = data.valid {
                let v = evaluate(model, valid, s.batch, s.seq, true, s.eval_batches)?;
                let t = match data.test {
                    Some(test) if step == last => Some(evaluate(model, test, s.batch, s.seq, true, s.eval_batches)?),
                    _ => None,
                };
                let rec = MetricsRecord {
                    kind: RecordKind::Eval,
                    step,
                    loss: v.nll,
                    nll: v.nll,
                    aux_loss: 0.0,
                    lr: stats.lr,
                    ppl: v.ppl,
                    tokens_per_sec: v.tokens_per_sec,
                    updates_per_sec: 0.0,
                    expert_load: v.expert_load.clone(),
                    valid_ppl: Some(v.ppl),
                    test_ppl: t.as_ref().map(|t| t.ppl),
                    run: Some(run.clone()),
                };
                if let Some(w) = sinks.metrics.as_deref_mut() {
                    write_json_line(w, &rec)?;
                }
                records.push(rec);
                if step == last {
                    final_eval = Some((v, t));
                }
            }
        }
        let ckpt_now = step == last || (s.checkpoint_interval > 0 && step % s.checkpoint_interval == 0);
        if let (true, Some(dir)) = (ckpt_now, sinks.checkpoint_dir.as_deref()) {
            save_run(dir, model, Some(adam), sinks.vocab)?;
        }
    }
    if let Some(w) = sinks.metrics.as_deref_mut() {
        w.flush()?;
    }
    if let Some(w) = sinks.trace.as_deref_mut() {
        w.flush()?;
    }
    let steps_per_sec = s.steps as f64 / begin.elapsed().as_secs_f64().max(1e-9);
    Ok(RunSummary { records, final_eval, traced_loads: traced, steps_per_sec })
}

/// Restarts training from `model` with fresh optimizer state.
pub fn fine_tune<F: Real>(model: &mut Model<F>, data: &Splits<'_>, s: &TrainSettings, sinks: &mut Sinks<'_>) -> Result<RunSummary> {
    model.params.clear_optimizer_state();
    for id in model.params.ids().collect::<Vec<_>>() {
        model.params.set_trainable(id, true);
    }
    let mut adam = Adam::new(s.adam());
    train(model, &mut adam, data, s, sinks)
}

pub const CKPT_FILE: &str = "model.ckpt";
pub const CONFIG_FILE: &str = "model.json";
pub const VOCAB_FILE: &str = "vocab.tsv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TRACE_FILE: &str = "trace.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub vocab_digest: Option<String>,
    pub tokenizer: Option<Tokenizer>,
    pub step: u64,
}

/// Writes checkpoint, resolved config, vocabulary and manifest into `dir`.
pub fn save_run<F: Real>(dir: &Path, model: &Model<F>, adam: Option<&Adam>, vocab: Option<(&Vocab, Tokenizer)>) -> Result<()> {
    fs::create_dir_all(dir)?;
    checkpoint::save(dir.join(CKPT_FILE), &model.params, adam)?;
    fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(&model.resolved_config())?)?;
    if let Some((v, _)) = vocab {
        fs::write(dir.join(VOCAB_FILE), v.to_tsv())?;
    }
    let manifest = Manifest {
        vocab_digest: vocab.map(|(v, _)| v.digest()),
        tokenizer: vocab.map(|(_, t)| t),
        step: adam.map_or(0, |a| a.step),
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// A run directory loaded back into memory.
pub struct LoadedRun<F: Real> {
    pub model: Model<F>,
    pub adam: Adam,
    pub vocab: Option<Vocab>,
    pub manifest: Manifest,
}

/// Loads a run directory written by [`save_run`]. `ckpt` may name the
/// directory or the checkpoint file inside it.
pub fn load_run<F: Real>(ckpt: &Path) -> Result<LoadedRun<F>> {
    let dir = if ckpt.is_dir() { ckpt.to_path_buf() } else { ckpt.parent().map(Path::to_path_buf).unwrap_or_default() };
    let file = if ckpt.is_dir() { dir.join(CKPT_FILE) } else { ckpt.to_path_buf() };
    let config: ModelConfig = serde_json::from_str(&read_file(&dir.join(CONFIG_FILE))?)?;
    let manifest: Manifest = match dir.join(MANIFEST_FILE) {
        p if p.exists() => serde_json::from_str(&read_file(&p)?)?,
        _ => Manifest { vocab_digest: None, tokenizer: None, step: 0 },
    };
    let vocab = match dir.join(VOCAB_FILE) {
        p if p.exists() => Some(Vocab::from_tsv(&read_file(&p)?)?),
        _ => None,
    };
    if let (Some(v), Some(expected)) = (&vocab, &manifest.vocab_digest) {
        let found = v.digest();
        if &found != expected {
            return Err(Error::VocabMismatch { expected: expected.clone(), found });
        }
    }
    let mut model = Model::new(config, vocab.as_ref())?;
    let step = checkpoint::load(&file, &mut model.params)?;
    let mut adam = Adam::new(AdamConfig::default());
    adam.step = step.unwrap_or(0);
    Ok(LoadedRun { model, adam, vocab, manifest })
}

/// Fails unless `vocab` is the vocabulary recorded for a run.
pub fn check_vocab(manifest: &Manifest, vocab: &Vocab) -> Result<()> {
    match &manifest.vocab_digest {
        Some(expected) if *expected != vocab.digest() => Err(Error::VocabMismatch { expected: expected.clone(), found: vocab.digest() }),
        _ => Ok(()),
    }
}

/// Where the corpus of a configured run comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub train: PathBuf,
    #[serde(default)]
    pub valid: Option<PathBuf>,
    #[serde(default)]
    pub test: Option<PathBuf>,
    #[serde(default)]
    pub tokenizer: Tokenizer,
    /// Existing vocabulary file; built from `train` when absent.
    #[serde(default)]
    pub vocab: Option<PathBuf>,
    #[serde(default = "default_vocab_size")]
    pub vocab_size: usize,
    #[serde(default)]
    pub freq_sample_tokens: Option<usize>,
}

fn default_vocab_size() -> usize {
    8008
}

/// Training configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainSettings,
    pub out_dir: PathBuf,
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: Self = serde_json::from_str(&read_file(path)?)?;
        // relative paths are relative to the config file
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.data.train);
        cfg.data.valid.as_mut().map(fix);
        cfg.data.test.as_mut().map(fix);
        cfg.data.vocab.as_mut().map(fix);
        fix(&mut cfg.out_dir);
        Ok(cfg)
    }
}

/// Encoded corpus splits.
pub struct Prepared {
    pub vocab: Vocab,
    pub tokenizer: Tokenizer,
    pub train: Vec<usize>,
    pub valid: Option<Vec<usize>>,
    pub test: Option<Vec<usize>>,
}

impl Prepared {
    pub fn splits(&self) -> Splits<'_> {
        Splits { train: &self.train, valid: self.valid.as_deref(), test: self.test.as_deref() }
    }
}

pub fn prepare_data(cfg: &DataConfig, vocab: Option<Vocab>) -> Result<Prepared> {
    let text = read_file(&cfg.train)?;
    let vocab = match (vocab, &cfg.vocab) {
        (Some(v), _) => v,
        (None, Some(p)) => Vocab::from_tsv(&read_file(p)?)?,
        (None, None) => Vocab::build(&text, cfg.tokenizer, cfg.vocab_size, cfg.freq_sample_tokens)?,
    };
    let enc = |p: &Option<PathBuf>| -> Result<Option<Vec<usize>>> {
        p.as_ref().map(|p| Ok(vocab.encode(&read_file(p)?, cfg.tokenizer))).transpose()
    };
    Ok(Prepared {
        train: vocab.encode(&text, cfg.tokenizer),
        valid: enc(&cfg.valid)?,
        test: enc(&cfg.test)?,
        tokenizer: cfg.tokenizer,
        vocab,
    })
}

/// Runs a configured experiment, writing metrics, traces and checkpoints to
/// its output directory.
pub fn run_config<F: Real>(cfg: &TrainConfig) -> Result<RunSummary> {
    let data = prepare_data(&cfg.data, None)?;
    let mut mcfg = cfg.model.clone();
    if mcfg.vocab == 0 {
        mcfg.vocab = data.vocab.len();
    } else if mcfg.vocab != data.vocab.len() {
        return Err(Error::Config(format!("model vocab {} != vocabulary size {}", mcfg.vocab, data.vocab.len())));
    }
    let mut model = Model::<F>::new(mcfg, Some(&data.vocab))?;
    let mut adam = Adam::new(cfg.train.adam());
    run_into_dir(&mut model, &mut adam, &data, &cfg.train, &cfg.out_dir, false)
}

/// Trains or fine-tunes with all artifacts written under `out_dir`.
pub fn run_into_dir<F: Real>(
    model: &mut Model<F>,
    adam: &mut Adam,
    data: &Prepared,
    s: &TrainSettings,
    out_dir: &Path,
    fresh_optimizer: bool,
) -> Result<RunSummary> {
    fs::create_dir_all(out_dir)?;
    let mut metrics = BufWriter::new(fs::File::create(out_dir.join(METRICS_FILE))?);
    let mut trace_file = if s.trace_last > 0 { Some(BufWriter::new(fs::File::create(out_dir.join(TRACE_FILE))?)) } else { None };
    let mut sinks = Sinks {
        metrics: Some(&mut metrics),
        trace: trace_file.as_mut().map(|w| w as &mut dyn Write),
        checkpoint_dir: Some(out_dir.to_path_buf()),
        vocab: Some((&data.vocab, data.tokenizer)),
    };
    if fresh_optimizer {
        fine_tune(model, &data.splits(), s, &mut sinks)
    } else {
        train(model, adam, &data.splits(), s, &mut sinks)
    }
}

/// Fine-tuning configuration file. The model and vocabulary come from the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainSettings,
    pub out_dir: PathBuf,
}

impl FinetuneConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_file(path)?;
        let mut cfg: Self = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.data.train);
        cfg.data.valid.as_mut().map(fix);
        cfg.data.test.as_mut().map(fix);
        fix(&mut cfg.out_dir);
        Ok(cfg)
    }
}

/// Loads `ckpt`, then fine-tunes it on the configured corpus with fresh optimizer state.
pub fn fine_tune_run<F: Real>(ckpt: &Path, cfg: &FinetuneConfig) -> Result<RunSummary> {
    let mut run = load_run::<F>(ckpt)?;
    let vocab = run.vocab.take().ok_or_else(|| Error::Config(format!("{}: run has no vocabulary", ckpt.display())))?;
    let mut data_cfg = cfg.data.clone();
    if let Some(t) = run.manifest.tokenizer {
        data_cfg.tokenizer = t;
    }
    let data = prepare_data(&data_cfg, Some(vocab))?;
    let mut adam = Adam::new(cfg.train.adam());
    run_into_dir(&mut run.model, &mut adam, &data, &cfg.train, &cfg.out_dir, true)
}
