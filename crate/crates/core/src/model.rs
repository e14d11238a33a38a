//! Decoder-only transformer with pluggable feedforward routing.

use std::collections::BTreeSet;
use std::path::PathBuf;

use hashmoe_tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenBatch, Vocab, BOS};
use crate::error::{Error, Result};
use crate::hashing::{self, HashRoutingTable};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HashFeature {
    Current,
    Previous,
    Bigram,
    Position,
    OracleFuture,
    PredictedFuture,
}

/// Where a hash layer's token to expert table comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TableSource {
    Random {
        #[serde(default)]
        seed: u64,
    },
    /// Greedy balanced assignment over the vocabulary's frequencies.
    Balanced,
    File {
        path: PathBuf,
    },
    Inline {
        table: Vec<usize>,
    },
}

impl Default for TableSource {
    fn default() -> Self {
        TableSource::Random { seed: 0 }
    }
}

impl TableSource {
    pub fn seed(&self) -> u64 {
        match self {
            TableSource::Random { seed } => *seed,
            _ => 0,
        }
    }
}

/// Frozen next-token predictor used by predicted-future routing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictorRef {
    pub config: PathBuf,
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RouterSpec {
    Dense,
    Hash {
        #[serde(rename = "K")]
        k: usize,
        feature: HashFeature,
        #[serde(default)]
        table: TableSource,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        predictor: Option<PredictorRef>,
    },
    Multihash {
        #[serde(rename = "K")]
        k: usize,
        #[serde(rename = "N")]
        n: usize,
        #[serde(default)]
        seed: u64,
    },
    Switch {
        #[serde(rename = "K")]
        k: usize,
        alpha: f64,
    },
    TokenSwitch {
        #[serde(rename = "K")]
        k: usize,
        alpha: f64,
    },
}

impl RouterSpec {
    pub fn name(&self) -> &'static str {
        match self {
            RouterSpec::Dense => "dense",
            RouterSpec::Hash { .. } => "hash",
            RouterSpec::Multihash { .. } => "multihash",
            RouterSpec::Switch { .. } => "switch",
            RouterSpec::TokenSwitch { .. } => "token_switch",
        }
    }

    pub fn experts(&self) -> usize {
        match self {
            RouterSpec::Dense => 1,
            RouterSpec::Hash { k, .. }
            | RouterSpec::Multihash { k, .. }
            | RouterSpec::Switch { k, .. }
            | RouterSpec::TokenSwitch { k, .. } => *k,
        }
    }

    pub fn hashes(&self) -> usize {
        match self {
            RouterSpec::Multihash { n, .. } => *n,
            _ => 1,
        }
    }

    pub fn alpha(&self) -> f64 {
        match self {
            RouterSpec::Switch { alpha, .. } | RouterSpec::TokenSwitch { alpha, .. } => *alpha,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseLayer {
    pub layer: usize,
    pub router: RouterSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d: usize,
    #[serde(rename = "D")]
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_seq: usize,
    #[serde(default)]
    pub sparse_layers: Vec<SparseLayer>,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_init_std() -> f64 {
    0.02
}

impl ModelConfig {
    pub fn dense(vocab: usize, d: usize, hidden: usize, layers: usize, heads: usize, max_seq: usize) -> Self {
        Self {
            vocab,
            d,
            hidden,
            layers,
            heads,
            max_seq,
            sparse_layers: Vec::new(),
            precision: Precision::F32,
            init_std: default_init_std(),
            seed: 0,
        }
    }

    pub fn with_router(mut self, layer: usize, router: RouterSpec) -> Self {
        self.sparse_layers.retain(|s| s.layer != layer);
        self.sparse_layers.push(SparseLayer { layer, router });
        self.sparse_layers.sort_by_key(|s| s.layer);
        self
    }

    pub fn router(&self, layer: usize) -> &RouterSpec {
        self.sparse_layers.iter().find(|s| s.layer == layer).map_or(&RouterSpec::Dense, |s| &s.router)
    }

    /// First non-dense router, used to label runs.
    pub fn primary_router(&self) -> &RouterSpec {
        self.sparse_layers.iter().map(|s| &s.router).find(|r| **r != RouterSpec::Dense).unwrap_or(&RouterSpec::Dense)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab == 0 || self.d == 0 || self.hidden == 0 || self.layers == 0 || self.heads == 0 || self.max_seq == 0 {
            return bad("vocab, d, D, layers, heads and max_seq must all be at least 1".into());
        }
        if self.d % self.heads != 0 {
            return bad(format!("d={} is not divisible by heads={}", self.d, self.heads));
        }
        let mut seen = BTreeSet::new();
        for s in &self.sparse_layers {
            if s.layer >= self.layers {
                return bad(format!("sparse layer index {} >= layers {}", s.layer, self.layers));
            }
            if !seen.insert(s.layer) {
                return bad(format!("layer {} has two routers", s.layer));
            }
            match &s.router {
                RouterSpec::Dense => {}
                r if r.experts() == 0 => return Err(Error::NoExperts),
                RouterSpec::Multihash { n, .. } => {
                    if *n == 0 || self.d % n != 0 || self.hidden % n != 0 {
                        return bad(format!("hash count N={n} must divide d={} and D={}", self.d, self.hidden));
                    }
                }
                RouterSpec::Switch { alpha, .. } | RouterSpec::TokenSwitch { alpha, .. } => {
                    if !(*alpha >= 0.0) {
                        return bad(format!("load-balance coefficient must be >= 0, got {alpha}"));
                    }
                }
                RouterSpec::Hash { .. } => {}
            }
        }
        Ok(())
    }

    pub fn uses_oracle(&self) -> bool {
        self.sparse_layers
            .iter()
            .any(|s| matches!(s.router, RouterSpec::Hash { feature: HashFeature::OracleFuture, .. }))
    }
}

/// Parameter counts. `per_expert` is summed over sparse layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub shared: u64,
    pub per_expert: u64,
    pub total: u64,
}

fn dense_ffn_params(d: u64, hidden: u64) -> u64 {
    2 * d * hidden + hidden + d
}

/// Exact parameter counts of the model the config describes.
pub fn count_params(cfg: &ModelConfig) -> ParamCount {
    let (v, d, dh) = (cfg.vocab as u64, cfg.d as u64, cfg.hidden as u64);
    let per_layer_shared = 2 * 2 * d + (3 * d * d + 3 * d) + (d * d + d);
    let mut shared = v * d + cfg.max_seq as u64 * d + 2 * d + cfg.layers as u64 * per_layer_shared;
    let mut per_expert = 0;
    let mut total_experts = 0;
    for l in 0..cfg.layers {
        let r = cfg.router(l);
        let ffn = dense_ffn_params(d, dh);
        match r {
            RouterSpec::Dense => shared += ffn,
            _ => {
                per_expert += ffn;
                total_experts += r.experts() as u64 * ffn;
                let k = r.experts() as u64;
                match r {
                    RouterSpec::Switch { .. } => shared += d * k + k,
                    RouterSpec::TokenSwitch { .. } => shared += v * d + d * k + k,
                    _ => {}
                }
            }
        }
    }
    ParamCount { shared, per_expert, total: shared + total_experts }
}

/// Multiply-accumulates per token at full context. Only the routed expert counts.
pub fn flops_per_token(cfg: &ModelConfig) -> u64 {
    let (v, d, dh, t) = (cfg.vocab as u64, cfg.d as u64, cfg.hidden as u64, cfg.max_seq as u64);
    let mut macs = v * d;
    for l in 0..cfg.layers {
        macs += 4 * d * d + 2 * t * d + 2 * d * dh;
        match cfg.router(l) {
            RouterSpec::Switch { k, .. } | RouterSpec::TokenSwitch { k, .. } => macs += d * *k as u64,
            _ => {}
        }
    }
    macs
}

/// Routing decisions of one sparse layer for one forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub layer: usize,
    pub k: usize,
    /// Hash count; `experts` holds `segments` entries per position.
    pub segments: usize,
    pub experts: Vec<usize>,
    pub gates: Vec<f64>,
    pub features: Vec<usize>,
}

impl LayerTrace {
    pub fn positions(&self) -> usize {
        self.features.len()
    }

    pub fn loads(&self) -> Vec<u64> {
        let mut out = vec![0u64; self.k];
        for &e in &self.experts {
            out[e] += 1;
        }
        out
    }
}

struct BlockIds {
    ln1: (ParamId, ParamId),
    qkv: (ParamId, ParamId),
    out: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ffn: FfnIds,
}

enum FfnIds {
    Dense { a: (ParamId, ParamId), b: (ParamId, ParamId) },
    Bank(BankIds),
}

struct BankIds {
    a: (ParamId, ParamId),
    b: (ParamId, ParamId),
    router: Option<(ParamId, ParamId)>,
    router_emb: Option<ParamId>,
}

enum Router<F: Real> {
    Dense,
    Hash { k: usize, feature: HashFeature, seed: u64, table: Vec<usize>, predictor: Option<Box<Model<F>>> },
    Multihash { k: usize, tables: Vec<Vec<usize>> },
    Switch { k: usize, alpha: f64, token: bool },
}

/// Parameters plus resolved routers.
pub struct Model<F: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
    tok_emb: ParamId,
    pos_emb: ParamId,
    ln_f: (ParamId, ParamId),
    blocks: Vec<BlockIds>,
    routers: Vec<Router<F>>,
}

/// Result of a forward pass.
pub struct Forward {
    pub logits: Var,
    /// Summed load-balance terms of all switch layers.
    pub aux: Option<Var>,
    pub traces: Vec<LayerTrace>,
}

/// Training objective pieces.
pub struct Loss {
    pub total: Var,
    pub nll: Var,
    pub aux: Option<Var>,
    pub traces: Vec<LayerTrace>,
}

struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init {
    fn weight<F: Real>(&mut self, shape: &[usize]) -> Tensor<F> {
        let (rng, normal) = (&mut self.rng, &self.normal);
        Tensor::from_fn(shape, |_| F::from_f64(normal.sample(rng)))
    }
}

impl<F: Real> Model<F> {
    /// Builds a freshly initialized model. `vocab` is needed for balanced
    /// tables and to check table files.
    pub fn new(config: ModelConfig, vocab: Option<&Vocab>) -> Result<Self> {
        config.validate()?;
        let std = config.init_std;
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(format!("init_std {std}: {e}")))?;
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(config.seed), normal };
        let mut ps = ParamStore::new();
        let (v, d, dh) = (config.vocab, config.d, config.hidden);
        let zeros = |s: &[usize]| Tensor::<F>::zeros(s);
        let ones = |s: &[usize]| Tensor::<F>::full(s, F::one());

        let tok_emb = ps.insert("tok_emb", init.weight(&[v, d]))?;
        let pos_emb = ps.insert("pos_emb", init.weight(&[config.max_seq, d]))?;
        let mut blocks = Vec::new();
        let mut routers = Vec::new();
        for l in 0..config.layers {
            let p = |s: &str| format!("layer{l}.{s}");
            let ln1 = (ps.insert(p("ln1.gain"), ones(&[d]))?, ps.insert(p("ln1.bias"), zeros(&[d]))?);
            let qkv = (ps.insert(p("attn.qkv.w"), init.weight(&[d, 3 * d]))?, ps.insert(p("attn.qkv.b"), zeros(&[3 * d]))?);
            let out = (ps.insert(p("attn.out.w"), init.weight(&[d, d]))?, ps.insert(p("attn.out.b"), zeros(&[d]))?);
            let ln2 = (ps.insert(p("ln2.gain"), ones(&[d]))?, ps.insert(p("ln2.bias"), zeros(&[d]))?);
            let spec = config.router(l).clone();
            let ffn = match &spec {
                RouterSpec::Dense => FfnIds::Dense {
                    a: (ps.insert(p("ffn.a.w"), init.weight(&[d, dh]))?, ps.insert(p("ffn.a.b"), zeros(&[dh]))?),
                    b: (ps.insert(p("ffn.b.w"), init.weight(&[dh, d]))?, ps.insert(p("ffn.b.b"), zeros(&[d]))?),
                },
                r => {
                    let (k, n) = (r.experts(), r.hashes());
                    let a = (
                        ps.insert(p("expert.a.w"), init.weight(&[n, k, d, dh / n]))?,
                        ps.insert(p("expert.a.b"), zeros(&[n, k, dh / n]))?,
                    );
                    let b = (
                        ps.insert(p("expert.b.w"), init.weight(&[n, k, dh, d / n]))?,
                        ps.insert(p("expert.b.b"), zeros(&[n, k, d / n]))?,
                    );
                    let (router, router_emb) = match r {
                        RouterSpec::Switch { .. } | RouterSpec::TokenSwitch { .. } => {
                            let emb = if matches!(r, RouterSpec::TokenSwitch { .. }) {
                                Some(ps.insert(p("router.emb"), init.weight(&[v, d]))?)
                            } else {
                                None
                            };
                            let w = (ps.insert(p("router.w"), init.weight(&[d, k]))?, ps.insert(p("router.b"), zeros(&[k]))?);
                            (Some(w), emb)
                        }
                        _ => (None, None),
                    };
                    FfnIds::Bank(BankIds { a, b, router, router_emb })
                }
            };
            blocks.push(BlockIds { ln1, qkv, out, ln2, ffn });
            routers.push(resolve_router(&spec, &config, vocab)?);
        }
        let ln_f = (ps.insert("ln_f.gain", ones(&[d]))?, ps.insert("ln_f.bias", zeros(&[d]))?);
        Ok(Self { config, params: ps, tok_emb, pos_emb, ln_f, blocks, routers })
    }

    /// Config with file and balanced tables replaced by their contents, so the
    /// model can be rebuilt without the original files.
    pub fn resolved_config(&self) -> ModelConfig {
        let mut cfg = self.config.clone();
        for s in &mut cfg.sparse_layers {
            if let (RouterSpec::Hash { table, .. }, Router::Hash { table: resolved, .. }) = (&mut s.router, &self.routers[s.layer]) {
                if !matches!(table, TableSource::Random { .. }) {
                    *table = TableSource::Inline { table: resolved.clone() };
                }
            }
        }
        cfg
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    /// Resolved hash table of `layer`, if it is a single-hash layer.
    pub fn hash_table(&self, layer: usize) -> Option<&[usize]> {
        match self.routers.get(layer) {
            Some(Router::Hash { table, .. }) => Some(table),
            _ => None,
        }
    }

    pub fn set_predictor(&mut self, layer: usize, predictor: Model<F>) -> Result<()> {
        match self.routers.get_mut(layer) {
            Some(Router::Hash { predictor: p, .. }) => {
                *p = Some(Box::new(predictor));
                Ok(())
            }
            _ => Err(Error::Config(format!("layer {layer} is not a hash layer"))),
        }
    }

    /// Runs the network on `batch x seq` ids. `targets` feeds oracle routing.
    pub fn forward(
        &self,
        g: &mut Graph<'_, F>,
        inputs: &[usize],
        targets: Option<&[usize]>,
        batch: usize,
        seq: usize,
    ) -> Result<Forward> {
        let n = batch * seq;
        if inputs.len() != n || batch == 0 || seq == 0 {
            return Err(Error::Config(format!("expected {batch}x{seq} inputs, got {}", inputs.len())));
        }
        if seq > self.config.max_seq {
            return Err(Error::Config(format!("sequence length {seq} exceeds max_seq {}", self.config.max_seq)));
        }
        if let Some(&bad) = inputs.iter().find(|&&i| i >= self.config.vocab) {
            return Err(Error::IdOutOfRange { id: bad, size: self.config.vocab });
        }
        let d = self.config.d;
        let tok = g.param(self.tok_emb);
        let pos = g.param(self.pos_emb);
        let positions: Vec<usize> = (0..n).map(|i| i % seq).collect();
        let x = g.embedding(tok, inputs)?;
        let p = g.gather_rows(pos, &positions)?;
        let mut x = g.add(x, p)?;
        let mut aux: Option<Var> = None;
        let mut traces = Vec::new();

        for (l, block) in self.blocks.iter().enumerate() {
            let h = self.norm(g, x, block.ln1)?;
            let (w, b) = (g.param(block.qkv.0), g.param(block.qkv.1));
            let qkv = g.matmul(h, w)?;
            let qkv = g.add_bias(qkv, b)?;
            let att = g.causal_attention(qkv, batch, seq, self.config.heads)?;
            let (w, b) = (g.param(block.out.0), g.param(block.out.1));
            let o = g.matmul(att, w)?;
            let o = g.add_bias(o, b)?;
            x = g.add(x, o)?;

            let h = self.norm(g, x, block.ln2)?;
            let f = match (&block.ffn, &self.routers[l]) {
                (FfnIds::Dense { a, b }, _) => {
                    let (aw, ab, bw, bb) = (g.param(a.0), g.param(a.1), g.param(b.0), g.param(b.1));
                    let u = g.matmul(h, aw)?;
                    let u = g.add_bias(u, ab)?;
                    let u = g.relu(u);
                    let y = g.matmul(u, bw)?;
                    g.add_bias(y, bb)?
                }
                (FfnIds::Bank(bank), Router::Hash { k, feature, seed, table, predictor }) => {
                    let predicted = match (feature, predictor) {
                        (HashFeature::PredictedFuture, Some(p)) => Some(p.predict(inputs, batch, seq)?),
                        (HashFeature::PredictedFuture, None) => {
                            return Err(Error::Config(format!("layer {l}: predicted_future routing has no predictor loaded")))
                        }
                        _ => None,
                    };
                    let (features, experts) =
                        hash_route(*feature, table, *k, *seed, inputs, targets, predicted.as_deref(), seq)?;
                    let y = self.bank_ffn(g, h, n, &[experts.clone()], *k, bank)?;
                    traces.push(LayerTrace { layer: l, k: *k, segments: 1, gates: vec![1.0; n], experts, features });
                    y
                }
                (FfnIds::Bank(bank), Router::Multihash { k, tables }) => {
                    let choice: Vec<Vec<usize>> = tables.iter().map(|t| inputs.iter().map(|&x| t[x]).collect()).collect();
                    let y = self.bank_ffn(g, h, n, &choice, *k, bank)?;
                    let segs = tables.len();
                    let experts = (0..n * segs).map(|i| choice[i % segs][i / segs]).collect();
                    traces.push(LayerTrace { layer: l, k: *k, segments: segs, gates: vec![1.0; n], experts, features: inputs.to_vec() });
                    y
                }
                (FfnIds::Bank(bank), Router::Switch { k, alpha, token }) => {
                    let (rw, rb) = bank.router.expect("switch layer has router weights");
                    let rin = match bank.router_emb {
                        Some(emb) if *token => {
                            let e = g.param(emb);
                            g.embedding(e, inputs)?
                        }
                        _ => h,
                    };
                    let (rw, rb) = (g.param(rw), g.param(rb));
                    let r = g.matmul(rin, rw)?;
                    let r = g.add_bias(r, rb)?;
                    let probs = g.softmax_rows(r);
                    let experts = argmax_rows(g.value(probs).data(), *k);
                    let gate = g.pick(probs, &experts)?;
                    let gates: Vec<f64> = g.value(gate).to_f64_vec();
                    let y = self.bank_ffn(g, h, n, &[experts.clone()], *k, bank)?;
                    let y = g.mul_rows(y, gate)?;
                    let term = balance_term(g, probs, &experts, *k, *alpha)?;
                    aux = Some(match aux {
                        Some(a) => g.add(a, term)?,
                        None => term,
                    });
                    traces.push(LayerTrace { layer: l, k: *k, segments: 1, experts, gates, features: inputs.to_vec() });
                    y
                }
                (FfnIds::Bank(_), Router::Dense) => unreachable!("dense router always has dense weights"),
            };
            debug_assert_eq!(g.shape(f), &[n, d]);
            x = g.add(x, f)?;
        }
        let x = self.norm(g, x, self.ln_f)?;
        let logits = g.matmul_t(x, tok)?;
        Ok(Forward { logits, aux, traces })
    }

    /// Mean NLL plus load-balance terms for a batch. Oracle routing reads the
    /// batch targets only when `oracle_allowed`.
    pub fn loss(&self, g: &mut Graph<'_, F>, batch: &TokenBatch, oracle_allowed: bool) -> Result<Loss> {
        let targets = oracle_allowed.then_some(batch.targets.as_slice());
        let fwd = self.forward(g, &batch.inputs, targets, batch.batch, batch.seq)?;
        let nll = g.cross_entropy(fwd.logits, &batch.targets)?;
        let total = match fwd.aux {
            Some(a) => g.add(nll, a)?,
            None => nll,
        };
        Ok(Loss { total, nll, aux: fwd.aux, traces: fwd.traces })
    }

    /// Per-position argmax of the next-token distribution.
    pub fn predict(&self, inputs: &[usize], batch: usize, seq: usize) -> Result<Vec<usize>> {
        let mut g = Graph::inference(&self.params);
        let fwd = self.forward(&mut g, inputs, None, batch, seq)?;
        Ok(argmax_rows(g.value(fwd.logits).data(), self.config.vocab))
    }

    fn norm(&self, g: &mut Graph<'_, F>, x: Var, (gain, bias): (ParamId, ParamId)) -> Result<Var> {
        let (gn, bs) = (g.param(gain), g.param(bias));
        Ok(g.layer_norm(x, gn, bs, LN_EPS)?)
    }

    /// Segmented expert FFN. `choice[m][p]` is the expert of position `p` in
    /// segment `m`; only selected experts enter the tape.
    fn bank_ffn(&self, g: &mut Graph<'_, F>, h: Var, n: usize, choice: &[Vec<usize>], k: usize, bank: &BankIds) -> Result<Var> {
        let (d, dh) = (self.config.d, self.config.hidden);
        let segs = choice.len();
        let groups: Vec<Vec<Vec<usize>>> = choice
            .iter()
            .map(|c| {
                let mut grp = vec![Vec::new(); k];
                for (p, &e) in c.iter().enumerate() {
                    grp[e].push(p);
                }
                grp
            })
            .collect();
        let project = |g: &mut Graph<'_, F>, input: Var, (w, b): (ParamId, ParamId), rows: usize, cols: usize| -> Result<Var> {
            let mut outs = Vec::with_capacity(segs);
            for (m, grp) in groups.iter().enumerate() {
                let mut parts = Vec::new();
                for (e, idx) in grp.iter().enumerate() {
                    if idx.is_empty() {
                        continue;
                    }
                    let sub = g.gather_rows(input, idx)?;
                    let wv = g.param_block(w, m * k + e, &[rows, cols / segs])?;
                    let bv = g.param_block(b, m * k + e, &[cols / segs])?;
                    let y = g.matmul(sub, wv)?;
                    parts.push((g.add_bias(y, bv)?, idx.clone()));
                }
                outs.push(g.scatter_rows(parts, n, cols / segs)?);
            }
            Ok(if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? })
        };
        let v = project(g, h, bank.a, d, dh)?;
        let v = g.relu(v);
        project(g, v, bank.b, dh, d)
    }
}

fn resolve_router<F: Real>(spec: &RouterSpec, cfg: &ModelConfig, vocab: Option<&Vocab>) -> Result<Router<F>> {
    let v = cfg.vocab;
    Ok(match spec {
        RouterSpec::Dense => Router::Dense,
        RouterSpec::Hash { k, feature, table, predictor } => {
            let needs_table = !matches!(feature, HashFeature::Bigram | HashFeature::Position);
            let resolved = if needs_table { resolve_table(table, *k, v, vocab)? } else { Vec::new() };
            let predictor = match (feature, predictor) {
                (HashFeature::PredictedFuture, Some(p)) => Some(Box::new(load_predictor::<F>(p, cfg)?)),
                _ => None,
            };
            Router::Hash { k: *k, feature: *feature, seed: table.seed(), table: resolved, predictor }
        }
        RouterSpec::Multihash { k, n, seed } => Router::Multihash {
            k: *k,
            tables: (0..*n as u64).map(|m| hashing::random_assignment(v, *k, seed.wrapping_add(m))).collect::<Result<_>>()?,
        },
        RouterSpec::Switch { k, alpha } => Router::Switch { k: *k, alpha: *alpha, token: false },
        RouterSpec::TokenSwitch { k, alpha } => Router::Switch { k: *k, alpha: *alpha, token: true },
    })
}

fn resolve_table(src: &TableSource, k: usize, v: usize, vocab: Option<&Vocab>) -> Result<Vec<usize>> {
    let table = match src {
        TableSource::Random { seed } => hashing::random_assignment(v, k, *seed)?,
        TableSource::Balanced => {
            let vocab = vocab.ok_or_else(|| Error::Config("balanced tables need the training vocabulary".into()))?;
            hashing::balanced_assignment(vocab.freq(), k)?
        }
        TableSource::File { path } => {
            let t = HashRoutingTable::load(path)?;
            if let Some(vocab) = vocab {
                t.check_vocab(vocab)?;
            }
            if t.k != k {
                return Err(Error::Config(format!("{}: table has K={} but the layer expects {k}", path.display(), t.k)));
            }
            t.table
        }
        TableSource::Inline { table } => table.clone(),
    };
    if table.len() != v {
        return Err(Error::Config(format!("routing table covers {} ids, vocabulary has {v}", table.len())));
    }
    if let Some(&bad) = table.iter().find(|&&e| e >= k) {
        return Err(Error::Config(format!("routing table entry {bad} out of range for K={k}")));
    }
    Ok(table)
}

fn load_predictor<F: Real>(p: &PredictorRef, cfg: &ModelConfig) -> Result<Model<F>> {
    let pcfg: ModelConfig = serde_json::from_str(&crate::error::read_file(&p.config)?)?;
    if pcfg.vocab != cfg.vocab {
        return Err(Error::Config(format!("predictor vocabulary {} != model vocabulary {}", pcfg.vocab, cfg.vocab)));
    }
    if pcfg.sparse_layers.iter().any(|s| matches!(s.router, RouterSpec::Hash { feature: HashFeature::PredictedFuture | HashFeature::OracleFuture, .. })) {
        return Err(Error::Config("predictor may not itself route on future tokens".into()));
    }
    let mut m = Model::new(pcfg, None)?;
    hashmoe_tensor::checkpoint::load(&p.checkpoint, &mut m.params)?;
    for id in m.params.ids().collect::<Vec<_>>() {
        m.params.set_trainable(id, false);
    }
    Ok(m)
}

/// Features and experts of a hash layer for `inputs` laid out as rows of `seq`.
#[allow(clippy::too_many_arguments)]
pub fn hash_route(
    feature: HashFeature,
    table: &[usize],
    k: usize,
    seed: u64,
    inputs: &[usize],
    targets: Option<&[usize]>,
    predicted: Option<&[usize]>,
    seq: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let prev = |i: usize| if i % seq == 0 { BOS } else { inputs[i - 1] };
    let n = inputs.len();
    let features: Vec<usize> = match feature {
        HashFeature::Current | HashFeature::Bigram => inputs.to_vec(),
        HashFeature::Previous => (0..n).map(prev).collect(),
        HashFeature::Position => (0..n).map(|i| i % seq).collect(),
        HashFeature::OracleFuture => targets.ok_or(Error::OracleNotAllowed)?.to_vec(),
        HashFeature::PredictedFuture => predicted
            .ok_or_else(|| Error::Config("predicted_future routing without predictions".into()))?
            .to_vec(),
    };
    let experts = match feature {
        HashFeature::Bigram => (0..n).map(|i| hashing::route_bigram(prev(i), inputs[i], k, seed)).collect(),
        HashFeature::Position => features.iter().map(|&t| hashing::route_position(t, k)).collect(),
        _ => features
            .iter()
            .map(|&f| table.get(f).copied().ok_or(Error::IdOutOfRange { id: f, size: table.len() }))
            .collect::<Result<_>>()?,
    };
    Ok((features, experts))
}

/// Row-wise argmax with ties to the lowest index.
pub fn argmax_rows<F: Real>(data: &[F], cols: usize) -> Vec<usize> {
    data.chunks_exact(cols)
        .map(|row| {
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// `alpha * K * sum_i f_i P_i`, with `f_i` the routed fraction (constant) and
/// `P_i` the mean router probability (differentiable).
fn balance_term<F: Real>(g: &mut Graph<'_, F>, probs: Var, experts: &[usize], k: usize, alpha: f64) -> Result<Var> {
    let n = experts.len();
    let mut frac = vec![0.0; k];
    for &e in experts {
        frac[e] += 1.0 / n as f64;
    }
    let w = Tensor::from_fn(&[n, k], |i| F::from_f64(alpha * k as f64 * frac[i % k] / n as f64));
    Ok(g.weighted_sum(probs, w)?)
}

/// Freeze-pattern test. A pattern matches a name when it matches the whole name or any suffix that starts at a
/// dot-separated component; `*` matches any run of characters.
pub fn matches_pattern(pattern: &str, name: &str) -> bool {
    if glob(pattern.as_bytes(), name.as_bytes()) {
        return true;
    }
    name.match_indices('.').any(|(i, _)| glob(pattern.as_bytes(), name[i + 1..].as_bytes()))
}

fn glob(p: &[u8], s: &[u8]) -> bool {
    let (mut pi, mut si) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while si < s.len() {
        if pi < p.len() && p[pi] == b'*' {
            star = Some((pi, si));
            pi += 1;
        } else if pi < p.len() && p[pi] == s[si] {
            pi += 1;
            si += 1;
        } else if let Some((sp, ss)) = star {
            pi = sp + 1;
            si = ss + 1;
            star = Some((sp, ss + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|&c| c == b'*')
}
