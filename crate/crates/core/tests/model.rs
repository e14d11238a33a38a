use hashmoe::corpus::TokenBatch;
use hashmoe::model::*;
use hashmoe::Error;
use hashmoe_tensor::Graph;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---- plain f64 reference forward ------------------------------------------

struct Ref<'a> {
    m: &'a Model<f64>,
}

impl Ref<'_> {
    fn p(&self, name: &str) -> &[f64] {
        self.m.params.by_name(name).unwrap_or_else(|| panic!("no parameter {name}")).value.data()
    }

    /// `x W + b` with `W` stored row-major `[rows x cols]`, read from `offset`.
    fn affine(x: &[f64], w: &[f64], b: &[f64], cols: usize) -> Vec<f64> {
        (0..cols).map(|j| b[j] + x.iter().enumerate().map(|(i, xi)| xi * w[i * cols + j]).sum::<f64>()).collect()
    }

    fn norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        x.iter().enumerate().map(|(j, v)| (v - mean) / (var + LN_EPS).sqrt() * gain[j] + bias[j]).collect()
    }

    fn softmax(z: &[f64]) -> Vec<f64> {
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }

    /// Expert `(segment m, choice e)` of a bank with `n` segments and `k` choices.
    fn block<'b>(w: &'b [f64], m: usize, e: usize, k: usize, size: usize) -> &'b [f64] {
        let i = m * k + e;
        &w[i * size..(i + 1) * size]
    }

    /// FFN output of layer `l` at flat position `i` given its normed input.
    fn ffn(&self, l: usize, i: usize, h: &[f64], inputs: &[usize], targets: &[usize], seq: usize) -> Vec<f64> {
        let cfg = &self.m.config;
        let (d, dh) = (cfg.d, cfg.hidden);
        let p = |s: &str| self.p(&format!("layer{l}.{s}"));
        let relu = |v: Vec<f64>| v.into_iter().map(|x| x.max(0.0)).collect::<Vec<_>>();
        let expert = |choices: &[usize], k: usize| {
            let n = choices.len();
            let mut v = Vec::new();
            for (m, &e) in choices.iter().enumerate() {
                v.extend(Self::affine(h, Self::block(p("expert.a.w"), m, e, k, d * dh / n), Self::block(p("expert.a.b"), m, e, k, dh / n), dh / n));
            }
            let v = relu(v);
            let mut out = Vec::new();
            for (m, &e) in choices.iter().enumerate() {
                out.extend(Self::affine(&v, Self::block(p("expert.b.w"), m, e, k, dh * d / n), Self::block(p("expert.b.b"), m, e, k, d / n), d / n));
            }
            out
        };
        match cfg.router(l) {
            RouterSpec::Dense => {
                let u = relu(Self::affine(h, p("ffn.a.w"), p("ffn.a.b"), dh));
                Self::affine(&u, p("ffn.b.w"), p("ffn.b.b"), d)
            }
            RouterSpec::Hash { k, feature, table: table_src, .. } => {
                let prev = if i % seq == 0 { hashmoe::corpus::BOS } else { inputs[i - 1] };
                let table = self.m.hash_table(l).unwrap_or(&[]);
                let e = match feature {
                    HashFeature::Current => table[inputs[i]],
                    HashFeature::Previous => table[prev],
                    HashFeature::Bigram => hashmoe::hashing::route_bigram(prev, inputs[i], *k, table_src.seed()),
                    HashFeature::Position => (i % seq) % k,
                    HashFeature::OracleFuture => table[targets[i]],
                    HashFeature::PredictedFuture => unimplemented!(),
                };
                expert(&[e], *k)
            }
            RouterSpec::Multihash { k, n, seed } => {
                let choices: Vec<usize> =
                    (0..*n).map(|m| hashmoe::hashing::route_random(inputs[i], *k, seed + m as u64)).collect();
                expert(&choices, *k)
            }
            RouterSpec::Switch { k, .. } | RouterSpec::TokenSwitch { k, .. } => {
                let rin = if matches!(cfg.router(l), RouterSpec::TokenSwitch { .. }) {
                    p("router.emb")[inputs[i] * d..(inputs[i] + 1) * d].to_vec()
                } else {
                    h.to_vec()
                };
                let probs = Self::softmax(&Self::affine(&rin, p("router.w"), p("router.b"), *k));
                let best = (0..*k).fold(0, |b, j| if probs[j] > probs[b] { j } else { b });
                expert(&[best], *k).into_iter().map(|v| v * probs[best]).collect()
            }
        }
    }

    fn logits(&self, inputs: &[usize], targets: &[usize], batch: usize, seq: usize) -> Vec<f64> {
        let cfg = &self.m.config;
        let (d, heads, v) = (cfg.d, cfg.heads, cfg.vocab);
        let dhd = d / heads;
        let n = batch * seq;
        let tok = self.p("tok_emb");
        let pos = self.p("pos_emb");
        let mut x: Vec<Vec<f64>> =
            (0..n).map(|i| (0..d).map(|j| tok[inputs[i] * d + j] + pos[(i % seq) * d + j]).collect()).collect();
        for l in 0..cfg.layers {
            let p = |s: &str| self.p(&format!("layer{l}.{s}"));
            let qkv: Vec<Vec<f64>> =
                x.iter().map(|r| Self::affine(&Self::norm(r, p("ln1.gain"), p("ln1.bias")), p("attn.qkv.w"), p("attn.qkv.b"), 3 * d)).collect();
            let mut att = vec![vec![0.0; d]; n];
            for b in 0..batch {
                for hd in 0..heads {
                    for t in 0..seq {
                        let q = &qkv[b * seq + t][hd * dhd..(hd + 1) * dhd];
                        let scores: Vec<f64> = (0..=t)
                            .map(|s| {
                                let kk = &qkv[b * seq + s][d + hd * dhd..d + (hd + 1) * dhd];
                                q.iter().zip(kk).map(|(a, c)| a * c).sum::<f64>() / (dhd as f64).sqrt()
                            })
                            .collect();
                        let w = Self::softmax(&scores);
                        for (s, ws) in w.iter().enumerate() {
                            for j in 0..dhd {
                                att[b * seq + t][hd * dhd + j] += ws * qkv[b * seq + s][2 * d + hd * dhd + j];
                            }
                        }
                    }
                }
            }
            for i in 0..n {
                let o = Self::affine(&att[i], p("attn.out.w"), p("attn.out.b"), d);
                for j in 0..d {
                    x[i][j] += o[j];
                }
                let h = Self::norm(&x[i], p("ln2.gain"), p("ln2.bias"));
                let f = self.ffn(l, i, &h, inputs, targets, seq);
                for j in 0..d {
                    x[i][j] += f[j];
                }
            }
        }
        let mut out = Vec::with_capacity(n * v);
        for r in &x {
            let h = Self::norm(r, self.p("ln_f.gain"), self.p("ln_f.bias"));
            for t in 0..v {
                out.push(h.iter().enumerate().map(|(j, a)| a * tok[t * d + j]).sum());
            }
        }
        out
    }
}

fn random_ids(seed: u64, n: usize, v: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..v)).collect()
}

fn logits_of(m: &Model<f64>, inputs: &[usize], targets: Option<&[usize]>, batch: usize, seq: usize) -> Vec<f64> {
    let mut g = Graph::inference(&m.params);
    let f = m.forward(&mut g, inputs, targets, batch, seq).unwrap();
    g.value(f.logits).to_f64_vec()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol * (1.0 + y.abs()), "coord {i}: {x} vs {y}");
    }
}

fn model(cfg: ModelConfig) -> Model<f64> {
    Model::new(cfg, None).unwrap()
}

fn cfg(v: usize, d: usize, dh: usize, layers: usize, heads: usize, seq: usize, seed: u64) -> ModelConfig {
    let mut c = ModelConfig::dense(v, d, dh, layers, heads, seq);
    c.init_std = 0.5;
    c.seed = seed;
    c
}

fn hash(k: usize, feature: HashFeature) -> RouterSpec {
    RouterSpec::Hash { k, feature, table: TableSource::Random { seed: 1 }, predictor: None }
}

fn copy_shared(from: &Model<f64>, to: &mut Model<f64>) {
    for p in from.params.iter() {
        if let Ok(id) = to.params.id(&p.name) {
            to.params.value_mut(id).data_mut().copy_from_slice(p.value.data());
        }
    }
}

fn copy_dense_into_expert(from: &Model<f64>, to: &mut Model<f64>, layer: usize, expert: usize, k: usize) {
    for (src, dst) in [("ffn.a.w", "expert.a.w"), ("ffn.a.b", "expert.a.b"), ("ffn.b.w", "expert.b.w"), ("ffn.b.b", "expert.b.b")] {
        let s = from.params.by_name(&format!("layer{layer}.{src}")).unwrap().value.data().to_vec();
        let id = to.params.id(&format!("layer{layer}.{dst}")).unwrap();
        let data = to.params.value_mut(id).data_mut();
        assert_eq!(data.len(), s.len() * k);
        data[expert * s.len()..(expert + 1) * s.len()].copy_from_slice(&s);
    }
}

// ---- forward-pass oracles -------------------------------------------------

#[test]
fn single_layer_micro_model_matches_reference() {
    let m = model(cfg(7, 2, 3, 1, 1, 4, 3));
    let inputs = [3, 0, 6, 6, 1, 2, 5, 4];
    let got = logits_of(&m, &inputs, None, 2, 4);
    assert_close(&got, &Ref { m: &m }.logits(&inputs, &[0; 8], 2, 4), 1e-12);
}

#[test]
fn every_router_matches_reference() {
    let routers = [
        RouterSpec::Dense,
        hash(3, HashFeature::Current),
        hash(3, HashFeature::Previous),
        hash(3, HashFeature::Bigram),
        hash(3, HashFeature::Position),
        hash(3, HashFeature::OracleFuture),
        RouterSpec::Multihash { k: 3, n: 2, seed: 4 },
        RouterSpec::Multihash { k: 2, n: 4, seed: 9 },
        RouterSpec::Switch { k: 3, alpha: 0.1 },
        RouterSpec::TokenSwitch { k: 3, alpha: 0.1 },
    ];
    for r in routers {
        let m = model(cfg(11, 8, 12, 2, 2, 5, 8).with_router(1, r.clone()));
        let ids = random_ids(4, 12, 11);
        let b = TokenBatch::from_windows(&[&ids[..6], &ids[6..]]);
        let got = logits_of(&m, &b.inputs, Some(&b.targets), 2, 5);
        println!("{r:?}");
        assert_close(&got, &Ref { m: &m }.logits(&b.inputs, &b.targets, 2, 5), 1e-11);
    }
}

#[test]
fn mixed_routing_on_three_tokens_matches_per_position_experts() {
    let m = model(cfg(5, 4, 6, 1, 1, 3, 2).with_router(0, RouterSpec::Hash {
        k: 2,
        feature: HashFeature::Current,
        table: TableSource::Inline { table: vec![0, 1, 0, 1, 1] },
        predictor: None,
    }));
    let inputs = [2, 3, 4];
    let mut g = Graph::inference(&m.params);
    let f = m.forward(&mut g, &inputs, None, 1, 3).unwrap();
    assert_eq!(f.traces[0].experts, vec![0, 1, 1]);
    assert_eq!(f.traces[0].gates, vec![1.0; 3]);
    assert_eq!(f.traces[0].features, vec![2, 3, 4]);
    assert_close(&g.value(f.logits).to_f64_vec(), &Ref { m: &m }.logits(&inputs, &[0; 3], 1, 3), 1e-12);
}

#[test]
fn single_bucket_hash_equals_dense() {
    for feature in [HashFeature::Current, HashFeature::Bigram, HashFeature::Position] {
        let base = cfg(9, 8, 16, 2, 2, 6, 5);
        let dense = model(base.clone());
        let mut hashed = model(base.with_router(1, hash(1, feature)));
        copy_shared(&dense, &mut hashed);
        copy_dense_into_expert(&dense, &mut hashed, 1, 0, 1);
        let ids = random_ids(1, 18, 9);
        assert_eq!(logits_of(&dense, &ids, None, 3, 6), logits_of(&hashed, &ids, None, 3, 6));
    }
}

#[test]
fn all_positions_on_expert_zero_equal_dense_with_its_weights() {
    let base = cfg(6, 4, 8, 1, 2, 4, 6);
    let dense = model(base.clone());
    let mut hashed = model(base.with_router(0, RouterSpec::Hash {
        k: 3,
        feature: HashFeature::Current,
        table: TableSource::Inline { table: vec![0; 6] },
        predictor: None,
    }));
    copy_shared(&dense, &mut hashed);
    copy_dense_into_expert(&dense, &mut hashed, 0, 0, 3);
    let ids = random_ids(2, 8, 6);
    assert_eq!(logits_of(&dense, &ids, None, 2, 4), logits_of(&hashed, &ids, None, 2, 4));
}

#[test]
fn zero_expert_leaves_residual_unchanged() {
    // expert 1 is the zero function; a model whose FFN is zero everywhere
    // must agree with it at positions routed to expert 1
    let table = vec![0, 1, 0, 1];
    let base = cfg(4, 4, 8, 1, 1, 4, 7);
    let mut m = model(base.clone().with_router(0, RouterSpec::Hash {
        k: 2,
        feature: HashFeature::Current,
        table: TableSource::Inline { table: table.clone() },
        predictor: None,
    }));
    for name in ["expert.a.w", "expert.a.b", "expert.b.w", "expert.b.b"] {
        let id = m.params.id(&format!("layer0.{name}")).unwrap();
        let data = m.params.value_mut(id).data_mut();
        let half = data.len() / 2;
        data[half..].fill(0.0);
    }
    let mut zero = model(base.with_router(0, RouterSpec::Hash {
        k: 2,
        feature: HashFeature::Current,
        table: TableSource::Inline { table: vec![1; 4] },
        predictor: None,
    }));
    copy_shared(&m, &mut zero);
    for name in ["expert.a.w", "expert.a.b", "expert.b.w", "expert.b.b"] {
        let src = m.params.by_name(&format!("layer0.{name}")).unwrap().value.data().to_vec();
        let id = zero.params.id(&format!("layer0.{name}")).unwrap();
        zero.params.value_mut(id).data_mut().copy_from_slice(&src);
    }
    let inputs = [1, 0, 3, 2];
    let (a, b) = (logits_of(&m, &inputs, None, 1, 4), logits_of(&zero, &inputs, None, 1, 4));
    // positions 0 and 2 (tokens 1 and 3) go to expert 1 in both models; the
    // single-layer model is causal, so position 0 agrees bitwise
    assert_eq!(a[..4], b[..4]);
    // and the zero expert contributes exactly nothing
    let r = Ref { m: &zero };
    assert_close(&b, &r.logits(&inputs, &[0; 4], 1, 4), 1e-12);
}

#[test]
fn multihash_single_segment_is_single_hash_bitwise() {
    let base = cfg(13, 8, 16, 2, 2, 5, 10);
    let single = model(base.clone().with_router(1, RouterSpec::Hash {
        k: 4,
        feature: HashFeature::Current,
        table: TableSource::Random { seed: 6 },
        predictor: None,
    }));
    let multi = model(base.with_router(1, RouterSpec::Multihash { k: 4, n: 1, seed: 6 }));
    // same names, shapes and initialization
    for (a, b) in single.params.iter().zip(multi.params.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value.data(), b.value.data());
    }
    let ids = random_ids(3, 15, 13);
    assert_eq!(logits_of(&single, &ids, None, 3, 5), logits_of(&multi, &ids, None, 3, 5));
}

#[test]
fn two_segment_multihash_assembles_by_hand() {
    let m = model(cfg(6, 4, 8, 1, 1, 3, 12).with_router(0, RouterSpec::Multihash { k: 2, n: 2, seed: 1 }));
    let inputs = [0, 4, 5];
    let mut g = Graph::inference(&m.params);
    let f = m.forward(&mut g, &inputs, None, 1, 3).unwrap();
    let t = &f.traces[0];
    assert_eq!(t.segments, 2);
    for (p, &tok) in inputs.iter().enumerate() {
        for s in 0..2 {
            assert_eq!(t.experts[p * 2 + s], hashmoe::hashing::route_random(tok, 2, 1 + s as u64));
        }
    }
    assert_close(&g.value(f.logits).to_f64_vec(), &Ref { m: &m }.logits(&inputs, &[0; 3], 1, 3), 1e-12);
}

#[test]
fn causality_probe() {
    let routers = [
        RouterSpec::Dense,
        hash(4, HashFeature::Current),
        hash(4, HashFeature::Previous),
        hash(4, HashFeature::Bigram),
        hash(4, HashFeature::Position),
        RouterSpec::Multihash { k: 4, n: 2, seed: 0 },
        RouterSpec::Switch { k: 4, alpha: 0.1 },
        RouterSpec::TokenSwitch { k: 4, alpha: 0.1 },
    ];
    let (v, seq) = (10, 7);
    for r in routers {
        let m = model(cfg(v, 8, 16, 2, 2, seq, 1).with_router(0, r));
        let ids = random_ids(9, seq, v);
        let base = logits_of(&m, &ids, None, 1, seq);
        for t in 0..seq {
            let mut changed = ids.clone();
            changed[t] = (changed[t] + 1) % v;
            let after = logits_of(&m, &changed, None, 1, seq);
            assert_eq!(base[..t * v], after[..t * v], "position {t}");
            assert_ne!(base[t * v..], after[t * v..]);
        }
    }
}

#[test]
fn oracle_routing_needs_targets() {
    let m = model(cfg(5, 4, 8, 1, 1, 3, 0).with_router(0, hash(2, HashFeature::OracleFuture)));
    let mut g = Graph::inference(&m.params);
    assert!(matches!(m.forward(&mut g, &[1, 2, 3], None, 1, 3), Err(Error::OracleNotAllowed)));
    let b = TokenBatch { inputs: vec![1, 2, 3], targets: vec![2, 3, 4], batch: 1, seq: 3 };
    let mut g = Graph::inference(&m.params);
    assert!(matches!(m.loss(&mut g, &b, false), Err(Error::OracleNotAllowed)));
    let mut g = Graph::inference(&m.params);
    let out = m.loss(&mut g, &b, true).unwrap();
    assert_eq!(out.traces[0].features, vec![2, 3, 4]);
}

#[test]
fn previous_token_feature_starts_at_bos() {
    let m = model(cfg(8, 4, 8, 1, 1, 3, 0).with_router(0, hash(3, HashFeature::Previous)));
    let mut g = Graph::inference(&m.params);
    let f = m.forward(&mut g, &[5, 6, 7, 3, 4, 5], None, 2, 3).unwrap();
    let bos = hashmoe::corpus::BOS;
    assert_eq!(f.traces[0].features, vec![bos, 5, 6, bos, 3, 4]);
}

#[test]
fn predicted_future_uses_predictor_argmax() {
    let base = cfg(9, 8, 16, 1, 2, 4, 3);
    let predictor = model(base.clone());
    let ids = random_ids(5, 8, 9);
    let want = predictor.predict(&ids, 2, 4).unwrap();
    let mut m = model(base.clone().with_router(0, hash(3, HashFeature::PredictedFuture)));
    let mut g = Graph::inference(&m.params);
    assert!(m.forward(&mut g, &ids, None, 2, 4).is_err());
    m.set_predictor(0, model(base)).unwrap();
    let mut g = Graph::inference(&m.params);
    let f = m.forward(&mut g, &ids, None, 2, 4).unwrap();
    assert_eq!(f.traces[0].features, want);
    let table = m.hash_table(0).unwrap();
    assert_eq!(f.traces[0].experts, want.iter().map(|&t| table[t]).collect::<Vec<_>>());
}

// ---- switch routers ---------------------------------------------------------

fn aux_of(m: &Model<f64>, inputs: &[usize]) -> f64 {
    let mut g = Graph::inference(&m.params);
    let f = m.forward(&mut g, inputs, None, 1, inputs.len()).unwrap();
    g.value(f.aux.unwrap()).item()
}

fn set(m: &mut Model<f64>, name: &str, f: impl Fn(usize) -> f64) {
    let id = m.params.id(name).unwrap();
    for (i, x) in m.params.value_mut(id).data_mut().iter_mut().enumerate() {
        *x = f(i);
    }
}

#[test]
fn single_expert_switch_aux_equals_alpha() {
    let m = model(cfg(6, 4, 8, 1, 1, 5, 0).with_router(0, RouterSpec::Switch { k: 1, alpha: 0.1 }));
    let mut g = Graph::inference(&m.params);
    let f = m.forward(&mut g, &[1, 2, 3, 4, 5], None, 1, 5).unwrap();
    assert!(f.traces[0].gates.iter().all(|&p| p == 1.0));
    assert!((g.value(f.aux.unwrap()).item() - 0.1).abs() < 1e-15);
}

#[test]
fn uniform_routing_aux_equals_alpha_and_collapse_tends_to_k_alpha() {
    let (k, alpha) = (4, 0.25);
    let mut m = model(cfg(4, 4, 8, 1, 1, 4, 0).with_router(0, RouterSpec::TokenSwitch { k, alpha }));
    // token t gets logit c on expert t and 0 elsewhere
    let c = 2.0;
    set(&mut m, "layer0.router.emb", |i| if i / 4 == i % 4 { c } else { 0.0 });
    set(&mut m, "layer0.router.w", |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
    set(&mut m, "layer0.router.b", |_| 0.0);
    let uniform = aux_of(&m, &[0, 1, 2, 3]);
    assert!((uniform - alpha).abs() < 1e-12, "{uniform}");

    // every token prefers expert 0 with a growing margin
    for (c, tol) in [(5.0, 0.05), (50.0, 1e-12)] {
        set(&mut m, "layer0.router.emb", |i| if i % 4 == 0 { c } else { 0.0 });
        let collapsed = aux_of(&m, &[0, 1, 2, 3]);
        assert!(collapsed > alpha);
        assert!((collapsed - k as f64 * alpha).abs() < tol * k as f64 * alpha, "c={c}: {collapsed}");
    }
}

#[test]
fn token_switch_routes_by_token_only() {
    let (k, v) = (4, 6);
    let mut m = model(cfg(v, 4, 8, 2, 1, 6, 2).with_router(1, RouterSpec::TokenSwitch { k, alpha: 0.0 }));
    // tokens 2 and 5 prefer experts 3 and 1
    set(&mut m, "layer1.router.emb", |i| match (i / 4, i % 4) {
        (2, 3) | (5, 1) => 3.0,
        _ => 0.0,
    });
    set(&mut m, "layer1.router.w", |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
    set(&mut m, "layer1.router.b", |_| 0.0);
    let mut g = Graph::inference(&m.params);
    let f = m.forward(&mut g, &[2, 5, 2, 5, 2, 2], None, 1, 6).unwrap();
    let t = &f.traces[0];
    assert_eq!(t.experts, vec![3, 1, 3, 1, 3, 3]);
    let p = 3f64.exp() / (3f64.exp() + 3.0);
    assert!(t.gates.iter().all(|&x| (x - p).abs() < 1e-12));

    // same token everywhere: one shared gate distribution, whatever the context
    let mut g = Graph::inference(&m.params);
    let f = m.forward(&mut g, &[4; 6], None, 1, 6).unwrap();
    assert!(f.traces[0].gates.windows(2).all(|w| w[0] == w[1]));
    assert!(f.traces[0].experts.windows(2).all(|w| w[0] == w[1]));

    // the router embedding receives gradient
    let b = TokenBatch { inputs: vec![2, 5, 2, 5, 2, 2], targets: vec![5, 2, 5, 2, 2, 0], batch: 1, seq: 6 };
    let mut g = Graph::new(&m.params);
    let out = m.loss(&mut g, &b, false).unwrap();
    let grads = g.backward(out.total).unwrap();
    let ge = grads.get(m.params.id("layer1.router.emb").unwrap()).unwrap();
    assert!(ge.row(2).iter().any(|&x| x != 0.0));
    assert!(ge.row(4).iter().all(|&x| x == 0.0));
}

#[test]
fn switch_gate_scales_output() {
    let m = model(cfg(7, 4, 8, 1, 1, 4, 4).with_router(0, RouterSpec::Switch { k: 3, alpha: 0.0 }));
    let ids = random_ids(1, 4, 7);
    assert_close(&logits_of(&m, &ids, None, 1, 4), &Ref { m: &m }.logits(&ids, &[0; 4], 1, 4), 1e-12);
    let mut g = Graph::inference(&m.params);
    let f = m.forward(&mut g, &ids, None, 1, 4).unwrap();
    assert!(f.traces[0].gates.iter().all(|&p| p > 1.0 / 3.0 - 1e-12 && p <= 1.0));
    assert_eq!(g.value(f.aux.unwrap()).item(), 0.0);
}

// ---- accounting and configuration ------------------------------------------

#[test]
fn expert_delta_matches_reference_scale() {
    let dense = ModelConfig::dense(8008, 1024, 4096, 11, 16, 128);
    let sparse = dense.clone().with_router(5, hash(64, HashFeature::Current));
    let (a, b) = (count_params(&dense), count_params(&sparse));
    assert_eq!(b.total - a.total, 63 * 8_393_728);
    assert_eq!(b.total - a.total, 528_804_864);
    assert_eq!(b.per_expert, 2 * 1024 * 4096 + 4096 + 1024);
    for n in [1, 2, 4, 8] {
        let mh = dense.clone().with_router(5, RouterSpec::Multihash { k: 64, n, seed: 0 });
        assert_eq!(count_params(&mh).total, b.total, "N={n}");
    }
    let mh32 = |n| count_params(&dense.clone().with_router(5, RouterSpec::Multihash { k: 32, n, seed: 0 })).total;
    assert!([2, 4, 8].iter().all(|&n| mh32(n) == mh32(1)));
}

#[test]
fn single_expert_counts_equal_dense() {
    let dense = ModelConfig::dense(100, 16, 64, 3, 2, 8);
    let k1 = dense.clone().with_router(1, hash(1, HashFeature::Bigram));
    assert_eq!(count_params(&dense).total, count_params(&k1).total);
    assert_eq!(flops_per_token(&dense), flops_per_token(&k1));
}

#[test]
fn flops_do_not_depend_on_expert_count() {
    let base = ModelConfig::dense(2000, 128, 512, 4, 4, 64);
    let f: Vec<u64> = [1, 16, 128]
        .iter()
        .map(|&k| flops_per_token(&base.clone().with_router(1, hash(k, HashFeature::Current))))
        .collect();
    assert!(f.windows(2).all(|w| w[0] == w[1]), "{f:?}");
    let mh = flops_per_token(&base.clone().with_router(1, RouterSpec::Multihash { k: 16, n: 4, seed: 0 }));
    assert_eq!(mh, f[0]);
}

#[test]
fn counts_match_allocated_parameters() {
    for r in [
        RouterSpec::Dense,
        hash(5, HashFeature::Current),
        RouterSpec::Multihash { k: 3, n: 2, seed: 0 },
        RouterSpec::Switch { k: 4, alpha: 0.1 },
        RouterSpec::TokenSwitch { k: 4, alpha: 0.1 },
    ] {
        let c = cfg(30, 8, 16, 2, 2, 6, 0).with_router(0, r.clone());
        assert_eq!(count_params(&c).total as usize, model(c).num_params(), "{r:?}");
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let base = ModelConfig::dense(10, 8, 16, 2, 2, 4);
    assert!(ModelConfig { heads: 3, ..base.clone() }.validate().is_err());
    assert!(base.clone().with_router(2, RouterSpec::Dense).validate().is_err());
    assert!(base.clone().with_router(0, RouterSpec::Multihash { k: 4, n: 3, seed: 0 }).validate().is_err());
    assert!(matches!(base.clone().with_router(0, hash(0, HashFeature::Current)).validate(), Err(Error::NoExperts)));
    assert!(base.clone().with_router(0, RouterSpec::Switch { k: 2, alpha: -1.0 }).validate().is_err());
    let m = Model::<f64>::new(base.clone(), None).unwrap();
    let mut g = Graph::inference(&m.params);
    assert!(m.forward(&mut g, &[1, 2, 3, 4, 5], None, 1, 5).is_err());
    assert!(matches!(m.forward(&mut g, &[1, 2, 10, 4], None, 1, 4), Err(Error::IdOutOfRange { .. })));
    let table = TableSource::Inline { table: vec![0; 9] };
    let bad = base.with_router(0, RouterSpec::Hash { k: 2, feature: HashFeature::Current, table, predictor: None });
    assert!(Model::<f64>::new(bad, None).is_err());
}

#[test]
fn config_json_round_trip() {
    let c = ModelConfig::dense(100, 16, 64, 3, 2, 8)
        .with_router(0, RouterSpec::Multihash { k: 8, n: 2, seed: 3 })
        .with_router(1, RouterSpec::TokenSwitch { k: 4, alpha: 0.01 })
        .with_router(2, RouterSpec::Hash { k: 16, feature: HashFeature::Bigram, table: TableSource::Random { seed: 2 }, predictor: None });
    let json = serde_json::to_string(&c).unwrap();
    assert!(json.contains("\"D\":64") && json.contains("\"K\":8") && json.contains("\"N\":2"));
    assert_eq!(serde_json::from_str::<ModelConfig>(&json).unwrap(), c);
    let minimal: ModelConfig = serde_json::from_str(
        r#"{"vocab":10,"d":8,"D":16,"layers":1,"heads":1,"max_seq":4,
            "sparse_layers":[{"layer":0,"router":{"kind":"hash","K":4,"feature":"current"}}]}"#,
    )
    .unwrap();
    assert_eq!(minimal.router(0), &hash_default(4));
    assert_eq!(minimal.init_std, 0.02);
}

fn hash_default(k: usize) -> RouterSpec {
    RouterSpec::Hash { k, feature: HashFeature::Current, table: TableSource::default(), predictor: None }
}

#[test]
fn freeze_patterns_match_name_components() {
    assert!(matches_pattern("expert.*", "layer1.expert.a.w"));
    assert!(matches_pattern("layer1.*", "layer1.attn.qkv.b"));
    assert!(matches_pattern("*", "tok_emb"));
    assert!(matches_pattern("tok_emb", "tok_emb"));
    assert!(!matches_pattern("expert.*", "layer1.ffn.a.w"));
    assert!(!matches_pattern("xpert.*", "layer1.expert.a.w"));
}

