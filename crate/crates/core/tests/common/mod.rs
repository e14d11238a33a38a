//! Property suites and gradient-check suites shared by the per-module tests
//! and the acceptance harness.
#![allow(dead_code)]

use std::collections::BTreeSet;

use hashmoe::analysis::balance_report;
use hashmoe::corpus::{make_batches, TokenBatch};
use hashmoe::hashing::{
    self, balanced_assignment, dispersed_assignment, kmeans, random_assignment, route_bigram, route_position, route_random,
    BalanceStats, KMeansConfig,
};
use hashmoe::model::{argmax_rows, HashFeature, Model, ModelConfig, RouterSpec, TableSource};
use hashmoe::trainer::TraceRow;
use hashmoe_tensor::gradcheck::{self, GradCheckReport};
use hashmoe_tensor::{Graph, ParamStore, Tensor, Var};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random instances per property.
pub const CASES: u32 = 128;

fn runner() -> TestRunner {
    let cfg = Config { cases: CASES, failure_persistence: None, ..Config::default() };
    TestRunner::new_with_rng(cfg, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn run<S: Strategy>(strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String> {
    runner().run(&strategy, test).map_err(|e| e.to_string())
}

/// Greedy balanced assignment written independently of the library: tokens
/// by descending frequency then id, each into the lightest bucket (lowest
/// index on ties). Returns the table and, per placement, the loads seen.
pub fn greedy_oracle(freq: &[u64], k: usize) -> (Vec<usize>, Vec<Vec<u64>>) {
    let mut order: Vec<usize> = (0..freq.len()).collect();
    order.sort_by(|&a, &b| freq[b].cmp(&freq[a]).then(a.cmp(&b)));
    let mut load = vec![0u64; k];
    let mut table = vec![0; freq.len()];
    let mut seen = Vec::new();
    if freq.iter().all(|&f| f == 0) {
        for (i, t) in table.iter_mut().enumerate() {
            *t = i % k;
        }
        return (table, seen);
    }
    for id in order {
        let mut best = 0;
        for b in 1..k {
            if load[b] < load[best] {
                best = b;
            }
        }
        seen.push(load.clone());
        table[id] = best;
        load[best] += freq[id];
    }
    (table, seen)
}

pub fn zipf_freqs(rng: &mut ChaCha8Rng, v: usize, exponent: f64, total: f64) -> Vec<u64> {
    (1..=v)
        .map(|r| {
            let mean = total * (r as f64).powf(-exponent);
            (mean * (0.5 + rng.random::<f64>())).round() as u64
        })
        .collect()
}

pub fn tiny_config(vocab: usize, router: RouterSpec) -> ModelConfig {
    let mut cfg = ModelConfig::dense(vocab, 4, 8, 1, 1, 8).with_router(0, router);
    cfg.init_std = 0.3;
    cfg
}

pub fn hash_current(k: usize, table: Vec<usize>) -> RouterSpec {
    RouterSpec::Hash { k, feature: HashFeature::Current, table: TableSource::Inline { table }, predictor: None }
}

fn traces_of(model: &Model<f64>, inputs: &[usize], batch: usize, seq: usize) -> Vec<usize> {
    let mut g = Graph::inference(&model.params);
    let fwd = model.forward(&mut g, inputs, None, batch, seq).unwrap();
    fwd.traces[0].experts.clone()
}

pub fn prop_routing_range() -> Result<(), String> {
    run((any::<u64>(), 0usize..1 << 20, 0usize..1 << 20, 1usize..300, 0usize..10_000), |(seed, a, b, k, t)| {
        let r = route_random(a, k, seed);
        let bg = route_bigram(a, b, k, seed);
        let p = route_position(t, k);
        prop_assert!(r < k && bg < k && p < k);
        prop_assert_eq!(r, route_random(a, k, seed));
        prop_assert_eq!(bg, route_bigram(a, b, k, seed));
        prop_assert_eq!(p, t % k);
        Ok(())
    })?;
    run(
        (1usize..400, 1usize..40, any::<u64>(), proptest::collection::vec(0u64..1000, 1..400)),
        |(v, k, seed, freq)| {
            let ra = random_assignment(v, k, seed).unwrap();
            let ba = balanced_assignment(&freq, k).unwrap();
            let clusters = (k / 2).max(1);
            let assign: Vec<usize> = (0..freq.len()).map(|i| i % clusters).collect();
            let da = dispersed_assignment(&assign, clusters, &freq, k).unwrap();
            prop_assert_eq!(ra.len(), v);
            prop_assert_eq!(ba.len(), freq.len());
            for t in [&ra, &ba, &da] {
                prop_assert!(t.iter().all(|&e| e < k));
            }
            prop_assert_eq!(&ra, &random_assignment(v, k, seed).unwrap());
            prop_assert_eq!(&ba, &balanced_assignment(&freq, k).unwrap());
            prop_assert_eq!(&da, &dispersed_assignment(&assign, clusters, &freq, k).unwrap());
            Ok(())
        },
    )
}

/// Changing one input token moves only that position's expert.
pub fn prop_locality() -> Result<(), String> {
    let strat = (2usize..30, 1usize..6, 1usize..4, 1usize..8, any::<u64>()).prop_flat_map(|(v, k, batch, seq, seed)| {
        let n = batch * seq;
        (
            Just((v, k, batch, seq, seed)),
            proptest::collection::vec(0..v, n),
            0..n,
            0..v,
        )
    });
    run(strat, |((v, k, batch, seq, seed), inputs, pos, tok)| {
        let table = random_assignment(v, k, seed).unwrap();
        let model = Model::<f64>::new(tiny_config(v, hash_current(k, table.clone())), None).unwrap();
        let before = traces_of(&model, &inputs, batch, seq);
        let mut changed = inputs.clone();
        changed[pos] = tok;
        let after = traces_of(&model, &changed, batch, seq);
        for i in 0..inputs.len() {
            if i == pos {
                prop_assert_eq!(after[i], table[tok]);
            } else {
                prop_assert_eq!(after[i], before[i]);
            }
        }
        Ok(())
    })
}

/// Experts that no position selects receive exactly zero gradient.
pub fn prop_unselected_zero_grad() -> Result<(), String> {
    let strat = (4usize..20, 2usize..6, 1usize..3, 2usize..6, any::<u64>(), any::<u64>());
    run(strat, |(v, k, batch, seq, seed, pick)| {
        let mut rng = ChaCha8Rng::seed_from_u64(pick);
        let mut table = random_assignment(v, k, seed).unwrap();
        let idle = rng.random_range(0..k);
        if table.iter().all(|&e| e == idle) {
            table[0] = (idle + 1) % k;
        }
        let allowed: Vec<usize> = (0..v).filter(|&t| table[t] != idle).collect();
        let n = batch * seq;
        let ids: Vec<usize> = (0..n + batch).map(|_| allowed[rng.random_range(0..allowed.len())]).collect();
        let inputs = ids[..n].to_vec();
        let targets = ids[batch..].to_vec();
        let cfg = tiny_config(v, hash_current(k, table));
        let (d, dh) = (cfg.d, cfg.hidden);
        let model = Model::<f64>::new(cfg, None).unwrap();
        let b = TokenBatch { inputs, targets, batch, seq };
        let grads = {
            let mut g = Graph::new(&model.params);
            let out = model.loss(&mut g, &b, false).unwrap();
            g.backward(out.total).unwrap()
        };
        let used: BTreeSet<usize> = b.inputs.iter().map(|&t| model.hash_table(0).unwrap()[t]).collect();
        for (name, block) in [("expert.a.w", d * dh), ("expert.a.b", dh), ("expert.b.w", dh * d), ("expert.b.b", d)] {
            let id = model.params.id(&format!("layer0.{name}")).unwrap();
            let grad = grads.get(id).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; k * block]);
            let slice = &grad[idle * block..(idle + 1) * block];
            prop_assert!(slice.iter().all(|&x| x == 0.0), "{name} of idle expert {idle} has gradient");
            let any_used = used.iter().any(|&e| grad[e * block..(e + 1) * block].iter().any(|&x| x != 0.0));
            prop_assert!(any_used, "{name}: selected experts got no gradient");
        }
        Ok(())
    })
}

/// Adding a constant to every router logit keeps choices and gates.
pub fn prop_switch_shift() -> Result<(), String> {
    let strat = (2usize..12, 1usize..6, 1usize..3, 1usize..6, any::<u64>(), -50.0f64..50.0, any::<bool>());
    run(strat, |(v, k, batch, seq, seed, shift, token)| {
        let router = if token { RouterSpec::TokenSwitch { k, alpha: 0.1 } } else { RouterSpec::Switch { k, alpha: 0.1 } };
        let mut cfg = tiny_config(v, router);
        cfg.seed = seed;
        let mut model = Model::<f64>::new(cfg, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<usize> = (0..batch * seq).map(|_| rng.random_range(0..v)).collect();
        let run_once = |m: &Model<f64>| {
            let mut g = Graph::inference(&m.params);
            let f = m.forward(&mut g, &inputs, None, batch, seq).unwrap();
            (f.traces[0].experts.clone(), f.traces[0].gates.clone(), g.value(f.logits).to_f64_vec())
        };
        let (e0, g0, l0) = run_once(&model);
        let bias = model.params.id("layer0.router.b").unwrap();
        for x in model.params.value_mut(bias).data_mut() {
            *x += shift;
        }
        let (e1, g1, l1) = run_once(&model);
        prop_assert_eq!(e0, e1);
        for (a, b) in g0.iter().zip(&g1) {
            prop_assert!((a - b).abs() <= 1e-12, "gate {a} vs {b}");
        }
        for (a, b) in l0.iter().zip(&l1) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()), "logit {a} vs {b}");
        }
        Ok(())
    })?;
    // the same invariance on raw logit rows
    run((1usize..20, 1usize..10, any::<u64>(), -1e3f64..1e3), |(n, k, seed, c)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n * k).map(|_| rng.random::<f64>() * 8.0 - 4.0).collect();
        let y: Vec<f64> = x.iter().map(|v| v + c).collect();
        let store = ParamStore::<f64>::new();
        let mut g = Graph::inference(&store);
        let px = g.constant(Tensor::new(&[n, k], x.clone()).unwrap());
        let py = g.constant(Tensor::new(&[n, k], y).unwrap());
        let (sx, sy) = (g.softmax_rows(px), g.softmax_rows(py));
        let (ax, ay) = (argmax_rows(g.value(sx).data(), k), argmax_rows(g.value(sy).data(), k));
        prop_assert_eq!(&ax, &argmax_rows(&x, k));
        prop_assert_eq!(&ax, &ay);
        for (a, b) in g.value(sx).data().iter().zip(g.value(sy).data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        Ok(())
    })
}

pub fn prop_kmeans_monotone() -> Result<(), String> {
    let strat = (2usize..60, 1usize..5, any::<u64>()).prop_flat_map(|(n, dim, seed)| (Just((n, dim, seed)), 1..=n));
    run(strat, |((n, dim, seed), k)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // a few duplicated points exercise the degenerate seeding path
        let pts: Vec<f64> = (0..n * dim).map(|_| (rng.random_range(0..20) as f64) * 0.5).collect();
        let m = kmeans(&pts, dim, k, seed, KMeansConfig::default()).unwrap();
        for w in m.inertia.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12, "inertia rose: {:?}", m.inertia);
        }
        let mut sizes = vec![0; k];
        for &c in &m.assignment {
            sizes[c] += 1;
        }
        prop_assert!(sizes.iter().all(|&s| s > 0), "empty cluster: {sizes:?}");
        let recomputed = hashing::inertia(&pts, dim, &m.centroids, &m.assignment);
        prop_assert!((recomputed - m.final_inertia()).abs() <= 1e-9 * (1.0 + recomputed));
        Ok(())
    })
}

pub fn prop_dispersed_even() -> Result<(), String> {
    let strat = (1usize..300, 1usize..12, 1usize..20, any::<u64>());
    run(strat, |(v, clusters, k, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let assign: Vec<usize> = (0..v).map(|_| rng.random_range(0..clusters)).collect();
        let freq: Vec<u64> = (0..v).map(|_| rng.random_range(0..50)).collect();
        let table = dispersed_assignment(&assign, clusters, &freq, k).unwrap();
        for c in 0..clusters {
            let mut counts = vec![0usize; k];
            for id in (0..v).filter(|&i| assign[i] == c) {
                counts[table[id]] += 1;
            }
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            prop_assert!(hi - lo <= 1, "cluster {c}: {counts:?}");
        }
        Ok(())
    })
}

/// Greedy placement never puts a token into a bucket that was heavier than another option.
pub fn prop_greedy_optimal() -> Result<(), String> {
    run((proptest::collection::vec(0u64..10_000, 1..1000), 1usize..64), |(freq, k)| {
        let got = balanced_assignment(&freq, k).unwrap();
        let (want, seen) = greedy_oracle(&freq, k);
        prop_assert_eq!(&got, &want);
        let mut order: Vec<usize> = (0..freq.len()).collect();
        order.sort_by(|&a, &b| freq[b].cmp(&freq[a]).then(a.cmp(&b)));
        for (loads, &id) in seen.iter().zip(&order) {
            let chosen = loads[got[id]];
            prop_assert!(loads.iter().all(|&l| l >= chosen));
        }
        Ok(())
    })
}

pub fn prop_batch_shift() -> Result<(), String> {
    run((proptest::collection::vec(0usize..500, 3..400), 1usize..5, 1usize..10, any::<u64>()), |(ids, batch, seq, seed)| {
        prop_assume!(ids.len() >= batch * (seq + 1));
        let mut stream = make_batches(&ids, batch, seq, seed).unwrap();
        for _ in 0..5 {
            let b = stream.next().unwrap();
            for r in 0..batch {
                let (inp, tgt) = (b.input_row(r), b.target_row(r));
                prop_assert_eq!(&inp[1..], &tgt[..seq - 1]);
                let start = ids.windows(seq + 1).position(|w| w[..seq] == *inp && w[1..] == *tgt);
                prop_assert!(start.is_some(), "row is not a contiguous slice");
            }
        }
        Ok(())
    })
}

pub fn prop_balance_shares() -> Result<(), String> {
    run(proptest::collection::vec((0usize..3, 0usize..40), 1..500), |rows| {
        let rows: Vec<TraceRow> = rows
            .into_iter()
            .enumerate()
            .map(|(i, (layer, expert))| TraceRow { step: 1, layer, position: i, feature_id: 0, expert, gate: 1.0, segment: 0 })
            .collect();
        for h in balance_report(&rows, None).unwrap() {
            let total: f64 = h.stats.shares.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-9);
            prop_assert!(h.stats.entropy <= (h.stats.shares.len() as f64).ln() + 1e-12);
        }
        let weights: Vec<f64> = rows.iter().map(|r| r.expert as f64 + 0.5).collect();
        let s = BalanceStats::from_weights(&weights).unwrap();
        prop_assert!((s.shares.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        Ok(())
    })
}

/// The property suites required for acceptance, by name.
pub fn property_suites() -> Vec<(&'static str, fn() -> Result<(), String>)> {
    vec![
        ("routing range and determinism", prop_routing_range),
        ("hash routing locality", prop_locality),
        ("unselected expert zero gradient", prop_unselected_zero_grad),
        ("switch logit shift invariance", prop_switch_shift),
        ("k-means inertia monotone", prop_kmeans_monotone),
        ("dispersed per-cluster deviation", prop_dispersed_even),
    ]
}

// ---- gradient checks -------------------------------------------------------

pub const GRAD_EPS: f64 = 1e-4;
pub const GRAD_FLOOR: f64 = 1e-6;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| (rng.random::<f64>() * 2.0 - 1.0) * scale)
}

fn project(g: &mut Graph<'_, f64>, y: Var, seed: u64) -> hashmoe_tensor::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(y).to_vec();
    let w = randn(&mut rng, &shape, 1.0);
    g.weighted_sum(y, w)
}

type Primitive = fn(&mut ParamStore<f64>, &mut ChaCha8Rng, (usize, usize, usize)) -> Box<dyn Fn(&mut Graph<'_, f64>) -> hashmoe_tensor::Result<Var>>;

fn primitives() -> Vec<(&'static str, Primitive)> {
    vec![
        ("matmul", |s, r, (n, k, m)| {
            let a = s.insert("a", randn(r, &[n, k], 1.0)).unwrap();
            let b = s.insert("b", randn(r, &[k, m], 1.0)).unwrap();
            Box::new(move |g| {
                let (a, b) = (g.param(a), g.param(b));
                let y = g.matmul(a, b)?;
                project(g, y, 1)
            })
        }),
        ("matmul_t", |s, r, (n, k, m)| {
            let a = s.insert("a", randn(r, &[n, k], 1.0)).unwrap();
            let b = s.insert("b", randn(r, &[m, k], 1.0)).unwrap();
            Box::new(move |g| {
                let (a, b) = (g.param(a), g.param(b));
                let y = g.matmul_t(a, b)?;
                project(g, y, 2)
            })
        }),
        ("add, mul, scale", |s, r, (n, c, _)| {
            let a = s.insert("a", randn(r, &[n, c], 1.0)).unwrap();
            let b = s.insert("b", randn(r, &[n, c], 1.0)).unwrap();
            Box::new(move |g| {
                let (a, b) = (g.param(a), g.param(b));
                let y = g.add(a, b)?;
                let y = g.mul(y, a)?;
                let y = g.scale(y, -1.3);
                project(g, y, 3)
            })
        }),
        ("add_bias, mul_rows", |s, r, (n, c, _)| {
            let x = s.insert("x", randn(r, &[n, c], 1.0)).unwrap();
            let bias = s.insert("bias", randn(r, &[c], 1.0)).unwrap();
            let gate = s.insert("gate", randn(r, &[n, 1], 1.0)).unwrap();
            Box::new(move |g| {
                let (x, bias, gate) = (g.param(x), g.param(bias), g.param(gate));
                let y = g.add_bias(x, bias)?;
                let y = g.mul_rows(y, gate)?;
                project(g, y, 4)
            })
        }),
        ("relu", |s, r, (n, c, _)| {
            let x = Tensor::from_fn(&[n, c], |_| {
                let v = r.random::<f64>() * 0.9 + 0.1;
                if r.random::<bool>() {
                    v
                } else {
                    -v
                }
            });
            let x = s.insert("x", x).unwrap();
            Box::new(move |g| {
                let x = g.param(x);
                let y = g.relu(x);
                project(g, y, 5)
            })
        }),
        ("layer_norm", |s, r, (n, c, _)| {
            let x = s.insert("x", randn(r, &[n, c + 1], 2.0)).unwrap();
            let gain = s.insert("gain", randn(r, &[c + 1], 1.0)).unwrap();
            let bias = s.insert("bias", randn(r, &[c + 1], 1.0)).unwrap();
            Box::new(move |g| {
                let (x, gain, bias) = (g.param(x), g.param(gain), g.param(bias));
                let y = g.layer_norm(x, gain, bias, 1e-5)?;
                project(g, y, 6)
            })
        }),
        ("embedding, gather_rows", |s, r, (n, c, m)| {
            let t = s.insert("table", randn(r, &[n + 2, c], 1.0)).unwrap();
            let ids: Vec<usize> = (0..m + 1).map(|_| r.random_range(0..n + 2)).collect();
            let rows: Vec<usize> = (0..m + 2).map(|_| r.random_range(0..m + 1)).collect();
            Box::new(move |g| {
                let t = g.param(t);
                let e = g.embedding(t, &ids)?;
                let y = g.gather_rows(e, &rows)?;
                project(g, y, 7)
            })
        }),
        ("scatter_rows, concat_cols", |s, r, (n, c, _)| {
            let a = s.insert("a", randn(r, &[n + 1, c], 1.0)).unwrap();
            let b = s.insert("b", randn(r, &[n + 1, 2], 1.0)).unwrap();
            Box::new(move |g| {
                let (a, b) = (g.param(a), g.param(b));
                let cat = g.concat_cols(&[a, b])?;
                let (even, odd): (Vec<usize>, Vec<usize>) = (0..n + 1).partition(|i| i % 2 == 0);
                let l = g.gather_rows(cat, &even)?;
                let r = g.gather_rows(cat, &odd)?;
                let y = g.scatter_rows(vec![(r, odd.clone()), (l, even.clone())], n + 1, c + 2)?;
                project(g, y, 8)
            })
        }),
        ("softmax_rows, pick", |s, r, (n, c, _)| {
            let x = s.insert("x", randn(r, &[n, c + 1], 3.0)).unwrap();
            let cols: Vec<usize> = (0..n).map(|_| r.random_range(0..c + 1)).collect();
            Box::new(move |g| {
                let x = g.param(x);
                let p = g.softmax_rows(x);
                let q = g.pick(p, &cols)?;
                let a = project(g, p, 9)?;
                let b = project(g, q, 10)?;
                g.add(a, b)
            })
        }),
        ("sum, weighted_sum", |s, r, (n, c, _)| {
            let x = s.insert("x", randn(r, &[n, c], 1.0)).unwrap();
            Box::new(move |g| {
                let x = g.param(x);
                let y = g.mul(x, x)?;
                let a = g.sum(y);
                let b = project(g, x, 11)?;
                g.add(a, b)
            })
        }),
        ("cross_entropy", |s, r, (n, c, _)| {
            let x = s.insert("x", randn(r, &[n, c + 1], 3.0)).unwrap();
            let t: Vec<usize> = (0..n).map(|_| r.random_range(0..c + 1)).collect();
            Box::new(move |g| {
                let x = g.param(x);
                g.cross_entropy(x, &t)
            })
        }),
        ("causal_attention", |s, r, (b, t, h)| {
            let d = 2 * h;
            let x = s.insert("qkv", randn(r, &[b * t, 3 * d], 1.0)).unwrap();
            Box::new(move |g| {
                let x = g.param(x);
                let y = g.causal_attention(x, b, t, h)?;
                project(g, y, 12)
            })
        }),
        ("param_block", |s, r, (k, a, b)| {
            let bank = s.insert("bank", randn(r, &[k, a, b], 1.0)).unwrap();
            let x = s.insert("x", randn(r, &[3, a], 1.0)).unwrap();
            Box::new(move |g| {
                let x = g.param(x);
                let mut acc = None;
                for e in 0..k {
                    let w = g.param_block(bank, e, &[a, b])?;
                    let y = g.matmul(x, w)?;
                    let s = project(g, y, 13 + e as u64)?;
                    acc = Some(match acc {
                        None => s,
                        Some(p) => g.add(p, s)?,
                    });
                }
                Ok(acc.unwrap())
            })
        }),
    ]
}

/// Largest relative error per primitive over five random shapes each.
pub fn primitive_gradchecks() -> Vec<(&'static str, f64)> {
    primitives()
        .into_iter()
        .enumerate()
        .map(|(p, (name, build))| {
            let mut worst: f64 = 0.0;
            for shape_seed in 0..5u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(1000 * p as u64 + shape_seed);
                let dims = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
                let mut store = ParamStore::new();
                let f = build(&mut store, &mut rng, dims);
                let rep = gradcheck::check(&mut store, GRAD_EPS, GRAD_FLOOR, usize::MAX, |g| f(g)).unwrap();
                assert!(rep.checked > 0);
                worst = worst.max(rep.max_rel_err);
            }
            (name, worst)
        })
        .collect()
}

/// Router variants of the full-model gradient check.
pub fn micro_routers() -> Vec<(&'static str, RouterSpec)> {
    let hash = |f| RouterSpec::Hash { k: 4, feature: f, table: TableSource::Random { seed: 3 }, predictor: None };
    vec![
        ("dense", RouterSpec::Dense),
        ("hash current", hash(HashFeature::Current)),
        ("hash previous", hash(HashFeature::Previous)),
        ("hash bigram", hash(HashFeature::Bigram)),
        ("hash position", hash(HashFeature::Position)),
        ("hash oracle", hash(HashFeature::OracleFuture)),
        ("hash predicted", hash(HashFeature::PredictedFuture)),
        ("multihash", RouterSpec::Multihash { k: 4, n: 2, seed: 5 }),
        ("switch", RouterSpec::Switch { k: 4, alpha: 0.1 }),
        ("token switch", RouterSpec::TokenSwitch { k: 4, alpha: 0.1 }),
    ]
}

pub const MICRO_VOCAB: usize = 12;

pub fn micro_config(router: RouterSpec, seed: u64) -> ModelConfig {
    let mut cfg = ModelConfig::dense(MICRO_VOCAB, 8, 16, 2, 2, 5);
    cfg.sparse_layers = vec![hashmoe::model::SparseLayer { layer: 1, router }];
    cfg.init_std = 0.3;
    cfg.seed = seed;
    cfg
}

/// Full-model finite-difference check over every parameter coordinate.
pub fn model_gradcheck(router: RouterSpec, seed: u64) -> GradCheckReport {
    let predicted = matches!(router, RouterSpec::Hash { feature: HashFeature::PredictedFuture, .. });
    let mut model = Model::<f64>::new(micro_config(router, seed), None).unwrap();
    if predicted {
        model.set_predictor(1, Model::new(micro_config(RouterSpec::Dense, seed + 100), None).unwrap()).unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<usize> = (0..2 * 6).map(|_| rng.random_range(0..MICRO_VOCAB)).collect();
    let batch = TokenBatch::from_windows(&[&ids[..6], &ids[6..]]);
    let mut store = std::mem::take(&mut model.params);
    let rep = gradcheck::check(&mut store, GRAD_EPS, GRAD_FLOOR, usize::MAX, |g| Ok(model.loss(g, &batch, true).unwrap().total));
    model.params = store;
    rep.unwrap()
}
