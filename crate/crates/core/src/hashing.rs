//! Token to expert routing tables, k-means over embeddings and balance statistics.

use std::fmt;
use std::str::FromStr;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Vocab;
use crate::error::{Error, Result};

pub const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// splitmix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn route_random(id: usize, k: usize, seed: u64) -> usize {
    (mix64(seed ^ (id as u64).wrapping_mul(GOLDEN)) % k as u64) as usize
}

pub fn route_bigram(prev: usize, cur: usize, k: usize, seed: u64) -> usize {
    (mix64(mix64(seed ^ (prev as u64).wrapping_mul(GOLDEN)) ^ cur as u64) % k as u64) as usize
}

pub fn route_position(t: usize, k: usize) -> usize {
    t % k
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableKind {
    Random,
    Balanced,
    Clustered,
    Dispersed,
}

impl FromStr for TableKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "balanced" => Ok(Self::Balanced),
            "clustered" => Ok(Self::Clustered),
            "dispersed" => Ok(Self::Dispersed),
            o => Err(Error::Config(format!("unknown table kind {o:?}"))),
        }
    }
}

impl fmt::Display for TableKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Random => "random",
            Self::Balanced => "balanced",
            Self::Clustered => "clustered",
            Self::Dispersed => "dispersed",
        })
    }
}

/// Immutable token id to expert id lookup.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashRoutingTable {
    pub kind: TableKind,
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
    pub vocab_digest: String,
    pub table: Vec<usize>,
}

impl HashRoutingTable {
    pub fn route(&self, id: usize) -> usize {
        self.table[id]
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("table serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(text)?;
        if t.k == 0 {
            return Err(Error::NoExperts);
        }
        if let Some(&bad) = t.table.iter().find(|&&e| e >= t.k) {
            return Err(Error::Config(format!("table entry {bad} out of range for K={}", t.k)));
        }
        Ok(t)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&crate::error::read_file(path)?)
    }

    /// Fails unless the table was built over `vocab`.
    pub fn check_vocab(&self, vocab: &Vocab) -> Result<()> {
        let digest = vocab.digest();
        if self.vocab_digest != digest {
            return Err(Error::VocabMismatch { expected: self.vocab_digest.clone(), found: digest });
        }
        if self.table.len() != vocab.len() {
            return Err(Error::Config(format!("table length {} != vocabulary size {}", self.table.len(), vocab.len())));
        }
        Ok(())
    }
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        Err(Error::NoExperts)
    } else {
        Ok(())
    }
}

pub fn random_assignment(v: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    check_k(k)?;
    Ok((0..v).map(|id| route_random(id, k, seed)).collect())
}

/// Greedy balanced assignment: ids in descending frequency (ties by id) each
/// go to the bucket with the smallest load so far (ties by lowest bucket).
/// All-zero frequencies fall back to round-robin by id.
pub fn balanced_assignment(freq: &[u64], k: usize) -> Result<Vec<usize>> {
    check_k(k)?;
    if freq.iter().all(|&f| f == 0) {
        return Ok((0..freq.len()).map(|i| i % k).collect());
    }
    let mut order: Vec<usize> = (0..freq.len()).collect();
    order.sort_by(|&a, &b| freq[b].cmp(&freq[a]).then(a.cmp(&b)));
    let mut load = vec![0u64; k];
    let mut out = vec![0usize; freq.len()];
    for id in order {
        let mut best = 0;
        for b in 1..k {
            if load[b] < load[best] {
                best = b;
            }
        }
        load[best] += freq[id];
        out[id] = best;
    }
    Ok(out)
}

pub fn build_random_table(vocab: &Vocab, k: usize, seed: u64) -> Result<HashRoutingTable> {
    Ok(HashRoutingTable {
        kind: TableKind::Random,
        k,
        seed,
        vocab_digest: vocab.digest(),
        table: random_assignment(vocab.len(), k, seed)?,
    })
}

pub fn build_balanced_table(vocab: &Vocab, k: usize) -> Result<HashRoutingTable> {
    Ok(HashRoutingTable {
        kind: TableKind::Balanced,
        k,
        seed: 0,
        vocab_digest: vocab.digest(),
        table: balanced_assignment(vocab.freq(), k)?,
    })
}

/// k-means result over a `points x dim` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub dim: usize,
    pub centroids: Vec<f64>,
    pub assignment: Vec<usize>,
    /// Inertia after every iteration.
    pub inertia: Vec<f64>,
}

impl ClusterModel {
    pub fn clusters(&self) -> usize {
        self.centroids.len() / self.dim.max(1)
    }

    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    pub fn final_inertia(&self) -> f64 {
        self.inertia.last().copied().unwrap_or(0.0)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cent) in centroids.chunks(dim).enumerate() {
        let d = sq_dist(p, cent);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Sum of squared distances from each point to its assigned centroid.
pub fn inertia(points: &[f64], dim: usize, centroids: &[f64], assignment: &[usize]) -> f64 {
    points
        .chunks(dim)
        .zip(assignment)
        .map(|(p, &c)| sq_dist(p, &centroids[c * dim..(c + 1) * dim]))
        .sum()
}

#[derive(Debug, Clone, Copy)]
pub struct KMeansConfig {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self { max_iters: 100, tol: 1e-6 }
    }
}

/// Lloyd's algorithm from k-means++ seeding. Empty clusters take the point
/// farthest from its current centroid.
pub fn kmeans(points: &[f64], dim: usize, k: usize, seed: u64, cfg: KMeansConfig) -> Result<ClusterModel> {
    check_k(k)?;
    if dim == 0 || points.len() % dim != 0 {
        return Err(Error::Config(format!("point buffer of length {} is not a multiple of dim {dim}", points.len())));
    }
    let n = points.len() / dim;
    if k > n {
        return Err(Error::TooManyClusters { clusters: k, points: n });
    }
    let pt = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(pt(i), pt(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    if r < w {
                        pick = i;
                        break;
                    }
                    r -= w;
                }
            }
            // guard against rounding landing on an already covered point
            if d2[pick] == 0.0 {
                pick = (0..n).rev().find(|&i| d2[i] > 0.0).unwrap();
            }
            pick
        } else {
            // duplicate points only: any unused index
            let unused: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            unused[rng.random_range(0..unused.len())]
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(pt(i), pt(next)));
        }
    }
    let mut centroids: Vec<f64> = chosen.iter().flat_map(|&i| pt(i).to_vec()).collect();
    let mut assignment = vec![usize::MAX; n];
    let mut history = Vec::new();

    for _ in 0..cfg.max_iters.max(1) {
        let mut changed = false;
        let mut dist = vec![0.0; n];
        for i in 0..n {
            let (c, d) = nearest(pt(i), &centroids, dim);
            changed |= assignment[i] != c;
            assignment[i] = c;
            dist[i] = d;
        }
        let mut sizes = vec![0usize; k];
        for &c in &assignment {
            sizes[c] += 1;
        }
        for c in 0..k {
            if sizes[c] > 0 {
                continue;
            }
            let donor = (0..n)
                .filter(|&i| sizes[assignment[i]] > 1)
                .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                .expect("k <= n leaves a cluster with two points");
            sizes[assignment[donor]] -= 1;
            sizes[c] = 1;
            assignment[donor] = c;
            dist[donor] = 0.0;
            centroids[c * dim..(c + 1) * dim].copy_from_slice(pt(donor));
            changed = true;
        }
        let mut sums = vec![0.0; k * dim];
        for i in 0..n {
            let c = assignment[i];
            for (s, x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(pt(i)) {
                *s += x;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            let new: Vec<f64> = sums[c * dim..(c + 1) * dim].iter().map(|s| s / sizes[c] as f64).collect();
            shift = shift.max(sq_dist(&new, &centroids[c * dim..(c + 1) * dim]).sqrt());
            centroids[c * dim..(c + 1) * dim].copy_from_slice(&new);
        }
        history.push(inertia(points, dim, &centroids, &assignment));
        if !changed || shift < cfg.tol {
            break;
        }
    }
    Ok(ClusterModel { dim, centroids, assignment, inertia: history })
}

pub fn build_clustered_table(model: &ClusterModel, k: usize, vocab: &Vocab, seed: u64) -> Result<HashRoutingTable> {
    check_k(k)?;
    if model.clusters() != k {
        return Err(Error::ClusterCountMismatch { clusters: model.clusters(), experts: k });
    }
    check_points(model, vocab)?;
    Ok(HashRoutingTable {
        kind: TableKind::Clustered,
        k,
        seed,
        vocab_digest: vocab.digest(),
        table: model.assignment.clone(),
    })
}

fn check_points(model: &ClusterModel, vocab: &Vocab) -> Result<()> {
    if model.assignment.len() != vocab.len() {
        return Err(Error::Config(format!(
            "cluster model covers {} tokens but the vocabulary has {}",
            model.assignment.len(),
            vocab.len()
        )));
    }
    Ok(())
}

/// Within each cluster, ids in descending frequency are dealt round-robin over
/// the buckets, starting at `cluster mod k`.
pub fn dispersed_assignment(assignment: &[usize], clusters: usize, freq: &[u64], k: usize) -> Result<Vec<usize>> {
    check_k(k)?;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); clusters];
    for (id, &c) in assignment.iter().enumerate() {
        members[c].push(id);
    }
    let mut out = vec![0; assignment.len()];
    for (c, ids) in members.iter_mut().enumerate() {
        ids.sort_by(|&a, &b| freq[b].cmp(&freq[a]).then(a.cmp(&b)));
        for (rank, &id) in ids.iter().enumerate() {
            out[id] = (c + rank) % k;
        }
    }
    Ok(out)
}

pub fn build_dispersed_table(model: &ClusterModel, k: usize, vocab: &Vocab, seed: u64) -> Result<HashRoutingTable> {
    check_points(model, vocab)?;
    Ok(HashRoutingTable {
        kind: TableKind::Dispersed,
        k,
        seed,
        vocab_digest: vocab.digest(),
        table: dispersed_assignment(&model.assignment, model.clusters(), vocab.freq(), k)?,
    })
}

/// N independent tables sharing K, one per multihash segment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiHashSpec {
    pub tables: Vec<HashRoutingTable>,
}

impl MultiHashSpec {
    /// Random tables seeded `seed, seed + 1, ...`.
    pub fn random(vocab: &Vocab, k: usize, n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("multihash needs at least one hash".into()));
        }
        let tables = (0..n as u64).map(|m| build_random_table(vocab, k, seed.wrapping_add(m))).collect::<Result<_>>()?;
        Ok(Self { tables })
    }

    pub fn n(&self) -> usize {
        self.tables.len()
    }

    pub fn k(&self) -> usize {
        self.tables.first().map_or(0, |t| t.k)
    }

    pub fn validate(&self, d: usize, hidden: usize) -> Result<()> {
        let n = self.n();
        if n == 0 || d % n != 0 || hidden % n != 0 {
            return Err(Error::Config(format!("hash count {n} must divide both d={d} and D={hidden}")));
        }
        if self.tables.iter().any(|t| t.k != self.k()) {
            return Err(Error::Config("multihash tables disagree on K".into()));
        }
        Ok(())
    }
}

/// Share of mass per expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceStats {
    pub shares: Vec<f64>,
    pub max_share: f64,
    pub min_share: f64,
    pub entropy: f64,
    pub ideal_share: f64,
}

impl BalanceStats {
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        check_k(weights.len())?;
        let total: f64 = weights.iter().sum();
        if total <= 0.0 || !total.is_finite() {
            return Err(Error::ZeroFrequency);
        }
        let shares: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let entropy = -shares.iter().filter(|&&s| s > 0.0).map(|s| s * s.ln()).sum::<f64>();
        Ok(Self {
            max_share: shares.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            min_share: shares.iter().cloned().fold(f64::INFINITY, f64::min),
            entropy: entropy.max(0.0),
            ideal_share: 1.0 / shares.len() as f64,
            shares,
        })
    }

    pub fn from_counts(counts: &[u64]) -> Result<Self> {
        Self::from_weights(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>())
    }
}

/// Frequency mass routed to each bucket.
pub fn table_loads(table: &[usize], freq: &[u64], k: usize) -> Vec<u64> {
    let mut load = vec![0u64; k];
    for (&e, &f) in table.iter().zip(freq) {
        load[e] += f;
    }
    load
}

pub fn balance_stats(table: &HashRoutingTable, vocab: &Vocab) -> Result<BalanceStats> {
    check_points_len(table, vocab)?;
    BalanceStats::from_counts(&table_loads(&table.table, vocab.freq(), table.k))
}

fn check_points_len(table: &HashRoutingTable, vocab: &Vocab) -> Result<()> {
    if table.len() != vocab.len() {
        return Err(Error::Config(format!("table length {} != vocabulary size {}", table.len(), vocab.len())));
    }
    Ok(())
}
