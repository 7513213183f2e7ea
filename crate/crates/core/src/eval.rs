//! Frozen-encoder evaluation: linear probes, link ranking, graph readout and
//! similarity diagnostics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::graph::{Graph, Split};
use crate::losses::mean_neighbor_similarity;
use crate::model::{forward, gcn_layer, GaeModel, PreparedGraph};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

pub const PROBE_STEPS: usize = 1000;
pub const PROBE_LR: f64 = 0.01;
/// Initial weights are `U(±scale/√dim)`. Directions orthogonal to the train
/// rows never receive gradient, so a large init leaks noise into test logits.
pub const PROBE_INIT_SCALE: f64 = 0.01;
pub const GRAPH_FOLDS: usize = 10;
pub const DECODER_DRAWS: u64 = 5;
const EXACT_AUC_LIMIT: usize = 10_000_000;

/// Encoder output on the unmasked features; nothing is recorded for
/// gradients.
pub fn embed(model: &GaeModel, g: &Graph) -> Result<Tensor> {
    embed_prepared(model, &PreparedGraph::new(g.clone()))
}

pub fn embed_prepared(model: &GaeModel, g: &PreparedGraph) -> Result<Tensor> {
    model.check_graph(g.graph())?;
    let mut tape = Tape::new();
    let vars = model.register_frozen(&mut tape);
    let x = tape.constant(g.graph().features().clone());
    let h = gcn_layer(&mut tape, x, g.adjacency(), vars.w_enc, vars.slope_enc)?;
    Ok(tape.value(h).clone())
}

fn softmax_rows(logits: &mut Tensor) {
    for i in 0..logits.rows() {
        let row = logits.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

struct Softmax {
    w: Tensor,
    b: Tensor,
}

impl Softmax {
    fn logits(&self, x: &Tensor) -> Tensor {
        let mut out = x.matmul(&self.w).expect("probe shapes");
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(self.b.row(0)) {
                *o += b;
            }
        }
        out
    }

    fn accuracy(&self, x: &Tensor, y: &[usize]) -> f64 {
        let logits = self.logits(x);
        let hits = (0..x.rows()).filter(|&i| argmax(logits.row(i)) == y[i]).count();
        hits as f64 / y.len() as f64
    }
}

/// Multinomial logistic regression trained with Adam on the train split,
/// selected on validation accuracy and scored on the test split.
pub fn linear_probe(z: &Tensor, labels: &[usize], splits: &[Split], seed: u64) -> Result<f64> {
    if labels.len() != z.rows() || splits.len() != z.rows() {
        return Err(Error::shape("linear_probe", "labels/splits length differs from embedding rows"));
    }
    if !z.is_finite() {
        return Err(Error::NonFinite("embedding".into()));
    }
    let ids = |s: Split| -> Vec<usize> { (0..z.rows()).filter(|&i| splits[i] == s).collect() };
    let (train, val, test) = (ids(Split::Train), ids(Split::Val), ids(Split::Test));
    if train.is_empty() || test.is_empty() {
        return Err(Error::Data("linear probe needs non-empty train and test splits".into()));
    }
    let y_train: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    let mut distinct = y_train.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Data("linear probe needs at least two classes in the train split".into()));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let (x_train, x_val, x_test) = (z.select_rows(&train), z.select_rows(&val), z.select_rows(&test));
    let y_val: Vec<usize> = val.iter().map(|&i| labels[i]).collect();
    let y_test: Vec<usize> = test.iter().map(|&i| labels[i]).collect();

    let dim = z.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = PROBE_INIT_SCALE / (dim.max(1) as f64).sqrt();
    let w = (0..dim * classes).map(|_| rng.gen_range(-bound..bound)).collect();
    let mut probe = Softmax { w: Tensor::from_vec(dim, classes, w)?, b: Tensor::zeros(1, classes) };
    let cfg = AdamConfig { lr: PROBE_LR, ..Default::default() };
    let mut adam = Adam::new(cfg, &[dim * classes, classes])?;

    let n = train.len() as f64;
    let mut best_val = f64::NEG_INFINITY;
    let mut best_test = 0.0;
    for step in 0..PROBE_STEPS {
        let mut p = probe.logits(&x_train);
        softmax_rows(&mut p);
        for (i, &y) in y_train.iter().enumerate() {
            p.row_mut(i)[y] -= 1.0;
        }
        let p = p.map(|v| v / n);
        let gw = x_train.transpose().matmul(&p)?;
        let mut gb = Tensor::zeros(1, classes);
        for i in 0..p.rows() {
            for (g, v) in gb.row_mut(0).iter_mut().zip(p.row(i)) {
                *g += v;
            }
        }
        adam.step(&mut [probe.w.data_mut(), probe.b.data_mut()], &[gw.data(), gb.data()])?;
        if !probe.w.is_finite() {
            return Err(Error::NonFinite(format!("probe weights at step {step}")));
        }
        let score = if val.is_empty() { probe.accuracy(&x_train, &y_train) } else { probe.accuracy(&x_val, &y_val) };
        if score > best_val {
            best_val = score;
            best_test = probe.accuracy(&x_test, &y_test);
        }
    }
    Ok(best_test)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `σ(z_u · z_v)` per pair.
pub fn link_scores(z: &Tensor, pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
    pairs
        .iter()
        .map(|&(u, v)| {
            if u >= z.rows() || v >= z.rows() {
                return Err(Error::Data(format!("pair ({u}, {v}) out of range for {} nodes", z.rows())));
            }
            let dot: f64 = z.row(u).iter().zip(z.row(v)).map(|(a, b)| a * b).sum();
            Ok(sigmoid(dot))
        })
        .collect()
}

fn check_scores(pos: &[f64], neg: &[f64]) -> Result<()> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Data("ranking metrics need non-empty positive and negative lists".into()));
    }
    if pos.iter().chain(neg).any(|v| v.is_nan()) {
        return Err(Error::NonFinite("NaN score".into()));
    }
    Ok(())
}

/// Exact pairwise AUC; ties count one half.
pub fn auc_pairwise(pos: &[f64], neg: &[f64]) -> Result<f64> {
    check_scores(pos, neg)?;
    let mut wins = 0.0;
    for &p in pos {
        for &n in neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(wins / (pos.len() as f64 * neg.len() as f64))
}

/// Mann-Whitney form of the AUC with average ranks for ties.
pub fn auc_ranked(pos: &[f64], neg: &[f64]) -> Result<f64> {
    check_scores(pos, neg)?;
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let avg_rank = (i + j + 1) as f64 / 2.0;
        rank_sum += avg_rank * all[i..j].iter().filter(|e| e.1).count() as f64;
        i = j;
    }
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Average precision over descending scores. Tied scores keep input order
/// within each list and place negatives ahead of positives across lists.
pub fn average_precision(pos: &[f64], neg: &[f64]) -> Result<f64> {
    check_scores(pos, neg)?;
    let mut all: Vec<(f64, bool)> = neg.iter().map(|&s| (s, false)).chain(pos.iter().map(|&s| (s, true))).collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (k, &(_, is_pos)) in all.iter().enumerate() {
        if is_pos {
            hits += 1;
            total += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(total / pos.len() as f64)
}

/// `(auc, ap)`.
pub fn ranking_metrics(pos: &[f64], neg: &[f64]) -> Result<(f64, f64)> {
    check_scores(pos, neg)?;
    let auc = if pos.len().saturating_mul(neg.len()) <= EXACT_AUC_LIMIT {
        auc_pairwise(pos, neg)?
    } else {
        auc_ranked(pos, neg)?
    };
    Ok((auc, average_precision(pos, neg)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    Mean,
    Max,
    Sum,
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "max" => Ok(Pooling::Max),
            "sum" => Ok(Pooling::Sum),
            other => Err(Error::Config(format!("unknown pooling {other:?}"))),
        }
    }
}

/// One pooled row per graph id.
pub fn graph_readout(z: &Tensor, membership: &[usize], pooling: Pooling) -> Result<Tensor> {
    if membership.len() != z.rows() {
        return Err(Error::shape("graph_readout", "membership length differs from embedding rows"));
    }
    let graphs = membership.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; graphs];
    for &m in membership {
        counts[m] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Data(format!("graph id {empty} has no nodes")));
    }
    let init = if pooling == Pooling::Max { f64::NEG_INFINITY } else { 0.0 };
    let mut out = Tensor::filled(graphs, z.cols(), init);
    for (i, &m) in membership.iter().enumerate() {
        for (o, &v) in out.row_mut(m).iter_mut().zip(z.row(i)) {
            *o = match pooling {
                Pooling::Max => o.max(v),
                _ => *o + v,
            };
        }
    }
    if pooling == Pooling::Mean {
        for (m, &c) in counts.iter().enumerate() {
            for o in out.row_mut(m) {
                *o /= c as f64;
            }
        }
    }
    Ok(out)
}

/// Mean test accuracy of a k-fold linear probe on pooled graph embeddings.
/// Fold `k` is tested, fold `k+1` selects the probe and the rest train it.
pub fn graph_classification(pooled: &Tensor, graph_labels: &[usize], folds: usize, seed: u64) -> Result<f64> {
    let n = pooled.rows();
    if graph_labels.len() != n {
        return Err(Error::shape("graph_classification", "labels differ from pooled rows"));
    }
    if folds < 3 || n < folds {
        return Err(Error::Data(format!("{n} graphs cannot fill {folds} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_of = vec![0; n];
    for (pos, &g) in order.iter().enumerate() {
        fold_of[g] = pos % folds;
    }
    let mut total = 0.0;
    for k in 0..folds {
        let splits: Vec<Split> = fold_of
            .iter()
            .map(|&f| {
                if f == k {
                    Split::Test
                } else if f == (k + 1) % folds {
                    Split::Val
                } else {
                    Split::Train
                }
            })
            .collect();
        total += linear_probe(pooled, graph_labels, &splits, seed.wrapping_add(k as u64))?;
    }
    Ok(total / folds as f64)
}

/// Mean neighbor similarity of the raw features, the encoder output and the
/// reconstruction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilarityTable {
    pub raw: f64,
    pub encoder: f64,
    /// Averaged over [`DECODER_DRAWS`] masks seeded `seed..seed+5`.
    pub decoder: f64,
}

pub fn similarity_table(model: &GaeModel, g: &Graph, lambda: f64, seed: u64, remask: bool) -> Result<SimilarityTable> {
    let prepared = PreparedGraph::new(g.clone());
    let raw = mean_neighbor_similarity(g.features(), g).mean;
    let encoder = mean_neighbor_similarity(&embed_prepared(model, &prepared)?, g).mean;
    let mut decoder = 0.0;
    for d in 0..DECODER_DRAWS {
        let (_, xhat, _) = forward(model, &prepared, lambda, seed.wrapping_add(d), remask)?;
        decoder += mean_neighbor_similarity(&xhat, g).mean;
    }
    Ok(SimilarityTable { raw, encoder, decoder: decoder / DECODER_DRAWS as f64 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalTask {
    Node,
    Link,
    Graph,
    Similarity,
}

impl EvalTask {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalTask::Node => "node",
            EvalTask::Link => "link",
            EvalTask::Graph => "graph",
            EvalTask::Similarity => "similarity",
        }
    }
}

impl std::str::FromStr for EvalTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "node" => Ok(EvalTask::Node),
            "link" => Ok(EvalTask::Link),
            "graph" => Ok(EvalTask::Graph),
            "similarity" => Ok(EvalTask::Similarity),
            other => Err(Error::Config(format!("unknown eval task {other:?}"))),
        }
    }
}

/// One metric aggregated over repetitions. `std` is the population
/// standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricSummary {
    pub name: String,
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl MetricSummary {
    pub fn new(name: &str, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Data(format!("metric {name} has no repetitions")));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Ok(MetricSummary { name: name.to_string(), values, mean, std })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub task: EvalTask,
    pub metrics: Vec<MetricSummary>,
    pub repetitions: usize,
    pub config_hash: String,
}

pub const REPORT_HEADER: &str = "task,metric,mean,std,repetitions,config_hash";

/// First 16 hex digits of the SHA-256 of `canonical`.
pub fn config_hash(canonical: &str) -> String {
    let digest = Sha256::digest(canonical.as_bytes());
    digest.iter().take(8).fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn format_reports(reports: &[EvalReport]) -> String {
    let mut s = String::from(REPORT_HEADER);
    s.push('\n');
    for r in reports {
        for m in &r.metrics {
            let _ = writeln!(s, "{},{},{},{},{},{}", r.task.as_str(), m.name, m.mean, m.std, r.repetitions, r.config_hash);
        }
    }
    s
}

pub fn write_reports(reports: &[EvalReport], path: &Path) -> Result<()> {
    fs::write(path, format_reports(reports)).map_err(|e| Error::io(path, e))
}
