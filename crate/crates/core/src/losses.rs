//! Neighbor similarity, reconstruction criteria, and the KL penalty that
//! distills raw-feature neighbor similarity into the reconstruction.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var, EPS};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;

/// `u·v / (max(‖u‖, ε) · max(‖v‖, ε))`.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt().max(EPS);
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(EPS);
    (dot / (nu * nv)).clamp(-1.0, 1.0)
}

fn normalized_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for i in 0..x.rows() {
        let n = x.row(i).iter().map(|a| a * a).sum::<f64>().sqrt().max(EPS);
        for v in out.row_mut(i) {
            *v /= n;
        }
    }
    out
}

/// Per-node average cosine similarity to first-order neighbors.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityReport {
    /// `None` for isolated nodes.
    pub per_node: Vec<Option<f64>>,
    /// Average over nodes with at least one neighbor (0 if there are none).
    pub mean: f64,
}

/// `S_v = mean_{i ∈ N(v)} cos(x_v, x_i)`; `g` must not carry self-loops.
pub fn mean_neighbor_similarity(features: &Tensor, g: &Graph) -> SimilarityReport {
    debug_assert_eq!(features.rows(), g.num_nodes());
    let xn = normalized_rows(features);
    let mut per_node = Vec::with_capacity(g.num_nodes());
    let (mut total, mut counted) = (0.0, 0usize);
    for v in 0..g.num_nodes() {
        let nb = g.neighbors(v);
        if nb.is_empty() {
            per_node.push(None);
            continue;
        }
        let s: f64 = nb
            .iter()
            .map(|&i| {
                let d: f64 = xn.row(v).iter().zip(xn.row(i)).map(|(a, b)| a * b).sum();
                d.clamp(-1.0, 1.0)
            })
            .sum::<f64>()
            / nb.len() as f64;
        total += s;
        counted += 1;
        per_node.push(Some(s));
    }
    let mean = if counted == 0 { 0.0 } else { total / counted as f64 };
    SimilarityReport { per_node, mean }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReconKind {
    /// Scaled cosine error `(1 - cos)^γ`.
    Sce,
    Mse,
}

impl FromStr for ReconKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sce" => Ok(ReconKind::Sce),
            "mse" => Ok(ReconKind::Mse),
            other => Err(Error::Config(format!("unknown loss kind '{other}' (expected sce|mse)"))),
        }
    }
}

impl fmt::Display for ReconKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReconKind::Sce => "sce",
            ReconKind::Mse => "mse",
        })
    }
}

/// Reconstruction criterion on the masked rows only.
///
/// `target` and `recon` hold just the masked rows. SCE averages
/// `(1 - cos)^γ` over rows; MSE averages the squared Euclidean distance.
pub fn reconstruction_loss(tape: &mut Tape, target: Var, recon: Var, kind: ReconKind, gamma: f64) -> Result<Var> {
    let (rows, cols) = tape.value(recon).shape();
    if tape.value(target).shape() != (rows, cols) {
        return Err(Error::shape(
            "reconstruction_loss",
            format!("{:?} vs {:?}", tape.value(target).shape(), (rows, cols)),
        ));
    }
    if rows == 0 {
        return Err(Error::Config("reconstruction over an empty mask set".into()));
    }
    let all: Vec<usize> = (0..rows).collect();
    match kind {
        ReconKind::Sce => {
            if gamma < 1.0 {
                return Err(Error::Config(format!("SCE exponent {gamma} must be >= 1")));
            }
            let tn = tape.normalize_rows(target)?;
            let rn = tape.normalize_rows(recon)?;
            let prod = tape.mul(tn, rn)?;
            let cos = tape.row_sum(prod)?;
            let ones = tape.constant(Tensor::filled(rows, 1, 1.0));
            let err = tape.sub(ones, cos)?;
            let err = tape.pow(err, gamma)?;
            tape.mean_rows(err, &all)
        }
        ReconKind::Mse => {
            let diff = tape.sub(recon, target)?;
            let sq = tape.pow(diff, 2.0)?;
            let dist = tape.row_sum(sq)?;
            tape.mean_rows(dist, &all)
        }
    }
}

/// Edge-indexed softmax over each node's neighbor similarities.
struct EdgeIndex {
    sources: Vec<usize>,
    targets: Vec<usize>,
    num_nodes: usize,
}

impl EdgeIndex {
    fn new(g: &Graph) -> Self {
        EdgeIndex {
            sources: g.edge_sources(),
            targets: g.targets().to_vec(),
            num_nodes: g.num_nodes(),
        }
    }
}

/// Records `softmax_{i ∈ N(v)}(cos(x_v, x_i) / τ)` for every node and its
/// logarithm; both are `E×1`, edge order follows the CSR layout.
fn neighbor_distribution(tape: &mut Tape, x: Var, edges: &EdgeIndex, tau: f64) -> Result<(Var, Var)> {
    let xn = tape.normalize_rows(x)?;
    let sims = tape.pair_dot(xn, xn, &edges.sources, &edges.targets)?;
    let logits = tape.scale(sims, 1.0 / tau)?;
    let probs = tape.segment_softmax(logits, &edges.sources, edges.num_nodes)?;
    let log_probs = tape.log(probs)?;
    Ok((probs, log_probs))
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature {tau} must be positive")))
    }
}

/// Teacher distributions from the raw features; fixed for a dataset.
pub struct TeacherDistribution {
    edges: EdgeIndex,
    tau: f64,
    probs: Tensor,
    log_probs: Tensor,
}

impl TeacherDistribution {
    pub fn new(raw: &Tensor, g: &Graph, tau: f64) -> Result<Self> {
        check_tau(tau)?;
        if raw.rows() != g.num_nodes() {
            return Err(Error::shape("kl_distill_loss", "feature rows differ from node count"));
        }
        let edges = EdgeIndex::new(g);
        let mut tape = Tape::new();
        let x = tape.constant(raw.clone());
        let (p, logp) = neighbor_distribution(&mut tape, x, &edges, tau)?;
        Ok(TeacherDistribution {
            probs: tape.value(p).clone(),
            log_probs: tape.value(logp).clone(),
            edges,
            tau,
        })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Per-edge teacher probabilities in CSR order.
    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    /// `Σ_v KL(P_v ‖ Q_v)` with `Q` from `recon`; gradients reach `recon` only.
    pub fn loss(&self, tape: &mut Tape, recon: Var) -> Result<Var> {
        if tape.value(recon).rows() != self.edges.num_nodes {
            return Err(Error::shape("kl_distill_loss", "reconstruction rows differ from node count"));
        }
        let (_, log_q) = neighbor_distribution(tape, recon, &self.edges, self.tau)?;
        let p = tape.constant(self.probs.clone());
        let log_p = tape.constant(self.log_probs.clone());
        let gap = tape.sub(log_p, log_q)?;
        let weighted = tape.mul(p, gap)?;
        Ok(tape.sum(weighted))
    }
}

/// Value-only form of the distillation penalty.
pub fn kl_distill_loss(raw: &Tensor, recon: &Tensor, g: &Graph, tau: f64) -> Result<f64> {
    let teacher = TeacherDistribution::new(raw, g, tau)?;
    let mut tape = Tape::new();
    let r = tape.constant(recon.clone());
    let l = teacher.loss(&mut tape, r)?;
    Ok(tape.value(l).item())
}

/// `l_rec + α · l_kl`.
pub fn total_loss(tape: &mut Tape, l_rec: Var, l_kl: Var, alpha: f64) -> Result<Var> {
    if alpha < 0.0 {
        return Err(Error::Config(format!("KL coefficient {alpha} must be >= 0")));
    }
    let scaled = tape.scale(l_kl, alpha)?;
    tape.add(l_rec, scaled)
}

/// Scalar components of one objective evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_rec: f64,
    pub l_kl: f64,
    pub total: f64,
    pub alpha: f64,
    pub tau: f64,
    pub gamma: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path_fixture() -> (Graph, Tensor) {
        let r = 0.5f64.sqrt();
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![r, r]]).unwrap();
        let g = Graph::from_edges(3, &[(0, 1), (1, 2)], x.clone()).unwrap();
        (g, x)
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_sim(&[3.0, 4.0], &[3.0, 4.0]) - 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert!((cosine_sim(&[1.0, 0.0], &[1.0, 1.0]) - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(cosine_sim(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
    }

    #[test]
    fn identical_rows_have_similarity_one() {
        let x = Tensor::filled(4, 3, 2.0);
        let g = Graph::from_edges(4, &[(0, 1), (1, 2), (2, 3)], x.clone()).unwrap();
        let rep = mean_neighbor_similarity(&x, &g);
        assert!((rep.mean - 1.0).abs() < 1e-15);
        assert!(rep.per_node.iter().all(|s| (s.unwrap() - 1.0).abs() < 1e-15));
    }

    #[test]
    fn path_similarity_matches_enumeration() {
        let (g, x) = path_fixture();
        let rep = mean_neighbor_similarity(&x, &g);
        let r = 0.5f64.sqrt();
        let expected = [0.0, (0.0 + r) / 2.0, r];
        for (s, e) in rep.per_node.iter().zip(expected) {
            assert!((s.unwrap() - e).abs() < 1e-12);
        }
        assert!((rep.mean - (expected.iter().sum::<f64>() / 3.0)).abs() < 1e-12);
        assert!((rep.mean - 0.35355).abs() < 1e-5);
    }

    #[test]
    fn isolated_nodes_excluded() {
        let x = Tensor::filled(3, 2, 1.0);
        let g = Graph::from_edges(3, &[(0, 1)], x.clone()).unwrap();
        let rep = mean_neighbor_similarity(&x, &g);
        assert_eq!(rep.per_node[2], None);
        assert!((rep.mean - 1.0).abs() < 1e-15);
    }

    fn rec(kind: ReconKind, gamma: f64, a: &Tensor, b: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let l = reconstruction_loss(&mut tape, a, b, kind, gamma)?;
        Ok(tape.value(l).item())
    }

    #[test]
    fn reconstruction_examples() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
        assert!(rec(ReconKind::Sce, 2.0, &x, &x).unwrap().abs() < 1e-15);
        assert_eq!(rec(ReconKind::Mse, 2.0, &x, &x).unwrap(), 0.0);

        let a = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0, 3.0], vec![1.0, 0.0]]).unwrap();
        assert!((rec(ReconKind::Sce, 1.0, &a, &b).unwrap() - 1.0).abs() < 1e-15);

        // cos = 0.5 at 60 degrees, so (1 - 0.5)^2
        let a = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.5, 0.75f64.sqrt()]]).unwrap();
        assert!((rec(ReconKind::Sce, 2.0, &a, &b).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_errors() {
        let empty = Tensor::zeros(0, 3);
        assert!(rec(ReconKind::Sce, 2.0, &empty, &empty).is_err());
        assert!(rec(ReconKind::Mse, 2.0, &Tensor::zeros(2, 3), &Tensor::zeros(3, 3)).is_err());
        assert!(rec(ReconKind::Sce, 0.5, &Tensor::filled(1, 1, 1.0), &Tensor::filled(1, 1, 1.0)).is_err());
    }

    #[test]
    fn sce_scale_invariant_mse_not() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0, 0.0], vec![0.3, -1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.5, 1.0, 1.0], vec![1.0, 1.0, 1.0]]).unwrap();
        let mut scaled = b.clone();
        for v in scaled.row_mut(1) {
            *v *= 7.5;
        }
        let sce = |r: &Tensor| rec(ReconKind::Sce, 2.0, &a, r).unwrap();
        let mse = |r: &Tensor| rec(ReconKind::Mse, 2.0, &a, r).unwrap();
        assert!((sce(&b) - sce(&scaled)).abs() < 1e-12);
        assert!((mse(&b) - mse(&scaled)).abs() > 1e-3);
    }

    #[test]
    fn kl_identity_and_degenerate_neighborhoods() {
        let (g, x) = path_fixture();
        assert_eq!(kl_distill_loss(&x, &x, &g, 1.0).unwrap(), 0.0);
        let pairs = Graph::from_edges(4, &[(0, 1), (2, 3)], x.select_rows(&[0, 1, 2, 0])).unwrap();
        let other = Tensor::from_rows(&[vec![5.0, 1.0], vec![0.0, 1.0], vec![1.0, 3.0], vec![2.0, 2.0]]).unwrap();
        assert_eq!(kl_distill_loss(pairs.features(), &other, &pairs, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn kl_path_fixture_matches_hand_oracle() {
        let (g, x) = path_fixture();
        let flat = Tensor::filled(3, 2, 1.0);
        // node 1: P = softmax(0, 1/sqrt2), Q = (1/2, 1/2); endpoints have one neighbor
        let r = 0.5f64.sqrt();
        let z = 1.0 + r.exp();
        let p = [1.0 / z, r.exp() / z];
        let expected: f64 = p.iter().map(|pi| pi * (pi / 0.5).ln()).sum();
        assert!((p[0] - 0.33024).abs() < 1e-5 && (p[1] - 0.66976).abs() < 1e-5);
        let got = kl_distill_loss(&x, &flat, &g, 1.0).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn kl_rejects_bad_temperature() {
        let (g, x) = path_fixture();
        assert!(kl_distill_loss(&x, &x, &g, 0.0).is_err());
        assert!(kl_distill_loss(&x, &x, &g, -1.0).is_err());
    }

    #[test]
    fn kl_teacher_is_detached() {
        let (g, x) = path_fixture();
        let teacher = TeacherDistribution::new(&x, &g, 1.0).unwrap();
        let mut tape = Tape::new();
        let r = tape.param(Tensor::from_rows(&[vec![1.0, 0.2], vec![0.1, 1.0], vec![0.3, 0.5]]).unwrap());
        let l = teacher.loss(&mut tape, r).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(r).unwrap().data().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn total_loss_examples() {
        let mut tape = Tape::new();
        let r = tape.constant(Tensor::scalar(1.0));
        let k = tape.constant(Tensor::scalar(0.2));
        let t = total_loss(&mut tape, r, k, 0.5).unwrap();
        assert!((tape.value(t).item() - 1.1).abs() < 1e-15);
        let t0 = total_loss(&mut tape, r, k, 0.0).unwrap();
        assert_eq!(tape.value(t0).item(), 1.0);
        let z = tape.constant(Tensor::scalar(0.0));
        let tz = total_loss(&mut tape, r, z, 3.0).unwrap();
        assert_eq!(tape.value(tz).item(), 1.0);
        assert!(total_loss(&mut tape, r, k, -1.0).is_err());
    }
}
