//! Undirected graphs in CSR form, dataset ingestion, edge splitting,
//! neighbor subsampling and a stochastic block model generator.

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{SparseMatrix, Tensor};

/// Node assignment in a transductive split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
    /// Node belongs to no split (Planetoid leaves most nodes unassigned).
    Unassigned,
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "none" | "" => Ok(Split::Unassigned),
            other => Err(format!("unknown split '{other}'")),
        }
    }
}

/// Immutable undirected graph with dense node features.
///
/// Adjacency is symmetric and every neighbor slice is strictly increasing.
/// Self-loops only appear after [`Graph::add_self_loops`].
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    offsets: Vec<usize>,
    targets: Vec<usize>,
    features: Tensor,
    labels: Option<Vec<usize>>,
    splits: Option<Vec<Split>>,
    graph_membership: Option<Vec<usize>>,
    graph_labels: Option<Vec<usize>>,
}

impl Graph {
    /// Builds a graph from an arbitrary edge list: edges are symmetrized,
    /// deduplicated, and self-loops are dropped.
    pub fn from_edges(num_nodes: usize, edges: &[(usize, usize)], features: Tensor) -> Result<Self> {
        if features.rows() != num_nodes {
            return Err(Error::Data(format!(
                "{} feature rows for {num_nodes} nodes",
                features.rows()
            )));
        }
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); num_nodes];
        for &(u, v) in edges {
            if u >= num_nodes || v >= num_nodes {
                return Err(Error::Data(format!(
                    "edge ({u}, {v}) out of range for {num_nodes} nodes"
                )));
            }
            if u != v {
                adj[u].push(v);
                adj[v].push(u);
            }
        }
        Ok(Self::from_adjacency_lists(adj, features))
    }

    fn from_adjacency_lists(mut adj: Vec<Vec<usize>>, features: Tensor) -> Self {
        let num_nodes = adj.len();
        let mut offsets = Vec::with_capacity(num_nodes + 1);
        let mut targets = Vec::new();
        offsets.push(0);
        for list in adj.iter_mut() {
            list.sort_unstable();
            list.dedup();
            targets.extend_from_slice(list);
            offsets.push(targets.len());
        }
        Graph {
            num_nodes,
            offsets,
            targets,
            features,
            labels: None,
            splits: None,
            graph_membership: None,
            graph_labels: None,
        }
    }

    /// Builds a graph from raw CSR arrays, checking every invariant.
    pub fn from_csr(offsets: Vec<usize>, targets: Vec<usize>, features: Tensor) -> Result<Self> {
        let num_nodes = offsets.len().saturating_sub(1);
        let g = Graph {
            num_nodes,
            offsets,
            targets,
            features,
            labels: None,
            splits: None,
            graph_membership: None,
            graph_labels: None,
        };
        g.validate()?;
        Ok(g)
    }

    /// Checks the CSR invariants: offsets, sorting, range and symmetry.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_nodes;
        if self.offsets.len() != n + 1 || self.offsets[0] != 0 || self.offsets[n] != self.targets.len() {
            return Err(Error::Data("csr offsets do not frame the target array".into()));
        }
        if self.offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Data("csr offsets decrease".into()));
        }
        if self.features.rows() != n {
            return Err(Error::Data("feature row count differs from node count".into()));
        }
        for v in 0..n {
            let nb = self.neighbors(v);
            if nb.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Data(format!("neighbors of {v} not strictly increasing")));
            }
            for &u in nb {
                if u >= n {
                    return Err(Error::Data(format!("target {u} out of range")));
                }
                if self.neighbors(u).binary_search(&v).is_err() {
                    return Err(Error::Data(format!("edge ({v}, {u}) has no reverse")));
                }
            }
        }
        Ok(())
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Number of stored (directed) adjacency entries.
    pub fn num_edges(&self) -> usize {
        self.targets.len()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.targets[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors(u).binary_search(&v).is_ok()
    }

    pub fn has_self_loops(&self) -> bool {
        (0..self.num_nodes).any(|v| self.has_edge(v, v))
    }

    /// Source node of every stored adjacency entry, in CSR order.
    pub fn edge_sources(&self) -> Vec<usize> {
        let mut src = Vec::with_capacity(self.targets.len());
        for v in 0..self.num_nodes {
            src.extend(std::iter::repeat(v).take(self.degree(v)));
        }
        src
    }

    /// Each undirected non-loop edge once, as `(u, v)` with `u < v`.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.targets.len() / 2);
        for u in 0..self.num_nodes {
            for &v in self.neighbors(u) {
                if u < v {
                    out.push((u, v));
                }
            }
        }
        out
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn splits(&self) -> Option<&[Split]> {
        self.splits.as_deref()
    }

    pub fn graph_membership(&self) -> Option<&[usize]> {
        self.graph_membership.as_deref()
    }

    pub fn graph_labels(&self) -> Option<&[usize]> {
        self.graph_labels.as_deref()
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.num_nodes {
            return Err(Error::Data(format!(
                "{} labels for {} nodes",
                labels.len(),
                self.num_nodes
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_splits(mut self, splits: Vec<Split>) -> Result<Self> {
        if splits.len() != self.num_nodes {
            return Err(Error::Data(format!(
                "{} split entries for {} nodes",
                splits.len(),
                self.num_nodes
            )));
        }
        self.splits = Some(splits);
        Ok(self)
    }

    pub fn with_graph_membership(mut self, membership: Vec<usize>, graph_labels: Option<Vec<usize>>) -> Result<Self> {
        if membership.len() != self.num_nodes {
            return Err(Error::Data(format!(
                "{} membership entries for {} nodes",
                membership.len(),
                self.num_nodes
            )));
        }
        if let Some(gl) = &graph_labels {
            let graphs = membership.iter().max().map_or(0, |m| m + 1);
            if gl.len() < graphs {
                return Err(Error::Data(format!(
                    "{} graph labels for {graphs} graphs",
                    gl.len()
                )));
            }
        }
        self.graph_membership = Some(membership);
        self.graph_labels = graph_labels;
        Ok(self)
    }

    /// Same structure and metadata with replaced node features.
    pub fn with_features(&self, features: Tensor) -> Result<Self> {
        if features.rows() != self.num_nodes {
            return Err(Error::Data("feature row count differs from node count".into()));
        }
        let mut g = self.clone();
        g.features = features;
        Ok(g)
    }

    fn with_structure(&self, adj: Vec<Vec<usize>>) -> Self {
        let mut g = Self::from_adjacency_lists(adj, self.features.clone());
        g.labels = self.labels.clone();
        g.splits = self.splits.clone();
        g.graph_membership = self.graph_membership.clone();
        g.graph_labels = self.graph_labels.clone();
        g
    }

    fn adjacency_lists(&self) -> Vec<Vec<usize>> {
        (0..self.num_nodes).map(|v| self.neighbors(v).to_vec()).collect()
    }

    /// Every node gets exactly one self-loop; other edges are untouched.
    pub fn add_self_loops(&self) -> Graph {
        let mut adj = self.adjacency_lists();
        for (v, list) in adj.iter_mut().enumerate() {
            list.push(v);
        }
        self.with_structure(adj)
    }

    /// Symmetrically normalized adjacency `D^{-1/2} A D^{-1/2}` of this
    /// graph as stored (call on a graph with self-loops for GCN).
    pub fn normalized_adjacency(&self) -> SparseMatrix {
        let inv_sqrt: Vec<f64> = (0..self.num_nodes)
            .map(|v| {
                let d = self.degree(v);
                if d == 0 {
                    0.0
                } else {
                    1.0 / (d as f64).sqrt()
                }
            })
            .collect();
        let values = (0..self.num_nodes)
            .flat_map(|u| {
                let iu = inv_sqrt[u];
                self.neighbors(u).iter().map(move |&v| (iu, v))
            })
            .map(|(iu, v)| iu * inv_sqrt[v])
            .collect();
        SparseMatrix::new(
            self.num_nodes,
            self.num_nodes,
            self.offsets.clone(),
            self.targets.clone(),
            values,
        )
        .expect("graph CSR is valid")
    }

    /// Relabels node `v` to `perm[v]`, carrying features and metadata along.
    pub fn permute(&self, perm: &[usize]) -> Result<Graph> {
        let n = self.num_nodes;
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Data("not a permutation".into()));
        }
        let mut adj = vec![Vec::new(); n];
        for v in 0..n {
            adj[perm[v]] = self.neighbors(v).iter().map(|&u| perm[u]).collect();
        }
        let mut feats = Tensor::zeros(n, self.feature_dim());
        for v in 0..n {
            feats.row_mut(perm[v]).copy_from_slice(self.features.row(v));
        }
        let scatter = |xs: &[usize]| {
            let mut out = vec![0; n];
            for v in 0..n {
                out[perm[v]] = xs[v];
            }
            out
        };
        let mut g = Self::from_adjacency_lists(adj, feats);
        g.labels = self.labels.as_deref().map(scatter);
        g.graph_membership = self.graph_membership.as_deref().map(scatter);
        g.graph_labels = self.graph_labels.clone();
        if let Some(s) = &self.splits {
            let mut out = vec![Split::Unassigned; n];
            for v in 0..n {
                out[perm[v]] = s[v];
            }
            g.splits = Some(out);
        }
        Ok(g)
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_lines<T: FromStr>(path: &Path) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let name = path.display().to_string();
    read_text(path)?
        .lines()
        .enumerate()
        .map(|(i, line)| {
            line.trim().parse::<T>().map_err(|e| Error::Parse {
                file: name.clone(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn parse_features(path: &Path) -> Result<Tensor> {
    let name = path.display().to_string();
    let text = read_text(path)?;
    let mut cols = None;
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        let before = data.len();
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|e| Error::Parse {
                file: name.clone(),
                line: i + 1,
                message: format!("{e}: '{field}'"),
            })?;
            data.push(v);
        }
        let width = data.len() - before;
        match cols {
            None => cols = Some(width),
            Some(c) if c != width => {
                return Err(Error::Parse {
                    file: name,
                    line: i + 1,
                    message: format!("{width} columns, expected {c}"),
                })
            }
            _ => {}
        }
        rows += 1;
    }
    Tensor::from_vec(rows, cols.unwrap_or(0), data)
}

fn parse_edges(path: &Path) -> Result<Vec<(usize, usize)>> {
    let name = path.display().to_string();
    let text = read_text(path)?;
    let mut edges = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace().map(str::parse::<usize>);
        match (it.next(), it.next(), it.next()) {
            (Some(Ok(u)), Some(Ok(v)), None) => edges.push((u, v)),
            _ => {
                return Err(Error::Parse {
                    file: name,
                    line: i + 1,
                    message: format!("expected 'u<TAB>v', got '{line}'"),
                })
            }
        }
    }
    Ok(edges)
}

/// Loads a dataset directory (`graph.edges`, `features.csv`, and the
/// optional `labels.csv`, `splits.csv`, `graph_membership.csv`,
/// `graph_labels.csv`).
pub fn load_graph(dir: impl AsRef<Path>) -> Result<Graph> {
    let dir = dir.as_ref();
    let features = parse_features(&dir.join("features.csv"))?;
    let edges = parse_edges(&dir.join("graph.edges"))?;
    let mut g = Graph::from_edges(features.rows(), &edges, features)?;

    let optional = |name: &str| {
        let p = dir.join(name);
        p.exists().then_some(p)
    };
    if let Some(p) = optional("labels.csv") {
        g = g.with_labels(parse_lines(&p)?)?;
    }
    if let Some(p) = optional("splits.csv") {
        g = g.with_splits(parse_lines(&p)?)?;
    }
    if let Some(p) = optional("graph_membership.csv") {
        let labels = optional("graph_labels.csv").map(|p| parse_lines(&p)).transpose()?;
        g = g.with_graph_membership(parse_lines(&p)?, labels)?;
    }
    Ok(g)
}

/// Writes a graph in the dataset directory layout.
pub fn save_graph(g: &Graph, dir: impl AsRef<Path>) -> Result<()> {
    use std::fmt::Write as _;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, body: String| {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(p, e))
    };
    let mut edges = String::new();
    for (u, v) in g.undirected_edges() {
        let _ = writeln!(edges, "{u}\t{v}");
    }
    write("graph.edges", edges)?;
    let mut feats = String::new();
    for i in 0..g.num_nodes() {
        let row: Vec<String> = g.features().row(i).iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(feats, "{}", row.join(","));
    }
    write("features.csv", feats)?;
    let lines = |xs: &[usize]| xs.iter().map(|x| format!("{x}\n")).collect::<String>();
    if let Some(l) = g.labels() {
        write("labels.csv", lines(l))?;
    }
    if let Some(s) = g.splits() {
        let body = s
            .iter()
            .map(|s| match s {
                Split::Train => "train\n",
                Split::Val => "val\n",
                Split::Test => "test\n",
                Split::Unassigned => "none\n",
            })
            .collect();
        write("splits.csv", body)?;
    }
    if let Some(m) = g.graph_membership() {
        write("graph_membership.csv", lines(m))?;
    }
    if let Some(l) = g.graph_labels() {
        write("graph_labels.csv", lines(l))?;
    }
    Ok(())
}

/// Held-out edges for link prediction.
#[derive(Clone, Debug)]
pub struct EdgeSplit {
    pub train_graph: Graph,
    pub test_pos: Vec<(usize, usize)>,
    pub test_neg: Vec<(usize, usize)>,
}

/// Removes `floor(test_ratio · E)` undirected edges as test positives and
/// samples as many non-edges as test negatives.
pub fn split_edges(g: &Graph, test_ratio: f64, seed: u64) -> Result<EdgeSplit> {
    if !(0.0..1.0).contains(&test_ratio) {
        return Err(Error::Config(format!("test ratio {test_ratio} outside [0, 1)")));
    }
    let mut edges = g.undirected_edges();
    if edges.is_empty() {
        return Err(Error::Data("cannot split a graph without edges".into()));
    }
    let num_test = (test_ratio * edges.len() as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    edges.shuffle(&mut rng);
    let mut test_pos: Vec<(usize, usize)> = edges[..num_test].to_vec();
    test_pos.sort_unstable();

    let removed: HashSet<(usize, usize)> = test_pos.iter().copied().collect();
    let mut adj = g.adjacency_lists();
    for list in adj.iter_mut() {
        list.clear();
    }
    for &(u, v) in &edges[num_test..] {
        adj[u].push(v);
        adj[v].push(u);
    }
    debug_assert!(edges[num_test..].iter().all(|e| !removed.contains(e)));
    let train_graph = g.with_structure(adj);
    let test_neg = sample_negatives(g, num_test, &mut rng)?;
    Ok(EdgeSplit {
        train_graph,
        test_pos,
        test_neg,
    })
}

/// Uniform non-edge pairs `(u, v)`, `u < v`, without replacement.
pub fn sample_negatives(g: &Graph, count: usize, rng: &mut impl Rng) -> Result<Vec<(usize, usize)>> {
    let n = g.num_nodes();
    let total_pairs = n * n.saturating_sub(1) / 2;
    let available = total_pairs - g.undirected_edges().len();
    if count > available {
        return Err(Error::Data(format!(
            "need {count} negative pairs but only {available} non-edges exist"
        )));
    }
    let mut chosen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let u = rng.gen_range(0..n);
        let v = rng.gen_range(0..n);
        if u == v {
            continue;
        }
        let pair = (u.min(v), u.max(v));
        if g.has_edge(pair.0, pair.1) || !chosen.insert(pair) {
            continue;
        }
        out.push(pair);
    }
    Ok(out)
}

/// Per node, the `k` neighbors farthest from it in Euclidean feature
/// distance, ties broken toward the smaller id. Lists are sorted by id.
pub fn farthest_neighbors(g: &Graph, k: usize) -> Vec<Vec<usize>> {
    let feats = g.features();
    (0..g.num_nodes())
        .map(|v| {
            let mut scored: Vec<(f64, usize)> = g
                .neighbors(v)
                .iter()
                .map(|&u| {
                    let d2: f64 = feats
                        .row(v)
                        .iter()
                        .zip(feats.row(u))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    (d2.sqrt(), u)
                })
                .collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut kept: Vec<usize> = scored.iter().take(k).map(|&(_, u)| u).collect();
            kept.sort_unstable();
            kept
        })
        .collect()
}

/// Subsamples neighborhoods with [`farthest_neighbors`]; an edge survives if
/// either endpoint kept it.
pub fn neighbor_topk_by_distance(g: &Graph, k: usize) -> Graph {
    let mut adj = vec![Vec::new(); g.num_nodes()];
    for (v, kept) in farthest_neighbors(g, k).into_iter().enumerate() {
        for u in kept {
            adj[v].push(u);
            adj[u].push(v);
        }
    }
    g.with_structure(adj)
}

/// Stochastic block model: block id becomes the label, features are a block
/// indicator plus uniform `[0, 1)` noise.
pub fn synth_sbm(block_sizes: &[usize], p_in: f64, p_out: f64, feature_dim: usize, seed: u64) -> Result<Graph> {
    for p in [p_in, p_out] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("probability {p} outside [0, 1]")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = block_sizes
        .iter()
        .enumerate()
        .flat_map(|(b, &size)| std::iter::repeat(b).take(size))
        .collect();
    let n = labels.len();
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if labels[u] == labels[v] { p_in } else { p_out };
            if rng.gen::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    let mut features = Tensor::zeros(n, feature_dim);
    if feature_dim > 0 {
        for (v, &b) in labels.iter().enumerate() {
            let row = features.row_mut(v);
            for x in row.iter_mut() {
                *x = rng.gen::<f64>();
            }
            row[b % feature_dim] += 1.0;
        }
    }
    Graph::from_edges(n, &edges, features)?.with_labels(labels)
}
