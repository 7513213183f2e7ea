//! Masked graph autoencoder: node masking, a single-layer GCN encoder and a
//! GCN decoder.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::{SparseMatrix, Tensor};

/// PReLU slope at initialization.
pub const INITIAL_SLOPE: f64 = 0.25;

/// Learnable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GaeModel {
    /// `F×H`
    pub w_enc: Tensor,
    /// `H×F`
    pub w_dec: Tensor,
    /// `1×F`, substituted for masked input rows.
    pub mask_token: Tensor,
    /// `1×H`, substituted for masked codes when remasking.
    pub remask_token: Tensor,
    pub act_slope_enc: f64,
    pub act_slope_dec: f64,
}

fn uniform_init(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(rows, cols, data).expect("sized")
}

impl GaeModel {
    /// Weights uniform in `±1/√fan_in`, tokens zero, slopes 0.25.
    pub fn new(feature_dim: usize, hidden_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w_enc = uniform_init(feature_dim, hidden_dim, &mut rng);
        let w_dec = uniform_init(hidden_dim, feature_dim, &mut rng);
        GaeModel {
            w_enc,
            w_dec,
            mask_token: Tensor::zeros(1, feature_dim),
            remask_token: Tensor::zeros(1, hidden_dim),
            act_slope_enc: INITIAL_SLOPE,
            act_slope_dec: INITIAL_SLOPE,
        }
    }

    /// All-zero weights; useful as a fixture.
    pub fn zeros(feature_dim: usize, hidden_dim: usize) -> Self {
        GaeModel {
            w_enc: Tensor::zeros(feature_dim, hidden_dim),
            w_dec: Tensor::zeros(hidden_dim, feature_dim),
            mask_token: Tensor::zeros(1, feature_dim),
            remask_token: Tensor::zeros(1, hidden_dim),
            act_slope_enc: INITIAL_SLOPE,
            act_slope_dec: INITIAL_SLOPE,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.w_enc.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_enc.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (f, h) = self.w_enc.shape();
        if self.w_dec.shape() != (h, f) || self.mask_token.shape() != (1, f) || self.remask_token.shape() != (1, h) {
            return Err(Error::shape("model", "parameter shapes are inconsistent"));
        }
        let finite = [&self.w_enc, &self.w_dec, &self.mask_token, &self.remask_token]
            .iter()
            .all(|t| t.is_finite())
            && self.act_slope_enc.is_finite()
            && self.act_slope_dec.is_finite();
        if !finite {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(())
    }

    pub fn check_graph(&self, g: &Graph) -> Result<()> {
        if g.feature_dim() != self.feature_dim() {
            return Err(Error::shape(
                "model",
                format!("graph has {} features, model expects {}", g.feature_dim(), self.feature_dim()),
            ));
        }
        Ok(())
    }

    /// Places every parameter on the tape as a gradient-tracked leaf.
    pub fn register(&self, tape: &mut Tape) -> ModelVars {
        ModelVars {
            w_enc: tape.param(self.w_enc.clone()),
            w_dec: tape.param(self.w_dec.clone()),
            mask_token: tape.param(self.mask_token.clone()),
            remask_token: tape.param(self.remask_token.clone()),
            slope_enc: tape.param(Tensor::scalar(self.act_slope_enc)),
            slope_dec: tape.param(Tensor::scalar(self.act_slope_dec)),
        }
    }

    /// Places every parameter on the tape as a constant.
    pub fn register_frozen(&self, tape: &mut Tape) -> ModelVars {
        ModelVars {
            w_enc: tape.constant(self.w_enc.clone()),
            w_dec: tape.constant(self.w_dec.clone()),
            mask_token: tape.constant(self.mask_token.clone()),
            remask_token: tape.constant(self.remask_token.clone()),
            slope_enc: tape.constant(Tensor::scalar(self.act_slope_enc)),
            slope_dec: tape.constant(Tensor::scalar(self.act_slope_dec)),
        }
    }

    /// Mutable views of every parameter in a fixed order:
    /// `w_enc, w_dec, mask_token, remask_token, slope_enc, slope_dec`.
    pub fn parameters_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w_enc.data_mut(),
            self.w_dec.data_mut(),
            self.mask_token.data_mut(),
            self.remask_token.data_mut(),
            std::slice::from_mut(&mut self.act_slope_enc),
            std::slice::from_mut(&mut self.act_slope_dec),
        ]
    }

    pub fn parameter_sizes(&self) -> [usize; 6] {
        [
            self.w_enc.len(),
            self.w_dec.len(),
            self.mask_token.len(),
            self.remask_token.len(),
            1,
            1,
        ]
    }
}

/// Tape handles for a registered [`GaeModel`].
#[derive(Clone, Copy, Debug)]
pub struct ModelVars {
    pub w_enc: Var,
    pub w_dec: Var,
    pub mask_token: Var,
    pub remask_token: Var,
    pub slope_enc: Var,
    pub slope_dec: Var,
}

impl ModelVars {
    /// Gradients in [`GaeModel::parameters_mut`] order; missing gradients
    /// are zero.
    pub fn grads(&self, tape: &Tape, model: &GaeModel) -> [Tensor; 6] {
        let pick = |v: Var, shape: (usize, usize)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(shape.0, shape.1));
        [
            pick(self.w_enc, model.w_enc.shape()),
            pick(self.w_dec, model.w_dec.shape()),
            pick(self.mask_token, model.mask_token.shape()),
            pick(self.remask_token, model.remask_token.shape()),
            pick(self.slope_enc, (1, 1)),
            pick(self.slope_dec, (1, 1)),
        ]
    }
}

/// Nodes whose input features are replaced by the mask token.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    /// Sorted, unique.
    pub masked_ids: Vec<usize>,
    pub lambda: f64,
}

/// `round(λ·N)` with halves rounded up.
pub fn mask_count(num_nodes: usize, lambda: f64) -> usize {
    ((lambda * num_nodes as f64 + 0.5).floor() as usize).min(num_nodes)
}

/// Uniform sample of `round(λ·N)` nodes without replacement.
pub fn sample_mask(num_nodes: usize, lambda: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("mask ratio {lambda} outside [0, 1]")));
    }
    let mut ids: Vec<usize> = (0..num_nodes).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = mask_count(num_nodes, lambda);
    ids.partial_shuffle(&mut rng, count);
    let mut masked_ids = ids[..count].to_vec();
    masked_ids.sort_unstable();
    Ok(MaskPlan { masked_ids, lambda })
}

/// Copies the features of `g` with masked rows replaced by `mask_token`.
pub fn mask_nodes(g: &Graph, lambda: f64, mask_token: &Tensor, seed: u64) -> Result<(Tensor, MaskPlan)> {
    if mask_token.shape() != (1, g.feature_dim()) {
        return Err(Error::shape("mask_nodes", "mask token width differs from feature width"));
    }
    let plan = sample_mask(g.num_nodes(), lambda, seed)?;
    let mut x = g.features().clone();
    for &i in &plan.masked_ids {
        x.row_mut(i).copy_from_slice(mask_token.row(0));
    }
    Ok((x, plan))
}

/// A graph together with its GCN propagation operator.
#[derive(Clone, Debug)]
pub struct PreparedGraph {
    graph: Graph,
    adj: Arc<SparseMatrix>,
}

impl PreparedGraph {
    /// `g` must be loop-free; the operator is built on `g` plus self-loops.
    pub fn new(g: Graph) -> Self {
        let adj = Arc::new(g.add_self_loops().normalized_adjacency());
        PreparedGraph { graph: g, adj }
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn adjacency(&self) -> &Arc<SparseMatrix> {
        &self.adj
    }
}

/// `prelu(Â · x · w)` recorded on the tape. The cheaper association is
/// picked from the weight shape.
pub fn gcn_layer(tape: &mut Tape, x: Var, adj: &Arc<SparseMatrix>, w: Var, slope: Var) -> Result<Var> {
    let (fan_in, fan_out) = tape.value(w).shape();
    if tape.value(x).cols() != fan_in {
        return Err(Error::shape(
            "gcn_forward",
            format!("features {:?} vs weight {:?}", tape.value(x).shape(), (fan_in, fan_out)),
        ));
    }
    let pre = if fan_out < fan_in {
        let xw = tape.matmul(x, w)?;
        tape.spmm(adj, xw)?
    } else {
        let ax = tape.spmm(adj, x)?;
        tape.matmul(ax, w)?
    };
    tape.prelu(pre, slope)
}

/// Value-level GCN layer `prelu(D^{-1/2}(A+I)D^{-1/2} X W)`; `g` must already
/// contain a self-loop on every node.
pub fn gcn_forward(features: &Tensor, g_with_self_loops: &Graph, w: &Tensor, slope: f64) -> Result<Tensor> {
    if (0..g_with_self_loops.num_nodes()).any(|v| !g_with_self_loops.has_edge(v, v)) {
        return Err(Error::Data("gcn_forward needs a self-loop on every node".into()));
    }
    if features.rows() != g_with_self_loops.num_nodes() {
        return Err(Error::shape("gcn_forward", "feature rows differ from node count"));
    }
    let adj = Arc::new(g_with_self_loops.normalized_adjacency());
    let mut tape = Tape::new();
    let x = tape.constant(features.clone());
    let w = tape.constant(w.clone());
    let s = tape.constant(Tensor::scalar(slope));
    let out = gcn_layer(&mut tape, x, &adj, w, s)?;
    Ok(tape.value(out).clone())
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// Encoder output `N×H`.
    pub hidden: Var,
    /// Decoder output `N×F`.
    pub recon: Var,
}

/// Records masked encoding and decoding on `tape`.
pub fn forward_on_tape(
    tape: &mut Tape,
    vars: &ModelVars,
    graph: &PreparedGraph,
    plan: &MaskPlan,
    remask: bool,
) -> Result<ForwardVars> {
    let adj = graph.adjacency();
    let (fan_in, fan_out) = tape.value(vars.w_enc).shape();
    if graph.graph().feature_dim() != fan_in {
        return Err(Error::shape("forward", "graph feature width differs from encoder input"));
    }
    let x = tape.constant(graph.graph().features().clone());
    let pre = if plan.masked_ids.is_empty() {
        let layer = gcn_layer(tape, x, adj, vars.w_enc, vars.slope_enc)?;
        return decode(tape, vars, adj, layer, plan, remask);
    } else if fan_out < fan_in {
        // (X with token rows) · W  ==  X·W with token·W rows
        let xw = tape.matmul(x, vars.w_enc)?;
        let tw = tape.matmul(vars.mask_token, vars.w_enc)?;
        let masked = tape.replace_rows(xw, &plan.masked_ids, tw)?;
        tape.spmm(adj, masked)?
    } else {
        let masked = tape.replace_rows(x, &plan.masked_ids, vars.mask_token)?;
        let ax = tape.spmm(adj, masked)?;
        tape.matmul(ax, vars.w_enc)?
    };
    let hidden = tape.prelu(pre, vars.slope_enc)?;
    decode(tape, vars, adj, hidden, plan, remask)
}

fn decode(
    tape: &mut Tape,
    vars: &ModelVars,
    adj: &Arc<SparseMatrix>,
    hidden: Var,
    plan: &MaskPlan,
    remask: bool,
) -> Result<ForwardVars> {
    let codes = if remask && !plan.masked_ids.is_empty() {
        tape.replace_rows(hidden, &plan.masked_ids, vars.remask_token)?
    } else {
        hidden
    };
    let recon = gcn_layer(tape, codes, adj, vars.w_dec, vars.slope_dec)?;
    Ok(ForwardVars { hidden, recon })
}

/// Value-level forward pass: `(H, X̂, plan)` for a fresh mask drawn with `seed`.
pub fn forward(model: &GaeModel, g: &PreparedGraph, lambda: f64, seed: u64, remask: bool) -> Result<(Tensor, Tensor, MaskPlan)> {
    model.check_graph(g.graph())?;
    let plan = sample_mask(g.graph().num_nodes(), lambda, seed)?;
    let mut tape = Tape::new();
    let vars = model.register_frozen(&mut tape);
    let out = forward_on_tape(&mut tape, &vars, g, &plan, remask)?;
    Ok((tape.value(out.hidden).clone(), tape.value(out.recon).clone(), plan))
}
