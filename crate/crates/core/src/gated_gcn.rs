//! Graph convolutions over the sentence graph and trigger-conditioned gates.
//!
//! Layer `l` averages the previous layer over each node's neighborhood
//! (self-loop included), projects with `W^l` and applies ReLU. Each layer
//! also owns a gate `g^l = sigmoid(W_g^l e_t)` computed from the trigger
//! candidate; the filtered vectors are `m^l_i = g^l * h^l_i`.

use rand::Rng;

use crate::corpus::SentenceGraph;
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamSet, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GcnParams {
    /// `W^l`, stored as `fan_in x dim`.
    pub layers: Vec<ParamId>,
    /// `W_g^l`, stored as `gate_input_dim x dim`.
    pub gates: Vec<ParamId>,
    pub input_dim: usize,
    pub gate_input_dim: usize,
    pub dim: usize,
}

impl GcnParams {
    /// Uniform `[-k, k]` with `k = 1/sqrt(fan_in)`; no bias terms.
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParamSet,
        num_layers: usize,
        input_dim: usize,
        gate_input_dim: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_layers == 0 {
            return Err(Error::invalid("gcn", "at least one layer is required"));
        }
        let mut layers = Vec::with_capacity(num_layers);
        let mut gates = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let fan_in = if l == 0 { input_dim } else { dim };
            let k = 1.0 / (fan_in as f64).sqrt();
            layers.push(params.add(
                format!("gcn.layer{}.weight", l + 1),
                Tensor::uniform(vec![fan_in, dim], k, rng)?.with_grad(),
            ));
        }
        for l in 0..num_layers {
            let k = 1.0 / (gate_input_dim as f64).sqrt();
            gates.push(params.add(
                format!("gcn.gate{}.weight", l + 1),
                Tensor::uniform(vec![gate_input_dim, dim], k, rng)?.with_grad(),
            ));
        }
        Ok(Self {
            layers,
            gates,
            input_dim,
            gate_input_dim,
            dim,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }
}

/// `ReLU(mean_{j in N(i)} h_prev_j  W)` for every node `i`.
pub fn gcn_layer(tape: &mut Tape, h_prev: Var, graph: &SentenceGraph, weight: Var) -> Result<Var> {
    if tape.value(h_prev).rows() != graph.n() {
        return Err(Error::invalid(
            "gcn_layer",
            format!(
                "graph has {} nodes but the input has {} rows",
                graph.n(),
                tape.value(h_prev).rows()
            ),
        ));
    }
    let averaged = tape.graph_mean(h_prev, graph.neighbor_lists())?;
    let projected = tape.matmul(averaged, weight)?;
    tape.relu(projected)
}

/// `h^1 .. h^L` on top of `h0`.
pub fn gcn_stack(
    tape: &mut Tape,
    params: &ParamSet,
    h0: Var,
    graph: &SentenceGraph,
    gcn: &GcnParams,
) -> Result<Vec<Var>> {
    let mut out = Vec::with_capacity(gcn.num_layers());
    let mut prev = h0;
    for &w in &gcn.layers {
        let w = tape.param(params, w);
        prev = gcn_layer(tape, prev, graph, w)?;
        out.push(prev);
    }
    Ok(out)
}

/// `g^l = sigmoid(source W_g^l)` for each layer; `source` is a single row.
pub fn compute_gates(
    tape: &mut Tape,
    params: &ParamSet,
    source: Var,
    gcn: &GcnParams,
) -> Result<Vec<Var>> {
    gcn.gates
        .iter()
        .map(|&w| {
            let w = tape.param(params, w);
            let pre = tape.matmul(source, w)?;
            tape.sigmoid(pre)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct GatedLayers {
    /// `m^l`, one `n x d_g` matrix per layer.
    pub filtered: Vec<Var>,
    /// `pooled[k][l]` is the column max over `i` of `g^k * h^l_i`.
    pub pooled: Vec<Vec<Var>>,
}

/// Applies every gate to every layer: `m^l = g^l * h^l` and the max-pooled
/// cross applications.
pub fn apply_gates(tape: &mut Tape, hidden: &[Var], gates: &[Var]) -> Result<GatedLayers> {
    if hidden.len() != gates.len() {
        return Err(Error::invalid(
            "apply_gates",
            format!("{} layers but {} gates", hidden.len(), gates.len()),
        ));
    }
    let layers = hidden.len();
    let mut filtered = Vec::with_capacity(layers);
    let mut pooled = vec![Vec::with_capacity(layers); layers];
    for (k, &g) in gates.iter().enumerate() {
        for (l, &h) in hidden.iter().enumerate() {
            let m = tape.mul(h, g)?;
            if k == l {
                filtered.push(m);
            }
            pooled[k].push(tape.max_pool_rows(m)?);
        }
    }
    // filtered was pushed in gate order, which is layer order on the diagonal
    Ok(GatedLayers { filtered, pooled })
}

/// Cosine penalty between a layer's own pooled vector and the same layer
/// filtered by each later gate:
/// `1/(L(L-1)) * sum_l sum_{k>l} cos(pooled[l][l], pooled[k][l])`.
/// With `pair_mean` the sum is averaged over the `L(L-1)/2` pairs instead.
pub fn gate_diversity_loss(tape: &mut Tape, pooled: &[Vec<Var>], pair_mean: bool) -> Result<Var> {
    let layers = pooled.len();
    if layers < 2 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let mut terms = Vec::with_capacity(layers * (layers - 1) / 2);
    for (l, own) in pooled.iter().enumerate() {
        for later in &pooled[l + 1..] {
            terms.push(tape.cosine(own[l], later[l])?);
        }
    }
    let stacked = tape.concat_rows(&terms)?;
    let total = tape.sum_all(stacked)?;
    let denom = if pair_mean {
        terms.len() as f64
    } else {
        (layers * (layers - 1)) as f64
    };
    tape.scale(total, 1.0 / denom)
}
