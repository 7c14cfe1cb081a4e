use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::WsiGraph;
use crate::numerics::{CustomOp, Tape, Tensor, Var};
use crate::params::{Bound, ParamId, ParamStore};

/// Perturbation added to every neighbour message.
pub const GIA_EPSILON: f64 = 1e-7;

/// One round of first-order neighbour message passing followed by a
/// two-layer perceptron (hidden width = input width, ReLU inside).
#[derive(Debug, Clone, PartialEq)]
pub struct GiaBlock {
    pub dim: usize,
    pub epsilon: f64,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl GiaBlock {
    pub fn init(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut impl Rng) -> Self {
        GiaBlock {
            dim,
            epsilon: GIA_EPSILON,
            w1: store.add_uniform(format!("{prefix}.mlp.w1"), &[dim, dim], dim, rng),
            b1: store.add_uniform(format!("{prefix}.mlp.b1"), &[dim], dim, rng),
            w2: store.add_uniform(format!("{prefix}.mlp.w2"), &[dim, dim], dim, rng),
            b2: store.add_uniform(format!("{prefix}.mlp.b2"), &[dim], dim, rng),
        }
    }

    pub fn mlp(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = tape.linear(x, p[self.w1], Some(p[self.b1]))?;
        let h = tape.relu(h);
        tape.linear(h, p[self.w2], Some(p[self.b2]))
    }
}

/// Per node and feature: softmax-weighted sum of `ReLU(x_j) + eps` over
/// the neighbours `j`. Nodes without neighbours aggregate to zero.
pub fn aggregate_values(x: &Tensor, adjacency: &[Vec<usize>], eps: f64) -> Tensor {
    let (m, d) = (x.rows(), x.cols());
    let mut out = vec![0.0; m * d];
    let mut msg = Vec::new();
    for (i, nbrs) in adjacency.iter().enumerate() {
        if nbrs.is_empty() {
            continue;
        }
        for k in 0..d {
            msg.clear();
            msg.extend(nbrs.iter().map(|&j| x.data()[j * d + k].max(0.0) + eps));
            let mx = msg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let (mut z, mut acc) = (0.0, 0.0);
            for &v in &msg {
                let e = (v - mx).exp();
                z += e;
                acc += e * v;
            }
            out[i * d + k] = acc / z;
        }
    }
    Tensor::new(vec![m, d], out).expect("aggregate shape")
}

#[derive(Debug)]
struct NeighborSoftmaxAggregate {
    adjacency: Vec<Vec<usize>>,
    eps: f64,
}

impl CustomOp for NeighborSoftmaxAggregate {
    fn name(&self) -> &'static str {
        "neighbor_softmax_aggregate"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0];
        let d = x.cols();
        let mut dx = vec![0.0; x.len()];
        let mut msg = Vec::new();
        for (i, nbrs) in self.adjacency.iter().enumerate() {
            if nbrs.is_empty() {
                continue;
            }
            for k in 0..d {
                msg.clear();
                msg.extend(nbrs.iter().map(|&j| x.data()[j * d + k].max(0.0) + self.eps));
                let mx = msg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = msg.iter().map(|v| (v - mx).exp()).sum();
                let agg = output.data()[i * d + k];
                let gi = g[i * d + k];
                for (&j, &v) in nbrs.iter().zip(&msg) {
                    if x.data()[j * d + k] > 0.0 {
                        let w = (v - mx).exp() / z;
                        dx[j * d + k] += gi * w * (1.0 + v - agg);
                    }
                }
            }
        }
        vec![Some(dx)]
    }
}

pub fn neighbor_aggregate(tape: &mut Tape, x: Var, graph: &WsiGraph, eps: f64) -> Result<Var> {
    if tape.shape(x)[0] != graph.num_nodes {
        return Err(Error::dim("neighbor_aggregate", tape.shape(x), &[graph.num_nodes]));
    }
    let out = aggregate_values(tape.value(x), &graph.adjacency, eps);
    Ok(tape.custom(
        &[x],
        out,
        Box::new(NeighborSoftmaxAggregate {
            adjacency: graph.adjacency.clone(),
            eps,
        }),
    ))
}

/// `x_i' = MLP(x_i + A({ReLU(x_j) + eps | j ∈ N(i)}))`.
pub fn gia_forward(tape: &mut Tape, p: &Bound, block: &GiaBlock, x: Var, graph: &WsiGraph) -> Result<Var> {
    let agg = neighbor_aggregate(tape, x, graph, block.epsilon)?;
    let h = tape.add(x, agg)?;
    block.mlp(tape, p, h)
}

/// Update for a node with no neighbours: the aggregate is zero.
pub fn gia_isolated_node(tape: &mut Tape, p: &Bound, block: &GiaBlock, x_row: Var) -> Result<Var> {
    block.mlp(tape, p, x_row)
}
