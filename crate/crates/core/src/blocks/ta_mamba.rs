use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::invert_permutation;
use crate::numerics::{Tape, Tensor, Var, LAYER_NORM_EPS};
use crate::params::{Bound, ParamId, ParamStore};
use crate::ssm::{bi_ssm, ssm_forward, ScanDims, SsmHeadParams};

/// How a block serialises its instances before scanning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanningStrategy {
    /// Index, pre-, post- and level-order traversals, each bi-directional.
    #[default]
    TopologyAware,
    /// A single forward scan in index order.
    Unidirectional,
    /// A single bi-directional scan in index order.
    Bidirectional,
    /// Four bi-directional scans over independently shuffled orders.
    ShuffleRescan,
}

impl ScanningStrategy {
    pub fn branches(self) -> usize {
        match self {
            ScanningStrategy::TopologyAware | ScanningStrategy::ShuffleRescan => 4,
            ScanningStrategy::Unidirectional | ScanningStrategy::Bidirectional => 1,
        }
    }

    pub fn bidirectional(self) -> bool {
        self != ScanningStrategy::Unidirectional
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockDims {
    pub model_dim: usize,
    pub inner_dim: usize,
    pub heads: usize,
    pub state_dim: usize,
}

impl BlockDims {
    pub fn scan_dims(&self) -> ScanDims {
        ScanDims {
            heads: self.heads,
            head_dim: self.inner_dim / self.heads,
            state_dim: self.state_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub fwd: SsmHeadParams,
    pub bwd: Option<SsmHeadParams>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Affine {
    pub w: ParamId,
    pub b: ParamId,
}

impl Affine {
    pub fn init(store: &mut ParamStore, prefix: &str, din: usize, dout: usize, rng: &mut impl Rng) -> Self {
        Affine {
            w: store.add_uniform(format!("{prefix}.w"), &[din, dout], din, rng),
            b: store.add_uniform(format!("{prefix}.b"), &[dout], din, rng),
        }
    }

    pub fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p[self.w], Some(p[self.b]))
    }
}

/// Gated fusion of several ordered scans:
/// `out = proj_out(Norm(SiLU(Z̄) ⊗ mean_i σ_i(scan_i(X̄ reordered by order_i))))`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaMambaBlock {
    pub dims: BlockDims,
    pub strategy: ScanningStrategy,
    pub residual: bool,
    pub proj_x: Affine,
    pub proj_z: Affine,
    pub branches: Vec<Branch>,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub proj_out: Affine,
}

impl TaMambaBlock {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        dims: BlockDims,
        strategy: ScanningStrategy,
        residual: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if dims.heads == 0 || !dims.inner_dim.is_multiple_of(dims.heads) {
            return Err(Error::Config(format!(
                "inner width {} is not divisible into {} heads",
                dims.inner_dim, dims.heads
            )));
        }
        let (d, inner) = (dims.model_dim, dims.inner_dim);
        let proj_x = Affine::init(store, &format!("{prefix}.proj_x"), d, inner, rng);
        let proj_z = Affine::init(store, &format!("{prefix}.proj_z"), d, inner, rng);
        let branches = (0..strategy.branches())
            .map(|i| Branch {
                fwd: SsmHeadParams::init(store, &format!("{prefix}.branch{i}.fwd"), dims.scan_dims(), rng),
                bwd: strategy
                    .bidirectional()
                    .then(|| SsmHeadParams::init(store, &format!("{prefix}.branch{i}.bwd"), dims.scan_dims(), rng)),
            })
            .collect();
        let gamma = store.add(format!("{prefix}.norm.gamma"), Tensor::full(&[inner], 1.0));
        let beta = store.add(format!("{prefix}.norm.beta"), Tensor::zeros(&[inner]));
        let proj_out = Affine::init(store, &format!("{prefix}.proj_out"), inner, d, rng);
        Ok(TaMambaBlock {
            dims,
            strategy,
            residual,
            proj_x,
            proj_z,
            branches,
            gamma,
            beta,
            proj_out,
        })
    }
}

/// Runs the block; `orders[i]` is the row order fed to branch `i`.
pub fn ta_mamba_forward(
    tape: &mut Tape,
    p: &Bound,
    block: &TaMambaBlock,
    x: Var,
    orders: &[Vec<usize>],
) -> Result<Var> {
    let m = tape.shape(x)[0];
    if orders.len() != block.branches.len() {
        return Err(Error::dim("ta_mamba orders", &[block.branches.len()], &[orders.len()]));
    }
    if let Some(bad) = orders.iter().find(|o| o.len() != m) {
        return Err(Error::dim("ta_mamba order length", &[m], &[bad.len()]));
    }
    let xbar = block.proj_x.apply(tape, p, x)?;
    let zbar = block.proj_z.apply(tape, p, x)?;
    let mut outs = Vec::with_capacity(orders.len());
    for (branch, order) in block.branches.iter().zip(orders) {
        let inverse = invert_permutation(order)?;
        let xs = tape.permute_rows(xbar, order)?;
        let ys = match &branch.bwd {
            Some(bwd) => bi_ssm(tape, p, &branch.fwd, bwd, xs)?,
            None => ssm_forward(tape, p, &branch.fwd, xs)?,
        };
        outs.push(tape.permute_rows(ys, &inverse)?);
    }
    let fused = tape.mean(&outs)?;
    let gate = tape.silu(zbar);
    let gated = tape.mul(gate, fused)?;
    let normed = tape.layer_norm(gated, p[block.gamma], p[block.beta], LAYER_NORM_EPS)?;
    let out = block.proj_out.apply(tape, p, normed)?;
    if block.residual {
        tape.add(out, x)
    } else {
        Ok(out)
    }
}
