use rand::Rng;

use crate::blocks::Affine;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};
use crate::params::{Bound, ParamId, ParamStore};

/// Attention pooling: `s_i = wᵀ tanh(V h_i)` (optionally gated by
/// `sigmoid(U h_i)`), `alpha = softmax(s)`, `z = Σ alpha_i h_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionPool {
    pub v: Affine,
    pub gate: Option<Affine>,
    pub w: ParamId,
}

impl AttentionPool {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        hidden: usize,
        gated: bool,
        rng: &mut impl Rng,
    ) -> Self {
        AttentionPool {
            v: Affine::init(store, &format!("{prefix}.v"), dim, hidden, rng),
            gate: gated.then(|| Affine::init(store, &format!("{prefix}.u"), dim, hidden, rng)),
            w: store.add_uniform(format!("{prefix}.w"), &[hidden, 1], hidden, rng),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Pooled {
    /// Bag representation, `1×D`.
    pub z: Var,
    /// Instance weights, `M×1`.
    pub alpha: Var,
}

pub fn attention_pool(tape: &mut Tape, p: &Bound, pool: &AttentionPool, h: Var) -> Result<Pooled> {
    if tape.shape(h).len() != 2 {
        return Err(Error::dim("attention_pool", tape.shape(h), &[2]));
    }
    let a = pool.v.apply(tape, p, h)?;
    let mut a = tape.tanh(a);
    if let Some(u) = &pool.gate {
        let g = u.apply(tape, p, h)?;
        let g = tape.sigmoid(g);
        a = tape.mul(a, g)?;
    }
    let scores = tape.linear(a, p[pool.w], None)?;
    let alpha = tape.softmax(scores, 0)?;
    let at = tape.transpose(alpha)?;
    let z = tape.matmul(at, h)?;
    Ok(Pooled { z, alpha })
}
