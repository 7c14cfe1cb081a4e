use crate::error::{Error, Result};
use crate::numerics::{CustomOp, Tape, Tensor, Var};

/// Head layout of a multi-head scan: input width is `heads * head_dim`,
/// each head carries a `head_dim × state_dim` state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanDims {
    pub heads: usize,
    pub head_dim: usize,
    pub state_dim: usize,
}

impl ScanDims {
    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Zero-order-hold discretisation with the first-order input term:
/// `Ā = exp(Δ·A)`, `B̄ = Δ·B`.
pub fn discretize(a: f64, delta: f64, b: &[f64]) -> (f64, Vec<f64>) {
    ((delta * a).exp(), b.iter().map(|v| delta * v).collect())
}

fn check_shapes(x: &Tensor, b: &Tensor, c: &Tensor, dt: &Tensor, a: &[f64], dims: ScanDims) -> Result<usize> {
    let m = x.rows();
    if x.shape() != [m, dims.width()] {
        return Err(Error::dim("scan input", x.shape(), &[m, dims.width()]));
    }
    for (t, w) in [(b, dims.state_dim), (c, dims.state_dim), (dt, dims.heads)] {
        if t.shape() != [m, w] {
            return Err(Error::dim("scan parameters", t.shape(), &[m, w]));
        }
    }
    if a.len() != dims.heads {
        return Err(Error::dim("scan state coefficients", &[a.len()], &[dims.heads]));
    }
    Ok(m)
}

/// One left-to-right pass of `S_i = Ā_i S_{i-1} + Δ_i x_i B_iᵀ`, `y_i = S_i C_i`
/// per head, with `a[h] = A_h` the (negative) state coefficient.
///
/// When `keep_states` is set, every post-update state is returned
/// (layout `[step][head][head_dim][state_dim]`).
fn run(
    x: &Tensor,
    b: &Tensor,
    c: &Tensor,
    dt: &Tensor,
    a: &[f64],
    dims: ScanDims,
    keep_states: bool,
) -> Result<(Tensor, Vec<f64>)> {
    let m = check_shapes(x, b, c, dt, a, dims)?;
    let ScanDims {
        heads,
        head_dim: p,
        state_dim: n,
    } = dims;
    let width = dims.width();
    let block = heads * p * n;
    let mut state = vec![0.0; block];
    let mut states = if keep_states {
        Vec::with_capacity(m * block)
    } else {
        Vec::new()
    };
    let mut y = vec![0.0; m * width];
    let (xd, bd, cd, dtd) = (x.data(), b.data(), c.data(), dt.data());
    for i in 0..m {
        let bi = &bd[i * n..(i + 1) * n];
        let ci = &cd[i * n..(i + 1) * n];
        for h in 0..heads {
            let delta = dtd[i * heads + h];
            let abar = (delta * a[h]).exp();
            for q in 0..p {
                let col = h * p + q;
                let coef = delta * xd[i * width + col];
                let s = &mut state[(h * p + q) * n..(h * p + q + 1) * n];
                let mut acc = 0.0;
                for k in 0..n {
                    s[k] = abar * s[k] + coef * bi[k];
                    acc += s[k] * ci[k];
                }
                y[i * width + col] = acc;
            }
        }
        if !y[i * width..(i + 1) * width].iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric { op: "scan", step: i });
        }
        if keep_states {
            states.extend_from_slice(&state);
        }
    }
    Ok((Tensor::new(vec![m, width], y)?, states))
}

/// Forward scan without recording; `a_log[h]` gives `A_h = -exp(a_log[h])`.
pub fn scan(x: &Tensor, b: &Tensor, c: &Tensor, dt: &Tensor, a_log: &[f64], dims: ScanDims) -> Result<Tensor> {
    let a: Vec<f64> = a_log.iter().map(|v| -v.exp()).collect();
    run(x, b, c, dt, &a, dims, false).map(|(y, _)| y)
}

#[derive(Debug)]
struct ScanOp {
    dims: ScanDims,
    states: Vec<f64>,
}

impl CustomOp for ScanOp {
    fn name(&self) -> &'static str {
        "scan"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let [x, b, c, dt, a_log] = inputs else {
            unreachable!("scan has five inputs")
        };
        let ScanDims {
            heads,
            head_dim: p,
            state_dim: n,
        } = self.dims;
        let width = self.dims.width();
        let block = heads * p * n;
        let m = x.rows();
        let a: Vec<f64> = a_log.data().iter().map(|v| -v.exp()).collect();
        let (xd, bd, cd, dtd) = (x.data(), b.data(), c.data(), dt.data());

        let mut dx = vec![0.0; x.len()];
        let mut db = vec![0.0; b.len()];
        let mut dc = vec![0.0; c.len()];
        let mut ddt = vec![0.0; dt.len()];
        let mut da_log = vec![0.0; heads];
        // adjoint of the post-update state, carried backwards
        let mut carry = vec![0.0; block];
        let zeros = vec![0.0; block];

        for i in (0..m).rev() {
            let s_i = &self.states[i * block..(i + 1) * block];
            let s_prev = if i == 0 {
                &zeros[..]
            } else {
                &self.states[(i - 1) * block..i * block]
            };
            let bi = &bd[i * n..(i + 1) * n];
            let ci = &cd[i * n..(i + 1) * n];
            for h in 0..heads {
                let delta = dtd[i * heads + h];
                let abar = (delta * a[h]).exp();
                let mut d_abar = 0.0;
                for q in 0..p {
                    let col = h * p + q;
                    let row = (h * p + q) * n..(h * p + q + 1) * n;
                    let gy = g[i * width + col];
                    let xv = xd[i * width + col];
                    let gs = &mut carry[row.clone()];
                    let s = &s_i[row.clone()];
                    let sp = &s_prev[row];
                    let mut gb = 0.0;
                    for k in 0..n {
                        gs[k] += gy * ci[k];
                        dc[i * n + k] += gy * s[k];
                        gb += gs[k] * bi[k];
                        db[i * n + k] += delta * xv * gs[k];
                        d_abar += gs[k] * sp[k];
                    }
                    dx[i * width + col] = delta * gb;
                    ddt[i * heads + h] += xv * gb;
                    gs.iter_mut().for_each(|v| *v *= abar);
                }
                ddt[i * heads + h] += d_abar * a[h] * abar;
                da_log[h] += d_abar * delta * abar * a[h];
            }
        }
        vec![Some(dx), Some(db), Some(dc), Some(ddt), Some(da_log)]
    }
}

/// Recorded scan. `x: M×(H·P)`, `b, c: M×N`, `dt: M×H`, `a_log: H`.
pub fn scan_recorded(tape: &mut Tape, x: Var, b: Var, c: Var, dt: Var, a_log: Var, dims: ScanDims) -> Result<Var> {
    let a: Vec<f64> = tape.value(a_log).data().iter().map(|v| -v.exp()).collect();
    let (y, states) = run(
        tape.value(x),
        tape.value(b),
        tape.value(c),
        tape.value(dt),
        &a,
        dims,
        true,
    )?;
    Ok(tape.custom(&[x, b, c, dt, a_log], y, Box::new(ScanOp { dims, states })))
}
