//! Gradient-check suites and scan timing, shared by the CLI and tests.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{gia_forward, ta_mamba_forward, BlockDims, GiaBlock, ScanningStrategy, TaMambaBlock};
use crate::error::{Error, Result};
use crate::graph::{Event, InstanceBag, Target, WsiGraph};
use crate::mil::{attention_pool, cross_entropy_recorded, survival_nll_recorded, AttentionPool};
use crate::model::{build_model, scan_orders, BagTopology, ModelConfig, Task};
use crate::numerics::{check_gradients, Tape, Tensor, Unary, Var, DEFAULT_STEP, LAYER_NORM_EPS};
use crate::params::{Bound, ParamStore};
use crate::ssm::{bi_ssm, scan, scan_recorded, ScanDims, SsmHeadParams};

pub const PRIMITIVE_TOLERANCE: f64 = 1e-5;
pub const COMPOSITE_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Primitives,
    Blocks,
    Model,
}

impl std::str::FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "primitives" => Ok(Scope::Primitives),
            "blocks" => Ok(Scope::Blocks),
            "model" => Ok(Scope::Model),
            other => Err(Error::Config(format!("unknown gradcheck scope {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

type Objective<'a> = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a>;

/// Reduces `y` to a scalar with fixed pseudo-random weights so every
/// output entry contributes a distinct gradient.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::randn(tape.shape(y), &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn entry(name: &str, f: Objective<'_>, inputs: &[Tensor], tolerance: f64) -> Result<GradCheckEntry> {
    let report = check_gradients(f, inputs, DEFAULT_STEP)?;
    Ok(GradCheckEntry {
        name: name.to_string(),
        max_rel_error: report.max_rel_error,
        tolerance,
    })
}

fn primitives(seed: u64) -> Result<Vec<GradCheckEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize]| Tensor::randn(shape, &mut rng);
    let (a, b, w, bias, v) = (r(&[4, 3]), r(&[4, 3]), r(&[3, 5]), r(&[5]), r(&[3]));
    let tol = PRIMITIVE_TOLERANCE;
    let mut out = vec![
        entry(
            "linear",
            Box::new(|t, x| {
                let y = t.linear(x[0], x[1], Some(x[2]))?;
                weighted_sum(t, y, 1)
            }),
            &[a.clone(), w.clone(), bias.clone()],
            tol,
        )?,
        entry(
            "matmul",
            Box::new(|t, x| {
                let y = t.matmul(x[0], x[1])?;
                weighted_sum(t, y, 2)
            }),
            &[a.clone(), w.clone()],
            tol,
        )?,
        entry(
            "transpose",
            Box::new(|t, x| {
                let y = t.transpose(x[0])?;
                weighted_sum(t, y, 3)
            }),
            std::slice::from_ref(&a),
            tol,
        )?,
        entry(
            "reshape",
            Box::new(|t, x| {
                let y = t.reshape(x[0], &[2, 6])?;
                weighted_sum(t, y, 4)
            }),
            std::slice::from_ref(&a),
            tol,
        )?,
        entry(
            "add",
            Box::new(|t, x| {
                let y = t.add(x[0], x[1])?;
                weighted_sum(t, y, 5)
            }),
            &[a.clone(), b.clone()],
            tol,
        )?,
        entry(
            "mul",
            Box::new(|t, x| {
                let y = t.mul(x[0], x[1])?;
                weighted_sum(t, y, 6)
            }),
            &[a.clone(), b.clone()],
            tol,
        )?,
        entry(
            "scale",
            Box::new(|t, x| {
                let y = t.scale(x[0], -1.7);
                weighted_sum(t, y, 7)
            }),
            std::slice::from_ref(&a),
            tol,
        )?,
        entry(
            "mean",
            Box::new(|t, x| {
                let y = t.mean(&[x[0], x[1], x[0]])?;
                weighted_sum(t, y, 8)
            }),
            &[a.clone(), b.clone()],
            tol,
        )?,
        entry("sum", Box::new(|t, x| Ok(t.sum(x[0]))), std::slice::from_ref(&a), tol)?,
    ];
    for axis in 0..2 {
        out.push(entry(
            &format!("softmax(axis={axis})"),
            Box::new(move |t, x| {
                let y = t.softmax(x[0], axis)?;
                weighted_sum(t, y, 9)
            }),
            std::slice::from_ref(&a),
            tol,
        )?);
    }
    out.push(entry(
        "layer_norm",
        Box::new(|t, x| {
            let y = t.layer_norm(x[0], x[1], x[2], LAYER_NORM_EPS)?;
            weighted_sum(t, y, 10)
        }),
        &[a.clone(), v.clone(), v.map(|z| 0.5 * z)],
        tol,
    )?);
    out.push(entry(
        "permute_rows",
        Box::new(|t, x| {
            let y = t.permute_rows(x[0], &[2, 0, 3, 1])?;
            weighted_sum(t, y, 11)
        }),
        std::slice::from_ref(&a),
        tol,
    )?);
    out.push(entry(
        "reverse_rows",
        Box::new(|t, x| {
            let y = t.reverse_rows(x[0])?;
            weighted_sum(t, y, 12)
        }),
        std::slice::from_ref(&a),
        tol,
    )?);
    // keep ReLU probes away from its kink
    let off_kink = a.map(|z| if z.abs() < 0.1 { z + 0.3 } else { z });
    for op in [
        Unary::Relu,
        Unary::Silu,
        Unary::Tanh,
        Unary::Softplus,
        Unary::Exp,
        Unary::Sigmoid,
    ] {
        out.push(entry(
            &format!("{op:?}").to_lowercase(),
            Box::new(move |t, x| {
                let y = t.unary(op, x[0]);
                weighted_sum(t, y, 13)
            }),
            std::slice::from_ref(&off_kink),
            tol,
        )?);
    }
    Ok(out)
}

fn with_params<'a>(f: impl Fn(&mut Tape, &Bound, Var) -> Result<Var> + 'a) -> Objective<'a> {
    Box::new(move |t, v| {
        let p = Bound::from_vars(v[1..].to_vec());
        f(t, &p, v[0])
    })
}

fn inputs_with(x: &Tensor, store: &ParamStore) -> Vec<Tensor> {
    std::iter::once(x.clone())
        .chain(store.values().iter().cloned())
        .collect()
}

fn ring_graph(m: usize) -> WsiGraph {
    WsiGraph::from_edges(m, (1..m).map(|i| (i - 1, i, 0.1 * i as f64)).chain([(0, m - 1, 0.7)])).expect("valid ring")
}

fn blocks(seed: u64) -> Result<Vec<GradCheckEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tol = COMPOSITE_TOLERANCE;
    let mut out = Vec::new();

    let dims = ScanDims {
        heads: 2,
        head_dim: 2,
        state_dim: 3,
    };
    let m = 6;
    let x = Tensor::randn(&[m, dims.width()], &mut rng);
    let bc = Tensor::randn(&[m, 3], &mut rng);
    let cc = Tensor::randn(&[m, 3], &mut rng);
    let dt = Tensor::uniform(&[m, 2], 0.05, 0.8, &mut rng);
    let a_log = Tensor::uniform(&[2], -0.5, 0.7, &mut rng);
    out.push(entry(
        "selective_scan",
        Box::new(|t, v| {
            let y = scan_recorded(t, v[0], v[1], v[2], v[3], v[4], dims)?;
            weighted_sum(t, y, 20)
        }),
        &[x.clone(), bc, cc, dt, a_log],
        tol,
    )?);

    let mut store = ParamStore::new();
    let fwd = SsmHeadParams::init(&mut store, "f", dims, &mut rng);
    let bwd = SsmHeadParams::init(&mut store, "b", dims, &mut rng);
    randomise_zero_params(&mut store, &mut rng);
    out.push(entry(
        "bi_ssm",
        with_params(|t, p, x| {
            let y = bi_ssm(t, p, &fwd, &bwd, x)?;
            weighted_sum(t, y, 21)
        }),
        &inputs_with(&x, &store),
        tol,
    )?);

    let bdims = BlockDims {
        model_dim: 4,
        inner_dim: 8,
        heads: 2,
        state_dim: 2,
    };
    let h = Tensor::randn(&[m, 4], &mut rng);
    for strategy in [ScanningStrategy::TopologyAware, ScanningStrategy::Unidirectional] {
        let mut store = ParamStore::new();
        let block = TaMambaBlock::init(&mut store, "blk", bdims, strategy, false, &mut rng)?;
        randomise_zero_params(&mut store, &mut rng);
        let orders: Vec<Vec<usize>> = match strategy {
            ScanningStrategy::TopologyAware => vec![
                (0..m).collect(),
                vec![3, 1, 0, 2, 5, 4],
                vec![5, 4, 2, 0, 1, 3],
                vec![1, 3, 0, 5, 2, 4],
            ],
            _ => vec![(0..m).collect()],
        };
        out.push(entry(
            &format!("ta_mamba({strategy:?})"),
            with_params(move |t, p, x| {
                let y = ta_mamba_forward(t, p, &block, x, &orders)?;
                weighted_sum(t, y, 22)
            }),
            &inputs_with(&h, &store),
            tol,
        )?);
    }

    let mut store = ParamStore::new();
    let gia = GiaBlock::init(&mut store, "gia", 4, &mut rng);
    let graph = ring_graph(m);
    out.push(entry(
        "gia",
        with_params(move |t, p, x| {
            let y = gia_forward(t, p, &gia, x, &graph)?;
            weighted_sum(t, y, 23)
        }),
        &inputs_with(&h, &store),
        tol,
    )?);

    for gated in [false, true] {
        let mut store = ParamStore::new();
        let pool = AttentionPool::init(&mut store, "pool", 4, 5, gated, &mut rng);
        out.push(entry(
            if gated {
                "attention_pool(gated)"
            } else {
                "attention_pool"
            },
            with_params(move |t, p, x| {
                let z = attention_pool(t, p, &pool, x)?.z;
                weighted_sum(t, z, 24)
            }),
            &inputs_with(&h, &store),
            tol,
        )?);
    }

    let logits = Tensor::randn(&[1, 4], &mut rng);
    out.push(entry(
        "cross_entropy",
        Box::new(|t, v| cross_entropy_recorded(t, v[0], 2)),
        std::slice::from_ref(&logits),
        tol,
    )?);
    for event in [Event::Observed, Event::Censored] {
        out.push(entry(
            &format!("survival_nll({event:?})"),
            Box::new(move |t, v| survival_nll_recorded(t, v[0], 2, event)),
            std::slice::from_ref(&logits),
            tol,
        )?);
    }
    Ok(out)
}

/// Zero-initialised tensors (e.g. `W_Δ`) would hide their own gradient
/// paths, so give them small random values.
fn randomise_zero_params(store: &mut ParamStore, rng: &mut impl Rng) {
    for t in store.values_mut() {
        if t.data().iter().all(|&v| v == 0.0) {
            *t = Tensor::uniform(t.shape(), -0.3, 0.3, rng);
        }
    }
}

/// A small bag used by the full-model check.
pub fn probe_bag(m: usize, input_dim: usize, target: Target, seed: u64) -> Result<InstanceBag> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = Tensor::randn(&[m, input_dim], &mut rng);
    let coords = Tensor::uniform(&[m, 2], 1.0, 6.0, &mut rng);
    InstanceBag::new("probe", features, coords, target)
}

fn model(seed: u64) -> Result<Vec<GradCheckEntry>> {
    let mut out = Vec::new();
    let cases = [
        (Task::Classification { classes: 2 }, Target::Class(1)),
        (
            Task::Survival { bins: 4 },
            Target::Survival {
                time_bin: 2,
                event: Event::Observed,
            },
        ),
    ];
    for (task, target) in cases {
        let config = ModelConfig {
            input_dim: 3,
            model_dim: 4,
            heads: 2,
            head_dim: 2,
            state_dim: 2,
            k: 2,
            attention_dim: 3,
            task,
            seed,
            ..Default::default()
        };
        let mut model = build_model(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        randomise_zero_params(&mut model.params, &mut rng);
        let bag = probe_bag(6, 3, target, seed)?;
        let topo = BagTopology::build(&bag, &config)?;
        let orders = scan_orders(config.scanning_strategy, &topo.forest, &mut rng);
        let inputs = inputs_with(&bag.features, &model.params);
        let model = &model;
        out.push(entry(
            &format!("full_model({task:?})"),
            Box::new(|t, v| {
                let p = Bound::from_vars(v[1..].to_vec());
                let logits = model.record(t, &p, v[0], &topo, &orders)?;
                model.loss_recorded(t, logits, bag.target)
            }),
            &inputs,
            COMPOSITE_TOLERANCE,
        )?);
    }
    Ok(out)
}

pub fn gradient_suite(scope: Scope, seed: u64) -> Result<Vec<GradCheckEntry>> {
    match scope {
        Scope::Primitives => primitives(seed),
        Scope::Blocks => blocks(seed),
        Scope::Model => model(seed),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanTiming {
    pub length: usize,
    pub seconds: Vec<f64>,
}

impl ScanTiming {
    pub fn median(&self) -> f64 {
        let mut s = self.seconds.clone();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        if n % 2 == 1 {
            s[n / 2]
        } else {
            0.5 * (s[n / 2 - 1] + s[n / 2])
        }
    }
}

/// Wall time of the untaped scan at each length, `reps` runs each after one warm-up.
pub fn bench_scan(lengths: &[usize], dims: ScanDims, reps: usize, seed: u64) -> Result<Vec<ScanTiming>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a_log = Tensor::uniform(&[dims.heads], 0.0, 0.7, &mut rng);
    lengths
        .iter()
        .map(|&m| {
            if m == 0 {
                return Err(Error::Config("scan length must be positive".into()));
            }
            let x = Tensor::randn(&[m, dims.width()], &mut rng);
            let b = Tensor::randn(&[m, dims.state_dim], &mut rng);
            let c = Tensor::randn(&[m, dims.state_dim], &mut rng);
            let dt = Tensor::uniform(&[m, dims.heads], 0.001, 0.1, &mut rng);
            scan(&x, &b, &c, &dt, a_log.data(), dims)?;
            let seconds = (0..reps)
                .map(|_| {
                    let start = Instant::now();
                    let y = scan(&x, &b, &c, &dt, a_log.data(), dims)?;
                    let elapsed = start.elapsed().as_secs_f64();
                    std::hint::black_box(y);
                    Ok(elapsed)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ScanTiming { length: m, seconds })
        })
        .collect()
}
