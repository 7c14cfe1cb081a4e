//! Full bag classifier / survival model:
//! `linear+ReLU → TA-Mamba → GIA → TA-Mamba → attention pool → head`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blocks::{gia_forward, ta_mamba_forward, Affine, BlockDims, GiaBlock, ScanningStrategy, TaMambaBlock};
use crate::error::{Error, Result};
use crate::graph::{
    build_knn_graph, kruskal_msf, CoordMetric, InstanceBag, SpanningForest, Target, TraversalOrders, WsiGraph,
    DEFAULT_K,
};
use crate::mil::{
    attention_pool, cross_entropy, cross_entropy_recorded, hazards, risk_score, survival_nll, survival_nll_recorded,
    AttentionPool,
};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{Bound, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Task {
    Classification { classes: usize },
    Survival { bins: usize },
}

impl Default for Task {
    fn default() -> Self {
        Task::Classification { classes: 2 }
    }
}

impl Task {
    pub fn outputs(self) -> usize {
        match self {
            Task::Classification { classes } => classes,
            Task::Survival { bins } => bins,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Gia,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub state_dim: usize,
    pub k: usize,
    pub coord_metric: CoordMetric,
    pub scanning_strategy: ScanningStrategy,
    pub aggregation: Aggregation,
    pub residual: bool,
    pub attention_dim: usize,
    pub gated_attention: bool,
    pub task: Task,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 32,
            model_dim: 128,
            heads: 4,
            head_dim: 32,
            state_dim: 32,
            k: DEFAULT_K,
            coord_metric: CoordMetric::default(),
            scanning_strategy: ScanningStrategy::default(),
            aggregation: Aggregation::default(),
            residual: false,
            attention_dim: 128,
            gated_attention: false,
            task: Task::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |why: String| Err(Error::Config(why));
        if self.model_dim != self.heads * self.head_dim {
            return bad(format!(
                "model_dim {} must equal heads {} × head_dim {}",
                self.model_dim, self.heads, self.head_dim
            ));
        }
        if [self.input_dim, self.model_dim, self.state_dim, self.attention_dim].contains(&0) {
            return bad("dimensions must be positive".into());
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        match self.task {
            Task::Classification { classes } if classes < 2 => bad(format!("{classes} classes")),
            Task::Survival { bins: 0 } => bad("survival needs at least one time bin".into()),
            _ => Ok(()),
        }
    }

    /// The scan runs at twice the model width, with heads widened to match.
    pub fn block_dims(&self) -> BlockDims {
        BlockDims {
            model_dim: self.model_dim,
            inner_dim: 2 * self.model_dim,
            heads: self.heads,
            state_dim: self.state_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub embed: Affine,
    pub first: TaMambaBlock,
    pub gia: Option<GiaBlock>,
    pub second: TaMambaBlock,
    pub pool: AttentionPool,
    pub head: Affine,
}

/// Initialises a model from `config.seed`.
pub fn build_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ParamStore::new();
    let (d, dims, strategy) = (config.model_dim, config.block_dims(), config.scanning_strategy);
    let embed = Affine::init(&mut params, "embed", config.input_dim, d, &mut rng);
    let first = TaMambaBlock::init(&mut params, "mamba1", dims, strategy, config.residual, &mut rng)?;
    let gia = (config.aggregation == Aggregation::Gia).then(|| GiaBlock::init(&mut params, "gia", d, &mut rng));
    let second = TaMambaBlock::init(&mut params, "mamba2", dims, strategy, config.residual, &mut rng)?;
    let pool = AttentionPool::init(
        &mut params,
        "pool",
        d,
        config.attention_dim,
        config.gated_attention,
        &mut rng,
    );
    let head = Affine::init(&mut params, "head", d, config.task.outputs(), &mut rng);
    Ok(Model {
        config: config.clone(),
        params,
        embed,
        first,
        gia,
        second,
        pool,
        head,
    })
}

/// Graph and spanning forest of one bag; independent of any rng.
#[derive(Debug, Clone)]
pub struct BagTopology {
    pub graph: WsiGraph,
    pub forest: SpanningForest,
}

impl BagTopology {
    pub fn build(bag: &InstanceBag, config: &ModelConfig) -> Result<Self> {
        let graph = build_knn_graph(bag, config.k, config.coord_metric)?;
        let forest = kruskal_msf(&graph);
        Ok(BagTopology { graph, forest })
    }
}

/// Row orders fed to the scan branches, drawn once per forward pass and
/// shared by both blocks.
pub fn scan_orders(strategy: ScanningStrategy, forest: &SpanningForest, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let m = forest.num_nodes;
    match strategy {
        ScanningStrategy::TopologyAware => TraversalOrders::sample(forest, rng).orders.to_vec(),
        ScanningStrategy::Unidirectional | ScanningStrategy::Bidirectional => vec![(0..m).collect()],
        ScanningStrategy::ShuffleRescan => (0..strategy.branches())
            .map(|_| {
                let mut order: Vec<usize> = (0..m).collect();
                order.shuffle(rng);
                order
            })
            .collect(),
    }
}

/// Deterministic per-bag evaluation seed (first 8 bytes of SHA-256 of the id).
pub fn eval_seed(bag_id: &str) -> u64 {
    let digest = Sha256::digest(bag_id.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

impl Model {
    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Records the forward pass; returns the `1×outputs` logits.
    pub fn record(&self, tape: &mut Tape, p: &Bound, x: Var, topo: &BagTopology, orders: &[Vec<usize>]) -> Result<Var> {
        let width = tape.shape(x).get(1).copied().unwrap_or(0);
        if width != self.config.input_dim {
            return Err(Error::dim("forward_bag", &[self.config.input_dim], &[width]));
        }
        let h = self.embed.apply(tape, p, x)?;
        let h = tape.relu(h);
        let h = ta_mamba_forward(tape, p, &self.first, h, orders)?;
        let h = match &self.gia {
            Some(gia) => gia_forward(tape, p, gia, h, &topo.graph)?,
            None => h,
        };
        let h = ta_mamba_forward(tape, p, &self.second, h, orders)?;
        let pooled = attention_pool(tape, p, &self.pool, h)?;
        self.head.apply(tape, p, pooled.z)
    }

    /// Appends the task loss for `target` to a recorded forward pass.
    pub fn loss_recorded(&self, tape: &mut Tape, logits: Var, target: Target) -> Result<Var> {
        match (self.config.task, target) {
            (Task::Classification { .. }, Target::Class(label)) => cross_entropy_recorded(tape, logits, label),
            (Task::Survival { .. }, Target::Survival { time_bin, event }) => {
                survival_nll_recorded(tape, logits, time_bin, event)
            }
            _ => Err(target_mismatch(self.config.task, target)),
        }
    }
}

fn target_mismatch(task: Task, target: Target) -> Error {
    Error::Validation(format!("target {target:?} does not fit task {task:?}"))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Class { probs: Vec<f64> },
    Survival { hazards: Vec<f64>, risk: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BagOutput {
    pub logits: Vec<f64>,
    pub prediction: Prediction,
}

impl BagOutput {
    fn from_logits(task: Task, logits: Vec<f64>) -> Self {
        let prediction = match task {
            Task::Classification { .. } => {
                let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                Prediction::Class {
                    probs: e.iter().map(|v| v / z).collect(),
                }
            }
            Task::Survival { .. } => Prediction::Survival {
                hazards: hazards(&logits),
                risk: risk_score(&logits),
            },
        };
        BagOutput { logits, prediction }
    }

    pub fn loss(&self, target: Target) -> Result<f64> {
        match (&self.prediction, target) {
            (Prediction::Class { .. }, Target::Class(label)) => cross_entropy(&self.logits, label),
            (Prediction::Survival { .. }, Target::Survival { time_bin, event }) => {
                survival_nll(&self.logits, time_bin, event)
            }
            _ => Err(Error::Validation(format!(
                "target {target:?} does not fit the prediction"
            ))),
        }
    }
}

/// Inference on one bag with a precomputed topology.
pub fn forward_prepared(model: &Model, bag: &InstanceBag, topo: &BagTopology, rng: &mut impl Rng) -> Result<BagOutput> {
    let orders = scan_orders(model.config.scanning_strategy, &topo.forest, rng);
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, false);
    let x = tape.constant(bag.features.clone());
    let logits = model.record(&mut tape, &p, x, topo, &orders)?;
    let logits = tape.value(logits).data().to_vec();
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            op: "forward_bag",
            step: 0,
        });
    }
    Ok(BagOutput::from_logits(model.config.task, logits))
}

/// Builds the bag's graph and forest, samples traversal roots from `rng`
/// and runs the model.
pub fn forward_bag(model: &Model, bag: &InstanceBag, rng: &mut impl Rng) -> Result<BagOutput> {
    if bag.feature_dim() != model.config.input_dim {
        return Err(Error::dim(
            "forward_bag",
            &[model.config.input_dim],
            &[bag.feature_dim()],
        ));
    }
    let topo = BagTopology::build(bag, &model.config)?;
    forward_prepared(model, bag, &topo, rng)
}

/// Loss and parameter gradients for one bag.
pub fn loss_and_gradients(
    model: &Model,
    bag: &InstanceBag,
    topo: &BagTopology,
    rng: &mut impl Rng,
) -> Result<(f64, Vec<Tensor>)> {
    let orders = scan_orders(model.config.scanning_strategy, &topo.forest, rng);
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, true);
    let x = tape.constant(bag.features.clone());
    let logits = model.record(&mut tape, &p, x, topo, &orders)?;
    let loss = model.loss_recorded(&mut tape, logits, bag.target)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::Numeric { op: "loss", step: 0 });
    }
    tape.backward(loss)?;
    let grads = p
        .vars()
        .iter()
        .map(|&v| tape.grad(v).expect("parameters require gradients"))
        .collect();
    Ok((value, grads))
}
