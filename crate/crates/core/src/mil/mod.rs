//! Bag-level pooling, task losses and evaluation metrics.

mod loss;
mod metrics;
mod pool;

pub use loss::{
    cross_entropy, cross_entropy_recorded, hazards, risk_score, survival_curve, survival_nll, survival_nll_recorded,
};
pub use metrics::{accuracy, auc, c_index, macro_auc, per_class_auc, predicted_class, MetricsReport};
pub use pool::{attention_pool, AttentionPool, Pooled};
