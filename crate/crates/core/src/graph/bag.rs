use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Event {
    Observed,
    Censored,
}

/// Bag-level supervision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Class(usize),
    Survival { time_bin: usize, event: Event },
}

/// One bag of instances: features `M×D`, patch coordinates `M×2`.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceBag {
    pub bag_id: String,
    pub features: Tensor,
    pub coords: Tensor,
    pub target: Target,
    pub warnings: Vec<String>,
}

impl InstanceBag {
    pub fn new(bag_id: impl Into<String>, features: Tensor, coords: Tensor, target: Target) -> Result<Self> {
        let bag_id = bag_id.into();
        if features.shape().len() != 2 || coords.shape() != [features.rows(), 2] {
            return Err(Error::dim("InstanceBag", features.shape(), coords.shape()));
        }
        if !features.is_finite() || !coords.is_finite() {
            return Err(Error::Validation(format!("bag {bag_id} has non-finite entries")));
        }
        let mut seen = HashSet::new();
        let duplicates = (0..coords.rows())
            .filter(|&i| {
                let r = coords.row(i);
                !seen.insert((r[0].to_bits(), r[1].to_bits()))
            })
            .count();
        let mut warnings = Vec::new();
        if duplicates > 0 {
            warnings.push(format!("{duplicates} duplicate coordinate rows"));
        }
        Ok(InstanceBag {
            bag_id,
            features,
            coords,
            target,
            warnings,
        })
    }

    pub fn num_instances(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.shape()[1]
    }
}
