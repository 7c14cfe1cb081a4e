use serde::{Deserialize, Serialize};

use super::bag::InstanceBag;
use crate::error::{Error, Result};

/// Norms below this are treated as zero vectors.
const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoordMetric {
    #[default]
    Cosine,
    Euclidean,
}

/// `1 - cos(u, v)`; 1.0 when either vector has (near) zero norm.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::dim("cosine_distance", &[u.len()], &[v.len()]));
    }
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu < ZERO_NORM || nv < ZERO_NORM {
        return Ok(1.0);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((1.0 - dot / (nu * nv)).clamp(0.0, 2.0))
}

pub fn euclidean_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::dim("euclidean_distance", &[u.len()], &[v.len()]));
    }
    Ok(u.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
}

impl CoordMetric {
    pub fn distance(self, u: &[f64], v: &[f64]) -> Result<f64> {
        match self {
            CoordMetric::Cosine => cosine_distance(u, v),
            CoordMetric::Euclidean => euclidean_distance(u, v),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub weight: f64,
}

/// Undirected weighted instance graph. Edges satisfy `i < j`; adjacency
/// lists are sorted ascending and symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct WsiGraph {
    pub num_nodes: usize,
    pub edges: Vec<Edge>,
    pub adjacency: Vec<Vec<usize>>,
}

impl WsiGraph {
    /// Builds a graph from `(i, j, w)` triples, normalising orientation and
    /// dropping duplicates (first occurrence wins) and self-loops.
    pub fn from_edges(num_nodes: usize, edges: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self> {
        let mut adjacency = vec![Vec::new(); num_nodes];
        let mut kept = Vec::new();
        for (a, b, w) in edges {
            if a >= num_nodes || b >= num_nodes {
                return Err(Error::Validation(format!("edge ({a},{b}) outside {num_nodes} nodes")));
            }
            if a == b {
                continue;
            }
            let (i, j) = (a.min(b), a.max(b));
            if adjacency[i].contains(&j) {
                continue;
            }
            adjacency[i].push(j);
            adjacency[j].push(i);
            kept.push(Edge { i, j, weight: w });
        }
        adjacency.iter_mut().for_each(|l| l.sort_unstable());
        kept.sort_by_key(|x| (x.i, x.j));
        Ok(WsiGraph {
            num_nodes,
            edges: kept,
            adjacency,
        })
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }
}

/// k nearest neighbours over coordinates (ties to the lower index),
/// symmetrised by union, weighted by feature cosine distance.
pub fn build_knn_graph(bag: &InstanceBag, k: usize, metric: CoordMetric) -> Result<WsiGraph> {
    if k == 0 {
        return Err(Error::Config("kNN k must be at least 1".into()));
    }
    let m = bag.num_instances();
    let take = k.min(m.saturating_sub(1));
    let mut pairs = Vec::with_capacity(m * take);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(m);
    for i in 0..m {
        cand.clear();
        for j in (0..m).filter(|&j| j != i) {
            cand.push((metric.distance(bag.coords.row(i), bag.coords.row(j))?, j));
        }
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        pairs.extend(cand.iter().take(take).map(|&(_, j)| (i.min(j), i.max(j))));
    }
    pairs.sort_unstable();
    pairs.dedup();
    let edges = pairs
        .into_iter()
        .map(|(i, j)| Ok((i, j, cosine_distance(bag.features.row(i), bag.features.row(j))?)))
        .collect::<Result<Vec<_>>>()?;
    WsiGraph::from_edges(m, edges)
}
