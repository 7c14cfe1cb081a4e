//! Instance graphs, minimum spanning forests and their serialisations.

mod bag;
mod knn;
mod mst;
mod traverse;

pub use bag::{Event, InstanceBag, Target};
pub use knn::{build_knn_graph, cosine_distance, euclidean_distance, CoordMetric, Edge, WsiGraph};
pub use mst::{kruskal_msf, SpanningForest, UnionFind};
pub use traverse::{invert_permutation, rooted_order, sample_roots, traverse, Traversal, TraversalOrders};

/// Neighbour count used when building instance graphs.
pub const DEFAULT_K: usize = 8;
