use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mst::SpanningForest;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Traversal {
    Index,
    Pre,
    Post,
    Level,
}

impl Traversal {
    pub const ALL: [Traversal; 4] = [Traversal::Index, Traversal::Pre, Traversal::Post, Traversal::Level];
}

/// Draws one root per tree, uniformly over that tree's nodes.
pub fn sample_roots(forest: &SpanningForest, rng: &mut impl Rng) -> Vec<usize> {
    forest
        .components
        .iter()
        .map(|c| c[rng.random_range(0..c.len())])
        .collect()
}

/// Visit order of the forest as currently rooted. Children are visited in
/// ascending index order; trees follow `forest.components` order.
pub fn rooted_order(forest: &SpanningForest, traversal: Traversal) -> Vec<usize> {
    let n = forest.num_nodes;
    if traversal == Traversal::Index {
        return (0..n).collect();
    }
    let mut out = Vec::with_capacity(n);
    for &root in &forest.roots {
        match traversal {
            Traversal::Index => unreachable!(),
            Traversal::Pre => {
                let mut stack = vec![root];
                while let Some(u) = stack.pop() {
                    out.push(u);
                    stack.extend(forest.children[u].iter().rev());
                }
            }
            Traversal::Post => {
                // (node, children expanded?)
                let mut stack = vec![(root, false)];
                while let Some((u, expanded)) = stack.pop() {
                    if expanded {
                        out.push(u);
                    } else {
                        stack.push((u, true));
                        stack.extend(forest.children[u].iter().rev().map(|&c| (c, false)));
                    }
                }
            }
            Traversal::Level => {
                let mut queue = VecDeque::from([root]);
                while let Some(u) = queue.pop_front() {
                    out.push(u);
                    queue.extend(forest.children[u].iter().copied());
                }
            }
        }
    }
    out
}

/// Re-roots at random roots and returns the order for `traversal`.
/// `Index` returns the identity and leaves `rng` untouched.
pub fn traverse(forest: &SpanningForest, traversal: Traversal, rng: &mut impl Rng) -> Vec<usize> {
    if traversal == Traversal::Index {
        return (0..forest.num_nodes).collect();
    }
    let roots = sample_roots(forest, rng);
    let mut rooted = forest.clone();
    rooted.set_roots(&roots).expect("sampled roots lie in their trees");
    rooted_order(&rooted, traversal)
}

/// The four serialisations of one forest, all sharing one draw of roots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraversalOrders {
    pub orders: [Vec<usize>; 4],
}

impl TraversalOrders {
    pub fn sample(forest: &SpanningForest, rng: &mut impl Rng) -> Self {
        let roots = sample_roots(forest, rng);
        let mut rooted = forest.clone();
        rooted.set_roots(&roots).expect("sampled roots lie in their trees");
        TraversalOrders {
            orders: Traversal::ALL.map(|s| rooted_order(&rooted, s)),
        }
    }

    /// Every order set to the identity.
    pub fn identity(m: usize) -> Self {
        let id: Vec<usize> = (0..m).collect();
        TraversalOrders {
            orders: [id.clone(), id.clone(), id.clone(), id],
        }
    }

    pub fn get(&self, traversal: Traversal) -> &[usize] {
        let i = Traversal::ALL
            .iter()
            .position(|&s| s == traversal)
            .expect("known traversal");
        &self.orders[i]
    }

    pub fn len(&self) -> usize {
        self.orders[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.orders[0].is_empty()
    }
}

/// Returns `q` with `q[p[t]] = t`.
pub fn invert_permutation(p: &[usize]) -> Result<Vec<usize>> {
    let mut q = vec![usize::MAX; p.len()];
    for (t, &v) in p.iter().enumerate() {
        if v >= p.len() || q[v] != usize::MAX {
            return Err(Error::Validation(format!("not a permutation: {p:?}")));
        }
        q[v] = t;
    }
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::knn::WsiGraph;
    use crate::graph::mst::kruskal_msf;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn rooted(n: usize, edges: &[(usize, usize)], roots: &[usize]) -> SpanningForest {
        let g = WsiGraph::from_edges(n, edges.iter().map(|&(a, b)| (a, b, 1.0))).unwrap();
        let mut f = kruskal_msf(&g);
        f.set_roots(roots).unwrap();
        f
    }

    #[test]
    fn star_tree_orders() {
        let f = rooted(4, &[(1, 0), (1, 2), (1, 3)], &[1]);
        assert_eq!(rooted_order(&f, Traversal::Pre), vec![1, 0, 2, 3]);
        assert_eq!(rooted_order(&f, Traversal::Post), vec![0, 2, 3, 1]);
        assert_eq!(rooted_order(&f, Traversal::Level), vec![1, 0, 2, 3]);
        assert_eq!(rooted_order(&f, Traversal::Index), vec![0, 1, 2, 3]);
        let mut pre = rooted_order(&f, Traversal::Pre);
        pre.reverse();
        assert_ne!(pre, rooted_order(&f, Traversal::Post));
    }

    #[test]
    fn chain_orders() {
        let f = rooted(3, &[(0, 1), (1, 2)], &[0]);
        assert_eq!(rooted_order(&f, Traversal::Pre), vec![0, 1, 2]);
        assert_eq!(rooted_order(&f, Traversal::Level), vec![0, 1, 2]);
        assert_eq!(rooted_order(&f, Traversal::Post), vec![2, 1, 0]);
    }

    #[test]
    fn deeper_tree_distinguishes_pre_and_level() {
        //      0
        //    /   \
        //   1     2
        //  / \     \
        // 3   4     5
        let f = rooted(6, &[(0, 1), (0, 2), (1, 3), (1, 4), (2, 5)], &[0]);
        assert_eq!(rooted_order(&f, Traversal::Pre), vec![0, 1, 3, 4, 2, 5]);
        assert_eq!(rooted_order(&f, Traversal::Post), vec![3, 4, 1, 5, 2, 0]);
        assert_eq!(rooted_order(&f, Traversal::Level), vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn forest_trees_concatenate_by_smallest_index() {
        let f = rooted(5, &[(3, 1), (0, 4), (4, 2)], &[4, 3]);
        assert_eq!(f.components, vec![vec![0, 2, 4], vec![1, 3]]);
        assert_eq!(rooted_order(&f, Traversal::Pre), vec![4, 0, 2, 3, 1]);
    }

    #[test]
    fn index_strategy_does_not_consume_rng() {
        let f = rooted(4, &[(1, 0), (1, 2), (1, 3)], &[1]);
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let b = a.clone();
        assert_eq!(traverse(&f, Traversal::Index, &mut a), vec![0, 1, 2, 3]);
        assert_eq!(a, b);
    }

    #[test]
    fn same_seed_same_orders() {
        let f = rooted(6, &[(0, 1), (0, 2), (1, 3), (1, 4), (2, 5)], &[0]);
        let o1 = TraversalOrders::sample(&f, &mut ChaCha8Rng::seed_from_u64(5));
        let o2 = TraversalOrders::sample(&f, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(o1, o2);
    }

    #[test]
    fn invert_permutation_examples() {
        assert_eq!(invert_permutation(&[0, 1, 2]).unwrap(), vec![0, 1, 2]);
        assert_eq!(invert_permutation(&[2, 0, 1]).unwrap(), vec![1, 2, 0]);
        assert!(invert_permutation(&[0, 0, 1]).is_err());
        assert!(invert_permutation(&[0, 3]).is_err());
    }

    proptest! {
        #[test]
        fn permute_then_invert_restores(p in Just((0..12usize).collect::<Vec<_>>()).prop_shuffle(), v in prop::collection::vec(-1e3f64..1e3, 12)) {
            let q = invert_permutation(&p).unwrap();
            let permuted: Vec<f64> = p.iter().map(|&i| v[i]).collect();
            let restored: Vec<f64> = q.iter().map(|&i| permuted[i]).collect();
            prop_assert_eq!(restored, v);
        }
    }
}
