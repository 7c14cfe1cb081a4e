use std::collections::VecDeque;

use super::knn::{Edge, WsiGraph};
use crate::error::{Error, Result};

/// Disjoint-set forest with path compression and union by rank.
#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    pub fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        let mut cur = x;
        while self.parent[cur] != root {
            let next = self.parent[cur];
            self.parent[cur] = root;
            cur = next;
        }
        root
    }

    /// Merges the sets of `a` and `b`; false if they were already joined.
    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
        true
    }
}

/// Minimum spanning forest with a rooted view of each tree.
///
/// `components` are ordered by their smallest node index and each lists
/// its nodes ascending. `children` lists are ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanningForest {
    pub num_nodes: usize,
    pub edges: Vec<Edge>,
    pub tree_adjacency: Vec<Vec<usize>>,
    pub components: Vec<Vec<usize>>,
    pub roots: Vec<usize>,
    pub parent: Vec<Option<usize>>,
    pub children: Vec<Vec<usize>>,
}

impl SpanningForest {
    fn from_tree_edges(num_nodes: usize, edges: Vec<Edge>) -> Self {
        let mut tree_adjacency = vec![Vec::new(); num_nodes];
        for e in &edges {
            tree_adjacency[e.i].push(e.j);
            tree_adjacency[e.j].push(e.i);
        }
        tree_adjacency.iter_mut().for_each(|l| l.sort_unstable());

        let mut seen = vec![false; num_nodes];
        let mut components = Vec::new();
        for start in 0..num_nodes {
            if seen[start] {
                continue;
            }
            seen[start] = true;
            let mut comp = vec![start];
            let mut queue = VecDeque::from([start]);
            while let Some(u) = queue.pop_front() {
                for &v in &tree_adjacency[u] {
                    if !seen[v] {
                        seen[v] = true;
                        comp.push(v);
                        queue.push_back(v);
                    }
                }
            }
            comp.sort_unstable();
            components.push(comp);
        }
        let roots: Vec<usize> = components.iter().map(|c| c[0]).collect();
        let mut forest = SpanningForest {
            num_nodes,
            edges,
            tree_adjacency,
            components,
            roots: Vec::new(),
            parent: Vec::new(),
            children: Vec::new(),
        };
        forest.set_roots(&roots).expect("smallest nodes are valid roots");
        forest
    }

    /// Re-roots every tree; `roots[c]` must belong to `components[c]`.
    pub fn set_roots(&mut self, roots: &[usize]) -> Result<()> {
        if roots.len() != self.components.len() {
            return Err(Error::dim("set_roots", &[self.components.len()], &[roots.len()]));
        }
        for (comp, &r) in self.components.iter().zip(roots) {
            if comp.binary_search(&r).is_err() {
                return Err(Error::Validation(format!("root {r} is not in its tree")));
            }
        }
        let n = self.num_nodes;
        let mut parent = vec![None; n];
        let mut children = vec![Vec::new(); n];
        let mut visited = vec![false; n];
        for &r in roots {
            visited[r] = true;
            let mut stack = vec![r];
            while let Some(u) = stack.pop() {
                for &v in &self.tree_adjacency[u] {
                    if !visited[v] {
                        visited[v] = true;
                        parent[v] = Some(u);
                        children[u].push(v);
                        stack.push(v);
                    }
                }
            }
        }
        self.roots = roots.to_vec();
        self.parent = parent;
        // adjacency is sorted, so children come out ascending
        self.children = children;
        Ok(())
    }

    pub fn total_weight(&self) -> f64 {
        self.edges.iter().map(|e| e.weight).sum()
    }

    pub fn num_trees(&self) -> usize {
        self.components.len()
    }
}

/// Kruskal over edges sorted by `(weight, min index, max index)`.
pub fn kruskal_msf(graph: &WsiGraph) -> SpanningForest {
    let mut order: Vec<&Edge> = graph.edges.iter().collect();
    order.sort_by(|a, b| a.weight.total_cmp(&b.weight).then(a.i.cmp(&b.i)).then(a.j.cmp(&b.j)));
    let mut uf = UnionFind::new(graph.num_nodes);
    let mut kept = Vec::with_capacity(graph.num_nodes.saturating_sub(1));
    for e in order {
        if uf.union(e.i, e.j) {
            kept.push(*e);
            if kept.len() + 1 == graph.num_nodes {
                break;
            }
        }
    }
    SpanningForest::from_tree_edges(graph.num_nodes, kept)
}
