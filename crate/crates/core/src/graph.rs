//! Immutable CSR graphs.
//!
//! Undirected graphs are stored with both directions materialized so that
//! both `alpha[u][v]` and `alpha[v][u]` are addressable in O(deg). Neighbor
//! lists are sorted ascending, which fixes the softmax summation order and
//! makes runs reproducible. A self-loop is a single `v` entry in row `v`.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    num_nodes: usize,
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    has_self_loops: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GraphError {
    NodeOutOfRange { node: usize, num_nodes: usize },
    DuplicateEdge { u: usize, v: usize },
    Asymmetric { u: usize, v: usize },
    InvalidProbability { p: f64 },
    EmptyGraph,
}

impl fmt::Display for GraphError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphError::NodeOutOfRange { node, num_nodes } => {
                write!(f, "node {node} out of range for {num_nodes} nodes")
            }
            GraphError::DuplicateEdge { u, v } => write!(f, "duplicate edge ({u}, {v})"),
            GraphError::Asymmetric { u, v } => {
                write!(f, "edge ({u}, {v}) present without its reverse")
            }
            GraphError::InvalidProbability { p } => {
                write!(f, "edge probability {p} outside [0, 1]")
            }
            GraphError::EmptyGraph => write!(f, "graph must have at least one node"),
        }
    }
}

impl core::error::Error for GraphError {}

impl Graph {
    /// Build from undirected edges (`u != v`) plus explicit self-loops
    /// (`u == v`). Each undirected edge appears once in the input and is
    /// materialized in both rows.
    pub fn from_edges(num_nodes: usize, edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        if num_nodes == 0 {
            return Err(GraphError::EmptyGraph);
        }
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); num_nodes];
        for &(u, v) in edges {
            for node in [u, v] {
                if node >= num_nodes {
                    return Err(GraphError::NodeOutOfRange {
                        node,
                        num_nodes,
                    });
                }
            }
            if u == v {
                rows[u].push(u);
            } else {
                rows[v].push(u);
                rows[u].push(v);
            }
        }
        let mut offsets = Vec::with_capacity(num_nodes + 1);
        let mut neighbors = Vec::new();
        offsets.push(0);
        for (v, row) in rows.iter_mut().enumerate() {
            row.sort_unstable();
            for w in row.windows(2) {
                if w[0] == w[1] {
                    return Err(GraphError::DuplicateEdge { u: v, v: w[0] });
                }
            }
            neighbors.extend_from_slice(row);
            offsets.push(neighbors.len());
        }
        let has_self_loops = (0..num_nodes).all(|v| {
            let row = &neighbors[offsets[v]..offsets[v + 1]];
            row.binary_search(&v).is_ok()
        });
        Ok(Self {
            num_nodes,
            offsets,
            neighbors,
            has_self_loops,
        })
    }

    /// Erdős–Rényi G(n, p): each unordered pair {u, v}, u != v, is included
    /// independently with probability `p`. The raw output has no self-loops.
    pub fn erdos_renyi(n: usize, p: f64, seed: u64) -> Result<Self, GraphError> {
        if !(0.0..=1.0).contains(&p) {
            return Err(GraphError::InvalidProbability { p });
        }
        if n == 0 {
            return Err(GraphError::EmptyGraph);
        }
        let mut rng = SplitMix64::new(seed);
        let mut edges = Vec::new();
        for u in 0..n {
            for v in (u + 1)..n {
                if rng.next_f64() < p {
                    edges.push((u, v));
                }
            }
        }
        Self::from_edges(n, &edges)
    }

    /// Return a copy with every node guaranteed a self-loop. Idempotent.
    pub fn add_self_loops(&self) -> Graph {
        if self.has_self_loops {
            return self.clone();
        }
        let mut offsets = Vec::with_capacity(self.num_nodes + 1);
        let mut neighbors = Vec::with_capacity(self.neighbors.len() + self.num_nodes);
        offsets.push(0);
        for v in 0..self.num_nodes {
            let row = self.neighborhood_unchecked(v);
            match row.binary_search(&v) {
                Ok(_) => neighbors.extend_from_slice(row),
                Err(pos) => {
                    neighbors.extend_from_slice(&row[..pos]);
                    neighbors.push(v);
                    neighbors.extend_from_slice(&row[pos..]);
                }
            }
            offsets.push(neighbors.len());
        }
        Graph {
            num_nodes: self.num_nodes,
            offsets,
            neighbors,
            has_self_loops: true,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Directed adjacency entries; for undirected storage this is twice the
    /// number of undirected edges plus the number of self-loops.
    pub fn num_entries(&self) -> usize {
        self.neighbors.len()
    }

    /// Count of undirected non-self edges.
    pub fn num_undirected_edges(&self) -> usize {
        let self_loops = (0..self.num_nodes)
            .filter(|&v| self.neighborhood_unchecked(v).binary_search(&v).is_ok())
            .count();
        (self.neighbors.len() - self_loops) / 2
    }

    pub fn has_self_loops(&self) -> bool {
        self.has_self_loops
    }

    pub fn neighborhood(&self, v: usize) -> Result<&[usize], GraphError> {
        if v >= self.num_nodes {
            return Err(GraphError::NodeOutOfRange {
                node: v,
                num_nodes: self.num_nodes,
            });
        }
        Ok(self.neighborhood_unchecked(v))
    }

    #[inline]
    pub(crate) fn neighborhood_unchecked(&self, v: usize) -> &[usize] {
        &self.neighbors[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    /// Undirected non-self edges as (u, v) with u < v, ascending.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for v in 0..self.num_nodes {
            for &u in self.neighborhood_unchecked(v) {
                if v < u {
                    out.push((v, u));
                }
            }
        }
        out
    }

    /// Explicit self-loop pairs (v, v), ascending.
    pub fn self_loop_edges(&self) -> Vec<(usize, usize)> {
        (0..self.num_nodes)
            .filter(|&v| self.neighborhood_unchecked(v).binary_search(&v).is_ok())
            .map(|v| (v, v))
            .collect()
    }

    /// Check the structural invariants: monotone offsets, in-range sorted
    /// rows without duplicates, symmetric storage, and the self-loop flag
    /// matching the rows.
    pub fn validate(&self) -> Result<(), GraphError> {
        for v in 0..self.num_nodes {
            let row = self.neighborhood_unchecked(v);
            for w in row.windows(2) {
                if w[0] >= w[1] {
                    return Err(GraphError::DuplicateEdge { u: v, v: w[0] });
                }
            }
            for &u in row {
                if u >= self.num_nodes {
                    return Err(GraphError::NodeOutOfRange {
                        node: u,
                        num_nodes: self.num_nodes,
                    });
                }
                if u != v && self.neighborhood_unchecked(u).binary_search(&v).is_err() {
                    return Err(GraphError::Asymmetric { u, v });
                }
            }
        }
        Ok(())
    }
}

/// Flat directed-edge arrays for attention layers, derived once per graph.
///
/// Edge `e` carries source `src[e]` into target `seg[e]`; edges are grouped
/// by target in CSR order, so `seg` is non-decreasing and segment softmax can
/// walk it in one pass. `self_edge[v]` is the index of the edge (v, v) when
/// present.
#[derive(Debug, Clone)]
pub struct EdgeIndex {
    pub src: Vec<usize>,
    pub seg: Vec<usize>,
    pub self_mask: Vec<bool>,
    pub self_edge: Vec<Option<usize>>,
    pub num_nodes: usize,
}

impl EdgeIndex {
    pub fn new(g: &Graph) -> Self {
        let n = g.num_nodes();
        let mut src = Vec::with_capacity(g.num_entries());
        let mut seg = Vec::with_capacity(g.num_entries());
        let mut self_mask = Vec::with_capacity(g.num_entries());
        let mut self_edge = vec![None; n];
        for v in 0..n {
            for &u in g.neighborhood_unchecked(v) {
                if u == v {
                    self_edge[v] = Some(src.len());
                }
                self_mask.push(u == v);
                src.push(u);
                seg.push(v);
            }
        }
        Self {
            src,
            seg,
            self_mask,
            self_edge,
            num_nodes: n,
        }
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }
}
