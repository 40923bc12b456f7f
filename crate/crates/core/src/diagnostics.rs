//! Aggregation diagnostics: self-attention traces, smoothness energies,
//! and edge homophily.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::graph::{EdgeIndex, Graph};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DiagnosticsError {
    MissingSelfLoop { node: usize },
    LengthMismatch { expected: usize, got: usize },
}

impl fmt::Display for DiagnosticsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DiagnosticsError::MissingSelfLoop { node } => {
                write!(f, "node {node} has no self-loop; alpha_vv undefined")
            }
            DiagnosticsError::LengthMismatch { expected, got } => {
                write!(f, "expected {expected} values, got {got}")
            }
        }
    }
}

impl core::error::Error for DiagnosticsError {}

/// Self-attention coefficient per node from a layer's edge-wise attention
/// values. The proxy for "how much of the update is the node itself":
/// `alpha_vv = 1` means no neighborhood aggregation.
pub fn alpha_vv(
    alpha_edges: &Tensor,
    edges: &EdgeIndex,
) -> Result<Vec<f64>, DiagnosticsError> {
    if alpha_edges.rows() != edges.num_edges() || alpha_edges.cols() != 1 {
        return Err(DiagnosticsError::LengthMismatch {
            expected: edges.num_edges(),
            got: alpha_edges.rows(),
        });
    }
    edges
        .self_edge
        .iter()
        .enumerate()
        .map(|(node, slot)| match slot {
            Some(e) => Ok(alpha_edges.data()[*e]),
            None => Err(DiagnosticsError::MissingSelfLoop { node }),
        })
        .collect()
}

/// Equal-width histogram of values over [0, 1]; 1.0 lands in the last bin.
pub fn alpha_histogram(values: &[f64], bins: usize) -> Vec<usize> {
    let mut counts = vec![0usize; bins];
    for &v in values {
        let clamped = v.clamp(0.0, 1.0);
        let mut bin = (clamped * bins as f64) as usize;
        if bin == bins {
            bin = bins - 1;
        }
        counts[bin] += 1;
    }
    counts
}

/// Median of a value slice (midpoint average for even lengths).
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum PairMode {
    AllPairs,
    AdjacentPairs,
}

impl PairMode {
    pub fn name(self) -> &'static str {
        match self {
            PairMode::AllPairs => "all_pairs",
            PairMode::AdjacentPairs => "adjacent_pairs",
        }
    }
}

/// Squared-difference smoothness energy over node pairs:
/// sum over pairs (u, v), u < v, of ||h_u - h_v||^2. `AllPairs` measures
/// global collapse, `AdjacentPairs` (non-self edges only) local collapse;
/// small values mean the representations have smoothed together.
pub fn smoothness_energy(h: &Tensor, g: &Graph, mode: PairMode) -> f64 {
    let n = g.num_nodes();
    debug_assert_eq!(h.rows(), n);
    let pair = |u: usize, v: usize| -> f64 {
        let mut s = 0.0;
        for (a, b) in h.row(u).iter().zip(h.row(v)) {
            let d = a - b;
            s += d * d;
        }
        s
    };
    match mode {
        PairMode::AllPairs => {
            let mut total = 0.0;
            for u in 0..n {
                for v in (u + 1)..n {
                    total += pair(u, v);
                }
            }
            total
        }
        PairMode::AdjacentPairs => g
            .undirected_edges()
            .iter()
            .map(|&(u, v)| pair(u, v))
            .sum(),
    }
}

/// Fraction of non-self edges joining same-label endpoints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomophilyReport {
    pub value: f64,
    /// Set when the graph has no non-self edges (value defined as 1).
    pub degenerate: bool,
}

pub fn edge_homophily(labels: &[usize], g: &Graph) -> HomophilyReport {
    let edges = g.undirected_edges();
    if edges.is_empty() {
        return HomophilyReport {
            value: 1.0,
            degenerate: true,
        };
    }
    let same = edges
        .iter()
        .filter(|&&(u, v)| labels[u] == labels[v])
        .count();
    HomophilyReport {
        value: same as f64 / edges.len() as f64,
        degenerate: false,
    }
}
