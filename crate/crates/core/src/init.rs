//! Parameter initialization schemes.
//!
//! * [`looks_linear_orthogonal`]: mirrored random-orthogonal blocks
//!   `[[O, -O], [-O, O]] / sqrt(2)`. Feeding a mirrored signal pair
//!   `(x, -x)` through such layers with ReLU in between reproduces the
//!   composition of the generator maps, so the network acts linearly at
//!   initialization, and the 1/sqrt(2) factor keeps the squared norm of the
//!   mirrored pair constant through each layer+ReLU cycle.
//! * [`xavier_uniform`]: i.i.d. uniform on ±sqrt(6 / (rows + cols)).
//! * [`zero_attention`]: all-zero score vectors; with them every attention
//!   coefficient starts at exactly 1/|N(v)|, i.e. no initial preference
//!   between a node and its neighbors.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::layers::{LayerError, LayerKind, LayerParamIds, Network, NetworkSpec, ParamStore};
use crate::math;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum MatrixScheme {
    LooksLinearOrthogonal,
    XavierUniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum AttentionScheme {
    Zero,
    XavierUniform,
}

/// Fully determines all initial parameters of a network given its spec.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InitPolicy {
    pub matrix: MatrixScheme,
    pub attention: AttentionScheme,
    pub seed: u64,
}

impl InitPolicy {
    /// The standard policy: looks-linear matrices; zero attention for GATE,
    /// Xavier attention for GAT.
    pub fn standard_for(kind: LayerKind, seed: u64) -> Self {
        let attention = if kind.is_gate() {
            AttentionScheme::Zero
        } else {
            AttentionScheme::XavierUniform
        };
        InitPolicy {
            matrix: MatrixScheme::LooksLinearOrthogonal,
            attention,
            seed,
        }
    }
}

/// Rows orthonormal when `rows <= cols`, columns orthonormal otherwise.
/// Gram-Schmidt on Gaussian draws with a re-orthogonalization pass; the
/// positive-diagonal convention makes the distribution Haar.
fn random_orthonormal(rows: usize, cols: usize, rng: &mut SplitMix64) -> Tensor {
    let (k, d, transpose) = if rows <= cols {
        (rows, cols, false)
    } else {
        (cols, rows, true)
    };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Vec<f64> = (0..d).map(|_| rng.next_gaussian()).collect();
        for _ in 0..2 {
            for b in &basis {
                let proj = crate::math::dot(&v, b);
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= proj * y;
                }
            }
        }
        let norm = math::sqrt(crate::math::dot(&v, &v));
        if norm < 1e-12 {
            continue;
        }
        for x in &mut v {
            *x /= norm;
        }
        basis.push(v);
    }
    let mut out = Tensor::zeros(rows, cols);
    for (i, b) in basis.iter().enumerate() {
        for (j, &x) in b.iter().enumerate() {
            if transpose {
                out.set(j, i, x);
            } else {
                out.set(i, j, x);
            }
        }
    }
    out
}

/// Gaussian vector orthogonalized against `against` and normalized to
/// `target_norm`; falls back to a plain normalized Gaussian when no
/// orthogonal direction is left.
fn orthogonalized_fill(
    dim: usize,
    against: &[Vec<f64>],
    target_norm: f64,
    rng: &mut SplitMix64,
) -> Vec<f64> {
    let raw: Vec<f64> = (0..dim).map(|_| rng.next_gaussian()).collect();
    let mut v = raw.clone();
    for b in against {
        let denom = crate::math::dot(b, b);
        if denom < 1e-24 {
            continue;
        }
        let proj = crate::math::dot(&v, b) / denom;
        for (x, y) in v.iter_mut().zip(b) {
            *x -= proj * y;
        }
    }
    let mut norm = math::sqrt(crate::math::dot(&v, &v));
    if norm < 1e-10 {
        v = raw;
        norm = math::sqrt(crate::math::dot(&v, &v));
    }
    let scale = target_norm / norm;
    v.into_iter().map(|x| x * scale).collect()
}

/// Mirrored orthogonal looks-linear matrix.
///
/// Even shape 2m x 2k: draw a random orthogonal O (m x k) and return
/// `[[O, -O], [-O, O]] / sqrt(2)`. Odd dimensions mirror the largest even
/// block and fill the residual column/row with Gaussians orthogonalized
/// against the block, scaled to the block's RMS column/row norm.
pub fn looks_linear_orthogonal(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = SplitMix64::new(seed);
    let m = rows / 2;
    let k = cols / 2;
    if m == 0 || k == 0 {
        // Degenerate shapes have no mirrored structure to build.
        let mut t = Tensor::zeros(rows, cols);
        let norm_target = 1.0 / math::sqrt(cols as f64);
        for r in 0..rows {
            for c in 0..cols {
                t.set(r, c, rng.next_gaussian() * norm_target);
            }
        }
        return t;
    }

    let o = random_orthonormal(m, k, &mut rng);
    let s = 1.0 / math::sqrt(2.0);
    let mut out = Tensor::zeros(rows, cols);
    for i in 0..m {
        for j in 0..k {
            let val = o.get(i, j) * s;
            out.set(i, j, val);
            out.set(i, j + k, -val);
            out.set(i + m, j, -val);
            out.set(i + m, j + k, val);
        }
    }

    if cols % 2 == 1 {
        let col_rms = {
            let mut total = 0.0;
            for j in 0..2 * k {
                let mut sq = 0.0;
                for i in 0..2 * m {
                    sq += out.get(i, j) * out.get(i, j);
                }
                total += sq;
            }
            math::sqrt(total / (2 * k) as f64)
        };
        let against: Vec<Vec<f64>> = (0..2 * k)
            .map(|j| (0..2 * m).map(|i| out.get(i, j)).collect())
            .collect();
        let fill = orthogonalized_fill(2 * m, &against, col_rms, &mut rng);
        for (i, &x) in fill.iter().enumerate() {
            out.set(i, cols - 1, x);
        }
    }
    if rows % 2 == 1 {
        let row_rms = {
            let mut total = 0.0;
            for i in 0..2 * m {
                let mut sq = 0.0;
                for j in 0..cols {
                    sq += out.get(i, j) * out.get(i, j);
                }
                total += sq;
            }
            math::sqrt(total / (2 * m) as f64)
        };
        let against: Vec<Vec<f64>> = (0..2 * m).map(|i| out.row(i).to_vec()).collect();
        let fill = orthogonalized_fill(cols, &against, row_rms, &mut rng);
        for (j, &x) in fill.iter().enumerate() {
            out.set(rows - 1, j, x);
        }
    }
    out
}

/// Entries i.i.d. uniform on ±sqrt(6 / (rows + cols)).
pub fn xavier_uniform(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = SplitMix64::new(seed);
    let bound = math::sqrt(6.0 / (rows + cols) as f64);
    let data = (0..rows * cols)
        .map(|_| rng.uniform(-bound, bound))
        .collect();
    Tensor::from_vec(rows, cols, data).expect("sized by construction")
}

/// Zero score vector of the given dimension (column vector).
pub fn zero_attention(dim: usize) -> Tensor {
    Tensor::from_vec(dim, 1, vec![0.0; dim]).expect("sized by construction")
}

fn matrix(scheme: MatrixScheme, rows: usize, cols: usize, rng: &mut SplitMix64) -> Tensor {
    let seed = rng.next_u64();
    match scheme {
        MatrixScheme::LooksLinearOrthogonal => looks_linear_orthogonal(rows, cols, seed),
        MatrixScheme::XavierUniform => xavier_uniform(rows, cols, seed),
    }
}

fn attention(scheme: AttentionScheme, dim: usize, rng: &mut SplitMix64) -> Tensor {
    let seed = rng.next_u64();
    match scheme {
        AttentionScheme::Zero => zero_attention(dim),
        AttentionScheme::XavierUniform => xavier_uniform(dim, 1, seed),
    }
}

/// Build a fully initialized network for `spec` with input width `d_in`.
///
/// Every parameter draws from its own child stream of `policy.seed`, so two
/// networks that share a prefix of layers still initialize that prefix
/// identically.
pub fn init_network(
    spec: &NetworkSpec,
    d_in: usize,
    policy: &InitPolicy,
) -> Result<Network, LayerError> {
    let mut rng = SplitMix64::new(policy.seed);
    let mut store = ParamStore::new();
    let mut layers = Vec::with_capacity(spec.depth());
    for (l, ls) in spec.layers.iter().enumerate() {
        let din = spec.input_width(l, d_in);
        let dout = ls.width;
        let ids = match ls.kind {
            LayerKind::Mlp => {
                let w = store.insert(
                    format!("l{l}.w"),
                    matrix(policy.matrix, dout, din, &mut rng),
                );
                LayerParamIds::Mlp { w }
            }
            LayerKind::Gat => {
                let w_s = store.insert(
                    format!("l{l}.w_s"),
                    matrix(policy.matrix, dout, din, &mut rng),
                );
                let w_t = store.insert(
                    format!("l{l}.w_t"),
                    matrix(policy.matrix, dout, din, &mut rng),
                );
                let a = store.insert(format!("l{l}.a"), attention(policy.attention, dout, &mut rng));
                LayerParamIds::Gat {
                    w_s,
                    w_t,
                    a,
                    shared: false,
                }
            }
            LayerKind::GatS => {
                let w = store.insert(
                    format!("l{l}.w"),
                    matrix(policy.matrix, dout, din, &mut rng),
                );
                let a = store.insert(format!("l{l}.a"), attention(policy.attention, dout, &mut rng));
                LayerParamIds::Gat {
                    w_s: w,
                    w_t: w,
                    a,
                    shared: true,
                }
            }
            LayerKind::Gate => {
                let w = store.insert(
                    format!("l{l}.w"),
                    matrix(policy.matrix, dout, din, &mut rng),
                );
                let u = store.insert(
                    format!("l{l}.u"),
                    matrix(policy.matrix, dout, din, &mut rng),
                );
                let v = store.insert(
                    format!("l{l}.v"),
                    matrix(policy.matrix, dout, din, &mut rng),
                );
                let a_s = store.insert(
                    format!("l{l}.a_s"),
                    attention(policy.attention, dout, &mut rng),
                );
                let a_t = store.insert(
                    format!("l{l}.a_t"),
                    attention(policy.attention, dout, &mut rng),
                );
                LayerParamIds::Gate {
                    w,
                    u,
                    v,
                    a_s,
                    a_t,
                    shared: false,
                }
            }
            LayerKind::GateS => {
                let w = store.insert(
                    format!("l{l}.w"),
                    matrix(policy.matrix, dout, din, &mut rng),
                );
                let a_s = store.insert(
                    format!("l{l}.a_s"),
                    attention(policy.attention, dout, &mut rng),
                );
                let a_t = store.insert(
                    format!("l{l}.a_t"),
                    attention(policy.attention, dout, &mut rng),
                );
                LayerParamIds::Gate {
                    w,
                    u: w,
                    v: w,
                    a_s,
                    a_t,
                    shared: true,
                }
            }
        };
        layers.push(ids);
    }
    Network::from_parts(spec.clone(), store, layers, d_in)
}
