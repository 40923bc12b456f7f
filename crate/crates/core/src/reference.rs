//! Dense reference implementations used to verify the sparse layer path.
//!
//! These build the full n x n attention matrix with plain nested loops and
//! no tape, trading speed for obviousness. They exist only as an independent
//! oracle: verification suites compare [`crate::layers`] against them on
//! small graphs and must not share code with the sparse implementation.

use alloc::vec;

use crate::graph::Graph;
use crate::math;
use crate::tensor::Tensor;

fn phi(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

fn transform_row(w: &Tensor, h: &Tensor, node: usize) -> alloc::vec::Vec<f64> {
    let (d_out, d_in) = w.shape();
    let mut out = vec![0.0; d_out];
    for (i, o) in out.iter_mut().enumerate() {
        for j in 0..d_in {
            *o += w.get(i, j) * h.get(node, j);
        }
    }
    out
}

/// Dense GAT layer: explicit attention matrix, then the weighted sum.
/// `activation_slope` of `None` leaves raw pre-activations (a logits layer).
pub fn dense_gat_forward(
    w_s: &Tensor,
    w_t: &Tensor,
    a: &Tensor,
    h: &Tensor,
    g: &Graph,
    score_slope: f64,
    activation_slope: Option<f64>,
) -> Tensor {
    let n = g.num_nodes();
    let d_out = w_s.rows();
    // e[u][v] over the full matrix; only entries with u in N(v) are used.
    let mut alpha = vec![vec![0.0f64; n]; n];
    for v in 0..n {
        let neighbors = g.neighborhood(v).expect("node in range");
        let mut denom = 0.0;
        for &u in neighbors {
            let su = transform_row(w_s, h, u);
            let tv = transform_row(w_t, h, v);
            let mut e = 0.0;
            for i in 0..d_out {
                e += a.get(i, 0) * phi(su[i] + tv[i], score_slope);
            }
            let ex = math::exp(e);
            alpha[u][v] = ex;
            denom += ex;
        }
        for &u in neighbors {
            alpha[u][v] /= denom;
        }
    }
    let mut out = Tensor::zeros(n, d_out);
    for v in 0..n {
        for &u in g.neighborhood(v).expect("node in range") {
            let wu = transform_row(w_s, h, u);
            for i in 0..d_out {
                let prev = out.get(v, i);
                out.set(v, i, prev + alpha[u][v] * wu[i]);
            }
        }
        if let Some(slope) = activation_slope {
            for i in 0..d_out {
                out.set(v, i, phi(out.get(v, i), slope));
            }
        }
    }
    out
}

/// Dense GATE layer; `a_s` scores cross edges, `a_t` the self-loop.
#[allow(clippy::too_many_arguments)]
pub fn dense_gate_forward(
    w: &Tensor,
    u_mat: &Tensor,
    v_mat: &Tensor,
    a_s: &Tensor,
    a_t: &Tensor,
    h: &Tensor,
    g: &Graph,
    score_slope: f64,
    activation_slope: Option<f64>,
) -> Tensor {
    let n = g.num_nodes();
    let d_out = w.rows();
    let mut alpha = vec![vec![0.0f64; n]; n];
    for v in 0..n {
        let neighbors = g.neighborhood(v).expect("node in range");
        let mut denom = 0.0;
        for &u in neighbors {
            let su = transform_row(u_mat, h, u);
            let tv = transform_row(v_mat, h, v);
            let score_vec = if u == v { a_t } else { a_s };
            let mut e = 0.0;
            for i in 0..d_out {
                e += score_vec.get(i, 0) * phi(su[i] + tv[i], score_slope);
            }
            let ex = math::exp(e);
            alpha[u][v] = ex;
            denom += ex;
        }
        for &u in neighbors {
            alpha[u][v] /= denom;
        }
    }
    let mut out = Tensor::zeros(n, d_out);
    for v in 0..n {
        for &u in g.neighborhood(v).expect("node in range") {
            let wu = transform_row(w, h, u);
            for i in 0..d_out {
                let prev = out.get(v, i);
                out.set(v, i, prev + alpha[u][v] * wu[i]);
            }
        }
        if let Some(slope) = activation_slope {
            for i in 0..d_out {
                out.set(v, i, phi(out.get(v, i), slope));
            }
        }
    }
    out
}
