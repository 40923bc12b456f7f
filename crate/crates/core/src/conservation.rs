//! Gradient conservation laws and the rescale invariances behind them.
//!
//! For homogeneous-activation networks the loss is invariant under scaling
//! all parameters that multiply a hidden unit's output by `lambda` while
//! dividing all parameters that consume it by `lambda`. Differentiating that
//! invariance at `lambda = 1` couples parameter–gradient inner products
//! `Theta(theta) = <theta, grad_theta L>` across adjacent layers. With
//! `n_l`-wide layer `l` and unit `i`, the exact per-unit laws are:
//!
//! * GAT with shared weights (law `gat_eq5`):
//!   `Theta(W^l[i,:]) = Theta(a^l[i]) + Theta(W^{l+1}[:,i])`
//! * GAT unshared (extended bookkeeping, `gat_eq5_ext`):
//!   `Theta(W_s^l[i,:]) + Theta(W_t^l[i,:]) = Theta(a^l[i])
//!      + Theta(W_s^{l+1}[:,i]) + Theta(W_t^{l+1}[:,i])`
//! * GATE with shared weights (`gate_eq7`):
//!   `Theta(W^l[i,:]) = Theta(a_s^l[i]) + Theta(a_t^l[i]) + Theta(W^{l+1}[:,i])`
//! * GATE unshared (`gate_eq7`):
//!   `Theta(W^l[i,:]) = Theta(W^{l+1}[:,i]) + Theta(U^{l+1}[:,i]) + Theta(V^{l+1}[:,i])`
//! * GATE unshared, within one layer (`gate_eq8`):
//!   `Theta(a_s^l[i]) + Theta(a_t^l[i]) = Theta(U^l[i,:]) + Theta(V^l[i,:])`
//! * MLP (`mlp_balance`): `Theta(W^l[i,:]) = Theta(W^{l+1}[:,i])`
//!
//! The right-hand "next layer" contribution always consists of the column-i
//! slices of every layer-(l+1) matrix that reads the hidden unit — the
//! aggregation matrix plus, for an unshared GATE successor, its score
//! matrices U and V. Summing the unshared-GATE per-unit laws over `i` and
//! substituting `gate_eq8` recovers the aggregate coupling
//! `Theta(W^l) = Theta(W^{l+1}) + Theta(a_s^{l+1}) + Theta(a_t^{l+1})`,
//! which [`gate_aggregate_residual`] reports as well. All of these hold for
//! exact gradients of the full-batch loss regardless of the optimizer, so
//! their residuals double as an end-to-end correctness check on backward().
//!
//! The same unit/scale bookkeeping drives [`rescale_hidden_unit`] and
//! [`rescale_gate_attention_unit`], which apply the invariance as an actual
//! parameter transformation (used to test that logits are unchanged).

use alloc::vec::Vec;
use core::fmt;

use crate::layers::{LayerParamIds, Network, ParamId};
use crate::math;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LawKind {
    GatEq5,
    GatEq5Ext,
    GateEq7,
    GateEq8,
    MlpBalance,
}

impl LawKind {
    pub fn name(self) -> &'static str {
        match self {
            LawKind::GatEq5 => "gat_eq5",
            LawKind::GatEq5Ext => "gat_eq5_ext",
            LawKind::GateEq7 => "gate_eq7",
            LawKind::GateEq8 => "gate_eq8",
            LawKind::MlpBalance => "mlp_balance",
        }
    }
}

/// One conserved quantity at (layer, unit): lhs and rhs of the law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitResidual {
    pub layer: usize,
    pub unit: usize,
    pub law: LawKind,
    pub lhs: f64,
    pub rhs: f64,
}

impl UnitResidual {
    pub fn residual(&self) -> f64 {
        self.lhs - self.rhs
    }

    pub fn scale(&self) -> f64 {
        math::abs(self.lhs) + math::abs(self.rhs)
    }

    pub fn relative_residual(&self) -> f64 {
        math::abs(self.residual()) / self.scale().max(1e-30)
    }
}

/// Eq. 8 only exists when a layer's score matrices are independent.
#[derive(Debug, Clone, PartialEq)]
pub enum Eq8Outcome {
    Applicable(Vec<UnitResidual>),
    NotApplicableShared,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConservationError {
    LayerOutOfRange { layer: usize, depth: usize },
    NotLastCoupled { layer: usize },
    WrongKind { layer: usize, expected: &'static str },
    GradientCount { expected: usize, got: usize },
    UnitOutOfRange { unit: usize, width: usize },
}

impl fmt::Display for ConservationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConservationError::LayerOutOfRange { layer, depth } => {
                write!(f, "layer {layer} out of range for depth {depth}")
            }
            ConservationError::NotLastCoupled { layer } => {
                write!(f, "layer {layer} is the last layer; no successor to couple with")
            }
            ConservationError::WrongKind { layer, expected } => {
                write!(f, "layer {layer} is not a {expected} layer")
            }
            ConservationError::GradientCount { expected, got } => {
                write!(f, "expected {expected} gradient tensors, got {got}")
            }
            ConservationError::UnitOutOfRange { unit, width } => {
                write!(f, "unit {unit} out of range for width {width}")
            }
        }
    }
}

impl core::error::Error for ConservationError {}

/// Compensated `<row i of theta, row i of grad>`.
fn theta_row(net: &Network, grads: &[Tensor], id: ParamId, i: usize) -> f64 {
    math::dot(net.store.tensor(id).row(i), grads[id.0].row(i))
}

/// Compensated `<column i of theta, column i of grad>`.
fn theta_col(net: &Network, grads: &[Tensor], id: ParamId, i: usize) -> f64 {
    let t = net.store.tensor(id);
    let g = &grads[id.0];
    let mut acc = math::CompensatedSum::new();
    for r in 0..t.rows() {
        acc.add(t.get(r, i) * g.get(r, i));
    }
    acc.value()
}

/// `theta[i] * grad[i]` for a column-vector parameter.
fn theta_entry(net: &Network, grads: &[Tensor], id: ParamId, i: usize) -> f64 {
    net.store.tensor(id).get(i, 0) * grads[id.0].get(i, 0)
}

fn check_grads(net: &Network, grads: &[Tensor]) -> Result<(), ConservationError> {
    if grads.len() != net.store.len() {
        return Err(ConservationError::GradientCount {
            expected: net.store.len(),
            got: grads.len(),
        });
    }
    Ok(())
}

fn law_kind(ids: &LayerParamIds) -> LawKind {
    match ids {
        LayerParamIds::Gat { shared: true, .. } => LawKind::GatEq5,
        LayerParamIds::Gat { shared: false, .. } => LawKind::GatEq5Ext,
        LayerParamIds::Gate { .. } => LawKind::GateEq7,
        LayerParamIds::Mlp { .. } => LawKind::MlpBalance,
    }
}

/// Sum of Theta over the parameters that scale unit `i`'s output at layer
/// `l` (matrix rows) together with the same-layer score parameters coupled
/// to that unit.
fn theta_out_and_score(net: &Network, grads: &[Tensor], l: usize, i: usize) -> (f64, f64) {
    match net.layers[l] {
        LayerParamIds::Mlp { w } => (theta_row(net, grads, w, i), 0.0),
        LayerParamIds::Gat {
            w_s,
            w_t,
            a,
            shared,
        } => {
            let out = if shared {
                theta_row(net, grads, w_s, i)
            } else {
                theta_row(net, grads, w_s, i) + theta_row(net, grads, w_t, i)
            };
            (out, theta_entry(net, grads, a, i))
        }
        LayerParamIds::Gate {
            w,
            a_s,
            a_t,
            shared,
            ..
        } => {
            // For shared weights the single matrix accumulates the score-role
            // gradients, so its row already carries the U/V contributions and
            // the same-layer attention entries join the score side. Unshared
            // score matrices are untouched by scaling W's row.
            let score = if shared {
                theta_entry(net, grads, a_s, i) + theta_entry(net, grads, a_t, i)
            } else {
                0.0
            };
            (theta_row(net, grads, w, i), score)
        }
    }
}

/// Sum of Theta over the column-i slices of every layer-`l` matrix that
/// consumes the previous layer's unit `i`.
fn theta_in(net: &Network, grads: &[Tensor], l: usize, i: usize) -> f64 {
    match net.layers[l] {
        LayerParamIds::Mlp { w } => theta_col(net, grads, w, i),
        LayerParamIds::Gat {
            w_s,
            w_t,
            shared,
            ..
        } => {
            if shared {
                theta_col(net, grads, w_s, i)
            } else {
                theta_col(net, grads, w_s, i) + theta_col(net, grads, w_t, i)
            }
        }
        LayerParamIds::Gate {
            w, u, v, shared, ..
        } => {
            if shared {
                theta_col(net, grads, w, i)
            } else {
                theta_col(net, grads, w, i)
                    + theta_col(net, grads, u, i)
                    + theta_col(net, grads, v, i)
            }
        }
    }
}

/// Cross-layer conservation residuals for hidden layer `l` (any kind).
/// Requires `l + 1 < depth`; one [`UnitResidual`] per unit of layer `l`.
pub fn coupling_residuals(
    net: &Network,
    grads: &[Tensor],
    l: usize,
) -> Result<Vec<UnitResidual>, ConservationError> {
    check_grads(net, grads)?;
    let depth = net.depth();
    if l >= depth {
        return Err(ConservationError::LayerOutOfRange { layer: l, depth });
    }
    if l + 1 >= depth {
        return Err(ConservationError::NotLastCoupled { layer: l });
    }
    let width = net.width(l);
    let law = law_kind(&net.layers[l]);
    let mut out = Vec::with_capacity(width);
    for i in 0..width {
        let (theta_out, theta_score) = theta_out_and_score(net, grads, l, i);
        let theta_next = theta_in(net, grads, l + 1, i);
        out.push(UnitResidual {
            layer: l,
            unit: i,
            law,
            lhs: theta_out,
            rhs: theta_score + theta_next,
        });
    }
    Ok(out)
}

/// The GAT conservation law (shared weights), or the extended row/column
/// bookkeeping for the unshared variant.
pub fn conservation_residual_gat(
    net: &Network,
    grads: &[Tensor],
    l: usize,
) -> Result<Vec<UnitResidual>, ConservationError> {
    if !matches!(net.layers.get(l), Some(LayerParamIds::Gat { .. })) {
        return Err(ConservationError::WrongKind {
            layer: l,
            expected: "gat",
        });
    }
    coupling_residuals(net, grads, l)
}

/// The GATE conservation laws: the cross-layer coupling plus, when the
/// layer's U and V are independent, the within-layer attention law.
pub fn conservation_residual_gate(
    net: &Network,
    grads: &[Tensor],
    l: usize,
) -> Result<(Vec<UnitResidual>, Eq8Outcome), ConservationError> {
    if !matches!(net.layers.get(l), Some(LayerParamIds::Gate { .. })) {
        return Err(ConservationError::WrongKind {
            layer: l,
            expected: "gate",
        });
    }
    let eq7 = coupling_residuals(net, grads, l)?;
    let eq8 = gate_eq8_residuals(net, grads, l)?;
    Ok((eq7, eq8))
}

/// Within-layer GATE law `gate_eq8`; applies to any layer with independent
/// U and V (including the last), and is marked not applicable for shared
/// weights.
pub fn gate_eq8_residuals(
    net: &Network,
    grads: &[Tensor],
    l: usize,
) -> Result<Eq8Outcome, ConservationError> {
    check_grads(net, grads)?;
    let depth = net.depth();
    if l >= depth {
        return Err(ConservationError::LayerOutOfRange { layer: l, depth });
    }
    match net.layers[l] {
        LayerParamIds::Gate {
            u,
            v,
            a_s,
            a_t,
            shared,
            ..
        } => {
            if shared {
                return Ok(Eq8Outcome::NotApplicableShared);
            }
            let width = net.width(l);
            let mut out = Vec::with_capacity(width);
            for i in 0..width {
                let lhs =
                    theta_entry(net, grads, a_s, i) + theta_entry(net, grads, a_t, i);
                let rhs = theta_row(net, grads, u, i) + theta_row(net, grads, v, i);
                out.push(UnitResidual {
                    layer: l,
                    unit: i,
                    law: LawKind::GateEq8,
                    lhs,
                    rhs,
                });
            }
            Ok(Eq8Outcome::Applicable(out))
        }
        _ => Err(ConservationError::WrongKind {
            layer: l,
            expected: "gate",
        }),
    }
}

/// Aggregate (unit-summed) GATE coupling for an unshared layer `l`:
/// `Theta(W^l) = Theta(W^{l+1}) + Theta(a_s^{l+1}) + Theta(a_t^{l+1})`,
/// the combination of the per-unit coupling with the next layer's
/// within-layer law. Only defined when layer `l+1` is an unshared GATE.
pub fn gate_aggregate_residual(
    net: &Network,
    grads: &[Tensor],
    l: usize,
) -> Result<UnitResidual, ConservationError> {
    check_grads(net, grads)?;
    let depth = net.depth();
    if l + 1 >= depth {
        return Err(ConservationError::NotLastCoupled { layer: l });
    }
    let w_l = match net.layers[l] {
        LayerParamIds::Gate { w, shared: false, .. } => w,
        _ => {
            return Err(ConservationError::WrongKind {
                layer: l,
                expected: "unshared gate",
            })
        }
    };
    let (w_next, a_s_next, a_t_next) = match net.layers[l + 1] {
        LayerParamIds::Gate {
            w,
            a_s,
            a_t,
            shared: false,
            ..
        } => (w, a_s, a_t),
        _ => {
            return Err(ConservationError::WrongKind {
                layer: l + 1,
                expected: "unshared gate",
            })
        }
    };
    let frob = |id: ParamId| net.store.tensor(id).frobenius_dot(&grads[id.0]);
    Ok(UnitResidual {
        layer: l,
        unit: usize::MAX,
        law: LawKind::GateEq7,
        lhs: frob(w_l),
        rhs: frob(w_next) + frob(a_s_next) + frob(a_t_next),
    })
}

fn scale_row(t: &mut Tensor, i: usize, factor: f64) {
    for x in t.row_mut(i) {
        *x *= factor;
    }
}

fn scale_col(t: &mut Tensor, i: usize, factor: f64) {
    for r in 0..t.rows() {
        let v = t.get(r, i) * factor;
        t.set(r, i, v);
    }
}

fn scale_entry(t: &mut Tensor, i: usize, factor: f64) {
    let v = t.get(i, 0) * factor;
    t.set(i, 0, v);
}

/// Apply the hidden-unit rescale invariance at (layer `l`, unit `i`): the
/// unit's output-scaling parameters are multiplied by `lambda` and every
/// parameter consuming the unit is divided by `lambda`. Network logits are
/// mathematically unchanged for any `lambda > 0`.
pub fn rescale_hidden_unit(
    net: &mut Network,
    l: usize,
    i: usize,
    lambda: f64,
) -> Result<(), ConservationError> {
    let depth = net.depth();
    if l >= depth {
        return Err(ConservationError::LayerOutOfRange { layer: l, depth });
    }
    if l + 1 >= depth {
        return Err(ConservationError::NotLastCoupled { layer: l });
    }
    let width = net.width(l);
    if i >= width {
        return Err(ConservationError::UnitOutOfRange { unit: i, width });
    }
    let inv = 1.0 / lambda;
    match net.layers[l] {
        LayerParamIds::Mlp { w } => scale_row(net.store.tensor_mut(w), i, lambda),
        LayerParamIds::Gat {
            w_s,
            w_t,
            a,
            shared,
        } => {
            scale_row(net.store.tensor_mut(w_s), i, lambda);
            if !shared {
                scale_row(net.store.tensor_mut(w_t), i, lambda);
            }
            scale_entry(net.store.tensor_mut(a), i, inv);
        }
        LayerParamIds::Gate {
            w,
            a_s,
            a_t,
            shared,
            ..
        } => {
            scale_row(net.store.tensor_mut(w), i, lambda);
            if shared {
                // The shared matrix also scaled the score pre-activation,
                // compensated by the same-layer attention entries.
                scale_entry(net.store.tensor_mut(a_s), i, inv);
                scale_entry(net.store.tensor_mut(a_t), i, inv);
            }
        }
    }
    match net.layers[l + 1] {
        LayerParamIds::Mlp { w } => scale_col(net.store.tensor_mut(w), i, inv),
        LayerParamIds::Gat {
            w_s, w_t, shared, ..
        } => {
            scale_col(net.store.tensor_mut(w_s), i, inv);
            if !shared {
                scale_col(net.store.tensor_mut(w_t), i, inv);
            }
        }
        LayerParamIds::Gate {
            w, u, v, shared, ..
        } => {
            scale_col(net.store.tensor_mut(w), i, inv);
            if !shared {
                scale_col(net.store.tensor_mut(u), i, inv);
                scale_col(net.store.tensor_mut(v), i, inv);
            }
        }
    }
    Ok(())
}

/// Apply the within-layer GATE invariance at (layer `l`, unit `i`):
/// `(a_s[i], a_t[i]) /= lambda` and `(U[i,:], V[i,:]) *= lambda`.
/// Requires independent U and V.
pub fn rescale_gate_attention_unit(
    net: &mut Network,
    l: usize,
    i: usize,
    lambda: f64,
) -> Result<(), ConservationError> {
    let depth = net.depth();
    if l >= depth {
        return Err(ConservationError::LayerOutOfRange { layer: l, depth });
    }
    match net.layers[l] {
        LayerParamIds::Gate {
            u,
            v,
            a_s,
            a_t,
            shared: false,
            ..
        } => {
            let width = net.width(l);
            if i >= width {
                return Err(ConservationError::UnitOutOfRange { unit: i, width });
            }
            let inv = 1.0 / lambda;
            scale_entry(net.store.tensor_mut(a_s), i, inv);
            scale_entry(net.store.tensor_mut(a_t), i, inv);
            scale_row(net.store.tensor_mut(u), i, lambda);
            scale_row(net.store.tensor_mut(v), i, lambda);
            Ok(())
        }
        _ => Err(ConservationError::WrongKind {
            layer: l,
            expected: "unshared gate",
        }),
    }
}

/// Relative parameter change `delta = grad / theta` (0 where `theta == 0`),
/// summarized per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativeChange {
    pub param: ParamId,
    pub max_abs: f64,
    pub mean_abs: f64,
}

pub fn relative_change(net: &Network, grads: &[Tensor]) -> Vec<RelativeChange> {
    net.store
        .ids()
        .map(|id| {
            let t = net.store.tensor(id);
            let g = &grads[id.0];
            let mut max_abs = 0.0f64;
            let mut sum = 0.0;
            for (&theta, &grad) in t.data().iter().zip(g.data()) {
                let delta = if theta == 0.0 { 0.0 } else { grad / theta };
                let a = math::abs(delta);
                if a > max_abs {
                    max_abs = a;
                }
                sum += a;
            }
            RelativeChange {
                param: id,
                max_abs,
                mean_abs: sum / t.len() as f64,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::rc::Rc;
    use alloc::vec;

    use crate::graph::{EdgeIndex, Graph};
    use crate::init::{init_network, AttentionScheme, InitPolicy, MatrixScheme};
    use crate::layers::{ForwardOptions, LayerKind, LayerSpec, NetworkSpec};
    use crate::rng::SplitMix64;
    use crate::tape::Tape;

    fn xavier_policy(seed: u64) -> InitPolicy {
        InitPolicy {
            matrix: MatrixScheme::XavierUniform,
            attention: AttentionScheme::XavierUniform,
            seed,
        }
    }

    fn zero_attention_policy(seed: u64) -> InitPolicy {
        InitPolicy {
            matrix: MatrixScheme::LooksLinearOrthogonal,
            attention: AttentionScheme::Zero,
            seed,
        }
    }

    /// Cross-entropy loss gradients for a random-label task on `g`.
    fn loss_grads(net: &Network, g: &Graph, features: &Tensor, labels: &[usize]) -> Vec<Tensor> {
        let edges = EdgeIndex::new(g);
        let mut tape = Tape::new();
        let trace = net
            .forward(&mut tape, features, &edges, ForwardOptions::default())
            .unwrap();
        let loss = tape
            .softmax_cross_entropy(
                trace.logits,
                Rc::new(labels.to_vec()),
                Rc::new(vec![true; labels.len()]),
            )
            .unwrap();
        let grads = tape.backward(loss).unwrap();
        net.store
            .ids()
            .map(|id| grads.get(trace.param_nodes[id.0]))
            .collect()
    }

    fn random_instance(
        n: usize,
        d_in: usize,
        classes: usize,
        seed: u64,
    ) -> (Graph, Tensor, Vec<usize>) {
        let g = Graph::erdos_renyi(n, 0.4, seed).unwrap().add_self_loops();
        let mut rng = SplitMix64::new(seed ^ 0xABCD);
        let features = Tensor::from_vec(
            n,
            d_in,
            (0..n * d_in).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        )
        .unwrap();
        let labels = (0..n).map(|_| rng.next_usize(classes)).collect();
        (g, features, labels)
    }

    fn assert_laws_hold(net: &Network, grads: &[Tensor], tol: f64) {
        for l in 0..net.depth() - 1 {
            for r in coupling_residuals(net, grads, l).unwrap() {
                assert!(
                    r.relative_residual() < tol,
                    "layer {l} unit {} law {}: lhs {} rhs {} rel {}",
                    r.unit,
                    r.law.name(),
                    r.lhs,
                    r.rhs,
                    r.relative_residual()
                );
            }
        }
        for l in 0..net.depth() {
            if let Ok(Eq8Outcome::Applicable(rs)) = gate_eq8_residuals(net, grads, l) {
                for r in rs {
                    assert!(
                        r.relative_residual() < tol,
                        "eq8 layer {l} unit {}: rel {}",
                        r.unit,
                        r.relative_residual()
                    );
                }
            }
        }
    }

    #[test]
    fn zero_gradients_give_zero_residuals() {
        let spec = NetworkSpec::uniform(LayerKind::GatS, 2, 4, 2).unwrap();
        let net = init_network(&spec, 3, &xavier_policy(1)).unwrap();
        let grads: Vec<Tensor> = net
            .store
            .ids()
            .map(|id| {
                let (r, c) = net.store.tensor(id).shape();
                Tensor::zeros(r, c)
            })
            .collect();
        for r in coupling_residuals(&net, &grads, 0).unwrap() {
            assert_eq!(r.residual(), 0.0);
            assert_eq!(r.relative_residual(), 0.0);
        }
    }

    #[test]
    fn gat_shared_law_is_exact_on_random_instances() {
        // The theorem is an exact identity of the loss gradient; the oracle
        // is the autodiff gradient itself.
        let (g, features, labels) = random_instance(6, 3, 2, 42);
        let spec = NetworkSpec::uniform(LayerKind::GatS, 2, 4, 2).unwrap();
        let net = init_network(&spec, 3, &xavier_policy(7)).unwrap();
        let grads = loss_grads(&net, &g, &features, &labels);
        for r in conservation_residual_gat(&net, &grads, 0).unwrap() {
            assert_eq!(r.law, LawKind::GatEq5);
            assert!(r.relative_residual() < 1e-10, "rel {}", r.relative_residual());
        }
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        // A 10% error in one gradient entry must push the relative residual
        // above 1e-3: the check works as a detector.
        let (g, features, labels) = random_instance(6, 3, 2, 43);
        let spec = NetworkSpec::uniform(LayerKind::GatS, 2, 4, 2).unwrap();
        let net = init_network(&spec, 3, &xavier_policy(8)).unwrap();
        let mut grads = loss_grads(&net, &g, &features, &labels);
        let w0 = net.layers[0].aggregation_matrix();
        grads[w0.0].data_mut()[1] *= 1.1;
        let worst = conservation_residual_gat(&net, &grads, 0)
            .unwrap()
            .iter()
            .map(|r| r.relative_residual())
            .fold(0.0, f64::max);
        assert!(worst > 1e-3, "corruption went undetected: {worst}");
    }

    #[test]
    fn gate_laws_exact_at_zero_attention_init() {
        let (g, features, labels) = random_instance(8, 4, 2, 44);
        let spec = NetworkSpec::uniform(LayerKind::Gate, 3, 4, 2).unwrap();
        let net = init_network(&spec, 4, &zero_attention_policy(9)).unwrap();
        let grads = loss_grads(&net, &g, &features, &labels);
        assert_laws_hold(&net, &grads, 1e-10);
    }

    #[test]
    fn gate_laws_exact_with_random_attention() {
        for seed in 0..5 {
            let (g, features, labels) = random_instance(7, 3, 2, 100 + seed);
            let spec = NetworkSpec::uniform(LayerKind::Gate, 3, 5, 2).unwrap();
            let net = init_network(&spec, 3, &xavier_policy(200 + seed)).unwrap();
            let grads = loss_grads(&net, &g, &features, &labels);
            assert_laws_hold(&net, &grads, 1e-10);
            // Aggregate form: Theta(W^l) = Theta(W^{l+1}) + Theta(a_s^{l+1})
            // + Theta(a_t^{l+1}), the unit-summed paper statement.
            for l in 0..net.depth() - 1 {
                let agg = gate_aggregate_residual(&net, &grads, l).unwrap();
                assert!(
                    agg.relative_residual() < 1e-10,
                    "aggregate at layer {l}: {}",
                    agg.relative_residual()
                );
            }
        }
    }

    #[test]
    fn gate_shared_uses_same_layer_attention_and_skips_eq8() {
        let (g, features, labels) = random_instance(7, 3, 2, 55);
        let spec = NetworkSpec::uniform(LayerKind::GateS, 2, 4, 2).unwrap();
        let net = init_network(&spec, 3, &xavier_policy(66)).unwrap();
        let grads = loss_grads(&net, &g, &features, &labels);
        let (eq7, eq8) = conservation_residual_gate(&net, &grads, 0).unwrap();
        for r in eq7 {
            assert!(r.relative_residual() < 1e-10, "rel {}", r.relative_residual());
        }
        assert_eq!(eq8, Eq8Outcome::NotApplicableShared);
    }

    #[test]
    fn gat_unshared_extended_law_is_exact() {
        let (g, features, labels) = random_instance(6, 3, 2, 77);
        let spec = NetworkSpec::uniform(LayerKind::Gat, 3, 4, 2).unwrap();
        let net = init_network(&spec, 3, &xavier_policy(88)).unwrap();
        let grads = loss_grads(&net, &g, &features, &labels);
        for l in 0..2 {
            for r in conservation_residual_gat(&net, &grads, l).unwrap() {
                assert_eq!(r.law, LawKind::GatEq5Ext);
                assert!(r.relative_residual() < 1e-10, "rel {}", r.relative_residual());
            }
        }
    }

    #[test]
    fn laws_hold_across_mixed_stacks_with_uneven_widths() {
        let (g, features, labels) = random_instance(9, 3, 2, 99);
        let spec = NetworkSpec::new(vec![
            LayerSpec::new(LayerKind::Gate, 5),
            LayerSpec::new(LayerKind::Mlp, 3),
            LayerSpec::new(LayerKind::GatS, 4),
            LayerSpec::new(LayerKind::GateS, 6),
            LayerSpec::new(LayerKind::Gat, 2),
        ])
        .unwrap();
        let net = init_network(&spec, 3, &xavier_policy(111)).unwrap();
        let grads = loss_grads(&net, &g, &features, &labels);
        assert_laws_hold(&net, &grads, 1e-9);
    }

    #[test]
    fn hidden_unit_rescaling_leaves_logits_unchanged() {
        let (g, features, _) = random_instance(8, 3, 2, 123);
        let edges = EdgeIndex::new(&g);
        for kind in [
            LayerKind::Gat,
            LayerKind::GatS,
            LayerKind::Gate,
            LayerKind::GateS,
            LayerKind::Mlp,
        ] {
            let spec = NetworkSpec::uniform(kind, 3, 4, 2).unwrap();
            let net = init_network(&spec, 3, &xavier_policy(321)).unwrap();
            let base = net
                .forward_values(&features, &edges, ForwardOptions::default())
                .unwrap();
            for &lambda in &[0.5, 2.0, 10.0] {
                for l in 0..2 {
                    for i in [0, 3] {
                        let mut scaled = net.clone();
                        rescale_hidden_unit(&mut scaled, l, i, lambda).unwrap();
                        let out = scaled
                            .forward_values(&features, &edges, ForwardOptions::default())
                            .unwrap();
                        for (x, y) in out.data().iter().zip(base.data()) {
                            let rel = (x - y).abs() / y.abs().max(1e-12);
                            assert!(
                                rel < 1e-10,
                                "{kind:?} lambda {lambda} layer {l} unit {i}: rel {rel}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn gate_attention_rescaling_leaves_logits_unchanged() {
        let (g, features, _) = random_instance(8, 3, 2, 321);
        let edges = EdgeIndex::new(&g);
        let spec = NetworkSpec::uniform(LayerKind::Gate, 3, 4, 2).unwrap();
        let net = init_network(&spec, 3, &xavier_policy(33)).unwrap();
        let base = net
            .forward_values(&features, &edges, ForwardOptions::default())
            .unwrap();
        for &lambda in &[0.5, 2.0, 10.0] {
            for l in 0..3 {
                let mut scaled = net.clone();
                rescale_gate_attention_unit(&mut scaled, l, 1, lambda).unwrap();
                let out = scaled
                    .forward_values(&features, &edges, ForwardOptions::default())
                    .unwrap();
                for (x, y) in out.data().iter().zip(base.data()) {
                    let rel = (x - y).abs() / y.abs().max(1e-12);
                    assert!(rel < 1e-10, "lambda {lambda} layer {l}: rel {rel}");
                }
            }
        }
        // Shared layers reject the transform.
        let spec = NetworkSpec::uniform(LayerKind::GateS, 2, 4, 2).unwrap();
        let mut shared = init_network(&spec, 3, &xavier_policy(34)).unwrap();
        assert!(matches!(
            rescale_gate_attention_unit(&mut shared, 0, 0, 2.0),
            Err(ConservationError::WrongKind { .. })
        ));
    }

    #[test]
    fn relative_change_convention() {
        let spec = NetworkSpec::uniform(LayerKind::Mlp, 1, 2, 2).unwrap();
        let mut net = init_network(&spec, 1, &xavier_policy(1)).unwrap();
        let w = net.layers[0].aggregation_matrix();
        net.store.tensor_mut(w).data_mut().copy_from_slice(&[2.0, 0.0]);
        let grads = vec![Tensor::col_vec(&[1.0, 5.0])];
        let rc = relative_change(&net, &grads);
        // theta=2, grad=1 -> 0.5; theta=0 -> 0 by convention.
        assert_eq!(rc[0].max_abs, 0.5);
        assert_eq!(rc[0].mean_abs, 0.25);
    }

    #[test]
    fn error_paths() {
        let spec = NetworkSpec::uniform(LayerKind::Gate, 2, 4, 2).unwrap();
        let net = init_network(&spec, 3, &xavier_policy(2)).unwrap();
        let grads: Vec<Tensor> = net
            .store
            .ids()
            .map(|id| {
                let (r, c) = net.store.tensor(id).shape();
                Tensor::zeros(r, c)
            })
            .collect();
        assert!(matches!(
            coupling_residuals(&net, &grads, 1),
            Err(ConservationError::NotLastCoupled { .. })
        ));
        assert!(matches!(
            coupling_residuals(&net, &grads, 9),
            Err(ConservationError::LayerOutOfRange { .. })
        ));
        assert!(matches!(
            conservation_residual_gat(&net, &grads, 0),
            Err(ConservationError::WrongKind { .. })
        ));
        assert!(matches!(
            coupling_residuals(&net, &grads[..1], 0),
            Err(ConservationError::GradientCount { .. })
        ));
        let mut net2 = net.clone();
        assert!(matches!(
            rescale_hidden_unit(&mut net2, 0, 99, 2.0),
            Err(ConservationError::UnitOutOfRange { .. })
        ));
    }
}
