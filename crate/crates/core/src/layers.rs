//! GAT, GATE, and perceptron layers, and their assembly into networks.
//!
//! A layer updates node representations by attention-weighted aggregation
//! over the (self-loop-inclusive) neighborhood:
//!
//! ```text
//! h'_v = phi( sum_{u in N(v)} alpha_uv * M h_u )
//! alpha_uv = softmax over u in N(v) of e_uv
//! ```
//!
//! with the edge score depending on the architecture:
//!
//! * GAT:  `e_uv = a^T phi_s(W_s h_u + W_t h_v)`, aggregation matrix `W_s`;
//!   the shared variant GAT_S ties `W_t = W_s`.
//! * GATE: `e_uv = a_s^T phi_s(U h_u + V h_v)` for `u != v` and
//!   `e_vv = a_t^T phi_s(U h_v + V h_v)`, aggregation matrix `W`; the shared
//!   variant GATE_S ties `W = U = V`. The separate self-score vector `a_t`
//!   is what lets a layer drive `alpha_vv -> 1` and act as a perceptron.
//! * MLP:  `h'_v = phi(W h_v)`, no graph access (`alpha_vv` is exactly 1).
//!
//! Layer code never inserts self-loops on its own: generators deliberately
//! evaluate attention layers on self-loop-free graphs, so a missing self-loop
//! is either an error (training networks) or an explicit opt-out
//! ([`ForwardOptions`]).

use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::graph::EdgeIndex;
use crate::tape::{NodeId, Tape, TapeError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum LayerKind {
    Gat,
    GatS,
    Gate,
    GateS,
    Mlp,
}

impl LayerKind {
    pub fn is_attention(self) -> bool {
        !matches!(self, LayerKind::Mlp)
    }

    pub fn is_shared(self) -> bool {
        matches!(self, LayerKind::GatS | LayerKind::GateS)
    }

    pub fn is_gate(self) -> bool {
        matches!(self, LayerKind::Gate | LayerKind::GateS)
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Gat => "gat",
            LayerKind::GatS => "gat_s",
            LayerKind::Gate => "gate",
            LayerKind::GateS => "gate_s",
            LayerKind::Mlp => "mlp",
        }
    }
}

/// Positive-homogeneous activations; `Relu` is `LeakyRelu(0.0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
}

impl Activation {
    pub fn slope(self) -> f64 {
        match self {
            Activation::Relu => 0.0,
            Activation::LeakyRelu(s) => s,
        }
    }

    pub fn apply(self, tape: &mut Tape, x: NodeId) -> NodeId {
        tape.leaky_relu(x, self.slope())
    }
}

/// One layer: output width, hidden activation, and score activation.
///
/// Defaults follow the standard setups: GAT scores and hidden units use
/// LeakyReLU(0.2); GATE scores use ReLU (keeps the sign of `a_s`/`a_t`
/// interpretable) and GATE/MLP hidden units use ReLU.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub width: usize,
    pub activation: Activation,
    pub score_activation: Activation,
}

impl LayerSpec {
    pub fn new(kind: LayerKind, width: usize) -> Self {
        let (activation, score_activation) = match kind {
            LayerKind::Gat | LayerKind::GatS => {
                (Activation::LeakyRelu(0.2), Activation::LeakyRelu(0.2))
            }
            LayerKind::Gate | LayerKind::GateS | LayerKind::Mlp => {
                (Activation::Relu, Activation::Relu)
            }
        };
        Self {
            kind,
            width,
            activation,
            score_activation,
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_score_activation(mut self, score_activation: Activation) -> Self {
        self.score_activation = score_activation;
        self
    }
}

/// Ordered layer descriptors; the final layer emits raw logits (its
/// activation is skipped unless a forward explicitly opts in).
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self, LayerError> {
        if layers.is_empty() {
            return Err(LayerError::EmptySpec);
        }
        if let Some(l) = layers.iter().position(|l| l.width == 0) {
            return Err(LayerError::ZeroWidth { layer: l });
        }
        Ok(Self { layers })
    }

    /// Uniform stack: `depth` layers of one kind, hidden width `width`,
    /// final width `classes`.
    pub fn uniform(
        kind: LayerKind,
        depth: usize,
        width: usize,
        classes: usize,
    ) -> Result<Self, LayerError> {
        if depth == 0 {
            return Err(LayerError::EmptySpec);
        }
        let layers = (0..depth)
            .map(|l| LayerSpec::new(kind, if l + 1 == depth { classes } else { width }))
            .collect();
        Self::new(layers)
    }

    /// Alternating attention/perceptron stack starting with the attention
    /// kind: [kind, mlp, kind, mlp, ...].
    pub fn alternating(
        kind: LayerKind,
        depth: usize,
        width: usize,
        classes: usize,
    ) -> Result<Self, LayerError> {
        if depth == 0 {
            return Err(LayerError::EmptySpec);
        }
        let layers = (0..depth)
            .map(|l| {
                let k = if l % 2 == 0 { kind } else { LayerKind::Mlp };
                LayerSpec::new(k, if l + 1 == depth { classes } else { width })
            })
            .collect();
        Self::new(layers)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map(|l| l.width).unwrap_or(0)
    }

    /// Input width of layer `l` given the feature dimension.
    pub fn input_width(&self, l: usize, d_in: usize) -> usize {
        if l == 0 {
            d_in
        } else {
            self.layers[l - 1].width
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Flat parameter storage; sharing is expressed by layers referencing the
/// same [`ParamId`], which automatically merges gradient accumulation.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
    names: Vec<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: String, tensor: Tensor) -> ParamId {
        self.tensors.push(tensor);
        self.names.push(name);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }
}

/// Parameter bundle of one layer. Shared variants alias a single id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerParamIds {
    Gat {
        w_s: ParamId,
        w_t: ParamId,
        a: ParamId,
        shared: bool,
    },
    Gate {
        w: ParamId,
        u: ParamId,
        v: ParamId,
        a_s: ParamId,
        a_t: ParamId,
        shared: bool,
    },
    Mlp {
        w: ParamId,
    },
}

impl LayerParamIds {
    /// The matrix applied in the aggregation step (the layer's transform of
    /// source features).
    pub fn aggregation_matrix(&self) -> ParamId {
        match *self {
            LayerParamIds::Gat { w_s, .. } => w_s,
            LayerParamIds::Gate { w, .. } => w,
            LayerParamIds::Mlp { w } => w,
        }
    }

    /// Distinct parameter ids owned by this layer.
    pub fn param_ids(&self) -> Vec<ParamId> {
        match *self {
            LayerParamIds::Gat {
                w_s,
                w_t,
                a,
                shared,
            } => {
                if shared {
                    vec![w_s, a]
                } else {
                    vec![w_s, w_t, a]
                }
            }
            LayerParamIds::Gate {
                w,
                u,
                v,
                a_s,
                a_t,
                shared,
            } => {
                if shared {
                    vec![w, a_s, a_t]
                } else {
                    vec![w, u, v, a_s, a_t]
                }
            }
            LayerParamIds::Mlp { w } => vec![w],
        }
    }
}

/// A network: spec, parameter store, and the per-layer id bundles.
#[derive(Debug, Clone)]
pub struct Network {
    pub spec: NetworkSpec,
    pub store: ParamStore,
    pub layers: Vec<LayerParamIds>,
    pub d_in: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerError {
    EmptySpec,
    ZeroWidth {
        layer: usize,
    },
    WidthMismatch {
        layer: usize,
        expected: usize,
        got: usize,
    },
    MissingSelfLoops,
    Tape(TapeError),
}

impl fmt::Display for LayerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerError::EmptySpec => write!(f, "network spec has no layers"),
            LayerError::ZeroWidth { layer } => write!(f, "layer {layer} has width 0"),
            LayerError::WidthMismatch {
                layer,
                expected,
                got,
            } => write!(
                f,
                "layer {layer}: expected width {expected}, got {got}"
            ),
            LayerError::MissingSelfLoops => {
                write!(
                    f,
                    "attention layer requires self-loops (alpha_vv undefined without them)"
                )
            }
            LayerError::Tape(e) => write!(f, "tape error: {e}"),
        }
    }
}

impl core::error::Error for LayerError {}

impl From<TapeError> for LayerError {
    fn from(e: TapeError) -> Self {
        LayerError::Tape(e)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Apply the final layer's activation instead of emitting raw logits.
    /// Classifiers keep this off; the label-generating network turns it on.
    pub apply_final_activation: bool,
    /// Evaluate on graphs without full self-loops; nodes with empty
    /// neighborhoods produce zero rows instead of errors.
    pub allow_missing_self_loops: bool,
}

/// Handles into the tape produced by a network forward pass.
pub struct ForwardTrace {
    pub logits: NodeId,
    /// Per-layer attention coefficients over directed edges; `None` for MLP
    /// layers (their alpha_vv is 1 by definition).
    pub alpha: Vec<Option<NodeId>>,
    /// Tape leaf for each parameter, indexed by `ParamId`.
    pub param_nodes: Vec<NodeId>,
    /// Post-activation output of every layer (final entry == logits).
    pub layer_outputs: Vec<NodeId>,
}

/// GAT edge scores `e_uv = a^T phi_s(W_s h_u + W_t h_v)` from precomputed
/// transforms `H W_s^T` and `H W_t^T`, over directed edges incl. self-loops.
pub fn gat_edge_scores(
    tape: &mut Tape,
    w_s_transform: NodeId,
    w_t_transform: NodeId,
    a: NodeId,
    score_activation: Activation,
    src: &Rc<Vec<usize>>,
    tgt: &Rc<Vec<usize>>,
) -> Result<NodeId, LayerError> {
    let s_src = tape.gather_rows(w_s_transform, src.clone())?;
    let t_tgt = tape.gather_rows(w_t_transform, tgt.clone())?;
    let pre = tape.add(s_src, t_tgt)?;
    let phi = score_activation.apply(tape, pre);
    Ok(tape.matmul(phi, a)?)
}

/// GATE edge scores: `a_s` weighs cross edges, `a_t` weighs self-loops.
#[allow(clippy::too_many_arguments)]
pub fn gate_edge_scores(
    tape: &mut Tape,
    u_transform: NodeId,
    v_transform: NodeId,
    a_s: NodeId,
    a_t: NodeId,
    score_activation: Activation,
    src: &Rc<Vec<usize>>,
    tgt: &Rc<Vec<usize>>,
    self_mask: &Rc<Vec<bool>>,
) -> Result<NodeId, LayerError> {
    let u_src = tape.gather_rows(u_transform, src.clone())?;
    let v_tgt = tape.gather_rows(v_transform, tgt.clone())?;
    let pre = tape.add(u_src, v_tgt)?;
    let phi = score_activation.apply(tape, pre);
    let cross = tape.matmul(phi, a_s)?;
    let own = tape.matmul(phi, a_t)?;
    Ok(tape.select_by_mask(cross, own, self_mask.clone())?)
}

/// Softmax-normalized attention over each target's neighborhood.
pub fn attention_coefficients(
    tape: &mut Tape,
    scores: NodeId,
    seg: &Rc<Vec<usize>>,
    num_nodes: usize,
    allow_empty: bool,
) -> Result<NodeId, LayerError> {
    let alpha = if allow_empty {
        tape.segment_softmax_allow_empty(scores, seg.clone(), num_nodes)?
    } else {
        tape.segment_softmax(scores, seg.clone(), num_nodes)?
    };
    Ok(alpha)
}

impl Network {
    /// Assemble a network from a spec and a ready parameter store. Checks
    /// that every parameter has the shape the spec implies.
    pub fn from_parts(
        spec: NetworkSpec,
        store: ParamStore,
        layers: Vec<LayerParamIds>,
        d_in: usize,
    ) -> Result<Self, LayerError> {
        let net = Self {
            spec,
            store,
            layers,
            d_in,
        };
        net.validate_shapes()?;
        Ok(net)
    }

    fn validate_shapes(&self) -> Result<(), LayerError> {
        for (l, (ls, ids)) in self.spec.layers.iter().zip(&self.layers).enumerate() {
            let d_in = self.spec.input_width(l, self.d_in);
            let d_out = ls.width;
            let expect = |id: ParamId, rows: usize, cols: usize| -> Result<(), LayerError> {
                if self.store.tensor(id).shape() != (rows, cols) {
                    return Err(LayerError::WidthMismatch {
                        layer: l,
                        expected: rows,
                        got: self.store.tensor(id).rows(),
                    });
                }
                Ok(())
            };
            match *ids {
                LayerParamIds::Gat { w_s, w_t, a, .. } => {
                    expect(w_s, d_out, d_in)?;
                    expect(w_t, d_out, d_in)?;
                    expect(a, d_out, 1)?;
                }
                LayerParamIds::Gate {
                    w, u, v, a_s, a_t, ..
                } => {
                    expect(w, d_out, d_in)?;
                    expect(u, d_out, d_in)?;
                    expect(v, d_out, d_in)?;
                    expect(a_s, d_out, 1)?;
                    expect(a_t, d_out, 1)?;
                }
                LayerParamIds::Mlp { w } => expect(w, d_out, d_in)?,
            }
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.spec.depth()
    }

    pub fn width(&self, l: usize) -> usize {
        self.spec.layers[l].width
    }

    /// Run the network over `features` on the graph behind `edges`,
    /// recording every primitive onto `tape`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        features: &Tensor,
        edges: &EdgeIndex,
        opts: ForwardOptions,
    ) -> Result<ForwardTrace, LayerError> {
        if features.cols() != self.d_in {
            return Err(LayerError::WidthMismatch {
                layer: 0,
                expected: self.d_in,
                got: features.cols(),
            });
        }
        let needs_attention = self.spec.layers.iter().any(|l| l.kind.is_attention());
        let has_all_self_loops = edges.self_edge.iter().all(|e| e.is_some());
        if needs_attention && !has_all_self_loops && !opts.allow_missing_self_loops {
            return Err(LayerError::MissingSelfLoops);
        }

        let param_nodes: Vec<NodeId> = self
            .store
            .ids()
            .map(|id| tape.leaf(self.store.tensor(id).clone()))
            .collect();
        let src = Rc::new(edges.src.clone());
        let tgt = Rc::new(edges.seg.clone());
        let self_mask = Rc::new(edges.self_mask.clone());
        let n = edges.num_nodes;

        let mut h = tape.leaf(features.clone());
        let mut alpha_per_layer = Vec::with_capacity(self.depth());
        let mut layer_outputs = Vec::with_capacity(self.depth());

        for (l, (ls, ids)) in self.spec.layers.iter().zip(&self.layers).enumerate() {
            let is_final = l + 1 == self.depth();
            // Transforms H M^T, computed once per distinct parameter so the
            // shared variants reuse the exact same tape node.
            let mut cache: Vec<(ParamId, NodeId)> = Vec::new();
            let mut transform = |tape: &mut Tape, pid: ParamId| -> Result<NodeId, LayerError> {
                if let Some(&(_, node)) = cache.iter().find(|(p, _)| *p == pid) {
                    return Ok(node);
                }
                let wt = tape.transpose(param_nodes[pid.0]);
                let node = tape.matmul(h, wt)?;
                cache.push((pid, node));
                Ok(node)
            };

            let (aggregated, alpha) = match *ids {
                LayerParamIds::Mlp { w } => (transform(tape, w)?, None),
                LayerParamIds::Gat { w_s, w_t, a, .. } => {
                    let s = transform(tape, w_s)?;
                    let t = transform(tape, w_t)?;
                    let scores = gat_edge_scores(
                        tape,
                        s,
                        t,
                        param_nodes[a.0],
                        ls.score_activation,
                        &src,
                        &tgt,
                    )?;
                    let alpha = attention_coefficients(
                        tape,
                        scores,
                        &tgt,
                        n,
                        opts.allow_missing_self_loops,
                    )?;
                    let messages = tape.gather_rows(s, src.clone())?;
                    let out = tape.scatter_weighted_sum(messages, alpha, tgt.clone(), n)?;
                    (out, Some(alpha))
                }
                LayerParamIds::Gate {
                    w,
                    u,
                    v,
                    a_s,
                    a_t,
                    ..
                } => {
                    let u_t = transform(tape, u)?;
                    let v_t = transform(tape, v)?;
                    let scores = gate_edge_scores(
                        tape,
                        u_t,
                        v_t,
                        param_nodes[a_s.0],
                        param_nodes[a_t.0],
                        ls.score_activation,
                        &src,
                        &tgt,
                        &self_mask,
                    )?;
                    let alpha = attention_coefficients(
                        tape,
                        scores,
                        &tgt,
                        n,
                        opts.allow_missing_self_loops,
                    )?;
                    let w_node = transform(tape, w)?;
                    let messages = tape.gather_rows(w_node, src.clone())?;
                    let out = tape.scatter_weighted_sum(messages, alpha, tgt.clone(), n)?;
                    (out, Some(alpha))
                }
            };

            h = if is_final && !opts.apply_final_activation {
                aggregated
            } else {
                ls.activation.apply(tape, aggregated)
            };
            alpha_per_layer.push(alpha);
            layer_outputs.push(h);
        }

        Ok(ForwardTrace {
            logits: h,
            alpha: alpha_per_layer,
            param_nodes,
            layer_outputs,
        })
    }

    /// Forward and return just the logits tensor.
    pub fn forward_values(
        &self,
        features: &Tensor,
        edges: &EdgeIndex,
        opts: ForwardOptions,
    ) -> Result<Tensor, LayerError> {
        let mut tape = Tape::new();
        let trace = self.forward(&mut tape, features, edges, opts)?;
        Ok(tape.value(trace.logits).clone())
    }

    pub fn describe(&self) -> String {
        let kinds: Vec<&str> = self.spec.layers.iter().map(|l| l.kind.name()).collect();
        format!("[{}]", kinds.join(","))
    }
}
