//! Full-batch Adam training with per-epoch traces.
//!
//! Training is full-batch by construction: the conservation laws are
//! statements about the gradient of the complete loss, and sampling would
//! break their exactness. Conservation residuals are computed on the
//! gradients *before* the Adam update at the checked step.
//!
//! Epoch convention: metrics at epoch `e` describe the parameters after `e`
//! updates; `max_epochs` updates happen in total, so traces span epochs
//! `0..=max_epochs` (subject to the eval cadence).

use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::conservation::{
    coupling_residuals, gate_eq8_residuals, relative_change, Eq8Outcome, UnitResidual,
};
use crate::diagnostics::alpha_vv;
use crate::graph::EdgeIndex;
use crate::init::{init_network, InitPolicy};
use crate::layers::{ForwardOptions, LayerError, LayerParamIds, Network, NetworkSpec};
use crate::optim::{Adam, AdamMoments, OptimError};
use crate::synth::Dataset;
use crate::tape::{Tape, TapeError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Number of Adam updates.
    pub max_epochs: usize,
    /// Cadence for recording epoch metrics (always includes first and last).
    pub eval_every: usize,
    /// Cadence for alpha_vv snapshots; 0 disables (final epoch still traced
    /// when enabled).
    pub trace_alpha_every: usize,
    /// Cadence for conservation-law checks; 0 disables.
    pub conservation_check_every: usize,
    pub adam: AdamMoments,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.005,
            max_epochs: 10_000,
            eval_every: 1,
            trace_alpha_every: 0,
            conservation_check_every: 0,
            adam: AdamMoments::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlphaSnapshot {
    pub epoch: usize,
    pub layer: usize,
    /// One value per node; exactly 1.0 for every node of an MLP layer.
    pub alpha_vv: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConservationSnapshot {
    pub epoch: usize,
    pub residuals: Vec<UnitResidual>,
    /// Layers whose within-layer law is not applicable (shared weights).
    pub eq8_not_applicable: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelChangeSnapshot {
    pub epoch: usize,
    /// (parameter name, max |grad/theta|, mean |grad/theta|).
    pub per_param: Vec<(String, f64, f64)>,
}

/// Reporting conventions: the paper's tables quote test accuracy at the
/// epoch of minimum train loss and at the epoch of maximum validation
/// accuracy; both are recorded (first hit wins ties), along with bests and
/// final-epoch values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub min_train_loss: f64,
    pub epoch_of_min_train_loss: usize,
    pub test_acc_at_min_train_loss: f64,
    pub train_acc_at_min_train_loss: f64,
    pub max_val_acc: f64,
    pub epoch_of_max_val_acc: usize,
    pub test_acc_at_max_val_acc: f64,
    pub best_train_acc: f64,
    pub best_test_acc: f64,
    pub final_loss: f64,
    pub final_train_acc: f64,
    pub final_val_acc: f64,
    pub final_test_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainTrace {
    pub epochs: Vec<EpochMetrics>,
    pub alpha: Vec<AlphaSnapshot>,
    pub conservation: Vec<ConservationSnapshot>,
    pub rel_change: Vec<RelChangeSnapshot>,
    pub summary: TrainSummary,
    pub diverged: bool,
    pub diverged_at: Option<usize>,
}

pub struct TrainOutcome {
    pub trace: TrainTrace,
    pub network: Network,
    pub final_logits: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainError {
    Layer(LayerError),
    Tape(TapeError),
    Optim(OptimError),
    MasksDoNotPartition,
    EmptyTrainMask,
    LabelOutOfRange { node: usize, label: usize, classes: usize },
    BadConfig(&'static str),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Layer(e) => write!(f, "{e}"),
            TrainError::Tape(e) => write!(f, "{e}"),
            TrainError::Optim(e) => write!(f, "{e}"),
            TrainError::MasksDoNotPartition => {
                write!(f, "train/val/test masks do not partition the nodes")
            }
            TrainError::EmptyTrainMask => write!(f, "train mask selects no nodes"),
            TrainError::LabelOutOfRange {
                node,
                label,
                classes,
            } => write!(f, "label {label} at node {node} exceeds {classes} classes"),
            TrainError::BadConfig(msg) => write!(f, "bad config: {msg}"),
        }
    }
}

impl core::error::Error for TrainError {}

impl From<LayerError> for TrainError {
    fn from(e: LayerError) -> Self {
        TrainError::Layer(e)
    }
}

impl From<TapeError> for TrainError {
    fn from(e: TapeError) -> Self {
        TrainError::Tape(e)
    }
}

impl From<OptimError> for TrainError {
    fn from(e: OptimError) -> Self {
        TrainError::Optim(e)
    }
}

/// Fraction of masked rows whose argmax logit (first maximum on ties)
/// equals the label.
pub fn masked_accuracy(logits: &Tensor, labels: &[usize], mask: &[bool]) -> f64 {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (row, (&label, &m)) in labels.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        total += 1;
        let values = logits.row(row);
        let mut arg = 0;
        let mut best = values[0];
        for (c, &v) in values.iter().enumerate().skip(1) {
            if v > best {
                best = v;
                arg = c;
            }
        }
        if arg == label {
            correct += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}

fn cadence_hit(epoch: usize, every: usize, last: usize) -> bool {
    if every == 0 {
        return false;
    }
    epoch.is_multiple_of(every) || epoch == last
}

/// Initialize per `policy` and train on `dataset` with full-batch Adam.
pub fn train(
    spec: &NetworkSpec,
    policy: &InitPolicy,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if cfg.learning_rate <= 0.0 {
        return Err(TrainError::BadConfig("learning_rate must be positive"));
    }
    if cfg.eval_every == 0 {
        return Err(TrainError::BadConfig("eval_every must be at least 1"));
    }
    if !dataset.masks_partition_nodes() {
        return Err(TrainError::MasksDoNotPartition);
    }
    if !dataset.train_mask.iter().any(|&m| m) {
        return Err(TrainError::EmptyTrainMask);
    }
    let classes = spec.output_width();
    for (node, &label) in dataset.labels.iter().enumerate() {
        if label >= classes {
            return Err(TrainError::LabelOutOfRange {
                node,
                label,
                classes,
            });
        }
    }

    let mut network = init_network(spec, dataset.features.cols(), policy)?;
    let edges = EdgeIndex::new(&dataset.graph);
    let labels = Rc::new(dataset.labels.clone());
    let train_mask = Rc::new(dataset.train_mask.clone());
    let mut adam = Adam::new(&network.store, cfg.learning_rate, cfg.adam);

    let mut epochs = Vec::new();
    let mut alpha_snaps = Vec::new();
    let mut conservation_snaps = Vec::new();
    let mut rel_change_snaps = Vec::new();
    let mut diverged = false;
    let mut diverged_at = None;
    let mut final_logits = Tensor::zeros(dataset.graph.num_nodes(), classes);

    let last_epoch = cfg.max_epochs;
    for epoch in 0..=last_epoch {
        let mut tape = Tape::new();
        let trace = network.forward(
            &mut tape,
            &dataset.features,
            &edges,
            ForwardOptions::default(),
        )?;
        let loss_node =
            tape.softmax_cross_entropy(trace.logits, labels.clone(), train_mask.clone())?;
        let loss = tape.value(loss_node).scalar_value();
        if !loss.is_finite() {
            diverged = true;
            diverged_at = Some(epoch);
            break;
        }

        let logits = tape.value(trace.logits);
        if cadence_hit(epoch, cfg.eval_every, last_epoch) {
            epochs.push(EpochMetrics {
                epoch,
                loss,
                train_acc: masked_accuracy(logits, &dataset.labels, &dataset.train_mask),
                val_acc: masked_accuracy(logits, &dataset.labels, &dataset.val_mask),
                test_acc: masked_accuracy(logits, &dataset.labels, &dataset.test_mask),
            });
        }
        if cadence_hit(epoch, cfg.trace_alpha_every, last_epoch) {
            for (layer, alpha_node) in trace.alpha.iter().enumerate() {
                let values = match alpha_node {
                    Some(node) => alpha_vv(tape.value(*node), &edges)
                        .expect("training graphs carry self-loops"),
                    None => alloc::vec![1.0; dataset.graph.num_nodes()],
                };
                alpha_snaps.push(AlphaSnapshot {
                    epoch,
                    layer,
                    alpha_vv: values,
                });
            }
        }
        if epoch == last_epoch {
            final_logits = logits.clone();
            break;
        }

        let grads_by_node = tape.backward(loss_node)?;
        let grads: Vec<Tensor> = network
            .store
            .ids()
            .map(|id| grads_by_node.get(trace.param_nodes[id.0]))
            .collect();

        let check_conservation = cadence_hit(epoch, cfg.conservation_check_every, last_epoch);
        if check_conservation {
            let mut residuals = Vec::new();
            for l in 0..network.depth().saturating_sub(1) {
                residuals.extend(coupling_residuals(&network, &grads, l).expect("hidden layer"));
            }
            let mut eq8_na = Vec::new();
            for l in 0..network.depth() {
                if matches!(network.layers[l], LayerParamIds::Gate { .. }) {
                    match gate_eq8_residuals(&network, &grads, l).expect("gate layer") {
                        Eq8Outcome::Applicable(rs) => residuals.extend(rs),
                        Eq8Outcome::NotApplicableShared => eq8_na.push(l),
                    }
                }
            }
            conservation_snaps.push(ConservationSnapshot {
                epoch,
                residuals,
                eq8_not_applicable: eq8_na,
            });
        }
        if check_conservation || epoch == 0 || epoch + 1 == last_epoch {
            let per_param = relative_change(&network, &grads)
                .into_iter()
                .map(|rc| {
                    (
                        String::from(network.store.name(rc.param)),
                        rc.max_abs,
                        rc.mean_abs,
                    )
                })
                .collect();
            rel_change_snaps.push(RelChangeSnapshot { epoch, per_param });
        }

        if let Err(e) = adam.step(&mut network.store, &grads) {
            match e {
                OptimError::NonFiniteGradient { .. } => {
                    diverged = true;
                    diverged_at = Some(epoch);
                    break;
                }
                other => return Err(other.into()),
            }
        }
    }

    let summary = summarize(&epochs);
    Ok(TrainOutcome {
        trace: TrainTrace {
            epochs,
            alpha: alpha_snaps,
            conservation: conservation_snaps,
            rel_change: rel_change_snaps,
            summary,
            diverged,
            diverged_at,
        },
        network,
        final_logits,
    })
}

fn summarize(epochs: &[EpochMetrics]) -> TrainSummary {
    let mut s = TrainSummary {
        epochs_run: epochs.len(),
        min_train_loss: f64::INFINITY,
        epoch_of_min_train_loss: 0,
        test_acc_at_min_train_loss: 0.0,
        train_acc_at_min_train_loss: 0.0,
        max_val_acc: 0.0,
        epoch_of_max_val_acc: 0,
        test_acc_at_max_val_acc: 0.0,
        best_train_acc: 0.0,
        best_test_acc: 0.0,
        final_loss: f64::NAN,
        final_train_acc: 0.0,
        final_val_acc: 0.0,
        final_test_acc: 0.0,
    };
    for m in epochs {
        if m.loss < s.min_train_loss {
            s.min_train_loss = m.loss;
            s.epoch_of_min_train_loss = m.epoch;
            s.test_acc_at_min_train_loss = m.test_acc;
            s.train_acc_at_min_train_loss = m.train_acc;
        }
        if m.val_acc > s.max_val_acc {
            s.max_val_acc = m.val_acc;
            s.epoch_of_max_val_acc = m.epoch;
            s.test_acc_at_max_val_acc = m.test_acc;
        }
        if m.train_acc > s.best_train_acc {
            s.best_train_acc = m.train_acc;
        }
        if m.test_acc > s.best_test_acc {
            s.best_test_acc = m.test_acc;
        }
    }
    if let Some(last) = epochs.last() {
        s.final_loss = last.loss;
        s.final_train_acc = last.train_acc;
        s.final_val_acc = last.val_acc;
        s.final_test_acc = last.test_acc;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::init::InitPolicy;
    use crate::layers::LayerKind;
    use crate::synth::gen_self_sufficient;

    fn tiny_dataset(seed: u64) -> Dataset {
        let g = Graph::erdos_renyi(24, 0.15, seed).unwrap();
        gen_self_sufficient(&g, 2, seed).unwrap()
    }

    fn quick_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            max_epochs: epochs,
            learning_rate: 0.01,
            trace_alpha_every: 5,
            conservation_check_every: 5,
            ..Default::default()
        }
    }

    #[test]
    fn zero_learning_rate_is_rejected() {
        let ds = tiny_dataset(1);
        let spec = NetworkSpec::uniform(LayerKind::Gate, 1, 4, 2).unwrap();
        let policy = InitPolicy::standard_for(LayerKind::Gate, 3);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..quick_cfg(5)
        };
        assert!(matches!(
            train(&spec, &policy, &ds, &cfg),
            Err(TrainError::BadConfig(_))
        ));
    }

    #[test]
    fn training_is_deterministic() {
        let ds = tiny_dataset(7);
        let spec = NetworkSpec::uniform(LayerKind::GateS, 2, 4, 2).unwrap();
        let policy = InitPolicy::standard_for(LayerKind::GateS, 9);
        let cfg = quick_cfg(20);
        let a = train(&spec, &policy, &ds, &cfg).unwrap();
        let b = train(&spec, &policy, &ds, &cfg).unwrap();
        assert_eq!(a.trace.epochs, b.trace.epochs);
        assert_eq!(a.final_logits, b.final_logits);
        for id in a.network.store.ids() {
            assert_eq!(a.network.store.tensor(id), b.network.store.tensor(id));
        }
    }

    #[test]
    fn loss_decreases_and_accuracy_in_range() {
        let ds = tiny_dataset(3);
        let spec = NetworkSpec::uniform(LayerKind::Gate, 2, 8, 2).unwrap();
        let policy = InitPolicy::standard_for(LayerKind::Gate, 5);
        let out = train(&spec, &policy, &ds, &quick_cfg(60)).unwrap();
        assert!(!out.trace.diverged);
        let first = out.trace.epochs.first().unwrap();
        let last = out.trace.epochs.last().unwrap();
        assert!(last.loss < first.loss);
        for m in &out.trace.epochs {
            assert!(m.loss.is_finite());
            for acc in [m.train_acc, m.val_acc, m.test_acc] {
                assert!((0.0..=1.0).contains(&acc));
            }
        }
        // Epoch indices strictly increase.
        for pair in out.trace.epochs.windows(2) {
            assert!(pair[0].epoch < pair[1].epoch);
        }
    }

    #[test]
    fn conservation_residuals_stay_exact_across_training() {
        // The laws hold at every checked step over the whole run; they are
        // identities of the loss gradient, independent of Adam.
        let ds = tiny_dataset(11);
        let spec = NetworkSpec::uniform(LayerKind::Gate, 3, 6, 2).unwrap();
        let policy = InitPolicy::standard_for(LayerKind::Gate, 13);
        let cfg = TrainConfig {
            conservation_check_every: 10,
            ..quick_cfg(200)
        };
        let out = train(&spec, &policy, &ds, &cfg).unwrap();
        assert!(!out.trace.conservation.is_empty());
        for snap in &out.trace.conservation {
            for r in &snap.residuals {
                assert!(
                    r.relative_residual() < 1e-8,
                    "epoch {} layer {} unit {} law {}: {}",
                    snap.epoch,
                    r.layer,
                    r.unit,
                    r.law.name(),
                    r.relative_residual()
                );
            }
        }
    }

    #[test]
    fn alpha_snapshots_cover_every_layer_and_stay_normalized() {
        let ds = tiny_dataset(19);
        let spec = NetworkSpec::alternating(LayerKind::Gate, 3, 4, 2).unwrap();
        let policy = InitPolicy::standard_for(LayerKind::Gate, 23);
        let out = train(&spec, &policy, &ds, &quick_cfg(10)).unwrap();
        assert!(!out.trace.alpha.is_empty());
        let n = ds.graph.num_nodes();
        for snap in &out.trace.alpha {
            assert_eq!(snap.alpha_vv.len(), n);
            for &a in &snap.alpha_vv {
                assert!((0.0..=1.0 + 1e-12).contains(&a));
            }
            if snap.layer == 1 {
                // MLP layer reports exactly 1.
                assert!(snap.alpha_vv.iter().all(|&a| a == 1.0));
            }
        }
    }

    #[test]
    fn rel_change_convention_and_bookends() {
        let ds = tiny_dataset(29);
        let spec = NetworkSpec::uniform(LayerKind::Gat, 2, 4, 2).unwrap();
        let policy = InitPolicy::standard_for(LayerKind::Gat, 31);
        let cfg = TrainConfig {
            conservation_check_every: 0,
            ..quick_cfg(40)
        };
        let out = train(&spec, &policy, &ds, &cfg).unwrap();
        // Recorded at least at epoch 0 and the last gradient epoch.
        let epochs: Vec<usize> = out.trace.rel_change.iter().map(|s| s.epoch).collect();
        assert!(epochs.contains(&0));
        assert!(epochs.contains(&39));
    }

    #[test]
    fn attention_relative_change_shrinks_as_magnitudes_grow() {
        // On the random-label task the attention norms grow while training
        // converges, so the relative change grad/theta of the attention
        // vector ends far below its starting point.
        let ds = tiny_dataset(41);
        let spec = NetworkSpec::uniform(LayerKind::Gat, 2, 6, 2).unwrap();
        let policy = InitPolicy::standard_for(LayerKind::Gat, 43);
        let cfg = TrainConfig {
            conservation_check_every: 0,
            ..quick_cfg(400)
        };
        let out = train(&spec, &policy, &ds, &cfg).unwrap();
        let mean_delta_a = |epoch: usize| -> f64 {
            let snap = out
                .trace
                .rel_change
                .iter()
                .find(|s| s.epoch == epoch)
                .unwrap();
            snap.per_param
                .iter()
                .filter(|(name, _, _)| name.ends_with(".a"))
                .map(|(_, _, mean)| *mean)
                .sum()
        };
        let first = mean_delta_a(0);
        let last = mean_delta_a(399);
        assert!(
            last < first,
            "mean |grad/theta| of attention did not shrink: {first} -> {last}"
        );
    }

    #[test]
    fn summary_conventions_pick_first_extreme() {
        let metrics = vec![
            EpochMetrics {
                epoch: 0,
                loss: 1.0,
                train_acc: 0.2,
                val_acc: 0.5,
                test_acc: 0.3,
            },
            EpochMetrics {
                epoch: 1,
                loss: 0.4,
                train_acc: 0.6,
                val_acc: 0.7,
                test_acc: 0.8,
            },
            EpochMetrics {
                epoch: 2,
                loss: 0.4,
                train_acc: 0.9,
                val_acc: 0.7,
                test_acc: 0.6,
            },
        ];
        let s = summarize(&metrics);
        assert_eq!(s.epoch_of_min_train_loss, 1);
        assert_eq!(s.test_acc_at_min_train_loss, 0.8);
        assert_eq!(s.epoch_of_max_val_acc, 1);
        assert_eq!(s.test_acc_at_max_val_acc, 0.8);
        assert_eq!(s.best_train_acc, 0.9);
        assert_eq!(s.final_test_acc, 0.6);
    }
}
