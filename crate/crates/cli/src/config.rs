//! Experiment configuration: one JSON document per experiment, archived with
//! its outputs. Validation reports the offending field path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use gatlab_core::init::{AttentionScheme, InitPolicy, MatrixScheme};
use gatlab_core::layers::{Activation, LayerKind, LayerSpec, NetworkSpec};
use gatlab_core::optim::AdamMoments;
use gatlab_core::rng::SplitMix64;
use gatlab_core::train::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    pub sweep: SweepConfig,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Erdős–Rényi structure, uniform random labels, one-hot features.
    SelfSufficientEr {
        n: usize,
        p: f64,
        classes: usize,
        seed: u64,
    },
    /// Gaussian features pushed through a random GAT on the self-loop-free
    /// graph; K-means labels.
    NeighborDependentEr {
        n: usize,
        p: f64,
        dim: usize,
        hops: usize,
        classes: usize,
        seed: u64,
    },
    /// Edge-list structure from disk with original or randomized labels;
    /// features are the one-hot encoding of the labels.
    Files {
        edge_list: PathBuf,
        #[serde(default)]
        labels: Option<PathBuf>,
        label_mode: LabelModeConfig,
        classes: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelModeConfig {
    Original,
    Randomized,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden width for stacks generated from the sweep block.
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default)]
    pub init: InitConfig,
    /// Explicit layer stack; mutually exclusive with sweeping architectures
    /// and depths.
    #[serde(default)]
    pub layers: Option<Vec<LayerConfig>>,
}

fn default_width() -> usize {
    64
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    #[serde(default)]
    pub matrix: Option<MatrixScheme>,
    /// Default is per architecture: zero for GATE kinds, Xavier for GAT.
    #[serde(default)]
    pub attention: Option<AttentionScheme>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub kind: LayerKind,
    pub width: usize,
    #[serde(default)]
    pub activation: Option<Activation>,
    #[serde(default)]
    pub score_activation: Option<Activation>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_one")]
    pub eval_every: usize,
    #[serde(default)]
    pub trace_alpha_every: usize,
    #[serde(default)]
    pub conservation_check_every: usize,
}

fn default_lr() -> f64 {
    0.005
}

fn default_epochs() -> usize {
    10_000
}

fn default_one() -> usize {
    1
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_lr(),
            max_epochs: default_epochs(),
            eval_every: 1,
            trace_alpha_every: 0,
            conservation_check_every: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Architecture names: gat, gat_s, gate, gate_s, mlp, mlp_gat, mlp_gate.
    #[serde(default)]
    pub architectures: Vec<String>,
    #[serde(default)]
    pub depths: Vec<usize>,
    pub seeds: Vec<u64>,
}

/// One resolved training run of the sweep matrix.
#[derive(Debug, Clone)]
pub struct RunPlan {
    pub arch: String,
    pub depth: usize,
    pub seed: u64,
    pub spec: NetworkSpec,
    pub policy: InitPolicy,
    /// Seed handed to the dataset generator. One fixed dataset per config:
    /// sweep seeds rerun training (new split and init) on the same task, so
    /// seed-to-seed variation measures the model, not the task draw.
    pub dataset_seed: u64,
    /// Per-run 2:1:1 split seed.
    pub split_seed: u64,
}

impl RunPlan {
    pub fn dir_name(&self) -> String {
        format!("{}_d{}_s{}", self.arch, self.depth, self.seed)
    }
}

/// Architecture stack builders keyed by the sweep's architecture names.
fn build_spec(arch: &str, depth: usize, width: usize, classes: usize) -> Option<NetworkSpec> {
    let uniform = |kind| NetworkSpec::uniform(kind, depth, width, classes).ok();
    match arch {
        "gat" => uniform(LayerKind::Gat),
        "gat_s" => uniform(LayerKind::GatS),
        "gate" => uniform(LayerKind::Gate),
        "gate_s" => uniform(LayerKind::GateS),
        "mlp" => uniform(LayerKind::Mlp),
        "mlp_gat" => NetworkSpec::alternating(LayerKind::Gat, depth, width, classes).ok(),
        "mlp_gate" => NetworkSpec::alternating(LayerKind::Gate, depth, width, classes).ok(),
        _ => None,
    }
}

fn arch_uses_gate(spec: &NetworkSpec) -> bool {
    spec.layers.iter().any(|l| l.kind.is_gate())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| format!("config parse error: {e}"))
    }

    /// Full validation; errors name the offending field path.
    pub fn validate(&self) -> Result<(), String> {
        match &self.dataset {
            DatasetConfig::SelfSufficientEr { n, p, classes, .. } => {
                if *n < 4 {
                    return Err(format!("dataset.n: need at least 4 nodes, got {n}"));
                }
                if !(0.0..=1.0).contains(p) {
                    return Err(format!("dataset.p: probability {p} outside [0, 1]"));
                }
                if *classes < 2 {
                    return Err(format!("dataset.classes: need at least 2, got {classes}"));
                }
            }
            DatasetConfig::NeighborDependentEr {
                n,
                p,
                dim,
                hops,
                classes,
                ..
            } => {
                if *n < 4 {
                    return Err(format!("dataset.n: need at least 4 nodes, got {n}"));
                }
                if !(0.0..=1.0).contains(p) {
                    return Err(format!("dataset.p: probability {p} outside [0, 1]"));
                }
                if *dim == 0 {
                    return Err("dataset.dim: must be positive".into());
                }
                if *hops == 0 {
                    return Err("dataset.hops: must be positive".into());
                }
                if *classes < 2 {
                    return Err(format!("dataset.classes: need at least 2, got {classes}"));
                }
            }
            DatasetConfig::Files {
                edge_list,
                labels,
                label_mode,
                classes,
                ..
            } => {
                if !edge_list.exists() {
                    return Err(format!(
                        "dataset.edge_list: file not found: {}",
                        edge_list.display()
                    ));
                }
                if *label_mode == LabelModeConfig::Original && labels.is_none() {
                    return Err(
                        "dataset.labels: required when dataset.label_mode is \"original\"".into(),
                    );
                }
                if let Some(path) = labels {
                    if !path.exists() {
                        return Err(format!(
                            "dataset.labels: file not found: {}",
                            path.display()
                        ));
                    }
                }
                if *classes < 2 {
                    return Err(format!("dataset.classes: need at least 2, got {classes}"));
                }
            }
        }

        if self.model.width == 0 {
            return Err("model.width: must be positive".into());
        }
        if let Some(layers) = &self.model.layers {
            if layers.is_empty() {
                return Err("model.layers: must not be empty".into());
            }
            for (i, l) in layers.iter().enumerate() {
                if l.width == 0 {
                    return Err(format!("model.layers[{i}].width: must be positive"));
                }
            }
            if layers.last().expect("non-empty").width != self.classes() {
                return Err(format!(
                    "model.layers[{}].width: final layer must emit {} classes",
                    layers.len() - 1,
                    self.classes()
                ));
            }
            if !self.sweep.architectures.is_empty() || !self.sweep.depths.is_empty() {
                return Err(
                    "sweep.architectures: must be empty when model.layers is explicit".into(),
                );
            }
        } else {
            if self.sweep.architectures.is_empty() {
                return Err("sweep.architectures: at least one architecture required".into());
            }
            for (i, arch) in self.sweep.architectures.iter().enumerate() {
                if build_spec(arch, 1, 1, 2).is_none() {
                    return Err(format!(
                        "sweep.architectures[{i}]: unknown architecture \"{arch}\" \
                         (expected gat, gat_s, gate, gate_s, mlp, mlp_gat, mlp_gate)"
                    ));
                }
            }
            if self.sweep.depths.is_empty() {
                return Err("sweep.depths: at least one depth required".into());
            }
            if let Some(i) = self.sweep.depths.iter().position(|&d| d == 0) {
                return Err(format!("sweep.depths[{i}]: depth must be positive"));
            }
        }
        if self.sweep.seeds.is_empty() {
            return Err("sweep.seeds: at least one seed required".into());
        }

        if self.training.learning_rate <= 0.0 {
            return Err(format!(
                "training.learning_rate: must be positive, got {}",
                self.training.learning_rate
            ));
        }
        if self.training.max_epochs == 0 {
            return Err("training.max_epochs: must be positive".into());
        }
        if self.training.eval_every == 0 {
            return Err("training.eval_every: must be at least 1".into());
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        match &self.dataset {
            DatasetConfig::SelfSufficientEr { classes, .. } => *classes,
            DatasetConfig::NeighborDependentEr { classes, .. } => *classes,
            DatasetConfig::Files { classes, .. } => *classes,
        }
    }

    pub fn dataset_base_seed(&self) -> u64 {
        match &self.dataset {
            DatasetConfig::SelfSufficientEr { seed, .. } => *seed,
            DatasetConfig::NeighborDependentEr { seed, .. } => *seed,
            DatasetConfig::Files { seed, .. } => *seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.training.learning_rate,
            max_epochs: self.training.max_epochs,
            eval_every: self.training.eval_every,
            trace_alpha_every: self.training.trace_alpha_every,
            conservation_check_every: self.training.conservation_check_every,
            adam: AdamMoments::default(),
        }
    }

    /// Expand the sweep into its run matrix:
    /// |architectures| x |depths| x |seeds| entries (explicit layer stacks
    /// count as one architecture at one depth).
    pub fn resolve_runs(&self) -> Result<Vec<RunPlan>, String> {
        self.validate()?;
        let classes = self.classes();
        let mut runs = Vec::new();
        let stacks: Vec<(String, usize, NetworkSpec)> = if let Some(layers) = &self.model.layers {
            let specs = layers
                .iter()
                .map(|l| {
                    let mut s = LayerSpec::new(l.kind, l.width);
                    if let Some(a) = l.activation {
                        s = s.with_activation(a);
                    }
                    if let Some(a) = l.score_activation {
                        s = s.with_score_activation(a);
                    }
                    s
                })
                .collect();
            let spec = NetworkSpec::new(specs).map_err(|e| format!("model.layers: {e}"))?;
            vec![("custom".to_string(), layers.len(), spec)]
        } else {
            let mut stacks = Vec::new();
            for arch in &self.sweep.architectures {
                for &depth in &self.sweep.depths {
                    let spec = build_spec(arch, depth, self.model.width, classes)
                        .ok_or_else(|| format!("sweep.architectures: cannot build {arch}"))?;
                    stacks.push((arch.clone(), depth, spec));
                }
            }
            stacks
        };

        let dataset_seed = self.dataset_base_seed();
        for (arch, depth, spec) in stacks {
            for &seed in &self.sweep.seeds {
                let attention = self.model.init.attention.unwrap_or(if arch_uses_gate(&spec) {
                    AttentionScheme::Zero
                } else {
                    AttentionScheme::XavierUniform
                });
                // Split varies with the sweep seed only, so architectures
                // compared at one seed see identical train/val/test nodes.
                let split_seed = SplitMix64::new(dataset_seed ^ seed.rotate_left(17)).next_u64();
                let mut init_rng = SplitMix64::new(split_seed ^ hash_name(&arch, depth));
                let policy = InitPolicy {
                    matrix: self
                        .model
                        .init
                        .matrix
                        .unwrap_or(MatrixScheme::LooksLinearOrthogonal),
                    attention,
                    seed: init_rng.next_u64(),
                };
                runs.push(RunPlan {
                    arch: arch.clone(),
                    depth,
                    seed,
                    spec: spec.clone(),
                    policy,
                    dataset_seed,
                    split_seed,
                });
            }
        }
        Ok(runs)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        Self::from_json(&text)
    }
}

fn hash_name(arch: &str, depth: usize) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in arch.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h ^= depth as u64;
    h.wrapping_mul(0x1000_0000_01b3)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_config() -> serde_json::Value {
        serde_json::json!({
            "dataset": {"kind": "self_sufficient_er", "n": 100, "p": 0.05, "classes": 2, "seed": 1},
            "model": {"width": 8},
            "training": {"max_epochs": 10},
            "sweep": {"architectures": ["gate", "gat"], "depths": [1, 2], "seeds": [1, 2, 3]},
            "output_dir": "out"
        })
    }

    #[test]
    fn run_matrix_size_is_product() {
        let cfg = ExperimentConfig::from_json(&minimal_config().to_string()).unwrap();
        let runs = cfg.resolve_runs().unwrap();
        assert_eq!(runs.len(), 2 * 2 * 3);
    }

    #[test]
    fn dataset_is_fixed_and_splits_are_paired() {
        let cfg = ExperimentConfig::from_json(&minimal_config().to_string()).unwrap();
        let runs = cfg.resolve_runs().unwrap();
        // One task per config.
        assert!(runs.windows(2).all(|w| w[0].dataset_seed == w[1].dataset_seed));
        // Split is shared across architectures at one sweep seed, differs
        // across seeds.
        for seed in [1u64, 2, 3] {
            let splits: Vec<u64> = runs
                .iter()
                .filter(|r| r.seed == seed)
                .map(|r| r.split_seed)
                .collect();
            assert!(splits.windows(2).all(|w| w[0] == w[1]));
        }
        let s1 = runs.iter().find(|r| r.seed == 1).unwrap().split_seed;
        let s2 = runs.iter().find(|r| r.seed == 2).unwrap().split_seed;
        assert_ne!(s1, s2);
        // Init differs across architectures at the same sweep seed.
        let gate = runs.iter().find(|r| r.arch == "gate" && r.seed == 1).unwrap();
        let gat = runs.iter().find(|r| r.arch == "gat" && r.seed == 1).unwrap();
        assert_ne!(gate.policy.seed, gat.policy.seed);
    }

    #[test]
    fn validation_reports_field_paths() {
        let mut bad = minimal_config();
        bad["dataset"]["p"] = serde_json::json!(1.5);
        let cfg = ExperimentConfig::from_json(&bad.to_string()).unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(err.starts_with("dataset.p:"), "{err}");

        let mut bad = minimal_config();
        bad["sweep"]["architectures"] = serde_json::json!(["gate", "frobnicator"]);
        let cfg = ExperimentConfig::from_json(&bad.to_string()).unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(err.starts_with("sweep.architectures[1]:"), "{err}");

        let mut bad = minimal_config();
        bad["training"]["learning_rate"] = serde_json::json!(0.0);
        let cfg = ExperimentConfig::from_json(&bad.to_string()).unwrap();
        assert!(cfg.validate().unwrap_err().starts_with("training.learning_rate:"));
    }

    #[test]
    fn unknown_fields_are_rejected_at_parse_time() {
        let mut bad = minimal_config();
        bad["model"]["widht"] = serde_json::json!(32);
        assert!(ExperimentConfig::from_json(&bad.to_string()).is_err());
    }

    #[test]
    fn explicit_layers_conflict_with_arch_sweep() {
        let mut cfg_json = minimal_config();
        cfg_json["model"]["layers"] =
            serde_json::json!([{"kind": "gate", "width": 8}, {"kind": "gate", "width": 2}]);
        let cfg = ExperimentConfig::from_json(&cfg_json.to_string()).unwrap();
        assert!(cfg.validate().unwrap_err().starts_with("sweep.architectures:"));

        cfg_json["sweep"]["architectures"] = serde_json::json!([]);
        cfg_json["sweep"]["depths"] = serde_json::json!([]);
        let cfg = ExperimentConfig::from_json(&cfg_json.to_string()).unwrap();
        let runs = cfg.resolve_runs().unwrap();
        assert_eq!(runs.len(), 3);
        assert_eq!(runs[0].arch, "custom");
        assert_eq!(runs[0].spec.depth(), 2);
    }

    #[test]
    fn gate_architectures_default_to_zero_attention() {
        let cfg = ExperimentConfig::from_json(&minimal_config().to_string()).unwrap();
        let runs = cfg.resolve_runs().unwrap();
        for run in &runs {
            let expected = if run.arch == "gate" {
                AttentionScheme::Zero
            } else {
                AttentionScheme::XavierUniform
            };
            assert_eq!(run.policy.attention, expected, "arch {}", run.arch);
        }
    }
}
