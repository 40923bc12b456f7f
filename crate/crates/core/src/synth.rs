//! Synthetic node-classification test bed.
//!
//! Two opposite task families probe how much neighborhood aggregation a
//! model should use:
//!
//! * **Self-sufficient**: labels drawn uniformly at random; features are the
//!   one-hot encoding of the label. A node's own features determine its
//!   label completely, so the optimal aggregation is none.
//! * **Neighbor-dependent**: Gaussian features are pushed through a random
//!   `k`-layer GAT on the *self-loop-free* graph, so each node's embedding
//!   depends only on its k-hop neighbors (never on itself); K-means over
//!   those embeddings yields the labels. The optimal policy is to ignore
//!   the node's own features.
//!
//! Both return graphs *with* self-loops for training, a random 2:1:1
//! train/validation/test split, and provenance describing every seed.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::graph::{EdgeIndex, Graph, GraphError};
use crate::init::{init_network, AttentionScheme, InitPolicy, MatrixScheme};
use crate::layers::{ForwardOptions, LayerError, LayerKind, Network, NetworkSpec};
use crate::math;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub graph: Graph,
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub train_mask: Vec<bool>,
    pub val_mask: Vec<bool>,
    pub test_mask: Vec<bool>,
    pub num_classes: usize,
    pub provenance: Provenance,
}

/// Generator descriptor kept with every dataset: kind, parameters, seeds,
/// and anything the generator had to decide on the fly.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum Provenance {
    SelfSufficient {
        classes: usize,
        label_seed: u64,
        split_seed: u64,
        label_mode: LabelMode,
    },
    NeighborDependent {
        n: usize,
        p: f64,
        dim: usize,
        hops: usize,
        classes: usize,
        seeds: RecipeSeeds,
        /// Nodes isolated in the self-loop-free graph; their labeling
        /// embedding is the zero vector, assigned by nearest centroid.
        isolated_nodes: Vec<usize>,
        /// How many times K-means was re-seeded to avoid a degenerate
        /// (< 1% of nodes) cluster.
        kmeans_reseeds: u32,
        /// Output convention of the labeling network: activations between
        /// layers, raw output at the final layer.
        embedding: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum LabelMode {
    /// Labels supplied by the caller (e.g. a real graph's original labels).
    Original,
    /// Labels drawn uniformly at random.
    Randomized,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SynthError {
    Graph(GraphError),
    Layer(LayerError),
    TooFewClasses { classes: usize },
    TooFewPoints { points: usize, clusters: usize },
    LabelOutOfRange { node: usize, label: usize, classes: usize },
    LabelCount { expected: usize, got: usize },
    DegenerateClustering { attempts: u32 },
    TooFewNodes { nodes: usize },
}

impl fmt::Display for SynthError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SynthError::Graph(e) => write!(f, "graph error: {e}"),
            SynthError::Layer(e) => write!(f, "layer error: {e}"),
            SynthError::TooFewClasses { classes } => {
                write!(f, "need at least 2 classes, got {classes}")
            }
            SynthError::TooFewPoints { points, clusters } => {
                write!(f, "cannot form {clusters} clusters from {points} points")
            }
            SynthError::LabelOutOfRange {
                node,
                label,
                classes,
            } => write!(f, "label {label} at node {node} exceeds {classes} classes"),
            SynthError::LabelCount { expected, got } => {
                write!(f, "expected {expected} labels, got {got}")
            }
            SynthError::DegenerateClustering { attempts } => {
                write!(f, "k-means stayed degenerate after {attempts} re-seeds")
            }
            SynthError::TooFewNodes { nodes } => {
                write!(f, "need at least 4 nodes for a 2:1:1 split, got {nodes}")
            }
        }
    }
}

impl core::error::Error for SynthError {}

impl From<GraphError> for SynthError {
    fn from(e: GraphError) -> Self {
        SynthError::Graph(e)
    }
}

impl From<LayerError> for SynthError {
    fn from(e: LayerError) -> Self {
        SynthError::Layer(e)
    }
}

/// Random 2:1:1 node split: sizes ceil(n/2), floor(n/4), remainder.
pub fn split_2_1_1(n: usize, seed: u64) -> (Vec<bool>, Vec<bool>, Vec<bool>) {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = SplitMix64::new(seed);
    rng.shuffle(&mut order);
    let n_train = n.div_ceil(2);
    let n_val = n / 4;
    let mut train = vec![false; n];
    let mut val = vec![false; n];
    let mut test = vec![false; n];
    for (rank, &node) in order.iter().enumerate() {
        if rank < n_train {
            train[node] = true;
        } else if rank < n_train + n_val {
            val[node] = true;
        } else {
            test[node] = true;
        }
    }
    (train, val, test)
}

/// Self-sufficient task on a given structure: uniform random labels,
/// one-hot features. The returned graph has self-loops added.
pub fn gen_self_sufficient(g: &Graph, classes: usize, seed: u64) -> Result<Dataset, SynthError> {
    if classes < 2 {
        return Err(SynthError::TooFewClasses { classes });
    }
    let n = g.num_nodes();
    if n < 4 {
        return Err(SynthError::TooFewNodes { nodes: n });
    }
    let mut rng = SplitMix64::new(seed);
    let label_seed = rng.next_u64();
    let split_seed = rng.next_u64();
    let mut label_rng = SplitMix64::new(label_seed);
    let labels: Vec<usize> = (0..n).map(|_| label_rng.next_usize(classes)).collect();
    build_self_sufficient(g, &labels, classes, label_seed, split_seed, LabelMode::Randomized)
}

/// Self-sufficient task with caller-supplied labels (the "original labels"
/// mode for real structures); features are still their one-hot encoding.
pub fn gen_self_sufficient_with_labels(
    g: &Graph,
    labels: &[usize],
    classes: usize,
    seed: u64,
) -> Result<Dataset, SynthError> {
    if classes < 2 {
        return Err(SynthError::TooFewClasses { classes });
    }
    let n = g.num_nodes();
    if n < 4 {
        return Err(SynthError::TooFewNodes { nodes: n });
    }
    if labels.len() != n {
        return Err(SynthError::LabelCount {
            expected: n,
            got: labels.len(),
        });
    }
    let mut rng = SplitMix64::new(seed);
    let split_seed = rng.next_u64();
    build_self_sufficient(g, labels, classes, 0, split_seed, LabelMode::Original)
}

fn build_self_sufficient(
    g: &Graph,
    labels: &[usize],
    classes: usize,
    label_seed: u64,
    split_seed: u64,
    label_mode: LabelMode,
) -> Result<Dataset, SynthError> {
    let n = g.num_nodes();
    let mut features = Tensor::zeros(n, classes);
    for (node, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(SynthError::LabelOutOfRange {
                node,
                label,
                classes,
            });
        }
        features.set(node, label, 1.0);
    }
    let (train_mask, val_mask, test_mask) = split_2_1_1(n, split_seed);
    Ok(Dataset {
        graph: g.add_self_loops(),
        features,
        labels: labels.to_vec(),
        train_mask,
        val_mask,
        test_mask,
        num_classes: classes,
        provenance: Provenance::SelfSufficient {
            classes,
            label_seed,
            split_seed,
            label_mode,
        },
    })
}

/// All seeds feeding the neighbor-dependent generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RecipeSeeds {
    pub graph: u64,
    pub features: u64,
    pub params: u64,
    pub kmeans: u64,
    pub split: u64,
}

impl RecipeSeeds {
    /// Derive the five component seeds from one master seed.
    pub fn from_master(seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        Self {
            graph: rng.next_u64(),
            features: rng.next_u64(),
            params: rng.next_u64(),
            kmeans: rng.next_u64(),
            split: rng.next_u64(),
        }
    }
}

/// Recipe for the neighbor-dependent task: ER(n, p) graph, `dim`-dimensional
/// Gaussian features, a `hops`-layer random GAT labeling network of width
/// `dim`, and K-means into `classes` clusters.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NeighborDependentRecipe {
    pub n: usize,
    pub p: f64,
    pub dim: usize,
    pub hops: usize,
    pub classes: usize,
    pub seeds: RecipeSeeds,
}

impl NeighborDependentRecipe {
    /// The stock configuration: n=1000, p=0.01, d=2, C=2.
    pub fn standard(hops: usize, master_seed: u64) -> Self {
        Self {
            n: 1000,
            p: 0.01,
            dim: 2,
            hops,
            classes: 2,
            seeds: RecipeSeeds::from_master(master_seed),
        }
    }
}

/// The raw input graph of a recipe (no self-loops).
pub fn recipe_graph(recipe: &NeighborDependentRecipe) -> Result<Graph, SynthError> {
    Ok(Graph::erdos_renyi(recipe.n, recipe.p, recipe.seeds.graph)?)
}

/// The recipe's Gaussian input features, N(0, I_dim) per node.
pub fn recipe_features(recipe: &NeighborDependentRecipe) -> Tensor {
    let mut rng = SplitMix64::new(recipe.seeds.features);
    let mut t = Tensor::zeros(recipe.n, recipe.dim);
    for x in t.data_mut() {
        *x = rng.next_gaussian();
    }
    t
}

/// The random `hops`-layer GAT labeling network, Xavier-initialized
/// (matrices and attention vectors alike).
pub fn labeling_network(recipe: &NeighborDependentRecipe) -> Result<Network, SynthError> {
    let spec = NetworkSpec::uniform(LayerKind::Gat, recipe.hops, recipe.dim, recipe.dim)?;
    let policy = InitPolicy {
        matrix: MatrixScheme::XavierUniform,
        attention: AttentionScheme::XavierUniform,
        seed: recipe.seeds.params,
    };
    Ok(init_network(&spec, recipe.dim, &policy)?)
}

/// Embedding produced by the labeling network on the self-loop-free graph:
/// activations between layers, raw (pre-activation) output at layer `hops`,
/// matching how every other network in the lab emits its final layer. Empty
/// neighborhoods are allowed (isolated nodes embed to zero). The linear last
/// layer keeps the K-means boundary linear in the aggregated representation,
/// which is what makes the task recoverable by bias-free attention models.
pub fn labeling_embedding(
    network: &Network,
    g: &Graph,
    features: &Tensor,
) -> Result<Tensor, SynthError> {
    let edges = EdgeIndex::new(g);
    let opts = ForwardOptions {
        apply_final_activation: false,
        allow_missing_self_loops: true,
    };
    Ok(network.forward_values(features, &edges, opts)?)
}

/// Neighbor-dependent dataset per the recipe. The returned features are the
/// raw Gaussian inputs; the labels come from K-means over the labeling
/// embedding; the returned graph has self-loops added for training.
pub fn gen_neighbor_dependent(recipe: &NeighborDependentRecipe) -> Result<Dataset, SynthError> {
    if recipe.classes < 2 {
        return Err(SynthError::TooFewClasses {
            classes: recipe.classes,
        });
    }
    if recipe.n < 4 {
        return Err(SynthError::TooFewNodes { nodes: recipe.n });
    }
    let g = recipe_graph(recipe)?;
    let features = recipe_features(recipe);
    let network = labeling_network(recipe)?;
    let embedding = labeling_embedding(&network, &g, &features)?;
    let isolated_nodes: Vec<usize> = (0..recipe.n).filter(|&v| g.degree(v) == 0).collect();

    // Re-seed K-means while any cluster holds fewer than 1% of the nodes.
    let min_cluster = (recipe.n / 100).max(1);
    let mut reseeds = 0u32;
    let labels = loop {
        let result = kmeans(&embedding, recipe.classes, recipe.seeds.kmeans + reseeds as u64, 300)?;
        let mut counts = vec![0usize; recipe.classes];
        for &l in &result.labels {
            counts[l] += 1;
        }
        if counts.iter().all(|&c| c >= min_cluster) {
            break result.labels;
        }
        reseeds += 1;
        if reseeds > 10 {
            return Err(SynthError::DegenerateClustering { attempts: reseeds });
        }
    };

    let (train_mask, val_mask, test_mask) = split_2_1_1(recipe.n, recipe.seeds.split);
    Ok(Dataset {
        graph: g.add_self_loops(),
        features,
        labels,
        train_mask,
        val_mask,
        test_mask,
        num_classes: recipe.classes,
        provenance: Provenance::NeighborDependent {
            n: recipe.n,
            p: recipe.p,
            dim: recipe.dim,
            hops: recipe.hops,
            classes: recipe.classes,
            seeds: recipe.seeds,
            isolated_nodes,
            kmeans_reseeds: reseeds,
            embedding: String::from("pre_activation_final_layer"),
        },
    })
}

#[derive(Debug, Clone)]
pub struct KmeansResult {
    pub labels: Vec<usize>,
    pub centroids: Tensor,
    pub iterations: usize,
    /// Within-cluster sum of squared distances.
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

/// Lloyd's algorithm with k-means++ seeding. Ties in assignment break to
/// the lowest centroid index; empty clusters keep their previous centroid.
pub fn kmeans(
    points: &Tensor,
    clusters: usize,
    seed: u64,
    max_iters: usize,
) -> Result<KmeansResult, SynthError> {
    let n = points.rows();
    let d = points.cols();
    if clusters == 0 || clusters > n {
        return Err(SynthError::TooFewPoints {
            points: n,
            clusters,
        });
    }
    let mut rng = SplitMix64::new(seed);

    // k-means++: first centroid uniform, the rest D^2-weighted.
    let mut centroids = Tensor::zeros(clusters, d);
    let first = rng.next_usize(n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), centroids.row(0)))
        .collect();
    for c in 1..clusters {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.next_f64() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.next_usize(n)
        };
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for i in 0..n {
            let dist = sq_dist(points.row(i), centroids.row(c));
            if dist < d2[i] {
                d2[i] = dist;
            }
        }
    }

    let mut labels = vec![0usize; n];
    let mut iterations = 0;
    for iter in 0..max_iters {
        iterations = iter + 1;
        let mut changed = false;
        for i in 0..n {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..clusters {
                let dist = sq_dist(points.row(i), centroids.row(c));
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        if !changed && iter > 0 {
            break;
        }
        let mut sums = Tensor::zeros(clusters, d);
        let mut counts = vec![0usize; clusters];
        for i in 0..n {
            counts[labels[i]] += 1;
            let row = sums.row_mut(labels[i]);
            for (s, &x) in row.iter_mut().zip(points.row(i)) {
                *s += x;
            }
        }
        for c in 0..clusters {
            if counts[c] == 0 {
                continue;
            }
            let inv = 1.0 / counts[c] as f64;
            let crow = centroids.row_mut(c);
            for (dst, &s) in crow.iter_mut().zip(sums.row(c)) {
                *dst = s * inv;
            }
        }
    }
    let inertia = (0..n)
        .map(|i| sq_dist(points.row(i), centroids.row(labels[i])))
        .sum();
    Ok(KmeansResult {
        labels,
        centroids,
        iterations,
        inertia,
    })
}

/// Assign each point to the nearest of the given centroids.
pub fn kmeans_assign(points: &Tensor, centroids: &Tensor) -> Vec<usize> {
    (0..points.rows())
        .map(|i| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..centroids.rows() {
                let dist = sq_dist(points.row(i), centroids.row(c));
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            best
        })
        .collect()
}

impl Dataset {
    /// Masks are pairwise disjoint and cover every node.
    pub fn masks_partition_nodes(&self) -> bool {
        let n = self.graph.num_nodes();
        (0..n).all(|v| {
            let count = self.train_mask[v] as u8 + self.val_mask[v] as u8 + self.test_mask[v] as u8;
            count == 1
        })
    }
}

/// Mean within-cluster spread relative to centroid spread; only used by
/// tests as a sanity statistic.
pub fn cluster_separation(points: &Tensor, labels: &[usize], classes: usize) -> f64 {
    let d = points.cols();
    let mut centroids = Tensor::zeros(classes, d);
    let mut counts = vec![0usize; classes];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (c, &x) in centroids.row_mut(l).iter_mut().zip(points.row(i)) {
            *c += x;
        }
    }
    for c in 0..classes {
        if counts[c] > 0 {
            let inv = 1.0 / counts[c] as f64;
            for x in centroids.row_mut(c) {
                *x *= inv;
            }
        }
    }
    let within: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| sq_dist(points.row(i), centroids.row(l)))
        .sum::<f64>()
        / labels.len() as f64;
    let mut between = 0.0;
    let mut pairs = 0;
    for a in 0..classes {
        for b in (a + 1)..classes {
            between += sq_dist(centroids.row(a), centroids.row(b));
            pairs += 1;
        }
    }
    if pairs > 0 {
        between /= pairs as f64;
    }
    math::sqrt(between) / math::sqrt(within.max(1e-30))
}
