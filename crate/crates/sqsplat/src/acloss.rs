//! Attention-guided centering loss.
//!
//! For one primitive in one view: query an attention map per visible point
//! prompt, cluster the maps, take the largest cluster as the semantic core,
//! pick the member map closest to the probability-weighted mean map, and pull
//! every prompt outside the core (noise included) toward that centroid's
//! pixel. The clustering and centroid choice are discrete and detached;
//! gradient flows only through the outlier point coordinates.

use serde::Serialize;

use crate::autodiff::{CustomOp, NodeId, Tape, Tensor};
use crate::hdbscan::ClusterResult;
use crate::rasterize::PromptSet;
use crate::semantics::{AttentionMap, ImageEmbedding, SemanticPrior, SemanticsError, CLUSTER_GRID};

/// Outcome of the centering computation for one primitive in one view.
#[derive(Clone, Debug, Serialize)]
pub struct ACResult {
    /// Summed pixel distance from outliers to the centroid point.
    pub loss: f64,
    /// Pixel coordinates of the centroid prompt.
    pub centroid_point: [f64; 2],
    /// Index of the centroid within the prompt set.
    pub centroid_index: usize,
    /// Prompt indices outside the major cluster (noise included).
    pub outliers: Vec<usize>,
    #[serde(skip)]
    pub clusters: ClusterResult,
}

/// Index of the cluster member whose map is closest (L2) to the
/// probability-weighted mean map of the cluster; ties to the lowest index.
pub fn cluster_centroid_index(
    flat_maps: &[Vec<f64>],
    clusters: &ClusterResult,
    label: u32,
) -> usize {
    let members = clusters.members(label);
    assert!(!members.is_empty(), "empty cluster {label}");
    let dim = flat_maps[0].len();
    let mut mean = vec![0.0; dim];
    for &m in &members {
        let p = clusters.probabilities[m];
        for (acc, v) in mean.iter_mut().zip(&flat_maps[m]) {
            *acc += p * v;
        }
    }
    for v in &mut mean {
        *v /= members.len() as f64;
    }

    let mut best = members[0];
    let mut best_d = f64::INFINITY;
    for &m in &members {
        let d: f64 = flat_maps[m]
            .iter()
            .zip(&mean)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        if d < best_d {
            best_d = d;
            best = m;
        }
    }
    best
}

/// Centering computation on already-clustered map vectors.
pub fn ac_result_from_clusters(
    flat_maps: &[Vec<f64>],
    clusters: ClusterResult,
    prompts: &PromptSet,
) -> ACResult {
    let major = clusters.major_cluster().expect("at least one cluster");
    let centroid_index = cluster_centroid_index(flat_maps, &clusters, major);
    let centroid = [
        prompts.points[centroid_index].x,
        prompts.points[centroid_index].y,
    ];
    let outliers: Vec<usize> = clusters
        .labels
        .iter()
        .enumerate()
        .filter(|(_, l)| **l != Some(major))
        .map(|(i, _)| i)
        .collect();
    let loss = outliers
        .iter()
        .map(|&i| {
            let p = &prompts.points[i];
            ((p.x - centroid[0]).powi(2) + (p.y - centroid[1]).powi(2)).sqrt()
        })
        .sum();
    ACResult {
        loss,
        centroid_point: centroid,
        centroid_index,
        outliers,
        clusters,
    }
}

/// Full centering pass for one primitive: query one map per prompt point,
/// cluster, and compute the loss. The prompt set must be nonempty.
pub fn ac_loss_for_primitive(
    prompts: &PromptSet,
    h: &ImageEmbedding,
    provider: &dyn SemanticPrior,
    min_cluster_size: usize,
) -> Result<ACResult, SemanticsError> {
    assert!(!prompts.points.is_empty(), "prompt set must be nonempty");
    let maps: Vec<AttentionMap> = prompts
        .points
        .iter()
        .map(|p| provider.attention_map(h, [p.x, p.y], &prompts.bbox))
        .collect::<Result<_, _>>()?;
    let flat: Vec<Vec<f64>> = maps
        .iter()
        .map(|m| m.downsample_flat(CLUSTER_GRID))
        .collect();
    let clusters = crate::hdbscan::cluster(&flat, min_cluster_size);
    Ok(ac_result_from_clusters(&flat, clusters, prompts))
}

/// Scene total for one iteration: per view, the sum over primitives
/// (fully occluded primitives contribute 0); averaged across views.
pub fn ac_loss_total(per_view: &[Vec<Option<ACResult>>]) -> f64 {
    if per_view.is_empty() {
        return 0.0;
    }
    let sum: f64 = per_view
        .iter()
        .map(|view| {
            view.iter()
                .filter_map(|r| r.as_ref().map(|r| r.loss))
                .sum::<f64>()
        })
        .sum();
    sum / per_view.len() as f64
}

#[derive(Debug)]
struct AcDistanceOp {
    inputs: [NodeId; 1],
    outlier_vertices: Vec<u32>,
    centroid: [f64; 2],
}

impl CustomOp for AcDistanceOp {
    fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    fn backward(&self, values: &[Tensor], grad_out: &Tensor, acc: &mut dyn FnMut(NodeId, Tensor)) {
        let pixels = values[self.inputs[0].0].data();
        let g = grad_out.item();
        let mut grad = vec![0.0; pixels.len()];
        for &v in &self.outlier_vertices {
            let i = v as usize;
            let dx = pixels[i * 2] - self.centroid[0];
            let dy = pixels[i * 2 + 1] - self.centroid[1];
            let norm = (dx * dx + dy * dy).sqrt();
            if norm > 0.0 {
                grad[i * 2] += g * dx / norm;
                grad[i * 2 + 1] += g * dy / norm;
            }
        }
        let n = pixels.len() / 2;
        acc(self.inputs[0], Tensor::from_vec(grad, &[n, 2]));
    }
}

/// Records the outlier-to-centroid distance sum on the tape.
///
/// `pixels` is a projected `[V, 2]` node; `outlier_vertices` are the source
/// vertex indices of the outlier prompts; the centroid is a constant.
pub fn ac_loss_node(
    tape: &mut Tape,
    pixels: NodeId,
    outlier_vertices: Vec<u32>,
    centroid: [f64; 2],
) -> NodeId {
    let data = tape.value(pixels).data();
    let loss: f64 = outlier_vertices
        .iter()
        .map(|&v| {
            let i = v as usize;
            let dx = data[i * 2] - centroid[0];
            let dy = data[i * 2 + 1] - centroid[1];
            (dx * dx + dy * dy).sqrt()
        })
        .sum();
    tape.custom(
        Tensor::scalar(loss),
        Box::new(AcDistanceOp {
            inputs: [pixels],
            outlier_vertices,
            centroid,
        }),
    )
}
