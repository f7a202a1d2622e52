//! Dynamic superquadric splitting, fusion, and transparency pruning.
//!
//! Split: a primitive whose attention maps form several clusters in some
//! view is replaced by two children anchored at the 3D source vertices of
//! the two most distant cluster centroids; the decision fires when that
//! centroid distance exceeds beta times the primitive's box diagonal, by
//! majority across the checked views. Fuse: the closest pair of primitives
//! (by mean vertex distance) merges when the union of their prompts under
//! the merged box clusters to exactly one cluster in every checked view.
//! Prune: primitives with opacity below the threshold are removed, ids
//! retired.
//!
//! The fused primitive's warm-up optimization (freeze everything else, fit
//! only the new block for xi steps) lives in the optimizer, which calls
//! [`apply_fuse_params`] and then runs the steps.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acloss::cluster_centroid_index;
use crate::geometry::{PrimitiveId, Superquadric};
use crate::hdbscan::ClusterResult;
use crate::rasterize::{PromptBox, PromptSet};
use crate::scene::{PrimitiveKind, Scene};
use crate::semantics::{ImageEmbedding, SemanticPrior, SemanticsError, CLUSTER_GRID};

#[derive(Debug, Error)]
pub enum StructureError {
    #[error("decision targets primitive {0}, which no longer exists or is inactive")]
    InvalidDecision(PrimitiveId),
    #[error("semantic provider failure: {0}")]
    Semantics(#[from] SemanticsError),
    #[error("geometry failure: {0}")]
    Geometry(#[from] crate::geometry::GeometryError),
}

/// Clustered prompt evidence for one (primitive, view) pair.
#[derive(Clone, Debug)]
pub struct ViewSemantics {
    pub prompts: PromptSet,
    /// Downsampled, flattened attention maps, one per prompt point.
    pub flat_maps: Vec<Vec<f64>>,
    pub clusters: ClusterResult,
}

impl ViewSemantics {
    /// Builds evidence by querying the provider for every prompt point.
    pub fn query(
        prompts: &PromptSet,
        h: &ImageEmbedding,
        provider: &dyn SemanticPrior,
        min_cluster_size: usize,
    ) -> Result<Self, SemanticsError> {
        let flat_maps: Vec<Vec<f64>> = prompts
            .points
            .iter()
            .map(|p| {
                provider
                    .attention_map(h, [p.x, p.y], &prompts.bbox)
                    .map(|m| m.downsample_flat(CLUSTER_GRID))
            })
            .collect::<Result<_, _>>()?;
        let clusters = crate::hdbscan::cluster(&flat_maps, min_cluster_size);
        Ok(Self {
            prompts: prompts.clone(),
            flat_maps,
            clusters,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitDecision {
    pub target_id: PrimitiveId,
    /// 3D source vertices of the two centroid prompts.
    pub anchor_a: [f64; 3],
    pub anchor_b: [f64; 3],
    /// Pixel distance between the two cluster centroids.
    pub centroid_distance: f64,
    /// beta times the box diagonal, in pixels.
    pub threshold: f64,
}

/// Split check for one primitive over the views sampled this iteration.
///
/// Each view with at least two clusters votes to split when the largest
/// pairwise centroid distance exceeds `beta * diag(box)`; the decision fires
/// on a majority of views and anchors at the strongest view's centroids.
/// `world_vertices` are the primitive's current deformed vertices, indexed
/// by the prompts' source-vertex ids.
pub fn check_split(
    target_id: PrimitiveId,
    world_vertices: &[Vector3<f64>],
    evidence: &[ViewSemantics],
    beta: f64,
) -> Option<SplitDecision> {
    let mut votes_for = 0usize;
    let mut votes_against = 0usize;
    let mut best: Option<SplitDecision> = None;

    for view in evidence {
        let n = view.clusters.cluster_count;
        if n < 2 {
            votes_against += 1;
            continue;
        }
        // Centroid prompt per cluster.
        let centroids: Vec<usize> = (0..n as u32)
            .map(|label| cluster_centroid_index(&view.flat_maps, &view.clusters, label))
            .collect();
        let mut furthest = (0usize, 1usize, -1.0f64);
        for i in 0..n {
            for j in (i + 1)..n {
                let pi = &view.prompts.points[centroids[i]];
                let pj = &view.prompts.points[centroids[j]];
                let d = ((pi.x - pj.x).powi(2) + (pi.y - pj.y).powi(2)).sqrt();
                if d > furthest.2 {
                    furthest = (i, j, d);
                }
            }
        }
        let threshold = beta * view.prompts.bbox.diagonal();
        if furthest.2 > threshold {
            votes_for += 1;
            let replace = match &best {
                None => true,
                Some(b) => furthest.2 > b.centroid_distance,
            };
            if replace {
                let va = view.prompts.points[centroids[furthest.0]].vertex as usize;
                let vb = view.prompts.points[centroids[furthest.1]].vertex as usize;
                best = Some(SplitDecision {
                    target_id,
                    anchor_a: world_vertices[va].into(),
                    anchor_b: world_vertices[vb].into(),
                    centroid_distance: furthest.2,
                    threshold,
                });
            }
        } else {
            votes_against += 1;
        }
    }

    if votes_for > votes_against {
        best
    } else {
        None
    }
}

/// Replaces the target with two children anchored at the decision vertices.
///
/// Children inherit rotation, shape exponents, and opacity; their scale is
/// 0.4x the parent's, and their translation places each child's center at
/// its anchor vertex. The parent's opacity drops to 0, making it prunable.
pub fn apply_split(
    scene: &mut Scene,
    d: &SplitDecision,
) -> Result<(PrimitiveId, PrimitiveId), StructureError> {
    let parent = scene
        .find(d.target_id)
        .filter(|p| p.kind == PrimitiveKind::Body && p.sq.alpha > 0.0)
        .ok_or(StructureError::InvalidDecision(d.target_id))?
        .sq
        .clone();

    // Mean template position; for the symmetric icosphere it is ~0, kept to
    // keep child centers exact for any template.
    let mut mean_tpl = Vector3::zeros();
    for v in &scene.template.vertices {
        mean_tpl += v;
    }
    mean_tpl /= scene.template.vertex_count() as f64;

    let rot = parent.rotation()?;
    let child_scale = [
        0.4 * parent.scale[0],
        0.4 * parent.scale[1],
        0.4 * parent.scale[2],
    ];
    let scaled_mean = Vector3::new(
        mean_tpl.x * child_scale[0],
        mean_tpl.y * child_scale[1],
        mean_tpl.z * child_scale[2],
    );

    let child = |anchor: &[f64; 3], scene: &mut Scene| -> PrimitiveId {
        let t = Vector3::from(*anchor) - rot * scaled_mean;
        scene.add(
            Superquadric::new(
                PrimitiveId(0),
                parent.alpha,
                parent.rot6,
                [t.x, t.y, t.z],
                child_scale,
                parent.eps,
            ),
            PrimitiveKind::Body,
        )
    };
    let a = child(&d.anchor_a, scene);
    let b = child(&d.anchor_b, scene);

    scene
        .find_mut(d.target_id)
        .expect("parent still present")
        .sq
        .alpha = 0.0;
    Ok((a, b))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FuseDecision {
    pub id_a: PrimitiveId,
    pub id_b: PrimitiveId,
    pub merged_box: PromptBox,
    pub cluster_count_after_union: usize,
}

/// Fusion check: picks the closest active pair by mean-vertex distance,
/// re-queries the union of their prompts under the merged box, and fires
/// only when every checked view clusters to exactly one cluster.
///
/// `per_view_prompts` maps primitive id to its prompt set per view; views
/// where either candidate lacks prompts are skipped.
pub fn check_fuse(
    scene: &Scene,
    per_view_prompts: &[BTreeMap<PrimitiveId, PromptSet>],
    embeddings: &[ImageEmbedding],
    provider: &dyn SemanticPrior,
    min_cluster_size: usize,
) -> Result<Option<FuseDecision>, StructureError> {
    assert_eq!(per_view_prompts.len(), embeddings.len());
    let actives: Vec<&Superquadric> = scene.active_bodies().map(|p| &p.sq).collect();
    if actives.len() < 2 {
        return Ok(None);
    }

    // Mean deformed vertex position per primitive.
    let mut means: Vec<(PrimitiveId, Vector3<f64>)> = Vec::with_capacity(actives.len());
    for sq in &actives {
        let prim = scene.find(sq.id).expect("active body");
        let mesh = scene.mesh(prim)?;
        means.push((sq.id, mesh.centroid()));
    }

    let mut pair: Option<(PrimitiveId, PrimitiveId, f64)> = None;
    for i in 0..means.len() {
        for j in (i + 1)..means.len() {
            let d = (means[i].1 - means[j].1).norm();
            if pair.is_none() || d < pair.unwrap().2 {
                pair = Some((means[i].0, means[j].0, d));
            }
        }
    }
    let (id_a, id_b, _) = pair.expect("at least one pair");

    let mut checked = 0usize;
    let mut merged_box = None;
    let mut last_count = 0usize;
    for (view, h) in per_view_prompts.iter().zip(embeddings) {
        let (Some(pa), Some(pb)) = (view.get(&id_a), view.get(&id_b)) else {
            continue;
        };
        let bbox = pa.bbox.union(&pb.bbox);
        let mut flat = Vec::with_capacity(pa.points.len() + pb.points.len());
        for p in pa.points.iter().chain(&pb.points) {
            let map = provider.attention_map(h, [p.x, p.y], &bbox)?;
            flat.push(map.downsample_flat(CLUSTER_GRID));
        }
        let clusters = crate::hdbscan::cluster(&flat, min_cluster_size);
        checked += 1;
        last_count = clusters.cluster_count;
        merged_box = Some(bbox);
        if clusters.cluster_count != 1 {
            return Ok(None);
        }
    }

    if checked == 0 {
        return Ok(None);
    }
    Ok(Some(FuseDecision {
        id_a,
        id_b,
        merged_box: merged_box.expect("checked at least one view"),
        cluster_count_after_union: last_count,
    }))
}

/// Parameter bookkeeping of a fusion: the new primitive takes the arithmetic
/// mean of every parameter block of the two sources, whose opacities drop
/// to 0. The caller is responsible for the warm-up optimization of the new
/// block. Returns the fused primitive's id.
pub fn apply_fuse_params(
    scene: &mut Scene,
    d: &FuseDecision,
) -> Result<PrimitiveId, StructureError> {
    let grab = |scene: &Scene, id: PrimitiveId| -> Result<Superquadric, StructureError> {
        Ok(scene
            .find(id)
            .filter(|p| p.kind == PrimitiveKind::Body && p.sq.alpha > 0.0)
            .ok_or(StructureError::InvalidDecision(id))?
            .sq
            .clone())
    };
    let a = grab(scene, d.id_a)?;
    let b = grab(scene, d.id_b)?;

    let mean = |x: f64, y: f64| 0.5 * (x + y);
    let fused = Superquadric::new(
        PrimitiveId(0),
        mean(a.alpha, b.alpha),
        std::array::from_fn(|i| mean(a.rot6[i], b.rot6[i])),
        std::array::from_fn(|i| mean(a.trans[i], b.trans[i])),
        std::array::from_fn(|i| mean(a.scale[i], b.scale[i])),
        std::array::from_fn(|i| mean(a.eps[i], b.eps[i])),
    );
    let id = scene.add(fused, PrimitiveKind::Body);
    scene.find_mut(d.id_a).expect("source a").sq.alpha = 0.0;
    scene.find_mut(d.id_b).expect("source b").sq.alpha = 0.0;
    Ok(id)
}

/// Removes body primitives with opacity strictly below the threshold.
/// Returns the retired ids in ascending order.
pub fn prune_transparent(scene: &mut Scene, threshold: f64) -> Vec<PrimitiveId> {
    let doomed: Vec<PrimitiveId> = scene
        .bodies()
        .filter(|p| p.sq.alpha < threshold)
        .map(|p| p.sq.id)
        .collect();
    for id in &doomed {
        scene.remove(*id);
    }
    doomed
}

/// One structural event for the reproducibility log (JSON lines).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StructureEvent {
    pub iter: u64,
    pub event: String,
    pub ids: Vec<u32>,
    pub metrics: BTreeMap<String, f64>,
}

impl StructureEvent {
    pub fn new(iter: u64, event: &str, ids: Vec<u32>) -> Self {
        Self {
            iter,
            event: event.to_string(),
            ids,
            metrics: BTreeMap::new(),
        }
    }

    pub fn with_metric(mut self, key: &str, value: f64) -> Self {
        self.metrics.insert(key.to_string(), value);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::deform;
    use crate::img::LabelImage;
    use crate::rasterize::PromptPoint;
    use crate::semantics::OracleProvider;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn identical_map(tag: f64) -> Vec<f64> {
        vec![tag, tag * 0.5, 1.0 - tag]
    }

    /// Two identical-map families of 3 prompts each; family centroid points
    /// land on the lowest prompt index of each family.
    fn two_cluster_evidence(dist_px: f64, diag: f64) -> ViewSemantics {
        let pts = vec![
            PromptPoint { x: 10.0, y: 10.0, vertex: 0 },
            PromptPoint { x: 10.5, y: 10.0, vertex: 1 },
            PromptPoint { x: 11.0, y: 10.0, vertex: 2 },
            PromptPoint { x: 10.0 + dist_px, y: 10.0, vertex: 3 },
            PromptPoint { x: 10.5 + dist_px, y: 10.0, vertex: 4 },
            PromptPoint { x: 11.0 + dist_px, y: 10.0, vertex: 5 },
        ];
        let w = diag / 5.0 * 3.0;
        let h = diag / 5.0 * 4.0;
        let prompts = PromptSet {
            owner_id: PrimitiveId(0),
            points: pts,
            bbox: PromptBox {
                x0: 0.0,
                y0: 0.0,
                x1: w,
                y1: h,
            },
        };
        let flat_maps: Vec<Vec<f64>> = (0..6)
            .map(|i| identical_map(if i < 3 { 0.1 } else { 0.9 }))
            .collect();
        let clusters = crate::hdbscan::cluster(&flat_maps, 3);
        assert_eq!(clusters.cluster_count, 2);
        ViewSemantics {
            prompts,
            flat_maps,
            clusters,
        }
    }

    fn world_verts(n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|i| Vector3::new(i as f64, 0.0, -(i as f64)))
            .collect()
    }

    #[test]
    fn split_fires_above_threshold() {
        // Centroids 50 px apart, box diagonal 60: beta 0.7 -> 42 < 50 fires.
        let ev = two_cluster_evidence(50.0, 60.0);
        let d = check_split(PrimitiveId(0), &world_verts(6), &[ev], 0.7).unwrap();
        assert!((d.centroid_distance - 50.0).abs() < 1e-9);
        assert!((d.threshold - 42.0).abs() < 1e-9);
        assert_eq!(d.anchor_a, [0.0, 0.0, 0.0]);
        assert_eq!(d.anchor_b, [3.0, 0.0, -3.0]);
    }

    #[test]
    fn split_does_not_fire_above_higher_beta() {
        // Same fixture with beta 0.9 -> threshold 54 > 50.
        let ev = two_cluster_evidence(50.0, 60.0);
        assert!(check_split(PrimitiveId(0), &world_verts(6), &[ev], 0.9).is_none());
    }

    #[test]
    fn single_cluster_never_splits() {
        let pts = vec![
            PromptPoint { x: 1.0, y: 1.0, vertex: 0 },
            PromptPoint { x: 2.0, y: 1.0, vertex: 1 },
            PromptPoint { x: 3.0, y: 1.0, vertex: 2 },
        ];
        let prompts = PromptSet {
            owner_id: PrimitiveId(0),
            points: pts,
            bbox: PromptBox { x0: 0.0, y0: 0.0, x1: 4.0, y1: 4.0 },
        };
        let flat_maps = vec![identical_map(0.3); 3];
        let clusters = crate::hdbscan::cluster(&flat_maps, 3);
        let ev = ViewSemantics { prompts, flat_maps, clusters };
        assert!(check_split(PrimitiveId(0), &world_verts(3), &[ev], 0.1).is_none());
    }

    #[test]
    fn split_majority_vote_across_views() {
        let fire = || two_cluster_evidence(50.0, 60.0);
        let hold = || two_cluster_evidence(30.0, 60.0); // 30 < 42

        // 2 fire vs 1 hold: fires.
        assert!(
            check_split(PrimitiveId(0), &world_verts(6), &[fire(), hold(), fire()], 0.7).is_some()
        );
        // 1 fire vs 2 hold: does not fire.
        assert!(
            check_split(PrimitiveId(0), &world_verts(6), &[fire(), hold(), hold()], 0.7).is_none()
        );
    }

    #[test]
    fn apply_split_anchors_children_and_silences_parent() {
        let mut scene = Scene::new(1);
        let parent_id = scene.add(
            Superquadric::new(
                PrimitiveId(0),
                0.8,
                [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
                [0.0; 3],
                [1.0; 3],
                [0.7, 1.3],
            ),
            PrimitiveKind::Body,
        );
        let d = SplitDecision {
            target_id: parent_id,
            anchor_a: [1.0, 0.0, 0.0],
            anchor_b: [-1.0, 0.0, 0.0],
            centroid_distance: 50.0,
            threshold: 42.0,
        };
        let before = scene.primitives.len();
        let (a, b) = apply_split(&mut scene, &d).unwrap();
        assert_eq!(scene.primitives.len(), before + 2);
        assert_eq!(scene.find(parent_id).unwrap().sq.alpha, 0.0);

        let parent = scene.find(parent_id).unwrap().sq.clone();
        for (cid, anchor) in [(a, d.anchor_a), (b, d.anchor_b)] {
            let child = scene.find(cid).unwrap().sq.clone();
            assert_eq!(child.eps, parent.eps);
            assert_eq!(child.rot6, parent.rot6);
            assert_eq!(child.alpha, 0.8);
            for k in 0..3 {
                assert!((child.scale[k] - 0.4 * parent.scale[k]).abs() < 1e-12);
            }
            let mesh = deform(&child, &scene.template).unwrap();
            let centroid = mesh.centroid();
            let delta = (centroid - Vector3::from(anchor)).norm();
            assert!(delta < 1e-6, "child centroid {} from anchor", delta);
        }
    }

    #[test]
    fn split_centroid_anchoring_holds_for_random_parents() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut scene = Scene::new(2);
        for _ in 0..25 {
            let rot6 = loop {
                let r: [f64; 6] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                if crate::geometry::rot6d_to_matrix(&r).is_ok() {
                    break r;
                }
            };
            let id = scene.add(
                Superquadric::new(
                    PrimitiveId(0),
                    rng.random_range(0.3..1.0),
                    rot6,
                    std::array::from_fn(|_| rng.random_range(-2.0..2.0)),
                    std::array::from_fn(|_| rng.random_range(0.3..1.5)),
                    [rng.random_range(0.2..1.8), rng.random_range(0.2..1.8)],
                ),
                PrimitiveKind::Body,
            );
            let anchor_a: [f64; 3] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
            let anchor_b: [f64; 3] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
            let d = SplitDecision {
                target_id: id,
                anchor_a,
                anchor_b,
                centroid_distance: 1.0,
                threshold: 0.5,
            };
            let (a, b) = apply_split(&mut scene, &d).unwrap();
            for (cid, anchor) in [(a, anchor_a), (b, anchor_b)] {
                let child = scene.find(cid).unwrap().sq.clone();
                let mesh = deform(&child, &scene.template).unwrap();
                assert!((mesh.centroid() - Vector3::from(anchor)).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn stale_split_decision_is_rejected() {
        let mut scene = Scene::new(1);
        let id = scene.add(Superquadric::unit_sphere(PrimitiveId(0)), PrimitiveKind::Body);
        let d = SplitDecision {
            target_id: id,
            anchor_a: [0.0; 3],
            anchor_b: [1.0, 0.0, 0.0],
            centroid_distance: 1.0,
            threshold: 0.5,
        };
        apply_split(&mut scene, &d).unwrap();
        // Parent now has alpha 0: the same decision is stale.
        assert!(matches!(
            apply_split(&mut scene, &d),
            Err(StructureError::InvalidDecision(_))
        ));
    }

    fn part_mask_two_blobs() -> LabelImage {
        let mut mask = LabelImage::new(64, 64);
        for y in 24..40 {
            for x in 6..22 {
                mask.set(x, y, 1);
            }
            for x in 42..58 {
                mask.set(x, y, 2);
            }
        }
        mask
    }

    fn prompt_at(points: &[[f64; 2]], bbox: PromptBox, owner: PrimitiveId) -> PromptSet {
        PromptSet {
            owner_id: owner,
            points: points
                .iter()
                .enumerate()
                .map(|(i, p)| PromptPoint { x: p[0], y: p[1], vertex: i as u32 })
                .collect(),
            bbox,
        }
    }

    #[test]
    fn fuse_fires_on_shared_part_and_holds_on_disjoint_parts() {
        let provider = OracleProvider::new(HashMap::from([(0, part_mask_two_blobs())]));
        let h = ImageEmbedding { view_id: 0, image_hash: 0 };

        let mut scene = Scene::new(1);
        let a = scene.add(
            Superquadric::new(
                PrimitiveId(0),
                0.9,
                [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
                [-0.1, 0.0, 0.0],
                [0.2; 3],
                [1.0, 1.0],
            ),
            PrimitiveKind::Body,
        );
        let b = scene.add(
            Superquadric::new(
                PrimitiveId(0),
                0.9,
                [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
                [0.1, 0.0, 0.0],
                [0.2; 3],
                [1.0, 1.0],
            ),
            PrimitiveKind::Body,
        );

        // Both primitives' prompts on part 1: one cluster -> fuse.
        let box_a = PromptBox { x0: 6.0, y0: 24.0, x1: 16.0, y1: 40.0 };
        let box_b = PromptBox { x0: 12.0, y0: 24.0, x1: 22.0, y1: 40.0 };
        let shared = vec![BTreeMap::from([
            (a, prompt_at(&[[8.0, 30.0], [10.0, 32.0], [12.0, 34.0]], box_a, a)),
            (b, prompt_at(&[[14.0, 30.0], [16.0, 32.0], [18.0, 34.0]], box_b, b)),
        ])];
        let d = check_fuse(&scene, &shared, &[h], &provider, 3)
            .unwrap()
            .expect("shared part must fuse");
        assert_eq!((d.id_a, d.id_b), (a, b));
        assert_eq!(d.cluster_count_after_union, 1);
        assert_eq!(d.merged_box, box_a.union(&box_b));

        // Prompts on different parts: two clusters -> no fusion.
        let box_b2 = PromptBox { x0: 42.0, y0: 24.0, x1: 58.0, y1: 40.0 };
        let disjoint = vec![BTreeMap::from([
            (a, prompt_at(&[[8.0, 30.0], [10.0, 32.0], [12.0, 34.0]], box_a, a)),
            (b, prompt_at(&[[44.0, 30.0], [48.0, 32.0], [52.0, 34.0]], box_b2, b)),
        ])];
        assert!(check_fuse(&scene, &disjoint, &[h], &provider, 3)
            .unwrap()
            .is_none());
    }

    #[test]
    fn fuse_needs_two_active_primitives() {
        let mut scene = Scene::new(1);
        scene.add(Superquadric::unit_sphere(PrimitiveId(0)), PrimitiveKind::Body);
        let provider = OracleProvider::new(HashMap::new());
        let out = check_fuse(&scene, &[], &[], &provider, 3).unwrap();
        assert!(out.is_none());
    }

    #[test]
    fn fuse_params_mean_and_silence_sources() {
        let mut scene = Scene::new(1);
        let a = scene.add(
            Superquadric::new(
                PrimitiveId(0),
                1.0,
                [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
                [0.0; 3],
                [1.0, 1.0, 1.0],
                [0.5, 0.5],
            ),
            PrimitiveKind::Body,
        );
        let b = scene.add(
            Superquadric::new(
                PrimitiveId(0),
                0.6,
                [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
                [2.0, 0.0, 0.0],
                [3.0, 1.0, 1.0],
                [1.5, 0.7],
            ),
            PrimitiveKind::Body,
        );
        let d = FuseDecision {
            id_a: a,
            id_b: b,
            merged_box: PromptBox { x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0 },
            cluster_count_after_union: 1,
        };
        let fused = apply_fuse_params(&mut scene, &d).unwrap();
        let f = scene.find(fused).unwrap().sq.clone();
        assert_eq!(f.scale, [2.0, 1.0, 1.0]);
        assert_eq!(f.trans, [1.0, 0.0, 0.0]);
        assert_eq!(f.eps, [1.0, 0.6]);
        assert!((f.alpha - 0.8).abs() < 1e-12);
        assert_eq!(scene.find(a).unwrap().sq.alpha, 0.0);
        assert_eq!(scene.find(b).unwrap().sq.alpha, 0.0);
        assert_eq!(scene.active_body_count(), 1);

        // Re-applying is stale now.
        assert!(matches!(
            apply_fuse_params(&mut scene, &d),
            Err(StructureError::InvalidDecision(_))
        ));
    }

    #[test]
    fn prune_examples() {
        let mut scene = Scene::new(1);
        for alpha in [0.05, 0.5, 0.09] {
            let mut sq = Superquadric::unit_sphere(PrimitiveId(0));
            sq.alpha = alpha;
            scene.add(sq, PrimitiveKind::Body);
        }
        let removed = prune_transparent(&mut scene, 0.1);
        assert_eq!(removed.len(), 2);
        assert_eq!(scene.body_count(), 1);

        // Boundary: alpha exactly at the threshold survives (strict <).
        let mut scene = Scene::new(1);
        let mut sq = Superquadric::unit_sphere(PrimitiveId(0));
        sq.alpha = 0.1;
        scene.add(sq, PrimitiveKind::Body);
        assert!(prune_transparent(&mut scene, 0.1).is_empty());
        assert_eq!(scene.body_count(), 1);

        // Everything transparent: empty scene is allowed.
        let mut scene = Scene::new(1);
        let mut sq = Superquadric::unit_sphere(PrimitiveId(0));
        sq.alpha = 0.0;
        scene.add(sq, PrimitiveKind::Body);
        prune_transparent(&mut scene, 0.1);
        assert_eq!(scene.body_count(), 0);
    }

    #[test]
    fn events_serialize_deterministically() {
        let e = StructureEvent::new(1000, "split", vec![3, 7, 8])
            .with_metric("distance", 50.0)
            .with_metric("beta", 0.7);
        let a = serde_json::to_string(&e).unwrap();
        let b = serde_json::to_string(&e).unwrap();
        assert_eq!(a, b);
        assert!(a.contains("\"event\":\"split\""));
    }
}
