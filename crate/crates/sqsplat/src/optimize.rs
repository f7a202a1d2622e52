//! The two training stages, their schedules, and evaluation plumbing.
//!
//! Stage 1 fits superquadrics to silhouettes: per iteration one view is
//! sampled, the soft silhouette render is compared against the target by
//! mean squared error, and (after warm-up) the attention-guided centering
//! loss is added with weight gamma. Every structure cadence the split, fuse,
//! and prune operations run on a batch of freshly sampled views. Stage 2
//! freezes the primitives, binds Gaussians to their triangles, and optimizes
//! an L1 + D-SSIM photometric loss plus the positional regularizer, with
//! clone/split density control on its own cadence.
//!
//! Paper-scale iteration counts stay in the configs; desk-scale runs shrink
//! `total_iters` and every cadence scales proportionally (rounded up), so
//! short runs keep the same phase structure.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acloss::{ac_loss_node, ac_result_from_clusters};
use crate::autodiff::{exp_decay_lr, AdamParams, AdamState, NodeId, Tape, Tensor};
use crate::camera::Camera;
use crate::dataset::Dataset;
use crate::gaussians::{
    compute_binding, densify_and_prune, init_bound_gaussians, l_pos_node, register_gaussians,
    splat_render, splat_render_node, DensifyConfig, GaussianSet, GaussiansError, PosRegConfig,
};
use crate::geometry::{
    deform, matrix_to_rot6d, GeometryError, PrimitiveId, PrimitiveMesh, Superquadric,
};
use crate::metrics::{chamfer, psnr, ssim, ssim_node, MetricsError, SSIM_WINDOW};
use crate::rasterize::{
    render, render_node, visible_point_prompts, MeshInstance, RasterError, RenderItem,
    SoftRenderConfig,
};
use crate::scene::{PrimitiveKind, Scene, ScenePrimitive};
use crate::semantics::{embed_image, ImageEmbedding, SemanticPrior, SemanticsError};
use crate::structure::{
    apply_fuse_params, apply_split, check_fuse, check_split, prune_transparent, StructureError,
    StructureEvent, ViewSemantics,
};

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error("loss diverged at iteration {iter}: {value}")]
    Diverged { iter: u64, value: f64 },
    #[error("geometry failure: {0}")]
    Geometry(#[from] GeometryError),
    #[error("rasterizer failure: {0}")]
    Raster(#[from] RasterError),
    #[error("semantic provider failure: {0}")]
    Semantics(#[from] SemanticsError),
    #[error("structure failure: {0}")]
    Structure(#[from] StructureError),
    #[error("gaussian failure: {0}")]
    Gaussians(#[from] GaussiansError),
    #[error("metrics failure: {0}")]
    Metrics(#[from] MetricsError),
    #[error("dataset is empty")]
    EmptyDataset,
}

/// Paper-scale cadence baselines the configs are expressed against.
const STAGE1_BASELINE_ITERS: f64 = 50_000.0;
const STAGE2_BASELINE_ITERS: f64 = 20_000.0;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    /// Weight of the centering loss (0 during warm-up).
    pub gamma: f64,
    /// Warm-up iterations at paper scale.
    pub warmup_iters: u64,
    pub total_iters: u64,
    /// Split/fuse/prune cadence at paper scale.
    pub structure_cadence: u64,
    /// Split threshold factor on the box diagonal.
    pub beta: f64,
    /// Fused-primitive warm-up steps.
    pub xi: u64,
    pub initial_k: usize,
    pub prune_alpha: f64,
    pub lr: f64,
    pub min_cluster_size: usize,
    /// Per-primitive point prompts are subsampled to this many per view.
    pub max_prompts: usize,
    /// Views sampled for each structure check.
    pub structure_views: usize,
    pub subdivision_level: u32,
    /// Multiplier on the default softness (1e-4 * diagonal^2).
    pub sigma_scale: f64,
    pub faces_per_pixel: usize,
    /// Softness multiplier reached at the final iteration; the mask anneals
    /// exponentially from `sigma_scale` starting at `anneal_start` of the run,
    /// which removes the soft-halo bias from the recovered scales.
    pub sigma_final_scale: f64,
    /// Fraction of the run after which annealing begins.
    pub anneal_start: f64,
    pub enable_split: bool,
    pub enable_fuse: bool,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            gamma: 0.2,
            warmup_iters: 2_000,
            total_iters: 50_000,
            structure_cadence: 1_000,
            beta: 0.7,
            xi: 100,
            initial_k: 10,
            prune_alpha: 0.1,
            lr: 0.02,
            min_cluster_size: 3,
            max_prompts: 32,
            structure_views: 4,
            subdivision_level: 3,
            sigma_scale: 1.0,
            faces_per_pixel: 10,
            sigma_final_scale: 0.05,
            anneal_start: 0.5,
            enable_split: true,
            enable_fuse: true,
        }
    }
}

impl Stage1Config {
    fn ratio(&self) -> f64 {
        self.total_iters as f64 / STAGE1_BASELINE_ITERS
    }

    pub fn effective_warmup(&self) -> u64 {
        (self.warmup_iters as f64 * self.ratio()).ceil() as u64
    }

    pub fn effective_cadence(&self) -> u64 {
        ((self.structure_cadence as f64 * self.ratio()).ceil() as u64).max(1)
    }

    /// Annealed softness multiplier at an iteration.
    pub fn sigma_at(&self, iter: u64) -> f64 {
        let start = self.anneal_start * self.total_iters as f64;
        let t = iter as f64;
        if t <= start || self.total_iters as f64 <= start {
            return self.sigma_scale;
        }
        let frac = (t - start) / (self.total_iters as f64 - start);
        self.sigma_scale * self.sigma_final_scale.powf(frac)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.gamma < 0.0 {
            return Err("gamma must be nonnegative".into());
        }
        if self.total_iters == 0 {
            return Err("total_iters must be positive".into());
        }
        if self.effective_warmup() >= self.total_iters {
            return Err("warm-up must end before total_iters".into());
        }
        if !(0.0..=1.0).contains(&self.prune_alpha) {
            return Err("prune_alpha must be in [0, 1]".into());
        }
        if self.beta <= 0.0 || self.initial_k == 0 || self.min_cluster_size < 2 {
            return Err("beta, initial_k, min_cluster_size out of range".into());
        }
        if self.subdivision_level > 5 {
            return Err("subdivision_level must be <= 5".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    /// D-SSIM weight in the photometric loss.
    pub lambda_ssim: f64,
    pub total_iters: u64,
    /// Density-control cadence at paper scale.
    pub densify_cadence: u64,
    pub lr_position: f64,
    pub lr_scaling: f64,
    pub lr_quat: f64,
    pub lr_opacity: f64,
    pub lr_sh: f64,
    /// Position learning rate decays to this fraction at the final iteration.
    pub position_lr_final_ratio: f64,
    pub epsilon_pos: f64,
    pub sh_degree: u32,
    pub densify: DensifyConfig,
    /// Densification stops after this fraction of the run.
    pub densify_until: f64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            lambda_ssim: 0.2,
            total_iters: 20_000,
            densify_cadence: 2_000,
            lr_position: 5e-3,
            lr_scaling: 1.7e-2,
            lr_quat: 1e-3,
            lr_opacity: 5e-2,
            lr_sh: 2.5e-3,
            position_lr_final_ratio: 0.01,
            epsilon_pos: 0.5,
            sh_degree: 1,
            densify: DensifyConfig::default(),
            densify_until: 0.8,
        }
    }
}

impl Stage2Config {
    pub fn effective_densify_cadence(&self) -> u64 {
        (((self.densify_cadence as f64) * self.total_iters as f64 / STAGE2_BASELINE_ITERS).ceil()
            as u64)
            .max(1)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.lambda_ssim) {
            return Err("lambda_ssim must be in [0, 1]".into());
        }
        if self.total_iters == 0 {
            return Err("total_iters must be positive".into());
        }
        if self.epsilon_pos <= 0.0 {
            return Err("epsilon_pos must be positive".into());
        }
        Ok(())
    }
}

/// One row of the metrics report.
#[derive(Clone, Debug, Serialize)]
pub struct MetricsRow {
    pub iter: u64,
    pub l_rec: f64,
    pub l_ac: f64,
    pub k_active: usize,
    pub chamfer: Option<f64>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], w: &mut W) -> std::io::Result<()> {
    writeln!(w, "iter,l_rec,l_ac,K_active,chamfer,psnr,ssim")?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.iter,
            r.l_rec,
            r.l_ac,
            r.k_active,
            opt(r.chamfer),
            opt(r.psnr),
            opt(r.ssim)
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Stage 1
// ---------------------------------------------------------------------------

pub struct Stage1Output {
    pub scene: Scene,
    pub events: Vec<StructureEvent>,
    pub metrics: Vec<MetricsRow>,
}

/// Near-uniform Fibonacci samples of every active primitive's surface.
pub fn scene_surface_samples(scene: &Scene, per_body: usize) -> Vec<Vector3<f64>> {
    let mut out = Vec::new();
    for prim in scene.active_bodies() {
        for (eta, omega) in crate::geometry::fibonacci_angles(per_body) {
            if let Ok(p) = crate::geometry::surface_point(&prim.sq, eta, omega) {
                out.push(p);
            }
        }
    }
    out
}

/// Sample count per body used when reporting Chamfer distance.
pub const EVAL_SAMPLES_PER_BODY: usize = 32_768;

/// Mean silhouette IoU of the active bodies against the dataset, both sides
/// thresholded at 0.5.
pub fn silhouette_iou(scene: &Scene, dataset: &Dataset, cfg: &SoftRenderConfig) -> f64 {
    let mut intersection = 0usize;
    let mut union = 0usize;
    for view in &dataset.views {
        let Some(out) = render_active_bodies(scene, &view.camera, cfg) else {
            union += view.silhouette.data.iter().filter(|&&v| v > 0.5).count();
            continue;
        };
        for (p, g) in out.silhouette.data.iter().zip(&view.silhouette.data) {
            let p = *p > 0.5;
            let g = *g > 0.5;
            intersection += (p && g) as usize;
            union += (p || g) as usize;
        }
    }
    if union == 0 {
        1.0
    } else {
        intersection as f64 / union as f64
    }
}

fn render_active_bodies(
    scene: &Scene,
    cam: &Camera,
    cfg: &SoftRenderConfig,
) -> Option<crate::rasterize::RenderOutput> {
    let meshes: Vec<PrimitiveMesh> = scene
        .active_bodies()
        .filter_map(|p| deform(&p.sq, &scene.template).ok())
        .collect();
    if meshes.is_empty() {
        return None;
    }
    let instances: Vec<MeshInstance> = meshes
        .iter()
        .map(|m| MeshInstance {
            mesh: m,
            color: Scene::representation_color(m.owner_id),
            alpha: scene.find(m.owner_id).map(|p| p.sq.alpha).unwrap_or(0.0),
        })
        .collect();
    render(&instances, cam, cfg).ok()
}

/// Axis-aligned box of grid points that land inside every silhouette.
fn visual_hull_box(dataset: &Dataset) -> (Vector3<f64>, Vector3<f64>) {
    let mean_dist = dataset
        .views
        .iter()
        .map(|v| v.camera.center().norm())
        .sum::<f64>()
        / dataset.views.len().max(1) as f64;
    let r = (mean_dist * 0.8).max(0.5);
    let n = 32;
    let mut min = Vector3::repeat(f64::INFINITY);
    let mut max = Vector3::repeat(f64::NEG_INFINITY);
    let mut hits = 0usize;
    for iz in 0..n {
        for iy in 0..n {
            for ix in 0..n {
                let p = Vector3::new(
                    -r + 2.0 * r * (ix as f64 + 0.5) / n as f64,
                    -r + 2.0 * r * (iy as f64 + 0.5) / n as f64,
                    -r + 2.0 * r * (iz as f64 + 0.5) / n as f64,
                );
                let inside_all = dataset.views.iter().all(|v| {
                    match v.camera.project_point(&p) {
                        Some((px, py, _)) => {
                            let x = px.floor();
                            let y = py.floor();
                            x >= 0.0
                                && y >= 0.0
                                && x < v.silhouette.width as f64
                                && y < v.silhouette.height as f64
                                && v.silhouette.at(x as u32, y as u32) > 0.5
                        }
                        None => false,
                    }
                });
                if inside_all {
                    hits += 1;
                    min = min.inf(&p);
                    max = max.sup(&p);
                }
            }
        }
    }
    if hits < 8 {
        (Vector3::repeat(-1.0), Vector3::repeat(1.0))
    } else {
        (min, max)
    }
}

fn random_rot6(rng: &mut impl Rng) -> [f64; 6] {
    loop {
        let r: [f64; 6] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        if crate::geometry::rot6d_to_matrix(&r).is_ok() {
            return r;
        }
    }
}

/// Initial scene: K random bodies inside the visual hull box plus the
/// background dome and ground plane.
pub fn init_scene(dataset: &Dataset, cfg: &Stage1Config, rng: &mut impl Rng) -> Scene {
    let (hull_min, hull_max) = visual_hull_box(dataset);
    let extent = hull_max - hull_min;
    let center = (hull_max + hull_min) / 2.0;
    let base_scale = (extent.x + extent.y + extent.z) / 6.0;
    let radius = extent.norm() / 2.0;

    let mut scene = Scene::new(cfg.subdivision_level);
    for _ in 0..cfg.initial_k {
        let trans = [
            rng.random_range(hull_min.x..=hull_max.x),
            rng.random_range(hull_min.y..=hull_max.y),
            rng.random_range(hull_min.z..=hull_max.z),
        ];
        let scale: [f64; 3] =
            std::array::from_fn(|_| (base_scale * rng.random_range(0.4..0.8)).max(0.05));
        let rot6 = random_rot6(rng);
        scene.add(
            Superquadric::new(PrimitiveId(0), 0.9, rot6, trans, scale, [1.0, 1.0]),
            PrimitiveKind::Body,
        );
    }

    // Background dome: a large enclosing icosphere.
    scene.add(
        Superquadric::new(
            PrimitiveId(0),
            1.0,
            [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            [center.x, center.y, center.z],
            [3.0 * radius.max(1.0); 3],
            [1.0, 1.0],
        ),
        PrimitiveKind::BackgroundDome,
    );
    // Ground plane at the hull's lowest extent.
    scene.add(
        Superquadric::new(
            PrimitiveId(0),
            1.0,
            [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            [center.x, hull_min.y, center.z],
            [3.0 * radius.max(1.0), 1.0, 3.0 * radius.max(1.0)],
            [1.0, 1.0],
        ),
        PrimitiveKind::GroundPlane,
    );
    scene
}

const PARAM_BLOCKS: [&str; 5] = ["alpha", "rot6", "trans", "scale", "eps"];

struct Stage1Ctx<'a> {
    dataset: &'a Dataset,
    provider: Option<&'a dyn SemanticPrior>,
    embeddings: Vec<ImageEmbedding>,
    raster: SoftRenderConfig,
    targets: Vec<Tensor>,
    adam: BTreeMap<(u32, &'static str), AdamState>,
    hp: AdamParams,
    cfg: &'a Stage1Config,
}

impl<'a> Stage1Ctx<'a> {
    fn new(
        dataset: &'a Dataset,
        provider: Option<&'a dyn SemanticPrior>,
        cfg: &'a Stage1Config,
    ) -> Self {
        let (w, h) = dataset.resolution();
        let raster = SoftRenderConfig {
            faces_per_pixel: cfg.faces_per_pixel,
            background_color: [0.0; 3],
            ..SoftRenderConfig::for_image(w, h)
        };
        let targets = dataset
            .views
            .iter()
            .map(|v| Tensor::from_vec(v.silhouette.data.clone(), &[h as usize, w as usize]))
            .collect();
        let embeddings = dataset
            .views
            .iter()
            .map(|v| embed_image(v.id, &v.image))
            .collect();
        Self {
            dataset,
            provider,
            embeddings,
            raster,
            targets,
            adam: BTreeMap::new(),
            hp: AdamParams::default(),
            cfg,
        }
    }

    /// Raster config with the annealed softness for an iteration.
    fn raster_at(&self, iter: u64) -> SoftRenderConfig {
        SoftRenderConfig {
            sigma: self.raster.sigma * self.cfg.sigma_at(iter),
            ..self.raster.clone()
        }
    }
}

/// One optimization step on one view. `trainable` restricts which bodies
/// receive updates (used by the split/fuse warm-ups); gradients always flow
/// through every active body's render.
fn stage1_step(
    scene: &mut Scene,
    ctx: &mut Stage1Ctx,
    view_idx: usize,
    gamma: f64,
    trainable: Option<&[PrimitiveId]>,
    iter: u64,
) -> Result<(f64, f64), OptimizeError> {
    let view = &ctx.dataset.views[view_idx];
    let cam = &view.camera;
    let raster = ctx.raster_at(iter);
    let active: Vec<Superquadric> = scene.active_bodies().map(|p| p.sq.clone()).collect();
    if active.is_empty() {
        let l_rec = ctx.targets[view_idx].data().iter().map(|v| v * v).sum::<f64>()
            / ctx.targets[view_idx].len() as f64;
        return Ok((l_rec, 0.0));
    }

    let mut tape = Tape::new();
    let mut nodes = Vec::new();
    let mut projected = Vec::new();
    let mut rendered_ids: Vec<PrimitiveId> = Vec::new();
    let mut meshes = Vec::new();
    for sq in &active {
        let sqn = crate::geometry::register_superquadric(&mut tape, sq);
        let rot = crate::geometry::rot6d_node(&mut tape, sqn.rot6)?;
        let verts = crate::geometry::deform_node(&mut tape, rot, &sqn, &scene.template);
        match crate::rasterize::project_vertices_node(&mut tape, verts, cam) {
            Ok(p) => {
                // Eager mesh copy for the prompt pass.
                let data = tape.value(verts).data();
                meshes.push(PrimitiveMesh {
                    world_vertices: data
                        .chunks_exact(3)
                        .map(|c| Vector3::new(c[0], c[1], c[2]))
                        .collect(),
                    faces: scene.template.faces.clone(),
                    owner_id: sq.id,
                });
                projected.push(p);
                rendered_ids.push(sq.id);
                nodes.push(sqn);
            }
            Err(RasterError::AllClipped) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    if projected.is_empty() {
        let l_rec = ctx.targets[view_idx].data().iter().map(|v| v * v).sum::<f64>()
            / ctx.targets[view_idx].len() as f64;
        return Ok((l_rec, 0.0));
    }

    let items: Vec<RenderItem> = projected
        .iter()
        .zip(&rendered_ids)
        .zip(&nodes)
        .map(|((p, id), sqn)| RenderItem {
            projected: p,
            faces: scene.template.faces.clone(),
            owner: *id,
            alpha: sqn.alpha,
            color: Scene::representation_color(*id),
        })
        .collect();
    let (sil, out) = render_node(&mut tape, &items, &raster, cam.width, cam.height);
    let l_rec_node = tape.mse(sil, &ctx.targets[view_idx]);
    let l_rec = tape.scalar_value(l_rec_node);

    let mut loss_node = l_rec_node;
    let mut l_ac_total = 0.0;
    if gamma > 0.0 {
        if let Some(provider) = ctx.provider {
            let instances: Vec<MeshInstance> = meshes
                .iter()
                .zip(&rendered_ids)
                .map(|(m, id)| MeshInstance {
                    mesh: m,
                    color: Scene::representation_color(*id),
                    alpha: scene.find(*id).map(|p| p.sq.alpha).unwrap_or(0.0),
                })
                .collect();
            let prompt_sets = visible_point_prompts(&out, &instances, cam, &raster);
            let mut ac_nodes: Vec<NodeId> = Vec::new();
            for (pi, prompts) in prompt_sets.into_iter().enumerate() {
                let Ok(mut prompts) = prompts else {
                    continue; // fully occluded: contributes 0 this view
                };
                subsample_prompts(&mut prompts, ctx.cfg.max_prompts);
                let flat: Vec<Vec<f64>> = prompts
                    .points
                    .iter()
                    .map(|p| {
                        provider
                            .attention_map(
                                &ctx.embeddings[view_idx],
                                [p.x, p.y],
                                &prompts.bbox,
                            )
                            .map(|m| m.downsample_flat(crate::semantics::CLUSTER_GRID))
                    })
                    .collect::<Result<_, _>>()?;
                let clusters = crate::hdbscan::cluster(&flat, ctx.cfg.min_cluster_size);
                let result = ac_result_from_clusters(&flat, clusters, &prompts);
                l_ac_total += result.loss;
                if !result.outliers.is_empty() {
                    let outlier_vertices: Vec<u32> = result
                        .outliers
                        .iter()
                        .map(|&i| prompts.points[i].vertex)
                        .collect();
                    ac_nodes.push(ac_loss_node(
                        &mut tape,
                        projected[pi].pixels,
                        outlier_vertices,
                        result.centroid_point,
                    ));
                }
            }
            if !ac_nodes.is_empty() {
                let mut sum = ac_nodes[0];
                for n in &ac_nodes[1..] {
                    sum = tape.add(sum, *n);
                }
                // The reconstruction term is a per-pixel mean; dividing the
                // centering term by the pixel count keeps the published
                // gamma balance (it equals scaling the paper's summed loss
                // by one global constant).
                let pixels = (cam.width * cam.height) as f64;
                let weighted = tape.scale(sum, gamma / pixels);
                loss_node = tape.add(loss_node, weighted);
            }
        }
    }

    let loss = tape.scalar_value(loss_node);
    if !loss.is_finite() {
        return Err(OptimizeError::Diverged { iter, value: loss });
    }

    let grads = tape.backward(loss_node);
    for (sqn, id) in nodes.iter().zip(&rendered_ids) {
        if trainable.is_some_and(|set| !set.contains(id)) {
            continue;
        }
        let blocks = [
            (sqn.alpha, 1usize, "alpha"),
            (sqn.rot6, 6, "rot6"),
            (sqn.trans, 3, "trans"),
            (sqn.scale, 3, "scale"),
            (sqn.eps, 2, "eps"),
        ];
        let prim = scene.find_mut(*id).expect("active body");
        for (node, len, name) in blocks {
            let g = grads.get_or_zeros(node, len);
            let key = (id.0, PARAM_BLOCKS.iter().find(|b| **b == name).unwrap());
            let state = ctx
                .adam
                .entry((key.0, key.1))
                .or_insert_with(|| AdamState::new(len));
            let params: &mut [f64] = match name {
                "alpha" => std::slice::from_mut(&mut prim.sq.alpha),
                "rot6" => &mut prim.sq.rot6,
                "trans" => &mut prim.sq.trans,
                "scale" => &mut prim.sq.scale,
                _ => &mut prim.sq.eps,
            };
            state.step(&ctx.hp, ctx.cfg.lr, params, &g);
        }
        prim.sq.clamp_params();
    }

    Ok((l_rec, l_ac_total))
}

fn subsample_prompts(prompts: &mut crate::rasterize::PromptSet, max: usize) {
    if prompts.points.len() > max {
        let stride = prompts.points.len().div_ceil(max);
        prompts.points = prompts
            .points
            .iter()
            .step_by(stride)
            .copied()
            .collect();
    }
}

/// Collects clustered prompt evidence for every active body over a set of
/// views. Missing prompts (occlusion) are skipped.
#[allow(clippy::type_complexity)]
fn collect_structure_evidence(
    scene: &Scene,
    ctx: &Stage1Ctx,
    view_indices: &[usize],
    iter: u64,
) -> Result<
    (
        BTreeMap<u32, Vec<ViewSemantics>>,
        Vec<BTreeMap<PrimitiveId, crate::rasterize::PromptSet>>,
        Vec<ImageEmbedding>,
    ),
    OptimizeError,
> {
    let provider = ctx.provider.expect("structure checks need a provider");
    let raster = ctx.raster_at(iter);
    let mut per_prim: BTreeMap<u32, Vec<ViewSemantics>> = BTreeMap::new();
    let mut per_view_prompts = Vec::new();
    let mut embeddings = Vec::new();
    for &vi in view_indices {
        let view = &ctx.dataset.views[vi];
        let Some(out) = render_active_bodies(scene, &view.camera, &raster) else {
            continue;
        };
        let meshes: Vec<PrimitiveMesh> = scene
            .active_bodies()
            .filter_map(|p| deform(&p.sq, &scene.template).ok())
            .collect();
        let instances: Vec<MeshInstance> = meshes
            .iter()
            .map(|m| MeshInstance {
                mesh: m,
                color: Scene::representation_color(m.owner_id),
                alpha: scene.find(m.owner_id).map(|p| p.sq.alpha).unwrap_or(0.0),
            })
            .collect();
        let prompt_sets = visible_point_prompts(&out, &instances, &view.camera, &raster);
        let mut view_prompts = BTreeMap::new();
        for prompts in prompt_sets.into_iter().flatten() {
            let mut prompts = prompts;
            subsample_prompts(&mut prompts, ctx.cfg.max_prompts);
            let semantics = ViewSemantics::query(
                &prompts,
                &ctx.embeddings[vi],
                provider,
                ctx.cfg.min_cluster_size,
            )?;
            per_prim
                .entry(prompts.owner_id.0)
                .or_default()
                .push(semantics);
            view_prompts.insert(prompts.owner_id, prompts);
        }
        per_view_prompts.push(view_prompts);
        embeddings.push(ctx.embeddings[vi]);
    }
    Ok((per_prim, per_view_prompts, embeddings))
}

/// Fits K superquadrics to the dataset silhouettes.
pub fn stage1_fit(
    dataset: &Dataset,
    provider: Option<&dyn SemanticPrior>,
    cfg: &Stage1Config,
    seed: u64,
) -> Result<Stage1Output, OptimizeError> {
    if dataset.views.is_empty() {
        return Err(OptimizeError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scene = init_scene(dataset, cfg, &mut rng);
    let mut ctx = Stage1Ctx::new(dataset, provider, cfg);

    let warmup = cfg.effective_warmup();
    let cadence = cfg.effective_cadence();
    let mut events = Vec::new();
    let mut metrics = Vec::new();
    let mut last;

    for iter in 0..cfg.total_iters {
        let view_idx = rng.random_range(0..dataset.views.len());
        let gamma = if iter < warmup || provider.is_none() {
            0.0
        } else {
            cfg.gamma
        };
        last = stage1_step(&mut scene, &mut ctx, view_idx, gamma, None, iter)?;

        let structure_due = (iter + 1) % cadence == 0 && (iter + 1) > warmup;
        if structure_due && provider.is_some() {
            let view_indices: Vec<usize> = (0..cfg.structure_views)
                .map(|_| rng.random_range(0..dataset.views.len()))
                .collect();
            let (per_prim, per_view_prompts, embeddings) =
                collect_structure_evidence(&scene, &ctx, &view_indices, iter)?;

            if cfg.enable_split {
                let mut decisions = Vec::new();
                for (prim_id, evidence) in &per_prim {
                    let Some(prim) = scene.find(PrimitiveId(*prim_id)) else {
                        continue;
                    };
                    let mesh = deform(&prim.sq, &scene.template)?;
                    if let Some(d) = check_split(
                        PrimitiveId(*prim_id),
                        &mesh.world_vertices,
                        evidence,
                        cfg.beta,
                    ) {
                        decisions.push(d);
                    }
                }
                for d in decisions {
                    let (a, b) = apply_split(&mut scene, &d)?;
                    // Freeze every other block and let the children claim
                    // their parts before the next structure check.
                    let children = [a, b];
                    for step in 0..cfg.xi {
                        let vi = rng.random_range(0..dataset.views.len());
                        stage1_step(&mut scene, &mut ctx, vi, 0.0, Some(&children), iter + step)?;
                    }
                    events.push(
                        StructureEvent::new(iter + 1, "split", vec![d.target_id.0, a.0, b.0])
                            .with_metric("centroid_distance", d.centroid_distance)
                            .with_metric("threshold", d.threshold),
                    );
                }
            }

            if cfg.enable_fuse {
                if let Some(d) = check_fuse(
                    &scene,
                    &per_view_prompts,
                    &embeddings,
                    ctx.provider.unwrap(),
                    cfg.min_cluster_size,
                )? {
                    let fused = apply_fuse_params(&mut scene, &d)?;
                    // Warm up only the fused block against the silhouettes.
                    let only = [fused];
                    for step in 0..cfg.xi {
                        let vi = rng.random_range(0..dataset.views.len());
                        stage1_step(&mut scene, &mut ctx, vi, 0.0, Some(&only), iter + step)?;
                    }
                    events.push(
                        StructureEvent::new(iter + 1, "fuse", vec![d.id_a.0, d.id_b.0, fused.0])
                            .with_metric("clusters", d.cluster_count_after_union as f64),
                    );
                }
            }

            let removed = prune_transparent(&mut scene, cfg.prune_alpha);
            if !removed.is_empty() {
                events.push(StructureEvent::new(
                    iter + 1,
                    "prune",
                    removed.iter().map(|id| id.0).collect(),
                ));
            }
        }

        if structure_due || iter + 1 == cfg.total_iters {
            let cd = dataset.gt_points.as_ref().map(|gt| {
                let samples = scene_surface_samples(&scene, EVAL_SAMPLES_PER_BODY);
                if samples.is_empty() {
                    f64::INFINITY
                } else {
                    chamfer(&samples, gt)
                }
            });
            metrics.push(MetricsRow {
                iter: iter + 1,
                l_rec: last.0,
                l_ac: last.1,
                k_active: scene.active_body_count(),
                chamfer: cd,
                psnr: None,
                ssim: None,
            });
        }
    }

    // Final transparency sweep so the returned scene has no dead bodies.
    let removed = prune_transparent(&mut scene, cfg.prune_alpha);
    if !removed.is_empty() {
        events.push(StructureEvent::new(
            cfg.total_iters,
            "prune",
            removed.iter().map(|id| id.0).collect(),
        ));
    }

    Ok(Stage1Output {
        scene,
        events,
        metrics,
    })
}

// ---------------------------------------------------------------------------
// Stage 2
// ---------------------------------------------------------------------------

pub struct Stage2Output {
    pub gaussians: GaussianSet,
    pub units: BTreeMap<u32, f64>,
    pub metrics: Vec<MetricsRow>,
}

/// Binds Gaussians to the stage-1 scene and optimizes them photometrically.
pub fn stage2_fit(
    scene: &Scene,
    dataset: &Dataset,
    cfg: &Stage2Config,
    seed: u64,
) -> Result<Stage2Output, OptimizeError> {
    if dataset.views.is_empty() {
        return Err(OptimizeError::EmptyDataset);
    }
    let (w, h) = dataset.resolution();
    let use_ssim = cfg.lambda_ssim > 0.0 && w as usize >= SSIM_WINDOW && h as usize >= SSIM_WINDOW;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let binding = compute_binding(scene, None)?;
    let mut set = init_bound_gaussians(scene, dataset.mean_color(), cfg.sh_degree)?;
    let pos_cfg = PosRegConfig {
        epsilon_pos: cfg.epsilon_pos,
    };

    let targets: Vec<Tensor> = dataset
        .views
        .iter()
        .map(|v| Tensor::from_vec(v.image.data.clone(), &[h as usize, w as usize, 3]))
        .collect();

    let hp = AdamParams::default();
    let nc = set.sh_coeffs();
    let mut adam = [
        AdamState::new(set.len() * 3),
        AdamState::new(set.len() * 4),
        AdamState::new(set.len() * 3),
        AdamState::new(set.len()),
        AdamState::new(set.len() * nc * 3),
    ];
    let mut grad_accum = vec![0.0f64; set.len()];
    let mut grad_steps = 0u64;
    let cadence = cfg.effective_densify_cadence();
    let mut metrics = Vec::new();

    for iter in 0..cfg.total_iters {
        let view_idx = rng.random_range(0..dataset.views.len());
        let view = &dataset.views[view_idx];

        let mut tape = Tape::new();
        let nodes = register_gaussians(&mut tape, &set);
        let img = splat_render_node(
            &mut tape,
            &nodes,
            &set,
            &binding,
            &view.camera,
            [0.0, 0.0, 0.0],
        );
        let l1 = tape.l1(img, &targets[view_idx]);
        let mut loss_node = tape.scale(l1, 1.0 - cfg.lambda_ssim);
        if use_ssim {
            let s = ssim_node(&mut tape, img, &view.image);
            let one = tape.leaf_scalar(1.0);
            let diff = tape.sub(one, s);
            let dssim = tape.scale(diff, 0.5 * cfg.lambda_ssim);
            loss_node = tape.add(loss_node, dssim);
        }
        let photometric = tape.scalar_value(loss_node);
        let lpos = l_pos_node(&mut tape, nodes.mu, &pos_cfg);
        loss_node = tape.add(loss_node, lpos);

        let loss = tape.scalar_value(loss_node);
        if !loss.is_finite() {
            return Err(OptimizeError::Diverged { iter, value: loss });
        }
        let grads = tape.backward(loss_node);

        let g_mu = grads.get_or_zeros(nodes.mu, set.len() * 3);
        for i in 0..set.len() {
            let n = (g_mu[i * 3].powi(2) + g_mu[i * 3 + 1].powi(2) + g_mu[i * 3 + 2].powi(2))
                .sqrt();
            grad_accum[i] += n;
        }
        grad_steps += 1;

        let lr_pos = exp_decay_lr(
            cfg.lr_position,
            cfg.position_lr_final_ratio,
            iter + 1,
            cfg.total_iters,
        );
        let g_quat = grads.get_or_zeros(nodes.quat, set.len() * 4);
        let g_scale = grads.get_or_zeros(nodes.scale, set.len() * 3);
        let g_opacity = grads.get_or_zeros(nodes.opacity, set.len());
        let g_sh = grads.get_or_zeros(nodes.sh, set.len() * nc * 3);
        adam[0].step(&hp, lr_pos, &mut set.mu, &g_mu);
        adam[1].step(&hp, cfg.lr_quat, &mut set.quat, &g_quat);
        adam[2].step(&hp, cfg.lr_scaling, &mut set.scale, &g_scale);
        adam[3].step(&hp, cfg.lr_opacity, &mut set.opacity, &g_opacity);
        adam[4].step(&hp, cfg.lr_sh, &mut set.sh, &g_sh);
        set.clamp_params();

        let densify_due = (iter + 1) % cadence == 0
            && ((iter + 1) as f64) < cfg.densify_until * cfg.total_iters as f64;
        if densify_due {
            let mean_grads: Vec<f64> = grad_accum
                .iter()
                .map(|g| g / grad_steps.max(1) as f64)
                .collect();
            let outcome = densify_and_prune(&set, &mean_grads, &cfg.densify, &mut rng);
            let strides = [3usize, 4, 3, 1, nc * 3];
            for (a, stride) in adam.iter_mut().zip(strides) {
                *a = a.remap(&outcome.source, stride);
            }
            set = outcome.set;
            grad_accum = vec![0.0; set.len()];
            grad_steps = 0;
        }

        if (iter + 1) % cadence == 0 || iter + 1 == cfg.total_iters {
            let eval_views = dataset.views.len().min(4);
            let mut p_acc = 0.0;
            let mut s_acc = 0.0;
            for v in dataset.views.iter().take(eval_views) {
                let rendered = splat_render(&set, &binding, &v.camera, [0.0; 3]);
                p_acc += psnr(&rendered, &v.image)?;
                s_acc += ssim(&rendered, &v.image)?;
            }
            metrics.push(MetricsRow {
                iter: iter + 1,
                l_rec: photometric,
                l_ac: 0.0,
                k_active: scene.active_body_count(),
                chamfer: None,
                psnr: Some(p_acc / eval_views as f64),
                ssim: Some(s_acc / eval_views as f64),
            });
        }
    }

    Ok(Stage2Output {
        gaussians: set,
        units: binding.units,
        metrics,
    })
}

/// Evaluation summary for a fitted scene.
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub chamfer: Option<f64>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub iou: f64,
    pub k_active: usize,
}

pub fn evaluate(
    scene: &Scene,
    gaussians: Option<(&GaussianSet, &BTreeMap<u32, f64>)>,
    dataset: &Dataset,
) -> Result<EvalReport, OptimizeError> {
    let (w, h) = dataset.resolution();
    let raster = SoftRenderConfig::for_image(w, h);
    let cd = dataset.gt_points.as_ref().map(|gt| {
        let samples = scene_surface_samples(scene, EVAL_SAMPLES_PER_BODY);
        if samples.is_empty() {
            f64::INFINITY
        } else {
            chamfer(&samples, gt)
        }
    });
    let mut psnr_v = None;
    let mut ssim_v = None;
    if let Some((set, units)) = gaussians {
        let binding = compute_binding(scene, Some(units))?;
        let mut p_acc = 0.0;
        let mut s_acc = 0.0;
        for v in &dataset.views {
            let rendered = splat_render(set, &binding, &v.camera, [0.0; 3]);
            p_acc += psnr(&rendered, &v.image)?;
            s_acc += ssim(&rendered, &v.image)?;
        }
        psnr_v = Some(p_acc / dataset.views.len() as f64);
        ssim_v = Some(s_acc / dataset.views.len() as f64);
    }
    Ok(EvalReport {
        chamfer: cd,
        psnr: psnr_v,
        ssim: ssim_v,
        iou: silhouette_iou(scene, dataset, &raster),
        k_active: scene.active_body_count(),
    })
}

/// Applies a rigid transform to a primitive's pose parameters.
pub fn transform_primitive(prim: &mut ScenePrimitive, m: &[f64; 16]) -> Result<(), GeometryError> {
    let t_rot = nalgebra::Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
    let t_vec = Vector3::new(m[3], m[7], m[11]);
    let r_new = t_rot * prim.sq.rotation()?;
    prim.sq.rot6 = matrix_to_rot6d(&r_new);
    let t_new = t_rot * Vector3::from(prim.sq.trans) + t_vec;
    prim.sq.trans = [t_new.x, t_new.y, t_new.z];
    Ok(())
}
