//! Soft dual rasterization.
//!
//! Every projected face contributes a smooth occupancy to nearby pixels
//! (opacity times `exp(min(delta/sigma, 0))`, where delta is the signed
//! squared pixel distance to the triangle boundary, positive inside). Per
//! pixel the L nearest faces by depth are alpha-composited front-to-back.
//! The same pass produces per-primitive visible 2D point prompts and box
//! prompts for the semantic losses; that is the "dual" output.
//!
//! Per-face depth is the mean camera depth of its vertices; depth ties break
//! by (owner id, face id) so renders are invariant to mesh input order.

use std::io::{Read, Write};
use std::sync::Arc;

use nalgebra::Vector4;
use thiserror::Error;

use crate::autodiff::{CustomOp, NodeId, Tape, Tensor};
use crate::camera::{Camera, NEAR_EPSILON};
use crate::geometry::{PrimitiveId, PrimitiveMesh};
use crate::img::{ImageGray, ImageRgb};

/// Occupancies below this are dropped from the face buffer. Small enough
/// that exhaustive per-pixel oracles agree with the binned render far below
/// the 1e-6 comparison tolerance.
const OCC_CUTOFF: f64 = 1e-14;

/// Projected triangles with doubled area below this never pass the inside
/// test (point- and line-degenerate faces still get boundary distance).
const DEGENERATE_AREA: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("every vertex is behind the camera")]
    AllClipped,
    #[error("primitive {0} has no visible point prompts in this view")]
    EmptyPrompt(PrimitiveId),
    #[error("face buffer dump is malformed: {0}")]
    BadFaceBuffer(String),
}

/// Softness and compositing depth of the rasterizer.
#[derive(Clone, Debug)]
pub struct SoftRenderConfig {
    /// Soft mask extent, in squared pixels.
    pub sigma: f64,
    /// Faces composited per pixel (L).
    pub faces_per_pixel: usize,
    pub background_color: [f64; 3],
}

impl SoftRenderConfig {
    /// Defaults for an image size: sigma = 1e-4 * diagonal^2, L = 10.
    pub fn for_image(width: u32, height: u32) -> Self {
        let diag2 = (width * width + height * height) as f64;
        Self {
            sigma: 1e-4 * diag2,
            faces_per_pixel: 10,
            background_color: [0.0, 0.0, 0.0],
        }
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        assert!(sigma > 0.0);
        self.sigma = sigma;
        self
    }

    pub fn with_faces_per_pixel(mut self, l: usize) -> Self {
        assert!(l >= 1);
        self.faces_per_pixel = l;
        self
    }
}

/// One mesh to draw, with its flat representation color and opacity.
#[derive(Clone, Debug)]
pub struct MeshInstance<'a> {
    pub mesh: &'a PrimitiveMesh,
    pub color: [f64; 3],
    pub alpha: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct ProjectedVertex {
    pub x: f64,
    pub y: f64,
    /// Homogeneous divisor (distance along the optical axis).
    pub depth: f64,
    pub clipped: bool,
}

/// Projects every mesh vertex to screen coordinates.
///
/// Clipped vertices (divisor <= epsilon) are flagged, never NaN. Errors only
/// when the whole mesh is behind the camera.
pub fn project_vertices(
    mesh: &PrimitiveMesh,
    cam: &Camera,
) -> Result<Vec<ProjectedVertex>, RasterError> {
    let m = cam.world_to_clip();
    let w = cam.width as f64;
    let h = cam.height as f64;
    let mut any_visible = false;
    let projected = mesh
        .world_vertices
        .iter()
        .map(|v| {
            let clip = m * Vector4::new(v.x, v.y, v.z, 1.0);
            if clip.w <= NEAR_EPSILON {
                ProjectedVertex {
                    x: 0.0,
                    y: 0.0,
                    depth: 0.0,
                    clipped: true,
                }
            } else {
                any_visible = true;
                ProjectedVertex {
                    x: (clip.x / clip.w + 1.0) * 0.5 * w,
                    y: (1.0 - clip.y / clip.w) * 0.5 * h,
                    depth: clip.w,
                    clipped: false,
                }
            }
        })
        .collect();
    if any_visible {
        Ok(projected)
    } else {
        Err(RasterError::AllClipped)
    }
}

/// Signed squared distance to a 2D triangle boundary: positive inside,
/// negative outside. Also returns the argmin edge and its clamped segment
/// parameter, which the adjoint reuses.
fn signed_sq_distance(a: [f64; 2], b: [f64; 2], c: [f64; 2], u: [f64; 2]) -> (f64, usize, f64) {
    let verts = [a, b, c];
    let mut best = f64::INFINITY;
    let mut best_edge = 0;
    let mut best_t = 0.0;
    for e in 0..3 {
        let p = verts[e];
        let q = verts[(e + 1) % 3];
        let ex = q[0] - p[0];
        let ey = q[1] - p[1];
        let len2 = ex * ex + ey * ey;
        let t = if len2 > 0.0 {
            (((u[0] - p[0]) * ex + (u[1] - p[1]) * ey) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let dx = u[0] - (p[0] + t * ex);
        let dy = u[1] - (p[1] + t * ey);
        let d2 = dx * dx + dy * dy;
        if d2 < best {
            best = d2;
            best_edge = e;
            best_t = t;
        }
    }

    let cross =
        |p: [f64; 2], q: [f64; 2]| (q[0] - p[0]) * (u[1] - p[1]) - (q[1] - p[1]) * (u[0] - p[0]);
    let c0 = cross(a, b);
    let c1 = cross(b, c);
    let c2 = cross(c, a);
    let area2 = ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])).abs();
    let inside = area2 > DEGENERATE_AREA
        && ((c0 >= 0.0 && c1 >= 0.0 && c2 >= 0.0) || (c0 <= 0.0 && c1 <= 0.0 && c2 <= 0.0));

    if inside {
        (best, best_edge, best_t)
    } else {
        (-best, best_edge, best_t)
    }
}

/// Soft occupancy of one projected face at one point:
/// `alpha * exp(min(delta / sigma, 0))`. Lies in [0, alpha].
pub fn face_occupancy(
    face: &[[f64; 2]; 3],
    pixel: [f64; 2],
    alpha: f64,
    cfg: &SoftRenderConfig,
) -> f64 {
    let (delta, _, _) = signed_sq_distance(face[0], face[1], face[2], pixel);
    alpha * (delta / cfg.sigma).min(0.0).exp()
}

/// Front-to-back alpha compositing of an occupancy/color stack.
/// Returns the composited color and the coverage `1 - prod(1 - O_l)`.
pub fn composite(entries: &[(f64, [f64; 3])], background: &[f64; 3]) -> ([f64; 3], f64) {
    let mut color = [0.0; 3];
    let mut transmittance = 1.0;
    for &(occ, c) in entries {
        for ch in 0..3 {
            color[ch] += transmittance * occ * c[ch];
        }
        transmittance *= 1.0 - occ;
    }
    for ch in 0..3 {
        color[ch] += transmittance * background[ch];
    }
    (color, 1.0 - transmittance)
}

/// One face-buffer record, front-to-back within its pixel list.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaceEntry {
    pub owner: PrimitiveId,
    pub face: u32,
    pub occupancy: f64,
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub image: ImageRgb,
    pub silhouette: ImageGray,
    /// Per-pixel face records, row-major, each at most L entries.
    pub face_buffer: Vec<Vec<FaceEntry>>,
}

#[derive(Clone, Debug)]
struct ProjectedMeshData {
    pixels: Vec<[f64; 2]>,
    depths: Vec<f64>,
    clipped: Vec<bool>,
    faces: Arc<Vec<[u32; 3]>>,
    owner: PrimitiveId,
    alpha: f64,
    color: [f64; 3],
}

impl ProjectedMeshData {
    fn empty(owner: PrimitiveId, faces: Arc<Vec<[u32; 3]>>, color: [f64; 3]) -> Self {
        Self {
            pixels: Vec::new(),
            depths: Vec::new(),
            clipped: Vec::new(),
            faces,
            owner,
            alpha: 0.0,
            color,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct FaceRec {
    mesh: u16,
    face: u32,
    owner: u32,
    depth: f64,
    a: [f64; 2],
    b: [f64; 2],
    c: [f64; 2],
    alpha: f64,
}

/// Per-pixel hit kept for compositing and the backward pass.
#[derive(Clone, Copy, Debug)]
struct PixelHit {
    mesh: u16,
    face: u32,
    occ: f64,
}

struct RasterCore {
    image: ImageRgb,
    silhouette: ImageGray,
    hits: Vec<Vec<PixelHit>>,
}

fn gather_faces(meshes: &[ProjectedMeshData]) -> Vec<FaceRec> {
    let mut recs = Vec::new();
    for (mi, m) in meshes.iter().enumerate() {
        if m.alpha <= 0.0 || m.pixels.is_empty() {
            continue;
        }
        for (fi, f) in m.faces.iter().enumerate() {
            let [i, j, k] = [f[0] as usize, f[1] as usize, f[2] as usize];
            if m.clipped[i] || m.clipped[j] || m.clipped[k] {
                continue;
            }
            recs.push(FaceRec {
                mesh: mi as u16,
                face: fi as u32,
                owner: m.owner.0,
                depth: (m.depths[i] + m.depths[j] + m.depths[k]) / 3.0,
                a: m.pixels[i],
                b: m.pixels[j],
                c: m.pixels[k],
                alpha: m.alpha,
            });
        }
    }
    recs
}

fn raster_core(
    meshes: &[ProjectedMeshData],
    cfg: &SoftRenderConfig,
    width: u32,
    height: u32,
) -> RasterCore {
    let recs = gather_faces(meshes);
    let w = width as usize;
    let h = height as usize;
    // Reach of the soft mask: alpha * exp(-d^2/sigma) >= cutoff.
    let margin = (cfg.sigma * (1.0 / OCC_CUTOFF).ln()).sqrt();

    let mut row_bins: Vec<Vec<u32>> = vec![Vec::new(); h];
    for (ri, r) in recs.iter().enumerate() {
        let min_y = r.a[1].min(r.b[1]).min(r.c[1]) - margin;
        let max_y = r.a[1].max(r.b[1]).max(r.c[1]) + margin;
        if max_y < 0.0 || min_y >= h as f64 {
            continue;
        }
        let y0 = min_y.floor().max(0.0) as usize;
        let y1 = (max_y.ceil().min(h as f64)) as usize;
        for bin in row_bins.iter_mut().take(y1).skip(y0) {
            bin.push(ri as u32);
        }
    }

    let render_row = |y: usize| -> Vec<Vec<PixelHit>> {
        // Candidates carry (depth, owner, face) for the deterministic sort.
        let mut cands: Vec<Vec<(f64, u32, u32, u16, f64)>> = vec![Vec::new(); w];
        let py = y as f64 + 0.5;
        for &ri in &row_bins[y] {
            let r = &recs[ri as usize];
            let min_x = r.a[0].min(r.b[0]).min(r.c[0]) - margin;
            let max_x = r.a[0].max(r.b[0]).max(r.c[0]) + margin;
            if max_x < 0.0 || min_x >= w as f64 {
                continue;
            }
            let x0 = min_x.floor().max(0.0) as usize;
            let x1 = (max_x.ceil().min(w as f64)) as usize;
            for (x, pixel) in cands.iter_mut().enumerate().take(x1).skip(x0) {
                let px = x as f64 + 0.5;
                let (delta, _, _) = signed_sq_distance(r.a, r.b, r.c, [px, py]);
                let occ = r.alpha * (delta / cfg.sigma).min(0.0).exp();
                if occ > OCC_CUTOFF {
                    pixel.push((r.depth, r.owner, r.face, r.mesh, occ));
                }
            }
        }
        cands
            .into_iter()
            .map(|mut pixel| {
                pixel.sort_unstable_by(|a, b| {
                    (a.0, a.1, a.2)
                        .partial_cmp(&(b.0, b.1, b.2))
                        .expect("face depths are finite")
                });
                pixel.truncate(cfg.faces_per_pixel);
                pixel
                    .into_iter()
                    .map(|(_, _, face, mesh, occ)| PixelHit { mesh, face, occ })
                    .collect()
            })
            .collect()
    };

    #[cfg(feature = "parallel")]
    let rows: Vec<Vec<Vec<PixelHit>>> = {
        use rayon::prelude::*;
        (0..h).into_par_iter().map(render_row).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let rows: Vec<Vec<Vec<PixelHit>>> = (0..h).map(render_row).collect();

    let mut image = ImageRgb::new(width, height);
    let mut silhouette = ImageGray::new(width, height);
    let mut hits = Vec::with_capacity(w * h);
    for (y, row) in rows.into_iter().enumerate() {
        for (x, pixel_hits) in row.into_iter().enumerate() {
            let entries: Vec<(f64, [f64; 3])> = pixel_hits
                .iter()
                .map(|hit| (hit.occ, meshes[hit.mesh as usize].color))
                .collect();
            let (color, coverage) = composite(&entries, &cfg.background_color);
            image.set(x as u32, y as u32, color);
            silhouette.set(x as u32, y as u32, coverage);
            hits.push(pixel_hits);
        }
    }

    RasterCore {
        image,
        silhouette,
        hits,
    }
}

fn project_instances(
    instances: &[MeshInstance],
    cam: &Camera,
) -> Result<Vec<ProjectedMeshData>, RasterError> {
    let mut any = false;
    let mut out = Vec::with_capacity(instances.len());
    for inst in instances {
        match project_vertices(inst.mesh, cam) {
            Ok(projected) => {
                any = true;
                out.push(ProjectedMeshData {
                    pixels: projected.iter().map(|p| [p.x, p.y]).collect(),
                    depths: projected.iter().map(|p| p.depth).collect(),
                    clipped: projected.iter().map(|p| p.clipped).collect(),
                    faces: inst.mesh.faces.clone(),
                    owner: inst.mesh.owner_id,
                    alpha: inst.alpha,
                    color: inst.color,
                });
            }
            Err(RasterError::AllClipped) => out.push(ProjectedMeshData::empty(
                inst.mesh.owner_id,
                inst.mesh.faces.clone(),
                inst.color,
            )),
            Err(e) => return Err(e),
        }
    }
    if any {
        Ok(out)
    } else {
        Err(RasterError::AllClipped)
    }
}

/// Renders a set of meshes with flat colors and opacities.
pub fn render(
    instances: &[MeshInstance],
    cam: &Camera,
    cfg: &SoftRenderConfig,
) -> Result<RenderOutput, RasterError> {
    assert!(!instances.is_empty(), "render needs at least one mesh");
    let meshes = project_instances(instances, cam)?;
    let core = raster_core(&meshes, cfg, cam.width, cam.height);
    Ok(RenderOutput {
        image: core.image,
        silhouette: core.silhouette,
        face_buffer: hits_to_entries(&core.hits, &meshes),
    })
}

fn hits_to_entries(hits: &[Vec<PixelHit>], meshes: &[ProjectedMeshData]) -> Vec<Vec<FaceEntry>> {
    hits.iter()
        .map(|pixel| {
            pixel
                .iter()
                .map(|h| FaceEntry {
                    owner: meshes[h.mesh as usize].owner,
                    face: h.face,
                    occupancy: h.occ,
                })
                .collect()
        })
        .collect()
}

/// Coverage mask of one mesh rendered alone.
pub fn solo_coverage(
    instance: &MeshInstance,
    cam: &Camera,
    cfg: &SoftRenderConfig,
) -> Result<ImageGray, RasterError> {
    let meshes = project_instances(std::slice::from_ref(instance), cam)?;
    Ok(raster_core(&meshes, cfg, cam.width, cam.height).silhouette)
}

// ---------------------------------------------------------------------------
// Prompts
// ---------------------------------------------------------------------------

/// Axis-aligned pixel rectangle, closed on both corners.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PromptBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl PromptBox {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    pub fn diagonal(&self) -> f64 {
        ((self.x1 - self.x0).powi(2) + (self.y1 - self.y0).powi(2)).sqrt()
    }

    /// Componentwise union of two boxes.
    pub fn union(&self, other: &PromptBox) -> PromptBox {
        PromptBox {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }
}

/// One visible projected vertex usable as a point prompt.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PromptPoint {
    pub x: f64,
    pub y: f64,
    /// Index of the source vertex in the owner's mesh.
    pub vertex: u32,
}

/// Per-primitive point prompts and box prompt for one view.
#[derive(Clone, Debug)]
pub struct PromptSet {
    pub owner_id: PrimitiveId,
    pub points: Vec<PromptPoint>,
    pub bbox: PromptBox,
}

/// Extracts visible point prompts and box prompts for every instance.
///
/// A projected vertex joins its primitive's prompt set only when the
/// frontmost face-buffer entry at its pixel belongs to that primitive. The
/// box prompt is the bounding rectangle of the primitive's solo coverage
/// mask thresholded at 0.5; points outside the box (soft-rim stragglers) are
/// dropped. Fully hidden primitives yield `EmptyPrompt`.
pub fn visible_point_prompts(
    out: &RenderOutput,
    instances: &[MeshInstance],
    cam: &Camera,
    cfg: &SoftRenderConfig,
) -> Vec<Result<PromptSet, RasterError>> {
    let width = out.silhouette.width;
    let height = out.silhouette.height;
    instances
        .iter()
        .map(|inst| {
            let owner = inst.mesh.owner_id;
            let projected = match project_vertices(inst.mesh, cam) {
                Ok(p) => p,
                Err(_) => return Err(RasterError::EmptyPrompt(owner)),
            };

            let mask = solo_coverage(inst, cam, cfg)?;
            let mut bbox: Option<(u32, u32, u32, u32)> = None;
            for y in 0..height {
                for x in 0..width {
                    if mask.at(x, y) > 0.5 {
                        bbox = Some(match bbox {
                            None => (x, y, x, y),
                            Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                        });
                    }
                }
            }
            let Some((x0, y0, x1, y1)) = bbox else {
                return Err(RasterError::EmptyPrompt(owner));
            };
            let bbox = PromptBox {
                x0: x0 as f64,
                y0: y0 as f64,
                x1: (x1 + 1) as f64,
                y1: (y1 + 1) as f64,
            };

            let mut points = Vec::new();
            for (vi, p) in projected.iter().enumerate() {
                if p.clipped {
                    continue;
                }
                let px = p.x.floor();
                let py = p.y.floor();
                if px < 0.0 || py < 0.0 || px >= width as f64 || py >= height as f64 {
                    continue;
                }
                let entries = &out.face_buffer[(py as u32 * width + px as u32) as usize];
                let visible = entries.first().is_some_and(|front| front.owner == owner);
                if visible && bbox.contains(p.x, p.y) {
                    points.push(PromptPoint {
                        x: p.x,
                        y: p.y,
                        vertex: vi as u32,
                    });
                }
            }

            if points.is_empty() {
                Err(RasterError::EmptyPrompt(owner))
            } else {
                Ok(PromptSet {
                    owner_id: owner,
                    points,
                    bbox,
                })
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Tape integration
// ---------------------------------------------------------------------------

/// Tape node of projected pixel coordinates plus the detached per-vertex
/// depths and clip flags (depth only orders faces; ordering is discrete).
#[derive(Clone, Debug)]
pub struct ProjectedNode {
    /// Value shape `[V, 2]`.
    pub pixels: NodeId,
    pub depths: Vec<f64>,
    pub clipped: Vec<bool>,
}

#[derive(Debug)]
struct ProjectOp {
    inputs: [NodeId; 1],
    world_to_clip: [f64; 16],
    width: f64,
    height: f64,
    clipped: Vec<bool>,
}

impl CustomOp for ProjectOp {
    fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    fn backward(&self, values: &[Tensor], grad_out: &Tensor, acc: &mut dyn FnMut(NodeId, Tensor)) {
        let verts = values[self.inputs[0].0].data();
        let n = verts.len() / 3;
        let m = &self.world_to_clip;
        let g = grad_out.data();
        let mut grad = vec![0.0; n * 3];
        for i in 0..n {
            if self.clipped[i] {
                continue;
            }
            let (gx, gy) = (g[i * 2], g[i * 2 + 1]);
            if gx == 0.0 && gy == 0.0 {
                continue;
            }
            let v = [verts[i * 3], verts[i * 3 + 1], verts[i * 3 + 2]];
            let row = |r: usize| m[r * 4] * v[0] + m[r * 4 + 1] * v[1] + m[r * 4 + 2] * v[2] + m[r * 4 + 3];
            let cx = row(0);
            let cy = row(1);
            let cw = row(3);
            for k in 0..3 {
                // d(clip)/d(vertex component k)
                let dx = m[k];
                let dy = m[4 + k];
                let dw = m[12 + k];
                let dndc_x = (dx * cw - cx * dw) / (cw * cw);
                let dndc_y = (dy * cw - cy * dw) / (cw * cw);
                let dpx = dndc_x * 0.5 * self.width;
                let dpy = -dndc_y * 0.5 * self.height;
                grad[i * 3 + k] += gx * dpx + gy * dpy;
            }
        }
        acc(self.inputs[0], Tensor::from_vec(grad, &[n, 3]));
    }
}

/// Records vertex projection on the tape. Input node value must be `[V, 3]`.
pub fn project_vertices_node(
    tape: &mut Tape,
    verts: NodeId,
    cam: &Camera,
) -> Result<ProjectedNode, RasterError> {
    let m4 = cam.world_to_clip();
    let data = tape.value(verts).data();
    let n = data.len() / 3;
    let w = cam.width as f64;
    let h = cam.height as f64;

    let mut pixels = Vec::with_capacity(n * 2);
    let mut depths = Vec::with_capacity(n);
    let mut clipped = Vec::with_capacity(n);
    let mut any = false;
    for i in 0..n {
        let clip = m4 * Vector4::new(data[i * 3], data[i * 3 + 1], data[i * 3 + 2], 1.0);
        if clip.w <= NEAR_EPSILON {
            pixels.extend_from_slice(&[0.0, 0.0]);
            depths.push(0.0);
            clipped.push(true);
        } else {
            any = true;
            pixels.push((clip.x / clip.w + 1.0) * 0.5 * w);
            pixels.push((1.0 - clip.y / clip.w) * 0.5 * h);
            depths.push(clip.w);
            clipped.push(false);
        }
    }
    if !any {
        return Err(RasterError::AllClipped);
    }

    let mut mat = [0.0; 16];
    for r in 0..4 {
        for c in 0..4 {
            mat[r * 4 + c] = m4[(r, c)];
        }
    }
    let node = tape.custom(
        Tensor::from_vec(pixels, &[n, 2]),
        Box::new(ProjectOp {
            inputs: [verts],
            world_to_clip: mat,
            width: w,
            height: h,
            clipped: clipped.clone(),
        }),
    );
    Ok(ProjectedNode {
        pixels: node,
        depths,
        clipped,
    })
}

/// One differentiable mesh entry for [`render_node`].
pub struct RenderItem<'a> {
    pub projected: &'a ProjectedNode,
    pub faces: Arc<Vec<[u32; 3]>>,
    pub owner: PrimitiveId,
    /// Scalar opacity node.
    pub alpha: NodeId,
    pub color: [f64; 3],
}

#[derive(Debug)]
struct SoftRenderOp {
    /// Interleaved per mesh: pixels node, alpha node.
    inputs: Vec<NodeId>,
    faces: Vec<Arc<Vec<[u32; 3]>>>,
    sigma: f64,
    hits: Vec<Vec<PixelHit>>,
    width: u32,
}

impl CustomOp for SoftRenderOp {
    fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    fn backward(&self, values: &[Tensor], grad_out: &Tensor, acc: &mut dyn FnMut(NodeId, Tensor)) {
        let n_meshes = self.faces.len();
        let mut grad_pixels: Vec<Vec<f64>> = (0..n_meshes)
            .map(|m| vec![0.0; values[self.inputs[m * 2].0].len()])
            .collect();
        let mut grad_alpha = vec![0.0; n_meshes];

        let g = grad_out.data();
        for (pix_idx, pixel_hits) in self.hits.iter().enumerate() {
            let gpix = g[pix_idx];
            if gpix == 0.0 || pixel_hits.is_empty() {
                continue;
            }
            let x = (pix_idx as u32 % self.width) as f64 + 0.5;
            let y = (pix_idx as u32 / self.width) as f64 + 0.5;

            // coverage = 1 - prod(1 - O_l); d(coverage)/dO_l = T_l * S_l.
            let n = pixel_hits.len();
            let mut prefix = vec![1.0; n];
            for l in 1..n {
                prefix[l] = prefix[l - 1] * (1.0 - pixel_hits[l - 1].occ);
            }
            let mut suffix = vec![1.0; n];
            for l in (0..n - 1).rev() {
                suffix[l] = suffix[l + 1] * (1.0 - pixel_hits[l + 1].occ);
            }

            for (l, hit) in pixel_hits.iter().enumerate() {
                let g_occ = gpix * prefix[l] * suffix[l];
                if g_occ == 0.0 {
                    continue;
                }
                let mi = hit.mesh as usize;
                let pixels = values[self.inputs[mi * 2].0].data();
                let alpha = values[self.inputs[mi * 2 + 1].0].data()[0];
                let f = self.faces[mi][hit.face as usize];
                let tri = [
                    [pixels[f[0] as usize * 2], pixels[f[0] as usize * 2 + 1]],
                    [pixels[f[1] as usize * 2], pixels[f[1] as usize * 2 + 1]],
                    [pixels[f[2] as usize * 2], pixels[f[2] as usize * 2 + 1]],
                ];
                let (delta, edge, t) = signed_sq_distance(tri[0], tri[1], tri[2], [x, y]);
                let soft = (delta / self.sigma).min(0.0).exp();
                grad_alpha[mi] += g_occ * soft;

                if delta < 0.0 {
                    // Outside: O = alpha * exp(-d^2 / sigma) with d^2 = -delta.
                    let g_d2 = g_occ * alpha * soft * (-1.0 / self.sigma);
                    let p = tri[edge];
                    let q = tri[(edge + 1) % 3];
                    let closest = [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])];
                    let ux = x - closest[0];
                    let uy = y - closest[1];
                    // d(d^2)/dp = -2 (u - closest)(1 - t), d/dq = -2 (u - closest) t
                    let vp = f[edge] as usize;
                    let vq = f[(edge + 1) % 3] as usize;
                    grad_pixels[mi][vp * 2] += g_d2 * -2.0 * ux * (1.0 - t);
                    grad_pixels[mi][vp * 2 + 1] += g_d2 * -2.0 * uy * (1.0 - t);
                    grad_pixels[mi][vq * 2] += g_d2 * -2.0 * ux * t;
                    grad_pixels[mi][vq * 2 + 1] += g_d2 * -2.0 * uy * t;
                }
            }
        }

        for mi in 0..n_meshes {
            let len = grad_pixels[mi].len();
            acc(
                self.inputs[mi * 2],
                Tensor::from_vec(std::mem::take(&mut grad_pixels[mi]), &[len / 2, 2]),
            );
            acc(
                self.inputs[mi * 2 + 1],
                Tensor::from_vec(vec![grad_alpha[mi]], &[1]),
            );
        }
    }
}

/// Records the soft render. Returns the silhouette node (value `[H, W]`,
/// differentiable through pixel coordinates and opacities) and the full
/// forward output.
pub fn render_node(
    tape: &mut Tape,
    items: &[RenderItem],
    cfg: &SoftRenderConfig,
    width: u32,
    height: u32,
) -> (NodeId, RenderOutput) {
    assert!(!items.is_empty(), "render needs at least one mesh");
    let meshes: Vec<ProjectedMeshData> = items
        .iter()
        .map(|item| {
            let pix = tape.value(item.projected.pixels).data();
            ProjectedMeshData {
                pixels: pix.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
                depths: item.projected.depths.clone(),
                clipped: item.projected.clipped.clone(),
                faces: item.faces.clone(),
                owner: item.owner,
                alpha: tape.scalar_value(item.alpha),
                color: item.color,
            }
        })
        .collect();

    let core = raster_core(&meshes, cfg, width, height);
    let output = RenderOutput {
        image: core.image,
        silhouette: core.silhouette.clone(),
        face_buffer: hits_to_entries(&core.hits, &meshes),
    };

    let op = SoftRenderOp {
        inputs: items
            .iter()
            .flat_map(|item| [item.projected.pixels, item.alpha])
            .collect(),
        faces: items.iter().map(|item| item.faces.clone()).collect(),
        sigma: cfg.sigma,
        hits: core.hits,
        width,
    };
    let node = tape.custom(
        Tensor::from_vec(
            output.silhouette.data.clone(),
            &[height as usize, width as usize],
        ),
        Box::new(op),
    );
    (node, output)
}

// ---------------------------------------------------------------------------
// Face buffer dump
// ---------------------------------------------------------------------------

const FBUF_MAGIC: &[u8; 5] = b"FBUF1";

/// Writes the per-pixel face buffer as a little-endian binary dump:
/// magic "FBUF1", u32 width, u32 height, then per pixel a u32 entry count
/// followed by (u32 owner, u32 face, f64 occupancy) records.
pub fn write_face_buffer<W: Write>(
    out: &RenderOutput,
    w: &mut W,
) -> std::io::Result<()> {
    w.write_all(FBUF_MAGIC)?;
    w.write_all(&out.silhouette.width.to_le_bytes())?;
    w.write_all(&out.silhouette.height.to_le_bytes())?;
    for pixel in &out.face_buffer {
        w.write_all(&(pixel.len() as u32).to_le_bytes())?;
        for e in pixel {
            w.write_all(&e.owner.0.to_le_bytes())?;
            w.write_all(&e.face.to_le_bytes())?;
            w.write_all(&e.occupancy.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a face-buffer dump back; returns (width, height, per-pixel entries).
pub fn read_face_buffer<R: Read>(
    r: &mut R,
) -> Result<(u32, u32, Vec<Vec<FaceEntry>>), RasterError> {
    let mut magic = [0u8; 5];
    read_exact(r, &mut magic)?;
    if &magic != FBUF_MAGIC {
        return Err(RasterError::BadFaceBuffer("bad magic".into()));
    }
    let width = read_u32(r)?;
    let height = read_u32(r)?;
    let n = (width as usize) * (height as usize);
    let mut buffer = Vec::with_capacity(n);
    for _ in 0..n {
        let count = read_u32(r)? as usize;
        let mut pixel = Vec::with_capacity(count);
        for _ in 0..count {
            let owner = read_u32(r)?;
            let face = read_u32(r)?;
            let mut b = [0u8; 8];
            read_exact(r, &mut b)?;
            pixel.push(FaceEntry {
                owner: PrimitiveId(owner),
                face,
                occupancy: f64::from_le_bytes(b),
            });
        }
        buffer.push(pixel);
    }
    Ok((width, height, buffer))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), RasterError> {
    r.read_exact(buf)
        .map_err(|e| RasterError::BadFaceBuffer(e.to_string()))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, RasterError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
