//! Splat Gaussians bound to superquadric triangles.
//!
//! Every Gaussian stores a local position (in units of its owner's mean edge
//! length), a local rotation, world-space scale, opacity, SH color, and the
//! identity pair (primitive id, triangle index) it is bound to. World poses
//! come from composing with the owning triangle's frame, so rigid edits of a
//! primitive carry its Gaussians along exactly; density control copies the
//! identity pair to children so the binding never breaks.
//!
//! The renderer is a CPU take on the usual splatting pipeline: first-order
//! covariance projection, global depth sort, front-to-back compositing, with
//! hand-written adjoints for every Gaussian parameter.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, UnitQuaternion, Vector2, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{CustomOp, NodeId, Tape, Tensor};
use crate::camera::Camera;
use crate::geometry::{matrix_to_rot6d, GeometryError, PrimitiveId};
use crate::img::ImageRgb;
use crate::scene::Scene;

const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;

/// Contributions below this weight are skipped and transmittance below it
/// terminates a pixel. Small enough that exhaustive oracles agree to 1e-5.
const SPLAT_CUTOFF: f64 = 1e-9;

/// Screen-space covariance dilation in squared pixels (antialias floor).
const COV_DILATION: f64 = 0.3;

/// Splats whose projected standard deviation exceeds this many image
/// diagonals are skipped: they arise from surfaces grazing the camera (the
/// background dome's near band) and only smear an almost-constant haze over
/// the frame while destabilizing the fit.
const MAX_SCREEN_SIGMA_DIAGONALS: f64 = 1.0;

#[derive(Debug, Error)]
pub enum GaussiansError {
    #[error("unknown primitive {0}")]
    UnknownPrimitive(PrimitiveId),
    #[error("geometry failure: {0}")]
    Geometry(#[from] GeometryError),
}

/// One bound splat, as a value object.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundGaussian {
    /// Local position in the triangle frame, in units of the owner
    /// primitive's mean edge length at binding time.
    pub mu: [f64; 3],
    /// Local rotation quaternion (w, x, y, z), unit norm.
    pub quat: [f64; 4],
    /// World-space standard deviations, strictly positive.
    pub scale: [f64; 3],
    pub opacity: f64,
    /// SH coefficients, `[coeff][channel]` flattened.
    pub sh: Vec<f64>,
    pub id_k: PrimitiveId,
    pub id_t: u32,
}

/// Struct-of-arrays storage for all bound Gaussians.
#[derive(Clone, Debug, Serialize, Deserialize, Default)]
pub struct GaussianSet {
    pub mu: Vec<f64>,
    pub quat: Vec<f64>,
    pub scale: Vec<f64>,
    pub opacity: Vec<f64>,
    pub sh: Vec<f64>,
    pub id_k: Vec<u32>,
    pub id_t: Vec<u32>,
    pub sh_degree: u32,
}

impl GaussianSet {
    pub fn len(&self) -> usize {
        self.opacity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity.is_empty()
    }

    pub fn sh_coeffs(&self) -> usize {
        if self.sh_degree == 0 {
            1
        } else {
            4
        }
    }

    pub fn get(&self, i: usize) -> BoundGaussian {
        let nc = self.sh_coeffs();
        BoundGaussian {
            mu: self.mu[i * 3..i * 3 + 3].try_into().unwrap(),
            quat: self.quat[i * 4..i * 4 + 4].try_into().unwrap(),
            scale: self.scale[i * 3..i * 3 + 3].try_into().unwrap(),
            opacity: self.opacity[i],
            sh: self.sh[i * nc * 3..(i + 1) * nc * 3].to_vec(),
            id_k: PrimitiveId(self.id_k[i]),
            id_t: self.id_t[i],
        }
    }

    pub fn push(&mut self, g: &BoundGaussian) {
        debug_assert_eq!(g.sh.len(), self.sh_coeffs() * 3);
        self.mu.extend_from_slice(&g.mu);
        self.quat.extend_from_slice(&g.quat);
        self.scale.extend_from_slice(&g.scale);
        self.opacity.push(g.opacity);
        self.sh.extend_from_slice(&g.sh);
        self.id_k.push(g.id_k.0);
        self.id_t.push(g.id_t);
    }

    /// Re-impose invariants after an optimizer step: unit quaternions,
    /// positive scales, opacity in [0, 1].
    pub fn clamp_params(&mut self) {
        for q in self.quat.chunks_exact_mut(4) {
            let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
            if n > 1e-12 {
                for v in q.iter_mut() {
                    *v /= n;
                }
            } else {
                q.copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
            }
        }
        for s in &mut self.scale {
            *s = s.max(1e-6);
        }
        for o in &mut self.opacity {
            *o = o.clamp(0.0, 1.0);
        }
    }

    /// Removes Gaussians bound to any of the given primitive ids.
    pub fn remove_owned_by(&mut self, ids: &[u32]) {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| !ids.contains(&self.id_k[i]))
            .collect();
        *self = self.select(&keep);
    }

    /// New set containing the given indices in order.
    pub fn select(&self, indices: &[usize]) -> GaussianSet {
        let nc = self.sh_coeffs();
        let mut out = GaussianSet {
            sh_degree: self.sh_degree,
            ..Default::default()
        };
        for &i in indices {
            out.mu.extend_from_slice(&self.mu[i * 3..i * 3 + 3]);
            out.quat.extend_from_slice(&self.quat[i * 4..i * 4 + 4]);
            out.scale.extend_from_slice(&self.scale[i * 3..i * 3 + 3]);
            out.opacity.push(self.opacity[i]);
            out.sh
                .extend_from_slice(&self.sh[i * nc * 3..(i + 1) * nc * 3]);
            out.id_k.push(self.id_k[i]);
            out.id_t.push(self.id_t[i]);
        }
        out
    }
}

/// World pose of one triangle: center plus a rotation built from the first
/// edge direction, the face normal, and their cross product.
#[derive(Clone, Debug)]
pub struct TriangleFrame {
    pub center: Vector3<f64>,
    pub rotation: Matrix3<f64>,
}

pub fn triangle_frame(a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> TriangleFrame {
    let center = (a + b + c) / 3.0;
    let e = b - a;
    let n = e.cross(&(c - a));
    let (ex, nx) = if e.norm() > 1e-12 && n.norm() > 1e-12 {
        (e.normalize(), n.normalize())
    } else {
        (Vector3::x(), Vector3::y())
    };
    let rotation = Matrix3::from_columns(&[ex, nx, ex.cross(&nx)]);
    TriangleFrame { center, rotation }
}

/// Per-primitive triangle frames and local length units.
#[derive(Clone, Debug, Default)]
pub struct Binding {
    pub frames: BTreeMap<u32, Vec<TriangleFrame>>,
    /// Mean edge length of each primitive's mesh at binding time.
    pub units: BTreeMap<u32, f64>,
}

/// Computes every primitive's triangle frames from its current mesh.
/// `fixed_units` keeps the original local units across edits; pass `None`
/// at binding time.
pub fn compute_binding(
    scene: &Scene,
    fixed_units: Option<&BTreeMap<u32, f64>>,
) -> Result<Binding, GaussiansError> {
    let mut binding = Binding::default();
    for prim in &scene.primitives {
        let mesh = scene.mesh(prim)?;
        let mut frames = Vec::with_capacity(mesh.faces.len());
        let mut edge_sum = 0.0;
        for f in mesh.faces.iter() {
            let a = &mesh.world_vertices[f[0] as usize];
            let b = &mesh.world_vertices[f[1] as usize];
            let c = &mesh.world_vertices[f[2] as usize];
            frames.push(triangle_frame(a, b, c));
            edge_sum += (b - a).norm() + (c - b).norm() + (a - c).norm();
        }
        let unit = match fixed_units.and_then(|u| u.get(&prim.sq.id.0)) {
            Some(&u) => u,
            None => (edge_sum / (3 * mesh.faces.len()) as f64).max(1e-9),
        };
        binding.frames.insert(prim.sq.id.0, frames);
        binding.units.insert(prim.sq.id.0, unit);
    }
    Ok(binding)
}

/// One Gaussian per triangle: local position at the triangle center,
/// identity rotation, isotropic scale from the triangle's mean edge length,
/// opacity 0.5, degree-0 SH from the mean input color.
pub fn init_bound_gaussians(
    scene: &Scene,
    mean_color: [f64; 3],
    sh_degree: u32,
) -> Result<GaussianSet, GaussiansError> {
    let mut set = GaussianSet {
        sh_degree,
        ..Default::default()
    };
    let nc = set.sh_coeffs();
    for prim in &scene.primitives {
        let mesh = scene.mesh(prim)?;
        for (ti, f) in mesh.faces.iter().enumerate() {
            let a = &mesh.world_vertices[f[0] as usize];
            let b = &mesh.world_vertices[f[1] as usize];
            let c = &mesh.world_vertices[f[2] as usize];
            let mean_edge = ((b - a).norm() + (c - b).norm() + (a - c).norm()) / 3.0;
            let s = mean_edge.max(1e-6);
            let mut sh = vec![0.0; nc * 3];
            for ch in 0..3 {
                sh[ch] = (mean_color[ch] - 0.5) / SH_C0;
            }
            set.push(&BoundGaussian {
                mu: [0.0; 3],
                quat: [1.0, 0.0, 0.0, 0.0],
                scale: [s, s, s],
                opacity: 0.5,
                sh,
                id_k: prim.sq.id,
                id_t: ti as u32,
            });
        }
    }
    Ok(set)
}

/// Maps a local pose to world space through its triangle frame:
/// `pos = R_t (mu * unit) + center`, `rot = Q(R_t) * q`.
pub fn local_to_global(
    mu: &[f64; 3],
    quat: &[f64; 4],
    frame: &TriangleFrame,
    unit: f64,
) -> (Vector3<f64>, [f64; 4]) {
    let pos = frame.rotation * (Vector3::from(*mu) * unit) + frame.center;
    let fq = frame_quat(frame);
    (pos, quat_mul(&fq, quat))
}

/// World pose of one bound Gaussian under a binding.
pub fn world_pose(set: &GaussianSet, i: usize, binding: &Binding) -> (Vector3<f64>, [f64; 4]) {
    let frame = &binding.frames[&set.id_k[i]][set.id_t[i] as usize];
    let unit = binding.units[&set.id_k[i]];
    local_to_global(
        &set.mu[i * 3..i * 3 + 3].try_into().unwrap(),
        &set.quat[i * 4..i * 4 + 4].try_into().unwrap(),
        frame,
        unit,
    )
}

fn frame_quat(frame: &TriangleFrame) -> [f64; 4] {
    let q = UnitQuaternion::from_matrix(&frame.rotation);
    [q.w, q.i, q.j, q.k]
}

/// Hamilton product on (w, x, y, z).
pub fn quat_mul(a: &[f64; 4], b: &[f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

fn quat_to_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// d(R)/d(q_c) for c in {w, x, y, z}.
fn quat_matrix_partials(q: &[f64; 4]) -> [Matrix3<f64>; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0,
        Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0,
        Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0,
        Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0,
    ]
}

/// Left-multiplication matrix: quat_mul(a, q) = L(a) q.
fn quat_left_matrix(a: &[f64; 4]) -> [[f64; 4]; 4] {
    let (w, x, y, z) = (a[0], a[1], a[2], a[3]);
    [
        [w, -x, -y, -z],
        [x, w, -z, y],
        [y, z, w, -x],
        [z, -y, x, w],
    ]
}

// ---------------------------------------------------------------------------
// Positional regularization
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PosRegConfig {
    /// Free-motion radius in triangle-local units.
    pub epsilon_pos: f64,
}

impl Default for PosRegConfig {
    fn default() -> Self {
        Self { epsilon_pos: 0.5 }
    }
}

/// Mean over Gaussians of `max(|mu|, eps) - eps`: zero inside the epsilon
/// ball, linear outside.
pub fn l_pos(set: &GaussianSet, cfg: &PosRegConfig) -> f64 {
    if set.is_empty() {
        return 0.0;
    }
    set.mu
        .chunks_exact(3)
        .map(|m| {
            let n = (m[0] * m[0] + m[1] * m[1] + m[2] * m[2]).sqrt();
            n.max(cfg.epsilon_pos) - cfg.epsilon_pos
        })
        .sum::<f64>()
        / set.len() as f64
}

#[derive(Debug)]
struct LPosOp {
    inputs: [NodeId; 1],
    epsilon: f64,
}

impl CustomOp for LPosOp {
    fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    fn backward(&self, values: &[Tensor], grad_out: &Tensor, acc: &mut dyn FnMut(NodeId, Tensor)) {
        let mu = values[self.inputs[0].0].data();
        let count = (mu.len() / 3).max(1) as f64;
        let g = grad_out.item() / count;
        let mut grad = vec![0.0; mu.len()];
        for (i, m) in mu.chunks_exact(3).enumerate() {
            let n = (m[0] * m[0] + m[1] * m[1] + m[2] * m[2]).sqrt();
            if n > self.epsilon {
                for c in 0..3 {
                    grad[i * 3 + c] = g * m[c] / n;
                }
            }
        }
        acc(
            self.inputs[0],
            Tensor::from_vec(grad, values[self.inputs[0].0].shape()),
        );
    }
}

/// Differentiable version of [`l_pos`] on a `[N, 3]` local-position node.
pub fn l_pos_node(tape: &mut Tape, mu: NodeId, cfg: &PosRegConfig) -> NodeId {
    let data = tape.value(mu).data();
    let count = (data.len() / 3).max(1) as f64;
    let v = data
        .chunks_exact(3)
        .map(|m| {
            let n = (m[0] * m[0] + m[1] * m[1] + m[2] * m[2]).sqrt();
            n.max(cfg.epsilon_pos) - cfg.epsilon_pos
        })
        .sum::<f64>()
        / count;
    tape.custom(
        Tensor::scalar(v),
        Box::new(LPosOp {
            inputs: [mu],
            epsilon: cfg.epsilon_pos,
        }),
    )
}

// ---------------------------------------------------------------------------
// Splat rendering
// ---------------------------------------------------------------------------

/// Per-splat frame constants resolved from the binding before a render.
struct SplatFrames {
    rot: Vec<Matrix3<f64>>,
    center: Vec<Vector3<f64>>,
    unit: Vec<f64>,
    fquat: Vec<[f64; 4]>,
}

fn resolve_frames(set: &GaussianSet, binding: &Binding) -> SplatFrames {
    let n = set.len();
    let mut rot = Vec::with_capacity(n);
    let mut center = Vec::with_capacity(n);
    let mut unit = Vec::with_capacity(n);
    let mut fquat = Vec::with_capacity(n);
    for i in 0..n {
        let f = &binding.frames[&set.id_k[i]][set.id_t[i] as usize];
        rot.push(f.rotation);
        center.push(f.center);
        unit.push(binding.units[&set.id_k[i]]);
        fquat.push(frame_quat(f));
    }
    SplatFrames {
        rot,
        center,
        unit,
        fquat,
    }
}

/// Projection record of one visible splat.
#[derive(Clone, Debug)]
struct ProjSplat {
    mean2d: Vector2<f64>,
    conic: Matrix2<f64>,
    depth: f64,
    x0: i64,
    y0: i64,
    x1: i64,
    y1: i64,
    color: [f64; 3],
    /// 1 where the channel was not clamped.
    color_mask: [f64; 3],
    world_pos: Vector3<f64>,
    cam_pos: Vector3<f64>,
    q_world: [f64; 4],
    q_local_norm: f64,
    cov3d: Matrix3<f64>,
}

struct SplatForward {
    image: ImageRgb,
    projected: Vec<Option<ProjSplat>>,
    /// Per pixel, splat indices in compositing (front-to-back) order.
    hits: Vec<Vec<u32>>,
}

#[allow(clippy::too_many_arguments)]
fn splat_forward(
    mu: &[f64],
    quat: &[f64],
    scale: &[f64],
    opacity: &[f64],
    sh: &[f64],
    sh_degree: u32,
    frames: &SplatFrames,
    cam: &Camera,
    background: [f64; 3],
) -> SplatForward {
    let n = opacity.len();
    let w = cam.width as i64;
    let h = cam.height as i64;
    let view_rot = cam.view_rotation();
    let cam_center = cam.center();
    let (fx, fy) = (cam.fx(), cam.fy());
    let (cx, cy) = (cam.cx(), cam.cy());
    let nc = if sh_degree == 0 { 1 } else { 4 };

    let mut projected: Vec<Option<ProjSplat>> = Vec::with_capacity(n);
    for i in 0..n {
        if opacity[i] <= 0.0 {
            projected.push(None);
            continue;
        }
        let mu_i = Vector3::new(mu[i * 3], mu[i * 3 + 1], mu[i * 3 + 2]);
        let world_pos = frames.rot[i] * (mu_i * frames.unit[i]) + frames.center[i];
        let cam_pos = cam.to_camera(&world_pos);
        let depth = -cam_pos.z;
        if depth <= 1e-6 {
            projected.push(None);
            continue;
        }

        let q_raw = [
            quat[i * 4],
            quat[i * 4 + 1],
            quat[i * 4 + 2],
            quat[i * 4 + 3],
        ];
        let qn = (q_raw.iter().map(|v| v * v).sum::<f64>()).sqrt().max(1e-12);
        let q_local = [q_raw[0] / qn, q_raw[1] / qn, q_raw[2] / qn, q_raw[3] / qn];
        let q_world = quat_mul(&frames.fquat[i], &q_local);
        let r_world = quat_to_matrix(&q_world);
        let s = [scale[i * 3], scale[i * 3 + 1], scale[i * 3 + 2]];
        let s2 = Matrix3::from_diagonal(&Vector3::new(s[0] * s[0], s[1] * s[1], s[2] * s[2]));
        let cov3d = r_world * s2 * r_world.transpose();

        let d = depth;
        let j = Matrix2x3::new(
            fx / d,
            0.0,
            fx * cam_pos.x / (d * d),
            0.0,
            -fy / d,
            -fy * cam_pos.y / (d * d),
        );
        let m_cam = view_rot * cov3d * view_rot.transpose();
        let mut cov2d = j * m_cam * j.transpose();
        cov2d[(0, 0)] += COV_DILATION;
        cov2d[(1, 1)] += COV_DILATION;

        let det = cov2d[(0, 0)] * cov2d[(1, 1)] - cov2d[(0, 1)] * cov2d[(1, 0)];
        if det <= 0.0 {
            projected.push(None);
            continue;
        }
        let conic =
            Matrix2::new(cov2d[(1, 1)], -cov2d[(0, 1)], -cov2d[(1, 0)], cov2d[(0, 0)]) / det;

        let mean2d = Vector2::new(cx + fx * cam_pos.x / d, cy - fy * cam_pos.y / d);

        // Reach where alpha * exp(-0.5 r^2 / lambda_max) >= cutoff.
        let trace_half = 0.5 * (cov2d[(0, 0)] + cov2d[(1, 1)]);
        let gap = (trace_half * trace_half - det).max(0.0).sqrt();
        let lambda_max = trace_half + gap;
        let diag2 = (w * w + h * h) as f64;
        if lambda_max > MAX_SCREEN_SIGMA_DIAGONALS * MAX_SCREEN_SIGMA_DIAGONALS * diag2 {
            projected.push(None);
            continue;
        }
        let reach = (2.0 * (opacity[i] / SPLAT_CUTOFF).ln()).max(0.0).sqrt() * lambda_max.sqrt();
        let x0 = (mean2d.x - reach).floor() as i64;
        let x1 = (mean2d.x + reach).ceil() as i64;
        let y0 = (mean2d.y - reach).floor() as i64;
        let y1 = (mean2d.y + reach).ceil() as i64;
        if x1 < 0 || y1 < 0 || x0 >= w || y0 >= h {
            projected.push(None);
            continue;
        }

        let dir = (world_pos - cam_center).normalize();
        let mut color = [0.0; 3];
        let mut color_mask = [1.0; 3];
        for ch in 0..3 {
            let mut c = 0.5 + SH_C0 * sh[(i * nc) * 3 + ch];
            if nc > 1 {
                c += SH_C1
                    * (-dir.y * sh[(i * nc + 1) * 3 + ch] + dir.z * sh[(i * nc + 2) * 3 + ch]
                        - dir.x * sh[(i * nc + 3) * 3 + ch]);
            }
            if !(0.0..=1.0).contains(&c) {
                color_mask[ch] = 0.0;
                c = c.clamp(0.0, 1.0);
            }
            color[ch] = c;
        }

        projected.push(Some(ProjSplat {
            mean2d,
            conic,
            depth,
            x0: x0.max(0),
            y0: y0.max(0),
            x1: x1.min(w),
            y1: y1.min(h),
            color,
            color_mask,
            world_pos,
            cam_pos,
            q_world,
            q_local_norm: qn,
            cov3d,
        }));
    }

    // Global front-to-back order; depth ties break by index.
    let mut order: Vec<u32> = (0..n as u32)
        .filter(|&i| projected[i as usize].is_some())
        .collect();
    order.sort_by(|&a, &b| {
        let da = projected[a as usize].as_ref().unwrap().depth;
        let db = projected[b as usize].as_ref().unwrap().depth;
        da.partial_cmp(&db).unwrap().then(a.cmp(&b))
    });

    let mut image = ImageRgb::new(cam.width, cam.height);
    let mut transmittance = vec![1.0f64; (w * h) as usize];
    let mut hits: Vec<Vec<u32>> = vec![Vec::new(); (w * h) as usize];

    for &si in &order {
        let p = projected[si as usize].as_ref().unwrap();
        let alpha = opacity[si as usize];
        for py in p.y0..p.y1 {
            for px in p.x0..p.x1 {
                let pi = (py * w + px) as usize;
                let t = transmittance[pi];
                if t < SPLAT_CUTOFF {
                    continue;
                }
                let dx = px as f64 + 0.5 - p.mean2d.x;
                let dy = py as f64 + 0.5 - p.mean2d.y;
                let m = p.conic[(0, 0)] * dx * dx
                    + (p.conic[(0, 1)] + p.conic[(1, 0)]) * dx * dy
                    + p.conic[(1, 1)] * dy * dy;
                if m < 0.0 {
                    continue;
                }
                let weight = alpha * (-0.5 * m).exp();
                if weight < SPLAT_CUTOFF {
                    continue;
                }
                let (x, y) = (px as u32, py as u32);
                let mut c = image.at(x, y);
                for ch in 0..3 {
                    c[ch] += t * weight * p.color[ch];
                }
                image.set(x, y, c);
                transmittance[pi] = t * (1.0 - weight);
                hits[pi].push(si);
            }
        }
    }

    for y in 0..cam.height {
        for x in 0..cam.width {
            let t = transmittance[(y as i64 * w + x as i64) as usize];
            let mut c = image.at(x, y);
            for ch in 0..3 {
                c[ch] += t * background[ch];
            }
            image.set(x, y, c);
        }
    }

    SplatForward {
        image,
        projected,
        hits,
    }
}

/// Renders the bound Gaussians from one camera.
pub fn splat_render(
    set: &GaussianSet,
    binding: &Binding,
    cam: &Camera,
    background: [f64; 3],
) -> ImageRgb {
    let frames = resolve_frames(set, binding);
    splat_forward(
        &set.mu,
        &set.quat,
        &set.scale,
        &set.opacity,
        &set.sh,
        set.sh_degree,
        &frames,
        cam,
        background,
    )
    .image
}

/// Tape handles for the Gaussian parameter blocks.
#[derive(Clone, Copy, Debug)]
pub struct GaussianNodes {
    pub mu: NodeId,
    pub quat: NodeId,
    pub scale: NodeId,
    pub opacity: NodeId,
    pub sh: NodeId,
}

pub fn register_gaussians(tape: &mut Tape, set: &GaussianSet) -> GaussianNodes {
    let n = set.len();
    let nc = set.sh_coeffs();
    GaussianNodes {
        mu: tape.leaf(Tensor::from_vec(set.mu.clone(), &[n, 3])),
        quat: tape.leaf(Tensor::from_vec(set.quat.clone(), &[n, 4])),
        scale: tape.leaf(Tensor::from_vec(set.scale.clone(), &[n, 3])),
        opacity: tape.leaf(Tensor::from_vec(set.opacity.clone(), &[n])),
        sh: tape.leaf(Tensor::from_vec(set.sh.clone(), &[n, nc * 3])),
    }
}

struct SplatRenderOp {
    inputs: [NodeId; 5],
    sh_degree: u32,
    frames: SplatFrames,
    cam: Camera,
    background: [f64; 3],
    forward: SplatForward,
}

impl std::fmt::Debug for SplatRenderOp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SplatRenderOp")
            .field("splats", &self.forward.projected.len())
            .finish()
    }
}

impl CustomOp for SplatRenderOp {
    fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    fn backward(&self, values: &[Tensor], grad_out: &Tensor, acc: &mut dyn FnMut(NodeId, Tensor)) {
        let quat = values[self.inputs[1].0].data();
        let scale = values[self.inputs[2].0].data();
        let opacity = values[self.inputs[3].0].data();
        let sh = values[self.inputs[4].0].data();
        let n = opacity.len();
        let nc = if self.sh_degree == 0 { 1 } else { 4 };

        let mut g_mu = vec![0.0; n * 3];
        let mut g_quat = vec![0.0; n * 4];
        let mut g_scale = vec![0.0; n * 3];
        let mut g_opacity = vec![0.0; n];
        let mut g_sh = vec![0.0; n * nc * 3];

        // Per-pixel compositing adjoints, accumulated per splat.
        let mut g_mean2d = vec![Vector2::<f64>::zeros(); n];
        let mut g_conic = vec![Matrix2::<f64>::zeros(); n];
        let mut g_color = vec![[0.0f64; 3]; n];

        let w = self.cam.width as usize;
        let g = grad_out.data();
        for (pi, pixel_hits) in self.forward.hits.iter().enumerate() {
            if pixel_hits.is_empty() {
                continue;
            }
            let gp = [g[pi * 3], g[pi * 3 + 1], g[pi * 3 + 2]];
            if gp == [0.0; 3] {
                continue;
            }
            let px = (pi % w) as f64 + 0.5;
            let py = (pi / w) as f64 + 0.5;

            let m = pixel_hits.len();
            let mut weights = Vec::with_capacity(m);
            for &si in pixel_hits {
                let p = self.forward.projected[si as usize].as_ref().unwrap();
                let dx = px - p.mean2d.x;
                let dy = py - p.mean2d.y;
                let md = p.conic[(0, 0)] * dx * dx
                    + (p.conic[(0, 1)] + p.conic[(1, 0)]) * dx * dy
                    + p.conic[(1, 1)] * dy * dy;
                weights.push(opacity[si as usize] * (-0.5 * md).exp());
            }
            let mut prefix_t = vec![1.0; m];
            for l in 1..m {
                prefix_t[l] = prefix_t[l - 1] * (1.0 - weights[l - 1]);
            }
            // rest[l]: what composites behind entry l (background included).
            let mut rest = vec![[0.0f64; 3]; m];
            let mut acc_rest = self.background;
            for l in (0..m).rev() {
                rest[l] = acc_rest;
                let color = self.forward.projected[pixel_hits[l] as usize]
                    .as_ref()
                    .unwrap()
                    .color;
                for ch in 0..3 {
                    acc_rest[ch] = weights[l] * color[ch] + (1.0 - weights[l]) * acc_rest[ch];
                }
            }

            for (l, &si) in pixel_hits.iter().enumerate() {
                let i = si as usize;
                let p = self.forward.projected[i].as_ref().unwrap();
                let mut g_w = 0.0;
                for ch in 0..3 {
                    g_w += gp[ch] * prefix_t[l] * (p.color[ch] - rest[l][ch]);
                    g_color[i][ch] += gp[ch] * prefix_t[l] * weights[l];
                }
                if g_w == 0.0 {
                    continue;
                }
                let dx = px - p.mean2d.x;
                let dy = py - p.mean2d.y;
                let md = p.conic[(0, 0)] * dx * dx
                    + (p.conic[(0, 1)] + p.conic[(1, 0)]) * dx * dy
                    + p.conic[(1, 1)] * dy * dy;
                let gv = (-0.5 * md).exp();
                g_opacity[i] += g_w * gv;
                let g_gv = g_w * opacity[i];
                let delta = Vector2::new(dx, dy);
                let cd = p.conic * delta;
                g_mean2d[i] += g_gv * gv * cd;
                g_conic[i] += -0.5 * g_gv * gv * delta * delta.transpose();
            }
        }

        // Chain per splat to the parameter blocks.
        let view_rot = self.cam.view_rotation();
        let cam_center = self.cam.center();
        let (fx, fy) = (self.cam.fx(), self.cam.fy());
        for i in 0..n {
            let Some(p) = self.forward.projected[i].as_ref() else {
                continue;
            };
            if g_mean2d[i] == Vector2::zeros()
                && g_conic[i] == Matrix2::zeros()
                && g_color[i] == [0.0; 3]
            {
                continue;
            }

            // conic = inv(cov2d)
            let g_cov2d = -(p.conic.transpose() * g_conic[i] * p.conic.transpose());

            let d = p.depth;
            let j = Matrix2x3::new(
                fx / d,
                0.0,
                fx * p.cam_pos.x / (d * d),
                0.0,
                -fy / d,
                -fy * p.cam_pos.y / (d * d),
            );
            let m_cam = view_rot * p.cov3d * view_rot.transpose();

            // cov2d = J M J^T: gradient into J and into M.
            let g_j = g_cov2d * j * m_cam.transpose() + g_cov2d.transpose() * j * m_cam;
            let mut g_cam = Vector3::zeros();
            g_cam.x += g_j[(0, 2)] * fx / (d * d);
            g_cam.y += g_j[(1, 2)] * (-fy / (d * d));
            g_cam.z += g_j[(0, 0)] * fx / (d * d)
                + g_j[(0, 2)] * 2.0 * fx * p.cam_pos.x / (d * d * d)
                + g_j[(1, 1)] * (-fy / (d * d))
                + g_j[(1, 2)] * (-2.0 * fy * p.cam_pos.y / (d * d * d));

            g_cam.x += g_mean2d[i].x * fx / d;
            g_cam.y += g_mean2d[i].y * (-fy / d);
            g_cam.z += g_mean2d[i].x * fx * p.cam_pos.x / (d * d)
                + g_mean2d[i].y * (-fy * p.cam_pos.y / (d * d));

            let g_m = j.transpose() * g_cov2d * j;
            let g_cov3d = view_rot.transpose() * g_m * view_rot;

            // cov3d = R S^2 R^T
            let r = quat_to_matrix(&p.q_world);
            let s = [scale[i * 3], scale[i * 3 + 1], scale[i * 3 + 2]];
            let s2 = Matrix3::from_diagonal(&Vector3::new(s[0] * s[0], s[1] * s[1], s[2] * s[2]));
            let g_r = (g_cov3d + g_cov3d.transpose()) * r * s2;
            let rt_g_r = r.transpose() * g_cov3d * r;
            for c in 0..3 {
                g_scale[i * 3 + c] += 2.0 * s[c] * rt_g_r[(c, c)];
            }

            // R(q_world) -> q_world -> normalized local quat -> raw quat.
            let partials = quat_matrix_partials(&p.q_world);
            let mut g_qw = [0.0; 4];
            for (c, part) in partials.iter().enumerate() {
                g_qw[c] = g_r.component_mul(part).sum();
            }
            let lm = quat_left_matrix(&self.frames.fquat[i]);
            let mut g_ql = [0.0; 4];
            for (a, row) in lm.iter().enumerate() {
                for (b, entry) in row.iter().enumerate() {
                    g_ql[b] += entry * g_qw[a];
                }
            }
            let qn = p.q_local_norm;
            let q_raw = [
                quat[i * 4],
                quat[i * 4 + 1],
                quat[i * 4 + 2],
                quat[i * 4 + 3],
            ];
            let qhat = [q_raw[0] / qn, q_raw[1] / qn, q_raw[2] / qn, q_raw[3] / qn];
            let dot: f64 = (0..4).map(|c| qhat[c] * g_ql[c]).sum();
            for c in 0..4 {
                g_quat[i * 4 + c] += (g_ql[c] - dot * qhat[c]) / qn;
            }

            // Color -> SH coefficients and, for degree 1, the view direction.
            let dir_raw = p.world_pos - cam_center;
            let dn = dir_raw.norm();
            let dir = dir_raw / dn;
            let mut g_dir = Vector3::zeros();
            for ch in 0..3 {
                let gc = g_color[i][ch] * p.color_mask[ch];
                if gc == 0.0 {
                    continue;
                }
                g_sh[(i * nc) * 3 + ch] += gc * SH_C0;
                if nc > 1 {
                    g_sh[(i * nc + 1) * 3 + ch] += gc * SH_C1 * (-dir.y);
                    g_sh[(i * nc + 2) * 3 + ch] += gc * SH_C1 * dir.z;
                    g_sh[(i * nc + 3) * 3 + ch] += gc * SH_C1 * (-dir.x);
                    g_dir += gc
                        * SH_C1
                        * Vector3::new(
                            -sh[(i * nc + 3) * 3 + ch],
                            -sh[(i * nc + 1) * 3 + ch],
                            sh[(i * nc + 2) * 3 + ch],
                        );
                }
            }
            let mut g_world = Vector3::zeros();
            if g_dir != Vector3::zeros() {
                g_world += (g_dir - dir * dir.dot(&g_dir)) / dn;
            }

            // cam_pos = W * world + t
            g_world += view_rot.transpose() * g_cam;

            // world = F_rot (mu * unit) + center
            let gm = self.frames.rot[i].transpose() * g_world * self.frames.unit[i];
            g_mu[i * 3] += gm.x;
            g_mu[i * 3 + 1] += gm.y;
            g_mu[i * 3 + 2] += gm.z;
        }

        acc(self.inputs[0], Tensor::from_vec(g_mu, &[n, 3]));
        acc(self.inputs[1], Tensor::from_vec(g_quat, &[n, 4]));
        acc(self.inputs[2], Tensor::from_vec(g_scale, &[n, 3]));
        acc(self.inputs[3], Tensor::from_vec(g_opacity, &[n]));
        acc(self.inputs[4], Tensor::from_vec(g_sh, &[n, nc * 3]));
    }
}

/// Records a differentiable splat render; the node value is `[H, W, 3]`.
pub fn splat_render_node(
    tape: &mut Tape,
    nodes: &GaussianNodes,
    set: &GaussianSet,
    binding: &Binding,
    cam: &Camera,
    background: [f64; 3],
) -> NodeId {
    let frames = resolve_frames(set, binding);
    let forward = splat_forward(
        tape.value(nodes.mu).data(),
        tape.value(nodes.quat).data(),
        tape.value(nodes.scale).data(),
        tape.value(nodes.opacity).data(),
        tape.value(nodes.sh).data(),
        set.sh_degree,
        &frames,
        cam,
        background,
    );
    let value = Tensor::from_vec(
        forward.image.data.clone(),
        &[cam.height as usize, cam.width as usize, 3],
    );
    tape.custom(
        value,
        Box::new(SplatRenderOp {
            inputs: [nodes.mu, nodes.quat, nodes.scale, nodes.opacity, nodes.sh],
            sh_degree: set.sh_degree,
            frames,
            cam: cam.clone(),
            background,
            forward,
        }),
    )
}

// ---------------------------------------------------------------------------
// Density control
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DensifyConfig {
    /// Mean accumulated positional-gradient norm above which a splat is
    /// densified.
    pub grad_threshold: f64,
    /// World-size split point: smaller splats clone, larger ones split.
    pub size_threshold: f64,
    /// Split children shrink by this factor.
    pub split_shrink: f64,
    /// Splats below this opacity are pruned.
    pub min_opacity: f64,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            grad_threshold: 2e-4,
            size_threshold: 0.05,
            split_shrink: 1.6,
            min_opacity: 0.005,
        }
    }
}

/// Outcome of one density-control pass: the new set plus, per new Gaussian,
/// the index it came from (None for freshly sampled split children), so the
/// optimizer can carry moments over.
pub struct DensifyOutcome {
    pub set: GaussianSet,
    pub source: Vec<Option<usize>>,
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Clone-and-split density control with binding inheritance, then opacity
/// pruning. `grad_norm` is the per-splat mean accumulated gradient norm of
/// the local position. Children copy (id_k, id_t) verbatim.
pub fn densify_and_prune(
    set: &GaussianSet,
    grad_norm: &[f64],
    cfg: &DensifyConfig,
    rng: &mut impl Rng,
) -> DensifyOutcome {
    assert_eq!(grad_norm.len(), set.len());
    let nc = set.sh_coeffs();
    let mut out = GaussianSet {
        sh_degree: set.sh_degree,
        ..Default::default()
    };
    let mut source = Vec::new();
    let mut cloned = 0;
    let mut split = 0;
    let mut pruned = 0;

    for i in 0..set.len() {
        if set.opacity[i] < cfg.min_opacity {
            pruned += 1;
            continue;
        }
        let g = set.get(i);
        let max_scale = g.scale.iter().cloned().fold(0.0, f64::max);
        let hot = grad_norm[i] > cfg.grad_threshold;
        if hot && max_scale > cfg.size_threshold {
            // Split: two children sampled inside the parent, shrunk scale.
            split += 1;
            let r_local = quat_to_matrix(&normalized(&g.quat));
            for _ in 0..2 {
                let sample = Vector3::new(
                    gauss_sample(rng) * g.scale[0],
                    gauss_sample(rng) * g.scale[1],
                    gauss_sample(rng) * g.scale[2],
                );
                // Offset expressed in the triangle-local frame (world scale
                // divided by the local unit is handled through mu directly:
                // mu is unitless so convert with the parent's own frame).
                let offset = r_local * sample;
                let mut child = g.clone();
                for c in 0..3 {
                    child.mu[c] += offset[c];
                    child.scale[c] = (g.scale[c] / cfg.split_shrink).max(1e-6);
                }
                out.push(&child);
                source.push(None);
            }
        } else if hot {
            // Clone: identical copy, same identity pair and local position.
            cloned += 1;
            out.push(&g);
            source.push(Some(i));
            out.push(&g);
            source.push(None);
        } else {
            out.push(&g);
            source.push(Some(i));
        }
    }

    debug_assert_eq!(out.sh.len(), out.len() * nc * 3);
    DensifyOutcome {
        set: out,
        source,
        cloned,
        split,
        pruned,
    }
}

fn normalized(q: &[f64; 4]) -> [f64; 4] {
    let n = (q.iter().map(|v| v * v).sum::<f64>()).sqrt().max(1e-12);
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Box-Muller standard normal sample.
fn gauss_sample(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.random_range(1e-12..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

// ---------------------------------------------------------------------------
// Edits
// ---------------------------------------------------------------------------

/// Batch edit file: rigid 4x4 transforms (row-major) per primitive id, plus
/// deletions.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct EditSpec {
    #[serde(default)]
    pub edits: Vec<EditTransform>,
    #[serde(default)]
    pub delete: Vec<u32>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EditTransform {
    pub id: u32,
    /// Row-major 4x4 rigid transform.
    pub matrix: [f64; 16],
}

/// Applies rigid edits and deletions to the scene and its bound Gaussians.
///
/// Edited primitives get new rotation/translation parameters; their
/// Gaussians follow automatically through the recomputed triangle frames.
/// Deleting a primitive removes every Gaussian bound to it.
pub fn apply_edit(
    scene: &mut Scene,
    set: &mut GaussianSet,
    spec: &EditSpec,
) -> Result<(), GaussiansError> {
    for e in &spec.edits {
        if scene.find(PrimitiveId(e.id)).is_none() {
            return Err(GaussiansError::UnknownPrimitive(PrimitiveId(e.id)));
        }
    }
    for id in &spec.delete {
        if scene.find(PrimitiveId(*id)).is_none() {
            return Err(GaussiansError::UnknownPrimitive(PrimitiveId(*id)));
        }
    }

    for e in &spec.edits {
        let m = &e.matrix;
        let t_rot = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let t_vec = Vector3::new(m[3], m[7], m[11]);
        let prim = scene.find_mut(PrimitiveId(e.id)).expect("checked above");
        let r_old = prim.sq.rotation()?;
        let r_new = t_rot * r_old;
        prim.sq.rot6 = matrix_to_rot6d(&r_new);
        let t_new = t_rot * Vector3::from(prim.sq.trans) + t_vec;
        prim.sq.trans = [t_new.x, t_new.y, t_new.z];
    }

    if !spec.delete.is_empty() {
        for id in &spec.delete {
            scene.remove(PrimitiveId(*id));
        }
        set.remove_owned_by(&spec.delete);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// PLY export
// ---------------------------------------------------------------------------

/// Binary little-endian PLY with world-space poses plus the identity pair.
pub fn write_splat_ply<W: Write>(
    set: &GaussianSet,
    binding: &Binding,
    w: &mut W,
) -> std::io::Result<()> {
    let nc = set.sh_coeffs();
    writeln!(w, "ply")?;
    writeln!(w, "format binary_little_endian 1.0")?;
    writeln!(w, "element vertex {}", set.len())?;
    for field in ["x", "y", "z"] {
        writeln!(w, "property float {}", field)?;
    }
    for c in 0..3 {
        writeln!(w, "property float scale_{}", c)?;
    }
    for c in 0..4 {
        writeln!(w, "property float rot_{}", c)?;
    }
    writeln!(w, "property float opacity")?;
    for c in 0..nc * 3 {
        writeln!(w, "property float f_dc_{}", c)?;
    }
    writeln!(w, "property uint id_k")?;
    writeln!(w, "property uint id_t")?;
    writeln!(w, "end_header")?;

    for i in 0..set.len() {
        let (pos, rot) = world_pose(set, i, binding);
        for v in [pos.x, pos.y, pos.z] {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        for c in 0..3 {
            w.write_all(&(set.scale[i * 3 + c] as f32).to_le_bytes())?;
        }
        for v in rot {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        w.write_all(&(set.opacity[i] as f32).to_le_bytes())?;
        for c in 0..nc * 3 {
            w.write_all(&(set.sh[i * nc * 3 + c] as f32).to_le_bytes())?;
        }
        w.write_all(&set.id_k[i].to_le_bytes())?;
        w.write_all(&set.id_t[i].to_le_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::fd;
    use crate::camera::look_at;
    use crate::geometry::Superquadric;
    use crate::scene::PrimitiveKind;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn test_scene() -> Scene {
        let mut scene = Scene::new(1);
        let mut a = Superquadric::unit_sphere(PrimitiveId(0));
        a.scale = [0.5, 0.5, 0.5];
        a.trans = [-0.6, 0.0, 0.0];
        scene.add(a, PrimitiveKind::Body);
        let mut b = Superquadric::unit_sphere(PrimitiveId(0));
        b.scale = [0.4, 0.6, 0.4];
        b.trans = [0.6, 0.0, 0.0];
        scene.add(b, PrimitiveKind::Body);
        scene
    }

    fn test_camera(size: u32) -> Camera {
        let view = look_at(
            Vector3::new(0.2, 0.4, 3.0),
            Vector3::zeros(),
            Vector3::new(0.0, 1.0, 0.0),
        );
        Camera::centered(view, size as f64, size, size)
    }

    #[test]
    fn init_binds_one_gaussian_per_triangle() {
        let scene = test_scene();
        let set = init_bound_gaussians(&scene, [0.4, 0.5, 0.6], 0).unwrap();
        let faces = scene.template.face_count();
        assert_eq!(set.len(), 2 * faces);
        for i in 0..set.len() {
            let g = set.get(i);
            assert!(scene.find(g.id_k).is_some());
            assert!((g.id_t as usize) < faces);
            assert_eq!(g.mu, [0.0; 3]);
            assert_eq!(g.quat, [1.0, 0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn initial_world_positions_are_triangle_centers() {
        let scene = test_scene();
        let set = init_bound_gaussians(&scene, [0.5; 3], 0).unwrap();
        let binding = compute_binding(&scene, None).unwrap();
        for i in 0..set.len() {
            let (pos, _) = world_pose(&set, i, &binding);
            let prim = scene.find(PrimitiveId(set.id_k[i])).unwrap();
            let mesh = scene.mesh(prim).unwrap();
            let f = mesh.faces[set.id_t[i] as usize];
            let center = (mesh.world_vertices[f[0] as usize]
                + mesh.world_vertices[f[1] as usize]
                + mesh.world_vertices[f[2] as usize])
                / 3.0;
            assert!((pos - center).norm() < 1e-12);
        }
    }

    #[test]
    fn identity_frame_is_a_no_op() {
        let frame = TriangleFrame {
            center: Vector3::zeros(),
            rotation: Matrix3::identity(),
        };
        let mu = [0.3, -0.2, 0.9];
        let quat = [0.9, 0.1, -0.3, 0.27];
        let (pos, rot) = local_to_global(&mu, &quat, &frame, 1.0);
        assert_abs_diff_eq!(pos, Vector3::from(mu), epsilon = 1e-12);
        for c in 0..4 {
            assert_abs_diff_eq!(rot[c], quat[c], epsilon = 1e-12);
        }
    }

    #[test]
    fn rigid_edit_transforms_only_its_gaussians() {
        let mut scene = test_scene();
        let set = init_bound_gaussians(&scene, [0.5; 3], 0).unwrap();
        let binding_before = compute_binding(&scene, None).unwrap();
        let poses_before: Vec<_> = (0..set.len()).map(|i| world_pose(&set, i, &binding_before)).collect();

        // Rotate primitive 0 by 90 degrees about its own center (y axis).
        let target = PrimitiveId(0);
        let center = Vector3::from(scene.find(target).unwrap().sq.trans);
        let rot90 = nalgebra::Rotation3::from_axis_angle(&Vector3::y_axis(), std::f64::consts::FRAC_PI_2);
        let t_vec = center - rot90 * center;
        let mut matrix = [0.0; 16];
        for r in 0..3 {
            for c in 0..3 {
                matrix[r * 4 + c] = rot90.matrix()[(r, c)];
            }
            matrix[r * 4 + 3] = t_vec[r];
        }
        matrix[15] = 1.0;

        let mut edited = set.clone();
        apply_edit(
            &mut scene,
            &mut edited,
            &EditSpec {
                edits: vec![EditTransform { id: 0, matrix }],
                delete: vec![],
            },
        )
        .unwrap();
        let binding_after = compute_binding(&scene, Some(&binding_before.units)).unwrap();

        for i in 0..edited.len() {
            let (pos_after, _) = world_pose(&edited, i, &binding_after);
            let (pos_before, _) = poses_before[i];
            if edited.id_k[i] == 0 {
                let expect = rot90 * pos_before + t_vec;
                assert!(
                    (pos_after - expect).norm() < 1e-6,
                    "edited gaussian off by {}",
                    (pos_after - expect).norm()
                );
            } else {
                assert_eq!(pos_after, pos_before, "untouched gaussian moved");
            }
        }
    }

    #[test]
    fn identity_edit_renders_identically() {
        let mut scene = test_scene();
        let mut set = init_bound_gaussians(&scene, [0.6, 0.3, 0.2], 0).unwrap();
        let binding = compute_binding(&scene, None).unwrap();
        let cam = test_camera(24);
        let before = splat_render(&set, &binding, &cam, [0.0; 3]);

        let mut identity = [0.0; 16];
        for i in 0..4 {
            identity[i * 4 + i] = 1.0;
        }
        apply_edit(
            &mut scene,
            &mut set,
            &EditSpec {
                edits: vec![EditTransform { id: 1, matrix: identity }],
                delete: vec![],
            },
        )
        .unwrap();
        let binding2 = compute_binding(&scene, Some(&binding.units)).unwrap();
        let after = splat_render(&set, &binding2, &cam, [0.0; 3]);
        assert_eq!(before.data, after.data);
    }

    #[test]
    fn delete_removes_exactly_its_gaussians() {
        let mut scene = test_scene();
        let mut set = init_bound_gaussians(&scene, [0.5; 3], 0).unwrap();
        let total = set.len();
        let owned: usize = set.id_k.iter().filter(|&&k| k == 0).count();
        apply_edit(
            &mut scene,
            &mut set,
            &EditSpec {
                edits: vec![],
                delete: vec![0],
            },
        )
        .unwrap();
        assert_eq!(set.len(), total - owned);
        assert!(set.id_k.iter().all(|&k| k != 0));
        assert!(scene.find(PrimitiveId(0)).is_none());
    }

    #[test]
    fn unknown_primitive_edit_is_an_error() {
        let mut scene = test_scene();
        let mut set = init_bound_gaussians(&scene, [0.5; 3], 0).unwrap();
        let r = apply_edit(
            &mut scene,
            &mut set,
            &EditSpec {
                edits: vec![],
                delete: vec![99],
            },
        );
        assert!(matches!(r, Err(GaussiansError::UnknownPrimitive(_))));
    }

    #[test]
    fn l_pos_examples() {
        let mut set = GaussianSet {
            sh_degree: 0,
            ..Default::default()
        };
        for mu in [[0.1, 0.0, 0.0], [0.0, 0.3, 0.0], [0.2, 0.2, 0.2]] {
            set.push(&BoundGaussian {
                mu,
                quat: [1.0, 0.0, 0.0, 0.0],
                scale: [0.1; 3],
                opacity: 0.5,
                sh: vec![0.0; 3],
                id_k: PrimitiveId(0),
                id_t: 0,
            });
        }
        let cfg = PosRegConfig { epsilon_pos: 0.5 };
        assert_eq!(l_pos(&set, &cfg), 0.0);

        let mut single = GaussianSet {
            sh_degree: 0,
            ..Default::default()
        };
        single.push(&BoundGaussian {
            mu: [1.5, 0.0, 0.0],
            quat: [1.0, 0.0, 0.0, 0.0],
            scale: [0.1; 3],
            opacity: 0.5,
            sh: vec![0.0; 3],
            id_k: PrimitiveId(0),
            id_t: 0,
        });
        assert!((l_pos(&single, &cfg) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn l_pos_gradient_matches_finite_differences_outside_the_ball() {
        let cfg = PosRegConfig { epsilon_pos: 0.5 };
        let mu0 = vec![0.9, -0.4, 0.3, 0.1, 0.1, 0.05, -1.2, 0.8, 0.6];

        let mut f = |x: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let mu = tape.leaf(Tensor::from_vec(x.to_vec(), &[3, 3]));
            let l = l_pos_node(&mut tape, mu, &cfg);
            tape.scalar_value(l)
        };
        let mut tape = Tape::new();
        let mu = tape.leaf(Tensor::from_vec(mu0.clone(), &[3, 3]));
        let l = l_pos_node(&mut tape, mu, &cfg);
        let grads = tape.backward(l);
        let analytic = grads.get_or_zeros(mu, 9);
        // Inside-ball gaussian gets exactly zero gradient.
        assert_eq!(&analytic[3..6], &[0.0, 0.0, 0.0]);
        let err = fd::check_gradient(&mut f, &mu0, &analytic, 1e-6, 1e-9);
        assert!(err < 1e-4, "l_pos rel err {}", err);
    }

    /// Exhaustive splat oracle: every Gaussian evaluated at every pixel in
    /// depth order, no bounding boxes, no cutoffs.
    fn oracle_splat(
        set: &GaussianSet,
        binding: &Binding,
        cam: &Camera,
        background: [f64; 3],
    ) -> ImageRgb {
        let view_rot = cam.view_rotation();
        let (fx, fy, cx, cy) = (cam.fx(), cam.fy(), cam.cx(), cam.cy());
        let nc = set.sh_coeffs();

        struct OSplat {
            mean: Vector2<f64>,
            conic: Matrix2<f64>,
            depth: f64,
            color: [f64; 3],
            alpha: f64,
        }
        let mut splats = Vec::new();
        for i in 0..set.len() {
            if set.opacity[i] <= 0.0 {
                continue;
            }
            let (pos, rot) = world_pose(set, i, binding);
            let cp = cam.to_camera(&pos);
            let d = -cp.z;
            if d <= 1e-6 {
                continue;
            }
            let r = quat_to_matrix(&normalized(&rot));
            let s = &set.scale[i * 3..i * 3 + 3];
            let s2 = Matrix3::from_diagonal(&Vector3::new(s[0] * s[0], s[1] * s[1], s[2] * s[2]));
            let cov3d = r * s2 * r.transpose();
            let j = Matrix2x3::new(
                fx / d,
                0.0,
                fx * cp.x / (d * d),
                0.0,
                -fy / d,
                -fy * cp.y / (d * d),
            );
            let mut cov2d = j * (view_rot * cov3d * view_rot.transpose()) * j.transpose();
            cov2d[(0, 0)] += COV_DILATION;
            cov2d[(1, 1)] += COV_DILATION;
            let det = cov2d[(0, 0)] * cov2d[(1, 1)] - cov2d[(0, 1)] * cov2d[(1, 0)];
            if det <= 0.0 {
                continue;
            }
            let conic =
                Matrix2::new(cov2d[(1, 1)], -cov2d[(0, 1)], -cov2d[(1, 0)], cov2d[(0, 0)]) / det;
            let dir = (pos - cam.center()).normalize();
            let mut color = [0.0; 3];
            for ch in 0..3 {
                let mut c = 0.5 + SH_C0 * set.sh[(i * nc) * 3 + ch];
                if nc > 1 {
                    c += SH_C1
                        * (-dir.y * set.sh[(i * nc + 1) * 3 + ch]
                            + dir.z * set.sh[(i * nc + 2) * 3 + ch]
                            - dir.x * set.sh[(i * nc + 3) * 3 + ch]);
                }
                color[ch] = c.clamp(0.0, 1.0);
            }
            splats.push((
                i,
                OSplat {
                    mean: Vector2::new(cx + fx * cp.x / d, cy - fy * cp.y / d),
                    conic,
                    depth: d,
                    color,
                    alpha: set.opacity[i],
                },
            ));
        }
        splats.sort_by(|a, b| {
            a.1.depth
                .partial_cmp(&b.1.depth)
                .unwrap()
                .then(a.0.cmp(&b.0))
        });

        let mut img = ImageRgb::new(cam.width, cam.height);
        for y in 0..cam.height {
            for x in 0..cam.width {
                let u = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
                let mut color = [0.0; 3];
                let mut t = 1.0;
                for (_, s) in &splats {
                    let delta = u - s.mean;
                    let m = (s.conic * delta).dot(&delta);
                    if m < 0.0 {
                        continue;
                    }
                    let w = s.alpha * (-0.5 * m).exp();
                    for ch in 0..3 {
                        color[ch] += t * w * s.color[ch];
                    }
                    t *= 1.0 - w;
                }
                for ch in 0..3 {
                    color[ch] += t * background[ch];
                }
                img.set(x, y, color);
            }
        }
        img
    }

    fn perturbed_set(scene: &Scene, rng: &mut impl Rng, sh_degree: u32) -> GaussianSet {
        let mut set = init_bound_gaussians(scene, [0.6, 0.4, 0.5], sh_degree).unwrap();
        for v in &mut set.mu {
            *v += rng.random_range(-0.3..0.3);
        }
        for q in set.quat.chunks_exact_mut(4) {
            for v in q.iter_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        set.clamp_params();
        for v in &mut set.opacity {
            *v = rng.random_range(0.2..0.95);
        }
        for v in &mut set.sh {
            *v += rng.random_range(-0.3..0.3);
        }
        for v in &mut set.scale {
            *v *= rng.random_range(0.6..1.6);
        }
        set
    }

    #[test]
    fn splat_render_matches_exhaustive_oracle() {
        let mut scene = Scene::new(0);
        let mut a = Superquadric::unit_sphere(PrimitiveId(0));
        a.scale = [0.5, 0.6, 0.5];
        a.trans = [-0.4, 0.0, 0.0];
        scene.add(a, PrimitiveKind::Body);
        let mut b = Superquadric::unit_sphere(PrimitiveId(0));
        b.scale = [0.4, 0.4, 0.4];
        b.trans = [0.5, 0.1, 0.2];
        scene.add(b, PrimitiveKind::Body);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for degree in [0u32, 1] {
            let set = perturbed_set(&scene, &mut rng, degree);
            let binding = compute_binding(&scene, None).unwrap();
            let cam = test_camera(32);
            let bg = [0.1, 0.2, 0.3];
            let fast = splat_render(&set, &binding, &cam, bg);
            let oracle = oracle_splat(&set, &binding, &cam, bg);
            let max_diff = fast
                .data
                .iter()
                .zip(&oracle.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(max_diff < 1e-5, "degree {}: diff {}", degree, max_diff);
        }
    }

    #[test]
    fn single_gaussian_peaks_at_its_pixel() {
        let mut scene = Scene::new(0);
        scene.add(Superquadric::unit_sphere(PrimitiveId(0)), PrimitiveKind::Body);
        let mut set = GaussianSet {
            sh_degree: 0,
            ..Default::default()
        };
        set.push(&BoundGaussian {
            mu: [0.0; 3],
            quat: [1.0, 0.0, 0.0, 0.0],
            scale: [0.05; 3],
            opacity: 1.0,
            sh: vec![(1.0 - 0.5) / SH_C0; 3],
            id_k: PrimitiveId(0),
            id_t: 0,
        });
        // Bind to a frame at the origin by reusing triangle 0 and forcing
        // mu so the world position is the origin.
        let binding = compute_binding(&scene, None).unwrap();
        let frame = &binding.frames[&0][0];
        let unit = binding.units[&0];
        let local = frame.rotation.transpose() * (-frame.center) / unit;
        set.mu = vec![local.x, local.y, local.z];

        let cam = test_camera(33);
        let img = splat_render(&set, &binding, &cam, [0.0; 3]);
        let (px, py, _) = cam.project_point(&Vector3::zeros()).unwrap();
        let mut best = (0u32, 0u32, -1.0);
        for y in 0..33 {
            for x in 0..33 {
                let v = img.at(x, y)[0];
                if v > best.2 {
                    best = (x, y, v);
                }
            }
        }
        assert_eq!(best.0, px.floor() as u32);
        assert_eq!(best.1, py.floor() as u32);
    }

    #[test]
    fn opaque_front_gaussian_hides_the_back_at_center() {
        let mut scene = Scene::new(0);
        scene.add(Superquadric::unit_sphere(PrimitiveId(0)), PrimitiveKind::Body);
        let binding = compute_binding(&scene, None).unwrap();
        let frame = &binding.frames[&0][0];
        let unit = binding.units[&0];
        // Two identical gaussians at the same world point (origin); the
        // front one (lower index at equal depth) is opaque.
        let local = frame.rotation.transpose() * (-frame.center) / unit;
        let make = |opacity: f64, color: f64| BoundGaussian {
            mu: [local.x, local.y, local.z],
            quat: [1.0, 0.0, 0.0, 0.0],
            scale: [0.08; 3],
            opacity,
            sh: vec![(color - 0.5) / SH_C0; 3],
            id_k: PrimitiveId(0),
            id_t: 0,
        };
        let mut front_only = GaussianSet {
            sh_degree: 0,
            ..Default::default()
        };
        front_only.push(&make(1.0, 0.9));
        let mut both = front_only.clone();
        both.push(&make(0.7, 0.1));

        let cam = test_camera(33);
        let a = splat_render(&front_only, &binding, &cam, [0.0; 3]);
        let b = splat_render(&both, &binding, &cam, [0.0; 3]);
        let (px, py, _) = cam.project_point(&Vector3::zeros()).unwrap();
        let center_a = a.at(px.floor() as u32, py.floor() as u32);
        let center_b = b.at(px.floor() as u32, py.floor() as u32);
        // At the exact center the front weight is alpha * exp(0) = 1, so the
        // back contributes nothing.
        for ch in 0..3 {
            assert!((center_a[ch] - center_b[ch]).abs() < 1e-9);
        }
    }

    #[test]
    fn splat_gradients_match_finite_differences() {
        let mut scene = Scene::new(0);
        let mut a = Superquadric::unit_sphere(PrimitiveId(0));
        a.scale = [0.5, 0.5, 0.5];
        scene.add(a, PrimitiveKind::Body);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut set = perturbed_set(&scene, &mut rng, 1);
        // Shrink to a handful of splats for the finite-difference sweep.
        let keep: Vec<usize> = (0..set.len()).step_by(set.len() / 5).take(5).collect();
        set = set.select(&keep);
        let binding = compute_binding(&scene, None).unwrap();
        let cam = test_camera(16);
        let bg = [0.2, 0.1, 0.4];
        let mut target = ImageRgb::new(16, 16);
        for v in &mut target.data {
            *v = rng.random_range(0.0..1.0);
        }
        let target_t = Tensor::from_vec(target.data.clone(), &[16, 16, 3]);

        let eval = |set: &GaussianSet| -> (f64, Vec<Vec<f64>>) {
            let mut tape = Tape::new();
            let nodes = register_gaussians(&mut tape, set);
            let img = splat_render_node(&mut tape, &nodes, set, &binding, &cam, bg);
            let loss = tape.mse(img, &target_t);
            let grads = tape.backward(loss);
            (
                tape.scalar_value(loss),
                vec![
                    grads.get_or_zeros(nodes.mu, set.mu.len()),
                    grads.get_or_zeros(nodes.quat, set.quat.len()),
                    grads.get_or_zeros(nodes.scale, set.scale.len()),
                    grads.get_or_zeros(nodes.opacity, set.opacity.len()),
                    grads.get_or_zeros(nodes.sh, set.sh.len()),
                ],
            )
        };
        let (_, analytic) = eval(&set);

        let blocks: [(&str, usize); 5] = [
            ("mu", 0),
            ("quat", 1),
            ("scale", 2),
            ("opacity", 3),
            ("sh", 4),
        ];
        for (name, bi) in blocks {
            let base: Vec<f64> = match bi {
                0 => set.mu.clone(),
                1 => set.quat.clone(),
                2 => set.scale.clone(),
                3 => set.opacity.clone(),
                _ => set.sh.clone(),
            };
            let mut f = |x: &[f64]| -> f64 {
                let mut s = set.clone();
                match bi {
                    0 => s.mu = x.to_vec(),
                    1 => s.quat = x.to_vec(),
                    2 => s.scale = x.to_vec(),
                    3 => s.opacity = x.to_vec(),
                    _ => s.sh = x.to_vec(),
                }
                eval(&s).0
            };
            let numeric = fd::central_diff(&mut f, &base, 1e-5);
            let err = fd::max_rel_error(&analytic[bi], &numeric, 1e-7);
            assert!(err < 2e-3, "{} grad rel err {}", name, err);
        }
    }

    #[test]
    fn densify_preserves_binding_and_prunes() {
        let scene = test_scene();
        let set = init_bound_gaussians(&scene, [0.5; 3], 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = DensifyConfig {
            grad_threshold: 0.5,
            size_threshold: 0.02,
            split_shrink: 1.6,
            min_opacity: 0.005,
        };
        // Half hot, half cold.
        let grads: Vec<f64> = (0..set.len())
            .map(|i| if i % 2 == 0 { 1.0 } else { 0.0 })
            .collect();
        let out = densify_and_prune(&set, &grads, &cfg, &mut rng);
        assert!(out.set.len() > set.len());
        let faces = scene.template.face_count() as u32;
        for i in 0..out.set.len() {
            assert!(out.set.id_k[i] <= 1);
            assert!(out.set.id_t[i] < faces);
        }
        assert_eq!(out.source.len(), out.set.len());

        // Clone keeps the exact local position and identity pair.
        let mut clone_cfg = cfg;
        clone_cfg.size_threshold = 10.0; // force clones, never splits
        let out2 = densify_and_prune(&set, &grads, &clone_cfg, &mut rng);
        assert_eq!(out2.split, 0);
        assert!(out2.cloned > 0);
        let mut i = 0;
        for (idx, src) in out2.source.iter().enumerate() {
            if src.is_none() {
                // Child follows its parent, which sits right before it.
                assert_eq!(out2.set.get(idx), out2.set.get(idx - 1));
                i += 1;
            }
        }
        assert_eq!(i, out2.cloned);

        // Prune with an impossible threshold empties the set.
        let out3 = densify_and_prune(
            &set,
            &vec![0.0; set.len()],
            &DensifyConfig {
                min_opacity: 1.1,
                ..cfg
            },
            &mut rng,
        );
        assert!(out3.set.is_empty());
        assert_eq!(out3.pruned, set.len());
    }

    #[test]
    fn ply_export_has_expected_size() {
        let scene = test_scene();
        let set = init_bound_gaussians(&scene, [0.5; 3], 0).unwrap();
        let binding = compute_binding(&scene, None).unwrap();
        let mut buf = Vec::new();
        write_splat_ply(&set, &binding, &mut buf).unwrap();
        let header_end = buf
            .windows(11)
            .position(|w| w == b"end_header\n")
            .unwrap()
            + 11;
        let record = (3 + 3 + 4 + 1 + 3) * 4 + 2 * 4;
        assert_eq!(buf.len() - header_end, set.len() * record);
        let header = std::str::from_utf8(&buf[..header_end]).unwrap();
        assert!(header.contains("property uint id_k"));
        assert!(header.contains(&format!("element vertex {}", set.len())));
    }
}
