//! Superquadric primitives and their triangle meshes.
//!
//! A primitive is five parameter blocks: opacity, a 6D rotation vector,
//! translation, per-axis scale, and two shape exponents. Its mesh comes from
//! deforming a subdivided icosphere template through the explicit surface
//! function; every template vertex carries the spherical coordinates
//! (eta, omega) it was sampled at, which stay fixed for the whole run.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{CustomOp, NodeId, Tape, Tensor};

/// Shape exponents are kept inside this range; the box/star extremes make
/// the surface gradient blow up.
pub const EPS_MIN: f64 = 0.1;
pub const EPS_MAX: f64 = 1.9;

/// Smallest allowed scale component.
pub const SCALE_MIN: f64 = 1e-6;

const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("degenerate 6D rotation vector: Gram-Schmidt norm {norm:.3e} below 1e-12")]
    DegenerateRotation { norm: f64 },
}

/// Stable identifier of a primitive. Ids are never reused after pruning so
/// split/fuse lineage stays traceable in the event log.
#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
pub struct PrimitiveId(pub u32);

impl std::fmt::Display for PrimitiveId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One superquadric parameter block.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Superquadric {
    /// Opacity in [0, 1].
    pub alpha: f64,
    /// 6D rotation representation (two stacked 3-vectors).
    pub rot6: [f64; 6],
    /// World-space displacement.
    pub trans: [f64; 3],
    /// Per-axis scale, strictly positive.
    pub scale: [f64; 3],
    /// Shape exponents (eps1, eps2), clamped to [0.1, 1.9].
    pub eps: [f64; 2],
    pub id: PrimitiveId,
}

impl Superquadric {
    pub fn new(
        id: PrimitiveId,
        alpha: f64,
        rot6: [f64; 6],
        trans: [f64; 3],
        scale: [f64; 3],
        eps: [f64; 2],
    ) -> Self {
        let mut sq = Self {
            alpha,
            rot6,
            trans,
            scale,
            eps,
            id,
        };
        sq.clamp_params();
        sq
    }

    /// Unit sphere at the origin with identity pose.
    pub fn unit_sphere(id: PrimitiveId) -> Self {
        Self::new(
            id,
            1.0,
            [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            [0.0; 3],
            [1.0; 3],
            [1.0, 1.0],
        )
    }

    /// Re-impose the domain invariants after an optimizer step.
    pub fn clamp_params(&mut self) {
        self.alpha = self.alpha.clamp(0.0, 1.0);
        for e in &mut self.eps {
            *e = e.clamp(EPS_MIN, EPS_MAX);
        }
        for s in &mut self.scale {
            *s = s.max(SCALE_MIN);
        }
    }

    pub fn rotation(&self) -> Result<Matrix3<f64>, GeometryError> {
        rot6d_to_matrix(&self.rot6)
    }
}

/// Maps a 6D rotation vector to a rotation matrix by Gram-Schmidt: the first
/// half normalizes to column 1, the second half is orthogonalized against it,
/// and the third column is their cross product.
pub fn rot6d_to_matrix(rot6: &[f64; 6]) -> Result<Matrix3<f64>, GeometryError> {
    let a1 = Vector3::new(rot6[0], rot6[1], rot6[2]);
    let a2 = Vector3::new(rot6[3], rot6[4], rot6[5]);
    let n1 = a1.norm();
    if n1 < DEGENERATE_NORM {
        return Err(GeometryError::DegenerateRotation { norm: n1 });
    }
    let b1 = a1 / n1;
    let u2 = a2 - b1 * b1.dot(&a2);
    let n2 = u2.norm();
    if n2 < DEGENERATE_NORM {
        return Err(GeometryError::DegenerateRotation { norm: n2 });
    }
    let b2 = u2 / n2;
    let b3 = b1.cross(&b2);
    Ok(Matrix3::from_columns(&[b1, b2, b3]))
}

/// First two columns of a rotation matrix, flattened to the 6D form.
pub fn matrix_to_rot6d(m: &Matrix3<f64>) -> [f64; 6] {
    [
        m[(0, 0)],
        m[(1, 0)],
        m[(2, 0)],
        m[(0, 1)],
        m[(1, 1)],
        m[(2, 1)],
    ]
}

/// Adjoint of [`rot6d_to_matrix`]: accumulates d(loss)/d(rot6) from
/// d(loss)/d(R) given the forward input.
pub fn rot6d_backward(rot6: &[f64; 6], grad_r: &Matrix3<f64>) -> [f64; 6] {
    let a1 = Vector3::new(rot6[0], rot6[1], rot6[2]);
    let a2 = Vector3::new(rot6[3], rot6[4], rot6[5]);
    let n1 = a1.norm();
    let b1 = a1 / n1;
    let u2 = a2 - b1 * b1.dot(&a2);
    let n2 = u2.norm();
    let b2 = u2 / n2;

    let mut g_b1 = grad_r.column(0).into_owned();
    let mut g_b2 = grad_r.column(1).into_owned();
    let g_b3 = grad_r.column(2).into_owned();

    // b3 = b1 x b2
    g_b1 += b2.cross(&g_b3);
    g_b2 += g_b3.cross(&b1);

    // b2 = u2 / |u2|
    let g_u2 = (g_b2 - b2 * b2.dot(&g_b2)) / n2;

    // u2 = a2 - (b1 . a2) b1
    let g_a2 = g_u2 - b1 * b1.dot(&g_u2);
    g_b1 += -a2 * b1.dot(&g_u2) - g_u2 * b1.dot(&a2);

    // b1 = a1 / |a1|
    let g_a1 = (g_b1 - b1 * b1.dot(&g_b1)) / n1;

    [g_a1.x, g_a1.y, g_a1.z, g_a2.x, g_a2.y, g_a2.z]
}

/// sgn(x) |x|^e. The signed power keeps the surface closed for fractional
/// exponents of negative bases.
pub fn signed_pow(x: f64, e: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x.signum() * x.abs().powf(e)
    }
}

/// d/de of [`signed_pow`].
fn signed_pow_dexp(x: f64, e: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x.signum() * x.abs().powf(e) * x.abs().ln()
    }
}

/// Rounds the ~1e-16 residue of cos(pi/2)-style evaluations to an exact
/// zero. Fractional powers amplify that residue to ~1e-4 otherwise, which
/// would visibly bend the surface along the coordinate great circles.
#[inline]
fn snap_trig(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        0.0
    } else {
        x
    }
}

/// Surface point in the primitive's local frame (before rotation and
/// translation).
pub fn surface_point_local(scale: &[f64; 3], eps: &[f64; 2], eta: f64, omega: f64) -> Vector3<f64> {
    let ce = signed_pow(snap_trig(eta.cos()), eps[0]);
    let se = signed_pow(snap_trig(eta.sin()), eps[0]);
    let co = signed_pow(snap_trig(omega.cos()), eps[1]);
    let so = signed_pow(snap_trig(omega.sin()), eps[1]);
    Vector3::new(scale[0] * ce * co, scale[1] * se, scale[2] * ce * so)
}

/// Explicit surface function: the local surface point transformed by the
/// primitive's rotation and translation.
pub fn surface_point(
    sq: &Superquadric,
    eta: f64,
    omega: f64,
) -> Result<Vector3<f64>, GeometryError> {
    let r = sq.rotation()?;
    let local = surface_point_local(&sq.scale, &sq.eps, eta, omega);
    Ok(r * local + Vector3::from(sq.trans))
}

/// Inside-outside function of a superquadric in its local frame; equals 1 on
/// the surface, < 1 inside, > 1 outside.
///
/// This is an independent route to the same surface as
/// [`surface_point_local`] and doubles as the implicit oracle in tests and
/// as the analytic shape used by the synthetic ray tracer.
pub fn implicit_value(scale: &[f64; 3], eps: &[f64; 2], p: &Vector3<f64>) -> f64 {
    let x = (p.x / scale[0]).abs();
    let y = (p.y / scale[1]).abs();
    let z = (p.z / scale[2]).abs();
    let e1 = eps[0];
    let e2 = eps[1];
    (x.powf(2.0 / e2) + z.powf(2.0 / e2)).powf(e2 / e1) + y.powf(2.0 / e1)
}

/// Unit icosphere with per-vertex spherical coordinates.
#[derive(Clone, Debug)]
pub struct IcosphereTemplate {
    pub vertices: Vec<Vector3<f64>>,
    /// Latitude in [-pi/2, pi/2] per vertex.
    pub etas: Vec<f64>,
    /// Longitude in [-pi, pi] per vertex.
    pub omegas: Vec<f64>,
    pub faces: Arc<Vec<[u32; 3]>>,
    pub subdivision_level: u32,
}

impl IcosphereTemplate {
    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }
}

/// Builds the subdivided unit icosphere. Each subdivision splits every face
/// into four and projects the new midpoints back to the unit sphere.
///
/// Levels 0..=5 give 12/42/162/642/2562/10242 vertices.
pub fn build_icosphere(subdivision_level: u32) -> IcosphereTemplate {
    assert!(subdivision_level <= 5, "subdivision level must be in 0..=5");

    let phi = (1.0 + 5.0_f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vector3<f64>> = [
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ]
    .iter()
    .map(|v| Vector3::new(v[0], v[1], v[2]).normalize())
    .collect();

    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];

    for _ in 0..subdivision_level {
        let mut midpoint = std::collections::BTreeMap::<(u32, u32), u32>::new();
        let mut next_faces = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let mut mid = [0u32; 3];
            for i in 0..3 {
                let a = f[i];
                let b = f[(i + 1) % 3];
                let key = (a.min(b), a.max(b));
                mid[i] = *midpoint.entry(key).or_insert_with(|| {
                    let v = (vertices[a as usize] + vertices[b as usize]).normalize();
                    vertices.push(v);
                    (vertices.len() - 1) as u32
                });
            }
            next_faces.push([f[0], mid[0], mid[2]]);
            next_faces.push([f[1], mid[1], mid[0]]);
            next_faces.push([f[2], mid[2], mid[1]]);
            next_faces.push([mid[0], mid[1], mid[2]]);
        }
        faces = next_faces;
    }

    let etas = vertices.iter().map(|v| v.y.clamp(-1.0, 1.0).asin()).collect();
    let omegas = vertices.iter().map(|v| v.z.atan2(v.x)).collect();

    IcosphereTemplate {
        vertices,
        etas,
        omegas,
        faces: Arc::new(faces),
        subdivision_level,
    }
}

/// Triangle mesh of one primitive in world space.
#[derive(Clone, Debug)]
pub struct PrimitiveMesh {
    pub world_vertices: Vec<Vector3<f64>>,
    pub faces: Arc<Vec<[u32; 3]>>,
    pub owner_id: PrimitiveId,
}

impl PrimitiveMesh {
    pub fn centroid(&self) -> Vector3<f64> {
        let mut c = Vector3::zeros();
        for v in &self.world_vertices {
            c += v;
        }
        c / self.world_vertices.len().max(1) as f64
    }
}

/// Evaluates the surface function at every template vertex.
pub fn deform(sq: &Superquadric, tpl: &IcosphereTemplate) -> Result<PrimitiveMesh, GeometryError> {
    let r = sq.rotation()?;
    let t = Vector3::from(sq.trans);
    let world_vertices = tpl
        .etas
        .iter()
        .zip(&tpl.omegas)
        .map(|(&eta, &omega)| r * surface_point_local(&sq.scale, &sq.eps, eta, omega) + t)
        .collect();
    Ok(PrimitiveMesh {
        world_vertices,
        faces: tpl.faces.clone(),
        owner_id: sq.id,
    })
}

/// Writes one primitive mesh as ASCII OBJ (`v` and `f` records).
pub fn write_obj<W: Write>(mesh: &PrimitiveMesh, w: &mut W) -> std::io::Result<()> {
    for v in &mesh.world_vertices {
        writeln!(w, "v {} {} {}", v.x, v.y, v.z)?;
    }
    for f in mesh.faces.iter() {
        writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Tape integration
// ---------------------------------------------------------------------------

/// Tape handles for one primitive's parameter blocks.
#[derive(Clone, Copy, Debug)]
pub struct SuperquadricNodes {
    pub alpha: NodeId,
    pub rot6: NodeId,
    pub trans: NodeId,
    pub scale: NodeId,
    pub eps: NodeId,
}

/// Registers a primitive's parameters as tape leaves.
pub fn register_superquadric(tape: &mut Tape, sq: &Superquadric) -> SuperquadricNodes {
    SuperquadricNodes {
        alpha: tape.leaf(Tensor::from_vec(vec![sq.alpha], &[1])),
        rot6: tape.leaf(Tensor::from_vec(sq.rot6.to_vec(), &[6])),
        trans: tape.leaf(Tensor::from_vec(sq.trans.to_vec(), &[3])),
        scale: tape.leaf(Tensor::from_vec(sq.scale.to_vec(), &[3])),
        eps: tape.leaf(Tensor::from_vec(sq.eps.to_vec(), &[2])),
    }
}

#[derive(Debug)]
struct Rot6dOp {
    inputs: [NodeId; 1],
}

impl CustomOp for Rot6dOp {
    fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    fn backward(&self, values: &[Tensor], grad_out: &Tensor, acc: &mut dyn FnMut(NodeId, Tensor)) {
        let rot6: [f64; 6] = values[self.inputs[0].0].data().try_into().unwrap();
        let g = grad_out.data();
        // grad_out is the 3x3 matrix adjoint in row-major order.
        let grad_r = Matrix3::new(g[0], g[1], g[2], g[3], g[4], g[5], g[6], g[7], g[8]);
        let grad6 = rot6d_backward(&rot6, &grad_r);
        acc(self.inputs[0], Tensor::from_vec(grad6.to_vec(), &[6]));
    }
}

/// Records the 6D-rotation map on the tape; the node value is the rotation
/// matrix in row-major order.
pub fn rot6d_node(tape: &mut Tape, rot6: NodeId) -> Result<NodeId, GeometryError> {
    let rot6_arr: [f64; 6] = tape.value(rot6).data().try_into().expect("rot6 length");
    let m = rot6d_to_matrix(&rot6_arr)?;
    let mut data = Vec::with_capacity(9);
    for r in 0..3 {
        for c in 0..3 {
            data.push(m[(r, c)]);
        }
    }
    Ok(tape.custom(
        Tensor::from_vec(data, &[3, 3]),
        Box::new(Rot6dOp { inputs: [rot6] }),
    ))
}

#[derive(Debug)]
struct DeformOp {
    /// rot matrix, trans, scale, eps
    inputs: [NodeId; 4],
    template: Arc<TemplateAngles>,
}

/// The per-vertex sample angles a deform op needs to replay its forward pass.
#[derive(Debug)]
struct TemplateAngles {
    etas: Vec<f64>,
    omegas: Vec<f64>,
}

impl CustomOp for DeformOp {
    fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    fn backward(&self, values: &[Tensor], grad_out: &Tensor, acc: &mut dyn FnMut(NodeId, Tensor)) {
        let rot = values[self.inputs[0].0].data();
        let scale: [f64; 3] = values[self.inputs[2].0].data().try_into().unwrap();
        let eps: [f64; 2] = values[self.inputs[3].0].data().try_into().unwrap();
        let r = Matrix3::new(
            rot[0], rot[1], rot[2], rot[3], rot[4], rot[5], rot[6], rot[7], rot[8],
        );

        let mut g_rot = [0.0; 9];
        let mut g_trans = [0.0; 3];
        let mut g_scale = [0.0; 3];
        let mut g_eps = [0.0; 2];

        let g = grad_out.data();
        for (i, (&eta, &omega)) in self
            .template
            .etas
            .iter()
            .zip(&self.template.omegas)
            .enumerate()
        {
            let gw = Vector3::new(g[i * 3], g[i * 3 + 1], g[i * 3 + 2]);
            if gw == Vector3::zeros() {
                continue;
            }
            let (tc_e, ts_e) = (snap_trig(eta.cos()), snap_trig(eta.sin()));
            let (tc_o, ts_o) = (snap_trig(omega.cos()), snap_trig(omega.sin()));
            let ce = signed_pow(tc_e, eps[0]);
            let se = signed_pow(ts_e, eps[0]);
            let co = signed_pow(tc_o, eps[1]);
            let so = signed_pow(ts_o, eps[1]);
            let local = Vector3::new(scale[0] * ce * co, scale[1] * se, scale[2] * ce * so);

            // world = R * local + t
            for c in 0..3 {
                g_trans[c] += gw[c];
                for k in 0..3 {
                    g_rot[c * 3 + k] += gw[c] * local[k];
                }
            }
            let gl = r.transpose() * gw;

            g_scale[0] += gl.x * ce * co;
            g_scale[1] += gl.y * se;
            g_scale[2] += gl.z * ce * so;

            let dce = signed_pow_dexp(tc_e, eps[0]);
            let dse = signed_pow_dexp(ts_e, eps[0]);
            let dco = signed_pow_dexp(tc_o, eps[1]);
            let dso = signed_pow_dexp(ts_o, eps[1]);
            g_eps[0] += gl.x * scale[0] * dce * co + gl.y * scale[1] * dse + gl.z * scale[2] * dce * so;
            g_eps[1] += gl.x * scale[0] * ce * dco + gl.z * scale[2] * ce * dso;
        }

        acc(self.inputs[0], Tensor::from_vec(g_rot.to_vec(), &[3, 3]));
        acc(self.inputs[1], Tensor::from_vec(g_trans.to_vec(), &[3]));
        acc(self.inputs[2], Tensor::from_vec(g_scale.to_vec(), &[3]));
        acc(self.inputs[3], Tensor::from_vec(g_eps.to_vec(), &[2]));
    }
}

/// Records the template deformation on the tape. The node value has shape
/// `[V, 3]` (world vertex positions).
pub fn deform_node(
    tape: &mut Tape,
    rot_mat: NodeId,
    sq: &SuperquadricNodes,
    tpl: &IcosphereTemplate,
) -> NodeId {
    let rot = tape.value(rot_mat).data();
    let r = Matrix3::new(
        rot[0], rot[1], rot[2], rot[3], rot[4], rot[5], rot[6], rot[7], rot[8],
    );
    let trans: [f64; 3] = tape.value(sq.trans).data().try_into().unwrap();
    let scale: [f64; 3] = tape.value(sq.scale).data().try_into().unwrap();
    let eps: [f64; 2] = tape.value(sq.eps).data().try_into().unwrap();
    let t = Vector3::from(trans);

    let mut data = Vec::with_capacity(tpl.vertex_count() * 3);
    for (&eta, &omega) in tpl.etas.iter().zip(&tpl.omegas) {
        let w = r * surface_point_local(&scale, &eps, eta, omega) + t;
        data.extend_from_slice(&[w.x, w.y, w.z]);
    }

    tape.custom(
        Tensor::from_vec(data, &[tpl.vertex_count(), 3]),
        Box::new(DeformOp {
            inputs: [rot_mat, sq.trans, sq.scale, sq.eps],
            template: Arc::new(TemplateAngles {
                etas: tpl.etas.clone(),
                omegas: tpl.omegas.clone(),
            }),
        }),
    )
}

/// Near-uniform surface sampling angles from a Fibonacci sphere lattice.
///
/// Dense enough lattices keep the nearest-neighbor floor of Chamfer
/// comparisons far below fitting error.
pub fn fibonacci_angles(n: usize) -> impl Iterator<Item = (f64, f64)> {
    let golden = (1.0 + 5.0_f64.sqrt()) / 2.0;
    (0..n).map(move |i| {
        let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
        let eta = z.clamp(-1.0, 1.0).asin();
        let omega = (2.0 * std::f64::consts::PI * (i as f64 / golden)).rem_euclid(
            2.0 * std::f64::consts::PI,
        ) - std::f64::consts::PI;
        (eta, omega)
    })
}

/// Counts how often each undirected edge appears and checks winding
/// consistency: a closed, consistently wound mesh has every edge in exactly
/// two faces, once per direction.
pub fn edge_manifold_ok(faces: &[[u32; 3]]) -> bool {
    use std::collections::HashMap;
    let mut directed = HashMap::<(u32, u32), u32>::new();
    for f in faces {
        for i in 0..3 {
            let a = f[i];
            let b = f[(i + 1) % 3];
            *directed.entry((a, b)).or_insert(0) += 1;
        }
    }
    directed.iter().all(|(&(a, b), &count)| {
        count == 1 && directed.get(&(b, a)).copied().unwrap_or(0) == 1
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::fd;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_rot6(rng: &mut impl Rng) -> [f64; 6] {
        loop {
            let mut r = [0.0; 6];
            for x in &mut r {
                *x = rng.random_range(-1.0..1.0);
            }
            if rot6d_to_matrix(&r).is_ok() {
                return r;
            }
        }
    }

    fn random_sq(rng: &mut impl Rng, id: u32) -> Superquadric {
        Superquadric::new(
            PrimitiveId(id),
            rng.random_range(0.2..1.0),
            random_rot6(rng),
            [
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            ],
            [
                rng.random_range(0.3..2.0),
                rng.random_range(0.3..2.0),
                rng.random_range(0.3..2.0),
            ],
            [rng.random_range(0.2..1.8), rng.random_range(0.2..1.8)],
        )
    }

    #[test]
    fn canonical_rot6_is_identity() {
        let m = rot6d_to_matrix(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(m, Matrix3::identity());
    }

    #[test]
    fn rot6_is_scale_invariant() {
        let m = rot6d_to_matrix(&[2.0, 0.0, 0.0, 0.0, 3.0, 0.0]).unwrap();
        assert_eq!(m, Matrix3::identity());
    }

    #[test]
    fn random_rot6_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let r6 = random_rot6(&mut rng);
            let m = rot6d_to_matrix(&r6).unwrap();
            let gram = m.transpose() * m - Matrix3::identity();
            let max = gram.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
            assert!(max < 1e-9, "orthonormality defect {}", max);
            assert_abs_diff_eq!(m.determinant(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn zero_rot6_is_degenerate() {
        assert!(matches!(
            rot6d_to_matrix(&[0.0; 6]),
            Err(GeometryError::DegenerateRotation { .. })
        ));
        // Parallel halves also collapse the second column.
        assert!(rot6d_to_matrix(&[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn rot6_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let r6 = random_rot6(&mut rng);
            // Project onto a random fixed direction to get a scalar function.
            let w: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut f = |x: &[f64]| {
                let m = rot6d_to_matrix(&x.try_into().unwrap()).unwrap();
                let mut s = 0.0;
                for r in 0..3 {
                    for c in 0..3 {
                        s += w[r * 3 + c] * m[(r, c)];
                    }
                }
                s
            };
            let grad_r = Matrix3::new(w[0], w[1], w[2], w[3], w[4], w[5], w[6], w[7], w[8]);
            let analytic = rot6d_backward(&r6, &grad_r);
            let err = fd::check_gradient(&mut f, &r6, &analytic, 1e-6, 1e-10);
            assert!(err < 1e-6, "rot6 grad rel err {}", err);
        }
    }

    #[test]
    fn sphere_surface_points() {
        let sq = Superquadric::unit_sphere(PrimitiveId(0));
        let p = surface_point(&sq, 0.0, 0.0).unwrap();
        assert_abs_diff_eq!(p, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-12);
        let pole = surface_point(&sq, std::f64::consts::FRAC_PI_2, 0.0).unwrap();
        assert_abs_diff_eq!(pole, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-9);
    }

    #[test]
    fn surface_points_satisfy_implicit_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..300 {
            let sq = random_sq(&mut rng, i);
            let eta = rng.random_range(-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2);
            let omega = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let local = surface_point_local(&sq.scale, &sq.eps, eta, omega);
            let f = implicit_value(&sq.scale, &sq.eps, &local);
            assert!(
                (f - 1.0).abs() < 1e-6,
                "implicit value {} for eps {:?} at (eta={}, omega={})",
                f,
                sq.eps,
                eta,
                omega
            );
        }
    }

    #[test]
    fn surface_point_is_scale_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let eps = [rng.random_range(0.2..1.8), rng.random_range(0.2..1.8)];
            let s = [
                rng.random_range(0.2..2.0),
                rng.random_range(0.2..2.0),
                rng.random_range(0.2..2.0),
            ];
            let s2 = [2.0 * s[0], 2.0 * s[1], 2.0 * s[2]];
            let eta = rng.random_range(-1.5..1.5);
            let omega = rng.random_range(-3.1..3.1);
            let a = surface_point_local(&s, &eps, eta, omega);
            let b = surface_point_local(&s2, &eps, eta, omega);
            assert_eq!(b, a * 2.0, "doubling the scale must double the point");
        }
    }

    #[test]
    fn icosphere_counts() {
        let l0 = build_icosphere(0);
        assert_eq!(l0.vertex_count(), 12);
        assert_eq!(l0.face_count(), 20);
        let l1 = build_icosphere(1);
        assert_eq!(l1.vertex_count(), 42);
        assert_eq!(l1.face_count(), 80);
    }

    #[test]
    fn icosphere_euler_characteristic() {
        let l2 = build_icosphere(2);
        let mut edges = std::collections::BTreeSet::new();
        for f in l2.faces.iter() {
            for i in 0..3 {
                let a = f[i];
                let b = f[(i + 1) % 3];
                edges.insert((a.min(b), a.max(b)));
            }
        }
        let v = l2.vertex_count() as i64;
        let e = edges.len() as i64;
        let f = l2.face_count() as i64;
        assert_eq!(v - e + f, 2);
    }

    #[test]
    fn icosphere_vertices_unit_norm_and_closed() {
        for level in 0..4 {
            let tpl = build_icosphere(level);
            for v in &tpl.vertices {
                assert!((v.norm() - 1.0).abs() < 1e-9);
            }
            assert!(edge_manifold_ok(&tpl.faces), "level {} not closed", level);
        }
    }

    #[test]
    fn deform_identity_sphere_reproduces_template() {
        let tpl = build_icosphere(2);
        let sq = Superquadric::unit_sphere(PrimitiveId(1));
        let mesh = deform(&sq, &tpl).unwrap();
        for (a, b) in mesh.world_vertices.iter().zip(&tpl.vertices) {
            assert!((a - b).norm() < 1e-9);
        }
        assert!(edge_manifold_ok(&mesh.faces));
    }

    #[test]
    fn deform_ellipsoid_satisfies_implicit_equation() {
        let tpl = build_icosphere(2);
        let mut sq = Superquadric::unit_sphere(PrimitiveId(1));
        sq.scale = [2.0, 1.0, 1.0];
        let mesh = deform(&sq, &tpl).unwrap();
        for v in &mesh.world_vertices {
            let f = implicit_value(&sq.scale, &sq.eps, v);
            assert!((f - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn deform_translation_shifts_centroid() {
        let tpl = build_icosphere(2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut sq = random_sq(&mut rng, 2);
        sq.trans = [0.0; 3];
        let base = deform(&sq, &tpl).unwrap();
        sq.trans = [0.0, 0.0, 5.0];
        let moved = deform(&sq, &tpl).unwrap();
        let delta = moved.centroid() - base.centroid();
        assert_abs_diff_eq!(delta, Vector3::new(0.0, 0.0, 5.0), epsilon = 1e-12);
    }

    #[test]
    fn ellipsoid_chamfer_to_analytic_samples() {
        // Brute-force symmetric chamfer between the level-3 deformed mesh and
        // dense analytic ellipsoid samples.
        let tpl = build_icosphere(3);
        let mut sq = Superquadric::unit_sphere(PrimitiveId(0));
        sq.scale = [1.3, 0.8, 1.1];
        let mesh = deform(&sq, &tpl).unwrap();

        let mut analytic = Vec::new();
        let n = 64;
        for i in 0..n {
            let eta = -std::f64::consts::FRAC_PI_2
                + std::f64::consts::PI * (i as f64 + 0.5) / n as f64;
            for j in 0..(2 * n) {
                let omega = -std::f64::consts::PI
                    + 2.0 * std::f64::consts::PI * (j as f64 + 0.5) / (2 * n) as f64;
                analytic.push(Vector3::new(
                    sq.scale[0] * eta.cos() * omega.cos(),
                    sq.scale[1] * eta.sin(),
                    sq.scale[2] * eta.cos() * omega.sin(),
                ));
            }
        }

        let nn = |from: &[Vector3<f64>], to: &[Vector3<f64>]| -> f64 {
            from.iter()
                .map(|p| {
                    to.iter()
                        .map(|q| (p - q).norm())
                        .fold(f64::INFINITY, f64::min)
                })
                .sum::<f64>()
                / from.len() as f64
        };
        let cd = nn(&mesh.world_vertices, &analytic) + nn(&analytic, &mesh.world_vertices);
        let max_s = sq.scale.iter().cloned().fold(0.0, f64::max);
        assert!(cd < 1e-3 * max_s * 2.0 + 0.1, "chamfer {}", cd);
        assert!(cd < 0.1, "chamfer {}", cd);
    }

    #[test]
    fn deform_node_gradients_match_finite_differences() {
        let tpl = build_icosphere(1);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let sq = random_sq(&mut rng, 0);
        let w: Vec<f64> = (0..tpl.vertex_count() * 3)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();

        // Scalar probe: w . deform(params)
        let eval = |alpha: f64, rot6: &[f64], trans: &[f64], scale: &[f64], eps: &[f64]| -> f64 {
            let sq = Superquadric {
                alpha,
                rot6: rot6.try_into().unwrap(),
                trans: trans.try_into().unwrap(),
                scale: scale.try_into().unwrap(),
                eps: eps.try_into().unwrap(),
                id: PrimitiveId(0),
            };
            let mesh = deform(&sq, &tpl).unwrap();
            mesh.world_vertices
                .iter()
                .enumerate()
                .map(|(i, v)| w[i * 3] * v.x + w[i * 3 + 1] * v.y + w[i * 3 + 2] * v.z)
                .sum()
        };

        let mut tape = Tape::new();
        let nodes = register_superquadric(&mut tape, &sq);
        let rot = rot6d_node(&mut tape, nodes.rot6).unwrap();
        let verts = deform_node(&mut tape, rot, &nodes, &tpl);
        let wt = tape.leaf(Tensor::from_vec(w.clone(), &[tpl.vertex_count(), 3]));
        let prod = tape.mul(verts, wt);
        let loss = tape.sum(prod);
        let grads = tape.backward(loss);

        // rot6
        let mut f6 = |x: &[f64]| eval(sq.alpha, x, &sq.trans, &sq.scale, &sq.eps);
        let a6 = grads.get_or_zeros(nodes.rot6, 6);
        let e = fd::check_gradient(&mut f6, &sq.rot6, &a6, 1e-6, 1e-8);
        assert!(e < 1e-5, "rot6 rel err {}", e);

        // trans
        let mut ft = |x: &[f64]| eval(sq.alpha, &sq.rot6, x, &sq.scale, &sq.eps);
        let at = grads.get_or_zeros(nodes.trans, 3);
        let e = fd::check_gradient(&mut ft, &sq.trans, &at, 1e-6, 1e-8);
        assert!(e < 1e-6, "trans rel err {}", e);

        // scale
        let mut fs = |x: &[f64]| eval(sq.alpha, &sq.rot6, &sq.trans, x, &sq.eps);
        let as_ = grads.get_or_zeros(nodes.scale, 3);
        let e = fd::check_gradient(&mut fs, &sq.scale, &as_, 1e-6, 1e-8);
        assert!(e < 1e-5, "scale rel err {}", e);

        // eps
        let mut fe = |x: &[f64]| eval(sq.alpha, &sq.rot6, &sq.trans, &sq.scale, x);
        let ae = grads.get_or_zeros(nodes.eps, 2);
        let e = fd::check_gradient(&mut fe, &sq.eps, &ae, 1e-6, 1e-8);
        assert!(e < 1e-5, "eps rel err {}", e);
    }

    #[test]
    fn obj_export_roundtrips_counts() {
        let tpl = build_icosphere(0);
        let mesh = deform(&Superquadric::unit_sphere(PrimitiveId(0)), &tpl).unwrap();
        let mut buf = Vec::new();
        write_obj(&mesh, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().filter(|l| l.starts_with("v ")).count(), 12);
        assert_eq!(text.lines().filter(|l| l.starts_with("f ")).count(), 20);
    }
}
