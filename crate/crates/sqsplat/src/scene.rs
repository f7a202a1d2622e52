//! Scene of superquadric primitives plus the two background primitives.
//!
//! Body primitives are the ones being fit; the background dome (a large
//! enclosing icosphere) and the ground plane exist so the second stage can
//! attach Gaussians to them. Background primitives never take part in the
//! silhouette loss, the centering loss, split/fuse, or pruning.
//!
//! Primitive ids are allocated once and never reused, so the structural
//! event log stays unambiguous.

use std::sync::Arc;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::geometry::{
    build_icosphere, deform, GeometryError, IcosphereTemplate, PrimitiveId, PrimitiveMesh,
    Superquadric,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PrimitiveKind {
    Body,
    BackgroundDome,
    GroundPlane,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenePrimitive {
    pub sq: Superquadric,
    pub kind: PrimitiveKind,
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub primitives: Vec<ScenePrimitive>,
    pub template: IcosphereTemplate,
    subdivision_level: u32,
    next_id: u32,
}

impl Scene {
    pub fn new(subdivision_level: u32) -> Self {
        Self {
            primitives: Vec::new(),
            template: build_icosphere(subdivision_level),
            subdivision_level,
            next_id: 0,
        }
    }

    pub fn subdivision_level(&self) -> u32 {
        self.subdivision_level
    }

    pub fn alloc_id(&mut self) -> PrimitiveId {
        let id = PrimitiveId(self.next_id);
        self.next_id += 1;
        id
    }

    pub fn add(&mut self, mut sq: Superquadric, kind: PrimitiveKind) -> PrimitiveId {
        let id = self.alloc_id();
        sq.id = id;
        self.primitives.push(ScenePrimitive { sq, kind });
        id
    }

    pub fn find(&self, id: PrimitiveId) -> Option<&ScenePrimitive> {
        self.primitives.iter().find(|p| p.sq.id == id)
    }

    pub fn find_mut(&mut self, id: PrimitiveId) -> Option<&mut ScenePrimitive> {
        self.primitives.iter_mut().find(|p| p.sq.id == id)
    }

    pub fn remove(&mut self, id: PrimitiveId) -> bool {
        let before = self.primitives.len();
        self.primitives.retain(|p| p.sq.id != id);
        self.primitives.len() != before
    }

    pub fn bodies(&self) -> impl Iterator<Item = &ScenePrimitive> {
        self.primitives
            .iter()
            .filter(|p| p.kind == PrimitiveKind::Body)
    }

    /// Body primitives that still have nonzero opacity.
    pub fn active_bodies(&self) -> impl Iterator<Item = &ScenePrimitive> {
        self.bodies().filter(|p| p.sq.alpha > 0.0)
    }

    pub fn body_count(&self) -> usize {
        self.bodies().count()
    }

    pub fn active_body_count(&self) -> usize {
        self.active_bodies().count()
    }

    /// World mesh of one primitive.
    pub fn mesh(&self, prim: &ScenePrimitive) -> Result<PrimitiveMesh, GeometryError> {
        match prim.kind {
            PrimitiveKind::Body | PrimitiveKind::BackgroundDome => {
                deform(&prim.sq, &self.template)
            }
            PrimitiveKind::GroundPlane => ground_mesh(&prim.sq),
        }
    }

    /// Deterministic distinct flat color for a primitive id.
    pub fn representation_color(id: PrimitiveId) -> [f64; 3] {
        let hue = (id.0 as f64 * 0.618_033_988_749895).fract();
        hsv_to_rgb(hue, 0.75, 0.95)
    }
}

/// Open grid mesh for the ground plane: a [-1, 1]^2 lattice in the local
/// XZ plane, transformed by the primitive pose like any other mesh.
fn ground_mesh(sq: &Superquadric) -> Result<PrimitiveMesh, GeometryError> {
    const N: u32 = 8;
    let r = sq.rotation()?;
    let t = Vector3::from(sq.trans);
    let mut vertices = Vec::with_capacity(((N + 1) * (N + 1)) as usize);
    for iz in 0..=N {
        for ix in 0..=N {
            let u = 2.0 * ix as f64 / N as f64 - 1.0;
            let v = 2.0 * iz as f64 / N as f64 - 1.0;
            let local = Vector3::new(sq.scale[0] * u, 0.0, sq.scale[2] * v);
            vertices.push(r * local + t);
        }
    }
    let mut faces = Vec::with_capacity((N * N * 2) as usize);
    for iz in 0..N {
        for ix in 0..N {
            let a = iz * (N + 1) + ix;
            let b = a + 1;
            let c = a + (N + 1);
            let d = c + 1;
            faces.push([a, b, d]);
            faces.push([a, d, c]);
        }
    }
    Ok(PrimitiveMesh {
        world_vertices: vertices,
        faces: Arc::new(faces),
        owner_id: sq.id,
    })
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Serializable scene snapshot (`{id, alpha, rot6, trans, scale, eps}` per
/// primitive plus its kind), used for the scene JSON export and checkpoints.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneSnapshot {
    pub subdivision_level: u32,
    pub next_id: u32,
    pub primitives: Vec<ScenePrimitive>,
}

impl From<&Scene> for SceneSnapshot {
    fn from(scene: &Scene) -> Self {
        Self {
            subdivision_level: scene.subdivision_level,
            next_id: scene.next_id,
            primitives: scene.primitives.clone(),
        }
    }
}

impl From<SceneSnapshot> for Scene {
    fn from(snap: SceneSnapshot) -> Self {
        Scene {
            template: build_icosphere(snap.subdivision_level),
            subdivision_level: snap.subdivision_level,
            next_id: snap.next_id,
            primitives: snap.primitives,
        }
    }
}
