//! Dataset model, synthetic desk-scale scenes, and the on-disk layout.
//!
//! A dataset is a list of calibrated views (image, silhouette, optional part
//! mask) plus optional ground-truth surface samples. The synthetic generator
//! ray-traces unions of superquadrics through the implicit inside-outside
//! function, which is independent of the mesh rasterizer under test, and
//! writes flat part colors so the second stage has a trivially fittable
//! target.
//!
//! Disk layout: `images/NNN.png`, `silhouettes/NNN.png`, `masks/NNN.png`
//! (indexed-color labels), `cameras.json`, `gt_points.ply`.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{Matrix4, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{camera_ring, Camera};
use crate::geometry::{implicit_value, surface_point, PrimitiveId, Superquadric};
use crate::img::{ImageGray, ImageRgb, ImgError, LabelImage};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Img(#[from] ImgError),
    #[error("malformed dataset: {0}")]
    Malformed(String),
    #[error("unknown synthetic scene {0:?}")]
    UnknownScene(String),
}

#[derive(Clone, Debug)]
pub struct View {
    pub id: u32,
    pub image: ImageRgb,
    pub silhouette: ImageGray,
    pub mask: Option<LabelImage>,
    pub camera: Camera,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub views: Vec<View>,
    pub gt_points: Option<Vec<Vector3<f64>>>,
}

impl Dataset {
    pub fn resolution(&self) -> (u32, u32) {
        self.views
            .first()
            .map(|v| (v.image.width, v.image.height))
            .unwrap_or((0, 0))
    }

    pub fn has_masks(&self) -> bool {
        !self.views.is_empty() && self.views.iter().all(|v| v.mask.is_some())
    }

    pub fn mean_color(&self) -> [f64; 3] {
        let mut acc = [0.0; 3];
        for v in &self.views {
            let c = v.image.mean_color();
            for ch in 0..3 {
                acc[ch] += c[ch];
            }
        }
        let n = self.views.len().max(1) as f64;
        acc.map(|v| v / n)
    }
}

// ---------------------------------------------------------------------------
// Synthetic scenes
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthScene {
    Sphere,
    Ellipsoid,
    Dumbbell,
    TwoBlob,
    ToyFigure,
}

impl std::str::FromStr for SynthScene {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sphere" => Ok(Self::Sphere),
            "ellipsoid" => Ok(Self::Ellipsoid),
            "dumbbell" => Ok(Self::Dumbbell),
            "two-blob" | "two_blob" => Ok(Self::TwoBlob),
            "toy-figure" | "toy_figure" => Ok(Self::ToyFigure),
            other => Err(DatasetError::UnknownScene(other.to_string())),
        }
    }
}

/// One ground-truth part: a superquadric with a label and a flat color.
#[derive(Clone, Debug)]
pub struct GtPart {
    pub sq: Superquadric,
    pub label: u8,
    pub color: [f64; 3],
}

const BG_COLOR: [f64; 3] = [0.85, 0.85, 0.88];

/// Surface samples per ground-truth part. Dense enough that the Chamfer
/// nearest-neighbor floor between two lattices is ~1e-2 at unit scale.
pub const GT_SAMPLES_PER_PART: usize = 32_768;
const PART_COLORS: [[f64; 3]; 4] = [
    [0.80, 0.25, 0.20],
    [0.20, 0.45, 0.85],
    [0.30, 0.70, 0.35],
    [0.90, 0.75, 0.25],
];

fn part(label: u8, trans: [f64; 3], scale: [f64; 3], eps: [f64; 2]) -> GtPart {
    GtPart {
        sq: Superquadric::new(
            PrimitiveId(label as u32),
            1.0,
            [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            trans,
            scale,
            eps,
        ),
        label,
        color: PART_COLORS[(label as usize - 1) % PART_COLORS.len()],
    }
}

/// Ground-truth decomposition of a synthetic scene.
pub fn scene_parts(scene: SynthScene) -> Vec<GtPart> {
    match scene {
        SynthScene::Sphere => vec![part(1, [0.0; 3], [0.8, 0.8, 0.8], [1.0, 1.0])],
        SynthScene::Ellipsoid => vec![part(1, [0.0; 3], [0.9, 0.5, 0.6], [1.0, 1.0])],
        SynthScene::Dumbbell => vec![
            part(1, [-0.45, 0.0, 0.0], [0.5, 0.5, 0.5], [1.0, 1.0]),
            part(2, [0.45, 0.0, 0.0], [0.5, 0.5, 0.5], [1.0, 1.0]),
        ],
        SynthScene::TwoBlob => vec![
            part(1, [-0.8, 0.0, 0.0], [0.4, 0.4, 0.4], [1.0, 1.0]),
            part(2, [0.8, 0.0, 0.0], [0.4, 0.4, 0.4], [1.0, 1.0]),
        ],
        SynthScene::ToyFigure => vec![
            part(1, [0.0, -0.15, 0.0], [0.45, 0.6, 0.35], [1.0, 1.0]),
            part(2, [0.0, 0.75, 0.0], [0.3, 0.3, 0.3], [1.0, 1.0]),
            part(3, [-0.65, 0.05, 0.0], [0.3, 0.14, 0.14], [1.0, 1.0]),
            part(4, [0.65, 0.05, 0.0], [0.3, 0.14, 0.14], [1.0, 1.0]),
        ],
    }
}

/// First part hit along a ray, found by marching the implicit functions and
/// refining with bisection.
fn trace_parts(
    parts: &[(Matrix4<f64>, &GtPart)],
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    t0: f64,
    t1: f64,
    steps: usize,
) -> Option<u8> {
    let inside = |t: f64| -> Option<u8> {
        let p = origin + dir * t;
        for (inv, gp) in parts {
            let local4 = inv * nalgebra::Vector4::new(p.x, p.y, p.z, 1.0);
            let local = Vector3::new(local4.x, local4.y, local4.z);
            if implicit_value(&gp.sq.scale, &gp.sq.eps, &local) <= 1.0 {
                return Some(gp.label);
            }
        }
        None
    };
    let dt = (t1 - t0) / steps as f64;
    let mut prev_t = t0;
    for i in 1..=steps {
        let t = t0 + dt * i as f64;
        if inside(t).is_some() {
            // Bisect between the last outside sample and this inside one.
            let (mut lo, mut hi) = (prev_t, t);
            for _ in 0..8 {
                let mid = 0.5 * (lo + hi);
                if inside(mid).is_some() {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return inside(hi);
        }
        prev_t = t;
    }
    None
}

/// Generates a synthetic multi-view dataset by ray-tracing the scene's
/// implicit surfaces. Deterministic for fixed arguments.
pub fn synth_dataset(scene: SynthScene, view_count: usize, size: u32, _seed: u64) -> Dataset {
    let parts = scene_parts(scene);
    let cameras = camera_ring(
        view_count,
        3.0,
        0.9,
        Vector3::zeros(),
        size as f64,
        size,
        size,
    );

    let inverses: Vec<(Matrix4<f64>, &GtPart)> = parts
        .iter()
        .map(|gp| {
            let r = gp.sq.rotation().expect("synthetic poses are valid");
            let mut m = Matrix4::identity();
            m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
            m.fixed_view_mut::<3, 1>(0, 3)
                .copy_from(&Vector3::from(gp.sq.trans));
            (m.try_inverse().expect("rigid transform"), gp)
        })
        .collect();

    let mut views = Vec::with_capacity(view_count);
    for (vi, cam) in cameras.into_iter().enumerate() {
        let mut image = ImageRgb::filled(size, size, BG_COLOR);
        let mut silhouette = ImageGray::new(size, size);
        let mut mask = LabelImage::new(size, size);
        let dist = cam.center().norm();
        for y in 0..size {
            for x in 0..size {
                let (origin, dir) = cam.pixel_ray(x as f64 + 0.5, y as f64 + 0.5);
                if let Some(label) =
                    trace_parts(&inverses, &origin, &dir, dist - 2.0, dist + 2.0, 256)
                {
                    let gp = &parts[(label - 1) as usize];
                    image.set(x, y, gp.color);
                    silhouette.set(x, y, 1.0);
                    mask.set(x, y, label);
                }
            }
        }
        views.push(View {
            id: vi as u32,
            image,
            silhouette,
            mask: Some(mask),
            camera: cam,
        });
    }

    // Ground-truth surface samples from the explicit surface function.
    let mut gt_points = Vec::new();
    for gp in &parts {
        for (eta, omega) in crate::geometry::fibonacci_angles(GT_SAMPLES_PER_PART) {
            gt_points.push(surface_point(&gp.sq, eta, omega).expect("valid pose"));
        }
    }

    Dataset {
        views,
        gt_points: Some(gt_points),
    }
}

// ---------------------------------------------------------------------------
// Disk layout
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CameraJson {
    id: u32,
    /// Row-major world-to-camera matrix.
    view: Vec<f64>,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
}

#[derive(Serialize, Deserialize)]
struct CamerasFile {
    views: Vec<CameraJson>,
}

pub fn write_dataset(dataset: &Dataset, root: &Path) -> Result<(), DatasetError> {
    std::fs::create_dir_all(root.join("images"))?;
    std::fs::create_dir_all(root.join("silhouettes"))?;
    if dataset.has_masks() {
        std::fs::create_dir_all(root.join("masks"))?;
    }

    let mut cams = Vec::new();
    for v in &dataset.views {
        let name = format!("{:03}.png", v.id);
        v.image.save_png(&root.join("images").join(&name))?;
        v.silhouette.save_png(&root.join("silhouettes").join(&name))?;
        if let Some(mask) = &v.mask {
            mask.save_png(&root.join("masks").join(&name))?;
        }
        let mut view = Vec::with_capacity(16);
        for r in 0..4 {
            for c in 0..4 {
                view.push(v.camera.view[(r, c)]);
            }
        }
        cams.push(CameraJson {
            id: v.id,
            view,
            fx: v.camera.fx(),
            fy: v.camera.fy(),
            cx: v.camera.cx(),
            cy: v.camera.cy(),
            width: v.camera.width,
            height: v.camera.height,
        });
    }
    let cameras = serde_json::to_string_pretty(&CamerasFile { views: cams })
        .expect("camera serialization");
    std::fs::write(root.join("cameras.json"), cameras)?;

    if let Some(points) = &dataset.gt_points {
        let mut f = std::io::BufWriter::new(std::fs::File::create(root.join("gt_points.ply"))?);
        writeln!(f, "ply")?;
        writeln!(f, "format ascii 1.0")?;
        writeln!(f, "element vertex {}", points.len())?;
        writeln!(f, "property float x")?;
        writeln!(f, "property float y")?;
        writeln!(f, "property float z")?;
        writeln!(f, "end_header")?;
        for p in points {
            writeln!(f, "{} {} {}", p.x as f32, p.y as f32, p.z as f32)?;
        }
    }
    Ok(())
}

pub fn load_dataset(root: &Path) -> Result<Dataset, DatasetError> {
    let cameras: CamerasFile = serde_json::from_str(
        &std::fs::read_to_string(root.join("cameras.json"))
            .map_err(|e| DatasetError::Malformed(format!("cameras.json: {e}")))?,
    )
    .map_err(|e| DatasetError::Malformed(format!("cameras.json: {e}")))?;

    let mut views = Vec::with_capacity(cameras.views.len());
    for cj in cameras.views {
        if cj.view.len() != 16 {
            return Err(DatasetError::Malformed(format!(
                "view matrix of camera {} must have 16 entries",
                cj.id
            )));
        }
        let mut view = Matrix4::zeros();
        for r in 0..4 {
            for c in 0..4 {
                view[(r, c)] = cj.view[r * 4 + c];
            }
        }
        let camera = Camera::from_intrinsics(
            view, cj.fx, cj.fy, cj.cx, cj.cy, 0.01, 100.0, cj.width, cj.height,
        );
        let name = format!("{:03}.png", cj.id);
        let image = ImageRgb::load_png(&root.join("images").join(&name))?;
        let silhouette = ImageGray::load_png(&root.join("silhouettes").join(&name))?;
        let mask_path = root.join("masks").join(&name);
        let mask = if mask_path.exists() {
            Some(LabelImage::load_png(&mask_path)?)
        } else {
            None
        };
        if image.width != camera.width || image.height != camera.height {
            return Err(DatasetError::Malformed(format!(
                "image {} does not match camera resolution",
                cj.id
            )));
        }
        views.push(View {
            id: cj.id,
            image,
            silhouette,
            mask,
            camera,
        });
    }

    let gt_path = root.join("gt_points.ply");
    let gt_points = if gt_path.exists() {
        Some(read_ascii_ply_points(&gt_path)?)
    } else {
        None
    };

    Ok(Dataset { views, gt_points })
}

fn read_ascii_ply_points(path: &Path) -> Result<Vec<Vector3<f64>>, DatasetError> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut lines = reader.lines();
    let mut count = 0usize;
    for line in lines.by_ref() {
        let line = line?;
        if let Some(rest) = line.strip_prefix("element vertex ") {
            count = rest
                .trim()
                .parse()
                .map_err(|_| DatasetError::Malformed("bad vertex count".into()))?;
        }
        if line.trim() == "end_header" {
            break;
        }
    }
    let mut points = Vec::with_capacity(count);
    for line in lines {
        let line = line?;
        let mut it = line.split_whitespace();
        let (Some(x), Some(y), Some(z)) = (it.next(), it.next(), it.next()) else {
            continue;
        };
        let parse = |s: &str| -> Result<f64, DatasetError> {
            s.parse()
                .map_err(|_| DatasetError::Malformed(format!("bad float {s:?}")))
        };
        points.push(Vector3::new(parse(x)?, parse(y)?, parse(z)?));
    }
    if points.len() != count {
        return Err(DatasetError::Malformed(format!(
            "expected {} points, found {}",
            count,
            points.len()
        )));
    }
    Ok(points)
}
