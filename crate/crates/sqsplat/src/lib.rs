//! Compositional 3D reconstruction from multi-view silhouettes.
//!
//! The pipeline fits a small set of superquadric primitives to calibrated
//! silhouette images with a differentiable soft rasterizer, keeps the
//! primitives semantically coherent with an attention-guided centering loss
//! over clustered 2D semantic priors, and restructures the set with dynamic
//! split/fuse/prune operations. A second stage binds splat Gaussians to the
//! primitive triangles so the scene renders with high fidelity while staying
//! editable part-by-part: rigid edits of a primitive carry its Gaussians along.
//!
//! Module map:
//! - [`autodiff`]: reverse-mode tape, Adam, finite-difference checking.
//! - [`geometry`]: superquadric parameterization, icosphere templates, meshes.
//! - [`camera`]: pinhole camera and projection transforms.
//! - [`rasterize`]: soft dual rasterization (images + point/box prompts).
//! - [`semantics`]: attention-map providers and HDBSCAN clustering.
//! - [`acloss`]: attention-guided centering loss.
//! - [`structure`]: dynamic split, fuse, and transparency pruning.
//! - [`gaussians`]: triangle-bound splats, density control, edits.
//! - [`optimize`]: the two training stages, schedules, checkpoints.
//! - [`metrics`]: Chamfer distance, PSNR, SSIM.
//! - [`dataset`]: dataset model, synthetic scene generation, disk layout.

pub mod acloss;
pub mod autodiff;
pub mod camera;
pub mod checkpoint;
pub mod dataset;
pub mod gaussians;
pub mod geometry;
pub mod hdbscan;
pub mod img;
pub mod metrics;
pub mod optimize;
pub mod rasterize;
pub mod scene;
pub mod semantics;
pub mod structure;
