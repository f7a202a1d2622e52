//! Evaluation metrics: Chamfer distance, PSNR, SSIM.
//!
//! Chamfer here is the sum of both directional mean nearest-neighbor
//! Euclidean distances, served by a small exact kd-tree. PSNR is
//! 10*log10(1/MSE) on [0,1] images, capped at 100 dB. SSIM uses the
//! standard 11x11 Gaussian window (sigma 1.5) with c1=0.01^2, c2=0.03^2,
//! averaged over the valid region (global statistics for tiny images).
//!
//! [`ssim_node`] is the differentiable version used by the stage-2 loss.

use nalgebra::Vector3;
use thiserror::Error;

use crate::autodiff::{CustomOp, NodeId, Tape, Tensor};
use crate::img::ImageRgb;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("image shapes differ: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(u32, u32, u32, u32),
}

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const PSNR_CAP_DB: f64 = 100.0;

// ---------------------------------------------------------------------------
// Chamfer
// ---------------------------------------------------------------------------

/// Exact nearest-neighbor kd-tree over 3D points.
pub struct KdTree {
    points: Vec<Vector3<f64>>,
    nodes: Vec<KdNode>,
    root: Option<usize>,
}

struct KdNode {
    point: u32,
    axis: u8,
    left: Option<usize>,
    right: Option<usize>,
}

impl KdTree {
    pub fn build(points: &[Vector3<f64>]) -> Self {
        let mut tree = Self {
            points: points.to_vec(),
            nodes: Vec::with_capacity(points.len()),
            root: None,
        };
        let mut idx: Vec<u32> = (0..points.len() as u32).collect();
        tree.root = tree.build_rec(&mut idx, 0);
        tree
    }

    fn build_rec(&mut self, idx: &mut [u32], depth: usize) -> Option<usize> {
        if idx.is_empty() {
            return None;
        }
        let axis = (depth % 3) as u8;
        idx.sort_by(|&a, &b| {
            self.points[a as usize][axis as usize]
                .partial_cmp(&self.points[b as usize][axis as usize])
                .unwrap()
                .then(a.cmp(&b))
        });
        let mid = idx.len() / 2;
        let point = idx[mid];
        let node_id = self.nodes.len();
        self.nodes.push(KdNode {
            point,
            axis,
            left: None,
            right: None,
        });
        let (lo, rest) = idx.split_at_mut(mid);
        let hi = &mut rest[1..];
        let left = self.build_rec(lo, depth + 1);
        let right = self.build_rec(hi, depth + 1);
        self.nodes[node_id].left = left;
        self.nodes[node_id].right = right;
        Some(node_id)
    }

    /// Squared distance to the nearest stored point.
    pub fn nearest_sq(&self, q: &Vector3<f64>) -> f64 {
        let mut best = f64::INFINITY;
        if let Some(root) = self.root {
            self.nearest_rec(root, q, &mut best);
        }
        best
    }

    fn nearest_rec(&self, node: usize, q: &Vector3<f64>, best: &mut f64) {
        let n = &self.nodes[node];
        let p = &self.points[n.point as usize];
        let d2 = (p - q).norm_squared();
        if d2 < *best {
            *best = d2;
        }
        let axis = n.axis as usize;
        let delta = q[axis] - p[axis];
        let (near, far) = if delta < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        if let Some(c) = near {
            self.nearest_rec(c, q, best);
        }
        if let Some(c) = far {
            if delta * delta <= *best {
                self.nearest_rec(c, q, best);
            }
        }
    }
}

/// Symmetric Chamfer distance: mean_a min_b |a-b| + mean_b min_a |a-b|.
pub fn chamfer(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "point sets must be nonempty");
    let tree_b = KdTree::build(b);
    let tree_a = KdTree::build(a);
    let mean_ab = a.iter().map(|p| tree_b.nearest_sq(p).sqrt()).sum::<f64>() / a.len() as f64;
    let mean_ba = b.iter().map(|p| tree_a.nearest_sq(p).sqrt()).sum::<f64>() / b.len() as f64;
    mean_ab + mean_ba
}

// ---------------------------------------------------------------------------
// PSNR / SSIM
// ---------------------------------------------------------------------------

fn check_shapes(a: &ImageRgb, b: &ImageRgb) -> Result<(), MetricsError> {
    if a.width != b.width || a.height != b.height {
        return Err(MetricsError::ShapeMismatch(
            a.width, a.height, b.width, b.height,
        ));
    }
    Ok(())
}

/// PSNR in dB over all channels; identical images hit the 100 dB cap.
pub fn psnr(a: &ImageRgb, b: &ImageRgb) -> Result<f64, MetricsError> {
    check_shapes(a, b)?;
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let mut w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

struct PlaneMoments {
    mu: Vec<f64>,
    sigma: Vec<f64>,
    out_w: usize,
    out_h: usize,
}

/// Windowed mean and variance over the valid region.
fn moments(data: &[f64], w: usize, h: usize, win: &[f64]) -> PlaneMoments {
    let k = win.len();
    let out_w = w - k + 1;
    let out_h = h - k + 1;
    // Horizontal pass.
    let mut mu_x = vec![0.0; out_w * h];
    let mut m2_x = vec![0.0; out_w * h];
    for y in 0..h {
        for x in 0..out_w {
            let mut m = 0.0;
            let mut m2 = 0.0;
            for (i, g) in win.iter().enumerate() {
                let v = data[y * w + x + i];
                m += g * v;
                m2 += g * v * v;
            }
            mu_x[y * out_w + x] = m;
            m2_x[y * out_w + x] = m2;
        }
    }
    // Vertical pass.
    let mut mu = vec![0.0; out_w * out_h];
    let mut sigma = vec![0.0; out_w * out_h];
    for y in 0..out_h {
        for x in 0..out_w {
            let mut m = 0.0;
            let mut m2 = 0.0;
            for (i, g) in win.iter().enumerate() {
                m += g * mu_x[(y + i) * out_w + x];
                m2 += g * m2_x[(y + i) * out_w + x];
            }
            mu[y * out_w + x] = m;
            sigma[y * out_w + x] = m2 - m * m;
        }
    }
    PlaneMoments {
        mu,
        sigma,
        out_w,
        out_h,
    }
}

/// Windowed covariance over the valid region (means already known).
fn cross_moment(a: &[f64], b: &[f64], w: usize, h: usize, win: &[f64]) -> Vec<f64> {
    let k = win.len();
    let out_w = w - k + 1;
    let out_h = h - k + 1;
    let mut ab_x = vec![0.0; out_w * h];
    for y in 0..h {
        for x in 0..out_w {
            let mut m = 0.0;
            for (i, g) in win.iter().enumerate() {
                // Parenthesized so the result is symmetric in (a, b) bit-for-bit.
                m += g * (a[y * w + x + i] * b[y * w + x + i]);
            }
            ab_x[y * out_w + x] = m;
        }
    }
    let mut ab = vec![0.0; out_w * out_h];
    for y in 0..out_h {
        for x in 0..out_w {
            let mut m = 0.0;
            for (i, g) in win.iter().enumerate() {
                m += g * ab_x[(y + i) * out_w + x];
            }
            ab[y * out_w + x] = m;
        }
    }
    ab
}

fn ssim_plane(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        // Global-statistics fallback for tiny images.
        let n = (w * h) as f64;
        let mu_a = a.iter().sum::<f64>() / n;
        let mu_b = b.iter().sum::<f64>() / n;
        let var_a = a.iter().map(|v| (v - mu_a) * (v - mu_a)).sum::<f64>() / n;
        let var_b = b.iter().map(|v| (v - mu_b) * (v - mu_b)).sum::<f64>() / n;
        let cov = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - mu_a) * (y - mu_b))
            .sum::<f64>()
            / n;
        return (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
            / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2));
    }
    let win = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let ma = moments(a, w, h, &win);
    let mb = moments(b, w, h, &win);
    let sab = cross_moment(a, b, w, h, &win);
    let mut total = 0.0;
    for i in 0..ma.mu.len() {
        let cov = sab[i] - ma.mu[i] * mb.mu[i];
        let v = (2.0 * ma.mu[i] * mb.mu[i] + SSIM_C1) * (2.0 * cov + SSIM_C2)
            / ((ma.mu[i] * ma.mu[i] + mb.mu[i] * mb.mu[i] + SSIM_C1)
                * (ma.sigma[i] + mb.sigma[i] + SSIM_C2));
        total += v;
    }
    total / (ma.out_w * ma.out_h) as f64
}

/// Mean SSIM over the three channels.
pub fn ssim(a: &ImageRgb, b: &ImageRgb) -> Result<f64, MetricsError> {
    check_shapes(a, b)?;
    let w = a.width as usize;
    let h = a.height as usize;
    let mut total = 0.0;
    for ch in 0..3 {
        let pa: Vec<f64> = a.data.iter().skip(ch).step_by(3).copied().collect();
        let pb: Vec<f64> = b.data.iter().skip(ch).step_by(3).copied().collect();
        total += ssim_plane(&pa, &pb, w, h);
    }
    Ok(total / 3.0)
}

// ---------------------------------------------------------------------------
// Differentiable SSIM (stage-2 loss term)
// ---------------------------------------------------------------------------

#[derive(Debug)]
struct SsimOp {
    inputs: [NodeId; 1],
    target: ImageRgb,
    width: usize,
    height: usize,
}

impl SsimOp {
    /// Scatter-form adjoint of mean windowed SSIM wrt the rendered plane.
    fn backward_plane(
        a: &[f64],
        b: &[f64],
        w: usize,
        h: usize,
        weight: f64,
        grad: &mut [f64],
    ) {
        let win = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
        let k = win.len();
        let ma = moments(a, w, h, &win);
        let mb = moments(b, w, h, &win);
        let sab = cross_moment(a, b, w, h, &win);
        let px_w = weight / (ma.out_w * ma.out_h) as f64;

        for py in 0..ma.out_h {
            for px in 0..ma.out_w {
                let i = py * ma.out_w + px;
                let mu_a = ma.mu[i];
                let mu_b = mb.mu[i];
                let va = ma.sigma[i];
                let vb = mb.sigma[i];
                let cov = sab[i] - mu_a * mu_b;

                let n1 = 2.0 * mu_a * mu_b + SSIM_C1;
                let n2 = 2.0 * cov + SSIM_C2;
                let d1 = mu_a * mu_a + mu_b * mu_b + SSIM_C1;
                let d2 = va + vb + SSIM_C2;
                let s = (n1 * n2) / (d1 * d2);

                // Partials wrt the windowed statistics of plane A.
                let ds_dmua = (2.0 * mu_b * n2) / (d1 * d2) - s * 2.0 * mu_a / d1;
                let ds_dva = -s / d2;
                let ds_dcov = 2.0 * n1 / (d1 * d2);

                for ky in 0..k {
                    for kx in 0..k {
                        let g = win[ky] * win[kx];
                        let qx = px + kx;
                        let qy = py + ky;
                        let q = qy * w + qx;
                        let aq = a[q];
                        let bq = b[q];
                        // mu_a, then var_a = E[A^2]-mu_a^2, then cov.
                        let d = ds_dmua
                            + ds_dva * 2.0 * (aq - mu_a)
                            + ds_dcov * (bq - mu_b);
                        grad[q] += px_w * g * d;
                    }
                }
            }
        }
    }
}

impl CustomOp for SsimOp {
    fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    fn backward(&self, values: &[Tensor], grad_out: &Tensor, acc: &mut dyn FnMut(NodeId, Tensor)) {
        let img = values[self.inputs[0].0].data();
        let g = grad_out.item();
        let mut grad = vec![0.0; img.len()];
        for ch in 0..3 {
            let a: Vec<f64> = img.iter().skip(ch).step_by(3).copied().collect();
            let b: Vec<f64> = self.target.data.iter().skip(ch).step_by(3).copied().collect();
            let mut ga = vec![0.0; a.len()];
            Self::backward_plane(&a, &b, self.width, self.height, g / 3.0, &mut ga);
            for (i, v) in ga.iter().enumerate() {
                grad[i * 3 + ch] = *v;
            }
        }
        acc(
            self.inputs[0],
            Tensor::from_vec(grad, values[self.inputs[0].0].shape()),
        );
    }
}

/// Differentiable mean SSIM of an `[H, W, 3]` image node against a constant
/// target. Requires both dimensions >= the 11x11 window.
pub fn ssim_node(tape: &mut Tape, image: NodeId, target: &ImageRgb) -> NodeId {
    let w = target.width as usize;
    let h = target.height as usize;
    assert!(
        w >= SSIM_WINDOW && h >= SSIM_WINDOW,
        "ssim_node needs images at least {SSIM_WINDOW} px per side"
    );
    let img = tape.value(image).data();
    assert_eq!(img.len(), target.data.len(), "image/target shape mismatch");
    let mut total = 0.0;
    for ch in 0..3 {
        let a: Vec<f64> = img.iter().skip(ch).step_by(3).copied().collect();
        let b: Vec<f64> = target.data.iter().skip(ch).step_by(3).copied().collect();
        total += ssim_plane(&a, &b, w, h);
    }
    tape.custom(
        Tensor::scalar(total / 3.0),
        Box::new(SsimOp {
            inputs: [image],
            target: target.clone(),
            width: w,
            height: h,
        }),
    )
}
