//! Differentiable 3D Gaussian splatting with an analytic backward pass.
//!
//! Each Gaussian is projected with the local affine (EWA) approximation,
//! evaluated exactly on every pixel of its 3σ bounding rectangle and
//! composited front to back after a depth sort.

use std::cmp::Ordering;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};

use crate::error::{ensure_input, Result};
use crate::gaussian::{GaussianGrads, GaussianSet};
use crate::geometry::CameraModel;
use crate::image::{Grid, Rgb, RgbImage};

/// Gaussians whose camera-frame depth is at or below this are culled (meters).
pub const NEAR_PLANE: f64 = 0.01;
/// Added to both diagonal entries of every screen-space covariance (px²).
pub const COV2D_BLUR: f64 = 0.3;
pub const MAX_ALPHA: f64 = 0.999;
/// Compositing stops once transmittance falls below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;

/// Rotation matrix of `q = (w, x, y, z)` after normalization.
///
/// Returns the matrix, the normalized quaternion and the input norm. Quaternions
/// shorter than 1e-8 map to the identity.
pub fn quat_to_rotation(q: &[f64; 4]) -> (Matrix3<f64>, [f64; 4], f64) {
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-8 {
        return (Matrix3::identity(), [1.0, 0.0, 0.0, 0.0], norm);
    }
    let [w, x, y, z] = q.map(|v| v / norm);
    let r = Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    );
    (r, [w, x, y, z], norm)
}

/// World-space covariance `R(q)·diag(s²)·R(q)ᵀ`.
pub fn covariance3d(scale: &[f64; 3], quat: &[f64; 4]) -> Matrix3<f64> {
    let (r, _, _) = quat_to_rotation(quat);
    let m = r * Matrix3::from_diagonal(&Vector3::from(*scale));
    m * m.transpose()
}

/// Screen-space footprint of one Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    /// `(u, v)` in pixels.
    pub mean2d: [f64; 2],
    /// `(σ_uu, σ_uv, σ_vv)` in px², including the blur floor.
    pub cov2d: [f64; 3],
    pub depth: f64,
    pub culled: bool,
}

/// Everything the backward pass needs about a projected Gaussian.
#[derive(Clone, Debug)]
struct Splat {
    mean: [f64; 2],
    conic: [f64; 3],
    cov2d: Matrix2<f64>,
    depth: f64,
    p_cam: Vector3<f64>,
    t: Matrix2x3<f64>,
    sigma: Matrix3<f64>,
    rot: Matrix3<f64>,
    qn: [f64; 4],
    qnorm: f64,
    /// Inclusive pixel rectangle `(row0, row1, col0, col1)`.
    rect: (usize, usize, usize, usize),
}

fn project_splat(mu: &[f64; 3], scale: &[f64; 3], quat: &[f64; 4], cam: &CameraModel) -> Option<Splat> {
    let w = cam.rot();
    let p = w * Vector3::from(*mu) + cam.trans();
    let (x, y, z) = (p.x, p.y, p.z);
    if z <= NEAR_PLANE {
        return None;
    }
    let (rot, qn, qnorm) = quat_to_rotation(quat);
    let m = rot * Matrix3::from_diagonal(&Vector3::from(*scale));
    let sigma = m * m.transpose();
    let j = Matrix2x3::new(cam.fx / z, 0.0, -cam.fx * x / (z * z), 0.0, cam.fy / z, -cam.fy * y / (z * z));
    let t = j * w;
    let cov2d = t * sigma * t.transpose() + Matrix2::identity() * COV2D_BLUR;
    let (a, b, c) = (cov2d[(0, 0)], 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]), cov2d[(1, 1)]);
    let det = a * c - b * b;
    if !(det > 0.0) {
        return None;
    }
    let conic = [c / det, -b / det, a / det];
    let mean = [cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy];
    let mid = 0.5 * (a + c);
    let lambda = mid + (mid * mid - det).max(0.0).sqrt();
    let radius = (3.0 * lambda.sqrt()).ceil();
    let lo = |m: f64| (m - radius).ceil().max(0.0);
    let hi = |m: f64, n: usize| (m + radius).floor().min(n as f64 - 1.0);
    let (c0, c1) = (lo(mean[0]), hi(mean[0], cam.width));
    let (r0, r1) = (lo(mean[1]), hi(mean[1], cam.height));
    if !(c0 <= c1 && r0 <= r1) {
        return None;
    }
    Some(Splat {
        mean,
        conic,
        cov2d: Matrix2::new(a, b, b, c),
        depth: z,
        p_cam: p,
        t,
        sigma,
        rot,
        qn,
        qnorm,
        rect: (r0 as usize, r1 as usize, c0 as usize, c1 as usize),
    })
}

/// Projects one Gaussian; `culled` is set behind the near plane.
pub fn project_gaussian(mu: &[f64; 3], scale: &[f64; 3], quat: &[f64; 4], camera: &CameraModel) -> Projection {
    let w = camera.rot();
    let p = w * Vector3::from(*mu) + camera.trans();
    if p.z <= NEAR_PLANE {
        return Projection {
            mean2d: [f64::NAN; 2],
            cov2d: [f64::NAN; 3],
            depth: p.z,
            culled: true,
        };
    }
    let sigma = covariance3d(scale, quat);
    let j = Matrix2x3::new(camera.fx / p.z, 0.0, -camera.fx * p.x / (p.z * p.z), 0.0, camera.fy / p.z, -camera.fy * p.y / (p.z * p.z));
    let t = j * w;
    let cov = t * sigma * t.transpose() + Matrix2::identity() * COV2D_BLUR;
    Projection {
        mean2d: [camera.fx * p.x / p.z + camera.cx, camera.fy * p.y / p.z + camera.cy],
        cov2d: [cov[(0, 0)], 0.5 * (cov[(0, 1)] + cov[(1, 0)]), cov[(1, 1)]],
        depth: p.z,
        culled: false,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub image: RgbImage,
    /// Accumulated opacity `1 − T_final`.
    pub alpha: Grid<f64>,
}

/// A completed forward pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct Rasterization {
    n: usize,
    camera: CameraModel,
    width: usize,
    height: usize,
    background: Rgb,
    splats: Vec<Option<Splat>>,
    /// Per-pixel CSR lists of Gaussian indices in compositing order.
    offsets: Vec<usize>,
    entries: Vec<u32>,
    /// How many list entries each pixel composited before stopping.
    used: Vec<u32>,
    final_t: Vec<f64>,
    output: RenderOutput,
}

fn check_renderable(set: &GaussianSet) -> Result<()> {
    let n = set.len();
    ensure_input!(
        set.color.len() == n && set.opacity.len() == n && set.scale.len() == n && set.quat.len() == n,
        "gaussian attribute arrays have different lengths"
    );
    for i in 0..n {
        let finite = set.mu[i].iter().chain(&set.color[i]).chain(&set.scale[i]).chain(&set.quat[i]).all(|v| v.is_finite())
            && set.opacity[i].is_finite();
        ensure_input!(finite, "gaussian {i} has a non-finite parameter");
        ensure_input!(set.scale[i].iter().all(|&s| s > 0.0), "gaussian {i} has a non-positive scale");
    }
    Ok(())
}

/// Depth first; exact depth ties fall back to the parameters themselves so the
/// order never depends on where a Gaussian sits in the input list.
fn compare(set: &GaussianSet, splats: &[Option<Splat>], a: usize, b: usize) -> Ordering {
    let (sa, sb) = (splats[a].as_ref().unwrap(), splats[b].as_ref().unwrap());
    let key = |i: usize| {
        set.mu[i]
            .into_iter()
            .chain(set.color[i])
            .chain([set.opacity[i]])
            .chain(set.scale[i])
            .chain(set.quat[i])
    };
    sa.depth.total_cmp(&sb.depth).then_with(|| {
        key(a)
            .zip(key(b))
            .map(|(x, y)| x.total_cmp(&y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

impl Splat {
    #[inline]
    fn power(&self, row: usize, col: usize) -> (f64, f64, f64) {
        let dx = col as f64 - self.mean[0];
        let dy = row as f64 - self.mean[1];
        let [qa, qb, qc] = self.conic;
        (-0.5 * (qa * dx * dx + 2.0 * qb * dx * dy + qc * dy * dy), dx, dy)
    }
}

/// Forward pass keeping the state needed by [`Rasterization::backward`].
pub fn rasterize(set: &GaussianSet, camera: &CameraModel, background: Rgb) -> Result<Rasterization> {
    check_renderable(set)?;
    camera.validate()?;
    let (w, h) = (camera.width, camera.height);
    let splats: Vec<Option<Splat>> = (0..set.len())
        .map(|i| project_splat(&set.mu[i], &set.scale[i], &set.quat[i], camera))
        .collect();
    let mut order: Vec<usize> = (0..set.len()).filter(|&i| splats[i].is_some()).collect();
    order.sort_by(|&a, &b| compare(set, &splats, a, b));

    let mut counts = vec![0usize; w * h + 1];
    for &i in &order {
        let (r0, r1, c0, c1) = splats[i].as_ref().unwrap().rect;
        for r in r0..=r1 {
            for c in c0..=c1 {
                counts[r * w + c + 1] += 1;
            }
        }
    }
    for p in 0..w * h {
        counts[p + 1] += counts[p];
    }
    let offsets = counts;
    let mut fill = offsets.clone();
    let mut entries = vec![0u32; offsets[w * h]];
    for &i in &order {
        let (r0, r1, c0, c1) = splats[i].as_ref().unwrap().rect;
        for r in r0..=r1 {
            for c in c0..=c1 {
                let p = r * w + c;
                entries[fill[p]] = i as u32;
                fill[p] += 1;
            }
        }
    }

    let mut image = Grid::filled(w, h, background);
    let mut alpha = Grid::filled(w, h, 0.0);
    let mut used = vec![0u32; w * h];
    let mut final_t = vec![1.0; w * h];
    for r in 0..h {
        for c in 0..w {
            let p = r * w + c;
            let mut t = 1.0;
            let mut acc = [0.0; 3];
            let mut n_used = 0;
            for &gi in &entries[offsets[p]..offsets[p + 1]] {
                let gi = gi as usize;
                let s = splats[gi].as_ref().unwrap();
                let (power, _, _) = s.power(r, c);
                let a = (set.opacity[gi] * power.exp()).min(MAX_ALPHA);
                let wgt = a * t;
                for ch in 0..3 {
                    acc[ch] += set.color[gi][ch] * wgt;
                }
                t *= 1.0 - a;
                n_used += 1;
                if t < MIN_TRANSMITTANCE {
                    break;
                }
            }
            used[p] = n_used;
            final_t[p] = t;
            image.set(r, c, [0, 1, 2].map(|ch| acc[ch] + t * background[ch]));
            alpha.set(r, c, 1.0 - t);
        }
    }
    Ok(Rasterization {
        n: set.len(),
        camera: camera.clone(),
        width: w,
        height: h,
        background,
        splats,
        offsets,
        entries,
        used,
        final_t,
        output: RenderOutput { image, alpha },
    })
}

/// Renders `set` from `camera` over a constant background.
pub fn render(set: &GaussianSet, camera: &CameraModel, background: Rgb) -> Result<RenderOutput> {
    Ok(rasterize(set, camera, background)?.output)
}

/// Gradients of `Σ upstream · image` with respect to every Gaussian parameter.
pub fn render_backward(set: &GaussianSet, camera: &CameraModel, background: Rgb, upstream: &RgbImage) -> Result<GaussianGrads> {
    rasterize(set, camera, background)?.backward(set, upstream)
}

/// Partial derivatives of the rotation matrix entries with respect to the
/// normalized quaternion components `(w, x, y, z)`.
fn rotation_quat_grad(d_r: &Matrix3<f64>, q: &[f64; 4]) -> [f64; 4] {
    let [w, x, y, z] = *q;
    let g = |r: usize, c: usize| d_r[(r, c)];
    let dw = 2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0) + w * g(2, 1) - 2.0 * x * g(2, 2));
    let dy = 2.0 * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0) + z * g(2, 1) - 2.0 * y * g(2, 2));
    let dz = 2.0 * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1) + y * g(1, 2) + x * g(2, 0) + y * g(2, 1));
    [dw, dx, dy, dz]
}

impl Rasterization {
    pub fn output(&self) -> &RenderOutput {
        &self.output
    }

    pub fn into_output(self) -> RenderOutput {
        self.output
    }

    /// Number of Gaussians that survived culling.
    pub fn visible(&self) -> usize {
        self.splats.iter().filter(|s| s.is_some()).count()
    }

    /// Gradients of `Σ upstream · image`; `set` must be the one rasterized.
    pub fn backward(&self, set: &GaussianSet, upstream: &RgbImage) -> Result<GaussianGrads> {
        ensure_input!(set.len() == self.n, "backward got {} gaussians, forward had {}", set.len(), self.n);
        ensure_input!(
            upstream.dims() == (self.width, self.height),
            "upstream gradient is {:?}, render is {}x{}",
            upstream.dims(),
            self.width,
            self.height
        );
        let n = self.n;
        // screen-space accumulators: u, v, conic (a, b, c), opacity
        let mut d_mean = vec![[0.0; 2]; n];
        let mut d_conic = vec![[0.0; 3]; n];
        let mut grads = GaussianGrads::zeros(n);
        let bg = self.background;
        let w_rot = self.camera.rot();
        let (fx, fy) = (self.camera.fx, self.camera.fy);
        for r in 0..self.height {
            for c in 0..self.width {
                let p = r * self.width + c;
                let g = *upstream.get(r, c);
                if g == [0.0; 3] {
                    continue;
                }
                let list = &self.entries[self.offsets[p]..self.offsets[p] + self.used[p] as usize];
                let mut t = self.final_t[p];
                let mut behind = [0, 1, 2].map(|ch| bg[ch] * t);
                for &gi in list.iter().rev() {
                    let gi = gi as usize;
                    let s = self.splats[gi].as_ref().unwrap();
                    let (power, dx, dy) = s.power(r, c);
                    let gauss = power.exp();
                    let raw = set.opacity[gi] * gauss;
                    let a = raw.min(MAX_ALPHA);
                    let t_i = t / (1.0 - a);
                    let col = set.color[gi];
                    let mut d_alpha = 0.0;
                    for ch in 0..3 {
                        grads.color[gi][ch] += g[ch] * a * t_i;
                        d_alpha += g[ch] * (col[ch] * t_i - behind[ch] / (1.0 - a));
                        behind[ch] += col[ch] * a * t_i;
                    }
                    t = t_i;
                    if raw < MAX_ALPHA {
                        grads.opacity[gi] += d_alpha * gauss;
                        let d_power = d_alpha * a;
                        let [qa, qb, qc] = s.conic;
                        d_mean[gi][0] += d_power * (qa * dx + qb * dy);
                        d_mean[gi][1] += d_power * (qb * dx + qc * dy);
                        d_conic[gi][0] += d_power * (-0.5 * dx * dx);
                        d_conic[gi][1] += d_power * (-dx * dy);
                        d_conic[gi][2] += d_power * (-0.5 * dy * dy);
                    }
                }
            }
        }
        for (gi, slot) in self.splats.iter().enumerate() {
            let Some(s) = slot else { continue };
            let [ga, gb, gc] = d_conic[gi];
            let [du, dv] = d_mean[gi];
            if ga == 0.0 && gb == 0.0 && gc == 0.0 && du == 0.0 && dv == 0.0 {
                continue;
            }
            // conic = cov2d⁻¹, so dL/dcov2d = −Q·G·Q with G the symmetric conic gradient
            let q = Matrix2::new(s.conic[0], s.conic[1], s.conic[1], s.conic[2]);
            let g_q = Matrix2::new(ga, 0.5 * gb, 0.5 * gb, gc);
            let d_cov2d = -(q * g_q * q);
            debug_assert!((s.cov2d * q - Matrix2::identity()).norm() < 1e-6);
            let d_sigma = s.t.transpose() * d_cov2d * s.t;
            let d_t = 2.0 * d_cov2d * s.t * s.sigma;
            let d_j = d_t * w_rot.transpose();
            let (x, y, z) = (s.p_cam.x, s.p_cam.y, s.p_cam.z);
            let (z2, z3) = (z * z, z * z * z);
            let d_p = Vector3::new(
                du * fx / z - d_j[(0, 2)] * fx / z2,
                dv * fy / z - d_j[(1, 2)] * fy / z2,
                -du * fx * x / z2 - dv * fy * y / z2 - d_j[(0, 0)] * fx / z2 + d_j[(0, 2)] * 2.0 * fx * x / z3 - d_j[(1, 1)] * fy / z2
                    + d_j[(1, 2)] * 2.0 * fy * y / z3,
            );
            grads.mu[gi] = (w_rot.transpose() * d_p).into();

            // Σ = M·Mᵀ with M = R·diag(s)
            let scale = set.scale[gi];
            let m = s.rot * Matrix3::from_diagonal(&Vector3::from(scale));
            let d_m = 2.0 * d_sigma * m;
            let mut d_r = Matrix3::zeros();
            for i in 0..3 {
                for j in 0..3 {
                    d_r[(i, j)] = d_m[(i, j)] * scale[j];
                    grads.scale[gi][j] += d_m[(i, j)] * s.rot[(i, j)];
                }
            }
            if s.qnorm >= 1e-8 {
                let d_qn = rotation_quat_grad(&d_r, &s.qn);
                let dot: f64 = (0..4).map(|k| d_qn[k] * s.qn[k]).sum();
                grads.quat[gi] = [0, 1, 2, 3].map(|k| (d_qn[k] - s.qn[k] * dot) / s.qnorm);
            }
        }
        Ok(grads)
    }
}
