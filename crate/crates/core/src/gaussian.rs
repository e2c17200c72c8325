//! Activated 3D Gaussian sets, raw network outputs and the activation between them.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_input, Error, Result};
use crate::geometry::{CanonicalView, Point3, PointMap, PointSource};
use crate::image::{Rgb, RgbImage};
use crate::nn::{sigmoid, Tensor};

/// Channels of a raw per-pixel prediction.
pub const RAW_CHANNELS: usize = 14;
const OFFSET: usize = 0;
const COLOR: usize = 3;
const OPACITY: usize = 6;
const SCALE: usize = 7;
const QUAT: usize = 10;
/// Lower clamp on activated scales, meters.
pub const MIN_SCALE: f64 = 1e-6;
/// Input colors are clamped to this margin before taking their logit.
const COLOR_LOGIT_EPS: f64 = 1e-3;

/// Renderable Gaussians in the front-camera frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianSet {
    pub mu: Vec<Point3>,
    pub color: Vec<Rgb>,
    pub opacity: Vec<f64>,
    pub scale: Vec<[f64; 3]>,
    /// Unit quaternions `(w, x, y, z)`.
    pub quat: Vec<[f64; 4]>,
    /// Pixel each Gaussian was regressed from; empty for hand-built sets.
    pub sources: Vec<PointSource>,
}

impl GaussianSet {
    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn push(&mut self, mu: Point3, color: Rgb, opacity: f64, scale: [f64; 3], quat: [f64; 4]) {
        self.mu.push(mu);
        self.color.push(color);
        self.opacity.push(opacity);
        self.scale.push(scale);
        self.quat.push(quat);
    }

    /// Checks array lengths, finiteness and value ranges.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        ensure_input!(
            self.color.len() == n && self.opacity.len() == n && self.scale.len() == n && self.quat.len() == n,
            "gaussian attribute arrays have different lengths"
        );
        ensure_input!(
            self.sources.is_empty() || self.sources.len() == n,
            "gaussian provenance must be empty or cover every gaussian"
        );
        for i in 0..n {
            let finite = self.mu[i].iter().chain(&self.color[i]).chain(&self.scale[i]).chain(&self.quat[i]).all(|v| v.is_finite())
                && self.opacity[i].is_finite();
            ensure_input!(finite, "gaussian {i} has a non-finite parameter");
            ensure_input!(self.scale[i].iter().all(|&s| s > 0.0), "gaussian {i} has a non-positive scale");
            ensure_input!(
                (0.0..=1.0).contains(&self.opacity[i]) && self.color[i].iter().all(|c| (0.0..=1.0).contains(c)),
                "gaussian {i} has opacity or color outside [0, 1]"
            );
            let qn: f64 = self.quat[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            ensure_input!((qn - 1.0).abs() <= 1e-6, "gaussian {i} quaternion is not unit length");
        }
        Ok(())
    }

    /// Concatenates sets in the given order.
    pub fn assemble(parts: &[GaussianSet]) -> GaussianSet {
        let mut out = GaussianSet::default();
        let keep_sources = parts.iter().all(|p| p.sources.len() == p.len());
        for p in parts {
            out.mu.extend_from_slice(&p.mu);
            out.color.extend_from_slice(&p.color);
            out.opacity.extend_from_slice(&p.opacity);
            out.scale.extend_from_slice(&p.scale);
            out.quat.extend_from_slice(&p.quat);
            if keep_sources {
                out.sources.extend_from_slice(&p.sources);
            }
        }
        out
    }

    /// Subset in the order of `idx`.
    pub fn select(&self, idx: &[usize]) -> GaussianSet {
        GaussianSet {
            mu: idx.iter().map(|&i| self.mu[i]).collect(),
            color: idx.iter().map(|&i| self.color[i]).collect(),
            opacity: idx.iter().map(|&i| self.opacity[i]).collect(),
            scale: idx.iter().map(|&i| self.scale[i]).collect(),
            quat: idx.iter().map(|&i| self.quat[i]).collect(),
            sources: if self.sources.is_empty() {
                Vec::new()
            } else {
                idx.iter().map(|&i| self.sources[i]).collect()
            },
        }
    }
}

/// Loss gradients with respect to each attribute of a [`GaussianSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianGrads {
    pub mu: Vec<[f64; 3]>,
    pub color: Vec<[f64; 3]>,
    pub opacity: Vec<f64>,
    pub scale: Vec<[f64; 3]>,
    pub quat: Vec<[f64; 4]>,
}

impl GaussianGrads {
    pub fn zeros(n: usize) -> Self {
        GaussianGrads {
            mu: vec![[0.0; 3]; n],
            color: vec![[0.0; 3]; n],
            opacity: vec![0.0; n],
            scale: vec![[0.0; 3]; n],
            quat: vec![[0.0; 4]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn add_assign(&mut self, other: &GaussianGrads) {
        assert_eq!(self.len(), other.len(), "gradient sets differ in length");
        for i in 0..self.len() {
            for k in 0..3 {
                self.mu[i][k] += other.mu[i][k];
                self.color[i][k] += other.color[i][k];
                self.scale[i][k] += other.scale[i][k];
            }
            for k in 0..4 {
                self.quat[i][k] += other.quat[i][k];
            }
            self.opacity[i] += other.opacity[i];
        }
    }

    /// Copy of the gradients for the Gaussians in `range`.
    pub fn slice(&self, range: std::ops::Range<usize>) -> GaussianGrads {
        GaussianGrads {
            mu: self.mu[range.clone()].to_vec(),
            color: self.color[range.clone()].to_vec(),
            opacity: self.opacity[range.clone()].to_vec(),
            scale: self.scale[range.clone()].to_vec(),
            quat: self.quat[range].to_vec(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.mu.iter().chain(&self.color).chain(&self.scale).all(|v| v.iter().all(|&x| x == 0.0))
            && self.quat.iter().all(|v| v.iter().all(|&x| x == 0.0))
            && self.opacity.iter().all(|&x| x == 0.0)
    }
}

/// Unconstrained network output for one view: `[14, H, W]` holding offset (3),
/// color (3), opacity (1), log-scale (3) and quaternion (4) channels.
#[derive(Clone, Debug, PartialEq)]
pub struct RawGaussianOutput {
    data: Tensor,
}

impl RawGaussianOutput {
    pub fn new(data: Tensor) -> Result<Self> {
        let s = data.shape();
        ensure_input!(s.len() == 3 && s[0] == RAW_CHANNELS, "raw gaussian output must be [{RAW_CHANNELS}, H, W], got {s:?}");
        ensure_input!(data.is_finite(), "raw gaussian output is not finite");
        Ok(RawGaussianOutput { data })
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    fn channel(&self, ch: usize, i: usize) -> f64 {
        self.data.data()[ch * self.height() * self.width() + i]
    }
}

/// Activation caps as fractions of the subject's bounding-box diagonal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActivationConfig {
    /// Per-axis bound on the learned position offset.
    pub offset_cap: f64,
    /// Upper clamp on each scale axis.
    pub scale_cap: f64,
    /// Scale produced by a zero log-scale output.
    pub base_scale: f64,
}

impl Default for ActivationConfig {
    fn default() -> Self {
        ActivationConfig {
            offset_cap: 0.02,
            scale_cap: 0.05,
            base_scale: 0.004,
        }
    }
}

impl ActivationConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.offset_cap, self.scale_cap, self.base_scale].iter().all(|v| v.is_finite() && *v > 0.0);
        if !ok || self.base_scale > self.scale_cap {
            return Err(Error::InvalidConfig(format!("activation caps must be positive with base <= scale cap: {self:?}")));
        }
        Ok(())
    }

    /// Absolute caps for a subject whose prior cloud has the given diagonal.
    pub fn caps(&self, diagonal: f64) -> Result<ActivationCaps> {
        self.validate()?;
        ensure_input!(diagonal.is_finite() && diagonal > 0.0, "bounding-box diagonal must be positive, got {diagonal}");
        Ok(ActivationCaps {
            offset: self.offset_cap * diagonal,
            scale_max: (self.scale_cap * diagonal).max(MIN_SCALE),
            scale_base: self.base_scale * diagonal,
        })
    }
}

/// Absolute activation bounds in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActivationCaps {
    pub offset: f64,
    pub scale_max: f64,
    pub scale_base: f64,
}

fn color_logit(c: f64) -> f64 {
    let c = c.clamp(COLOR_LOGIT_EPS, 1.0 - COLOR_LOGIT_EPS);
    (c / (1.0 - c)).ln()
}

fn check_shapes(raw: &RawGaussianOutput, prior: &PointMap, image: &RgbImage) -> Result<()> {
    ensure_input!(
        raw.width() == prior.width() && raw.height() == prior.height() && image.dims() == (prior.width(), prior.height()),
        "raw output {}x{}, prior {}x{} and image {:?} must share a resolution",
        raw.width(),
        raw.height(),
        prior.width(),
        prior.height(),
        image.dims()
    );
    Ok(())
}

/// Turns one view's raw output into Gaussians, one per valid prior pixel in
/// row-major order.
///
/// `prior` holds δ-scaled points. Position is the prior plus a tanh-bounded
/// offset; color is a sigmoid residual on the logit of the input pixel color,
/// so a zero output reproduces the input; opacity is a sigmoid; scale is
/// `base·exp(raw)` clamped to `[MIN_SCALE, scale_max]`; the quaternion is the
/// normalized raw 4-vector with an identity fallback near zero.
pub fn activate(raw: &RawGaussianOutput, prior: &PointMap, image: &RgbImage, view: CanonicalView, caps: &ActivationCaps) -> Result<GaussianSet> {
    check_shapes(raw, prior, image)?;
    let w = prior.width();
    let mut out = GaussianSet::default();
    for (r, c) in prior.valid_pixels() {
        let i = r * w + c;
        let p = prior.points.get(r, c);
        let px = image.get(r, c);
        let mu = std::array::from_fn(|k| p[k] + raw.channel(OFFSET + k, i).tanh() * caps.offset);
        let color = std::array::from_fn(|k| sigmoid(raw.channel(COLOR + k, i) + color_logit(px[k])));
        let opacity = sigmoid(raw.channel(OPACITY, i));
        let scale = std::array::from_fn(|k| (caps.scale_base * raw.channel(SCALE + k, i).exp()).clamp(MIN_SCALE, caps.scale_max));
        let q: [f64; 4] = std::array::from_fn(|k| raw.channel(QUAT + k, i));
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let quat = if norm < 1e-8 { [1.0, 0.0, 0.0, 0.0] } else { q.map(|v| v / norm) };
        out.push(mu, color, opacity, scale, quat);
        out.sources.push(PointSource {
            view,
            row: r as u32,
            col: c as u32,
        });
    }
    Ok(out)
}

/// Chains Gaussian gradients back to the raw output. `grads` must cover the
/// Gaussians produced by [`activate`] for this view, in the same order.
pub fn activate_backward(raw: &RawGaussianOutput, prior: &PointMap, image: &RgbImage, caps: &ActivationCaps, grads: &GaussianGrads) -> Result<Tensor> {
    check_shapes(raw, prior, image)?;
    let pixels = prior.valid_pixels();
    ensure_input!(grads.len() == pixels.len(), "{} gradients for {} gaussians", grads.len(), pixels.len());
    let (h, w) = (raw.height(), raw.width());
    let n = h * w;
    let mut out = Tensor::zeros(&[RAW_CHANNELS, h, w]);
    let d = out.data_mut();
    for (j, &(r, c)) in pixels.iter().enumerate() {
        let i = r * w + c;
        let px = image.get(r, c);
        for k in 0..3 {
            let t = raw.channel(OFFSET + k, i).tanh();
            d[(OFFSET + k) * n + i] = grads.mu[j][k] * caps.offset * (1.0 - t * t);
            let s = sigmoid(raw.channel(COLOR + k, i) + color_logit(px[k]));
            d[(COLOR + k) * n + i] = grads.color[j][k] * s * (1.0 - s);
            let sc = caps.scale_base * raw.channel(SCALE + k, i).exp();
            if sc > MIN_SCALE && sc < caps.scale_max {
                d[(SCALE + k) * n + i] = grads.scale[j][k] * sc;
            }
        }
        let o = sigmoid(raw.channel(OPACITY, i));
        d[OPACITY * n + i] = grads.opacity[j] * o * (1.0 - o);
        let q: [f64; 4] = std::array::from_fn(|k| raw.channel(QUAT + k, i));
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm >= 1e-8 {
            let qn = q.map(|v| v / norm);
            let g = grads.quat[j];
            let dot: f64 = (0..4).map(|k| g[k] * qn[k]).sum();
            for k in 0..4 {
                d[(QUAT + k) * n + i] = (g[k] - qn[k] * dot) / norm;
            }
        }
    }
    Ok(out)
}
