//! Per-view UNet mapping a (pointmap, color image) pair to raw per-pixel
//! Gaussian attributes. One set of weights serves all four views.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure_input, Error, Result};
use crate::gaussian::{RawGaussianOutput, RAW_CHANNELS};
use crate::geometry::{Point3, PointMap};
use crate::image::RgbImage;
use crate::nn::layers::{Conv2d, GroupNorm};
use crate::nn::{Graph, ParamId, ParamStore, Tensor, Var};

pub const INPUT_CHANNELS: usize = 6;
/// Initial opacity logit of every Gaussian.
const INIT_OPACITY_LOGIT: f64 = 2.0;
/// Shrinks the output convolution so initial outputs sit near their biases.
const OUTPUT_INIT_GAIN: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    /// Convolution width at every level.
    pub channels: usize,
    /// Number of downsampling (and upsampling) stages.
    pub levels: usize,
    pub groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            channels: 16,
            levels: 3,
            groups: 4,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.levels == 0 || self.groups == 0 || self.channels % self.groups != 0 {
            return Err(Error::InvalidConfig(format!(
                "unet needs positive levels and channels divisible by groups: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, groups: usize) -> Self {
        ResBlock {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), cin, groups),
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), cin, cout, 3, 1),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), cout, groups),
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), cout, cout, 3, 1),
            skip: (cin != cout).then(|| Conv2d::new(store, rng, &format!("{name}.skip"), cin, cout, 1, 1)),
        }
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.norm1.forward(g, x);
        let h = g.silu(h);
        let h = self.conv1.forward(g, h);
        let h = self.norm2.forward(g, h);
        let h = g.silu(h);
        let h = self.conv2.forward(g, h);
        let s = match &self.skip {
            Some(c) => c.forward(g, x),
            None => x,
        };
        g.add(h, s)
    }
}

/// The regression network and its parameters.
#[derive(Clone, Debug)]
pub struct GaussianNet {
    cfg: UNetConfig,
    store: ParamStore,
    stem: Conv2d,
    down: Vec<(ResBlock, Conv2d)>,
    mid: ResBlock,
    up: Vec<ResBlock>,
    out_norm: GroupNorm,
    out: Conv2d,
}

impl GaussianNet {
    pub fn new(cfg: UNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (c, gr) = (cfg.channels, cfg.groups);
        let s = &mut store;
        let stem = Conv2d::new(s, &mut rng, "stem", INPUT_CHANNELS, c, 3, 1);
        let down = (0..cfg.levels)
            .map(|l| {
                (
                    ResBlock::new(s, &mut rng, &format!("down.{l}.res"), c, c, gr),
                    Conv2d::new(s, &mut rng, &format!("down.{l}.pool"), c, c, 3, 2),
                )
            })
            .collect();
        let mid = ResBlock::new(s, &mut rng, "mid", c, c, gr);
        let up = (0..cfg.levels).map(|l| ResBlock::new(s, &mut rng, &format!("up.{l}"), 2 * c, c, gr)).collect();
        let out_norm = GroupNorm::new(s, "out.norm", c, gr);
        let out = Conv2d::new(s, &mut rng, "out.conv", c, RAW_CHANNELS, 3, 1);
        s.get_mut(out.w).data_mut().iter_mut().for_each(|v| *v *= OUTPUT_INIT_GAIN);
        let bias = s.get_mut(out.b).data_mut();
        bias[6] = INIT_OPACITY_LOGIT;
        bias[10] = 1.0;
        Ok(GaussianNet {
            cfg,
            store,
            stem,
            down,
            mid,
            up,
            out_norm,
            out,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.store.ids().collect()
    }

    /// Maps a `[N, 6, H, W]` batch to `[N, 14, H, W]` raw attributes.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let mut h = self.stem.forward(g, x);
        let mut skips = Vec::with_capacity(self.down.len());
        for (res, pool) in &self.down {
            h = res.forward(g, h);
            skips.push(h);
            h = pool.forward(g, h);
        }
        h = self.mid.forward(g, h);
        for (res, skip) in self.up.iter().zip(skips.into_iter().rev()) {
            let u = g.upsample2x(h);
            let cat = g.concat(u, skip, 1);
            h = res.forward(g, cat);
        }
        let h = self.out_norm.forward(g, h);
        let h = g.silu(h);
        self.out.forward(g, h)
    }

    /// Runs the network on prepared `[6, H, W]` inputs, one output per input.
    pub fn run(&self, inputs: &[Tensor]) -> Result<Vec<RawGaussianOutput>> {
        let batch = stack(inputs)?;
        self.check_input(&batch)?;
        let mut g = Graph::new(&self.store);
        let x = g.constant(batch);
        let y = self.forward(&mut g, x);
        unstack(g.value(y))
    }

    /// Raw attributes for one view.
    pub fn regress_view(&self, prior: &PointMap, image: &RgbImage, frame: &InputFrame) -> Result<RawGaussianOutput> {
        let x = prepare_input(prior, image, frame)?;
        let mut out = self.run(&[x])?;
        Ok(out.remove(0))
    }

    fn check_resolution(&self, h: usize, w: usize) -> Result<()> {
        let m = 1 << self.cfg.levels;
        ensure_input!(h % m == 0 && w % m == 0 && h > 0 && w > 0, "unet with {} levels needs sides divisible by {m}, got {w}x{h}", self.cfg.levels);
        Ok(())
    }
}

/// Normalization that maps a subject's points into a unit-scale box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InputFrame {
    pub center: Point3,
    pub diagonal: f64,
}

impl InputFrame {
    pub fn new(center: Point3, diagonal: f64) -> Result<Self> {
        ensure_input!(
            diagonal.is_finite() && diagonal > 0.0 && center.iter().all(|v| v.is_finite()),
            "input frame needs a finite center and positive diagonal"
        );
        Ok(InputFrame { center, diagonal })
    }

    /// Centroid and bounding-box diagonal of a point set.
    pub fn from_points(points: &[Point3]) -> Result<Self> {
        ensure_input!(!points.is_empty(), "cannot normalize an empty point set");
        let mut c = [0.0; 3];
        for p in points {
            for k in 0..3 {
                c[k] += p[k] / points.len() as f64;
            }
        }
        InputFrame::new(c, crate::geometry::bbox_diagonal(points))
    }
}

/// `[6, H, W]` network input: normalized xyz then color centered on 0.5, both
/// zero at invalid pixels.
pub fn prepare_input(prior: &PointMap, image: &RgbImage, frame: &InputFrame) -> Result<Tensor> {
    let (w, h) = (prior.width(), prior.height());
    ensure_input!(image.dims() == (w, h), "image {:?} does not match pointmap {w}x{h}", image.dims());
    let n = w * h;
    let mut d = vec![0.0; INPUT_CHANNELS * n];
    let inv = 2.0 / frame.diagonal;
    for (r, c) in prior.valid_pixels() {
        let i = r * w + c;
        let p = prior.points.get(r, c);
        let px = image.get(r, c);
        for k in 0..3 {
            d[k * n + i] = (p[k] - frame.center[k]) * inv;
            d[(3 + k) * n + i] = px[k] - 0.5;
        }
    }
    Ok(Tensor::from_vec(&[INPUT_CHANNELS, h, w], d))
}

/// Stacks equally shaped `[6, H, W]` inputs into a batch.
pub fn stack(inputs: &[Tensor]) -> Result<Tensor> {
    ensure_input!(!inputs.is_empty(), "empty batch");
    let shape = inputs[0].shape().to_vec();
    ensure_input!(shape.len() == 3 && shape[0] == INPUT_CHANNELS, "inputs must be [{INPUT_CHANNELS}, H, W], got {shape:?}");
    ensure_input!(inputs.iter().all(|t| t.shape() == shape.as_slice()), "batch inputs differ in shape");
    let data = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
    Ok(Tensor::from_vec(&[inputs.len(), shape[0], shape[1], shape[2]], data))
}

/// Splits a `[N, 14, H, W]` batch into per-view raw outputs.
pub fn unstack(t: &Tensor) -> Result<Vec<RawGaussianOutput>> {
    let s = t.shape();
    ensure_input!(s.len() == 4 && s[1] == RAW_CHANNELS, "expected [N, {RAW_CHANNELS}, H, W], got {s:?}");
    let per = s[1] * s[2] * s[3];
    t.data()
        .chunks(per)
        .map(|c| RawGaussianOutput::new(Tensor::from_vec(&[s[1], s[2], s[3]], c.to_vec())))
        .collect()
}

impl GaussianNet {
    /// Validates that a batch can pass through the down/up path.
    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        ensure_input!(s.len() == 4 && s[1] == INPUT_CHANNELS, "expected [N, {INPUT_CHANNELS}, H, W], got {s:?}");
        self.check_resolution(s[2], s[3])
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::image::Grid;

    fn small() -> GaussianNet {
        GaussianNet::new(UNetConfig { channels: 8, levels: 2, groups: 2 }, 3).unwrap()
    }

    fn random_input(rng: &mut ChaCha8Rng, s: usize) -> Tensor {
        Tensor::from_vec(&[6, s, s], (0..6 * s * s).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn output_shape_matches_input_with_fourteen_channels() {
        let net = GaussianNet::new(UNetConfig::default(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = net.run(&[random_input(&mut rng, 16), random_input(&mut rng, 16)]).unwrap();
        assert_eq!(out.len(), 2);
        for o in &out {
            assert_eq!(o.tensor().shape(), &[14, 16, 16]);
            assert!(o.tensor().is_finite());
        }
        net.check_input(&stack(&[random_input(&mut rng, 16)]).unwrap()).unwrap();
        assert!(net.check_input(&stack(&[random_input(&mut rng, 12)]).unwrap()).is_err());
    }

    #[test]
    fn shared_weights_make_views_differ_only_by_input() {
        let net = small();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b) = (random_input(&mut rng, 8), random_input(&mut rng, 8));
        let batched = net.run(&[a.clone(), b.clone()]).unwrap();
        let alone_a = net.run(std::slice::from_ref(&a)).unwrap();
        let alone_b = net.run(&[b]).unwrap();
        assert_eq!(batched[0], alone_a[0]);
        assert_eq!(batched[1], alone_b[0]);
        assert_ne!(batched[0], batched[1]);
        assert_eq!(net.run(&[a.clone(), a]).unwrap()[1], alone_a[0]);
    }

    #[test]
    fn every_weight_receives_gradient() {
        let net = small();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new(net.store());
        let x = g.constant(stack(&[random_input(&mut rng, 8)]).unwrap());
        let y = net.forward(&mut g, x);
        let seed: Vec<f64> = (0..g.value(y).numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grads = g.backward(&[(y, &seed)]).param_grads();
        let (mut total, mut nonzero) = (0, 0);
        for id in net.store().ids() {
            let gr = grads.get(id).expect("gradient for every parameter");
            total += gr.len();
            nonzero += gr.iter().filter(|v| **v != 0.0).count();
        }
        assert!(nonzero as f64 >= 0.99 * total as f64, "{nonzero} of {total}");
    }

    #[test]
    fn prepared_input_zeroes_invalid_pixels() {
        let pts = Grid::from_fn(2, 2, |r, c| [c as f64, r as f64, 2.0]);
        let pm = PointMap::new(pts, Grid::from_vec(2, 2, vec![true, false, false, true]).unwrap()).unwrap();
        let img = Grid::filled(2, 2, [1.0, 0.5, 0.0]);
        let frame = InputFrame::from_points(&pm.valid_points()).unwrap();
        assert_eq!(frame.center, [0.5, 0.5, 2.0]);
        let t = prepare_input(&pm, &img, &frame).unwrap();
        let d = t.data();
        let inv = 2.0 / 2f64.sqrt();
        assert_eq!(&d[0..4], &[-0.5 * inv, 0.0, 0.0, 0.5 * inv]);
        assert_eq!(&d[12..16], &[0.5, 0.0, 0.0, 0.5]);
        assert_eq!(&d[20..24], &[-0.5, 0.0, 0.0, -0.5]);
        assert!(prepare_input(&pm, &Grid::filled(3, 2, [0.0; 3]), &frame).is_err());
    }
}
