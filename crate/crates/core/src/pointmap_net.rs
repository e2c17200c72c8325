//! Two-image pointmap predictor.
//!
//! A shared ViT encoder embeds the front and back images; two decoder stacks
//! (one per stream) alternate cross-attention to the other stream, self
//! attention and an MLP. Front and back heads read their own stream, while the
//! left and right heads read side tokens formed by fusing both streams block
//! by block. Every head emits per-pixel `(x, y, z, confidence logit)` in the
//! front camera frame. A learnable scalar `δ = exp(log δ)` converts predicted
//! points to metric scale.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure_input, Error, Result};
use crate::geometry::{CanonicalView, PointMap};
use crate::image::{Grid, Mask, RgbImage};
use crate::nn::layers::{LayerNorm, Linear};
use crate::nn::{sigmoid, Graph, ParamGrads, ParamId, ParamStore, Tensor, Var};

/// Gray that replaces the background of input images before encoding.
pub const INPUT_BACKGROUND: [f64; 3] = [0.5, 0.5, 0.5];
/// Confidence clamp used by the binary cross-entropy.
pub const CONF_CLAMP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadType {
    /// Layer norm and one linear map of the last decoder block.
    Linear,
    /// Sum of per-block linear maps over all decoder blocks.
    MultiScale,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    Average,
    /// Channel concatenation followed by a learned projection per block.
    Concat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub n_encoder_blocks: usize,
    pub n_decoder_blocks: usize,
    pub head_type: HeadType,
    pub fusion: Fusion,
    /// Initial bias of the predicted z channel, meters.
    pub init_depth: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            image_size: 64,
            patch_size: 8,
            embed_dim: 128,
            heads: 4,
            mlp_ratio: 4,
            n_encoder_blocks: 4,
            n_decoder_blocks: 4,
            head_type: HeadType::Linear,
            fusion: Fusion::Average,
            init_depth: 2.5,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!("image size {} must be a positive multiple of patch size {}", self.image_size, self.patch_size));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!("embed dim {} must be divisible by {} heads", self.embed_dim, self.heads));
        }
        if self.embed_dim % 4 != 0 {
            return bad("embed dim must be divisible by 4 for the 2-D position code".into());
        }
        if self.n_decoder_blocks < 2 {
            return bad("at least two decoder blocks are required".into());
        }
        if self.mlp_ratio == 0 || !self.init_depth.is_finite() {
            return bad("mlp ratio must be positive and init depth finite".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }
}

/// Fixed 2-D sine-cosine position code `[T, D]`: half the channels encode the
/// row, half the column.
fn position_code(grid: usize, dim: usize) -> Tensor {
    let quarter = dim / 4;
    let mut out = vec![0.0; grid * grid * dim];
    for r in 0..grid {
        for c in 0..grid {
            let t = r * grid + c;
            for (half, pos) in [(0, r), (1, c)] {
                for i in 0..quarter {
                    let freq = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                    let a = pos as f64 * freq;
                    out[t * dim + half * 2 * quarter + i] = a.sin();
                    out[t * dim + half * 2 * quarter + quarter + i] = a.cos();
                }
            }
        }
    }
    Tensor::from_vec(&[grid * grid, dim], out)
}

#[derive(Clone, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl Attention {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize, heads: usize) -> Self {
        Attention {
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim),
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim),
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim),
            out: Linear::new(store, rng, &format!("{name}.out"), dim, dim),
            heads,
        }
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var, context: Var) -> Var {
        let q = self.q.forward(g, x);
        let k = self.k.forward(g, context);
        let v = self.v.forward(g, context);
        let a = g.attention(q, k, v, self.heads);
        self.out.forward(g, a)
    }

    fn params(&self) -> Vec<ParamId> {
        [&self.q, &self.k, &self.v, &self.out].iter().flat_map(|l| [l.w, l.b]).collect()
    }
}

#[derive(Clone, Debug)]
struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize, ratio: usize) -> Self {
        Mlp {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, dim * ratio),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), dim * ratio, dim),
        }
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

#[derive(Clone, Debug)]
struct EncoderBlock {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl EncoderBlock {
    fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.ln1.forward(g, x);
        let a = self.attn.forward(g, h, h);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, x);
        let m = self.mlp.forward(g, h);
        g.add(x, m)
    }
}

#[derive(Clone, Debug)]
struct DecoderBlock {
    ln_query: LayerNorm,
    ln_context: LayerNorm,
    cross: Attention,
    ln_self: LayerNorm,
    self_attn: Attention,
    ln_mlp: LayerNorm,
    mlp: Mlp,
}

impl DecoderBlock {
    fn forward(&self, g: &mut Graph<'_>, x: Var, other: Var) -> Var {
        let q = self.ln_query.forward(g, x);
        let ctx = self.ln_context.forward(g, other);
        let c = self.cross.forward(g, q, ctx);
        let x = g.add(x, c);
        let h = self.ln_self.forward(g, x);
        let s = self.self_attn.forward(g, h, h);
        let x = g.add(x, s);
        let h = self.ln_mlp.forward(g, x);
        let m = self.mlp.forward(g, h);
        g.add(x, m)
    }
}

#[derive(Clone, Debug)]
struct Head {
    /// One `(norm, projection)` per consumed decoder block.
    taps: Vec<(LayerNorm, Linear)>,
}

/// The prediction network and its parameters.
#[derive(Clone, Debug)]
pub struct PointMapNet {
    cfg: NetConfig,
    store: ParamStore,
    patch_embed: Linear,
    pos: Tensor,
    encoder: Vec<EncoderBlock>,
    encoder_norm: LayerNorm,
    decoders: [Vec<DecoderBlock>; 2],
    fuse: Vec<Linear>,
    heads: [Head; 4],
    log_delta: ParamId,
}

/// Raw head outputs of one forward pass: `[4, H, W]` per canonical view.
#[derive(Clone, Debug, PartialEq)]
pub struct RawPrediction {
    pub maps: [Tensor; 4],
    pub log_delta: f64,
}

/// Four pixel-aligned pointmaps in the front camera frame (before δ scaling).
#[derive(Clone, Debug, PartialEq)]
pub struct PointMapPrediction {
    /// Front, back, left, right.
    pub maps: [PointMap; 4],
    pub confidences: [Grid<f64>; 4],
    pub delta: f64,
}

/// Network-side view of one forward pass.
pub struct ForwardVars {
    pub front_tokens: Var,
    pub back_tokens: Var,
    pub front_blocks: Vec<Var>,
    pub back_blocks: Vec<Var>,
    pub side_blocks: Vec<Var>,
    /// `[4, H, W]` per view.
    pub maps: [Var; 4],
}

impl PointMapNet {
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, p) = (cfg.embed_dim, cfg.patch_size);
        let s = &mut store;
        let patch_embed = Linear::new(s, &mut rng, "patch_embed", 3 * p * p, d);
        let encoder = (0..cfg.n_encoder_blocks)
            .map(|i| EncoderBlock {
                ln1: LayerNorm::new(s, &format!("enc.{i}.ln1"), d),
                attn: Attention::new(s, &mut rng, &format!("enc.{i}.attn"), d, cfg.heads),
                ln2: LayerNorm::new(s, &format!("enc.{i}.ln2"), d),
                mlp: Mlp::new(s, &mut rng, &format!("enc.{i}.mlp"), d, cfg.mlp_ratio),
            })
            .collect();
        let encoder_norm = LayerNorm::new(s, "enc.norm", d);
        let decoders = ["front", "back"].map(|stream| {
            (0..cfg.n_decoder_blocks)
                .map(|i| {
                    let n = format!("dec.{stream}.{i}");
                    DecoderBlock {
                        ln_query: LayerNorm::new(s, &format!("{n}.ln_query"), d),
                        ln_context: LayerNorm::new(s, &format!("{n}.ln_context"), d),
                        cross: Attention::new(s, &mut rng, &format!("{n}.cross"), d, cfg.heads),
                        ln_self: LayerNorm::new(s, &format!("{n}.ln_self"), d),
                        self_attn: Attention::new(s, &mut rng, &format!("{n}.self"), d, cfg.heads),
                        ln_mlp: LayerNorm::new(s, &format!("{n}.ln_mlp"), d),
                        mlp: Mlp::new(s, &mut rng, &format!("{n}.mlp"), d, cfg.mlp_ratio),
                    }
                })
                .collect()
        });
        let fuse = match cfg.fusion {
            Fusion::Average => Vec::new(),
            Fusion::Concat => (0..cfg.n_decoder_blocks)
                .map(|i| Linear::new(s, &mut rng, &format!("fuse.{i}"), 2 * d, d))
                .collect(),
        };
        let taps: Vec<usize> = match cfg.head_type {
            HeadType::Linear => vec![cfg.n_decoder_blocks - 1],
            HeadType::MultiScale => (0..cfg.n_decoder_blocks).collect(),
        };
        let heads = CanonicalView::ALL.map(|v| Head {
            taps: taps
                .iter()
                .map(|&b| {
                    let n = format!("head.{}.{b}", v.name());
                    let ln = LayerNorm::new(s, &format!("{n}.ln"), d);
                    let proj = Linear::new(s, &mut rng, &format!("{n}.proj"), d, 4 * p * p);
                    // Start every pixel at the expected subject distance.
                    let bias = s.get_mut(proj.b).data_mut();
                    for k in 0..p * p {
                        bias[2 * p * p + k] = cfg.init_depth / taps.len() as f64;
                    }
                    (ln, proj)
                })
                .collect(),
        });
        let log_delta = s.add("log_delta", Tensor::zeros(&[1]));
        let pos = position_code(cfg.grid(), d);
        Ok(PointMapNet {
            cfg,
            store,
            patch_embed,
            pos,
            encoder,
            encoder_norm,
            decoders,
            fuse,
            heads,
            log_delta,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn log_delta_id(&self) -> ParamId {
        self.log_delta
    }

    pub fn delta(&self) -> f64 {
        self.store.get(self.log_delta).data()[0].exp()
    }

    /// Parameters of the cross-attention sublayers of both decoder streams.
    pub fn cross_attention_params(&self) -> Vec<ParamId> {
        self.decoders.iter().flatten().flat_map(|b| b.cross.params()).collect()
    }

    /// Planar `[3, H, W]` network input: background replaced by mid-gray.
    pub fn prepare_image(&self, image: &RgbImage, mask: &Mask) -> Result<Tensor> {
        let s = self.cfg.image_size;
        ensure_input!(
            image.dims() == (s, s) && mask.dims() == (s, s),
            "network expects {s}x{s} inputs, got image {:?} and mask {:?}",
            image.dims(),
            mask.dims()
        );
        Ok(Tensor::from_vec(&[3, s, s], image.masked(mask, INPUT_BACKGROUND).to_planar()))
    }

    fn embed(&self, g: &mut Graph<'_>, img: Var) -> Var {
        let patches = g.patchify(img, self.cfg.patch_size);
        let x = self.patch_embed.forward(g, patches);
        let pos = g.constant(self.pos.clone());
        let mut x = g.add(x, pos);
        for blk in &self.encoder {
            x = blk.forward(g, x);
        }
        self.encoder_norm.forward(g, x)
    }

    /// Encodes both `[3, H, W]` images with the same weights: `[T, D]` each.
    pub fn encode_pair(&self, g: &mut Graph<'_>, front: Var, back: Var) -> (Var, Var) {
        (self.embed(g, front), self.embed(g, back))
    }

    /// Runs both decoder streams; returns every block's output per stream.
    pub fn decode_pair(&self, g: &mut Graph<'_>, front: Var, back: Var) -> (Vec<Var>, Vec<Var>) {
        let (mut f, mut b) = (front, back);
        let mut fs = Vec::with_capacity(self.cfg.n_decoder_blocks);
        let mut bs = Vec::with_capacity(self.cfg.n_decoder_blocks);
        for (bf, bb) in self.decoders[0].iter().zip(&self.decoders[1]) {
            let nf = bf.forward(g, f, b);
            let nb = bb.forward(g, b, f);
            (f, b) = (nf, nb);
            fs.push(f);
            bs.push(b);
        }
        (fs, bs)
    }

    /// Per-block side tokens from the two streams.
    pub fn side_tokens(&self, g: &mut Graph<'_>, front_blocks: &[Var], back_blocks: &[Var]) -> Vec<Var> {
        assert_eq!(front_blocks.len(), back_blocks.len(), "streams differ in block count");
        front_blocks
            .iter()
            .zip(back_blocks)
            .enumerate()
            .map(|(i, (&f, &b))| match self.cfg.fusion {
                Fusion::Average => {
                    let s = g.add(f, b);
                    g.scale(s, 0.5)
                }
                Fusion::Concat => {
                    let c = g.concat(f, b, 1);
                    self.fuse[i].forward(g, c)
                }
            })
            .collect()
    }

    fn head(&self, g: &mut Graph<'_>, view: usize, blocks: &[Var]) -> Var {
        let head = &self.heads[view];
        let first = blocks.len() - head.taps.len();
        let mut acc: Option<Var> = None;
        for ((ln, proj), &x) in head.taps.iter().zip(&blocks[first..]) {
            let h = ln.forward(g, x);
            let y = proj.forward(g, h);
            acc = Some(match acc {
                None => y,
                Some(a) => g.add(a, y),
            });
        }
        let s = self.cfg.image_size;
        g.unpatchify(acc.expect("head has taps"), 4, s, s, self.cfg.patch_size)
    }

    /// Full forward pass on prepared `[3, H, W]` inputs.
    pub fn forward(&self, g: &mut Graph<'_>, front: Var, back: Var) -> ForwardVars {
        let (ft, bt) = self.encode_pair(g, front, back);
        let (fb, bb) = self.decode_pair(g, ft, bt);
        let sb = self.side_tokens(g, &fb, &bb);
        let maps = [
            self.head(g, 0, &fb),
            self.head(g, 1, &bb),
            self.head(g, 2, &sb),
            self.head(g, 3, &sb),
        ];
        ForwardVars {
            front_tokens: ft,
            back_tokens: bt,
            front_blocks: fb,
            back_blocks: bb,
            side_blocks: sb,
            maps,
        }
    }

    /// Raw head maps for prepared inputs.
    pub fn run(&self, front: &Tensor, back: &Tensor) -> RawPrediction {
        let mut g = Graph::new(&self.store);
        let f = g.constant(front.clone());
        let b = g.constant(back.clone());
        let out = self.forward(&mut g, f, b);
        RawPrediction {
            maps: out.maps.map(|v| g.value(v).clone()),
            log_delta: self.store.get(self.log_delta).data()[0],
        }
    }

    /// Pointmaps, confidences and δ for a masked front/back image pair.
    pub fn predict(&self, front: &RgbImage, front_mask: &Mask, back: &RgbImage, back_mask: &Mask) -> Result<PointMapPrediction> {
        let f = self.prepare_image(front, front_mask)?;
        let b = self.prepare_image(back, back_mask)?;
        let raw = self.run(&f, &b);
        raw.to_prediction(front_mask, back_mask)
    }
}

impl RawPrediction {
    /// Front/back validity comes from the input masks, side validity from confidence > 0.5.
    pub fn to_prediction(&self, front_mask: &Mask, back_mask: &Mask) -> Result<PointMapPrediction> {
        let shape = self.maps[0].shape();
        let (h, w) = (shape[1], shape[2]);
        ensure_input!(
            front_mask.dims() == (w, h) && back_mask.dims() == (w, h),
            "masks do not match the {w}x{h} prediction"
        );
        let n = h * w;
        let mut maps = Vec::with_capacity(4);
        let mut confs = Vec::with_capacity(4);
        for (v, t) in self.maps.iter().enumerate() {
            let d = t.data();
            let points = Grid::from_fn(w, h, |r, c| {
                let i = r * w + c;
                [d[i], d[n + i], d[2 * n + i]]
            });
            let conf = Grid::from_fn(w, h, |r, c| sigmoid(d[3 * n + r * w + c]));
            let valid = match v {
                0 => front_mask.clone(),
                1 => back_mask.clone(),
                _ => conf.map(|&p| p > 0.5),
            };
            let valid = Grid::from_fn(w, h, |r, c| *valid.get(r, c) && points.get(r, c).iter().all(|x| x.is_finite()));
            maps.push(PointMap::new(points, valid)?);
            confs.push(conf);
        }
        Ok(PointMapPrediction {
            maps: maps.try_into().expect("four maps"),
            confidences: confs.try_into().expect("four confidences"),
            delta: self.log_delta.exp(),
        })
    }
}

/// Stage-1 objective with gradients for the raw head maps and `log δ`.
#[derive(Clone, Debug)]
pub struct Stage1Loss {
    pub total: f64,
    pub reg: f64,
    pub conf: f64,
    /// dL/d(raw map) per view, laid out like [`RawPrediction::maps`].
    pub grad_maps: [Vec<f64>; 4],
    pub grad_log_delta: f64,
}

/// `L_reg`: mean over every valid GT pixel of all four views of `‖δ·P − P_gt‖²`.
/// `L_conf`: binary cross-entropy between clamped confidence and GT validity,
/// averaged over all pixels of all four views.
pub fn stage1_loss(raw: &RawPrediction, gt: &[PointMap; 4]) -> Result<Stage1Loss> {
    let shape = raw.maps[0].shape().to_vec();
    ensure_input!(shape.len() == 3 && shape[0] == 4, "raw maps must be [4, H, W]");
    let (h, w) = (shape[1], shape[2]);
    let n = h * w;
    for (m, t) in gt.iter().zip(&raw.maps) {
        ensure_input!(m.width() == w && m.height() == h && t.shape() == shape.as_slice(), "ground truth does not match the {w}x{h} prediction");
    }
    let n_valid: usize = gt.iter().map(|m| m.valid_count()).sum();
    ensure_input!(n_valid > 0, "batch has no valid ground-truth pixels");
    let delta = raw.log_delta.exp();
    let (mut reg, mut conf, mut d_log_delta) = (0.0, 0.0, 0.0);
    let mut grad_maps: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; 4 * n]);
    let inv_valid = 1.0 / n_valid as f64;
    let inv_all = 1.0 / (4 * n) as f64;
    for v in 0..4 {
        let d = raw.maps[v].data();
        let gm = &mut grad_maps[v];
        for i in 0..n {
            let (r, c) = (i / w, i % w);
            let valid = *gt[v].valid.get(r, c);
            if valid {
                let p_gt = gt[v].points.get(r, c);
                for k in 0..3 {
                    let p = d[k * n + i];
                    let e = delta * p - p_gt[k];
                    reg += e * e * inv_valid;
                    gm[k * n + i] = 2.0 * e * delta * inv_valid;
                    d_log_delta += 2.0 * e * delta * p * inv_valid;
                }
            }
            let logit = d[3 * n + i];
            let raw_p = sigmoid(logit);
            let p = raw_p.clamp(CONF_CLAMP, 1.0 - CONF_CLAMP);
            let y = if valid { 1.0 } else { 0.0 };
            conf -= (y * p.ln() + (1.0 - y) * (1.0 - p).ln()) * inv_all;
            if raw_p > CONF_CLAMP && raw_p < 1.0 - CONF_CLAMP {
                gm[3 * n + i] = (raw_p - y) * inv_all;
            }
        }
    }
    Ok(Stage1Loss {
        total: reg + conf,
        reg,
        conf,
        grad_maps,
        grad_log_delta: d_log_delta,
    })
}

/// Forward, loss and backward for one training pair. Returns the loss and
/// gradients for every parameter including `log δ`.
pub fn stage1_step(net: &PointMapNet, front: &Tensor, back: &Tensor, gt: &[PointMap; 4]) -> Result<(Stage1Loss, ParamGrads)> {
    let mut g = Graph::new(net.store());
    let f = g.constant(front.clone());
    let b = g.constant(back.clone());
    let out = net.forward(&mut g, f, b);
    let raw = RawPrediction {
        maps: out.maps.map(|v| g.value(v).clone()),
        log_delta: net.store().get(net.log_delta).data()[0],
    };
    let loss = stage1_loss(&raw, gt)?;
    let seeds: Vec<(Var, &[f64])> = out.maps.iter().zip(&loss.grad_maps).map(|(&v, gm)| (v, gm.as_slice())).collect();
    let mut grads = g.backward(&seeds).param_grads();
    grads.accumulate(net.log_delta.index(), &[loss.grad_log_delta]);
    Ok((loss, grads))
}
