//! Inference: two masked images to a Gaussian set.
//!
//! predict pointmaps → δ-scale and fuse → transfer colors to the side views →
//! regress per-pixel attributes → activate → assemble.

use crate::error::{ensure_input, Result};
use crate::gaussian::{activate, ActivationCaps, ActivationConfig, GaussianSet, RawGaussianOutput};
use crate::gaussian_regress::{prepare_input, GaussianNet, InputFrame};
use crate::geometry::{fuse_pointmaps, CanonicalView, FusedPointCloud, PointMap};
use crate::image::{Grid, Mask, Rgb, RgbImage};
use crate::nn::Tensor;
use crate::pointmap_net::{PointMapNet, PointMapPrediction};
use crate::side_enhance::{build_pseudo_view, nns_color_transfer, reference_set};

/// Color written to pseudo-view pixels without a side point, and to every
/// side pixel when color transfer is disabled.
pub const PSEUDO_BACKGROUND: Rgb = [0.5, 0.5, 0.5];

/// Switches for ablating parts of the pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineOptions {
    /// Keep the left/right pointmaps; when off only front/back Gaussians are emitted.
    pub side_heads: bool,
    /// Color side views by nearest-neighbor transfer; when off they are gray.
    pub nns: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions { side_heads: true, nns: true }
    }
}

/// Everything the Gaussian regressor consumes, computed by the frozen
/// pointmap network for one input pair.
#[derive(Clone, Debug)]
pub struct Prior {
    pub prediction: PointMapPrediction,
    /// δ-scaled pointmaps in front, back, left, right order.
    pub maps: [PointMap; 4],
    /// Input images for front/back and pseudo-views for the sides.
    pub images: [RgbImage; 4],
    pub cloud: FusedPointCloud,
    pub frame: InputFrame,
    pub caps: ActivationCaps,
}

impl Prior {
    /// Views that carry at least one valid pixel.
    pub fn active_views(&self) -> Vec<CanonicalView> {
        CanonicalView::ALL.into_iter().filter(|v| self.maps[v.index()].valid_count() > 0).collect()
    }

    /// Prepared `[6, H, W]` inputs for [`Prior::active_views`].
    pub fn network_inputs(&self) -> Result<Vec<Tensor>> {
        self.active_views()
            .into_iter()
            .map(|v| prepare_input(&self.maps[v.index()], &self.images[v.index()], &self.frame))
            .collect()
    }

    /// Activates per-view raw outputs (ordered as [`Prior::active_views`]).
    pub fn activate_all(&self, raws: &[RawGaussianOutput]) -> Result<Vec<GaussianSet>> {
        let views = self.active_views();
        ensure_input!(raws.len() == views.len(), "{} raw outputs for {} active views", raws.len(), views.len());
        views
            .iter()
            .zip(raws)
            .map(|(v, raw)| activate(raw, &self.maps[v.index()], &self.images[v.index()], *v, &self.caps))
            .collect()
    }
}

/// Result of one reconstruction.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub gaussians: GaussianSet,
    pub prior: Prior,
}

/// The full two-network reconstructor.
#[derive(Clone, Debug)]
pub struct Reconstructor {
    pub pointmap: PointMapNet,
    pub gaussian: GaussianNet,
    pub activation: ActivationConfig,
    pub options: PipelineOptions,
}

impl Reconstructor {
    /// Runs the pointmap network and builds the regressor inputs.
    pub fn prior(&self, front: &RgbImage, front_mask: &Mask, back: &RgbImage, back_mask: &Mask) -> Result<Prior> {
        ensure_input!(
            front.dims() == back.dims() && front.same_dims(front_mask) && back.same_dims(back_mask),
            "front/back images and masks must share a resolution"
        );
        let prediction = self.pointmap.predict(front, front_mask, back, back_mask)?;
        build_prior(prediction, front, back, &self.activation, self.options)
    }

    /// Regresses and assembles the Gaussians for a prepared prior.
    pub fn gaussians(&self, prior: &Prior) -> Result<GaussianSet> {
        let raws = self.gaussian.run(&prior.network_inputs()?)?;
        Ok(GaussianSet::assemble(&prior.activate_all(&raws)?))
    }

    pub fn reconstruct(&self, front: &RgbImage, front_mask: &Mask, back: &RgbImage, back_mask: &Mask) -> Result<Reconstruction> {
        let prior = self.prior(front, front_mask, back, back_mask)?;
        let gaussians = self.gaussians(&prior)?;
        Ok(Reconstruction { gaussians, prior })
    }
}

/// δ-scales the predicted maps, colors the side views and derives the
/// normalization frame and activation caps from the fused cloud.
pub fn build_prior(prediction: PointMapPrediction, front: &RgbImage, back: &RgbImage, activation: &ActivationConfig, options: PipelineOptions) -> Result<Prior> {
    let delta = prediction.delta;
    let mut maps = prediction.maps.clone().map(|m| m.scaled(delta));
    if !options.side_heads {
        for m in &mut maps[2..] {
            *m = PointMap::empty(m.width(), m.height());
        }
    }
    let mut images = [front.clone(), back.clone(), Grid::filled(front.width(), front.height(), PSEUDO_BACKGROUND), Grid::filled(front.width(), front.height(), PSEUDO_BACKGROUND)];
    if options.nns && options.side_heads {
        let (ref_pts, ref_cols) = reference_set(&maps[0], front, &maps[1], back)?;
        ensure_input!(!ref_pts.is_empty(), "front and back masks are both empty");
        for v in 2..4 {
            let side = &maps[v];
            let colors = nns_color_transfer(&side.valid_points(), &ref_pts, &ref_cols)?;
            images[v] = build_pseudo_view(side, &colors, PSEUDO_BACKGROUND)?.image;
        }
    }
    let cloud = fuse_pointmaps([&maps[0], &maps[1], &maps[2], &maps[3]], 1.0)?;
    ensure_input!(!cloud.is_empty(), "no valid points to reconstruct");
    let frame = InputFrame::from_points(&cloud.positions)?;
    let caps = activation.caps(frame.diagonal)?;
    Ok(Prior {
        prediction,
        maps,
        images,
        cloud,
        frame,
        caps,
    })
}

/// No-learning reference: every prior point as an opaque isotropic Gaussian
/// of the base size, colored by its input or pseudo-view pixel.
pub fn baseline_gaussians(prior: &Prior) -> GaussianSet {
    let mut out = GaussianSet::default();
    for v in CanonicalView::ALL {
        let (map, img) = (&prior.maps[v.index()], &prior.images[v.index()]);
        for (r, c) in map.valid_pixels() {
            out.push(*map.points.get(r, c), *img.get(r, c), 1.0, [prior.caps.scale_base; 3], [1.0, 0.0, 0.0, 0.0]);
            out.sources.push(crate::geometry::PointSource { view: v, row: r as u32, col: c as u32 });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian_regress::UNetConfig;
    use crate::pointmap_net::{Fusion, HeadType, NetConfig};

    fn small() -> Reconstructor {
        let cfg = NetConfig {
            image_size: 16,
            patch_size: 4,
            embed_dim: 16,
            heads: 2,
            mlp_ratio: 2,
            n_encoder_blocks: 1,
            n_decoder_blocks: 2,
            head_type: HeadType::Linear,
            fusion: Fusion::Average,
            init_depth: 2.5,
        };
        Reconstructor {
            pointmap: PointMapNet::new(cfg, 1).unwrap(),
            gaussian: GaussianNet::new(UNetConfig { channels: 8, levels: 2, groups: 2 }, 2).unwrap(),
            activation: ActivationConfig::default(),
            options: PipelineOptions::default(),
        }
    }

    fn inputs() -> (RgbImage, Mask, RgbImage, Mask) {
        let img = Grid::from_fn(16, 16, |r, c| [r as f64 / 16.0, c as f64 / 16.0, 0.5]);
        let mask = Grid::from_fn(16, 16, |r, c| (3..13).contains(&r) && (5..11).contains(&c));
        let back_mask = Grid::from_fn(16, 16, |r, c| (4..12).contains(&r) && (5..10).contains(&c));
        (img.clone(), mask, img, back_mask)
    }

    #[test]
    fn gaussian_count_equals_valid_pixel_sum() {
        let rec = small();
        let (f, fm, b, bm) = inputs();
        let out = rec.reconstruct(&f, &fm, &b, &bm).unwrap();
        let valid: usize = out.prior.maps.iter().map(PointMap::valid_count).sum();
        assert_eq!(out.gaussians.len(), valid);
        assert_eq!(out.prior.maps[0].valid_count(), fm.count());
        assert_eq!(out.prior.maps[1].valid_count(), bm.count());
        out.gaussians.validate().unwrap();
        assert_eq!(baseline_gaussians(&out.prior).len(), valid);
    }

    #[test]
    fn ablations_drop_side_gaussians_or_side_colors() {
        let mut rec = small();
        let (f, fm, b, bm) = inputs();
        rec.options = PipelineOptions { side_heads: false, nns: true };
        let out = rec.reconstruct(&f, &fm, &b, &bm).unwrap();
        assert_eq!(out.gaussians.len(), fm.count() + bm.count());
        assert!(out.gaussians.sources.iter().all(|s| !s.view.is_side()));
        rec.options = PipelineOptions { side_heads: true, nns: false };
        let prior = rec.prior(&f, &fm, &b, &bm).unwrap();
        assert!(prior.images[2..].iter().all(|im| im.as_slice().iter().all(|c| *c == PSEUDO_BACKGROUND)));
    }

    #[test]
    fn side_pixels_take_reference_colors() {
        let rec = small();
        let (f, fm, b, bm) = inputs();
        let prior = rec.prior(&f, &fm, &b, &bm).unwrap();
        let (_, cols) = reference_set(&prior.maps[0], &f, &prior.maps[1], &b).unwrap();
        for v in 2..4 {
            for (r, c) in prior.maps[v].valid_pixels() {
                assert!(cols.contains(prior.images[v].get(r, c)));
            }
        }
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let rec = small();
        let (f, fm, _, _) = inputs();
        let small_img = Grid::filled(8, 8, [0.0; 3]);
        assert!(rec.reconstruct(&f, &fm, &small_img, &Grid::filled(8, 8, true)).is_err());
        let empty = Grid::filled(16, 16, false);
        let mut rec = rec;
        rec.options.side_heads = false;
        assert!(rec.reconstruct(&f, &empty, &f, &empty).is_err());
    }
}
