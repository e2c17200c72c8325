//! Analytic ray-cast rendering of subjects into calibrated RGB-D-mask views.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::SubjectScene;
use crate::error::{ensure_input, Error, Result};
use crate::geometry::{CameraModel, CanonicalView};
use crate::image::{DepthMap, Grid, Mask, Rgb, RgbImage};

/// Camera ring around the subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigConfig {
    /// Distance from the subject centroid, meters.
    pub radius: f64,
    pub elevation_deg: f64,
    /// Focal length as a multiple of the image width.
    pub focal_factor: f64,
    pub resolution: usize,
    pub background: Rgb,
    /// Rays per pixel along each axis; colors are box-filtered over them.
    pub supersample: usize,
}

impl Default for RigConfig {
    fn default() -> Self {
        RigConfig {
            radius: 2.5,
            elevation_deg: 0.0,
            focal_factor: 1.05,
            resolution: 128,
            background: [0.0, 0.0, 0.0],
            supersample: 3,
        }
    }
}

impl RigConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.focal_factor > 0.0 && self.resolution >= 8 && self.supersample >= 1) {
            return Err(Error::InvalidConfig("rig needs positive radius, focal factor and supersample, and resolution >= 8".into()));
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidConfig("background color must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Camera on the ring at `azimuth_deg`, looking at the origin.
    ///
    /// Azimuth 0 sits on −z (facing the subject's front), 90 on −x (the
    /// subject's left side), 180 behind and 270 on its right.
    pub fn camera_at(&self, azimuth_deg: f64) -> CameraModel {
        let az = azimuth_deg.to_radians();
        let el = self.elevation_deg.to_radians();
        let r = self.radius;
        let eye = [-r * el.cos() * az.sin(), r * el.sin(), -r * el.cos() * az.cos()];
        let res = self.resolution;
        let f = self.focal_factor * res as f64;
        let c = (res as f64 - 1.0) / 2.0;
        CameraModel::look_at(eye, [0.0; 3], [0.0, 1.0, 0.0], f, f, c, c, res, res)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewTag {
    Canonical(CanonicalView),
    Novel { azimuth_deg: f64 },
}

impl ViewTag {
    pub fn azimuth_deg(&self) -> f64 {
        match self {
            ViewTag::Canonical(v) => v.azimuth_deg(),
            ViewTag::Novel { azimuth_deg } => *azimuth_deg,
        }
    }

    /// File stem used in dataset directories.
    pub fn file_stem(&self) -> String {
        match self {
            ViewTag::Canonical(v) => v.name().to_string(),
            ViewTag::Novel { azimuth_deg } => format!("novel_{azimuth_deg:07.3}"),
        }
    }
}

/// One calibrated rendered view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewBundle {
    pub image: RgbImage,
    pub mask: Mask,
    /// Camera-frame z of the nearest hit, 0 on background.
    pub depth: DepthMap,
    pub camera: CameraModel,
    pub view_tag: ViewTag,
}

/// Casts `supersample²` rays per pixel on a regular sub-grid and box-filters
/// their colors, as a sensor integrates over the pixel area. A pixel is in
/// the mask when any of its rays hits the subject; its depth is the
/// camera-frame z of the center ray, or the mean over hitting rays when the
/// center misses. Pixels outside the mask hold exactly `background`.
pub fn render_view(scene: &SubjectScene, camera: &CameraModel, background: Rgb, supersample: usize, view_tag: ViewTag) -> Result<ViewBundle> {
    camera.validate()?;
    ensure_input!(supersample >= 1, "supersample factor must be at least 1");
    let (w, h) = (camera.width, camera.height);
    let rt = camera.rot().transpose();
    let origin = Vector3::from(camera.center());
    let n = supersample;
    let offsets: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64 - 0.5).collect();
    let center = (n % 2 == 1).then_some(n / 2);
    let mut image = Grid::filled(w, h, background);
    let mut mask = Grid::filled(w, h, false);
    let mut depth = Grid::filled(w, h, 0.0);
    for r in 0..h {
        for c in 0..w {
            let mut color = [0.0; 3];
            let (mut hits, mut z_sum, mut z_center) = (0usize, 0.0, None);
            for (i, dv) in offsets.iter().enumerate() {
                for (j, du) in offsets.iter().enumerate() {
                    let d_cam = Vector3::new((c as f64 + du - camera.cx) / camera.fx, (r as f64 + dv - camera.cy) / camera.fy, 1.0);
                    let norm = d_cam.norm();
                    let hit = scene.trace(&origin, &(rt * (d_cam / norm))).map(|(t, col)| (t / norm, col)).filter(|(z, _)| *z > 0.0);
                    let col = match hit {
                        Some((z, col)) => {
                            hits += 1;
                            z_sum += z;
                            if center == Some(i) && center == Some(j) {
                                z_center = Some(z);
                            }
                            col
                        }
                        None => background,
                    };
                    (0..3).for_each(|k| color[k] += col[k]);
                }
            }
            if hits > 0 {
                image.set(r, c, color.map(|v| v / (n * n) as f64));
                mask.set(r, c, true);
                depth.set(r, c, z_center.unwrap_or(z_sum / hits as f64));
            }
        }
    }
    Ok(ViewBundle {
        image,
        mask,
        depth,
        camera: camera.clone(),
        view_tag,
    })
}

#[cfg(test)]
mod tests {
    use nalgebra::Matrix3;

    use super::*;
    use crate::synth::scene::{Part, Pattern, Shape, Texture};
    use crate::synth::{make_subject, SubjectConfig};

    fn unit_sphere_scene() -> SubjectScene {
        let m = Matrix3::<f64>::identity();
        SubjectScene {
            seed: 0,
            height: 2.0,
            parts: vec![Part {
                name: "ball".into(),
                shape: Shape::Ellipsoid {
                    center: [0.0; 3],
                    rotation: [0, 1, 2].map(|r| [m[(r, 0)], m[(r, 1)], m[(r, 2)]]),
                    radii: [1.0; 3],
                },
                texture: Texture {
                    base: [0.5; 3],
                    accent: [0.5; 3],
                    pattern: Pattern::Checker { period: 1.0 },
                },
            }],
        }
    }

    #[test]
    fn analytic_sphere_depth() {
        let rig = RigConfig {
            radius: 3.0,
            resolution: 33,
            ..Default::default()
        };
        let cam = rig.camera_at(0.0);
        assert!((cam.center()[2] + 3.0).abs() < 1e-12);
        let v = render_view(&unit_sphere_scene(), &cam, [0.0; 3], 1, ViewTag::Canonical(CanonicalView::Front)).unwrap();
        assert!((v.depth.get(16, 16) - 2.0).abs() < 1e-12);
        assert!(*v.mask.get(16, 16));
        assert!(!*v.mask.get(0, 0));
    }

    #[test]
    fn supersampling_blends_edges_only() {
        let rig = RigConfig {
            radius: 3.0,
            resolution: 33,
            ..Default::default()
        };
        let cam = rig.camera_at(0.0);
        let tag = ViewTag::Canonical(CanonicalView::Front);
        let point = render_view(&unit_sphere_scene(), &cam, [0.0; 3], 1, tag).unwrap();
        let boxed = render_view(&unit_sphere_scene(), &cam, [0.0; 3], 3, tag).unwrap();
        assert_eq!(boxed.image.get(16, 16), &[0.5; 3]);
        assert_eq!(boxed.depth.get(16, 16), point.depth.get(16, 16));
        let mut partial = 0;
        for i in 0..point.mask.len() {
            let m = boxed.mask.as_slice()[i];
            assert!(m || !point.mask.as_slice()[i]);
            let v = boxed.image.as_slice()[i][0];
            if m && v < 0.5 {
                assert!(v > 0.0);
                partial += 1;
            }
        }
        assert!(partial > 10, "{partial} partially covered pixels");
    }

    #[test]
    fn looking_away_is_empty() {
        let cam = CameraModel::look_at([0.0, 0.0, -3.0], [0.0, 0.0, -6.0], [0.0, 1.0, 0.0], 20.0, 20.0, 8.0, 8.0, 16, 16);
        let v = render_view(&unit_sphere_scene(), &cam, [0.2; 3], 3, ViewTag::Novel { azimuth_deg: 0.0 }).unwrap();
        assert_eq!(v.mask.count(), 0);
        assert!(v.depth.as_slice().iter().all(|&d| d == 0.0));
        assert!(v.image.as_slice().iter().all(|&p| p == [0.2; 3]));
    }

    #[test]
    fn mask_iff_positive_depth_and_background_outside() {
        let s = make_subject(1, &SubjectConfig::default()).unwrap();
        let rig = RigConfig {
            resolution: 64,
            ..Default::default()
        };
        for az in [0.0, 90.0, 180.0, 270.0, 33.0] {
            let v = render_view(&s, &rig.camera_at(az), rig.background, rig.supersample, ViewTag::Novel { azimuth_deg: az }).unwrap();
            assert!(v.mask.count() > 100, "azimuth {az}: {}", v.mask.count());
            for i in 0..v.mask.len() {
                let m = v.mask.as_slice()[i];
                assert_eq!(m, v.depth.as_slice()[i] > 0.0);
                if !m {
                    assert_eq!(v.image.as_slice()[i], rig.background);
                }
            }
            // subject fits inside the frame
            let (r0, c0, r1, c1) = v.mask.bounding_box().unwrap();
            assert!(r0 > 0 && c0 > 0 && r1 < 63 && c1 < 63, "azimuth {az}: {:?}", (r0, c0, r1, c1));
        }
    }

    #[test]
    fn canonical_cameras_share_ring() {
        let rig = RigConfig::default();
        for v in CanonicalView::ALL {
            let cam = rig.camera_at(v.azimuth_deg());
            cam.validate().unwrap();
            let c = cam.center();
            assert!(((c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt() - 2.5).abs() < 1e-12);
            assert!(c[1].abs() < 1e-12);
            // optical axis passes through the centroid
            let o = cam.to_camera(&[0.0; 3]);
            assert!(o[0].abs() < 1e-12 && o[1].abs() < 1e-12);
        }
        let left = rig.camera_at(90.0).center();
        assert!(left[0] < -2.4);
    }

    #[test]
    fn front_and_back_silhouettes_mirror() {
        let rig = RigConfig {
            resolution: 64,
            ..Default::default()
        };
        for seed in 0..10 {
            let s = make_subject(seed, &SubjectConfig::default()).unwrap();
            let front = render_view(&s, &rig.camera_at(0.0), rig.background, rig.supersample, ViewTag::Canonical(CanonicalView::Front)).unwrap();
            let back = render_view(&s, &rig.camera_at(180.0), rig.background, rig.supersample, ViewTag::Canonical(CanonicalView::Back)).unwrap();
            let flipped = back.mask.flip_horizontal();
            // Parallax makes limbs at different depths shift slightly between the two views.
            let differ = front.mask.as_slice().iter().zip(flipped.as_slice()).filter(|(a, b)| a != b).count();
            let frac = differ as f64 / front.mask.len() as f64;
            assert!(frac <= 0.02, "seed {seed}: {differ} pixels differ");
        }
    }

    #[test]
    fn seeds_give_distinct_silhouettes() {
        let rig = RigConfig {
            resolution: 64,
            ..Default::default()
        };
        let masks: Vec<_> = (0..10)
            .map(|seed| {
                let s = make_subject(seed, &SubjectConfig::default()).unwrap();
                render_view(&s, &rig.camera_at(0.0), rig.background, rig.supersample, ViewTag::Canonical(CanonicalView::Front))
                    .unwrap()
                    .mask
            })
            .collect();
        for i in 0..10 {
            for j in i + 1..10 {
                assert!(masks[i].iou(&masks[j]) < 0.99, "seeds {i} and {j}");
            }
        }
    }
}
