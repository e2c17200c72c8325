//! Pinhole cameras, pixel-aligned pointmaps and four-view fusion.
//!
//! Camera frames are right-handed with +z into the scene, +y down the image
//! and the pixel origin at the top-left. A pixel `(row, col)` is sampled at
//! image coordinate `(u, v) = (col, row)`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_input, Error, Result};
use crate::image::{DepthMap, Grid, Mask, Rgb};

pub type Point3 = [f64; 3];

/// The four viewpoints the pipeline reasons about, in fusion order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CanonicalView {
    Front,
    Back,
    Left,
    Right,
}

impl CanonicalView {
    pub const ALL: [CanonicalView; 4] = [
        CanonicalView::Front,
        CanonicalView::Back,
        CanonicalView::Left,
        CanonicalView::Right,
    ];

    /// Camera azimuth around the subject in degrees.
    pub fn azimuth_deg(self) -> f64 {
        match self {
            CanonicalView::Front => 0.0,
            CanonicalView::Back => 180.0,
            CanonicalView::Left => 90.0,
            CanonicalView::Right => 270.0,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            CanonicalView::Front => "front",
            CanonicalView::Back => "back",
            CanonicalView::Left => "left",
            CanonicalView::Right => "right",
        }
    }

    pub fn is_side(self) -> bool {
        matches!(self, CanonicalView::Left | CanonicalView::Right)
    }
}

/// Pinhole camera with a rigid world-to-camera pose `x_cam = R · x_world + t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major world-to-camera rotation.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    /// Checks intrinsics ranges and that the rotation is proper orthonormal to 1e-6.
    pub fn validate(&self) -> Result<()> {
        ensure_input!(self.fx > 0.0 && self.fy > 0.0, "focal lengths must be positive");
        ensure_input!(
            self.cx > 0.0 && self.cx < self.width as f64 && self.cy > 0.0 && self.cy < self.height as f64,
            "principal point ({}, {}) outside the {}x{} image",
            self.cx,
            self.cy,
            self.width,
            self.height
        );
        let r = self.rot();
        let rrt = r * r.transpose();
        ensure_input!(
            (rrt - Matrix3::identity()).abs().max() <= 1e-6,
            "rotation is not orthonormal"
        );
        ensure_input!((r.determinant() - 1.0).abs() <= 1e-6, "rotation determinant is not +1");
        ensure_input!(
            self.translation.iter().all(|v| v.is_finite()),
            "translation is not finite"
        );
        Ok(())
    }

    /// Camera at `eye` looking at `target`, with image-up aligned to `up`.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(eye: Point3, target: Point3, up: Point3, fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        let eye = Vector3::from(eye);
        let z = (Vector3::from(target) - eye).normalize();
        let down = -Vector3::from(up);
        let x = down.cross(&z).normalize();
        let y = z.cross(&x);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let t = -(r * eye);
        CameraModel {
            fx,
            fy,
            cx,
            cy,
            rotation: mat_to_rows(&r),
            translation: t.into(),
            width,
            height,
        }
    }

    pub fn rot(&self) -> Matrix3<f64> {
        Matrix3::from_row_slice(&self.rotation.concat())
    }

    pub fn trans(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }

    pub fn to_camera(&self, p: &Point3) -> Point3 {
        (self.rot() * Vector3::from(*p) + self.trans()).into()
    }

    pub fn to_world(&self, p: &Point3) -> Point3 {
        (self.rot().transpose() * (Vector3::from(*p) - self.trans())).into()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Point3 {
        self.to_world(&[0.0, 0.0, 0.0])
    }

    /// The same physical camera expressed against `reference`'s camera frame,
    /// i.e. a camera whose "world" is `reference`'s camera coordinates.
    pub fn relative_to(&self, reference: &CameraModel) -> CameraModel {
        let r = self.rot() * reference.rot().transpose();
        let t = self.trans() - r * reference.trans();
        CameraModel {
            rotation: mat_to_rows(&r),
            translation: t.into(),
            ..self.clone()
        }
    }

    /// Same intrinsics scaled to a different square resolution.
    pub fn with_resolution(&self, width: usize, height: usize) -> CameraModel {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        CameraModel {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: (self.cx + 0.5) * sx - 0.5,
            cy: (self.cy + 0.5) * sy - 0.5,
            width,
            height,
            ..self.clone()
        }
    }
}

fn mat_to_rows(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    [
        [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
        [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
        [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
    ]
}

/// Pixel-aligned 3-D points with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct PointMap {
    pub points: Grid<Point3>,
    pub valid: Mask,
}

impl PointMap {
    pub fn empty(width: usize, height: usize) -> Self {
        PointMap {
            points: Grid::filled(width, height, [0.0; 3]),
            valid: Grid::filled(width, height, false),
        }
    }

    pub fn new(points: Grid<Point3>, valid: Mask) -> Result<Self> {
        ensure_input!(points.same_dims(&valid), "points and validity grids differ in size");
        for (p, &v) in points.as_slice().iter().zip(valid.as_slice()) {
            ensure_input!(!v || p.iter().all(|c| c.is_finite()), "valid point is not finite");
        }
        Ok(PointMap { points, valid })
    }

    pub fn width(&self) -> usize {
        self.points.width()
    }

    pub fn height(&self) -> usize {
        self.points.height()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.count()
    }

    /// Valid pixel coordinates in row-major order.
    pub fn valid_pixels(&self) -> Vec<(usize, usize)> {
        let w = self.width();
        self.valid
            .as_slice()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v)
            .map(|(i, _)| (i / w, i % w))
            .collect()
    }

    /// Valid points in row-major pixel order.
    pub fn valid_points(&self) -> Vec<Point3> {
        self.points
            .as_slice()
            .iter()
            .zip(self.valid.as_slice())
            .filter(|(_, &v)| v)
            .map(|(p, _)| *p)
            .collect()
    }

    /// Applies `f` to every valid point.
    pub fn map_points(&self, f: impl Fn(&Point3) -> Point3) -> PointMap {
        let points = Grid::from_fn(self.width(), self.height(), |r, c| {
            if *self.valid.get(r, c) {
                f(self.points.get(r, c))
            } else {
                [0.0; 3]
            }
        });
        PointMap {
            points,
            valid: self.valid.clone(),
        }
    }

    /// Re-expresses world-frame points in `camera`'s frame.
    pub fn to_camera_frame(&self, camera: &CameraModel) -> PointMap {
        self.map_points(|p| camera.to_camera(p))
    }

    pub fn scaled(&self, delta: f64) -> PointMap {
        self.map_points(|p| [p[0] * delta, p[1] * delta, p[2] * delta])
    }
}

/// Back-projects masked depth pixels to world-frame points.
pub fn unproject_depth(depth: &DepthMap, mask: &Mask, camera: &CameraModel) -> Result<PointMap> {
    camera.validate()?;
    ensure_input!(depth.same_dims(mask), "depth and mask sizes differ");
    ensure_input!(
        depth.width() == camera.width && depth.height() == camera.height,
        "depth {}x{} does not match camera {}x{}",
        depth.width(),
        depth.height(),
        camera.width,
        camera.height
    );
    let rt = camera.rot().transpose();
    let t = camera.trans();
    let mut points = Grid::filled(depth.width(), depth.height(), [0.0; 3]);
    for r in 0..depth.height() {
        for c in 0..depth.width() {
            if !*mask.get(r, c) {
                continue;
            }
            let d = *depth.get(r, c);
            ensure_input!(d > 0.0 && d.is_finite(), "non-positive depth {d} at masked pixel ({r}, {c})");
            let pc = Vector3::new((c as f64 - camera.cx) * d / camera.fx, (r as f64 - camera.cy) * d / camera.fy, d);
            points.set(r, c, (rt * (pc - t)).into());
        }
    }
    Ok(PointMap {
        points,
        valid: mask.clone(),
    })
}

/// Pinhole projection to `(u, v, depth)`; points at or behind the camera plane
/// report `depth ≤ 0` and non-finite or meaningless `(u, v)`.
pub fn project_points(points: &[Point3], camera: &CameraModel) -> Vec<[f64; 3]> {
    let r = camera.rot();
    let t = camera.trans();
    points
        .iter()
        .map(|p| {
            let pc = r * Vector3::from(*p) + t;
            let z = pc.z;
            if z <= 0.0 {
                [f64::NAN, f64::NAN, z]
            } else {
                [camera.fx * pc.x / z + camera.cx, camera.fy * pc.y / z + camera.cy, z]
            }
        })
        .collect()
}

/// Which pixel of which view a fused point came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PointSource {
    pub view: CanonicalView,
    pub row: u32,
    pub col: u32,
}

/// Concatenated human point cloud in the front-view frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedPointCloud {
    pub positions: Vec<Point3>,
    pub colors: Option<Vec<Rgb>>,
    pub sources: Vec<PointSource>,
}

impl FusedPointCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Index range of the points contributed by `view`.
    pub fn view_range(&self, view: CanonicalView) -> std::ops::Range<usize> {
        let start = self.sources.iter().position(|s| s.view == view);
        match start {
            None => 0..0,
            Some(s) => {
                let len = self.sources[s..].iter().take_while(|x| x.view == view).count();
                s..s + len
            }
        }
    }

    /// Axis-aligned bounding-box diagonal; 0 for an empty cloud.
    pub fn bbox_diagonal(&self) -> f64 {
        bbox_diagonal(&self.positions)
    }
}

pub fn bbox_diagonal(points: &[Point3]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    (0..3).map(|k| (hi[k] - lo[k]).powi(2)).sum::<f64>().sqrt()
}

/// Scales and concatenates the valid points of the four maps in
/// front, back, left, right order.
pub fn fuse_pointmaps(maps: [&PointMap; 4], delta: f64) -> Result<FusedPointCloud> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::InvalidInput(format!("scale factor must be positive, got {delta}")));
    }
    let total: usize = maps.iter().map(|m| m.valid_count()).sum();
    let mut positions = Vec::with_capacity(total);
    let mut sources = Vec::with_capacity(total);
    for (view, map) in CanonicalView::ALL.into_iter().zip(maps) {
        for (r, c) in map.valid_pixels() {
            let p = map.points.get(r, c);
            positions.push([p[0] * delta, p[1] * delta, p[2] * delta]);
            sources.push(PointSource {
                view,
                row: r as u32,
                col: c as u32,
            });
        }
    }
    Ok(FusedPointCloud {
        positions,
        colors: None,
        sources,
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn identity_camera(w: usize, h: usize, f: f64, c: f64) -> CameraModel {
        CameraModel {
            fx: f,
            fy: f,
            cx: c,
            cy: c,
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
            width: w,
            height: h,
        }
    }

    pub(crate) fn random_camera(rng: &mut ChaCha8Rng, w: usize, h: usize) -> CameraModel {
        let az: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let el: f64 = rng.random_range(-0.5..0.5);
        let r: f64 = rng.random_range(1.5..4.0);
        let eye = [r * el.cos() * az.sin(), r * el.sin(), -r * el.cos() * az.cos()];
        let target = [rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)];
        let f = rng.random_range(0.6..2.0) * w as f64;
        CameraModel::look_at(
            eye,
            target,
            [0.0, 1.0, 0.0],
            f,
            f * rng.random_range(0.9..1.1),
            rng.random_range(0.3..0.7) * w as f64,
            rng.random_range(0.3..0.7) * h as f64,
            w,
            h,
        )
    }

    #[test]
    fn principal_ray_unprojects_on_axis() {
        let cam = identity_camera(9, 9, 100.0, 4.0);
        let mut depth = Grid::filled(9, 9, 0.0);
        let mut mask = Grid::filled(9, 9, false);
        depth.set(4, 4, 2.0);
        mask.set(4, 4, true);
        let pm = unproject_depth(&depth, &mask, &cam).unwrap();
        assert_eq!(*pm.points.get(4, 4), [0.0, 0.0, 2.0]);
        assert_eq!(pm.valid_count(), 1);
    }

    #[test]
    fn empty_mask_gives_no_points() {
        let cam = identity_camera(4, 4, 10.0, 2.0);
        let pm = unproject_depth(&Grid::filled(4, 4, 1.0), &Grid::filled(4, 4, false), &cam).unwrap();
        assert_eq!(pm.valid_count(), 0);
    }

    #[test]
    fn unproject_rejects_bad_inputs() {
        let cam = identity_camera(4, 4, 10.0, 2.0);
        let mut depth = Grid::filled(4, 4, 1.0);
        depth.set(1, 1, 0.0);
        assert!(unproject_depth(&depth, &Grid::filled(4, 4, true), &cam).is_err());
        assert!(unproject_depth(&Grid::filled(5, 4, 1.0), &Grid::filled(5, 4, true), &cam).is_err());
        assert!(unproject_depth(&Grid::filled(4, 4, 1.0), &Grid::filled(3, 4, true), &cam).is_err());
    }

    #[test]
    fn optical_axis_and_behind_camera_projection() {
        let cam = identity_camera(128, 128, 100.0, 64.0);
        let out = project_points(&[[0.0, 0.0, 2.0], [0.0, 0.0, -1.0]], &cam);
        assert_eq!(out[0], [64.0, 64.0, 2.0]);
        assert!(out[1][2] <= 0.0);
    }

    #[test]
    fn camera_validation() {
        let mut cam = identity_camera(8, 8, 10.0, 4.0);
        assert!(cam.validate().is_ok());
        cam.rotation[0][0] = -1.0; // reflection
        assert!(cam.validate().is_err());
        let mut cam = identity_camera(8, 8, 10.0, 4.0);
        cam.cx = 8.0;
        assert!(cam.validate().is_err());
        cam.cx = 4.0;
        cam.fy = 0.0;
        assert!(cam.validate().is_err());
    }

    #[test]
    fn roundtrip_on_random_cameras() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let cam = random_camera(&mut rng, 8, 8);
            let depth = Grid::from_fn(8, 8, |_, _| rng.random_range(0.5..5.0));
            let mask = Grid::from_fn(8, 8, |_, _| rng.random_bool(0.7));
            let pm = unproject_depth(&depth, &mask, &cam).unwrap();
            let proj = project_points(&pm.valid_points(), &cam);
            for ((r, c), uvd) in pm.valid_pixels().into_iter().zip(proj) {
                assert!((uvd[0] - c as f64).abs() < 1e-5 * (1.0 + c as f64));
                assert!((uvd[1] - r as f64).abs() < 1e-5 * (1.0 + r as f64));
                let d = *depth.get(r, c);
                assert!((uvd[2] - d).abs() < 1e-5 * d);
            }
        }
    }

    fn random_map(rng: &mut ChaCha8Rng, w: usize, h: usize) -> PointMap {
        let points = Grid::from_fn(w, h, |_, _| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(1.0..3.0)]);
        let valid = Grid::from_fn(w, h, |_, _| rng.random_bool(0.4));
        PointMap::new(points, valid).unwrap()
    }

    #[test]
    fn fusion_counts_scales_and_tags() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let maps: Vec<PointMap> = (0..4).map(|_| random_map(&mut rng, 6, 5)).collect();
        let refs = [&maps[0], &maps[1], &maps[2], &maps[3]];
        let expected: usize = maps.iter().map(|m| m.as_valid_count_oracle()).sum();
        let one = fuse_pointmaps(refs, 1.0).unwrap();
        assert_eq!(one.len(), expected);
        let two = fuse_pointmaps(refs, 2.0).unwrap();
        for (a, b) in one.positions.iter().zip(&two.positions) {
            for k in 0..3 {
                assert_eq!(b[k], 2.0 * a[k]);
            }
        }
        // provenance is a bijection onto valid pixels
        let mut seen = std::collections::HashSet::new();
        for (s, p) in one.sources.iter().zip(&one.positions) {
            let map = &maps[s.view.index()];
            assert!(*map.valid.get(s.row as usize, s.col as usize));
            assert_eq!(map.points.get(s.row as usize, s.col as usize), p);
            assert!(seen.insert(*s));
        }
        assert!(fuse_pointmaps(refs, 0.0).is_err());
        assert!(fuse_pointmaps(refs, -1.0).is_err());
    }

    #[test]
    fn ten_valid_points_per_map() {
        let mut maps = Vec::new();
        for k in 0..4 {
            let mut m = PointMap::empty(5, 4);
            for i in 0..10 {
                m.valid.set(i / 5, i % 5, true);
                m.points.set(i / 5, i % 5, [k as f64, i as f64, 1.0]);
            }
            maps.push(m);
        }
        let fused = fuse_pointmaps([&maps[0], &maps[1], &maps[2], &maps[3]], 1.0).unwrap();
        assert_eq!(fused.len(), 40);
        assert_eq!(fused.positions[13], [1.0, 3.0, 1.0]);
        assert_eq!(fused.view_range(CanonicalView::Left), 20..30);
    }

    #[test]
    fn relative_camera_composes_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_camera(&mut rng, 16, 16);
        let b = random_camera(&mut rng, 16, 16);
        let rel = b.relative_to(&a);
        rel.validate().unwrap();
        let p = [0.3, -0.2, 0.1];
        let via_world = b.to_camera(&p);
        let via_a = rel.to_camera(&a.to_camera(&p));
        for k in 0..3 {
            assert!((via_world[k] - via_a[k]).abs() < 1e-12);
        }
    }

    impl PointMap {
        /// Counting oracle independent of `Mask::count`.
        fn as_valid_count_oracle(&self) -> usize {
            let mut n = 0;
            for r in 0..self.height() {
                for c in 0..self.width() {
                    if *self.valid.get(r, c) {
                        n += 1;
                    }
                }
            }
            n
        }
    }
}
