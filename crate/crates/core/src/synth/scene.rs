//! Procedural articulated body proxies built from capsules and ellipsoids.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::image::Rgb;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubjectConfig {
    /// Inclusive range the subject height (meters) is drawn from.
    pub height_range: [f64; 2],
    /// Largest rigid rotation applied to any limb, in degrees.
    pub max_articulation_deg: f64,
    /// Range of texture feature sizes in meters.
    pub texture_period: [f64; 2],
}

impl Default for SubjectConfig {
    fn default() -> Self {
        SubjectConfig {
            height_range: [1.55, 1.85],
            max_articulation_deg: 30.0,
            texture_period: [0.12, 0.30],
        }
    }
}

impl SubjectConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.height_range;
        if !(1.4..=2.0).contains(&lo) || !(1.4..=2.0).contains(&hi) || lo > hi {
            return Err(Error::InvalidConfig(format!("height range [{lo}, {hi}] must lie in [1.4, 2.0]")));
        }
        if !(0.0..=30.0).contains(&self.max_articulation_deg) {
            return Err(Error::InvalidConfig("articulation must be within [0, 30] degrees".into()));
        }
        let [a, b] = self.texture_period;
        if !(a > 0.0 && a <= b) {
            return Err(Error::InvalidConfig("texture period range is empty".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Capsule { a: Point3, b: Point3, radius: f64 },
    /// `rotation` maps local axes to world (columns are the local axes).
    Ellipsoid {
        center: Point3,
        rotation: [[f64; 3]; 3],
        radii: [f64; 3],
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Pattern {
    Stripes { axis: [f64; 3], period: f64, phase: f64 },
    Checker { period: f64 },
    Noise { period: f64, seed: u64 },
}

/// Color field over a part, evaluated relative to the part's anchor point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub base: Rgb,
    pub accent: Rgb,
    pub pattern: Pattern,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Part {
    pub name: String,
    pub shape: Shape,
    pub texture: Texture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectScene {
    pub seed: u64,
    pub parts: Vec<Part>,
    pub height: f64,
}

impl Shape {
    fn anchor(&self) -> Point3 {
        match self {
            Shape::Capsule { a, .. } => *a,
            Shape::Ellipsoid { center, .. } => *center,
        }
    }

    /// Extent `[min, max]` along world axis `k`.
    pub fn extent(&self, k: usize) -> [f64; 2] {
        match self {
            Shape::Capsule { a, b, radius } => [a[k].min(b[k]) - radius, a[k].max(b[k]) + radius],
            Shape::Ellipsoid {
                center,
                rotation,
                radii,
            } => {
                let half = (0..3).map(|j| (rotation[k][j] * radii[j]).powi(2)).sum::<f64>().sqrt();
                [center[k] - half, center[k] + half]
            }
        }
    }

    fn transform(&mut self, scale: f64, offset: [f64; 3]) {
        let f = |p: &mut Point3| {
            for k in 0..3 {
                p[k] = p[k] * scale + offset[k];
            }
        };
        match self {
            Shape::Capsule { a, b, radius } => {
                f(a);
                f(b);
                *radius *= scale;
            }
            Shape::Ellipsoid { center, radii, .. } => {
                f(center);
                radii.iter_mut().for_each(|r| *r *= scale);
            }
        }
    }

    /// Nearest ray parameter `t > 0` with `origin + t·dir` on the surface.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        match self {
            Shape::Capsule { a, b, radius } => intersect_capsule(origin, dir, &Vector3::from(*a), &Vector3::from(*b), *radius),
            Shape::Ellipsoid {
                center,
                rotation,
                radii,
            } => {
                let r = Matrix3::from_row_slice(&rotation.concat());
                let inv = Vector3::new(1.0 / radii[0], 1.0 / radii[1], 1.0 / radii[2]);
                let o = (r.transpose() * (origin - Vector3::from(*center))).component_mul(&inv);
                let d = (r.transpose() * dir).component_mul(&inv);
                let a = d.dot(&d);
                let b = o.dot(&d);
                let c = o.dot(&o) - 1.0;
                let h = b * b - a * c;
                if h < 0.0 {
                    return None;
                }
                let s = h.sqrt();
                let t0 = (-b - s) / a;
                let t1 = (-b + s) / a;
                if t0 > 1e-9 {
                    Some(t0)
                } else if t1 > 1e-9 {
                    Some(t1)
                } else {
                    None
                }
            }
        }
    }
}

/// Ray/capsule intersection for a unit-length `dir`.
fn intersect_capsule(ro: &Vector3<f64>, rd: &Vector3<f64>, pa: &Vector3<f64>, pb: &Vector3<f64>, r: f64) -> Option<f64> {
    let ba = pb - pa;
    let oa = ro - pa;
    let baba = ba.dot(&ba);
    let bard = ba.dot(rd);
    let baoa = ba.dot(&oa);
    let rdoa = rd.dot(&oa);
    let oaoa = oa.dot(&oa);
    let a = baba - bard * bard;
    let b = baba * rdoa - baoa * bard;
    let c = baba * oaoa - baoa * baoa - r * r * baba;
    let h = b * b - a * c;
    if h < 0.0 {
        return None;
    }
    if a.abs() > 1e-12 {
        let t = (-b - h.sqrt()) / a;
        let y = baoa + t * bard;
        if y > 0.0 && y < baba && t > 1e-9 {
            return Some(t);
        }
    }
    let mut best: Option<f64> = None;
    for cap in [pa, pb] {
        let oc = ro - cap;
        let b = rd.dot(&oc);
        let c = oc.dot(&oc) - r * r;
        let h = b * b - c;
        if h > 0.0 {
            let t = -b - h.sqrt();
            if t > 1e-9 && best.is_none_or(|bt| t < bt) {
                best = Some(t);
            }
        }
    }
    best
}

impl Texture {
    pub fn color_at(&self, p: &Point3, anchor: &Point3) -> Rgb {
        let l = [p[0] - anchor[0], p[1] - anchor[1], p[2] - anchor[2]];
        let s = match &self.pattern {
            Pattern::Stripes { axis, period, phase } => {
                let x = l[0] * axis[0] + l[1] * axis[1] + l[2] * axis[2];
                0.5 + 0.5 * (std::f64::consts::TAU * x / period + phase).sin()
            }
            Pattern::Checker { period } => {
                let w = std::f64::consts::PI / period;
                let v = (w * l[0]).sin() * (w * l[1]).sin() * (w * l[2] + 0.7).sin();
                0.5 + 0.5 * (4.0 * v).tanh()
            }
            Pattern::Noise { period, seed } => value_noise(&l, *period, *seed),
        };
        [0, 1, 2].map(|k| self.base[k] * (1.0 - s) + self.accent[k] * s)
    }
}

fn lattice_hash(ix: i64, iy: i64, iz: i64, seed: u64) -> f64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in [ix, iy, iz] {
        h ^= v as u64;
        h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 29;
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Smooth trilinear value noise in `[0, 1]`.
fn value_noise(p: &Point3, period: f64, seed: u64) -> f64 {
    let q = p.map(|v| v / period);
    let base = q.map(|v| v.floor());
    let frac = [0, 1, 2].map(|k| {
        let f = q[k] - base[k];
        f * f * (3.0 - 2.0 * f)
    });
    let mut acc = 0.0;
    for corner in 0..8 {
        let o = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
        let w: f64 = (0..3).map(|k| if o[k] == 1 { frac[k] } else { 1.0 - frac[k] }).product();
        acc += w * lattice_hash(base[0] as i64 + o[0] as i64, base[1] as i64 + o[1] as i64, base[2] as i64 + o[2] as i64, seed);
    }
    acc
}

impl SubjectScene {
    /// Nearest surface hit along a ray: `(t, color)`.
    pub fn trace(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, Rgb)> {
        let mut best: Option<(f64, usize)> = None;
        for (i, part) in self.parts.iter().enumerate() {
            if let Some(t) = part.shape.intersect(origin, dir) {
                if best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, i));
                }
            }
        }
        best.map(|(t, i)| {
            let p: Point3 = (origin + dir * t).into();
            let part = &self.parts[i];
            (t, part.texture.color_at(&p, &part.shape.anchor()))
        })
    }

    /// World-axis extent `[min, max]` of the whole body along axis `k`.
    pub fn extent(&self, k: usize) -> [f64; 2] {
        self.parts.iter().fold([f64::INFINITY, f64::NEG_INFINITY], |acc, p| {
            let e = p.shape.extent(k);
            [acc[0].min(e[0]), acc[1].max(e[1])]
        })
    }

    /// Center of the axis-aligned bounding box.
    pub fn centroid(&self) -> Point3 {
        [0, 1, 2].map(|k| {
            let e = self.extent(k);
            0.5 * (e[0] + e[1])
        })
    }
}

const SKIN: [Rgb; 4] = [[0.93, 0.76, 0.62], [0.80, 0.60, 0.45], [0.62, 0.44, 0.31], [0.42, 0.29, 0.20]];

fn random_cloth<R: Rng>(rng: &mut R) -> Rgb {
    let hue: f64 = rng.random_range(0.0..6.0);
    let sat: f64 = rng.random_range(0.35..0.8);
    let val: f64 = rng.random_range(0.35..0.9);
    let c = val * sat;
    let x = c * (1.0 - ((hue % 2.0) - 1.0).abs());
    let (r, g, b) = match hue as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = val - c;
    [r + m, g + m, b + m]
}

fn random_texture<R: Rng>(rng: &mut R, base: Rgb, cfg: &SubjectConfig, contrast: f64) -> Texture {
    let accent = {
        let other = random_cloth(rng);
        [0, 1, 2].map(|k| (base[k] * (1.0 - contrast) + other[k] * contrast).clamp(0.0, 1.0))
    };
    let period = rng.random_range(cfg.texture_period[0]..=cfg.texture_period[1]);
    let pattern = match rng.random_range(0..3) {
        0 => {
            let axis = Vector3::new(rng.random_range(-0.5..0.5), 1.0, rng.random_range(-0.5..0.5)).normalize();
            Pattern::Stripes {
                axis: axis.into(),
                period,
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            }
        }
        1 => Pattern::Checker { period },
        _ => Pattern::Noise {
            period: period * 0.6,
            seed: rng.random(),
        },
    };
    Texture { base, accent, pattern }
}

/// Rotation by `angle` (radians) about `axis`.
fn rot(axis: [f64; 3], angle: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&Unit::new_normalize(Vector3::from(axis)), angle).into_inner()
}

fn rows(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    [0, 1, 2].map(|r| [m[(r, 0)], m[(r, 1)], m[(r, 2)]])
}

/// Builds a deterministic subject for `seed`.
///
/// The body faces −z with +y up; its bounding-box center sits at the origin
/// and its vertical extent equals the drawn height.
pub fn make_subject(seed: u64, cfg: &SubjectConfig) -> Result<SubjectScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_art = cfg.max_articulation_deg.to_radians();
    let mut art = |limit: f64| rng.random_range(-1.0..=1.0) * limit;
    // Joint angles first so the proportion draws below stay independent of them.
    let arm_abd = [art(max_art).abs() * 0.8 + 0.04, art(max_art).abs() * 0.8 + 0.04];
    let arm_flex = [art(max_art * 0.3), art(max_art * 0.3)];
    let elbow = [art(max_art * 0.5).abs(), art(max_art * 0.5).abs()];
    let leg_abd = [art(max_art * 0.3).abs(), art(max_art * 0.3).abs()];
    let knee = [art(max_art * 0.3).abs(), art(max_art * 0.3).abs()];

    let height = if cfg.height_range[0] == cfg.height_range[1] {
        cfg.height_range[0]
    } else {
        rng.random_range(cfg.height_range[0]..=cfg.height_range[1])
    };
    let width = rng.random_range(0.85..1.2);
    let limb = rng.random_range(0.85..1.15);
    let head_s = rng.random_range(0.9..1.1);

    let skin = SKIN[rng.random_range(0..SKIN.len())];
    let shirt = random_cloth(&mut rng);
    let pants = random_cloth(&mut rng);
    let skin_tex = random_texture(&mut rng, skin, cfg, 0.15);
    let hair_tex = random_texture(&mut rng, [0.15, 0.1, 0.07], cfg, 0.2);
    let shirt_tex = random_texture(&mut rng, shirt, cfg, 0.55);
    let sleeve_tex = random_texture(&mut rng, shirt, cfg, 0.35);
    let pants_tex = random_texture(&mut rng, pants, cfg, 0.45);
    let shoe_tex = random_texture(&mut rng, [0.2, 0.2, 0.22], cfg, 0.3);

    let ident = rows(&Matrix3::identity());
    let mut parts = Vec::new();
    let mut push = |name: &str, shape: Shape, texture: &Texture| {
        parts.push(Part {
            name: name.to_string(),
            shape,
            texture: texture.clone(),
        })
    };
    // Unit-height body: feet near y=0, crown near y=1.
    push("pelvis", Shape::Ellipsoid { center: [0.0, 0.50, 0.0], rotation: ident, radii: [0.10 * width, 0.07, 0.065] }, &pants_tex);
    push("torso", Shape::Ellipsoid { center: [0.0, 0.66, 0.0], rotation: ident, radii: [0.115 * width, 0.16, 0.07] }, &shirt_tex);
    push("neck", Shape::Capsule { a: [0.0, 0.78, 0.0], b: [0.0, 0.845, 0.0], radius: 0.025 }, &skin_tex);
    push("head", Shape::Ellipsoid { center: [0.0, 0.905, 0.0], rotation: ident, radii: [0.055 * head_s, 0.068 * head_s, 0.06 * head_s] }, &skin_tex);
    push("hair", Shape::Ellipsoid { center: [0.0, 0.925, 0.012], rotation: ident, radii: [0.058 * head_s, 0.055 * head_s, 0.058 * head_s] }, &hair_tex);

    for (i, side) in [-1.0f64, 1.0].into_iter().enumerate() {
        let name = |p: &str| format!("{p}_{}", if side < 0.0 { "r" } else { "l" });
        // arms: abduct about z (outward), flex about x
        let shoulder = Vector3::new(side * 0.125 * width, 0.775, 0.0);
        let r_upper = rot([0.0, 0.0, 1.0], side * arm_abd[i]) * rot([1.0, 0.0, 0.0], arm_flex[i]);
        let elbow_p = shoulder + r_upper * Vector3::new(0.0, -0.17 * limb, 0.0);
        let r_lower = r_upper * rot([1.0, 0.0, 0.0], -elbow[i]);
        let wrist = elbow_p + r_lower * Vector3::new(0.0, -0.15 * limb, 0.0);
        push(&name("upper_arm"), Shape::Capsule { a: shoulder.into(), b: elbow_p.into(), radius: 0.033 * limb }, &sleeve_tex);
        push(&name("forearm"), Shape::Capsule { a: elbow_p.into(), b: wrist.into(), radius: 0.026 * limb }, &skin_tex);
        let hand = wrist + r_lower * Vector3::new(0.0, -0.035, 0.0);
        push(&name("hand"), Shape::Ellipsoid { center: hand.into(), rotation: rows(&r_lower), radii: [0.022, 0.04, 0.014] }, &skin_tex);

        let hip = Vector3::new(side * 0.055 * width, 0.48, 0.0);
        let r_thigh = rot([0.0, 0.0, 1.0], side * leg_abd[i]) * rot([1.0, 0.0, 0.0], -knee[i] * 0.5);
        let knee_p = hip + r_thigh * Vector3::new(0.0, -0.225, 0.0);
        let r_shin = r_thigh * rot([1.0, 0.0, 0.0], knee[i]);
        let ankle = knee_p + r_shin * Vector3::new(0.0, -0.21, 0.0);
        push(&name("thigh"), Shape::Capsule { a: hip.into(), b: knee_p.into(), radius: 0.052 * limb }, &pants_tex);
        push(&name("shin"), Shape::Capsule { a: knee_p.into(), b: ankle.into(), radius: 0.04 * limb }, &pants_tex);
        let foot = ankle + Vector3::new(0.0, -0.02, -0.03);
        push(&name("foot"), Shape::Ellipsoid { center: foot.into(), rotation: ident, radii: [0.035, 0.025, 0.07] }, &shoe_tex);
    }

    let mut scene = SubjectScene { seed, parts, height };
    let [ymin, ymax] = scene.extent(1);
    let scale = height / (ymax - ymin);
    for part in &mut scene.parts {
        part.shape.transform(scale, [0.0; 3]);
    }
    let c = scene.centroid();
    for part in &mut scene.parts {
        part.shape.transform(1.0, [-c[0], -c[1], -c[2]]);
    }
    let [ymin, ymax] = scene.extent(1);
    scene.height = ymax - ymin;
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let cfg = SubjectConfig::default();
        assert_eq!(make_subject(3, &cfg).unwrap(), make_subject(3, &cfg).unwrap());
        assert_ne!(make_subject(3, &cfg).unwrap(), make_subject(4, &cfg).unwrap());
    }

    #[test]
    fn degenerate_height_range_is_exact() {
        let cfg = SubjectConfig {
            height_range: [1.7, 1.7],
            ..Default::default()
        };
        for seed in 0..8 {
            let s = make_subject(seed, &cfg).unwrap();
            let [lo, hi] = s.extent(1);
            assert!((hi - lo - 1.7).abs() < 1e-12, "seed {seed}: {}", hi - lo);
            let c = s.centroid();
            assert!(c.iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn heights_stay_in_range_and_colors_in_unit_interval() {
        let cfg = SubjectConfig::default();
        for seed in 0..20 {
            let s = make_subject(seed, &cfg).unwrap();
            assert!((cfg.height_range[0] - 1e-9..=cfg.height_range[1] + 1e-9).contains(&s.height));
            for part in &s.parts {
                for k in 0..3 {
                    assert!((0.0..=1.0).contains(&part.texture.base[k]));
                    assert!((0.0..=1.0).contains(&part.texture.accent[k]));
                }
            }
        }
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = SubjectConfig {
            height_range: [1.0, 1.7],
            ..Default::default()
        };
        assert!(make_subject(0, &cfg).is_err());
    }

    #[test]
    fn capsule_and_ellipsoid_hits() {
        let origin = Vector3::new(0.0, 0.0, -3.0);
        let dir = Vector3::new(0.0, 0.0, 1.0);
        let sphere = Shape::Ellipsoid {
            center: [0.0; 3],
            rotation: rows(&Matrix3::identity()),
            radii: [1.0; 3],
        };
        assert!((sphere.intersect(&origin, &dir).unwrap() - 2.0).abs() < 1e-12);
        let cap = Shape::Capsule {
            a: [0.0, -1.0, 0.0],
            b: [0.0, 1.0, 0.0],
            radius: 0.5,
        };
        assert!((cap.intersect(&origin, &dir).unwrap() - 2.5).abs() < 1e-12);
        // end cap
        let o2 = Vector3::new(0.0, 5.0, 0.0);
        let d2 = Vector3::new(0.0, -1.0, 0.0);
        assert!((cap.intersect(&o2, &d2).unwrap() - 3.5).abs() < 1e-12);
        assert!(cap.intersect(&origin, &-dir).is_none());
    }

    #[test]
    fn noise_is_bounded() {
        for i in 0..200 {
            let p = [i as f64 * 0.037, (i as f64 * 0.11).sin(), -0.3 * i as f64];
            let v = value_noise(&p, 0.1, 42);
            assert!((0.0..=1.0).contains(&v));
        }
    }
}
