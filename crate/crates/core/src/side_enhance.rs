//! Side-view color transfer: every side-view point takes the color of its
//! nearest colored front/back point, then colors are written back onto the
//! side view's pixel grid as a pseudo-view image.

use std::collections::HashMap;

use crate::error::{ensure_input, Result};
use crate::geometry::{Point3, PointMap};
use crate::image::{Grid, Mask, Rgb, RgbImage};

#[inline]
fn dist2(a: &Point3, b: &Point3) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Index of the nearest point; ties go to the lowest index.
pub fn nearest_brute_force(points: &[Point3], query: &Point3) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (i, p) in points.iter().enumerate() {
        let d = dist2(p, query);
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, i));
        }
    }
    best.map(|(_, i)| i)
}

/// Uniform hash grid over a fixed point set for exact nearest-neighbor queries.
#[derive(Clone, Debug)]
pub struct NnsGrid {
    points: Vec<Point3>,
    cell: f64,
    cells: HashMap<[i64; 3], Vec<u32>>,
}

impl NnsGrid {
    /// Cell size is the median nearest-neighbor distance of up to 256 sampled points.
    pub fn build(points: &[Point3]) -> Result<NnsGrid> {
        ensure_input!(!points.is_empty(), "nearest-neighbor reference set is empty");
        ensure_input!(points.iter().all(|p| p.iter().all(|v| v.is_finite())), "reference points must be finite");
        let cell = Self::cell_size(points);
        let mut cells: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, cell)).or_default().push(i as u32);
        }
        Ok(NnsGrid {
            points: points.to_vec(),
            cell,
            cells,
        })
    }

    fn cell_size(points: &[Point3]) -> f64 {
        let n = points.len();
        let stride = n.div_ceil(256).max(1);
        let mut d: Vec<f64> = (0..n)
            .step_by(stride)
            .filter_map(|i| {
                points
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, p)| dist2(p, &points[i]))
                    .filter(|&d| d > 0.0)
                    .min_by(f64::total_cmp)
            })
            .collect();
        if d.is_empty() {
            // all points coincide (or there is only one)
            return 1.0;
        }
        d.sort_by(f64::total_cmp);
        d[d.len() / 2].sqrt()
    }

    fn key(p: &Point3, cell: f64) -> [i64; 3] {
        p.map(|v| (v / cell).floor() as i64)
    }

    pub fn cell_size_m(&self) -> f64 {
        self.cell
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Exact nearest neighbor, identical to [`nearest_brute_force`] including ties.
    pub fn nearest(&self, query: &Point3) -> usize {
        let center = Self::key(query, self.cell);
        let mut best: Option<(f64, u32)> = None;
        let consider = |best: &mut Option<(f64, u32)>, idx: &[u32]| {
            for &i in idx {
                let d = dist2(&self.points[i as usize], query);
                if best.is_none_or(|(bd, bi)| d < bd || (d == bd && i < bi)) {
                    *best = Some((d, i));
                }
            }
        };
        let mut k: i64 = 0;
        loop {
            // Rings of more cells than are occupied: scan everything instead.
            if (2 * k + 1).pow(3) as usize > 4 * self.cells.len() {
                return nearest_brute_force(&self.points, query).expect("non-empty");
            }
            for di in -k..=k {
                for dj in -k..=k {
                    let on_face = di.abs() == k || dj.abs() == k;
                    let dls: Vec<i64> = if on_face { (-k..=k).collect() } else { vec![-k, k] };
                    for dl in dls {
                        if let Some(idx) = self.cells.get(&[center[0] + di, center[1] + dj, center[2] + dl]) {
                            consider(&mut best, idx);
                        }
                    }
                }
            }
            // Unvisited points lie at least k cells away from the query.
            if let Some((bd, bi)) = best {
                let bound = k as f64 * self.cell;
                if bd < bound * bound * (1.0 - 1e-9) {
                    return bi as usize;
                }
            }
            k += 1;
        }
    }
}

/// Colors each side point with the color of its nearest reference point.
pub fn nns_color_transfer(side_points: &[Point3], ref_points: &[Point3], ref_colors: &[Rgb]) -> Result<Vec<Rgb>> {
    ensure_input!(
        ref_points.len() == ref_colors.len(),
        "{} reference points but {} colors",
        ref_points.len(),
        ref_colors.len()
    );
    ensure_input!(side_points.iter().all(|p| p.iter().all(|v| v.is_finite())), "side points must be finite");
    let grid = NnsGrid::build(ref_points)?;
    Ok(side_points.iter().map(|q| ref_colors[grid.nearest(q)]).collect())
}

/// Pixel-aligned side image built from transferred colors.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoView {
    pub image: RgbImage,
    pub valid: Mask,
}

impl PseudoView {
    /// Colors at valid pixels in row-major order.
    pub fn valid_colors(&self) -> Vec<Rgb> {
        self.image
            .as_slice()
            .iter()
            .zip(self.valid.as_slice())
            .filter(|(_, &v)| v)
            .map(|(c, _)| *c)
            .collect()
    }
}

/// Writes `colors` (in valid-pixel order) back to their pixels; the rest gets `background`.
pub fn build_pseudo_view(side: &PointMap, colors: &[Rgb], background: Rgb) -> Result<PseudoView> {
    let n = side.valid_count();
    ensure_input!(colors.len() == n, "{} colors for {n} valid side pixels", colors.len());
    let mut image = Grid::filled(side.width(), side.height(), background);
    for (&(r, c), col) in side.valid_pixels().iter().zip(colors) {
        image.set(r, c, *col);
    }
    Ok(PseudoView {
        image,
        valid: side.valid.clone(),
    })
}

/// Reference set for the transfer: valid front points then valid back points,
/// each paired with its input-image color.
pub fn reference_set(front: &PointMap, front_image: &RgbImage, back: &PointMap, back_image: &RgbImage) -> Result<(Vec<Point3>, Vec<Rgb>)> {
    ensure_input!(
        front.points.same_dims(front_image) && back.points.same_dims(back_image),
        "reference pointmaps and images differ in resolution"
    );
    let mut pts = Vec::with_capacity(front.valid_count() + back.valid_count());
    let mut cols = Vec::with_capacity(pts.capacity());
    for (pm, img) in [(front, front_image), (back, back_image)] {
        for (r, c) in pm.valid_pixels() {
            pts.push(*pm.points.get(r, c));
            cols.push(*img.get(r, c));
        }
    }
    Ok((pts, cols))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn cloud(rng: &mut ChaCha8Rng, n: usize, spread: f64) -> Vec<Point3> {
        (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-spread..spread))).collect()
    }

    #[test]
    fn single_reference_colors_everything() {
        let out = nns_color_transfer(&[[1.0, 2.0, 3.0], [-5.0, 0.0, 0.0]], &[[0.0; 3]], &[[0.1, 0.2, 0.3]]).unwrap();
        assert_eq!(out, vec![[0.1, 0.2, 0.3]; 2]);
        assert!(nns_color_transfer(&[[0.0; 3]], &[], &[]).is_err());
    }

    #[test]
    fn coincident_point_takes_that_color() {
        let refs = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, 0.5, 0.5]];
        let cols = [[0.0; 3], [1.0; 3], [0.5; 3]];
        assert_eq!(nns_color_transfer(&[[0.5, 0.5, 0.5]], &refs, &cols).unwrap(), vec![[0.5; 3]]);
    }

    #[test]
    fn grid_matches_brute_force_on_random_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let refs = cloud(&mut rng, 5000, 1.0);
        let queries = cloud(&mut rng, 1000, 1.2);
        let grid = NnsGrid::build(&refs).unwrap();
        for q in &queries {
            assert_eq!(grid.nearest(q), nearest_brute_force(&refs, q).unwrap());
        }
    }

    #[test]
    fn ties_go_to_lowest_index() {
        // integer lattice with duplicates: many exact ties
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let refs: Vec<Point3> = (0..400).map(|_| std::array::from_fn(|_| rng.random_range(-3..=3) as f64 * 0.5)).collect();
        let grid = NnsGrid::build(&refs).unwrap();
        for _ in 0..500 {
            let q: Point3 = std::array::from_fn(|_| rng.random_range(-8..=8) as f64 * 0.25);
            assert_eq!(grid.nearest(&q), nearest_brute_force(&refs, &q).unwrap());
        }
        let dup = [[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        assert_eq!(NnsGrid::build(&dup).unwrap().nearest(&[0.0; 3]), 0);
    }

    #[test]
    fn far_queries_and_degenerate_sets() {
        let refs = vec![[0.0; 3]; 10];
        let grid = NnsGrid::build(&refs).unwrap();
        assert_eq!(grid.nearest(&[100.0, -3.0, 7.0]), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let refs = cloud(&mut rng, 300, 0.01);
        let grid = NnsGrid::build(&refs).unwrap();
        let q = [50.0, 50.0, -50.0];
        assert_eq!(grid.nearest(&q), nearest_brute_force(&refs, &q).unwrap());
    }

    #[test]
    fn pseudo_view_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let valid = Grid::from_fn(6, 5, |r, c| (r * 6 + c) % 4 == 1 && r * 6 + c < 28);
        let pts = Grid::from_fn(6, 5, |r, c| [r as f64, c as f64, 1.0]);
        let pm = PointMap::new(pts, valid).unwrap();
        assert_eq!(pm.valid_count(), 7);
        let colors: Vec<Rgb> = (0..7).map(|_| std::array::from_fn(|_| rng.random_range(0.0..1.0))).collect();
        let pv = build_pseudo_view(&pm, &colors, [0.5; 3]).unwrap();
        assert_eq!(pv.valid_colors(), colors);
        let non_bg = pv.image.as_slice().iter().filter(|&&p| p != [0.5; 3]).count();
        assert_eq!(non_bg, 7);
        assert!(build_pseudo_view(&pm, &colors[..6], [0.5; 3]).is_err());

        let empty = PointMap::empty(4, 4);
        let pv = build_pseudo_view(&empty, &[], [0.5; 3]).unwrap();
        assert!(pv.image.as_slice().iter().all(|&p| p == [0.5; 3]));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn transfer_is_idempotent(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let refs = cloud(&mut rng, 200, 1.0);
            let cols: Vec<Rgb> = (0..200).map(|_| std::array::from_fn(|_| rng.random_range(0.0..1.0))).collect();
            let side = cloud(&mut rng, 50, 1.0);
            let first = nns_color_transfer(&side, &refs, &cols).unwrap();
            let refs2: Vec<Point3> = refs.iter().chain(&side).copied().collect();
            let cols2: Vec<Rgb> = cols.iter().chain(&first).copied().collect();
            prop_assert_eq!(nns_color_transfer(&side, &refs2, &cols2).unwrap(), first.clone());
            // outputs are reference colors
            prop_assert!(first.iter().all(|c| cols.contains(c)));
        }

        #[test]
        fn argmin_is_scale_invariant(seed in 0u64..10_000, log_delta in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // dyadic coordinates so scaling by a power of two is exact
            let refs: Vec<Point3> = (0..300).map(|_| std::array::from_fn(|_| rng.random_range(-64..64) as f64 / 64.0)).collect();
            let side: Vec<Point3> = (0..40).map(|_| std::array::from_fn(|_| rng.random_range(-64..64) as f64 / 64.0)).collect();
            let delta = 2f64.powi(log_delta.round() as i32);
            let g1 = NnsGrid::build(&refs).unwrap();
            let scaled: Vec<Point3> = refs.iter().map(|p| p.map(|v| v * delta)).collect();
            let g2 = NnsGrid::build(&scaled).unwrap();
            for q in &side {
                prop_assert_eq!(g1.nearest(q), g2.nearest(&q.map(|v| v * delta)));
            }
            // a general factor keeps the argmin away from exact ties
            let delta = log_delta.exp();
            let refs: Vec<Point3> = cloud(&mut rng, 300, 1.0);
            let g1 = NnsGrid::build(&refs).unwrap();
            let g2 = NnsGrid::build(&refs.iter().map(|p| p.map(|v| v * delta)).collect::<Vec<_>>()).unwrap();
            for q in &cloud(&mut rng, 40, 1.0) {
                prop_assert_eq!(g1.nearest(q), g2.nearest(&q.map(|v| v * delta)));
            }
        }
    }
}
