//! PSNR and SSIM over rectangular crops, plus the SSIM gradient used for training.

use crate::error::{ensure_input, Result};
use crate::image::{Grid, Mask, RgbImage};

/// Reported by [`psnr`] when the two crops are identical.
pub const PSNR_IDENTICAL: f64 = f64::INFINITY;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Inclusive pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Crop {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

impl Crop {
    pub fn full(width: usize, height: usize) -> Option<Crop> {
        (width > 0 && height > 0).then(|| Crop {
            row0: 0,
            col0: 0,
            row1: height - 1,
            col1: width - 1,
        })
    }

    /// Bounding box of the mask grown by `margin` pixels and clipped to the image.
    pub fn from_mask(mask: &Mask, margin: usize) -> Option<Crop> {
        let (r0, c0, r1, c1) = mask.bounding_box()?;
        Some(Crop {
            row0: r0.saturating_sub(margin),
            col0: c0.saturating_sub(margin),
            row1: (r1 + margin).min(mask.height() - 1),
            col1: (c1 + margin).min(mask.width() - 1),
        })
    }

    pub fn width(&self) -> usize {
        self.col1 + 1 - self.col0
    }

    pub fn height(&self) -> usize {
        self.row1 + 1 - self.row0
    }

    fn check(&self, a: &RgbImage, b: &RgbImage) -> Result<()> {
        ensure_input!(a.same_dims(b), "images differ in size: {:?} vs {:?}", a.dims(), b.dims());
        ensure_input!(
            self.row0 <= self.row1 && self.col0 <= self.col1 && self.row1 < a.height() && self.col1 < a.width(),
            "crop {self:?} is empty or outside a {}x{} image",
            a.width(),
            a.height()
        );
        Ok(())
    }

    pub fn apply(&self, img: &RgbImage) -> RgbImage {
        Grid::from_fn(self.width(), self.height(), |r, c| *img.get(self.row0 + r, self.col0 + c))
    }
}

/// `10·log10(1/MSE)` over the crop; [`PSNR_IDENTICAL`] when MSE is zero.
pub fn psnr(a: &RgbImage, b: &RgbImage, crop: &Crop) -> Result<f64> {
    crop.check(a, b)?;
    let mut sum = 0.0;
    for r in crop.row0..=crop.row1 {
        for c in crop.col0..=crop.col1 {
            let (x, y) = (a.get(r, c), b.get(r, c));
            for ch in 0..3 {
                let d = x[ch] - y[ch];
                sum += d * d;
            }
        }
    }
    let mse = sum / (3 * crop.width() * crop.height()) as f64;
    Ok(if mse == 0.0 { PSNR_IDENTICAL } else { -10.0 * mse.log10() })
}

/// Mean SSIM of the two crops (each crop treated as a standalone image).
pub fn ssim(a: &RgbImage, b: &RgbImage, crop: &Crop) -> Result<f64> {
    crop.check(a, b)?;
    Ok(ssim_map(&crop.apply(a), &crop.apply(b), false).0)
}

/// Mean SSIM over the full images and its gradient with respect to `x`.
pub fn ssim_with_grad(x: &RgbImage, y: &RgbImage) -> Result<(f64, RgbImage)> {
    ensure_input!(x.same_dims(y) && !x.is_empty(), "ssim needs two non-empty images of equal size");
    let (v, g) = ssim_map(x, y, true);
    Ok((v, g.expect("gradient requested")))
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut k: [f64; SSIM_WINDOW] = std::array::from_fn(|i| {
        let d = i as f64 - half;
        (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
    });
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian filter with zero padding and same-size output.
/// The window is symmetric, so this is also its own adjoint.
fn blur(plane: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let half = SSIM_WINDOW as isize / 2;
    let mut tmp = vec![0.0; w * h];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let cc = c as isize + k as isize - half;
                if cc >= 0 && (cc as usize) < w {
                    acc += t * plane[r * w + cc as usize];
                }
            }
            tmp[r * w + c] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let rr = r as isize + k as isize - half;
                if rr >= 0 && (rr as usize) < h {
                    acc += t * tmp[rr as usize * w + c];
                }
            }
            out[r * w + c] = acc;
        }
    }
    out
}

fn ssim_map(x: &RgbImage, y: &RgbImage, want_grad: bool) -> (f64, Option<RgbImage>) {
    let (w, h) = x.dims();
    let n = w * h;
    let taps = gaussian_taps();
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Grid::filled(w, h, [0.0; 3]));
    // each pixel of each channel contributes 1/(3n) to the mean
    let scale = 1.0 / (3 * n) as f64;
    for ch in 0..3 {
        let xs: Vec<f64> = x.as_slice().iter().map(|p| p[ch]).collect();
        let ys: Vec<f64> = y.as_slice().iter().map(|p| p[ch]).collect();
        let sq = |v: &[f64], u: &[f64]| v.iter().zip(u).map(|(a, b)| a * b).collect::<Vec<_>>();
        let mu_x = blur(&xs, w, h, &taps);
        let mu_y = blur(&ys, w, h, &taps);
        let e_xx = blur(&sq(&xs, &xs), w, h, &taps);
        let e_yy = blur(&sq(&ys, &ys), w, h, &taps);
        let e_xy = blur(&sq(&xs, &ys), w, h, &taps);
        let mut g_mu = vec![0.0; n];
        let mut g_xx = vec![0.0; n];
        let mut g_xy = vec![0.0; n];
        for p in 0..n {
            let (mx, my) = (mu_x[p], mu_y[p]);
            let a1 = 2.0 * mx * my + C1;
            let a2 = 2.0 * (e_xy[p] - mx * my) + C2;
            let b1 = mx * mx + my * my + C1;
            let b2 = (e_xx[p] - mx * mx) + (e_yy[p] - my * my) + C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                let d = b1 * b2;
                g_mu[p] = scale * ((2.0 * my * a2 - 2.0 * my * a1) / d - s * (2.0 * mx / b1 - 2.0 * mx / b2));
                g_xx[p] = scale * (-s / b2);
                g_xy[p] = scale * (2.0 * a1 / d);
            }
        }
        if let Some(g) = grad.as_mut() {
            let f_mu = blur(&g_mu, w, h, &taps);
            let f_xx = blur(&g_xx, w, h, &taps);
            let f_xy = blur(&g_xy, w, h, &taps);
            for (p, px) in g.as_mut_slice().iter_mut().enumerate() {
                px[ch] = f_mu[p] + 2.0 * xs[p] * f_xx[p] + ys[p] * f_xy[p];
            }
        }
    }
    (total * scale, grad)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> RgbImage {
        Grid::from_fn(w, h, |_, _| std::array::from_fn(|_| rng.random_range(0.0..1.0)))
    }

    #[test]
    fn psnr_closed_forms() {
        let a = Grid::filled(8, 8, [0.5; 3]);
        let full = Crop::full(8, 8).unwrap();
        assert_eq!(psnr(&a, &a, &full).unwrap(), PSNR_IDENTICAL);
        let b = Grid::filled(8, 8, [0.4; 3]);
        assert!((psnr(&a, &b, &full).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let (a, b) = (random_image(&mut rng, 16, 16), random_image(&mut rng, 16, 16));
            let crop = Crop { row0: 2, col0: 3, row1: 13, col1: 10 };
            let mut se = 0.0;
            let mut count = 0.0;
            for r in 2..=13 {
                for c in 3..=10 {
                    for k in 0..3 {
                        se += (a.get(r, c)[k] - b.get(r, c)[k]).powi(2);
                        count += 1.0;
                    }
                }
            }
            let oracle = 10.0 * (1.0 / (se / count)).log10();
            assert!((psnr(&a, &b, &crop).unwrap() - oracle).abs() < 1e-9);
        }
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let base = random_image(&mut rng, 16, 16).map(|p| p.map(|v| 0.2 + 0.6 * v));
        let signs: Vec<[f64; 3]> = (0..256).map(|_| std::array::from_fn(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })).collect();
        let full = Crop::full(16, 16).unwrap();
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.02, 0.05, 0.1] {
            let noisy = Grid::from_vec(16, 16, base.as_slice().iter().zip(&signs).map(|(p, s)| [0, 1, 2].map(|k| p[k] + amp * s[k])).collect()).unwrap();
            let v = psnr(&noisy, &base, &full).unwrap();
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn empty_or_outside_crop_is_rejected() {
        let a = Grid::filled(4, 4, [0.0; 3]);
        assert!(psnr(&a, &a, &Crop { row0: 2, col0: 0, row1: 1, col1: 3 }).is_err());
        assert!(ssim(&a, &a, &Crop { row0: 0, col0: 0, row1: 4, col1: 3 }).is_err());
        assert!(Crop::from_mask(&Grid::filled(4, 4, false), 5).is_none());
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_image(&mut rng, 20, 12);
        let v = ssim(&a, &a, &Crop::full(20, 12).unwrap()).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
        let (v, g) = ssim_with_grad(&a, &a).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
        assert!(g.as_slice().iter().all(|p| p.iter().all(|x| x.abs() < 1e-9)));
    }

    #[test]
    fn ssim_matches_direct_window_oracle() {
        // Per-pixel weighted statistics evaluated without separability.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (a, b) = (random_image(&mut rng, 13, 9), random_image(&mut rng, 13, 9));
        let taps = gaussian_taps();
        let mut total = 0.0;
        for ch in 0..3 {
            for r in 0..9i64 {
                for c in 0..13i64 {
                    let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in -5i64..=5 {
                        for j in -5i64..=5 {
                            let (rr, cc) = (r + i, c + j);
                            if !(0..9).contains(&rr) || !(0..13).contains(&cc) {
                                continue;
                            }
                            let wgt = taps[(i + 5) as usize] * taps[(j + 5) as usize];
                            let (x, y) = (a.get(rr as usize, cc as usize)[ch], b.get(rr as usize, cc as usize)[ch]);
                            mx += wgt * x;
                            my += wgt * y;
                            xx += wgt * x * x;
                            yy += wgt * y * y;
                            xy += wgt * x * y;
                        }
                    }
                    let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
                    total += (2.0 * mx * my + C1) * (2.0 * cxy + C2) / ((mx * mx + my * my + C1) * (vx + vy + C2));
                }
            }
        }
        let oracle = total / (3.0 * 9.0 * 13.0);
        assert!((ssim(&a, &b, &Crop::full(13, 9).unwrap()).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (x, y) = (random_image(&mut rng, 12, 10), random_image(&mut rng, 12, 10));
        let (_, g) = ssim_with_grad(&x, &y).unwrap();
        let h = 1e-5;
        for _ in 0..25 {
            let (r, c, ch) = (rng.random_range(0..10), rng.random_range(0..12), rng.random_range(0..3));
            let (mut p, mut m) = (x.clone(), x.clone());
            p.get_mut(r, c)[ch] += h;
            m.get_mut(r, c)[ch] -= h;
            let num = (ssim_with_grad(&p, &y).unwrap().0 - ssim_with_grad(&m, &y).unwrap().0) / (2.0 * h);
            let ana = g.get(r, c)[ch];
            assert!((num - ana).abs() <= 1e-6 * num.abs().max(ana.abs()).max(1e-3), "{num} vs {ana}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn padding_outside_crop_is_ignored(seed in 0u64..1000, pad in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b) = (random_image(&mut rng, 10, 8), random_image(&mut rng, 10, 8));
            let bg = [rng.random_range(0.0..1.0), 0.5, 0.1];
            let grow = |img: &RgbImage| Grid::from_fn(10 + 2 * pad, 8 + 2 * pad, |r, c| {
                if r >= pad && r < pad + 8 && c >= pad && c < pad + 10 { *img.get(r - pad, c - pad) } else { bg }
            });
            let crop = Crop { row0: pad, col0: pad, row1: pad + 7, col1: pad + 9 };
            let full = Crop::full(10, 8).unwrap();
            prop_assert_eq!(psnr(&grow(&a), &grow(&b), &crop).unwrap(), psnr(&a, &b, &full).unwrap());
            prop_assert_eq!(ssim(&grow(&a), &grow(&b), &crop).unwrap(), ssim(&a, &b, &full).unwrap());
        }
    }
}
