use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio;
use crate::tensor::Tensor;

/// Parameters of a centered affine warp.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub rotation_deg: f64,
    /// Horizontal shear factor.
    pub shear: f64,
    pub scale: f64,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        rotation_deg: 0.0,
        shear: 0.0,
        scale: 1.0,
    };

    /// Forward matrix `R(θ) · Shear · scale`.
    fn matrix(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let k = self.scale;
        // [c -s; s c] * [1 sh; 0 1] * k
        [
            [c * k, (c * self.shear - s) * k],
            [s * k, (s * self.shear + c) * k],
        ]
    }
}

/// Sampling ranges for random affine perturbations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineRange {
    pub max_rotation_deg: f64,
    pub max_shear: f64,
    /// Scale is drawn log-uniformly from `[1/max_scale, max_scale]`.
    pub max_scale: f64,
}

impl Default for AffineRange {
    fn default() -> Self {
        Self {
            max_rotation_deg: 30.0,
            max_shear: 0.2,
            max_scale: 1.25,
        }
    }
}

impl AffineRange {
    pub const NONE: AffineRange = AffineRange {
        max_rotation_deg: 0.0,
        max_shear: 0.0,
        max_scale: 1.0,
    };

    pub fn sample<R: Rng>(&self, rng: &mut R) -> AffineParams {
        let sym = |rng: &mut R, m: f64| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
        let rotation_deg = sym(rng, self.max_rotation_deg);
        let shear = sym(rng, self.max_shear);
        let scale = sym(rng, self.max_scale.ln()).exp();
        AffineParams {
            rotation_deg,
            shear,
            scale,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Perturbation {
    Affine(AffineParams),
    /// Keep the central `s·S` square and upsample it back to `S`.
    Scale(f64),
}

/// Index into `[0, n)` with mirror reflection about the edge pixels.
fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m < n as i64 { m } else { period - m }) as usize
}

/// Warps a `(C, H, W)` image about its center with bilinear sampling and
/// reflection outside the borders.
pub fn affine_warp(image: &Tensor<f32>, params: &AffineParams) -> Result<Tensor<f32>> {
    let (c, h, w) = match image.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::Shape(format!("affine warp expects (C, H, W), got {s:?}"))),
    };
    let m = params.matrix();
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if !det.is_finite() || det.abs() < 1e-12 {
        return Err(Error::InvalidArgument(format!("singular affine transform {params:?}")));
    }
    let inv = [
        [m[1][1] / det, -m[0][1] / det],
        [-m[1][0] / det, m[0][0] / det],
    ];
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let d = image.data();
    let mut out = vec![0.0f32; c * h * w];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = inv[0][0] * dx + inv[0][1] * dy + cx;
            let sy = inv[1][0] * dx + inv[1][1] * dy + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (xa, xb) = (reflect(x0 as i64, w), reflect(x0 as i64 + 1, w));
            let (ya, yb) = (reflect(y0 as i64, h), reflect(y0 as i64 + 1, h));
            for ch in 0..c {
                let p = &d[ch * h * w..(ch + 1) * h * w];
                let v = |yy: usize, xx: usize| p[yy * w + xx] as f64;
                let top = v(ya, xa) * (1.0 - fx) + v(ya, xb) * fx;
                let bot = v(yb, xa) * (1.0 - fx) + v(yb, xb) * fx;
                out[ch * h * w + y * w + x] = (top * (1.0 - fy) + bot * fy) as f32;
            }
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}

/// Side of the central crop kept by a scale perturbation.
pub fn scale_crop_side(size: usize, s: f64) -> Result<usize> {
    let side = s * size as f64;
    if !(s > 0.0 && s <= 1.0) || (side - side.round()).abs() > 1e-9 || side.round() < 1.0 {
        return Err(Error::InvalidArgument(format!(
            "scale {s} does not give an integer crop of a {size}-pixel image"
        )));
    }
    Ok(side.round() as usize)
}

pub fn perturb_reference(reference: &Tensor<f32>, kind: &Perturbation) -> Result<Tensor<f32>> {
    match *kind {
        Perturbation::Affine(p) => affine_warp(reference, &p),
        Perturbation::Scale(s) => {
            let (c, h, w) = match reference.shape() {
                [c, h, w] if h == w => (*c, *h, *w),
                sh => return Err(Error::Shape(format!("scale perturbation expects (C, S, S), got {sh:?}"))),
            };
            let side = scale_crop_side(h, s)?;
            let off = (h - side) / 2;
            let d = reference.data();
            let mut cropped = Vec::with_capacity(c * side * side);
            for ch in 0..c {
                for y in off..off + side {
                    let row = ch * h * w + y * w;
                    cropped.extend_from_slice(&d[row + off..row + off + side]);
                }
            }
            imageio::resize(&Tensor::from_vec(&[c, side, side], cropped)?, h, w)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::procedural_bank;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image() -> Tensor<f32> {
        let bank = procedural_bank(6, 1, 16, 4).unwrap();
        crate::episodes::crop(bank.image(0, 0), 16, (0, 0), false).unwrap()
    }

    #[test]
    fn identity_perturbations_leave_reference_unchanged() {
        let r = image();
        let a = perturb_reference(&r, &Perturbation::Affine(AffineParams::IDENTITY)).unwrap();
        assert!(a.max_abs_diff(&r).unwrap() <= 1e-6);
        let s = perturb_reference(&r, &Perturbation::Scale(1.0)).unwrap();
        assert_eq!(s, r);
        let sampled = AffineRange::NONE.sample(&mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(sampled, AffineParams::IDENTITY);
    }

    #[test]
    fn quarter_scale_crops_sixty_four_of_two_fifty_six() {
        assert_eq!(scale_crop_side(256, 0.25).unwrap(), 64);
        assert_eq!(scale_crop_side(256, 0.5).unwrap(), 128);
        assert!(scale_crop_side(256, 0.3).is_err());
        assert!(scale_crop_side(256, 1.5).is_err());
        assert!(scale_crop_side(256, 0.0).is_err());
    }

    #[test]
    fn half_scale_samples_only_the_central_crop() {
        let data: Vec<f32> = (0..3 * 8 * 8).map(|i| (i % 64) as f32 / 64.0).collect();
        let r = Tensor::from_vec(&[3, 8, 8], data).unwrap();
        let s = perturb_reference(&r, &Perturbation::Scale(0.5)).unwrap();
        assert_eq!(s.shape(), &[3, 8, 8]);
        let min = 2.0 * 8.0 + 2.0;
        let max = 5.0 * 8.0 + 5.0;
        for &v in s.data() {
            assert!(v * 64.0 >= min - 1e-4 && v * 64.0 <= max + 1e-4);
        }
    }

    #[test]
    fn rotation_by_ninety_degrees_permutes_pixels() {
        let data: Vec<f32> = (0..25).map(|i| i as f32).collect();
        let r = Tensor::from_vec(&[1, 5, 5], data).unwrap();
        let p = AffineParams {
            rotation_deg: 90.0,
            shear: 0.0,
            scale: 1.0,
        };
        let out = affine_warp(&r, &p).unwrap();
        let mut a: Vec<i64> = out.data().iter().map(|v| v.round() as i64).collect();
        a.sort();
        assert_eq!(a, (0..25).collect::<Vec<_>>());
        for y in 0..5 {
            for x in 0..5 {
                // forward map sends source (sx, sy) to (2 - (sy - 2), ...) about center 2
                let (dx, dy) = (x as f64 - 2.0, y as f64 - 2.0);
                let (sx, sy) = ((dy + 2.0).round() as usize, (-dx + 2.0).round() as usize);
                assert!((out.data()[y * 5 + x] - r.data()[sy * 5 + sx]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn random_affine_within_ranges_and_changes_image() {
        let r = image();
        let range = AffineRange::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let p = range.sample(&mut rng);
            assert!(p.rotation_deg.abs() <= 30.0);
            assert!(p.shear.abs() <= 0.2);
            assert!(p.scale >= 0.8 - 1e-12 && p.scale <= 1.25 + 1e-12);
            let out = perturb_reference(&r, &Perturbation::Affine(p)).unwrap();
            assert!(out.is_finite());
            assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn reflection_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(-9, 5), 1);
        assert_eq!(reflect(7, 1), 0);
    }
}
