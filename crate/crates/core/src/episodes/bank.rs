use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imageio;
use crate::tensor::Tensor;

/// Class-indexed texture images, each a `(3, H, W)` tensor in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextureBank {
    classes: Vec<String>,
    images: Vec<Vec<Tensor<f32>>>,
}

impl TextureBank {
    pub fn new(classes: Vec<String>, images: Vec<Vec<Tensor<f32>>>) -> Result<Self> {
        if classes.len() != images.len() {
            return Err(Error::Bank("one image list per class required".into()));
        }
        for (i, c) in classes.iter().enumerate() {
            if classes[..i].contains(c) {
                return Err(Error::Bank(format!("duplicate class `{c}`")));
            }
            if images[i].is_empty() {
                return Err(Error::Bank(format!("class `{c}` has no images")));
            }
            for img in &images[i] {
                if img.shape().len() != 3 || img.shape()[0] != 3 {
                    return Err(Error::Bank(format!(
                        "class `{c}` image has shape {:?}",
                        img.shape()
                    )));
                }
            }
        }
        Ok(Self { classes, images })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn images(&self, class: usize) -> &[Tensor<f32>] {
        &self.images[class]
    }

    pub fn image(&self, class: usize, index: usize) -> &Tensor<f32> {
        &self.images[class][index]
    }

    /// Smallest image side across the bank.
    pub fn min_side(&self) -> usize {
        self.images
            .iter()
            .flatten()
            .map(|t| t.shape()[1].min(t.shape()[2]))
            .min()
            .unwrap_or(0)
    }

    /// Loads `<root>/<class>/*.png`; class and file order are lexicographic.
    /// Images with a side below `min_size` are upscaled so that their shorter
    /// side equals `min_size`.
    pub fn load_dir(root: &Path, min_size: usize) -> Result<Self> {
        let mut class_dirs: Vec<_> = fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_dir())
            .collect();
        class_dirs.sort();
        let mut classes = Vec::new();
        let mut images = Vec::new();
        for dir in class_dirs {
            let mut files: Vec<_> = fs::read_dir(&dir)
                .map_err(|e| Error::io(&dir, e))?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                .collect();
            files.sort();
            if files.is_empty() {
                continue;
            }
            let mut list = Vec::with_capacity(files.len());
            for f in files {
                let img: Tensor<f32> = imageio::load_rgb(&f)?;
                let (h, w) = (img.shape()[1], img.shape()[2]);
                let side = h.min(w);
                list.push(if side < min_size {
                    let scale = min_size as f64 / side as f64;
                    let nh = ((h as f64 * scale).round() as usize).max(min_size);
                    let nw = ((w as f64 * scale).round() as usize).max(min_size);
                    imageio::resize(&img, nh, nw)?
                } else {
                    img
                });
            }
            classes.push(dir.file_name().unwrap().to_string_lossy().into_owned());
            images.push(list);
        }
        if classes.is_empty() {
            return Err(Error::Bank(format!("no class directories with PNGs under {}", root.display())));
        }
        Self::new(classes, images)
    }

    /// Writes `<root>/<class>/<index>.png`.
    pub fn save_dir(&self, root: &Path) -> Result<()> {
        for (class, list) in self.classes.iter().zip(&self.images) {
            let dir = root.join(class);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (i, img) in list.iter().enumerate() {
                imageio::save_rgb(img, &dir.join(format!("{i:03}.png")))?;
            }
        }
        Ok(())
    }
}

/// Parametric texture families used by [`procedural_bank`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Stripes,
    Dots,
    Checker,
    Blobs,
    Zigzag,
    Grid,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::Stripes,
        Family::Dots,
        Family::Checker,
        Family::Blobs,
        Family::Zigzag,
        Family::Grid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Stripes => "stripes",
            Family::Dots => "dots",
            Family::Checker => "checker",
            Family::Blobs => "blobs",
            Family::Zigzag => "zigzag",
            Family::Grid => "grid",
        }
    }
}

/// Class-level texture parameters; images jitter around them.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassStyle {
    pub family: Family,
    /// Orientation in degrees.
    pub angle: f64,
    /// Pattern period in pixels.
    pub period: f64,
    pub foreground: [f64; 3],
    pub background: [f64; 3],
}

/// Maximum per-image deviation of the orientation from the class angle.
pub const ANGLE_JITTER_DEG: f64 = 2.5;
const COLOR_JITTER: f64 = 0.06;
const PERIOD_JITTER: f64 = 0.08;

fn class_style(class: usize, rng: &mut ChaCha8Rng) -> ClassStyle {
    let family = Family::ALL[class % Family::ALL.len()];
    let round = class / Family::ALL.len();
    // classes of one family differ in orientation, scale and palette
    let angle = (round as f64 * 67.0 + rng.gen_range(0.0..20.0)) % 180.0;
    let period = 6.0 + ((round * 5) % 9) as f64 + rng.gen_range(0.0..2.0);
    let hue = rng.gen_range(0.0..1.0);
    let foreground = hsv(hue, rng.gen_range(0.5..0.9), rng.gen_range(0.75..0.95));
    let background = hsv(
        (hue + rng.gen_range(0.3..0.7)) % 1.0,
        rng.gen_range(0.2..0.6),
        rng.gen_range(0.15..0.45),
    );
    ClassStyle {
        family,
        angle,
        period,
        foreground,
        background,
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Concrete parameters of one texture image.
#[derive(Clone, Debug)]
struct ImageStyle {
    family: Family,
    angle: f64,
    period: f64,
    phase: (f64, f64),
    fg: [f64; 3],
    bg: [f64; 3],
    noise_seed: u64,
}

fn image_style(style: &ClassStyle, rng: &mut ChaCha8Rng) -> ImageStyle {
    let jitter = |c: [f64; 3], rng: &mut ChaCha8Rng| {
        c.map(|v| (v + rng.gen_range(-COLOR_JITTER..COLOR_JITTER)).clamp(0.0, 1.0))
    };
    ImageStyle {
        family: style.family,
        angle: style.angle + rng.gen_range(-ANGLE_JITTER_DEG..ANGLE_JITTER_DEG),
        period: style.period * (1.0 + rng.gen_range(-PERIOD_JITTER..PERIOD_JITTER)),
        phase: (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)),
        fg: jitter(style.foreground, rng),
        bg: jitter(style.background, rng),
        noise_seed: rng.gen(),
    }
}

/// Smooth value noise on a lattice of the given cell size.
struct ValueNoise {
    cells: usize,
    lattice: Vec<f64>,
    cell: f64,
}

impl ValueNoise {
    fn new(size: usize, cell: f64, seed: u64) -> Self {
        let cells = (size as f64 / cell).ceil() as usize + 2;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            cells,
            lattice: (0..cells * cells).map(|_| rng.gen_range(0.0..1.0)).collect(),
            cell,
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let (gx, gy) = (x / self.cell, y / self.cell);
        let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (fx, fy) = (smooth(gx - ix as f64), smooth(gy - iy as f64));
        let l = |i: usize, j: usize| self.lattice[(j % self.cells) * self.cells + i % self.cells];
        let top = l(ix, iy) * (1.0 - fx) + l(ix + 1, iy) * fx;
        let bot = l(ix, iy + 1) * (1.0 - fx) + l(ix + 1, iy + 1) * fx;
        top * (1.0 - fy) + bot * fy
    }
}

fn render(style: &ImageStyle, size: usize) -> Tensor<f32> {
    let theta = style.angle.to_radians();
    let (c, s) = (theta.cos(), theta.sin());
    let p = style.period;
    let (px, py) = (style.phase.0 * p, style.phase.1 * p);
    let noise = ValueNoise::new(size, p * 1.5, style.noise_seed);
    let fine = ValueNoise::new(size, p * 0.5, style.noise_seed ^ 0x9e37_79b9);
    let soft = |d: f64| (0.5 - d).clamp(0.0, 1.0);
    let mut data = vec![0.0f32; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64, y as f64);
            // pattern coordinates rotated into the class orientation
            let u = c * fx + s * fy + px;
            let v = -s * fx + c * fy + py;
            let t = match style.family {
                Family::Stripes => (0.5 + 1.5 * (2.0 * PI * u / p).sin()).clamp(0.0, 1.0),
                Family::Dots => {
                    let du = u.rem_euclid(p) - p / 2.0;
                    let dv = v.rem_euclid(p) - p / 2.0;
                    soft((du * du + dv * dv).sqrt() - 0.3 * p)
                }
                Family::Checker => {
                    let k = (u / p).floor() as i64 + (v / p).floor() as i64;
                    k.rem_euclid(2) as f64
                }
                Family::Blobs => {
                    let n = 0.7 * noise.at(fx + px, fy + py) + 0.3 * fine.at(fx, fy);
                    ((n - 0.5) * 6.0 + 0.5).clamp(0.0, 1.0)
                }
                Family::Zigzag => {
                    let tri = ((v / p).rem_euclid(1.0) - 0.5).abs() * 2.0;
                    (0.5 + 1.5 * (2.0 * PI * (u + tri * p * 0.6) / p).sin()).clamp(0.0, 1.0)
                }
                Family::Grid => {
                    let to_line = |a: f64| {
                        let r = a.rem_euclid(p);
                        r.min(p - r)
                    };
                    soft(to_line(u).min(to_line(v)) - 0.12 * p)
                }
            };
            let grain = 0.04 * (fine.at(fx * 1.7, fy * 1.7) - 0.5);
            for ch in 0..3 {
                let val = style.bg[ch] + t * (style.fg[ch] - style.bg[ch]) + grain;
                // quantize to 8 bits so images survive PNG round trips exactly
                let q = (val.clamp(0.0, 1.0) * 255.0).round() / 255.0;
                data[ch * size * size + y * size + x] = q as f32;
            }
        }
    }
    Tensor::from_vec(&[3, size, size], data).expect("sized buffer")
}

/// Class styles of a procedural bank, in class order.
pub fn procedural_styles(n_classes: usize, seed: u64) -> Vec<ClassStyle> {
    (0..n_classes)
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x5bd1_e995u64.wrapping_mul(c as u64 + 1)));
            class_style(c, &mut rng)
        })
        .collect()
}

/// Synthetic texture bank: `n_classes` classes cycling through the six
/// [`Family`] generators, each with a class-specific orientation, period and
/// palette, and `images_per_class` jittered renderings per class. Images are
/// `3S/2` pixels square so `S`-sized crops vary.
pub fn procedural_bank(n_classes: usize, images_per_class: usize, size: usize, seed: u64) -> Result<TextureBank> {
    if n_classes < Family::ALL.len() {
        return Err(Error::Bank(format!(
            "procedural bank needs at least {} classes, got {n_classes}",
            Family::ALL.len()
        )));
    }
    if images_per_class == 0 || size == 0 {
        return Err(Error::Bank("empty procedural bank".into()));
    }
    let tex_size = size + size / 2;
    let styles = procedural_styles(n_classes, seed);
    let mut classes = Vec::with_capacity(n_classes);
    let mut images = Vec::with_capacity(n_classes);
    for (c, style) in styles.iter().enumerate() {
        classes.push(format!("{}-{c:02}", style.family.name()));
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000 + c as u64));
        images.push(
            (0..images_per_class)
                .map(|_| render(&image_style(style, &mut rng), tex_size))
                .collect(),
        );
    }
    TextureBank::new(classes, images)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn procedural_bank_is_deterministic() {
        let a = procedural_bank(6, 2, 16, 5).unwrap();
        let b = procedural_bank(6, 2, 16, 5).unwrap();
        assert_eq!(a, b);
        let c = procedural_bank(6, 2, 16, 6).unwrap();
        assert_ne!(a, c);
        assert_eq!(a.min_side(), 24);
    }

    #[test]
    fn too_few_classes_rejected() {
        assert!(procedural_bank(5, 2, 16, 0).is_err());
    }

    #[test]
    fn stripe_images_share_orientation_but_differ() {
        let styles = procedural_styles(12, 3);
        let stripes = &styles[0];
        assert_eq!(stripes.family, Family::Stripes);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = image_style(stripes, &mut rng);
        let b = image_style(stripes, &mut rng);
        assert!((a.angle - b.angle).abs() <= 5.0);
        assert!(a.phase != b.phase || a.fg != b.fg);
        assert_ne!(render(&a, 20), render(&b, 20));
    }

    #[test]
    fn values_are_8bit_quantized() {
        let bank = procedural_bank(6, 1, 8, 1).unwrap();
        for c in 0..6 {
            for &v in bank.image(c, 0).data() {
                let k = v * 255.0;
                assert!((k - k.round()).abs() < 1e-3 && (0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn bank_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let bank = procedural_bank(6, 2, 8, 9).unwrap();
        bank.save_dir(dir.path()).unwrap();
        let loaded = TextureBank::load_dir(dir.path(), 8).unwrap();
        let mut names = bank.classes().to_vec();
        names.sort();
        assert_eq!(loaded.classes(), names.as_slice());
        for name in bank.classes() {
            let (i, j) = (bank.class_index(name).unwrap(), loaded.class_index(name).unwrap());
            assert_eq!(bank.images(i), loaded.images(j));
        }
    }

    #[test]
    fn small_images_are_upscaled_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let bank = TextureBank::new(vec!["a".into()], vec![vec![Tensor::full(&[3, 4, 6], 0.5)]]).unwrap();
        bank.save_dir(dir.path()).unwrap();
        let loaded = TextureBank::load_dir(dir.path(), 8).unwrap();
        assert_eq!(loaded.image(0, 0).shape(), &[3, 8, 12]);
    }

    #[test]
    fn duplicate_classes_rejected() {
        let img = Tensor::zeros(&[3, 4, 4]);
        let r = TextureBank::new(vec!["a".into(), "a".into()], vec![vec![img.clone()], vec![img]]);
        assert!(r.is_err());
    }
}
