use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::episodes::TextureBank;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_REGIONS: usize = 2;
pub const MAX_REGIONS: usize = 5;

/// Where a region's pixels come from: an `S×S` window of a bank image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropSource {
    pub class: String,
    pub image: usize,
    /// Top-left corner `(x, y)` of the crop.
    pub offset: (usize, usize),
    pub flip: bool,
}

/// Full description of a synthesized query image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollageSpec {
    pub size: usize,
    /// Voronoi seeds as `(x, y)` pixel coordinates, one per region.
    pub seeds: Vec<(usize, usize)>,
    /// Texture source of each region; its class is the region's class.
    pub regions: Vec<CropSource>,
    pub rng_seed: u64,
}

impl CollageSpec {
    pub fn k(&self) -> usize {
        self.seeds.len()
    }

    pub fn class_assignment(&self) -> Vec<&str> {
        self.regions.iter().map(|r| r.class.as_str()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if !(MIN_REGIONS..=MAX_REGIONS).contains(&k) || self.regions.len() != k {
            return Err(Error::InvalidArgument(format!("collage with {k} regions")));
        }
        for (i, s) in self.seeds.iter().enumerate() {
            if s.0 >= self.size || s.1 >= self.size {
                return Err(Error::InvalidArgument(format!("seed {s:?} outside the canvas")));
            }
            if self.seeds[..i].contains(s) {
                return Err(Error::InvalidArgument(format!("duplicate seed {s:?}")));
            }
        }
        Ok(())
    }
}

/// Region index of every pixel (row-major): the nearest seed in Euclidean
/// distance, ties going to the lower seed index.
pub fn voronoi_labels(size: usize, seeds: &[(usize, usize)]) -> Vec<usize> {
    let mut labels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let mut best = 0;
            let mut best_d = usize::MAX;
            for (i, &(sx, sy)) in seeds.iter().enumerate() {
                let d = sx.abs_diff(x).pow(2) + sy.abs_diff(y).pow(2);
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            labels.push(best);
        }
    }
    labels
}

/// `S×S` crop of a `(3, H, W)` image, optionally mirrored horizontally.
pub fn crop(image: &Tensor<f32>, size: usize, offset: (usize, usize), flip: bool) -> Result<Tensor<f32>> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let (ox, oy) = offset;
    if ox + size > w || oy + size > h {
        return Err(Error::InvalidArgument(format!(
            "crop {size}x{size} at {offset:?} exceeds {h}x{w} image"
        )));
    }
    let d = image.data();
    let mut out = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        for y in 0..size {
            let row = &d[c * h * w + (oy + y) * w + ox..c * h * w + (oy + y) * w + ox + size];
            if flip {
                out.extend(row.iter().rev());
            } else {
                out.extend_from_slice(row);
            }
        }
    }
    Tensor::from_vec(&[3, size, size], out)
}

pub(crate) fn random_crop_source<R: Rng>(
    bank: &TextureBank,
    class: usize,
    size: usize,
    allow_flip: bool,
    rng: &mut R,
) -> Result<CropSource> {
    let n = bank.images(class).len();
    let image = rng.gen_range(0..n);
    let img = bank.image(class, image);
    let (h, w) = (img.shape()[1], img.shape()[2]);
    if h < size || w < size {
        return Err(Error::Bank(format!(
            "image {image} of `{}` is {h}x{w}, smaller than {size}",
            bank.classes()[class]
        )));
    }
    Ok(CropSource {
        class: bank.classes()[class].clone(),
        image,
        offset: (rng.gen_range(0..=w - size), rng.gen_range(0..=h - size)),
        flip: allow_flip && rng.gen_bool(0.5),
    })
}

/// A rendered collage.
#[derive(Clone, Debug, PartialEq)]
pub struct Collage {
    pub query: Tensor<f32>,
    /// Region index per pixel.
    pub labels: Vec<usize>,
    pub spec: CollageSpec,
}

impl Collage {
    /// `(1, S, S)` indicator of region `r`.
    pub fn region_mask(&self, r: usize) -> Tensor<f32> {
        let s = self.spec.size;
        let data = self.labels.iter().map(|&l| if l == r { 1.0 } else { 0.0 }).collect();
        Tensor::from_vec(&[1, s, s], data).expect("labels cover the canvas")
    }

    pub fn region_masks(&self) -> Vec<Tensor<f32>> {
        (0..self.spec.k()).map(|r| self.region_mask(r)).collect()
    }
}

/// Renders a collage from an explicit spec.
pub fn render_collage(bank: &TextureBank, spec: &CollageSpec) -> Result<Collage> {
    spec.validate()?;
    let s = spec.size;
    let crops = spec
        .regions
        .iter()
        .map(|r| {
            let class = bank
                .class_index(&r.class)
                .ok_or_else(|| Error::Bank(format!("unknown class `{}`", r.class)))?;
            let img = bank
                .images(class)
                .get(r.image)
                .ok_or_else(|| Error::Bank(format!("`{}` has no image {}", r.class, r.image)))?;
            crop(img, s, r.offset, r.flip)
        })
        .collect::<Result<Vec<_>>>()?;
    let labels = voronoi_labels(s, &spec.seeds);
    let mut query = vec![0.0f32; 3 * s * s];
    for (p, &l) in labels.iter().enumerate() {
        for c in 0..3 {
            query[c * s * s + p] = crops[l].data()[c * s * s + p];
        }
    }
    Ok(Collage {
        query: Tensor::from_vec(&[3, s, s], query)?,
        labels,
        spec: spec.clone(),
    })
}

/// `K ~ U{2..5}` distinct seed points on an `S×S` canvas.
pub(crate) fn random_seeds<R: Rng>(size: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    if size * size < MAX_REGIONS {
        return Err(Error::InvalidDimension(format!("canvas {size}x{size} too small")));
    }
    let k = rng.gen_range(MIN_REGIONS..=MAX_REGIONS);
    let mut seeds = Vec::with_capacity(k);
    while seeds.len() < k {
        let p = (rng.gen_range(0..size), rng.gen_range(0..size));
        if !seeds.contains(&p) {
            seeds.push(p);
        }
    }
    Ok(seeds)
}

/// One random crop per region, classes drawn with replacement from `pool`.
pub(crate) fn random_regions<R: Rng>(
    bank: &TextureBank,
    pool: &[usize],
    size: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<CropSource>> {
    if pool.is_empty() {
        return Err(Error::Bank("empty class pool".into()));
    }
    (0..k)
        .map(|_| {
            let class = pool[rng.gen_range(0..pool.len())];
            random_crop_source(bank, class, size, true, rng)
        })
        .collect()
}

/// Random collage of `K ~ U{2..5}` Voronoi regions whose textures are drawn
/// (with replacement) from `pool`, a list of bank class indices.
pub fn synthesize_collage<R: Rng>(
    bank: &TextureBank,
    pool: &[usize],
    size: usize,
    rng_seed: u64,
    rng: &mut R,
) -> Result<Collage> {
    if pool.is_empty() {
        return Err(Error::Bank("empty class pool".into()));
    }
    let seeds = random_seeds(size, rng)?;
    let regions = random_regions(bank, pool, size, seeds.len(), rng)?;
    render_collage(
        bank,
        &CollageSpec {
            size,
            seeds,
            regions,
            rng_seed,
        },
    )
}
