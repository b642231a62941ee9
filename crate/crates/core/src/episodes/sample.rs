use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::episodes::collage::{
    crop, random_crop_source, random_regions, random_seeds, render_collage, CollageSpec, CropSource,
};
use crate::episodes::{Phase, SplitSpec, TextureBank};
use crate::error::{Error, Result};
use crate::imageio;
use crate::tensor::Tensor;

/// Give up after this many degenerate draws in a row.
const MAX_RESAMPLES: usize = 1000;

/// A (query, reference, target) triple sharing class `class`.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    /// `(3, S, S)`
    pub query: Tensor<f32>,
    /// `(3, S, S)`
    pub reference: Tensor<f32>,
    /// `(1, S, S)` with values in `{0, 1}`.
    pub mask: Tensor<f32>,
    pub class: String,
    pub spec: CollageSpec,
    pub reference_source: CropSource,
}

impl Episode {
    pub fn size(&self) -> usize {
        self.spec.size
    }

    pub fn positives(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v == 1.0).count()
    }

    /// Checks the episode invariants: binary non-degenerate mask and a
    /// reference drawn from the target class.
    pub fn validate(&self) -> Result<()> {
        let s = self.size();
        for (name, t, c) in [("query", &self.query, 3), ("reference", &self.reference, 3), ("mask", &self.mask, 1)] {
            if t.shape() != [c, s, s] {
                return Err(Error::Shape(format!("episode {name} has shape {:?}", t.shape())));
            }
        }
        if let Some(i) = self.mask.data().iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::NonBinaryMask(i));
        }
        let n_pos = self.positives();
        if n_pos == 0 || n_pos == s * s {
            return Err(Error::DegenerateMask {
                item: 0,
                n_pos,
                n_neg: s * s - n_pos,
            });
        }
        if self.reference_source.class != self.class {
            return Err(Error::InvalidArgument(format!(
                "reference of class `{}` in an episode of class `{}`",
                self.reference_source.class, self.class
            )));
        }
        Ok(())
    }
}

/// Draws an episode from the classes of `phase`.
///
/// When every region ends up in the target class the region textures are
/// redrawn; the region count and geometry are kept.
pub fn sample_episode<R: Rng>(
    bank: &TextureBank,
    split: &SplitSpec,
    phase: Phase,
    size: usize,
    rng: &mut R,
) -> Result<Episode> {
    sample_with_seed(bank, split, phase, size, 0, rng)
}

/// Reproducible episode: a pure function of its arguments.
pub fn sample_episode_seeded(
    bank: &TextureBank,
    split: &SplitSpec,
    phase: Phase,
    size: usize,
    seed: u64,
) -> Result<Episode> {
    sample_with_seed(bank, split, phase, size, seed, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn sample_with_seed<R: Rng>(
    bank: &TextureBank,
    split: &SplitSpec,
    phase: Phase,
    size: usize,
    rng_seed: u64,
    rng: &mut R,
) -> Result<Episode> {
    let names = split.classes(phase)?;
    if names.is_empty() {
        return Err(Error::Split(format!("phase `{}` has no classes", split.subset_name(phase))));
    }
    let pool = names
        .iter()
        .map(|n| {
            bank.class_index(n)
                .ok_or_else(|| Error::Bank(format!("class `{n}` is not in the bank")))
        })
        .collect::<Result<Vec<_>>>()?;

    let seeds = random_seeds(size, rng)?;
    for _ in 0..MAX_RESAMPLES {
        let regions = random_regions(bank, &pool, size, seeds.len(), rng)?;
        let spec = CollageSpec {
            size,
            seeds: seeds.clone(),
            regions,
            rng_seed,
        };
        let collage = render_collage(bank, &spec)?;
        let mut present: Vec<&str> = Vec::new();
        for c in collage.spec.class_assignment() {
            if !present.contains(&c) {
                present.push(c);
            }
        }
        if phase == Phase::Train {
            if let Some(c) = present.iter().find(|c| split.is_test_class(c)) {
                return Err(Error::Split(format!("training episode drew test class `{c}`")));
            }
        }
        let class = present[rng.gen_range(0..present.len())].to_string();
        let in_target: Vec<bool> = collage
            .spec
            .regions
            .iter()
            .map(|r| r.class == class)
            .collect();
        let mask_data: Vec<f32> = collage
            .labels
            .iter()
            .map(|&l| if in_target[l] { 1.0 } else { 0.0 })
            .collect();
        let n_pos = mask_data.iter().filter(|&&v| v == 1.0).count();
        if n_pos == 0 || n_pos == size * size {
            continue;
        }
        let class_idx = bank.class_index(&class).expect("class came from the bank");
        let reference_source = random_crop_source(bank, class_idx, size, false, rng)?;
        let reference = crop(
            bank.image(class_idx, reference_source.image),
            size,
            reference_source.offset,
            reference_source.flip,
        )?;
        let episode = Episode {
            query: collage.query,
            reference,
            mask: Tensor::from_vec(&[1, size, size], mask_data)?,
            class,
            spec: collage.spec,
            reference_source,
        };
        episode.validate()?;
        return Ok(episode);
    }
    Err(Error::Bank(format!(
        "no non-degenerate episode after {MAX_RESAMPLES} draws"
    )))
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    class: String,
    spec: CollageSpec,
    reference_source: CropSource,
}

pub const SIDECAR: &str = "episode.json";

/// Writes `Q.png`, `R.png`, `T.png` (0/255) and a JSON sidecar into `dir`.
pub fn save_episode(episode: &Episode, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    imageio::save_rgb(&episode.query, &dir.join("Q.png"))?;
    imageio::save_rgb(&episode.reference, &dir.join("R.png"))?;
    imageio::save_gray(&episode.mask, &dir.join("T.png"))?;
    let sidecar = Sidecar {
        class: episode.class.clone(),
        spec: episode.spec.clone(),
        reference_source: episode.reference_source.clone(),
    };
    let path = dir.join(SIDECAR);
    let json = serde_json::to_string_pretty(&sidecar)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn load_episode(dir: &Path) -> Result<Episode> {
    let path = dir.join(SIDECAR);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text)?;
    let mask: Tensor<f32> = imageio::load_gray(&dir.join("T.png"))?;
    let mask = mask.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
    let episode = Episode {
        query: imageio::load_rgb(&dir.join("Q.png"))?,
        reference: imageio::load_rgb(&dir.join("R.png"))?,
        mask,
        class: sidecar.class,
        spec: sidecar.spec,
        reference_source: sidecar.reference_source,
    };
    episode.validate()?;
    Ok(episode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::procedural_bank;

    fn fixture() -> (TextureBank, SplitSpec) {
        let bank = procedural_bank(8, 3, 16, 9).unwrap();
        let split = SplitSpec::holdout(bank.classes(), 6).unwrap();
        (bank, split)
    }

    #[test]
    fn mask_is_union_of_target_regions() {
        let (bank, split) = fixture();
        for seed in 0..30 {
            let e = sample_episode_seeded(&bank, &split, Phase::Train, 16, seed).unwrap();
            let labels = crate::episodes::voronoi_labels(16, &e.spec.seeds);
            for (p, &l) in labels.iter().enumerate() {
                let expect = e.spec.regions[l].class == e.class;
                assert_eq!(e.mask.data()[p] == 1.0, expect);
            }
            assert_eq!(e.reference_source.class, e.class);
            assert!(!split.is_test_class(&e.class));
        }
    }

    #[test]
    fn test_phase_draws_only_held_out_classes() {
        let (bank, split) = fixture();
        let held: Vec<String> = split.classes(Phase::Test(0)).unwrap().to_vec();
        for seed in 0..30 {
            let e = sample_episode_seeded(&bank, &split, Phase::Test(0), 16, seed).unwrap();
            assert!(held.contains(&e.class));
            for r in &e.spec.regions {
                assert!(held.contains(&r.class));
            }
        }
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let (bank, split) = fixture();
        let a = sample_episode_seeded(&bank, &split, Phase::Train, 16, 77).unwrap();
        let b = sample_episode_seeded(&bank, &split, Phase::Train, 16, 77).unwrap();
        assert_eq!(a, b);
        let c = sample_episode_seeded(&bank, &split, Phase::Train, 16, 78).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn single_class_pool_always_resamples_to_failure() {
        let bank = procedural_bank(6, 1, 8, 0).unwrap();
        let split = SplitSpec::new(vec![bank.classes()[0].clone()], vec![]).unwrap();
        let err = sample_episode_seeded(&bank, &split, Phase::Train, 8, 0).unwrap_err();
        assert!(matches!(err, Error::Bank(_)));
    }

    #[test]
    fn training_guard_rejects_overlapping_classes() {
        let bank = procedural_bank(6, 1, 8, 0).unwrap();
        let split = SplitSpec::holdout(bank.classes(), 5).unwrap();
        assert!(sample_episode_seeded(&bank, &split, Phase::Test(3), 8, 0).is_err());
        let missing = SplitSpec::new(vec!["nope".into()], vec![]).unwrap();
        assert!(sample_episode_seeded(&bank, &missing, Phase::Train, 8, 0).is_err());
    }

    #[test]
    fn dump_round_trips() {
        let (bank, split) = fixture();
        let e = sample_episode_seeded(&bank, &split, Phase::Train, 16, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_episode(&e, dir.path()).unwrap();
        let back = load_episode(dir.path()).unwrap();
        assert_eq!(back, e);
        let t = image::open(dir.path().join("T.png")).unwrap().to_luma8();
        assert!(t.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));
    }
}
