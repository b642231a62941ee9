//! Texture banks, class splits, collage synthesis and episode sampling.

mod bank;
mod collage;
mod perturb;
mod sample;
mod split;

pub use bank::{procedural_bank, procedural_styles, ClassStyle, Family, TextureBank, ANGLE_JITTER_DEG};
pub use collage::{
    crop, render_collage, synthesize_collage, voronoi_labels, Collage, CollageSpec, CropSource, MAX_REGIONS,
    MIN_REGIONS,
};
pub use perturb::{affine_warp, perturb_reference, scale_crop_side, AffineParams, AffineRange, Perturbation};
pub use sample::{load_episode, sample_episode, sample_episode_seeded, save_episode, Episode, SIDECAR};
pub use split::{dtd_split, Phase, SplitSpec, DTD_CLASSES, DTD_TEST_SUBSETS};
