use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::episodes::{sample_episode_seeded, Episode, Phase, SplitSpec, TextureBank};
use crate::error::{Error, Result};
use crate::net::{model_forward, Mode, NetConfig, ParamStore};
use crate::objective::{binarize, iou, mean_iou, weighted_bce, BinaryMask, MeanIou, MetricsRow};
use crate::tensor::Tensor;

/// Episodes evaluated per forward pass.
pub const EVAL_BATCH: usize = 16;

/// `n` episode seeds of an independent stream derived from `seed`.
pub fn episode_seeds(seed: u64, stream: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    (0..n).map(|_| rng.gen()).collect()
}

/// Seed stream of a phase: 0 for training, `1 + i` for test subset `i`.
pub fn phase_stream(phase: Phase) -> u64 {
    match phase {
        Phase::Train => 0,
        Phase::Test(i) => 1 + i as u64,
    }
}

/// The fixed evaluation episodes of one phase.
pub fn phase_episodes(
    bank: &TextureBank,
    split: &SplitSpec,
    phase: Phase,
    size: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<Episode>> {
    episode_seeds(seed, phase_stream(phase), n)
        .into_iter()
        .map(|s| sample_episode_seeded(bank, split, phase, size, s))
        .collect()
}

/// Prediction and scores of one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult {
    /// `(1, S, S)` probabilities.
    pub probabilities: Tensor<f32>,
    pub mask: BinaryMask,
    pub iou: f64,
    pub loss: f64,
    /// Gate vector of length `C_m` (all ones without gating).
    pub gamma: Vec<f32>,
}

/// Runs the network in inference mode over `episodes`, optionally with
/// replacement references (one per episode).
pub fn infer_episodes(
    params: &ParamStore<f32>,
    config: &NetConfig,
    episodes: &[&Episode],
    references: Option<&[Tensor<f32>]>,
    threshold: f64,
) -> Result<Vec<EpisodeResult>> {
    if let Some(r) = references {
        if r.len() != episodes.len() {
            return Err(Error::InvalidArgument(format!(
                "{} references for {} episodes",
                r.len(),
                episodes.len()
            )));
        }
    }
    let s = config.input_size;
    let mut out = Vec::with_capacity(episodes.len());
    for (b, chunk) in episodes.chunks(EVAL_BATCH).enumerate() {
        let queries: Vec<&Tensor<f32>> = chunk.iter().map(|e| &e.query).collect();
        let refs: Vec<&Tensor<f32>> = match references {
            Some(r) => r[b * EVAL_BATCH..b * EVAL_BATCH + chunk.len()].iter().collect(),
            None => chunk.iter().map(|e| &e.reference).collect(),
        };
        let masks: Vec<&Tensor<f32>> = chunk.iter().map(|e| &e.mask).collect();
        let state = model_forward(
            &Tensor::stack(&queries)?,
            &Tensor::stack(&refs)?,
            params,
            config,
            Mode::Infer,
        )?;
        let target = Tensor::stack(&masks)?;
        let (loss, _) = weighted_bce(state.output(), &target)?;
        let gamma = state.gamma();
        for (i, e) in chunk.iter().enumerate() {
            let probabilities = Tensor::from_vec(&[1, s, s], state.output().item(i).to_vec())?;
            let mask = binarize(&probabilities, threshold)?;
            let truth = BinaryMask::from_tensor(&e.mask)?;
            out.push(EpisodeResult {
                iou: iou(&mask, &truth)?,
                loss: loss.items[i].total,
                gamma: gamma.item(i).to_vec(),
                probabilities,
                mask,
            });
        }
    }
    Ok(out)
}

/// Per-episode rows and the mean-of-means summary of an evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<MetricsRow>,
    pub summary: MeanIou,
}

/// Evaluates `n_episodes` fixed episodes from each listed phase.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    params: &ParamStore<f32>,
    config: &NetConfig,
    bank: &TextureBank,
    split: &SplitSpec,
    phases: &[Phase],
    n_episodes: usize,
    seed: u64,
    threshold: f64,
) -> Result<EvalReport> {
    if n_episodes == 0 {
        return Err(Error::InvalidArgument("evaluation needs at least one episode".into()));
    }
    let mut rows = Vec::new();
    let mut groups = Vec::new();
    for &phase in phases {
        let episodes = phase_episodes(bank, split, phase, config.input_size, n_episodes, seed)?;
        let refs: Vec<&Episode> = episodes.iter().collect();
        let results = infer_episodes(params, config, &refs, None, threshold)?;
        let subset = split.subset_name(phase).to_string();
        for (e, r) in episodes.iter().zip(&results) {
            rows.push(MetricsRow {
                episode_id: rows.len(),
                subset: subset.clone(),
                class: e.class.clone(),
                iou: r.iou,
                loss: r.loss,
            });
        }
        groups.push((subset, results.iter().map(|r| r.iou).collect::<Vec<_>>()));
    }
    Ok(EvalReport {
        rows,
        summary: mean_iou(&groups)?,
    })
}

/// Every held-out subset of the split.
pub fn test_phases(split: &SplitSpec) -> Vec<Phase> {
    (0..split.test_subsets().len()).map(Phase::Test).collect()
}
