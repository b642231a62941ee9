use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::episodes::{sample_episode_seeded, Episode, Phase, SplitSpec, TextureBank};
use crate::error::{Error, Result};
use crate::net::{init_params, model_backward, model_forward, save_checkpoint, Mode, NetConfig, ParamStore};
use crate::objective::weighted_bce;
use crate::tensor::Tensor;
use crate::trainer::config::{config_text, TrainConfig};
use crate::trainer::eval::{episode_seeds, evaluate, infer_episodes, phase_stream, test_phases, EvalReport};
use crate::trainer::sgd::Sgd;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub per_subset: Vec<(String, f64)>,
    pub overall: f64,
}

/// History of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub steps: Vec<StepRecord>,
    /// Mean loss of every epoch.
    pub epoch_loss: Vec<f64>,
    pub evals: Vec<EvalRecord>,
    /// Epoch and overall IoU of the best evaluation.
    pub best: Option<(usize, f64)>,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    /// Step log as CSV: `epoch,step,loss,lr`.
    pub fn write_steps_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for s in &self.steps {
            w.serialize(s).map_err(crate::objective::csv_error)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))
    }
}

/// Final state of a run.
pub struct TrainOutcome {
    pub record: RunRecord,
    pub params: ParamStore<f32>,
    /// Parameters at the best evaluation, if any evaluation ran.
    pub best_params: Option<ParamStore<f32>>,
    pub last_eval: Option<EvalReport>,
}

/// Name of the first parameter or gradient holding a NaN or infinity.
pub fn first_non_finite(params: &ParamStore<f32>) -> Option<String> {
    for (name, p) in params.iter() {
        if !p.value.is_finite() {
            return Some(name.to_string());
        }
        if !p.grad.is_finite() {
            return Some(format!("{name} (gradient)"));
        }
    }
    None
}

fn guard<V>(r: Result<V>, params: &ParamStore<f32>) -> Result<V> {
    r.map_err(|e| match e {
        Error::NonFinite { op, node } => Error::NonFiniteLoss(
            first_non_finite(params).unwrap_or_else(|| format!("output of {op} (node {node})")),
        ),
        other => other,
    })
}

/// Stacks episodes into `(N, 3, S, S)` query and reference batches and a
/// `(N, 1, S, S)` target.
pub fn stack_episodes(episodes: &[&Episode]) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    let q: Vec<&Tensor<f32>> = episodes.iter().map(|e| &e.query).collect();
    let r: Vec<&Tensor<f32>> = episodes.iter().map(|e| &e.reference).collect();
    let t: Vec<&Tensor<f32>> = episodes.iter().map(|e| &e.mask).collect();
    Ok((Tensor::stack(&q)?, Tensor::stack(&r)?, Tensor::stack(&t)?))
}

/// One forward/backward/update on a batch; returns the batch loss.
pub fn train_step(
    params: &mut ParamStore<f32>,
    config: &NetConfig,
    opt: &mut Sgd<f32>,
    episodes: &[&Episode],
    lr: f64,
) -> Result<f64> {
    let (q, r, t) = stack_episodes(episodes)?;
    let state = guard(model_forward(&q, &r, params, config, Mode::Train), params)?;
    let (loss, grad) = weighted_bce(state.output(), &t)?;
    if !loss.total.is_finite() {
        return Err(Error::NonFiniteLoss(
            first_non_finite(params).unwrap_or_else(|| "segmentation output".into()),
        ));
    }
    state.apply_running_stats(params)?;
    guard(model_backward(&grad, &state, params), params)?;
    if let Some(name) = first_non_finite(params) {
        return Err(Error::NonFiniteLoss(name));
    }
    opt.step(params, lr)?;
    Ok(loss.total)
}

/// Episodic SGD training from a fresh initialization.
///
/// With `out_dir` set, writes `run.csv`, `summary.json`, `config.txt`,
/// `last.ckpt` and, when evaluations run, `best.ckpt` and `eval.csv`.
pub fn train(
    bank: &TextureBank,
    split: &SplitSpec,
    net: &NetConfig,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    train_observed(bank, split, net, config, out_dir, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_observed(
    bank: &TextureBank,
    split: &SplitSpec,
    net: &NetConfig,
    config: &TrainConfig,
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&RunRecord),
) -> Result<TrainOutcome> {
    net.validate()?;
    config.validate()?;
    let start = Instant::now();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.txt");
        fs::write(&path, config_text(net, config)).map_err(|e| Error::io(&path, e))?;
    }
    let mut params: ParamStore<f32> = init_params(net, config.seed)?;
    let mut opt = Sgd::new(&params, config.momentum, config.weight_decay);
    let phases = test_phases(split);
    let eval_epoch = |e: usize| {
        !phases.is_empty() && (e + 1 == config.epochs || (config.eval_every > 0 && (e + 1).is_multiple_of(config.eval_every)))
    };
    let mut record = RunRecord {
        net: net.clone(),
        train: config.clone(),
        steps: Vec::new(),
        epoch_loss: Vec::new(),
        evals: Vec::new(),
        best: None,
        wall_clock_secs: 0.0,
    };
    let mut best_params = None;
    let mut last_eval = None;
    let per_epoch = config.steps_per_epoch() * config.batch_size;
    let all_seeds = episode_seeds(config.seed, phase_stream(Phase::Train), per_epoch * config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let seeds = &all_seeds[epoch * per_epoch..(epoch + 1) * per_epoch];
        let mut total = 0.0;
        for batch in seeds.chunks(config.batch_size) {
            let episodes = batch
                .iter()
                .map(|&s| sample_episode_seeded(bank, split, Phase::Train, net.input_size, s))
                .collect::<Result<Vec<_>>>()?;
            if let Some(e) = episodes.iter().find(|e| split.is_test_class(&e.class)) {
                return Err(Error::Split(format!("training episode of test class `{}`", e.class)));
            }
            let refs: Vec<&Episode> = episodes.iter().collect();
            let loss = train_step(&mut params, net, &mut opt, &refs, lr)?;
            total += loss;
            record.steps.push(StepRecord {
                epoch,
                step,
                loss,
                lr,
            });
            step += 1;
        }
        record.epoch_loss.push(total / config.steps_per_epoch() as f64);
        if eval_epoch(epoch) {
            let report = guard(
                evaluate(
                    &params,
                    net,
                    bank,
                    split,
                    &phases,
                    config.eval_episodes,
                    config.seed,
                    config.threshold,
                ),
                &params,
            )?;
            let overall = report.summary.overall;
            record.evals.push(EvalRecord {
                epoch,
                per_subset: report.summary.per_subset.clone(),
                overall,
            });
            if record.best.is_none_or(|(_, b)| overall > b) {
                record.best = Some((epoch, overall));
                if let Some(dir) = out_dir {
                    save_checkpoint(&params, net, &dir.join("best.ckpt"))?;
                }
                best_params = Some(params.clone());
            }
            last_eval = Some(report);
        }
        on_epoch(&record);
    }
    record.wall_clock_secs = start.elapsed().as_secs_f64();
    if let Some(dir) = out_dir {
        save_checkpoint(&params, net, &dir.join("last.ckpt"))?;
        let path = dir.join("run.csv");
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        record.write_steps_csv(file)?;
        if let Some(report) = &last_eval {
            let path = dir.join("eval.csv");
            let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            crate::objective::write_metrics_csv(&report.rows, file)?;
        }
        let path = dir.join("summary.json");
        let json = serde_json::to_string_pretty(&record)?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    }
    Ok(TrainOutcome {
        record,
        params,
        best_params,
        last_eval,
    })
}

/// Result of repeatedly fitting a fixed set of episodes.
pub struct OverfitReport {
    pub losses: Vec<f64>,
    /// Mean IoU on the fitted episodes, inference mode.
    pub train_iou: f64,
    /// Set when the mean loss of the last 50 steps exceeds that of the 50
    /// steps before.
    pub flagged: bool,
    pub params: ParamStore<f32>,
}

/// Trains on `n_episodes` fixed training episodes (one batch) for up to
/// `max_steps` steps, stopping early once their mean IoU reaches
/// `target_iou` (checked every 25 steps).
pub fn overfit(
    bank: &TextureBank,
    split: &SplitSpec,
    net: &NetConfig,
    config: &TrainConfig,
    n_episodes: usize,
    max_steps: usize,
    target_iou: Option<f64>,
) -> Result<OverfitReport> {
    net.validate()?;
    config.validate()?;
    let episodes = episode_seeds(config.seed, phase_stream(Phase::Train), n_episodes)
        .into_iter()
        .map(|s| sample_episode_seeded(bank, split, Phase::Train, net.input_size, s))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Episode> = episodes.iter().collect();
    let mut params: ParamStore<f32> = init_params(net, config.seed)?;
    let mut opt = Sgd::new(&params, config.momentum, config.weight_decay);
    let mut losses = Vec::with_capacity(max_steps);
    let measure = |params: &ParamStore<f32>| -> Result<f64> {
        let r = infer_episodes(params, net, &refs, None, config.threshold)?;
        Ok(r.iter().map(|r| r.iou).sum::<f64>() / r.len() as f64)
    };
    let mut train_iou = measure(&params)?;
    for step in 0..max_steps {
        losses.push(train_step(&mut params, net, &mut opt, &refs, config.lr)?);
        if (step + 1) % 25 == 0 || step + 1 == max_steps {
            train_iou = measure(&params)?;
            if target_iou.is_some_and(|t| train_iou >= t) {
                break;
            }
        }
    }
    let flagged = if losses.len() >= 100 {
        let n = losses.len();
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        mean(&losses[n - 50..]) > mean(&losses[n - 100..n - 50])
    } else {
        false
    };
    Ok(OverfitReport {
        losses,
        train_iou,
        flagged,
        params,
    })
}
