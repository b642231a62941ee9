use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::NetConfig;

/// Optimizer and schedule settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Evaluate on the held-out subsets every this many epochs (0: only
    /// after the last epoch).
    pub eval_every: usize,
    /// Episodes per held-out subset in each evaluation.
    pub eval_episodes: usize,
    pub threshold: f64,
    /// Multiply the learning rate by `lr_decay` every `lr_decay_every`
    /// epochs; 0 disables the schedule.
    pub lr_decay_every: usize,
    pub lr_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            weight_decay: 0.0005,
            momentum: 0.9,
            epochs: 1000,
            episodes_per_epoch: 240,
            batch_size: 16,
            seed: 0,
            eval_every: 10,
            eval_episodes: 240,
            threshold: crate::objective::DEFAULT_THRESHOLD,
            lr_decay_every: 0,
            lr_decay: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.episodes_per_epoch == 0 || self.batch_size == 0 {
            return bad("episodes_per_epoch and batch_size must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return bad("lr_decay must be positive");
        }
        crate::objective::check_threshold(self.threshold)
    }

    /// Learning rate used during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match epoch.checked_div(self.lr_decay_every) {
            Some(k) => self.lr * self.lr_decay.powi(k as i32),
            None => self.lr,
        }
    }

    /// Optimizer steps per epoch; a partial last batch is padded.
    pub fn steps_per_epoch(&self) -> usize {
        self.episodes_per_epoch.div_ceil(self.batch_size)
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

/// Sets one `key = value` pair on either config. Returns `false` for an
/// unknown key.
pub fn set_option(net: &mut NetConfig, train: &mut TrainConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "preset" => {
            let linear = net.linear;
            *net = NetConfig::preset(value)?;
            net.linear = linear;
        }
        "input_size" => net.input_size = parse(key, value)?,
        "backbone_stride" => net.backbone_stride = parse(key, value)?,
        "backbone_channels" => net.backbone_channels = parse(key, value)?,
        "dir_branch_channels" => net.dir_branch_channels = parse(key, value)?,
        "metric_channels" => net.metric_channels = parse(key, value)?,
        "gate_reduction" => net.gate_reduction = parse(key, value)?,
        "use_dirconv" => net.use_dirconv = parse(key, value)?,
        "use_gating" => net.use_gating = parse(key, value)?,
        "lr" => train.lr = parse(key, value)?,
        "weight_decay" => train.weight_decay = parse(key, value)?,
        "momentum" => train.momentum = parse(key, value)?,
        "epochs" => train.epochs = parse(key, value)?,
        "episodes_per_epoch" => train.episodes_per_epoch = parse(key, value)?,
        "batch_size" => train.batch_size = parse(key, value)?,
        "seed" => train.seed = parse(key, value)?,
        "eval_every" => train.eval_every = parse(key, value)?,
        "eval_episodes" => train.eval_episodes = parse(key, value)?,
        "threshold" => train.threshold = parse(key, value)?,
        "lr_decay_every" => train.lr_decay_every = parse(key, value)?,
        "lr_decay" => train.lr_decay = parse(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Applies a flat `key = value` file. Blank lines and `#` comments are
/// skipped; `preset` must come before any architecture key it should not
/// overwrite.
pub fn apply_config_text(text: &str, net: &mut NetConfig, train: &mut TrainConfig) -> Result<()> {
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        let key = key.trim();
        if !set_option(net, train, key, value.trim())? {
            return Err(Error::Config(format!("line {}: unknown key `{key}`", n + 1)));
        }
    }
    Ok(())
}

/// The flat-file form of both configs.
pub fn config_text(net: &NetConfig, train: &TrainConfig) -> String {
    let mut out = String::new();
    let mut kv = |k: &str, v: String| {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(&v);
        out.push('\n');
    };
    kv("input_size", net.input_size.to_string());
    kv("backbone_stride", net.backbone_stride.to_string());
    kv("backbone_channels", net.backbone_channels.to_string());
    kv("dir_branch_channels", net.dir_branch_channels.to_string());
    kv("metric_channels", net.metric_channels.to_string());
    kv("gate_reduction", net.gate_reduction.to_string());
    kv("use_dirconv", net.use_dirconv.to_string());
    kv("use_gating", net.use_gating.to_string());
    kv("lr", train.lr.to_string());
    kv("weight_decay", train.weight_decay.to_string());
    kv("momentum", train.momentum.to_string());
    kv("epochs", train.epochs.to_string());
    kv("episodes_per_epoch", train.episodes_per_epoch.to_string());
    kv("batch_size", train.batch_size.to_string());
    kv("seed", train.seed.to_string());
    kv("eval_every", train.eval_every.to_string());
    kv("eval_episodes", train.eval_episodes.to_string());
    kv("threshold", train.threshold.to_string());
    kv("lr_decay_every", train.lr_decay_every.to_string());
    kv("lr_decay", train.lr_decay.to_string());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reported_settings() {
        let c = TrainConfig::default();
        assert_eq!(c.lr, 0.001);
        assert_eq!(c.weight_decay, 0.0005);
        assert_eq!(c.epochs, 1000);
        assert_eq!(c.episodes_per_epoch, 240);
        assert_eq!(c.batch_size, 16);
        assert_eq!(c.momentum, 0.9);
        c.validate().unwrap();
    }

    #[test]
    fn key_value_file_round_trips() {
        let mut net = NetConfig::tiny().with_ablation(false, true);
        let mut train = TrainConfig {
            lr: 0.02,
            seed: 7,
            ..Default::default()
        };
        train.lr_decay_every = 5;
        let text = config_text(&net, &train);
        let (mut n2, mut t2) = (NetConfig::paper(), TrainConfig::default());
        apply_config_text(&text, &mut n2, &mut t2).unwrap();
        assert_eq!(n2, net);
        assert_eq!(t2, train);

        apply_config_text("# comment\n\npreset = paper\nlr=0.5 # inline\n", &mut net, &mut train).unwrap();
        assert_eq!(net, NetConfig::paper());
        assert_eq!(train.lr, 0.5);
    }

    #[test]
    fn bad_lines_are_rejected() {
        let (mut n, mut t) = (NetConfig::tiny(), TrainConfig::default());
        assert!(apply_config_text("nonsense", &mut n, &mut t).is_err());
        assert!(apply_config_text("bogus = 1", &mut n, &mut t).is_err());
        assert!(apply_config_text("lr = fast", &mut n, &mut t).is_err());
    }

    #[test]
    fn validation_and_schedule() {
        let mut c = TrainConfig {
            lr: 0.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c.lr = 1.0;
        c.threshold = 1.0;
        assert!(c.validate().is_err());
        c.threshold = 0.5;
        c.lr_decay_every = 10;
        c.lr_decay = 0.5;
        assert_eq!(c.lr_at(9), 1.0);
        assert_eq!(c.lr_at(10), 0.5);
        assert_eq!(c.lr_at(25), 0.25);
        c.episodes_per_epoch = 33;
        c.batch_size = 16;
        assert_eq!(c.steps_per_epoch(), 3);
    }
}
