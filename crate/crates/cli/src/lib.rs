//! Subcommands of the `ostr` binary. Each returns the key/value pairs of its
//! summary line; `main` prints them.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ostr::dirmaps::all_directional_maps;
use ostr::episodes::{
    dtd_split, load_episode, perturb_reference, procedural_bank, save_episode, AffineRange, Episode, Perturbation,
    Phase, SplitSpec, TextureBank,
};
use ostr::imageio;
use ostr::net::{load_checkpoint, model_forward, Mode, NetConfig, ParamStore};
use ostr::objective::{binarize, check_threshold, iou, write_metrics_csv, DEFAULT_THRESHOLD};
use ostr::tensor::Tensor;
use ostr::trainer::{
    apply_config_text, episode_seeds, evaluate, gradcheck, infer_episodes, linear_toy, phase_episodes, set_option,
    test_phases, train, GradcheckOptions, TrainConfig,
};

pub const SEED_ENV: &str = "OSTR_SEED";

#[derive(Parser, Debug)]
#[command(name = "ostr", version, about = "One-shot texture segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write sampled episodes (Q.png, R.png, T.png, episode.json) to disk.
    SynthData(SynthArgs),
    /// Write the eight directional maps as PNGs and one CSV.
    DumpDirmaps(DirmapArgs),
    /// Episodic training; writes logs and checkpoints to `--out`.
    Train(TrainArgs),
    /// Held-out IoU of a checkpoint.
    Eval(EvalArgs),
    /// Segment one query image given one reference patch.
    Segment(SegmentArgs),
    /// IoU under scale or affine perturbation of the reference.
    Invariance(InvarianceArgs),
    /// Per-episode gate vectors.
    ExportGates(GateArgs),
    /// Compare backpropagated gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SynthData(_) => "synth-data",
            Command::DumpDirmaps(_) => "dump-dirmaps",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Segment(_) => "segment",
            Command::Invariance(_) => "invariance",
            Command::ExportGates(_) => "export-gates",
            Command::Gradcheck(_) => "gradcheck",
        }
    }
}

/// Where textures and the class split come from.
#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Directory of `<class>/*.png` textures; procedural textures otherwise.
    #[arg(long)]
    pub bank: Option<PathBuf>,
    /// Procedural classes.
    #[arg(long, default_value_t = 16)]
    pub classes: usize,
    /// Procedural images per class.
    #[arg(long, default_value_t = 8)]
    pub images: usize,
    /// Side of procedural textures (default: the input size).
    #[arg(long)]
    pub texture_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub bank_seed: u64,
    /// `holdout:<n_train>` or `dtd`.
    #[arg(long, default_value = "holdout:12")]
    pub split: String,
}

impl DataArgs {
    pub fn load(&self, size: usize) -> Result<(TextureBank, SplitSpec)> {
        let bank = match &self.bank {
            Some(dir) => TextureBank::load_dir(dir, size)?,
            None => procedural_bank(self.classes, self.images, self.texture_size.unwrap_or(size), self.bank_seed)?,
        };
        let split = if self.split == "dtd" {
            dtd_split()
        } else if let Some(n) = self.split.strip_prefix("holdout:") {
            SplitSpec::holdout(bank.classes(), n.parse().context("holdout count")?)?
        } else {
            bail!("unknown split `{}` (expected holdout:<n> or dtd)", self.split);
        };
        for c in split.train_classes().iter().map(String::as_str).chain(split.test_classes()) {
            if bank.class_index(c).is_none() {
                bail!("split class `{c}` is missing from the texture bank");
            }
        }
        Ok((bank, split))
    }
}

/// `--seed`, else `$OSTR_SEED`, else `default`.
pub fn resolve_seed(flag: Option<u64>, default: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().with_context(|| format!("{SEED_ENV}={v} is not an integer")),
        Err(_) => Ok(default),
    }
}

fn parse_phase(split: &SplitSpec, text: &str) -> Result<Phase> {
    if text == "train" {
        return Ok(Phase::Train);
    }
    let subsets = split.test_subsets();
    if let Some(i) = subsets.iter().position(|(n, _)| n == text) {
        return Ok(Phase::Test(i));
    }
    match text.parse::<usize>() {
        Ok(i) if i < subsets.len() => Ok(Phase::Test(i)),
        _ => bail!("unknown subset `{text}`"),
    }
}

/// Test phases selected by `all` or one subset name.
fn parse_test_phases(split: &SplitSpec, text: &str) -> Result<Vec<Phase>> {
    if text == "all" {
        return Ok(test_phases(split));
    }
    match parse_phase(split, text)? {
        Phase::Train => bail!("evaluation needs a held-out subset"),
        p => Ok(vec![p]),
    }
}

fn threshold(t: f64) -> Result<f64> {
    check_threshold(t)?;
    Ok(t)
}

pub type Summary = Vec<(String, String)>;

fn kv(out: &mut Summary, key: &str, value: impl Display) {
    out.push((key.to_string(), value.to_string()));
}

/// `OSTR <command> status=<ok|err> key=value ...`; values with spaces are
/// quoted.
pub fn summary_line(command: &str, ok: bool, pairs: &[(String, String)]) -> String {
    let mut line = format!("OSTR {command} status={}", if ok { "ok" } else { "err" });
    for (k, v) in pairs {
        if v.is_empty() || v.contains(char::is_whitespace) || v.contains('"') {
            line.push_str(&format!(" {k}={v:?}"));
        } else {
            line.push_str(&format!(" {k}={v}"));
        }
    }
    line
}

pub fn run(cli: &Cli) -> Result<Summary> {
    match &cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::DumpDirmaps(a) => dump_dirmaps(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Segment(a) => segment(a),
        Command::Invariance(a) => run_invariance(a),
        Command::ExportGates(a) => export_gates(a),
        Command::Gradcheck(a) => run_gradcheck(a),
    }
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// `train` or a held-out subset.
    #[arg(long, default_value = "train")]
    pub subset: String,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the texture bank under `<out>/bank`.
    #[arg(long)]
    pub save_bank: bool,
    #[command(flatten)]
    pub data: DataArgs,
}

fn synth_data(a: &SynthArgs) -> Result<Summary> {
    let seed = resolve_seed(a.seed, 0)?;
    let (bank, split) = a.data.load(a.size)?;
    let phase = parse_phase(&split, &a.subset)?;
    let episodes = phase_episodes(&bank, &split, phase, a.size, a.n, seed)?;
    for (i, e) in episodes.iter().enumerate() {
        save_episode(e, &a.out.join(format!("episode_{i:05}")))?;
    }
    if a.save_bank {
        bank.save_dir(&a.out.join("bank"))?;
    }
    let mut s = Summary::new();
    kv(&mut s, "episodes", episodes.len());
    kv(&mut s, "subset", split.subset_name(phase));
    kv(&mut s, "seed", seed);
    kv(&mut s, "out", a.out.display());
    Ok(s)
}

/// Episodes written by `synth-data`, in directory order.
pub fn load_episode_dir(root: &Path) -> Result<Vec<Episode>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .with_context(|| format!("reading {}", root.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.join(ostr::episodes::SIDECAR).is_file())
        .collect();
    dirs.sort();
    Ok(dirs.iter().map(|d| load_episode(d)).collect::<ostr::error::Result<_>>()?)
}

#[derive(Args, Debug)]
pub struct DirmapArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub height: usize,
    #[arg(long, default_value_t = 8)]
    pub width: usize,
}

fn dump_dirmaps(a: &DirmapArgs) -> Result<Summary> {
    let maps = all_directional_maps(a.height, a.width)?;
    fs::create_dir_all(&a.out)?;
    let mut w = csv::Writer::from_path(a.out.join("dirmaps.csv"))?;
    w.write_record(["direction", "row", "col", "value"])?;
    for m in maps.iter() {
        let t = Tensor::<f64>::from_vec(&[1, m.height, m.width], m.values.clone())?;
        imageio::save_gray(&t, &a.out.join(format!("{}.png", m.direction.name())))?;
        for i in 0..m.height {
            for j in 0..m.width {
                w.write_record([m.direction.name().to_string(), i.to_string(), j.to_string(), m.get(i, j).to_string()])?;
            }
        }
    }
    w.flush()?;
    let mut s = Summary::new();
    kv(&mut s, "maps", maps.len());
    kv(&mut s, "size", format!("{}x{}", a.height, a.width));
    kv(&mut s, "out", a.out.display());
    Ok(s)
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Flat `key = value` file; flags given here override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `tiny` or `paper`.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub input_size: Option<usize>,
    /// Drop the direction-conditioned branches.
    #[arg(long)]
    pub no_dirconv: bool,
    /// Drop the channel gates.
    #[arg(long)]
    pub no_gating: bool,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub episodes_per_epoch: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Epochs between held-out evaluations (0: only at the end).
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Episodes per held-out subset in each evaluation.
    #[arg(long)]
    pub eval_episodes: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Any other config key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub data: DataArgs,
}

impl TrainArgs {
    /// Preset, then config file, then flags.
    pub fn configs(&self) -> Result<(NetConfig, TrainConfig)> {
        let mut net = NetConfig::tiny();
        let mut train = TrainConfig {
            seed: resolve_seed(None, 0)?,
            ..Default::default()
        };
        if let Some(p) = &self.config {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            apply_config_text(&text, &mut net, &mut train)?;
        }
        if let Some(p) = &self.preset {
            net = NetConfig::preset(p)?;
        }
        for item in &self.set {
            let (k, v) = item.split_once('=').with_context(|| format!("--set {item}: expected KEY=VALUE"))?;
            if !set_option(&mut net, &mut train, k.trim(), v.trim())? {
                bail!("--set {item}: unknown key `{}`", k.trim());
            }
        }
        macro_rules! over {
            ($field:ident, $target:expr) => {
                if let Some(v) = self.$field {
                    $target = v;
                }
            };
        }
        over!(input_size, net.input_size);
        over!(lr, train.lr);
        over!(epochs, train.epochs);
        over!(episodes_per_epoch, train.episodes_per_epoch);
        over!(batch_size, train.batch_size);
        over!(eval_every, train.eval_every);
        over!(eval_episodes, train.eval_episodes);
        over!(threshold, train.threshold);
        over!(seed, train.seed);
        if self.no_dirconv {
            net.use_dirconv = false;
        }
        if self.no_gating {
            net.use_gating = false;
        }
        net.validate()?;
        train.validate()?;
        Ok((net, train))
    }
}

fn run_train(a: &TrainArgs) -> Result<Summary> {
    let (net, cfg) = a.configs()?;
    let (bank, split) = a.data.load(net.input_size)?;
    let out = train(&bank, &split, &net, &cfg, Some(&a.out))?;
    let mut s = Summary::new();
    kv(&mut s, "steps", out.record.steps.len());
    if let Some(l) = out.record.epoch_loss.last() {
        kv(&mut s, "final_loss", format!("{l:.4}"));
    }
    if let Some((epoch, best)) = out.record.best {
        kv(&mut s, "best_epoch", epoch);
        kv(&mut s, "best_iou", format!("{best:.4}"));
    }
    if let Some(e) = out.record.evals.last() {
        kv(&mut s, "last_iou", format!("{:.4}", e.overall));
    }
    kv(&mut s, "seed", cfg.seed);
    kv(&mut s, "out", a.out.display());
    Ok(s)
}

fn load_model(path: &Path) -> Result<(ParamStore<f32>, NetConfig)> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// `all` or one held-out subset.
    #[arg(long, default_value = "all")]
    pub subset: String,
    #[arg(long, default_value_t = 240)]
    pub n: usize,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// Per-episode metrics CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub data: DataArgs,
}

fn run_eval(a: &EvalArgs) -> Result<Summary> {
    let t = threshold(a.threshold)?;
    let seed = resolve_seed(a.seed, 0)?;
    let (params, net) = load_model(&a.checkpoint)?;
    let (bank, split) = a.data.load(net.input_size)?;
    let phases = parse_test_phases(&split, &a.subset)?;
    let report = evaluate(&params, &net, &bank, &split, &phases, a.n, seed, t)?;
    if let Some(path) = &a.out {
        write_metrics_csv(&report.rows, fs::File::create(path)?)?;
    }
    let mut s = Summary::new();
    kv(&mut s, "episodes", report.rows.len());
    for (name, m) in &report.summary.per_subset {
        kv(&mut s, &format!("iou_{name}"), format!("{m:.4}"));
    }
    kv(&mut s, "mean_iou", format!("{:.4}", report.summary.overall));
    kv(&mut s, "seed", seed);
    Ok(s)
}

#[derive(Args, Debug)]
pub struct SegmentArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub query: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    /// 16-bit probability map.
    #[arg(long)]
    pub out: PathBuf,
    /// Binary 0/255 mask (default: `<out stem>_mask.png`).
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Ground-truth mask; prints the IoU.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
}

fn load_resized(path: &Path, size: usize, gray: bool) -> Result<Tensor<f32>> {
    let t: Tensor<f32> = if gray {
        imageio::load_gray(path)?
    } else {
        imageio::load_rgb(path)?
    };
    let t = if t.shape()[1..] == [size, size] {
        t
    } else {
        imageio::resize(&t, size, size)?
    };
    let c = t.shape()[0];
    Ok(t.reshape(&[1, c, size, size])?)
}

fn segment(a: &SegmentArgs) -> Result<Summary> {
    let t = threshold(a.threshold)?;
    let (params, net) = load_model(&a.checkpoint)?;
    let s_ = net.input_size;
    let q = load_resized(&a.query, s_, false)?;
    let r = load_resized(&a.reference, s_, false)?;
    let state = model_forward(&q, &r, &params, &net, Mode::Infer)?;
    let prob = state.output().clone().reshape(&[1, s_, s_])?;
    let mask = binarize(&prob, t)?;
    imageio::save_gray16(&prob, &a.out)?;
    let mask_path = a.mask.clone().unwrap_or_else(|| {
        let stem = a.out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        a.out.with_file_name(format!("{stem}_mask.png"))
    });
    imageio::save_gray(&mask.to_tensor::<f32>(), &mask_path)?;
    let mut s = Summary::new();
    kv(&mut s, "foreground", mask.count());
    kv(&mut s, "pixels", s_ * s_);
    if let Some(p) = &a.truth {
        let truth = load_resized(p, s_, true)?.reshape(&[1, s_, s_])?;
        let truth = binarize(&truth, 0.5)?;
        kv(&mut s, "iou", format!("{:.4}", iou(&mask, &truth)?));
    }
    kv(&mut s, "out", a.out.display());
    kv(&mut s, "mask", mask_path.display());
    Ok(s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum InvarianceMode {
    Scale,
    Affine,
}

/// Scale levels: the kept fraction of the reference side.
pub const SCALE_LEVELS: [f64; 3] = [1.0, 0.5, 0.25];
/// Affine levels: multiples of the configured ranges.
pub const AFFINE_LEVELS: [f64; 3] = [0.0, 0.5, 1.0];

/// One (episode, level) evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct InvarianceRow {
    pub episode: usize,
    pub class: String,
    pub level: f64,
    pub iou: f64,
    /// IoU with the unperturbed reference.
    pub baseline_iou: f64,
}

impl InvarianceRow {
    pub fn delta(&self) -> f64 {
        self.iou - self.baseline_iou
    }
}

/// Perturbation applied at `level`; `range` scales linearly in rotation and
/// shear and geometrically in scale.
pub fn level_perturbation(mode: InvarianceMode, level: f64, range: &AffineRange, rng: &mut ChaCha8Rng) -> Perturbation {
    match mode {
        InvarianceMode::Scale => Perturbation::Scale(level),
        InvarianceMode::Affine => {
            let r = AffineRange {
                max_rotation_deg: range.max_rotation_deg * level,
                max_shear: range.max_shear * level,
                max_scale: range.max_scale.powf(level),
            };
            Perturbation::Affine(r.sample(rng))
        }
    }
}

/// Evaluates every episode with the unperturbed reference and at every level.
/// Affine draws are seeded per episode so each level rescales the same draw
/// stream.
#[allow(clippy::too_many_arguments)]
pub fn invariance_rows(
    params: &ParamStore<f32>,
    net: &NetConfig,
    episodes: &[Episode],
    mode: InvarianceMode,
    levels: &[f64],
    range: &AffineRange,
    threshold: f64,
    seed: u64,
) -> Result<Vec<InvarianceRow>> {
    let refs: Vec<&Episode> = episodes.iter().collect();
    let base = infer_episodes(params, net, &refs, None, threshold)?;
    let draws = episode_seeds(seed, u64::MAX, episodes.len());
    let mut per_level = Vec::with_capacity(levels.len());
    for &level in levels {
        let perturbed = episodes
            .iter()
            .zip(&draws)
            .map(|(e, &d)| {
                let mut rng = ChaCha8Rng::seed_from_u64(d);
                perturb_reference(&e.reference, &level_perturbation(mode, level, range, &mut rng))
            })
            .collect::<ostr::error::Result<Vec<_>>>()?;
        per_level.push(infer_episodes(params, net, &refs, Some(&perturbed), threshold)?);
    }
    let mut rows = Vec::with_capacity(episodes.len() * levels.len());
    for (i, e) in episodes.iter().enumerate() {
        for (l, &level) in levels.iter().enumerate() {
            rows.push(InvarianceRow {
                episode: i,
                class: e.class.clone(),
                level,
                iou: per_level[l][i].iou,
                baseline_iou: base[i].iou,
            });
        }
    }
    Ok(rows)
}

/// Mean IoU at each level, in `levels` order.
pub fn level_means(rows: &[InvarianceRow], levels: &[f64]) -> Vec<f64> {
    levels
        .iter()
        .map(|&l| {
            let v: Vec<f64> = rows.iter().filter(|r| r.level == l).map(|r| r.iou).collect();
            v.iter().sum::<f64>() / v.len().max(1) as f64
        })
        .collect()
}

#[derive(Args, Debug)]
pub struct InvarianceArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "0")]
    pub subset: String,
    #[arg(long, default_value_t = 240)]
    pub n: usize,
    #[arg(long, value_enum, default_value_t = InvarianceMode::Scale)]
    pub mode: InvarianceMode,
    #[arg(long, default_value_t = AffineRange::default().max_rotation_deg)]
    pub max_rotation: f64,
    #[arg(long, default_value_t = AffineRange::default().max_shear)]
    pub max_shear: f64,
    #[arg(long, default_value_t = AffineRange::default().max_scale)]
    pub max_scale: f64,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub data: DataArgs,
}

fn run_invariance(a: &InvarianceArgs) -> Result<Summary> {
    let t = threshold(a.threshold)?;
    let seed = resolve_seed(a.seed, 0)?;
    if a.max_scale < 1.0 || a.max_rotation < 0.0 || a.max_shear < 0.0 {
        bail!("affine ranges must be non-negative and max_scale >= 1");
    }
    let (params, net) = load_model(&a.checkpoint)?;
    let (bank, split) = a.data.load(net.input_size)?;
    let phase = match parse_phase(&split, &a.subset)? {
        Phase::Train => bail!("invariance needs a held-out subset"),
        p => p,
    };
    let episodes = phase_episodes(&bank, &split, phase, net.input_size, a.n, seed)?;
    let levels: &[f64] = match a.mode {
        InvarianceMode::Scale => &SCALE_LEVELS,
        InvarianceMode::Affine => &AFFINE_LEVELS,
    };
    let range = AffineRange {
        max_rotation_deg: a.max_rotation,
        max_shear: a.max_shear,
        max_scale: a.max_scale,
    };
    let rows = invariance_rows(&params, &net, &episodes, a.mode, levels, &range, t, seed)?;
    let mut w = csv::Writer::from_path(&a.out)?;
    w.write_record(["episode", "class", "mode", "level", "iou", "baseline_iou", "delta"])?;
    let mode = format!("{:?}", a.mode).to_lowercase();
    for r in &rows {
        w.write_record([
            r.episode.to_string(),
            r.class.clone(),
            mode.clone(),
            r.level.to_string(),
            r.iou.to_string(),
            r.baseline_iou.to_string(),
            r.delta().to_string(),
        ])?;
    }
    w.flush()?;
    let mut s = Summary::new();
    kv(&mut s, "mode", &mode);
    kv(&mut s, "rows", rows.len());
    let base = rows.iter().filter(|r| r.level == levels[0]).map(|r| r.baseline_iou).sum::<f64>() / a.n as f64;
    kv(&mut s, "baseline_iou", format!("{base:.4}"));
    for (l, m) in levels.iter().zip(level_means(&rows, levels)) {
        kv(&mut s, &format!("iou@{l}"), format!("{m:.4}"));
        kv(&mut s, &format!("delta@{l}"), format!("{:.4}", m - base));
    }
    Ok(s)
}

#[derive(Args, Debug)]
pub struct GateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "all")]
    pub subset: String,
    #[arg(long, default_value_t = 240)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub data: DataArgs,
}

/// Class and gate vector of every episode of the selected subsets.
pub fn gate_rows(
    params: &ParamStore<f32>,
    net: &NetConfig,
    bank: &TextureBank,
    split: &SplitSpec,
    phases: &[Phase],
    n: usize,
    seed: u64,
) -> Result<Vec<(String, Vec<f32>)>> {
    if !net.use_gating {
        bail!("checkpoint was trained without gating");
    }
    let mut rows = Vec::new();
    for &phase in phases {
        let episodes = phase_episodes(bank, split, phase, net.input_size, n, seed)?;
        let refs: Vec<&Episode> = episodes.iter().collect();
        for (e, r) in episodes.iter().zip(infer_episodes(params, net, &refs, None, DEFAULT_THRESHOLD)?) {
            rows.push((e.class.clone(), r.gamma));
        }
    }
    Ok(rows)
}

fn export_gates(a: &GateArgs) -> Result<Summary> {
    let seed = resolve_seed(a.seed, 0)?;
    let (params, net) = load_model(&a.checkpoint)?;
    let (bank, split) = a.data.load(net.input_size)?;
    let phases = match a.subset.as_str() {
        "all" => test_phases(&split),
        s => vec![parse_phase(&split, s)?],
    };
    let rows = gate_rows(&params, &net, &bank, &split, &phases, a.n, seed)?;
    let mut w = csv::Writer::from_path(&a.out)?;
    let mut header = vec!["class".to_string()];
    header.extend((0..net.metric_channels).map(|c| format!("g{c}")));
    w.write_record(&header)?;
    for (class, g) in &rows {
        let mut rec = vec![class.clone()];
        rec.extend(g.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    let mut s = Summary::new();
    kv(&mut s, "rows", rows.len());
    kv(&mut s, "channels", net.metric_channels);
    kv(&mut s, "out", a.out.display());
    Ok(s)
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "tiny")]
    pub preset: String,
    #[arg(long, default_value_t = 16)]
    pub input_size: usize,
    /// Identity activations, no batch-norm.
    #[arg(long)]
    pub linear: bool,
    #[arg(long, default_value_t = 500)]
    pub samples: usize,
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn run_gradcheck(a: &GradcheckArgs) -> Result<Summary> {
    let mut net = NetConfig::preset(&a.preset)?.with_input_size(a.input_size);
    if a.linear {
        net = linear_toy(&net);
    }
    let defaults = GradcheckOptions::default();
    let opts = GradcheckOptions {
        seed: resolve_seed(a.seed, 0)?,
        samples: Some(a.samples),
        step: a.step.unwrap_or(if a.linear { 1.0 } else { defaults.step }),
        tolerance: a.tolerance.unwrap_or(if a.linear { 1e-8 } else { defaults.tolerance }),
        ..defaults
    };
    let r = gradcheck(&net, &opts)?;
    let mut s = Summary::new();
    kv(&mut s, "passed", r.passed);
    kv(&mut s, "max_rel_error", format!("{:.3e}", r.max_rel_error));
    kv(&mut s, "tolerance", format!("{:.0e}", r.tolerance));
    kv(&mut s, "checked", r.checked);
    kv(&mut s, "tensors", r.tensors);
    kv(&mut s, "kink_crossings", r.kink_crossings);
    kv(&mut s, "worst", &r.worst);
    if !r.passed {
        bail!(
            "gradient check failed: max relative error {:.3e} at {} (analytic {:.6e}, numeric {:.6e})",
            r.max_rel_error,
            r.worst,
            r.analytic,
            r.numeric
        );
    }
    Ok(s)
}
