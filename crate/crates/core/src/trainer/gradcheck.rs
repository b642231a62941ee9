use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::episodes::{procedural_bank, sample_episode_seeded, Phase, SplitSpec};
use crate::error::Result;
use crate::net::{init_params, model_backward, model_forward, model_forward_frozen, Mode, NetConfig, ParamKind, ParamStore};
use crate::objective::weighted_bce;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Minimum number of scalars to check; every trainable tensor
    /// contributes at least one. `None` checks every scalar.
    pub samples: Option<usize>,
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the denominator of the relative error.
    pub abs_floor: f64,
    #[serde(skip)]
    pub corrupt_relu_backward: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            samples: Some(500),
            step: 1e-4,
            tolerance: 1e-3,
            abs_floor: 1e-6,
            corrupt_relu_backward: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    /// Scalars compared.
    pub checked: usize,
    /// Compared scalars whose `±step` interval crosses a ReLU or max
    /// switch; they are differenced on the piece containing the base point.
    pub kink_crossings: usize,
    pub tensors: usize,
    pub max_rel_error: f64,
    /// `name[index]` of the scalar with the largest error.
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Fixed objective: weighted cross-entropy against the episode mask, or for
/// linear configurations a fixed random linear functional of the output.
struct Objective {
    query: Tensor<f64>,
    reference: Tensor<f64>,
    target: Tensor<f64>,
    weights: Option<Tensor<f64>>,
}

impl Objective {
    fn value_and_seed(&self, out: &Tensor<f64>, want_seed: bool) -> Result<(f64, Option<Tensor<f64>>)> {
        match &self.weights {
            Some(c) => {
                let v = out.data().iter().zip(c.data()).map(|(a, b)| a * b).sum();
                Ok((v, want_seed.then(|| c.clone())))
            }
            None => {
                let (loss, grad) = weighted_bce(out, &self.target)?;
                Ok((loss.total, want_seed.then_some(grad)))
            }
        }
    }

    /// Objective on the smooth piece selected by `pattern`, and whether the
    /// unconstrained network would have left that piece.
    fn eval(&self, params: &ParamStore<f64>, config: &NetConfig, pattern: &[usize]) -> Result<(f64, bool)> {
        let state = model_forward_frozen(
            &self.query,
            &self.reference,
            params,
            config,
            Mode::Train,
            Some(pattern.to_vec()),
        )?;
        let value = self.value_and_seed(state.output(), false)?.0;
        Ok((value, state.graph().branch_pattern() != pattern))
    }
}

/// Gives every zero-initialized or constant tensor random values so that
/// no gradient vanishes by construction.
fn rerandomize(params: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for (_, p) in params.iter_mut() {
        let d = p.value.data();
        let constant = d.iter().all(|&v| v == d[0]);
        if !constant {
            continue;
        }
        let shape = p.value.shape().to_vec();
        let (lo, hi) = match p.kind {
            ParamKind::Weight if shape.len() == 4 => {
                let a = (3.0 / shape[1..].iter().product::<usize>() as f64).sqrt();
                (-a, a)
            }
            ParamKind::BnScale => (0.5, 1.5),
            ParamKind::RunningStat => continue,
            _ => (-0.1, 0.1),
        };
        for v in p.value.data_mut() {
            *v = rng.gen_range(lo..hi);
        }
    }
}

/// Compares backpropagated gradients with central finite differences at
/// 64-bit precision on one fixed episode.
///
/// Every trainable tensor contributes at least one scalar. The perturbed
/// evaluations keep the ReLU masks and max positions of the unperturbed
/// pass, so a step that crosses a kink still differences the smooth piece
/// whose derivative backpropagation computes.
pub fn gradcheck(config: &NetConfig, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let s = config.input_size;
    let bank = procedural_bank(6, 2, s, opts.seed)?;
    let split = SplitSpec::new(bank.classes().to_vec(), vec![])?;
    let episode = sample_episode_seeded(&bank, &split, Phase::Train, s, opts.seed)?;
    let batch = |t: &Tensor<f32>| -> Result<Tensor<f64>> {
        let mut shape = vec![1];
        shape.extend_from_slice(t.shape());
        t.cast::<f64>().reshape(&shape)
    };
    let weights = config.linear.then(|| {
        let n = s * s;
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0) / n as f64).collect();
        Tensor::from_vec(&[1, 1, s, s], data).expect("sized to the output")
    });
    let objective = Objective {
        query: batch(&episode.query)?,
        reference: batch(&episode.reference)?,
        target: batch(&episode.mask)?,
        weights,
    };

    let mut params: ParamStore<f64> = init_params(config, opts.seed)?;
    rerandomize(&mut params, &mut rng);

    let mut state = model_forward(&objective.query, &objective.reference, &params, config, Mode::Train)?;
    state.corrupt_relu_backward(opts.corrupt_relu_backward);
    let (_, seed) = objective.value_and_seed(state.output(), true)?;
    model_backward(&seed.expect("seed requested"), &state, &mut params)?;
    let base_pattern = state.graph().branch_pattern();
    drop(state);

    let tensors: Vec<(String, usize)> = params
        .iter()
        .filter(|(_, p)| p.kind.trainable())
        .map(|(n, p)| (n.to_string(), p.value.len()))
        .collect();
    let total: usize = tensors.iter().map(|(_, n)| n).sum();
    let wanted = opts.samples.unwrap_or(total).min(total);

    let mut report = GradcheckReport {
        checked: 0,
        kink_crossings: 0,
        tensors: tensors.len(),
        max_rel_error: 0.0,
        worst: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        tolerance: opts.tolerance,
        passed: true,
    };
    let h = opts.step;
    let mut picks: Vec<(usize, usize)> = Vec::new();
    let mut offset = 0;
    let mut taken = vec![false; total];
    for (t, (_, n)) in tensors.iter().enumerate() {
        let i = rng.gen_range(0..*n);
        taken[offset + i] = true;
        picks.push((t, i));
        offset += n;
    }
    let starts: Vec<usize> = tensors
        .iter()
        .scan(0, |acc, (_, n)| {
            let s = *acc;
            *acc += n;
            Some(s)
        })
        .collect();
    for flat in sample(&mut rng, total, total) {
        if picks.len() >= wanted {
            break;
        }
        if !taken[flat] {
            let t = starts.partition_point(|&s| s <= flat) - 1;
            picks.push((t, flat - starts[t]));
        }
    }

    for (t, i) in picks {
        let name = &tensors[t].0;
        let analytic = params.get(name)?.grad.data()[i];
        let original = params.get(name)?.value.data()[i];
        params.get_mut(name)?.value.data_mut()[i] = original + h;
        let (plus, left_plus) = objective.eval(&params, config, &base_pattern)?;
        params.get_mut(name)?.value.data_mut()[i] = original - h;
        let (minus, left_minus) = objective.eval(&params, config, &base_pattern)?;
        params.get_mut(name)?.value.data_mut()[i] = original;
        if left_plus || left_minus {
            report.kink_crossings += 1;
        }
        let numeric = (plus - minus) / (2.0 * h);
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(opts.abs_floor);
        if err > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = err;
            report.worst = format!("{name}[{i}]");
            report.analytic = analytic;
            report.numeric = numeric;
        }
        report.checked += 1;
    }
    report.passed = report.max_rel_error <= opts.tolerance;
    Ok(report)
}

/// Linear variant of a configuration used for the exact-arithmetic check.
/// Each scalar enters its objective at most quadratically, so central
/// differences are exact for any step and a large one keeps round-off low.
pub fn linear_toy(config: &NetConfig) -> NetConfig {
    NetConfig {
        linear: true,
        ..config.clone()
    }
}
