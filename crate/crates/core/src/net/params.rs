use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dirmaps::Direction;
use crate::error::{Error, Result};
use crate::net::NetConfig;
use crate::tensor::{Scalar, Tensor};

/// Role of a stored tensor; decides trainability and weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    BnScale,
    BnShift,
    /// Batch-norm running mean or variance; not trainable.
    RunningStat,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        self != ParamKind::RunningStat
    }

    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Bias)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub kind: ParamKind,
}

/// Ordered, name-addressed registry of network tensors and their gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    entries: Vec<Param<T>>,
    index: HashMap<String, usize>,
    has_grads: bool,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            entries: Vec::new(),
            index: HashMap::new(),
            has_grads: false,
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>, kind: ParamKind) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.names.push(name.to_string());
        self.entries.push(Param {
            grad: Tensor::zeros(value.shape()),
            value,
            kind,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i]),
            None => Err(Error::UnknownParam(name.to_string())),
        }
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(name)?.value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.names.iter().map(String::as_str).zip(&self.entries)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.names.iter().map(String::as_str).zip(self.entries.iter_mut())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Total number of scalars across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.kind.trainable())
            .map(|p| p.value.len())
            .sum()
    }

    /// Adds `grad` into the gradient buffer of `name`.
    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor<T>) -> Result<()> {
        let p = self.get_mut(name)?;
        if !p.kind.trainable() {
            return Err(Error::State(format!("gradient for non-trainable `{name}`")));
        }
        p.grad.add_assign(grad)?;
        self.has_grads = true;
        Ok(())
    }

    /// Whether a backward pass has populated gradients since the last
    /// [`ParamStore::zero_grad`].
    pub fn has_grads(&self) -> bool {
        self.has_grads
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.entries {
            p.grad.fill(T::zero());
        }
        self.has_grads = false;
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    kind: p.kind,
                })
                .collect(),
            index: self.index.clone(),
            has_grads: self.has_grads,
        }
    }
}

/// Parameter layout of a configuration, without values.
pub(crate) fn layout(config: &NetConfig) -> Vec<(String, Vec<usize>, ParamKind, Init)> {
    let mut out = Vec::new();
    let conv = |out: &mut Vec<_>, prefix: &str, c_out: usize, c_in: usize, k: usize| {
        out.push((
            format!("{prefix}.weight"),
            vec![c_out, c_in, k, k],
            ParamKind::Weight,
            Init::FanIn(c_in * k * k),
        ));
        if !config.linear {
            // residual branches start switched off
            let scale = if prefix.ends_with(".res") { Init::Zero } else { Init::One };
            out.push((format!("{prefix}.bn.gamma"), vec![c_out], ParamKind::BnScale, scale));
            out.push((format!("{prefix}.bn.beta"), vec![c_out], ParamKind::BnShift, Init::Zero));
            out.push((
                format!("{prefix}.bn.running_mean"),
                vec![c_out],
                ParamKind::RunningStat,
                Init::Zero,
            ));
            out.push((
                format!("{prefix}.bn.running_var"),
                vec![c_out],
                ParamKind::RunningStat,
                Init::One,
            ));
        }
    };
    let n = config.num_stages();
    let cb = config.backbone_channels;
    for s in 0..n {
        let c_in = if s == 0 { 3 } else { config.stage_channels(s - 1) };
        let c = config.stage_channels(s);
        conv(&mut out, &format!("encoder.stage{s}.down"), c, c_in, 3);
        conv(&mut out, &format!("encoder.stage{s}.res"), c, c, 3);
    }
    if config.use_dirconv {
        for d in Direction::ALL {
            conv(
                &mut out,
                &format!("encoder.dir.{}", d.name()),
                config.dir_branch_channels,
                cb + 1,
                3,
            );
        }
    }
    conv(&mut out, "encoder.join", cb, cb, 3);
    let cm = config.metric_channels;
    conv(&mut out, "metric.block1", cm, 2 * cb, 3);
    conv(&mut out, "metric.block2", cm, cm, 3);
    if config.use_gating {
        let hidden = cm / config.gate_reduction;
        out.push(("metric.gate1.weight".into(), vec![hidden, cm, 1, 1], ParamKind::Weight, Init::FanIn(cm)));
        out.push(("metric.gate1.bias".into(), vec![hidden], ParamKind::Bias, Init::Zero));
        out.push(("metric.gate2.weight".into(), vec![cm, hidden, 1, 1], ParamKind::Weight, Init::Zero));
        out.push(("metric.gate2.bias".into(), vec![cm], ParamKind::Bias, Init::Zero));
    }
    let mut c_prev = cm;
    for t in 0..n {
        let c = config.decoder_channels(t);
        conv(&mut out, &format!("decoder.stage{t}"), c, c_prev + config.skip_channels(t), 3);
        c_prev = c;
    }
    out.push(("decoder.head.weight".into(), vec![1, c_prev, 1, 1], ParamKind::Weight, Init::Zero));
    out.push(("decoder.head.bias".into(), vec![1], ParamKind::Bias, Init::Zero));
    out
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    Zero,
    One,
    /// Uniform in `±sqrt(6 / fan_in)`.
    FanIn(usize),
}

/// Fresh parameters for `config`, deterministic in `seed`.
///
/// Convolution kernels are He-uniform; batch-norm scales start at 1 (0 on
/// residual branches, so every backbone stage starts as its down block) and
/// shifts at 0. The last gate layer and the decoder head start at zero so an
/// untrained network gates neutrally (γ = 0.5) and predicts 0.5 everywhere.
pub fn init_params<T: Scalar>(config: &NetConfig, seed: u64) -> Result<ParamStore<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape, kind, init) in layout(config) {
        let len: usize = shape.iter().product();
        let data = match init {
            Init::Zero => vec![T::zero(); len],
            Init::One => vec![T::one(); len],
            Init::FanIn(fan_in) => {
                let bound = (6.0 / fan_in as f64).sqrt();
                (0..len)
                    .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
                    .collect()
            }
        };
        store.insert(&name, Tensor::from_vec(&shape, data)?, kind)?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = init_params::<f32>(&NetConfig::tiny(), 7).unwrap();
        let b = init_params::<f32>(&NetConfig::tiny(), 7).unwrap();
        let c = init_params::<f32>(&NetConfig::tiny(), 8).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().zip(c.iter()).any(|((_, x), (_, y))| x.value != y.value));
    }

    #[test]
    fn bn_affine_and_zero_layers() {
        let store = init_params::<f32>(&NetConfig::tiny(), 3).unwrap();
        for (name, p) in store.iter() {
            match p.kind {
                ParamKind::BnShift => assert!(p.value.data().iter().all(|&v| v == 0.0), "{name}"),
                ParamKind::BnScale => {
                    let want = if name.contains(".res.") { 0.0 } else { 1.0 };
                    assert!(p.value.data().iter().all(|&v| v == want), "{name}");
                }
                _ => {}
            }
        }
        assert!(store.value("decoder.head.weight").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(store.value("metric.gate2.weight").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_is_registered_once() {
        let store = init_params::<f32>(&NetConfig::tiny(), 0).unwrap();
        let encoders = store.names().iter().filter(|n| n.as_str() == "encoder.join.weight").count();
        assert_eq!(encoders, 1);
        assert!(store.names().iter().all(|n| !n.contains("query") && !n.contains("reference")));
    }

    #[test]
    fn ablation_drops_optional_modules() {
        let store = init_params::<f32>(&NetConfig::tiny().with_ablation(false, false), 0).unwrap();
        assert!(!store.names().iter().any(|n| n.starts_with("encoder.dir.") || n.starts_with("metric.gate")));
        assert!(store.contains("encoder.join.weight"));
    }

    #[test]
    fn accumulate_rejects_running_stats_and_unknown_names() {
        let mut store = init_params::<f32>(&NetConfig::tiny(), 0).unwrap();
        let g = Tensor::zeros(&[16]);
        assert!(store.accumulate_grad("encoder.stage0.down.bn.running_mean", &g).is_err());
        assert!(matches!(store.accumulate_grad("nope", &g), Err(Error::UnknownParam(_))));
        assert!(!store.has_grads());
        store.accumulate_grad("encoder.stage0.down.bn.gamma", &g).unwrap();
        assert!(store.has_grads());
    }
}
