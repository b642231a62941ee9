use crate::dirmaps::{all_directional_maps, DirectionalMap};
use crate::error::{Error, Result};
use crate::graph::{BatchStats, Graph, Var};
use crate::net::{init_params, NetConfig, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch-norm behaviour: batch statistics (and running-average updates) in
/// training, frozen running averages in inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Backbone features of one image batch, finest first.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<V> {
    /// The input image; serves as the full-resolution skip feature.
    pub input: V,
    /// One entry per backbone stage at strides 2, 4, ..., backbone_stride.
    pub stages: Vec<V>,
}

impl<V: Copy> FeaturePyramid<V> {
    /// Deepest stage, the encoder input `P`.
    pub fn deepest(&self) -> V {
        *self.stages.last().expect("pyramid has at least one stage")
    }
}

/// Outputs of the global context metric.
#[derive(Clone, Copy, Debug)]
pub struct RelationVars {
    /// Local relation features `L`.
    pub local: Var,
    /// Per-channel gate `γ`, shaped `(N, C_m, 1, 1)`; `None` when gating is
    /// disabled.
    pub gamma: Option<Var>,
    /// Gated relation scores `S`.
    pub scores: Var,
}

/// Builds the network's computation graph op by op.
pub struct NetGraph<'a, T> {
    pub graph: Graph<T>,
    params: &'a ParamStore<T>,
    config: &'a NetConfig,
    mode: Mode,
    bn_updates: Vec<(String, BatchStats<T>)>,
}

impl<'a, T: Scalar> NetGraph<'a, T> {
    pub fn new(params: &'a ParamStore<T>, config: &'a NetConfig, mode: Mode) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            graph: Graph::new(),
            params,
            config,
            mode,
            bn_updates: Vec::new(),
        })
    }

    fn param(&mut self, name: &str) -> Result<Var> {
        let value = self.params.value(name)?;
        self.graph.param(name, value)
    }

    fn activation(&mut self, x: Var) -> Result<Var> {
        if self.config.linear {
            Ok(x)
        } else {
            self.graph.relu(x)
        }
    }

    fn conv_bn(&mut self, x: Var, prefix: &str, stride: usize) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let k = self.params.value(&format!("{prefix}.weight"))?.shape()[2];
        let y = self.graph.conv2d(x, w, None, stride, k / 2)?;
        if self.config.linear {
            return Ok(y);
        }
        let gamma = self.param(&format!("{prefix}.bn.gamma"))?;
        let beta = self.param(&format!("{prefix}.bn.beta"))?;
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.graph.batch_norm(y, gamma, beta, None, BN_EPS)?;
                if let Some(stats) = stats {
                    self.bn_updates.push((prefix.to_string(), stats));
                }
                Ok(y)
            }
            Mode::Infer => {
                let mean = self.params.value(&format!("{prefix}.bn.running_mean"))?;
                let var = self.params.value(&format!("{prefix}.bn.running_var"))?;
                let (y, _) = self.graph.batch_norm(
                    y,
                    gamma,
                    beta,
                    Some((mean.data(), var.data())),
                    BN_EPS,
                )?;
                Ok(y)
            }
        }
    }

    /// 3×3 convolution + batch-norm + ReLU.
    fn block(&mut self, x: Var, prefix: &str, stride: usize) -> Result<Var> {
        let y = self.conv_bn(x, prefix, stride)?;
        self.activation(y)
    }

    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        self.graph.input(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.graph.value(v)
    }

    /// Strided CNN: per stage a stride-2 conv block followed by one residual
    /// 3×3 block.
    pub fn backbone(&mut self, image: Var) -> Result<FeaturePyramid<Var>> {
        let (_, c, h, w) = self.graph.value(image).dims4()?;
        let s = self.config.input_size;
        if (c, h, w) != (3, s, s) {
            return Err(Error::Shape(format!(
                "image {:?} does not match config input 3x{s}x{s}",
                self.graph.value(image).shape()
            )));
        }
        let mut x = image;
        let mut stages = Vec::with_capacity(self.config.num_stages());
        for st in 0..self.config.num_stages() {
            let a = self.block(x, &format!("encoder.stage{st}.down"), 2)?;
            let r = self.conv_bn(a, &format!("encoder.stage{st}.res"), 1)?;
            let sum = self.graph.add(a, r)?;
            x = self.activation(sum)?;
            stages.push(x);
        }
        Ok(FeaturePyramid {
            input: image,
            stages,
        })
    }

    /// The eight direction-conditioned branches, each `C_d` channels.
    pub fn dir_branches(&mut self, p: Var, maps: &[DirectionalMap]) -> Result<Vec<Var>> {
        let (n, c, h, w) = self.graph.value(p).dims4()?;
        if c % 8 != 0 {
            return Err(Error::Config(format!("{c} channels not divisible by 8")));
        }
        if maps.len() != 8 {
            return Err(Error::Shape(format!("expected 8 directional maps, got {}", maps.len())));
        }
        let mut branches = Vec::with_capacity(8);
        for map in maps {
            if (map.height, map.width) != (h, w) {
                return Err(Error::Shape(format!(
                    "directional map {}x{} for features {h}x{w}",
                    map.height, map.width
                )));
            }
            let mut channel = Vec::with_capacity(n * h * w);
            for _ in 0..n {
                channel.extend(map.values.iter().map(|&v| T::from_f64(v)));
            }
            let d = self.graph.input(Tensor::from_vec(&[n, 1, h, w], channel)?)?;
            let x = self.graph.concat(&[p, d])?;
            branches.push(self.block(x, &format!("encoder.dir.{}", map.direction.name()), 1)?);
        }
        Ok(branches)
    }

    /// Eight direction-conditioned branches joined back to `C_b` channels;
    /// only the join block when DirConv is disabled.
    pub fn dirconv(&mut self, p: Var, maps: &[DirectionalMap]) -> Result<Var> {
        let (_, c, _, _) = self.graph.value(p).dims4()?;
        if c != self.config.backbone_channels {
            return Err(Error::Shape(format!(
                "DirConv input has {c} channels, config expects {}",
                self.config.backbone_channels
            )));
        }
        let joined = if self.config.use_dirconv {
            let branches = self.dir_branches(p, maps)?;
            self.graph.concat(&branches)?
        } else {
            p
        };
        self.block(joined, "encoder.join", 1)
    }

    /// Texture encoder `f_t`: backbone then DirConv on the deepest stage.
    pub fn encode(&mut self, image: Var) -> Result<(Var, FeaturePyramid<Var>)> {
        let pyramid = self.backbone(image)?;
        let fs = self.config.feature_size();
        let maps = all_directional_maps(fs, fs)?;
        let m = self.dirconv(pyramid.deepest(), &maps)?;
        Ok((m, pyramid))
    }

    /// Global context metric on `(reference, query)` embeddings.
    pub fn relation(&mut self, m_ref: Var, m_query: Var) -> Result<RelationVars> {
        let (a, b) = (self.graph.value(m_ref), self.graph.value(m_query));
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!(
                "branch shapes differ: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let cat = self.graph.concat(&[m_ref, m_query])?;
        let l1 = self.block(cat, "metric.block1", 1)?;
        let local = self.block(l1, "metric.block2", 1)?;
        if !self.config.use_gating {
            return Ok(RelationVars {
                local,
                gamma: None,
                scores: local,
            });
        }
        let beta = self.graph.spatial_max(local)?;
        let w1 = self.param("metric.gate1.weight")?;
        let b1 = self.param("metric.gate1.bias")?;
        let hidden = self.graph.conv2d(beta, w1, Some(b1), 1, 0)?;
        let hidden = self.activation(hidden)?;
        let w2 = self.param("metric.gate2.weight")?;
        let b2 = self.param("metric.gate2.bias")?;
        let logits = self.graph.conv2d(hidden, w2, Some(b2), 1, 0)?;
        let gamma = if self.config.linear {
            logits
        } else {
            self.graph.sigmoid(logits)?
        };
        let scores = self.graph.channel_scale(local, gamma)?;
        Ok(RelationVars {
            local,
            gamma: Some(gamma),
            scores,
        })
    }

    /// Skip-connected decoder producing per-pixel probabilities.
    pub fn decode(&mut self, scores: Var, pyramid: &FeaturePyramid<Var>) -> Result<Var> {
        let n = self.config.num_stages();
        if pyramid.stages.len() != n {
            return Err(Error::Shape(format!(
                "pyramid has {} stages, config stride needs {n}",
                pyramid.stages.len()
            )));
        }
        let fs = self.config.feature_size();
        let (_, _, h, w) = self.graph.value(scores).dims4()?;
        if (h, w) != (fs, fs) {
            return Err(Error::Shape(format!("scores at {h}x{w}, expected {fs}x{fs}")));
        }
        let mut x = scores;
        for t in 0..n {
            let up = self.graph.upsample2x(x)?;
            let skip = if t + 1 < n {
                pyramid.stages[n - 2 - t]
            } else {
                pyramid.input
            };
            let cat = self.graph.concat(&[up, skip])?;
            x = self.block(cat, &format!("decoder.stage{t}"), 1)?;
        }
        let w = self.param("decoder.head.weight")?;
        let b = self.param("decoder.head.bias")?;
        let logits = self.graph.conv2d(x, w, Some(b), 1, 0)?;
        if self.config.linear {
            Ok(logits)
        } else {
            self.graph.sigmoid(logits)
        }
    }

    pub fn into_parts(self) -> (Graph<T>, Vec<(String, BatchStats<T>)>) {
        (self.graph, self.bn_updates)
    }
}

fn check_image<T: Scalar>(image: &Tensor<T>, config: &NetConfig) -> Result<()> {
    let (_, c, h, w) = image.dims4()?;
    let s = config.input_size;
    if (c, h, w) != (3, s, s) {
        return Err(Error::Shape(format!(
            "image {:?} does not match config input (N, 3, {s}, {s})",
            image.shape()
        )));
    }
    if image
        .data()
        .iter()
        .any(|&v| v < T::zero() || v > T::one())
    {
        return Err(Error::InvalidArgument("pixel values must lie in [0, 1]".into()));
    }
    Ok(())
}

pub fn backbone_forward<T: Scalar>(
    image: &Tensor<T>,
    params: &ParamStore<T>,
    config: &NetConfig,
    mode: Mode,
) -> Result<FeaturePyramid<Tensor<T>>> {
    check_image(image, config)?;
    let mut net = NetGraph::new(params, config, mode)?;
    let x = net.input(image.clone())?;
    let pyr = net.backbone(x)?;
    Ok(FeaturePyramid {
        input: image.clone(),
        stages: pyr.stages.iter().map(|&v| net.value(v).clone()).collect(),
    })
}

pub fn dirconv_forward<T: Scalar>(
    p: &Tensor<T>,
    maps: &[DirectionalMap],
    params: &ParamStore<T>,
    config: &NetConfig,
    mode: Mode,
) -> Result<Tensor<T>> {
    let mut net = NetGraph::new(params, config, mode)?;
    let x = net.input(p.clone())?;
    let m = net.dirconv(x, maps)?;
    Ok(net.value(m).clone())
}

pub fn encode<T: Scalar>(
    image: &Tensor<T>,
    params: &ParamStore<T>,
    config: &NetConfig,
    mode: Mode,
) -> Result<(Tensor<T>, FeaturePyramid<Tensor<T>>)> {
    check_image(image, config)?;
    let mut net = NetGraph::new(params, config, mode)?;
    let x = net.input(image.clone())?;
    let (m, pyr) = net.encode(x)?;
    let pyramid = FeaturePyramid {
        input: image.clone(),
        stages: pyr.stages.iter().map(|&v| net.value(v).clone()).collect(),
    };
    Ok((net.value(m).clone(), pyramid))
}

/// Relation scores `S` and gate `γ` (shaped `(N, C_m)`, all ones when gating
/// is disabled).
pub fn relation_forward<T: Scalar>(
    m_ref: &Tensor<T>,
    m_query: &Tensor<T>,
    params: &ParamStore<T>,
    config: &NetConfig,
    mode: Mode,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut net = NetGraph::new(params, config, mode)?;
    let a = net.input(m_ref.clone())?;
    let b = net.input(m_query.clone())?;
    let rel = net.relation(a, b)?;
    let scores = net.value(rel.scores).clone();
    let gamma = gamma_matrix(&net.graph, rel, config)?;
    Ok((scores, gamma))
}

fn gamma_matrix<T: Scalar>(graph: &Graph<T>, rel: RelationVars, config: &NetConfig) -> Result<Tensor<T>> {
    let n = graph.value(rel.local).shape()[0];
    match rel.gamma {
        Some(g) => graph.value(g).clone().reshape(&[n, config.metric_channels]),
        None => Ok(Tensor::ones(&[n, config.metric_channels])),
    }
}

pub fn decode<T: Scalar>(
    scores: &Tensor<T>,
    pyramid: &FeaturePyramid<Tensor<T>>,
    params: &ParamStore<T>,
    config: &NetConfig,
    mode: Mode,
) -> Result<Tensor<T>> {
    let mut net = NetGraph::new(params, config, mode)?;
    let s = net.input(scores.clone())?;
    let input = net.input(pyramid.input.clone())?;
    let stages = pyramid
        .stages
        .iter()
        .map(|t| net.input(t.clone()))
        .collect::<Result<_>>()?;
    let a = net.decode(s, &FeaturePyramid { input, stages })?;
    Ok(net.value(a).clone())
}

/// Everything a backward pass needs from a completed forward pass.
pub struct ForwardState<T> {
    graph: Graph<T>,
    output: Var,
    relation: RelationVars,
    m_ref: Var,
    m_query: Var,
    metric_channels: usize,
    bn_updates: Vec<(String, BatchStats<T>)>,
}

impl<T: Scalar> ForwardState<T> {
    /// Segmentation probabilities `A`, shaped `(N, 1, S, S)`.
    pub fn output(&self) -> &Tensor<T> {
        self.graph.value(self.output)
    }

    /// Gate vectors shaped `(N, C_m)`; ones when gating is disabled.
    pub fn gamma(&self) -> Tensor<T> {
        let n = self.graph.value(self.relation.local).shape()[0];
        match self.relation.gamma {
            Some(g) => self
                .graph
                .value(g)
                .clone()
                .reshape(&[n, self.metric_channels])
                .expect("gamma has N*C_m elements"),
            None => Tensor::ones(&[n, self.metric_channels]),
        }
    }

    pub fn local_relation(&self) -> &Tensor<T> {
        self.graph.value(self.relation.local)
    }

    pub fn scores(&self) -> &Tensor<T> {
        self.graph.value(self.relation.scores)
    }

    pub fn reference_embedding(&self) -> &Tensor<T> {
        self.graph.value(self.m_ref)
    }

    pub fn query_embedding(&self) -> &Tensor<T> {
        self.graph.value(self.m_query)
    }

    pub fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    #[doc(hidden)]
    pub fn corrupt_relu_backward(&mut self, on: bool) {
        self.graph.corrupt_relu_backward(on);
    }

    /// Blends the observed batch statistics into the running averages.
    pub fn apply_running_stats(&self, params: &mut ParamStore<T>) -> Result<()> {
        let m = T::from_f64(BN_MOMENTUM);
        let keep = T::one() - m;
        for (prefix, stats) in &self.bn_updates {
            for (suffix, batch) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
                let p = params.get_mut(&format!("{prefix}.bn.{suffix}"))?;
                for (r, &b) in p.value.data_mut().iter_mut().zip(batch.iter()) {
                    *r = keep * *r + m * b;
                }
            }
        }
        Ok(())
    }
}

/// `A = F(Q, R)`: both images pass through the same encoder, the metric sees
/// `(reference, query)` in that order, and the decoder uses the query
/// pyramid.
pub fn model_forward<T: Scalar>(
    query: &Tensor<T>,
    reference: &Tensor<T>,
    params: &ParamStore<T>,
    config: &NetConfig,
    mode: Mode,
) -> Result<ForwardState<T>> {
    model_forward_frozen(query, reference, params, config, mode, None)
}

/// [`model_forward`] evaluated on a fixed branch pattern (see
/// [`Graph::freeze_branches`]).
pub fn model_forward_frozen<T: Scalar>(
    query: &Tensor<T>,
    reference: &Tensor<T>,
    params: &ParamStore<T>,
    config: &NetConfig,
    mode: Mode,
    pattern: Option<Vec<usize>>,
) -> Result<ForwardState<T>> {
    check_image(query, config)?;
    check_image(reference, config)?;
    query.check_same_shape(reference)?;
    let mut net = NetGraph::new(params, config, mode)?;
    if let Some(p) = pattern {
        net.graph.freeze_branches(p);
    }
    let r = net.input(reference.clone())?;
    let q = net.input(query.clone())?;
    let (m_ref, _) = net.encode(r)?;
    let (m_query, pyramid) = net.encode(q)?;
    let relation = net.relation(m_ref, m_query)?;
    let output = net.decode(relation.scores, &pyramid)?;
    let (graph, bn_updates) = net.into_parts();
    Ok(ForwardState {
        graph,
        output,
        relation,
        m_ref,
        m_query,
        metric_channels: config.metric_channels,
        bn_updates,
    })
}

/// Accumulates `d objective / d A = seed` into every trainable gradient.
pub fn model_backward<T: Scalar>(
    seed: &Tensor<T>,
    state: &ForwardState<T>,
    params: &mut ParamStore<T>,
) -> Result<()> {
    for (name, grad) in state.graph.backward(state.output, seed)? {
        params.accumulate_grad(&name, &grad)?;
    }
    Ok(())
}

/// Parameters plus the cached state of the most recent forward pass.
pub struct Model<T> {
    pub config: NetConfig,
    pub params: ParamStore<T>,
    state: Option<ForwardState<T>>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Self::from_params(config, params))
    }

    pub fn from_params(config: NetConfig, params: ParamStore<T>) -> Self {
        Self {
            config,
            params,
            state: None,
        }
    }

    /// Runs the forward pass and caches it. In training mode the batch-norm
    /// running averages are updated.
    pub fn forward(&mut self, query: &Tensor<T>, reference: &Tensor<T>, mode: Mode) -> Result<&ForwardState<T>> {
        let state = model_forward(query, reference, &self.params, &self.config, mode)?;
        if mode == Mode::Train {
            state.apply_running_stats(&mut self.params)?;
        }
        Ok(self.state.insert(state))
    }

    pub fn backward(&mut self, seed: &Tensor<T>) -> Result<()> {
        let state = self
            .state
            .as_ref()
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        model_backward(seed, state, &mut self.params)
    }

    pub fn state(&self) -> Option<&ForwardState<T>> {
        self.state.as_ref()
    }

    pub fn clear_state(&mut self) {
        self.state = None;
    }
}
