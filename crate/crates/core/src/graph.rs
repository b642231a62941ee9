//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every op evaluated during a forward pass together with
//! whatever it needs for its backward rule. Parameters are leaves keyed by
//! name; requesting the same name twice yields the same leaf, so a module
//! evaluated on two inputs shares its weights structurally and receives the
//! sum of both gradient contributions.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Input,
    Param,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu {
        input: Var,
        /// Pass-through mask when branches are frozen.
        mask: Option<Vec<bool>>,
    },
    Sigmoid(Var),
    Add(Var, Var),
    Concat(Vec<Var>),
    Upsample2x(Var),
    SpatialMax {
        input: Var,
        argmax: Vec<usize>,
    },
    ChannelScale {
        input: Var,
        scale: Var,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Relu { .. } => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Add(..) => "add",
            Op::Concat(_) => "concat",
            Op::Upsample2x(_) => "upsample2x",
            Op::SpatialMax { .. } => "spatial_max",
            Op::ChannelScale { .. } => "channel_scale",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics observed by a training-mode batch-norm, used to update
/// running averages.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance.
    pub var: Vec<T>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    param_order: Vec<String>,
    corrupt_relu_backward: bool,
    frozen: Option<(Vec<usize>, usize)>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            param_order: Vec::new(),
            corrupt_relu_backward: false,
            frozen: None,
        }
    }

    /// Negative-control fixture: ReLU passes gradients through unmasked.
    #[doc(hidden)]
    pub fn corrupt_relu_backward(&mut self, on: bool) {
        self.corrupt_relu_backward = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Side of every non-differentiable point the recorded evaluation lies
    /// on: whether each ReLU input is positive and which element each
    /// spatial max selected. Two evaluations with equal patterns lie in the
    /// same smooth piece.
    pub fn branch_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { input, .. } => out.extend(
                    self.nodes[input.0]
                        .value
                        .data()
                        .iter()
                        .map(|&x| usize::from(x > T::zero())),
                ),
                Op::SpatialMax { argmax, .. } => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        out
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        let node = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.name(),
                node,
            });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(node))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Input, false)
    }

    /// Leaf for a named parameter. The first call registers `value`; later
    /// calls with the same name return the existing leaf.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let v = self.push(value.clone(), Op::Param, true)?;
        self.params.insert(name.to_string(), v);
        self.param_order.push(name.to_string());
        Ok(v)
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    /// Names of every parameter leaf, in registration order.
    pub fn param_names(&self) -> &[String] {
        &self.param_order
    }

    /// 2-D convolution with square kernel and symmetric zero padding.
    /// `weight` is `(C_out, C_in, k, k)`, `bias` is `(C_out,)`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let (n, c_in, h, wd) = x.dims4()?;
        let (c_out, wc_in, k, k2) = w.dims4()?;
        if wc_in != c_in || k != k2 {
            return Err(Error::Shape(format!(
                "conv2d: input {:?} incompatible with kernel {:?}",
                x.shape(),
                w.shape()
            )));
        }
        if stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::Shape(format!(
                "conv2d: kernel {k} stride {stride} does not fit input {h}x{wd}"
            )));
        }
        let geom = ConvGeom::new(c_in, h, wd, k, stride, pad);
        let (ho, wo) = (geom.ho, geom.wo);
        let p = ho * wo;
        let kk = c_in * k * k;
        let mut out = Tensor::zeros(&[n, c_out, ho, wo]);
        let mut cols = if geom.is_identity() {
            Vec::new()
        } else {
            vec![T::zero(); kk * p]
        };
        for i in 0..n {
            let xi = x.item(i);
            let colbuf: &[T] = if geom.is_identity() {
                xi
            } else {
                geom.im2col(xi, &mut cols);
                &cols
            };
            T::gemm(
                c_out,
                kk,
                p,
                T::one(),
                w.data(),
                kk as isize,
                1,
                colbuf,
                p as isize,
                1,
                T::zero(),
                out.item_mut(i),
                p as isize,
                1,
            );
        }
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.shape() != [c_out] {
                return Err(Error::Shape(format!(
                    "conv2d: bias {:?} for {c_out} output channels",
                    bv.shape()
                )));
            }
            let bd = bv.data().to_vec();
            for i in 0..n {
                for (co, chunk) in out.item_mut(i).chunks_mut(p).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = *v + bd[co]);
                }
            }
        }
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            rg,
        )
    }

    /// Per-channel batch normalization. With `running = None` the batch
    /// statistics are used (training) and returned; otherwise the supplied
    /// running mean and variance are used (inference).
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        if g.len() != c || b.len() != c {
            return Err(Error::Shape(format!(
                "batch_norm: {c} channels but affine params of length {}/{}",
                g.len(),
                b.len()
            )));
        }
        let hw = h * w;
        let m = n * hw;
        let eps = T::from_f64(eps);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let stats;
        match running {
            None => {
                let mf = T::from_f64(m as f64);
                for (ch, mu) in mean.iter_mut().enumerate() {
                    let mut s = 0.0f64;
                    for i in 0..n {
                        s += x.item(i)[ch * hw..(ch + 1) * hw]
                            .iter()
                            .map(|v| v.as_f64())
                            .sum::<f64>();
                    }
                    *mu = T::from_f64(s / m as f64);
                }
                for ch in 0..c {
                    let mu = mean[ch];
                    let mut s = T::zero();
                    for i in 0..n {
                        for &v in &x.item(i)[ch * hw..(ch + 1) * hw] {
                            s = s + (v - mu) * (v - mu);
                        }
                    }
                    var[ch] = s / mf;
                }
                let unbiased = if m > 1 {
                    let f = T::from_f64(m as f64 / (m - 1) as f64);
                    var.iter().map(|&v| v * f).collect()
                } else {
                    var.clone()
                };
                stats = Some(BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                });
            }
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return Err(Error::Shape("batch_norm: running stats length".into()));
                }
                mean.copy_from_slice(rm);
                var.copy_from_slice(rv);
                stats = None;
            }
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = Tensor::zeros(x.shape());
        for i in 0..n {
            let xi = x.item(i);
            let base = i * c * hw;
            let oi = out.item_mut(i);
            for ch in 0..c {
                for p in ch * hw..(ch + 1) * hw {
                    let xh = (xi[p] - mean[ch]) * inv_std[ch];
                    xhat[base + p] = xh;
                    oi[p] = g[ch] * xh + b[ch];
                }
            }
        }
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: running.is_none(),
            },
            rg,
        )?;
        Ok((v, stats))
    }

    /// Evaluate subsequent ReLUs and spatial maxima on the branches recorded
    /// in `pattern` (as returned by [`Graph::branch_pattern`] for the same
    /// sequence of ops) rather than on the ones their inputs select. The
    /// result is the smooth piece of the function containing the recorded
    /// point.
    pub fn freeze_branches(&mut self, pattern: Vec<usize>) {
        self.frozen = Some((pattern, 0));
    }

    fn take_frozen(&mut self, n: usize) -> Result<Option<Vec<usize>>> {
        match &mut self.frozen {
            None => Ok(None),
            Some((pattern, pos)) => {
                let part = pattern
                    .get(*pos..*pos + n)
                    .ok_or_else(|| Error::State("frozen branch pattern exhausted".into()))?
                    .to_vec();
                *pos += n;
                Ok(Some(part))
            }
        }
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let n = self.value(input).len();
        let mask: Option<Vec<bool>> = self.take_frozen(n)?.map(|p| p.into_iter().map(|b| b == 1).collect());
        let out = match &mask {
            None => self.value(input).map(|v| v.max(T::zero())),
            Some(m) => {
                let x = self.value(input);
                let data = x.data().iter().zip(m).map(|(&v, &on)| if on { v } else { T::zero() }).collect();
                Tensor::from_vec(x.shape(), data)?
            }
        };
        let rg = self.rg(input);
        self.push(out, Op::Relu { input, mask }, rg)
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let out = self.value(input).map(sigmoid);
        let rg = self.rg(input);
        self.push(out, Op::Sigmoid(input), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let (n, _, h, w) = self.value(*first).dims4()?;
        let mut c_total = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::Shape(format!(
                    "concat: {:?} vs {:?}",
                    self.value(*first).shape(),
                    self.value(p).shape()
                )));
            }
            c_total += pc;
        }
        let mut out = Tensor::zeros(&[n, c_total, h, w]);
        for i in 0..n {
            let mut off = 0;
            for &p in parts {
                let src = self.nodes[p.0].value.item(i);
                out.item_mut(i)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::Concat(parts.to_vec()), rg)
    }

    /// Bilinear ×2 upsampling (half-pixel centers, edge clamped).
    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        let ys = upsample_taps(h);
        let xs = upsample_taps(w);
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = Tensor::zeros(&[n, c, h2, w2]);
        for i in 0..n {
            let xi = x.item(i);
            let oi = out.item_mut(i);
            for ch in 0..c {
                let src = &xi[ch * h * w..(ch + 1) * h * w];
                let dst = &mut oi[ch * h2 * w2..(ch + 1) * h2 * w2];
                for (oy, ty) in ys.iter().enumerate() {
                    for (ox, tx) in xs.iter().enumerate() {
                        let v = |y: usize, x: usize| src[y * w + x].as_f64();
                        let top = tx.w0 * v(ty.i0, tx.i0) + tx.w1 * v(ty.i0, tx.i1);
                        let bot = tx.w0 * v(ty.i1, tx.i0) + tx.w1 * v(ty.i1, tx.i1);
                        dst[oy * w2 + ox] = T::from_f64(ty.w0 * top + ty.w1 * bot);
                    }
                }
            }
        }
        let rg = self.rg(input);
        self.push(out, Op::Upsample2x(input), rg)
    }

    /// Per-channel maximum over the spatial axes, shaped `(N, C, 1, 1)`.
    /// Ties resolve to the first position in row-major order.
    pub fn spatial_max(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let hw = h * w;
        if hw == 0 {
            return Err(Error::Shape("spatial_max over empty map".into()));
        }
        if let Some(argmax) = self.take_frozen(n * c)? {
            let x = self.value(input);
            let mut out = Tensor::zeros(&[n, c, 1, 1]);
            for i in 0..n {
                for ch in 0..c {
                    let p = argmax[i * c + ch];
                    if p >= hw {
                        return Err(Error::State("frozen argmax out of range".into()));
                    }
                    out.item_mut(i)[ch] = x.item(i)[ch * hw + p];
                }
            }
            let rg = self.rg(input);
            return self.push(out, Op::SpatialMax { input, argmax }, rg);
        }
        let x = self.value(input);
        let mut out = Tensor::zeros(&[n, c, 1, 1]);
        let mut argmax = Vec::with_capacity(n * c);
        for i in 0..n {
            let xi = x.item(i);
            for ch in 0..c {
                let plane = &xi[ch * hw..(ch + 1) * hw];
                let mut best = 0;
                for (p, &v) in plane.iter().enumerate() {
                    if v > plane[best] {
                        best = p;
                    }
                }
                argmax.push(best);
                out.item_mut(i)[ch] = plane[best];
            }
        }
        let rg = self.rg(input);
        self.push(out, Op::SpatialMax { input, argmax }, rg)
    }

    /// `out[n, c, :, :] = input[n, c, :, :] * scale[n, c]` with `scale`
    /// shaped `(N, C, 1, 1)`.
    pub fn channel_scale(&mut self, input: Var, scale: Var) -> Result<Var> {
        let x = self.value(input);
        let s = self.value(scale);
        let (n, c, h, w) = x.dims4()?;
        if s.shape() != [n, c, 1, 1] {
            return Err(Error::Shape(format!(
                "channel_scale: scale {:?} for input {:?}",
                s.shape(),
                x.shape()
            )));
        }
        let hw = h * w;
        let mut out = x.clone();
        for i in 0..n {
            let si = s.item(i).to_vec();
            for (ch, plane) in out.item_mut(i).chunks_mut(hw).enumerate() {
                plane.iter_mut().for_each(|v| *v = *v * si[ch]);
            }
        }
        let rg = self.rg(input) || self.rg(scale);
        self.push(out, Op::ChannelScale { input, scale }, rg)
    }

    /// Propagates `seed` (the gradient of the objective with respect to
    /// `output`) back through the graph and returns the gradient of every
    /// parameter leaf that received one, in registration order.
    pub fn backward(&self, output: Var, seed: &Tensor<T>) -> Result<Vec<(String, Tensor<T>)>> {
        if output.0 >= self.nodes.len() {
            return Err(Error::State("backward on a variable of another graph".into()));
        }
        self.value(output).check_same_shape(seed)?;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed.clone());
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Param) {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &dy, &mut grads)?;
        }
        let mut out = Vec::with_capacity(self.param_order.len());
        for name in &self.param_order {
            let v = self.params[name];
            if let Some(g) = grads[v.0].take() {
                out.push((name.clone(), g));
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.rg(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn backward_node(&self, idx: usize, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (n, c_in, h, wd) = x.dims4()?;
                let (c_out, _, k, _) = w.dims4()?;
                let geom = ConvGeom::new(c_in, h, wd, k, *stride, *pad);
                let p = geom.ho * geom.wo;
                let kk = c_in * k * k;
                let need_dx = self.rg(*input);
                let need_dw = self.rg(*weight);
                let mut dw = Tensor::zeros(w.shape());
                let mut dx = if need_dx {
                    Some(Tensor::zeros(x.shape()))
                } else {
                    None
                };
                let mut cols = vec![T::zero(); if geom.is_identity() { 0 } else { kk * p }];
                let mut dcols = vec![T::zero(); kk * p];
                for i in 0..n {
                    let dyi = dy.item(i);
                    if need_dw {
                        let colbuf: &[T] = if geom.is_identity() {
                            x.item(i)
                        } else {
                            geom.im2col(x.item(i), &mut cols);
                            &cols
                        };
                        // dW += dY (c_out x p) * cols^T (p x kk)
                        T::gemm(
                            c_out,
                            p,
                            kk,
                            T::one(),
                            dyi,
                            p as isize,
                            1,
                            colbuf,
                            1,
                            p as isize,
                            T::one(),
                            dw.data_mut(),
                            kk as isize,
                            1,
                        );
                    }
                    if let Some(dx) = dx.as_mut() {
                        // dcols = W^T (kk x c_out) * dY (c_out x p)
                        T::gemm(
                            kk,
                            c_out,
                            p,
                            T::one(),
                            w.data(),
                            1,
                            kk as isize,
                            dyi,
                            p as isize,
                            1,
                            T::zero(),
                            &mut dcols,
                            p as isize,
                            1,
                        );
                        if geom.is_identity() {
                            dx.item_mut(i).copy_from_slice(&dcols);
                        } else {
                            geom.col2im(&dcols, dx.item_mut(i));
                        }
                    }
                }
                if need_dw {
                    self.accumulate(grads, *weight, dw)?;
                }
                if let Some(dx) = dx {
                    self.accumulate(grads, *input, dx)?;
                }
                if let Some(b) = bias {
                    let mut db = Tensor::zeros(&[c_out]);
                    for i in 0..n {
                        for (co, chunk) in dy.item(i).chunks(p).enumerate() {
                            db.data_mut()[co] = db.data()[co] + chunk.iter().copied().sum::<T>();
                        }
                    }
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, h, w) = dy.dims4()?;
                let hw = h * w;
                let g = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for i in 0..n {
                    let dyi = dy.item(i);
                    let base = i * c * hw;
                    for ch in 0..c {
                        for p in ch * hw..(ch + 1) * hw {
                            dgamma[ch] = dgamma[ch] + dyi[p] * xhat[base + p];
                            dbeta[ch] = dbeta[ch] + dyi[p];
                        }
                    }
                }
                if self.rg(*input) {
                    let mut dx = Tensor::zeros(dy.shape());
                    let mf = T::from_f64((n * hw) as f64);
                    for i in 0..n {
                        let dyi = dy.item(i);
                        let base = i * c * hw;
                        let dxi = dx.item_mut(i);
                        for ch in 0..c {
                            let scale = g[ch] * inv_std[ch];
                            for p in ch * hw..(ch + 1) * hw {
                                dxi[p] = if *batch_stats {
                                    // sum(dxhat) = gamma * dbeta, sum(dxhat*xhat) = gamma * dgamma
                                    scale * (dyi[p] - (dbeta[ch] + xhat[base + p] * dgamma[ch]) / mf)
                                } else {
                                    scale * dyi[p]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *input, dx)?;
                }
                self.accumulate(grads, *gamma, Tensor::from_vec(&[c], dgamma)?)?;
                self.accumulate(grads, *beta, Tensor::from_vec(&[c], dbeta)?)?;
            }
            Op::Relu { input, mask } => {
                let x = self.value(*input);
                let mut dx = dy.clone();
                if !self.corrupt_relu_backward {
                    for (p, (d, &xv)) in dx.data_mut().iter_mut().zip(x.data()).enumerate() {
                        let on = match mask {
                            Some(m) => m[p],
                            None => xv > T::zero(),
                        };
                        if !on {
                            *d = T::zero();
                        }
                    }
                }
                self.accumulate(grads, *input, dx)?;
            }
            Op::Sigmoid(input) => {
                let mut dx = dy.clone();
                for (d, &yv) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    *d = *d * yv * (T::one() - yv);
                }
                self.accumulate(grads, *input, dx)?;
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone())?;
                self.accumulate(grads, *b, dy.clone())?;
            }
            Op::Concat(parts) => {
                let n = dy.shape()[0];
                let mut off = 0;
                for &p in parts {
                    let shape = self.value(p).shape().to_vec();
                    let per = shape[1..].iter().product::<usize>();
                    if self.rg(p) {
                        let mut g = Tensor::zeros(&shape);
                        for i in 0..n {
                            g.item_mut(i).copy_from_slice(&dy.item(i)[off..off + per]);
                        }
                        self.accumulate(grads, p, g)?;
                    }
                    off += per;
                }
            }
            Op::Upsample2x(input) => {
                let x = self.value(*input);
                let (n, c, h, w) = x.dims4()?;
                let ys = upsample_taps(h);
                let xs = upsample_taps(w);
                let (h2, w2) = (2 * h, 2 * w);
                let mut dx = vec![0.0f64; x.len()];
                for i in 0..n {
                    let dyi = dy.item(i);
                    for ch in 0..c {
                        let src = &dyi[ch * h2 * w2..(ch + 1) * h2 * w2];
                        let base = (i * c + ch) * h * w;
                        for (oy, ty) in ys.iter().enumerate() {
                            for (ox, tx) in xs.iter().enumerate() {
                                let g = src[oy * w2 + ox].as_f64();
                                dx[base + ty.i0 * w + tx.i0] += g * ty.w0 * tx.w0;
                                dx[base + ty.i0 * w + tx.i1] += g * ty.w0 * tx.w1;
                                dx[base + ty.i1 * w + tx.i0] += g * ty.w1 * tx.w0;
                                dx[base + ty.i1 * w + tx.i1] += g * ty.w1 * tx.w1;
                            }
                        }
                    }
                }
                let dx = Tensor::from_vec(x.shape(), dx.into_iter().map(T::from_f64).collect())?;
                self.accumulate(grads, *input, dx)?;
            }
            Op::SpatialMax { input, argmax } => {
                let x = self.value(*input);
                let (n, c, h, w) = x.dims4()?;
                let hw = h * w;
                let mut dx = Tensor::zeros(x.shape());
                for i in 0..n {
                    for ch in 0..c {
                        let g = dy.item(i)[ch];
                        dx.item_mut(i)[ch * hw + argmax[i * c + ch]] = g;
                    }
                }
                self.accumulate(grads, *input, dx)?;
            }
            Op::ChannelScale { input, scale } => {
                let x = self.value(*input);
                let s = self.value(*scale);
                let (n, c, h, w) = x.dims4()?;
                let hw = h * w;
                if self.rg(*input) {
                    let mut dx = dy.clone();
                    for i in 0..n {
                        let si = s.item(i).to_vec();
                        for (ch, plane) in dx.item_mut(i).chunks_mut(hw).enumerate() {
                            plane.iter_mut().for_each(|v| *v = *v * si[ch]);
                        }
                    }
                    self.accumulate(grads, *input, dx)?;
                }
                let mut ds = Tensor::zeros(s.shape());
                for i in 0..n {
                    let (xi, dyi) = (x.item(i), dy.item(i));
                    for ch in 0..c {
                        ds.item_mut(i)[ch] = xi[ch * hw..(ch + 1) * hw]
                            .iter()
                            .zip(&dyi[ch * hw..(ch + 1) * hw])
                            .map(|(&a, &b)| a * b)
                            .sum();
                    }
                }
                self.accumulate(grads, *scale, ds)?;
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    i1: usize,
    w0: f64,
    w1: f64,
}

fn upsample_taps(len: usize) -> Vec<Tap> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            let frac = src - i0 as f64;
            Tap {
                i0,
                i1,
                w0: 1.0 - frac,
                w1: frac,
            }
        })
        .collect()
}

/// Index bookkeeping for im2col-style convolution of one batch item.
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Self {
            c,
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
        }
    }

    fn is_identity(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Row `(c*k + ki)*k + kj`, column `oy*wo + ox`.
    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let p = self.ho * self.wo;
        for c in 0..self.c {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = ((c * self.k + ki) * self.k + kj) * p;
                    let dst = &mut cols[row..row + p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]; accumulates into `dx`.
    fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let p = self.ho * self.wo;
        for c in 0..self.c {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = ((c * self.k + ki) * self.k + kj) * p;
                    let src = &cols[row..row + p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let line = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                line[ix as usize] = line[ix as usize] + src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
