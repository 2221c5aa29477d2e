//! Reverse-mode tape. Every op appends a node holding its output value and
//! whatever it needs for the backward pass; `backward` walks the nodes in
//! reverse insertion order, which is a valid reverse topological order.

use crate::error::{Error, Result};
use crate::nn::conv::{self, ConvGeometry};
use crate::nn::norm::{self, BnSource, ChannelMoments};
use crate::nn::{Float, ParamId, ParameterStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Constant,
    Leaf,
    Param(ParamId),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geometry: ConvGeometry,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu(Var),
    Upsample2x(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ConcatChannels(Var, Var),
    Sum(Var),
    WeightedCe {
        logits: Var,
        probs: Vec<T>,
        targets: Vec<u8>,
        weights: Vec<T>,
        weight_total: f64,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    grad_enabled: bool,
    backward_done: bool,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Float>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
            backward_done: false,
        }
    }

    /// A tape that records values only; nothing on it can be differentiated.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A differentiable input that is not a stored parameter.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParameterStore<T>, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id), true)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geometry = ConvGeometry::new(
            self.value(input).shape(),
            self.value(weight).shape(),
            bias.map(|b| self.value(b).shape()),
            stride,
            padding,
        )?;
        let out = conv::forward(
            &geometry,
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
        );
        check_finite("conv2d", &out)?;
        let needs = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
            },
            needs,
        ))
    }

    /// Normalizes per channel and applies `gamma`/`beta`. Always returns the
    /// exact moments of the input batch so callers can update running stats
    /// (train) or accumulate adaptation statistics (collect).
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        source: BnSource<'_, T>,
    ) -> Result<(Var, Vec<ChannelMoments>)> {
        let needs = self.needs(input) || self.needs(gamma) || self.needs(beta);
        let fwd = norm::forward(
            self.value(input),
            self.value(gamma).data(),
            self.value(beta).data(),
            source,
            needs,
        )?;
        check_finite("batchnorm", &fwd.output)?;
        let var = self.push(
            fwd.output,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat: fwd.xhat,
                inv_std: fwd.inv_std,
                batch_stats: matches!(source, BnSource::Batch { .. }),
            },
            needs,
        );
        Ok((var, fwd.moments))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self
            .value(input)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        let needs = self.needs(input);
        self.push(out, Op::Relu(input), needs)
    }

    pub fn upsample_nearest2x(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * c * h2 * w2];
        for nc in 0..n * c {
            let src = &x.data()[nc * h * w..(nc + 1) * h * w];
            let dst = &mut out[nc * h2 * w2..(nc + 1) * h2 * w2];
            for r in 0..h2 {
                for col in 0..w2 {
                    dst[r * w2 + col] = src[(r / 2) * w + col / 2];
                }
            }
        }
        let out = Tensor::new(vec![n, c, h2, w2], out)?;
        let needs = self.needs(input);
        Ok(self.push(out, Op::Upsample2x(input), needs))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, bool)> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape(name, format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        check_finite(name, &out)?;
        Ok((out, self.needs(a) || self.needs(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, needs) = self.binary("add", a, b, |p, q| p + q)?;
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, needs) = self.binary("sub", a, b, |p, q| p - q)?;
        Ok(self.push(out, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, needs) = self.binary("mul", a, b, |p, q| p * q)?;
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    /// Concatenates two `N x C x H x W` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let (n, ca, h, w) = x.dims4()?;
        let (nb, cb, hb, wb) = y.dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", x.shape(), y.shape()),
            ));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        for i in 0..n {
            out.extend_from_slice(&x.data()[i * ca * plane..(i + 1) * ca * plane]);
            out.extend_from_slice(&y.data()[i * cb * plane..(i + 1) * cb * plane]);
        }
        let out = Tensor::new(vec![n, ca + cb, h, w], out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::ConcatChannels(a, b), needs))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let total: f64 = self.value(input).data().iter().map(|v| v.as_f64()).sum();
        let out = Tensor::scalar(T::of(total));
        check_finite("sum", &out)?;
        let needs = self.needs(input);
        Ok(self.push(out, Op::Sum(input), needs))
    }

    /// Class-weighted softmax cross-entropy, normalized by the total weight of
    /// the target pixels: `sum w[t] * -log p[t] / sum w[t]`.
    pub fn weighted_softmax_ce(&mut self, logits: Var, targets: &[u8], weights: &[T]) -> Result<Var> {
        let z = self.value(logits);
        let (n, k, h, w) = z.dims4()?;
        let plane = h * w;
        if targets.len() != n * plane {
            return Err(Error::shape(
                "weighted_softmax_ce",
                format!("{} targets for {} pixels", targets.len(), n * plane),
            ));
        }
        if weights.len() != k {
            return Err(Error::shape(
                "weighted_softmax_ce",
                format!("{} class weights for {k} classes", weights.len()),
            ));
        }
        if weights.iter().any(|&v| !(v > T::zero())) {
            return Err(Error::OutOfRange("class weights must be positive".into()));
        }
        if let Some(&t) = targets.iter().find(|&&t| t as usize >= k) {
            return Err(Error::OutOfRange(format!("target class {t} with {k} classes")));
        }
        let mut probs = vec![T::zero(); z.numel()];
        let (mut loss_sum, mut weight_total) = (0.0f64, 0.0f64);
        for b in 0..n {
            for p in 0..plane {
                let at = |c: usize| (b * k + c) * plane + p;
                let mut mx = f64::NEG_INFINITY;
                for c in 0..k {
                    mx = mx.max(z.data()[at(c)].as_f64());
                }
                let mut se = 0.0f64;
                for c in 0..k {
                    se += (z.data()[at(c)].as_f64() - mx).exp();
                }
                let lse = mx + se.ln();
                for c in 0..k {
                    probs[at(c)] = T::of((z.data()[at(c)].as_f64() - lse).exp());
                }
                let t = targets[b * plane + p] as usize;
                let wt = weights[t].as_f64();
                loss_sum += wt * (lse - z.data()[at(t)].as_f64());
                weight_total += wt;
            }
        }
        let out = Tensor::scalar(T::of(loss_sum / weight_total));
        check_finite("weighted_softmax_ce", &out)?;
        let needs = self.needs(logits);
        Ok(self.push(
            out,
            Op::WeightedCe {
                logits,
                probs: if needs { probs } else { Vec::new() },
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                weight_total,
            },
            needs,
        ))
    }

    /// Accumulates d(loss)/d(param) into `store` for every parameter reachable
    /// from `loss`. Parameters the loss does not depend on keep their current
    /// (normally zero) gradient.
    pub fn backward(&mut self, loss: Var, store: &mut ParameterStore<T>) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&shape, T::one()));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            check_finite("backward", &g)?;
            self.backprop_node(idx, &g, &mut grads, store);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(
        &self,
        idx: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        store: &mut ParameterStore<T>,
    ) {
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let mut send = |v: Var, t: Tensor<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &self.nodes[idx].op {
            Op::Constant | Op::Leaf => {}
            Op::Param(id) => store.accumulate_grad(*id, g),
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
            } => {
                let cg = conv::backward(
                    geometry,
                    self.value(*input),
                    self.value(*weight),
                    g,
                    needs(*input),
                    needs(*weight),
                    bias.is_some_and(needs),
                );
                if let Some(dx) = cg.input {
                    send(*input, dx);
                }
                if let Some(dw) = cg.weight {
                    send(*weight, dw);
                }
                if let (Some(b), Some(db)) = (bias, cg.bias) {
                    send(*b, db);
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
                let gamma_t = self.value(*gamma);
                let bg = norm::backward(
                    self.value(*input).shape(),
                    g,
                    xhat,
                    inv_std,
                    gamma_t.data(),
                    *batch_stats,
                );
                let c = gamma_t.numel();
                send(*input, bg.input);
                send(*gamma, Tensor::new(vec![c], bg.gamma).expect("dgamma"));
                send(*beta, Tensor::new(vec![c], bg.beta).expect("dbeta"));
            }
            Op::Relu(input) => {
                let x = self.value(*input);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                send(*input, Tensor::new(x.shape().to_vec(), data).expect("relu grad"));
            }
            Op::Upsample2x(input) => {
                let x = self.value(*input);
                let (n, c, h, w) = x.dims4().expect("rank 4");
                let w2 = 2 * w;
                let mut dx = vec![T::zero(); x.numel()];
                for nc in 0..n * c {
                    let src = &g.data()[nc * 4 * h * w..(nc + 1) * 4 * h * w];
                    for r in 0..h {
                        for col in 0..w {
                            let top = 2 * r * w2 + 2 * col;
                            dx[nc * h * w + r * w + col] =
                                src[top] + src[top + 1] + src[top + w2] + src[top + w2 + 1];
                        }
                    }
                }
                send(*input, Tensor::new(x.shape().to_vec(), dx).expect("upsample grad"));
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let da = g.data().iter().zip(y.data()).map(|(&gv, &yv)| gv * yv).collect();
                let db = g.data().iter().zip(x.data()).map(|(&gv, &xv)| gv * xv).collect();
                send(*a, Tensor::new(x.shape().to_vec(), da).expect("mul grad"));
                send(*b, Tensor::new(y.shape().to_vec(), db).expect("mul grad"));
            }
            Op::ConcatChannels(a, b) => {
                let (n, ca, h, w) = self.value(*a).dims4().expect("rank 4");
                let cb = self.value(*b).dims4().expect("rank 4").1;
                let plane = h * w;
                let mut da = Vec::with_capacity(n * ca * plane);
                let mut db = Vec::with_capacity(n * cb * plane);
                for i in 0..n {
                    let base = i * (ca + cb) * plane;
                    da.extend_from_slice(&g.data()[base..base + ca * plane]);
                    db.extend_from_slice(&g.data()[base + ca * plane..base + (ca + cb) * plane]);
                }
                send(*a, Tensor::new(vec![n, ca, h, w], da).expect("concat grad"));
                send(*b, Tensor::new(vec![n, cb, h, w], db).expect("concat grad"));
            }
            Op::Sum(input) => {
                let shape = self.value(*input).shape().to_vec();
                send(*input, Tensor::full(&shape, g.data()[0]));
            }
            Op::WeightedCe {
                logits,
                probs,
                targets,
                weights,
                weight_total,
            } => {
                let z = self.value(*logits);
                let (n, k, h, w) = z.dims4().expect("rank 4");
                let plane = h * w;
                let upstream = g.data()[0].as_f64();
                let mut dz = vec![T::zero(); z.numel()];
                for b in 0..n {
                    for p in 0..plane {
                        let t = targets[b * plane + p] as usize;
                        let scale = upstream * weights[t].as_f64() / weight_total;
                        for c in 0..k {
                            let at = (b * k + c) * plane + p;
                            let indicator = if c == t { 1.0 } else { 0.0 };
                            dz[at] = T::of(scale * (probs[at].as_f64() - indicator));
                        }
                    }
                }
                send(*logits, Tensor::new(z.shape().to_vec(), dz).expect("ce grad"));
            }
        }
    }
}
