//! Two-stream encoder-decoder with unshared encoders and subtraction fusion.
//!
//! Each encoder stage is conv-BN-ReLU twice followed by a learnable 2x2
//! stride-2 downsampling conv. Encoder features of the pre- and post-event
//! streams are fused by elementwise subtraction (`pre - post`) at every
//! scale; the decoder upsamples the fused bottleneck, concatenates the fused
//! skip of the same scale and applies conv-BN-ReLU, and a final 1x1 conv
//! produces the class logits.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    BnMode, BnRunningStats, BnSource, ChannelMoments, Float, ParamId, ParameterStore, Tape,
    Tensor, Var, DEFAULT_BN_EPS, DEFAULT_BN_MOMENTUM,
};

pub const NUM_CLASSES: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of stride-2 downsampling levels of each encoder.
    pub stages: usize,
    /// Channels of the first stage; doubled at every further stage.
    pub base_width: usize,
    pub num_classes: usize,
    pub tied_encoders: bool,
    pub input_channels: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stages: 4,
            base_width: 16,
            num_classes: NUM_CLASSES,
            tied_encoders: false,
            input_channels: 3,
            bn_momentum: DEFAULT_BN_MOMENTUM,
            bn_eps: DEFAULT_BN_EPS,
        }
    }
}

impl ModelConfig {
    pub fn new(stages: usize, base_width: usize) -> Self {
        Self {
            stages,
            base_width,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.stages < 2 {
            return bad("model needs at least 2 stages");
        }
        if self.stages > 12 {
            return bad("more than 12 stages");
        }
        if self.base_width == 0 {
            return bad("base_width must be positive");
        }
        if self.num_classes != NUM_CLASSES {
            return bad("num_classes is fixed at 5");
        }
        if self.input_channels != 3 {
            return bad("inputs are RGB (3 channels)");
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return bad("bn_momentum must lie in (0, 1]");
        }
        if !(self.bn_eps > 0.0) {
            return bad("bn_eps must be positive");
        }
        Ok(())
    }

    pub fn width(&self, stage: usize) -> usize {
        self.base_width << stage
    }

    /// Spatial sizes must be divisible by `2^stages`.
    pub fn check_input_size(&self, h: usize, w: usize) -> Result<()> {
        let div = 1usize << self.stages;
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::shape(
                "model input",
                format!("{h}x{w} not divisible by 2^{} = {div}", self.stages),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Pre,
    Post,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Input(Stream),
    Conv {
        weight: ParamId,
        bias: Option<ParamId>,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        layer: String,
    },
    Relu,
    Upsample2x,
    Sub,
    Concat,
}

/// One node of the declarative layer graph; `inputs` index earlier nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNode {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnLayer<T> {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: BnRunningStats<T>,
    /// Number of BN layers on the longest path from the inputs, this one included.
    pub level: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    pub params: ParameterStore<T>,
    bn: BTreeMap<String, BnLayer<T>>,
    nodes: Vec<LayerNode>,
    node_index: HashMap<String, usize>,
    /// BN level reached by each node (max over its ancestors).
    node_level: Vec<usize>,
}

/// Result of one forward pass.
pub struct ForwardOutput {
    /// Absent when the pass stopped early.
    pub logits: Option<Var>,
    nodes: Vec<Option<Var>>,
    /// Input moments of every BN application, in evaluation order.
    pub moments: Vec<(String, Vec<ChannelMoments>)>,
}

impl ForwardOutput {
    pub fn node(&self, index: usize) -> Option<Var> {
        self.nodes.get(index).copied().flatten()
    }
}

struct Builder<'a, T> {
    rng: ChaCha8Rng,
    config: &'a ModelConfig,
    params: ParameterStore<T>,
    bn: BTreeMap<String, BnLayer<T>>,
    nodes: Vec<LayerNode>,
}

impl<T: Float> Builder<'_, T> {
    fn node(&mut self, name: String, kind: LayerKind, inputs: Vec<usize>) -> usize {
        self.nodes.push(LayerNode { name, kind, inputs });
        self.nodes.len() - 1
    }

    fn he_uniform(&mut self, shape: [usize; 4]) -> Tensor<T> {
        let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let rng = &mut self.rng;
        Tensor::from_fn(&shape, |_| T::of(rng.gen_range(-bound..bound)))
    }

    /// Registers conv (and, when `alias_of` is given, only aliases its names).
    fn conv_params(
        &mut self,
        name: &str,
        shape: [usize; 4],
        bias: bool,
        alias_of: Option<&str>,
    ) -> Result<(ParamId, Option<ParamId>)> {
        if let Some(src) = alias_of {
            let w = self.params.id(&format!("{src}.weight")).expect("aliased weight");
            self.params.alias(format!("{name}.weight"), w)?;
            let b = if bias {
                let b = self.params.id(&format!("{src}.bias")).expect("aliased bias");
                self.params.alias(format!("{name}.bias"), b)?;
                Some(b)
            } else {
                None
            };
            return Ok((w, b));
        }
        let value = self.he_uniform(shape);
        let w = self.params.insert(format!("{name}.weight"), value)?;
        let b = if bias {
            Some(self.params.insert(format!("{name}.bias"), Tensor::zeros(&[shape[0]]))?)
        } else {
            None
        };
        Ok((w, b))
    }

    fn conv(
        &mut self,
        name: &str,
        input: usize,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        alias_of: Option<&str>,
    ) -> Result<usize> {
        let (weight, bias) = self.conv_params(name, [c_out, c_in, k, k], bias, alias_of)?;
        Ok(self.node(
            name.to_string(),
            LayerKind::Conv {
                weight,
                bias,
                stride,
                padding,
            },
            vec![input],
        ))
    }

    fn batch_norm(&mut self, name: &str, input: usize, channels: usize, alias_of: Option<&str>) -> Result<usize> {
        let layer = match alias_of {
            Some(src) => {
                let g = self.params.id(&format!("{src}.gamma")).expect("aliased gamma");
                let b = self.params.id(&format!("{src}.beta")).expect("aliased beta");
                self.params.alias(format!("{name}.gamma"), g)?;
                self.params.alias(format!("{name}.beta"), b)?;
                src.to_string()
            }
            None => {
                let gamma = self.params.insert(format!("{name}.gamma"), Tensor::full(&[channels], T::one()))?;
                let beta = self.params.insert(format!("{name}.beta"), Tensor::zeros(&[channels]))?;
                self.bn.insert(
                    name.to_string(),
                    BnLayer {
                        gamma,
                        beta,
                        stats: BnRunningStats::new(channels, self.config.bn_momentum, self.config.bn_eps),
                        level: 0,
                    },
                );
                name.to_string()
            }
        };
        Ok(self.node(name.to_string(), LayerKind::BatchNorm { layer }, vec![input]))
    }

    /// conv3x3 - BN - ReLU; returns the ReLU node.
    fn cbr(&mut self, prefix: &str, idx: usize, input: usize, c_in: usize, c_out: usize, alias_prefix: Option<&str>) -> Result<usize> {
        let conv_name = format!("{prefix}.conv{idx}");
        let bn_name = format!("{prefix}.bn{idx}");
        let alias_conv = alias_prefix.map(|p| format!("{p}.conv{idx}"));
        let alias_bn = alias_prefix.map(|p| format!("{p}.bn{idx}"));
        let c = self.conv(&conv_name, input, c_in, c_out, 3, 1, 1, false, alias_conv.as_deref())?;
        let b = self.batch_norm(&bn_name, c, c_out, alias_bn.as_deref())?;
        Ok(self.node(format!("{prefix}.relu{idx}"), LayerKind::Relu, vec![b]))
    }

    /// Returns per-stage skip features and the bottleneck node.
    fn encoder(&mut self, stream: Stream) -> Result<(Vec<usize>, usize)> {
        let (name, alias) = match stream {
            Stream::Pre => ("enc_pre", None),
            Stream::Post => ("enc_post", self.config.tied_encoders.then_some("enc_pre")),
        };
        let mut x = self.node(format!("input_{}", &name[4..]), LayerKind::Input(stream), vec![]);
        let mut c_in = self.config.input_channels;
        let mut skips = Vec::new();
        for s in 0..self.config.stages {
            let w = self.config.width(s);
            let prefix = format!("{name}.s{s}");
            let alias_prefix = alias.map(|a| format!("{a}.s{s}"));
            let h = self.cbr(&prefix, 1, x, c_in, w, alias_prefix.as_deref())?;
            let h = self.cbr(&prefix, 2, h, w, w, alias_prefix.as_deref())?;
            skips.push(h);
            let alias_down = alias_prefix.map(|p| format!("{p}.down"));
            x = self.conv(&format!("{prefix}.down"), h, w, w, 2, 2, 0, true, alias_down.as_deref())?;
            c_in = w;
        }
        Ok((skips, x))
    }

    fn build(mut self) -> Result<Model<T>> {
        let (pre_skips, pre_bottom) = self.encoder(Stream::Pre)?;
        let (post_skips, post_bottom) = self.encoder(Stream::Post)?;
        let stages = self.config.stages;
        let fused: Vec<usize> = (0..stages)
            .map(|s| self.node(format!("fuse.s{s}"), LayerKind::Sub, vec![pre_skips[s], post_skips[s]]))
            .collect();
        let mut d = self.node("fuse.bottleneck".into(), LayerKind::Sub, vec![pre_bottom, post_bottom]);
        let mut c_d = self.config.width(stages - 1);
        for s in (0..stages).rev() {
            let w = self.config.width(s);
            let prefix = format!("dec.s{s}");
            let up = self.node(format!("{prefix}.up"), LayerKind::Upsample2x, vec![d]);
            let cat = self.node(format!("{prefix}.cat"), LayerKind::Concat, vec![up, fused[s]]);
            d = self.cbr(&prefix, 1, cat, c_d + w, w, None)?;
            c_d = w;
        }
        self.conv("head", d, c_d, self.config.num_classes, 1, 1, 0, true, None)?;
        Model::from_parts(self.config.clone(), self.params, self.bn, self.nodes)
    }
}

impl<T: Float> Model<T> {
    /// Builds the network with He-uniform conv weights drawn from `seed`.
    pub fn build_two_stream(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Builder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            config,
            params: ParameterStore::new(),
            bn: BTreeMap::new(),
            nodes: Vec::new(),
        }
        .build()
    }

    fn from_parts(
        config: ModelConfig,
        params: ParameterStore<T>,
        mut bn: BTreeMap<String, BnLayer<T>>,
        nodes: Vec<LayerNode>,
    ) -> Result<Self> {
        let mut node_level = vec![0usize; nodes.len()];
        for (i, node) in nodes.iter().enumerate() {
            let upstream = node.inputs.iter().map(|&j| node_level[j]).max().unwrap_or(0);
            node_level[i] = match &node.kind {
                LayerKind::BatchNorm { layer } => {
                    let level = upstream + 1;
                    let entry = bn.get_mut(layer).ok_or_else(|| Error::UnknownName(layer.clone()))?;
                    entry.level = entry.level.max(level);
                    level
                }
                _ => upstream,
            };
        }
        let node_index = nodes.iter().enumerate().map(|(i, n)| (n.name.clone(), i)).collect();
        Ok(Self {
            config,
            params,
            bn,
            nodes,
            node_index,
            node_level,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.node_index.get(name).copied()
    }

    pub fn bn_layers(&self) -> &BTreeMap<String, BnLayer<T>> {
        &self.bn
    }

    pub fn bn_layer(&self, name: &str) -> Result<&BnLayer<T>> {
        self.bn.get(name).ok_or_else(|| Error::UnknownName(name.to_string()))
    }

    pub fn max_bn_level(&self) -> usize {
        self.bn.values().map(|l| l.level).max().unwrap_or(0)
    }

    /// Replaces the running statistics of one BN layer.
    pub fn set_running_stats(&mut self, layer: &str, mean: &[f64], var: &[f64]) -> Result<()> {
        let entry = self.bn.get_mut(layer).ok_or_else(|| Error::UnknownName(layer.to_string()))?;
        let c = entry.stats.channels();
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("set_running_stats", format!("{} values for {c} channels", mean.len())));
        }
        if var.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::OutOfRange(format!("negative variance for `{layer}`")));
        }
        entry.stats.running_mean = mean.iter().map(|&v| T::of(v)).collect();
        entry.stats.running_var = var.iter().map(|&v| T::of(v)).collect();
        Ok(())
    }

    pub fn bn_stats_mut(&mut self, layer: &str) -> Result<&mut BnRunningStats<T>> {
        self.bn
            .get_mut(layer)
            .map(|l| &mut l.stats)
            .ok_or_else(|| Error::UnknownName(layer.to_string()))
    }

    /// Folds train-mode batch moments into the running statistics.
    pub fn apply_bn_updates(&mut self, moments: &[(String, Vec<ChannelMoments>)]) -> Result<()> {
        for (layer, m) in moments {
            self.bn_stats_mut(layer)?.update(m)?;
        }
        Ok(())
    }

    /// Full forward pass; `mode` applies to every BN layer.
    pub fn forward(&self, tape: &mut Tape<T>, pre: &Tensor<T>, post: &Tensor<T>, mode: BnMode) -> Result<ForwardOutput> {
        self.forward_partial(tape, pre, post, mode, None)
    }

    /// Forward pass that, given `stop_level = Some(k)`, evaluates only the
    /// nodes needed to reach the inputs of the level-`k` BN layers.
    pub fn forward_partial(
        &self,
        tape: &mut Tape<T>,
        pre: &Tensor<T>,
        post: &Tensor<T>,
        mode: BnMode,
        stop_level: Option<usize>,
    ) -> Result<ForwardOutput> {
        let (n, c, h, w) = pre.dims4()?;
        if pre.shape() != post.shape() {
            return Err(Error::shape("model input", format!("pre {:?} vs post {:?}", pre.shape(), post.shape())));
        }
        if c != self.config.input_channels || n == 0 {
            return Err(Error::shape("model input", format!("expected N>0 x 3 x H x W, got {:?}", pre.shape())));
        }
        self.config.check_input_size(h, w)?;

        let needed = stop_level.map(|k| self.nodes_needed_for_level(k));
        let mut params: HashMap<ParamId, Var> = HashMap::new();
        let mut vars: Vec<Option<Var>> = vec![None; self.nodes.len()];
        let mut moments = Vec::new();
        let mut param_var = |tape: &mut Tape<T>, id: ParamId| *params.entry(id).or_insert_with(|| tape.param(&self.params, id));

        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(needed) = &needed {
                if !needed[i] {
                    continue;
                }
            }
            let input = |k: usize| vars[node.inputs[k]].expect("inputs precede their consumers");
            let v = match &node.kind {
                LayerKind::Input(Stream::Pre) => tape.constant(pre.clone()),
                LayerKind::Input(Stream::Post) => tape.constant(post.clone()),
                LayerKind::Conv {
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    let x = input(0);
                    let wv = param_var(tape, *weight);
                    let bv = bias.map(|b| param_var(tape, b));
                    tape.conv2d(x, wv, bv, *stride, *padding)?
                }
                LayerKind::BatchNorm { layer } => {
                    let x = input(0);
                    let entry = &self.bn[layer];
                    if stop_level == Some(entry.level) {
                        // Only the input moments are wanted at the stopping level.
                        let m = crate::nn::norm::input_moments(tape.value(x))?;
                        moments.push((layer.clone(), m));
                        continue;
                    }
                    let g = param_var(tape, entry.gamma);
                    let b = param_var(tape, entry.beta);
                    let source = match mode {
                        BnMode::Train => BnSource::Batch { eps: entry.stats.eps },
                        BnMode::Eval | BnMode::Collect => BnSource::Fixed {
                            mean: &entry.stats.running_mean,
                            var: &entry.stats.running_var,
                            eps: entry.stats.eps,
                        },
                    };
                    let (out, m) = tape.batch_norm(x, g, b, source)?;
                    if mode != BnMode::Eval {
                        moments.push((layer.clone(), m));
                    }
                    out
                }
                LayerKind::Relu => tape.relu(input(0)),
                LayerKind::Upsample2x => tape.upsample_nearest2x(input(0))?,
                LayerKind::Sub => tape.sub(input(0), input(1))?,
                LayerKind::Concat => tape.concat_channels(input(0), input(1))?,
            };
            vars[i] = Some(v);
        }
        let logits = if stop_level.is_some() { None } else { vars.last().copied().flatten() };
        Ok(ForwardOutput {
            logits,
            nodes: vars,
            moments,
        })
    }

    /// Marks the ancestors of every BN node at `level` (the BN nodes included).
    fn nodes_needed_for_level(&self, level: usize) -> Vec<bool> {
        let mut needed = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate().rev() {
            let is_target = matches!(&node.kind, LayerKind::BatchNorm { layer } if self.bn[layer].level == level);
            if is_target || needed[i] {
                needed[i] = true;
                for &j in &node.inputs {
                    needed[j] = true;
                }
            }
        }
        // Stop before anything at or past the target level that is not needed.
        for (i, flag) in needed.iter_mut().enumerate() {
            if *flag && self.node_level[i] > level {
                *flag = false;
            }
        }
        needed
    }

    /// Converts every tensor to another element type.
    pub fn cast<U: Float>(&self) -> Model<U> {
        let mut params = ParameterStore::<U>::new();
        for p in self.params.iter() {
            params.insert(p.name.clone(), p.value.cast()).expect("unique names");
        }
        let mut aliases: Vec<(String, ParamId)> = Vec::new();
        for (name, id) in self.params.names() {
            if self.params.get(id).name != name {
                aliases.push((name.to_string(), id));
            }
        }
        for (name, id) in aliases {
            params.alias(name, id).expect("alias target");
        }
        let bn = self
            .bn
            .iter()
            .map(|(k, l)| {
                (
                    k.clone(),
                    BnLayer {
                        gamma: l.gamma,
                        beta: l.beta,
                        stats: BnRunningStats {
                            running_mean: l.stats.running_mean.iter().map(|v| U::of(v.as_f64())).collect(),
                            running_var: l.stats.running_var.iter().map(|v| U::of(v.as_f64())).collect(),
                            momentum: l.stats.momentum,
                            eps: l.stats.eps,
                            num_batches_tracked: l.stats.num_batches_tracked,
                        },
                        level: l.level,
                    },
                )
            })
            .collect();
        Model {
            config: self.config.clone(),
            params,
            bn,
            nodes: self.nodes.clone(),
            node_index: self.node_index.clone(),
            node_level: self.node_level.clone(),
        }
    }

    /// Learnable values and BN buffers, detached from the graph.
    pub fn state(&self) -> ModelState<T> {
        ModelState {
            params: self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
            bn: self
                .bn
                .iter()
                .map(|(k, l)| (k.clone(), l.stats.clone()))
                .collect(),
        }
    }

    pub fn load_state(&mut self, state: &ModelState<T>) -> Result<()> {
        if state.params.len() != self.params.len() || state.bn.len() != self.bn.len() {
            return Err(Error::Checkpoint("state does not match the model topology".into()));
        }
        for (name, value) in &state.params {
            let id = self.params.id(name).ok_or_else(|| Error::UnknownName(name.clone()))?;
            let p = self.params.get_mut(id);
            if p.value.shape() != value.shape() {
                return Err(Error::shape("load_state", format!("`{name}`: {:?} vs {:?}", p.value.shape(), value.shape())));
            }
            p.value = value.clone();
        }
        for (name, stats) in &state.bn {
            let entry = self.bn.get_mut(name).ok_or_else(|| Error::UnknownName(name.clone()))?;
            if entry.stats.channels() != stats.channels() {
                return Err(Error::shape("load_state", format!("BN `{name}` channel count")));
            }
            entry.stats = stats.clone();
        }
        Ok(())
    }
}

/// Parameter values (canonical names, insertion order) plus BN buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    pub params: Vec<(String, Tensor<T>)>,
    pub bn: BTreeMap<String, BnRunningStats<T>>,
}

/// Stacks per-sample `H x W x 3` u8 images into an `N x 3 x H x W` tensor in [0, 1].
pub fn images_to_tensor<T: Float>(images: &[&[u8]], h: usize, w: usize) -> Result<Tensor<T>> {
    let plane = h * w;
    let mut data = vec![T::zero(); images.len() * 3 * plane];
    let scale = T::of(1.0 / 255.0);
    for (i, img) in images.iter().enumerate() {
        if img.len() != plane * 3 {
            return Err(Error::shape("images_to_tensor", format!("{} bytes for {h}x{w}x3", img.len())));
        }
        for p in 0..plane {
            for c in 0..3 {
                data[(i * 3 + c) * plane + p] = T::of(img[p * 3 + c] as f64) * scale;
            }
        }
    }
    Tensor::new(vec![images.len(), 3, h, w], data)
}

/// Per-pixel argmax over the class axis; ties resolve to the lowest index.
pub fn argmax_classes<T: Float>(logits: &Tensor<T>) -> Result<Vec<u8>> {
    let (n, k, h, w) = logits.dims4()?;
    let plane = h * w;
    let mut out = vec![0u8; n * plane];
    for b in 0..n {
        for p in 0..plane {
            let mut best = 0usize;
            let mut best_v = logits.data()[b * k * plane + p];
            for c in 1..k {
                let v = logits.data()[(b * k + c) * plane + p];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            out[b * plane + p] = best as u8;
        }
    }
    Ok(out)
}
