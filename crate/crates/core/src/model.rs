//! The attention 3D U-Net: a 4-level (by default) encoder of residual context
//! modules with stride-2 downsampling convs, a repeat-upsampling decoder with
//! localization modules, deep-supervision heads summed element-wise into a
//! softmax output, and squeeze-and-excitation channel attention at a
//! configurable position.
//!
//! Every conv is followed by instance norm and leaky ReLU. Parameters are
//! initialized Glorot-uniform from per-name seed streams, so a layer's
//! initial weights do not depend on which other layers exist.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{glorot_uniform, Graph, NodeId, Rng, Scalar, Shape5, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionPosition {
    None,
    Downsample,
    Middle,
    Upsample,
}

impl AttentionPosition {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "downsample" => Ok(Self::Downsample),
            "middle" => Ok(Self::Middle),
            "upsample" => Ok(Self::Upsample),
            other => Err(Error::ConfigInvalid(format!(
                "unknown attention position `{other}` (expected none|downsample|middle|upsample)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Downsample => "downsample",
            Self::Middle => "middle",
            Self::Upsample => "upsample",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    /// Number of stride-2 downsamplings.
    pub levels: usize,
    pub base_channels: usize,
    pub p_drop: f64,
    pub leaky_slope: f64,
    pub se_ratio: usize,
    pub attention: AttentionPosition,
    pub out_classes: usize,
    /// Cube side of the network input.
    pub input_dims: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            base_channels: 16,
            p_drop: 0.3,
            leaky_slope: 0.01,
            se_ratio: 16,
            attention: AttentionPosition::Middle,
            out_classes: 3,
            input_dims: 128,
        }
    }
}

impl NetworkConfig {
    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::ConfigInvalid("levels must be >= 1".into()));
        }
        if self.base_channels == 0 || self.out_classes == 0 {
            return Err(Error::ConfigInvalid(
                "base_channels and out_classes must be >= 1".into(),
            ));
        }
        if self.input_dims % (1 << self.levels) != 0 {
            return Err(Error::ConfigInvalid(format!(
                "input side {} not divisible by 2^{}",
                self.input_dims, self.levels
            )));
        }
        if self.attention != AttentionPosition::None {
            if self.se_ratio == 0 {
                return Err(Error::ConfigInvalid("se_ratio must be >= 1".into()));
            }
            for c in self.se_channels() {
                if c % self.se_ratio != 0 {
                    return Err(Error::ConfigInvalid(format!(
                        "SE ratio {} does not divide channel width {c}",
                        self.se_ratio
                    )));
                }
            }
        }
        if !(0.0..1.0).contains(&self.p_drop) {
            return Err(Error::ConfigInvalid(format!(
                "p_drop must be in [0, 1), got {}",
                self.p_drop
            )));
        }
        Ok(())
    }

    /// Channel widths at every SE insertion point of the configured position.
    fn se_channels(&self) -> Vec<usize> {
        match self.attention {
            AttentionPosition::None => vec![],
            AttentionPosition::Downsample => {
                (0..self.levels).map(|l| self.channels_at(l)).collect()
            }
            AttentionPosition::Middle => vec![
                self.channels_at(self.levels),
                self.channels_at(self.levels - 1),
            ],
            AttentionPosition::Upsample => {
                (0..self.levels).map(|l| self.channels_at(l)).collect()
            }
        }
    }

    pub fn n_heads(&self) -> usize {
        self.levels.min(3)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ParamKind {
    /// Glorot-uniform conv or dense kernel.
    Weight,
    /// Zero-initialized bias.
    Bias,
    /// Instance-norm scale, initialized to one.
    Gamma,
    /// Instance-norm shift, initialized to zero.
    Beta,
}

/// Ordered (name, shape) pairs of every parameter for a config; the same
/// layout drives initialization, serialization and loading.
pub fn parameter_layout(config: &NetworkConfig) -> Result<Vec<(String, Shape5)>> {
    Ok(layout_with_kind(config)?
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect())
}

fn layout_with_kind(config: &NetworkConfig) -> Result<Vec<(String, Shape5, ParamKind)>> {
    config.validate()?;
    let mut out: Vec<(String, Shape5, ParamKind)> = Vec::new();
    // Convs feeding an instance norm carry no bias: the norm subtracts the
    // per-channel mean, so such a bias would be an exactly-dead parameter.
    let mut conv = |out_v: &mut Vec<(String, Shape5, ParamKind)>,
                    prefix: &str,
                    oc: usize,
                    ic: usize,
                    k: usize,
                    norm: bool| {
        out_v.push((format!("{prefix}.conv.w"), [oc, ic, k, k, k], ParamKind::Weight));
        if norm {
            out_v.push((format!("{prefix}.norm.gamma"), [oc, 1, 1, 1, 1], ParamKind::Gamma));
            out_v.push((format!("{prefix}.norm.beta"), [oc, 1, 1, 1, 1], ParamKind::Beta));
        } else {
            out_v.push((format!("{prefix}.conv.b"), [oc, 1, 1, 1, 1], ParamKind::Bias));
        }
    };
    let se = |out_v: &mut Vec<(String, Shape5, ParamKind)>, prefix: &str, c: usize, r: usize| {
        let hidden = c / r;
        out_v.push((format!("{prefix}.fc1.w"), [hidden, c, 1, 1, 1], ParamKind::Weight));
        out_v.push((format!("{prefix}.fc1.b"), [hidden, 1, 1, 1, 1], ParamKind::Bias));
        out_v.push((format!("{prefix}.fc2.w"), [c, hidden, 1, 1, 1], ParamKind::Weight));
        out_v.push((format!("{prefix}.fc2.b"), [c, 1, 1, 1, 1], ParamKind::Bias));
    };

    let base = config.base_channels;
    conv(&mut out, "enc.in", base, 1, 3, true);
    for lvl in 0..=config.levels {
        let ch = config.channels_at(lvl);
        if lvl > 0 {
            conv(&mut out, &format!("enc.l{lvl}.down"), ch, ch / 2, 3, true);
        }
        conv(&mut out, &format!("enc.l{lvl}.ctx.c1"), ch, ch, 3, true);
        conv(&mut out, &format!("enc.l{lvl}.ctx.c2"), ch, ch, 3, true);
        if config.attention == AttentionPosition::Downsample && lvl < config.levels {
            se(&mut out, &format!("se.enc.l{lvl}"), ch, config.se_ratio);
        }
        if config.attention == AttentionPosition::Middle && lvl == config.levels {
            se(&mut out, "se.mid.bottom", ch, config.se_ratio);
        }
    }
    for t in (0..config.levels).rev() {
        let ch = config.channels_at(t);
        conv(&mut out, &format!("dec.l{t}.up"), ch, ch * 2, 3, true);
        if config.attention == AttentionPosition::Middle && t == config.levels - 1 {
            se(&mut out, "se.mid.up", ch, config.se_ratio);
        }
        conv(&mut out, &format!("dec.l{t}.loc3"), ch, ch * 2, 3, true);
        conv(&mut out, &format!("dec.l{t}.loc1"), ch, ch, 1, true);
        if config.attention == AttentionPosition::Upsample {
            se(&mut out, &format!("se.dec.l{t}"), ch, config.se_ratio);
        }
    }
    for t in 0..config.n_heads() {
        conv(&mut out, &format!("head.l{t}"), config.out_classes, config.channels_at(t), 1, false);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

/// Architecture description plus its parameter store.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub config: NetworkConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    index: BTreeMap<String, usize>,
}

/// Build the network with Glorot-uniform weights drawn from per-layer-name
/// substreams of `seed`.
pub fn build_network<T: Scalar>(config: &NetworkConfig, seed: u64) -> Result<Model<T>> {
    let layout = layout_with_kind(config)?;
    let mut names = Vec::with_capacity(layout.len());
    let mut params = Vec::with_capacity(layout.len());
    let mut index = BTreeMap::new();
    for (name, shape, kind) in layout {
        let t = match kind {
            ParamKind::Weight => glorot_uniform(shape, &mut Rng::derive(seed, &name)),
            ParamKind::Bias | ParamKind::Beta => Tensor::zeros(shape),
            ParamKind::Gamma => Tensor::filled(shape, T::one()),
        };
        index.insert(name.clone(), params.len());
        names.push(name);
        params.push(t);
    }
    Ok(Model {
        config: config.clone(),
        names,
        params,
        index,
    })
}

impl<T: Scalar> Model<T> {
    pub fn from_parts(config: NetworkConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let layout = parameter_layout(&config)?;
        if layout.len() != named.len() {
            return Err(Error::ConfigInvalid(format!(
                "expected {} parameters, got {}",
                layout.len(),
                named.len()
            )));
        }
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut index = BTreeMap::new();
        for ((name, tensor), (want_name, want_shape)) in named.into_iter().zip(layout) {
            if name != want_name || tensor.shape() != want_shape {
                return Err(Error::ConfigInvalid(format!(
                    "parameter {name} {:?} does not match layout entry {want_name} {want_shape:?}",
                    tensor.shape()
                )));
            }
            index.insert(name.clone(), params.len());
            names.push(name);
            params.push(tensor);
        }
        Ok(Self {
            config,
            names,
            params,
            index,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn count_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Drop SE parameters and disable attention; the remaining parameters
    /// keep their values.
    pub fn strip_attention(&self) -> Model<T> {
        let mut config = self.config.clone();
        config.attention = AttentionPosition::None;
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut index = BTreeMap::new();
        for (name, tensor) in self.names.iter().zip(&self.params) {
            if name.starts_with("se.") {
                continue;
            }
            index.insert(name.clone(), params.len());
            names.push(name.clone());
            params.push(tensor.clone());
        }
        Model {
            config,
            names,
            params,
            index,
        }
    }

    /// Record the full forward pass on a tape. The caller can read the output
    /// via `graph.value(out)` and run `graph.backward` for training.
    pub fn forward_traced(
        &self,
        input: Tensor<T>,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<(Graph<'_, T>, NodeId)> {
        let s = self.config.input_dims;
        if input.shape()[1] != 1 || input.shape()[2] != s || input.shape()[3] != s
            || input.shape()[4] != s
        {
            return Err(Error::ShapeMismatch {
                op: "forward",
                detail: format!(
                    "expected (n, 1, {s}, {s}, {s}), got {:?}",
                    input.shape()
                ),
            });
        }
        let mut g = Graph::new(&self.params);
        let x = g.input(input);
        let out = self.assemble(&mut g, x, mode, rng)?;
        Ok((g, out))
    }

    /// Class probabilities per voxel (softmax over channels).
    pub fn forward(&self, input: Tensor<T>, mode: Mode, rng: &mut Rng) -> Result<Tensor<T>> {
        let (g, out) = self.forward_traced(input, mode, rng)?;
        Ok(g.value(out).clone())
    }

    fn p(&self, g: &mut Graph<'_, T>, name: &str) -> NodeId {
        let idx = self.index[name];
        g.param(idx)
    }

    /// conv (no bias) + instance norm + leaky ReLU.
    fn conv_block(
        &self,
        g: &mut Graph<'_, T>,
        x: NodeId,
        prefix: &str,
        stride: usize,
    ) -> Result<NodeId> {
        let w = self.p(g, &format!("{prefix}.conv.w"));
        let gamma = self.p(g, &format!("{prefix}.norm.gamma"));
        let beta = self.p(g, &format!("{prefix}.norm.beta"));
        let y = g.conv3d_opt(x, w, None, stride)?;
        let y = g.instance_norm(y, gamma, beta, T::from_f64(1e-5));
        Ok(g.leaky_relu(y, T::from_f64(self.config.leaky_slope)))
    }

    fn context(
        &self,
        g: &mut Graph<'_, T>,
        x: NodeId,
        lvl: usize,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<NodeId> {
        let p = ContextParamIds::from_model(self, g, lvl);
        context_module(
            g,
            x,
            &p,
            self.config.p_drop,
            T::from_f64(self.config.leaky_slope),
            rng,
            mode == Mode::Train,
        )
    }

    fn se(&self, g: &mut Graph<'_, T>, x: NodeId, prefix: &str) -> Result<NodeId> {
        let p = SeParamIds {
            fc1_w: self.p(g, &format!("{prefix}.fc1.w")),
            fc1_b: self.p(g, &format!("{prefix}.fc1.b")),
            fc2_w: self.p(g, &format!("{prefix}.fc2.w")),
            fc2_b: self.p(g, &format!("{prefix}.fc2.b")),
        };
        se_block(g, x, &p)
    }

    fn assemble(
        &self,
        g: &mut Graph<'_, T>,
        x: NodeId,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<NodeId> {
        let cfg = &self.config;
        let levels = cfg.levels;

        // Encoder.
        let mut skips: Vec<NodeId> = Vec::with_capacity(levels + 1);
        let mut cur = self.conv_block(g, x, "enc.in", 1)?;
        for lvl in 0..=levels {
            if lvl > 0 {
                cur = self.conv_block(g, cur, &format!("enc.l{lvl}.down"), 2)?;
            }
            cur = self.context(g, cur, lvl, mode, rng)?;
            if cfg.attention == AttentionPosition::Downsample && lvl < levels {
                cur = self.se(g, cur, &format!("se.enc.l{lvl}"))?;
            }
            if cfg.attention == AttentionPosition::Middle && lvl == levels {
                cur = self.se(g, cur, "se.mid.bottom")?;
            }
            skips.push(cur);
        }

        // Decoder with deep-supervision heads on the finest n_heads outputs.
        let mut head_maps: Vec<NodeId> = Vec::new();
        for t in (0..levels).rev() {
            let up = g.upsample_repeat(cur, 2);
            let mut u = self.conv_block(g, up, &format!("dec.l{t}.up"), 1)?;
            if cfg.attention == AttentionPosition::Middle && t == levels - 1 {
                u = self.se(g, u, "se.mid.up")?;
            }
            let cat = g.concat_channels(u, skips[t])?;
            let loc = LocalizationParamIds::from_model(self, g, t);
            cur = localization_module(g, cat, &loc, T::from_f64(cfg.leaky_slope))?;
            if cfg.attention == AttentionPosition::Upsample {
                cur = self.se(g, cur, &format!("se.dec.l{t}"))?;
            }
            if t < cfg.n_heads() {
                let hw = self.p(g, &format!("head.l{t}.conv.w"));
                let hb = self.p(g, &format!("head.l{t}.conv.b"));
                head_maps.push(g.conv3d(cur, hw, hb, 1)?);
            }
        }
        // head_maps were pushed coarse to fine already (t descending ends at
        // the finest); keep increasing-resolution order for the summation.
        deep_supervision_sum(g, &head_maps)
    }
}

/// Parameter node ids of one context module.
pub struct ContextParamIds {
    pub c1_w: NodeId,
    pub n1_gamma: NodeId,
    pub n1_beta: NodeId,
    pub c2_w: NodeId,
    pub n2_gamma: NodeId,
    pub n2_beta: NodeId,
}

impl ContextParamIds {
    fn from_model<T: Scalar>(m: &Model<T>, g: &mut Graph<'_, T>, lvl: usize) -> Self {
        Self {
            c1_w: m.p(g, &format!("enc.l{lvl}.ctx.c1.conv.w")),
            n1_gamma: m.p(g, &format!("enc.l{lvl}.ctx.c1.norm.gamma")),
            n1_beta: m.p(g, &format!("enc.l{lvl}.ctx.c1.norm.beta")),
            c2_w: m.p(g, &format!("enc.l{lvl}.ctx.c2.conv.w")),
            n2_gamma: m.p(g, &format!("enc.l{lvl}.ctx.c2.norm.gamma")),
            n2_beta: m.p(g, &format!("enc.l{lvl}.ctx.c2.norm.beta")),
        }
    }
}

/// Residual context module: conv3 -> dropout -> conv3 (each conv with
/// instance norm and leaky ReLU), plus the module input added back.
pub fn context_module<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: NodeId,
    p: &ContextParamIds,
    p_drop: f64,
    slope: T,
    rng: &mut Rng,
    training: bool,
) -> Result<NodeId> {
    let eps = T::from_f64(1e-5);
    let t = g.conv3d_opt(x, p.c1_w, None, 1)?;
    let t = g.instance_norm(t, p.n1_gamma, p.n1_beta, eps);
    let t = g.leaky_relu(t, slope);
    let t = g.dropout(t, p_drop, rng, training);
    let t = g.conv3d_opt(t, p.c2_w, None, 1)?;
    let t = g.instance_norm(t, p.n2_gamma, p.n2_beta, eps);
    let t = g.leaky_relu(t, slope);
    g.add(x, t)
}

/// Parameter node ids of one SE block.
pub struct SeParamIds {
    pub fc1_w: NodeId,
    pub fc1_b: NodeId,
    pub fc2_w: NodeId,
    pub fc2_b: NodeId,
}

/// Squeeze-and-excitation: global max pool -> FC (C -> C/R) -> ReLU ->
/// FC (C/R -> C) -> sigmoid -> channel-wise rescale of the input.
pub fn se_block<T: Scalar>(g: &mut Graph<'_, T>, x: NodeId, p: &SeParamIds) -> Result<NodeId> {
    let s = g.global_max_pool(x);
    let h = g.dense(s, p.fc1_w, p.fc1_b)?;
    let h = g.relu(h);
    let gates = g.dense(h, p.fc2_w, p.fc2_b)?;
    let gates = g.sigmoid(gates);
    g.scale_channels(x, gates)
}

/// Parameter node ids of one localization module.
pub struct LocalizationParamIds {
    pub c3_w: NodeId,
    pub n3_gamma: NodeId,
    pub n3_beta: NodeId,
    pub c1_w: NodeId,
    pub n1_gamma: NodeId,
    pub n1_beta: NodeId,
}

impl LocalizationParamIds {
    fn from_model<T: Scalar>(m: &Model<T>, g: &mut Graph<'_, T>, t: usize) -> Self {
        Self {
            c3_w: m.p(g, &format!("dec.l{t}.loc3.conv.w")),
            n3_gamma: m.p(g, &format!("dec.l{t}.loc3.norm.gamma")),
            n3_beta: m.p(g, &format!("dec.l{t}.loc3.norm.beta")),
            c1_w: m.p(g, &format!("dec.l{t}.loc1.conv.w")),
            n1_gamma: m.p(g, &format!("dec.l{t}.loc1.norm.gamma")),
            n1_beta: m.p(g, &format!("dec.l{t}.loc1.norm.beta")),
        }
    }
}

/// Localization module: 3x3x3 conv halving the channel count, then a 1x1x1
/// conv, each followed by instance norm and leaky ReLU.
pub fn localization_module<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: NodeId,
    p: &LocalizationParamIds,
    slope: T,
) -> Result<NodeId> {
    let eps = T::from_f64(1e-5);
    let t = g.conv3d_opt(x, p.c3_w, None, 1)?;
    let t = g.instance_norm(t, p.n3_gamma, p.n3_beta, eps);
    let t = g.leaky_relu(t, slope);
    let t = g.conv3d_opt(t, p.c1_w, None, 1)?;
    let t = g.instance_norm(t, p.n1_gamma, p.n1_beta, eps);
    Ok(g.leaky_relu(t, slope))
}

/// Upsample coarser segmentation maps by voxel repetition to the finest
/// resolution, sum element-wise, and apply the channel softmax.
pub fn deep_supervision_sum<T: Scalar>(
    g: &mut Graph<'_, T>,
    seg_maps: &[NodeId],
) -> Result<NodeId> {
    assert!(!seg_maps.is_empty());
    let finest = seg_maps
        .iter()
        .map(|&id| g.value(id).shape()[4])
        .max()
        .expect("non-empty");
    let mut acc: Option<NodeId> = None;
    for &m in seg_maps {
        let side = g.value(m).shape()[4];
        if finest % side != 0 {
            return Err(Error::ShapeMismatch {
                op: "deep_supervision_sum",
                detail: format!("map side {side} does not divide finest {finest}"),
            });
        }
        let factor = finest / side;
        let up = if factor == 1 {
            m
        } else {
            g.upsample_repeat(m, factor)
        };
        acc = Some(match acc {
            None => up,
            Some(a) => g.add(a, up)?,
        });
    }
    Ok(g.softmax_channels(acc.expect("at least one map")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{dot, max_rel_error, projection};

    fn toy_config() -> NetworkConfig {
        NetworkConfig {
            levels: 2,
            base_channels: 4,
            p_drop: 0.3,
            leaky_slope: 0.01,
            se_ratio: 4,
            attention: AttentionPosition::Middle,
            out_classes: 3,
            input_dims: 16,
        }
    }

    #[test]
    fn forward_shape_contract_and_probabilities() {
        let cfg = toy_config();
        let model: Model<f32> = build_network(&cfg, 7).unwrap();
        let mut rng = Rng::from_seed(1);
        let input = Tensor::filled([1, 1, 16, 16, 16], 0.25);
        let out = model.forward(input, Mode::Inference, &mut rng).unwrap();
        assert_eq!(out.shape(), [1, 3, 16, 16, 16]);
        let m = out.spatial();
        for sp in 0..m {
            let s: f32 = (0..3).map(|c| out.data()[c * m + sp]).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn deepest_feature_shape_follows_doubling() {
        // levels 2, base 4: deepest context runs at 16 channels on a 4^3 grid
        // for a 16^3 input. Verified through the parameter shapes.
        let cfg = toy_config();
        let layout = parameter_layout(&cfg).unwrap();
        let bottom_ctx = layout
            .iter()
            .find(|(n, _)| n == "enc.l2.ctx.c1.conv.w")
            .unwrap();
        assert_eq!(bottom_ctx.1, [16, 16, 3, 3, 3]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = toy_config();
        let a: Model<f32> = build_network(&cfg, 99).unwrap();
        let b: Model<f32> = build_network(&cfg, 99).unwrap();
        assert_eq!(a.names(), b.names());
        for (x, y) in a.params().iter().zip(b.params()) {
            assert_eq!(x, y);
        }
        let c: Model<f32> = build_network(&cfg, 100).unwrap();
        assert!(a.params().iter().zip(c.params()).any(|(x, y)| x != y));
    }

    #[test]
    fn inference_is_deterministic_train_mode_reproducible() {
        let cfg = toy_config();
        let model: Model<f32> = build_network(&cfg, 3).unwrap();
        let input = Tensor::filled([1, 1, 16, 16, 16], 0.5);

        let o1 = model
            .forward(input.clone(), Mode::Inference, &mut Rng::from_seed(1))
            .unwrap();
        let o2 = model
            .forward(input.clone(), Mode::Inference, &mut Rng::from_seed(2))
            .unwrap();
        assert_eq!(o1, o2); // no stochastic layers at inference

        let t1 = model
            .forward(input.clone(), Mode::Train, &mut Rng::from_seed(5))
            .unwrap();
        let t2 = model
            .forward(input.clone(), Mode::Train, &mut Rng::from_seed(5))
            .unwrap();
        assert_eq!(t1, t2);
        let t3 = model
            .forward(input, Mode::Train, &mut Rng::from_seed(6))
            .unwrap();
        assert_ne!(t1, t3);
    }

    #[test]
    fn config_validation_rejects_bad_combos() {
        let mut cfg = toy_config();
        cfg.input_dims = 17;
        assert!(build_network::<f32>(&cfg, 1).is_err());

        let mut cfg = toy_config();
        cfg.se_ratio = 7; // does not divide 16
        assert!(build_network::<f32>(&cfg, 1).is_err());

        // Same ratio is fine with attention disabled.
        let mut cfg = toy_config();
        cfg.se_ratio = 7;
        cfg.attention = AttentionPosition::None;
        assert!(build_network::<f32>(&cfg, 1).is_ok());
    }

    #[test]
    fn se_block_zero_params_halves_input() {
        // All FC weights and biases zero -> sigmoid(0) = 0.5 gates.
        let params: Vec<Tensor<f32>> = vec![
            Tensor::zeros([2, 8, 1, 1, 1]),
            Tensor::zeros([2, 1, 1, 1, 1]),
            Tensor::zeros([8, 2, 1, 1, 1]),
            Tensor::zeros([8, 1, 1, 1, 1]),
        ];
        let mut rng = Rng::from_seed(0);
        let mut data = Vec::new();
        for _ in 0..8 * 27 {
            data.push(rng.uniform(-2.0, 2.0) as f32);
        }
        let x = Tensor::from_vec([1, 8, 3, 3, 3], data).unwrap();
        let mut g = Graph::new(&params);
        let xin = g.input(x.clone());
        let p = SeParamIds {
            fc1_w: g.param(0),
            fc1_b: g.param(1),
            fc2_w: g.param(2),
            fc2_b: g.param(3),
        };
        let y = se_block(&mut g, xin, &p).unwrap();
        for (o, i) in g.value(y).data().iter().zip(x.data()) {
            assert_eq!(*o, 0.5 * i);
        }
    }

    #[test]
    fn se_block_shape_and_hidden_width() {
        // C = 256, R = 16 -> hidden width 16.
        let cfg = NetworkConfig::default();
        let layout = parameter_layout(&cfg).unwrap();
        let fc1 = layout.iter().find(|(n, _)| n == "se.mid.bottom.fc1.w").unwrap();
        assert_eq!(fc1.1, [16, 256, 1, 1, 1]);
        // 256*16 weights + 16 biases = 4112 parameters in that dense layer.
        let fc1_b = layout.iter().find(|(n, _)| n == "se.mid.bottom.fc1.b").unwrap();
        let count: usize = fc1.1.iter().product::<usize>() + fc1_b.1.iter().product::<usize>();
        assert_eq!(count, 4112);
    }

    #[test]
    fn se_block_gradient_check() {
        let shapes: [Shape5; 4] = [
            [2, 4, 1, 1, 1],
            [2, 1, 1, 1, 1],
            [4, 2, 1, 1, 1],
            [4, 1, 1, 1, 1],
        ];
        let x_shape: Shape5 = [1, 4, 2, 2, 2];
        let mut tensors: Vec<Tensor<f64>> = vec![{
            let mut rng = Rng::from_seed(70);
            let n: usize = x_shape.iter().product();
            Tensor::from_vec(x_shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
        }];
        for (i, &s) in shapes.iter().enumerate() {
            let mut rng = Rng::from_seed(71 + i as u64);
            let n: usize = s.iter().product();
            tensors
                .push(Tensor::from_vec(s, (0..n).map(|_| rng.uniform(-0.8, 0.8)).collect()).unwrap());
        }
        let r = projection(x_shape, 72);
        let run = |ts: &[Tensor<f64>]| -> (f64, Vec<Tensor<f64>>) {
            let params = ts[1..].to_vec();
            let mut g = Graph::new(&params);
            let xin = g.input(ts[0].clone());
            let p = SeParamIds {
                fc1_w: g.param(0),
                fc1_b: g.param(1),
                fc2_w: g.param(2),
                fc2_b: g.param(3),
            };
            let y = se_block(&mut g, xin, &p).unwrap();
            let loss = dot(g.value(y), &r);
            let grads = g.backward(y, r.clone()).unwrap();
            let mut out = vec![grads.inputs[&xin.0].clone()];
            for p in grads.params {
                out.push(p.expect("all params used"));
            }
            (loss, out)
        };
        let err = max_rel_error(
            |ts| run(ts).0,
            |ts| run(ts).1,
            &tensors,
            1e-5,
        );
        assert!(err < 1e-5, "SE composite gradient err {err}");
    }

    #[test]
    fn context_module_zero_convs_is_identity() {
        // Zero conv weights: the residual path contributes beta = 0 after
        // normalization, so output = input.
        let ch = 4;
        let mk = |shape: Shape5, v: f64| Tensor::<f64>::filled(shape, v);
        let params = vec![
            mk([ch, ch, 3, 3, 3], 0.0),
            mk([ch, 1, 1, 1, 1], 1.0),
            mk([ch, 1, 1, 1, 1], 0.0),
            mk([ch, ch, 3, 3, 3], 0.0),
            mk([ch, 1, 1, 1, 1], 1.0),
            mk([ch, 1, 1, 1, 1], 0.0),
        ];
        let mut rng = Rng::from_seed(0);
        let n = ch * 27;
        let x = Tensor::from_vec(
            [1, ch, 3, 3, 3],
            (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        )
        .unwrap();
        let mut g = Graph::new(&params);
        let xin = g.input(x.clone());
        let p = ContextParamIds {
            c1_w: g.param(0),
            n1_gamma: g.param(1),
            n1_beta: g.param(2),
            c2_w: g.param(3),
            n2_gamma: g.param(4),
            n2_beta: g.param(5),
        };
        let y = context_module(&mut g, xin, &p, 0.0, 0.01, &mut rng, true).unwrap();
        assert_eq!(g.value(y).shape(), x.shape());
        for (o, i) in g.value(y).data().iter().zip(x.data()) {
            assert!((o - i).abs() < 1e-12);
        }
    }

    #[test]
    fn context_module_gradient_check() {
        let ch = 2;
        let mut mk = |seed: u64, shape: Shape5, lo: f64, hi: f64| {
            let mut rng = Rng::from_seed(seed);
            let n: usize = shape.iter().product();
            Tensor::from_vec(shape, (0..n).map(|_| rng.uniform(lo, hi)).collect::<Vec<f64>>())
                .unwrap()
        };
        let x = mk(80, [1, ch, 3, 3, 3], -1.0, 1.0);
        let tensors = vec![
            x,
            mk(81, [ch, ch, 3, 3, 3], -0.4, 0.4),
            mk(82, [ch, 1, 1, 1, 1], 0.5, 1.5),
            mk(83, [ch, 1, 1, 1, 1], -0.5, 0.5),
            mk(84, [ch, ch, 3, 3, 3], -0.4, 0.4),
            mk(85, [ch, 1, 1, 1, 1], 0.5, 1.5),
            mk(86, [ch, 1, 1, 1, 1], -0.5, 0.5),
        ];
        let r = projection([1, ch, 3, 3, 3], 87);
        let run = |ts: &[Tensor<f64>]| -> (f64, Vec<Tensor<f64>>) {
            let params = ts[1..].to_vec();
            let mut g = Graph::new(&params);
            let xin = g.input(ts[0].clone());
            let p = ContextParamIds {
                c1_w: g.param(0),
                n1_gamma: g.param(1),
                n1_beta: g.param(2),
                c2_w: g.param(3),
                n2_gamma: g.param(4),
                n2_beta: g.param(5),
            };
            let y = context_module(&mut g, xin, &p, 0.0, 0.01, &mut Rng::from_seed(0), false)
                .unwrap();
            let loss = dot(g.value(y), &r);
            let grads = g.backward(y, r.clone()).unwrap();
            let mut out = vec![grads.inputs[&xin.0].clone()];
            for p in grads.params {
                out.push(p.expect("all params used"));
            }
            (loss, out)
        };
        let err = max_rel_error(|ts| run(ts).0, |ts| run(ts).1, &tensors, 1e-5);
        assert!(err < 1e-5, "context module gradient err {err}");
    }

    #[test]
    fn localization_halves_channels() {
        let mut rng = Rng::from_seed(8);
        let params = vec![
            glorot_uniform::<f64>([8, 16, 3, 3, 3], &mut rng.clone()),
            Tensor::filled([8, 1, 1, 1, 1], 1.0),
            Tensor::zeros([8, 1, 1, 1, 1]),
            glorot_uniform::<f64>([8, 8, 1, 1, 1], &mut rng),
            Tensor::filled([8, 1, 1, 1, 1], 1.0),
            Tensor::zeros([8, 1, 1, 1, 1]),
        ];
        let x = Tensor::<f64>::filled([1, 16, 8, 8, 8], 0.3);
        let mut g = Graph::new(&params);
        let xin = g.input(x);
        let p = LocalizationParamIds {
            c3_w: g.param(0),
            n3_gamma: g.param(1),
            n3_beta: g.param(2),
            c1_w: g.param(3),
            n1_gamma: g.param(4),
            n1_beta: g.param(5),
        };
        let y = localization_module(&mut g, xin, &p, 0.01).unwrap();
        assert_eq!(g.value(y).shape(), [1, 8, 8, 8, 8]);
    }

    #[test]
    fn deep_supervision_reduces_to_single_map_softmax() {
        let params: Vec<Tensor<f64>> = vec![];
        let mut g = Graph::new(&params);
        let mut rng = Rng::from_seed(17);
        let n = 3 * 64;
        let m = Tensor::from_vec(
            [1, 3, 4, 4, 4],
            (0..n).map(|_| rng.uniform(-2.0, 2.0)).collect::<Vec<f64>>(),
        )
        .unwrap();
        let zero_coarse = g.input(Tensor::zeros([1, 3, 2, 2, 2]));
        let zero_mid = g.input(Tensor::zeros([1, 3, 4, 4, 4]));
        let mid = g.input(m.clone());
        let y = deep_supervision_sum(&mut g, &[zero_coarse, zero_mid, mid]).unwrap();
        let expect = crate::tensor::softmax_channels_forward(&m);
        assert!(g.value(y).max_abs_diff(&expect) < 1e-12);

        // Permuting the maps does not change the sum.
        let mut g2 = Graph::new(&params);
        let a = g2.input(Tensor::zeros([1, 3, 2, 2, 2]));
        let b = g2.input(m.clone());
        let c = g2.input(Tensor::zeros([1, 3, 4, 4, 4]));
        let y2 = deep_supervision_sum(&mut g2, &[b, a, c]).unwrap();
        assert!(g2.value(y2).max_abs_diff(&expect) < 1e-12);

        // Equal logits across channels -> uniform class probabilities.
        let mut g3 = Graph::new(&params);
        let e = g3.input(Tensor::filled([1, 3, 4, 4, 4], 1.3));
        let y3 = deep_supervision_sum(&mut g3, &[e]).unwrap();
        for &v in g3.value(y3).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn stripping_attention_matches_baseline_build() {
        let mut cfg = toy_config();
        cfg.attention = AttentionPosition::Middle;
        let with_se: Model<f32> = build_network(&cfg, 31).unwrap();

        let mut base_cfg = cfg.clone();
        base_cfg.attention = AttentionPosition::None;
        let baseline: Model<f32> = build_network(&base_cfg, 31).unwrap();

        let stripped = with_se.strip_attention();
        assert_eq!(stripped.names(), baseline.names());
        for (a, b) in stripped.params().iter().zip(baseline.params()) {
            assert_eq!(a, b, "per-name seeding is position independent");
        }

        let input = Tensor::filled([1, 1, 16, 16, 16], 0.4);
        let o1 = stripped
            .forward(input.clone(), Mode::Inference, &mut Rng::from_seed(0))
            .unwrap();
        let o2 = baseline
            .forward(input, Mode::Inference, &mut Rng::from_seed(0))
            .unwrap();
        assert_eq!(o1, o2);
    }

    #[test]
    fn count_parameters_matches_hand_summed_ledger() {
        // Independent ledger: walk the architecture arithmetic directly.
        // Normed convs have a kernel plus instance-norm gamma/beta, no bias.
        let cfg = toy_config();
        let model: Model<f32> = build_network(&cfg, 0).unwrap();
        let conv = |oc: usize, ic: usize, k: usize| oc * ic * k * k * k + 2 * oc;
        let head = |oc: usize, ic: usize| oc * ic + oc;
        let se = |c: usize, r: usize| (c / r) * c + c / r + c * (c / r) + c;
        let (b, l1, l2) = (4usize, 8usize, 16usize);
        let mut expect = 0usize;
        expect += conv(b, 1, 3); // input conv
        expect += 2 * conv(b, b, 3); // ctx l0
        expect += conv(l1, b, 3) + 2 * conv(l1, l1, 3); // down + ctx l1
        expect += conv(l2, l1, 3) + 2 * conv(l2, l2, 3); // down + ctx l2
        expect += se(l2, 4); // middle SE at the bottom
        expect += conv(l1, l2, 3); // dec.l1 up conv
        expect += se(l1, 4); // middle SE after first upsampling
        expect += conv(l1, l2, 3) + conv(l1, l1, 1); // dec.l1 localization
        expect += conv(b, l1, 3); // dec.l0 up conv
        expect += conv(b, l1, 3) + conv(b, b, 1); // dec.l0 localization
        expect += head(3, b) + head(3, l1); // two heads (levels = 2)
        assert_eq!(model.count_parameters(), expect);

        // Single 1x1x1 conv (1 -> 1) with bias: 2 parameters.
        assert_eq!(1 * 1 * 1 + 1, 2);
    }

    #[test]
    fn toy_network_gradient_spot_check() {
        // Representative parameter subset of the 8^3 toy network; the
        // acceptance suite sweeps every parameter of this config.
        let (cfg, model, input, r) = gradcheck_fixture();
        let check = vec![
            "enc.in.conv.w",
            "enc.l0.ctx.c1.norm.gamma",
            "enc.l1.down.conv.w",
            "se.mid.bottom.fc1.w",
            "se.mid.up.fc2.b",
            "dec.l1.up.norm.beta",
            "dec.l0.loc1.conv.w",
            "head.l0.conv.b",
            "head.l1.conv.w",
        ];
        let err = network_gradcheck(&cfg, &model, &input, &r, Some(&check));
        assert!(err < 1e-4, "toy network gradient err {err}");
    }
}

/// Toy config pinned for gradient verification: levels 2, base 2, 8^3 input,
/// SE in the middle position.
pub fn gradcheck_fixture() -> (NetworkConfig, Model<f64>, Tensor<f64>, Tensor<f64>) {
    let cfg = NetworkConfig {
        levels: 2,
        base_channels: 2,
        p_drop: 0.0,
        leaky_slope: 0.01,
        se_ratio: 2,
        attention: AttentionPosition::Middle,
        out_classes: 3,
        input_dims: 8,
    };
    let model: Model<f64> = build_network(&cfg, 5).expect("valid config");
    let mut rng = Rng::from_seed(6);
    let n = 512;
    let input = Tensor::from_vec(
        [1, 1, 8, 8, 8],
        (0..n).map(|_| rng.uniform(0.0, 1.0)).collect::<Vec<f64>>(),
    )
    .expect("matching length");
    let r = crate::tensor::projection([1, 3, 8, 8, 8], 73);
    (cfg, model, input, r)
}

/// Finite-difference check of the whole network against the tape's analytic
/// gradients. `only` restricts the sweep to named parameters (the input is
/// always included); `None` sweeps everything.
pub fn network_gradcheck(
    config: &NetworkConfig,
    model: &Model<f64>,
    input: &Tensor<f64>,
    r: &Tensor<f64>,
    only: Option<&[&str]>,
) -> f64 {
    use crate::tensor::{dot, max_rel_error};
    let picked: Vec<usize> = match only {
        None => (0..model.params().len()).collect(),
        Some(names) => names
            .iter()
            .map(|n| model.param_index(n).expect("known parameter name"))
            .collect(),
    };
    let tensors: Vec<Tensor<f64>> = std::iter::once(input.clone())
        .chain(picked.iter().map(|&i| model.params()[i].clone()))
        .collect();
    let cfg = config.clone();
    let names: Vec<String> = model.names().to_vec();
    let full_params: Vec<Tensor<f64>> = model.params().to_vec();
    let picked2 = picked.clone();
    let r2 = r.clone();
    let run = move |ts: &[Tensor<f64>]| -> (f64, Vec<Tensor<f64>>) {
        let mut params = full_params.clone();
        for (slot, &pi) in picked2.iter().enumerate() {
            params[pi] = ts[1 + slot].clone();
        }
        let named: Vec<(String, Tensor<f64>)> = names.iter().cloned().zip(params).collect();
        let m = Model::from_parts(cfg.clone(), named).expect("layout preserved");
        let (g, out) = m
            .forward_traced(ts[0].clone(), Mode::Inference, &mut Rng::from_seed(0))
            .expect("forward");
        let loss = dot(g.value(out), &r2);
        let grads = g.backward(out, r2.clone()).expect("backward");
        let mut out_grads = vec![grads.inputs.values().next().expect("input grad").clone()];
        for &pi in &picked2 {
            out_grads.push(grads.params[pi].clone().expect("param used in forward"));
        }
        (loss, out_grads)
    };
    let run2 = run.clone();
    max_rel_error(move |ts| run(ts).0, move |ts| run2(ts).1, &tensors, 1e-5)
}
