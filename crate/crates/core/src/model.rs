//! Convolutional feature extractor, MLP projector and single-logit head.
//!
//! Parameters live in [`ModelParameters`], an ordered list of named arrays.
//! Names encode the group each array belongs to:
//!
//! | name                  | shape                   | group       |
//! |-----------------------|-------------------------|-------------|
//! | `block{i}.weight`     | `[c_out, c_in, k, k]`   | `Block(i)`  |
//! | `block{i}.bias`       | `[c_out]`               | `Block(i)`  |
//! | `projector.{j}.weight`| `[in, out]`             | `Projector` |
//! | `projector.{j}.bias`  | `[out]`                 | `Projector` |
//! | `head.weight`         | `[features, 1]`         | `Head`      |
//! | `head.bias`           | `[1]`                   | `Head`      |
//!
//! Blocks are numbered from 1.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};
use crate::tape::{ComputationTape, NodeId};
use crate::tensor::Tensor;

/// One `conv → ReLU → 2×2 max-pool` stage. Padding is `kernel / 2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvBlockSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvBlockSpec {
    pub fn padding(&self) -> usize {
        self.kernel / 2
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderSpec {
    pub in_channels: usize,
    pub blocks: Vec<ConvBlockSpec>,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        let blocks = [16, 32, 64, 128]
            .into_iter()
            .map(|c| ConvBlockSpec { out_channels: c, kernel: 3, stride: 1 })
            .collect();
        Self { in_channels: 1, blocks }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.blocks.len() < 2 {
            return Err(Error::Config("encoder needs at least 2 blocks".into()));
        }
        if self.in_channels == 0
            || self.blocks.iter().any(|b| b.out_channels == 0 || b.kernel == 0 || b.stride == 0)
        {
            return Err(Error::Config("encoder extents must be positive".into()));
        }
        Ok(())
    }

    /// Width of the pooled feature vector.
    pub fn feature_dim(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.out_channels)
    }

    /// Spatial size of the last conv activation for a square input.
    pub fn activation_size(&self, input: usize) -> Result<usize> {
        let mut s = input;
        for (i, b) in self.blocks.iter().enumerate() {
            if s + 2 * b.padding() < b.kernel {
                return Err(shape_err!("block {} kernel does not fit a {s}x{s} map", i + 1));
            }
            s = (s + 2 * b.padding() - b.kernel) / b.stride + 1;
            if i + 1 < self.blocks.len() {
                if s < 2 {
                    return Err(shape_err!("block {} produces a {s}x{s} map, too small to pool", i + 1));
                }
                s /= 2;
            }
        }
        Ok(s)
    }
}

/// Compact text form: `channels:kernel:stride` per block, comma separated,
/// e.g. `16:3:1,32:3:1`.
impl fmt::Display for EncoderSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .blocks
            .iter()
            .map(|b| format!("{}:{}:{}", b.out_channels, b.kernel, b.stride))
            .collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for EncoderSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad encoder spec `{s}` (want c:k:s,...)"));
        let blocks = s
            .split(',')
            .map(|part| {
                let v: Vec<usize> = part
                    .trim()
                    .split(':')
                    .map(|x| x.parse().map_err(|_| bad()))
                    .collect::<Result<_>>()?;
                match v[..] {
                    [c] => Ok(ConvBlockSpec { out_channels: c, kernel: 3, stride: 1 }),
                    [c, k, st] => Ok(ConvBlockSpec { out_channels: c, kernel: k, stride: st }),
                    _ => Err(bad()),
                }
            })
            .collect::<Result<_>>()?;
        let spec = EncoderSpec { in_channels: 1, blocks };
        spec.validate()?;
        Ok(spec)
    }
}

/// Fully connected projector: `layers` linear maps of `width` units with ReLU
/// between them and a linear output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProjectorSpec {
    pub layers: usize,
    pub width: usize,
}

impl Default for ProjectorSpec {
    fn default() -> Self {
        Self { layers: 3, width: 128 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Block(usize),
    Projector,
    Head,
}

/// Ordered named parameter arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParameters {
    entries: Vec<(String, Tensor)>,
}

impl ModelParameters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        self.entries.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::Data(format!("missing parameter `{name}`")))
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Data(format!("missing parameter `{name}`")))?;
        if slot.1.shape() != value.shape() {
            return Err(shape_err!("parameter `{name}`: {:?} vs {:?}", slot.1.shape(), value.shape()));
        }
        slot.1 = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Keeps only the arrays whose group satisfies `keep`.
    pub fn retain(&mut self, keep: impl Fn(ParamGroup) -> bool) {
        self.entries.retain(|(n, _)| group_of(n).is_some_and(&keep));
    }

    /// The feature-extractor arrays alone.
    pub fn extractor(&self) -> ModelParameters {
        let mut out = self.clone();
        out.retain(|g| matches!(g, ParamGroup::Block(_)));
        out
    }
}

/// Group tag encoded in a parameter name.
pub fn group_of(name: &str) -> Option<ParamGroup> {
    if let Some(rest) = name.strip_prefix("block") {
        let idx = rest.split('.').next()?.parse().ok()?;
        Some(ParamGroup::Block(idx))
    } else if name.starts_with("projector.") {
        Some(ParamGroup::Projector)
    } else if name.starts_with("head.") {
        Some(ParamGroup::Head)
    } else {
        None
    }
}

/// How parameters are initialised.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InitScheme {
    Random,
    /// A second, independent deterministic seed family standing in for an
    /// externally pretrained starting point.
    PseudoPretrained,
}

impl InitScheme {
    pub fn name(self) -> &'static str {
        match self {
            InitScheme::Random => "random",
            InitScheme::PseudoPretrained => "pseudo_pretrained",
        }
    }

    fn salt(self) -> u64 {
        match self {
            InitScheme::Random => 0,
            InitScheme::PseudoPretrained => 0x9E37_79B9_7F4A_7C15,
        }
    }
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(InitScheme::Random),
            "pseudo_pretrained" => Ok(InitScheme::PseudoPretrained),
            _ => Err(Error::Config(format!("unknown init scheme `{s}`"))),
        }
    }
}

/// Architecture description shared by every forward pass.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Model {
    pub encoder: EncoderSpec,
    pub projector: ProjectorSpec,
}

/// Nodes produced by [`Model::forward_features`].
#[derive(Clone, Copy, Debug)]
pub struct FeatureNodes {
    /// Pooled `[N, F]` features.
    pub features: NodeId,
    /// Post-ReLU activation of the last conv block, before pooling.
    pub last_activation: NodeId,
}

/// Parameter arrays registered on a tape.
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    nodes: HashMap<String, NodeId>,
    order: Vec<String>,
}

impl BoundParams {
    /// Registers every array in `params`; those for which `trainable` returns
    /// true become differentiable leaves, the rest constants.
    pub fn bind(
        tape: &mut ComputationTape,
        params: &ModelParameters,
        trainable: impl Fn(&str) -> bool,
    ) -> Self {
        let mut out = Self::default();
        for (name, t) in params.iter() {
            let id = if trainable(name) { tape.param(t.clone()) } else { tape.constant(t.clone()) };
            out.nodes.insert(name.to_string(), id);
            out.order.push(name.to_string());
        }
        out
    }

    /// Wraps nodes the caller already placed on a tape.
    pub fn from_nodes(entries: impl IntoIterator<Item = (String, NodeId)>) -> Self {
        let mut out = Self::default();
        for (name, id) in entries {
            out.nodes.insert(name.clone(), id);
            out.order.push(name);
        }
        out
    }

    pub fn node(&self, name: &str) -> Result<NodeId> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| Error::Data(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.order.iter().map(|n| (n.as_str(), self.nodes[n]))
    }
}

impl Model {
    pub fn new(encoder: EncoderSpec, projector: ProjectorSpec) -> Result<Self> {
        encoder.validate()?;
        if projector.layers == 0 || projector.width == 0 {
            return Err(Error::Config("projector needs at least one layer of positive width".into()));
        }
        Ok(Self { encoder, projector })
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.feature_dim()
    }

    /// Fresh parameters for the extractor, projector and head.
    ///
    /// Weights are drawn from `N(0, 2 / fan_in)`; biases start at zero.
    pub fn initialize(&self, seed: u64, scheme: InitScheme) -> Result<ModelParameters> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ scheme.salt());
        let mut params = ModelParameters::new();
        let mut he = |shape: &[usize], fan_in: usize| -> Result<Tensor> {
            let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            Tensor::from_fn(shape, |_| dist.sample(&mut rng))
        };
        let mut c_in = self.encoder.in_channels;
        for (i, b) in self.encoder.blocks.iter().enumerate() {
            let fan_in = c_in * b.kernel * b.kernel;
            params.insert(
                format!("block{}.weight", i + 1),
                he(&[b.out_channels, c_in, b.kernel, b.kernel], fan_in)?,
            )?;
            params.insert(format!("block{}.bias", i + 1), Tensor::zeros(&[b.out_channels]))?;
            c_in = b.out_channels;
        }
        let mut width = self.feature_dim();
        for j in 0..self.projector.layers {
            params.insert(
                format!("projector.{}.weight", j + 1),
                he(&[width, self.projector.width], width)?,
            )?;
            params.insert(format!("projector.{}.bias", j + 1), Tensor::zeros(&[self.projector.width]))?;
            width = self.projector.width;
        }
        let f = self.feature_dim();
        params.insert("head.weight", he(&[f, 1], f)?)?;
        params.insert("head.bias", Tensor::zeros(&[1]))?;
        Ok(params)
    }

    /// Checks that `params` holds every array this architecture needs with
    /// the right shape. Projector and head arrays are only checked if present.
    pub fn check_parameters(&self, params: &ModelParameters) -> Result<()> {
        let mut c_in = self.encoder.in_channels;
        for (i, b) in self.encoder.blocks.iter().enumerate() {
            let w = params.require(&format!("block{}.weight", i + 1))?;
            if w.shape() != [b.out_channels, c_in, b.kernel, b.kernel] {
                return Err(shape_err!("block{} weight has shape {:?}", i + 1, w.shape()));
            }
            c_in = b.out_channels;
        }
        if let Some(w) = params.get("head.weight") {
            if w.shape() != [self.feature_dim(), 1] {
                return Err(shape_err!("head weight has shape {:?}", w.shape()));
            }
        }
        Ok(())
    }

    /// `[N, 1, H, W]` input → pooled features.
    pub fn forward_features(
        &self,
        tape: &mut ComputationTape,
        x: NodeId,
        params: &BoundParams,
    ) -> Result<FeatureNodes> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.encoder.in_channels {
            return Err(shape_err!(
                "encoder expects [N, {}, H, W], got {shape:?}",
                self.encoder.in_channels
            ));
        }
        let mut h = x;
        let mut last_activation = x;
        let n_blocks = self.encoder.blocks.len();
        for (i, b) in self.encoder.blocks.iter().enumerate() {
            let w = params.node(&format!("block{}.weight", i + 1))?;
            let bias = params.node(&format!("block{}.bias", i + 1))?;
            let conv = tape.conv2d(h, w, Some(bias), b.stride, b.padding())?;
            let act = tape.relu(conv);
            if i + 1 == n_blocks {
                last_activation = act;
                h = act;
            } else {
                h = tape.max_pool2(act)?;
            }
        }
        let features = tape.global_avg_pool(h)?;
        Ok(FeatureNodes { features, last_activation })
    }

    /// `[N, F]` features → `[N, width]` embeddings.
    pub fn forward_projector(
        &self,
        tape: &mut ComputationTape,
        features: NodeId,
        params: &BoundParams,
    ) -> Result<NodeId> {
        let mut h = features;
        for j in 0..self.projector.layers {
            let w = params.node(&format!("projector.{}.weight", j + 1))?;
            let b = params.node(&format!("projector.{}.bias", j + 1))?;
            let lin = tape.matmul(h, w)?;
            h = tape.add_bias(lin, b)?;
            if j + 1 < self.projector.layers {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// `[N, F]` features → `[N, 1]` pre-sigmoid logits.
    pub fn forward_logits(
        &self,
        tape: &mut ComputationTape,
        features: NodeId,
        params: &BoundParams,
    ) -> Result<NodeId> {
        let w = params.node("head.weight")?;
        let b = params.node("head.bias")?;
        let lin = tape.matmul(features, w)?;
        tape.add_bias(lin, b)
    }

    /// `[N, F]` features → `[N]` probabilities in (0, 1).
    pub fn forward_classifier(
        &self,
        tape: &mut ComputationTape,
        features: NodeId,
        params: &BoundParams,
    ) -> Result<NodeId> {
        let logits = self.forward_logits(tape, features, params)?;
        let n = tape.value(logits).shape()[0];
        let flat = tape.reshape(logits, &[n])?;
        Ok(tape.sigmoid(flat))
    }

    /// Inference-only feature extraction.
    pub fn features(&self, params: &ModelParameters, x: &Tensor) -> Result<Tensor> {
        let mut tape = ComputationTape::new();
        let bound = BoundParams::bind(&mut tape, params, |_| false);
        let input = tape.constant(x.clone());
        let out = self.forward_features(&mut tape, input, &bound)?;
        Ok(tape.value(out.features).clone())
    }

    /// Inference-only class probabilities, evaluated in chunks of
    /// `chunk` images to bound memory.
    pub fn predict(&self, params: &ModelParameters, x: &Tensor, chunk: usize) -> Result<Vec<f64>> {
        let n = x.shape()[0];
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(chunk.max(1)) {
            let end = (start + chunk.max(1)).min(n);
            let part: Vec<Tensor> = (start..end).map(|i| x.index_axis0(i)).collect();
            let part = Tensor::stack(&part.iter().collect::<Vec<_>>())?;
            let mut tape = ComputationTape::new();
            let bound = BoundParams::bind(&mut tape, params, |_| false);
            let input = tape.constant(part);
            let f = self.forward_features(&mut tape, input, &bound)?;
            let p = self.forward_classifier(&mut tape, f.features, &bound)?;
            out.extend_from_slice(tape.value(p).data());
        }
        Ok(out)
    }
}
