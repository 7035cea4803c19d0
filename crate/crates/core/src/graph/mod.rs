//! The network as an ordered list of layers and bottleneck units.
//!
//! Two families are supported: plain pipelines (VGG-like) and pipelines
//! containing bottleneck units (ResNet-like). Every layer is addressable by
//! a string id: top-level layers and units by their name, layers inside a
//! unit as `<unit>/conv1`, `<unit>/conv2`, `<unit>/conv3` and
//! `<unit>/shortcut`.

mod flops;
mod io;
mod rewrite;
mod validate;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{ConvParams, DenseMatrix, PoolKind, Tensor4};

pub use flops::{count_flops, count_params, FlopReport, LayerFlops};
pub use io::{load_model, save_model, MODEL_FORMAT};
pub use rewrite::{rewrite_conv_pair, shortcut_required_channels};
pub use validate::{infer_shapes, validate_graph, ActShape, Violation};

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2D {
    pub kernel: Tensor4,
    pub bias: Option<Vec<f32>>,
    pub params: ConvParams,
}

impl Conv2D {
    pub fn cin(&self) -> usize {
        self.kernel.cin()
    }

    pub fn cout(&self) -> usize {
        self.kernel.cout()
    }

    pub(crate) fn restrict_outputs(&mut self, kept: &[usize]) -> Result<()> {
        self.kernel = self.kernel.select_outputs(kept)?;
        if let Some(b) = &mut self.bias {
            *b = kept.iter().map(|&k| b[k]).collect();
        }
        Ok(())
    }
}

/// Per-channel `x * scale + shift`; the inference-time form of batch
/// normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAffine {
    pub scale: Vec<f32>,
    pub shift: Vec<f32>,
}

impl ChannelAffine {
    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    pub(crate) fn restrict(&mut self, kept: &[usize]) {
        self.scale = kept.iter().map(|&k| self.scale[k]).collect();
        self.shift = kept.iter().map(|&k| self.shift[k]).collect();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: DenseMatrix,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pool {
    pub kind: PoolKind,
    pub window: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv2D(Conv2D),
    Relu,
    Pool(Pool),
    ChannelAffine(ChannelAffine),
    Dense(Dense),
    Flatten,
    ChannelSample(Vec<usize>),
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2D(_) => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::Pool(_) => "pool",
            LayerSpec::ChannelAffine(_) => "channel_affine",
            LayerSpec::Dense(_) => "dense",
            LayerSpec::Flatten => "flatten",
            LayerSpec::ChannelSample(_) => "channel_sample",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub spec: LayerSpec,
}

impl Layer {
    pub fn new(name: impl Into<String>, spec: LayerSpec) -> Self {
        Self {
            name: name.into(),
            spec,
        }
    }
}

/// A convolution with an optional folded normalization after it.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub conv: Conv2D,
    pub affine: Option<ChannelAffine>,
}

impl ConvBlock {
    pub(crate) fn restrict_outputs(&mut self, kept: &[usize]) -> Result<()> {
        self.conv.restrict_outputs(kept)?;
        if let Some(a) = &mut self.affine {
            a.restrict(kept);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Shortcut {
    /// Passes the unit input through, optionally keeping only `sample`
    /// channels (in that order) so the add stays aligned after pruning.
    Identity {
        sample: Option<Vec<usize>>,
    },
    Projection(ConvBlock),
}

/// `conv1 -> affine? -> relu -> conv2 -> affine? -> relu -> conv3 -> affine?`,
/// added to the shortcut path, then an optional final ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct BottleneckUnit {
    pub name: String,
    pub conv1: ConvBlock,
    pub conv2: ConvBlock,
    pub conv3: ConvBlock,
    pub shortcut: Shortcut,
    pub post_add_relu: bool,
}

impl BottleneckUnit {
    pub fn block(&self, part: UnitPart) -> Option<&ConvBlock> {
        match part {
            UnitPart::Conv1 => Some(&self.conv1),
            UnitPart::Conv2 => Some(&self.conv2),
            UnitPart::Conv3 => Some(&self.conv3),
            UnitPart::Shortcut => match &self.shortcut {
                Shortcut::Projection(b) => Some(b),
                Shortcut::Identity { .. } => None,
            },
        }
    }

    pub(crate) fn block_mut(&mut self, part: UnitPart) -> Option<&mut ConvBlock> {
        match part {
            UnitPart::Conv1 => Some(&mut self.conv1),
            UnitPart::Conv2 => Some(&mut self.conv2),
            UnitPart::Conv3 => Some(&mut self.conv3),
            UnitPart::Shortcut => match &mut self.shortcut {
                Shortcut::Projection(b) => Some(b),
                Shortcut::Identity { .. } => None,
            },
        }
    }

    pub fn has_projection(&self) -> bool {
        matches!(self.shortcut, Shortcut::Projection(_))
    }

    pub fn layer_id(&self, part: UnitPart) -> String {
        format!("{}/{}", self.name, part.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnitPart {
    Conv1,
    Conv2,
    Conv3,
    Shortcut,
}

impl UnitPart {
    pub fn as_str(self) -> &'static str {
        match self {
            UnitPart::Conv1 => "conv1",
            UnitPart::Conv2 => "conv2",
            UnitPart::Conv3 => "conv3",
            UnitPart::Shortcut => "shortcut",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "conv1" => UnitPart::Conv1,
            "conv2" => UnitPart::Conv2,
            "conv3" => UnitPart::Conv3,
            "shortcut" => UnitPart::Shortcut,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Layer(Layer),
    Unit(BottleneckUnit),
}

impl Node {
    pub fn name(&self) -> &str {
        match self {
            Node::Layer(l) => &l.name,
            Node::Unit(u) => &u.name,
        }
    }
}

/// Where a layer id points.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerRef {
    /// A top-level node (layer or whole unit).
    Node(usize),
    /// A convolution inside the unit at the given node index.
    InUnit(usize, UnitPart),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub name: String,
    /// `(H, W, C)`.
    pub input_shape: [usize; 3],
    pub nodes: Vec<Node>,
    pub metadata: BTreeMap<String, String>,
}

impl Graph {
    pub fn new(name: impl Into<String>, input_shape: [usize; 3]) -> Self {
        Self {
            name: name.into(),
            input_shape,
            nodes: Vec::new(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn push_layer(&mut self, name: impl Into<String>, spec: LayerSpec) -> &mut Self {
        self.nodes.push(Node::Layer(Layer::new(name, spec)));
        self
    }

    pub fn push_unit(&mut self, unit: BottleneckUnit) -> &mut Self {
        self.nodes.push(Node::Unit(unit));
        self
    }

    pub fn has_units(&self) -> bool {
        self.nodes.iter().any(|n| matches!(n, Node::Unit(_)))
    }

    pub fn locate(&self, id: &str) -> Result<LayerRef> {
        let (head, tail) = match id.split_once('/') {
            Some((h, t)) => (h, Some(t)),
            None => (id, None),
        };
        let idx = self
            .nodes
            .iter()
            .position(|n| n.name() == head)
            .ok_or_else(|| Error::UnknownLayer(id.to_string()))?;
        match (tail, &self.nodes[idx]) {
            (None, _) => Ok(LayerRef::Node(idx)),
            (Some(part), Node::Unit(u)) => {
                let part = UnitPart::parse(part).ok_or_else(|| Error::UnknownLayer(id.into()))?;
                if part == UnitPart::Shortcut && !u.has_projection() {
                    return Err(Error::UnknownLayer(format!(
                        "{id} (unit has an identity shortcut)"
                    )));
                }
                Ok(LayerRef::InUnit(idx, part))
            }
            (Some(_), Node::Layer(_)) => Err(Error::UnknownLayer(id.to_string())),
        }
    }

    /// The convolution a layer id refers to, if it is one.
    pub fn conv(&self, at: LayerRef) -> Option<&Conv2D> {
        match at {
            LayerRef::Node(i) => match &self.nodes[i] {
                Node::Layer(Layer {
                    spec: LayerSpec::Conv2D(c),
                    ..
                }) => Some(c),
                _ => None,
            },
            LayerRef::InUnit(i, part) => match &self.nodes[i] {
                Node::Unit(u) => u.block(part).map(|b| &b.conv),
                _ => None,
            },
        }
    }

    pub fn unit(&self, idx: usize) -> Option<&BottleneckUnit> {
        match self.nodes.get(idx) {
            Some(Node::Unit(u)) => Some(u),
            _ => None,
        }
    }

    /// Ids of every convolution, in execution order. Unit convolutions are
    /// listed conv1, conv2, conv3, then the projection.
    pub fn conv_ids(&self) -> Vec<String> {
        let mut ids = Vec::new();
        for node in &self.nodes {
            match node {
                Node::Layer(Layer {
                    name,
                    spec: LayerSpec::Conv2D(_),
                }) => ids.push(name.clone()),
                Node::Layer(_) => {}
                Node::Unit(u) => {
                    for part in [UnitPart::Conv1, UnitPart::Conv2, UnitPart::Conv3] {
                        ids.push(u.layer_id(part));
                    }
                    if u.has_projection() {
                        ids.push(u.layer_id(UnitPart::Shortcut));
                    }
                }
            }
        }
        ids
    }

    /// Ids whose input channels can be pruned: every convolution except the
    /// first top-level one (it reads the image) and projection shortcuts
    /// (pruned together with their unit's conv1).
    pub fn prunable_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .conv_ids()
            .into_iter()
            .filter(|id| !id.ends_with("/shortcut"))
            .collect();
        if let Some(first) = ids.first() {
            if !first.contains('/') {
                ids.remove(0);
            }
        }
        ids
    }

    /// Execution position of a layer id; inner unit layers sort by part.
    pub fn position(&self, id: &str) -> Result<(usize, usize)> {
        Ok(match self.locate(id)? {
            LayerRef::Node(i) => (i, 0),
            LayerRef::InUnit(i, p) => (
                i,
                match p {
                    UnitPart::Conv1 | UnitPart::Shortcut => 1,
                    UnitPart::Conv2 => 2,
                    UnitPart::Conv3 => 3,
                },
            ),
        })
    }
}
