use std::collections::HashSet;
use std::fmt;

use serde::Serialize;

use super::{BottleneckUnit, Conv2D, ConvBlock, Graph, LayerSpec, Node, Shortcut, UnitPart};
use crate::tensor::window_output_dim;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(untagged)]
pub enum ActShape {
    Spatial([usize; 3]),
    Flat(usize),
}

impl ActShape {
    pub fn elements(self) -> usize {
        match self {
            ActShape::Spatial([h, w, c]) => h * w * c,
            ActShape::Flat(n) => n,
        }
    }

    pub fn dims(self) -> Vec<usize> {
        match self {
            ActShape::Spatial(s) => s.to_vec(),
            ActShape::Flat(n) => vec![n],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub node: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.node, self.message)
    }
}

/// Per-layer result of shape inference.
#[derive(Debug, Clone)]
pub(crate) struct LayerInfo {
    pub id: String,
    pub kind: &'static str,
    pub output: ActShape,
    pub macs: u64,
    pub minor: u64,
    pub params: u64,
}

#[derive(Default)]
struct Walker {
    layers: Vec<LayerInfo>,
    violations: Vec<Violation>,
}

impl Walker {
    fn violation(&mut self, node: &str, message: impl Into<String>) {
        self.violations.push(Violation {
            node: node.to_string(),
            message: message.into(),
        });
    }

    fn record(
        &mut self,
        id: &str,
        kind: &'static str,
        output: ActShape,
        macs: u64,
        minor: u64,
        params: u64,
    ) {
        self.layers.push(LayerInfo {
            id: id.to_string(),
            kind,
            output,
            macs,
            minor,
            params,
        });
    }

    fn spatial(&mut self, id: &str, shape: ActShape) -> Option<[usize; 3]> {
        match shape {
            ActShape::Spatial(s) => Some(s),
            ActShape::Flat(_) => {
                self.violation(id, "expects a spatial input but receives a flat vector");
                None
            }
        }
    }

    fn conv(&mut self, id: &str, conv: &Conv2D, input: [usize; 3]) -> Option<[usize; 3]> {
        let [h, w, c] = input;
        let k = &conv.kernel;
        if k.cin() != c {
            self.violation(
                id,
                format!("kernel expects {} input channels but receives {c}", k.cin()),
            );
        }
        if let Some(b) = &conv.bias {
            if b.len() != k.cout() {
                self.violation(
                    id,
                    format!(
                        "bias has {} entries for {} output channels",
                        b.len(),
                        k.cout()
                    ),
                );
            }
        }
        let dims = conv
            .params
            .output_dim(h, k.kh())
            .and_then(|ho| Ok((ho, conv.params.output_dim(w, k.kw())?)));
        match dims {
            Ok((ho, wo)) => {
                let macs = (ho * wo * k.cout() * k.kh() * k.kw() * k.cin()) as u64;
                let params = (k.data().len() + conv.bias.as_ref().map_or(0, Vec::len)) as u64;
                let out = [ho, wo, k.cout()];
                self.record(id, "conv2d", ActShape::Spatial(out), macs, 0, params);
                Some(out)
            }
            Err(e) => {
                self.violation(id, e.to_string());
                None
            }
        }
    }

    fn block(&mut self, id: &str, block: &ConvBlock, input: [usize; 3]) -> Option<[usize; 3]> {
        let out = self.conv(id, &block.conv, input)?;
        if let Some(a) = &block.affine {
            if a.scale.len() != out[2] || a.shift.len() != out[2] {
                self.violation(
                    id,
                    format!(
                        "affine has {}/{} entries for {} channels",
                        a.scale.len(),
                        a.shift.len(),
                        out[2]
                    ),
                );
            }
        }
        Some(out)
    }

    fn unit(&mut self, unit: &BottleneckUnit, input: [usize; 3]) -> Option<[usize; 3]> {
        let [h, w, c] = input;
        let s1 = self.block(&unit.layer_id(UnitPart::Conv1), &unit.conv1, input);
        let s2 = s1.and_then(|s| self.block(&unit.layer_id(UnitPart::Conv2), &unit.conv2, s));
        let s3 = s2.and_then(|s| self.block(&unit.layer_id(UnitPart::Conv3), &unit.conv3, s));

        let short = match &unit.shortcut {
            Shortcut::Identity { sample } => match sample {
                None => Some(input),
                Some(idx) => {
                    let mut seen = HashSet::new();
                    let bad = idx.iter().any(|&i| i >= c || !seen.insert(i)) || idx.is_empty();
                    if bad {
                        self.violation(
                            &unit.name,
                            format!("shortcut channel sample {idx:?} is invalid for {c} channels"),
                        );
                        None
                    } else {
                        Some([h, w, idx.len()])
                    }
                }
            },
            Shortcut::Projection(b) => self.block(&unit.layer_id(UnitPart::Shortcut), b, input),
        };

        let (s3, short) = (s3?, short?);
        if s3 != short {
            self.violation(
                &unit.name,
                format!(
                    "add misalignment: conv path yields {}x{}x{} but shortcut yields {}x{}x{}",
                    s3[0], s3[1], s3[2], short[0], short[1], short[2]
                ),
            );
        }
        let elems = (s3[0] * s3[1] * s3[2]) as u64;
        let relus = 2 * (s3[0] * s3[1]) as u64 * unit.conv2.conv.cin() as u64;
        self.record(
            &unit.name,
            "add",
            ActShape::Spatial(s3),
            0,
            elems * (1 + unit.post_add_relu as u64) + relus,
            0,
        );
        Some(s3)
    }

    fn walk(&mut self, graph: &Graph, input_shape: [usize; 3]) {
        if graph.nodes.is_empty() {
            self.violation(&graph.name, "graph has no nodes");
            return;
        }
        if input_shape.contains(&0) {
            self.violation(
                &graph.name,
                format!("input shape {input_shape:?} has a zero dimension"),
            );
            return;
        }
        let mut names = HashSet::new();
        for node in &graph.nodes {
            if !names.insert(node.name()) {
                self.violation(node.name(), "duplicate node name");
            }
            if node.name().contains('/') || node.name().is_empty() {
                self.violation(
                    node.name(),
                    "node names must be nonempty and contain no '/'",
                );
            }
        }

        let mut shape = ActShape::Spatial(input_shape);
        for node in &graph.nodes {
            let next = match node {
                Node::Unit(u) => self
                    .spatial(&u.name, shape)
                    .and_then(|s| self.unit(u, s))
                    .map(ActShape::Spatial),
                Node::Layer(l) => self.layer(&l.name, &l.spec, shape),
            };
            match next {
                Some(s) => shape = s,
                // Later shapes are unknowable; stop to avoid cascades.
                None => return,
            }
        }
    }

    fn layer(&mut self, id: &str, spec: &LayerSpec, shape: ActShape) -> Option<ActShape> {
        let elems = shape.elements() as u64;
        match spec {
            LayerSpec::Conv2D(conv) => {
                let s = self.spatial(id, shape)?;
                self.conv(id, conv, s).map(ActShape::Spatial)
            }
            LayerSpec::Relu => {
                self.record(id, "relu", shape, 0, elems, 0);
                Some(shape)
            }
            LayerSpec::Pool(p) => {
                let [h, w, c] = self.spatial(id, shape)?;
                if p.pad >= p.window {
                    self.violation(id, "pool padding must be smaller than the window");
                    return None;
                }
                let dims = window_output_dim(h, p.window, p.stride, p.pad)
                    .and_then(|ho| Ok((ho, window_output_dim(w, p.window, p.stride, p.pad)?)));
                match dims {
                    Ok((ho, wo)) => {
                        let out = ActShape::Spatial([ho, wo, c]);
                        let minor = (ho * wo * c * p.window * p.window) as u64;
                        self.record(id, "pool", out, 0, minor, 0);
                        Some(out)
                    }
                    Err(e) => {
                        self.violation(id, e.to_string());
                        None
                    }
                }
            }
            LayerSpec::ChannelAffine(a) => {
                let [_, _, c] = self.spatial(id, shape)?;
                if a.scale.len() != c || a.shift.len() != c {
                    self.violation(
                        id,
                        format!(
                            "affine has {}/{} entries for {c} channels",
                            a.scale.len(),
                            a.shift.len()
                        ),
                    );
                }
                self.record(id, "channel_affine", shape, 0, elems, 2 * c as u64);
                Some(shape)
            }
            LayerSpec::Dense(d) => {
                let n = match shape {
                    ActShape::Flat(n) => n,
                    ActShape::Spatial(_) => {
                        self.violation(id, "dense layer needs a flattened input");
                        return None;
                    }
                };
                if d.weights.cols() != n {
                    self.violation(
                        id,
                        format!(
                            "dense layer expects {} inputs but receives {n}",
                            d.weights.cols()
                        ),
                    );
                }
                if d.bias.len() != d.weights.rows() {
                    self.violation(
                        id,
                        format!(
                            "bias has {} entries for {} outputs",
                            d.bias.len(),
                            d.weights.rows()
                        ),
                    );
                }
                let out = ActShape::Flat(d.weights.rows());
                let macs = (d.weights.rows() * d.weights.cols()) as u64;
                let params = macs + d.bias.len() as u64;
                self.record(id, "dense", out, macs, 0, params);
                Some(out)
            }
            LayerSpec::Flatten => {
                let out = ActShape::Flat(shape.elements());
                self.record(id, "flatten", out, 0, 0, 0);
                Some(out)
            }
            LayerSpec::ChannelSample(idx) => {
                let [h, w, c] = self.spatial(id, shape)?;
                let mut seen = HashSet::new();
                if idx.is_empty() || idx.iter().any(|&i| i >= c || !seen.insert(i)) {
                    self.violation(
                        id,
                        format!("channel sample {idx:?} is invalid for {c} channels"),
                    );
                    return None;
                }
                let out = ActShape::Spatial([h, w, idx.len()]);
                self.record(id, "channel_sample", out, 0, 0, 0);
                Some(out)
            }
        }
    }
}

/// Every channel or shape inconsistency in the graph; empty means valid.
pub fn validate_graph(graph: &Graph) -> Vec<Violation> {
    let mut w = Walker::default();
    w.walk(graph, graph.input_shape);
    w.violations
}

/// Runs shape inference at `input_shape`, returning the per-layer records
/// or every violation found.
pub(crate) fn infer_layers(
    graph: &Graph,
    input_shape: [usize; 3],
) -> Result<Vec<LayerInfo>, Vec<Violation>> {
    let mut w = Walker::default();
    w.walk(graph, input_shape);
    if w.violations.is_empty() {
        Ok(w.layers)
    } else {
        Err(w.violations)
    }
}

/// Output shape of every layer (by id) at the graph's input shape.
pub fn infer_shapes(graph: &Graph) -> Result<Vec<(String, ActShape)>, Vec<Violation>> {
    infer_layers(graph, graph.input_shape)
        .map(|ls| ls.into_iter().map(|l| (l.id, l.output)).collect())
}
