//! Forward execution, activation taps and per-channel contribution vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    validate_graph, BottleneckUnit, ConvBlock, Graph, LayerRef, LayerSpec, Node, Shortcut,
    UnitPart, Violation,
};
use crate::tensor::{
    add, channel_affine, channel_gather, conv2d, dense, pool2d, relu, ConvParams, Tensor3, Tensor4,
};

#[derive(Debug, Clone, PartialEq)]
pub enum Activation {
    Spatial(Tensor3),
    Flat(Vec<f32>),
}

impl Activation {
    /// Flat values; spatial tensors flatten in `(h, w, c)` order.
    pub fn into_flat(self) -> Vec<f32> {
        match self {
            Activation::Spatial(t) => t.into_data(),
            Activation::Flat(v) => v,
        }
    }

    pub fn as_flat(&self) -> &[f32] {
        match self {
            Activation::Spatial(t) => t.data(),
            Activation::Flat(v) => v,
        }
    }

    fn into_spatial(self, id: &str) -> Result<Tensor3> {
        match self {
            Activation::Spatial(t) => Ok(t),
            Activation::Flat(_) => Err(Error::Shape(format!("{id} sees a flat vector"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapPoint {
    LayerInput,
    /// For a convolution: the raw convolution output with bias, before any
    /// affine or activation.
    LayerOutput,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapRequest {
    pub layer_id: String,
    pub what: TapPoint,
}

impl TapRequest {
    pub fn input(layer_id: impl Into<String>) -> Self {
        Self {
            layer_id: layer_id.into(),
            what: TapPoint::LayerInput,
        }
    }

    pub fn output(layer_id: impl Into<String>) -> Self {
        Self {
            layer_id: layer_id.into(),
            what: TapPoint::LayerOutput,
        }
    }
}

fn check(graph: &Graph, input: &Tensor3) -> Result<()> {
    let mut v = validate_graph(graph);
    if input.shape() != graph.input_shape {
        v.push(Violation {
            node: "input".into(),
            message: format!(
                "input is {:?} but the graph expects {:?}",
                input.shape(),
                graph.input_shape
            ),
        });
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(v))
    }
}

fn conv_raw(block: &ConvBlock, x: &Tensor3) -> Result<Tensor3> {
    let c = &block.conv;
    conv2d(x, &c.kernel, c.bias.as_deref(), c.params)
}

fn block_out(block: &ConvBlock, x: &Tensor3) -> Result<Tensor3> {
    let y = conv_raw(block, x)?;
    match &block.affine {
        Some(a) => channel_affine(&y, &a.scale, &a.shift),
        None => Ok(y),
    }
}

/// Executes one unit, stopping early at `tap` when it points inside it.
fn run_unit(u: &BottleneckUnit, x: Tensor3, tap: Option<(UnitPart, TapPoint)>) -> Result<Tensor3> {
    match tap {
        Some((UnitPart::Conv1 | UnitPart::Shortcut, TapPoint::LayerInput)) => return Ok(x),
        Some((UnitPart::Shortcut, TapPoint::LayerOutput)) => {
            let b = u.block(UnitPart::Shortcut).expect("located projection");
            return conv_raw(b, &x);
        }
        Some((UnitPart::Conv1, TapPoint::LayerOutput)) => return conv_raw(&u.conv1, &x),
        _ => {}
    }
    let h1 = relu(&block_out(&u.conv1, &x)?);
    match tap {
        Some((UnitPart::Conv2, TapPoint::LayerInput)) => return Ok(h1),
        Some((UnitPart::Conv2, TapPoint::LayerOutput)) => return conv_raw(&u.conv2, &h1),
        _ => {}
    }
    let h2 = relu(&block_out(&u.conv2, &h1)?);
    match tap {
        Some((UnitPart::Conv3, TapPoint::LayerInput)) => return Ok(h2),
        Some((UnitPart::Conv3, TapPoint::LayerOutput)) => return conv_raw(&u.conv3, &h2),
        _ => {}
    }
    let h3 = block_out(&u.conv3, &h2)?;
    let short = match &u.shortcut {
        Shortcut::Identity { sample: None } => x,
        Shortcut::Identity { sample: Some(s) } => channel_gather(&x, s)?,
        Shortcut::Projection(b) => block_out(b, &x)?,
    };
    let y = add(&h3, &short).map_err(|e| Error::Shape(format!("{}: {e}", u.name)))?;
    Ok(if u.post_add_relu { relu(&y) } else { y })
}

fn run_layer(spec: &LayerSpec, id: &str, x: Activation) -> Result<Activation> {
    Ok(match spec {
        LayerSpec::Conv2D(c) => Activation::Spatial(conv2d(
            &x.into_spatial(id)?,
            &c.kernel,
            c.bias.as_deref(),
            c.params,
        )?),
        LayerSpec::Relu => match x {
            Activation::Spatial(t) => Activation::Spatial(relu(&t)),
            Activation::Flat(v) => Activation::Flat(v.into_iter().map(|a| a.max(0.0)).collect()),
        },
        LayerSpec::Pool(p) => Activation::Spatial(pool2d(
            &x.into_spatial(id)?,
            p.kind,
            p.window,
            p.stride,
            p.pad,
        )?),
        LayerSpec::ChannelAffine(a) => {
            Activation::Spatial(channel_affine(&x.into_spatial(id)?, &a.scale, &a.shift)?)
        }
        LayerSpec::Dense(d) => Activation::Flat(dense(x.as_flat(), &d.weights, &d.bias)?),
        LayerSpec::Flatten => Activation::Flat(x.into_flat()),
        LayerSpec::ChannelSample(idx) => {
            Activation::Spatial(channel_gather(&x.into_spatial(id)?, idx)?)
        }
    })
}

fn run_nodes(nodes: &[Node], mut x: Activation) -> Result<Activation> {
    for node in nodes {
        x = match node {
            Node::Layer(l) => run_layer(&l.spec, &l.name, x)?,
            Node::Unit(u) => Activation::Spatial(run_unit(u, x.into_spatial(&u.name)?, None)?),
        };
    }
    Ok(x)
}

/// Runs the whole graph on one input.
pub fn forward(graph: &Graph, input: &Tensor3) -> Result<Activation> {
    check(graph, input)?;
    run_nodes(&graph.nodes, Activation::Spatial(input.clone()))
}

/// The tensor flowing into or out of layer `tap.layer_id`.
pub fn forward_to_layer(graph: &Graph, input: &Tensor3, tap: &TapRequest) -> Result<Tensor3> {
    let at = graph.locate(&tap.layer_id)?;
    check(graph, input)?;
    let idx = match at {
        LayerRef::Node(i) | LayerRef::InUnit(i, _) => i,
    };
    let x = run_nodes(&graph.nodes[..idx], Activation::Spatial(input.clone()))?;
    match (at, &graph.nodes[idx]) {
        (LayerRef::InUnit(_, part), Node::Unit(u)) => {
            run_unit(u, x.into_spatial(&tap.layer_id)?, Some((part, tap.what)))
        }
        (_, node) => {
            let x = match tap.what {
                TapPoint::LayerInput => x,
                TapPoint::LayerOutput => run_nodes(std::slice::from_ref(node), x)?,
            };
            x.into_spatial(&tap.layer_id)
        }
    }
}

/// Per-input-channel partial sums of output element `(h_out, w_out, j)`,
/// without bias. Entries sum to the convolution output there.
pub fn contribution_vector(
    input: &Tensor3,
    kernel: &Tensor4,
    params: ConvParams,
    pos: (usize, usize),
    j: usize,
) -> Result<Vec<f64>> {
    if input.channels() != kernel.cin() {
        return Err(Error::Shape(format!(
            "input has {} channels but kernel expects {}",
            input.channels(),
            kernel.cin()
        )));
    }
    let ho = params.output_dim(input.height(), kernel.kh())?;
    let wo = params.output_dim(input.width(), kernel.kw())?;
    let (oh, ow) = pos;
    if oh >= ho || ow >= wo || j >= kernel.cout() {
        return Err(Error::Index(format!(
            "position ({oh}, {ow}) channel {j} outside {ho}x{wo}x{}",
            kernel.cout()
        )));
    }
    Ok(contribution_unchecked(input, kernel, params, oh, ow, j))
}

pub(crate) fn contribution_unchecked(
    input: &Tensor3,
    kernel: &Tensor4,
    params: ConvParams,
    oh: usize,
    ow: usize,
    j: usize,
) -> Vec<f64> {
    let pad = params.padding.amount() as isize;
    let mut out = vec![0f64; kernel.cin()];
    for a in 0..kernel.kh() {
        let ih = (oh * params.stride + a) as isize - pad;
        if ih < 0 || ih >= input.height() as isize {
            continue;
        }
        for b in 0..kernel.kw() {
            let iw = (ow * params.stride + b) as isize - pad;
            if iw < 0 || iw >= input.width() as isize {
                continue;
            }
            for (c, o) in out.iter_mut().enumerate() {
                *o += input.get(ih as usize, iw as usize, c) as f64 * kernel.get(a, b, c, j) as f64;
            }
        }
    }
    out
}

/// The same output element summed in convolution order, `(kh, kw, c)`.
pub(crate) fn output_element(
    input: &Tensor3,
    kernel: &Tensor4,
    params: ConvParams,
    oh: usize,
    ow: usize,
    j: usize,
) -> f64 {
    let pad = params.padding.amount() as isize;
    let mut acc = 0f64;
    for a in 0..kernel.kh() {
        let ih = (oh * params.stride + a) as isize - pad;
        if ih < 0 || ih >= input.height() as isize {
            continue;
        }
        for b in 0..kernel.kw() {
            let iw = (ow * params.stride + b) as isize - pad;
            if iw < 0 || iw >= input.width() as isize {
                continue;
            }
            for c in 0..kernel.cin() {
                acc +=
                    input.get(ih as usize, iw as usize, c) as f64 * kernel.get(a, b, c, j) as f64;
            }
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::graph::{ChannelAffine, Conv2D, ConvBlock, LayerSpec};
    use proptest::prelude::*;

    #[test]
    fn single_conv_graph_matches_conv2d() {
        let g = fixtures::single_conv([6, 5, 3], 3, 4, ConvParams::new(2, 1), 3);
        let x = fixtures::random_input(g.input_shape, 9);
        let c = g.conv(g.locate("conv").unwrap()).unwrap();
        let direct = conv2d(&x, &c.kernel, c.bias.as_deref(), c.params).unwrap();
        assert_eq!(forward(&g, &x).unwrap(), Activation::Spatial(direct));
    }

    #[test]
    fn zero_identity_unit_is_relu() {
        let zero_block = |ci: usize, co: usize, k: usize, p: usize| ConvBlock {
            conv: Conv2D {
                kernel: Tensor4::from_fn(k, k, ci, co, |_, _, _, _| 0.0),
                bias: None,
                params: ConvParams::new(1, p),
            },
            affine: None,
        };
        let mut g = Graph::new("zero", [5, 5, 4]);
        g.push_unit(BottleneckUnit {
            name: "u".into(),
            conv1: zero_block(4, 2, 1, 0),
            conv2: zero_block(2, 2, 3, 1),
            conv3: zero_block(2, 4, 1, 0),
            shortcut: Shortcut::Identity { sample: None },
            post_add_relu: true,
        });
        let x = fixtures::random_input([5, 5, 4], 1);
        assert_eq!(forward(&g, &x).unwrap(), Activation::Spatial(relu(&x)));
    }

    #[test]
    fn wrong_input_shape_is_validation_error() {
        let g = fixtures::tiny_cnn(0);
        let x = fixtures::random_input([7, 8, 3], 0);
        match forward(&g, &x) {
            Err(Error::Validation(v)) => assert_eq!(v[0].node, "input"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn taps() {
        let g = fixtures::mini_resnet(2);
        let x = fixtures::random_input(g.input_shape, 4);
        assert_eq!(
            forward_to_layer(&g, &x, &TapRequest::input("stem")).unwrap(),
            x
        );
        for id in g.conv_ids() {
            let input = forward_to_layer(&g, &x, &TapRequest::input(&id)).unwrap();
            let output = forward_to_layer(&g, &x, &TapRequest::output(&id)).unwrap();
            let c = g.conv(g.locate(&id).unwrap()).unwrap();
            let direct = conv2d(&input, &c.kernel, c.bias.as_deref(), c.params).unwrap();
            assert_eq!(output, direct, "{id}");
            let again = forward_to_layer(&g, &x, &TapRequest::output(&id)).unwrap();
            assert_eq!(output, again);
        }
        // A whole-unit tap equals running up to the next node.
        let out = forward_to_layer(&g, &x, &TapRequest::output("unit2")).unwrap();
        let next = forward_to_layer(&g, &x, &TapRequest::input("unit3")).unwrap();
        assert_eq!(out, next);
        assert!(matches!(
            forward_to_layer(&g, &x, &TapRequest::input("nope")),
            Err(Error::UnknownLayer(_))
        ));
    }

    #[test]
    fn affine_layer_runs() {
        let mut g = Graph::new("a", [2, 2, 2]);
        g.push_layer(
            "aff",
            LayerSpec::ChannelAffine(ChannelAffine {
                scale: vec![2.0, -1.0],
                shift: vec![0.5, 0.0],
            }),
        );
        let x = Tensor3::new(2, 2, 2, vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0]).unwrap();
        let y = forward(&g, &x).unwrap().into_flat();
        assert_eq!(y, vec![2.5, -1.0, 4.5, -2.0, 6.5, -3.0, 8.5, -4.0]);
    }

    #[test]
    fn one_by_one_contribution_is_elementwise_product() {
        let x = fixtures::random_input([3, 3, 5], 1);
        let k = Tensor4::from_fn(1, 1, 5, 2, |_, _, i, o| (i as f32 - 2.0) * (o as f32 + 1.0));
        let v = contribution_vector(&x, &k, ConvParams::default(), (1, 2), 1).unwrap();
        for c in 0..5 {
            assert_eq!(v[c], x.get(1, 2, c) as f64 * k.get(0, 0, c, 1) as f64);
        }
        assert!(contribution_vector(&x, &k, ConvParams::default(), (3, 0), 0).is_err());
        assert!(contribution_vector(&x, &k, ConvParams::default(), (0, 0), 2).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn contributions_sum_to_conv_output(
            h in 3usize..8, w in 3usize..8, c in 1usize..5, cout in 1usize..4,
            k in 1usize..4, stride in 1usize..3, pad in 0usize..2, seed in 0u64..1000,
        ) {
            prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
            let x = fixtures::random_input([h, w, c], seed);
            let kern = crate::fixtures::single_conv([h, w, c], k, cout, ConvParams::new(stride, pad), seed)
                .conv(LayerRef::Node(0)).unwrap().kernel.clone();
            let params = ConvParams::new(stride, pad);
            let y = conv2d(&x, &kern, None, params).unwrap();
            for oh in 0..y.height() {
                for ow in 0..y.width() {
                    for j in 0..cout {
                        let v = contribution_vector(&x, &kern, params, (oh, ow), j).unwrap();
                        let s: f64 = v.iter().sum();
                        let o = y.get(oh, ow, j) as f64;
                        prop_assert!((s - o).abs() <= 1e-5 * o.abs().max(1.0));
                        let e = output_element(&x, &kern, params, oh, ow, j);
                        prop_assert!((s - e).abs() <= 1e-12 * e.abs().max(1.0));
                    }
                }
            }
        }
    }
}
