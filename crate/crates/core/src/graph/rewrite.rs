use super::{validate_graph, BottleneckUnit, Graph, LayerRef, LayerSpec, Node, Shortcut, UnitPart};
use crate::error::{Error, Result};
use crate::tensor::check_indices;

/// Unit-input channels the identity shortcut forwards to the add, in order.
/// `None` for projection shortcuts, which are pruned together with conv1.
pub fn shortcut_required_channels(unit: &BottleneckUnit) -> Option<Vec<usize>> {
    match &unit.shortcut {
        Shortcut::Identity { sample: Some(s) } => Some(s.clone()),
        Shortcut::Identity { sample: None } => Some((0..unit.conv1.conv.cin()).collect()),
        Shortcut::Projection(_) => None,
    }
}

fn is_identity(indices: &[usize], n: usize) -> bool {
    indices.len() == n && indices.iter().enumerate().all(|(i, &k)| i == k)
}

/// Keeps only the `kept` input channels of convolution `layer_id`, folding
/// `scales` into the kept kernel slices, and drops the matching output
/// channels of the layer that produces them. Shape-preserving layers in
/// between (ReLU, pooling, channel affines) are walked through; affines are
/// restricted as well.
///
/// `kept` may be given in any order; it is applied sorted ascending with
/// `scales` permuted alongside.
pub fn rewrite_conv_pair(
    graph: &Graph,
    layer_id: &str,
    kept: &[usize],
    scales: &[f64],
) -> Result<Graph> {
    if kept.len() != scales.len() {
        return Err(Error::Argument(format!(
            "{} kept channels but {} scales",
            kept.len(),
            scales.len()
        )));
    }
    if kept.is_empty() {
        return Err(Error::Argument("at least one channel must be kept".into()));
    }
    let at = graph.locate(layer_id)?;
    let cin = match (at, graph.conv(at)) {
        (LayerRef::InUnit(_, UnitPart::Shortcut), _) => {
            return Err(Error::Rewrite(format!(
                "{layer_id}: projection inputs are rewritten through the unit's conv1"
            )))
        }
        (_, Some(c)) => c.cin(),
        (_, None) => return Err(Error::Rewrite(format!("{layer_id} is not a convolution"))),
    };
    check_indices(kept, cin)?;
    if scales.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!("{layer_id}: non-finite scale")));
    }

    let mut order: Vec<usize> = (0..kept.len()).collect();
    order.sort_by_key(|&i| kept[i]);
    let kept: Vec<usize> = order.iter().map(|&i| kept[i]).collect();
    let scales: Vec<f64> = order.iter().map(|&i| scales[i]).collect();

    let mut g = graph.clone();
    match at {
        LayerRef::Node(idx) => {
            if let Node::Layer(l) = &mut g.nodes[idx] {
                if let LayerSpec::Conv2D(c) = &mut l.spec {
                    c.kernel = c.kernel.select_inputs(&kept, &scales)?;
                }
            }
            restrict_producer(&mut g, idx, layer_id, &kept)?;
        }
        LayerRef::InUnit(idx, part) => {
            let Node::Unit(u) = &mut g.nodes[idx] else {
                unreachable!("locate returned a unit reference")
            };
            let block = u.block_mut(part).expect("unit convolution exists");
            block.conv.kernel = block.conv.kernel.select_inputs(&kept, &scales)?;
            match part {
                UnitPart::Conv2 => u.conv1.restrict_outputs(&kept)?,
                UnitPart::Conv3 => u.conv2.restrict_outputs(&kept)?,
                UnitPart::Conv1 => {
                    match &mut u.shortcut {
                        Shortcut::Projection(b) => {
                            b.conv.kernel = b.conv.kernel.select_inputs(&kept, &scales)?;
                        }
                        Shortcut::Identity { sample } => {
                            let required: Vec<usize> = match sample {
                                Some(s) => s.clone(),
                                None => (0..cin).collect(),
                            };
                            let mut remapped = Vec::with_capacity(required.len());
                            for r in &required {
                                match kept.binary_search(r) {
                                    Ok(pos) => remapped.push(pos),
                                    Err(_) => {
                                        return Err(Error::Rewrite(format!(
                                            "{layer_id}: channel {r} is needed by the identity shortcut but not kept"
                                        )))
                                    }
                                }
                            }
                            *sample = if is_identity(&remapped, kept.len()) {
                                None
                            } else {
                                Some(remapped)
                            };
                        }
                    }
                    restrict_producer(&mut g, idx, layer_id, &kept)?;
                }
                UnitPart::Shortcut => unreachable!("rejected above"),
            }
        }
    }

    let violations = validate_graph(&g);
    if !violations.is_empty() {
        return Err(Error::Invariant(format!(
            "rewrite of {layer_id} left the graph invalid: {}",
            violations
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join("; ")
        )));
    }
    Ok(g)
}

/// Walks backward from the node at `consumer` to the first node that
/// produces channels and keeps only `kept` of them.
fn restrict_producer(g: &mut Graph, consumer: usize, layer_id: &str, kept: &[usize]) -> Result<()> {
    for idx in (0..consumer).rev() {
        match &mut g.nodes[idx] {
            Node::Layer(l) => match &mut l.spec {
                LayerSpec::Relu | LayerSpec::Pool(_) => {}
                LayerSpec::ChannelAffine(a) => a.restrict(kept),
                LayerSpec::Conv2D(c) => return c.restrict_outputs(kept),
                LayerSpec::ChannelSample(indices) => {
                    *indices = kept.iter().map(|&k| indices[k]).collect();
                    return Ok(());
                }
                LayerSpec::Dense(_) | LayerSpec::Flatten => {
                    return Err(Error::Rewrite(format!(
                        "{layer_id}: producer search reached `{}`, which is not channelwise",
                        l.name
                    )))
                }
            },
            Node::Unit(u) => {
                u.conv3.restrict_outputs(kept)?;
                let unit_in = u.conv1.conv.cin();
                match &mut u.shortcut {
                    Shortcut::Projection(b) => b.restrict_outputs(kept)?,
                    Shortcut::Identity { sample } => {
                        let next: Vec<usize> = match sample {
                            Some(s) => kept.iter().map(|&k| s[k]).collect(),
                            None => kept.to_vec(),
                        };
                        *sample = if is_identity(&next, unit_in) {
                            None
                        } else {
                            Some(next)
                        };
                    }
                }
                return Ok(());
            }
        }
    }
    Err(Error::Rewrite(format!(
        "{layer_id} reads the graph input; there is no producer to shrink"
    )))
}
