#![allow(dead_code)]

use std::collections::HashMap;

use chanprune::graph::{count_flops, Graph, Node, UnitPart};
use chanprune::prune::PruneRecord;
use chanprune::tensor::{Tensor3, Tensor4};

/// Direct nested-loop convolution, independent of the library's kernel.
pub fn conv_oracle(
    x: &Tensor3,
    k: &Tensor4,
    bias: Option<&[f32]>,
    stride: usize,
    pad: usize,
) -> Tensor3 {
    let [h, w, _] = x.shape();
    let [kh, kw, cin, cout] = k.shape();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0f32; ho * wo * cout];
    for oh in 0..ho {
        for ow in 0..wo {
            for j in 0..cout {
                let mut acc = 0f64;
                for a in 0..kh {
                    for b in 0..kw {
                        for c in 0..cin {
                            let ih = (oh * stride + a) as isize - pad as isize;
                            let iw = (ow * stride + b) as isize - pad as isize;
                            if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < w {
                                acc += x.get(ih as usize, iw as usize, c) as f64
                                    * k.get(a, b, c, j) as f64;
                            }
                        }
                    }
                }
                if let Some(b) = bias {
                    acc += b[j] as f64;
                }
                out[(oh * wo + ow) * cout + j] = acc as f32;
            }
        }
    }
    Tensor3::new(ho, wo, cout, out).unwrap()
}

/// Nested-loop pooling without padding.
pub fn pool_oracle(x: &Tensor3, max: bool, window: usize, stride: usize) -> Tensor3 {
    let [h, w, c] = x.shape();
    let ho = (h - window) / stride + 1;
    let wo = (w - window) / stride + 1;
    Tensor3::from_fn(ho, wo, c, |oh, ow, ch| {
        let mut vals = Vec::new();
        for a in 0..window {
            for b in 0..window {
                vals.push(x.get(oh * stride + a, ow * stride + b, ch) as f64);
            }
        }
        if max {
            vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max) as f32
        } else {
            (vals.iter().sum::<f64>() / vals.len() as f64) as f32
        }
    })
}

/// Contribution of input channel `c` alone, by convolving the single channel.
pub fn channel_contribution_oracle(
    x: &Tensor3,
    k: &Tensor4,
    stride: usize,
    pad: usize,
    pos: (usize, usize),
    j: usize,
    c: usize,
) -> f64 {
    let [h, w, _] = x.shape();
    let [kh, kw, _, _] = k.shape();
    let xc = Tensor3::from_fn(h, w, 1, |a, b, _| x.get(a, b, c));
    let kc = Tensor4::from_fn(kh, kw, 1, 1, |a, b, _, _| k.get(a, b, c, j));
    conv_oracle(&xc, &kc, None, stride, pad).get(pos.0, pos.1, 0) as f64
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

fn kept_lens(log: &[PruneRecord]) -> HashMap<String, usize> {
    log.iter().map(|r| (r.id.clone(), r.kept.len())).collect()
}

/// FLOPs of `original` after the pruning in `log`, from kept-channel counts
/// alone: every convolution costs `Ho Wo K K cin' cout'`, where the input
/// count is the kept count of that layer and the output count is the kept
/// count of whatever consumes it.
pub fn predicted_flops(original: &Graph, log: &[PruneRecord]) -> u64 {
    let kept = kept_lens(log);
    let report = count_flops(original, original.input_shape).unwrap();
    let spatial: HashMap<&str, (u64, u64)> = report
        .layers
        .iter()
        .filter(|l| l.output_shape.len() == 3)
        .map(|l| {
            (
                l.id.as_str(),
                (l.output_shape[0] as u64, l.output_shape[1] as u64),
            )
        })
        .collect();
    let ids = original.conv_ids();
    let cin_of = |id: &str| -> u64 {
        kept.get(id)
            .map(|&k| k as u64)
            .unwrap_or_else(|| original.conv(original.locate(id).unwrap()).unwrap().cin() as u64)
    };
    let mut total = 0u64;
    for id in &ids {
        let conv = original.conv(original.locate(id).unwrap()).unwrap();
        let k = (conv.kernel.kh() * conv.kernel.kw()) as u64;
        let (ho, wo) = spatial[id.as_str()];
        let cin = if id.ends_with("/shortcut") {
            cin_of(&id.replace("/shortcut", "/conv1"))
        } else {
            cin_of(id)
        };
        let cout = consumer_channels(original, id, &cin_of, conv.cout() as u64);
        total += ho * wo * k * cin * cout;
    }
    // Dense layers follow the untouched last layer and keep their size.
    total
        + report
            .layers
            .iter()
            .filter(|l| l.kind == "dense")
            .map(|l| l.flops)
            .sum::<u64>()
}

/// Output channel count of `id` after pruning: the kept input count of the
/// layer that reads it, or its own count when nothing downstream shrank.
fn consumer_channels(g: &Graph, id: &str, cin_of: &dyn Fn(&str) -> u64, own: u64) -> u64 {
    if let Some((unit, part)) = id.split_once('/') {
        return match part {
            "conv1" => cin_of(&format!("{unit}/conv2")),
            "conv2" => cin_of(&format!("{unit}/conv3")),
            _ => next_reader(g, unit).map_or(own, |n| cin_of(&n)),
        };
    }
    next_reader(g, id).map_or(own, |n| cin_of(&n))
}

/// The convolution that reads the output of top-level node `name`, found
/// by scanning forward over channelwise layers.
fn next_reader(g: &Graph, name: &str) -> Option<String> {
    let idx = g.nodes.iter().position(|n| n.name() == name)?;
    for node in &g.nodes[idx + 1..] {
        match node {
            Node::Unit(u) => return Some(u.layer_id(UnitPart::Conv1)),
            Node::Layer(l) => match l.spec.kind() {
                "conv2d" => return Some(l.name.clone()),
                "relu" | "pool" | "channel_affine" => continue,
                _ => return None,
            },
        }
    }
    None
}
