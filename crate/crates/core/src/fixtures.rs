//! Small seeded networks and inputs with known structure, for tests, the
//! acceptance suite and CLI demos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::archs::{bottleneck, Init, WeightInit};
use crate::graph::{Conv2D, Graph, LayerSpec, Pool};
use crate::tensor::{ConvParams, PoolKind, Tensor3, Tensor4};

/// Uniform `[-1, 1)` input of the given `(H, W, C)` shape.
pub fn random_input(shape: [usize; 3], seed: u64) -> Tensor3 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [h, w, c] = shape;
    Tensor3::from_fn(h, w, c, |_, _, _| rng.gen_range(-1.0..1.0))
}

/// `count` inputs with seeds `seed, seed + 1, ...`.
pub fn random_inputs(shape: [usize; 3], count: usize, seed: u64) -> Vec<Tensor3> {
    (0..count as u64)
        .map(|i| random_input(shape, seed.wrapping_add(i)))
        .collect()
}

fn pool(kind: PoolKind) -> LayerSpec {
    LayerSpec::Pool(Pool {
        kind,
        window: 2,
        stride: 2,
        pad: 0,
    })
}

/// conv(3x3, 3->4) relu maxpool conv(3x3, 4->6) relu avgpool flatten
/// dense(24->5), on 8x8x3 inputs.
pub fn tiny_cnn(seed: u64) -> Graph {
    let mut w = Init::new(WeightInit::Random { seed });
    let mut g = Graph::new("tiny_cnn", [8, 8, 3]);
    g.push_layer("conv1", LayerSpec::Conv2D(w.conv(3, 3, 4, 1, 1, true)))
        .push_layer("relu1", LayerSpec::Relu)
        .push_layer("pool1", pool(PoolKind::Max))
        .push_layer("conv2", LayerSpec::Conv2D(w.conv(3, 4, 6, 1, 1, true)))
        .push_layer("relu2", LayerSpec::Relu)
        .push_layer("pool2", pool(PoolKind::Avg))
        .push_layer("flatten", LayerSpec::Flatten)
        .push_layer("fc", LayerSpec::Dense(w.dense(24, 5)));
    g
}

/// Makes output channel `dst` of `producer` equal `factor` times channel
/// `src`. With `factor > 0` this survives a following ReLU.
fn copy_filter(producer: &mut Conv2D, src: usize, dst: usize, factor: f32) {
    let k = &producer.kernel;
    let src_vals: Vec<(usize, f32)> = (0..k.kh())
        .flat_map(|a| (0..k.kw()).flat_map(move |b| (0..k.cin()).map(move |i| (a, b, i))))
        .map(|(a, b, i)| (k.index(a, b, i, dst), factor * k.get(a, b, i, src)))
        .collect();
    let mut data = k.data().to_vec();
    for (idx, v) in src_vals {
        data[idx] = v;
    }
    let [kh, kw, cin, cout] = k.shape();
    producer.kernel = Tensor4::new(kh, kw, cin, cout, data).expect("same shape");
    if let Some(b) = &mut producer.bias {
        b[dst] = factor * b[src];
    }
}

/// Makes the input slice `dst` of `consumer` equal `factor` times slice `src`.
fn copy_slice(consumer: &mut Conv2D, src: usize, dst: usize, factor: f32) {
    let k = &consumer.kernel;
    let [kh, kw, cin, cout] = k.shape();
    let mut data = k.data().to_vec();
    for a in 0..kh {
        for b in 0..kw {
            for o in 0..cout {
                data[k.index(a, b, dst, o)] = factor * k.get(a, b, src, o);
            }
        }
    }
    consumer.kernel = Tensor4::new(kh, kw, cin, cout, data).expect("same shape");
}

fn conv_mut<'a>(g: &'a mut Graph, name: &str) -> &'a mut Conv2D {
    g.nodes
        .iter_mut()
        .find_map(|n| match n {
            crate::graph::Node::Layer(l) if l.name == name => match &mut l.spec {
                LayerSpec::Conv2D(c) => Some(c),
                _ => None,
            },
            _ => None,
        })
        .expect("fixture layer exists")
}

fn two_conv_net(name: &str, seed: u64, mid: usize) -> Graph {
    let mut w = Init::new(WeightInit::Random { seed });
    let mut g = Graph::new(name, [8, 8, 3]);
    g.push_layer("conv1", LayerSpec::Conv2D(w.conv(3, 3, mid, 1, 1, true)))
        .push_layer("relu1", LayerSpec::Relu)
        .push_layer("conv2", LayerSpec::Conv2D(w.conv(3, mid, 6, 1, 1, true)))
        .push_layer("relu2", LayerSpec::Relu)
        .push_layer("pool2", pool(PoolKind::Max))
        .push_layer("flatten", LayerSpec::Flatten)
        .push_layer("fc", LayerSpec::Dense(w.dense(4 * 4 * 6, 5)));
    g
}

/// The input of `conv2` (4 channels) has channel 2 equal to `factor` times
/// channel 0, and conv2's kernel slices for channels 0 and 2 are equal, so
/// channel 2 is exactly redundant given channel 0. Requires `factor > 0`.
pub fn duplicate_channel_net(seed: u64, factor: f32) -> Graph {
    assert!(factor > 0.0, "duplicate factor must be positive");
    let mut g = two_conv_net("duplicate_channel_net", seed, 4);
    copy_filter(conv_mut(&mut g, "conv1"), 0, 2, factor);
    copy_slice(conv_mut(&mut g, "conv2"), 0, 2, 1.0);
    g
}

/// `conv2` reads 8 channels whose contributions have rank 4: channel `c + 4`
/// is a positive multiple of channel `c` and its kernel slices are a
/// multiple of those of `c`.
pub fn planted_redundancy_net(seed: u64) -> Graph {
    let mut g = two_conv_net("planted_redundancy_net", seed, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for c in 0..4 {
        let alpha = rng.gen_range(0.5f32..2.0);
        let beta = rng.gen_range(-2.0f32..2.0);
        copy_filter(conv_mut(&mut g, "conv1"), c, c + 4, alpha);
        copy_slice(conv_mut(&mut g, "conv2"), c, c + 4, beta);
    }
    g
}

/// stem conv(3x3, 3->8) + affine + relu, two identity bottleneck units
/// (8 -> 4 -> 4 -> 8), one projection unit with stride 2 (8 -> 8 -> 8 -> 16),
/// global average pooling and a dense classifier with 5 outputs. Inputs are
/// 8x8x3.
pub fn mini_resnet(seed: u64) -> Graph {
    let mut w = Init::new(WeightInit::Random { seed });
    let mut g = Graph::new("mini_resnet", [8, 8, 3]);
    g.push_layer("stem", LayerSpec::Conv2D(w.conv(3, 3, 8, 1, 1, false)))
        .push_layer("stem_bn", LayerSpec::ChannelAffine(w.affine(8, 1.0)))
        .push_layer("stem_relu", LayerSpec::Relu);
    let u1 = bottleneck(&mut w, "unit1".into(), 8, 4, 8, 1);
    let u2 = bottleneck(&mut w, "unit2".into(), 8, 4, 8, 1);
    let u3 = bottleneck(&mut w, "unit3".into(), 8, 8, 16, 2);
    g.push_unit(u1).push_unit(u2).push_unit(u3);
    g.push_layer(
        "pool",
        LayerSpec::Pool(Pool {
            kind: PoolKind::Avg,
            window: 4,
            stride: 1,
            pad: 0,
        }),
    )
    .push_layer("flatten", LayerSpec::Flatten)
    .push_layer("fc", LayerSpec::Dense(w.dense(16, 5)));
    g
}

/// A single-layer graph around `conv2d`, handy for shape-level checks.
pub fn single_conv(
    shape: [usize; 3],
    k: usize,
    cout: usize,
    params: ConvParams,
    seed: u64,
) -> Graph {
    let mut w = Init::new(WeightInit::Random { seed });
    let mut conv = w.conv(k, shape[2], cout, params.stride, 0, true);
    conv.params = params;
    let mut g = Graph::new("single_conv", shape);
    g.push_layer("conv", LayerSpec::Conv2D(conv));
    g
}
