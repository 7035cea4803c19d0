//! Reference architectures: VGG-16 and ResNet-50 at 224x224x3.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{
    BottleneckUnit, ChannelAffine, Conv2D, ConvBlock, Dense, Graph, LayerSpec, Pool, Shortcut,
};
use crate::tensor::{ConvParams, DenseMatrix, PoolKind, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightInit {
    /// All weights zero, affines the identity. Cheap; used for shape and
    /// FLOP work.
    Zeros,
    /// Uniform He-style initialization from a seeded stream.
    Random { seed: u64 },
}

/// Weight source shared by the builders in this module and the fixtures.
pub(crate) struct Init {
    rng: Option<ChaCha8Rng>,
}

impl Init {
    pub(crate) fn new(init: WeightInit) -> Self {
        Self {
            rng: match init {
                WeightInit::Zeros => None,
                WeightInit::Random { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
            },
        }
    }

    pub(crate) fn uniform(&mut self, n: usize, bound: f32) -> Vec<f32> {
        match &mut self.rng {
            None => vec![0.0; n],
            Some(rng) => (0..n).map(|_| rng.gen_range(-bound..=bound)).collect(),
        }
    }

    pub(crate) fn conv(
        &mut self,
        k: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Conv2D {
        let bound = (6.0 / (k * k * cin) as f32).sqrt();
        let kernel = Tensor4::new(k, k, cin, cout, self.uniform(k * k * cin * cout, bound))
            .expect("sizes agree");
        Conv2D {
            kernel,
            bias: bias.then(|| self.uniform(cout, 0.05)),
            params: ConvParams::new(stride, pad),
        }
    }

    pub(crate) fn affine(&mut self, c: usize, gain: f32) -> ChannelAffine {
        let scale = match &mut self.rng {
            None => vec![1.0; c],
            Some(rng) => (0..c).map(|_| gain * rng.gen_range(0.5..1.5)).collect(),
        };
        ChannelAffine {
            scale,
            shift: self.uniform(c, 0.1),
        }
    }

    pub(crate) fn dense(&mut self, inputs: usize, outputs: usize) -> Dense {
        let bound = (6.0 / inputs as f32).sqrt();
        Dense {
            weights: DenseMatrix::new(outputs, inputs, self.uniform(inputs * outputs, bound))
                .expect("sizes agree"),
            bias: self.uniform(outputs, 0.05),
        }
    }
}

fn max_pool(window: usize, stride: usize, pad: usize) -> LayerSpec {
    LayerSpec::Pool(Pool {
        kind: PoolKind::Max,
        window,
        stride,
        pad,
    })
}

/// Five 3x3 convolution groups (2, 2, 3, 3, 3 layers) each closed by 2x2
/// max pooling, then three fully connected layers.
pub fn vgg16(init: WeightInit) -> Graph {
    vgg16_scaled(init, 1, 224)
}

/// VGG-16 with every width divided by `width_divisor` on `side x side x 3`
/// inputs (`side` a multiple of 32). Fully connected widths shrink too.
pub fn vgg16_scaled(init: WeightInit, width_divisor: usize, side: usize) -> Graph {
    let d = width_divisor.max(1);
    let ch = |c: usize| (c / d).max(1);
    let mut w = Init::new(init);
    let mut g = Graph::new("vgg16", [side, side, 3]);
    let groups: [(usize, usize); 5] = [(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)];
    let mut cin = 3;
    for (gi, &(layers, width)) in groups.iter().enumerate() {
        let width = ch(width);
        for li in 0..layers {
            let name = format!("conv{}_{}", gi + 1, li + 1);
            g.push_layer(
                name.clone(),
                LayerSpec::Conv2D(w.conv(3, cin, width, 1, 1, true)),
            );
            g.push_layer(format!("relu{}_{}", gi + 1, li + 1), LayerSpec::Relu);
            cin = width;
        }
        g.push_layer(format!("pool{}", gi + 1), max_pool(2, 2, 0));
    }
    let cells = (side / 32) * (side / 32);
    g.push_layer("flatten", LayerSpec::Flatten);
    g.push_layer("fc6", LayerSpec::Dense(w.dense(cells * cin, ch(4096))));
    g.push_layer("relu6", LayerSpec::Relu);
    g.push_layer("fc7", LayerSpec::Dense(w.dense(ch(4096), ch(4096))));
    g.push_layer("relu7", LayerSpec::Relu);
    g.push_layer("fc8", LayerSpec::Dense(w.dense(ch(4096), 1000)));
    g.metadata.insert("arch".into(), "vgg16".into());
    if d > 1 {
        g.metadata.insert("width_divisor".into(), d.to_string());
    }
    g
}

pub(crate) fn bottleneck(
    w: &mut Init,
    name: String,
    cin: usize,
    mid: usize,
    cout: usize,
    stride: usize,
) -> BottleneckUnit {
    let block =
        |w: &mut Init, k: usize, ci: usize, co: usize, s: usize, p: usize, gain: f32| ConvBlock {
            conv: w.conv(k, ci, co, s, p, false),
            affine: Some(w.affine(co, gain)),
        };
    let shortcut = if stride != 1 || cin != cout {
        Shortcut::Projection(block(w, 1, cin, cout, stride, 0, 1.0))
    } else {
        Shortcut::Identity { sample: None }
    };
    BottleneckUnit {
        name,
        conv1: block(w, 1, cin, mid, stride, 0, 1.0),
        conv2: block(w, 3, mid, mid, 1, 1, 1.0),
        // A damped last affine keeps random-weight activations bounded
        // through deep stacks of identity units.
        conv3: block(w, 1, mid, cout, 1, 0, 0.25),
        shortcut,
        post_add_relu: true,
    }
}

/// ResNet-50 with the stride on the first 1x1 convolution of each
/// downsampling unit. `width_divisor` scales every channel count down
/// (1 gives the full network) for cheap end-to-end tests.
pub fn resnet50(init: WeightInit, width_divisor: usize) -> Graph {
    let d = width_divisor.max(1);
    let ch = |c: usize| (c / d).max(1);
    let mut w = Init::new(init);
    let mut g = Graph::new("resnet50", [224, 224, 3]);
    let stem = ch(64);
    g.push_layer("conv1", LayerSpec::Conv2D(w.conv(7, 3, stem, 2, 3, false)));
    g.push_layer("bn_conv1", LayerSpec::ChannelAffine(w.affine(stem, 1.0)));
    g.push_layer("conv1_relu", LayerSpec::Relu);
    g.push_layer("pool1", max_pool(3, 2, 1));

    let stages: [(usize, usize, usize); 4] = [(3, 64, 1), (4, 128, 2), (6, 256, 2), (3, 512, 2)];
    let mut cin = stem;
    for (si, &(units, mid, stride)) in stages.iter().enumerate() {
        for ui in 0..units {
            let name = format!("res{}{}", si + 2, (b'a' + ui as u8) as char);
            let s = if ui == 0 { stride } else { 1 };
            let unit = bottleneck(&mut w, name, cin, ch(mid), ch(4 * mid), s);
            cin = ch(4 * mid);
            g.push_unit(unit);
        }
    }
    g.push_layer(
        "pool5",
        LayerSpec::Pool(Pool {
            kind: PoolKind::Avg,
            window: 7,
            stride: 1,
            pad: 0,
        }),
    );
    g.push_layer("flatten", LayerSpec::Flatten);
    g.push_layer("fc1000", LayerSpec::Dense(w.dense(cin, 1000)));
    g.metadata.insert("arch".into(), "resnet50".into());
    if d > 1 {
        g.metadata.insert("width_divisor".into(), d.to_string());
    }
    g
}
