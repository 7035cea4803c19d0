//! Random sampling of contribution vectors into the matrices `A` (`C x N`)
//! and `B` (`1 x N`).
//!
//! Sample sites `(image, j, h, w)` are drawn up front from a seeded stream,
//! so the result does not depend on how the forward passes are scheduled.
//! The stream is prefix-consistent: the first `N'` columns of an `N`-column
//! draw are exactly an `N'`-column draw with the same seed.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, LayerRef, UnitPart};
use crate::inference::{contribution_unchecked, forward_to_layer, output_element, TapRequest};
use crate::linalg::Matrix;
use crate::tensor::{ConvParams, Tensor3, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    /// Number of columns `N`; `None` means `max(4000, 20 C)`.
    #[serde(default)]
    pub n_samples: Option<usize>,
    pub seed: u64,
    /// Cap on columns drawn from one image (per source layer); `None` means
    /// unlimited.
    #[serde(default)]
    pub max_per_image: Option<usize>,
    /// Relative draw probability of (conv1, projection) in joint sampling.
    #[serde(default = "default_weights")]
    pub source_weights: (f64, f64),
}

fn default_weights() -> (f64, f64) {
    (0.5, 0.5)
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            n_samples: None,
            seed: 0,
            max_per_image: None,
            source_weights: default_weights(),
        }
    }
}

impl SampleConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn resolved_samples(&self, channels: usize) -> usize {
        self.n_samples.unwrap_or_else(|| (20 * channels).max(4000))
    }
}

/// Where one column of `A` came from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SampleSite {
    pub image: usize,
    pub layer: String,
    pub j: usize,
    pub h: usize,
    pub w: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContributionMatrix {
    pub a: Matrix,
    pub b: Matrix,
    pub provenance: Vec<SampleSite>,
    /// The configuration with `n_samples` resolved.
    pub config: SampleConfig,
}

impl ContributionMatrix {
    pub fn channels(&self) -> usize {
        self.a.rows()
    }

    pub fn samples(&self) -> usize {
        self.a.cols()
    }

    /// Largest violation of `B = 1^T A`, relative to `max(1, |B|)`.
    pub fn column_sum_error(&self) -> f64 {
        let sums = self.a.column_sums();
        sums.row(0)
            .iter()
            .zip(self.b.row(0))
            .map(|(s, b)| (s - b).abs() / b.abs().max(1.0))
            .fold(0.0, f64::max)
    }
}

/// One layer whose output elements are sampled.
struct Source {
    id: String,
    kernel: Tensor4,
    params: ConvParams,
    /// `(H_out, W_out, C_out)`.
    out: [usize; 3],
}

impl Source {
    fn sites(&self) -> usize {
        self.out.iter().product()
    }

    /// Site index ordering: `j` fastest, then `w`, then `h`.
    fn decode(&self, site: usize) -> (usize, usize, usize) {
        let [_, wo, co] = self.out;
        (site / (wo * co), (site / co) % wo, site % co)
    }
}

/// Lazy Fisher-Yates over `0..n`: each call returns a fresh value drawn
/// uniformly from those not yet returned.
#[derive(Default)]
struct Shuffle {
    swapped: HashMap<usize, usize>,
    drawn: usize,
}

impl Shuffle {
    fn next(&mut self, n: usize, rng: &mut ChaCha8Rng) -> usize {
        let t = rng.gen_range(self.drawn..n);
        let at = |s: &Self, i: usize| s.swapped.get(&i).copied().unwrap_or(i);
        let value = at(self, t);
        let head = at(self, self.drawn);
        self.swapped.insert(t, head);
        self.drawn += 1;
        value
    }
}

struct Draw {
    source: usize,
    image: usize,
    site: usize,
}

/// Per-source sampler over images weighted by their remaining capacity.
struct SourceStream {
    sites: usize,
    remaining: Vec<usize>,
    total: usize,
    shuffles: Vec<Shuffle>,
}

impl SourceStream {
    fn new(sites: usize, images: usize, cap: Option<usize>) -> Self {
        let per = cap.map_or(sites, |c| c.min(sites));
        Self {
            sites,
            remaining: vec![per; images],
            total: per * images,
            shuffles: (0..images).map(|_| Shuffle::default()).collect(),
        }
    }

    fn draw(&mut self, rng: &mut ChaCha8Rng) -> (usize, usize) {
        let mut r = rng.gen_range(0..self.total);
        let mut image = 0;
        while r >= self.remaining[image] {
            r -= self.remaining[image];
            image += 1;
        }
        self.remaining[image] -= 1;
        self.total -= 1;
        (image, self.shuffles[image].next(self.sites, rng))
    }
}

fn draw_sites(
    sources: &[Source],
    weights: &[f64],
    images: usize,
    n: usize,
    config: &SampleConfig,
) -> Result<Vec<Draw>> {
    let mut streams: Vec<SourceStream> = sources
        .iter()
        .map(|s| SourceStream::new(s.sites(), images, config.max_per_image))
        .collect();
    let available: usize = streams
        .iter()
        .zip(weights)
        .filter(|(_, &w)| w > 0.0)
        .map(|(s, _)| s.total)
        .sum();
    if n > available {
        return Err(Error::SamplingExhausted {
            requested: n,
            available,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    // Source choice has its own stream so a single active source reproduces
    // the single-layer draw exactly.
    let mut pick = ChaCha8Rng::seed_from_u64(config.seed);
    pick.set_stream(1);
    let weight_sum: f64 = weights.iter().sum();
    let mut draws = Vec::with_capacity(n);
    for _ in 0..n {
        let source = if sources.len() == 1 {
            0
        } else {
            let u: f64 = pick.gen::<f64>() * weight_sum;
            let preferred = if u < weights[0] { 0 } else { 1 };
            let usable = |s: usize| weights[s] > 0.0 && streams[s].total > 0;
            if usable(preferred) {
                preferred
            } else {
                1 - preferred
            }
        };
        let (image, site) = streams[source].draw(&mut rng);
        draws.push(Draw {
            source,
            image,
            site,
        });
    }
    Ok(draws)
}

fn assemble(
    graph: &Graph,
    sources: &[Source],
    tap_id: &str,
    calib: &[Tensor3],
    draws: &[Draw],
    config: SampleConfig,
) -> Result<ContributionMatrix> {
    let channels = sources[0].kernel.cin();
    let mut by_image: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (n, d) in draws.iter().enumerate() {
        by_image.entry(d.image).or_default().push(n);
    }
    let tap = TapRequest::input(tap_id);
    let groups: Vec<(usize, Vec<usize>)> = by_image.into_iter().collect();
    let columns: Vec<Vec<(usize, Vec<f64>, f64)>> = groups
        .par_iter()
        .map(|(image, cols)| -> Result<_> {
            let x = forward_to_layer(graph, &calib[*image], &tap)?;
            Ok(cols
                .iter()
                .map(|&n| {
                    let d = &draws[n];
                    let s = &sources[d.source];
                    let (h, w, j) = s.decode(d.site);
                    let a = contribution_unchecked(&x, &s.kernel, s.params, h, w, j);
                    let b = output_element(&x, &s.kernel, s.params, h, w, j);
                    (n, a, b)
                })
                .collect())
        })
        .collect::<Result<_>>()?;

    let n_total = draws.len();
    let mut a = Matrix::zeros(channels, n_total);
    let mut b = Matrix::zeros(1, n_total);
    for (n, col, o) in columns.into_iter().flatten() {
        for (c, v) in col.into_iter().enumerate() {
            a[(c, n)] = v;
        }
        b[(0, n)] = o;
    }
    let provenance = draws
        .iter()
        .map(|d| {
            let s = &sources[d.source];
            let (h, w, j) = s.decode(d.site);
            SampleSite {
                image: d.image,
                layer: s.id.clone(),
                j,
                h,
                w,
            }
        })
        .collect();
    Ok(ContributionMatrix {
        a,
        b,
        provenance,
        config,
    })
}

fn source(graph: &Graph, id: &str) -> Result<Source> {
    let at = graph.locate(id)?;
    let conv = graph
        .conv(at)
        .ok_or_else(|| Error::Argument(format!("{id} is not a convolution")))?;
    let shapes = crate::graph::infer_shapes(graph).map_err(Error::Validation)?;
    let out = shapes
        .iter()
        .find(|(sid, _)| sid == id)
        .and_then(|(_, s)| match s {
            crate::graph::ActShape::Spatial(s) => Some(*s),
            crate::graph::ActShape::Flat(_) => None,
        })
        .ok_or_else(|| Error::Invariant(format!("no output shape for {id}")))?;
    Ok(Source {
        id: id.to_string(),
        kernel: conv.kernel.clone(),
        params: conv.params,
        out,
    })
}

fn resolve(config: &SampleConfig, channels: usize, calib: &[Tensor3]) -> Result<SampleConfig> {
    if calib.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if config.max_per_image == Some(0) {
        return Err(Error::Argument("max_per_image must be at least 1".into()));
    }
    let n = config.resolved_samples(channels);
    if n < channels {
        return Err(Error::Argument(format!(
            "{n} samples cannot determine {channels} channels"
        )));
    }
    if n < 10 * channels {
        log::warn!(
            "only {n} samples for {channels} channels; at least {} recommended",
            10 * channels
        );
    }
    Ok(SampleConfig {
        n_samples: Some(n),
        ..*config
    })
}

/// Samples contribution vectors of convolution `layer_id` over `calib`.
pub fn collect_contributions(
    graph: &Graph,
    layer_id: &str,
    calib: &[Tensor3],
    config: &SampleConfig,
) -> Result<ContributionMatrix> {
    let src = source(graph, layer_id)?;
    let config = resolve(config, src.kernel.cin(), calib)?;
    let n = config.n_samples.expect("resolved");
    let sources = [src];
    let draws = draw_sites(&sources, &[1.0], calib.len(), n, &config)?;
    assemble(graph, &sources, layer_id, calib, &draws, config)
}

/// Samples jointly from conv1 and the projection shortcut of `unit_id`,
/// which read the same input.
pub fn collect_joint_contributions(
    graph: &Graph,
    unit_id: &str,
    calib: &[Tensor3],
    config: &SampleConfig,
) -> Result<ContributionMatrix> {
    let idx = match graph.locate(unit_id)? {
        LayerRef::Node(i) => i,
        LayerRef::InUnit(..) => {
            return Err(Error::Argument(format!(
                "{unit_id} names a layer, not a unit"
            )))
        }
    };
    let unit = graph
        .unit(idx)
        .ok_or_else(|| Error::WrongVariant(format!("{unit_id} is not a bottleneck unit")))?;
    if !unit.has_projection() {
        return Err(Error::WrongVariant(format!(
            "{unit_id} has an identity shortcut; joint sampling needs a projection"
        )));
    }
    let (w1, w2) = config.source_weights;
    if !(w1 >= 0.0 && w2 >= 0.0 && w1 + w2 > 0.0) || !w1.is_finite() || !w2.is_finite() {
        return Err(Error::Argument(format!(
            "invalid source weights ({w1}, {w2})"
        )));
    }
    let conv1 = unit.layer_id(UnitPart::Conv1);
    let sources = [
        source(graph, &conv1)?,
        source(graph, &unit.layer_id(UnitPart::Shortcut))?,
    ];
    let config = resolve(config, sources[0].kernel.cin(), calib)?;
    let n = config.n_samples.expect("resolved");
    let draws = draw_sites(&sources, &[w1, w2], calib.len(), n, &config)?;
    assemble(graph, &sources, &conv1, calib, &draws, config)
}
