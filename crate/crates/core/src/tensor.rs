//! Dense activation and weight tensors plus the primitives needed to run a
//! convolutional network: convolution, pooling, ReLU, elementwise add,
//! channel gathering, per-channel affine and dense layers.
//!
//! Layouts are fixed: activations are `(h, w, c)` and kernels are
//! `(kh, kw, cin, cout)`, last index fastest. Convolution accumulates in
//! `f64` and rounds once to `f32`.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rank-3 activation tensor, `(h, w, c)` with `c` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Tensor3 {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "tensor dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "tensor {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::new(
            height,
            width,
            channels,
            vec![0.0; height * width * channels],
        )
        .expect("zero-sized tensor")
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for h in 0..height {
            for w in 0..width {
                for c in 0..channels {
                    data.push(f(h, w, c));
                }
            }
        }
        Self::new(height, width, channels, data).expect("zero-sized tensor")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, h: usize, w: usize, c: usize) -> usize {
        (h * self.width + w) * self.channels + c
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize, c: usize) -> f32 {
        self.data[self.index(h, w, c)]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            data: self.data.iter().map(|&x| f(x)).collect(),
            ..*self
        }
    }

    /// Single-channel slice as an `h x w x 1` tensor.
    pub fn channel(&self, c: usize) -> Result<Self> {
        channel_gather(self, &[c])
    }
}

/// Rank-4 convolution kernel, `(kh, kw, cin, cout)` with `cout` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    kh: usize,
    kw: usize,
    cin: usize,
    cout: usize,
    data: Vec<f32>,
}

impl Tensor4 {
    pub fn new(kh: usize, kw: usize, cin: usize, cout: usize, data: Vec<f32>) -> Result<Self> {
        if kh == 0 || kw == 0 || cin == 0 || cout == 0 {
            return Err(Error::Shape(format!(
                "kernel dimensions must be positive, got {kh}x{kw}x{cin}x{cout}"
            )));
        }
        if data.len() != kh * kw * cin * cout {
            return Err(Error::Shape(format!(
                "kernel {kh}x{kw}x{cin}x{cout} needs {} values, got {}",
                kh * kw * cin * cout,
                data.len()
            )));
        }
        Ok(Self {
            kh,
            kw,
            cin,
            cout,
            data,
        })
    }

    pub fn from_fn(
        kh: usize,
        kw: usize,
        cin: usize,
        cout: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(kh * kw * cin * cout);
        for a in 0..kh {
            for b in 0..kw {
                for i in 0..cin {
                    for o in 0..cout {
                        data.push(f(a, b, i, o));
                    }
                }
            }
        }
        Self::new(kh, kw, cin, cout, data).expect("zero-sized kernel")
    }

    pub fn kh(&self) -> usize {
        self.kh
    }

    pub fn kw(&self) -> usize {
        self.kw
    }

    pub fn cin(&self) -> usize {
        self.cin
    }

    pub fn cout(&self) -> usize {
        self.cout
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.kh, self.kw, self.cin, self.cout]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn index(&self, kh: usize, kw: usize, ci: usize, co: usize) -> usize {
        ((kh * self.kw + kw) * self.cin + ci) * self.cout + co
    }

    #[inline]
    pub fn get(&self, kh: usize, kw: usize, ci: usize, co: usize) -> f32 {
        self.data[self.index(kh, kw, ci, co)]
    }

    /// Keeps the listed input-channel slices, in order, multiplying slice `k`
    /// by `scales[k]`.
    pub fn select_inputs(&self, kept: &[usize], scales: &[f64]) -> Result<Self> {
        if kept.len() != scales.len() {
            return Err(Error::Argument(format!(
                "{} kept channels but {} scales",
                kept.len(),
                scales.len()
            )));
        }
        check_indices(kept, self.cin)?;
        let mut data = Vec::with_capacity(self.kh * self.kw * kept.len() * self.cout);
        for a in 0..self.kh {
            for b in 0..self.kw {
                for (&ci, &s) in kept.iter().zip(scales) {
                    let start = self.index(a, b, ci, 0);
                    data.extend(
                        self.data[start..start + self.cout]
                            .iter()
                            .map(|&w| (w as f64 * s) as f32),
                    );
                }
            }
        }
        Self::new(self.kh, self.kw, kept.len(), self.cout, data)
    }

    /// Keeps the listed output channels (filters), in order.
    pub fn select_outputs(&self, kept: &[usize]) -> Result<Self> {
        check_indices(kept, self.cout)?;
        let mut data = Vec::with_capacity(self.kh * self.kw * self.cin * kept.len());
        for chunk in self.data.chunks_exact(self.cout) {
            data.extend(kept.iter().map(|&o| chunk[o]));
        }
        Self::new(self.kh, self.kw, self.cin, kept.len(), data)
    }
}

/// Row-major `f32` weight matrix of a dense layer, `rows` outputs by `cols`
/// inputs ("oi" layout).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "dense matrix {rows}x{cols} with {} values",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Valid,
    /// Zero padding of `p` on every side.
    Zero(usize),
}

impl Padding {
    pub fn amount(self) -> usize {
        match self {
            Padding::Valid => 0,
            Padding::Zero(p) => p,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvParams {
    pub stride: usize,
    pub padding: Padding,
}

impl Default for ConvParams {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: Padding::Valid,
        }
    }
}

impl ConvParams {
    pub fn new(stride: usize, pad: usize) -> Self {
        Self {
            stride,
            padding: if pad == 0 {
                Padding::Valid
            } else {
                Padding::Zero(pad)
            },
        }
    }

    /// `floor((n + 2p - k) / stride) + 1`, or a shape error when the window
    /// does not fit.
    pub fn output_dim(&self, n: usize, k: usize) -> Result<usize> {
        window_output_dim(n, k, self.stride, self.padding.amount())
    }
}

pub(crate) fn window_output_dim(n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Shape("stride must be at least 1".into()));
    }
    let padded = n + 2 * pad;
    if k == 0 || padded < k {
        return Err(Error::Shape(format!(
            "window {k} does not fit input extent {n} with padding {pad}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Direct 2-D convolution.
pub fn conv2d(
    input: &Tensor3,
    kernel: &Tensor4,
    bias: Option<&[f32]>,
    params: ConvParams,
) -> Result<Tensor3> {
    if input.channels != kernel.cin {
        return Err(Error::Shape(format!(
            "input has {} channels but kernel expects {}",
            input.channels, kernel.cin
        )));
    }
    if let Some(b) = bias {
        if b.len() != kernel.cout {
            return Err(Error::Shape(format!(
                "bias has {} entries but kernel has {} output channels",
                b.len(),
                kernel.cout
            )));
        }
    }
    let ho = params.output_dim(input.height, kernel.kh)?;
    let wo = params.output_dim(input.width, kernel.kw)?;
    let cout = kernel.cout;
    let stride = params.stride;
    let pad = params.padding.amount() as isize;

    let mut out = vec![0f32; ho * wo * cout];
    out.par_chunks_mut(wo * cout)
        .enumerate()
        .for_each(|(oh, row)| {
            let mut acc = vec![0f64; cout];
            for ow in 0..wo {
                acc.iter_mut().for_each(|a| *a = 0.0);
                for kh in 0..kernel.kh {
                    let ih = (oh * stride + kh) as isize - pad;
                    if ih < 0 || ih >= input.height as isize {
                        continue;
                    }
                    for kw in 0..kernel.kw {
                        let iw = (ow * stride + kw) as isize - pad;
                        if iw < 0 || iw >= input.width as isize {
                            continue;
                        }
                        let base = input.index(ih as usize, iw as usize, 0);
                        let pixel = &input.data[base..base + input.channels];
                        for (ci, &x) in pixel.iter().enumerate() {
                            let x = x as f64;
                            let k0 = kernel.index(kh, kw, ci, 0);
                            let wrow = &kernel.data[k0..k0 + cout];
                            for (a, &w) in acc.iter_mut().zip(wrow) {
                                *a += x * w as f64;
                            }
                        }
                    }
                }
                let dst = &mut row[ow * cout..(ow + 1) * cout];
                match bias {
                    Some(b) => {
                        for ((d, a), &bb) in dst.iter_mut().zip(&acc).zip(b) {
                            *d = (a + bb as f64) as f32;
                        }
                    }
                    None => {
                        for (d, a) in dst.iter_mut().zip(&acc) {
                            *d = *a as f32;
                        }
                    }
                }
            }
        });
    Tensor3::new(ho, wo, cout, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Max,
    Avg,
}

/// Channelwise pooling. Padded positions never win a max and are excluded
/// from the average count.
pub fn pool2d(
    input: &Tensor3,
    kind: PoolKind,
    window: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor3> {
    if pad >= window && window > 0 {
        return Err(Error::Shape(format!(
            "pool padding {pad} must be smaller than window {window}"
        )));
    }
    let ho = window_output_dim(input.height, window, stride, pad)?;
    let wo = window_output_dim(input.width, window, stride, pad)?;
    let c = input.channels;
    let mut out = Vec::with_capacity(ho * wo * c);
    let mut acc = vec![0f64; c];
    for oh in 0..ho {
        for ow in 0..wo {
            let h0 = (oh * stride) as isize - pad as isize;
            let w0 = (ow * stride) as isize - pad as isize;
            let init = match kind {
                PoolKind::Max => f64::NEG_INFINITY,
                PoolKind::Avg => 0.0,
            };
            acc.iter_mut().for_each(|a| *a = init);
            let mut count = 0usize;
            for h in h0.max(0)..(h0 + window as isize).min(input.height as isize) {
                for w in w0.max(0)..(w0 + window as isize).min(input.width as isize) {
                    count += 1;
                    let base = input.index(h as usize, w as usize, 0);
                    for (a, &x) in acc.iter_mut().zip(&input.data[base..base + c]) {
                        match kind {
                            PoolKind::Max => *a = a.max(x as f64),
                            PoolKind::Avg => *a += x as f64,
                        }
                    }
                }
            }
            match kind {
                PoolKind::Max => out.extend(acc.iter().map(|&a| a as f32)),
                PoolKind::Avg => out.extend(acc.iter().map(|&a| (a / count as f64) as f32)),
            }
        }
    }
    Tensor3::new(ho, wo, c, out)
}

pub fn relu(input: &Tensor3) -> Tensor3 {
    input.map(|x| x.max(0.0))
}

pub fn add(a: &Tensor3, b: &Tensor3) -> Result<Tensor3> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "cannot add tensors of shape {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Tensor3::new(a.height, a.width, a.channels, data)
}

pub(crate) fn check_indices(indices: &[usize], bound: usize) -> Result<()> {
    let mut seen = HashSet::with_capacity(indices.len());
    for &i in indices {
        if i >= bound {
            return Err(Error::Index(format!(
                "channel index {i} out of range for {bound} channels"
            )));
        }
        if !seen.insert(i) {
            return Err(Error::Index(format!("duplicate channel index {i}")));
        }
    }
    Ok(())
}

/// Output channel `k` is input channel `indices[k]`.
pub fn channel_gather(input: &Tensor3, indices: &[usize]) -> Result<Tensor3> {
    check_indices(indices, input.channels)?;
    if indices.is_empty() {
        return Err(Error::Index(
            "channel gather needs at least one index".into(),
        ));
    }
    let mut data = Vec::with_capacity(input.height * input.width * indices.len());
    for pixel in input.data.chunks_exact(input.channels) {
        data.extend(indices.iter().map(|&c| pixel[c]));
    }
    Tensor3::new(input.height, input.width, indices.len(), data)
}

/// `y[.., c] = x[.., c] * scale[c] + shift[c]`.
pub fn channel_affine(input: &Tensor3, scale: &[f32], shift: &[f32]) -> Result<Tensor3> {
    if scale.len() != input.channels || shift.len() != input.channels {
        return Err(Error::Shape(format!(
            "affine has {}/{} entries for {} channels",
            scale.len(),
            shift.len(),
            input.channels
        )));
    }
    let mut data = input.data.clone();
    for pixel in data.chunks_exact_mut(input.channels) {
        for ((x, &s), &t) in pixel.iter_mut().zip(scale).zip(shift) {
            *x = *x * s + t;
        }
    }
    Tensor3::new(input.height, input.width, input.channels, data)
}

/// `y = W x + b` with `f64` accumulation.
pub fn dense(input: &[f32], weights: &DenseMatrix, bias: &[f32]) -> Result<Vec<f32>> {
    if input.len() != weights.cols || bias.len() != weights.rows {
        return Err(Error::Shape(format!(
            "dense {}x{} applied to {} inputs with {} biases",
            weights.rows,
            weights.cols,
            input.len(),
            bias.len()
        )));
    }
    Ok(weights
        .data
        .chunks_exact(weights.cols)
        .zip(bias)
        .map(|(row, &b)| {
            let dot: f64 = row
                .iter()
                .zip(input)
                .map(|(&w, &x)| w as f64 * x as f64)
                .sum();
            (dot + b as f64) as f32
        })
        .collect())
}
