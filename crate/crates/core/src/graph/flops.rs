use serde::Serialize;

use super::validate::infer_layers;
use super::Graph;
use crate::error::{Error, Result};

/// Cost of one layer. `flops` counts multiply-accumulates of convolution and
/// dense layers; everything elementwise is reported under `minor_ops`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerFlops {
    pub id: String,
    pub kind: String,
    pub output_shape: Vec<usize>,
    pub flops: u64,
    pub minor_ops: u64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopReport {
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerFlops>,
    pub total: u64,
    pub minor_total: u64,
    pub params: u64,
}

impl FlopReport {
    /// Total in units of 1e9 with two decimals, e.g. `15.47B`.
    pub fn total_billions(&self) -> String {
        format!("{:.2}B", self.total as f64 / 1e9)
    }
}

/// One multiply-accumulate counts as one FLOP.
pub fn count_flops(graph: &Graph, input_shape: [usize; 3]) -> Result<FlopReport> {
    let layers = infer_layers(graph, input_shape).map_err(Error::Validation)?;
    let layers: Vec<LayerFlops> = layers
        .into_iter()
        .map(|l| LayerFlops {
            id: l.id,
            kind: l.kind.to_string(),
            output_shape: l.output.dims(),
            flops: l.macs,
            minor_ops: l.minor,
            params: l.params,
        })
        .collect();
    Ok(FlopReport {
        input_shape,
        total: layers.iter().map(|l| l.flops).sum(),
        minor_total: layers.iter().map(|l| l.minor_ops).sum(),
        params: layers.iter().map(|l| l.params).sum(),
        layers,
    })
}

pub fn count_params(graph: &Graph) -> Result<u64> {
    Ok(count_flops(graph, graph.input_shape)?.params)
}
