//! Channel pruning: select representative input channels from sampled
//! contributions, fit per-channel scales, and rewrite the graph.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    count_flops, rewrite_conv_pair, shortcut_required_channels, Graph, LayerRef, UnitPart,
};
use crate::linalg::{find_representative_rows, least_squares_row, row_residual, Matrix};
use crate::sampling::{collect_contributions, collect_joint_contributions, SampleConfig};
use crate::tensor::{Tensor3, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ForwardPipeline,
    BackwardResnet,
}

/// One plan target: a convolution id, or a unit name meaning every
/// prunable convolution of that unit. Exactly one of `m` and
/// `keep_fraction` must be set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keep_fraction: Option<f64>,
}

impl PlanEntry {
    pub fn prune(target: impl Into<String>, m: usize) -> Self {
        Self {
            target: target.into(),
            m: Some(m),
            keep_fraction: None,
        }
    }

    pub fn keep(target: impl Into<String>, fraction: f64) -> Self {
        Self {
            target: target.into(),
            m: None,
            keep_fraction: Some(fraction),
        }
    }

    /// Number of channels to prune out of `channels`.
    pub fn resolve(&self, channels: usize) -> Result<usize> {
        match (self.m, self.keep_fraction) {
            (Some(m), None) => Ok(m),
            (None, Some(f)) => {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(Error::Argument(format!(
                        "{}: keep_fraction {f} outside (0, 1]",
                        self.target
                    )));
                }
                Ok(channels - keep_count(channels, f))
            }
            _ => Err(Error::Argument(format!(
                "{}: set exactly one of m and keep_fraction",
                self.target
            ))),
        }
    }
}

/// Channels kept out of `channels` at `fraction`: nearest integer, at least 1.
pub fn keep_count(channels: usize, fraction: f64) -> usize {
    ((channels as f64 * fraction).round() as usize).clamp(1, channels.max(1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunePlan {
    pub direction: Direction,
    #[serde(default)]
    pub targets: Vec<PlanEntry>,
}

/// Log record of one pruned layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneRecord {
    pub id: String,
    #[serde(rename = "C")]
    pub c: usize,
    /// Channels actually removed; below `m_requested` when the shortcut
    /// forced extra channels to stay.
    pub m: usize,
    pub m_requested: usize,
    pub kept: Vec<usize>,
    pub scales: Vec<f64>,
    /// Channels chosen by the selection itself, in pivot order.
    pub selected: Vec<usize>,
    /// `||B - s A_kept|| / ||B||` on the sampled columns.
    pub residual: f64,
    /// The same with all scales 1, i.e. just dropping the pruned channels.
    pub zero_out_residual: f64,
    pub flops_before: u64,
    pub flops_after: u64,
    pub seed: u64,
    pub n_samples: usize,
}

#[derive(Debug, Clone)]
pub struct PruneOutcome {
    pub graph: Graph,
    pub record: PruneRecord,
}

#[derive(Debug, Clone)]
pub struct PruneRun {
    pub graph: Graph,
    pub log: Vec<PruneRecord>,
}

/// A multi-layer run that stopped; `log` holds the completed steps.
#[derive(Debug, thiserror::Error)]
#[error("pruning stopped after {} completed step(s): {source}", .log.len())]
pub struct PruneAbort {
    pub log: Vec<PruneRecord>,
    #[source]
    pub source: Error,
}

impl PruneRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("records serialize")
    }
}

/// Writes records as JSON lines.
pub fn log_to_jsonl(log: &[PruneRecord]) -> String {
    log.iter().map(|r| r.to_json_line() + "\n").collect()
}

/// Keeps input slices `kept` of `kernel`, slice `k` multiplied by `scales[k]`.
pub fn fold_scales(kernel: &Tensor4, kept: &[usize], scales: &[f64]) -> Result<Tensor4> {
    if kept.len() != scales.len() {
        return Err(Error::Argument(format!(
            "{} kept channels but {} scales",
            kept.len(),
            scales.len()
        )));
    }
    kernel.select_inputs(kept, scales)
}

fn relative(residual: f64, b: &Matrix) -> f64 {
    let nb = b.frobenius_norm();
    if nb == 0.0 {
        if residual == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        residual / nb
    }
}

/// Prunes `m` input channels of convolution `layer_id`.
///
/// conv1 of a unit with a projection shortcut is sampled jointly with the
/// projection and both lose the same input channels. conv1 of a unit with
/// an identity shortcut keeps the union of its selection and the channels
/// the shortcut still forwards; scales are fitted on that union.
pub fn prune_layer(
    graph: &Graph,
    layer_id: &str,
    m: usize,
    calib: &[Tensor3],
    config: &SampleConfig,
) -> Result<PruneOutcome> {
    let at = graph.locate(layer_id)?;
    if matches!(at, LayerRef::InUnit(_, UnitPart::Shortcut)) {
        return Err(Error::Argument(format!(
            "{layer_id}: projection shortcuts are pruned through their unit's conv1"
        )));
    }
    let channels = graph
        .conv(at)
        .ok_or_else(|| Error::Argument(format!("{layer_id} is not a convolution")))?
        .cin();
    if m >= channels {
        return Err(Error::Argument(format!(
            "{layer_id}: cannot prune {m} of {channels} channels"
        )));
    }
    let flops_before = count_flops(graph, graph.input_shape)?.total;
    if m == 0 {
        return Ok(PruneOutcome {
            graph: graph.clone(),
            record: PruneRecord {
                id: layer_id.to_string(),
                c: channels,
                m: 0,
                m_requested: 0,
                kept: (0..channels).collect(),
                scales: vec![1.0; channels],
                selected: (0..channels).collect(),
                residual: 0.0,
                zero_out_residual: 0.0,
                flops_before,
                flops_after: flops_before,
                seed: config.seed,
                n_samples: 0,
            },
        });
    }

    let unit = match at {
        LayerRef::InUnit(i, UnitPart::Conv1) => graph.unit(i),
        _ => None,
    };
    let sample = match unit {
        Some(u) if u.has_projection() => {
            collect_joint_contributions(graph, &u.name, calib, config)?
        }
        _ => collect_contributions(graph, layer_id, calib, config)?,
    };
    let selected = find_representative_rows(&sample.a, channels - m)?;
    let mut kept: BTreeSet<usize> = selected.iter().copied().collect();
    if let Some(required) = unit.and_then(shortcut_required_channels) {
        kept.extend(required);
    }
    let kept: Vec<usize> = kept.into_iter().collect();

    let a_kept = sample.a.select_rows(&kept)?;
    let scales = least_squares_row(&sample.b, &a_kept)?;
    let residual = relative(row_residual(&sample.b, &a_kept, &scales)?, &sample.b);
    let ones = vec![1.0; kept.len()];
    let zero_out_residual = relative(row_residual(&sample.b, &a_kept, &ones)?, &sample.b);

    let new_graph = rewrite_conv_pair(graph, layer_id, &kept, &scales)?;
    let flops_after = count_flops(&new_graph, new_graph.input_shape)?.total;
    log::info!(
        "{layer_id}: kept {}/{channels}, residual {residual:.3e}, FLOPs {flops_before} -> {flops_after}",
        kept.len()
    );
    Ok(PruneOutcome {
        graph: new_graph,
        record: PruneRecord {
            id: layer_id.to_string(),
            c: channels,
            m: channels - kept.len(),
            m_requested: m,
            kept,
            scales,
            selected,
            residual,
            zero_out_residual,
            flops_before,
            flops_after,
            seed: config.seed,
            n_samples: sample.samples(),
        },
    })
}

/// Expands plan targets into `(conv id, entry)` pairs; unit names cover
/// all prunable convolutions of the unit.
fn expand_targets<'a>(graph: &Graph, plan: &'a PrunePlan) -> Result<Vec<(String, &'a PlanEntry)>> {
    let prunable = graph.prunable_ids();
    let mut out: Vec<(String, &PlanEntry)> = Vec::new();
    for entry in &plan.targets {
        let ids: Vec<String> = if prunable.contains(&entry.target) {
            vec![entry.target.clone()]
        } else {
            let prefix = format!("{}/", entry.target);
            let ids: Vec<String> = prunable
                .iter()
                .filter(|id| id.starts_with(&prefix))
                .cloned()
                .collect();
            if ids.is_empty() {
                graph.locate(&entry.target)?;
                return Err(Error::Argument(format!("{} is not prunable", entry.target)));
            }
            ids
        };
        for id in ids {
            // A layer-specific entry beats a unit-wide one.
            match out.iter_mut().find(|(i, _)| *i == id) {
                Some(slot) if entry.target == id => slot.1 = entry,
                Some(slot) if slot.1.target != id => {
                    return Err(Error::Argument(format!("{id} is targeted twice")))
                }
                Some(_) => {}
                None => out.push((id, entry)),
            }
        }
    }
    Ok(out)
}

fn conv_cin(graph: &Graph, id: &str) -> Result<usize> {
    let at = graph.locate(id)?;
    Ok(graph
        .conv(at)
        .ok_or_else(|| Error::Argument(format!("{id} is not a convolution")))?
        .cin())
}

fn run_steps(
    graph: &Graph,
    steps: Vec<(String, Option<&PlanEntry>)>,
    calib: &[Tensor3],
    config: &SampleConfig,
) -> Result<PruneRun, PruneAbort> {
    let mut g = graph.clone();
    let mut log = Vec::new();
    for (id, entry) in steps {
        let result = conv_cin(&g, &id)
            .and_then(|c| entry.map_or(Ok(0), |e| e.resolve(c)))
            .and_then(|m| prune_layer(&g, &id, m, calib, config));
        match result {
            Ok(outcome) => {
                g = outcome.graph;
                log.push(outcome.record);
            }
            Err(source) => return Err(PruneAbort { log, source }),
        }
    }
    Ok(PruneRun { graph: g, log })
}

/// Prunes each target front to back; every step samples the graph as
/// rewritten by the previous steps.
pub fn prune_pipeline(
    graph: &Graph,
    plan: &PrunePlan,
    calib: &[Tensor3],
    config: &SampleConfig,
) -> Result<PruneRun, PruneAbort> {
    let abort = |source| PruneAbort {
        log: Vec::new(),
        source,
    };
    if plan.direction != Direction::ForwardPipeline {
        return Err(abort(Error::WrongVariant(
            "prune_pipeline needs a forward_pipeline plan".into(),
        )));
    }
    if graph.has_units() {
        return Err(abort(Error::WrongVariant(
            "graph contains bottleneck units; use a backward_resnet plan".into(),
        )));
    }
    let mut targets = expand_targets(graph, plan).map_err(abort)?;
    targets.sort_by_key(|(id, _)| graph.position(id).expect("expanded ids exist"));
    let steps = targets.into_iter().map(|(id, e)| (id, Some(e))).collect();
    run_steps(graph, steps, calib, config)
}

/// Prunes every prunable convolution from the last unit back to the first
/// (conv3, conv2, conv1 within a unit). Convolutions without a plan entry
/// are visited with `m = 0`. The kept set of an identity unit's conv1 always
/// contains the channels its shortcut forwards, which are exactly those
/// the downstream unit kept.
pub fn prune_resnet_backward(
    graph: &Graph,
    plan: &PrunePlan,
    calib: &[Tensor3],
    config: &SampleConfig,
) -> Result<PruneRun, PruneAbort> {
    let abort = |source| PruneAbort {
        log: Vec::new(),
        source,
    };
    if plan.direction != Direction::BackwardResnet {
        return Err(abort(Error::WrongVariant(
            "prune_resnet_backward needs a backward_resnet plan".into(),
        )));
    }
    if !graph.has_units() {
        return Err(abort(Error::WrongVariant(
            "graph has no bottleneck units; use a forward_pipeline plan".into(),
        )));
    }
    let targets = expand_targets(graph, plan).map_err(abort)?;
    let mut ids = graph.prunable_ids();
    ids.sort_by_key(|id| std::cmp::Reverse(graph.position(id).expect("prunable ids exist")));
    let steps = ids
        .into_iter()
        .map(|id| {
            let entry = targets.iter().find(|(t, _)| *t == id).map(|(_, e)| *e);
            (id, entry)
        })
        .collect();
    run_steps(graph, steps, calib, config)
}
