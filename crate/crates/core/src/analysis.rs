//! Accuracy evaluation, per-layer sensitivity sweeps and before/after
//! reports.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::graph::{count_flops, Graph};
use crate::inference::forward;
use crate::prune::{keep_count, prune_layer};
use crate::sampling::SampleConfig;
use crate::tensor::Tensor3;

/// Whether `label` is among the `k` largest entries of `logits`; equal
/// values rank the lower index first.
pub fn in_top_k(logits: &[f32], label: usize, k: usize) -> bool {
    let Some(&target) = logits.get(label) else {
        return false;
    };
    let ahead = logits
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v > target || (v == target && i < label))
        .count();
    ahead < k
}

fn labels(data: &Dataset) -> Result<&[usize]> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    data.labels
        .as_deref()
        .ok_or_else(|| Error::Argument("evaluation needs a labeled dataset".into()))
}

fn all_logits(graph: &Graph, items: &[Tensor3]) -> Result<Vec<Vec<f32>>> {
    items
        .par_iter()
        .map(|x| Ok(forward(graph, x)?.into_flat()))
        .collect()
}

/// Top-k accuracy for each `k` in `ks`, from one pass over the data.
pub fn evaluate_many(graph: &Graph, data: &Dataset, ks: &[usize]) -> Result<Vec<f64>> {
    let labels = labels(data)?;
    if ks.contains(&0) {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    let logits = all_logits(graph, &data.items)?;
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = logits
                .iter()
                .zip(labels)
                .filter(|(l, &y)| in_top_k(l, y, k))
                .count();
            hits as f64 / labels.len() as f64
        })
        .collect())
}

/// Fraction of items whose label is among the `k` largest outputs.
pub fn evaluate_topk(graph: &Graph, data: &Dataset, k: usize) -> Result<f64> {
    Ok(evaluate_many(graph, data, &[k])?[0])
}

/// One `(fraction, repeat)` sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub target: String,
    pub fraction: f64,
    pub m: usize,
    pub repeat: usize,
    pub seed: u64,
    pub residual: f64,
    pub top1: f64,
    pub top5: f64,
    pub flops: u64,
}

/// Per-fraction means over repeats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepMean {
    pub fraction: f64,
    pub m: usize,
    pub residual: f64,
    pub top1: f64,
    pub top5: f64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub target: String,
    pub repeats: usize,
    pub seeds: Vec<u64>,
    pub rows: Vec<SweepRow>,
    pub means: Vec<SweepMean>,
}

impl SweepReport {
    /// `target,fraction,m,repeat,seed,residual,top1,top5,flops`, one line
    /// per row.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Channels pruned at `fraction` out of `channels`: the complement of
/// [`keep_count`] at `1 - fraction`.
pub fn pruned_count(channels: usize, fraction: f64) -> usize {
    if fraction == 0.0 {
        0
    } else {
        channels - keep_count(channels, 1.0 - fraction)
    }
}

/// Prunes only `target`, at each fraction and repeat, on fresh copies of
/// `graph`. Repeat `r` uses seed `config.seed + r`.
pub fn sensitivity_sweep(
    graph: &Graph,
    target: &str,
    fractions: &[f64],
    repeats: usize,
    calib: &[Tensor3],
    evalset: &Dataset,
    config: &SampleConfig,
) -> Result<SweepReport> {
    if repeats == 0 {
        return Err(Error::Argument("repeats must be at least 1".into()));
    }
    if fractions.is_empty() {
        return Err(Error::Argument("no fractions given".into()));
    }
    if fractions.iter().any(|f| !(0.0..1.0).contains(f)) {
        return Err(Error::Argument(format!(
            "fractions must lie in [0, 1): {fractions:?}"
        )));
    }
    if fractions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Argument(format!(
            "fractions must be strictly increasing: {fractions:?}"
        )));
    }
    if !graph.prunable_ids().iter().any(|id| id == target) {
        graph.locate(target)?;
        return Err(Error::Argument(format!("{target} is not prunable")));
    }
    let channels = graph
        .conv(graph.locate(target)?)
        .expect("prunable ids are convolutions")
        .cin();
    let baseline_flops = count_flops(graph, graph.input_shape)?.total;
    let baseline = evaluate_many(graph, evalset, &[1, 5])?;
    let seeds: Vec<u64> = (0..repeats as u64)
        .map(|r| config.seed.wrapping_add(r))
        .collect();

    let mut rows = Vec::new();
    let mut means = Vec::new();
    for &fraction in fractions {
        let m = pruned_count(channels, fraction);
        let mut point = Vec::new();
        for (repeat, &seed) in seeds.iter().enumerate() {
            let row = if m == 0 {
                SweepRow {
                    target: target.to_string(),
                    fraction,
                    m,
                    repeat,
                    seed,
                    residual: 0.0,
                    top1: baseline[0],
                    top5: baseline[1],
                    flops: baseline_flops,
                }
            } else {
                let cfg = SampleConfig { seed, ..*config };
                let out = prune_layer(graph, target, m, calib, &cfg)?;
                let acc = evaluate_many(&out.graph, evalset, &[1, 5])?;
                SweepRow {
                    target: target.to_string(),
                    fraction,
                    m: out.record.m,
                    repeat,
                    seed,
                    residual: out.record.residual,
                    top1: acc[0],
                    top5: acc[1],
                    flops: out.record.flops_after,
                }
            };
            log::info!(
                "{target} fraction {fraction} repeat {repeat}: residual {:.3e}, top1 {:.4}",
                row.residual,
                row.top1
            );
            point.push(row);
        }
        let n = point.len() as f64;
        means.push(SweepMean {
            fraction,
            m,
            residual: point.iter().map(|r| r.residual).sum::<f64>() / n,
            top1: point.iter().map(|r| r.top1).sum::<f64>() / n,
            top5: point.iter().map(|r| r.top5).sum::<f64>() / n,
            flops: point[0].flops,
        });
        rows.extend(point);
    }
    Ok(SweepReport {
        target: target.to_string(),
        repeats,
        seeds,
        rows,
        means,
    })
}

/// `before / after` as `x.xx×`.
pub fn format_ratio(before: u64, after: u64) -> String {
    format!("{:.2}×", before as f64 / after as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub name: String,
    pub top1: Option<f64>,
    pub top5: Option<f64>,
    pub flops: u64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub before: ModelSummary,
    pub after: ModelSummary,
    pub reduction_ratio: f64,
}

fn summarize(graph: &Graph, evalset: Option<&Dataset>) -> Result<ModelSummary> {
    let r = count_flops(graph, graph.input_shape)?;
    let (top1, top5) = match evalset {
        Some(d) => {
            let acc = evaluate_many(graph, d, &[1, 5])?;
            (Some(acc[0]), Some(acc[1]))
        }
        None => (None, None),
    };
    Ok(ModelSummary {
        name: graph.name.clone(),
        top1,
        top5,
        flops: r.total,
        params: r.params,
    })
}

/// Accuracy, FLOPs and parameter counts of two graphs side by side.
pub fn report(before: &Graph, after: &Graph, evalset: Option<&Dataset>) -> Result<Comparison> {
    let before = summarize(before, evalset)?;
    let after = summarize(after, evalset)?;
    Ok(Comparison {
        reduction_ratio: before.flops as f64 / after.flops as f64,
        before,
        after,
    })
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{:.2}%", 100.0 * x))
}

impl Comparison {
    pub fn ratio_text(&self) -> String {
        format_ratio(self.before.flops, self.after.flops)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<10} {:>10} {:>10} {:>10} {:>14}\n",
            "model", "top-1", "top-5", "FLOPs", "params"
        );
        for (label, m) in [("before", &self.before), ("after", &self.after)] {
            s.push_str(&format!(
                "{:<10} {:>10} {:>10} {:>10} {:>14}\n",
                label,
                pct(m.top1),
                pct(m.top5),
                format!("{:.2}B", m.flops as f64 / 1e9),
                m.params
            ));
        }
        s.push_str(&format!("FLOPs reduction: {}\n", self.ratio_text()));
        s
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        let mut s = String::from("model,top1,top5,flops,params\n");
        for (label, m) in [("before", &self.before), ("after", &self.after)] {
            s.push_str(&format!(
                "{label},{},{},{},{}\n",
                opt(m.top1),
                opt(m.top5),
                m.flops,
                m.params
            ));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("comparison serializes") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::teacher_labels;
    use crate::fixtures;

    #[test]
    fn top_k_ties_and_bounds() {
        assert!(in_top_k(&[1.0, 3.0, 2.0], 1, 1));
        assert!(!in_top_k(&[1.0, 3.0, 2.0], 2, 1));
        assert!(in_top_k(&[1.0, 3.0, 2.0], 2, 2));
        // Equal logits: the lower index ranks first.
        assert!(in_top_k(&[2.0, 2.0], 0, 1));
        assert!(!in_top_k(&[2.0, 2.0], 1, 1));
        assert!(in_top_k(&[0.0, 0.0, 0.0], 2, 3));
    }

    #[test]
    fn single_item_and_all_classes() {
        let g = fixtures::tiny_cnn(1);
        let x = fixtures::random_input(g.input_shape, 0);
        let y = teacher_labels(&g, std::slice::from_ref(&x)).unwrap();
        let d = Dataset::labeled(vec![x.clone()], y.clone()).unwrap();
        assert_eq!(evaluate_topk(&g, &d, 1).unwrap(), 1.0);
        let wrong = Dataset::labeled(vec![x], vec![(y[0] + 1) % 5]).unwrap();
        assert_eq!(evaluate_topk(&g, &wrong, 1).unwrap(), 0.0);
        assert_eq!(evaluate_topk(&g, &wrong, 5).unwrap(), 1.0);
        assert!(matches!(
            evaluate_topk(&g, &Dataset::labeled(vec![], vec![]).unwrap(), 1),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn ratio_format() {
        assert_eq!(format_ratio(15_470_000_000, 3_610_000_000), "4.29×");
        assert_eq!(format_ratio(7, 7), "1.00×");
        let g = fixtures::tiny_cnn(0);
        let c = report(&g, &g, None).unwrap();
        assert_eq!(c.ratio_text(), "1.00×");
        assert!(c.to_text().contains("1.00×"));
    }

    #[test]
    fn pruned_count_rounding() {
        assert_eq!(pruned_count(8, 0.0), 0);
        assert_eq!(pruned_count(8, 0.25), 2);
        assert_eq!(pruned_count(8, 0.9), 7);
        assert_eq!(pruned_count(4, 0.99), 3);
    }

    #[test]
    fn sweep_fraction_zero_is_baseline() {
        let g = fixtures::tiny_cnn(2);
        let items = fixtures::random_inputs(g.input_shape, 12, 40);
        let labels = teacher_labels(&g, &items).unwrap();
        let eval = Dataset::labeled(items, labels).unwrap();
        let calib = fixtures::random_inputs(g.input_shape, 6, 1);
        let r = sensitivity_sweep(
            &g,
            "conv2",
            &[0.0],
            2,
            &calib,
            &eval,
            &SampleConfig::default(),
        )
        .unwrap();
        assert_eq!(r.rows.len(), 2);
        assert!(r
            .rows
            .iter()
            .all(|row| row.top1 == 1.0 && row.residual == 0.0));
        assert_eq!(
            r.to_csv().lines().next().unwrap(),
            "target,fraction,m,repeat,seed,residual,top1,top5,flops"
        );
        assert!(sensitivity_sweep(
            &g,
            "conv2",
            &[0.5, 0.25],
            1,
            &calib,
            &eval,
            &SampleConfig::default()
        )
        .is_err());
        assert!(sensitivity_sweep(
            &g,
            "conv1",
            &[0.5],
            1,
            &calib,
            &eval,
            &SampleConfig::default()
        )
        .is_err());
    }
}
