mod common;

use chanprune::archs::{vgg16_scaled, WeightInit};
use chanprune::fixtures::{random_inputs, tiny_cnn};
use chanprune::graph::{count_flops, validate_graph, Graph};
use chanprune::inference::forward;
use chanprune::prune::{prune_pipeline, Direction, PlanEntry, PrunePlan};
use chanprune::sampling::SampleConfig;
use chanprune::Error;

fn kernel(g: &Graph, id: &str) -> [usize; 4] {
    g.conv(g.locate(id).unwrap()).unwrap().kernel.shape()
}

#[test]
fn successive_layers_on_scaled_vgg() {
    let g = vgg16_scaled(WeightInit::Random { seed: 3 }, 8, 32);
    let calib = random_inputs([32, 32, 3], 24, 10);
    // Listed out of order on purpose; the run goes front to back.
    let plan = PrunePlan {
        direction: Direction::ForwardPipeline,
        targets: vec![
            PlanEntry::keep("conv5_1", 0.5),
            PlanEntry::keep("conv4_2", 0.5),
            PlanEntry::prune("conv3_2", 8),
            PlanEntry::prune("conv3_3", 8),
        ],
    };
    let run = prune_pipeline(&g, &plan, &calib, &SampleConfig::with_seed(1)).unwrap();
    let ids: Vec<&str> = run.log.iter().map(|r| r.id.as_str()).collect();
    assert_eq!(ids, ["conv3_2", "conv3_3", "conv4_2", "conv5_1"]);
    assert!(validate_graph(&run.graph).is_empty());

    assert_eq!(kernel(&run.graph, "conv3_1"), [3, 3, 16, 24]);
    assert_eq!(kernel(&run.graph, "conv3_2"), [3, 3, 24, 24]);
    assert_eq!(kernel(&run.graph, "conv3_3"), [3, 3, 24, 32]);
    assert_eq!(kernel(&run.graph, "conv4_1"), [3, 3, 32, 32]);
    assert_eq!(kernel(&run.graph, "conv4_2"), [3, 3, 32, 64]);
    assert_eq!(kernel(&run.graph, "conv4_3"), [3, 3, 64, 32]);
    assert_eq!(kernel(&run.graph, "conv5_1"), [3, 3, 32, 64]);

    // Spatial sides are 32, 16, 8, 4, 2 across the five groups; each entry
    // is the drop in cin * cout of one layer.
    let before = count_flops(&g, [32, 32, 3]).unwrap().total;
    let group3 = 16 * 8 + (32 * 32 - 24 * 24) + 8 * 32;
    let group4 = 32 * 32 + 32 * 64 + 32 * 64;
    let saved = 8 * 8 * 9 * group3 + 4 * 4 * 9 * group4 + 2 * 2 * 9 * 32 * 64;
    let after = count_flops(&run.graph, [32, 32, 3]).unwrap().total;
    assert_eq!(after, before - saved);
    assert_eq!(after, common::predicted_flops(&g, &run.log));
    assert_eq!(run.log.last().unwrap().flops_after, after);
    for w in run.log.windows(2) {
        assert_eq!(w[0].flops_after, w[1].flops_before);
    }

    for x in random_inputs([32, 32, 3], 2, 99) {
        let y = forward(&run.graph, &x).unwrap().into_flat();
        assert_eq!(y.len(), 1000);
        assert!(y.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn wrong_plan_kinds_are_rejected() {
    let g = tiny_cnn(0);
    let calib = random_inputs([8, 8, 3], 16, 0);
    let plan = PrunePlan {
        direction: Direction::BackwardResnet,
        targets: vec![PlanEntry::prune("conv2", 1)],
    };
    let err = prune_pipeline(&g, &plan, &calib, &SampleConfig::default()).unwrap_err();
    assert!(matches!(err.source, Error::WrongVariant(_)));
    assert!(err.log.is_empty());

    let plan = PrunePlan {
        direction: Direction::ForwardPipeline,
        targets: vec![PlanEntry::prune("nope", 1)],
    };
    let err = prune_pipeline(&g, &plan, &calib, &SampleConfig::default()).unwrap_err();
    assert!(matches!(err.source, Error::UnknownLayer(_)));
}
