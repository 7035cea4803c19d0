mod common;

use chanprune::archs::{resnet50, vgg16, WeightInit};
use chanprune::fixtures::{random_input, random_inputs};
use chanprune::graph::{count_flops, load_model, save_model, validate_graph, Node, Shortcut};
use chanprune::inference::forward;
use chanprune::prune::{prune_resnet_backward, Direction, PlanEntry, PrunePlan};
use chanprune::sampling::SampleConfig;

#[test]
fn vgg16_full_size_round_trip_and_forward() {
    let g = vgg16(WeightInit::Random { seed: 1 });
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vgg16.json");
    save_model(&g, &path).unwrap();
    assert_eq!(
        std::fs::metadata(path.with_extension("bin")).unwrap().len(),
        4 * 138_357_544
    );
    let back = load_model(&path).unwrap();
    assert!(back == g);
    drop(back);
    let y = forward(&g, &random_input([224, 224, 3], 0))
        .unwrap()
        .into_flat();
    assert_eq!(y.len(), 1000);
    assert!(y.iter().all(|v| v.is_finite()));
}

#[test]
fn narrow_resnet50_backward_at_full_resolution() {
    let g = resnet50(WeightInit::Random { seed: 2 }, 16);
    let calib = random_inputs([224, 224, 3], 2, 5);
    let plan = PrunePlan {
        direction: Direction::BackwardResnet,
        targets: vec![
            PlanEntry::keep("res2b", 0.5),
            PlanEntry::keep("res3a", 0.5),
            PlanEntry::keep("res4c", 0.75),
            PlanEntry::keep("res5c/conv2", 0.5),
        ],
    };
    let config = SampleConfig {
        n_samples: Some(400),
        ..SampleConfig::with_seed(3)
    };
    let run = prune_resnet_backward(&g, &plan, &calib, &config).unwrap();
    assert!(validate_graph(&run.graph).is_empty());
    assert_eq!(run.log.len(), g.prunable_ids().len());
    let flops = count_flops(&run.graph, [224, 224, 3]).unwrap().total;
    assert!(flops < count_flops(&g, [224, 224, 3]).unwrap().total);
    assert_eq!(flops, common::predicted_flops(&g, &run.log));
    let samples = run
        .graph
        .nodes
        .iter()
        .filter(|n| matches!(n, Node::Unit(u) if matches!(u.shortcut, Shortcut::Identity { sample: Some(_) })))
        .count();
    assert!(samples >= 1);
    let y = forward(&run.graph, &calib[0]).unwrap().into_flat();
    assert_eq!(y.len(), 1000);
    assert!(y.iter().all(|v| v.is_finite()));
}
