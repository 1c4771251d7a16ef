//! Gradient flow through the shared circle pathways.

use std::collections::BTreeMap;

use circlenet::boxes::{BBox, GroundTruth};
use circlenet::config::RunConfig;
use circlenet::detector::{roi_levels, Batch, Detector, TrainPlan};
use circlenet::heads::roi_level_assign;
use circlenet::init::rng;
use circlenet::tensor::{Gradients, Tape, Tensor, Var};
use rand::Rng;

const MODEL: &str = "\
backbone.levels=3
backbone.channels=4,8,8
backbone.stem_channels=4
backbone.blocks=1
circle.circles=2
circle.channels=8
head.pool_size=3
head.fc_hidden=8
anchor.base_size=4
anchor.ratios=0.5
roi.level_k0=2
roi.level_canonical=16
rpn.batch=48
rpn.pre_nms_top=150
rpn.post_nms_top=24
roi.batch=24
decomp.strategy=easy_to_hard
";

struct Fixture {
    det: Detector<f64>,
    images: Tensor<f64>,
    gts: Vec<Vec<GroundTruth>>,
}

fn fixture(strategy: &str) -> Fixture {
    let mut cfg = RunConfig::parse(MODEL).unwrap();
    cfg.set("decomp.strategy", strategy).unwrap();
    let det = Detector::<f64>::new(cfg.detector, 3).unwrap();
    let mut r = rng(8);
    let images = Tensor::from_fn([2, 3, 32, 32], |_| r.random_range(-1.0..1.0));
    let gts = vec![
        vec![
            GroundTruth { bbox: BBox::new(2.0, 3.0, 11.0, 25.0), visibility: 0.95 },
            GroundTruth { bbox: BBox::new(16.0, 6.0, 24.0, 26.0), visibility: 0.7 },
        ],
        vec![
            GroundTruth { bbox: BBox::new(5.0, 1.0, 17.0, 30.0), visibility: 0.85 },
            GroundTruth { bbox: BBox::new(20.0, 12.0, 26.0, 27.0), visibility: 0.5 },
        ],
    ];
    Fixture { det, images, gts }
}

fn frozen_plan(f: &Fixture) -> TrainPlan {
    let mut tape = Tape::new();
    let pv = tape.bind(&f.det.params);
    let batch = Batch { images: f.images.clone(), gts: &f.gts };
    let mut plan = None;
    f.det.loss(&mut tape, &pv, &batch, &mut plan, &mut rng(1)).unwrap();
    plan.unwrap()
}

/// Gradients of the loss terms selected by `keep(circle)`.
fn masked_gradients(f: &Fixture, plan: &TrainPlan, keep: impl Fn(usize) -> bool) -> Gradients<f64> {
    let mut tape = Tape::new();
    let pv = tape.bind(&f.det.params);
    let x = tape.constant(f.images.clone());
    let feats = f.det.forward_features(&mut tape, &pv, x).unwrap();
    let mut plan = plan.clone();
    let (_, named) = f.det.assemble_loss(&mut tape, &pv, &feats, &mut plan).unwrap();
    let terms: Vec<Var> = named.iter().filter(|((c, _), _)| keep(*c)).map(|(_, v)| *v).collect();
    let total = tape.add_all(&terms).unwrap();
    tape.backward(total).unwrap().params()
}

fn norm(g: &Tensor<f64>) -> f64 {
    g.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[test]
fn total_gradient_is_the_sum_of_per_circle_gradients() {
    let f = fixture("easy_to_hard");
    let plan = frozen_plan(&f);
    let total = masked_gradients(&f, &plan, |_| true);
    let c1 = masked_gradients(&f, &plan, |c| c == 1);
    let c2 = masked_gradients(&f, &plan, |c| c == 2);
    for (name, g) in &total {
        for ((t, a), b) in g.data().iter().zip(c1[name].data()).zip(c2[name].data()) {
            assert!((t - (a + b)).abs() <= 1e-10 * (1.0 + t.abs()), "{name}: {t} != {a} + {b}");
        }
    }
    for (name, g) in &total {
        let shared = name.starts_with("circle.td.") || name.starts_with("circle.bu.");
        if shared {
            assert!(norm(&c1[name]) > 0.0, "{name} receives nothing from circle 1");
            assert!(norm(&c2[name]) > 0.0, "{name} receives nothing from circle 2");
            assert!(norm(g) > 0.0, "{name} has zero gradient");
        }
    }
}

#[test]
fn every_parameter_is_reached() {
    for strategy in ["none", "by_loss", "all_to_hard", "easy_to_hard"] {
        let f = fixture(strategy);
        let plan = frozen_plan(&f);
        let total = masked_gradients(&f, &plan, |_| true);
        let dead: Vec<&String> = total.iter().filter(|(n, g)| !n.ends_with(".b") && norm(g) == 0.0).map(|(n, _)| n).collect();
        assert!(dead.is_empty(), "{strategy}: no gradient for {dead:?}");
    }
}

#[test]
fn by_loss_weights_only_touch_deeper_circles() {
    let f = fixture("by_loss");
    let mut plan = frozen_plan(&f);
    {
        let mut tape = Tape::new();
        let pv = tape.bind(&f.det.params);
        let x = tape.constant(f.images.clone());
        let feats = f.det.forward_features(&mut tape, &pv, x).unwrap();
        f.det.assemble_loss(&mut tape, &pv, &feats, &mut plan).unwrap();
    }
    let weighted: BTreeMap<usize, bool> = plan
        .circles
        .iter()
        .map(|cp| (cp.circle, cp.rois.iter().any(|r| r.weights.is_some())))
        .collect();
    assert_eq!(weighted.get(&1), Some(&false));
    assert_eq!(weighted.get(&2), Some(&true));
    for cp in plan.circles.iter().filter(|c| c.circle == 2) {
        for r in &cp.rois {
            for w in r.weights.iter().flatten() {
                assert!((0.7..=1.0).contains(w), "weight {w}");
            }
        }
    }
}

#[test]
fn rois_are_pooled_at_their_assigned_level() {
    let f = fixture("easy_to_hard");
    let plan = frozen_plan(&f);
    let audit = roi_levels(&plan);
    assert!(!audit.is_empty());
    let mut seen = std::collections::BTreeSet::new();
    for (_, b, level) in audit {
        assert_eq!(level, roi_level_assign(&b, &f.det.config.level_rule).unwrap(), "{b:?}");
        seen.insert(level);
    }
    assert!(seen.len() >= 2, "only levels {seen:?} exercised");
}

#[test]
fn deeper_circle_trains_on_more_instances() {
    let f = fixture("easy_to_hard");
    let plan = frozen_plan(&f);
    for d in &plan.decompositions {
        let c1 = d.circle_bucket(1).unwrap();
        let c2 = d.circle_bucket(2).unwrap();
        assert!(c1.is_subset(c2));
    }
    let hard_image = &plan.decompositions[1];
    assert_eq!(hard_image.circle_bucket(1).unwrap().len(), 1);
    assert_eq!(hard_image.circle_bucket(2).unwrap().len(), 2);
}
