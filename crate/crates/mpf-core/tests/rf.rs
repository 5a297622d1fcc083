//! Receptive-field analysis: interval propagation against an impulse oracle,
//! growth across unrolled steps, containment of measured support, and the
//! graph export format.

mod common;

use common::rand_tensor;
use mpf_core::analyzer::{
    center_unit, empirical_rf, export_graph, rf_csv_theoretical, theoretical_rf,
    theoretical_rf_node,
};
use mpf_core::arch::ArchitectureSpec;
use mpf_core::graph::{forward, Op};
use mpf_core::model::{BuildOptions, UnrolledModel};
use mpf_core::params::ParameterStore;
use mpf_core::tensor::{Precision, Shape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn build_positive(text: &str, size: (usize, usize), seed: u64) -> UnrolledModel {
    let arch = ArchitectureSpec::parse(text).unwrap();
    let (mut model, _) =
        UnrolledModel::build(&arch, BuildOptions::new(size, Precision::Double)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model.init_params(&mut rng);
    // Make every weight strictly positive so no unit is dead and gradient
    // support fills the whole dependency cone.
    let ids: Vec<_> = model.params.iter().map(|(id, _)| id).collect();
    for id in ids {
        let p = model.params.value(id).clone();
        let positive: Vec<f64> = p.data().iter().map(|v| v.abs() + 0.01).collect();
        model
            .params
            .set_value(id, Tensor::from_vec(p.shape(), p.precision(), positive).unwrap())
            .unwrap();
    }
    model
}

/// Forward-impulse oracle: with all-positive weights, perturbing one input
/// pixel changes exactly the outputs inside that pixel's influence cone;
/// equivalently a unit's RF is the set of pixels whose impulse reaches it.
fn impulse_rf(
    model: &UnrolledModel,
    layer: usize,
    step: usize,
    unit: (usize, usize),
) -> Option<(usize, usize, usize, usize)> {
    let node = model.layer_node(layer, step).unwrap();
    let in_shape = model.graph.shape(model.input);
    let base_image = Tensor::full(in_shape, Precision::Double, 0.5);
    let base = forward(&model.graph, &[("image", &base_image)], &model.params).unwrap();
    let base_v = base.value(node).at(0, 0, unit.0, unit.1);

    let mut rect: Option<(usize, usize, usize, usize)> = None;
    for h in 0..in_shape.height {
        for w in 0..in_shape.width {
            let mut img = base_image.clone();
            for c in 0..in_shape.channels {
                let idx = in_shape.index(0, c, h, w);
                img.data_mut()[idx] += 0.25;
            }
            let tape = forward(&model.graph, &[("image", &img)], &model.params).unwrap();
            let v = tape.value(node).at(0, 0, unit.0, unit.1);
            if (v - base_v).abs() > 1e-9 {
                rect = Some(match rect {
                    None => (h, h, w, w),
                    Some((r0, r1, c0, c1)) => (r0.min(h), r1.max(h), c0.min(w), c1.max(w)),
                });
            }
        }
    }
    rect
}

const CHAIN: &str = "\
classes = 2
in_channels = 1
conv out=2 k=3 p=1
relu
conv out=2 k=3 p=1
relu
pool k=2 s=2
conv out=3 k=3 p=1
relu
";

#[test]
fn interval_propagation_matches_impulse_oracle() {
    let model = build_positive(CHAIN, (12, 12), 41);
    for (layer, step) in [(1, 1), (3, 1), (5, 1), (6, 1)] {
        let unit = center_unit(&model, layer, step).unwrap();
        let theoretical = theoretical_rf(&model, layer, step, unit).unwrap();
        let measured = impulse_rf(&model, layer, step, unit).unwrap();
        assert_eq!(
            (theoretical.row0, theoretical.row1, theoretical.col0, theoretical.col1),
            measured,
            "impulse oracle disagrees at layer {layer}"
        );
    }
}

const UNROLLED: &str = "\
classes = 2
in_channels = 1
steps = 3
lambda = 0.3,0.3,1.0
recurrent = 3,5
conv out=3 k=3 s=1 p=1
relu
conv out=4 k=3 s=2 p=1
relu
conv out=4 k=3 s=1 p=1
relu
conv out=4 k=3 s=1 p=1
relu
";

#[test]
fn composition_law_along_the_chain() {
    // Two stacked 3x3 stride-1 convs: 5x5. Adding a stride-2 conv then a
    // 3x3: rf 5 -> 9 with jump 2, checked at interior units.
    let model = build_positive(UNROLLED, (32, 32), 43);
    let rf1 = theoretical_rf(&model, 1, 1, (16, 16)).unwrap();
    assert_eq!((rf1.height(), rf1.width()), (3, 3));
    let rf3 = theoretical_rf(&model, 3, 1, (8, 8)).unwrap();
    assert_eq!((rf3.height(), rf3.width()), (5, 5));
    let rf5 = theoretical_rf(&model, 5, 1, (8, 8)).unwrap();
    assert_eq!((rf5.height(), rf5.width()), (9, 9));
    let rf7 = theoretical_rf(&model, 7, 1, (8, 8)).unwrap();
    assert_eq!((rf7.height(), rf7.width()), (13, 13));
}

#[test]
fn feedback_layers_grow_strictly_across_steps() {
    let model = build_positive(UNROLLED, (64, 64), 44);
    let image = {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let raw = rand_tensor(&mut rng, Shape::new(1, 1, 64, 64).unwrap(), Precision::Double, 0.5);
        // strictly positive input so relu never gates
        Tensor::from_vec(
            raw.shape(),
            Precision::Double,
            raw.data().iter().map(|v| v.abs() + 0.1).collect(),
        )
        .unwrap()
    };
    for &layer in &[3usize, 5] {
        let mut prev = 0usize;
        for step in 1..=3 {
            let unit = center_unit(&model, layer, step).unwrap();
            let theo = theoretical_rf(&model, layer, step, unit).unwrap();
            let emp = empirical_rf(&model, &image, layer, step, unit, 0)
                .unwrap()
                .expect("positive net has nonempty support");
            assert!(
                theo.contains(&emp),
                "empirical {emp} escapes theoretical {theo} at layer {layer} step {step}"
            );
            assert!(
                emp.height() > prev,
                "layer {layer}: rf height {} at step {step} did not grow past {prev}",
                emp.height()
            );
            prev = emp.height();
        }
    }
}

#[test]
fn empirical_contained_in_theoretical_everywhere() {
    let model = build_positive(UNROLLED, (48, 48), 46);
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let image = rand_tensor(&mut rng, Shape::new(1, 1, 48, 48).unwrap(), Precision::Double, 1.0);
    for layer in 1..=model.arch.num_layers() {
        for step in 1..=model.num_steps() {
            let unit = center_unit(&model, layer, step).unwrap();
            let theo = theoretical_rf(&model, layer, step, unit).unwrap();
            if let Some(emp) = empirical_rf(&model, &image, layer, step, unit, 0).unwrap() {
                assert!(theo.contains(&emp), "layer {layer} step {step}: {emp} vs {theo}");
            }
        }
    }
}

#[test]
fn one_by_one_network_has_unit_rf() {
    let text = "classes = 2\nin_channels = 1\nconv out=3 k=1\nrelu\nconv out=2 k=1\n";
    let model = build_positive(text, (8, 8), 48);
    let rf = theoretical_rf(&model, 3, 1, (4, 4)).unwrap();
    assert_eq!((rf.height(), rf.width()), (1, 1));
    let image = Tensor::full(Shape::new(1, 1, 8, 8).unwrap(), Precision::Double, 0.5);
    let emp = empirical_rf(&model, &image, 3, 1, (4, 4), 0).unwrap().unwrap();
    assert_eq!((emp.height(), emp.width()), (1, 1));
}

#[test]
fn rf_monotone_in_depth_and_step() {
    let model = build_positive(UNROLLED, (64, 64), 49);
    for step in 1..=3 {
        let mut prev = 0usize;
        for layer in 1..=model.arch.num_layers() {
            let unit = center_unit(&model, layer, step).unwrap();
            let rf = theoretical_rf(&model, layer, step, unit).unwrap();
            assert!(rf.height() >= prev, "rf shrank with depth at layer {layer} step {step}");
            prev = rf.height();
        }
    }
    for layer in 1..=model.arch.num_layers() {
        let mut prev = 0usize;
        for step in 1..=3 {
            let unit = center_unit(&model, layer, step).unwrap();
            let rf = theoretical_rf(&model, layer, step, unit).unwrap();
            assert!(rf.height() >= prev, "rf shrank with step at layer {layer} step {step}");
            prev = rf.height();
        }
    }
}

#[test]
fn rf_csv_has_one_row_per_layer_step() {
    let model = build_positive(UNROLLED, (32, 32), 50);
    let csv = rf_csv_theoretical(&model).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "layer,step,rf_h,rf_w");
    assert_eq!(lines.len(), 1 + model.arch.num_layers() * 3);
    for line in &lines[1..] {
        assert_eq!(line.split(',').count(), 4);
    }
}

#[test]
fn export_t1_is_a_linear_chain() {
    let model = build_positive(CHAIN, (12, 12), 51);
    let dot = export_graph(&model);
    // Every non-output node feeds exactly one other node.
    let mut out_degree = vec![0usize; model.graph.len()];
    for node in model.graph.nodes() {
        for input in &node.inputs {
            out_degree[input.index()] += 1;
        }
    }
    let terminals = out_degree.iter().filter(|d| **d == 0).count();
    assert_eq!(terminals, 1, "a one-step model must have a single terminal node");
    assert!(out_degree.iter().all(|d| *d <= 1), "one-step export must be a chain");
    assert!(dot.starts_with("digraph"));
    assert!(dot.contains("W1"));
}

#[test]
fn export_counts_cross_step_edges() {
    let two_step = UNROLLED.replace("steps = 3", "steps = 2").replace("lambda = 0.3,0.3,1.0", "lambda = 0.3,1.0");
    let model = build_positive(&two_step, (32, 32), 52);
    let top1 = model.step_tops[0];
    // Cross-step edges: top(1) feeding the step-2 feedback transforms.
    let mut cross = 0;
    for node in model.graph.nodes() {
        let is_feedback = match &node.op {
            Op::Conv { weight, .. } | Op::Deconv { weight, .. } => {
                model.params.get(*weight).name.starts_with('U')
            }
            _ => false,
        };
        if is_feedback && node.inputs.contains(&top1) {
            cross += 1;
        }
    }
    assert_eq!(cross, 2, "|S| = 2 must give exactly 2 cross-step edges from the step-1 top");

    // And the export names them.
    let dot = export_graph(&model);
    assert!(dot.contains("U3(2)"));
    assert!(dot.contains("U5(2)"));
}

#[test]
fn export_is_deterministic() {
    let a = export_graph(&build_positive(UNROLLED, (32, 32), 53));
    let b = export_graph(&build_positive(UNROLLED, (32, 32), 53));
    assert_eq!(a, b);
    assert!(a.contains("[shared]"), "shared parameters must be annotated");
}

#[test]
fn rf_queries_validate_their_arguments() {
    let model = build_positive(CHAIN, (12, 12), 54);
    assert!(theoretical_rf(&model, 99, 1, (0, 0)).is_err());
    assert!(theoretical_rf(&model, 1, 7, (0, 0)).is_err());
    assert!(theoretical_rf(&model, 1, 1, (99, 0)).is_err());
    let mut g = mpf_core::graph::Graph::new(Precision::Double);
    let a = g.input("a", Shape::new(1, 1, 4, 4).unwrap());
    let b = g.input("b", Shape::new(1, 1, 4, 4).unwrap());
    // b does not depend on a.
    assert!(theoretical_rf_node(&g, b, a, (0, 0)).is_err());
    let _ = ParameterStore::new();
}
