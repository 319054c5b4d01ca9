use super::*;
use crate::tensor::{softmax_cross_entropy, Rng};

fn chain_backward<T: Scalar>(m: &mut ModelGraph<T>, x: &Tensor<T>, y: &Tensor<T>, mode: Mode) -> Vec<SegmentGrads<T>> {
    let (logits, mut trace) = m.forward(x.clone(), mode, Retention::All).unwrap();
    let (_, err) = softmax_cross_entropy(&logits, y).unwrap();
    let mut d = ErrorSignal::fresh(err);
    let mut out = Vec::new();
    for k in (0..m.segment_count()).rev() {
        let t = trace.take(k).unwrap();
        let b = m.segment_backward(&t, d.clone(), k > 0).unwrap();
        out.push(b.grads);
        if let Some(e) = b.input_error {
            d = e;
        }
    }
    out.reverse();
    out
}

fn loss<T: Scalar>(m: &mut ModelGraph<T>, x: &Tensor<T>, y: &Tensor<T>) -> f64 {
    let (logits, _) = m.forward(x.clone(), Mode::TrainFrozenStats, Retention::None).unwrap();
    softmax_cross_entropy(&logits, y).unwrap().0.as_f64()
}

/// Central differences with step 1e-3; relative tolerance 1e-3 above an absolute floor.
fn check_gradients(mut m: ModelGraph<f64>, batch: usize, seed: u64) {
    let mut rng = Rng::new(seed);
    let mut shape = vec![batch];
    shape.extend(&m.input_shape);
    let x: Tensor<f64> = rng.uniform(&shape, -1.0, 1.0).unwrap();
    let labels: Vec<usize> = (0..batch).map(|_| rng.below(m.num_classes)).collect();
    let y = Tensor::one_hot(&labels, m.num_classes).unwrap();
    // move batchnorm affine parameters off their trivial initial values
    for node in &mut m.nodes {
        if let LayerKind::BatchNorm { .. } = node.kind {
            node.params[0] = rng.uniform(node.params[0].shape(), 0.5, 1.5).unwrap();
            node.params[1] = rng.uniform(node.params[1].shape(), -0.3, 0.3).unwrap();
        }
    }
    let grads = chain_backward(&mut m, &x, &y, Mode::TrainFrozenStats);
    let h = 1e-3;
    let mut checked = 0;
    for g in &grads {
        for (node, tensors) in &g.params {
            for (slot, analytic) in tensors.iter().enumerate() {
                for j in 0..analytic.len() {
                    let orig = m.nodes[*node].params[slot].data()[j];
                    m.nodes[*node].params[slot].data_mut()[j] = orig + h;
                    let up = loss(&mut m, &x, &y);
                    m.nodes[*node].params[slot].data_mut()[j] = orig - h;
                    let down = loss(&mut m, &x, &y);
                    m.nodes[*node].params[slot].data_mut()[j] = orig;
                    let numeric = (up - down) / (2.0 * h);
                    let a = analytic.data()[j];
                    let scale = a.abs().max(numeric.abs());
                    assert!(
                        (a - numeric).abs() <= 1e-3 * scale + 1e-7,
                        "node {node} slot {slot} entry {j}: analytic {a}, numeric {numeric}"
                    );
                    checked += 1;
                }
            }
        }
    }
    assert_eq!(checked, m.parameter_count());
}

#[test]
fn tanh_mlp_gradients_match_finite_differences() {
    let spec = ArchSpec::new(Architecture::MlpPlain, &[1, 2, 3], 4)
        .with_size(3, 5)
        .with_activation(ActKind::Tanh);
    check_gradients(build_model(&spec, &mut Rng::new(1)).unwrap(), 6, 2);
}

#[test]
fn residual_mlp_gradients_match_finite_differences() {
    let spec = ArchSpec::new(Architecture::MlpResidual, &[1, 2, 2], 3)
        .with_size(3, 4)
        .with_activation(ActKind::Tanh);
    check_gradients(build_model(&spec, &mut Rng::new(3)).unwrap(), 5, 4);
}

#[test]
fn conv_gradients_match_finite_differences() {
    let spec = ArchSpec::new(Architecture::ConvPlain, &[2, 4, 4], 3)
        .with_size(2, 3)
        .with_activation(ActKind::Tanh);
    check_gradients(build_model(&spec, &mut Rng::new(5)).unwrap(), 4, 6);
}

#[test]
fn mixer_gradients_match_finite_differences() {
    let spec = ArchSpec::new(Architecture::MiniMixer, &[1, 4, 4], 3)
        .with_size(2, 3)
        .with_patch(2)
        .with_activation(ActKind::Tanh);
    check_gradients(build_model(&spec, &mut Rng::new(7)).unwrap(), 4, 8);
}

#[test]
fn zero_input_through_sign_activations_gives_plus_one() {
    let spec = ArchSpec::new(Architecture::MlpPlain, &[1, 4, 4], 10)
        .with_size(3, 16)
        .with_binarization(true, true);
    let mut m: ModelGraph<f32> = build_model(&spec, &mut Rng::new(0)).unwrap();
    let mut x = Tensor::zeros(vec![4, 1, 4, 4]);
    for k in 0..m.segment_count() - 1 {
        let (y, _) = m.forward_segment(k, x, Mode::Train, false).unwrap();
        assert!(y.data().iter().all(|&v| v == 1.0), "segment {k}: {:?}", y.data());
        x = y;
    }
}

#[test]
fn eval_forward_is_deterministic_and_stateless() {
    let spec = ArchSpec::new(Architecture::ConvPlain, &[1, 6, 6], 3).with_size(2, 4);
    let mut m: ModelGraph<f32> = build_model(&spec, &mut Rng::new(9)).unwrap();
    let x: Tensor<f32> = Rng::new(1).uniform(&[3, 1, 6, 6], 0.0, 1.0).unwrap();
    let before = m.clone();
    let (a, trace) = m.forward(x.clone(), Mode::Eval, Retention::None).unwrap();
    let (b, _) = m.forward(x.clone(), Mode::Eval, Retention::None).unwrap();
    assert_eq!(a, b);
    assert_eq!(m, before);
    assert!(!trace.is_allocated());
    assert_eq!(m.predict(&x).unwrap(), a);
}

fn dense(index: usize, w: &[f64], b: &[f64], binarize: bool) -> LayerNode<f64> {
    let mut n = LayerNode::new(index, LayerKind::Dense { inputs: 2, outputs: 2 });
    n.params = vec![Tensor::from_f64([2, 2], w).unwrap(), Tensor::from_f64([2], b).unwrap()];
    n.binarize_weights = binarize;
    n
}

fn toy_spec() -> ArchSpec {
    ArchSpec::new(Architecture::MlpPlain, &[1, 1, 2], 2)
}

#[test]
fn binary_toy_model_matches_hand_computation() {
    let nodes = vec![
        dense(0, &[1.0, 2.0, -1.0, 0.5], &[0.0, 0.25], false),
        LayerNode::new(1, LayerKind::Activation(ActKind::Sign)),
        dense(2, &[0.3, -0.2, -0.7, 0.1], &[0.1, 0.0], true),
        LayerNode::new(3, LayerKind::Activation(ActKind::Sign)),
        dense(4, &[2.0, 1.0, 0.0, -1.0], &[0.0, 0.5], false),
    ];
    let mut m = ModelGraph::from_nodes(toy_spec(), nodes, vec![2], 2).unwrap();
    assert_eq!(m.injection_points(), &[1, 3, 4]);
    // z1 = [-1.5, -0.75] -> [-1, -1]; sign(W2) = [[1, -1], [-1, 1]], z2 = [0.1, 0] -> [1, 1]
    let x = Tensor::from_f64([1, 2], &[0.5, -1.0]).unwrap();
    let (logits, _) = m.forward(x, Mode::Eval, Retention::None).unwrap();
    assert_eq!(logits.data(), &[3.0, -0.5]);
}

#[test]
fn dense_segment_backward_by_hand() {
    let nodes = vec![
        dense(0, &[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0], false),
        dense(1, &[1.0, -1.0, 1.0, 1.0], &[0.0, 0.0], false),
    ];
    let mut m = ModelGraph::from_nodes(toy_spec(), nodes, vec![2], 2).unwrap();
    let x = Tensor::from_f64([1, 2], &[0.2, 0.4]).unwrap();
    let (_, mut trace) = m.forward(x, Mode::Train, Retention::All).unwrap();
    let t = trace.take(1).unwrap();
    let delta = ErrorSignal::fresh(Tensor::from_f64([1, 2], &[1.0, 0.0]).unwrap());
    let back = m.segment_backward(&t, delta, true).unwrap();
    assert_eq!(back.input_error.unwrap().value.data(), &[1.0, -1.0]);
    // dW = δ ⊗ y_{k-1}
    assert_eq!(back.grads.weight_grad().data(), &[0.2, 0.4, 0.0, 0.0]);
}

#[test]
fn saturated_sign_segment_has_zero_gradient() {
    let nodes = vec![
        dense(0, &[3.0, 0.0, 0.0, -3.0], &[0.0, 0.0], false),
        LayerNode::new(1, LayerKind::Activation(ActKind::Sign)),
        dense(2, &[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0], false),
    ];
    let mut m = ModelGraph::from_nodes(toy_spec(), nodes, vec![2], 2).unwrap();
    let x = Tensor::from_f64([2, 2], &[1.0, 1.0, -0.5, 0.8]).unwrap();
    let (_, mut trace) = m.forward(x, Mode::Train, Retention::All).unwrap();
    let t = trace.take(0).unwrap();
    let delta = ErrorSignal::fresh(Tensor::from_f64([2, 2], &[0.3, -0.2, 0.1, 0.9]).unwrap());
    let back = m.segment_backward(&t, delta, false).unwrap();
    assert!(back.input_error.is_none());
    assert_eq!(back.grads.ste_crossings, 1);
    assert!(back.grads.flat().iter().all(|&g| g == 0.0));
}

#[test]
fn chained_error_crosses_k_minus_k_ste() {
    let spec = ArchSpec::new(Architecture::MlpPlain, &[1, 3, 3], 4)
        .with_size(4, 8)
        .with_binarization(true, true);
    let mut m: ModelGraph<f32> = build_model(&spec, &mut Rng::new(2)).unwrap();
    let x: Tensor<f32> = Rng::new(3).uniform(&[8, 1, 3, 3], -1.0, 1.0).unwrap();
    let y = Tensor::one_hot(&[0, 1, 2, 3, 0, 1, 2, 3], 4).unwrap();
    let grads = chain_backward(&mut m, &x, &y, Mode::Train);
    let big_k = m.segment_count();
    for (k, g) in grads.iter().enumerate() {
        assert_eq!(g.ste_crossings, big_k - 1 - k, "segment {k}");
    }
}

#[test]
fn batchnorm_train_output_has_target_moments() {
    let mut rng = Rng::new(11);
    for conv in [false, true] {
        let (input, features): (Vec<usize>, usize) = if conv { (vec![3, 5, 5], 4) } else { (vec![6], 6) };
        let mut nodes: Vec<LayerNode<f32>> = Vec::new();
        if conv {
            let mut c = LayerNode::new(
                0,
                LayerKind::Conv2d {
                    in_channels: 3,
                    out_channels: 4,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
            );
            c.params = vec![rng.uniform(&[4, 3, 3, 3], -0.5, 0.5).unwrap(), Tensor::zeros(vec![4])];
            nodes.push(c);
        } else {
            let mut d = LayerNode::new(0, LayerKind::Dense { inputs: 6, outputs: 6 });
            d.params = vec![rng.uniform(&[6, 6], -0.5, 0.5).unwrap(), Tensor::zeros(vec![6])];
            nodes.push(d);
        }
        let gamma: Vec<f64> = (0..features).map(|i| 0.5 + i as f64 * 0.25).collect();
        let beta: Vec<f64> = (0..features).map(|i| i as f64 - 1.0).collect();
        let mut bn = LayerNode::new(1, LayerKind::BatchNorm { features });
        bn.params = vec![
            Tensor::from_f64([features], &gamma).unwrap(),
            Tensor::from_f64([features], &beta).unwrap(),
        ];
        bn.stats = vec![Tensor::zeros(vec![features]), Tensor::full(vec![features], 1.0)];
        nodes.push(bn);
        let flat: usize = if conv { 100 } else { 6 };
        if conv {
            nodes.push(LayerNode::new(2, LayerKind::Flatten));
        }
        let mut head = LayerNode::new(
            nodes.len(),
            LayerKind::Dense {
                inputs: flat,
                outputs: 3,
            },
        );
        head.params = vec![Tensor::zeros(vec![3, flat]), Tensor::zeros(vec![3])];
        nodes.push(head);
        let mut m = ModelGraph::from_nodes(toy_spec(), nodes, input.clone(), 3).unwrap();

        let mut shape = vec![32];
        shape.extend(&input);
        let x: Tensor<f32> = rng.normal(&shape, 2.0, 3.0).unwrap();
        let (out, _) = m.forward_segment(0, x, Mode::Train, false).unwrap();
        let out = if conv {
            out.reshape(vec![32, 4, 5, 5]).unwrap()
        } else {
            out
        };
        let (outer, c, inner) = exec::norm_layout(out.shape());
        for ch in 0..c {
            let vals: Vec<f64> = (0..outer)
                .flat_map(|o| out.data()[(o * c + ch) * inner..(o * c + ch + 1) * inner].to_vec())
                .map(|v| v as f64)
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
            assert!((mean - beta[ch]).abs() < 1e-4, "mean {mean} vs {}", beta[ch]);
            assert!((std - gamma[ch]).abs() < 1e-4, "std {std} vs {}", gamma[ch]);
        }
        // running statistics moved one momentum step toward the batch
        let rm = m.nodes[1].stats[0].data();
        assert!(rm.iter().any(|&v| v != 0.0));
    }
}

#[test]
fn zeroed_residual_block_passes_input_through() {
    let spec = ArchSpec::new(Architecture::MlpResidual, &[1, 2, 4], 3)
        .with_size(2, 8)
        .with_activation(ActKind::Relu);
    let mut m: ModelGraph<f64> = build_model(&spec, &mut Rng::new(4)).unwrap();
    for i in m.segment(1) {
        for p in &mut m.nodes[i].params {
            *p = Tensor::zeros(p.shape().to_vec());
        }
    }
    let x: Tensor<f64> = Rng::new(5).uniform(&[6, 1, 2, 4], -1.0, 1.0).unwrap();
    let (y0, _) = m.forward_segment(0, x, Mode::Train, false).unwrap();
    let (y1, _) = m.forward_segment(1, y0.clone(), Mode::Train, false).unwrap();
    assert_eq!(y1, y0);

    let plain = build_model::<f64>(&spec.clone().with_skips(false), &mut Rng::new(4)).unwrap();
    assert!(plain.nodes.iter().all(|n| !matches!(n.kind, LayerKind::SkipAdd { .. })));
}

#[test]
fn retention_policies() {
    let spec = ArchSpec::new(Architecture::MlpPlain, &[1, 4, 4], 5).with_size(3, 12);
    let mut m: ModelGraph<f32> = build_model(&spec, &mut Rng::new(0)).unwrap();
    let x: Tensor<f32> = Rng::new(1).uniform(&[7, 1, 4, 4], 0.0, 1.0).unwrap();

    let mut meter = BufferMeter::default();
    let (_, trace) = m
        .forward_metered(x.clone(), Mode::Train, Retention::None, &mut meter)
        .unwrap();
    assert_eq!(trace.retained_segments(), 0);
    assert_eq!(meter.peak_bytes, 0);

    let mut meter = BufferMeter::default();
    let (_, mut trace) = m.forward_metered(x, Mode::Train, Retention::All, &mut meter).unwrap();
    assert_eq!(trace.retained_segments(), m.segment_count());
    assert_eq!(meter.peak_bytes, trace.retained_bytes());
    assert_eq!(meter.peak_segments, m.segment_count());
    let t = trace.take(0).unwrap();
    meter.release(t);
    assert_eq!(meter.live_segments, m.segment_count() - 1);
    assert!(matches!(trace.take(0), Err(Error::MissingTrace { segment: 0 })));
}

#[test]
fn shape_errors_name_the_node() {
    let spec = ArchSpec::new(Architecture::MlpPlain, &[1, 4, 4], 5).with_size(1, 4);
    let mut m: ModelGraph<f32> = build_model(&spec, &mut Rng::new(0)).unwrap();
    let bad = Tensor::zeros(vec![2, 1, 4, 5]);
    assert!(matches!(
        m.forward(bad, Mode::Eval, Retention::None),
        Err(Error::ShapeMismatch { .. })
    ));
    let mut broken = m.clone();
    broken.nodes[1].params[0] = Tensor::zeros(vec![4, 15]);
    let x = Tensor::zeros(vec![2, 1, 4, 4]);
    assert!(matches!(
        broken.forward(x, Mode::Eval, Retention::None),
        Err(Error::AtNode { node: 1, .. })
    ));
}
