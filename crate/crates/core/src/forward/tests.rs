use super::*;
use crate::autodiff::Tensor;
use crate::data::{PatchedImageBatch, TokenBatch};
use crate::topology::NetworkConfig;

fn id(k: u64) -> ClusterId {
    ClusterId(k)
}

fn set(net: &mut Network, r: ParamRef, t: Tensor) {
    net.parameter_mut(r).unwrap().tensor = t.with_grad();
}

fn image_batch(net: &Network, rows: usize, seed: u64) -> Batch {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let patches = (0..net.cluster_count())
        .map(|_| Tensor::uniform(rows, net.config.input_dim, 1.0, &mut rng))
        .collect();
    Batch::Image(PatchedImageBatch {
        patches,
        labels: (0..rows).map(|r| r % net.config.num_outputs).collect(),
    })
}

/// NL_j applied by hand to a single row.
fn nl(net: &Network, j: usize, x: &[f64]) -> Vec<f64> {
    let c = &net.clusters()[j];
    let affine = |x: &[f64], w: &Tensor, b: &Tensor| -> Vec<f64> {
        (0..w.cols())
            .map(|q| b.data()[q] + (0..w.rows()).map(|p| x[p] * w.get(p, q)).sum::<f64>())
            .map(f64::tanh)
            .collect()
    };
    let h = affine(x, &c.hidden.weight.tensor, &c.hidden.bias.tensor);
    affine(&h, &c.output.weight.tensor, &c.output.bias.tensor)
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{x} vs {y}");
    }
}

#[test]
fn zero_patch_with_zero_bias_encodes_to_zero() {
    let mut net = Network::new(NetworkConfig::classification(4, 3, 2), 1, 0).unwrap();
    set(&mut net, ParamRef::EncoderBias(id(0)), Tensor::zeros(1, 4));
    let batch = Batch::Image(PatchedImageBatch {
        patches: vec![Tensor::zeros(2, 3)],
        labels: vec![0, 1],
    });
    let mut g = Graph::bind(&net);
    let enc = encode_all(&net, &mut g, &batch).unwrap();
    assert!(g.tape.value(enc.e[0]).data().iter().all(|&v| v == 0.0));
}

#[test]
fn full_size_patch_encodes_to_channel_width() {
    let net = Network::new(NetworkConfig::classification(10, 256, 10), 2, 0).unwrap();
    let batch = image_batch(&net, 3, 1);
    let mut g = Graph::bind(&net);
    let enc = encode_all(&net, &mut g, &batch).unwrap();
    assert_eq!(g.tape.value(enc.e[1]).shape(), (3, 10));
}

#[test]
fn one_dimensional_identity_encoder_is_tanh() {
    let mut net = Network::new(NetworkConfig::classification(1, 1, 2), 1, 0).unwrap();
    set(&mut net, ParamRef::EncoderWeight(id(0)), Tensor::identity(1));
    set(&mut net, ParamRef::EncoderBias(id(0)), Tensor::zeros(1, 1));
    let batch = Batch::Image(PatchedImageBatch {
        patches: vec![Tensor::from_rows(&[&[0.7], &[-2.0]])],
        labels: vec![0, 0],
    });
    let mut g = Graph::bind(&net);
    let enc = encode_all(&net, &mut g, &batch).unwrap();
    assert_eq!(g.tape.value(enc.e[0]).data(), &[0.7f64.tanh(), (-2.0f64).tanh()]);
}

#[test]
fn encoder_errors() {
    let net = Network::new(NetworkConfig::classification(2, 3, 2), 1, 0).unwrap();
    let wrong = Batch::Image(PatchedImageBatch {
        patches: vec![Tensor::zeros(1, 4)],
        labels: vec![0],
    });
    assert!(matches!(forward_full(&net, &wrong), Err(Error::Dimension(_))));

    let text = Network::new(NetworkConfig::next_token(2, 5), 2, 0).unwrap();
    let bad_token = Batch::Text(TokenBatch {
        tokens: vec![1, 9],
        targets: vec![0, 0],
        batch: 1,
        context: 2,
    });
    assert!(matches!(forward_full(&text, &bad_token), Err(Error::Index(_))));
    assert!(matches!(forward_full(&text, &wrong), Err(Error::Contract(_))));
}

#[test]
fn pass1_without_sources_is_nl_of_encoding() {
    let net = Network::new(NetworkConfig::classification(3, 2, 2), 2, 4).unwrap();
    let batch = image_batch(&net, 1, 2);
    let mut g = Graph::bind(&net);
    let enc = encode_all(&net, &mut g, &batch).unwrap();
    let p1 = pass1(&net, &mut g, &enc).unwrap();
    for j in 0..2 {
        let e = g.tape.value(enc.e[j]).data().to_vec();
        close(g.tape.value(p1.f[j]).data(), &nl(&net, j, &e), 1e-15);
    }
}

#[test]
fn pass1_identity_edge_averages_encoding_and_source() {
    let mut net = Network::new(NetworkConfig::classification(3, 2, 2), 2, 4).unwrap();
    net.add_connection(id(0), id(1)).unwrap();
    set(&mut net, ParamRef::Connection(id(0), id(1)), Tensor::identity(3));
    let batch = image_batch(&net, 1, 3);
    let mut g = Graph::bind(&net);
    let enc = encode_all(&net, &mut g, &batch).unwrap();
    let p1 = pass1(&net, &mut g, &enc).unwrap();
    let e1 = g.tape.value(enc.e[1]).data();
    let f0 = g.tape.value(p1.f[0]).data();
    let arg: Vec<f64> = e1.iter().zip(f0).map(|(a, b)| (a + b) / 2.0).collect();
    close(g.tape.value(p1.f[1]).data(), &nl(&net, 1, &arg), 1e-15);
}

#[test]
fn pass2_absent_without_valid_inputs() {
    let mut net = Network::new(NetworkConfig::classification(3, 2, 2), 3, 4).unwrap();
    net.add_connection(id(0), id(1)).unwrap();
    let batch = image_batch(&net, 2, 3);
    let t = forward_full(&net, &batch).unwrap();
    // cluster 0 has no inputs at all; cluster 1's only source has no f_re
    assert!(t.passes.f_re.iter().all(Option::is_none));
}

#[test]
fn pass2_single_identity_feedback_edge() {
    let mut net = Network::new(NetworkConfig::classification(3, 2, 2), 2, 4).unwrap();
    net.add_connection(id(1), id(0)).unwrap();
    set(&mut net, ParamRef::Connection(id(1), id(0)), Tensor::identity(3));
    let batch = image_batch(&net, 1, 5);
    let t = forward_full(&net, &batch).unwrap();
    let tape = &t.graph.tape;
    let f1 = tape.value(t.passes.f[1]).data().to_vec();
    let re0 = t.passes.f_re[0].expect("feedback gives cluster 0 a second output");
    close(tape.value(re0).data(), &nl(&net, 0, &f1), 1e-15);
    assert!(t.passes.f_re[1].is_none());
}

#[test]
fn pass2_two_cluster_loop_matches_hand_evaluation() {
    let mut net = Network::new(NetworkConfig::classification(3, 2, 2), 2, 8).unwrap();
    net.add_connection(id(0), id(1)).unwrap();
    net.add_connection(id(1), id(0)).unwrap();
    let batch = image_batch(&net, 1, 6);
    let t = forward_full(&net, &batch).unwrap();
    let tape = &t.graph.tape;
    let w01 = &net.connection(id(0), id(1)).unwrap().weight.tensor;
    let w10 = &net.connection(id(1), id(0)).unwrap().weight.tensor;
    let times = |x: &[f64], w: &Tensor| -> Vec<f64> {
        (0..3).map(|q| (0..3).map(|p| x[p] * w.get(p, q)).sum()).collect()
    };
    let f1 = tape.value(t.passes.f[1]).data().to_vec();
    let re0 = nl(&net, 0, &times(&f1, w10));
    let re1 = nl(&net, 1, &times(&re0, w01));
    close(tape.value(t.passes.f_re[0].unwrap()).data(), &re0, 1e-12);
    close(tape.value(t.passes.f_re[1].unwrap()).data(), &re1, 1e-12);
}

#[test]
fn integrate_single_cluster_is_its_output() {
    let net = Network::new(NetworkConfig::classification(3, 2, 2), 1, 0).unwrap();
    let t = forward_full(&net, &image_batch(&net, 2, 0)).unwrap();
    let tape = &t.graph.tape;
    assert_eq!(tape.value(t.prediction.outputs[0]).data(), tape.value(t.passes.f[0]).data());
}

#[test]
fn integrate_is_a_flat_mean() {
    let mut net = Network::new(NetworkConfig::classification(3, 2, 2), 2, 1).unwrap();
    net.add_connection(id(1), id(0)).unwrap();
    let t = forward_full(&net, &image_batch(&net, 1, 9)).unwrap();
    let tape = &t.graph.tape;
    let f0 = tape.value(t.passes.f[0]).data();
    let f1 = tape.value(t.passes.f[1]).data();
    let re0 = tape.value(t.passes.f_re[0].unwrap()).data();
    let expected: Vec<f64> = (0..3).map(|i| (f0[i] + f1[i] + re0[i]) / 3.0).collect();
    close(tape.value(t.prediction.outputs[0]).data(), &expected, 1e-15);
}

#[test]
fn connection_free_network_is_mean_of_cluster_mlps() {
    let net = Network::new(NetworkConfig::classification(4, 3, 3), 3, 11).unwrap();
    let batch = image_batch(&net, 2, 4);
    let t = forward_full(&net, &batch).unwrap();
    let Batch::Image(images) = &batch else { unreachable!() };
    for b in 0..2 {
        let mut mean = vec![0.0; 4];
        for j in 0..3 {
            let c = &net.clusters()[j];
            let enc = c.encoder.as_ref().unwrap();
            let x = images.patches[j].row(b);
            let e: Vec<f64> = (0..4)
                .map(|q| {
                    (enc.bias.tensor.data()[q]
                        + (0..3).map(|p| x[p] * enc.weight.tensor.get(p, q)).sum::<f64>())
                    .tanh()
                })
                .collect();
            for (m, v) in mean.iter_mut().zip(nl(&net, j, &e)) {
                *m += v / 3.0;
            }
        }
        let logits: Vec<f64> = (0..3)
            .map(|q| {
                net.head.bias.tensor.data()[q]
                    + (0..4).map(|p| mean[p] * net.head.weight.tensor.get(p, q)).sum::<f64>()
            })
            .collect();
        close(t.logits().row(b), &logits, 1e-12);
    }
}

#[test]
fn forward_is_bitwise_deterministic() {
    let mut net = Network::new(NetworkConfig::classification(5, 4, 3), 4, 2).unwrap();
    net.add_connection(id(0), id(2)).unwrap();
    net.add_connection(id(3), id(1)).unwrap();
    let batch = image_batch(&net, 5, 1);
    let a = forward_full(&net, &batch).unwrap();
    let b = forward_full(&net, &batch).unwrap();
    assert_eq!(a.logits(), b.logits());
}

#[test]
fn next_token_logits_are_per_position() {
    let mut net = Network::new(NetworkConfig::next_token(4, 6), 3, 1).unwrap();
    net.add_connection(id(2), id(0)).unwrap();
    let batch = Batch::Text(TokenBatch {
        tokens: vec![1, 2, 3, 4, 5, 0],
        targets: vec![2, 3, 4, 5, 0, 1],
        batch: 2,
        context: 3,
    });
    let mut t = forward_full(&net, &batch).unwrap();
    assert_eq!(t.logits().shape(), (6, 6));
    assert_eq!(t.prediction.positions, vec![0, 1, 2]);
    // position-major targets
    assert_eq!(t.targets(&batch).unwrap(), vec![2, 5, 3, 0, 4, 1]);
    let loss = t.loss(&batch).unwrap();
    assert!(t.graph.tape.value(loss).data()[0].is_finite());
}

#[test]
fn every_parameter_receives_a_finite_gradient() {
    let mut net = Network::new(NetworkConfig::classification(3, 2, 3), 3, 6).unwrap();
    net.add_connection(id(0), id(1)).unwrap();
    net.add_connection(id(2), id(0)).unwrap();
    let batch = image_batch(&net, 4, 2);
    let mut t = forward_full(&net, &batch).unwrap();
    let loss = t.loss(&batch).unwrap();
    t.backward_into(&mut net, loss).unwrap();
    for (r, p) in net.parameters() {
        let g = p.tensor.grad().unwrap_or_else(|| panic!("{r} has no gradient"));
        assert!(g.iter().all(|v| v.is_finite()));
        assert!(g.iter().any(|&v| v != 0.0), "{r} gradient is identically zero");
    }
}
