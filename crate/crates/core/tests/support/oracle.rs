//! Straight-line reference for the two-pass forward computation. It works
//! one sample at a time on plain vectors, reading weights out of a network
//! but sharing no code with the tape-based engine.

#![allow(dead_code)]

use clusternet::data::{PatchedImageBatch, TokenBatch};
use clusternet::topology::{Linear, Network};

fn row_times(x: &[f64], w: &clusternet::autodiff::Tensor) -> Vec<f64> {
    let (rows, cols) = w.shape();
    assert_eq!(x.len(), rows);
    let mut out = vec![0.0; cols];
    for (r, xv) in x.iter().enumerate() {
        for c in 0..cols {
            out[c] += xv * w.get(r, c);
        }
    }
    out
}

fn affine(x: &[f64], l: &Linear) -> Vec<f64> {
    row_times(x, &l.weight.tensor)
        .iter()
        .zip(l.bias.tensor.data())
        .map(|(a, b)| a + b)
        .collect()
}

fn tanh(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(f64::tanh).collect()
}

fn mean(vs: &[Vec<f64>]) -> Vec<f64> {
    let mut acc = vec![0.0; vs[0].len()];
    for v in vs {
        for (a, b) in acc.iter_mut().zip(v) {
            *a += b;
        }
    }
    acc.iter().map(|a| a / vs.len() as f64).collect()
}

fn neuron_layer(net: &Network, j: usize, x: &[f64]) -> Vec<f64> {
    let c = &net.clusters()[j];
    let h = tanh(affine(x, &c.hidden));
    tanh(affine(&h, &c.output))
}

/// Pass-1 and Pass-2 outputs for one sample given its encodings.
fn two_pass(net: &Network, e: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Option<Vec<f64>>>) {
    let k = net.cluster_count();
    let order_of = |id| net.order_of(id).unwrap();
    let mut f: Vec<Vec<f64>> = Vec::new();
    for j in 0..k {
        let me = net.clusters()[j].id;
        let mut sum = e[j].clone();
        let mut n = 1.0;
        let mut ff: Vec<_> = net
            .connections()
            .filter(|c| c.target == me && order_of(c.source) < j)
            .collect();
        ff.sort_by_key(|c| order_of(c.source));
        for c in ff {
            let s = row_times(&f[order_of(c.source)], &c.weight.tensor);
            for (a, b) in sum.iter_mut().zip(&s) {
                *a += b;
            }
            n += 1.0;
        }
        let x: Vec<f64> = sum.iter().map(|v| v / n).collect();
        f.push(neuron_layer(net, j, &x));
    }
    let mut f_re: Vec<Option<Vec<f64>>> = vec![None; k];
    for j in 0..k {
        let me = net.clusters()[j].id;
        let mut sum = vec![0.0; net.config.d_hidden];
        let mut n = 0.0;
        for c in net.connections().filter(|c| c.target == me) {
            let s = order_of(c.source);
            let signal = if s < j {
                match &f_re[s] {
                    Some(v) => v.clone(),
                    None => continue,
                }
            } else {
                f[s].clone()
            };
            let t = row_times(&signal, &c.weight.tensor);
            for (a, b) in sum.iter_mut().zip(&t) {
                *a += b;
            }
            n += 1.0;
        }
        if n > 0.0 {
            let x: Vec<f64> = sum.iter().map(|v| v / n).collect();
            f_re[j] = Some(neuron_layer(net, j, &x));
        }
    }
    (f, f_re)
}

/// Logits for every sample of an image batch.
pub fn classification_logits(net: &Network, batch: &PatchedImageBatch) -> Vec<Vec<f64>> {
    (0..batch.len())
        .map(|b| {
            let e: Vec<Vec<f64>> = net
                .clusters()
                .iter()
                .map(|c| {
                    let x = batch.patches[c.patch_assignment].row(b);
                    tanh(affine(x, c.encoder.as_ref().unwrap()))
                })
                .collect();
            let (f, f_re) = two_pass(net, &e);
            let mut outputs = f.clone();
            outputs.extend(f_re.into_iter().flatten());
            let o_bar = mean(&outputs);
            affine(&o_bar, &net.head)
        })
        .collect()
}

/// Logits per sample per position for a token batch.
pub fn next_token_logits(net: &Network, batch: &TokenBatch) -> Vec<Vec<Vec<f64>>> {
    let emb = &net.embedding.as_ref().unwrap().tensor;
    (0..batch.batch)
        .map(|b| {
            let window = batch.window(b);
            let e: Vec<Vec<f64>> = net
                .clusters()
                .iter()
                .map(|c| tanh(emb.row(window[c.patch_assignment]).to_vec()))
                .collect();
            let (f, f_re) = two_pass(net, &e);
            (0..batch.context)
                .map(|pos| {
                    let mut members = Vec::new();
                    for (j, c) in net.clusters().iter().enumerate() {
                        if c.patch_assignment == pos {
                            members.push(f[j].clone());
                            if let Some(v) = &f_re[j] {
                                members.push(v.clone());
                            }
                        }
                    }
                    affine(&mean(&members), &net.head)
                })
                .collect()
        })
        .collect()
}
