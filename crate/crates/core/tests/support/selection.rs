//! Independent references for candidate selection and pruning.

#![allow(dead_code)]

use std::collections::BTreeSet;

use clusternet::topology::{ClusterId, Network};

/// The q-quantile by definition: the smallest listed value `x` with
/// `#{v ≤ x} ≥ q·n`.
pub fn quantile_by_counting(values: &[f64], q: f64) -> f64 {
    let n = values.len() as f64;
    values
        .iter()
        .copied()
        .filter(|&x| values.iter().filter(|&&v| v <= x).count() as f64 >= q * n - 1e-9)
        .fold(f64::INFINITY, f64::min)
}

pub fn split_set(vs: &[f64], neurons: &[usize], alpha: f64) -> BTreeSet<usize> {
    let q = quantile_by_counting(vs, alpha);
    (0..vs.len()).filter(|&i| vs[i] >= q && neurons[i] >= 2).collect()
}

pub fn grow_set(vs: &[f64], beta: f64) -> BTreeSet<usize> {
    let q = quantile_by_counting(vs, beta);
    (0..vs.len()).filter(|&i| vs[i] <= q).collect()
}

/// Connections a prune with intensity `theta` should remove, computed edge by
/// edge from raw weights.
pub fn prune_set(net: &Network, theta: f64) -> BTreeSet<(ClusterId, ClusterId)> {
    let norm = |w: &[f64]| w.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut doomed = BTreeSet::new();
    for c in net.connections() {
        let siblings: Vec<f64> = net
            .connections()
            .filter(|o| o.target == c.target)
            .map(|o| norm(o.weight.tensor.data()))
            .collect();
        let th = theta * siblings.iter().sum::<f64>() / siblings.len() as f64;
        if norm(c.weight.tensor.data()) < th {
            doomed.insert((c.source, c.target));
        }
    }
    doomed
}
