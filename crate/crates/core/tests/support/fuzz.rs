//! Seeded structural fuzzing: applies evolution events and re-derives every
//! structural invariant from scratch after each one.

#![allow(dead_code)]

use std::collections::BTreeMap;

use clusternet::autodiff::Tensor;
use clusternet::data::{synthetic_patch_xor, Batch};
use clusternet::evolution::{evolution_step, EvolutionConfig, StrategyKind};
use clusternet::forward::forward_full;
use clusternet::topology::{ClusterId, ConnectionKind, Network, NetworkConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Parameter count recomputed from shapes alone.
pub fn expected_parameter_count(net: &Network) -> usize {
    let d = net.config.d_hidden;
    let mut total = 0;
    for c in net.clusters() {
        let n = c.hidden.weight.tensor.cols();
        if c.encoder.is_some() {
            total += net.config.input_dim * d + d;
        }
        total += d * n + n + n * d + d;
    }
    total += net.connections().count() * d * d;
    if net.embedding.is_some() {
        total += net.config.num_outputs * d;
    }
    total + d * net.config.num_outputs + net.config.num_outputs
}

/// Kahn's algorithm over the edges the network calls feedforward.
pub fn feedforward_is_acyclic(net: &Network) -> bool {
    let pos: BTreeMap<ClusterId, usize> = net.clusters().iter().enumerate().map(|(i, c)| (c.id, i)).collect();
    let k = pos.len();
    let mut indeg = vec![0usize; k];
    let mut out = vec![Vec::new(); k];
    for c in net.connections() {
        if net.connection_kind(c) == ConnectionKind::Feedforward {
            out[pos[&c.source]].push(pos[&c.target]);
            indeg[pos[&c.target]] += 1;
        }
    }
    let mut ready: Vec<usize> = (0..k).filter(|&v| indeg[v] == 0).collect();
    let mut seen = 0;
    while let Some(v) = ready.pop() {
        seen += 1;
        for &w in &out[v] {
            indeg[w] -= 1;
            if indeg[w] == 0 {
                ready.push(w);
            }
        }
    }
    seen == k
}

/// Invariants that hold for any network, checked independently of the
/// library's own bookkeeping.
pub fn check_static(net: &Network) -> Result<(), String> {
    net.check_invariants().map_err(|e| e.to_string())?;
    for (i, c) in net.clusters().iter().enumerate() {
        if c.order_index != i {
            return Err(format!("cluster {} at {i} claims order {}", c.id, c.order_index));
        }
    }
    let pos: BTreeMap<ClusterId, usize> = net.clusters().iter().map(|c| (c.id, c.order_index)).collect();
    for c in net.connections() {
        let want = if pos[&c.source] < pos[&c.target] {
            ConnectionKind::Feedforward
        } else {
            ConnectionKind::Feedback
        };
        if net.connection_kind(c) != want {
            return Err(format!("{} -> {} misclassified", c.source, c.target));
        }
    }
    if net.parameter_count() != expected_parameter_count(net) {
        return Err(format!(
            "parameter_count {} but shapes give {}",
            net.parameter_count(),
            expected_parameter_count(net)
        ));
    }
    if !feedforward_is_acyclic(net) {
        return Err("feedforward subgraph has a cycle".into());
    }
    Ok(())
}

fn same_bits(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Checks what a single event promised, given the network before it.
fn check_event(
    before: &Network,
    after: &Network,
    kind: StrategyKind,
    clusters: &[ClusterId],
    delta: i64,
    cfg: &EvolutionConfig,
) -> Result<(), String> {
    let d = before.config.d_hidden as i64;
    let counted = after.parameter_count() as i64 - before.parameter_count() as i64;
    if counted != delta {
        return Err(format!("{kind}: event says {delta}, counts say {counted}"));
    }
    match kind {
        StrategyKind::Split => {
            let (pid, cid) = (clusters[0], clusters[1]);
            let old = before.cluster(pid).map_err(|e| e.to_string())?;
            let parent = after.cluster(pid).map_err(|e| e.to_string())?;
            let child = after.cluster(cid).map_err(|e| e.to_string())?;
            let n = old.neurons();
            let keep = n.div_ceil(2);
            if parent.neurons() + child.neurons() != n || parent.neurons() != keep {
                return Err(format!("split of {n} neurons gave {} + {}", parent.neurons(), child.neurons()));
            }
            let ok = same_bits(&parent.hidden.weight.tensor, &old.hidden.weight.tensor.column_range(0, keep))
                && same_bits(&child.hidden.weight.tensor, &old.hidden.weight.tensor.column_range(keep, n))
                && same_bits(&parent.hidden.bias.tensor, &old.hidden.bias.tensor.column_range(0, keep))
                && same_bits(&child.hidden.bias.tensor, &old.hidden.bias.tensor.column_range(keep, n))
                && same_bits(&parent.output.weight.tensor, &old.output.weight.tensor.row_range(0, keep))
                && same_bits(&child.output.weight.tensor, &old.output.weight.tensor.row_range(keep, n));
            if !ok {
                return Err(format!("split of {pid} did not preserve weights bitwise"));
            }
            if after.order_of(cid).unwrap() != after.cluster_count() - 1 {
                return Err("split child is not last in order".into());
            }
            let incoming = before.connections().filter(|c| c.target == pid).count() as i64;
            let enc = if old.encoder.is_some() {
                before.config.input_dim as i64 * d + d
            } else {
                0
            };
            if delta != enc + d + incoming * d * d {
                return Err(format!("split delta {delta} unexpected"));
            }
        }
        StrategyKind::Grow => {
            let id = clusters[0];
            let n = before.cluster(id).unwrap().neurons();
            let g = Network::growth_amount(n, cfg.growth_fraction) as i64;
            if after.cluster(id).unwrap().neurons() as i64 != n as i64 + g || delta != g * (2 * d + 1) {
                return Err(format!("grow of {id} inconsistent"));
            }
        }
        StrategyKind::Connect => {
            if delta != d * d || after.connection_count() != before.connection_count() + 1 {
                return Err("connect did not add exactly one d×d matrix".into());
            }
        }
        StrategyKind::Prune => {
            let removed = before.connection_count() - after.connection_count();
            if removed == 0 || delta != -(removed as i64) * d * d {
                return Err("prune accounting inconsistent".into());
            }
        }
    }
    Ok(())
}

pub struct FuzzReport {
    pub events: usize,
    pub per_kind: BTreeMap<StrategyKind, usize>,
    pub final_clusters: usize,
    pub final_connections: usize,
}

/// Runs `events` evolution events on a small image network, randomizing
/// variance statistics between events and running a forward pass every
/// `forward_every` events.
pub fn run_fuzz(seed: u64, events: usize, forward_every: usize) -> Result<FuzzReport, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::new(NetworkConfig::classification(3, 2, 2), 4, seed).map_err(|e| e.to_string())?;
    let cfg = EvolutionConfig::default();
    let probe = Batch::Image(synthetic_patch_xor(3, 4, 2, 0.1, seed).unwrap());
    let mut per_kind = BTreeMap::new();
    let mut done = 0;
    let mut attempts = 0;
    check_static(&net)?;
    while done < events {
        attempts += 1;
        if attempts > events * 4 {
            return Err(format!("only {done} events in {attempts} attempts"));
        }
        let ids: Vec<ClusterId> = net.clusters().iter().map(|c| c.id).collect();
        for id in ids {
            net.cluster_mut(id).unwrap().variance = rng.random_range(0.0..1.0);
        }
        // keep the network from growing without bound
        if net.cluster_count() > 128 {
            let victim = net.clusters()[rng.random_range(0..net.cluster_count())].id;
            net.remove_cluster(victim).map_err(|e| e.to_string())?;
            check_static(&net)?;
        }
        let before = net.clone();
        let Some(ev) = evolution_step(&mut net, &cfg).map_err(|e| e.to_string())? else {
            continue;
        };
        check_static(&net).map_err(|e| format!("after event {done} ({}): {e}", ev.kind))?;
        check_event(&before, &net, ev.kind, &ev.clusters, ev.param_delta, &cfg)
            .map_err(|e| format!("event {done}: {e}"))?;
        *per_kind.entry(ev.kind).or_insert(0) += 1;
        done += 1;
        if forward_every > 0 && done % forward_every == 0 {
            let logits = forward_full(&net, &probe).map_err(|e| e.to_string())?;
            if !logits.logits().is_finite() {
                return Err(format!("non-finite forward after event {done}"));
            }
        }
    }
    Ok(FuzzReport {
        events: done,
        per_kind,
        final_clusters: net.cluster_count(),
        final_connections: net.connection_count(),
    })
}
