//! Structural evolution: per-cluster variance statistics, quantile-based
//! candidate selection, the split / grow / connect / prune strategies and the
//! loss-plateau trigger.

use std::fmt;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::topology::{ClusterId, Network};

/// Attempts made by [`select_connect_pair`] before giving up.
pub const CONNECT_ATTEMPTS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvolutionConfig {
    pub p_split: f64,
    pub p_grow: f64,
    pub p_connect: f64,
    pub p_prune: f64,
    /// Split candidates have variance at or above this quantile.
    pub alpha: f64,
    /// Grow candidates have variance at or below this quantile.
    pub beta: f64,
    /// Prune intensity.
    pub theta: f64,
    pub growth_fraction: f64,
    /// Stagnant epochs tolerated before an event; `u64::MAX` disables events.
    pub patience: u64,
    pub min_delta: f64,
    pub variance_ema_decay: f64,
    pub split_enabled: bool,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        Self {
            p_split: 0.25,
            p_grow: 0.25,
            p_connect: 0.35,
            p_prune: 0.15,
            alpha: 0.9,
            beta: 0.4,
            theta: 0.9,
            growth_fraction: 0.25,
            patience: 10,
            min_delta: 1e-4,
            variance_ema_decay: 0.9,
            split_enabled: true,
        }
    }
}

impl EvolutionConfig {
    pub fn with_probabilities(mut self, probs: [f64; 4]) -> Self {
        [self.p_split, self.p_grow, self.p_connect, self.p_prune] = probs;
        self
    }

    /// Relative weights in strategy order, with split zeroed when disabled.
    pub fn weights(&self) -> [f64; 4] {
        let split = if self.split_enabled { self.p_split } else { 0.0 };
        [split, self.p_grow, self.p_connect, self.p_prune]
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [self.p_split, self.p_grow, self.p_connect, self.p_prune];
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Config("strategy probabilities must be finite and ≥ 0".into()));
        }
        if self.weights().iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("every enabled strategy has probability 0".into()));
        }
        for (name, q) in [("alpha", self.alpha), ("beta", self.beta), ("theta", self.theta)] {
            if !(q > 0.0 && q <= 1.0) {
                return Err(Error::Config(format!("{name} = {q} is outside (0, 1]")));
            }
        }
        if !(0.0..1.0).contains(&self.variance_ema_decay) {
            return Err(Error::Config("variance EMA decay must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StrategyKind {
    Split,
    Grow,
    Connect,
    Prune,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::Split,
        StrategyKind::Grow,
        StrategyKind::Connect,
        StrategyKind::Prune,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Split => "split",
            StrategyKind::Grow => "grow",
            StrategyKind::Connect => "connect",
            StrategyKind::Prune => "prune",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvolutionEvent {
    pub kind: StrategyKind,
    pub epoch: u64,
    pub clusters: Vec<ClusterId>,
    pub connections: Vec<(ClusterId, ClusterId)>,
    /// Change in `parameter_count`.
    pub param_delta: i64,
}

/// Population variance of every entry.
pub fn pooled_variance(t: &Tensor) -> f64 {
    let n = t.len();
    if n == 0 {
        return 0.0;
    }
    let mean = t.data().iter().sum::<f64>() / n as f64;
    t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64
}

/// `v ← decay·v + (1 − decay)·var(hidden)`, per cluster in order.
pub fn update_variance(net: &mut Network, hidden: &[&Tensor], decay: f64) -> Result<()> {
    if hidden.len() != net.cluster_count() {
        return Err(Error::Dimension(format!(
            "{} activation sets for {} clusters",
            hidden.len(),
            net.cluster_count()
        )));
    }
    let ids: Vec<ClusterId> = net.clusters().iter().map(|c| c.id).collect();
    for (id, h) in ids.into_iter().zip(hidden) {
        let c = net.cluster_mut(id)?;
        c.variance = decay * c.variance + (1.0 - decay) * pooled_variance(h);
    }
    Ok(())
}

/// Nearest-rank quantile: the ⌈q·n⌉-th smallest value (1-based).
pub fn nearest_rank_quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // The small epsilon absorbs products like 0.9·10 landing a hair above 9.
    let rank = ((q * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    Some(sorted[rank - 1])
}

fn variances(net: &Network) -> Vec<f64> {
    net.clusters().iter().map(|c| c.variance).collect()
}

/// Clusters at or above the α-quantile that are large enough to split.
pub fn split_candidates(net: &Network, alpha: f64) -> Vec<ClusterId> {
    let Some(q) = nearest_rank_quantile(&variances(net), alpha) else {
        return Vec::new();
    };
    net.clusters()
        .iter()
        .filter(|c| c.variance >= q && c.neurons() >= 2)
        .map(|c| c.id)
        .collect()
}

/// Clusters at or below the β-quantile.
pub fn grow_candidates(net: &Network, beta: f64) -> Vec<ClusterId> {
    let Some(q) = nearest_rank_quantile(&variances(net), beta) else {
        return Vec::new();
    };
    net.clusters()
        .iter()
        .filter(|c| c.variance <= q)
        .map(|c| c.id)
        .collect()
}

fn pick<R: Rng + ?Sized>(items: &[ClusterId], rng: &mut R) -> Option<ClusterId> {
    (!items.is_empty()).then(|| items[rng.random_range(0..items.len())])
}

pub fn select_split_candidate(net: &mut Network, alpha: f64) -> Option<ClusterId> {
    let c = split_candidates(net, alpha);
    pick(&c, &mut net.rng)
}

pub fn select_grow_candidate(net: &mut Network, beta: f64) -> Option<ClusterId> {
    let c = grow_candidates(net, beta);
    pick(&c, &mut net.rng)
}

/// Direction for a pair: the higher-variance cluster is the source; on a
/// tie the one earlier in traversal order is.
pub fn connect_direction(net: &Network, a: usize, b: usize) -> (ClusterId, ClusterId) {
    let (ca, cb) = (&net.clusters()[a], &net.clusters()[b]);
    let a_first = ca.variance > cb.variance || (ca.variance == cb.variance && a < b);
    if a_first {
        (ca.id, cb.id)
    } else {
        (cb.id, ca.id)
    }
}

/// Samples unordered pairs until one is not yet connected in its
/// variance-dictated direction.
pub fn select_connect_pair(net: &mut Network) -> Option<(ClusterId, ClusterId)> {
    let k = net.cluster_count();
    if k < 2 {
        return None;
    }
    for _ in 0..CONNECT_ATTEMPTS {
        let a = net.rng.random_range(0..k);
        let mut b = net.rng.random_range(0..k - 1);
        if b >= a {
            b += 1;
        }
        let (s, t) = connect_direction(net, a, b);
        if !net.has_connection(s, t) {
            return Some((s, t));
        }
    }
    None
}

/// `θ ·` mean Frobenius norm of the cluster's incoming connections.
pub fn prune_threshold(net: &Network, cluster: ClusterId, theta: f64) -> Result<Option<f64>> {
    net.cluster(cluster)?;
    let norms: Vec<f64> = net
        .connections()
        .filter(|c| c.target == cluster)
        .map(|c| c.strength())
        .collect();
    if norms.is_empty() {
        return Ok(None);
    }
    Ok(Some(theta * norms.iter().sum::<f64>() / norms.len() as f64))
}

/// Removes every connection whose norm is strictly below its target's
/// threshold. All thresholds are computed before anything is removed.
pub fn apply_prune(net: &mut Network, theta: f64) -> Vec<(ClusterId, ClusterId)> {
    let thresholds: Vec<(ClusterId, Option<f64>)> = net
        .clusters()
        .iter()
        .map(|c| (c.id, prune_threshold(net, c.id, theta).expect("cluster exists")))
        .collect();
    let doomed: Vec<(ClusterId, ClusterId)> = net
        .connections()
        .filter(|c| {
            let th = thresholds.iter().find(|(id, _)| *id == c.target).and_then(|(_, t)| *t);
            th.is_some_and(|th| c.strength() < th)
        })
        .map(|c| (c.source, c.target))
        .collect();
    for &(s, t) in &doomed {
        net.remove_connection(s, t).expect("listed connection exists");
    }
    doomed
}

pub fn sample_strategy<R: Rng + ?Sized>(cfg: &EvolutionConfig, rng: &mut R) -> Result<StrategyKind> {
    let dist = WeightedIndex::new(cfg.weights())
        .map_err(|e| Error::Config(format!("strategy probabilities: {e}")))?;
    Ok(StrategyKind::ALL[dist.sample(rng)])
}

fn try_strategy(net: &mut Network, cfg: &EvolutionConfig, kind: StrategyKind) -> Result<Option<EvolutionEvent>> {
    let before = net.parameter_count() as i64;
    let mut event = EvolutionEvent {
        kind,
        epoch: net.epoch,
        clusters: Vec::new(),
        connections: Vec::new(),
        param_delta: 0,
    };
    match kind {
        StrategyKind::Split => {
            let Some(id) = select_split_candidate(net, cfg.alpha) else {
                return Ok(None);
            };
            let child = net.split_cluster(id)?;
            event.clusters = vec![id, child];
            event.connections = net
                .connections()
                .filter(|c| c.target == child)
                .map(|c| (c.source, c.target))
                .collect();
        }
        StrategyKind::Grow => {
            let Some(id) = select_grow_candidate(net, cfg.beta) else {
                return Ok(None);
            };
            net.grow_cluster(id, cfg.growth_fraction)?;
            event.clusters = vec![id];
        }
        StrategyKind::Connect => {
            let Some((s, t)) = select_connect_pair(net) else {
                return Ok(None);
            };
            net.add_connection(s, t)?;
            event.clusters = vec![s, t];
            event.connections = vec![(s, t)];
        }
        StrategyKind::Prune => {
            let removed = apply_prune(net, cfg.theta);
            if removed.is_empty() {
                return Ok(None);
            }
            event.connections = removed;
        }
    }
    event.param_delta = net.parameter_count() as i64 - before;
    Ok(Some(event))
}

/// Samples a strategy and applies it. When the sampled strategy finds
/// nothing to do, the others are tried in split → grow → connect → prune
/// order (wrapping around), skipping any with zero weight.
pub fn evolution_step(net: &mut Network, cfg: &EvolutionConfig) -> Result<Option<EvolutionEvent>> {
    cfg.validate()?;
    let first = sample_strategy(cfg, &mut net.rng)?;
    let weights = cfg.weights();
    for offset in 0..StrategyKind::ALL.len() {
        let kind = StrategyKind::ALL[(first.index() + offset) % StrategyKind::ALL.len()];
        if weights[kind.index()] <= 0.0 {
            continue;
        }
        if let Some(event) = try_strategy(net, cfg, kind)? {
            return Ok(Some(event));
        }
    }
    Ok(None)
}

/// Counts epochs without improvement and fires once the count exceeds the
/// patience.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlateauDetector {
    pub best_loss: f64,
    pub epochs_since_improvement: u64,
    pub patience: u64,
    pub min_delta: f64,
}

impl PlateauDetector {
    pub fn new(patience: u64, min_delta: f64) -> Self {
        Self {
            best_loss: f64::INFINITY,
            epochs_since_improvement: 0,
            patience,
            min_delta,
        }
    }

    /// Feeds one epoch's loss; returns true when evolution should run.
    pub fn check(&mut self, loss: f64) -> bool {
        if loss < self.best_loss - self.min_delta {
            self.best_loss = loss;
            self.epochs_since_improvement = 0;
            return false;
        }
        self.epochs_since_improvement += 1;
        if self.epochs_since_improvement > self.patience {
            self.epochs_since_improvement = 0;
            return true;
        }
        false
    }
}
