//! Training loop: AdamW on cross-entropy, per-batch variance statistics,
//! plateau-triggered evolution, evaluation metrics and ablations.

use std::fmt::Write as _;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::autodiff::AdamW;
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::evolution::{evolution_step, update_variance, EvolutionConfig, EvolutionEvent, PlateauDetector};
use crate::forward::forward_full;
use crate::topology::{ClusterId, Network};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AblationMode {
    #[default]
    None,
    /// Case C: every connection removed.
    DropAllConnections,
    /// Case A: evolved clusters and every connection removed.
    KeepInitialOnly,
    /// Case B: evolved clusters and anything touching them removed.
    KeepInitialAndTheirConnections,
}

impl AblationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::None => "none",
            AblationMode::DropAllConnections => "drop_all_connections",
            AblationMode::KeepInitialOnly => "keep_initial_only",
            AblationMode::KeepInitialAndTheirConnections => "keep_initial_and_their_connections",
        }
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    /// Accepts the long names and the case letters `A`, `B`, `C`.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => AblationMode::None,
            "C" | "c" | "drop_all_connections" => AblationMode::DropAllConnections,
            "A" | "a" | "keep_initial_only" => AblationMode::KeepInitialOnly,
            "B" | "b" | "keep_initial_and_their_connections" => AblationMode::KeepInitialAndTheirConnections,
            other => return Err(Error::Config(format!("unknown ablation mode `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    /// Total epochs; a resumed network continues from `net.epoch`.
    pub epochs: u64,
    pub batch_size: usize,
    pub optimizer: AdamW,
    pub seed: u64,
    pub eval_interval: u64,
    pub evolution: EvolutionConfig,
    pub ablation_mode: AblationMode,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.batch_size < 1 || self.eval_interval < 1 {
            return Err(Error::Config("epochs, batch size and eval interval must be ≥ 1".into()));
        }
        self.evolution.validate()
    }
}

/// Evaluation-only metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    pub top1: f64,
    pub top3: f64,
    pub top5: f64,
    /// Only for next-token tasks.
    pub perplexity: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRecord {
    pub epoch: u64,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub top1: f64,
    pub top3: f64,
    pub top5: f64,
    pub perplexity: Option<f64>,
    pub parameter_count: usize,
    pub cluster_count: usize,
    pub connection_count: usize,
    pub topological_depth: usize,
    pub max_in_degree: usize,
    pub cycle_count: usize,
    pub events_so_far: u64,
}

pub const CSV_HEADER: &str = "epoch,train_loss,eval_loss,top1,top3,top5,perplexity,parameter_count,\
cluster_count,connection_count,topological_depth,max_in_degree,cycle_count,events_so_far";

impl MetricsRecord {
    pub fn new(net: &Network, train_loss: f64, eval: EvalMetrics, events_so_far: u64) -> Self {
        let s = net.summary();
        Self {
            epoch: net.epoch,
            train_loss,
            eval_loss: eval.loss,
            top1: eval.top1,
            top3: eval.top3,
            top5: eval.top5,
            perplexity: eval.perplexity,
            parameter_count: s.parameters,
            cluster_count: s.clusters,
            connection_count: s.connections,
            topological_depth: s.depth,
            max_in_degree: s.max_in_degree,
            cycle_count: s.cycles.count,
            events_so_far,
        }
    }

    pub fn csv_row(&self) -> String {
        let mut row = format!(
            "{},{},{},{},{},{},",
            self.epoch, self.train_loss, self.eval_loss, self.top1, self.top3, self.top5
        );
        if let Some(p) = self.perplexity {
            let _ = write!(row, "{p}");
        }
        let _ = write!(
            row,
            ",{},{},{},{},{},{},{}",
            self.parameter_count,
            self.cluster_count,
            self.connection_count,
            self.topological_depth,
            self.max_in_degree,
            self.cycle_count,
            self.events_so_far
        );
        row
    }
}

pub fn write_metrics_csv<W: Write>(out: &mut W, records: &[MetricsRecord]) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in records {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Loop state that must survive a checkpoint for resumed runs to match.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub plateau: PlateauDetector,
    pub events_so_far: u64,
}

impl TrainerState {
    pub fn new(cfg: &EvolutionConfig) -> Self {
        Self {
            plateau: PlateauDetector::new(cfg.patience, cfg.min_delta),
            events_so_far: 0,
        }
    }
}

/// Hooks invoked by [`train`]. Both default to doing nothing.
pub trait TrainObserver {
    fn on_record(&mut self, _net: &Network, _state: &TrainerState, _record: &MetricsRecord) -> Result<()> {
        Ok(())
    }
    fn on_event(&mut self, _net: &Network, _event: &EvolutionEvent) {}
}

impl TrainObserver for () {}

fn check_task(net: &Network, batch: &Batch) -> Result<()> {
    let ok = matches!(
        (net.config.uses_shared_embedding(), batch),
        (false, Batch::Image(_)) | (true, Batch::Text(_))
    );
    if !ok {
        return Err(Error::Config("data kind does not match the network's task".into()));
    }
    if batch.is_empty() {
        return Err(Error::InsufficientData("empty training set".into()));
    }
    Ok(())
}

/// One AdamW step on a mini-batch; returns the batch loss.
pub fn train_step(net: &mut Network, batch: &Batch, opt: &AdamW, ema_decay: f64) -> Result<f64> {
    let mut trace = forward_full(net, batch)?;
    let loss = trace.loss(batch)?;
    let value = trace.graph.tape.value(loss).get(0, 0);
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss is {value}")));
    }
    trace.backward_into(net, loss)?;
    for (_, p) in net.parameters_mut() {
        opt.step(p)?;
    }
    update_variance(net, &trace.hidden_activations(), ema_decay)?;
    Ok(value)
}

/// Trains until `net.epoch == cfg.epochs`. Mini-batches are shuffled with
/// the network's own generator, so a checkpointed network resumes exactly.
/// Metrics are evaluated on `eval` (or the training set) every
/// `eval_interval` epochs and after the last one.
pub fn train(
    net: &mut Network,
    data: &Batch,
    eval: Option<&Batch>,
    cfg: &TrainConfig,
    state: &mut TrainerState,
    observer: &mut dyn TrainObserver,
) -> Result<Vec<MetricsRecord>> {
    cfg.validate()?;
    check_task(net, data)?;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    while net.epoch < cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut net.rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.select(chunk);
            let loss = train_step(net, &batch, &cfg.optimizer, cfg.evolution.variance_ema_decay)
                .map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!("epoch {}: {m}", net.epoch + 1)),
                    other => other,
                })?;
            total += loss * chunk.len() as f64;
        }
        net.epoch += 1;
        let train_loss = total / data.len() as f64;

        if state.plateau.check(train_loss) {
            if let Some(event) = evolution_step(net, &cfg.evolution)? {
                state.events_so_far += 1;
                observer.on_event(net, &event);
            }
        }

        let last = net.epoch == cfg.epochs;
        if last && cfg.ablation_mode != AblationMode::None {
            apply_ablation(net, cfg.ablation_mode)?;
        }
        if net.epoch % cfg.eval_interval == 0 || last {
            let metrics = evaluate(net, eval.unwrap_or(data), cfg.batch_size)?;
            let record = MetricsRecord::new(net, train_loss, metrics, state.events_so_far);
            observer.on_record(net, state, &record)?;
            history.push(record);
        }
    }
    Ok(history)
}

/// Number of logits strictly above the true class's logit.
fn rank_of(row: &[f64], target: usize) -> usize {
    let t = row[target];
    row.iter().filter(|&&v| v > t).count()
}

/// Gradient-free pass over `data` in chunks of `batch_size`.
pub fn evaluate(net: &Network, data: &Batch, batch_size: usize) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(Error::InsufficientData("empty evaluation set".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let (mut loss_sum, mut rows) = (0.0, 0usize);
    let mut hits = [0usize; 3];
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = data.select(chunk);
        let mut trace = forward_full(net, &batch)?;
        let targets = trace.targets(&batch)?;
        let loss = trace.loss(&batch)?;
        loss_sum += trace.graph.tape.value(loss).get(0, 0) * targets.len() as f64;
        rows += targets.len();
        let logits = trace.logits();
        for (r, &t) in targets.iter().enumerate() {
            let rank = rank_of(logits.row(r), t);
            for (h, k) in hits.iter_mut().zip([1, 3, 5]) {
                *h += usize::from(rank < k);
            }
        }
    }
    let loss = loss_sum / rows as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("evaluation loss is {loss}")));
    }
    let frac = |h: usize| h as f64 / rows as f64;
    Ok(EvalMetrics {
        loss,
        top1: frac(hits[0]),
        top3: frac(hits[1]),
        top5: frac(hits[2]),
        perplexity: matches!(data, Batch::Text(_)).then(|| loss.exp()),
    })
}

pub fn apply_ablation(net: &mut Network, mode: AblationMode) -> Result<()> {
    let evolved: Vec<ClusterId> = net
        .clusters()
        .iter()
        .map(|c| c.id)
        .filter(|&id| !net.is_initial(id))
        .collect();
    match mode {
        AblationMode::None => {}
        AblationMode::DropAllConnections => net.clear_connections(),
        AblationMode::KeepInitialOnly => {
            for id in evolved {
                net.remove_cluster(id)?;
            }
            net.clear_connections();
        }
        AblationMode::KeepInitialAndTheirConnections => {
            for id in evolved {
                net.remove_cluster(id)?;
            }
        }
    }
    Ok(())
}

/// `(post − pre) / pre × 100`; negative means the ablation hurt.
pub fn performance_gap(pre: f64, post: f64) -> f64 {
    (post - pre) / pre * 100.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_patch_xor;
    use crate::topology::NetworkConfig;

    fn xor_setup(seed: u64) -> (Network, Batch) {
        let data = synthetic_patch_xor(64, 2, 3, 0.1, seed).unwrap();
        let net = Network::new(NetworkConfig::classification(4, 3, 2), 2, seed).unwrap();
        (net, Batch::Image(data))
    }

    fn cfg(epochs: u64, patience: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            optimizer: AdamW::image(),
            seed: 0,
            eval_interval: 1,
            evolution: EvolutionConfig {
                patience,
                ..EvolutionConfig::default()
            },
            ablation_mode: AblationMode::None,
        }
    }

    #[test]
    fn infinite_patience_keeps_topology() {
        let (mut net, data) = xor_setup(1);
        let before = net.summary();
        let c = cfg(6, u64::MAX);
        let mut st = TrainerState::new(&c.evolution);
        let hist = train(&mut net, &data, None, &c, &mut st, &mut ()).unwrap();
        assert_eq!(hist.len(), 6);
        assert_eq!(st.events_so_far, 0);
        let after = net.summary();
        assert_eq!((before.parameters, before.clusters, before.connections), (after.parameters, after.clusters, after.connections));
    }

    #[test]
    fn zero_patience_evolves_and_repeats() {
        let run = || {
            let (mut net, data) = xor_setup(2);
            // a frozen optimizer guarantees a plateau every epoch
            let mut c = cfg(8, 0);
            c.optimizer.lr = 0.0;
            c.optimizer.weight_decay = 0.0;
            let mut st = TrainerState::new(&c.evolution);
            train(&mut net, &data, None, &c, &mut st, &mut ()).unwrap()
        };
        let a = run();
        assert!(a.last().unwrap().events_so_far > 0);
        assert_eq!(a, run());
    }

    #[test]
    fn records_match_topology_queries() {
        let (mut net, data) = xor_setup(3);
        let mut c = cfg(4, 0);
        c.optimizer.lr = 0.0;
        let mut st = TrainerState::new(&c.evolution);
        let rec = *train(&mut net, &data, None, &c, &mut st, &mut ()).unwrap().last().unwrap();
        assert_eq!(rec.parameter_count, net.parameter_count());
        assert_eq!(rec.cycle_count, net.count_cycles().count);
        assert_eq!(rec.topological_depth, net.topological_depth());
        assert!(rec.top1 <= rec.top3 && rec.top3 <= rec.top5);
        assert_eq!(rec.perplexity, None);
    }

    #[test]
    fn loss_decreases_on_a_fixed_batch_for_most_seeds() {
        let mut ok = 0;
        for seed in 0..20 {
            let (mut net, data) = xor_setup(100 + seed);
            let opt = AdamW::image();
            let losses: Vec<f64> = (0..5).map(|_| train_step(&mut net, &data, &opt, 0.9).unwrap()).collect();
            ok += usize::from(losses.windows(2).all(|w| w[1] < w[0]));
        }
        assert!(ok >= 18, "{ok}/20");
    }

    #[test]
    fn top_k_ranks() {
        let row = [0.1, 0.5, 0.3, 0.5, -1.0, 0.2];
        assert_eq!(rank_of(&row, 1), 0);
        assert_eq!(rank_of(&row, 2), 2);
        assert_eq!(rank_of(&row, 4), 5);
    }

    #[test]
    fn uniform_logits_sit_at_chance() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let n = 100_000;
        let mut hits = [0usize; 2];
        for _ in 0..n {
            let row: Vec<f64> = (0..10).map(|_| rng.random::<f64>()).collect();
            let t = rng.random_range(0..10);
            let r = rank_of(&row, t);
            hits[0] += usize::from(r < 1);
            hits[1] += usize::from(r < 5);
        }
        assert!((hits[0] as f64 / n as f64 - 0.1).abs() < 0.005);
        assert!((hits[1] as f64 / n as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn ablation_cases() {
        let mut net = Network::new(NetworkConfig::classification(4, 3, 2), 3, 0).unwrap();
        let un_evolved = net.clone();
        let mut a = net.clone();
        apply_ablation(&mut a, AblationMode::KeepInitialOnly).unwrap();
        assert_eq!(a.summary(), un_evolved.summary());

        net.add_connection(ClusterId(0), ClusterId(1)).unwrap();
        net.add_connection(ClusterId(2), ClusterId(0)).unwrap();
        let child = net.split_cluster(ClusterId(1)).unwrap();
        net.add_connection(child, ClusterId(2)).unwrap();

        let mut c = net.clone();
        apply_ablation(&mut c, AblationMode::DropAllConnections).unwrap();
        assert_eq!((c.connection_count(), c.cluster_count()), (0, 4));

        let mut b = net.clone();
        apply_ablation(&mut b, AblationMode::KeepInitialAndTheirConnections).unwrap();
        assert_eq!(b.cluster_count(), 3);
        let kept: Vec<_> = b.connections().map(|c| (c.source.0, c.target.0)).collect();
        assert_eq!(kept, vec![(0, 1), (2, 0)]);

        let mut a = net;
        apply_ablation(&mut a, AblationMode::KeepInitialOnly).unwrap();
        assert_eq!((a.connection_count(), a.cluster_count()), (0, 3));
    }

    #[test]
    fn gap_sign_convention() {
        assert_eq!(performance_gap(0.8, 0.4), -50.0);
        assert_eq!(performance_gap(0.5, 0.5), 0.0);
        assert_eq!("C".parse::<AblationMode>().unwrap(), AblationMode::DropAllConnections);
        assert!("D".parse::<AblationMode>().is_err());
    }
}
