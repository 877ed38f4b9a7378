//! The structural organism: neuron clusters, directed inter-cluster
//! connections, the mutation primitives used by evolution, and graph
//! metrics over the connection set.
//!
//! Clusters are kept in traversal order: `clusters[k].order_index == k`.
//! A connection's kind is never stored; it is derived by comparing the
//! order indices of its endpoints, so appending clusters can never leave a
//! stale classification behind.

mod metrics;

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Parameter, Tensor};
use crate::error::{Error, Result};

pub use metrics::{CycleCount, NeuronStats, TopologySummary, CYCLE_ENUMERATION_CAP};

/// Scale applied to the init bound of neurons added by growth.
pub const GROWTH_INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClusterId(pub u64);

impl fmt::Display for ClusterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Classification,
    NextToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkConfig {
    pub d_hidden: usize,
    /// Flattened per-patch input size; 0 when a shared embedding is used.
    pub input_dim: usize,
    /// Number of classes, or vocabulary size for next-token prediction.
    pub num_outputs: usize,
    pub task_kind: TaskKind,
}

impl NetworkConfig {
    pub fn classification(d_hidden: usize, input_dim: usize, num_classes: usize) -> Self {
        Self {
            d_hidden,
            input_dim,
            num_outputs: num_classes,
            task_kind: TaskKind::Classification,
        }
    }

    pub fn next_token(d_hidden: usize, vocab_size: usize) -> Self {
        Self {
            d_hidden,
            input_dim: 0,
            num_outputs: vocab_size,
            task_kind: TaskKind::NextToken,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_hidden < 1 {
            return Err(Error::Config("d_hidden must be at least 1".into()));
        }
        if self.num_outputs < 2 {
            return Err(Error::Config("num_outputs must be at least 2".into()));
        }
        if self.task_kind == TaskKind::Classification && self.input_dim == 0 {
            return Err(Error::Config("classification needs input_dim > 0".into()));
        }
        Ok(())
    }

    pub fn uses_shared_embedding(&self) -> bool {
        self.task_kind == TaskKind::NextToken
    }
}

/// `x · weight + bias` with `weight: fan_in × fan_out`, `bias: 1 × fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    fn init(fan_in: usize, fan_out: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let bound = scale / (fan_in as f64).sqrt();
        Self {
            weight: Parameter::new(Tensor::uniform(fan_in, fan_out, bound, rng)),
            bias: Parameter::new(Tensor::uniform(1, fan_out, bound, rng)),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuronCluster {
    pub id: ClusterId,
    pub order_index: usize,
    /// Per-cluster input encoder; `None` when the shared embedding feeds it.
    pub encoder: Option<Linear>,
    /// d_hidden → n_j.
    pub hidden: Linear,
    /// n_j → d_hidden.
    pub output: Linear,
    /// Which patch (or token position) this cluster reads.
    pub patch_assignment: usize,
    pub birth_epoch: u64,
    pub variance: f64,
}

impl NeuronCluster {
    pub fn neurons(&self) -> usize {
        self.hidden.weight.shape().1
    }

    pub fn param_count(&self) -> usize {
        self.encoder.as_ref().map_or(0, Linear::param_count)
            + self.hidden.param_count()
            + self.output.param_count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Connection {
    pub source: ClusterId,
    pub target: ClusterId,
    /// d_hidden × d_hidden; the carried signal is `f_source · weight`.
    pub weight: Parameter,
    pub birth_epoch: u64,
}

impl Connection {
    pub fn strength(&self) -> f64 {
        self.weight.tensor.frobenius_norm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConnectionKind {
    Feedforward,
    Feedback,
}

impl ConnectionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ConnectionKind::Feedforward => "feedforward",
            ConnectionKind::Feedback => "feedback",
        }
    }
}

/// Names a single parameter tensor inside a [`Network`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamRef {
    EncoderWeight(ClusterId),
    EncoderBias(ClusterId),
    HiddenWeight(ClusterId),
    HiddenBias(ClusterId),
    OutputWeight(ClusterId),
    OutputBias(ClusterId),
    Connection(ClusterId, ClusterId),
    Embedding,
    HeadWeight,
    HeadBias,
}

impl fmt::Display for ParamRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamRef::EncoderWeight(c) => write!(f, "cluster[{c}].encoder.weight"),
            ParamRef::EncoderBias(c) => write!(f, "cluster[{c}].encoder.bias"),
            ParamRef::HiddenWeight(c) => write!(f, "cluster[{c}].hidden.weight"),
            ParamRef::HiddenBias(c) => write!(f, "cluster[{c}].hidden.bias"),
            ParamRef::OutputWeight(c) => write!(f, "cluster[{c}].output.weight"),
            ParamRef::OutputBias(c) => write!(f, "cluster[{c}].output.bias"),
            ParamRef::Connection(s, t) => write!(f, "connection[{s}->{t}].weight"),
            ParamRef::Embedding => write!(f, "embedding"),
            ParamRef::HeadWeight => write!(f, "head.weight"),
            ParamRef::HeadBias => write!(f, "head.bias"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    pub config: NetworkConfig,
    clusters: Vec<NeuronCluster>,
    connections: BTreeMap<(ClusterId, ClusterId), Connection>,
    pub embedding: Option<Parameter>,
    pub head: Linear,
    pub rng: ChaCha8Rng,
    pub epoch: u64,
    next_id: u64,
    initial_clusters: u64,
}

impl Network {
    /// Builds `num_initial_clusters` clusters with `n_j = d_hidden` and no
    /// connections. Every weight is drawn uniform in ±1/√fan_in.
    pub fn new(config: NetworkConfig, num_initial_clusters: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if num_initial_clusters < 1 {
            return Err(Error::Config("need at least one cluster".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_hidden;
        let embedding = config
            .uses_shared_embedding()
            .then(|| Parameter::new(Tensor::uniform(config.num_outputs, d, 1.0, &mut rng)));
        let mut clusters = Vec::with_capacity(num_initial_clusters);
        for k in 0..num_initial_clusters {
            let encoder = (!config.uses_shared_embedding())
                .then(|| Linear::init(config.input_dim, d, 1.0, &mut rng));
            clusters.push(NeuronCluster {
                id: ClusterId(k as u64),
                order_index: k,
                encoder,
                hidden: Linear::init(d, d, 1.0, &mut rng),
                output: Linear::init(d, d, 1.0, &mut rng),
                patch_assignment: k,
                birth_epoch: 0,
                variance: 0.0,
            });
        }
        let head = Linear::init(d, config.num_outputs, 1.0, &mut rng);
        Ok(Self {
            config,
            clusters,
            connections: BTreeMap::new(),
            embedding,
            head,
            rng,
            epoch: 0,
            next_id: num_initial_clusters as u64,
            initial_clusters: num_initial_clusters as u64,
        })
    }

    /// Reassembles a network from stored parts, checking every structural
    /// invariant.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        config: NetworkConfig,
        clusters: Vec<NeuronCluster>,
        connections: Vec<Connection>,
        embedding: Option<Parameter>,
        head: Linear,
        rng: ChaCha8Rng,
        epoch: u64,
        next_id: u64,
        initial_clusters: u64,
    ) -> Result<Self> {
        config.validate()?;
        let connections = connections
            .into_iter()
            .map(|c| ((c.source, c.target), c))
            .collect();
        let net = Self {
            config,
            clusters,
            connections,
            embedding,
            head,
            rng,
            epoch,
            next_id,
            initial_clusters,
        };
        net.check_invariants()?;
        Ok(net)
    }

    pub fn clusters(&self) -> &[NeuronCluster] {
        &self.clusters
    }

    pub fn cluster(&self, id: ClusterId) -> Result<&NeuronCluster> {
        self.clusters
            .iter()
            .find(|c| c.id == id)
            .ok_or(Error::UnknownCluster(id))
    }

    pub fn cluster_mut(&mut self, id: ClusterId) -> Result<&mut NeuronCluster> {
        self.clusters
            .iter_mut()
            .find(|c| c.id == id)
            .ok_or(Error::UnknownCluster(id))
    }

    pub fn order_of(&self, id: ClusterId) -> Result<usize> {
        self.cluster(id).map(|c| c.order_index)
    }

    pub fn cluster_count(&self) -> usize {
        self.clusters.len()
    }

    pub fn connection_count(&self) -> usize {
        self.connections.len()
    }

    pub fn connections(&self) -> impl Iterator<Item = &Connection> {
        self.connections.values()
    }

    pub fn connection(&self, source: ClusterId, target: ClusterId) -> Option<&Connection> {
        self.connections.get(&(source, target))
    }

    pub fn connection_mut(&mut self, source: ClusterId, target: ClusterId) -> Option<&mut Connection> {
        self.connections.get_mut(&(source, target))
    }

    pub fn has_connection(&self, source: ClusterId, target: ClusterId) -> bool {
        self.connections.contains_key(&(source, target))
    }

    /// Connections arriving at `target`, in ascending source order index.
    pub fn incoming(&self, target: ClusterId) -> Vec<&Connection> {
        let mut v: Vec<&Connection> = self
            .connections
            .values()
            .filter(|c| c.target == target)
            .collect();
        v.sort_by_key(|c| self.order_of(c.source).unwrap_or(usize::MAX));
        v
    }

    pub fn connection_kind(&self, conn: &Connection) -> ConnectionKind {
        let s = self.order_of(conn.source).expect("endpoint exists");
        let t = self.order_of(conn.target).expect("endpoint exists");
        if s < t {
            ConnectionKind::Feedforward
        } else {
            ConnectionKind::Feedback
        }
    }

    pub fn is_initial(&self, id: ClusterId) -> bool {
        id.0 < self.initial_clusters
    }

    pub fn initial_cluster_count(&self) -> u64 {
        self.initial_clusters
    }

    pub fn next_cluster_id(&self) -> u64 {
        self.next_id
    }

    pub fn total_neurons(&self) -> usize {
        self.clusters.iter().map(NeuronCluster::neurons).sum()
    }

    /// Exact number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.clusters.iter().map(NeuronCluster::param_count).sum::<usize>()
            + self.connections.values().map(|c| c.weight.len()).sum::<usize>()
            + self.embedding.as_ref().map_or(0, Parameter::len)
            + self.head.param_count()
    }

    /// Every parameter tensor, in a fixed order.
    pub fn parameters(&self) -> Vec<(ParamRef, &Parameter)> {
        let mut out = Vec::new();
        if let Some(e) = &self.embedding {
            out.push((ParamRef::Embedding, e));
        }
        for c in &self.clusters {
            if let Some(enc) = &c.encoder {
                out.push((ParamRef::EncoderWeight(c.id), &enc.weight));
                out.push((ParamRef::EncoderBias(c.id), &enc.bias));
            }
            out.push((ParamRef::HiddenWeight(c.id), &c.hidden.weight));
            out.push((ParamRef::HiddenBias(c.id), &c.hidden.bias));
            out.push((ParamRef::OutputWeight(c.id), &c.output.weight));
            out.push((ParamRef::OutputBias(c.id), &c.output.bias));
        }
        for conn in self.connections.values() {
            out.push((ParamRef::Connection(conn.source, conn.target), &conn.weight));
        }
        out.push((ParamRef::HeadWeight, &self.head.weight));
        out.push((ParamRef::HeadBias, &self.head.bias));
        out
    }

    /// Mutable counterpart of [`Network::parameters`], same order.
    pub fn parameters_mut(&mut self) -> Vec<(ParamRef, &mut Parameter)> {
        let mut out = Vec::new();
        if let Some(e) = &mut self.embedding {
            out.push((ParamRef::Embedding, e));
        }
        for c in &mut self.clusters {
            if let Some(enc) = &mut c.encoder {
                out.push((ParamRef::EncoderWeight(c.id), &mut enc.weight));
                out.push((ParamRef::EncoderBias(c.id), &mut enc.bias));
            }
            out.push((ParamRef::HiddenWeight(c.id), &mut c.hidden.weight));
            out.push((ParamRef::HiddenBias(c.id), &mut c.hidden.bias));
            out.push((ParamRef::OutputWeight(c.id), &mut c.output.weight));
            out.push((ParamRef::OutputBias(c.id), &mut c.output.bias));
        }
        for conn in self.connections.values_mut() {
            out.push((ParamRef::Connection(conn.source, conn.target), &mut conn.weight));
        }
        out.push((ParamRef::HeadWeight, &mut self.head.weight));
        out.push((ParamRef::HeadBias, &mut self.head.bias));
        out
    }

    pub fn parameter_mut(&mut self, which: ParamRef) -> Option<&mut Parameter> {
        match which {
            ParamRef::Embedding => self.embedding.as_mut(),
            ParamRef::HeadWeight => Some(&mut self.head.weight),
            ParamRef::HeadBias => Some(&mut self.head.bias),
            ParamRef::Connection(s, t) => self.connection_mut(s, t).map(|c| &mut c.weight),
            ParamRef::EncoderWeight(id) => self.cluster_mut(id).ok()?.encoder.as_mut().map(|e| &mut e.weight),
            ParamRef::EncoderBias(id) => self.cluster_mut(id).ok()?.encoder.as_mut().map(|e| &mut e.bias),
            ParamRef::HiddenWeight(id) => self.cluster_mut(id).ok().map(|c| &mut c.hidden.weight),
            ParamRef::HiddenBias(id) => self.cluster_mut(id).ok().map(|c| &mut c.hidden.bias),
            ParamRef::OutputWeight(id) => self.cluster_mut(id).ok().map(|c| &mut c.output.weight),
            ParamRef::OutputBias(id) => self.cluster_mut(id).ok().map(|c| &mut c.output.bias),
        }
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.parameters_mut() {
            p.tensor.zero_grad();
        }
    }

    fn fresh_encoder(&mut self) -> Option<Linear> {
        let (shared, fan_in, d) = (
            self.config.uses_shared_embedding(),
            self.config.input_dim,
            self.config.d_hidden,
        );
        (!shared).then(|| Linear::init(fan_in, d, 1.0, &mut self.rng))
    }

    /// Splits a cluster in two. The parent keeps the first ⌈n/2⌉ neurons;
    /// the child, appended last in traversal order, takes the rest verbatim,
    /// gets a freshly initialized encoder over the same patch, and inherits
    /// deep copies of the parent's incoming connections. Both halves keep a
    /// copy of the second-stage bias, which is indexed by channel rather than
    /// by neuron.
    pub fn split_cluster(&mut self, id: ClusterId) -> Result<ClusterId> {
        let parent = self.cluster(id)?;
        let n = parent.neurons();
        if n < 2 {
            return Err(Error::TooSmall { id, neurons: n });
        }
        let keep = n.div_ceil(2);
        let child_hidden = Linear {
            weight: parent.hidden.weight.columns(keep, n).fresh_copy(),
            bias: parent.hidden.bias.columns(keep, n).fresh_copy(),
        };
        let child_output = Linear {
            weight: parent.output.weight.rows(keep, n).fresh_copy(),
            bias: parent.output.bias.fresh_copy(),
        };
        let patch = parent.patch_assignment;

        let parent = self.cluster_mut(id)?;
        parent.hidden.weight = parent.hidden.weight.columns(0, keep);
        parent.hidden.bias = parent.hidden.bias.columns(0, keep);
        parent.output.weight = parent.output.weight.rows(0, keep);

        let encoder = self.fresh_encoder();
        let child_id = ClusterId(self.next_id);
        self.next_id += 1;
        self.clusters.push(NeuronCluster {
            id: child_id,
            order_index: self.clusters.len(),
            encoder,
            hidden: child_hidden,
            output: child_output,
            patch_assignment: patch,
            birth_epoch: self.epoch,
            variance: 0.0,
        });

        let inherited: Vec<Connection> = self
            .connections
            .values()
            .filter(|c| c.target == id)
            .map(|c| Connection {
                source: c.source,
                target: child_id,
                weight: c.weight.fresh_copy(),
                birth_epoch: self.epoch,
            })
            .collect();
        for c in inherited {
            self.connections.insert((c.source, c.target), c);
        }
        Ok(child_id)
    }

    /// Number of neurons `grow_cluster` adds for a cluster of size `n`.
    pub fn growth_amount(n: usize, fraction: f64) -> usize {
        ((fraction * n as f64).round() as usize).max(1)
    }

    /// Adds `max(1, round(fraction·n))` neurons. Existing weights are kept
    /// bit for bit; new ones start at a tenth of the usual init scale.
    pub fn grow_cluster(&mut self, id: ClusterId, fraction: f64) -> Result<usize> {
        let d = self.config.d_hidden;
        let n = self.cluster(id)?.neurons();
        let added = Self::growth_amount(n, fraction);
        let new_n = n + added;
        let in_bound = GROWTH_INIT_SCALE / (d as f64).sqrt();
        let out_bound = GROWTH_INIT_SCALE / (new_n as f64).sqrt();
        let w1 = Tensor::uniform(d, added, in_bound, &mut self.rng);
        let b1 = Tensor::uniform(1, added, in_bound, &mut self.rng);
        let w2 = Tensor::uniform(added, d, out_bound, &mut self.rng);
        let cluster = self.cluster_mut(id)?;
        cluster.hidden.weight.append_columns(&w1)?;
        cluster.hidden.bias.append_columns(&b1)?;
        cluster.output.weight.append_rows(&w2)?;
        Ok(new_n)
    }

    /// Creates `source → target` with fresh weights in ±1/√d_hidden.
    pub fn add_connection(&mut self, source: ClusterId, target: ClusterId) -> Result<&Connection> {
        if source == target {
            return Err(Error::Contract(format!("self-loop on cluster {source}")));
        }
        self.cluster(source)?;
        self.cluster(target)?;
        if self.has_connection(source, target) {
            return Err(Error::ConnectionExists(source, target));
        }
        let d = self.config.d_hidden;
        let bound = 1.0 / (d as f64).sqrt();
        let weight = Parameter::new(Tensor::uniform(d, d, bound, &mut self.rng));
        let conn = Connection {
            source,
            target,
            weight,
            birth_epoch: self.epoch,
        };
        Ok(self.connections.entry((source, target)).or_insert(conn))
    }

    pub fn remove_connection(&mut self, source: ClusterId, target: ClusterId) -> Result<Connection> {
        self.connections
            .remove(&(source, target))
            .ok_or(Error::MissingConnection(source, target))
    }

    /// Deletes a cluster and every connection touching it, then compacts the
    /// traversal order. Only ablations use this.
    pub fn remove_cluster(&mut self, id: ClusterId) -> Result<NeuronCluster> {
        let pos = self.order_of(id)?;
        let removed = self.clusters.remove(pos);
        for (k, c) in self.clusters.iter_mut().enumerate() {
            c.order_index = k;
        }
        self.connections
            .retain(|&(s, t), _| s != id && t != id);
        Ok(removed)
    }

    pub fn clear_connections(&mut self) {
        self.connections.clear();
    }

    /// Verifies the structural invariants; used after loading and in tests.
    pub fn check_invariants(&self) -> Result<()> {
        let d = self.config.d_hidden;
        if self.clusters.is_empty() {
            return Err(Error::Contract("network has no clusters".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for (k, c) in self.clusters.iter().enumerate() {
            if c.order_index != k {
                return Err(Error::Contract(format!(
                    "cluster {} has order_index {} at position {k}",
                    c.id, c.order_index
                )));
            }
            if !seen.insert(c.id) {
                return Err(Error::Contract(format!("duplicate cluster id {}", c.id)));
            }
            if c.id.0 >= self.next_id {
                return Err(Error::Contract(format!("cluster id {} not yet allocated", c.id)));
            }
            let n = c.neurons();
            let shapes_ok = n >= 1
                && c.hidden.weight.shape() == (d, n)
                && c.hidden.bias.shape() == (1, n)
                && c.output.weight.shape() == (n, d)
                && c.output.bias.shape() == (1, d);
            if !shapes_ok {
                return Err(Error::Contract(format!("cluster {} has inconsistent shapes", c.id)));
            }
            match (&c.encoder, self.config.uses_shared_embedding()) {
                (Some(e), false)
                    if e.weight.shape() == (self.config.input_dim, d) && e.bias.shape() == (1, d) => {}
                (None, true) => {}
                _ => {
                    return Err(Error::Contract(format!("cluster {} has a bad encoder", c.id)));
                }
            }
            if !(c.variance >= 0.0) {
                return Err(Error::Contract(format!("cluster {} has negative variance", c.id)));
            }
        }
        for (&(s, t), conn) in &self.connections {
            if s == t || conn.source != s || conn.target != t {
                return Err(Error::Contract(format!("malformed connection {s} -> {t}")));
            }
            if !seen.contains(&s) || !seen.contains(&t) {
                return Err(Error::Contract(format!("dangling connection {s} -> {t}")));
            }
            if conn.weight.shape() != (d, d) {
                return Err(Error::Contract(format!("connection {s} -> {t} is not {d}x{d}")));
            }
        }
        match (&self.embedding, self.config.uses_shared_embedding()) {
            (Some(e), true) if e.shape() == (self.config.num_outputs, d) => {}
            (None, false) => {}
            _ => return Err(Error::Contract("embedding does not match task".into())),
        }
        if self.head.weight.shape() != (d, self.config.num_outputs)
            || self.head.bias.shape() != (1, self.config.num_outputs)
        {
            return Err(Error::Contract("output head has the wrong shape".into()));
        }
        Ok(())
    }
}
