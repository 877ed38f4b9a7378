//! Versioned binary checkpoints.
//!
//! Layout: magic and version, then a manifest (configuration, RNG state,
//! loop state, clusters, connections, parameter shapes), then every
//! parameter's values and both AdamW moments as little-endian `f64` arrays
//! in manifest order. All integers are little-endian `u64` unless noted.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::autodiff::{AdamSlot, Parameter, Tensor};
use crate::error::{Error, Result};
use crate::evolution::PlateauDetector;
use crate::topology::{ClusterId, Connection, Linear, Network, NetworkConfig, NeuronCluster, TaskKind};
use crate::trainer::TrainerState;

pub const MAGIC: &[u8; 8] = b"CLNETCKP";
pub const VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn offset(&self) -> u64 {
        self.pos as u64
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.offset(), format!("file ends inside {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        let at = self.offset();
        usize::try_from(self.u64(what)?).map_err(|_| Error::format(at, format!("{what} overflows")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).unwrap_or(usize::MAX), what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn flag(&mut self, what: &str) -> Result<bool> {
        let at = self.offset();
        match self.u8(what)? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::format(at, format!("{what} flag is {b}"))),
        }
    }
}

pub fn encode_checkpoint(net: &Network, state: Option<&TrainerState>) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.0.extend_from_slice(&VERSION.to_le_bytes());

    let cfg = &net.config;
    w.u8(match cfg.task_kind {
        TaskKind::Classification => 0,
        TaskKind::NextToken => 1,
    });
    w.u64(cfg.d_hidden as u64);
    w.u64(cfg.input_dim as u64);
    w.u64(cfg.num_outputs as u64);
    w.u64(net.epoch);
    w.u64(net.next_cluster_id());
    w.u64(net.initial_cluster_count());

    w.0.extend_from_slice(&net.rng.get_seed());
    w.u64(net.rng.get_stream());
    w.0.extend_from_slice(&net.rng.get_word_pos().to_le_bytes());

    w.u8(u8::from(state.is_some()));
    if let Some(s) = state {
        w.f64(s.plateau.best_loss);
        w.u64(s.plateau.epochs_since_improvement);
        w.u64(s.plateau.patience);
        w.f64(s.plateau.min_delta);
        w.u64(s.events_so_far);
    }

    w.u64(net.cluster_count() as u64);
    for c in net.clusters() {
        w.u64(c.id.0);
        w.u64(c.patch_assignment as u64);
        w.u64(c.birth_epoch);
        w.f64(c.variance);
        w.u8(u8::from(c.encoder.is_some()));
        w.u64(c.neurons() as u64);
    }
    w.u64(net.connection_count() as u64);
    for c in net.connections() {
        w.u64(c.source.0);
        w.u64(c.target.0);
        w.u64(c.birth_epoch);
    }

    let params = net.parameters();
    w.u64(params.len() as u64);
    for (_, p) in &params {
        let (r, c) = p.shape();
        w.u64(r as u64);
        w.u64(c as u64);
        w.u64(p.slot.t);
    }
    for (_, p) in &params {
        w.f64s(p.tensor.data());
        w.f64s(&p.slot.m);
        w.f64s(&p.slot.v);
    }
    w.0
}

struct ClusterEntry {
    id: ClusterId,
    patch: usize,
    birth: u64,
    variance: f64,
    has_encoder: bool,
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Network, Option<TrainerState>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::format(0, "not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::format(8, format!("unsupported version {version}, expected {VERSION}")));
    }

    let at = r.offset();
    let task_kind = match r.u8("task kind")? {
        0 => TaskKind::Classification,
        1 => TaskKind::NextToken,
        b => return Err(Error::format(at, format!("unknown task kind {b}"))),
    };
    let config = NetworkConfig {
        d_hidden: r.usize("d_hidden")?,
        input_dim: r.usize("input dim")?,
        num_outputs: r.usize("output count")?,
        task_kind,
    };
    config
        .validate()
        .map_err(|e| Error::format(at, format!("configuration: {e}")))?;
    let epoch = r.u64("epoch")?;
    let next_id = r.u64("next id")?;
    let initial = r.u64("initial cluster count")?;

    let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().unwrap();
    let stream = r.u64("rng stream")?;
    let word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().unwrap());
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    let state = if r.flag("loop state")? {
        let best_loss = r.f64("best loss")?;
        let since = r.u64("plateau counter")?;
        let patience = r.u64("patience")?;
        let min_delta = r.f64("min delta")?;
        let events = r.u64("event count")?;
        Some(TrainerState {
            plateau: PlateauDetector {
                best_loss,
                epochs_since_improvement: since,
                patience,
                min_delta,
            },
            events_so_far: events,
        })
    } else {
        None
    };

    let k = r.usize("cluster count")?;
    let d = config.d_hidden;
    let mut entries = Vec::new();
    let mut expected: Vec<(usize, usize)> = Vec::new();
    if config.uses_shared_embedding() {
        expected.push((config.num_outputs, d));
    }
    for _ in 0..k {
        let id = ClusterId(r.u64("cluster id")?);
        let patch = r.usize("patch assignment")?;
        let birth = r.u64("birth epoch")?;
        let variance = r.f64("variance")?;
        let has_encoder = r.flag("encoder")?;
        let n = r.usize("neuron count")?;
        if has_encoder {
            expected.extend([(config.input_dim, d), (1, d)]);
        }
        expected.extend([(d, n), (1, n), (n, d), (1, d)]);
        entries.push(ClusterEntry {
            id,
            patch,
            birth,
            variance,
            has_encoder,
        });
    }
    let m = r.usize("connection count")?;
    let mut conn_meta = Vec::new();
    for _ in 0..m {
        let s = ClusterId(r.u64("connection source")?);
        let t = ClusterId(r.u64("connection target")?);
        conn_meta.push((s, t, r.u64("connection birth")?));
        expected.push((d, d));
    }
    expected.extend([(d, config.num_outputs), (1, config.num_outputs)]);

    let at = r.offset();
    let p = r.usize("parameter count")?;
    if p != expected.len() {
        return Err(Error::format(at, format!("{p} parameters listed, structure implies {}", expected.len())));
    }
    let mut shapes = Vec::with_capacity(p);
    for want in &expected {
        let at = r.offset();
        let shape = (r.usize("rows")?, r.usize("cols")?);
        if shape != *want {
            return Err(Error::format(at, format!("shape {shape:?} where {want:?} was expected")));
        }
        shapes.push((shape, r.u64("step count")?));
    }
    let mut params = Vec::with_capacity(p);
    for ((rows, cols), t) in shapes {
        let len = rows * cols;
        let data = r.f64s(len, "weights")?;
        let m = r.f64s(len, "first moments")?;
        let v = r.f64s(len, "second moments")?;
        params.push(Parameter {
            tensor: Tensor::from_vec(rows, cols, data)?.with_grad(),
            slot: AdamSlot { m, v, t },
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.offset(), "trailing bytes after parameter data"));
    }

    let mut it = params.into_iter();
    let mut next = || it.next().expect("count checked against manifest");
    let embedding = config.uses_shared_embedding().then(&mut next);
    let mut clusters = Vec::with_capacity(k);
    for (order_index, e) in entries.into_iter().enumerate() {
        let encoder = e.has_encoder.then(|| Linear {
            weight: next(),
            bias: next(),
        });
        let hidden = Linear {
            weight: next(),
            bias: next(),
        };
        let output = Linear {
            weight: next(),
            bias: next(),
        };
        clusters.push(NeuronCluster {
            id: e.id,
            order_index,
            encoder,
            hidden,
            output,
            patch_assignment: e.patch,
            birth_epoch: e.birth,
            variance: e.variance,
        });
    }
    let connections = conn_meta
        .into_iter()
        .map(|(source, target, birth_epoch)| Connection {
            source,
            target,
            weight: next(),
            birth_epoch,
        })
        .collect();
    let head = Linear {
        weight: next(),
        bias: next(),
    };
    let net = Network::from_parts(config, clusters, connections, embedding, head, rng, epoch, next_id, initial)
        .map_err(|e| Error::format(at, format!("inconsistent structure: {e}")))?;
    Ok((net, state))
}

pub fn save_checkpoint(path: &Path, net: &Network, state: Option<&TrainerState>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(net, state))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Network, Option<TrainerState>)> {
    decode_checkpoint(&std::fs::read(path)?)
}
