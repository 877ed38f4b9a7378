//! Analytic gradients against central differences on tiny networks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use clusternet::autodiff::Tensor;
use clusternet::data::{Batch, PatchedImageBatch};
use clusternet::forward::forward_full;
use clusternet::topology::{ClusterId, Network, NetworkConfig, ParamRef};

use crate::error::{CliError, CliResult};

pub const MAX_CLUSTERS: usize = 6;
pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor, so entries whose gradient is essentially zero are
/// judged by absolute error.
pub const REL_FLOOR: f64 = 1e-6;

const INPUT_DIM: usize = 3;
const CLASSES: usize = 3;
const BATCH: usize = 4;

/// Parses `"0>1,1>0"` into ordered pairs; `""` and `"none"` mean no edges.
pub fn parse_connections(spec: &str) -> CliResult<Vec<(u64, u64)>> {
    let spec = spec.trim();
    if spec.is_empty() || spec == "none" {
        return Ok(Vec::new());
    }
    spec.split(',')
        .map(|pair| {
            let (s, t) = pair
                .split_once('>')
                .ok_or_else(|| CliError::Usage(format!("connection `{pair}` is not of the form a>b")))?;
            let parse = |x: &str| {
                x.trim()
                    .parse::<u64>()
                    .map_err(|_| CliError::Usage(format!("bad cluster index in `{pair}`")))
            };
            Ok((parse(s)?, parse(t)?))
        })
        .collect()
}

pub fn build_case(d_hidden: usize, clusters: usize, edges: &[(u64, u64)], seed: u64) -> CliResult<(Network, Batch)> {
    if clusters == 0 || clusters > MAX_CLUSTERS {
        return Err(CliError::Usage(format!("--clusters must be in 1..={MAX_CLUSTERS}")));
    }
    if d_hidden == 0 || d_hidden > 8 {
        return Err(CliError::Usage("--d-hidden must be in 1..=8 for gradient checks".into()));
    }
    let mut net = Network::new(NetworkConfig::classification(d_hidden, INPUT_DIM, CLASSES), clusters, seed)?;
    for &(s, t) in edges {
        if s as usize >= clusters || t as usize >= clusters {
            return Err(CliError::Usage(format!("connection {s}>{t} names a missing cluster")));
        }
        net.add_connection(ClusterId(s), ClusterId(t))
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let patches = (0..clusters)
        .map(|_| {
            let data = (0..BATCH * INPUT_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
            Tensor::from_vec(BATCH, INPUT_DIM, data)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let labels = (0..BATCH).map(|_| rng.random_range(0..CLASSES)).collect();
    Ok((net, Batch::Image(PatchedImageBatch { patches, labels })))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub params: Vec<ParamCheck>,
}

impl GradReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn max_rel_err(&self) -> f64 {
        self.worst().map_or(0.0, |p| p.max_rel_err)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= TOLERANCE
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for p in &self.params {
            out += &format!("{:<28} {:>5} entries  max rel err {:.3e}\n", p.name, p.entries, p.max_rel_err);
        }
        match self.worst() {
            Some(w) if !self.passed() => {
                out += &format!("FAIL: {} has relative error {:.3e} > {TOLERANCE:e}\n", w.name, w.max_rel_err)
            }
            _ => out += &format!("PASS: max relative error {:.3e}\n", self.max_rel_err()),
        }
        out
    }
}

fn loss_of(net: &Network, batch: &Batch) -> CliResult<f64> {
    let mut trace = forward_full(net, batch)?;
    let loss = trace.loss(batch)?;
    Ok(trace.graph.tape.value(loss).get(0, 0))
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares every parameter entry. `tamper` sees each analytic gradient
/// before comparison; the real command passes a no-op.
pub fn check_gradients(
    net: &Network,
    batch: &Batch,
    tamper: &dyn Fn(ParamRef, &mut Tensor),
) -> CliResult<GradReport> {
    let mut trace = forward_full(net, batch)?;
    let loss = trace.loss(batch)?;
    let grads = trace.gradients(loss)?;
    let mut params = Vec::new();
    for &(which, var) in trace.graph.bindings() {
        let mut analytic = grads.wrt(var);
        tamper(which, &mut analytic);
        let mut probe = net.clone();
        let mut worst: f64 = 0.0;
        for i in 0..analytic.len() {
            let original = probe.parameter_mut(which).expect("bound parameter exists").tensor.data()[i];
            let mut at = |v: f64| -> CliResult<f64> {
                probe.parameter_mut(which).unwrap().tensor.data_mut()[i] = v;
                loss_of(&probe, batch)
            };
            let plus = at(original + STEP)?;
            let minus = at(original - STEP)?;
            probe.parameter_mut(which).unwrap().tensor.data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
        params.push(ParamCheck {
            name: which.to_string(),
            entries: analytic.len(),
            max_rel_err: worst,
        });
    }
    Ok(GradReport { params })
}
