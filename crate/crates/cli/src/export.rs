//! Structure documents, Graphviz output and encoder rasters.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use clusternet::topology::Network;

use crate::error::{CliError, CliResult};

pub const STRUCTURE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterEntry {
    pub id: u64,
    pub order_index: usize,
    pub n_neurons: usize,
    pub birth_epoch: u64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectionEntry {
    pub source: u64,
    pub target: u64,
    pub kind: String,
    pub frobenius_norm: f64,
    pub birth_epoch: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub params: usize,
    pub clusters: usize,
    pub connections: usize,
    pub depth: usize,
    pub max_in_degree: usize,
    pub cycles: usize,
    pub cycles_capped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureExport {
    pub version: u32,
    pub epoch: u64,
    pub clusters: Vec<ClusterEntry>,
    pub connections: Vec<ConnectionEntry>,
    pub summary: Summary,
}

impl StructureExport {
    pub fn of(net: &Network) -> Self {
        let s = net.summary();
        Self {
            version: STRUCTURE_VERSION,
            epoch: net.epoch,
            clusters: net
                .clusters()
                .iter()
                .map(|c| ClusterEntry {
                    id: c.id.0,
                    order_index: c.order_index,
                    n_neurons: c.neurons(),
                    birth_epoch: c.birth_epoch,
                    variance: c.variance,
                })
                .collect(),
            connections: net
                .connections()
                .map(|c| ConnectionEntry {
                    source: c.source.0,
                    target: c.target.0,
                    kind: net.connection_kind(c).as_str().to_string(),
                    frobenius_norm: c.strength(),
                    birth_epoch: c.birth_epoch,
                })
                .collect(),
            summary: Summary {
                params: s.parameters,
                clusters: s.clusters,
                connections: s.connections,
                depth: s.depth,
                max_in_degree: s.max_in_degree,
                cycles: s.cycles.count,
                cycles_capped: s.cycles.capped,
            },
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plain data serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> CliResult<Self> {
        let doc: Self = serde_json::from_str(text)?;
        if doc.version != STRUCTURE_VERSION {
            return Err(CliError::Data(format!("structure version {} is not supported", doc.version)));
        }
        Ok(doc)
    }
}

/// Directed graph with one node per cluster. Pen width is proportional to
/// each connection's Frobenius norm (the strongest edge gets width 4);
/// feedback edges are dashed.
pub fn to_dot(net: &Network) -> String {
    let mut out = String::from("digraph clusters {\n  rankdir=LR;\n  node [shape=circle];\n");
    for c in net.clusters() {
        let _ = writeln!(out, "  c{} [label=\"{}\\nn={}\"];", c.id, c.id, c.neurons());
    }
    let max = net.connections().map(|c| c.strength()).fold(0.0, f64::max);
    for c in net.connections() {
        let width = if max > 0.0 { 4.0 * c.strength() / max } else { 0.0 };
        let style = match net.connection_kind(c).as_str() {
            "feedback" => ", style=dashed",
            _ => "",
        };
        let _ = writeln!(out, "  c{} -> c{} [penwidth={width:.4}{style}];", c.source, c.target);
    }
    out.push_str("}\n");
    out
}

/// A grayscale image in plain (P2) PGM form.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderRaster {
    pub cluster: u64,
    pub side: usize,
    /// Row-major, 0–255.
    pub pixels: Vec<u8>,
}

impl EncoderRaster {
    pub fn to_pgm(&self) -> String {
        let mut out = format!("P2\n# cluster {}\n{} {}\n255\n", self.cluster, self.side, self.side);
        for row in self.pixels.chunks(self.side) {
            let line: Vec<String> = row.iter().map(u8::to_string).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Min-max normalization onto 0–255; a constant input maps to all zeros.
pub fn normalize_to_u8(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .map(|&v| {
            if hi > lo {
                ((v - lo) / (hi - lo) * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect()
}

/// One raster per encoder-bearing cluster: the encoder column with the
/// largest norm, reshaped to the `P × P` patch it reads.
pub fn encoder_rasters(net: &Network) -> CliResult<Vec<EncoderRaster>> {
    let dim = net.config.input_dim;
    let side = (dim as f64).sqrt().round() as usize;
    let mut out = Vec::new();
    for c in net.clusters() {
        let Some(enc) = &c.encoder else { continue };
        if side * side != dim {
            return Err(CliError::Data(format!("encoder input size {dim} is not a square patch")));
        }
        let w = &enc.weight.tensor;
        let column = |j: usize| (0..dim).map(|i| w.get(i, j)).collect::<Vec<f64>>();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        let best = (0..w.cols())
            .max_by(|&a, &b| norm(&column(a)).total_cmp(&norm(&column(b))).then(b.cmp(&a)))
            .expect("encoders have at least one column");
        out.push(EncoderRaster {
            cluster: c.id.0,
            side,
            pixels: normalize_to_u8(&column(best)),
        });
    }
    Ok(out)
}
