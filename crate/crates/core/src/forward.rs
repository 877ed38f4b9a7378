//! Two-pass forward propagation.
//!
//! Pass 1 visits clusters in ascending order and feeds each one the mean of
//! its own encoding and the transformed Pass-1 outputs of its feedforward
//! sources. Pass 2 revisits them, feeding each the mean of the Pass-2 outputs
//! of feedforward sources that already produced one and the Pass-1 outputs
//! of its feedback sources; a cluster with neither produces no Pass-2 output.
//! All outputs are then averaged and read out by a linear head.
//!
//! Connection signals use the row convention `f · W`.

use std::collections::HashMap;

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::topology::{ClusterId, Network, ParamRef, TaskKind};

/// A tape plus the leaf variable bound to each network parameter.
pub struct Graph {
    pub tape: Tape,
    bindings: Vec<(ParamRef, Var)>,
    lookup: HashMap<ParamRef, Var>,
}

impl Graph {
    /// Records every parameter of `net` as a differentiable leaf.
    pub fn bind(net: &Network) -> Self {
        let mut tape = Tape::new();
        let bindings: Vec<(ParamRef, Var)> = net
            .parameters()
            .into_iter()
            .map(|(r, p)| (r, tape.param(&p.tensor)))
            .collect();
        let lookup = bindings.iter().copied().collect();
        Self {
            tape,
            bindings,
            lookup,
        }
    }

    pub fn var(&self, which: ParamRef) -> Var {
        self.lookup[&which]
    }

    pub fn bindings(&self) -> &[(ParamRef, Var)] {
        &self.bindings
    }
}

/// Per-cluster encodings `e_j`, indexed by order.
#[derive(Debug, Clone)]
pub struct EncodedInputs {
    pub e: Vec<Var>,
}

/// Pass outputs indexed by order. `f_re[j]` is `None` when cluster `j` had
/// no valid Pass-2 input.
#[derive(Debug, Clone)]
pub struct PassOutputs {
    pub f: Vec<Var>,
    pub f_re: Vec<Option<Var>>,
    /// Hidden-stage activations (B × n_j) from Pass 1.
    pub hidden: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    /// Classification: the single integrated output. Next-token: one mean
    /// output per position listed in `positions`.
    pub outputs: Vec<Var>,
    /// Classification: B × classes. Next-token: (positions·B) × vocab,
    /// position-major.
    pub logits: Var,
    /// Token positions with at least one cluster (next-token only).
    pub positions: Vec<usize>,
}

/// Incoming sources per cluster, split by kind, ascending by order.
struct Wiring {
    feedforward: Vec<Vec<(usize, ParamRef)>>,
    feedback: Vec<Vec<(usize, ParamRef)>>,
}

impl Wiring {
    fn of(net: &Network) -> Self {
        let order: HashMap<ClusterId, usize> = net
            .clusters()
            .iter()
            .map(|c| (c.id, c.order_index))
            .collect();
        let k = net.cluster_count();
        let mut feedforward = vec![Vec::new(); k];
        let mut feedback = vec![Vec::new(); k];
        for conn in net.connections() {
            let (s, t) = (order[&conn.source], order[&conn.target]);
            let r = ParamRef::Connection(conn.source, conn.target);
            if s < t {
                feedforward[t].push((s, r));
            } else {
                feedback[t].push((s, r));
            }
        }
        for list in feedforward.iter_mut().chain(feedback.iter_mut()) {
            list.sort_by_key(|&(s, _)| s);
        }
        Self {
            feedforward,
            feedback,
        }
    }
}

fn neuron_layer(net: &Network, g: &mut Graph, order: usize, x: Var) -> Result<(Var, Var)> {
    let id = net.clusters()[order].id;
    let (w1, b1) = (g.var(ParamRef::HiddenWeight(id)), g.var(ParamRef::HiddenBias(id)));
    let (w2, b2) = (g.var(ParamRef::OutputWeight(id)), g.var(ParamRef::OutputBias(id)));
    let z = g.tape.linear(x, w1, b1)?;
    let h = g.tape.tanh(z);
    let z = g.tape.linear(h, w2, b2)?;
    Ok((h, g.tape.tanh(z)))
}

/// `e_j = σ(Linear_j(flatten(x_j)))`, or `σ(embedding[token_j])` when the
/// embedding is shared.
pub fn encode_all(net: &Network, g: &mut Graph, batch: &Batch) -> Result<EncodedInputs> {
    let mut e = Vec::with_capacity(net.cluster_count());
    match (batch, net.config.task_kind) {
        (Batch::Image(images), TaskKind::Classification) => {
            for c in net.clusters() {
                let patch = images.patches.get(c.patch_assignment).ok_or_else(|| {
                    Error::Dimension(format!(
                        "cluster {} reads patch {} of {}",
                        c.id,
                        c.patch_assignment,
                        images.patches.len()
                    ))
                })?;
                if patch.cols() != net.config.input_dim {
                    return Err(Error::Dimension(format!(
                        "patch of length {} for encoders expecting {}",
                        patch.cols(),
                        net.config.input_dim
                    )));
                }
                let x = g.tape.input(patch.clone());
                let w = g.var(ParamRef::EncoderWeight(c.id));
                let b = g.var(ParamRef::EncoderBias(c.id));
                let z = g.tape.linear(x, w, b)?;
                e.push(g.tape.tanh(z));
            }
        }
        (Batch::Text(tokens), TaskKind::NextToken) => {
            let table = g.var(ParamRef::Embedding);
            for c in net.clusters() {
                if c.patch_assignment >= tokens.context {
                    return Err(Error::Dimension(format!(
                        "cluster {} reads position {} of a {}-token context",
                        c.id, c.patch_assignment, tokens.context
                    )));
                }
                let ids = tokens.column(c.patch_assignment);
                let z = g.tape.gather_rows(table, &ids)?;
                e.push(g.tape.tanh(z));
            }
        }
        _ => {
            return Err(Error::Contract(
                "batch kind does not match the network's task".into(),
            ))
        }
    }
    Ok(EncodedInputs { e })
}

/// `f_j = NL_j(mean(e_j, W f_i for feedforward sources i))`.
pub fn pass1(net: &Network, g: &mut Graph, enc: &EncodedInputs) -> Result<PassOutputs> {
    let wiring = Wiring::of(net);
    pass1_with(net, g, enc, &wiring)
}

fn pass1_with(net: &Network, g: &mut Graph, enc: &EncodedInputs, wiring: &Wiring) -> Result<PassOutputs> {
    let k = net.cluster_count();
    let mut f: Vec<Var> = Vec::with_capacity(k);
    let mut hidden = Vec::with_capacity(k);
    for j in 0..k {
        let mut terms = vec![enc.e[j]];
        for &(i, r) in &wiring.feedforward[j] {
            assert!(i < j, "feedforward source must precede its target");
            let w = g.var(r);
            terms.push(g.tape.matmul(f[i], w)?);
        }
        let x = g.tape.mean_of(&terms)?;
        let (h, out) = neuron_layer(net, g, j, x)?;
        hidden.push(h);
        f.push(out);
    }
    Ok(PassOutputs {
        f,
        f_re: vec![None; k],
        hidden,
    })
}

/// Fills `f_re`: valid feedforward sources contribute their Pass-2 output,
/// feedback sources their Pass-1 output.
pub fn pass2(net: &Network, g: &mut Graph, p1: PassOutputs) -> Result<PassOutputs> {
    let wiring = Wiring::of(net);
    pass2_with(net, g, p1, &wiring)
}

fn pass2_with(net: &Network, g: &mut Graph, p1: PassOutputs, wiring: &Wiring) -> Result<PassOutputs> {
    let k = net.cluster_count();
    let mut f_re: Vec<Option<Var>> = vec![None; k];
    for j in 0..k {
        let mut terms = Vec::new();
        for &(i, r) in &wiring.feedforward[j] {
            assert!(i < j, "Pass-2 may only read outputs computed earlier in the pass");
            if let Some(src) = f_re[i] {
                let w = g.var(r);
                terms.push(g.tape.matmul(src, w)?);
            }
        }
        for &(s, r) in &wiring.feedback[j] {
            let w = g.var(r);
            terms.push(g.tape.matmul(p1.f[s], w)?);
        }
        if terms.is_empty() {
            continue;
        }
        let x = g.tape.mean_of(&terms)?;
        let (_, out) = neuron_layer(net, g, j, x)?;
        f_re[j] = Some(out);
    }
    Ok(PassOutputs { f_re, ..p1 })
}

/// Flat mean of every valid output, then the linear head. For next-token
/// prediction the mean is taken per token position instead.
pub fn integrate(net: &Network, g: &mut Graph, p: &PassOutputs) -> Result<Prediction> {
    let (hw, hb) = (g.var(ParamRef::HeadWeight), g.var(ParamRef::HeadBias));
    let members = |j: usize| std::iter::once(p.f[j]).chain(p.f_re[j]);
    match net.config.task_kind {
        TaskKind::Classification => {
            let all: Vec<Var> = (0..net.cluster_count()).flat_map(members).collect();
            let o_bar = g.tape.mean_of(&all)?;
            let logits = g.tape.linear(o_bar, hw, hb)?;
            Ok(Prediction {
                outputs: vec![o_bar],
                logits,
                positions: Vec::new(),
            })
        }
        TaskKind::NextToken => {
            let mut by_position: std::collections::BTreeMap<usize, Vec<Var>> = Default::default();
            for (j, c) in net.clusters().iter().enumerate() {
                by_position.entry(c.patch_assignment).or_default().extend(members(j));
            }
            let mut outputs = Vec::with_capacity(by_position.len());
            let mut positions = Vec::with_capacity(by_position.len());
            for (pos, vars) in by_position {
                outputs.push(g.tape.mean_of(&vars)?);
                positions.push(pos);
            }
            let stacked = g.tape.stack_rows(&outputs)?;
            let logits = g.tape.linear(stacked, hw, hb)?;
            Ok(Prediction {
                outputs,
                logits,
                positions,
            })
        }
    }
}

/// Everything recorded by one forward call.
pub struct ForwardTrace {
    pub graph: Graph,
    pub encoded: EncodedInputs,
    pub passes: PassOutputs,
    pub prediction: Prediction,
}

/// encode → Pass 1 → Pass 2 → integrate, on one tape.
pub fn forward_full(net: &Network, batch: &Batch) -> Result<ForwardTrace> {
    let mut graph = Graph::bind(net);
    let wiring = Wiring::of(net);
    let encoded = encode_all(net, &mut graph, batch)?;
    let p1 = pass1_with(net, &mut graph, &encoded, &wiring)?;
    let passes = pass2_with(net, &mut graph, p1, &wiring)?;
    let prediction = integrate(net, &mut graph, &passes)?;
    Ok(ForwardTrace {
        graph,
        encoded,
        passes,
        prediction,
    })
}

impl ForwardTrace {
    pub fn logits(&self) -> &Tensor {
        self.graph.tape.value(self.prediction.logits)
    }

    /// Target class for each logits row.
    pub fn targets(&self, batch: &Batch) -> Result<Vec<usize>> {
        match batch {
            Batch::Image(images) => Ok(images.labels.clone()),
            Batch::Text(tokens) => {
                let mut t = Vec::with_capacity(self.prediction.positions.len() * tokens.batch);
                for &pos in &self.prediction.positions {
                    t.extend(tokens.target_column(pos));
                }
                Ok(t)
            }
        }
    }

    /// Mean cross-entropy over every logits row.
    pub fn loss(&mut self, batch: &Batch) -> Result<Var> {
        let targets = self.targets(batch)?;
        self.graph
            .tape
            .cross_entropy(self.prediction.logits, &targets)
    }

    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        self.graph.tape.backward(loss)
    }

    /// Backpropagates `loss` and adds each parameter's gradient into the
    /// matching tensor of `net`.
    pub fn backward_into(&self, net: &mut Network, loss: Var) -> Result<()> {
        let grads = self.gradients(loss)?;
        for &(r, v) in self.graph.bindings() {
            let g = grads.wrt(v);
            let p = net
                .parameter_mut(r)
                .ok_or_else(|| Error::Contract(format!("{r} vanished during backward")))?;
            p.tensor.accumulate_grad(g.data())?;
        }
        Ok(())
    }

    /// Pass-1 hidden-stage activations, by order index.
    pub fn hidden_activations(&self) -> Vec<&Tensor> {
        self.passes
            .hidden
            .iter()
            .map(|&v| self.graph.tape.value(v))
            .collect()
    }
}

#[cfg(test)]
mod tests;
