//! Byte-level text generation from a trained next-token network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use clusternet::data::{Batch, TokenBatch};
use clusternet::forward::forward_full;
use clusternet::topology::Network;

use crate::error::{CliError, CliResult};

/// Pads prompts shorter than the context on the left.
pub const PAD_BYTE: u8 = b' ';

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Prompt followed by the generated bytes.
    pub text: Vec<u8>,
    pub warning: Option<String>,
}

/// Number of input positions the network reads.
pub fn context_length(net: &Network) -> usize {
    net.clusters().iter().map(|c| c.patch_assignment + 1).max().unwrap_or(0)
}

fn softmax_sample(logits: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let mut u = rng.random::<f64>() * weights.iter().sum::<f64>();
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Appends `length` bytes. Each step feeds the last `L` bytes (left-padded
/// when shorter) and reads the prediction made at the final position.
/// Temperature 0 is greedy.
pub fn generate(net: &Network, prompt: &[u8], length: usize, temperature: f64, seed: u64) -> CliResult<Generation> {
    if !net.config.uses_shared_embedding() {
        return Err(CliError::Usage("generation needs a text-task checkpoint".into()));
    }
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(CliError::Usage("temperature must be a finite number ≥ 0".into()));
    }
    let l = context_length(net);
    let warning = (prompt.len() > l).then(|| {
        format!("prompt is {} bytes but the context is {l}; only the last {l} are used", prompt.len())
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = prompt.to_vec();
    for _ in 0..length {
        let tail = &text[text.len().saturating_sub(l)..];
        let mut window = vec![PAD_BYTE as usize; l - tail.len()];
        window.extend(tail.iter().map(|&b| b as usize));
        let trace = forward_full(net, &Batch::Text(TokenBatch::single(&window)))?;
        let row = trace
            .prediction
            .positions
            .iter()
            .position(|&p| p == l - 1)
            .ok_or_else(|| CliError::Data("no cluster reads the final position".into()))?;
        let logits = trace.logits().row(row);
        let next = if temperature == 0.0 {
            argmax(logits)
        } else {
            softmax_sample(logits, temperature, &mut rng)
        };
        text.push(next as u8);
    }
    Ok(Generation { text, warning })
}
