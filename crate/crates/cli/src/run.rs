//! Training runs and ablations: task data, network construction and the
//! files a run leaves behind.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use clusternet::autodiff::AdamW;
use clusternet::checkpoint::{load_checkpoint, save_checkpoint};
use clusternet::data::{
    extract_patches, load_cifar_binary, load_text, split_indices, synthetic_patch_xor, Batch, Images, BYTE_VOCAB,
};
use clusternet::evolution::{EvolutionConfig, EvolutionEvent};
use clusternet::topology::{ClusterId, Network, NetworkConfig};
use clusternet::trainer::{
    apply_ablation, evaluate, performance_gap, train, AblationMode, EvalMetrics, MetricsRecord, TrainConfig,
    TrainObserver, TrainerState, CSV_HEADER,
};

use crate::error::{CliError, CliResult};
use crate::export::StructureExport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Image,
    Text,
    Xor,
}

/// Everything needed to rebuild a run's data and network; saved as
/// `run.json` next to the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub task: Task,
    pub data: Option<PathBuf>,
    pub d_hidden: usize,
    pub seed: u64,
    pub epochs: u64,
    pub batch_size: usize,
    /// `None` disables evolution.
    pub patience: Option<u64>,
    pub min_delta: f64,
    pub probs: [f64; 4],
    pub split_enabled: bool,
    pub init_dense_connections: bool,
    pub eval_interval: u64,
    pub eval_fraction: f64,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    /// Image patch side.
    pub patch_size: usize,
    /// Text context length, which is also the cluster count.
    pub context: usize,
    pub xor_samples: usize,
    pub xor_patches: usize,
    pub xor_patch_dim: usize,
    pub xor_noise: f64,
}

impl RunSpec {
    pub fn new(task: Task) -> Self {
        Self {
            task,
            data: None,
            d_hidden: 16,
            seed: 0,
            epochs: 20,
            batch_size: 64,
            patience: Some(10),
            min_delta: 1e-4,
            probs: [0.25, 0.25, 0.35, 0.15],
            split_enabled: true,
            init_dense_connections: false,
            eval_interval: 1,
            eval_fraction: 0.1,
            lr: None,
            weight_decay: None,
            patch_size: 16,
            context: 8,
            xor_samples: 4096,
            xor_patches: 4,
            xor_patch_dim: 4,
            xor_noise: 0.2,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut optimizer = match self.task {
            Task::Text => AdamW::text(),
            _ => AdamW::image(),
        };
        if let Some(lr) = self.lr {
            optimizer.lr = lr;
        }
        if let Some(wd) = self.weight_decay {
            optimizer.weight_decay = wd;
        }
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer,
            seed: self.seed,
            eval_interval: self.eval_interval,
            evolution: EvolutionConfig {
                patience: self.patience.unwrap_or(u64::MAX),
                min_delta: self.min_delta,
                split_enabled: self.split_enabled,
                ..EvolutionConfig::default()
            }
            .with_probabilities(self.probs),
            ablation_mode: AblationMode::None,
        }
    }
}

pub struct TaskData {
    pub train: Batch,
    /// Absent for the synthetic task, which is judged on its training set.
    pub eval: Option<Batch>,
    pub config: NetworkConfig,
    pub clusters: usize,
}

impl TaskData {
    pub fn eval_set(&self) -> &Batch {
        self.eval.as_ref().unwrap_or(&self.train)
    }
}

fn load_images(path: &Path) -> CliResult<(Images, Vec<usize>)> {
    if !path.is_dir() {
        return Ok(load_cifar_binary(path)?);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
        .collect();
    files.sort();
    let mut all: Option<(Images, Vec<usize>)> = None;
    for f in files {
        let (imgs, labels) = load_cifar_binary(&f)?;
        all = Some(match all {
            None => (imgs, labels),
            Some((mut acc, mut acc_labels)) => {
                acc.count += imgs.count;
                acc.pixels.extend(imgs.pixels);
                acc_labels.extend(labels);
                (acc, acc_labels)
            }
        });
    }
    all.ok_or_else(|| CliError::Data(format!("no .bin files in {}", path.display())))
}

pub fn load_task_data(spec: &RunSpec) -> CliResult<TaskData> {
    let need_path = || {
        spec.data
            .clone()
            .ok_or_else(|| CliError::Usage(format!("--data is required for the {:?} task", spec.task).to_lowercase()))
    };
    let split = |n: usize| split_indices(n, spec.eval_fraction, spec.seed);
    match spec.task {
        Task::Xor => {
            let data = synthetic_patch_xor(
                spec.xor_samples,
                spec.xor_patches,
                spec.xor_patch_dim,
                spec.xor_noise,
                spec.seed,
            )?;
            Ok(TaskData {
                train: Batch::Image(data),
                eval: None,
                config: NetworkConfig::classification(spec.d_hidden, spec.xor_patch_dim, 2),
                clusters: spec.xor_patches,
            })
        }
        Task::Image => {
            let (images, labels) = load_images(&need_path()?)?;
            let patched = extract_patches(&images, &labels, spec.patch_size)?;
            let clusters = patched.patches.len();
            let (tr, ev) = split(patched.len());
            Ok(TaskData {
                train: Batch::Image(patched.select(&tr)),
                eval: (!ev.is_empty()).then(|| Batch::Image(patched.select(&ev))),
                config: NetworkConfig::classification(spec.d_hidden, spec.patch_size * spec.patch_size, 10),
                clusters,
            })
        }
        Task::Text => {
            let tokens = load_text(&need_path()?, spec.context)?;
            let (tr, ev) = split(tokens.len());
            Ok(TaskData {
                train: Batch::Text(tokens.select(&tr)),
                eval: (!ev.is_empty()).then(|| Batch::Text(tokens.select(&ev))),
                config: NetworkConfig::next_token(spec.d_hidden, BYTE_VOCAB),
                clusters: spec.context,
            })
        }
    }
}

/// Adjacent clusters joined in both directions, plus each remaining ordered
/// pair with probability `long_range`.
pub fn init_dense_connections(net: &mut Network, long_range: f64) -> CliResult<()> {
    let ids: Vec<ClusterId> = net.clusters().iter().map(|c| c.id).collect();
    for w in ids.windows(2) {
        net.add_connection(w[0], w[1])?;
        net.add_connection(w[1], w[0])?;
    }
    for (i, &s) in ids.iter().enumerate() {
        for (j, &t) in ids.iter().enumerate() {
            if i.abs_diff(j) > 1 && net.rng.random_bool(long_range) {
                net.add_connection(s, t)?;
            }
        }
    }
    Ok(())
}

pub fn build_network(spec: &RunSpec, data: &TaskData) -> CliResult<Network> {
    let mut net = Network::new(data.config, data.clusters, spec.seed)?;
    if spec.init_dense_connections {
        init_dense_connections(&mut net, 0.25)?;
    }
    Ok(net)
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const RUN_FILE: &str = "run.json";

/// Writes metrics, checkpoint and structure after every record.
struct RunFiles {
    dir: PathBuf,
    csv: BufWriter<File>,
    events: BufWriter<File>,
}

impl TrainObserver for RunFiles {
    fn on_record(&mut self, net: &Network, state: &TrainerState, record: &MetricsRecord) -> clusternet::Result<()> {
        writeln!(self.csv, "{}", record.csv_row())?;
        self.csv.flush()?;
        save_checkpoint(&self.dir.join(CHECKPOINT_FILE), net, Some(state))?;
        fs::write(self.dir.join("structure.json"), StructureExport::of(net).to_json())?;
        Ok(())
    }

    fn on_event(&mut self, _net: &Network, e: &EvolutionEvent) {
        let ids: Vec<String> = e.clusters.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(
            self.events,
            "epoch {} {} clusters=[{}] connections={} params{:+}",
            e.epoch,
            e.kind,
            ids.join(","),
            e.connections.len(),
            e.param_delta
        );
    }
}

pub struct TrainOutcome {
    pub network: Network,
    pub history: Vec<MetricsRecord>,
}

/// Runs a full training job, writing `metrics.csv`, `checkpoint.bin`,
/// `structure.json`, `events.log` and `run.json` into `out`.
pub fn run_training(spec: &RunSpec, out: &Path) -> CliResult<TrainOutcome> {
    let cfg = spec.train_config();
    cfg.validate()?;
    let data = load_task_data(spec)?;
    let mut net = build_network(spec, &data)?;
    fs::create_dir_all(out)?;
    fs::write(out.join(RUN_FILE), serde_json::to_string_pretty(spec)? + "\n")?;
    let mut csv = BufWriter::new(File::create(out.join("metrics.csv"))?);
    writeln!(csv, "{CSV_HEADER}")?;
    let mut files = RunFiles {
        dir: out.to_path_buf(),
        csv,
        events: BufWriter::new(File::create(out.join("events.log"))?),
    };
    let mut state = TrainerState::new(&cfg.evolution);
    let result = train(&mut net, &data.train, data.eval.as_ref(), &cfg, &mut state, &mut files);
    files.events.flush()?;
    let history = result?;
    Ok(TrainOutcome { network: net, history })
}

pub fn read_run_spec(path: &Path) -> CliResult<RunSpec> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// `run.json` beside a checkpoint, unless one is given explicitly.
pub fn spec_for_checkpoint(checkpoint: &Path, run: Option<&Path>) -> CliResult<RunSpec> {
    match run {
        Some(p) => read_run_spec(p),
        None => {
            let dir = checkpoint.parent().unwrap_or(Path::new("."));
            read_run_spec(&dir.join(RUN_FILE))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub mode: AblationMode,
    pub pre: EvalMetrics,
    pub post: EvalMetrics,
    pub clusters: (usize, usize),
    pub connections: (usize, usize),
}

impl AblationReport {
    pub fn top1_gap(&self) -> f64 {
        performance_gap(self.pre.top1, self.post.top1)
    }

    pub fn render(&self) -> String {
        let line = |tag: &str, m: &EvalMetrics, k: usize, c: usize| {
            let mut s = format!(
                "{tag}: clusters={k} connections={c} loss={:.6} top1={:.4} top3={:.4} top5={:.4}",
                m.loss, m.top1, m.top3, m.top5
            );
            if let Some(p) = m.perplexity {
                s += &format!(" ppl={p:.4}");
            }
            s
        };
        let mut out = format!("mode: {}\n", self.mode.as_str());
        out += &line("pre", &self.pre, self.clusters.0, self.connections.0);
        out.push('\n');
        out += &line("post", &self.post, self.clusters.1, self.connections.1);
        out += &format!("\ngap_top1: {:.2}%\n", self.top1_gap());
        if let (Some(a), Some(b)) = (self.pre.perplexity, self.post.perplexity) {
            out += &format!("gap_ppl: {:.2}%\n", performance_gap(a, b));
        }
        out
    }
}

pub fn ablate_network(net: &mut Network, data: &TaskData, mode: AblationMode, batch_size: usize) -> CliResult<AblationReport> {
    let pre = evaluate(net, data.eval_set(), batch_size)?;
    let before = (net.cluster_count(), net.connection_count());
    apply_ablation(net, mode)?;
    let post = evaluate(net, data.eval_set(), batch_size)?;
    Ok(AblationReport {
        mode,
        pre,
        post,
        clusters: (before.0, net.cluster_count()),
        connections: (before.1, net.connection_count()),
    })
}

pub fn run_ablation(checkpoint: &Path, run: Option<&Path>, mode: AblationMode) -> CliResult<AblationReport> {
    let spec = spec_for_checkpoint(checkpoint, run)?;
    let (mut net, _) = load_checkpoint(checkpoint)?;
    let data = load_task_data(&spec)?;
    ablate_network(&mut net, &data, mode, spec.batch_size)
}
