use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;

use crate::data::{dirichlet_partition, load_idx_split, synth_split, Dataset, Split};
use crate::energy::{energy_report, EnergyConstants, EnergyReport};
use crate::error::{Error, Result};
use crate::federation::{
    cluster_clients, run_round_with, ClientState, FederationStrategy, RoundContext, RoundMetrics, ServerState,
    StrategyRegistry, TrainingSettings,
};
use crate::rng::derive_seed;
use crate::snn::{RateAccumulator, SpikingNetwork};

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::{DatasetKind, ExperimentConfig, DATA_ROOT_ENV};
use super::metrics::{MetricsSink, METRICS_HEADER};

const DATA_STREAM: u64 = 0xDA7A;
const PARTITION_STREAM: u64 = 0x9A27;

pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.sfhf";

/// Test samples used by the untrained energy estimate.
const ENERGY_PROBE: usize = 64;

fn load_data(config: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let d = &config.dataset;
    let (train, test) = match d.kind {
        DatasetKind::Synthetic => synth_split(&d.synth_spec(), derive_seed(config.seed, DATA_STREAM))?,
        DatasetKind::Idx => {
            let root = std::env::var_os(DATA_ROOT_ENV)
                .map(PathBuf::from)
                .or_else(|| d.root.clone())
                .ok_or_else(|| Error::config("dataset.root", "no dataset root configured"))?;
            let train = load_idx_split(&root, Split::Train, d.classes)?;
            let test = load_idx_split(&root, Split::Test, d.classes)?;
            let want = [d.channels, d.height, d.width];
            if train.image_shape() != want || test.image_shape() != want {
                return Err(Error::config(
                    "dataset.height",
                    format!("files hold {:?} images, config says {want:?}", train.image_shape()),
                ));
            }
            (train, test)
        }
    };
    let train = match d.train_limit {
        Some(n) => train.truncated(n)?,
        None => train,
    };
    let test = match d.test_limit {
        Some(n) => test.truncated(n)?,
        None => test,
    };
    Ok((train, test))
}

/// A configured federation: data, partition and clients, ready to run.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub train: Dataset,
    pub test: Dataset,
    pub clients: Vec<ClientState>,
    pub warnings: Vec<String>,
    pub training: TrainingSettings,
    strategy: Arc<dyn FederationStrategy>,
}

impl Experiment {
    pub fn prepare(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let strategy = StrategyRegistry::with_defaults()
            .get(&config.mode)
            .map_err(|e| Error::config("mode", e.to_string()))?;
        let (train, test) = load_data(config)?;
        let partition = dirichlet_partition(
            &train.labels,
            config.partition.clients,
            config.partition.mode(),
            derive_seed(config.seed, PARTITION_STREAM),
        )?;
        let scales = &config.federation.scales;
        let clustering = cluster_clients(&config.resources(), scales)?;
        let clients = partition
            .shards
            .iter()
            .enumerate()
            .map(|(i, shard)| {
                let s = clustering.assignment[i];
                ClientState::new(i, s, scales[s], shard.clone(), config.seed)
            })
            .collect();
        let mut warnings = partition.warnings;
        warnings.extend(clustering.warnings);
        Ok(Self {
            config: config.clone(),
            train,
            test,
            clients,
            warnings,
            training: config.training_settings(),
            strategy,
        })
    }

    pub fn strategy(&self) -> &dyn FederationStrategy {
        self.strategy.as_ref()
    }

    pub fn initial_server(&self) -> Result<ServerState> {
        let c = &self.config;
        ServerState::init(
            &c.architecture()?,
            &c.federation.scales,
            self.strategy.parameterization(),
            &c.federation.tucker_ranks,
            c.tucker_modes(),
            c.federation.participation,
            c.seed,
        )
    }

    pub fn context(&self) -> RoundContext<'_> {
        RoundContext {
            clients: &self.clients,
            train: &self.train,
            test: &self.test,
            training: &self.training,
            workers: self.config.workers,
        }
    }

    pub fn run_round(&self, server: &mut ServerState) -> Result<RoundMetrics> {
        run_round_with(self.strategy.as_ref(), server, &self.context())
    }

    /// Energy of every scale's freshly initialized model, with rates measured
    /// on the first test samples.
    pub fn initial_energy(&self) -> Result<Vec<EnergyReport>> {
        let server = self.initial_server()?;
        let n = self.test.len().min(ENERGY_PROBE);
        (0..server.models.len())
            .map(|s| {
                let plan = server.plan(s)?;
                let net = SpikingNetwork::new(
                    plan.clone(),
                    server.client_params(s)?,
                    self.training.lif,
                    self.training.time_steps,
                )?;
                let mut acc = RateAccumulator::default();
                for i in 0..n {
                    acc.add(&net.forward_image(self.test.image(i))?.1);
                }
                energy_report(&plan, &acc.report()?, &EnergyConstants::default())
            })
            .collect()
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
}

#[derive(Debug)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub metrics: Vec<RoundMetrics>,
    pub server: ServerState,
    pub config_hash: [u8; 32],
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize)]
struct Manifest<'a> {
    run: RunInfo<'a>,
    config: &'a ExperimentConfig,
}

#[derive(Serialize)]
struct RunInfo<'a> {
    version: &'a str,
    mode: &'a str,
    seed: u64,
    config_hash: String,
    rounds: usize,
    start_round: usize,
    train_samples: usize,
    test_samples: usize,
    client_seeds: Vec<String>,
    client_scales: Vec<f64>,
    shard_sizes: Vec<usize>,
    warnings: &'a [String],
}

fn write_manifest(exp: &Experiment, path: &Path, hash: &[u8; 32], start_round: usize) -> Result<()> {
    let manifest = Manifest {
        run: RunInfo {
            version: env!("CARGO_PKG_VERSION"),
            mode: &exp.config.mode,
            seed: exp.config.seed,
            config_hash: hex(hash),
            rounds: exp.config.rounds,
            start_round,
            train_samples: exp.train.len(),
            test_samples: exp.test.len(),
            client_seeds: exp.clients.iter().map(|c| format!("{:016x}", c.seed)).collect(),
            client_scales: exp.clients.iter().map(|c| c.scale).collect(),
            shard_sizes: exp.clients.iter().map(|c| c.indices.len()).collect(),
            warnings: &exp.warnings,
        },
        config: &exp.config,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    fs::write(path, text)?;
    Ok(())
}

/// Keeps the header and rows of rounds `<= round`, so a resumed run appends
/// onto exactly what an uninterrupted run had written by then.
fn truncate_metrics(path: &Path, round: usize) -> Result<bool> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(false);
    };
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Resume(format!("{} has an unexpected header", path.display())));
    }
    let mut kept = format!("{METRICS_HEADER}\n");
    for line in lines {
        let r: usize = line
            .split(',')
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| Error::Resume(format!("malformed metrics row {line:?}")))?;
        if r <= round {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept)?;
    Ok(true)
}

/// Runs (or resumes) the configured experiment, writing the manifest,
/// metrics and checkpoints under `options.out_dir`.
pub fn run_experiment(config: &ExperimentConfig, options: &RunOptions) -> Result<RunSummary> {
    run_experiment_with(config, options, |_| {})
}

/// [`run_experiment`] with a callback after every completed round.
pub fn run_experiment_with(
    config: &ExperimentConfig,
    options: &RunOptions,
    mut on_round: impl FnMut(&RoundMetrics),
) -> Result<RunSummary> {
    let exp = Experiment::prepare(config)?;
    let hash = config.trajectory_hash();
    fs::create_dir_all(&options.out_dir)?;
    let metrics_path = options.out_dir.join(METRICS_FILE);

    let (mut server, mut sink) = match &options.resume {
        Some(ckpt) => {
            let c = load_checkpoint(ckpt)?;
            if c.config_hash != hash {
                return Err(Error::Resume(format!(
                    "checkpoint was written for config {}, this config is {}",
                    hex(&c.config_hash),
                    hex(&hash)
                )));
            }
            if c.server.round > config.rounds {
                return Err(Error::Resume(format!(
                    "checkpoint is at round {}, past the configured {} rounds",
                    c.server.round, config.rounds
                )));
            }
            let existing = truncate_metrics(&metrics_path, c.server.round)?;
            let file = OpenOptions::new().create(true).append(true).open(&metrics_path)?;
            let sink = if existing {
                MetricsSink::resume(BufWriter::new(file), config.record_wall_time)
            } else {
                MetricsSink::new(BufWriter::new(file), config.record_wall_time)
            };
            (c.server, sink)
        }
        None => {
            let file = File::create(&metrics_path)?;
            (exp.initial_server()?, MetricsSink::new(BufWriter::new(file), config.record_wall_time))
        }
    };
    write_manifest(&exp, &options.out_dir.join(MANIFEST_FILE), &hash, server.round)?;
    sink.write_header()?;

    let mut metrics = Vec::new();
    while server.round < config.rounds {
        let m = match exp.run_round(&mut server) {
            Ok(m) => m,
            Err(e) => {
                sink.into_inner().flush()?;
                return Err(e);
            }
        };
        sink.emit(&m)?;
        on_round(&m);
        if config.checkpoint_every > 0 && server.round % config.checkpoint_every == 0 {
            let p = options.out_dir.join(format!("checkpoint_round_{:04}.sfhf", server.round));
            save_checkpoint(&server, &hash, &p)?;
        }
        metrics.push(m);
    }
    sink.into_inner().flush()?;
    save_checkpoint(&server, &hash, &options.out_dir.join(CHECKPOINT_FILE))?;
    Ok(RunSummary {
        out_dir: options.out_dir.clone(),
        metrics,
        server,
        config_hash: hash,
    })
}

#[derive(Serialize)]
struct EnergyTable<'a> {
    scale: &'a [EnergyReport],
}

/// TOML rendering of per-scale energy reports.
pub fn render_energy(reports: &[EnergyReport]) -> Result<String> {
    toml::to_string(&EnergyTable { scale: reports }).map_err(|e| Error::Format(format!("energy report: {e}")))
}
