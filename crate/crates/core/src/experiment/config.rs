use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{PartitionMode, SynthSpec};
use crate::error::{Error, Result};
use crate::federation::{check_fusion_ranks, TrainingSettings, TuckerModes};
use crate::snn::{Architecture, InputShape, LifParams};

/// Environment variable that replaces `dataset.root` when set.
pub const DATA_ROOT_ENV: &str = "SFEDHIFI_DATA_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    #[default]
    Idx,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Directory with `train-*` / `t10k-*` IDX files.
    pub root: Option<PathBuf>,
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub noise: f64,
    pub max_shift: usize,
    pub blobs: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Idx,
            root: None,
            classes: 10,
            channels: 1,
            height: 28,
            width: 28,
            train_limit: None,
            test_limit: None,
            train_per_class: 100,
            test_per_class: 50,
            noise: 0.3,
            max_shift: 1,
            blobs: 3,
        }
    }
}

impl DatasetConfig {
    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            classes: self.classes,
            train_per_class: self.train_per_class,
            test_per_class: self.test_per_class,
            channels: self.channels,
            height: self.height,
            width: self.width,
            noise: self.noise,
            max_shift: self.max_shift,
            blobs: self.blobs,
        }
    }

    pub fn input_shape(&self) -> InputShape {
        InputShape {
            channels: self.channels,
            height: self.height,
            width: self.width,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    Iid,
    #[default]
    Dirichlet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub kind: PartitionKind,
    pub alpha: f64,
    pub clients: usize,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            kind: PartitionKind::Dirichlet,
            alpha: 0.3,
            clients: 10,
        }
    }
}

impl PartitionConfig {
    pub fn mode(&self) -> PartitionMode {
        match self.kind {
            PartitionKind::Iid => PartitionMode::Iid,
            PartitionKind::Dirichlet => PartitionMode::Dirichlet { alpha: self.alpha },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub participation: f64,
    pub scales: Vec<f64>,
    /// Per-client resource budgets; round-robin over `scales` when absent.
    pub resources: Option<Vec<f64>>,
    pub tucker_ranks: Vec<usize>,
    /// 3, or 4 to fold the input-channel mode into a square.
    pub tucker_modes: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            participation: 0.5,
            scales: vec![0.25, 0.5, 0.75, 1.0],
            resources: None,
            tucker_ranks: vec![8, 2, 8],
            tucker_modes: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: String,
    pub a1: usize,
    pub a2: usize,
    pub time_steps: usize,
    pub tau: f64,
    pub v_th: f64,
    pub v_reset: f64,
    pub surrogate_alpha: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: "64C3-128C3-MP2-128C3-MP2-FC".into(),
            a1: 4,
            a2: 16,
            time_steps: 10,
            tau: 0.5,
            v_th: 1.0,
            v_reset: 0.0,
            surrogate_alpha: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub lr: f64,
    pub momentum: f64,
    pub lambda: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            lambda: 0.01,
            local_epochs: 2,
            batch_size: 32,
        }
    }
}

fn default_mode() -> String {
    "sfedhifi".into()
}

fn default_workers() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub rounds: usize,
    #[serde(default)]
    pub seed: u64,
    /// Registered strategy name.
    #[serde(default = "default_mode")]
    pub mode: String,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Write measured round times; off keeps metrics byte-reproducible.
    #[serde(default)]
    pub record_wall_time: bool,
    /// Also checkpoint every this many rounds (0: only at the end).
    #[serde(default)]
    pub checkpoint_every: usize,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub partition: PartitionConfig,
    #[serde(default)]
    pub federation: FederationConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingConfig,
}

fn backticked(message: &str) -> Option<&str> {
    let start = message.find('`')? + 1;
    let len = message[start..].find('`')?;
    Some(&message[start..start + len])
}

/// Parses and fully validates a TOML experiment description.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
        let message = e.message().to_string();
        let key = backticked(&message).unwrap_or("<document>").to_string();
        Error::config(key, message)
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn check(ok: bool, key: &str, message: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(key, message()))
    }
}

fn in_unit(x: f64) -> bool {
    x > 0.0 && x <= 1.0
}

impl ExperimentConfig {
    pub fn architecture(&self) -> Result<Architecture> {
        Architecture::new(
            &self.model.architecture,
            self.dataset.input_shape(),
            self.dataset.classes,
            self.model.a1,
            self.model.a2,
        )
        .map_err(|e| Error::config("model.architecture", e.to_string()))
    }

    pub fn lif(&self) -> LifParams {
        LifParams {
            tau: self.model.tau,
            v_th: self.model.v_th,
            v_reset: self.model.v_reset,
            surrogate_alpha: self.model.surrogate_alpha,
        }
    }

    pub fn tucker_modes(&self) -> TuckerModes {
        if self.federation.tucker_modes == 4 {
            TuckerModes::Four
        } else {
            TuckerModes::Three
        }
    }

    pub fn training_settings(&self) -> TrainingSettings {
        TrainingSettings {
            lr: self.training.lr,
            momentum: self.training.momentum,
            lambda: self.training.lambda,
            local_epochs: self.training.local_epochs,
            batch_size: self.training.batch_size,
            lif: self.lif(),
            time_steps: self.model.time_steps,
        }
    }

    /// Client resource budgets: explicit, or cycling through the scale set.
    pub fn resources(&self) -> Vec<f64> {
        match &self.federation.resources {
            Some(r) => r.clone(),
            None => crate::federation::round_robin_resources(self.partition.clients, &self.federation.scales),
        }
    }

    pub fn is_factorized(&self) -> bool {
        self.mode != "fedavg_baseline"
    }

    /// Range, geometry and rank checks; every failure names its key.
    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        check(d.classes >= 2, "dataset.classes", || format!("{} < 2", d.classes))?;
        check(d.classes <= 256, "dataset.classes", || format!("{} > 256", d.classes))?;
        check(d.channels > 0, "dataset.channels", || "must be positive".into())?;
        check(d.height > 0, "dataset.height", || "must be positive".into())?;
        check(d.width > 0, "dataset.width", || "must be positive".into())?;
        check(d.train_limit != Some(0), "dataset.train_limit", || "must be positive".into())?;
        check(d.test_limit != Some(0), "dataset.test_limit", || "must be positive".into())?;
        match d.kind {
            DatasetKind::Idx => check(
                d.root.is_some() || std::env::var_os(DATA_ROOT_ENV).is_some(),
                "dataset.root",
                || format!("required for IDX data (or set {DATA_ROOT_ENV})"),
            )?,
            DatasetKind::Synthetic => {
                check(d.train_per_class > 0, "dataset.train_per_class", || "must be positive".into())?;
                check(d.test_per_class > 0, "dataset.test_per_class", || "must be positive".into())?;
                check(d.noise >= 0.0 && d.noise.is_finite(), "dataset.noise", || {
                    format!("{} must be non-negative", d.noise)
                })?;
                check(d.blobs > 0, "dataset.blobs", || "must be positive".into())?;
            }
        }

        let p = &self.partition;
        check(p.clients > 0, "partition.clients", || "need at least one client".into())?;
        if p.kind == PartitionKind::Dirichlet {
            check(p.alpha > 0.0 && p.alpha.is_finite(), "partition.alpha", || {
                format!("{} must be positive", p.alpha)
            })?;
        }

        let f = &self.federation;
        check(in_unit(f.participation), "federation.participation", || {
            format!("{} outside (0, 1]", f.participation)
        })?;
        check(!f.scales.is_empty(), "federation.scales", || "empty scale set".into())?;
        for (i, &s) in f.scales.iter().enumerate() {
            check(in_unit(s), "federation.scales", || format!("{s} outside (0, 1]"))?;
            check(!f.scales[..i].iter().any(|&t| (t - s).abs() < 1e-12), "federation.scales", || {
                format!("duplicate scale {s}")
            })?;
        }
        if let Some(r) = &f.resources {
            check(r.len() == p.clients, "federation.resources", || {
                format!("{} budgets for {} clients", r.len(), p.clients)
            })?;
            check(r.iter().all(|&x| x > 0.0 && x.is_finite()), "federation.resources", || {
                "budgets must be positive".into()
            })?;
        }
        check(f.tucker_modes == 3 || f.tucker_modes == 4, "federation.tucker_modes", || {
            format!("{} is not 3 or 4", f.tucker_modes)
        })?;
        check(f.tucker_ranks.len() == 3, "federation.tucker_ranks", || {
            format!("expected three ranks, got {}", f.tucker_ranks.len())
        })?;

        let m = &self.model;
        check(m.time_steps > 0, "model.time_steps", || "must be positive".into())?;
        check((0.0..=1.0).contains(&m.tau), "model.tau", || format!("{} outside [0, 1]", m.tau))?;
        check(m.v_th > m.v_reset, "model.v_th", || {
            format!("{} must exceed v_reset {}", m.v_th, m.v_reset)
        })?;
        check(m.surrogate_alpha > 0.0, "model.surrogate_alpha", || "must be positive".into())?;
        check(m.a1 > 0, "model.a1", || "must be positive".into())?;
        check(m.a2 > 0, "model.a2", || "must be positive".into())?;

        let t = &self.training;
        check(t.lr > 0.0 && t.lr.is_finite(), "training.lr", || format!("{} must be positive", t.lr))?;
        check((0.0..1.0).contains(&t.momentum), "training.momentum", || {
            format!("{} outside [0, 1)", t.momentum)
        })?;
        check(t.lambda >= 0.0 && t.lambda.is_finite(), "training.lambda", || {
            format!("{} must be non-negative", t.lambda)
        })?;
        check(t.batch_size > 0, "training.batch_size", || "must be positive".into())?;
        check(self.workers > 0, "workers", || "must be positive".into())?;
        crate::federation::StrategyRegistry::with_defaults()
            .get(&self.mode)
            .map_err(|e| Error::config("mode", e.to_string()))?;

        let arch = self.architecture()?;
        for &s in &f.scales {
            let plan = arch.plan(s).map_err(|e| {
                let key = match e {
                    Error::Geometry(ref msg) if msg.contains("a2=") => "model.a2",
                    Error::Geometry(ref msg) if msg.contains("a1") => "model.a1",
                    _ => "model.architecture",
                };
                Error::config(key, format!("at scale {s}: {e}"))
            })?;
            if self.is_factorized() && self.mode != "sfedhifi_without_fusion" {
                for g in &plan.hidden_geometry {
                    let shape = g.factor_shape()?;
                    check_fusion_ranks(&shape, &f.tucker_ranks, self.tucker_modes())
                        .map_err(|e| Error::config("federation.tucker_ranks", format!("at scale {s}: {e}")))?;
                }
            }
        }
        Ok(())
    }

    /// SHA-256 over the settings that shape the trajectory. Round count,
    /// output location, worker count and logging switches are excluded so a
    /// checkpoint can be resumed with a longer horizon elsewhere.
    pub fn trajectory_hash(&self) -> [u8; 32] {
        let mut c = self.clone();
        c.rounds = 0;
        c.output_dir = None;
        c.workers = 1;
        c.record_wall_time = false;
        c.checkpoint_every = 0;
        let text = toml::to_string(&c).expect("config serializes");
        Sha256::digest(text.as_bytes()).into()
    }
}
