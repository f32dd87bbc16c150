//! Server-side aggregation strategies behind one round driver.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::snn::{HiddenWeight, Parameterization};
use crate::tensor::Tensor;

use super::aggregate::{aggregate_basis, aggregate_scale_factors, mean_tensors};
use super::clients::{sample_participants, ClientState};
use super::hifi::{hifi_fuse, select_fusion_layer};
use super::server::ServerState;
use super::train::{evaluate, local_train, LocalUpdate, TrainingSettings};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoundStep {
    Sample,
    LocalTrain,
    AggregateBasis,
    AggregateScaleFactors,
    SelectFusionLayer,
    HifiFuse,
    Distribute,
}

impl fmt::Display for RoundStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RoundStep::Sample => "sample",
            RoundStep::LocalTrain => "local_train",
            RoundStep::AggregateBasis => "aggregate_basis",
            RoundStep::AggregateScaleFactors => "aggregate_scale_factors",
            RoundStep::SelectFusionLayer => "select_fusion_layer",
            RoundStep::HifiFuse => "hifi_fuse",
            RoundStep::Distribute => "distribute",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleMetrics {
    pub scale: f64,
    pub accuracy: f64,
    /// Mean TET loss on the test set.
    pub loss: f64,
    pub snn_energy_joules: f64,
    pub ann_energy_joules: f64,
    /// Participants at this scale in the round.
    pub participants: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundMetrics {
    /// 1-based index of the round just completed.
    pub round: usize,
    pub strategy: String,
    pub participants: Vec<usize>,
    pub scales: Vec<ScaleMetrics>,
    /// Mean final-epoch training objective over participants with data.
    pub train_loss: f64,
    pub fusion_layer: Option<usize>,
    pub steps: Vec<RoundStep>,
    pub elapsed_ms: f64,
}

impl RoundMetrics {
    pub fn mean_accuracy(&self) -> f64 {
        self.scales.iter().map(|s| s.accuracy).sum::<f64>() / self.scales.len() as f64
    }
}

/// Everything a round reads besides the server.
#[derive(Clone, Copy, Debug)]
pub struct RoundContext<'a> {
    pub clients: &'a [ClientState],
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub training: &'a TrainingSettings,
    /// Local-training threads; results merge in participant order.
    pub workers: usize,
}

pub trait FederationStrategy: Send + Sync {
    fn name(&self) -> &str;

    fn parameterization(&self) -> Parameterization;

    /// Folds the round's uploads into `server`; returns the fused layer, if any.
    fn aggregate(&self, server: &mut ServerState, updates: &[LocalUpdate], steps: &mut Vec<RoundStep>)
        -> Result<Option<usize>>;
}

/// Shared basis, per-scale factors, and (optionally) cross-scale fusion of
/// the most active layer.
#[derive(Clone, Copy, Debug)]
pub struct SFedHifi {
    pub fuse: bool,
}

/// Per-scale FedAvg of dense weights; scales never exchange information.
#[derive(Clone, Copy, Debug)]
pub struct PerScaleFedAvg;

fn members(updates: &[LocalUpdate], scale: usize) -> Vec<&LocalUpdate> {
    updates.iter().filter(|u| u.scale_index == scale).collect()
}

fn hidden_tensor(h: &HiddenWeight) -> &Tensor {
    match h {
        HiddenWeight::Factorized(l) => &l.factor,
        HiddenWeight::Dense(w) => w,
    }
}

/// Stem, head and hidden factors (or dense weights), per scale.
fn aggregate_per_scale(server: &mut ServerState, updates: &[LocalUpdate]) -> Result<()> {
    for (s, model) in server.models.iter_mut().enumerate() {
        let group = members(updates, s);
        let pick = |f: &dyn Fn(&LocalUpdate) -> &Tensor| -> Vec<&Tensor> { group.iter().map(|u| f(u)).collect() };
        let Some(stem) = aggregate_scale_factors(&pick(&|u| &u.params.stem))? else {
            continue;
        };
        model.stem = stem;
        model.head_weight = mean_tensors(&pick(&|u| &u.params.head_weight))?;
        model.head_bias = mean_tensors(&pick(&|u| &u.params.head_bias))?;
        for (l, slot) in model.hidden.iter_mut().enumerate() {
            let items: Vec<&Tensor> = group.iter().map(|u| hidden_tensor(&u.params.hidden[l])).collect();
            *slot = mean_tensors(&items)?;
        }
    }
    Ok(())
}

fn check_uploads(server: &ServerState, updates: &[LocalUpdate], kind: Parameterization) -> Result<()> {
    for u in updates {
        if u.params.parameterization() != kind || u.scale_index >= server.models.len() {
            return Err(Error::Protocol(format!("client {} uploaded an incompatible model", u.client_id)));
        }
        if u.params.hidden.len() != server.architecture.hidden_count() {
            return Err(Error::Protocol(format!("client {} uploaded the wrong layer count", u.client_id)));
        }
    }
    Ok(())
}

impl FederationStrategy for SFedHifi {
    fn name(&self) -> &str {
        if self.fuse {
            "sfedhifi"
        } else {
            "sfedhifi_without_fusion"
        }
    }

    fn parameterization(&self) -> Parameterization {
        Parameterization::Factorized
    }

    fn aggregate(
        &self,
        server: &mut ServerState,
        updates: &[LocalUpdate],
        steps: &mut Vec<RoundStep>,
    ) -> Result<Option<usize>> {
        check_uploads(server, updates, Parameterization::Factorized)?;
        for l in 0..server.bases.len() {
            let items: Vec<&Tensor> = updates
                .iter()
                .map(|u| match &u.params.hidden[l] {
                    HiddenWeight::Factorized(f) => &f.basis,
                    HiddenWeight::Dense(w) => w,
                })
                .collect();
            server.bases[l] = aggregate_basis(&items)?;
        }
        steps.push(RoundStep::AggregateBasis);
        aggregate_per_scale(server, updates)?;
        steps.push(RoundStep::AggregateScaleFactors);
        if !self.fuse {
            return Ok(None);
        }
        for s in 0..server.models.len() {
            let reports: Vec<&[f64]> = members(updates, s)
                .iter()
                .filter_map(|u| u.report.as_ref().map(|r| r.hidden_rates()))
                .collect();
            if let Some(first) = reports.first() {
                let mut mean = vec![0.0; first.len()];
                for r in &reports {
                    mean.iter_mut().zip(r.iter()).for_each(|(m, v)| *m += v);
                }
                mean.iter_mut().for_each(|m| *m /= reports.len() as f64);
                server.last_rates[s] = Some(mean);
            }
        }
        let known: Vec<&[f64]> = server.last_rates.iter().flatten().map(|r| r.as_slice()).collect();
        let layer = select_fusion_layer(&known)?;
        steps.push(RoundStep::SelectFusionLayer);
        let table: Vec<Tensor> = server.models.iter().map(|m| m.hidden[layer].clone()).collect();
        let fused = hifi_fuse(&table, &server.fusion_ranks, server.tucker_modes)?;
        for (m, f) in server.models.iter_mut().zip(fused) {
            m.hidden[layer] = f;
        }
        steps.push(RoundStep::HifiFuse);
        Ok(Some(layer))
    }
}

impl FederationStrategy for PerScaleFedAvg {
    fn name(&self) -> &str {
        "fedavg_baseline"
    }

    fn parameterization(&self) -> Parameterization {
        Parameterization::Dense
    }

    fn aggregate(
        &self,
        server: &mut ServerState,
        updates: &[LocalUpdate],
        steps: &mut Vec<RoundStep>,
    ) -> Result<Option<usize>> {
        check_uploads(server, updates, Parameterization::Dense)?;
        aggregate_per_scale(server, updates)?;
        steps.push(RoundStep::AggregateScaleFactors);
        Ok(None)
    }
}

/// Strategies by name, as selected by the experiment `mode`.
#[derive(Clone, Default)]
pub struct StrategyRegistry {
    entries: BTreeMap<String, Arc<dyn FederationStrategy>>,
}

impl StrategyRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_defaults() -> Self {
        let mut r = Self::new();
        r.register(Arc::new(SFedHifi { fuse: true }));
        r.register(Arc::new(SFedHifi { fuse: false }));
        r.register(Arc::new(PerScaleFedAvg));
        r
    }

    pub fn register(&mut self, strategy: Arc<dyn FederationStrategy>) {
        self.entries.insert(strategy.name().to_string(), strategy);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn FederationStrategy>> {
        self.entries.get(name).cloned().ok_or_else(|| {
            Error::Argument(format!("unknown strategy {name:?}; known: {}", self.names().join(", ")))
        })
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }
}

fn train_all(server: &ServerState, ctx: &RoundContext, ids: &[usize]) -> Result<Vec<LocalUpdate>> {
    let round = server.round;
    let plans = (0..server.models.len()).map(|s| server.plan(s)).collect::<Result<Vec<_>>>()?;
    let globals = (0..server.models.len())
        .map(|s| server.client_params(s))
        .collect::<Result<Vec<_>>>()?;
    let job = |id: usize| -> Result<LocalUpdate> {
        let c = &ctx.clients[id];
        let s = c.scale_index;
        if s >= plans.len() {
            return Err(Error::Protocol(format!("client {id} has unknown scale index {s}")));
        }
        local_train(c, &globals[s], &plans[s], ctx.training, ctx.train, round)
    };
    let workers = ctx.workers.clamp(1, ids.len().max(1));
    if workers == 1 {
        return ids.iter().map(|&id| job(id)).collect();
    }
    let mut slots: Vec<Option<Result<LocalUpdate>>> = (0..ids.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let job = &job;
                scope.spawn(move || {
                    (w..ids.len())
                        .step_by(workers)
                        .map(|k| (k, job(ids[k])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (k, r) in h.join().expect("local training thread panicked") {
                slots[k] = Some(r);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every slot filled")).collect()
}

/// sample -> local_train -> strategy aggregation -> distribute, followed by a
/// centralized test pass per scale. The server is only replaced on success.
pub fn run_round_with(
    strategy: &dyn FederationStrategy,
    server: &mut ServerState,
    ctx: &RoundContext,
) -> Result<RoundMetrics> {
    let start = Instant::now();
    if strategy.parameterization() != server.parameterization {
        return Err(Error::Protocol(format!(
            "strategy {} needs {:?} storage, server holds {:?}",
            strategy.name(),
            strategy.parameterization(),
            server.parameterization
        )));
    }
    if ctx.clients.is_empty() {
        return Err(Error::Round("zero participants: no clients registered".into()));
    }
    if ctx.clients.iter().enumerate().any(|(i, c)| c.id != i) {
        return Err(Error::Argument("client ids must equal their position".into()));
    }
    let mut next = server.clone();
    let mut steps = vec![RoundStep::Sample];
    let pool: Vec<usize> = (0..ctx.clients.len()).collect();
    let participants = sample_participants(&pool, next.participation, &mut next.rng)?;
    if participants.is_empty() {
        return Err(Error::Round("zero participants".into()));
    }
    let updates = train_all(&next, ctx, &participants)?;
    steps.push(RoundStep::LocalTrain);
    let fusion_layer = strategy.aggregate(&mut next, &updates, &mut steps)?;
    steps.push(RoundStep::Distribute);
    next.round += 1;

    let mut scales = Vec::with_capacity(next.models.len());
    for s in 0..next.models.len() {
        let plan = next.plan(s)?;
        let eval = evaluate(&next.client_params(s)?, &plan, ctx.training, ctx.test)?;
        scales.push(ScaleMetrics {
            scale: plan.scale,
            accuracy: eval.accuracy,
            loss: eval.loss,
            snn_energy_joules: eval.snn_energy_joules,
            ann_energy_joules: eval.ann_energy_joules,
            participants: updates.iter().filter(|u| u.scale_index == s).count(),
        });
    }
    let losses: Vec<f64> = updates.iter().filter_map(|u| u.epoch_losses.last().copied()).collect();
    let train_loss = if losses.is_empty() {
        0.0
    } else {
        losses.iter().sum::<f64>() / losses.len() as f64
    };
    *server = next;
    Ok(RoundMetrics {
        round: server.round,
        strategy: strategy.name().to_string(),
        participants,
        scales,
        train_loss,
        fusion_layer,
        steps,
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// One SFedHIFI round.
pub fn run_round(server: &mut ServerState, ctx: &RoundContext) -> Result<RoundMetrics> {
    run_round_with(&SFedHifi { fuse: true }, server, ctx)
}

/// One per-scale FedAvg round.
pub fn baseline_fedavg_round(server: &mut ServerState, ctx: &RoundContext) -> Result<RoundMetrics> {
    run_round_with(&PerScaleFedAvg, server, ctx)
}
