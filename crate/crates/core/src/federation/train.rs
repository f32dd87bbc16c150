use crate::data::Dataset;
use crate::energy::{energy_report, EnergyConstants};
use crate::error::{Error, Result};
use crate::snn::{
    argmax_mean_logits, tet_loss_and_grad, DenseGrads, FiringRateReport, LifParams, NetworkParams, NetworkPlan,
    RateAccumulator, Sgd, SpikingNetwork,
};

use super::clients::ClientState;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainingSettings {
    pub lr: f64,
    pub momentum: f64,
    /// Weight of the basis orthogonality penalty.
    pub lambda: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lif: LifParams,
    pub time_steps: usize,
}

impl Default for TrainingSettings {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            lambda: 0.01,
            local_epochs: 2,
            batch_size: 32,
            lif: LifParams::default(),
            time_steps: 10,
        }
    }
}

/// What a participant uploads after local training.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalUpdate {
    pub client_id: usize,
    pub scale_index: usize,
    pub params: NetworkParams,
    /// Mean rates over the final epoch; `None` for a client without data.
    pub report: Option<FiringRateReport>,
    pub samples: usize,
    /// Mean training objective per epoch.
    pub epoch_losses: Vec<f64>,
}

fn protocol(e: Error) -> Error {
    match e {
        Error::Shape(m) => Error::Protocol(format!("global weights do not fit the client: {m}")),
        other => other,
    }
}

/// Loads `global`, runs `local_epochs` of minibatch SGD on the client's
/// shard, and reports rates from the final epoch's forward passes. With zero
/// epochs the weights are returned untouched and the rates come from one
/// forward-only pass.
pub fn local_train(
    client: &ClientState,
    global: &NetworkParams,
    plan: &NetworkPlan,
    settings: &TrainingSettings,
    train: &Dataset,
    round: usize,
) -> Result<LocalUpdate> {
    if (plan.scale - client.scale).abs() > 1e-12 {
        return Err(Error::Protocol(format!(
            "client {} runs scale {}, plan is for {}",
            client.id, client.scale, plan.scale
        )));
    }
    if let Some(&bad) = client.indices.iter().find(|&&i| i >= train.len()) {
        return Err(Error::Protocol(format!("client {} holds sample {bad} outside the dataset", client.id)));
    }
    let mut net =
        SpikingNetwork::new(plan.clone(), global.clone(), settings.lif, settings.time_steps).map_err(protocol)?;
    let mut update = LocalUpdate {
        client_id: client.id,
        scale_index: client.scale_index,
        params: global.clone(),
        report: None,
        samples: client.indices.len(),
        epoch_losses: Vec::new(),
    };
    if client.indices.is_empty() {
        return Ok(update);
    }
    if settings.local_epochs == 0 {
        let mut rates = RateAccumulator::default();
        for &i in &client.indices {
            let (_, trace) = net.forward_image(train.image(i))?;
            rates.add(&trace);
        }
        update.report = Some(rates.report()?);
        return Ok(update);
    }
    if settings.batch_size == 0 {
        return Err(Error::Argument("batch size must be positive".into()));
    }
    let mut rng = client.round_rng(round);
    let mut opt = Sgd::new(settings.lr, settings.momentum)?;
    let mut order = client.indices.clone();
    let mut rates = RateAccumulator::default();
    for epoch in 0..settings.local_epochs {
        let last = epoch + 1 == settings.local_epochs;
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for batch in order.chunks(settings.batch_size) {
            let mut acc = DenseGrads::zeros(&net);
            let mut batch_loss = 0.0;
            for &i in batch {
                let (logits, trace) = net.forward_image(train.image(i))?;
                let (loss, dlog) = tet_loss_and_grad(&logits, train.labels[i])?;
                net.backward_dense(&trace, &dlog, &mut acc)?;
                if last {
                    rates.add(&trace);
                }
                batch_loss += loss;
            }
            let mut grads = net.factor_grads(&acc, 1.0 / batch.len() as f64)?;
            let penalty = net.add_orthogonality(&mut grads, settings.lambda)?;
            loss_sum += batch_loss + penalty * batch.len() as f64;
            let g = grads.tensors();
            net.update_params(|p| opt.step(&mut p.tensors_mut(), &g))??;
        }
        update.epoch_losses.push(loss_sum / order.len() as f64);
    }
    if !net.params().tensors().iter().all(|t| t.is_finite()) {
        return Err(Error::Numeric(format!("client {} diverged in round {round}", client.id)));
    }
    update.params = net.params().clone();
    update.report = Some(rates.report()?);
    Ok(update)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Mean TET loss.
    pub loss: f64,
    pub report: FiringRateReport,
    pub snn_energy_joules: f64,
    pub ann_energy_joules: f64,
}

/// Centralized test pass for one scale's global model.
pub fn evaluate(
    params: &NetworkParams,
    plan: &NetworkPlan,
    settings: &TrainingSettings,
    test: &Dataset,
) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::Argument("empty evaluation set".into()));
    }
    let net = SpikingNetwork::new(plan.clone(), params.clone(), settings.lif, settings.time_steps)?;
    let mut correct = 0usize;
    let mut loss = 0.0;
    let mut rates = RateAccumulator::default();
    for i in 0..test.len() {
        let (logits, trace) = net.forward_image(test.image(i))?;
        if argmax_mean_logits(&logits) == test.labels[i] {
            correct += 1;
        }
        loss += crate::snn::tet_loss(&logits, test.labels[i])?;
        rates.add(&trace);
    }
    let report = rates.report()?;
    let energy = energy_report(plan, &report, &EnergyConstants::default())?;
    Ok(Evaluation {
        accuracy: correct as f64 / test.len() as f64,
        loss: loss / test.len() as f64,
        report,
        snn_energy_joules: energy.snn_joules,
        ann_energy_joules: energy.ann_joules,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_split, SynthSpec};
    use crate::rng::CounterRng;
    use crate::snn::{Architecture, InputShape, Parameterization};

    fn setup() -> (NetworkPlan, NetworkParams, Dataset) {
        let spec = SynthSpec {
            classes: 2,
            train_per_class: 12,
            test_per_class: 4,
            height: 6,
            width: 6,
            noise: 0.05,
            max_shift: 0,
            blobs: 1,
            ..SynthSpec::default()
        };
        let (train, _) = synth_split(&spec, 3).unwrap();
        let arch = Architecture::new("4C3-4C3-MP2-FC", InputShape { channels: 1, height: 6, width: 6 }, 2, 2, 4)
            .unwrap();
        let plan = arch.plan(1.0).unwrap();
        let params = NetworkParams::init(&plan, Parameterization::Factorized, &mut CounterRng::new(1)).unwrap();
        (plan, params, train)
    }

    fn settings(epochs: usize) -> TrainingSettings {
        TrainingSettings {
            lr: 0.1,
            momentum: 0.5,
            local_epochs: epochs,
            batch_size: 4,
            time_steps: 3,
            ..TrainingSettings::default()
        }
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let (plan, params, train) = setup();
        let client = ClientState::new(0, 0, 1.0, (0..train.len()).collect(), 5);
        let u = local_train(&client, &params, &plan, &settings(0), &train, 0).unwrap();
        assert_eq!(u.params, params);
        assert_eq!(u.report.unwrap().samples, train.len());
    }

    #[test]
    fn training_decreases_loss() {
        let (plan, params, train) = setup();
        let client = ClientState::new(0, 0, 1.0, (0..train.len()).collect(), 5);
        let u = local_train(&client, &params, &plan, &settings(5), &train, 0).unwrap();
        assert_eq!(u.epoch_losses.len(), 5);
        assert!(u.epoch_losses[4] < u.epoch_losses[0], "{:?}", u.epoch_losses);
    }

    #[test]
    fn identical_clients_identical_updates() {
        let (plan, params, train) = setup();
        let a = ClientState::new(0, 0, 1.0, (0..train.len()).collect(), 5);
        let b = ClientState { id: 1, ..a.clone() };
        let ua = local_train(&a, &params, &plan, &settings(1), &train, 2).unwrap();
        let ub = local_train(&b, &params, &plan, &settings(1), &train, 2).unwrap();
        assert_eq!(ua.params, ub.params);
        assert_eq!(ua.report, ub.report);
    }

    #[test]
    fn mismatched_globals_rejected() {
        let (plan, params, train) = setup();
        let client = ClientState::new(0, 0, 1.0, vec![0, 1], 5);
        let mut bad = params.clone();
        bad.head_bias = crate::tensor::Tensor::zeros(&[7]);
        assert!(matches!(
            local_train(&client, &bad, &plan, &settings(1), &train, 0),
            Err(Error::Protocol(_))
        ));
        let other = ClientState::new(0, 0, 0.5, vec![0], 5);
        assert!(matches!(
            local_train(&other, &params, &plan, &settings(1), &train, 0),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn evaluation_ranges() {
        let (plan, params, train) = setup();
        let e = evaluate(&params, &plan, &settings(1), &train).unwrap();
        assert!((0.0..=1.0).contains(&e.accuracy));
        assert!(e.loss > 0.0 && e.snn_energy_joules > 0.0);
    }
}
