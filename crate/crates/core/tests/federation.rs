use sfedhifi_core::experiment::{parse_config, Experiment, ExperimentConfig};
use sfedhifi_core::federation::{run_round_with, PerScaleFedAvg, RoundStep, StrategyRegistry};
use sfedhifi_core::Error;

fn tiny(mode: &str, workers: usize) -> ExperimentConfig {
    parse_config(&format!(
        r#"
rounds = 3
seed = 9
mode = "{mode}"
workers = {workers}

[dataset]
kind = "synthetic"
classes = 4
height = 8
width = 8
train_per_class = 20
test_per_class = 5

[partition]
clients = 10

[federation]
scales = [0.5, 1.0]
tucker_ranks = [2, 2, 2]

[model]
architecture = "4C3-8C3-MP2-FC"
a1 = 2
a2 = 4
time_steps = 2

[training]
local_epochs = 1
batch_size = 8
"#
    ))
    .unwrap()
}

#[test]
fn rounds_are_deterministic_across_worker_counts() {
    let run = |workers| {
        let exp = Experiment::prepare(&tiny("sfedhifi", workers)).unwrap();
        let mut server = exp.initial_server().unwrap();
        let metrics: Vec<_> = (0..3).map(|_| exp.run_round(&mut server).unwrap()).collect();
        (server, metrics)
    };
    let (a, ma) = run(1);
    let (b, mb) = run(3);
    assert_eq!(a, b);
    for (x, y) in ma.iter().zip(&mb) {
        assert_eq!(x.participants, y.participants);
        assert_eq!(x.scales, y.scales);
        assert_eq!(x.fusion_layer, y.fusion_layer);
    }
}

#[test]
fn half_the_clients_take_part() {
    let exp = Experiment::prepare(&tiny("sfedhifi", 1)).unwrap();
    let mut server = exp.initial_server().unwrap();
    let m = exp.run_round(&mut server).unwrap();
    assert_eq!(m.participants.len(), 5);
    assert!(m.participants.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(m.scales.iter().map(|s| s.participants).sum::<usize>(), 5);
    assert_eq!(server.round, 1);
    assert!(m.scales.iter().all(|s| (0.0..=1.0).contains(&s.accuracy)));
}

#[test]
fn step_logs_differ_by_strategy() {
    use RoundStep::*;
    let exp = Experiment::prepare(&tiny("sfedhifi", 1)).unwrap();
    let mut server = exp.initial_server().unwrap();
    let m = exp.run_round(&mut server).unwrap();
    assert_eq!(
        m.steps,
        [Sample, LocalTrain, AggregateBasis, AggregateScaleFactors, SelectFusionLayer, HifiFuse, Distribute]
    );
    assert!(m.fusion_layer.is_some());

    let base = Experiment::prepare(&tiny("fedavg_baseline", 1)).unwrap();
    let mut server = base.initial_server().unwrap();
    let m = base.run_round(&mut server).unwrap();
    assert_eq!(m.steps, [Sample, LocalTrain, AggregateScaleFactors, Distribute]);
    assert_eq!(m.fusion_layer, None);
}

#[test]
fn ablation_skips_fusion() {
    let exp = Experiment::prepare(&tiny("sfedhifi_without_fusion", 1)).unwrap();
    let mut server = exp.initial_server().unwrap();
    let m = exp.run_round(&mut server).unwrap();
    assert_eq!(m.fusion_layer, None);
    assert!(!m.steps.contains(&RoundStep::HifiFuse));
}

#[test]
fn mismatched_storage_rejected_without_side_effects() {
    let exp = Experiment::prepare(&tiny("sfedhifi", 1)).unwrap();
    let mut server = exp.initial_server().unwrap();
    let before = server.clone();
    let err = run_round_with(&PerScaleFedAvg, &mut server, &exp.context()).unwrap_err();
    assert!(matches!(err, Error::Protocol(_)));
    assert_eq!(server, before);
}

#[test]
fn registry_names() {
    let reg = StrategyRegistry::with_defaults();
    let mut names = reg.names();
    names.sort_unstable();
    assert_eq!(names, ["fedavg_baseline", "sfedhifi", "sfedhifi_without_fusion"]);
    assert!(reg.get("nope").is_err());
}
