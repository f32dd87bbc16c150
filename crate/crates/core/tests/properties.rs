use proptest::prelude::*;

use sfedhifi_core::data::{dirichlet_partition, PartitionMode};
use sfedhifi_core::energy::{ann_energy, snn_energy, EnergyConstants};
use sfedhifi_core::experiment::{decode_checkpoint, encode_checkpoint};
use sfedhifi_core::factorized::{
    basis_from_matrix, compose_weight, matricize_basis, project_to_factors, LayerGeometry,
};
use sfedhifi_core::federation::{aggregate_basis, aggregate_scale_factors, select_fusion_layer, ServerState, TuckerModes};
use sfedhifi_core::rng::CounterRng;
use sfedhifi_core::snn::{
    lif_step, orthogonality_penalty, tet_loss, Architecture, ComputeLayer, InputShape, LifParams, LifState,
    Parameterization,
};
use sfedhifi_core::tensor::Tensor;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = CounterRng::new(seed);
    Tensor::from_fn(shape, |_| rng.normal())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spikes_binary_and_reset_exact(seed in any::<u64>(), tau in 0.0f64..=1.0, v_reset in -1.0f64..0.5, steps in 1usize..8) {
        let p = LifParams { tau, v_th: 1.0, v_reset, surrogate_alpha: 2.0 };
        let mut rng = CounterRng::new(seed);
        let mut state = LifState::resting(&[64], &p);
        for _ in 0..steps {
            let current = Tensor::from_fn(&[64], |_| rng.uniform_range(-2.0, 3.0));
            let (next, spikes) = lif_step(&state, &current, &p).unwrap();
            for (s, v) in spikes.data().iter().zip(next.v.data()) {
                prop_assert!(*s == 0.0 || *s == 1.0);
                if *s == 1.0 {
                    prop_assert_eq!(*v, v_reset);
                }
            }
            state = next;
        }
    }

    #[test]
    fn nonpositive_input_never_fires(seed in any::<u64>(), tau in 0.0f64..=1.0) {
        let p = LifParams { tau, v_th: 1.0, v_reset: 0.0, surrogate_alpha: 2.0 };
        let mut rng = CounterRng::new(seed);
        let mut state = LifState::resting(&[32], &p);
        for _ in 0..10 {
            let current = Tensor::from_fn(&[32], |_| -rng.uniform() * 3.0);
            let (next, spikes) = lif_step(&state, &current, &p).unwrap();
            prop_assert!(spikes.data().iter().all(|&s| s == 0.0));
            state = next;
        }
    }

    #[test]
    fn tet_loss_nonnegative(seed in any::<u64>(), t in 1usize..6, classes in 2usize..8) {
        let logits = random(&[t, classes], seed).scale(5.0);
        let label = (seed % classes as u64) as usize;
        prop_assert!(tet_loss(&logits, label).unwrap() >= 0.0);
    }

    #[test]
    fn penalty_ignores_row_order(seed in any::<u64>(), a1 in 1usize..4, a2 in 1usize..4) {
        let b = random(&[9, a1, a2], seed);
        let m = matricize_basis(&b).unwrap();
        let mut order: Vec<usize> = (0..m.rows()).collect();
        CounterRng::new(seed ^ 1).shuffle(&mut order);
        let permuted = Tensor::from_fn(m.shape(), |i| {
            let (r, c) = (i / m.cols(), i % m.cols());
            m.get(&[order[r], c])
        });
        let pb = basis_from_matrix(&permuted, 9, a1).unwrap();
        let x = orthogonality_penalty(&[&b], 0.1).unwrap();
        let y = orthogonality_penalty(&[&pb], 0.1).unwrap();
        prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
    }

    #[test]
    fn compose_is_bilinear(seed in any::<u64>(), s in -3.0f64..3.0, a2 in 1usize..5, blocks in 1usize..4, d in 1usize..4) {
        let b = random(&[9, 2, a2], seed);
        let m = random(&[a2, blocks, d], seed ^ 7);
        let w = compose_weight(&b, &m).unwrap();
        let ws = w.scale(s);
        prop_assert!(compose_weight(&b.scale(s), &m).unwrap().max_abs_diff(&ws) <= 1e-12);
        prop_assert!(compose_weight(&b, &m.scale(s)).unwrap().max_abs_diff(&ws) <= 1e-12);
    }

    #[test]
    fn basis_shape_scale_free(a1 in 1usize..4, mult in 1usize..4, p in prop::sample::select(vec![0.25, 0.5, 0.75, 1.0])) {
        let channels = 4 * a1 * mult;
        let g = LayerGeometry { out_channels: channels, in_channels: channels, kernel: 3, a1, a2: a1 + 1, scale: 1.0, scale_input: true };
        prop_assert_eq!(g.basis_shape(), g.at_scale(p).basis_shape());
    }

    #[test]
    fn projection_idempotent(seed in any::<u64>(), a1 in 1usize..3, a2 in 1usize..4, blocks in 1usize..4, d in 1usize..4) {
        let g = LayerGeometry { out_channels: a1 * blocks, in_channels: d, kernel: 3, a1, a2, scale: 1.0, scale_input: true };
        let b = random(&[9, a1, a2], seed);
        let w = compose_weight(&b, &random(&[a2, blocks, d], seed ^ 3)).unwrap()
            .add(&random(&[a1 * blocks, 9, d], seed ^ 5)).unwrap();
        let once = project_to_factors(&w, &g, Some(&b)).unwrap().compose().unwrap();
        let twice = project_to_factors(&once, &g, Some(&b)).unwrap().compose().unwrap();
        prop_assert!(twice.max_abs_diff(&once) <= 1e-9 * (1.0 + once.frobenius_norm()));
    }

    #[test]
    fn aggregation_idempotent(seed in any::<u64>(), n in 1usize..9) {
        let t = random(&[3, 2, 4], seed);
        let items: Vec<&Tensor> = (0..n).map(|_| &t).collect();
        prop_assert_eq!(&aggregate_basis(&items).unwrap(), &t);
        prop_assert_eq!(aggregate_scale_factors(&items).unwrap(), Some(t.clone()));
    }

    #[test]
    fn fusion_choice_scale_free(seed in any::<u64>(), scales in 1usize..5, layers in 1usize..6, c in 0.01f64..100.0) {
        let mut rng = CounterRng::new(seed);
        let reports: Vec<Vec<f64>> = (0..scales).map(|_| (0..layers).map(|_| rng.uniform()).collect()).collect();
        let scaled: Vec<Vec<f64>> = reports.iter().map(|r| r.iter().map(|x| x * c).collect()).collect();
        let a: Vec<&[f64]> = reports.iter().map(Vec::as_slice).collect();
        let b: Vec<&[f64]> = scaled.iter().map(Vec::as_slice).collect();
        prop_assert_eq!(select_fusion_layer(&a).unwrap(), select_fusion_layer(&b).unwrap());
    }

    #[test]
    fn partition_is_exact_cover(seed in any::<u64>(), n in 0usize..200, clients in 1usize..12, alpha in 0.05f64..10.0, iid in any::<bool>()) {
        let mut rng = CounterRng::new(seed);
        let labels: Vec<usize> = (0..n).map(|_| rng.below(5) as usize).collect();
        let mode = if iid { PartitionMode::Iid } else { PartitionMode::Dirichlet { alpha } };
        let plan = dirichlet_partition(&labels, clients, mode, seed).unwrap();
        prop_assert_eq!(plan.shards.len(), clients);
        let mut all: Vec<usize> = plan.shards.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn cheap_spikes_beat_macs(seed in any::<u64>(), t in 1usize..8) {
        let c = EnergyConstants::default();
        let mut rng = CounterRng::new(seed);
        let layers: Vec<ComputeLayer> = (0..4)
            .map(|_| ComputeLayer { fan_in: 1 + rng.below(300) as usize, neurons: 1 + rng.below(3000) as usize })
            .collect();
        let cap = c.e_mac / (t as f64 * c.e_ac);
        let rates: Vec<f64> = (0..3).map(|_| rng.uniform() * cap.min(1.0)).collect();
        let snn = snn_energy(&layers, &rates, t, &c).unwrap();
        prop_assert!(snn >= 0.0);
        prop_assert!(snn <= ann_energy(&layers, &c) * (1.0 + 1e-12));
    }

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>(), rounds in 0usize..50) {
        let arch = Architecture::new("4C3-8C3-MP2-FC", InputShape { channels: 1, height: 4, width: 4 }, 3, 2, 4).unwrap();
        let mut server = ServerState::init(&arch, &[0.5, 1.0], Parameterization::Factorized, &[2, 2, 2], TuckerModes::Three, 0.5, seed).unwrap();
        server.round = rounds;
        server.last_rates[1] = Some(vec![0.25, 0.5]);
        let hash = [seed as u8; 32];
        let bytes = encode_checkpoint(&server, &hash);
        let back = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(&back.server, &server);
        prop_assert_eq!(encode_checkpoint(&back.server, &back.config_hash), bytes);
    }
}
