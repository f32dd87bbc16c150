//! Inference energy estimates from operation counts.
//!
//! ANN: every layer costs `FLOPs * E_MAC` with `FLOPs = 2 (f_in + 1) beta`.
//! SNN: the encoding layer is charged the same way; later layers only
//! accumulate on incoming spikes, `FLOPs * r * T * E_AC`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::snn::{ComputeLayer, FiringRateReport, NetworkPlan};

/// Joules per multiply-accumulate.
pub const E_MAC: f64 = 4.6e-12;
/// Joules per accumulate.
pub const E_AC: f64 = 0.9e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EnergyConstants {
    pub e_mac: f64,
    pub e_ac: f64,
}

impl Default for EnergyConstants {
    fn default() -> Self {
        Self { e_mac: E_MAC, e_ac: E_AC }
    }
}

pub fn layer_flops(layer: &ComputeLayer) -> u64 {
    if layer.neurons == 0 {
        return 0;
    }
    2 * (layer.fan_in as u64 + 1) * layer.neurons as u64
}

pub fn ann_energy(layers: &[ComputeLayer], c: &EnergyConstants) -> f64 {
    layers.iter().map(|l| layer_flops(l) as f64 * c.e_mac).sum()
}

/// `rates[i]` is the mean per-step input spike rate of `layers[i + 1]`.
pub fn snn_energy(layers: &[ComputeLayer], rates: &[f64], time_steps: usize, c: &EnergyConstants) -> Result<f64> {
    let Some((first, rest)) = layers.split_first() else {
        return Ok(0.0);
    };
    if rates.len() < rest.len() {
        return Err(Error::Argument(format!(
            "{} firing rates for {} spiking layers",
            rates.len(),
            rest.len()
        )));
    }
    let mut total = layer_flops(first) as f64 * c.e_mac;
    for (l, &r) in rest.iter().zip(rates) {
        if !(r >= 0.0) {
            return Err(Error::Argument(format!("invalid firing rate {r}")));
        }
        total += layer_flops(l) as f64 * r * time_steps as f64 * c.e_ac;
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnergyReport {
    pub scale: f64,
    pub flops: Vec<u64>,
    /// Spike-gated operations per layer; the encoding layer has none.
    pub synops: Vec<f64>,
    pub rates: Vec<f64>,
    pub time_steps: usize,
    pub constants: EnergyConstants,
    pub ann_joules: f64,
    pub snn_joules: f64,
}

/// Per-inference energy of a planned network given measured input rates.
pub fn energy_report(plan: &NetworkPlan, rates: &FiringRateReport, c: &EnergyConstants) -> Result<EnergyReport> {
    let layers = plan.compute_layers();
    if rates.input_rates.len() != layers.len() {
        return Err(Error::Argument(format!(
            "rate report covers {} layers, network has {}",
            rates.input_rates.len(),
            layers.len()
        )));
    }
    let hidden_rates = rates.input_rates[1..].to_vec();
    let t = rates.time_steps;
    let flops: Vec<u64> = layers.iter().map(layer_flops).collect();
    let mut synops = vec![0.0];
    synops.extend(
        flops[1..]
            .iter()
            .zip(&hidden_rates)
            .map(|(&f, &r)| f as f64 * r * t as f64),
    );
    Ok(EnergyReport {
        scale: plan.scale,
        ann_joules: ann_energy(&layers, c),
        snn_joules: snn_energy(&layers, &hidden_rates, t, c)?,
        flops,
        synops,
        rates: hidden_rates,
        time_steps: t,
        constants: *c,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEAD: ComputeLayer = ComputeLayer { fan_in: 6272, neurons: 10 };
    const STEM: ComputeLayer = ComputeLayer { fan_in: 9, neurons: 64 * 784 };

    #[test]
    fn flops_hand_values() {
        assert_eq!(layer_flops(&ComputeLayer { fan_in: 10, neurons: 0 }), 0);
        assert_eq!(layer_flops(&HEAD), 125_460);
        assert_eq!(layer_flops(&STEM), 1_003_520);
    }

    #[test]
    fn ann_values() {
        let c = EnergyConstants::default();
        assert_eq!(ann_energy(&[], &c), 0.0);
        assert!((ann_energy(&[HEAD], &c) - 5.77116e-7).abs() < 1e-18);
    }

    #[test]
    fn snn_values() {
        let c = EnergyConstants::default();
        let silent = snn_energy(&[STEM, HEAD], &[0.0], 10, &c).unwrap();
        assert_eq!(silent, 1_003_520.0 * E_MAC);
        let busy = snn_energy(&[STEM, HEAD], &[0.1], 10, &c).unwrap();
        assert!((busy - silent - 125_460.0 * 0.9e-12).abs() < 1e-20);
        assert!(matches!(snn_energy(&[STEM, HEAD], &[], 10, &c), Err(Error::Argument(_))));
        // r = 1, T = 1: accumulate-only layer is cheaper than its MAC version
        let spiking = snn_energy(&[STEM, HEAD], &[1.0], 1, &c).unwrap() - silent;
        assert!(spiking < ann_energy(&[HEAD], &c));
    }
}
