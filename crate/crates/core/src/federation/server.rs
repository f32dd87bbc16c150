use crate::error::{Error, Result};
use crate::factorized::{compose_weight, init_basis, init_factor, FactorizedLayer};
use crate::rng::{derive_seed, CounterRng};
use crate::snn::{Architecture, HiddenWeight, NetworkParams, NetworkPlan, Parameterization};
use crate::tensor::Tensor;

use super::hifi::TuckerModes;

const INIT_STREAM: u64 = 0x1417;
const SERVER_STREAM: u64 = 0x5E4E;

/// Global weights owned by one scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleModel {
    pub scale: f64,
    pub stem: Tensor,
    /// `M̄^p_L` per hidden layer, or the dense weight in baseline mode.
    pub hidden: Vec<Tensor>,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServerState {
    /// Completed rounds.
    pub round: usize,
    pub architecture: Architecture,
    pub parameterization: Parameterization,
    /// Global basis per hidden layer; empty for dense storage.
    pub bases: Vec<Tensor>,
    pub models: Vec<ScaleModel>,
    pub fusion_ranks: Vec<usize>,
    pub tucker_modes: TuckerModes,
    pub participation: f64,
    /// Most recent hidden-layer firing rates per scale.
    pub last_rates: Vec<Option<Vec<f64>>>,
    pub rng: CounterRng,
}

/// Leading `(blocks, inputs)` corner of a wider factor, rescaled so the
/// Kaiming variance (inversely proportional to the input width) still holds.
fn leading_slice(full: &Tensor, shape: &[usize; 3]) -> Tensor {
    let gain = (full.shape()[2] as f64 / shape[2] as f64).sqrt();
    Tensor::from_fn(shape, |i| {
        let d = i % shape[2];
        let c = (i / shape[2]) % shape[1];
        let j = i / (shape[1] * shape[2]);
        gain * full.get(&[j, c, d])
    })
}

impl ServerState {
    /// Shared bases drawn once per layer. Factors are drawn once at the
    /// widest scale and narrower scales take its leading channels; stems and
    /// heads are drawn per scale. Dense storage starts from the composed
    /// factorized draw so both parameterizations share initial weights.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        architecture: &Architecture,
        scales: &[f64],
        parameterization: Parameterization,
        fusion_ranks: &[usize],
        tucker_modes: TuckerModes,
        participation: f64,
        seed: u64,
    ) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::Argument("empty scale set".into()));
        }
        let plans = scales
            .iter()
            .map(|&p| architecture.plan(p))
            .collect::<Result<Vec<_>>>()?;
        let mut rng = CounterRng::new(derive_seed(seed, INIT_STREAM));
        let bases = plans[0]
            .hidden_geometry
            .iter()
            .map(|g| init_basis(g, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let widest = (0..plans.len())
            .max_by(|&a, &b| plans[a].scale.total_cmp(&plans[b].scale))
            .expect("non-empty");
        let reference = plans[widest]
            .hidden_geometry
            .iter()
            .map(|g| init_factor(g, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let mut models = Vec::with_capacity(scales.len());
        for plan in &plans {
            let mut srng = rng.fork(plan.scale.to_bits());
            let stem_shape = plan.stem_shape();
            let bound = (6.0 / (stem_shape[1] * stem_shape[2]) as f64).sqrt();
            let stem = Tensor::from_fn(&stem_shape, |_| srng.uniform_range(-bound, bound));
            let mut hidden = Vec::with_capacity(bases.len());
            for ((g, b), full) in plan.hidden_geometry.iter().zip(&bases).zip(&reference) {
                let m = leading_slice(full, &g.factor_shape()?);
                hidden.push(match parameterization {
                    Parameterization::Factorized => m,
                    Parameterization::Dense => compose_weight(b, &m)?,
                });
            }
            let head_shape = plan.head_shape();
            let hb = 1.0 / (head_shape[1] as f64).sqrt();
            let head_weight = Tensor::from_fn(&head_shape, |_| srng.uniform_range(-hb, hb));
            models.push(ScaleModel {
                scale: plan.scale,
                stem,
                hidden,
                head_weight,
                head_bias: Tensor::zeros(&[head_shape[0]]),
            });
        }
        Ok(Self {
            round: 0,
            architecture: architecture.clone(),
            parameterization,
            bases: match parameterization {
                Parameterization::Factorized => bases,
                Parameterization::Dense => Vec::new(),
            },
            models,
            fusion_ranks: fusion_ranks.to_vec(),
            tucker_modes,
            participation,
            last_rates: vec![None; scales.len()],
            rng: CounterRng::new(derive_seed(seed, SERVER_STREAM)),
        })
    }

    pub fn scales(&self) -> Vec<f64> {
        self.models.iter().map(|m| m.scale).collect()
    }

    pub fn scale_index(&self, scale: f64) -> Result<usize> {
        self.models
            .iter()
            .position(|m| (m.scale - scale).abs() < 1e-12)
            .ok_or_else(|| Error::Argument(format!("scale {scale} is not in the scale set {:?}", self.scales())))
    }

    pub fn plan(&self, index: usize) -> Result<NetworkPlan> {
        let model = self
            .models
            .get(index)
            .ok_or_else(|| Error::Argument(format!("no scale with index {index}")))?;
        self.architecture.plan(model.scale)
    }

    /// Trainable parameters a client at scale `index` starts from.
    pub fn client_params(&self, index: usize) -> Result<NetworkParams> {
        let plan = self.plan(index)?;
        let model = &self.models[index];
        if model.hidden.len() != plan.hidden_geometry.len() {
            return Err(Error::State("scale model does not match the architecture".into()));
        }
        let hidden = match self.parameterization {
            Parameterization::Factorized => plan
                .hidden_geometry
                .iter()
                .zip(&self.bases)
                .zip(&model.hidden)
                .map(|((g, b), m)| FactorizedLayer::new(b.clone(), m.clone(), *g).map(HiddenWeight::Factorized))
                .collect::<Result<Vec<_>>>()?,
            Parameterization::Dense => model.hidden.iter().cloned().map(HiddenWeight::Dense).collect(),
        };
        Ok(NetworkParams {
            stem: model.stem.clone(),
            hidden,
            head_weight: model.head_weight.clone(),
            head_bias: model.head_bias.clone(),
        })
    }
}

/// Global weights for scale `scale`: `W̄^p_L = compose(B̄_L, M̄^p_L)` for
/// every hidden layer, with stem and head passed through.
pub fn distribute_global(server: &ServerState, scale: f64) -> Result<NetworkParams> {
    let index = server.scale_index(scale)?;
    let params = server.client_params(index)?;
    let hidden = params
        .hidden
        .iter()
        .map(|h| h.composed().map(HiddenWeight::Dense))
        .collect::<Result<Vec<_>>>()?;
    Ok(NetworkParams { hidden, ..params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::snn::InputShape;

    fn arch() -> Architecture {
        Architecture::new(
            "4C3-8C3-MP2-8C3-FC",
            InputShape { channels: 1, height: 4, width: 4 },
            3,
            2,
            4,
        )
        .unwrap()
    }

    fn server(kind: Parameterization) -> ServerState {
        ServerState::init(&arch(), &[0.5, 1.0], kind, &[2, 1, 2], TuckerModes::Three, 0.5, 9).unwrap()
    }

    #[test]
    fn init_shapes_and_shared_start() {
        let f = server(Parameterization::Factorized);
        let d = server(Parameterization::Dense);
        assert_eq!(f.bases.len(), 2);
        assert!(d.bases.is_empty());
        for s in [0.5, 1.0] {
            let a = distribute_global(&f, s).unwrap();
            let b = distribute_global(&d, s).unwrap();
            assert_eq!(a, b);
        }
        assert_eq!(f.models[0].hidden[0].shape(), &[4, 2, 2]);
        assert_eq!(f, server(Parameterization::Factorized));
    }

    #[test]
    fn distribute_matches_contraction() {
        let mut s = server(Parameterization::Factorized);
        let mut rng = CounterRng::new(3);
        for b in &mut s.bases {
            b.data_mut().iter_mut().for_each(|x| *x = rng.normal());
        }
        let got = distribute_global(&s, 1.0).unwrap();
        for (l, h) in got.hidden.iter().enumerate() {
            let HiddenWeight::Dense(w) = h else { panic!("dense expected") };
            let b = &s.bases[l];
            let m = &s.models[1].hidden[l];
            let (kk, a1, a2) = (b.shape()[0], b.shape()[1], b.shape()[2]);
            let (blocks, d) = (m.shape()[1], m.shape()[2]);
            for c2 in 0..blocks {
                for c1 in 0..a1 {
                    for k in 0..kk {
                        for dd in 0..d {
                            let mut v = 0.0;
                            for j in 0..a2 {
                                v += b.get(&[k, c1, j]) * m.get(&[j, c2, dd]);
                            }
                            assert!((w.get(&[c1 + a1 * c2, k, dd]) - v).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn zero_factor_zero_weight_and_unknown_scale() {
        let mut s = server(Parameterization::Factorized);
        s.models[0].hidden[1].fill(0.0);
        let p = distribute_global(&s, 0.5).unwrap();
        assert!(p.hidden[1].composed().unwrap().data().iter().all(|&x| x == 0.0));
        assert!(matches!(distribute_global(&s, 0.3), Err(Error::Argument(_))));
    }
}
