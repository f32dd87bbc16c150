//! Spiking convolutional network: forward simulation over T steps, BPTT with
//! surrogate gradients, and firing-rate accounting.

use crate::error::{Error, Result};
use crate::factorized::{compose_weight_backward, init_factorized_layer, FactorizedLayer};
use crate::rng::CounterRng;
use crate::tensor::{gemm, gemm_nt, gemm_tn, Tensor};

use super::arch::{NetworkPlan, Stage};
use super::lif::{surrogate_grad, surrogate_step, LifParams};
use super::loss::{orthogonality_penalty, orthogonality_penalty_grads, tet_loss_and_grad};

/// Hidden convolution storage.
#[derive(Clone, Debug, PartialEq)]
pub enum HiddenWeight {
    Factorized(FactorizedLayer),
    Dense(Tensor),
}

impl HiddenWeight {
    pub fn composed(&self) -> Result<Tensor> {
        match self {
            HiddenWeight::Factorized(l) => l.compose(),
            HiddenWeight::Dense(w) => Ok(w.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parameterization {
    Factorized,
    Dense,
}

/// Trainable tensors of one network. Also used as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    /// `(C, k*k, image channels)`
    pub stem: Tensor,
    pub hidden: Vec<HiddenWeight>,
    /// `(classes, features)`
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

impl NetworkParams {
    pub fn init(plan: &NetworkPlan, kind: Parameterization, rng: &mut CounterRng) -> Result<Self> {
        let stem_shape = plan.stem_shape();
        let bound = (6.0 / (stem_shape[1] * stem_shape[2]) as f64).sqrt();
        let stem = Tensor::from_fn(&stem_shape, |_| rng.uniform_range(-bound, bound));
        let hidden = plan
            .hidden_geometry
            .iter()
            .map(|g| {
                let layer = init_factorized_layer(g, rng)?;
                Ok(match kind {
                    Parameterization::Factorized => HiddenWeight::Factorized(layer),
                    Parameterization::Dense => HiddenWeight::Dense(layer.compose()?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let head_shape = plan.head_shape();
        let hb = 1.0 / (head_shape[1] as f64).sqrt();
        let head_weight = Tensor::from_fn(&head_shape, |_| rng.uniform_range(-hb, hb));
        let head_bias = Tensor::zeros(&[head_shape[0]]);
        Ok(Self {
            stem,
            hidden,
            head_weight,
            head_bias,
        })
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.stem];
        for h in &self.hidden {
            match h {
                HiddenWeight::Factorized(l) => {
                    out.push(&l.basis);
                    out.push(&l.factor);
                }
                HiddenWeight::Dense(w) => out.push(w),
            }
        }
        out.push(&self.head_weight);
        out.push(&self.head_bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.stem];
        for h in &mut self.hidden {
            match h {
                HiddenWeight::Factorized(l) => {
                    out.push(&mut l.basis);
                    out.push(&mut l.factor);
                }
                HiddenWeight::Dense(w) => out.push(w),
            }
        }
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
        z
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn bases(&self) -> Vec<&Tensor> {
        self.hidden
            .iter()
            .filter_map(|h| match h {
                HiddenWeight::Factorized(l) => Some(&l.basis),
                HiddenWeight::Dense(_) => None,
            })
            .collect()
    }

    pub fn parameterization(&self) -> Parameterization {
        match self.hidden.first() {
            Some(HiddenWeight::Dense(_)) => Parameterization::Dense,
            _ => Parameterization::Factorized,
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }

    /// `self += alpha * other`; both must share structure.
    pub fn axpy(&mut self, alpha: f64, other: &NetworkParams) -> Result<()> {
        let theirs = other.tensors();
        let mut mine = self.tensors_mut();
        if mine.len() != theirs.len() {
            return Err(Error::Shape("parameter sets differ in structure".into()));
        }
        for (a, b) in mine.iter_mut().zip(theirs) {
            a.axpy(alpha, b)?;
        }
        Ok(())
    }
}

/// Forward nonlinearity: exact Heaviside spikes, or the smooth arctan step
/// used to validate gradients against finite differences.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpikeMode {
    Binary,
    Smooth,
}

#[derive(Clone, Debug)]
struct ConvRecord {
    cols: Vec<f64>,
    charge: Vec<f64>,
    spikes: Vec<f64>,
}

#[derive(Clone, Debug)]
struct StepRecord {
    conv: Vec<ConvRecord>,
    pool_argmax: Vec<Vec<u32>>,
    head_input: Vec<f64>,
}

/// Everything one forward pass retains for BPTT and rate accounting.
#[derive(Clone, Debug)]
pub struct Trace {
    version: u64,
    steps: Vec<StepRecord>,
    pub logits: Tensor,
    /// Total spikes per spiking layer, summed over steps.
    pub spike_sums: Vec<f64>,
    pub neurons: Vec<usize>,
    /// Sum over steps of the mean input activity entering each compute layer.
    pub input_activity: Vec<f64>,
}

impl Trace {
    pub fn time_steps(&self) -> usize {
        self.steps.len()
    }
}

/// Mean layer spike rates over an evaluation window.
#[derive(Clone, Debug, PartialEq)]
pub struct FiringRateReport {
    /// `r_L` for every spiking layer, stem first.
    pub layer_rates: Vec<f64>,
    /// Mean per-step activity entering every compute layer (convolutions
    /// then the head). Index 0 is the encoded image.
    pub input_rates: Vec<f64>,
    pub samples: usize,
    pub time_steps: usize,
}

impl FiringRateReport {
    /// Rates of the factorized (hidden) layers only.
    pub fn hidden_rates(&self) -> &[f64] {
        &self.layer_rates[1..]
    }
}

/// Streaming mean of per-sample rates.
#[derive(Clone, Debug, Default)]
pub struct RateAccumulator {
    layer_sums: Vec<f64>,
    input_sums: Vec<f64>,
    samples: usize,
    time_steps: usize,
}

impl RateAccumulator {
    pub fn add(&mut self, trace: &Trace) {
        let t = trace.time_steps() as f64;
        if self.samples == 0 {
            self.layer_sums = vec![0.0; trace.spike_sums.len()];
            self.input_sums = vec![0.0; trace.input_activity.len()];
            self.time_steps = trace.time_steps();
        }
        for ((acc, s), n) in self.layer_sums.iter_mut().zip(&trace.spike_sums).zip(&trace.neurons) {
            *acc += s / (t * *n as f64);
        }
        for (acc, a) in self.input_sums.iter_mut().zip(&trace.input_activity) {
            *acc += a / t;
        }
        self.samples += 1;
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn report(&self) -> Result<FiringRateReport> {
        if self.samples == 0 {
            return Err(Error::State("no samples recorded".into()));
        }
        let n = self.samples as f64;
        Ok(FiringRateReport {
            layer_rates: self.layer_sums.iter().map(|s| s / n).collect(),
            input_rates: self.input_sums.iter().map(|s| s / n).collect(),
            samples: self.samples,
            time_steps: self.time_steps,
        })
    }
}

/// `r_L = (1 / (T |L|)) sum_t sum_l S_l[t]`, averaged over the traces.
pub fn record_firing_rates(traces: &[&Trace]) -> Result<FiringRateReport> {
    let mut acc = RateAccumulator::default();
    for t in traces {
        acc.add(t);
    }
    acc.report()
}

#[derive(Clone, Debug)]
pub struct SpikingNetwork {
    plan: NetworkPlan,
    params: NetworkParams,
    pub lif: LifParams,
    time_steps: usize,
    pub mode: SpikeMode,
    /// Treat the reset gate `(1 - S)` as a constant in the backward pass.
    pub detach_reset: bool,
    /// Composed convolution weights, stem first.
    weights: Vec<Tensor>,
    version: u64,
}

impl SpikingNetwork {
    pub fn new(plan: NetworkPlan, params: NetworkParams, lif: LifParams, time_steps: usize) -> Result<Self> {
        lif.validate()?;
        if time_steps == 0 {
            return Err(Error::Argument("time window must be at least one step".into()));
        }
        let mut net = Self {
            plan,
            params,
            lif,
            time_steps,
            mode: SpikeMode::Binary,
            detach_reset: true,
            weights: Vec::new(),
            version: 0,
        };
        net.check_params()?;
        net.refresh()?;
        Ok(net)
    }

    fn check_params(&self) -> Result<()> {
        let p = &self.params;
        if p.stem.shape() != self.plan.stem_shape() {
            return Err(Error::Shape(format!(
                "stem {:?}, plan wants {:?}",
                p.stem.shape(),
                self.plan.stem_shape()
            )));
        }
        if p.hidden.len() != self.plan.hidden_geometry.len() {
            return Err(Error::Shape("hidden layer count mismatch".into()));
        }
        for (h, g) in p.hidden.iter().zip(&self.plan.hidden_geometry) {
            match h {
                HiddenWeight::Factorized(l) => {
                    if l.basis.shape() != g.basis_shape() || l.factor.shape() != g.factor_shape()? {
                        return Err(Error::Shape(format!(
                            "factorized layer {:?}/{:?} does not match geometry",
                            l.basis.shape(),
                            l.factor.shape()
                        )));
                    }
                }
                HiddenWeight::Dense(w) => {
                    if w.shape() != g.weight_shape()? {
                        return Err(Error::Shape(format!(
                            "dense layer {:?} does not match geometry",
                            w.shape()
                        )));
                    }
                }
            }
        }
        if p.head_weight.shape() != self.plan.head_shape() || p.head_bias.shape() != [self.plan.classes] {
            return Err(Error::Shape("head shape mismatch".into()));
        }
        Ok(())
    }

    fn refresh(&mut self) -> Result<()> {
        let mut weights = vec![self.params.stem.clone()];
        for h in &self.params.hidden {
            weights.push(h.composed()?);
        }
        self.weights = weights;
        self.version += 1;
        Ok(())
    }

    pub fn plan(&self) -> &NetworkPlan {
        &self.plan
    }

    pub fn params(&self) -> &NetworkParams {
        &self.params
    }

    pub fn time_steps(&self) -> usize {
        self.time_steps
    }

    pub fn set_params(&mut self, params: NetworkParams) -> Result<()> {
        let old = std::mem::replace(&mut self.params, params);
        if let Err(e) = self.check_params() {
            self.params = old;
            return Err(e);
        }
        self.refresh()
    }

    /// Mutates parameters in place; traces taken before become stale.
    pub fn update_params<R>(&mut self, f: impl FnOnce(&mut NetworkParams) -> R) -> Result<R> {
        let r = f(&mut self.params);
        self.check_params()?;
        self.refresh()?;
        Ok(r)
    }

    /// Composed weight of every convolution, stem first.
    pub fn conv_weights(&self) -> &[Tensor] {
        &self.weights
    }

    /// Runs a `(T, C, H, W)` input sequence.
    pub fn forward(&self, input_seq: &Tensor) -> Result<(Tensor, Trace)> {
        let inp = self.plan.input;
        let want = [self.time_steps, inp.channels, inp.height, inp.width];
        if input_seq.shape() != want {
            return Err(Error::Shape(format!(
                "input {:?}, network wants {want:?}",
                input_seq.shape()
            )));
        }
        let n = inp.len();
        let steps: Vec<&[f64]> = (0..self.time_steps)
            .map(|t| &input_seq.data()[t * n..(t + 1) * n])
            .collect();
        self.run(&steps)
    }

    /// Direct encoding: the same `(C, H, W)` image drives every step.
    pub fn forward_image(&self, image: &[f64]) -> Result<(Tensor, Trace)> {
        if image.len() != self.plan.input.len() {
            return Err(Error::Shape(format!(
                "image has {} values, network wants {}",
                image.len(),
                self.plan.input.len()
            )));
        }
        let steps = vec![image; self.time_steps];
        self.run(&steps)
    }

    fn run(&self, steps: &[&[f64]]) -> Result<(Tensor, Trace)> {
        if steps.iter().any(|s| s.iter().any(|x| !x.is_finite())) {
            return Err(Error::Numeric("non-finite input".into()));
        }
        let lif = self.lif;
        let classes = self.plan.classes;
        let conv_count = self.plan.conv_count();
        let mut membranes: Vec<Vec<f64>> = Vec::with_capacity(conv_count);
        let mut neurons = Vec::with_capacity(conv_count);
        for s in &self.plan.stages {
            if let Stage::Conv { out_channels, height, width, .. } = *s {
                membranes.push(vec![lif.v_reset; out_channels * height * width]);
                neurons.push(out_channels * height * width);
            }
        }
        let mut spike_sums = vec![0.0; conv_count];
        let mut input_activity = vec![0.0; conv_count + 1];
        let mut logits = vec![0.0; steps.len() * classes];
        let mut records = Vec::with_capacity(steps.len());
        for (t, input) in steps.iter().enumerate() {
            let mut x: Vec<f64> = input.to_vec();
            let mut rec = StepRecord {
                conv: Vec::with_capacity(conv_count),
                pool_argmax: Vec::new(),
                head_input: Vec::new(),
            };
            let mut ci = 0usize;
            for stage in &self.plan.stages {
                match *stage {
                    Stage::Conv { in_channels, out_channels, kernel, height, width, .. } => {
                        input_activity[ci] += mean(&x);
                        let hw = height * width;
                        let k_dim = kernel * kernel * in_channels;
                        let cols = im2col(&x, in_channels, height, width, kernel);
                        let mut current = vec![0.0; out_channels * hw];
                        gemm(out_channels, k_dim, hw, self.weights[ci].data(), &cols, &mut current);
                        let v = &mut membranes[ci];
                        let mut charge = current;
                        let mut spikes = vec![0.0; charge.len()];
                        for i in 0..charge.len() {
                            let h = lif.charge(v[i], charge[i]);
                            let s = match self.mode {
                                SpikeMode::Binary => lif.fire(h),
                                SpikeMode::Smooth => surrogate_step(h - lif.v_th, lif.surrogate_alpha),
                            };
                            v[i] = lif.reset(h, s);
                            charge[i] = h;
                            spikes[i] = s;
                        }
                        spike_sums[ci] += spikes.iter().sum::<f64>();
                        x = spikes.clone();
                        rec.conv.push(ConvRecord { cols, charge, spikes });
                        ci += 1;
                    }
                    Stage::Pool { size, channels, height, width } => {
                        let (out, arg) = max_pool(&x, channels, height, width, size);
                        rec.pool_argmax.push(arg);
                        x = out;
                    }
                    Stage::Fc { in_features, classes } => {
                        input_activity[conv_count] += mean(&x);
                        let row = &mut logits[t * classes..(t + 1) * classes];
                        row.copy_from_slice(self.params.head_bias.data());
                        gemm(classes, in_features, 1, self.params.head_weight.data(), &x, row);
                        rec.head_input = x.clone();
                    }
                }
            }
            records.push(rec);
        }
        let logits = Tensor::matrix(steps.len(), classes, logits)?;
        Ok((
            logits.clone(),
            Trace {
                version: self.version,
                steps: records,
                logits,
                spike_sums,
                neurons,
                input_activity,
            },
        ))
    }

    /// Class with the largest time-averaged logit.
    pub fn predict(&self, image: &[f64]) -> Result<(usize, Trace)> {
        let (logits, trace) = self.forward_image(image)?;
        Ok((argmax_mean_logits(&logits), trace))
    }

    /// BPTT from `dL/dlogits` (shape `(T, classes)`). Hidden convolution
    /// gradients are returned as dense `dL/dW`; see [`Self::factor_grads`].
    pub fn backward_dense(&self, trace: &Trace, grad_logits: &Tensor, acc: &mut DenseGrads) -> Result<()> {
        if trace.version != self.version {
            return Err(Error::State("trace was recorded with different parameters".into()));
        }
        let t_steps = trace.time_steps();
        let classes = self.plan.classes;
        if grad_logits.shape() != [t_steps, classes] {
            return Err(Error::Shape(format!(
                "logit gradient {:?}, trace has ({t_steps}, {classes})",
                grad_logits.shape()
            )));
        }
        acc.check(self)?;
        let lif = self.lif;
        let conv_count = self.plan.conv_count();
        let mut carry: Vec<Vec<f64>> = self
            .plan
            .stages
            .iter()
            .filter_map(|s| match *s {
                Stage::Conv { out_channels, height, width, .. } => Some(vec![0.0; out_channels * height * width]),
                _ => None,
            })
            .collect();
        for t in (0..t_steps).rev() {
            let rec = &trace.steps[t];
            let dlog = &grad_logits.data()[t * classes..(t + 1) * classes];
            let mut g: Vec<f64> = Vec::new();
            let mut ci = conv_count;
            let mut pi = rec.pool_argmax.len();
            for stage in self.plan.stages.iter().rev() {
                match *stage {
                    Stage::Fc { in_features, classes } => {
                        gemm(classes, 1, in_features, dlog, &rec.head_input, acc.head_weight.data_mut());
                        acc.head_bias.data_mut().iter_mut().zip(dlog).for_each(|(b, d)| *b += d);
                        g = vec![0.0; in_features];
                        gemm_tn(in_features, classes, 1, self.params.head_weight.data(), dlog, &mut g);
                    }
                    Stage::Pool { channels, height, width, .. } => {
                        pi -= 1;
                        let mut gi = vec![0.0; channels * height * width];
                        for (o, &src) in rec.pool_argmax[pi].iter().enumerate() {
                            gi[src as usize] += g[o];
                        }
                        g = gi;
                    }
                    Stage::Conv { in_channels, out_channels, kernel, height, width, .. } => {
                        ci -= 1;
                        let cr = &rec.conv[ci];
                        let dv = &mut carry[ci];
                        let mut dh = vec![0.0; g.len()];
                        for i in 0..g.len() {
                            let h = cr.charge[i];
                            let s = cr.spikes[i];
                            let sg = surrogate_grad(h - lif.v_th, lif.surrogate_alpha);
                            let ds = if self.detach_reset { g[i] } else { g[i] + dv[i] * (lif.v_reset - h) };
                            dh[i] = ds * sg + dv[i] * (1.0 - s);
                            dv[i] = dh[i] * (1.0 - lif.tau);
                        }
                        let hw = height * width;
                        let k_dim = kernel * kernel * in_channels;
                        let dw = if ci == 0 { &mut acc.stem } else { &mut acc.conv[ci - 1] };
                        gemm_nt(out_channels, hw, k_dim, &dh, &cr.cols, dw.data_mut());
                        if ci > 0 {
                            let mut dcols = vec![0.0; k_dim * hw];
                            gemm_tn(k_dim, out_channels, hw, self.weights[ci].data(), &dh, &mut dcols);
                            g = col2im(&dcols, in_channels, height, width, kernel);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Maps accumulated dense gradients (scaled by `scale`) onto the
    /// network's own parameterization.
    pub fn factor_grads(&self, acc: &DenseGrads, scale: f64) -> Result<NetworkParams> {
        let mut hidden = Vec::with_capacity(acc.conv.len());
        for (h, dw) in self.params.hidden.iter().zip(&acc.conv) {
            let dw = dw.scale(scale);
            hidden.push(match h {
                HiddenWeight::Factorized(l) => {
                    let (db, dm) = compose_weight_backward(&l.basis, &l.factor, &dw)?;
                    HiddenWeight::Factorized(FactorizedLayer { basis: db, factor: dm, geometry: l.geometry })
                }
                HiddenWeight::Dense(_) => HiddenWeight::Dense(dw),
            });
        }
        Ok(NetworkParams {
            stem: acc.stem.scale(scale),
            hidden,
            head_weight: acc.head_weight.scale(scale),
            head_bias: acc.head_bias.scale(scale),
        })
    }

    /// Gradients of the TET loss for one recorded pass.
    pub fn backward(&self, trace: &Trace, label: usize) -> Result<NetworkParams> {
        let (_, dlog) = tet_loss_and_grad(&trace.logits, label)?;
        let mut acc = DenseGrads::zeros(self);
        self.backward_dense(trace, &dlog, &mut acc)?;
        self.factor_grads(&acc, 1.0)
    }

    /// Full local objective for one sample: TET loss plus
    /// `lambda * sum_L |B_L B_L^T - I|_F`, with gradients.
    pub fn objective(&self, image: &[f64], label: usize, lambda: f64) -> Result<(f64, NetworkParams)> {
        let (logits, trace) = self.forward_image(image)?;
        let (loss, dlog) = tet_loss_and_grad(&logits, label)?;
        let mut acc = DenseGrads::zeros(self);
        self.backward_dense(&trace, &dlog, &mut acc)?;
        let mut grads = self.factor_grads(&acc, 1.0)?;
        let penalty = self.add_orthogonality(&mut grads, lambda)?;
        Ok((loss + penalty, grads))
    }

    /// Adds the orthogonality penalty gradient into `grads`; returns the
    /// penalty value.
    pub fn add_orthogonality(&self, grads: &mut NetworkParams, lambda: f64) -> Result<f64> {
        let bases = self.params.bases();
        if bases.is_empty() || lambda == 0.0 {
            return Ok(0.0);
        }
        let penalty = orthogonality_penalty(&bases, lambda)?;
        let pg = orthogonality_penalty_grads(&bases, lambda)?;
        let mut k = 0;
        for h in &mut grads.hidden {
            if let HiddenWeight::Factorized(l) = h {
                l.basis.axpy(1.0, &pg[k])?;
                k += 1;
            }
        }
        Ok(penalty)
    }
}

/// Dense-layout gradient accumulator for a minibatch.
#[derive(Clone, Debug)]
pub struct DenseGrads {
    pub stem: Tensor,
    pub conv: Vec<Tensor>,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

impl DenseGrads {
    pub fn zeros(net: &SpikingNetwork) -> Self {
        Self {
            stem: Tensor::zeros(net.weights[0].shape()),
            conv: net.weights[1..].iter().map(|w| Tensor::zeros(w.shape())).collect(),
            head_weight: Tensor::zeros(net.params.head_weight.shape()),
            head_bias: Tensor::zeros(net.params.head_bias.shape()),
        }
    }

    fn check(&self, net: &SpikingNetwork) -> Result<()> {
        let ok = self.stem.shape() == net.weights[0].shape()
            && self.conv.len() + 1 == net.weights.len()
            && self.conv.iter().zip(&net.weights[1..]).all(|(a, b)| a.shape() == b.shape())
            && self.head_weight.shape() == net.params.head_weight.shape();
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("gradient accumulator does not match network".into()))
        }
    }
}

pub fn argmax_mean_logits(logits: &Tensor) -> usize {
    let (t, c) = (logits.rows(), logits.cols());
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for j in 0..c {
        let v: f64 = (0..t).map(|s| logits.data()[s * c + j]).sum();
        if v > best_v {
            best_v = v;
            best = j;
        }
    }
    best
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Same-padded patches: rows `kappa * C + d` (matching the `(C_out, k*k, C_in)`
/// weight layout), columns `y * W + x`.
fn im2col(x: &[f64], channels: usize, height: usize, width: usize, kernel: usize) -> Vec<f64> {
    let pad = (kernel / 2) as isize;
    let hw = height * width;
    let mut cols = vec![0.0; kernel * kernel * channels * hw];
    for ky in 0..kernel {
        for kx in 0..kernel {
            let kappa = ky * kernel + kx;
            for d in 0..channels {
                let row = &mut cols[(kappa * channels + d) * hw..(kappa * channels + d + 1) * hw];
                let plane = &x[d * hw..(d + 1) * hw];
                for y in 0..height {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= height as isize {
                        continue;
                    }
                    for xx in 0..width {
                        let sx = xx as isize + kx as isize - pad;
                        if sx < 0 || sx >= width as isize {
                            continue;
                        }
                        row[y * width + xx] = plane[sy as usize * width + sx as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], channels: usize, height: usize, width: usize, kernel: usize) -> Vec<f64> {
    let pad = (kernel / 2) as isize;
    let hw = height * width;
    let mut x = vec![0.0; channels * hw];
    for ky in 0..kernel {
        for kx in 0..kernel {
            let kappa = ky * kernel + kx;
            for d in 0..channels {
                let row = &cols[(kappa * channels + d) * hw..(kappa * channels + d + 1) * hw];
                let plane = &mut x[d * hw..(d + 1) * hw];
                for y in 0..height {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= height as isize {
                        continue;
                    }
                    for xx in 0..width {
                        let sx = xx as isize + kx as isize - pad;
                        if sx < 0 || sx >= width as isize {
                            continue;
                        }
                        plane[sy as usize * width + sx as usize] += row[y * width + xx];
                    }
                }
            }
        }
    }
    x
}

fn max_pool(x: &[f64], channels: usize, height: usize, width: usize, size: usize) -> (Vec<f64>, Vec<u32>) {
    let (oh, ow) = (height / size, width / size);
    let mut out = vec![0.0; channels * oh * ow];
    let mut arg = vec![0u32; channels * oh * ow];
    for c in 0..channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0usize;
                for dy in 0..size {
                    for dx in 0..size {
                        let i = c * height * width + (oy * size + dy) * width + ox * size + dx;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                let o = (c * oh + oy) * ow + ox;
                out[o] = best;
                arg[o] = best_i as u32;
            }
        }
    }
    (out, arg)
}

#[cfg(test)]
mod tests {
    use super::super::arch::{Architecture, InputShape};
    use super::*;

    fn small_net(seed: u64, kind: Parameterization, t: usize) -> SpikingNetwork {
        let arch = Architecture::new(
            "2C3-4C3-MP2-FC",
            InputShape { channels: 1, height: 4, width: 4 },
            3,
            2,
            2,
        )
        .unwrap();
        let plan = arch.plan(1.0).unwrap();
        let params = NetworkParams::init(&plan, kind, &mut CounterRng::new(seed)).unwrap();
        SpikingNetwork::new(plan, params, LifParams::default(), t).unwrap()
    }

    #[test]
    fn dead_network_on_zero_input() {
        let mut net = small_net(1, Parameterization::Factorized, 3);
        net.update_params(|p| p.head_bias = Tensor::new(vec![3], vec![0.1, -0.2, 0.3]).unwrap())
            .unwrap();
        let (logits, trace) = net.forward_image(&[0.0; 16]).unwrap();
        assert!(trace.spike_sums.iter().all(|&s| s == 0.0));
        for t in 0..3 {
            assert_eq!(&logits.data()[t * 3..t * 3 + 3], &[0.1, -0.2, 0.3]);
        }
        // the stem sees no input, so it cannot receive gradient
        let g = net.backward(&trace, 0).unwrap();
        assert!(g.stem.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn spikes_are_binary() {
        let net = small_net(2, Parameterization::Factorized, 4);
        let mut rng = CounterRng::new(5);
        let img: Vec<f64> = (0..16).map(|_| rng.uniform() * 3.0).collect();
        let (_, trace) = net.forward_image(&img).unwrap();
        for step in &trace.steps {
            for c in &step.conv {
                assert!(c.spikes.iter().all(|&s| s == 0.0 || s == 1.0));
            }
        }
    }

    #[test]
    fn stale_trace_rejected() {
        let mut net = small_net(3, Parameterization::Factorized, 2);
        let (_, trace) = net.forward_image(&[0.5; 16]).unwrap();
        net.update_params(|p| p.head_bias.fill(1.0)).unwrap();
        assert!(matches!(net.backward(&trace, 0), Err(Error::State(_))));
    }

    #[test]
    fn forward_shape_errors() {
        let net = small_net(4, Parameterization::Factorized, 2);
        assert!(matches!(net.forward(&Tensor::zeros(&[3, 1, 4, 4])), Err(Error::Shape(_))));
        assert!(matches!(net.forward_image(&[0.0; 15]), Err(Error::Shape(_))));
    }

    #[test]
    fn forward_sequence_matches_image_encoding() {
        let net = small_net(5, Parameterization::Dense, 3);
        let img: Vec<f64> = (0..16).map(|i| i as f64 / 10.0).collect();
        let seq = Tensor::new(vec![3, 1, 4, 4], img.repeat(3)).unwrap();
        let (a, _) = net.forward(&seq).unwrap();
        let (b, _) = net.forward_image(&img).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn firing_rate_counts() {
        let net = small_net(6, Parameterization::Factorized, 2);
        let (_, trace) = net.forward_image(&[2.0; 16]).unwrap();
        let report = record_firing_rates(&[&trace]).unwrap();
        assert!(report.layer_rates.iter().all(|r| (0.0..=1.0).contains(r)));
        let expected = trace.spike_sums[0] / (2.0 * trace.neurons[0] as f64);
        assert_eq!(report.layer_rates[0], expected);
        assert!(matches!(record_firing_rates(&[]), Err(Error::State(_))));
    }

    #[test]
    fn smooth_gradients_match_finite_differences() {
        let mut net = small_net(7, Parameterization::Factorized, 3);
        net.mode = SpikeMode::Smooth;
        net.detach_reset = false;
        assert!(net.params().num_parameters() <= 200);
        let mut rng = CounterRng::new(8);
        // move the basis off the non-differentiable point B B^T = I
        net.update_params(|p| {
            for b in p.tensors_mut() {
                b.data_mut().iter_mut().for_each(|x| *x *= 1.0 + 0.1 * rng.normal());
            }
        })
        .unwrap();
        let img: Vec<f64> = (0..16).map(|_| rng.uniform() * 2.0).collect();
        let (_, grads) = net.objective(&img, 1, 0.01).unwrap();
        let analytic: Vec<f64> = grads.tensors().iter().flat_map(|t| t.data().to_vec()).collect();
        let base = net.params().clone();
        let mut idx = 0;
        let n_tensors = base.tensors().len();
        for ti in 0..n_tensors {
            let len = base.tensors()[ti].len();
            for j in 0..len {
                let eval = |delta: f64| {
                    let mut p = base.clone();
                    p.tensors_mut()[ti].data_mut()[j] += delta;
                    let mut n2 = net.clone();
                    n2.set_params(p).unwrap();
                    n2.objective(&img, 1, 0.01).unwrap().0
                };
                let fd = (eval(1e-5) - eval(-1e-5)) / 2e-5;
                let a = analytic[idx];
                let denom = a.abs().max(fd.abs()).max(1e-6);
                assert!((a - fd).abs() / denom < 1e-4, "param {ti}/{j}: analytic {a} fd {fd}");
                idx += 1;
            }
        }
    }
}
