//! Class-conditioned Gaussian blob images.

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Standard deviation of additive pixel noise; 0 means infinite SNR.
    pub noise: f64,
    /// Maximum random translation (pixels) of the class prototype.
    pub max_shift: usize,
    /// Gaussian bumps per class prototype.
    pub blobs: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            train_per_class: 100,
            test_per_class: 50,
            channels: 1,
            height: 12,
            width: 12,
            noise: 0.3,
            max_shift: 1,
            blobs: 3,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Argument("synthetic data needs at least two classes".into()));
        }
        if self.channels == 0 || self.height == 0 || self.width == 0 || self.blobs == 0 {
            return Err(Error::Argument("synthetic image dimensions must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Argument(format!("noise {} must be non-negative", self.noise)));
        }
        Ok(())
    }
}

fn prototypes(spec: &SynthSpec, rng: &mut CounterRng) -> Vec<Vec<f64>> {
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let scale = h.min(w) as f64 / 8.0;
    (0..spec.classes)
        .map(|_| {
            let mut img = vec![0.0; c * h * w];
            for ch in 0..c {
                for _ in 0..spec.blobs {
                    let cy = rng.uniform_range(0.0, h as f64);
                    let cx = rng.uniform_range(0.0, w as f64);
                    let sigma = rng.uniform_range(0.8, 2.0) * scale;
                    let amp = rng.uniform_range(0.5, 1.0);
                    for y in 0..h {
                        for x in 0..w {
                            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                            img[(ch * h + y) * w + x] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                        }
                    }
                }
            }
            let max = img.iter().cloned().fold(0.0, f64::max);
            if max > 0.0 {
                img.iter_mut().for_each(|v| *v /= max);
            }
            img
        })
        .collect()
}

fn draw(spec: &SynthSpec, protos: &[Vec<f64>], per_class: usize, rng: &mut CounterRng) -> Result<Dataset> {
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let n = per_class * spec.classes;
    if n == 0 {
        return Err(Error::Argument("synthetic split would be empty".into()));
    }
    let mut data = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    let shift = spec.max_shift as i64;
    for _ in 0..per_class {
        for (class, proto) in protos.iter().enumerate() {
            let dy = rng.below(2 * shift as u64 + 1) as i64 - shift;
            let dx = rng.below(2 * shift as u64 + 1) as i64 - shift;
            for ch in 0..c {
                for y in 0..h as i64 {
                    for x in 0..w as i64 {
                        let (sy, sx) = (y - dy, x - dx);
                        let base = if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                            proto[(ch * h + sy as usize) * w + sx as usize]
                        } else {
                            0.0
                        };
                        let v = if spec.noise > 0.0 { base + spec.noise * rng.normal() } else { base };
                        data.push(v.clamp(0.0, 1.0));
                    }
                }
            }
            labels.push(class);
        }
    }
    Dataset::new(Tensor::new(vec![n, c, h, w], data)?, labels, spec.classes)
}

/// Train and test sets sharing the same class prototypes.
pub fn synth_split(spec: &SynthSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let root = CounterRng::new(seed);
    let protos = prototypes(spec, &mut root.fork(0));
    let train = draw(spec, &protos, spec.train_per_class, &mut root.fork(1))?;
    let test = draw(spec, &protos, spec.test_per_class, &mut root.fork(2))?;
    Ok((train, test))
}

/// The training split of [`synth_split`].
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    synth_split(spec, seed).map(|(train, _)| train)
}
