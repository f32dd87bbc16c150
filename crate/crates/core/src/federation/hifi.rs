//! Firing-rate based fusion of heterogeneous scale factors.

use crate::error::{Error, Result};
use crate::tensor::{tucker_decompose, tucker_reconstruct, Tensor, TuckerFactors};

use super::aggregate::mean_tensors;

/// How a scale factor `M: (a2, C/a1, D)` is presented to the Tucker step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TuckerModes {
    /// Three modes, ranks `(b1, b2, b3)`.
    #[default]
    Three,
    /// Input channels folded to `(sqrt D, sqrt D)`; ranks `(b1, b2, b3, b3)`.
    /// Only defined when every `D` is a perfect square.
    Four,
}

fn argmax_lowest(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.map_or(true, |b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

/// Per scale, the most active layer; across scales, the most frequent
/// choice. Ties go to the lowest layer index in both steps.
pub fn select_fusion_layer(reports: &[&[f64]]) -> Result<usize> {
    if reports.is_empty() {
        return Err(Error::State("no firing-rate reports".into()));
    }
    let layers = reports[0].len();
    if layers == 0 || reports.iter().any(|r| r.len() != layers) {
        return Err(Error::State("reports cover different layer lists".into()));
    }
    let mut votes = vec![0usize; layers];
    for r in reports {
        votes[argmax_lowest(r).expect("non-empty")] += 1;
    }
    let mut best = 0;
    for (i, &v) in votes.iter().enumerate() {
        if v > votes[best] {
            best = i;
        }
    }
    Ok(best)
}

fn perfect_square(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    (r * r == n).then_some(r)
}

fn tucker_view(m: &Tensor, modes: TuckerModes) -> Result<Tensor> {
    if m.ndim() != 3 {
        return Err(Error::Shape(format!("scale factor must be 3-mode, got {:?}", m.shape())));
    }
    match modes {
        TuckerModes::Three => Ok(m.clone()),
        TuckerModes::Four => {
            let s = m.shape();
            let side = perfect_square(s[2]).ok_or_else(|| {
                Error::Rank(format!("four-mode fusion needs square D, got {}", s[2]))
            })?;
            m.reshape(&[s[0], s[1], side, side])
        }
    }
}

pub fn expand_ranks(ranks: &[usize], modes: TuckerModes) -> Result<Vec<usize>> {
    if ranks.len() != 3 {
        return Err(Error::Rank(format!("expected ranks (b1, b2, b3), got {ranks:?}")));
    }
    Ok(match modes {
        TuckerModes::Three => ranks.to_vec(),
        TuckerModes::Four => vec![ranks[0], ranks[1], ranks[2], ranks[2]],
    })
}

/// Checks `ranks` against one scale factor shape without decomposing.
pub fn check_fusion_ranks(factor_shape: &[usize], ranks: &[usize], modes: TuckerModes) -> Result<()> {
    let view = tucker_view(&Tensor::zeros(factor_shape), modes)?;
    let full = expand_ranks(ranks, modes)?;
    for (k, (&r, &d)) in full.iter().zip(view.shape()).enumerate() {
        if r == 0 || r > d {
            return Err(Error::Rank(format!(
                "Tucker rank {r} infeasible for mode {k} of size {d} (factor {factor_shape:?})"
            )));
        }
    }
    Ok(())
}

/// Decomposes every scale's factor for the fused layer with common ranks,
/// averages the cores over scales, and rebuilds each factor from the mean
/// core and that scale's own mode matrices.
pub fn hifi_fuse(table: &[Tensor], ranks: &[usize], modes: TuckerModes) -> Result<Vec<Tensor>> {
    if table.is_empty() {
        return Err(Error::Argument("nothing to fuse".into()));
    }
    let full = expand_ranks(ranks, modes)?;
    let mut decomposed = Vec::with_capacity(table.len());
    for m in table {
        check_fusion_ranks(m.shape(), ranks, modes)?;
        decomposed.push(tucker_decompose(&tucker_view(m, modes)?, &full)?);
    }
    let cores: Vec<&Tensor> = decomposed.iter().map(|f| &f.core).collect();
    let mean_core = mean_tensors(&cores)?;
    decomposed
        .into_iter()
        .zip(table)
        .map(|(f, m)| {
            let rebuilt = tucker_reconstruct(&TuckerFactors {
                core: mean_core.clone(),
                factors: f.factors,
            })?;
            rebuilt.reshaped(m.shape())
        })
        .collect()
}
