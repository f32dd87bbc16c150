//! Fixed-rank Tucker decomposition: HOSVD initialization refined by HOOI.

use super::linalg::leading_left_vectors;
use super::{mode_k_product, unfold, Tensor};
use crate::error::{Error, Result};

/// Core tensor plus one column-orthonormal factor per mode.
#[derive(Clone, Debug, PartialEq)]
pub struct TuckerFactors {
    pub core: Tensor,
    /// `factors[k]` has shape `(original_dim_k, rank_k)`.
    pub factors: Vec<Tensor>,
}

#[derive(Clone, Copy, Debug)]
pub struct TuckerOptions {
    pub max_sweeps: usize,
    /// Stop once the squared-fit improvement of a sweep drops below this.
    pub tolerance: f64,
}

impl Default for TuckerOptions {
    fn default() -> Self {
        Self {
            max_sweeps: 20,
            tolerance: 1e-9,
        }
    }
}

fn check_ranks(t: &Tensor, ranks: &[usize]) -> Result<()> {
    if ranks.len() != t.ndim() {
        return Err(Error::Rank(format!(
            "{} ranks for a {}-mode tensor",
            ranks.len(),
            t.ndim()
        )));
    }
    for (k, (&r, &d)) in ranks.iter().zip(t.shape()).enumerate() {
        if r == 0 || r > d {
            return Err(Error::Rank(format!(
                "rank {r} infeasible for mode {k} of size {d}"
            )));
        }
    }
    Ok(())
}

/// Projects `t` onto every factor except `skip`: `t ×_k A_k^T` for `k != skip`.
fn project_except(t: &Tensor, factors: &[Tensor], skip: Option<usize>) -> Result<Tensor> {
    let mut y = t.clone();
    for (k, a) in factors.iter().enumerate() {
        if Some(k) == skip {
            continue;
        }
        y = mode_k_product(&y, &a.transpose()?, k)?;
    }
    Ok(y)
}

/// Orthonormal basis for mode `k`. Uncompressed modes keep the canonical
/// (identity) basis, so cores of different tensors share coordinates there.
fn mode_basis(y: &Tensor, k: usize, rank: usize) -> Result<Tensor> {
    if rank == y.shape()[k] {
        return Ok(Tensor::identity(rank));
    }
    leading_left_vectors(&unfold(y, k)?, rank)
}

/// Truncated higher-order SVD.
pub fn hosvd(t: &Tensor, ranks: &[usize]) -> Result<TuckerFactors> {
    check_ranks(t, ranks)?;
    let factors = ranks
        .iter()
        .enumerate()
        .map(|(k, &r)| mode_basis(t, k, r))
        .collect::<Result<Vec<_>>>()?;
    let core = project_except(t, &factors, None)?;
    Ok(TuckerFactors { core, factors })
}

pub fn tucker_decompose(t: &Tensor, ranks: &[usize]) -> Result<TuckerFactors> {
    tucker_decompose_traced(t, ranks, TuckerOptions::default()).map(|(f, _)| f)
}

/// HOOI from a HOSVD start. Also returns the reconstruction error (Frobenius)
/// after initialization and after each sweep.
pub fn tucker_decompose_traced(
    t: &Tensor,
    ranks: &[usize],
    opts: TuckerOptions,
) -> Result<(TuckerFactors, Vec<f64>)> {
    if !t.is_finite() {
        return Err(Error::Numeric("tucker input has non-finite entries".into()));
    }
    let mut current = hosvd(t, ranks)?;
    let norm_sq = t.frobenius_norm().powi(2);
    // For orthonormal factors the residual is |T|^2 - |G|^2.
    let residual = |core: &Tensor| (norm_sq - core.frobenius_norm().powi(2)).max(0.0).sqrt();
    let mut history = vec![residual(&current.core)];
    for _ in 0..opts.max_sweeps {
        let mut factors = current.factors.clone();
        for k in 0..t.ndim() {
            let y = project_except(t, &factors, Some(k))?;
            factors[k] = mode_basis(&y, k, ranks[k])?;
        }
        let core = project_except(t, &factors, None)?;
        let err = residual(&core);
        let prev = *history.last().expect("non-empty");
        if err > prev {
            // rounding-level regression: keep the better iterate
            break;
        }
        current = TuckerFactors { core, factors };
        history.push(err);
        if prev * prev - err * err < opts.tolerance {
            break;
        }
    }
    Ok((current, history))
}

pub fn tucker_reconstruct(f: &TuckerFactors) -> Result<Tensor> {
    if f.factors.len() != f.core.ndim() {
        return Err(Error::Shape(format!(
            "{} factors for a {}-mode core",
            f.factors.len(),
            f.core.ndim()
        )));
    }
    let mut out = f.core.clone();
    for (k, a) in f.factors.iter().enumerate() {
        if a.ndim() != 2 || a.cols() != f.core.shape()[k] {
            return Err(Error::Shape(format!(
                "factor {k} has shape {:?}, core mode is {}",
                a.shape(),
                f.core.shape()[k]
            )));
        }
        out = mode_k_product(&out, a, k)?;
    }
    Ok(out)
}
