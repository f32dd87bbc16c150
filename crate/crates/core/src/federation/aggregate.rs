use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Uniform elementwise mean, accumulated incrementally
/// (`m += (x - m) / k`) so identical inputs come back bit-exactly.
pub fn mean_tensors(items: &[&Tensor]) -> Result<Tensor> {
    let (first, rest) = items
        .split_first()
        .ok_or_else(|| Error::Argument("nothing to aggregate".into()))?;
    let mut acc = (*first).clone();
    for (k, t) in rest.iter().enumerate() {
        acc.check_same_shape(t)?;
        let w = 1.0 / (k + 2) as f64;
        acc.data_mut()
            .iter_mut()
            .zip(t.data())
            .for_each(|(m, &x)| *m += (x - *m) * w);
    }
    Ok(acc)
}

/// Global basis of one layer: the mean over this round's participants.
pub fn aggregate_basis(bases: &[&Tensor]) -> Result<Tensor> {
    mean_tensors(bases)
}

/// Mean of one scale's factors; `None` when the scale had no participant,
/// in which case the caller keeps the previous global factor.
pub fn aggregate_scale_factors(factors: &[&Tensor]) -> Result<Option<Tensor>> {
    if factors.is_empty() {
        return Ok(None);
    }
    mean_tensors(factors).map(Some)
}
