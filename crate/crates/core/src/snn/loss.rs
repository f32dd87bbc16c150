use crate::error::{Error, Result};
use crate::factorized::matricize_basis;
use crate::tensor::Tensor;

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

fn check_logits(logits: &Tensor, label: usize) -> Result<(usize, usize)> {
    if logits.ndim() != 2 {
        return Err(Error::Shape(format!(
            "logits must be (T, classes), got {:?}",
            logits.shape()
        )));
    }
    let (t, classes) = (logits.rows(), logits.cols());
    if label >= classes {
        return Err(Error::Argument(format!("label {label} out of range for {classes} classes")));
    }
    Ok((t, classes))
}

/// Mean over time steps of the per-step cross-entropy.
pub fn tet_loss(logits_per_t: &Tensor, label: usize) -> Result<f64> {
    tet_loss_and_grad(logits_per_t, label).map(|(l, _)| l)
}

/// Loss and `dL/dlogits`, shape `(T, classes)`.
pub fn tet_loss_and_grad(logits_per_t: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    let (t, classes) = check_logits(logits_per_t, label)?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; t * classes];
    for step in 0..t {
        let row = &logits_per_t.data()[step * classes..(step + 1) * classes];
        let ls = log_softmax(row);
        loss -= ls[label];
        for c in 0..classes {
            let p = ls[c].exp();
            grad[step * classes + c] = (p - if c == label { 1.0 } else { 0.0 }) / t as f64;
        }
    }
    Ok((loss / t as f64, Tensor::matrix(t, classes, grad)?))
}

fn orthogonality_residual(basis: &Tensor) -> Result<(Tensor, Tensor)> {
    let bt = matricize_basis(basis)?;
    if bt.rows() > bt.cols() {
        return Err(Error::InfeasibleOrthogonality(format!(
            "a2={} exceeds k^2*a1={}",
            bt.rows(),
            bt.cols()
        )));
    }
    let gram = bt.matmul(&bt.transpose()?)?;
    let e = gram.sub(&Tensor::identity(bt.rows()))?;
    Ok((bt, e))
}

/// `lambda * sum_L |B_L B_L^T - I|_F` over matricized bases.
pub fn orthogonality_penalty(bases: &[&Tensor], lambda: f64) -> Result<f64> {
    let mut total = 0.0;
    for b in bases {
        let (_, e) = orthogonality_residual(b)?;
        total += e.frobenius_norm();
    }
    Ok(lambda * total)
}

/// Gradient of the penalty with respect to each basis, in basis layout.
/// At exact orthogonality the norm is not differentiable; zero is returned.
pub fn orthogonality_penalty_grads(bases: &[&Tensor], lambda: f64) -> Result<Vec<Tensor>> {
    bases
        .iter()
        .map(|b| {
            let (bt, e) = orthogonality_residual(b)?;
            let norm = e.frobenius_norm();
            if norm == 0.0 || lambda == 0.0 {
                return Ok(Tensor::zeros(b.shape()));
            }
            // d|E|_F / dBt = 2 E Bt / |E|_F  (E symmetric)
            let g = e.matmul(&bt)?.scale(2.0 * lambda / norm);
            g.transpose()?.reshaped(b.shape())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    #[test]
    fn single_step_is_cross_entropy() {
        let logits = Tensor::matrix(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let z: f64 = [0.5f64, -1.0, 2.0].iter().map(|x| x.exp()).sum();
        let ce = -(2.0f64.exp() / z).ln();
        assert!((tet_loss(&logits, 2).unwrap() - ce).abs() < 1e-12);
        let repeated = Tensor::matrix(3, 3, [0.5, -1.0, 2.0].repeat(3)).unwrap();
        assert!((tet_loss(&repeated, 2).unwrap() - ce).abs() < 1e-12);
    }

    #[test]
    fn two_step_hand_value() {
        let logits = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = (1.0 + (-1.0f64).exp()).ln();
        let b = (1.0 + 1.0f64.exp()).ln();
        let l = tet_loss(&logits, 0).unwrap();
        assert!((l - (a + b) / 2.0).abs() < 1e-12);
        assert!((l - 0.8133).abs() < 1e-4);
    }

    #[test]
    fn label_out_of_range() {
        let logits = Tensor::zeros(&[2, 3]);
        assert!(matches!(tet_loss(&logits, 3), Err(Error::Argument(_))));
    }

    #[test]
    fn tet_grad_matches_finite_difference() {
        let mut rng = CounterRng::new(1);
        let logits = Tensor::from_fn(&[3, 4], |_| rng.normal());
        let (_, g) = tet_loss_and_grad(&logits, 1).unwrap();
        for i in 0..logits.len() {
            let mut up = logits.clone();
            up.data_mut()[i] += 1e-6;
            let mut dn = logits.clone();
            dn.data_mut()[i] -= 1e-6;
            let fd = (tet_loss(&up, 1).unwrap() - tet_loss(&dn, 1).unwrap()) / 2e-6;
            assert!((fd - g.data()[i]).abs() < 1e-7);
        }
    }

    fn padded_basis(diag: f64) -> Tensor {
        // k = 1, a1 = 3, a2 = 2: Bt = [[d,0,0],[0,d,0]]
        let mut b = Tensor::zeros(&[1, 3, 2]);
        b.set(&[0, 0, 0], diag);
        b.set(&[0, 1, 1], diag);
        b
    }

    #[test]
    fn penalty_values() {
        assert_eq!(orthogonality_penalty(&[&padded_basis(1.0)], 1.0).unwrap(), 0.0);
        assert_eq!(orthogonality_penalty(&[&padded_basis(2.0)], 0.0).unwrap(), 0.0);
        let p = orthogonality_penalty(&[&padded_basis(2.0)], 0.5).unwrap();
        assert!((p - 0.5 * 18f64.sqrt()).abs() < 1e-12);
        let infeasible = Tensor::zeros(&[1, 1, 2]);
        assert!(matches!(
            orthogonality_penalty(&[&infeasible], 1.0),
            Err(Error::InfeasibleOrthogonality(_))
        ));
    }

    #[test]
    fn penalty_grad_matches_finite_difference_and_is_linear() {
        let mut rng = CounterRng::new(2);
        let b = Tensor::from_fn(&[4, 2, 3], |_| rng.normal());
        let g = &orthogonality_penalty_grads(&[&b], 0.3).unwrap()[0];
        for i in 0..b.len() {
            let mut up = b.clone();
            up.data_mut()[i] += 1e-6;
            let mut dn = b.clone();
            dn.data_mut()[i] -= 1e-6;
            let fd = (orthogonality_penalty(&[&up], 0.3).unwrap()
                - orthogonality_penalty(&[&dn], 0.3).unwrap())
                / 2e-6;
            assert!((fd - g.data()[i]).abs() < 1e-6);
        }
        let g2 = &orthogonality_penalty_grads(&[&b], 0.6).unwrap()[0];
        assert!(g2.max_abs_diff(&g.scale(2.0)) < 1e-12);
    }
}
