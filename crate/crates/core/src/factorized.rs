//! Channel-wise matrix decomposition of convolution weights.
//!
//! A convolution weight `W` of shape `(C, k*k, D)` is stored as a basis
//! `B: (k*k, a1, a2)` that has the same shape at every width, and a scale
//! factor `M: (a2, C/a1, D)` that carries the width-dependent channel modes.
//! Output channel `c` splits as `c = c1 + a1 * c2` with `c1 < a1`, and
//!
//! ```text
//! W[c, kappa, d] = sum_j B[kappa, c1, j] * M[j, c2, d]
//! ```

use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::tensor::{leading_left_vectors, qr_orthonormal, solve_spd, Tensor};

/// Channel geometry of one convolution, before width scaling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerGeometry {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub a1: usize,
    pub a2: usize,
    pub scale: f64,
    /// False for layers fed by the raw image, whose input width never scales.
    pub scale_input: bool,
}

/// Width-scaled channel counts `(C^p, D^p)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScaledDims {
    pub out_channels: usize,
    pub in_channels: usize,
}

pub fn scaled_width(channels: usize, p: f64) -> usize {
    (p * channels as f64).round() as usize
}

pub fn scale_channels(full: &LayerGeometry, p: f64) -> Result<ScaledDims> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Geometry(format!("scale {p} outside (0, 1]")));
    }
    let out_channels = scaled_width(full.out_channels, p);
    let in_channels = if full.scale_input {
        scaled_width(full.in_channels, p)
    } else {
        full.in_channels
    };
    if out_channels < full.a1 || out_channels % full.a1 != 0 {
        return Err(Error::Geometry(format!(
            "scaled output width {out_channels} (C={}, p={p}) is not a positive multiple of a1={}",
            full.out_channels, full.a1
        )));
    }
    if in_channels == 0 {
        return Err(Error::Geometry(format!(
            "scaled input width is zero (D={}, p={p})",
            full.in_channels
        )));
    }
    Ok(ScaledDims {
        out_channels,
        in_channels,
    })
}

impl LayerGeometry {
    pub fn kernel_area(&self) -> usize {
        self.kernel * self.kernel
    }

    pub fn dims(&self) -> Result<ScaledDims> {
        scale_channels(self, self.scale)
    }

    pub fn at_scale(&self, p: f64) -> Self {
        Self { scale: p, ..*self }
    }

    pub fn validate(&self) -> Result<ScaledDims> {
        if self.kernel == 0 || self.a1 == 0 || self.a2 == 0 {
            return Err(Error::Geometry("kernel, a1 and a2 must be positive".into()));
        }
        if self.a2 > self.kernel_area() * self.a1 {
            return Err(Error::Geometry(format!(
                "a2={} exceeds k^2*a1={}",
                self.a2,
                self.kernel_area() * self.a1
            )));
        }
        self.dims()
    }

    pub fn basis_shape(&self) -> [usize; 3] {
        [self.kernel_area(), self.a1, self.a2]
    }

    pub fn factor_shape(&self) -> Result<[usize; 3]> {
        let d = self.dims()?;
        Ok([self.a2, d.out_channels / self.a1, d.in_channels])
    }

    pub fn weight_shape(&self) -> Result<[usize; 3]> {
        let d = self.dims()?;
        Ok([d.out_channels, self.kernel_area(), d.in_channels])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedLayer {
    pub basis: Tensor,
    pub factor: Tensor,
    pub geometry: LayerGeometry,
}

impl FactorizedLayer {
    pub fn new(basis: Tensor, factor: Tensor, geometry: LayerGeometry) -> Result<Self> {
        geometry.validate()?;
        if basis.shape() != geometry.basis_shape() {
            return Err(Error::Shape(format!(
                "basis {:?}, geometry wants {:?}",
                basis.shape(),
                geometry.basis_shape()
            )));
        }
        if factor.shape() != geometry.factor_shape()? {
            return Err(Error::Shape(format!(
                "factor {:?}, geometry wants {:?}",
                factor.shape(),
                geometry.factor_shape()?
            )));
        }
        Ok(Self {
            basis,
            factor,
            geometry,
        })
    }

    pub fn compose(&self) -> Result<Tensor> {
        compose_weight(&self.basis, &self.factor)
    }
}

fn check_pair(basis: &Tensor, factor: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    if basis.ndim() != 3 || factor.ndim() != 3 || basis.shape()[2] != factor.shape()[0] {
        return Err(Error::Shape(format!(
            "basis {:?} incompatible with factor {:?}",
            basis.shape(),
            factor.shape()
        )));
    }
    let (kk, a1, a2) = (basis.shape()[0], basis.shape()[1], basis.shape()[2]);
    let (blocks, d) = (factor.shape()[1], factor.shape()[2]);
    Ok((kk, a1, a2, blocks, d))
}

/// `W = B · M`, shape `(a1 * blocks, k*k, D)`.
pub fn compose_weight(basis: &Tensor, factor: &Tensor) -> Result<Tensor> {
    let (kk, a1, a2, blocks, d) = check_pair(basis, factor)?;
    let c = a1 * blocks;
    let b = basis.data();
    let m = factor.data();
    let mut w = vec![0.0; c * kk * d];
    for c2 in 0..blocks {
        for c1 in 0..a1 {
            let ch = c1 + a1 * c2;
            for kappa in 0..kk {
                let out = &mut w[(ch * kk + kappa) * d..(ch * kk + kappa + 1) * d];
                let brow = &b[(kappa * a1 + c1) * a2..(kappa * a1 + c1 + 1) * a2];
                for (j, &bv) in brow.iter().enumerate() {
                    let mrow = &m[(j * blocks + c2) * d..(j * blocks + c2 + 1) * d];
                    for (o, &mv) in out.iter_mut().zip(mrow) {
                        *o += bv * mv;
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, kk, d], w)
}

/// Gradients of `compose_weight` with respect to `(B, M)` given `dL/dW`.
pub fn compose_weight_backward(
    basis: &Tensor,
    factor: &Tensor,
    grad_w: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (kk, a1, a2, blocks, d) = check_pair(basis, factor)?;
    if grad_w.shape() != [a1 * blocks, kk, d] {
        return Err(Error::Shape(format!(
            "weight gradient {:?} does not match composed shape",
            grad_w.shape()
        )));
    }
    let b = basis.data();
    let m = factor.data();
    let g = grad_w.data();
    let mut gb = vec![0.0; b.len()];
    let mut gm = vec![0.0; m.len()];
    for c2 in 0..blocks {
        for c1 in 0..a1 {
            let ch = c1 + a1 * c2;
            for kappa in 0..kk {
                let grow = &g[(ch * kk + kappa) * d..(ch * kk + kappa + 1) * d];
                let bi = (kappa * a1 + c1) * a2;
                for j in 0..a2 {
                    let mi = (j * blocks + c2) * d;
                    let mrow = &m[mi..mi + d];
                    let mut acc = 0.0;
                    for (x, y) in grow.iter().zip(mrow) {
                        acc += x * y;
                    }
                    gb[bi + j] += acc;
                    let bv = b[bi + j];
                    for (o, &gv) in gm[mi..mi + d].iter_mut().zip(grow) {
                        *o += bv * gv;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(basis.shape().to_vec(), gb)?,
        Tensor::new(factor.shape().to_vec(), gm)?,
    ))
}

/// `B` viewed as the `(a2, k*k*a1)` matrix whose rows the orthogonality
/// regularizer constrains.
pub fn matricize_basis(basis: &Tensor) -> Result<Tensor> {
    if basis.ndim() != 3 {
        return Err(Error::Shape(format!("basis must be 3-mode, got {:?}", basis.shape())));
    }
    let (kk, a1, a2) = (basis.shape()[0], basis.shape()[1], basis.shape()[2]);
    Tensor::matrix(kk * a1, a2, basis.data().to_vec())?.transpose()
}

/// Inverse of [`matricize_basis`].
pub fn basis_from_matrix(m: &Tensor, kernel_area: usize, a1: usize) -> Result<Tensor> {
    let t = m.transpose()?;
    t.reshaped(&[kernel_area, a1, m.rows()])
}

/// Kaiming-uniform scale for `M` so that the composed weight has the
/// He-normal variance `2 / fan_in` on average.
pub fn factor_init_bound(g: &LayerGeometry) -> Result<f64> {
    let d = g.dims()?;
    let fan_in = (g.kernel_area() * d.in_channels) as f64;
    let target = 2.0 / fan_in;
    // with orthonormal basis rows the mean squared column norm is a2 / (k^2 a1)
    let var_m = target * (g.kernel_area() * g.a1) as f64 / g.a2 as f64;
    Ok((3.0 * var_m).sqrt())
}

/// Row-orthonormal basis from the QR of a Gaussian draw.
pub fn init_basis(g: &LayerGeometry, rng: &mut CounterRng) -> Result<Tensor> {
    let rows = g.kernel_area() * g.a1;
    if g.a2 > rows {
        return Err(Error::Geometry(format!("a2={} exceeds k^2*a1={rows}", g.a2)));
    }
    let gauss = Tensor::from_fn(&[rows, g.a2], |_| rng.normal());
    let q = qr_orthonormal(&gauss)?;
    q.reshaped(&g.basis_shape())
}

pub fn init_factor(g: &LayerGeometry, rng: &mut CounterRng) -> Result<Tensor> {
    let bound = factor_init_bound(g)?;
    Ok(Tensor::from_fn(&g.factor_shape()?, |_| {
        rng.uniform_range(-bound, bound)
    }))
}

pub fn init_factorized_layer(g: &LayerGeometry, rng: &mut CounterRng) -> Result<FactorizedLayer> {
    g.validate()?;
    let basis = init_basis(g, rng)?;
    let factor = init_factor(g, rng)?;
    FactorizedLayer::new(basis, factor, *g)
}

/// `W` rearranged to `(k*k*a1, blocks*D)`; row `kappa*a1 + c1`, column
/// `c2*D + d`. In this layout `W = B^T_mat · M_mat`.
fn weight_as_block_matrix(w: &Tensor, kk: usize, a1: usize) -> Result<Tensor> {
    let (c, d) = (w.shape()[0], w.shape()[2]);
    let blocks = c / a1;
    let mut out = vec![0.0; kk * a1 * blocks * d];
    let cols = blocks * d;
    for c2 in 0..blocks {
        for c1 in 0..a1 {
            let ch = c1 + a1 * c2;
            for kappa in 0..kk {
                for dd in 0..d {
                    out[(kappa * a1 + c1) * cols + c2 * d + dd] = w.get(&[ch, kappa, dd]);
                }
            }
        }
    }
    Tensor::matrix(kk * a1, cols, out)
}

/// Least-squares factor for a fixed basis.
fn solve_factor(basis_t: &Tensor, wm: &Tensor) -> Result<Tensor> {
    // basis_t: (k^2 a1, a2)
    let bt = basis_t.transpose()?;
    let gram = bt.matmul(basis_t)?;
    let rhs = bt.matmul(wm)?;
    solve_spd(&gram, &rhs)
}

/// Fits `W ≈ B·M`. With `fixed_basis`, `M` is the exact least-squares
/// minimizer. Otherwise alternates basis and factor solves for ten sweeps,
/// starting from the leading left singular vectors of the block matrix.
/// Returns the layer and the residual after every solve.
pub fn project_to_factors_traced(
    w: &Tensor,
    g: &LayerGeometry,
    fixed_basis: Option<&Tensor>,
) -> Result<(FactorizedLayer, Vec<f64>)> {
    let shape = g.weight_shape()?;
    if w.shape() != shape {
        return Err(Error::Shape(format!(
            "weight {:?} does not match geometry {shape:?}",
            w.shape()
        )));
    }
    let (kk, a1, a2) = (g.kernel_area(), g.a1, g.a2);
    let fshape = g.factor_shape()?;
    let wm = weight_as_block_matrix(w, kk, a1)?;
    let residual = |bt: &Tensor, mm: &Tensor| -> Result<f64> {
        Ok(bt.matmul(mm)?.sub(&wm)?.frobenius_norm())
    };

    let mut basis_t = match fixed_basis {
        Some(b) => {
            if b.shape() != g.basis_shape() {
                return Err(Error::Shape(format!(
                    "basis {:?} does not match geometry",
                    b.shape()
                )));
            }
            Tensor::matrix(kk * a1, a2, b.data().to_vec())?
        }
        None => {
            if wm.frobenius_norm() == 0.0 {
                init_zero_basis(kk * a1, a2)?
            } else {
                leading_left_vectors(&wm, a2)?
            }
        }
    };
    let mut factor_m = solve_factor(&basis_t, &wm)?;
    let mut history = vec![residual(&basis_t, &factor_m)?];
    if fixed_basis.is_none() {
        for _ in 0..10 {
            if *history.last().unwrap() == 0.0 {
                break;
            }
            // basis step: W_m^T ≈ M^T · B_t^T
            let gram = factor_m.matmul(&factor_m.transpose()?)?;
            let rhs = factor_m.matmul(&wm.transpose()?)?;
            basis_t = solve_spd(&gram, &rhs)?.transpose()?;
            factor_m = solve_factor(&basis_t, &wm)?;
            history.push(residual(&basis_t, &factor_m)?);
        }
    }
    let basis = basis_t.reshaped(&g.basis_shape())?;
    let factor = factor_m.reshaped(&fshape)?;
    Ok((FactorizedLayer::new(basis, factor, *g)?, history))
}

pub fn project_to_factors(
    w: &Tensor,
    g: &LayerGeometry,
    fixed_basis: Option<&Tensor>,
) -> Result<FactorizedLayer> {
    project_to_factors_traced(w, g, fixed_basis).map(|(l, _)| l)
}

fn init_zero_basis(rows: usize, cols: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[rows, cols]);
    for j in 0..cols {
        t.set(&[j, j], 1.0);
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(c: usize, d: usize, k: usize, a1: usize, a2: usize, p: f64) -> LayerGeometry {
        LayerGeometry {
            out_channels: c,
            in_channels: d,
            kernel: k,
            a1,
            a2,
            scale: p,
            scale_input: true,
        }
    }

    fn brute_compose(b: &Tensor, m: &Tensor) -> Tensor {
        let (kk, a1, a2) = (b.shape()[0], b.shape()[1], b.shape()[2]);
        let (blocks, d) = (m.shape()[1], m.shape()[2]);
        let mut w = Tensor::zeros(&[a1 * blocks, kk, d]);
        for c in 0..a1 * blocks {
            let (c1, c2) = (c % a1, c / a1);
            for kappa in 0..kk {
                for dd in 0..d {
                    let mut acc = 0.0;
                    for j in 0..a2 {
                        acc += b.get(&[kappa, c1, j]) * m.get(&[j, c2, dd]);
                    }
                    w.set(&[c, kappa, dd], acc);
                }
            }
        }
        w
    }

    #[test]
    fn scale_identity_and_quarter() {
        let g = geom(64, 64, 3, 4, 16, 1.0);
        assert_eq!(
            scale_channels(&g, 1.0).unwrap(),
            ScaledDims { out_channels: 64, in_channels: 64 }
        );
        let q = scale_channels(&g, 0.25).unwrap();
        assert_eq!(q, ScaledDims { out_channels: 16, in_channels: 16 });
        assert_eq!(g.at_scale(0.25).factor_shape().unwrap(), [16, 4, 16]);
    }

    #[test]
    fn divisibility_violation() {
        let g = geom(60, 64, 3, 8, 16, 1.0);
        assert!(matches!(g.validate(), Err(Error::Geometry(_))));
        let first = LayerGeometry { scale_input: false, ..geom(64, 1, 3, 4, 16, 0.25) };
        assert_eq!(first.dims().unwrap().in_channels, 1);
    }

    #[test]
    fn zero_factor_gives_zero_weight() {
        let g = geom(4, 2, 3, 2, 4, 1.0);
        let mut rng = CounterRng::new(1);
        let b = init_basis(&g, &mut rng).unwrap();
        let w = compose_weight(&b, &Tensor::zeros(&g.factor_shape().unwrap())).unwrap();
        assert!(w.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn scalar_basis_copies_factor() {
        let b = Tensor::filled(&[9, 1, 1], 1.0);
        let mut rng = CounterRng::new(2);
        let m = Tensor::from_fn(&[1, 3, 2], |_| rng.normal());
        let w = compose_weight(&b, &m).unwrap();
        for c in 0..3 {
            for kappa in 0..9 {
                for d in 0..2 {
                    assert_eq!(w.get(&[c, kappa, d]), m.get(&[0, c, d]));
                }
            }
        }
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = CounterRng::new(3);
        let b = Tensor::from_fn(&[9, 2, 4], |_| rng.normal());
        let m = Tensor::from_fn(&[4, 2, 2], |_| rng.normal());
        let w = compose_weight(&b, &m).unwrap();
        assert_eq!(w.shape(), &[4, 9, 2]);
        assert!(w.max_abs_diff(&brute_compose(&b, &m)) < 1e-12);
    }

    #[test]
    fn backward_matches_inner_products() {
        // <dW, compose(B, M)> is linear in each argument: check via directional derivative.
        let mut rng = CounterRng::new(4);
        let b = Tensor::from_fn(&[4, 2, 3], |_| rng.normal());
        let m = Tensor::from_fn(&[3, 2, 3], |_| rng.normal());
        let gw = Tensor::from_fn(&[4, 4, 3], |_| rng.normal());
        let (gb, gm) = compose_weight_backward(&b, &m, &gw).unwrap();
        let inner = |x: &Tensor, y: &Tensor| -> f64 { x.data().iter().zip(y.data()).map(|(a, b)| a * b).sum() };
        let db = Tensor::from_fn(b.shape(), |_| rng.normal());
        let dm = Tensor::from_fn(m.shape(), |_| rng.normal());
        let lhs_b = inner(&gw, &compose_weight(&db, &m).unwrap());
        let lhs_m = inner(&gw, &compose_weight(&b, &dm).unwrap());
        assert!((lhs_b - inner(&gb, &db)).abs() < 1e-10);
        assert!((lhs_m - inner(&gm, &dm)).abs() < 1e-10);
    }

    #[test]
    fn init_is_deterministic_and_orthonormal() {
        let g = geom(16, 8, 3, 4, 16, 0.5);
        let l1 = init_factorized_layer(&g, &mut CounterRng::new(9)).unwrap();
        let l2 = init_factorized_layer(&g, &mut CounterRng::new(9)).unwrap();
        assert_eq!(l1, l2);
        let bt = matricize_basis(&l1.basis).unwrap();
        let gram = bt.matmul(&bt.transpose().unwrap()).unwrap();
        assert!(gram.max_abs_diff(&Tensor::identity(16)) < 1e-10);
    }

    #[test]
    fn composed_variance_near_kaiming() {
        let g = geom(8, 8, 3, 2, 6, 1.0);
        let fan_in = 9.0 * 8.0;
        let target = 2.0 / fan_in;
        let mut sum_sq = 0.0;
        let mut n = 0usize;
        for seed in 0..1000 {
            let l = init_factorized_layer(&g, &mut CounterRng::new(seed)).unwrap();
            let w = l.compose().unwrap();
            sum_sq += w.data().iter().map(|x| x * x).sum::<f64>();
            n += w.len();
        }
        let var = sum_sq / n as f64;
        assert!(var > target / 2.0 && var < target * 2.0, "var {var} target {target}");
    }

    #[test]
    fn project_recovers_consistent_factor() {
        let g = geom(4, 3, 3, 2, 4, 1.0);
        let l = init_factorized_layer(&g, &mut CounterRng::new(5)).unwrap();
        let w = l.compose().unwrap();
        let (p, hist) = project_to_factors_traced(&w, &g, Some(&l.basis)).unwrap();
        assert!(hist[0] < 1e-9);
        assert!(p.factor.max_abs_diff(&l.factor) < 1e-9);
    }

    #[test]
    fn project_full_rank_basis_fits_anything() {
        let g = geom(4, 2, 3, 2, 18, 1.0);
        let mut rng = CounterRng::new(6);
        let w = Tensor::from_fn(&g.weight_shape().unwrap(), |_| rng.normal());
        let basis = init_basis(&g, &mut rng).unwrap();
        let p = project_to_factors(&w, &g, Some(&basis)).unwrap();
        assert!(p.compose().unwrap().max_abs_diff(&w) < 1e-8);
    }

    #[test]
    fn project_zero_weight() {
        let g = geom(4, 2, 3, 2, 4, 1.0);
        let w = Tensor::zeros(&g.weight_shape().unwrap());
        let basis = init_basis(&g, &mut CounterRng::new(1)).unwrap();
        let (p, hist) = project_to_factors_traced(&w, &g, Some(&basis)).unwrap();
        assert!(p.factor.data().iter().all(|&x| x == 0.0));
        assert_eq!(hist[0], 0.0);
        let (_, hist) = project_to_factors_traced(&w, &g, None).unwrap();
        assert_eq!(hist[0], 0.0);
    }

    #[test]
    fn free_projection_fit_is_non_increasing() {
        let g = geom(8, 4, 3, 2, 3, 1.0);
        let mut rng = CounterRng::new(7);
        let w = Tensor::from_fn(&g.weight_shape().unwrap(), |_| rng.normal());
        let (_, hist) = project_to_factors_traced(&w, &g, None).unwrap();
        assert!(hist.len() > 1);
        assert!(hist.windows(2).all(|x| x[1] <= x[0] + 1e-9), "{hist:?}");
    }

    #[test]
    fn singular_basis_reported() {
        let g = geom(4, 2, 3, 2, 4, 1.0);
        let w = Tensor::zeros(&g.weight_shape().unwrap());
        let basis = Tensor::zeros(&g.basis_shape());
        assert!(matches!(
            project_to_factors(&w, &g, Some(&basis)),
            Err(Error::Numeric(_))
        ));
    }
}
