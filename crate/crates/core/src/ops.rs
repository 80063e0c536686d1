//! Value-level kernels shared by the tape and by inference-only paths.

use alloc::vec;
use alloc::vec::Vec;

use crate::{bail, Error, Result, Scalar, Tensor};

/// Floor applied to probabilities before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Epsilon inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// `c[m×n] = a[m×k] · b[k×n]`, all row-major.
pub(crate) fn matmul_into<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    c.iter_mut().for_each(|v| *v = F::zero());
    gemm_acc(a, b, c, m, k, n);
}

const BLOCK: usize = 16;

/// `c += a · b`. Each output entry is summed in ascending `k` order into a
/// register block, then added to `c`.
pub(crate) fn gemm_acc<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        let mut j0 = 0;
        while j0 + BLOCK <= n {
            let mut acc = [F::zero(); BLOCK];
            for (p, &aip) in arow.iter().enumerate() {
                let brow: &[F; BLOCK] = b[p * n + j0..p * n + j0 + BLOCK].try_into().expect("block");
                for t in 0..BLOCK {
                    acc[t] = acc[t] + aip * brow[t];
                }
            }
            for (cv, &x) in crow[j0..j0 + BLOCK].iter_mut().zip(&acc) {
                *cv = *cv + x;
            }
            j0 += BLOCK;
        }
        if j0 < n {
            let w = n - j0;
            let mut acc = [F::zero(); BLOCK];
            for (p, &aip) in arow.iter().enumerate() {
                for (x, &y) in acc[..w].iter_mut().zip(&b[p * n + j0..(p + 1) * n]) {
                    *x = *x + aip * y;
                }
            }
            for (cv, &x) in crow[j0..].iter_mut().zip(&acc[..w]) {
                *cv = *cv + x;
            }
        }
    }
}

/// Row-major transpose of an `r × c` matrix.
pub(crate) fn transpose<F: Scalar>(x: &[F], r: usize, c: usize) -> Vec<F> {
    let mut t = vec![F::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            t[j * r + i] = x[i * c + j];
        }
    }
    t
}

pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, k, n) = matmul_dims(a.shape(), b.shape())?;
    let mut out = vec![F::zero(); m * n];
    matmul_into(a.values(), b.values(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
        return Err(Error::Dimension {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok((a[0], a[1], b[1]))
}

/// Row-wise `softmax(z / t)` with max subtraction.
pub(crate) fn softmax_rows_into<F: Scalar>(z: &[F], out: &mut [F], cols: usize, t: F) {
    for (zr, or) in z.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = zr.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for (o, &v) in or.iter_mut().zip(zr) {
            *o = ((v - max) / t).exp();
            sum = sum + *o;
        }
        for o in or.iter_mut() {
            *o = *o / sum;
        }
    }
}

pub(crate) fn check_temperature<F: Scalar>(t: F) -> Result<()> {
    if !(t > F::zero()) || !t.is_finite() {
        bail!(Parameter, "temperature must be positive and finite, got {t}");
    }
    Ok(())
}

pub fn softmax_rows<F: Scalar>(z: &Tensor<F>, t: F) -> Result<Tensor<F>> {
    check_temperature(t)?;
    if z.values().iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("softmax_rows"));
    }
    let mut out = vec![F::zero(); z.len()];
    softmax_rows_into(z.values(), &mut out, z.cols(), t);
    Tensor::new(z.shape().to_vec(), out)
}

/// Softmax of a single logit vector.
pub fn softmax<F: Scalar>(z: &[F], t: F) -> Vec<F> {
    let mut out = vec![F::zero(); z.len()];
    softmax_rows_into(z, &mut out, z.len(), t);
    out
}

pub(crate) fn floored_ln<F: Scalar>(p: F) -> F {
    p.max(F::of(PROB_FLOOR)).ln()
}

/// `-Σ target_c · ln(pred_c)` with the probability floor.
pub fn cross_entropy<F: Scalar>(target: &[F], pred: &[F]) -> Result<F> {
    if target.len() != pred.len() {
        return Err(Error::Dimension {
            op: "cross_entropy",
            lhs: vec![target.len()],
            rhs: vec![pred.len()],
        });
    }
    for (name, v) in [("target", target), ("pred", pred)] {
        let sum: f64 = v.iter().map(|x| x.f64()).sum();
        if v.iter().any(|x| x.f64() < 0.0) || (sum - 1.0).abs() > 1e-6 {
            bail!(Input, "{name} is not a probability vector (sum {sum})");
        }
    }
    Ok(cross_entropy_unchecked(target, pred))
}

pub(crate) fn cross_entropy_unchecked<F: Scalar>(target: &[F], pred: &[F]) -> F {
    let mut acc = F::zero();
    for (&t, &p) in target.iter().zip(pred) {
        if t != F::zero() {
            acc = acc - t * floored_ln(p);
        }
    }
    acc
}

pub fn mse<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<F> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op: "mse",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let sum: F = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum();
    Ok(sum / F::of(a.len() as f64))
}

/// Normalizes each row; returns (output, xhat, rstd).
pub(crate) fn layer_norm_rows<F: Scalar>(
    x: &[F],
    gain: &[F],
    bias: &[F],
    d: usize,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let rows = x.len() / d;
    let mut out = vec![F::zero(); x.len()];
    let mut xhat = vec![F::zero(); x.len()];
    let mut rstd = vec![F::zero(); rows];
    let inv_d = F::of(1.0 / d as f64);
    let eps = F::of(LAYER_NORM_EPS);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<F>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let rs = F::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let h = (xr[c] - mean) * rs;
            xhat[r * d + c] = h;
            out[r * d + c] = h * gain[c] + bias[c];
        }
    }
    (out, xhat, rstd)
}

pub fn layer_norm<F: Scalar>(x: &Tensor<F>, gain: &Tensor<F>, bias: &Tensor<F>) -> Result<Tensor<F>> {
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(Error::Dimension {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gain.shape().to_vec(),
        });
    }
    let (out, _, _) = layer_norm_rows(x.values(), gain.values(), bias.values(), d);
    Tensor::new(x.shape().to_vec(), out)
}

/// `tanh` through a single `exp`, which is markedly cheaper than the libm
/// routine in the GELU hot path.
fn fast_tanh<F: Scalar>(u: F) -> F {
    let two = F::of(2.0);
    F::one() - two / ((two * u).exp() + F::one())
}

pub(crate) fn gelu<F: Scalar>(x: F) -> F {
    let c = F::of(GELU_C);
    let k = F::of(GELU_K);
    let half = F::of(0.5);
    half * x * (F::one() + fast_tanh(c * (x + k * x * x * x)))
}

pub(crate) fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::of(GELU_C);
    let k = F::of(GELU_K);
    let half = F::of(0.5);
    let t = fast_tanh(c * (x + k * x * x * x));
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::of(3.0) * k * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let id = t(&[2, 2], &[1., 0., 0., 1.]);
        let b = t(&[2, 2], &[3., 4., 5., 6.]);
        assert_eq!(matmul(&id, &b).unwrap().values(), b.values());
        assert_eq!(matmul(&t(&[1, 1], &[2.]), &t(&[1, 1], &[3.])).unwrap().values(), &[6.]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::seed(3);
        let a = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[4, 2], 1.0, &mut rng);
        let c = matmul(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for p in 0..4 {
                    s += a.values()[i * 4 + p] * b.values()[p * 2 + j];
                }
                assert!((c.values()[i * 2 + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::<f64>::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        assert_eq!(
            err,
            Error::Dimension {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&t(&[1, 2], &[0., 0.]), 3.0).unwrap();
        assert_eq!(s.values(), &[0.5, 0.5]);
        let s = softmax_rows(&t(&[1, 2], &[core::f64::consts::LN_2, 0.]), 1.0).unwrap();
        assert!((s.values()[0] - 2. / 3.).abs() < 1e-12);
        assert!((s.values()[1] - 1. / 3.).abs() < 1e-12);
        let s = softmax_rows(&t(&[1, 2], &[2., 0.]), 2.0).unwrap();
        let e = core::f64::consts::E;
        assert!((s.values()[0] - e / (e + 1.)).abs() < 1e-12);
        assert!((s.values()[0] - 0.7311).abs() < 1e-4);
        assert!((s.values()[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn softmax_errors() {
        let z = t(&[1, 2], &[0., 1.]);
        assert!(matches!(softmax_rows(&z, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(softmax_rows(&z, -1.0), Err(Error::Parameter(_))));
        let bad = t(&[1, 2], &[f64::NAN, 1.]);
        assert_eq!(softmax_rows(&bad, 1.0), Err(Error::Numeric("softmax_rows")));
    }

    #[test]
    fn cross_entropy_examples() {
        let ln2 = core::f64::consts::LN_2;
        assert_eq!(cross_entropy(&[1., 0.], &[1., 0.]).unwrap(), 0.0);
        assert!((cross_entropy(&[1., 0.], &[0.5, 0.5]).unwrap() - ln2).abs() < 1e-15);
        assert!((cross_entropy(&[0.5, 0.5], &[0.5, 0.5]).unwrap() - ln2).abs() < 1e-15);
        assert!(matches!(cross_entropy(&[1., 0.], &[1.]), Err(Error::Dimension { .. })));
        // Floor keeps a zero gold probability finite.
        let ce = cross_entropy(&[1., 0.], &[0., 1.]).unwrap();
        assert!((ce - 1e12f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn mse_examples() {
        let a = t(&[1, 1], &[1.]);
        let b = t(&[1, 1], &[3.]);
        assert_eq!(mse(&a, &b).unwrap(), 4.0);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert!(mse(&a, &t(&[1, 2], &[0., 0.])).is_err());

        let mut rng = Rng::seed(11);
        let x = Tensor::<f64>::randn(&[2, 3], 1.0, &mut rng);
        let y = Tensor::<f64>::randn(&[2, 3], 1.0, &mut rng);
        let mut s = 0.0;
        for i in 0..6 {
            let d = x.values()[i] - y.values()[i];
            s += d * d;
        }
        assert!((mse(&x, &y).unwrap() - s / 6.0).abs() < 1e-14);
        assert_eq!(mse(&x, &y).unwrap(), mse(&y, &x).unwrap());
    }

    #[test]
    fn layer_norm_examples() {
        let g = t(&[2], &[1., 1.]);
        let b = t(&[2], &[0., 0.]);
        let y = layer_norm(&t(&[1, 2], &[3., 3.]), &g, &b).unwrap();
        assert_eq!(y.values(), &[0., 0.]);
        let y = layer_norm(&t(&[1, 2], &[1., -1.]), &g, &b).unwrap();
        assert!((y.values()[0] - 1.0).abs() < 1e-5);
        assert!((y.values()[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_matches_scalar_loop() {
        let mut rng = Rng::seed(5);
        let x = Tensor::<f64>::randn(&[4, 8], 2.0, &mut rng);
        let g = Tensor::<f64>::randn(&[8], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[8], 1.0, &mut rng);
        let y = layer_norm(&x, &g, &b).unwrap();
        for r in 0..4 {
            let row = &x.values()[r * 8..r * 8 + 8];
            let mut mean = 0.0;
            for v in row {
                mean += v;
            }
            mean /= 8.0;
            let mut var = 0.0;
            for v in row {
                var += (v - mean) * (v - mean);
            }
            var /= 8.0;
            for c in 0..8 {
                let want = (row[c] - mean) / num_traits::Float::sqrt(var + 1e-5) * g.values()[c] + b.values()[c];
                assert!((y.values()[r * 8 + c] - want).abs() < 1e-12);
            }
        }
    }
}
