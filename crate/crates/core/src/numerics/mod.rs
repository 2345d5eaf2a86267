//! Dense linear algebra shared by the task generator, the attention model and
//! the gradient-flow simulator.
//!
//! Matrices and vectors are `nalgebra` dynamic types over `f64`. On top of
//! them this module provides the stable softmax, the simplex projector
//! `Π(s) = diag(s) − s sᵀ`, Haar sampling of orthogonal matrices and the
//! factored sum-of-outer-products tensors in [`tensor`].

pub mod tensor;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub use tensor::SumTensor;

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Tolerance on `‖s‖₁ − 1` (and on negative entries) accepted by the simplex
/// helpers before they refuse the input.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Numerically stable softmax.
///
/// ```
/// use stagewise::numerics::{softmax, Vector};
/// let p = softmax(&Vector::from_vec(vec![0.0, 2f64.ln()])).unwrap();
/// assert!((p[0] - 1.0 / 3.0).abs() < 1e-12);
/// ```
pub fn softmax(logits: &Vector) -> Result<Vector> {
    if logits.is_empty() {
        return Err(Error::dim("softmax of an empty vector"));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("softmax input is not finite".into()));
    }
    let mut out = logits.clone();
    softmax_in_place(out.as_mut_slice());
    Ok(out)
}

/// Unchecked softmax over a slice, for the hot loops of the attention model.
pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// Checks that `s` lies on the probability simplex within [`SIMPLEX_TOL`] and
/// returns the renormalized copy (negatives clamped to zero).
pub fn to_simplex(s: &Vector) -> Result<Vector> {
    if s.is_empty() {
        return Err(Error::dim("empty simplex vector"));
    }
    if s.iter().any(|x| !x.is_finite() || *x < -SIMPLEX_TOL) {
        return Err(Error::domain("simplex vector has a negative or non-finite entry"));
    }
    let total: f64 = s.iter().map(|x| x.max(0.0)).sum();
    if (total - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::domain(format!("simplex vector sums to {total}, not 1")));
    }
    Ok(s.map(|x| x.max(0.0) / total))
}

/// Clamps negatives to zero and rescales to unit sum in place. Returns the L1
/// size of the correction.
pub fn renormalize_simplex(s: &mut Vector) -> f64 {
    let total: f64 = s.iter().map(|x| x.max(0.0)).sum();
    let scale = if total > 0.0 { 1.0 / total } else { 1.0 };
    let mut moved = 0.0;
    for x in s.iter_mut() {
        let new = x.max(0.0) * scale;
        moved += (new - *x).abs();
        *x = new;
    }
    moved
}

/// Euclidean projection onto the probability simplex (sort-based).
pub fn project_simplex(v: &Vector) -> Vector {
    let mut u: Vec<f64> = v.iter().copied().collect();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, uj) in u.iter().enumerate() {
        cumsum += uj;
        let candidate = (cumsum - 1.0) / (j as f64 + 1.0);
        if uj - candidate > 0.0 {
            theta = candidate;
        }
    }
    v.map(|x| (x - theta).max(0.0))
}

/// The softmax Jacobian `Π(s) = diag(s) − s sᵀ`.
pub fn pi_projector(s: &Vector) -> Result<Matrix> {
    let s = to_simplex(s)?;
    let mut m = -(&s * s.transpose());
    for i in 0..s.len() {
        m[(i, i)] += s[i];
    }
    Ok(m)
}

/// `Π(s) v` without materializing the matrix.
pub fn pi_apply(s: &Vector, v: &Vector) -> Vector {
    let mut out = s.component_mul(v);
    let sv = out.sum();
    for (o, x) in out.iter_mut().zip(s.iter()) {
        *o -= x * sv;
    }
    out
}

/// `Π(s)² v`.
pub fn pi_squared_apply(s: &Vector, v: &Vector) -> Vector {
    let mut out = pi_apply(s, v);
    let sw = s.dot(&out);
    for (o, x) in out.iter_mut().zip(s.iter()) {
        *o = *o * x - x * sw;
    }
    out
}

/// Frobenius inner product `⟨A, B⟩ = tr(AᵀB)`.
pub fn frob_inner(a: &Matrix, b: &Matrix) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum()
}

/// Haar-distributed orthogonal matrix: QR of a standard Gaussian matrix with
/// the columns of `Q` multiplied by `sign(R_ii)`.
pub fn sample_orthogonal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Result<Matrix> {
    if d == 0 {
        return Err(Error::dim("orthogonal matrix of size zero"));
    }
    let g = Matrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Ok(q)
}

/// Gram–Schmidt in the Frobenius inner product, twice for stability. Every
/// output has unit Frobenius norm and the outputs are pairwise orthogonal.
pub fn frobenius_orthonormalize(mats: &[Matrix]) -> Result<Vec<Matrix>> {
    let mut out: Vec<Matrix> = Vec::with_capacity(mats.len());
    for m in mats {
        let mut v = m.clone();
        for _ in 0..2 {
            for q in &out {
                let c = frob_inner(q, &v);
                v -= q * c;
            }
        }
        let n = v.norm();
        if n < 1e-12 {
            return Err(Error::Numeric("linearly dependent matrices in Gram–Schmidt".into()));
        }
        out.push(v / n);
    }
    Ok(out)
}

/// Unit basis vector `e_i` of length `n`.
pub fn basis(n: usize, i: usize) -> Vector {
    let mut v = Vector::zeros(n);
    v[i] = 1.0;
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_row_slice(xs)
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&v(&[0.0, 0.0, 0.0])).unwrap();
        for x in p.iter() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        for c in [-30.0, 0.0, 17.5] {
            let p = softmax(&v(&[c, c + 2f64.ln()])).unwrap();
            assert!((p[0] - 1.0 / 3.0).abs() < 1e-12);
            assert!((p[1] - 2.0 / 3.0).abs() < 1e-12);
        }
        let p = softmax(&v(&[1000.0, 0.0])).unwrap();
        assert_eq!(p[0], 1.0);
        assert_eq!(p[1], 0.0);
    }

    #[test]
    fn softmax_errors() {
        assert!(matches!(softmax(&Vector::zeros(0)), Err(Error::Dimension(_))));
        assert!(matches!(softmax(&v(&[f64::NAN, 0.0])), Err(Error::Numeric(_))));
        assert!(matches!(softmax(&v(&[f64::INFINITY])), Err(Error::Numeric(_))));
    }

    #[test]
    fn pi_examples() {
        let z = pi_projector(&v(&[1.0, 0.0, 0.0])).unwrap();
        assert_eq!(z.abs().max(), 0.0);
        let m = pi_projector(&v(&[0.5, 0.5])).unwrap();
        let expect = Matrix::from_row_slice(2, 2, &[0.25, -0.25, -0.25, 0.25]);
        assert!((m - expect).abs().max() < 1e-15);
        // kernel of Π([1/2, 1/2, 0]) contains e_3 and e_1 + e_2
        let m = pi_projector(&v(&[0.5, 0.5, 0.0])).unwrap();
        assert!((&m * basis(3, 2)).norm() < 1e-15);
        assert!((&m * v(&[1.0, 1.0, 0.0])).norm() < 1e-15);
        assert!((&m * basis(3, 0)).norm() > 0.1);
    }

    #[test]
    fn pi_rejects_off_simplex() {
        assert!(matches!(pi_projector(&v(&[0.6, 0.6])), Err(Error::Domain(_))));
        assert!(matches!(pi_projector(&v(&[1.1, -0.1])), Err(Error::Domain(_))));
        // inside tolerance is renormalized
        assert!(pi_projector(&v(&[0.5 + 4e-10, 0.5])).is_ok());
    }

    #[test]
    fn orthogonal_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = sample_orthogonal(1, &mut rng).unwrap();
        assert_eq!(q[(0, 0)].abs(), 1.0);
        for d in [2, 5, 17] {
            let q = sample_orthogonal(d, &mut rng).unwrap();
            let resid = (q.transpose() * &q - Matrix::identity(d, d)).abs().max();
            assert!(resid < 1e-10);
            assert!((q.determinant().abs() - 1.0).abs() < 1e-8);
        }
        assert!(matches!(sample_orthogonal(0, &mut rng), Err(Error::Dimension(_))));
    }

    #[test]
    fn orthogonal_haar_first_entry_is_centered() {
        // ⟨Qe₁, e₁⟩ is symmetric about zero under Haar measure.
        let n = 10_000;
        let mut total = 0.0;
        for seed in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            total += sample_orthogonal(4, &mut rng).unwrap()[(0, 0)];
        }
        let mean = total / n as f64;
        assert!(mean.abs() < 3.0 / (n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn gram_schmidt_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mats: Vec<Matrix> = (0..4).map(|_| sample_orthogonal(5, &mut rng).unwrap()).collect();
        let q = frobenius_orthonormalize(&mats).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((frob_inner(&q[i], &q[j]) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn projection_lands_on_simplex() {
        let p = project_simplex(&v(&[0.3, 0.9, -0.2]));
        assert!((p.sum() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|x| *x >= 0.0));
        let s = v(&[0.2, 0.3, 0.5]);
        assert!((project_simplex(&s) - &s).norm() < 1e-15);
    }

    fn simplex_strategy(n: usize) -> impl Strategy<Value = Vector> {
        prop::collection::vec(0.0f64..1.0, n).prop_filter_map("nonzero", |xs| {
            let total: f64 = xs.iter().sum();
            (total > 1e-6).then(|| Vector::from_iterator(xs.len(), xs.iter().map(|x| x / total)))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            xs in prop::collection::vec(-50.0f64..50.0, 1..12),
            shift in -50.0f64..50.0,
        ) {
            let x = Vector::from_vec(xs);
            let p = softmax(&x).unwrap();
            prop_assert!((p.sum() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|v| *v > 0.0));
            let q = softmax(&x.add_scalar(shift)).unwrap();
            prop_assert!((p - q).abs().max() < 1e-12);
        }

        #[test]
        fn pi_is_symmetric_psd_with_ones_in_kernel(s in simplex_strategy(6)) {
            let m = pi_projector(&s).unwrap();
            prop_assert!((&m - m.transpose()).abs().max() < 1e-15);
            prop_assert!((&m * Vector::from_element(6, 1.0)).abs().max() < 1e-12);
            let eig = m.symmetric_eigenvalues();
            prop_assert!(eig.iter().all(|e| *e >= -1e-12));
        }

        #[test]
        fn pi_kernel_follows_support(
            s in simplex_strategy(6),
            mask in prop::collection::vec(any::<bool>(), 6),
        ) {
            // zero out part of the support, keep ‖s‖₁ = 1
            let mut s = s.zip_map(&Vector::from_iterator(6, mask.iter().map(|b| *b as u8 as f64)), |a, b| a * b);
            prop_assume!(s.sum() > 1e-3);
            s /= s.sum();
            let m = pi_projector(&s).unwrap();
            let mut support_sum = Vector::zeros(6);
            for j in 0..6 {
                if s[j] == 0.0 {
                    prop_assert!((&m * basis(6, j)).norm() < 1e-15);
                } else {
                    support_sum[j] = 1.0;
                }
            }
            prop_assert!((&m * support_sum).norm() < 1e-12);
        }

        #[test]
        fn pi_apply_matches_dense(s in simplex_strategy(5), xs in prop::collection::vec(-3.0f64..3.0, 5)) {
            let x = Vector::from_vec(xs);
            let m = pi_projector(&s).unwrap();
            prop_assert!((pi_apply(&s, &x) - &m * &x).norm() < 1e-12);
            prop_assert!((pi_squared_apply(&s, &x) - &m * &m * &x).norm() < 1e-12);
        }

        #[test]
        fn pi_keeps_shared_argmax_on_top(
            s in simplex_strategy(6),
            xs in prop::collection::vec(-5.0f64..5.0, 6),
            i in 0usize..6,
        ) {
            // move the maxima of s and v to index i
            let mut s = s;
            let mut x = Vector::from_vec(xs);
            let smax = s.imax();
            s.swap_rows(smax, i);
            let xmax = x.imax();
            x.swap_rows(xmax, i);
            let y = pi_apply(&s, &x);
            for j in 0..6 {
                prop_assert!(y[i] >= y[j] - 1e-12);
            }
        }
    }
}
