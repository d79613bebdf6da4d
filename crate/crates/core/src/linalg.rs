//! Dense matrix products on ndarray views.

use ndarray::{ArrayBase, Data, DataMut, Ix2, LinalgScalar};

/// `c ← alpha·a·b + beta·c` for any strides, single-threaded.
///
/// Drop-in for `ndarray::linalg::general_mat_mul`; the kernel picks the widest
/// SIMD instruction set the CPU reports at runtime.
pub fn mat_mul<T, A, B, C>(
    alpha: T,
    a: &ArrayBase<A, Ix2>,
    b: &ArrayBase<B, Ix2>,
    beta: T,
    c: &mut ArrayBase<C, Ix2>,
) where
    T: LinalgScalar + PartialEq,
    A: Data<Elem = T>,
    B: Data<Elem = T>,
    C: DataMut<Elem = T>,
{
    let (m, k) = a.dim();
    let (k2, n) = b.dim();
    assert!(
        k == k2 && c.dim() == (m, n),
        "mat_mul shape mismatch: {:?}·{:?} into {:?}",
        a.dim(),
        b.dim(),
        c.dim()
    );
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.mapv_inplace(|v| v * beta);
        return;
    }
    let (sa, sb) = (a.strides(), b.strides());
    let sc = [c.strides()[0], c.strides()[1]];
    let read_dst = beta != T::zero();
    // SAFETY: the pointers and strides come from live ndarray views whose shapes
    // were checked above; `c` is uniquely borrowed and cannot alias `a` or `b`.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            c.as_mut_ptr(),
            sc[1],
            sc[0],
            read_dst,
            a.as_ptr(),
            sa[1],
            sa[0],
            b.as_ptr(),
            sb[1],
            sb[0],
            beta,
            alpha,
            false,
            false,
            false,
            gemm::Parallelism::None,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::linalg::general_mat_mul;
    use ndarray::{s, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn agrees_with_reference_for_strided_operands() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (m, k, n) in [(1, 1, 1), (7, 13, 5), (33, 64, 17), (64, 3, 90)] {
            let a = random(&mut rng, k, m);
            let b = random(&mut rng, 2 * k, n);
            let bv = b.slice(s![..;2, ..]);
            for beta in [0.0, 0.5] {
                let c0 = random(&mut rng, m, n);
                let mut want = c0.clone();
                general_mat_mul(1.5, &a.t(), &bv, beta, &mut want);
                let mut got = c0.clone();
                mat_mul(1.5, &a.t(), &bv, beta, &mut got);
                let err = (&got - &want).iter().fold(0f64, |acc, v| acc.max(v.abs()));
                assert!(err < 1e-12, "{m}x{k}x{n}: {err}");
            }
        }
    }

    #[test]
    fn zero_beta_ignores_stale_output() {
        let a = Array2::<f32>::ones((2, 3));
        let b = Array2::<f32>::ones((3, 2));
        let mut c = Array2::from_elem((2, 2), f32::NAN);
        mat_mul(1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, Array2::from_elem((2, 2), 3.0));
    }

    #[test]
    fn empty_inner_dimension_scales_output() {
        let a = Array2::<f32>::zeros((2, 0));
        let b = Array2::<f32>::zeros((0, 3));
        let mut c = Array2::from_elem((2, 3), 2.0);
        mat_mul(1.0, &a, &b, 0.5, &mut c);
        assert_eq!(c, Array2::from_elem((2, 3), 1.0));
    }
}
