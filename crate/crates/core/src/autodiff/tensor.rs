//! Dense tensors over `f32`/`f64` with a shared scalar abstraction.
//!
//! Compute runs in `f32`; gradient verification instantiates the same ops in
//! `f64` (see [`crate::autodiff::gradcheck`]).

use std::fmt::Debug;

/// Scalar element of a [`Tensor`]: `f32` for training, `f64` for checks.
pub trait Scalar: num_traits::Float + Debug + Send + Sync + 'static {
    /// `c = alpha * a @ b + beta * c` with explicit strides, dispatching to
    /// the matrixmultiply kernels for both supported widths.
    ///
    /// # Safety
    /// Pointers must cover `m x k`, `k x n`, `m x n` matrices under the
    /// given strides, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64(v: f64) -> Self {
        num_traits::cast(v).expect("f64 convertible to scalar")
    }

    fn into_f64(self) -> f64 {
        num_traits::cast(self).expect("scalar convertible to f64")
    }
}

impl Scalar for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Contiguous row-major tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match buffer of {} elements",
            shape,
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Same buffer under a new shape of equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Self {
        Tensor::from_vec(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Lossy element-wise width conversion.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(Scalar::into_f64(*v)))
                .collect(),
        }
    }
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{:?}, ... {} values]", self.data[0], self.data.len())
        }
    }
}

/// `c += a @ b` with explicit strides for all three matrices, splitting the
/// output columns into fixed chunks that run in parallel. The chunking
/// depends only on the problem size, never on the worker count, so results
/// are bit-identical regardless of thread pool configuration.
#[allow(clippy::too_many_arguments)]
pub fn gemm_acc<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (isize, isize),
    b: &[T],
    (rsb, csb): (isize, isize),
    c: &mut [T],
    (rsc, csc): (isize, isize),
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let flops = 2 * m * k * n;
    // Small products are not worth the fork overhead.
    const PAR_THRESHOLD: usize = 4_000_000;
    const CHUNKS: usize = 4;
    if flops < PAR_THRESHOLD || n < CHUNKS {
        unsafe {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                T::one(),
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
        return;
    }

    struct Send2<T>(*const T);
    unsafe impl<T> Sync for Send2<T> {}
    struct SendMut<T>(*mut T);
    unsafe impl<T> Sync for SendMut<T> {}

    let step = n.div_ceil(CHUNKS);
    let pa = Send2(a.as_ptr());
    let pb = Send2(b.as_ptr());
    let pc = SendMut(c.as_mut_ptr());
    // Each chunk owns a disjoint column range of `c`; per-element accumulation
    // order inside the kernel is unaffected by the column offset.
    rayon::scope(|s| {
        for chunk in 0..CHUNKS {
            let lo = chunk * step;
            if lo >= n {
                break;
            }
            let hi = (lo + step).min(n);
            let (pa, pb, pc) = (&pa, &pb, &pc);
            s.spawn(move |_| unsafe {
                T::gemm(
                    m,
                    k,
                    hi - lo,
                    T::one(),
                    pa.0,
                    rsa,
                    csa,
                    pb.0.offset(csb * lo as isize),
                    rsb,
                    csb,
                    T::one(),
                    pc.0.offset(csc * lo as isize),
                    rsc,
                    csc,
                );
            });
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = acc;
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive() {
        let (m, k, n) = (7, 5, 9);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).cos()).collect();
        let mut c = vec![0.0; m * n];
        gemm_acc(m, k, n, &a, (k as isize, 1), &b, (n as isize, 1), &mut c, (n as isize, 1));
        let want = naive_matmul(m, k, n, &a, &b);
        for (got, want) in c.iter().zip(&want) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn gemm_parallel_path_is_deterministic() {
        let (m, k, n) = (64, 96, 512);
        let a: Vec<f32> = (0..m * k).map(|i| ((i * 31 % 97) as f32) * 0.01 - 0.5).collect();
        let b: Vec<f32> = (0..k * n).map(|i| ((i * 17 % 89) as f32) * 0.01 - 0.4).collect();
        let run = || {
            let mut c = vec![0.0f32; m * n];
            gemm_acc(m, k, n, &a, (k as isize, 1), &b, (n as isize, 1), &mut c, (n as isize, 1));
            c
        };
        let c1 = run();
        let c2 = run();
        assert_eq!(c1, c2);
    }

    #[test]
    fn tensor_reshape_keeps_data() {
        let t = Tensor::from_vec(&[2, 3], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let r = t.reshaped(&[3, 2]);
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.data(), t.data());
    }

    #[test]
    #[should_panic(expected = "does not match buffer")]
    fn tensor_shape_mismatch_panics() {
        let _ = Tensor::from_vec(&[2, 2], vec![1.0f32, 2.0, 3.0]);
    }
}
