//! Dense row-major tensors and the numerical kernels everything else uses.
//!
//! Shape errors are programming errors and panic with a descriptive message;
//! user-facing input errors (files, configs) live in the fallible IO layers.
//!
//! Determinism contract: every reduction (matmul inner product, softmax row
//! sums, norms) accumulates sequentially in ascending index order. Optional
//! parallelism only ever splits work across independent output elements, so
//! results are bit-identical for any thread count.

use std::sync::Arc;

use crate::scalar::Scalar;

/// Row-major dense tensor. Cheap to clone (shared buffer).
#[derive(Clone, Debug)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "tensor shape {:?} wants {} values, got {}",
            shape,
            numel,
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![T::ZERO; numel])
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![v; numel])
    }

    pub fn scalar(v: T) -> Self {
        Tensor::new(&[], vec![v])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, (0..numel).map(|i| f(i)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Same buffer, new shape (element count must match).
    pub fn reshape(&self, shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            self.numel(),
            "reshape {:?} -> {:?} changes element count",
            self.shape,
            shape
        );
        Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        }
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.to_vec()
    }

    /// Mutable view; copies the buffer first if it is shared.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn map(&self, f: impl Fn(T) -> T + Sync) -> Self {
        Tensor::new(&self.shape, self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Last-axis extent; panics on rank 0.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("last_dim on rank-0 tensor")
    }

    pub fn convert<U: Scalar>(&self) -> Tensor<U> {
        Tensor::new(
            &self.shape,
            self.data.iter().map(|x| U::from_f64(x.to_f64())).collect(),
        )
    }
}

impl<T: Scalar> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && *self.data == *other.data
    }
}

// ---------------------------------------------------------------------------
// Thread pool
// ---------------------------------------------------------------------------

/// Global pool capped by the BVW_THREADS environment variable (default: all
/// available cores). Kernels split only over independent output rows.
pub fn pool() -> &'static rayon::ThreadPool {
    use std::sync::OnceLock;
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let avail = std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1);
        let n = std::env::var("BVW_THREADS")
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .unwrap_or(avail);
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("thread pool")
    })
}

pub fn threads() -> usize {
    pool().current_num_threads()
}

// ---------------------------------------------------------------------------
// Matrix multiplication
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trans {
    N,
    T,
}

fn mm_dims(shape: &[usize], t: Trans) -> (usize, usize) {
    match t {
        Trans::N => (shape[0], shape[1]),
        Trans::T => (shape[1], shape[0]),
    }
}

/// c[m,n] += op_a(a)[m,k] * op_b(b)[k,n] over raw slices.
///
/// Inner accumulation per output element runs in ascending k order; the
/// parallel split is over rows of c only.
fn mm_kernel<T: Scalar>(
    a: &[T],
    ash: (usize, usize),
    ta: Trans,
    b: &[T],
    bsh: (usize, usize),
    tb: Trans,
    c: &mut [T],
) {
    let (m, ka) = mm_dims(&[ash.0, ash.1], ta);
    let (kb, n) = mm_dims(&[bsh.0, bsh.1], tb);
    assert_eq!(
        ka, kb,
        "matmul inner extents differ: {:?}{:?} x {:?}{:?}",
        ash, ta, bsh, tb
    );
    let k = ka;
    if m == 0 || n == 0 {
        return;
    }
    let rows: Vec<(usize, &mut [T])> = c.chunks_mut(n).enumerate().collect();
    let body = |(i, crow): (usize, &mut [T])| {
        match (ta, tb) {
            (Trans::N, Trans::N) => {
                // c_i += sum_p a[i,p] * b[p,:]
                for p in 0..k {
                    let aip = a[i * k + p];
                    if aip == T::ZERO {
                        continue;
                    }
                    let brow = &b[p * n..(p + 1) * n];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += aip * bv;
                    }
                }
            }
            (Trans::N, Trans::T) => {
                // c[i,j] = dot(a[i,:], b[j,:])
                let arow = &a[i * k..(i + 1) * k];
                for (j, cv) in crow.iter_mut().enumerate() {
                    let brow = &b[j * k..(j + 1) * k];
                    let mut acc = T::ZERO;
                    for (&av, &bv) in arow.iter().zip(brow) {
                        acc += av * bv;
                    }
                    *cv += acc;
                }
            }
            (Trans::T, Trans::N) => {
                // c[i,j] = sum_p a[p,i] * b[p,j]
                for p in 0..k {
                    let api = a[p * m + i];
                    if api == T::ZERO {
                        continue;
                    }
                    let brow = &b[p * n..(p + 1) * n];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += api * bv;
                    }
                }
            }
            (Trans::T, Trans::T) => {
                // c[i,j] = sum_p a[p,i] * b[j,p]
                for (j, cv) in crow.iter_mut().enumerate() {
                    let brow = &b[j * k..(j + 1) * k];
                    let mut acc = T::ZERO;
                    for p in 0..k {
                        acc += a[p * m + i] * brow[p];
                    }
                    *cv += acc;
                }
            }
        }
    };
    // Parallel only when the pool has threads to use and the work is real.
    if threads() > 1 && m * n * k >= 1 << 16 {
        use rayon::prelude::*;
        pool().install(|| rows.into_par_iter().for_each(body));
    } else {
        rows.into_iter().for_each(body);
    }
}

/// 2-D matrix product with optional transposes.
pub fn mm<T: Scalar>(a: &Tensor<T>, ta: Trans, b: &Tensor<T>, tb: Trans) -> Tensor<T> {
    assert_eq!(a.shape().len(), 2, "mm lhs must be 2-D, got {:?}", a.shape());
    assert_eq!(b.shape().len(), 2, "mm rhs must be 2-D, got {:?}", b.shape());
    let ash = (a.shape()[0], a.shape()[1]);
    let bsh = (b.shape()[0], b.shape()[1]);
    let (m, _) = mm_dims(&[ash.0, ash.1], ta);
    let (_, n) = mm_dims(&[bsh.0, bsh.1], tb);
    let mut c = vec![T::ZERO; m * n];
    mm_kernel(a.data(), ash, ta, b.data(), bsh, tb, &mut c);
    Tensor::new(&[m, n], c)
}

/// Batched 3-D matmul: [B,m,k] x [B,k,n] -> [B,m,n], transposes applied to
/// the trailing two axes.
pub fn bmm<T: Scalar>(a: &Tensor<T>, ta: Trans, b: &Tensor<T>, tb: Trans) -> Tensor<T> {
    assert_eq!(a.shape().len(), 3, "bmm lhs must be 3-D, got {:?}", a.shape());
    assert_eq!(b.shape().len(), 3, "bmm rhs must be 3-D, got {:?}", b.shape());
    assert_eq!(
        a.shape()[0],
        b.shape()[0],
        "bmm batch extents differ: {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    let nb = a.shape()[0];
    let ash = (a.shape()[1], a.shape()[2]);
    let bsh = (b.shape()[1], b.shape()[2]);
    let (m, ka) = mm_dims(&[ash.0, ash.1], ta);
    let (kb, n) = mm_dims(&[bsh.0, bsh.1], tb);
    assert_eq!(ka, kb, "bmm inner extents differ");
    let mut c = vec![T::ZERO; nb * m * n];
    let astride = ash.0 * ash.1;
    let bstride = bsh.0 * bsh.1;
    let batches: Vec<(usize, &mut [T])> = c.chunks_mut(m * n).enumerate().collect();
    let body = |(i, cb): (usize, &mut [T])| {
        let ab = &a.data()[i * astride..(i + 1) * astride];
        let bb = &b.data()[i * bstride..(i + 1) * bstride];
        mm_kernel(ab, ash, ta, bb, bsh, tb, cb);
    };
    if threads() > 1 && nb * m * n * ka >= 1 << 16 {
        use rayon::prelude::*;
        pool().install(|| batches.into_par_iter().for_each(body));
    } else {
        batches.into_iter().for_each(body);
    }
    Tensor::new(&[nb, m, n], c)
}

// ---------------------------------------------------------------------------
// Elementwise and row-wise kernels
// ---------------------------------------------------------------------------

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.shape(), b.shape(), "add shape mismatch");
    Tensor::new(
        a.shape(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect(),
    )
}

pub fn scale<T: Scalar>(a: &Tensor<T>, c: T) -> Tensor<T> {
    a.map(|x| x * c)
}

pub fn hadamard<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.shape(), b.shape(), "hadamard shape mismatch");
    Tensor::new(
        a.shape(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect(),
    )
}

/// a[.., d] + b[d], broadcast over all leading axes.
pub fn add_bias<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let d = a.last_dim();
    assert_eq!(b.numel(), d, "bias length {} vs last dim {}", b.numel(), d);
    if d == 0 {
        return a.clone();
    }
    let mut out = a.to_vec();
    for row in out.chunks_mut(d) {
        for (o, &bv) in row.iter_mut().zip(b.data()) {
            *o += bv;
        }
    }
    Tensor::new(a.shape(), out)
}

/// Numerically stable softmax along the last axis.
pub fn softmax_last<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let d = x.last_dim();
    let mut out = x.to_vec();
    for row in out.chunks_mut(d) {
        let mut mx = row[0];
        for &v in row.iter() {
            mx = mx.maximum(v);
        }
        let mut z = T::ZERO;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
    }
    Tensor::new(x.shape(), out)
}

/// Row-wise RMS normalization along the last axis: x / sqrt(mean(x^2)+eps) * gain.
pub fn rmsnorm_last<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, eps: T) -> Tensor<T> {
    let d = x.last_dim();
    assert_eq!(gain.numel(), d, "rmsnorm gain length {} vs dim {}", gain.numel(), d);
    let g = gain.data();
    let mut out = x.to_vec();
    let dn = T::from_f64(d as f64);
    for row in out.chunks_mut(d) {
        let mut ms = T::ZERO;
        for &v in row.iter() {
            ms += v * v;
        }
        let inv = T::ONE / (ms / dn + eps).sqrt();
        for (v, &gv) in row.iter_mut().zip(g) {
            *v = *v * inv * gv;
        }
    }
    Tensor::new(x.shape(), out)
}

/// Row-wise log-sum-exp along the last axis (shape loses the last dim).
pub fn logsumexp_last<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let d = x.last_dim();
    let rows = x.numel() / d;
    let mut out = Vec::with_capacity(rows);
    for row in x.data().chunks(d) {
        let mut mx = row[0];
        for &v in row.iter() {
            mx = mx.maximum(v);
        }
        let mut z = T::ZERO;
        for &v in row.iter() {
            z += (v - mx).exp();
        }
        out.push(mx + z.ln());
    }
    let shape: Vec<usize> = x.shape()[..x.shape().len() - 1].to_vec();
    Tensor::new(&shape, out)
}

pub fn sum_all<T: Scalar>(x: &Tensor<T>) -> T {
    let mut acc = T::ZERO;
    for &v in x.data() {
        acc += v;
    }
    acc
}
