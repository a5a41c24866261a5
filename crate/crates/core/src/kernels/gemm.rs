use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major view of a matrix operand: `(rows, cols, row_stride, col_stride)`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f32],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f32], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, rs: cols, cs: 1 }
    }

    /// Treats `data` (stored `cols x rows`, row-major) as its transpose.
    pub fn transposed(data: &'a [f32], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, rs: 1, cs: rows }
    }

    fn span(&self) -> usize {
        (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
    }

    fn rows_from(&self, start: usize, count: usize) -> MatRef<'a> {
        MatRef {
            data: &self.data[start * self.rs..],
            rows: count,
            ..*self
        }
    }
}

// Below this many multiply-adds a single sgemm call is cheaper than splitting.
const PAR_THRESHOLD: usize = 1 << 20;
const ROW_CHUNK: usize = 32;

/// `c = a * b` (or `c += a * b` when `accumulate`), `c` dense row-major `m x n`.
///
/// Work is split over row chunks of `c`; each output element is reduced by a
/// single kernel call in the same order, so results do not depend on the
/// number of worker threads.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, c: &mut [f32], accumulate: bool) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(k, b.rows, "gemm inner dimension");
    assert_eq!(c.len(), m * n, "gemm output buffer");
    assert!(a.data.len() >= a.span() && b.data.len() >= b.span());
    super::counter::add(m * n * k);
    if m * n * k >= PAR_THRESHOLD && m > ROW_CHUNK && rayon::current_num_threads() > 1 {
        c.par_chunks_mut(ROW_CHUNK * n)
            .enumerate()
            .for_each(|(i, chunk)| {
                let rows = chunk.len() / n;
                sgemm(a.rows_from(i * ROW_CHUNK, rows), b, chunk, accumulate);
            });
    } else {
        sgemm(a, b, c, accumulate);
    }
}

fn sgemm(a: MatRef<'_>, b: MatRef<'_>, c: &mut [f32], accumulate: bool) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the spans of `a` and `b` were checked against their buffers,
    // and `c` is a dense `m x n` buffer that we hold exclusively.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Matrix product of `a [m, k]` and `b [k, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [m, k] = a.dims2("matmul")?;
    let [kb, n] = b.dims2("matmul")?;
    if k != kb {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    gemm(
        MatRef::row_major(a.data(), m, k),
        MatRef::row_major(b.data(), k, n),
        &mut out,
        false,
    );
    Tensor::new(vec![m, n], out)
}

/// `x [n, din]` times `w [dout, din]` transposed, plus an optional `b [dout]`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let [rows, din] = x.dims2("linear")?;
    let [dout, wdin] = w.dims2("linear")?;
    if din != wdin {
        return Err(Error::shape("linear", x.shape(), w.shape()));
    }
    let mut out = vec![0.0; rows * dout];
    if let Some(b) = b {
        if b.numel() != dout {
            return Err(Error::shape("linear bias", w.shape(), b.shape()));
        }
        for row in out.chunks_mut(dout) {
            row.copy_from_slice(b.data());
        }
    }
    gemm(
        MatRef::row_major(x.data(), rows, din),
        MatRef::transposed(w.data(), din, dout),
        &mut out,
        b.is_some(),
    );
    Tensor::new(vec![rows, dout], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(a: &Tensor, b: &Tensor) -> Tensor {
        let [m, k] = a.dims2("").unwrap();
        let [_, n] = b.dims2("").unwrap();
        let mut out = vec![0.0f64; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.data()[i * k + p] as f64 * b.data()[p * n + j] as f64;
                }
            }
        }
        Tensor::new(vec![m, n], out.into_iter().map(|v| v as f32).collect()).unwrap()
    }

    fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_and_small_case() {
        let eye = Tensor::from_fn(vec![3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let m = Tensor::from_fn(vec![3, 3], |i| i as f32 * 0.5 - 1.0);
        assert_eq!(matmul(&eye, &m).unwrap(), m);

        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(vec![17, 33], &mut rng);
        let b = random(vec![33, 9], &mut rng);
        let diff = matmul(&a, &b).unwrap().max_abs_diff(&naive(&a, &b)).unwrap();
        assert!(diff <= 1e-5, "diff {diff}");
    }

    #[test]
    fn mismatch_names_both_shapes() {
        let err = matmul(&Tensor::zeros(vec![2, 3]), &Tensor::zeros(vec![4, 2])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn linear_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(vec![5, 4], &mut rng);
        let eye = Tensor::from_fn(vec![4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 });
        assert_eq!(linear(&x, &eye, None).unwrap(), x);

        let b = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let out = linear(&x, &Tensor::zeros(vec![3, 4]), Some(&b)).unwrap();
        for row in out.data().chunks(3) {
            assert_eq!(row, b.data());
        }

        let w = random(vec![3, 4], &mut rng);
        let mut expect = naive(&x, &w.transpose2d().unwrap());
        for row in expect.data_mut().chunks_mut(3) {
            row.iter_mut().zip(b.data()).for_each(|(v, b)| *v += b);
        }
        let diff = linear(&x, &w, Some(&b)).unwrap().max_abs_diff(&expect).unwrap();
        assert!(diff <= 1e-6, "diff {diff}");
    }

    #[test]
    fn thread_count_does_not_change_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(vec![200, 96], &mut rng);
        let b = random(vec![96, 120], &mut rng);
        let serial = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let wide = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let one = serial.install(|| matmul(&a, &b).unwrap());
        let four = wide.install(|| matmul(&a, &b).unwrap());
        assert_eq!(one.data(), four.data());
    }
}
