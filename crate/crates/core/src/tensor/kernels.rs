//! Dense matrix kernels over row-major slices.

/// Row-major matrix view with optional transposition.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Self {
            transposed: !self.transposed,
            ..self
        }
    }

    /// Logical (rows, cols, row_stride, col_stride) after transposition.
    fn layout(&self) -> (usize, usize, isize, isize) {
        if self.transposed {
            (self.cols, self.rows, 1, self.cols as isize)
        } else {
            (self.rows, self.cols, self.cols as isize, 1)
        }
    }
}

/// `out (+)= a · b` where `out` is a dense row-major `[m × n]` buffer.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, out: &mut [f64], accumulate: bool) {
    let (m, k, rsa, csa) = a.layout();
    let (k2, n, rsb, csb) = b.layout();
    assert_eq!(k, k2, "gemm inner dimensions");
    assert_eq!(out.len(), m * n, "gemm output size");
    assert_eq!(a.data.len(), a.rows * a.cols);
    assert_eq!(b.data.len(), b.rows * b.cols);
    if m == 1 || n == 1 || m * n * k <= SMALL_GEMM {
        return small_gemm(a, b, out, accumulate);
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above describe exactly the `rows * cols` elements of
    // each input slice, and `out` holds `m * n` elements with row stride `n`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Below this many multiply-adds, packing costs more than it saves.
const SMALL_GEMM: usize = 2048;

fn small_gemm(a: MatRef<'_>, b: MatRef<'_>, out: &mut [f64], accumulate: bool) {
    let (m, k, rsa, csa) = a.layout();
    let (_, n, rsb, csb) = b.layout();
    let (rsa, csa, rsb, csb) = (rsa as usize, csa as usize, rsb as usize, csb as usize);
    if !accumulate {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
    if csb == 1 {
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = a.data[i * rsa + p * csa];
                let brow = &b.data[p * rsb..p * rsb + n];
                row.iter_mut().zip(brow).for_each(|(o, &y)| *o += x * y);
            }
        }
    } else if csa == 1 && rsb == 1 {
        for i in 0..m {
            let arow = &a.data[i * rsa..i * rsa + k];
            for j in 0..n {
                out[i * n + j] += dot(arow, &b.data[j * csb..j * csb + k]);
            }
        }
    } else if n == 1 && rsa == 1 {
        for p in 0..k {
            let y = b.data[p * rsb];
            let acol = &a.data[p * csa..p * csa + m];
            out.iter_mut().zip(acol).for_each(|(o, &x)| *o += x * y);
        }
    } else {
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.data[i * rsa + p * csa] * b.data[p * rsb + j * csb];
                }
                out[i * n + j] += acc;
            }
        }
    }
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (xc, yc) = (x.chunks_exact(4), y.chunks_exact(4));
    let tail: f64 = xc.remainder().iter().zip(yc.remainder()).map(|(a, b)| a * b).sum();
    for (a, b) in xc.zip(yc) {
        for l in 0..4 {
            acc[l] += a[l] * b[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}
