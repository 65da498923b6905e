//! Raw numeric kernels shared by the graph's forward and backward passes.

use super::Real;

/// Row/column strides of a matrix operand, in elements.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Strides(pub usize, pub usize);

impl Strides {
    pub(crate) fn row_major(cols: usize) -> Self {
        Strides(cols, 1)
    }
    /// Transposed view of a row-major matrix with `cols` columns.
    pub(crate) fn transposed(cols: usize) -> Self {
        Strides(1, cols)
    }
    fn max_index(self, rows: usize, cols: usize) -> usize {
        (rows - 1) * self.0 + (cols - 1) * self.1
    }
}

/// `c = a·b + beta·c` for an `m×k` by `k×n` product.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    sa: Strides,
    b: &[T],
    sb: Strides,
    beta: T,
    c: &mut [T],
    sc: Strides,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = i * sc.0 + j * sc.1;
                c[idx] = beta * c[idx];
            }
        }
        return;
    }
    assert!(sa.max_index(m, k) < a.len(), "gemm: lhs out of bounds");
    assert!(sb.max_index(k, n) < b.len(), "gemm: rhs out of bounds");
    assert!(sc.max_index(m, n) < c.len(), "gemm: output out of bounds");
    // SAFETY: the asserts above bound every strided access.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            sc.0 as isize,
            sc.1 as isize,
        );
    }
}

/// Geometry of a stride-1 "same" convolution over one sample.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

impl ConvGeom {
    pub(crate) fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
    pub(crate) fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Unfolds one `C×H×W` image into a `(C·K·K)×(H·W)` column matrix.
pub(crate) fn im2col<T: Real>(img: &[T], g: ConvGeom, col: &mut [T]) {
    let (h, w, k) = (g.height as isize, g.width as isize, g.kernel);
    let pad = (k / 2) as isize;
    let hw = g.pixels();
    for c in 0..g.channels {
        let plane = &img[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y + dy;
                    let out = &mut dst[(y * w) as usize..((y + 1) * w) as usize];
                    if sy < 0 || sy >= h {
                        out.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[(sy * w) as usize..((sy + 1) * w) as usize];
                    for x in 0..w {
                        let sx = x + dx;
                        out[x as usize] = if sx < 0 || sx >= w {
                            T::zero()
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: folds columns back, accumulating into `img`.
pub(crate) fn col2im_add<T: Real>(col: &[T], g: ConvGeom, img: &mut [T]) {
    let (h, w, k) = (g.height as isize, g.width as isize, g.kernel);
    let pad = (k / 2) as isize;
    let hw = g.pixels();
    for c in 0..g.channels {
        let plane = &mut img[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y + dy;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    let row_in = &src[(y * w) as usize..((y + 1) * w) as usize];
                    let row_out = &mut plane[(sy * w) as usize..((sy + 1) * w) as usize];
                    for x in 0..w {
                        let sx = x + dx;
                        if sx >= 0 && sx < w {
                            row_out[sx as usize] = row_out[sx as usize] + row_in[x as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Mean over non-overlapping `block×block` tiles of each `H×W` plane.
pub(crate) fn block_mean<T: Real>(
    input: &[T],
    planes: usize,
    h: usize,
    w: usize,
    block: usize,
) -> Vec<T> {
    let (oh, ow) = (h / block, w / block);
    let inv = T::of(1.0 / (block * block) as f64);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            let drow = &mut dst[(y / block) * ow..(y / block + 1) * ow];
            for (x, &v) in row.iter().enumerate() {
                drow[x / block] = drow[x / block] + v;
            }
        }
        dst.iter_mut().for_each(|v| *v = *v * inv);
    }
    out
}

/// Adjoint of [`block_mean`], accumulating into `grad_in`.
pub(crate) fn block_mean_backward<T: Real>(
    grad_out: &[T],
    planes: usize,
    h: usize,
    w: usize,
    block: usize,
    grad_in: &mut [T],
) {
    let (oh, ow) = (h / block, w / block);
    let inv = T::of(1.0 / (block * block) as f64);
    for p in 0..planes {
        let src = &grad_out[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut grad_in[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let srow = &src[(y / block) * ow..(y / block + 1) * ow];
            for x in 0..w {
                dst[y * w + x] = dst[y * w + x] + srow[x / block] * inv;
            }
        }
    }
}

/// Splits a shape around `axis` into `(outer, len, inner)`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
