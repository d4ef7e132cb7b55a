//! Dense kernels. All reductions run in a fixed order so results are
//! bit-reproducible.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..n {
        s += a[j] * b[j];
    }
    s
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `c (m x n) += a (m x k) * b (k x n)`
pub fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != 0.0 {
                axpy(aip, &b[p * n..(p + 1) * n], c_row);
            }
        }
    }
}

/// `c (m x n) += a (m x k) * b^T`, with `b` stored `n x k`.
pub fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c (m x n) += a^T * b`, with `a` stored `k x m` and `b` stored `k x n`.
pub fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api != 0.0 {
                axpy(api, b_row, &mut c[i * n..(i + 1) * n]);
            }
        }
    }
}

/// Geometry of a 2-D convolution over one `(channels, h, w)` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    /// "Same" padding: output is `ceil(input / stride)` along each axis.
    pub fn same(c_in: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize) -> Self {
        let h_out = h.div_ceil(stride);
        let w_out = w.div_ceil(stride);
        let pad_h = ((h_out - 1) * stride + kh).saturating_sub(h);
        let pad_w = ((w_out - 1) * stride + kw).saturating_sub(w);
        ConvGeom { c_in, h, w, kh, kw, stride, pad_top: pad_h / 2, pad_left: pad_w / 2, h_out, w_out }
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Unfolds one image into `(c_in*kh*kw) x (h_out*w_out)` columns.
pub fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let n_out = g.col_cols();
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * n_out..(row + 1) * n_out];
                for oi in 0..g.h_out {
                    let ii = (oi * g.stride + ki) as isize - g.pad_top as isize;
                    let dst_row = &mut dst[oi * g.w_out..(oi + 1) * g.w_out];
                    if ii < 0 || ii >= g.h as isize {
                        dst_row.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + ii as usize) * g.w..(c * g.h + ii as usize + 1) * g.w];
                    for (oj, v) in dst_row.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad_left as isize;
                        *v = if jj < 0 || jj >= g.w as isize { 0.0 } else { src[jj as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image gradient.
pub fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let n_out = g.col_cols();
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * n_out..(row + 1) * n_out];
                for oi in 0..g.h_out {
                    let ii = (oi * g.stride + ki) as isize - g.pad_top as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + ii as usize) * g.w;
                    for oj in 0..g.w_out {
                        let jj = (oj * g.stride + kj) as isize - g.pad_left as isize;
                        if jj >= 0 && jj < g.w as isize {
                            dx[base + jj as usize] += src[oi * g.w_out + oj];
                        }
                    }
                }
            }
        }
    }
}
