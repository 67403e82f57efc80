//! Numeric kernels behind the differentiable ops: GEMM, im2col convolution
//! and pixel shuffle.

/// `c = a · b + beta · c` with arbitrary strides, `a` is `m×k`, `b` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
    c_strides: (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
    debug_assert!(k == 0 || b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    debug_assert!(c.len() > (m - 1) * c_strides.0 + (n - 1) * c_strides.1);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            c_strides.0 as isize,
            c_strides.1 as isize,
        );
    }
}

/// Geometry of a 2-D convolution over one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    /// Rows of the im2col matrix.
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    /// True when im2col is the identity (1×1, stride 1, no padding).
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one `[C, H, W]` image into a `[C·kh·kw, Ho·Wo]` patch matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let spatial = ho * wo;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * spatial..(row + 1) * spatial];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds a patch matrix back into an image.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeometry, x: &mut [f64]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let spatial = ho * wo;
    for c in 0..g.c_in {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * spatial..(row + 1) * spatial];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution of a batch. `x` is `[N, C_in, H, W]`, `weight` is
/// `[C_out, C_in, kh, kw]`; returns `[N, C_out, Ho, Wo]` values.
pub(crate) fn conv2d_forward(
    x: &[f64],
    n: usize,
    g: &ConvGeometry,
    weight: &[f64],
    c_out: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let spatial = g.out_h() * g.out_w();
    let k = g.patch_len();
    let in_len = g.c_in * g.h * g.w;
    let mut out = vec![0.0; n * c_out * spatial];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; k * spatial]
    };
    for i in 0..n {
        let xi = &x[i * in_len..(i + 1) * in_len];
        let patches: &[f64] = if g.is_pointwise() {
            xi
        } else {
            im2col(xi, g, &mut cols);
            &cols
        };
        let oi = &mut out[i * c_out * spatial..(i + 1) * c_out * spatial];
        if let Some(b) = bias {
            for (co, chunk) in oi.chunks_mut(spatial).enumerate() {
                chunk.fill(b[co]);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        gemm(
            c_out,
            k,
            spatial,
            weight,
            (k, 1),
            patches,
            (spatial, 1),
            beta,
            oi,
            (spatial, 1),
        );
    }
    out
}

/// Gradients of a batch convolution given the upstream gradient `dy`.
///
/// Returns `(dx, dweight, dbias)`; `dx` is skipped when `want_dx` is false.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f64],
    n: usize,
    g: &ConvGeometry,
    weight: &[f64],
    c_out: usize,
    dy: &[f64],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
    let spatial = g.out_h() * g.out_w();
    let k = g.patch_len();
    let in_len = g.c_in * g.h * g.w;
    let mut dx = want_dx.then(|| vec![0.0; n * in_len]);
    let mut dw = want_dw.then(|| vec![0.0; c_out * k]);
    let mut db = vec![0.0; c_out];
    let mut cols = vec![0.0; if g.is_pointwise() { 0 } else { k * spatial }];
    let mut dcols = vec![0.0; if want_dx && !g.is_pointwise() { k * spatial } else { 0 }];
    for i in 0..n {
        let dyi = &dy[i * c_out * spatial..(i + 1) * c_out * spatial];
        for (co, chunk) in dyi.chunks(spatial).enumerate() {
            db[co] += chunk.iter().sum::<f64>();
        }
        if let Some(dw) = dw.as_mut() {
            let xi = &x[i * in_len..(i + 1) * in_len];
            let patches: &[f64] = if g.is_pointwise() {
                xi
            } else {
                im2col(xi, g, &mut cols);
                &cols
            };
            // dW += dY · colsᵀ
            gemm(
                c_out,
                spatial,
                k,
                dyi,
                (spatial, 1),
                patches,
                (1, spatial),
                1.0,
                dw,
                (k, 1),
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxi = &mut dx[i * in_len..(i + 1) * in_len];
            // dcols = Wᵀ · dY
            if g.is_pointwise() {
                gemm(k, c_out, spatial, weight, (1, k), dyi, (spatial, 1), 0.0, dxi, (spatial, 1));
            } else {
                gemm(
                    k,
                    c_out,
                    spatial,
                    weight,
                    (1, k),
                    dyi,
                    (spatial, 1),
                    0.0,
                    &mut dcols,
                    (spatial, 1),
                );
                col2im(&dcols, g, dxi);
            }
        }
    }
    (dx, dw, db)
}

/// Rearranges `[N, C·r², H, W]` into `[N, C, H·r, W·r]`.
pub(crate) fn pixel_shuffle(x: &[f64], n: usize, c: usize, h: usize, w: usize, r: usize) -> Vec<f64> {
    let c_out = c / (r * r);
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for co in 0..c_out {
            for i in 0..r {
                for j in 0..r {
                    let ci = co * r * r + i * r + j;
                    for y in 0..h {
                        for xx in 0..w {
                            let src = ((b * c + ci) * h + y) * w + xx;
                            let dst = ((b * c_out + co) * h * r + y * r + i) * w * r + xx * r + j;
                            out[dst] = x[src];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint (and inverse) of [`pixel_shuffle`]; `c`, `h`, `w` describe the
/// shuffle input.
pub(crate) fn pixel_unshuffle(y: &[f64], n: usize, c: usize, h: usize, w: usize, r: usize) -> Vec<f64> {
    let c_out = c / (r * r);
    let mut out = vec![0.0; y.len()];
    for b in 0..n {
        for co in 0..c_out {
            for i in 0..r {
                for j in 0..r {
                    let ci = co * r * r + i * r + j;
                    for yy in 0..h {
                        for xx in 0..w {
                            let dst = ((b * c + ci) * h + yy) * w + xx;
                            let src = ((b * c_out + co) * h * r + yy * r + i) * w * r + xx * r + j;
                            out[dst] = y[src];
                        }
                    }
                }
            }
        }
    }
    out
}
