//! Raw compute kernels over flat slices. Shapes are validated by the callers.

/// Geometry of a 2-D convolution over an NCHW batch.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub ph: usize,
    pub pw: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.ph == 0 && self.pw == 0
    }
}

/// `c = alpha * a·b + beta * c` for row-major operands with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices at least as large as the strided extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds input patches into a `[C*kh*kw, N*Ho*Wo]` matrix.
fn im2col(g: &ConvGeom, x: &[f64]) -> Vec<f64> {
    let cols = g.cols();
    let hw_out = g.ho * g.wo;
    let mut out = vec![0.0; g.ckk() * cols];
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst_row = &mut out[row * cols..(row + 1) * cols];
                for b in 0..g.n {
                    let plane = &x[(b * g.c + ci) * g.h * g.w..(b * g.c + ci + 1) * g.h * g.w];
                    let dst = &mut dst_row[b * hw_out..(b + 1) * hw_out];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.ph as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kj) as isize - g.pw as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[oy * g.wo + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Folds a column matrix back onto the input grid, accumulating overlaps.
fn col2im(g: &ConvGeom, cols_mat: &[f64], dx: &mut [f64]) {
    let cols = g.cols();
    let hw_out = g.ho * g.wo;
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src_row = &cols_mat[row * cols..(row + 1) * cols];
                for b in 0..g.n {
                    let base = (b * g.c + ci) * g.h * g.w;
                    let src = &src_row[b * hw_out..(b + 1) * hw_out];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.ph as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kj) as isize - g.pw as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dx[base + iy as usize * g.w + ix as usize] += src[oy * g.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Lays out an `[N, C, HW]` batch as a `[C, N*HW]` matrix.
fn batch_to_channel_major(n: usize, c: usize, hw: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ci in 0..c {
            let src = &x[(b * c + ci) * hw..(b * c + ci + 1) * hw];
            out[ci * n * hw + b * hw..ci * n * hw + (b + 1) * hw].copy_from_slice(src);
        }
    }
    out
}

fn channel_major_to_batch(n: usize, c: usize, hw: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ci in 0..c {
        for b in 0..n {
            let src = &x[ci * n * hw + b * hw..ci * n * hw + (b + 1) * hw];
            out[(b * c + ci) * hw..(b * c + ci + 1) * hw].copy_from_slice(src);
        }
    }
    out
}

fn unfold(g: &ConvGeom, x: &[f64]) -> Vec<f64> {
    if g.is_pointwise() {
        batch_to_channel_major(g.n, g.c, g.h * g.w, x)
    } else {
        im2col(g, x)
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], kernel: &[f64]) -> Vec<f64> {
    let cols_mat = unfold(g, x);
    let ckk = g.ckk();
    let cols = g.cols();
    let mut y = vec![0.0; g.o * cols];
    gemm(g.o, ckk, cols, kernel, ckk as isize, 1, &cols_mat, cols as isize, 1, &mut y, 0.0);
    channel_major_to_batch(g.n, g.o, g.ho * g.wo, &y)
}

/// Returns `(d_input, d_kernel)` according to which are requested.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    kernel: &[f64],
    dy: &[f64],
    need_dx: bool,
    need_dk: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let ckk = g.ckk();
    let cols = g.cols();
    let dy_cm = batch_to_channel_major(g.n, g.o, g.ho * g.wo, dy);
    let dk = need_dk.then(|| {
        let cols_mat = unfold(g, x);
        let mut dk = vec![0.0; g.o * ckk];
        // dK[o, r] = sum_p dY[o, p] * cols[r, p]
        gemm(g.o, cols, ckk, &dy_cm, cols as isize, 1, &cols_mat, 1, cols as isize, &mut dk, 0.0);
        dk
    });
    let dx = need_dx.then(|| {
        let mut dcols = vec![0.0; ckk * cols];
        // dcols[r, p] = sum_o K[o, r] * dY[o, p]
        gemm(ckk, g.o, cols, kernel, 1, ckk as isize, &dy_cm, cols as isize, 1, &mut dcols, 0.0);
        if g.is_pointwise() {
            channel_major_to_batch(g.n, g.c, g.h * g.w, &dcols)
        } else {
            let mut dx = vec![0.0; g.n * g.c * g.h * g.w];
            col2im(g, &dcols, &mut dx);
            dx
        }
    });
    (dx, dk)
}

pub(crate) fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

pub(crate) fn silu_grad(v: f64) -> f64 {
    let s = 1.0 / (1.0 + (-v).exp());
    s * (1.0 + v * (1.0 - s))
}

/// Row-wise softmax in place over rows of length `cols`.
pub(crate) fn softmax_rows(x: &mut [f64], cols: usize) {
    for row in x.chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

pub(crate) const GROUP_NORM_EPS: f64 = 1e-5;

/// Group normalization statistics and output for `[N, C, S]` data.
pub(crate) fn group_norm_forward(
    n: usize,
    c: usize,
    s: usize,
    groups: usize,
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let cg = c / groups;
    let m = (cg * s) as f64;
    let mut y = vec![0.0; x.len()];
    let mut means = vec![0.0; n * groups];
    let mut rstds = vec![0.0; n * groups];
    for b in 0..n {
        for grp in 0..groups {
            let start = (b * c + grp * cg) * s;
            let block = &x[start..start + cg * s];
            let mean = block.iter().sum::<f64>() / m;
            let var = block.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
            let rstd = 1.0 / (var + GROUP_NORM_EPS).sqrt();
            means[b * groups + grp] = mean;
            rstds[b * groups + grp] = rstd;
            for ci in 0..cg {
                let ch = grp * cg + ci;
                for j in 0..s {
                    let idx = start + ci * s + j;
                    y[idx] = gamma[ch] * (x[idx] - mean) * rstd + beta[ch];
                }
            }
        }
    }
    (y, means, rstds)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_backward(
    n: usize,
    c: usize,
    s: usize,
    groups: usize,
    x: &[f64],
    gamma: &[f64],
    means: &[f64],
    rstds: &[f64],
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let cg = c / groups;
    let m = (cg * s) as f64;
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..n {
        for grp in 0..groups {
            let mean = means[b * groups + grp];
            let rstd = rstds[b * groups + grp];
            let start = (b * c + grp * cg) * s;
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for ci in 0..cg {
                let ch = grp * cg + ci;
                for j in 0..s {
                    let idx = start + ci * s + j;
                    let xhat = (x[idx] - mean) * rstd;
                    let dxhat = dy[idx] * gamma[ch];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                    dgamma[ch] += dy[idx] * xhat;
                    dbeta[ch] += dy[idx];
                }
            }
            for ci in 0..cg {
                let ch = grp * cg + ci;
                for j in 0..s {
                    let idx = start + ci * s + j;
                    let xhat = (x[idx] - mean) * rstd;
                    let dxhat = dy[idx] * gamma[ch];
                    dx[idx] = rstd / m * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}
