//! Raw numeric kernels behind the graph ops.
//!
//! Convolution is lowered to im2col + gemm at chunk granularity: a fixed
//! number of images share one column buffer and one gemm call, which keeps
//! the gemm inner dimension large even for small feature grids. Chunks run
//! in parallel and per-chunk partials are reduced in chunk order, so
//! results are bit-identical for any worker count.

use rayon::prelude::*;

/// Picks images-per-chunk so one chunk feeds the gemm roughly this many
/// columns. A pure function of the op shapes: the chunking (and with it
/// the reduction order, hence every bit of the result) depends only on
/// the convolution dimensions, never on worker count.
const TARGET_COLS: usize = 4096;

fn chunk_images(ohw: usize) -> usize {
    (TARGET_COLS / ohw).clamp(8, 256)
}

/// C = alpha * A(m×k) · B(k×n) + beta * C, row-major with explicit strides.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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

/// C = A(m×k) · B(k×n), both row-major contiguous.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    gemm(m, k, n, 1.0, a, k as isize, 1, b, n as isize, 1, 0.0, c);
}

/// C += A(m×k) · Bᵀ where B is stored n×k row-major.
pub fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    gemm(m, k, n, 1.0, a, k as isize, 1, b, 1, k as isize, 1.0, c);
}

/// C += Aᵀ(m×k) · B where A is stored k×m row-major.
pub fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    gemm(m, k, n, 1.0, a, 1, m as isize, b, n as isize, 1, 1.0, c);
}

pub fn conv_out_side(side: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (side + 2 * pad).saturating_sub(kernel) / stride + 1
}

/// Unpacks one image `[C,H,W]` into a slice of a wider column matrix.
/// Row r = (c, kh, kw) starts at `r * row_stride + col_offset`; columns are
/// output positions (oy, ox). Out-of-bounds taps are 0.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    cols: &mut [f64],
    row_stride: usize,
    col_offset: usize,
) {
    let oh = conv_out_side(h, kh, stride, pad);
    let ow = conv_out_side(w, kw, stride, pad);
    for c in 0..c_in {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * row_stride + col_offset;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let out = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if stride == 1 && kx >= pad && kx + w <= ow + pad {
                        // Fully interior row at unit stride: one memcpy.
                        let start = kx - pad;
                        out.copy_from_slice(&src[start..start + ow]);
                        continue;
                    }
                    for (ox, slot) in out.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *slot = if ix < 0 || ix >= w as isize {
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

/// Scatter-adds one image's slice of a wide column matrix back onto `[C,H,W]`.
#[allow(clippy::too_many_arguments)]
fn col2im_add(
    cols: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    x: &mut [f64],
    row_stride: usize,
    col_offset: usize,
) {
    let oh = conv_out_side(h, kh, stride, pad);
    let ow = conv_out_side(w, kw, stride, pad);
    for c in 0..c_in {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * row_stride + col_offset;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &cols[row + oy * ow..row + (oy + 1) * ow];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        conv_out_side(self.h, self.kh, self.stride, self.pad)
    }
    pub fn out_w(&self) -> usize {
        conv_out_side(self.w, self.kw, self.stride, self.pad)
    }
}

/// Batched convolution forward: x `[B,C,H,W]`, w `[Cout,C,KH,KW]` → `[B,Cout,OH,OW]`.
pub fn conv2d_forward(x: &[f64], w: &[f64], d: &ConvDims) -> Vec<f64> {
    let (oh, ow) = (d.out_h(), d.out_w());
    let in_sz = d.c_in * d.h * d.w;
    let out_sz = d.c_out * oh * ow;
    let ckk = d.c_in * d.kh * d.kw;
    let ohw = oh * ow;
    let chunk = chunk_images(ohw);
    let mut y = vec![0.0; d.batch * out_sz];
    x.par_chunks(in_sz * chunk)
        .zip(y.par_chunks_mut(out_sz * chunk))
        .for_each(|(xs, ys)| {
            let bc = xs.len() / in_sz;
            let width = bc * ohw;
            let mut cols = vec![0.0; ckk * width];
            for (i, xb) in xs.chunks(in_sz).enumerate() {
                im2col(xb, d.c_in, d.h, d.w, d.kh, d.kw, d.stride, d.pad, &mut cols, width, i * ohw);
            }
            // One gemm for the whole chunk, then de-interleave rows.
            let mut packed = vec![0.0; d.c_out * width];
            matmul(w, &cols, d.c_out, ckk, width, &mut packed);
            for (i, yb) in ys.chunks_mut(out_sz).enumerate() {
                for co in 0..d.c_out {
                    yb[co * ohw..(co + 1) * ohw]
                        .copy_from_slice(&packed[co * width + i * ohw..co * width + (i + 1) * ohw]);
                }
            }
        });
    y
}

/// Batched convolution backward; either side can be skipped.
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    d: &ConvDims,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    if !need_dx && !need_dw {
        return (None, None);
    }
    let (oh, ow) = (d.out_h(), d.out_w());
    let in_sz = d.c_in * d.h * d.w;
    let out_sz = d.c_out * oh * ow;
    let ckk = d.c_in * d.kh * d.kw;
    let ohw = oh * ow;

    let chunk = chunk_images(ohw);
    let mut dx = if need_dx { vec![0.0; x.len()] } else { Vec::new() };
    let mut dx_chunks: Vec<&mut [f64]> = if need_dx {
        dx.chunks_mut(in_sz * chunk).collect()
    } else {
        Vec::new()
    };
    // Iterate chunk indices so the dx slices don't have to be zipped when
    // absent.
    let n_chunks = x.len().div_ceil(in_sz * chunk);
    let chunk_results: Vec<Option<Vec<f64>>> = if need_dx {
        let xs: Vec<&[f64]> = x.chunks(in_sz * chunk).collect();
        let dys: Vec<&[f64]> = dy.chunks(out_sz * chunk).collect();
        dx_chunks
            .par_iter_mut()
            .enumerate()
            .map(|(ci, dxs)| backward_chunk(xs[ci], w, dys[ci], d, Some(dxs), need_dw, ckk, ohw, in_sz, out_sz))
            .collect()
    } else {
        (0..n_chunks)
            .into_par_iter()
            .map(|ci| {
                let xs = &x[ci * in_sz * chunk..((ci + 1) * in_sz * chunk).min(x.len())];
                let dys = &dy[ci * out_sz * chunk..((ci + 1) * out_sz * chunk).min(dy.len())];
                backward_chunk(xs, w, dys, d, None, need_dw, ckk, ohw, in_sz, out_sz)
            })
            .collect()
    };

    let dw = if need_dw {
        let mut acc = vec![0.0; w.len()];
        for part in chunk_results.into_iter().flatten() {
            for (a, p) in acc.iter_mut().zip(part) {
                *a += p;
            }
        }
        Some(acc)
    } else {
        None
    };
    (need_dx.then_some(dx), dw)
}

#[allow(clippy::too_many_arguments)]
fn backward_chunk(
    xs: &[f64],
    w: &[f64],
    dys: &[f64],
    d: &ConvDims,
    dxs: Option<&mut &mut [f64]>,
    need_dw: bool,
    ckk: usize,
    ohw: usize,
    in_sz: usize,
    out_sz: usize,
) -> Option<Vec<f64>> {
    let bc = xs.len() / in_sz;
    let width = bc * ohw;
    // Gather upstream gradients into gemm layout [Cout, bc·OHW].
    let mut dy_packed = vec![0.0; d.c_out * width];
    for (i, dyb) in dys.chunks(out_sz).enumerate() {
        for co in 0..d.c_out {
            dy_packed[co * width + i * ohw..co * width + (i + 1) * ohw]
                .copy_from_slice(&dyb[co * ohw..(co + 1) * ohw]);
        }
    }

    let dw_part = if need_dw {
        let mut cols = vec![0.0; ckk * width];
        for (i, xb) in xs.chunks(in_sz).enumerate() {
            im2col(xb, d.c_in, d.h, d.w, d.kh, d.kw, d.stride, d.pad, &mut cols, width, i * ohw);
        }
        let mut part = vec![0.0; w.len()];
        // dW = dY · colsᵀ
        matmul_nt_acc(&dy_packed, &cols, d.c_out, width, ckk, &mut part);
        Some(part)
    } else {
        None
    };

    if let Some(dxs) = dxs {
        // dcols = Wᵀ · dY, then scatter back per image.
        let mut dcols = vec![0.0; ckk * width];
        gemm(
            ckk,
            d.c_out,
            width,
            1.0,
            w,
            1,
            ckk as isize,
            &dy_packed,
            width as isize,
            1,
            0.0,
            &mut dcols,
        );
        for (i, dxb) in dxs.chunks_mut(in_sz).enumerate() {
            col2im_add(&dcols, d.c_in, d.h, d.w, d.kh, d.kw, d.stride, d.pad, dxb, width, i * ohw);
        }
    }
    dw_part
}
