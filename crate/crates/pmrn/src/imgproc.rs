//! Small image operations on `[3,H,W]` f64 tensors.

use crate::tensor::Tensor;

/// Interpolation taps for one axis, computed once per resize.
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let f = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = f.floor() as usize;
            (i0, (i0 + 1).min(src - 1), f - i0 as f64)
        })
        .collect()
}

/// Bilinear resize to a square side.
pub fn bilinear_resize(src: &Tensor, out_side: usize) -> Tensor {
    let (h, w) = (src.shape()[1], src.shape()[2]);
    let ys = axis_taps(h, out_side);
    let xs = axis_taps(w, out_side);
    let mut out = vec![0.0; 3 * out_side * out_side];
    for c in 0..3 {
        let plane = &src.data()[c * h * w..(c + 1) * h * w];
        for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
            let row0 = &plane[y0 * w..y0 * w + w];
            let row1 = &plane[y1 * w..y1 * w + w];
            let dst = &mut out[(c * out_side + oy) * out_side..(c * out_side + oy + 1) * out_side];
            for (slot, &(x0, x1, wx)) in dst.iter_mut().zip(&xs) {
                let top = row0[x0] * (1.0 - wx) + row0[x1] * wx;
                let bot = row1[x0] * (1.0 - wx) + row1[x1] * wx;
                *slot = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    Tensor::new(vec![3, out_side, out_side], out).expect("resize shape")
}

/// Square crop at `(y0, x0)`.
pub fn crop(src: &Tensor, y0: usize, x0: usize, side: usize) -> Tensor {
    let (h, w) = (src.shape()[1], src.shape()[2]);
    debug_assert!(y0 + side <= h && x0 + side <= w);
    let mut out = vec![0.0; 3 * side * side];
    for c in 0..3 {
        for y in 0..side {
            let src_row = (c * h + y0 + y) * w + x0;
            let dst_row = (c * side + y) * side;
            out[dst_row..dst_row + side].copy_from_slice(&src.data()[src_row..src_row + side]);
        }
    }
    Tensor::new(vec![3, side, side], out).expect("crop shape")
}

/// Mirror along the horizontal axis.
pub fn hflip(src: &Tensor) -> Tensor {
    let (h, w) = (src.shape()[1], src.shape()[2]);
    let mut out = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                out[(c * h + y) * w + x] = src.data()[(c * h + y) * w + (w - 1 - x)];
            }
        }
    }
    Tensor::new(src.shape().to_vec(), out).expect("flip shape")
}
