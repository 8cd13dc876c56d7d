//! Convolution kernels: im2col lowering plus GEMM.
//!
//! The public contract (shapes, gradients) lives in [`graph`](super::graph);
//! this module is the compute backend. Everything is single-threaded so the
//! results are bit-reproducible run to run.

use matrixmultiply::dgemm;

/// `c = a @ b` for row-major `a: [m,k]`, `b: [k,n]`; `beta` scales the
/// existing contents of `c` (0 overwrites, 1 accumulates).
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        dgemm(
            m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c = a @ b^T` for row-major `a: [m,k]`, `b: [n,k]`.
pub(crate) fn gemm_bt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        dgemm(
            m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), 1, k as isize, beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c = a^T @ b` for row-major `a: [k,m]`, `b: [k,n]`.
pub(crate) fn gemm_at(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        dgemm(
            m, k, n, 1.0, a.as_ptr(), 1, m as isize, b.as_ptr(), n as isize, 1, beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

pub(crate) fn conv_out_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Lower one image `[C,H,W]` into `cols: [C*kh*kw, Ho*Wo]` for the given
/// stride/padding. Out-of-bounds taps contribute zero.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
    cols: &mut [f64],
) {
    debug_assert_eq!(cols.len(), c * kh * kw * ho * wo);
    let hw_out = ho * wo;
    for ci in 0..c {
        let x_c = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * hw_out;
                let cols_row = &mut cols[row..row + hw_out];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    let dst = &mut cols_row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = &x_c[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add the columns gradient back onto the input image.
#[allow(clippy::too_many_arguments)]
fn col2im_add(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
    dx: &mut [f64],
) {
    let hw_out = ho * wo;
    for ci in 0..c {
        let dx_c = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * hw_out;
                let cols_row = &cols[row..row + hw_out];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut dx_c[iy as usize * w..(iy as usize + 1) * w];
                    let src = &cols_row[oy * wo..(oy + 1) * wo];
                    for (ox, &g) in src.iter().enumerate() {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub ho: usize,
    pub wo: usize,
}

pub(crate) fn conv2d_forward(x: &[f64], weight: &[f64], bias: Option<&[f64]>, d: &ConvDims) -> Vec<f64> {
    let ckk = d.cin * d.kh * d.kw;
    let hw_out = d.ho * d.wo;
    let mut out = vec![0.0; d.n * d.cout * hw_out];
    let mut cols = vec![0.0; ckk * hw_out];
    for ni in 0..d.n {
        let x_n = &x[ni * d.cin * d.h * d.w..(ni + 1) * d.cin * d.h * d.w];
        im2col(x_n, d.cin, d.h, d.w, d.kh, d.kw, d.stride, d.padding, d.ho, d.wo, &mut cols);
        let out_n = &mut out[ni * d.cout * hw_out..(ni + 1) * d.cout * hw_out];
        gemm(d.cout, ckk, hw_out, weight, &cols, out_n, 0.0);
        if let Some(b) = bias {
            for oc in 0..d.cout {
                let bv = b[oc];
                for v in &mut out_n[oc * hw_out..(oc + 1) * hw_out] {
                    *v += bv;
                }
            }
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub dx: Vec<f64>,
    pub dw: Vec<f64>,
    pub db: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    x: &[f64],
    weight: &[f64],
    has_bias: bool,
    grad_out: &[f64],
    d: &ConvDims,
) -> ConvGrads {
    let ckk = d.cin * d.kh * d.kw;
    let hw_out = d.ho * d.wo;
    let mut dx = vec![0.0; d.n * d.cin * d.h * d.w];
    let mut dw = vec![0.0; d.cout * ckk];
    let mut db = if has_bias { Some(vec![0.0; d.cout]) } else { None };
    let mut cols = vec![0.0; ckk * hw_out];
    let mut dcols = vec![0.0; ckk * hw_out];
    for ni in 0..d.n {
        let x_n = &x[ni * d.cin * d.h * d.w..(ni + 1) * d.cin * d.h * d.w];
        let gy_n = &grad_out[ni * d.cout * hw_out..(ni + 1) * d.cout * hw_out];

        // dW += gy @ cols^T
        im2col(x_n, d.cin, d.h, d.w, d.kh, d.kw, d.stride, d.padding, d.ho, d.wo, &mut cols);
        gemm_bt(d.cout, hw_out, ckk, gy_n, &cols, &mut dw, 1.0);

        // dcols = W^T @ gy, scattered back to dx
        gemm_at(ckk, d.cout, hw_out, weight, gy_n, &mut dcols, 0.0);
        let dx_n = &mut dx[ni * d.cin * d.h * d.w..(ni + 1) * d.cin * d.h * d.w];
        col2im_add(&dcols, d.cin, d.h, d.w, d.kh, d.kw, d.stride, d.padding, d.ho, d.wo, dx_n);

        if let Some(db) = db.as_mut() {
            for oc in 0..d.cout {
                db[oc] += gy_n[oc * hw_out..(oc + 1) * hw_out].iter().sum::<f64>();
            }
        }
    }
    ConvGrads { dx, dw, db }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_small() {
        // [2,3] @ [3,2]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, &b, &mut c, 0.0);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn gemm_transposed_views_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // [2,3]
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0]; // [2,3] = b^T
        let mut c = [0.0; 4];
        gemm_bt(2, 3, 2, &a, &bt, &mut c, 0.0);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);

        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0]; // [3,2] = a^T
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c2 = [0.0; 4];
        gemm_at(2, 3, 2, &at, &b, &mut c2, 0.0);
        assert_eq!(c2, [58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn out_size_formula() {
        assert_eq!(conv_out_size(8, 3, 2, 1), Some(4));
        assert_eq!(conv_out_size(5, 3, 1, 0), Some(3));
        assert_eq!(conv_out_size(2, 5, 1, 0), None);
    }
}
