//! im2col-based 2D convolution and transposed convolution, forward and
//! backward. Everything runs through one GEMM per call via `ndarray::dot`.
//!
//! Shapes follow the rest of the tape: activations are (C, H, W), conv
//! weights (Cout, Cin, K, K), transposed-conv weights (Cin, Cout, K, K).

use ndarray::{Array2, ArrayD, IxDyn};

pub fn conv_out_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(
        input + 2 * pad >= k,
        "conv: kernel {k} larger than padded input {input}+2*{pad}"
    );
    (input + 2 * pad - k) / stride + 1
}

pub fn conv_transpose_out_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    let full = (input - 1) * stride + k;
    assert!(full >= 2 * pad, "conv_transpose: padding exceeds output");
    full - 2 * pad
}

/// Unfold (C, H, W) into (C*K*K, Ho*Wo) patch columns for a conv with the
/// given geometry. Out-of-bounds taps stay zero.
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let l = ho * wo;
    let mut col = Array2::<f64>::zeros((c * k * k, l));
    let cs = col.as_slice_mut().unwrap();
    for ci in 0..c {
        let xplane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let out = &mut cs[row * l..(row + 1) * l];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let ibase = iy as usize * w;
                    let obase = oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out[obase + ox] = xplane[ibase + ix as usize];
                    }
                }
            }
        }
    }
    col
}

/// Matmul results may come back with reversed axes (ndarray picks the
/// cheaper orientation); normalize before reshaping or slicing.
fn standard(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// Fold (C*K*K, Ho*Wo) patch columns back onto a (C, H, W) image,
/// accumulating overlaps. Exact adjoint of [`im2col`].
fn col2im(
    col: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> ArrayD<f64> {
    let l = ho * wo;
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[c, h, w]));
    let os = out.as_slice_mut().unwrap();
    let cs = col.as_slice().unwrap();
    for ci in 0..c {
        let oplane = &mut os[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cs[row * l..(row + 1) * l];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let ibase = iy as usize * w;
                    let obase = oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        oplane[ibase + ix as usize] += src[obase + ox];
                    }
                }
            }
        }
    }
    out
}

pub fn conv2d_forward(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    b: &ArrayD<f64>,
    stride: usize,
    pad: usize,
) -> ArrayD<f64> {
    let (sx, sw) = (x.shape(), w.shape());
    assert_eq!(sx.len(), 3, "conv2d: input must be (C, H, W)");
    assert_eq!(sw.len(), 4, "conv2d: weight must be (Cout, Cin, K, K)");
    assert_eq!(sw[1], sx[0], "conv2d: channel mismatch");
    assert_eq!(sw[2], sw[3], "conv2d: kernel must be square");
    let (cin, h, wd) = (sx[0], sx[1], sx[2]);
    let (cout, k) = (sw[0], sw[2]);
    assert_eq!(b.shape(), &[cout], "conv2d: bias length mismatch");
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(wd, k, stride, pad);

    let col = im2col(x.as_slice().unwrap(), cin, h, wd, k, stride, pad, ho, wo);
    let w_mat = w.to_shape((cout, cin * k * k)).unwrap();
    let mut y = w_mat.dot(&col); // (Cout, L)
    let bs = b.as_slice().unwrap();
    for (c, mut row) in y.rows_mut().into_iter().enumerate() {
        row.mapv_inplace(|t| t + bs[c]);
    }
    y.into_shape_with_order((cout, ho, wo)).unwrap().into_dyn()
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    gy: &ArrayD<f64>,
    stride: usize,
    pad: usize,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> (Option<ArrayD<f64>>, Option<ArrayD<f64>>, Option<ArrayD<f64>>) {
    let (sx, sw, sy) = (x.shape(), w.shape(), gy.shape());
    let (cin, h, wd) = (sx[0], sx[1], sx[2]);
    let (cout, k) = (sw[0], sw[2]);
    let (ho, wo) = (sy[1], sy[2]);
    let l = ho * wo;
    let gy_mat = gy.to_shape((cout, l)).unwrap();
    let w_mat = w.to_shape((cout, cin * k * k)).unwrap();

    let db = need_b.then(|| {
        let mut d = ndarray::Array1::<f64>::zeros(cout);
        for (c, row) in gy_mat.rows().into_iter().enumerate() {
            d[c] = row.sum();
        }
        d.into_dyn()
    });
    let dw = need_w.then(|| {
        let col = im2col(x.as_slice().unwrap(), cin, h, wd, k, stride, pad, ho, wo);
        standard(gy_mat.dot(&col.t()))
            .into_shape_with_order((cout, cin, k, k))
            .unwrap()
            .into_dyn()
    });
    let dx = need_x.then(|| {
        let dcol = standard(w_mat.t().dot(&gy_mat));
        col2im(&dcol, cin, h, wd, k, stride, pad, ho, wo)
    });
    (dx, dw, db)
}

pub fn conv_transpose2d_forward(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    b: &ArrayD<f64>,
    stride: usize,
    pad: usize,
) -> ArrayD<f64> {
    let (sx, sw) = (x.shape(), w.shape());
    assert_eq!(sx.len(), 3, "conv_transpose2d: input must be (C, H, W)");
    assert_eq!(sw.len(), 4, "conv_transpose2d: weight must be (Cin, Cout, K, K)");
    assert_eq!(sw[0], sx[0], "conv_transpose2d: channel mismatch");
    assert_eq!(sw[2], sw[3], "conv_transpose2d: kernel must be square");
    let (cin, h, wd) = (sx[0], sx[1], sx[2]);
    let (cout, k) = (sw[1], sw[2]);
    assert_eq!(b.shape(), &[cout], "conv_transpose2d: bias length mismatch");
    let ho = conv_transpose_out_size(h, k, stride, pad);
    let wo = conv_transpose_out_size(wd, k, stride, pad);
    // The output plays the role of the conv "input": scatter columns back.
    assert_eq!(conv_out_size(ho, k, stride, pad), h);

    let x_mat = x.to_shape((cin, h * wd)).unwrap();
    let w_mat = w.to_shape((cin, cout * k * k)).unwrap();
    let col = standard(w_mat.t().dot(&x_mat)); // (Cout*K*K, H*W)
    let mut y = col2im(&col, cout, ho, wo, k, stride, pad, h, wd);
    let bs = b.as_slice().unwrap();
    for (c, mut plane) in y.axis_iter_mut(ndarray::Axis(0)).enumerate() {
        plane.mapv_inplace(|t| t + bs[c]);
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_backward(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    gy: &ArrayD<f64>,
    stride: usize,
    pad: usize,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> (Option<ArrayD<f64>>, Option<ArrayD<f64>>, Option<ArrayD<f64>>) {
    let (sx, sw, sy) = (x.shape(), w.shape(), gy.shape());
    let (cin, h, wd) = (sx[0], sx[1], sx[2]);
    let (cout, k) = (sw[1], sw[2]);
    let (ho, wo) = (sy[1], sy[2]);

    let db = need_b.then(|| {
        let mut d = ndarray::Array1::<f64>::zeros(cout);
        for (c, plane) in gy.axis_iter(ndarray::Axis(0)).enumerate() {
            d[c] = plane.sum();
        }
        d.into_dyn()
    });
    if !(need_x || need_w) {
        return (None, None, db);
    }
    // Gradient flows through the same patch geometry, with gy as the conv
    // "input" image.
    let col_gy = im2col(gy.as_slice().unwrap(), cout, ho, wo, k, stride, pad, h, wd);
    let dx = need_x.then(|| {
        let w_mat = w.to_shape((cin, cout * k * k)).unwrap();
        standard(w_mat.dot(&col_gy))
            .into_shape_with_order((cin, h, wd))
            .unwrap()
            .into_dyn()
    });
    let dw = need_w.then(|| {
        let x_mat = x.to_shape((cin, h * wd)).unwrap();
        standard(x_mat.dot(&col_gy.t()))
            .into_shape_with_order((cin, cout, k, k))
            .unwrap()
            .into_dyn()
    });
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn arr(shape: &[usize], vals: &[f64]) -> ArrayD<f64> {
        ArrayD::from_shape_vec(IxDyn(shape), vals.to_vec()).unwrap()
    }

    /// Direct nested-loop convolution to pin the im2col path against.
    fn conv_reference(
        x: &ArrayD<f64>,
        w: &ArrayD<f64>,
        b: &ArrayD<f64>,
        stride: usize,
        pad: usize,
    ) -> ArrayD<f64> {
        let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, k) = (w.shape()[0], w.shape()[2]);
        let ho = conv_out_size(h, k, stride, pad);
        let wo = conv_out_size(wd, k, stride, pad);
        let mut y = ArrayD::zeros(IxDyn(&[cout, ho, wo]));
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[[co]];
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += x[[ci, iy as usize, ix as usize]]
                                    * w[[co, ci, ky, kx]];
                            }
                        }
                    }
                    y[[co, oy, ox]] = acc;
                }
            }
        }
        y
    }

    fn rand_arr(shape: &[usize], seed: u64) -> ArrayD<f64> {
        // Tiny deterministic LCG; tests only need "arbitrary" values.
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        let n: usize = shape.iter().product();
        let vals: Vec<f64> = (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 33) as f64 / (1u64 << 31) as f64) - 1.0
            })
            .collect();
        ArrayD::from_shape_vec(IxDyn(shape), vals).unwrap()
    }

    #[test]
    fn conv2d_matches_reference() {
        for &(stride, pad) in &[(1usize, 0usize), (1, 1), (2, 1)] {
            let x = rand_arr(&[3, 6, 6], 1);
            let w = rand_arr(&[4, 3, 4, 4], 2);
            let b = rand_arr(&[4], 3);
            let got = conv2d_forward(&x, &w, &b, stride, pad);
            let want = conv_reference(&x, &w, &b, stride, pad);
            assert_eq!(got.shape(), want.shape());
            for (g, w) in got.iter().zip(want.iter()) {
                assert_abs_diff_eq!(g, w, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_T(y)> when both use zero bias and the
        // same kernel viewed from both sides.
        let stride = 2;
        let pad = 1;
        let k = 4;
        let x = rand_arr(&[2, 8, 8], 10);
        let w = rand_arr(&[3, 2, k, k], 11); // (Cout, Cin, K, K)
        let zero3 = arr(&[3], &[0., 0., 0.]);
        let zero2 = arr(&[2], &[0., 0.]);
        let y = rand_arr(&[3, 4, 4], 12);

        let conv_x = conv2d_forward(&x, &w, &zero3, stride, pad);
        let lhs: f64 = (&conv_x * &y).sum();

        // Flip (Cout, Cin) -> (Cin=3 input channels, Cout=2) for the
        // transposed direction.
        let mut wt = ArrayD::zeros(IxDyn(&[3, 2, k, k]));
        for a in 0..3 {
            for b in 0..2 {
                for i in 0..k {
                    for j in 0..k {
                        wt[[a, b, i, j]] = w[[a, b, i, j]];
                    }
                }
            }
        }
        let convt_y = conv_transpose2d_forward(&y, &wt, &zero2, stride, pad);
        assert_eq!(convt_y.shape(), x.shape());
        let rhs: f64 = (&x * &convt_y).sum();
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-9);
    }

    #[test]
    fn down_then_up_restores_shape() {
        let x = rand_arr(&[5, 16, 16], 20);
        let w_down = rand_arr(&[7, 5, 4, 4], 21);
        let w_up = rand_arr(&[7, 5, 4, 4], 22);
        let b7 = ArrayD::zeros(IxDyn(&[7]));
        let b5 = ArrayD::zeros(IxDyn(&[5]));
        let down = conv2d_forward(&x, &w_down, &b7, 2, 1);
        assert_eq!(down.shape(), &[7, 8, 8]);
        let up = conv_transpose2d_forward(&down, &w_up, &b5, 2, 1);
        assert_eq!(up.shape(), &[5, 16, 16]);
    }
}
