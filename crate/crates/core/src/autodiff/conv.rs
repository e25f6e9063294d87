//! im2col convolution kernels shared by the tape's `Conv` op.
//!
//! Stride is fixed at 1 and padding at k/2, so spatial dimensions are
//! preserved; resolution changes are handled by explicit pool/upsample ops.

use ndarray::{Array2, ArrayD, IxDyn};

fn dims4(a: &ArrayD<f64>) -> (usize, usize, usize, usize) {
    let s = a.shape();
    (s[0], s[1], s[2], s[3])
}

/// Unfolds one sample (C,H,W) into a (C*k*k, H*W) patch matrix.
fn im2col(x: &ArrayD<f64>, bi: usize, kernel: usize, col: &mut Array2<f64>) {
    let (_, c, h, w) = dims4(x);
    let pad = kernel / 2;
    for ci in 0..c {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ci * kernel + ky) * kernel + kx;
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        for xx in 0..w {
                            col[[row, y * w + xx]] = 0.0;
                        }
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - pad as isize;
                        col[[row, y * w + xx]] = if sx < 0 || sx >= w as isize {
                            0.0
                        } else {
                            x[[bi, ci, sy as usize, sx as usize]]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a (C*k*k, H*W) patch-gradient matrix back onto sample `bi`.
fn col2im_add(gx: &mut ArrayD<f64>, bi: usize, kernel: usize, col: &Array2<f64>) {
    let (_, c, h, w) = dims4(gx);
    let pad = kernel / 2;
    for ci in 0..c {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ci * kernel + ky) * kernel + kx;
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - pad as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        gx[[bi, ci, sy as usize, sx as usize]] += col[[row, y * w + xx]];
                    }
                }
            }
        }
    }
}

/// Forward pass: x (B,Cin,H,W) * w (Cout,Cin,k,k) -> (B,Cout,H,W).
pub fn conv2d_forward(x: &ArrayD<f64>, w: &ArrayD<f64>) -> ArrayD<f64> {
    let (b, cin, h, wd) = dims4(x);
    let cout = w.shape()[0];
    let kernel = w.shape()[2];
    let wmat = w
        .view()
        .into_shape_with_order((cout, cin * kernel * kernel))
        .unwrap();

    let mut out = ArrayD::zeros(IxDyn(&[b, cout, h, wd]));
    let mut col = Array2::zeros((cin * kernel * kernel, h * wd));
    for bi in 0..b {
        im2col(x, bi, kernel, &mut col);
        let res = wmat.dot(&col); // (Cout, H*W)
        for co in 0..cout {
            for y in 0..h {
                for xx in 0..wd {
                    out[[bi, co, y, xx]] = res[[co, y * wd + xx]];
                }
            }
        }
    }
    out
}

/// Gradient with respect to the input.
pub fn conv2d_backward_input(
    w: &ArrayD<f64>,
    gout: &ArrayD<f64>,
    kernel: usize,
    x_shape: &[usize],
) -> ArrayD<f64> {
    let (b, cout, h, wd) = dims4(gout);
    let cin = x_shape[1];
    let wmat = w
        .view()
        .into_shape_with_order((cout, cin * kernel * kernel))
        .unwrap();

    let mut gx = ArrayD::zeros(IxDyn(x_shape));
    let mut gout_mat = Array2::zeros((cout, h * wd));
    for bi in 0..b {
        for co in 0..cout {
            for y in 0..h {
                for xx in 0..wd {
                    gout_mat[[co, y * wd + xx]] = gout[[bi, co, y, xx]];
                }
            }
        }
        let gcol = wmat.t().dot(&gout_mat); // (Cin*k*k, H*W)
        col2im_add(&mut gx, bi, kernel, &gcol);
    }
    gx
}

/// Gradient with respect to the weights, summed over the batch in index order.
pub fn conv2d_backward_weight(x: &ArrayD<f64>, gout: &ArrayD<f64>, kernel: usize) -> ArrayD<f64> {
    let (b, cin, h, wd) = dims4(x);
    let cout = gout.shape()[1];

    let mut gw_mat = Array2::<f64>::zeros((cout, cin * kernel * kernel));
    let mut col = Array2::zeros((cin * kernel * kernel, h * wd));
    let mut gout_mat = Array2::zeros((cout, h * wd));
    for bi in 0..b {
        im2col(x, bi, kernel, &mut col);
        for co in 0..cout {
            for y in 0..h {
                for xx in 0..wd {
                    gout_mat[[co, y * wd + xx]] = gout[[bi, co, y, xx]];
                }
            }
        }
        gw_mat = gw_mat + gout_mat.dot(&col.t());
    }
    gw_mat
        .into_shape_with_order(IxDyn(&[cout, cin, kernel, kernel]))
        .unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn identity_kernel_preserves_input() {
        // A 3x3 kernel with 1 at the centre copies each channel through.
        let x = ArrayD::from_shape_fn(IxDyn(&[1, 2, 4, 4]), |ix| {
            (ix[1] * 16 + ix[2] * 4 + ix[3]) as f64
        });
        let mut w = ArrayD::zeros(IxDyn(&[2, 2, 3, 3]));
        w[[0, 0, 1, 1]] = 1.0;
        w[[1, 1, 1, 1]] = 1.0;
        let y = conv2d_forward(&x, &w);
        assert_eq!(y, x);
    }

    #[test]
    fn matches_direct_convolution() {
        let x = ArrayD::from_shape_fn(IxDyn(&[2, 3, 5, 5]), |ix| {
            ((ix[0] + 2 * ix[1] + 3 * ix[2] + 5 * ix[3]) % 7) as f64 - 3.0
        });
        let w = ArrayD::from_shape_fn(IxDyn(&[4, 3, 3, 3]), |ix| {
            ((ix[0] + ix[1] + 2 * ix[2] + 3 * ix[3]) % 5) as f64 - 2.0
        });
        let y = conv2d_forward(&x, &w);

        // Direct quadruple loop as the oracle.
        for bi in 0..2 {
            for co in 0..4 {
                for oy in 0..5i64 {
                    for ox in 0..5i64 {
                        let mut accv = 0.0;
                        for ci in 0..3 {
                            for ky in 0..3i64 {
                                for kx in 0..3i64 {
                                    let sy = oy + ky - 1;
                                    let sx = ox + kx - 1;
                                    if sy < 0 || sy >= 5 || sx < 0 || sx >= 5 {
                                        continue;
                                    }
                                    accv += x[[bi, ci, sy as usize, sx as usize]]
                                        * w[[co, ci, ky as usize, kx as usize]];
                                }
                            }
                        }
                        let got = y[[bi, co, oy as usize, ox as usize]];
                        assert!((got - accv).abs() < 1e-12, "mismatch at {bi},{co},{oy},{ox}");
                    }
                }
            }
        }
    }
}
