//! 2-D convolution with two execution routes: im2col + gemm for the
//! multi-channel layers (packing pays off there), and direct row-slice
//! kernels for single-channel kernels such as the SSIM Gaussian window,
//! where a gemm degenerates to m = 1.

use ndarray::{ArrayD, IxDyn};

use super::simd;
use super::{Element, Tensor};

/// Geometry of one convolution, resolved once at graph-build time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dShape {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Conv2dShape {
    pub fn new(cin: usize, h: usize, w: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "kernel larger than padded input");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Conv2dShape { cin, h, w, cout, k, stride, pad, ho, wo }
    }

    fn use_direct(&self) -> bool {
        self.cin * self.cout <= 4
    }
}

/// Valid output range [lo, hi) along one axis: positions whose sampled input
/// index o·stride + k − pad lands inside [0, extent).
#[inline]
fn valid_range(out_len: usize, extent: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let max_in = extent + pad;
    let hi = if max_in > k { ((max_in - k - 1) / stride + 1).min(out_len) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfolds x (Cin,H,W) into a row-major (Cin·k·k) × (Ho·Wo) matrix.
fn im2col<E: Element>(x: &Tensor<E>, sh: &Conv2dShape) -> Vec<E> {
    let xs = x.as_slice().expect("contiguous input");
    let mut cols = vec![E::zero(); sh.cin * sh.k * sh.k * sh.ho * sh.wo];
    let row_len = sh.ho * sh.wo;
    for c in 0..sh.cin {
        let plane = &xs[c * sh.h * sh.w..(c + 1) * sh.h * sh.w];
        for ky in 0..sh.k {
            let (oy_lo, oy_hi) = valid_range(sh.ho, sh.h, sh.stride, ky, sh.pad);
            for kx in 0..sh.k {
                let (ox_lo, ox_hi) = valid_range(sh.wo, sh.w, sh.stride, kx, sh.pad);
                if ox_lo >= ox_hi {
                    continue;
                }
                let row = ((c * sh.k + ky) * sh.k + kx) * row_len;
                for oy in oy_lo..oy_hi {
                    let iy = oy * sh.stride + ky - sh.pad;
                    let ix0 = ox_lo * sh.stride + kx - sh.pad;
                    let out = &mut cols[row + oy * sh.wo + ox_lo..row + oy * sh.wo + ox_hi];
                    if sh.stride == 1 {
                        let src = &plane[iy * sh.w + ix0..iy * sh.w + ix0 + out.len()];
                        out.copy_from_slice(src);
                    } else {
                        let src_row = &plane[iy * sh.w..(iy + 1) * sh.w];
                        let mut ix = ix0;
                        for o in out.iter_mut() {
                            *o = src_row[ix];
                            ix += sh.stride;
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a (Cin·k·k) × (Ho·Wo) gradient back onto the input layout.
fn col2im<E: Element>(dcols: &[E], sh: &Conv2dShape) -> Tensor<E> {
    let mut dx = vec![E::zero(); sh.cin * sh.h * sh.w];
    let row_len = sh.ho * sh.wo;
    for c in 0..sh.cin {
        let plane_off = c * sh.h * sh.w;
        for ky in 0..sh.k {
            let (oy_lo, oy_hi) = valid_range(sh.ho, sh.h, sh.stride, ky, sh.pad);
            for kx in 0..sh.k {
                let (ox_lo, ox_hi) = valid_range(sh.wo, sh.w, sh.stride, kx, sh.pad);
                if ox_lo >= ox_hi {
                    continue;
                }
                let row = ((c * sh.k + ky) * sh.k + kx) * row_len;
                for oy in oy_lo..oy_hi {
                    let iy = oy * sh.stride + ky - sh.pad;
                    let ix0 = ox_lo * sh.stride + kx - sh.pad;
                    let src = &dcols[row + oy * sh.wo + ox_lo..row + oy * sh.wo + ox_hi];
                    let dst_row = &mut dx[plane_off + iy * sh.w..plane_off + (iy + 1) * sh.w];
                    if sh.stride == 1 {
                        for (d, v) in dst_row[ix0..ix0 + src.len()].iter_mut().zip(src) {
                            *d = *d + *v;
                        }
                    } else {
                        let mut ix = ix0;
                        for v in src {
                            dst_row[ix] = dst_row[ix] + *v;
                            ix += sh.stride;
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[sh.cin, sh.h, sh.w]), dx).expect("dx shape")
}

pub fn conv2d_forward<E: Element>(x: &Tensor<E>, w: &Tensor<E>, sh: &Conv2dShape) -> Tensor<E> {
    if sh.use_direct() {
        return direct_forward(x, w, sh);
    }
    let cols = im2col(x, sh);
    let ck = sh.cin * sh.k * sh.k;
    let hw = sh.ho * sh.wo;
    let mut out = vec![E::zero(); sh.cout * hw];
    E::gemm(
        sh.cout,
        ck,
        hw,
        w.as_slice().expect("contiguous weight"),
        ck as isize,
        1,
        &cols,
        hw as isize,
        1,
        &mut out,
        hw as isize,
        1,
    );
    ArrayD::from_shape_vec(IxDyn(&[sh.cout, sh.ho, sh.wo]), out).expect("conv output shape")
}

pub fn conv2d_backward_input<E: Element>(dy: &Tensor<E>, w: &Tensor<E>, sh: &Conv2dShape) -> Tensor<E> {
    if sh.use_direct() {
        return direct_backward_input(dy, w, sh);
    }
    let dys = dy.as_slice().expect("contiguous dy");
    let ck = sh.cin * sh.k * sh.k;
    let hw = sh.ho * sh.wo;
    let mut dcols = vec![E::zero(); ck * hw];
    // dcols = Wᵀ · dY
    E::gemm(
        ck,
        sh.cout,
        hw,
        w.as_slice().expect("contiguous weight"),
        1,
        ck as isize,
        dys,
        hw as isize,
        1,
        &mut dcols,
        hw as isize,
        1,
    );
    col2im(&dcols, sh)
}

pub fn conv2d_backward_weight<E: Element>(dy: &Tensor<E>, x: &Tensor<E>, sh: &Conv2dShape) -> Tensor<E> {
    if sh.use_direct() {
        return direct_backward_weight(dy, x, sh);
    }
    let dys = dy.as_slice().expect("contiguous dy");
    let ck = sh.cin * sh.k * sh.k;
    let hw = sh.ho * sh.wo;
    let cols = im2col(x, sh);
    let mut dw = vec![E::zero(); sh.cout * ck];
    // dW = dY · colsᵀ
    E::gemm(
        sh.cout,
        hw,
        ck,
        dys,
        hw as isize,
        1,
        &cols,
        1,
        hw as isize,
        &mut dw,
        ck as isize,
        1,
    );
    ArrayD::from_shape_vec(IxDyn(&[sh.cout, sh.cin, sh.k, sh.k]), dw).expect("dw shape")
}

fn direct_forward<E: Element>(x: &Tensor<E>, w: &Tensor<E>, sh: &Conv2dShape) -> Tensor<E> {
    let xs = x.as_slice().expect("contiguous input");
    let ws = w.as_slice().expect("contiguous weight");
    let mut out = vec![E::zero(); sh.cout * sh.ho * sh.wo];
    for co in 0..sh.cout {
        let out_plane = &mut out[co * sh.ho * sh.wo..(co + 1) * sh.ho * sh.wo];
        for ci in 0..sh.cin {
            let in_plane = &xs[ci * sh.h * sh.w..(ci + 1) * sh.h * sh.w];
            let wbase = ((co * sh.cin + ci) * sh.k) * sh.k;
            for ky in 0..sh.k {
                let (oy_lo, oy_hi) = valid_range(sh.ho, sh.h, sh.stride, ky, sh.pad);
                for kx in 0..sh.k {
                    let (ox_lo, ox_hi) = valid_range(sh.wo, sh.w, sh.stride, kx, sh.pad);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let wv = ws[wbase + ky * sh.k + kx];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * sh.stride + ky - sh.pad;
                        let ix0 = ox_lo * sh.stride + kx - sh.pad;
                        let dst = &mut out_plane[oy * sh.wo + ox_lo..oy * sh.wo + ox_hi];
                        if sh.stride == 1 {
                            let src = &in_plane[iy * sh.w + ix0..iy * sh.w + ix0 + dst.len()];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d = *d + wv * *s;
                            }
                        } else {
                            let src_row = &in_plane[iy * sh.w..(iy + 1) * sh.w];
                            let mut ix = ix0;
                            for d in dst.iter_mut() {
                                *d = *d + wv * src_row[ix];
                                ix += sh.stride;
                            }
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[sh.cout, sh.ho, sh.wo]), out).expect("conv output shape")
}

fn direct_backward_input<E: Element>(dy: &Tensor<E>, w: &Tensor<E>, sh: &Conv2dShape) -> Tensor<E> {
    let dys = dy.as_slice().expect("contiguous dy");
    let ws = w.as_slice().expect("contiguous weight");
    let mut dx = vec![E::zero(); sh.cin * sh.h * sh.w];
    for co in 0..sh.cout {
        let dy_plane = &dys[co * sh.ho * sh.wo..(co + 1) * sh.ho * sh.wo];
        for ci in 0..sh.cin {
            let dx_plane = &mut dx[ci * sh.h * sh.w..(ci + 1) * sh.h * sh.w];
            let wbase = ((co * sh.cin + ci) * sh.k) * sh.k;
            for ky in 0..sh.k {
                let (oy_lo, oy_hi) = valid_range(sh.ho, sh.h, sh.stride, ky, sh.pad);
                for kx in 0..sh.k {
                    let (ox_lo, ox_hi) = valid_range(sh.wo, sh.w, sh.stride, kx, sh.pad);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let wv = ws[wbase + ky * sh.k + kx];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * sh.stride + ky - sh.pad;
                        let ix0 = ox_lo * sh.stride + kx - sh.pad;
                        let src = &dy_plane[oy * sh.wo + ox_lo..oy * sh.wo + ox_hi];
                        if sh.stride == 1 {
                            let dst = &mut dx_plane[iy * sh.w + ix0..iy * sh.w + ix0 + src.len()];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d = *d + wv * *s;
                            }
                        } else {
                            let dst_row = &mut dx_plane[iy * sh.w..(iy + 1) * sh.w];
                            let mut ix = ix0;
                            for s in src {
                                dst_row[ix] = dst_row[ix] + wv * *s;
                                ix += sh.stride;
                            }
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[sh.cin, sh.h, sh.w]), dx).expect("dx shape")
}

fn direct_backward_weight<E: Element>(dy: &Tensor<E>, x: &Tensor<E>, sh: &Conv2dShape) -> Tensor<E> {
    let dys = dy.as_slice().expect("contiguous dy");
    let xs = x.as_slice().expect("contiguous input");
    let mut dw = vec![E::zero(); sh.cout * sh.cin * sh.k * sh.k];
    for co in 0..sh.cout {
        let dy_plane = &dys[co * sh.ho * sh.wo..(co + 1) * sh.ho * sh.wo];
        for ci in 0..sh.cin {
            let in_plane = &xs[ci * sh.h * sh.w..(ci + 1) * sh.h * sh.w];
            let wbase = ((co * sh.cin + ci) * sh.k) * sh.k;
            for ky in 0..sh.k {
                let (oy_lo, oy_hi) = valid_range(sh.ho, sh.h, sh.stride, ky, sh.pad);
                for kx in 0..sh.k {
                    let (ox_lo, ox_hi) = valid_range(sh.wo, sh.w, sh.stride, kx, sh.pad);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let mut acc = E::zero();
                    for oy in oy_lo..oy_hi {
                        let iy = oy * sh.stride + ky - sh.pad;
                        let ix0 = ox_lo * sh.stride + kx - sh.pad;
                        let g = &dy_plane[oy * sh.wo + ox_lo..oy * sh.wo + ox_hi];
                        if sh.stride == 1 {
                            let src = &in_plane[iy * sh.w + ix0..iy * sh.w + ix0 + g.len()];
                            acc = acc + simd::dot(g, src);
                        } else {
                            let src_row = &in_plane[iy * sh.w..(iy + 1) * sh.w];
                            let mut ix = ix0;
                            for gv in g {
                                acc = acc + *gv * src_row[ix];
                                ix += sh.stride;
                            }
                        }
                    }
                    dw[wbase + ky * sh.k + kx] = acc;
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[sh.cout, sh.cin, sh.k, sh.k]), dw).expect("dw shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_forward(x: &Tensor<f64>, w: &Tensor<f64>, sh: &Conv2dShape) -> Tensor<f64> {
        let mut out = ArrayD::zeros(IxDyn(&[sh.cout, sh.ho, sh.wo]));
        for co in 0..sh.cout {
            for oy in 0..sh.ho {
                for ox in 0..sh.wo {
                    let mut acc = 0.0;
                    for ci in 0..sh.cin {
                        for ky in 0..sh.k {
                            for kx in 0..sh.k {
                                let iy = (oy * sh.stride + ky) as isize - sh.pad as isize;
                                let ix = (ox * sh.stride + kx) as isize - sh.pad as isize;
                                if iy >= 0 && (iy as usize) < sh.h && ix >= 0 && (ix as usize) < sh.w {
                                    acc += w[[co, ci, ky, kx]] * x[[ci, iy as usize, ix as usize]];
                                }
                            }
                        }
                    }
                    out[[co, oy, ox]] = acc;
                }
            }
        }
        out
    }

    /// Both routes against the naive six-loop reference, all stride/pad
    /// combinations in use.
    #[test]
    fn forward_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (cin, cout) in [(1usize, 1usize), (3, 4)] {
            for (stride, pad) in [(1usize, 1usize), (2, 1), (1, 0), (2, 0)] {
                let sh = Conv2dShape::new(cin, 9, 7, cout, 3, stride, pad);
                let x = ArrayD::from_shape_fn(IxDyn(&[sh.cin, sh.h, sh.w]), |_| rng.gen_range(-1.0..1.0));
                let w = ArrayD::from_shape_fn(IxDyn(&[sh.cout, sh.cin, sh.k, sh.k]), |_| {
                    rng.gen_range(-1.0..1.0)
                });
                let fast = conv2d_forward::<f64>(&x, &w, &sh);
                let naive = naive_forward(&x, &w, &sh);
                for (a, b) in fast.iter().zip(naive.iter()) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}
