//! 2D convolution kernels (NCHW, im2col + GEMM).

use crate::tensor::{gemm, Real, Tensor};

/// Geometry of one convolution, shared by the forward and backward kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding.0 - self.kernel_h) / self.stride.0 + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding.1 - self.kernel_w) / self.stride.1 + 1
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let (sh, sw) = g.stride;
    let (ph, pw) = (g.padding.0 as isize, g.padding.1 as isize);
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * sh) as isize + ki as isize - ph;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.height as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * sw) as isize + kj as isize - pw;
                        *o = if ix < 0 || ix >= g.width as isize { T::zero() } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let (sh, sw) = g.stride;
    let (ph, pw) = (g.padding.0 as isize, g.padding.1 as isize);
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * sh) as isize + ki as isize - ph;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, &v) in src[oy * wo..(oy + 1) * wo].iter().enumerate() {
                        let ix = (ox * sw) as isize + kj as isize - pw;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn geometry<T: Real>(x: &Tensor<T>, w: &Tensor<T>, stride: (usize, usize), padding: (usize, usize)) -> ConvGeometry {
    let (_, c, h, wd) = x.dims4();
    let (_, wc, kh, kw) = w.dims4();
    assert_eq!(c, wc, "conv2d: input has {c} channels, kernel expects {wc}");
    assert!(h + 2 * padding.0 >= kh && wd + 2 * padding.1 >= kw, "conv2d: kernel larger than padded input");
    ConvGeometry { in_channels: c, height: h, width: wd, kernel_h: kh, kernel_w: kw, stride, padding }
}

/// `x: [n, cin, h, w]`, `weight: [cout, cin, kh, kw]`, `bias: [cout]`.
pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Tensor<T> {
    let g = geometry(x, weight, stride, padding);
    let n = x.shape()[0];
    let cout = weight.shape()[0];
    assert_eq!(bias.shape(), &[cout], "conv2d: bias shape");
    let (ho, wo) = (g.out_height(), g.out_width());
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let in_sz = g.in_channels * g.height * g.width;
    let out_sz = cout * ho * wo;
    let mut out = Tensor::zeros(&[n, cout, ho, wo]);
    let mut cols = vec![T::zero(); rows * ncols];
    for s in 0..n {
        im2col(&x.data()[s * in_sz..(s + 1) * in_sz], &g, &mut cols);
        let dst = &mut out.data_mut()[s * out_sz..(s + 1) * out_sz];
        for (o, &b) in bias.data().iter().enumerate() {
            dst[o * ncols..(o + 1) * ncols].fill(b);
        }
        gemm(cout, rows, ncols, T::one(), weight.data(), false, &cols, false, T::one(), dst);
    }
    out
}

/// Gradients of a convolution with respect to input, weight and bias.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: (usize, usize),
    padding: (usize, usize),
    need_input: bool,
) -> ConvGrads<T> {
    let g = geometry(x, weight, stride, padding);
    let n = x.shape()[0];
    let cout = weight.shape()[0];
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let in_sz = g.in_channels * g.height * g.width;
    let out_sz = cout * ncols;
    assert_eq!(grad_out.shape(), &[n, cout, g.out_height(), g.out_width()]);

    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(&[cout]);
    let mut gx = if need_input { Some(Tensor::zeros(x.shape())) } else { None };
    let mut cols = vec![T::zero(); rows * ncols];
    for s in 0..n {
        let gy = &grad_out.data()[s * out_sz..(s + 1) * out_sz];
        for (o, b) in gb.data_mut().iter_mut().enumerate() {
            *b += gy[o * ncols..(o + 1) * ncols].iter().copied().sum();
        }
        im2col(&x.data()[s * in_sz..(s + 1) * in_sz], &g, &mut cols);
        gemm(cout, ncols, rows, T::one(), gy, false, &cols, true, T::one(), gw.data_mut());
        if let Some(gx) = gx.as_mut() {
            gemm(rows, cout, ncols, T::one(), weight.data(), true, gy, false, T::zero(), &mut cols);
            col2im(&cols, &g, &mut gx.data_mut()[s * in_sz..(s + 1) * in_sz]);
        }
    }
    ConvGrads { input: gx, weight: gw, bias: gb }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, s: (usize, usize), p: (usize, usize)) -> Tensor<f64> {
        let (n, c, h, wd) = x.dims4();
        let (co, _, kh, kw) = w.dims4();
        let ho = (h + 2 * p.0 - kh) / s.0 + 1;
        let wo = (wd + 2 * p.1 - kw) / s.1 + 1;
        Tensor::from_fn(&[n, co, ho, wo], |idx| {
            let ox = idx % wo;
            let oy = (idx / wo) % ho;
            let o = (idx / (wo * ho)) % co;
            let si = idx / (wo * ho * co);
            let mut acc = b.data()[o];
            for ci in 0..c {
                for ki in 0..kh {
                    for kj in 0..kw {
                        let iy = (oy * s.0 + ki) as isize - p.0 as isize;
                        let ix = (ox * s.1 + kj) as isize - p.1 as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            acc += x.data()[((si * c + ci) * h + iy as usize) * wd + ix as usize]
                                * w.data()[((o * c + ci) * kh + ki) * kw + kj];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn forward_matches_direct_sum() {
        for &(stride, pad) in &[((1, 1), (1, 1)), ((2, 1), (1, 1)), ((2, 2), (0, 1))] {
            let x = Tensor::from_fn(&[2, 3, 7, 5], |i| ((i * 7919) % 13) as f64 / 13.0 - 0.5);
            let w = Tensor::from_fn(&[4, 3, 3, 3], |i| ((i * 104729) % 17) as f64 / 17.0 - 0.5);
            let b = Tensor::from_fn(&[4], |i| i as f64 * 0.1);
            let got = conv2d_forward(&x, &w, &b, stride, pad);
            let want = naive(&x, &w, &b, stride, pad);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), gy> is bilinear in (x, w); check gradients via finite differences.
        let stride = (2, 1);
        let pad = (1, 1);
        let x = Tensor::from_fn(&[1, 2, 6, 4], |i| ((i * 31) % 11) as f64 / 11.0 - 0.4);
        let w = Tensor::from_fn(&[3, 2, 3, 3], |i| ((i * 17) % 7) as f64 / 7.0 - 0.3);
        let b = Tensor::from_fn(&[3], |i| i as f64);
        let y = conv2d_forward(&x, &w, &b, stride, pad);
        let gy = Tensor::from_fn(y.shape(), |i| ((i * 13) % 5) as f64 - 2.0);
        let grads = conv2d_backward(&x, &w, &gy, stride, pad, true);
        let objective = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
            conv2d_forward(x, w, b, stride, pad).data().iter().zip(gy.data()).map(|(a, g)| a * g).sum::<f64>()
        };
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (objective(&xp, &w, &b) - objective(&xm, &w, &b)) / (2.0 * h);
            assert!((fd - grads.input.as_ref().unwrap().data()[i]).abs() < 1e-6);
        }
        for i in 0..w.len() {
            let mut wp = w.clone();
            wp.data_mut()[i] += h;
            let mut wm = w.clone();
            wm.data_mut()[i] -= h;
            let fd = (objective(&x, &wp, &b) - objective(&x, &wm, &b)) / (2.0 * h);
            assert!((fd - grads.weight.data()[i]).abs() < 1e-6);
        }
        for o in 0..3 {
            let per_channel: f64 = gy.data()[o * 12..(o + 1) * 12].iter().sum();
            assert!((grads.bias.data()[o] - per_channel).abs() < 1e-12);
        }
    }
}
