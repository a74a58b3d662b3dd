use std::sync::Arc;

use super::ops::{gemm, rule};
use super::{counter, Tensor};
use crate::error::{Error, Result};

/// Stride and zero padding of a 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    pub const fn new(stride: usize, padding: usize) -> Self {
        Conv2dSpec { stride, padding }
    }

    /// Stride 1, "same" padding for an odd kernel.
    pub const fn same(kernel: usize) -> Self {
        Conv2dSpec {
            stride: 1,
            padding: kernel / 2,
        }
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let l = self.ho * self.wo;
        let mut cols = vec![0.0; self.cin * self.kh * self.kw * l];
        for c in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * l..(row + 1) * l];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &x[(c * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[oy * self.wo + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let l = self.ho * self.wo;
        let mut x = vec![0.0; self.cin * self.h * self.w];
        for c in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * l..(row + 1) * l];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut x[(c * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

impl Tensor {
    /// 2-D cross-correlation of a `C×H×W` map with an `out×in×kh×kw` kernel.
    pub fn conv2d(
        &self,
        kernel: &Tensor,
        bias: Option<&Tensor>,
        spec: Conv2dSpec,
    ) -> Result<Tensor> {
        let &[cin, h, w] = self.shape() else {
            return Err(Error::dim(format!(
                "conv2d input must be C×H×W, got {:?}",
                self.shape()
            )));
        };
        let &[cout, kin, kh, kw] = kernel.shape() else {
            return Err(Error::dim(format!(
                "conv2d kernel must be out×in×kh×kw, got {:?}",
                kernel.shape()
            )));
        };
        if kin != cin {
            return Err(Error::dim(format!(
                "conv2d kernel expects {kin} input channels, map has {cin}"
            )));
        }
        if spec.stride == 0 {
            return Err(Error::dim("conv2d stride must be positive"));
        }
        let (ph, pw) = (h + 2 * spec.padding, w + 2 * spec.padding);
        if kh > ph || kw > pw {
            return Err(Error::dim(format!(
                "conv2d kernel {kh}×{kw} larger than padded input {ph}×{pw}"
            )));
        }
        if let Some(b) = bias {
            if b.numel() != cout {
                return Err(Error::dim(format!(
                    "conv2d bias has {} entries for {cout} output channels",
                    b.numel()
                )));
            }
        }
        let geo = Geometry {
            cin,
            h,
            w,
            kh,
            kw,
            ho: (ph - kh) / spec.stride + 1,
            wo: (pw - kw) / spec.stride + 1,
            stride: spec.stride,
            pad: spec.padding,
        };
        let l = geo.ho * geo.wo;
        let kdim = cin * kh * kw;
        let cols: Arc<Vec<f64>> = if geo.is_pointwise() {
            Arc::new(self.to_vec())
        } else {
            Arc::new(geo.im2col(self.data()))
        };
        let mut out = vec![0.0; cout * l];
        if let Some(b) = bias {
            for (row, &bv) in out.chunks_mut(l).zip(b.data()) {
                row.fill(bv);
            }
        }
        gemm(
            cout,
            kdim,
            l,
            kernel.data(),
            false,
            &cols,
            false,
            &mut out,
            bias.is_some(),
        );
        counter::add((cout * kdim * l) as u64);

        let mut inputs = vec![self.clone(), kernel.clone()];
        if let Some(b) = bias {
            inputs.push(b.clone());
        }
        Ok(Tensor::from_op(
            "conv2d",
            vec![cout, geo.ho, geo.wo],
            out,
            inputs,
            rule(move |inputs, _, g| {
                let x = &inputs[0];
                let k = &inputs[1];
                let dx = x.requires_grad().then(|| {
                    let mut dcols = vec![0.0; kdim * l];
                    gemm(kdim, cout, l, k.data(), true, g, false, &mut dcols, false);
                    if geo.is_pointwise() {
                        dcols
                    } else {
                        geo.col2im(&dcols)
                    }
                });
                let dk = k.requires_grad().then(|| {
                    let mut dk = vec![0.0; cout * kdim];
                    gemm(cout, l, kdim, g, false, &cols, true, &mut dk, false);
                    dk
                });
                let mut grads = vec![dx, dk];
                if let Some(b) = inputs.get(2) {
                    grads.push(
                        b.requires_grad()
                            .then(|| g.chunks(l).map(|r| r.iter().sum()).collect()),
                    );
                }
                grads
            }),
        ))
    }

    /// Bilinear up-sampling of a `C×H×W` map by an integer factor
    /// (half-pixel centres, i.e. `align_corners = false`).
    pub fn bilinear_upsample(&self, factor: usize) -> Result<Tensor> {
        let &[c, h, w] = self.shape() else {
            return Err(Error::dim(format!(
                "upsample input must be C×H×W, got {:?}",
                self.shape()
            )));
        };
        if factor == 0 {
            return Err(Error::dim("upsample factor must be at least 1"));
        }
        if factor == 1 {
            return self.reshape(&[c, h, w]);
        }
        let (ho, wo) = (h * factor, w * factor);
        let ys = Arc::new(interp_taps(h, factor));
        let xs = Arc::new(interp_taps(w, factor));
        let plane = |src: &[f64], dst: &mut [f64]| {
            for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                    let top = (1.0 - lx) * src[y0 * w + x0] + lx * src[y0 * w + x1];
                    let bottom = (1.0 - lx) * src[y1 * w + x0] + lx * src[y1 * w + x1];
                    dst[oy * wo + ox] = (1.0 - ly) * top + ly * bottom;
                }
            }
        };
        let mut out = vec![0.0; c * ho * wo];
        for (src, dst) in self.data().chunks(h * w).zip(out.chunks_mut(ho * wo)) {
            plane(src, dst);
        }
        Ok(Tensor::from_op(
            "bilinear_upsample",
            vec![c, ho, wo],
            out,
            vec![self.clone()],
            rule(move |_, _, g| {
                let mut dx = vec![0.0; c * h * w];
                for (gp, dp) in g.chunks(ho * wo).zip(dx.chunks_mut(h * w)) {
                    for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                        for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                            let gv = gp[oy * wo + ox];
                            dp[y0 * w + x0] += gv * (1.0 - ly) * (1.0 - lx);
                            dp[y0 * w + x1] += gv * (1.0 - ly) * lx;
                            dp[y1 * w + x0] += gv * ly * (1.0 - lx);
                            dp[y1 * w + x1] += gv * ly * lx;
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }
}

/// Source taps `(lo, hi, weight_of_hi)` for each output index along one axis.
fn interp_taps(len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..len * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(len - 1);
            let hi = (lo + 1).min(len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}
