//! Raw 2-D convolution kernels (forward, input-gradient, kernel-gradient).
//!
//! Layout conventions: inputs are `[H, W, Cin]`, kernels `[k, k, Cin, Cout]`,
//! outputs `[Hout, Wout, Cout]`, all row-major. The inner loops run over the
//! contiguous channel axes so LLVM can vectorize them.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding totalling `k - 1` per axis, split evenly with the extra
    /// pixel on the bottom/right when `k` is even. Output spatial size is
    /// `floor((n - 1) / stride) + 1`.
    Same,
    /// No padding; output spatial size is `floor((n - k) / stride) + 1`.
    Valid,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

pub(crate) fn conv_geometry(
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: Padding,
) -> Result<ConvGeom> {
    if stride == 0 {
        return Err(Error::ZeroStride);
    }
    match padding {
        Padding::Valid => {
            if k > h || k > w {
                return Err(Error::KernelTooLarge {
                    kernel: k,
                    padded_h: h,
                    padded_w: w,
                });
            }
            Ok(ConvGeom {
                out_h: (h - k) / stride + 1,
                out_w: (w - k) / stride + 1,
                pad_top: 0,
                pad_left: 0,
            })
        }
        Padding::Same => Ok(ConvGeom {
            out_h: (h - 1) / stride + 1,
            out_w: (w - 1) / stride + 1,
            pad_top: (k - 1) / 2,
            pad_left: (k - 1) / 2,
        }),
    }
}

pub(crate) fn forward(
    input: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    kernel: &[f64],
    k: usize,
    cout: usize,
    stride: usize,
    geom: ConvGeom,
) -> Vec<f64> {
    let mut out = vec![0.0; geom.out_h * geom.out_w * cout];
    for oh in 0..geom.out_h {
        for kh in 0..k {
            let ih = oh * stride + kh;
            if ih < geom.pad_top || ih - geom.pad_top >= h {
                continue;
            }
            let ih = ih - geom.pad_top;
            for ow in 0..geom.out_w {
                let out_off = (oh * geom.out_w + ow) * cout;
                for kw in 0..k {
                    let iw = ow * stride + kw;
                    if iw < geom.pad_left || iw - geom.pad_left >= w {
                        continue;
                    }
                    let iw = iw - geom.pad_left;
                    let x = &input[(ih * w + iw) * cin..(ih * w + iw) * cin + cin];
                    let kbase = (kh * k + kw) * cin * cout;
                    for (ci, &xv) in x.iter().enumerate() {
                        let krow = &kernel[kbase + ci * cout..kbase + ci * cout + cout];
                        let orow = &mut out[out_off..out_off + cout];
                        for (o, &kv) in orow.iter_mut().zip(krow) {
                            *o += xv * kv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient of the convolution output w.r.t. the input image.
pub(crate) fn backward_input(
    grad_out: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    kernel: &[f64],
    k: usize,
    cout: usize,
    stride: usize,
    geom: ConvGeom,
) -> Vec<f64> {
    let mut grad_in = vec![0.0; h * w * cin];
    for oh in 0..geom.out_h {
        for kh in 0..k {
            let ih = oh * stride + kh;
            if ih < geom.pad_top || ih - geom.pad_top >= h {
                continue;
            }
            let ih = ih - geom.pad_top;
            for ow in 0..geom.out_w {
                let g = &grad_out[(oh * geom.out_w + ow) * cout..(oh * geom.out_w + ow + 1) * cout];
                for kw in 0..k {
                    let iw = ow * stride + kw;
                    if iw < geom.pad_left || iw - geom.pad_left >= w {
                        continue;
                    }
                    let iw = iw - geom.pad_left;
                    let gi = &mut grad_in[(ih * w + iw) * cin..(ih * w + iw) * cin + cin];
                    let kbase = (kh * k + kw) * cin * cout;
                    for (ci, gv) in gi.iter_mut().enumerate() {
                        let krow = &kernel[kbase + ci * cout..kbase + ci * cout + cout];
                        let mut acc = 0.0;
                        for (&kv, &go) in krow.iter().zip(g) {
                            acc += kv * go;
                        }
                        *gv += acc;
                    }
                }
            }
        }
    }
    grad_in
}

/// Gradient of the convolution output w.r.t. the kernel.
pub(crate) fn backward_kernel(
    grad_out: &[f64],
    input: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    cout: usize,
    stride: usize,
    geom: ConvGeom,
) -> Vec<f64> {
    let mut grad_k = vec![0.0; k * k * cin * cout];
    for oh in 0..geom.out_h {
        for kh in 0..k {
            let ih = oh * stride + kh;
            if ih < geom.pad_top || ih - geom.pad_top >= h {
                continue;
            }
            let ih = ih - geom.pad_top;
            for ow in 0..geom.out_w {
                let g = &grad_out[(oh * geom.out_w + ow) * cout..(oh * geom.out_w + ow + 1) * cout];
                for kw in 0..k {
                    let iw = ow * stride + kw;
                    if iw < geom.pad_left || iw - geom.pad_left >= w {
                        continue;
                    }
                    let iw = iw - geom.pad_left;
                    let x = &input[(ih * w + iw) * cin..(ih * w + iw) * cin + cin];
                    let kbase = (kh * k + kw) * cin * cout;
                    for (ci, &xv) in x.iter().enumerate() {
                        let krow = &mut grad_k[kbase + ci * cout..kbase + ci * cout + cout];
                        for (kg, &go) in krow.iter_mut().zip(g) {
                            *kg += xv * go;
                        }
                    }
                }
            }
        }
    }
    grad_k
}
