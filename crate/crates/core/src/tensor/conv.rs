use super::{Result, TensorError};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
        let (f, kc, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kc != c {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: input.to_vec(),
                rhs: kernel.to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::ZeroStride("conv2d"));
        }
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        if kh > ph || kw > pw {
            return Err(TensorError::KernelTooLarge { kh, kw, h: ph, w: pw });
        }
        Ok(Self {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            stride,
            pad,
            oh: (ph - kh) / stride + 1,
            ow: (pw - kw) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.n, self.f, self.oh, self.ow]
    }

    /// Input coordinate hit by output position `o` and kernel tap `k`, if inside the unpadded input.
    #[inline]
    fn source(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        (o * self.stride + k).checked_sub(self.pad).filter(|&i| i < limit)
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], k: &[T], g: &ConvGeometry) -> Vec<T> {
    let mut out = vec![T::zero(); g.n * g.f * g.oh * g.ow];
    for n in 0..g.n {
        for f in 0..g.f {
            let obase = (n * g.f + f) * g.oh * g.ow;
            for c in 0..g.c {
                let xbase = (n * g.c + c) * g.h * g.w;
                let kbase = (f * g.c + c) * g.kh * g.kw;
                for oy in 0..g.oh {
                    for ki in 0..g.kh {
                        let Some(iy) = g.source(oy, ki, g.h) else { continue };
                        for ox in 0..g.ow {
                            let mut acc = T::zero();
                            for kj in 0..g.kw {
                                if let Some(ix) = g.source(ox, kj, g.w) {
                                    acc += x[xbase + iy * g.w + ix] * k[kbase + ki * g.kw + kj];
                                }
                            }
                            out[obase + oy * g.ow + ox] += acc;
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_backward<T: Scalar>(x: &[T], k: &[T], gout: &[T], g: &ConvGeometry) -> (Vec<T>, Vec<T>) {
    let mut gx = vec![T::zero(); x.len()];
    let mut gk = vec![T::zero(); k.len()];
    for n in 0..g.n {
        for f in 0..g.f {
            let obase = (n * g.f + f) * g.oh * g.ow;
            for c in 0..g.c {
                let xbase = (n * g.c + c) * g.h * g.w;
                let kbase = (f * g.c + c) * g.kh * g.kw;
                for oy in 0..g.oh {
                    for ki in 0..g.kh {
                        let Some(iy) = g.source(oy, ki, g.h) else { continue };
                        for ox in 0..g.ow {
                            let go = gout[obase + oy * g.ow + ox];
                            for kj in 0..g.kw {
                                if let Some(ix) = g.source(ox, kj, g.w) {
                                    let xi = xbase + iy * g.w + ix;
                                    let kk = kbase + ki * g.kw + kj;
                                    gx[xi] += go * k[kk];
                                    gk[kk] += go * x[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gk)
}
