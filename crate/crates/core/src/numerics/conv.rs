//! 2-D convolution on `[h, w, c]` feature maps with `[out, kh, kw, in]`
//! kernels, plus its backward pass.

use super::tensor::{axpy, dot, Real, Tensor};
use crate::error::{invalid, Error, Result};

/// Output extent along one axis.
pub fn output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

struct Geometry {
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn geometry<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Geometry> {
    let (h, w, cin) = input.hwc()?;
    let &[cout, kh, kw, wcin] = weight.shape() else {
        return Err(invalid(format!(
            "conv2d: kernel must be [out, kh, kw, in], got {:?}",
            weight.shape()
        )));
    };
    if wcin != cin {
        return Err(Error::Shape {
            op: "conv2d",
            lhs: input.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(invalid(format!("conv2d: kernel extent must be odd, got {kh}x{kw}")));
    }
    if stride == 0 {
        return Err(invalid("conv2d: stride must be positive"));
    }
    let (Some(oh), Some(ow)) = (
        output_extent(h, kh, stride, padding),
        output_extent(w, kw, stride, padding),
    ) else {
        return Err(Error::Shape {
            op: "conv2d",
            lhs: input.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    };
    Ok(Geometry {
        h,
        w,
        cin,
        cout,
        kh,
        kw,
        oh,
        ow,
    })
}

pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = geometry(input, weight, stride, padding)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(Error::Shape {
                op: "conv2d bias",
                lhs: weight.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
    }
    let x = input.data();
    let wt = weight.data();
    let mut out = Tensor::zeros(&[g.oh, g.ow, g.cout]);
    let od = out.data_mut();
    let kstride = g.kh * g.kw * g.cin;
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let o_px = &mut od[(oy * g.ow + ox) * g.cout..(oy * g.ow + ox + 1) * g.cout];
            if let Some(b) = bias {
                o_px.copy_from_slice(b.data());
            }
            for ky in 0..g.kh {
                let iy = (oy * stride + ky) as isize - padding as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * stride + kx) as isize - padding as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let ip = ((iy as usize) * g.w + ix as usize) * g.cin;
                    let in_px = &x[ip..ip + g.cin];
                    let koff = (ky * g.kw + kx) * g.cin;
                    for (o, acc) in o_px.iter_mut().enumerate() {
                        let k = o * kstride + koff;
                        *acc += dot(in_px, &wt[k..k + g.cin]);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of a convolution with respect to its input, kernel and bias.
#[derive(Debug, Clone)]
pub struct Conv2dGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Conv2dGrads<T>> {
    let g = geometry(input, weight, stride, padding)?;
    if grad_out.shape() != [g.oh, g.ow, g.cout] {
        return Err(Error::Shape {
            op: "conv2d_backward",
            lhs: vec![g.oh, g.ow, g.cout],
            rhs: grad_out.shape().to_vec(),
        });
    }
    let x = input.data();
    let wt = weight.data();
    let go = grad_out.data();
    let kstride = g.kh * g.kw * g.cin;

    let mut gin = Tensor::zeros(input.shape());
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(&[g.cout]);
    {
        let gi = gin.data_mut();
        let gwd = gw.data_mut();
        let gbd = gb.data_mut();
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let g_px = &go[(oy * g.ow + ox) * g.cout..(oy * g.ow + ox + 1) * g.cout];
                for (b, &v) in gbd.iter_mut().zip(g_px) {
                    *b += v;
                }
                for ky in 0..g.kh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let ip = ((iy as usize) * g.w + ix as usize) * g.cin;
                        let koff = (ky * g.kw + kx) * g.cin;
                        for (o, &gv) in g_px.iter().enumerate() {
                            if gv == T::zero() {
                                continue;
                            }
                            let k = o * kstride + koff;
                            axpy(gv, &wt[k..k + g.cin], &mut gi[ip..ip + g.cin]);
                            axpy(gv, &x[ip..ip + g.cin], &mut gwd[k..k + g.cin]);
                        }
                    }
                }
            }
        }
    }
    Ok(Conv2dGrads {
        input: gin,
        weight: gw,
        bias: gb,
    })
}
