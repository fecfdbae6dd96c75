//! Bilinear sampling, 2x upsampling and 2x average pooling.
//!
//! Sampling uses a zero-padding border rule: any of the four taps that falls
//! outside `[0, w-1] x [0, h-1]` contributes zero.

use super::tensor::{Real, Tensor};
use crate::error::{invalid, Error, Result};

/// Integer corner and fractional weights of a bilinear tap at `(x, y)`.
#[derive(Debug, Clone, Copy)]
pub struct Taps<T> {
    pub x0: isize,
    pub y0: isize,
    pub fx: T,
    pub fy: T,
}

impl<T: Real> Taps<T> {
    #[inline]
    pub fn at(x: T, y: T) -> Self {
        let xf = x.floor();
        let yf = y.floor();
        Self {
            x0: xf.to_isize().unwrap_or(isize::MIN / 4),
            y0: yf.to_isize().unwrap_or(isize::MIN / 4),
            fx: x - xf,
            fy: y - yf,
        }
    }
}

#[inline]
fn inside(x: isize, y: isize, w: usize, h: usize) -> bool {
    x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h
}

/// Bilinear value of a single-channel plane (`plane[y * w + x]`) at `taps`.
#[inline]
pub fn sample_plane<T: Real>(plane: &[T], w: usize, h: usize, t: &Taps<T>) -> T {
    let one = T::one();
    let get = |x: isize, y: isize| {
        if inside(x, y, w, h) {
            plane[y as usize * w + x as usize]
        } else {
            T::zero()
        }
    };
    let v00 = get(t.x0, t.y0);
    let v10 = get(t.x0 + 1, t.y0);
    let v01 = get(t.x0, t.y0 + 1);
    let v11 = get(t.x0 + 1, t.y0 + 1);
    (one - t.fy) * ((one - t.fx) * v00 + t.fx * v10) + t.fy * ((one - t.fx) * v01 + t.fx * v11)
}

/// Scatter `g` into the four taps of `plane_grad` and return
/// `(d/dx, d/dy)` of the sampled value times `g`.
#[inline]
pub fn sample_plane_backward<T: Real>(
    plane: &[T],
    plane_grad: Option<&mut [T]>,
    w: usize,
    h: usize,
    t: &Taps<T>,
    g: T,
) -> (T, T) {
    let one = T::one();
    let get = |x: isize, y: isize| {
        if inside(x, y, w, h) {
            plane[y as usize * w + x as usize]
        } else {
            T::zero()
        }
    };
    let v00 = get(t.x0, t.y0);
    let v10 = get(t.x0 + 1, t.y0);
    let v01 = get(t.x0, t.y0 + 1);
    let v11 = get(t.x0 + 1, t.y0 + 1);
    if let Some(pg) = plane_grad {
        let mut put = |x: isize, y: isize, v: T| {
            if inside(x, y, w, h) {
                pg[y as usize * w + x as usize] += v;
            }
        };
        put(t.x0, t.y0, g * (one - t.fx) * (one - t.fy));
        put(t.x0 + 1, t.y0, g * t.fx * (one - t.fy));
        put(t.x0, t.y0 + 1, g * (one - t.fx) * t.fy);
        put(t.x0 + 1, t.y0 + 1, g * t.fx * t.fy);
    }
    let dx = (one - t.fy) * (v10 - v00) + t.fy * (v11 - v01);
    let dy = (one - t.fx) * (v01 - v00) + t.fx * (v11 - v10);
    (g * dx, g * dy)
}

fn check_coords<T: Real>(coords: &Tensor<T>) -> Result<(usize, usize)> {
    let (ho, wo, two) = coords.hwc()?;
    if two != 2 {
        return Err(invalid(format!(
            "bilinear_sample: coords must be [h, w, 2], got {:?}",
            coords.shape()
        )));
    }
    if coords.data().iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("bilinear_sample coordinates".into()));
    }
    if !coords.all_finite() {
        return Err(Error::NonFinite("bilinear_sample coordinates".into()));
    }
    Ok((ho, wo))
}

/// Sample `source` (`[h, w, c]`) at per-pixel `(x, y)` coordinates
/// (`[ho, wo, 2]`), producing `[ho, wo, c]`.
pub fn bilinear_sample<T: Real>(source: &Tensor<T>, coords: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = source.hwc()?;
    let (ho, wo) = check_coords(coords)?;
    let src = source.data();
    let mut out = Tensor::zeros(&[ho, wo, c]);
    let od = out.data_mut();
    let one = T::one();
    for p in 0..ho * wo {
        let t = Taps::at(coords.data()[2 * p], coords.data()[2 * p + 1]);
        let corners = [
            (t.x0, t.y0, (one - t.fx) * (one - t.fy)),
            (t.x0 + 1, t.y0, t.fx * (one - t.fy)),
            (t.x0, t.y0 + 1, (one - t.fx) * t.fy),
            (t.x0 + 1, t.y0 + 1, t.fx * t.fy),
        ];
        let dst = &mut od[p * c..(p + 1) * c];
        for (x, y, wgt) in corners {
            if !inside(x, y, w, h) {
                continue;
            }
            let s = (y as usize * w + x as usize) * c;
            for (d, &v) in dst.iter_mut().zip(&src[s..s + c]) {
                *d += wgt * v;
            }
        }
    }
    Ok(out)
}

/// Gradients of [`bilinear_sample`]: `(d source, d coords)`.
pub fn bilinear_sample_backward<T: Real>(
    source: &Tensor<T>,
    coords: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (h, w, c) = source.hwc()?;
    let (ho, wo) = check_coords(coords)?;
    if grad_out.shape() != [ho, wo, c] {
        return Err(Error::Shape {
            op: "bilinear_sample_backward",
            lhs: vec![ho, wo, c],
            rhs: grad_out.shape().to_vec(),
        });
    }
    let src = source.data();
    let go = grad_out.data();
    let mut gs = Tensor::zeros(source.shape());
    let mut gc = Tensor::zeros(coords.shape());
    let one = T::one();
    for p in 0..ho * wo {
        let t = Taps::at(coords.data()[2 * p], coords.data()[2 * p + 1]);
        let g = &go[p * c..(p + 1) * c];
        let fetch = |x: isize, y: isize, ch: usize| {
            if inside(x, y, w, h) {
                src[(y as usize * w + x as usize) * c + ch]
            } else {
                T::zero()
            }
        };
        let (mut dx, mut dy) = (T::zero(), T::zero());
        for (ch, &gv) in g.iter().enumerate() {
            let v00 = fetch(t.x0, t.y0, ch);
            let v10 = fetch(t.x0 + 1, t.y0, ch);
            let v01 = fetch(t.x0, t.y0 + 1, ch);
            let v11 = fetch(t.x0 + 1, t.y0 + 1, ch);
            dx += gv * ((one - t.fy) * (v10 - v00) + t.fy * (v11 - v01));
            dy += gv * ((one - t.fx) * (v01 - v00) + t.fx * (v11 - v10));
        }
        gc.data_mut()[2 * p] = dx;
        gc.data_mut()[2 * p + 1] = dy;
        let corners = [
            (t.x0, t.y0, (one - t.fx) * (one - t.fy)),
            (t.x0 + 1, t.y0, t.fx * (one - t.fy)),
            (t.x0, t.y0 + 1, (one - t.fx) * t.fy),
            (t.x0 + 1, t.y0 + 1, t.fx * t.fy),
        ];
        let gsd = gs.data_mut();
        for (x, y, wgt) in corners {
            if !inside(x, y, w, h) {
                continue;
            }
            let s = (y as usize * w + x as usize) * c;
            for (d, &gv) in gsd[s..s + c].iter_mut().zip(g) {
                *d += wgt * gv;
            }
        }
    }
    Ok((gs, gc))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    Nearest,
    /// Corner-aligned bilinear: output corners coincide with input corners.
    Bilinear,
}

/// Source coordinate and blend weights for corner-aligned 2x upsampling.
fn aligned_taps(out_idx: usize, in_len: usize) -> (usize, usize, f64) {
    if in_len == 1 {
        return (0, 0, 0.0);
    }
    let out_len = 2 * in_len;
    let pos = out_idx as f64 * (in_len - 1) as f64 / (out_len - 1) as f64;
    let i0 = (pos.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, pos - i0 as f64)
}

pub fn upsample2x<T: Real>(input: &Tensor<T>, mode: UpsampleMode) -> Result<Tensor<T>> {
    let (h, w, c) = input.hwc()?;
    let mut out = Tensor::zeros(&[2 * h, 2 * w, c]);
    for oy in 0..2 * h {
        for ox in 0..2 * w {
            let dst_off = (oy * 2 * w + ox) * c;
            match mode {
                UpsampleMode::Nearest => {
                    let s = input.pixel(oy / 2, ox / 2).to_vec();
                    out.data_mut()[dst_off..dst_off + c].copy_from_slice(&s);
                }
                UpsampleMode::Bilinear => {
                    let (y0, y1, fy) = aligned_taps(oy, h);
                    let (x0, x1, fx) = aligned_taps(ox, w);
                    let (fy, fx) = (T::lit(fy), T::lit(fx));
                    let one = T::one();
                    for ch in 0..c {
                        let v = (one - fy) * ((one - fx) * input.at3(y0, x0, ch) + fx * input.at3(y0, x1, ch))
                            + fy * ((one - fx) * input.at3(y1, x0, ch) + fx * input.at3(y1, x1, ch));
                        out.data_mut()[dst_off + ch] = v;
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn upsample2x_backward<T: Real>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
    mode: UpsampleMode,
) -> Result<Tensor<T>> {
    let &[h, w, c] = input_shape else {
        return Err(invalid("upsample2x_backward: input must be rank 3"));
    };
    if grad_out.shape() != [2 * h, 2 * w, c] {
        return Err(Error::Shape {
            op: "upsample2x_backward",
            lhs: vec![2 * h, 2 * w, c],
            rhs: grad_out.shape().to_vec(),
        });
    }
    let mut gin = Tensor::zeros(input_shape);
    let one = T::one();
    for oy in 0..2 * h {
        for ox in 0..2 * w {
            let g = grad_out.pixel(oy, ox).to_vec();
            match mode {
                UpsampleMode::Nearest => {
                    for (d, &v) in gin.pixel_mut(oy / 2, ox / 2).iter_mut().zip(&g) {
                        *d += v;
                    }
                }
                UpsampleMode::Bilinear => {
                    let (y0, y1, fy) = aligned_taps(oy, h);
                    let (x0, x1, fx) = aligned_taps(ox, w);
                    let (fy, fx) = (T::lit(fy), T::lit(fx));
                    for (yy, xx, wgt) in [
                        (y0, x0, (one - fy) * (one - fx)),
                        (y0, x1, (one - fy) * fx),
                        (y1, x0, fy * (one - fx)),
                        (y1, x1, fy * fx),
                    ] {
                        for (d, &v) in gin.pixel_mut(yy, xx).iter_mut().zip(&g) {
                            *d += wgt * v;
                        }
                    }
                }
            }
        }
    }
    Ok(gin)
}

/// 2x2 average pooling with stride 2; odd trailing rows/columns are dropped.
pub fn avgpool2x<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = input.hwc()?;
    if h < 2 || w < 2 {
        return Err(invalid(format!("avgpool2x: input {h}x{w} too small")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut out = Tensor::zeros(&[oh, ow, c]);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let s = input.at3(2 * oy, 2 * ox, ch)
                    + input.at3(2 * oy, 2 * ox + 1, ch)
                    + input.at3(2 * oy + 1, 2 * ox, ch)
                    + input.at3(2 * oy + 1, 2 * ox + 1, ch);
                out.data_mut()[(oy * ow + ox) * c + ch] = s * quarter;
            }
        }
    }
    Ok(out)
}

pub fn avgpool2x_backward<T: Real>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let &[h, w, c] = input_shape else {
        return Err(invalid("avgpool2x_backward: input must be rank 3"));
    };
    if grad_out.shape() != [h / 2, w / 2, c] {
        return Err(Error::Shape {
            op: "avgpool2x_backward",
            lhs: vec![h / 2, w / 2, c],
            rhs: grad_out.shape().to_vec(),
        });
    }
    let quarter = T::lit(0.25);
    let mut gin = Tensor::zeros(input_shape);
    for oy in 0..h / 2 {
        for ox in 0..w / 2 {
            let g = grad_out.pixel(oy, ox).to_vec();
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                for (d, &v) in gin.pixel_mut(2 * oy + dy, 2 * ox + dx).iter_mut().zip(&g) {
                    *d += quarter * v;
                }
            }
        }
    }
    Ok(gin)
}
