//! Flow-guided window sampling of a correlation pyramid.
//!
//! For a current-frame level `l`, pixel `(i, j)` and flow `(fx, fy)` stored in
//! level-`l` pixel units, the window centre on previous-frame level `k` is
//! `((j + fx) * 2^(l-k), (i + fy) * 2^(l-k))`. Every configured `(l, k)`
//! volume contributes a `(2 r_k + 1)^2` bilinear window; output channels are
//! ordered by `k`, then window row, then window column.

use crate::correlation::CorrelationPyramid;
use crate::error::{invalid, Error, Result};
use crate::numerics::sample::{sample_plane, sample_plane_backward, Taps};
use crate::numerics::{Real, Tensor};

/// Per-pixel motion features sampled from the correlation pyramid.
pub type MotionFeatureMap<T> = Tensor<T>;

/// Number of output channels for level `l`.
pub fn lookup_channels<T: Real>(pyramid: &CorrelationPyramid<T>, level: usize, radii: &[usize]) -> usize {
    (0..pyramid.num_levels())
        .filter(|&k| pyramid.get(level, k).is_some())
        .map(|k| (2 * radii[k] + 1).pow(2))
        .sum()
}

fn scale_between<T: Real>(l: usize, k: usize) -> T {
    T::lit(2f64.powi(l as i32 - k as i32))
}

fn check<T: Real>(
    pyramid: &CorrelationPyramid<T>,
    level: usize,
    flow: &Tensor<T>,
    radii: &[usize],
) -> Result<(usize, usize)> {
    let n = pyramid.num_levels();
    if level >= n {
        return Err(invalid(format!("lookup: level {level} out of range ({n} levels)")));
    }
    if radii.len() != n {
        return Err(invalid(format!("lookup: {} radii for {n} levels", radii.len())));
    }
    let (h, w, two) = flow.hwc()?;
    if two != 2 {
        return Err(invalid(format!("lookup: flow must be [h, w, 2], got {:?}", flow.shape())));
    }
    for k in 0..n {
        if let Some(v) = pyramid.get(level, k) {
            let e = v.extents();
            if (e[0], e[1]) != (h, w) {
                return Err(Error::Shape {
                    op: "lookup (flow vs volume)",
                    lhs: flow.shape().to_vec(),
                    rhs: e.to_vec(),
                });
            }
        }
    }
    if !flow.all_finite() {
        return Err(Error::NonFinite(format!("flow at level {level}")));
    }
    Ok((h, w))
}

pub fn lookup<T: Real>(
    pyramid: &CorrelationPyramid<T>,
    level: usize,
    flow: &Tensor<T>,
    radii: &[usize],
) -> Result<MotionFeatureMap<T>> {
    let (h, w) = check(pyramid, level, flow, radii)?;
    let f = lookup_channels(pyramid, level, radii);
    let mut out = Tensor::zeros(&[h, w, f]);
    for i in 0..h {
        for j in 0..w {
            let d = flow.pixel(i, j);
            let (fx, fy) = (d[0], d[1]);
            let dst = out.pixel_mut(i, j);
            let mut ch = 0;
            for k in 0..pyramid.num_levels() {
                let Some(vol) = pyramid.get(level, k) else { continue };
                let [_, _, hk, wk] = vol.extents();
                let s: T = scale_between(level, k);
                let centre = Taps::at((T::lit(j as f64) + fx) * s, (T::lit(i as f64) + fy) * s);
                let plane = vol.plane(i, j);
                let r = radii[k] as isize;
                for a in -r..=r {
                    for b in -r..=r {
                        let t = Taps {
                            x0: centre.x0 + b,
                            y0: centre.y0 + a,
                            ..centre
                        };
                        dst[ch] = sample_plane(plane, wk, hk, &t);
                        ch += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Backpropagate `grad` (shaped like the lookup output) into the volumes
/// (accumulated into `grad_pyramid`) and return the flow gradient.
pub fn lookup_backward<T: Real>(
    pyramid: &CorrelationPyramid<T>,
    level: usize,
    flow: &Tensor<T>,
    radii: &[usize],
    grad: &Tensor<T>,
    mut grad_pyramid: Option<&mut CorrelationPyramid<T>>,
) -> Result<Tensor<T>> {
    let (h, w) = check(pyramid, level, flow, radii)?;
    let f = lookup_channels(pyramid, level, radii);
    if grad.shape() != [h, w, f] {
        return Err(Error::Shape {
            op: "lookup_backward",
            lhs: vec![h, w, f],
            rhs: grad.shape().to_vec(),
        });
    }
    let mut dflow = Tensor::zeros(flow.shape());
    for i in 0..h {
        for j in 0..w {
            let d = flow.pixel(i, j);
            let (fx, fy) = (d[0], d[1]);
            let g_px = grad.pixel(i, j);
            let (mut gx, mut gy) = (T::zero(), T::zero());
            let mut ch = 0;
            for k in 0..pyramid.num_levels() {
                let Some(vol) = pyramid.get(level, k) else { continue };
                let [_, _, hk, wk] = vol.extents();
                let s: T = scale_between(level, k);
                let centre = Taps::at((T::lit(j as f64) + fx) * s, (T::lit(i as f64) + fy) * s);
                let plane = vol.plane(i, j);
                let mut plane_grad = grad_pyramid
                    .as_deref_mut()
                    .and_then(|gp| gp.get_mut(level, k))
                    .map(|v| v.plane_mut(i, j));
                let r = radii[k] as isize;
                let (mut sx, mut sy) = (T::zero(), T::zero());
                for a in -r..=r {
                    for b in -r..=r {
                        let g = g_px[ch];
                        ch += 1;
                        if g == T::zero() {
                            continue;
                        }
                        let t = Taps {
                            x0: centre.x0 + b,
                            y0: centre.y0 + a,
                            ..centre
                        };
                        let (dx, dy) =
                            sample_plane_backward(plane, plane_grad.as_deref_mut(), wk, hk, &t, g);
                        sx += dx;
                        sy += dy;
                    }
                }
                gx += sx * s;
                gy += sy * s;
            }
            let d = dflow.pixel_mut(i, j);
            d[0] = gx;
            d[1] = gy;
        }
    }
    Ok(dflow)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlation::{build_pyramid, CorrelationConfig, FeaturePyramid};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> CorrelationPyramid<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mk = |rng: &mut ChaCha8Rng| {
            FeaturePyramid::new(vec![
                Tensor::randn(&[8, 8, 4], 1.0, rng),
                Tensor::randn(&[4, 4, 4], 1.0, rng),
            ])
            .unwrap()
        };
        let a = mk(&mut rng);
        let b = mk(&mut rng);
        build_pyramid(&a, &b, &CorrelationConfig::default()).unwrap()
    }

    #[test]
    fn zero_flow_centre_is_identity_position() {
        let p = setup(1);
        let flow = Tensor::zeros(&[8, 8, 2]);
        let f = lookup(&p, 0, &flow, &[1, 1]).unwrap();
        assert_eq!(f.shape(), &[8, 8, 18]);
        let v = p.get(0, 0).unwrap();
        // centre tap of the self-level window is channel 4
        assert_eq!(f.at3(3, 5, 4), v.get(3, 5, 3, 5));
        assert_eq!(f.at3(3, 5, 0), v.get(3, 5, 2, 4));
    }

    #[test]
    fn integer_shift_matches_shifted_window() {
        let p = setup(2);
        let zero = Tensor::zeros(&[8, 8, 2]);
        let mut shift = Tensor::zeros(&[8, 8, 2]);
        for px in shift.data_mut().chunks_mut(2) {
            px[0] = 1.0;
        }
        let f0 = lookup(&p, 0, &zero, &[1, 1]).unwrap();
        let f1 = lookup(&p, 0, &shift, &[1, 1]).unwrap();
        // window column b at shift 1 equals column b+1 at shift 0
        for i in 2..6 {
            for j in 2..5 {
                for a in 0..3 {
                    for b in 0..2 {
                        assert_eq!(f1.at3(i, j, a * 3 + b), f0.at3(i, j, a * 3 + b + 1));
                    }
                }
            }
        }
    }

    #[test]
    fn far_out_of_range_flow_samples_zero() {
        let p = setup(3);
        let flow = Tensor::full(&[8, 8, 2], 1000.0);
        let f = lookup(&p, 0, &flow, &[1, 1]).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nan_flow_rejected() {
        let p = setup(4);
        let mut flow = Tensor::zeros(&[8, 8, 2]);
        flow.data_mut()[5] = f64::NAN;
        assert!(matches!(lookup(&p, 0, &flow, &[1, 1]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn wrong_flow_shape_rejected() {
        let p = setup(5);
        let flow = Tensor::zeros(&[4, 4, 2]);
        assert!(lookup(&p, 0, &flow, &[1, 1]).is_err());
    }
}
