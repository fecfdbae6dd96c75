//! Clip-level geometric augmentation: one random homography per clip,
//! applied identically to every frame and box.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::clip::{LabeledBox, Sample};
use crate::error::{invalid, Result};
use crate::geometry::BBox;
use crate::numerics::Tensor;

/// Value written where the warp samples outside the source frame.
pub const FILL: f32 = 0.5;

/// `[degree, scale, perspective]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AugmentParams(pub [f64; 3]);

impl Default for AugmentParams {
    fn default() -> Self {
        Self([2.0, 0.2, 1e-4])
    }
}

impl AugmentParams {
    pub const NONE: Self = Self([0.0, 0.0, 0.0]);

    pub fn degree(&self) -> f64 {
        self.0[0]
    }

    pub fn scale(&self) -> f64 {
        self.0[1]
    }

    pub fn perspective(&self) -> f64 {
        self.0[2]
    }

    pub fn is_identity(&self) -> bool {
        self.0 == [0.0; 3]
    }

    pub fn validate(&self) -> Result<()> {
        let [d, s, p] = self.0;
        if !(d.is_finite() && d.abs() <= 45.0) {
            return Err(invalid(format!("augmentation degree {d} outside [-45, 45]")));
        }
        if !(0.0..=0.9).contains(&s) {
            return Err(invalid(format!("augmentation scale {s} outside [0, 0.9]")));
        }
        if !(0.0..=1e-2).contains(&p) {
            return Err(invalid(format!("augmentation perspective {p} outside [0, 0.01]")));
        }
        Ok(())
    }
}

/// Row-major 3x3 projective transform acting on `(x, y, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(pub [[f64; 3]; 3]);

impl Homography {
    pub const IDENTITY: Self = Self([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn mul(&self, o: &Self) -> Self {
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.0[i][k] * o.0[k][j]).sum();
            }
        }
        Self(m)
    }

    /// `None` when the point maps to (or behind) the line at infinity.
    pub fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let m = &self.0;
        let w = m[2][0] * x + m[2][1] * y + m[2][2];
        if w <= 1e-12 {
            return None;
        }
        Some((
            (m[0][0] * x + m[0][1] * y + m[0][2]) / w,
            (m[1][0] * x + m[1][1] * y + m[1][2]) / w,
        ))
    }

    pub fn inverse(&self) -> Option<Self> {
        let m = &self.0;
        let c = |r0: usize, c0: usize, r1: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
        let cof = [
            [c(1, 1, 2, 2), -c(1, 0, 2, 2), c(1, 0, 2, 1)],
            [-c(0, 1, 2, 2), c(0, 0, 2, 2), -c(0, 0, 2, 1)],
            [c(0, 1, 1, 2), -c(0, 0, 1, 2), c(0, 0, 1, 1)],
        ];
        let det: f64 = (0..3).map(|j| m[0][j] * cof[0][j]).sum();
        if det.abs() < 1e-15 {
            return None;
        }
        let mut inv = [[0.0; 3]; 3];
        for (i, row) in inv.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = cof[j][i] / det;
            }
        }
        Some(Self(inv))
    }
}

/// Centre, perspective, rotate+scale, then move the centre back.
pub fn sample_homography<R: Rng + ?Sized>(params: &AugmentParams, width: usize, height: usize, rng: &mut R) -> Homography {
    let mut sym = |r: f64| (rng.random::<f64>() * 2.0 - 1.0) * r;
    let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
    let px = sym(params.perspective());
    let py = sym(params.perspective());
    let angle = sym(params.degree()).to_radians();
    let s = 1.0 + sym(params.scale());
    let center = Homography([[1.0, 0.0, -cx], [0.0, 1.0, -cy], [0.0, 0.0, 1.0]]);
    let persp = Homography([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [px, py, 1.0]]);
    let (sin, cos) = angle.sin_cos();
    let rot = Homography([[s * cos, -s * sin, 0.0], [s * sin, s * cos, 0.0], [0.0, 0.0, 1.0]]);
    let back = Homography([[1.0, 0.0, cx], [0.0, 1.0, cy], [0.0, 0.0, 1.0]]);
    back.mul(&rot).mul(&persp).mul(&center)
}

/// Inverse-mapped bilinear warp; pixel `(x, y)` covers `[x, x+1) x [y, y+1)`.
pub fn warp_frame(frame: &Tensor<f32>, h: &Homography) -> Result<Tensor<f32>> {
    let (fh, fw, c) = frame.hwc()?;
    let inv = h.inverse().ok_or_else(|| invalid("augmentation: singular homography"))?;
    let src = frame.data();
    let mut out = Tensor::full(&[fh, fw, c], FILL);
    let tap = |yy: i64, xx: i64, ch: usize| -> f32 {
        if yy < 0 || xx < 0 || yy >= fh as i64 || xx >= fw as i64 {
            FILL
        } else {
            src[(yy as usize * fw + xx as usize) * c + ch]
        }
    };
    let dst = out.data_mut();
    for y in 0..fh {
        for x in 0..fw {
            let Some((sx, sy)) = inv.apply(x as f64 + 0.5, y as f64 + 0.5) else { continue };
            let (u, v) = (sx - 0.5, sy - 0.5);
            if !(u > -1.0 && v > -1.0 && u < fw as f64 && v < fh as f64) {
                continue;
            }
            let (x0, y0) = (u.floor(), v.floor());
            let (ax, ay) = ((u - x0) as f32, (v - y0) as f32);
            let (x0, y0) = (x0 as i64, y0 as i64);
            for ch in 0..c {
                let top = tap(y0, x0, ch) * (1.0 - ax) + tap(y0, x0 + 1, ch) * ax;
                let bot = tap(y0 + 1, x0, ch) * (1.0 - ax) + tap(y0 + 1, x0 + 1, ch) * ax;
                dst[(y * fw + x) * c + ch] = top * (1.0 - ay) + bot * ay;
            }
        }
    }
    Ok(out)
}

/// Axis-aligned hull of the transformed corners, clipped to the frame;
/// `None` once nothing is left inside.
pub fn transform_box(b: &BBox, h: &Homography, width: f64, height: f64) -> Option<BBox> {
    let corners = [(b.x1, b.y1), (b.x2, b.y1), (b.x1, b.y2), (b.x2, b.y2)];
    let mut hull = BBox::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (x, y) in corners {
        let (tx, ty) = h.apply(x, y)?;
        hull = BBox::new(hull.x1.min(tx), hull.y1.min(ty), hull.x2.max(tx), hull.y2.max(ty));
    }
    hull.clip(0.0, 0.0, width, height)
}

/// Apply one transform, drawn from `seed`, to every frame and box of a clip.
pub fn augment_clip(clip: &[Sample], params: &AugmentParams, seed: u64) -> Result<Vec<Sample>> {
    params.validate()?;
    if params.is_identity() || clip.is_empty() {
        return Ok(clip.to_vec());
    }
    let (fh, fw, _) = clip[0].image.hwc()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = sample_homography(params, fw, fh, &mut rng);
    clip.iter()
        .map(|s| {
            let (sh, sw, _) = s.image.hwc()?;
            if (sh, sw) != (fh, fw) {
                return Err(invalid("augment_clip: frames of one clip must share a resolution"));
            }
            let boxes = s
                .boxes
                .iter()
                .filter_map(|b| {
                    transform_box(&b.bbox, &h, fw as f64, fh as f64).map(|bbox| LabeledBox { bbox, class: b.class })
                })
                .collect();
            Ok(Sample {
                image: warp_frame(&s.image, &h)?,
                boxes,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip() -> Vec<Sample> {
        let image = Tensor::from_fn(&[16, 20, 1], |i| (i % 7) as f32 / 7.0);
        let boxes = vec![LabeledBox {
            bbox: BBox::new(3.25, 4.5, 9.75, 11.0),
            class: Some(1),
        }];
        vec![Sample { image, boxes }; 3]
    }

    #[test]
    fn zero_params_is_identity() {
        let c = clip();
        assert_eq!(augment_clip(&c, &AugmentParams::NONE, 9).unwrap(), c);
        let h = sample_homography(&AugmentParams::NONE, 20, 16, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(h, Homography::IDENTITY);
        let b = c[0].boxes[0].bbox;
        let t = transform_box(&b, &h, 20.0, 16.0).unwrap();
        assert!((t.x1 - b.x1).abs() <= 1e-9 && (t.y2 - b.y2).abs() <= 1e-9);
        assert_eq!(warp_frame(&c[0].image, &h).unwrap(), c[0].image);
    }

    #[test]
    fn same_transform_on_every_frame_and_deterministic() {
        let c = clip();
        let p = AugmentParams([10.0, 0.3, 1e-3]);
        let a = augment_clip(&c, &p, 5).unwrap();
        let b = augment_clip(&c, &p, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0] == w[1]));
        assert_ne!(a[0].image, c[0].image);
    }

    #[test]
    fn inverse_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = sample_homography(&AugmentParams([30.0, 0.5, 5e-3]), 64, 48, &mut rng);
        let (x, y) = h.inverse().unwrap().apply(17.0, 9.0).unwrap();
        let (bx, by) = h.apply(x, y).unwrap();
        assert!((bx - 17.0).abs() < 1e-9 && (by - 9.0).abs() < 1e-9);
    }

    #[test]
    fn box_pushed_out_is_dropped() {
        let shift = Homography([[1.0, 0.0, 100.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        assert!(transform_box(&BBox::new(1.0, 1.0, 5.0, 5.0), &shift, 20.0, 20.0).is_none());
    }

    #[test]
    fn out_of_range_params_rejected() {
        assert!(AugmentParams([50.0, 0.0, 0.0]).validate().is_err());
        assert!(AugmentParams([0.0, 1.0, 0.0]).validate().is_err());
        assert!(AugmentParams([0.0, 0.0, 0.1]).validate().is_err());
        assert!(AugmentParams::default().validate().is_ok());
    }
}
