//! All-pairs correlation volumes between the current frame's feature
//! pyramid and the previous frame's feature pyramid.
//!
//! For a level pair `(l, k)` the volume holds, for every pixel `(i, j)` of
//! the current level `l` and every pixel `(p, q)` of the previous level `k`,
//! the channel dot product of the two feature vectors. Its extents are
//! `H/2^l x W/2^l x H/2^k x W/2^k`. Volumes are built directly between
//! levels rather than by pooling a single full-resolution volume.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, path_err, Error, Result};
use crate::numerics::tensor::{axpy, dot_accurate, Real, Tensor};

/// Feature maps `g^(0..=m)`; level `l` has stride `2^l` relative to level 0.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid<T> {
    levels: Vec<Tensor<T>>,
}

impl<T: Real> FeaturePyramid<T> {
    pub fn new(levels: Vec<Tensor<T>>) -> Result<Self> {
        if levels.is_empty() {
            return Err(invalid("feature pyramid needs at least one level"));
        }
        for (l, pair) in levels.windows(2).enumerate() {
            let (h0, w0, _) = pair[0].hwc()?;
            let (h1, w1, _) = pair[1].hwc()?;
            if (h1, w1) != (h0 / 2, w0 / 2) {
                return Err(invalid(format!(
                    "feature pyramid level {} is {h1}x{w1}, expected {}x{} (half of level {l})",
                    l + 1,
                    h0 / 2,
                    w0 / 2
                )));
            }
        }
        levels[levels.len() - 1].hwc()?;
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[Tensor<T>] {
        &self.levels
    }

    pub fn level(&self, l: usize) -> &Tensor<T> {
        &self.levels[l]
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn into_levels(self) -> Vec<Tensor<T>> {
        self.levels
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.levels.iter().map(|t| t.shape().to_vec()).collect()
    }

    pub fn cast<U: Real>(&self) -> FeaturePyramid<U> {
        FeaturePyramid {
            levels: self.levels.iter().map(|t| t.cast()).collect(),
        }
    }
}

/// Correlations between level `l` of the current frame and level `k` of the
/// previous one, stored row-major over `(i, j, p, q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationVolume<T> {
    level_pair: (usize, usize),
    extents: [usize; 4],
    values: Vec<T>,
}

impl<T: Real> CorrelationVolume<T> {
    pub fn zeros(level_pair: (usize, usize), extents: [usize; 4]) -> Self {
        Self {
            level_pair,
            extents,
            values: vec![T::zero(); extents.iter().product()],
        }
    }

    pub fn level_pair(&self) -> (usize, usize) {
        self.level_pair
    }

    pub fn extents(&self) -> [usize; 4] {
        self.extents
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, p: usize, q: usize) -> T {
        let [_, w, hk, wk] = self.extents;
        self.values[((i * w + j) * hk + p) * wk + q]
    }

    /// The `(p, q)` plane for current-frame pixel `(i, j)`.
    #[inline]
    pub fn plane(&self, i: usize, j: usize) -> &[T] {
        let [_, w, hk, wk] = self.extents;
        let n = hk * wk;
        let o = (i * w + j) * n;
        &self.values[o..o + n]
    }

    #[inline]
    pub fn plane_mut(&mut self, i: usize, j: usize) -> &mut [T] {
        let [_, w, hk, wk] = self.extents;
        let n = hk * wk;
        let o = (i * w + j) * n;
        &mut self.values[o..o + n]
    }

    /// Write the debug dump: four little-endian `u32` extents followed by
    /// the values as little-endian `f64`.
    pub fn dump(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + 8 * self.values.len());
        for e in self.extents {
            let e = u32::try_from(e).map_err(|_| invalid("volume extent exceeds u32"))?;
            buf.extend_from_slice(&e.to_le_bytes());
        }
        for v in &self.values {
            buf.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| path_err(path, e))?;
        f.write_all(&buf).map_err(|e| path_err(path, e))?;
        Ok(())
    }

    pub fn read_dump(path: &Path, level_pair: (usize, usize)) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| path_err(path, e))?;
        if bytes.len() < 16 {
            return Err(Error::Format("volume dump shorter than its header".into()));
        }
        let mut extents = [0usize; 4];
        for (i, e) in extents.iter_mut().enumerate() {
            *e = u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
        }
        let n: usize = extents.iter().product();
        if bytes.len() != 16 + 8 * n {
            return Err(Error::Format(format!(
                "volume dump has {} value bytes, extents {extents:?} need {}",
                bytes.len() - 16,
                8 * n
            )));
        }
        let values = bytes[16..]
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        Ok(Self {
            level_pair,
            extents,
            values,
        })
    }
}

/// Which `(l, k)` pairs the pyramid holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PairSet {
    /// Every `(l, k)` in `{0..=m}^2`.
    #[default]
    All,
    /// Only pairs with `k >= l` (previous level no finer than the current).
    CoarserOrEqual,
}

impl PairSet {
    pub fn contains(self, l: usize, k: usize) -> bool {
        match self {
            PairSet::All => true,
            PairSet::CoarserOrEqual => k >= l,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrelationConfig {
    /// Divide every correlation by `sqrt(channels)`.
    pub scale: bool,
    pub pairs: PairSet,
    /// Upper bound on the total number of volume elements across the pyramid.
    pub max_elements: usize,
}

impl Default for CorrelationConfig {
    fn default() -> Self {
        Self {
            scale: true,
            pairs: PairSet::All,
            max_elements: 1 << 26,
        }
    }
}

/// Every configured level-pair volume built from one pair of frames.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationPyramid<T> {
    num_levels: usize,
    volumes: Vec<Option<CorrelationVolume<T>>>,
}

impl<T: Real> CorrelationPyramid<T> {
    pub fn num_levels(&self) -> usize {
        self.num_levels
    }

    /// `m`, the index of the coarsest level.
    pub fn m(&self) -> usize {
        self.num_levels - 1
    }

    pub fn get(&self, l: usize, k: usize) -> Option<&CorrelationVolume<T>> {
        self.volumes.get(l * self.num_levels + k).and_then(|v| v.as_ref())
    }

    pub fn len(&self) -> usize {
        self.volumes.iter().flatten().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn volumes(&self) -> impl Iterator<Item = &CorrelationVolume<T>> {
        self.volumes.iter().flatten()
    }

    pub fn total_elements(&self) -> usize {
        self.volumes().map(|v| v.values.len()).sum()
    }

    /// Zero-filled volumes with the same layout, used as gradient buffers.
    pub fn zeros_like(&self) -> Self {
        Self {
            num_levels: self.num_levels,
            volumes: self
                .volumes
                .iter()
                .map(|v| v.as_ref().map(|v| CorrelationVolume::zeros(v.level_pair, v.extents)))
                .collect(),
        }
    }

    pub fn get_mut(&mut self, l: usize, k: usize) -> Option<&mut CorrelationVolume<T>> {
        let n = self.num_levels;
        self.volumes.get_mut(l * n + k).and_then(|v| v.as_mut())
    }
}

fn scale_factor<T: Real>(channels: usize, scale: bool) -> T {
    if scale {
        T::one() / T::lit(channels as f64).sqrt()
    } else {
        T::one()
    }
}

/// Correlate one current-frame level against one previous-frame level.
pub fn correlate_pair<T: Real>(
    current: &Tensor<T>,
    previous: &Tensor<T>,
    scale: bool,
) -> Result<CorrelationVolume<T>> {
    let (h, w, c) = current.hwc()?;
    let (hk, wk, ck) = previous.hwc()?;
    if c != ck {
        return Err(Error::Shape {
            op: "correlate_pair (channel counts)",
            lhs: current.shape().to_vec(),
            rhs: previous.shape().to_vec(),
        });
    }
    let s: T = scale_factor(c, scale);
    let mut vol = CorrelationVolume::zeros((0, 0), [h, w, hk, wk]);
    let prev = previous.data();
    for i in 0..h {
        for j in 0..w {
            let a = current.pixel(i, j);
            let plane = vol.plane_mut(i, j);
            for (pq, out) in plane.iter_mut().enumerate() {
                *out = dot_accurate(a, &prev[pq * c..(pq + 1) * c]) * s;
            }
        }
    }
    if !vol.values.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("correlation volume".into()));
    }
    Ok(vol)
}

/// Gradients of [`correlate_pair`] with respect to both inputs.
pub fn correlate_pair_backward<T: Real>(
    current: &Tensor<T>,
    previous: &Tensor<T>,
    grad: &CorrelationVolume<T>,
    scale: bool,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (h, w, c) = current.hwc()?;
    let (hk, wk, _) = previous.hwc()?;
    if grad.extents != [h, w, hk, wk] {
        return Err(Error::Shape {
            op: "correlate_pair_backward",
            lhs: vec![h, w, hk, wk],
            rhs: grad.extents.to_vec(),
        });
    }
    let s: T = scale_factor(c, scale);
    let mut ga = Tensor::zeros(current.shape());
    let mut gb = Tensor::zeros(previous.shape());
    let prev = previous.data();
    for i in 0..h {
        for j in 0..w {
            let a = current.pixel(i, j).to_vec();
            let plane = grad.plane(i, j);
            let gap = ga.pixel_mut(i, j);
            let gbd = gb.data_mut();
            for (pq, &g) in plane.iter().enumerate() {
                if g == T::zero() {
                    continue;
                }
                let gs = g * s;
                axpy(gs, &prev[pq * c..(pq + 1) * c], gap);
                axpy(gs, &a, &mut gbd[pq * c..(pq + 1) * c]);
            }
        }
    }
    Ok((ga, gb))
}

/// Build every configured `(l, k)` volume between `current` and `previous`.
pub fn build_pyramid<T: Real>(
    current: &FeaturePyramid<T>,
    previous: &FeaturePyramid<T>,
    cfg: &CorrelationConfig,
) -> Result<CorrelationPyramid<T>> {
    let n = current.num_levels();
    if previous.num_levels() != n {
        return Err(invalid(format!(
            "build_pyramid: level count mismatch ({} current vs {} previous)",
            n,
            previous.num_levels()
        )));
    }
    let mut total = 0usize;
    let mut pairs = Vec::new();
    for l in 0..n {
        for k in 0..n {
            if !cfg.pairs.contains(l, k) {
                continue;
            }
            let (h, w, _) = current.level(l).hwc()?;
            let (hk, wk, _) = previous.level(k).hwc()?;
            total = total.saturating_add(h * w * hk * wk);
            pairs.push((l, k));
        }
    }
    if total > cfg.max_elements {
        return Err(invalid(format!(
            "correlation pyramid needs {total} elements, budget is {}",
            cfg.max_elements
        )));
    }
    let built: Vec<_> = pairs
        .par_iter()
        .map(|&(l, k)| {
            correlate_pair(current.level(l), previous.level(k), cfg.scale).map(|mut v| {
                v.level_pair = (l, k);
                v
            })
        })
        .collect::<Result<_>>()?;
    let mut volumes: Vec<Option<CorrelationVolume<T>>> = (0..n * n).map(|_| None).collect();
    for v in built {
        let (l, k) = v.level_pair;
        volumes[l * n + k] = Some(v);
    }
    Ok(CorrelationPyramid {
        num_levels: n,
        volumes,
    })
}

/// Backpropagate volume gradients to both feature pyramids.
pub fn build_pyramid_backward<T: Real>(
    current: &FeaturePyramid<T>,
    previous: &FeaturePyramid<T>,
    grads: &CorrelationPyramid<T>,
    cfg: &CorrelationConfig,
) -> Result<(Vec<Tensor<T>>, Vec<Tensor<T>>)> {
    let n = current.num_levels();
    let mut gcur: Vec<Tensor<T>> = current.levels().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut gprev: Vec<Tensor<T>> = previous.levels().iter().map(|t| Tensor::zeros(t.shape())).collect();
    for l in 0..n {
        for k in 0..n {
            let Some(g) = grads.get(l, k) else { continue };
            let (ga, gb) = correlate_pair_backward(current.level(l), previous.level(k), g, cfg.scale)?;
            gcur[l].add_assign(&ga)?;
            gprev[k].add_assign(&gb)?;
        }
    }
    Ok((gcur, gprev))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unit_dot_product() {
        let mut a = Tensor::<f64>::zeros(&[2, 2, 2]);
        a.pixel_mut(0, 0)[0] = 1.0;
        let mut b = Tensor::<f64>::zeros(&[2, 2, 2]);
        b.pixel_mut(1, 1)[0] = 1.0;
        let v = correlate_pair(&a, &b, false).unwrap();
        assert_eq!(v.get(0, 0, 1, 1), 1.0);
        assert_eq!(v.get(0, 0, 0, 0), 0.0);
    }

    #[test]
    fn zero_input_gives_zero_volume() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::<f64>::randn(&[3, 3, 4], 1.0, &mut rng);
        let z = Tensor::<f64>::zeros(&[2, 2, 4]);
        assert!(correlate_pair(&a, &z, true).unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch_rejected() {
        let a = Tensor::<f64>::zeros(&[2, 2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 2, 4]);
        assert!(correlate_pair(&a, &b, true).is_err());
    }

    fn pyramid(rng: &mut ChaCha8Rng, size: usize, c: usize, levels: usize) -> FeaturePyramid<f64> {
        FeaturePyramid::new(
            (0..levels)
                .map(|l| Tensor::randn(&[size >> l, size >> l, c], 1.0, rng))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn cardinality_and_extents() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = pyramid(&mut rng, 8, 3, 3);
        let b = pyramid(&mut rng, 8, 3, 3);
        let p = build_pyramid(&a, &b, &CorrelationConfig::default()).unwrap();
        assert_eq!(p.len(), 9);
        assert_eq!(p.get(0, 2).unwrap().extents(), [8, 8, 2, 2]);
        assert_eq!(p.get(2, 0).unwrap().extents(), [2, 2, 8, 8]);
        for l in 0..3 {
            for k in 0..2 {
                let e0 = p.get(l, k).unwrap().extents();
                let e1 = p.get(l, k + 1).unwrap().extents();
                assert_eq!([e1[2], e1[3]], [e0[2] / 2, e0[3] / 2]);
            }
        }
        let cfg = CorrelationConfig {
            pairs: PairSet::CoarserOrEqual,
            ..Default::default()
        };
        assert_eq!(build_pyramid(&a, &b, &cfg).unwrap().len(), 6);
    }

    #[test]
    fn memory_budget_enforced() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = pyramid(&mut rng, 8, 2, 2);
        let cfg = CorrelationConfig {
            max_elements: 100,
            ..Default::default()
        };
        assert!(build_pyramid(&a, &a, &cfg).is_err());
    }

    #[test]
    fn level_count_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = pyramid(&mut rng, 8, 2, 3);
        let b = pyramid(&mut rng, 8, 2, 2);
        assert!(build_pyramid(&a, &b, &CorrelationConfig::default()).is_err());
    }

    #[test]
    fn non_halving_pyramid_rejected() {
        let a = Tensor::<f64>::zeros(&[8, 8, 1]);
        let b = Tensor::<f64>::zeros(&[3, 4, 1]);
        assert!(FeaturePyramid::new(vec![a, b]).is_err());
    }

    #[test]
    fn dump_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::<f64>::randn(&[3, 2, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[2, 1, 4], 1.0, &mut rng);
        let v = correlate_pair(&a, &b, true).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.bin");
        v.dump(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 16 + 8 * 3 * 2 * 2);
        assert_eq!(u32::from_le_bytes(bytes[0..4].try_into().unwrap()), 3);
        assert_eq!(CorrelationVolume::<f64>::read_dump(&path, (0, 0)).unwrap(), v);
    }
}
