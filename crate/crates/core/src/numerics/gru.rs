//! Convolutional gated recurrent unit.
//!
//! ```text
//! z  = sigmoid(conv([h, x], Wz) + bz)
//! r  = sigmoid(conv([h, x], Wr) + br)
//! h~ = tanh(conv([r * h, x], Wh) + bh)
//! h' = (1 - z) * h + z * h~
//! ```

use super::activation::sigmoid;
use super::conv::{conv2d, conv2d_backward};
use super::tensor::{Real, Tensor};
use crate::error::{invalid, Error, Result};

/// Gate kernels `[hidden, k, k, hidden + input]` and biases `[hidden]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams<T> {
    pub wz: Tensor<T>,
    pub bz: Tensor<T>,
    pub wr: Tensor<T>,
    pub br: Tensor<T>,
    pub wh: Tensor<T>,
    pub bh: Tensor<T>,
}

impl<T: Real> GruParams<T> {
    pub fn hidden(&self) -> usize {
        self.wz.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.wz.shape()[1]
    }

    fn check(&self, hidden: &Tensor<T>, input: &Tensor<T>) -> Result<()> {
        let (h, w, m) = hidden.hwc()?;
        let (ih, iw, x) = input.hwc()?;
        if (h, w) != (ih, iw) {
            return Err(Error::Shape {
                op: "gru_cell (spatial alignment)",
                lhs: hidden.shape().to_vec(),
                rhs: input.shape().to_vec(),
            });
        }
        let k = self.kernel();
        let expect = [m, k, k, m + x];
        for (name, wt) in [("wz", &self.wz), ("wr", &self.wr), ("wh", &self.wh)] {
            if wt.shape() != expect {
                return Err(invalid(format!(
                    "gru_cell: kernel {name} has shape {:?}, expected {expect:?} for hidden {:?} and input {:?}",
                    wt.shape(),
                    hidden.shape(),
                    input.shape()
                )));
            }
        }
        for b in [&self.bz, &self.br, &self.bh] {
            if b.shape() != [m] {
                return Err(invalid(format!("gru_cell: bias shape {:?}, expected [{m}]", b.shape())));
            }
        }
        Ok(())
    }
}

/// Forward intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct GruCache<T> {
    hidden: Tensor<T>,
    hx: Tensor<T>,
    rhx: Tensor<T>,
    z: Tensor<T>,
    r: Tensor<T>,
    cand: Tensor<T>,
}

pub fn gru_cell<T: Real>(
    hidden: &Tensor<T>,
    input: &Tensor<T>,
    p: &GruParams<T>,
) -> Result<Tensor<T>> {
    Ok(gru_cell_cached(hidden, input, p)?.0)
}

pub fn gru_cell_cached<T: Real>(
    hidden: &Tensor<T>,
    input: &Tensor<T>,
    p: &GruParams<T>,
) -> Result<(Tensor<T>, GruCache<T>)> {
    p.check(hidden, input)?;
    let pad = p.kernel() / 2;
    let hx = Tensor::concat_channels(&[hidden, input])?;
    let z = conv2d(&hx, &p.wz, Some(&p.bz), 1, pad)?.map(sigmoid);
    let r = conv2d(&hx, &p.wr, Some(&p.br), 1, pad)?.map(sigmoid);
    let rh = r.zip_map(hidden, |a, b| a * b)?;
    let rhx = Tensor::concat_channels(&[&rh, input])?;
    let cand = conv2d(&rhx, &p.wh, Some(&p.bh), 1, pad)?.map(|v| v.tanh());
    let one = T::one();
    let mut out = hidden.clone();
    for ((o, &zv), &cv) in out.data_mut().iter_mut().zip(z.data()).zip(cand.data()) {
        *o = (one - zv) * *o + zv * cv;
    }
    Ok((
        out,
        GruCache {
            hidden: hidden.clone(),
            hx,
            rhx,
            z,
            r,
            cand,
        },
    ))
}

/// Gradients of [`gru_cell`]: hidden, input and parameter gradients.
#[derive(Debug, Clone)]
pub struct GruGrads<T> {
    pub hidden: Tensor<T>,
    pub input: Tensor<T>,
    pub params: GruParams<T>,
}

pub fn gru_cell_backward<T: Real>(
    cache: &GruCache<T>,
    p: &GruParams<T>,
    grad_out: &Tensor<T>,
) -> Result<GruGrads<T>> {
    cache.hidden.same_shape("gru_cell_backward", grad_out)?;
    let pad = p.kernel() / 2;
    let m = p.hidden();
    let one = T::one();
    let h = &cache.hidden;

    // h' = (1 - z) h + z q
    let mut dh = grad_out.zip_map(&cache.z, |g, z| g * (one - z))?;
    let mut dz_pre = grad_out.clone();
    for (((d, &z), &q), &hv) in dz_pre
        .data_mut()
        .iter_mut()
        .zip(cache.z.data())
        .zip(cache.cand.data())
        .zip(h.data())
    {
        *d = *d * (q - hv) * z * (one - z);
    }
    let mut dq_pre = grad_out.clone();
    for ((d, &z), &q) in dq_pre.data_mut().iter_mut().zip(cache.z.data()).zip(cache.cand.data()) {
        *d = *d * z * (one - q * q);
    }

    let gh = conv2d_backward(&cache.rhx, &p.wh, &dq_pre, 1, pad)?;
    let (d_rh, mut dx) = gh.input.split_channels(m)?;
    let d_rh = d_rh.expect("hidden has channels");
    let mut dr_pre = d_rh.zip_map(h, |g, hv| g * hv)?;
    for (d, &r) in dr_pre.data_mut().iter_mut().zip(cache.r.data()) {
        *d = *d * r * (one - r);
    }
    for ((d, &g), &r) in dh.data_mut().iter_mut().zip(d_rh.data()).zip(cache.r.data()) {
        *d += g * r;
    }

    let gz = conv2d_backward(&cache.hx, &p.wz, &dz_pre, 1, pad)?;
    let gr = conv2d_backward(&cache.hx, &p.wr, &dr_pre, 1, pad)?;
    for g in [&gz.input, &gr.input] {
        let (a, b) = g.split_channels(m)?;
        dh.add_assign(&a.expect("hidden has channels"))?;
        if let (Some(dx), Some(b)) = (dx.as_mut(), b) {
            dx.add_assign(&b)?;
        }
    }
    let (_, _, xc) = cache.hx.hwc()?;
    let input = match dx {
        Some(dx) => dx,
        None => return Err(invalid(format!("gru_cell_backward: input has {} channels", xc - m))),
    };
    Ok(GruGrads {
        hidden: dh,
        input,
        params: GruParams {
            wz: gz.weight,
            bz: gz.bias,
            wr: gr.weight,
            br: gr.bias,
            wh: gh.weight,
            bh: gh.bias,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(rng: &mut ChaCha8Rng, m: usize, x: usize, k: usize) -> GruParams<f64> {
        GruParams {
            wz: Tensor::randn(&[m, k, k, m + x], 0.3, rng),
            bz: Tensor::randn(&[m], 0.3, rng),
            wr: Tensor::randn(&[m, k, k, m + x], 0.3, rng),
            br: Tensor::randn(&[m], 0.3, rng),
            wh: Tensor::randn(&[m, k, k, m + x], 0.3, rng),
            bh: Tensor::randn(&[m], 0.3, rng),
        }
    }

    #[test]
    fn closed_update_gate_keeps_hidden() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = params(&mut rng, 3, 2, 3);
        p.wz = Tensor::zeros(p.wz.shape());
        p.bz = Tensor::full(&[3], -1e3);
        let h = Tensor::randn(&[4, 4, 3], 1.0, &mut rng);
        let x = Tensor::randn(&[4, 4, 2], 1.0, &mut rng);
        assert_eq!(gru_cell(&h, &x, &p).unwrap(), h);
    }

    #[test]
    fn open_gate_zero_candidate_zeroes_hidden() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut p = params(&mut rng, 3, 2, 1);
        p.wz = Tensor::zeros(p.wz.shape());
        p.bz = Tensor::full(&[3], 1e3);
        p.wh = Tensor::zeros(p.wh.shape());
        p.bh = Tensor::zeros(&[3]);
        let h = Tensor::randn(&[3, 2, 3], 1.0, &mut rng);
        let x = Tensor::randn(&[3, 2, 2], 1.0, &mut rng);
        assert!(gru_cell(&h, &x, &p).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pointwise_kernel_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (m, xc) = (2, 3);
        let p = params(&mut rng, m, xc, 1);
        let h = Tensor::randn(&[3, 3, m], 0.5, &mut rng);
        let x = Tensor::randn(&[3, 3, xc], 0.5, &mut rng);
        let out = gru_cell(&h, &x, &p).unwrap();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        for py in 0..3 {
            for px in 0..3 {
                let hv = h.pixel(py, px);
                let xv = x.pixel(py, px);
                let hx: Vec<f64> = hv.iter().chain(xv).copied().collect();
                let gate = |w: &Tensor<f64>, b: &Tensor<f64>, inp: &[f64], o: usize| {
                    let row = &w.data()[o * (m + xc)..(o + 1) * (m + xc)];
                    b.data()[o] + row.iter().zip(inp).map(|(a, b)| a * b).sum::<f64>()
                };
                let z: Vec<f64> = (0..m).map(|o| sig(gate(&p.wz, &p.bz, &hx, o))).collect();
                let r: Vec<f64> = (0..m).map(|o| sig(gate(&p.wr, &p.br, &hx, o))).collect();
                let rhx: Vec<f64> = (0..m).map(|o| r[o] * hv[o]).chain(xv.iter().copied()).collect();
                for o in 0..m {
                    let q = gate(&p.wh, &p.bh, &rhx, o).tanh();
                    let want = (1.0 - z[o]) * hv[o] + z[o] * q;
                    assert!((out.at3(py, px, o) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn output_is_bounded_by_hidden_and_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..20 {
            let p = params(&mut rng, 3, 2, 3);
            let h = Tensor::randn(&[4, 3, 3], 2.0, &mut rng);
            let x = Tensor::randn(&[4, 3, 2], 2.0, &mut rng);
            let out = gru_cell(&h, &x, &p).unwrap();
            for (&o, &hv) in out.data().iter().zip(h.data()) {
                assert!(o >= hv.min(-1.0) - 1e-12 && o <= hv.max(1.0) + 1e-12);
            }
        }
    }

    #[test]
    fn mismatched_kernel_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let p = params(&mut rng, 3, 2, 3);
        let h = Tensor::randn(&[4, 4, 3], 1.0, &mut rng);
        let x = Tensor::randn(&[4, 4, 5], 1.0, &mut rng);
        assert!(gru_cell(&h, &x, &p).is_err());
        let x = Tensor::randn(&[4, 3, 2], 1.0, &mut rng);
        assert!(gru_cell(&h, &x, &p).is_err());
    }
}
