//! Named parameter storage, gradient buffers and the convolution layer used
//! by every trainable module.

use rand::Rng;

use super::conv::{conv2d, conv2d_backward};
use super::tensor::{Real, Tensor};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named tensors. Order is creation order, which is
/// also the checkpoint order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(invalid(format!("duplicate parameter name {name:?}")));
        }
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(self.tensors.len() - 1))
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }

    /// Replace the value of an existing parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .id_of(name)
            .ok_or_else(|| invalid(format!("unknown parameter {name:?}")))?;
        self.tensors[id.0].same_shape("ParamStore::set", &value)?;
        self.tensors[id.0] = value;
        Ok(())
    }
}

/// Gradient accumulators aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Grads<T> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        Self {
            slots: vec![None; store.len()],
        }
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor<T>) -> Result<()> {
        match &mut self.slots[id.0] {
            Some(t) => t.add_assign(g),
            slot @ None => {
                *slot = Some(g.clone());
                Ok(())
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.slots[id.0].as_ref()
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        for (i, g) in other.slots.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g)?;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for t in self.slots.iter_mut().flatten() {
            t.scale(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .flat_map(|t| t.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.slots.iter().flatten().all(|t| t.all_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// He-normal with the given gain: std = gain * sqrt(2 / fan_in).
    Kaiming(f64),
    Normal(f64),
    Zeros,
}

/// Convolution layer whose kernel and bias live in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let shape = [cout, kernel, kernel, cin];
        let w = match init {
            Init::Kaiming(gain) => {
                let fan_in = (kernel * kernel * cin) as f64;
                Tensor::randn(&shape, gain * (2.0 / fan_in).sqrt(), rng)
            }
            Init::Normal(std) => Tensor::randn(&shape, std, rng),
            Init::Zeros => Tensor::zeros(&shape),
        };
        let weight = store.add(format!("{name}.weight"), w)?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[cout]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn out_channels<T: Real>(&self, store: &ParamStore<T>) -> usize {
        store.get(self.weight).shape()[0]
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(
            x,
            store.get(self.weight),
            self.bias.map(|b| store.get(b)),
            self.stride,
            self.padding,
        )
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        grad_out: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let g = conv2d_backward(x, store.get(self.weight), grad_out, self.stride, self.padding)?;
        grads.accumulate(self.weight, &g.weight)?;
        if let Some(b) = self.bias {
            grads.accumulate(b, &g.bias)?;
        }
        Ok(g.input)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", Tensor::zeros(&[1])).unwrap();
        assert!(s.add("a", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn grads_accumulate() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", Tensor::zeros(&[2])).unwrap();
        let mut g = Grads::new(&s);
        g.accumulate(id, &Tensor::full(&[2], 1.5)).unwrap();
        g.accumulate(id, &Tensor::full(&[2], 0.5)).unwrap();
        assert_eq!(g.get(id).unwrap().data(), &[2.0, 2.0]);
        assert!((g.global_norm() - 8f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn conv_layer_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::<f32>::new();
        let l = ConvLayer::new(&mut s, "c", 3, 8, 3, 2, true, Init::Kaiming(1.0), &mut rng).unwrap();
        let y = l.forward(&s, &Tensor::zeros(&[16, 16, 3])).unwrap();
        assert_eq!(y.shape(), &[8, 8, 8]);
        assert_eq!(s.num_scalars(), 8 * 9 * 3 + 8);
    }
}
