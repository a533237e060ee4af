use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::spec::{LayerSpec, ParamKind};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const GDN_BETA_MIN: f64 = 1e-6;
pub const PRELU_INIT: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct Param<T = f32> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub velocity: Option<Tensor<T>>,
    pub trainable: bool,
}

impl<T: Real> Param<T> {
    pub fn new(value: Tensor<T>, trainable: bool) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Self {
            value,
            grad,
            velocity: None,
            trainable,
        }
    }
}

/// Named parameter tensors with their gradient slots.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T = f32> {
    params: IndexMap<String, Param<T>>,
    pub mode: Mode,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
            mode: Mode::Train,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) {
        self.params.insert(name.into(), Param::new(value, trainable));
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.params.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(name)?.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(T::zero());
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .filter(|p| p.trainable)
            .flat_map(|p| p.grad.data().iter())
            .map(|g| {
                let g = g.to_f64().unwrap_or(0.0);
                g * g
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Copies out the parameters whose names satisfy `keep`.
    pub fn subset(&self, keep: impl Fn(&str) -> bool) -> Self {
        Self {
            params: self
                .params
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            mode: self.mode,
        }
    }

    /// Moves every parameter of `other` into `self`, replacing duplicates.
    pub fn merge(&mut self, other: ParamStore<T>) {
        for (k, v) in other.params {
            self.params.insert(k, v);
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    let mut q = Param::new(p.value.cast(), p.trainable);
                    q.grad = p.grad.cast();
                    (k.clone(), q)
                })
                .collect(),
            mode: self.mode,
        }
    }

    /// Allocates and initializes every parameter of `spec` under `name`.
    ///
    /// Conv, transposed-conv and dense weights are He-uniform over fan-in;
    /// biases are zero; BatchNorm starts as the identity with unit running
    /// variance; PReLU slopes start at 0.25; GDN starts near `β = 1,
    /// γ = 0.1·I`.
    pub fn init_layer(&mut self, name: &str, spec: &LayerSpec, rng: &mut ChaCha8Rng) {
        for decl in spec.params() {
            let key = format!("{name}.{}", decl.suffix);
            let shape = decl.shape.clone();
            let value = match (spec, decl.suffix) {
                (LayerSpec::Conv2d { in_ch, kernel, .. }, "weight") => {
                    he_uniform(shape, in_ch * kernel * kernel, rng)
                }
                (
                    LayerSpec::TransConv2d {
                        in_ch, kernel, stride, ..
                    },
                    "weight",
                ) => {
                    let per_axis = kernel.div_ceil(*stride);
                    he_uniform(shape, (in_ch * per_axis * per_axis).max(1), rng)
                }
                (LayerSpec::Dense { inp, .. }, "weight") => he_uniform(shape, *inp, rng),
                (LayerSpec::BatchNorm { .. }, "weight") | (LayerSpec::BatchNorm { .. }, "running_var") => {
                    Tensor::full(shape, T::one())
                }
                (LayerSpec::PReLU { .. }, "weight") => Tensor::full(shape, T::lit(PRELU_INIT)),
                (LayerSpec::Gdn { .. } | LayerSpec::Igdn { .. }, "beta") => {
                    Tensor::full(shape, T::lit((1.0 - GDN_BETA_MIN).sqrt()))
                }
                (LayerSpec::Gdn { ch } | LayerSpec::Igdn { ch }, "gamma") => {
                    let ch = *ch;
                    Tensor::from_fn(shape, |i| {
                        if i / ch == i % ch {
                            T::lit(0.1f64.sqrt())
                        } else {
                            T::lit(1e-2)
                        }
                    })
                }
                _ => Tensor::zeros(shape),
            };
            self.insert(key, value, decl.kind != ParamKind::Buffer);
        }
    }
}

fn he_uniform<T: Real>(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn init_covers_declared_params() {
        let mut store = ParamStore::<f32>::new();
        let mut r = rng::stream(1, &[rng::INIT]);
        store.init_layer("bn", &LayerSpec::BatchNorm { ch: 4 }, &mut r);
        store.init_layer("fc", &LayerSpec::dense(3, 2, true), &mut r);
        assert_eq!(store.len(), 6);
        assert_eq!(store.trainable_count(), 8 + 6 + 2);
        assert!(!store.get("bn.running_mean").unwrap().trainable);
        assert_eq!(store.value("bn.running_var").unwrap().data(), &[1.0; 4]);
        let w = store.value("fc.weight").unwrap();
        let bound = (6.0f32 / 3.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn gradient_slots_match_shapes() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng::stream(1, &[rng::INIT]);
        store.init_layer("c", &LayerSpec::conv(2, 3, 3, 1, 1, true), &mut r);
        for (_, p) in store.iter() {
            assert_eq!(p.grad.shape(), p.value.shape());
        }
    }
}
