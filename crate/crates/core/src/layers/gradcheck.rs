//! Central finite-difference verification of analytic gradients.
//!
//! Checks run in `f64`. The scalar probe loss is `Σ w_i · y_i` with fixed
//! pseudo-random weights, so every output element contributes.

use rand::Rng;

use super::ops::{self, Cache};
use super::params::{Mode, ParamStore};
use super::spec::LayerSpec;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const MAX_CHECKED_PARAMS: usize = 10_000;
const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
const REL_FLOOR: f64 = 1e-4;

/// A scalar function of (parameters, input) with an analytic gradient.
pub trait Differentiable {
    fn loss(&self, params: &ParamStore<f64>, input: &Tensor<f64>) -> Result<f64>;

    /// Returns the loss and input gradient; parameter gradients are
    /// accumulated into `params`.
    fn loss_and_grad(&self, params: &mut ParamStore<f64>, input: &Tensor<f64>) -> Result<(f64, Tensor<f64>)>;

    /// Whether the function has kinks finite differences can straddle.
    fn has_kinks(&self) -> bool {
        false
    }
}

/// Deterministic probe weights for a scalar loss over `len` outputs.
pub fn probe_weights(len: usize) -> Vec<f64> {
    (0..len).map(|i| ((i as f64 + 1.0) * 0.7548776662).sin()).collect()
}

pub fn probe_loss(y: &Tensor<f64>) -> f64 {
    y.data().iter().zip(probe_weights(y.numel())).map(|(a, b)| a * b).sum()
}

pub fn probe_grad(y: &Tensor<f64>) -> Tensor<f64> {
    Tensor::new(y.shape().to_vec(), probe_weights(y.numel())).expect("same shape")
}

/// A plain sequence of named layers.
#[derive(Clone, Debug)]
pub struct LayerChain {
    pub layers: Vec<(String, LayerSpec)>,
    pub mode: Mode,
}

impl LayerChain {
    pub fn new(specs: impl IntoIterator<Item = LayerSpec>) -> Self {
        Self {
            layers: specs
                .into_iter()
                .enumerate()
                .map(|(i, s)| (format!("l{i}"), s))
                .collect(),
            mode: Mode::Train,
        }
    }

    pub fn init_params(&self, seed: u64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, &[rng::INIT]);
        for (name, spec) in &self.layers {
            store.init_layer(name, spec, &mut r);
        }
        store
    }

    pub fn forward(&self, params: &ParamStore<f64>, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let mut y = x.clone();
        for (name, spec) in &self.layers {
            y = ops::forward(name, spec, params, &y, self.mode, false)?.output;
        }
        Ok(y)
    }
}

impl Differentiable for LayerChain {
    fn loss(&self, params: &ParamStore<f64>, input: &Tensor<f64>) -> Result<f64> {
        Ok(probe_loss(&self.forward(params, input)?))
    }

    fn loss_and_grad(&self, params: &mut ParamStore<f64>, input: &Tensor<f64>) -> Result<(f64, Tensor<f64>)> {
        let mut caches: Vec<Cache<f64>> = Vec::with_capacity(self.layers.len());
        let mut y = input.clone();
        for (name, spec) in &self.layers {
            let f = ops::forward(name, spec, params, &y, self.mode, true)?;
            caches.push(f.cache);
            y = f.output;
        }
        let loss = probe_loss(&y);
        let mut g = probe_grad(&y);
        for ((name, spec), cache) in self.layers.iter().zip(&caches).rev() {
            g = ops::backward(name, spec, params, cache, &g)?;
        }
        Ok((loss, g))
    }

    fn has_kinks(&self) -> bool {
        self.layers.iter().any(|(_, s)| s.is_piecewise())
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub passed: bool,
    pub max_rel_error: f64,
    /// Where the largest discrepancy occurred, e.g. `param l0.weight[3]`.
    pub worst: String,
    pub checked: usize,
    pub retried: bool,
}

/// Compares analytic gradients of every trainable parameter and every input
/// element against central finite differences.
pub fn gradient_check<F: Differentiable + ?Sized>(
    f: &F,
    params: &ParamStore<f64>,
    input: &Tensor<f64>,
    tolerance: f64,
) -> Result<GradCheckReport> {
    if params.trainable_count() > MAX_CHECKED_PARAMS {
        return Err(Error::invalid(format!(
            "gradient check limited to {MAX_CHECKED_PARAMS} parameters, got {}",
            params.trainable_count()
        )));
    }
    let first = check_once(f, params, input, tolerance)?;
    if first.passed || !f.has_kinks() {
        return Ok(first);
    }
    let mut r = rng::stream(0x6b69_6e6b, &[]);
    let mut moved = input.clone();
    for v in moved.data_mut() {
        *v += 1e-3 * r.random_range(-1.0..1.0);
    }
    let mut second = check_once(f, params, &moved, tolerance)?;
    second.retried = true;
    Ok(second)
}

fn check_once<F: Differentiable + ?Sized>(
    f: &F,
    params: &ParamStore<f64>,
    input: &Tensor<f64>,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let mut analytic = params.clone();
    analytic.zero_grad();
    let (_, dx) = f.loss_and_grad(&mut analytic, input)?;

    let mut worst = (0.0f64, String::from("-"));
    let mut checked = 0usize;
    let mut note = |a: f64, n: f64, loc: String| {
        let err = (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR);
        if err > worst.0 || !err.is_finite() {
            worst = (err, loc);
        }
    };

    let names: Vec<String> = params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(k, _)| k.clone())
        .collect();
    let mut probe = params.clone();
    for name in &names {
        let len = probe.value(name)?.numel();
        for j in 0..len {
            let orig = probe.value(name)?.data()[j];
            probe.get_mut(name)?.value.data_mut()[j] = orig + STEP;
            let up = f.loss(&probe, input)?;
            probe.get_mut(name)?.value.data_mut()[j] = orig - STEP;
            let down = f.loss(&probe, input)?;
            probe.get_mut(name)?.value.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            note(analytic.get(name)?.grad.data()[j], numeric, format!("param {name}[{j}]"));
            checked += 1;
        }
    }

    let mut x = input.clone();
    for j in 0..x.numel() {
        let orig = x.data()[j];
        x.data_mut()[j] = orig + STEP;
        let up = f.loss(params, &x)?;
        x.data_mut()[j] = orig - STEP;
        let down = f.loss(params, &x)?;
        x.data_mut()[j] = orig;
        note(dx.data()[j], (up - down) / (2.0 * STEP), format!("input[{j}]"));
        checked += 1;
    }

    Ok(GradCheckReport {
        passed: worst.0 <= tolerance,
        max_rel_error: worst.0,
        worst: worst.1,
        checked,
        retried: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
        let mut r = rng::stream(seed, &[]);
        Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
    }

    fn check(chain: LayerChain, shape: Vec<usize>) -> GradCheckReport {
        let params = chain.init_params(11);
        gradient_check(&chain, &params, &input(shape, 5), 1e-4).unwrap()
    }

    #[test]
    fn every_variant_in_isolation() {
        let cases: Vec<(LayerSpec, Vec<usize>)> = vec![
            (LayerSpec::conv(2, 3, 3, 2, 1, true), vec![2, 2, 5, 5]),
            (LayerSpec::conv(3, 2, 1, 1, 0, false), vec![2, 3, 3, 3]),
            (
                LayerSpec::TransConv2d {
                    in_ch: 2,
                    out_ch: 3,
                    kernel: 2,
                    stride: 2,
                    bias: true,
                },
                vec![2, 2, 2, 3],
            ),
            (LayerSpec::BatchNorm { ch: 3 }, vec![4, 3, 2, 2]),
            (LayerSpec::BatchNorm { ch: 3 }, vec![5, 3]),
            (LayerSpec::ReLU, vec![2, 6]),
            (LayerSpec::PReLU { ch: 2 }, vec![2, 2, 3, 3]),
            (LayerSpec::Sigmoid, vec![3, 4]),
            (LayerSpec::GlobalAvgPool, vec![2, 3, 3, 2]),
            (LayerSpec::AvgPool { kernel: 2, stride: 2 }, vec![1, 2, 4, 4]),
            (LayerSpec::UpsampleNearest { factor: 2 }, vec![1, 2, 2, 3]),
            (LayerSpec::dense(4, 3, true), vec![3, 4]),
            (LayerSpec::Gdn { ch: 3 }, vec![2, 3, 2, 2]),
            (LayerSpec::Igdn { ch: 3 }, vec![2, 3, 2, 2]),
        ];
        for (spec, shape) in cases {
            let r = check(LayerChain::new([spec.clone()]), shape);
            assert!(r.passed, "{spec}: {r:?}");
        }
    }

    #[test]
    fn eval_mode_batchnorm() {
        let mut chain = LayerChain::new([LayerSpec::BatchNorm { ch: 2 }]);
        chain.mode = Mode::Eval;
        assert!(check(chain, vec![3, 2, 2, 2]).passed);
    }

    #[test]
    fn three_layer_composite() {
        let chain = LayerChain::new([
            LayerSpec::conv(2, 4, 3, 1, 1, false),
            LayerSpec::BatchNorm { ch: 4 },
            LayerSpec::ReLU,
        ]);
        let r = check(chain, vec![2, 2, 4, 4]);
        assert!(r.passed, "{r:?}");
    }

    struct Corrupted(LayerChain);

    impl Differentiable for Corrupted {
        fn loss(&self, p: &ParamStore<f64>, x: &Tensor<f64>) -> Result<f64> {
            self.0.loss(p, x)
        }
        fn loss_and_grad(&self, p: &mut ParamStore<f64>, x: &Tensor<f64>) -> Result<(f64, Tensor<f64>)> {
            let out = self.0.loss_and_grad(p, x)?;
            p.get_mut("l0.weight")?.grad.data_mut()[2] += 0.5;
            Ok(out)
        }
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let chain = LayerChain::new([LayerSpec::dense(3, 2, true)]);
        let params = chain.init_params(1);
        let r = gradient_check(&Corrupted(chain), &params, &input(vec![2, 3], 2), 1e-4).unwrap();
        assert!(!r.passed);
        assert_eq!(r.worst, "param l0.weight[2]");
    }

    #[test]
    fn oversized_graph_rejected() {
        let chain = LayerChain::new([LayerSpec::dense(200, 100, false)]);
        let params = chain.init_params(1);
        assert!(gradient_check(&chain, &params, &input(vec![1, 200], 2), 1e-4).is_err());
    }
}
