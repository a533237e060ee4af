//! Learned compression of the split-point feature map into `B` complex
//! channel symbols, and its server-side reconstruction.
//!
//! The encoder is `Conv2×2/2 → AvgPool2×2/2 → GDN`, giving `C_enc × H/4 ×
//! W/4 = 2B` reals with `C_enc = 32B/(HW)`. The decoder mirrors it with
//! `TransConv2×2/2 → IGDN → Upsample×2 → Conv3×3 → BN → PReLU`.

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{self, LayerSpec, Mode, ParamStore, GDN_BETA_MIN};
use crate::model::{GraphRole, ModelGraph, NamedLayer, Node, SplitPlan};
use crate::tensor::{pairwise_sum_by, Real, Tensor};

pub const ENCODER_SCOPE: &str = "enc";
pub const DECODER_SCOPE: &str = "dec";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub split_channels: usize,
    pub split_spatial: (usize, usize),
    /// Complex symbols per image.
    pub symbols: usize,
    /// Average transmit power per symbol.
    pub power: f64,
}

impl CodecConfig {
    pub fn new(plan: &SplitPlan, symbols: usize, power: f64) -> Result<Self> {
        let cfg = Self {
            split_channels: plan.split_channels,
            split_spatial: plan.split_spatial,
            symbols,
            power,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.split_spatial;
        let mut errs = Vec::new();
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            errs.push(format!("split spatial size {h}×{w} must be a positive multiple of 4 on each side"));
        } else if self.symbols == 0 || (32 * self.symbols) % (h * w) != 0 {
            let shown: Vec<String> = admissible_symbols(self.split_spatial, 1024)
                .iter()
                .map(usize::to_string)
                .collect();
            errs.push(format!(
                "B = {} is not admissible for a {h}×{w} split: 32·B must be a positive multiple of {}; admissible B up to 1024: {{{}}}",
                self.symbols,
                h * w,
                shown.join(", ")
            ));
        }
        if !(self.power > 0.0) || !self.power.is_finite() {
            errs.push(format!("transmit power must be positive, got {}", self.power));
        }
        if self.split_channels == 0 {
            errs.push("split channels must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs))
        }
    }

    pub fn enc_channels(&self) -> usize {
        32 * self.symbols / (self.split_spatial.0 * self.split_spatial.1)
    }

    pub fn mid_channels(&self) -> usize {
        4 * self.enc_channels()
    }

    /// Per-sample shape of the encoder output and decoder input.
    pub fn latent_shape(&self) -> Vec<usize> {
        vec![self.enc_channels(), self.split_spatial.0 / 4, self.split_spatial.1 / 4]
    }
}

/// Every `B ≤ max` that yields an integral encoder width for this split.
pub fn admissible_symbols(split_spatial: (usize, usize), max: usize) -> Vec<usize> {
    let area = split_spatial.0 * split_spatial.1;
    if area == 0 {
        return Vec::new();
    }
    (1..=max).filter(|b| (32 * b) % area == 0).collect()
}

fn layer(name: &str, spec: LayerSpec) -> Node {
    Node::Layer(NamedLayer::new(name, spec))
}

pub fn build_encoder(cfg: &CodecConfig) -> Result<ModelGraph> {
    cfg.validate()?;
    let c = cfg.enc_channels();
    let (h, w) = cfg.split_spatial;
    Ok(ModelGraph::new(
        GraphRole::Encoder,
        vec![cfg.split_channels, h, w],
        vec![
            layer("enc.conv", LayerSpec::conv(cfg.split_channels, c, 2, 2, 0, true)),
            layer("enc.pool", LayerSpec::AvgPool { kernel: 2, stride: 2 }),
            layer("enc.gdn", LayerSpec::Gdn { ch: c }),
        ],
    ))
}

pub fn build_decoder(cfg: &CodecConfig) -> Result<ModelGraph> {
    cfg.validate()?;
    let (c, m) = (cfg.enc_channels(), cfg.mid_channels());
    Ok(ModelGraph::new(
        GraphRole::Decoder,
        cfg.latent_shape(),
        vec![
            layer(
                "dec.tconv",
                LayerSpec::TransConv2d {
                    in_ch: c,
                    out_ch: m,
                    kernel: 2,
                    stride: 2,
                    bias: true,
                },
            ),
            layer("dec.igdn", LayerSpec::Igdn { ch: m }),
            layer("dec.up", LayerSpec::UpsampleNearest { factor: 2 }),
            layer("dec.conv", LayerSpec::conv(m, cfg.split_channels, 3, 1, 1, false)),
            layer("dec.bn", LayerSpec::BatchNorm { ch: cfg.split_channels }),
            layer("dec.prelu", LayerSpec::PReLU { ch: cfg.split_channels }),
        ],
    ))
}

/// Effective GDN parameters `β_i ≥ β_min`, `γ_ij ≥ 0` (row-major `C×C`).
#[derive(Clone, Debug, PartialEq)]
pub struct GdnParams {
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl GdnParams {
    pub fn new(beta: Vec<f64>, gamma: Vec<f64>) -> Result<Self> {
        let c = beta.len();
        if c == 0 || gamma.len() != c * c {
            return Err(Error::shape("gdn params", &[c, c], &[gamma.len()]));
        }
        if beta.iter().any(|&b| !(b >= GDN_BETA_MIN)) || gamma.iter().any(|&g| !(g >= 0.0)) {
            return Err(Error::invalid(format!(
                "gdn requires beta >= {GDN_BETA_MIN} and gamma >= 0"
            )));
        }
        Ok(Self { beta, gamma })
    }

    pub fn channels(&self) -> usize {
        self.beta.len()
    }

    /// Stores the raw (square-root) parameterization under `name`.
    pub fn to_store<T: Real>(&self, name: &str) -> ParamStore<T> {
        let c = self.channels();
        let mut s = ParamStore::new();
        let beta = self.beta.iter().map(|&b| T::lit((b - GDN_BETA_MIN).max(0.0).sqrt())).collect();
        let gamma = self.gamma.iter().map(|&g| T::lit(g.sqrt())).collect();
        s.insert(format!("{name}.beta"), Tensor::new(vec![c], beta).expect("sized"), true);
        s.insert(format!("{name}.gamma"), Tensor::new(vec![c, c], gamma).expect("sized"), true);
        s
    }
}

fn divisive<T: Real>(x: &Tensor<T>, p: &GdnParams, spec: LayerSpec) -> Result<Tensor<T>> {
    let store = p.to_store::<T>("gdn");
    Ok(layers::forward("gdn", &spec, &store, x, Mode::Eval, false)?.output)
}

/// `y_i = x_i / √(β_i + Σ_j γ_ij x_j²)` at every location.
pub fn gdn<T: Real>(x: &Tensor<T>, p: &GdnParams) -> Result<Tensor<T>> {
    divisive(x, p, LayerSpec::Gdn { ch: p.channels() })
}

/// `x̂_i = ŷ_i · √(β_i + Σ_j γ_ij ŷ_j²)` at every location.
pub fn igdn<T: Real>(x: &Tensor<T>, p: &GdnParams) -> Result<Tensor<T>> {
    divisive(x, p, LayerSpec::Igdn { ch: p.channels() })
}

/// `B` complex channel symbols under an average power budget.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSymbolBlock<T = f32> {
    pub symbols: Vec<Complex<T>>,
    pub power: f64,
}

impl<T: Real> ComplexSymbolBlock<T> {
    pub fn new(symbols: Vec<Complex<T>>, power: f64) -> Self {
        Self { symbols, power }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// `(1/B) Σ |z_i|²`.
    pub fn mean_power(&self) -> f64 {
        let s = &self.symbols;
        let total = pairwise_sum_by(s.len(), 0, |i| s[i].norm_sqr().to_f64().unwrap_or(f64::NAN));
        total / s.len() as f64
    }
}

/// First half of `v` becomes the real parts, second half the imaginary parts.
pub fn pack<T: Real>(v: &[T]) -> Result<Vec<Complex<T>>> {
    if v.is_empty() || v.len() % 2 != 0 {
        return Err(Error::invalid(format!("symbol packing needs an even, nonzero length, got {}", v.len())));
    }
    let b = v.len() / 2;
    Ok((0..b).map(|i| Complex::new(v[i], v[b + i])).collect())
}

/// Exact inverse of [`pack`].
pub fn complex_to_reals<T: Real>(block: &ComplexSymbolBlock<T>) -> Vec<T> {
    unpack(&block.symbols)
}

pub fn unpack<T: Real>(z: &[Complex<T>]) -> Vec<T> {
    z.iter().map(|c| c.re).chain(z.iter().map(|c| c.im)).collect()
}

fn norm_f64<T: Real>(v: &[T]) -> f64 {
    pairwise_sum_by(v.len(), 0, |i| {
        let x = v[i].to_f64().unwrap_or(f64::NAN);
        x * x
    })
    .sqrt()
}

/// Scales `v` onto the sphere `‖v‖² = B·P` in place and returns the
/// original norm.
pub fn normalize_power<T: Real>(v: &mut [T], power: f64) -> Result<f64> {
    let norm = norm_f64(v);
    if !norm.is_finite() {
        return Err(Error::NonFinite("feature vector before power normalization".into()));
    }
    if norm == 0.0 {
        return Err(Error::invalid("cannot power-normalize an all-zero feature vector"));
    }
    let b = (v.len() / 2) as f64;
    let scale = (b * power).sqrt() / norm;
    for x in v.iter_mut() {
        *x = T::lit(x.to_f64().unwrap_or(f64::NAN) * scale);
    }
    Ok(norm)
}

/// Packs `2B` reals into `B` symbols and scales them to mean power `P`.
pub fn reals_to_complex_normalized<T: Real>(v: &[T], power: f64) -> Result<ComplexSymbolBlock<T>> {
    let mut w = v.to_vec();
    pack(&w)?;
    normalize_power(&mut w, power)?;
    Ok(ComplexSymbolBlock::new(pack(&w)?, power))
}

/// Gradient of `z = c·v/‖v‖` with `c = √(B·P)`:
/// `dv = (c/‖v‖)·(dz − u(u·dz))`, `u = v/‖v‖`.
pub fn normalize_backward<T: Real>(v: &[T], norm: f64, power: f64, dz: &[T]) -> Vec<T> {
    let c = ((v.len() / 2) as f64 * power).sqrt();
    let u_dot = pairwise_sum_by(v.len(), 0, |i| {
        v[i].to_f64().unwrap_or(f64::NAN) * dz[i].to_f64().unwrap_or(f64::NAN)
    }) / norm;
    v.iter()
        .zip(dz)
        .map(|(&x, &d)| {
            let u = x.to_f64().unwrap_or(f64::NAN) / norm;
            T::lit(c / norm * (d.to_f64().unwrap_or(f64::NAN) - u * u_dot))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn plan(c: usize, side: usize) -> SplitPlan {
        SplitPlan {
            split_index: 1,
            split_channels: c,
            split_spatial: (side, side),
        }
    }

    #[test]
    fn geometry_at_main_split() {
        let cfg = CodecConfig::new(&plan(460, 8), 128, 1.0).unwrap();
        assert_eq!(cfg.enc_channels(), 64);
        let enc = build_encoder(&cfg).unwrap();
        assert_eq!(enc.output_shape().unwrap(), vec![64, 2, 2]);
        let dec = build_decoder(&cfg).unwrap();
        assert_eq!(dec.output_shape().unwrap(), vec![460, 8, 8]);
        let cfg64 = CodecConfig::new(&plan(460, 8), 64, 1.0).unwrap();
        assert_eq!(cfg64.enc_channels(), 32);
        assert_eq!(build_encoder(&cfg64).unwrap().output_shape().unwrap().iter().product::<usize>(), 128);
        assert_eq!(build_decoder(&cfg64).unwrap().output_shape().unwrap(), vec![460, 8, 8]);
    }

    #[test]
    fn inadmissible_b_lists_options() {
        let err = CodecConfig::new(&plan(460, 8), 1, 1.0).unwrap_err().to_string();
        assert!(err.contains("admissible"), "{err}");
        assert!(err.contains("{2, 4, 6"), "{err}");
        assert!(CodecConfig::new(&plan(460, 8), 0, 1.0).is_err());
        assert!(CodecConfig::new(&plan(460, 8), 64, 0.0).is_err());
    }

    #[test]
    fn gdn_hand_values() {
        let x = Tensor::new(vec![1, 1, 1, 1], vec![3.0f64]).unwrap();
        let p = GdnParams::new(vec![1.0], vec![1.0]).unwrap();
        let y = gdn(&x, &p).unwrap();
        assert!((y.data()[0] - 3.0 / 10f64.sqrt()).abs() < 1e-9);
        let back = igdn(&y, &p).unwrap();
        assert!((back.data()[0] - 0.9486832980505138 * 1.9f64.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn gdn_identity_params() {
        let mut r = rng::stream(1, &[]);
        let x = Tensor::<f64>::from_fn(vec![2, 3, 2, 2], |_| r.random_range(-2.0..2.0));
        let p = GdnParams::new(vec![1.0; 3], vec![0.0; 9]).unwrap();
        let y = gdn(&x, &p).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let z = igdn(&Tensor::<f64>::zeros(vec![1, 3, 1, 1]), &p).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gdn_rejects_channel_mismatch() {
        let p = GdnParams::new(vec![1.0; 2], vec![0.0; 4]).unwrap();
        assert!(gdn(&Tensor::<f64>::zeros(vec![1, 3, 1, 1]), &p).is_err());
        assert!(GdnParams::new(vec![0.0], vec![0.0]).is_err());
    }

    #[test]
    fn normalization_examples() {
        let b = reals_to_complex_normalized(&[1.0f64, 0.0, 0.0, 0.0], 1.0).unwrap();
        assert!((b.symbols[0].re - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(b.symbols[0].im, 0.0);
        assert_eq!(b.symbols[1], Complex::new(0.0, 0.0));
        assert!(reals_to_complex_normalized(&[0.0f64; 4], 1.0).is_err());
        assert!(reals_to_complex_normalized(&[1.0f64; 3], 1.0).is_err());
    }

    #[test]
    fn normalization_fixpoint() {
        let v = vec![1.0f64, 0.0, 0.0, -1.0];
        let b = reals_to_complex_normalized(&v, 1.0).unwrap();
        for (a, b) in complex_to_reals(&b).iter().zip(&v) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn pack_definition() {
        let z = ComplexSymbolBlock::new(vec![Complex::new(1.0f32, 2.0)], 1.0);
        assert_eq!(complex_to_reals(&z), vec![1.0, 2.0]);
    }

    #[test]
    fn encoder_lighter_than_decoder() {
        for &side in &[4usize, 8, 16] {
            for &c in &[8usize, 64, 460] {
                for b in admissible_symbols((side, side), 256) {
                    let cfg = CodecConfig::new(&plan(c, side), b, 1.0).unwrap();
                    let e = build_encoder(&cfg).unwrap().param_count().unwrap();
                    let d = build_decoder(&cfg).unwrap().param_count().unwrap();
                    assert!(e < d, "side {side} c {c} b {b}: {e} vs {d}");
                }
            }
        }
    }

    #[test]
    fn normalize_backward_matches_differences() {
        let v = vec![0.3f64, -1.2, 0.7, 2.0, -0.4, 0.1];
        let w = [0.5, -0.3, 0.9, 0.2, -1.1, 0.4];
        let f = |v: &[f64]| {
            let mut x = v.to_vec();
            normalize_power(&mut x, 2.0).unwrap();
            x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut x = v.clone();
        let norm = normalize_power(&mut x, 2.0).unwrap();
        let g = normalize_backward(&v, norm, 2.0, &w);
        for i in 0..v.len() {
            let mut up = v.clone();
            up[i] += 1e-6;
            let mut dn = v.clone();
            dn[i] -= 1e-6;
            let num = (f(&up) - f(&dn)) / 2e-6;
            assert!((num - g[i]).abs() < 1e-6, "{i}: {num} vs {}", g[i]);
        }
    }

    proptest! {
        #[test]
        fn power_is_met_exactly(
            v in proptest::collection::vec(-100.0f64..100.0, 2..512),
            p in 0.01f64..100.0,
        ) {
            let mut v = v;
            if v.len() % 2 == 1 { v.pop(); }
            prop_assume!(v.iter().any(|&x| x != 0.0));
            let b = reals_to_complex_normalized(&v, p).unwrap();
            prop_assert!((b.mean_power() - p).abs() <= 1e-6 * p);
        }

        #[test]
        fn pack_unpack_bijection(v in proptest::collection::vec(-1e6f32..1e6, 1..256)) {
            let mut v = v;
            if v.len() % 2 == 1 { v.push(0.5); }
            let z = pack(&v).unwrap();
            prop_assert_eq!(unpack(&z), v);
        }
    }
}
