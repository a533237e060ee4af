//! Block-fading channel `ẑ = h·z + n` with perfect-CSI equalization.

use num_complex::{Complex, Complex64};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::ComplexSymbolBlock;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Real;

/// Channels with `|h|` below this are treated as singular.
pub const SINGULAR_GAIN: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    Awgn,
    Rayleigh,
}

impl std::str::FromStr for ChannelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "awgn" => Ok(Self::Awgn),
            "rayleigh" => Ok(Self::Rayleigh),
            other => Err(Error::invalid(format!("unknown channel kind `{other}` (expected awgn or rayleigh)"))),
        }
    }
}

impl std::fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Awgn => "awgn",
            Self::Rayleigh => "rayleigh",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub kind: ChannelKind,
    pub snr_db: f64,
    /// Average transmit power `P`.
    pub power: f64,
    /// Fading variance `σ_h²`.
    pub fading_var: f64,
    pub seed: u64,
    /// Draw a fresh `h` for every sample rather than once per batch.
    pub per_sample_fading: bool,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            kind: ChannelKind::Rayleigh,
            snr_db: 15.0,
            power: 1.0,
            fading_var: 1.0,
            seed: 0,
            per_sample_fading: true,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.power > 0.0) || !self.power.is_finite() {
            errs.push(format!("channel power must be positive, got {}", self.power));
        }
        if !(self.fading_var > 0.0) || !self.fading_var.is_finite() {
            errs.push(format!("fading variance must be positive, got {}", self.fading_var));
        }
        if !self.snr_db.is_finite() {
            errs.push(format!("snr must be finite, got {}", self.snr_db));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs))
        }
    }

    pub fn noise_var(&self) -> f64 {
        noise_variance_from_snr(self.snr_db, self.power, self.fading_var)
    }
}

/// `σ_n² = P·σ_h²·10^(−snr/10)`.
pub fn noise_variance_from_snr(snr_db: f64, power: f64, fading_var: f64) -> f64 {
    power * fading_var * 10f64.powf(-snr_db / 10.0)
}

/// One channel use: a gain shared by the whole block and its noise draw.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRealization {
    pub h: Complex64,
    pub noise_var: f64,
    pub noise: Vec<Complex64>,
}

impl ChannelRealization {
    pub fn noiseless(h: Complex64, b: usize) -> Self {
        Self {
            h,
            noise_var: 0.0,
            noise: vec![Complex64::new(0.0, 0.0); b],
        }
    }
}

/// Circularly-symmetric complex Gaussian with total variance `var`.
fn cn(r: &mut ChaCha8Rng, var: f64) -> Complex64 {
    let sd = (var / 2.0).sqrt();
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    Complex64::new(sd * n.sample(r), sd * n.sample(r))
}

pub fn sample_gain(cfg: &ChannelConfig, r: &mut ChaCha8Rng) -> Complex64 {
    match cfg.kind {
        ChannelKind::Awgn => Complex64::new(1.0, 0.0),
        ChannelKind::Rayleigh => cn(r, cfg.fading_var),
    }
}

pub fn sample_noise(noise_var: f64, b: usize, r: &mut ChaCha8Rng) -> Vec<Complex64> {
    (0..b).map(|_| cn(r, noise_var)).collect()
}

/// Draws `h` then `n` from the `(seed, purpose, stream_index)` stream.
pub fn sample_realization(cfg: &ChannelConfig, purpose: u64, stream_index: u64, b: usize) -> ChannelRealization {
    let mut r = rng::stream(cfg.seed, &[purpose, stream_index]);
    let h = sample_gain(cfg, &mut r);
    let noise_var = cfg.noise_var();
    ChannelRealization {
        h,
        noise_var,
        noise: sample_noise(noise_var, b, &mut r),
    }
}

/// Realizations for one batch. Sample `i` draws from the key
/// `prefix ++ [ids[i]]`; with per-batch fading every sample shares the gain
/// drawn from `prefix ++ [u64::MAX]`.
pub fn sample_batch(cfg: &ChannelConfig, purpose: u64, prefix: &[u64], ids: &[u64], b: usize) -> Vec<ChannelRealization> {
    let key = |last: u64| {
        let mut k = prefix.to_vec();
        k.push(last);
        rng::stream_id(&k)
    };
    let shared = sample_gain(cfg, &mut rng::stream(cfg.seed, &[purpose, key(u64::MAX)]));
    ids.iter()
        .map(|&id| {
            let mut real = sample_realization(cfg, purpose, key(id), b);
            if !cfg.per_sample_fading {
                real.h = shared;
            }
            real
        })
        .collect()
}

fn scale<T: Real>(z: Complex<T>, a: Complex64) -> Complex64 {
    Complex64::new(z.re.to_f64().unwrap_or(f64::NAN), z.im.to_f64().unwrap_or(f64::NAN)) * a
}

fn narrow<T: Real>(z: Complex64) -> Complex<T> {
    Complex::new(T::lit(z.re), T::lit(z.im))
}

/// `ẑ = h·z + n`.
pub fn apply_channel<T: Real>(z: &ComplexSymbolBlock<T>, real: &ChannelRealization) -> Result<ComplexSymbolBlock<T>> {
    if real.noise.len() != z.len() {
        return Err(Error::shape("apply_channel noise", &[z.len()], &[real.noise.len()]));
    }
    let symbols = z
        .symbols
        .iter()
        .zip(&real.noise)
        .map(|(&s, &n)| narrow(scale(s, real.h) + n))
        .collect();
    Ok(ComplexSymbolBlock::new(symbols, z.power))
}

/// `h*/|h|²`, rejecting singular gains.
pub fn equalizer(h: Complex64) -> Result<Complex64> {
    let mag = h.norm();
    if !(mag >= SINGULAR_GAIN) {
        return Err(Error::SingularChannel(mag));
    }
    Ok(h.conj() / h.norm_sqr())
}

/// `z̃ = (h*/|h|²)·ẑ`.
pub fn equalize<T: Real>(zhat: &ComplexSymbolBlock<T>, h: Complex64) -> Result<ComplexSymbolBlock<T>> {
    let g = equalizer(h)?;
    Ok(ComplexSymbolBlock::new(
        zhat.symbols.iter().map(|&s| narrow(scale(s, g))).collect(),
        zhat.power,
    ))
}

/// Backward of `w = a·z` for a complex scalar `a` on real-packed gradients
/// (`[re…, im…]`): `dz = conj(a)·dw`.
pub fn scale_backward<T: Real>(dw: &[T], a: Complex64) -> Vec<T> {
    let b = dw.len() / 2;
    let mut out = vec![T::zero(); dw.len()];
    for i in 0..b {
        let d = Complex::new(dw[i], dw[b + i]);
        let r = scale(d, a.conj());
        out[i] = T::lit(r.re);
        out[b + i] = T::lit(r.im);
    }
    out
}

/// Input gradient of `equalize ∘ apply_channel` for gain `h`.
pub fn channel_backward<T: Real>(dz_tilde: &[T], h: Complex64) -> Result<Vec<T>> {
    let g = equalizer(h)?;
    Ok(scale_backward(&scale_backward(dz_tilde, g), h))
}

/// Measured SNR in dB of a set of noisy blocks: `10 log10(Σ|hz|² / Σ|n|²)`.
pub fn empirical_snr_db<T: Real>(blocks: &[(ComplexSymbolBlock<T>, ChannelRealization)]) -> f64 {
    let mut sig = 0.0;
    let mut noise = 0.0;
    for (z, r) in blocks {
        sig += z.symbols.iter().map(|&s| scale(s, r.h).norm_sqr()).sum::<f64>();
        noise += r.noise.iter().map(|n| n.norm_sqr()).sum::<f64>();
    }
    10.0 * (sig / noise).log10()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blk(v: Vec<Complex64>) -> ComplexSymbolBlock<f64> {
        ComplexSymbolBlock::new(v, 1.0)
    }

    #[test]
    fn noise_variance_examples() {
        assert_eq!(noise_variance_from_snr(0.0, 1.0, 1.0), 1.0);
        assert!((noise_variance_from_snr(10.0, 1.0, 1.0) - 0.1).abs() < 1e-15);
        assert!((noise_variance_from_snr(15.0, 1.0, 1.0) - 0.0316228).abs() < 1e-7);
    }

    #[test]
    fn awgn_gain_is_exactly_one() {
        let cfg = ChannelConfig {
            kind: ChannelKind::Awgn,
            ..Default::default()
        };
        for i in 0..10 {
            assert_eq!(sample_realization(&cfg, rng::CHANNEL, i, 4).h, Complex64::new(1.0, 0.0));
        }
    }

    #[test]
    fn realization_is_deterministic() {
        let cfg = ChannelConfig::default();
        assert_eq!(
            sample_realization(&cfg, rng::CHANNEL, 5, 8),
            sample_realization(&cfg, rng::CHANNEL, 5, 8)
        );
        assert_ne!(
            sample_realization(&cfg, rng::CHANNEL, 5, 8).h,
            sample_realization(&cfg, rng::CHANNEL, 6, 8).h
        );
    }

    #[test]
    fn hand_arithmetic() {
        let real = ChannelRealization {
            h: Complex64::new(2.0, 0.0),
            noise_var: 0.0,
            noise: vec![Complex64::new(0.0, 0.5)],
        };
        let y = apply_channel(&blk(vec![Complex64::new(1.0, 0.0)]), &real).unwrap();
        assert_eq!(y.symbols, vec![Complex64::new(2.0, 0.5)]);
        let e = equalize(&blk(vec![Complex64::new(2.0, 0.0)]), Complex64::new(1.0, 1.0)).unwrap();
        assert!((e.symbols[0] - Complex64::new(1.0, -1.0)).norm() < 1e-15);
    }

    #[test]
    fn mismatched_noise_and_singular_gain_rejected() {
        let real = ChannelRealization::noiseless(Complex64::new(1.0, 0.0), 3);
        assert!(apply_channel(&blk(vec![Complex64::new(1.0, 0.0)]), &real).is_err());
        assert!(matches!(
            equalize(&blk(vec![Complex64::new(1.0, 0.0)]), Complex64::new(1e-13, 0.0)),
            Err(Error::SingularChannel(_))
        ));
    }

    #[test]
    fn per_batch_fading_shares_gain() {
        let mut cfg = ChannelConfig::default();
        cfg.per_sample_fading = false;
        let rs = sample_batch(&cfg, rng::CHANNEL, &[0, 1], &[0, 1, 2, 3], 2);
        assert!(rs.iter().all(|r| r.h == rs[0].h));
        assert_ne!(rs[0].noise, rs[1].noise);
        cfg.per_sample_fading = true;
        let rs = sample_batch(&cfg, rng::CHANNEL, &[0, 1], &[0, 1, 2, 3], 2);
        assert_ne!(rs[0].h, rs[1].h);
    }

    #[test]
    fn rayleigh_gain_power() {
        let cfg = ChannelConfig {
            fading_var: 2.0,
            ..Default::default()
        };
        let mut r = rng::stream(3, &[]);
        let n = 100_000;
        let mean = (0..n).map(|_| sample_gain(&cfg, &mut r).norm_sqr()).sum::<f64>() / n as f64;
        assert!((mean / 2.0 - 1.0).abs() < 0.01, "{mean}");
    }
}
