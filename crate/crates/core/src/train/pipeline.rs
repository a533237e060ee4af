//! The split classifier with the learned link between its halves:
//! `front → encoder → normalize → channel → equalize → decoder → rest`.

use num_complex::Complex64;

use crate::channel::{self, ChannelConfig, ChannelRealization};
use crate::codec::{self, build_decoder, build_encoder, CodecConfig, ComplexSymbolBlock};
use crate::error::{Error, Result};
use crate::layers::gradcheck::{probe_grad, probe_loss};
use crate::layers::{Differentiable, ParamStore};
use crate::model::{build_model, split_model, ModelGraph, PyramidConfig, SplitPlan};
use crate::rng;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct Pipeline {
    pub model: PyramidConfig,
    pub plan: SplitPlan,
    pub codec: CodecConfig,
    pub full: ModelGraph,
    pub front: ModelGraph,
    pub rest: ModelGraph,
    pub encoder: ModelGraph,
    pub decoder: ModelGraph,
}

impl Pipeline {
    pub fn new(model: &PyramidConfig, split: usize, symbols: usize, power: f64) -> Result<Self> {
        let full = build_model(model)?;
        let (front, rest, plan) = split_model(&full, split)?;
        let codec = CodecConfig::new(&plan, symbols, power)?;
        Ok(Self {
            model: model.clone(),
            encoder: build_encoder(&codec)?,
            decoder: build_decoder(&codec)?,
            plan,
            codec,
            full,
            front,
            rest,
        })
    }

    pub fn symbols(&self) -> usize {
        self.codec.symbols
    }

    /// Fresh parameters for every part; each part draws from its own stream.
    pub fn init_params<T: Real>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut p = self.full.init_params(seed)?;
        p.merge(self.encoder.init_params(rng::stream_id(&[seed, 1]))?);
        p.merge(self.decoder.init_params(rng::stream_id(&[seed, 2]))?);
        Ok(p)
    }

    pub fn check_params<T: Real>(&self, params: &ParamStore<T>) -> Result<()> {
        for g in [&self.full, &self.encoder, &self.decoder] {
            g.check_params(params)?;
        }
        Ok(())
    }

    /// Parameters the device needs: front part and encoder.
    pub fn device_params<T: Real>(&self, params: &ParamStore<T>) -> Result<ParamStore<T>> {
        let mut p = self.front.select_params(params)?;
        p.merge(self.encoder.select_params(params)?);
        Ok(p)
    }

    /// Parameters the server needs: decoder and rest part.
    pub fn server_params<T: Real>(&self, params: &ParamStore<T>) -> Result<ParamStore<T>> {
        let mut p = self.decoder.select_params(params)?;
        p.merge(self.rest.select_params(params)?);
        Ok(p)
    }

    /// Device side in eval mode: image batch to power-normalized `2B` reals
    /// per sample, shape `[N, 2B]`.
    pub fn encode<T: Real>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mid = self.front.forward_eval(params, x)?;
        let v = self.encoder.forward_eval(params, &mid)?;
        let n = v.batch();
        let mut v = v.reshape(vec![n, 2 * self.symbols()])?;
        for i in 0..n {
            codec::normalize_power(v.sample_mut(i), self.codec.power)?;
        }
        Ok(v)
    }

    /// Server side in eval mode: equalized `[N, 2B]` reals to logits.
    pub fn decode<T: Real>(&self, params: &ParamStore<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut shape = vec![z.batch()];
        shape.extend(self.codec.latent_shape());
        let latent = z.clone().reshape(shape)?;
        let feat = self.decoder.forward_eval(params, &latent)?;
        self.rest.forward_eval(params, &feat)
    }

    /// Full eval-mode link: encode, pass through the channel (ideal when
    /// `reals` is `None`), equalize and classify.
    pub fn infer<T: Real>(&self, params: &ParamStore<T>, x: &Tensor<T>, reals: Option<&[ChannelRealization]>) -> Result<Tensor<T>> {
        let v = self.encode(params, x)?;
        let z = match reals {
            Some(r) => through_channel(&v, self.codec.power, r)?,
            None => v,
        };
        self.decode(params, &z)
    }

    /// Realizations for a batch of dataset samples.
    pub fn draw_channel(&self, cfg: &ChannelConfig, purpose: u64, prefix: &[u64], ids: &[usize]) -> Vec<ChannelRealization> {
        let ids: Vec<u64> = ids.iter().map(|&i| i as u64).collect();
        channel::sample_batch(cfg, purpose, prefix, &ids, self.symbols())
    }
}

/// `z̃ = equalize(h·z + n)` for each already-normalized row of `z`.
pub fn through_channel<T: Real>(z: &Tensor<T>, power: f64, reals: &[ChannelRealization]) -> Result<Tensor<T>> {
    if reals.len() != z.batch() {
        return Err(Error::shape("channel realizations", &[z.batch()], &[reals.len()]));
    }
    let mut out = z.clone();
    for (i, r) in reals.iter().enumerate() {
        let block = ComplexSymbolBlock::new(codec::pack(z.sample(i))?, power);
        let rx = channel::equalize(&channel::apply_channel(&block, r)?, r.h)?;
        out.sample_mut(i).copy_from_slice(&codec::complex_to_reals(&rx));
    }
    Ok(out)
}

/// What the transmit path keeps for its backward pass.
#[derive(Clone, Debug)]
pub struct TransmitTape<T> {
    input: Tensor<T>,
    norms: Vec<f64>,
    gains: Vec<Complex64>,
}

/// Normalize, transmit and equalize each sample of `v` (any shape with a
/// batch axis; each sample holds `2B` reals). The output has `v`'s shape.
pub fn transmit_forward<T: Real>(
    v: &Tensor<T>,
    power: f64,
    reals: Option<&[ChannelRealization]>,
) -> Result<(Tensor<T>, TransmitTape<T>)> {
    let n = v.batch();
    let mut z = v.clone();
    let mut norms = Vec::with_capacity(n);
    for i in 0..n {
        norms.push(codec::normalize_power(z.sample_mut(i), power)?);
    }
    let gains = match reals {
        Some(r) => {
            let flat = z.clone().reshape(vec![n, v.sample_len()])?;
            z = through_channel(&flat, power, r)?.reshape(v.shape().to_vec())?;
            r.iter().map(|x| x.h).collect()
        }
        None => vec![Complex64::new(1.0, 0.0); n],
    };
    Ok((
        z,
        TransmitTape {
            input: v.clone(),
            norms,
            gains,
        },
    ))
}

pub fn transmit_backward<T: Real>(tape: &TransmitTape<T>, dz: &Tensor<T>, power: f64) -> Result<Tensor<T>> {
    if dz.shape() != tape.input.shape() {
        return Err(Error::shape("transmit gradient", tape.input.shape(), dz.shape()));
    }
    let mut dv = dz.clone();
    for i in 0..dz.batch() {
        let dzi = channel::channel_backward(dz.sample(i), tape.gains[i])?;
        let g = codec::normalize_backward(tape.input.sample(i), tape.norms[i], power, &dzi);
        dv.sample_mut(i).copy_from_slice(&g);
    }
    Ok(dv)
}

/// Probe loss through `normalize → apply_channel → equalize` with fixed
/// realizations, for gradient checks.
#[derive(Clone, Debug)]
pub struct TransmitProbe {
    pub power: f64,
    pub reals: Vec<ChannelRealization>,
}

impl Differentiable for TransmitProbe {
    fn loss(&self, _: &ParamStore<f64>, input: &Tensor<f64>) -> Result<f64> {
        Ok(probe_loss(&transmit_forward(input, self.power, Some(&self.reals))?.0))
    }

    fn loss_and_grad(&self, _: &mut ParamStore<f64>, input: &Tensor<f64>) -> Result<(f64, Tensor<f64>)> {
        let (z, tape) = transmit_forward(input, self.power, Some(&self.reals))?;
        let dx = transmit_backward(&tape, &probe_grad(&z), self.power)?;
        Ok((probe_loss(&z), dx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::ChannelKind;
    use crate::layers::gradient_check;
    use rand::Rng;

    pub(crate) fn toy() -> Pipeline {
        let cfg = PyramidConfig {
            units: 3,
            widening: 6.0,
            num_classes: 4,
            input_size: 16,
            ..PyramidConfig::default()
        };
        Pipeline::new(&cfg, 2, 8, 1.0).unwrap()
    }

    #[test]
    fn noiseless_link_matches_unsplit_chain() {
        let p = toy();
        let params = p.init_params::<f32>(3).unwrap();
        let mut r = rng::stream(1, &[]);
        let x = Tensor::from_fn(vec![2, 3, 16, 16], |_| r.random_range(-1.0f32..1.0));
        let ideal = p.infer(&params, &x, None).unwrap();
        let awgn = ChannelConfig {
            kind: ChannelKind::Awgn,
            ..Default::default()
        };
        let mut reals = p.draw_channel(&awgn, rng::EVAL_CHANNEL, &[], &[0, 1]);
        for r in &mut reals {
            r.noise.iter_mut().for_each(|n| *n = Complex64::new(0.0, 0.0));
        }
        let via = p.infer(&params, &x, Some(&reals)).unwrap();
        assert_eq!(ideal, via);
    }

    #[test]
    fn transmit_probe_gradient() {
        let cfg = ChannelConfig::default();
        let reals = channel::sample_batch(&cfg, rng::CHANNEL, &[], &[0, 1], 3);
        let probe = TransmitProbe { power: 2.0, reals };
        let mut r = rng::stream(2, &[]);
        let x = Tensor::<f64>::from_fn(vec![2, 6], |_| r.random_range(-1.0..1.0));
        let rep = gradient_check(&probe, &ParamStore::new(), &x, 1e-4).unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn param_partitions() {
        let p = toy();
        let params = p.init_params::<f32>(0).unwrap();
        p.check_params(&params).unwrap();
        let d = p.device_params(&params).unwrap();
        let s = p.server_params(&params).unwrap();
        assert_eq!(d.len() + s.len(), params.len());
        assert!(d.names().all(|n| !n.starts_with("dec.") && !n.starts_with("head.")));
    }
}
