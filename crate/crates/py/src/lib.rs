//! Python bindings: model geometry, the split pipeline, the channel and the
//! frame codec.

use std::path::PathBuf;

use ewir_core::channel::{self, ChannelConfig, ChannelKind};
use ewir_core::codec::ComplexSymbolBlock;
use ewir_core::complexity::count_ondevice;
use ewir_core::config::ExperimentConfig;
use ewir_core::layers::{checkpoint, ParamStore};
use ewir_core::link::frame;
use ewir_core::model::{self, PyramidConfig};
use ewir_core::train::{top_k, Pipeline};
use ewir_core::{rng, Error, Tensor};
use num_complex::{Complex, Complex64};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for ewir_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Bottleneck width of unit `k` in a network of `units` units.
#[pyfunction]
fn fmd(k: usize, units: usize, widening: f64) -> PyResult<usize> {
    model::fmd(k, units, widening).py()
}

#[pyfunction]
#[pyo3(signature = (snr_db, power = 1.0, fading_var = 1.0))]
fn noise_variance_from_snr(snr_db: f64, power: f64, fading_var: f64) -> f64 {
    channel::noise_variance_from_snr(snr_db, power, fading_var)
}

/// Passes symbols through `h·z + n` and equalizes; returns
/// `(received, h)`. The draw is fixed by `(seed, index)`.
#[pyfunction]
#[pyo3(signature = (symbols, snr_db, kind = "rayleigh", seed = 0, index = 0, power = 1.0))]
fn transmit(symbols: Vec<Complex64>, snr_db: f64, kind: &str, seed: u64, index: u64, power: f64) -> PyResult<(Vec<Complex64>, Complex64)> {
    let cfg = ChannelConfig {
        kind: kind.parse::<ChannelKind>().py()?,
        snr_db,
        power,
        seed,
        ..ChannelConfig::default()
    };
    cfg.validate().py()?;
    let real = channel::sample_realization(&cfg, rng::CHANNEL, index, symbols.len());
    let block = ComplexSymbolBlock::new(symbols, power);
    let rx = channel::equalize(&channel::apply_channel(&block, &real).py()?, real.h).py()?;
    Ok((rx.symbols, real.h))
}

#[pyfunction]
#[pyo3(signature = (symbols, h = None))]
fn encode_frame<'py>(py: Python<'py>, symbols: Vec<Complex64>, h: Option<Complex64>) -> PyResult<Bound<'py, PyBytes>> {
    if symbols.len() as u64 > frame::MAX_SYMBOLS as u64 {
        return Err(PyValueError::new_err("too many symbols for one frame"));
    }
    let block = ComplexSymbolBlock::new(symbols.iter().map(|z| Complex::new(z.re as f32, z.im as f32)).collect(), 1.0);
    Ok(PyBytes::new(py, &frame::encode_frame(&block, h)))
}

/// Decodes one complete frame into `(symbols, h or None, length)`.
#[pyfunction]
fn decode_frame(data: &[u8]) -> PyResult<(Vec<Complex64>, Option<Complex64>, usize)> {
    match frame::decode_frame(data, 1.0).map_err(|e| PyValueError::new_err(e.to_string()))? {
        frame::Decoded::Complete(f, n) => Ok((
            f.block.symbols.iter().map(|z| Complex64::new(z.re as f64, z.im as f64)).collect(),
            f.gain.map(|h| Complex64::new(h.re as f64, h.im as f64)),
            n,
        )),
        frame::Decoded::NeedMore(n) => Err(PyValueError::new_err(format!("incomplete frame: need {n} bytes"))),
    }
}

/// Experiment configuration loaded from a TOML file.
#[pyclass(name = "ExperimentConfig", from_py_object)]
#[derive(Clone)]
struct PyExperimentConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyExperimentConfig {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: ExperimentConfig::load(&path).py()?,
        })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ExperimentConfig::from_toml_str(text).py()?,
        })
    }

    /// Every key with its value.
    fn manifest(&self) -> String {
        self.inner.manifest()
    }

    #[getter]
    fn units(&self) -> usize {
        self.inner.units
    }

    #[getter]
    fn widening(&self) -> f64 {
        self.inner.widening
    }

    #[getter]
    fn split(&self) -> usize {
        self.inner.split
    }

    #[getter]
    fn symbols(&self) -> usize {
        self.inner.symbols
    }

    #[getter]
    fn snr_db(&self) -> f64 {
        self.inner.snr_db
    }

    /// On-device `(macs, params)` for this split and codec.
    fn count_macs(&self) -> PyResult<(u64, u64)> {
        let pipe = self.inner.pipeline().py()?;
        let r = count_ondevice(&pipe.front, Some(&pipe.encoder), &pipe.full.input_shape).py()?;
        Ok((r.total_macs, r.total_params))
    }

    /// Per-layer on-device report as CSV.
    fn macs_csv(&self) -> PyResult<String> {
        let pipe = self.inner.pipeline().py()?;
        Ok(count_ondevice(&pipe.front, Some(&pipe.encoder), &pipe.full.input_shape).py()?.to_csv())
    }

    fn pipeline(&self) -> PyResult<PySplitPipeline> {
        PySplitPipeline::build(self.inner.pipeline().py()?, self.inner.seed)
    }
}

/// Split classifier with its codec and parameters. Images are flat
/// channel-major float lists of `n × 3 × size × size` values.
#[pyclass(name = "SplitPipeline")]
struct PySplitPipeline {
    pipe: Pipeline,
    params: ParamStore<f32>,
}

impl PySplitPipeline {
    fn build(pipe: Pipeline, seed: u64) -> PyResult<Self> {
        let params = pipe.init_params(seed).py()?;
        Ok(Self { pipe, params })
    }

    fn batch(&self, x: Vec<f32>) -> PyResult<Tensor<f32>> {
        let per: usize = self.pipe.full.input_shape.iter().product();
        if x.is_empty() || x.len() % per != 0 {
            return Err(PyValueError::new_err(format!("input length {} is not a multiple of {per}", x.len())));
        }
        let mut shape = vec![x.len() / per];
        shape.extend_from_slice(&self.pipe.full.input_shape);
        Tensor::new(shape, x).py()
    }
}

#[pymethods]
impl PySplitPipeline {
    #[new]
    #[pyo3(signature = (units, widening, num_classes, split, symbols, power = 1.0, seed = 0, input_size = 32))]
    fn new(units: usize, widening: f64, num_classes: usize, split: usize, symbols: usize, power: f64, seed: u64, input_size: usize) -> PyResult<Self> {
        let cfg = PyramidConfig {
            units,
            widening,
            num_classes,
            input_size,
            ..PyramidConfig::default()
        };
        Self::build(Pipeline::new(&cfg, split, symbols, power).py()?, seed)
    }

    /// Replaces parameters with those stored in a checkpoint.
    fn load_checkpoint(&mut self, path: PathBuf) -> PyResult<()> {
        let (store, _) = checkpoint::load(&path).py()?;
        for (name, p) in store.iter() {
            if let Ok(dst) = self.params.get_mut(name) {
                if dst.value.shape() != p.value.shape() {
                    return Err(PyValueError::new_err(format!("shape mismatch for `{name}`")));
                }
                dst.value = p.value.clone();
            }
        }
        Ok(())
    }

    #[getter]
    fn symbols(&self) -> usize {
        self.pipe.symbols()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.params.iter().map(|(_, p)| p.value.numel()).sum()
    }

    /// Split feature shape `(channels, height, width)`.
    #[getter]
    fn split_shape(&self) -> (usize, usize, usize) {
        let p = &self.pipe.plan;
        (p.split_channels, p.split_spatial.0, p.split_spatial.1)
    }

    /// Device side: one list of `B` normalized complex symbols per image.
    fn encode(&self, x: Vec<f32>) -> PyResult<Vec<Vec<Complex64>>> {
        let v = self.pipe.encode(&self.params, &self.batch(x)?).py()?;
        (0..v.batch())
            .map(|i| {
                let z = ewir_core::codec::pack(v.sample(i)).py()?;
                Ok(z.iter().map(|c| Complex64::new(c.re as f64, c.im as f64)).collect())
            })
            .collect()
    }

    /// Server side: received (already equalized) symbols to logits.
    fn decode(&self, symbols: Vec<Vec<Complex64>>) -> PyResult<Vec<Vec<f32>>> {
        let b = self.pipe.symbols();
        let mut flat = Vec::with_capacity(symbols.len() * 2 * b);
        for z in &symbols {
            if z.len() != b {
                return Err(PyValueError::new_err(format!("expected {b} symbols, got {}", z.len())));
            }
            let narrow: Vec<Complex<f32>> = z.iter().map(|c| Complex::new(c.re as f32, c.im as f32)).collect();
            flat.extend(ewir_core::codec::unpack(&narrow));
        }
        let logits = self.pipe.decode(&self.params, &Tensor::new(vec![symbols.len(), 2 * b], flat).py()?).py()?;
        Ok((0..logits.batch()).map(|i| logits.sample(i).to_vec()).collect())
    }

    /// Logits over an ideal link, or over the configured channel when
    /// `snr_db` is given.
    #[pyo3(signature = (x, snr_db = None, kind = "rayleigh", seed = 0))]
    fn infer(&self, x: Vec<f32>, snr_db: Option<f64>, kind: &str, seed: u64) -> PyResult<Vec<Vec<f32>>> {
        let x = self.batch(x)?;
        let reals = match snr_db {
            Some(snr_db) => {
                let cfg = ChannelConfig {
                    kind: kind.parse::<ChannelKind>().py()?,
                    snr_db,
                    power: self.pipe.codec.power,
                    seed,
                    ..ChannelConfig::default()
                };
                cfg.validate().py()?;
                let ids: Vec<usize> = (0..x.batch()).collect();
                Some(self.pipe.draw_channel(&cfg, rng::EVAL_CHANNEL, &[], &ids))
            }
            None => None,
        };
        let logits = self.pipe.infer(&self.params, &x, reals.as_deref()).py()?;
        Ok((0..logits.batch()).map(|i| logits.sample(i).to_vec()).collect())
    }

    /// Top-`k` class indices per row of logits.
    #[staticmethod]
    fn top_k(logits: Vec<Vec<f32>>, k: usize) -> Vec<Vec<usize>> {
        logits.iter().map(|row| top_k(row, k)).collect()
    }
}

#[pymodule]
fn ewir(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(fmd, m)?)?;
    m.add_function(wrap_pyfunction!(noise_variance_from_snr, m)?)?;
    m.add_function(wrap_pyfunction!(transmit, m)?)?;
    m.add_function(wrap_pyfunction!(encode_frame, m)?)?;
    m.add_function(wrap_pyfunction!(decode_frame, m)?)?;
    m.add_class::<PyExperimentConfig>()?;
    m.add_class::<PySplitPipeline>()?;
    Ok(())
}
