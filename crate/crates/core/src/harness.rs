//! Config-driven commands: train, eval, count-macs, sweep, serve, proxy and
//! send. Each command writes its artifacts under the configured output
//! directory; reruns with the same config reproduce them byte for byte.
//!
//! Output files:
//!
//! | file            | contents                                              |
//! |-----------------|-------------------------------------------------------|
//! | `manifest.toml` | every config key, defaults included                   |
//! | `metrics.csv`   | `epoch,stage,lr,loss,top1,top5`, one row per epoch    |
//! | `backbone.ckpt` | classifier parameters after the backbone stage        |
//! | `model.ckpt`    | all parameters after the last stage                   |
//! | `device.ckpt`   | front part and encoder                                |
//! | `server.ckpt`   | decoder and rest part                                 |
//! | `eval.csv`      | `metric,value` with `top1` and `top5` rows            |
//! | `macs.csv`      | `layer,out_shape,macs,params` plus a `TOTAL` row      |
//! | `sweep_<axis>.csv` | `value,top1,top5,ondevice_gmacs,ondevice_mparams`  |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::net::{SocketAddr, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use crate::complexity::{count_ondevice, MacReport};
use crate::config::ExperimentConfig;
use crate::data::{self, load_cifar, preprocess, Dataset, NormStats, Split, Variant};
use crate::error::{Error, Result};
use crate::layers::{checkpoint, ParamStore};
use crate::link::{self, DeviceModel, ProxyConfig, Reply, ServerModel, ServiceHandle};
use crate::rng;
use crate::train::{evaluate_topk, metrics_csv, run_stage, EvalPath, MetricsRow, Pipeline, RunOptions, Stage};

pub const SWEEP_HEADER: &str = "value,top1,top5,ondevice_gmacs,ondevice_mparams";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

fn meta(cfg: &ExperimentConfig, part: &str) -> BTreeMap<String, String> {
    BTreeMap::from([("part".to_string(), part.to_string()), ("config".to_string(), cfg.manifest())])
}

fn write_manifest(cfg: &ExperimentConfig) -> Result<()> {
    write(&cfg.out_dir().join("manifest.toml"), cfg.manifest())
}

/// Train and test splits for the config, generating the synthetic set on
/// first use.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let root = cfg.data_root();
    let (train, test) = if cfg.dataset == Variant::Synthetic {
        let dir = root.join(format!(
            "synthetic-s{}-{}-{}",
            cfg.seed, cfg.synthetic_train, cfg.synthetic_test
        ));
        if !data::available(&dir, Variant::Synthetic) {
            data::write_synthetic(&dir, cfg.seed, cfg.synthetic_train, cfg.synthetic_test)?;
        }
        load_cifar(&dir, Variant::Synthetic)?
    } else {
        if !data::available(&root, cfg.dataset) {
            return Err(Error::invalid(format!(
                "{} not found under `{}`; set data_root or {}",
                cfg.dataset,
                root.display(),
                data::DATA_ROOT_ENV
            )));
        }
        load_cifar(&root, cfg.dataset)?
    };
    let train = match cfg.train_limit {
        0 => train,
        n => train.truncated(n),
    };
    Ok((train, test))
}

fn eval_set(cfg: &ExperimentConfig, test: &Dataset) -> Dataset {
    match cfg.eval_limit {
        0 => test.clone(),
        n => test.truncated(n),
    }
}

fn run_options(cfg: &ExperimentConfig) -> RunOptions {
    RunOptions {
        seed: cfg.seed,
        augment: cfg.augment,
        stats: NormStats::for_variant(cfg.dataset),
        channel: cfg.channel_config(),
        eval_limit: (cfg.eval_limit > 0).then_some(cfg.eval_limit),
        eval_batch: cfg.eval_batch,
    }
}

/// Result of [`train`].
#[derive(Debug)]
pub struct TrainRun {
    pub pipe: Pipeline,
    pub params: ParamStore<f32>,
    pub metrics: Vec<MetricsRow>,
}

/// Runs the configured stages in order; stages with zero epochs are skipped.
/// `start` replaces freshly initialized parameters (all or a subset).
pub fn train_stages(
    cfg: &ExperimentConfig,
    stages: &[Stage],
    start: Option<&ParamStore<f32>>,
    data: &(Dataset, Dataset),
    on_epoch: &mut dyn FnMut(&MetricsRow),
) -> Result<TrainRun> {
    cfg.validate()?;
    let pipe = cfg.pipeline()?;
    let mut params = pipe.init_params::<f32>(cfg.seed)?;
    if let Some(src) = start {
        overwrite(&mut params, src)?;
    }
    let opts = run_options(cfg);
    let mut metrics = Vec::new();
    for &st in stages {
        let sched = cfg.schedule(st);
        if sched.epochs == 0 {
            continue;
        }
        metrics.extend(run_stage(&pipe, &mut params, &sched, &opts, &data.0, &data.1, &mut *on_epoch)?);
        if st == Stage::Backbone {
            let backbone = pipe.full.select_params(&params)?;
            checkpoint::save(&cfg.out_dir().join("backbone.ckpt"), &backbone, &meta(cfg, "backbone"))?;
        }
    }
    Ok(TrainRun { pipe, params, metrics })
}

fn overwrite(dst: &mut ParamStore<f32>, src: &ParamStore<f32>) -> Result<()> {
    for (name, p) in src.iter() {
        let d = dst.get_mut(name)?;
        if d.value.shape() != p.value.shape() {
            return Err(Error::shape(format!("parameter `{name}`"), d.value.shape(), p.value.shape()));
        }
        d.value = p.value.clone();
    }
    Ok(())
}

fn save_run(cfg: &ExperimentConfig, run: &TrainRun) -> Result<()> {
    let dir = cfg.out_dir();
    checkpoint::save(&dir.join("model.ckpt"), &run.params, &meta(cfg, "model"))?;
    checkpoint::save(&dir.join("device.ckpt"), &run.pipe.device_params(&run.params)?, &meta(cfg, "device"))?;
    checkpoint::save(&dir.join("server.ckpt"), &run.pipe.server_params(&run.params)?, &meta(cfg, "server"))?;
    write(&dir.join("metrics.csv"), metrics_csv(&run.metrics))
}

/// `train`: all three stages from scratch.
pub fn train(cfg: &ExperimentConfig, on_epoch: &mut dyn FnMut(&MetricsRow)) -> Result<TrainRun> {
    cfg.validate()?;
    write_manifest(cfg)?;
    let data = load_data(cfg)?;
    let run = train_stages(cfg, &Stage::ALL, None, &data, on_epoch)?;
    save_run(cfg, &run)?;
    Ok(run)
}

/// Loads a checkpoint and checks it with `check`.
pub fn load_checkpoint(path: &Path, check: impl Fn(&ParamStore<f32>) -> Result<()>) -> Result<ParamStore<f32>> {
    if !path.is_file() {
        return Err(Error::invalid(format!("checkpoint `{}` not found; run `train` first", path.display())));
    }
    let (store, _) = checkpoint::load(path)?;
    check(&store)?;
    Ok(store)
}

fn load_model(cfg: &ExperimentConfig, pipe: &Pipeline) -> Result<ParamStore<f32>> {
    load_checkpoint(&cfg.out_dir().join("model.ckpt"), |p| pipe.check_params(p))
}

/// Top-1 and top-5 accuracy of the full link at the configured SNR.
pub fn evaluate(cfg: &ExperimentConfig, pipe: &Pipeline, params: &ParamStore<f32>, test: &Dataset) -> Result<(f64, f64)> {
    let ch = cfg.channel_config();
    let stats = NormStats::for_variant(cfg.dataset);
    let acc = evaluate_topk(pipe, params, test, &[1, 5.min(cfg.num_classes)], EvalPath::Link(Some(&ch)), &stats, cfg.eval_batch)?;
    Ok((acc[0], acc[1]))
}

/// `eval`: writes `eval.csv` from `model.ckpt`.
pub fn eval(cfg: &ExperimentConfig) -> Result<(f64, f64)> {
    cfg.validate()?;
    let pipe = cfg.pipeline()?;
    let params = load_model(cfg, &pipe)?;
    let (_, test) = load_data(cfg)?;
    let (top1, top5) = evaluate(cfg, &pipe, &params, &eval_set(cfg, &test))?;
    write_manifest(cfg)?;
    write(
        &cfg.out_dir().join("eval.csv"),
        format!("metric,value\ntop1,{top1:.6}\ntop5,{top5:.6}\n"),
    )?;
    Ok((top1, top5))
}

/// On-device cost of the configured split and codec.
pub fn ondevice_report(cfg: &ExperimentConfig) -> Result<MacReport> {
    let pipe = cfg.pipeline()?;
    count_ondevice(&pipe.front, Some(&pipe.encoder), &pipe.full.input_shape)
}

/// `count-macs`: writes `macs.csv`.
pub fn count_macs(cfg: &ExperimentConfig) -> Result<MacReport> {
    cfg.validate()?;
    let report = ondevice_report(cfg)?;
    write_manifest(cfg)?;
    write(&cfg.out_dir().join("macs.csv"), report.to_csv())?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Snr,
    Bandwidth,
    Split,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "snr" => Ok(Self::Snr),
            "bandwidth" => Ok(Self::Bandwidth),
            "split" => Ok(Self::Split),
            other => Err(Error::invalid(format!("unknown sweep axis `{other}` (expected snr, bandwidth or split)"))),
        }
    }
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Snr => "snr",
            Self::Bandwidth => "bandwidth",
            Self::Split => "split",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub top1: f64,
    pub top5: f64,
    pub gmacs: f64,
    pub mparams: f64,
}

#[derive(Clone, Debug, Default)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Values whose derived config was rejected, with the reason.
    pub skipped: Vec<(f64, String)>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{SWEEP_HEADER}\n");
        for r in &self.rows {
            writeln!(s, "{},{:.6},{:.6},{:.6},{:.6}", r.value, r.top1, r.top5, r.gmacs, r.mparams).unwrap();
        }
        s
    }
}

/// Config for one sweep point, or why there is none.
pub fn derive_point(cfg: &ExperimentConfig, axis: SweepAxis, value: f64) -> Result<ExperimentConfig> {
    let mut c = cfg.clone();
    let int = || {
        if value >= 1.0 && value.fract() == 0.0 && value <= u32::MAX as f64 {
            Ok(value as usize)
        } else {
            Err(Error::invalid(format!("{axis} value {value} must be a positive integer")))
        }
    };
    match axis {
        SweepAxis::Snr => c.snr_db = value,
        SweepAxis::Bandwidth => c.symbols = int()?,
        SweepAxis::Split => c.split = int()?,
    }
    if axis != SweepAxis::Snr {
        c.out_dir = cfg.out_dir().join(format!("sweep_{axis}_{value}")).to_string_lossy().into_owned();
    }
    c.validate()?;
    Ok(c)
}

/// Backbone parameters from `backbone.ckpt`, training the backbone stage
/// first when it is missing.
fn backbone(cfg: &ExperimentConfig, data: &(Dataset, Dataset), on_epoch: &mut dyn FnMut(&MetricsRow)) -> Result<ParamStore<f32>> {
    let path = cfg.out_dir().join("backbone.ckpt");
    let pipe = cfg.pipeline()?;
    if !path.is_file() {
        train_stages(cfg, &[Stage::Backbone], None, data, on_epoch)?;
    }
    load_checkpoint(&path, |p| pipe.full.check_params(p))
}

/// `sweep`: one row per value. The snr axis re-evaluates the trained model
/// at each test SNR. The bandwidth and split axes train the codec and
/// end-to-end stages per point on top of the shared backbone.
pub fn sweep(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
    on_epoch: &mut dyn FnMut(&MetricsRow),
) -> Result<SweepResult> {
    cfg.validate()?;
    write_manifest(cfg)?;
    let data = load_data(cfg)?;
    let test = eval_set(cfg, &data.1);
    let mut out = SweepResult::default();
    let trained = match axis {
        SweepAxis::Snr => {
            let pipe = cfg.pipeline()?;
            let params = if cfg.out_dir().join("model.ckpt").is_file() {
                load_model(cfg, &pipe)?
            } else {
                let run = train_stages(cfg, &Stage::ALL, None, &data, on_epoch)?;
                save_run(cfg, &run)?;
                run.params
            };
            Some((pipe, params))
        }
        _ => None,
    };
    let base = match axis {
        SweepAxis::Snr => None,
        _ => Some(backbone(cfg, &data, on_epoch)?),
    };
    for &v in values {
        let point = match derive_point(cfg, axis, v) {
            Ok(p) => p,
            Err(e) => {
                out.skipped.push((v, e.to_string()));
                continue;
            }
        };
        let report = ondevice_report(&point)?;
        let (top1, top5) = match (&trained, &base) {
            (Some((pipe, params)), _) => evaluate(&point, pipe, params, &test)?,
            (None, Some(bb)) => {
                write_manifest(&point)?;
                let run = train_stages(&point, &[Stage::Codec, Stage::End2end], Some(bb), &data, on_epoch)?;
                save_run(&point, &run)?;
                evaluate(&point, &run.pipe, &run.params, &test)?
            }
            (None, None) => unreachable!("every axis has a model source"),
        };
        out.rows.push(SweepRow {
            value: v,
            top1,
            top5,
            gmacs: report.gmacs(),
            mparams: report.mparams(),
        });
    }
    write(&cfg.out_dir().join(format!("sweep_{axis}.csv")), out.to_csv())?;
    Ok(out)
}

fn socket_addr(s: &str) -> Result<SocketAddr> {
    s.to_socket_addrs()
        .map_err(|e| Error::invalid(format!("address `{s}`: {e}")))?
        .next()
        .ok_or_else(|| Error::invalid(format!("address `{s}` did not resolve")))
}

/// `serve`: starts the server on `listen` with `server.ckpt`.
pub fn serve(cfg: &ExperimentConfig) -> Result<ServiceHandle> {
    cfg.validate()?;
    let pipe = cfg.pipeline()?;
    let params = load_checkpoint(&cfg.out_dir().join("server.ckpt"), |p| {
        pipe.decoder.check_params(p)?;
        pipe.rest.check_params(p)
    })?;
    link::run_server(socket_addr(&cfg.listen)?, Arc::new(ServerModel::new(pipe, params)?))
}

/// `proxy`: starts the channel proxy on `proxy_listen`, forwarding to
/// `listen`.
pub fn proxy(cfg: &ExperimentConfig) -> Result<ServiceHandle> {
    cfg.validate()?;
    let pc = ProxyConfig {
        channel: cfg.channel_config(),
        noiseless: cfg.proxy_noiseless,
        power: cfg.power,
    };
    link::run_proxy(socket_addr(&cfg.proxy_listen)?, socket_addr(&cfg.listen)?, pc)
}

/// What `send` transmits.
#[derive(Clone, Debug)]
pub enum ImageSource {
    Path(PathBuf),
    /// Index into the test split.
    TestIndex(usize),
}

/// Preprocessed pixels and, for dataset images, the true label.
pub fn load_input(cfg: &ExperimentConfig, src: &ImageSource) -> Result<(Vec<f32>, Option<usize>)> {
    let (sample, label) = match src {
        ImageSource::Path(p) => (data::load_image(p)?, None),
        ImageSource::TestIndex(i) => {
            let (_, test) = load_data(cfg)?;
            let s = test.samples.get(*i).cloned().ok_or_else(|| Error::OutOfRange {
                what: "test index",
                detail: format!("{i} not below {}", test.len()),
            })?;
            let label = s.label;
            (s, Some(label))
        }
    };
    let stats = NormStats::for_variant(cfg.dataset);
    let mut unused = rng::stream(cfg.seed, &[]);
    Ok((preprocess(&sample, Split::Eval, false, &stats, &mut unused), label))
}

/// `send`: encodes one image with `device.ckpt` and sends it to `send_to`.
pub fn send(cfg: &ExperimentConfig, src: &ImageSource) -> Result<(Reply, Option<usize>)> {
    cfg.validate()?;
    let pipe = cfg.pipeline()?;
    let params = load_checkpoint(&cfg.out_dir().join("device.ckpt"), |p| {
        pipe.front.check_params(p)?;
        pipe.encoder.check_params(p)
    })?;
    let device = DeviceModel::new(pipe, params)?;
    let (pixels, label) = load_input(cfg, src)?;
    let reply = link::run_device(&device, &pixels, socket_addr(&cfg.send_to)?, Duration::from_millis(cfg.timeout_ms))?;
    Ok((reply, label))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_axis_parsing() {
        assert_eq!("snr".parse::<SweepAxis>().unwrap(), SweepAxis::Snr);
        assert!("depth".parse::<SweepAxis>().is_err());
    }

    #[test]
    fn derived_points() {
        let cfg = ExperimentConfig::default();
        assert_eq!(derive_point(&cfg, SweepAxis::Bandwidth, 64.0).unwrap().symbols, 64);
        assert!(derive_point(&cfg, SweepAxis::Bandwidth, 3.0).is_err());
        assert!(derive_point(&cfg, SweepAxis::Split, 2.5).is_err());
        assert!(derive_point(&cfg, SweepAxis::Split, 60.0).is_err());
        assert_eq!(derive_point(&cfg, SweepAxis::Snr, 5.0).unwrap().out_dir, cfg.out_dir);
    }

    #[test]
    fn ondevice_cost_grows_with_split() {
        let cfg = ExperimentConfig::default();
        let g: Vec<u64> = [15.0, 30.0, 45.0]
            .iter()
            .map(|&s| ondevice_report(&derive_point(&cfg, SweepAxis::Split, s).unwrap()).unwrap().total_macs)
            .collect();
        assert!(g[0] < g[1] && g[1] < g[2], "{g:?}");
    }
}
