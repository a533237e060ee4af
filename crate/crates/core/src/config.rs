//! Experiment configuration: one flat TOML file of `key = value` lines.
//!
//! Every key has a default; the run manifest written next to the outputs
//! lists all of them, so a run is fully described by its manifest. `0`
//! means "all samples" for `train_limit` and `eval_limit`, and "skip the
//! stage" for the `*_epochs` keys.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::channel::{ChannelConfig, ChannelKind};
use crate::codec::CodecConfig;
use crate::data::{Variant, DATA_ROOT_ENV};
use crate::error::{Error, Result};
use crate::model::{split_plan, PyramidConfig};
use crate::train::{Pipeline, Scope, Stage, TrainingSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,

    pub units: usize,
    pub widening: f64,
    pub num_classes: usize,
    pub squeeze_excitation: bool,
    pub split: usize,

    pub symbols: usize,
    pub power: f64,

    pub channel: ChannelKind,
    pub snr_db: f64,
    pub fading_var: f64,
    pub per_sample_fading: bool,

    pub dataset: Variant,
    /// Empty: taken from the environment, else `data`.
    pub data_root: String,
    pub augment: bool,
    pub train_limit: usize,
    pub eval_limit: usize,
    pub eval_batch: usize,
    pub synthetic_train: usize,
    pub synthetic_test: usize,

    pub backbone_epochs: usize,
    pub backbone_lr: f64,
    pub backbone_milestones: Vec<usize>,
    pub backbone_batch: usize,
    pub codec_epochs: usize,
    pub codec_lr: f64,
    pub codec_milestones: Vec<usize>,
    pub codec_batch: usize,
    pub end2end_epochs: usize,
    pub end2end_lr: f64,
    pub end2end_milestones: Vec<usize>,
    pub end2end_batch: usize,
    pub weight_decay: f64,
    pub momentum: f64,

    pub out_dir: String,

    pub listen: String,
    pub proxy_listen: String,
    /// Where `send` connects: the server or a proxy in front of it.
    pub send_to: String,
    pub proxy_noiseless: bool,
    pub timeout_ms: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let b = TrainingSchedule::reference(Stage::Backbone);
        let c = TrainingSchedule::reference(Stage::Codec);
        let e = TrainingSchedule::reference(Stage::End2end);
        let m = PyramidConfig::default();
        let ch = ChannelConfig::default();
        Self {
            seed: 0,
            units: m.units,
            widening: m.widening,
            num_classes: m.num_classes,
            squeeze_excitation: m.squeeze_excitation,
            split: 45,
            symbols: 128,
            power: ch.power,
            channel: ch.kind,
            snr_db: ch.snr_db,
            fading_var: ch.fading_var,
            per_sample_fading: ch.per_sample_fading,
            dataset: Variant::Cifar100,
            data_root: String::new(),
            augment: true,
            train_limit: 0,
            eval_limit: 0,
            eval_batch: 100,
            synthetic_train: 5000,
            synthetic_test: 1000,
            backbone_epochs: b.epochs,
            backbone_lr: b.lr0,
            backbone_milestones: b.milestones,
            backbone_batch: b.batch_size,
            codec_epochs: c.epochs,
            codec_lr: c.lr0,
            codec_milestones: c.milestones,
            codec_batch: c.batch_size,
            end2end_epochs: e.epochs,
            end2end_lr: e.lr0,
            end2end_milestones: e.milestones,
            end2end_batch: e.batch_size,
            weight_decay: b.weight_decay,
            momentum: b.momentum,
            out_dir: "runs/default".into(),
            listen: "127.0.0.1:7878".into(),
            proxy_listen: "127.0.0.1:7879".into(),
            send_to: "127.0.0.1:7878".into(),
            proxy_noiseless: false,
            timeout_ms: 10_000,
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(vec![e.message().to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(vec![format!("cannot read {}: {e}", path.display())]))?;
        Self::from_toml_str(&text)
    }

    /// Every key with its value, in declaration order.
    pub fn manifest(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn pyramid(&self) -> PyramidConfig {
        PyramidConfig {
            units: self.units,
            widening: self.widening,
            num_classes: self.num_classes,
            squeeze_excitation: self.squeeze_excitation,
            ..PyramidConfig::default()
        }
    }

    pub fn channel_config(&self) -> ChannelConfig {
        ChannelConfig {
            kind: self.channel,
            snr_db: self.snr_db,
            power: self.power,
            fading_var: self.fading_var,
            seed: self.seed,
            per_sample_fading: self.per_sample_fading,
        }
    }

    pub fn schedule(&self, stage: Stage) -> TrainingSchedule {
        let (epochs, lr0, milestones, batch_size) = match stage {
            Stage::Backbone => (self.backbone_epochs, self.backbone_lr, &self.backbone_milestones, self.backbone_batch),
            Stage::Codec => (self.codec_epochs, self.codec_lr, &self.codec_milestones, self.codec_batch),
            Stage::End2end => (self.end2end_epochs, self.end2end_lr, &self.end2end_milestones, self.end2end_batch),
        };
        TrainingSchedule {
            stage,
            lr0,
            epochs,
            milestones: milestones.clone(),
            batch_size,
            weight_decay: self.weight_decay,
            momentum: self.momentum,
            frozen_scopes: match stage {
                Stage::Backbone => vec![Scope::Encoder, Scope::Decoder],
                Stage::Codec => vec![Scope::Backbone],
                Stage::End2end => Vec::new(),
            },
        }
    }

    pub fn pipeline(&self) -> Result<Pipeline> {
        Pipeline::new(&self.pyramid(), self.split, self.symbols, self.power)
    }

    pub fn data_root(&self) -> PathBuf {
        if !self.data_root.is_empty() {
            return PathBuf::from(&self.data_root);
        }
        std::env::var_os(DATA_ROOT_ENV).map_or_else(|| PathBuf::from("data"), PathBuf::from)
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.out_dir)
    }

    /// Collects every violation rather than stopping at the first.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut absorb = |r: Result<()>| match r {
            Ok(()) => {}
            Err(Error::InvalidConfig(v)) => errs.extend(v),
            Err(e) => errs.push(e.to_string()),
        };
        let model = self.pyramid();
        let model_ok = model.validate().is_ok();
        absorb(model.validate());
        if self.split == 0 || self.split > self.units {
            absorb(Err(Error::invalid(format!(
                "split = {} must lie in [1, units = {}]",
                self.split, self.units
            ))));
        } else if model_ok {
            absorb(split_plan(&model, self.split).and_then(|plan| CodecConfig::new(&plan, self.symbols, self.power).map(|_| ())));
        }
        if self.num_classes != self.dataset.num_classes() {
            absorb(Err(Error::invalid(format!(
                "num_classes = {} does not match dataset {} with {} classes",
                self.num_classes,
                self.dataset,
                self.dataset.num_classes()
            ))));
        }
        absorb(self.channel_config().validate());
        for st in Stage::ALL {
            let s = self.schedule(st);
            if s.epochs > 0 {
                absorb(s.validate());
            } else if !s.milestones.is_empty() {
                absorb(Err(Error::invalid(format!("{st}: milestones given for a skipped stage"))));
            }
        }
        if self.eval_batch == 0 {
            absorb(Err(Error::invalid("eval_batch must be positive")));
        }
        if self.dataset == Variant::Synthetic && (self.synthetic_train == 0 || self.synthetic_test == 0) {
            absorb(Err(Error::invalid("synthetic_train and synthetic_test must be positive")));
        }
        if self.out_dir.is_empty() {
            absorb(Err(Error::invalid("out_dir must not be empty")));
        }
        if self.timeout_ms == 0 {
            absorb(Err(Error::invalid("timeout_ms must be positive")));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn errors(text: &str) -> Vec<String> {
        match ExperimentConfig::from_toml_str(text) {
            Err(Error::InvalidConfig(v)) => v,
            other => panic!("expected invalid config, got {other:?}"),
        }
    }

    #[test]
    fn defaults_validate_and_roundtrip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml_str(&cfg.manifest()).unwrap();
        assert_eq!(back, cfg);
        assert!(ExperimentConfig::from_toml_str("").is_ok());
    }

    #[test]
    fn lists_every_violation() {
        let e = errors("split = 60\nsnr_db = nan\nnum_classes = 10\neval_batch = 0\n");
        assert_eq!(e.len(), 4, "{e:?}");
        assert!(e[0].contains("split = 60"));
    }

    #[test]
    fn inadmissible_bandwidth_is_reported() {
        let e = errors("symbols = 3\n");
        assert!(e.iter().any(|m| m.contains("B = 3") && m.contains("admissible")), "{e:?}");
    }

    #[test]
    fn unknown_keys_and_bad_milestones() {
        assert!(!errors("unit = 3\n").is_empty());
        let e = errors("backbone_epochs = 10\nbackbone_milestones = [5, 12]\n");
        assert!(e.iter().any(|m| m.contains("below the epoch count")), "{e:?}");
    }

    #[test]
    fn schedules_follow_keys() {
        let cfg = ExperimentConfig::from_toml_str("codec_epochs = 4\ncodec_milestones = [2]\ncodec_lr = 0.1").unwrap();
        let s = cfg.schedule(Stage::Codec);
        assert_eq!((s.epochs, s.lr_at_epoch(1), s.lr_at_epoch(2)), (4, 0.1, 0.1 / 10.0));
        assert_eq!(s.frozen_scopes, vec![Scope::Backbone]);
    }
}
