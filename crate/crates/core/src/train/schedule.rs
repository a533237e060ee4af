use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// The classifier alone, no channel.
    Backbone,
    /// Encoder and decoder through the channel around a fixed classifier.
    Codec,
    /// Everything through the channel.
    End2end,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Backbone, Stage::Codec, Stage::End2end];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Backbone => "backbone",
            Stage::Codec => "codec",
            Stage::End2end => "end2end",
        }
    }

    pub fn uses_channel(self) -> bool {
        self != Stage::Backbone
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown stage `{s}` (expected backbone, codec or end2end)")))
    }
}

/// Parameter groups that can be frozen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Backbone,
    Encoder,
    Decoder,
}

impl Scope {
    pub fn name(self) -> &'static str {
        match self {
            Scope::Backbone => "backbone",
            Scope::Encoder => "encoder",
            Scope::Decoder => "decoder",
        }
    }

    /// Scope owning a parameter name.
    pub fn of(param: &str) -> Scope {
        if param.starts_with("enc.") {
            Scope::Encoder
        } else if param.starts_with("dec.") {
            Scope::Decoder
        } else {
            Scope::Backbone
        }
    }
}

impl std::str::FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Scope::Backbone, Scope::Encoder, Scope::Decoder]
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown scope `{s}` (expected backbone, encoder or decoder)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSchedule {
    pub stage: Stage,
    pub lr0: f64,
    pub epochs: usize,
    /// Epochs at which the learning rate is divided by 10.
    pub milestones: Vec<usize>,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    pub frozen_scopes: Vec<Scope>,
}

impl TrainingSchedule {
    /// Default recipe for each stage.
    pub fn reference(stage: Stage) -> Self {
        match stage {
            Stage::Backbone => Self {
                stage,
                lr0: 0.025,
                epochs: 300,
                milestones: vec![150, 225],
                batch_size: 32,
                weight_decay: 5e-4,
                momentum: 0.9,
                frozen_scopes: vec![Scope::Encoder, Scope::Decoder],
            },
            Stage::Codec | Stage::End2end => Self {
                stage,
                lr0: 0.01,
                epochs: 160,
                milestones: vec![80, 120],
                batch_size: 64,
                weight_decay: 5e-4,
                momentum: 0.9,
                frozen_scopes: if stage == Stage::Codec {
                    vec![Scope::Backbone]
                } else {
                    Vec::new()
                },
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let st = self.stage;
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            errs.push(format!("{st}: learning rate must be positive, got {}", self.lr0));
        }
        if self.epochs == 0 {
            errs.push(format!("{st}: epochs must be positive"));
        }
        if self.batch_size == 0 {
            errs.push(format!("{st}: batch size must be positive"));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            errs.push(format!("{st}: milestones {:?} must be strictly increasing", self.milestones));
        }
        if self.milestones.iter().any(|&m| m >= self.epochs) {
            errs.push(format!(
                "{st}: milestones {:?} must all be below the epoch count {}",
                self.milestones, self.epochs
            ));
        }
        if !(self.weight_decay >= 0.0) {
            errs.push(format!("{st}: weight decay must be nonnegative, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            errs.push(format!("{st}: momentum must be in [0, 1), got {}", self.momentum));
        }
        if st == Stage::Backbone && self.frozen_scopes.contains(&Scope::Backbone) {
            errs.push("backbone: the backbone stage cannot freeze the backbone".into());
        }
        if st != Stage::Backbone
            && [Scope::Backbone, Scope::Encoder, Scope::Decoder]
                .iter()
                .all(|s| self.frozen_scopes.contains(s))
        {
            errs.push(format!("{st}: every scope is frozen"));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs))
        }
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        lr_at_epoch(self, epoch)
    }

    pub fn is_frozen(&self, param: &str) -> bool {
        self.frozen_scopes.contains(&Scope::of(param))
    }
}

/// `lr₀ / 10^#{milestones ≤ epoch}`.
pub fn lr_at_epoch(s: &TrainingSchedule, epoch: usize) -> f64 {
    let passed = s.milestones.iter().filter(|&&m| m <= epoch).count();
    s.lr0 / 10f64.powi(passed as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * b.abs()
    }

    #[test]
    fn published_recipes() {
        let b = TrainingSchedule::reference(Stage::Backbone);
        assert_eq!((b.lr0, b.epochs, b.batch_size, b.weight_decay), (0.025, 300, 32, 5e-4));
        assert_eq!(b.milestones, vec![150, 225]);
        let c = TrainingSchedule::reference(Stage::Codec);
        assert_eq!((c.lr0, c.epochs, c.batch_size, c.weight_decay), (0.01, 160, 64, 5e-4));
        assert_eq!(c.milestones, vec![80, 120]);
        assert_eq!(c.frozen_scopes, vec![Scope::Backbone]);
        assert!(TrainingSchedule::reference(Stage::End2end).frozen_scopes.is_empty());
        for s in Stage::ALL {
            TrainingSchedule::reference(s).validate().unwrap();
        }
    }

    #[test]
    fn step_schedule() {
        let b = TrainingSchedule::reference(Stage::Backbone);
        assert!(close(b.lr_at_epoch(0), 0.025));
        assert!(close(b.lr_at_epoch(149), 0.025));
        assert!(close(b.lr_at_epoch(150), 0.0025));
        assert!(close(b.lr_at_epoch(299), 0.00025));
        assert!(close(TrainingSchedule::reference(Stage::Codec).lr_at_epoch(80), 0.001));
    }

    #[test]
    fn invalid_schedules() {
        let mut s = TrainingSchedule::reference(Stage::Codec);
        s.milestones = vec![120, 80];
        assert!(s.validate().is_err());
        s.milestones = vec![80, 160];
        assert!(s.validate().is_err());
        s.milestones = vec![];
        s.frozen_scopes = vec![Scope::Backbone, Scope::Encoder, Scope::Decoder];
        assert!(s.validate().is_err());
    }

    #[test]
    fn scopes_by_name() {
        assert_eq!(Scope::of("enc.conv.weight"), Scope::Encoder);
        assert_eq!(Scope::of("dec.bn.running_var"), Scope::Decoder);
        assert_eq!(Scope::of("unit3.conv1.weight"), Scope::Backbone);
    }
}
