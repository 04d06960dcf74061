//! Training configuration and its flat `key=value` file format.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::{AdvMode, LossConfig};
use crate::tmr::{Aggregation, Pooling};

/// The four method variants compared in the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    /// TMR aggregation and modal-invariant adversarial learning.
    Full,
    /// Pooled frame features, identity losses only.
    Baseline,
    /// Baseline plus the adversarial modality game.
    BaselineM,
    /// Baseline with TMR aggregation, no adversarial term.
    BaselineT,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Baseline, Method::BaselineM, Method::BaselineT, Method::Full];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Baseline => "baseline",
            Self::BaselineM => "baseline+M",
            Self::BaselineT => "baseline+T",
        }
    }

    pub fn uses_tmr(self) -> bool {
        matches!(self, Self::Full | Self::BaselineT)
    }

    pub fn adversarial(self) -> bool {
        matches!(self, Self::Full | Self::BaselineM)
    }

    pub fn aggregation(self, pooling: Pooling) -> Aggregation {
        if self.uses_tmr() {
            Aggregation::Tmr
        } else {
            Aggregation::Pool(pooling)
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?} (full, baseline, baseline+M, baseline+T)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// `P`: identities per batch.
    pub batch_identities: usize,
    /// `K`: tracklets per identity, half RGB and half IR.
    pub tracklets_per_identity: usize,
    /// `n`: frames sampled per tracklet; also the TMR sequence length.
    pub frames_per_tracklet: usize,
    pub base_lr: f64,
    pub warmup_start_lr: f64,
    pub warmup_epochs: usize,
    /// `(epoch, lr)`: from `epoch + 1` on the main rate is `lr`.
    pub lr_drops: Vec<(usize, f64)>,
    pub stem_lr_factor: f64,
    pub wm_lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub seed: u64,
    pub method: Method,
    pub loss: LossConfig,
    /// Frame pooling of the non-TMR methods.
    pub pooling: Pooling,
    pub shuffle_frames: bool,
    pub augment: bool,
    /// Periodic checkpoint interval in epochs; 0 disables.
    pub checkpoint_every: usize,
    pub stage_channels: [usize; 5],
    pub se_reduction: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_identities: 8,
            tracklets_per_identity: 2,
            frames_per_tracklet: 6,
            base_lr: 0.1,
            warmup_start_lr: 0.01,
            warmup_epochs: 10,
            lr_drops: vec![(35, 0.01), (80, 0.001)],
            stem_lr_factor: 0.1,
            wm_lr: 0.01,
            weight_decay: 5e-4,
            momentum: 0.9,
            seed: 0,
            method: Method::Full,
            loss: LossConfig::default(),
            pooling: Pooling::Average,
            shuffle_frames: false,
            augment: true,
            checkpoint_every: 10,
            stage_channels: [8, 16, 32, 64, 64],
            se_reduction: 4,
        }
    }
}

impl TrainConfig {
    /// Settings for training from scratch on the synthetic corpus: 30
    /// epochs, a gentler warm-up, full-rate stems, no augmentation and a
    /// normalized modality-head input.
    pub fn desk(seed: u64) -> Self {
        Self {
            epochs: 30,
            base_lr: 0.01,
            warmup_start_lr: 0.002,
            stem_lr_factor: 1.0,
            augment: false,
            seed,
            loss: LossConfig {
                normalize_modality_input: true,
                ..LossConfig::default()
            },
            ..Self::default()
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let n = self.frames_per_tracklet;
        if n == 0 || n > 24 || 24 % n != 0 {
            return fail(format!("frames_per_tracklet {n} must divide 24"));
        }
        if self.batch_identities < 2 {
            return fail("batch_identities must be at least 2".into());
        }
        if self.tracklets_per_identity == 0 || !self.tracklets_per_identity.is_multiple_of(2) {
            return fail("tracklets_per_identity must be even (half RGB, half IR)".into());
        }
        for (name, v) in [
            ("base_lr", self.base_lr),
            ("warmup_start_lr", self.warmup_start_lr),
            ("stem_lr_factor", self.stem_lr_factor),
            ("wm_lr", self.wm_lr),
            ("weight_decay", self.weight_decay),
            ("momentum", self.momentum),
        ] {
            if !v.is_finite() || v < 0.0 {
                return fail(format!("{name} must be finite and >= 0"));
            }
        }
        if self.lr_drops.windows(2).any(|w| w[0].0 >= w[1].0) {
            return fail("lr_drops epochs must increase".into());
        }
        if self.lr_drops.iter().any(|&(_, lr)| !lr.is_finite() || lr < 0.0) {
            return fail("lr_drops rates must be finite and >= 0".into());
        }
        let mut level = self.base_lr;
        for &(at, lr) in &self.lr_drops {
            if at < self.warmup_epochs || lr > level {
                return fail(format!("lr drop {at}:{lr} must follow warm-up and not raise the rate"));
            }
            level = lr;
        }
        if self.stage_channels.contains(&0) {
            return fail("stage_channels must be positive".into());
        }
        self.loss.validate()
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "batch_identities" => self.batch_identities = parse(key, value)?,
            "tracklets_per_identity" => self.tracklets_per_identity = parse(key, value)?,
            "frames_per_tracklet" => self.frames_per_tracklet = parse(key, value)?,
            "base_lr" => self.base_lr = parse(key, value)?,
            "warmup_start_lr" => self.warmup_start_lr = parse(key, value)?,
            "warmup_epochs" => self.warmup_epochs = parse(key, value)?,
            "lr_drops" => {
                self.lr_drops = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|item| {
                        let (e, lr) = item
                            .split_once(':')
                            .ok_or_else(|| Error::Config(format!("lr_drops entry {item:?} is not epoch:lr")))?;
                        Ok((parse(key, e.trim())?, parse(key, lr.trim())?))
                    })
                    .collect::<Result<_>>()?
            }
            "stem_lr_factor" => self.stem_lr_factor = parse(key, value)?,
            "wm_lr" => self.wm_lr = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "method" => self.method = value.parse()?,
            "lambda" => self.loss.lambda = parse(key, value)?,
            "triplet_margin" => self.loss.triplet_margin = parse(key, value)?,
            "adversarial_mode" => self.loss.adversarial_mode = value.parse()?,
            "normalize_modality_input" => self.loss.normalize_modality_input = parse_bool(key, value)?,
            "pooling" => self.pooling = value.parse()?,
            "shuffle_frames" => self.shuffle_frames = parse_bool(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "stage_channels" => {
                let v: Vec<usize> = value.split(',').map(|s| parse(key, s.trim())).collect::<Result<_>>()?;
                self.stage_channels = v
                    .try_into()
                    .map_err(|_| Error::Config("stage_channels needs exactly 5 entries".into()))?;
            }
            "se_reduction" => self.se_reduction = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines over the defaults; `#` starts a comment.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {raw:?}", no + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", no + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_text(&std::fs::read_to_string(path)?)
    }

    /// Every setting, one per line, in a form [`Self::parse_text`] reads back.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let drops: Vec<String> = self.lr_drops.iter().map(|(e, lr)| format!("{e}:{lr}")).collect();
        let channels: Vec<String> = self.stage_channels.iter().map(|c| c.to_string()).collect();
        let rows: [(&str, String); 24] = [
            ("epochs", self.epochs.to_string()),
            ("batch_identities", self.batch_identities.to_string()),
            ("tracklets_per_identity", self.tracklets_per_identity.to_string()),
            ("frames_per_tracklet", self.frames_per_tracklet.to_string()),
            ("base_lr", self.base_lr.to_string()),
            ("warmup_start_lr", self.warmup_start_lr.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("lr_drops", drops.join(",")),
            ("stem_lr_factor", self.stem_lr_factor.to_string()),
            ("wm_lr", self.wm_lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("momentum", self.momentum.to_string()),
            ("seed", self.seed.to_string()),
            ("method", self.method.name().to_string()),
            ("lambda", self.loss.lambda.to_string()),
            ("triplet_margin", self.loss.triplet_margin.to_string()),
            ("adversarial_mode", self.loss.adversarial_mode.name().to_string()),
            ("normalize_modality_input", self.loss.normalize_modality_input.to_string()),
            ("pooling", self.pooling.name().to_string()),
            ("shuffle_frames", self.shuffle_frames.to_string()),
            ("augment", self.augment.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("stage_channels", channels.join(",")),
            ("se_reduction", self.se_reduction.to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn aggregation(&self) -> Aggregation {
        self.method.aggregation(self.pooling)
    }

    pub fn adversarial_mode(&self) -> AdvMode {
        self.loss.adversarial_mode
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_roundtrip() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        assert_eq!(TrainConfig::parse_text(&cfg.to_text()).unwrap(), cfg);
        let mut other = cfg.clone();
        other.method = Method::BaselineT;
        other.lr_drops = vec![(20, 0.01)];
        other.shuffle_frames = true;
        other.loss.lambda = 0.05;
        assert_eq!(TrainConfig::parse_text(&other.to_text()).unwrap(), other);
    }

    #[test]
    fn parsing_rules() {
        let cfg = TrainConfig::parse_text("# desk run\nepochs = 30\n\nmethod=baseline+M  # ablation row\n").unwrap();
        assert_eq!(cfg.epochs, 30);
        assert_eq!(cfg.method, Method::BaselineM);
        assert!(TrainConfig::parse_text("epoch=3").is_err());
        assert!(TrainConfig::parse_text("epochs").is_err());
        assert!(TrainConfig::parse_text("frames_per_tracklet=5").is_err());
        assert!(TrainConfig::parse_text("tracklets_per_identity=3").is_err());
        assert!(TrainConfig::parse_text("method=full+X").is_err());
        assert!(TrainConfig::parse_text("lr_drops=80:0.01,35:0.001").is_err());
    }
}
