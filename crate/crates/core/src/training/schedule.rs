//! Learning-rate schedule.

use super::config::TrainConfig;
use crate::error::{invalid, Result};

/// Rates in effect during one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rates {
    /// Shared trunk, branches, TMR and identity head.
    pub main: f64,
    /// Modality-specific stems.
    pub stem: f64,
    /// Modality discriminator.
    pub wm: f64,
}

/// Rates for `epoch`, counted from 1.
///
/// Linear warmup from `warmup_start_lr` to `base_lr` over the first
/// `warmup_epochs` epochs, then step drops after each listed epoch.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<Rates> {
    if epoch == 0 || epoch > cfg.epochs {
        return Err(invalid(format!("epoch {epoch} outside 1..={}", cfg.epochs)));
    }
    let w = cfg.warmup_epochs;
    let main = if epoch <= w {
        if w <= 1 {
            cfg.base_lr
        } else {
            let t = (epoch - 1) as f64 / (w - 1) as f64;
            cfg.warmup_start_lr * (1.0 - t) + cfg.base_lr * t
        }
    } else {
        cfg.lr_drops
            .iter()
            .rev()
            .find(|&&(at, _)| epoch > at)
            .map_or(cfg.base_lr, |&(_, lr)| lr)
    };
    Ok(Rates {
        main,
        stem: main * cfg.stem_lr_factor,
        wm: cfg.wm_lr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn non_increasing_after_warmup(
            base in 1e-4f64..1.0,
            drops in proptest::collection::vec((10usize..200, 0.0f64..1.0), 0..4),
            epochs in 11usize..200,
        ) {
            let mut drops = drops;
            drops.sort_by_key(|d| d.0);
            drops.dedup_by_key(|d| d.0);
            let mut level = base;
            for d in drops.iter_mut() {
                d.1 *= level;
                level = d.1;
            }
            let cfg = TrainConfig { base_lr: base, lr_drops: drops, epochs, ..TrainConfig::default() };
            prop_assume!(cfg.validate().is_ok());
            for e in 10..epochs {
                prop_assert!(lr_at(e + 1, &cfg).unwrap().main <= lr_at(e, &cfg).unwrap().main);
            }
        }
    }

    #[test]
    fn default_schedule_points() {
        let cfg = TrainConfig::default();
        let main = |e| lr_at(e, &cfg).unwrap().main;
        assert!((main(1) - 0.01).abs() < 1e-15);
        assert!((main(5) - 0.05).abs() < 1e-15);
        assert!((main(10) - 0.1).abs() < 1e-15);
        assert_eq!(main(11), 0.1);
        assert_eq!(main(35), 0.1);
        assert_eq!(main(36), 0.01);
        assert_eq!(main(80), 0.01);
        assert_eq!(main(81), 0.001);
        assert_eq!(main(200), 0.001);
        let r = lr_at(36, &cfg).unwrap();
        assert!((r.stem - 0.001).abs() < 1e-15);
        assert_eq!(r.wm, 0.01);
        assert!(lr_at(0, &cfg).is_err());
        assert!(lr_at(201, &cfg).is_err());
        let raising = TrainConfig { lr_drops: vec![(35, 0.01), (80, 0.05)], ..TrainConfig::default() };
        assert!(raising.validate().is_err());
        let early = TrainConfig { lr_drops: vec![(5, 0.01)], ..TrainConfig::default() };
        assert!(early.validate().is_err());
    }
}
