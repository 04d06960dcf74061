//! The alternating two-phase training loop, checkpoints and loss logs.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{error, info};
use rand::seq::SliceRandom;
use rand::Rng;

use super::config::TrainConfig;
use super::optim::Sgd;
use super::sampler::{chunk_frames, epoch_batches, time_major, PkBatch, TrainSet};
use super::schedule::{lr_at, Rates};
use crate::autodiff::{Gradients, Tape};
use crate::error::{invalid, Error, Result};
use crate::losses::{adv_discriminator_loss, baseline_objective, id_objective, modality_input, FeatureBatch};
use crate::network::{read_checkpoint, write_checkpoint, BackboneConfig, Bound, ModalClass, ModelConfig, ModelParams, ParamGroup};
use crate::scalar::Scalar;
use crate::seeding::{domain, stream_rng};
use crate::synthdata::{augment, Corpus};
use crate::tensor::Tensor;
use crate::tmr::{encode, Aggregation, Pooling};

pub const LOSSES_FILE: &str = "losses.csv";
pub const CONFIG_FILE: &str = "config.txt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Loss values of one optimisation step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub epoch: usize,
    pub step: usize,
    /// Encoder-side adversarial loss (0 for non-adversarial methods).
    pub adv1: f64,
    /// Discriminator loss (0 for non-adversarial methods).
    pub adv2: f64,
    pub ce: f64,
    pub tri: f64,
    pub total: f64,
}

impl StepLosses {
    pub const CSV_HEADER: &'static str = "epoch,step,L_adv1,L_adv2,L_ce,L_tri,L_total";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.step, self.adv1, self.adv2, self.ce, self.tri, self.total
        )
    }
}

/// Model configuration implied by a training config and frame size.
pub fn model_config(cfg: &TrainConfig, height: usize, width: usize, num_identities: usize) -> ModelConfig {
    let mut mc = ModelConfig::new(
        BackboneConfig {
            stage_channels: cfg.stage_channels,
            input_channels: 3,
            height,
            width,
            embed_dim: cfg.stage_channels[4],
            seq_len: cfg.frames_per_tracklet,
        },
        num_identities,
    );
    mc.se_reduction = cfg.se_reduction;
    mc
}

fn aggregation_code(a: Aggregation) -> f64 {
    match a {
        Aggregation::Tmr => 0.0,
        Aggregation::Pool(Pooling::Average) => 1.0,
        Aggregation::Pool(Pooling::Max) => 2.0,
        Aggregation::Pool(Pooling::SoftmaxWeighted) => 3.0,
    }
}

fn aggregation_from_code(c: f64) -> Result<Aggregation> {
    Ok(match c as i64 {
        0 => Aggregation::Tmr,
        1 => Aggregation::Pool(Pooling::Average),
        2 => Aggregation::Pool(Pooling::Max),
        3 => Aggregation::Pool(Pooling::SoftmaxWeighted),
        _ => return Err(Error::Format(format!("unknown aggregation code {c}"))),
    })
}

/// Entries describing the model so a checkpoint can be evaluated on its own.
pub fn meta_entries<S: Scalar>(config: &ModelConfig, aggregation: Aggregation) -> Vec<(String, Tensor<S>)> {
    let b = &config.backbone;
    let v = |xs: &[usize]| Tensor::from_vec(xs.iter().map(|&x| S::lit(x as f64)).collect());
    vec![
        ("meta.stage_channels".into(), v(&b.stage_channels)),
        ("meta.input".into(), v(&[b.input_channels, b.height, b.width])),
        ("meta.seq_len".into(), v(&[b.seq_len])),
        ("meta.num_identities".into(), v(&[config.num_identities])),
        ("meta.se_reduction".into(), v(&[config.se_reduction])),
        ("meta.aggregation".into(), Tensor::from_vec(vec![S::lit(aggregation_code(aggregation))])),
    ]
}

/// A checkpoint read back from disk.
pub struct Checkpoint<S> {
    pub model: ModelParams<S>,
    pub aggregation: Aggregation,
    pub entries: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn load(path: &Path) -> Result<Self> {
        let entries = read_checkpoint::<S>(path)?;
        let meta = |name: &str| -> Result<Vec<usize>> {
            let t = entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))?;
            Ok(t.data().iter().map(|x| x.as_f64() as usize).collect())
        };
        let stages: [usize; 5] = meta("meta.stage_channels")?
            .try_into()
            .map_err(|_| Error::Format("meta.stage_channels needs 5 entries".into()))?;
        let input = meta("meta.input")?;
        if input.len() != 3 {
            return Err(Error::Format("meta.input needs 3 entries".into()));
        }
        let mut config = ModelConfig::new(
            BackboneConfig {
                stage_channels: stages,
                input_channels: input[0],
                height: input[1],
                width: input[2],
                embed_dim: stages[4],
                seq_len: meta("meta.seq_len")?[0],
            },
            meta("meta.num_identities")?[0],
        );
        config.se_reduction = meta("meta.se_reduction")?[0];
        let aggregation = aggregation_from_code(meta("meta.aggregation")?[0] as f64)?;
        let mut model = ModelParams::init(config, &mut stream_rng(0, domain::INIT, 0))?;
        model.load_entries(&entries)?;
        Ok(Self {
            model,
            aggregation,
            entries,
        })
    }

    pub fn scalar_entry(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t.data()[0].as_f64())
    }
}

/// Mutable training state over one corpus.
pub struct Trainer<'c, S> {
    cfg: TrainConfig,
    corpus: &'c Corpus,
    set: TrainSet,
    model: ModelParams<S>,
    opt: Sgd<S>,
    epoch: usize,
    step: usize,
}

fn check_finite(context: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: context.into(),
            index: 0,
        })
    }
}

fn collect_grads<'t, S: Scalar>(bound: &Bound<'t, S>, grads: &Gradients<S>) -> Result<Vec<(usize, Tensor<S>)>> {
    let mut out = Vec::new();
    for (i, (name, var)) in bound.named_vars().enumerate() {
        if let Some(g) = grads.get(var) {
            if let Some(bad) = g.data().iter().position(|x| !x.as_f64().is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("gradient of {name}"),
                    index: bad,
                });
            }
            out.push((i, g));
        }
    }
    Ok(out)
}

impl<'c, S: Scalar> Trainer<'c, S> {
    pub fn new(cfg: TrainConfig, corpus: &'c Corpus) -> Result<Self> {
        cfg.validate()?;
        let set = TrainSet::from_corpus(corpus, cfg.frames_per_tracklet)?;
        let (h, w) = corpus.frame_size().ok_or_else(|| invalid("empty corpus"))?;
        let mc = model_config(&cfg, h, w, set.num_classes());
        let model = ModelParams::init(mc, &mut stream_rng(cfg.seed, domain::INIT, 0))?;
        let opt = Sgd::new(&model, cfg.momentum, cfg.weight_decay);
        Ok(Self {
            cfg,
            corpus,
            set,
            model,
            opt,
            epoch: 0,
            step: 0,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::save`] under the same config.
    pub fn resume(cfg: TrainConfig, corpus: &'c Corpus, path: &Path) -> Result<Self> {
        let mut t = Self::new(cfg, corpus)?;
        let ck = Checkpoint::<S>::load(path)?;
        if ck.model.config() != t.model.config() || ck.aggregation != t.cfg.aggregation() {
            return Err(Error::Config("checkpoint was written for a different model".into()));
        }
        t.model = ck.model.clone();
        let names: Vec<String> = t.model.names().to_vec();
        for (i, name) in names.iter().enumerate() {
            let key = format!("momentum/{name}");
            let buf = ck
                .entries
                .iter()
                .find(|(n, _)| *n == key)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks {key}")))?;
            t.opt.set_buffer(i, buf.1.clone())?;
        }
        t.epoch = ck.scalar_entry("train.epoch").ok_or_else(|| Error::Format("checkpoint lacks train.epoch".into()))? as usize;
        t.step = ck.scalar_entry("train.step").ok_or_else(|| Error::Format("checkpoint lacks train.step".into()))? as usize;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &ModelParams<S> {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut ModelParams<S> {
        &mut self.model
    }

    pub fn optimizer(&self) -> &Sgd<S> {
        &self.opt
    }

    pub fn train_set(&self) -> &TrainSet {
        &self.set
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn aggregation(&self) -> Aggregation {
        self.cfg.aggregation()
    }

    pub fn checkpoint_entries(&self) -> Vec<(String, Tensor<S>)> {
        let mut e = self.model.entries();
        for ((name, _), buf) in self.model.iter().zip(self.opt.buffers()) {
            e.push((format!("momentum/{name}"), buf.clone()));
        }
        e.push(("train.epoch".into(), Tensor::scalar(S::lit(self.epoch as f64))));
        e.push(("train.step".into(), Tensor::scalar(S::lit(self.step as f64))));
        e.extend(meta_entries(self.model.config(), self.aggregation()));
        e
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.checkpoint_entries())
    }

    /// Sampled, augmented clips of `tracklets`, time-major.
    fn clips<R: Rng + ?Sized>(&self, tracklets: &[usize], rng: &mut R) -> Result<Tensor<S>> {
        let n = self.cfg.frames_per_tracklet;
        let clips = tracklets
            .iter()
            .map(|&i| {
                let t = &self.corpus.tracklets[i];
                let mut idx = chunk_frames(t.frames, n, rng)?;
                if self.cfg.shuffle_frames {
                    idx.shuffle(rng);
                }
                augment(&t.select::<S>(&idx)?, rng, self.cfg.augment)
            })
            .collect::<Result<Vec<_>>>()?;
        time_major(&clips)
    }

    /// One step: the discriminator update on detached features, then the
    /// encoder and identity-head update against the updated discriminator.
    pub fn train_step<R: Rng + ?Sized>(&mut self, batch: &PkBatch, rates: Rates, rng: &mut R) -> Result<StepLosses> {
        let n = self.cfg.frames_per_tracklet;
        let agg = self.aggregation();
        let xv = self.clips(&batch.rgb, rng)?;
        let xi = self.clips(&batch.ir, rng)?;

        let tape = Tape::new();
        let mut bound = self.model.bind(&tape, |g| g != ParamGroup::WM);
        let fv = encode(&bound, tape.constant(xv), ModalClass::Rgb, n, agg)?;
        let fi = encode(&bound, tape.constant(xi), ModalClass::Ir, n, agg)?;

        let mut adv2 = 0.0;
        if self.cfg.method.adversarial() {
            let dtape = Tape::new();
            let dbound = self.model.bind(&dtape, |g| g == ParamGroup::WM);
            let loss = adv_discriminator_loss(
                &dbound,
                modality_input(dtape.constant(fv.value()), &self.cfg.loss)?,
                modality_input(dtape.constant(fi.value()), &self.cfg.loss)?,
                self.cfg.adversarial_mode(),
            )?;
            adv2 = loss.item().as_f64();
            check_finite("L_adv2", adv2)?;
            let grads = collect_grads(&dbound, &dtape.backward(loss)?)?;
            self.opt.step(&mut self.model, &grads, |_| rates.wm)?;
            for name in ["w_m.weight", "w_m.bias"] {
                let updated = self.model.get(name).expect("discriminator parameter").clone();
                bound.replace(name, tape.constant(updated))?;
            }
        }

        let fb = FeatureBatch {
            fv,
            fi,
            ids_v: &batch.labels,
            ids_i: &batch.labels,
        };
        let terms = if self.cfg.method.adversarial() {
            id_objective(&bound, &fb, &self.cfg.loss)?
        } else {
            baseline_objective(&bound, &fb, self.cfg.loss.triplet_margin)?
        };
        let total = terms.total.item().as_f64();
        check_finite("L_total", total)?;
        let grads = collect_grads(&bound, &tape.backward(terms.total)?)?;
        self.opt
            .step(&mut self.model, &grads, |g| if g.is_stem() { rates.stem } else { rates.main })?;
        self.step += 1;
        Ok(StepLosses {
            epoch: self.epoch + 1,
            step: self.step,
            adv1: terms.adv.item().as_f64(),
            adv2,
            ce: terms.ce.item().as_f64(),
            tri: terms.tri.item().as_f64(),
            total,
        })
    }

    /// Runs the next epoch; its batches and augmentation depend only on the
    /// seed and the epoch number.
    pub fn run_epoch(&mut self) -> Result<Vec<StepLosses>> {
        let epoch = self.epoch + 1;
        let rates = lr_at(epoch, &self.cfg)?;
        let mut rng = stream_rng(self.cfg.seed, domain::EPOCH, epoch as u64);
        let batches = epoch_batches(
            &self.set,
            self.cfg.batch_identities,
            self.cfg.tracklets_per_identity,
            &mut rng,
        )?;
        if batches.is_empty() {
            return Err(invalid(format!(
                "training split cannot fill a batch of {} identities",
                self.cfg.batch_identities
            )));
        }
        let mut out = Vec::with_capacity(batches.len());
        for b in &batches {
            match self.train_step(b, rates, &mut rng) {
                Ok(l) => out.push(l),
                Err(e) => {
                    if matches!(e, Error::NonFinite { .. }) {
                        for (name, norm) in self.model.norms() {
                            error!("{name}: |p| = {norm}");
                        }
                    }
                    return Err(e);
                }
            }
        }
        self.epoch = epoch;
        Ok(out)
    }

    /// Trains to `cfg.epochs` without writing anything.
    pub fn run(&mut self) -> Result<Vec<StepLosses>> {
        let mut all = Vec::new();
        while self.epoch < self.cfg.epochs {
            all.extend(self.run_epoch()?);
        }
        Ok(all)
    }

    /// Trains to `cfg.epochs`, writing the config, per-step losses,
    /// periodic checkpoints and `final.ckpt` into `out`.
    pub fn fit(&mut self, out: &Path) -> Result<PathBuf> {
        fs::create_dir_all(out)?;
        fs::write(out.join(CONFIG_FILE), self.cfg.to_text())?;
        let log_path = out.join(LOSSES_FILE);
        let mut log = if self.epoch > 0 && log_path.exists() {
            BufWriter::new(OpenOptions::new().append(true).open(&log_path)?)
        } else {
            let mut w = BufWriter::new(File::create(&log_path)?);
            writeln!(w, "{}", StepLosses::CSV_HEADER)?;
            w
        };
        while self.epoch < self.cfg.epochs {
            let losses = self.run_epoch()?;
            for l in &losses {
                writeln!(log, "{}", l.csv_row())?;
            }
            log.flush()?;
            let mean = losses.iter().map(|l| l.total).sum::<f64>() / losses.len() as f64;
            info!("epoch {} steps {} mean L_total {mean:.4}", self.epoch, losses.len());
            if self.cfg.checkpoint_every > 0 && self.epoch.is_multiple_of(self.cfg.checkpoint_every) {
                self.save(&out.join(format!("epoch_{:04}.ckpt", self.epoch)))?;
            }
        }
        let path = out.join(FINAL_CHECKPOINT);
        self.save(&path)?;
        Ok(path)
    }
}
