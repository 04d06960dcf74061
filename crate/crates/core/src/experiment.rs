//! Feature extraction, evaluation of trained models, the modality probe and
//! the ablation sweeps.

use std::fmt::Write as _;
use std::str::FromStr;

use log::info;

use crate::autodiff::Tape;
use crate::error::{invalid, Error, Result};
use crate::evalkit::{evaluate, Direction, EvalReport, Label, SweepRow};
use crate::losses::AdvMode;
use crate::network::{ModalClass, ModelParams};
use crate::scalar::Scalar;
use crate::synthdata::{Corpus, Split};
use crate::tensor::Tensor;
use crate::tmr::{encode, Aggregation, Pooling};
use crate::training::{eval_frames, time_major, Method, TrainConfig, Trainer};

/// Tracklets shorter than this are left out of evaluation.
pub const MIN_EVAL_FRAMES: usize = 12;

/// The discriminator-weight grid of the λ sweep.
pub const LAMBDA_GRID: [f64; 8] = [0.01, 0.05, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0];

/// Frames-per-tracklet values of the `n` sweep.
pub const N_FRAMES_GRID: [usize; 4] = [1, 2, 4, 6];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    /// Frames per tracklet, taken from the middle of equal chunks.
    pub frames: usize,
    /// Tracklets per forward pass.
    pub batch: usize,
    pub threads: usize,
}

impl EvalOptions {
    pub fn new(frames: usize) -> Self {
        Self {
            frames,
            batch: 16,
            threads: 1,
        }
    }
}

fn encode_chunk<S: Scalar>(
    model: &ModelParams<S>,
    aggregation: Aggregation,
    corpus: &Corpus,
    chunk: &[usize],
    frames: usize,
) -> Result<Tensor<S>> {
    let modality = corpus.tracklets[chunk[0]].modality;
    let clips = chunk
        .iter()
        .map(|&i| {
            let t = &corpus.tracklets[i];
            t.select::<S>(&eval_frames(t.frames, frames)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let tape = Tape::new();
    let bound = model.bind(&tape, |_| false);
    let f = encode(&bound, tape.constant(time_major(&clips)?), modality, frames, aggregation)?;
    Ok(f.value())
}

/// Sequence features `[N × D]` of the given tracklets, in input order.
///
/// Work is split into single-modality chunks; with `threads > 1` chunks are
/// encoded concurrently, and every chunk is computed the same way whatever
/// the thread count, so the result does not depend on it.
pub fn extract_features<S: Scalar>(
    model: &ModelParams<S>,
    aggregation: Aggregation,
    corpus: &Corpus,
    indices: &[usize],
    opts: &EvalOptions,
) -> Result<Tensor<S>> {
    if aggregation == Aggregation::Tmr && opts.frames != model.config().backbone.seq_len {
        return Err(invalid(format!(
            "TMR model expects {} frames per tracklet, not {}",
            model.config().backbone.seq_len,
            opts.frames
        )));
    }
    let d = model.config().backbone.embed_dim;
    if indices.is_empty() {
        return Tensor::new(vec![0, d], Vec::new());
    }
    let mut chunks: Vec<Vec<usize>> = Vec::new();
    for modality in [ModalClass::Rgb, ModalClass::Ir] {
        let of: Vec<usize> = (0..indices.len())
            .filter(|&k| corpus.tracklets[indices[k]].modality == modality)
            .collect();
        chunks.extend(of.chunks(opts.batch.max(1)).map(<[usize]>::to_vec));
    }
    let run = |chunk: &Vec<usize>| {
        let ids: Vec<usize> = chunk.iter().map(|&k| indices[k]).collect();
        encode_chunk(model, aggregation, corpus, &ids, opts.frames)
    };
    let results: Vec<Result<Tensor<S>>> = if opts.threads <= 1 {
        chunks.iter().map(run).collect()
    } else {
        let per = chunks.len().div_ceil(opts.threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunks
                .chunks(per)
                .map(|group| scope.spawn(move || group.iter().map(run).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("feature worker panicked"))
                .collect()
        })
    };
    let mut out = vec![S::zero(); indices.len() * d];
    for (chunk, feats) in chunks.iter().zip(results) {
        let feats = feats?;
        for (row, &k) in chunk.iter().enumerate() {
            out[k * d..(k + 1) * d].copy_from_slice(feats.row(row));
        }
    }
    Tensor::new(vec![indices.len(), d], out)
}

/// Evaluation tracklets of `split`, separated by modality.
pub fn split_by_modality(corpus: &Corpus, split: Split) -> (Vec<usize>, Vec<usize>) {
    corpus
        .indices(split, MIN_EVAL_FRAMES)
        .into_iter()
        .partition(|&i| corpus.tracklets[i].modality == ModalClass::Rgb)
}

fn labels(corpus: &Corpus, indices: &[usize]) -> Vec<Label> {
    indices
        .iter()
        .map(|&i| Label {
            identity: corpus.tracklets[i].identity,
            camera: corpus.tracklets[i].camera,
        })
        .collect()
}

/// Cross-modality retrieval on the test split.
pub fn evaluate_model<S: Scalar>(
    model: &ModelParams<S>,
    aggregation: Aggregation,
    corpus: &Corpus,
    directions: &[Direction],
    opts: &EvalOptions,
) -> Result<Vec<EvalReport>> {
    evaluate_split(model, aggregation, corpus, Split::Test, directions, opts)
}

/// Cross-modality retrieval among the tracklets of `split`.
pub fn evaluate_split<S: Scalar>(
    model: &ModelParams<S>,
    aggregation: Aggregation,
    corpus: &Corpus,
    split: Split,
    directions: &[Direction],
    opts: &EvalOptions,
) -> Result<Vec<EvalReport>> {
    let (rgb, ir) = split_by_modality(corpus, split);
    if rgb.is_empty() || ir.is_empty() {
        return Err(invalid(format!("{} split needs tracklets of both modalities", split.name())));
    }
    let fv = extract_features(model, aggregation, corpus, &rgb, opts)?;
    let fi = extract_features(model, aggregation, corpus, &ir, opts)?;
    let (lv, li) = (labels(corpus, &rgb), labels(corpus, &ir));
    directions
        .iter()
        .map(|&d| match d {
            Direction::IrToVis => evaluate(&fi, &li, &fv, &lv, d),
            Direction::VisToIr => evaluate(&fv, &lv, &fi, &li, d),
        })
        .collect()
}

/// Infrared-to-visible retrieval of one pooled model at several `n`.
pub fn n_frames_sweep<S: Scalar>(
    model: &ModelParams<S>,
    aggregation: Aggregation,
    corpus: &Corpus,
    ns: &[usize],
    opts: &EvalOptions,
) -> Result<Vec<SweepRow>> {
    if aggregation == Aggregation::Tmr {
        return Err(invalid("the n sweep needs a pooled model; TMR is fixed to its trained length"));
    }
    ns.iter()
        .map(|&n| {
            let o = EvalOptions { frames: n, ..*opts };
            let report = evaluate_model(model, aggregation, corpus, &[Direction::IrToVis], &o)?.remove(0);
            Ok(SweepRow { n, report })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeReport {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// L2-regularised logistic regression by full-batch gradient descent.
/// Returns `(w, b)` for inputs already standardised.
fn fit_logistic(x: &[Vec<f64>], y: &[f64], steps: usize, lr: f64, l2: f64) -> (Vec<f64>, f64) {
    let d = x[0].len();
    let (mut w, mut b) = (vec![0.0; d], 0.0);
    let n = x.len() as f64;
    for _ in 0..steps {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (xi, &yi) in x.iter().zip(y) {
            let z = b + xi.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let e = 1.0 / (1.0 + (-z).exp()) - yi;
            for (g, a) in gw.iter_mut().zip(xi) {
                *g += e * a;
            }
            gb += e;
        }
        for (wj, g) in w.iter_mut().zip(&gw) {
            *wj -= lr * (g / n + l2 * *wj);
        }
        b -= lr * gb / n;
    }
    (w, b)
}

/// Trains a linear modality classifier on frozen training-split sequence
/// features and reports its accuracy on the test split.
pub fn modality_probe<S: Scalar>(
    model: &ModelParams<S>,
    aggregation: Aggregation,
    corpus: &Corpus,
    opts: &EvalOptions,
) -> Result<ProbeReport> {
    let prepare = |split: Split| -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let idx = corpus.indices(split, MIN_EVAL_FRAMES);
        let f = extract_features(model, aggregation, corpus, &idx, opts)?;
        let x = (0..idx.len()).map(|r| f.row(r).iter().map(|v| v.as_f64()).collect()).collect();
        let y = idx
            .iter()
            .map(|&i| (corpus.tracklets[i].modality == ModalClass::Ir) as u8 as f64)
            .collect();
        Ok((x, y))
    };
    let (mut xtr, ytr) = prepare(Split::Train)?;
    let (mut xte, yte) = prepare(Split::Test)?;
    if xtr.is_empty() || xte.is_empty() {
        return Err(invalid("probe needs tracklets in both splits"));
    }
    let d = xtr[0].len();
    let n = xtr.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| xtr.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..d)
        .map(|j| (xtr.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt().max(1e-8))
        .collect();
    for row in xtr.iter_mut().chain(xte.iter_mut()) {
        for j in 0..d {
            row[j] = (row[j] - mean[j]) / std[j];
        }
    }
    let (w, b) = fit_logistic(&xtr, &ytr, 2000, 0.5, 1e-3);
    let accuracy = |x: &[Vec<f64>], y: &[f64]| {
        let hits = x
            .iter()
            .zip(y)
            .filter(|(r, &t)| {
                let z = b + r.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
                (z > 0.0) == (t > 0.5)
            })
            .count();
        hits as f64 / x.len() as f64
    };
    Ok(ProbeReport {
        train_accuracy: accuracy(&xtr, &ytr),
        test_accuracy: accuracy(&xte, &yte),
    })
}

/// Result of one training run followed by evaluation.
pub struct RunResult<S> {
    pub model: ModelParams<S>,
    pub aggregation: Aggregation,
    pub reports: Vec<EvalReport>,
}

impl<S> RunResult<S> {
    pub fn report(&self, direction: Direction) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.direction == direction)
    }
}

/// Trains `cfg` in memory and evaluates both directions at the training `n`.
pub fn train_and_evaluate<S: Scalar>(cfg: &TrainConfig, corpus: &Corpus, threads: usize) -> Result<RunResult<S>> {
    let mut trainer = Trainer::<S>::new(cfg.clone(), corpus)?;
    trainer.run()?;
    let aggregation = trainer.aggregation();
    let opts = EvalOptions {
        threads,
        ..EvalOptions::new(cfg.frames_per_tracklet)
    };
    let model = trainer.model().clone();
    let reports = evaluate_model(&model, aggregation, corpus, &Direction::BOTH, &opts)?;
    Ok(RunResult {
        model,
        aggregation,
        reports,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sweep {
    Lambda,
    Pooling,
    AdvMode,
    NFrames,
    Methods,
}

impl Sweep {
    pub const ALL: [Sweep; 5] = [Sweep::Lambda, Sweep::Pooling, Sweep::AdvMode, Sweep::NFrames, Sweep::Methods];

    pub fn name(self) -> &'static str {
        match self {
            Self::Lambda => "lambda",
            Self::Pooling => "pooling",
            Self::AdvMode => "adv-mode",
            Self::NFrames => "n-frames",
            Self::Methods => "methods",
        }
    }

    /// `(setting label, config)` for every row of the sweep.
    pub fn settings(self, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
        let with = |f: &dyn Fn(&mut TrainConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            Self::Lambda => LAMBDA_GRID
                .iter()
                .map(|&l| {
                    (
                        l.to_string(),
                        with(&|c| {
                            c.method = Method::Full;
                            c.loss.lambda = l;
                        }),
                    )
                })
                .collect(),
            Self::Pooling => {
                let pooled = if base.method.adversarial() { Method::BaselineM } else { Method::Baseline };
                let tmr = if base.method.adversarial() { Method::Full } else { Method::BaselineT };
                let mut rows: Vec<(String, TrainConfig)> = Pooling::ALL
                    .iter()
                    .map(|&p| {
                        (
                            p.name().to_string(),
                            with(&|c| {
                                c.method = pooled;
                                c.pooling = p;
                            }),
                        )
                    })
                    .collect();
                rows.push(("tmr".into(), with(&|c| c.method = tmr)));
                rows
            }
            Self::AdvMode => AdvMode::ALL
                .iter()
                .map(|&m| {
                    (
                        m.name().to_string(),
                        with(&|c| {
                            c.method = Method::Full;
                            c.loss.adversarial_mode = m;
                        }),
                    )
                })
                .collect(),
            Self::NFrames => N_FRAMES_GRID
                .iter()
                .map(|&n| {
                    (
                        n.to_string(),
                        with(&|c| {
                            c.method = Method::Baseline;
                            c.frames_per_tracklet = n;
                        }),
                    )
                })
                .collect(),
            Self::Methods => {
                let mut rows: Vec<(String, TrainConfig)> = Method::ALL
                    .iter()
                    .map(|&m| (m.name().to_string(), with(&|c| c.method = m)))
                    .collect();
                rows.push((
                    "full+shuffled".into(),
                    with(&|c| {
                        c.method = Method::Full;
                        c.shuffle_frames = true;
                    }),
                ));
                rows
            }
        }
    }
}

impl FromStr for Sweep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|w| w.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown sweep {s:?}")))
    }
}

/// One evaluated sweep setting.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepEntry {
    pub setting: String,
    pub reports: Vec<EvalReport>,
}

/// Trains and evaluates every setting of `sweep` from `base`.
pub fn run_sweep<S: Scalar>(sweep: Sweep, base: &TrainConfig, corpus: &Corpus, threads: usize) -> Result<Vec<SweepEntry>> {
    sweep
        .settings(base)
        .into_iter()
        .map(|(setting, cfg)| {
            info!("{} sweep: {setting}", sweep.name());
            let r = train_and_evaluate::<S>(&cfg, corpus, threads)?;
            Ok(SweepEntry {
                setting,
                reports: r.reports,
            })
        })
        .collect()
}

pub const SWEEP_CSV_HEADER: &str = "setting,direction,r1,r5,r10,r20,map,num_queries";

pub fn sweep_csv(entries: &[SweepEntry]) -> String {
    let mut s = format!("{SWEEP_CSV_HEADER}\n");
    for e in entries {
        for r in &e.reports {
            let _ = writeln!(s, "{},{}", e.setting, r.csv_row());
        }
    }
    s
}
