//! Temporal Memory Refinement: per-frame channel attention from an LSTM
//! context, and attention-refined aggregation into a sequence feature.
//!
//! Sequences are time-major: frame features are `[T × B × D]` (a bare
//! `[T × D]` is treated as `B = 1`), and raw frames are `[T·B × 3 × H × W]`
//! with frame `t` of tracklet `b` at row `t·B + b`.

use crate::autodiff::Var;
use crate::error::{invalid, Error, Result};
use crate::network::{backbone_forward, lstm2_forward, se_gate, Bound, ModalClass};
use crate::scalar::Scalar;

/// Attention `a` of shape `[T × B × D]`, every entry in `(0, 1)`.
pub fn tmr_attention<'t, S: Scalar>(p: &Bound<'t, S>, f1: Var<'t, S>) -> Result<Var<'t, S>> {
    let (f1, squeeze) = as_sequence("tmr_attention", f1)?;
    let steps = f1.shape()[0];
    let expected = p.config().backbone.seq_len;
    if steps != expected {
        return Err(invalid(format!(
            "TMR is built for {expected} frames per tracklet, got {steps}"
        )));
    }
    let h = lstm2_forward(p, f1)?;
    let half = S::lit(0.5);
    let mut gates = Vec::with_capacity(steps);
    for t in 0..steps {
        let refined = p.linear(&format!("tmr.fc.{t}"), h.take(0, t)?)?;
        let u = refined.add(f1.take(0, t)?)?.scale(half);
        gates.push(se_gate(p, &format!("tmr.se.{t}"), u)?);
    }
    let a = Var::stack(&gates)?;
    if squeeze {
        a.reshape(vec![steps, a.shape()[2]])
    } else {
        Ok(a)
    }
}

/// `F = (1/T) Σ_t (aᵗ ⊙ f2ᵗ + f2ᵗ)`; returns `[B × D]`, or `[D]` for `[T × D]` inputs.
pub fn tmr_aggregate<'t, S: Scalar>(a: Var<'t, S>, f2: Var<'t, S>) -> Result<Var<'t, S>> {
    if a.shape() != f2.shape() {
        return Err(Error::ShapeMismatch {
            op: "tmr_aggregate",
            lhs: a.shape(),
            rhs: f2.shape(),
        });
    }
    a.mul(f2)?.add(f2)?.mean_axis(0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Pooling {
    Average,
    Max,
    /// Frame weights are the softmax over time of each frame's channel mean.
    SoftmaxWeighted,
}

impl Pooling {
    pub const ALL: [Pooling; 3] = [Pooling::Average, Pooling::Max, Pooling::SoftmaxWeighted];

    pub fn name(self) -> &'static str {
        match self {
            Self::Average => "average",
            Self::Max => "max",
            Self::SoftmaxWeighted => "softmax_weighted",
        }
    }
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| invalid(format!("unknown pooling mode {s:?}")))
    }
}

/// Pools `[T × B × D]` (or `[T × D]`) frame features over time.
pub fn pool_frames<'t, S: Scalar>(f: Var<'t, S>, pooling: Pooling) -> Result<Var<'t, S>> {
    if f.shape().len() < 2 {
        return Err(Error::InvalidShape {
            op: "pool_frames",
            shape: f.shape(),
            reason: "expected [T, D] or [T, B, D]".into(),
        });
    }
    match pooling {
        Pooling::Average => f.mean_axis(0),
        Pooling::Max => f.max_axis(0),
        Pooling::SoftmaxWeighted => {
            let last = f.shape().len() - 1;
            let weights = f.mean_axis(last)?.softmax(0)?;
            f.scale_rows(weights)?.sum_axis(0)
        }
    }
}

/// How frame features become a sequence feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    Tmr,
    Pool(Pooling),
}

/// Frame-level features of a time-major frame batch, each `[T × B × D]`.
pub struct FrameFeatures<'t, S> {
    pub f1: Var<'t, S>,
    pub f2: Var<'t, S>,
}

pub fn frame_features<'t, S: Scalar>(
    p: &Bound<'t, S>,
    frames: Var<'t, S>,
    modality: ModalClass,
    steps: usize,
) -> Result<FrameFeatures<'t, S>> {
    let n = frames.shape()[0];
    if steps == 0 || !n.is_multiple_of(steps) {
        return Err(invalid(format!("{n} frames do not split into sequences of {steps}")));
    }
    let (f1, f2) = backbone_forward(p, frames, modality)?;
    let d = f1.shape()[1];
    let shape = vec![steps, n / steps, d];
    Ok(FrameFeatures {
        f1: f1.reshape(shape.clone())?,
        f2: f2.reshape(shape)?,
    })
}

/// Encodes `B` tracklets of `steps` frames each into `[B × D]` features.
pub fn encode<'t, S: Scalar>(
    p: &Bound<'t, S>,
    frames: Var<'t, S>,
    modality: ModalClass,
    steps: usize,
    aggregation: Aggregation,
) -> Result<Var<'t, S>> {
    let ff = frame_features(p, frames, modality, steps)?;
    match aggregation {
        Aggregation::Tmr => tmr_aggregate(tmr_attention(p, ff.f1)?, ff.f2),
        Aggregation::Pool(pooling) => pool_frames(ff.f2, pooling),
    }
}

fn as_sequence<'t, S: Scalar>(op: &'static str, x: Var<'t, S>) -> Result<(Var<'t, S>, bool)> {
    let s = x.shape();
    match s.len() {
        2 => Ok((x.reshape(vec![s[0], 1, s[1]])?, true)),
        3 => Ok((x, false)),
        _ => Err(Error::InvalidShape {
            op,
            shape: s,
            reason: "expected [T, D] or [T, B, D]".into(),
        }),
    }
}
