//! Training objectives: identity cross-entropy, batch-hard triplet, the
//! encoder-side and discriminator-side modality losses, and their
//! weighted combination.

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::network::{classify, Bound, Head, ModalClass};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Norm floor for feature normalisation ahead of the triplet term.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AdvMode {
    /// Push both modalities toward the "neither" class.
    ThreeClass,
    /// Push each modality toward the other one's label.
    InverseLabel,
    /// Push a two-way head toward equal RGB/IR probability.
    UniformTarget,
}

impl AdvMode {
    pub const ALL: [AdvMode; 3] = [AdvMode::ThreeClass, AdvMode::InverseLabel, AdvMode::UniformTarget];

    pub fn name(self) -> &'static str {
        match self {
            Self::ThreeClass => "three_class",
            Self::InverseLabel => "inverse_label",
            Self::UniformTarget => "uniform_target",
        }
    }

    /// Number of `w_m` outputs the mode reads (leading rows of the head).
    pub fn head_classes(self) -> usize {
        match self {
            Self::UniformTarget => 2,
            _ => 3,
        }
    }
}

impl std::str::FromStr for AdvMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid(format!("unknown adversarial mode {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub triplet_margin: f64,
    pub adversarial_mode: AdvMode,
    /// L2-normalize features before the modality head.
    pub normalize_modality_input: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.4,
            triplet_margin: 0.3,
            adversarial_mode: AdvMode::ThreeClass,
            normalize_modality_input: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.triplet_margin >= 0.0) {
            return Err(Error::Config(format!("triplet margin must be >= 0, got {}", self.triplet_margin)));
        }
        Ok(())
    }
}

/// Features as seen by the modality head under `cfg`.
pub fn modality_input<'t, S: Scalar>(f: Var<'t, S>, cfg: &LossConfig) -> Result<Var<'t, S>> {
    if cfg.normalize_modality_input {
        f.l2_normalize(1, S::lit(NORM_EPS))
    } else {
        Ok(f)
    }
}

fn as_rows<'t, S: Scalar>(logits: Var<'t, S>) -> Result<Var<'t, S>> {
    let s = logits.shape();
    match s.len() {
        1 => logits.reshape(vec![1, s[0]]),
        2 => Ok(logits),
        _ => Err(Error::InvalidShape {
            op: "cross_entropy",
            shape: s,
            reason: "expected [K] or [B, K] logits".into(),
        }),
    }
}

/// Mean over rows of `−log softmax(logits)[target]`.
pub fn cross_entropy<'t, S: Scalar>(logits: Var<'t, S>, targets: &[usize]) -> Result<Var<'t, S>> {
    let logits = as_rows(logits)?;
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    if k < 2 {
        return Err(invalid("cross-entropy needs at least two classes"));
    }
    if targets.len() != b {
        return Err(invalid(format!("{} targets for {b} rows", targets.len())));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
        return Err(invalid(format!("target {bad} out of range for {k} classes")));
    }
    let flat: Vec<usize> = targets.iter().enumerate().map(|(i, &t)| i * k + t).collect();
    Ok(logits.log_softmax(1)?.gather(&flat)?.mean().scale(-S::one()))
}

/// Mean over rows of `−Σ_k p_k log softmax(logits)_k`. `probs` is either
/// one distribution shared by every row or one per row.
pub fn cross_entropy_soft<'t, S: Scalar>(logits: Var<'t, S>, probs: &Tensor<S>) -> Result<Var<'t, S>> {
    let logits = as_rows(logits)?;
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    if k < 2 {
        return Err(invalid("cross-entropy needs at least two classes"));
    }
    let full = if probs.shape() == [k] {
        Tensor::new(vec![b, k], probs.data().repeat(b))?
    } else if probs.shape() == [b, k] {
        probs.clone()
    } else {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy_soft",
            lhs: vec![b, k],
            rhs: probs.shape().to_vec(),
        });
    };
    let weighted = logits.log_softmax(1)?.mul(logits.tape().constant(full))?;
    Ok(weighted.sum().scale(-S::one() / S::lit(b as f64)))
}

/// Batch-hard triplet loss on the features as given (callers normalise).
/// Anchors whose identity has no other sample in the batch are skipped.
pub fn triplet_loss<'t, S: Scalar>(features: Var<'t, S>, ids: &[usize], margin: S) -> Result<Var<'t, S>> {
    let shape = features.shape();
    if shape.len() != 2 || shape[0] != ids.len() {
        return Err(Error::InvalidShape {
            op: "triplet_loss",
            shape,
            reason: format!("expected [{}, D] features", ids.len()),
        });
    }
    let n = ids.len();
    if ids.iter().all(|&i| i == ids[0]) {
        return Err(invalid("triplet loss needs at least two identities"));
    }
    let dist = features.pairwise_distances()?;
    let d = dist.value();
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for a in 0..n {
        let row = &d.data()[a * n..(a + 1) * n];
        let hardest_pos = (0..n)
            .filter(|&j| j != a && ids[j] == ids[a])
            .fold(None, |best: Option<usize>, j| match best {
                Some(b) if row[b] >= row[j] => Some(b),
                _ => Some(j),
            });
        let Some(p) = hardest_pos else { continue };
        let hardest_neg = (0..n)
            .filter(|&j| ids[j] != ids[a])
            .fold(None, |best: Option<usize>, j| match best {
                Some(b) if row[b] <= row[j] => Some(b),
                _ => Some(j),
            })
            .expect("two identities present");
        pos.push(a * n + p);
        neg.push(a * n + hardest_neg);
    }
    if pos.is_empty() {
        return Err(invalid("triplet loss needs an identity with at least two samples"));
    }
    let gap = dist.gather(&pos)?.sub(dist.gather(&neg)?)?;
    Ok(gap.add_scalar(margin).relu().mean())
}

/// `w_m` logits with the head frozen: gradients reach the features only.
fn frozen_modality_logits<'t, S: Scalar>(p: &Bound<'t, S>, f: Var<'t, S>, classes: usize) -> Result<Var<'t, S>> {
    let w = p.var("w_m.weight")?.detach();
    let b = p.var("w_m.bias")?.detach();
    let logits = f.matmul(w.transpose()?)?.add_bias(b)?;
    restrict(logits, classes)
}

fn restrict<'t, S: Scalar>(logits: Var<'t, S>, classes: usize) -> Result<Var<'t, S>> {
    if classes == logits.shape()[1] {
        Ok(logits)
    } else {
        logits.slice_last(0, classes)
    }
}

fn labels(n: usize, class: ModalClass) -> Vec<usize> {
    vec![class.index(); n]
}

/// Encoder-side modality loss on RGB features `fv` and IR features `fi`.
pub fn adv_encoder_loss<'t, S: Scalar>(
    p: &Bound<'t, S>,
    fv: Var<'t, S>,
    fi: Var<'t, S>,
    mode: AdvMode,
) -> Result<Var<'t, S>> {
    let classes = mode.head_classes();
    let lv = frozen_modality_logits(p, fv, classes)?;
    let li = frozen_modality_logits(p, fi, classes)?;
    let (nv, ni) = (fv.shape()[0], fi.shape()[0]);
    match mode {
        AdvMode::ThreeClass => cross_entropy(lv, &labels(nv, ModalClass::Neither))?
            .add(cross_entropy(li, &labels(ni, ModalClass::Neither))?),
        AdvMode::InverseLabel => cross_entropy(lv, &labels(nv, ModalClass::Ir))?
            .add(cross_entropy(li, &labels(ni, ModalClass::Rgb))?),
        AdvMode::UniformTarget => {
            let uniform = Tensor::full(vec![2], S::lit(0.5));
            cross_entropy_soft(lv, &uniform)?.add(cross_entropy_soft(li, &uniform)?)
        }
    }
}

/// Discriminator loss: `w_m` learns true modalities from detached features.
pub fn adv_discriminator_loss<'t, S: Scalar>(
    p: &Bound<'t, S>,
    fv: Var<'t, S>,
    fi: Var<'t, S>,
    mode: AdvMode,
) -> Result<Var<'t, S>> {
    if fv.requires_grad() || fi.requires_grad() {
        return Err(Error::NotDetached);
    }
    let classes = mode.head_classes();
    let lv = restrict(classify(p, fv, Head::Modality)?, classes)?;
    let li = restrict(classify(p, fi, Head::Modality)?, classes)?;
    cross_entropy(lv, &labels(fv.shape()[0], ModalClass::Rgb))?
        .add(cross_entropy(li, &labels(fi.shape()[0], ModalClass::Ir))?)
}

/// Sequence features of a mixed batch: `fv` rows carry `ids_v`, `fi` rows `ids_i`.
#[derive(Clone, Copy)]
pub struct FeatureBatch<'t, 'a, S> {
    pub fv: Var<'t, S>,
    pub fi: Var<'t, S>,
    pub ids_v: &'a [usize],
    pub ids_i: &'a [usize],
}

impl<'t, S: Scalar> FeatureBatch<'t, '_, S> {
    /// All features stacked RGB first, with matching labels.
    pub fn joined(&self) -> Result<(Var<'t, S>, Vec<usize>)> {
        let (sv, si) = (self.fv.shape(), self.fi.shape());
        if sv != si {
            return Err(Error::ShapeMismatch {
                op: "feature batch",
                lhs: sv,
                rhs: si,
            });
        }
        if self.ids_v.len() != sv[0] || self.ids_i.len() != si[0] {
            return Err(invalid("label count does not match feature rows"));
        }
        let all = Var::stack(&[self.fv, self.fi])?.reshape(vec![2 * sv[0], sv[1]])?;
        let ids = self.ids_v.iter().chain(self.ids_i).copied().collect();
        Ok((all, ids))
    }
}

/// Loss components of one objective evaluation.
pub struct LossTerms<'t, S> {
    pub adv: Var<'t, S>,
    pub ce: Var<'t, S>,
    pub tri: Var<'t, S>,
    pub total: Var<'t, S>,
}

fn id_terms<'t, S: Scalar>(p: &Bound<'t, S>, batch: &FeatureBatch<'t, '_, S>, margin: f64) -> Result<(Var<'t, S>, Var<'t, S>)> {
    let (all, ids) = batch.joined()?;
    let ce = cross_entropy(classify(p, all, Head::Identity)?, &ids)?;
    let tri = triplet_loss(all.l2_normalize(1, S::lit(NORM_EPS))?, &ids, S::lit(margin))?;
    Ok((ce, tri))
}

/// `λ·L_adv1 + L_ce + L_tri`.
pub fn id_objective<'t, S: Scalar>(
    p: &Bound<'t, S>,
    batch: &FeatureBatch<'t, '_, S>,
    cfg: &LossConfig,
) -> Result<LossTerms<'t, S>> {
    let (ce, tri) = id_terms(p, batch, cfg.triplet_margin)?;
    let adv = adv_encoder_loss(
        p,
        modality_input(batch.fv, cfg)?,
        modality_input(batch.fi, cfg)?,
        cfg.adversarial_mode,
    )?;
    let total = adv.scale(S::lit(cfg.lambda)).add(ce)?.add(tri)?;
    Ok(LossTerms { adv, ce, tri, total })
}

/// `L_ce + L_tri` on already pooled features; the adversarial term is zero.
pub fn baseline_objective<'t, S: Scalar>(
    p: &Bound<'t, S>,
    batch: &FeatureBatch<'t, '_, S>,
    margin: f64,
) -> Result<LossTerms<'t, S>> {
    let (ce, tri) = id_terms(p, batch, margin)?;
    let tape: &'t Tape<S> = ce.tape();
    Ok(LossTerms {
        adv: tape.constant(Tensor::scalar(S::zero())),
        ce,
        tri,
        total: ce.add(tri)?,
    })
}
