//! Learnable building blocks and the two-stream backbone.
//!
//! The backbone is five stride-2 3×3 convolution stages with ReLU. Stage 1
//! is modality specific (`stem_rgb` / `stem_ir`), stages 2-4 are shared
//! (`trunk`), and stage 5 is duplicated into `branch_f1` and `branch_f2`,
//! whose globally pooled outputs feed attention and aggregation
//! respectively. Linear weights are stored `[out × in]`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MCKP";

/// Number of outputs of the modality classifier.
pub const MODAL_CLASSES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModalClass {
    Rgb = 0,
    Ir = 1,
    /// Training target only; never a data label.
    Neither = 2,
}

impl ModalClass {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Self::Rgb),
            1 => Ok(Self::Ir),
            2 => Ok(Self::Neither),
            _ => Err(Error::Format(format!("unknown modality code {v}"))),
        }
    }

    pub fn other(self) -> Self {
        match self {
            Self::Rgb => Self::Ir,
            Self::Ir => Self::Rgb,
            Self::Neither => Self::Neither,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub stage_channels: [usize; 5],
    pub input_channels: usize,
    pub height: usize,
    pub width: usize,
    pub embed_dim: usize,
    pub seq_len: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stage_channels: [8, 16, 32, 64, 64],
            input_channels: 3,
            height: 32,
            width: 16,
            embed_dim: 64,
            seq_len: 6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub num_identities: usize,
    pub se_reduction: usize,
}

impl ModelConfig {
    pub fn new(backbone: BackboneConfig, num_identities: usize) -> Self {
        Self {
            backbone,
            num_identities,
            se_reduction: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.backbone;
        if b.stage_channels.contains(&0) || b.seq_len == 0 || b.height == 0 || b.width == 0 {
            return Err(Error::Config("backbone sizes must be positive".into()));
        }
        if b.input_channels != 3 {
            return Err(Error::Config(format!("input must have 3 channels, got {}", b.input_channels)));
        }
        if b.embed_dim != b.stage_channels[4] {
            return Err(Error::Config(format!(
                "embed_dim {} must equal the last stage width {}",
                b.embed_dim, b.stage_channels[4]
            )));
        }
        if self.se_reduction == 0 || !b.embed_dim.is_multiple_of(self.se_reduction) {
            return Err(Error::Config(format!(
                "SE reduction {} must divide embed_dim {}",
                self.se_reduction, b.embed_dim
            )));
        }
        if self.num_identities < 2 {
            return Err(Error::Config("at least two training identities required".into()));
        }
        Ok(())
    }

    fn hidden(&self) -> usize {
        self.backbone.embed_dim
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    StemRgb,
    StemIr,
    Trunk,
    BranchF1,
    BranchF2,
    Tmr,
    WId,
    WM,
}

impl ParamGroup {
    pub fn of(name: &str) -> Option<Self> {
        let head = name.split('.').next()?;
        Some(match head {
            "stem_rgb" => Self::StemRgb,
            "stem_ir" => Self::StemIr,
            "trunk" => Self::Trunk,
            "branch_f1" => Self::BranchF1,
            "branch_f2" => Self::BranchF2,
            "tmr" => Self::Tmr,
            "w_id" => Self::WId,
            "w_m" => Self::WM,
            _ => return None,
        })
    }

    pub fn is_stem(self) -> bool {
        matches!(self, Self::StemRgb | Self::StemIr)
    }

    /// Encoder `E` (backbone and TMR), excluding both classifiers.
    pub fn is_encoder(self) -> bool {
        !matches!(self, Self::WId | Self::WM)
    }
}

/// Names and configuration shared by a model and its tape bindings.
#[derive(Debug, PartialEq)]
struct Layout {
    config: ModelConfig,
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Layout {
    fn position(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| invalid(format!("unknown parameter {name}")))
    }
}

/// Named, ordered collection of every learnable tensor in the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<S> {
    layout: Arc<Layout>,
    tensors: Vec<Tensor<S>>,
}

struct Builder<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> Builder<S> {
    fn push(&mut self, name: String, tensor: Tensor<S>) {
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
    }

    fn conv<R: Rng + ?Sized>(&mut self, name: &str, cin: usize, cout: usize, rng: &mut R) {
        let bound = (6.0 / (cin * 9) as f64).sqrt();
        self.push(format!("{name}.weight"), Tensor::uniform(vec![cout, cin, 3, 3], bound, rng));
        self.push(format!("{name}.bias"), Tensor::zeros(vec![cout]));
    }

    fn linear<R: Rng + ?Sized>(&mut self, name: &str, input: usize, output: usize, rng: &mut R) {
        let b = 1.0 / (input as f64).sqrt();
        self.push(format!("{name}.weight"), Tensor::uniform(vec![output, input], b, rng));
        self.push(format!("{name}.bias"), Tensor::uniform(vec![output], b, rng));
    }
}

impl<S: Scalar> ModelParams<S> {
    /// Randomly initialised model: He-uniform convolutions, zero conv
    /// biases, `U(±1/√fan_in)` for linear and recurrent weights.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            names: Vec::new(),
            tensors: Vec::new(),
        };
        let ch = config.backbone.stage_channels;
        let d = config.backbone.embed_dim;
        let hid = config.hidden();
        b.conv("stem_rgb", 3, ch[0], rng);
        b.conv("stem_ir", 3, ch[0], rng);
        for i in 0..3 {
            b.conv(&format!("trunk.{i}"), ch[i], ch[i + 1], rng);
        }
        b.conv("branch_f1", ch[3], ch[4], rng);
        b.conv("branch_f2", ch[3], ch[4], rng);

        let lb = 1.0 / (hid as f64).sqrt();
        for layer in 0..2 {
            let input = if layer == 0 { d } else { hid };
            let p = format!("tmr.lstm.{layer}");
            b.push(format!("{p}.w_ih"), Tensor::uniform(vec![4 * hid, input], lb, rng));
            b.push(format!("{p}.w_hh"), Tensor::uniform(vec![4 * hid, hid], lb, rng));
            b.push(format!("{p}.bias"), Tensor::uniform(vec![4 * hid], lb, rng));
        }
        let r = d / config.se_reduction;
        for t in 0..config.backbone.seq_len {
            b.linear(&format!("tmr.fc.{t}"), hid, d, rng);
            b.linear(&format!("tmr.se.{t}.fc1"), d, r, rng);
            b.linear(&format!("tmr.se.{t}.fc2"), r, d, rng);
        }
        b.linear("w_id", d, config.num_identities, rng);
        b.linear("w_m", d, MODAL_CLASSES, rng);
        let index = b.names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(Self {
            layout: Arc::new(Layout {
                config,
                names: b.names,
                index,
            }),
            tensors: b.tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.layout.config
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.layout.names
    }

    /// `(name, tensor)` pairs in model order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.layout.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<S>)> {
        self.layout.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.layout.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.layout.index.get(name).map(|&i| &mut self.tensors[i])
    }

    /// Replaces a parameter's value; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor<S>) -> Result<()> {
        let slot = self.get_mut(name).ok_or_else(|| invalid(format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set parameter",
                lhs: slot.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    /// Registers every parameter on `tape`; groups rejected by `trainable`
    /// become constants that receive no gradient.
    pub fn bind<'t>(&self, tape: &'t Tape<S>, trainable: impl Fn(ParamGroup) -> bool) -> Bound<'t, S> {
        let vars = self
            .iter()
            .map(|(name, t)| {
                let group = ParamGroup::of(name).expect("parameter names carry a group prefix");
                if trainable(group) {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound {
            layout: Arc::clone(&self.layout),
            vars,
        }
    }

    pub fn entries(&self) -> Vec<(String, Tensor<S>)> {
        self.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
    }

    /// Loads values for every parameter from checkpoint entries; entries
    /// that are not model parameters are ignored.
    pub fn load_entries(&mut self, entries: &[(String, Tensor<S>)]) -> Result<()> {
        let mut seen = 0;
        for (name, t) in entries {
            if self.layout.index.contains_key(name) {
                self.set(name, t.clone())?;
                seen += 1;
            }
        }
        if seen != self.len() {
            return Err(Error::Format(format!(
                "checkpoint provides {seen} of {} model parameters",
                self.len()
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.entries())
    }

    pub fn load(config: ModelConfig, path: &Path) -> Result<Self> {
        let mut model = Self::init(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        model.load_entries(&read_checkpoint(path)?)?;
        Ok(model)
    }

    /// `(name, L2 norm)` of every parameter, for diagnostics.
    pub fn norms(&self) -> Vec<(String, f64)> {
        self.iter().map(|(n, t)| (n.to_string(), t.l2_norm().as_f64())).collect()
    }
}

/// Model parameters registered on a tape for one forward pass.
pub struct Bound<'t, S> {
    layout: Arc<Layout>,
    vars: Vec<Var<'t, S>>,
}

impl<'t, S: Scalar> Bound<'t, S> {
    pub fn var(&self, name: &str) -> Result<Var<'t, S>> {
        Ok(self.vars[self.layout.position(name)?])
    }

    /// Rebinds `name` to `value`, e.g. after an update made outside this pass.
    pub fn replace(&mut self, name: &str, value: Var<'t, S>) -> Result<()> {
        let i = self.layout.position(name)?;
        if self.vars[i].shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "replace parameter",
                lhs: self.vars[i].shape(),
                rhs: value.shape(),
            });
        }
        self.vars[i] = value;
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.layout.config
    }

    /// `(name, var)` pairs in model order.
    pub fn named_vars(&self) -> impl Iterator<Item = (&str, Var<'t, S>)> + '_ {
        self.layout.names.iter().map(String::as_str).zip(self.vars.iter().copied())
    }

    /// `x · Wᵀ + b` for `x` of shape `[B × in]`.
    pub fn linear(&self, prefix: &str, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let w = self.var(&format!("{prefix}.weight"))?;
        let b = self.var(&format!("{prefix}.bias"))?;
        x.matmul(w.transpose()?)?.add_bias(b)
    }

    fn conv_stage(&self, prefix: &str, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let w = self.var(&format!("{prefix}.weight"))?;
        let b = self.var(&format!("{prefix}.bias"))?;
        Ok(x.conv2d(w, b, 2, 1)?.relu())
    }
}

/// Runs `[N × 3 × H × W]` frames of one modality through the two-stream
/// backbone, returning the globally pooled `(f1, f2)` features, `[N × D]` each.
pub fn backbone_forward<'t, S: Scalar>(
    p: &Bound<'t, S>,
    frames: Var<'t, S>,
    modality: ModalClass,
) -> Result<(Var<'t, S>, Var<'t, S>)> {
    let shape = frames.shape();
    let cfg = &p.config().backbone;
    if shape.len() != 4 || shape[1] != cfg.input_channels {
        return Err(Error::InvalidShape {
            op: "backbone_forward",
            shape,
            reason: format!("expected [N, {}, H, W] frames", cfg.input_channels),
        });
    }
    let stem = match modality {
        ModalClass::Rgb => "stem_rgb",
        ModalClass::Ir => "stem_ir",
        ModalClass::Neither => {
            return Err(Error::InvalidArgument("frames must be RGB or IR".into()));
        }
    };
    let mut x = p.conv_stage(stem, frames)?;
    for i in 0..3 {
        x = p.conv_stage(&format!("trunk.{i}"), x)?;
    }
    let f1 = global_avg_pool(p.conv_stage("branch_f1", x)?)?;
    let f2 = global_avg_pool(p.conv_stage("branch_f2", x)?)?;
    Ok((f1, f2))
}

fn global_avg_pool<'t, S: Scalar>(x: Var<'t, S>) -> Result<Var<'t, S>> {
    let s = x.shape();
    x.reshape(vec![s[0], s[1], s[2] * s[3]])?.mean_axis(2)
}

/// Two stacked LSTM layers over `[T × B × D]` (or `[T × D]`) with zero
/// initial states; returns every hidden state of the second layer.
pub fn lstm2_forward<'t, S: Scalar>(p: &Bound<'t, S>, seq: Var<'t, S>) -> Result<Var<'t, S>> {
    let shape = seq.shape();
    let (seq3, squeeze) = match shape.len() {
        2 => (seq.reshape(vec![shape[0], 1, shape[1]])?, true),
        3 => (seq, false),
        _ => {
            return Err(Error::InvalidShape {
                op: "lstm2_forward",
                shape,
                reason: "expected [T, D] or [T, B, D]".into(),
            })
        }
    };
    let s = seq3.shape();
    let (steps, batch, d) = (s[0], s[1], s[2]);
    if d != p.config().backbone.embed_dim {
        return Err(Error::ShapeMismatch {
            op: "lstm2_forward",
            lhs: s,
            rhs: vec![p.config().backbone.embed_dim],
        });
    }
    let mut inputs: Vec<Var<'t, S>> = (0..steps).map(|t| seq3.take(0, t)).collect::<Result<_>>()?;
    for layer in 0..2 {
        let pre = format!("tmr.lstm.{layer}");
        inputs = lstm_layer(p, &pre, &inputs, batch)?;
    }
    let out = Var::stack(&inputs)?;
    if squeeze {
        out.reshape(vec![steps, d])
    } else {
        Ok(out)
    }
}

/// One LSTM layer with gate order (input, forget, cell, output).
pub fn lstm_layer<'t, S: Scalar>(
    p: &Bound<'t, S>,
    prefix: &str,
    inputs: &[Var<'t, S>],
    batch: usize,
) -> Result<Vec<Var<'t, S>>> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("LSTM needs at least one time step".into()));
    }
    let hid = p.config().hidden();
    let tape = inputs[0].tape();
    let w_ih = p.var(&format!("{prefix}.w_ih"))?.transpose()?;
    let w_hh = p.var(&format!("{prefix}.w_hh"))?.transpose()?;
    let bias = p.var(&format!("{prefix}.bias"))?;
    let mut h = tape.constant(Tensor::zeros(vec![batch, hid]));
    let mut c = tape.constant(Tensor::zeros(vec![batch, hid]));
    let mut outputs = Vec::with_capacity(inputs.len());
    for &x in inputs {
        let gates = x.matmul(w_ih)?.add(h.matmul(w_hh)?)?.add_bias(bias)?;
        let i = gates.slice_last(0, hid)?.sigmoid();
        let f = gates.slice_last(hid, hid)?.sigmoid();
        let g = gates.slice_last(2 * hid, hid)?.tanh();
        let o = gates.slice_last(3 * hid, hid)?.sigmoid();
        c = f.mul(c)?.add(i.mul(g)?)?;
        h = o.mul(c.tanh())?;
        outputs.push(h);
    }
    Ok(outputs)
}

/// Squeeze-and-excitation gate `σ(W2·relu(W1·u + b1) + b2)` on `[B × D]`.
pub fn se_gate<'t, S: Scalar>(p: &Bound<'t, S>, prefix: &str, u: Var<'t, S>) -> Result<Var<'t, S>> {
    let hidden = p.linear(&format!("{prefix}.fc1"), u)?.relu();
    Ok(p.linear(&format!("{prefix}.fc2"), hidden)?.sigmoid())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Identity,
    Modality,
}

impl Head {
    pub fn prefix(self) -> &'static str {
        match self {
            Self::Identity => "w_id",
            Self::Modality => "w_m",
        }
    }
}

/// Unnormalised logits of a single affine classifier on `[B × D]` features.
pub fn classify<'t, S: Scalar>(p: &Bound<'t, S>, features: Var<'t, S>, head: Head) -> Result<Var<'t, S>> {
    let d = p.config().backbone.embed_dim;
    let shape = features.shape();
    if shape.len() != 2 || shape[1] != d {
        return Err(Error::ShapeMismatch {
            op: "classify",
            lhs: shape,
            rhs: vec![d],
        });
    }
    p.linear(head.prefix(), features)
}

pub fn write_checkpoint<S: Scalar>(path: &Path, entries: &[(String, Tensor<S>)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    encode_checkpoint(&mut w, entries)?;
    w.flush()?;
    Ok(())
}

pub fn encode_checkpoint<S: Scalar, W: Write>(w: &mut W, entries: &[(String, Tensor<S>)]) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    let count = u32::try_from(entries.len()).map_err(|_| Error::Format("too many entries".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, t) in entries {
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        t.write_to(w)?;
    }
    Ok(())
}

pub fn read_checkpoint<S: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<S>)>> {
    decode_checkpoint(&mut BufReader::new(File::open(path)?))
}

pub fn decode_checkpoint<S: Scalar, R: Read>(r: &mut R) -> Result<Vec<(String, Tensor<S>)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let count = u32::from_le_bytes(buf4);
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let mut buf2 = [0u8; 2];
        r.read_exact(&mut buf2)?;
        let mut name = vec![0u8; u16::from_le_bytes(buf2) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        if entries.iter().any(|(n, _): &(String, Tensor<S>)| *n == name) {
            return Err(Error::Format(format!("duplicate entry {name}")));
        }
        entries.push((name, Tensor::read_from(r)?));
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::grad_check;

    fn small_config() -> ModelConfig {
        ModelConfig::new(
            BackboneConfig {
                stage_channels: [4, 4, 8, 8, 8],
                input_channels: 3,
                height: 16,
                width: 8,
                embed_dim: 8,
                seq_len: 3,
            },
            5,
        )
    }

    fn zero_all<S: Scalar>(m: &mut ModelParams<S>, prefix: &str) {
        for (_, t) in m.iter_mut().filter(|(n, _)| n.starts_with(prefix)) {
            t.data_mut().iter_mut().for_each(|v| *v = S::zero());
        }
    }

    #[test]
    fn config_validation() {
        let mut c = small_config();
        assert!(c.validate().is_ok());
        c.se_reduction = 3;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.backbone.embed_dim = 16;
        assert!(c.validate().is_err());
    }

    #[test]
    fn stems_and_branches_have_matching_shapes_but_independent_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = ModelParams::<f64>::init(small_config(), &mut rng).unwrap();
        for (a, b) in [("stem_rgb", "stem_ir"), ("branch_f1", "branch_f2")] {
            let (wa, wb) = (m.get(&format!("{a}.weight")).unwrap(), m.get(&format!("{b}.weight")).unwrap());
            assert_eq!(wa.shape(), wb.shape());
            assert_ne!(wa, wb);
        }
        let names: std::collections::HashSet<_> = m.names().iter().collect();
        assert_eq!(names.len(), m.len());
        assert!(m.names().iter().all(|n| ParamGroup::of(n).is_some()));
    }

    #[test]
    fn lstm_with_zero_weights_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = ModelParams::<f64>::init(small_config(), &mut rng).unwrap();
        zero_all(&mut m, "tmr.lstm");
        let tape = Tape::new();
        let p = m.bind(&tape, |_| true);
        let seq = tape.constant(Tensor::uniform(vec![4, 8], 1.0, &mut rng));
        let h = lstm2_forward(&p, seq).unwrap();
        assert_eq!(h.shape(), vec![4, 8]);
        assert!(h.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_single_step_is_one_cell_per_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = ModelParams::<f64>::init(small_config(), &mut rng).unwrap();
        let x: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        let tape = Tape::new();
        let p = m.bind(&tape, |_| true);
        let out = lstm2_forward(&p, tape.constant(Tensor::new(vec![1, 8], x.clone()).unwrap())).unwrap();

        // Hand-rolled cell with zero state: c = i*g, h = o*tanh(c).
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let cell = |layer: usize, input: &[f64]| -> Vec<f64> {
            let w = m.get(&format!("tmr.lstm.{layer}.w_ih")).unwrap();
            let b = m.get(&format!("tmr.lstm.{layer}.bias")).unwrap();
            let pre: Vec<f64> = (0..32)
                .map(|r| b.data()[r] + (0..8).map(|k| w.data()[r * 8 + k] * input[k]).sum::<f64>())
                .collect();
            (0..8)
                .map(|j| sig(pre[24 + j]) * (sig(pre[j]) * pre[16 + j].tanh()).tanh())
                .collect()
        };
        let expect = cell(1, &cell(0, &x));
        for (a, b) in out.value().data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn lstm_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = ModelParams::<f64>::init(small_config(), &mut rng).unwrap();
        let seq = Tensor::uniform(vec![4, 8], 1.0, &mut rng);
        let report = grad_check(
            |tape, v| {
                let p = m.bind(tape, |_| false);
                Ok(lstm2_forward(&p, v[0])?.sum())
            },
            &[seq],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn se_gate_zero_weights_gives_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = ModelParams::<f64>::init(small_config(), &mut rng).unwrap();
        zero_all(&mut m, "tmr.se.0");
        let tape = Tape::new();
        let p = m.bind(&tape, |_| true);
        let u = tape.constant(Tensor::uniform(vec![2, 8], 5.0, &mut rng));
        let a = se_gate(&p, "tmr.se.0", u).unwrap();
        assert!(a.value().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn se_gate_matches_reference_forward() {
        // D = 4, r = 2, seed 7, u = [1, 0, -1, 2].
        let mut cfg = small_config();
        cfg.backbone.stage_channels[4] = 4;
        cfg.backbone.embed_dim = 4;
        cfg.se_reduction = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = ModelParams::<f64>::init(cfg, &mut rng).unwrap();
        let u = [1.0, 0.0, -1.0, 2.0];
        let tape = Tape::new();
        let p = m.bind(&tape, |_| true);
        let got = se_gate(&p, "tmr.se.0", tape.constant(Tensor::new(vec![1, 4], u.to_vec()).unwrap()))
            .unwrap()
            .value();

        let w1 = m.get("tmr.se.0.fc1.weight").unwrap().data();
        let b1 = m.get("tmr.se.0.fc1.bias").unwrap().data();
        let w2 = m.get("tmr.se.0.fc2.weight").unwrap().data();
        let b2 = m.get("tmr.se.0.fc2.bias").unwrap().data();
        let z: Vec<f64> = (0..2)
            .map(|r| (b1[r] + (0..4).map(|k| w1[r * 4 + k] * u[k]).sum::<f64>()).max(0.0))
            .collect();
        for j in 0..4 {
            let s = b2[j] + (0..2).map(|r| w2[j * 2 + r] * z[r]).sum::<f64>();
            let expect = 1.0 / (1.0 + (-s).exp());
            assert!((got.data()[j] - expect).abs() < 1e-15);
            assert!(got.data()[j] > 0.0 && got.data()[j] < 1.0);
        }
    }

    #[test]
    fn backbone_shapes_and_stem_routing() {
        let cfg = ModelConfig::new(BackboneConfig::default(), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = ModelParams::<f64>::init(cfg, &mut rng).unwrap();
        let frames = Tensor::uniform(vec![6, 3, 32, 16], 0.5, &mut rng);
        let run = |m: &ModelParams<f64>, modality| {
            let tape = Tape::new();
            let p = m.bind(&tape, |_| true);
            let (f1, f2) = backbone_forward(&p, tape.constant(frames.clone()), modality).unwrap();
            (f1.value(), f2.value())
        };
        let (rgb1, rgb2) = run(&m, ModalClass::Rgb);
        let (ir1, _) = run(&m, ModalClass::Ir);
        assert_eq!(rgb1.shape(), &[6, 64]);
        assert_eq!(rgb2.shape(), &[6, 64]);
        let gap: f64 = rgb1.data().iter().zip(ir1.data()).map(|(a, b)| (a - b).powi(2)).sum();
        assert!(gap > 0.0);

        // Swapping stem values swaps the outputs.
        let (sr, si) = (m.get("stem_rgb.weight").unwrap().clone(), m.get("stem_ir.weight").unwrap().clone());
        m.set("stem_rgb.weight", si).unwrap();
        m.set("stem_ir.weight", sr).unwrap();
        let (swapped_ir, _) = run(&m, ModalClass::Ir);
        assert_eq!(swapped_ir, rgb1);

        // Tied branches give identical f1 and f2.
        let (w, b) = (m.get("branch_f1.weight").unwrap().clone(), m.get("branch_f1.bias").unwrap().clone());
        m.set("branch_f2.weight", w).unwrap();
        m.set("branch_f2.bias", b).unwrap();
        let (f1, f2) = run(&m, ModalClass::Rgb);
        assert_eq!(f1, f2);
    }

    #[test]
    fn backbone_rejects_bad_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = ModelParams::<f64>::init(small_config(), &mut rng).unwrap();
        let tape = Tape::new();
        let p = m.bind(&tape, |_| true);
        let bad = tape.constant(Tensor::zeros(vec![2, 1, 16, 8]));
        assert!(backbone_forward(&p, bad, ModalClass::Rgb).is_err());
        let ok = tape.constant(Tensor::zeros(vec![2, 3, 16, 8]));
        assert!(backbone_forward(&p, ok, ModalClass::Neither).is_err());
    }

    #[test]
    fn classifier_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut m = ModelParams::<f64>::init(small_config(), &mut rng).unwrap();
        zero_all(&mut m, "w_m");
        let tape = Tape::new();
        let p = m.bind(&tape, |_| true);
        let feat = tape.constant(Tensor::uniform(vec![2, 8], 1.0, &mut rng));
        let logits = classify(&p, feat, Head::Modality).unwrap();
        assert_eq!(logits.shape(), vec![2, 3]);
        assert!(logits.value().data().iter().all(|&v| v == 0.0));
        let probs = logits.softmax(1).unwrap().value();
        assert!(probs.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(classify(&p, feat, Head::Identity).unwrap().shape(), vec![2, 5]);
        let wrong = tape.constant(Tensor::zeros(vec![2, 7]));
        assert!(classify(&p, wrong, Head::Identity).is_err());

        // One-hot rows select coordinates.
        let mut w = Tensor::zeros(vec![3, 8]);
        for (r, c) in [(0, 2), (1, 5), (2, 7)] {
            w.data_mut()[r * 8 + c] = 1.0;
        }
        m.set("w_m.weight", w).unwrap();
        let tape = Tape::new();
        let p = m.bind(&tape, |_| true);
        let x: Vec<f64> = (0..8).map(|i| i as f64 * 1.5).collect();
        let out = classify(&p, tape.constant(Tensor::new(vec![1, 8], x.clone()).unwrap()), Head::Modality)
            .unwrap()
            .value();
        assert_eq!(out.data(), &[x[2], x[5], x[7]]);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = ModelParams::<f64>::init(small_config(), &mut rng).unwrap();
        let mut a = Vec::new();
        encode_checkpoint(&mut a, &m.entries()).unwrap();
        assert_eq!(&a[..4], b"MCKP");
        let entries = decode_checkpoint::<f64, _>(&mut a.as_slice()).unwrap();
        let mut b = Vec::new();
        encode_checkpoint(&mut b, &entries).unwrap();
        assert_eq!(a, b);
        let mut m2 = ModelParams::<f64>::init(small_config(), &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        m2.load_entries(&entries).unwrap();
        assert_eq!(m, m2);
    }
}
