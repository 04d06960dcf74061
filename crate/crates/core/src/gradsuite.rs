//! Finite-difference checks over every differentiable building block,
//! grouped the way the `gradcheck` command exposes them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, Tape, Var};
use crate::error::{Error, Result};
use crate::losses::{
    adv_discriminator_loss, adv_encoder_loss, cross_entropy, cross_entropy_soft, id_objective, triplet_loss, AdvMode,
    FeatureBatch, LossConfig, NORM_EPS,
};
use crate::network::{backbone_forward, lstm2_forward, se_gate, BackboneConfig, ModalClass, ModelConfig, ModelParams};
use crate::tensor::Tensor;
use crate::tmr::{pool_frames, tmr_aggregate, tmr_attention, Pooling};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const DEFAULT_SEEDS: u64 = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Module {
    Ops,
    Conv,
    Lstm,
    Tmr,
    Losses,
}

impl Module {
    pub const ALL: [Module; 5] = [Module::Ops, Module::Conv, Module::Lstm, Module::Tmr, Module::Losses];

    pub fn name(self) -> &'static str {
        match self {
            Self::Ops => "ops",
            Self::Conv => "conv",
            Self::Lstm => "lstm",
            Self::Tmr => "tmr",
            Self::Losses => "losses",
        }
    }
}

impl std::str::FromStr for Module {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown gradcheck module {s:?}")))
    }
}

/// Worst relative error of one named check across all seeds.
#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub module: Module,
    pub name: String,
    pub seeds: u64,
    pub max_rel_error: f64,
    pub worst_seed: u64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

type Objective<'a> = dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>> + 'a;

struct Collector {
    module: Module,
    seeds: u64,
    out: Vec<CheckOutcome>,
}

impl Collector {
    fn record(&mut self, name: &str, seed: u64, err: f64) {
        match self.out.iter_mut().find(|c| c.name == name) {
            Some(c) => {
                if err > c.max_rel_error {
                    c.max_rel_error = err;
                    c.worst_seed = seed;
                }
            }
            None => self.out.push(CheckOutcome {
                module: self.module,
                name: name.to_string(),
                seeds: self.seeds,
                max_rel_error: err,
                worst_seed: seed,
            }),
        }
    }

    fn check(&mut self, name: &str, seed: u64, f: &Objective<'_>, inputs: &[Tensor<f64>]) -> Result<()> {
        let report = grad_check(f, inputs, STEP, TOLERANCE)?;
        self.record(name, seed, report.max_rel_error);
        Ok(())
    }
}

fn konst<'t>(t: &'t Tape<f64>, x: &Tensor<f64>) -> Var<'t, f64> {
    t.constant(x.clone())
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), 1.0, rng)
}

fn tiny_model(seq_len: usize, seed: u64) -> Result<ModelParams<f64>> {
    let cfg = ModelConfig::new(
        BackboneConfig {
            stage_channels: [3, 4, 4, 8, 8],
            input_channels: 3,
            height: 16,
            width: 8,
            embed_dim: 8,
            seq_len,
        },
        4,
    );
    ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Runs every check of `module` on seeds `0..seeds`.
pub fn run_module(module: Module, seeds: u64) -> Result<Vec<CheckOutcome>> {
    let mut c = Collector {
        module,
        seeds,
        out: Vec::new(),
    };
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match module {
            Module::Ops => ops(&mut c, seed, &mut rng)?,
            Module::Conv => conv(&mut c, seed, &mut rng)?,
            Module::Lstm => lstm(&mut c, seed, &mut rng)?,
            Module::Tmr => tmr(&mut c, seed, &mut rng)?,
            Module::Losses => losses(&mut c, seed, &mut rng)?,
        }
    }
    Ok(c.out)
}

pub fn run_all(seeds: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for m in Module::ALL {
        out.extend(run_module(m, seeds)?);
    }
    Ok(out)
}

fn ops(c: &mut Collector, seed: u64, rng: &mut ChaCha8Rng) -> Result<()> {
    let a = uniform(&[3, 4], rng);
    let b = uniform(&[3, 4], rng);
    let m = uniform(&[4, 5], rng);
    let proj = uniform(&[3, 4], rng);
    let bias = uniform(&[4], rng);
    let rows = uniform(&[3], rng);
    let ab = [a.clone(), b.clone()];
    let a1 = [a.clone()];
    c.check("add", seed, &|t, v| Ok(v[0].add(v[1])?.mul(konst(t, &proj))?.sum()), &ab)?;
    c.check("sub", seed, &|t, v| Ok(v[0].sub(v[1])?.mul(konst(t, &proj))?.sum()), &ab)?;
    c.check("mul", seed, &|t, v| Ok(v[0].mul(v[1])?.mul(konst(t, &proj))?.sum()), &ab)?;
    c.check("scale", seed, &|t, v| Ok(v[0].scale(-1.7).add_scalar(0.3).mul(konst(t, &proj))?.sum()), &a1)?;
    c.check("relu", seed, &|t, v| Ok(v[0].relu().mul(konst(t, &proj))?.sum()), &a1)?;
    c.check("sigmoid", seed, &|t, v| Ok(v[0].sigmoid().mul(konst(t, &proj))?.sum()), &a1)?;
    c.check("tanh", seed, &|t, v| Ok(v[0].tanh().mul(konst(t, &proj))?.sum()), &a1)?;
    c.check("matmul", seed, &|_, v| Ok(v[0].matmul(v[1])?.tanh().sum()), &[a.clone(), m])?;
    c.check("transpose", seed, &|t, v| Ok(v[0].transpose()?.transpose()?.mul(konst(t, &proj))?.sum()), &a1)?;
    c.check("add_bias", seed, &|t, v| Ok(v[0].add_bias(v[1])?.mul(konst(t, &proj))?.sum()), &[a.clone(), bias])?;
    c.check("scale_rows", seed, &|t, v| Ok(v[0].scale_rows(v[1])?.mul(konst(t, &proj))?.sum()), &[a.clone(), rows])?;
    for axis in 0..2 {
        c.check("sum_axis", seed, &|t, v| Ok(v[0].sum_axis(axis)?.mul(konst(t, &proj).sum_axis(axis)?)?.sum()), &a1)?;
        c.check("mean_axis", seed, &|t, v| Ok(v[0].mean_axis(axis)?.mul(konst(t, &proj).sum_axis(axis)?)?.sum()), &a1)?;
        c.check("max_axis", seed, &|t, v| Ok(v[0].max_axis(axis)?.mul(konst(t, &proj).sum_axis(axis)?)?.sum()), &a1)?;
        c.check("softmax", seed, &|t, v| Ok(v[0].softmax(axis)?.mul(konst(t, &proj))?.sum()), &a1)?;
        c.check("log_softmax", seed, &|t, v| Ok(v[0].log_softmax(axis)?.mul(konst(t, &proj))?.sum()), &a1)?;
        c.check("l2_normalize", seed, &|t, v| Ok(v[0].l2_normalize(axis, NORM_EPS)?.mul(konst(t, &proj))?.sum()), &a1)?;
        c.check("take", seed, &|t, v| Ok(v[0].take(axis, 1)?.mul(konst(t, &proj).take(axis, 2)?)?.sum()), &a1)?;
    }
    c.check("reshape", seed, &|t, v| Ok(v[0].reshape(vec![4, 3])?.reshape(vec![3, 4])?.mul(konst(t, &proj))?.sum()), &a1)?;
    c.check("stack", seed, &|t, v| Ok(Var::stack(&[v[0], v[1], v[0]])?.take(0, 2)?.mul(konst(t, &proj))?.sum()), &ab)?;
    c.check("slice_last", seed, &|t, v| Ok(v[0].slice_last(1, 2)?.mul(konst(t, &proj).slice_last(0, 2)?)?.sum()), &a1)?;
    c.check("gather", seed, &|_, v| Ok(v[0].gather(&[0, 5, 5, 11])?.tanh().sum()), &a1)?;
    c.check("pairwise_distances", seed, &|_, v| Ok(v[0].pairwise_distances()?.tanh().sum()), &a1)?;
    c.check("mean", seed, &|_, v| Ok(v[0].mul(v[0])?.mean()), &a1)?;
    Ok(())
}

fn conv(c: &mut Collector, seed: u64, rng: &mut ChaCha8Rng) -> Result<()> {
    for (stride, pad, h, w) in [(1, 0, 5, 4), (1, 1, 4, 4), (2, 1, 7, 6), (2, 0, 6, 5)] {
        let x = uniform(&[2, 2, h, w], rng);
        let k = uniform(&[3, 2, 3, 3], rng);
        let b = uniform(&[3], rng);
        let name = format!("conv2d s{stride} p{pad}");
        c.check(&name, seed, &|_, v| Ok(v[0].conv2d(v[1], v[2], stride, pad)?.tanh().sum()), &[x, k, b])?;
    }
    let model = tiny_model(2, seed)?;
    let frames = Tensor::uniform(vec![2, 3, 16, 8], 1.0, rng);
    for modality in [ModalClass::Rgb, ModalClass::Ir] {
        let name = format!("backbone {}", if modality == ModalClass::Rgb { "rgb" } else { "ir" });
        c.check(
            &name,
            seed,
            &|t, v| {
                let p = model.bind(t, |_| false);
                let (f1, f2) = backbone_forward(&p, v[0], modality)?;
                f1.sum().add(f2.tanh().sum())
            },
            std::slice::from_ref(&frames),
        )?;
    }
    Ok(())
}

fn lstm(c: &mut Collector, seed: u64, rng: &mut ChaCha8Rng) -> Result<()> {
    let model = tiny_model(4, seed)?;
    let seq = uniform(&[4, 2, 8], rng);
    let proj = uniform(&[4, 2, 8], rng);
    c.check(
        "lstm2",
        seed,
        &|t, v| {
            let p = model.bind(t, |_| false);
            Ok(lstm2_forward(&p, v[0])?.mul(t.constant(proj.clone()))?.sum())
        },
        &[seq],
    )?;
    let names = ["tmr.lstm.0.w_ih", "tmr.lstm.0.w_hh", "tmr.lstm.0.bias"];
    let weights: Vec<Tensor<f64>> = names.iter().map(|n| model.get(n).cloned().expect("lstm weight")).collect();
    let seq = uniform(&[3, 8], rng);
    c.check(
        "lstm2 weights",
        seed,
        &|t, v| {
            let mut p = model.bind(t, |_| false);
            for (name, var) in names.iter().zip(v) {
                p.replace(name, *var)?;
            }
            Ok(lstm2_forward(&p, t.constant(seq.clone()))?.sum())
        },
        &weights,
    )?;
    Ok(())
}

fn tmr(c: &mut Collector, seed: u64, rng: &mut ChaCha8Rng) -> Result<()> {
    let model = tiny_model(3, seed)?;
    let u = uniform(&[2, 8], rng);
    c.check(
        "se_gate",
        seed,
        &|t, v| {
            let p = model.bind(t, |_| false);
            Ok(se_gate(&p, "tmr.se.0", v[0])?.mul(t.constant(u.clone()))?.sum())
        },
        std::slice::from_ref(&u),
    )?;
    let f1 = uniform(&[3, 2, 8], rng);
    let f2 = uniform(&[3, 2, 8], rng);
    let proj = uniform(&[2, 8], rng);
    c.check(
        "tmr_attention",
        seed,
        &|t, v| {
            let p = model.bind(t, |_| false);
            Ok(tmr_attention(&p, v[0])?.take(0, 1)?.mul(t.constant(proj.clone()))?.sum())
        },
        std::slice::from_ref(&f1),
    )?;
    c.check(
        "tmr_aggregate",
        seed,
        &|t, v| Ok(tmr_aggregate(v[0], v[1])?.mul(t.constant(proj.clone()))?.sum()),
        &[f1.clone(), f2.clone()],
    )?;
    c.check(
        "tmr composite",
        seed,
        &|t, v| {
            let p = model.bind(t, |_| false);
            Ok(tmr_aggregate(tmr_attention(&p, v[0])?, v[1])?.mul(t.constant(proj.clone()))?.sum())
        },
        &[f1.clone(), f2.clone()],
    )?;
    for pooling in Pooling::ALL {
        c.check(
            &format!("pool {}", pooling.name()),
            seed,
            &|t, v| Ok(pool_frames(v[0], pooling)?.mul(t.constant(proj.clone()))?.sum()),
            std::slice::from_ref(&f2),
        )?;
    }
    Ok(())
}

fn losses(c: &mut Collector, seed: u64, rng: &mut ChaCha8Rng) -> Result<()> {
    let model = tiny_model(3, seed)?;
    let logits = Tensor::uniform(vec![5, 3], 2.0, rng);
    let targets = [0, 2, 1, 1, 0];
    c.check("cross_entropy", seed, &|_, v| cross_entropy(v[0], &targets), std::slice::from_ref(&logits))?;
    let soft = Tensor::new(vec![3], vec![0.2, 0.5, 0.3])?;
    c.check("cross_entropy_soft", seed, &|_, v| cross_entropy_soft(v[0], &soft), std::slice::from_ref(&logits))?;
    let x = uniform(&[6, 8], rng);
    let ids = [0, 0, 1, 1, 2, 2];
    c.check(
        "triplet",
        seed,
        &|_, v| triplet_loss(v[0].l2_normalize(1, NORM_EPS)?, &ids, 0.3),
        std::slice::from_ref(&x),
    )?;
    let fv = uniform(&[3, 8], rng);
    let fi = uniform(&[3, 8], rng);
    let feats = [fv.clone(), fi.clone()];
    for mode in AdvMode::ALL {
        c.check(
            &format!("adv encoder {}", mode.name()),
            seed,
            &|t, v| adv_encoder_loss(&model.bind(t, |_| false), v[0], v[1], mode),
            &feats,
        )?;
        let head = [model.get("w_m.weight").cloned().expect("w_m"), model.get("w_m.bias").cloned().expect("w_m")];
        c.check(
            &format!("adv discriminator {}", mode.name()),
            seed,
            &|t, v| {
                let mut p = model.bind(t, |_| false);
                p.replace("w_m.weight", v[0])?;
                p.replace("w_m.bias", v[1])?;
                adv_discriminator_loss(&p, t.constant(fv.clone()), t.constant(fi.clone()), mode)
            },
            &head,
        )?;
        for normalize in [false, true] {
            let cfg = LossConfig {
                adversarial_mode: mode,
                normalize_modality_input: normalize,
                ..LossConfig::default()
            };
            let labels = [0, 1, 2];
            let name = format!("objective {}{}", mode.name(), if normalize { " normalized" } else { "" });
            c.check(
                &name,
                seed,
                &|t, v| {
                    let p = model.bind(t, |_| false);
                    let batch = FeatureBatch {
                        fv: v[0],
                        fi: v[1],
                        ids_v: &labels,
                        ids_i: &labels,
                    };
                    Ok(id_objective(&p, &batch, &cfg)?.total)
                },
                &feats,
            )?;
        }
    }
    Ok(())
}
