//! Finite-difference checks over every op kind and over the miniature
//! end-to-end topologies. `spkbeam gradcheck` runs [`run_suite`].

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{check_gradient, Conv1dAttrs, Graph, OpAttrs, OpKind, Tensor, Var};
use crate::dsp::AudioSignal;
use crate::error::Result;
use crate::loss::{multitask_loss, pit_loss, reference_var};
use crate::model::{IpdMode, Model, ModelKind, TopologyConfig};
use crate::nn::check_param_gradients;

/// Largest relative error a check may show and still pass.
pub const TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Random cases per op kind in the full suite.
pub const OP_SEEDS: u64 = 100;

/// One op applied to concrete inputs; the checked scalar is
/// `sum(op(inputs) * weights)`.
#[derive(Clone, Debug)]
pub struct OpCase {
    pub kind: OpKind,
    pub inputs: Vec<Tensor>,
    pub attrs: OpAttrs,
    pub weights: Tensor,
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=6)
}

fn shape(rng: &mut ChaCha8Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| dim(rng)).collect()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Values with magnitude in `[lo, hi]` and random sign, keeping kinks and
/// poles out of reach of the difference step.
fn signed(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(lo..hi);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// A random, well-conditioned case for `kind`; every dimension is at most 6
/// except convolution lengths, which must cover the kernel span.
pub fn random_op_case(kind: OpKind, seed: u64) -> OpCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (kind as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let rng = &mut rng;
    let mut attrs = OpAttrs::default();
    let inputs = match kind {
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
            let rank = rng.random_range(1..=3);
            let lhs = shape(rng, rank);
            let rhs: Vec<usize> = match rng.random_range(0..3) {
                0 => lhs.clone(),
                1 => vec![1; rank],
                _ => lhs.iter().map(|&d| if rng.random_bool(0.5) { 1 } else { d }).collect(),
            };
            let b = if kind == OpKind::Div {
                signed(rng, &rhs, 0.5, 2.0)
            } else {
                uniform(rng, &rhs, -1.0, 1.0)
            };
            vec![uniform(rng, &lhs, -1.0, 1.0), b]
        }
        OpKind::Scale | OpKind::AddScalar => {
            attrs.scalar = rng.random_range(-3.0..3.0);
            let rank = rng.random_range(1..=3);
            let s = shape(rng, rank);
            vec![uniform(rng, &s, -1.0, 1.0)]
        }
        OpKind::MatMul => {
            let (m, k, n) = (dim(rng), dim(rng), dim(rng));
            vec![uniform(rng, &[m, k], -1.0, 1.0), uniform(rng, &[k, n], -1.0, 1.0)]
        }
        OpKind::Conv1d => {
            let groups = rng.random_range(1..=3);
            let cin = groups * rng.random_range(1..=2);
            let cout = groups * rng.random_range(1..=2);
            let k = rng.random_range(1..=4);
            attrs.conv = Conv1dAttrs {
                stride: rng.random_range(1..=3),
                dilation: rng.random_range(1..=3),
                groups,
                padding: rng.random_range(0..=2),
            };
            let span = (k - 1) * attrs.conv.dilation + 1;
            let min_len = span.saturating_sub(2 * attrs.conv.padding).max(1);
            let t = min_len + rng.random_range(0..=5);
            vec![
                uniform(rng, &[cin, t], -1.0, 1.0),
                uniform(rng, &[cout, cin / groups, k], -1.0, 1.0),
            ]
        }
        OpKind::Conv1dTranspose => {
            attrs.conv.stride = rng.random_range(1..=3);
            let (cin, cout, t, k) = (dim(rng), dim(rng), dim(rng), rng.random_range(1..=4));
            vec![uniform(rng, &[cin, t], -1.0, 1.0), uniform(rng, &[cin, cout, k], -1.0, 1.0)]
        }
        OpKind::Prelu => {
            let s = shape(rng, 2);
            let slopes = if rng.random_bool(0.5) { 1 } else { s[0] };
            vec![signed(rng, &s, 0.05, 1.0), uniform(rng, &[slopes], 0.0, 0.5)]
        }
        OpKind::Relu => {
            let rank = rng.random_range(1..=3);
            let s = shape(rng, rank);
            vec![signed(rng, &s, 0.05, 1.0)]
        }
        OpKind::Sigmoid | OpKind::Exp => {
            let rank = rng.random_range(1..=3);
            let s = shape(rng, rank);
            vec![uniform(rng, &s, -2.0, 2.0)]
        }
        OpKind::Log | OpKind::Power => {
            if kind == OpKind::Power {
                attrs.scalar = rng.random_range(-2.0..3.0);
            }
            let rank = rng.random_range(1..=3);
            let s = shape(rng, rank);
            vec![uniform(rng, &s, 0.3, 2.0)]
        }
        OpKind::Mean | OpKind::Sum | OpKind::Softmax | OpKind::LogSoftmax => {
            let rank = rng.random_range(1..=3);
            let s = shape(rng, rank);
            let ax = rng.random_range(0..rank);
            attrs.axis = match kind {
                OpKind::Mean | OpKind::Sum if rng.random_bool(0.3) => None,
                _ => Some(ax),
            };
            vec![uniform(rng, &s, -2.0, 2.0)]
        }
        OpKind::Concat => {
            let rank = rng.random_range(1..=3);
            let ax = rng.random_range(0..rank);
            attrs.axis = Some(ax);
            let base = shape(rng, rank);
            (0..rng.random_range(1..=3))
                .map(|_| {
                    let mut s = base.clone();
                    s[ax] = dim(rng);
                    uniform(rng, &s, -1.0, 1.0)
                })
                .collect()
        }
        OpKind::Slice => {
            let rank = rng.random_range(1..=3);
            let s = shape(rng, rank);
            let ax = rng.random_range(0..rank);
            attrs.axis = Some(ax);
            attrs.start = rng.random_range(0..s[ax]);
            attrs.end = rng.random_range(attrs.start + 1..=s[ax]);
            vec![uniform(rng, &s, -1.0, 1.0)]
        }
        OpKind::LayerNormGlobal => {
            // with two elements the output is ±1 whatever x is; three or
            // more keep the input gradient away from roundoff
            let c = dim(rng);
            let t = rng.random_range(3usize.div_ceil(c)..=6);
            attrs.scalar = 1e-8;
            vec![
                uniform(rng, &[c, t], -1.0, 1.0),
                uniform(rng, &[c], 0.5, 1.5),
                uniform(rng, &[c], -0.5, 0.5),
            ]
        }
        OpKind::Gather => {
            let rank = rng.random_range(1..=3);
            let s = shape(rng, rank);
            let last = s[rank - 1];
            attrs.indices = (0..dim(rng)).map(|_| rng.random_range(0..last)).collect();
            vec![uniform(rng, &s, -1.0, 1.0)]
        }
        OpKind::Reshape => {
            let rank = rng.random_range(1..=3);
            let s = shape(rng, rank);
            attrs.shape = s.iter().rev().copied().collect();
            if rng.random_bool(0.5) {
                attrs.shape = vec![s.iter().product()];
            }
            vec![uniform(rng, &s, -1.0, 1.0)]
        }
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = g.apply(kind, &vars, &attrs).expect("generated case is well formed");
    let out_shape = g.shape(out).to_vec();
    let weights = uniform(rng, &out_shape, -1.0, 1.0);
    OpCase {
        kind,
        inputs,
        attrs,
        weights,
    }
}

/// Worst relative error over every input of the case.
pub fn check_op_case(case: &OpCase) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..case.inputs.len() {
        let err = check_gradient(
            |g: &mut Graph, x: Var| {
                let vars: Vec<Var> = case
                    .inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| if j == i { x } else { g.constant(t.clone()) })
                    .collect();
                let out = g.apply(case.kind, &vars, &case.attrs)?;
                let w = g.constant(case.weights.clone());
                let weighted = g.mul(out, w)?;
                Ok(g.sum_all(weighted))
            },
            &case.inputs[i],
            STEP,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-0.5..0.5)).collect()
}

/// Model kinds, IPD modes and α values covered end to end.
pub fn model_cases() -> Vec<(ModelKind, IpdMode, f64)> {
    let mut v = Vec::new();
    for ipd in [IpdMode::None, IpdMode::Input, IpdMode::Internal] {
        for alpha in [0.0, 10.0] {
            v.push((ModelKind::SpeakerBeam, ipd, alpha));
        }
    }
    for ipd in [IpdMode::None, IpdMode::Input] {
        v.push((ModelKind::TasNet, ipd, 0.0));
    }
    v
}

/// Parameter-gradient check of the full training loss of a miniature
/// model on random audio. Returns the worst error over all parameters.
pub fn check_model(kind: ModelKind, ipd: IpdMode, alpha: f64, seed: u64) -> Result<f64> {
    Ok(check_model_params(kind, ipd, alpha, seed)?
        .iter()
        .map(|(_, e)| *e)
        .fold(0.0, f64::max))
}

/// [`check_model`] broken down per parameter tensor.
pub fn check_model_params(kind: ModelKind, ipd: IpdMode, alpha: f64, seed: u64) -> Result<Vec<(String, f64)>> {
    let cfg = TopologyConfig::miniature()
        .with_kind(kind)
        .with_ipd(ipd)
        .with_speakers(3);
    let mut model = Model::new(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
    // Zero-initialized biases put encoder frames that the ReLU silences
    // exactly on the PReLU kink downstream; move off it.
    let biases: Vec<_> = model
        .params()
        .ids()
        .filter(|&id| model.params().name(id).ends_with(".bias"))
        .collect();
    for id in biases {
        for v in model.params_mut().get_mut(id).data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let len = 60;
    let s1 = noise(&mut rng, len);
    let s2 = noise(&mut rng, len);
    let mix: Vec<f64> = s1.iter().zip(&s2).map(|(a, b)| a + b).collect();
    let mixture = if cfg.channels() == 2 {
        let mut delayed = vec![0.0; len];
        for n in 1..len {
            delayed[n] = s1[n - 1] + s2[n];
        }
        AudioSignal::new(vec![mix, delayed], crate::dsp::DEFAULT_SAMPLE_RATE)?
    } else {
        AudioSignal::mono(mix, crate::dsp::DEFAULT_SAMPLE_RATE)?
    };
    let adaptation = noise(&mut rng, 40);
    let label = rng.random_range(0..3);
    let ipd_feats = model.ipd_features(&mixture)?;
    check_param_gradients(
        model.params(),
        |g, p| {
            let ipd = ipd_feats.as_deref();
            match kind {
                ModelKind::TasNet => {
                    let out = model.forward(g, p, mixture.channel(0), None, ipd)?;
                    let r = [reference_var(g, &s1), reference_var(g, &s2)];
                    Ok(pit_loss(g, r, [out.outputs[0], out.outputs[1]])?.0)
                }
                _ => {
                    let out = model.forward(g, p, mixture.channel(0), Some(&adaptation), ipd)?;
                    let r = reference_var(g, &s1);
                    let w = p.var(model.speaker_projection().expect("extraction model"));
                    let e = out.embedding.expect("extraction model");
                    Ok(multitask_loss(g, r, out.outputs[0], e, w, label, alpha)?.0)
                }
            }
        },
        STEP,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    pub name: String,
    pub max_rel_err: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SuiteReport {
    pub entries: Vec<SuiteEntry>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(SuiteEntry::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &SuiteEntry> {
        self.entries.iter().filter(|e| !e.passed())
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            let verdict = if e.passed() { "ok" } else { "FAIL" };
            writeln!(f, "{:<36} {:>10.3e}  {verdict}", e.name, e.max_rel_err)?;
        }
        Ok(())
    }
}

/// Every op kind over `op_seeds` random cases starting at `seed`, then
/// every end-to-end model case.
pub fn run_suite(seed: u64, op_seeds: u64) -> Result<SuiteReport> {
    let mut entries = Vec::new();
    for kind in OpKind::ALL {
        let mut worst: f64 = 0.0;
        for s in seed..seed + op_seeds {
            worst = worst.max(check_op_case(&random_op_case(kind, s))?);
        }
        entries.push(SuiteEntry {
            name: format!("op {kind}"),
            max_rel_err: worst,
        });
    }
    for (kind, ipd, alpha) in model_cases() {
        entries.push(SuiteEntry {
            name: format!("model {kind} ipd={ipd} alpha={alpha}"),
            max_rel_err: check_model(kind, ipd, alpha, seed)?,
        });
    }
    Ok(SuiteReport { entries })
}
