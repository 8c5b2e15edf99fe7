//! Finite-difference verification of every primitive, every model stage and
//! every loss on small random instances.

use avcil_core::diffmath::{grad_check, with_gradient_fault, OpKind, Tape, Tensor, Var};
use avcil_core::model::{
    forward, infer, init_params, pool_visual, spatial_attention, temporal_attention, Batch, Modality, ModelParams,
    ParamVars,
};
use avcil_core::objectives::{
    c_avss, cross_entropy, d_avsc, full_kd, i_avss, ss_ce, tkd, total_loss, vad, LossWeights, TaskLayout,
};
use avcil_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteSpec {
    pub n: usize,
    pub d: usize,
    pub frames: usize,
    pub cells: usize,
    /// At least 3; the first `classes - 2` form the old tasks.
    pub classes: usize,
    pub seeds: Vec<u64>,
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        SuiteSpec {
            n: 6,
            d: 8,
            frames: 3,
            cells: 4,
            classes: 5,
            seeds: (0..20).collect(),
            step: 1e-6,
            tolerance: 1e-5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Op,
    Model,
    Loss,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseResult {
    pub name: &'static str,
    pub group: Group,
    pub max_error: f64,
    pub worst_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub cases: Vec<CaseResult>,
}

impl SuiteReport {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn failures(&self) -> Vec<&CaseResult> {
        self.cases.iter().filter(|c| !(c.max_error < self.tolerance)).collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn max_error(&self) -> f64 {
        self.cases.iter().map(|c| c.max_error).fold(0.0, f64::max)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.cases {
            let mark = if c.max_error < self.tolerance { "ok  " } else { "FAIL" };
            let group = match c.group {
                Group::Op => "op",
                Group::Model => "model",
                Group::Loss => "loss",
            };
            s.push_str(&format!(
                "{mark} {group:<5} {:<20} max rel err {:.3e} (seed {})\n",
                c.name, c.max_error, c.worst_seed
            ));
        }
        s
    }
}

/// Random inputs for one seed.
struct Inputs {
    x_nd: Tensor,
    c_nd: Tensor,
    pos_nd: Tensor,
    row: Tensor,
    pos_row: Tensor,
    square: Tensor,
    x_nld: Tensor,
    logits: Tensor,
    probs: Tensor,
    labels: Vec<usize>,
    mask: Vec<bool>,
    layout: TaskLayout,
    teacher_logits: Tensor,
    params: ModelParams,
    batch: Batch,
    teacher_spatial: Tensor,
    teacher_temporal: Tensor,
    raw_spatial: Tensor,
    raw_temporal: Tensor,
    teacher_inference: avcil_core::model::Inference,
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape product")
}

fn softmax_const(x: &Tensor, axis: usize) -> Result<Tensor> {
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let s = t.softmax(v, axis)?;
    Ok(t.value(s).clone())
}

impl Inputs {
    fn new(spec: &SuiteSpec, seed: u64) -> Result<Inputs> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        let (n, d, l, s, c) = (spec.n, spec.d, spec.frames, spec.cells, spec.classes);
        let old = c - 2;
        let labels: Vec<usize> = (0..n).map(|i| [0, c - 1, 2 % c, 1, c - 2, c - 2][i % 6]).collect();
        let mask: Vec<bool> = labels.iter().map(|&y| y < old).collect();
        let params = init_params(d, c, seed)?;
        let batch = Batch {
            audio: uniform(&[n, d], -1.0, 1.0, r),
            visual: uniform(&[n, l, s, d], -1.0, 1.0, r),
        };
        let teacher = init_params(d, old, seed.wrapping_add(1 << 20))?;
        let teacher_inference = infer(&teacher, &batch, Modality::Audiovisual)?;
        let mut bounds = vec![1; old];
        if old >= 2 {
            bounds = vec![old - 1, 1];
        }
        bounds.push(2);
        Ok(Inputs {
            x_nd: uniform(&[n, d], -1.0, 1.0, r),
            c_nd: uniform(&[n, d], -1.0, 1.0, r),
            pos_nd: uniform(&[n, d], 0.5, 1.5, r),
            row: uniform(&[1, d], -1.0, 1.0, r),
            pos_row: uniform(&[1, d], 0.5, 1.5, r),
            square: uniform(&[d, d], -1.0, 1.0, r),
            x_nld: uniform(&[n, l, d], -1.0, 1.0, r),
            logits: uniform(&[n, c], -2.0, 2.0, r),
            probs: softmax_const(&uniform(&[n, c], -2.0, 2.0, r), 1)?,
            labels,
            mask,
            layout: TaskLayout::new(bounds)?,
            teacher_logits: uniform(&[n, old], -2.0, 2.0, r),
            teacher_spatial: softmax_const(&uniform(&[n, l, s, d], -2.0, 2.0, r), 2)?,
            teacher_temporal: softmax_const(&uniform(&[n, l, d], -2.0, 2.0, r), 1)?,
            raw_spatial: uniform(&[n, l, s, d], -2.0, 2.0, r),
            raw_temporal: uniform(&[n, l, d], -2.0, 2.0, r),
            params,
            batch,
            teacher_inference,
        })
    }
}

/// Scalar `sum(y * w)` with fixed, position-dependent weights, so every
/// output coordinate contributes a distinct amount.
fn probe(t: &mut Tape, y: Var) -> Result<Var> {
    probe_phase(t, y, 0.3)
}

fn probe_phase(t: &mut Tape, y: Var, phase: f64) -> Result<Var> {
    let shape = t.shape(y).to_vec();
    let numel: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..numel).map(|i| (0.61 * i as f64 + phase).sin()).collect())?;
    let wv = t.constant(w);
    let prod = t.mul(y, wv)?;
    Ok(t.sum_all(prod))
}

fn both(t: &mut Tape, a: Var, b: Var) -> Result<Var> {
    // different weights, so that a - b style pairs cannot cancel
    let pa = probe(t, a)?;
    let pb = probe_phase(t, b, 1.9)?;
    t.add(pa, pb)
}

/// Registers `params` as constants except buffer `k`, which becomes `x`.
fn params_with(t: &mut Tape, params: &ModelParams, k: usize, x: Var) -> ParamVars {
    let mut pv = params.register(t, false);
    match k {
        0 => pv.w_a = x,
        1 => pv.w_v = x,
        2 => pv.u_a = x,
        3 => pv.u_v = x,
        4 => pv.cls_weight = x,
        _ => pv.cls_bias = x,
    }
    pv
}

type Check = fn(&Inputs, f64) -> Result<f64>;

fn max_of(errs: impl IntoIterator<Item = Result<f64>>) -> Result<f64> {
    errs.into_iter().try_fold(0.0, |m: f64, e| Ok(m.max(e?)))
}

/// Worst error over the listed parameter buffers of a function of the
/// parameters.
fn over_params(inp: &Inputs, h: f64, buffers: &[usize], f: impl Fn(&mut Tape, &ParamVars) -> Result<Var> + Copy) -> Result<f64> {
    max_of(buffers.iter().map(|&k| {
        let x = inp.params.buffers()[k].clone();
        grad_check(
            |t, v| {
                let pv = params_with(t, &inp.params, k, v);
                f(t, &pv)
            },
            &x,
            h,
        )
    }))
}

/// Worst error of a loss of `(f_a, f_pv)` in both arguments.
fn pair(inp: &Inputs, h: f64, f: impl Fn(&mut Tape, Var, Var) -> Result<Var> + Copy) -> Result<f64> {
    let (a, v) = (&inp.x_nd, &inp.c_nd);
    max_of([
        grad_check(|t, x| { let y = t.constant(v.clone()); f(t, x, y) }, a, h),
        grad_check(|t, y| { let x = t.constant(a.clone()); f(t, x, y) }, v, h),
    ])
}

const CASES: &[(&str, Group, Check)] = &[
    ("matmul", Group::Op, |i, h| {
        let a = i.x_nd.clone();
        grad_check(|t, x| { let av = t.constant(a.clone()); let y = t.matmul(av, x)?; let z = t.matmul(y, x)?; probe(t, z) }, &i.square, h)
    }),
    ("transpose", Group::Op, |i, h| grad_check(|t, x| { let y = t.transpose(x)?; probe(t, y) }, &i.x_nd, h)),
    ("add", Group::Op, |i, h| {
        grad_check(|t, x| { let c = t.constant(i.c_nd.clone()); let a = t.add(c, x)?; let b = t.add(x, c)?; both(t, a, b) }, &i.row, h)
    }),
    ("sub", Group::Op, |i, h| {
        grad_check(|t, x| { let c = t.constant(i.c_nd.clone()); let a = t.sub(c, x)?; let b = t.sub(x, c)?; both(t, a, b) }, &i.row, h)
    }),
    ("mul", Group::Op, |i, h| {
        max_of([
            grad_check(|t, x| { let c = t.constant(i.c_nd.clone()); let a = t.mul(c, x)?; let b = t.mul(x, c)?; both(t, a, b) }, &i.row, h),
            grad_check(|t, x| { let y = t.mul(x, x)?; probe(t, y) }, &i.x_nd, h),
        ])
    }),
    ("div", Group::Op, |i, h| {
        grad_check(|t, x| { let c = t.constant(i.pos_nd.clone()); let a = t.div(c, x)?; let b = t.div(x, c)?; both(t, a, b) }, &i.pos_row, h)
    }),
    ("scale", Group::Op, |i, h| grad_check(|t, x| { let y = t.scale(x, -1.7); probe(t, y) }, &i.x_nd, h)),
    ("tanh", Group::Op, |i, h| grad_check(|t, x| { let y = t.tanh(x); probe(t, y) }, &i.x_nd, h)),
    ("exp", Group::Op, |i, h| grad_check(|t, x| { let y = t.exp(x); probe(t, y) }, &i.x_nd, h)),
    ("log", Group::Op, |i, h| grad_check(|t, x| { let y = t.log(x)?; probe(t, y) }, &i.pos_nd, h)),
    ("sqrt", Group::Op, |i, h| grad_check(|t, x| { let y = t.sqrt(x)?; probe(t, y) }, &i.pos_nd, h)),
    ("sum", Group::Op, |i, h| {
        max_of((0..3).map(|axis| grad_check(|t, x| { let y = t.sum(x, axis)?; probe(t, y) }, &i.x_nld, h)))
    }),
    ("mean", Group::Op, |i, h| grad_check(|t, x| { let y = t.mean(x, 1)?; probe(t, y) }, &i.x_nld, h)),
    ("sum_all", Group::Op, |i, h| grad_check(|t, x| { let y = t.exp(x); Ok(t.sum_all(y)) }, &i.x_nd, h)),
    ("reshape", Group::Op, |i, h| {
        let s = i.x_nd.shape().to_vec();
        grad_check(|t, x| { let y = t.reshape(x, &[s[1], s[0]])?; probe(t, y) }, &i.x_nd, h)
    }),
    ("concat", Group::Op, |i, h| {
        grad_check(|t, x| { let c = t.constant(i.c_nd.clone()); let y = t.concat(&[x, c, x], 1)?; probe(t, y) }, &i.x_nd, h)
    }),
    ("narrow", Group::Op, |i, h| {
        let l = i.x_nld.shape()[1];
        grad_check(|t, x| { let y = t.narrow(x, 1, l / 2, l - l / 2)?; probe(t, y) }, &i.x_nld, h)
    }),
    ("index_select", Group::Op, |i, h| {
        let n = i.x_nd.shape()[0];
        let idx = [2 % n, 0, 2 % n, n - 1];
        grad_check(|t, x| { let y = t.index_select(x, &idx)?; probe(t, y) }, &i.x_nd, h)
    }),
    ("gather", Group::Op, |i, h| grad_check(|t, x| { let y = t.gather(x, &i.labels)?; probe(t, y) }, &i.logits, h)),
    ("softmax", Group::Op, |i, h| {
        max_of((0..3).map(|axis| grad_check(|t, x| { let y = t.softmax(x, axis)?; probe(t, y) }, &i.x_nld, h)))
    }),
    ("log_softmax", Group::Op, |i, h| grad_check(|t, x| { let y = t.log_softmax(x, 1)?; probe(t, y) }, &i.logits, h)),
    ("kl_rows", Group::Op, |i, h| {
        grad_check(
            |t, x| {
                let p = t.softmax(x, 1)?;
                let q = t.constant(i.probs.clone());
                let a = t.kl_rows(p, q, 1)?;
                let b = t.kl_rows(q, p, 1)?;
                t.add(a, b)
            },
            &i.logits,
            h,
        )
    }),
    ("spatial_attention", Group::Model, |i, h| {
        over_params(i, h, &[0, 1], |t, p| {
            let (fa, fv) = (t.constant(i.batch.audio.clone()), t.constant(i.batch.visual.clone()));
            let (w, _) = spatial_attention(t, fa, fv, p)?;
            probe(t, w)
        })
    }),
    ("temporal_attention", Group::Model, |i, h| {
        over_params(i, h, &[0, 1], |t, p| {
            let (fa, fv) = (t.constant(i.batch.audio.clone()), t.constant(i.batch.visual.clone()));
            let (w, sv) = spatial_attention(t, fa, fv, p)?;
            let tem = temporal_attention(t, w, sv)?;
            probe(t, tem)
        })
    }),
    ("visual_pooling", Group::Model, |i, h| {
        over_params(i, h, &[0, 1], |t, p| {
            let (fa, fv) = (t.constant(i.batch.audio.clone()), t.constant(i.batch.visual.clone()));
            let (w, sv) = spatial_attention(t, fa, fv, p)?;
            let tem = temporal_attention(t, w, sv)?;
            let pooled = pool_visual(t, fv, w, tem)?;
            probe(t, pooled)
        })
    }),
    ("fusion_classifier", Group::Model, |i, h| {
        over_params(i, h, &[0, 1, 2, 3, 4, 5], |t, p| {
            let tr = forward(t, p, &i.batch, Modality::Audiovisual)?;
            probe(t, tr.logits)
        })
    }),
    ("i_avss", Group::Loss, |i, h| pair(i, h, |t, a, v| i_avss(t, a, v, 0.05, true))),
    ("c_avss", Group::Loss, |i, h| pair(i, h, |t, a, v| c_avss(t, a, v, &i.labels, 0.05, true))),
    ("d_avsc", Group::Loss, |i, h| pair(i, h, |t, a, v| d_avsc(t, a, v, &i.labels, &LossWeights::default()))),
    ("vad_spatial", Group::Loss, |i, h| {
        grad_check(
            |t, x| {
                let s = t.softmax(x, 2)?;
                let rt = t.constant(i.raw_temporal.clone());
                let tm = t.softmax(rt, 1)?;
                vad(t, s, tm, &i.teacher_spatial, &i.teacher_temporal, &i.mask, 0.5)
            },
            &i.raw_spatial,
            h,
        )
    }),
    ("vad_temporal", Group::Loss, |i, h| {
        grad_check(
            |t, x| {
                let rs = t.constant(i.raw_spatial.clone());
                let s = t.softmax(rs, 2)?;
                let tm = t.softmax(x, 1)?;
                vad(t, s, tm, &i.teacher_spatial, &i.teacher_temporal, &i.mask, 0.3)
            },
            &i.raw_temporal,
            h,
        )
    }),
    ("cross_entropy", Group::Loss, |i, h| grad_check(|t, x| cross_entropy(t, x, &i.labels), &i.logits, h)),
    ("ss_ce", Group::Loss, |i, h| grad_check(|t, x| ss_ce(t, x, &i.labels, &i.layout), &i.logits, h)),
    ("tkd", Group::Loss, |i, h| grad_check(|t, x| tkd(t, x, &i.teacher_logits, &i.layout), &i.logits, h)),
    ("full_kd", Group::Loss, |i, h| grad_check(|t, x| full_kd(t, x, &i.teacher_logits), &i.logits, h)),
    ("total_loss", Group::Loss, |i, h| {
        over_params(i, h, &[0, 1, 2, 3, 4, 5], |t, p| {
            let tr = forward(t, p, &i.batch, Modality::Audiovisual)?;
            total_loss(t, &tr, Some(&i.teacher_inference), &i.labels, &i.mask, &i.layout, &LossWeights::default())
        })
    }),
];

/// Names of every case, in report order.
pub fn case_names() -> Vec<&'static str> {
    CASES.iter().map(|c| c.0).collect()
}

/// Primitives whose backward rule can be perturbed for fault injection.
pub fn faultable_ops() -> Vec<OpKind> {
    OpKind::ALL.iter().copied().filter(|k| *k != OpKind::Leaf).collect()
}

pub fn run_suite(spec: &SuiteSpec) -> Result<SuiteReport> {
    if spec.classes < 3 || spec.n == 0 {
        return Err(avcil_core::Error::Contract("the suite needs at least 3 classes and 1 sample".into()));
    }
    let inputs: Vec<(u64, Inputs)> = spec
        .seeds
        .iter()
        .map(|&s| Inputs::new(spec, s).map(|i| (s, i)))
        .collect::<Result<_>>()?;
    let mut cases = Vec::with_capacity(CASES.len());
    for &(name, group, check) in CASES {
        let mut worst = (0.0, spec.seeds.first().copied().unwrap_or(0));
        for (seed, inp) in &inputs {
            let e = check(inp, spec.step)?;
            // NaN counts as a failure
            #[allow(clippy::neg_cmp_op_on_partial_ord)]
            if !(e <= worst.0) {
                worst = (e, *seed);
            }
        }
        cases.push(CaseResult {
            name,
            group,
            max_error: worst.0,
            worst_seed: worst.1,
        });
    }
    Ok(SuiteReport {
        tolerance: spec.tolerance,
        cases,
    })
}

/// The suite with the backward rule of `kind` scaled by `factor`.
pub fn run_suite_with_fault(spec: &SuiteSpec, kind: OpKind, factor: f64) -> Result<SuiteReport> {
    with_gradient_fault(kind, factor, || run_suite(spec))
}
