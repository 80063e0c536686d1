//! Central finite differences, the oracle for every analytic gradient.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::distill::{cofinetune_objective, distill_objective, init_student, DistillSpec, ProjectionInit, ProjectionSet, Student, TeacherBundle, TeacherHeads, TeacherView, Weighting};
use crate::encoder::{Classifier, EncoderConfig, EncoderParams, PoolHead, Pooling};
use crate::params::collect_all;
use crate::tape::PoolMode;
use crate::tasks::{make_batches, Dataset, Example, TaskKind};
use crate::{NodeId, Parameters, Result, Rng, Tape, Tensor};

/// Step used by the suite.
pub const STEP: f64 = 1e-4;

/// `(f(x + h·e_k) − f(x − h·e_k)) / 2h` for every coordinate `k`.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            probe[k] = x[k] + h;
            let up = f(&probe);
            probe[k] = x[k] - h;
            let down = f(&probe);
            probe[k] = x[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest `|a − n| / max(1, |a|, |n|)` over paired analytic and numeric entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Central differences of `loss` with respect to every parameter entry of
/// `model`, flattened in `named_mut` order. Entries are restored afterwards.
pub fn param_grads_numeric<P: Parameters<f64>>(model: &mut P, mut loss: impl FnMut(&mut P) -> f64, h: f64) -> Vec<f64> {
    let sizes: Vec<usize> = model.named_mut("").iter().map(|(_, t)| t.len()).collect();
    let mut out = Vec::with_capacity(sizes.iter().sum());
    for (ti, &n) in sizes.iter().enumerate() {
        for k in 0..n {
            let x = model.named_mut("")[ti].1.values()[k];
            model.named_mut("")[ti].1.values_mut()[k] = x + h;
            let up = loss(model);
            model.named_mut("")[ti].1.values_mut()[k] = x - h;
            let down = loss(model);
            model.named_mut("")[ti].1.values_mut()[k] = x;
            out.push((up - down) / (2.0 * h));
        }
    }
    out
}

/// Accumulated gradients of every parameter of `model`, flattened like
/// [`param_grads_numeric`]; zeros where a tensor received none.
pub fn param_grads_analytic<P: Parameters<f64>>(model: &mut P) -> Vec<f64> {
    let mut out = Vec::new();
    for (_, t) in model.named_mut("") {
        match t.grad() {
            Some(g) => out.extend_from_slice(g),
            None => out.extend(core::iter::repeat(0.0).take(t.len())),
        }
    }
    out
}

/// Outcome of one analytic-versus-numeric comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
}

type Build = fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>;

/// Differentiates `Σ r ⊙ build(inputs)` for random `r`, so every entry of a
/// non-scalar output is exercised.
fn op_check(name: &str, shapes: &[&[usize]], rng: &mut Rng, shift: f64, build: Build) -> Result<GradCheck> {
    let inputs: Vec<Tensor<f64>> = shapes
        .iter()
        .map(|s| {
            let mut t = Tensor::<f64>::randn(s, 1.0, rng);
            for v in t.values_mut() {
                *v += shift * v.signum();
            }
            t.param()
        })
        .collect();
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = build(&mut tape, &ids)?;
    let r: Vec<f64> = (0..tape.value(out).len()).map(|_| rng.normal()).collect();
    let weighted = tape.mul_const(out, r.clone())?;
    let loss = tape.sum(weighted);
    tape.backward(loss)?;
    let analytic: Vec<f64> = ids
        .iter()
        .zip(&inputs)
        .flat_map(|(&id, t)| tape.grad(id).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();
    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.values().iter().copied()).collect();
    let numeric = finite_diff_grad(
        |x| {
            let mut tape = Tape::new();
            let mut at = 0;
            let ids: Vec<NodeId> = inputs
                .iter()
                .map(|t| {
                    let id = tape.constant(t.shape().to_vec(), x[at..at + t.len()].to_vec()).expect("shape");
                    at += t.len();
                    id
                })
                .collect();
            let out = build(&mut tape, &ids).expect("forward");
            tape.value(out).iter().zip(&r).map(|(a, b)| a * b).sum()
        },
        &flat,
        STEP,
    );
    Ok(GradCheck {
        name: name.to_string(),
        entries: flat.len(),
        max_rel_err: max_relative_error(&analytic, &numeric),
    })
}

const MASK: [bool; 8] = [true, true, true, false, true, true, false, false];

/// Every differentiable tape operation.
pub fn op_checks(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = Rng::derive(seed, 0);
    let r = &mut rng;
    let cases: Vec<(&str, Vec<&[usize]>, f64, Build)> = vec![
        ("matmul", vec![&[3, 4], &[4, 2]], 0.0, |t, x| t.matmul(x[0], x[1])),
        ("add", vec![&[3, 2], &[3, 2]], 0.0, |t, x| t.add(x[0], x[1])),
        ("sub", vec![&[3, 2], &[3, 2]], 0.0, |t, x| t.sub(x[0], x[1])),
        ("mul", vec![&[3, 2], &[3, 2]], 0.0, |t, x| t.mul(x[0], x[1])),
        ("add_bias", vec![&[3, 4], &[4]], 0.0, |t, x| t.add_bias(x[0], x[1])),
        ("mul_const", vec![&[5]], 0.0, |t, x| t.mul_const(x[0], vec![0.5, -2.0, 0.0, 1.0, 3.0])),
        ("scale", vec![&[2, 3]], 0.0, |t, x| Ok(t.scale(x[0], -1.7))),
        ("gelu", vec![&[2, 5]], 0.0, |t, x| Ok(t.gelu(x[0]))),
        ("relu", vec![&[2, 5]], 0.05, |t, x| Ok(t.relu(x[0]))),
        ("tanh", vec![&[2, 5]], 0.0, |t, x| Ok(t.tanh(x[0]))),
        ("gather", vec![&[5, 3]], 0.0, |t, x| t.gather(x[0], vec![4, 0, 4, 2])),
        ("layer_norm", vec![&[3, 6], &[6], &[6]], 0.0, |t, x| t.layer_norm(x[0], x[1], x[2])),
        ("attention", vec![&[8, 4], &[8, 4], &[8, 4]], 0.0, |t, x| t.attention(x[0], x[1], x[2], 2, 4, &MASK)),
        ("softmax", vec![&[3, 4]], 0.0, |t, x| t.softmax_rows(x[0], 1.0)),
        ("softmax_tempered", vec![&[3, 4]], 0.0, |t, x| t.softmax_rows(x[0], 2.5)),
        ("cross_entropy", vec![&[3, 4]], 0.0, |t, x| {
            let p = t.softmax_rows(x[0], 1.0)?;
            t.cross_entropy_rows(p, vec![0.1, 0.2, 0.3, 0.4, 0.0, 1.0, 0.0, 0.0, 0.25, 0.25, 0.25, 0.25])
        }),
        ("mse", vec![&[4, 3], &[4, 3]], 0.0, |t, x| t.mse(x[0], x[1], None)),
        ("mse_masked", vec![&[4, 3], &[4, 3]], 0.0, |t, x| t.mse(x[0], x[1], Some(vec![true, false, true, true]))),
        ("sum", vec![&[2, 3]], 0.0, |t, x| Ok(t.sum(x[0]))),
        ("mean", vec![&[2, 3]], 0.0, |t, x| Ok(t.mean(x[0]))),
        ("attn_pool", vec![&[8, 3], &[8, 1]], 0.0, |t, x| t.attn_pool(x[0], x[1], 4, &MASK)),
        ("pool_average", vec![&[8, 3]], 0.0, |t, x| t.pool(x[0], 4, &MASK, PoolMode::Average)),
        ("pool_max", vec![&[8, 3]], 0.0, |t, x| t.pool(x[0], 4, &MASK, PoolMode::Max)),
        ("pool_cls", vec![&[8, 3]], 0.0, |t, x| t.pool(x[0], 4, &MASK, PoolMode::Cls)),
    ];
    cases
        .into_iter()
        .map(|(name, shapes, shift, build)| op_check(name, &shapes, r, shift, build))
        .collect()
}

/// Two-teacher toy problem: `d = 8`, `K = 2`, `T = 2`.
pub struct Toy {
    pub spec: DistillSpec,
    pub bundle: TeacherBundle<f64>,
    pub student: Student<f64>,
    pub data: Dataset,
}

pub fn toy(seed: u64) -> Result<Toy> {
    let mut rng = Rng::derive(seed, 1);
    let spec = DistillSpec {
        teachers: 2,
        student_layers: 2,
        layer_ratio: 2,
        temperature: 2.0,
        projection_init: ProjectionInit::Gaussian,
        ..DistillSpec::default()
    };
    let config = EncoderConfig {
        vocab_size: 12,
        max_seq_len: 6,
        hidden_dim: 8,
        num_heads: 2,
        ffn_dim: 12,
        num_layers: 4,
        dropout: 0.0,
        init_std: 0.3,
        ..EncoderConfig::default()
    };
    let teachers = (0..2)
        .map(|_| EncoderParams::init(config.clone(), &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let heads = TeacherHeads::Shared(PoolHead::init(8, 4, 3, Pooling::Attentive, 0.3, &mut rng)?);
    let bundle = TeacherBundle { teachers, heads };
    let mut projections = ProjectionSet::init(&spec, 8, 8, &mut rng);
    for (_, w) in projections.named_mut("") {
        *w = Tensor::randn(w.shape(), 0.3, &mut rng).param();
    }
    let student = Student {
        model: Classifier {
            encoder: init_student(&bundle.teachers[0], 2, spec.student_init)?,
            head: PoolHead::init(8, 4, 3, Pooling::Attentive, 0.3, &mut rng)?,
        },
        projections,
    };
    let data = Dataset {
        kind: TaskKind::Topic18,
        classes: 3,
        examples: vec![
            Example { tokens: vec![1, 5, 7, 3], label: 0 },
            Example { tokens: vec![1, 9, 4, 4, 11, 2], label: 2 },
            Example { tokens: vec![1, 6], label: 1 },
        ],
    };
    Ok(Toy { spec, bundle, student, data })
}

fn compare<P: Parameters<f64>>(name: &str, model: &mut P, analytic: impl FnOnce(&mut P) -> Result<()>, value: impl FnMut(&mut P) -> f64) -> Result<GradCheck> {
    model.zero_grad();
    analytic(model)?;
    let a = param_grads_analytic(model);
    let n = param_grads_numeric(model, value, STEP);
    Ok(GradCheck {
        name: name.to_string(),
        entries: a.len(),
        max_rel_err: max_relative_error(&a, &n),
    })
}

/// Full student objective and co-finetuning objective on the toy problem,
/// once per weighting mode.
pub fn objective_checks(seed: u64) -> Result<Vec<GradCheck>> {
    let Toy { spec, mut bundle, student, data } = toy(seed)?;
    let batch = make_batches(&data, data.len(), None, 6)?.remove(0);
    let signals = bundle.signals(&batch.tokens, &spec)?;
    let mut out = Vec::new();
    for weighting in [Weighting::LossWeighted, Weighting::Uniform, Weighting::EnsembleAverage, Weighting::Single(1)] {
        let spec = DistillSpec { weighting, ..spec.clone() };
        let mut s = student.clone();
        out.push(compare(
            &alloc::format!("objective[{weighting}]"),
            &mut s,
            |s| {
                let mut tape = Tape::new();
                let (loss, _) = distill_objective(&mut tape, s, &signals, &batch, &spec, None)?;
                tape.backward(loss)?;
                collect_all(s, &tape);
                Ok(())
            },
            |s| {
                let mut tape = Tape::new();
                let (loss, _) = distill_objective(&mut tape, s, &signals, &batch, &spec, None).expect("objective");
                tape.scalar(loss)
            },
        )?);
    }
    let views = vec![
        TeacherView {
            labels: Some(batch.labels.iter().map(|&l| (l + 1) % batch.classes).collect()),
            ..TeacherView::default()
        },
        TeacherView {
            shard: Some((0..batch.len()).map(|r| r != 1).collect()),
            ..TeacherView::default()
        },
    ];
    out.push(compare(
        "cofinetune",
        &mut bundle,
        |b| {
            let mut tape = Tape::new();
            let loss = cofinetune_objective(&mut tape, b, &batch, &views, None)?;
            tape.backward(loss)?;
            collect_all(b, &tape);
            Ok(())
        },
        |b| {
            let mut tape = Tape::new();
            let loss = cofinetune_objective(&mut tape, b, &batch, &views, None).expect("objective");
            tape.scalar(loss)
        },
    )?);
    Ok(out)
}
