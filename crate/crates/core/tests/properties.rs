use mtkd_core::distill::{distill_objective, distill_step, map_layer, mt_hidden_loss, teacher_weight, DistillSpec, ProjectionSet};
use mtkd_core::encoder::{LayerStack, TokenBatch};
use mtkd_core::gradcheck::{param_grads_analytic, toy};
use mtkd_core::ops::{cross_entropy, mse, softmax, softmax_rows};
use mtkd_core::params::collect_all;
use mtkd_core::tasks::{accuracy, argmax_rows, gen_synthetic, macro_f1, make_batches, per_class_scores, TaskKind, TaskSpec};
use mtkd_core::{adam::AdamConfig, adam::AdamState, Parameters, Rng, Tape, Tensor};
use proptest::prelude::*;

fn logits(rows: usize, cols: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-15.0..15.0f64, rows * cols)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(z in logits(3, 5), t in 0.1..10.0f64) {
        let p = softmax_rows(&Tensor::new(vec![3, 5], z.clone()).unwrap(), t).unwrap();
        for row in p.values().chunks(5) {
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        prop_assert_eq!(argmax_rows(p.values(), 5), argmax_rows(&z, 5));
    }

    #[test]
    fn cross_entropy_of_onehot_is_negative_log(z in logits(1, 6), gold in 0usize..6) {
        let p = softmax(&z, 1.0);
        let mut y = vec![0.0; 6];
        y[gold] = 1.0;
        let ce = cross_entropy(&y, &p).unwrap();
        prop_assert!(ce >= 0.0);
        prop_assert_eq!(ce, -p[gold].max(1e-12).ln());
    }

    #[test]
    fn mse_is_symmetric(a in prop::collection::vec(-5.0..5.0f64, 12), b in prop::collection::vec(-5.0..5.0f64, 12)) {
        let a = Tensor::new(vec![3, 4], a).unwrap();
        let b = Tensor::new(vec![3, 4], b).unwrap();
        prop_assert_eq!(mse(&a, &b).unwrap(), mse(&b, &a).unwrap());
        prop_assert_eq!(mse(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn reused_tensor_sums_branch_gradients(x in prop::collection::vec(-3.0..3.0f64, 6)) {
        let x = Tensor::new(vec![2, 3], x).unwrap().param();
        let grad_of = |branches: &[u8]| {
            let mut tape = Tape::new();
            let id = tape.leaf(&x);
            let mut acc = None;
            for &b in branches {
                let y = match b {
                    0 => tape.tanh(id),
                    _ => tape.mul(id, id).unwrap(),
                };
                let s = tape.sum(y);
                acc = Some(match acc { None => s, Some(a) => tape.add(a, s).unwrap() });
            }
            tape.backward(acc.unwrap()).unwrap();
            tape.grad(id).unwrap().to_vec()
        };
        let both = grad_of(&[0, 1]);
        let (g0, g1) = (grad_of(&[0]), grad_of(&[1]));
        for k in 0..6 {
            prop_assert!((both[k] - (g0[k] + g1[k])).abs() < 1e-14);
        }
    }

    #[test]
    fn tempering_keeps_argmax(z in logits(4, 18), t in 0.05..20.0f64) {
        let mut tape = Tape::new();
        let id = tape.constant(vec![4, 18], z.clone()).unwrap();
        let p = tape.softmax_rows(id, t).unwrap();
        prop_assert_eq!(argmax_rows(tape.value(p), 18), argmax_rows(&z, 18));
    }

    #[test]
    fn teacher_weight_is_in_unit_interval(z in logits(1, 4), gold in 0usize..4) {
        let mut y = vec![0.0; 4];
        y[gold] = 1.0;
        let w = teacher_weight(&y, &softmax(&z, 1.0));
        prop_assert!(w > 0.0 && w <= 1.0);
    }

    #[test]
    fn map_layer_is_linear(t in 1usize..=3, k in 1usize..=6) {
        let m: Vec<usize> = (1..=k).map(|j| map_layer(j, k, t).unwrap()).collect();
        prop_assert_eq!(m[k - 1], t * k);
        prop_assert!(m.windows(2).all(|w| w[1] - w[0] == t));
        prop_assert!(map_layer(k + 1, k, t).is_err());
    }

    #[test]
    fn noise_free_labels_are_recoverable(seed in 0u64..1000, kind in 0usize..3) {
        let kind = [TaskKind::Sent2, TaskKind::Nli2, TaskKind::Topic18][kind];
        let spec = TaskSpec { kind, train: 60, dev: 20, test: 20, seed, ..TaskSpec::default() };
        let splits = gen_synthetic(&spec).unwrap();
        let layout = spec.layout();
        for d in [&splits.train, &splits.dev, &splits.test] {
            for e in &d.examples {
                prop_assert_eq!(layout.recover_label(&e.tokens), Some(e.label));
            }
        }
    }

    #[test]
    fn metric_ranges(pairs in prop::collection::vec((0usize..5, 0usize..5), 1..60)) {
        let (preds, golds): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let acc = accuracy(&preds, &golds).unwrap();
        let f1 = macro_f1(&preds, &golds, 5);
        prop_assert!((0.0..=1.0).contains(&acc));
        prop_assert!((0.0..=1.0).contains(&f1));
        let mean = per_class_scores(&preds, &golds, 5).iter().map(|s| s.f1).sum::<f64>() / 5.0;
        prop_assert!((f1 - mean).abs() < 1e-15);
    }

    #[test]
    fn masked_tokens_never_matter(seed in 0u64..500, fill in 3u32..100) {
        let t = toy(seed).unwrap();
        let mut student = t.student.clone();
        let batch = make_batches(&t.data, 3, None, 6).unwrap().remove(0);
        let mut noisy = batch.clone();
        for (id, &m) in noisy.tokens.ids.iter_mut().zip(&batch.tokens.mask) {
            if !m {
                *id = fill % 12;
            }
        }
        let signals = t.bundle.signals(&batch.tokens, &t.spec).unwrap();
        let noisy_signals = t.bundle.signals(&noisy.tokens, &t.spec).unwrap();
        prop_assert_eq!(&signals.logits, &noisy_signals.logits);
        let mut loss = |b, s| {
            let mut tape = Tape::new();
            let (l, _) = distill_objective(&mut tape, &mut student, s, b, &t.spec, None).unwrap();
            tape.scalar(l).to_bits()
        };
        let (clean, perturbed) = (loss(&batch, &signals), loss(&noisy, &noisy_signals));
        prop_assert_eq!(clean, perturbed);
    }
}

#[test]
fn teacher_weight_sweep_is_strictly_decreasing() {
    let weights: Vec<f64> = (0..100)
        .map(|k| {
            let p = 1.0 - k as f64 / 100.0;
            teacher_weight(&[1.0, 0.0], &[p, 1.0 - p])
        })
        .collect();
    assert_eq!(weights[0], 1.0);
    assert!(weights.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn attention_rows_sum_to_one_over_unmasked_keys() {
    let t = toy(2).unwrap();
    let batch = make_batches(&t.data, 3, None, 6).unwrap().remove(0);
    let mut enc = t.bundle.teachers[0].clone();
    let mut tape = Tape::new();
    let stack = enc.forward(&mut tape, &batch.tokens, None).unwrap();
    let seq = 6;
    for &a in &stack.attention {
        let probs = tape.attention_probs(a).unwrap();
        for (block, chunk) in probs.chunks(seq * seq).enumerate() {
            let b = block / 2;
            for row in chunk.chunks(seq) {
                let mut total = 0.0;
                for (j, &p) in row.iter().enumerate() {
                    if batch.tokens.mask[b * seq + j] {
                        total += p;
                    } else {
                        assert_eq!(p, 0.0);
                    }
                }
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn hidden_loss_vanishes_exactly_on_matching_states() {
    let spec = DistillSpec {
        teachers: 2,
        student_layers: 2,
        layer_ratio: 1,
        ..DistillSpec::default()
    };
    let mut rng = Rng::seed(8);
    let (rows, d) = (4, 3);
    let mask = vec![true, true, false, true];
    let mut proj = ProjectionSet::<f64>::init(&spec, d, d, &mut rng);
    let states: Vec<Vec<f64>> = (0..3).map(|_| (0..rows * d).map(|_| rng.normal()).collect()).collect();
    let run = |teacher: Vec<Vec<f64>>, proj: &mut ProjectionSet<f64>| {
        let mut tape = Tape::new();
        let layers = states.iter().map(|s| tape.constant(vec![rows, d], s.clone()).unwrap()).collect();
        let stack = LayerStack { layers, mask: mask.clone(), batch: 1, seq: rows, dim: d, attention: vec![] };
        mtkd_core::params::bind_all(proj, &mut tape);
        let signals = mtkd_core::distill::TeacherSignals {
            hidden: vec![teacher.clone(), teacher],
            logits: vec![vec![0.0; 2]; 2],
            layers: vec![1, 2],
            dim: d,
            classes: 2,
        };
        let l = mt_hidden_loss(&mut tape, &stack, &signals, proj, &spec).unwrap();
        tape.scalar(l)
    };
    let exact = vec![states[1].clone(), states[2].clone()];
    assert_eq!(run(exact.clone(), &mut proj), 0.0);
    let mut masked = exact.clone();
    masked[0][2 * d] += 5.0;
    assert_eq!(run(masked, &mut proj), 0.0);
    let mut visible = exact;
    visible[1][0] += 1e-3;
    assert!(run(visible, &mut proj) > 0.0);
}

#[test]
fn disabling_a_term_leaves_the_others_untouched() {
    let t = toy(6).unwrap();
    let batch = make_batches(&t.data, 3, None, 6).unwrap().remove(0);
    let signals = t.bundle.signals(&batch.tokens, &t.spec).unwrap();
    let grads = |hidden, distill, task| {
        let spec = DistillSpec { hidden_loss: hidden, distill_loss: distill, task_loss: task, ..t.spec.clone() };
        let mut s = t.student.clone();
        let mut tape = Tape::new();
        let (l, _) = distill_objective(&mut tape, &mut s, &signals, &batch, &spec, None).unwrap();
        tape.backward(l).unwrap();
        s.zero_grad();
        collect_all(&mut s, &tape);
        param_grads_analytic(&mut s)
    };
    let (h, d, k) = (grads(true, false, false), grads(false, true, false), grads(false, false, true));
    for (combo, parts) in [
        (grads(true, true, true), vec![&h, &d, &k]),
        (grads(false, true, true), vec![&d, &k]),
        (grads(true, false, true), vec![&h, &k]),
        (grads(true, true, false), vec![&h, &d]),
    ] {
        for (i, g) in combo.iter().enumerate() {
            let sum: f64 = parts.iter().map(|p| p[i]).sum();
            assert!((g - sum).abs() < 1e-12);
        }
    }
    // With the hidden loss off no projection receives a gradient.
    let n_proj: usize = t.student.clone().projections.param_count();
    assert!(d[d.len() - n_proj..].iter().all(|&g| g == 0.0));
}

#[test]
fn distillation_leaves_teachers_untouched() {
    let t = toy(1).unwrap();
    let before = t.bundle.clone();
    let batches = make_batches(&t.data, 2, Some(1), 6).unwrap();
    let mut student = t.student.clone();
    let mut opt = AdamState::new(AdamConfig::default(), vec![1e-2]);
    let first = t.bundle.signals(&batches[0].tokens, &t.spec).unwrap();
    for b in &batches {
        let s = t.bundle.signals(&b.tokens, &t.spec).unwrap();
        distill_step(&mut student, &s, b, &t.spec, &mut opt, Some(&mut Rng::seed(3))).unwrap();
    }
    assert_eq!(t.bundle, before);
    assert_eq!(t.bundle.signals(&batches[0].tokens, &t.spec).unwrap(), first);
    assert_ne!(student, t.student);
}

#[test]
fn single_sequence_padding() {
    let b = TokenBatch::single(&[1, 5, 6], 5).unwrap();
    assert_eq!(b.ids, vec![1, 5, 6, 0, 0]);
    assert_eq!(b.mask, vec![true, true, true, false, false]);
}
