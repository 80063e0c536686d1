//! Exact reduction checks between training paths: co-finetuning one teacher
//! against plain finetuning, temperature 1 against untempered softmax,
//! ensemble averaging of identical teachers against a single teacher, and
//! invariance to padding.

use alloc::vec;
use alloc::vec::Vec;

use crate::adam::{AdamConfig, AdamState};
use crate::distill::{cofinetune_step, distill_objective, finetune_step, mt_distill_loss, DistillSpec, TeacherBundle, TeacherHeads, TeacherView, Weighting};
use crate::encoder::{Classifier, EncoderConfig, EncoderParams, PoolHead, Pooling};
use crate::gradcheck::{param_grads_analytic, toy};
use crate::params::collect_all;
use crate::tasks::{gen_synthetic, make_batches, TaskKind, TaskSpec};
use crate::{Parameters, Result, Rng, Tape};

fn bits<P: Parameters<f64>>(p: &mut P) -> Vec<u64> {
    p.named_mut("").iter().flat_map(|(_, t)| t.values().iter().map(|v| v.to_bits())).collect()
}

fn small_classifier(seed: u64, dropout: f64, classes: usize) -> Result<Classifier<f64>> {
    let mut rng = Rng::derive(seed, 10);
    let config = EncoderConfig {
        hidden_dim: 16,
        num_heads: 2,
        ffn_dim: 24,
        num_layers: 2,
        dropout,
        ..EncoderConfig::default()
    };
    let encoder = EncoderParams::init(config, &mut rng)?;
    let head = PoolHead::init(16, 8, classes, Pooling::Attentive, 0.1, &mut rng)?;
    Ok(Classifier { encoder, head })
}

/// Runs `steps` updates of co-finetuning with a single teacher and of plain
/// finetuning from the same start, with dropout on; true when every loss,
/// gradient and parameter agrees bit for bit.
pub fn single_teacher_cofinetune_matches_finetune(seed: u64, steps: usize) -> Result<bool> {
    let mut model = small_classifier(seed, 0.2, 2)?;
    let mut bundle = TeacherBundle {
        teachers: vec![model.encoder.clone()],
        heads: TeacherHeads::Shared(model.head.clone()),
    };
    let data = gen_synthetic(&TaskSpec {
        kind: TaskKind::Sent2,
        train: 64,
        dev: 8,
        test: 8,
        seed,
        ..TaskSpec::default()
    })?
    .train;
    let batches = make_batches(&data, 16, Some(seed), 16)?;
    let mut opt_a = AdamState::new(AdamConfig::default(), vec![1e-3]);
    let mut opt_b = AdamState::new(AdamConfig::default(), vec![1e-3]);
    let (mut rng_a, mut rng_b) = (Rng::derive(seed, 11), Rng::derive(seed, 11));
    let views = [TeacherView::default()];
    for batch in batches.iter().cycle().take(steps) {
        let la = cofinetune_step(&mut bundle, batch, &views, &mut opt_a, Some(&mut rng_a))?;
        let lb = finetune_step(&mut model, batch, &mut opt_b, Some(&mut rng_b))?;
        if la.to_bits() != lb.to_bits()
            || param_grads_analytic(&mut bundle).iter().map(|v| v.to_bits()).ne(param_grads_analytic(&mut model).iter().map(|v| v.to_bits()))
            || bits(&mut bundle) != bits(&mut model)
        {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Outcome of [`unit_temperature_matches_untempered`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitTemperature {
    /// Total and distillation values agree bitwise with both references.
    pub values_bitwise: bool,
    /// Gradients agree bitwise with the reference that gives the
    /// distillation term its own untempered softmax.
    pub grads_bitwise: bool,
    /// Largest gradient deviation from the reference that reuses the head's
    /// probabilities; only the summation order of the backward pass differs.
    pub shared_softmax_dev: f64,
}

/// Distillation at `t = 1` against untempered references.
pub fn unit_temperature_matches_untempered(seed: u64) -> Result<UnitTemperature> {
    let t = toy(seed)?;
    let spec = DistillSpec { temperature: 1.0, ..t.spec };
    let batch = make_batches(&t.data, t.data.len(), None, 6)?.remove(0);
    let signals = t.bundle.signals(&batch.tokens, &spec)?;

    let mut tempered = t.student.clone();
    let mut tape = Tape::new();
    let (total_a, terms_a) = distill_objective(&mut tape, &mut tempered, &signals, &batch, &spec, None)?;
    tape.backward(total_a)?;
    collect_all(&mut tempered, &tape);
    let (va, da) = (tape.scalar(total_a), tape.scalar(terms_a.distill.expect("enabled")));
    let ga = param_grads_analytic(&mut tempered);

    let mut values_bitwise = true;
    let mut grads = Vec::new();
    for own_softmax in [true, false] {
        let mut plain = t.student.clone();
        let mut tape = Tape::new();
        let stack = plain.model.encoder.forward(&mut tape, &batch.tokens, None)?;
        let out = plain.model.head.forward(&mut tape, &stack, 1.0)?;
        crate::params::bind_all(&mut plain.projections, &mut tape);
        let hidden = crate::distill::mt_hidden_loss(&mut tape, &stack, &signals, &plain.projections, &spec)?;
        let q = if own_softmax { tape.softmax_rows(out.logits, 1.0)? } else { out.probs };
        let distill = untempered_distill(&mut tape, &signals.logits, q, &batch.labels)?;
        let task = crate::distill::task_loss(&mut tape, out.probs, &batch.labels)?;
        let sum = tape.add(hidden, distill)?;
        let total_b = tape.add(sum, task)?;
        tape.backward(total_b)?;
        collect_all(&mut plain, &tape);
        values_bitwise &= va.to_bits() == tape.scalar(total_b).to_bits() && da.to_bits() == tape.scalar(distill).to_bits();
        grads.push(param_grads_analytic(&mut plain));
    }
    let bits = |g: &[f64]| g.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    Ok(UnitTemperature {
        values_bitwise,
        grads_bitwise: bits(&ga) == bits(&grads[0]),
        shared_softmax_dev: ga.iter().zip(&grads[1]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max),
    })
}

fn untempered_distill(tape: &mut Tape<f64>, teacher_logits: &[Vec<f64>], q: crate::NodeId, labels: &[usize]) -> Result<crate::NodeId> {
    let classes = tape.shape(q)[1];
    let gold = crate::tasks::onehot::<f64>(labels, classes);
    let mut acc = None;
    for z in teacher_logits {
        let mut p = Vec::with_capacity(z.len());
        let mut w = Vec::with_capacity(labels.len());
        for (r, row) in z.chunks_exact(classes).enumerate() {
            let probs = crate::ops::softmax(row, 1.0);
            w.push(crate::distill::teacher_weight(&gold[r * classes..(r + 1) * classes], &probs));
            p.extend(probs);
        }
        let ce = tape.cross_entropy_rows(q, p)?;
        let term = tape.mul_const(ce, w)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    Ok(tape.mean(acc.expect("teachers")))
}

/// Largest deviation, over `n = 1..=max_n` copies of one teacher, between
/// ensemble-average distillation and single-teacher distillation, for value
/// and student-logit gradient.
pub fn ensemble_of_identical_matches_single(seed: u64, max_n: usize, t: f64) -> Result<f64> {
    let mut rng = Rng::derive(seed, 12);
    let (rows, classes) = (6, 5);
    let teacher: Vec<f64> = (0..rows * classes).map(|_| 2.0 * rng.normal()).collect();
    let student: Vec<f64> = (0..rows * classes).map(|_| rng.normal()).collect();
    let labels: Vec<usize> = (0..rows).map(|_| rng.below(classes)).collect();
    let run = |teachers: Vec<Vec<f64>>, mode: Weighting| -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let z = tape.leaf(&crate::Tensor::new(vec![rows, classes], student.clone())?.param());
        let loss = mt_distill_loss(&mut tape, &teachers, z, &labels, t, mode)?;
        tape.backward(loss)?;
        Ok((tape.scalar(loss), tape.grad(z).expect("trainable").to_vec()))
    };
    let (v1, g1) = run(vec![teacher.clone()], Weighting::Single(0))?;
    let mut worst: f64 = 0.0;
    for n in 1..=max_n {
        let (v, g) = run(vec![teacher.clone(); n], Weighting::EnsembleAverage)?;
        worst = worst.max((v - v1).abs());
        for (a, b) in g.iter().zip(&g1) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// Logits of the same examples padded to two lengths and embedded in two
/// different batches; true when all agree bit for bit.
pub fn padding_invariant(seed: u64) -> Result<bool> {
    let data = gen_synthetic(&TaskSpec {
        kind: TaskKind::Topic18,
        train: 24,
        dev: 8,
        test: 8,
        seed,
        ..TaskSpec::default()
    })?
    .dev;
    let mut model = small_classifier(seed, 0.2, data.classes)?;
    let short = data.examples.iter().map(|e| e.tokens.len()).max().unwrap_or(1);
    let mut reference = None;
    for (seq, batch_size) in [(short, 8), (16, 8), (16, 3), (short, 1)] {
        let mut logits = vec![0u64; data.len() * data.classes];
        for batch in make_batches(&data, batch_size, None, seq)? {
            let z = model.predict_logits(&batch.tokens)?;
            for (r, &i) in batch.indices.iter().enumerate() {
                for c in 0..data.classes {
                    logits[i * data.classes + c] = z[r * data.classes + c].to_bits();
                }
            }
        }
        match &reference {
            None => reference = Some(logits),
            Some(r) if *r != logits => return Ok(false),
            Some(_) => {}
        }
    }
    Ok(true)
}
