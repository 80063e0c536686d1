//! Synthetic classification tasks, batching and metrics.
//!
//! Three generators mirror the shapes of a binary sentiment task, a binary
//! entailment task and an 18-way topic task. Labels are planted in the token
//! ids so they are exactly recoverable from the sequence when no label noise
//! is applied.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use crate::encoder::{TokenBatch, CLS_ID, PAD_ID, SEP_ID};
use crate::{bail, Result, Rng, Scalar};

/// First id that is not reserved for padding, `[CLS]` or `[SEP]`.
pub const FIRST_CONTENT_ID: u32 = 3;

const SENT_MARKERS: u32 = 4;
const TOPIC_SIGNATURE: u32 = 3;
const TOPIC_CLASSES: usize = 18;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum TaskKind {
    /// Majority vote of planted positive / negative marker tokens.
    Sent2,
    /// Whether the second segment's multiset is contained in the first's.
    Nli2,
    /// Which topic's signature tokens dominate.
    Topic18,
}

impl TaskKind {
    pub fn classes(self) -> usize {
        match self {
            TaskKind::Sent2 | TaskKind::Nli2 => 2,
            TaskKind::Topic18 => TOPIC_CLASSES,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Sent2 => "sent2",
            TaskKind::Nli2 => "nli2",
            TaskKind::Topic18 => "topic18",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [TaskKind::Sent2, TaskKind::Nli2, TaskKind::Topic18]
            .into_iter()
            .find(|k| k.name() == s)
    }

    /// Smallest vocabulary that fits the reserved ids, the planted tokens and
    /// at least four filler tokens.
    pub fn min_vocab(self) -> usize {
        let planted = match self {
            TaskKind::Sent2 => 2 * SENT_MARKERS as usize,
            TaskKind::Nli2 => 4,
            TaskKind::Topic18 => TOPIC_CLASSES * TOPIC_SIGNATURE as usize,
        };
        FIRST_CONTENT_ID as usize + planted + 4
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub vocab_size: usize,
    /// Sequence length including the leading `[CLS]`.
    pub max_seq_len: usize,
    /// Fraction of training labels flipped uniformly to another class.
    pub noise_rate: f64,
    /// Class-prior skew for `topic18`: prior of class `c` ∝ exp(−imbalance·c/(C−1)).
    pub imbalance: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::Topic18,
            train: 2000,
            dev: 400,
            test: 400,
            vocab_size: 100,
            max_seq_len: 16,
            noise_rate: 0.0,
            imbalance: 0.0,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn classes(&self) -> usize {
        self.kind.classes()
    }

    pub fn validate(&self) -> Result<()> {
        if self.train == 0 || self.dev == 0 || self.test == 0 {
            bail!(Config, "split sizes must be at least 1");
        }
        if self.vocab_size < self.kind.min_vocab() {
            bail!(
                Config,
                "vocab_size {} is too small for {} signature tokens (need {})",
                self.vocab_size,
                self.kind.name(),
                self.kind.min_vocab()
            );
        }
        let min_len = match self.kind {
            TaskKind::Sent2 => 7,
            TaskKind::Nli2 => 8,
            TaskKind::Topic18 => 9,
        };
        if self.max_seq_len < min_len {
            bail!(Config, "max_seq_len {} is below {min_len} for {}", self.max_seq_len, self.kind.name());
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            bail!(Config, "noise_rate must lie in [0, 1)");
        }
        if self.imbalance < 0.0 || !self.imbalance.is_finite() {
            bail!(Config, "imbalance must be a non-negative number");
        }
        Ok(())
    }

    /// Token id roles for this task.
    pub fn layout(&self) -> TaskLayout {
        TaskLayout {
            kind: self.kind,
            vocab_size: self.vocab_size as u32,
        }
    }
}

/// Which token ids carry label information for a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskLayout {
    pub kind: TaskKind,
    pub vocab_size: u32,
}

impl TaskLayout {
    pub fn positive_markers(&self) -> core::ops::Range<u32> {
        FIRST_CONTENT_ID..FIRST_CONTENT_ID + SENT_MARKERS
    }

    pub fn negative_markers(&self) -> core::ops::Range<u32> {
        FIRST_CONTENT_ID + SENT_MARKERS..FIRST_CONTENT_ID + 2 * SENT_MARKERS
    }

    /// Signature tokens of `topic`.
    pub fn topic_signature(&self, topic: usize) -> core::ops::Range<u32> {
        let start = FIRST_CONTENT_ID + TOPIC_SIGNATURE * topic as u32;
        start..start + TOPIC_SIGNATURE
    }

    /// Tokens that carry no label information.
    pub fn filler(&self) -> core::ops::Range<u32> {
        let start = match self.kind {
            TaskKind::Sent2 => FIRST_CONTENT_ID + 2 * SENT_MARKERS,
            TaskKind::Nli2 => FIRST_CONTENT_ID,
            TaskKind::Topic18 => FIRST_CONTENT_ID + TOPIC_SIGNATURE * TOPIC_CLASSES as u32,
        };
        start..self.vocab_size
    }

    /// Label implied by the tokens, or `None` when the rule is ambiguous.
    pub fn recover_label(&self, tokens: &[u32]) -> Option<usize> {
        let body = tokens.strip_prefix(&[CLS_ID]).unwrap_or(tokens);
        match self.kind {
            TaskKind::Sent2 => {
                let pos = body.iter().filter(|t| self.positive_markers().contains(t)).count();
                let neg = body.iter().filter(|t| self.negative_markers().contains(t)).count();
                match pos.cmp(&neg) {
                    core::cmp::Ordering::Greater => Some(1),
                    core::cmp::Ordering::Less => Some(0),
                    core::cmp::Ordering::Equal => None,
                }
            }
            TaskKind::Nli2 => {
                let sep = body.iter().position(|&t| t == SEP_ID)?;
                let (premise, hypothesis) = (&body[..sep], &body[sep + 1..]);
                if hypothesis.is_empty() {
                    return None;
                }
                let mut pool = premise.to_vec();
                let entailed = hypothesis.iter().all(|t| match pool.iter().position(|p| p == t) {
                    Some(i) => {
                        pool.swap_remove(i);
                        true
                    }
                    None => false,
                });
                Some(if entailed { 0 } else { 1 })
            }
            TaskKind::Topic18 => {
                let counts: Vec<usize> = (0..TOPIC_CLASSES)
                    .map(|c| body.iter().filter(|t| self.topic_signature(c).contains(t)).count())
                    .collect();
                let max = *counts.iter().max()?;
                let mut winners = counts.iter().enumerate().filter(|(_, &n)| n == max);
                let (c, _) = winners.next()?;
                (max > 0 && winners.next().is_none()).then_some(c)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Example {
    /// Token ids starting with `[CLS]`, without padding.
    pub tokens: Vec<u32>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Dataset {
    pub kind: TaskKind,
    pub classes: usize,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }

    /// Copy with a fraction `rate` of labels flipped uniformly to another class.
    pub fn with_label_noise(&self, rate: f64, rng: &mut Rng) -> Self {
        let mut out = self.clone();
        for ex in &mut out.examples {
            if rng.bernoulli(rate) {
                ex.label = (ex.label + 1 + rng.below(self.classes - 1)) % self.classes;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Splits {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
}

/// Generates disjoint train/dev/test splits; output depends only on `spec`.
pub fn gen_synthetic(spec: &TaskSpec) -> Result<Splits> {
    spec.validate()?;
    let layout = spec.layout();
    let mut rng = Rng::derive(spec.seed, 0x7A5C);
    let prior = class_prior(spec);
    let mut seen = BTreeSet::new();
    let mut split = |n: usize, rng: &mut Rng| -> Dataset {
        let mut examples = Vec::with_capacity(n);
        while examples.len() < n {
            let label = sample_class(&prior, rng);
            let tokens = match spec.kind {
                TaskKind::Sent2 => gen_sent2(&layout, label, spec.max_seq_len, rng),
                TaskKind::Nli2 => gen_nli2(&layout, label, spec.max_seq_len, rng),
                TaskKind::Topic18 => gen_topic18(&layout, label, spec.max_seq_len, rng),
            };
            if seen.insert(tokens.clone()) {
                examples.push(Example { tokens, label });
            }
        }
        Dataset {
            kind: spec.kind,
            classes: spec.classes(),
            examples,
        }
    };
    let mut train = split(spec.train, &mut rng);
    let dev = split(spec.dev, &mut rng);
    let test = split(spec.test, &mut rng);
    if spec.noise_rate > 0.0 {
        train = train.with_label_noise(spec.noise_rate, &mut Rng::derive(spec.seed, 0x4015E));
    }
    Ok(Splits { train, dev, test })
}

fn class_prior(spec: &TaskSpec) -> Vec<f64> {
    let c = spec.classes();
    let skew = if spec.kind == TaskKind::Topic18 { spec.imbalance } else { 0.0 };
    let w: Vec<f64> = (0..c)
        .map(|k| num_traits::Float::exp(-skew * k as f64 / (c - 1) as f64))
        .collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

fn sample_class(prior: &[f64], rng: &mut Rng) -> usize {
    let u = rng.uniform();
    let mut acc = 0.0;
    for (c, p) in prior.iter().enumerate() {
        acc += p;
        if u < acc {
            return c;
        }
    }
    prior.len() - 1
}

fn pick(range: core::ops::Range<u32>, rng: &mut Rng) -> u32 {
    range.start + rng.below((range.end - range.start) as usize) as u32
}

/// Places `planted` tokens at random positions among filler, after `[CLS]`.
fn scatter(planted: Vec<u32>, body_len: usize, filler: core::ops::Range<u32>, rng: &mut Rng) -> Vec<u32> {
    let mut body: Vec<u32> = planted;
    while body.len() < body_len {
        body.push(pick(filler.clone(), rng));
    }
    rng.shuffle(&mut body);
    let mut tokens = Vec::with_capacity(body_len + 1);
    tokens.push(CLS_ID);
    tokens.extend(body);
    tokens
}

fn gen_sent2(layout: &TaskLayout, label: usize, max_len: usize, rng: &mut Rng) -> Vec<u32> {
    let body_len = rng.range_inclusive(6, max_len - 1);
    let majority = rng.range_inclusive(1, 4.min(body_len));
    let minority = rng.below(majority.min(body_len - majority + 1));
    let (win, lose) = if label == 1 {
        (layout.positive_markers(), layout.negative_markers())
    } else {
        (layout.negative_markers(), layout.positive_markers())
    };
    let mut planted: Vec<u32> = (0..majority).map(|_| pick(win.clone(), rng)).collect();
    planted.extend((0..minority).map(|_| pick(lose.clone(), rng)));
    scatter(planted, body_len, layout.filler(), rng)
}

fn gen_nli2(layout: &TaskLayout, label: usize, max_len: usize, rng: &mut Rng) -> Vec<u32> {
    // [CLS] premise [SEP] hypothesis
    let hyp_len = rng.range_inclusive(1, 3);
    let prem_len = rng.range_inclusive(4, (max_len - 2 - hyp_len).min(8));
    // A narrow content pool makes overlaps common, so containment is not
    // decidable from token identity alone.
    let pool_end = (FIRST_CONTENT_ID + 24).min(layout.vocab_size);
    let pool = FIRST_CONTENT_ID..pool_end;
    let premise: Vec<u32> = (0..prem_len).map(|_| pick(pool.clone(), rng)).collect();
    let mut order: Vec<usize> = (0..prem_len).collect();
    rng.shuffle(&mut order);
    let mut hypothesis: Vec<u32> = order[..hyp_len].iter().map(|&i| premise[i]).collect();
    if label == 1 {
        let absent: Vec<u32> = pool.clone().filter(|t| !premise.contains(t)).collect();
        let slot = rng.below(hyp_len);
        hypothesis[slot] = absent[rng.below(absent.len())];
    }
    let mut tokens = vec![CLS_ID];
    tokens.extend(premise);
    tokens.push(SEP_ID);
    tokens.extend(hypothesis);
    tokens
}

fn gen_topic18(layout: &TaskLayout, label: usize, max_len: usize, rng: &mut Rng) -> Vec<u32> {
    let body_len = rng.range_inclusive(8, max_len - 1);
    let dominant = rng.range_inclusive(2, 4);
    let mut planted: Vec<u32> = (0..dominant).map(|_| pick(layout.topic_signature(label), rng)).collect();
    let distractors = rng.below(3);
    for _ in 0..distractors {
        let other = (label + 1 + rng.below(TOPIC_CLASSES - 1)) % TOPIC_CLASSES;
        let count = rng.range_inclusive(1, dominant - 1);
        if planted.len() + count > body_len {
            break;
        }
        // Per-topic counts stay below the dominant count even if the same
        // distractor topic is drawn twice.
        let already = planted.iter().filter(|t| layout.topic_signature(other).contains(t)).count();
        let count = count.min(dominant - 1 - already.min(dominant - 1));
        planted.extend((0..count).map(|_| pick(layout.topic_signature(other), rng)));
    }
    scatter(planted, body_len, layout.filler(), rng)
}

/// A padded mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub tokens: TokenBatch,
    pub labels: Vec<usize>,
    pub classes: usize,
    /// Positions of the batch rows in the source dataset.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Row-major `[batch, C]` one-hot label matrix.
    pub fn onehot<F: Scalar>(&self) -> Vec<F> {
        onehot(&self.labels, self.classes)
    }
}

pub fn onehot<F: Scalar>(labels: &[usize], classes: usize) -> Vec<F> {
    let mut out = vec![F::zero(); labels.len() * classes];
    for (r, &l) in labels.iter().enumerate() {
        out[r * classes + l] = F::one();
    }
    out
}

/// Pads (and truncates) sequences to `seq_len` with pad id 0.
pub fn pad_batch(examples: &[&Example], seq_len: usize) -> TokenBatch {
    let mut ids = vec![PAD_ID; examples.len() * seq_len];
    let mut mask = vec![false; examples.len() * seq_len];
    for (b, ex) in examples.iter().enumerate() {
        let n = ex.tokens.len().min(seq_len);
        ids[b * seq_len..b * seq_len + n].copy_from_slice(&ex.tokens[..n]);
        mask[b * seq_len..b * seq_len + n].fill(true);
    }
    TokenBatch {
        ids,
        mask,
        batch: examples.len(),
        seq: seq_len,
    }
}

/// Splits `dataset` into batches of `batch_size` (last one may be smaller),
/// shuffled when a seed is given. Sequences longer than `seq_len` are truncated.
pub fn make_batches(dataset: &Dataset, batch_size: usize, shuffle_seed: Option<u64>, seq_len: usize) -> Result<Vec<Batch>> {
    if dataset.is_empty() {
        bail!(Contract, "cannot batch an empty dataset");
    }
    if batch_size == 0 || seq_len == 0 {
        bail!(Contract, "batch_size and seq_len must be positive");
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if let Some(seed) = shuffle_seed {
        Rng::seed(seed).shuffle(&mut order);
    }
    Ok(order
        .chunks(batch_size)
        .map(|idx| {
            let exs: Vec<&Example> = idx.iter().map(|&i| &dataset.examples[i]).collect();
            Batch {
                tokens: pad_batch(&exs, seq_len),
                labels: exs.iter().map(|e| e.label).collect(),
                classes: dataset.classes,
                indices: idx.to_vec(),
            }
        })
        .collect())
}

/// Masks each non-`[CLS]` real token with probability `rate`.
pub fn token_dropout(tokens: &TokenBatch, rate: f64, rng: &mut Rng) -> TokenBatch {
    let mut out = tokens.clone();
    if rate <= 0.0 {
        return out;
    }
    for b in 0..out.batch {
        for i in 1..out.seq {
            let k = b * out.seq + i;
            if out.mask[k] && rng.bernoulli(rate) {
                out.mask[k] = false;
                out.ids[k] = PAD_ID;
            }
        }
    }
    out
}

pub fn accuracy(preds: &[usize], golds: &[usize]) -> Result<f64> {
    if preds.len() != golds.len() {
        bail!(Contract, "{} predictions for {} labels", preds.len(), golds.len());
    }
    if preds.is_empty() {
        return Ok(0.0);
    }
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / preds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// One-vs-rest precision, recall and F1 for every class. A class with no
/// predictions and no gold instances scores 0.
pub fn per_class_scores(preds: &[usize], golds: &[usize], classes: usize) -> Vec<ClassScores> {
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for (&p, &g) in preds.iter().zip(golds) {
        if p == g {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[g] += 1;
        }
    }
    (0..classes)
        .map(|c| {
            let ratio = |a: usize, b: usize| if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
            let precision = ratio(tp[c], fp[c]);
            let recall = ratio(tp[c], fn_[c]);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassScores {
                precision,
                recall,
                f1,
                support: tp[c] + fn_[c],
            }
        })
        .collect()
}

pub fn macro_f1(preds: &[usize], golds: &[usize], classes: usize) -> f64 {
    let scores = per_class_scores(preds, golds, classes);
    scores.iter().map(|s| s.f1).sum::<f64>() / classes as f64
}

/// Mean value of each loss term over an epoch; `None` for disabled terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossMeans {
    pub task: Option<f64>,
    pub hidden: Option<f64>,
    pub distill: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassScores>,
    pub losses: LossMeans,
}

impl MetricsReport {
    pub fn evaluate(preds: &[usize], golds: &[usize], classes: usize) -> Result<Self> {
        if let Some(&bad) = preds.iter().chain(golds).find(|&&l| l >= classes) {
            bail!(Contract, "label {bad} is not below {classes}");
        }
        let per_class = per_class_scores(preds, golds, classes);
        Ok(Self {
            accuracy: accuracy(preds, golds)?,
            macro_f1: per_class.iter().map(|s| s.f1).sum::<f64>() / classes as f64,
            per_class,
            losses: LossMeans::default(),
        })
    }
}

/// Index of the largest entry in each row of a `[rows, cols]` matrix.
pub fn argmax_rows<F: Scalar>(values: &[F], cols: usize) -> Vec<usize> {
    values
        .chunks_exact(cols)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: TaskKind) -> TaskSpec {
        TaskSpec {
            kind,
            train: 300,
            dev: 50,
            test: 50,
            seed: 17,
            ..TaskSpec::default()
        }
    }

    #[test]
    fn five_positive_markers_are_positive() {
        let layout = spec(TaskKind::Sent2).layout();
        let p = layout.positive_markers().start;
        let tokens = [CLS_ID, p, 40, p + 1, p, 50, p + 2, p + 3];
        assert_eq!(layout.recover_label(&tokens), Some(1));
    }

    #[test]
    fn generation_is_deterministic_and_disjoint() {
        for kind in [TaskKind::Sent2, TaskKind::Nli2, TaskKind::Topic18] {
            let a = gen_synthetic(&spec(kind)).unwrap();
            assert_eq!(a, gen_synthetic(&spec(kind)).unwrap());
            let mut all = BTreeSet::new();
            for ds in [&a.train, &a.dev, &a.test] {
                for ex in &ds.examples {
                    assert!(all.insert(ex.tokens.clone()));
                    assert!(ex.tokens.len() <= 16 && ex.tokens[0] == CLS_ID);
                    assert!(ex.label < kind.classes());
                }
            }
            let mut other = spec(kind);
            other.seed += 1;
            assert_ne!(a, gen_synthetic(&other).unwrap());
        }
    }

    #[test]
    fn small_vocab_is_rejected() {
        let mut s = spec(TaskKind::Topic18);
        s.vocab_size = 40;
        assert!(matches!(gen_synthetic(&s), Err(crate::Error::Config(_))));
    }

    #[test]
    fn noise_flips_train_labels_only() {
        let mut s = spec(TaskKind::Topic18);
        s.noise_rate = 0.3;
        let noisy = gen_synthetic(&s).unwrap();
        let layout = s.layout();
        let wrong = noisy
            .train
            .examples
            .iter()
            .filter(|e| layout.recover_label(&e.tokens) != Some(e.label))
            .count();
        let frac = wrong as f64 / noisy.train.len() as f64;
        assert!((0.2..0.4).contains(&frac), "{frac}");
        for e in noisy.dev.examples.iter().chain(&noisy.test.examples) {
            assert_eq!(layout.recover_label(&e.tokens), Some(e.label));
        }
    }

    #[test]
    fn batching_sizes_and_order() {
        let ds = Dataset {
            kind: TaskKind::Sent2,
            classes: 2,
            examples: (0..5)
                .map(|i| Example {
                    tokens: vec![CLS_ID, 10 + i],
                    label: (i % 2) as usize,
                })
                .collect(),
        };
        let b = make_batches(&ds, 2, Some(3), 4).unwrap();
        assert_eq!(b.iter().map(Batch::len).collect::<Vec<_>>(), vec![2, 2, 1]);
        assert_eq!(b, make_batches(&ds, 2, Some(3), 4).unwrap());
        let first = &b[0];
        assert_eq!(first.tokens.mask[..4], [true, true, false, false]);
        assert_eq!(first.tokens.ids[2..4], [PAD_ID, PAD_ID]);
        let empty = Dataset { examples: vec![], ..ds.clone() };
        assert!(make_batches(&empty, 2, None, 4).is_err());
        // Truncation keeps the prefix.
        let t = make_batches(&ds, 5, None, 1).unwrap();
        assert!(t[0].tokens.ids.iter().all(|&i| i == CLS_ID));
    }

    #[test]
    fn token_dropout_keeps_cls() {
        let ds = gen_synthetic(&spec(TaskKind::Sent2)).unwrap();
        let b = &make_batches(&ds.train, 8, None, 16).unwrap()[0];
        let d = token_dropout(&b.tokens, 0.99, &mut Rng::seed(1));
        for r in 0..8 {
            assert!(d.mask[r * 16]);
            assert_eq!(d.ids[r * 16], CLS_ID);
        }
        assert!(d.mask.iter().filter(|&&m| m).count() < b.tokens.mask.iter().filter(|&&m| m).count());
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 0], &[0, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 1, 1, 1], &[0, 1, 1, 0]).unwrap(), 0.75);
        assert!(accuracy(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn macro_f1_examples() {
        assert_eq!(macro_f1(&[0, 1, 2, 2], &[0, 1, 2, 2], 3), 1.0);
        // Balanced golds, everything predicted as class 0: P=1/2, R=1, F1=2/3.
        let m = macro_f1(&[0, 0, 0, 0], &[0, 0, 1, 1], 2);
        assert!((m - 1.0 / 3.0).abs() < 1e-15);
        // Class 2 absent everywhere counts as 0.
        assert!((macro_f1(&[0, 1], &[0, 1], 3) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn macro_f1_equals_accuracy_on_symmetric_errors() {
        // Two per class, each class gets one right and one sent to the next class.
        let golds = [0, 0, 1, 1, 2, 2];
        let preds = [0, 1, 1, 2, 2, 0];
        let acc = accuracy(&preds, &golds).unwrap();
        assert!((macro_f1(&preds, &golds, 3) - acc).abs() < 1e-15);
    }

    #[test]
    fn argmax_picks_first_maximum() {
        assert_eq!(argmax_rows(&[0.1, 0.5, 0.5, 2.0, 1.0, 0.0], 3), vec![1, 0]);
    }
}
