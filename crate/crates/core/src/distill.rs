//! Multi-teacher distillation.
//!
//! Teachers are first co-finetuned through one shared pooling layer and
//! classifier head, so their top hidden states land in a common space. A
//! shallower student is then trained on the sum of three terms:
//!
//! * a hidden loss, `Σ_i Σ_j MSE(H^s_j, H^i_{T·j} · W_ij)` over teachers `i`
//!   and student layers `j`, with learnable projections `W_ij`;
//! * a distillation loss, `Σ_i CE(p_i, q) / (1 + CE(y, p_i))`, where each
//!   teacher's soft labels are down-weighted on examples it gets wrong;
//! * the task loss `CE(y, q)` against gold labels.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::adam::AdamState;
use crate::encoder::{Classifier, EncoderParams, LayerStack, PoolHead, TokenBatch};
use crate::ops::{cross_entropy_unchecked, softmax, softmax_rows_into};
use crate::params::{bind_all, collect_all, group, Parameters};
use crate::tasks::{argmax_rows, make_batches, onehot, token_dropout, Batch, Dataset};
use crate::{bail, Error, NodeId, Result, Rng, Scalar, Tape, Tensor};

/// How per-teacher distillation terms are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "String", into = "String"))]
pub enum Weighting {
    /// Each teacher's term scaled by `1 / (1 + CE(gold, teacher))` per example.
    #[default]
    LossWeighted,
    Uniform,
    /// Only teacher `i`, weight 1.
    Single(usize),
    /// One term against the mean of all teachers' soft labels.
    EnsembleAverage,
}

impl core::fmt::Display for Weighting {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Weighting::LossWeighted => f.write_str("loss-weighted"),
            Weighting::Uniform => f.write_str("uniform"),
            Weighting::Single(i) => write!(f, "single:{i}"),
            Weighting::EnsembleAverage => f.write_str("ensemble-average"),
        }
    }
}

impl core::str::FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "loss-weighted" => Weighting::LossWeighted,
            "uniform" => Weighting::Uniform,
            "ensemble-average" => Weighting::EnsembleAverage,
            _ => match s.strip_prefix("single:").and_then(|i| i.parse().ok()) {
                Some(i) => Weighting::Single(i),
                None => bail!(Config, "unknown weighting mode {s:?}"),
            },
        })
    }
}

impl TryFrom<String> for Weighting {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Weighting> for String {
    fn from(w: Weighting) -> String {
        w.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum ProjectionInit {
    /// Identity when teacher and student widths agree, Gaussian otherwise.
    #[default]
    Auto,
    Gaussian,
}

/// Range of student layers `j` covered by the hidden loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum HiddenRange {
    /// `j = 1..=K`: every student layer is supervised.
    #[default]
    StudentLayers,
    /// `j = 1..=T`, the literal summation bound; requires `T ≤ K`.
    LayerRatio,
}

/// Which teacher layers seed the student.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum StudentInit {
    #[default]
    FirstK,
    LastK,
    /// Every `T`-th layer, ending at the top layer.
    Skip,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct DistillSpec {
    /// Number of teachers, `N`.
    pub teachers: usize,
    /// Student depth, `K`.
    pub student_layers: usize,
    /// Teacher depth divided by student depth, `T`.
    pub layer_ratio: usize,
    pub temperature: f64,
    pub hidden_loss: bool,
    pub distill_loss: bool,
    pub task_loss: bool,
    pub weighting: Weighting,
    pub projection_init: ProjectionInit,
    pub hidden_range: HiddenRange,
    pub student_init: StudentInit,
}

impl Default for DistillSpec {
    fn default() -> Self {
        Self {
            teachers: 3,
            student_layers: 2,
            layer_ratio: 2,
            temperature: 1.0,
            hidden_loss: true,
            distill_loss: true,
            task_loss: true,
            weighting: Weighting::LossWeighted,
            projection_init: ProjectionInit::Auto,
            hidden_range: HiddenRange::StudentLayers,
            student_init: StudentInit::FirstK,
        }
    }
}

impl DistillSpec {
    pub fn teacher_layers(&self) -> usize {
        self.layer_ratio * self.student_layers
    }

    pub fn validate(&self) -> Result<()> {
        if self.teachers == 0 || self.student_layers == 0 || self.layer_ratio == 0 {
            bail!(Contract, "teachers, student_layers and layer_ratio must all be at least 1");
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            bail!(Parameter, "temperature must be positive, got {}", self.temperature);
        }
        if !(self.hidden_loss || self.distill_loss || self.task_loss) {
            bail!(Contract, "every loss term is disabled");
        }
        if let Weighting::Single(i) = self.weighting {
            if i >= self.teachers {
                bail!(Contract, "single:{i} names a teacher beyond the {} available", self.teachers);
            }
        }
        if self.hidden_range == HiddenRange::LayerRatio && self.layer_ratio > self.student_layers {
            bail!(
                Contract,
                "hidden range 1..={} exceeds the {} student layers",
                self.layer_ratio,
                self.student_layers
            );
        }
        Ok(())
    }

    /// `(student layer j, teacher layer T·j)` pairs aligned by the hidden loss, 1-based.
    pub fn hidden_pairs(&self) -> Vec<(usize, usize)> {
        let top = match self.hidden_range {
            HiddenRange::StudentLayers => self.student_layers,
            HiddenRange::LayerRatio => self.layer_ratio.min(self.student_layers),
        };
        (1..=top).map(|j| (j, j * self.layer_ratio)).collect()
    }

    pub fn teacher_layer_indices(&self) -> Vec<usize> {
        self.hidden_pairs().into_iter().map(|(_, t)| t).collect()
    }
}

/// Teacher layer aligned with student layer `j` (1-based): `T·j`.
pub fn map_layer(j: usize, student_layers: usize, layer_ratio: usize) -> Result<usize> {
    if j == 0 || j > student_layers {
        bail!(Contract, "student layer {j} is outside 1..={student_layers}");
    }
    Ok(layer_ratio * j)
}

/// Learnable `d_teacher × d_student` maps `W_ij`, indexed `[teacher][pair]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet<F> {
    pub maps: Vec<Vec<Tensor<F>>>,
}

impl<F: Scalar> ProjectionSet<F> {
    pub fn init(spec: &DistillSpec, teacher_dim: usize, student_dim: usize, rng: &mut Rng) -> Self {
        let pairs = spec.hidden_pairs().len();
        let identity = spec.projection_init == ProjectionInit::Auto && teacher_dim == student_dim;
        let maps = (0..spec.teachers)
            .map(|_| {
                (0..pairs)
                    .map(|_| {
                        if identity {
                            Tensor::identity(teacher_dim).param()
                        } else {
                            Tensor::randn(&[teacher_dim, student_dim], 0.02, rng).param()
                        }
                    })
                    .collect()
            })
            .collect();
        Self { maps }
    }

    pub fn count(&self) -> usize {
        self.maps.iter().map(Vec::len).sum()
    }
}

impl<F: Scalar> Parameters<F> for ProjectionSet<F> {
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<F>)>) {
        for (i, row) in self.maps.iter_mut().enumerate() {
            for (j, w) in row.iter_mut().enumerate() {
                out.push((alloc::format!("{prefix}w.{i}.{j}"), w));
            }
        }
    }
}

/// Pooling and head storage for a set of teachers.
#[derive(Debug, Clone, PartialEq)]
pub enum TeacherHeads<F> {
    /// One pooler and head used by every teacher.
    Shared(PoolHead<F>),
    /// A private pooler and head per teacher.
    Private(Vec<PoolHead<F>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherBundle<F> {
    pub teachers: Vec<EncoderParams<F>>,
    pub heads: TeacherHeads<F>,
}

impl<F: Scalar> Parameters<F> for TeacherBundle<F> {
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<F>)>) {
        self.teachers.visit_mut(&alloc::format!("{prefix}teacher."), out);
        match &mut self.heads {
            TeacherHeads::Shared(h) => h.visit_mut(&alloc::format!("{prefix}shared."), out),
            TeacherHeads::Private(hs) => hs.visit_mut(&alloc::format!("{prefix}private."), out),
        }
    }
}

/// Per-teacher view of the training data during (co-)finetuning.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TeacherView {
    /// Dataset rows this teacher trains on; all rows when `None`.
    pub shard: Option<Vec<bool>>,
    /// Replacement labels for this teacher, indexed by dataset row.
    pub labels: Option<Vec<usize>>,
    /// Probability of masking each non-`[CLS]` token.
    pub token_dropout: f64,
}

impl<F: Scalar> TeacherBundle<F> {
    pub fn len(&self) -> usize {
        self.teachers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.teachers.is_empty()
    }

    pub fn head(&self, i: usize) -> &PoolHead<F> {
        match &self.heads {
            TeacherHeads::Shared(h) => h,
            TeacherHeads::Private(hs) => &hs[i],
        }
    }

    pub fn is_shared(&self) -> bool {
        matches!(self.heads, TeacherHeads::Shared(_))
    }

    /// Teacher `i` with its head as a standalone, frozen classifier.
    pub fn classifier(&self, i: usize) -> Classifier<F> {
        let mut c = Classifier {
            encoder: self.teachers[i].clone(),
            head: self.head(i).clone(),
        };
        for (_, t) in c.named_mut("") {
            t.set_requires_grad(false);
        }
        c
    }

    /// Frozen forward pass of every teacher: the hidden states `spec` aligns
    /// and the logits. Nothing here is recorded on a trainable tape.
    pub fn signals(&self, tokens: &TokenBatch, spec: &DistillSpec) -> Result<TeacherSignals<F>> {
        let layers = spec.teacher_layer_indices();
        let mut hidden = Vec::with_capacity(self.len());
        let mut logits = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            if self.teachers[i].config.num_layers != spec.teacher_layers() {
                bail!(
                    Contract,
                    "teacher {i} has {} layers, expected T·K = {}",
                    self.teachers[i].config.num_layers,
                    spec.teacher_layers()
                );
            }
            let mut model = self.classifier(i);
            let mut tape = Tape::new();
            let stack = model.encoder.forward(&mut tape, tokens, None)?;
            let out = model.head.forward(&mut tape, &stack, F::one())?;
            hidden.push(layers.iter().map(|&l| tape.value(stack.layers[l]).to_vec()).collect());
            logits.push(tape.value(out.logits).to_vec());
        }
        Ok(TeacherSignals {
            hidden,
            logits,
            layers,
            dim: self.teachers[0].config.hidden_dim,
            classes: self.head(0).head.classes(),
        })
    }
}

/// Frozen teacher outputs for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSignals<F> {
    /// `[teacher][pair]`, each a `[batch·seq, d_teacher]` matrix.
    pub hidden: Vec<Vec<Vec<F>>>,
    /// `[teacher]`, each `[batch, C]`.
    pub logits: Vec<Vec<F>>,
    /// Teacher layer index of each hidden pair.
    pub layers: Vec<usize>,
    pub dim: usize,
    pub classes: usize,
}

impl<F: Scalar> TeacherSignals<F> {
    pub fn teachers(&self) -> usize {
        self.logits.len()
    }

    /// Restricts to the given teachers, in the given order.
    pub fn subset(&self, teachers: &[usize]) -> Self {
        Self {
            hidden: teachers.iter().map(|&i| self.hidden[i].clone()).collect(),
            logits: teachers.iter().map(|&i| self.logits[i].clone()).collect(),
            layers: self.layers.clone(),
            dim: self.dim,
            classes: self.classes,
        }
    }
}

/// Teacher signals for every row of a dataset, so frozen teachers run once.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherCache<F> {
    seq: usize,
    dim: usize,
    classes: usize,
    layers: Vec<usize>,
    /// `[teacher][pair][row]`, each `seq × d`.
    hidden: Vec<Vec<Vec<Vec<F>>>>,
    /// `[teacher][row]`, each `C`.
    logits: Vec<Vec<Vec<F>>>,
}

impl<F: Scalar> TeacherCache<F> {
    pub fn build(bundle: &TeacherBundle<F>, dataset: &Dataset, spec: &DistillSpec, batch_size: usize, seq: usize) -> Result<Self> {
        let n_t = bundle.len();
        let pairs = spec.hidden_pairs().len();
        let mut cache = Self {
            seq,
            dim: bundle.teachers[0].config.hidden_dim,
            classes: dataset.classes,
            layers: spec.teacher_layer_indices(),
            hidden: vec![vec![vec![Vec::new(); dataset.len()]; pairs]; n_t],
            logits: vec![vec![Vec::new(); dataset.len()]; n_t],
        };
        let row = seq * cache.dim;
        for batch in make_batches(dataset, batch_size, None, seq)? {
            let sig = bundle.signals(&batch.tokens, spec)?;
            for i in 0..n_t {
                for (r, &idx) in batch.indices.iter().enumerate() {
                    for p in 0..pairs {
                        cache.hidden[i][p][idx] = sig.hidden[i][p][r * row..(r + 1) * row].to_vec();
                    }
                    cache.logits[i][idx] = sig.logits[i][r * cache.classes..(r + 1) * cache.classes].to_vec();
                }
            }
        }
        Ok(cache)
    }

    pub fn signals(&self, batch: &Batch) -> Result<TeacherSignals<F>> {
        if batch.tokens.seq != self.seq {
            bail!(Contract, "batch padded to {} but cache holds {}", batch.tokens.seq, self.seq);
        }
        let gather = |per_row: &Vec<Vec<F>>| -> Vec<F> { batch.indices.iter().flat_map(|&i| per_row[i].iter().copied()).collect() };
        Ok(TeacherSignals {
            hidden: self.hidden.iter().map(|t| t.iter().map(gather).collect()).collect(),
            logits: self.logits.iter().map(gather).collect(),
            layers: self.layers.clone(),
            dim: self.dim,
            classes: self.classes,
        })
    }

    /// Teacher predictions for every cached row.
    pub fn predictions(&self, teacher: usize) -> Vec<usize> {
        self.logits[teacher].iter().map(|z| argmax_rows(z, self.classes)[0]).collect()
    }
}

/// `Σ_i Σ_j MSE(H^s_j, H^i_{T·j} · W_ij)` over unmasked positions. Teacher
/// states enter as constants, so gradients reach only the student and `W`.
/// `proj` must already be bound to `tape`.
pub fn mt_hidden_loss<F: Scalar>(
    tape: &mut Tape<F>,
    student: &LayerStack,
    teachers: &TeacherSignals<F>,
    proj: &ProjectionSet<F>,
    spec: &DistillSpec,
) -> Result<NodeId> {
    if student.num_layers() != spec.student_layers {
        bail!(
            Contract,
            "student has {} layers but K = {}",
            student.num_layers(),
            spec.student_layers
        );
    }
    let pairs = spec.hidden_pairs();
    if teachers.layers != spec.teacher_layer_indices() {
        bail!(Contract, "teacher signals carry layers {:?}, expected {:?}", teachers.layers, spec.teacher_layer_indices());
    }
    if proj.maps.len() != teachers.teachers() || proj.maps.iter().any(|m| m.len() != pairs.len()) {
        bail!(Contract, "projection set does not match {} teachers × {} layers", teachers.teachers(), pairs.len());
    }
    let rows = student.batch * student.seq;
    let mut total = None;
    for (i, per_teacher) in teachers.hidden.iter().enumerate() {
        for (p, &(j, _)) in pairs.iter().enumerate() {
            let h = tape.constant(vec![rows, teachers.dim], per_teacher[p].clone())?;
            let w = proj.maps[i][p].node.ok_or_else(|| Error::Contract("projection not bound".to_string()))?;
            let mapped = tape.matmul(h, w)?;
            let term = tape.mse(student.layers[j], mapped, Some(student.mask.clone()))?;
            total = Some(match total {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
    }
    total.ok_or_else(|| Error::Contract("no teacher hidden states".to_string()))
}

/// `1 / (1 + CE(gold, y_i))`, in `(0, 1]`.
pub fn teacher_weight<F: Scalar>(gold: &[F], teacher_probs: &[F]) -> F {
    F::one() / (F::one() + cross_entropy_unchecked(gold, teacher_probs))
}

/// Multi-teacher distillation loss, averaged over the batch. Weights are
/// computed from untempered teacher probabilities and are constants.
pub fn mt_distill_loss<F: Scalar>(
    tape: &mut Tape<F>,
    teacher_logits: &[Vec<F>],
    student_logits: NodeId,
    labels: &[usize],
    t: F,
    mode: Weighting,
) -> Result<NodeId> {
    if teacher_logits.is_empty() {
        bail!(Contract, "distillation needs at least one teacher");
    }
    let shape = tape.shape(student_logits).to_vec();
    let (rows, classes) = (shape[0], shape[1]);
    if rows != labels.len() || teacher_logits.iter().any(|z| z.len() != rows * classes) {
        return Err(Error::Dimension {
            op: "mt_distill_loss",
            lhs: shape,
            rhs: vec![teacher_logits.len(), labels.len()],
        });
    }
    let q = tape.softmax_rows(student_logits, t)?;
    let tempered = |z: &[F]| {
        let mut p = vec![F::zero(); z.len()];
        softmax_rows_into(z, &mut p, classes, t);
        p
    };
    let gold: Vec<F> = onehot(labels, classes);
    let per_row = match mode {
        Weighting::EnsembleAverage => {
            let n = F::of(teacher_logits.len() as f64);
            let mut mean = vec![F::zero(); rows * classes];
            for z in teacher_logits {
                for (m, p) in mean.iter_mut().zip(tempered(z)) {
                    *m = *m + p;
                }
            }
            for m in &mut mean {
                *m = *m / n;
            }
            tape.cross_entropy_rows(q, mean)?
        }
        Weighting::Single(i) => {
            let z = teacher_logits
                .get(i)
                .ok_or_else(|| Error::Contract(alloc::format!("single:{i} with {} teachers", teacher_logits.len())))?;
            tape.cross_entropy_rows(q, tempered(z))?
        }
        Weighting::LossWeighted | Weighting::Uniform => {
            let mut acc = None;
            for z in teacher_logits {
                let ce = tape.cross_entropy_rows(q, tempered(z))?;
                let term = if mode == Weighting::LossWeighted {
                    let weights = (0..rows)
                        .map(|r| {
                            let probs = softmax(&z[r * classes..(r + 1) * classes], F::one());
                            teacher_weight(&gold[r * classes..(r + 1) * classes], &probs)
                        })
                        .collect();
                    tape.mul_const(ce, weights)?
                } else {
                    ce
                };
                acc = Some(match acc {
                    None => term,
                    Some(a) => tape.add(a, term)?,
                });
            }
            acc.expect("non-empty")
        }
    };
    Ok(tape.mean(per_row))
}

/// Batch mean of `CE(gold, student_probs)`.
pub fn task_loss<F: Scalar>(tape: &mut Tape<F>, student_probs: NodeId, labels: &[usize]) -> Result<NodeId> {
    let classes = tape.shape(student_probs)[1];
    let ce = tape.cross_entropy_rows(student_probs, onehot(labels, classes))?;
    Ok(tape.mean(ce))
}

/// Loss terms that were computed for a step; `None` when disabled.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub hidden: Option<NodeId>,
    pub distill: Option<NodeId>,
    pub task: Option<NodeId>,
}

/// Unweighted sum of the enabled terms.
pub fn total_loss<F: Scalar>(tape: &mut Tape<F>, spec: &DistillSpec, terms: &LossTerms) -> Result<NodeId> {
    let enabled = [
        (spec.hidden_loss, terms.hidden, "hidden"),
        (spec.distill_loss, terms.distill, "distill"),
        (spec.task_loss, terms.task, "task"),
    ];
    let mut total = None;
    for (on, node, name) in enabled {
        if !on {
            continue;
        }
        let node = node.ok_or_else(|| Error::Contract(alloc::format!("{name} loss is enabled but was not computed")))?;
        total = Some(match total {
            None => node,
            Some(acc) => tape.add(acc, node)?,
        });
    }
    total.ok_or_else(|| Error::Contract("every loss term is disabled".to_string()))
}

/// Loss values of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepLosses {
    pub total: f64,
    pub hidden: Option<f64>,
    pub distill: Option<f64>,
    pub task: Option<f64>,
}

/// Student encoder, pooler and head plus the projections it trains with.
#[derive(Debug, Clone, PartialEq)]
pub struct Student<F> {
    pub model: Classifier<F>,
    pub projections: ProjectionSet<F>,
}

impl<F: Scalar> Parameters<F> for Student<F> {
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<F>)>) {
        self.model.visit_mut(&alloc::format!("{prefix}student."), out);
        self.projections.visit_mut(&alloc::format!("{prefix}projection."), out);
    }
}

/// Records the full student objective for `batch` on `tape` and returns the
/// total node together with the individual terms.
pub fn distill_objective<F: Scalar>(
    tape: &mut Tape<F>,
    student: &mut Student<F>,
    teachers: &TeacherSignals<F>,
    batch: &Batch,
    spec: &DistillSpec,
    dropout: Option<&mut Rng>,
) -> Result<(NodeId, LossTerms)> {
    spec.validate()?;
    if teachers.teachers() != spec.teachers {
        bail!(Contract, "{} teacher signals for N = {}", teachers.teachers(), spec.teachers);
    }
    let stack = student.model.encoder.forward(tape, &batch.tokens, dropout)?;
    let out = student.model.head.forward(tape, &stack, F::one())?;
    let mut terms = LossTerms::default();
    if spec.hidden_loss {
        bind_all(&mut student.projections, tape);
        terms.hidden = Some(mt_hidden_loss(tape, &stack, teachers, &student.projections, spec)?);
    }
    if spec.distill_loss {
        let t = F::of(spec.temperature);
        terms.distill = Some(mt_distill_loss(tape, &teachers.logits, out.logits, &batch.labels, t, spec.weighting)?);
    }
    if spec.task_loss {
        terms.task = Some(task_loss(tape, out.probs, &batch.labels)?);
    }
    let total = total_loss(tape, spec, &terms)?;
    Ok((total, terms))
}

fn losses_of<F: Scalar>(tape: &Tape<F>, total: NodeId, terms: &LossTerms) -> Result<StepLosses> {
    let v = |n: Option<NodeId>| n.map(|n| tape.scalar(n).f64());
    let losses = StepLosses {
        total: tape.scalar(total).f64(),
        hidden: v(terms.hidden),
        distill: v(terms.distill),
        task: v(terms.task),
    };
    if !losses.total.is_finite() {
        return Err(Error::Numeric("distillation loss"));
    }
    Ok(losses)
}

/// One student update. Teachers are only seen through their frozen signals.
pub fn distill_step<F: Scalar>(
    student: &mut Student<F>,
    teachers: &TeacherSignals<F>,
    batch: &Batch,
    spec: &DistillSpec,
    opt: &mut AdamState<F>,
    dropout: Option<&mut Rng>,
) -> Result<StepLosses> {
    let mut tape = Tape::new();
    let (total, terms) = distill_objective(&mut tape, student, teachers, batch, spec, dropout)?;
    let losses = losses_of(&tape, total, &terms)?;
    tape.backward(total)?;
    student.model.zero_grad();
    collect_all(&mut student.model, &tape);
    let mut params = group(&mut student.model, "", 0);
    // Projections are only on this tape when the hidden loss is on.
    if spec.hidden_loss {
        student.projections.zero_grad();
        collect_all(&mut student.projections, &tape);
        params.extend(group(&mut student.projections, "projection.", 0));
    }
    opt.step(&mut params)?;
    Ok(losses)
}

/// Records `Σ_i CE(y, y_i)` over the teachers, each through its pooler and
/// head, and returns the loss node.
pub fn cofinetune_objective<F: Scalar>(
    tape: &mut Tape<F>,
    bundle: &mut TeacherBundle<F>,
    batch: &Batch,
    views: &[TeacherView],
    mut rng: Option<&mut Rng>,
) -> Result<NodeId> {
    if views.len() != bundle.len() {
        bail!(Contract, "{} teacher views for {} teachers", views.len(), bundle.len());
    }
    match &mut bundle.heads {
        TeacherHeads::Shared(h) => bind_all(h, tape),
        TeacherHeads::Private(hs) => bind_all(hs, tape),
    }
    let mut total = None;
    let scale = F::one() / F::of(batch.len() as f64);
    for (i, view) in views.iter().enumerate() {
        bind_all(&mut bundle.teachers[i], tape);
        // Rows outside the shard contribute zero, so they are not run at all;
        // the sum is still divided by the full batch size.
        let rows: Vec<usize> = match &view.shard {
            Some(shard) => (0..batch.len()).filter(|&r| shard[batch.indices[r]]).collect(),
            None => (0..batch.len()).collect(),
        };
        if rows.is_empty() {
            continue;
        }
        let tokens = select_rows(&batch.tokens, &rows);
        let tokens = match rng.as_deref_mut() {
            Some(r) if view.token_dropout > 0.0 => token_dropout(&tokens, view.token_dropout, r),
            _ => tokens,
        };
        let stack = bundle.teachers[i].encode(tape, &tokens, rng.as_deref_mut())?;
        let out = bundle.head(i).apply(tape, &stack, F::one())?;
        let labels: Vec<usize> = rows
            .iter()
            .map(|&r| match &view.labels {
                Some(l) => l[batch.indices[r]],
                None => batch.labels[r],
            })
            .collect();
        let ce = tape.cross_entropy_rows(out.probs, onehot(&labels, batch.classes))?;
        let sum = tape.sum(ce);
        let term = tape.scale(sum, scale);
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    if total.is_none() && !views.is_empty() {
        // No teacher has a row of this batch in its shard.
        total = Some(tape.constant(vec![1], vec![F::zero()])?);
    }
    total.ok_or_else(|| Error::Contract("co-finetuning needs at least one teacher".to_string()))
}

/// Joint finetuning step: one backward pass over the summed per-teacher
/// losses, then an Adam update of every teacher and the pooling/head layers.
/// Encoders update with the optimizer's first learning rate and heads with
/// its last, so a single-rate optimizer treats them alike.
pub fn cofinetune_step<F: Scalar>(
    bundle: &mut TeacherBundle<F>,
    batch: &Batch,
    views: &[TeacherView],
    opt: &mut AdamState<F>,
    rng: Option<&mut Rng>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = cofinetune_objective(&mut tape, bundle, batch, views, rng)?;
    let value = tape.scalar(loss).f64();
    if !value.is_finite() {
        return Err(Error::Numeric("co-finetuning loss"));
    }
    tape.backward(loss)?;
    bundle.zero_grad();
    collect_all(bundle, &tape);
    let head_group = opt.lrs.len().saturating_sub(1);
    let mut params = group(&mut bundle.teachers, "teacher.", 0);
    params.extend(match &mut bundle.heads {
        TeacherHeads::Shared(h) => group(h, "shared.", head_group),
        TeacherHeads::Private(hs) => group(hs, "private.", head_group),
    });
    opt.step(&mut params)?;
    Ok(value)
}

/// Plain supervised step of one classifier on gold labels.
pub fn finetune_step<F: Scalar>(model: &mut Classifier<F>, batch: &Batch, opt: &mut AdamState<F>, rng: Option<&mut Rng>) -> Result<f64> {
    let mut tape = Tape::new();
    let stack = model.encoder.forward(&mut tape, &batch.tokens, rng)?;
    let out = model.head.forward(&mut tape, &stack, F::one())?;
    let loss = task_loss(&mut tape, out.probs, &batch.labels)?;
    let value = tape.scalar(loss).f64();
    if !value.is_finite() {
        return Err(Error::Numeric("finetuning loss"));
    }
    tape.backward(loss)?;
    model.zero_grad();
    collect_all(model, &tape);
    opt.step(&mut group(model, "", 0))?;
    Ok(value)
}

fn select_rows(tokens: &TokenBatch, rows: &[usize]) -> TokenBatch {
    if rows.len() == tokens.batch {
        return tokens.clone();
    }
    let seq = tokens.seq;
    TokenBatch {
        ids: rows.iter().flat_map(|&r| tokens.ids[r * seq..(r + 1) * seq].iter().copied()).collect(),
        mask: rows.iter().flat_map(|&r| tokens.mask[r * seq..(r + 1) * seq].iter().copied()).collect(),
        batch: rows.len(),
        seq,
    }
}

/// Student encoder seeded from `K` of the teacher's layers plus its embeddings.
pub fn init_student<F: Scalar>(teacher: &EncoderParams<F>, k: usize, scheme: StudentInit) -> Result<EncoderParams<F>> {
    let depth = teacher.layers.len();
    if k == 0 || k > depth {
        bail!(Contract, "cannot take {k} layers from a {depth}-layer teacher");
    }
    let picks: Vec<usize> = match scheme {
        StudentInit::FirstK => (0..k).collect(),
        StudentInit::LastK => (depth - k..depth).collect(),
        StudentInit::Skip => {
            let stride = depth / k;
            (1..=k).map(|j| j * stride - 1).collect()
        }
    };
    let mut config = teacher.config.clone();
    config.num_layers = k;
    let mut student = EncoderParams {
        config,
        token_embedding: teacher.token_embedding.clone(),
        position_embedding: teacher.position_embedding.clone(),
        layers: picks.iter().map(|&i| teacher.layers[i].clone()).collect(),
    };
    for (_, t) in student.named_mut("") {
        t.set_requires_grad(true);
        t.node = None;
    }
    Ok(student)
}

/// Argmax predictions of `model` over `dataset`, dropout off.
pub fn predict<F: Scalar>(model: &mut Classifier<F>, dataset: &Dataset, batch_size: usize, seq: usize) -> Result<Vec<usize>> {
    let mut preds = vec![0; dataset.len()];
    for batch in make_batches(dataset, batch_size, None, seq)? {
        let logits = model.predict_logits(&batch.tokens)?;
        for (&i, p) in batch.indices.iter().zip(argmax_rows(&logits, dataset.classes)) {
            preds[i] = p;
        }
    }
    Ok(preds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::{E, LN_2};

    #[test]
    fn map_layer_examples() {
        assert_eq!(map_layer(3, 6, 2).unwrap(), 6);
        for j in 1..=5 {
            assert_eq!(map_layer(j, 5, 1).unwrap(), j);
        }
        let m: Vec<usize> = (1..=4).map(|j| map_layer(j, 4, 3).unwrap()).collect();
        assert_eq!(m, vec![3, 6, 9, 12]);
        assert!(map_layer(0, 4, 3).is_err());
        assert!(map_layer(5, 4, 3).is_err());
    }

    #[test]
    fn teacher_weight_examples() {
        assert_eq!(teacher_weight(&[0.0, 1.0], &[0.0, 1.0]), 1.0);
        let p = 1.0 / E;
        let w = teacher_weight(&[1.0, 0.0, 0.0], &[p, (1.0 - p) / 2.0, (1.0 - p) / 2.0]);
        assert!((w - 0.5).abs() < 1e-12);
        let w = teacher_weight(&[1.0, 0.0], &[0.5, 0.5]);
        assert!((w - 1.0 / (1.0 + LN_2)).abs() < 1e-15);
        assert!((w - 0.5907).abs() < 1e-4);
    }

    #[test]
    fn weighting_round_trips_through_strings() {
        for w in [
            Weighting::LossWeighted,
            Weighting::Uniform,
            Weighting::Single(2),
            Weighting::EnsembleAverage,
        ] {
            assert_eq!(w.to_string().parse::<Weighting>().unwrap(), w);
        }
        assert!("single:x".parse::<Weighting>().is_err());
    }

    #[test]
    fn spec_validation() {
        let mut s = DistillSpec::default();
        s.validate().unwrap();
        s.hidden_loss = false;
        s.distill_loss = false;
        s.task_loss = false;
        assert!(matches!(s.validate(), Err(Error::Contract(_))));
        let s = DistillSpec {
            weighting: Weighting::Single(3),
            ..DistillSpec::default()
        };
        assert!(s.validate().is_err());
        let s = DistillSpec {
            student_layers: 1,
            layer_ratio: 2,
            hidden_range: HiddenRange::LayerRatio,
            ..DistillSpec::default()
        };
        assert!(s.validate().is_err());
        let s = DistillSpec {
            student_layers: 4,
            layer_ratio: 2,
            hidden_range: HiddenRange::LayerRatio,
            ..DistillSpec::default()
        };
        assert_eq!(s.hidden_pairs(), vec![(1, 2), (2, 4)]);
    }

    #[test]
    fn total_loss_sums_enabled_terms() {
        let mut tape = Tape::<f64>::new();
        let h = tape.constant(vec![1], vec![0.1]).unwrap();
        let d = tape.constant(vec![1], vec![0.2]).unwrap();
        let t = tape.constant(vec![1], vec![0.3]).unwrap();
        let spec = DistillSpec::default();
        let terms = LossTerms {
            hidden: Some(h),
            distill: Some(d),
            task: Some(t),
        };
        let total = total_loss(&mut tape, &spec, &terms).unwrap();
        assert!((tape.scalar(total) - 0.6).abs() < 1e-15);

        let only_task = DistillSpec {
            hidden_loss: false,
            distill_loss: false,
            ..DistillSpec::default()
        };
        let total = total_loss(&mut tape, &only_task, &terms).unwrap();
        assert_eq!(tape.scalar(total), 0.3);

        let none = DistillSpec {
            task_loss: false,
            ..only_task
        };
        assert!(matches!(total_loss(&mut tape, &none, &terms), Err(Error::Contract(_))));
    }

    #[test]
    fn task_loss_examples() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let l = task_loss(&mut tape, p, &[0, 1]).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
        let u = tape.constant(vec![1, 18], vec![1.0 / 18.0; 18]).unwrap();
        let l = task_loss(&mut tape, u, &[7]).unwrap();
        assert!((tape.scalar(l) - libm_ln(18.0)).abs() < 1e-12);
        assert!((tape.scalar(l) - 2.8904).abs() < 1e-4);
    }

    fn libm_ln(x: f64) -> f64 {
        num_traits::Float::ln(x)
    }

    #[test]
    fn distill_loss_self_distillation_is_entropy() {
        let z = vec![0.3, -1.2, 2.0];
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(vec![1, 3], z.clone()).unwrap();
        let l = mt_distill_loss(&mut tape, &[z.clone()], s, &[1], 1.0, Weighting::Uniform).unwrap();
        let p = softmax(&z, 1.0);
        let entropy: f64 = -p.iter().map(|&v| v * libm_ln(v)).sum::<f64>();
        assert!((tape.scalar(l) - entropy).abs() < 1e-14);
    }

    #[test]
    fn distill_loss_with_confident_correct_teachers() {
        // Logits that saturate to an exact one-hot in f64.
        let teacher = vec![0.0, 800.0, 0.0];
        let z_s = vec![0.1, 0.4, -0.3];
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(vec![1, 3], z_s.clone()).unwrap();
        let l = mt_distill_loss(&mut tape, &[teacher.clone(), teacher], s, &[1], 1.0, Weighting::LossWeighted).unwrap();
        let q = softmax(&z_s, 1.0);
        assert!((tape.scalar(l) - 2.0 * -libm_ln(q[1])).abs() < 1e-14);
    }

    #[test]
    fn empty_teacher_list_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(vec![1, 2], vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            mt_distill_loss(&mut tape, &[], s, &[0], 1.0, Weighting::Uniform),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn init_student_copies_chosen_layers() {
        let cfg = crate::encoder::EncoderConfig {
            num_layers: 4,
            ..Default::default()
        };
        let teacher = EncoderParams::<f64>::init(cfg, &mut Rng::seed(1)).unwrap();
        let s = init_student(&teacher, 2, StudentInit::FirstK).unwrap();
        assert_eq!(s.layers, teacher.layers[..2]);
        assert_eq!(s.token_embedding, teacher.token_embedding);
        assert_eq!(s.config.num_layers, 2);
        let s = init_student(&teacher, 2, StudentInit::LastK).unwrap();
        assert_eq!(s.layers, teacher.layers[2..]);
        let s = init_student(&teacher, 2, StudentInit::Skip).unwrap();
        assert_eq!(s.layers[0], teacher.layers[1]);
        assert_eq!(s.layers[1], teacher.layers[3]);
        assert!(init_student(&teacher, 5, StudentInit::FirstK).is_err());
    }
}
