//! Training phases and the repeat/variant runner.
//!
//! Per seed: generate data, warm up each teacher alone on its view of the
//! training set, finetune the teachers for each setup a variant needs
//! (shared head, separate heads, or with one noisy teacher), then distill a
//! student per variant against the frozen teachers.

use std::collections::{BTreeMap, HashSet};
use std::time::Instant;

use mtkd_core::adam::AdamState;
use mtkd_core::distill::{
    cofinetune_step, distill_step, init_student, predict, ProjectionSet, Student, TeacherBundle, TeacherCache, TeacherHeads,
    TeacherView,
};
use mtkd_core::encoder::{Classifier, EncoderParams, PoolHead};
use mtkd_core::tasks::{gen_synthetic, make_batches, Dataset, LossMeans, MetricsReport, Splits, TaskSpec};
use mtkd_core::Rng;

use crate::checkpoint::CRC;
use crate::config::RunConfig;
use crate::report::{EpochMetrics, RunRecord};
use crate::variant::{Setup, Variant};
use crate::{data, Error, Result};

mod stream {
    pub const TEACHER_INIT: u64 = 0x7EAC_0000;
    pub const PRETRAIN_HEAD: u64 = 0x7EAD_0000;
    pub const PRETRAIN: u64 = 0x7EAE_0000;
    pub const SHARD: u64 = 0x5AA2_0000;
    pub const NOISE: u64 = 0x4015_E000;
    pub const CORPUS: u64 = 0xC0_0000;
    pub const SHARED_HEAD: u64 = 0x5EAD;
    pub const SEPARATE_HEAD: u64 = 0x5E9A_0000;
    pub const FINETUNE: u64 = 0xF1_0000;
    pub const STUDENT_HEAD: u64 = 0x57D_0001;
    pub const PROJECTION: u64 = 0x57D_0002;
    pub const DISTILL: u64 = 0x57D_0003;
}

/// The task spec of one repeat: the configured task with the run seed.
pub fn task_for(config: &RunConfig, seed: u64) -> TaskSpec {
    TaskSpec { seed, ..config.task.clone() }
}

pub fn generate(config: &RunConfig, seed: u64) -> Result<Splits> {
    Ok(gen_synthetic(&task_for(config, seed))?)
}

/// CRC-64 over the three splits in file encoding.
pub fn splits_hash(splits: &Splits) -> u64 {
    let mut digest = CRC.digest();
    for d in [&splits.train, &splits.dev, &splits.test] {
        digest.update(data::encode(d).as_bytes());
        digest.update(b"\n");
    }
    digest.finalize()
}

pub fn evaluate(model: &mut Classifier<f32>, dataset: &Dataset, config: &RunConfig) -> Result<MetricsReport> {
    let preds = predict(model, dataset, config.eval_batch_size, config.task.max_seq_len)?;
    Ok(MetricsReport::evaluate(&preds, &dataset.labels(), dataset.classes)?)
}

/// Each teacher's view of the training set for a setup.
pub fn views(config: &RunConfig, seed: u64, train: &Dataset, setup: Setup) -> Vec<TeacherView> {
    let div = &config.diversity;
    let n = train.len();
    let keep = ((div.shard_fraction * n as f64).round() as usize).clamp(1, n);
    (0..config.distill.teachers)
        .map(|i| {
            let shard = (keep < n).then(|| {
                let mut rows: Vec<usize> = (0..n).collect();
                Rng::derive(seed, stream::SHARD + i as u64).shuffle(&mut rows);
                let mut mask = vec![false; n];
                for &r in &rows[..keep] {
                    mask[r] = true;
                }
                mask
            });
            let labels = (setup == Setup::Noisy && i == div.noisy_teacher)
                .then(|| train.with_label_noise(div.noise_rate, &mut Rng::derive(seed, stream::NOISE)).labels());
            TeacherView {
                shard,
                labels,
                token_dropout: div.token_dropout[i % div.token_dropout.len()],
            }
        })
        .collect()
}

fn fresh_head(config: &RunConfig, classes: usize, rng: &mut Rng) -> Result<PoolHead<f32>> {
    let h = &config.head;
    Ok(PoolHead::init(config.teacher.hidden_dim, h.query_dim, classes, h.pooling, h.init_std, rng)?)
}

/// Keeps the model state with the best score seen so far.
struct EarlyStop<M> {
    best: Option<(f64, M)>,
    stale: usize,
    patience: usize,
}

impl<M: Clone> EarlyStop<M> {
    fn new(patience: usize) -> Self {
        Self { best: None, stale: 0, patience }
    }

    /// Records `score`; returns false once patience is used up.
    fn observe(&mut self, score: f64, model: &M) -> bool {
        if self.best.as_ref().map_or(true, |(b, _)| score > *b) {
            self.best = Some((score, model.clone()));
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale < self.patience
    }

    fn into_best(self) -> Option<M> {
        self.best.map(|(_, m)| m)
    }
}

/// Shared identity of records produced for one seed.
#[derive(Debug, Clone, Copy)]
pub struct RunContext<'a> {
    pub config: &'a RunConfig,
    pub seed: u64,
    pub splits: &'a Splits,
    pub config_hash: u64,
    pub dataset_hash: u64,
}

impl<'a> RunContext<'a> {
    pub fn new(config: &'a RunConfig, seed: u64, splits: &'a Splits) -> Self {
        Self {
            config,
            seed,
            splits,
            config_hash: config.hash(),
            dataset_hash: splits_hash(splits),
        }
    }

    fn record(&self, variant: &str) -> RunRecord {
        RunRecord {
            run_id: format!("{:016x}-{variant}-s{}", self.config_hash, self.seed),
            variant: variant.to_string(),
            seed: self.seed,
            epochs: Vec::new(),
            wall_clock_s: 0.0,
            config_hash: self.config_hash,
            dataset_hash: self.dataset_hash,
            failed: None,
        }
    }

    fn seq(&self) -> usize {
        self.config.task.max_seq_len
    }

    /// Teacher `i`'s private warm-up corpus, with no example from dev or test.
    pub fn corpus(&self, i: usize) -> Result<Dataset> {
        let task = TaskSpec {
            seed: Rng::derive(self.seed, stream::CORPUS + i as u64).next_u64(),
            train: self.config.diversity.pretrain_examples,
            dev: 1,
            test: 1,
            noise_rate: 0.0,
            ..self.config.task.clone()
        };
        let held_out: HashSet<&[u32]> = self.splits.dev.examples.iter().chain(&self.splits.test.examples).map(|e| e.tokens.as_slice()).collect();
        let mut corpus = gen_synthetic(&task)?.train;
        corpus.examples.retain(|e| !held_out.contains(e.tokens.as_slice()));
        Ok(corpus)
    }

    /// Warms up teacher `i` alone with a private head, on its corpus or, when
    /// there is none, on its view of the training set. A noisy teacher sees
    /// corrupted labels either way.
    pub fn pretrain(&self, i: usize, noisy: bool) -> Result<Classifier<f32>> {
        let config = self.config;
        let setup = if noisy { Setup::Noisy } else { Setup::Shared };
        let mut view = views(config, self.seed, &self.splits.train, setup).swap_remove(i);
        let corpus;
        let data = if config.diversity.pretrain_examples > 0 {
            corpus = self.corpus(i)?;
            view.shard = None;
            view.labels = view.labels.map(|_| {
                let mut rng = Rng::derive(self.seed, stream::NOISE + 1);
                corpus.with_label_noise(config.diversity.noise_rate, &mut rng).labels()
            });
            &corpus
        } else {
            &self.splits.train
        };
        let salt = i as u64 + if noisy { 0x100 } else { 0 };
        let encoder = EncoderParams::init(config.teacher.clone(), &mut Rng::derive(self.seed, stream::TEACHER_INIT + i as u64))?;
        let head = fresh_head(config, data.classes, &mut Rng::derive(self.seed, stream::PRETRAIN_HEAD + salt))?;
        let mut bundle = TeacherBundle {
            teachers: vec![encoder],
            heads: TeacherHeads::Private(vec![head]),
        };
        let mut opt = AdamState::new(config.train.adam, vec![config.train.teacher_lr]);
        let mut rng = Rng::derive(self.seed, stream::PRETRAIN + salt);
        for _ in 0..config.train.pretrain_epochs {
            let order = rng.next_u64();
            for batch in make_batches(data, config.batch_size, Some(order), self.seq())? {
                cofinetune_step(&mut bundle, &batch, std::slice::from_ref(&view), &mut opt, Some(&mut rng))
                    .map_err(|e| Error::from(e).in_phase("pretrain"))?;
            }
        }
        Ok(bundle.classifier(0))
    }

    /// Trains `bundle` with per-teacher `views`, stopping early on the mean
    /// dev accuracy of the teachers. Returns per-teacher records.
    fn finetune(&self, bundle: &mut TeacherBundle<f32>, views: &[TeacherView], names: &[String], salt: u64) -> Result<Vec<RunRecord>> {
        let config = self.config;
        let start = Instant::now();
        let mut records: Vec<RunRecord> = names.iter().map(|n| self.record(n)).collect();
        let mut rng = Rng::derive(self.seed, stream::FINETUNE + salt);
        // A zero encoder rate leaves the encoders bitwise unchanged.
        let mut opt = AdamState::new(config.train.adam, vec![0.0, config.train.head_lr]);
        for _ in 0..config.train.head_warmup_epochs {
            let order = rng.next_u64();
            for batch in make_batches(&self.splits.train, config.batch_size, Some(order), self.seq())? {
                cofinetune_step(bundle, &batch, views, &mut opt, Some(&mut rng)).map_err(|e| Error::from(e).in_phase("head warm-up"))?;
            }
        }
        opt.lrs[0] = config.train.teacher_lr;
        let mut stop = EarlyStop::new(config.train.patience);
        for epoch in 1..=config.train.cofinetune_epochs {
            let order = rng.next_u64();
            let (mut sum, mut count) = (0.0, 0usize);
            for batch in make_batches(&self.splits.train, config.batch_size, Some(order), self.seq())? {
                sum += cofinetune_step(bundle, &batch, views, &mut opt, Some(&mut rng)).map_err(|e| Error::from(e).in_phase("cofinetune"))?;
                count += 1;
            }
            let mut dev_mean = 0.0;
            for (i, record) in records.iter_mut().enumerate() {
                let mut model = bundle.classifier(i);
                let dev = evaluate(&mut model, &self.splits.dev, config)?;
                let test = evaluate(&mut model, &self.splits.test, config)?;
                dev_mean += dev.accuracy / views.len() as f64;
                record.epochs.push(EpochMetrics {
                    epoch,
                    dev,
                    test,
                    losses: LossMeans {
                        task: Some(sum / count as f64),
                        ..LossMeans::default()
                    },
                    wall_clock_s: start.elapsed().as_secs_f64(),
                });
            }
            if !stop.observe(dev_mean, bundle) {
                break;
            }
        }
        if let Some(best) = stop.into_best() {
            *bundle = best;
        }
        for r in &mut records {
            r.wall_clock_s = start.elapsed().as_secs_f64();
        }
        Ok(records)
    }

    /// Finetunes the teacher set for `setup` from warmed-up classifiers.
    /// Returns the frozen bundle and one record per teacher.
    pub fn teachers(&self, setup: Setup, warm: &[Classifier<f32>]) -> Result<(TeacherBundle<f32>, Vec<RunRecord>)> {
        let views = views(self.config, self.seed, &self.splits.train, setup);
        let classes = self.splits.train.classes;
        let name = |i: usize| format!("teacher{i}@{setup}");
        if setup.is_shared() {
            let salt = if setup == Setup::Noisy { 1 } else { 0 };
            let head = fresh_head(self.config, classes, &mut Rng::derive(self.seed, stream::SHARED_HEAD + salt))?;
            let mut bundle = TeacherBundle {
                teachers: warm.iter().map(|c| thaw(c.encoder.clone())).collect(),
                heads: TeacherHeads::Shared(head),
            };
            let names: Vec<String> = (0..warm.len()).map(name).collect();
            let records = self.finetune(&mut bundle, &views, &names, salt)?;
            return Ok((bundle, records));
        }
        let mut teachers = Vec::new();
        let mut heads = Vec::new();
        let mut records = Vec::new();
        for (i, (c, view)) in warm.iter().zip(&views).enumerate() {
            let head = fresh_head(self.config, classes, &mut Rng::derive(self.seed, stream::SEPARATE_HEAD + i as u64))?;
            let mut one = TeacherBundle {
                teachers: vec![thaw(c.encoder.clone())],
                heads: TeacherHeads::Private(vec![head]),
            };
            records.extend(self.finetune(&mut one, std::slice::from_ref(view), &[name(i)], 0x10 + i as u64)?);
            teachers.extend(one.teachers);
            if let TeacherHeads::Private(h) = one.heads {
                heads.extend(h);
            }
        }
        Ok((
            TeacherBundle {
                teachers,
                heads: TeacherHeads::Private(heads),
            },
            records,
        ))
    }

    /// Distills one student for `variant` against cached teacher signals and
    /// returns it restored to its best dev epoch.
    pub fn distill(&self, variant: &Variant, bundle: &TeacherBundle<f32>, cache: &TeacherCache<f32>) -> Result<(Student<f32>, RunRecord)> {
        let config = self.config;
        let spec = variant.apply(&config.distill)?;
        let start = Instant::now();
        let mut record = self.record(&variant.name);
        let encoder = init_student(&bundle.teachers[config.train.student_from], spec.student_layers, spec.student_init)?;
        let head = fresh_head(config, self.splits.train.classes, &mut Rng::derive(self.seed, stream::STUDENT_HEAD))?;
        let d = config.teacher.hidden_dim;
        let mut student = Student {
            model: Classifier { encoder, head },
            projections: ProjectionSet::init(&spec, d, d, &mut Rng::derive(self.seed, stream::PROJECTION)),
        };
        let mut opt = AdamState::new(config.train.adam, vec![config.train.student_lr]);
        let mut rng = Rng::derive(self.seed, stream::DISTILL);
        let mut stop = EarlyStop::new(config.train.patience);
        for epoch in 1..=config.train.distill_epochs {
            let order = rng.next_u64();
            let mut sums = [0.0f64; 3];
            let mut count = 0usize;
            for batch in make_batches(&self.splits.train, config.batch_size, Some(order), self.seq())? {
                let signals = cache.signals(&batch)?.subset(&variant.teachers);
                let step = distill_step(&mut student, &signals, &batch, &spec, &mut opt, Some(&mut rng))
                    .map_err(|e| Error::from(e).in_phase("distill"))?;
                for (s, v) in sums.iter_mut().zip([step.task, step.hidden, step.distill]) {
                    *s += v.unwrap_or(0.0);
                }
                count += 1;
            }
            let mean = |on: bool, s: f64| on.then_some(s / count as f64);
            let dev = evaluate(&mut student.model, &self.splits.dev, config)?;
            let test = evaluate(&mut student.model, &self.splits.test, config)?;
            let score = dev.accuracy;
            record.epochs.push(EpochMetrics {
                epoch,
                dev,
                test,
                losses: LossMeans {
                    task: mean(spec.task_loss, sums[0]),
                    hidden: mean(spec.hidden_loss, sums[1]),
                    distill: mean(spec.distill_loss, sums[2]),
                },
                wall_clock_s: start.elapsed().as_secs_f64(),
            });
            if !stop.observe(score, &student) {
                break;
            }
        }
        if let Some(best) = stop.into_best() {
            student = best;
        }
        record.wall_clock_s = start.elapsed().as_secs_f64();
        Ok((student, record))
    }
}

fn thaw(mut encoder: EncoderParams<f32>) -> EncoderParams<f32> {
    use mtkd_core::Parameters;
    for (_, t) in encoder.named_mut("") {
        t.set_requires_grad(true);
        t.node = None;
    }
    encoder
}

/// Everything one seed produced.
#[derive(Debug, Clone, Default)]
pub struct SeedOutput {
    pub students: Vec<RunRecord>,
    pub teachers: Vec<RunRecord>,
}

fn failed_record(ctx: &RunContext<'_>, variant: &str, e: &Error) -> RunRecord {
    let mut r = ctx.record(variant);
    r.failed = Some(match e {
        Error::Diverged { phase, .. } => phase.clone(),
        other => other.to_string(),
    });
    r
}

/// Runs every variant for one seed. Teacher phases run once per setup and
/// are shared by the variants that need them. A diverging phase marks the
/// affected runs failed instead of aborting.
pub fn run_seed(config: &RunConfig, seed: u64, variants: &[Variant]) -> Result<SeedOutput> {
    let splits = generate(config, seed)?;
    let ctx = RunContext::new(config, seed, &splits);
    let mut out = SeedOutput::default();
    let setups: Vec<Setup> = Setup::ALL.into_iter().filter(|s| variants.iter().any(|v| v.setup == *s)).collect();
    let n = config.distill.teachers;
    let mut clean: BTreeMap<usize, Classifier<f32>> = BTreeMap::new();
    for setup in setups {
        let noisy = |i: usize| setup == Setup::Noisy && i == config.diversity.noisy_teacher;
        let warm: Result<Vec<Classifier<f32>>> = (0..n)
            .map(|i| {
                if noisy(i) {
                    return ctx.pretrain(i, true);
                }
                if !clean.contains_key(&i) {
                    clean.insert(i, ctx.pretrain(i, false)?);
                }
                Ok(clean[&i].clone())
            })
            .collect();
        let teachers = warm.and_then(|w| ctx.teachers(setup, &w));
        let (bundle, records) = match teachers {
            Ok(t) => t,
            Err(e @ Error::Diverged { .. }) => {
                for v in variants.iter().filter(|v| v.setup == setup) {
                    out.students.push(failed_record(&ctx, &v.name, &e));
                }
                continue;
            }
            Err(e) => return Err(e),
        };
        out.teachers.extend(records);
        let cache = TeacherCache::build(&bundle, &splits.train, &config.distill, config.eval_batch_size, config.task.max_seq_len)?;
        for v in variants.iter().filter(|v| v.setup == setup) {
            match ctx.distill(v, &bundle, &cache) {
                Ok((_, record)) => out.students.push(record),
                Err(e @ Error::Diverged { .. }) => out.students.push(failed_record(&ctx, &v.name, &e)),
                Err(e) => return Err(e),
            }
        }
    }
    // Variant order, not setup order, so reports follow the configured list.
    let rank = |name: &str| variants.iter().position(|v| v.name == name).unwrap_or(usize::MAX);
    out.students.sort_by_key(|r| rank(&r.variant));
    Ok(out)
}

/// Parses and checks variant names against the configuration.
pub fn parse_variants(config: &RunConfig, variants: &[String]) -> Result<Vec<Variant>> {
    variants
        .iter()
        .map(|v| {
            let parsed = Variant::parse(v, config.distill.teachers)?;
            parsed.apply(&config.distill)?;
            Ok(parsed)
        })
        .collect()
}

/// Runs `variants` for every repeat, in seed order. `progress` sees each
/// seed's output as it completes.
pub fn run_ablations(config: &RunConfig, variants: &[String], mut progress: impl FnMut(&SeedOutput)) -> Result<SeedOutput> {
    let parsed = parse_variants(config, variants)?;
    let mut out = SeedOutput::default();
    for seed in config.seeds() {
        let s = run_seed(config, seed, &parsed)?;
        progress(&s);
        out.students.extend(s.students);
        out.teachers.extend(s.teachers);
    }
    Ok(out)
}

/// The full method for every repeat.
pub fn run_pipeline(config: &RunConfig) -> Result<SeedOutput> {
    run_ablations(config, &["full".to_string()], |_| {})
}
