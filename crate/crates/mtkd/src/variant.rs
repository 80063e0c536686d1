//! Named experiment variants and what each one changes.
//!
//! | name            | teachers                  | distillation                 |
//! |-----------------|---------------------------|------------------------------|
//! | `full`          | co-finetuned, all         | as configured                |
//! | `no-cofinetune` | finetuned separately, all | as configured                |
//! | `uniform`       | co-finetuned, all         | uniform weighting            |
//! | `ensemble`      | co-finetuned, all         | ensemble-average soft labels |
//! | `no-hidden`     | co-finetuned, all         | hidden loss off              |
//! | `no-distill`    | co-finetuned, all         | distillation loss off        |
//! | `no-task`       | co-finetuned, all         | task loss off                |
//! | `single:i`      | co-finetuned, teacher `i` | plain single-teacher         |
//! | `combo:i+j+..`  | co-finetuned, the subset  | as configured                |
//! | `noisy`         | one teacher on noisy labels | as configured              |
//! | `noisy-uniform` | one teacher on noisy labels | uniform weighting          |

use std::fmt;

use mtkd_core::distill::{DistillSpec, Weighting};

use crate::{Error, Result};

/// How the teacher set is finetuned before distillation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Setup {
    /// Co-finetuned with a shared pooler and head.
    Shared,
    /// Each teacher finetuned with its own pooler and head.
    Separate,
    /// Co-finetuned, with the configured noisy teacher trained on corrupted labels.
    Noisy,
}

impl Setup {
    pub const ALL: [Setup; 3] = [Setup::Shared, Setup::Separate, Setup::Noisy];

    pub fn name(self) -> &'static str {
        match self {
            Setup::Shared => "shared",
            Setup::Separate => "separate",
            Setup::Noisy => "noisy",
        }
    }

    pub fn is_shared(self) -> bool {
        self != Setup::Separate
    }
}

impl fmt::Display for Setup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub setup: Setup,
    /// Teachers the student learns from, in order.
    pub teachers: Vec<usize>,
    pub weighting: Option<Weighting>,
    pub hidden_loss: bool,
    pub distill_loss: bool,
    pub task_loss: bool,
}

impl Variant {
    fn base(name: &str, n: usize) -> Self {
        Self {
            name: name.to_string(),
            setup: Setup::Shared,
            teachers: (0..n).collect(),
            weighting: None,
            hidden_loss: true,
            distill_loss: true,
            task_loss: true,
        }
    }

    pub fn parse(name: &str, n_teachers: usize) -> Result<Self> {
        let mut v = Self::base(name, n_teachers);
        match name {
            "full" => {}
            "no-cofinetune" => v.setup = Setup::Separate,
            "uniform" => v.weighting = Some(Weighting::Uniform),
            "ensemble" => v.weighting = Some(Weighting::EnsembleAverage),
            "no-hidden" => v.hidden_loss = false,
            "no-distill" => v.distill_loss = false,
            "no-task" => v.task_loss = false,
            "noisy" => v.setup = Setup::Noisy,
            "noisy-uniform" => {
                v.setup = Setup::Noisy;
                v.weighting = Some(Weighting::Uniform);
            }
            _ => {
                if let Some(i) = name.strip_prefix("single:") {
                    v.teachers = vec![teacher_index(i, n_teachers, name)?];
                    v.weighting = Some(Weighting::Single(0));
                } else if let Some(list) = name.strip_prefix("combo:") {
                    let mut picked = list
                        .split('+')
                        .map(|i| teacher_index(i, n_teachers, name))
                        .collect::<Result<Vec<_>>>()?;
                    let len = picked.len();
                    picked.sort_unstable();
                    picked.dedup();
                    if picked.len() != len {
                        return Err(Error::Config(format!("variant {name:?} repeats a teacher")));
                    }
                    v.teachers = picked;
                } else {
                    return Err(Error::Config(format!("unknown variant {name:?}")));
                }
            }
        }
        Ok(v)
    }

    /// The distillation settings this variant trains with.
    pub fn apply(&self, base: &DistillSpec) -> Result<DistillSpec> {
        let mut spec = base.clone();
        spec.teachers = self.teachers.len();
        if let Some(w) = self.weighting {
            spec.weighting = w;
        }
        spec.hidden_loss &= self.hidden_loss;
        spec.distill_loss &= self.distill_loss;
        spec.task_loss &= self.task_loss;
        spec.validate().map_err(|e| Error::Config(format!("variant {:?}: {e}", self.name)))?;
        Ok(spec)
    }
}

fn teacher_index(s: &str, n: usize, name: &str) -> Result<usize> {
    match s.parse::<usize>() {
        Ok(i) if i < n => Ok(i),
        _ => Err(Error::Config(format!("variant {name:?}: {s:?} is not a teacher index below {n}"))),
    }
}

/// Every non-empty teacher subset: singles, then pairs, and so on.
pub fn combinations(n: usize) -> Vec<String> {
    let mut subsets: Vec<Vec<usize>> = (1u32..1 << n)
        .map(|mask| (0..n).filter(|i| mask & (1 << i) != 0).collect())
        .collect();
    subsets.sort_by(|a: &Vec<usize>, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    subsets
        .into_iter()
        .map(|s| match s.as_slice() {
            [i] => format!("single:{i}"),
            _ => format!("combo:{}", s.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("+")),
        })
        .collect()
}
