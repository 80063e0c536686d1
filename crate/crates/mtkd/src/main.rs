use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mtkd::checkpoint::{self, Named};
use mtkd::config::RunConfig;
use mtkd::pipeline::{self, RunContext};
use mtkd::variant::{Setup, Variant};
use mtkd::{data, report, Error, Result};
use mtkd_core::distill::{TeacherBundle, TeacherCache, TeacherHeads};
use mtkd_core::encoder::{Classifier, EncoderParams, PoolHead};
use mtkd_core::gradcheck;
use mtkd_core::{Parameters, Rng};

#[derive(Parser)]
#[command(name = "mtkd", version, about = "Multi-teacher co-finetuning and distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, replacing the configured one.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, replacing the configured one.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Experiment variant, e.g. full, no-cofinetune, single:0, combo:0+2.
    #[arg(long, global = true)]
    variant: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train/dev/test splits and their manifest.
    GenData,
    /// Warm up each teacher alone with a private head, on its own corpus.
    TrainTeachers,
    /// Finetune the warmed-up teachers; `--variant no-cofinetune` uses separate heads.
    Cofinetune,
    /// Distill a student from the finetuned teachers.
    Distill,
    /// Evaluate a distilled student on dev and test.
    Eval,
    /// Run every configured variant for every repeat and write the reports.
    Ablate,
    /// Compare analytic and finite-difference gradients.
    Gradcheck,
    /// Rebuild the markdown summary from `report.csv`.
    Report,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::from_toml("")?,
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(o) = &cli.out {
        config.out_dir = o.clone();
    }
    Ok(config)
}

fn variant(cli: &Cli, config: &RunConfig) -> Result<Variant> {
    let v = Variant::parse(cli.variant.as_deref().unwrap_or("full"), config.distill.teachers)?;
    v.apply(&config.distill)?;
    Ok(v)
}

fn file_name(name: &str) -> String {
    name.replace([':', '+', '@'], "_")
}

fn run_dir(config: &RunConfig) -> Result<PathBuf> {
    let dir = config.out_dir.join(format!("s{}", config.seed));
    std::fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
    Ok(dir)
}

fn pretrain_path(dir: &Path, i: usize, noisy: bool) -> PathBuf {
    dir.join(format!("pretrain-{i}{}.ckpt", if noisy { "-noisy" } else { "" }))
}

fn teachers_path(dir: &Path, setup: Setup) -> PathBuf {
    dir.join(format!("teachers-{setup}.ckpt"))
}

fn student_path(dir: &Path, variant: &Variant) -> PathBuf {
    dir.join(format!("student-{}.ckpt", file_name(&variant.name)))
}

/// Randomly initialized models with the configured shapes, to restore into.
fn skeleton_classifier(config: &RunConfig, layers: usize) -> Result<Classifier<f32>> {
    let mut rng = Rng::seed(0);
    let encoder = EncoderParams::init(
        mtkd_core::encoder::EncoderConfig {
            num_layers: layers,
            ..config.teacher.clone()
        },
        &mut rng,
    )?;
    let h = &config.head;
    let head = PoolHead::init(config.teacher.hidden_dim, h.query_dim, config.task.classes(), h.pooling, h.init_std, &mut rng)?;
    Ok(Classifier { encoder, head })
}

fn skeleton_bundle(config: &RunConfig, setup: Setup) -> Result<TeacherBundle<f32>> {
    let n = config.distill.teachers;
    let parts = (0..n)
        .map(|_| skeleton_classifier(config, config.teacher.num_layers))
        .collect::<Result<Vec<_>>>()?;
    let heads = if setup.is_shared() {
        TeacherHeads::Shared(parts[0].head.clone())
    } else {
        TeacherHeads::Private(parts.iter().map(|c| c.head.clone()).collect())
    };
    Ok(TeacherBundle {
        teachers: parts.into_iter().map(|c| c.encoder).collect(),
        heads,
    })
}

fn restore_into<P: Parameters<f32>>(mut model: P, path: &Path) -> Result<P> {
    let tensors: Named = checkpoint::load(path)?;
    checkpoint::restore(&mut model, "", &tensors)?;
    Ok(model)
}

fn print_metrics(label: &str, m: &mtkd_core::tasks::MetricsReport) {
    println!("{label}: accuracy {:.4}, macro-F1 {:.4}", m.accuracy, m.macro_f1);
}

fn run(cli: &Cli) -> Result<ExitCode> {
    if let Command::Gradcheck = cli.command {
        return gradcheck_cmd(cli);
    }
    let config = load_config(cli)?;
    match cli.command {
        Command::GenData => {
            let task = pipeline::task_for(&config, config.seed);
            let splits = pipeline::generate(&config, config.seed)?;
            let dir = config.out_dir.join(format!("data-s{}", config.seed));
            data::write_splits(&dir, &task, &splits)?;
            println!("wrote {} ({:016x})", dir.display(), pipeline::splits_hash(&splits));
        }
        Command::TrainTeachers => {
            let setup = variant(cli, &config)?.setup;
            let splits = pipeline::generate(&config, config.seed)?;
            let ctx = RunContext::new(&config, config.seed, &splits);
            let dir = run_dir(&config)?;
            for (i, view) in pipeline::views(&config, config.seed, &splits.train, setup).iter().enumerate() {
                let mut model = ctx.pretrain(i, view.labels.is_some())?;
                let path = pretrain_path(&dir, i, view.labels.is_some());
                checkpoint::save(&path, &checkpoint::snapshot(&mut model, ""))?;
                let dev = pipeline::evaluate(&mut model, &splits.dev, &config)?;
                print_metrics(&format!("teacher {i} dev"), &dev);
            }
        }
        Command::Cofinetune => {
            let setup = variant(cli, &config)?.setup;
            let splits = pipeline::generate(&config, config.seed)?;
            let ctx = RunContext::new(&config, config.seed, &splits);
            let dir = run_dir(&config)?;
            let views = pipeline::views(&config, config.seed, &splits.train, setup);
            let warm = views
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let skeleton = skeleton_classifier(&config, config.teacher.num_layers)?;
                    restore_into(skeleton, &pretrain_path(&dir, i, v.labels.is_some()))
                })
                .collect::<Result<Vec<_>>>()?;
            let (mut bundle, records) = ctx.teachers(setup, &warm)?;
            checkpoint::save(&teachers_path(&dir, setup), &checkpoint::snapshot(&mut bundle, ""))?;
            for s in report::emit(&dir, &format!("teachers-{setup}"), &records, config.record_wall_clock)? {
                println!("{} dev-selected test accuracy {:.4}", s.variant, s.accuracy.0);
            }
        }
        Command::Distill => {
            let v = variant(cli, &config)?;
            let splits = pipeline::generate(&config, config.seed)?;
            let ctx = RunContext::new(&config, config.seed, &splits);
            let dir = run_dir(&config)?;
            let bundle = restore_into(skeleton_bundle(&config, v.setup)?, &teachers_path(&dir, v.setup))?;
            let cache = TeacherCache::build(&bundle, &splits.train, &config.distill, config.eval_batch_size, config.task.max_seq_len)?;
            let (mut student, record) = ctx.distill(&v, &bundle, &cache)?;
            checkpoint::save(&student_path(&dir, &v), &checkpoint::snapshot(&mut student.model, ""))?;
            report::emit(&dir, &format!("student-{}", file_name(&v.name)), &[record.clone()], config.record_wall_clock)?;
            if let Some(best) = record.best() {
                println!("best dev epoch {}", best.epoch);
                print_metrics("dev", &best.dev);
                print_metrics("test", &best.test);
            }
        }
        Command::Eval => {
            let v = variant(cli, &config)?;
            let splits = pipeline::generate(&config, config.seed)?;
            let dir = run_dir(&config)?;
            let mut model = restore_into(skeleton_classifier(&config, config.student.num_layers)?, &student_path(&dir, &v))?;
            print_metrics("dev", &pipeline::evaluate(&mut model, &splits.dev, &config)?);
            let test = pipeline::evaluate(&mut model, &splits.test, &config)?;
            print_metrics("test", &test);
            for (c, s) in test.per_class.iter().enumerate() {
                println!("  class {c}: precision {:.4} recall {:.4} F1 {:.4} support {}", s.precision, s.recall, s.f1, s.support);
            }
        }
        Command::Ablate => {
            let variants = match &cli.variant {
                Some(v) => vec![v.clone()],
                None => config.variants.clone(),
            };
            let out = pipeline::run_ablations(&config, &variants, |seed| {
                for r in seed.teachers.iter().chain(&seed.students) {
                    match (r.best(), &r.failed) {
                        (_, Some(phase)) => eprintln!("{} failed during {phase}", r.run_id),
                        (Some(b), None) => eprintln!(
                            "{}: epoch {} dev {:.4} test {:.4} ({:.1}s)",
                            r.run_id, b.epoch, b.dev.accuracy, b.test.accuracy, r.wall_clock_s
                        ),
                        (None, None) => {}
                    }
                }
            })?;
            let dir = &config.out_dir;
            report::emit(dir, "teachers", &out.teachers, config.record_wall_clock)?;
            report::emit(dir, "report", &out.students, config.record_wall_clock)?;
            let md = std::fs::read_to_string(dir.join("report.md")).map_err(Error::io(dir.join("report.md")))?;
            print!("{md}");
            if out.students.iter().any(|r| r.failed.is_some()) {
                return Ok(ExitCode::from(3));
            }
        }
        Command::Report => {
            let dir = &config.out_dir;
            let rows = report::read_csv(&dir.join("report.csv"))?;
            let md = report::markdown(&report::summarize(&report::select(&rows)), &[]);
            let path = dir.join("report.md");
            std::fs::write(&path, &md).map_err(Error::io(&path))?;
            print!("{md}");
        }
        Command::Gradcheck => unreachable!("handled above"),
    }
    Ok(ExitCode::SUCCESS)
}

fn gradcheck_cmd(cli: &Cli) -> Result<ExitCode> {
    const TOLERANCE: f64 = 1e-5;
    let seed = cli.seed.unwrap_or(0);
    let mut checks = gradcheck::op_checks(seed)?;
    checks.extend(gradcheck::objective_checks(seed)?);
    let mut ok = true;
    for c in &checks {
        let pass = c.max_rel_err <= TOLERANCE;
        ok &= pass;
        println!("{} {:<28} {:>6} entries  max rel err {:.3e}", if pass { "ok  " } else { "FAIL" }, c.name, c.entries, c.max_rel_err);
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
