//! Dataset files: one example per line, space-separated token ids, a tab,
//! then the label. `manifest.toml` beside the splits records how they were
//! generated.

use std::fmt::Write as _;
use std::path::Path;

use mtkd_core::tasks::{Dataset, Example, Splits, TaskKind, TaskSpec};
use serde::{Deserialize, Serialize};

use crate::checkpoint::CRC;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub kind: TaskKind,
    pub classes: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub seed: u64,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub noise_rate: f64,
    pub imbalance: f64,
}

impl Manifest {
    pub fn of(spec: &TaskSpec) -> Self {
        Self {
            kind: spec.kind,
            classes: spec.classes(),
            train: spec.train,
            dev: spec.dev,
            test: spec.test,
            seed: spec.seed,
            vocab_size: spec.vocab_size,
            max_seq_len: spec.max_seq_len,
            noise_rate: spec.noise_rate,
            imbalance: spec.imbalance,
        }
    }
}

pub fn encode(dataset: &Dataset) -> String {
    let mut out = String::new();
    for e in &dataset.examples {
        for (i, t) in e.tokens.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            write!(out, "{t}").expect("write to string");
        }
        writeln!(out, "\t{}", e.label).expect("write to string");
    }
    out
}

/// CRC-64 of the file encoding, used to show variants saw the same data.
pub fn hash(dataset: &Dataset) -> u64 {
    CRC.checksum(encode(dataset).as_bytes())
}

pub fn decode(text: &str, kind: TaskKind, path: &Path) -> Result<Dataset> {
    let classes = kind.classes();
    let err = |line: usize, msg: &str| Error::Dataset {
        path: path.to_path_buf(),
        msg: format!("line {line}: {msg}"),
    };
    let mut examples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let (tokens, label) = line.split_once('\t').ok_or_else(|| err(n, "missing tab before the label"))?;
        let tokens = tokens
            .split(' ')
            .map(|t| t.parse::<u32>().map_err(|_| err(n, &format!("bad token id {t:?}"))))
            .collect::<Result<Vec<_>>>()?;
        let label: usize = label.trim().parse().map_err(|_| err(n, &format!("bad label {label:?}")))?;
        if label >= classes {
            return Err(err(n, &format!("label {label} is not below {classes}")));
        }
        examples.push(Example { tokens, label });
    }
    if examples.is_empty() {
        return Err(err(0, "no examples"));
    }
    Ok(Dataset { kind, classes, examples })
}

const SPLITS: [&str; 3] = ["train", "dev", "test"];

pub fn write_splits(dir: &Path, spec: &TaskSpec, splits: &Splits) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    for (name, d) in SPLITS.iter().zip([&splits.train, &splits.dev, &splits.test]) {
        let path = dir.join(format!("{name}.tsv"));
        std::fs::write(&path, encode(d)).map_err(Error::io(&path))?;
    }
    let path = dir.join("manifest.toml");
    let manifest = toml::to_string(&Manifest::of(spec)).expect("manifest serializes");
    std::fs::write(&path, manifest).map_err(Error::io(&path))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.toml");
    let text = std::fs::read_to_string(&path).map_err(Error::io(&path))?;
    toml::from_str(&text).map_err(|e| Error::Dataset { path, msg: e.to_string() })
}

pub fn read_splits(dir: &Path) -> Result<(Manifest, Splits)> {
    let manifest = read_manifest(dir)?;
    let mut parts = Vec::new();
    for name in SPLITS {
        let path = dir.join(format!("{name}.tsv"));
        let text = std::fs::read_to_string(&path).map_err(Error::io(&path))?;
        parts.push(decode(&text, manifest.kind, &path)?);
    }
    let test = parts.pop().expect("three splits");
    let dev = parts.pop().expect("three splits");
    let train = parts.pop().expect("three splits");
    Ok((manifest, Splits { train, dev, test }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use mtkd_core::tasks::gen_synthetic;

    #[test]
    fn line_format() {
        let d = Dataset {
            kind: TaskKind::Sent2,
            classes: 2,
            examples: vec![Example { tokens: vec![1, 4, 9], label: 1 }],
        };
        assert_eq!(encode(&d), "1 4 9\t1\n");
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = TaskSpec {
            kind: TaskKind::Nli2,
            train: 30,
            dev: 10,
            test: 10,
            seed: 4,
            ..TaskSpec::default()
        };
        let splits = gen_synthetic(&spec).unwrap();
        write_splits(dir.path(), &spec, &splits).unwrap();
        let (manifest, back) = read_splits(dir.path()).unwrap();
        assert_eq!(manifest, Manifest::of(&spec));
        assert_eq!(back, splits);
    }

    #[test]
    fn malformed_lines_are_located() {
        let p = Path::new("x.tsv");
        let e = decode("1 2\t0\n1 x\t1\n", TaskKind::Sent2, p).unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        assert!(decode("1 2\t5\n", TaskKind::Sent2, p).is_err());
        assert!(decode("1 2 0\n", TaskKind::Sent2, p).is_err());
    }
}
