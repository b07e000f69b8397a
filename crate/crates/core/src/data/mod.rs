//! Tasks: MNIST binary sub-tasks and full MNIST, CoverType class pairs, and
//! the synthetic diamond.

mod covtype;
mod mnist;
mod synthetic;

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;

use crate::error::{invalid, Error, Result};

pub use covtype::{load_covtype, parse_covtype, split_covtype, CovTypeRecords, COVTYPE_TRAIN, COVTYPE_VALID};
pub use mnist::{load_mnist, load_mnist_dir, mnist_binary_subtask, mnist_full, parse_idx_images, parse_idx_labels};
pub use synthetic::{diamond_label, synthetic_diamond, DiamondSpec};

/// Where an example's row index comes from. Indices are only comparable
/// within one source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Source {
    MnistTrain,
    MnistTest,
    CovType,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub dim: usize,
    pub n_classes: usize,
    pub source: Source,
    /// Set when rows were drawn with replacement.
    pub resampled: bool,
    features: Vec<f64>,
    labels: Vec<usize>,
    origin: Vec<usize>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        n_classes: usize,
        source: Source,
        features: Vec<f64>,
        labels: Vec<usize>,
        origin: Vec<usize>,
    ) -> Result<Self> {
        if dim == 0 || features.len() != labels.len() * dim || origin.len() != labels.len() {
            return Err(invalid(format!(
                "{} features, {} labels and {} origins for dimension {dim}",
                features.len(),
                labels.len(),
                origin.len()
            )));
        }
        if let Some(y) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(invalid(format!("label {y} outside 0..{n_classes}")));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("feature".into()));
        }
        Ok(Self {
            name: name.into(),
            dim,
            n_classes,
            source,
            resampled: false,
            features,
            labels,
            origin,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Row index of each example in its source.
    pub fn origin(&self) -> &[usize] {
        &self.origin
    }

    /// Rows `idx` (duplicates allowed), in that order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let mut features = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            features.extend_from_slice(self.row(i));
        }
        Self {
            name: self.name.clone(),
            dim: self.dim,
            n_classes: self.n_classes,
            source: self.source,
            resampled: self.resampled,
            features,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            origin: idx.iter().map(|&i| self.origin[i]).collect(),
        }
    }

    /// The first `n` rows.
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        self.select(&(0..n).collect::<Vec<_>>())
    }

    pub(crate) fn features_mut(&mut self) -> &mut [f64] {
        &mut self.features
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

impl Split {
    /// Checks that no source row appears in two partitions. Resampled
    /// partitions are exempt from the check against each other's copies,
    /// but still must not overlap the other partitions.
    pub fn check_disjoint(&self) -> Result<()> {
        let parts = [&self.train, &self.valid, &self.test];
        for (a, pa) in parts.iter().enumerate() {
            let seen: HashSet<(Source, usize)> = pa.origin.iter().map(|&o| (pa.source, o)).collect();
            for pb in &parts[a + 1..] {
                if let Some(o) = pb.origin.iter().find(|&&o| seen.contains(&(pb.source, o))) {
                    return Err(invalid(format!("row {o} of {:?} appears in two partitions", pb.source)));
                }
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.train.dim
    }

    pub fn n_classes(&self) -> usize {
        self.train.n_classes
    }
}

/// Draws `n` rows uniformly with replacement.
pub fn bootstrap_resample<R: Rng + ?Sized>(data: &Dataset, rng: &mut R) -> Result<Dataset> {
    let n = data.len();
    if n == 0 {
        return Err(invalid("cannot resample an empty dataset"));
    }
    let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
    let mut out = data.select(&idx);
    out.resampled = true;
    Ok(out)
}

/// The seven binary tasks plus full MNIST.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskSpec {
    MnistBinary { a: u8, b: u8 },
    MnistFull,
    CovTypeBinary { a: u8, b: u8 },
    SyntheticDiamond { seed: u64 },
}

/// Seed used for the synthetic task unless a task string overrides it.
pub const DEFAULT_DIAMOND_SEED: u64 = 0;

impl TaskSpec {
    pub fn mnist_binary(a: u8, b: u8) -> Result<Self> {
        if a == b || a > 9 || b > 9 {
            return Err(invalid(format!("invalid MNIST digit pair {a} vs {b}")));
        }
        Ok(TaskSpec::MnistBinary { a, b })
    }

    pub fn covtype_binary(a: u8, b: u8) -> Result<Self> {
        match (a.min(b), a.max(b)) {
            (1, 2) | (3, 4) => Ok(TaskSpec::CovTypeBinary { a, b }),
            _ => Err(invalid(format!("CoverType pair {a} vs {b} is not one of (1,2), (3,4)"))),
        }
    }

    /// The six real binary tasks and the synthetic one.
    pub fn binary_tasks() -> Vec<TaskSpec> {
        vec![
            TaskSpec::MnistBinary { a: 1, b: 7 },
            TaskSpec::MnistBinary { a: 1, b: 8 },
            TaskSpec::MnistBinary { a: 0, b: 8 },
            TaskSpec::MnistBinary { a: 2, b: 3 },
            TaskSpec::CovTypeBinary { a: 1, b: 2 },
            TaskSpec::CovTypeBinary { a: 3, b: 4 },
            TaskSpec::SyntheticDiamond {
                seed: DEFAULT_DIAMOND_SEED,
            },
        ]
    }

    pub fn needs_mnist(&self) -> bool {
        matches!(self, TaskSpec::MnistBinary { .. } | TaskSpec::MnistFull)
    }

    /// Loads the task. `data_dir` holds `mnist/` (IDX files, optionally
    /// gzipped) and `covtype/covtype.data[.gz]`.
    pub fn load(&self, data_dir: Option<&Path>) -> Result<Split> {
        let dir = || {
            data_dir.ok_or_else(|| invalid(format!("task `{self}` needs a data directory")))
        };
        match *self {
            TaskSpec::MnistBinary { a, b } => {
                let (train, test) = load_mnist_dir(&dir()?.join("mnist"))?;
                mnist_binary_subtask(&train, &test, a, b)
            }
            TaskSpec::MnistFull => {
                let (train, test) = load_mnist_dir(&dir()?.join("mnist"))?;
                mnist_full(&train, &test)
            }
            TaskSpec::CovTypeBinary { a, b } => {
                let path = find_file(&dir()?.join("covtype"), "covtype.data")?;
                load_covtype(&path, a, b)
            }
            TaskSpec::SyntheticDiamond { seed } => Ok(synthetic_diamond(&DiamondSpec::new(seed))),
        }
    }
}

/// `name` or `name.gz` inside `dir`.
pub(crate) fn find_file(dir: &Path, name: &str) -> Result<PathBuf> {
    let plain = dir.join(name);
    if plain.is_file() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{name}.gz"));
    if gz.is_file() {
        return Ok(gz);
    }
    Err(Error::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("neither {} nor {} exists", plain.display(), gz.display()),
    )))
}

/// Reads a file, transparently inflating `.gz`.
pub(crate) fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    use std::io::Read;
    let raw = std::fs::read(path)?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskSpec::MnistBinary { a, b } => write!(f, "mnist-{a}v{b}"),
            TaskSpec::MnistFull => write!(f, "mnist"),
            TaskSpec::CovTypeBinary { a, b } => write!(f, "covtype-{a}v{b}"),
            TaskSpec::SyntheticDiamond { seed } if *seed == DEFAULT_DIAMOND_SEED => {
                write!(f, "synthetic")
            }
            TaskSpec::SyntheticDiamond { seed } => write!(f, "synthetic-{seed}"),
        }
    }
}

impl FromStr for TaskSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let pair = |rest: &str| -> Result<(u8, u8)> {
            let (a, b) = rest
                .split_once('v')
                .ok_or_else(|| invalid(format!("expected `<a>v<b>` in task `{s}`")))?;
            let parse = |x: &str| x.parse::<u8>().map_err(|_| invalid(format!("bad class in task `{s}`")));
            Ok((parse(a)?, parse(b)?))
        };
        if s == "mnist" {
            Ok(TaskSpec::MnistFull)
        } else if s == "synthetic" {
            Ok(TaskSpec::SyntheticDiamond {
                seed: DEFAULT_DIAMOND_SEED,
            })
        } else if let Some(seed) = s.strip_prefix("synthetic-") {
            let seed = seed.parse().map_err(|_| invalid(format!("bad seed in task `{s}`")))?;
            Ok(TaskSpec::SyntheticDiamond { seed })
        } else if let Some(rest) = s.strip_prefix("mnist-") {
            let (a, b) = pair(rest)?;
            TaskSpec::mnist_binary(a, b)
        } else if let Some(rest) = s.strip_prefix("covtype-") {
            let (a, b) = pair(rest)?;
            TaskSpec::covtype_binary(a, b)
        } else {
            Err(invalid(format!("unknown task `{s}`")))
        }
    }
}
