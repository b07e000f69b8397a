use std::path::Path;

use super::{find_file, read_maybe_gz, Dataset, Source, Split};
use crate::error::{invalid, Error, Result};

const IMAGE_MAGIC: u32 = 2051;
const LABEL_MAGIC: u32 = 2049;

/// Official training rows kept for training; the rest are validation.
pub const MNIST_TRAIN_ROWS: usize = 50_000;

fn idx_error(reason: String) -> Error {
    Error::Format {
        what: "IDX file",
        reason,
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| idx_error(format!("header truncated at byte {}", bytes.len())))
}

/// Parses an IDX3 image file into `(count, rows * cols, pixels / 255)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(idx_error(format!("image magic {magic}, expected {IMAGE_MAGIC}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let dim = rows * cols;
    let payload = &bytes[16..];
    let expected = n
        .checked_mul(dim)
        .ok_or_else(|| idx_error("declared size overflows".into()))?;
    if payload.len() != expected {
        return Err(idx_error(format!(
            "image payload has {} bytes, header declares {n} x {rows} x {cols}",
            payload.len()
        )));
    }
    Ok((n, dim, payload.iter().map(|&p| f64::from(p) / 255.0).collect()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABEL_MAGIC {
        return Err(idx_error(format!("label magic {magic}, expected {LABEL_MAGIC}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(idx_error(format!(
            "label payload has {} bytes, header declares {n}",
            payload.len()
        )));
    }
    Ok(payload.iter().map(|&y| usize::from(y)).collect())
}

/// Loads an image/label file pair (plain or `.gz`).
pub fn load_mnist(image_path: &Path, label_path: &Path, source: Source) -> Result<Dataset> {
    let (n, dim, features) = parse_idx_images(&read_maybe_gz(image_path)?)?;
    let labels = parse_idx_labels(&read_maybe_gz(label_path)?)?;
    if labels.len() != n {
        return Err(idx_error(format!("{n} images but {} labels", labels.len())));
    }
    if let Some(y) = labels.iter().find(|&&y| y > 9) {
        return Err(idx_error(format!("label {y} is not a digit")));
    }
    Dataset::new("mnist", dim, 10, source, features, labels, (0..n).collect())
}

/// Loads the official training and test sets from the standard file names.
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_mnist(
        &find_file(dir, "train-images-idx3-ubyte")?,
        &find_file(dir, "train-labels-idx1-ubyte")?,
        Source::MnistTrain,
    )?;
    let test = load_mnist(
        &find_file(dir, "t10k-images-idx3-ubyte")?,
        &find_file(dir, "t10k-labels-idx1-ubyte")?,
        Source::MnistTest,
    )?;
    Ok((train, test))
}

/// Digit pair `a` vs `b`: training rows from the first 50,000 official
/// training images, validation rows from the remainder, test rows from the
/// official test set. The smaller digit becomes label 0.
pub fn mnist_binary_subtask(train: &Dataset, test: &Dataset, a: u8, b: u8) -> Result<Split> {
    if a == b {
        return Err(invalid("digit pair must be two different digits"));
    }
    let (lo, hi) = (usize::from(a.min(b)), usize::from(a.max(b)));
    let pick = |data: &Dataset, range: std::ops::Range<usize>| -> Result<Dataset> {
        let idx: Vec<usize> = range
            .filter(|&i| data.label(i) == lo || data.label(i) == hi)
            .collect();
        let sub = data.select(&idx);
        let labels = sub.labels().iter().map(|&y| usize::from(y == hi)).collect();
        let features = (0..sub.len()).flat_map(|i| sub.row(i).to_vec()).collect();
        Dataset::new(
            format!("mnist-{lo}v{hi}"),
            sub.dim,
            2,
            sub.source,
            features,
            labels,
            sub.origin().to_vec(),
        )
    };
    let cut = MNIST_TRAIN_ROWS.min(train.len());
    Ok(Split {
        train: pick(train, 0..cut)?,
        valid: pick(train, cut..train.len())?,
        test: pick(test, 0..test.len())?,
    })
}

/// Ten-class MNIST with the same 50,000 / 10,000 / official-test split.
pub fn mnist_full(train: &Dataset, test: &Dataset) -> Result<Split> {
    let cut = MNIST_TRAIN_ROWS.min(train.len());
    let mut tr = train.select(&(0..cut).collect::<Vec<_>>());
    let mut va = train.select(&(cut..train.len()).collect::<Vec<_>>());
    let mut te = test.clone();
    tr.name = "mnist".into();
    va.name = "mnist".into();
    te.name = "mnist".into();
    Ok(Split {
        train: tr,
        valid: va,
        test: te,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(images: &[[u8; 4]]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        out.extend_from_slice(&(images.len() as u32).to_be_bytes());
        out.extend_from_slice(&2u32.to_be_bytes());
        out.extend_from_slice(&2u32.to_be_bytes());
        for img in images {
            out.extend_from_slice(img);
        }
        out
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        out.extend_from_slice(labels);
        out
    }

    #[test]
    fn parses_images_and_labels() {
        let bytes = idx_images(&[[0, 255, 51, 102], [1, 2, 3, 4]]);
        let (n, dim, px) = parse_idx_images(&bytes).unwrap();
        assert_eq!((n, dim), (2, 4));
        assert_eq!(&px[..4], &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(parse_idx_labels(&idx_labels(&[7, 0, 9])).unwrap(), vec![7, 0, 9]);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut bytes = idx_images(&[[0; 4], [1; 4]]);
        assert!(parse_idx_images(&bytes[..bytes.len() - 1]).is_err());
        assert!(parse_idx_images(&bytes[..10]).is_err());
        bytes[3] = 0x02;
        assert!(parse_idx_images(&bytes).is_err());
        assert!(parse_idx_labels(&idx_images(&[[0; 4]])).is_err());
        let labels = idx_labels(&[1, 2, 3]);
        assert!(parse_idx_labels(&labels[..labels.len() - 1]).is_err());
    }

    #[test]
    fn loads_files_and_detects_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        std::fs::write(&img, idx_images(&[[0; 4], [9; 4]])).unwrap();
        std::fs::write(&lab, idx_labels(&[7, 1])).unwrap();
        let d = load_mnist(&img, &lab, Source::MnistTrain).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.label(0), 7);
        std::fs::write(&lab, idx_labels(&[7])).unwrap();
        assert!(load_mnist(&img, &lab, Source::MnistTrain).is_err());
    }

    fn fake_digits(n: usize, source: Source) -> Dataset {
        let labels: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % 10).collect();
        let features = (0..n).map(|i| (i % 255) as f64 / 255.0).collect();
        Dataset::new("mnist", 1, 10, source, features, labels, (0..n).collect()).unwrap()
    }

    #[test]
    fn binary_subtask_filters_and_remaps() {
        let train = fake_digits(60_000, Source::MnistTrain);
        let test = fake_digits(10_000, Source::MnistTest);
        let split = mnist_binary_subtask(&train, &test, 7, 1).unwrap();
        for part in [&split.train, &split.valid, &split.test] {
            for (i, &o) in part.origin().iter().enumerate() {
                let src = if part.source == Source::MnistTest { &test } else { &train };
                let y = src.label(o);
                assert!(y == 1 || y == 7);
                assert_eq!(part.label(i), usize::from(y == 7));
            }
        }
        assert!(split.train.origin().iter().all(|&o| o < 50_000));
        assert!(split.valid.origin().iter().all(|&o| o >= 50_000));
        let total = train.labels().iter().filter(|&&y| y == 1 || y == 7).count();
        assert_eq!(split.train.len() + split.valid.len(), total);
        split.check_disjoint().unwrap();
    }
}
