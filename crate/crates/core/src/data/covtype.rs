use std::path::Path;

use super::{read_maybe_gz, Dataset, Source, Split};
use crate::error::{invalid, Error, Result};

/// Size of the advertised training block at the start of the file.
pub const COVTYPE_TRAIN: usize = 11_340;
/// Size of the validation block that follows it.
pub const COVTYPE_VALID: usize = 3_780;

const N_FEATURES: usize = 54;
/// Leading columns that are real-valued; the rest are 0/1 indicators.
const N_CONTINUOUS: usize = 10;

/// Raw records in file order.
#[derive(Debug, Clone)]
pub struct CovTypeRecords {
    pub features: Vec<f64>,
    /// Original cover type, 1..=7.
    pub labels: Vec<u8>,
}

impl CovTypeRecords {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn covtype_error(reason: String) -> Error {
    Error::Format {
        what: "CoverType file",
        reason,
    }
}

/// Parses comma-separated 55-column records.
pub fn parse_covtype(bytes: &[u8]) -> Result<CovTypeRecords> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(bytes);
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| covtype_error(format!("line {}: {e}", line + 1)))?;
        if record.len() != N_FEATURES + 1 {
            return Err(covtype_error(format!(
                "line {}: {} columns, expected {}",
                line + 1,
                record.len(),
                N_FEATURES + 1
            )));
        }
        for field in record.iter().take(N_FEATURES) {
            let x: f64 = field
                .trim()
                .parse()
                .map_err(|_| covtype_error(format!("line {}: bad value `{field}`", line + 1)))?;
            features.push(x);
        }
        let label = &record[N_FEATURES];
        let y: u8 = label
            .trim()
            .parse()
            .ok()
            .filter(|y| (1..=7).contains(y))
            .ok_or_else(|| covtype_error(format!("line {}: unknown label `{label}`", line + 1)))?;
        labels.push(y);
    }
    Ok(CovTypeRecords { features, labels })
}

/// Applies the order-based split (first 11,340 train, next 3,780
/// validation, rest test), keeps classes `a` and `b` (smaller class becomes
/// label 0) and standardises the continuous columns with statistics of the
/// filtered training rows. Indicator columns stay 0/1.
pub fn split_covtype(records: &CovTypeRecords, a: u8, b: u8) -> Result<Split> {
    if a == b {
        return Err(invalid("class pair must name two different classes"));
    }
    let n = records.len();
    if n < COVTYPE_TRAIN + COVTYPE_VALID {
        return Err(covtype_error(format!(
            "{n} records; the advertised split needs at least {}",
            COVTYPE_TRAIN + COVTYPE_VALID
        )));
    }
    let (lo, hi) = (a.min(b), a.max(b));
    let pick = |range: std::ops::Range<usize>| -> Result<Dataset> {
        let idx: Vec<usize> = range
            .filter(|&i| records.labels[i] == lo || records.labels[i] == hi)
            .collect();
        let features = idx
            .iter()
            .flat_map(|&i| records.features[i * N_FEATURES..(i + 1) * N_FEATURES].iter().copied())
            .collect();
        let labels = idx.iter().map(|&i| usize::from(records.labels[i] == hi)).collect();
        Dataset::new(
            format!("covtype-{lo}v{hi}"),
            N_FEATURES,
            2,
            Source::CovType,
            features,
            labels,
            idx,
        )
    };
    let mut split = Split {
        train: pick(0..COVTYPE_TRAIN)?,
        valid: pick(COVTYPE_TRAIN..COVTYPE_TRAIN + COVTYPE_VALID)?,
        test: pick(COVTYPE_TRAIN + COVTYPE_VALID..n)?,
    };
    standardize(&mut split);
    Ok(split)
}

fn standardize(split: &mut Split) {
    let train = &split.train;
    let m = train.len() as f64;
    if train.is_empty() {
        return;
    }
    let mut mean = [0.0; N_CONTINUOUS];
    let mut std = [0.0; N_CONTINUOUS];
    for c in 0..N_CONTINUOUS {
        mean[c] = (0..train.len()).map(|i| train.row(i)[c]).sum::<f64>() / m;
        let var = (0..train.len())
            .map(|i| (train.row(i)[c] - mean[c]).powi(2))
            .sum::<f64>()
            / m;
        std[c] = var.sqrt();
    }
    for part in [&mut split.train, &mut split.valid, &mut split.test] {
        for row in part.features_mut().chunks_exact_mut(N_FEATURES) {
            for c in 0..N_CONTINUOUS {
                // Constant columns are left as they are.
                if std[c] > 0.0 {
                    row[c] = (row[c] - mean[c]) / std[c];
                }
            }
        }
    }
}

pub fn load_covtype(path: &Path, a: u8, b: u8) -> Result<Split> {
    split_covtype(&parse_covtype(&read_maybe_gz(path)?)?, a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn synthetic_file(n: usize) -> String {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut out = String::new();
        for i in 0..n {
            let mut fields: Vec<String> = (0..N_CONTINUOUS)
                .map(|c| format!("{}", rng.gen_range(0..3000) + c * 10))
                .collect();
            // Column 9 is constant to exercise the no-scaling rule.
            fields[9] = "42".into();
            fields.extend((0..44).map(|k| if k == i % 44 { "1".into() } else { "0".into() }));
            fields.push(format!("{}", 1 + i % 7));
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    #[test]
    fn split_sizes_filtering_and_scaling() {
        let n = COVTYPE_TRAIN + COVTYPE_VALID + 700;
        let records = parse_covtype(synthetic_file(n).as_bytes()).unwrap();
        assert_eq!(records.len(), n);
        let split = split_covtype(&records, 4, 3).unwrap();
        split.check_disjoint().unwrap();
        for part in [&split.train, &split.valid, &split.test] {
            for (i, &o) in part.origin().iter().enumerate() {
                let y = records.labels[o];
                assert!(y == 3 || y == 4);
                assert_eq!(part.label(i), usize::from(y == 4));
            }
        }
        assert!(split.train.origin().iter().all(|&o| o < COVTYPE_TRAIN));
        assert!(split
            .valid
            .origin()
            .iter()
            .all(|&o| (COVTYPE_TRAIN..COVTYPE_TRAIN + COVTYPE_VALID).contains(&o)));
        assert!(split.test.origin().iter().all(|&o| o >= COVTYPE_TRAIN + COVTYPE_VALID));

        let t = &split.train;
        let m = t.len() as f64;
        for c in 0..9 {
            let mean = (0..t.len()).map(|i| t.row(i)[c]).sum::<f64>() / m;
            let var = (0..t.len()).map(|i| (t.row(i)[c] - mean).powi(2)).sum::<f64>() / m;
            assert!(mean.abs() <= 1e-9, "column {c} mean {mean}");
            assert!((var.sqrt() - 1.0).abs() <= 1e-9, "column {c} std {}", var.sqrt());
        }
        assert!((0..t.len()).all(|i| t.row(i)[9] == 42.0));
        assert!((0..t.len()).all(|i| t.row(i)[10..].iter().all(|&x| x == 0.0 || x == 1.0)));
    }

    #[test]
    fn malformed_rows_rejected() {
        assert!(parse_covtype(b"1,2,3\n").is_err());
        let mut row: Vec<String> = (0..54).map(|_| "0".to_string()).collect();
        row.push("8".into());
        assert!(parse_covtype(row.join(",").as_bytes()).is_err());
        row[54] = "2".into();
        row[3] = "abc".into();
        assert!(parse_covtype(row.join(",").as_bytes()).is_err());
        row[3] = "1".into();
        let records = parse_covtype(row.join(",").as_bytes()).unwrap();
        assert!(split_covtype(&records, 1, 2).is_err());
    }
}
