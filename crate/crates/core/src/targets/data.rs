//! Tabular data ingestion for the logistic-regression posterior.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::Mat;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Mat,
    /// `-1.0` or `+1.0`.
    pub labels: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvOptions {
    /// Label column index; negative counts from the end (`-1` = last).
    pub label_column: i64,
    pub standardize: bool,
    pub split_seed: u64,
    pub test_fraction: f64,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self {
            label_column: -1,
            standardize: true,
            split_seed: 0,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct UciSplit {
    pub train: Dataset,
    pub test: Dataset,
    /// Source column index of every retained feature.
    pub feature_columns: Vec<usize>,
    /// Tokens mapped to `-1` and `+1`.
    pub label_tokens: [String; 2],
    pub had_header: bool,
    pub warnings: Vec<String>,
}

pub fn load_uci_csv(path: impl AsRef<Path>, opts: &CsvOptions) -> Result<UciSplit> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_uci_csv(&text, opts)
}

pub fn parse_uci_csv(text: &str, opts: &CsvOptions) -> Result<UciSplit> {
    if !(opts.test_fraction > 0.0 && opts.test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test_fraction must lie in (0, 1), got {}",
            opts.test_fraction
        )));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let records: Vec<csv::StringRecord> = reader
        .records()
        .filter(|r| !matches!(r, Ok(rec) if rec.iter().all(str::is_empty)))
        .collect::<std::result::Result<_, _>>()?;
    let first = records
        .first()
        .ok_or_else(|| Error::Dataset("empty file".into()))?;
    let ncols = first.len();
    if ncols < 2 {
        return Err(Error::Dataset("need at least one feature and a label".into()));
    }
    let label_col = resolve_column(opts.label_column, ncols)?;
    let feature_cols: Vec<usize> = (0..ncols).filter(|c| *c != label_col).collect();

    let had_header = feature_cols
        .iter()
        .any(|c| first[*c].parse::<f64>().is_err());
    let body = if had_header { &records[1..] } else { &records[..] };
    let line_offset = if had_header { 2 } else { 1 };

    let mut rows = Vec::with_capacity(body.len());
    let mut tokens = Vec::with_capacity(body.len());
    for (i, rec) in body.iter().enumerate() {
        let mut row = Vec::with_capacity(feature_cols.len());
        for &c in &feature_cols {
            let v = rec[c].parse::<f64>().ok().filter(|v| v.is_finite());
            row.push(v.ok_or_else(|| Error::Data {
                row: i + line_offset,
                column: c,
                message: format!("cannot parse {:?} as a finite number", &rec[c]),
            })?);
        }
        rows.push(row);
        tokens.push(rec[label_col].to_string());
    }

    let label_tokens = label_mapping(&tokens)?;
    let labels: Vec<f64> = tokens
        .iter()
        .map(|t| if *t == label_tokens[0] { -1.0 } else { 1.0 })
        .collect();

    let n = rows.len();
    let n_test = ((opts.test_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.split_seed));
    let (test_idx, train_idx) = order.split_at(n_test);

    let train_labels: Vec<f64> = train_idx.iter().map(|&i| labels[i]).collect();
    if train_labels.iter().all(|y| *y == train_labels[0]) {
        return Err(Error::Dataset(
            "training split contains a single class".into(),
        ));
    }

    let mut warnings = Vec::new();
    let mut kept: Vec<usize> = (0..feature_cols.len()).collect();
    let mut shift = vec![0.0; feature_cols.len()];
    let mut scale = vec![1.0; feature_cols.len()];
    if opts.standardize {
        kept.clear();
        for j in 0..feature_cols.len() {
            let m = train_idx.iter().map(|&i| rows[i][j]).sum::<f64>() / train_idx.len() as f64;
            let var = train_idx
                .iter()
                .map(|&i| (rows[i][j] - m).powi(2))
                .sum::<f64>()
                / train_idx.len() as f64;
            if var.sqrt() <= 1e-12 * (1.0 + m.abs()) {
                let msg = format!(
                    "feature column {} is constant on the training split; dropped",
                    feature_cols[j]
                );
                log::warn!("{msg}");
                warnings.push(msg);
                continue;
            }
            shift[j] = m;
            scale[j] = var.sqrt();
            kept.push(j);
        }
        if kept.is_empty() {
            return Err(Error::Dataset("every feature column is constant".into()));
        }
    }

    let build = |idx: &[usize]| Dataset {
        features: Mat::from_fn(idx.len(), kept.len(), |r, c| {
            let j = kept[c];
            (rows[idx[r]][j] - shift[j]) / scale[j]
        }),
        labels: idx.iter().map(|&i| labels[i]).collect(),
    };

    Ok(UciSplit {
        train: build(train_idx),
        test: build(test_idx),
        feature_columns: kept.iter().map(|&j| feature_cols[j]).collect(),
        label_tokens,
        had_header,
        warnings,
    })
}

fn resolve_column(index: i64, ncols: usize) -> Result<usize> {
    let resolved = if index < 0 {
        ncols as i64 + index
    } else {
        index
    };
    if resolved < 0 || resolved >= ncols as i64 {
        return Err(Error::InvalidArgument(format!(
            "label column {index} out of range for {ncols} columns"
        )));
    }
    Ok(resolved as usize)
}

/// Two distinct tokens, sorted (numerically when both parse) to `(-1, +1)`.
fn label_mapping(tokens: &[String]) -> Result<[String; 2]> {
    let mut distinct: Vec<&String> = tokens.iter().collect();
    distinct.sort();
    distinct.dedup();
    match distinct.as_slice() {
        [a, b] => {
            let (a, b) = match (a.parse::<f64>(), b.parse::<f64>()) {
                (Ok(x), Ok(y)) if y < x => (b, a),
                _ => (a, b),
            };
            Ok([a.to_string(), b.to_string()])
        }
        [] | [_] => Err(Error::Dataset(
            "labels contain fewer than 2 classes".into(),
        )),
        more => Err(Error::Dataset(format!(
            "labels must be binary, found {} classes",
            more.len()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FOUR: &str = "a,b,label\n1.0,2.0,0\n2.0,1.0,1\n3.0,5.0,0\n4.0,3.0,1\n";

    fn opts(seed: u64, frac: f64) -> CsvOptions {
        CsvOptions {
            label_column: -1,
            standardize: true,
            split_seed: seed,
            test_fraction: frac,
        }
    }

    #[test]
    fn four_rows_split_three_one_deterministically() {
        let a = parse_uci_csv(FOUR, &opts(7, 0.25)).unwrap();
        let b = parse_uci_csv(FOUR, &opts(7, 0.25)).unwrap();
        assert_eq!(a.train.len(), 3);
        assert_eq!(a.test.len(), 1);
        assert!(a.had_header);
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
    }

    #[test]
    fn zero_one_labels_map_to_signs() {
        let s = parse_uci_csv(FOUR, &opts(1, 0.25)).unwrap();
        assert_eq!(s.label_tokens, ["0".to_string(), "1".to_string()]);
        let all: Vec<f64> = s.train.labels.iter().chain(&s.test.labels).copied().collect();
        assert_eq!(all.iter().filter(|y| **y == -1.0).count(), 2);
        assert_eq!(all.iter().filter(|y| **y == 1.0).count(), 2);
    }

    #[test]
    fn train_columns_are_standardized() {
        let text = "1,10,a\n2,14,b\n3,9,a\n4,20,b\n5,3,a\n6,7,b\n7,1,a\n8,2,b\n";
        let s = parse_uci_csv(text, &opts(3, 0.25)).unwrap();
        assert!(!s.had_header);
        for j in 0..2 {
            let col = s.train.features.column(j);
            let m = col.mean();
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / col.len() as f64;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_column_dropped_with_warning() {
        let text = "x,c,y\n1,5,0\n2,5,1\n3,5,0\n4,5,1\n5,5,1\n";
        let s = parse_uci_csv(text, &opts(0, 0.2)).unwrap();
        assert_eq!(s.feature_columns, vec![0]);
        assert_eq!(s.train.features.ncols(), 1);
        assert_eq!(s.warnings.len(), 1);
        assert!(s.warnings[0].contains("column 1"));
    }

    #[test]
    fn unparseable_cell_reports_position() {
        let text = "1,2,0\n3,oops,1\n5,6,0\n";
        match parse_uci_csv(text, &opts(0, 0.3)) {
            Err(Error::Data { row, column, .. }) => {
                assert_eq!((row, column), (2, 1));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn single_class_is_rejected() {
        let text = "1,0\n2,0\n3,0\n";
        assert!(matches!(
            parse_uci_csv(text, &opts(0, 0.3)),
            Err(Error::Dataset(_))
        ));
    }

    #[test]
    fn test_fraction_bounds() {
        assert!(parse_uci_csv(FOUR, &opts(0, 0.0)).is_err());
        assert!(parse_uci_csv(FOUR, &opts(0, 1.0)).is_err());
    }

    #[test]
    fn label_column_from_front() {
        let text = "pos,1,2\nneg,3,4\npos,5,7\nneg,6,1\n";
        let o = CsvOptions {
            label_column: 0,
            ..opts(2, 0.25)
        };
        let s = parse_uci_csv(text, &o).unwrap();
        assert_eq!(s.label_tokens, ["neg".to_string(), "pos".to_string()]);
        assert_eq!(s.feature_columns, vec![1, 2]);
    }

    #[test]
    fn missing_file_is_io_error() {
        let e = load_uci_csv("/nonexistent/x.csv", &CsvOptions::default()).unwrap_err();
        assert!(matches!(e, Error::Io { .. }));
    }
}
