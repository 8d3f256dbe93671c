//! Binned calibration metrics: ECE, RMS-CE, SCE, ACE and reliability tables.
//!
//! Equal-width bins are `[lo, hi)` except the last, which is `[lo, 1]`.
//! Equal-mass bins sort by score (ties by outcome, so results do not depend
//! on record order) and give the first `n mod m` bins one extra record.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::reduce::softmax;
use crate::tensor::CounterRng;

const PROB_SUM_TOLERANCE: f64 = 1e-6;

/// Evidence for one prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationRecord {
    pub probs: Option<Vec<f64>>,
    pub confidence: f64,
    pub predicted: Option<usize>,
    pub label: Option<usize>,
    pub correct: bool,
}

impl CalibrationRecord {
    /// Derives confidence, prediction (lowest index on ties) and correctness.
    pub fn from_probs(probs: Vec<f64>, label: usize) -> std::result::Result<Self, String> {
        if probs.is_empty() {
            return Err("`probs` is empty".into());
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(format!("probability {p} is outside [0, 1]"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
            return Err(format!("probabilities sum to {sum}, not 1"));
        }
        if label >= probs.len() {
            return Err(format!("label {label} is out of range for {} classes", probs.len()));
        }
        let predicted = (0..probs.len()).fold(0, |best, k| if probs[k] > probs[best] { k } else { best });
        Ok(Self {
            confidence: probs[predicted],
            predicted: Some(predicted),
            label: Some(label),
            correct: predicted == label,
            probs: Some(probs),
        })
    }

    pub fn from_confidence(confidence: f64, correct: bool) -> std::result::Result<Self, String> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(format!("confidence {confidence} is outside [0, 1]"));
        }
        Ok(Self {
            probs: None,
            confidence,
            predicted: None,
            label: None,
            correct,
        })
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Line {
    Probs { probs: Vec<f64>, label: usize },
    Confidence { confidence: f64, correct: bool },
}

/// Reads JSONL records. Each line is `{"probs": [...], "label": k}` or
/// `{"confidence": c, "correct": b}`; blank lines are skipped.
pub fn ingest_records(path: impl AsRef<Path>) -> Result<Vec<CalibrationRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_records(BufReader::new(file))
}

pub fn parse_records(reader: impl BufRead) -> Result<Vec<CalibrationRecord>> {
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Record {
            line: line_no,
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(&line).map_err(|e| Error::Record {
            line: line_no,
            reason: format!(
                "expected {{\"probs\": [...], \"label\": k}} or {{\"confidence\": c, \"correct\": b}} ({e})"
            ),
        })?;
        let record = match parsed {
            Line::Probs { probs, label } => CalibrationRecord::from_probs(probs, label),
            Line::Confidence { confidence, correct } => CalibrationRecord::from_confidence(confidence, correct),
        }
        .map_err(|reason| Error::Record { line: line_no, reason })?;
        records.push(record);
    }
    Ok(records)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinScheme {
    EqualWidth,
    EqualMass,
}

impl BinScheme {
    pub fn name(self) -> &'static str {
        match self {
            BinScheme::EqualWidth => "equal_width",
            BinScheme::EqualMass => "equal_mass",
        }
    }
}

/// Aggregates for one bin. `mean_confidence` and `accuracy` are 0 for empty bins.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinStats {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

impl BinStats {
    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn gap(&self) -> f64 {
        self.accuracy - self.mean_confidence
    }
}

/// Bins `(score, outcome)` pairs; `outcome` is 1.0 for a hit and 0.0 otherwise.
fn bin_pairs(pairs: &[(f64, f64)], m: usize, scheme: BinScheme) -> Vec<BinStats> {
    let mut bins = Vec::with_capacity(m);
    match scheme {
        BinScheme::EqualWidth => {
            let mut sums = vec![(0usize, 0.0f64, 0.0f64); m];
            for &(s, y) in pairs {
                let b = ((s * m as f64) as usize).min(m - 1);
                sums[b].0 += 1;
                sums[b].1 += s;
                sums[b].2 += y;
            }
            for (b, (count, conf, hits)) in sums.into_iter().enumerate() {
                bins.push(stats(b as f64 / m as f64, (b + 1) as f64 / m as f64, count, conf, hits));
            }
        }
        BinScheme::EqualMass => {
            let mut sorted = pairs.to_vec();
            sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
            let (base, extra) = (sorted.len() / m, sorted.len() % m);
            let mut start = 0;
            let mut last_hi = 0.0;
            for b in 0..m {
                let len = base + usize::from(b < extra);
                let group = &sorted[start..start + len];
                start += len;
                let (lo, hi) = match (group.first(), group.last()) {
                    (Some(f), Some(l)) => (f.0, l.0),
                    _ => (last_hi, last_hi),
                };
                last_hi = hi;
                let conf = group.iter().map(|p| p.0).sum();
                let hits = group.iter().map(|p| p.1).sum();
                bins.push(stats(lo, hi, len, conf, hits));
            }
        }
    }
    bins
}

fn stats(lo: f64, hi: f64, count: usize, conf_sum: f64, hit_sum: f64) -> BinStats {
    let (mean_confidence, accuracy) = if count == 0 {
        (0.0, 0.0)
    } else {
        (conf_sum / count as f64, hit_sum / count as f64)
    };
    BinStats {
        lo,
        hi,
        count,
        mean_confidence,
        accuracy,
    }
}

/// Bins records by top-label confidence.
pub fn bin_records(records: &[CalibrationRecord], m: usize, scheme: BinScheme) -> Result<Vec<BinStats>> {
    if records.is_empty() {
        return Err(Error::EmptyRecords);
    }
    if m == 0 {
        return Err(Error::Domain("bin count must be >= 1".into()));
    }
    let pairs: Vec<(f64, f64)> = records
        .iter()
        .map(|r| (r.confidence, if r.correct { 1.0 } else { 0.0 }))
        .collect();
    Ok(bin_pairs(&pairs, m, scheme))
}

fn check_total(bins: &[BinStats], n_total: usize) -> Result<()> {
    let found: usize = bins.iter().map(|b| b.count).sum();
    if found != n_total || n_total == 0 {
        return Err(Error::CountMismatch {
            expected: n_total,
            found,
        });
    }
    Ok(())
}

/// `Σ_m (|B_m| / N) · |acc(B_m) - conf(B_m)|`.
pub fn ece(bins: &[BinStats], n_total: usize) -> Result<f64> {
    check_total(bins, n_total)?;
    let n = n_total as f64;
    Ok(bins.iter().map(|b| b.count as f64 / n * b.gap().abs()).sum())
}

/// `sqrt(Σ_m (|B_m| / N) · (acc(B_m) - conf(B_m))²)`.
pub fn rms_ce(bins: &[BinStats], n_total: usize) -> Result<f64> {
    check_total(bins, n_total)?;
    let n = n_total as f64;
    Ok(bins
        .iter()
        .map(|b| b.count as f64 / n * b.gap() * b.gap())
        .sum::<f64>()
        .sqrt())
}

/// Validates full probability vectors with a common class count and returns
/// per-class `(probability, is_label)` pairs.
fn class_pairs(records: &[CalibrationRecord], metric: &'static str) -> Result<Vec<Vec<(f64, f64)>>> {
    if records.is_empty() {
        return Err(Error::EmptyRecords);
    }
    let mut k = None;
    for (index, r) in records.iter().enumerate() {
        let probs = r.probs.as_ref().ok_or(Error::MissingProbs { metric, index })?;
        match k {
            None => k = Some(probs.len()),
            Some(k) if k != probs.len() => {
                return Err(Error::Domain(format!(
                    "{metric}: record {index} has {} classes, expected {k}",
                    probs.len()
                )))
            }
            _ => {}
        }
        if r.label.is_none() {
            return Err(Error::MissingProbs { metric, index });
        }
    }
    let k = k.unwrap();
    Ok((0..k)
        .map(|class| {
            records
                .iter()
                .map(|r| {
                    let hit = if r.label == Some(class) { 1.0 } else { 0.0 };
                    (r.probs.as_ref().unwrap()[class], hit)
                })
                .collect()
        })
        .collect())
}

/// Static calibration error: class-wise ECE over equal-width bins, averaged over classes.
pub fn sce(records: &[CalibrationRecord], m: usize) -> Result<f64> {
    if m == 0 {
        return Err(Error::Domain("bin count must be >= 1".into()));
    }
    let classes = class_pairs(records, "sce")?;
    let n = records.len() as f64;
    let total: f64 = classes
        .iter()
        .map(|pairs| {
            bin_pairs(pairs, m, BinScheme::EqualWidth)
                .iter()
                .map(|b| b.count as f64 / n * b.gap().abs())
                .sum::<f64>()
        })
        .sum();
    Ok(total / classes.len() as f64)
}

/// How ACE treats empty equal-mass bins (possible when `N < m`).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AceEmpty {
    /// Drop empty bins and average over the rest.
    #[default]
    Skip,
    /// Count empty bins as zero gap with weight `1 / (K·m)`.
    Zero,
}

/// Adaptive calibration error: class-wise equal-mass bins, uniformly weighted.
pub fn ace(records: &[CalibrationRecord], m: usize, empty: AceEmpty) -> Result<f64> {
    if m == 0 {
        return Err(Error::Domain("bin count must be >= 1".into()));
    }
    let classes = class_pairs(records, "ace")?;
    let mut sum = 0.0;
    let mut used = 0usize;
    for pairs in &classes {
        for b in bin_pairs(pairs, m, BinScheme::EqualMass) {
            if !b.is_empty() {
                sum += b.gap().abs();
                used += 1;
            }
        }
    }
    let denom = match empty {
        AceEmpty::Skip => used,
        AceEmpty::Zero => classes.len() * m,
    };
    Ok(if denom == 0 { 0.0 } else { sum / denom as f64 })
}

/// One reliability-diagram row; empty bins carry `None`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReliabilityRow {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_confidence: Option<f64>,
    pub accuracy: Option<f64>,
    /// `accuracy - mean_confidence`.
    pub gap: Option<f64>,
}

pub fn reliability_data(bins: &[BinStats]) -> Vec<ReliabilityRow> {
    bins.iter()
        .map(|b| {
            let filled = !b.is_empty();
            ReliabilityRow {
                lo: b.lo,
                hi: b.hi,
                count: b.count,
                mean_confidence: filled.then_some(b.mean_confidence),
                accuracy: filled.then_some(b.accuracy),
                gap: filled.then(|| b.gap()),
            }
        })
        .collect()
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_reliability_csv(rows: &[ReliabilityRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "lo,hi,count,mean_confidence,accuracy,gap")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.lo,
            r.hi,
            r.count,
            opt(r.mean_confidence),
            opt(r.accuracy),
            opt(r.gap)
        )?;
    }
    Ok(())
}

/// One line of the metrics report.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub name: &'static str,
    pub m: usize,
    pub scheme: BinScheme,
    pub value: f64,
}

pub fn write_metrics_csv(rows: &[MetricRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "name,m,scheme,value")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.name, r.m, r.scheme.name(), r.value)?;
    }
    Ok(())
}

/// Synthetic predictions over `classes` labels.
///
/// Each record draws logits `z ~ N(0, logit_scale²)`, reports
/// `probs = softmax(z / temperature)` and samples its label from
/// `softmax(z)`. `temperature = 1` is perfectly calibrated in expectation;
/// `temperature < 1` is overconfident.
pub fn synthetic_records(
    seed: u64,
    n: usize,
    classes: usize,
    logit_scale: f64,
    temperature: f64,
) -> Result<Vec<CalibrationRecord>> {
    if classes < 2 {
        return Err(Error::Domain("synthetic records need at least 2 classes".into()));
    }
    let logits = CounterRng::new(seed, 0xCA1);
    let labels = CounterRng::new(seed, 0xCA2);
    let mut out = Vec::with_capacity(n);
    let mut z = vec![0.0; classes];
    for i in 0..n {
        for (k, zk) in z.iter_mut().enumerate() {
            *zk = logit_scale * logits.normal_at((i * classes + k) as u64);
        }
        let truth = softmax(&z, 1.0)?;
        let u = labels.uniform_at(i as u64);
        let mut acc = 0.0;
        let mut label = classes - 1;
        for (k, p) in truth.iter().enumerate() {
            acc += p;
            if u < acc {
                label = k;
                break;
            }
        }
        let probs = softmax(&z, temperature)?;
        out.push(CalibrationRecord::from_probs(probs, label).map_err(Error::Domain)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn four() -> Vec<CalibrationRecord> {
        [(0.9, true), (0.8, false), (0.3, true), (0.1, false)]
            .iter()
            .map(|&(c, ok)| CalibrationRecord::from_confidence(c, ok).unwrap())
            .collect()
    }

    #[test]
    fn derives_from_probs() {
        let r = CalibrationRecord::from_probs(vec![0.1, 0.9], 1).unwrap();
        assert_eq!((r.confidence, r.predicted, r.correct), (0.9, Some(1), true));
        let tie = CalibrationRecord::from_probs(vec![0.5, 0.5], 1).unwrap();
        assert_eq!(tie.predicted, Some(0));
        assert!(!tie.correct);
        assert!(CalibrationRecord::from_probs(vec![0.1, 0.8], 0).is_err());
        assert!(CalibrationRecord::from_probs(vec![0.1, 0.9], 2).is_err());
    }

    #[test]
    fn parses_both_line_forms() {
        let text = "{\"probs\":[0.1,0.9],\"label\":1}\n\n{\"confidence\":0.4,\"correct\":false}\n";
        let recs = parse_records(text.as_bytes()).unwrap();
        assert_eq!(recs.len(), 2);
        assert!(recs[0].probs.is_some() && recs[1].probs.is_none());
        assert!(matches!(sce(&recs, 2), Err(Error::MissingProbs { metric: "sce", index: 1 })));
    }

    #[test]
    fn reports_line_numbers() {
        let text = "{\"confidence\":0.4,\"correct\":true}\n{\"confidence\":1.2,\"correct\":true}\n";
        assert!(matches!(parse_records(text.as_bytes()), Err(Error::Record { line: 2, .. })));
        let text = "not json\n";
        assert!(matches!(parse_records(text.as_bytes()), Err(Error::Record { line: 1, .. })));
        let text = "{\"probs\":[0.2,0.2],\"label\":0}\n";
        assert!(matches!(parse_records(text.as_bytes()), Err(Error::Record { line: 1, .. })));
        let text = "{\"probs\":[0.2,0.8],\"label\":5}\n";
        assert!(matches!(parse_records(text.as_bytes()), Err(Error::Record { line: 1, .. })));
    }

    #[test]
    fn single_bin_is_global_mean() {
        let bins = bin_records(&four(), 1, BinScheme::EqualWidth).unwrap();
        assert_eq!(bins.len(), 1);
        assert!((bins[0].mean_confidence - 0.525).abs() < 1e-15);
        assert_eq!(bins[0].accuracy, 0.5);
    }

    #[test]
    fn two_bin_partitions() {
        let w = bin_records(&four(), 2, BinScheme::EqualWidth).unwrap();
        assert_eq!((w[0].count, w[1].count), (2, 2));
        let m = bin_records(&four(), 2, BinScheme::EqualMass).unwrap();
        assert_eq!((m[0].lo, m[0].hi, m[1].lo, m[1].hi), (0.1, 0.3, 0.8, 0.9));
    }

    #[test]
    fn right_edge_closed_only_on_last_bin() {
        let recs: Vec<_> = [0.5, 1.0, 0.0]
            .iter()
            .map(|&c| CalibrationRecord::from_confidence(c, true).unwrap())
            .collect();
        let bins = bin_records(&recs, 2, BinScheme::EqualWidth).unwrap();
        assert_eq!((bins[0].count, bins[1].count), (1, 2));
    }

    #[test]
    fn hand_enumerated_metrics() {
        let bins = bin_records(&four(), 2, BinScheme::EqualWidth).unwrap();
        assert!((ece(&bins, 4).unwrap() - 0.325).abs() < 1e-12);
        assert!((rms_ce(&bins, 4).unwrap() - 0.10625f64.sqrt()).abs() < 1e-12);
        assert!(ece(&bins, 5).is_err());
        let rows = reliability_data(&bins);
        assert_eq!(rows[1].count, 2);
        assert!((rows[1].mean_confidence.unwrap() - 0.85).abs() < 1e-15);
        assert!((rows[1].gap.unwrap() + 0.35).abs() < 1e-15);
        assert!((rows[0].gap.unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn extremes() {
        let wrong: Vec<_> = (0..5).map(|_| CalibrationRecord::from_confidence(1.0, false).unwrap()).collect();
        let bins = bin_records(&wrong, 10, BinScheme::EqualWidth).unwrap();
        assert_eq!(ece(&bins, 5).unwrap(), 1.0);
        assert_eq!(rms_ce(&bins, 5).unwrap(), 1.0);
        let rows = reliability_data(&bins);
        assert_eq!(rows[0].accuracy, None);
        assert_eq!(rows.len(), 10);
    }

    #[test]
    fn perfect_calibration_is_zero() {
        // bin [0.5, 1): conf 0.75 with 3 of 4 correct; bin [0, 0.5): conf 0.25 with 1 of 4
        let mut recs = Vec::new();
        for ok in [true, true, true, false] {
            recs.push(CalibrationRecord::from_confidence(0.75, ok).unwrap());
        }
        for ok in [true, false, false, false] {
            recs.push(CalibrationRecord::from_confidence(0.25, ok).unwrap());
        }
        let bins = bin_records(&recs, 2, BinScheme::EqualWidth).unwrap();
        assert!(ece(&bins, 8).unwrap() < 1e-12);
        assert!(rms_ce(&bins, 8).unwrap() < 1e-12);
        assert!(reliability_data(&bins).iter().all(|r| r.gap.unwrap().abs() < 1e-12));
    }

    #[test]
    fn one_hot_predictions_have_zero_class_wise_error() {
        let recs: Vec<_> = [0, 1, 2, 1]
            .iter()
            .map(|&y| {
                let mut p = vec![0.0; 3];
                p[y] = 1.0;
                CalibrationRecord::from_probs(p, y).unwrap()
            })
            .collect();
        assert_eq!(sce(&recs, 4).unwrap(), 0.0);
        assert_eq!(ace(&recs, 4, AceEmpty::Skip).unwrap(), 0.0);
    }

    #[test]
    fn binary_symmetry() {
        // symmetric binary records: class-1 ECE mirrors class-0, so SCE equals class-0 ECE
        let recs: Vec<_> = [(0.8, 0), (0.3, 1), (0.6, 0), (0.9, 1), (0.45, 0)]
            .iter()
            .map(|&(p0, y)| CalibrationRecord::from_probs(vec![p0, 1.0 - p0], y).unwrap())
            .collect();
        let class0: Vec<_> = recs
            .iter()
            .map(|r| CalibrationRecord::from_confidence(r.probs.as_ref().unwrap()[0], r.label == Some(0)).unwrap())
            .collect();
        let bins = bin_records(&class0, 2, BinScheme::EqualWidth).unwrap();
        assert!((sce(&recs, 2).unwrap() - ece(&bins, 5).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ace_empty_policies() {
        let recs = vec![
            CalibrationRecord::from_probs(vec![0.7, 0.3], 0).unwrap(),
            CalibrationRecord::from_probs(vec![0.2, 0.8], 0).unwrap(),
        ];
        // 2 records into 4 equal-mass bins leaves 2 empty bins per class
        let skip = ace(&recs, 4, AceEmpty::Skip).unwrap();
        let zero = ace(&recs, 4, AceEmpty::Zero).unwrap();
        assert!((zero - skip / 2.0).abs() < 1e-15);
        assert!((skip - 0.55).abs() < 1e-15);
    }

    #[test]
    fn csv_writers() {
        let bins = bin_records(&four(), 3, BinScheme::EqualWidth).unwrap();
        let mut buf = Vec::new();
        write_reliability_csv(&reliability_data(&bins), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "lo,hi,count,mean_confidence,accuracy,gap");
        assert_eq!(lines.len(), 4);
        assert!(lines[2].ends_with(",0,,,"), "{}", lines[2]);

        let mut buf = Vec::new();
        let rows = [MetricRow {
            name: "ece",
            m: 2,
            scheme: BinScheme::EqualWidth,
            value: 0.325,
        }];
        write_metrics_csv(&rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "name,m,scheme,value\nece,2,equal_width,0.325\n");
    }

    #[test]
    fn overconfident_synthetic_is_miscalibrated() {
        let calibrated = synthetic_records(3, 4000, 5, 2.0, 1.0).unwrap();
        let hot = synthetic_records(3, 4000, 5, 2.0, 0.4).unwrap();
        let e = |r: &[CalibrationRecord]| ece(&bin_records(r, 10, BinScheme::EqualWidth).unwrap(), r.len()).unwrap();
        assert!(e(&hot) > 3.0 * e(&calibrated));
    }
}
