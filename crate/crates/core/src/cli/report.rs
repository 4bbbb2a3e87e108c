use std::collections::BTreeMap;

use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::score::{pearson, spearman};
use crate::train::RunMetrics;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub a: f64,
    pub b: f64,
    /// a − b; negative means A has the lower loss.
    pub delta: f64,
    pub a_better: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointRow {
    pub step: usize,
    pub holdout_a: f64,
    pub holdout_b: f64,
    pub test_a: Option<f64>,
    pub test_b: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareReport {
    pub rows: Vec<MetricRow>,
    pub points: Vec<PointRow>,
}

/// Trapezoidal area under a loss curve sampled at `steps`.
pub fn auc(steps: &[usize], values: &[f64]) -> f64 {
    steps
        .windows(2)
        .zip(values.windows(2))
        .map(|(s, v)| (s[1] - s[0]) as f64 * (v[0] + v[1]) / 2.0)
        .sum()
}

fn row(metric: &str, a: f64, b: f64) -> MetricRow {
    MetricRow {
        metric: metric.into(),
        a,
        b,
        delta: a - b,
        a_better: a < b,
    }
}

fn curve_rows(name: &str, steps: &[usize], a: &[f64], b: &[f64]) -> Vec<MetricRow> {
    let best = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    vec![
        row(&format!("final_{name}"), *a.last().unwrap(), *b.last().unwrap()),
        row(&format!("best_{name}"), best(a), best(b)),
        row(&format!("auc_{name}"), auc(steps, a), auc(steps, b)),
    ]
}

/// Final, best and area-under-curve losses of two runs with identical eval
/// cadence.
pub fn compare_metrics(a: &RunMetrics, b: &RunMetrics) -> Result<CompareReport> {
    let ea = a.evals();
    let eb = b.evals();
    let sa: Vec<usize> = ea.iter().map(|e| e.0).collect();
    let sb: Vec<usize> = eb.iter().map(|e| e.0).collect();
    if sa != sb {
        return Err(Error::Report(format!(
            "eval cadence mismatch: {} eval points at {:?} vs {} at {:?}",
            sa.len(),
            &sa[..sa.len().min(4)],
            sb.len(),
            &sb[..sb.len().min(4)]
        )));
    }
    if sa.is_empty() {
        return Err(Error::Report("no eval events to compare".into()));
    }
    let ha: Vec<f64> = ea.iter().map(|e| e.1).collect();
    let hb: Vec<f64> = eb.iter().map(|e| e.1).collect();
    let mut rows = curve_rows("holdout", &sa, &ha, &hb);
    let ta: Option<Vec<f64>> = ea.iter().map(|e| e.2).collect();
    let tb: Option<Vec<f64>> = eb.iter().map(|e| e.2).collect();
    if let (Some(ta), Some(tb)) = (&ta, &tb) {
        rows.extend(curve_rows("test", &sa, ta, tb));
    }
    let points = ea
        .iter()
        .zip(&eb)
        .map(|(x, y)| PointRow {
            step: x.0,
            holdout_a: x.1,
            holdout_b: y.1,
            test_a: x.2,
            test_b: y.2,
        })
        .collect();
    Ok(CompareReport { rows, points })
}

/// Min-max normalization over the whole vector; all ones when constant.
pub fn normalize(scores: &[f64]) -> Vec<f64> {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return vec![1.0; scores.len()];
    }
    scores.iter().map(|s| (s - lo) / (hi - lo)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupMean {
    pub group: String,
    pub key: String,
    pub mean: f64,
    pub count: usize,
}

/// Means of full-set-normalized scores per domain (when every example is
/// labeled) and per noise flag. A partially labeled set is an error.
pub fn group_means(scores: &[f64], data: &Dataset, require_domains: bool) -> Result<Vec<GroupMean>> {
    if scores.len() != data.len() {
        return Err(Error::Report(format!("{} scores for {} examples", scores.len(), data.len())));
    }
    let norm = normalize(scores);
    let labeled = data.iter().filter(|e| e.domain.is_some()).count();
    if (labeled > 0 && labeled < data.len()) || (require_domains && labeled == 0) {
        return Err(Error::Report(format!(
            "domain labels missing on {} of {} examples",
            data.len() - labeled,
            data.len()
        )));
    }
    let mut out = Vec::new();
    let mut push = |group: &str, buckets: BTreeMap<String, (f64, usize)>| {
        for (key, (sum, n)) in buckets {
            out.push(GroupMean {
                group: group.into(),
                key,
                mean: sum / n as f64,
                count: n,
            });
        }
    };
    if labeled > 0 {
        let mut by: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
        for (e, s) in data.iter().zip(&norm) {
            let b = by.entry(e.domain.unwrap()).or_default();
            b.0 += s;
            b.1 += 1;
        }
        push("domain", by.into_iter().map(|(k, v)| (k.to_string(), v)).collect());
    }
    let mut flags: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (e, s) in data.iter().zip(&norm) {
        let b = flags.entry(if e.corrupted { "corrupted" } else { "clean" }.into()).or_default();
        b.0 += s;
        b.1 += 1;
    }
    push("flag", flags);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Correlation {
    pub scorer: String,
    pub spearman: Option<f64>,
    pub pearson: Option<f64>,
}

pub fn correlations(columns: &[(&str, &[f64])], oracle: &[f64]) -> Vec<Correlation> {
    columns
        .iter()
        .map(|(name, v)| Correlation {
            scorer: name.to_string(),
            spearman: spearman(v, oracle),
            pearson: pearson(v, oracle),
        })
        .collect()
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |x| format!("{x:.6}"))
}
