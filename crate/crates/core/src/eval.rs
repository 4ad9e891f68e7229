//! Ranking metrics, seed aggregation and result tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<usize> {
    if scores.len() != labels.len() {
        return Err(Error::Validation(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if scores.is_empty() {
        return Err(Error::Validation("no scores to evaluate".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Validation("scores contain NaN".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::UndefinedMetric("no positive labels".into()));
    }
    Ok(positives)
}

/// Non-interpolated area under the step-wise precision/recall curve.
///
/// Thresholds are the distinct scores in descending order; samples with
/// equal scores enter together, so ties never depend on input order.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let positives = check_inputs(scores, labels)? as f64;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / positives;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    /// Nothing scored at or above the threshold; precision is reported as 0.
    pub no_predictions: bool,
}

/// Predicts positive where `score >= tau`.
pub fn precision_recall_at_threshold(scores: &[f64], labels: &[bool], tau: f64) -> Result<PrecisionRecall> {
    let positives = check_inputs(scores, labels)?;
    let (mut tp, mut fp) = (0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        if s >= tau {
            if l {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    let predicted = tp + fp;
    Ok(PrecisionRecall {
        precision: if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 },
        recall: tp as f64 / positives as f64,
        no_predictions: predicted == 0,
    })
}

/// Mean and population standard deviation.
pub fn aggregate(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Validation("cannot aggregate an empty list".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTriple {
    pub ap: f64,
    pub precision: f64,
    pub recall: f64,
}

impl MetricsTriple {
    pub fn new(ap: f64, precision: f64, recall: f64) -> Self {
        Self { ap, precision, recall }
    }

    /// AP plus precision/recall at `tau`.
    pub fn compute(scores: &[f64], labels: &[bool], tau: f64) -> Result<Self> {
        let ap = average_precision(scores, labels)?;
        let pr = precision_recall_at_threshold(scores, labels, tau)?;
        Ok(Self { ap, precision: pr.precision, recall: pr.recall })
    }

    fn map(self, f: impl Fn(f64) -> f64) -> Self {
        Self { ap: f(self.ap), precision: f(self.precision), recall: f(self.recall) }
    }

    fn values(&self) -> [f64; 3] {
        [self.ap, self.precision, self.recall]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub n_aug: usize,
    pub mean: MetricsTriple,
    pub std: MetricsTriple,
    pub num_seeds: usize,
}

impl MetricsRow {
    /// Aggregates one metric triple per seed.
    pub fn from_runs(method: impl Into<String>, n_aug: usize, runs: &[MetricsTriple]) -> Result<Self> {
        let col = |f: fn(&MetricsTriple) -> f64| aggregate(&runs.iter().map(f).collect::<Vec<_>>());
        let (ap, ap_s) = col(|t| t.ap)?;
        let (p, p_s) = col(|t| t.precision)?;
        let (r, r_s) = col(|t| t.recall)?;
        Ok(Self {
            method: method.into(),
            n_aug,
            mean: MetricsTriple::new(ap, p, r),
            std: MetricsTriple::new(ap_s, p_s, r_s),
            num_seeds: runs.len(),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    /// Free-form settings worth keeping next to the numbers (threshold,
    /// std convention, provenance digests).
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

fn check_name(s: &str, what: &str) -> Result<()> {
    if s.is_empty() || s.contains(['|', ',', '\t', '\n', '#']) || s != s.trim() {
        return Err(Error::Validation(format!("{what} `{s}` is empty or contains a reserved character")));
    }
    Ok(())
}

impl MetricsReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, row: MetricsRow) -> Result<()> {
        check_name(&row.method, "method name")?;
        if row.method == "Average" {
            return Err(Error::Validation("`Average` is reserved".into()));
        }
        if row.num_seeds == 0 {
            return Err(Error::Validation("a row needs at least one seed".into()));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Mean of the row means and mean of the row stds.
    pub fn average_row(&self) -> Option<(MetricsTriple, MetricsTriple)> {
        average_of(self.rows.iter())
    }

    /// Methods in first-appearance order.
    pub fn methods(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.method.as_str()) {
                out.push(&r.method);
            }
        }
        out
    }

    pub fn average_for(&self, method: &str) -> Option<(MetricsTriple, MetricsTriple)> {
        average_of(self.rows.iter().filter(|r| r.method == method))
    }

    /// Every value rounded to the 3 decimals the tables show.
    pub fn rounded(&self) -> Self {
        Self {
            rows: self
                .rows
                .iter()
                .map(|r| MetricsRow { mean: r.mean.map(round3), std: r.std.map(round3), ..r.clone() })
                .collect(),
            metadata: self.metadata.clone(),
        }
    }
}

fn average_of<'a>(rows: impl Iterator<Item = &'a MetricsRow>) -> Option<(MetricsTriple, MetricsTriple)> {
    let rows: Vec<_> = rows.collect();
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    let sum = |f: &dyn Fn(&MetricsRow) -> MetricsTriple| {
        let t = rows.iter().fold(MetricsTriple::default(), |acc, r| {
            let v = f(r);
            MetricsTriple::new(acc.ap + v.ap, acc.precision + v.precision, acc.recall + v.recall)
        });
        t.map(|v| v / n)
    };
    Some((sum(&|r| r.mean), sum(&|r| r.std)))
}

/// Rounds half to even at the third decimal of `v · 1000`.
pub fn round3(v: f64) -> f64 {
    (v * 1000.0).round_ties_even() / 1000.0
}

/// Three decimals without the leading zero: `0.626` becomes `.626`.
pub fn format3(v: f64) -> String {
    let s = format!("{:.3}", round3(v));
    match s.strip_prefix("0.") {
        Some(rest) => format!(".{rest}"),
        None => match s.strip_prefix("-0.") {
            Some(rest) => format!("-.{rest}"),
            None => s,
        },
    }
}

/// `mean (std)` as in the tables.
pub fn format_cell(mean: f64, std: f64) -> String {
    format!("{} ({})", format3(mean), format3(std))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReportFormat {
    /// Delimiter-separated values with a header line.
    Dsv(char),
    /// Pipe table laid out like the published tables.
    TextTable,
    Json,
}

const DSV_HEADER: [&str; 10] = [
    "kind", "method", "n_aug", "num_seeds", "ap_mean", "ap_std", "precision_mean", "precision_std", "recall_mean", "recall_std",
];

pub fn emit_report(report: &MetricsReport, format: ReportFormat) -> String {
    let mut out = String::new();
    match format {
        ReportFormat::Json => {
            out = serde_json::to_string_pretty(&report.rounded()).expect("report serializes");
            out.push('\n');
        }
        ReportFormat::Dsv(d) => {
            for (k, v) in &report.metadata {
                writeln!(out, "# {k}: {v}").expect("string write");
            }
            writeln!(out, "{}", DSV_HEADER.join(&d.to_string())).expect("string write");
            let line = |kind: &str, method: &str, n_aug: String, seeds: String, m: MetricsTriple, s: MetricsTriple| {
                let mut cells = vec![kind.to_string(), method.to_string(), n_aug, seeds];
                for (a, b) in m.values().iter().zip(s.values()) {
                    cells.push(format!("{:.3}", round3(*a)));
                    cells.push(format!("{:.3}", round3(b)));
                }
                cells.join(&d.to_string())
            };
            for r in &report.rows {
                writeln!(out, "{}", line("row", &r.method, r.n_aug.to_string(), r.num_seeds.to_string(), r.mean, r.std))
                    .expect("string write");
            }
            for m in report.methods() {
                let (mean, std) = report.average_for(m).expect("method has rows");
                writeln!(out, "{}", line("average", m, String::new(), String::new(), mean, std)).expect("string write");
            }
        }
        ReportFormat::TextTable => {
            let mut lines = vec![
                ["Method".to_string(), "AP".into(), "Precision".into(), "Recall".into(), "Seeds".into()],
            ];
            for m in report.methods() {
                for r in report.rows.iter().filter(|r| r.method == m) {
                    lines.push([
                        format!("{} {}", r.method, r.n_aug),
                        format_cell(r.mean.ap, r.std.ap),
                        format_cell(r.mean.precision, r.std.precision),
                        format_cell(r.mean.recall, r.std.recall),
                        r.num_seeds.to_string(),
                    ]);
                }
                let (mean, std) = report.average_for(m).expect("method has rows");
                lines.push([
                    "Average".into(),
                    format_cell(mean.ap, std.ap),
                    format_cell(mean.precision, std.precision),
                    format_cell(mean.recall, std.recall),
                    String::new(),
                ]);
            }
            let widths: Vec<usize> = (0..5).map(|c| lines.iter().map(|l| l[c].chars().count()).max().unwrap_or(0)).collect();
            for (i, l) in lines.iter().enumerate() {
                let cells: Vec<String> = l.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
                writeln!(out, "| {} |", cells.join(" | ").trim_end()).expect("string write");
                if i == 0 {
                    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
                    writeln!(out, "|-{}-|", rule.join("-|-")).expect("string write");
                }
            }
            for (k, v) in &report.metadata {
                writeln!(out, "# {k}: {v}").expect("string write");
            }
        }
    }
    out
}

fn parse_num(s: &str) -> Result<f64> {
    let t = s.trim();
    let fixed = if let Some(rest) = t.strip_prefix('.') { format!("0.{rest}") } else { t.to_string() };
    fixed.parse().map_err(|_| Error::Report(format!("not a number: `{s}`")))
}

fn parse_cell(s: &str) -> Result<(f64, f64)> {
    let s = s.trim();
    let (m, rest) = s.split_once('(').ok_or_else(|| Error::Report(format!("bad cell `{s}`")))?;
    let std = rest.strip_suffix(')').ok_or_else(|| Error::Report(format!("bad cell `{s}`")))?;
    Ok((parse_num(m)?, parse_num(std)?))
}

fn parse_meta(line: &str, metadata: &mut BTreeMap<String, String>) -> Result<()> {
    let body = line.trim_start_matches('#').trim_start();
    let (k, v) = body.split_once(": ").ok_or_else(|| Error::Report(format!("bad metadata line `{line}`")))?;
    metadata.insert(k.to_string(), v.to_string());
    Ok(())
}

/// Reads any document written by [`emit_report`]. Average lines are
/// skipped because they are recomputed from the rows.
pub fn parse_report(text: &str, format: ReportFormat) -> Result<MetricsReport> {
    let mut report = MetricsReport::new();
    match format {
        ReportFormat::Json => {
            report = serde_json::from_str(text).map_err(|e| Error::Report(e.to_string()))?;
        }
        ReportFormat::Dsv(d) => {
            let mut header_seen = false;
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                if line.starts_with('#') {
                    parse_meta(line, &mut report.metadata)?;
                    continue;
                }
                let cells: Vec<&str> = line.split(d).collect();
                if !header_seen {
                    if cells != DSV_HEADER {
                        return Err(Error::Report(format!("unexpected header `{line}`")));
                    }
                    header_seen = true;
                    continue;
                }
                if cells.len() != DSV_HEADER.len() {
                    return Err(Error::Report(format!("expected {} fields in `{line}`", DSV_HEADER.len())));
                }
                match cells[0] {
                    "average" => continue,
                    "row" => {}
                    k => return Err(Error::Report(format!("unknown row kind `{k}`"))),
                }
                let n = |i: usize| parse_num(cells[i]);
                let int = |i: usize| cells[i].parse::<usize>().map_err(|_| Error::Report(format!("bad integer `{}`", cells[i])));
                report.push(MetricsRow {
                    method: cells[1].to_string(),
                    n_aug: int(2)?,
                    num_seeds: int(3)?,
                    mean: MetricsTriple::new(n(4)?, n(6)?, n(8)?),
                    std: MetricsTriple::new(n(5)?, n(7)?, n(9)?),
                })?;
            }
            if !header_seen {
                return Err(Error::Report("missing header".into()));
            }
        }
        ReportFormat::TextTable => {
            let mut seen_header = false;
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                if line.starts_with('#') {
                    parse_meta(line, &mut report.metadata)?;
                    continue;
                }
                let inner = line
                    .trim()
                    .strip_prefix('|')
                    .and_then(|l| l.strip_suffix('|'))
                    .ok_or_else(|| Error::Report(format!("not a table line: `{line}`")))?;
                let cells: Vec<&str> = inner.split('|').map(str::trim).collect();
                if !seen_header {
                    seen_header = cells.first() == Some(&"Method");
                    if !seen_header {
                        return Err(Error::Report("missing header".into()));
                    }
                    continue;
                }
                if cells.iter().all(|c| c.chars().all(|ch| ch == '-')) || cells[0] == "Average" {
                    continue;
                }
                if cells.len() != 5 {
                    return Err(Error::Report(format!("expected 5 cells in `{line}`")));
                }
                let (method, n_aug) = cells[0]
                    .rsplit_once(' ')
                    .ok_or_else(|| Error::Report(format!("row label `{}` lacks N_aug", cells[0])))?;
                let n_aug = n_aug.parse().map_err(|_| Error::Report(format!("bad N_aug in `{}`", cells[0])))?;
                let (ap, ap_s) = parse_cell(cells[1])?;
                let (p, p_s) = parse_cell(cells[2])?;
                let (r, r_s) = parse_cell(cells[3])?;
                let num_seeds = cells[4].parse().map_err(|_| Error::Report(format!("bad seed count `{}`", cells[4])))?;
                report.push(MetricsRow {
                    method: method.to_string(),
                    n_aug,
                    num_seeds,
                    mean: MetricsTriple::new(ap, p, r),
                    std: MetricsTriple::new(ap_s, p_s, r_s),
                })?;
            }
            if !seen_header {
                return Err(Error::Report("missing header".into()));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.3], &[true, true, false]).unwrap(), 1.0);
        let ap = average_precision(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false]).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12);
        assert!(matches!(average_precision(&[0.1], &[false]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn tied_scores_form_one_step() {
        // all tied: one threshold, precision = prevalence
        let ap = average_precision(&[0.5; 4], &[true, false, false, true]).unwrap();
        assert_eq!(ap, 0.5);
    }

    #[test]
    fn threshold_metrics() {
        let pr = precision_recall_at_threshold(&[0.9, 0.1], &[true, false], 0.5).unwrap();
        assert_eq!((pr.precision, pr.recall, pr.no_predictions), (1.0, 1.0, false));
        let pr = precision_recall_at_threshold(&[0.2, 0.1], &[true, false], 0.5).unwrap();
        assert_eq!((pr.precision, pr.recall, pr.no_predictions), (0.0, 0.0, true));
    }

    #[test]
    fn aggregate_rules() {
        assert_eq!(aggregate(&[0.5; 4]).unwrap(), (0.5, 0.0));
        assert_eq!(aggregate(&[0.7]).unwrap(), (0.7, 0.0));
        let (m, s) = aggregate(&[1.0, 3.0]).unwrap();
        assert_eq!((m, s), (2.0, 1.0));
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn cell_rendering() {
        assert_eq!(format_cell(0.626, 0.059), ".626 (.059)");
        assert_eq!(format3(1.0), "1.000");
        assert_eq!(format3(0.0625), ".062");
        assert_eq!(format3(0.0), ".000");
    }

    fn sample_report() -> MetricsReport {
        let mut r = MetricsReport::new();
        r.push(MetricsRow::from_runs("In&Out", 80, &[MetricsTriple::new(0.6, 0.7, 0.5), MetricsTriple::new(0.62, 0.61, 0.55)]).unwrap())
            .unwrap();
        r.push(MetricsRow::from_runs("In&Out", 100, &[MetricsTriple::new(0.6261, 0.3, 0.9)]).unwrap()).unwrap();
        r.metadata.insert("tau".into(), "0.5".into());
        r
    }

    #[test]
    fn round_trips() {
        let r = sample_report();
        for f in [ReportFormat::Dsv(','), ReportFormat::Dsv('\t'), ReportFormat::TextTable, ReportFormat::Json] {
            let text = emit_report(&r, f);
            assert_eq!(parse_report(&text, f).unwrap(), r.rounded(), "{f:?}\n{text}");
        }
    }

    #[test]
    fn empty_report_is_header_only() {
        let text = emit_report(&MetricsReport::new(), ReportFormat::TextTable);
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("| Method"));
        assert_eq!(parse_report(&text, ReportFormat::TextTable).unwrap(), MetricsReport::new());
        let dsv = emit_report(&MetricsReport::new(), ReportFormat::Dsv(','));
        assert_eq!(dsv.lines().count(), 1);
    }

    #[test]
    fn reserved_names_rejected() {
        let mut r = MetricsReport::new();
        let row = MetricsRow::from_runs("a|b", 0, &[MetricsTriple::default()]).unwrap();
        assert!(r.push(row).is_err());
    }
}
