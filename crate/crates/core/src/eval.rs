//! Classification metrics and reports.
//!
//! Confusion matrices are indexed `[gold][predicted]`. Metrics are kept at
//! full precision as fractions in `[0, 1]`; rendering converts them to
//! percentages rounded half-up to two decimals.
//!
//! CSV output is two documents. The metrics file:
//!
//! ```text
//! class,precision,recall,f1,support
//! Not Hate,93.10,96.70,94.86,3601
//! Hate,64.58,45.68,53.51,475
//! accuracy,,,90.75,4076
//! macro avg,78.84,71.19,74.19,4076
//! weighted avg,89.78,90.75,90.05,4076
//! ```
//!
//! and the matrix file, with a header row of predicted classes:
//!
//! ```text
//! gold/predicted,Not Hate,Hate
//! Not Hate,3482,119
//! Hate,258,217
//! ```

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{make_batches, Example, TaskSchema};
use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::numerics::{Element, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    labels: Vec<String>,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(labels: Vec<String>) -> Self {
        let k = labels.len();
        Self {
            labels,
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>, labels: Vec<String>) -> Result<Self> {
        if counts.len() != labels.len() || counts.iter().any(|r| r.len() != labels.len()) {
            return Err(Error::Contract(format!(
                "confusion matrix must be {k}x{k}",
                k = labels.len()
            )));
        }
        Ok(Self { labels, counts })
    }

    pub fn k(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn get(&self, gold: usize, pred: usize) -> u64 {
        self.counts[gold][pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k()).map(|c| self.counts[c][c]).sum()
    }

    pub fn row_sum(&self, gold: usize) -> u64 {
        self.counts[gold].iter().sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        self.counts.iter().map(|r| r[pred]).sum()
    }

    pub fn with_labels(self, labels: Vec<String>) -> Result<Self> {
        Self::from_counts(self.counts, labels)
    }

    /// Reorders classes so that new class `i` is old class `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.k()];
        if perm.len() != self.k() || perm.iter().any(|&p| p >= self.k() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Contract("not a permutation of the classes".into()));
        }
        let counts = perm
            .iter()
            .map(|&g| perm.iter().map(|&p| self.counts[g][p]).collect())
            .collect();
        let labels = perm.iter().map(|&p| self.labels[p].clone()).collect();
        Ok(Self { labels, counts })
    }
}

/// Counts `(gold, pred)` pairs into a `k`-class matrix with labels `"0".."k-1"`.
pub fn confusion_matrix(gold: &[usize], pred: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if gold.len() != pred.len() {
        return Err(Error::Contract(format!(
            "{} gold labels but {} predictions",
            gold.len(),
            pred.len()
        )));
    }
    let mut cm = ConfusionMatrix::zeros((0..k).map(|c| c.to_string()).collect());
    for (&g, &p) in gold.iter().zip(pred) {
        if g >= k || p >= k {
            return Err(Error::Contract(format!("class index ({g}, {p}) out of range for k={k}")));
        }
        cm.counts[g][p] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Set when a zero denominator forced one of the values to 0.
    pub undefined: bool,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn classwise_metrics(cm: &ConfusionMatrix) -> Vec<ClassMetrics> {
    (0..cm.k())
        .map(|c| {
            let tp = cm.get(c, c);
            let (precision, p_undef) = ratio(tp, cm.col_sum(c));
            let (recall, r_undef) = ratio(tp, cm.row_sum(c));
            let (f1, f_undef) = if precision + recall == 0.0 {
                (0.0, true)
            } else {
                (2.0 * precision * recall / (precision + recall), false)
            };
            ClassMetrics {
                label: cm.labels[c].clone(),
                precision,
                recall,
                f1,
                support: cm.row_sum(c),
                undefined: p_undef || r_undef || f_undef,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryMetrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    pub total: u64,
}

/// Accuracy plus macro and support-weighted averages.
pub fn summary_metrics(cm: &ConfusionMatrix) -> Result<SummaryMetrics> {
    summarize(cm, &classwise_metrics(cm))
}

fn summarize(cm: &ConfusionMatrix, classes: &[ClassMetrics]) -> Result<SummaryMetrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Undefined("no evaluated examples".into()));
    }
    let k = classes.len() as f64;
    let mean = |f: fn(&ClassMetrics) -> f64| classes.iter().map(f).sum::<f64>() / k;
    let weighted =
        |f: fn(&ClassMetrics) -> f64| classes.iter().map(|c| c.support as f64 * f(c)).sum::<f64>() / total as f64;
    Ok(SummaryMetrics {
        accuracy: cm.trace() as f64 / total as f64,
        macro_precision: mean(|c| c.precision),
        macro_recall: mean(|c| c.recall),
        macro_f1: mean(|c| c.f1),
        weighted_precision: weighted(|c| c.precision),
        weighted_recall: weighted(|c| c.recall),
        weighted_f1: weighted(|c| c.f1),
        total,
    })
}

/// Support-weighted mean of per-class F1 scores.
pub fn weighted_f1_from_parts(f1: &[f64], supports: &[u64]) -> Result<f64> {
    if f1.len() != supports.len() {
        return Err(Error::Contract("f1 and support lengths differ".into()));
    }
    let total: u64 = supports.iter().sum();
    if total == 0 {
        return Err(Error::Undefined("total support is zero".into()));
    }
    Ok(f1.iter().zip(supports).map(|(f, &s)| f * s as f64).sum::<f64>() / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub classes: Vec<ClassMetrics>,
    pub summary: SummaryMetrics,
}

impl EvalReport {
    pub fn from_confusion(confusion: ConfusionMatrix) -> Result<Self> {
        let classes = classwise_metrics(&confusion);
        let summary = summarize(&confusion, &classes)?;
        Ok(Self {
            confusion,
            classes,
            summary,
        })
    }

    pub fn from_predictions(gold: &[usize], pred: &[usize], schema: &TaskSchema) -> Result<Self> {
        let cm = confusion_matrix(gold, pred, schema.len())?.with_labels(schema.labels().to_vec())?;
        Self::from_confusion(cm)
    }

    pub fn accuracy(&self) -> f64 {
        self.summary.accuracy
    }

    pub fn weighted_f1(&self) -> f64 {
        self.summary.weighted_f1
    }

    pub fn macro_f1(&self) -> f64 {
        self.summary.macro_f1
    }

    pub fn has_undefined(&self) -> bool {
        self.classes.iter().any(|c| c.undefined)
    }
}

/// Formats a fraction as a percentage with two decimals, rounding half-up.
pub fn format_percent(fraction: f64) -> String {
    let hundredths = fraction * 10_000.0;
    // absorb representation error so that e.g. 0.90045 rounds up
    let snapped = (hundredths * 1e6).round() / 1e6;
    let k = (snapped + 0.5).floor() as i64;
    let sign = if k < 0 { "-" } else { "" };
    let k = k.abs();
    format!("{sign}{}.{:02}", k / 100, k % 100)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "text" | "txt" => Ok(Self::Text),
            "csv" => Ok(Self::Csv),
            other => Err(Error::Config(format!("unknown report format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RenderedReport {
    Text(String),
    Csv { metrics: String, matrix: String },
}

pub fn render_report(report: &EvalReport, format: ReportFormat) -> Result<RenderedReport> {
    Ok(match format {
        ReportFormat::Text => RenderedReport::Text(render_text(report)),
        ReportFormat::Csv => RenderedReport::Csv {
            metrics: render_metrics_csv(report)?,
            matrix: render_matrix_csv(&report.confusion)?,
        },
    })
}

const SUMMARY_ROWS: [&str; 3] = ["accuracy", "macro avg", "weighted avg"];

fn metric_rows(report: &EvalReport) -> Vec<[String; 5]> {
    let s = &report.summary;
    let total = s.total.to_string();
    let mut rows: Vec<[String; 5]> = report
        .classes
        .iter()
        .map(|c| {
            [
                c.label.clone(),
                format_percent(c.precision),
                format_percent(c.recall),
                format_percent(c.f1),
                c.support.to_string(),
            ]
        })
        .collect();
    rows.push([
        SUMMARY_ROWS[0].into(),
        String::new(),
        String::new(),
        format_percent(s.accuracy),
        total.clone(),
    ]);
    rows.push([
        SUMMARY_ROWS[1].into(),
        format_percent(s.macro_precision),
        format_percent(s.macro_recall),
        format_percent(s.macro_f1),
        total.clone(),
    ]);
    rows.push([
        SUMMARY_ROWS[2].into(),
        format_percent(s.weighted_precision),
        format_percent(s.weighted_recall),
        format_percent(s.weighted_f1),
        total,
    ]);
    rows
}

fn render_text(report: &EvalReport) -> String {
    let cm = &report.confusion;
    let name_w = cm
        .labels
        .iter()
        .map(|l| l.chars().count())
        .chain(["weighted avg".len(), "gold \\ predicted".len()])
        .max()
        .unwrap_or(0);
    let cell_w = cm
        .labels
        .iter()
        .map(|l| l.chars().count())
        .chain(cm.counts.iter().flatten().map(|c| c.to_string().len()))
        .max()
        .unwrap_or(1)
        .max(6);
    let pad = |s: &str, w: usize| format!("{s}{}", " ".repeat(w.saturating_sub(s.chars().count())));
    let rpad = |s: &str, w: usize| format!("{}{s}", " ".repeat(w.saturating_sub(s.chars().count())));

    let mut out = String::new();
    out.push_str("Confusion matrix (rows = gold, columns = predicted)\n");
    out.push_str(&pad("gold \\ predicted", name_w));
    for l in &cm.labels {
        out.push_str("  ");
        out.push_str(&rpad(l, cell_w));
    }
    out.push('\n');
    for (label, row) in cm.labels.iter().zip(&cm.counts) {
        out.push_str(&pad(label, name_w));
        for c in row {
            out.push_str("  ");
            out.push_str(&rpad(&c.to_string(), cell_w));
        }
        out.push('\n');
    }
    out.push('\n');
    let _ = writeln!(
        out,
        "{}  {:>9}  {:>9}  {:>9}  {:>9}",
        pad("class", name_w),
        "precision",
        "recall",
        "f1",
        "support"
    );
    for row in metric_rows(report) {
        let _ = writeln!(
            out,
            "{}  {:>9}  {:>9}  {:>9}  {:>9}",
            pad(&row[0], name_w),
            row[1],
            row[2],
            row[3],
            row[4]
        );
    }
    let undefined: Vec<&str> = report
        .classes
        .iter()
        .filter(|c| c.undefined)
        .map(|c| c.label.as_str())
        .collect();
    if !undefined.is_empty() {
        let _ = writeln!(out, "\nundefined (zero denominator, reported as 0): {}", undefined.join(", "));
    }
    out
}

fn csv_string(rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.write_record(&row)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Format(format!("csv buffer: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

fn render_metrics_csv(report: &EvalReport) -> Result<String> {
    let header = ["class", "precision", "recall", "f1", "support"].map(String::from).to_vec();
    csv_string(std::iter::once(header).chain(metric_rows(report).into_iter().map(Vec::from)))
}

fn render_matrix_csv(cm: &ConfusionMatrix) -> Result<String> {
    let header = std::iter::once("gold/predicted".to_string())
        .chain(cm.labels.iter().cloned())
        .collect();
    let rows = cm.labels.iter().zip(&cm.counts).map(|(l, r)| {
        std::iter::once(l.clone())
            .chain(r.iter().map(u64::to_string))
            .collect()
    });
    csv_string(std::iter::once(header).chain(rows))
}

fn read_csv(text: &str) -> Result<Vec<Vec<String>>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(text.as_bytes());
    r.records()
        .map(|rec| Ok(rec?.iter().map(str::to_string).collect()))
        .collect()
}

/// Parses the matrix CSV back into a confusion matrix.
pub fn parse_matrix_csv(text: &str) -> Result<ConfusionMatrix> {
    let rows = read_csv(text)?;
    let (header, body) = rows
        .split_first()
        .ok_or_else(|| Error::Format("empty matrix csv".into()))?;
    let labels: Vec<String> = header.iter().skip(1).cloned().collect();
    let mut counts = Vec::with_capacity(body.len());
    for (i, row) in body.iter().enumerate() {
        if row.first() != labels.get(i) {
            return Err(Error::Format(format!("matrix row {} label does not match header", i + 1)));
        }
        let parsed = row[1..]
            .iter()
            .map(|c| {
                c.parse::<u64>()
                    .map_err(|e| Error::Format(format!("matrix cell {c:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        counts.push(parsed);
    }
    ConfusionMatrix::from_counts(counts, labels).map_err(|e| Error::Format(e.to_string()))
}

/// Rebuilds a report from its CSV pair. The matrix determines every value;
/// the metrics file must agree with it at rendered precision.
pub fn parse_csv_report(metrics: &str, matrix: &str) -> Result<EvalReport> {
    let report = EvalReport::from_confusion(parse_matrix_csv(matrix)?)?;
    let expected = render_metrics_csv(&report)?;
    if read_csv(metrics)? != read_csv(&expected)? {
        return Err(Error::Format("metrics csv disagrees with the confusion matrix".into()));
    }
    Ok(report)
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn argmax_rows<T: Element>(logits: &Tensor<T>) -> Result<Vec<usize>> {
    let (rows, cols) = logits.dims2()?;
    if cols == 0 {
        return Err(Error::Dimension("logits have no classes".into()));
    }
    Ok((0..rows)
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (j, v) in row.iter().enumerate().skip(1) {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

fn check_schema<T: Element>(model: &TransformerModel<T>, schema: &TaskSchema) -> Result<()> {
    if model.config().n_classes != schema.len() {
        return Err(Error::Config(format!(
            "model has {} classes but the {} task has {}",
            model.config().n_classes,
            schema.task,
            schema.len()
        )));
    }
    Ok(())
}

/// Logits for each example, in order, computed `batch_size` at a time.
pub fn predict_logits<T: Element>(
    model: &TransformerModel<T>,
    examples: &[&Example],
    schema: &TaskSchema,
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    check_schema(model, schema)?;
    let mut out = Vec::with_capacity(examples.len());
    for batch in make_batches(examples, model.tokenizer(), batch_size, false, 0)? {
        let logits = model.forward(&batch.tokens)?;
        let (rows, _) = logits.dims2()?;
        out.extend((0..rows).map(|r| logits.row(r).iter().map(|v| v.as_f64()).collect()));
    }
    Ok(out)
}

pub fn predict<T: Element>(
    model: &TransformerModel<T>,
    examples: &[&Example],
    schema: &TaskSchema,
    batch_size: usize,
) -> Result<Vec<usize>> {
    check_schema(model, schema)?;
    let mut out = Vec::with_capacity(examples.len());
    for batch in make_batches(examples, model.tokenizer(), batch_size, false, 0)? {
        out.extend(argmax_rows(&model.forward(&batch.tokens)?)?);
    }
    Ok(out)
}

pub fn evaluate<T: Element>(
    model: &TransformerModel<T>,
    examples: &[&Example],
    schema: &TaskSchema,
    batch_size: usize,
) -> Result<EvalReport> {
    let pred = predict(model, examples, schema, batch_size)?;
    let gold: Vec<usize> = examples.iter().map(|e| e.label).collect();
    EvalReport::from_predictions(&gold, &pred, schema)
}
