//! Labeled text data for the two classification tasks.
//!
//! Files are UTF-8 JSON-Lines with one record per line:
//!
//! ```json
//! {"id": "det-train-000001", "text": "...", "label": "Hate", "split": "train"}
//! ```
//!
//! `label` may be a class name or its index. Labels are written back as
//! names.

mod fixture;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenBatch;
use crate::tokenizer::ByteTokenizer;

pub use fixture::{class_markers, generate_fixture, write_fixture, FixtureSpec, SplitCounts};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Detection,
    Target,
}

impl Task {
    pub fn schema(self) -> TaskSchema {
        TaskSchema::new(self)
    }

    pub fn n_classes(self) -> usize {
        self.schema().len()
    }

    /// Fine-tuning epochs used for each task.
    pub fn default_epochs(self) -> usize {
        match self {
            Task::Detection => 2,
            Task::Target => 4,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Detection => "detection",
            Task::Target => "target",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "detection" => Ok(Task::Detection),
            "target" => Ok(Task::Target),
            other => Err(Error::Config(format!(
                "unknown task {other:?} (expected detection or target)"
            ))),
        }
    }
}

/// Ordered class names for a task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSchema {
    pub task: Task,
    labels: Vec<String>,
    aliases: Vec<(String, usize)>,
}

impl TaskSchema {
    pub fn new(task: Task) -> Self {
        let (labels, aliases): (&[&str], &[(&str, usize)]) = match task {
            Task::Detection => (&["Not Hate", "Hate"], &[("Non Hate", 0)]),
            Task::Target => (
                &["Individual", "Organizational", "Community"],
                &[("Organization", 1)],
            ),
        };
        Self {
            task,
            labels: labels.iter().map(|s| s.to_string()).collect(),
            aliases: aliases.iter().map(|(s, i)| (s.to_string(), *i)).collect(),
        }
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.labels[index]
    }

    /// Case-insensitive lookup of a class name.
    pub fn index_of(&self, name: &str) -> Option<usize> {
        let name = name.trim();
        self.labels
            .iter()
            .position(|l| l.eq_ignore_ascii_case(name))
            .or_else(|| {
                self.aliases
                    .iter()
                    .find(|(a, _)| a.eq_ignore_ascii_case(name))
                    .map(|(_, i)| *i)
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "valid" | "validation" | "dev" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub id: String,
    pub text: String,
    pub label: usize,
    pub split: Split,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum LabelRepr {
    Index(u64),
    Name(String),
}

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    text: String,
    label: LabelRepr,
    split: Split,
}

#[derive(Serialize)]
struct OutRecord<'a> {
    id: &'a str,
    text: &'a str,
    label: &'a str,
    split: Split,
}

/// Per-split class counts with the majority/minority ratio.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitStats {
    pub counts: Vec<usize>,
    pub total: usize,
    /// `max / min` class count; infinite when some class is absent, `None`
    /// for an empty split.
    pub imbalance_ratio: Option<f64>,
}

impl SplitStats {
    fn from_counts(counts: Vec<usize>) -> Self {
        let total = counts.iter().sum();
        let imbalance_ratio = if total == 0 {
            None
        } else {
            let max = *counts.iter().max().expect("non-empty");
            let min = *counts.iter().min().expect("non-empty");
            Some(if min == 0 {
                f64::INFINITY
            } else {
                max as f64 / min as f64
            })
        };
        Self {
            counts,
            total,
            imbalance_ratio,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassDistribution {
    pub labels: Vec<String>,
    pub splits: BTreeMap<Split, SplitStats>,
}

impl ClassDistribution {
    pub fn split(&self, split: Split) -> &SplitStats {
        &self.splits[&split]
    }

    /// Plain-text table with one row per class and a totals row.
    pub fn render(&self) -> String {
        let width = self.labels.iter().map(String::len).max().unwrap_or(5).max(5);
        let mut out = format!("{:<width$}", "Class");
        for s in Split::ALL {
            out.push_str(&format!(" {:>8}", s.to_string()));
        }
        out.push('\n');
        for (c, label) in self.labels.iter().enumerate() {
            out.push_str(&format!("{label:<width$}"));
            for s in Split::ALL {
                out.push_str(&format!(" {:>8}", self.split(s).counts[c]));
            }
            out.push('\n');
        }
        out.push_str(&format!("{:<width$}", "Total"));
        for s in Split::ALL {
            out.push_str(&format!(" {:>8}", self.split(s).total));
        }
        out.push('\n');
        out.push_str(&format!("{:<width$}", "Ratio"));
        for s in Split::ALL {
            let r = match self.split(s).imbalance_ratio {
                None => "-".to_string(),
                Some(r) if r.is_infinite() => "inf".to_string(),
                Some(r) => format!("{r:.2}"),
            };
            out.push_str(&format!(" {r:>8}"));
        }
        out.push('\n');
        out
    }
}

/// A validated collection of examples for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    schema: TaskSchema,
    examples: Vec<Example>,
    counts: BTreeMap<Split, Vec<usize>>,
}

impl Dataset {
    pub fn new(schema: TaskSchema, examples: Vec<Example>) -> Result<Self> {
        for (i, e) in examples.iter().enumerate() {
            if e.text.is_empty() {
                return Err(Error::Validation {
                    line: i + 1,
                    message: format!("example {} has empty text", e.id),
                });
            }
            if e.label >= schema.len() {
                return Err(Error::Validation {
                    line: i + 1,
                    message: format!("label index {} out of range", e.label),
                });
            }
        }
        let counts = count(&schema, &examples);
        Ok(Self {
            schema,
            examples,
            counts,
        })
    }

    pub fn empty(task: Task) -> Self {
        Self::new(task.schema(), Vec::new()).expect("empty dataset is valid")
    }

    pub fn schema(&self) -> &TaskSchema {
        &self.schema
    }

    pub fn task(&self) -> Task {
        self.schema.task
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn split(&self, split: Split) -> Vec<&Example> {
        self.examples.iter().filter(|e| e.split == split).collect()
    }

    pub fn counts(&self, split: Split) -> &[usize] {
        &self.counts[&split]
    }

    /// Recomputes per-split class counts from the examples and compares
    /// them with the stored ones.
    pub fn counts_consistent(&self) -> bool {
        count(&self.schema, &self.examples) == self.counts
    }

    pub fn class_distribution(&self) -> ClassDistribution {
        let splits = Split::ALL
            .iter()
            .map(|&s| {
                let stats = SplitStats::from_counts(self.counts[&s].clone());
                if stats.total > 0 && stats.imbalance_ratio == Some(f64::INFINITY) {
                    log::warn!("{s} split is missing at least one class; imbalance ratio is infinite");
                }
                (s, stats)
            })
            .collect();
        ClassDistribution {
            labels: self.schema.labels.clone(),
            splits,
        }
    }

    /// Optional text preprocessing; ingestion itself keeps text verbatim.
    pub fn preprocess(self, f: impl Fn(&str) -> String) -> Result<Self> {
        let examples = self
            .examples
            .into_iter()
            .map(|e| Example {
                text: f(&e.text),
                ..e
            })
            .collect();
        Self::new(self.schema, examples)
    }

    /// Returns a copy whose training split has been oversampled; validation
    /// and test examples are untouched.
    pub fn with_oversampled_train(&self, target_ratio: f64, seed: u64) -> Result<Self> {
        let train: Vec<Example> = self.split(Split::Train).into_iter().cloned().collect();
        let grown = oversample_minority(&train, self.schema.len(), target_ratio, seed)?;
        let mut examples = grown;
        examples.extend(self.examples.iter().filter(|e| e.split != Split::Train).cloned());
        Self::new(self.schema.clone(), examples)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.examples {
            let rec = OutRecord {
                id: &e.id,
                text: &e.text,
                label: self.schema.name(e.label),
                split: e.split,
            };
            out.push_str(&serde_json::to_string(&rec)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

fn count(schema: &TaskSchema, examples: &[Example]) -> BTreeMap<Split, Vec<usize>> {
    let mut counts: BTreeMap<Split, Vec<usize>> =
        Split::ALL.iter().map(|&s| (s, vec![0; schema.len()])).collect();
    for e in examples {
        counts.get_mut(&e.split).expect("all splits present")[e.label] += 1;
    }
    counts
}

/// Parses JSON-Lines text. Malformed lines and empty texts fail at once;
/// unknown labels are collected and reported together.
pub fn parse_jsonl(reader: impl BufRead, schema: &TaskSchema) -> Result<Dataset> {
    let mut examples = Vec::new();
    let mut bad_lines = Vec::new();
    let mut bad_labels = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if raw.text.is_empty() {
            return Err(Error::Validation {
                line: line_no,
                message: format!("example {} has empty text", raw.id),
            });
        }
        let label = match &raw.label {
            LabelRepr::Index(i) if (*i as usize) < schema.len() => Some(*i as usize),
            LabelRepr::Index(_) => None,
            LabelRepr::Name(n) => schema.index_of(n),
        };
        match label {
            Some(label) => examples.push(Example {
                id: raw.id,
                text: raw.text,
                label,
                split: raw.split,
            }),
            None => {
                bad_lines.push(line_no);
                bad_labels.push(match raw.label {
                    LabelRepr::Index(i) => i.to_string(),
                    LabelRepr::Name(n) => n,
                });
            }
        }
    }
    if !bad_lines.is_empty() {
        return Err(Error::Schema {
            lines: bad_lines,
            labels: bad_labels,
        });
    }
    Dataset::new(schema.clone(), examples)
}

pub fn load_dataset(path: impl AsRef<Path>, schema: &TaskSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(BufReader::new(f), schema)
}

/// Imports a CSV file with a `text,label` header (optional `id` and `split`
/// columns). Rows without a split go to train.
pub fn load_csv(path: impl AsRef<Path>, schema: &TaskSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim().eq_ignore_ascii_case(name));
    let (Some(text_col), Some(label_col)) = (col("text"), col("label")) else {
        return Err(Error::Parse {
            line: 1,
            message: "CSV header must contain text and label".into(),
        });
    };
    let (id_col, split_col) = (col("id"), col("split"));
    let mut examples = Vec::new();
    let mut bad_lines = Vec::new();
    let mut bad_labels = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row?;
        let field = |c: usize| row.get(c).unwrap_or("").to_string();
        let text = field(text_col);
        if text.is_empty() {
            return Err(Error::Validation {
                line,
                message: "empty text".into(),
            });
        }
        let raw_label = field(label_col);
        let label = raw_label
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&i| i < schema.len())
            .or_else(|| schema.index_of(&raw_label));
        let Some(label) = label else {
            bad_lines.push(line);
            bad_labels.push(raw_label);
            continue;
        };
        let split = match split_col.map(field).filter(|s| !s.is_empty()) {
            Some(s) => s.parse()?,
            None => Split::Train,
        };
        examples.push(Example {
            id: id_col.map(field).unwrap_or_else(|| format!("row-{}", i + 1)),
            text,
            label,
            split,
        });
    }
    if !bad_lines.is_empty() {
        return Err(Error::Schema {
            lines: bad_lines,
            labels: bad_labels,
        });
    }
    Dataset::new(schema.clone(), examples)
}

/// Assigns each item to a bucket of `fractions`, class by class.
///
/// Within each class the bucket sizes are the floors of `n · fraction`, with
/// the leftover items handed to the buckets with the largest fractional
/// remainders (ties go to the earlier bucket). Which items land where is a
/// seeded shuffle. A class with fewer items than buckets goes entirely to
/// bucket 0.
pub fn stratified_split(labels: &[usize], fractions: &[f64], seed: u64) -> Result<Vec<usize>> {
    if fractions.is_empty() || fractions.iter().any(|&f| !(f > 0.0)) {
        return Err(Error::Config("split fractions must be positive".into()));
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions sum to {sum}, not 1")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0; labels.len()];
    for (class, mut members) in by_class {
        members.shuffle(&mut rng);
        let n = members.len();
        if n < fractions.len() {
            log::warn!(
                "class {class} has {n} examples for {} splits; all go to the first split",
                fractions.len()
            );
            continue;
        }
        let sizes = largest_remainder(n, fractions);
        let mut cursor = 0;
        for (bucket, size) in sizes.into_iter().enumerate() {
            for &m in &members[cursor..cursor + size] {
                assignment[m] = bucket;
            }
            cursor += size;
        }
    }
    Ok(assignment)
}

fn largest_remainder(n: usize, fractions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    sizes
}

/// Re-splits a dataset into train/valid/test with [`stratified_split`].
pub fn resplit(dataset: &Dataset, fractions: [f64; 3], seed: u64) -> Result<Dataset> {
    let labels: Vec<usize> = dataset.examples().iter().map(|e| e.label).collect();
    let buckets = stratified_split(&labels, &fractions, seed)?;
    let examples = dataset
        .examples()
        .iter()
        .zip(buckets)
        .map(|(e, b)| Example {
            split: Split::ALL[b],
            ..e.clone()
        })
        .collect();
    Dataset::new(dataset.schema().clone(), examples)
}

/// One padded batch ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub tokens: TokenBatch,
    pub labels: Vec<usize>,
    pub example_ids: Vec<String>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Encodes and right-pads examples into batches of `batch_size` (the last
/// one may be smaller). With `shuffle`, order is a seeded permutation.
pub fn make_batches(
    examples: &[&Example],
    tokenizer: &ByteTokenizer,
    batch_size: usize,
    shuffle: bool,
    seed: u64,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(batch_size)
        .map(|chunk| {
            let seqs: Vec<Vec<u32>> = chunk
                .iter()
                .map(|&i| tokenizer.encode(&examples[i].text))
                .collect();
            Ok(Batch {
                tokens: TokenBatch::from_sequences(&seqs, tokenizer.pad_id)?,
                labels: chunk.iter().map(|&i| examples[i].label).collect(),
                example_ids: chunk.iter().map(|&i| examples[i].id.clone()).collect(),
            })
        })
        .collect()
}

/// Duplicates minority-class examples (sampled with replacement) until the
/// max/min class ratio is at most `target_ratio`. Originals are kept in
/// order; duplicates are appended with a `#dupN` id suffix.
pub fn oversample_minority(
    examples: &[Example],
    n_classes: usize,
    target_ratio: f64,
    seed: u64,
) -> Result<Vec<Example>> {
    if !(target_ratio >= 1.0) {
        return Err(Error::Config(format!(
            "target ratio must be at least 1, got {target_ratio}"
        )));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, e) in examples.iter().enumerate() {
        members
            .get_mut(e.label)
            .ok_or_else(|| Error::Index(format!("label {} >= {n_classes}", e.label)))?
            .push(i);
    }
    let max = members.iter().map(Vec::len).max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = examples.to_vec();
    let mut dup = 0usize;
    for (class, idx) in members.iter().enumerate() {
        if idx.is_empty() {
            if max > 0 {
                log::warn!("class {class} has no training examples to oversample");
            }
            continue;
        }
        let need = required_count(max, target_ratio);
        for _ in idx.len()..need {
            let src = &examples[idx[rng.random_range(0..idx.len())]];
            dup += 1;
            out.push(Example {
                id: format!("{}#dup{dup}", src.id),
                ..src.clone()
            });
        }
    }
    Ok(out)
}

/// Smallest count `m` with `max / m <= ratio`.
fn required_count(max: usize, ratio: f64) -> usize {
    let mut m = ((max as f64 / ratio).ceil() as usize).max(1);
    while m > 1 && max as f64 / (m - 1) as f64 <= ratio {
        m -= 1;
    }
    while (max as f64 / m as f64) > ratio {
        m += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn ex(id: &str, label: usize, split: Split) -> Example {
        Example {
            id: id.into(),
            text: format!("पाठ {id}"),
            label,
            split,
        }
    }

    #[test]
    fn empty_input_gives_empty_dataset() {
        let d = parse_jsonl(Cursor::new(""), &Task::Detection.schema()).unwrap();
        assert!(d.is_empty());
        assert_eq!(d.counts(Split::Train), &[0, 0]);
        assert_eq!(d.class_distribution().split(Split::Train).imbalance_ratio, None);
    }

    #[test]
    fn labels_by_name_or_index() {
        let text = concat!(
            r#"{"id":"a","text":"क","label":"Hate","split":"train"}"#,
            "\n",
            r#"{"id":"b","text":"ख","label":0,"split":"test"}"#,
            "\n"
        );
        let d = parse_jsonl(Cursor::new(text), &Task::Detection.schema()).unwrap();
        assert_eq!(d.examples()[0].label, 1);
        assert_eq!(d.examples()[1].label, 0);
        assert_eq!(d.examples()[1].split, Split::Test);
    }

    #[test]
    fn unknown_labels_are_collected_with_lines() {
        let text = [
            r#"{"id":"a","text":"क","label":"Community","split":"train"}"#,
            r#"{"id":"b","text":"ख","label":"Communty","split":"train"}"#,
            r#"{"id":"c","text":"ग","label":7,"split":"train"}"#,
        ]
        .join("\n");
        match parse_jsonl(Cursor::new(text), &Task::Target.schema()) {
            Err(Error::Schema { lines, labels }) => {
                assert_eq!(lines, vec![2, 3]);
                assert_eq!(labels, vec!["Communty".to_string(), "7".to_string()]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let text = "{\"id\":\"a\",\"text\":\"क\",\"label\":1,\"split\":\"train\"}\n{oops\n";
        assert!(matches!(
            parse_jsonl(Cursor::new(text), &Task::Detection.schema()),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn empty_text_is_rejected() {
        let text = r#"{"id":"a","text":"","label":1,"split":"train"}"#;
        assert!(matches!(
            parse_jsonl(Cursor::new(text), &Task::Detection.schema()),
            Err(Error::Validation { line: 1, .. })
        ));
    }

    #[test]
    fn jsonl_round_trip() {
        let d = Dataset::new(
            Task::Target.schema(),
            vec![ex("1", 2, Split::Train), ex("2", 0, Split::Valid), ex("3", 1, Split::Test)],
        )
        .unwrap();
        let back = parse_jsonl(Cursor::new(d.to_jsonl().unwrap()), &Task::Target.schema()).unwrap();
        assert_eq!(back, d);
        assert!(back.counts_consistent());
    }

    #[test]
    fn single_class_split_has_infinite_ratio() {
        let d = Dataset::new(
            Task::Detection.schema(),
            vec![ex("1", 0, Split::Train), ex("2", 0, Split::Train)],
        )
        .unwrap();
        let r = d.class_distribution().split(Split::Train).imbalance_ratio;
        assert_eq!(r, Some(f64::INFINITY));
    }

    #[test]
    fn single_fraction_keeps_everything_together() {
        let labels = vec![0, 1, 1, 0, 2];
        assert_eq!(stratified_split(&labels, &[1.0], 3).unwrap(), vec![0; 5]);
    }

    #[test]
    fn exact_division() {
        let labels = vec![0; 100];
        let a = stratified_split(&labels, &[0.8, 0.1, 0.1], 11).unwrap();
        let sizes: Vec<usize> = (0..3).map(|b| a.iter().filter(|&&x| x == b).count()).collect();
        assert_eq!(sizes, vec![80, 10, 10]);
    }

    #[test]
    fn fractions_must_sum_to_one() {
        assert!(stratified_split(&[0, 1], &[0.5, 0.6], 0).is_err());
        assert!(stratified_split(&[0, 1], &[1.0, 0.0], 0).is_err());
    }

    #[test]
    fn tiny_class_falls_back_to_first_split() {
        let labels = vec![0, 0, 0, 0, 0, 0, 1];
        let a = stratified_split(&labels, &[0.5, 0.25, 0.25], 5).unwrap();
        assert_eq!(a[6], 0);
    }

    #[test]
    fn largest_remainder_prefers_biggest_fraction_part() {
        // 7 · (0.5, 0.3, 0.2) = 3.5, 2.1, 1.4 → floors 3,2,1 + one to bucket 0
        assert_eq!(largest_remainder(7, &[0.5, 0.3, 0.2]), vec![4, 2, 1]);
    }

    #[test]
    fn batch_sizes_and_order() {
        let exs: Vec<Example> = (0..10).map(|i| ex(&i.to_string(), i % 2, Split::Train)).collect();
        let refs: Vec<&Example> = exs.iter().collect();
        let tok = ByteTokenizer::default();
        let batches = make_batches(&refs, &tok, 4, false, 0).unwrap();
        assert_eq!(batches.iter().map(Batch::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let ids: Vec<&str> = batches.iter().flat_map(|b| b.example_ids.iter().map(String::as_str)).collect();
        assert_eq!(ids, vec!["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"]);

        let s1 = make_batches(&refs, &tok, 4, true, 42).unwrap();
        let s2 = make_batches(&refs, &tok, 4, true, 42).unwrap();
        assert_eq!(s1, s2);
        assert_ne!(s1[0].example_ids, batches[0].example_ids);
    }

    #[test]
    fn batches_pad_on_the_right() {
        let mut short = ex("s", 0, Split::Train);
        short.text = "a".into();
        let mut long = ex("l", 1, Split::Train);
        long.text = "abcd".into();
        let tok = ByteTokenizer::default();
        let b = &make_batches(&[&short, &long], &tok, 2, false, 0).unwrap()[0];
        assert_eq!(b.tokens.seq_len, 6);
        assert_eq!(b.tokens.row(0), &[1, 100, 2]);
        assert_eq!(&b.tokens.ids[3..6], &[0, 0, 0]);
        assert_eq!(b.tokens.mask()[..6], [true, true, true, false, false, false]);
    }

    fn class_counts(exs: &[Example], k: usize) -> Vec<usize> {
        let mut c = vec![0; k];
        for e in exs {
            c[e.label] += 1;
        }
        c
    }

    #[test]
    fn oversampling_arithmetic() {
        let mut exs: Vec<Example> = (0..90).map(|i| ex(&format!("m{i}"), 0, Split::Train)).collect();
        exs.extend((0..10).map(|i| ex(&format!("n{i}"), 1, Split::Train)));
        let to_one = oversample_minority(&exs, 2, 1.0, 1).unwrap();
        assert_eq!(class_counts(&to_one, 2), vec![90, 90]);
        let to_three = oversample_minority(&exs, 2, 3.0, 1).unwrap();
        assert_eq!(class_counts(&to_three, 2), vec![90, 30]);
        assert_eq!(&to_three[..100], &exs[..]);
    }

    #[test]
    fn balanced_split_is_unchanged() {
        let exs: Vec<Example> = (0..6).map(|i| ex(&i.to_string(), i % 3, Split::Train)).collect();
        assert_eq!(oversample_minority(&exs, 3, 1.0, 9).unwrap(), exs);
        assert!(oversample_minority(&exs, 3, 0.5, 9).is_err());
    }

    #[test]
    fn oversampling_leaves_eval_splits_alone() {
        let mut exs: Vec<Example> = (0..20).map(|i| ex(&format!("t{i}"), 0, Split::Train)).collect();
        exs.push(ex("t-min", 1, Split::Train));
        exs.push(ex("v0", 0, Split::Valid));
        exs.push(ex("x0", 1, Split::Test));
        let d = Dataset::new(Task::Detection.schema(), exs).unwrap();
        let grown = d.with_oversampled_train(2.0, 4).unwrap();
        assert_eq!(grown.counts(Split::Train), &[20, 10]);
        assert_eq!(grown.split(Split::Valid), d.split(Split::Valid));
        assert_eq!(grown.split(Split::Test), d.split(Split::Test));
    }

    #[test]
    fn csv_shim() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        fs::write(&path, "text,label\nनमस्ते,Hate\nhello,Not Hate\n").unwrap();
        let d = load_csv(&path, &Task::Detection.schema()).unwrap();
        assert_eq!(d.counts(Split::Train), &[1, 1]);
        assert_eq!(d.examples()[0].id, "row-1");
    }
}
