//! Synthetic Devanagari corpora with controllable class signal.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Example, Split, Task};
use crate::error::{Error, Result};

const CONSONANTS: &[char] = &[
    'क', 'ख', 'ग', 'घ', 'च', 'छ', 'ज', 'झ', 'ट', 'ठ', 'ड', 'ढ', 'ण', 'त', 'थ', 'द', 'ध', 'न', 'प',
    'फ', 'ब', 'भ', 'म', 'य', 'र', 'ल', 'व', 'श', 'ष', 'स', 'ह',
];
const VOWEL_SIGNS: &[char] = &['ा', 'ि', 'ी', 'ु', 'ू', 'े', 'ै', 'ो', 'ौ'];
const FILLER_VOCAB: usize = 256;

/// Class counts per split, indexed by class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

/// Recipe for a synthetic corpus.
///
/// Each example is a run of filler words. An example of class `c` carries
/// the class-`c` marker word with probability `signal`, and the marker of
/// every other class with probability `leak`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub task: Task,
    pub counts: SplitCounts,
    pub seed: u64,
    pub signal: f64,
    pub leak: f64,
    pub min_words: usize,
    pub max_words: usize,
}

impl FixtureSpec {
    pub fn new(task: Task, counts: SplitCounts, seed: u64) -> Self {
        Self {
            task,
            counts,
            seed,
            signal: 1.0,
            leak: 0.0,
            min_words: 4,
            max_words: 8,
        }
    }

    /// Split sizes of the hate speech detection corpus.
    pub fn detection_corpus(seed: u64) -> Self {
        Self::new(
            Task::Detection,
            SplitCounts {
                train: vec![16805, 2214],
                valid: vec![3602, 474],
                test: vec![3601, 475],
            },
            seed,
        )
    }

    /// Split sizes of the target identification corpus.
    pub fn target_corpus(seed: u64) -> Self {
        Self::new(
            Task::Target,
            SplitCounts {
                train: vec![1074, 856, 284],
                valid: vec![230, 183, 61],
                test: vec![230, 184, 61],
            },
            seed,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.task.n_classes();
        for s in Split::ALL {
            if self.counts.get(s).len() != k {
                return Err(Error::Config(format!(
                    "{s} counts need {k} entries for the {} task",
                    self.task
                )));
            }
        }
        for (name, p) in [("signal", self.signal), ("leak", self.leak)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return Err(Error::Config("need 1 <= min_words <= max_words".into()));
        }
        Ok(())
    }
}

/// Marker word for each class of a task.
pub fn class_markers(task: Task) -> &'static [&'static str] {
    match task {
        Task::Detection => &["सद्भाव", "घृणा"],
        Task::Target => &["व्यक्ति", "संस्था", "समुदाय"],
    }
}

fn filler_vocabulary(rng: &mut ChaCha8Rng, markers: &[&str]) -> Vec<String> {
    let mut vocab = Vec::with_capacity(FILLER_VOCAB);
    while vocab.len() < FILLER_VOCAB {
        let syllables = rng.random_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push(CONSONANTS[rng.random_range(0..CONSONANTS.len())]);
            if rng.random_bool(0.6) {
                w.push(VOWEL_SIGNS[rng.random_range(0..VOWEL_SIGNS.len())]);
            }
        }
        if !markers.contains(&w.as_str()) && !vocab.contains(&w) {
            vocab.push(w);
        }
    }
    vocab
}

pub fn generate_fixture(spec: &FixtureSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let markers = class_markers(spec.task);
    let vocab = filler_vocabulary(&mut rng, markers);
    let prefix = match spec.task {
        Task::Detection => "det",
        Task::Target => "tgt",
    };
    let mut examples = Vec::new();
    for split in Split::ALL {
        let mut labels: Vec<usize> = spec
            .counts
            .get(split)
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
            .collect();
        labels.shuffle(&mut rng);
        for (i, label) in labels.into_iter().enumerate() {
            let n_words = rng.random_range(spec.min_words..=spec.max_words);
            let mut words: Vec<&str> = (0..n_words)
                .map(|_| vocab[rng.random_range(0..vocab.len())].as_str())
                .collect();
            for (c, marker) in markers.iter().enumerate() {
                let p = if c == label { spec.signal } else { spec.leak };
                if rng.random_bool(p) {
                    let at = rng.random_range(0..=words.len());
                    words.insert(at, marker);
                }
            }
            examples.push(Example {
                id: format!("{prefix}-{split}-{:06}", i + 1),
                text: words.join(" "),
                label,
                split,
            });
        }
    }
    Dataset::new(spec.task.schema(), examples)
}

pub fn write_fixture(spec: &FixtureSpec, path: impl AsRef<Path>) -> Result<Dataset> {
    let d = generate_fixture(spec)?;
    d.write_jsonl(path)?;
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_presets_have_expected_totals() {
        let d = FixtureSpec::detection_corpus(0);
        let sums: Vec<usize> = Split::ALL.iter().map(|&s| d.counts.get(s).iter().sum()).collect();
        assert_eq!(sums, vec![19019, 4076, 4076]);
        let t = FixtureSpec::target_corpus(0);
        let sums: Vec<usize> = Split::ALL.iter().map(|&s| t.counts.get(s).iter().sum()).collect();
        assert_eq!(sums, vec![2214, 474, 475]);
    }

    #[test]
    fn fixture_is_deterministic_and_counts_match() {
        let spec = FixtureSpec::new(
            Task::Target,
            SplitCounts {
                train: vec![5, 4, 3],
                valid: vec![2, 1, 1],
                test: vec![1, 1, 1],
            },
            7,
        );
        let a = generate_fixture(&spec).unwrap();
        let b = generate_fixture(&spec).unwrap();
        assert_eq!(a.to_jsonl().unwrap(), b.to_jsonl().unwrap());
        assert_eq!(a.counts(Split::Train), &[5, 4, 3]);
        assert_eq!(a.counts(Split::Test), &[1, 1, 1]);
        for e in a.examples() {
            assert!(e.text.contains(class_markers(Task::Target)[e.label]));
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let mut spec = FixtureSpec::detection_corpus(0);
        spec.signal = 1.5;
        assert!(spec.validate().is_err());
        let mut spec = FixtureSpec::detection_corpus(0);
        spec.counts.train = vec![1, 2, 3];
        assert!(spec.validate().is_err());
    }
}
