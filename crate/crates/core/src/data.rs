//! Event sequences, corpora, relevance judgments and their text formats.
//!
//! Corpus files hold one JSON record per line:
//!
//! ```text
//! {"id":"a","horizon":3.0,"events":[[1.0,0],[2.0,1]]}
//! ```
//!
//! Judgment files hold one tab-separated triple per line:
//! `<query_id>\t<corpus_id>\t<+1|-1>`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("sequence {id}: unsorted times at event {index}")]
    UnsortedTimes { id: String, index: usize },
    #[error("sequence {id}: negative time at event {index}")]
    NegativeTime { id: String, index: usize },
    #[error("sequence {id}: non-finite time at event {index}")]
    NonFinite { id: String, index: usize },
    #[error("sequence {id}: mark {mark} out of range (mark count {mark_count})")]
    MarkOutOfRange {
        id: String,
        mark: usize,
        mark_count: usize,
    },
    #[error("sequence {id}: event at {time} after horizon {horizon}")]
    AfterHorizon { id: String, time: f64, horizon: f64 },
    #[error("sequence {id}: empty sequence")]
    EmptySequence { id: String },
    #[error("duplicate id {0}")]
    DuplicateId(String),
    #[error("unknown id {0}")]
    UnknownId(String),
    #[error("judgment for ({query}, {corpus}) given twice")]
    DuplicateJudgment { query: String, corpus: String },
    #[error("fractions sum to {0}, expected 1")]
    BadFractions(f64),
    #[error("cannot split an empty query set")]
    EmptyQuerySet,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub time: f64,
    pub mark: usize,
}

impl Event {
    pub fn new(time: f64, mark: usize) -> Self {
        Self { time, mark }
    }
}

/// An ordered list of marked events observed on `(0, horizon]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EventSequence {
    pub id: String,
    pub events: Vec<Event>,
    pub horizon: f64,
}

impl EventSequence {
    pub fn new(id: impl Into<String>, events: Vec<Event>, horizon: f64) -> Self {
        Self {
            id: id.into(),
            events,
            horizon,
        }
    }

    /// Builds a sequence from parallel time/mark slices.
    pub fn from_parts(id: impl Into<String>, times: &[f64], marks: &[usize], horizon: f64) -> Self {
        assert_eq!(times.len(), marks.len(), "times and marks differ in length");
        let events = times
            .iter()
            .zip(marks)
            .map(|(&time, &mark)| Event { time, mark })
            .collect();
        Self::new(id, events, horizon)
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.events.iter().map(|e| e.time).collect()
    }

    pub fn marks(&self) -> Vec<usize> {
        self.events.iter().map(|e| e.mark).collect()
    }

    pub fn last_time(&self) -> f64 {
        self.events.last().map_or(0.0, |e| e.time)
    }

    /// Checks ordering, range and horizon invariants.
    pub fn validate(&self, mark_count: usize) -> Result<(), DataError> {
        let id = || self.id.clone();
        let mut prev = f64::NEG_INFINITY;
        for (index, e) in self.events.iter().enumerate() {
            if !e.time.is_finite() {
                return Err(DataError::NonFinite { id: id(), index });
            }
            if e.time < 0.0 {
                return Err(DataError::NegativeTime { id: id(), index });
            }
            if e.time <= prev {
                return Err(DataError::UnsortedTimes { id: id(), index });
            }
            if e.mark >= mark_count {
                return Err(DataError::MarkOutOfRange {
                    id: id(),
                    mark: e.mark,
                    mark_count,
                });
            }
            if e.time > self.horizon {
                return Err(DataError::AfterHorizon {
                    id: id(),
                    time: e.time,
                    horizon: self.horizon,
                });
            }
            prev = e.time;
        }
        Ok(())
    }

    /// Like [`validate`](Self::validate), additionally rejecting empty sequences.
    pub fn validate_for_scoring(&self, mark_count: usize) -> Result<(), DataError> {
        if self.events.is_empty() {
            return Err(DataError::EmptySequence { id: self.id.clone() });
        }
        self.validate(mark_count)
    }
}

/// Gaps between consecutive events; the first gap is measured from time 0.
pub fn inter_arrival_times(seq: &EventSequence) -> Vec<f64> {
    let mut prev = 0.0;
    seq.events
        .iter()
        .map(|e| {
            let gap = e.time - prev;
            prev = e.time;
            gap
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    horizon: f64,
    events: Vec<(f64, usize)>,
}

impl From<&EventSequence> for Record {
    fn from(s: &EventSequence) -> Self {
        Record {
            id: s.id.clone(),
            horizon: s.horizon,
            events: s.events.iter().map(|e| (e.time, e.mark)).collect(),
        }
    }
}

/// An id-keyed set of sequences sharing one mark alphabet. Iteration follows
/// insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    mark_count: usize,
    sequences: Vec<EventSequence>,
    index: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(mark_count: usize) -> Self {
        Self {
            mark_count,
            sequences: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn from_sequences(
        mark_count: usize,
        sequences: impl IntoIterator<Item = EventSequence>,
    ) -> Result<Self, DataError> {
        let mut c = Self::new(mark_count);
        for s in sequences {
            c.insert(s)?;
        }
        Ok(c)
    }

    pub fn mark_count(&self) -> usize {
        self.mark_count
    }

    pub fn insert(&mut self, seq: EventSequence) -> Result<(), DataError> {
        seq.validate(self.mark_count)?;
        if self.index.contains_key(&seq.id) {
            return Err(DataError::DuplicateId(seq.id));
        }
        self.index.insert(seq.id.clone(), self.sequences.len());
        self.sequences.push(seq);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&EventSequence> {
        self.index.get(id).map(|&i| &self.sequences[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, EventSequence> {
        self.sequences.iter()
    }

    pub fn sequences(&self) -> &[EventSequence] {
        &self.sequences
    }

    pub fn ids(&self) -> Vec<String> {
        self.sequences.iter().map(|s| s.id.clone()).collect()
    }

    pub fn max_horizon(&self) -> f64 {
        self.sequences.iter().map(|s| s.horizon).fold(0.0, f64::max)
    }

    pub fn max_len(&self) -> usize {
        self.sequences.iter().map(EventSequence::len).max().unwrap_or(0)
    }

    /// Divides every time and horizon by `scale`.
    pub fn rescale_times(&mut self, scale: f64) {
        assert!(scale > 0.0, "time scale must be positive");
        for s in &mut self.sequences {
            s.horizon /= scale;
            for e in &mut s.events {
                e.time /= scale;
            }
        }
    }

    /// Divides all times by the largest horizon; returns the divisor used.
    pub fn normalize_by_max_horizon(&mut self) -> f64 {
        let scale = self.max_horizon();
        if scale > 0.0 {
            self.rescale_times(scale);
        }
        scale
    }
}

impl<'a> IntoIterator for &'a Corpus {
    type Item = &'a EventSequence;
    type IntoIter = std::slice::Iter<'a, EventSequence>;

    fn into_iter(self) -> Self::IntoIter {
        self.sequences.iter()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Divide all times by the largest horizon in the file.
    pub normalize_horizon: bool,
}

pub fn load_corpus(path: impl AsRef<Path>, mark_count: usize) -> Result<Corpus, DataError> {
    load_corpus_with(path, mark_count, LoadOptions::default())
}

pub fn load_corpus_with(
    path: impl AsRef<Path>,
    mark_count: usize,
    options: LoadOptions,
) -> Result<Corpus, DataError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|source| io_err(path, source))?;
    let mut corpus = parse_corpus(BufReader::new(file), mark_count).map_err(|e| match e {
        DataError::Io { source, .. } => io_err(path, source),
        other => other,
    })?;
    if options.normalize_horizon {
        corpus.normalize_by_max_horizon();
    }
    Ok(corpus)
}

/// Parses the line-delimited corpus format from any reader.
pub fn parse_corpus(reader: impl BufRead, mark_count: usize) -> Result<Corpus, DataError> {
    let mut corpus = Corpus::new(mark_count);
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| DataError::Io {
            path: String::from("<reader>"),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        let events = rec
            .events
            .into_iter()
            .map(|(time, mark)| Event { time, mark })
            .collect();
        corpus.insert(EventSequence::new(rec.id, events, rec.horizon))?;
    }
    Ok(corpus)
}

pub fn write_corpus(mut w: impl Write, corpus: &Corpus) -> std::io::Result<()> {
    for s in corpus {
        let line = serde_json::to_string(&Record::from(s)).map_err(std::io::Error::other)?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn save_corpus(path: impl AsRef<Path>, corpus: &Corpus) -> Result<(), DataError> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|source| io_err(path, source))?;
    let mut w = BufWriter::new(file);
    write_corpus(&mut w, corpus)
        .and_then(|_| w.flush())
        .map_err(|source| io_err(path, source))
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Relevant,
    NonRelevant,
}

impl Label {
    pub fn sign(self) -> i8 {
        match self {
            Label::Relevant => 1,
            Label::NonRelevant => -1,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Relevant => "+1",
            Label::NonRelevant => "-1",
        })
    }
}

/// Binary relevance labels per (query, corpus) pair.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RelevanceJudgments {
    labels: BTreeMap<String, BTreeMap<String, Label>>,
}

impl RelevanceJudgments {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query: &str, corpus: &str, label: Label) -> Result<(), DataError> {
        let row = self.labels.entry(query.to_owned()).or_default();
        if row.insert(corpus.to_owned(), label).is_some() {
            return Err(DataError::DuplicateJudgment {
                query: query.to_owned(),
                corpus: corpus.to_owned(),
            });
        }
        Ok(())
    }

    pub fn label(&self, query: &str, corpus: &str) -> Option<Label> {
        self.labels.get(query).and_then(|r| r.get(corpus)).copied()
    }

    /// Unjudged pairs count as non-relevant.
    pub fn is_relevant(&self, query: &str, corpus: &str) -> bool {
        self.label(query, corpus) == Some(Label::Relevant)
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.labels.keys().map(String::as_str)
    }

    fn with_label(&self, query: &str, want: Label) -> Vec<&str> {
        self.labels
            .get(query)
            .map(|r| {
                r.iter()
                    .filter(|(_, &l)| l == want)
                    .map(|(c, _)| c.as_str())
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn positives(&self, query: &str) -> Vec<&str> {
        self.with_label(query, Label::Relevant)
    }

    pub fn negatives(&self, query: &str) -> Vec<&str> {
        self.with_label(query, Label::NonRelevant)
    }

    pub fn len(&self) -> usize {
        self.labels.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every referenced id must exist in the given query and corpus sets.
    pub fn validate(&self, queries: &Corpus, corpus: &Corpus) -> Result<(), DataError> {
        for (q, row) in &self.labels {
            if !queries.contains(q) {
                return Err(DataError::UnknownId(q.clone()));
            }
            for c in row.keys() {
                if !corpus.contains(c) {
                    return Err(DataError::UnknownId(c.clone()));
                }
            }
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, Label)> {
        self.labels.iter().flat_map(|(q, row)| {
            row.iter()
                .map(move |(c, &l)| (q.as_str(), c.as_str(), l))
        })
    }
}

pub fn parse_judgments(reader: impl BufRead) -> Result<RelevanceJudgments, DataError> {
    let mut j = RelevanceJudgments::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| DataError::Io {
            path: String::from("<reader>"),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (Some(q), Some(c), Some(l), None) = (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(DataError::Parse {
                line: i + 1,
                message: String::from("expected three tab-separated fields"),
            });
        };
        let label = match l.trim() {
            "+1" | "1" => Label::Relevant,
            "-1" => Label::NonRelevant,
            other => {
                return Err(DataError::Parse {
                    line: i + 1,
                    message: format!("bad label {other:?}"),
                })
            }
        };
        j.insert(q, c, label)?;
    }
    Ok(j)
}

pub fn load_judgments(path: impl AsRef<Path>) -> Result<RelevanceJudgments, DataError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|source| io_err(path, source))?;
    parse_judgments(BufReader::new(file))
}

pub fn save_judgments(path: impl AsRef<Path>, j: &RelevanceJudgments) -> Result<(), DataError> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|source| io_err(path, source))?;
    let mut w = BufWriter::new(file);
    let res = j
        .iter()
        .try_for_each(|(q, c, l)| writeln!(w, "{q}\t{c}\t{l}"))
        .and_then(|_| w.flush());
    res.map_err(|source| io_err(path, source))
}

/// Train/validation/test partition of query ids.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
    pub fractions: (f64, f64, f64),
}

pub const DEFAULT_SPLIT: (f64, f64, f64) = (0.5, 0.1, 0.4);

/// Seeded shuffle, then floor-sized train and validation blocks; the
/// remainder goes to test.
pub fn split_queries(
    query_ids: &[String],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplit, DataError> {
    let total = fractions.0 + fractions.1 + fractions.2;
    if (total - 1.0).abs() > 1e-9 || fractions.0 < 0.0 || fractions.1 < 0.0 || fractions.2 < 0.0 {
        return Err(DataError::BadFractions(total));
    }
    if query_ids.is_empty() {
        return Err(DataError::EmptyQuerySet);
    }
    let n = query_ids.len();
    let mut ids = query_ids.to_vec();
    ids.shuffle(&mut seed::rng(seed));
    let n_train = (n as f64 * fractions.0 + 1e-9).floor() as usize;
    let n_valid = ((n as f64 * fractions.1 + 1e-9).floor() as usize).min(n - n_train);
    let test = ids.split_off(n_train + n_valid);
    let valid = ids.split_off(n_train);
    Ok(DatasetSplit {
        train: ids,
        valid,
        test,
        fractions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(times: &[f64], marks: &[usize]) -> EventSequence {
        EventSequence::from_parts("s", times, marks, 10.0)
    }

    #[test]
    fn loads_single_record() {
        let text = r#"{"id":"a","horizon":3.0,"events":[[1.0,0],[2.0,1]]}"#;
        let c = parse_corpus(text.as_bytes(), 2).unwrap();
        assert_eq!(c.len(), 1);
        let a = c.get("a").unwrap();
        assert_eq!(a.events, vec![Event::new(1.0, 0), Event::new(2.0, 1)]);
        assert_eq!(a.horizon, 3.0);
    }

    #[test]
    fn rejects_unsorted_times() {
        let text = r#"{"id":"a","horizon":3.0,"events":[[2.0,0],[1.0,1]]}"#;
        let err = parse_corpus(text.as_bytes(), 2).unwrap_err();
        assert!(matches!(err, DataError::UnsortedTimes { index: 1, .. }), "{err}");
        assert!(err.to_string().contains("unsorted times"));
    }

    #[test]
    fn rejects_duplicate_timestamps_and_ids() {
        let text = r#"{"id":"a","horizon":3.0,"events":[[1.0,0],[1.0,1]]}"#;
        assert!(matches!(
            parse_corpus(text.as_bytes(), 2),
            Err(DataError::UnsortedTimes { .. })
        ));
        let text = "{\"id\":\"a\",\"horizon\":3.0,\"events\":[]}\n{\"id\":\"a\",\"horizon\":1.0,\"events\":[]}";
        assert!(matches!(
            parse_corpus(text.as_bytes(), 2),
            Err(DataError::DuplicateId(_))
        ));
    }

    #[test]
    fn rejects_mark_out_of_range_and_reports_line() {
        let text = r#"{"id":"a","horizon":3.0,"events":[[1.0,2]]}"#;
        assert!(matches!(
            parse_corpus(text.as_bytes(), 2),
            Err(DataError::MarkOutOfRange { mark: 2, .. })
        ));
        let text = "{\"id\":\"a\",\"horizon\":3.0,\"events\":[]}\nnot json";
        assert!(matches!(
            parse_corpus(text.as_bytes(), 2),
            Err(DataError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn empty_input_is_empty_corpus() {
        let c = parse_corpus("".as_bytes(), 3).unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn save_load_is_byte_identical() {
        let text = "{\"id\":\"a\",\"horizon\":3.0,\"events\":[[1.0,0],[2.5,1]]}\n{\"id\":\"b\",\"horizon\":0.75,\"events\":[[0.1,1]]}\n";
        let c = parse_corpus(text.as_bytes(), 2).unwrap();
        let mut out = Vec::new();
        write_corpus(&mut out, &c).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), text);
    }

    #[test]
    fn normalization_divides_by_max_horizon() {
        let text = "{\"id\":\"a\",\"horizon\":4.0,\"events\":[[1.0,0],[2.0,1]]}\n{\"id\":\"b\",\"horizon\":2.0,\"events\":[[1.0,1]]}";
        let mut c = parse_corpus(text.as_bytes(), 2).unwrap();
        assert_eq!(c.normalize_by_max_horizon(), 4.0);
        assert_eq!(c.get("a").unwrap().times(), vec![0.25, 0.5]);
        assert_eq!(c.get("b").unwrap().horizon, 0.5);
    }

    #[test]
    fn gaps_start_from_zero() {
        assert_eq!(
            inter_arrival_times(&seq(&[1.0, 2.5, 4.0], &[0, 0, 0])),
            vec![1.0, 1.5, 1.5]
        );
        assert_eq!(inter_arrival_times(&seq(&[3.0], &[0])), vec![3.0]);
    }

    #[test]
    fn judgments_parse_and_partition() {
        let text = "q\ta\t+1\nq\tb\t-1\nq\tc\t-1\n";
        let j = parse_judgments(text.as_bytes()).unwrap();
        assert_eq!(j.positives("q"), vec!["a"]);
        assert_eq!(j.negatives("q"), vec!["b", "c"]);
        assert!(j.is_relevant("q", "a"));
        assert!(!j.is_relevant("q", "zzz"));
        assert!(parse_judgments("q\ta\t0\n".as_bytes()).is_err());
        assert!(parse_judgments("q\ta\n".as_bytes()).is_err());
    }

    #[test]
    fn judgments_reference_known_ids() {
        let q = Corpus::from_sequences(2, [seq(&[1.0], &[0])]).unwrap();
        let c = Corpus::from_sequences(2, [EventSequence::from_parts("c", &[1.0], &[1], 2.0)]).unwrap();
        let mut j = RelevanceJudgments::new();
        j.insert("s", "c", Label::Relevant).unwrap();
        assert!(j.validate(&q, &c).is_ok());
        j.insert("s", "missing", Label::NonRelevant).unwrap();
        assert!(matches!(j.validate(&q, &c), Err(DataError::UnknownId(_))));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ids: Vec<String> = (0..10).map(|i| format!("q{i}")).collect();
        let a = split_queries(&ids, DEFAULT_SPLIT, 7).unwrap();
        assert_eq!((a.train.len(), a.valid.len(), a.test.len()), (5, 1, 4));
        assert_eq!(a, split_queries(&ids, DEFAULT_SPLIT, 7).unwrap());
        let b = split_queries(&ids, DEFAULT_SPLIT, 8).unwrap();
        assert_eq!((b.train.len(), b.valid.len(), b.test.len()), (5, 1, 4));
        assert_ne!(a.train, b.train);
        assert!(matches!(
            split_queries(&ids, (0.5, 0.2, 0.4), 1),
            Err(DataError::BadFractions(_))
        ));
        assert!(matches!(
            split_queries(&[], DEFAULT_SPLIT, 1),
            Err(DataError::EmptyQuerySet)
        ));
    }
}
