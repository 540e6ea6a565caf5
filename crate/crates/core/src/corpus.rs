//! Span-annotated documents: the label inventory, JSONL loading and saving,
//! seeded train/dev/test splitting, and corpus summary statistics.
//!
//! Offsets are Unicode scalar indices into the document text, half-open
//! `[start, end)`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The ten product aspects, in inventory order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Aspect {
    Screen,
    Camera,
    Features,
    Battery,
    Performance,
    Storage,
    Design,
    Price,
    General,
    SerAcc,
}

impl Aspect {
    pub const ALL: [Aspect; 10] = [
        Aspect::Screen,
        Aspect::Camera,
        Aspect::Features,
        Aspect::Battery,
        Aspect::Performance,
        Aspect::Storage,
        Aspect::Design,
        Aspect::Price,
        Aspect::General,
        Aspect::SerAcc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Aspect::Screen => "SCREEN",
            Aspect::Camera => "CAMERA",
            Aspect::Features => "FEATURES",
            Aspect::Battery => "BATTERY",
            Aspect::Performance => "PERFORMANCE",
            Aspect::Storage => "STORAGE",
            Aspect::Design => "DESIGN",
            Aspect::Price => "PRICE",
            Aspect::General => "GENERAL",
            Aspect::SerAcc => "SER&ACC",
        }
    }
}

impl FromStr for Aspect {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Aspect::ALL
            .iter()
            .copied()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::UnknownLabel(format!("unknown aspect {s:?}")))
    }
}

impl fmt::Display for Aspect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Polarity {
    Positive,
    Negative,
    Neutral,
}

impl Polarity {
    pub const ALL: [Polarity; 3] = [Polarity::Positive, Polarity::Negative, Polarity::Neutral];

    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Positive => "POSITIVE",
            Polarity::Negative => "NEGATIVE",
            Polarity::Neutral => "NEUTRAL",
        }
    }
}

impl FromStr for Polarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Polarity::ALL
            .iter()
            .copied()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::UnknownLabel(format!("unknown polarity {s:?}")))
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An aspect paired with a polarity, written `ASPECT#POLARITY`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Label {
    pub aspect: Aspect,
    pub polarity: Polarity,
}

impl Label {
    pub fn new(aspect: Aspect, polarity: Polarity) -> Self {
        Label { aspect, polarity }
    }

    /// All 30 labels, aspect-major.
    pub fn all() -> impl Iterator<Item = Label> {
        Aspect::ALL
            .into_iter()
            .flat_map(|a| Polarity::ALL.into_iter().map(move |p| Label::new(a, p)))
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (aspect, polarity) = s
            .split_once('#')
            .ok_or_else(|| Error::UnknownLabel(format!("label {s:?} is not ASPECT#POLARITY")))?;
        let aspect = aspect
            .parse()
            .map_err(|_| Error::UnknownLabel(format!("unknown aspect {aspect:?} in label {s:?}")))?;
        let polarity = polarity.parse().map_err(|_| {
            Error::UnknownLabel(format!("unknown polarity {polarity:?} in label {s:?}"))
        })?;
        Ok(Label { aspect, polarity })
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.aspect, self.polarity)
    }
}

/// A labeled half-open character interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SpanAnnotation {
    pub start: usize,
    pub end: usize,
    pub label: Label,
}

impl SpanAnnotation {
    pub fn new(start: usize, end: usize, label: Label) -> Self {
        SpanAnnotation { start, end, label }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub spans: Vec<SpanAnnotation>,
}

impl Document {
    /// Builds a document, checking every span against the text length.
    pub fn new(id: impl Into<String>, text: impl Into<String>, spans: Vec<SpanAnnotation>) -> Result<Self> {
        let doc = Document {
            id: id.into(),
            text: text.into(),
            spans,
        };
        let n = doc.char_len();
        for s in &doc.spans {
            check_offsets(s.start as i64, s.end as i64, n).map_err(|message| {
                Error::Mismatch(format!("document {:?}: {message}", doc.id))
            })?;
        }
        Ok(doc)
    }

    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }

    /// The text covered by `[start, end)` in character offsets.
    pub fn slice(&self, start: usize, end: usize) -> String {
        self.text.chars().skip(start).take(end.saturating_sub(start)).collect()
    }
}

fn check_offsets(start: i64, end: i64, len: usize) -> std::result::Result<(), String> {
    if start < 0 || end < 0 || start >= end || end as u64 > len as u64 {
        Err(format!(
            "offset [{start}, {end}) out of range for text of {len} characters"
        ))
    } else {
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub name: String,
    pub documents: Vec<Document>,
}

impl Corpus {
    /// Builds a corpus, rejecting duplicate document ids.
    pub fn new(name: impl Into<String>, documents: Vec<Document>) -> Result<Self> {
        let mut seen = HashSet::new();
        for d in &documents {
            if !seen.insert(d.id.as_str()) {
                return Err(Error::DuplicateId(d.id.clone()));
            }
        }
        Ok(Corpus {
            name: name.into(),
            documents,
        })
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.documents.iter().find(|d| d.id == id)
    }
}

/// One JSONL line before label validation. Shared by every JSONL reader in
/// the crate so that gold files, prediction files and annotator files agree
/// on the wire shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawRecord {
    #[serde(default, skip_serializing_if = "Option::is_none", deserialize_with = "de_id")]
    pub id: Option<String>,
    pub text: String,
    #[serde(default)]
    pub labels: Vec<(i64, i64, String)>,
}

fn de_id<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Option<String>, D::Error> {
    let v = Option::<serde_json::Value>::deserialize(d)?;
    Ok(match v {
        None | Some(serde_json::Value::Null) => None,
        Some(serde_json::Value::String(s)) => Some(s),
        Some(other) => Some(other.to_string()),
    })
}

/// A parsed JSONL line: 1-based line number, synthesized or explicit id,
/// and the raw record.
#[derive(Debug, Clone)]
pub struct RawLine {
    pub line: usize,
    pub id: String,
    pub record: RawRecord,
}

impl RawLine {
    /// Validates offsets against the text; labels are returned unparsed.
    pub fn checked_spans(&self) -> Result<Vec<(usize, usize, &str)>> {
        let n = self.record.text.chars().count();
        self.record
            .labels
            .iter()
            .map(|(s, e, l)| {
                check_offsets(*s, *e, n).map_err(|message| Error::Invalid {
                    line: self.line,
                    message,
                })?;
                Ok((*s as usize, *e as usize, l.as_str()))
            })
            .collect()
    }
}

/// Reads JSONL records, skipping blank lines. Missing ids become the 0-based
/// line number.
pub fn read_raw_lines<R: BufRead>(reader: R) -> Result<Vec<RawLine>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Invalid {
            line: idx + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RawRecord = serde_json::from_str(&line).map_err(|source| Error::Json {
            line: idx + 1,
            source,
        })?;
        let id = record.id.clone().unwrap_or_else(|| idx.to_string());
        out.push(RawLine {
            line: idx + 1,
            id,
            record,
        });
    }
    Ok(out)
}

pub(crate) fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

/// Parses a gold corpus from a reader.
pub fn read_jsonl<R: BufRead>(reader: R, name: &str) -> Result<Corpus> {
    let mut documents = Vec::new();
    for raw in read_raw_lines(reader)? {
        let spans = raw
            .checked_spans()?
            .into_iter()
            .map(|(start, end, label)| {
                let label = label.parse::<Label>().map_err(|e| Error::Invalid {
                    line: raw.line,
                    message: match e {
                        Error::UnknownLabel(m) => m,
                        other => other.to_string(),
                    },
                })?;
                Ok(SpanAnnotation { start, end, label })
            })
            .collect::<Result<Vec<_>>>()?;
        documents.push(Document {
            id: raw.id,
            text: raw.record.text,
            spans,
        });
    }
    Corpus::new(name, documents)
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_jsonl(open(path)?, &name).map_err(|e| match e {
        Error::Io { .. } => e,
        other => Error::Invalid {
            line: line_of(&other),
            message: format!("{}: {}", path.display(), strip_line(&other)),
        },
    })
}

fn line_of(e: &Error) -> usize {
    match e {
        Error::Json { line, .. } | Error::Invalid { line, .. } => *line,
        _ => 0,
    }
}

fn strip_line(e: &Error) -> String {
    match e {
        Error::Json { source, .. } => format!("malformed JSON: {source}"),
        Error::Invalid { message, .. } => message.clone(),
        other => other.to_string(),
    }
}

/// Writes one JSONL record per line.
pub fn write_records<W: Write>(mut writer: W, records: &[RawRecord]) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(writer, "{line}").map_err(|e| Error::io("<output>", e))?;
    }
    writer.flush().map_err(|e| Error::io("<output>", e))
}

impl From<&Document> for RawRecord {
    fn from(d: &Document) -> Self {
        RawRecord {
            id: Some(d.id.clone()),
            text: d.text.clone(),
            labels: d
                .spans
                .iter()
                .map(|s| (s.start as i64, s.end as i64, s.label.to_string()))
                .collect(),
        }
    }
}

pub fn write_jsonl<W: Write>(writer: W, corpus: &Corpus) -> Result<()> {
    let records: Vec<RawRecord> = corpus.documents.iter().map(RawRecord::from).collect();
    write_records(writer, &records)
}

pub fn save_jsonl(path: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_jsonl(BufWriter::new(file), corpus)
}

/// How a document count is divided among ratio parts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Apportionment {
    /// Every part after the first gets `ceil(n * share)`; the first part
    /// takes the remainder. For 11,122 documents at 7:1:2 this yields
    /// 7,784 / 1,113 / 2,225.
    #[default]
    TrailingCeil,
    /// Hamilton's method: floors first, then leftover units go to the
    /// largest fractional remainders (ties to the lower part index).
    LargestRemainder,
}

impl FromStr for Apportionment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ceil" | "trailing-ceil" => Ok(Apportionment::TrailingCeil),
            "largest-remainder" | "hamilton" => Ok(Apportionment::LargestRemainder),
            other => Err(Error::Argument(format!("unknown apportionment {other:?}"))),
        }
    }
}

/// Part sizes for `n` items under positive integer `ratios`.
pub fn apportion(n: usize, ratios: &[u32], method: Apportionment) -> Result<Vec<usize>> {
    if ratios.is_empty() || ratios.contains(&0) {
        return Err(Error::Argument(format!("ratios must be positive, got {ratios:?}")));
    }
    let total: u64 = ratios.iter().map(|&r| r as u64).sum();
    let n64 = n as u64;
    match method {
        Apportionment::TrailingCeil => {
            let mut sizes = vec![0usize; ratios.len()];
            let mut remaining = n;
            for (i, &r) in ratios.iter().enumerate().skip(1) {
                let want = (n64 * r as u64).div_ceil(total) as usize;
                sizes[i] = want.min(remaining);
                remaining -= sizes[i];
            }
            sizes[0] = remaining;
            Ok(sizes)
        }
        Apportionment::LargestRemainder => {
            let mut sizes: Vec<usize> = ratios
                .iter()
                .map(|&r| (n64 * r as u64 / total) as usize)
                .collect();
            let mut order: Vec<usize> = (0..ratios.len()).collect();
            // remainder numerators are exact integers: (n * r) mod total
            order.sort_by_key(|&i| std::cmp::Reverse((n64 * ratios[i] as u64) % total));
            let leftover = n - sizes.iter().sum::<usize>();
            for &i in order.iter().take(leftover) {
                sizes[i] += 1;
            }
            Ok(sizes)
        }
    }
}

/// Parses a ratio such as `7:1:2`.
pub fn parse_ratio(s: &str) -> Result<Vec<u32>> {
    let parts = s
        .split(':')
        .map(|p| {
            p.trim()
                .parse::<u32>()
                .map_err(|_| Error::Argument(format!("bad ratio component {p:?} in {s:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if parts.contains(&0) {
        return Err(Error::Argument(format!("ratio {s:?} has a zero part")));
    }
    Ok(parts)
}

/// Randomly partitions the corpus. Assignment depends only on `seed`;
/// documents keep their original relative order inside each part.
pub fn split(corpus: &Corpus, ratios: &[u32], seed: u64, method: Apportionment) -> Result<Vec<Corpus>> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let sizes = apportion(corpus.len(), ratios, method)?;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let names: Vec<String> = if ratios.len() == 3 {
        ["train", "dev", "test"].iter().map(|s| s.to_string()).collect()
    } else {
        (0..ratios.len()).map(|i| format!("part{i}")).collect()
    };
    let mut parts = Vec::with_capacity(sizes.len());
    let mut offset = 0;
    for (size, name) in sizes.iter().zip(names) {
        let mut idx = order[offset..offset + size].to_vec();
        idx.sort_unstable();
        offset += size;
        parts.push(Corpus {
            name: if corpus.name.is_empty() {
                name
            } else {
                format!("{}.{name}", corpus.name)
            },
            documents: idx.into_iter().map(|i| corpus.documents[i].clone()).collect(),
        });
    }
    Ok(parts)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorpusStats {
    pub comment_count: usize,
    pub total_spans: usize,
    pub avg_spans_per_comment: f64,
    pub avg_span_length_chars: f64,
    pub per_label_counts: BTreeMap<Label, usize>,
    pub per_polarity_counts: BTreeMap<Polarity, usize>,
}

impl CorpusStats {
    pub fn polarity(&self, p: Polarity) -> usize {
        self.per_polarity_counts.get(&p).copied().unwrap_or(0)
    }
}

pub fn stats(corpus: &Corpus) -> CorpusStats {
    let mut out = CorpusStats {
        comment_count: corpus.len(),
        ..Default::default()
    };
    let mut total_len = 0usize;
    for span in corpus.documents.iter().flat_map(|d| &d.spans) {
        out.total_spans += 1;
        total_len += span.len();
        *out.per_label_counts.entry(span.label).or_default() += 1;
        *out.per_polarity_counts.entry(span.label.polarity).or_default() += 1;
    }
    if out.comment_count > 0 {
        out.avg_spans_per_comment = out.total_spans as f64 / out.comment_count as f64;
    }
    if out.total_spans > 0 {
        out.avg_span_length_chars = total_len as f64 / out.total_spans as f64;
    }
    out
}
