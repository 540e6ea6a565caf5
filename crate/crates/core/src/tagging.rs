//! Syllable tokenization, label-scheme projection and IOB conversion.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use log::warn;

use crate::corpus::{self, Corpus, Document, Label, RawRecord, SpanAnnotation};
use crate::error::{Error, Result};

/// A whitespace-delimited syllable with character offsets into its source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub doc_id: String,
    pub tokens: Vec<Token>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Splits on Unicode whitespace; every maximal non-whitespace run is a token.
pub fn tokenize(text: &str) -> TokenSequence {
    let mut tokens = Vec::new();
    let mut current: Option<(usize, String)> = None;
    let mut n = 0;
    for (i, ch) in text.chars().enumerate() {
        n = i + 1;
        if ch.is_whitespace() {
            if let Some((start, s)) = current.take() {
                tokens.push(Token { text: s, start, end: i });
            }
        } else {
            current.get_or_insert_with(|| (i, String::new())).1.push(ch);
        }
    }
    if let Some((start, s)) = current {
        tokens.push(Token { text: s, start, end: n });
    }
    TokenSequence {
        doc_id: String::new(),
        tokens,
    }
}

pub fn tokenize_document(doc: &Document) -> TokenSequence {
    TokenSequence {
        doc_id: doc.id.clone(),
        ..tokenize(&doc.text)
    }
}

/// Which part of an `ASPECT#POLARITY` label the tagger predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Aspect,
    Polarity,
    AspectPolarity,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Aspect, Scheme::Polarity, Scheme::AspectPolarity];

    /// Scheme labels in inventory order.
    pub fn labels(self) -> Vec<String> {
        match self {
            Scheme::Aspect => corpus::Aspect::ALL.iter().map(|a| a.to_string()).collect(),
            Scheme::Polarity => corpus::Polarity::ALL.iter().map(|p| p.to_string()).collect(),
            Scheme::AspectPolarity => Label::all().map(|l| l.to_string()).collect(),
        }
    }

    /// `2L + 1`: B- and I- per label plus O.
    pub fn tag_count(self) -> usize {
        2 * self.labels().len() + 1
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Aspect => "aspect",
            Scheme::Polarity => "polarity",
            Scheme::AspectPolarity => "aspect-polarity",
        }
    }

    /// Accepts either a full `ASPECT#POLARITY` label (projected) or a label
    /// already in this scheme's inventory.
    pub fn parse_label(self, s: &str) -> Result<String> {
        if let Ok(label) = s.parse::<Label>() {
            return Ok(project(label, self));
        }
        let ok = match self {
            Scheme::Aspect => s.parse::<corpus::Aspect>().is_ok(),
            Scheme::Polarity => s.parse::<corpus::Polarity>().is_ok(),
            Scheme::AspectPolarity => false,
        };
        if ok {
            Ok(s.to_string())
        } else {
            Err(Error::UnknownLabel(format!(
                "{s:?} is not a {} label",
                self.as_str()
            )))
        }
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aspect" => Ok(Scheme::Aspect),
            "polarity" | "sentiment" => Ok(Scheme::Polarity),
            "aspect-polarity" | "aspect_polarity" | "both" => Ok(Scheme::AspectPolarity),
            other => Err(Error::Argument(format!("unknown scheme {other:?}"))),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn project(label: Label, scheme: Scheme) -> String {
    match scheme {
        Scheme::Aspect => label.aspect.to_string(),
        Scheme::Polarity => label.polarity.to_string(),
        Scheme::AspectPolarity => label.to_string(),
    }
}

/// A span labeled in some scheme's inventory.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SchemeSpan {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

impl SchemeSpan {
    pub fn new(start: usize, end: usize, label: impl Into<String>) -> Self {
        SchemeSpan {
            start,
            end,
            label: label.into(),
        }
    }

    pub fn project(span: &SpanAnnotation, scheme: Scheme) -> Self {
        SchemeSpan::new(span.start, span.end, project(span.label, scheme))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Tag {
    Outside,
    Begin(String),
    Inside(String),
}

impl Tag {
    pub fn label(&self) -> Option<&str> {
        match self {
            Tag::Outside => None,
            Tag::Begin(l) | Tag::Inside(l) => Some(l),
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tag::Outside => f.write_str("O"),
            Tag::Begin(l) => write!(f, "B-{l}"),
            Tag::Inside(l) => write!(f, "I-{l}"),
        }
    }
}

impl FromStr for Tag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "O" {
            Ok(Tag::Outside)
        } else if let Some(l) = s.strip_prefix("B-").filter(|l| !l.is_empty()) {
            Ok(Tag::Begin(l.to_string()))
        } else if let Some(l) = s.strip_prefix("I-").filter(|l| !l.is_empty()) {
            Ok(Tag::Inside(l.to_string()))
        } else {
            Err(Error::Argument(format!("malformed IOB tag {s:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct IobSequence {
    pub tags: Vec<Tag>,
}

impl IobSequence {
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }
}

/// Dense tag indices for one scheme: `O` is 0, then `B-l`, `I-l` for each
/// label `l` in inventory order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagSet {
    scheme: Scheme,
    labels: Vec<String>,
}

impl TagSet {
    pub fn new(scheme: Scheme) -> Self {
        TagSet {
            scheme,
            labels: scheme.labels(),
        }
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn len(&self) -> usize {
        2 * self.labels.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tag(&self, index: usize) -> Tag {
        if index == 0 {
            return Tag::Outside;
        }
        let label = self.labels[(index - 1) / 2].clone();
        if index % 2 == 1 {
            Tag::Begin(label)
        } else {
            Tag::Inside(label)
        }
    }

    pub fn index(&self, tag: &Tag) -> Option<usize> {
        let find = |l: &str| self.labels.iter().position(|x| x == l);
        match tag {
            Tag::Outside => Some(0),
            Tag::Begin(l) => find(l).map(|i| 2 * i + 1),
            Tag::Inside(l) => find(l).map(|i| 2 * i + 2),
        }
    }

    pub fn tags(&self) -> impl Iterator<Item = Tag> + '_ {
        (0..self.len()).map(|i| self.tag(i))
    }

    pub fn to_indices(&self, seq: &IobSequence) -> Result<Vec<usize>> {
        seq.tags
            .iter()
            .map(|t| {
                self.index(t).ok_or_else(|| {
                    Error::UnknownLabel(format!("tag {t} outside the {} inventory", self.scheme))
                })
            })
            .collect()
    }

    pub fn from_indices(&self, indices: &[usize]) -> IobSequence {
        IobSequence {
            tags: indices.iter().map(|&i| self.tag(i)).collect(),
        }
    }

    /// Whether tag `to` may follow tag `from` in well-formed IOB.
    pub fn allows_transition(&self, from: usize, to: usize) -> bool {
        match self.tag(to) {
            Tag::Inside(l) => self.tag(from).label() == Some(l.as_str()),
            _ => true,
        }
    }

    pub fn allows_start(&self, to: usize) -> bool {
        !matches!(self.tag(to), Tag::Inside(_))
    }
}

/// Result of encoding, with spans that could not be placed.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    pub tags: IobSequence,
    pub dropped: Vec<SchemeSpan>,
}

fn check_tokens(doc: &Document, tokens: &TokenSequence) -> Result<()> {
    if !tokens.doc_id.is_empty() && tokens.doc_id != doc.id {
        return Err(Error::Mismatch(format!(
            "tokens belong to {:?}, document is {:?}",
            tokens.doc_id, doc.id
        )));
    }
    let n = doc.char_len();
    if let Some(t) = tokens.tokens.iter().find(|t| t.end > n || t.start >= t.end) {
        return Err(Error::Mismatch(format!(
            "token {:?} [{}, {}) does not fit document {:?} of {n} characters",
            t.text, t.start, t.end, doc.id
        )));
    }
    Ok(())
}

/// Tags tokens from scheme-labeled spans. A token belongs to a span when
/// their character intervals share at least one character. Spans are taken
/// by ascending start; a span touching an already-tagged token, or covering
/// no token, is dropped.
pub fn encode_spans(spans: &[SchemeSpan], tokens: &TokenSequence) -> Encoding {
    let mut tags = vec![Tag::Outside; tokens.len()];
    let mut taken = vec![false; tokens.len()];
    let mut dropped = Vec::new();

    let mut order: Vec<&SchemeSpan> = spans.iter().collect();
    order.sort_by_key(|s| (s.start, s.end));
    for span in order {
        let covered: Vec<usize> = tokens
            .tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.start < span.end && span.start < t.end)
            .map(|(i, _)| i)
            .collect();
        if covered.is_empty() || covered.iter().any(|&i| taken[i]) {
            dropped.push(span.clone());
            continue;
        }
        for (k, &i) in covered.iter().enumerate() {
            taken[i] = true;
            tags[i] = if k == 0 {
                Tag::Begin(span.label.clone())
            } else {
                Tag::Inside(span.label.clone())
            };
        }
    }
    Encoding {
        tags: IobSequence { tags },
        dropped,
    }
}

/// Encodes a document's gold spans under `scheme`, logging dropped spans.
pub fn encode_iob(doc: &Document, tokens: &TokenSequence, scheme: Scheme) -> Result<IobSequence> {
    Ok(encode_iob_report(doc, tokens, scheme)?.tags)
}

pub fn encode_iob_report(doc: &Document, tokens: &TokenSequence, scheme: Scheme) -> Result<Encoding> {
    check_tokens(doc, tokens)?;
    let spans: Vec<SchemeSpan> = doc.spans.iter().map(|s| SchemeSpan::project(s, scheme)).collect();
    let enc = encode_spans(&spans, tokens);
    for s in &enc.dropped {
        warn!(
            "document {:?}: dropping span [{}, {}) {} (overlaps an earlier span or covers no token)",
            doc.id, s.start, s.end, s.label
        );
    }
    Ok(enc)
}

/// Turns maximal `B-X (I-X)*` runs into spans. An `I-X` that does not
/// continue an `X` run opens a new span.
pub fn decode_iob(tags: &IobSequence, tokens: &TokenSequence) -> Result<Vec<SchemeSpan>> {
    if tags.len() != tokens.len() {
        return Err(Error::Mismatch(format!(
            "{} tags for {} tokens",
            tags.len(),
            tokens.len()
        )));
    }
    let mut spans = Vec::new();
    let mut open: Option<SchemeSpan> = None;
    for (tag, tok) in tags.tags.iter().zip(&tokens.tokens) {
        match tag {
            Tag::Outside => spans.extend(open.take()),
            Tag::Inside(l) if open.as_ref().is_some_and(|s| &s.label == l) => {
                if let Some(s) = open.as_mut() {
                    s.end = tok.end;
                }
            }
            Tag::Begin(l) | Tag::Inside(l) => {
                spans.extend(open.take());
                open = Some(SchemeSpan::new(tok.start, tok.end, l.clone()));
            }
        }
    }
    spans.extend(open);
    Ok(spans)
}

/// A document whose spans carry scheme labels; the common currency of
/// evaluation and prediction output.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedDocument {
    pub id: String,
    pub text: String,
    pub spans: Vec<SchemeSpan>,
}

impl ProjectedDocument {
    pub fn project(doc: &Document, scheme: Scheme) -> Self {
        ProjectedDocument {
            id: doc.id.clone(),
            text: doc.text.clone(),
            spans: doc.spans.iter().map(|s| SchemeSpan::project(s, scheme)).collect(),
        }
    }
}

impl From<&ProjectedDocument> for RawRecord {
    fn from(d: &ProjectedDocument) -> Self {
        RawRecord {
            id: Some(d.id.clone()),
            text: d.text.clone(),
            labels: d
                .spans
                .iter()
                .map(|s| (s.start as i64, s.end as i64, s.label.clone()))
                .collect(),
        }
    }
}

pub fn project_corpus(corpus: &Corpus, scheme: Scheme) -> Vec<ProjectedDocument> {
    corpus
        .documents
        .iter()
        .map(|d| ProjectedDocument::project(d, scheme))
        .collect()
}

/// Reads JSONL whose labels are either full `ASPECT#POLARITY` strings or
/// labels of `scheme`.
pub fn read_projected_jsonl<R: BufRead>(reader: R, scheme: Scheme) -> Result<Vec<ProjectedDocument>> {
    let mut ids = std::collections::HashSet::new();
    corpus::read_raw_lines(reader)?
        .into_iter()
        .map(|raw| {
            if !ids.insert(raw.id.clone()) {
                return Err(Error::DuplicateId(raw.id.clone()));
            }
            let spans = raw
                .checked_spans()?
                .into_iter()
                .map(|(start, end, label)| {
                    let label = scheme.parse_label(label).map_err(|e| Error::Invalid {
                        line: raw.line,
                        message: e.to_string(),
                    })?;
                    Ok(SchemeSpan { start, end, label })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ProjectedDocument {
                id: raw.id,
                text: raw.record.text,
                spans,
            })
        })
        .collect()
}

pub fn load_projected_jsonl(path: impl AsRef<Path>, scheme: Scheme) -> Result<Vec<ProjectedDocument>> {
    read_projected_jsonl(corpus::open(path.as_ref())?, scheme)
}

pub fn write_projected_jsonl<W: Write>(writer: W, docs: &[ProjectedDocument]) -> Result<()> {
    let records: Vec<RawRecord> = docs.iter().map(RawRecord::from).collect();
    corpus::write_records(writer, &records)
}

pub fn save_projected_jsonl(path: impl AsRef<Path>, docs: &[ProjectedDocument]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_projected_jsonl(BufWriter::new(file), docs)
}

/// Writes two-column CoNLL: `token<TAB>tag`, a `# id = ...` comment before
/// each document and a blank line after it.
pub fn write_conll<W: Write>(mut w: W, docs: &[ProjectedDocument]) -> Result<()> {
    let io = |e| Error::io("<output>", e);
    for doc in docs {
        let mut tokens = tokenize(&doc.text);
        tokens.doc_id = doc.id.clone();
        let enc = encode_spans(&doc.spans, &tokens);
        for s in &enc.dropped {
            warn!(
                "document {:?}: dropping span [{}, {}) {}",
                doc.id, s.start, s.end, s.label
            );
        }
        writeln!(w, "# id = {}", doc.id).map_err(io)?;
        for (tok, tag) in tokens.tokens.iter().zip(&enc.tags.tags) {
            writeln!(w, "{}\t{}", tok.text, tag).map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads two-column CoNLL back into documents. Text is rebuilt by joining
/// tokens with single spaces, so offsets refer to the rebuilt text.
pub fn read_conll<R: BufRead>(reader: R, scheme: Scheme) -> Result<Vec<ProjectedDocument>> {
    let mut docs = Vec::new();
    let mut id: Option<String> = None;
    let mut rows: Vec<(String, Tag)> = Vec::new();

    let flush = |id: &mut Option<String>, rows: &mut Vec<(String, Tag)>, docs: &mut Vec<ProjectedDocument>| -> Result<()> {
        if rows.is_empty() && id.is_none() {
            return Ok(());
        }
        let text = rows.iter().map(|(t, _)| t.as_str()).collect::<Vec<_>>().join(" ");
        let doc_id = id.take().unwrap_or_else(|| docs.len().to_string());
        let mut tokens = tokenize(&text);
        tokens.doc_id = doc_id.clone();
        let tags = IobSequence {
            tags: rows.drain(..).map(|(_, t)| t).collect(),
        };
        let spans = decode_iob(&tags, &tokens)?;
        docs.push(ProjectedDocument {
            id: doc_id,
            text,
            spans,
        });
        Ok(())
    };

    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<input>", e))?;
        let line_no = idx + 1;
        if line.trim().is_empty() {
            flush(&mut id, &mut rows, &mut docs)?;
            continue;
        }
        let comment = line.starts_with('#') && !line.contains('\t');
        if let Some(rest) = line.strip_prefix("# id = ").filter(|_| comment) {
            if !rows.is_empty() {
                flush(&mut id, &mut rows, &mut docs)?;
            }
            id = Some(rest.trim().to_string());
            continue;
        }
        if comment {
            continue;
        }
        let (token, tag) = line.split_once('\t').ok_or_else(|| Error::Invalid {
            line: line_no,
            message: "expected token<TAB>tag".into(),
        })?;
        if token.is_empty() || token.chars().any(char::is_whitespace) {
            return Err(Error::Invalid {
                line: line_no,
                message: format!("token {token:?} is empty or contains whitespace"),
            });
        }
        let tag: Tag = tag.trim().parse().map_err(|e: Error| Error::Invalid {
            line: line_no,
            message: e.to_string(),
        })?;
        if let Some(l) = tag.label() {
            scheme.parse_label(l).map_err(|e| Error::Invalid {
                line: line_no,
                message: e.to_string(),
            })?;
        }
        rows.push((token.to_string(), tag));
    }
    flush(&mut id, &mut rows, &mut docs)?;
    Ok(docs)
}

pub fn load_conll(path: impl AsRef<Path>, scheme: Scheme) -> Result<Vec<ProjectedDocument>> {
    read_conll(corpus::open(path.as_ref())?, scheme)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Aspect, Polarity};

    fn toks(spans: &[(usize, usize)]) -> TokenSequence {
        TokenSequence {
            doc_id: String::new(),
            tokens: spans
                .iter()
                .map(|&(s, e)| Token {
                    text: "x".repeat(e - s),
                    start: s,
                    end: e,
                })
                .collect(),
        }
    }

    fn offsets(ts: &TokenSequence) -> Vec<(&str, usize, usize)> {
        ts.tokens.iter().map(|t| (t.text.as_str(), t.start, t.end)).collect()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(offsets(&tokenize("pin tốt")), vec![("pin", 0, 3), ("tốt", 4, 7)]);
        assert!(tokenize("").is_empty());
        assert!(tokenize(" \t\n").is_empty());
        assert_eq!(offsets(&tokenize("  a  ")), vec![("a", 2, 3)]);
    }

    #[test]
    fn projection() {
        let l = Label::new(Aspect::Battery, Polarity::Positive);
        assert_eq!(project(l, Scheme::Aspect), "BATTERY");
        assert_eq!(project(l, Scheme::Polarity), "POSITIVE");
        assert_eq!(project(l, Scheme::AspectPolarity), "BATTERY#POSITIVE");
    }

    #[test]
    fn inventory_sizes() {
        assert_eq!(Scheme::Aspect.tag_count(), 21);
        assert_eq!(Scheme::Polarity.tag_count(), 7);
        assert_eq!(Scheme::AspectPolarity.tag_count(), 61);
        for scheme in Scheme::ALL {
            let set = TagSet::new(scheme);
            for i in 0..set.len() {
                assert_eq!(set.index(&set.tag(i)), Some(i));
            }
        }
    }

    #[test]
    fn tag_strings() {
        for s in ["O", "B-SER&ACC", "I-BATTERY#NEGATIVE"] {
            assert_eq!(s.parse::<Tag>().unwrap().to_string(), s);
        }
        assert!("B-".parse::<Tag>().is_err());
        assert!("X-FOO".parse::<Tag>().is_err());
    }

    #[test]
    fn encode_definitional_case() {
        let doc = Document::new(
            "d",
            "aa bb cc dd ee",
            vec![SpanAnnotation::new(
                3,
                8,
                Label::new(Aspect::Battery, Polarity::Positive),
            )],
        )
        .unwrap();
        let t = tokenize_document(&doc);
        let tags = encode_iob(&doc, &t, Scheme::Aspect).unwrap();
        let shown: Vec<String> = tags.tags.iter().map(Tag::to_string).collect();
        assert_eq!(shown, vec!["O", "B-BATTERY", "I-BATTERY", "O", "O"]);
    }

    #[test]
    fn overlap_rule_enumerated() {
        // token [4, 8); every span [s, e) within [0, 12) tags it iff the
        // intervals share a character
        let tokens = toks(&[(4, 8)]);
        for s in 0..12 {
            for e in s + 1..=12 {
                let expected = s < 8 && 4 < e;
                let enc = encode_spans(&[SchemeSpan::new(s, e, "A")], &tokens);
                assert_eq!(enc.tags.tags[0] != Tag::Outside, expected, "span [{s},{e})");
            }
        }
    }

    #[test]
    fn half_covered_token_is_tagged() {
        let tokens = toks(&[(0, 2), (3, 5), (6, 10)]);
        let enc = encode_spans(&[SchemeSpan::new(3, 8, "A")], &tokens);
        assert_eq!(
            enc.tags.tags,
            vec![Tag::Outside, Tag::Begin("A".into()), Tag::Inside("A".into())]
        );
    }

    #[test]
    fn no_spans_all_outside() {
        let doc = Document::new("d", "a b c", vec![]).unwrap();
        let tags = encode_iob(&doc, &tokenize_document(&doc), Scheme::Polarity).unwrap();
        assert!(tags.tags.iter().all(|t| *t == Tag::Outside));
    }

    #[test]
    fn overlapping_spans_keep_earlier_start() {
        let tokens = toks(&[(0, 1), (2, 3), (4, 5)]);
        let spans = [SchemeSpan::new(2, 5, "B"), SchemeSpan::new(0, 3, "A")];
        let enc = encode_spans(&spans, &tokens);
        assert_eq!(
            enc.tags.tags,
            vec![Tag::Begin("A".into()), Tag::Inside("A".into()), Tag::Outside]
        );
        assert_eq!(enc.dropped, vec![SchemeSpan::new(2, 5, "B")]);
    }

    #[test]
    fn encode_rejects_foreign_tokens() {
        let doc = Document::new("d", "ab", vec![]).unwrap();
        let mut t = tokenize("ab cd");
        assert!(encode_iob(&doc, &t, Scheme::Aspect).is_err());
        t = tokenize("ab");
        t.doc_id = "other".into();
        assert!(encode_iob(&doc, &t, Scheme::Aspect).is_err());
    }

    #[test]
    fn decode_examples() {
        let tokens = toks(&[(0, 3), (4, 7), (8, 12), (13, 15)]);
        let tags: IobSequence = IobSequence {
            tags: ["O", "B-BATTERY", "I-BATTERY", "O"]
                .iter()
                .map(|s| s.parse().unwrap())
                .collect(),
        };
        assert_eq!(
            decode_iob(&tags, &tokens).unwrap(),
            vec![SchemeSpan::new(4, 12, "BATTERY")]
        );

        let all_o = IobSequence {
            tags: vec![Tag::Outside; 4],
        };
        assert!(decode_iob(&all_o, &tokens).unwrap().is_empty());

        let orphan = IobSequence {
            tags: vec![Tag::Inside("PRICE".into()), Tag::Outside],
        };
        assert_eq!(
            decode_iob(&orphan, &toks(&[(0, 3), (4, 7)])).unwrap(),
            vec![SchemeSpan::new(0, 3, "PRICE")]
        );
    }

    #[test]
    fn decode_label_switch_inside_run() {
        let tokens = toks(&[(0, 1), (2, 3), (4, 5)]);
        let tags = IobSequence {
            tags: vec![
                Tag::Begin("A".into()),
                Tag::Inside("B".into()),
                Tag::Inside("B".into()),
            ],
        };
        assert_eq!(
            decode_iob(&tags, &tokens).unwrap(),
            vec![SchemeSpan::new(0, 1, "A"), SchemeSpan::new(2, 5, "B")]
        );
    }

    #[test]
    fn decode_length_mismatch() {
        assert!(decode_iob(&IobSequence { tags: vec![Tag::Outside] }, &toks(&[])).is_err());
    }

    #[test]
    fn transition_validity() {
        let set = TagSet::new(Scheme::Polarity);
        let b_pos = set.index(&Tag::Begin("POSITIVE".into())).unwrap();
        let i_pos = set.index(&Tag::Inside("POSITIVE".into())).unwrap();
        let i_neg = set.index(&Tag::Inside("NEGATIVE".into())).unwrap();
        assert!(set.allows_transition(b_pos, i_pos));
        assert!(set.allows_transition(i_pos, i_pos));
        assert!(!set.allows_transition(0, i_pos));
        assert!(!set.allows_transition(b_pos, i_neg));
        assert!(set.allows_transition(i_neg, 0));
        assert!(!set.allows_start(i_pos));
        assert!(set.allows_start(b_pos));
    }

    #[test]
    fn conll_round_trip() {
        let docs = vec![
            ProjectedDocument {
                id: "a".into(),
                text: "pin rất tốt nha".into(),
                spans: vec![SchemeSpan::new(0, 11, "BATTERY")],
            },
            ProjectedDocument {
                id: "b".into(),
                text: "giá ổn".into(),
                spans: vec![],
            },
        ];
        let mut buf = Vec::new();
        write_conll(&mut buf, &docs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# id = a\npin\tB-BATTERY\nrất\tI-BATTERY\ntốt\tI-BATTERY\nnha\tO\n\n"));
        let back = read_conll(buf.as_slice(), Scheme::Aspect).unwrap();
        assert_eq!(back, docs);
    }

    #[test]
    fn conll_rejects_foreign_labels() {
        let input = "x\tB-POSITIVE\n";
        assert!(read_conll(input.as_bytes(), Scheme::Aspect).is_err());
    }

    #[test]
    fn projected_reader_accepts_both_label_forms() {
        let input = "{\"id\":\"a\",\"text\":\"pin tốt\",\"labels\":[[0,3,\"BATTERY#POSITIVE\"],[4,7,\"PRICE\"]]}";
        let docs = read_projected_jsonl(input.as_bytes(), Scheme::Aspect).unwrap();
        assert_eq!(
            docs[0].spans,
            vec![SchemeSpan::new(0, 3, "BATTERY"), SchemeSpan::new(4, 7, "PRICE")]
        );
        assert!(read_projected_jsonl(input.as_bytes(), Scheme::Polarity).is_err());
    }
}
