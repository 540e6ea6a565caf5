//! Per-token input vectors: a syllable lookup table, a character-level
//! BiLSTM over each token's characters, and optional precomputed contextual
//! vectors read from disk. The three parts are concatenated in that order.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus;
use crate::error::{Error, Result};
use crate::neural::{run_direction, run_direction_backward, LstmParams, StepCache};
use crate::tagging::TokenSequence;
use crate::tensor::{add_assign, Matrix, Tensors};

/// An interned list of strings; index `len()` is reserved for unknowns.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Vocab<T: std::hash::Hash + Eq + Clone> {
    items: Vec<T>,
    index: HashMap<T, usize>,
}

impl<T: std::hash::Hash + Eq + Clone> Vocab<T> {
    /// Keeps the first occurrence of each item.
    pub fn new(items: impl IntoIterator<Item = T>) -> Self {
        let mut v = Vocab {
            items: Vec::new(),
            index: HashMap::new(),
        };
        for it in items {
            v.insert(it);
        }
        v
    }

    fn insert(&mut self, item: T) -> bool {
        if self.index.contains_key(&item) {
            return false;
        }
        self.index.insert(item.clone(), self.items.len());
        self.items.push(item);
        true
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, item: &T) -> Option<usize> {
        self.index.get(item).copied()
    }

    /// Row for `item`, falling back to the unknown row.
    pub fn lookup(&self, item: &T) -> usize {
        self.get(item).unwrap_or(self.items.len())
    }

    pub fn items(&self) -> &[T] {
        &self.items
    }
}

impl<T: std::hash::Hash + Eq + Clone + Serialize> Serialize for Vocab<T> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.items.serialize(s)
    }
}

impl<'de, T: std::hash::Hash + Eq + Clone + Deserialize<'de>> Deserialize<'de> for Vocab<T> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let items = Vec::<T>::deserialize(d)?;
        let n = items.len();
        let v = Vocab::new(items);
        if v.len() != n {
            return Err(serde::de::Error::custom("vocabulary has duplicate entries"));
        }
        Ok(v)
    }
}

/// Syllable embeddings: `|V| + 1` rows, the last one for unknown syllables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyllableTable {
    pub vocab: Arc<Vocab<String>>,
    pub matrix: Matrix,
}

impl SyllableTable {
    /// Uniform in `[-0.1, 0.1]`, UNK row included.
    pub fn random<R: Rng>(words: impl IntoIterator<Item = String>, dim: usize, rng: &mut R) -> Self {
        let vocab = Vocab::new(words);
        let matrix = Matrix::uniform(vocab.len() + 1, dim, 0.1, rng);
        SyllableTable {
            vocab: Arc::new(vocab),
            matrix,
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn unk_row(&self) -> usize {
        self.vocab.len()
    }

    pub fn row_for(&self, token: &str) -> usize {
        self.vocab.lookup(&token.to_string())
    }

    pub fn vector(&self, token: &str) -> &[f64] {
        self.matrix.row(self.row_for(token))
    }

    /// Appends randomly initialized rows for words not yet present; the UNK
    /// row stays last.
    pub fn extend<R: Rng>(&mut self, words: impl IntoIterator<Item = String>, rng: &mut R) {
        let mut vocab = (*self.vocab).clone();
        let mut rows: Vec<f64> = self.matrix.as_slice()[..vocab.len() * self.dim()].to_vec();
        let unk = self.matrix.row(self.unk_row()).to_vec();
        for w in words {
            if vocab.insert(w) {
                rows.extend((0..self.dim()).map(|_| rng.gen_range(-0.1..0.1)));
            }
        }
        rows.extend(unk);
        self.matrix = Matrix::from_vec(vocab.len() + 1, self.dim(), rows).expect("consistent rows");
        self.vocab = Arc::new(vocab);
    }

    pub fn validate(&self) -> Result<()> {
        if self.matrix.rows() != self.vocab.len() + 1 {
            return Err(Error::shape(format!(
                "syllable table has {} rows for {} words plus UNK",
                self.matrix.rows(),
                self.vocab.len()
            )));
        }
        if self.matrix.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::shape("syllable table has non-finite entries"));
        }
        Ok(())
    }
}

/// A loaded pretrained table, with the duplicate entries that were skipped.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub table: SyllableTable,
    /// `(line, token)` of every duplicate that was ignored.
    pub duplicates: Vec<(usize, String)>,
}

/// Reads `token v₁ … v_d` lines. An optional leading `count dim` header is
/// skipped. Duplicate tokens keep their first vector. The UNK row is zero.
pub fn read_pretrained<R: BufRead>(reader: R) -> Result<Pretrained> {
    let mut words = Vec::new();
    let mut values = Vec::new();
    let mut dim: Option<usize> = None;
    let mut seen = HashMap::new();
    let mut duplicates = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Invalid {
            line: line_no,
            message: e.to_string(),
        })?;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let rest: Vec<&str> = fields.collect();
        if idx == 0 && rest.len() == 1 && token.parse::<usize>().is_ok() && rest[0].parse::<usize>().is_ok() {
            continue;
        }
        let vec = rest
            .iter()
            .map(|f| {
                f.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Invalid {
                    line: line_no,
                    message: format!("unparsable value {f:?}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        match dim {
            None if vec.is_empty() => {
                return Err(Error::Invalid {
                    line: line_no,
                    message: "entry has no vector".into(),
                })
            }
            None => dim = Some(vec.len()),
            Some(d) if d != vec.len() => {
                return Err(Error::Invalid {
                    line: line_no,
                    message: format!("ragged entry: {} values, expected {d}", vec.len()),
                })
            }
            _ => {}
        }
        if seen.contains_key(token) {
            warn!("pretrained vectors line {line_no}: duplicate token {token:?} ignored");
            duplicates.push((line_no, token.to_string()));
            continue;
        }
        seen.insert(token.to_string(), words.len());
        words.push(token.to_string());
        values.extend(vec);
    }
    let dim = dim.unwrap_or(0);
    values.extend(std::iter::repeat_n(0.0, dim));
    let matrix = Matrix::from_vec(words.len() + 1, dim, values)?;
    Ok(Pretrained {
        table: SyllableTable {
            vocab: Arc::new(Vocab::new(words)),
            matrix,
        },
        duplicates,
    })
}

pub fn load_pretrained(path: impl AsRef<Path>) -> Result<Pretrained> {
    let path = path.as_ref();
    read_pretrained(corpus::open(path)?).map_err(|e| match e {
        Error::Invalid { line, message } => Error::Invalid {
            line,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

/// Character-level BiLSTM; a token is represented by the forward state after
/// its last character concatenated with the backward state after its first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharEncoder {
    pub chars: Arc<Vocab<char>>,
    /// `|C| + 1` rows, last one for unknown characters.
    pub embed: Matrix,
    pub forward: LstmParams,
    pub backward: LstmParams,
}

impl CharEncoder {
    pub fn init<R: Rng>(
        chars: impl IntoIterator<Item = char>,
        embed_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let chars = Vocab::new(chars);
        let embed = Matrix::uniform(chars.len() + 1, embed_dim, 0.1, rng);
        CharEncoder {
            chars: Arc::new(chars),
            embed,
            forward: LstmParams::init(hidden, embed_dim, rng),
            backward: LstmParams::init(hidden, embed_dim, rng),
        }
    }

    pub fn zeros(chars: impl IntoIterator<Item = char>, embed_dim: usize, hidden: usize) -> Self {
        let chars = Vocab::new(chars);
        CharEncoder {
            embed: Matrix::zeros(chars.len() + 1, embed_dim),
            chars: Arc::new(chars),
            forward: LstmParams::zeros(hidden, embed_dim),
            backward: LstmParams::zeros(hidden, embed_dim),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.forward.hidden() + self.backward.hidden()
    }

    pub fn validate(&self) -> Result<()> {
        self.forward.validate()?;
        self.backward.validate()?;
        if self.embed.rows() != self.chars.len() + 1
            || self.forward.input() != self.embed.cols()
            || self.backward.input() != self.embed.cols()
        {
            return Err(Error::shape("character encoder dimensions disagree"));
        }
        Ok(())
    }

    pub fn encode(&self, token: &str) -> Result<Vec<f64>> {
        Ok(self.encode_cached(token)?.0)
    }

    pub fn encode_cached(&self, token: &str) -> Result<(Vec<f64>, CharCache)> {
        let ids: Vec<usize> = token.chars().map(|c| self.chars.lookup(&c)).collect();
        if ids.is_empty() {
            return Err(Error::shape("cannot encode an empty token"));
        }
        let inputs: Vec<Vec<f64>> = ids.iter().map(|&i| self.embed.row(i).to_vec()).collect();
        let (hf, cf) = run_direction(&self.forward, &inputs, false)?;
        let (hb, cb) = run_direction(&self.backward, &inputs, true)?;
        let mut out = hf[ids.len() - 1].clone();
        out.extend_from_slice(&hb[0]);
        Ok((
            out,
            CharCache {
                ids,
                forward: cf,
                backward: cb,
            },
        ))
    }

    /// Accumulates gradients for `d_out = ∂loss/∂encode(token)`.
    pub fn backward(&self, cache: &CharCache, d_out: &[f64], grads: &mut CharEncoder) {
        let n = cache.ids.len();
        let hf = self.forward.hidden();
        let mut dfw = vec![vec![0.0; hf]; n];
        dfw[n - 1].copy_from_slice(&d_out[..hf]);
        let mut dbw = vec![vec![0.0; self.backward.hidden()]; n];
        dbw[0].copy_from_slice(&d_out[hf..]);
        let dx_f = run_direction_backward(&self.forward, &cache.forward, &dfw, false, &mut grads.forward);
        let dx_b = run_direction_backward(&self.backward, &cache.backward, &dbw, true, &mut grads.backward);
        for ((&id, a), b) in cache.ids.iter().zip(dx_f).zip(dx_b) {
            let row = grads.embed.row_mut(id);
            add_assign(row, &a);
            add_assign(row, &b);
        }
    }
}

impl Tensors for CharEncoder {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut out = vec![self.embed.as_slice()];
        out.extend(self.forward.tensors());
        out.extend(self.backward.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self.embed.as_mut_slice()];
        out.extend(self.forward.tensors_mut());
        out.extend(self.backward.tensors_mut());
        out
    }
}

#[derive(Debug, Clone)]
pub struct CharCache {
    ids: Vec<usize>,
    forward: Vec<StepCache>,
    backward: Vec<StepCache>,
}

/// Frozen per-token vectors keyed by document id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ContextualStore {
    dim: usize,
    docs: HashMap<String, Vec<Vec<f64>>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ContextRecord {
    id: String,
    vectors: Vec<Vec<f64>>,
}

impl ContextualStore {
    pub fn new(dim: usize) -> Self {
        ContextualStore {
            dim,
            docs: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn insert(&mut self, doc_id: impl Into<String>, vectors: Vec<Vec<f64>>) -> Result<()> {
        let doc_id = doc_id.into();
        if let Some(v) = vectors.iter().find(|v| v.len() != self.dim) {
            return Err(Error::shape(format!(
                "document {doc_id:?}: contextual vector of {} values, store dimension is {}",
                v.len(),
                self.dim
            )));
        }
        if self.docs.insert(doc_id.clone(), vectors).is_some() {
            return Err(Error::DuplicateId(doc_id));
        }
        Ok(())
    }

    pub fn get(&self, doc_id: &str, token: usize) -> Result<&[f64]> {
        self.docs
            .get(doc_id)
            .and_then(|v| v.get(token))
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingContext {
                doc: doc_id.to_string(),
                token,
            })
    }

    /// Confirms every token of every sequence has a vector, and that the
    /// per-document counts agree exactly.
    pub fn check_coverage<'a>(&self, seqs: impl IntoIterator<Item = &'a TokenSequence>) -> Result<()> {
        for s in seqs {
            let have = self.docs.get(&s.doc_id).map(Vec::len);
            if have != Some(s.len()) {
                return Err(Error::Mismatch(format!(
                    "document {:?} has {} tokens but {} contextual vectors",
                    s.doc_id,
                    s.len(),
                    have.map_or("no".to_string(), |n| n.to_string())
                )));
            }
        }
        Ok(())
    }

    /// One JSON record per document: `{"id": ..., "vectors": [[...], ...]}`.
    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self> {
        let mut store: Option<ContextualStore> = None;
        for (idx, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::Invalid {
                line: idx + 1,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ContextRecord = serde_json::from_str(&line).map_err(|source| Error::Json {
                line: idx + 1,
                source,
            })?;
            let dim = rec.vectors.first().map(Vec::len);
            let s = store.get_or_insert_with(|| ContextualStore::new(dim.unwrap_or(0)));
            if s.docs.is_empty() && s.dim == 0 {
                s.dim = dim.unwrap_or(0);
            }
            s.insert(rec.id, rec.vectors).map_err(|e| Error::Invalid {
                line: idx + 1,
                message: e.to_string(),
            })?;
        }
        Ok(store.unwrap_or_default())
    }

    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_jsonl(corpus::open(path.as_ref())?)
    }

    /// Writes records sorted by document id.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let mut ids: Vec<&String> = self.docs.keys().collect();
        ids.sort();
        for id in ids {
            let rec = ContextRecord {
                id: id.clone(),
                vectors: self.docs[id].clone(),
            };
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(w, "{line}").map_err(|e| Error::io("<output>", e))?;
        }
        w.flush().map_err(|e| Error::io("<output>", e))
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_jsonl(BufWriter::new(file))
    }
}

/// The trainable embedding parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingParams {
    pub syllables: SyllableTable,
    pub chars: Option<CharEncoder>,
}

impl EmbeddingParams {
    pub fn trainable_dim(&self) -> usize {
        self.syllables.dim() + self.chars.as_ref().map_or(0, CharEncoder::out_dim)
    }

    pub fn validate(&self) -> Result<()> {
        self.syllables.validate()?;
        if let Some(c) = &self.chars {
            c.validate()?;
        }
        Ok(())
    }
}

impl Tensors for EmbeddingParams {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut out = vec![self.syllables.matrix.as_slice()];
        if let Some(c) = &self.chars {
            out.extend(c.tensors());
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self.syllables.matrix.as_mut_slice()];
        if let Some(c) = &mut self.chars {
            out.extend(c.tensors_mut());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedSequence {
    pub dim: usize,
    pub vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct EmbedCache {
    rows: Vec<usize>,
    chars: Vec<CharCache>,
}

pub fn embed_sequence(
    tokens: &TokenSequence,
    table: &SyllableTable,
    chars: Option<&CharEncoder>,
    ctx: Option<&ContextualStore>,
) -> Result<EmbeddedSequence> {
    Ok(embed_cached(tokens, table, chars, ctx)?.0)
}

/// `[syllable row | char-BiLSTM | contextual]` for every token.
pub fn embed_cached(
    tokens: &TokenSequence,
    table: &SyllableTable,
    chars: Option<&CharEncoder>,
    ctx: Option<&ContextualStore>,
) -> Result<(EmbeddedSequence, EmbedCache)> {
    let dim = table.dim() + chars.map_or(0, CharEncoder::out_dim) + ctx.map_or(0, ContextualStore::dim);
    let mut vectors = Vec::with_capacity(tokens.len());
    let mut cache = EmbedCache {
        rows: Vec::with_capacity(tokens.len()),
        chars: Vec::new(),
    };
    for (t, tok) in tokens.tokens.iter().enumerate() {
        let row = table.row_for(&tok.text);
        let mut v = Vec::with_capacity(dim);
        v.extend_from_slice(table.matrix.row(row));
        cache.rows.push(row);
        if let Some(enc) = chars {
            let (out, c) = enc.encode_cached(&tok.text)?;
            v.extend(out);
            cache.chars.push(c);
        }
        if let Some(store) = ctx {
            v.extend_from_slice(store.get(&tokens.doc_id, t)?);
        }
        vectors.push(v);
    }
    Ok((EmbeddedSequence { dim, vectors }, cache))
}

/// Routes `d_vectors` into the syllable rows and the character encoder.
/// The contextual slice is frozen and receives nothing.
pub fn embed_backward(
    params: &EmbeddingParams,
    cache: &EmbedCache,
    d_vectors: &[Vec<f64>],
    grads: &mut EmbeddingParams,
) -> Result<()> {
    if d_vectors.len() != cache.rows.len() {
        return Err(Error::shape(format!(
            "{} embedding gradients for {} tokens",
            d_vectors.len(),
            cache.rows.len()
        )));
    }
    let ds = params.syllables.dim();
    for (t, d) in d_vectors.iter().enumerate() {
        add_assign(grads.syllables.matrix.row_mut(cache.rows[t]), &d[..ds]);
        if let (Some(enc), Some(g)) = (&params.chars, grads.chars.as_mut()) {
            enc.backward(&cache.chars[t], &d[ds..ds + enc.out_dim()], g);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tagging::{tokenize, TokenSequence};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(text: &str, id: &str) -> TokenSequence {
        TokenSequence {
            doc_id: id.into(),
            ..tokenize(text)
        }
    }

    #[test]
    fn dimension_bookkeeping() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let table = SyllableTable::random(["pin".to_string()], 6, &mut r);
        let enc = CharEncoder::init("pint".chars(), 3, 4, &mut r);
        let e = embed_sequence(&seq("pin tốt", "d"), &table, Some(&enc), None).unwrap();
        assert_eq!(e.dim, 6 + 8);
        assert!(e.vectors.iter().all(|v| v.len() == 14));
    }

    #[test]
    fn unseen_token_uses_unk_row() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let table = SyllableTable::random(["pin".to_string()], 4, &mut r);
        let e = embed_sequence(&seq("xyz", "d"), &table, None, None).unwrap();
        assert_eq!(e.vectors[0], table.matrix.row(table.unk_row()));
        assert_ne!(table.vector("pin"), table.matrix.row(table.unk_row()));
    }

    #[test]
    fn zero_char_encoder_gives_zero_vector() {
        let table = SyllableTable::random(Vec::<String>::new(), 2, &mut ChaCha8Rng::seed_from_u64(2));
        let enc = CharEncoder::zeros("abc".chars(), 3, 5);
        let e = embed_sequence(&seq("abc cab", "d"), &table, Some(&enc), None).unwrap();
        for v in &e.vectors {
            assert!(v[2..].iter().all(|x| *x == 0.0));
        }
    }

    #[test]
    fn contextual_vectors_are_appended_and_required() {
        let table = SyllableTable::random(Vec::<String>::new(), 2, &mut ChaCha8Rng::seed_from_u64(3));
        let mut store = ContextualStore::new(3);
        store.insert("d", vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let e = embed_sequence(&seq("a b", "d"), &table, None, Some(&store)).unwrap();
        assert_eq!(e.dim, 5);
        assert_eq!(&e.vectors[1][2..], &[4.0, 5.0, 6.0]);
        assert!(matches!(
            embed_sequence(&seq("a b c", "d"), &table, None, Some(&store)),
            Err(Error::MissingContext { token: 2, .. })
        ));
        assert!(embed_sequence(&seq("a", "other"), &table, None, Some(&store)).is_err());
        assert!(store.insert("e", vec![vec![0.0; 2]]).is_err());
    }

    #[test]
    fn contextual_store_jsonl_round_trip() {
        let input = "{\"id\":\"b\",\"vectors\":[[0.5,1.0]]}\n{\"id\":\"a\",\"vectors\":[[1.0,2.0],[3.0,4.0]]}\n";
        let store = ContextualStore::read_jsonl(input.as_bytes()).unwrap();
        assert_eq!(store.dim(), 2);
        assert_eq!(store.get("a", 1).unwrap(), &[3.0, 4.0]);
        let mut out = Vec::new();
        store.write_jsonl(&mut out).unwrap();
        let back = ContextualStore::read_jsonl(out.as_slice()).unwrap();
        assert_eq!(back, store);
        let ragged = "{\"id\":\"a\",\"vectors\":[[1.0,2.0],[3.0]]}\n";
        assert!(ContextualStore::read_jsonl(ragged.as_bytes()).is_err());
        assert!(store.check_coverage([&seq("x", "b")]).is_ok());
        assert!(store.check_coverage([&seq("x y", "b")]).is_err());
    }

    #[test]
    fn pretrained_two_lines() {
        let p = read_pretrained("pin 0.1 0.2 0.3\ntốt -1 0 1\n".as_bytes()).unwrap();
        assert_eq!(p.table.vocab.len(), 2);
        assert_eq!(p.table.matrix.rows(), 3);
        assert_eq!(p.table.vector("tốt"), &[-1.0, 0.0, 1.0]);
        assert_eq!(p.table.matrix.row(2), &[0.0; 3]);
    }

    #[test]
    fn pretrained_ragged_line_names_line() {
        let err = read_pretrained("a 1 2 3\nb 1 2\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Invalid { line: 2, .. }), "{err}");
        let err = read_pretrained("a 1 x 3\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Invalid { line: 1, .. }), "{err}");
    }

    #[test]
    fn pretrained_duplicate_keeps_first() {
        let p = read_pretrained("a 1 2\na 3 4\n".as_bytes()).unwrap();
        assert_eq!(p.table.vocab.len(), 1);
        assert_eq!(p.table.vector("a"), &[1.0, 2.0]);
        assert_eq!(p.duplicates, vec![(2, "a".to_string())]);
    }

    #[test]
    fn pretrained_header_is_skipped() {
        let p = read_pretrained("2 2\na 1 2\nb 3 4\n".as_bytes()).unwrap();
        assert_eq!(p.table.vocab.len(), 2);
    }

    #[test]
    fn extend_keeps_unk_last() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let mut t = read_pretrained("a 1 2\n".as_bytes()).unwrap().table;
        t.extend(["b".to_string(), "a".to_string()], &mut r);
        assert_eq!(t.vocab.len(), 2);
        assert_eq!(t.vector("a"), &[1.0, 2.0]);
        assert_eq!(t.matrix.row(t.unk_row()), &[0.0, 0.0]);
        t.validate().unwrap();
    }

    #[test]
    fn embedding_is_deterministic() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let table = SyllableTable::random(["a".to_string()], 3, &mut r);
        let enc = CharEncoder::init("ab".chars(), 2, 3, &mut r);
        let s = seq("a ba ab", "d");
        let x = embed_sequence(&s, &table, Some(&enc), None).unwrap();
        let y = embed_sequence(&s, &table, Some(&enc), None).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn embedding_gradients_match_finite_differences() {
        use crate::gradcheck::check;
        use rand::Rng;
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let params = EmbeddingParams {
            syllables: SyllableTable::random(["ab".to_string(), "c".to_string()], 3, &mut r),
            chars: Some(CharEncoder::init("abc".chars(), 2, 3, &mut r)),
        };
        let s = seq("ab c xa ab", "d");
        let dim = params.trainable_dim();
        let w: Vec<Vec<f64>> = (0..s.len())
            .map(|_| (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect())
            .collect();
        let loss = |p: &EmbeddingParams| {
            let e = embed_sequence(&s, &p.syllables, p.chars.as_ref(), None).unwrap();
            e.vectors.iter().zip(&w).map(|(a, b)| crate::tensor::dot(a, b)).sum::<f64>()
        };
        let (_, cache) = embed_cached(&s, &params.syllables, params.chars.as_ref(), None).unwrap();
        let mut g = params.zeroed();
        embed_backward(&params, &cache, &w, &mut g).unwrap();
        let res = check(&params, &g, loss, 50);
        assert!(res.passed(), "{res:?}");
    }
}
