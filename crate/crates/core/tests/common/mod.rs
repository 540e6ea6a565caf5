#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spantag::corpus::{Aspect, Corpus, Document, Label, Polarity, SpanAnnotation};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

const SYLLABLES: &[&str] = &[
    "pin", "trâu", "giá", "rẻ", "màn", "hình", "đẹp", "camera", "ổn", "máy", "nóng", "quá", "x", "ạ", "sạc",
    "nhanh", "#", "100%", "loa", "to",
];

pub fn random_label(r: &mut ChaCha8Rng) -> Label {
    Label::new(
        Aspect::ALL[r.gen_range(0..Aspect::ALL.len())],
        [Polarity::Positive, Polarity::Negative, Polarity::Neutral][r.gen_range(0..3)],
    )
}

/// A document of whitespace-separated syllables with non-overlapping spans
/// whose boundaries coincide with token boundaries.
pub fn random_document(id: &str, r: &mut ChaCha8Rng) -> Document {
    let n = r.gen_range(0..16);
    let mut text = String::new();
    let mut bounds = Vec::new();
    let mut pos = 0usize;
    for i in 0..n {
        if i > 0 || r.gen_bool(0.2) {
            let gap = r.gen_range(1..3);
            let sep = if r.gen_bool(0.8) { " " } else { "\t" };
            for _ in 0..gap {
                text.push_str(sep);
            }
            pos += gap;
        }
        let tok = SYLLABLES[r.gen_range(0..SYLLABLES.len())];
        text.push_str(tok);
        let len = tok.chars().count();
        bounds.push((pos, pos + len));
        pos += len;
    }
    let mut spans = Vec::new();
    let mut i = 0;
    while i < n {
        if r.gen_bool(0.35) {
            let len = r.gen_range(1..=3).min(n - i);
            spans.push(SpanAnnotation::new(bounds[i].0, bounds[i + len - 1].1, random_label(r)));
            i += len;
        } else {
            i += 1;
        }
    }
    Document::new(id, text, spans).unwrap()
}

pub fn random_corpus(n: usize, r: &mut ChaCha8Rng) -> Corpus {
    let docs = (0..n).map(|i| random_document(&format!("d{i}"), r)).collect();
    Corpus::new("random", docs).unwrap()
}

pub const TRIGGERS: [(usize, Aspect); 3] = [(0, Aspect::Price), (1, Aspect::Battery), (2, Aspect::Camera)];

/// Sentences over the vocabulary `w00..w49`; tokens `w00`, `w01`, `w02`
/// always form one-token spans of PRICE, BATTERY and CAMERA, and nothing
/// else is labeled.
pub fn trigger_corpus(name: &str, n: usize, seed: u64) -> Corpus {
    let mut r = rng(seed);
    let mut docs = Vec::with_capacity(n);
    for d in 0..n {
        let len = r.gen_range(4..=12);
        let mut words: Vec<usize> = (0..len).map(|_| r.gen_range(3..50)).collect();
        for _ in 0..r.gen_range(1..=2) {
            let at = r.gen_range(0..len);
            words[at] = r.gen_range(0..3);
        }
        let mut text = String::new();
        let mut spans = Vec::new();
        for (i, w) in words.iter().enumerate() {
            if i > 0 {
                text.push(' ');
            }
            let start = text.chars().count();
            text.push_str(&format!("w{w:02}"));
            if let Some((_, aspect)) = TRIGGERS.iter().find(|(t, _)| t == w) {
                spans.push(SpanAnnotation::new(start, start + 3, Label::new(*aspect, Polarity::Positive)));
            }
        }
        docs.push(Document::new(format!("{name}{d}"), text, spans).unwrap());
    }
    Corpus::new(name, docs).unwrap()
}

pub fn random_matrix(n: usize, k: usize, scale: f64, r: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..k).map(|_| r.gen_range(-scale..scale)).collect())
        .collect()
}
