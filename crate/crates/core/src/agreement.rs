//! Pairwise F1 agreement between annotators.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::str::FromStr;

use crate::corpus::{Corpus, Label};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Annotation {
    pub doc_id: String,
    pub label: Label,
    pub start: usize,
    pub end: usize,
}

/// One annotator's spans as a multiset, plus the documents they saw.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnnotationSet {
    pub annotator_id: String,
    pub annotations: BTreeMap<Annotation, usize>,
    pub documents: BTreeSet<String>,
}

impl AnnotationSet {
    pub fn new(annotator_id: impl Into<String>) -> Self {
        AnnotationSet {
            annotator_id: annotator_id.into(),
            ..Default::default()
        }
    }

    pub fn insert(&mut self, a: Annotation) {
        self.documents.insert(a.doc_id.clone());
        *self.annotations.entry(a).or_default() += 1;
    }

    pub fn from_corpus(annotator_id: impl Into<String>, corpus: &Corpus) -> Self {
        let mut set = AnnotationSet::new(annotator_id);
        for doc in &corpus.documents {
            set.documents.insert(doc.id.clone());
            for s in &doc.spans {
                set.insert(Annotation {
                    doc_id: doc.id.clone(),
                    label: s.label,
                    start: s.start,
                    end: s.end,
                });
            }
        }
        set
    }

    /// Size with multiplicity.
    pub fn len(&self) -> usize {
        self.annotations.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn filtered(&self, keep: impl Fn(&Annotation) -> bool) -> AnnotationSet {
        AnnotationSet {
            annotator_id: self.annotator_id.clone(),
            annotations: self
                .annotations
                .iter()
                .filter(|(a, _)| keep(a))
                .map(|(a, n)| (a.clone(), *n))
                .collect(),
            documents: self.documents.clone(),
        }
    }
}

/// Multiset intersection size: Σ min multiplicity.
pub fn intersection_size(a: &AnnotationSet, b: &AnnotationSet) -> usize {
    a.annotations
        .iter()
        .map(|(t, n)| (*n).min(b.annotations.get(t).copied().unwrap_or(0)))
        .sum()
}

/// `2|A∩B| / (|A|+|B|)`, 1 when both are empty.
pub fn pair_f1(a: &AnnotationSet, b: &AnnotationSet) -> f64 {
    let total = a.len() + b.len();
    if total == 0 {
        return 1.0;
    }
    2.0 * intersection_size(a, b) as f64 / total as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GroupBy {
    #[default]
    None,
    Document,
    Label,
}

impl FromStr for GroupBy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "global" => Ok(GroupBy::None),
            "document" | "doc" => Ok(GroupBy::Document),
            "label" => Ok(GroupBy::Label),
            other => Err(Error::Argument(format!("unknown grouping {other:?}"))),
        }
    }
}

/// Key used for the single group of [`GroupBy::None`].
pub const GLOBAL: &str = "ALL";

fn mean_over_pairs(sets: &[AnnotationSet]) -> f64 {
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            sum += pair_f1(&sets[i], &sets[j]);
            pairs += 1;
        }
    }
    sum / pairs as f64
}

/// Mean of [`pair_f1`] over all annotator pairs within each group. Document
/// groups cover every document any annotator saw; label groups cover every
/// label any annotator used.
pub fn mean_pairwise_f1(sets: &[AnnotationSet], group_by: GroupBy) -> Result<BTreeMap<String, f64>> {
    if sets.len() < 2 {
        return Err(Error::TooFewAnnotators(sets.len()));
    }
    let mut out = BTreeMap::new();
    match group_by {
        GroupBy::None => {
            out.insert(GLOBAL.to_string(), mean_over_pairs(sets));
        }
        GroupBy::Document => {
            let docs: BTreeSet<&String> = sets.iter().flat_map(|s| &s.documents).collect();
            for d in docs {
                let group: Vec<AnnotationSet> = sets.iter().map(|s| s.filtered(|a| &a.doc_id == d)).collect();
                out.insert(d.clone(), mean_over_pairs(&group));
            }
        }
        GroupBy::Label => {
            let labels: BTreeSet<Label> = sets
                .iter()
                .flat_map(|s| s.annotations.keys().map(|a| a.label))
                .collect();
            for l in labels {
                let group: Vec<AnnotationSet> = sets.iter().map(|s| s.filtered(|a| a.label == l)).collect();
                out.insert(l.to_string(), mean_over_pairs(&group));
            }
        }
    }
    Ok(out)
}

pub fn agreement_tsv(group_by: GroupBy, scores: &BTreeMap<String, f64>) -> String {
    let head = match group_by {
        GroupBy::None => "group",
        GroupBy::Document => "document",
        GroupBy::Label => "label",
    };
    let mut out = format!("{head}\tf1\n");
    for (k, v) in scores {
        let _ = writeln!(out, "{k}\t{v:.4}");
    }
    out
}
