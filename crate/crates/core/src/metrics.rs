//! Exact-match span precision, recall and F1, per label and averaged.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tagging::{ProjectedDocument, Scheme, SchemeSpan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn prf(&self) -> Prf {
        Prf::from_counts(self.tp, self.fp, self.fn_)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

impl Prf {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = ratio(tp as f64, (tp + fp) as f64);
        let recall = ratio(tp as f64, (tp + fn_) as f64);
        Prf {
            precision,
            recall,
            f1: ratio(2.0 * precision * recall, precision + recall),
        }
    }
}

/// Which labels the macro average ranges over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MacroMode {
    /// Labels that occur in gold or prediction.
    #[default]
    Observed,
    /// Every label of the scheme, absent ones scoring 0.
    Inventory,
}

impl FromStr for MacroMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "observed" => Ok(MacroMode::Observed),
            "inventory" | "all" => Ok(MacroMode::Inventory),
            other => Err(Error::Argument(format!("unknown macro mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelScore {
    pub counts: Counts,
    pub prf: Prf,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpanScore {
    pub per_label: BTreeMap<String, LabelScore>,
    pub micro: Prf,
    pub macro_: Prf,
}

impl SpanScore {
    pub fn from_counts(counts: &BTreeMap<String, Counts>) -> Self {
        let mut total = Counts::default();
        let per_label: BTreeMap<String, LabelScore> = counts
            .iter()
            .map(|(l, c)| {
                total.add(*c);
                (l.clone(), LabelScore { counts: *c, prf: c.prf() })
            })
            .collect();
        let n = per_label.len() as f64;
        let mean = |f: fn(&Prf) -> f64| ratio(per_label.values().map(|s| f(&s.prf)).sum(), n);
        let macro_ = Prf {
            precision: mean(|p| p.precision),
            recall: mean(|p| p.recall),
            f1: mean(|p| p.f1),
        };
        SpanScore {
            micro: total.prf(),
            macro_,
            per_label,
        }
    }

    pub fn totals(&self) -> Counts {
        let mut t = Counts::default();
        for s in self.per_label.values() {
            t.add(s.counts);
        }
        t
    }

    /// Tab-separated: a header, one row per label, then `MICRO` and `MACRO`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("label\ttp\tfp\tfn\tprecision\trecall\tf1\n");
        for (label, s) in &self.per_label {
            let c = s.counts;
            let _ = writeln!(
                out,
                "{label}\t{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}",
                c.tp, c.fp, c.fn_, s.prf.precision, s.prf.recall, s.prf.f1
            );
        }
        let t = self.totals();
        let _ = writeln!(
            out,
            "MICRO\t{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}",
            t.tp, t.fp, t.fn_, self.micro.precision, self.micro.recall, self.micro.f1
        );
        let _ = writeln!(
            out,
            "MACRO\t\t\t\t{:.4}\t{:.4}\t{:.4}",
            self.macro_.precision, self.macro_.recall, self.macro_.f1
        );
        out
    }
}

/// One-to-one exact matching of `(start, end, label)`. Only labels seen on
/// either side appear in the result.
pub fn match_spans(gold: &[SchemeSpan], pred: &[SchemeSpan]) -> BTreeMap<String, Counts> {
    let mut unmatched: HashMap<&SchemeSpan, usize> = HashMap::new();
    for g in gold {
        *unmatched.entry(g).or_default() += 1;
    }
    let mut out: BTreeMap<String, Counts> = BTreeMap::new();
    for p in pred {
        let c = out.entry(p.label.clone()).or_default();
        match unmatched.get_mut(p) {
            Some(n) if *n > 0 => {
                *n -= 1;
                c.tp += 1;
            }
            _ => c.fp += 1,
        }
    }
    for (g, n) in unmatched {
        out.entry(g.label.clone()).or_default().fn_ += n;
    }
    out
}

/// Pools counts over documents paired by id. Both sides must hold the same
/// set of ids.
pub fn score_corpus(
    gold: &[ProjectedDocument],
    pred: &[ProjectedDocument],
    scheme: Scheme,
    mode: MacroMode,
) -> Result<SpanScore> {
    let by_id: HashMap<&str, &ProjectedDocument> = pred.iter().map(|d| (d.id.as_str(), d)).collect();
    if by_id.len() != pred.len() {
        return Err(Error::Mismatch("prediction file repeats a document id".into()));
    }
    if gold.len() != pred.len() {
        return Err(Error::Mismatch(format!(
            "{} gold documents but {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    let mut counts: BTreeMap<String, Counts> = BTreeMap::new();
    if mode == MacroMode::Inventory {
        for l in scheme.labels() {
            counts.insert(l, Counts::default());
        }
    }
    for g in gold {
        let p = by_id
            .get(g.id.as_str())
            .ok_or_else(|| Error::Mismatch(format!("document {:?} has no prediction", g.id)))?;
        for (label, c) in match_spans(&g.spans, &p.spans) {
            counts.entry(label).or_default().add(c);
        }
    }
    Ok(SpanScore::from_counts(&counts))
}
