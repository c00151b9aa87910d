//! Intent accuracy, conlleval-style span F1, sentence-level semantic
//! accuracy and per-intent breakdowns.
//!
//! Tag sequences are compared after padding removal. A `[PAD]` prediction
//! opens no span but still counts as a wrong tag wherever the gold tag differs.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use crate::corpus::PAD_LABEL;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub label: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tag<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

pub fn parse_tag(tag: &str) -> Result<Tag<'_>> {
    if tag == "O" || tag == PAD_LABEL {
        return Ok(Tag::Outside);
    }
    let parsed = match tag.split_once('-') {
        Some(("B", t)) if !t.is_empty() => Tag::Begin(t),
        Some(("I", t)) if !t.is_empty() => Tag::Inside(t),
        _ => return Err(Error::InvalidArgument(format!("malformed BIO tag {tag:?}"))),
    };
    Ok(parsed)
}

/// Chunk a BIO sequence. In lenient mode an `I-t` that does not continue an
/// open `t` span starts a new one; in strict mode it is ignored.
pub fn extract_spans<S: AsRef<str>>(tags: &[S], strict: bool) -> Result<Vec<Span>> {
    let mut spans = Vec::new();
    let mut open: Option<(&str, usize)> = None;
    let parsed = tags.iter().map(|t| parse_tag(t.as_ref())).collect::<Result<Vec<_>>>()?;
    for (i, tag) in parsed.iter().enumerate() {
        let start_new = match *tag {
            Tag::Outside => None,
            Tag::Begin(t) => Some(t),
            Tag::Inside(t) => match open {
                Some((cur, _)) if cur == t => continue,
                _ if strict => None,
                _ => Some(t),
            },
        };
        if let Some((label, start)) = open.take() {
            spans.push(Span {
                label: label.to_string(),
                start,
                end: i - 1,
            });
        }
        open = start_new.map(|t| (t, i));
    }
    if let Some((label, start)) = open {
        spans.push(Span {
            label: label.to_string(),
            start,
            end: tags.len() - 1,
        });
    }
    Ok(spans)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlotScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1_score(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn check_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::InvalidArgument(format!(
            "{what}: {a} predictions vs {b} references"
        )));
    }
    Ok(())
}

/// Micro-averaged span precision, recall and F1 over a corpus.
pub fn slot_f1<S: AsRef<str>>(pred: &[Vec<S>], gold: &[Vec<S>], strict: bool) -> Result<SlotScore> {
    check_len("slot_f1", pred.len(), gold.len())?;
    let (mut correct, mut predicted, mut total_gold) = (0, 0, 0);
    for (i, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(Error::InvalidArgument(format!(
                "sentence {i}: {} predicted tags vs {} gold tags",
                p.len(),
                g.len()
            )));
        }
        let ps = extract_spans(p, strict)?;
        let gs: HashSet<Span> = extract_spans(g, strict)?.into_iter().collect();
        correct += ps.iter().filter(|s| gs.contains(s)).count();
        predicted += ps.len();
        total_gold += gs.len();
    }
    let precision = ratio(correct, predicted);
    let recall = ratio(correct, total_gold);
    Ok(SlotScore {
        precision,
        recall,
        f1: f1_score(precision, recall),
        correct,
        predicted,
        gold: total_gold,
    })
}

pub fn intent_accuracy<S: AsRef<str>>(pred: &[S], gold: &[S]) -> Result<f64> {
    check_len("intent_accuracy", pred.len(), gold.len())?;
    let hits = pred.iter().zip(gold).filter(|(p, g)| p.as_ref() == g.as_ref()).count();
    Ok(ratio(hits, gold.len()))
}

/// Fraction of sentences whose intent and every slot tag are right.
pub fn semantic_accuracy<S: AsRef<str>>(
    pred_intents: &[S],
    pred_tags: &[Vec<S>],
    gold_intents: &[S],
    gold_tags: &[Vec<S>],
) -> Result<f64> {
    check_len("semantic_accuracy", pred_intents.len(), gold_intents.len())?;
    check_len("semantic_accuracy", pred_tags.len(), gold_tags.len())?;
    check_len("semantic_accuracy", pred_intents.len(), pred_tags.len())?;
    let mut hits = 0;
    for i in 0..gold_intents.len() {
        let (p, g) = (&pred_tags[i], &gold_tags[i]);
        if p.len() != g.len() {
            return Err(Error::InvalidArgument(format!(
                "sentence {i}: {} predicted tags vs {} gold tags",
                p.len(),
                g.len()
            )));
        }
        let tags_ok = p.iter().zip(g).all(|(a, b)| a.as_ref() == b.as_ref());
        if tags_ok && pred_intents[i].as_ref() == gold_intents[i].as_ref() {
            hits += 1;
        }
    }
    Ok(ratio(hits, gold_intents.len()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntentRow {
    pub intent: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// One-vs-rest scores for every intent seen in either sequence, sorted by name.
pub fn per_intent_report<S: AsRef<str>>(pred: &[S], gold: &[S]) -> Result<Vec<IntentRow>> {
    check_len("per_intent_report", pred.len(), gold.len())?;
    // (true positives, predicted, support)
    let mut counts: BTreeMap<&str, (usize, usize, usize)> = BTreeMap::new();
    for (p, g) in pred.iter().zip(gold) {
        let (p, g) = (p.as_ref(), g.as_ref());
        counts.entry(p).or_default().1 += 1;
        let e = counts.entry(g).or_default();
        e.2 += 1;
        if p == g {
            e.0 += 1;
        }
    }
    Ok(counts
        .into_iter()
        .map(|(intent, (tp, predicted, support))| {
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            IntentRow {
                intent: intent.to_string(),
                precision,
                recall,
                f1: f1_score(precision, recall),
                support,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub intent_acc: f64,
    pub slot_precision: f64,
    pub slot_recall: f64,
    pub slot_f1: f64,
    pub semantic_acc: f64,
    pub per_intent: Vec<IntentRow>,
}

impl EvalReport {
    pub fn compute<S: AsRef<str>>(
        pred_intents: &[S],
        pred_tags: &[Vec<S>],
        gold_intents: &[S],
        gold_tags: &[Vec<S>],
        strict: bool,
    ) -> Result<Self> {
        let slots = slot_f1(pred_tags, gold_tags, strict)?;
        Ok(EvalReport {
            intent_acc: intent_accuracy(pred_intents, gold_intents)?,
            slot_precision: slots.precision,
            slot_recall: slots.recall,
            slot_f1: slots.f1,
            semantic_acc: semantic_accuracy(pred_intents, pred_tags, gold_intents, gold_tags)?,
            per_intent: per_intent_report(pred_intents, gold_intents)?,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in [
            ("intent_acc", self.intent_acc),
            ("slot_f1", self.slot_f1),
            ("semantic_acc", self.semantic_acc),
        ] {
            let _ = writeln!(s, "{k},{v:.4}");
        }
        s.push_str("intent,precision,recall,f1,support\n");
        for r in &self.per_intent {
            let _ = writeln!(
                s,
                "{},{:.4},{:.4},{:.4},{}",
                r.intent, r.precision, r.recall, r.f1, r.support
            );
        }
        s
    }
}
