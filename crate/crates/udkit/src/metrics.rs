//! Gold-segmentation evaluation: tagging accuracies and attachment scores.
//!
//! Gold and system documents must align word for word (same sentence
//! count, same per-sentence word counts). Multiword-token surface lines
//! and empty nodes never enter the counts. All metrics score syntactic
//! words: UPOS/UFeats/Lemmas by exact string match, UAS by correct head,
//! LAS by correct head and relation, and CLAS as LAS restricted to words
//! whose gold relation is a content relation (not aux, case, cc, clf,
//! cop, det, mark, or punct).

use std::fmt::Write as _;

use thiserror::Error;

use crate::conllu::{Sentence, UNSET};

/// Relations excluded from CLAS, matched on the main type (the part
/// before any `:` subtype).
pub const FUNCTIONAL_RELATIONS: [&str; 8] =
    ["aux", "case", "cc", "clf", "cop", "det", "mark", "punct"];

/// A correct/total pair; 0/0 is undefined rather than zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MetricCount {
    pub correct: usize,
    pub total: usize,
}

impl MetricCount {
    pub fn fraction(&self) -> Option<f64> {
        if self.total == 0 {
            None
        } else {
            Some(self.correct as f64 / self.total as f64)
        }
    }

    fn add(&mut self, correct: bool) {
        self.total += 1;
        self.correct += usize::from(correct);
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvalReport {
    pub upos: MetricCount,
    pub ufeats: MetricCount,
    pub lemmas: MetricCount,
    pub uas: MetricCount,
    pub las: MetricCount,
    pub clas: MetricCount,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions {
    /// Compare only the main relation type, stripping `:` subtypes, for
    /// LAS and CLAS. Default: full-string comparison.
    pub strip_deprel_subtypes: bool,
}

/// Gold and system documents do not align.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum AlignmentError {
    #[error("gold has {gold} sentences but system has {system}")]
    SentenceCount { gold: usize, system: usize },
    #[error("sentence {index}: gold has {gold} words but system has {system}")]
    WordCount {
        index: usize,
        gold: usize,
        system: usize,
    },
}

fn main_type(deprel: &str) -> &str {
    deprel.split(':').next().unwrap_or(deprel)
}

/// Score a system document against gold under gold segmentation.
pub fn evaluate(
    gold: &[Sentence],
    system: &[Sentence],
    options: EvalOptions,
) -> Result<EvalReport, AlignmentError> {
    if gold.len() != system.len() {
        return Err(AlignmentError::SentenceCount {
            gold: gold.len(),
            system: system.len(),
        });
    }
    let mut report = EvalReport::default();
    for (index, (g, s)) in gold.iter().zip(system).enumerate() {
        if g.tokens.len() != s.tokens.len() {
            return Err(AlignmentError::WordCount {
                index: index + 1,
                gold: g.tokens.len(),
                system: s.tokens.len(),
            });
        }
        for (gt, st) in g.tokens.iter().zip(&s.tokens) {
            let unset = |v: &Option<String>| v.clone().unwrap_or_else(|| UNSET.to_string());
            report.upos.add(unset(&gt.upos) == unset(&st.upos));
            report.ufeats.add(gt.ufeats == st.ufeats);
            report.lemmas.add(unset(&gt.lemma) == unset(&st.lemma));

            let head_correct = gt.head == st.head;
            report.uas.add(head_correct);
            let gold_rel = unset(&gt.deprel);
            let system_rel = unset(&st.deprel);
            let rel_correct = if options.strip_deprel_subtypes {
                main_type(&gold_rel) == main_type(&system_rel)
            } else {
                gold_rel == system_rel
            };
            let attached = head_correct && rel_correct;
            report.las.add(attached);
            if !FUNCTIONAL_RELATIONS.contains(&main_type(&gold_rel)) {
                report.clas.add(attached);
            }
        }
    }
    Ok(report)
}

fn cell(count: MetricCount) -> String {
    match count.fraction() {
        Some(f) => format!("{:.2}", f * 100.0),
        None => "-".to_string(),
    }
}

/// Fixed-width two-row table with two-decimal percentages (UPOS, Feats,
/// Lem, UAS, LAS).
pub fn format_report(report: &EvalReport) -> String {
    let mut out = String::new();
    let headers = ["UPOS", "Feats", "Lem", "UAS", "LAS"];
    let values = [
        cell(report.upos),
        cell(report.ufeats),
        cell(report.lemmas),
        cell(report.uas),
        cell(report.las),
    ];
    for h in headers {
        let _ = write!(out, "{h:>8}");
    }
    out.push('\n');
    for v in values {
        let _ = write!(out, "{v:>8}");
    }
    out.push('\n');
    out
}

/// One `metric<TAB>fraction` line per metric (six decimals, `-` when
/// undefined), CLAS included.
pub fn machine_readable(report: &EvalReport) -> String {
    let line = |name: &str, count: MetricCount| match count.fraction() {
        Some(f) => format!("{name}\t{f:.6}\n"),
        None => format!("{name}\t-\n"),
    };
    [
        line("upos", report.upos),
        line("ufeats", report.ufeats),
        line("lemmas", report.lemmas),
        line("uas", report.uas),
        line("las", report.las),
        line("clas", report.clas),
    ]
    .concat()
}
