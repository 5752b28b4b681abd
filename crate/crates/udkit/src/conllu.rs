//! Lossless CoNLL-U treebank reading and writing.
//!
//! CoNLL-U is a line-oriented format: ten tab-separated columns per word,
//! `#` comment lines, multiword-token range lines (`3-4`), empty-node lines
//! (`5.1`), and blank lines separating sentences. Parsing here is lossless:
//! everything that is not a plain word line is preserved verbatim so that
//! `parse -> serialize` reproduces the input byte for byte (modulo trailing
//! newline and CRLF normalization).

use std::collections::HashSet;
use std::fmt;

use thiserror::Error;

/// Placeholder for an unset column value.
pub const UNSET: &str = "_";

/// One syntactic word of a sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    /// 1-based word index within the sentence.
    pub id: usize,
    /// Surface form.
    pub form: String,
    /// Lemma, if annotated.
    pub lemma: Option<String>,
    /// Universal part-of-speech tag, if annotated.
    pub upos: Option<String>,
    /// Treebank-specific tag column, kept verbatim.
    pub xpos: String,
    /// Morphological feature string, kept verbatim (`_` when unset).
    pub ufeats: String,
    /// Head word index (0 = root), if annotated.
    pub head: Option<usize>,
    /// Dependency relation, if annotated.
    pub deprel: Option<String>,
    /// Enhanced dependencies column, kept verbatim.
    pub deps: String,
    /// Miscellaneous column, kept verbatim.
    pub misc: String,
}

impl Token {
    /// A token with only an id and form; everything else unset.
    pub fn bare(id: usize, form: &str) -> Self {
        Token {
            id,
            form: form.to_string(),
            lemma: None,
            upos: None,
            xpos: UNSET.to_string(),
            ufeats: UNSET.to_string(),
            head: None,
            deprel: None,
            deps: UNSET.to_string(),
            misc: UNSET.to_string(),
        }
    }
}

/// A multiword-token range line (`start-end`), emitted before word `start`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MwtRange {
    pub start: usize,
    pub end: usize,
    /// Surface form of the multiword token.
    pub form: String,
    /// The full original line, re-emitted verbatim.
    pub raw: String,
}

/// An empty-node line (`anchor.index`), emitted after word `anchor`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmptyNode {
    /// Word after which the node appears (0 = before the first word).
    pub anchor: usize,
    /// Sub-index after the dot.
    pub index: usize,
    /// The full original line, re-emitted verbatim.
    pub raw: String,
}

/// A parsed sentence: word tokens plus everything needed for lossless
/// round-tripping.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Sentence {
    /// Comment lines (including the leading `#`), in file order.
    pub comments: Vec<String>,
    /// Word tokens with ids `1..=n`.
    pub tokens: Vec<Token>,
    pub mwt_ranges: Vec<MwtRange>,
    pub empty_nodes: Vec<EmptyNode>,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Word forms in order.
    pub fn forms(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.form.as_str()).collect()
    }
}

/// A concatenation of treebanks with per-sentence provenance.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    /// Sentences paired with the id of the treebank they came from.
    pub sentences: Vec<(Sentence, String)>,
    /// Per-treebank sentence counts, in input order.
    pub counts: Vec<(String, usize)>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

/// Parse failure, with the 1-based line number of the offending input line.
#[derive(Debug, Error, PartialEq, Eq)]
#[error("line {line}: {kind}")]
pub struct ParseError {
    pub line: usize,
    pub kind: ParseErrorKind,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseErrorKind {
    #[error("expected 10 tab-separated columns, found {0}")]
    ColumnCount(usize),
    #[error("invalid token id {found:?}: expected {expected}")]
    NonConsecutiveId { found: String, expected: usize },
    #[error("invalid id field {0:?}")]
    BadId(String),
    #[error("head {head} out of range for a {len}-word sentence")]
    HeadOutOfRange { head: usize, len: usize },
    #[error("token {id} is its own head")]
    SelfHead { id: usize },
    #[error("invalid head field {0:?}")]
    BadHead(String),
    #[error("multiword range {0:?} does not match the following word ids")]
    BadMwtRange(String),
}

/// An invariant violation found by [`validate_sentence`]. Violations are
/// data, not errors: a fully annotated sentence yields an empty list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    /// Token ids are not `1..=n` consecutive.
    NonConsecutiveIds { position: usize, found: usize },
    /// A head points outside `[0, n]`.
    HeadOutOfRange { id: usize, head: usize },
    /// A token is its own head.
    SelfHead { id: usize },
    /// More than one token has head 0.
    MultipleRoots { ids: Vec<usize> },
    /// All heads are annotated but none is 0.
    NoRoot,
    /// The head graph contains a cycle through these token ids.
    HeadCycle { ids: Vec<usize> },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NonConsecutiveIds { position, found } => {
                write!(f, "token at position {position} has id {found}")
            }
            Violation::HeadOutOfRange { id, head } => {
                write!(f, "token {id} has out-of-range head {head}")
            }
            Violation::SelfHead { id } => write!(f, "token {id} is its own head"),
            Violation::MultipleRoots { ids } => write!(f, "multiple roots: {ids:?}"),
            Violation::NoRoot => write!(f, "no token has head 0"),
            Violation::HeadCycle { ids } => write!(f, "head cycle through {ids:?}"),
        }
    }
}

/// Parse a CoNLL-U document into sentences.
///
/// Tolerates CRLF line endings and any number of blank lines between
/// sentences. Errors carry the offending 1-based line number.
pub fn parse_document(text: &str) -> Result<Vec<Sentence>, ParseError> {
    let mut sentences = Vec::new();
    let mut current = SentenceBuilder::default();

    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.strip_suffix('\r').unwrap_or(raw_line);

        if line.is_empty() {
            if let Some(sentence) = current.finish(line_no)? {
                sentences.push(sentence);
            }
            current = SentenceBuilder::default();
        } else {
            current.push_line(line, line_no)?;
        }
    }
    if let Some(sentence) = current.finish(text.lines().count() + 1)? {
        sentences.push(sentence);
    }

    Ok(sentences)
}

#[derive(Default)]
struct SentenceBuilder {
    sentence: Sentence,
    saw_content: bool,
    /// (head, line_no) per token, checked against n when the sentence ends.
    pending_heads: Vec<(usize, usize)>,
}

impl SentenceBuilder {
    fn push_line(&mut self, line: &str, line_no: usize) -> Result<(), ParseError> {
        self.saw_content = true;

        if line.starts_with('#') {
            self.sentence.comments.push(line.to_string());
            return Ok(());
        }

        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 10 {
            return Err(ParseError {
                line: line_no,
                kind: ParseErrorKind::ColumnCount(cols.len()),
            });
        }

        let id_field = cols[0];
        if let Some((a, b)) = id_field.split_once('-') {
            let (start, end) = match (a.parse::<usize>(), b.parse::<usize>()) {
                (Ok(s), Ok(e)) if s >= 1 && e >= s => (s, e),
                _ => {
                    return Err(ParseError {
                        line: line_no,
                        kind: ParseErrorKind::BadMwtRange(id_field.to_string()),
                    })
                }
            };
            if start != self.sentence.tokens.len() + 1 {
                return Err(ParseError {
                    line: line_no,
                    kind: ParseErrorKind::BadMwtRange(id_field.to_string()),
                });
            }
            self.sentence.mwt_ranges.push(MwtRange {
                start,
                end,
                form: cols[1].to_string(),
                raw: line.to_string(),
            });
            return Ok(());
        }

        if let Some((a, b)) = id_field.split_once('.') {
            let (anchor, index) = match (a.parse::<usize>(), b.parse::<usize>()) {
                (Ok(x), Ok(i)) => (x, i),
                _ => {
                    return Err(ParseError {
                        line: line_no,
                        kind: ParseErrorKind::BadId(id_field.to_string()),
                    })
                }
            };
            self.sentence.empty_nodes.push(EmptyNode {
                anchor,
                index,
                raw: line.to_string(),
            });
            return Ok(());
        }

        let expected = self.sentence.tokens.len() + 1;
        let id: usize = id_field.parse().map_err(|_| ParseError {
            line: line_no,
            kind: ParseErrorKind::BadId(id_field.to_string()),
        })?;
        if id != expected {
            return Err(ParseError {
                line: line_no,
                kind: ParseErrorKind::NonConsecutiveId {
                    found: id_field.to_string(),
                    expected,
                },
            });
        }

        let head = match cols[6] {
            UNSET => None,
            h => Some(h.parse::<usize>().map_err(|_| ParseError {
                line: line_no,
                kind: ParseErrorKind::BadHead(h.to_string()),
            })?),
        };
        if let Some(h) = head {
            if h == id {
                return Err(ParseError {
                    line: line_no,
                    kind: ParseErrorKind::SelfHead { id },
                });
            }
            self.pending_heads.push((h, line_no));
        }

        let opt = |s: &str| {
            if s == UNSET {
                None
            } else {
                Some(s.to_string())
            }
        };

        self.sentence.tokens.push(Token {
            id,
            form: cols[1].to_string(),
            lemma: opt(cols[2]),
            upos: opt(cols[3]),
            xpos: cols[4].to_string(),
            ufeats: cols[5].to_string(),
            head,
            deprel: opt(cols[7]),
            deps: cols[8].to_string(),
            misc: cols[9].to_string(),
        });
        Ok(())
    }

    fn finish(self, line_no: usize) -> Result<Option<Sentence>, ParseError> {
        if !self.saw_content {
            return Ok(None);
        }
        let len = self.sentence.tokens.len();
        for (head, head_line) in &self.pending_heads {
            if *head > len {
                return Err(ParseError {
                    line: *head_line,
                    kind: ParseErrorKind::HeadOutOfRange { head: *head, len },
                });
            }
        }
        let _ = line_no;
        Ok(Some(self.sentence))
    }
}

/// Serialize sentences back to CoNLL-U text (LF line endings, one blank
/// line after each sentence).
pub fn serialize_document(sentences: &[Sentence]) -> String {
    let mut out = String::new();
    for sentence in sentences {
        serialize_sentence(sentence, &mut out);
        out.push('\n');
    }
    out
}

fn serialize_sentence(sentence: &Sentence, out: &mut String) {
    for comment in &sentence.comments {
        out.push_str(comment);
        out.push('\n');
    }
    // Empty nodes anchored at 0 precede the first word.
    for node in &sentence.empty_nodes {
        if node.anchor == 0 {
            out.push_str(&node.raw);
            out.push('\n');
        }
    }
    for token in &sentence.tokens {
        for mwt in &sentence.mwt_ranges {
            if mwt.start == token.id {
                out.push_str(&mwt.raw);
                out.push('\n');
            }
        }
        serialize_token(token, out);
        for node in &sentence.empty_nodes {
            if node.anchor == token.id {
                out.push_str(&node.raw);
                out.push('\n');
            }
        }
    }
}

fn serialize_token(token: &Token, out: &mut String) {
    let opt = |v: &Option<String>| v.clone().unwrap_or_else(|| UNSET.to_string());
    let head = token
        .head
        .map(|h| h.to_string())
        .unwrap_or_else(|| UNSET.to_string());
    out.push_str(&format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
        token.id,
        token.form,
        opt(&token.lemma),
        opt(&token.upos),
        token.xpos,
        token.ufeats,
        head,
        opt(&token.deprel),
        token.deps,
        token.misc,
    ));
}

/// Check sentence invariants, returning every violation found.
pub fn validate_sentence(sentence: &Sentence) -> Vec<Violation> {
    let mut violations = Vec::new();
    let n = sentence.tokens.len();

    for (pos, token) in sentence.tokens.iter().enumerate() {
        if token.id != pos + 1 {
            violations.push(Violation::NonConsecutiveIds {
                position: pos + 1,
                found: token.id,
            });
        }
    }

    let mut roots = Vec::new();
    let mut all_heads_set = !sentence.tokens.is_empty();
    for token in &sentence.tokens {
        match token.head {
            Some(0) => roots.push(token.id),
            Some(h) if h > n => violations.push(Violation::HeadOutOfRange {
                id: token.id,
                head: h,
            }),
            Some(h) if h == token.id => violations.push(Violation::SelfHead { id: token.id }),
            Some(_) => {}
            None => all_heads_set = false,
        }
    }
    if roots.len() > 1 {
        violations.push(Violation::MultipleRoots { ids: roots });
    } else if roots.is_empty() && all_heads_set {
        violations.push(Violation::NoRoot);
    }

    // Cycle detection by chasing heads from every node; in-range heads only.
    let mut reported: HashSet<usize> = HashSet::new();
    for start in 1..=n {
        let mut seen = vec![false; n + 1];
        let mut id = start;
        loop {
            if seen[id] {
                // Walk the cycle once more to collect its members.
                let mut cycle = vec![id];
                let mut cur = sentence.tokens[id - 1].head.unwrap();
                while cur != id {
                    cycle.push(cur);
                    cur = sentence.tokens[cur - 1].head.unwrap();
                }
                cycle.sort_unstable();
                if reported.insert(cycle[0]) {
                    violations.push(Violation::HeadCycle { ids: cycle });
                }
                break;
            }
            seen[id] = true;
            match sentence.tokens[id - 1].head {
                Some(h) if h >= 1 && h <= n && h != id => id = h,
                _ => break,
            }
        }
    }

    violations
}

/// Concatenate parsed treebanks into one dataset, preserving per-sentence
/// provenance and input order.
pub fn concat_treebanks(
    treebanks: Vec<(String, Vec<Sentence>)>,
) -> Result<Dataset, DuplicateTreebank> {
    let mut dataset = Dataset::default();
    let mut seen = HashSet::new();
    for (id, sentences) in treebanks {
        if !seen.insert(id.clone()) {
            return Err(DuplicateTreebank { id });
        }
        dataset.counts.push((id.clone(), sentences.len()));
        for sentence in sentences {
            dataset.sentences.push((sentence, id.clone()));
        }
    }
    Ok(dataset)
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("duplicate treebank id {id:?}")]
pub struct DuplicateTreebank {
    pub id: String,
}

/// Distinct-string counts per annotation column over a dataset. Unset
/// values (`_`) do not count; lemma scripts are counted over tokens with
/// both a form and a lemma.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VocabCounts {
    pub forms: usize,
    pub upos: usize,
    pub ufeats: usize,
    pub lemma_scripts: usize,
    pub deprels: usize,
}

pub fn vocab_counts(dataset: &Dataset) -> VocabCounts {
    let mut forms = HashSet::new();
    let mut upos = HashSet::new();
    let mut ufeats = HashSet::new();
    let mut scripts = HashSet::new();
    let mut deprels = HashSet::new();

    for (sentence, _) in &dataset.sentences {
        for token in &sentence.tokens {
            forms.insert(token.form.clone());
            if let Some(u) = &token.upos {
                upos.insert(u.clone());
            }
            if token.ufeats != UNSET {
                ufeats.insert(token.ufeats.clone());
            }
            if let Some(lemma) = &token.lemma {
                let script = crate::lemma::compute_lemma_script(&token.form, lemma);
                scripts.insert(crate::lemma::encode_tag(&script));
            }
            if let Some(d) = &token.deprel {
                deprels.insert(d.clone());
            }
        }
    }

    VocabCounts {
        forms: forms.len(),
        upos: upos.len(),
        ufeats: ufeats.len(),
        lemma_scripts: scripts.len(),
        deprels: deprels.len(),
    }
}
