//! Lemmatization as classification: edit scripts between forms and lemmas.
//!
//! A lemma is encoded as a discrete class describing how to rewrite the
//! word form: find the longest common substring between form and lemma,
//! then compute shortest edit scripts turning the form's prefix/suffix into
//! the lemma's prefix/suffix (Wagner–Fischer). If form and lemma share no
//! character at all, the class is a whole-word replacement. All operations
//! act on Unicode scalar values, never bytes.
//!
//! Tags have a stable textual encoding, `p:<ops>|s:<ops>` with `k`eep,
//! `d`elete, `s<c>`ubstitute, and `i<c>`nsert ops, or `r:<lemma>` for
//! whole-word replacements.

use std::fmt;

use thiserror::Error;

/// One character operation of an edit script.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum EditOp {
    /// Copy one source character.
    Keep,
    /// Drop one source character.
    Delete,
    /// Replace one source character with the given one.
    Substitute(char),
    /// Emit the given character without consuming the source.
    Insert(char),
}

/// An edit-script class mapping a word form to its lemma.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum EditScript {
    /// Prefix and suffix rewrite around a shared substring.
    Affix {
        prefix: Vec<EditOp>,
        suffix: Vec<EditOp>,
    },
    /// No shared character: delete the whole form, insert this lemma.
    Replace(String),
}

impl EditScript {
    /// The script that maps every form to itself.
    pub fn identity() -> Self {
        EditScript::Affix {
            prefix: Vec::new(),
            suffix: Vec::new(),
        }
    }
}

/// Longest common substring of `a` and `b`, as `(start_a, start_b, length)`
/// in character offsets. Ties prefer the smallest `start_a`, then the
/// smallest `start_b`; `(0, 0, 0)` when nothing is shared.
pub fn longest_common_substring(a: &str, b: &str) -> (usize, usize, usize) {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() || b.is_empty() {
        return (0, 0, 0);
    }

    // lengths[j]: length of the common substring ending at a[i-1], b[j-1].
    let mut lengths = vec![0usize; b.len() + 1];
    let mut best = (0usize, 0usize, 0usize);
    for i in 1..=a.len() {
        let mut prev_diag = 0;
        for j in 1..=b.len() {
            let up_left = prev_diag;
            prev_diag = lengths[j];
            lengths[j] = if a[i - 1] == b[j - 1] { up_left + 1 } else { 0 };
            let len = lengths[j];
            if len > 0 {
                let candidate = (i - len, j - len, len);
                if len > best.2
                    || (len == best.2 && (candidate.0, candidate.1) < (best.0, best.1))
                {
                    best = candidate;
                }
            }
        }
    }
    best
}

/// Shortest edit script from `source` to `target` under unit costs for
/// insert/delete/substitute (keep is free). Ties prefer keep, then
/// substitute, then delete, then insert.
pub fn shortest_edit_script(source: &str, target: &str) -> Vec<EditOp> {
    let src: Vec<char> = source.chars().collect();
    let tgt: Vec<char> = target.chars().collect();
    let (n, m) = (src.len(), tgt.len());

    #[derive(Clone, Copy, PartialEq)]
    enum Move {
        Start,
        Keep,
        Substitute,
        Delete,
        Insert,
    }

    // Flat (n+1) x (m+1) tables indexed [i * (m+1) + j].
    let w = m + 1;
    let mut cost = vec![0u32; (n + 1) * w];
    let mut back = vec![Move::Start; (n + 1) * w];
    for i in 1..=n {
        cost[i * w] = i as u32;
        back[i * w] = Move::Delete;
    }
    for j in 1..=m {
        cost[j] = j as u32;
        back[j] = Move::Insert;
    }
    for i in 1..=n {
        for j in 1..=m {
            // Candidates in tie-break preference order.
            let mut best_cost = u32::MAX;
            let mut best_move = Move::Start;
            if src[i - 1] == tgt[j - 1] {
                best_cost = cost[(i - 1) * w + (j - 1)];
                best_move = Move::Keep;
            }
            let sub = cost[(i - 1) * w + (j - 1)] + 1;
            if sub < best_cost {
                best_cost = sub;
                best_move = Move::Substitute;
            }
            let del = cost[(i - 1) * w + j] + 1;
            if del < best_cost {
                best_cost = del;
                best_move = Move::Delete;
            }
            let ins = cost[i * w + (j - 1)] + 1;
            if ins < best_cost {
                best_cost = ins;
                best_move = Move::Insert;
            }
            cost[i * w + j] = best_cost;
            back[i * w + j] = best_move;
        }
    }

    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        match back[i * w + j] {
            Move::Keep => {
                ops.push(EditOp::Keep);
                i -= 1;
                j -= 1;
            }
            Move::Substitute => {
                ops.push(EditOp::Substitute(tgt[j - 1]));
                i -= 1;
                j -= 1;
            }
            Move::Delete => {
                ops.push(EditOp::Delete);
                i -= 1;
            }
            Move::Insert => {
                ops.push(EditOp::Insert(tgt[j - 1]));
                j -= 1;
            }
            Move::Start => unreachable!("backtrace escaped the table"),
        }
    }
    ops.reverse();
    ops
}

/// Number of non-keep operations.
pub fn script_cost(ops: &[EditOp]) -> usize {
    ops.iter().filter(|op| **op != EditOp::Keep).count()
}

/// Number of source characters an op sequence consumes.
fn consumed(ops: &[EditOp]) -> usize {
    ops.iter()
        .filter(|op| !matches!(op, EditOp::Insert(_)))
        .count()
}

/// Build the edit script turning `form` into `lemma`.
pub fn compute_lemma_script(form: &str, lemma: &str) -> EditScript {
    let (start_f, start_l, len) = longest_common_substring(form, lemma);
    if len == 0 {
        return EditScript::Replace(lemma.to_string());
    }
    let form_chars: Vec<char> = form.chars().collect();
    let lemma_chars: Vec<char> = lemma.chars().collect();
    let slice = |chars: &[char], from: usize, to: usize| chars[from..to].iter().collect::<String>();

    let prefix = shortest_edit_script(
        &slice(&form_chars, 0, start_f),
        &slice(&lemma_chars, 0, start_l),
    );
    let suffix = shortest_edit_script(
        &slice(&form_chars, start_f + len, form_chars.len()),
        &slice(&lemma_chars, start_l + len, lemma_chars.len()),
    );
    EditScript::Affix { prefix, suffix }
}

/// Apply a script to a form. Never fails: if the script needs more
/// characters than the form has (an unseen form at inference time), the
/// form is returned unchanged and the flag is set.
pub fn apply_lemma_script(script: &EditScript, form: &str) -> (String, bool) {
    match script {
        EditScript::Replace(lemma) => (lemma.clone(), false),
        EditScript::Affix { prefix, suffix } => {
            let chars: Vec<char> = form.chars().collect();
            let take_front = consumed(prefix);
            let take_back = consumed(suffix);
            if take_front + take_back > chars.len() {
                return (form.to_string(), true);
            }
            let middle = chars.len() - take_back;
            let mut out = apply_ops(prefix, &chars[..take_front]);
            out.extend(&chars[take_front..middle]);
            out.extend(apply_ops(suffix, &chars[middle..]));
            (out.into_iter().collect(), false)
        }
    }
}

fn apply_ops(ops: &[EditOp], source: &[char]) -> Vec<char> {
    let mut out = Vec::with_capacity(source.len() + ops.len());
    let mut pos = 0;
    for op in ops {
        match op {
            EditOp::Keep => {
                out.push(source[pos]);
                pos += 1;
            }
            EditOp::Delete => pos += 1,
            EditOp::Substitute(c) => {
                out.push(*c);
                pos += 1;
            }
            EditOp::Insert(c) => out.push(*c),
        }
    }
    debug_assert_eq!(pos, source.len());
    out
}

/// A malformed script tag.
#[derive(Debug, Error, PartialEq, Eq)]
#[error("malformed script tag {tag:?}: {reason}")]
pub struct TagError {
    pub tag: String,
    pub reason: String,
}

fn write_ops(ops: &[EditOp], out: &mut String) {
    for op in ops {
        match op {
            EditOp::Keep => out.push('k'),
            EditOp::Delete => out.push('d'),
            EditOp::Substitute(c) => {
                out.push('s');
                out.push(*c);
            }
            EditOp::Insert(c) => {
                out.push('i');
                out.push(*c);
            }
        }
    }
}

/// Canonical textual form of a script.
pub fn encode_tag(script: &EditScript) -> String {
    match script {
        EditScript::Replace(lemma) => format!("r:{lemma}"),
        EditScript::Affix { prefix, suffix } => {
            let mut out = String::from("p:");
            write_ops(prefix, &mut out);
            out.push_str("|s:");
            write_ops(suffix, &mut out);
            out
        }
    }
}

impl fmt::Display for EditScript {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&encode_tag(self))
    }
}

/// Parse a textual script tag.
pub fn decode_tag(tag: &str) -> Result<EditScript, TagError> {
    let err = |reason: &str| TagError {
        tag: tag.to_string(),
        reason: reason.to_string(),
    };

    if let Some(lemma) = tag.strip_prefix("r:") {
        return Ok(EditScript::Replace(lemma.to_string()));
    }
    let rest = tag.strip_prefix("p:").ok_or_else(|| err("expected p: or r: prefix"))?;

    fn parse_ops(
        chars: &mut std::iter::Peekable<std::str::Chars<'_>>,
        stop_at_bar: bool,
        err: &impl Fn(&str) -> TagError,
    ) -> Result<Vec<EditOp>, TagError> {
        let mut ops = Vec::new();
        while let Some(&c) = chars.peek() {
            if c == '|' && stop_at_bar {
                break;
            }
            chars.next();
            let op = match c {
                'k' => EditOp::Keep,
                'd' => EditOp::Delete,
                's' => EditOp::Substitute(
                    chars.next().ok_or_else(|| err("substitute missing its character"))?,
                ),
                'i' => EditOp::Insert(
                    chars.next().ok_or_else(|| err("insert missing its character"))?,
                ),
                other => return Err(err(&format!("unknown op code {other:?}"))),
            };
            ops.push(op);
        }
        Ok(ops)
    }

    let mut chars = rest.chars().peekable();
    let prefix = parse_ops(&mut chars, true, &err)?;
    if chars.next() != Some('|') || chars.next() != Some('s') || chars.next() != Some(':') {
        return Err(err("expected |s: separator"));
    }
    let suffix = parse_ops(&mut chars, false, &err)?;
    Ok(EditScript::Affix { prefix, suffix })
}
