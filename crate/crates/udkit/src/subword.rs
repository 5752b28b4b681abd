//! Greedy wordpiece segmentation over a fixed vocabulary.
//!
//! Words are split by longest-match-first lookup; non-initial pieces carry
//! the `##` continuation marker, and a word with any unmatchable position
//! becomes the single unknown piece. Per-word prediction uses the first
//! piece of each word. Sequences longer than the encoder's position limit
//! are split into overlapping windows whose kept spans partition the
//! original sequence.

use std::collections::HashMap;

use thiserror::Error;

/// Continuation marker carried by non-initial pieces.
pub const CONTINUATION: &str = "##";

/// Default window length (in wordpieces, including the two specials).
pub const DEFAULT_MAX_LEN: usize = 512;
/// Default overlap between consecutive windows.
pub const DEFAULT_OVERLAP: usize = 256;

pub const UNK_PIECE: &str = "[UNK]";
pub const MASK_PIECE: &str = "[MASK]";
pub const SEQ_START_PIECE: &str = "[CLS]";
pub const SEQ_END_PIECE: &str = "[SEP]";

/// A fixed wordpiece vocabulary: dense ids `0..len`, one piece per line in
/// file form, with the four special pieces required to be present.
#[derive(Debug, Clone)]
pub struct SubwordVocab {
    pieces: Vec<String>,
    ids: HashMap<String, u32>,
    unk: u32,
    mask: u32,
    seq_start: u32,
    seq_end: u32,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VocabError {
    #[error("vocabulary is missing the special piece {0:?}")]
    MissingSpecial(&'static str),
}

impl SubwordVocab {
    /// Build a vocabulary from file contents: one piece per line, id =
    /// line number.
    pub fn from_lines(text: &str) -> Result<Self, VocabError> {
        Self::from_pieces(text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect())
    }

    pub fn from_pieces(pieces: Vec<String>) -> Result<Self, VocabError> {
        let mut ids = HashMap::with_capacity(pieces.len());
        for (i, piece) in pieces.iter().enumerate() {
            ids.entry(piece.clone()).or_insert(i as u32);
        }
        let special = |name: &'static str| {
            ids.get(name).copied().ok_or(VocabError::MissingSpecial(name))
        };
        Ok(SubwordVocab {
            unk: special(UNK_PIECE)?,
            mask: special(MASK_PIECE)?,
            seq_start: special(SEQ_START_PIECE)?,
            seq_end: special(SEQ_END_PIECE)?,
            pieces,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.ids.get(piece).copied()
    }

    pub fn piece(&self, id: u32) -> &str {
        &self.pieces[id as usize]
    }

    pub fn unk_id(&self) -> u32 {
        self.unk
    }

    pub fn mask_id(&self) -> u32 {
        self.mask
    }

    pub fn seq_start_id(&self) -> u32 {
        self.seq_start
    }

    pub fn seq_end_id(&self) -> u32 {
        self.seq_end
    }

    pub fn is_special(&self, id: u32) -> bool {
        id == self.unk || id == self.mask || id == self.seq_start || id == self.seq_end
    }
}

/// Greedy longest-match-first decomposition of one word. If any position
/// cannot be matched the whole word becomes the unknown piece.
pub fn tokenize_word(word: &str, vocab: &SubwordVocab) -> Vec<u32> {
    let chars: Vec<char> = word.chars().collect();
    if chars.is_empty() {
        return vec![vocab.unk_id()];
    }

    let mut out = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut end = chars.len();
        let mut matched = None;
        while start < end {
            let mut candidate: String = if start > 0 {
                CONTINUATION.to_string()
            } else {
                String::new()
            };
            candidate.extend(&chars[start..end]);
            if let Some(id) = vocab.id(&candidate) {
                matched = Some(id);
                break;
            }
            end -= 1;
        }
        match matched {
            Some(id) => {
                out.push(id);
                start = end;
            }
            None => return vec![vocab.unk_id()],
        }
    }
    out
}

/// One window over a piece sequence, with the span of positions whose
/// vectors are kept when windows are recombined. All coordinates are
/// positions in the original sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpan {
    pub start: usize,
    pub end: usize,
    pub keep_from: usize,
    pub keep_to: usize,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WindowError {
    #[error("window parameters must satisfy max_len > overlap > 0, got max_len {max_len}, overlap {overlap}")]
    BadParams { max_len: usize, overlap: usize },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RecombineError {
    #[error("plan has {expected} windows but {found} vector lists were supplied")]
    WindowCount { expected: usize, found: usize },
    #[error("window {index} covers {expected} positions but holds {found} vectors")]
    WindowLength {
        index: usize,
        expected: usize,
        found: usize,
    },
}

/// Split a sequence of length `ids.len()` into overlapping windows of at
/// most `max_len` positions, consecutive windows advancing by
/// `max_len - overlap`. Every window keeps its first `max_len - overlap`
/// positions; the last window keeps everything remaining, so the kept
/// spans partition the sequence.
pub fn window_long_sequence(
    ids: &[u32],
    max_len: usize,
    overlap: usize,
) -> Result<Vec<WindowSpan>, WindowError> {
    if overlap == 0 || max_len <= overlap {
        return Err(WindowError::BadParams { max_len, overlap });
    }
    let len = ids.len();
    if len == 0 {
        return Ok(Vec::new());
    }
    let stride = max_len - overlap;
    let mut spans = Vec::new();
    let mut start = 0;
    loop {
        let last = start + max_len >= len;
        spans.push(WindowSpan {
            start,
            end: if last { len } else { start + max_len },
            keep_from: start,
            keep_to: if last { len } else { start + stride },
        });
        if last {
            return Ok(spans);
        }
        start += stride;
    }
}

/// Reassemble per-position values from per-window values according to a
/// window plan. The output has one value per original position, each taken
/// from exactly one window.
pub fn recombine_windows<T: Clone>(
    per_window: &[Vec<T>],
    plan: &[WindowSpan],
) -> Result<Vec<T>, RecombineError> {
    if per_window.len() != plan.len() {
        return Err(RecombineError::WindowCount {
            expected: plan.len(),
            found: per_window.len(),
        });
    }
    let mut out = Vec::new();
    for (index, (vectors, span)) in per_window.iter().zip(plan).enumerate() {
        if vectors.len() != span.end - span.start {
            return Err(RecombineError::WindowLength {
                index,
                expected: span.end - span.start,
                found: vectors.len(),
            });
        }
        debug_assert_eq!(out.len(), span.keep_from);
        for pos in span.keep_from..span.keep_to {
            out.push(vectors[pos - span.start].clone());
        }
    }
    Ok(out)
}

/// A segmented sentence: `[CLS] pieces... [SEP]` with the index of each
/// word's first piece, plus a window plan (over content positions, i.e.
/// `piece_ids` minus the two specials) when the sequence is over-length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segmentation {
    pub piece_ids: Vec<u32>,
    pub first_piece_index: Vec<usize>,
    pub window_plan: Vec<WindowSpan>,
}

impl Segmentation {
    /// Content pieces, without the surrounding specials.
    pub fn content(&self) -> &[u32] {
        &self.piece_ids[1..self.piece_ids.len() - 1]
    }
}

/// Segment a sentence of words. `max_len` bounds a full encoder input
/// (content plus the two specials); windowing kicks in beyond it, windowing
/// the content with `max_len - 2` so every window plus its own specials
/// still fits.
pub fn segment_sentence(
    words: &[&str],
    vocab: &SubwordVocab,
    max_len: usize,
    overlap: usize,
) -> Result<Segmentation, WindowError> {
    let mut piece_ids = vec![vocab.seq_start_id()];
    let mut first_piece_index = Vec::with_capacity(words.len());
    for word in words {
        let pieces = tokenize_word(word, vocab);
        first_piece_index.push(piece_ids.len());
        piece_ids.extend(pieces);
    }
    piece_ids.push(vocab.seq_end_id());

    let content = &piece_ids[1..piece_ids.len() - 1];
    let window_plan = if piece_ids.len() > max_len {
        window_long_sequence(content, max_len - 2, overlap)?
    } else {
        Vec::new()
    };

    Ok(Segmentation {
        piece_ids,
        first_piece_index,
        window_plan,
    })
}
