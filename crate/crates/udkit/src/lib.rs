//! A desk-scale multilingual multi-task Universal Dependencies toolkit.
//!
//! The crate provides the full pipeline for jointly predicting UPOS tags,
//! morphological feature strings, lemmas (as edit-script classes), and
//! dependency trees from CoNLL-U treebanks:
//!
//! * [`conllu`] — lossless CoNLL-U parsing, validation, serialization, and
//!   treebank concatenation.
//! * [`lemma`] — lemmatization as classification: shortest edit scripts
//!   between forms and lemmas, and their textual tag encoding.
//! * [`subword`] — greedy wordpiece segmentation with first-piece selection
//!   and sliding-window handling of over-length sequences.
//! * [`tensor`] — a minimal deterministic reverse-mode autodiff substrate
//!   (64-bit floats) with Adam, gradient clipping, and a flat binary
//!   checkpoint format.
//! * [`encoder`] — a configurable transformer encoder exposing all layer
//!   outputs, plus per-task scalar layer attention with layer dropout.
//! * [`heads`] — the four task heads (two taggers, a lemma-script tagger,
//!   and a biaffine dependency parser) and the joint multi-task loss.
//! * [`model`] — the assembled model: forward pass, per-sentence prediction,
//!   and self-contained save/load bundles.
//! * [`decode`] — maximum spanning arborescence decoding with a single-root
//!   constraint, plus a brute-force oracle.
//! * [`train`] — the fine-tuning recipe: Noam schedule, parameter groups,
//!   first-epoch freezing, input masking, bucketed batching, and the
//!   training loop.
//! * [`metrics`] — gold-segmentation evaluation (UPOS, UFeats, Lemmas, UAS,
//!   LAS, CLAS).

pub mod conllu;
pub mod decode;
pub mod encoder;
pub mod heads;
pub mod lemma;
pub mod metrics;
pub mod model;
pub mod subword;
pub mod tensor;
pub mod train;
