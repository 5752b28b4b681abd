//! The four task heads and the joint multi-task loss.
//!
//! Three heads are plain softmax taggers over per-word embeddings (UPOS
//! tags, whole UFeats strings, lemma edit-script classes). The fourth is a
//! biaffine dependency parser: word embeddings are projected through
//! head-side and dependent-side feedforwards, arcs are scored with a
//! bilinear form plus a head bias term, and relation labels are scored per
//! dependent conditioned on its chosen head (per-label bilinear with
//! linear terms). A learned root embedding stands in for the artificial
//! root on the head side.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conllu::Sentence;
use crate::tensor::{Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};

/// Reserved tag for strings never seen in training.
pub const UNK_TAG: &str = "<unk>";

/// A closed tag vocabulary with an unknown slot at index 0 and a recorded
/// fallback (the most frequent training tag) for decoding predictions
/// that land on the unknown slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagVocab {
    tags: Vec<String>,
    index: HashMap<String, usize>,
    fallback: String,
}

/// Serializable form of a [`TagVocab`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TagVocabData {
    pub tags: Vec<String>,
    pub fallback: String,
}

impl TagVocab {
    /// Build from training values: first-seen order, unknown slot first,
    /// fallback = most frequent value (ties to first seen).
    pub fn from_values<'a>(values: impl Iterator<Item = &'a str>) -> Self {
        let mut tags = vec![UNK_TAG.to_string()];
        let mut index = HashMap::from([(UNK_TAG.to_string(), 0)]);
        let mut counts: Vec<usize> = vec![0];
        for value in values {
            match index.get(value) {
                Some(&i) => counts[i] += 1,
                None => {
                    index.insert(value.to_string(), tags.len());
                    tags.push(value.to_string());
                    counts.push(1);
                }
            }
        }
        let fallback = counts
            .iter()
            .enumerate()
            .skip(1)
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| tags[i].clone())
            .unwrap_or_else(|| crate::conllu::UNSET.to_string());
        TagVocab { tags, index, fallback }
    }

    pub fn from_data(data: TagVocabData) -> Self {
        let index = data
            .tags
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        TagVocab {
            tags: data.tags,
            index,
            fallback: data.fallback,
        }
    }

    pub fn to_data(&self) -> TagVocabData {
        TagVocabData {
            tags: self.tags.clone(),
            fallback: self.fallback.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Index of a string, or the unknown slot.
    pub fn id(&self, tag: &str) -> usize {
        self.index.get(tag).copied().unwrap_or(0)
    }

    pub fn tag(&self, id: usize) -> &str {
        &self.tags[id]
    }

    pub fn fallback(&self) -> &str {
        &self.fallback
    }

    /// Tag string for a predicted index; the unknown slot decodes to the
    /// fallback so inference always emits a real training string.
    pub fn decode_prediction(&self, id: usize) -> &str {
        if id == 0 {
            &self.fallback
        } else {
            &self.tags[id]
        }
    }
}

/// The tag vocabularies of the four tasks.
#[derive(Debug, Clone)]
pub struct TagVocabs {
    pub upos: TagVocab,
    pub ufeats: TagVocab,
    pub lemma_scripts: TagVocab,
    pub deprels: TagVocab,
}

impl TagVocabs {
    /// Collect all four vocabularies from fully annotated sentences.
    /// UFeats strings are taken verbatim, including `_`.
    pub fn from_sentences<'a>(sentences: impl Iterator<Item = &'a Sentence> + Clone) -> Self {
        let upos = TagVocab::from_values(
            sentences
                .clone()
                .flat_map(|s| s.tokens.iter())
                .filter_map(|t| t.upos.as_deref()),
        );
        let ufeats = TagVocab::from_values(
            sentences
                .clone()
                .flat_map(|s| s.tokens.iter())
                .map(|t| t.ufeats.as_str()),
        );
        let scripts: Vec<String> = sentences
            .clone()
            .flat_map(|s| s.tokens.iter())
            .filter_map(|t| {
                t.lemma
                    .as_deref()
                    .map(|l| crate::lemma::encode_tag(&crate::lemma::compute_lemma_script(&t.form, l)))
            })
            .collect();
        let lemma_scripts = TagVocab::from_values(scripts.iter().map(|s| s.as_str()));
        let deprels = TagVocab::from_values(
            sentences
                .flat_map(|s| s.tokens.iter())
                .filter_map(|t| t.deprel.as_deref()),
        );
        TagVocabs {
            upos,
            ufeats,
            lemma_scripts,
            deprels,
        }
    }
}

/// Index of the largest value; ties break to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// A linear softmax tagger over per-word embeddings.
pub struct TaggerHead {
    pub weight: ParamId,
    pub bias: ParamId,
    pub vocab: TagVocab,
}

pub fn init_tagger(
    store: &mut ParamStore,
    name: &str,
    hidden_dim: usize,
    vocab: TagVocab,
    rng: &mut impl Rng,
) -> TaggerHead {
    let k = vocab.len();
    TaggerHead {
        weight: store.add(
            &format!("head.{name}.weight"),
            Tensor::randn(&[hidden_dim, k], 0.02, rng),
            ParamGroup::Task,
            true,
        ),
        bias: store.add(
            &format!("head.{name}.bias"),
            Tensor::zeros(&[k]),
            ParamGroup::Task,
            false,
        ),
    vocab,
    }
}

/// One logit row per word.
pub fn tag_forward(graph: &mut Graph, store: &ParamStore, head: &TaggerHead, embeddings: Var) -> Var {
    let w = graph.param(store, head.weight);
    let b = graph.param(store, head.bias);
    let xw = graph.matmul(embeddings, w);
    graph.add_row_broadcast(xw, b)
}

/// Biaffine dependency parser parameters.
pub struct BiaffineParser {
    pub arc_dim: usize,
    pub tag_dim: usize,
    pub labels: TagVocab,
    root_embedding: ParamId,
    arc_dep_w: ParamId,
    arc_dep_b: ParamId,
    arc_head_w: ParamId,
    arc_head_b: ParamId,
    arc_u: ParamId,
    arc_head_bias: ParamId,
    label_dep_w: ParamId,
    label_dep_b: ParamId,
    label_head_w: ParamId,
    label_head_b: ParamId,
    label_u: ParamId,
    label_head_lin: ParamId,
    label_dep_lin: ParamId,
    label_bias: ParamId,
}

pub fn init_biaffine_parser(
    store: &mut ParamStore,
    hidden_dim: usize,
    arc_dim: usize,
    tag_dim: usize,
    labels: TagVocab,
    rng: &mut impl Rng,
) -> BiaffineParser {
    let l = labels.len();
    let mut weight = |store: &mut ParamStore, name: &str, shape: &[usize]| {
        store.add(
            &format!("parser.{name}"),
            Tensor::randn(shape, 0.02, rng),
            ParamGroup::Task,
            true,
        )
    };
    let root_embedding = weight(store, "root_embedding", &[1, hidden_dim]);
    let arc_dep_w = weight(store, "arc_dep.weight", &[hidden_dim, arc_dim]);
    let arc_head_w = weight(store, "arc_head.weight", &[hidden_dim, arc_dim]);
    let arc_u = weight(store, "arc_u", &[arc_dim, arc_dim]);
    let arc_head_bias = weight(store, "arc_head_bias", &[arc_dim, 1]);
    let label_dep_w = weight(store, "label_dep.weight", &[hidden_dim, tag_dim]);
    let label_head_w = weight(store, "label_head.weight", &[hidden_dim, tag_dim]);
    let label_u = weight(store, "label_u", &[tag_dim, l * tag_dim]);
    let label_head_lin = weight(store, "label_head_lin", &[tag_dim, l]);
    let label_dep_lin = weight(store, "label_dep_lin", &[tag_dim, l]);
    let bias = |store: &mut ParamStore, name: &str, len: usize| {
        store.add(
            &format!("parser.{name}"),
            Tensor::zeros(&[len]),
            ParamGroup::Task,
            false,
        )
    };
    BiaffineParser {
        arc_dim,
        tag_dim,
        root_embedding,
        arc_dep_w,
        arc_head_w,
        arc_u,
        arc_head_bias,
        label_dep_w,
        label_head_w,
        label_u,
        label_head_lin,
        label_dep_lin,
        arc_dep_b: bias(store, "arc_dep.bias", arc_dim),
        arc_head_b: bias(store, "arc_head.bias", arc_dim),
        label_dep_b: bias(store, "label_dep.bias", tag_dim),
        label_head_b: bias(store, "label_head.bias", tag_dim),
        label_bias: bias(store, "label_bias", l),
        labels,
    }
}

fn projected(
    graph: &mut Graph,
    store: &ParamStore,
    x: Var,
    w: ParamId,
    b: ParamId,
) -> Var {
    let w = graph.param(store, w);
    let b = graph.param(store, b);
    let xw = graph.matmul(x, w);
    let xwb = graph.add_row_broadcast(xw, b);
    graph.gelu(xwb)
}

/// The bilinear arc-scoring core:
/// `scores[i][j] = dep[j] . u . head[i] + head_bias . head[i]`.
pub fn bilinear_arc_scores(graph: &mut Graph, head: Var, dep: Var, u: Var, head_bias: Var) -> Var {
    let du = graph.matmul(dep, u);
    let dut = graph.transpose(du);
    let scores = graph.matmul(head, dut);
    let hb = graph.matmul(head, head_bias);
    let rows = graph.value(hb).rows();
    let hbv = graph.reshape(hb, &[rows]);
    graph.add_col_broadcast(scores, hbv)
}

/// Head representations for a sentence: the learned root embedding
/// stacked above the word embeddings.
fn with_root(graph: &mut Graph, store: &ParamStore, parser: &BiaffineParser, embeddings: Var) -> Var {
    let root = graph.param(store, parser.root_embedding);
    graph.concat_rows(&[root, embeddings])
}

/// Dense head-selection scores, shape `(n+1, n)`: row 0 is the artificial
/// root, row `i >= 1` is word `i`; column `j` scores heads for word `j+1`.
/// Self-arcs are present here and excluded at loss/decode time.
pub fn arc_scores(
    graph: &mut Graph,
    store: &ParamStore,
    parser: &BiaffineParser,
    embeddings: Var,
) -> Var {
    let head_input = with_root(graph, store, parser, embeddings);
    let head = projected(graph, store, head_input, parser.arc_head_w, parser.arc_head_b);
    let dep = projected(graph, store, embeddings, parser.arc_dep_w, parser.arc_dep_b);
    let u = graph.param(store, parser.arc_u);
    let head_bias = graph.param(store, parser.arc_head_bias);
    bilinear_arc_scores(graph, head, dep, u, head_bias)
}

/// Per-dependent label logits conditioned on each dependent's chosen head
/// (0 = root), shape `(n, labels)`.
pub fn label_scores(
    graph: &mut Graph,
    store: &ParamStore,
    parser: &BiaffineParser,
    embeddings: Var,
    chosen_heads: &[usize],
) -> Var {
    let n = graph.value(embeddings).rows();
    for &h in chosen_heads {
        assert!(
            h <= n,
            "head index {h} out of range for a {n}-word sentence"
        );
    }
    let head_input = with_root(graph, store, parser, embeddings);
    let head_all = projected(graph, store, head_input, parser.label_head_w, parser.label_head_b);
    let dep = projected(graph, store, embeddings, parser.label_dep_w, parser.label_dep_b);
    let head = graph.embedding(head_all, chosen_heads);

    let u = graph.param(store, parser.label_u);
    let mixed = graph.matmul(head, u);
    let labels = parser.labels.len();
    let mut columns = Vec::with_capacity(labels);
    for l in 0..labels {
        let slice = graph.slice_cols(mixed, l * parser.tag_dim, (l + 1) * parser.tag_dim);
        let prod = graph.mul(slice, dep);
        columns.push(graph.row_sums(prod));
    }
    let bilinear = graph.concat_cols(&columns);

    let head_lin = graph.param(store, parser.label_head_lin);
    let dep_lin = graph.param(store, parser.label_dep_lin);
    let lh = graph.matmul(head, head_lin);
    let ld = graph.matmul(dep, dep_lin);
    let linear = graph.add(lh, ld);
    let summed = graph.add(bilinear, linear);
    let bias = graph.param(store, parser.label_bias);
    graph.add_row_broadcast(summed, bias)
}

/// Gold indices for every task, aligned with the sentence's words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Targets {
    pub upos: Vec<usize>,
    pub ufeats: Vec<usize>,
    pub lemma_scripts: Vec<usize>,
    pub heads: Vec<usize>,
    pub deprels: Vec<usize>,
}

/// A required gold annotation is absent.
#[derive(Debug, Error, PartialEq, Eq)]
#[error("token {token}: missing gold {field}")]
pub struct MissingGold {
    pub token: usize,
    pub field: &'static str,
}

/// Map a fully annotated sentence to training targets. Unknown strings
/// (possible on dev data) map to the unknown slot.
pub fn extract_targets(sentence: &Sentence, vocabs: &TagVocabs) -> Result<Targets, MissingGold> {
    let mut targets = Targets {
        upos: Vec::new(),
        ufeats: Vec::new(),
        lemma_scripts: Vec::new(),
        heads: Vec::new(),
        deprels: Vec::new(),
    };
    for token in &sentence.tokens {
        let missing = |field| MissingGold { token: token.id, field };
        let upos = token.upos.as_deref().ok_or_else(|| missing("upos"))?;
        targets.upos.push(vocabs.upos.id(upos));
        targets.ufeats.push(vocabs.ufeats.id(&token.ufeats));
        let lemma = token.lemma.as_deref().ok_or_else(|| missing("lemma"))?;
        let script = crate::lemma::compute_lemma_script(&token.form, lemma);
        targets
            .lemma_scripts
            .push(vocabs.lemma_scripts.id(&crate::lemma::encode_tag(&script)));
        targets.heads.push(token.head.ok_or_else(|| missing("head"))?);
        let deprel = token.deprel.as_deref().ok_or_else(|| missing("deprel"))?;
        targets.deprels.push(vocabs.deprels.id(deprel));
    }
    Ok(targets)
}

/// Logits of all tasks for one sentence.
pub struct TaskLogits {
    pub upos: Var,
    pub ufeats: Var,
    pub lemma: Var,
    /// Head-major arc scores, `(n+1, n)`.
    pub arc: Var,
    pub label: Var,
}

/// Unweighted sum of the per-task label-smoothed cross entropies. The arc
/// term classifies each dependent over head candidates with its self-arc
/// excluded.
pub fn multitask_loss(
    graph: &mut Graph,
    logits: &TaskLogits,
    targets: &Targets,
    epsilon: f64,
) -> Var {
    let upos = graph.smoothed_ce(logits.upos, &targets.upos, epsilon);
    let ufeats = graph.smoothed_ce(logits.ufeats, &targets.ufeats, epsilon);
    let lemma = graph.smoothed_ce(logits.lemma, &targets.lemma_scripts, epsilon);
    let arc = arc_loss(graph, logits.arc, &targets.heads, epsilon);
    let label = graph.smoothed_ce(logits.label, &targets.deprels, epsilon);
    graph.add_scalars(&[upos, ufeats, lemma, arc, label])
}

/// Label-smoothed cross entropy over head candidates per dependent, with
/// the dependent's own row banned.
pub fn arc_loss(graph: &mut Graph, arc_scores: Var, gold_heads: &[usize], epsilon: f64) -> Var {
    let dep_major = graph.transpose(arc_scores);
    let banned: Vec<Option<usize>> = (0..gold_heads.len()).map(|j| Some(j + 1)).collect();
    graph.smoothed_ce_banned(dep_major, gold_heads, epsilon, &banned)
}
