//! The assembled model: encoder, per-task layer attention, four heads,
//! and the prediction path from a sentence to full annotations.
//!
//! A model is self-contained: its subword vocabulary, tag vocabularies,
//! architecture, and weights save into one bundle directory
//! (`model.json`, `pieces.txt`, `weights.udk`) and load back without any
//! external files.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conllu::Sentence;
use crate::decode::{max_arborescence, ArcScoreMatrix};
use crate::encoder::{
    encode, init_encoder_params, init_layer_attention, layer_attention_forward, load_params,
    sample_layer_dropout, save_params, EncoderConfig, EncoderParams, LayerAttention, WeightsError,
};
use crate::heads::{
    arc_scores, argmax, init_biaffine_parser, init_tagger, label_scores, multitask_loss,
    tag_forward, BiaffineParser, TagVocabData, TagVocabs, TaggerHead, Targets, TaskLogits,
};
use crate::lemma::{apply_lemma_script, decode_tag};
use crate::subword::{segment_sentence, Segmentation, SubwordVocab};
use crate::tensor::{Graph, ParamStore, Var};

/// The four prediction tasks, in fixed order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Upos = 0,
    Ufeats = 1,
    Lemma = 2,
    Deps = 3,
}

pub const TASKS: [Task; 4] = [Task::Upos, Task::Ufeats, Task::Lemma, Task::Deps];

/// Full architecture of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Arc feedforward width of the biaffine parser.
    pub arc_dim: usize,
    /// Label feedforward width of the biaffine parser.
    pub tag_dim: usize,
}

impl ModelConfig {
    /// Default parser dimensions (tag 256, arc 768).
    pub fn with_default_parser_dims(encoder: EncoderConfig) -> Self {
        ModelConfig {
            encoder,
            arc_dim: 768,
            tag_dim: 256,
        }
    }

    /// Alternate documented preset (tag 300, arc 800).
    pub fn with_alternate_parser_dims(encoder: EncoderConfig) -> Self {
        ModelConfig {
            encoder,
            arc_dim: 800,
            tag_dim: 300,
        }
    }
}

/// Training-time stochastic settings for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LossHyper {
    pub label_smoothing: f64,
    /// Dropout applied to every layer output before layer attention.
    pub layer_output_dropout: f64,
    /// Probability of dropping a whole layer from each task's mixture.
    pub layer_dropout: f64,
}

/// Predicted annotations for one sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prediction {
    pub upos: Vec<String>,
    pub ufeats: Vec<String>,
    pub lemmas: Vec<String>,
    pub heads: Vec<usize>,
    pub deprels: Vec<String>,
}

pub struct Model {
    pub config: ModelConfig,
    pub subword: SubwordVocab,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub attentions: [LayerAttention; 4],
    pub upos: TaggerHead,
    pub ufeats: TaggerHead,
    pub lemma: TaggerHead,
    pub parser: BiaffineParser,
}

impl Model {
    /// Build a model with fresh Gaussian weights, deterministically from
    /// the seed.
    pub fn new(config: ModelConfig, subword: SubwordVocab, vocabs: TagVocabs, seed: u64) -> Self {
        assert_eq!(
            config.encoder.vocab_size,
            subword.len(),
            "encoder vocab size {} does not match the subword vocabulary ({} pieces)",
            config.encoder.vocab_size,
            subword.len()
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = init_encoder_params(&mut store, &config.encoder, &mut rng);
        let layers = config.encoder.num_layers;
        let attentions = [
            init_layer_attention(&mut store, "upos", layers),
            init_layer_attention(&mut store, "ufeats", layers),
            init_layer_attention(&mut store, "lemma", layers),
            init_layer_attention(&mut store, "deps", layers),
        ];
        let hidden = config.encoder.hidden_dim;
        let upos = init_tagger(&mut store, "upos", hidden, vocabs.upos, &mut rng);
        let ufeats = init_tagger(&mut store, "ufeats", hidden, vocabs.ufeats, &mut rng);
        let lemma = init_tagger(&mut store, "lemma", hidden, vocabs.lemma_scripts, &mut rng);
        let parser = init_biaffine_parser(
            &mut store,
            hidden,
            config.arc_dim,
            config.tag_dim,
            vocabs.deprels,
            &mut rng,
        );
        Model {
            config,
            subword,
            store,
            encoder,
            attentions,
            upos,
            ufeats,
            lemma,
            parser,
        }
    }

    /// Window length for segmentation: a full encoder input.
    pub fn window_len(&self) -> usize {
        self.config.encoder.max_positions
    }

    /// Window overlap: half the window, mirroring the 512/256 default.
    pub fn window_overlap(&self) -> usize {
        self.config.encoder.max_positions / 2
    }

    pub fn segment(&self, words: &[&str]) -> Segmentation {
        segment_sentence(words, &self.subword, self.window_len(), self.window_overlap())
            .expect("window invariant: max_positions - 2 > overlap > 0")
    }

    /// Encode a (possibly masked) piece sequence into per-layer states
    /// over content positions (specials stripped). Windowed when the plan
    /// says so; each window is wrapped in its own specials.
    fn encode_content(
        &self,
        graph: &mut Graph,
        piece_ids: &[u32],
        segmentation: &Segmentation,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Vec<Var> {
        let layers = self.config.encoder.num_layers;
        let content = &piece_ids[1..piece_ids.len() - 1];

        if segmentation.window_plan.is_empty() {
            let out = encode(
                graph,
                &self.store,
                &self.encoder,
                &self.config.encoder,
                piece_ids,
                rng,
            );
            let rows: Vec<usize> = (1..=content.len()).collect();
            return out
                .states
                .iter()
                .map(|&s| graph.embedding(s, &rows))
                .collect();
        }

        let mut per_layer: Vec<Vec<Var>> = vec![Vec::new(); layers];
        for span in &segmentation.window_plan {
            let mut window_ids = Vec::with_capacity(span.end - span.start + 2);
            window_ids.push(self.subword.seq_start_id());
            window_ids.extend_from_slice(&content[span.start..span.end]);
            window_ids.push(self.subword.seq_end_id());
            let out = encode(
                graph,
                &self.store,
                &self.encoder,
                &self.config.encoder,
                &window_ids,
                rng.as_deref_mut(),
            );
            // Kept rows, shifted by one for the window's leading special.
            let rows: Vec<usize> = (span.keep_from - span.start + 1..span.keep_to - span.start + 1)
                .collect();
            for (layer, &state) in out.states.iter().enumerate() {
                per_layer[layer].push(graph.embedding(state, &rows));
            }
        }
        per_layer
            .into_iter()
            .map(|parts| graph.concat_rows(&parts))
            .collect()
    }

    /// Per-task word embeddings: layer-output dropout, per-task layer
    /// dropout, scalar mixture, then first-piece selection.
    fn task_word_embeddings(
        &self,
        graph: &mut Graph,
        piece_ids: &[u32],
        segmentation: &Segmentation,
        hyper: &LossHyper,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> [Var; 4] {
        let mut states = self.encode_content(graph, piece_ids, segmentation, rng.as_deref_mut());
        if let Some(r) = rng.as_deref_mut() {
            states = states
                .into_iter()
                .map(|s| graph.dropout(s, hyper.layer_output_dropout, r))
                .collect();
        }
        let layers = self.config.encoder.num_layers;
        let word_rows: Vec<usize> = segmentation
            .first_piece_index
            .iter()
            .map(|&i| i - 1)
            .collect();
        TASKS.map(|task| {
            let dropped = match rng.as_deref_mut() {
                Some(r) => sample_layer_dropout(layers, hyper.layer_dropout, r),
                None => vec![false; layers],
            };
            let mixed = layer_attention_forward(
                graph,
                &self.store,
                &self.attentions[task as usize],
                &states,
                &dropped,
            );
            graph.embedding(mixed, &word_rows)
        })
    }

    /// All task logits for one sentence; label scores are conditioned on
    /// the given heads (gold heads during training).
    pub fn sentence_logits(
        &self,
        graph: &mut Graph,
        piece_ids: &[u32],
        segmentation: &Segmentation,
        condition_heads: &[usize],
        hyper: &LossHyper,
        rng: Option<&mut ChaCha8Rng>,
    ) -> TaskLogits {
        let embeddings = self.task_word_embeddings(graph, piece_ids, segmentation, hyper, rng);
        TaskLogits {
            upos: tag_forward(graph, &self.store, &self.upos, embeddings[Task::Upos as usize]),
            ufeats: tag_forward(graph, &self.store, &self.ufeats, embeddings[Task::Ufeats as usize]),
            lemma: tag_forward(graph, &self.store, &self.lemma, embeddings[Task::Lemma as usize]),
            arc: arc_scores(graph, &self.store, &self.parser, embeddings[Task::Deps as usize]),
            label: label_scores(
                graph,
                &self.store,
                &self.parser,
                embeddings[Task::Deps as usize],
                condition_heads,
            ),
        }
    }

    /// Joint loss of one sentence given its (possibly masked) pieces and
    /// gold targets.
    pub fn sentence_loss(
        &self,
        graph: &mut Graph,
        piece_ids: &[u32],
        segmentation: &Segmentation,
        targets: &Targets,
        hyper: &LossHyper,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Var {
        let logits =
            self.sentence_logits(graph, piece_ids, segmentation, &targets.heads, hyper, rng);
        multitask_loss(graph, &logits, targets, hyper.label_smoothing)
    }

    /// Predict all four annotations for a sentence (eval mode,
    /// deterministic). Every word receives a value: unknown-slot tag
    /// predictions fall back to the most frequent training string, and
    /// lemma scripts that cannot apply fall back to copying the form.
    pub fn predict_sentence(&self, sentence: &Sentence) -> Prediction {
        let words = sentence.forms();
        let n = words.len();
        if n == 0 {
            return Prediction {
                upos: Vec::new(),
                ufeats: Vec::new(),
                lemmas: Vec::new(),
                heads: Vec::new(),
                deprels: Vec::new(),
            };
        }
        let segmentation = self.segment(&words);
        let hyper = LossHyper {
            label_smoothing: 0.0,
            layer_output_dropout: 0.0,
            layer_dropout: 0.0,
        };

        let mut graph = Graph::new();
        let embeddings = self.task_word_embeddings(
            &mut graph,
            &segmentation.piece_ids,
            &segmentation,
            &hyper,
            None,
        );

        let upos_logits =
            tag_forward(&mut graph, &self.store, &self.upos, embeddings[Task::Upos as usize]);
        let ufeats_logits =
            tag_forward(&mut graph, &self.store, &self.ufeats, embeddings[Task::Ufeats as usize]);
        let lemma_logits =
            tag_forward(&mut graph, &self.store, &self.lemma, embeddings[Task::Lemma as usize]);
        let arc = arc_scores(
            &mut graph,
            &self.store,
            &self.parser,
            embeddings[Task::Deps as usize],
        );

        let upos = decode_rows(&graph, upos_logits, &self.upos.vocab);
        let ufeats = decode_rows(&graph, ufeats_logits, &self.ufeats.vocab);

        let mut lemmas = Vec::with_capacity(n);
        for (j, word) in words.iter().enumerate() {
            let id = argmax(graph.value(lemma_logits).row(j));
            if id == 0 {
                lemmas.push((*word).to_string());
                continue;
            }
            let script = decode_tag(self.lemma.vocab.tag(id))
                .expect("vocabulary holds only valid script tags");
            let (lemma, _fell_back) = apply_lemma_script(&script, word);
            lemmas.push(lemma);
        }

        let rows: Vec<Vec<f64>> = (0..=n).map(|i| graph.value(arc).row(i).to_vec()).collect();
        let matrix = ArcScoreMatrix::from_rows(rows).expect("finite scores from a finite forward");
        let heads = max_arborescence(&matrix);

        let label_logits = label_scores(
            &mut graph,
            &self.store,
            &self.parser,
            embeddings[Task::Deps as usize],
            &heads,
        );
        let deprels = decode_rows(&graph, label_logits, &self.parser.labels);

        Prediction {
            upos,
            ufeats,
            lemmas,
            heads,
            deprels,
        }
    }

    /// Overwrite a sentence's prediction columns in place (UPOS, UFeats,
    /// lemma, head, deprel); everything else is untouched.
    pub fn annotate(&self, sentence: &mut Sentence) {
        let prediction = self.predict_sentence(sentence);
        for (j, token) in sentence.tokens.iter_mut().enumerate() {
            token.upos = Some(prediction.upos[j].clone());
            token.ufeats = prediction.ufeats[j].clone();
            token.lemma = Some(prediction.lemmas[j].clone());
            token.head = Some(prediction.heads[j]);
            token.deprel = Some(prediction.deprels[j].clone());
        }
    }

    pub fn vocabs(&self) -> TagVocabs {
        TagVocabs {
            upos: self.upos.vocab.clone(),
            ufeats: self.ufeats.vocab.clone(),
            lemma_scripts: self.lemma.vocab.clone(),
            deprels: self.parser.labels.clone(),
        }
    }

    /// Write a self-contained bundle directory.
    pub fn save_bundle(&self, dir: &Path) -> Result<(), BundleError> {
        fs::create_dir_all(dir)?;
        let meta = BundleMeta {
            config: self.config.clone(),
            upos: self.upos.vocab.to_data(),
            ufeats: self.ufeats.vocab.to_data(),
            lemma_scripts: self.lemma.vocab.to_data(),
            deprels: self.parser.labels.to_data(),
        };
        fs::write(dir.join("model.json"), serde_json::to_string_pretty(&meta)?)?;
        let pieces: Vec<String> = (0..self.subword.len())
            .map(|i| self.subword.piece(i as u32).to_string())
            .collect();
        fs::write(dir.join("pieces.txt"), pieces.join("\n") + "\n")?;
        save_params(&self.store, &dir.join("weights.udk")).map_err(WeightsError::from)?;
        Ok(())
    }

    /// Load a bundle directory written by [`Model::save_bundle`].
    pub fn load_bundle(dir: &Path) -> Result<Model, BundleError> {
        let meta: BundleMeta = serde_json::from_str(&fs::read_to_string(dir.join("model.json"))?)?;
        let pieces = fs::read_to_string(dir.join("pieces.txt"))?;
        let subword = SubwordVocab::from_lines(&pieces)
            .map_err(|e| BundleError::Vocab(e.to_string()))?;
        let vocabs = TagVocabs {
            upos: crate::heads::TagVocab::from_data(meta.upos),
            ufeats: crate::heads::TagVocab::from_data(meta.ufeats),
            lemma_scripts: crate::heads::TagVocab::from_data(meta.lemma_scripts),
            deprels: crate::heads::TagVocab::from_data(meta.deprels),
        };
        let mut model = Model::new(meta.config, subword, vocabs, 0);
        load_params(&mut model.store, &dir.join("weights.udk"))?;
        Ok(model)
    }
}

fn decode_rows(graph: &Graph, logits: Var, vocab: &crate::heads::TagVocab) -> Vec<String> {
    (0..graph.value(logits).rows())
        .map(|j| vocab.decode_prediction(argmax(graph.value(logits).row(j))).to_string())
        .collect()
}

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    config: ModelConfig,
    upos: TagVocabData,
    ufeats: TagVocabData,
    lemma_scripts: TagVocabData,
    deprels: TagVocabData,
}

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("metadata error: {0}")]
    Meta(#[from] serde_json::Error),
    #[error("subword vocabulary: {0}")]
    Vocab(String),
    #[error(transparent)]
    Weights(#[from] WeightsError),
}
