//! The fine-tuning recipe: learning-rate schedule, parameter groups,
//! first-epoch freezing, input masking, bucketed batching, and the
//! training loop.
//!
//! Two parameter groups train at different rates (the encoder at a small
//! rate, everything else at the base rate) under a shared schedule:
//! during epoch 1 the encoder is frozen and the task rate is held
//! constant; from epoch 2 both groups follow linear warmup with inverse
//! square root decay, counting steps from the first unfrozen batch.
//! Batches are built fresh every epoch by shuffling, sorting by fuzzed
//! length, and slicing consecutive groups, so similar lengths share a
//! batch but treebanks still mix.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::conllu::{Dataset, Sentence};
use crate::heads::{extract_targets, MissingGold, Targets};
use crate::metrics::{evaluate, EvalOptions, EvalReport};
use crate::model::{BundleError, LossHyper, Model};
use crate::subword::{Segmentation, SubwordVocab};
use crate::tensor::{clip_gradients, Adam, Graph, ParamGroup, ParamId, ParamStore};

/// Every training hyperparameter, with the reference defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub encoder_lr: f64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub mask_prob: f64,
    pub label_smoothing: f64,
    /// Dropout on layer outputs before layer attention.
    pub dropout: f64,
    /// Attention and hidden dropout inside the encoder while training.
    pub encoder_dropout: f64,
    pub layer_dropout: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub grad_clip: f64,
    /// Relative length fuzz used when bucketing batches.
    pub length_fuzz: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-3,
            encoder_lr: 5e-5,
            warmup_steps: 8000,
            batch_size: 32,
            epochs: 80,
            mask_prob: 0.2,
            label_smoothing: 0.03,
            dropout: 0.5,
            encoder_dropout: 0.2,
            layer_dropout: 0.1,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.99,
            grad_clip: 5.0,
            length_fuzz: 0.1,
            seed: 13,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) {
        assert!(self.warmup_steps >= 1, "warmup_steps must be at least 1");
        assert!(self.batch_size >= 1, "batch_size must be at least 1");
        for (name, p) in [
            ("mask_prob", self.mask_prob),
            ("label_smoothing", self.label_smoothing),
            ("dropout", self.dropout),
            ("encoder_dropout", self.encoder_dropout),
            ("layer_dropout", self.layer_dropout),
        ] {
            assert!((0.0..1.0).contains(&p), "{name} {p} not in [0, 1)");
        }
        assert!(self.grad_clip > 0.0, "grad_clip must be positive");
    }
}

/// Linear warmup to `peak_lr` at `warmup`, then inverse square root
/// decay: `peak_lr * min(step / warmup, sqrt(warmup / step))`.
pub fn noam_lr(step: u64, warmup: u64, peak_lr: f64) -> f64 {
    assert!(step >= 1, "schedule steps start at 1");
    let step = step as f64;
    let warmup = warmup as f64;
    peak_lr * (step / warmup).min((warmup / step).sqrt())
}

/// Whether the encoder group trains in the given 1-based epoch: frozen
/// for the first epoch, trainable afterwards.
pub fn freeze_schedule(epoch: usize) -> bool {
    assert!(epoch >= 1, "epochs are 1-based");
    epoch >= 2
}

/// The two learning-rate groups, as a total partition of the store.
pub struct ParamGroups {
    pub encoder: Vec<ParamId>,
    pub task: Vec<ParamId>,
}

pub fn param_groups(store: &ParamStore) -> ParamGroups {
    ParamGroups {
        encoder: store.group_ids(ParamGroup::Encoder),
        task: store.group_ids(ParamGroup::Task),
    }
}

/// Per-group learning rates for one step. During epoch 1 the task rate
/// holds constant at `base_lr` and the encoder rate is exactly zero;
/// afterwards both follow the Noam schedule over `unfrozen_step` (1-based,
/// counted from the first unfrozen batch).
pub fn step_learning_rates(epoch: usize, unfrozen_step: u64, config: &TrainConfig) -> (f64, f64) {
    if !freeze_schedule(epoch) {
        (0.0, config.base_lr)
    } else {
        (
            noam_lr(unfrozen_step, config.warmup_steps, config.encoder_lr),
            noam_lr(unfrozen_step, config.warmup_steps, config.base_lr),
        )
    }
}

/// Replace each non-special wordpiece by the mask piece independently
/// with probability `mask_prob`. Returns the masked ids and the masked
/// positions. Gold targets are untouched by construction.
pub fn mask_inputs(
    piece_ids: &[u32],
    mask_prob: f64,
    vocab: &SubwordVocab,
    rng: &mut impl Rng,
) -> (Vec<u32>, Vec<usize>) {
    assert!((0.0..=1.0).contains(&mask_prob), "mask_prob {mask_prob} not in [0, 1]");
    let mut out = piece_ids.to_vec();
    let mut positions = Vec::new();
    for (i, id) in out.iter_mut().enumerate() {
        if !vocab.is_special(*id) && rng.gen::<f64>() < mask_prob {
            *id = vocab.mask_id();
            positions.push(i);
        }
    }
    (out, positions)
}

/// One epoch's batches: sentence indices into the dataset, every sentence
/// exactly once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub batches: Vec<Vec<usize>>,
}

/// Shuffle, sort by `length * (1 + uniform(-fuzz, fuzz))`, and slice into
/// consecutive batches (the last may be short). Fuzz keeps length
/// grouping approximate so batch composition varies across epochs.
pub fn bucket_batches(
    dataset: &Dataset,
    batch_size: usize,
    fuzz: f64,
    rng: &mut ChaCha8Rng,
) -> BatchPlan {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    assert!((0.0..1.0).contains(&fuzz), "length fuzz {fuzz} not in [0, 1)");
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(rng);
    let keys: Vec<f64> = order
        .iter()
        .map(|&i| {
            let length = dataset.sentences[i].0.len() as f64;
            let jitter = if fuzz == 0.0 { 0.0 } else { rng.gen_range(-fuzz..fuzz) };
            length * (1.0 + jitter)
        })
        .collect();
    let mut positions: Vec<usize> = (0..order.len()).collect();
    positions.sort_by(|&a, &b| keys[a].partial_cmp(&keys[b]).unwrap());
    let sorted: Vec<usize> = positions.into_iter().map(|p| order[p]).collect();
    BatchPlan {
        batches: sorted.chunks(batch_size).map(|c| c.to_vec()).collect(),
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev: Option<EvalReport>,
}

/// What a training run produced.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub per_epoch: Vec<EpochMetrics>,
    /// Epoch of the best dev LAS (ties to the lower epoch).
    pub best_epoch: Option<usize>,
    /// The metrics log text (also written to `metrics.tsv` when an output
    /// directory is given).
    pub metrics_log: String,
}

/// Optional training outputs.
pub struct TrainOptions<'a> {
    /// Fully annotated dev sentences for per-epoch evaluation and best
    /// checkpoint selection.
    pub dev: Option<&'a [Sentence]>,
    /// Where to write `metrics.tsv`, `last/`, and (with dev) `best/`.
    pub out_dir: Option<&'a Path>,
    /// Evaluate dev every this many epochs (the final epoch always
    /// evaluates). 1 = every epoch.
    pub eval_every: usize,
}

impl Default for TrainOptions<'_> {
    fn default() -> Self {
        TrainOptions {
            dev: None,
            out_dir: None,
            eval_every: 1,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("sentence {index} of treebank {treebank:?}: {source}")]
    MissingGold {
        index: usize,
        treebank: String,
        source: MissingGold,
    },
    #[error("non-finite loss ({loss}) at epoch {epoch}, step {step}; batch drawn from {treebanks:?}")]
    NonFiniteLoss {
        epoch: usize,
        step: u64,
        loss: f64,
        treebanks: Vec<String>,
    },
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

struct Prepared {
    segmentation: Segmentation,
    targets: Targets,
}

/// Run the full training recipe. Deterministic given the seed: masking,
/// layer dropout, label smoothing, clipping, grouped Adam under the Noam
/// schedule, first-epoch freezing, per-epoch metrics, and best/last
/// checkpoints.
pub fn train(
    model: &mut Model,
    dataset: &Dataset,
    config: &TrainConfig,
    options: &TrainOptions,
) -> Result<TrainOutcome, TrainError> {
    config.validate();
    assert!(!dataset.is_empty(), "training dataset is empty");
    model.config.encoder.attention_dropout = config.encoder_dropout;
    model.config.encoder.hidden_dropout = config.encoder_dropout;
    let hyper = LossHyper {
        label_smoothing: config.label_smoothing,
        layer_output_dropout: config.dropout,
        layer_dropout: config.layer_dropout,
    };

    // Cache segmentations, edit scripts, and tag ids up front.
    let vocabs = model.vocabs();
    let mut prepared = Vec::with_capacity(dataset.len());
    for (index, (sentence, treebank)) in dataset.sentences.iter().enumerate() {
        let words = sentence.forms();
        let targets = extract_targets(sentence, &vocabs).map_err(|source| {
            TrainError::MissingGold {
                index: index + 1,
                treebank: treebank.clone(),
                source,
            }
        })?;
        prepared.push(Prepared {
            segmentation: model.segment(&words),
            targets,
        });
    }

    let mut log_file = match options.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(fs::File::create(dir.join("metrics.tsv"))?)
        }
        None => None,
    };
    let mut log = String::new();
    let log_line = |file: &mut Option<fs::File>, log: &mut String, line: &str| -> Result<(), TrainError> {
        log.push_str(line);
        log.push('\n');
        if let Some(f) = file {
            writeln!(f, "{line}")?;
        }
        Ok(())
    };
    log_line(&mut log_file, &mut log, &format!("# seed\t{}", config.seed))?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(&model.store, config.beta1, config.beta2, config.weight_decay);
    let mut unfrozen_step: u64 = 0;
    let mut global_step: u64 = 0;
    let mut best: Option<(f64, usize)> = None;
    let mut per_epoch = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let plan = bucket_batches(dataset, config.batch_size, config.length_fuzz, &mut rng);
        let mut epoch_loss = 0.0;
        for batch in &plan.batches {
            global_step += 1;
            model.store.zero_grads();
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &index in batch {
                let prep = &prepared[index];
                let (masked, _) = mask_inputs(
                    &prep.segmentation.piece_ids,
                    config.mask_prob,
                    &model.subword,
                    &mut rng,
                );
                let mut graph = Graph::new();
                let loss = model.sentence_loss(
                    &mut graph,
                    &masked,
                    &prep.segmentation,
                    &prep.targets,
                    &hyper,
                    Some(&mut rng),
                );
                let scaled = graph.scale(loss, scale);
                batch_loss += graph.value(scaled).item();
                graph.backward(scaled);
                graph.accumulate_param_grads(&mut model.store);
            }
            if !batch_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    step: global_step,
                    loss: batch_loss,
                    treebanks: batch
                        .iter()
                        .map(|&i| dataset.sentences[i].1.clone())
                        .collect(),
                });
            }
            epoch_loss += batch_loss;

            clip_gradients(&mut model.store, config.grad_clip);
            if freeze_schedule(epoch) {
                unfrozen_step += 1;
            }
            let (encoder_lr, task_lr) = step_learning_rates(epoch, unfrozen_step.max(1), config);
            adam.step(&mut model.store, |p| match p.group {
                ParamGroup::Encoder => encoder_lr,
                ParamGroup::Task => task_lr,
            });
        }
        let train_loss = epoch_loss / plan.batches.len() as f64;

        let eval_now = epoch == config.epochs || epoch % options.eval_every.max(1) == 0;
        let dev = options.dev.filter(|_| eval_now).map(|gold| {
            let system: Vec<Sentence> = gold
                .iter()
                .map(|s| {
                    let mut out = s.clone();
                    model.annotate(&mut out);
                    out
                })
                .collect();
            evaluate(gold, &system, EvalOptions::default())
                .expect("predictions preserve alignment")
        });

        let fmt = |r: &EvalReport, f: fn(&EvalReport) -> crate::metrics::MetricCount| match f(r)
            .fraction()
        {
            Some(v) => format!("{v:.4}"),
            None => "-".to_string(),
        };
        let line = match &dev {
            Some(r) => format!(
                "{epoch}\t{train_loss:.6}\t{}\t{}\t{}\t{}\t{}",
                fmt(r, |r| r.upos),
                fmt(r, |r| r.ufeats),
                fmt(r, |r| r.lemmas),
                fmt(r, |r| r.uas),
                fmt(r, |r| r.las),
            ),
            None => format!("{epoch}\t{train_loss:.6}\t-\t-\t-\t-\t-"),
        };
        log_line(&mut log_file, &mut log, &line)?;

        if let Some(report) = &dev {
            let las = report.las.fraction().unwrap_or(0.0);
            if best.map_or(true, |(b, _)| las > b) {
                best = Some((las, epoch));
                if let Some(dir) = options.out_dir {
                    model.save_bundle(&dir.join("best"))?;
                }
            }
        }
        per_epoch.push(EpochMetrics {
            epoch,
            train_loss,
            dev,
        });
    }

    if let Some(dir) = options.out_dir {
        model.save_bundle(&dir.join("last"))?;
    }

    Ok(TrainOutcome {
        per_epoch,
        best_epoch: best.map(|(_, e)| e),
        metrics_log: log,
    })
}

/// The `last/` bundle inside a training output directory.
pub fn last_bundle_dir(out_dir: &Path) -> PathBuf {
    out_dir.join("last")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conllu::{concat_treebanks, parse_document};
    use crate::encoder::EncoderConfig;
    use crate::heads::TagVocabs;
    use crate::model::ModelConfig;
    use crate::subword::{MASK_PIECE, SEQ_END_PIECE, SEQ_START_PIECE, UNK_PIECE};

    #[test]
    fn noam_schedule_reference_points() {
        assert_eq!(noam_lr(8000, 8000, 1e-3), 1e-3);
        assert!((noam_lr(4000, 8000, 1e-3) - 5e-4).abs() < 1e-18);
        assert!((noam_lr(32000, 8000, 1e-3) - 5e-4).abs() < 1e-18);
    }

    #[test]
    fn noam_is_continuous_at_warmup_and_decreasing_after() {
        let warmup = 100;
        let peak = 2e-3;
        let before = noam_lr(warmup - 1, warmup, peak);
        let at = noam_lr(warmup, warmup, peak);
        let after = noam_lr(warmup + 1, warmup, peak);
        assert!(before < at && after < at);
        assert!((at - peak).abs() < 1e-18);
        let mut prev = at;
        for step in (warmup + 1)..(warmup + 500) {
            let lr = noam_lr(step, warmup, peak);
            assert!(lr < prev, "not strictly decreasing at step {step}");
            prev = lr;
        }
    }

    #[test]
    fn freezing_covers_exactly_the_first_epoch() {
        assert!(!freeze_schedule(1));
        assert!(freeze_schedule(2));
        assert!(freeze_schedule(80));
    }

    #[test]
    fn learning_rate_ratio_is_constant_after_unfreezing() {
        let config = TrainConfig::default();
        let (enc1, task1) = step_learning_rates(1, 1, &config);
        assert_eq!(enc1, 0.0);
        assert_eq!(task1, config.base_lr);
        for step in [1, 10, 8000, 50000] {
            let (enc, task) = step_learning_rates(2, step, &config);
            assert!((enc / task - config.encoder_lr / config.base_lr).abs() < 1e-15);
        }
    }

    fn tiny_subword() -> SubwordVocab {
        let mut pieces: Vec<String> = [UNK_PIECE, MASK_PIECE, SEQ_START_PIECE, SEQ_END_PIECE]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for c in "abcdefghijklmnopqrstuvwxyz.".chars() {
            pieces.push(c.to_string());
            pieces.push(format!("##{c}"));
        }
        SubwordVocab::from_pieces(pieces).unwrap()
    }

    #[test]
    fn masking_contract() {
        let vocab = tiny_subword();
        let ids: Vec<u32> = vec![
            vocab.seq_start_id(),
            vocab.id("a").unwrap(),
            vocab.id("b").unwrap(),
            vocab.id("##c").unwrap(),
            vocab.seq_end_id(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (unmasked, positions) = mask_inputs(&ids, 0.0, &vocab, &mut rng);
        assert_eq!(unmasked, ids);
        assert!(positions.is_empty());

        let (all_masked, positions) = mask_inputs(&ids, 1.0, &vocab, &mut rng);
        assert_eq!(positions, vec![1, 2, 3]);
        assert_eq!(all_masked[0], vocab.seq_start_id());
        assert_eq!(all_masked[4], vocab.seq_end_id());
        for &p in &positions {
            assert_eq!(all_masked[p], vocab.mask_id());
        }
    }

    #[test]
    fn masking_rate_is_binomial() {
        let vocab = tiny_subword();
        let content: Vec<u32> = std::iter::repeat(vocab.id("a").unwrap()).take(10_000).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (_, positions) = mask_inputs(&content, 0.2, &vocab, &mut rng);
        // 2000 +- 3 sigma (sigma = sqrt(10000 * 0.2 * 0.8) = 40).
        let masked = positions.len() as f64;
        assert!((masked - 2000.0).abs() < 120.0, "masked {masked} of 10000");
    }

    fn toy_dataset(sizes: &[(&str, usize)]) -> Dataset {
        let mut treebanks = Vec::new();
        for (name, count) in sizes {
            let sentences: Vec<Sentence> = (0..*count)
                .map(|i| {
                    // Lengths vary so sorting has something to do.
                    let n = 1 + (i % 5);
                    let lines: Vec<String> = (1..=n)
                        .map(|j| {
                            let head = if j == 1 { 0 } else { 1 };
                            let rel = if j == 1 { "root" } else { "dep" };
                            format!("{j}\ta\ta\tX\t_\t_\t{head}\t{rel}\t_\t_")
                        })
                        .collect();
                    parse_document(&(lines.join("\n") + "\n")).unwrap().remove(0)
                })
                .collect();
            treebanks.push((name.to_string(), sentences));
        }
        concat_treebanks(treebanks).unwrap()
    }

    #[test]
    fn batches_partition_the_dataset() {
        let dataset = toy_dataset(&[("A", 23)]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let plan = bucket_batches(&dataset, 4, 0.1, &mut rng);
        let mut seen: Vec<usize> = plan.batches.iter().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..23).collect::<Vec<_>>());
        assert!(plan.batches.iter().all(|b| b.len() <= 4));
    }

    #[test]
    fn zero_fuzz_sorts_strictly_by_length() {
        let dataset = toy_dataset(&[("A", 20)]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let plan = bucket_batches(&dataset, 5, 0.0, &mut rng);
        let lengths: Vec<usize> = plan
            .batches
            .iter()
            .flatten()
            .map(|&i| dataset.sentences[i].0.len())
            .collect();
        for pair in lengths.windows(2) {
            assert!(pair[0] <= pair[1]);
        }
    }

    #[test]
    fn fuzzed_batches_mix_treebanks() {
        let dataset = toy_dataset(&[("A", 40), ("B", 40)]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut mixed = 0;
        for _ in 0..20 {
            let plan = bucket_batches(&dataset, 8, 0.1, &mut rng);
            mixed += plan
                .batches
                .iter()
                .filter(|batch| {
                    let first = &dataset.sentences[batch[0]].1;
                    batch.iter().any(|&i| &dataset.sentences[i].1 != first)
                })
                .count();
        }
        assert!(mixed > 0, "no batch ever mixed treebanks across 20 epochs");
    }

    fn overfit_model(dataset: &Dataset) -> Model {
        let subword = tiny_subword();
        let vocabs = TagVocabs::from_sentences(dataset.sentences.iter().map(|(s, _)| s));
        let encoder = EncoderConfig {
            num_layers: 2,
            num_heads: 2,
            hidden_dim: 16,
            ff_dim: 32,
            max_positions: 32,
            vocab_size: subword.len(),
            attention_dropout: 0.0,
            hidden_dropout: 0.0,
        };
        let config = ModelConfig {
            encoder,
            arc_dim: 16,
            tag_dim: 8,
        };
        Model::new(config, subword, vocabs, 17)
    }

    fn overfit_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            base_lr: 0.02,
            encoder_lr: 0.02,
            warmup_steps: 20,
            batch_size: 1,
            epochs,
            mask_prob: 0.0,
            label_smoothing: 0.0,
            dropout: 0.0,
            encoder_dropout: 0.0,
            layer_dropout: 0.0,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.99,
            grad_clip: 5.0,
            length_fuzz: 0.0,
            seed: 13,
        }
    }

    #[test]
    fn one_sentence_is_memorized_in_two_hundred_steps() {
        let text = "1\tthe\tthe\tDET\t_\tDefinite=Def\t2\tdet\t_\t_\n2\tcat\tcat\tNOUN\t_\tNumber=Sing\t3\tnsubj\t_\t_\n3\tsleeps\tsleep\tVERB\t_\tNumber=Sing\t0\troot\t_\t_\n";
        let sentences = parse_document(text).unwrap();
        let dataset = concat_treebanks(vec![("toy".to_string(), sentences)]).unwrap();
        let mut model = overfit_model(&dataset);
        // Batch size 1 on one sentence: one step per epoch.
        let outcome = train(
            &mut model,
            &dataset,
            &overfit_config(200),
            &TrainOptions::default(),
        )
        .unwrap();
        let final_loss = outcome.per_epoch.last().unwrap().train_loss;
        assert!(
            final_loss < 0.01,
            "failed to memorize one sentence: final loss {final_loss}"
        );
        for m in &outcome.per_epoch {
            assert!(m.train_loss.is_finite());
        }
    }

    #[test]
    fn encoder_weights_do_not_move_during_the_frozen_epoch() {
        let dataset = toy_dataset(&[("A", 6)]);
        let mut model = overfit_model(&dataset);
        let snapshot: Vec<Vec<f64>> = model
            .store
            .iter()
            .filter(|(_, p)| p.group == ParamGroup::Encoder)
            .map(|(_, p)| p.value.data().to_vec())
            .collect();
        let mut config = overfit_config(1);
        config.batch_size = 2;
        train(&mut model, &dataset, &config, &TrainOptions::default()).unwrap();
        let after: Vec<Vec<f64>> = model
            .store
            .iter()
            .filter(|(_, p)| p.group == ParamGroup::Encoder)
            .map(|(_, p)| p.value.data().to_vec())
            .collect();
        assert_eq!(snapshot, after, "encoder moved during epoch 1");

        // One more epoch and they move.
        let mut config = overfit_config(2);
        config.batch_size = 2;
        let mut model = overfit_model(&dataset);
        train(&mut model, &dataset, &config, &TrainOptions::default()).unwrap();
        let after: Vec<Vec<f64>> = model
            .store
            .iter()
            .filter(|(_, p)| p.group == ParamGroup::Encoder)
            .map(|(_, p)| p.value.data().to_vec())
            .collect();
        assert_ne!(snapshot, after, "encoder never unfroze");
    }

    #[test]
    fn same_seed_runs_are_bit_identical() {
        let dataset = toy_dataset(&[("A", 8)]);
        let run = || {
            let mut model = overfit_model(&dataset);
            let mut config = overfit_config(3);
            config.batch_size = 4;
            config.mask_prob = 0.2;
            config.dropout = 0.3;
            config.layer_dropout = 0.1;
            config.encoder_dropout = 0.1;
            let outcome = train(&mut model, &dataset, &config, &TrainOptions::default()).unwrap();
            let weights: Vec<f64> = model
                .store
                .iter()
                .flat_map(|(_, p)| p.value.data().to_vec())
                .collect();
            (outcome.metrics_log, weights)
        };
        let (log_a, weights_a) = run();
        let (log_b, weights_b) = run();
        assert_eq!(log_a, log_b);
        assert_eq!(weights_a.len(), weights_b.len());
        for (a, b) in weights_a.iter().zip(&weights_b) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn dev_metrics_and_best_checkpoint_are_tracked() {
        let text = "1\tcat\tcat\tNOUN\t_\t_\t0\troot\t_\t_\n";
        let sentences = parse_document(text).unwrap();
        let dataset = concat_treebanks(vec![("toy".to_string(), sentences.clone())]).unwrap();
        let mut model = overfit_model(&dataset);
        let dir = tempfile::tempdir().unwrap();
        let outcome = train(
            &mut model,
            &dataset,
            &overfit_config(3),
            &TrainOptions {
                dev: Some(&sentences),
                out_dir: Some(dir.path()),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(outcome.best_epoch.is_some());
        assert!(dir.path().join("metrics.tsv").exists());
        assert!(dir.path().join("best/weights.udk").exists());
        assert!(dir.path().join("last/weights.udk").exists());
        let log = std::fs::read_to_string(dir.path().join("metrics.tsv")).unwrap();
        assert_eq!(log, outcome.metrics_log);
        assert!(log.starts_with("# seed\t13\n"));
        // Epoch lines carry 7 tab-separated fields.
        for line in log.lines().skip(1) {
            assert_eq!(line.split('\t').count(), 7, "bad line {line:?}");
        }
    }

    #[test]
    fn missing_gold_aborts_with_context() {
        let text = "1\tcat\t_\tNOUN\t_\t_\t0\troot\t_\t_\n";
        let sentences = parse_document(text).unwrap();
        let dataset = concat_treebanks(vec![("bank".to_string(), sentences)]).unwrap();
        let mut model = overfit_model(&dataset);
        match train(&mut model, &dataset, &overfit_config(1), &TrainOptions::default()) {
            Err(TrainError::MissingGold { index: 1, treebank, source }) => {
                assert_eq!(treebank, "bank");
                assert_eq!(source.field, "lemma");
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
