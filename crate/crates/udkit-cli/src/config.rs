//! Flat `key = value` run configuration.
//!
//! One file drives a whole training run: data paths, encoder and parser
//! architecture, and every training hyperparameter. Lines starting with
//! `#` are comments; unknown or duplicate keys are rejected so typos
//! cannot silently fall back to defaults. The `UDKIT_SEED` environment
//! variable overrides the configured seed.

use std::collections::HashSet;
use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use udkit::encoder::EncoderConfig;
use udkit::model::ModelConfig;
use udkit::train::TrainConfig;

/// A fully resolved run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Training treebanks (comma-separated in the file); each file is one
    /// treebank.
    pub train_paths: Vec<PathBuf>,
    pub dev_path: Option<PathBuf>,
    /// Wordpiece vocabulary, one piece per line.
    pub vocab_path: PathBuf,
    /// Where checkpoints and the metrics log go.
    pub output_dir: PathBuf,
    /// Optional checkpoint whose `encoder.*` arrays seed the encoder.
    pub pretrained_path: Option<PathBuf>,

    pub layers: usize,
    pub heads: usize,
    pub hidden_dim: usize,
    pub ff_dim: usize,
    pub max_positions: usize,
    pub arc_dim: usize,
    pub tag_dim: usize,

    pub train: TrainConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut train_paths = None;
        let mut dev_path = None;
        let mut vocab_path = None;
        let mut output_dir = None;
        let mut pretrained_path = None;

        let mut layers = 4usize;
        let mut heads = 4usize;
        let mut hidden_dim = 64usize;
        let mut ff_dim = 256usize;
        let mut max_positions = 128usize;
        let mut arc_dim = 768usize;
        let mut tag_dim = 256usize;
        let mut train = TrainConfig::default();

        let mut seen = HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {line_no}: expected key = value, got {line:?}"))?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                bail!("line {line_no}: duplicate key {key:?}");
            }

            let usize_of = |v: &str| {
                v.parse::<usize>()
                    .with_context(|| format!("line {line_no}: key {key:?} wants an integer, got {v:?}"))
            };
            let u64_of = |v: &str| {
                v.parse::<u64>()
                    .with_context(|| format!("line {line_no}: key {key:?} wants an integer, got {v:?}"))
            };
            let f64_of = |v: &str| {
                v.parse::<f64>()
                    .with_context(|| format!("line {line_no}: key {key:?} wants a number, got {v:?}"))
            };

            match key {
                "train_path" => {
                    train_paths = Some(value.split(',').map(|p| PathBuf::from(p.trim())).collect())
                }
                "dev_path" => dev_path = Some(PathBuf::from(value)),
                "vocab_path" => vocab_path = Some(PathBuf::from(value)),
                "output_dir" => output_dir = Some(PathBuf::from(value)),
                "pretrained_path" => pretrained_path = Some(PathBuf::from(value)),
                "layers" => layers = usize_of(value)?,
                "heads" => heads = usize_of(value)?,
                "hidden_dim" => hidden_dim = usize_of(value)?,
                "ff_dim" => ff_dim = usize_of(value)?,
                "max_positions" => max_positions = usize_of(value)?,
                "arc_dim" => arc_dim = usize_of(value)?,
                "tag_dim" => tag_dim = usize_of(value)?,
                "base_lr" => train.base_lr = f64_of(value)?,
                "encoder_lr" => train.encoder_lr = f64_of(value)?,
                "warmup_steps" => train.warmup_steps = u64_of(value)?,
                "batch_size" => train.batch_size = usize_of(value)?,
                "epochs" => train.epochs = usize_of(value)?,
                "mask_prob" => train.mask_prob = f64_of(value)?,
                "label_smoothing" => train.label_smoothing = f64_of(value)?,
                "dropout" => train.dropout = f64_of(value)?,
                "encoder_dropout" => train.encoder_dropout = f64_of(value)?,
                "layer_dropout" => train.layer_dropout = f64_of(value)?,
                "weight_decay" => train.weight_decay = f64_of(value)?,
                "beta1" => train.beta1 = f64_of(value)?,
                "beta2" => train.beta2 = f64_of(value)?,
                "grad_clip" => train.grad_clip = f64_of(value)?,
                "length_fuzz" => train.length_fuzz = f64_of(value)?,
                "seed" => train.seed = u64_of(value)?,
                other => bail!("line {line_no}: unknown key {other:?}"),
            }
        }

        if let Ok(seed) = std::env::var("UDKIT_SEED") {
            train.seed = seed
                .parse()
                .with_context(|| format!("UDKIT_SEED must be an integer, got {seed:?}"))?;
        }

        Ok(RunConfig {
            train_paths: train_paths.ok_or_else(|| anyhow!("missing required key \"train_path\""))?,
            dev_path,
            vocab_path: vocab_path.ok_or_else(|| anyhow!("missing required key \"vocab_path\""))?,
            output_dir: output_dir.ok_or_else(|| anyhow!("missing required key \"output_dir\""))?,
            pretrained_path,
            layers,
            heads,
            hidden_dim,
            ff_dim,
            max_positions,
            arc_dim,
            tag_dim,
            train,
        })
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                num_layers: self.layers,
                num_heads: self.heads,
                hidden_dim: self.hidden_dim,
                ff_dim: self.ff_dim,
                max_positions: self.max_positions,
                vocab_size,
                attention_dropout: self.train.encoder_dropout,
                hidden_dropout: self.train.encoder_dropout,
            },
            arc_dim: self.arc_dim,
            tag_dim: self.tag_dim,
        }
    }
}
