//! Command-line interface wiring the toolkit into train / predict /
//! evaluate / utility workflows.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use config::RunConfig;
use udkit::conllu::{concat_treebanks, parse_document, serialize_document, vocab_counts, Sentence};
use udkit::encoder::load_pretrained_encoder;
use udkit::heads::TagVocabs;
use udkit::lemma;
use udkit::metrics::{evaluate, format_report, machine_readable, EvalOptions};
use udkit::model::Model;
use udkit::subword::{tokenize_word, SubwordVocab};
use udkit::train::{train, TrainOptions};

#[derive(Parser)]
#[command(
    name = "udkit",
    about = "Multilingual multi-task Universal Dependencies toolkit",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a flat key = value config file.
    Train {
        /// Run configuration (see the README for the key list).
        config: PathBuf,
    },
    /// Annotate a CoNLL-U file with a trained model bundle.
    Predict {
        /// Bundle directory written by training (best/ or last/).
        checkpoint: PathBuf,
        /// Input CoNLL-U file.
        input: PathBuf,
        /// Output CoNLL-U path (written atomically).
        output: PathBuf,
    },
    /// Score a system CoNLL-U file against gold (gold segmentation).
    Evaluate {
        gold: PathBuf,
        system: PathBuf,
        /// Also print machine-readable `metric<TAB>value` lines.
        #[arg(long)]
        machine: bool,
        /// Compare dependency relations on the main type only, stripping
        /// `:` subtypes.
        #[arg(long)]
        strip_subtypes: bool,
    },
    /// Lemma edit-script utilities.
    #[command(subcommand, name = "lemma-script")]
    LemmaScript(LemmaScript),
    /// Distinct-string counts per annotation column over CoNLL-U files.
    VocabCounts {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Segment one word with a wordpiece vocabulary file.
    Tokenize { vocab: PathBuf, word: String },
}

#[derive(Subcommand)]
enum LemmaScript {
    /// Print the script tag turning FORM into LEMMA.
    Encode { form: String, lemma: String },
    /// Apply a script tag to FORM and print the resulting lemma.
    Apply { tag: String, form: String },
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Train { config } => cmd_train(&config),
        Command::Predict {
            checkpoint,
            input,
            output,
        } => cmd_predict(&checkpoint, &input, &output),
        Command::Evaluate {
            gold,
            system,
            machine,
            strip_subtypes,
        } => cmd_evaluate(&gold, &system, machine, strip_subtypes),
        Command::LemmaScript(LemmaScript::Encode { form, lemma }) => {
            let script = lemma::compute_lemma_script(&form, &lemma);
            println!("{}", lemma::encode_tag(&script));
            Ok(())
        }
        Command::LemmaScript(LemmaScript::Apply { tag, form }) => {
            let script = lemma::decode_tag(&tag)?;
            let (result, _fell_back) = lemma::apply_lemma_script(&script, &form);
            println!("{result}");
            Ok(())
        }
        Command::VocabCounts { files } => cmd_vocab_counts(&files),
        Command::Tokenize { vocab, word } => {
            let vocab = SubwordVocab::from_lines(
                &fs::read_to_string(&vocab)
                    .with_context(|| format!("reading vocabulary {}", vocab.display()))?,
            )?;
            let pieces: Vec<&str> = tokenize_word(&word, &vocab)
                .into_iter()
                .map(|id| vocab.piece(id))
                .collect();
            println!("{}", pieces.join(" "));
            Ok(())
        }
    }
}

fn read_treebank(path: &Path) -> Result<Vec<Sentence>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_document(&text).with_context(|| format!("parsing {}", path.display()))
}

fn treebank_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn cmd_train(config_path: &Path) -> Result<()> {
    let text = fs::read_to_string(config_path)
        .with_context(|| format!("reading config {}", config_path.display()))?;
    let run = RunConfig::parse(&text)?;

    // Every input must exist before any output directory appears.
    let mut required: Vec<&Path> = run.train_paths.iter().map(|p| p.as_path()).collect();
    required.push(&run.vocab_path);
    if let Some(dev) = &run.dev_path {
        required.push(dev);
    }
    if let Some(pre) = &run.pretrained_path {
        required.push(pre);
    }
    for path in required {
        if !path.exists() {
            bail!("input file {} does not exist", path.display());
        }
    }

    let vocab = SubwordVocab::from_lines(
        &fs::read_to_string(&run.vocab_path)
            .with_context(|| format!("reading vocabulary {}", run.vocab_path.display()))?,
    )?;

    let mut treebanks = Vec::new();
    for path in &run.train_paths {
        treebanks.push((treebank_id(path), read_treebank(path)?));
    }
    let dataset = concat_treebanks(treebanks)?;
    if dataset.is_empty() {
        bail!("training data is empty");
    }
    let dev = run.dev_path.as_ref().map(|p| read_treebank(p)).transpose()?;

    let vocabs = TagVocabs::from_sentences(dataset.sentences.iter().map(|(s, _)| s));
    let model_config = run.model_config(vocab.len());
    let mut model = Model::new(model_config, vocab, vocabs, run.train.seed);
    if let Some(pre) = &run.pretrained_path {
        load_pretrained_encoder(&mut model.store, pre)
            .with_context(|| format!("loading pretrained encoder from {}", pre.display()))?;
    }

    let outcome = train(
        &mut model,
        &dataset,
        &run.train,
        &TrainOptions {
            dev: dev.as_deref(),
            out_dir: Some(&run.output_dir),
            ..Default::default()
        },
    )?;

    let last = outcome.per_epoch.last().expect("at least one epoch");
    println!(
        "trained {} epochs on {} sentences; final loss {:.6}",
        run.train.epochs,
        dataset.len(),
        last.train_loss
    );
    if let Some(best) = outcome.best_epoch {
        println!(
            "best dev LAS at epoch {best} (bundle in {})",
            run.output_dir.join("best").display()
        );
    }
    println!("last checkpoint in {}", run.output_dir.join("last").display());
    Ok(())
}

fn cmd_predict(checkpoint: &Path, input: &Path, output: &Path) -> Result<()> {
    let model = Model::load_bundle(checkpoint)
        .with_context(|| format!("loading model bundle {}", checkpoint.display()))?;
    let mut sentences = read_treebank(input)?;
    for sentence in &mut sentences {
        model.annotate(sentence);
    }
    let text = serialize_document(&sentences);

    // Write to a temporary sibling and rename so failures never leave a
    // truncated output behind.
    if let Some(dir) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = output.to_path_buf();
    tmp.set_extension("tmp");
    fs::write(&tmp, text).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, output).with_context(|| format!("renaming into {}", output.display()))?;
    Ok(())
}

fn cmd_evaluate(gold: &Path, system: &Path, machine: bool, strip_subtypes: bool) -> Result<()> {
    let gold_doc = read_treebank(gold)?;
    let system_doc = read_treebank(system)?;
    let report = evaluate(
        &gold_doc,
        &system_doc,
        EvalOptions {
            strip_deprel_subtypes: strip_subtypes,
        },
    )?;
    print!("{}", format_report(&report));
    if machine {
        print!("{}", machine_readable(&report));
    }
    Ok(())
}

fn cmd_vocab_counts(files: &[PathBuf]) -> Result<()> {
    let mut treebanks = Vec::new();
    for path in files {
        treebanks.push((treebank_id(path), read_treebank(path)?));
    }
    let dataset = concat_treebanks(treebanks)?;
    let counts = vocab_counts(&dataset);
    println!("forms\t{}", counts.forms);
    println!("upos\t{}", counts.upos);
    println!("ufeats\t{}", counts.ufeats);
    println!("lemma_scripts\t{}", counts.lemma_scripts);
    println!("deprels\t{}", counts.deprels);
    Ok(())
}
